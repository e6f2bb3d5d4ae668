#![allow(dead_code)]

pub mod fixture_corpus;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use hwdyn_core::pipeline::PipelineConfig;

pub fn fixture_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/corpus")
}

/// Every file under `root`, keyed by its relative path.
pub fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(base, &path, out);
            } else {
                let rel = path.strip_prefix(base).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

pub fn copy_tree(from: &Path, to: &Path) {
    for (rel, bytes) in read_tree(from) {
        let dest = to.join(rel);
        fs::create_dir_all(dest.parent().unwrap()).unwrap();
        fs::write(dest, bytes).unwrap();
    }
}

/// Fixture config pointed at `corpus` and writing to `out`.
pub fn fixture_config(corpus: &Path, out: &Path) -> PipelineConfig {
    let mut config = PipelineConfig::load(&corpus.join("config.toml")).unwrap();
    config.out_dir = out.to_path_buf();
    config
}
