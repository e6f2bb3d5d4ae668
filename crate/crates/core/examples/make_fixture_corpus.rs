//! Regenerates the fixture corpus used by the integration tests.
//!
//! cargo run -p hwdyn-core --example make_fixture_corpus [-- <dir>]

use std::path::PathBuf;

#[path = "../tests/support/fixture_corpus.rs"]
mod fixture_corpus;

fn main() {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/corpus"));
    fixture_corpus::write_fixture_corpus(&root);
    println!("wrote {}", root.display());
}
