//! One check per acceptance criterion. Runs offline against the mock
//! backend and prints a PASS/FAIL line for each.

mod support;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use hwdyn_core::agreement::{
    chi_squared_independence, cohens_kappa, consensus, confusion_matrix, AgreementError, ConfusionMatrix, ConsensusPolicy,
    LabelledInstance,
};
use hwdyn_core::annotation::{code_behaviours, code_conflicts, coding_prompt, validate_annotations, BehaviourAnnotation, Role, RoleMap};
use hwdyn_core::codebook::{CodeKey, Codebook, Namespace, Valence};
use hwdyn_core::emotion::{bin_series, loess_smooth, window_first, SentenceEmotion, SmoothConfig};
use hwdyn_core::gateway::backend::AttemptError;
use hwdyn_core::gateway::correction::correction_prompt;
use hwdyn_core::gateway::{correct_transcript, BackendConfig, BackendKind, ChatBackend, ChunkPlan, Gateway, MockBackend, TemplateName};
use hwdyn_core::pipeline::{run_pipeline, SessionStatus, Stage, RUN_MANIFEST_FILE};
use hwdyn_core::special::chi_squared_upper_quantile;
use hwdyn_core::stats::{paired_t_test, pearson, significance_stars, StatsError};
use hwdyn_core::transcript::{segment_by_pause, SegmentationConfig, TimedSegment, Transcript, Utterance};
use hwdyn_core::validation::Severity;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use support::{fixture_config, fixture_root, read_tree};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// 1 ----------------------------------------------------------------------

/// Kappa straight from proportions, counting marginals per category.
fn kappa_oracle(a: &[u8], b: &[u8]) -> Option<f64> {
    let n = a.len() as f64;
    let po = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let pe: f64 = (0..3u8)
        .map(|c| {
            let ca = a.iter().filter(|&&x| x == c).count() as f64;
            let cb = b.iter().filter(|&&y| y == c).count() as f64;
            (ca / n) * (cb / n)
        })
        .sum();
    if pe == 1.0 {
        None
    } else {
        Some((po - pe) / (1.0 - pe))
    }
}

fn sequence(mut code: usize, len: usize) -> Vec<u8> {
    (0..len)
        .map(|_| {
            let d = (code % 3) as u8;
            code /= 3;
            d
        })
        .collect()
}

fn criterion_1() {
    let mut checked = 0usize;
    for len in 1..=6u32 {
        let count = 3usize.pow(len);
        for i in 0..count {
            let a = sequence(i, len as usize);
            for j in 0..count {
                let b = sequence(j, len as usize);
                match (cohens_kappa(&a, &b), kappa_oracle(&a, &b)) {
                    (Ok(k), Some(o)) => assert!(close(k.kappa, o, 1e-12), "{a:?} {b:?}: {} vs {o}", k.kappa),
                    (Err(AgreementError::Degenerate), None) => {}
                    (got, want) => panic!("{a:?} {b:?}: {got:?} vs oracle {want:?}"),
                }
                checked += 1;
            }
        }
    }
    assert_eq!(checked, (1..=6).map(|l| 9usize.pow(l)).sum::<usize>());

    for len in 2..=6usize {
        for i in 0..3usize.pow(len as u32) {
            let a = sequence(i, len);
            if a.iter().any(|&x| x != a[0]) {
                assert_eq!(cohens_kappa(&a, &a).unwrap().kappa, 1.0);
            }
        }
    }
    let k = cohens_kappa(&["x", "x", "y", "y"], &["x", "y", "x", "y"]).unwrap();
    assert_eq!(k.kappa, 0.0);
    let k = cohens_kappa(&["x", "x", "y", "y", "y"], &["x", "y", "y", "y", "y"]).unwrap();
    assert!(close(k.observed_agreement, 0.8, 1e-12));
    assert!(close(k.expected_agreement, 0.56, 1e-12));
    assert!(close(k.kappa, 0.24 / 0.44, 1e-12));
}

// 2 ----------------------------------------------------------------------

fn matrix(counts: [[u64; 2]; 2]) -> ConfusionMatrix {
    ConfusionMatrix {
        categories: vec!["a".into(), "b".into()],
        counts: counts.iter().map(|r| r.to_vec()).collect(),
    }
}

fn criterion_2() {
    let r = chi_squared_independence(&matrix([[10, 20], [20, 10]])).unwrap();
    assert!(close(r.statistic, 6.6667, 1e-3), "{}", r.statistic);
    assert_eq!(r.degrees_of_freedom, 1);
    assert!(close(r.p_value, 0.00982, 1e-4), "{}", r.p_value);

    let r = chi_squared_independence(&matrix([[3, 3], [3, 3]])).unwrap();
    assert_eq!(r.statistic, 0.0);
    assert!(close(r.p_value, 1.0, 1e-12));

    let crit = chi_squared_upper_quantile(0.05, 1.0);
    assert!(close(crit, 3.841, 1e-3), "{crit}");
    // table values for more degrees of freedom
    for (df, alpha, want) in [(2.0, 0.05, 5.991), (4.0, 0.05, 9.488), (1.0, 0.01, 6.635), (10.0, 0.05, 18.307)] {
        let got = chi_squared_upper_quantile(alpha, df);
        assert!(close(got, want, 1e-3), "df {df} alpha {alpha}: {got}");
    }

    // the same test built from label sequences
    let reference = ["a", "a", "b", "b", "b", "a"];
    let predicted = ["a", "a", "b", "b", "a", "b"];
    let m = confusion_matrix(&reference, &predicted, &["a".to_string(), "b".to_string()]).unwrap();
    assert_eq!(m.counts, vec![vec![2, 1], vec![1, 2]]);
    assert!(chi_squared_independence(&m).unwrap().statistic > 0.0);
}

// 3 ----------------------------------------------------------------------

fn instance(id: usize, votes: &[u8]) -> LabelledInstance {
    LabelledInstance {
        instance_id: format!("i{id}"),
        labels_by_coder: votes.iter().enumerate().map(|(c, v)| (format!("c{c}"), format!("L{v}"))).collect(),
    }
}

fn top_labels(votes: &[u8]) -> Vec<String> {
    let mut counts = [0usize; 4];
    for &v in votes {
        counts[v as usize] += 1;
    }
    let top = *counts.iter().max().unwrap();
    (0..4).filter(|&l| counts[l] == top).map(|l| format!("L{l}")).collect()
}

fn criterion_3() {
    let strategy = prop::collection::vec(prop::collection::vec(0u8..4, 1..8), 1..6);
    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&strategy, |vote_sets| {
            let instances: Vec<_> = vote_sets.iter().enumerate().map(|(i, v)| instance(i, v)).collect();
            let ties: Vec<String> = vote_sets
                .iter()
                .enumerate()
                .filter(|(_, v)| top_labels(v).len() > 1)
                .map(|(i, _)| format!("i{i}"))
                .collect();

            let mut calls: Vec<String> = Vec::new();
            let outcome = {
                let mut policy = ConsensusPolicy::with_arbitration(|inst, tied| {
                    calls.push(inst.instance_id.clone());
                    tied.last().cloned()
                });
                consensus(&instances, &mut policy).unwrap()
            };
            prop_assert_eq!(&calls, &ties);
            prop_assert_eq!(&outcome.arbitrated, &ties);
            for (i, votes) in vote_sets.iter().enumerate() {
                let label = &outcome.labels[&format!("i{i}")];
                let tops = top_labels(votes);
                prop_assert!(tops.contains(label));
                let has_vote = votes.iter().any(|&v| &format!("L{v}") == label);
                prop_assert!(has_vote);
                if tops.len() == 1 {
                    prop_assert_eq!(label, &tops[0]);
                }
            }

            let strict = consensus(&instances, &mut ConsensusPolicy::strict());
            match ties.first() {
                None => prop_assert_eq!(strict.unwrap().labels, outcome.labels),
                Some(first) => {
                    let tie_on_first = matches!(strict, Err(AgreementError::Tie { ref instance, .. }) if instance == first);
                    prop_assert!(tie_on_first);
                }
            }
            Ok(())
        })
        .unwrap();

    let out = consensus(&[instance(0, &[3, 3, 1, 3])], &mut ConsensusPolicy::strict()).unwrap();
    assert_eq!(out.labels["i0"], "L3");
    let err = consensus(
        &[instance(0, &[1, 2])],
        &mut ConsensusPolicy::with_arbitration(|_, _| Some("L0".into())),
    )
    .unwrap_err();
    assert!(matches!(err, AgreementError::ArbitrationOutsideTie { .. }));
}

// 4 ----------------------------------------------------------------------

fn criterion_4() {
    let pre = [4.0, 4.0, 3.0, 5.0];
    let post = [3.0, 2.0, 3.0, 4.0];
    let r = paired_t_test(&pre, &post).unwrap();
    assert!(close(r.t_statistic, -2.4495, 1e-3), "{}", r.t_statistic);
    assert_eq!(r.degrees_of_freedom, 3);
    assert!(close(r.p_value, 0.0917, 1e-3), "{}", r.p_value);
    // t = mean / (sd / sqrt(n)) with d = [-1, -2, 0, -1]
    assert!(close(r.t_statistic, -1.0 / ((2.0f64 / 3.0).sqrt() / 2.0), 1e-12));

    let back = paired_t_test(&post, &pre).unwrap();
    assert_eq!(back.t_statistic, -r.t_statistic);
    assert_eq!(back.p_value, r.p_value);

    let mut runner = TestRunner::new(Config {
        cases: 500,
        failure_persistence: None,
        ..Config::default()
    });
    let pairs = prop::collection::vec((-3i8..=3, -3i8..=3), 2..40);
    runner
        .run(&pairs, |pairs| {
            let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            match (paired_t_test(&a, &b), paired_t_test(&b, &a)) {
                (Ok(x), Ok(y)) => prop_assert_eq!(x.t_statistic, -y.t_statistic),
                (Err(StatsError::ZeroVariance), Err(StatsError::ZeroVariance)) => {}
                other => prop_assert!(false, "{:?}", other),
            }
            Ok(())
        })
        .unwrap();

    assert!(matches!(paired_t_test(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]), Err(StatsError::ZeroVariance)));
    assert!(matches!(paired_t_test(&[1.0, 2.0], &[1.0, 2.0]), Err(StatsError::ZeroVariance)));
}

// 5 ----------------------------------------------------------------------

/// Local linear fit at every point, written out longhand: sort distances to
/// find the bandwidth, then solve the 2x2 weighted normal equations by
/// Cramer's rule.
fn wls_oracle(points: &[(f64, f64)], frac: f64) -> Vec<(f64, f64)> {
    let n = points.len();
    let k = (frac * n as f64).ceil() as usize;
    let mut out = Vec::new();
    for &(x0, _) in points {
        let mut d: Vec<f64> = points.iter().map(|(x, _)| (x - x0).abs()).collect();
        d.sort_by(f64::total_cmp);
        let h = d[k - 1];
        let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(x, y) in points {
            let u = (x - x0).abs() / h;
            if u >= 1.0 {
                continue;
            }
            let w = (1.0 - u * u * u).powi(3);
            let dx = x - x0;
            s0 += w;
            s1 += w * dx;
            s2 += w * dx * dx;
            t0 += w * y;
            t1 += w * dx * y;
        }
        let det = s0 * s2 - s1 * s1;
        // a single weighted point has no slope; fall back to the weighted mean.
        // Otherwise the intercept of the centred fit is the value at x0
        let a = if det == 0.0 { t0 / s0 } else { (t0 * s2 - s1 * t1) / det };
        out.push((x0, a));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn noisy_20() -> Vec<(f64, f64)> {
    (0..20)
        .map(|i| {
            let t = i as f64 * 15.0 + ((i * i) % 7) as f64;
            let y = (t / 40.0).sin() + 0.3 * (((i * 37) % 11) as f64 / 11.0 - 0.5);
            (t, y)
        })
        .collect()
}

fn smooth(points: &[(f64, f64)], frac: f64) -> Vec<(f64, f64)> {
    loess_smooth(points, &SmoothConfig { frac, degree: 1 }).unwrap()
}

fn criterion_5() {
    let constant: Vec<(f64, f64)> = (0..40).map(|i| (i as f64 * 15.0 + (i % 3) as f64, 0.37)).collect();
    for (_, y) in smooth(&constant, 0.1) {
        assert!(close(y, 0.37, 1e-9));
    }
    let line: Vec<(f64, f64)> = (0..30).map(|i| (i as f64 * 7.0, 2.5 - 0.04 * i as f64 * 7.0)).collect();
    for (t, y) in smooth(&line, 1.0) {
        assert!(close(y, 2.5 - 0.04 * t, 1e-9), "{t}: {y}");
    }

    let points = noisy_20();
    for frac in [0.1, 0.3, 0.5, 1.0] {
        let got = smooth(&points, frac);
        let want = wls_oracle(&points, frac);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.0, w.0);
            assert!(close(g.1, w.1, 1e-9), "frac {frac} t {}: {} vs {}", g.0, g.1, w.1);
        }
    }

    let base = smooth(&points, 0.3);
    let mut shuffled = points.clone();
    shuffled.reverse();
    shuffled.swap(3, 11);
    shuffled.swap(0, 7);
    for (a, b) in smooth(&shuffled, 0.3).iter().zip(&base) {
        assert!(close(a.1, b.1, 1e-9));
    }
    let (c, d) = (3.5, -250.0);
    let scaled: Vec<_> = points.iter().map(|&(t, y)| (2.0 * t + 10.0, c * y + d)).collect();
    for (a, b) in smooth(&scaled, 0.3).iter().zip(&base) {
        assert!(close(a.0, 2.0 * b.0 + 10.0, 1e-9));
        assert!(close(a.1, c * b.1 + d, 1e-9), "{} vs {}", a.1, c * b.1 + d);
    }
}

// 6 ----------------------------------------------------------------------

fn emotion(i: usize, time_ms: i64, pleasure: f64) -> SentenceEmotion {
    SentenceEmotion {
        utterance_id: i as u32 + 1,
        time_ms,
        pleasure,
        arousal: None,
        dominance: None,
    }
}

fn criterion_6() {
    let mut runner = TestRunner::new(Config {
        cases: 1_000,
        failure_persistence: None,
        ..Config::default()
    });
    let sessions = (
        prop::collection::vec((0i64..1_800_000, -1.0f64..1.0), 0..200),
        prop::sample::select(vec![5_000i64, 15_000, 30_000, 60_000]),
        0i64..1_800_000,
    );
    runner
        .run(&sessions, |(raw, width, window)| {
            let scores: Vec<_> = raw.iter().enumerate().map(|(i, &(t, p))| emotion(i, t, p)).collect();
            let series = bin_series("s", &scores, width).unwrap();
            let mass: f64 = series.values.iter().map(|b| b.mean * b.count as f64).sum();
            let total: f64 = scores.iter().map(|s| s.pleasure).sum();
            prop_assert!(close(mass, total, 1e-9), "{} vs {}", mass, total);
            prop_assert_eq!(series.values.iter().map(|b| b.count).sum::<usize>(), scores.len());
            for b in &series.values {
                let members = scores.iter().filter(|s| s.time_ms / width == b.bin_index).count();
                prop_assert_eq!(members, b.count);
            }
            let once = window_first(&series, window);
            prop_assert_eq!(window_first(&once, window), once.clone());
            prop_assert!(once.values.iter().all(|b| b.bin_index * width < window));
            Ok(())
        })
        .unwrap();
}

// 7 ----------------------------------------------------------------------

fn criterion_7() {
    assert!(close(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap().r, 1.0, 1e-9));
    assert!(close(pearson(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap().r, -1.0, 1e-9));
    // cov = 2, var_x = var_y = 5 over the sums of squares
    assert!(close(pearson(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap().r, 0.6, 1e-9));

    assert_eq!(significance_stars(0.05), "");
    assert_eq!(significance_stars(0.049_999_999), "*");
    assert_eq!(significance_stars(0.03), "*");
    assert_eq!(significance_stars(0.01), "*");
    assert_eq!(significance_stars(0.009), "**");
    assert_eq!(significance_stars(0.001), "**");
    assert_eq!(significance_stars(0.0005), "***");
    assert_eq!(significance_stars(0.5), "");
    let ps: Vec<f64> = (0..=2000).map(|i| i as f64 / 2000.0 * 0.1).collect();
    let rank = |s: &str| s.len();
    for w in ps.windows(2) {
        assert!(rank(significance_stars(w[0])) >= rank(significance_stars(w[1])));
    }
}

// 8 ----------------------------------------------------------------------

const BEHAVIOURS: [(Valence, &str, &str); 18] = [
    (Valence::Positive, "ENC", "Encouragement"),
    (Valence::Positive, "LP", "Labelled Praise"),
    (Valence::Positive, "UP", "Unlabelled Praise"),
    (Valence::Positive, "GI", "Guided Inquiry"),
    (Valence::Positive, "SR", "Setting Rules"),
    (Valence::Positive, "SRS", "Sensitive Response"),
    (Valence::Neutral, "DI", "Direct Instruction"),
    (Valence::Neutral, "IT", "Information Teaching"),
    (Valence::Neutral, "EC", "Error Correction"),
    (Valence::Neutral, "MON", "Monitoring"),
    (Valence::Neutral, "DC", "Direct Command"),
    (Valence::Neutral, "IC", "Indirect Command"),
    (Valence::Negative, "CB", "Criticism and Blame"),
    (Valence::Negative, "FT", "Forcing and Threatening"),
    (Valence::Negative, "NI", "Neglect and Indifference"),
    (Valence::Negative, "BD", "Belittling and Doubting"),
    (Valence::Negative, "FD", "Frustration and Disappointment"),
    (Valence::Negative, "II", "Impatience and Irritation"),
];

const CONFLICTS: [(&str, &str); 7] = [
    ("EC", "Expectation Conflict"),
    ("CC", "Communication Conflict"),
    ("LMC", "Learning Method Conflict"),
    ("RC", "Rule Conflict"),
    ("TMC", "Time Management Conflict"),
    ("KC", "Knowledge Conflict"),
    ("FC", "Focus Conflict"),
];

fn criterion_8() {
    let cb = Codebook::shipped();
    assert_eq!(cb.behaviours.len(), 18);
    assert_eq!(cb.conflicts.len(), 7);
    for v in Valence::ALL {
        assert_eq!(cb.behaviours.iter().filter(|b| b.valence == v).count(), 6, "{v}");
    }
    for (valence, abbrev, name) in BEHAVIOURS {
        let key = CodeKey::new(Namespace::Behaviour, abbrev);
        let code = cb.behaviour(&key).unwrap_or_else(|| panic!("missing {abbrev}"));
        assert_eq!(code.display_name, name);
        assert_eq!(code.valence, valence);
    }
    for (abbrev, name) in CONFLICTS {
        assert_eq!(cb.conflict(&CodeKey::new(Namespace::Conflict, abbrev)).unwrap().display_name, name);
    }

    for b in &cb.behaviours {
        let mut forms = vec![b.abbrev.clone(), b.display_name.clone(), format!("{} ({})", b.display_name, b.abbrev)];
        forms.extend(b.aliases.iter().cloned());
        forms.extend(b.aliases.iter().map(|a| format!("{a} ({})", b.abbrev)));
        forms.push(b.display_name.to_uppercase());
        for f in forms {
            assert_eq!(cb.resolve_code(&f, Namespace::Behaviour).unwrap(), b.key, "{f}");
        }
    }
    for c in &cb.conflicts {
        for f in [c.abbrev.clone(), c.display_name.clone(), format!("{} ({})", c.display_name, c.abbrev)] {
            assert_eq!(cb.resolve_code(&f, Namespace::Conflict).unwrap(), c.key, "{f}");
        }
    }
    assert_eq!(cb.resolve_code("EC", Namespace::Behaviour).unwrap().as_str(), "behaviour.EC");
    assert_eq!(cb.resolve_code("EC", Namespace::Conflict).unwrap().as_str(), "conflict.EC");
    assert!(cb.resolve_code("Expectation Conflict", Namespace::Behaviour).is_err());
    assert!(cb.resolve_code("Error Correction", Namespace::Conflict).is_err());
    assert!(cb.resolve_code("Error Correction (EC)", Namespace::Conflict).is_err());
}

// 9 ----------------------------------------------------------------------

/// Output tree with the run manifest's timing block removed.
fn run_snapshot(out: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut tree = read_tree(out);
    let manifest = tree.get_mut(RUN_MANIFEST_FILE).expect("run manifest written");
    let mut value: serde_json::Value = serde_json::from_slice(manifest).unwrap();
    value.as_object_mut().unwrap().remove("timing");
    *manifest = serde_json::to_vec_pretty(&value).unwrap();
    tree
}

fn criterion_9() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = fixture_config(&fixture_root(), &out);

    let first = run_pipeline(&config, Stage::Run).unwrap();
    assert_eq!(first.count(SessionStatus::Ok), 3);
    assert_eq!(first.sessions.len(), 3);
    let a = run_snapshot(&out);
    fs::remove_dir_all(&out).unwrap();
    let second = run_pipeline(&config, Stage::Run).unwrap();
    assert_eq!(second.count(SessionStatus::Ok), 3);
    let b = run_snapshot(&out);
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in &a {
        assert!(b[name] == *bytes, "{name} differs between runs");
    }
    for needed in ["behaviours.json", "conflicts.json", "features.json"] {
        assert_eq!(a.keys().filter(|k| k.ends_with(needed)).count(), 3, "{needed}");
    }
    assert!(a.keys().any(|k| k.starts_with("reports/")));

    let segments: Vec<TimedSegment> = support::fixture_corpus::opening_segments()
        .into_iter()
        .map(|(s, e, who, text)| TimedSegment::new(s, e, who, text))
        .collect();
    let t = segment_by_pause(&segments, &SegmentationConfig::new(2_000).unwrap()).unwrap();
    let spans: Vec<(u32, i64, i64, &str)> = t
        .utterances
        .iter()
        .map(|u| (u.id, u.start_ms, u.end_ms, u.speaker_label.as_str()))
        .collect();
    // 0.8 s and 2.0 s gaps join; 2.1 s splits; a speaker change always splits
    assert_eq!(
        spans,
        [
            (1, 0, 6_900, "Speaker 1"),
            (2, 8_000, 9_500, "Speaker 2"),
            (3, 11_600, 12_400, "Speaker 2"),
            (4, 13_000, 15_000, "Speaker 1"),
        ]
    );
    assert_eq!(t.utterances[0].content, "今天的数学做业写完了吗 先拿出来给我看看 快一点");

    let stored: serde_json::Value =
        serde_json::from_slice(&a["sessions/P01_2024-03-04/transcript.json"]).unwrap();
    let text = stored.to_string();
    assert!(text.contains("今天的数学作业写完了吗 先拿出来给我看看 快一点"), "{text}");
}

// 10 ---------------------------------------------------------------------

fn small_transcript(n: u32) -> Transcript {
    Transcript::new(
        (1..=n)
            .map(|i| Utterance {
                id: i,
                speaker_label: format!("Speaker {}", (i + 1) % 2 + 1),
                start_ms: i as i64 * 4_000,
                end_ms: i as i64 * 4_000 + 1_000,
                content: format!("第{i}句，原样保留"),
            })
            .collect(),
    )
}

fn correction_reply(ids: &[u32]) -> String {
    let body: Vec<String> = ids.iter().map(|i| format!("{{'id': {i}, 'content': '改{i}'}}")).collect();
    format!("```python\n[{}]\n```", body.join(", "))
}

/// Answers with a short list first and a complete one afterwards.
struct ShortThenFull {
    calls: AtomicUsize,
    short: String,
    full: String,
}

impl ChatBackend for ShortThenFull {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn send(&self, _prompt: &str) -> Result<String, AttemptError> {
        let first = self.calls.fetch_add(1, Ordering::SeqCst) == 0;
        Ok(if first { self.short.clone() } else { self.full.clone() })
    }
}

fn criterion_10() {
    let t = small_transcript(4);
    let prompt = correction_prompt(&t.utterances).unwrap();

    let mut mock = MockBackend::new();
    mock.register(&prompt, correction_reply(&[1, 2, 3]));
    let out = correct_transcript(&t, &Gateway::mock(mock), &ChunkPlan::default()).unwrap();
    assert_eq!(out.requests, 2);
    assert_eq!(out.transcript, t);
    for (a, b) in out.transcript.utterances.iter().zip(&t.utterances) {
        assert_eq!(a.content.as_bytes(), b.content.as_bytes());
    }
    assert_eq!(out.report.warnings(), 1);
    assert!(out.report.messages()[0].contains("length mismatch"));

    let backend = ShortThenFull {
        calls: AtomicUsize::new(0),
        short: correction_reply(&[1, 2]),
        full: correction_reply(&[1, 2, 3, 4]),
    };
    let gateway = Gateway::with_backend(BackendConfig::mock(), Arc::new(backend)).unwrap();
    let out = correct_transcript(&t, &gateway, &ChunkPlan::default()).unwrap();
    assert_eq!(out.requests, 2);
    assert!(out.report.is_empty());
    assert_eq!(out.transcript.utterances[3].content, "改4");

    let roles = RoleMap {
        assignments: BTreeMap::from([("Speaker 1".into(), Role::Parent), ("Speaker 2".into(), Role::Child)]),
    };
    let cb = Codebook::shipped();
    let records = [
        r#"{"behaviour_id": 1, "Start ID": 1, "End ID": 2, "Description of behavior": "d", "Parent Behavior": "p", "code": "GI"}"#,
        r#"{"behaviour_id": 2, "Start ID": 3, "End ID": 2, "Description of behavior": "d", "Parent Behavior": "p", "code": "LP"}"#,
        r#"{"behaviour_id": 3, "Start ID": 3, "End ID": 4, "Description of behavior": "d", "Parent Behavior": "p", "code": "Shouting"}"#,
    ];
    let mut mock = MockBackend::new();
    mock.register(
        &coding_prompt(TemplateName::BehaviourCoding, &t, &roles).unwrap(),
        format!("```json\n[{}]\n```", records.join(", ")),
    );
    let conflicts = [
        r#"{"scene_id": 1, "Start ID": 1, "End ID": 3, "trigger": "t", "process": "p", "parent_behavior": "pb", "child_behavior": "cb", "conflict_type": "KC", "severity": "medium"}"#,
        r#"{"scene_id": 2, "Start ID": 2, "End ID": 4, "trigger": "t", "process": "p", "parent_behavior": "pb", "child_behavior": "cb", "conflict_type": "FC", "severity": "extreme"}"#,
    ];
    mock.register(
        &coding_prompt(TemplateName::ConflictCoding, &t, &roles).unwrap(),
        format!("```json\n[{}]\n```", conflicts.join(", ")),
    );
    let gateway = Gateway::mock(mock);

    let b = code_behaviours(&t, &roles, &cb, &gateway).unwrap();
    assert_eq!(b.annotations.iter().map(|a| a.behaviour_id).collect::<Vec<_>>(), [1, 3]);
    let reversed = b.report.findings.iter().find(|f| f.message.contains("span reversed")).unwrap();
    assert_eq!(reversed.severity, Severity::Error);
    let unknown = b.report.findings.iter().find(|f| f.message.contains("Shouting")).unwrap();
    assert_eq!(unknown.severity, Severity::Warning);
    assert_eq!(b.annotations[1].unresolved_codes, ["Shouting"]);

    let c = code_conflicts(&t, &roles, &cb, &gateway).unwrap();
    assert_eq!(c.annotations.len(), 1);
    let severity = c.report.findings.iter().find(|f| f.message.contains("invalid severity")).unwrap();
    assert_eq!(severity.severity, Severity::Error);

    // the same checks on records that reach validation directly
    let bad = BehaviourAnnotation {
        behaviour_id: 9,
        start_id: 4,
        end_id: 1,
        description: "d".into(),
        parent_utterance: String::new(),
        code_text: "LP".into(),
        codes: vec![CodeKey::new(Namespace::Behaviour, "LP")],
        unresolved_codes: vec![],
    };
    let report = validate_annotations(&[bad], &[], &t, &cb);
    assert!(report.findings.iter().any(|f| f.severity == Severity::Error && f.message.contains("span reversed")));
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn()); 10] = [
        ("kappa matches brute-force oracle", criterion_1),
        ("chi-squared fixtures and critical values", criterion_2),
        ("consensus and arbitration", criterion_3),
        ("paired t-test", criterion_4),
        ("LOESS fixtures and WLS oracle", criterion_5),
        ("binning mass and windowing", criterion_6),
        ("Pearson and significance stars", criterion_7),
        ("codebook integrity", criterion_8),
        ("end-to-end determinism", criterion_9),
        ("contract enforcement", criterion_10),
    ];
    let default_hook = panic::take_hook();
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check));
        let mark = if outcome.is_ok() { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {mark}  {name}", i + 1);
        if outcome.is_err() {
            failed.push(i + 1);
        }
    }
    panic::set_hook(default_hook);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
