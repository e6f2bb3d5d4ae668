//! Builds the three-session fixture corpus: raw recordings, surveys, sentence
//! scores, expert labels, and the mock responses for every prompt the
//! pipeline sends. Shared by the `make_fixture_corpus` example and the
//! staleness test.

use std::fs;
use std::path::Path;

use hwdyn_core::annotation::{coding_prompt, role_prompt, Role, RoleMap};
use hwdyn_core::emotion::{write_scores_csv, SentenceEmotion};
use hwdyn_core::gateway::correction::correction_prompt;
use hwdyn_core::gateway::template::TemplateName;
use hwdyn_core::gateway::MockBackend;
use hwdyn_core::store::{ingest_recordings, RawRecording};
use hwdyn_core::transcript::{RawSegment, SegmentationConfig, Transcript};
use serde_json::json;

const PARENT_LINES: [&str; 10] = [
    "这道题你再读一遍题目",
    "先把做业本拿出来",
    "你看这里是不是算错了",
    "写字要端正一点",
    "做得不错继续保持",
    "为什么又在玩橡皮",
    "十分钟内把这页写完",
    "你想想老师上课怎么讲的",
    "这个单词怎么拼的",
    "别着急慢慢来",
];

const CHILD_LINES: [&str; 8] = [
    "我不会做这道题",
    "我已经写完了",
    "妈妈这个怎么读",
    "我想先休息一下",
    "好的我知道了",
    "老师没有讲过这个",
    "这个做业太难了",
    "我再检查一遍",
];

type Seg = (i64, i64, &'static str, String);

fn line(pool: &[&str], i: usize) -> String {
    pool[i % pool.len()].to_string()
}

/// Regular turns every 15 s from `start_ms`, alternating speakers. Every
/// fourth turn is two segments 1.2 s apart, which the pause rule joins.
fn generated_turns(seed: usize, start_ms: i64, count: usize) -> Vec<Seg> {
    let mut segs = Vec::new();
    for j in 0..count {
        let t = start_ms + j as i64 * 15_000;
        let (speaker, text) = if (j + seed).is_multiple_of(2) {
            ("Speaker 1", line(&PARENT_LINES, j * 3 + seed))
        } else {
            ("Speaker 2", line(&CHILD_LINES, j * 5 + seed))
        };
        if j % 4 == 1 {
            segs.push((t, t + 1_500, speaker, text));
            segs.push((t + 2_700, t + 4_000, speaker, "听到了吗".to_string()));
        } else {
            segs.push((t, t + 3_000, speaker, text));
        }
    }
    segs
}

/// The opening of the first session, with boundaries worked out by hand in
/// the acceptance test: gaps of 800 ms and exactly 2000 ms join, a speaker
/// change splits, and a 2100 ms gap splits.
pub fn opening_segments() -> Vec<Seg> {
    vec![
        (0, 1_500, "Speaker 1", "今天的数学做业写完了吗".into()),
        (2_300, 3_800, "Speaker 1", "先拿出来给我看看".into()),
        (5_800, 6_900, "Speaker 1", "快一点".into()),
        (8_000, 9_500, "Speaker 2", "还没有写完".into()),
        (11_600, 12_400, "Speaker 2", "嗯".into()),
        (13_000, 15_000, "Speaker 1", "那你现在就开始写".into()),
    ]
}

struct SessionPlan {
    participant: &'static str,
    date: &'static str,
    recordings: Vec<(&'static str, i64, Vec<Seg>)>,
    survey: [[u8; 3]; 2],
}

fn plans() -> Vec<SessionPlan> {
    let mut first = opening_segments();
    first.extend(generated_turns(0, 30_000, 20));
    vec![
        SessionPlan {
            participant: "P01",
            date: "2024-03-04",
            recordings: vec![("P01-0304-a", 0, first)],
            survey: [[3, 3, 3], [2, 4, 3]],
        },
        SessionPlan {
            participant: "P01",
            date: "2024-03-05",
            recordings: vec![("P01-0305-a", 0, generated_turns(1, 0, 24))],
            survey: [[4, 2, 3], [4, 3, 2]],
        },
        SessionPlan {
            participant: "P02",
            date: "2024-03-04",
            recordings: vec![
                ("P02-0304-b", 400_000, generated_turns(3, 0, 10)),
                ("P02-0304-a", 0, generated_turns(2, 0, 14)),
            ],
            survey: [[2, 3, 4], [3, 3, 3]],
        },
    ]
}

fn raw_recordings(plan: &SessionPlan) -> Vec<RawRecording> {
    plan.recordings
        .iter()
        .map(|(id, offset, segs)| RawRecording {
            recording_id: id.to_string(),
            offset_ms: *offset,
            segments: segs
                .iter()
                .map(|(s, e, sp, text)| RawSegment {
                    start_ms: Some(*s),
                    end_ms: Some(*e),
                    speaker: sp.to_string(),
                    text: text.clone(),
                })
                .collect(),
        })
        .collect()
}

fn recordings_json(plan: &SessionPlan) -> serde_json::Value {
    json!(plan
        .recordings
        .iter()
        .map(|(id, offset, segs)| json!({
            "recording_id": id,
            "offset_ms": offset,
            "segments": segs.iter().map(|(s, e, sp, text)| json!({
                "start_ms": s, "end_ms": e, "speaker": sp, "text": text
            })).collect::<Vec<_>>(),
        }))
        .collect::<Vec<_>>())
}

fn write_pretty(path: &Path, value: &serde_json::Value) {
    let mut text = serde_json::to_string_pretty(value).unwrap();
    text.push('\n');
    fs::write(path, text).unwrap();
}

fn python_records(records: &[serde_json::Value]) -> String {
    let body: Vec<String> = records.iter().map(|r| format!("  {r}")).collect();
    format!("```python\n[\n{}\n]\n```", body.join(",\n"))
}

fn scores(t: &Transcript, seed: usize) -> Vec<SentenceEmotion> {
    t.utterances
        .iter()
        .enumerate()
        .map(|(i, u)| SentenceEmotion {
            utterance_id: u.id,
            time_ms: u.start_ms + (u.end_ms - u.start_ms) / 2,
            pleasure: 2.0 + ((i * 37 + seed * 11) % 17) as f64 / 8.0,
            arousal: None,
            dominance: None,
        })
        .collect()
}

/// `(behaviour_id, start, end, code)` drawn from the transcript length.
fn behaviour_plan(n: u32, seed: usize) -> Vec<(u32, u32, u32, &'static str)> {
    const CODES: [&str; 9] = ["GI", "DC", "LP", "EC", "CB", "IT", "MON", "SR, CB", "ENC"];
    (0..6u32)
        .map(|k| {
            let start = 1 + k * (n / 6);
            let end = (start + 1 + k % 2).min(n);
            (k + 1, start, end, CODES[(k as usize * 2 + seed) % CODES.len()])
        })
        .collect()
}

fn conflict_plan(n: u32, seed: usize) -> Vec<(u32, u32, u32, &'static str, &'static str)> {
    const TYPES: [&str; 7] = ["KC", "Focus Conflict", "TMC", "Rule Conflict (RC)", "CC", "LMC", "EC"];
    const SEVERITY: [&str; 3] = ["High", "Medium", "Low"];
    (0..3u32)
        .map(|k| {
            let start = 2 + k * (n / 3);
            (k + 1, start, (start + 2).min(n), TYPES[(k as usize * 3 + seed) % 7], SEVERITY[(k as usize + seed) % 3])
        })
        .collect()
}

fn abbrev_of(code: &str) -> &str {
    match code {
        "Focus Conflict" => "FC",
        "Rule Conflict (RC)" => "RC",
        other => other.split(',').next().unwrap().trim(),
    }
}

/// Three expert coders. Most instances agree with the model; a few
/// disagreements are spread across coders, and one behaviour instance is a
/// three-way tie settled by the arbitration file.
fn expert_rows(instances: &[(String, String)], alternatives: &[&str]) -> (String, Option<String>) {
    let mut out = String::from("instance_id,coder_id,label\n");
    let mut arbitration = None;
    for (k, (id, model)) in instances.iter().enumerate() {
        let alt = |o: usize| {
            let mut a = alternatives[(k + o) % alternatives.len()];
            if a == model {
                a = alternatives[(k + o + 1) % alternatives.len()];
            }
            a.to_string()
        };
        let (e1, e2, e3) = match k % 5 {
            0 => (model.clone(), model.clone(), model.clone()),
            1 => (model.clone(), alt(1), model.clone()),
            2 => (model.clone(), model.clone(), alt(2)),
            3 => (alt(3), model.clone(), model.clone()),
            _ => (model.clone(), model.clone(), model.clone()),
        };
        let (e1, e2, e3) = if k == 7 {
            let a = alt(1);
            let mut b = alt(2);
            if b == a {
                b = alternatives.iter().find(|x| **x != a && **x != model).unwrap().to_string();
            }
            arbitration = Some(format!("instance_id,label\n{id},{a}\n"));
            (model.clone(), a, b)
        } else {
            (e1, e2, e3)
        };
        for (coder, label) in [("E1", e1), ("E2", e2), ("E3", e3)] {
            out.push_str(&format!("{id},{coder},{label}\n"));
        }
    }
    (out, arbitration)
}

/// Writes the corpus under `root`, replacing anything already there.
pub fn write_fixture_corpus(root: &Path) {
    if root.exists() {
        fs::remove_dir_all(root).unwrap();
    }
    let mut mock = MockBackend::new();
    let mut behaviour_instances = Vec::new();
    let mut conflict_instances = Vec::new();
    for (seed, plan) in plans().iter().enumerate() {
        let id = format!("{}_{}", plan.participant, plan.date);
        let dir = root.join("sessions").join(&id);
        fs::create_dir_all(&dir).unwrap();
        write_pretty(&dir.join("manifest.json"), &json!({"participant_id": plan.participant, "session_date": plan.date}));
        write_pretty(&dir.join("recordings.json"), &recordings_json(plan));
        let [pre, post] = plan.survey;
        write_pretty(
            &dir.join("survey.json"),
            &json!({
                "pre": {"pleasure": pre[0], "arousal": pre[1], "dominance": pre[2]},
                "post": {"pleasure": post[0], "arousal": post[1], "dominance": post[2]},
            }),
        );

        let (ingested, _) = ingest_recordings(raw_recordings(plan), &SegmentationConfig::default()).unwrap();
        write_scores_csv(fs::File::create(dir.join("scores.csv")).unwrap(), &scores(&ingested, seed)).unwrap();

        let fixed: Vec<serde_json::Value> = ingested
            .utterances
            .iter()
            .map(|u| json!({"id": u.id, "content": u.content.replace("做业", "作业")}))
            .collect();
        mock.register(&correction_prompt(&ingested.utterances).unwrap(), python_records(&fixed));
        let mut corrected = ingested.clone();
        for u in &mut corrected.utterances {
            u.content = u.content.replace("做业", "作业");
        }

        mock.register(
            &role_prompt(&corrected.utterances).unwrap(),
            "根据对话内容判断:\n```python\n{'Speaker 1': 'parent', 'Speaker 2': 'child'}\n```",
        );
        let roles = RoleMap {
            assignments: [("Speaker 1".to_string(), Role::Parent), ("Speaker 2".to_string(), Role::Child)].into(),
        };

        let n = corrected.len() as u32;
        let behaviours: Vec<serde_json::Value> = behaviour_plan(n, seed)
            .into_iter()
            .map(|(bid, s, e, code)| {
                behaviour_instances.push((format!("{id}#b{bid}"), abbrev_of(code).to_string()));
                json!({
                    "behaviour_id": bid,
                    "Start ID": s,
                    "End ID": e,
                    "Description of behavior": format!("家长在第{s}句到第{e}句的表现"),
                    "Parent Behavior": corrected.get(s).unwrap().content,
                    "code": code,
                })
            })
            .collect();
        mock.register(
            &coding_prompt(TemplateName::BehaviourCoding, &corrected, &roles).unwrap(),
            python_records(&behaviours),
        );

        let conflicts: Vec<serde_json::Value> = conflict_plan(n, seed)
            .into_iter()
            .map(|(sid, s, e, ty, severity)| {
                conflict_instances.push((format!("{id}#c{sid}"), abbrev_of(ty).to_string()));
                json!({
                    "scene_id": sid,
                    "Start ID": s,
                    "End ID": e,
                    "trigger": "作业进度",
                    "process": "家长催促,孩子拖延",
                    "parent_behavior": "催促",
                    "child_behavior": "拖延",
                    "conflict_type": ty,
                    "severity": severity,
                })
            })
            .collect();
        mock.register(
            &coding_prompt(TemplateName::ConflictCoding, &corrected, &roles).unwrap(),
            python_records(&conflicts),
        );
    }
    mock.write_dir(root.join("mock")).unwrap();

    let agreement = root.join("agreement");
    fs::create_dir_all(&agreement).unwrap();
    let (b, b_arb) = expert_rows(&behaviour_instances, &["GI", "DC", "LP", "EC", "CB", "IT", "MON", "SR", "ENC"]);
    fs::write(agreement.join("behaviour_labels.csv"), b).unwrap();
    if let Some(a) = b_arb {
        fs::write(agreement.join("behaviour_arbitration.csv"), a).unwrap();
    }
    let (c, c_arb) = expert_rows(&conflict_instances, &["KC", "FC", "TMC", "RC", "CC", "LMC", "EC"]);
    fs::write(agreement.join("conflict_labels.csv"), c).unwrap();
    if let Some(a) = c_arb {
        fs::write(agreement.join("conflict_arbitration.csv"), a).unwrap();
    }

    fs::write(
        root.join("config.toml"),
        "corpus_root = \".\"\nmock_fixtures = \"mock\"\n\n[backend]\nbackend_kind = \"mock\"\n",
    )
    .unwrap();
}
