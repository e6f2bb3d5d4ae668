use std::fs;

use chrono::NaiveDate;
use hwdyn_core::annotation::{Role, RoleMap};
use hwdyn_core::stats::{Pad, SurveyResponse};
use hwdyn_core::store::*;
use hwdyn_core::transcript::{SegmentationConfig, Transcript, Utterance};

fn record() -> SessionRecord {
    let mut transcript = Transcript::new(vec![
        Utterance { id: 1, speaker_label: "Speaker 1".into(), start_ms: 0, end_ms: 1200, content: "先写数学".into() },
        Utterance { id: 2, speaker_label: "Speaker 2".into(), start_ms: 1500, end_ms: 2600, content: "好的妈妈".into() },
    ]);
    transcript.source_recording_ids = vec!["rec-a".into()];
    SessionRecord {
        participant_id: "P32".into(),
        session_date: NaiveDate::from_ymd_opt(2024, 3, 2).unwrap(),
        transcript,
        survey: Some(SurveyResponse {
            pre: Pad { pleasure: 3, arousal: 2, dominance: 4 },
            post: Pad { pleasure: 2, arousal: 3, dominance: 4 },
        }),
        role_map: Some(RoleMap {
            assignments: [("Speaker 1".to_string(), Role::Parent), ("Speaker 2".to_string(), Role::Child)].into(),
        }),
    }
}

#[test]
fn store_then_load_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("P32_2024-03-02");
    let r = record();
    store_session(&r, &path).unwrap();
    assert_eq!(load_session(&path).unwrap(), r);

    let bare = SessionRecord { survey: None, role_map: None, ..r };
    store_session(&bare, &path).unwrap();
    assert_eq!(load_session(&path).unwrap(), bare);
}

#[test]
fn missing_survey_is_absent() {
    let dir = tempfile::tempdir().unwrap();
    store_session(&record(), dir.path()).unwrap();
    fs::remove_file(dir.path().join(SURVEY_FILE)).unwrap();
    assert_eq!(load_session(dir.path()).unwrap().survey, None);
}

#[test]
fn truncated_transcript_names_byte_offset() {
    let dir = tempfile::tempdir().unwrap();
    store_session(&record(), dir.path()).unwrap();
    let path = dir.path().join(TRANSCRIPT_FILE);
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, &text[..text.len() / 2]).unwrap();
    let err = load_session(dir.path()).unwrap_err();
    match &err {
        StoreError::Parse { offset, .. } => assert!(*offset > 0 && *offset <= text.len() / 2),
        other => panic!("expected a parse error, got {other}"),
    }
    assert!(err.to_string().contains("byte"));
}

#[test]
fn manifest_provenance_survives_restore() {
    let dir = tempfile::tempdir().unwrap();
    store_session(&record(), dir.path()).unwrap();
    let mut m = load_manifest(dir.path()).unwrap();
    m.stages_completed.insert("correct".into());
    store_manifest(dir.path(), &m).unwrap();
    store_session(&record(), dir.path()).unwrap();
    assert!(load_manifest(dir.path()).unwrap().stages_completed.contains("correct"));
}

#[test]
fn recordings_are_segmented_and_merged() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join(MANIFEST_FILE),
        r#"{"participant_id": "P07", "session_date": "2024-05-01"}"#,
    )
    .unwrap();
    fs::write(
        dir.path().join(RECORDINGS_FILE),
        r#"[
  {"recording_id": "b", "offset_ms": 60000, "segments": [
    {"start_ms": 0, "end_ms": 900, "speaker": "Speaker 1", "text": "再检查一遍"}
  ]},
  {"recording_id": "a", "offset_ms": 0, "segments": [
    {"start_ms": 0, "end_ms": 1000, "speaker": "Speaker 1", "text": "今天"},
    {"start_ms": 2000, "end_ms": 3000, "speaker": "Speaker 1", "text": "作业多吗"},
    {"start_ms": 5500, "end_ms": 6000, "speaker": "Speaker 1", "text": "快说"}
  ]}
]"#,
    )
    .unwrap();
    let (rec, report) = load_input_session(dir.path(), &SegmentationConfig::default()).unwrap();
    assert!(report.is_empty());
    let t = &rec.transcript;
    let got: Vec<(u32, i64, &str)> = t.utterances.iter().map(|u| (u.id, u.start_ms, u.content.as_str())).collect();
    assert_eq!(got, [(1, 0, "今天 作业多吗"), (2, 5500, "快说"), (3, 60000, "再检查一遍")]);
    assert_eq!(t.source_recording_ids, ["b", "a"]);
    assert_eq!(rec.survey, None);
}

#[test]
fn missing_timestamps_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(MANIFEST_FILE), r#"{"participant_id": "P07", "session_date": "2024-05-01"}"#).unwrap();
    fs::write(
        dir.path().join(RECORDINGS_FILE),
        r#"[{"recording_id": "a", "offset_ms": 0, "segments": [{"speaker": "Speaker 1", "text": "今天"}]}]"#,
    )
    .unwrap();
    let err = load_input_session(dir.path(), &SegmentationConfig::default()).unwrap_err();
    assert!(matches!(err, StoreError::Transcript { .. }), "{err}");
}
