use std::path::PathBuf;

use selectp::eval::{build_demo_set, ClassificationTask};
use selectp::tokenizer::WordTokenizer;

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

#[test]
fn bundled_tasks_load_and_build_prompts() {
    let tok = WordTokenizer::from_pieces(vec![]);
    for (file, prefix) in [("subj-mini.json", "input: "), ("yesno-mini.json", "Question: ")] {
        let task = ClassificationTask::load(&data(file)).unwrap();
        assert!(!task.train.is_empty() && !task.test.is_empty(), "{file}");
        assert_eq!(task.template.input_prefix, prefix);
        for inst in task.train.iter().chain(&task.test) {
            assert_eq!(inst.options.len(), 2);
            assert!(inst.gold < 2);
        }
        let demos = build_demo_set(&task, 300, 0, &tok).unwrap();
        assert!(demos.text(&task.template).starts_with(prefix));
    }
}

#[test]
fn out_of_range_gold_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{"name": "bad", "train": [{"context": "x", "options": ["a", "b"], "gold": 2}], "test": []}"#,
    )
    .unwrap();
    assert!(ClassificationTask::load(&path).is_err());
}
