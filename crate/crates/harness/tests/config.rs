mod common;

use tslab_core::CoreError;
use tslab_harness::experiment::{spread, ExperimentConfig, Stage};
use tslab_harness::train::VictimKind;

fn parse(v: &serde_json::Value) -> ExperimentConfig {
    ExperimentConfig::from_json(&v.to_string()).unwrap()
}

#[test]
fn unknown_keys_are_rejected_at_every_level() {
    let dir = tempfile::tempdir().unwrap();
    let good = common::tiny(dir.path());
    parse(&good);
    for pointer in ["", "/model", "/train/backbone", "/attacks/0/attack", "/defense"] {
        let mut bad = good.clone();
        bad.pointer_mut(pointer).unwrap().as_object_mut().unwrap().insert("bogus".into(), 1.into());
        let err = ExperimentConfig::from_json(&bad.to_string()).unwrap_err();
        assert!(matches!(err, CoreError::Config(_)), "{pointer}");
        assert!(err.to_string().contains("bogus"), "{pointer}: {err}");
    }
}

#[test]
fn defaults_fill_omitted_sections() {
    let cfg = parse(&serde_json::json!({
        "dataset": "d",
        "checkpoints": { "backbone": "b" },
        "output_dir": "o"
    }));
    assert_eq!(cfg.mechanisms.len(), 3);
    assert_eq!(cfg.eval_images, 200);
    assert_eq!(cfg.seeds(), vec![0]);
    assert_eq!(cfg.train.backbone.epochs, 12);
    assert_eq!(cfg.train.avit.epochs, 4);
    assert!(cfg.defense.is_none());
}

#[test]
fn resolved_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse(&common::tiny(dir.path()));
    assert_eq!(ExperimentConfig::from_json(&cfg.resolved_json()).unwrap(), cfg);
}

#[test]
fn problems_are_reported_together() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = common::tiny(dir.path());
    v["mechanisms"] = serde_json::json!([]);
    v["eval_images"] = 0.into();
    v["attacks"][0]["attack"]["epsilon"] = (-1.0).into();
    let cfg = parse(&v);
    let p = cfg.problems(Stage::Attack);
    let has = |s: &str| p.iter().any(|m| m.contains(s));
    assert!(has("has no manifest.csv"), "{p:?}");
    assert!(has(&dir.path().join("data").display().to_string()));
    assert!(has("mechanisms must not be empty"));
    assert!(has("eval_images"));
    assert!(has("attack single"));
    assert!(has("checkpoint"));
    let err = cfg.validate(Stage::Attack).unwrap_err();
    assert!(matches!(err, CoreError::Config(_)));
}

#[test]
fn stage_specific_checks() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = common::tiny(dir.path());
    v["defense"] = serde_json::Value::Null;
    v["mechanisms"] = serde_json::json!(["ats", "vanilla"]);
    let cfg = parse(&v);
    assert!(cfg.problems(Stage::Defend).iter().any(|m| m.contains("defense section")));
    assert!(cfg.problems(Stage::Evaluate).iter().any(|m| m.contains("vanilla")));
    assert!(cfg.problems(Stage::Report).iter().any(|m| m.contains("summary.json")));
    // A fine-tune needs the backbone first.
    let p = cfg.problems(Stage::Train(Some(VictimKind::AVit)));
    assert!(p.iter().any(|m| m.contains("backbone checkpoint")), "{p:?}");

    let mut v = common::tiny(dir.path());
    v["generate"]["classes"] = 4.into();
    let p = parse(&v).problems(Stage::GenData);
    assert_eq!(p.len(), 1, "{p:?}");

    let mut v = common::tiny(dir.path());
    v["attacks"] = serde_json::json!([{ "attack": {} }, { "attack": {} }]);
    v["model"]["heads"] = 3.into();
    let p = parse(&v).problems(Stage::Attack);
    assert!(p.iter().any(|m| m.contains("distinct names")), "{p:?}");
    assert!(p.iter().any(|m| m.contains("divisible")), "{p:?}");
}

#[test]
fn missing_config_file_is_a_config_error() {
    let err = ExperimentConfig::load(std::path::Path::new("/definitely/not/here.json")).unwrap_err();
    assert!(matches!(err, CoreError::Config(_)));
    assert!(err.to_string().contains("/definitely/not/here.json"));
}

#[test]
fn spread_is_even_and_bounded() {
    use tslab_autodiff::Tensor;
    use tslab_core::data::Sample;
    let set: Vec<Sample> =
        (0..10).map(|i| Sample { id: i, label: 0, image: Tensor::zeros(&[1]) }).collect();
    let ids = |v: Vec<Sample>| v.iter().map(|s| s.id).collect::<Vec<_>>();
    assert_eq!(ids(spread(set.clone(), 4)), vec![0, 2, 5, 7]);
    assert_eq!(ids(spread(set.clone(), 10)), (0..10).collect::<Vec<_>>());
    assert_eq!(ids(spread(set, 50)).len(), 10);
}
