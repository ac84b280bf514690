mod common;

use ircan_core::model::{load_checkpoint, save, DType, FfnKind};
use ircan_core::parity::{check_parity, load_reference_logits, reference_logits, ReferenceLogits};
use ircan_core::CoreError;

fn prompts(data: &ircan_core::data::SyntheticData) -> Vec<String> {
    data.completion.iter().map(|e| format!("{} {}", e.context, e.question)).collect()
}

#[test]
fn f32_checkpoint_matches_reference_logits() {
    // reference logits from the f32-rounded weights, as an exporter working in f32 would emit
    let (model, data) = common::random_model(2, 16, FfnKind::Gated, 12);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m32.ircn");
    save(&model, &ckpt, DType::F32).unwrap();
    let loaded = load_checkpoint(&ckpt).unwrap();
    let ps = prompts(&data);
    assert!(ps.len() >= 20);
    let reference = reference_logits(&loaded, ps.iter().map(String::as_str)).unwrap();
    let json_path = dir.path().join("ref.json");
    std::fs::write(&json_path, serde_json::to_string(&reference).unwrap()).unwrap();

    let report = check_parity(&loaded, &load_reference_logits(&json_path).unwrap(), 1e-4).unwrap();
    assert!(report.passed());
    assert_eq!(report.prompts.len(), ps.len());

    // the f64 original differs from its f32 copy only by weight rounding
    let drift = check_parity(&model, &reference, 1e-4).unwrap();
    assert!(drift.passed(), "max diff {}", drift.max_abs_diff());
}

#[test]
fn reference_edge_cases() {
    let (model, _) = common::random_model(1, 4, FfnKind::Plain, 1);
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "{}").unwrap();
    let r = check_parity(&model, &load_reference_logits(&empty).unwrap(), 1e-4).unwrap();
    assert!(r.prompts.is_empty() && r.passed());

    let mut wrong = ReferenceLogits::new();
    wrong.insert("is".into(), vec![0.0; 3]);
    assert!(matches!(check_parity(&model, &wrong, 1e-4), Err(CoreError::Input(_))));

    let mut off = reference_logits(&model, ["is"]).unwrap();
    off.get_mut("is").unwrap()[0] += 1e-3;
    let r = check_parity(&model, &off, 1e-4).unwrap();
    assert!(!r.passed());
    assert!((r.max_abs_diff() - 1e-3).abs() < 1e-9);

    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{\n\"a\": [1, 2,\n").unwrap();
    assert!(matches!(load_reference_logits(&broken), Err(CoreError::Parse { .. })));
}
