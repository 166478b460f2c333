use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use edk::backbones::BackboneConfig;
use edk::data::{generate_synthetic, temporal_split, InstanceRecord, SplitSpec, SyntheticConfig};
use edk::pipeline::compress::{compress, CompressionConfig};
use edk::pipeline::kb::KnowledgeBase;
use edk::pipeline::train::{train_backbone, TrainConfig, TrainedModel};
use edk_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    kb_path: CString,
    model_path: CString,
    plain_path: CString,
    kb: KnowledgeBase,
    model: TrainedModel,
    plain: TrainedModel,
    records: Vec<InstanceRecord>,
}

fn fixture() -> Fixture {
    let syn: SyntheticConfig = serde_json::from_value(serde_json::json!({
        "vocab_sizes": [4, 5, 3],
        "n_records": 600,
        "t0": 300,
        "t1": 700,
        "base_rate": 0.3,
        "seed": 2,
        "invariant_rules": [{"conditions": [[0, 1]], "prob": 0.9}],
    }))
    .unwrap();
    let records = generate_synthetic(&syn).unwrap();
    let splits = temporal_split(
        &records,
        &SplitSpec { t0: syn.t0, t1: syn.t1, valid_fraction: 0.5, split_seed: 0 },
    )
    .unwrap();
    let schema = syn.schema();
    let ccfg: CompressionConfig = serde_json::from_value(serde_json::json!({
        "arch": {"num_patterns": 2, "dim": 4, "knowledge_dim": 4, "encoder_depth": 1, "encoder_heads": 2},
        "max_epochs": 1,
        "batch_size": 64,
    }))
    .unwrap();
    let kb = compress(&splits.old, &schema, &ccfg, None).unwrap().kb;
    let mut bcfg: BackboneConfig =
        serde_json::from_value(serde_json::json!({"kind": "deepfm", "embed_dim": 4, "hidden": [8]})).unwrap();
    let tcfg = TrainConfig {
        learning_rates: vec![1e-3],
        weight_decays: vec![1e-5],
        max_epochs: 1,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let plain = train_backbone(&schema, &splits.train, &splits.valid, None, &bcfg, &tcfg).unwrap();
    bcfg.use_knowledge = true;
    let model = train_backbone(&schema, &splits.train, &splits.valid, Some(&kb), &bcfg, &tcfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| CString::new(dir.path().join(name).to_str().unwrap()).unwrap();
    let (kb_path, model_path, plain_path) = (path("kb.ckpt"), path("m.ckpt"), path("p.ckpt"));
    kb.save(dir.path().join("kb.ckpt")).unwrap();
    model.save(dir.path().join("m.ckpt")).unwrap();
    plain.save(dir.path().join("p.ckpt")).unwrap();
    Fixture {
        _dir: dir,
        kb_path,
        model_path,
        plain_path,
        kb,
        model,
        plain,
        records: splits.test,
    }
}

fn ids(records: &[InstanceRecord]) -> Vec<u32> {
    records.iter().flat_map(|r| r.field_values.clone()).collect()
}

fn last_error() -> String {
    let p = edk_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

fn stripped(records: &[InstanceRecord]) -> Vec<InstanceRecord> {
    records
        .iter()
        .map(|r| InstanceRecord { history: Vec::new(), ..r.clone() })
        .collect()
}

#[test]
fn handles_match_the_library() {
    let fx = fixture();
    unsafe {
        let mut kb = ptr::null_mut();
        assert_eq!(edk_kb_open(fx.kb_path.as_ptr(), &mut kb), EdkStatus::Ok);
        assert_eq!(edk_kb_num_fields(kb), 3);
        assert_eq!(edk_kb_num_patterns(kb), 2);
        assert_eq!(edk_kb_knowledge_dim(kb), 4);

        let n = fx.records.len();
        let ids = ids(&fx.records);
        let mut c = vec![0.0; n * 4];
        assert_eq!(edk_kb_query(kb, ids.as_ptr(), n, c.as_mut_ptr(), c.len()), EdkStatus::Ok);
        assert_eq!(c, fx.kb.query(&fx.records).unwrap().c.data());

        let mut model = ptr::null_mut();
        assert_eq!(edk_model_open(fx.model_path.as_ptr(), &mut model), EdkStatus::Ok);
        assert_eq!(edk_model_uses_knowledge(model), 1);
        let mut scores = vec![0.0; n];
        assert_eq!(
            edk_model_predict(model, kb, ids.as_ptr(), n, scores.as_mut_ptr(), n),
            EdkStatus::Ok
        );
        let expect = fx.model.predict(&stripped(&fx.records), Some(&fx.kb)).unwrap();
        assert_eq!(scores, expect);

        // a knowledge model refuses to run without its knowledge base
        assert_eq!(
            edk_model_predict(model, ptr::null(), ids.as_ptr(), n, scores.as_mut_ptr(), n),
            EdkStatus::Config
        );
        assert!(!last_error().is_empty());

        let mut plain = ptr::null_mut();
        assert_eq!(edk_model_open(fx.plain_path.as_ptr(), &mut plain), EdkStatus::Ok);
        assert_eq!(edk_model_uses_knowledge(plain), 0);
        assert_eq!(
            edk_model_predict(plain, ptr::null(), ids.as_ptr(), n, scores.as_mut_ptr(), n),
            EdkStatus::Ok
        );
        assert_eq!(scores, fx.plain.predict(&stripped(&fx.records), None).unwrap());

        edk_model_free(plain);
        edk_model_free(model);
        edk_kb_free(kb);
    }
}

#[test]
fn errors_are_reported_not_raised() {
    let fx = fixture();
    unsafe {
        let mut kb = ptr::null_mut();
        assert_eq!(edk_kb_open(ptr::null(), &mut kb), EdkStatus::NullPointer);
        assert!(last_error().contains("path"));
        assert_eq!(edk_kb_open(fx.kb_path.as_ptr(), ptr::null_mut()), EdkStatus::NullPointer);

        let missing = CString::new("/nonexistent/kb.ckpt").unwrap();
        assert_ne!(edk_kb_open(missing.as_ptr(), &mut kb), EdkStatus::Ok);
        assert!(kb.is_null());
        // a model checkpoint is not a knowledge base
        assert_ne!(edk_kb_open(fx.model_path.as_ptr(), &mut kb), EdkStatus::Ok);

        assert_eq!(edk_kb_open(fx.kb_path.as_ptr(), &mut kb), EdkStatus::Ok);
        let mut out = vec![0.0; 4];
        let bad = [9u32, 0, 0];
        assert_eq!(edk_kb_query(kb, bad.as_ptr(), 1, out.as_mut_ptr(), 4), EdkStatus::Lookup);
        let good = [1u32, 2, 0];
        assert_eq!(edk_kb_query(kb, good.as_ptr(), 1, out.as_mut_ptr(), 3), EdkStatus::BufferSize);
        assert_eq!(edk_kb_query(kb, ptr::null(), 1, out.as_mut_ptr(), 4), EdkStatus::NullPointer);
        assert_eq!(edk_kb_query(ptr::null(), good.as_ptr(), 1, out.as_mut_ptr(), 4), EdkStatus::NullPointer);
        assert_eq!(edk_kb_query(kb, ptr::null(), 0, ptr::null_mut(), 0), EdkStatus::Ok);

        assert_eq!(edk_kb_num_fields(ptr::null()), 0);
        let mut model = ptr::null_mut();
        assert_eq!(edk_model_open(ptr::null(), &mut model), EdkStatus::NullPointer);
        assert_eq!(
            edk_model_predict(ptr::null(), kb, good.as_ptr(), 1, out.as_mut_ptr(), 1),
            EdkStatus::NullPointer
        );
        edk_kb_free(kb);
        edk_kb_free(ptr::null_mut());
        edk_model_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/edk.h")).unwrap();
    for name in [
        "edk_last_error",
        "edk_kb_open",
        "edk_kb_free",
        "edk_kb_query",
        "edk_model_open",
        "edk_model_predict",
        "EDK_STATUS_LOOKUP",
        "typedef struct EdkKnowledgeBase",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
