use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ablate::{ablate, AblationConfig, Variant};
use super::checkpoint::store_digest;
use super::compress::{compress, CompressionConfig};
use super::config::ExperimentConfig;
use super::kb::KnowledgeBase;
use super::stats::{export_vectors, pattern_stats};
use super::train::{train_backbone, TrainConfig, TrainedModel};
use crate::autograd::{ParamStore, Tensor};
use crate::backbones::{BackboneConfig, BackboneKind};
use crate::data::{generate_synthetic, temporal_split, DatasetSchema, Rule, SplitSpec, Splits, SyntheticConfig};
use crate::error::EdkError;
use crate::extractor::HardConcrete;
use crate::knowledge::{KnowledgeArch, KnowledgeModel};

fn rule(conditions: &[(usize, u32)], prob: f64) -> Rule {
    Rule {
        conditions: conditions.to_vec(),
        prob,
    }
}

fn synthetic() -> SyntheticConfig {
    let json = serde_json::json!({
        "vocab_sizes": [4, 5, 6, 3],
        "n_records": 1600,
        "t0": 400,
        "t1": 800,
        "base_rate": 0.3,
        "seed": 11,
    });
    let mut cfg: SyntheticConfig = serde_json::from_value(json).unwrap();
    cfg.invariant_rules = vec![rule(&[(0, 1)], 0.95), rule(&[(1, 2), (2, 3)], 0.9), rule(&[(0, 2)], 0.05)];
    cfg
}

fn data() -> (DatasetSchema, Splits) {
    let cfg = synthetic();
    let records = generate_synthetic(&cfg).unwrap();
    let spec = SplitSpec {
        t0: cfg.t0,
        t1: cfg.t1,
        valid_fraction: 0.5,
        split_seed: 0,
    };
    (cfg.schema(), temporal_split(&records, &spec).unwrap())
}

fn tiny_arch() -> KnowledgeArch {
    KnowledgeArch {
        num_patterns: 2,
        dim: 4,
        knowledge_dim: 4,
        encoder_depth: 1,
        encoder_heads: 2,
        ffn_mult: 2,
        hard_concrete: HardConcrete::default(),
    }
}

fn tiny_compression() -> CompressionConfig {
    CompressionConfig {
        arch: tiny_arch(),
        learning_rate: 3e-3,
        max_epochs: 4,
        batch_size: 64,
        ..CompressionConfig::default()
    }
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        learning_rates: vec![3e-3],
        weight_decays: vec![1e-5],
        max_epochs: 4,
        batch_size: 64,
        ..TrainConfig::default()
    }
}

fn tiny_backbone(use_knowledge: bool) -> BackboneConfig {
    let mut b = BackboneConfig::new(BackboneKind::DeepFm);
    b.embed_dim = 4;
    b.hidden = vec![8];
    b.use_knowledge = use_knowledge;
    b
}

#[test]
fn single_label_old_log_is_a_data_error() {
    let (schema, splits) = data();
    let mut old = splits.old.clone();
    for r in &mut old {
        r.label = 0;
    }
    assert!(matches!(compress(&old, &schema, &tiny_compression(), None), Err(EdkError::Data(_))));
    assert!(matches!(compress(&[], &schema, &tiny_compression(), None), Err(EdkError::Data(_))));
}

#[test]
fn compression_is_bitwise_deterministic() {
    let (schema, splits) = data();
    let cfg = tiny_compression();
    let a = compress(&splits.old, &schema, &cfg, None).unwrap();
    let b = compress(&splits.old, &schema, &cfg, None).unwrap();
    assert_eq!(store_digest(a.kb.params()), store_digest(b.kb.params()));
    assert_eq!(a.kb.version(), b.kb.version());
    assert_eq!(a.epochs, b.epochs);
    let mut other = cfg.clone();
    other.seed = 1;
    let c = compress(&splits.old, &schema, &other, None).unwrap();
    assert_ne!(a.kb.version(), c.kb.version());
}

#[test]
fn supervised_only_compression_lowers_cross_entropy_every_epoch() {
    let mut syn = synthetic();
    syn.n_records = 4000;
    syn.t0 = 1000;
    syn.t1 = 1200;
    syn.invariant_rules = (0..4).map(|v| rule(&[(0, v)], if v % 2 == 0 { 0.98 } else { 0.02 })).collect();
    let schema = syn.schema();
    let old: Vec<_> = generate_synthetic(&syn).unwrap().into_iter().filter(|r| r.timestamp < syn.t0).collect();
    let mut cfg = tiny_compression();
    cfg.regularizers.weights.lambda1 = 0.0;
    cfg.regularizers.weights.lambda2 = 0.0;
    cfg.max_epochs = 5;
    cfg.patience = 10;
    let out = compress(&old, &schema, &cfg, None).unwrap();
    assert_eq!(out.epochs.len(), 5);
    for w in out.epochs.windows(2) {
        assert!(w[1].l_ce < w[0].l_ce, "{} -> {}", w[0].l_ce, w[1].l_ce);
    }
}

#[test]
fn step_log_has_one_json_line_per_step() {
    let (schema, splits) = data();
    let mut cfg = tiny_compression();
    cfg.max_epochs = 1;
    let mut buf = Vec::new();
    let out = compress(&splits.old, &schema, &cfg, Some(&mut buf)).unwrap();
    let lines: Vec<&str> = std::str::from_utf8(&buf).unwrap().lines().collect();
    assert_eq!(lines.len(), out.steps.len());
    let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    for key in ["l_ce", "dim", "vclub", "disentangle", "l0", "total"] {
        assert!(first.get(key).is_some(), "{key}");
    }
}

#[test]
fn without_both_matches_zero_regularizer_weight() {
    let (schema, splits) = data();
    let base = tiny_compression();
    let off = Variant::WithoutBoth.apply(&base);
    let mut zero = base.clone();
    zero.regularizers.weights.lambda1 = 0.0;
    let a = compress(&splits.old, &schema, &off, None).unwrap();
    let b = compress(&splits.old, &schema, &zero, None).unwrap();
    assert_eq!(store_digest(a.kb.params()), store_digest(b.kb.params()));
    assert_eq!(a.best_epoch, b.best_epoch);
}

#[test]
fn backbone_training_leaves_the_knowledge_base_untouched() {
    let (schema, splits) = data();
    let kb = compress(&splits.old, &schema, &tiny_compression(), None).unwrap().kb;
    let before = store_digest(kb.params());
    let model = train_backbone(&schema, &splits.train, &splits.valid, Some(&kb), &tiny_backbone(true), &tiny_train()).unwrap();
    assert_eq!(store_digest(kb.params()), before);
    assert_eq!(model.kb_version.as_deref(), Some(kb.version()));
    assert!(model.selected.valid_auc > 0.55, "valid auc {}", model.selected.valid_auc);
}

#[test]
fn plain_training_ignores_the_knowledge_base_and_is_deterministic() {
    let (schema, splits) = data();
    let kb = compress(&splits.old, &schema, &tiny_compression(), None).unwrap().kb;
    let cfg = tiny_backbone(false);
    let a = train_backbone(&schema, &splits.train, &splits.valid, None, &cfg, &tiny_train()).unwrap();
    let b = train_backbone(&schema, &splits.train, &splits.valid, Some(&kb), &cfg, &tiny_train()).unwrap();
    assert_eq!(store_digest(&a.store), store_digest(&b.store));
    assert!(b.kb_version.is_none());
    assert_eq!(a.predict(&splits.test, None).unwrap(), b.predict(&splits.test, None).unwrap());
}

#[test]
fn knowledge_model_requires_its_knowledge_base() {
    let (schema, splits) = data();
    let kb = compress(&splits.old, &schema, &tiny_compression(), None).unwrap().kb;
    assert!(matches!(
        train_backbone(&schema, &splits.train, &splits.valid, None, &tiny_backbone(true), &tiny_train()),
        Err(EdkError::Config(_))
    ));
    let model = train_backbone(&schema, &splits.train, &splits.valid, Some(&kb), &tiny_backbone(true), &tiny_train()).unwrap();
    assert!(model.predict(&splits.test, None).is_err());
    let mut cfg = tiny_compression();
    cfg.seed = 9;
    let other = compress(&splits.old, &schema, &cfg, None).unwrap().kb;
    assert!(matches!(model.predict(&splits.test, Some(&other)), Err(EdkError::Contract(_))));
}

#[test]
fn checkpoints_round_trip_to_identical_scores() {
    let (schema, splits) = data();
    let kb = compress(&splits.old, &schema, &tiny_compression(), None).unwrap().kb;
    let model = train_backbone(&schema, &splits.train, &splits.valid, Some(&kb), &tiny_backbone(true), &tiny_train()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    kb.save(dir.path().join("kb.ckpt")).unwrap();
    model.save(dir.path().join("m.ckpt")).unwrap();
    let kb2 = KnowledgeBase::load(dir.path().join("kb.ckpt")).unwrap();
    let model2 = TrainedModel::load(dir.path().join("m.ckpt")).unwrap();
    assert_eq!(kb2.version(), kb.version());
    assert_eq!(kb2.query(&splits.test).unwrap(), kb.query(&splits.test).unwrap());
    let a = model.predict(&splits.test, Some(&kb)).unwrap();
    let b = model2.predict(&splits.test, Some(&kb2)).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    let r = model2.evaluate(&splits.test, Some(&kb2)).unwrap();
    assert_eq!(r.n, splits.test.len());
    assert!(r.auc > 0.5 && r.logloss > 0.0);
}

#[test]
fn ablation_table_has_four_rows_plus_one_per_k() {
    let (schema, splits) = data();
    let mut comp = tiny_compression();
    comp.max_epochs = 1;
    let mut train = tiny_train();
    train.max_epochs = 1;
    let cfg = AblationConfig {
        k_values: vec![1, 2, 3],
        seeds: vec![0],
    };
    let table = ablate(&schema, &splits, &comp, &tiny_backbone(true), &train, &cfg).unwrap();
    assert_eq!(table.rows.len(), 4 + 3);
    // K=2 is the configured pattern count, so that cell is the full variant
    assert_eq!(table.row("full").unwrap().reports, table.row("k=2").unwrap().reports);
    let mut csv = Vec::new();
    table.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 7);
}

fn zero_p_kb(schema: &DatasetSchema) -> KnowledgeBase {
    let arch = KnowledgeArch {
        num_patterns: 3,
        ..tiny_arch()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = KnowledgeModel::new(&mut store, &schema.vocab_sizes(), arch.clone(), &mut rng).unwrap();
    store.set(model.extractor.mask_proj, Tensor::zeros(vec![arch.dim, arch.num_patterns]));
    KnowledgeBase::freeze(schema, &arch, &store, serde_json::Value::Null).unwrap()
}

#[test]
fn zero_projection_masks_sit_at_one_half_and_select_nothing() {
    let (schema, splits) = data();
    let kb = zero_p_kb(&schema);
    let hc = HardConcrete::default();
    // stretched sigmoid(0) = 0.5 * (delta - gamma) + gamma
    let expect = 0.5 * (hc.delta - hc.gamma) + hc.gamma;
    assert!((hc.eval_value(0.0) - expect).abs() < 1e-12);
    assert!((expect - 0.5).abs() < 1e-12);
    let stats = pattern_stats(&kb, &splits.test).unwrap();
    assert_eq!(stats.total(), (3 * splits.test.len()) as u64);
    for row in &stats.histogram {
        assert_eq!(row[0], splits.test.len() as u64);
    }
}

#[test]
fn vector_export_has_k_plus_one_rows_per_instance() {
    let (schema, splits) = data();
    let kb = zero_p_kb(&schema);
    let mut buf = Vec::new();
    let n = export_vectors(&kb, &splits.test, &mut buf).unwrap();
    assert_eq!(n, splits.test.len() * 4);
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + n);
    let widths: Vec<usize> = text.lines().map(|l| l.split(',').count()).collect();
    assert!(widths.iter().all(|&w| w == widths[0]));
}

#[test]
fn full_experiment_config_runs_end_to_end() {
    let mut cfg = ExperimentConfig::default();
    cfg.data.synthetic = Some(synthetic());
    cfg.compression = tiny_compression();
    cfg.backbone = tiny_backbone(true);
    cfg.train = tiny_train();
    let data = cfg.load_data().unwrap();
    cfg.resolve(&data.schema).unwrap();
    let splits = cfg.split(&data.records).unwrap();
    let kb = compress(&splits.old, &data.schema, &cfg.compression, None).unwrap().kb;
    let model = train_backbone(&data.schema, &splits.train, &splits.valid, Some(&kb), &cfg.backbone, &cfg.train).unwrap();
    assert!(model.evaluate(&splits.test, Some(&kb)).unwrap().auc > 0.5);
}
