//! Backbone training with optional frozen knowledge, and evaluation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::{load_checkpoint, restore_into, save_checkpoint};
use super::kb::KnowledgeBase;
use super::metrics::{auc, logloss, EvalReport};
use crate::autograd::{Graph, ParamStore, Tensor};
use crate::backbones::{Backbone, BackboneConfig, BackboneInput, HistoryBatch};
use crate::data::{DatasetSchema, InstanceRecord};
use crate::error::{EdkError, Result};
use crate::extractor::FieldBatch;
use crate::knowledge::KnowledgeVectors;
use crate::nn::{Adam, AdamConfig, Cx};

const KIND: &str = "backbone";
const PREDICT_BATCH: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Candidates, selected by validation AUC.
    #[serde(default = "default_lrs")]
    pub learning_rates: Vec<f64>,
    #[serde(default = "default_wds")]
    pub weight_decays: Vec<f64>,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Epochs without a better validation AUC before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_lrs() -> Vec<f64> {
    vec![1e-4, 3e-4, 5e-4, 1e-3]
}
fn default_wds() -> Vec<f64> {
    vec![1e-4, 3e-4, 5e-4, 5e-5, 3e-5, 1e-5]
}
fn default_max_epochs() -> usize {
    30
}
fn default_patience() -> usize {
    3
}
fn default_batch() -> usize {
    256
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rates: default_lrs(),
            weight_decays: default_wds(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            batch_size: default_batch(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() || self.weight_decays.is_empty() {
            return Err(EdkError::Config("train needs at least one learning rate and weight decay".into()));
        }
        if self.learning_rates.iter().any(|&v| !(v > 0.0)) || self.weight_decays.iter().any(|&v| !(v >= 0.0)) {
            return Err(EdkError::Config("learning rates must be > 0, weight decays >= 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(EdkError::Config("train batch_size and max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub valid_auc: f64,
}

/// One cell of the learning-rate / weight-decay grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub valid_auc: f64,
    pub best_epoch: usize,
    pub epochs: Vec<TrainEpoch>,
}

/// A trained backbone plus what is needed to rebuild and query it.
pub struct TrainedModel {
    pub backbone: Backbone,
    pub store: ParamStore,
    pub schema: DatasetSchema,
    pub seed: u64,
    /// Version of the knowledge base the model was trained against.
    pub kb_version: Option<String>,
    pub knowledge_dim: Option<usize>,
    pub selected: GridCell,
    pub grid: Vec<GridCell>,
    /// Free-form snapshot saved along with the parameters.
    pub experiment: serde_json::Value,
}

/// Inputs of one split in a form the backbone consumes directly.
pub struct Prepared<'a> {
    pub records: &'a [InstanceRecord],
    pub knowledge: Option<KnowledgeVectors>,
}

impl<'a> Prepared<'a> {
    pub fn new(records: &'a [InstanceRecord], kb: Option<&KnowledgeBase>) -> Result<Self> {
        Ok(Prepared {
            records,
            knowledge: kb.map(|k| k.query(records)).transpose()?,
        })
    }
}

fn gather(kv: &KnowledgeVectors, idx: &[usize]) -> KnowledgeVectors {
    let take = |t: &Tensor| {
        let row = t.len() / t.shape()[0];
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        Tensor::new(shape, data)
    };
    KnowledgeVectors {
        s: take(&kv.s),
        c: take(&kv.c),
    }
}

struct Batch {
    fields: FieldBatch,
    history: Option<HistoryBatch>,
    knowledge: Option<KnowledgeVectors>,
    labels: Vec<u8>,
}

impl Batch {
    fn new(model: &Backbone, data: &Prepared<'_>, idx: &[usize]) -> Self {
        let rows: Vec<&InstanceRecord> = idx.iter().map(|&i| &data.records[i]).collect();
        Batch {
            fields: FieldBatch::from_records(rows.iter().copied()),
            history: model
                .needs_history()
                .then(|| HistoryBatch::from_records(rows.iter().copied(), model.history_len())),
            knowledge: data.knowledge.as_ref().map(|kv| gather(kv, idx)),
            labels: rows.iter().map(|r| r.label).collect(),
        }
    }

    fn input(&self) -> BackboneInput<'_> {
        BackboneInput {
            fields: &self.fields,
            history: self.history.as_ref(),
            knowledge: self.knowledge.as_ref(),
        }
    }
}

/// Scores every record of `data` in order.
pub fn predict_prepared(model: &Backbone, store: &ParamStore, data: &Prepared<'_>) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..data.records.len()).collect();
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(PREDICT_BATCH) {
        let batch = Batch::new(model, data, chunk);
        out.extend(model.predict(store, &batch.input())?);
    }
    Ok(out)
}

fn labels_of(records: &[InstanceRecord]) -> Vec<u8> {
    records.iter().map(|r| r.label).collect()
}

fn knowledge_dim_for(config: &BackboneConfig, kb: Option<&KnowledgeBase>) -> Result<Option<usize>> {
    match (config.use_knowledge, kb) {
        (true, None) => Err(EdkError::Config("use_knowledge is set but no knowledge base was given".into())),
        (true, Some(kb)) => Ok(Some(kb.knowledge_dim())),
        (false, _) => Ok(None),
    }
}

#[allow(clippy::too_many_arguments)]
fn train_cell(
    schema: &DatasetSchema,
    config: &BackboneConfig,
    knowledge_dim: Option<usize>,
    train: &Prepared<'_>,
    valid: &Prepared<'_>,
    cfg: &TrainConfig,
    lr: f64,
    wd: f64,
) -> Result<(GridCell, Backbone, ParamStore)> {
    let mut store = ParamStore::new();
    let model = Backbone::new(&mut store, config.clone(), schema, knowledge_dim, cfg.seed)?;
    let mut adam = Adam::new(AdamConfig::new(lr, wd));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(5);
    let valid_labels = labels_of(valid.records);
    let mut order: Vec<usize> = (0..train.records.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0;
    let mut step = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::new(&model, train, chunk);
            let g = Graph::new();
            let cx = Cx::new(&g, &store, true);
            let loss = model.loss(&cx, &batch.input(), &batch.labels)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(EdkError::Divergence {
                    step,
                    message: format!("backbone loss became {value}"),
                });
            }
            loss_sum += value * chunk.len() as f64;
            let grads = g.backward(loss);
            drop(g);
            adam.step(&mut store, &grads);
            step += 1;
        }
        let valid_auc = auc(&predict_prepared(&model, &store, valid)?, &valid_labels)?;
        epochs.push(TrainEpoch {
            epoch,
            loss: loss_sum / order.len() as f64,
            valid_auc,
        });
        match &best {
            Some((b, _, _)) if valid_auc <= *b => {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
            _ => {
                best = Some((valid_auc, epoch, store.clone()));
                since_best = 0;
            }
        }
    }
    let (valid_auc, best_epoch, best_store) = best.expect("at least one epoch ran");
    let cell = GridCell {
        learning_rate: lr,
        weight_decay: wd,
        valid_auc,
        best_epoch,
        epochs,
    };
    Ok((cell, model, best_store))
}

/// Trains `config` on `train`, choosing learning rate and weight decay by
/// validation AUC. The knowledge base is only read.
pub fn train_backbone(
    schema: &DatasetSchema,
    train: &[InstanceRecord],
    valid: &[InstanceRecord],
    kb: Option<&KnowledgeBase>,
    config: &BackboneConfig,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(EdkError::Data("training split is empty".into()));
    }
    if valid.is_empty() {
        return Err(EdkError::Data("validation split is empty".into()));
    }
    let mut config = config.clone();
    config.resolve(schema)?;
    let knowledge_dim = knowledge_dim_for(&config, kb)?;
    let kb = if config.use_knowledge { kb } else { None };
    if let Some(kb) = kb {
        kb.check_schema(schema)?;
    }
    let train_p = Prepared::new(train, kb)?;
    let valid_p = Prepared::new(valid, kb)?;
    let mut grid = Vec::new();
    let mut best: Option<(GridCell, Backbone, ParamStore)> = None;
    for &lr in &cfg.learning_rates {
        for &wd in &cfg.weight_decays {
            let (cell, model, store) = train_cell(schema, &config, knowledge_dim, &train_p, &valid_p, cfg, lr, wd)?;
            grid.push(cell.clone());
            if best.as_ref().is_none_or(|(b, _, _)| cell.valid_auc > b.valid_auc) {
                best = Some((cell, model, store));
            }
        }
    }
    let (selected, backbone, store) = best.expect("non-empty grid");
    Ok(TrainedModel {
        backbone,
        store,
        schema: schema.clone(),
        seed: cfg.seed,
        kb_version: kb.map(|k| k.version().to_string()),
        knowledge_dim,
        selected,
        grid,
        experiment: serde_json::Value::Null,
    })
}

impl TrainedModel {
    fn check_kb<'k>(&self, kb: Option<&'k KnowledgeBase>) -> Result<Option<&'k KnowledgeBase>> {
        match (&self.kb_version, kb) {
            (None, _) => Ok(None),
            (Some(_), None) => Err(EdkError::Config("model was trained with a knowledge base; pass it".into())),
            (Some(v), Some(kb)) if v != kb.version() => Err(EdkError::Contract(format!(
                "knowledge base version {} differs from the one used in training ({v})",
                kb.version()
            ))),
            (Some(_), Some(kb)) => {
                kb.check_schema(&self.schema)?;
                Ok(Some(kb))
            }
        }
    }

    pub fn predict(&self, records: &[InstanceRecord], kb: Option<&KnowledgeBase>) -> Result<Vec<f64>> {
        for r in records {
            r.check(&self.schema)?;
        }
        let kb = self.check_kb(kb)?;
        predict_prepared(&self.backbone, &self.store, &Prepared::new(records, kb)?)
    }

    pub fn evaluate(&self, records: &[InstanceRecord], kb: Option<&KnowledgeBase>) -> Result<EvalReport> {
        let scores = self.predict(records, kb)?;
        let labels = labels_of(records);
        Ok(EvalReport {
            auc: auc(&scores, &labels)?,
            logloss: logloss(&scores, &labels)?,
            n: records.len(),
            seed: self.seed,
            config: self.snapshot(),
        })
    }

    fn snapshot(&self) -> serde_json::Value {
        json!({
            "backbone": self.backbone.config,
            "learning_rate": self.selected.learning_rate,
            "weight_decay": self.selected.weight_decay,
            "kb_version": self.kb_version,
            "seed": self.seed,
            "experiment": self.experiment,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = json!({
            "schema": self.schema,
            "backbone": self.backbone.config,
            "seed": self.seed,
            "kb_version": self.kb_version,
            "knowledge_dim": self.knowledge_dim,
            "selected": self.selected,
            "grid": self.grid,
            "experiment": self.experiment,
        });
        save_checkpoint(path, KIND, meta, &self.store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (manifest, tensors) = load_checkpoint(path)?;
        if manifest.kind != KIND {
            return Err(EdkError::Checkpoint(format!(
                "expected a backbone checkpoint, found {}",
                manifest.kind
            )));
        }
        let mut meta = manifest.metadata;
        let mut field = |k: &str| {
            meta.get_mut(k)
                .map(serde_json::Value::take)
                .ok_or_else(|| EdkError::Checkpoint(format!("manifest lacks {k}")))
        };
        let schema: DatasetSchema = serde_json::from_value(field("schema")?)?;
        let config: BackboneConfig = serde_json::from_value(field("backbone")?)?;
        let seed: u64 = serde_json::from_value(field("seed")?)?;
        let kb_version: Option<String> = serde_json::from_value(field("kb_version")?)?;
        let knowledge_dim: Option<usize> = serde_json::from_value(field("knowledge_dim")?)?;
        let selected: GridCell = serde_json::from_value(field("selected")?)?;
        let grid: Vec<GridCell> = serde_json::from_value(field("grid")?)?;
        let experiment = field("experiment")?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config, &schema, knowledge_dim, seed)?;
        restore_into(&mut store, tensors)?;
        Ok(TrainedModel {
            backbone,
            store,
            schema,
            seed,
            kb_version,
            knowledge_dim,
            selected,
            grid,
            experiment,
        })
    }
}
