//! Compression of the old log into a knowledge base.

use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kb::KnowledgeBase;
use crate::autograd::{Graph, ParamStore, Tensor, Var};
use crate::data::{DatasetSchema, InstanceRecord};
use crate::error::{EdkError, Result};
use crate::extractor::FieldBatch;
use crate::knowledge::{KnowledgeArch, KnowledgeModel};
use crate::nn::{Adam, AdamConfig, Cx, Linear};
use crate::regularizers::{
    dim_label_mi_loss, disentangle_loss, l_reg, vclub_bound, vclub_fit_loss, Discriminator,
    ProjectionHead, RegularizerConfig, VariationalNet,
};
use crate::Mode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionConfig {
    #[serde(default)]
    pub arch: KnowledgeArch,
    #[serde(default)]
    pub regularizers: RegularizerConfig,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Epochs without improvement of the held-out loss before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Share of the old log held out for the stopping rule.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_wd() -> f64 {
    1e-5
}
fn default_max_epochs() -> usize {
    30
}
fn default_patience() -> usize {
    3
}
fn default_holdout() -> f64 {
    0.1
}
fn default_batch() -> usize {
    256
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            arch: KnowledgeArch::default(),
            regularizers: RegularizerConfig::default(),
            learning_rate: default_lr(),
            weight_decay: default_wd(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            holdout_fraction: default_holdout(),
            batch_size: default_batch(),
            seed: 0,
        }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.regularizers.validate()?;
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(EdkError::Config("compression learning_rate must be > 0 and weight_decay >= 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(EdkError::Config("compression batch_size and max_epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(EdkError::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Auxiliary heads that exist only during compression.
#[derive(Clone, Debug)]
pub struct AuxHeads {
    pub label_head: Linear,
    pub discriminator: Discriminator,
    pub projection: ProjectionHead,
    pub variational: VariationalNet,
}

/// Knowledge model plus auxiliary heads and their parameters.
pub struct CompressionModel {
    pub config: CompressionConfig,
    pub knowledge: KnowledgeModel,
    pub aux: AuxHeads,
    /// Knowledge model, label head, discriminator and projection.
    pub store: ParamStore,
    /// Variational network, fitted in its own alternating step.
    pub q_store: ParamStore,
}

/// Independent random streams, so that e.g. switching a regularizer off does
/// not shift the mask noise of the remaining terms.
pub struct Streams {
    pub batching: ChaCha8Rng,
    pub mask: ChaCha8Rng,
    pub sampling: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Streams {
            batching: stream(seed, 1),
            mask: stream(seed, 2),
            sampling: stream(seed, 3),
            dropout: stream(seed, 4),
        }
    }
}

/// Loss components of one batch.
pub struct LossTerms<'g> {
    pub total: Var<'g>,
    pub l_ce: Var<'g>,
    pub dim: Option<Var<'g>>,
    pub vclub: Option<Var<'g>>,
    pub disentangle: Option<Var<'g>>,
    pub l0: Var<'g>,
    pub l_reg: Var<'g>,
    /// Mean-pooled memorization embeddings, detached.
    pub pooled_input: Tensor,
    pub c: Var<'g>,
}

impl CompressionModel {
    pub fn new(schema: &DatasetSchema, config: CompressionConfig) -> Result<Self> {
        config.validate()?;
        let mut init = stream(config.seed, 0);
        let mut store = ParamStore::new();
        let knowledge = KnowledgeModel::new(&mut store, &schema.vocab_sizes(), config.arch.clone(), &mut init)?;
        let (d, dk) = (config.arch.dim, config.arch.knowledge_dim);
        let reg = &config.regularizers;
        let label_head = Linear::new(&mut store, "aux.label_head", dk, 1, true, &mut init);
        let discriminator =
            Discriminator::new(&mut store, dk, reg.discriminator_hidden.unwrap_or(dk), &mut init);
        let projection = ProjectionHead::new(&mut store, dk, reg.dropout, reg.temperature, &mut init);
        let mut q_store = ParamStore::new();
        let variational =
            VariationalNet::new(&mut q_store, d, reg.variational_hidden.unwrap_or(dk), dk, &mut init);
        Ok(CompressionModel {
            config,
            knowledge,
            aux: AuxHeads {
                label_head,
                discriminator,
                projection,
                variational,
            },
            store,
            q_store,
        })
    }

    /// `l_ce + lambda1 * l_reg + lambda2 * l0` for one batch.
    ///
    /// A batch with a single label drops the label-MI term.
    #[allow(clippy::too_many_arguments)]
    pub fn loss<'g>(
        &self,
        g: &'g Graph,
        store: &'g ParamStore,
        track: bool,
        q_store: &'g ParamStore,
        batch: &FieldBatch,
        labels: &[u8],
        mode: Mode,
        streams: &mut Streams,
    ) -> Result<LossTerms<'g>> {
        self.loss_with_input(g, store, track, q_store, batch, labels, mode, streams, None)
    }

    /// [`loss`](Self::loss) with the detached vCLUB input fixed to `pooled`
    /// instead of recomputed from `store`. Finite differences of the loss as
    /// trained need the input held still.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_with_input<'g>(
        &self,
        g: &'g Graph,
        store: &'g ParamStore,
        track: bool,
        q_store: &'g ParamStore,
        batch: &FieldBatch,
        labels: &[u8],
        mode: Mode,
        streams: &mut Streams,
        pooled: Option<&Tensor>,
    ) -> Result<LossTerms<'g>> {
        let cfg = &self.config.regularizers;
        let w = &cfg.weights;
        let cx = Cx::new(g, store, track);
        let qcx = Cx::new(g, q_store, false);
        let pass = self.knowledge.forward(&cx, batch, mode, &mut streams.mask)?;
        let b = batch.batch;
        let logits = self.aux.label_head.forward(&cx, pass.c).reshape(vec![b]);
        let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
        let l_ce = logits.bce_with_logits(Arc::new(y));

        let dim = if w.alpha > 0.0 {
            match dim_label_mi_loss(&cx, &self.aux.discriminator, pass.s, pass.c, labels, &mut streams.sampling) {
                Ok(v) => Some(v),
                Err(EdkError::BatchComposition(_)) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let pooled_input = match pooled {
            Some(t) => t.clone(),
            None => (*pass.extraction.memory.mean_axis1().value()).clone(),
        };
        let vclub = cfg.vclub.then(|| {
            let x = g.constant(pooled_input.clone());
            vclub_bound(&qcx, &self.aux.variational, x, pass.c, &mut streams.sampling)
        });
        let disentangle = if w.beta > 0.0 && self.config.arch.num_patterns >= 2 {
            Some(disentangle_loss(&cx, &self.aux.projection, pass.s, mode, &mut streams.dropout)?)
        } else {
            None
        };
        let l0 = self.knowledge.extractor.l0_penalty(pass.extraction.logits);
        let reg = l_reg(&cx, w, dim, vclub, disentangle);
        let total = l_ce.add(reg.scale(w.lambda1)).add(l0.scale(w.lambda2));
        Ok(LossTerms {
            total,
            l_ce,
            dim,
            vclub,
            disentangle,
            l0,
            l_reg: reg,
            pooled_input,
            c: pass.c,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub l_ce: f64,
    pub dim: Option<f64>,
    pub vclub: Option<f64>,
    pub disentangle: Option<f64>,
    pub l0: f64,
    pub l_reg: f64,
    pub total: f64,
    pub q_fit: Option<f64>,
}

/// Per-epoch means of the step records plus the held-out loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_ce: f64,
    pub dim: Option<f64>,
    pub vclub: Option<f64>,
    pub disentangle: Option<f64>,
    pub l0: f64,
    pub total: f64,
    pub holdout_total: f64,
    /// Batches whose label-MI term was dropped for lacking one label.
    pub dim_skipped: usize,
}

pub struct Compressed {
    pub kb: KnowledgeBase,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    pub best_epoch: usize,
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains the knowledge model on `records` and freezes it.
///
/// Every step record is also written as one JSON line to `step_log` when given.
pub fn compress(
    records: &[InstanceRecord],
    schema: &DatasetSchema,
    config: &CompressionConfig,
    mut step_log: Option<&mut dyn Write>,
) -> Result<Compressed> {
    if records.is_empty() {
        return Err(EdkError::Data("old log is empty".into()));
    }
    if records.iter().all(|r| r.label == records[0].label) {
        return Err(EdkError::Data("old log contains a single label".into()));
    }
    let mut model = CompressionModel::new(schema, config.clone())?;
    let mut train_idx = Vec::new();
    let mut holdout_idx = Vec::new();
    for i in 0..records.len() {
        if crate::data::unit_hash(config.seed ^ 0x401D_0u64, i as u64) < config.holdout_fraction {
            holdout_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    if train_idx.is_empty() {
        return Err(EdkError::Data("no training records left after the hold-out".into()));
    }
    let mut streams = Streams::new(config.seed);
    let mut adam = Adam::new(AdamConfig::new(config.learning_rate, config.weight_decay));
    let mut q_adam = Adam::new(AdamConfig::new(config.learning_rate, 0.0));
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0;
    let mut global_step = 0;

    for epoch in 0..config.max_epochs {
        train_idx.shuffle(&mut streams.batching);
        let first_step = steps.len();
        let mut dim_skipped = 0;
        for chunk in train_idx.chunks(config.batch_size) {
            let rows: Vec<&InstanceRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let batch = FieldBatch::from_records(rows.iter().copied());
            let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
            let g = Graph::new();
            let terms = model.loss(&g, &model.store, true, &model.q_store, &batch, &labels, Mode::Train, &mut streams)?;
            let total = terms.total.item();
            if !total.is_finite() {
                return Err(EdkError::Divergence {
                    step: global_step,
                    message: format!("compression loss became {total}"),
                });
            }
            if config.regularizers.weights.alpha > 0.0 && terms.dim.is_none() {
                dim_skipped += 1;
            }
            let mut log = StepLog {
                epoch,
                step: global_step,
                l_ce: terms.l_ce.item(),
                dim: terms.dim.map(|v| v.item()),
                vclub: terms.vclub.map(|v| v.item()),
                disentangle: terms.disentangle.map(|v| v.item()),
                l0: terms.l0.item(),
                l_reg: terms.l_reg.item(),
                total,
                q_fit: None,
            };
            let pooled = terms.pooled_input.clone();
            let c = (*terms.c.value()).clone();
            let grads = g.backward(terms.total);
            drop(g);
            adam.step(&mut model.store, &grads);

            if config.regularizers.vclub {
                let g = Graph::new();
                let qcx = Cx::new(&g, &model.q_store, true);
                let fit = vclub_fit_loss(&qcx, &model.aux.variational, g.constant(pooled), g.constant(c));
                log.q_fit = Some(fit.item());
                let grads = g.backward(fit);
                drop(g);
                q_adam.step(&mut model.q_store, &grads);
            }
            if let Some(w) = step_log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &log)?;
                w.write_all(b"\n")?;
            }
            steps.push(log);
            global_step += 1;
        }

        let holdout_total = if holdout_idx.is_empty() {
            None
        } else {
            Some(holdout_loss(&model, records, &holdout_idx, config)?)
        };
        let epoch_steps = &steps[first_step..];
        let n = epoch_steps.len() as f64;
        let log = EpochLog {
            epoch,
            l_ce: epoch_steps.iter().map(|s| s.l_ce).sum::<f64>() / n,
            dim: mean_opt(epoch_steps.iter().map(|s| s.dim)),
            vclub: mean_opt(epoch_steps.iter().map(|s| s.vclub)),
            disentangle: mean_opt(epoch_steps.iter().map(|s| s.disentangle)),
            l0: epoch_steps.iter().map(|s| s.l0).sum::<f64>() / n,
            total: epoch_steps.iter().map(|s| s.total).sum::<f64>() / n,
            holdout_total: holdout_total.unwrap_or(f64::NAN),
            dim_skipped,
        };
        let criterion = holdout_total.unwrap_or(log.total);
        epochs.push(log);
        match &best {
            Some((b, _, _)) if criterion >= *b => {
                since_best += 1;
                if since_best >= config.patience {
                    break;
                }
            }
            _ => {
                best = Some((criterion, epoch, model.store.clone()));
                since_best = 0;
            }
        }
    }

    let (_, best_epoch, best_store) = best.expect("at least one epoch ran");
    let snapshot = serde_json::to_value(config)?;
    let kb = KnowledgeBase::freeze(schema, &config.arch, &best_store, snapshot)?;
    Ok(Compressed {
        kb,
        epochs,
        steps,
        best_epoch,
    })
}

/// Eval-mode compression loss averaged over the held-out records, with
/// sampling streams reset so that every epoch is scored identically.
fn holdout_loss(
    model: &CompressionModel,
    records: &[InstanceRecord],
    idx: &[usize],
    config: &CompressionConfig,
) -> Result<f64> {
    let mut streams = Streams::new(config.seed ^ 0xE7A1);
    let mut total = 0.0;
    for chunk in idx.chunks(config.batch_size) {
        let rows: Vec<&InstanceRecord> = chunk.iter().map(|&i| &records[i]).collect();
        let batch = FieldBatch::from_records(rows.iter().copied());
        let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
        let g = Graph::new();
        let terms = model.loss(&g, &model.store, false, &model.q_store, &batch, &labels, Mode::Eval, &mut streams)?;
        total += terms.total.item() * chunk.len() as f64;
    }
    let mean = total / idx.len() as f64;
    if !mean.is_finite() {
        return Err(EdkError::Numeric(format!("held-out compression loss is {mean}")));
    }
    Ok(mean)
}
