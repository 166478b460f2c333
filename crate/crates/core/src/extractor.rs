//! Knowledge extractor: turns one instance into `K` masked views of its
//! field embeddings.
//!
//! Two independent embedding sets are kept per field. The extraction set
//! feeds a single-head global self-attention whose output is projected to
//! `K` mask logits per field; the memorization set supplies the rows that
//! the relaxed masks scale.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tensor, Var};
use crate::data::InstanceRecord;
use crate::error::{EdkError, Result};
use crate::nn::{init, Cx};
use crate::Mode;

/// How the stretched hard-concrete sample is mapped into the mask range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClampMode {
    /// `min(1, max(0, x))`; masks stay in `[0, 1]`.
    Clip,
    /// `tanh(x)`; can produce small negative entries.
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardConcrete {
    /// Temperature of the relaxed Bernoulli.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Lower stretch bound, `< 0`.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Upper stretch bound, `> 1`.
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_clamp")]
    pub clamp: ClampMode,
}

fn default_beta() -> f64 {
    2.0 / 3.0
}
fn default_gamma() -> f64 {
    -0.1
}
fn default_delta() -> f64 {
    1.1
}
fn default_clamp() -> ClampMode {
    ClampMode::Clip
}

impl Default for HardConcrete {
    fn default() -> Self {
        HardConcrete {
            beta: default_beta(),
            gamma: default_gamma(),
            delta: default_delta(),
            clamp: default_clamp(),
        }
    }
}

impl HardConcrete {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(EdkError::Config(format!("hard-concrete beta must be > 0, got {}", self.beta)));
        }
        if !(self.gamma < 0.0 && self.delta > 1.0) {
            return Err(EdkError::Config(format!(
                "hard-concrete needs gamma < 0 < 1 < delta, got gamma={} delta={}",
                self.gamma, self.delta
            )));
        }
        Ok(())
    }

    fn stretch_and_clamp(&self, s: f64) -> f64 {
        let x = s * (self.delta - self.gamma) + self.gamma;
        match self.clamp {
            ClampMode::Clip => x.clamp(0.0, 1.0),
            ClampMode::Tanh => x.tanh(),
        }
    }

    /// Deterministic (eval-mode) mask value for one logit.
    pub fn eval_value(&self, logit: f64) -> f64 {
        self.stretch_and_clamp(crate::autograd::sigmoid(logit / self.beta))
    }

    /// One train-mode sample for a logit given the uniform draw `u`.
    pub fn sample_value(&self, logit: f64, u: f64) -> f64 {
        let noise = u.ln() - (1.0 - u).ln();
        self.stretch_and_clamp(crate::autograd::sigmoid((noise + logit) / self.beta))
    }

    /// Relaxed masks from logits. Train mode draws logistic noise from `rng`;
    /// eval mode fixes `u = 0.5`, so the noise term vanishes.
    pub fn apply<'g>(&self, logits: Var<'g>, mode: Mode, rng: &mut impl Rng) -> Var<'g> {
        let g = logits.graph();
        let x = match mode {
            Mode::Train => {
                let shape = logits.shape();
                let n: usize = shape.iter().product();
                let noise: Vec<f64> = (0..n)
                    .map(|_| {
                        let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
                        u.ln() - (1.0 - u).ln()
                    })
                    .collect();
                logits.add(g.constant(Tensor::new(shape, noise)))
            }
            Mode::Eval => logits,
        };
        let stretched = x
            .scale(1.0 / self.beta)
            .sigmoid()
            .scale(self.delta - self.gamma)
            .add_scalar(self.gamma);
        match self.clamp {
            ClampMode::Clip => stretched.clamp(0.0, 1.0),
            ClampMode::Tanh => stretched.tanh(),
        }
    }

    /// Expected L0 norm per entry: probability that the gate is non-zero,
    /// `sigmoid(logit - beta * ln(-gamma / delta))`, averaged over all entries.
    pub fn l0_penalty<'g>(&self, logits: Var<'g>) -> Var<'g> {
        let shift = self.beta * (-self.gamma / self.delta).ln();
        logits.add_scalar(-shift).sigmoid().mean_all()
    }
}

/// Field ids of a batch, flattened row-major as `[batch, fields]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldBatch {
    pub batch: usize,
    pub fields: usize,
    pub ids: Vec<u32>,
}

impl FieldBatch {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a InstanceRecord>) -> Self {
        let mut ids = Vec::new();
        let mut batch = 0;
        let mut fields = 0;
        for r in records {
            fields = r.field_values.len();
            ids.extend_from_slice(&r.field_values);
            batch += 1;
        }
        FieldBatch { batch, fields, ids }
    }

    pub fn single(ids: &[u32]) -> Self {
        FieldBatch {
            batch: 1,
            fields: ids.len(),
            ids: ids.to_vec(),
        }
    }
}

/// Per-field embedding tables stored as one `[sum(vocab), dim]` matrix with row offsets.
#[derive(Clone, Debug)]
pub struct FieldEmbedding {
    pub table: ParamId,
    pub vocab_sizes: Vec<usize>,
    offsets: Vec<usize>,
    pub dim: usize,
}

impl FieldEmbedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab_sizes: &[usize],
        dim: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let total: usize = vocab_sizes.iter().sum();
        let table = store.add(name, init::normal(&[total, dim], std, rng));
        let offsets = vocab_sizes
            .iter()
            .scan(0, |acc, &v| {
                let o = *acc;
                *acc += v;
                Some(o)
            })
            .collect();
        FieldEmbedding {
            table,
            vocab_sizes: vocab_sizes.to_vec(),
            offsets,
            dim,
        }
    }

    pub fn num_fields(&self) -> usize {
        self.vocab_sizes.len()
    }

    /// Table rows for ids that all belong to `field`.
    pub fn rows_for_field(&self, field: usize, ids: &[u32]) -> Result<Arc<Vec<usize>>> {
        let vocab = self.vocab_sizes[field];
        ids.iter()
            .map(|&id| {
                if (id as usize) < vocab {
                    Ok(self.offsets[field] + id as usize)
                } else {
                    Err(EdkError::Lookup {
                        field,
                        id,
                        vocab_size: vocab,
                    })
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(Arc::new)
    }

    /// Row indices into the table, validated against each field's vocabulary.
    pub fn rows(&self, batch: &FieldBatch) -> Result<Arc<Vec<usize>>> {
        if batch.fields != self.num_fields() {
            return Err(EdkError::Shape(format!(
                "batch has {} fields, embedding expects {}",
                batch.fields,
                self.num_fields()
            )));
        }
        let mut out = Vec::with_capacity(batch.ids.len());
        for (i, &id) in batch.ids.iter().enumerate() {
            let f = i % batch.fields;
            if id as usize >= self.vocab_sizes[f] {
                return Err(EdkError::Lookup {
                    field: f,
                    id,
                    vocab_size: self.vocab_sizes[f],
                });
            }
            out.push(self.offsets[f] + id as usize);
        }
        Ok(Arc::new(out))
    }

    /// `[batch, fields, dim]` embeddings.
    pub fn lookup<'g>(&self, cx: &Cx<'g>, batch: &FieldBatch) -> Result<Var<'g>> {
        let rows = self.rows(batch)?;
        Ok(cx
            .p(self.table)
            .gather_rows(rows)
            .reshape(vec![batch.batch, batch.fields, self.dim]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub num_patterns: usize,
    pub dim: usize,
    #[serde(default)]
    pub hard_concrete: HardConcrete,
}

/// Which embedding set to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Table {
    Extraction,
    Memorization,
}

#[derive(Clone, Debug)]
pub struct Extractor {
    pub config: ExtractorConfig,
    pub phi1: FieldEmbedding,
    pub phi2: FieldEmbedding,
    pub attn_q: ParamId,
    pub attn_k: ParamId,
    pub attn_v: ParamId,
    pub mask_proj: ParamId,
}

/// Intermediate values of one extraction pass.
pub struct Extraction<'g> {
    /// `[b, f, k]` mask logits.
    pub logits: Var<'g>,
    /// `[b, f, k]` relaxed masks.
    pub mask: Var<'g>,
    /// `[b, f, d]` memorization embeddings.
    pub memory: Var<'g>,
    /// `[b, k, f, d]` masked patterns.
    pub patterns: Var<'g>,
}

impl Extractor {
    pub fn new(
        store: &mut ParamStore,
        vocab_sizes: &[usize],
        config: ExtractorConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.hard_concrete.validate()?;
        if config.num_patterns == 0 || config.dim == 0 || vocab_sizes.is_empty() {
            return Err(EdkError::Config(
                "extractor needs K >= 1, dim >= 1 and at least one field".into(),
            ));
        }
        let d = config.dim;
        let k = config.num_patterns;
        let std = 1.0 / (d as f64).sqrt();
        let phi1 = FieldEmbedding::new(store, "extractor.phi1", vocab_sizes, d, std, rng);
        let phi2 = FieldEmbedding::new(store, "extractor.phi2", vocab_sizes, d, std, rng);
        let attn_q = store.add("extractor.attn.q", init::xavier_uniform(d, d, rng));
        let attn_k = store.add("extractor.attn.k", init::xavier_uniform(d, d, rng));
        let attn_v = store.add("extractor.attn.v", init::xavier_uniform(d, d, rng));
        let mask_proj = store.add("extractor.mask_proj", init::xavier_uniform(d, k, rng));
        Ok(Extractor {
            config,
            phi1,
            phi2,
            attn_q,
            attn_k,
            attn_v,
            mask_proj,
        })
    }

    pub fn num_patterns(&self) -> usize {
        self.config.num_patterns
    }

    pub fn embed<'g>(&self, cx: &Cx<'g>, batch: &FieldBatch, table: Table) -> Result<Var<'g>> {
        match table {
            Table::Extraction => self.phi1.lookup(cx, batch),
            Table::Memorization => self.phi2.lookup(cx, batch),
        }
    }

    /// Single-head self-attention over the field rows, no positional encoding.
    pub fn global_attention<'g>(&self, cx: &Cx<'g>, h0: Var<'g>) -> Result<Var<'g>> {
        if !h0.value().is_finite() {
            return Err(EdkError::Numeric("non-finite input to global attention".into()));
        }
        Ok(global_attention(
            h0,
            cx.p(self.attn_q),
            cx.p(self.attn_k),
            cx.p(self.attn_v),
        ))
    }

    pub fn mask_logits<'g>(&self, cx: &Cx<'g>, h: Var<'g>) -> Result<Var<'g>> {
        mask_logits(h, cx.p(self.mask_proj))
    }

    pub fn extract<'g>(
        &self,
        cx: &Cx<'g>,
        batch: &FieldBatch,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Extraction<'g>> {
        let h0 = self.embed(cx, batch, Table::Extraction)?;
        let h = self.global_attention(cx, h0)?;
        let logits = self.mask_logits(cx, h)?;
        let mask = self.config.hard_concrete.apply(logits, mode, rng);
        let memory = self.embed(cx, batch, Table::Memorization)?;
        let patterns = memory.mask_rows(mask);
        Ok(Extraction {
            logits,
            mask,
            memory,
            patterns,
        })
    }

    pub fn l0_penalty<'g>(&self, logits: Var<'g>) -> Var<'g> {
        self.config.hard_concrete.l0_penalty(logits)
    }
}

/// `softmax(Q K^T / sqrt(d)) V` with `Q = H0 Wq` etc., per instance.
pub fn global_attention<'g>(h0: Var<'g>, wq: Var<'g>, wk: Var<'g>, wv: Var<'g>) -> Var<'g> {
    let d = *h0.shape().last().expect("non-scalar");
    let q = h0.linear(wq, None);
    let k = h0.linear(wk, None);
    let v = h0.linear(wv, None);
    q.attention(k, v, 1, 1.0 / (d as f64).sqrt())
}

/// `M = H P` for `H [b, f, d]` and `P [d, k]`.
pub fn mask_logits<'g>(h: Var<'g>, p: Var<'g>) -> Result<Var<'g>> {
    let hs = h.shape();
    let ps = p.shape();
    if ps.len() != 2 || hs.last() != ps.first() {
        return Err(EdkError::Shape(format!(
            "mask projection {:?} incompatible with features {:?}",
            ps, hs
        )));
    }
    Ok(h.linear(p, None))
}
