//! Set encoder mapping each masked pattern to a knowledge vector, plus the
//! instance-level aggregation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Var};
use crate::error::{EdkError, Result};
use crate::nn::{Cx, LayerNorm, Linear, Mlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub knowledge_dim: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
}

fn default_depth() -> usize {
    3
}
fn default_heads() -> usize {
    3
}
fn default_ffn_mult() -> usize {
    2
}

impl EncoderConfig {
    pub fn new(dim: usize, knowledge_dim: usize) -> Self {
        EncoderConfig {
            dim,
            knowledge_dim,
            depth: default_depth(),
            heads: default_heads(),
            ffn_mult: default_ffn_mult(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.knowledge_dim == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err(EdkError::Config(
                "encoder dims, heads and ffn multiplier must be positive".into(),
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(EdkError::Config(format!(
                "encoder width {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Pre-norm transformer block over a set of rows.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ffn: Mlp,
    heads: usize,
    head_dim: usize,
}

impl EncoderBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        EncoderBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[d, cfg.ffn_mult * d, d], rng),
            heads: cfg.heads,
            head_dim: cfg.head_dim(),
        }
    }

    pub fn forward<'g>(&self, cx: &Cx<'g>, x: Var<'g>) -> Var<'g> {
        let n = self.ln1.forward(cx, x);
        let att = self.q.forward(cx, n).attention(
            self.k.forward(cx, n),
            self.v.forward(cx, n),
            self.heads,
            1.0 / (self.head_dim as f64).sqrt(),
        );
        let x = x.add(self.o.forward(cx, att));
        let n = self.ln2.forward(cx, x);
        x.add(self.ffn.forward(cx, n))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub blocks: Vec<EncoderBlock>,
    /// Per-pattern head, `d -> d_k`.
    pub head: Mlp,
    /// Instance-level aggregation head, `d_k -> d_k`.
    pub aggregate: Mlp,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.depth)
            .map(|i| EncoderBlock::new(store, &format!("encoder.block{i}"), &config, rng))
            .collect();
        let (d, dk) = (config.dim, config.knowledge_dim);
        let head = Mlp::new(store, "encoder.head", &[d, dk, dk], rng);
        let aggregate = Mlp::new(store, "encoder.aggregate", &[dk, dk, dk], rng);
        Ok(Encoder {
            config,
            blocks,
            head,
            aggregate,
        })
    }

    /// `[n, f, d]` sets of rows -> `[n, d_k]`. Invariant to row order.
    pub fn encode_sets<'g>(&self, cx: &Cx<'g>, rows: Var<'g>) -> Result<Var<'g>> {
        let shape = rows.shape();
        if shape.len() != 3 || shape[2] != self.config.dim {
            return Err(EdkError::Shape(format!(
                "encoder expects [n, f, {}], got {:?}",
                self.config.dim, shape
            )));
        }
        if shape[1] == 0 {
            return Err(EdkError::Shape("cannot encode an empty set".into()));
        }
        let mut x = rows;
        for block in &self.blocks {
            x = block.forward(cx, x);
        }
        Ok(self.head.forward(cx, x.mean_axis1()))
    }

    /// Patterns `[b, k, f, d]` -> knowledge vectors `[b, k, d_k]`.
    pub fn encode_patterns<'g>(&self, cx: &Cx<'g>, patterns: Var<'g>) -> Result<Var<'g>> {
        let &[b, k, f, d] = patterns.shape().as_slice() else {
            return Err(EdkError::Shape(format!(
                "patterns must be [b, k, f, d], got {:?}",
                patterns.shape()
            )));
        };
        let s = self.encode_sets(cx, patterns.reshape(vec![b * k, f, d]))?;
        Ok(s.reshape(vec![b, k, self.config.knowledge_dim]))
    }

    /// `[b, k, d_k]` -> `[b, d_k]`: mean over patterns, then the aggregation MLP.
    pub fn aggregate<'g>(&self, cx: &Cx<'g>, s: Var<'g>) -> Var<'g> {
        aggregate(cx, &self.aggregate, s)
    }
}

pub fn aggregate<'g>(cx: &Cx<'g>, mlp: &Mlp, s: Var<'g>) -> Var<'g> {
    mlp.forward(cx, s.mean_axis1())
}
