//! Extractor and encoder composed into the knowledge function.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tensor, Var};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{EdkError, Result};
use crate::extractor::{Extraction, Extractor, ExtractorConfig, FieldBatch, HardConcrete};
use crate::nn::Cx;
use crate::Mode;

/// Architecture of the knowledge model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeArch {
    /// Number of patterns `K`.
    #[serde(default = "default_k")]
    pub num_patterns: usize,
    /// Embedding width `d`.
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Knowledge-vector width `d_k`.
    #[serde(default = "default_knowledge_dim")]
    pub knowledge_dim: usize,
    #[serde(default = "default_depth")]
    pub encoder_depth: usize,
    #[serde(default = "default_heads")]
    pub encoder_heads: usize,
    #[serde(default = "default_ffn")]
    pub ffn_mult: usize,
    #[serde(default)]
    pub hard_concrete: HardConcrete,
}

fn default_k() -> usize {
    20
}
fn default_dim() -> usize {
    24
}
fn default_knowledge_dim() -> usize {
    16
}
fn default_depth() -> usize {
    3
}
fn default_heads() -> usize {
    3
}
fn default_ffn() -> usize {
    2
}

impl Default for KnowledgeArch {
    fn default() -> Self {
        KnowledgeArch {
            num_patterns: default_k(),
            dim: default_dim(),
            knowledge_dim: default_knowledge_dim(),
            encoder_depth: default_depth(),
            encoder_heads: default_heads(),
            ffn_mult: default_ffn(),
            hard_concrete: HardConcrete::default(),
        }
    }
}

impl KnowledgeArch {
    pub fn extractor(&self) -> ExtractorConfig {
        ExtractorConfig {
            num_patterns: self.num_patterns,
            dim: self.dim,
            hard_concrete: self.hard_concrete,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            knowledge_dim: self.knowledge_dim,
            depth: self.encoder_depth,
            heads: self.encoder_heads,
            ffn_mult: self.ffn_mult,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_patterns == 0 {
            return Err(EdkError::Config("num_patterns must be >= 1".into()));
        }
        self.hard_concrete.validate()?;
        self.encoder().validate()
    }
}

#[derive(Clone, Debug)]
pub struct KnowledgeModel {
    pub arch: KnowledgeArch,
    pub extractor: Extractor,
    pub encoder: Encoder,
}

pub struct KnowledgePass<'g> {
    pub extraction: Extraction<'g>,
    /// `[b, k, d_k]` per-pattern knowledge vectors.
    pub s: Var<'g>,
    /// `[b, d_k]` abbreviated representation.
    pub c: Var<'g>,
}

/// Materialized knowledge for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeVectors {
    /// `[b, k, d_k]`.
    pub s: Tensor,
    /// `[b, d_k]`.
    pub c: Tensor,
}

impl KnowledgeModel {
    /// Registers all parameters in `store`. Names are prefixed `extractor.` and `encoder.`.
    pub fn new(
        store: &mut ParamStore,
        vocab_sizes: &[usize],
        arch: KnowledgeArch,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        arch.validate()?;
        let extractor = Extractor::new(store, vocab_sizes, arch.extractor(), rng)?;
        let encoder = Encoder::new(store, arch.encoder(), rng)?;
        Ok(KnowledgeModel {
            arch,
            extractor,
            encoder,
        })
    }

    pub fn forward<'g>(
        &self,
        cx: &Cx<'g>,
        batch: &FieldBatch,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<KnowledgePass<'g>> {
        let extraction = self.extractor.extract(cx, batch, mode, rng)?;
        let s = self.encoder.encode_patterns(cx, extraction.patterns)?;
        let c = self.encoder.aggregate(cx, s);
        Ok(KnowledgePass { extraction, s, c })
    }

    /// Eval-mode forward without gradient tracking.
    pub fn infer(&self, store: &ParamStore, batch: &FieldBatch) -> Result<KnowledgeVectors> {
        let g = crate::autograd::Graph::new();
        let cx = Cx::new(&g, store, false);
        // eval mode draws no noise; the rng is never touched
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward(&cx, batch, Mode::Eval, &mut rng)?;
        let s = (*pass.s.value()).clone();
        let c = (*pass.c.value()).clone();
        if !s.is_finite() || !c.is_finite() {
            return Err(EdkError::Numeric("non-finite knowledge vectors".into()));
        }
        Ok(KnowledgeVectors { s, c })
    }
}
