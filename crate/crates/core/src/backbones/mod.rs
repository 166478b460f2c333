//! CTR backbones with an optional knowledge-injection seam.

pub mod layers;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tensor, Var};
use crate::data::{DatasetSchema, InstanceRecord};
use crate::error::{EdkError, Result};
use crate::extractor::{FieldBatch, FieldEmbedding};
use crate::knowledge::KnowledgeVectors;
use crate::nn::{Cx, Linear, Mlp};
use layers::{fm_second_order, Cin, CrossNet, InteractingLayer, TargetAttention};

/// Score clip used for predictions and log-loss.
pub const SCORE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    DeepFm,
    Dcn,
    Pnn,
    XDeepFm,
    AutoInt,
    Din,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 6] = [
        BackboneKind::DeepFm,
        BackboneKind::Dcn,
        BackboneKind::Pnn,
        BackboneKind::XDeepFm,
        BackboneKind::AutoInt,
        BackboneKind::Din,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::DeepFm => "deepfm",
            BackboneKind::Dcn => "dcn",
            BackboneKind::Pnn => "pnn",
            BackboneKind::XDeepFm => "xdeepfm",
            BackboneKind::AutoInt => "autoint",
            BackboneKind::Din => "din",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| EdkError::Config(format!("unknown backbone {s:?}")))
    }
}

/// Which knowledge-base output feeds the adapter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnowledgeMode {
    /// The aggregated vector `c`.
    #[default]
    C,
    /// Attention pooling of the pattern vectors with the target item as query.
    Patterns,
}

/// Where the adapted knowledge enters the backbone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectionSeam {
    /// As an extra field row before the interaction layers.
    #[default]
    Embedding,
    /// As a linear term added to the final logit.
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// DCN only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_depth: Option<usize>,
    /// xDeepFM only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cin_sizes: Option<Vec<usize>>,
    /// AutoInt only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_heads: Option<usize>,
    /// AutoInt only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_layers: Option<usize>,
    /// DIN only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub din_attention_hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub use_knowledge: bool,
    #[serde(default)]
    pub knowledge_mode: KnowledgeMode,
    #[serde(default)]
    pub injection: InjectionSeam,
    /// Hidden widths of the knowledge adapter; resolves to `[embed_dim]`.
    #[serde(default)]
    pub adapter_hidden: Option<Vec<usize>>,
    /// Field holding the target item; resolves to the schema's history field, else 0.
    #[serde(default)]
    pub item_field: Option<usize>,
}

fn default_embed_dim() -> usize {
    32
}
fn default_hidden() -> Vec<usize> {
    vec![64, 32]
}

impl BackboneConfig {
    pub fn new(kind: BackboneKind) -> Self {
        BackboneConfig {
            kind,
            embed_dim: default_embed_dim(),
            hidden: default_hidden(),
            cross_depth: None,
            cin_sizes: None,
            attention_heads: None,
            attention_layers: None,
            din_attention_hidden: None,
            use_knowledge: false,
            knowledge_mode: KnowledgeMode::C,
            injection: InjectionSeam::Embedding,
            adapter_hidden: None,
            item_field: None,
        }
    }

    /// Same shared settings under another kind; kind-specific ones reset.
    pub fn with_kind(&self, kind: BackboneKind) -> Self {
        BackboneConfig {
            embed_dim: self.embed_dim,
            hidden: self.hidden.clone(),
            use_knowledge: self.use_knowledge,
            knowledge_mode: self.knowledge_mode,
            injection: self.injection,
            adapter_hidden: self.adapter_hidden.clone(),
            item_field: self.item_field,
            ..BackboneConfig::new(kind)
        }
    }

    /// Fills kind-specific defaults and rejects settings that belong to another kind.
    pub fn resolve(&mut self, schema: &DatasetSchema) -> Result<()> {
        use BackboneKind::*;
        let kind = self.kind;
        let foreign = |set: bool, owner: BackboneKind, field: &str| {
            if set && kind != owner {
                Err(EdkError::Config(format!(
                    "{field} applies to {} only, not {}",
                    owner.name(),
                    kind.name()
                )))
            } else {
                Ok(())
            }
        };
        foreign(self.cross_depth.is_some(), Dcn, "cross_depth")?;
        foreign(self.cin_sizes.is_some(), XDeepFm, "cin_sizes")?;
        foreign(self.attention_heads.is_some(), AutoInt, "attention_heads")?;
        foreign(self.attention_layers.is_some(), AutoInt, "attention_layers")?;
        foreign(self.din_attention_hidden.is_some(), Din, "din_attention_hidden")?;
        match kind {
            Dcn => {
                self.cross_depth.get_or_insert(2);
            }
            XDeepFm => {
                self.cin_sizes.get_or_insert_with(|| vec![16, 16]);
            }
            AutoInt => {
                self.attention_heads.get_or_insert(2);
                self.attention_layers.get_or_insert(2);
            }
            Din => {
                self.din_attention_hidden.get_or_insert_with(|| vec![32, 16]);
            }
            DeepFm | Pnn => {}
        }
        self.adapter_hidden.get_or_insert_with(|| vec![self.embed_dim]);
        let item = *self
            .item_field
            .get_or_insert(schema.history_field.unwrap_or(0));
        if item >= schema.num_fields() {
            return Err(EdkError::Config(format!("item_field {item} out of range")));
        }
        if self.embed_dim == 0 {
            return Err(EdkError::Config("embed_dim must be >= 1".into()));
        }
        if let Some(h) = self.attention_heads {
            if h == 0 || self.embed_dim % h != 0 {
                return Err(EdkError::Config(format!(
                    "embed_dim {} not divisible by {h} attention heads",
                    self.embed_dim
                )));
            }
        }
        if kind == Din && !schema.has_history {
            return Err(EdkError::Input("din needs a dataset with a history column".into()));
        }
        Ok(())
    }
}

/// Padded behavior sequences, `[b, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryBatch {
    pub len: usize,
    pub ids: Vec<u32>,
    /// 1 for real entries, 0 for padding.
    pub mask: Vec<f64>,
}

impl HistoryBatch {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a InstanceRecord>, len: usize) -> Self {
        let mut ids = Vec::new();
        let mut mask = Vec::new();
        for r in records {
            // keep the most recent entries when a history is longer than `len`
            let h = &r.history[r.history.len().saturating_sub(len)..];
            ids.extend_from_slice(h);
            mask.extend(std::iter::repeat_n(1.0, h.len()));
            ids.extend(std::iter::repeat_n(0, len - h.len()));
            mask.extend(std::iter::repeat_n(0.0, len - h.len()));
        }
        HistoryBatch { len, ids, mask }
    }
}

pub struct BackboneInput<'a> {
    pub fields: &'a FieldBatch,
    pub history: Option<&'a HistoryBatch>,
    pub knowledge: Option<&'a KnowledgeVectors>,
}

/// Maps knowledge vectors to a `d_b` row.
#[derive(Clone, Debug)]
pub struct KnowledgeAdapter {
    pub mlp: Mlp,
    /// `[d_b, d_k]` query projection, patterns mode only.
    pub query: Option<ParamId>,
    pub mode: KnowledgeMode,
}

impl KnowledgeAdapter {
    pub fn new(
        store: &mut ParamStore,
        knowledge_dim: usize,
        embed_dim: usize,
        hidden: &[usize],
        mode: KnowledgeMode,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut widths = vec![knowledge_dim];
        widths.extend_from_slice(hidden);
        widths.push(embed_dim);
        let mlp = Mlp::new(store, "adapter.mlp", &widths, rng);
        let query = (mode == KnowledgeMode::Patterns).then(|| {
            store.add(
                "adapter.query",
                crate::nn::init::xavier_uniform(embed_dim, knowledge_dim, rng),
            )
        });
        KnowledgeAdapter { mlp, query, mode }
    }

    /// Softmax attention of `s [b, k, d_k]` with query `q [b, d_k]`, giving `[b, d_k]`.
    pub fn pool_patterns<'g>(s: Var<'g>, q: Var<'g>) -> Var<'g> {
        let sh = s.shape();
        let (b, k, dk) = (sh[0], sh[1], sh[2]);
        let w = s.bmm_nt(q.reshape(vec![b, 1, dk])).reshape(vec![b, k]).softmax_last();
        s.weighted_sum_axis1(w)
    }

    pub fn forward<'g>(
        &self,
        cx: &Cx<'g>,
        knowledge: &KnowledgeVectors,
        target: Var<'g>,
    ) -> Result<Var<'g>> {
        let pooled = match (self.mode, self.query) {
            (KnowledgeMode::Patterns, Some(q)) => {
                let s = cx.constant(knowledge.s.clone());
                Self::pool_patterns(s, target.matmul(cx.p(q)))
            }
            _ => cx.constant(knowledge.c.clone()),
        };
        if !pooled.value().is_finite() {
            return Err(EdkError::Numeric("non-finite knowledge input".into()));
        }
        Ok(self.mlp.forward(cx, pooled))
    }
}

#[derive(Clone, Debug)]
enum Head {
    DeepFm { first: FieldEmbedding, bias: ParamId, dnn: Mlp },
    Dcn { cross: CrossNet, deep: Mlp, out: Linear },
    Pnn { mlp: Mlp },
    XDeepFm { first: FieldEmbedding, bias: ParamId, cin: Cin, cin_out: Linear, dnn: Mlp },
    AutoInt { layers: Vec<InteractingLayer>, out: Linear },
    Din { attention: TargetAttention, mlp: Mlp },
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub embedding: FieldEmbedding,
    head: Head,
    pub adapter: Option<KnowledgeAdapter>,
    final_proj: Option<Linear>,
    item_field: usize,
    history_len: usize,
}

fn widths(input: usize, hidden: &[usize], out: Option<usize>) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.extend(out);
    w
}

impl Backbone {
    /// Builds a backbone; `config` is resolved against `schema` first.
    ///
    /// Backbone parameters come from a stream seeded by `seed` and adapter
    /// parameters from a separate one, so switching knowledge on leaves the
    /// initial values of shared parameters unchanged.
    pub fn new(
        store: &mut ParamStore,
        mut config: BackboneConfig,
        schema: &DatasetSchema,
        knowledge_dim: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        config.resolve(schema)?;
        if config.use_knowledge && knowledge_dim.is_none() {
            return Err(EdkError::Config("use_knowledge requires a knowledge base".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let f = schema.num_fields();
        let vocab = schema.vocab_sizes();
        let embedding = FieldEmbedding::new(store, "backbone.embedding", &vocab, d, 0.05, &mut rng);
        let extra_row = config.use_knowledge && config.injection == InjectionSeam::Embedding;
        let n = f + usize::from(extra_row);
        let hidden = config.hidden.clone();
        let head = match config.kind {
            BackboneKind::DeepFm => Head::DeepFm {
                first: FieldEmbedding::new(store, "backbone.first_order", &vocab, 1, 0.01, &mut rng),
                bias: store.add("backbone.bias", Tensor::zeros(vec![1])),
                dnn: Mlp::new(store, "backbone.dnn", &widths(n * d, &hidden, Some(1)), &mut rng),
            },
            BackboneKind::Dcn => {
                let deep = Mlp::new(store, "backbone.deep", &widths(n * d, &hidden, None), &mut rng);
                let deep_out = deep.out_dim();
                Head::Dcn {
                    cross: CrossNet::new(store, "backbone.cross", n * d, config.cross_depth.unwrap_or(2), &mut rng),
                    deep,
                    out: Linear::new(store, "backbone.out", n * d + deep_out, 1, true, &mut rng),
                }
            }
            BackboneKind::Pnn => Head::Pnn {
                mlp: Mlp::new(
                    store,
                    "backbone.mlp",
                    &widths(n * d + n * (n - 1) / 2, &hidden, Some(1)),
                    &mut rng,
                ),
            },
            BackboneKind::XDeepFm => {
                let cin = Cin::new(
                    store,
                    "backbone.cin",
                    n,
                    config.cin_sizes.as_deref().unwrap_or(&[16, 16]),
                    &mut rng,
                );
                let cin_dim = cin.out_dim();
                Head::XDeepFm {
                    first: FieldEmbedding::new(store, "backbone.first_order", &vocab, 1, 0.01, &mut rng),
                    bias: store.add("backbone.bias", Tensor::zeros(vec![1])),
                    cin,
                    cin_out: Linear::new(store, "backbone.cin_out", cin_dim, 1, false, &mut rng),
                    dnn: Mlp::new(store, "backbone.dnn", &widths(n * d, &hidden, Some(1)), &mut rng),
                }
            }
            BackboneKind::AutoInt => Head::AutoInt {
                layers: (0..config.attention_layers.unwrap_or(2))
                    .map(|i| {
                        InteractingLayer::new(
                            store,
                            &format!("backbone.int{i}"),
                            d,
                            config.attention_heads.unwrap_or(2),
                            &mut rng,
                        )
                    })
                    .collect(),
                out: Linear::new(store, "backbone.out", n * d, 1, true, &mut rng),
            },
            BackboneKind::Din => Head::Din {
                attention: TargetAttention::new(
                    store,
                    "backbone.din_att",
                    d,
                    config.din_attention_hidden.as_deref().unwrap_or(&[32, 16]),
                    &mut rng,
                ),
                mlp: Mlp::new(store, "backbone.mlp", &widths(n * d + d, &hidden, Some(1)), &mut rng),
            },
        };
        let mut adapter_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xADA7_7E55);
        let (adapter, final_proj) = match (config.use_knowledge, knowledge_dim) {
            (true, Some(dk)) => {
                let adapter = KnowledgeAdapter::new(
                    store,
                    dk,
                    d,
                    config.adapter_hidden.as_deref().unwrap_or(&[]),
                    config.knowledge_mode,
                    &mut adapter_rng,
                );
                let proj = (config.injection == InjectionSeam::Final)
                    .then(|| Linear::new(store, "adapter.final", d, 1, false, &mut adapter_rng));
                (Some(adapter), proj)
            }
            _ => (None, None),
        };
        let item_field = config.item_field.unwrap_or(0);
        Ok(Backbone {
            config,
            embedding,
            head,
            adapter,
            final_proj,
            item_field,
            history_len: schema.max_history_len,
        })
    }

    pub fn history_len(&self) -> usize {
        self.history_len
    }

    pub fn needs_history(&self) -> bool {
        self.config.kind == BackboneKind::Din
    }

    /// Logits `[b]`.
    pub fn forward<'g>(&self, cx: &Cx<'g>, input: &BackboneInput<'_>) -> Result<Var<'g>> {
        let fields = input.fields;
        let (b, f, d) = (fields.batch, fields.fields, self.config.embed_dim);
        let e = self.embedding.lookup(cx, fields)?;
        let target = || e.reshape(vec![b, f * d]).slice_last(self.item_field * d, d);
        let mut rows = e;
        let mut final_term = None;
        if let Some(adapter) = &self.adapter {
            let kv = input.knowledge.ok_or_else(|| {
                EdkError::Input("backbone expects knowledge vectors for every batch".into())
            })?;
            if kv.c.shape().first() != Some(&b) {
                return Err(EdkError::Shape(format!(
                    "knowledge batch {:?} does not match input batch {b}",
                    kv.c.shape()
                )));
            }
            let a = adapter.forward(cx, kv, target())?;
            match &self.final_proj {
                Some(p) => final_term = Some(p.forward(cx, a).reshape(vec![b])),
                None => rows = rows.concat_axis1(a.reshape(vec![b, 1, d])),
            }
        }
        let n = rows.shape()[1];
        let flat = || rows.reshape(vec![b, n * d]);
        let first_order = |first: &FieldEmbedding, bias: ParamId| -> Result<Var<'g>> {
            let w = first.lookup(cx, fields)?.reshape(vec![b, f]).sum_last();
            Ok(w.reshape(vec![b, 1]).add_bias(cx.p(bias)).reshape(vec![b]))
        };
        let logit = match &self.head {
            Head::DeepFm { first, bias, dnn } => first_order(first, *bias)?
                .add(fm_second_order(rows))
                .add(dnn.forward(cx, flat()).reshape(vec![b])),
            Head::Dcn { cross, deep, out } => {
                let x0 = flat();
                let both = Var::concat_last(&[cross.forward(cx, x0), deep.forward(cx, x0).relu()]);
                out.forward(cx, both).reshape(vec![b])
            }
            Head::Pnn { mlp } => {
                let x = Var::concat_last(&[flat(), rows.pairwise_inner()]);
                mlp.forward(cx, x).reshape(vec![b])
            }
            Head::XDeepFm {
                first,
                bias,
                cin,
                cin_out,
                dnn,
            } => first_order(first, *bias)?
                .add(cin_out.forward(cx, cin.forward(cx, rows)).reshape(vec![b]))
                .add(dnn.forward(cx, flat()).reshape(vec![b])),
            Head::AutoInt { layers, out } => {
                let mut x = rows;
                for layer in layers {
                    x = layer.forward(cx, x);
                }
                out.forward(cx, x.reshape(vec![b, n * d])).reshape(vec![b])
            }
            Head::Din { attention, mlp } => {
                let hist = input.history.ok_or_else(|| {
                    EdkError::Input("din needs behavior history for every batch".into())
                })?;
                let pooled = if hist.len == 0 {
                    cx.constant(Tensor::zeros(vec![b, d]))
                } else {
                    if hist.ids.len() != b * hist.len {
                        return Err(EdkError::Shape("history batch does not match input batch".into()));
                    }
                    let idx = self.embedding.rows_for_field(self.item_field, &hist.ids)?;
                    let h = cx
                        .p(self.embedding.table)
                        .gather_rows(idx)
                        .reshape(vec![b, hist.len, d]);
                    let mask = cx.constant(Tensor::new(vec![b, hist.len], hist.mask.clone()));
                    attention.forward(cx, h, target(), mask)
                };
                mlp.forward(cx, Var::concat_last(&[flat(), pooled])).reshape(vec![b])
            }
        };
        Ok(match final_term {
            Some(t) => logit.add(t),
            None => logit,
        })
    }

    /// Click probabilities clipped to `[SCORE_EPS, 1 - SCORE_EPS]`.
    pub fn predict(&self, store: &ParamStore, input: &BackboneInput<'_>) -> Result<Vec<f64>> {
        let g = crate::autograd::Graph::new();
        let cx = Cx::new(&g, store, false);
        let logits = self.forward(&cx, input)?.value();
        if !logits.is_finite() {
            return Err(EdkError::Numeric("non-finite backbone output".into()));
        }
        Ok(logits
            .data()
            .iter()
            .map(|&z| crate::autograd::sigmoid(z).clamp(SCORE_EPS, 1.0 - SCORE_EPS))
            .collect())
    }

    /// Mean binary cross-entropy on logits.
    pub fn loss<'g>(&self, cx: &Cx<'g>, input: &BackboneInput<'_>, labels: &[u8]) -> Result<Var<'g>> {
        let logits = self.forward(cx, input)?;
        let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
        Ok(logits.bce_with_logits(Arc::new(y)))
    }
}
