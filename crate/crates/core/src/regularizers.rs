//! Training signals applied to the knowledge vectors: label-MI maximization
//! with an in-batch discriminator, a variational upper bound on input-MI, and
//! a contrastive loss pushing patterns of one instance apart.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tensor, Var};
use crate::error::{EdkError, Result};
use crate::nn::{dropout_mask, init, Cx, LayerNorm, Mlp};
use crate::Mode;

/// Probability clip applied to discriminator outputs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    #[serde(default = "default_lambda2")]
    pub lambda2: f64,
}

fn one() -> f64 {
    1.0
}
fn default_lambda1() -> f64 {
    0.1
}
fn default_lambda2() -> f64 {
    0.01
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            lambda1: default_lambda1(),
            lambda2: default_lambda2(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(EdkError::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerConfig {
    #[serde(default)]
    pub weights: LossWeights,
    /// Include the input-MI upper bound in the regularizer.
    #[serde(default = "yes")]
    pub vclub: bool,
    /// InfoNCE temperature.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Dropout rate of the projection head.
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Hidden width of the discriminator MLP; defaults to `d_k`.
    #[serde(default)]
    pub discriminator_hidden: Option<usize>,
    /// Hidden width of the variational network; defaults to `d_k`.
    #[serde(default)]
    pub variational_hidden: Option<usize>,
}

fn yes() -> bool {
    true
}
fn default_temperature() -> f64 {
    0.5
}
fn default_dropout() -> f64 {
    0.1
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            weights: LossWeights::default(),
            vclub: true,
            temperature: default_temperature(),
            dropout: default_dropout(),
            discriminator_hidden: None,
            variational_hidden: None,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.temperature > 0.0) {
            return Err(EdkError::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EdkError::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Scores `(s, c)` pairs with a bilinear term plus an MLP on the concatenation.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub bilinear: ParamId,
    pub mlp: Mlp,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, dk: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Discriminator {
            bilinear: store.add("disc.bilinear", init::xavier_uniform(dk, dk, rng)),
            mlp: Mlp::new(store, "disc.mlp", &[2 * dk, hidden, 1], rng),
        }
    }

    /// Logits for row-aligned `s [n, d_k]`, `c [n, d_k]`, shape `[n]`.
    pub fn score<'g>(&self, cx: &Cx<'g>, s: Var<'g>, c: Var<'g>) -> Var<'g> {
        let n = s.shape()[0];
        let bil = s.matmul(cx.p(self.bilinear)).row_dot(c);
        let mlp = self.mlp.forward(cx, Var::concat_last(&[s, c])).reshape(vec![n]);
        bil.add(mlp)
    }

    /// Clipped probabilities in `[eps, 1 - eps]`.
    pub fn prob<'g>(&self, cx: &Cx<'g>, s: Var<'g>, c: Var<'g>) -> Var<'g> {
        self.score(cx, s, c).sigmoid().clamp(PROB_EPS, 1.0 - PROB_EPS)
    }
}

/// `-(mean log p_pos + mean log(1 - p_neg))` on already clipped probabilities.
pub fn jsd_loss<'g>(p_pos: Var<'g>, p_neg: Var<'g>) -> Var<'g> {
    let pos = p_pos.ln().mean_all();
    let neg = p_neg.scale(-1.0).add_scalar(1.0).ln().mean_all();
    pos.add(neg).scale(-1.0)
}

/// For each instance `i` repeated `k` times, the index of another in-batch
/// instance with the same label and one with the opposite label.
///
/// An instance whose label is unique in the batch pairs with itself as the positive.
pub fn sample_contrast_indices(
    labels: &[u8],
    k: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_label: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &y) in labels.iter().enumerate() {
        by_label[usize::from(y != 0)].push(i);
    }
    if by_label[0].is_empty() || by_label[1].is_empty() {
        return Err(EdkError::BatchComposition(
            "label-MI term needs both labels in the batch".into(),
        ));
    }
    let mut pos = Vec::with_capacity(labels.len() * k);
    let mut neg = Vec::with_capacity(labels.len() * k);
    for (i, &y) in labels.iter().enumerate() {
        let same = &by_label[usize::from(y != 0)];
        let other = &by_label[usize::from(y == 0)];
        for _ in 0..k {
            let p = if same.len() == 1 {
                i
            } else {
                // uniform over the same-label instances other than i
                let mut j = same[rng.random_range(0..same.len() - 1)];
                if j == i {
                    j = same[same.len() - 1];
                }
                j
            };
            pos.push(p);
            neg.push(other[rng.random_range(0..other.len())]);
        }
    }
    Ok((pos, neg))
}

/// Label-MI loss for `s [b, k, d_k]`, `c [b, d_k]`.
pub fn dim_label_mi_loss<'g>(
    cx: &Cx<'g>,
    disc: &Discriminator,
    s: Var<'g>,
    c: Var<'g>,
    labels: &[u8],
    rng: &mut impl Rng,
) -> Result<Var<'g>> {
    let &[b, k, dk] = s.shape().as_slice() else {
        return Err(EdkError::Shape(format!("s must be [b, k, d_k], got {:?}", s.shape())));
    };
    if c.shape() != [b, dk] || labels.len() != b {
        return Err(EdkError::Shape(format!(
            "c {:?} / labels {} do not match s {:?}",
            c.shape(),
            labels.len(),
            s.shape()
        )));
    }
    let (pos, neg) = sample_contrast_indices(labels, k, rng)?;
    let flat = s.reshape(vec![b * k, dk]);
    let c_pos = c.gather_rows(Arc::new(pos));
    let c_neg = c.gather_rows(Arc::new(neg));
    Ok(jsd_loss(disc.prob(cx, flat, c_pos), disc.prob(cx, flat, c_neg)))
}

/// Diagonal Gaussian `q(c | x)` parameterized by an MLP.
#[derive(Clone, Debug)]
pub struct VariationalNet {
    pub mlp: Mlp,
    pub out_dim: usize,
}

impl VariationalNet {
    pub fn new(store: &mut ParamStore, in_dim: usize, hidden: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        VariationalNet {
            mlp: Mlp::new(store, "vclub.q", &[in_dim, hidden, 2 * out_dim], rng),
            out_dim,
        }
    }

    /// Mean and log-variance, each `[n, out_dim]`. The log-variance is squashed
    /// into (-1, 1); an unbounded variance lets the bound's gradient explode.
    pub fn params<'g>(&self, cx: &Cx<'g>, x: Var<'g>) -> (Var<'g>, Var<'g>) {
        let h = self.mlp.forward(cx, x);
        let mu = h.slice_last(0, self.out_dim);
        let logvar = h.slice_last(self.out_dim, self.out_dim).tanh();
        (mu, logvar)
    }
}

/// Per-row Gaussian log-density, `[n]`.
pub fn gaussian_log_likelihood<'g>(mu: Var<'g>, logvar: Var<'g>, c: Var<'g>) -> Var<'g> {
    let diff = c.sub(mu);
    let quad = diff.square().mul(logvar.scale(-1.0).exp());
    quad.add(logvar).add_scalar((2.0 * PI).ln()).sum_last().scale(-0.5)
}

/// Shuffled-pair vCLUB estimate: mean log q over matched pairs minus mean
/// log q over pairs mismatched by one random permutation.
pub fn vclub_bound<'g>(
    cx: &Cx<'g>,
    net: &VariationalNet,
    x: Var<'g>,
    c: Var<'g>,
    rng: &mut impl Rng,
) -> Var<'g> {
    let n = c.shape()[0];
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let (mu, logvar) = net.params(cx, x);
    let pos = gaussian_log_likelihood(mu, logvar, c).mean_all();
    let neg = gaussian_log_likelihood(mu, logvar, c.gather_rows(Arc::new(perm))).mean_all();
    pos.sub(neg)
}

/// Negative mean log-likelihood used to fit `q`.
pub fn vclub_fit_loss<'g>(cx: &Cx<'g>, net: &VariationalNet, x: Var<'g>, c: Var<'g>) -> Var<'g> {
    let (mu, logvar) = net.params(cx, x);
    gaussian_log_likelihood(mu, logvar, c).mean_all().scale(-1.0)
}

/// `z = MLP(LayerNorm(Dropout(s)))`.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub norm: LayerNorm,
    pub mlp: Mlp,
    pub dropout: f64,
    pub temperature: f64,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, dk: usize, dropout: f64, temperature: f64, rng: &mut impl Rng) -> Self {
        ProjectionHead {
            norm: LayerNorm::new(store, "proj.norm", dk),
            mlp: Mlp::new(store, "proj.mlp", &[dk, dk, dk], rng),
            dropout,
            temperature,
        }
    }

    pub fn project<'g>(&self, cx: &Cx<'g>, s: Var<'g>, mode: Mode, rng: &mut impl Rng) -> Var<'g> {
        let x = if mode == Mode::Train && self.dropout > 0.0 {
            s.mul(cx.constant(dropout_mask(&s.shape(), self.dropout, rng)))
        } else {
            s
        };
        self.mlp.forward(cx, self.norm.forward(cx, x))
    }
}

/// InfoNCE over `z1, z2 [b, k, w]` with the positive for `z1[b, j]` at `z2[b, j]`.
pub fn info_nce<'g>(z1: Var<'g>, z2: Var<'g>, temperature: f64) -> Var<'g> {
    z1.bmm_nt(z2).scale(1.0 / temperature).cross_entropy_diagonal()
}

/// Contrastive loss over the `k` patterns of each instance, `s [b, k, d_k]`.
pub fn disentangle_loss<'g>(
    cx: &Cx<'g>,
    head: &ProjectionHead,
    s: Var<'g>,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var<'g>> {
    let &[b, k, dk] = s.shape().as_slice() else {
        return Err(EdkError::Shape(format!("s must be [b, k, d_k], got {:?}", s.shape())));
    };
    if k < 2 {
        return Err(EdkError::Contract(
            "disentanglement needs at least two patterns".into(),
        ));
    }
    let flat = s.reshape(vec![b * k, dk]);
    let z1 = head.project(cx, flat, mode, rng);
    let z2 = head.project(cx, flat, mode, rng);
    let w = z1.shape()[1];
    Ok(info_nce(
        z1.reshape(vec![b, k, w]),
        z2.reshape(vec![b, k, w]),
        head.temperature,
    ))
}

/// `alpha * dim + vclub + beta * dis`; absent terms count as zero.
pub fn l_reg<'g>(
    cx: &Cx<'g>,
    weights: &LossWeights,
    dim: Option<Var<'g>>,
    vclub: Option<Var<'g>>,
    dis: Option<Var<'g>>,
) -> Var<'g> {
    let mut total = cx.constant(Tensor::scalar(0.0));
    if let Some(v) = dim {
        total = total.add(v.scale(weights.alpha));
    }
    if let Some(v) = vclub {
        total = total.add(v);
    }
    if let Some(v) = dis {
        total = total.add(v.scale(weights.beta));
    }
    total
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::autograd::{check, Graph};
    use crate::nn::{Adam, AdamConfig};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn uninformative_discriminator_gives_two_ln_two() {
        let mut store = ParamStore::new();
        let disc = Discriminator::new(&mut store, 3, 4, &mut rng(0));
        for id in store.ids().collect::<Vec<_>>() {
            let z = Tensor::zeros(store.get(id).shape().to_vec());
            store.set(id, z);
        }
        let g = Graph::new();
        let cx = Cx::new(&g, &store, false);
        let mut r = rng(1);
        let s = g.constant(random(&[4, 2, 3], &mut r));
        let c = g.constant(random(&[4, 3], &mut r));
        let loss = dim_label_mi_loss(&cx, &disc, s, c, &[0, 1, 1, 0], &mut r).unwrap();
        assert!((loss.item() - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_discriminator_loss_is_near_zero() {
        let g = Graph::new();
        let clip = |x: f64| g.constant(Tensor::full(vec![5], x)).sigmoid().clamp(PROB_EPS, 1.0 - PROB_EPS);
        let loss = jsd_loss(clip(60.0), clip(-60.0)).item();
        assert!(loss >= 0.0 && (loss - 2.0 * PROB_EPS).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn single_label_batch_is_rejected() {
        let err = sample_contrast_indices(&[1, 1, 1], 2, &mut rng(0));
        assert!(matches!(err, Err(EdkError::BatchComposition(_))));
    }

    #[test]
    fn contrast_indices_respect_labels() {
        let labels = [0u8, 1, 1, 0, 1, 0, 0];
        let (pos, neg) = sample_contrast_indices(&labels, 3, &mut rng(2)).unwrap();
        for (row, (&p, &n)) in pos.iter().zip(&neg).enumerate() {
            let i = row / 3;
            assert_eq!(labels[p], labels[i]);
            assert_ne!(p, i);
            assert_ne!(labels[n], labels[i]);
        }
        // a unique label pairs with itself
        let (pos, _) = sample_contrast_indices(&[1, 0, 0], 1, &mut rng(0)).unwrap();
        assert_eq!(pos[0], 0);
    }

    #[test]
    fn same_label_partner_is_uniform() {
        let labels = [1u8, 1, 1, 1, 0];
        let (pos, _) = sample_contrast_indices(&labels, 30_000, &mut rng(7)).unwrap();
        let mut counts = [0usize; 4];
        for &p in &pos[..30_000] {
            counts[p] += 1;
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..] {
            assert!((c as f64 / 30_000.0 - 1.0 / 3.0).abs() < 0.015, "{counts:?}");
        }
    }

    #[test]
    fn discriminator_training_reduces_dim_loss() {
        // label is a function of the first coordinate of s and c
        let (b, k, dk) = (32usize, 2usize, 4usize);
        let mut store = ParamStore::new();
        let disc = Discriminator::new(&mut store, dk, 8, &mut rng(3));
        let mut adam = Adam::new(AdamConfig::new(0.01, 0.0));
        let mut r = rng(4);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            let labels: Vec<u8> = (0..b).map(|i| (i % 2) as u8).collect();
            let sign = |y: u8| if y == 1 { 1.0 } else { -1.0 };
            let mut s = random(&[b, k, dk], &mut r);
            let mut c = random(&[b, dk], &mut r);
            for i in 0..b {
                for j in 0..k {
                    s.data_mut()[(i * k + j) * dk] = sign(labels[i]);
                }
                c.data_mut()[i * dk] = sign(labels[i]);
            }
            let g = Graph::new();
            let cx = Cx::new(&g, &store, true);
            let loss = dim_label_mi_loss(&cx, &disc, g.constant(s), g.constant(c), &labels, &mut r).unwrap();
            last = loss.item();
            first.get_or_insert(last);
            let grads = g.backward(loss);
            adam.step(&mut store, &grads);
        }
        assert!(first.unwrap() - last >= 0.5, "{first:?} -> {last}");
    }

    #[test]
    fn vclub_single_sample_is_zero() {
        let mut store = ParamStore::new();
        let net = VariationalNet::new(&mut store, 3, 4, 2, &mut rng(0));
        let g = Graph::new();
        let cx = Cx::new(&g, &store, false);
        let mut r = rng(1);
        let x = g.constant(random(&[1, 3], &mut r));
        let c = g.constant(random(&[1, 2], &mut r));
        assert_eq!(vclub_bound(&cx, &net, x, c, &mut r).item(), 0.0);
    }

    fn gaussian_pairs(n: usize, rho: f64, r: &mut ChaCha8Rng) -> (Tensor, Tensor) {
        let mut x = Vec::with_capacity(n);
        let mut c = Vec::with_capacity(n);
        for _ in 0..n {
            let a: f64 = StandardNormal.sample(r);
            let e: f64 = StandardNormal.sample(r);
            x.push(a);
            c.push(rho * a + (1.0 - rho * rho).sqrt() * e);
        }
        (Tensor::new(vec![n, 1], x), Tensor::new(vec![n, 1], c))
    }

    fn fit_q(rho: f64, steps: usize) -> (ParamStore, VariationalNet) {
        let mut store = ParamStore::new();
        let net = VariationalNet::new(&mut store, 1, 16, 1, &mut rng(5));
        let mut adam = Adam::new(AdamConfig::new(0.01, 0.0));
        let mut r = rng(6);
        for _ in 0..steps {
            let (x, c) = gaussian_pairs(256, rho, &mut r);
            let g = Graph::new();
            let cx = Cx::new(&g, &store, true);
            let loss = vclub_fit_loss(&cx, &net, g.constant(x), g.constant(c));
            let grads = g.backward(loss);
            adam.step(&mut store, &grads);
        }
        (store, net)
    }

    fn bound_on_fresh_samples(store: &ParamStore, net: &VariationalNet, rho: f64) -> f64 {
        let mut r = rng(8);
        let (x, c) = gaussian_pairs(10_000, rho, &mut r);
        let g = Graph::new();
        let cx = Cx::new(&g, store, false);
        vclub_bound(&cx, net, g.constant(x), g.constant(c), &mut r).item()
    }

    #[test]
    fn vclub_near_zero_for_independent_inputs() {
        let (store, net) = fit_q(0.0, 600);
        let b = bound_on_fresh_samples(&store, &net, 0.0);
        assert!(b.abs() < 0.05, "{b}");
    }

    #[test]
    fn vclub_upper_bounds_correlated_gaussian_mi() {
        let (store, net) = fit_q(0.9, 600);
        let b = bound_on_fresh_samples(&store, &net, 0.9);
        let true_mi = -0.5 * (1.0f64 - 0.81).ln();
        assert!(b >= true_mi - 0.1, "{b} vs {true_mi}");
    }

    #[test]
    fn vclub_fit_loss_decreases_on_linear_target() {
        let mut store = ParamStore::new();
        let net = VariationalNet::new(&mut store, 3, 16, 2, &mut rng(2));
        let mut r = rng(3);
        let x = random(&[64, 3], &mut r);
        let c = Tensor::new(
            vec![64, 2],
            (0..64)
                .flat_map(|i| {
                    let row = x.row(i);
                    vec![row[0] - 0.5 * row[1], 2.0 * row[2]]
                })
                .collect(),
        );
        let mut adam = Adam::new(AdamConfig::new(0.003, 0.0));
        let mut prev = f64::INFINITY;
        for step in 0..50 {
            let g = Graph::new();
            let cx = Cx::new(&g, &store, true);
            let loss = vclub_fit_loss(&cx, &net, g.constant(x.clone()), g.constant(c.clone()));
            let v = loss.item();
            assert!(v <= prev + 1e-3, "step {step}: {v} after {prev}");
            prev = v;
            let grads = g.backward(loss);
            adam.step(&mut store, &grads);
        }
    }

    #[test]
    fn constant_target_reaches_the_bounded_entropy_floor() {
        let mut store = ParamStore::new();
        let net = VariationalNet::new(&mut store, 2, 3, 1, &mut rng(0));
        for id in store.ids().collect::<Vec<_>>() {
            let z = Tensor::zeros(store.get(id).shape().to_vec());
            store.set(id, z);
        }
        let last_bias = net.mlp.layers.last().unwrap().bias.unwrap();
        store.set(last_bias, Tensor::new(vec![2], vec![0.7, -30.0]));
        let g = Graph::new();
        let cx = Cx::new(&g, &store, false);
        let x = g.constant(random(&[8, 2], &mut rng(1)));
        let c = g.constant(Tensor::full(vec![8, 1], 0.7));
        let loss = vclub_fit_loss(&cx, &net, x, c).item();
        // the log-variance saturates at tanh(-30)
        let floor = 0.5 * ((-30.0f64).tanh() + (2.0 * PI).ln());
        assert!((loss - floor).abs() < 1e-12);
    }

    #[test]
    fn vclub_fit_leaves_main_parameters_untouched() {
        let mut main = ParamStore::new();
        let enc = Mlp::new(&mut main, "enc", &[3, 2], &mut rng(0));
        let mut qs = ParamStore::new();
        let net = VariationalNet::new(&mut qs, 3, 4, 2, &mut rng(1));
        let g = Graph::new();
        let main_cx = Cx::new(&g, &main, false);
        let q_cx = Cx::new(&g, &qs, true);
        let x = g.constant(random(&[5, 3], &mut rng(2)));
        let c = enc.forward(&main_cx, x);
        let grads = g.backward(vclub_fit_loss(&q_cx, &net, x, c));
        assert!(grads.get(&main, enc.layers[0].weight).is_none());
        assert!(grads.get(&qs, net.mlp.layers[0].weight).is_some());
    }

    fn identity_head(store: &mut ParamStore, dk: usize, temperature: f64) -> ProjectionHead {
        let head = ProjectionHead::new(store, dk, 0.0, temperature, &mut rng(0));
        head
    }

    #[test]
    fn identical_patterns_give_log_k() {
        let mut store = ParamStore::new();
        let head = identity_head(&mut store, 4, 0.5);
        let g = Graph::new();
        let cx = Cx::new(&g, &store, false);
        let row = [0.3, -0.2, 0.9, 0.1];
        let s = g.constant(Tensor::new(vec![2, 5, 4], row.repeat(10)));
        let loss = disentangle_loss(&cx, &head, s, Mode::Train, &mut rng(1)).unwrap();
        assert!((loss.item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_unit_patterns_closed_form() {
        let g = Graph::new();
        for k in [2usize, 3, 4] {
            let mut data = vec![0.0; k * k];
            for j in 0..k {
                data[j * k + j] = 1.0;
            }
            let z = g.constant(Tensor::new(vec![1, k, k], data));
            let loss = info_nce(z, z, 0.5).item();
            let e2 = 2f64.exp();
            let expect = -(e2 / (e2 + (k as f64 - 1.0))).ln();
            assert!((loss - expect).abs() < 1e-12);
            if k == 2 {
                assert!((loss - 0.127).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn lower_similarity_lowers_contrastive_loss() {
        let g = Graph::new();
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let angle = step as f64 / 10.0 * std::f64::consts::FRAC_PI_2;
            let z = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, angle.cos(), angle.sin()]));
            let loss = info_nce(z, z, 0.5).item();
            assert!(loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn disentangle_requires_two_patterns() {
        let mut store = ParamStore::new();
        let head = identity_head(&mut store, 3, 0.5);
        let g = Graph::new();
        let cx = Cx::new(&g, &store, false);
        let s = g.constant(Tensor::zeros(vec![2, 1, 3]));
        assert!(matches!(
            disentangle_loss(&cx, &head, s, Mode::Eval, &mut rng(0)),
            Err(EdkError::Contract(_))
        ));
    }

    #[test]
    fn regularizer_weights_combine_linearly() {
        let g = Graph::new();
        let store = ParamStore::new();
        let cx = Cx::new(&g, &store, false);
        let (d, v, s) = (0.8, 0.3, 1.7);
        let t = |x: f64| Some(g.constant(Tensor::scalar(x)));
        let w = |alpha, beta| LossWeights {
            alpha,
            beta,
            ..LossWeights::default()
        };
        let only_v = l_reg(&cx, &w(0.0, 0.0), t(d), t(v), t(s)).item();
        assert_eq!(only_v, v);
        let a = l_reg(&cx, &w(1.0, 0.0), t(d), None, t(s)).item();
        let b = l_reg(&cx, &w(0.0, 1.0), t(d), None, t(s)).item();
        let both = l_reg(&cx, &w(1.0, 1.0), t(d), None, t(s)).item();
        assert!((a + b - both).abs() < 1e-9);
        assert!((l_reg(&cx, &w(2.0, 0.5), t(d), t(v), t(s)).item() - (2.0 * d + v + 0.5 * s)).abs() < 1e-12);
    }

    #[test]
    fn l_reg_gradient_wrt_knowledge_vectors() {
        let (b, k, dk) = (4usize, 2usize, 3usize);
        let mut frozen = ParamStore::new();
        let mut r = rng(10);
        let disc = Discriminator::new(&mut frozen, dk, 4, &mut r);
        let q = VariationalNet::new(&mut frozen, 2, 4, dk, &mut r);
        let head = ProjectionHead::new(&mut frozen, dk, 0.1, 0.5, &mut r);
        let mut leaves = ParamStore::new();
        let s_id = leaves.add("s", random(&[b, k, dk], &mut r));
        let c_id = leaves.add("c", random(&[b, dk], &mut r));
        let x = random(&[b, 2], &mut r);
        let labels = [0u8, 1, 0, 1];
        let weights = LossWeights::default();
        let f = |ls: &ParamStore, track: bool| {
            let g = Graph::new();
            let fx = Cx::new(&g, &frozen, false);
            let lx = Cx::new(&g, ls, track);
            let mut r = rng(11);
            let (s, c) = (lx.p(s_id), lx.p(c_id));
            let dim = dim_label_mi_loss(&fx, &disc, s, c, &labels, &mut r).unwrap();
            let v = vclub_bound(&fx, &q, g.constant(x.clone()), c, &mut r);
            let dis = disentangle_loss(&fx, &head, s, Mode::Train, &mut r).unwrap();
            let total = l_reg(&fx, &weights, Some(dim), Some(v), Some(dis));
            (total.item(), track.then(|| g.backward(total)))
        };
        let grads = f(&leaves, true).1.unwrap();
        let report = check::check_gradients(&mut leaves, &grads, 1e-6, |ls| f(ls, false).0);
        assert!(report.worst() < 1e-4, "{:?}", report.worst_param());
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let labels = [0u8, 1, 1, 0, 1];
        let a = sample_contrast_indices(&labels, 4, &mut rng(3)).unwrap();
        let b = sample_contrast_indices(&labels, 4, &mut rng(3)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn clipped_dim_loss_is_nonnegative(
            pos in proptest::collection::vec(-80.0f64..80.0, 1..20),
            neg in proptest::collection::vec(-80.0f64..80.0, 1..20),
        ) {
            let g = Graph::new();
            let p = |v: &Vec<f64>| g.constant(Tensor::new(vec![v.len()], v.clone())).sigmoid().clamp(PROB_EPS, 1.0 - PROB_EPS);
            prop_assert!(jsd_loss(p(&pos), p(&neg)).item() >= -1e-6);
        }

        #[test]
        fn disentangle_is_invariant_to_pattern_order(seed in 0u64..1000, k in 2usize..5) {
            let mut store = ParamStore::new();
            let head = ProjectionHead::new(&mut store, 3, 0.0, 0.5, &mut rng(seed));
            let mut r = rng(seed + 1);
            let s = random(&[2, k, 3], &mut r);
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut r);
            let mut permuted = Vec::new();
            for b in 0..2 {
                for &j in &perm {
                    permuted.extend_from_slice(s.row(b * k + j));
                }
            }
            let g = Graph::new();
            let cx = Cx::new(&g, &store, false);
            let a = disentangle_loss(&cx, &head, g.constant(s), Mode::Eval, &mut rng(0)).unwrap().item();
            let p = disentangle_loss(&cx, &head, g.constant(Tensor::new(vec![2, k, 3], permuted)), Mode::Eval, &mut rng(0)).unwrap().item();
            prop_assert!((a - p).abs() < 1e-6);
        }
    }
}
