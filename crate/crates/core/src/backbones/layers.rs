//! Interaction layers shared by the backbones.

use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Tensor, Var};
use crate::nn::{init, Cx, Linear, Mlp};

/// FM second-order term over `x [b, n, d]`: `sum_{i<j} <x_i, x_j>`, shape `[b]`.
pub fn fm_second_order(x: Var<'_>) -> Var<'_> {
    let sum_sq = x.sum_axis1().square().sum_last();
    let sq_sum = x.square().sum_axis1().sum_last();
    sum_sq.sub(sq_sum).scale(0.5)
}

/// Cross network: `x_{l+1} = x_0 * (x_l . w_l) + b_l + x_l`.
#[derive(Clone, Debug)]
pub struct CrossNet {
    pub weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
}

impl CrossNet {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, depth: usize, rng: &mut impl Rng) -> Self {
        let mut weights = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        for l in 0..depth {
            weights.push(store.add(format!("{name}.{l}.weight"), init::xavier_uniform(width, 1, rng)));
            biases.push(store.add(format!("{name}.{l}.bias"), Tensor::zeros(vec![width])));
        }
        CrossNet { weights, biases }
    }

    /// `x0 [b, width]` -> `[b, width]`.
    pub fn forward<'g>(&self, cx: &Cx<'g>, x0: Var<'g>) -> Var<'g> {
        let b = x0.shape()[0];
        let mut x = x0;
        for (&w, &bias) in self.weights.iter().zip(&self.biases) {
            let s = x.matmul(cx.p(w)).reshape(vec![b]);
            x = x0.mul_rows(s).add_bias(cx.p(bias)).add(x);
        }
        x
    }
}

/// Compressed interaction network; returns the sum-pooled feature maps of every layer.
#[derive(Clone, Debug)]
pub struct Cin {
    pub layers: Vec<Linear>,
}

impl Cin {
    pub fn new(store: &mut ParamStore, name: &str, fields: usize, sizes: &[usize], rng: &mut impl Rng) -> Self {
        let mut prev = fields;
        let layers = sizes
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let l = Linear::new(store, &format!("{name}.{i}"), prev * fields, h, false, rng);
                prev = h;
                l
            })
            .collect();
        Cin { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.iter().map(|l| l.fan_out).sum()
    }

    /// `x0 [b, n, d]` -> `[b, sum(sizes)]`.
    pub fn forward<'g>(&self, cx: &Cx<'g>, x0: Var<'g>) -> Var<'g> {
        let mut xk = x0;
        let mut pooled = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            // [b, h*n, d] -> [b, d, h*n] -> [b, d, h'] -> [b, h', d]
            let z = xk.outer_fields(x0).transpose12();
            xk = layer.forward(cx, z).transpose12();
            pooled.push(xk.sum_last());
        }
        Var::concat_last(&pooled)
    }
}

/// One AutoInt interacting layer: multi-head self-attention with a projected residual and ReLU.
#[derive(Clone, Debug)]
pub struct InteractingLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    residual: Linear,
    heads: usize,
}

impl InteractingLayer {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Self {
        InteractingLayer {
            q: Linear::new(store, &format!("{name}.q"), width, width, false, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, false, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, false, rng),
            residual: Linear::new(store, &format!("{name}.res"), width, width, false, rng),
            heads,
        }
    }

    pub fn forward<'g>(&self, cx: &Cx<'g>, x: Var<'g>) -> Var<'g> {
        let width = x.shape()[2];
        let head_dim = width / self.heads;
        let att = self.q.forward(cx, x).attention(
            self.k.forward(cx, x),
            self.v.forward(cx, x),
            self.heads,
            1.0 / (head_dim as f64).sqrt(),
        );
        att.add(self.residual.forward(cx, x)).relu()
    }
}

/// Target attention over a behavior sequence with the activation-unit MLP.
#[derive(Clone, Debug)]
pub struct TargetAttention {
    pub mlp: Mlp,
}

impl TargetAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut widths = vec![4 * width];
        widths.extend_from_slice(hidden);
        widths.push(1);
        TargetAttention {
            mlp: Mlp::new(store, name, &widths, rng),
        }
    }

    /// `history [b, l, d]`, `target [b, d]`, `mask [b, l]` (1 = valid) -> pooled `[b, d]`.
    pub fn forward<'g>(&self, cx: &Cx<'g>, history: Var<'g>, target: Var<'g>, mask: Var<'g>) -> Var<'g> {
        let s = history.shape();
        let (b, l) = (s[0], s[1]);
        let t = target.repeat_axis1(l);
        let unit = Var::concat_last(&[history, t, history.sub(t), history.mul(t)]);
        let w = self.mlp.forward(cx, unit).reshape(vec![b, l]).mul(mask);
        history.weighted_sum_axis1(w)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn fm_matches_pairwise_brute_force() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let (b, n, d) = (3, 5, 4);
        let data: Vec<f64> = (0..b * n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let g = Graph::new();
        let out = fm_second_order(g.constant(Tensor::new(vec![b, n, d], data.clone()))).value();
        for bi in 0..b {
            let row = |i: usize| &data[(bi * n + i) * d..(bi * n + i + 1) * d];
            let mut expect = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    expect += row(i).iter().zip(row(j)).map(|(a, c)| a * c).sum::<f64>();
                }
            }
            assert!((out.data()[bi] - expect).abs() < 1e-12);
        }
        let two = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, -1.0]));
        assert!((fm_second_order(two).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_cross_weights_are_identity() {
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let net = CrossNet::new(&mut store, "cross", 3, 2, &mut r);
        for &w in &net.weights {
            store.set(w, Tensor::zeros(vec![3, 1]));
        }
        let g = Graph::new();
        let cx = Cx::new(&g, &store, false);
        let x0 = Tensor::new(vec![2, 3], vec![1., 2., 3., -1., 0.5, 0.]);
        assert_eq!(*net.forward(&cx, g.constant(x0.clone())).value(), x0);
    }

    #[test]
    fn cross_layer_matches_formula() {
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let net = CrossNet::new(&mut store, "cross", 2, 1, &mut r);
        store.set(net.weights[0], Tensor::new(vec![2, 1], vec![0.5, -1.0]));
        store.set(net.biases[0], Tensor::new(vec![2], vec![0.1, 0.2]));
        let g = Graph::new();
        let cx = Cx::new(&g, &store, false);
        let out = net.forward(&cx, g.constant(Tensor::new(vec![1, 2], vec![2.0, 3.0]))).value();
        // s = 2*0.5 - 3 = -2 ; x0 * s + b + x0
        assert_eq!(out.data(), &[2.0 * -2.0 + 0.1 + 2.0, 3.0 * -2.0 + 0.2 + 3.0]);
    }

    #[test]
    fn cin_first_layer_matches_direct_sum() {
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let (n, d, h) = (3, 2, 2);
        let cin = Cin::new(&mut store, "cin", n, &[h], &mut r);
        let x: Vec<f64> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let g = Graph::new();
        let cx = Cx::new(&g, &store, false);
        let out = cin.forward(&cx, g.constant(Tensor::new(vec![1, n, d], x.clone()))).value();
        let w = store.get(cin.layers[0].weight);
        for o in 0..h {
            let mut expect = 0.0;
            for i in 0..n {
                for j in 0..n {
                    for e in 0..d {
                        expect += w.data()[(i * n + j) * h + o] * x[i * d + e] * x[j * d + e];
                    }
                }
            }
            assert!((out.data()[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn single_field_interacting_layer_is_value_path() {
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let layer = InteractingLayer::new(&mut store, "int", 4, 2, &mut r);
        let x = Tensor::new(vec![1, 1, 4], vec![0.2, -0.4, 1.0, 0.3]);
        let g = Graph::new();
        let cx = Cx::new(&g, &store, false);
        let out = layer.forward(&cx, g.constant(x.clone())).value();
        let xv = g.constant(x);
        let expect = layer
            .v
            .forward(&cx, xv)
            .add(layer.residual.forward(&cx, xv))
            .relu()
            .value();
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn masked_history_pools_to_zero() {
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let att = TargetAttention::new(&mut store, "din", 2, &[3], &mut r);
        let g = Graph::new();
        let cx = Cx::new(&g, &store, false);
        let h = g.constant(Tensor::full(vec![1, 3, 2], 0.7));
        let t = g.constant(Tensor::full(vec![1, 2], 0.1));
        let m = g.constant(Tensor::zeros(vec![1, 3]));
        assert!(att.forward(&cx, h, t, m).value().data().iter().all(|&v| v == 0.0));
    }
}
