//! Layers and optimizer built on the autograd tape.

mod adam;
pub mod init;

pub use adam::{Adam, AdamConfig};

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};

/// Binds a graph to a parameter store for one forward pass.
///
/// `track = false` turns every parameter read into a constant, which is how
/// frozen components (the knowledge base during backbone training, the
/// vCLUB network during the main step) are excluded from gradients.
#[derive(Clone, Copy)]
pub struct Cx<'g> {
    pub graph: &'g Graph,
    pub store: &'g ParamStore,
    pub track: bool,
}

impl<'g> Cx<'g> {
    pub fn new(graph: &'g Graph, store: &'g ParamStore, track: bool) -> Self {
        Cx {
            graph,
            store,
            track,
        }
    }

    pub fn p(&self, id: ParamId) -> Var<'g> {
        self.graph.param(self.store, id, self.track)
    }

    pub fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init::xavier_uniform(fan_in, fan_out, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out])));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'g>(&self, cx: &Cx<'g>, x: Var<'g>) -> Var<'g> {
        x.linear(cx.p(self.weight), self.bias.map(|b| cx.p(b)))
    }
}

/// Stack of [`Linear`] layers with ReLU between them and no activation after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [input, hidden..., output]`.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Mlp { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward<'g>(&self, cx: &Cx<'g>, mut x: Var<'g>) -> Var<'g> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(cx, x);
            if i < last {
                x = x.relu();
            }
        }
        x
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(vec![width], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![width])),
        }
    }

    pub fn forward<'g>(&self, cx: &Cx<'g>, x: Var<'g>) -> Var<'g> {
        x.layer_norm(cx.p(self.gain), cx.p(self.bias), Self::EPS)
    }
}

/// Inverted-dropout keep mask: entries are `0` or `1 / (1 - rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    if rate <= 0.0 {
        return Tensor::full(shape.to_vec(), 1.0);
    }
    let keep = 1.0 / (1.0 - rate);
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data)
}
