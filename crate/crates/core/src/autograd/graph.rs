use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::tensor::Tensor;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter tensors.
///
/// Values are shared with live graphs through `Arc`, so updating a parameter
/// after its graph has been dropped does not copy.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| Arc::new(Tensor::clone(v)))
                .collect(),
            index: self.index.clone(),
        }
    }
}

impl PartialEq for ParamStore {
    /// Bitwise equality of names, shapes and values.
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.shape() == b.shape()
                    && a
                        .data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    /// Registers a new parameter. Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.values[id.0].shape(), value.shape());
        self.values[id.0] = Arc::new(value);
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.as_str(), v.as_ref()))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Copies every parameter whose name starts with `prefix` into a new store.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, value) in self.iter() {
            if name.starts_with(prefix) {
                out.add(name, value.clone());
            }
        }
        out
    }
}

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &mut GradBuf<'_>)>;

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    param: Option<(u64, ParamId)>,
    backward: Option<BackwardFn>,
}

/// Accumulator handed to backward closures.
pub struct GradBuf<'a> {
    grads: &'a mut [Option<Tensor>],
    requires: &'a [bool],
}

impl GradBuf<'_> {
    pub fn wants(&self, id: usize) -> bool {
        self.requires[id]
    }

    /// Adds into the gradient slot of `id`, allocating zeros of `shape` on first use.
    pub fn add_with(&mut self, id: usize, shape: &[usize], f: impl FnOnce(&mut [f64])) {
        if !self.requires[id] {
            return;
        }
        let slot = &mut self.grads[id];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(shape.to_vec()));
        }
        f(slot.as_mut().expect("slot initialized").data_mut());
    }

    pub fn add(&mut self, id: usize, g: Tensor) {
        if !self.requires[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Reverse-mode tape. Every operation appends a node; [`Graph::backward`]
/// walks the tape once in reverse.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<HashMap<(u64, ParamId), usize>>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<(u64, ParamId), Tensor>,
}

impl Gradients {
    pub fn get(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.map.get(&(store.uid(), id))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            value: Arc::new(value),
            requires_grad: false,
            param: None,
            backward: None,
        })
    }

    /// A leaf that receives a gradient but is not tied to any store
    /// (used for gradient checks on intermediate inputs).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            value: Arc::new(value),
            requires_grad: true,
            param: None,
            backward: None,
        })
    }

    /// Leaf node for a stored parameter. Repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId, track: bool) -> Var<'_> {
        let key = (store.uid(), id);
        if let Some(&node) = self.param_nodes.borrow().get(&key) {
            return Var {
                graph: self,
                id: node,
            };
        }
        let var = self.push_node(Node {
            value: store.shared(id),
            requires_grad: track,
            param: Some(key),
            backward: None,
        });
        self.param_nodes.borrow_mut().insert(key, var.id);
        var
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Appends an op node. The closure is dropped when no parent needs a gradient.
    pub(crate) fn push_op(
        &self,
        value: Tensor,
        parents: &[usize],
        backward: impl Fn(&Tensor, &mut GradBuf<'_>) + 'static,
    ) -> Var<'_> {
        let requires_grad = parents.iter().any(|&p| self.requires_grad(p));
        self.push_node(Node {
            value: Arc::new(value),
            requires_grad,
            param: None,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        })
    }

    /// Gradient of a scalar `loss` w.r.t. every tracked parameter.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let (_, grads) = self.backward_full(loss);
        grads
    }

    /// Like [`Graph::backward`] but also returns gradients of plain leaves, indexed by node id.
    pub fn backward_full(&self, loss: Var<'_>) -> (Vec<Option<Tensor>>, Gradients) {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.len(),
            1,
            "backward() needs a scalar loss"
        );
        let requires: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let mut out = Gradients::default();
        if !requires[loss.id] {
            return (leaf_grads, out);
        }
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape().to_vec(), 1.0));
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(key) = node.param {
                out.map.insert(key, g);
            } else if let Some(bw) = &node.backward {
                let mut buf = GradBuf {
                    grads: &mut grads,
                    requires: &requires,
                };
                bw(&g, &mut buf);
            } else {
                leaf_grads[i] = Some(g);
            }
        }
        (leaf_grads, out)
    }
}

impl<'g> Var<'g> {
    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }
}
