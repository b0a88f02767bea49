//! Parameter storage and the small layers shared by every model.

use std::cell::RefCell;
use std::ops::Deref;

use metamod_autograd::{Gradients, Graph, Scalar, Tensor, Var};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<F> {
    pub name: String,
    pub value: Tensor<F>,
    /// Buffers (running statistics) are stored alongside parameters but
    /// are never bound as trainable leaves.
    pub trainable: bool,
}

/// Named tensors owned by a model. Models hold [`ParamId`]s into a store.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<F> {
    entries: Vec<Entry<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor<F>, trainable: bool) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entries(&self) -> &[Entry<F>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Same entries in another precision.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.mapv(|v| G::from_f64_lossy(v.to_f64_lossy())),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    pub(crate) fn from_entries(entries: Vec<Entry<F>>) -> Self {
        Self { entries }
    }
}

/// A graph plus lazily bound parameters. The first use of a parameter in a
/// session records it as a leaf; later uses share that leaf.
pub struct Session<'a, F: Scalar> {
    graph: &'a Graph<F>,
    store: &'a ParamStore<F>,
    bound: RefCell<Vec<Option<Var>>>,
    frozen: bool,
}

impl<F: Scalar> Deref for Session<'_, F> {
    type Target = Graph<F>;

    fn deref(&self) -> &Graph<F> {
        self.graph
    }
}

impl<'a, F: Scalar> Session<'a, F> {
    pub fn new(graph: &'a Graph<F>, store: &'a ParamStore<F>) -> Self {
        Self {
            graph,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            frozen: false,
        }
    }

    /// Binds every parameter as a constant; for inference.
    pub fn frozen(graph: &'a Graph<F>, store: &'a ParamStore<F>) -> Self {
        Self {
            frozen: true,
            ..Self::new(graph, store)
        }
    }

    pub fn graph(&self) -> &'a Graph<F> {
        self.graph
    }

    pub fn store(&self) -> &'a ParamStore<F> {
        self.store
    }

    /// Leaf for parameter `id`.
    pub fn p(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let entry = &self.store.entries[id.0];
        let v = if entry.trainable && !self.frozen {
            self.graph.param(entry.value.clone())
        } else {
            self.graph.constant(entry.value.clone())
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Uses an existing node in place of parameter `id` (gradient checks
    /// feed perturbed values this way).
    pub fn bind(&self, id: ParamId, v: Var) {
        self.bound.borrow_mut()[id.0] = Some(v);
    }

    /// Gradients of `loss` for every bound trainable parameter that lies on
    /// a gradient path.
    pub fn param_grads(&self, loss: Var) -> ParamGrads<F> {
        let mut grads: Gradients<F> = self.graph.backward(loss);
        let bound = self.bound.borrow();
        let mut out = vec![None; self.store.len()];
        for (i, slot) in bound.iter().enumerate() {
            if let Some(v) = slot {
                if self.store.entries[i].trainable {
                    out[i] = grads.take(*v);
                }
            }
        }
        ParamGrads { grads: out }
    }
}

pub struct ParamGrads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> ParamGrads<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

pub(crate) fn from_vec<F: Scalar>(shape: &[usize], data: Vec<F>) -> Tensor<F> {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data")
}

/// He-normal initialization for a layer with `fan_in` inputs.
pub(crate) fn he_normal<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    from_vec(shape, (0..n).map(|_| F::from_f64_lossy(dist.sample(rng))).collect())
}

#[cfg(test)]
pub(crate) fn uniform<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    use rand::Rng;
    let n = shape.iter().product();
    from_vec(shape, (0..n).map(|_| F::from_f64_lossy(rng.random_range(-bound..bound))).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), he_normal(rng, &[in_dim, out_dim], in_dim));
        let bias = store.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// All-zero weights with a constant bias.
    pub fn constant<F: Scalar>(store: &mut ParamStore<F>, name: &str, in_dim: usize, out_dim: usize, bias: f64) -> Self {
        let weight = store.add(format!("{name}.weight"), ArrayD::zeros(IxDyn(&[in_dim, out_dim])));
        let bias = store.add(
            format!("{name}.bias"),
            ArrayD::from_elem(IxDyn(&[out_dim]), F::from_f64_lossy(bias)),
        );
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: Scalar>(&self, s: &Session<F>, x: Var) -> Var {
        let y = s.matmul(x, s.p(self.weight));
        s.add(y, s.p(self.bias))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// `Linear -> ReLU -> Linear`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    /// The output layer starts at zero so the network initially maps every
    /// input to zero.
    pub fn zero_output<F: Scalar>(store: &mut ParamStore<F>, name: &str, in_dim: usize, hidden: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), in_dim, hidden, rng),
            out: Linear::constant(store, &format!("{name}.1"), hidden, out_dim, 0.0),
        }
    }

    pub fn forward<F: Scalar>(&self, s: &Session<F>, x: Var) -> Var {
        let h = s.relu(self.hidden.forward(s, x));
        self.out.forward(s, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.hidden.params().into_iter().chain(self.out.params()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn session_binds_each_parameter_once() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "l", 3, 2, &mut rng);
        let g = Graph::new();
        let s = Session::new(&g, &store);
        assert_eq!(s.p(lin.weight), s.p(lin.weight));
        let x = s.constant(from_vec(&[1, 3], vec![1.0, 2.0, 3.0]));
        let y = lin.forward(&s, x);
        let loss = s.sum(s.add(y, lin.forward(&s, x)));
        let grads = s.param_grads(loss);
        assert_eq!(grads.get(lin.bias).unwrap().as_slice().unwrap(), &[2.0, 2.0]);
        assert_eq!(s.shape(y), vec![1, 2]);
    }

    #[test]
    fn buffers_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let buf = store.add_buffer("running", from_vec(&[2], vec![1.0, 2.0]));
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let loss = s.sum(s.p(buf));
        assert!(s.param_grads(loss).get(buf).is_none());
    }

    #[test]
    fn zero_output_mlp_maps_to_zero() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::zero_output(&mut store, "m", 4, 4, 4, &mut rng);
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let x = s.constant(uniform(&mut rng, &[3, 4], 2.0));
        assert!(s.value(mlp.forward(&s, x)).iter().all(|&v| v == 0.0));
    }
}
