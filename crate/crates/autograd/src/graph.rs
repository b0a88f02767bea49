use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn};

use crate::conv::{self, ConvGeom, PoolGeom};
use crate::scalar::Scalar;
use crate::{linalg, norm};

/// Dense n-dimensional array stored on the tape.
pub type Tensor<F> = ArrayD<F>;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, F),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Relu(Var),
    Clamp(Var, F, F),
    MatMul(Var, Var),
    SumAll(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize, usize),
    GatherRows(Var, Vec<usize>),
    Conv2d {
        input: Var,
        weight: Var,
        cols: Vec<F>,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        inv_std: Vec<F>,
    },
    FixedNorm {
        input: Var,
        inv_std: Vec<F>,
    },
    ChannelAffine {
        input: Var,
        gamma: Var,
        beta: Var,
    },
    SqDist(Var, Var),
    LogSoftmax(Var),
    PickPerRow(Var, Vec<usize>),
}

pub(crate) struct Node<F> {
    pub(crate) value: Rc<Tensor<F>>,
    pub(crate) op: Op<F>,
    pub(crate) requires_grad: bool,
}

/// Reverse-mode tape. Every operation appends a node; [`Graph::backward`]
/// walks the tape once in reverse.
///
/// Operations panic on shape mismatches, like `ndarray` arithmetic does.
/// Callers validate user-facing shapes before building a graph.
pub struct Graph<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&self, value: F) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&self, v: Var) -> Var {
        let value = (*self.value(v)).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> F {
        let nodes = self.nodes.borrow();
        let value = &nodes[v.0].value;
        assert_eq!(value.len(), 1, "scalar() on shape {:?}", value.shape());
        *value.iter().next().expect("one element")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub(crate) fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Gradients of the single-element `output` with respect to every node
    /// that requires a gradient.
    pub fn backward(&self, output: Var) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        let out_value = &nodes[output.0].value;
        assert_eq!(
            out_value.len(),
            1,
            "backward needs a scalar output, got shape {:?}",
            out_value.shape()
        );
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(ArrayD::from_elem(out_value.raw_dim(), F::one()));

        for idx in (0..=output.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let mut acc = Accumulator {
                nodes: &nodes,
                grads: &mut grads,
            };
            backprop(node, &g, &nodes, &mut acc);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

struct Accumulator<'a, F: Scalar> {
    nodes: &'a [Node<F>],
    grads: &'a mut Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Accumulator<'_, F> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, g: Tensor<F>) {
        if !self.wants(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape());
        match &mut self.grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Sums `g` down to `shape`, undoing numpy-style broadcasting.
pub(crate) fn reduce_to<F: Scalar>(mut g: Tensor<F>, shape: &[usize]) -> Tensor<F> {
    if g.shape() == shape {
        return g;
    }
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &s) in shape.iter().enumerate() {
        if s == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn backprop<F: Scalar>(node: &Node<F>, g: &Tensor<F>, nodes: &[Node<F>], acc: &mut Accumulator<F>) {
    let val = |v: Var| -> &Tensor<F> { &nodes[v.0].value };
    let shape = |v: Var| -> Vec<usize> { nodes[v.0].value.shape().to_vec() };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if acc.wants(*a) {
                acc.add(*a, reduce_to(g.clone(), &shape(*a)));
            }
            if acc.wants(*b) {
                acc.add(*b, reduce_to(g.clone(), &shape(*b)));
            }
        }
        Op::Sub(a, b) => {
            if acc.wants(*a) {
                acc.add(*a, reduce_to(g.clone(), &shape(*a)));
            }
            if acc.wants(*b) {
                acc.add(*b, reduce_to(g.mapv(|x| -x), &shape(*b)));
            }
        }
        Op::Mul(a, b) => {
            if acc.wants(*a) {
                acc.add(*a, reduce_to(g * val(*b), &shape(*a)));
            }
            if acc.wants(*b) {
                acc.add(*b, reduce_to(g * val(*a), &shape(*b)));
            }
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            if acc.wants(*a) {
                acc.add(*a, reduce_to(g / bv, &shape(*a)));
            }
            if acc.wants(*b) {
                // d(a/b)/db = -(a/b)/b = -out/b
                let gb = -(g * &*node.value) / bv;
                acc.add(*b, reduce_to(gb, &shape(*b)));
            }
        }
        Op::Neg(a) => acc.add(*a, g.mapv(|x| -x)),
        Op::Scale(a, c) => {
            let c = *c;
            acc.add(*a, g.mapv(|x| x * c));
        }
        Op::Offset(a) => acc.add(*a, g.clone()),
        Op::Exp(a) => acc.add(*a, g * &*node.value),
        Op::Log(a) => acc.add(*a, g / val(*a)),
        Op::Square(a) => {
            let two = F::one() + F::one();
            let mut ga = val(*a).mapv(|x| x * two);
            ga *= g;
            acc.add(*a, ga);
        }
        Op::Relu(a) => {
            let mut ga = g.clone();
            ndarray::Zip::from(&mut ga).and(val(*a)).for_each(|d, &x| {
                if x <= F::zero() {
                    *d = F::zero();
                }
            });
            acc.add(*a, ga);
        }
        Op::Clamp(a, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            let mut ga = g.clone();
            ndarray::Zip::from(&mut ga).and(val(*a)).for_each(|d, &x| {
                if x < lo || x > hi {
                    *d = F::zero();
                }
            });
            acc.add(*a, ga);
        }
        Op::MatMul(a, b) => linalg::matmul_backward(g, *a, *b, val(*a), val(*b), acc.wants(*a), acc.wants(*b))
            .into_iter()
            .for_each(|(v, gv)| acc.add(v, gv)),
        Op::SumAll(a) => {
            let s = *g.iter().next().expect("scalar grad");
            acc.add(*a, ArrayD::from_elem(val(*a).raw_dim(), s));
        }
        Op::SumAxis(a, axis) => {
            // Repeat each contiguous block of g `len` times along `axis`.
            let full = shape(*a);
            let len = full[*axis];
            let inner: usize = full[*axis + 1..].iter().product();
            let g = g.as_standard_layout();
            let gs = g.as_slice().expect("standard layout");
            let mut out = Vec::with_capacity(gs.len() * len);
            for block in gs.chunks_exact(inner.max(1)) {
                for _ in 0..len {
                    out.extend_from_slice(block);
                }
            }
            acc.add(*a, ArrayD::from_shape_vec(IxDyn(&full), out).expect("sum_axis backward shape"));
        }
        Op::Reshape(a) => {
            let ga = g
                .to_owned()
                .into_shape_with_order(IxDyn(&shape(*a)))
                .expect("reshape backward");
            acc.add(*a, ga);
        }
        Op::Concat(parts, axis) => {
            let mut start = 0;
            for p in parts {
                let len = nodes[p.0].value.shape()[*axis];
                if acc.wants(*p) {
                    let piece = g
                        .slice_axis(Axis(*axis), ndarray::Slice::from(start..start + len))
                        .to_owned();
                    acc.add(*p, piece);
                }
                start += len;
            }
        }
        Op::Slice(a, axis, start, end) => {
            let mut ga = ArrayD::zeros(val(*a).raw_dim());
            ga.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*end))
                .assign(g);
            acc.add(*a, ga);
        }
        Op::GatherRows(a, idx) => {
            let mut ga: Tensor<F> = ArrayD::zeros(val(*a).raw_dim());
            for (row, &src) in idx.iter().enumerate() {
                let mut dst = ga.index_axis_mut(Axis(0), src);
                dst += &g.index_axis(Axis(0), row);
            }
            acc.add(*a, ga);
        }
        Op::Conv2d {
            input,
            weight,
            cols,
            geom,
        } => {
            let (gx, gw) = conv::conv2d_backward(
                g,
                cols,
                val(*weight),
                geom,
                acc.wants(*input),
                acc.wants(*weight),
            );
            if let Some(gx) = gx {
                acc.add(*input, gx);
            }
            if let Some(gw) = gw {
                acc.add(*weight, gw);
            }
        }
        Op::MaxPool { input, argmax } => {
            acc.add(*input, conv::max_pool_backward(g, argmax, val(*input).raw_dim()));
        }
        Op::BatchNorm { input, inv_std } => {
            acc.add(*input, norm::batch_norm_backward(g, &node.value, inv_std));
        }
        Op::FixedNorm { input, inv_std } => {
            acc.add(*input, norm::fixed_norm_backward(g, inv_std));
        }
        Op::ChannelAffine { input, gamma, beta } => {
            let want = [acc.wants(*input), acc.wants(*gamma), acc.wants(*beta)];
            let [dx, dg, db] = norm::channel_affine_backward(g, val(*input), val(*gamma), &shape(*beta), want);
            for (v, d) in [(*input, dx), (*gamma, dg), (*beta, db)] {
                if let Some(d) = d {
                    acc.add(v, d);
                }
            }
        }
        Op::SqDist(a, b) => {
            let (ga, gb) = linalg::sq_dist_backward(g, val(*a), val(*b), acc.wants(*a), acc.wants(*b));
            if let Some(ga) = ga {
                acc.add(*a, ga);
            }
            if let Some(gb) = gb {
                acc.add(*b, gb);
            }
        }
        Op::LogSoftmax(a) => acc.add(*a, linalg::log_softmax_backward(g, &node.value)),
        Op::PickPerRow(a, idx) => {
            let mut ga: Tensor<F> = ArrayD::zeros(val(*a).raw_dim());
            for (row, &col) in idx.iter().enumerate() {
                ga[[row, col]] += g[[row]];
            }
            acc.add(*a, ga);
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

// Shorthand used by op modules.
impl<F: Scalar> Graph<F> {
    pub(crate) fn unary(&self, a: Var, value: Tensor<F>, op: Op<F>) -> Var {
        let rg = self.any_grad(&[a]);
        self.push(value, op, rg)
    }

    pub(crate) fn binary(&self, a: Var, b: Var, value: Tensor<F>, op: Op<F>) -> Var {
        let rg = self.any_grad(&[a, b]);
        self.push(value, op, rg)
    }

    pub(crate) fn conv_node(&self, input: Var, weight: Var, value: Tensor<F>, cols: Vec<F>, geom: ConvGeom) -> Var {
        self.binary(
            input,
            weight,
            value,
            Op::Conv2d {
                input,
                weight,
                cols,
                geom,
            },
        )
    }

    pub(crate) fn pool_node(&self, input: Var, value: Tensor<F>, argmax: Vec<usize>, _geom: PoolGeom) -> Var {
        self.unary(input, value, Op::MaxPool { input, argmax })
    }
}
