use ndarray::{Axis, IxDyn, Slice};

use crate::graph::{Graph, Op, Var};
use crate::scalar::Scalar;

impl<F: Scalar> Graph<F> {
    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        let value = ndarray::ArrayD::from_elem(IxDyn(&[]), s);
        self.unary(a, value, Op::SumAll(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, F::one() / F::from_usize(n).expect("len fits"))
    }

    /// Sums out `axis`, removing it.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Var {
        let value = self.value(a).sum_axis(Axis(axis));
        self.unary(a, value, Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Var {
        let n = self.value(a).shape()[axis];
        let s = self.sum_axis(a, axis);
        self.scale(s, F::one() / F::from_usize(n).expect("len fits"))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape to {shape:?}: {e}"));
        self.unary(a, value, Op::Reshape(a))
    }

    /// Flattens all axes after the first.
    pub fn flatten(&self, a: Var) -> Var {
        let shape = self.shape(a);
        let rest: usize = shape[1..].iter().product();
        self.reshape(a, &[shape[0], rest])
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views)
            .unwrap_or_else(|e| panic!("concat along {axis}: {e}"));
        let rg = self.any_grad(parts);
        self.push(value, Op::Concat(parts.to_vec(), axis), rg)
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        self.slice_axis(a, 0, start, end)
    }

    /// Indices `start..end` along `axis`.
    pub fn slice_axis(&self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let value = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        self.unary(a, value, Op::Slice(a, axis, start, end))
    }

    /// Selects rows along axis 0; indices may repeat.
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), indices);
        self.unary(a, value, Op::GatherRows(a, indices.to_vec()))
    }
}
