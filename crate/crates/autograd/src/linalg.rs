use ndarray::{Array2, ArrayView2, Axis, Ix2};

use crate::graph::{Graph, Op, Tensor, Var};
use crate::scalar::Scalar;

fn as2<F: Scalar>(t: &Tensor<F>) -> ArrayView2<'_, F> {
    t.view()
        .into_dimensionality::<Ix2>()
        .unwrap_or_else(|_| panic!("expected a matrix, got shape {:?}", t.shape()))
}

impl<F: Scalar> Graph<F> {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (am, bm) = (as2(&av), as2(&bv));
        assert_eq!(
            am.ncols(),
            bm.nrows(),
            "matmul {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let value = am.dot(&bm).into_dyn();
        self.binary(a, b, value, Op::MatMul(a, b))
    }

    /// Pairwise squared Euclidean distances, `[m, d] x [k, d] -> [m, k]`.
    pub fn sq_dist(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (am, bm) = (as2(&av), as2(&bv));
        assert_eq!(am.ncols(), bm.ncols(), "sq_dist feature dims");
        let mut out = Array2::<F>::zeros((am.nrows(), bm.nrows()));
        for (i, ra) in am.outer_iter().enumerate() {
            for (j, rb) in bm.outer_iter().enumerate() {
                let mut acc = F::zero();
                for (&x, &y) in ra.iter().zip(rb.iter()) {
                    let d = x - y;
                    acc += d * d;
                }
                out[[i, j]] = acc;
            }
        }
        self.binary(a, b, out.into_dyn(), Op::SqDist(a, b))
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax(&self, a: Var) -> Var {
        let av = self.value(a);
        let m = as2(&av);
        let mut out = m.to_owned();
        for mut row in out.outer_iter_mut() {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.unary(a, out.into_dyn(), Op::LogSoftmax(a))
    }

    /// `out[i] = a[i, idx[i]]`.
    pub fn pick_per_row(&self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let m = as2(&av);
        assert_eq!(m.nrows(), idx.len(), "pick_per_row index count");
        let value: ndarray::Array1<F> = idx.iter().enumerate().map(|(i, &j)| m[[i, j]]).collect();
        self.unary(a, value.into_dyn(), Op::PickPerRow(a, idx.to_vec()))
    }
}

pub(crate) fn matmul_backward<F: Scalar>(
    g: &Tensor<F>,
    a: Var,
    b: Var,
    av: &Tensor<F>,
    bv: &Tensor<F>,
    want_a: bool,
    want_b: bool,
) -> Vec<(Var, Tensor<F>)> {
    let g2 = as2(g);
    let mut out = Vec::with_capacity(2);
    if want_a {
        out.push((a, g2.dot(&as2(bv).t()).into_dyn()));
    }
    if want_b {
        out.push((b, as2(av).t().dot(&g2).into_dyn()));
    }
    out
}

pub(crate) fn sq_dist_backward<F: Scalar>(
    g: &Tensor<F>,
    av: &Tensor<F>,
    bv: &Tensor<F>,
    want_a: bool,
    want_b: bool,
) -> (Option<Tensor<F>>, Option<Tensor<F>>) {
    let g2 = as2(g);
    let (am, bm) = (as2(av), as2(bv));
    let two = F::one() + F::one();
    // d/da_i = 2 (rowsum(g)_i a_i - (g b)_i); d/db_j = 2 (colsum(g)_j b_j - (g^T a)_j)
    let ga = want_a.then(|| {
        let rows = g2.sum_axis(Axis(1));
        let mut ga = &am * &rows.insert_axis(Axis(1)) - g2.dot(&bm);
        ga.mapv_inplace(|x| x * two);
        ga.into_dyn()
    });
    let gb = want_b.then(|| {
        let cols = g2.sum_axis(Axis(0));
        let mut gb = &bm * &cols.insert_axis(Axis(1)) - g2.t().dot(&am);
        gb.mapv_inplace(|x| x * two);
        gb.into_dyn()
    });
    (ga, gb)
}

pub(crate) fn log_softmax_backward<F: Scalar>(g: &Tensor<F>, out: &Tensor<F>) -> Tensor<F> {
    let g2 = as2(g);
    let o2 = as2(out);
    let rows = g2.sum_axis(Axis(1)).insert_axis(Axis(1));
    let soft = o2.mapv(F::exp);
    (&g2 - &(&soft * &rows)).into_dyn()
}
