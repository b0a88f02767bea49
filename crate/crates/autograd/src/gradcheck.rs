//! Central finite-difference oracle for gradient tests.
//!
//! The numeric side only evaluates forward values; it never touches
//! [`Graph::backward`], so it stays independent of the path it checks.

use crate::graph::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Checks at most this many evenly spaced coordinates per input.
    pub max_coords: Option<usize>,
    /// Norms below this are treated as zero when forming the ratio.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_coords: None,
            floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub coords: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `|a - n| / max(|a|, |n|, floor)` over the checked coordinates.
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.rel_err).fold(0.0, f64::max)
    }
}

fn coords(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            // evenly spaced, always including the first and last element
            (0..m).map(|i| i * (len - 1) / (m - 1).max(1)).collect()
        }
        _ => (0..len).collect(),
    }
}

fn evaluate<B>(inputs: &[Tensor<f64>], build: &B) -> f64
where
    B: Fn(&Graph<f64>, &[Var]) -> Var,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&g, &vars);
    g.scalar(out)
}

/// Compares `backward` against central differences of `build`'s scalar
/// output with respect to every tensor in `inputs`.
pub fn check_gradients<B>(inputs: &[Tensor<f64>], build: B, opts: &GradCheckOptions) -> GradCheckReport
where
    B: Fn(&Graph<f64>, &[Var]) -> Var,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&g, &vars);
    let grads = g.backward(out);

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].raw_dim()));
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        let picked = coords(inputs[i].len(), opts.max_coords);
        for &j in &picked {
            let orig = inputs[i].as_slice().expect("standard layout")[j];
            work[i].as_slice_mut().expect("standard layout")[j] = orig + opts.eps;
            let plus = evaluate(&work, &build);
            work[i].as_slice_mut().expect("standard layout")[j] = orig - opts.eps;
            let minus = evaluate(&work, &build);
            work[i].as_slice_mut().expect("standard layout")[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.as_slice().expect("standard layout")[j];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let (a, n) = (a2.sqrt(), n2.sqrt());
        reports.push(InputReport {
            coords: picked.len(),
            analytic_norm: a,
            numeric_norm: n,
            rel_err: diff2.sqrt() / a.max(n).max(opts.floor),
        });
    }
    GradCheckReport { inputs: reports }
}
