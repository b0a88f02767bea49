//! Prototype classifier: class means of support embeddings, softmax over
//! negative squared Euclidean distances.

use metamod_autograd::{Graph, Scalar, Var};

use crate::error::{Error, Result};
use crate::nn::from_vec;

/// `[n_way, rows]` matrix whose row `k` averages the rows labelled `k`.
pub(crate) fn averaging_matrix<F: Scalar>(labels: &[usize], n_way: usize) -> Result<Vec<F>> {
    let mut counts = vec![0usize; n_way];
    for &l in labels {
        if l >= n_way {
            return Err(Error::InvalidArgument(format!("label {l} outside [0, {n_way})")));
        }
        counts[l] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::MissingClass(k));
    }
    let rows = labels.len();
    let mut a = vec![F::zero(); n_way * rows];
    for (r, &l) in labels.iter().enumerate() {
        a[l * rows + r] = F::one() / F::from_usize(counts[l]).expect("count fits");
    }
    Ok(a)
}

/// Class means of `embeddings` (`[rows, d]`), `[n_way, d]`.
pub fn class_means<F: Scalar>(g: &Graph<F>, embeddings: Var, labels: &[usize], n_way: usize) -> Result<Var> {
    let rows = g.shape(embeddings)[0];
    if rows != labels.len() {
        return Err(Error::shape("class mean labels", rows, labels.len()));
    }
    let a = g.constant(from_vec(&[n_way, rows], averaging_matrix(labels, n_way)?));
    Ok(g.matmul(a, embeddings))
}

/// `log p(y = k | x)` for every query row, `[queries, n_way]`.
pub fn log_probs<F: Scalar>(g: &Graph<F>, query: Var, prototypes: Var) -> Var {
    g.log_softmax(g.neg(g.sq_dist(query, prototypes)))
}

/// Mean negative log-likelihood of the true labels over query rows.
pub fn ce_loss<F: Scalar>(g: &Graph<F>, query: Var, labels: &[usize], prototypes: Var) -> Result<Var> {
    let (rows, n_way) = (g.shape(query)[0], g.shape(prototypes)[0]);
    if rows != labels.len() {
        return Err(Error::shape("query labels", rows, labels.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_way) {
        return Err(Error::InvalidArgument(format!("label {l} outside [0, {n_way})")));
    }
    let lp = g.pick_per_row(log_probs(g, query, prototypes), labels);
    Ok(g.neg(g.mean(lp)))
}

/// Episode loss from stacked support-then-query embeddings.
pub fn episode_loss<F: Scalar>(g: &Graph<F>, embeddings: Var, support_labels: &[usize], query_labels: &[usize], n_way: usize) -> Result<Var> {
    let ns = support_labels.len();
    let rows = g.shape(embeddings)[0];
    if rows != ns + query_labels.len() {
        return Err(Error::shape("episode rows", ns + query_labels.len(), rows));
    }
    let protos = class_means(g, g.slice_rows(embeddings, 0, ns), support_labels, n_way)?;
    ce_loss(g, g.slice_rows(embeddings, ns, rows), query_labels, protos)
}

/// Fraction of query rows whose nearest prototype is the true class.
pub fn episode_accuracy(embeddings: &ndarray::Array2<f32>, support_labels: &[usize], query_labels: &[usize], n_way: usize) -> Result<f64> {
    let ns = support_labels.len();
    let support: Vec<Vec<f64>> = (0..ns)
        .map(|r| embeddings.row(r).iter().map(|&v| v as f64).collect())
        .collect();
    let protos = compute_prototypes(&support, support_labels, n_way)?;
    let mut correct = 0;
    for (i, &label) in query_labels.iter().enumerate() {
        let q: Vec<f64> = embeddings.row(ns + i).iter().map(|&v| v as f64).collect();
        if protos.nearest(&q)? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / query_labels.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    /// `c[k]` is the prototype of episode-local class `k`.
    pub c: Vec<Vec<f64>>,
    pub n_way: usize,
}

pub fn compute_prototypes(support: &[Vec<f64>], labels: &[usize], n_way: usize) -> Result<PrototypeSet> {
    if support.len() != labels.len() {
        return Err(Error::shape("support labels", support.len(), labels.len()));
    }
    let d = support.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; d]; n_way];
    let mut counts = vec![0usize; n_way];
    for (e, &l) in support.iter().zip(labels) {
        if l >= n_way {
            return Err(Error::InvalidArgument(format!("label {l} outside [0, {n_way})")));
        }
        if e.len() != d {
            return Err(Error::shape("support embedding", d, e.len()));
        }
        counts[l] += 1;
        sums[l].iter_mut().zip(e).for_each(|(s, v)| *s += v);
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::MissingClass(k));
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(PrototypeSet { c: sums, n_way })
}

impl PrototypeSet {
    fn distances(&self, query: &[f64]) -> Result<Vec<f64>> {
        self.c
            .iter()
            .map(|c| {
                if c.len() != query.len() {
                    return Err(Error::shape("query embedding", c.len(), query.len()));
                }
                Ok(c.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum())
            })
            .collect()
    }

    pub fn nearest(&self, query: &[f64]) -> Result<usize> {
        let d = self.distances(query)?;
        Ok(d
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .expect("at least one prototype"))
    }
}

/// `p(y = k) ∝ exp(-||q - c_k||²)`.
pub fn classify_query(query: &[f64], prototypes: &PrototypeSet) -> Result<Vec<f64>> {
    let d = prototypes.distances(query)?;
    let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = d.iter().map(|&x| (min - x).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}
