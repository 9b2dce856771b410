//! Linear-chain conditional random field over `L` labels.
//!
//! A label sequence `y` over emissions `e` (T × L) scores
//! `start[y0] + Σ e[t, yt] + Σ trans[yt, yt+1] + end[yT-1]`. All recursions run
//! in log space.

use ndarray::{Array1, Array2, ArrayView2};
use crate::error::{Error, Result};

/// Transition, start and end scores.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    /// `transitions[[i, j]]` scores label `j` following label `i`.
    pub transitions: Array2<f64>,
    pub start: Array1<f64>,
    pub end: Array1<f64>,
}

impl CrfParams {
    pub fn zeros(labels: usize) -> Self {
        Self {
            transitions: Array2::zeros((labels, labels)),
            start: Array1::zeros(labels),
            end: Array1::zeros(labels),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.start.len()
    }

    fn check(&self, e: ArrayView2<f64>) -> Result<(usize, usize)> {
        let (t, l) = e.dim();
        if t == 0 {
            return Err(Error::Shape("emissions need at least one position".into()));
        }
        if self.transitions.dim() != (l, l) || self.start.len() != l || self.end.len() != l {
            return Err(Error::Shape(format!(
                "emissions have {l} labels but params are {:?}/{}/{}",
                self.transitions.dim(),
                self.start.len(),
                self.end.len()
            )));
        }
        Ok((t, l))
    }
}

/// Gradients of the negative log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfGrads {
    pub emissions: Array2<f64>,
    pub transitions: Array2<f64>,
    pub start: Array1<f64>,
    pub end: Array1<f64>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_labels(y: &[usize], t: usize, l: usize) -> Result<()> {
    if y.len() != t {
        return Err(Error::Shape(format!("{} labels for {t} positions", y.len())));
    }
    if let Some(bad) = y.iter().find(|&&v| v >= l) {
        return Err(Error::Shape(format!("label {bad} outside [0, {l})")));
    }
    Ok(())
}

pub fn sequence_score(e: ArrayView2<f64>, p: &CrfParams, y: &[usize]) -> Result<f64> {
    let (t, l) = p.check(e)?;
    check_labels(y, t, l)?;
    let mut score = p.start[y[0]] + p.end[y[t - 1]];
    for (i, &label) in y.iter().enumerate() {
        score += e[[i, label]];
    }
    for w in y.windows(2) {
        score += p.transitions[[w[0], w[1]]];
    }
    Ok(score)
}

/// Forward log-potentials: `alpha[[t, j]]` is the log-sum over prefixes ending
/// in label `j` at position `t`.
fn forward(e: ArrayView2<f64>, p: &CrfParams) -> Array2<f64> {
    let (t, l) = e.dim();
    let mut alpha = Array2::zeros((t, l));
    for j in 0..l {
        alpha[[0, j]] = p.start[j] + e[[0, j]];
    }
    for s in 1..t {
        for j in 0..l {
            let prev = (0..l).map(|i| alpha[[s - 1, i]] + p.transitions[[i, j]]);
            alpha[[s, j]] = e[[s, j]] + log_sum_exp(prev);
        }
    }
    alpha
}

/// Backward log-potentials, including the end scores.
fn backward(e: ArrayView2<f64>, p: &CrfParams) -> Array2<f64> {
    let (t, l) = e.dim();
    let mut beta = Array2::zeros((t, l));
    for i in 0..l {
        beta[[t - 1, i]] = p.end[i];
    }
    for s in (0..t - 1).rev() {
        for i in 0..l {
            let next = (0..l).map(|j| p.transitions[[i, j]] + e[[s + 1, j]] + beta[[s + 1, j]]);
            beta[[s, i]] = log_sum_exp(next);
        }
    }
    beta
}

fn log_z(alpha: &Array2<f64>, p: &CrfParams) -> f64 {
    let last = alpha.nrows() - 1;
    log_sum_exp((0..alpha.ncols()).map(|j| alpha[[last, j]] + p.end[j]))
}

/// Log of the partition function over all `L^T` label sequences.
pub fn log_partition(e: ArrayView2<f64>, p: &CrfParams) -> Result<f64> {
    p.check(e)?;
    Ok(log_z(&forward(e, p), p))
}

/// Per-position label marginals `P(y_t = l)`.
pub fn marginals(e: ArrayView2<f64>, p: &CrfParams) -> Result<Array2<f64>> {
    p.check(e)?;
    let alpha = forward(e, p);
    let beta = backward(e, p);
    let z = log_z(&alpha, p);
    Ok((&alpha + &beta).mapv(|v| (v - z).exp()))
}

/// `-log p(y | e)` and its gradients (model expectations minus empirical
/// counts), by forward-backward.
pub fn nll_and_grad(e: ArrayView2<f64>, p: &CrfParams, y: &[usize]) -> Result<(f64, CrfGrads)> {
    let (t, l) = p.check(e)?;
    check_labels(y, t, l)?;
    let alpha = forward(e, p);
    let beta = backward(e, p);
    let z = log_z(&alpha, p);
    let nll = z - sequence_score(e, p, y)?;

    let mut g_emit = (&alpha + &beta).mapv(|v| (v - z).exp());
    let mut g_start = g_emit.row(0).to_owned();
    let mut g_end = g_emit.row(t - 1).to_owned();
    let mut g_trans = Array2::zeros((l, l));
    for s in 0..t - 1 {
        for i in 0..l {
            for j in 0..l {
                let log_edge =
                    alpha[[s, i]] + p.transitions[[i, j]] + e[[s + 1, j]] + beta[[s + 1, j]] - z;
                g_trans[[i, j]] += log_edge.exp();
            }
        }
    }
    for (s, &label) in y.iter().enumerate() {
        g_emit[[s, label]] -= 1.0;
    }
    for w in y.windows(2) {
        g_trans[[w[0], w[1]]] -= 1.0;
    }
    g_start[y[0]] -= 1.0;
    g_end[y[t - 1]] -= 1.0;
    Ok((
        nll,
        CrfGrads {
            emissions: g_emit,
            transitions: g_trans,
            start: g_start,
            end: g_end,
        },
    ))
}

/// Highest-scoring label sequence. Ties prefer the lower label index, both
/// for the final label and at every backpointer.
pub fn viterbi(e: ArrayView2<f64>, p: &CrfParams) -> Result<Vec<usize>> {
    let (t, l) = p.check(e)?;
    let mut delta = Array2::<f64>::zeros((t, l));
    let mut back = Array2::<usize>::zeros((t, l));
    for j in 0..l {
        delta[[0, j]] = p.start[j] + e[[0, j]];
    }
    for s in 1..t {
        for j in 0..l {
            let mut best = 0;
            let mut best_score = delta[[s - 1, 0]] + p.transitions[[0, j]];
            for i in 1..l {
                let score = delta[[s - 1, i]] + p.transitions[[i, j]];
                if score > best_score {
                    best = i;
                    best_score = score;
                }
            }
            delta[[s, j]] = best_score + e[[s, j]];
            back[[s, j]] = best;
        }
    }
    let mut last = 0;
    let mut last_score = delta[[t - 1, 0]] + p.end[0];
    for j in 1..l {
        let score = delta[[t - 1, j]] + p.end[j];
        if score > last_score {
            last = j;
            last_score = score;
        }
    }
    let mut path = vec![0; t];
    path[t - 1] = last;
    for s in (1..t).rev() {
        path[s - 1] = back[[s, path[s]]];
    }
    Ok(path)
}
