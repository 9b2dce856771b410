//! Reverse-mode differentiation over 2-D `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamSet`] rather than copied; [`Tape::backward`] then
//! yields gradients for every named parameter that took part in the pass.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use ndarray::{concatenate, s, Array1, Array2, Axis};

use crate::crf::{self, CrfParams};
use crate::error::{Error, Result};

/// Named parameter tensors. Vectors are stored as `1 × n` rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet(BTreeMap<String, Array2<f64>>);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.0.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Array2<f64>> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Copies every tensor of `other` in, replacing same-named entries.
    pub fn extend(&mut self, other: ParamSet) {
        self.0.extend(other.0);
    }

    /// Parameters whose name starts with `prefix`.
    pub fn filtered(&self, prefix: &str) -> ParamSet {
        ParamSet(
            self.0
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        )
    }

    /// Total number of scalars.
    pub fn size(&self) -> usize {
        self.0.values().map(Array2::len).sum()
    }
}

pub type Grads = BTreeMap<String, Array2<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Adds a `1 × n` row to every row.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    /// Selects rows of `x` (repetition allowed).
    Gather(Var, Vec<usize>),
    Cols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Array2<f64>,
    },
    CrfNll {
        emissions: Var,
        transitions: Var,
        start: Var,
        end: Var,
        grads: crf::CrfGrads,
    },
}

struct Node<'p> {
    value: Cow<'p, Array2<f64>>,
    op: Op,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;
const LN_EPS: f64 = 1e-12;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node<'p>>,
    param_vars: HashMap<&'p str, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is reported for it.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// The named parameter; repeated calls return the same variable.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let (key, value) = self
            .params
            .0
            .get_key_value(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Param(key.clone()),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(key.as_str(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let v = self.value(x) + self.value(row);
        self.push(v, Op::AddRow(x, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x) * k;
        self.push(v, Op::Scale(x, k))
    }

    /// `x · w + b` with `b` a `1 × n` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        self.push(v, Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let mean = xv.mean_axis(Axis(1)).expect("nonempty rows");
        let centered = xv - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).expect("nonempty rows");
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = centered * &inv_std.view().insert_axis(Axis(1));
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gather(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let v = self.value(x).select(Axis(0), &rows);
        self.push(v, Op::Gather(x, rows))
    }

    pub fn rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        self.gather(x, (start..end).collect())
    }

    pub fn cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice(s![.., start..end]).to_owned();
        self.push(v, Op::Cols(x, start, end))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("equal widths");
        self.push(v, Op::ConcatRows(parts))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("equal heights");
        self.push(v, Op::ConcatCols(parts))
    }

    /// Column means as a `1 × n` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .mean_axis(Axis(0))
            .expect("nonempty")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(x))
    }

    /// Elementwise sum of equally shaped values.
    pub fn sum(&mut self, parts: Vec<Var>) -> Var {
        let mut v = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            v += self.value(p);
        }
        self.push(v, Op::Sum(parts))
    }

    /// Summed cross-entropy of row-wise softmax over `logits` against one
    /// target column per row, as a `1 × 1` value.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let probs = softmax_rows(self.value(logits));
        let loss: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -probs[[r, t]].max(f64::MIN_POSITIVE).ln())
            .sum();
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
        )
    }

    /// CRF negative log-likelihood of `labels` as a `1 × 1` value.
    /// `start` and `end` are `1 × L` rows.
    pub fn crf_nll(
        &mut self,
        emissions: Var,
        transitions: Var,
        start: Var,
        end: Var,
        labels: &[usize],
    ) -> Result<Var> {
        let params = CrfParams {
            transitions: self.value(transitions).clone(),
            start: self.value(start).row(0).to_owned(),
            end: self.value(end).row(0).to_owned(),
        };
        let (nll, grads) = crf::nll_and_grad(self.value(emissions).view(), &params, labels)?;
        Ok(self.push(
            Array2::from_elem((1, 1), nll),
            Op::CrfNll {
                emissions,
                transitions,
                start,
                end,
                grads,
            },
        ))
    }

    /// Back-propagates from the scalar `loss` and returns the gradient of
    /// every parameter that was used.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones(self.value(loss).raw_dim()));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    acc(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(&mut grads, *a, g.dot(self.value(*b)));
                    acc(&mut grads, *b, g.t().dot(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(x, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *x, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::Scale(x, k) => acc(&mut grads, *x, g * *k),
                Op::Gelu(x) => {
                    let d = self.value(*x).mapv(gelu_grad);
                    acc(&mut grads, *x, g * d);
                }
                Op::Tanh(x) => {
                    let d = node.value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *x, g * d);
                }
                Op::Sigmoid(x) => {
                    let d = node.value.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *x, g * d);
                }
                Op::SoftmaxRows(x) => {
                    let y = &*node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *x, y * &(g - &dot));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(
                        &mut grads,
                        *gamma,
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let dxhat = &g * self.value(*gamma);
                    let mean_d = dxhat.mean_axis(Axis(1)).expect("rows").insert_axis(Axis(1));
                    let mean_dx = (&dxhat * xhat)
                        .mean_axis(Axis(1))
                        .expect("rows")
                        .insert_axis(Axis(1));
                    let dx = (dxhat - &mean_d - &(xhat * &mean_dx))
                        * &inv_std.view().insert_axis(Axis(1));
                    acc(&mut grads, *x, dx);
                }
                Op::Gather(x, rows) => {
                    let mut d = Array2::zeros(self.value(*x).raw_dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut target = d.row_mut(src);
                        target += &g.row(r);
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Cols(x, start, end) => {
                    let mut d = Array2::zeros(self.value(*x).raw_dim());
                    d.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *x, d);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![at..at + n, ..]).to_owned());
                        at += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., at..at + n]).to_owned());
                        at += n;
                    }
                }
                Op::MeanRows(x) => {
                    let rows = self.value(*x).nrows();
                    let d = g / rows as f64;
                    let full = d
                        .broadcast(self.value(*x).raw_dim())
                        .expect("row broadcast")
                        .to_owned();
                    acc(&mut grads, *x, full);
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        acc(&mut grads, p, g.clone());
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let upstream = g[[0, 0]];
                    let mut d = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        d[[r, t]] -= 1.0;
                    }
                    acc(&mut grads, *logits, d * upstream);
                }
                Op::CrfNll {
                    emissions,
                    transitions,
                    start,
                    end,
                    grads: cg,
                } => {
                    let upstream = g[[0, 0]];
                    acc(&mut grads, *emissions, &cg.emissions * upstream);
                    acc(&mut grads, *transitions, &cg.transitions * upstream);
                    acc(
                        &mut grads,
                        *start,
                        cg.start.view().insert_axis(Axis(0)).to_owned() * upstream,
                    );
                    acc(
                        &mut grads,
                        *end,
                        cg.end.view().insert_axis(Axis(0)).to_owned() * upstream,
                    );
                }
            }
        }

        self.nodes
            .iter()
            .zip(grads)
            .filter_map(|(node, g)| match (&node.op, g) {
                (Op::Param(name), Some(g)) => Some((name.clone(), g)),
                _ => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of every parameter entry of `f`.
    fn check(params: &ParamSet, f: impl Fn(&mut Tape) -> Var) -> f64 {
        let mut tape = Tape::new(params);
        let out = f(&mut tape);
        let grads = tape.backward(out);
        let eval = |p: &ParamSet| {
            let mut t = Tape::new(p);
            let o = f(&mut t);
            t.scalar(o)
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (name, value) in params.iter() {
            for idx in 0..value.len() {
                let (r, c) = (idx / value.ncols(), idx % value.ncols());
                let mut plus = params.clone();
                plus.get_mut(name).unwrap()[[r, c]] += h;
                let mut minus = params.clone();
                minus.get_mut(name).unwrap()[[r, c]] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grads.get(name).map_or(0.0, |g| g[[r, c]]);
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3));
            }
        }
        worst
    }

    #[test]
    fn elementwise_ops_backprop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        p.insert("a", random(&mut rng, 3, 4));
        p.insert("b", random(&mut rng, 4, 2));
        p.insert("r", random(&mut rng, 1, 2));
        p.insert("g", random(&mut rng, 1, 4));
        p.insert("be", random(&mut rng, 1, 4));
        let err = check(&p, |t| {
            let a = t.param("a").unwrap();
            let b = t.param("b").unwrap();
            let r = t.param("r").unwrap();
            let g = t.param("g").unwrap();
            let be = t.param("be").unwrap();
            let ln = t.layer_norm(a, g, be);
            let ab = t.matmul(ln, b);
            let x = t.add_row(ab, r);
            let x1 = t.gelu(x);
            let x2 = t.tanh(x);
            let x3 = t.sigmoid(x);
            let m = t.mul(x1, x2);
            let s = t.sum(vec![m, x3]);
            let sm = t.softmax_rows(s);
            let cols = t.cols(sm, 1, 2);
            let top = t.rows(cols, 0, 2);
            let pooled = t.mean_rows(top);
            let scaled = t.scale(pooled, 3.0);
            let cat = t.concat_rows(vec![scaled, scaled]);
            let srows = t.rows(s, 1, 3);
            let logits = t.concat_cols(vec![cat, cat, srows]);
            t.cross_entropy(logits, vec![0, 2])
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_t_and_gather_backprop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamSet::new();
        p.insert("emb", random(&mut rng, 5, 3));
        p.insert("k", random(&mut rng, 4, 3));
        let err = check(&p, |t| {
            let emb = t.param("emb").unwrap();
            let k = t.param("k").unwrap();
            let x = t.gather(emb, vec![4, 0, 4]);
            let sc = t.matmul_t(x, k);
            t.cross_entropy(sc, vec![3, 1, 0])
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn crf_node_backprop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        p.insert("x", random(&mut rng, 4, 3));
        p.insert("w", random(&mut rng, 3, 2));
        p.insert("tr", random(&mut rng, 2, 2));
        p.insert("st", random(&mut rng, 1, 2));
        p.insert("en", random(&mut rng, 1, 2));
        let err = check(&p, |t| {
            let x = t.param("x").unwrap();
            let w = t.param("w").unwrap();
            let e = t.matmul(x, w);
            let tr = t.param("tr").unwrap();
            let st = t.param("st").unwrap();
            let en = t.param("en").unwrap();
            let nll = t.crf_nll(e, tr, st, en, &[0, 1, 1, 0]).unwrap();
            t.scale(nll, 0.5)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn params_are_shared_and_inputs_get_no_gradient() {
        let mut p = ParamSet::new();
        p.insert("w", array![[2.0]]);
        let mut t = Tape::new(&p);
        let w1 = t.param("w").unwrap();
        let w2 = t.param("w").unwrap();
        assert_eq!(w1, w2);
        let c = t.input(array![[3.0]]);
        let y = t.mul(w1, c);
        let y = t.mul(y, w2);
        let g = t.backward(y);
        assert_eq!(g.len(), 1);
        assert_eq!(g["w"][[0, 0]], 12.0);
        assert!(t.param("missing").is_err());
    }
}
