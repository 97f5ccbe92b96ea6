//! Per-time-step least-squares regression onto polynomial features.
//!
//! Inputs are standardised over the paths of the step, then expanded into
//! products of probabilists' Hermite polynomials of total degree at most
//! `degree` (the same span as the monomials, better conditioned). Inputs
//! with zero spread are dropped. Normal equations are accumulated over
//! fixed 2048-row chunks and summed in chunk order, so the result does not
//! depend on the number of worker threads.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PiaError, Result};
use crate::paths::PathEnsemble;
use crate::problem::PathView;

const CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    /// Current state only.
    #[default]
    Markov,
    /// Current state, running cost to date and states at pivot times.
    PathDependent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionBasis {
    pub kind: BasisKind,
    pub degree: usize,
    pub ridge: f64,
    /// Number of pivot times for the path-dependent basis.
    pub pivots: usize,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self {
            kind: BasisKind::Markov,
            degree: 3,
            ridge: 1e-8,
            pivots: 2,
        }
    }
}

impl RegressionBasis {
    pub fn markov(degree: usize) -> Self {
        Self {
            degree,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree > 12 {
            return Err(PiaError::config("basis degree above 12 is not supported"));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(PiaError::config("ridge must be a nonnegative finite number"));
        }
        Ok(())
    }

    pub fn is_markov(&self) -> bool {
        self.kind == BasisKind::Markov
    }

    /// Number of raw inputs per path for state dimension `m`.
    pub fn num_inputs(&self, m: usize) -> usize {
        match self.kind {
            BasisKind::Markov => m,
            BasisKind::PathDependent => m * (1 + self.pivots) + 1,
        }
    }

    fn pivot_steps(&self, n: usize) -> Vec<usize> {
        (1..=self.pivots)
            .map(|k| ((k * n) as f64 / (self.pivots + 1) as f64).round() as usize)
            .collect()
    }

    /// Raw inputs at step `j` for every path of the ensemble, `[path][input]`.
    /// `cost_to_date` is `[path][step]` (`N + 1` entries per path) and is
    /// required by the path-dependent basis.
    pub fn inputs(&self, ens: &PathEnsemble, j: usize, cost_to_date: Option<&[f64]>) -> Result<Vec<f64>> {
        let m = ens.state_dim();
        let q = self.num_inputs(m);
        let n = ens.num_steps();
        let mut out = vec![0.0; ens.num_paths() * q];
        match self.kind {
            BasisKind::Markov => {
                out.par_chunks_mut(q)
                    .enumerate()
                    .for_each(|(p, row)| row.copy_from_slice(ens.state(p, j)));
            }
            BasisKind::PathDependent => {
                let cost = cost_to_date.ok_or_else(|| {
                    PiaError::config("path-dependent basis needs the running cost to date")
                })?;
                let pivots = self.pivot_steps(n);
                out.par_chunks_mut(q).enumerate().for_each(|(p, row)| {
                    row[..m].copy_from_slice(ens.state(p, j));
                    row[m] = cost[p * (n + 1) + j];
                    for (k, &s) in pivots.iter().enumerate() {
                        let o = m + 1 + k * m;
                        row[o..o + m].copy_from_slice(ens.state(p, s.min(j)));
                    }
                });
            }
        }
        Ok(out)
    }

    /// Markov inputs from a path prefix.
    pub fn markov_inputs<'a>(&self, path: PathView<'a>) -> Result<&'a [f64]> {
        if !self.is_markov() {
            return Err(PiaError::config(
                "a path-dependent representation can only be evaluated on its own ensemble",
            ));
        }
        Ok(path.current())
    }
}

/// Multi-indices of total degree `<= degree` over `q` variables, graded
/// then lexicographic.
fn multi_indices(q: usize, degree: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![0u8; q]];
    for total in 1..=degree {
        let mut cur = vec![0u8; q];
        fill(&mut out, &mut cur, 0, total);
    }
    out
}

fn fill(out: &mut Vec<Vec<u8>>, cur: &mut Vec<u8>, pos: usize, left: usize) {
    if pos + 1 == cur.len() {
        cur[pos] = left as u8;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    if cur.is_empty() {
        return;
    }
    for k in (0..=left).rev() {
        cur[pos] = k as u8;
        fill(out, cur, pos + 1, left - k);
    }
    cur[pos] = 0;
}

fn hermite(s: f64, degree: usize, out: &mut [f64]) {
    out[0] = 1.0;
    if degree >= 1 {
        out[1] = s;
    }
    for k in 1..degree {
        out[k + 1] = s * out[k] - k as f64 * out[k - 1];
    }
}

/// Standardisation and term layout of one step, shared by fit and eval.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    active: Vec<usize>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    degree: usize,
    terms: Vec<Vec<u8>>,
}

impl Layout {
    fn row(&self, input: &[f64], herm: &mut [f64], out: &mut [f64]) {
        let d1 = self.degree + 1;
        for (a, &i) in self.active.iter().enumerate() {
            let s = (input[i] - self.mean[a]) / self.scale[a];
            hermite(s, self.degree, &mut herm[a * d1..(a + 1) * d1]);
        }
        for (t, idx) in self.terms.iter().enumerate() {
            let mut v = 1.0;
            for (a, &k) in idx.iter().enumerate() {
                if k > 0 {
                    v *= herm[a * d1 + k as usize];
                }
            }
            out[t] = v;
        }
    }
}

/// A fitted map from raw inputs to `outputs` reals.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFit {
    layout: Layout,
    coef: Vec<f64>,
    outputs: usize,
}

impl StepFit {
    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn eval(&self, input: &[f64], out: &mut [f64]) {
        let p = self.layout.terms.len();
        let mut herm = vec![0.0; self.layout.active.len() * (self.layout.degree + 1)];
        let mut row = vec![0.0; p];
        self.layout.row(input, &mut herm, &mut row);
        for (r, o) in out.iter_mut().enumerate().take(self.outputs) {
            *o = (0..p).map(|t| row[t] * self.coef[t * self.outputs + r]).sum();
        }
    }
}

/// Design matrix of one time step with its factorised Gram matrix.
pub struct Design {
    layout: Layout,
    rows: Vec<f64>,
    n: usize,
    chol: nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>,
}

impl Design {
    /// `inputs` is `[path][input]` with `q` inputs per path; `step` only
    /// labels errors.
    pub fn new(inputs: &[f64], q: usize, basis: &RegressionBasis, step: usize) -> Result<Self> {
        let n = if q == 0 { 0 } else { inputs.len() / q };
        if n == 0 {
            return Err(PiaError::Basis {
                step,
                reason: "no samples".into(),
            });
        }
        let (sums, sq) = chunked(n, |lo, hi| {
            let mut s = vec![0.0; q];
            let mut s2 = vec![0.0; q];
            for row in inputs[lo * q..hi * q].chunks_exact(q) {
                for i in 0..q {
                    s[i] += row[i];
                }
            }
            for row in inputs[lo * q..hi * q].chunks_exact(q) {
                for i in 0..q {
                    s2[i] += row[i] * row[i];
                }
            }
            (s, s2)
        })
        .into_iter()
        .fold((vec![0.0; q], vec![0.0; q]), |(mut a, mut b), (c, d)| {
            for i in 0..q {
                a[i] += c[i];
                b[i] += d[i];
            }
            (a, b)
        });
        let mut active = Vec::new();
        let mut mean = Vec::new();
        let mut scale = Vec::new();
        for i in 0..q {
            if !sums[i].is_finite() || !sq[i].is_finite() {
                return Err(PiaError::Basis {
                    step,
                    reason: format!("non-finite input {i}"),
                });
            }
            let mu = sums[i] / n as f64;
            let var = (sq[i] / n as f64 - mu * mu).max(0.0);
            let sd = var.sqrt();
            if sd > 1e-12 * (1.0 + mu.abs()) {
                active.push(i);
                mean.push(mu);
                scale.push(sd);
            }
        }
        let terms = multi_indices(active.len(), basis.degree);
        let p = terms.len();
        if p > 1 && p * 10 > n {
            return Err(PiaError::Basis {
                step,
                reason: format!("{p} basis functions for {n} paths (at most n/10 allowed)"),
            });
        }
        let layout = Layout {
            active,
            mean,
            scale,
            degree: basis.degree,
            terms,
        };
        let mut rows = vec![0.0; n * p];
        let na = layout.active.len();
        rows.par_chunks_mut(p)
            .zip(inputs.par_chunks(q))
            .for_each_init(
                || vec![0.0; na * (basis.degree + 1)],
                |herm, (row, input)| layout.row(input, herm, row),
            );
        let grams = chunked(n, |lo, hi| {
            let mut g = vec![0.0; p * p];
            for row in rows[lo * p..hi * p].chunks_exact(p) {
                for a in 0..p {
                    let ra = row[a];
                    for b in a..p {
                        g[a * p + b] += ra * row[b];
                    }
                }
            }
            g
        });
        let mut g = vec![0.0; p * p];
        for c in grams {
            for (x, y) in g.iter_mut().zip(c) {
                *x += y;
            }
        }
        let mut gram = DMatrix::zeros(p, p);
        for a in 0..p {
            for b in a..p {
                let v = g[a * p + b] / n as f64;
                gram[(a, b)] = v;
                gram[(b, a)] = v;
            }
            if a > 0 {
                gram[(a, a)] += basis.ridge;
            }
        }
        let chol = gram.cholesky().ok_or_else(|| PiaError::Basis {
            step,
            reason: "normal equations are not positive definite; increase ridge or lower degree".into(),
        })?;
        Ok(Self { layout, rows, n, chol })
    }

    pub fn num_terms(&self) -> usize {
        self.layout.terms.len()
    }

    /// Least-squares coefficients for `r` targets laid out `[path][target]`.
    pub fn solve(&self, targets: &[f64], r: usize) -> Result<Vec<f64>> {
        let p = self.num_terms();
        debug_assert_eq!(targets.len(), self.n * r);
        let parts = chunked(self.n, |lo, hi| {
            let mut acc = vec![0.0; p * r];
            for i in lo..hi {
                let row = &self.rows[i * p..(i + 1) * p];
                let y = &targets[i * r..(i + 1) * r];
                for a in 0..p {
                    for k in 0..r {
                        acc[a * r + k] += row[a] * y[k];
                    }
                }
            }
            acc
        });
        let mut rhs = vec![0.0; p * r];
        for c in parts {
            for (x, y) in rhs.iter_mut().zip(c) {
                *x += y;
            }
        }
        let mut coef = vec![0.0; p * r];
        for k in 0..r {
            let b = DVector::from_iterator(p, (0..p).map(|a| rhs[a * r + k] / self.n as f64));
            let x = self.chol.solve(&b);
            for a in 0..p {
                coef[a * r + k] = x[a];
            }
        }
        if coef.iter().any(|c| !c.is_finite()) {
            return Err(PiaError::Basis {
                step: 0,
                reason: "non-finite regression coefficients".into(),
            });
        }
        Ok(coef)
    }

    /// Fitted values `[path][target]` for coefficients from [`Design::solve`].
    pub fn predict(&self, coef: &[f64], r: usize) -> Vec<f64> {
        let p = self.num_terms();
        let mut out = vec![0.0; self.n * r];
        out.par_chunks_mut(r).enumerate().for_each(|(i, o)| {
            let row = &self.rows[i * p..(i + 1) * p];
            for k in 0..r {
                o[k] = (0..p).map(|a| row[a] * coef[a * r + k]).sum();
            }
        });
        out
    }

    pub fn to_fit(&self, coef: Vec<f64>, r: usize) -> StepFit {
        StepFit {
            layout: self.layout.clone(),
            coef,
            outputs: r,
        }
    }
}

/// Runs `f` over fixed `CHUNK`-row blocks in parallel, returning the
/// block results in order.
fn chunked<T: Send>(n: usize, f: impl Fn(usize, usize) -> T + Sync) -> Vec<T> {
    let blocks = n.div_ceil(CHUNK);
    (0..blocks)
        .into_par_iter()
        .map(|b| f(b * CHUNK, ((b + 1) * CHUNK).min(n)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multi_index_counts() {
        assert_eq!(multi_indices(1, 3).len(), 4);
        assert_eq!(multi_indices(2, 3).len(), 10);
        assert_eq!(multi_indices(3, 2).len(), 10);
        assert_eq!(multi_indices(0, 3).len(), 1);
    }

    #[test]
    fn recovers_cubic_exactly() {
        let xs: Vec<f64> = (0..500).map(|i| -2.0 + 4.0 * i as f64 / 499.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - 2.0 * x + 0.5 * x * x * x).collect();
        let d = Design::new(&xs, 1, &RegressionBasis { ridge: 0.0, ..RegressionBasis::default() }, 0).unwrap();
        let c = d.solve(&ys, 1).unwrap();
        let fit = d.predict(&c, 1);
        for (a, b) in fit.iter().zip(&ys) {
            assert!((a - b).abs() < 1e-9);
        }
        let f = d.to_fit(c, 1);
        let mut o = [0.0];
        f.eval(&[0.3], &mut o);
        assert!((o[0] - (1.0 - 0.6 + 0.5 * 0.027)).abs() < 1e-9);
    }

    #[test]
    fn constant_inputs_give_the_mean() {
        let xs = vec![0.5; 100];
        let ys: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let d = Design::new(&xs, 1, &RegressionBasis::default(), 0).unwrap();
        assert_eq!(d.num_terms(), 1);
        let c = d.solve(&ys, 1).unwrap();
        assert!((c[0] - 49.5).abs() < 1e-6);
    }

    #[test]
    fn too_many_columns_rejected() {
        let xs: Vec<f64> = (0..30).map(|i| i as f64).collect();
        assert!(matches!(
            Design::new(&xs, 1, &RegressionBasis::default(), 7),
            Err(PiaError::Basis { step: 7, .. })
        ));
    }

    #[test]
    fn chunking_is_thread_independent() {
        let n = 10_000;
        let xs: Vec<f64> = (0..2 * n).map(|i| ((i * 7919) % 1000) as f64 / 333.0).collect();
        let ys: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let run = || {
            let d = Design::new(&xs, 2, &RegressionBasis::default(), 0).unwrap();
            d.solve(&ys, 1).unwrap()
        };
        let a = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
        let b = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(run);
        assert_eq!(a, b);
    }
}
