//! Backward solvers on path ensembles.
//!
//! [`explicit_iterate_value`] evaluates one penalized iterate
//! `Y_t = phi log E^{P^n}[exp(F/phi) | F_t]`, [`estimate_Z`] extracts the
//! martingale integrand by increment regression, and
//! [`solve_reference_bsde`] is a plain regression scheme for the
//! unpenalized quadratic BSDE with driver `H(t, X, Z)`.

use rayon::prelude::*;

use crate::error::{PiaError, Result};
use crate::paths::{FeedbackField, PathEnsemble};
use crate::problem::{ControlProblem, PathView};
use crate::regression::{Design, RegressionBasis, StepFit};

/// Lower clamp for the fitted conditional ratio in the intermediate `y`
/// recursion.
const RATIO_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
struct ZCache {
    ensemble: u64,
    values: Vec<f64>,
}

/// Per-step regression map `features -> Z in R^d`, clipped to `|Z| <= clip`.
///
/// Values on the ensemble used for fitting are cached, which is what lets a
/// path-dependent basis be used there. Elsewhere the representation is
/// evaluated on the current state, so it must be Markov.
#[derive(Debug, Clone)]
pub struct ZRepresentation {
    fits: Vec<Option<StepFit>>,
    noise_dim: usize,
    clip: f64,
    markov: bool,
    cache: Option<ZCache>,
    clip_count: usize,
}

fn clip_in_place(z: &mut [f64], clip: f64) -> bool {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > clip {
        let s = clip / norm;
        z.iter_mut().for_each(|v| *v *= s);
        true
    } else {
        false
    }
}

impl ZRepresentation {
    /// `Z = 0` on every step; the convention for `Z^{-1}`.
    pub fn zero(num_steps: usize, noise_dim: usize, clip: f64) -> Self {
        Self {
            fits: vec![None; num_steps],
            noise_dim,
            clip,
            markov: true,
            cache: None,
            clip_count: 0,
        }
    }

    pub fn num_steps(&self) -> usize {
        self.fits.len()
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn is_markov(&self) -> bool {
        self.markov
    }

    /// Number of fitted values that were clipped on the fitting ensemble.
    pub fn clip_count(&self) -> usize {
        self.clip_count
    }

    /// Drops cached values; the representation stays usable through its
    /// Markov fits.
    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }

    fn eval_markov(&self, j: usize, x: &[f64], out: &mut [f64]) {
        match &self.fits[j] {
            None => out.fill(0.0),
            Some(f) => {
                f.eval(x, out);
                clip_in_place(out, self.clip);
            }
        }
    }

    /// `Z` at step `j` of path `p`.
    pub fn value(&self, ens: &PathEnsemble, p: usize, j: usize, out: &mut [f64]) -> Result<()> {
        if let Some(c) = &self.cache {
            if c.ensemble == ens.id() {
                let o = (p * self.num_steps() + j) * self.noise_dim;
                out.copy_from_slice(&c.values[o..o + self.noise_dim]);
                return Ok(());
            }
        }
        if self.fits.iter().all(Option::is_none) {
            out.fill(0.0);
            return Ok(());
        }
        if !self.markov {
            return Err(PiaError::config(
                "a path-dependent Z representation can only be evaluated on its own ensemble",
            ));
        }
        self.eval_markov(j, ens.state(p, j), out);
        Ok(())
    }

    /// All values on an ensemble, `[path][step][component]`.
    pub fn values_on(&self, ens: &PathEnsemble) -> Result<Vec<f64>> {
        let (n, d) = (self.num_steps(), self.noise_dim);
        if ens.num_steps() != n {
            return Err(PiaError::config("ensemble and Z representation use different grids"));
        }
        let mut out = vec![0.0; ens.num_paths() * n * d];
        out.par_chunks_mut(n * d)
            .enumerate()
            .map(|(p, row)| {
                for j in 0..n {
                    self.value(ens, p, j, &mut row[j * d..(j + 1) * d])?;
                }
                Ok(())
            })
            .collect::<Result<Vec<()>>>()?;
        Ok(out)
    }
}

impl FeedbackField for ZRepresentation {
    fn z_at(&self, step: usize, _t: f64, path: PathView<'_>, out: &mut [f64]) -> Result<()> {
        if self.fits.iter().all(Option::is_none) {
            out.fill(0.0);
            return Ok(());
        }
        if !self.markov {
            return Err(PiaError::config(
                "a path-dependent Z representation can only be evaluated on its own ensemble",
            ));
        }
        self.eval_markov(step, path.current(), out);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Diagnostics {
    /// Fitted conditional ratios raised to the positive floor.
    pub ratio_clamps: usize,
    /// Fitted `Z` values clipped to `z_clip`.
    pub z_clips: usize,
}

#[derive(Debug, Clone)]
pub struct BackwardSolution {
    /// `[path][step]`, `N + 1` entries per path.
    pub y: Vec<f64>,
    pub z: ZRepresentation,
    pub value: f64,
    pub stderr: f64,
    pub diagnostics: Diagnostics,
}

impl BackwardSolution {
    pub fn y_at(&self, p: usize, j: usize) -> f64 {
        let n = self.z.num_steps();
        self.y[p * (n + 1) + j]
    }
}

/// The frozen policy `u*(t, X, Z_prev)` along an ensemble together with the
/// quantities derived from it.
#[derive(Debug, Clone)]
pub struct FrozenPolicy {
    num_steps: usize,
    /// Grid index of the selected action, `[path][step]`.
    pub actions: Vec<u32>,
    /// `int_0^{t_j} L ds` by left-point sums, `[path][step]` with `N + 1`
    /// entries per path.
    pub cost_to_date: Vec<f64>,
    /// `G` per path.
    pub terminal: Vec<f64>,
    /// Girsanov log-weights for `theta = b(u*)`.
    pub log_weights: Vec<f64>,
}

impl FrozenPolicy {
    pub fn evaluate(problem: &ControlProblem, ens: &PathEnsemble, z_prev: &ZRepresentation) -> Result<Self> {
        let (n, d) = (ens.num_steps(), problem.noise_dim());
        if z_prev.num_steps() != n || z_prev.noise_dim() != d {
            return Err(PiaError::config("Z representation does not match the ensemble"));
        }
        let dt = ens.grid().step();
        let np = ens.num_paths();
        let rows: Vec<Result<(Vec<u32>, Vec<f64>, f64, f64)>> = (0..np)
            .into_par_iter()
            .map(|p| {
                let mut acts = Vec::with_capacity(n);
                let mut cost = Vec::with_capacity(n + 1);
                let mut z = vec![0.0; d];
                let mut b = vec![0.0; d];
                let mut acc = 0.0;
                let mut lw = 0.0;
                cost.push(0.0);
                for j in 0..n {
                    let t = ens.grid().time(j);
                    let view = ens.prefix(p, j);
                    z_prev.value(ens, p, j, &mut z)?;
                    let a = problem.policy_action(t, view, &z)?.index;
                    acts.push(a as u32);
                    acc += problem.cost_at(t, view, a)? * dt;
                    cost.push(acc);
                    problem.drift_at(t, view, a, &mut b)?;
                    let db = ens.brownian().increment(p, j);
                    for k in 0..d {
                        lw += b[k] * db[k] - 0.5 * b[k] * b[k] * dt;
                    }
                }
                let g = problem.terminal_at(ens.prefix(p, n))?;
                Ok((acts, cost, g, lw))
            })
            .collect();
        let mut out = Self {
            num_steps: n,
            actions: Vec::with_capacity(np * n),
            cost_to_date: Vec::with_capacity(np * (n + 1)),
            terminal: Vec::with_capacity(np),
            log_weights: Vec::with_capacity(np),
        };
        for r in rows {
            let (a, c, g, w) = r?;
            out.actions.extend(a);
            out.cost_to_date.extend(c);
            out.terminal.push(g);
            out.log_weights.push(w);
        }
        Ok(out)
    }

    pub fn action(&self, p: usize, j: usize) -> usize {
        self.actions[p * self.num_steps + j] as usize
    }

    pub fn total_cost(&self, p: usize) -> f64 {
        self.cost_to_date[p * (self.num_steps + 1) + self.num_steps]
    }

    /// `F = G - int_0^T L ds` per path.
    pub fn functional(&self) -> Vec<f64> {
        (0..self.terminal.len())
            .map(|p| self.terminal[p] - self.total_cost(p))
            .collect()
    }
}

/// `F^n = G(X) - int_0^T L(s, X, u*(s, X, Z_prev)) ds` per path.
pub fn terminal_functional(
    problem: &ControlProblem,
    ens: &PathEnsemble,
    z_prev: &ZRepresentation,
) -> Result<Vec<f64>> {
    Ok(FrozenPolicy::evaluate(problem, ens, z_prev)?.functional())
}

/// `phi log (sum_p w_p exp(f_p / phi) / sum_p w_p)` with `w = exp(log_w)`,
/// and its delta-method standard error. Sums run in path order.
pub fn weighted_log_exp_mean(f: &[f64], log_w: &[f64], phi: f64) -> (f64, f64) {
    let lmax = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - lmax).exp()).collect();
    let total: f64 = w.iter().sum();
    let w: Vec<f64> = w.iter().map(|v| v / total).collect();
    let a: Vec<f64> = f.iter().map(|v| v / phi).collect();
    let c: f64 = w.iter().zip(&a).map(|(w, a)| w * a).sum();
    let spread = a.iter().map(|v| v - c).fold(f64::NEG_INFINITY, f64::max);
    if spread < 600.0 {
        // centred at the weighted mean so that large phi keeps full precision
        let em: Vec<f64> = a.iter().map(|v| (v - c).exp_m1()).collect();
        let rm1: f64 = w.iter().zip(&em).map(|(w, e)| w * e).sum();
        let var: f64 = w.iter().zip(&em).map(|(w, e)| w * w * (e - rm1) * (e - rm1)).sum();
        let r = 1.0 + rm1;
        (phi * (c + rm1.ln_1p()), phi * var.sqrt() / r)
    } else {
        let amax = c + spread;
        let e: Vec<f64> = a.iter().map(|v| (v - amax).exp()).collect();
        let r: f64 = w.iter().zip(&e).map(|(w, e)| w * e).sum();
        let var: f64 = w.iter().zip(&e).map(|(w, e)| w * w * (e - r) * (e - r)).sum();
        (phi * (amax + r.ln()), phi * var.sqrt() / r)
    }
}

fn design_at(
    basis: &RegressionBasis,
    ens: &PathEnsemble,
    j: usize,
    cost: Option<&[f64]>,
) -> Result<Design> {
    let q = basis.num_inputs(ens.state_dim());
    let inputs = basis.inputs(ens, j, cost)?;
    Design::new(&inputs, q, basis, j)
}

fn check_basis(basis: &RegressionBasis, ens: &PathEnsemble) -> Result<()> {
    basis.validate()?;
    if !basis.is_markov() && basis.pivots > ens.num_steps() {
        return Err(PiaError::config("more pivots than time steps"));
    }
    Ok(())
}

/// Accumulates one step of `Z` into the representation under construction.
struct ZBuilder {
    fits: Vec<Option<StepFit>>,
    values: Vec<f64>,
    n: usize,
    d: usize,
    clip: f64,
    clips: usize,
}

impl ZBuilder {
    fn new(np: usize, n: usize, d: usize, clip: f64) -> Self {
        Self {
            fits: vec![None; n],
            values: vec![0.0; np * n * d],
            n,
            d,
            clip,
            clips: 0,
        }
    }

    /// Stores fitted values `[path][component]` for step `j`.
    fn store(&mut self, j: usize, fit: StepFit, fitted: &[f64]) {
        let d = self.d;
        for (p, z) in fitted.chunks_exact(d).enumerate() {
            let o = (p * self.n + j) * d;
            let dst = &mut self.values[o..o + d];
            dst.copy_from_slice(z);
            if clip_in_place(dst, self.clip) {
                self.clips += 1;
            }
        }
        self.fits[j] = Some(fit);
    }

    fn finish(self, ens: &PathEnsemble, markov: bool) -> ZRepresentation {
        ZRepresentation {
            fits: self.fits,
            noise_dim: self.d,
            clip: self.clip,
            markov,
            cache: Some(ZCache {
                ensemble: ens.id(),
                values: self.values,
            }),
            clip_count: self.clips,
        }
    }
}

/// Regression targets `resid * dB / dt` for step `j`.
fn increment_targets(ens: &PathEnsemble, j: usize, resid: &[f64]) -> Vec<f64> {
    let d = ens.noise_dim();
    let dt = ens.grid().step();
    let mut t = vec![0.0; resid.len() * d];
    t.par_chunks_mut(d).enumerate().for_each(|(p, row)| {
        let db = ens.brownian().increment(p, j);
        for k in 0..d {
            row[k] = resid[p] * db[k] / dt;
        }
    });
    t
}

/// `Z` by martingale-increment regression: at each step `j`,
/// `Z_j = E[(y_{j+1} - E[y_{j+1} | F_j]) dB_j | F_j] / dt`, with the inner
/// conditional expectation acting as a control variate. `y` is
/// `[path][step]` with `N + 1` entries per path; `cost_to_date` (same
/// layout) feeds the path-dependent basis.
#[allow(non_snake_case)]
pub fn estimate_Z(
    ens: &PathEnsemble,
    y: &[f64],
    basis: &RegressionBasis,
    clip: f64,
    cost_to_date: Option<&[f64]>,
) -> Result<ZRepresentation> {
    check_basis(basis, ens)?;
    let (np, n, d) = (ens.num_paths(), ens.num_steps(), ens.noise_dim());
    if y.len() != np * (n + 1) {
        return Err(PiaError::config("y has the wrong shape"));
    }
    let mut zb = ZBuilder::new(np, n, d, clip);
    for j in (0..n).rev() {
        let design = design_at(basis, ens, j, cost_to_date)?;
        let next: Vec<f64> = (0..np).map(|p| y[p * (n + 1) + j + 1]).collect();
        let c = design.solve(&next, 1)?;
        let fitted = design.predict(&c, 1);
        let resid: Vec<f64> = next.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        let targets = increment_targets(ens, j, &resid);
        let cz = design.solve(&targets, d)?;
        let zf = design.predict(&cz, d);
        zb.store(j, design.to_fit(cz, d), &zf);
    }
    Ok(zb.finish(ens, basis.is_markov()))
}

/// One penalized iterate on a fixed ensemble, given the frozen policy
/// `u*(Z^{n-1})`.
///
/// The value is the self-normalised weighted estimator of
/// `phi log E^{P^n}[exp(F / phi)]` in log space. Intermediate values come
/// from the one-step recursion on `y~_t = y_t + int_0^t L ds`:
/// `y~_j = E[y~_{j+1}] + phi log E[exp((y~_{j+1} - E[y~_{j+1}]) / phi + dlogW_j)] - L_j dt`,
/// with both conditional expectations regressed on the step-`j` basis.
/// `Z^n` is estimated along the way from the same residuals.
pub fn explicit_iterate_value_with(
    problem: &ControlProblem,
    ens: &PathEnsemble,
    policy: &FrozenPolicy,
    phi: f64,
    basis: &RegressionBasis,
) -> Result<BackwardSolution> {
    if !(phi >= 1.0 && phi.is_finite()) {
        return Err(PiaError::config(format!("phi must be a finite number >= 1, got {phi}")));
    }
    check_basis(basis, ens)?;
    let (np, n, d) = (ens.num_paths(), ens.num_steps(), ens.noise_dim());
    let dt = ens.grid().step();
    let f = policy.functional();
    let (value, stderr) = weighted_log_exp_mean(&f, &policy.log_weights, phi);

    let cost = Some(policy.cost_to_date.as_slice());
    let mut y = vec![0.0; np * (n + 1)];
    let mut ytil = policy.terminal.clone();
    for p in 0..np {
        y[p * (n + 1) + n] = f[p];
    }
    let mut zb = ZBuilder::new(np, n, d, problem.bounds().z_clip);
    let mut clamps = 0usize;
    let mut b = vec![0.0; d];
    for j in (0..n).rev() {
        let t = ens.grid().time(j);
        let design = design_at(basis, ens, j, cost)?;
        let c = design.solve(&ytil, 1)?;
        let mean = design.predict(&c, 1);
        let resid: Vec<f64> = ytil.iter().zip(&mean).map(|(a, m)| a - m).collect();

        let mut targets = vec![0.0; np * (1 + d)];
        let mut running = vec![0.0; np];
        for p in 0..np {
            let a = policy.action(p, j);
            let view = ens.prefix(p, j);
            problem.drift_at(t, view, a, &mut b)?;
            running[p] = problem.cost_at(t, view, a)?;
            let db = ens.brownian().increment(p, j);
            let mut dlw = 0.0;
            for k in 0..d {
                dlw += b[k] * db[k] - 0.5 * b[k] * b[k] * dt;
            }
            let row = &mut targets[p * (1 + d)..(p + 1) * (1 + d)];
            // exp(dlw) has conditional mean one, so it is subtracted as a
            // control variate; otherwise its noise is amplified by phi
            row[0] = (resid[p] / phi).min(700.0).exp_m1() * dlw.min(700.0).exp();
            for k in 0..d {
                row[1 + k] = resid[p] * db[k] / dt;
            }
        }
        let c2 = design.solve(&targets, 1 + d)?;
        let pred = design.predict(&c2, 1 + d);
        let mut zf = vec![0.0; np * d];
        for p in 0..np {
            let mut q = pred[p * (1 + d)];
            if !(q > RATIO_FLOOR - 1.0) {
                q = RATIO_FLOOR - 1.0;
                clamps += 1;
            }
            ytil[p] = mean[p] + phi * q.ln_1p() - running[p] * dt;
            zf[p * d..(p + 1) * d].copy_from_slice(&pred[p * (1 + d) + 1..(p + 1) * (1 + d)]);
            y[p * (n + 1) + j] = ytil[p] - policy.cost_to_date[p * (n + 1) + j];
        }
        let mut zc = vec![0.0; design.num_terms() * d];
        for a in 0..design.num_terms() {
            for k in 0..d {
                zc[a * d + k] = c2[a * (1 + d) + 1 + k];
            }
        }
        zb.store(j, design.to_fit(zc, d), &zf);
        if let Some(bad) = ytil.iter().position(|v| !v.is_finite()) {
            return Err(PiaError::Basis {
                step: j,
                reason: format!("non-finite intermediate value on path {bad}"),
            });
        }
    }
    for p in 0..np {
        y[p * (n + 1)] = value;
    }
    let z = zb.finish(ens, basis.is_markov());
    let diagnostics = Diagnostics {
        ratio_clamps: clamps,
        z_clips: z.clip_count(),
    };
    Ok(BackwardSolution {
        y,
        z,
        value,
        stderr,
        diagnostics,
    })
}

/// [`explicit_iterate_value_with`] for the policy frozen at `z_prev`.
pub fn explicit_iterate_value(
    problem: &ControlProblem,
    ens: &PathEnsemble,
    z_prev: &ZRepresentation,
    phi: f64,
    basis: &RegressionBasis,
) -> Result<BackwardSolution> {
    let policy = FrozenPolicy::evaluate(problem, ens, z_prev)?;
    explicit_iterate_value_with(problem, ens, &policy, phi, basis)
}

fn max_abs_cost(problem: &ControlProblem) -> Result<f64> {
    let x0 = PathView::point(problem.initial_state());
    let mut m: f64 = 0.0;
    for i in 0..problem.actions().len() {
        m = m.max(problem.cost_at(0.0, x0, i)?.abs());
    }
    Ok(m)
}

/// Regression scheme for `dY = -H(t, X, Z) dt + Z dB`, `Y_T = G(X)`:
/// `y_j = E[y_{j+1} | F_j] + H(t_j, X, Z_j) dt` with `Z_j` from
/// increment regression. Each step is repeated `picard_iters` times, the
/// last `y_j` serving as the control variate for the next `Z_j`.
///
/// Aborts when `max |y|` exceeds ten times
/// `max |G| + T (max |L| + drift_bound z_clip)`.
pub fn solve_reference_bsde(
    problem: &ControlProblem,
    ens: &PathEnsemble,
    basis: &RegressionBasis,
    picard_iters: usize,
) -> Result<BackwardSolution> {
    if problem.flags().controlled_vol {
        return Err(PiaError::config("the reference BSDE needs uncontrolled volatility"));
    }
    check_basis(basis, ens)?;
    let (np, n, d) = (ens.num_paths(), ens.num_steps(), ens.noise_dim());
    let dt = ens.grid().step();
    let iters = picard_iters.max(1);
    let g: Vec<f64> = (0..np)
        .map(|p| problem.terminal_at(ens.prefix(p, n)))
        .collect::<Result<_>>()?;
    let bounds = problem.bounds();
    let limit = 10.0
        * (g.iter().fold(0.0f64, |a, v| a.max(v.abs()))
            + problem.horizon() * (max_abs_cost(problem)? + bounds.drift * bounds.z_clip));
    // the path-dependent basis reads the running cost, zero along this solver
    let zero_cost = vec![0.0; np * (n + 1)];
    let cost = Some(zero_cost.as_slice());

    let mut y = vec![0.0; np * (n + 1)];
    for p in 0..np {
        y[p * (n + 1) + n] = g[p];
    }
    let mut cur = g.clone();
    let mut hvals = vec![0.0; np * n];
    let mut zb = ZBuilder::new(np, n, d, bounds.z_clip);
    for j in (0..n).rev() {
        let t = ens.grid().time(j);
        let design = design_at(basis, ens, j, cost)?;
        let c = design.solve(&cur, 1)?;
        let mean = design.predict(&c, 1);
        let mut cv = mean.clone();
        let mut next = mean.clone();
        let mut last = None;
        for _ in 0..iters {
            let resid: Vec<f64> = cur.iter().zip(&cv).map(|(a, m)| a - m).collect();
            let targets = increment_targets(ens, j, &resid);
            let cz = design.solve(&targets, d)?;
            let mut zf = design.predict(&cz, d);
            zf.chunks_exact_mut(d).for_each(|z| {
                clip_in_place(z, bounds.z_clip);
            });
            let h: Vec<f64> = (0..np)
                .into_par_iter()
                .map(|p| {
                    problem
                        .hamiltonian_argmax(t, ens.prefix(p, j), &zf[p * d..(p + 1) * d])
                        .map(|s| s.value)
                })
                .collect::<Result<_>>()?;
            for p in 0..np {
                next[p] = mean[p] + h[p] * dt;
                hvals[p * n + j] = h[p];
            }
            cv.copy_from_slice(&next);
            last = Some((cz, zf));
        }
        let (cz, zf) = last.expect("at least one Picard pass");
        zb.store(j, design.to_fit(cz, d), &zf);
        let observed = next.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if !(observed <= limit) {
            return Err(PiaError::Instability {
                step: j,
                observed,
                limit,
            });
        }
        for p in 0..np {
            y[p * (n + 1) + j] = next[p];
        }
        cur = next;
    }
    let value = cur.iter().sum::<f64>() / np as f64;
    for p in 0..np {
        y[p * (n + 1)] = value;
    }
    // spread of the pathwise G + sum H dt; regression noise in y_0 is of
    // this order, while the martingale-corrected sum would hide it
    let pathwise: Vec<f64> = (0..np)
        .map(|p| g[p] + (0..n).map(|j| hvals[p * n + j]).sum::<f64>() * dt)
        .collect();
    let m = pathwise.iter().sum::<f64>() / np as f64;
    let var = pathwise.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (np.max(2) - 1) as f64;
    let z = zb.finish(ens, basis.is_markov());
    let diagnostics = Diagnostics {
        ratio_clamps: 0,
        z_clips: z.clip_count(),
    };
    Ok(BackwardSolution {
        y,
        z,
        value,
        stderr: (var / np as f64).sqrt(),
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{simulate_driftless, BrownianBatch, TimeGrid};
    use crate::problem::{ActionGrid, Bounds, ProblemFlags};
    use std::sync::Arc;

    fn lin() -> ControlProblem {
        ControlProblem::builder("lin", 1.0, vec![0.0], ActionGrid::uniform_box(&[-1.0], &[1.0], 0.02).unwrap())
            .drift(|_, _, u, out| out[0] = u[0])
            .running_cost(|_, _, u| 0.5 * u[0] * u[0])
            .terminal_reward(|p| p.current()[0])
            .flags(ProblemFlags {
                markovian: true,
                controlled_vol: false,
                action_only: true,
            })
            .bounds(Bounds {
                drift: 1.0,
                vol: 1.0,
                z_clip: 4.0,
            })
            .build()
            .unwrap()
    }

    fn constant_g(c: f64) -> ControlProblem {
        ControlProblem::builder("c", 1.0, vec![0.0], ActionGrid::uniform_box(&[-1.0], &[1.0], 0.5).unwrap())
            .terminal_reward(move |_| c)
            .bounds(Bounds {
                drift: 1.0,
                vol: 1.0,
                z_clip: 4.0,
            })
            .build()
            .unwrap()
    }

    fn ensemble(p: &ControlProblem, paths: usize, steps: usize, seed: u64) -> PathEnsemble {
        let g = TimeGrid::new(p.horizon(), steps).unwrap();
        let b = BrownianBatch::generate(paths, &g, 1, seed).unwrap();
        simulate_driftless(p, &g, Arc::new(b)).unwrap()
    }

    /// Markov field `Z = c` on every step.
    fn constant_z(c: f64, ens: &PathEnsemble) -> ZRepresentation {
        let n = ens.num_steps();
        let y: Vec<f64> = (0..ens.num_paths())
            .flat_map(|p| (0..=n).map(move |j| (p, j)))
            .map(|(p, j)| c * ens.state(p, j)[0])
            .collect();
        let mut z = estimate_Z(ens, &y, &RegressionBasis::markov(1), 4.0, None).unwrap();
        // replace the fitted values by the exact constant
        z.cache.as_mut().unwrap().values.iter_mut().for_each(|v| *v = c);
        z
    }

    #[test]
    fn functional_at_zero_policy_is_terminal() {
        let p = lin();
        let e = ensemble(&p, 100, 10, 1);
        let z = ZRepresentation::zero(10, 1, 4.0);
        let f = terminal_functional(&p, &e, &z).unwrap();
        for q in 0..100 {
            assert_eq!(f[q], e.state(q, 10)[0]);
        }
    }

    #[test]
    fn functional_under_unit_policy() {
        let p = lin();
        let e = ensemble(&p, 100, 10, 2);
        let z = constant_z(1.0, &e);
        let f = terminal_functional(&p, &e, &z).unwrap();
        for q in 0..100 {
            assert!((f[q] - (e.state(q, 10)[0] - 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_reward_functional_and_value() {
        let p = constant_g(1.7);
        let e = ensemble(&p, 200, 10, 3);
        let z = ZRepresentation::zero(10, 1, 4.0);
        assert!(terminal_functional(&p, &e, &z).unwrap().iter().all(|&v| v == 1.7));
        for phi in [1.0, 4.0, 1e6] {
            let s = explicit_iterate_value(&p, &e, &z, phi, &RegressionBasis::default()).unwrap();
            assert!((s.value - 1.7).abs() < 1e-12, "{}", s.value);
        }
    }

    #[test]
    fn step_zero_value_is_gaussian_mgf() {
        let p = lin();
        let e = ensemble(&p, 100_000, 50, 4);
        let z = ZRepresentation::zero(50, 1, 4.0);
        let s = explicit_iterate_value(&p, &e, &z, 1.0, &RegressionBasis::default()).unwrap();
        assert!((s.value - 0.5).abs() < 3.0 * s.stderr, "{} +- {}", s.value, s.stderr);
        for q in 0..10 {
            assert_eq!(s.y_at(q, 0), s.value);
            assert_eq!(s.y_at(q, 50), e.state(q, 50)[0]);
        }
        // Z^0 = 1 exactly for this iterate
        let vals = s.z.values_on(&e).unwrap();
        let mad = vals.iter().map(|v| (v - 1.0).abs()).sum::<f64>() / vals.len() as f64;
        assert!(mad < 0.1, "mean |Z - 1| = {mad}");
        assert_eq!(s.diagnostics.z_clips, 0);
    }

    #[test]
    fn penalized_iterate_under_unit_drift() {
        let p = lin();
        let e = ensemble(&p, 100_000, 50, 5);
        let z = constant_z(1.0, &e);
        for phi in [4.0, 16.0] {
            let s = explicit_iterate_value(&p, &e, &z, phi, &RegressionBasis::default()).unwrap();
            let exact = 0.5 + 0.5 / phi;
            assert!((s.value - exact).abs() < 3.0 * s.stderr, "{} vs {exact} +- {}", s.value, s.stderr);
        }
    }

    #[test]
    fn constant_y_has_zero_z() {
        let p = lin();
        let e = ensemble(&p, 1000, 10, 6);
        let y = vec![2.5; 1000 * 11];
        let z = estimate_Z(&e, &y, &RegressionBasis::default(), 4.0, None).unwrap();
        assert!(z.values_on(&e).unwrap().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn terminal_brownian_has_unit_z() {
        let p = lin();
        let e = ensemble(&p, 100_000, 20, 7);
        let y: Vec<f64> = (0..100_000)
            .flat_map(|q| std::iter::repeat(e.state(q, 20)[0]).take(21))
            .collect();
        let z = estimate_Z(&e, &y, &RegressionBasis::default(), 4.0, None).unwrap();
        let v = z.values_on(&e).unwrap();
        let mad = v.iter().map(|x| (x - 1.0).abs()).sum::<f64>() / v.len() as f64;
        assert!(mad < 0.1, "{mad}");
    }

    #[test]
    fn jensen_direction_over_phi_ladder() {
        let p = ControlProblem::builder("cos", 1.0, vec![0.0], ActionGrid::uniform_box(&[-1.0], &[1.0], 0.5).unwrap())
            .terminal_reward(|x| x.current()[0].cos())
            .build()
            .unwrap();
        let e = ensemble(&p, 20_000, 10, 8);
        let z = ZRepresentation::zero(10, 1, 4.0);
        let mean_g = (0..20_000).map(|q| e.state(q, 10)[0].cos()).sum::<f64>() / 20_000.0;
        let mut prev = f64::INFINITY;
        for phi in [1.0, 2.0, 4.0, 16.0, 1e3, 1e6] {
            let v = explicit_iterate_value(&p, &e, &z, phi, &RegressionBasis::default())
                .unwrap()
                .value;
            assert!(v >= mean_g - 1e-12);
            assert!(v <= prev + 1e-12);
            prev = v;
        }
        assert!((prev - mean_g).abs() < 1e-5);
    }

    #[test]
    fn weighted_estimator_handles_huge_phi() {
        let f = [1.0, 2.0, 3.0];
        let (v, _) = weighted_log_exp_mean(&f, &[0.0; 3], 1e12);
        assert!((v - 2.0).abs() < 1e-9);
        let (v, _) = weighted_log_exp_mean(&[0.0, 1000.0], &[0.0, 0.0], 1.0);
        assert!((v - (1000.0 - 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn reference_bsde_on_linear_problem() {
        let p = lin();
        let e = ensemble(&p, 100_000, 50, 9);
        let s = solve_reference_bsde(&p, &e, &RegressionBasis::default(), 2).unwrap();
        assert!((s.value - 0.5).abs() < 3.0 * s.stderr, "{} +- {}", s.value, s.stderr);
        let v = s.z.values_on(&e).unwrap();
        let mad = v.iter().map(|x| (x - 1.0).abs()).sum::<f64>() / v.len() as f64;
        assert!(mad < 0.1, "{mad}");
        // refitting Z on the solution reproduces it
        let again = estimate_Z(&e, &s.y, &RegressionBasis::default(), 4.0, None).unwrap();
        let w = again.values_on(&e).unwrap();
        let diff = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).sum::<f64>() / v.len() as f64;
        assert!(diff < 0.05, "{diff}");
    }

    #[test]
    fn reference_bsde_without_driver_is_sample_mean() {
        let p = ControlProblem::builder("g", 1.0, vec![0.0], ActionGrid::uniform_box(&[-1.0], &[1.0], 0.5).unwrap())
            .terminal_reward(|x| x.current()[0].powi(2))
            .bounds(Bounds {
                drift: 0.0,
                vol: 1.0,
                z_clip: 10.0,
            })
            .build()
            .unwrap();
        let e = ensemble(&p, 5000, 10, 10);
        let s = solve_reference_bsde(&p, &e, &RegressionBasis::default(), 2).unwrap();
        let mean = (0..5000).map(|q| e.state(q, 10)[0].powi(2)).sum::<f64>() / 5000.0;
        assert!((s.value - mean).abs() < 1e-6, "{} vs {mean}", s.value);
    }

    #[test]
    fn path_dependent_z_needs_its_ensemble() {
        let p = lin();
        let e = ensemble(&p, 2000, 10, 11);
        let basis = RegressionBasis {
            kind: crate::regression::BasisKind::PathDependent,
            degree: 1,
            ..RegressionBasis::default()
        };
        let z = ZRepresentation::zero(10, 1, 4.0);
        let s = explicit_iterate_value(&p, &e, &z, 1.0, &basis).unwrap();
        let mut out = [0.0];
        s.z.value(&e, 0, 3, &mut out).unwrap();
        let other = ensemble(&p, 2000, 10, 12);
        assert!(s.z.value(&other, 0, 3, &mut out).is_err());
    }
}
