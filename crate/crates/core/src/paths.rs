//! Brownian batches, Euler-Maruyama state paths and Girsanov log-weights.
//!
//! Every path owns its own random stream (`ChaCha8` seeded from the batch
//! seed, stream = path index), so a batch is bit-identical regardless of how
//! paths are split across threads.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{PiaError, Result};
use crate::problem::{ControlProblem, PathView};

static NEXT_ENSEMBLE_ID: AtomicU64 = AtomicU64::new(1);

/// Uniform grid `t_j = j T / N`, `j = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    num_steps: usize,
    horizon: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(PiaError::config("num_steps must be positive"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(PiaError::config("horizon must be positive and finite"));
        }
        Ok(Self { num_steps, horizon })
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.num_steps as f64
    }

    pub fn time(&self, j: usize) -> f64 {
        if j == self.num_steps {
            self.horizon
        } else {
            self.horizon * j as f64 / self.num_steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.num_steps).map(|j| self.time(j)).collect()
    }
}

/// Brownian increments `[path][step][component]`, each `N(0, step)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianBatch {
    num_paths: usize,
    num_steps: usize,
    dim: usize,
    step: f64,
    seed: u64,
    increments: Vec<f64>,
}

impl BrownianBatch {
    pub fn generate(num_paths: usize, grid: &TimeGrid, dim: usize, seed: u64) -> Result<Self> {
        if num_paths == 0 || dim == 0 {
            return Err(PiaError::config("num_paths and dim must be positive"));
        }
        let n = grid.num_steps();
        let sd = grid.step().sqrt();
        let mut increments = vec![0.0; num_paths * n * dim];
        increments
            .par_chunks_mut(n * dim)
            .enumerate()
            .for_each(|(p, row)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(p as u64);
                for v in row.iter_mut() {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    *v = g * sd;
                }
            });
        Ok(Self {
            num_paths,
            num_steps: n,
            dim,
            step: grid.step(),
            seed,
            increments,
        })
    }

    pub fn num_paths(&self) -> usize {
        self.num_paths
    }
    pub fn num_steps(&self) -> usize {
        self.num_steps
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn step(&self) -> f64 {
        self.step
    }

    /// `dB` of path `p` over `[t_j, t_{j+1}]`.
    pub fn increment(&self, p: usize, j: usize) -> &[f64] {
        let o = (p * self.num_steps + j) * self.dim;
        &self.increments[o..o + self.dim]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }
}

/// A `Z`-like feedback field `(j, t, path) -> R^d`, used to select actions
/// on freshly simulated paths.
pub trait FeedbackField: Sync {
    fn z_at(&self, step: usize, t: f64, path: PathView<'_>, out: &mut [f64]) -> Result<()>;
}

/// The field `Z = 0`.
pub struct ZeroField;

impl FeedbackField for ZeroField {
    fn z_at(&self, _: usize, _: f64, _: PathView<'_>, out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PathEnsemble {
    id: u64,
    grid: TimeGrid,
    brownian: Arc<BrownianBatch>,
    state_dim: usize,
    states: Vec<f64>,
    log_weights: Vec<f64>,
}

impl PathEnsemble {
    fn from_parts(grid: TimeGrid, brownian: Arc<BrownianBatch>, state_dim: usize, states: Vec<f64>) -> Self {
        let n = brownian.num_paths();
        Self {
            id: NEXT_ENSEMBLE_ID.fetch_add(1, Ordering::Relaxed),
            grid,
            brownian,
            state_dim,
            states,
            log_weights: vec![0.0; n],
        }
    }

    /// Process-unique identifier, used to key values cached on this ensemble.
    pub fn id(&self) -> u64 {
        self.id
    }
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn brownian(&self) -> &BrownianBatch {
        &self.brownian
    }
    pub fn num_paths(&self) -> usize {
        self.brownian.num_paths()
    }
    pub fn num_steps(&self) -> usize {
        self.grid.num_steps()
    }
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn noise_dim(&self) -> usize {
        self.brownian.dim()
    }
    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn set_log_weights(&mut self, w: Vec<f64>) -> Result<()> {
        if w.len() != self.num_paths() {
            return Err(PiaError::config("log-weight count differs from path count"));
        }
        if let Some(p) = w.iter().position(|v| !v.is_finite()) {
            return Err(PiaError::Simulation {
                path: p,
                step: self.num_steps(),
                reason: "non-finite log-weight".into(),
            });
        }
        self.log_weights = w;
        Ok(())
    }

    fn row(&self) -> usize {
        (self.num_steps() + 1) * self.state_dim
    }

    /// Whole state path of `p`.
    pub fn path(&self, p: usize) -> &[f64] {
        &self.states[p * self.row()..(p + 1) * self.row()]
    }

    /// `X_{t_j}` on path `p`.
    pub fn state(&self, p: usize, j: usize) -> &[f64] {
        let o = p * self.row() + j * self.state_dim;
        &self.states[o..o + self.state_dim]
    }

    /// Path prefix `X_{t_0}, ..., X_{t_j}`.
    pub fn prefix(&self, p: usize, j: usize) -> PathView<'_> {
        let o = p * self.row();
        PathView::new(&self.states[o..o + (j + 1) * self.state_dim], self.state_dim)
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// Writes the ensemble as a flat little-endian dump: magic `PIAE`,
    /// dimensions, seed, horizon, then increments, states and log-weights.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(8 * (self.states.len() + self.brownian.increments.len() + 8));
        out.extend_from_slice(b"PIAE");
        for v in [
            self.num_paths() as u64,
            self.num_steps() as u64,
            self.state_dim as u64,
            self.noise_dim() as u64,
            self.brownian.seed,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.grid.horizon().to_le_bytes());
        for arr in [&self.brownian.increments, &self.states, &self.log_weights] {
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn read_dump(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let bad = || PiaError::config("malformed ensemble dump");
        if buf.len() < 52 || &buf[..4] != b"PIAE" {
            return Err(bad());
        }
        let word = |i: usize| u64::from_le_bytes(buf[4 + 8 * i..12 + 8 * i].try_into().unwrap());
        let (np, ns, m, d, seed) = (
            word(0) as usize,
            word(1) as usize,
            word(2) as usize,
            word(3) as usize,
            word(4),
        );
        let horizon = f64::from_bits(word(5));
        let sizes = [np * ns * d, np * (ns + 1) * m, np];
        if buf.len() != 52 + 8 * sizes.iter().sum::<usize>() {
            return Err(bad());
        }
        let mut off = 52;
        let mut arrays = sizes.iter().map(|&len| {
            let v: Vec<f64> = buf[off..off + 8 * len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += 8 * len;
            v
        });
        let increments = arrays.next().unwrap();
        let states = arrays.next().unwrap();
        let log_weights = arrays.next().unwrap();
        let grid = TimeGrid::new(horizon, ns)?;
        let brownian = BrownianBatch {
            num_paths: np,
            num_steps: ns,
            dim: d,
            step: grid.step(),
            seed,
            increments,
        };
        let mut e = PathEnsemble::from_parts(grid, Arc::new(brownian), m, states);
        e.log_weights = log_weights;
        Ok(e)
    }
}

fn check_batch(problem: &ControlProblem, grid: &TimeGrid, brownian: &BrownianBatch) -> Result<()> {
    if brownian.num_steps() != grid.num_steps() || (brownian.step() - grid.step()).abs() > 1e-15 {
        return Err(PiaError::config("Brownian batch does not match the time grid"));
    }
    if brownian.dim() != problem.noise_dim() {
        return Err(PiaError::config("Brownian dimension differs from the problem noise dimension"));
    }
    if (grid.horizon() - problem.horizon()).abs() > 1e-12 {
        return Err(PiaError::config("time grid horizon differs from the problem horizon"));
    }
    Ok(())
}

/// How actions are chosen along a simulated path.
enum Feedback<'a> {
    /// Uncontrolled volatility, no drift.
    None,
    /// `sigma` at the selected action; optional drift `sigma b`.
    Field { field: &'a dyn FeedbackField, drift: bool },
}

fn simulate(
    problem: &ControlProblem,
    grid: &TimeGrid,
    brownian: Arc<BrownianBatch>,
    feedback: Feedback<'_>,
) -> Result<PathEnsemble> {
    check_batch(problem, grid, &brownian)?;
    let (m, d) = (problem.state_dim(), problem.noise_dim());
    let n = grid.num_steps();
    let dt = grid.step();
    let row = (n + 1) * m;
    let mut states = vec![0.0; brownian.num_paths() * row];
    let x0 = problem.initial_state();
    let results: Vec<Result<()>> = states
        .par_chunks_mut(row)
        .enumerate()
        .map(|(p, path)| {
            path[..m].copy_from_slice(x0);
            let mut s = vec![0.0; m * d];
            let mut z = vec![0.0; d];
            let mut b = vec![0.0; d];
            let mut dx = vec![0.0; m];
            for j in 0..n {
                let t = grid.time(j);
                let view = PathView::new(&path[..(j + 1) * m], m);
                let wrap = |e: PiaError| match e {
                    PiaError::NonFinite { coefficient, .. } | PiaError::BoundViolated { coefficient, .. } => {
                        PiaError::Simulation {
                            path: p,
                            step: j,
                            reason: format!("{coefficient}: {e}"),
                        }
                    }
                    other => other,
                };
                let db = brownian.increment(p, j);
                let mut noise = db.to_vec();
                match &feedback {
                    Feedback::None => problem.vol_at(t, view, 0, &mut s).map_err(wrap)?,
                    Feedback::Field { field, drift } => {
                        field.z_at(j, t, view, &mut z)?;
                        let a = problem.policy_action(t, view, &z).map_err(wrap)?.index;
                        problem.vol_at(t, view, a, &mut s).map_err(wrap)?;
                        if *drift {
                            problem.drift_at(t, view, a, &mut b).map_err(wrap)?;
                            for k in 0..d {
                                noise[k] += b[k] * dt;
                            }
                        }
                    }
                }
                for r in 0..m {
                    dx[r] = (0..d).map(|k| s[r * d + k] * noise[k]).sum();
                }
                let (done, rest) = path.split_at_mut((j + 1) * m);
                for r in 0..m {
                    let v = done[j * m + r] + dx[r];
                    if !v.is_finite() {
                        return Err(PiaError::Simulation {
                            path: p,
                            step: j,
                            reason: "non-finite state".into(),
                        });
                    }
                    rest[r] = v;
                }
            }
            Ok(())
        })
        .collect();
    results.into_iter().collect::<Result<Vec<()>>>()?;
    Ok(PathEnsemble::from_parts(*grid, brownian, m, states))
}

/// Euler-Maruyama for `dX = sigma(t, X) dB`, `X_0 = x0`. Log-weights start
/// at zero.
pub fn simulate_driftless(
    problem: &ControlProblem,
    grid: &TimeGrid,
    brownian: Arc<BrownianBatch>,
) -> Result<PathEnsemble> {
    if problem.flags().controlled_vol {
        return Err(PiaError::config(
            "driftless simulation needs an action-independent volatility",
        ));
    }
    simulate(problem, grid, brownian, Feedback::None)
}

/// Euler-Maruyama for `dX = sigma(t, X, u*(t, X, Z_prev)) dB`, the forward
/// law of a controlled-volatility iterate. The action maximises the
/// full Hamiltonian over all volatility levels at `Z_prev`.
pub fn simulate_controlled_forward(
    problem: &ControlProblem,
    grid: &TimeGrid,
    brownian: Arc<BrownianBatch>,
    z_prev: &dyn FeedbackField,
) -> Result<PathEnsemble> {
    simulate(
        problem,
        grid,
        brownian,
        Feedback::Field {
            field: z_prev,
            drift: false,
        },
    )
}

/// Euler-Maruyama for the drifted SDE
/// `dX = sigma(t, X, u*) (b(t, X, u*) dt + dB)` with `u* = u*(t, X, Z_prev)`.
pub fn simulate_feedback_drift(
    problem: &ControlProblem,
    grid: &TimeGrid,
    brownian: Arc<BrownianBatch>,
    z_prev: &dyn FeedbackField,
) -> Result<PathEnsemble> {
    simulate(
        problem,
        grid,
        brownian,
        Feedback::Field {
            field: z_prev,
            drift: true,
        },
    )
}

/// `log E(int theta . dB)_T` per path with left-point sums:
/// `sum theta_j . dB_j - 1/2 sum |theta_j|^2 dt`. `theta` is laid out as
/// `[path][step][component]`.
pub fn girsanov_log_weights(ensemble: &PathEnsemble, theta: &[f64]) -> Result<Vec<f64>> {
    let (n, d) = (ensemble.num_steps(), ensemble.noise_dim());
    if theta.len() != ensemble.num_paths() * n * d {
        return Err(PiaError::config("theta has the wrong shape"));
    }
    girsanov_log_weights_with(ensemble, |p, j, out| {
        let o = (p * n + j) * d;
        out.copy_from_slice(&theta[o..o + d]);
        Ok(())
    })
}

/// As [`girsanov_log_weights`] with `theta` produced on the fly.
pub fn girsanov_log_weights_with<F>(ensemble: &PathEnsemble, theta: F) -> Result<Vec<f64>>
where
    F: Fn(usize, usize, &mut [f64]) -> Result<()> + Sync,
{
    let (n, d) = (ensemble.num_steps(), ensemble.noise_dim());
    let dt = ensemble.grid().step();
    let bm = ensemble.brownian();
    (0..ensemble.num_paths())
        .into_par_iter()
        .map(|p| {
            let mut th = vec![0.0; d];
            let mut acc = 0.0;
            for j in 0..n {
                theta(p, j, &mut th)?;
                let db = bm.increment(p, j);
                for k in 0..d {
                    acc += th[k] * db[k] - 0.5 * th[k] * th[k] * dt;
                }
            }
            if acc.is_finite() {
                Ok(acc)
            } else {
                Err(PiaError::Simulation {
                    path: p,
                    step: n,
                    reason: "non-finite log-weight".into(),
                })
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{ActionGrid, Bounds, ProblemFlags};

    fn bm(vol: f64) -> ControlProblem {
        ControlProblem::builder("bm", 1.0, vec![0.0], ActionGrid::uniform_box(&[-1.0], &[1.0], 0.5).unwrap())
            .vol(move |_, _, _, out| out[0] = vol)
            .drift(|_, _, u, out| out[0] = u[0])
            .running_cost(|_, _, u| u[0] * u[0])
            .build()
            .unwrap()
    }

    fn batch(paths: usize, steps: usize, seed: u64) -> (TimeGrid, Arc<BrownianBatch>) {
        let g = TimeGrid::new(1.0, steps).unwrap();
        let b = BrownianBatch::generate(paths, &g, 1, seed).unwrap();
        (g, Arc::new(b))
    }

    #[test]
    fn grid_endpoints() {
        let g = TimeGrid::new(2.0, 3).unwrap();
        let t = g.times();
        assert_eq!(t.len(), 4);
        assert_eq!(t[0], 0.0);
        assert_eq!(t[3], 2.0);
        assert!(t.windows(2).all(|w| w[1] > w[0]));
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn identity_volatility_sums_increments() {
        let (g, b) = batch(50, 20, 3);
        let e = simulate_driftless(&bm(1.0), &g, b.clone()).unwrap();
        for p in 0..50 {
            let mut acc = 0.0;
            assert_eq!(e.state(p, 0), &[0.0]);
            for j in 0..20 {
                acc += b.increment(p, j)[0];
                assert_eq!(e.state(p, j + 1)[0], acc);
            }
        }
        assert!(e.log_weights().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn zero_volatility_freezes_state() {
        let (g, b) = batch(10, 5, 3);
        let e = simulate_driftless(&bm(0.0), &g, b).unwrap();
        assert!(e.states().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn terminal_variance_matches_horizon() {
        let n = 100_000;
        let (g, b) = batch(n, 10, 11);
        let e = simulate_driftless(&bm(1.0), &g, b).unwrap();
        let xt: Vec<f64> = (0..n).map(|p| e.state(p, 10)[0]).collect();
        let mean = xt.iter().sum::<f64>() / n as f64;
        let var = xt.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Var of the sample variance of a Gaussian is 2 sigma^4 / (n - 1)
        let se = (2.0 / (n - 1) as f64).sqrt();
        assert!((var - 1.0).abs() < 3.0 * se, "var {var}");
    }

    #[test]
    fn drift_and_cost_do_not_touch_driftless_paths() {
        let (g, b) = batch(20, 8, 5);
        let a = simulate_driftless(&bm(1.0), &g, b.clone()).unwrap();
        let other = ControlProblem::builder("x", 1.0, vec![0.0], ActionGrid::uniform_box(&[-1.0], &[1.0], 0.5).unwrap())
            .drift(|_, _, _, out| out[0] = 0.7)
            .running_cost(|_, _, _| 3.0)
            .build()
            .unwrap();
        let c = simulate_driftless(&other, &g, b).unwrap();
        assert_eq!(a.states(), c.states());
    }

    #[test]
    fn batches_reproduce_from_seed() {
        let (_, a) = batch(64, 16, 99);
        let (_, b) = batch(64, 16, 99);
        let (_, c) = batch(64, 16, 100);
        assert_eq!(a.increments(), b.increments());
        assert_ne!(a.increments(), c.increments());
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let (_, d) = pool.install(|| batch(64, 16, 99));
        assert_eq!(a.increments(), d.increments());
    }

    #[test]
    fn constant_theta_is_closed_form() {
        let (g, b) = batch(30, 25, 8);
        let e = simulate_driftless(&bm(1.0), &g, b.clone()).unwrap();
        let zero = girsanov_log_weights(&e, &vec![0.0; 30 * 25]).unwrap();
        assert!(zero.iter().all(|&w| w == 0.0));
        let c = 0.7;
        let w = girsanov_log_weights(&e, &vec![c; 30 * 25]).unwrap();
        for p in 0..30 {
            let bt = e.state(p, 25)[0];
            assert!((w[p] - (c * bt - 0.5 * c * c)).abs() < 1e-12);
        }
    }

    fn mean_density(w: &[f64]) -> (f64, f64) {
        let n = w.len() as f64;
        let e: Vec<f64> = w.iter().map(|v| v.exp()).collect();
        let m = e.iter().sum::<f64>() / n;
        let var = e.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }

    #[test]
    fn densities_have_unit_mean() {
        let n = 100_000;
        let (g, b) = batch(n, 20, 21);
        let e = simulate_driftless(&bm(1.0), &g, b).unwrap();
        let w = girsanov_log_weights(&e, &vec![1.0; n * 20]).unwrap();
        let (m, se) = mean_density(&w);
        assert!((m - 1.0).abs() < 3.0 * se, "{m} {se}");
        let w = girsanov_log_weights_with(&e, |p, j, out| {
            out[0] = e.state(p, j)[0].clamp(-1.0, 1.0);
            Ok(())
        })
        .unwrap();
        let (m, se) = mean_density(&w);
        assert!((m - 1.0).abs() < 3.0 * se, "{m} {se}");
    }

    fn vol_problem(kappa: f64) -> ControlProblem {
        ControlProblem::builder(
            "vol",
            1.0,
            vec![0.0],
            ActionGrid::uniform_box(&[-1.0, -1.0], &[1.0, 1.0], 0.05).unwrap(),
        )
        .drift(|_, _, u, out| out[0] = u[0])
        .vol(move |_, _, u, out| out[0] = 1.0 + kappa * u[1])
        .running_cost(|_, _, u| 0.5 * (u[0] * u[0] + u[1] * u[1]))
        .flags(ProblemFlags {
            markovian: true,
            controlled_vol: true,
            action_only: true,
        })
        .bounds(Bounds {
            drift: 1.0,
            vol: 1.5,
            z_clip: 4.0,
        })
        .build()
        .unwrap()
    }

    struct Const(f64);
    impl FeedbackField for Const {
        fn z_at(&self, _: usize, _: f64, _: PathView<'_>, out: &mut [f64]) -> Result<()> {
            out[0] = self.0;
            Ok(())
        }
    }

    #[test]
    fn controlled_forward_reduces_to_driftless() {
        let (g, b) = batch(40, 10, 4);
        let plain = simulate_driftless(&bm(1.0), &g, b.clone()).unwrap();
        let flat = simulate_controlled_forward(&vol_problem(0.0), &g, b.clone(), &Const(0.8)).unwrap();
        assert_eq!(plain.states(), flat.states());
        let zero = simulate_controlled_forward(&vol_problem(0.5), &g, b, &ZeroField).unwrap();
        assert_eq!(plain.states(), zero.states());
    }

    #[test]
    fn controlled_forward_quadratic_variation() {
        let n = 10_000;
        let (g, b) = batch(n, 10, 6);
        let p = vol_problem(0.5);
        let z = 1.0;
        let u = p.volatility_argmax(0.0, PathView::point(&[0.0]), &[z], None).unwrap().index;
        let sigma = 1.0 + 0.5 * p.actions().point(u)[1];
        let e = simulate_controlled_forward(&p, &g, b, &Const(z)).unwrap();
        let dt = g.step();
        for j in [0, 5, 9] {
            let sq: Vec<f64> = (0..n)
                .map(|q| (e.state(q, j + 1)[0] - e.state(q, j)[0]).powi(2))
                .collect();
            let m = sq.iter().sum::<f64>() / n as f64;
            let var = sq.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            let target = sigma * sigma * dt;
            assert!((m - target).abs() < 3.0 * (var / n as f64).sqrt(), "{m} vs {target}");
        }
    }

    #[test]
    fn dump_round_trip() {
        let (g, b) = batch(7, 4, 1);
        let mut e = simulate_driftless(&bm(1.0), &g, b).unwrap();
        e.set_log_weights((0..7).map(|i| i as f64 * 0.1).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("e.bin");
        e.write_dump(&f).unwrap();
        let r = PathEnsemble::read_dump(&f).unwrap();
        assert_eq!(r.states(), e.states());
        assert_eq!(r.log_weights(), e.log_weights());
        assert_eq!(r.brownian().increments(), e.brownian().increments());
        assert_eq!(r.brownian().seed(), 1);
    }

    #[test]
    fn non_finite_vol_reports_path_and_step() {
        let (g, b) = batch(3, 4, 1);
        let p = ControlProblem::builder("nan", 1.0, vec![0.0], ActionGrid::uniform_box(&[0.0], &[1.0], 1.0).unwrap())
            .vol(|t, _, _, out| out[0] = if t > 0.3 { f64::NAN } else { 1.0 })
            .build()
            .unwrap();
        match simulate_driftless(&p, &g, b) {
            Err(PiaError::Simulation { path: 0, step: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
