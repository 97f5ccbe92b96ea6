//! The iteration schemes end to end, with error metrics, rate fits and the
//! entropic cross-check.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PiaError, Result};
use crate::lsmc::{
    explicit_iterate_value_with, solve_reference_bsde, weighted_log_exp_mean, FrozenPolicy, ZRepresentation,
};
use crate::paths::{
    simulate_controlled_forward, simulate_driftless, simulate_feedback_drift, BrownianBatch, PathEnsemble,
    TimeGrid,
};
use crate::pde::{run_pia_pde, solve_hjb_reference, GridSpec};
use crate::problem::{ControlProblem, PenaltySchedule};
use crate::regression::RegressionBasis;
use crate::report::{ConvergenceReport, CrosscheckResult, IterationRecord, Provenance, RateFit, Reference};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeMode {
    McNonmarkovian,
    PdeMarkovian,
    McControlledVol,
}

impl SchemeMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SchemeMode::McNonmarkovian => "mc_nonmarkovian",
            SchemeMode::PdeMarkovian => "pde_markovian",
            SchemeMode::McControlledVol => "mc_controlled_vol",
        }
    }
}

/// Everything that determines a run. The worker count is deliberately not
/// part of it: results do not depend on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeConfig {
    pub mode: SchemeMode,
    pub schedule: PenaltySchedule,
    pub n_max: usize,
    pub num_paths: usize,
    pub num_steps: usize,
    /// Grid for PDE mode, and for the HJB reference in the other modes.
    pub grid: Option<GridSpec>,
    pub basis: RegressionBasis,
    pub seed: u64,
    /// Stop once `|V^n - V^{n-1}| < stop_tol`; zero disables.
    pub stop_tol: f64,
    /// Record wall-clock times (otherwise `wall_ms` is 0).
    pub timing: bool,
    /// Errors at or below this are excluded from the rate fit.
    pub floor: f64,
    /// Picard passes of the reference BSDE.
    pub picard_iters: usize,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            mode: SchemeMode::McNonmarkovian,
            schedule: PenaltySchedule::default(),
            n_max: 3,
            num_paths: 100_000,
            num_steps: 100,
            grid: None,
            basis: RegressionBasis::default(),
            seed: 42,
            stop_tol: 0.0,
            timing: false,
            floor: 1e-3,
            picard_iters: 2,
        }
    }
}

impl SchemeConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate(self.n_max)?;
        self.basis.validate()?;
        if !(self.stop_tol >= 0.0 && self.stop_tol.is_finite()) {
            return Err(PiaError::config("stop_tol must be a finite number >= 0"));
        }
        if !(self.floor >= 0.0 && self.floor.is_finite()) {
            return Err(PiaError::config("floor must be a finite number >= 0"));
        }
        match self.mode {
            SchemeMode::PdeMarkovian => {
                let g = self
                    .grid
                    .ok_or_else(|| PiaError::config("pde_markovian mode needs a grid"))?;
                g.validate()?;
            }
            _ => {
                if self.num_paths < 2 {
                    return Err(PiaError::config("num_paths must be at least 2"));
                }
                if self.num_steps == 0 {
                    return Err(PiaError::config("num_steps must be at least 1"));
                }
                if let Some(g) = self.grid {
                    g.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Checks the mode against the problem flags.
    pub fn validate_for(&self, problem: &ControlProblem) -> Result<()> {
        self.validate()?;
        let f = problem.flags();
        match self.mode {
            SchemeMode::McNonmarkovian if f.controlled_vol => Err(PiaError::config(
                "mc_nonmarkovian mode needs uncontrolled volatility; use mc_controlled_vol",
            )),
            SchemeMode::PdeMarkovian if f.controlled_vol || !f.markovian => Err(PiaError::config(
                "pde_markovian mode needs a Markovian problem with uncontrolled volatility",
            )),
            SchemeMode::McControlledVol if !f.controlled_vol => Err(PiaError::config(
                "mc_controlled_vol mode needs a controlled-volatility problem",
            )),
            SchemeMode::McControlledVol if !self.basis.is_markov() => Err(PiaError::config(
                "mc_controlled_vol mode needs a Markov basis (Z feeds the forward simulation)",
            )),
            _ => Ok(()),
        }
    }
}

/// Lipschitz constants for the controlled-volatility smallness check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolLipschitz {
    pub g: f64,
    pub sigma_u: f64,
    pub ustar_x: f64,
    pub sigma_x: f64,
}

/// Known facts about a problem that a run may use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnownSolution {
    pub reference: Option<Reference>,
    /// Constant optimal control, when known.
    pub optimal_control: Option<Vec<f64>>,
    pub lipschitz: Option<VolLipschitz>,
}

/// A Monte-Carlo run: the report, the fitted `Z^0..Z^n` (Markov fits only,
/// no cached values) and the error that ended it early, if any.
#[derive(Debug)]
pub struct McRun {
    pub report: ConvergenceReport,
    pub z: Vec<ZRepresentation>,
    pub smallness: Option<bool>,
    pub abort: Option<PiaError>,
}

/// Least-squares slope of `log |e_n|` against `n` over the first
/// contiguous window with `|e_n| > floor`.
pub fn fit_rate(errors: &[f64], floor: f64) -> Result<RateFit> {
    let start = errors
        .iter()
        .position(|e| e.abs() > floor)
        .ok_or_else(|| PiaError::InsufficientData("no error above the floor".into()))?;
    let len = errors[start..].iter().take_while(|e| e.abs() > floor).count();
    if len < 3 {
        return Err(PiaError::InsufficientData(format!(
            "{len} usable error values above the floor, need 3"
        )));
    }
    let xs: Vec<f64> = (start..start + len).map(|n| n as f64).collect();
    let ys: Vec<f64> = errors[start..start + len].iter().map(|e| e.abs().ln()).collect();
    let mx = xs.iter().sum::<f64>() / len as f64;
    let my = ys.iter().sum::<f64>() / len as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(RateFit {
        slope: sxy / sxx,
        window: (start, start + len - 1),
    })
}

fn rate_from(records: &[IterationRecord], floor: f64) -> Option<RateFit> {
    let errs: Option<Vec<f64>> = records.iter().map(|r| r.err).collect();
    errs.and_then(|e| fit_rate(&e, floor).ok())
}

/// Selected actions for `Z` at every `(path, step)`, `[path][step]`.
fn control_indices(problem: &ControlProblem, ens: &PathEnsemble, z: &ZRepresentation) -> Result<Vec<u32>> {
    let (n, d) = (ens.num_steps(), problem.noise_dim());
    let rows: Vec<Result<Vec<u32>>> = (0..ens.num_paths())
        .into_par_iter()
        .map(|p| {
            let mut zz = vec![0.0; d];
            (0..n)
                .map(|j| {
                    z.value(ens, p, j, &mut zz)?;
                    let t = ens.grid().time(j);
                    Ok(problem.policy_action(t, ens.prefix(p, j), &zz)?.index as u32)
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(ens.num_paths() * n);
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Path average of `sum_j |a_j - b_j|^2 dt` for `[path][step][component]`
/// arrays.
fn path_l2(a: &[f64], b: &[f64], np: usize, n: usize, d: usize, dt: f64) -> f64 {
    let row = n * d;
    (0..np)
        .map(|p| sq_dist(&a[p * row..(p + 1) * row], &b[p * row..(p + 1) * row]) * dt)
        .sum::<f64>()
        / np as f64
}

fn control_distance(problem: &ControlProblem, a: &[u32], b: &[u32], np: usize, n: usize, dt: f64) -> f64 {
    let grid = problem.actions();
    (0..np)
        .map(|p| {
            (0..n)
                .map(|j| {
                    let i = p * n + j;
                    sq_dist(grid.point(a[i] as usize), grid.point(b[i] as usize))
                })
                .sum::<f64>()
                * dt
        })
        .sum::<f64>()
        / np as f64
}

/// Mean and standard error over paths of the time average of
/// `|u - nu*|^2`.
fn control_error(problem: &ControlProblem, acts: &[u32], target: &[f64], np: usize, n: usize) -> (f64, f64) {
    let grid = problem.actions();
    let per: Vec<f64> = (0..np)
        .map(|p| (0..n).map(|j| sq_dist(grid.point(acts[p * n + j] as usize), target)).sum::<f64>() / n as f64)
        .collect();
    let m = per.iter().sum::<f64>() / np as f64;
    let var = per.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (np - 1) as f64;
    (m, (var / np as f64).sqrt())
}

/// The per-iteration state both Monte-Carlo schemes share.
struct Ladder<'a> {
    problem: &'a ControlProblem,
    config: &'a SchemeConfig,
    reference: Reference,
    target: Option<Vec<f64>>,
    records: Vec<IterationRecord>,
    z: Vec<ZRepresentation>,
    warnings: Vec<String>,
}

impl<'a> Ladder<'a> {
    /// One iterate on `ens` given `Z^{n-1}`; returns `Z^n` and whether to
    /// stop.
    fn step(&mut self, n: usize, ens: &PathEnsemble, z_prev: &ZRepresentation) -> Result<(ZRepresentation, bool)> {
        let clock = Instant::now();
        let (np, ns, d) = (ens.num_paths(), ens.num_steps(), self.problem.noise_dim());
        let dt = ens.grid().step();
        let phi = self.config.schedule.phi(n);
        let policy = FrozenPolicy::evaluate(self.problem, ens, z_prev)?;
        let sol = explicit_iterate_value_with(self.problem, ens, &policy, phi, &self.config.basis)?;
        let zn = sol.z.values_on(ens)?;
        let zp = z_prev.values_on(ens)?;
        let acts = control_indices(self.problem, ens, &sol.z)?;
        let (control_error, control_error_stderr) = match &self.target {
            Some(t) => {
                let (m, s) = control_error(self.problem, &acts, t, np, ns);
                (Some(m), Some(s))
            }
            None => (None, None),
        };
        let wall_ms = if self.config.timing {
            clock.elapsed().as_millis() as u64
        } else {
            0
        };
        if sol.diagnostics.ratio_clamps > 0 {
            self.warnings.push(format!(
                "n={n}: {} fitted ratios raised to the floor",
                sol.diagnostics.ratio_clamps
            ));
        }
        self.records.push(IterationRecord {
            n,
            phi_n: phi,
            value: sol.value,
            stderr: Some(sol.stderr),
            err: self.reference.value.map(|r| sol.value - r),
            z_distance: path_l2(&zn, &zp, np, ns, d, dt),
            control_distance: control_distance(self.problem, &acts, &policy.actions, np, ns, dt),
            wall_ms,
            control_error,
            control_error_stderr,
            sup_gap: None,
            z_clips: sol.diagnostics.z_clips,
            ratio_clamps: sol.diagnostics.ratio_clamps,
        });
        let stop = n >= 1 && self.config.stop_tol > 0.0 && {
            let k = self.records.len();
            (self.records[k - 1].value - self.records[k - 2].value).abs() < self.config.stop_tol
        };
        self.z.push(sol.z.clone().without_cache());
        Ok((sol.z, stop))
    }

    fn finish(self, abort: Option<PiaError>, smallness: Option<bool>) -> Result<McRun> {
        let abort = match abort {
            Some(e) if self.records.is_empty() => return Err(e),
            a => a,
        };
        let fitted_rate = rate_from(&self.records, self.config.floor);
        Ok(McRun {
            report: ConvergenceReport {
                mode: self.config.mode.as_str().into(),
                records: self.records,
                reference: self.reference,
                fitted_rate,
                crosschecks: vec![],
                partial: abort.is_some(),
                warnings: self.warnings,
            },
            z: self.z,
            smallness,
            abort,
        })
    }
}

fn brownian(problem: &ControlProblem, config: &SchemeConfig) -> Result<(TimeGrid, Arc<BrownianBatch>)> {
    let grid = TimeGrid::new(problem.horizon(), config.num_steps)?;
    let bm = BrownianBatch::generate(config.num_paths, &grid, problem.noise_dim(), config.seed)?;
    Ok((grid, Arc::new(bm)))
}

/// Scheme of the uncontrolled-volatility case on one driftless ensemble:
/// each iterate reweights it with the frozen policy of the previous `Z`.
///
/// Without a known reference the reference BSDE on the same ensemble
/// supplies one.
pub fn run_pia_mc(problem: &ControlProblem, config: &SchemeConfig, known: &KnownSolution) -> Result<McRun> {
    if config.mode != SchemeMode::McNonmarkovian {
        return Err(PiaError::config("run_pia_mc needs mode mc_nonmarkovian"));
    }
    config.validate_for(problem)?;
    let (grid, bm) = brownian(problem, config)?;
    let ens = simulate_driftless(problem, &grid, bm)?;
    let reference = match &known.reference {
        Some(r) => r.clone(),
        None => {
            let r = solve_reference_bsde(problem, &ens, &config.basis, config.picard_iters)?;
            Reference {
                value: Some(r.value),
                provenance: Provenance::BsdeOracle,
                tolerance: Some(3.0 * r.stderr),
            }
        }
    };
    let mut ladder = Ladder {
        problem,
        config,
        reference,
        target: known.optimal_control.clone(),
        records: vec![],
        z: vec![],
        warnings: vec![],
    };
    let mut z_prev = ZRepresentation::zero(grid.num_steps(), problem.noise_dim(), problem.bounds().z_clip);
    let mut abort = None;
    for n in 0..=config.n_max {
        match ladder.step(n, &ens, &z_prev) {
            Ok((z, stop)) => {
                z_prev = z;
                if stop {
                    break;
                }
            }
            Err(e) => {
                abort = Some(e);
                break;
            }
        }
    }
    ladder.finish(abort, None)
}

/// Scheme of the controlled-volatility case: every iterate re-simulates the
/// forward law under `u*(Z^{n-1})` from the same Brownian batch.
///
/// The reference comes from `known`, else from the per-node argmax HJB grid
/// when the configuration carries a grid, else none.
pub fn run_pia_vol(problem: &ControlProblem, config: &SchemeConfig, known: &KnownSolution) -> Result<McRun> {
    if config.mode != SchemeMode::McControlledVol {
        return Err(PiaError::config("run_pia_vol needs mode mc_controlled_vol"));
    }
    config.validate_for(problem)?;
    let mut warnings = vec![];
    let smallness = known.lipschitz.map(|l| {
        let ok = problem.check_vol_smallness(l.g, l.sigma_u, l.ustar_x, l.sigma_x);
        if !ok {
            log::warn!("volatility smallness condition does not hold; the rate is not guaranteed");
            warnings.push("volatility smallness condition does not hold".to_string());
        }
        ok
    });
    let reference = match (&known.reference, config.grid) {
        (Some(r), _) => r.clone(),
        (None, Some(g)) if problem.state_dim() == 1 && problem.noise_dim() == 1 && problem.flags().markovian => {
            let h = solve_hjb_reference(problem, &g, 10)?;
            Reference {
                value: Some(h.v.interpolate(0, problem.initial_state()[0])),
                provenance: Provenance::PdeOracle,
                tolerance: None,
            }
        }
        _ => Reference::none(),
    };
    let (grid, bm) = brownian(problem, config)?;
    let mut ladder = Ladder {
        problem,
        config,
        reference,
        target: known.optimal_control.clone(),
        records: vec![],
        z: vec![],
        warnings,
    };
    let mut z_prev = ZRepresentation::zero(grid.num_steps(), problem.noise_dim(), problem.bounds().z_clip);
    let mut abort = None;
    for n in 0..=config.n_max {
        let out = simulate_controlled_forward(problem, &grid, bm.clone(), &z_prev)
            .and_then(|ens| ladder.step(n, &ens, &z_prev));
        match out {
            Ok((z, stop)) => {
                z_prev = z.without_cache();
                if stop {
                    break;
                }
            }
            Err(e) => {
                abort = Some(e);
                break;
            }
        }
    }
    ladder.finish(abort, smallness)
}

/// Grid scheme; see [`run_pia_pde`]. The reference is the one in `known`
/// or the HJB solution on the same grid.
pub fn run_pde(problem: &ControlProblem, config: &SchemeConfig, known: &KnownSolution) -> Result<ConvergenceReport> {
    if config.mode != SchemeMode::PdeMarkovian {
        return Err(PiaError::config("run_pde needs mode pde_markovian"));
    }
    config.validate_for(problem)?;
    let spec = config.grid.expect("validated");
    let mut run = run_pia_pde(
        problem,
        &spec,
        &config.schedule,
        config.n_max,
        known.reference.clone(),
        config.floor,
    )?;
    if config.stop_tol > 0.0 {
        let recs = &run.report.records;
        if let Some(k) = (1..recs.len()).find(|&k| (recs[k].value - recs[k - 1].value).abs() < config.stop_tol) {
            run.report.records.truncate(k + 1);
            run.report.fitted_rate = rate_from(&run.report.records, config.floor);
        }
    }
    Ok(run.report)
}

/// Runs the scheme selected by `config.mode`.
pub fn run(problem: &ControlProblem, config: &SchemeConfig, known: &KnownSolution) -> Result<McRun> {
    match config.mode {
        SchemeMode::McNonmarkovian => run_pia_mc(problem, config, known),
        SchemeMode::McControlledVol => run_pia_vol(problem, config, known),
        SchemeMode::PdeMarkovian => Ok(McRun {
            report: run_pde(problem, config, known)?,
            z: vec![],
            smallness: None,
            abort: None,
        }),
    }
}

/// Stream offset for the independent batch of the cross-check.
const CROSSCHECK_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

/// `V~^n` from paths of the drifted SDE under `u*(Z^{n-1})`, evaluated
/// without reweighting, against `V^n` from [`run_pia_mc`]. The drifted
/// batch uses an independent seed; the standard errors add in quadrature.
pub fn entropic_crosscheck(
    problem: &ControlProblem,
    config: &SchemeConfig,
    n: usize,
    known: &KnownSolution,
) -> Result<CrosscheckResult> {
    if problem.flags().controlled_vol {
        return Err(PiaError::config("the entropic cross-check needs uncontrolled volatility"));
    }
    if !config.basis.is_markov() {
        return Err(PiaError::config("the entropic cross-check needs a Markov basis"));
    }
    let cfg = SchemeConfig {
        mode: SchemeMode::McNonmarkovian,
        n_max: n,
        stop_tol: 0.0,
        ..config.clone()
    };
    let known = KnownSolution {
        reference: Some(known.reference.clone().unwrap_or_else(Reference::none)),
        ..known.clone()
    };
    let run = run_pia_mc(problem, &cfg, &known)?;
    if let Some(e) = run.abort {
        return Err(e);
    }
    let rec = &run.report.records[n];
    let z_prev = if n == 0 {
        ZRepresentation::zero(cfg.num_steps, problem.noise_dim(), problem.bounds().z_clip)
    } else {
        run.z[n - 1].clone()
    };
    let grid = TimeGrid::new(problem.horizon(), cfg.num_steps)?;
    let bm = BrownianBatch::generate(cfg.num_paths, &grid, problem.noise_dim(), cfg.seed ^ CROSSCHECK_SEED)?;
    let ens = simulate_feedback_drift(problem, &grid, Arc::new(bm), &z_prev)?;
    let policy = FrozenPolicy::evaluate(problem, &ens, &z_prev)?;
    let f = policy.functional();
    let (v_tilde, stderr_tilde) = weighted_log_exp_mean(&f, &vec![0.0; f.len()], rec.phi_n);
    let stderr_n = rec.stderr.unwrap_or(0.0);
    let combined = stderr_tilde.hypot(stderr_n);
    let gap = (v_tilde - rec.value).abs();
    Ok(CrosscheckResult {
        n,
        v_tilde,
        v_n: rec.value,
        gap,
        stderr_tilde,
        stderr_n,
        combined_stderr: combined,
        passed: gap <= 3.0 * combined,
    })
}
