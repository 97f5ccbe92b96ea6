//! Control problems, Hamiltonians and their grid argmax selectors.
//!
//! A [`ControlProblem`] bundles the horizon, the initial point, a finite
//! [`ActionGrid`] and the four coefficient callables (drift `b`, volatility
//! `sigma`, running cost `L`, terminal reward `G`). Coefficients receive the
//! time, the state path up to the current time, and the action. Markovian
//! problems only look at [`PathView::current`].
//!
//! The reduced Hamiltonian is `h(t, x, z, u) = b(t, x, u) . z - L(t, x, u)`
//! and its grid maximiser is the selector `u*` used by every solver.

mod actions;
mod schedule;

use std::sync::Arc;

pub use actions::ActionGrid;
pub(crate) use actions::Envelope;
pub use schedule::PenaltySchedule;

use crate::error::{PiaError, Result};

/// Read-only view of a state path prefix `x_0, ..., x_j` (row-major, one
/// row of `dim` reals per time point).
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    states: &'a [f64],
    dim: usize,
}

impl<'a> PathView<'a> {
    pub fn new(states: &'a [f64], dim: usize) -> Self {
        debug_assert!(dim > 0 && states.len() % dim == 0 && !states.is_empty());
        Self { states, dim }
    }

    /// A one-point path, enough for Markovian coefficients.
    pub fn point(state: &'a [f64]) -> Self {
        Self::new(state, state.len())
    }

    pub fn current(&self) -> &'a [f64] {
        &self.states[self.states.len() - self.dim..]
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn at(&self, i: usize) -> &'a [f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// `b(t, x, u)` written into an `R^d` buffer.
pub type DriftFn = dyn Fn(f64, PathView<'_>, &[f64], &mut [f64]) + Send + Sync;
/// `sigma(t, x, u)` written row-major into an `m x d` buffer.
pub type VolFn = dyn Fn(f64, PathView<'_>, &[f64], &mut [f64]) + Send + Sync;
/// `L(t, x, u)`.
pub type CostFn = dyn Fn(f64, PathView<'_>, &[f64]) -> f64 + Send + Sync;
/// `G(x)` on the whole path.
pub type TerminalFn = dyn Fn(PathView<'_>) -> f64 + Send + Sync;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ProblemFlags {
    /// Coefficients read only the current state.
    pub markovian: bool,
    /// `sigma` depends on the action.
    pub controlled_vol: bool,
    /// `b`, `sigma` and `L` depend on the action only (not on `t` or the
    /// path). Enables the tabulated fast path.
    pub action_only: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    /// Upper bound on `|b|`.
    pub drift: f64,
    /// Upper bound on the Frobenius norm of `sigma`.
    pub vol: f64,
    /// Clip applied to every estimated `Z`.
    pub z_clip: f64,
}

/// Result of a grid argmax: the attained value and the grid index of the
/// maximiser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub value: f64,
    pub index: usize,
}

#[derive(Debug)]
struct ActionTable {
    drift: Vec<f64>,
    cost: Vec<f64>,
    vol: Vec<f64>,
    vol_drift: Vec<f64>,
    covariance: Vec<f64>,
    envelope: Option<Envelope>,
}

#[derive(Clone)]
pub struct ControlProblem {
    name: String,
    horizon: f64,
    state_dim: usize,
    noise_dim: usize,
    initial_state: Vec<f64>,
    actions: ActionGrid,
    drift: Arc<DriftFn>,
    vol: Arc<VolFn>,
    running_cost: Arc<CostFn>,
    terminal: Arc<TerminalFn>,
    flags: ProblemFlags,
    bounds: Bounds,
    level_tol: f64,
    table: Option<Arc<ActionTable>>,
}

impl std::fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlProblem")
            .field("name", &self.name)
            .field("horizon", &self.horizon)
            .field("state_dim", &self.state_dim)
            .field("noise_dim", &self.noise_dim)
            .field("initial_state", &self.initial_state)
            .field("actions", &self.actions.len())
            .field("flags", &self.flags)
            .field("bounds", &self.bounds)
            .finish()
    }
}

pub struct ControlProblemBuilder {
    name: String,
    horizon: f64,
    initial_state: Vec<f64>,
    noise_dim: usize,
    actions: ActionGrid,
    drift: Option<Arc<DriftFn>>,
    vol: Option<Arc<VolFn>>,
    running_cost: Option<Arc<CostFn>>,
    terminal: Option<Arc<TerminalFn>>,
    flags: ProblemFlags,
    bounds: Bounds,
    level_tol: Option<f64>,
}

impl ControlProblemBuilder {
    pub fn noise_dim(mut self, d: usize) -> Self {
        self.noise_dim = d;
        self
    }

    pub fn drift(
        mut self,
        f: impl Fn(f64, PathView<'_>, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.drift = Some(Arc::new(f));
        self
    }

    pub fn vol(
        mut self,
        f: impl Fn(f64, PathView<'_>, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.vol = Some(Arc::new(f));
        self
    }

    pub fn running_cost(
        mut self,
        f: impl Fn(f64, PathView<'_>, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.running_cost = Some(Arc::new(f));
        self
    }

    pub fn terminal_reward(mut self, f: impl Fn(PathView<'_>) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal = Some(Arc::new(f));
        self
    }

    pub fn flags(mut self, flags: ProblemFlags) -> Self {
        self.flags = flags;
        self
    }

    pub fn bounds(mut self, bounds: Bounds) -> Self {
        self.bounds = bounds;
        self
    }

    /// Overrides the default volatility level tolerance.
    pub fn level_tol(mut self, tol: f64) -> Self {
        self.level_tol = Some(tol);
        self
    }

    pub fn build(self) -> Result<ControlProblem> {
        let m = self.initial_state.len();
        let d = self.noise_dim;
        if m == 0 || d == 0 {
            return Err(PiaError::config("state and noise dimensions must be positive"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(PiaError::config("horizon must be positive and finite"));
        }
        if self.initial_state.iter().any(|v| !v.is_finite()) {
            return Err(PiaError::config("initial state must be finite"));
        }
        let Bounds { drift, vol, z_clip } = self.bounds;
        if !(drift >= 0.0 && vol >= 0.0 && z_clip > 0.0) {
            return Err(PiaError::config(
                "bounds must satisfy drift >= 0, vol >= 0 and z_clip > 0",
            ));
        }
        if self.flags.controlled_vol && m != d {
            return Err(PiaError::config(
                "controlled volatility requires state and noise dimensions to agree",
            ));
        }
        let vol_fn = match self.vol {
            Some(v) => v,
            None if m == d => Arc::new(move |_: f64, _: PathView<'_>, _: &[f64], out: &mut [f64]| {
                out.fill(0.0);
                for i in 0..m {
                    out[i * m + i] = 1.0;
                }
            }) as Arc<VolFn>,
            None => return Err(PiaError::config("a volatility function is required when m != d")),
        };
        let mut problem = ControlProblem {
            name: self.name,
            horizon: self.horizon,
            state_dim: m,
            noise_dim: d,
            initial_state: self.initial_state,
            actions: self.actions,
            drift: self
                .drift
                .unwrap_or_else(|| Arc::new(|_: f64, _: PathView<'_>, _: &[f64], out: &mut [f64]| out.fill(0.0))),
            vol: vol_fn,
            running_cost: self
                .running_cost
                .unwrap_or_else(|| Arc::new(|_: f64, _: PathView<'_>, _: &[f64]| 0.0)),
            terminal: self.terminal.unwrap_or_else(|| Arc::new(|_: PathView<'_>| 0.0)),
            flags: self.flags,
            bounds: self.bounds,
            level_tol: 0.0,
            table: None,
        };
        if problem.flags.action_only {
            problem.table = Some(Arc::new(problem.tabulate()?));
        }
        problem.level_tol = match self.level_tol {
            Some(t) if t >= 0.0 => t,
            Some(_) => return Err(PiaError::config("level_tol must be nonnegative")),
            None => problem.default_level_tol()?,
        };
        Ok(problem)
    }
}

fn frobenius(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ControlProblem {
    pub fn builder(
        name: impl Into<String>,
        horizon: f64,
        initial_state: Vec<f64>,
        actions: ActionGrid,
    ) -> ControlProblemBuilder {
        let d = initial_state.len();
        ControlProblemBuilder {
            name: name.into(),
            horizon,
            initial_state,
            noise_dim: d,
            actions,
            drift: None,
            vol: None,
            running_cost: None,
            terminal: None,
            flags: ProblemFlags {
                markovian: true,
                ..ProblemFlags::default()
            },
            bounds: Bounds {
                drift: f64::INFINITY,
                vol: f64::INFINITY,
                z_clip: 1e6,
            },
            level_tol: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    pub fn action_dim(&self) -> usize {
        self.actions.dim()
    }
    pub fn initial_state(&self) -> &[f64] {
        &self.initial_state
    }
    pub fn actions(&self) -> &ActionGrid {
        &self.actions
    }
    pub fn flags(&self) -> ProblemFlags {
        self.flags
    }
    pub fn bounds(&self) -> Bounds {
        self.bounds
    }
    pub fn level_tol(&self) -> f64 {
        self.level_tol
    }

    fn tabulate(&self) -> Result<ActionTable> {
        let (m, d) = (self.state_dim, self.noise_dim);
        let k = self.actions.len();
        let x0 = PathView::point(&self.initial_state);
        let mut table = ActionTable {
            drift: vec![0.0; k * d],
            cost: vec![0.0; k],
            vol: vec![0.0; k * m * d],
            vol_drift: vec![0.0; k * m],
            covariance: vec![0.0; k * m * m],
            envelope: None,
        };
        for (i, u) in self.actions.iter().enumerate() {
            let b = &mut table.drift[i * d..(i + 1) * d];
            (self.drift)(0.0, x0, u, b);
            self.check_vector("drift", b, self.bounds.drift, 0.0)?;
            let s = &mut table.vol[i * m * d..(i + 1) * m * d];
            (self.vol)(0.0, x0, u, s);
            self.check_vector("vol", s, self.bounds.vol, 0.0)?;
            let l = (self.running_cost)(0.0, x0, u);
            if !l.is_finite() {
                return Err(PiaError::NonFinite {
                    coefficient: "running_cost",
                    t: 0.0,
                });
            }
            table.cost[i] = l;
            let b = &table.drift[i * d..(i + 1) * d];
            let s = &table.vol[i * m * d..(i + 1) * m * d];
            for r in 0..m {
                table.vol_drift[i * m + r] = dot(&s[r * d..(r + 1) * d], b);
                for c in 0..m {
                    table.covariance[i * m * m + r * m + c] =
                        dot(&s[r * d..(r + 1) * d], &s[c * d..(c + 1) * d]);
                }
            }
        }
        let intercepts: Vec<f64> = table.cost.iter().map(|l| -l).collect();
        if self.flags.controlled_vol && m == 1 {
            table.envelope = Some(Envelope::new(&table.vol_drift, &intercepts));
        } else if !self.flags.controlled_vol && d == 1 {
            table.envelope = Some(Envelope::new(&table.drift, &intercepts));
        }
        Ok(table)
    }

    /// Half the smallest gap between distinct values of `sigma sigma^T`
    /// over the grid, evaluated at `(0, x0)`.
    fn default_level_tol(&self) -> Result<f64> {
        if !self.flags.controlled_vol {
            return Ok(0.0);
        }
        let levels = self.covariances(0.0, PathView::point(&self.initial_state))?;
        let m2 = self.state_dim * self.state_dim;
        let k = self.actions.len();
        let mut gap = f64::INFINITY;
        for i in 0..k {
            for j in (i + 1)..k {
                let a = &levels[i * m2..(i + 1) * m2];
                let b = &levels[j * m2..(j + 1) * m2];
                let dd: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                if dd > 1e-12 {
                    gap = gap.min(dd);
                }
            }
        }
        Ok(if gap.is_finite() { 0.5 * gap } else { 1e-9 })
    }

    fn check_vector(&self, name: &'static str, v: &[f64], bound: f64, t: f64) -> Result<()> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(PiaError::NonFinite { coefficient: name, t });
        }
        let norm = frobenius(v);
        if norm > bound * (1.0 + 1e-9) + 1e-12 {
            return Err(PiaError::BoundViolated {
                coefficient: name,
                bound,
                norm,
                t,
            });
        }
        Ok(())
    }

    /// `b(t, path, u_index)` into `out`.
    pub fn drift_at(&self, t: f64, path: PathView<'_>, action: usize, out: &mut [f64]) -> Result<()> {
        if let Some(tab) = &self.table {
            let d = self.noise_dim;
            out.copy_from_slice(&tab.drift[action * d..(action + 1) * d]);
            return Ok(());
        }
        (self.drift)(t, path, self.actions.point(action), out);
        self.check_vector("drift", out, self.bounds.drift, t)
    }

    /// `sigma(t, path, u_index)` (row-major `m x d`) into `out`. The action
    /// is ignored for uncontrolled volatility.
    pub fn vol_at(&self, t: f64, path: PathView<'_>, action: usize, out: &mut [f64]) -> Result<()> {
        if let Some(tab) = &self.table {
            let md = self.state_dim * self.noise_dim;
            out.copy_from_slice(&tab.vol[action * md..(action + 1) * md]);
            return Ok(());
        }
        let a = if self.flags.controlled_vol { action } else { 0 };
        (self.vol)(t, path, self.actions.point(a), out);
        self.check_vector("vol", out, self.bounds.vol, t)
    }

    pub fn cost_at(&self, t: f64, path: PathView<'_>, action: usize) -> Result<f64> {
        if let Some(tab) = &self.table {
            return Ok(tab.cost[action]);
        }
        let l = (self.running_cost)(t, path, self.actions.point(action));
        if l.is_finite() {
            Ok(l)
        } else {
            Err(PiaError::NonFinite {
                coefficient: "running_cost",
                t,
            })
        }
    }

    pub fn terminal_at(&self, path: PathView<'_>) -> Result<f64> {
        let g = (self.terminal)(path);
        if g.is_finite() {
            Ok(g)
        } else {
            Err(PiaError::NonFinite {
                coefficient: "terminal_reward",
                t: self.horizon,
            })
        }
    }

    fn covariances(&self, t: f64, path: PathView<'_>) -> Result<Vec<f64>> {
        let (m, d) = (self.state_dim, self.noise_dim);
        if let Some(tab) = &self.table {
            return Ok(tab.covariance.clone());
        }
        let k = self.actions.len();
        let mut out = vec![0.0; k * m * m];
        let mut s = vec![0.0; m * d];
        for i in 0..k {
            self.vol_at(t, path, i, &mut s)?;
            for r in 0..m {
                for c in 0..m {
                    out[i * m * m + r * m + c] = dot(&s[r * d..(r + 1) * d], &s[c * d..(c + 1) * d]);
                }
            }
        }
        Ok(out)
    }

    fn check_z(&self, z: &[f64], len: usize) -> Result<()> {
        if z.len() != len {
            return Err(PiaError::config(format!(
                "z has length {}, expected {len}",
                z.len()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(PiaError::config("z must be finite"));
        }
        Ok(())
    }

    /// Reduced Hamiltonian `h = b . z - L` at a grid action.
    pub fn eval_h(&self, t: f64, path: PathView<'_>, z: &[f64], u: &[f64]) -> Result<f64> {
        self.check_z(z, self.noise_dim)?;
        let idx = self
            .actions
            .index_of(u)
            .ok_or_else(|| PiaError::ActionOutsideGrid { action: u.to_vec() })?;
        self.h_at(t, path, z, idx)
    }

    fn h_at(&self, t: f64, path: PathView<'_>, z: &[f64], idx: usize) -> Result<f64> {
        let mut b = vec![0.0; self.noise_dim];
        self.drift_at(t, path, idx, &mut b)?;
        Ok(dot(&b, z) - self.cost_at(t, path, idx)?)
    }

    /// Optimised Hamiltonian `H = max_u h` over the grid and its
    /// lexicographically smallest maximiser.
    pub fn hamiltonian_argmax(&self, t: f64, path: PathView<'_>, z: &[f64]) -> Result<Selection> {
        self.check_z(z, self.noise_dim)?;
        self.reduced_argmax(t, path, z)
    }

    fn reduced_argmax(&self, t: f64, path: PathView<'_>, z: &[f64]) -> Result<Selection> {
        if let Some(tab) = &self.table {
            if !self.flags.controlled_vol {
                if let Some(env) = &tab.envelope {
                    let (value, index) = env.query(z[0]);
                    return Ok(Selection { value, index });
                }
            }
            let d = self.noise_dim;
            let mut best = Selection {
                value: f64::NEG_INFINITY,
                index: 0,
            };
            for i in 0..self.actions.len() {
                let v = dot(&tab.drift[i * d..(i + 1) * d], z) - tab.cost[i];
                if v > best.value {
                    best = Selection { value: v, index: i };
                }
            }
            return Ok(best);
        }
        let mut b = vec![0.0; self.noise_dim];
        let mut best = Selection {
            value: f64::NEG_INFINITY,
            index: 0,
        };
        for i in 0..self.actions.len() {
            self.drift_at(t, path, i, &mut b)?;
            let v = dot(&b, z) - self.cost_at(t, path, i)?;
            if v > best.value {
                best = Selection { value: v, index: i };
            }
        }
        Ok(best)
    }

    /// Value of `sigma b . z - L` at one action together with its
    /// `sigma sigma^T`.
    fn full_terms(
        &self,
        t: f64,
        path: PathView<'_>,
        z: &[f64],
        idx: usize,
        scratch: &mut FullScratch,
    ) -> Result<f64> {
        let (m, d) = (self.state_dim, self.noise_dim);
        if let Some(tab) = &self.table {
            scratch
                .cov
                .copy_from_slice(&tab.covariance[idx * m * m..(idx + 1) * m * m]);
            return Ok(dot(&tab.vol_drift[idx * m..(idx + 1) * m], z) - tab.cost[idx]);
        }
        self.drift_at(t, path, idx, &mut scratch.b)?;
        self.vol_at(t, path, idx, &mut scratch.s)?;
        let mut v = 0.0;
        for r in 0..m {
            v += dot(&scratch.s[r * d..(r + 1) * d], &scratch.b) * z[r];
            for c in 0..m {
                scratch.cov[r * m + c] =
                    dot(&scratch.s[r * d..(r + 1) * d], &scratch.s[c * d..(c + 1) * d]);
            }
        }
        Ok(v - self.cost_at(t, path, idx)?)
    }

    /// Maximises `sigma b . z - L` over grid actions whose `sigma sigma^T`
    /// lies within `level_tol` (Frobenius) of `sigma_level`.
    pub fn full_hamiltonian_argmax(
        &self,
        t: f64,
        path: PathView<'_>,
        z: &[f64],
        sigma_level: &[f64],
    ) -> Result<Selection> {
        let m = self.state_dim;
        self.check_z(z, m)?;
        if sigma_level.len() != m * m {
            return Err(PiaError::config("sigma_level must be an m x m matrix"));
        }
        for r in 0..m {
            for c in 0..r {
                if (sigma_level[r * m + c] - sigma_level[c * m + r]).abs() > 1e-12 {
                    return Err(PiaError::config("sigma_level must be symmetric"));
                }
            }
        }
        let mut scratch = FullScratch::new(m, self.noise_dim);
        let mut best: Option<Selection> = None;
        for i in 0..self.actions.len() {
            let v = self.full_terms(t, path, z, i, &mut scratch)?;
            let gap: f64 = scratch
                .cov
                .iter()
                .zip(sigma_level)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if gap <= self.level_tol && best.map_or(true, |b| v > b.value) {
                best = Some(Selection { value: v, index: i });
            }
        }
        best.ok_or(PiaError::EmptyLevelSet { tol: self.level_tol })
    }

    /// Outer maximisation over volatility levels of
    /// `1/2 Tr[Sigma gamma] + H(t, x, z, Sigma)`.
    ///
    /// Every grid action lies in exactly one level, so this equals the
    /// direct maximum over actions of
    /// `1/2 Tr[sigma sigma^T(u) gamma] + sigma b(u) . z - L(u)`; the
    /// returned action is the lexicographically smallest maximiser. With
    /// `gamma = None` the second-order term is dropped.
    pub fn volatility_argmax(
        &self,
        t: f64,
        path: PathView<'_>,
        z: &[f64],
        gamma: Option<&[f64]>,
    ) -> Result<Selection> {
        let m = self.state_dim;
        if gamma.is_none() {
            if let Some(env) = self.table.as_ref().and_then(|t| t.envelope.as_ref()) {
                if self.flags.controlled_vol {
                    let (value, index) = env.query(z[0]);
                    return Ok(Selection { value, index });
                }
            }
        }
        let mut scratch = FullScratch::new(m, self.noise_dim);
        let mut best = Selection {
            value: f64::NEG_INFINITY,
            index: 0,
        };
        for i in 0..self.actions.len() {
            let mut v = self.full_terms(t, path, z, i, &mut scratch)?;
            if let Some(g) = gamma {
                v += 0.5 * dot(&scratch.cov, g);
            }
            if v > best.value {
                best = Selection { value: v, index: i };
            }
        }
        Ok(best)
    }

    /// The selector used by the iteration: `u*(t, x, z)` from the reduced
    /// Hamiltonian, or from the level-maximised full Hamiltonian when the
    /// volatility is controlled.
    pub fn policy_action(&self, t: f64, path: PathView<'_>, z: &[f64]) -> Result<Selection> {
        if self.flags.controlled_vol {
            self.volatility_argmax(t, path, z, None)
        } else {
            self.reduced_argmax(t, path, z)
        }
    }

    /// Smallness condition for the controlled-volatility rate:
    /// `8 lG^2 lsu^2 lux^2 exp(8 (lsx + lsu lux)^2 T) < 1`.
    pub fn check_vol_smallness(
        &self,
        lip_g: f64,
        lip_sigma_u: f64,
        lip_ustar_x: f64,
        lip_sigma_x: f64,
    ) -> bool {
        let prefactor = 8.0 * (lip_g * lip_sigma_u * lip_ustar_x).powi(2);
        if prefactor == 0.0 {
            return true;
        }
        let exponent = 8.0 * (lip_sigma_x + lip_sigma_u * lip_ustar_x).powi(2) * self.horizon;
        prefactor * exponent.exp() < 1.0
    }

    /// Evaluates every coefficient at every grid action for the sampled
    /// `(t, state)` points and checks finiteness and the declared bounds.
    pub fn validate_at(&self, samples: &[(f64, Vec<f64>)]) -> Result<()> {
        let (m, d) = (self.state_dim, self.noise_dim);
        let mut b = vec![0.0; d];
        let mut s = vec![0.0; m * d];
        for (t, x) in samples {
            let path = PathView::point(x);
            for i in 0..self.actions.len() {
                (self.drift)(*t, path, self.actions.point(i), &mut b);
                self.check_vector("drift", &b, self.bounds.drift, *t)?;
                (self.vol)(*t, path, self.actions.point(i), &mut s);
                self.check_vector("vol", &s, self.bounds.vol, *t)?;
                let l = (self.running_cost)(*t, path, self.actions.point(i));
                if !l.is_finite() {
                    return Err(PiaError::NonFinite {
                        coefficient: "running_cost",
                        t: *t,
                    });
                }
            }
            self.terminal_at(path)?;
        }
        Ok(())
    }
}

struct FullScratch {
    b: Vec<f64>,
    s: Vec<f64>,
    cov: Vec<f64>,
}

impl FullScratch {
    fn new(m: usize, d: usize) -> Self {
        Self {
            b: vec![0.0; d],
            s: vec![0.0; m * d],
            cov: vec![0.0; m * m],
        }
    }
}
