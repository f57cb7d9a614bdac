//! Backward Euler-Maruyama stepping.
//!
//! Each step solves the drift-implicit equation
//!
//! ```text
//! z = c + delta * f(z, X_{k-M}),   c = X_{k-1} + g(X_{k-1}, X_{k-M-1}) dW_{k-1}
//! ```
//!
//! by damped Newton started from `X_{k-1}`. In one dimension a failed Newton
//! phase falls back to bisection on the scalar residual, which is increasing
//! whenever the drift is one-sided Lipschitz and `delta` is small enough.
//!
//! The integrator keeps the last `M + 1` nodes in a ring buffer; that is all
//! the recursion ever looks back. Full trajectories are built on top of it
//! by an observer that records every node.

use std::fmt;
use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::brownian::BrownianPaths;
use crate::constants::AssumptionConstants;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{euclidean_norm, HistoryFn, SddeModel, StateVec};
use crate::output::fmt_f64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImplicitSolveConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_newton_iters: usize,
    pub max_bisection_iters: usize,
    /// Finite-difference step is `fd_jacobian_step * (1 + |x|)`.
    pub fd_jacobian_step: f64,
}

impl Default for ImplicitSolveConfig {
    fn default() -> Self {
        ImplicitSolveConfig {
            rel_tol: 1e-12,
            abs_tol: 0.0,
            max_newton_iters: 50,
            max_bisection_iters: 200,
            fd_jacobian_step: f64::EPSILON.sqrt(),
        }
    }
}

impl ImplicitSolveConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !(positive(self.rel_tol) && positive(self.fd_jacobian_step)) {
            return Err(Error::usage("relative tolerance and finite-difference step must be positive"));
        }
        if !(self.abs_tol >= 0.0 && self.abs_tol.is_finite()) {
            return Err(Error::usage("absolute tolerance must be finite and nonnegative"));
        }
        if self.max_newton_iters == 0 || self.max_bisection_iters == 0 {
            return Err(Error::usage("solver iteration caps must be at least 1"));
        }
        Ok(())
    }

    /// Residual accepted for `z = c + delta f(z, y)`.
    fn tolerance(&self, z: &[f64], c: &[f64]) -> f64 {
        self.abs_tol + self.rel_tol * euclidean_norm(z).max(euclidean_norm(c))
    }
}

/// Refuses `delta >= 1 / max(b1, 1)` when constants are known, and warns
/// when they are not.
pub fn check_step_size(delta: f64, constants: Option<&AssumptionConstants>) -> Result<()> {
    match constants {
        Some(c) => {
            let limit = 1.0 / c.b1.max(1.0);
            if delta >= limit {
                return Err(Error::usage(format!(
                    "step size {delta} is not below 1/max(b1, 1) = {limit}"
                )));
            }
        }
        None => warn!("no structural constants supplied; step size {delta} is not checked"),
    }
    Ok(())
}

#[derive(Debug)]
struct SolveFailure {
    residual: f64,
    iterations: usize,
}

/// Scratch space for one integration; never shared between threads.
struct Solver<'a> {
    model: &'a SddeModel,
    cfg: &'a ImplicitSolveConfig,
    d: usize,
    f: Vec<f64>,
    f2: Vec<f64>,
    r: Vec<f64>,
    trial: Vec<f64>,
    trial_r: Vec<f64>,
    jac: Vec<f64>,
    probe: Vec<f64>,
}

impl<'a> Solver<'a> {
    fn new(model: &'a SddeModel, cfg: &'a ImplicitSolveConfig) -> Self {
        let d = model.dim();
        Solver {
            model,
            cfg,
            d,
            f: vec![0.0; d],
            f2: vec![0.0; d],
            r: vec![0.0; d],
            trial: vec![0.0; d],
            trial_r: vec![0.0; d],
            jac: vec![0.0; d * d],
            probe: vec![0.0; d],
        }
    }

    /// `out = z - c - delta f(z, y)`; returns its norm (infinite when not finite).
    fn residual(&mut self, z: &[f64], y: &[f64], c: &[f64], delta: f64, out_trial: bool) -> f64 {
        self.model.drift_into(z, y, &mut self.f);
        let out = if out_trial { &mut self.trial_r } else { &mut self.r };
        for i in 0..self.d {
            out[i] = z[i] - c[i] - delta * self.f[i];
        }
        let n = euclidean_norm(out);
        if n.is_finite() {
            n
        } else {
            f64::INFINITY
        }
    }

    fn scalar_residual(&mut self, z: f64, y: &[f64], c: f64, delta: f64) -> f64 {
        self.model.drift_into(&[z], y, &mut self.f);
        z - c - delta * self.f[0]
    }

    /// Fills `self.jac` with `df/dx` at `(z, y)`.
    fn drift_jacobian(&mut self, z: &[f64], y: &[f64]) {
        if self.model.jacobian_into(z, y, &mut self.jac) {
            return;
        }
        self.model.drift_into(z, y, &mut self.f2);
        for col in 0..self.d {
            self.probe.copy_from_slice(z);
            let h = self.cfg.fd_jacobian_step * (1.0 + z[col].abs());
            self.probe[col] += h;
            let h = self.probe[col] - z[col];
            self.model.drift_into(&self.probe, y, &mut self.f);
            for row in 0..self.d {
                self.jac[row * self.d + col] = (self.f[row] - self.f2[row]) / h;
            }
        }
    }

    /// Newton step direction `J^{-1} r` into `self.probe`; false if singular.
    fn newton_direction(&mut self, delta: f64) -> bool {
        let d = self.d;
        if d == 1 {
            let j = 1.0 - delta * self.jac[0];
            if j == 0.0 || !j.is_finite() {
                return false;
            }
            self.probe[0] = self.r[0] / j;
            return self.probe[0].is_finite();
        }
        let jm = DMatrix::from_fn(d, d, |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            id - delta * self.jac[i * d + j]
        });
        let rhs = DVector::from_column_slice(&self.r);
        match jm.lu().solve(&rhs) {
            Some(s) if s.iter().all(|v| v.is_finite()) => {
                self.probe.copy_from_slice(s.as_slice());
                true
            }
            _ => false,
        }
    }

    /// Solves in place; `z` holds the initial guess on entry.
    fn solve(&mut self, z: &mut [f64], y: &[f64], c: &[f64], delta: f64) -> std::result::Result<usize, SolveFailure> {
        let mut rnorm = self.residual(z, y, c, delta, false);
        let mut iterations = 0;
        while iterations < self.cfg.max_newton_iters {
            // at least one Newton step, so a tiny residual at the guess
            // cannot stand in for relative accuracy
            if rnorm == 0.0 || (iterations > 0 && rnorm <= self.cfg.tolerance(z, c)) {
                return Ok(iterations);
            }
            iterations += 1;
            if !rnorm.is_finite() {
                break;
            }
            self.drift_jacobian(z, y);
            if !self.newton_direction(delta) {
                break;
            }
            // damped update: full step, then up to six halvings
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..=6 {
                for ((t, zi), pi) in self.trial.iter_mut().zip(z.iter()).zip(&self.probe) {
                    *t = zi - lambda * pi;
                }
                let trial = std::mem::take(&mut self.trial);
                let tn = self.residual(&trial, y, c, delta, true);
                self.trial = trial;
                if tn < rnorm {
                    z.copy_from_slice(&self.trial);
                    std::mem::swap(&mut self.r, &mut self.trial_r);
                    rnorm = tn;
                    accepted = true;
                    break;
                }
                lambda *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if rnorm <= self.cfg.tolerance(z, c) {
            return Ok(iterations);
        }
        if self.d != 1 {
            return Err(SolveFailure {
                residual: rnorm,
                iterations,
            });
        }
        self.bisect(z, y, c[0], delta, iterations)
    }

    fn bisect(&mut self, z: &mut [f64], y: &[f64], c: f64, delta: f64, prior: usize) -> std::result::Result<usize, SolveFailure> {
        let fail = |residual: f64, iterations| Err(SolveFailure { residual, iterations });
        self.model.drift_into(&[c], y, &mut self.f);
        let mut half = c.abs() + delta * self.f[0].abs() + 1.0;
        if !half.is_finite() {
            half = 1.0;
        }
        let (mut lo, mut hi) = (-half, half);
        let mut r_lo = self.scalar_residual(lo, y, c, delta);
        let mut r_hi = self.scalar_residual(hi, y, c, delta);
        let mut expansions = 0;
        while !(r_lo < 0.0 && r_hi > 0.0) {
            if r_lo == 0.0 {
                z[0] = lo;
                return Ok(prior);
            }
            if r_hi == 0.0 {
                z[0] = hi;
                return Ok(prior);
            }
            expansions += 1;
            if expansions > 64 || r_lo.is_nan() || r_hi.is_nan() {
                return fail(f64::INFINITY, prior);
            }
            if !(r_lo < 0.0) {
                lo *= 2.0;
                r_lo = self.scalar_residual(lo, y, c, delta);
            }
            if !(r_hi > 0.0) {
                hi *= 2.0;
                r_hi = self.scalar_residual(hi, y, c, delta);
            }
        }
        let mut best = (f64::INFINITY, lo);
        for it in 0..self.cfg.max_bisection_iters {
            let mid = 0.5 * (lo + hi);
            let r = self.scalar_residual(mid, y, c, delta);
            if r.abs() < best.0 {
                best = (r.abs(), mid);
            }
            if r.abs() <= self.cfg.abs_tol + self.cfg.rel_tol * mid.abs().max(c.abs()) {
                z[0] = mid;
                return Ok(prior + it + 1);
            }
            if mid == lo || mid == hi {
                break;
            }
            if r < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        fail(best.0, prior + self.cfg.max_bisection_iters)
    }
}

/// Solves `z = c + delta * f(z, y_delay)` starting from `z0`.
pub fn implicit_step_solve(
    model: &SddeModel,
    y_delay: &StateVec,
    c: &StateVec,
    delta: f64,
    cfg: &ImplicitSolveConfig,
    z0: &StateVec,
) -> Result<StateVec> {
    let d = model.dim();
    if y_delay.len() != d || c.len() != d || z0.len() != d {
        return Err(Error::usage(format!("implicit solve expects vectors of length {d}")));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::usage(format!("step size must be positive, got {delta}")));
    }
    cfg.validate()?;
    let mut solver = Solver::new(model, cfg);
    let mut z = z0.as_slice().to_vec();
    solver
        .solve(&mut z, y_delay.as_slice(), c.as_slice(), delta)
        .map_err(|f| Error::StepFailure {
            step: 0,
            residual: f.residual,
            iterations: f.iterations,
        })?;
    StateVec::new(z)
}

/// The last `M + 1` nodes of a running integration.
pub struct DelayBuffer {
    d: usize,
    cap: usize,
    data: Vec<f64>,
    newest_slot: usize,
    newest_index: i64,
    delta: f64,
}

impl DelayBuffer {
    fn new(d: usize, m: usize, delta: f64) -> Self {
        DelayBuffer {
            d,
            cap: m + 1,
            data: vec![0.0; (m + 1) * d],
            newest_slot: m,
            newest_index: 0,
            delta,
        }
    }

    /// Grid index `k` of the newest node.
    pub fn index(&self) -> i64 {
        self.newest_index
    }

    pub fn time(&self) -> f64 {
        self.newest_index as f64 * self.delta
    }

    /// Node `X_{k - age}` for `age <= M`.
    #[inline]
    pub fn lag(&self, age: usize) -> &[f64] {
        debug_assert!(age < self.cap);
        let slot = (self.newest_slot + self.cap - age) % self.cap;
        &self.data[slot * self.d..(slot + 1) * self.d]
    }

    pub fn latest(&self) -> &[f64] {
        self.lag(0)
    }

    fn push(&mut self, z: &[f64]) {
        self.newest_slot = (self.newest_slot + 1) % self.cap;
        let s = self.newest_slot * self.d;
        self.data[s..s + self.d].copy_from_slice(z);
        self.newest_index += 1;
    }

    /// The segment `X_{k-M} .. X_k`, oldest first.
    pub fn segment(&self) -> Segment {
        let mut window = Vec::with_capacity(self.cap * self.d);
        for age in (0..self.cap).rev() {
            window.extend_from_slice(self.lag(age));
        }
        Segment {
            base_index: self.newest_index,
            d: self.d,
            window,
            delta: self.delta,
        }
    }
}

/// Runs the recursion over `grid`, calling `observer` once the history is
/// loaded (`k = 0`) and after every accepted step.
///
/// `increments` is the row-major `N x m` array of `dW_{k-1}`, `k = 1..N`.
pub fn integrate_observed(
    model: &SddeModel,
    grid: &TimeGrid,
    increments: &[f64],
    cfg: &ImplicitSolveConfig,
    mut observer: impl FnMut(&DelayBuffer),
) -> Result<()> {
    let (d, nm, m, n) = (model.dim(), model.noise_dim(), grid.m(), grid.n());
    if grid.tau() != model.tau() {
        return Err(Error::usage(format!(
            "grid delay {} does not match model delay {}",
            grid.tau(),
            model.tau()
        )));
    }
    if increments.len() != n * nm {
        return Err(Error::usage(format!(
            "path has {} increments, grid needs {}",
            increments.len(),
            n * nm
        )));
    }
    cfg.validate()?;
    let delta = grid.delta();

    let mut buf = DelayBuffer::new(d, m, delta);
    let mut node = vec![0.0; d];
    for j in -(m as i64)..=0 {
        model.history_into(grid.t(j), &mut node);
        if node.iter().any(|v| !v.is_finite()) {
            return Err(Error::ModelEvaluation {
                model: model.name().to_string(),
                what: "initial history",
                x: vec![grid.t(j)],
                y: vec![],
            });
        }
        buf.push(&node);
    }
    buf.newest_index = 0;
    observer(&buf);

    let mut solver = Solver::new(model, cfg);
    let mut prev = vec![0.0; d];
    let mut y_drift = vec![0.0; d];
    let mut y_diff = vec![0.0; d];
    let mut g = vec![0.0; d * nm];
    let mut c = vec![0.0; d];
    for k in 1..=n {
        prev.copy_from_slice(buf.lag(0));
        // X_{k-M}
        y_drift.copy_from_slice(buf.lag(m - 1));
        // X_{k-M-1}; the buffer always holds it because k >= 1 means the
        // oldest index needed is -M.
        y_diff.copy_from_slice(buf.lag(m));
        model.diffusion_into(&prev, &y_diff, &mut g);
        let dw = &increments[(k - 1) * nm..k * nm];
        for i in 0..d {
            let mut s = prev[i];
            for j in 0..nm {
                s += g[i * nm + j] * dw[j];
            }
            c[i] = s;
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::ModelEvaluation {
                model: model.name().to_string(),
                what: "diffusion",
                x: prev.clone(),
                y: y_diff.clone(),
            });
        }
        node.copy_from_slice(&prev);
        solver
            .solve(&mut node, &y_drift, &c, delta)
            .map_err(|f| Error::StepFailure {
                step: k,
                residual: f.residual,
                iterations: f.iterations,
            })?;
        buf.push(&node);
        observer(&buf);
    }
    Ok(())
}

/// Node values `X_{-M} .. X_N` of one path.
#[derive(Clone)]
pub struct Trajectory {
    grid: TimeGrid,
    d: usize,
    nodes: Vec<f64>,
    model_name: String,
    path_index: usize,
    history: HistoryFn,
}

impl fmt::Debug for Trajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Trajectory")
            .field("grid", &self.grid)
            .field("d", &self.d)
            .field("model_name", &self.model_name)
            .field("path_index", &self.path_index)
            .finish_non_exhaustive()
    }
}

pub fn integrate(
    model: &SddeModel,
    grid: &TimeGrid,
    increments: &[f64],
    cfg: &ImplicitSolveConfig,
) -> Result<Trajectory> {
    let d = model.dim();
    let mut nodes = Vec::with_capacity(grid.node_count() * d);
    integrate_observed(model, grid, increments, cfg, |buf| {
        if buf.index() == 0 {
            for age in (0..=grid.m()).rev() {
                nodes.extend_from_slice(buf.lag(age));
            }
        } else {
            nodes.extend_from_slice(buf.latest());
        }
    })?;
    Ok(Trajectory {
        grid: *grid,
        d,
        nodes,
        model_name: model.name().to_string(),
        path_index: 0,
        history: model.history_fn(),
    })
}

/// Integrates path `index` of `paths` on the paths' own grid.
pub fn integrate_path(
    model: &SddeModel,
    paths: &BrownianPaths,
    index: usize,
    cfg: &ImplicitSolveConfig,
) -> Result<Trajectory> {
    if index >= paths.path_count() {
        return Err(Error::usage(format!("path {index} out of range")));
    }
    if paths.noise_dim() != model.noise_dim() {
        return Err(Error::usage("noise dimension of paths and model differ"));
    }
    let mut traj = integrate(model, &paths.grid(), &paths.increments(index), cfg)?;
    traj.path_index = index;
    Ok(traj)
}

impl Trajectory {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    pub fn path_index(&self) -> usize {
        self.path_index
    }

    /// `X_k` for `-M <= k <= N`.
    pub fn node(&self, k: i64) -> &[f64] {
        let i = (k + self.grid.m() as i64) as usize;
        &self.nodes[i * self.d..(i + 1) * self.d]
    }

    /// All nodes, `X_{-M}` first.
    pub fn nodes(&self) -> impl Iterator<Item = (i64, &[f64])> {
        let m = self.grid.m() as i64;
        self.nodes.chunks_exact(self.d).enumerate().map(move |(i, x)| (i as i64 - m, x))
    }

    /// The continuous extension: `xi(t)` on `[-tau, 0]`, linear between
    /// nodes afterwards.
    pub fn eval_continuous(&self, t: f64) -> Result<StateVec> {
        let horizon = self.grid.horizon();
        let tau = self.grid.tau();
        if !(t >= -tau && t <= horizon) {
            return Err(Error::usage(format!("t = {t} outside [-{tau}, {horizon}]")));
        }
        let mut out = vec![0.0; self.d];
        if t <= 0.0 {
            (self.history)(t, &mut out);
            return StateVec::new(out);
        }
        let s = t / self.grid.delta();
        let r = s.round();
        // grid times computed as k * delta land within a few ulps of k
        if (s - r).abs() <= 4.0 * f64::EPSILON * s.max(1.0) {
            return StateVec::new(self.node(r as i64).to_vec());
        }
        let k = (s.floor() as i64).min(self.grid.n() as i64 - 1);
        let theta = s - k as f64;
        let (a, b) = (self.node(k), self.node(k + 1));
        for i in 0..self.d {
            out[i] = a[i] + theta * (b[i] - a[i]);
        }
        StateVec::new(out)
    }

    /// The window `X_{k-M} .. X_k`.
    pub fn extract_segment(&self, k: i64) -> Result<Segment> {
        if !(0..=self.grid.n() as i64).contains(&k) {
            return Err(Error::usage(format!("segment index {k} outside [0, {}]", self.grid.n())));
        }
        let start = k as usize * self.d;
        let end = (k as usize + self.grid.m() + 1) * self.d;
        Ok(Segment {
            base_index: k,
            d: self.d,
            window: self.nodes[start..end].to_vec(),
            delta: self.grid.delta(),
        })
    }

    /// CSV with a `k,t,x0[,x1..]` header and one row per node.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let cols: Vec<String> = (0..self.d).map(|i| format!("x{i}")).collect();
        writeln!(w, "k,t,{}", cols.join(","))?;
        for (k, x) in self.nodes() {
            let vals: Vec<String> = x.iter().map(|v| fmt_f64(*v)).collect();
            writeln!(w, "{k},{},{}", fmt_f64(self.grid.t(k)), vals.join(","))?;
        }
        Ok(())
    }
}

/// The discrete segment `X_{k-M} .. X_k`, oldest node first.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub base_index: i64,
    pub d: usize,
    pub window: Vec<f64>,
    pub delta: f64,
}

impl Segment {
    /// Number of nodes, `M + 1`.
    pub fn len(&self) -> usize {
        self.window.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.window[i * self.d..(i + 1) * self.d]
    }
}
