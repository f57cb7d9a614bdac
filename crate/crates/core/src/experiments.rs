//! Monte Carlo studies: coupled strong errors, convergence rates, invariant
//! measure diagnostics, ergodic time averages and moment tracking.
//!
//! Paths run in parallel on the current rayon pool. Every reduction walks
//! the per-path results in path-index order, so reports are bitwise
//! identical for any worker count.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brownian::{coarsen_increments, path_increments};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{euclidean_norm, InitialHistory, SddeModel};
use crate::output::fmt_f64;
use crate::segment::{abs_pow, clamped_mean, ks_statistic, segment_distance, EmpiricalMarginal};
use crate::stepper::{integrate_observed, ImplicitSolveConfig, Segment};

/// Grid index of time `t`, which must sit on a node in `[0, T]`.
pub fn node_index(grid: &TimeGrid, t: f64) -> Result<i64> {
    let r = t / grid.delta();
    let k = r.round();
    if !((r - k).abs() <= 1e-9 * r.abs().max(1.0)) || k < 0.0 || k > grid.n() as f64 {
        return Err(Error::usage(format!(
            "time {t} is not a node of the grid with step {} on [0, {}]",
            grid.delta(),
            grid.horizon()
        )));
    }
    Ok(k as i64)
}

fn check_paths(paths: usize) -> Result<()> {
    if paths == 0 {
        return Err(Error::usage("path count must be positive"));
    }
    Ok(())
}

/// Runs `f` for every path index and returns the results in index order,
/// or the error of the lowest failing index.
fn per_path<T: Send>(paths: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let results: Vec<Result<T>> = (0..paths).into_par_iter().map(&f).collect();
    results.into_iter().collect()
}

/// Node values (all coordinates) at every `every`-th index, `k = 0` included.
fn record_every(
    model: &SddeModel,
    grid: &TimeGrid,
    increments: &[f64],
    cfg: &ImplicitSolveConfig,
    every: usize,
) -> Result<Vec<f64>> {
    let every = every as i64;
    let mut out = Vec::with_capacity((grid.n() as i64 / every + 1) as usize * model.dim());
    integrate_observed(model, grid, increments, cfg, |buf| {
        if buf.index() % every == 0 {
            out.extend_from_slice(buf.latest());
        }
    })?;
    Ok(out)
}

fn squared_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Replaces characters unsafe in file names with `-`.
pub fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '-' })
        .collect::<String>()
        .trim_matches('-')
        .to_string()
}

/// File stem shared by the JSON and CSV outputs of one report.
pub fn report_stem(kind: &str, model: &str, seed: u64, delta: f64, horizon: f64) -> String {
    format!("{kind}_{}_seed{seed}_dt{delta}_T{horizon}", sanitize(model))
}

pub trait Report: Serialize {
    fn stem(&self) -> String;
    fn write_csv(&self, w: &mut dyn Write) -> Result<()>;
}

/// Writes `<stem>.json` and `<stem>.csv` into `dir` and returns both paths.
pub fn write_report<R: Report>(report: &R, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let stem = report.stem();
    let json = dir.join(format!("{stem}.json"));
    let csv = dir.join(format!("{stem}.csv"));
    let mut w = BufWriter::new(File::create(&json)?);
    serde_json::to_writer_pretty(&mut w, report)?;
    writeln!(w)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(&csv)?);
    report.write_csv(&mut w)?;
    w.flush()?;
    Ok(vec![json, csv])
}

// ---------------------------------------------------------------------------
// strong error

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrongErrorConfig {
    pub horizon: f64,
    pub delta_ref: f64,
    pub delta: f64,
    pub paths: usize,
    pub seed: u64,
    /// Coarse steps between checkpoints; defaults to `M`, i.e. `t = k tau`.
    #[serde(default)]
    pub checkpoint_stride: Option<usize>,
}

struct CoupledGrids {
    fine: TimeGrid,
    coarse: TimeGrid,
    ratio: usize,
}

fn coupled_grids(model: &SddeModel, delta_ref: f64, delta: f64, horizon: f64) -> Result<CoupledGrids> {
    let fine = TimeGrid::from_step(model.tau(), delta_ref, horizon)?;
    let coarse = TimeGrid::from_step(model.tau(), delta, horizon)?;
    let ratio = fine.ratio_to(&coarse)?;
    Ok(CoupledGrids { fine, coarse, ratio })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrongErrorReport {
    pub model: String,
    pub seed: u64,
    pub path_count: usize,
    pub delta_ref: f64,
    pub delta: f64,
    pub horizon: f64,
    pub times: Vec<f64>,
    /// Sample mean of `|x_ref(t) - X(t)|^2`.
    pub e_strong: Vec<f64>,
    /// `e_strong / delta`.
    pub ratio: Vec<f64>,
}

impl StrongErrorReport {
    /// Largest `e_strong / delta` over checkpoints with `lo < t <= hi`.
    pub fn max_ratio(&self, lo: f64, hi: f64) -> f64 {
        self.times
            .iter()
            .zip(&self.ratio)
            .filter(|(&t, _)| t > lo && t <= hi)
            .map(|(_, &r)| r)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

impl Report for StrongErrorReport {
    fn stem(&self) -> String {
        report_stem("strong-error", &self.model, self.seed, self.delta, self.horizon)
    }

    fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "t,e_strong,ratio")?;
        for i in 0..self.times.len() {
            writeln!(
                w,
                "{},{},{}",
                fmt_f64(self.times[i]),
                fmt_f64(self.e_strong[i]),
                fmt_f64(self.ratio[i])
            )?;
        }
        Ok(())
    }
}

/// Integrates each path at `delta_ref` and at `delta` on the block sums of
/// the same increments, and averages squared differences at checkpoints.
pub fn run_strong_error(
    model: &SddeModel,
    c: &StrongErrorConfig,
    solver: &ImplicitSolveConfig,
) -> Result<StrongErrorReport> {
    check_paths(c.paths)?;
    let g = coupled_grids(model, c.delta_ref, c.delta, c.horizon)?;
    let stride = c.checkpoint_stride.unwrap_or(g.coarse.m());
    if stride == 0 {
        return Err(Error::usage("checkpoint stride must be positive"));
    }
    solver.validate()?;
    let (d, nm) = (model.dim(), model.noise_dim());
    let per = per_path(c.paths, |i| {
        let fine_inc = path_increments(c.seed, i as u64, &g.fine, nm);
        let coarse_inc = coarsen_increments(&fine_inc, nm, g.ratio);
        let fine = record_every(model, &g.fine, &fine_inc, solver, stride * g.ratio)?;
        let coarse = record_every(model, &g.coarse, &coarse_inc, solver, stride)?;
        Ok(fine
            .chunks_exact(d)
            .zip(coarse.chunks_exact(d))
            .map(|(a, b)| squared_diff(a, b))
            .collect::<Vec<f64>>())
    })?;
    let mut e_strong = vec![0.0; per[0].len()];
    for p in &per {
        for (e, v) in e_strong.iter_mut().zip(p) {
            *e += v;
        }
    }
    for e in &mut e_strong {
        *e /= c.paths as f64;
    }
    let times = (0..e_strong.len()).map(|j| g.coarse.t((j * stride) as i64)).collect();
    Ok(StrongErrorReport {
        model: model.name().to_string(),
        seed: c.seed,
        path_count: c.paths,
        delta_ref: g.fine.delta(),
        delta: g.coarse.delta(),
        horizon: g.coarse.horizon(),
        ratio: e_strong.iter().map(|e| e / g.coarse.delta()).collect(),
        times,
        e_strong,
    })
}

// ---------------------------------------------------------------------------
// rate regression

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateConfig {
    pub horizon: f64,
    pub deltas: Vec<f64>,
    pub delta_ref: f64,
    pub paths: usize,
    pub seed: u64,
}

impl RateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.deltas.len() < 4 {
            return Err(Error::usage(format!(
                "rate regression needs at least 4 step sizes, got {}",
                self.deltas.len()
            )));
        }
        check_paths(self.paths)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateEntry {
    pub delta: f64,
    pub rms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateReport {
    pub model: String,
    pub seed: u64,
    pub path_count: usize,
    pub delta_ref: f64,
    pub horizon: f64,
    pub entries: Vec<RateEntry>,
    pub slope: f64,
    pub intercept: f64,
}

impl Report for RateReport {
    fn stem(&self) -> String {
        report_stem("rate", &self.model, self.seed, self.delta_ref, self.horizon)
    }

    fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "delta,rms")?;
        for e in &self.entries {
            writeln!(w, "{},{}", fmt_f64(e.delta), fmt_f64(e.rms))?;
        }
        Ok(())
    }
}

/// Least-squares `(slope, intercept)` of `ln rms` against `ln delta`.
pub fn fit_log_log(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::usage("regression needs at least two points"));
    }
    if points.iter().any(|&(d, e)| !(d > 0.0 && e > 0.0 && d.is_finite() && e.is_finite())) {
        return Err(Error::usage("log-log regression needs positive finite values"));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::usage("regression needs distinct step sizes"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Terminal RMS error for each step size against the shared reference run.
pub fn run_rate_regression(model: &SddeModel, c: &RateConfig, solver: &ImplicitSolveConfig) -> Result<RateReport> {
    c.validate()?;
    let grids: Vec<CoupledGrids> = c
        .deltas
        .iter()
        .map(|&dt| coupled_grids(model, c.delta_ref, dt, c.horizon))
        .collect::<Result<_>>()?;
    solver.validate()?;
    let fine = grids[0].fine;
    let (d, nm) = (model.dim(), model.noise_dim());
    let per = per_path(c.paths, |i| {
        let fine_inc = path_increments(c.seed, i as u64, &fine, nm);
        let x_ref = record_every(model, &fine, &fine_inc, solver, fine.n())?;
        let x_ref = &x_ref[x_ref.len() - d..];
        grids
            .iter()
            .map(|g| {
                let inc = coarsen_increments(&fine_inc, nm, g.ratio);
                let x = record_every(model, &g.coarse, &inc, solver, g.coarse.n())?;
                Ok(squared_diff(x_ref, &x[x.len() - d..]))
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    let mut sums = vec![0.0; grids.len()];
    for p in &per {
        for (s, v) in sums.iter_mut().zip(p) {
            *s += v;
        }
    }
    let entries: Vec<RateEntry> = grids
        .iter()
        .zip(&sums)
        .map(|(g, s)| RateEntry {
            delta: g.coarse.delta(),
            rms: (s / c.paths as f64).sqrt(),
        })
        .collect();
    let pts: Vec<(f64, f64)> = entries.iter().map(|e| (e.delta, e.rms)).collect();
    let (slope, intercept) = fit_log_log(&pts)?;
    Ok(RateReport {
        model: model.name().to_string(),
        seed: c.seed,
        path_count: c.paths,
        delta_ref: fine.delta(),
        horizon: fine.horizon(),
        entries,
        slope,
        intercept,
    })
}

// ---------------------------------------------------------------------------
// invariant measure

fn default_alt_initial() -> InitialHistory {
    InitialHistory::Constant { value: -2.0 }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantConfig {
    pub t_ref: f64,
    pub compare_times: Vec<f64>,
    pub delta: f64,
    pub paths: usize,
    pub seed: u64,
    /// Overrides the model's own initial segment.
    #[serde(default)]
    pub initial: Option<InitialHistory>,
    /// Second initial segment for the coupled distance curve.
    #[serde(default = "default_alt_initial")]
    pub alt_initial: InitialHistory,
    /// Times of the coupled distance curve; defaults to `tau, 2 tau, .. <= t_ref`.
    #[serde(default)]
    pub dl_times: Option<Vec<f64>>,
    /// Draw the reference marginal from paths `P..2P` instead of `0..P`.
    #[serde(default = "default_true")]
    pub independent_blocks: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvariantReport {
    pub model: String,
    pub alt_model: String,
    pub seed: u64,
    pub path_count: usize,
    pub delta: f64,
    pub t_ref: f64,
    pub independent_blocks: bool,
    pub compare_times: Vec<f64>,
    /// Two-sample K-S statistic of the first coordinate at each compare
    /// time against `t_ref`.
    pub ks: Vec<f64>,
    pub dl_times: Vec<f64>,
    /// `mean min(2, ||X_t - Y_t||)` over coupled segments.
    pub dl_bound: Vec<f64>,
}

impl InvariantReport {
    pub fn dl_at(&self, t: f64) -> Option<f64> {
        self.dl_times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-9 * t.abs().max(1.0))
            .map(|i| self.dl_bound[i])
    }
}

impl Report for InvariantReport {
    fn stem(&self) -> String {
        report_stem("invariant", &self.model, self.seed, self.delta, self.t_ref)
    }

    fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "series,t,value")?;
        for (t, v) in self.compare_times.iter().zip(&self.ks) {
            writeln!(w, "ks,{},{}", fmt_f64(*t), fmt_f64(*v))?;
        }
        for (t, v) in self.dl_times.iter().zip(&self.dl_bound) {
            writeln!(w, "dl,{},{}", fmt_f64(*t), fmt_f64(*v))?;
        }
        Ok(())
    }
}

struct InvariantPath {
    marks: Vec<f64>,
    distances: Vec<f64>,
}

pub fn run_invariant_study(
    model: &SddeModel,
    c: &InvariantConfig,
    solver: &ImplicitSolveConfig,
) -> Result<InvariantReport> {
    check_paths(c.paths)?;
    let base = match &c.initial {
        Some(h) => model.with_initial_history(h.clone()),
        None => model.clone(),
    };
    let alt = model.with_initial_history(c.alt_initial.clone());
    let grid = TimeGrid::from_step(model.tau(), c.delta, c.t_ref)?;
    if c.compare_times.is_empty() {
        return Err(Error::usage("invariant study needs at least one compare time"));
    }
    let compare: Vec<i64> = c.compare_times.iter().map(|&t| node_index(&grid, t)).collect::<Result<_>>()?;
    let dl_times = match &c.dl_times {
        Some(ts) => ts.clone(),
        None => (1..)
            .map(|j| j as f64 * model.tau())
            .take_while(|&t| t <= grid.horizon() * (1.0 + 1e-12))
            .collect(),
    };
    let dl_idx: Vec<i64> = dl_times.iter().map(|&t| node_index(&grid, t)).collect::<Result<_>>()?;
    solver.validate()?;
    let nm = model.noise_dim();
    let n = grid.n() as i64;
    let total = if c.independent_blocks { 2 * c.paths } else { c.paths };

    let segments_at = |m: &SddeModel, inc: &[f64], marks: &mut Vec<f64>| -> Result<Vec<Segment>> {
        let mut segs = Vec::with_capacity(dl_idx.len());
        integrate_observed(m, &grid, inc, solver, |buf| {
            let k = buf.index();
            if compare.contains(&k) || k == n {
                marks.push(buf.latest()[0]);
            }
            if dl_idx.contains(&k) {
                segs.push(buf.segment());
            }
        })?;
        Ok(segs)
    };
    let per = per_path(total, |i| {
        let inc = path_increments(c.seed, i as u64, &grid, nm);
        let mut marks = Vec::new();
        let segs = segments_at(&base, &inc, &mut marks)?;
        let distances = if i < c.paths {
            let alt_segs = segments_at(&alt, &inc, &mut Vec::new())?;
            segs.iter().zip(&alt_segs).map(|(a, b)| segment_distance(a, b)).collect()
        } else {
            Vec::new()
        };
        Ok(InvariantPath { marks, distances })
    })?;

    // marks are in increasing k; map each compare time to its slot
    let mut order: Vec<i64> = compare.clone();
    order.push(n);
    order.sort_unstable();
    order.dedup();
    let slot = |k: i64| order.binary_search(&k).expect("recorded index");
    let ref_block = if c.independent_blocks { c.paths..2 * c.paths } else { 0..c.paths };
    let reference = EmpiricalMarginal::new(
        per[ref_block].iter().map(|p| p.marks[slot(n)]).collect(),
        grid.horizon(),
        "x0",
    )?;
    let ks = compare
        .iter()
        .map(|&k| {
            let sample = EmpiricalMarginal::new(
                per[..c.paths].iter().map(|p| p.marks[slot(k)]).collect(),
                grid.t(k),
                "x0",
            )?;
            Ok(ks_statistic(&sample, &reference))
        })
        .collect::<Result<Vec<f64>>>()?;
    let dl_bound = (0..dl_idx.len())
        .map(|j| clamped_mean(per[..c.paths].iter().map(|p| p.distances[j])))
        .collect();
    Ok(InvariantReport {
        model: base.name().to_string(),
        alt_model: alt.name().to_string(),
        seed: c.seed,
        path_count: c.paths,
        delta: grid.delta(),
        t_ref: grid.horizon(),
        independent_blocks: c.independent_blocks,
        compare_times: c.compare_times.clone(),
        ks,
        dl_times,
        dl_bound,
    })
}

// ---------------------------------------------------------------------------
// ergodicity

/// Scalar test functions; the scalar ones act on the first coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Observable {
    Identity,
    Cube,
    ExpNeg,
    /// `|x|^2`.
    Square,
    Constant { value: f64 },
}

impl Observable {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Observable::Identity => x[0],
            Observable::Cube => x[0] * x[0] * x[0],
            Observable::ExpNeg => (-x[0]).exp(),
            Observable::Square => {
                let n = euclidean_norm(x);
                n * n
            }
            Observable::Constant { value } => *value,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Observable::Identity => "x".into(),
            Observable::Cube => "x^3".into(),
            Observable::ExpNeg => "exp(-x)".into(),
            Observable::Square => "|x|^2".into(),
            Observable::Constant { value } => format!("const({value})"),
        }
    }
}

fn default_observables() -> Vec<Observable> {
    vec![Observable::Cube, Observable::ExpNeg]
}

fn default_initials() -> Vec<InitialHistory> {
    vec![
        InitialHistory::OnePlusCos,
        InitialHistory::Affine {
            intercept: -1.0,
            slope: 1.0,
        },
        InitialHistory::Constant { value: -2.0 },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErgodicityConfig {
    pub horizon: f64,
    pub delta: f64,
    pub paths: usize,
    pub seed: u64,
    #[serde(default = "default_observables")]
    pub observables: Vec<Observable>,
    #[serde(default = "default_initials")]
    pub initials: Vec<InitialHistory>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErgodicityCurve {
    pub initial: String,
    pub observable: String,
    /// Mean over paths of `(1/k) sum_{i<=k} phi(X_i)` for `k = 1..N`.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErgodicityReport {
    pub model: String,
    pub seed: u64,
    pub path_count: usize,
    pub delta: f64,
    pub horizon: f64,
    pub curves: Vec<ErgodicityCurve>,
    /// Per observable: largest pairwise gap between initials at `T`.
    pub terminal_spread: Vec<(String, f64)>,
}

impl Report for ErgodicityReport {
    fn stem(&self) -> String {
        report_stem("ergodicity", &self.model, self.seed, self.delta, self.horizon)
    }

    fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        let head: Vec<String> = self
            .curves
            .iter()
            .map(|c| format!("{}:{}", c.initial, c.observable))
            .collect();
        writeln!(w, "t,{}", head.join(","))?;
        let n = self.curves.first().map_or(0, |c| c.values.len());
        for k in 0..n {
            let row: Vec<String> = self.curves.iter().map(|c| fmt_f64(c.values[k])).collect();
            writeln!(w, "{},{}", fmt_f64((k + 1) as f64 * self.delta), row.join(","))?;
        }
        Ok(())
    }
}

pub fn run_ergodicity(
    model: &SddeModel,
    c: &ErgodicityConfig,
    solver: &ImplicitSolveConfig,
) -> Result<ErgodicityReport> {
    check_paths(c.paths)?;
    if c.initials.len() < 2 {
        return Err(Error::usage("ergodicity study needs at least two initial segments"));
    }
    if c.observables.is_empty() {
        return Err(Error::usage("ergodicity study needs at least one observable"));
    }
    let grid = TimeGrid::from_step(model.tau(), c.delta, c.horizon)?;
    solver.validate()?;
    let (n, nm, no) = (grid.n(), model.noise_dim(), c.observables.len());
    let mut curves = Vec::new();
    for h in &c.initials {
        let m = model.with_initial_history(h.clone());
        let per = per_path(c.paths, |i| {
            let inc = path_increments(c.seed, i as u64, &grid, nm);
            let mut sums = vec![0.0; no];
            let mut avgs = vec![0.0; no * n];
            integrate_observed(&m, &grid, &inc, solver, |buf| {
                let k = buf.index();
                if k > 0 {
                    for (o, obs) in c.observables.iter().enumerate() {
                        sums[o] += obs.eval(buf.latest());
                        avgs[o * n + k as usize - 1] = sums[o] / k as f64;
                    }
                }
            })?;
            Ok(avgs)
        })?;
        let mut mean = vec![0.0; no * n];
        for p in &per {
            for (a, v) in mean.iter_mut().zip(p) {
                *a += v;
            }
        }
        for (o, obs) in c.observables.iter().enumerate() {
            curves.push(ErgodicityCurve {
                initial: h.label(),
                observable: obs.label(),
                values: mean[o * n..(o + 1) * n].iter().map(|s| s / c.paths as f64).collect(),
            });
        }
    }
    let terminal_spread = c
        .observables
        .iter()
        .enumerate()
        .map(|(o, obs)| {
            let ends: Vec<f64> = curves.iter().skip(o).step_by(no).map(|cv| cv.values[n - 1]).collect();
            let mut spread: f64 = 0.0;
            for a in &ends {
                for b in &ends {
                    spread = spread.max((a - b).abs());
                }
            }
            (obs.label(), spread)
        })
        .collect();
    Ok(ErgodicityReport {
        model: model.name().to_string(),
        seed: c.seed,
        path_count: c.paths,
        delta: grid.delta(),
        horizon: grid.horizon(),
        curves,
        terminal_spread,
    })
}

// ---------------------------------------------------------------------------
// moments

fn default_p() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentConfig {
    pub horizon: f64,
    pub delta: f64,
    pub paths: usize,
    pub seed: u64,
    #[serde(default = "default_p")]
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentReport {
    pub model: String,
    pub seed: u64,
    pub path_count: usize,
    pub delta: f64,
    pub horizon: f64,
    pub p: f64,
    /// Node times `t_0 .. t_N`.
    pub times: Vec<f64>,
    /// Sample mean of the first coordinate.
    pub mean: Vec<f64>,
    /// Unbiased sample variance of the first coordinate.
    pub variance: Vec<f64>,
    /// Sample mean of `|X_k|^p`.
    pub abs_moment: Vec<f64>,
}

impl MomentReport {
    /// `sup` of the `E|X|^p` estimate over `lo <= t <= hi`.
    pub fn sup_abs_moment(&self, lo: f64, hi: f64) -> f64 {
        let eps = 1e-9 * hi.abs().max(1.0);
        self.times
            .iter()
            .zip(&self.abs_moment)
            .filter(|(&t, _)| t >= lo - eps && t <= hi + eps)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

impl Report for MomentReport {
    fn stem(&self) -> String {
        report_stem("moments", &self.model, self.seed, self.delta, self.horizon)
    }

    fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "t,mean,variance,abs_moment")?;
        for k in 0..self.times.len() {
            writeln!(
                w,
                "{},{},{},{}",
                fmt_f64(self.times[k]),
                fmt_f64(self.mean[k]),
                fmt_f64(self.variance[k]),
                fmt_f64(self.abs_moment[k])
            )?;
        }
        Ok(())
    }
}

pub fn run_moments(model: &SddeModel, c: &MomentConfig, solver: &ImplicitSolveConfig) -> Result<MomentReport> {
    check_paths(c.paths)?;
    if !(c.p > 0.0 && c.p.is_finite()) {
        return Err(Error::usage("moment order must be positive"));
    }
    let grid = TimeGrid::from_step(model.tau(), c.delta, c.horizon)?;
    solver.validate()?;
    let nm = model.noise_dim();
    let per = per_path(c.paths, |i| {
        let inc = path_increments(c.seed, i as u64, &grid, nm);
        let mut vals = Vec::with_capacity(2 * (grid.n() + 1));
        integrate_observed(model, &grid, &inc, solver, |buf| {
            let x = buf.latest();
            vals.push(x[0]);
            vals.push(abs_pow(euclidean_norm(x), c.p));
        })?;
        Ok(vals)
    })?;
    let nodes = grid.n() + 1;
    let np = c.paths as f64;
    let (mut mean, mut abs_moment) = (vec![0.0; nodes], vec![0.0; nodes]);
    for p in &per {
        for k in 0..nodes {
            mean[k] += p[2 * k];
            abs_moment[k] += p[2 * k + 1];
        }
    }
    mean.iter_mut().for_each(|v| *v /= np);
    abs_moment.iter_mut().for_each(|v| *v /= np);
    let mut variance = vec![0.0; nodes];
    if c.paths > 1 {
        for p in &per {
            for k in 0..nodes {
                let r = p[2 * k] - mean[k];
                variance[k] += r * r;
            }
        }
        variance.iter_mut().for_each(|v| *v /= np - 1.0);
    }
    Ok(MomentReport {
        model: model.name().to_string(),
        seed: c.seed,
        path_count: c.paths,
        delta: grid.delta(),
        horizon: grid.horizon(),
        p: c.p,
        times: (0..nodes as i64).map(|k| grid.t(k)).collect(),
        mean,
        variance,
        abs_moment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_model;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn solver() -> ImplicitSolveConfig {
        ImplicitSolveConfig::default()
    }

    fn strong(delta_ref: f64, delta: f64, paths: usize) -> StrongErrorConfig {
        StrongErrorConfig {
            horizon: 2.0,
            delta_ref,
            delta,
            paths,
            seed: 7,
            checkpoint_stride: None,
        }
    }

    #[test]
    fn equal_steps_give_zero_error() {
        let m = builtin_model("ex1-cubic").unwrap();
        let r = run_strong_error(&m, &strong(0.05, 0.05, 8), &solver()).unwrap();
        assert_eq!(r.times, vec![0.0, 1.0, 2.0]);
        assert!(r.e_strong.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn strong_error_nonnegative_and_zero_at_start() {
        let m = builtin_model("ex1-cubic").unwrap();
        let mut c = strong(0.01, 0.05, 16);
        c.checkpoint_stride = Some(4);
        let r = run_strong_error(&m, &c, &solver()).unwrap();
        assert_eq!(r.times.len(), 11);
        assert_eq!(r.e_strong[0], 0.0);
        assert!(r.e_strong.iter().all(|&e| e >= 0.0));
        assert!(r.e_strong[1..].iter().any(|&e| e > 0.0));
        assert_relative_eq!(r.ratio[3], r.e_strong[3] / 0.05);
    }

    #[test]
    fn zero_noise_error_is_path_count_independent() {
        let m = builtin_model("zero-noise-linear").unwrap();
        let a = run_strong_error(&m, &strong(0.01, 0.1, 1), &solver()).unwrap();
        let b = run_strong_error(&m, &strong(0.01, 0.1, 5), &solver()).unwrap();
        for (x, y) in a.e_strong.iter().zip(&b.e_strong) {
            assert_relative_eq!(x, y, max_relative = 1e-12);
        }
        // (1 + 0.01)^{-100} vs (1 + 0.1)^{-10} at t = 1
        let want = (1.01f64.powi(-100) - 1.1f64.powi(-10)).powi(2);
        assert_relative_eq!(a.e_strong[1], want, max_relative = 1e-10);
    }

    #[test]
    fn incompatible_grids_rejected() {
        let m = builtin_model("ex1-cubic").unwrap();
        assert!(run_strong_error(&m, &strong(0.03, 0.05, 2), &solver()).is_err());
        assert!(run_strong_error(&m, &strong(0.05, 0.01, 2), &solver()).is_err());
        assert!(run_strong_error(&m, &strong(0.01, 0.05, 0), &solver()).is_err());
        let mut c = strong(0.01, 0.05, 2);
        c.horizon = 1.01;
        assert!(run_strong_error(&m, &c, &solver()).is_err());
    }

    #[test]
    fn coarse_increments_are_block_sums() {
        let fine = TimeGrid::new(1.0, 40, 80).unwrap();
        for i in 0..4u64 {
            let f = path_increments(3, i, &fine, 1);
            let c = coarsen_increments(&f, 1, 8);
            for (b, s) in f.chunks_exact(8).zip(&c) {
                assert!((b.iter().sum::<f64>() - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn regression_identities() {
        let ds = [0.1, 0.05, 0.025, 0.0125];
        let pts: Vec<_> = ds.iter().map(|&d: &f64| (d, d.sqrt())).collect();
        let (s, i) = fit_log_log(&pts).unwrap();
        assert!((s - 0.5).abs() <= 1e-12);
        assert!(i.abs() <= 1e-12);
        let flat: Vec<_> = ds.iter().map(|&d| (d, 0.3)).collect();
        assert!(fit_log_log(&flat).unwrap().0.abs() <= 1e-12);
        assert!(fit_log_log(&[(0.1, 0.0), (0.2, 1.0)]).is_err());
        assert!(fit_log_log(&[(0.1, 1.0), (0.1, 2.0)]).is_err());
    }

    #[test]
    fn rate_needs_four_deltas() {
        let m = builtin_model("ex1-cubic").unwrap();
        let c = RateConfig {
            horizon: 1.0,
            deltas: vec![0.5, 0.25, 0.125],
            delta_ref: 1.0 / 64.0,
            paths: 2,
            seed: 0,
        };
        assert!(matches!(run_rate_regression(&m, &c, &solver()), Err(Error::Usage(_))));
    }

    #[test]
    fn rate_on_linear_model() {
        // deterministic first-order scheme: RMS error tracks delta
        let m = builtin_model("zero-noise-linear").unwrap();
        let c = RateConfig {
            horizon: 1.0,
            deltas: vec![1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0],
            delta_ref: 1.0 / 8192.0,
            paths: 1,
            seed: 0,
        };
        let r = run_rate_regression(&m, &c, &solver()).unwrap();
        assert_eq!(r.entries.len(), 4);
        assert!((r.slope - 1.0).abs() < 0.1, "{}", r.slope);
    }

    fn invariant(paths: usize, alt: InitialHistory) -> InvariantConfig {
        InvariantConfig {
            t_ref: 3.0,
            compare_times: vec![1.0, 2.0, 3.0],
            delta: 0.05,
            paths,
            seed: 11,
            initial: None,
            alt_initial: alt,
            dl_times: None,
            independent_blocks: false,
        }
    }

    #[test]
    fn same_block_at_reference_time_gives_zero_ks() {
        let m = builtin_model("ex1-cubic").unwrap();
        let r = run_invariant_study(&m, &invariant(20, InitialHistory::Cos), &solver()).unwrap();
        assert_eq!(r.ks[2], 0.0);
        assert!(r.ks[0] > 0.0);
        assert_eq!(r.dl_times, vec![1.0, 2.0, 3.0]);
        assert!(r.dl_bound.iter().all(|&v| v == 0.0));
        assert_eq!(r.dl_at(2.0), Some(0.0));
    }

    #[test]
    fn coupled_distance_shrinks() {
        let m = builtin_model("ex1-cubic").unwrap();
        let mut c = invariant(20, InitialHistory::Constant { value: -2.0 });
        c.independent_blocks = true;
        let r = run_invariant_study(&m, &c, &solver()).unwrap();
        assert!(r.dl_bound.iter().all(|&v| (0.0..=2.0).contains(&v)));
        assert!(r.dl_bound[2] < r.dl_bound[0]);
        assert!(r.ks.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn off_grid_compare_time_rejected() {
        let m = builtin_model("ex1-cubic").unwrap();
        let mut c = invariant(2, InitialHistory::Cos);
        c.compare_times = vec![1.01];
        assert!(run_invariant_study(&m, &c, &solver()).is_err());
    }

    fn ergodic(initials: Vec<InitialHistory>, observables: Vec<Observable>) -> ErgodicityConfig {
        ErgodicityConfig {
            horizon: 2.0,
            delta: 0.05,
            paths: 6,
            seed: 5,
            observables,
            initials,
        }
    }

    #[test]
    fn identical_initials_have_zero_spread() {
        let m = builtin_model("ex1-cubic").unwrap();
        let c = ergodic(vec![InitialHistory::Cos, InitialHistory::Cos], default_observables());
        let r = run_ergodicity(&m, &c, &solver()).unwrap();
        assert_eq!(r.curves.len(), 4);
        assert!(r.terminal_spread.iter().all(|(_, s)| *s == 0.0));
    }

    #[test]
    fn constant_observable_curves_are_constant() {
        let m = builtin_model("ex1-cubic").unwrap();
        let c = ergodic(default_initials(), vec![Observable::Constant { value: 0.7 }]);
        let r = run_ergodicity(&m, &c, &solver()).unwrap();
        for cv in &r.curves {
            assert!(cv.values.iter().all(|&v| (v - 0.7).abs() <= 1e-12));
        }
        assert!(r.terminal_spread[0].1 <= 1e-12);
    }

    #[test]
    fn ergodicity_needs_two_initials() {
        let m = builtin_model("ex1-cubic").unwrap();
        let c = ergodic(vec![InitialHistory::Cos], default_observables());
        assert!(run_ergodicity(&m, &c, &solver()).is_err());
    }

    #[test]
    fn zero_noise_moments_match_closed_form() {
        let m = builtin_model("zero-noise-linear").unwrap();
        let c = MomentConfig {
            horizon: 2.0,
            delta: 0.5,
            paths: 3,
            seed: 0,
            p: 2.0,
        };
        let r = run_moments(&m, &c, &solver()).unwrap();
        for k in 0..r.times.len() {
            let x = (2.0f64 / 3.0).powi(k as i32);
            assert_relative_eq!(r.mean[k], x, max_relative = 1e-12);
            assert_relative_eq!(r.abs_moment[k], x * x, max_relative = 1e-12);
            assert!(r.variance[k] <= 1e-28);
        }
        assert_relative_eq!(r.sup_abs_moment(1.0, 2.0), 16.0 / 81.0, max_relative = 1e-12);
    }

    #[test]
    fn reports_identical_across_pools() {
        let m = builtin_model("ex1-cubic").unwrap();
        let run = || {
            let mut c = invariant(12, InitialHistory::Constant { value: -2.0 });
            c.independent_blocks = true;
            let a = run_invariant_study(&m, &c, &solver()).unwrap();
            let b = run_strong_error(&m, &strong(0.01, 0.05, 12), &solver()).unwrap();
            let e = run_ergodicity(&m, &ergodic(default_initials(), default_observables()), &solver()).unwrap();
            (
                serde_json::to_string(&a).unwrap(),
                serde_json::to_string(&b).unwrap(),
                serde_json::to_string(&e).unwrap(),
            )
        };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        assert_eq!(one.install(run), four.install(run));
    }

    #[test]
    fn stems_embed_parameters() {
        assert_eq!(
            report_stem("rate", "ex1-cubic[1+cos]", 42, 0.01, 20.0),
            "rate_ex1-cubic-1-cos_seed42_dt0.01_T20"
        );
    }

    #[test]
    fn write_report_emits_json_and_csv() {
        let m = builtin_model("zero-noise-linear").unwrap();
        let r = run_strong_error(&m, &strong(0.05, 0.1, 2), &solver()).unwrap();
        let dir = std::env::temp_dir().join(format!("sdde-bem-report-{}", std::process::id()));
        let files = write_report(&r, &dir).unwrap();
        let csv = std::fs::read_to_string(&files[1]).unwrap();
        assert_eq!(csv.lines().count(), r.times.len() + 1);
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&files[0]).unwrap()).unwrap();
        assert_eq!(json["path_count"], 2);
        std::fs::remove_dir_all(dir).unwrap();
    }

    proptest! {
        #[test]
        fn slope_invariant_under_rescaling(scale in 1e-3f64..1e3, e in prop::collection::vec(1e-3f64..1.0, 4)) {
            let ds = [0.1, 0.05, 0.025, 0.0125];
            let a: Vec<_> = ds.iter().copied().zip(e.iter().copied()).collect();
            let b: Vec<_> = a.iter().map(|&(d, v)| (d, v * scale)).collect();
            let (sa, ia) = fit_log_log(&a).unwrap();
            let (sb, ib) = fit_log_log(&b).unwrap();
            prop_assert!((sa - sb).abs() <= 1e-9 * (1.0 + sa.abs()));
            prop_assert!((ib - ia - scale.ln()).abs() <= 1e-9 * (1.0 + ia.abs()));
        }
    }
}
