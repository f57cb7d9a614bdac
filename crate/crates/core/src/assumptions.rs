//! Numeric auditor for the structural conditions on drift, diffusion and
//! initial data.
//!
//! Each displayed inequality `LHS <= RHS` is evaluated on a tensor grid over
//! `[-B, B]` (one axis per scalar argument) plus uniformly random points, and
//! the worst margin `LHS - RHS` is reported. A point counts as a violation
//! when its margin exceeds a rounding slack of `1e-9 * (1 + |LHS| + |RHS|)`.
//! A clean audit is evidence on the sampled points, not a proof.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brownian::stream_seed;
use crate::constants::{AssumptionConstants, HeaderCheck};
use crate::error::{Error, Result};
use crate::model::{euclidean_norm, SddeModel};
use crate::segment::abs_pow;

/// Largest tensor grid evaluated per inequality.
const MAX_GRID_POINTS: u64 = 50_000_000;
const SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// Arguments are sampled from `[-half_width, half_width]^d`.
    pub half_width: f64,
    pub grid_points: usize,
    pub random_samples: usize,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            half_width: 2.0,
            grid_points: 41,
            random_samples: 10_000,
            seed: 0,
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            return Err(Error::usage("audit half-width must be positive"));
        }
        if self.grid_points == 0 && self.random_samples == 0 {
            return Err(Error::usage("audit needs grid points or random samples"));
        }
        if self.grid_points == 1 && self.random_samples == 0 {
            return Err(Error::usage("a one-point grid per axis needs random samples as well"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditEntry {
    pub id: String,
    pub assumption: u8,
    /// Largest `LHS - RHS` found; positive means the inequality failed there.
    pub margin: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub violated: bool,
    pub worst_point: Vec<f64>,
    pub arguments: String,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub model: String,
    pub entries: Vec<AuditEntry>,
    pub header: Vec<HeaderCheck>,
    pub samples_evaluated: usize,
    pub violations: usize,
    pub summary: String,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

type IneqFn<'a> = Box<dyn Fn(&[f64]) -> (f64, f64) + Send + Sync + 'a>;

/// One sampled inequality `lhs(p) <= rhs(p)` over the point `p`.
pub struct Inequality<'a> {
    pub id: &'static str,
    pub assumption: u8,
    /// Names of the vector arguments, each of length `d`, concatenated in `p`.
    pub arguments: &'static [&'static str],
    eval: IneqFn<'a>,
}

impl Inequality<'_> {
    /// `(lhs, rhs)` at `p`.
    pub fn eval(&self, p: &[f64]) -> (f64, f64) {
        (self.eval)(p)
    }

    pub fn margin(&self, p: &[f64]) -> f64 {
        let (l, r) = self.eval(p);
        l - r
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == 1 {
        (a[0] - b[0]).abs()
    } else {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }
}

/// `V(x, y) = |x - y|^2 (|x|^{q-1} + |y|^{q-1})`.
pub fn lyapunov_v(x: &[f64], y: &[f64], q: f64) -> f64 {
    let d = diff_norm(x, y);
    d * d * (abs_pow(euclidean_norm(x), q - 1.0) + abs_pow(euclidean_norm(y), q - 1.0))
}

struct Eval<'a> {
    model: &'a SddeModel,
    d: usize,
    dm: usize,
}

impl Eval<'_> {
    fn drift(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.model.drift_into(x, y, &mut out);
        out
    }

    fn diffusion(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dm];
        self.model.diffusion_into(x, y, &mut out);
        out
    }

    fn g1(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dm];
        if let Some(s) = self.model.diffusion_split() {
            (s.g1)(x, &mut out);
        }
        out
    }

    fn g2(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dm];
        if let Some(s) = self.model.diffusion_split() {
            (s.g2)(y, &mut out);
        }
        out
    }
}

fn evaluator(model: &SddeModel) -> Eval<'_> {
    Eval {
        model,
        d: model.dim(),
        dm: model.dim() * model.noise_dim(),
    }
}

/// The growth and polynomial-Lipschitz conditions on `f` and `g`.
///
/// The growth bounds are read as `|f| <= a6 (1 + |x|^q + |y|^q)` and
/// `|g|^2 <= a7 + a8 |x|^{q+1} + a9 |y|^{q+1}`.
pub fn assumption1_inequalities<'a>(model: &'a SddeModel, c: &'a AssumptionConstants) -> Result<Vec<Inequality<'a>>> {
    if (c.eps1 > 0.0 || c.eps2 > 0.0) && model.diffusion_split().is_none() {
        return Err(Error::usage(format!(
            "model `{}` has no g1/g2 diffusion split but eps1 or eps2 is nonzero",
            model.name()
        )));
    }
    let d = model.dim();
    let q = c.q;
    let pw = |v: &[f64], p: f64| abs_pow(euclidean_norm(v), p);
    let e = evaluator(model);
    let e = std::sync::Arc::new(e);
    let (e1, e2, e3, e4, e5, e6) = (e.clone(), e.clone(), e.clone(), e.clone(), e.clone(), e);
    Ok(vec![
        Inequality {
            id: "drift-lipschitz",
            assumption: 1,
            arguments: &["x", "xbar", "y", "ybar"],
            eval: Box::new(move |p| {
                let (x, xb, y, yb) = (&p[..d], &p[d..2 * d], &p[2 * d..3 * d], &p[3 * d..]);
                let lhs = diff_norm(&e1.drift(x, y), &e1.drift(xb, yb));
                let poly = 1.0 + pw(x, q - 1.0) + pw(xb, q - 1.0) + pw(y, q - 1.0) + pw(yb, q - 1.0);
                (lhs, c.a1 * poly * (diff_norm(x, xb) + diff_norm(y, yb)))
            }),
        },
        Inequality {
            id: "diffusion-split",
            assumption: 1,
            arguments: &["x", "xbar", "y", "ybar"],
            eval: Box::new(move |p| {
                let (x, xb, y, yb) = (&p[..d], &p[d..2 * d], &p[2 * d..3 * d], &p[3 * d..]);
                let lhs = diff_norm(&e2.diffusion(x, y), &e2.diffusion(xb, yb)).powi(2);
                let rhs = c.eps1 * diff_norm(&e2.g1(x), &e2.g1(xb)).powi(2)
                    + c.eps2 * diff_norm(&e2.g2(y), &e2.g2(yb)).powi(2);
                (lhs, rhs)
            }),
        },
        Inequality {
            id: "diffusion-g1",
            assumption: 1,
            arguments: &["x", "xbar"],
            eval: Box::new(move |p| {
                let (x, xb) = (&p[..d], &p[d..]);
                let lhs = c.eps1 * diff_norm(&e3.g1(x), &e3.g1(xb)).powi(2);
                (lhs, c.a2 * diff_norm(x, xb).powi(2) + c.a4 * lyapunov_v(x, xb, q))
            }),
        },
        Inequality {
            id: "diffusion-g2",
            assumption: 1,
            arguments: &["y", "ybar"],
            eval: Box::new(move |p| {
                let (y, yb) = (&p[..d], &p[d..]);
                let lhs = c.eps2 * diff_norm(&e4.g2(y), &e4.g2(yb)).powi(2);
                (lhs, c.a3 * diff_norm(y, yb).powi(2) + c.a5 * lyapunov_v(y, yb, q))
            }),
        },
        Inequality {
            id: "drift-growth",
            assumption: 1,
            arguments: &["x", "y"],
            eval: Box::new(move |p| {
                let (x, y) = (&p[..d], &p[d..]);
                let lhs = euclidean_norm(&e5.drift(x, y));
                (lhs, c.a6 * (1.0 + pw(x, q) + pw(y, q)))
            }),
        },
        Inequality {
            id: "diffusion-growth",
            assumption: 1,
            arguments: &["x", "y"],
            eval: Box::new(move |p| {
                let (x, y) = (&p[..d], &p[d..]);
                let lhs = euclidean_norm(&e6.diffusion(x, y)).powi(2);
                (lhs, c.a7 + c.a8 * pw(x, q + 1.0) + c.a9 * pw(y, q + 1.0))
            }),
        },
    ])
}

/// Monotonicity, the `p*`-moment Lyapunov bound and the Khasminskii bound.
pub fn assumption2_inequalities<'a>(model: &'a SddeModel, c: &'a AssumptionConstants) -> Vec<Inequality<'a>> {
    let d = model.dim();
    let q = c.q;
    let ps = c.p_star();
    let pw = |v: &[f64], p: f64| abs_pow(euclidean_norm(v), p);
    let e = std::sync::Arc::new(evaluator(model));
    let (e1, e2, e3) = (e.clone(), e.clone(), e);
    vec![
        Inequality {
            id: "monotonicity",
            assumption: 2,
            arguments: &["x", "xbar", "y", "ybar"],
            eval: Box::new(move |p| {
                let (x, xb, y, yb) = (&p[..d], &p[d..2 * d], &p[2 * d..3 * d], &p[3 * d..]);
                let (f, fb) = (e1.drift(x, y), e1.drift(xb, yb));
                let dx: Vec<f64> = x.iter().zip(xb).map(|(a, b)| a - b).collect();
                let df: Vec<f64> = f.iter().zip(&fb).map(|(a, b)| a - b).collect();
                let lhs = 2.0 * dot(&dx, &df);
                let rhs = -c.b1 * diff_norm(x, xb).powi(2) + c.b2 * diff_norm(y, yb).powi(2)
                    - c.b3 * lyapunov_v(x, xb, q);
                (lhs, rhs)
            }),
        },
        Inequality {
            id: "p-star-moment",
            assumption: 2,
            arguments: &["x", "y"],
            eval: Box::new(move |p| {
                let (x, y) = (&p[..d], &p[d..]);
                let f = e2.drift(x, y);
                let g2 = euclidean_norm(&e2.diffusion(x, y)).powi(2);
                let lhs = 0.5 * ps * pw(x, ps - 2.0) * (2.0 * dot(x, &f) + (ps - 1.0) * g2);
                let rhs = c.b4 - c.b5 * pw(x, ps) + c.b6 * pw(y, ps) - c.b7 * pw(x, ps + q - 1.0)
                    + c.b8 * pw(y, ps + q - 1.0);
                (lhs, rhs)
            }),
        },
        Inequality {
            id: "khasminskii",
            assumption: 2,
            arguments: &["x", "y"],
            eval: Box::new(move |p| {
                let (x, y) = (&p[..d], &p[d..]);
                let f = e3.drift(x, y);
                let g2 = euclidean_norm(&e3.diffusion(x, y)).powi(2);
                let lhs = 2.0 * dot(x, &f) + c.l2 * g2;
                let rhs = c.b9 - c.b10 * pw(x, 2.0) + c.b11 * pw(y, 2.0) - c.b12 * pw(x, q + 1.0)
                    + c.b13 * pw(y, q + 1.0);
                (lhs, rhs)
            }),
        },
    ]
}

#[derive(Clone, Copy)]
struct Worst {
    margin: f64,
    index: u64,
    violated: bool,
}

impl Worst {
    const NONE: Worst = Worst {
        margin: f64::NEG_INFINITY,
        index: u64::MAX,
        violated: false,
    };

    // max margin, ties to the lowest index; order independent
    fn combine(a: Worst, b: Worst) -> Worst {
        let pick = if a.margin > b.margin || (a.margin == b.margin && a.index < b.index) {
            a
        } else {
            b
        };
        Worst {
            violated: a.violated || b.violated,
            ..pick
        }
    }
}

fn is_violation(lhs: f64, rhs: f64) -> bool {
    let m = lhs - rhs;
    m.is_nan() || m > SLACK * (1.0 + lhs.abs() + rhs.abs())
}

/// Sample generator: index `i < grid_total` is a tensor-grid point, the rest
/// are random points drawn from a per-inequality stream.
struct Sampler {
    dims: usize,
    axis: Vec<f64>,
    grid_total: u64,
    random: usize,
    lo: f64,
    hi: f64,
    seed: u64,
}

impl Sampler {
    fn new(dims: usize, lo: f64, hi: f64, cfg: &AuditConfig, stream: u64) -> Result<Self> {
        let n = cfg.grid_points;
        let axis: Vec<f64> = match n {
            0 => vec![],
            1 => vec![0.5 * (lo + hi)],
            _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
        };
        let grid_total = if n == 0 {
            0
        } else {
            (n as u64)
                .checked_pow(dims as u32)
                .filter(|&t| t <= MAX_GRID_POINTS)
                .ok_or_else(|| {
                    Error::usage(format!(
                        "{n}^{dims} grid points exceed the audit limit; lower grid_points or use random samples"
                    ))
                })?
        };
        Ok(Sampler {
            dims,
            axis,
            grid_total,
            random: cfg.random_samples,
            lo,
            hi,
            seed: stream_seed(cfg.seed, stream),
        })
    }

    fn total(&self) -> u64 {
        self.grid_total + self.random as u64
    }

    fn grid_point(&self, mut i: u64, out: &mut [f64]) {
        let n = self.axis.len() as u64;
        for o in out.iter_mut().rev() {
            *o = self.axis[(i % n) as usize];
            i /= n;
        }
    }

    fn random_points(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.random * self.dims).map(|_| rng.random_range(self.lo..=self.hi)).collect()
    }
}

fn audit_over(ineq: &Inequality, sampler: &Sampler) -> AuditEntry {
    let dims = sampler.dims;
    let randoms = sampler.random_points();
    let point = |i: u64, buf: &mut Vec<f64>| {
        buf.resize(dims, 0.0);
        if i < sampler.grid_total {
            sampler.grid_point(i, buf);
        } else {
            let r = (i - sampler.grid_total) as usize;
            buf.copy_from_slice(&randoms[r * dims..(r + 1) * dims]);
        }
    };
    let worst = (0..sampler.total())
        .into_par_iter()
        .fold(
            || (Worst::NONE, Vec::new()),
            |(acc, mut buf), i| {
                point(i, &mut buf);
                let (l, r) = ineq.eval(&buf);
                let w = Worst {
                    margin: if (l - r).is_nan() { f64::INFINITY } else { l - r },
                    index: i,
                    violated: is_violation(l, r),
                };
                (Worst::combine(acc, w), buf)
            },
        )
        .map(|(w, _)| w)
        .reduce(|| Worst::NONE, Worst::combine);
    let mut p = Vec::new();
    point(worst.index, &mut p);
    let (lhs, rhs) = ineq.eval(&p);
    AuditEntry {
        id: ineq.id.to_string(),
        assumption: ineq.assumption,
        margin: worst.margin,
        lhs,
        rhs,
        violated: worst.violated,
        worst_point: p,
        arguments: ineq.arguments.join(","),
        samples: sampler.total() as usize,
    }
}

fn audit_list(list: &[Inequality], d: usize, cfg: &AuditConfig, stream_base: u64) -> Result<Vec<AuditEntry>> {
    cfg.validate()?;
    let b = cfg.half_width;
    list.iter()
        .enumerate()
        .map(|(i, ineq)| {
            let sampler = Sampler::new(ineq.arguments.len() * d, -b, b, cfg, stream_base + i as u64)?;
            Ok(audit_over(ineq, &sampler))
        })
        .collect()
}

pub fn audit_assumption1(model: &SddeModel, consts: &AssumptionConstants, cfg: &AuditConfig) -> Result<Vec<AuditEntry>> {
    consts.validate()?;
    let list = assumption1_inequalities(model, consts)?;
    audit_list(&list, model.dim(), cfg, 100)
}

/// Sampled entries plus the strict inequalities among the constants.
pub fn audit_assumption2(
    model: &SddeModel,
    consts: &AssumptionConstants,
    cfg: &AuditConfig,
) -> Result<(Vec<AuditEntry>, Vec<HeaderCheck>)> {
    consts.validate()?;
    let list = assumption2_inequalities(model, consts);
    Ok((audit_list(&list, model.dim(), cfg, 200)?, consts.header_checks()))
}

/// `|xi(t) - xi(s)|^2 <= K1 (t - s)` over sampled `-tau <= s < t <= 0`.
pub fn audit_assumption3(model: &SddeModel, k1: f64, cfg: &AuditConfig) -> Result<AuditEntry> {
    cfg.validate()?;
    if !(k1 >= 0.0 && k1.is_finite()) {
        return Err(Error::usage("K1 must be finite and nonnegative"));
    }
    let d = model.dim();
    let tau = model.tau();
    let ineq = Inequality {
        id: "holder-initial",
        assumption: 3,
        arguments: &["s", "t"],
        eval: Box::new(move |p| {
            let (s, t) = (p[0].min(p[1]), p[0].max(p[1]));
            if s == t {
                return (0.0, 0.0);
            }
            let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
            model.history_into(t, &mut a);
            model.history_into(s, &mut b);
            (diff_norm(&a, &b).powi(2), k1 * (t - s))
        }),
    };
    let sampler = Sampler::new(2, -tau, 0.0, cfg, 300)?;
    Ok(audit_over(&ineq, &sampler))
}

/// All three audits plus the header arithmetic.
pub fn audit_all(model: &SddeModel, consts: &AssumptionConstants, cfg: &AuditConfig) -> Result<AuditReport> {
    let mut entries = audit_assumption1(model, consts, cfg)?;
    let (a2, header) = audit_assumption2(model, consts, cfg)?;
    entries.extend(a2);
    entries.push(audit_assumption3(model, consts.k1, cfg)?);
    let samples_evaluated = entries.iter().map(|e| e.samples).sum();
    let violations =
        entries.iter().filter(|e| e.violated).count() + header.iter().filter(|h| !h.holds).count();
    let summary = if violations == 0 {
        format!("no violation found on {samples_evaluated} samples")
    } else {
        let ids: Vec<&str> = entries
            .iter()
            .filter(|e| e.violated)
            .map(|e| e.id.as_str())
            .chain(header.iter().filter(|h| !h.holds).map(|h| h.id))
            .collect();
        format!("{violations} violation(s) on {samples_evaluated} samples: {}", ids.join("; "))
    };
    Ok(AuditReport {
        model: model.name().to_string(),
        entries,
        header,
        samples_evaluated,
        violations,
        summary,
    })
}
