//! Coefficient interface and builtin models.
//!
//! Coefficients are plain closures over slices so that the integrator can
//! evaluate them without allocating. A model is immutable once built and
//! cheap to clone; every closure is shared behind an `Arc` and must be pure.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(x, y, out)`: writes a vector or matrix valued coefficient into `out`.
pub type CoefficientFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(t, out)`: writes `xi(t)` into `out`.
pub type HistoryFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;
/// `(z, out)`: one half of a split diffusion, `g1(x)` or `g2(y)`.
pub type SplitFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// A point of `R^d`. All entries are finite.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVec(Vec<f64>);

impl StateVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::usage(format!("state vector entry {v} is not finite")));
        }
        Ok(StateVec(values))
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(vec![v])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        euclidean_norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for StateVec {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Frobenius norm (the trace norm `sqrt(tr(A^T A))`).
    pub fn norm(&self) -> f64 {
        euclidean_norm(&self.data)
    }
}

pub(crate) fn euclidean_norm(v: &[f64]) -> f64 {
    if v.len() == 1 {
        v[0].abs()
    } else {
        v.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// The split `|g(x,y) - g(x',y')|^2 <= e1 |g1(x) - g1(x')|^2 + e2 |g2(y) - g2(y')|^2`
/// used by the coefficient auditor.
#[derive(Clone)]
pub struct DiffusionSplit {
    pub g1: SplitFn,
    pub g2: SplitFn,
}

/// Initial segments that can be named in configuration files.
///
/// Scalar shapes are applied to every state component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialHistory {
    /// `cos t`
    Cos,
    /// `1 + cos t`
    OnePlusCos,
    /// `intercept + slope * t`
    Affine { intercept: f64, slope: f64 },
    Constant { value: f64 },
    /// `scale * (-t)^exponent`
    Power { scale: f64, exponent: f64 },
}

impl InitialHistory {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            InitialHistory::Cos => t.cos(),
            InitialHistory::OnePlusCos => 1.0 + t.cos(),
            InitialHistory::Affine { intercept, slope } => intercept + slope * t,
            InitialHistory::Constant { value } => value,
            InitialHistory::Power { scale, exponent } => scale * (-t).max(0.0).powf(exponent),
        }
    }

    pub fn label(&self) -> String {
        match self {
            InitialHistory::Cos => "cos".into(),
            InitialHistory::OnePlusCos => "1+cos".into(),
            InitialHistory::Affine { intercept, slope } => format!("{intercept}+{slope}t"),
            InitialHistory::Constant { value } => format!("const{value}"),
            InitialHistory::Power { scale, exponent } => format!("{scale}(-t)^{exponent}"),
        }
    }

    fn into_fn(self) -> HistoryFn {
        Arc::new(move |t, out: &mut [f64]| {
            let v = self.eval(t);
            out.iter_mut().for_each(|o| *o = v);
        })
    }
}

/// A stochastic delay differential equation with a single discrete delay.
#[derive(Clone)]
pub struct SddeModel {
    name: String,
    d: usize,
    m: usize,
    tau: f64,
    drift: CoefficientFn,
    diffusion: CoefficientFn,
    drift_jacobian_x: Option<CoefficientFn>,
    initial_history: HistoryFn,
    diffusion_split: Option<DiffusionSplit>,
}

impl fmt::Debug for SddeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SddeModel")
            .field("name", &self.name)
            .field("d", &self.d)
            .field("m", &self.m)
            .field("tau", &self.tau)
            .field("has_jacobian", &self.drift_jacobian_x.is_some())
            .field("has_split", &self.diffusion_split.is_some())
            .finish()
    }
}

pub struct SddeModelBuilder {
    name: String,
    d: usize,
    m: usize,
    tau: f64,
    drift: Option<CoefficientFn>,
    diffusion: Option<CoefficientFn>,
    drift_jacobian_x: Option<CoefficientFn>,
    initial_history: Option<HistoryFn>,
    diffusion_split: Option<DiffusionSplit>,
}

impl SddeModelBuilder {
    pub fn drift(mut self, f: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Some(Arc::new(f));
        self
    }

    /// `out` is the `d x m` matrix in row-major order.
    pub fn diffusion(
        mut self,
        g: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.diffusion = Some(Arc::new(g));
        self
    }

    /// `d x d` row-major Jacobian of the drift in its first argument.
    pub fn drift_jacobian_x(
        mut self,
        j: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.drift_jacobian_x = Some(Arc::new(j));
        self
    }

    pub fn initial_history(mut self, xi: impl Fn(f64, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.initial_history = Some(Arc::new(xi));
        self
    }

    pub fn diffusion_split(
        mut self,
        g1: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        g2: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.diffusion_split = Some(DiffusionSplit {
            g1: Arc::new(g1),
            g2: Arc::new(g2),
        });
        self
    }

    pub fn build(self) -> Result<SddeModel> {
        if self.d == 0 || self.m == 0 {
            return Err(Error::usage("state and noise dimensions must be positive"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::usage(format!("delay must be positive, got {}", self.tau)));
        }
        let missing = |what: &str| Error::usage(format!("model `{}` has no {what}", self.name));
        Ok(SddeModel {
            drift: self.drift.clone().ok_or_else(|| missing("drift"))?,
            diffusion: self.diffusion.clone().ok_or_else(|| missing("diffusion"))?,
            initial_history: self
                .initial_history
                .clone()
                .ok_or_else(|| missing("initial history"))?,
            name: self.name,
            d: self.d,
            m: self.m,
            tau: self.tau,
            drift_jacobian_x: self.drift_jacobian_x,
            diffusion_split: self.diffusion_split,
        })
    }
}

impl SddeModel {
    pub fn builder(name: impl Into<String>, d: usize, m: usize, tau: f64) -> SddeModelBuilder {
        SddeModelBuilder {
            name: name.into(),
            d,
            m,
            tau,
            drift: None,
            diffusion: None,
            drift_jacobian_x: None,
            initial_history: None,
            diffusion_split: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn noise_dim(&self) -> usize {
        self.m
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn has_jacobian(&self) -> bool {
        self.drift_jacobian_x.is_some()
    }

    pub fn diffusion_split(&self) -> Option<&DiffusionSplit> {
        self.diffusion_split.as_ref()
    }

    /// Same coefficients, different initial segment.
    pub fn with_initial_history(&self, history: InitialHistory) -> SddeModel {
        let mut model = self.clone();
        model.name = format!("{}[{}]", self.name, history.label());
        model.initial_history = history.into_fn();
        model
    }

    pub fn with_initial_fn(
        &self,
        label: &str,
        xi: impl Fn(f64, &mut [f64]) + Send + Sync + 'static,
    ) -> SddeModel {
        let mut model = self.clone();
        model.name = format!("{}[{label}]", self.name);
        model.initial_history = Arc::new(xi);
        model
    }

    fn check_dims(&self, x: &StateVec, y: &StateVec) -> Result<()> {
        if x.len() != self.d || y.len() != self.d {
            return Err(Error::usage(format!(
                "model `{}` expects states of length {}, got {} and {}",
                self.name,
                self.d,
                x.len(),
                y.len()
            )));
        }
        Ok(())
    }

    fn non_finite(&self, what: &'static str, x: &[f64], y: &[f64]) -> Error {
        Error::ModelEvaluation {
            model: self.name.clone(),
            what,
            x: x.to_vec(),
            y: y.to_vec(),
        }
    }

    pub fn eval_drift(&self, x: &StateVec, y: &StateVec) -> Result<StateVec> {
        self.check_dims(x, y)?;
        let mut out = vec![0.0; self.d];
        self.drift_into(x.as_slice(), y.as_slice(), &mut out);
        StateVec::new(out).map_err(|_| self.non_finite("drift", x.as_slice(), y.as_slice()))
    }

    pub fn eval_diffusion(&self, x: &StateVec, y: &StateVec) -> Result<Matrix> {
        self.check_dims(x, y)?;
        let mut data = vec![0.0; self.d * self.m];
        self.diffusion_into(x.as_slice(), y.as_slice(), &mut data);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(self.non_finite("diffusion", x.as_slice(), y.as_slice()));
        }
        Ok(Matrix {
            rows: self.d,
            cols: self.m,
            data,
        })
    }

    /// `None` when the model carries no analytic Jacobian.
    pub fn eval_drift_jacobian(&self, x: &StateVec, y: &StateVec) -> Option<Result<Matrix>> {
        let jac = self.drift_jacobian_x.as_ref()?;
        Some(self.check_dims(x, y).and_then(|_| {
            let mut data = vec![0.0; self.d * self.d];
            jac(x.as_slice(), y.as_slice(), &mut data);
            if data.iter().any(|v| !v.is_finite()) {
                return Err(self.non_finite("drift jacobian", x.as_slice(), y.as_slice()));
            }
            Ok(Matrix {
                rows: self.d,
                cols: self.d,
                data,
            })
        }))
    }

    /// `xi(t)` for `t` in `[-tau, 0]`.
    pub fn eval_initial(&self, t: f64) -> Result<StateVec> {
        let slack = 1e-12 * self.tau;
        if !(t >= -self.tau - slack && t <= slack) {
            return Err(Error::usage(format!(
                "initial history of `{}` is defined on [-{}, 0], got t = {t}",
                self.name, self.tau
            )));
        }
        let mut out = vec![0.0; self.d];
        self.history_into(t, &mut out);
        StateVec::new(out).map_err(|_| self.non_finite("initial history", &[t], &[]))
    }

    #[inline]
    pub(crate) fn drift_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.drift)(x, y, out)
    }

    #[inline]
    pub(crate) fn diffusion_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, y, out)
    }

    #[inline]
    pub(crate) fn jacobian_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) -> bool {
        match &self.drift_jacobian_x {
            Some(j) => {
                j(x, y, out);
                true
            }
            None => false,
        }
    }

    pub(crate) fn history_fn(&self) -> HistoryFn {
        let tau = self.tau;
        let xi = self.initial_history.clone();
        Arc::new(move |t, out: &mut [f64]| xi(t.clamp(-tau, 0.0), out))
    }

    /// Clamps `t` into `[-tau, 0]` so grid times that miss the ends by an
    /// ulp still evaluate.
    #[inline]
    pub(crate) fn history_into(&self, t: f64, out: &mut [f64]) {
        (self.initial_history)(t.clamp(-self.tau, 0.0), out)
    }
}

/// Mean reversion rate of `ou-linear`.
pub const OU_THETA: f64 = 1.0;
/// Noise intensity of `ou-linear`.
pub const OU_SIGMA: f64 = 0.5;
/// Constant initial value of `ou-linear`.
pub const OU_X0: f64 = 1.0;

fn ex1_cubic() -> SddeModel {
    SddeModel::builder("ex1-cubic", 1, 1, 1.0)
        .drift(|x, _y, out| out[0] = 10.0 - x[0] - 10.0 * x[0] * x[0] * x[0])
        .diffusion(|_x, y, out| out[0] = y[0] * y[0])
        .drift_jacobian_x(|x, _y, out| out[0] = -1.0 - 30.0 * x[0] * x[0])
        .initial_history(|t, out| out[0] = t.cos())
        .diffusion_split(|_x, out| out[0] = 0.0, |y, out| out[0] = y[0] * y[0])
        .build()
        .expect("builtin model is well formed")
}

fn ou_linear() -> SddeModel {
    SddeModel::builder("ou-linear", 1, 1, 1.0)
        .drift(|x, _y, out| out[0] = -OU_THETA * x[0])
        .diffusion(|_x, _y, out| out[0] = OU_SIGMA)
        .drift_jacobian_x(|_x, _y, out| out[0] = -OU_THETA)
        .initial_history(|_t, out| out[0] = OU_X0)
        .diffusion_split(|_x, out| out[0] = 0.0, |_y, out| out[0] = 0.0)
        .build()
        .expect("builtin model is well formed")
}

fn zero_noise_linear() -> SddeModel {
    SddeModel::builder("zero-noise-linear", 1, 1, 1.0)
        .drift(|x, _y, out| out[0] = -x[0])
        .diffusion(|_x, _y, out| out[0] = 0.0)
        .drift_jacobian_x(|_x, _y, out| out[0] = -1.0)
        .initial_history(|_t, out| out[0] = 1.0)
        .diffusion_split(|_x, out| out[0] = 0.0, |_y, out| out[0] = 0.0)
        .build()
        .expect("builtin model is well formed")
}

pub fn builtin_models() -> Vec<SddeModel> {
    vec![ex1_cubic(), ou_linear(), zero_noise_linear()]
}

pub fn builtin_model(name: &str) -> Result<SddeModel> {
    builtin_models()
        .into_iter()
        .find(|m| m.name == name)
        .ok_or_else(|| {
            let known: Vec<_> = builtin_models().iter().map(|m| m.name.clone()).collect();
            Error::usage(format!("unknown model `{name}` (known: {})", known.join(", ")))
        })
}
