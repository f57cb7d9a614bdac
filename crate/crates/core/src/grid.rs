use serde::Serialize;

use crate::error::{Error, Result};

/// Uniform grid `t_k = k * delta`, `k = -M..N`, with `delta = tau / M`.
///
/// Only `tau`, `M` and `N` are stored; the step is always derived from them
/// so that the delay is an exact multiple of the step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimeGrid {
    tau: f64,
    m: usize,
    n: usize,
}

/// Relative tolerance when a user-supplied real must be an integer multiple.
const MULTIPLE_TOL: f64 = 1e-9;

fn integer_ratio(num: f64, den: f64, what: &str) -> Result<usize> {
    let r = num / den;
    let k = r.round();
    if !(r.is_finite() && k >= 0.0 && (r - k).abs() <= MULTIPLE_TOL * k.max(1.0)) {
        return Err(Error::usage(format!("{what}: {num} is not an integer multiple of {den}")));
    }
    Ok(k as usize)
}

impl TimeGrid {
    pub fn new(tau: f64, m: usize, n: usize) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::usage(format!("delay must be positive, got {tau}")));
        }
        if m == 0 {
            return Err(Error::usage("need at least one step per delay"));
        }
        Ok(TimeGrid { tau, m, n })
    }

    /// Grid with step `delta` up to `horizon`; `tau / delta` and
    /// `horizon / delta` must both be integers.
    pub fn from_step(tau: f64, delta: f64, horizon: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::usage(format!("step size must be positive, got {delta}")));
        }
        if !(horizon >= 0.0 && horizon.is_finite()) {
            return Err(Error::usage(format!("horizon must be nonnegative, got {horizon}")));
        }
        let m = integer_ratio(tau, delta, "delay vs step size")?;
        let n = integer_ratio(horizon, delta, "horizon vs step size")?;
        Self::new(tau, m, n)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Steps per delay.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Steps after time zero.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn delta(&self) -> f64 {
        self.tau / self.m as f64
    }

    pub fn t(&self, k: i64) -> f64 {
        k as f64 * self.delta()
    }

    pub fn horizon(&self) -> f64 {
        self.t(self.n as i64)
    }

    /// Number of nodes `-M..=N`.
    pub fn node_count(&self) -> usize {
        self.m + self.n + 1
    }

    /// Grid with step `ratio * delta` covering the same horizon.
    pub fn coarsen(&self, ratio: usize) -> Result<TimeGrid> {
        if ratio == 0 || !self.m.is_multiple_of(ratio) || !self.n.is_multiple_of(ratio) {
            return Err(Error::usage(format!(
                "coarsening ratio {ratio} must divide M = {} and N = {}",
                self.m, self.n
            )));
        }
        TimeGrid::new(self.tau, self.m / ratio, self.n / ratio)
    }

    /// `r` such that `self.coarsen(r) == coarse`.
    pub fn ratio_to(&self, coarse: &TimeGrid) -> Result<usize> {
        if self.tau != coarse.tau || coarse.m == 0 || !self.m.is_multiple_of(coarse.m) {
            return Err(Error::usage(format!(
                "step {} is not a refinement of step {}",
                self.delta(),
                coarse.delta()
            )));
        }
        let r = self.m / coarse.m;
        if coarse.n * r != self.n {
            return Err(Error::usage("grids cover different horizons"));
        }
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn from_step_integer_checks() {
        let g = TimeGrid::from_step(1.0, 0.01, 2.0).unwrap();
        assert_eq!((g.m(), g.n()), (100, 200));
        assert_eq!(g.node_count(), 301);
        assert!(TimeGrid::from_step(1.0, 0.3, 3.0).is_err());
        assert!(TimeGrid::from_step(1.0, 0.25, 0.6).is_err());
        assert!(TimeGrid::from_step(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn coarsen_requires_divisibility() {
        let g = TimeGrid::new(1.0, 100, 400).unwrap();
        let c = g.coarsen(10).unwrap();
        assert_eq!((c.m(), c.n()), (10, 40));
        assert_eq!(g.ratio_to(&c).unwrap(), 10);
        assert!(g.coarsen(3).is_err());
        assert!(g.coarsen(0).is_err());
        let other = TimeGrid::new(1.0, 10, 41).unwrap();
        assert!(g.ratio_to(&other).is_err());
    }

    proptest! {
        #[test]
        fn delta_times_m_recovers_tau(tau in 1e-3f64..1e3, m in 1usize..100_000) {
            let g = TimeGrid::new(tau, m, 0).unwrap();
            let back = g.delta() * m as f64;
            let ulp = f64::EPSILON * tau;
            prop_assert!((back - tau).abs() <= ulp, "{back} vs {tau}");
        }
    }
}
