//! Statistics over trajectories and segments.
//!
//! Everything here is a pure function of its inputs. Reductions over paths
//! run in path-index order, so results do not depend on how the inputs were
//! produced.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::euclidean_norm;
use crate::stepper::{Segment, Trajectory};

/// Sup-norm of a segment: the largest node norm.
///
/// Exact for the piecewise-linear interpolant, since a convex function of a
/// linear segment peaks at an endpoint.
pub fn segment_sup_norm(s: &Segment) -> f64 {
    s.window
        .chunks_exact(s.d)
        .map(euclidean_norm)
        .fold(0.0, f64::max)
}

/// Scalar samples of one observable at one time, one per path.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmpiricalMarginal {
    samples: Vec<f64>,
    pub time: f64,
    pub observable: String,
}

impl EmpiricalMarginal {
    pub fn new(samples: Vec<f64>, time: f64, observable: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::usage("empirical marginal needs at least one sample"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::usage("empirical marginal samples must be finite"));
        }
        Ok(EmpiricalMarginal {
            samples,
            time,
            observable: observable.into(),
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|` with
/// right-continuous empirical CDFs, evaluated at every distinct sample point.
pub fn ks_statistic(a: &EmpiricalMarginal, b: &EmpiricalMarginal) -> f64 {
    let mut xa = a.samples.clone();
    let mut xb = b.samples.clone();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len(), xb.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < na || j < nb {
        // next distinct point of the merged sample
        let x = match (xa.get(i), xb.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        while i < na && xa[i] <= x {
            i += 1;
        }
        while j < nb && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    d
}

/// Segment pairs `(A_i, B_i)` from two runs driven by the same noise.
#[derive(Clone, Debug)]
pub struct CouplingSample {
    pairs: Vec<(Segment, Segment)>,
}

impl CouplingSample {
    pub fn new(pairs: Vec<(Segment, Segment)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::usage("coupling sample needs at least one pair"));
        }
        let (a0, _) = &pairs[0];
        for (a, b) in &pairs {
            for s in [a, b] {
                if s.window.len() != a0.window.len() || s.d != a0.d || s.delta != a0.delta {
                    return Err(Error::usage("coupled segments must share M, d and delta"));
                }
            }
        }
        Ok(CouplingSample { pairs })
    }

    pub fn pairs(&self) -> &[(Segment, Segment)] {
        &self.pairs
    }
}

/// Sup-norm of the node-wise difference of two segments of equal shape.
pub fn segment_distance(a: &Segment, b: &Segment) -> f64 {
    a.window
        .chunks_exact(a.d)
        .zip(b.window.chunks_exact(b.d))
        .map(|(x, y)| {
            if x.len() == 1 {
                (x[0] - y[0]).abs()
            } else {
                x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
            }
        })
        .fold(0.0, f64::max)
}

/// `mean_i min(2, ||A_i - B_i||)`, an upper bound on the bounded-Lipschitz
/// distance between the two segment laws under this coupling.
pub fn dl_coupled_bound(c: &CouplingSample) -> f64 {
    clamped_mean(c.pairs.iter().map(|(a, b)| segment_distance(a, b)))
}

/// `mean min(2, d_i)` over precomputed distances, summed in order.
pub fn clamped_mean(distances: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for d in distances {
        sum += d.min(2.0);
        n += 1;
    }
    sum / n as f64
}

/// `(1/k) * sum_{i=1..k} observable(X_i)`.
pub fn time_average(traj: &Trajectory, observable: impl Fn(&[f64]) -> f64, k: usize) -> Result<f64> {
    if k == 0 || k > traj.grid().n() {
        return Err(Error::usage(format!("time-average length {k} outside [1, {}]", traj.grid().n())));
    }
    let sum: f64 = (1..=k as i64).map(|i| observable(traj.node(i))).sum();
    Ok(sum / k as f64)
}

/// Running time averages `A_1 .. A_N` in one pass.
pub fn running_time_averages(traj: &Trajectory, observable: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut sum = 0.0;
    (1..=traj.grid().n() as i64)
        .map(|i| {
            sum += observable(traj.node(i));
            sum / i as f64
        })
        .collect()
}

/// Per-node Monte Carlo estimate of `E|X_k|^p`, indexed from `first_index`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentSeries {
    pub p: f64,
    pub first_index: i64,
    pub values: Vec<f64>,
}

impl MomentSeries {
    pub fn at(&self, k: i64) -> f64 {
        self.values[(k - self.first_index) as usize]
    }
}

/// `|x|^p` with the integer cases kept exact.
pub fn abs_pow(norm: f64, p: f64) -> f64 {
    if p == 2.0 {
        norm * norm
    } else if p.fract() == 0.0 && p.abs() < 64.0 {
        norm.powi(p as i32)
    } else {
        norm.powf(p)
    }
}

pub fn moment_track(trajectories: &[Trajectory], p: f64) -> Result<MomentSeries> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::usage("moment track needs at least one trajectory"))?;
    if !(p > 0.0 && p.is_finite()) {
        return Err(Error::usage(format!("moment order must be positive, got {p}")));
    }
    let grid = *first.grid();
    if trajectories.iter().any(|t| *t.grid() != grid) {
        return Err(Error::usage("trajectories must share one grid"));
    }
    let m = grid.m() as i64;
    let n_paths = trajectories.len() as f64;
    let values = (-m..=grid.n() as i64)
        .map(|k| {
            let s: f64 = trajectories
                .iter()
                .map(|t| abs_pow(euclidean_norm(t.node(k)), p))
                .sum();
            s / n_paths
        })
        .collect();
    Ok(MomentSeries {
        p,
        first_index: -m,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::BrownianPaths;
    use crate::grid::TimeGrid;
    use crate::model::builtin_model;
    use crate::stepper::{integrate, integrate_path, ImplicitSolveConfig};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn seg(window: Vec<f64>) -> Segment {
        Segment {
            base_index: 0,
            d: 1,
            window,
            delta: 0.5,
        }
    }

    fn marg(v: &[f64]) -> EmpiricalMarginal {
        EmpiricalMarginal::new(v.to_vec(), 0.0, "x").unwrap()
    }

    /// Evaluates both CDFs at every merged point by counting.
    fn ks_brute(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .chain(b)
            .map(|&x| {
                let fa = a.iter().filter(|&&v| v <= x).count() as f64 / a.len() as f64;
                let fb = b.iter().filter(|&&v| v <= x).count() as f64 / b.len() as f64;
                (fa - fb).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn sup_norms() {
        assert_eq!(segment_sup_norm(&seg(vec![2.0; 5])), 2.0);
        assert_eq!(segment_sup_norm(&seg(vec![1.0, -3.0, 2.0])), 3.0);
        assert_eq!(segment_sup_norm(&seg(vec![0.0; 7])), 0.0);
        let s = Segment {
            base_index: 0,
            d: 2,
            window: vec![3.0, 4.0, 1.0, 1.0],
            delta: 1.0,
        };
        assert_eq!(segment_sup_norm(&s), 5.0);
    }

    #[test]
    fn ks_examples() {
        assert_eq!(ks_statistic(&marg(&[1.0, 2.0, 3.0]), &marg(&[1.0, 2.0, 3.0])), 0.0);
        assert_eq!(ks_statistic(&marg(&[0.0]), &marg(&[1.0])), 1.0);
        assert_relative_eq!(
            ks_statistic(&marg(&[1.0, 2.0, 3.0]), &marg(&[1.5, 2.5])),
            1.0 / 3.0,
            max_relative = 1e-15
        );
        // ties across samples
        assert_eq!(ks_statistic(&marg(&[1.0, 1.0, 2.0]), &marg(&[1.0, 2.0, 2.0])), 1.0 / 3.0);
    }

    #[test]
    fn marginal_validation() {
        assert!(EmpiricalMarginal::new(vec![], 0.0, "x").is_err());
        assert!(EmpiricalMarginal::new(vec![f64::NAN], 0.0, "x").is_err());
    }

    #[test]
    fn coupled_bound_examples() {
        let a = seg(vec![0.1, 0.2, 0.3]);
        let same = CouplingSample::new(vec![(a.clone(), a.clone()); 4]).unwrap();
        assert_eq!(dl_coupled_bound(&same), 0.0);
        let far = CouplingSample::new(vec![(a.clone(), seg(vec![5.1, 5.2, 5.3]))]).unwrap();
        assert_eq!(dl_coupled_bound(&far), 2.0);
        let zero = seg(vec![0.0; 3]);
        let mixed = CouplingSample::new(vec![
            (zero.clone(), seg(vec![0.5, 0.0, -0.2])),
            (zero.clone(), seg(vec![0.0, -1.5, 0.0])),
            (zero.clone(), seg(vec![3.0, 0.0, 0.0])),
        ])
        .unwrap();
        assert_relative_eq!(dl_coupled_bound(&mixed), 4.0 / 3.0, max_relative = 1e-15);
        assert!(CouplingSample::new(vec![(a.clone(), seg(vec![0.0; 4]))]).is_err());
        assert!(CouplingSample::new(vec![]).is_err());
    }

    #[test]
    fn time_average_examples() {
        let m = builtin_model("zero-noise-linear").unwrap();
        let grid = TimeGrid::new(1.0, 2, 4).unwrap();
        let t = integrate(&m, &grid, &[0.0; 4], &ImplicitSolveConfig::default()).unwrap();
        assert_eq!(time_average(&t, |_| 1.0, 4).unwrap(), 1.0);
        let x = |v: &[f64]| v[0];
        let expect = (2.0 / 3.0 + 4.0 / 9.0 + 8.0 / 27.0 + 16.0 / 81.0) / 4.0;
        assert_relative_eq!(time_average(&t, x, 4).unwrap(), expect, max_relative = 1e-15);
        assert!(time_average(&t, x, 0).is_err());
        assert!(time_average(&t, x, 5).is_err());
    }

    #[test]
    fn time_average_of_constant_and_ramp() {
        // X_k = 2 for a zero-drift, zero-noise model with xi = 2
        let m = crate::model::SddeModel::builder("const", 1, 1, 1.0)
            .drift(|_x, _y, out| out[0] = 0.0)
            .diffusion(|_x, _y, out| out[0] = 0.0)
            .initial_history(|_t, out| out[0] = 2.0)
            .build()
            .unwrap();
        let grid = TimeGrid::new(1.0, 3, 6).unwrap();
        let t = integrate(&m, &grid, &[0.0; 6], &ImplicitSolveConfig::default()).unwrap();
        for k in 1..=6 {
            assert_eq!(time_average(&t, |v| v[0].powi(3), k).unwrap(), 8.0);
        }
        // X_k = k via constant drift 1/delta
        let ramp = crate::model::SddeModel::builder("ramp", 1, 1, 1.0)
            .drift(|_x, _y, out| out[0] = 4.0)
            .diffusion(|_x, _y, out| out[0] = 0.0)
            .initial_history(|_t, out| out[0] = 0.0)
            .build()
            .unwrap();
        let grid = TimeGrid::new(1.0, 4, 4).unwrap();
        let t = integrate(&ramp, &grid, &[0.0; 4], &ImplicitSolveConfig::default()).unwrap();
        assert_eq!(time_average(&t, |v| v[0], 4).unwrap(), 2.5);
    }

    #[test]
    fn time_average_telescopes() {
        let m = builtin_model("ex1-cubic").unwrap();
        let grid = TimeGrid::new(1.0, 20, 200).unwrap();
        let p = BrownianPaths::generate(8, 1, grid, 1).unwrap();
        let t = integrate_path(&m, &p, 0, &ImplicitSolveConfig::default()).unwrap();
        let obs = |v: &[f64]| v[0].powi(3);
        let run = running_time_averages(&t, obs);
        for k in 2..=200usize {
            let a_k = time_average(&t, obs, k).unwrap();
            let a_km1 = time_average(&t, obs, k - 1).unwrap();
            let lhs = a_k * k as f64 - a_km1 * (k - 1) as f64;
            let rhs = obs(t.node(k as i64));
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0), "k={k}");
            assert_relative_eq!(run[k - 1], a_k, max_relative = 1e-12);
        }
    }

    #[test]
    fn moments_of_deterministic_runs() {
        let m = builtin_model("zero-noise-linear").unwrap();
        let grid = TimeGrid::new(1.0, 2, 20).unwrap();
        let t = integrate(&m, &grid, &[0.0; 20], &ImplicitSolveConfig::default()).unwrap();
        let ms = moment_track(&[t.clone(), t], 2.0).unwrap();
        assert_eq!(ms.values.len(), 23);
        for k in 0..=20 {
            assert_relative_eq!(ms.at(k), (2.0f64 / 3.0).powi(2 * k as i32), max_relative = 1e-12);
        }
        let zero = crate::model::SddeModel::builder("zero", 1, 1, 1.0)
            .drift(|x, _y, out| out[0] = -x[0])
            .diffusion(|_x, _y, out| out[0] = 0.0)
            .initial_history(|_t, out| out[0] = 0.0)
            .build()
            .unwrap();
        let z = integrate(&zero, &grid, &[0.0; 20], &ImplicitSolveConfig::default()).unwrap();
        assert!(moment_track(&[z], 4.0).unwrap().values.iter().all(|&v| v == 0.0));
        assert!(moment_track(&[], 2.0).is_err());
    }

    proptest! {
        #[test]
        fn ks_matches_brute_force(
            a in prop::collection::vec(-3i32..3, 1..20),
            b in prop::collection::vec(-3i32..3, 1..20),
        ) {
            // small integer support forces plenty of ties
            let a: Vec<f64> = a.into_iter().map(|v| v as f64 * 0.5).collect();
            let b: Vec<f64> = b.into_iter().map(|v| v as f64 * 0.5).collect();
            let d = ks_statistic(&marg(&a), &marg(&b));
            prop_assert_eq!(d, ks_brute(&a, &b));
            prop_assert_eq!(d, ks_statistic(&marg(&b), &marg(&a)));
            prop_assert_eq!(ks_statistic(&marg(&a), &marg(&a)), 0.0);
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn coupled_bound_range(
            diffs in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..10),
        ) {
            let zero = seg(vec![0.0; 3]);
            let pairs: Vec<_> = diffs.iter().map(|w| (zero.clone(), seg(w.clone()))).collect();
            let all_zero = diffs.iter().all(|w| w.iter().all(|&v| v == 0.0));
            let b = dl_coupled_bound(&CouplingSample::new(pairs).unwrap());
            prop_assert!((0.0..=2.0).contains(&b));
            prop_assert_eq!(b == 0.0, all_zero);
        }
    }
}
