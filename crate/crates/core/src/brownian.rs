//! Seeded Brownian increments with exact coarsening.
//!
//! Every path owns an independent ChaCha8 stream seeded with a splitmix64 mix
//! of `(master_seed, path_index)`, so a path's increments do not depend on how
//! many paths are generated, in which order, or on how many threads. Normals
//! come from the `rand_distr` ziggurat sampler scaled by `sqrt(delta)`; this
//! is fixed for a release but bit-stability across releases is not promised.
//!
//! A coarsened view never re-sums already summed values: it keeps the base
//! increments and a total ratio, so `coarsen(a)` then `coarsen(b)` is
//! bitwise identical to `coarsen(a * b)`.

use std::borrow::Cow;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the substream that drives path `path_index`.
pub fn stream_seed(master_seed: u64, path_index: u64) -> u64 {
    splitmix64(splitmix64(master_seed) ^ splitmix64(path_index.wrapping_add(0x632b_e59b_d9b4_e019)))
}

/// Increments of one path on `grid`, row-major `N x m`.
pub fn path_increments(master_seed: u64, path_index: u64, grid: &TimeGrid, m: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(master_seed, path_index));
    let scale = grid.delta().sqrt();
    (0..grid.n() * m)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect()
}

/// Block sums of `ratio` consecutive rows of a row-major `N x m` array.
pub fn coarsen_increments(fine: &[f64], m: usize, ratio: usize) -> Vec<f64> {
    debug_assert_eq!(fine.len() % (m * ratio), 0);
    let rows = fine.len() / m / ratio;
    let mut out = vec![0.0; rows * m];
    for (k, block) in fine.chunks_exact(m * ratio).enumerate() {
        for j in 0..m {
            let mut s = 0.0;
            for r in 0..ratio {
                s += block[r * m + j];
            }
            out[k * m + j] = s;
        }
    }
    out
}

/// Increments for a set of paths, viewed at `base_grid.coarsen(ratio)`.
#[derive(Clone, Debug)]
pub struct BrownianPaths {
    master_seed: Option<u64>,
    base_grid: TimeGrid,
    m: usize,
    base: Arc<Vec<Vec<f64>>>,
    ratio: usize,
}

impl PartialEq for BrownianPaths {
    fn eq(&self, other: &Self) -> bool {
        self.grid() == other.grid()
            && self.m == other.m
            && self.path_count() == other.path_count()
            && (0..self.path_count()).all(|i| {
                let (a, b) = (self.increments(i), other.increments(i));
                a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl BrownianPaths {
    pub fn generate(master_seed: u64, path_count: usize, grid: TimeGrid, m: usize) -> Result<Self> {
        if path_count == 0 || m == 0 {
            return Err(Error::usage("need at least one path and one noise dimension"));
        }
        let base = (0..path_count)
            .into_par_iter()
            .map(|i| path_increments(master_seed, i as u64, &grid, m))
            .collect();
        Ok(BrownianPaths {
            master_seed: Some(master_seed),
            base_grid: grid,
            m,
            base: Arc::new(base),
            ratio: 1,
        })
    }

    /// Wraps externally supplied increments; each path must hold `N * m` values.
    pub fn from_increments(grid: TimeGrid, m: usize, paths: Vec<Vec<f64>>) -> Result<Self> {
        if paths.is_empty() || m == 0 {
            return Err(Error::usage("need at least one path and one noise dimension"));
        }
        if let Some(p) = paths.iter().find(|p| p.len() != grid.n() * m) {
            return Err(Error::usage(format!(
                "path has {} increments, grid needs {}",
                p.len(),
                grid.n() * m
            )));
        }
        Ok(BrownianPaths {
            master_seed: None,
            base_grid: grid,
            m,
            base: Arc::new(paths),
            ratio: 1,
        })
    }

    pub fn master_seed(&self) -> Option<u64> {
        self.master_seed
    }

    pub fn path_count(&self) -> usize {
        self.base.len()
    }

    pub fn noise_dim(&self) -> usize {
        self.m
    }

    /// Grid of this view.
    pub fn grid(&self) -> TimeGrid {
        self.base_grid
            .coarsen(self.ratio)
            .expect("ratio was validated on construction")
    }

    pub fn base_grid(&self) -> TimeGrid {
        self.base_grid
    }

    /// Row-major `N x m` increments of `path` at this view's resolution.
    pub fn increments(&self, path: usize) -> Cow<'_, [f64]> {
        let fine = &self.base[path];
        if self.ratio == 1 {
            Cow::Borrowed(fine)
        } else {
            Cow::Owned(coarsen_increments(fine, self.m, self.ratio))
        }
    }

    pub fn coarsen(&self, ratio: usize) -> Result<Self> {
        let total = ratio
            .checked_mul(self.ratio)
            .ok_or_else(|| Error::usage("coarsening ratio overflows"))?;
        self.base_grid.coarsen(total)?;
        Ok(BrownianPaths {
            ratio: total,
            ..self.clone()
        })
    }

    /// Binary dump: little-endian `seed, path_count, N, m` (u64) and `delta`
    /// (f64), then every increment as f64, path-major and row-major within a
    /// path. A missing seed is written as 0.
    pub fn write_dump(&self, mut w: impl Write) -> Result<()> {
        let grid = self.grid();
        for v in [
            self.master_seed.unwrap_or(0),
            self.path_count() as u64,
            grid.n() as u64,
            self.m as u64,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&grid.delta().to_le_bytes())?;
        for p in 0..self.path_count() {
            for v in self.increments(p).iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a dump written by [`write_dump`](Self::write_dump); the delay is
    /// not part of the dump and must be supplied.
    pub fn read_dump(mut r: impl Read, tau: f64) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut u64s = [0u64; 4];
        for v in u64s.iter_mut() {
            r.read_exact(&mut word)?;
            *v = u64::from_le_bytes(word);
        }
        r.read_exact(&mut word)?;
        let delta = f64::from_le_bytes(word);
        let [seed, count, n, m] = u64s.map(|v| v as usize);
        let grid = TimeGrid::from_step(tau, delta, n as f64 * delta)?;
        let mut paths = Vec::with_capacity(count);
        for _ in 0..count {
            let mut p = Vec::with_capacity(n * m);
            for _ in 0..n * m {
                r.read_exact(&mut word)?;
                p.push(f64::from_le_bytes(word));
            }
            paths.push(p);
        }
        let mut out = Self::from_increments(grid, m, paths)?;
        out.master_seed = Some(seed as u64);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grid(m: usize, n: usize) -> TimeGrid {
        TimeGrid::new(1.0, m, n).unwrap()
    }

    #[test]
    fn increment_moments() {
        // 10 paths x 10^4 steps at delta = 0.01
        let p = BrownianPaths::generate(3, 10, grid(100, 10_000), 1).unwrap();
        let all: Vec<f64> = (0..10).flat_map(|i| p.increments(i).into_owned()).collect();
        assert_eq!(all.len(), 100_000);
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 3.0 * (0.01f64 / n).sqrt(), "mean {mean}");
        assert!((var - 0.01).abs() / 0.01 <= 0.05, "var {var}");
    }

    #[test]
    fn deterministic_and_prefix_stable() {
        let a = BrownianPaths::generate(42, 5, grid(10, 50), 2).unwrap();
        let b = BrownianPaths::generate(42, 5, grid(10, 50), 2).unwrap();
        assert_eq!(a, b);
        // path i does not depend on how many paths exist
        let c = BrownianPaths::generate(42, 2, grid(10, 50), 2).unwrap();
        assert_eq!(a.increments(1), c.increments(1));
        let d = BrownianPaths::generate(43, 5, grid(10, 50), 2).unwrap();
        assert_ne!(a.increments(0), d.increments(0));
    }

    #[test]
    fn schedule_independence() {
        let g = grid(20, 200);
        let parallel = BrownianPaths::generate(9, 16, g, 1).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| BrownianPaths::generate(9, 16, g, 1).unwrap());
        assert_eq!(parallel, serial);
        for i in (0..16).rev() {
            assert_eq!(*parallel.increments(i), path_increments(9, i as u64, &g, 1)[..]);
        }
    }

    #[test]
    fn substreams_uncorrelated() {
        let p = BrownianPaths::generate(11, 4, grid(100, 10_000), 1).unwrap();
        for i in 0..4 {
            for j in (i + 1)..4 {
                let (a, b) = (p.increments(i), p.increments(j));
                let n = a.len() as f64;
                let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
                let cov: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - ma) * (y - mb)).sum();
                let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
                let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
                let corr = cov / (va * vb).sqrt();
                assert!(corr.abs() <= 0.05, "paths {i},{j}: {corr}");
            }
        }
    }

    #[test]
    fn coarsen_pairwise_sums() {
        let p = BrownianPaths::from_increments(grid(2, 4), 1, vec![vec![0.1, -0.2, 0.3, 0.4]]).unwrap();
        let c = p.coarsen(2).unwrap();
        let inc = c.increments(0);
        assert_abs_diff_eq!(inc[0], -0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(inc[1], 0.7, epsilon = 1e-15);
        assert_eq!(c.grid().delta(), 1.0);
        assert_eq!(p.coarsen(1).unwrap(), p);
    }

    #[test]
    fn coarsen_rejects_bad_ratio() {
        let p = BrownianPaths::generate(1, 1, grid(10, 30), 1).unwrap();
        assert!(matches!(p.coarsen(4), Err(Error::Usage(_))));
        assert!(matches!(p.coarsen(3), Err(Error::Usage(_)))); // divides N, not M
        assert!(p.coarsen(5).is_ok());
    }

    #[test]
    fn coarse_total_matches_fine_total() {
        let p = BrownianPaths::generate(5, 3, grid(64, 640), 2).unwrap();
        let c = p.coarsen(16).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let fine: f64 = p.increments(i).iter().skip(j).step_by(2).sum();
                let coarse: f64 = c.increments(i).iter().skip(j).step_by(2).sum();
                assert_abs_diff_eq!(fine, coarse, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dump_round_trip() {
        let p = BrownianPaths::generate(77, 3, grid(8, 24), 2).unwrap().coarsen(2).unwrap();
        let mut buf = Vec::new();
        p.write_dump(&mut buf).unwrap();
        assert_eq!(buf.len(), 40 + 3 * 12 * 2 * 8);
        assert_eq!(u64::from_le_bytes(buf[0..8].try_into().unwrap()), 77);
        assert_eq!(f64::from_le_bytes(buf[32..40].try_into().unwrap()), 0.25);
        let back = BrownianPaths::read_dump(&buf[..], 1.0).unwrap();
        assert_eq!(back, p);
    }

    proptest! {
        #[test]
        fn nested_coarsening_is_exact(seed in any::<u64>(), a in 1usize..5, b in 1usize..5) {
            let m = a * b * 2;
            let p = BrownianPaths::generate(seed, 2, grid(m, 3 * m), 1).unwrap();
            let two_step = p.coarsen(a).unwrap().coarsen(b).unwrap();
            let one_step = p.coarsen(a * b).unwrap();
            prop_assert_eq!(two_step, one_step);
        }
    }
}
