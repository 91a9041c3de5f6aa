//! Monte Carlo parameters, estimates and the parallel path runner.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// How per-path samples are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    /// Welford accumulators folded per worker and merged. The result can
    /// differ in the last bits between worker counts.
    #[default]
    Streaming,
    /// Samples are collected in path order and reduced sequentially in two
    /// passes. Bit-exact for any worker count.
    Deterministic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct McParams {
    pub paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub n_sub: usize,
    pub reduction: Reduction,
    /// Average each sample with the one driven by the negated increments.
    pub antithetic: bool,
}

impl Default for McParams {
    fn default() -> Self {
        Self {
            paths: 10_000,
            dt: 1e-3,
            seed: 42,
            n_sub: crate::tolerances::WZ_SUBSTEPS,
            reduction: Reduction::Streaming,
            antithetic: false,
        }
    }
}

impl McParams {
    pub fn new(paths: usize, dt: f64, seed: u64) -> Self {
        Self {
            paths,
            dt,
            seed,
            ..Self::default()
        }
    }

    pub fn deterministic(mut self) -> Self {
        self.reduction = Reduction::Deterministic;
        self
    }

    pub fn with_antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.paths < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 paths, got {}",
                self.paths
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if self.n_sub == 0 {
            return Err(Error::InvalidParameter("n_sub must be positive".into()));
        }
        Ok(())
    }
}

/// Sample mean and standard error per component.
#[derive(Clone, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
    pub dt: f64,
}

impl McEstimate {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `|mean_i - target| / stderr_i`; infinite if the stderr vanishes and the mean misses.
    pub fn z_score(&self, i: usize, target: f64) -> f64 {
        let gap = (self.mean[i] - target).abs();
        if gap == 0.0 {
            0.0
        } else {
            gap / self.stderr[i]
        }
    }

    pub fn within(&self, i: usize, target: f64, k: f64) -> bool {
        self.z_score(i, target) <= k
    }

    /// Keeps the listed components.
    pub fn select(&self, idx: &[usize]) -> McEstimate {
        McEstimate {
            mean: idx.iter().map(|&i| self.mean[i]).collect(),
            stderr: idx.iter().map(|&i| self.stderr[i]).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(mut self, x: &[f64]) -> Self {
        self.n += 1;
        let n = self.n as f64;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
        self
    }

    fn merge(self, other: Self) -> Self {
        if self.n == 0 {
            return other;
        }
        if other.n == 0 {
            return self;
        }
        let n = self.n + other.n;
        let (na, nb, nn) = (self.n as f64, other.n as f64, n as f64);
        let mut out = Self::new(self.mean.len());
        out.n = n;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            out.mean[i] = self.mean[i] + d * nb / nn;
            out.m2[i] = self.m2[i] + other.m2[i] + d * d * na * nb / nn;
        }
        out
    }
}

fn finish(n: usize, mean: Vec<f64>, m2: Vec<f64>, params: &McParams) -> McEstimate {
    let nf = n as f64;
    let stderr = m2
        .iter()
        .map(|s| (s.max(0.0) / (nf - 1.0) / nf).sqrt())
        .collect();
    McEstimate {
        mean,
        stderr,
        n_paths: n,
        seed: params.seed,
        dt: params.dt,
    }
}

/// Runs `sample(path_index, negate)` for every path on the current rayon
/// pool and reduces the `dim`-vectors it returns. With antithetic pairing
/// each sample is the average of the plain and the negated run.
pub fn run_paths<F>(params: &McParams, dim: usize, sample: F) -> Result<McEstimate>
where
    F: Fn(u64, bool) -> Result<Vec<f64>> + Sync,
{
    params.validate()?;
    let one = |i: usize| -> Result<Vec<f64>> {
        let mut x = sample(i as u64, false)?;
        if params.antithetic {
            let y = sample(i as u64, true)?;
            x.iter_mut().zip(&y).for_each(|(a, b)| *a = 0.5 * (*a + b));
        }
        if x.len() != dim {
            return Err(Error::Dimension(format!(
                "sample of length {} where {dim} expected",
                x.len()
            )));
        }
        Ok(x)
    };
    match params.reduction {
        Reduction::Streaming => {
            let acc = (0..params.paths)
                .into_par_iter()
                .try_fold(|| Welford::new(dim), |acc, i| one(i).map(|x| acc.push(&x)))
                .try_reduce(|| Welford::new(dim), |a, b| Ok(a.merge(b)))?;
            Ok(finish(acc.n, acc.mean, acc.m2, params))
        }
        Reduction::Deterministic => {
            let samples: Vec<Vec<f64>> = (0..params.paths)
                .into_par_iter()
                .map(one)
                .collect::<Result<_>>()?;
            let n = samples.len() as f64;
            let mut mean = vec![0.0; dim];
            for s in &samples {
                for i in 0..dim {
                    mean[i] += s[i];
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut m2 = vec![0.0; dim];
            for s in &samples {
                for i in 0..dim {
                    m2[i] += (s[i] - mean[i]).powi(2);
                }
            }
            Ok(finish(samples.len(), mean, m2, params))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n: usize) -> rayon::ThreadPool {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
    }

    #[test]
    fn deterministic_reduction_ignores_worker_count() {
        let params = McParams::new(1000, 1e-3, 5).deterministic();
        let f = |i: u64, _| Ok(vec![((i * 7919) % 101) as f64 / 3.0, (i as f64).sqrt()]);
        let a = pool(1).install(|| run_paths(&params, 2, f)).unwrap();
        let b = pool(4).install(|| run_paths(&params, 2, f)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn streaming_matches_two_pass() {
        let mut params = McParams::new(777, 1e-3, 5);
        let f = |i: u64, _| Ok(vec![(i as f64 * 0.37).sin()]);
        let a = run_paths(&params, 1, f).unwrap();
        params.reduction = Reduction::Deterministic;
        let b = run_paths(&params, 1, f).unwrap();
        assert!((a.mean[0] - b.mean[0]).abs() < 1e-14);
        assert!((a.stderr[0] - b.stderr[0]).abs() < 1e-14);
    }

    #[test]
    fn stderr_formula() {
        let params = McParams::new(4, 1e-3, 0).deterministic();
        let est = run_paths(&params, 1, |i, _| Ok(vec![i as f64])).unwrap();
        assert_eq!(est.mean, vec![1.5]);
        // sample variance of 0..3 is 5/3
        assert!((est.stderr[0] - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn antithetic_cancels_odd_functionals() {
        let params = McParams::new(10, 1e-3, 0).with_antithetic(true);
        let est = run_paths(&params, 1, |i, neg| {
            Ok(vec![if neg { -(i as f64) } else { i as f64 }])
        })
        .unwrap();
        assert_eq!(est.mean, vec![0.0]);
        assert_eq!(est.stderr, vec![0.0]);
    }

    #[test]
    fn errors_propagate() {
        let params = McParams::new(10, 1e-3, 0);
        let r = run_paths(&params, 1, |i, _| {
            if i == 3 {
                Err(Error::Parse("x".into()))
            } else {
                Ok(vec![0.0])
            }
        });
        assert!(r.is_err());
        assert!(run_paths(&McParams::new(1, 1e-3, 0), 1, |_, _| Ok(vec![0.0])).is_err());
    }
}
