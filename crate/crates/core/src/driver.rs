//! Seeded Brownian drivers on a uniform grid, with optional Cameron-Martin shift.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Per-path generator seed: a SplitMix64 finaliser applied to the master
/// seed and the path index.
pub fn stream_seed(master_seed: u64, path_index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(master_seed) ^ path_index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

type PathFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// A deterministic path `h` with `h(0) = 0` and its derivative `h'`.
#[derive(Clone)]
pub struct CameronMartinPath {
    dim: usize,
    h: PathFn,
    h_prime: PathFn,
}

impl fmt::Debug for CameronMartinPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CameronMartinPath")
            .field("dim", &self.dim)
            .finish()
    }
}

impl CameronMartinPath {
    pub fn new(
        dim: usize,
        h: impl Fn(f64) -> DVector<f64> + Send + Sync + 'static,
        h_prime: impl Fn(f64) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            h: Arc::new(h),
            h_prime: Arc::new(h_prime),
        }
    }

    /// `h(s) = s · v`.
    pub fn linear(v: DVector<f64>) -> Self {
        let dim = v.len();
        let w = v.clone();
        Self::new(dim, move |s| &v * s, move |_| w.clone())
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(
            dim,
            move |_| DVector::zeros(dim),
            move |_| DVector::zeros(dim),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, s: f64) -> DVector<f64> {
        (self.h)(s)
    }

    pub fn derivative(&self, s: f64) -> DVector<f64> {
        (self.h_prime)(s)
    }
}

/// Brownian increments `ΔB_k ~ N(0, Δ I_n)` on `t_k = kΔ`, stored row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct DrivingPath {
    dim: usize,
    dt: f64,
    steps: usize,
    increments: Vec<f64>,
    shifted: bool,
}

impl DrivingPath {
    pub fn new(dim: usize, dt: f64, increments: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0) || dim == 0 || !increments.len().is_multiple_of(dim) {
            return Err(Error::InvalidParameter(format!(
                "driver needs dt > 0 and a whole number of {dim}-dimensional increments"
            )));
        }
        let steps = increments.len() / dim;
        Ok(Self {
            dim,
            dt,
            steps,
            increments,
            shifted: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.steps as f64
    }

    pub fn is_shifted(&self) -> bool {
        self.shifted
    }

    pub fn time(&self, k: usize) -> f64 {
        self.dt * k as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    /// `ΔB_k = B(t_{k+1}) - B(t_k)`.
    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// `B(t_k)`.
    pub fn value(&self, k: usize) -> DVector<f64> {
        let mut b = DVector::zeros(self.dim);
        for j in 0..k {
            for (bi, di) in b.iter_mut().zip(self.increment(j)) {
                *bi += di;
            }
        }
        b
    }

    /// The driver with every increment negated.
    pub fn negated(&self) -> Self {
        Self {
            increments: self.increments.iter().map(|x| -x).collect(),
            ..self.clone()
        }
    }

    /// Adds `h(t_{k+1}) - h(t_k)` to each increment.
    pub fn shifted_by(&self, h: &CameronMartinPath) -> Result<Self> {
        if h.dim() != self.dim {
            return Err(Error::Dimension(format!(
                "shift of dimension {} on a {}-dimensional driver",
                h.dim(),
                self.dim
            )));
        }
        let mut out = self.clone();
        for k in 0..self.steps {
            let dh = h.eval(self.time(k + 1)) - h.eval(self.time(k));
            for (x, d) in out.increments[k * self.dim..(k + 1) * self.dim]
                .iter_mut()
                .zip(dh.iter())
            {
                *x += d;
            }
        }
        out.shifted = true;
        Ok(out)
    }

    /// The same Brownian path on the grid with step `factor · Δ`, obtained by
    /// summing blocks of `factor` increments.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.steps.is_multiple_of(factor) {
            return Err(Error::InvalidParameter(format!(
                "cannot coarsen {} steps by {factor}",
                self.steps
            )));
        }
        let steps = self.steps / factor;
        let mut inc = vec![0.0; steps * self.dim];
        for k in 0..self.steps {
            let c = k / factor;
            for i in 0..self.dim {
                inc[c * self.dim + i] += self.increments[k * self.dim + i];
            }
        }
        Ok(Self {
            dim: self.dim,
            dt: self.dt * factor as f64,
            steps,
            increments: inc,
            shifted: self.shifted,
        })
    }

    /// The first `steps` increments.
    pub fn truncate(&self, steps: usize) -> Self {
        let steps = steps.min(self.steps);
        Self {
            steps,
            increments: self.increments[..steps * self.dim].to_vec(),
            ..self.clone()
        }
    }
}

/// Number of grid steps, requiring `dt` to divide `t`.
pub(crate) fn grid_steps(t: f64, dt: f64) -> Result<usize> {
    if !(t > 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "need t > 0 and dt > 0 (t = {t}, dt = {dt})"
        )));
    }
    let steps = (t / dt).round();
    if steps < 1.0 || (steps * dt - t).abs() > 1e-9 * t {
        return Err(Error::InvalidParameter(format!(
            "dt = {dt} does not divide t = {t}"
        )));
    }
    Ok(steps as usize)
}

/// Draws the driver for one path from the stream `stream_seed(seed, path_index)`.
pub fn sample_driver(
    dim: usize,
    t: f64,
    dt: f64,
    seed: u64,
    path_index: u64,
    shift: Option<&CameronMartinPath>,
) -> Result<DrivingPath> {
    let steps = grid_steps(t, dt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, path_index));
    let sd = dt.sqrt();
    let increments = (0..steps * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        })
        .collect::<Vec<f64>>();
    let path = DrivingPath::new(dim, dt, increments)?;
    match shift {
        Some(h) => path.shifted_by(h),
        None => Ok(path),
    }
}
