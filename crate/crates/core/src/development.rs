//! Cartan development `φ: b ↦ σ` and anti-development `Ψ = φ⁻¹`, plus flows
//! of time-dependent vector fields.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::polar_orthogonalize;
use crate::manifold::ManifoldModel;
use crate::ode::Rk4;
use crate::tolerances::REORTH_EVERY;
use crate::transport::{DiscretePath, FramePath, Interpolation};

/// A path `b` in `R^d ≅ T_oM` with `b(0) = 0`, linear between nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct EuclideanPath {
    times: Vec<f64>,
    values: Vec<DVector<f64>>,
}

impl EuclideanPath {
    pub fn new(times: Vec<f64>, values: Vec<DVector<f64>>) -> Result<Self> {
        if times.len() != values.len() || times.len() < 2 {
            return Err(Error::Dimension(
                "path needs at least two nodes with matching times".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter(
                "time grid must be strictly increasing".into(),
            ));
        }
        let d = values[0].len();
        if values.iter().any(|v| v.len() != d) {
            return Err(Error::Dimension(
                "all values must have the same length".into(),
            ));
        }
        if values[0].iter().any(|x| *x != 0.0) {
            return Err(Error::InvalidParameter("b(0) must be 0".into()));
        }
        Ok(Self { times, values })
    }

    /// Cumulative sums of `increments`, starting at 0.
    pub fn from_increments(times: Vec<f64>, increments: &[DVector<f64>]) -> Result<Self> {
        let d = increments.first().map_or(0, |v| v.len());
        let mut values = Vec::with_capacity(increments.len() + 1);
        let mut acc = DVector::zeros(d);
        values.push(acc.clone());
        for inc in increments {
            acc += inc;
            values.push(acc.clone());
        }
        Self::new(times, values)
    }

    /// `b(s) = s · e` on a uniform grid.
    pub fn straight_line(e: &DVector<f64>, t1: f64, steps: usize) -> Self {
        let times: Vec<f64> = (0..=steps).map(|k| t1 * k as f64 / steps as f64).collect();
        let values = times.iter().map(|t| e * *t).collect();
        Self { times, values }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Slope on interval `k`.
    pub fn slope(&self, k: usize) -> DVector<f64> {
        (&self.values[k + 1] - &self.values[k]) / (self.times[k + 1] - self.times[k])
    }

    /// `Σ |b_{k+1} - b_k|`.
    pub fn total_variation(&self) -> f64 {
        self.values.windows(2).map(|w| (&w[1] - &w[0]).norm()).sum()
    }

    /// `max_k |b_k - c_k|` over nodes (the grids must match).
    pub fn sup_distance(&self, other: &EuclideanPath) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max)
    }
}

/// Rolls `b` onto `M` from `o`: `σ' = u E b'`, `u' = -Γ(σ') u`, where `E` is the
/// pivoted Gram-Schmidt basis of `τ_oM`. One RK4 step per grid interval, with
/// `σ` retracted after every step.
///
/// The returned path uses [`Interpolation::Chordal`].
pub fn develop(
    model: &ManifoldModel,
    o: &DVector<f64>,
    b: &EuclideanPath,
) -> Result<(DiscretePath, FramePath)> {
    model.check_on_manifold(o)?;
    let n = model.ambient_dim();
    let d = model.manifold_dim();
    if b.dim() != d {
        return Err(Error::Dimension(format!(
            "driver has dimension {} but M has dimension {d}",
            b.dim()
        )));
    }
    let e = model.tangent_basis(o);
    let mut state = vec![0.0; n + n * n];
    state[..n].copy_from_slice(o.as_slice());
    for i in 0..n {
        state[n + i * n + i] = 1.0;
    }
    let mut rk = Rk4::new(state.len());
    let mut points = Vec::with_capacity(b.len());
    let mut frames = Vec::with_capacity(b.len());
    points.push(o.clone());
    frames.push(DMatrix::identity(n, n));
    let mut ue = vec![0.0; n];
    for k in 0..b.len() - 1 {
        let h = b.times[k + 1] - b.times[k];
        let beta = &e * b.slope(k);
        let mut rhs = |_t: f64, y: &[f64], dy: &mut [f64]| {
            let (x, u) = y.split_at(n);
            for (i, o) in ue.iter_mut().enumerate() {
                *o = (0..n).map(|j| u[j * n + i] * beta[j]).sum();
            }
            dy[..n].copy_from_slice(&ue);
            model.apply_gamma(x, &ue, u, n, &mut dy[n..]);
            dy[n..].iter_mut().for_each(|v| *v = -*v);
        };
        rk.step(&mut rhs, 0.0, h, &mut state);
        model.retract_in_place(&mut state[..n])?;
        let mut u = DMatrix::from_column_slice(n, n, &state[n..]);
        if (k + 1) % REORTH_EVERY == 0 {
            u = polar_orthogonalize(&u);
            state[n..].copy_from_slice(u.as_slice());
        }
        points.push(DVector::from_column_slice(&state[..n]));
        frames.push(u);
    }
    let path = DiscretePath::from_parts_unchecked(b.times.clone(), points, Interpolation::Chordal);
    Ok((path, FramePath::new(b.times.clone(), frames)))
}

/// `b(t) = ∫₀ᵗ Eᵀ u(s)ᵀ σ'(s) ds`, co-integrated with `u' = -Γ(σ') u` by RK4
/// over the interpolation of `path`.
pub fn antidevelop(model: &ManifoldModel, path: &DiscretePath) -> Result<EuclideanPath> {
    let n = model.ambient_dim();
    let d = model.manifold_dim();
    let o = &path.points()[0];
    let e = model.tangent_basis(o);
    let vels = path.nodal_velocities(model);
    let times = path.times();
    let mut state = vec![0.0; n * n + d];
    for i in 0..n {
        state[i * n + i] = 1.0;
    }
    let mut rk = Rk4::new(state.len());
    let mut values = Vec::with_capacity(path.len());
    values.push(DVector::zeros(d));
    for k in 0..path.len() - 1 {
        let h = times[k + 1] - times[k];
        let stages = [
            path.stage(model, &vels, k, 0.0)?,
            path.stage(model, &vels, k, 0.5)?,
            path.stage(model, &vels, k, 1.0)?,
        ];
        let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| {
            let (x, w) = &stages[(2.0 * t / h).round() as usize];
            let u = &y[..n * n];
            model.apply_gamma(x.as_slice(), w.as_slice(), u, n, &mut dy[..n * n]);
            dy[..n * n].iter_mut().for_each(|v| *v = -*v);
            // uᵀ w, then Eᵀ
            for a in 0..d {
                let mut s = 0.0;
                for c in 0..n {
                    let utw: f64 = (0..n).map(|r| u[c * n + r] * w[r]).sum();
                    s += e[(c, a)] * utw;
                }
                dy[n * n + a] = s;
            }
        };
        rk.step(&mut rhs, 0.0, h, &mut state);
        if (k + 1) % REORTH_EVERY == 0 {
            let u = polar_orthogonalize(&DMatrix::from_column_slice(n, n, &state[..n * n]));
            state[..n * n].copy_from_slice(u.as_slice());
        }
        values.push(DVector::from_column_slice(&state[n * n..]));
    }
    EuclideanPath::new(times.to_vec(), values)
}

type FlowFn = Arc<dyn Fn(f64, &[f64]) -> DVector<f64> + Send + Sync>;

/// A time-dependent vector field `X(t, m)` tangent along `M`.
#[derive(Clone)]
pub struct TimeVectorField {
    dim: usize,
    f: FlowFn,
}

impl fmt::Debug for TimeVectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TimeVectorField")
            .field("dim", &self.dim)
            .finish()
    }
}

impl TimeVectorField {
    pub fn new(
        dim: usize,
        f: impl Fn(f64, &[f64]) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            f: Arc::new(f),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> DVector<f64> {
        (self.f)(t, x)
    }
}

/// `T_T^X(m)`: the flow of `X` from time 0 to `t`.
pub fn integrate_flow(
    model: &ManifoldModel,
    x: &TimeVectorField,
    m: &DVector<f64>,
    t: f64,
    steps: usize,
) -> Result<DVector<f64>> {
    integrate_flow_between(model, x, m, 0.0, t, steps)
}

/// The flow of `X` from time `t0` to `t1`, RK4 with a retraction after each step.
pub fn integrate_flow_between(
    model: &ManifoldModel,
    x: &TimeVectorField,
    m: &DVector<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<DVector<f64>> {
    model.check_on_manifold(m)?;
    if x.dim() != model.ambient_dim() {
        return Err(Error::Dimension(format!(
            "field on R^{} but M ⊂ R^{}",
            x.dim(),
            model.ambient_dim()
        )));
    }
    if t1 == t0 {
        return Ok(m.clone());
    }
    if steps == 0 {
        return Err(Error::InvalidParameter("steps must be positive".into()));
    }
    let h = (t1 - t0) / steps as f64;
    let mut y = m.as_slice().to_vec();
    let mut rk = Rk4::new(y.len());
    let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| dy.copy_from_slice(x.eval(t, y).as_slice());
    for k in 0..steps {
        rk.step(&mut rhs, t0 + k as f64 * h, h, &mut y);
        model.retract_in_place(&mut y)?;
    }
    Ok(DVector::from_vec(y))
}
