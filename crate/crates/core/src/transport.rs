//! Parallel transport along discrete paths by RK4 on the ambient equation
//! `u' + Γ(σ') u = 0`, its inverse, and holonomy of closed loops.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{orthogonality_drift, polar_orthogonalize, rotation_angle_2x2, wrap_angle};
use crate::manifold::{ManifoldKind, ManifoldModel};
use crate::ode::Rk4;
use crate::tolerances::{FRAME_FAIL, REORTH_EVERY, TANG_TOL};

/// How a [`DiscretePath`] is filled in between nodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Interpolation {
    /// Cubic Hermite through nodes and nodal velocities, then retracted.
    #[default]
    Hermite,
    /// Retracted straight chord between consecutive nodes. On the sphere this
    /// is exactly the connecting great-circle arc.
    Chordal,
}

/// A path on `M` sampled on an increasing time grid.
#[derive(Clone, Debug)]
pub struct DiscretePath {
    times: Vec<f64>,
    points: Vec<DVector<f64>>,
    velocities: Option<Vec<DVector<f64>>>,
    interpolation: Interpolation,
}

impl DiscretePath {
    pub fn new(model: &ManifoldModel, times: Vec<f64>, points: Vec<DVector<f64>>) -> Result<Self> {
        if times.len() != points.len() || times.len() < 2 {
            return Err(Error::Dimension(format!(
                "path needs at least two nodes with matching times ({} times, {} points)",
                times.len(),
                points.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter(
                "time grid must be strictly increasing".into(),
            ));
        }
        for p in &points {
            if p.len() != model.ambient_dim() {
                return Err(Error::Dimension(format!(
                    "point of length {} in R^{}",
                    p.len(),
                    model.ambient_dim()
                )));
            }
            model.check_on_manifold(p)?;
        }
        Ok(Self {
            times,
            points,
            velocities: None,
            interpolation: Interpolation::Hermite,
        })
    }

    /// Like [`DiscretePath::new`] with nodal velocities, each of which must be tangent.
    pub fn with_velocities(
        model: &ManifoldModel,
        times: Vec<f64>,
        points: Vec<DVector<f64>>,
        velocities: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let mut path = Self::new(model, times, points)?;
        if velocities.len() != path.points.len() {
            return Err(Error::Dimension("one velocity per node required".into()));
        }
        for (p, v) in path.points.iter().zip(&velocities) {
            let normal = (model.normal_projection(p) * v).norm();
            if normal > TANG_TOL.max(model.dq_tol()) * (1.0 + v.norm()) {
                return Err(Error::NotTangent(normal));
            }
        }
        path.velocities = Some(velocities);
        Ok(path)
    }

    /// Samples `curve(t) = (σ(t), σ'(t))` on a uniform grid of `steps` intervals.
    pub fn from_curve(
        model: &ManifoldModel,
        t0: f64,
        t1: f64,
        steps: usize,
        curve: impl Fn(f64) -> (DVector<f64>, DVector<f64>),
    ) -> Result<Self> {
        let times: Vec<f64> = (0..=steps)
            .map(|k| t0 + (t1 - t0) * k as f64 / steps as f64)
            .collect();
        let (points, vels): (Vec<_>, Vec<_>) = times.iter().map(|&t| curve(t)).unzip();
        Self::with_velocities(model, times, points, vels)
    }

    pub fn with_interpolation(mut self, interpolation: Interpolation) -> Self {
        self.interpolation = interpolation;
        self
    }

    pub(crate) fn from_parts_unchecked(
        times: Vec<f64>,
        points: Vec<DVector<f64>>,
        interpolation: Interpolation,
    ) -> Self {
        Self {
            times,
            points,
            velocities: None,
            interpolation,
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn velocities(&self) -> Option<&[DVector<f64>]> {
        self.velocities.as_deref()
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sum of chord lengths `Σ |σ_{k+1} - σ_k|`.
    pub fn total_variation(&self) -> f64 {
        self.points.windows(2).map(|w| (&w[1] - &w[0]).norm()).sum()
    }

    /// Stored velocities, or fourth-order finite differences of the nodes
    /// (centred inside, one-sided at the ends) projected onto the tangent space.
    pub fn nodal_velocities(&self, model: &ManifoldModel) -> Vec<DVector<f64>> {
        if let Some(v) = &self.velocities {
            return v.clone();
        }
        let n = self.points.len();
        let width = n.min(5);
        (0..n)
            .map(|k| {
                let start = k.saturating_sub(width / 2).min(n - width);
                let nodes = &self.times[start..start + width];
                let w = lagrange_derivative_weights(nodes, self.times[k]);
                let mut v = DVector::zeros(model.ambient_dim());
                for (j, wj) in w.iter().enumerate() {
                    v.axpy(*wj, &self.points[start + j], 1.0);
                }
                model.tangent_projection(&self.points[k]) * v
            })
            .collect()
    }

    /// Position and velocity at fraction `theta ∈ [0, 1]` of interval `k`.
    pub(crate) fn stage(
        &self,
        model: &ManifoldModel,
        vels: &[DVector<f64>],
        k: usize,
        theta: f64,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let h = self.times[k + 1] - self.times[k];
        let p0 = &self.points[k];
        let p1 = &self.points[k + 1];
        match self.interpolation {
            Interpolation::Chordal => {
                let dp = p1 - p0;
                let y = p0 + &dp * theta;
                let x = if theta == 0.0 {
                    p0.clone()
                } else if theta == 1.0 {
                    p1.clone()
                } else {
                    model.retract(&y)?
                };
                let stretch = match model.kind() {
                    ManifoldKind::Sphere { rho } => rho / y.norm(),
                    _ => 1.0,
                };
                let v = model.tangent_projection(&x) * dp * (stretch / h);
                Ok((x, v))
            }
            Interpolation::Hermite => {
                let (t, t2, t3) = (theta, theta * theta, theta * theta * theta);
                let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
                let h10 = t3 - 2.0 * t2 + t;
                let h01 = -2.0 * t3 + 3.0 * t2;
                let h11 = t3 - t2;
                let d00 = 6.0 * t2 - 6.0 * t;
                let d10 = 3.0 * t2 - 4.0 * t + 1.0;
                let d01 = -6.0 * t2 + 6.0 * t;
                let d11 = 3.0 * t2 - 2.0 * t;
                let v0 = &vels[k];
                let v1 = &vels[k + 1];
                if theta == 0.0 {
                    return Ok((p0.clone(), v0.clone()));
                }
                if theta == 1.0 {
                    return Ok((p1.clone(), v1.clone()));
                }
                let y = p0 * h00 + v0 * (h10 * h) + p1 * h01 + v1 * (h11 * h);
                let dy = p0 * (d00 / h) + v0 * d10 + p1 * (d01 / h) + v1 * d11;
                let x = model.retract(&y)?;
                let v = model.tangent_projection(&x) * dy;
                Ok((x, v))
            }
        }
    }
}

/// Weights `w_j` with `Σ w_j f(x_j) ≈ f'(at)` from the Lagrange interpolant through `nodes`.
fn lagrange_derivative_weights(nodes: &[f64], at: f64) -> Vec<f64> {
    let n = nodes.len();
    (0..n)
        .map(|j| {
            let denom: f64 = (0..n)
                .filter(|&m| m != j)
                .map(|m| nodes[j] - nodes[m])
                .product();
            let mut num = 0.0;
            for l in 0..n {
                if l == j {
                    continue;
                }
                num += (0..n)
                    .filter(|&m| m != j && m != l)
                    .map(|m| at - nodes[m])
                    .product::<f64>();
            }
            num / denom
        })
        .collect()
}

/// Frames `u(t_k) ∈ R^{N×N}` along a path.
#[derive(Clone, Debug)]
pub struct FramePath {
    times: Vec<f64>,
    frames: Vec<DMatrix<f64>>,
}

impl FramePath {
    pub(crate) fn new(times: Vec<f64>, frames: Vec<DMatrix<f64>>) -> Self {
        Self { times, frames }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn frames(&self) -> &[DMatrix<f64>] {
        &self.frames
    }

    pub fn last(&self) -> &DMatrix<f64> {
        self.frames.last().expect("frame path is never empty")
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `max_k max |u_kᵀ u_k - I|`.
    pub fn max_orthogonality_drift(&self) -> f64 {
        self.frames
            .iter()
            .map(orthogonality_drift)
            .fold(0.0, f64::max)
    }

    /// `max_k ‖Q(σ_k) u_k P(σ_0)‖` in the Frobenius norm.
    pub fn max_splitting_defect(&self, model: &ManifoldModel, points: &[DVector<f64>]) -> f64 {
        let p0 = model.tangent_projection(&points[0]);
        self.frames
            .iter()
            .zip(points)
            .map(|(u, x)| (model.normal_projection(x) * u * &p0).norm())
            .fold(0.0, f64::max)
    }
}

/// Knobs for [`parallel_transport_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransportOptions {
    /// Polar re-orthogonalisation every this many steps. `None` disables it.
    pub reorth_every: Option<usize>,
    /// Orthogonality drift above which the integration is abandoned.
    pub frame_fail: f64,
}

impl Default for TransportOptions {
    fn default() -> Self {
        Self {
            reorth_every: Some(REORTH_EVERY),
            frame_fail: FRAME_FAIL,
        }
    }
}

/// Solves `u' = -Γ(σ') u`, `u(0) = I` with one RK4 step per grid interval.
pub fn parallel_transport(model: &ManifoldModel, path: &DiscretePath) -> Result<FramePath> {
    parallel_transport_with(model, path, &TransportOptions::default())
}

pub fn parallel_transport_with(
    model: &ManifoldModel,
    path: &DiscretePath,
    opts: &TransportOptions,
) -> Result<FramePath> {
    let n = model.ambient_dim();
    let vels = path.nodal_velocities(model);
    let mut u = DMatrix::<f64>::identity(n, n);
    let mut frames = Vec::with_capacity(path.len());
    frames.push(u.clone());
    let mut rk = Rk4::new(n * n);
    for k in 0..path.len() - 1 {
        let h = path.times[k + 1] - path.times[k];
        let stages = [
            path.stage(model, &vels, k, 0.0)?,
            path.stage(model, &vels, k, 0.5)?,
            path.stage(model, &vels, k, 1.0)?,
        ];
        let mut rhs = |theta: f64, y: &[f64], dy: &mut [f64]| {
            let (x, w) = &stages[(2.0 * theta / h).round() as usize];
            model.apply_gamma(x.as_slice(), w.as_slice(), y, n, dy);
            dy.iter_mut().for_each(|d| *d = -*d);
        };
        rk.step(&mut rhs, 0.0, h, u.as_mut_slice());
        if let Some(every) = opts.reorth_every {
            if every > 0 && (k + 1) % every == 0 {
                u = polar_orthogonalize(&u);
            }
        }
        let drift = orthogonality_drift(&u);
        if !(drift <= opts.frame_fail) {
            return Err(Error::FrameDrift(drift));
        }
        frames.push(u.clone());
    }
    Ok(FramePath::new(path.times.clone(), frames))
}

/// Solves `ū' = ū dQ(σ')`, `ū(0) = P(σ(0))`. Then `ū(t) u(t) P(σ(0)) = P(σ(0))`.
pub fn inverse_transport(model: &ManifoldModel, path: &DiscretePath) -> Result<Vec<DMatrix<f64>>> {
    let n = model.ambient_dim();
    let vels = path.nodal_velocities(model);
    let mut ubar = model.tangent_projection(&path.points[0]);
    let mut out = Vec::with_capacity(path.len());
    out.push(ubar.clone());
    let mut rk = Rk4::new(n * n);
    for k in 0..path.len() - 1 {
        let h = path.times[k + 1] - path.times[k];
        let stages = [
            path.stage(model, &vels, k, 0.0)?,
            path.stage(model, &vels, k, 0.5)?,
            path.stage(model, &vels, k, 1.0)?,
        ];
        let dqs: Vec<DMatrix<f64>> = stages.iter().map(|(x, w)| model.dq_matrix(x, w)).collect();
        let mut rhs = |theta: f64, y: &[f64], dy: &mut [f64]| {
            let ym = DMatrix::from_column_slice(n, n, y);
            dy.copy_from_slice((ym * &dqs[(2.0 * theta / h).round() as usize]).as_slice());
        };
        rk.step(&mut rhs, 0.0, h, ubar.as_mut_slice());
        out.push(ubar.clone());
    }
    Ok(out)
}

/// Rotation angle in `(-π, π]` of parallel transport around a closed loop on
/// a surface. When `N = 3` the tangent basis at the base point is oriented so
/// that `a₁ × a₂` points along `∇F`.
pub fn holonomy(model: &ManifoldModel, path: &DiscretePath) -> Result<f64> {
    if model.manifold_dim() != 2 {
        return Err(Error::NotSurface(model.manifold_dim()));
    }
    let first = &path.points[0];
    let gap = (path.points.last().unwrap() - first).norm();
    if gap > model.tol_f().max(1e-12 * model.scale()) * 10.0 {
        return Err(Error::OpenLoop(gap));
    }
    let frames = parallel_transport(model, path)?;
    let mut basis = model.tangent_basis(first);
    if model.ambient_dim() == 3 {
        let a = basis.column(0).into_owned();
        let b = basis.column(1).into_owned();
        let normal = model
            .constraint_jacobian(first.as_slice())
            .row(0)
            .transpose();
        if a.cross(&b).dot(&normal) < 0.0 {
            basis.column_mut(1).neg_mut();
        }
    }
    let r = basis.transpose() * frames.last() * &basis;
    Ok(wrap_angle(rotation_angle_2x2(&r)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{loglog_slope, max_abs_diff};
    use std::f64::consts::{PI, TAU};

    fn v3(a: f64, b: f64, c: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b, c])
    }

    fn latitude(phi: f64, steps: usize) -> DiscretePath {
        let s = ManifoldModel::sphere(3, 1.0).unwrap();
        let (sp, cp) = phi.sin_cos();
        DiscretePath::from_curve(&s, 0.0, TAU, steps, |t| {
            (
                v3(sp * t.cos(), sp * t.sin(), cp),
                v3(-sp * t.sin(), sp * t.cos(), 0.0),
            )
        })
        .unwrap()
    }

    fn great_circle(steps: usize, t1: f64) -> DiscretePath {
        let s = ManifoldModel::sphere(3, 1.0).unwrap();
        DiscretePath::from_curve(&s, 0.0, t1, steps, |t| {
            (v3(t.cos(), t.sin(), 0.0), v3(-t.sin(), t.cos(), 0.0))
        })
        .unwrap()
    }

    #[test]
    fn flat_transport_is_identity() {
        let f = ManifoldModel::flat(3).unwrap();
        let times: Vec<f64> = (0..20).map(|k| k as f64 * 0.1).collect();
        let pts = times.iter().map(|t| v3(t.sin(), t * t, 1.0 - t)).collect();
        let path = DiscretePath::new(&f, times, pts).unwrap();
        let fp = parallel_transport(&f, &path).unwrap();
        for u in fp.frames() {
            assert_eq!(*u, DMatrix::identity(3, 3));
        }
    }

    #[test]
    fn great_circle_returns_normal_and_velocity() {
        let s = ManifoldModel::sphere(3, 1.0).unwrap();
        let path = great_circle(2000, TAU);
        let fp = parallel_transport(&s, &path).unwrap();
        let u = fp.last();
        assert!((u * v3(0.0, 0.0, 1.0) - v3(0.0, 0.0, 1.0)).norm() < 1e-8);
        assert!((u * v3(0.0, 1.0, 0.0) - v3(0.0, 1.0, 0.0)).norm() < 1e-8);
        // halfway: the velocity is carried to the velocity
        let mid = &fp.frames()[1000];
        assert!((mid * v3(0.0, 1.0, 0.0) - v3(0.0, -1.0, 0.0)).norm() < 1e-8);
    }

    #[test]
    fn chordal_great_circle_matches_hermite() {
        let s = ManifoldModel::sphere(3, 1.0).unwrap();
        let hermite = great_circle(500, 2.0);
        let chordal = DiscretePath::new(&s, hermite.times().to_vec(), hermite.points().to_vec())
            .unwrap()
            .with_interpolation(Interpolation::Chordal);
        let a = parallel_transport(&s, &hermite).unwrap();
        let b = parallel_transport(&s, &chordal).unwrap();
        assert!(max_abs_diff(a.last(), b.last()) < 1e-10);
    }

    #[test]
    fn isometry_and_splitting_on_random_path() {
        let s = ManifoldModel::sphere(4, 2.0).unwrap();
        let times: Vec<f64> = (0..=1000).map(|k| k as f64 * 1e-3).collect();
        let pts: Vec<DVector<f64>> = times
            .iter()
            .map(|t| {
                let y = DVector::from_vec(vec![(3.0 * t).cos(), (2.0 * t).sin(), t * t, 1.0 + t]);
                &y * (2.0 / y.norm())
            })
            .collect();
        let path = DiscretePath::new(&s, times, pts).unwrap();
        let fp = parallel_transport_with(
            &s,
            &path,
            &TransportOptions {
                reorth_every: None,
                frame_fail: FRAME_FAIL,
            },
        )
        .unwrap();
        assert!(fp.max_orthogonality_drift() < 1e-8);
        assert!(fp.max_splitting_defect(&s, path.points()) < 1e-8);
    }

    #[test]
    fn inverse_transport_inverts_on_tangent_space() {
        let s = ManifoldModel::sphere(3, 1.0).unwrap();
        let path = latitude(0.7, 800);
        let fp = parallel_transport(&s, &path).unwrap();
        let ubar = inverse_transport(&s, &path).unwrap();
        let p0 = s.tangent_projection(&path.points()[0]);
        for k in [0, 200, 555, 800] {
            let prod = &ubar[k] * &fp.frames()[k] * &p0;
            assert!(max_abs_diff(&prod, &p0) < 1e-8);
        }
    }

    #[test]
    fn latitude_holonomy_is_enclosed_area() {
        let s = ManifoldModel::sphere(3, 1.0).unwrap();
        for phi in [PI / 6.0, PI / 3.0, PI / 2.0, 2.0] {
            let got = holonomy(&s, &latitude(phi, 4000)).unwrap();
            let want = TAU * (1.0 - phi.cos());
            assert!(
                wrap_angle(got - want).abs() < 1e-5,
                "phi={phi}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn holonomy_is_fourth_order() {
        let s = ManifoldModel::sphere(3, 1.0).unwrap();
        let phi = PI / 3.0;
        let want = TAU * (1.0 - phi.cos());
        let steps = [40usize, 80, 160, 320];
        let errs: Vec<f64> = steps
            .iter()
            .map(|&k| wrap_angle(holonomy(&s, &latitude(phi, k)).unwrap() - want).abs())
            .collect();
        let hs: Vec<f64> = steps.iter().map(|&k| TAU / k as f64).collect();
        assert!(loglog_slope(&hs, &errs) >= 3.7, "{errs:?}");
    }

    #[test]
    fn cylinder_circumference_has_no_holonomy() {
        let c = ManifoldModel::cylinder();
        let path = DiscretePath::from_curve(&c, 0.0, TAU, 400, |t| {
            (
                v3(t.cos(), t.sin(), 0.3 * t.sin()),
                v3(-t.sin(), t.cos(), 0.3 * t.cos()),
            )
        })
        .unwrap();
        assert!(holonomy(&c, &path).unwrap().abs() < 1e-5);
    }

    #[test]
    fn flat_loop_and_errors() {
        let f = ManifoldModel::flat(2).unwrap();
        let path = DiscretePath::from_curve(&f, 0.0, TAU, 100, |t| {
            (
                DVector::from_vec(vec![t.cos(), t.sin()]),
                DVector::from_vec(vec![-t.sin(), t.cos()]),
            )
        })
        .unwrap();
        assert!(holonomy(&f, &path).unwrap().abs() < 1e-15);
        let open = great_circle(100, 1.0);
        assert!(matches!(
            holonomy(&ManifoldModel::sphere(3, 1.0).unwrap(), &open),
            Err(Error::OpenLoop(_))
        ));
        let s4 = ManifoldModel::sphere(4, 1.0).unwrap();
        let p = DiscretePath::new(
            &s4,
            vec![0.0, 1.0],
            vec![DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0]); 2],
        )
        .unwrap();
        assert_eq!(holonomy(&s4, &p), Err(Error::NotSurface(3)));
    }

    #[test]
    fn huge_steps_fail_loudly() {
        let s = ManifoldModel::sphere(3, 1.0).unwrap();
        let path = great_circle(3, 6.0);
        let opts = TransportOptions {
            reorth_every: None,
            frame_fail: FRAME_FAIL,
        };
        assert!(matches!(
            parallel_transport_with(&s, &path, &opts),
            Err(Error::FrameDrift(_))
        ));
    }

    #[test]
    fn finite_difference_velocities_are_accurate() {
        let s = ManifoldModel::sphere(3, 1.0).unwrap();
        let exact = great_circle(100, 1.0);
        let bare = DiscretePath::new(&s, exact.times().to_vec(), exact.points().to_vec()).unwrap();
        let fd = bare.nodal_velocities(&s);
        for (a, b) in fd.iter().zip(exact.velocities().unwrap()) {
            assert!((a - b).norm() < 1e-7);
        }
    }

    #[test]
    fn path_validation() {
        let s = ManifoldModel::sphere(3, 1.0).unwrap();
        assert!(DiscretePath::new(&s, vec![0.0, 0.0], vec![v3(0.0, 0.0, 1.0); 2]).is_err());
        assert!(matches!(
            DiscretePath::new(
                &s,
                vec![0.0, 1.0],
                vec![v3(0.0, 0.0, 1.0), v3(0.0, 0.0, 1.1)]
            ),
            Err(Error::OffManifold { .. })
        ));
    }
}
