//! Embedded manifolds `M = F⁻¹(0) ⊂ R^N` and their tangent/normal
//! projections.
//!
//! `Q(m) = F'(m)ᵀ (F'(m) F'(m)ᵀ)⁻¹ F'(m)` is the orthogonal projection onto
//! the normal space and `P(m) = I - Q(m)` onto the tangent space. The sphere
//! and flat space carry closed forms for `Q` and `dQ`; the other builtins
//! use the formula above and a central difference of `Q` along the
//! retracted curve `s ↦ retract(m + s v)` for `dQ(v_m)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{dot, pivoted_gram_schmidt};
use crate::poly::Poly;
use crate::tolerances::{
    DQ_FD_STEP, JACOBIAN_RANK_TOL, MAX_RETRACT_ITERS, RETRACT_BASIN, TANG_TOL, TOL_F,
};

#[derive(Clone, Debug, PartialEq)]
pub enum ManifoldKind {
    /// `R^N` itself.
    Flat,
    /// `{|x| = rho} ⊂ R^N`.
    Sphere { rho: f64 },
    /// `{x² + y² = 1} ⊂ R³`.
    Cylinder,
    /// `{|z_i| = 1, i = 1..n} ⊂ C^n = R^{2n}`.
    Torus { n: usize },
    /// `{det g = 1} ⊂ R^{2×2}`, stored row-major.
    Sl2,
    /// `{gᵀg = I} ⊂ R^{3×3}`, stored row-major.
    #[cfg(feature = "so3")]
    So3,
}

/// Immutable description of an embedded manifold. Cheap to clone and safe
/// to share between threads.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldModel {
    kind: ManifoldKind,
    ambient_dim: usize,
    manifold_dim: usize,
    scale: f64,
}

/// A base point on `M` together with an ambient vector in its tangent plane.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    pub base: DVector<f64>,
    pub vec: DVector<f64>,
}

impl TangentVector {
    /// Checks that `base` is on `M` and `vec ∈ τ_base M`.
    pub fn new(model: &ManifoldModel, base: DVector<f64>, vec: DVector<f64>) -> Result<Self> {
        model.check_on_manifold(&base)?;
        if vec.len() != model.ambient_dim() {
            return Err(Error::Dimension(format!(
                "vector has length {}, ambient dimension is {}",
                vec.len(),
                model.ambient_dim()
            )));
        }
        let normal = model.normal_projection(&base) * &vec;
        if normal.norm() > TANG_TOL * (1.0 + vec.norm()) {
            return Err(Error::NotTangent(normal.norm()));
        }
        Ok(Self { base, vec })
    }

    pub fn unchecked(base: DVector<f64>, vec: DVector<f64>) -> Self {
        Self { base, vec }
    }

    pub fn same_base(&self, other: &TangentVector) -> bool {
        self.base == other.base
    }
}

impl ManifoldModel {
    pub fn flat(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("flat space needs N >= 1".into()));
        }
        Ok(Self {
            kind: ManifoldKind::Flat,
            ambient_dim: n,
            manifold_dim: n,
            scale: 1.0,
        })
    }

    pub fn sphere(n: usize, rho: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter("sphere needs N >= 2".into()));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sphere radius must be positive, got {rho}"
            )));
        }
        Ok(Self {
            kind: ManifoldKind::Sphere { rho },
            ambient_dim: n,
            manifold_dim: n - 1,
            scale: rho,
        })
    }

    pub fn cylinder() -> Self {
        Self {
            kind: ManifoldKind::Cylinder,
            ambient_dim: 3,
            manifold_dim: 2,
            scale: 1.0,
        }
    }

    pub fn torus(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("torus needs n >= 1".into()));
        }
        Ok(Self {
            kind: ManifoldKind::Torus { n },
            ambient_dim: 2 * n,
            manifold_dim: n,
            scale: 1.0,
        })
    }

    pub fn sl2() -> Self {
        Self {
            kind: ManifoldKind::Sl2,
            ambient_dim: 4,
            manifold_dim: 3,
            scale: 1.0,
        }
    }

    #[cfg(feature = "so3")]
    pub fn so3() -> Self {
        Self {
            kind: ManifoldKind::So3,
            ambient_dim: 9,
            manifold_dim: 3,
            scale: 1.0,
        }
    }

    /// Parses `flat:N=2`, `sphere:N=3,rho=1.0`, `cylinder`, `torus:n=2`,
    /// `sl2` and (with the `so3` feature) `so3`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        let (name, params) = match spec.split_once(':') {
            Some((n, p)) => (n.trim(), p.trim()),
            None => (spec, ""),
        };
        let mut kv = Vec::new();
        for item in params.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = item.split_once('=').ok_or_else(|| {
                Error::Parse(format!("expected key=value in manifold spec, got `{item}`"))
            })?;
            kv.push((k.trim().to_string(), v.trim().to_string()));
        }
        let get = |key: &str| kv.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let check_keys = |allowed: &[&str]| -> Result<()> {
            for (k, _) in &kv {
                if !allowed.contains(&k.as_str()) {
                    return Err(Error::Parse(format!(
                        "unknown parameter `{k}` for manifold `{name}`"
                    )));
                }
            }
            Ok(())
        };
        let int = |key: &str, default: Option<usize>| -> Result<usize> {
            match get(key) {
                Some(v) => v
                    .parse::<i64>()
                    .map_err(|_| Error::Parse(format!("`{key}` must be an integer, got `{v}`")))
                    .and_then(|x| {
                        if x <= 0 {
                            Err(Error::InvalidParameter(format!(
                                "`{key}` must be positive, got {x}"
                            )))
                        } else {
                            Ok(x as usize)
                        }
                    }),
                None => {
                    default.ok_or_else(|| Error::Parse(format!("manifold `{name}` needs `{key}`")))
                }
            }
        };
        match name {
            "flat" => {
                check_keys(&["N"])?;
                Self::flat(int("N", None)?)
            }
            "sphere" => {
                check_keys(&["N", "rho"])?;
                let rho = match get("rho") {
                    Some(v) => v
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad radius `{v}`")))?,
                    None => 1.0,
                };
                Self::sphere(int("N", Some(3))?, rho)
            }
            "cylinder" => {
                check_keys(&[])?;
                Ok(Self::cylinder())
            }
            "torus" => {
                check_keys(&["n"])?;
                Self::torus(int("n", Some(1))?)
            }
            "sl2" => {
                check_keys(&[])?;
                Ok(Self::sl2())
            }
            #[cfg(feature = "so3")]
            "so3" => {
                check_keys(&[])?;
                Ok(Self::so3())
            }
            _ => Err(Error::UnknownManifold(spec.to_string())),
        }
    }

    pub fn kind(&self) -> &ManifoldKind {
        &self.kind
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn manifold_dim(&self) -> usize {
        self.manifold_dim
    }

    pub fn codim(&self) -> usize {
        self.ambient_dim - self.manifold_dim
    }

    /// Characteristic length (the radius for spheres, 1 otherwise).
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// True when `Q` and `dQ` are closed-form rather than formula/finite-difference backed.
    pub fn has_analytic_projection(&self) -> bool {
        matches!(self.kind, ManifoldKind::Flat | ManifoldKind::Sphere { .. })
    }

    /// Tolerance for projection identities that involve `dQ`.
    pub fn dq_tol(&self) -> f64 {
        if self.has_analytic_projection() {
            crate::tolerances::PROJ_TOL_ANALYTIC
        } else {
            crate::tolerances::PROJ_TOL_FD
        }
    }

    pub fn tol_f(&self) -> f64 {
        TOL_F * self.scale
    }

    /// A canonical base point: the north pole `rho e_N` on spheres, the
    /// identity on matrix groups, `(1, 0, ...)`-type points otherwise.
    pub fn default_origin(&self) -> DVector<f64> {
        let n = self.ambient_dim;
        match self.kind {
            ManifoldKind::Flat => DVector::zeros(n),
            ManifoldKind::Sphere { rho } => {
                let mut o = DVector::zeros(n);
                o[n - 1] = rho;
                o
            }
            ManifoldKind::Cylinder => DVector::from_vec(vec![1.0, 0.0, 0.0]),
            ManifoldKind::Torus { n: k } => DVector::from_iterator(
                2 * k,
                (0..2 * k).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }),
            ),
            ManifoldKind::Sl2 => DVector::from_vec(vec![1.0, 0.0, 0.0, 1.0]),
            #[cfg(feature = "so3")]
            ManifoldKind::So3 => {
                DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            }
        }
    }

    /// `F(x) ∈ R^{N-d}`.
    pub fn constraint(&self, x: &[f64]) -> DVector<f64> {
        match self.kind {
            ManifoldKind::Flat => DVector::zeros(0),
            ManifoldKind::Sphere { rho } => DVector::from_element(1, dot(x, x) - rho * rho),
            ManifoldKind::Cylinder => DVector::from_element(1, x[0] * x[0] + x[1] * x[1] - 1.0),
            ManifoldKind::Torus { n } => DVector::from_iterator(
                n,
                (0..n).map(|i| x[2 * i] * x[2 * i] + x[2 * i + 1] * x[2 * i + 1] - 1.0),
            ),
            ManifoldKind::Sl2 => DVector::from_element(1, x[0] * x[3] - x[1] * x[2] - 1.0),
            #[cfg(feature = "so3")]
            ManifoldKind::So3 => DVector::from_iterator(
                6,
                SYM_PAIRS.iter().map(|&(i, j)| {
                    (0..3).map(|k| x[3 * k + i] * x[3 * k + j]).sum::<f64>()
                        - if i == j { 1.0 } else { 0.0 }
                }),
            ),
        }
    }

    /// `F'(x)` as a `(N-d) × N` matrix.
    pub fn constraint_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.ambient_dim;
        match self.kind {
            ManifoldKind::Flat => DMatrix::zeros(0, n),
            ManifoldKind::Sphere { .. } => DMatrix::from_fn(1, n, |_, j| 2.0 * x[j]),
            ManifoldKind::Cylinder => DMatrix::from_row_slice(1, 3, &[2.0 * x[0], 2.0 * x[1], 0.0]),
            ManifoldKind::Torus { n: k } => DMatrix::from_fn(k, n, |i, j| {
                if j == 2 * i || j == 2 * i + 1 {
                    2.0 * x[j]
                } else {
                    0.0
                }
            }),
            ManifoldKind::Sl2 => DMatrix::from_row_slice(1, 4, &[x[3], -x[2], -x[1], x[0]]),
            #[cfg(feature = "so3")]
            ManifoldKind::So3 => DMatrix::from_fn(6, 9, |r, c| {
                let (i, j) = SYM_PAIRS[r];
                let (a, b) = (c / 3, c % 3);
                // d/dg_ab of sum_k g_ki g_kj
                let mut v = 0.0;
                if b == i {
                    v += x[3 * a + j];
                }
                if b == j {
                    v += x[3 * a + i];
                }
                v
            }),
        }
    }

    /// `F''(x)(v, w)`.
    pub fn constraint_hessian(&self, _x: &[f64], v: &[f64], w: &[f64]) -> DVector<f64> {
        match self.kind {
            ManifoldKind::Flat => DVector::zeros(0),
            ManifoldKind::Sphere { .. } => DVector::from_element(1, 2.0 * dot(v, w)),
            ManifoldKind::Cylinder => DVector::from_element(1, 2.0 * (v[0] * w[0] + v[1] * w[1])),
            ManifoldKind::Torus { n } => DVector::from_iterator(
                n,
                (0..n).map(|i| 2.0 * (v[2 * i] * w[2 * i] + v[2 * i + 1] * w[2 * i + 1])),
            ),
            ManifoldKind::Sl2 => {
                DVector::from_element(1, v[0] * w[3] + v[3] * w[0] - v[1] * w[2] - v[2] * w[1])
            }
            #[cfg(feature = "so3")]
            ManifoldKind::So3 => DVector::from_iterator(
                6,
                SYM_PAIRS.iter().map(|&(i, j)| {
                    (0..3)
                        .map(|k| v[3 * k + i] * w[3 * k + j] + w[3 * k + i] * v[3 * k + j])
                        .sum::<f64>()
                }),
            ),
        }
    }

    /// On-manifold test `|F(m)| <= tol_F`.
    pub fn check_on_manifold(&self, m: &DVector<f64>) -> Result<()> {
        if m.len() != self.ambient_dim {
            return Err(Error::Dimension(format!(
                "point has length {}, ambient dimension is {}",
                m.len(),
                self.ambient_dim
            )));
        }
        let residual = self.constraint(m.as_slice()).norm();
        if residual > self.tol_f() {
            return Err(Error::OffManifold {
                residual,
                tol: self.tol_f(),
            });
        }
        Ok(())
    }

    /// Smallest singular value of `F'(m)` (infinite for flat space).
    pub fn jacobian_min_singular_value(&self, m: &[f64]) -> f64 {
        if self.codim() == 0 {
            return f64::INFINITY;
        }
        let j = self.constraint_jacobian(m);
        j.singular_values()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// `Q(x)`. Off `M` this is the natural smooth extension (`xxᵀ/ρ²` on the
    /// sphere, the formula projection elsewhere).
    pub fn normal_projection(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.ambient_dim;
        match self.kind {
            ManifoldKind::Flat => DMatrix::zeros(n, n),
            ManifoldKind::Sphere { rho } => x * x.transpose() / (rho * rho),
            _ => self.formula_projection(x.as_slice()),
        }
    }

    pub fn tangent_projection(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.ambient_dim, self.ambient_dim) - self.normal_projection(x)
    }

    fn formula_projection(&self, x: &[f64]) -> DMatrix<f64> {
        let j = self.constraint_jacobian(x);
        let g = &j * j.transpose();
        match g.clone().cholesky() {
            Some(ch) => j.transpose() * ch.solve(&j),
            None => {
                let pinv = g
                    .pseudo_inverse(1e-14)
                    .expect("pseudo-inverse of a symmetric matrix");
                j.transpose() * pinv * j
            }
        }
    }

    /// Checked `(m, P(m) v)`.
    pub fn tangent_project(&self, m: &DVector<f64>, v: &DVector<f64>) -> Result<TangentVector> {
        self.check_on_manifold(m)?;
        let smin = self.jacobian_min_singular_value(m.as_slice());
        if smin <= JACOBIAN_RANK_TOL {
            return Err(Error::RankDeficient(smin));
        }
        Ok(TangentVector::unchecked(
            m.clone(),
            self.tangent_projection(m) * v,
        ))
    }

    /// Checked `dQ(v_m)`.
    pub fn dq(&self, v: &TangentVector) -> Result<DMatrix<f64>> {
        self.check_on_manifold(&v.base)?;
        Ok(self.dq_matrix(&v.base, &v.vec))
    }

    /// `dQ(v_x)` without validation. Analytic on the sphere (`(v xᵀ + x vᵀ)/ρ²`)
    /// and flat space; elsewhere a central difference of `Q` along the
    /// retracted curve through `x` with step `6e-6 · scale`.
    pub fn dq_matrix(&self, x: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        let n = self.ambient_dim;
        match self.kind {
            ManifoldKind::Flat => DMatrix::zeros(n, n),
            ManifoldKind::Sphere { rho } => (v * x.transpose() + x * v.transpose()) / (rho * rho),
            _ => {
                let speed = v.norm();
                if speed == 0.0 {
                    return DMatrix::zeros(n, n);
                }
                let h = DQ_FD_STEP * self.scale;
                let dir = v / speed;
                let plus = x + &dir * h;
                let minus = x - &dir * h;
                let plus = self.retract(&plus).unwrap_or(plus);
                let minus = self.retract(&minus).unwrap_or(minus);
                (self.formula_projection(plus.as_slice())
                    - self.formula_projection(minus.as_slice()))
                    * (speed / (2.0 * h))
            }
        }
    }

    /// Returns a nearby point on `M`. Radial normalisation on the sphere,
    /// damped Gauss-Newton with the pseudo-inverse of `F'` elsewhere.
    pub fn retract(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        match self.kind {
            ManifoldKind::Flat => Ok(x.clone()),
            ManifoldKind::Sphere { rho } => {
                let r = x.norm();
                if r == 0.0 || !r.is_finite() {
                    return Err(Error::OutsideBasin(rho * rho));
                }
                Ok(x * (rho / r))
            }
            _ => self.gauss_newton_retract(x),
        }
    }

    fn gauss_newton_retract(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let target = 1e-3 * self.tol_f();
        let mut y = x.clone();
        let mut f = self.constraint(y.as_slice());
        let mut res = f.norm();
        if res > RETRACT_BASIN * self.scale {
            return Err(Error::OutsideBasin(res));
        }
        for _ in 0..MAX_RETRACT_ITERS {
            if res <= target {
                return Ok(y);
            }
            let j = self.constraint_jacobian(y.as_slice());
            let g = &j * j.transpose();
            let step = match g.clone().cholesky() {
                Some(ch) => j.transpose() * ch.solve(&f),
                None => return Err(Error::RankDeficient(0.0)),
            };
            let mut damping = 1.0;
            let mut accepted = false;
            for _ in 0..8 {
                let cand = &y - &step * damping;
                let fc = self.constraint(cand.as_slice());
                if fc.norm() < res {
                    y = cand;
                    f = fc;
                    res = f.norm();
                    accepted = true;
                    break;
                }
                damping *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if res <= self.tol_f() {
            Ok(y)
        } else {
            Err(Error::RetractionFailed {
                iters: MAX_RETRACT_ITERS,
                residual: res,
            })
        }
    }

    /// Orthonormal basis of `τ_m M` (columns) from pivoted Gram-Schmidt on
    /// the columns of `P(m)`.
    pub fn tangent_basis(&self, m: &DVector<f64>) -> DMatrix<f64> {
        pivoted_gram_schmidt(&self.tangent_projection(m), self.manifold_dim)
    }

    /// `Some(c)` when `Ric = c · I` everywhere on `M`.
    pub fn constant_ricci(&self) -> Option<f64> {
        match self.kind {
            ManifoldKind::Flat | ManifoldKind::Cylinder | ManifoldKind::Torus { .. } => Some(0.0),
            ManifoldKind::Sphere { rho } => Some((self.ambient_dim as f64 - 2.0) / (rho * rho)),
            _ => None,
        }
    }

    /// `P(x)` as a matrix of polynomials (row-major) when the extension is polynomial.
    pub fn projection_poly(&self) -> Option<Vec<Vec<Poly>>> {
        let n = self.ambient_dim;
        match self.kind {
            ManifoldKind::Flat => Some(
                (0..n)
                    .map(|i| {
                        (0..n)
                            .map(|j| Poly::constant(n, if i == j { 1.0 } else { 0.0 }))
                            .collect()
                    })
                    .collect(),
            ),
            ManifoldKind::Sphere { rho } => Some(
                (0..n)
                    .map(|i| {
                        (0..n)
                            .map(|j| {
                                let xx = &Poly::var(n, i) * &Poly::var(n, j);
                                let delta = Poly::constant(n, if i == j { 1.0 } else { 0.0 });
                                &delta - &xx.scale(1.0 / (rho * rho))
                            })
                            .collect()
                    })
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Draws a point on `M` (not uniformly in general).
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.ambient_dim;
        let mut gauss = |k: usize| {
            DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)))
        };
        match self.kind {
            ManifoldKind::Flat => gauss(n),
            ManifoldKind::Sphere { rho } => {
                let g = gauss(n);
                &g * (rho / g.norm())
            }
            ManifoldKind::Cylinder => {
                let g = gauss(3);
                let r = (g[0] * g[0] + g[1] * g[1]).sqrt();
                DVector::from_vec(vec![g[0] / r, g[1] / r, g[2]])
            }
            ManifoldKind::Torus { n: k } => {
                let g = gauss(2 * k);
                DVector::from_iterator(
                    2 * k,
                    (0..2 * k).map(|i| {
                        let p = i / 2;
                        g[i] / (g[2 * p] * g[2 * p] + g[2 * p + 1] * g[2 * p + 1]).sqrt()
                    }),
                )
            }
            ManifoldKind::Sl2 => loop {
                let g = gauss(4);
                let det = g[0] * g[3] - g[1] * g[2];
                if det.abs() < 0.1 {
                    continue;
                }
                let mut h = g.clone();
                if det < 0.0 {
                    h.swap_rows(0, 1);
                    h.swap_rows(2, 3);
                }
                break &h / det.abs().sqrt();
            },
            #[cfg(feature = "so3")]
            ManifoldKind::So3 => {
                let g = DMatrix::from_row_slice(3, 3, gauss(9).as_slice());
                let qr = g.qr();
                let mut q = qr.q();
                if q.determinant() < 0.0 {
                    q.column_mut(0).neg_mut();
                }
                DVector::from_iterator(9, (0..9).map(|c| q[(c / 3, c % 3)]))
            }
        }
    }

    /// A random tangent vector at `m` with standard normal ambient coordinates projected.
    pub fn sample_tangent<R: Rng + ?Sized>(&self, m: &DVector<f64>, rng: &mut R) -> TangentVector {
        let n = self.ambient_dim;
        let g = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        TangentVector::unchecked(m.clone(), self.tangent_projection(m) * g)
    }

    // ---- slice kernels for the simulation loops -------------------------

    /// `out = P(x) v`.
    pub(crate) fn apply_p(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        match self.kind {
            ManifoldKind::Flat => out.copy_from_slice(v),
            ManifoldKind::Sphere { rho } => {
                let c = dot(x, v) / (rho * rho);
                for i in 0..x.len() {
                    out[i] = v[i] - c * x[i];
                }
            }
            _ => {
                let q = self.formula_projection(x);
                for i in 0..x.len() {
                    out[i] = v[i] - (0..x.len()).map(|j| q[(i, j)] * v[j]).sum::<f64>();
                }
            }
        }
    }

    /// `out = dQ(w_x) v`.
    pub(crate) fn apply_dq(&self, x: &[f64], w: &[f64], v: &[f64], out: &mut [f64]) {
        match self.kind {
            ManifoldKind::Flat => out.fill(0.0),
            ManifoldKind::Sphere { rho } => {
                let r2 = rho * rho;
                let xv = dot(x, v) / r2;
                let wv = dot(w, v) / r2;
                for i in 0..x.len() {
                    out[i] = w[i] * xv + x[i] * wv;
                }
            }
            _ => {
                let dq = self.dq_matrix(
                    &DVector::from_column_slice(x),
                    &DVector::from_column_slice(w),
                );
                for i in 0..x.len() {
                    out[i] = (0..x.len()).map(|j| dq[(i, j)] * v[j]).sum();
                }
            }
        }
    }

    /// `out = Γ(w_x) u` with `Γ(w) = dQ(w) P + dP(w) Q = dQ(w)(I - 2Q)`.
    /// `u` and `out` are column-major `N × cols`.
    pub(crate) fn apply_gamma(
        &self,
        x: &[f64],
        w: &[f64],
        u: &[f64],
        cols: usize,
        out: &mut [f64],
    ) {
        let n = x.len();
        match self.kind {
            ManifoldKind::Flat => out[..n * cols].fill(0.0),
            ManifoldKind::Sphere { rho } => {
                let r2 = rho * rho;
                let xx = dot(x, x) / r2;
                let wx = dot(w, x) / r2;
                for c in 0..cols {
                    let col = &u[c * n..(c + 1) * n];
                    // t = col - 2 x (x·col)/ρ²;  dQ(w) t = (w (x·t) + x (w·t))/ρ²
                    let xc = dot(x, col) / r2;
                    let wc = dot(w, col) / r2;
                    let xt = xc - 2.0 * xc * xx;
                    let wt = wc - 2.0 * xc * wx;
                    let o = &mut out[c * n..(c + 1) * n];
                    for i in 0..n {
                        o[i] = w[i] * xt + x[i] * wt;
                    }
                }
            }
            _ => {
                let xv = DVector::from_column_slice(x);
                let q = self.formula_projection(x);
                let dq = self.dq_matrix(&xv, &DVector::from_column_slice(w));
                let gamma = &dq * (DMatrix::identity(n, n) - q * 2.0);
                let um = DMatrix::from_column_slice(n, cols, &u[..n * cols]);
                out[..n * cols].copy_from_slice((gamma * um).as_slice());
            }
        }
    }

    /// In-place retraction of a slice point; returns false if it failed.
    pub(crate) fn retract_in_place(&self, x: &mut [f64]) -> Result<()> {
        match self.kind {
            ManifoldKind::Flat => Ok(()),
            ManifoldKind::Sphere { rho } => {
                let r = crate::linalg::norm(x);
                if r == 0.0 || !r.is_finite() {
                    return Err(Error::OutsideBasin(rho * rho));
                }
                let s = rho / r;
                x.iter_mut().for_each(|v| *v *= s);
                Ok(())
            }
            _ => {
                let y = self.gauss_newton_retract(&DVector::from_column_slice(x))?;
                x.copy_from_slice(y.as_slice());
                Ok(())
            }
        }
    }
}

#[cfg(feature = "so3")]
const SYM_PAIRS: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

impl FromStr for ManifoldModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl fmt::Display for ManifoldModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ManifoldKind::Flat => write!(f, "flat:N={}", self.ambient_dim),
            ManifoldKind::Sphere { rho } => write!(f, "sphere:N={},rho={}", self.ambient_dim, rho),
            ManifoldKind::Cylinder => write!(f, "cylinder"),
            ManifoldKind::Torus { n } => write!(f, "torus:n={n}"),
            ManifoldKind::Sl2 => write!(f, "sl2"),
            #[cfg(feature = "so3")]
            ManifoldKind::So3 => write!(f, "so3"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn all_models() -> Vec<ManifoldModel> {
        let mut v = vec![
            ManifoldModel::flat(3).unwrap(),
            ManifoldModel::sphere(3, 1.0).unwrap(),
            ManifoldModel::sphere(4, 2.0).unwrap(),
            ManifoldModel::cylinder(),
            ManifoldModel::torus(2).unwrap(),
            ManifoldModel::sl2(),
        ];
        #[cfg(feature = "so3")]
        v.push(ManifoldModel::so3());
        v
    }

    #[test]
    fn parse_specs() {
        let s = ManifoldModel::parse("sphere:N=3,rho=1.0").unwrap();
        assert_eq!(s.kind(), &ManifoldKind::Sphere { rho: 1.0 });
        assert_eq!(s.manifold_dim(), 2);
        assert_eq!(ManifoldModel::parse("flat:N=2").unwrap().ambient_dim(), 2);
        assert_eq!(ManifoldModel::parse("torus:n=2").unwrap().ambient_dim(), 4);
        assert_eq!(ManifoldModel::parse("sl2").unwrap().manifold_dim(), 3);
        assert_eq!(
            ManifoldModel::parse("cylinder").unwrap().to_string(),
            "cylinder"
        );
        assert!(matches!(
            ManifoldModel::parse("klein"),
            Err(Error::UnknownManifold(_))
        ));
        assert!(matches!(
            ManifoldModel::parse("sphere:N=3,rho=-1"),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            ManifoldModel::parse("flat:N=0"),
            Err(Error::InvalidParameter(_))
        ));
        assert!(ManifoldModel::parse("sphere:N=3,radius=2").is_err());
    }

    #[test]
    fn sphere_pole_projection() {
        let m = ManifoldModel::sphere(3, 1.0).unwrap();
        let q = m.normal_projection(&DVector::from_vec(vec![0.0, 0.0, 1.0]));
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.0, 1.0]));
        assert!(max_abs_diff(&q, &want) < 1e-15);
    }

    #[test]
    fn flat_projection_is_identity() {
        let m = ManifoldModel::flat(2).unwrap();
        let x = DVector::from_vec(vec![0.3, -2.0]);
        assert_eq!(m.tangent_projection(&x), DMatrix::identity(2, 2));
        assert_eq!(m.normal_projection(&x), DMatrix::zeros(2, 2));
    }

    #[test]
    fn sl2_projection_at_identity_is_half_trace() {
        // F'(I)A = tr A, so Q(I)A = (tr A / 2) I.
        let m = ManifoldModel::sl2();
        let q = m.normal_projection(&m.default_origin());
        let a = DVector::from_vec(vec![0.7, -1.2, 3.1, 0.4]);
        let got = q * &a;
        let half_tr = (0.7 + 0.4) / 2.0;
        let want = DVector::from_vec(vec![half_tr, 0.0, 0.0, half_tr]);
        assert!((got - want).norm() < 1e-14);
    }

    #[test]
    fn tangent_project_examples() {
        let m = ManifoldModel::sphere(3, 1.0).unwrap();
        let pole = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        let e3 = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert!(m.tangent_project(&pole, &e3).unwrap().vec.norm() < 1e-15);
        assert_eq!(m.tangent_project(&pole, &e1).unwrap().vec, e1);
        let flat = ManifoldModel::flat(5).unwrap();
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(flat.tangent_project(&v, &v).unwrap().vec, v);
        let off = DVector::from_vec(vec![0.0, 0.0, 1.01]);
        assert!(matches!(
            m.tangent_project(&off, &e1),
            Err(Error::OffManifold { .. })
        ));
    }

    #[test]
    fn tangent_project_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for model in all_models() {
            let p = model.sample_point(&mut rng);
            let v = DVector::from_iterator(
                model.ambient_dim(),
                (0..model.ambient_dim()).map(|i| i as f64 - 1.3),
            );
            let once = model.tangent_project(&p, &v).unwrap();
            let twice = model.tangent_project(&p, &once.vec).unwrap();
            assert!((once.vec - twice.vec).norm() < 1e-9, "{model}");
        }
    }

    #[test]
    fn projection_invariants_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for model in all_models() {
            let n = model.ambient_dim();
            let tol = 1e-9;
            for _ in 0..100 {
                let m = model.sample_point(&mut rng);
                model.check_on_manifold(&m).unwrap();
                assert!(model.jacobian_min_singular_value(m.as_slice()) > JACOBIAN_RANK_TOL);
                let p = model.tangent_projection(&m);
                let q = model.normal_projection(&m);
                assert!(max_abs_diff(&(&p + &q), &DMatrix::identity(n, n)) < tol);
                assert!(max_abs_diff(&(&p * &p), &p) < tol, "{model}");
                assert!(max_abs_diff(&(&q * &q), &q) < tol);
                assert!(crate::linalg::max_abs(&(&p * &q)) < tol);
                assert!(max_abs_diff(&p, &p.transpose()) < tol);
                assert!((p.trace() - model.manifold_dim() as f64).abs() < tol * n as f64);
            }
        }
    }

    #[test]
    fn sphere_dq_formula_matches_finite_difference() {
        let m = ManifoldModel::sphere(4, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = m.sample_point(&mut rng);
        let v = m.sample_tangent(&x, &mut rng).vec;
        let h = 1e-5;
        let qp = m.normal_projection(&m.retract(&(&x + &v * h)).unwrap());
        let qm = m.normal_projection(&m.retract(&(&x - &v * h)).unwrap());
        let fd = (qp - qm) / (2.0 * h);
        assert!(max_abs_diff(&fd, &m.dq_matrix(&x, &v)) < 1e-8);
    }

    #[test]
    fn dq_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for model in all_models() {
            let tol = model.dq_tol();
            for _ in 0..20 {
                let m = model.sample_point(&mut rng);
                let v = model.sample_tangent(&m, &mut rng);
                let w = model.sample_tangent(&m, &mut rng);
                let dqv = model.dq(&v).unwrap();
                let dqw = model.dq(&w).unwrap();
                let p = model.tangent_projection(&m);
                let q = model.normal_projection(&m);
                let scale = 1.0 + v.vec.norm();
                assert!(
                    max_abs_diff(&dqv, &dqv.transpose()) < tol * scale,
                    "{model} symmetric"
                );
                assert!(
                    crate::linalg::max_abs(&(&q * &dqv * &q)) < tol * scale,
                    "{model} QdQQ"
                );
                assert!(
                    crate::linalg::max_abs(&(&p * &dqv * &p)) < tol * scale,
                    "{model} PdQP"
                );
                let dpv = -&dqv;
                assert!(crate::linalg::max_abs(&(&p * &dpv * &p)) < tol * scale);
                assert!(crate::linalg::max_abs(&(&q * &dpv * &q)) < tol * scale);
                // torsion-free: dQ(v)w = dQ(w)v
                let lhs = &dqv * &w.vec;
                let rhs = &dqw * &v.vec;
                assert!(
                    (lhs - rhs).norm() < tol * (1.0 + v.vec.norm() * w.vec.norm()),
                    "{model} torsion"
                );
            }
        }
    }

    #[test]
    fn retract_examples() {
        let s = ManifoldModel::sphere(3, 1.0).unwrap();
        let r = s.retract(&DVector::from_vec(vec![0.0, 0.0, 1.1])).unwrap();
        assert!((r - DVector::from_vec(vec![0.0, 0.0, 1.0])).norm() < 1e-15);
        let f = ManifoldModel::flat(3).unwrap();
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(f.retract(&x).unwrap(), x);
        let c = ManifoldModel::cylinder();
        let r = c.retract(&DVector::from_vec(vec![1.05, 0.0, 7.0])).unwrap();
        assert!((r - DVector::from_vec(vec![1.0, 0.0, 7.0])).norm() <= c.tol_f());
    }

    #[test]
    fn retract_is_a_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for model in all_models() {
            for _ in 0..20 {
                let m = model.sample_point(&mut rng);
                let v = model.sample_tangent(&m, &mut rng).vec * 0.01;
                let x = &m + v + DVector::from_element(model.ambient_dim(), 1e-3);
                let r1 = model.retract(&x).unwrap();
                model.check_on_manifold(&r1).unwrap();
                let r2 = model.retract(&r1).unwrap();
                assert!((&r1 - &r2).norm() <= model.tol_f(), "{model}");
                assert!((&r1 - &x).norm() < 10.0 * model.constraint(x.as_slice()).norm() + 1e-12);
            }
        }
    }

    #[test]
    fn retract_outside_basin_fails() {
        let c = ManifoldModel::cylinder();
        assert!(matches!(
            c.retract(&DVector::from_vec(vec![3.0, 0.0, 0.0])),
            Err(Error::OutsideBasin(_))
        ));
    }

    #[test]
    fn slice_kernels_agree_with_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for model in all_models() {
            let n = model.ambient_dim();
            let m = model.sample_point(&mut rng);
            let w = model.sample_tangent(&m, &mut rng).vec;
            let u = DMatrix::from_fn(n, n, |i, j| ((i * n + j) as f64).sin());
            let mut out = vec![0.0; n * n];
            model.apply_gamma(m.as_slice(), w.as_slice(), u.as_slice(), n, &mut out);
            let dq = model.dq_matrix(&m, &w);
            let q = model.normal_projection(&m);
            let p = model.tangent_projection(&m);
            let gamma = &dq * &p + (-&dq) * &q;
            let want = &gamma * &u;
            assert!(
                max_abs_diff(&DMatrix::from_column_slice(n, n, &out), &want) < 1e-10,
                "{model}"
            );
            // Γ is skew
            assert!(
                max_abs_diff(&gamma, &(-gamma.transpose())) < model.dq_tol() * 10.0,
                "{model}"
            );
        }
    }
}
