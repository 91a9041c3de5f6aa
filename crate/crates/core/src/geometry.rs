//! Levi-Civita calculus on an embedded manifold, computed entirely from
//! `P`, `Q` and `dQ`: covariant derivatives, curvature, Ricci, gradient,
//! Hessian, Laplace-Beltrami and Lie brackets.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::manifold::{ManifoldModel, TangentVector};
use crate::poly::{Poly, PolyField};
use crate::tolerances::{DQ_FD_STEP, TANG_TOL};

type EvalFn = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;
type DirFn = Arc<dyn Fn(&[f64], &[f64]) -> DVector<f64> + Send + Sync>;

/// A vector field `Y(m) = (m, y(m))` given by an ambient map `y: R^N → R^N`
/// that is tangent along `M`.
#[derive(Clone)]
pub struct VectorField {
    dim: usize,
    label: String,
    eval: EvalFn,
    jacobian: Option<DirFn>,
    poly: Option<PolyField>,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("dim", &self.dim)
            .field("label", &self.label)
            .field("polynomial", &self.poly.is_some())
            .finish()
    }
}

impl VectorField {
    pub fn from_poly(label: impl Into<String>, field: PolyField) -> Self {
        let p = field.clone();
        Self {
            dim: field.dim(),
            label: label.into(),
            eval: Arc::new(move |x| p.eval(x)),
            jacobian: None,
            poly: Some(field),
        }
    }

    pub fn from_fn(
        dim: usize,
        label: impl Into<String>,
        f: impl Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            label: label.into(),
            eval: Arc::new(f),
            jacobian: None,
            poly: None,
        }
    }

    /// Attaches an exact directional derivative `(x, v) ↦ dy(v_x)`.
    pub fn with_jacobian(
        mut self,
        j: impl Fn(&[f64], &[f64]) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.jacobian = Some(Arc::new(j));
        self
    }

    /// `X_i(x) = P(x) e_i`. Polynomial when `P` has a polynomial extension.
    pub fn projection_field(model: &ManifoldModel, i: usize) -> Self {
        let n = model.ambient_dim();
        let label = format!("P e{}", i + 1);
        if let Some(p) = model.projection_poly() {
            let comps = (0..n).map(|r| p[r][i].clone()).collect();
            return Self::from_poly(label, PolyField::new(comps));
        }
        let m1 = model.clone();
        let m2 = model.clone();
        Self::from_fn(n, label, move |x| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            let mut out = vec![0.0; n];
            m1.apply_p(x, &e, &mut out);
            DVector::from_vec(out)
        })
        .with_jacobian(move |x, v| {
            // dP(v) e_i = -dQ(v) e_i
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            let mut out = vec![0.0; n];
            m2.apply_dq(x, v, &e, &mut out);
            -DVector::from_vec(out)
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn poly(&self) -> Option<&PolyField> {
        self.poly.as_ref()
    }

    pub fn eval(&self, x: &[f64]) -> DVector<f64> {
        (self.eval)(x)
    }

    /// `dy(v_x)`: exact for polynomial fields or when a jacobian is attached,
    /// otherwise a central difference.
    pub fn directional(&self, x: &[f64], v: &[f64]) -> DVector<f64> {
        if let Some(p) = &self.poly {
            return p.directional(x, v);
        }
        if let Some(j) = &self.jacobian {
            return j(x, v);
        }
        let speed = crate::linalg::norm(v);
        if speed == 0.0 {
            return DVector::zeros(self.dim);
        }
        let h = DQ_FD_STEP * (1.0 + crate::linalg::norm(x)) / speed;
        let plus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
        (self.eval(&plus) - self.eval(&minus)) / (2.0 * h)
    }

    /// `dy(x)` as an `N × N` matrix.
    pub fn jacobian_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        if let Some(p) = &self.poly {
            return p.jacobian_matrix(x);
        }
        let n = self.dim;
        let mut m = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for c in 0..n {
            e[c] = 1.0;
            m.set_column(c, &self.directional(x, &e));
            e[c] = 0.0;
        }
        m
    }
}

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradientFn = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;
type HessianFn = Arc<dyn Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync>;

/// A smooth function `f = F|_M` given by an ambient extension `F`.
#[derive(Clone)]
pub struct ScalarField {
    dim: usize,
    label: String,
    eval: ScalarFn,
    gradient: GradientFn,
    hessian: HessianFn,
    poly: Option<Poly>,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("dim", &self.dim)
            .field("label", &self.label)
            .finish()
    }
}

impl ScalarField {
    pub fn from_poly(p: Poly) -> Self {
        let n = p.nvars();
        let label = p.to_string();
        let grad = p.gradient();
        let hess: Vec<Vec<Poly>> = grad.iter().map(Poly::gradient).collect();
        let pe = p.clone();
        Self {
            dim: n,
            label,
            eval: Arc::new(move |x| pe.eval(x)),
            gradient: Arc::new(move |x| DVector::from_iterator(n, grad.iter().map(|g| g.eval(x)))),
            hessian: Arc::new(move |x, v, w| {
                let mut s = 0.0;
                for (i, row) in hess.iter().enumerate() {
                    if v[i] == 0.0 {
                        continue;
                    }
                    for (j, h) in row.iter().enumerate() {
                        if w[j] != 0.0 {
                            s += h.eval(x) * v[i] * w[j];
                        }
                    }
                }
                s
            }),
            poly: Some(p),
        }
    }

    /// Parses a polynomial in `x1..xN`.
    pub fn parse(src: &str, nvars: usize) -> Result<Self> {
        Ok(Self::from_poly(Poly::parse(src, nvars)?))
    }

    pub fn from_fns(
        dim: usize,
        label: impl Into<String>,
        eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
        hessian: impl Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            label: label.into(),
            eval: Arc::new(eval),
            gradient: Arc::new(gradient),
            hessian: Arc::new(hessian),
            poly: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn poly(&self) -> Option<&Poly> {
        self.poly.as_ref()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    /// Ambient gradient `∇F(x)`.
    pub fn ambient_gradient(&self, x: &[f64]) -> DVector<f64> {
        (self.gradient)(x)
    }

    /// `F''(x)(v, w)`.
    pub fn ambient_hessian(&self, x: &[f64], v: &[f64], w: &[f64]) -> f64 {
        (self.hessian)(x, v, w)
    }
}

pub fn orthonormal_tangent_basis(model: &ManifoldModel, m: &DVector<f64>) -> DMatrix<f64> {
    model.tangent_basis(m)
}

fn check_field_tangent(
    model: &ManifoldModel,
    m: &DVector<f64>,
    y: &DVector<f64>,
    label: &str,
) -> Result<()> {
    let normal = model.normal_projection(m) * y;
    if normal.norm() > TANG_TOL.max(model.dq_tol()) * (1.0 + y.norm()) {
        return Err(Error::InvalidParameter(format!(
            "field `{label}` is not tangent at the base point (|Qy| = {:e})",
            normal.norm()
        )));
    }
    Ok(())
}

/// `∇_v Y = (m, P(m) dy(v_m))`.
pub fn covariant_derivative(
    model: &ManifoldModel,
    y: &VectorField,
    v: &TangentVector,
) -> Result<TangentVector> {
    model.check_on_manifold(&v.base)?;
    let dy = y.directional(v.base.as_slice(), v.vec.as_slice());
    Ok(TangentVector::unchecked(
        v.base.clone(),
        model.tangent_projection(&v.base) * dy,
    ))
}

/// Curvature as an operator, `R(u, v) = [dQ(u), dQ(v)]`.
pub fn curvature_operator(
    model: &ManifoldModel,
    m: &DVector<f64>,
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> DMatrix<f64> {
    let du = model.dq_matrix(m, u);
    let dv = model.dq_matrix(m, v);
    &du * &dv - &dv * &du
}

/// `R(u, v) w = [dQ(u), dQ(v)] w`.
pub fn curvature(
    model: &ManifoldModel,
    u: &TangentVector,
    v: &TangentVector,
    w: &TangentVector,
) -> Result<TangentVector> {
    if !u.same_base(v) || !u.same_base(w) {
        return Err(Error::BasePointMismatch);
    }
    model.check_on_manifold(&u.base)?;
    let r = curvature_operator(model, &u.base, &u.vec, &v.vec);
    Ok(TangentVector::unchecked(u.base.clone(), r * &w.vec))
}

/// `Ric v = Σ_a R(v, a) a` over the pivoted Gram-Schmidt basis at `m`.
pub fn ricci(model: &ManifoldModel, v: &TangentVector) -> Result<TangentVector> {
    model.check_on_manifold(&v.base)?;
    let basis = model.tangent_basis(&v.base);
    Ok(TangentVector::unchecked(
        v.base.clone(),
        ricci_apply(model, &v.base, &basis, &v.vec),
    ))
}

fn ricci_apply(
    model: &ManifoldModel,
    m: &DVector<f64>,
    basis: &DMatrix<f64>,
    v: &DVector<f64>,
) -> DVector<f64> {
    let dv = model.dq_matrix(m, v);
    let mut out = DVector::zeros(model.ambient_dim());
    for a in basis.column_iter() {
        let a = a.into_owned();
        let da = model.dq_matrix(m, &a);
        out += &dv * (&da * &a) - &da * (&dv * &a);
    }
    out
}

/// `Ric_m` as an `N × N` matrix acting on `τ_m M` and vanishing on the normal space.
pub fn ricci_matrix(model: &ManifoldModel, m: &DVector<f64>) -> DMatrix<f64> {
    let basis = model.tangent_basis(m);
    let mut out = DMatrix::zeros(model.ambient_dim(), model.ambient_dim());
    for b in basis.column_iter() {
        let b = b.into_owned();
        let r = ricci_apply(model, m, &basis, &b);
        out += r * b.transpose();
    }
    out
}

/// `⟨Ric u, v⟩` from the trace formula `tr(dQ(dQ(u)v) - dQ(v)dQ(u))`.
///
/// The trace runs over `τ_m M`. `dQ(u)v` is a normal vector, so the first
/// term is read as `Σ_a ⟨a, dQ(a) dQ(u) v⟩` using `dQ(a)n = dQ(n)a`.
pub fn ricci_form_trace(
    model: &ManifoldModel,
    m: &DVector<f64>,
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> f64 {
    let basis = model.tangent_basis(m);
    let du = model.dq_matrix(m, u);
    let dv = model.dq_matrix(m, v);
    let n = &du * v;
    basis
        .column_iter()
        .map(|a| {
            let a = a.into_owned();
            let da = model.dq_matrix(m, &a);
            a.dot(&(&da * &n)) - a.dot(&(&dv * (&du * &a)))
        })
        .sum()
}

/// `grad f(m) = P(m) ∇F(m)`.
pub fn gradient(model: &ManifoldModel, f: &ScalarField, m: &DVector<f64>) -> Result<TangentVector> {
    model.check_on_manifold(m)?;
    Ok(TangentVector::unchecked(
        m.clone(),
        model.tangent_projection(m) * f.ambient_gradient(m.as_slice()),
    ))
}

/// `∇df(v, w) = F''(m)(v, w) - F'(m) dQ(v) w`.
pub fn hessian_form(
    model: &ManifoldModel,
    f: &ScalarField,
    m: &DVector<f64>,
    v: &DVector<f64>,
    w: &DVector<f64>,
) -> f64 {
    let dqvw = model.dq_matrix(m, v) * w;
    f.ambient_hessian(m.as_slice(), v.as_slice(), w.as_slice())
        - f.ambient_gradient(m.as_slice()).dot(&dqvw)
}

/// Laplace-Beltrami `Δf(m) = Σ_i F''(e_i, e_i) - F'(m) dQ(e_i) e_i` over the
/// pivoted Gram-Schmidt basis at `m`.
pub fn laplacian(model: &ManifoldModel, f: &ScalarField, m: &DVector<f64>) -> Result<f64> {
    model.check_on_manifold(m)?;
    Ok(laplacian_with_basis(model, f, m, &model.tangent_basis(m)))
}

/// Same as [`laplacian`] with a caller-supplied orthonormal tangent basis (columns).
pub fn laplacian_with_basis(
    model: &ManifoldModel,
    f: &ScalarField,
    m: &DVector<f64>,
    basis: &DMatrix<f64>,
) -> f64 {
    basis
        .column_iter()
        .map(|e| {
            let e = e.into_owned();
            hessian_form(model, f, m, &e, &e)
        })
        .sum()
}

/// `[Y, W](m) = dw(Y(m)) - dy(W(m))`.
pub fn lie_bracket(
    model: &ManifoldModel,
    y: &VectorField,
    w: &VectorField,
    m: &DVector<f64>,
) -> Result<TangentVector> {
    model.check_on_manifold(m)?;
    let x = m.as_slice();
    let yv = y.eval(x);
    let wv = w.eval(x);
    let out = w.directional(x, yv.as_slice()) - y.directional(x, wv.as_slice());
    check_field_tangent(model, m, &out, "[Y, W]")?;
    Ok(TangentVector::unchecked(m.clone(), out))
}

/// `∇²_{v⊗w} Z = dQ(v)dQ(w) z + P z''(v, w) - P z'[dQ(v) w]` for a polynomial
/// field `z` tangent along `M`.
pub fn second_covariant_derivative(
    model: &ManifoldModel,
    z: &PolyField,
    m: &DVector<f64>,
    v: &DVector<f64>,
    w: &DVector<f64>,
) -> DVector<f64> {
    let x = m.as_slice();
    let dqv = model.dq_matrix(m, v);
    let dqw = model.dq_matrix(m, w);
    let p = model.tangent_projection(m);
    let zm = z.eval(x);
    let dqvw = &dqv * w;
    &dqv * (&dqw * zm) + &p * z.second(x, v.as_slice(), w.as_slice())
        - &p * z.directional(x, dqvw.as_slice())
}

/// The polynomial field `x ↦ P(x) ∇F(x)`, available when `P` extends polynomially.
pub fn gradient_field(model: &ManifoldModel, f: &ScalarField) -> Result<PolyField> {
    let p = model
        .projection_poly()
        .ok_or_else(|| Error::NotPolynomial(format!("projection of {model}")))?;
    let fpoly = f
        .poly()
        .ok_or_else(|| Error::NotPolynomial(f.label().to_string()))?;
    let n = model.ambient_dim();
    let grad = fpoly.with_nvars(n).gradient();
    let comps = (0..n)
        .map(|i| (0..n).fold(Poly::zero(n), |acc, j| &acc + &(&p[i][j] * &grad[j])))
        .collect();
    Ok(PolyField::new(comps))
}

/// `|Σ_a ∇²_{a⊗a} ∇f - grad Δf - Ric ∇f|` at `m`. `grad Δf` is a central
/// difference of [`laplacian`] along retracted curves.
pub fn bochner_residual(model: &ManifoldModel, f: &ScalarField, m: &DVector<f64>) -> Result<f64> {
    model.check_on_manifold(m)?;
    let z = gradient_field(model, f)?;
    let basis = model.tangent_basis(m);
    let mut lhs = DVector::zeros(model.ambient_dim());
    for a in basis.column_iter() {
        let a = a.into_owned();
        lhs += second_covariant_derivative(model, &z, m, &a, &a);
    }
    let h = 1e-4 * model.scale();
    let mut grad_lap = DVector::zeros(model.ambient_dim());
    for a in basis.column_iter() {
        let a = a.into_owned();
        let plus = model.retract(&(m + &a * h))?;
        let minus = model.retract(&(m - &a * h))?;
        let d = (laplacian(model, f, &plus)? - laplacian(model, f, &minus)?) / (2.0 * h);
        grad_lap += a * d;
    }
    let ric = ricci_matrix(model, m) * z.eval(m.as_slice());
    Ok((lhs - grad_lap - ric).norm())
}
