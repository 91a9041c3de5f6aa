//! Stratonovich SDEs on `M` by the Wong-Zakai scheme: on each grid interval
//! the driver is replaced by its linear interpolation and the resulting ODE
//! is solved with `n_sub` RK4 substeps, followed by a retraction.
//!
//! Projection Brownian motion `δΣ = P(Σ) δB` additionally carries stochastic
//! parallel transport, the anti-development, the Itô derivative flow and the
//! Ricci weight.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::driver::DrivingPath;
use crate::error::{Error, Result};
use crate::geometry::{ricci_matrix, ScalarField, VectorField};
use crate::linalg::{bjorck_step, dot, orthogonality_drift, sym_expm};
use crate::manifold::ManifoldModel;
use crate::ode::Rk4;
use crate::poly::{Poly, PolyField};
use crate::tolerances::{FRAME_FAIL, RANK_TOL, TANG_TOL, WZ_SUBSTEPS};
use crate::transport::{DiscretePath, Interpolation};

/// `dΣ = Σ_i X_i(Σ) ∘ dB^i + X_0(Σ) dt` on a manifold model.
#[derive(Clone)]
pub struct SdeSystem {
    name: String,
    model: ManifoldModel,
    fields: Vec<VectorField>,
    drift: Option<VectorField>,
    origin: DVector<f64>,
    projection: bool,
}

impl fmt::Debug for SdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeSystem")
            .field("name", &self.name)
            .field("model", &self.model.to_string())
            .field(
                "fields",
                &self
                    .fields
                    .iter()
                    .map(|x| x.label().to_string())
                    .collect::<Vec<_>>(),
            )
            .field("drift", &self.drift.as_ref().map(|x| x.label().to_string()))
            .finish()
    }
}

const BUILTINS: [&str; 5] = [
    "elliptic-sphere",
    "elliptic-flat",
    "heisenberg",
    "degenerate-2d",
    "grushin",
];

impl SdeSystem {
    /// Checks dimensions, that `origin` is on `M`, and that every field is
    /// tangent at `origin`.
    pub fn new(
        name: impl Into<String>,
        model: ManifoldModel,
        fields: Vec<VectorField>,
        drift: Option<VectorField>,
        origin: DVector<f64>,
    ) -> Result<Self> {
        let n = model.ambient_dim();
        if fields.is_empty() {
            return Err(Error::InvalidParameter(
                "an SDE system needs at least one field".into(),
            ));
        }
        model.check_on_manifold(&origin)?;
        let q = model.normal_projection(&origin);
        for x in fields.iter().chain(drift.iter()) {
            if x.dim() != n {
                return Err(Error::Dimension(format!(
                    "field `{}` lives in R^{} but M ⊂ R^{n}",
                    x.label(),
                    x.dim()
                )));
            }
            let v = x.eval(origin.as_slice());
            let normal = (&q * &v).norm();
            if normal > TANG_TOL.max(model.dq_tol()) * (1.0 + v.norm()) {
                return Err(Error::NotTangent(normal));
            }
        }
        Ok(Self {
            name: name.into(),
            model,
            fields,
            drift,
            origin,
            projection: false,
        })
    }

    /// `X_i(m) = P(m) e_i`, `i = 1..N`: Brownian motion on `M`.
    pub fn projection(model: &ManifoldModel, origin: DVector<f64>) -> Result<Self> {
        let fields = (0..model.ambient_dim())
            .map(|i| VectorField::projection_field(model, i))
            .collect();
        let mut sys = Self::new("projection", model.clone(), fields, None, origin)?;
        sys.projection = true;
        Ok(sys)
    }

    pub fn builtin_names() -> &'static [&'static str] {
        &BUILTINS
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let c = |v: &[f64]| VectorField::from_poly(format!("{v:?}"), PolyField::constant(v));
        let sys = match name {
            "elliptic-sphere" => {
                let s = ManifoldModel::sphere(3, 1.0)?;
                let o = s.default_origin();
                Self::projection(&s, o)?
            }
            "elliptic-flat" => {
                let f = ManifoldModel::flat(2)?;
                Self::new(
                    name,
                    f,
                    vec![c(&[1.0, 0.0]), c(&[0.0, 1.0])],
                    None,
                    DVector::zeros(2),
                )?
            }
            "heisenberg" => {
                let f = ManifoldModel::flat(3)?;
                let x2 = VectorField::from_poly(
                    "(0, 1, x1)",
                    PolyField::new(vec![Poly::zero(3), Poly::constant(3, 1.0), Poly::var(3, 0)]),
                );
                Self::new(
                    name,
                    f,
                    vec![c(&[1.0, 0.0, 0.0]), x2],
                    None,
                    DVector::zeros(3),
                )?
            }
            "degenerate-2d" => {
                let f = ManifoldModel::flat(2)?;
                Self::new(name, f, vec![c(&[1.0, 0.0])], None, DVector::zeros(2))?
            }
            "grushin" => {
                let f = ManifoldModel::flat(2)?;
                let x2 = VectorField::from_poly(
                    "(0, x1)",
                    PolyField::new(vec![Poly::zero(2), Poly::var(2, 0)]),
                );
                Self::new(name, f, vec![c(&[1.0, 0.0]), x2], None, DVector::zeros(2))?
            }
            other => return Err(Error::UnknownSystem(other.to_string())),
        };
        Ok(sys.named(name))
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_origin(mut self, origin: DVector<f64>) -> Result<Self> {
        self.model.check_on_manifold(&origin)?;
        self.origin = origin;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn model(&self) -> &ManifoldModel {
        &self.model
    }

    pub fn fields(&self) -> &[VectorField] {
        &self.fields
    }

    pub fn drift(&self) -> Option<&VectorField> {
        self.drift.as_ref()
    }

    pub fn origin(&self) -> &DVector<f64> {
        &self.origin
    }

    /// Number of driving Brownian motions.
    pub fn noise_dim(&self) -> usize {
        self.fields.len()
    }

    pub fn is_projection(&self) -> bool {
        self.projection
    }

    /// `X(m)` as an `N × n` matrix with columns `X_i(m)`.
    pub fn field_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.model.ambient_dim();
        let mut m = DMatrix::zeros(n, self.fields.len());
        for (i, f) in self.fields.iter().enumerate() {
            m.set_column(i, &f.eval(x));
        }
        m
    }

    /// Errors unless `X(m)` maps `R^n` onto `τ_mM`.
    pub fn check_surjective(&self, m: &DVector<f64>) -> Result<()> {
        let p = self.model.tangent_projection(m);
        let x = &p * self.field_matrix(m.as_slice());
        let sv = x.singular_values();
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        let d = self.model.manifold_dim();
        let top = s.first().copied().unwrap_or(0.0);
        let dth = s.get(d - 1).copied().unwrap_or(0.0);
        if s.len() < d || !(dth > RANK_TOL * top) {
            return Err(Error::NotSurjective(dth));
        }
        Ok(())
    }

    /// `X^#(m) w = X(m)ᵀ (X(m) X(m)ᵀ + Q(m))⁻¹ w`, an `n × N` matrix.
    pub fn sharp(&self, m: &DVector<f64>) -> Result<DMatrix<f64>> {
        let x = self.field_matrix(m.as_slice());
        let g = &x * x.transpose() + self.model.normal_projection(m);
        let inv = g.try_inverse().ok_or(Error::NotSurjective(0.0))?;
        Ok(x.transpose() * inv)
    }

    fn rhs(&self, x: &[f64], beta: &[f64], out: &mut [f64]) {
        if self.projection {
            self.model.apply_p(x, beta, out);
            return;
        }
        out.fill(0.0);
        for (f, b) in self.fields.iter().zip(beta) {
            if *b != 0.0 {
                for (o, v) in out.iter_mut().zip(f.eval(x).iter()) {
                    *o += b * v;
                }
            }
        }
        if let Some(x0) = &self.drift {
            for (o, v) in out.iter_mut().zip(x0.eval(x).iter()) {
                *o += v;
            }
        }
    }

    /// `(Σ_i β_i dX_i(x) + dX_0(x)) w`.
    fn rhs_directional(&self, x: &[f64], beta: &[f64], w: &[f64], out: &mut [f64]) {
        if self.projection {
            // d(P β)(w) = -dQ(w) β
            self.model.apply_dq(x, w, beta, out);
            out.iter_mut().for_each(|v| *v = -*v);
            return;
        }
        out.fill(0.0);
        for (f, b) in self.fields.iter().zip(beta) {
            if *b != 0.0 {
                for (o, v) in out.iter_mut().zip(f.directional(x, w).iter()) {
                    *o += b * v;
                }
            }
        }
        if let Some(x0) = &self.drift {
            for (o, v) in out.iter_mut().zip(x0.directional(x, w).iter()) {
                *o += v;
            }
        }
    }

    /// `Σ_i β_i dX_i(x) + dX_0(x)` as an `N × N` matrix.
    fn rhs_jacobian(&self, x: &[f64], beta: &[f64]) -> DMatrix<f64> {
        let n = self.model.ambient_dim();
        let mut a = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for c in 0..n {
            e[c] = 1.0;
            self.rhs_directional(x, beta, &e, &mut col);
            a.column_mut(c).copy_from_slice(&col);
            e[c] = 0.0;
        }
        a
    }

    fn check_driver(&self, driver: &DrivingPath) -> Result<()> {
        if driver.dim() != self.noise_dim() {
            return Err(Error::Dimension(format!(
                "system `{}` needs a {}-dimensional driver, got {}",
                self.name,
                self.noise_dim(),
                driver.dim()
            )));
        }
        Ok(())
    }
}

/// Wong-Zakai solution on the driver grid with the default number of substeps.
pub fn simulate_sde(sys: &SdeSystem, driver: &DrivingPath) -> Result<DiscretePath> {
    simulate_sde_with(sys, driver, WZ_SUBSTEPS)
}

pub fn simulate_sde_with(
    sys: &SdeSystem,
    driver: &DrivingPath,
    n_sub: usize,
) -> Result<DiscretePath> {
    sys.check_driver(driver)?;
    let n = sys.model.ambient_dim();
    let dt = driver.dt();
    let h = dt / n_sub as f64;
    let mut x = sys.origin.as_slice().to_vec();
    let mut beta = vec![0.0; driver.dim()];
    let mut rk = Rk4::new(n);
    let mut points = Vec::with_capacity(driver.steps() + 1);
    points.push(sys.origin.clone());
    for k in 0..driver.steps() {
        for (b, db) in beta.iter_mut().zip(driver.increment(k)) {
            *b = db / dt;
        }
        let mut f = |_t: f64, y: &[f64], dy: &mut [f64]| sys.rhs(y, &beta, dy);
        for s in 0..n_sub {
            rk.step(&mut f, s as f64 * h, h, &mut x);
        }
        sys.model.retract_in_place(&mut x)?;
        points.push(DVector::from_column_slice(&x));
    }
    Ok(DiscretePath::from_parts_unchecked(
        driver.times(),
        points,
        Interpolation::Chordal,
    ))
}

/// Points and the tangent derivative flow `J_k = ∂Σ_{t_k}/∂Σ_0 · v`.
pub(crate) struct TangentFlow {
    pub points: Vec<DVector<f64>>,
    pub tangents: Vec<DVector<f64>>,
}

/// Co-integrates `J' = (Σ β_i dX_i + dX_0) J` with the state and projects
/// `J` onto the tangent space after each retraction.
pub(crate) fn simulate_tangent_flow(
    sys: &SdeSystem,
    driver: &DrivingPath,
    v: &DVector<f64>,
    n_sub: usize,
) -> Result<TangentFlow> {
    sys.check_driver(driver)?;
    let n = sys.model.ambient_dim();
    let dt = driver.dt();
    let h = dt / n_sub as f64;
    let mut state = vec![0.0; 2 * n];
    state[..n].copy_from_slice(sys.origin.as_slice());
    state[n..].copy_from_slice(v.as_slice());
    let mut beta = vec![0.0; driver.dim()];
    let mut rk = Rk4::new(2 * n);
    let mut tmp = vec![0.0; n];
    let mut points = vec![sys.origin.clone()];
    let mut tangents = vec![v.clone()];
    for k in 0..driver.steps() {
        for (b, db) in beta.iter_mut().zip(driver.increment(k)) {
            *b = db / dt;
        }
        let mut f = |_t: f64, y: &[f64], dy: &mut [f64]| {
            let (x, j) = y.split_at(n);
            let (dx, dj) = dy.split_at_mut(n);
            sys.rhs(x, &beta, dx);
            sys.rhs_directional(x, &beta, j, dj);
        };
        for s in 0..n_sub {
            rk.step(&mut f, s as f64 * h, h, &mut state);
        }
        sys.model.retract_in_place(&mut state[..n])?;
        let (x, j) = state.split_at_mut(n);
        sys.model.apply_p(x, j, &mut tmp);
        j.copy_from_slice(&tmp);
        points.push(DVector::from_column_slice(x));
        tangents.push(DVector::from_column_slice(j));
    }
    Ok(TangentFlow { points, tangents })
}

/// Points, ambient Jacobian flow `J_k` and its inverse.
pub(crate) struct JacobianFlow {
    pub points: Vec<DVector<f64>>,
    pub jac: Vec<DMatrix<f64>>,
    pub jac_inv: Vec<DMatrix<f64>>,
}

/// Co-integrates `J' = A J` and `K' = -K A` (so `K = J⁻¹`) with the state,
/// `A = Σ β_i dX_i + dX_0`.
pub(crate) fn simulate_jacobian_flow(
    sys: &SdeSystem,
    driver: &DrivingPath,
    n_sub: usize,
) -> Result<JacobianFlow> {
    sys.check_driver(driver)?;
    let n = sys.model.ambient_dim();
    let nn = n * n;
    let dt = driver.dt();
    let h = dt / n_sub as f64;
    let mut state = vec![0.0; n + 2 * nn];
    state[..n].copy_from_slice(sys.origin.as_slice());
    for i in 0..n {
        state[n + i * n + i] = 1.0;
        state[n + nn + i * n + i] = 1.0;
    }
    let mut beta = vec![0.0; driver.dim()];
    let mut rk = Rk4::new(state.len());
    let eye = DMatrix::<f64>::identity(n, n);
    let mut out = JacobianFlow {
        points: vec![sys.origin.clone()],
        jac: vec![eye.clone()],
        jac_inv: vec![eye],
    };
    for k in 0..driver.steps() {
        for (b, db) in beta.iter_mut().zip(driver.increment(k)) {
            *b = db / dt;
        }
        let mut f = |_t: f64, y: &[f64], dy: &mut [f64]| {
            let x = &y[..n];
            sys.rhs(x, &beta, &mut dy[..n]);
            let a = sys.rhs_jacobian(x, &beta);
            let j = DMatrix::from_column_slice(n, n, &y[n..n + nn]);
            let kinv = DMatrix::from_column_slice(n, n, &y[n + nn..]);
            dy[n..n + nn].copy_from_slice((&a * j).as_slice());
            dy[n + nn..].copy_from_slice((-(kinv * a)).as_slice());
        };
        for s in 0..n_sub {
            rk.step(&mut f, s as f64 * h, h, &mut state);
        }
        sys.model.retract_in_place(&mut state[..n])?;
        out.points.push(DVector::from_column_slice(&state[..n]));
        out.jac
            .push(DMatrix::from_column_slice(n, n, &state[n..n + nn]));
        out.jac_inv
            .push(DMatrix::from_column_slice(n, n, &state[n + nn..]));
    }
    Ok(out)
}

/// What [`simulate_projection_bm`] co-integrates besides the path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BmOptions {
    pub n_sub: usize,
    /// Stochastic parallel transport and the anti-development.
    pub frames: bool,
    /// Derivative flow `z` and its inverse (requires frames).
    pub derivative_flow: bool,
    /// Ricci weight `W` and the pulled-back Ricci tensor (requires frames).
    pub ricci_weight: bool,
}

impl Default for BmOptions {
    fn default() -> Self {
        Self {
            n_sub: WZ_SUBSTEPS,
            frames: true,
            derivative_flow: true,
            ricci_weight: true,
        }
    }
}

impl BmOptions {
    pub fn points_only() -> Self {
        Self {
            frames: false,
            derivative_flow: false,
            ricci_weight: false,
            ..Self::default()
        }
    }

    pub fn frames_only() -> Self {
        Self {
            frames: true,
            derivative_flow: false,
            ricci_weight: false,
            ..Self::default()
        }
    }

    pub fn with_n_sub(mut self, n_sub: usize) -> Self {
        self.n_sub = n_sub;
        self
    }
}

/// A simulated Brownian path on `M` with its co-integrated processes. All
/// `d × d` quantities are expressed in the basis `E` of `τ_oM`.
#[derive(Clone, Debug)]
pub struct GeometricPath {
    n: usize,
    d: usize,
    dt: f64,
    steps: usize,
    basis: DMatrix<f64>,
    points: Vec<f64>,
    frames: Option<Vec<f64>>,
    antidev: Option<Vec<f64>>,
    deriv_flow: Option<Vec<f64>>,
    deriv_flow_inv: Option<Vec<f64>>,
    ricci_weight: Option<Vec<f64>>,
    ricci_parallel: Option<Vec<f64>>,
}

fn square(buf: &Option<Vec<f64>>, k: usize, d: usize) -> Option<DMatrix<f64>> {
    buf.as_ref()
        .map(|b| DMatrix::from_column_slice(d, d, &b[k * d * d..(k + 1) * d * d]))
}

impl GeometricPath {
    /// Number of grid intervals.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn time(&self, k: usize) -> f64 {
        self.dt * k as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    /// Orthonormal basis `E` of `τ_oM` (columns) identifying it with `R^d`.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn point_slice(&self, k: usize) -> &[f64] {
        &self.points[k * self.n..(k + 1) * self.n]
    }

    pub fn point(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.point_slice(k))
    }

    pub fn endpoint(&self) -> DVector<f64> {
        self.point(self.steps)
    }

    pub fn frame(&self, k: usize) -> Option<DMatrix<f64>> {
        let nn = self.n * self.n;
        self.frames
            .as_ref()
            .map(|f| DMatrix::from_column_slice(self.n, self.n, &f[k * nn..(k + 1) * nn]))
    }

    /// `b(t_k) ∈ R^d`.
    pub fn antidev(&self, k: usize) -> Option<DVector<f64>> {
        self.antidev
            .as_ref()
            .map(|b| DVector::from_column_slice(&b[k * self.d..(k + 1) * self.d]))
    }

    /// `Δb_k = b(t_{k+1}) - b(t_k)`.
    pub fn antidev_increment(&self, k: usize) -> Option<DVector<f64>> {
        Some(self.antidev(k + 1)? - self.antidev(k)?)
    }

    pub fn deriv_flow(&self, k: usize) -> Option<DMatrix<f64>> {
        square(&self.deriv_flow, k, self.d)
    }

    pub fn deriv_flow_inv(&self, k: usize) -> Option<DMatrix<f64>> {
        square(&self.deriv_flow_inv, k, self.d)
    }

    pub fn ricci_weight(&self, k: usize) -> Option<DMatrix<f64>> {
        square(&self.ricci_weight, k, self.d)
    }

    /// `u_kᵀ Ric(Σ_k) u_k` on `τ_oM`, evaluated at the left end of interval `k`.
    pub fn ricci_parallel(&self, k: usize) -> Option<DMatrix<f64>> {
        square(&self.ricci_parallel, k, self.d)
    }

    pub fn to_discrete_path(&self) -> DiscretePath {
        let points = (0..=self.steps).map(|k| self.point(k)).collect();
        DiscretePath::from_parts_unchecked(self.times(), points, Interpolation::Chordal)
    }

    pub fn max_constraint_violation(&self, model: &ManifoldModel) -> f64 {
        (0..=self.steps)
            .map(|k| model.constraint(self.point_slice(k)).amax())
            .fold(0.0, f64::max)
    }

    pub fn max_frame_drift(&self) -> f64 {
        (0..=self.steps)
            .filter_map(|k| self.frame(k))
            .map(|u| orthogonality_drift(&u))
            .fold(0.0, f64::max)
    }

    /// `max_k |z_k z_k⁻¹ - I|`.
    pub fn max_flow_defect(&self) -> f64 {
        let eye = DMatrix::<f64>::identity(self.d, self.d);
        (0..=self.steps)
            .filter_map(|k| Some(self.deriv_flow(k)? * self.deriv_flow_inv(k)?))
            .map(|p| (p - &eye).amax())
            .fold(0.0, f64::max)
    }
}

/// Brownian motion on `M` from `o` driven by an `N`-dimensional driver.
pub fn simulate_projection_bm(
    model: &ManifoldModel,
    o: &DVector<f64>,
    driver: &DrivingPath,
    opts: &BmOptions,
) -> Result<GeometricPath> {
    model.check_on_manifold(o)?;
    let n = model.ambient_dim();
    let d = model.manifold_dim();
    if driver.dim() != n {
        return Err(Error::Dimension(format!(
            "projection Brownian motion needs an {n}-dimensional driver, got {}",
            driver.dim()
        )));
    }
    if opts.n_sub == 0 {
        return Err(Error::InvalidParameter("n_sub must be positive".into()));
    }
    let frames = opts.frames || opts.derivative_flow || opts.ricci_weight;
    let steps = driver.steps();
    let dt = driver.dt();
    let h = dt / opts.n_sub as f64;
    let nn = n * n;
    let dd = d * d;
    let basis = model.tangent_basis(o);
    let const_ric = model.constant_ricci();

    let width = if frames { n + nn } else { n };
    let mut state = vec![0.0; width];
    state[..n].copy_from_slice(o.as_slice());
    if frames {
        for i in 0..n {
            state[n + i * n + i] = 1.0;
        }
    }
    let eye_d = DMatrix::<f64>::identity(d, d);
    let mut out = GeometricPath {
        n,
        d,
        dt,
        steps,
        basis: basis.clone(),
        points: Vec::with_capacity((steps + 1) * n),
        frames: frames.then(|| Vec::with_capacity((steps + 1) * nn)),
        antidev: frames.then(|| Vec::with_capacity((steps + 1) * d)),
        deriv_flow: opts
            .derivative_flow
            .then(|| Vec::with_capacity((steps + 1) * dd)),
        deriv_flow_inv: opts
            .derivative_flow
            .then(|| Vec::with_capacity((steps + 1) * dd)),
        ricci_weight: opts
            .ricci_weight
            .then(|| Vec::with_capacity((steps + 1) * dd)),
        ricci_parallel: (opts.ricci_weight || opts.derivative_flow)
            .then(|| Vec::with_capacity(steps * dd)),
    };
    out.points.extend_from_slice(o.as_slice());
    if let Some(f) = &mut out.frames {
        f.extend_from_slice(&state[n..]);
    }
    let mut b = vec![0.0; d];
    if let Some(a) = &mut out.antidev {
        a.extend_from_slice(&b);
    }
    let mut z = eye_d.clone();
    let mut w = eye_d.clone();
    if let Some(buf) = &mut out.deriv_flow {
        buf.extend_from_slice(z.as_slice());
    }
    if let Some(buf) = &mut out.deriv_flow_inv {
        buf.extend_from_slice(z.as_slice());
    }
    if let Some(buf) = &mut out.ricci_weight {
        buf.extend_from_slice(w.as_slice());
    }

    let mut rk = Rk4::new(width);
    let mut beta = vec![0.0; n];
    let mut ucols = vec![0.0; n * d];
    let mut tmp = vec![0.0; n];
    let mut tmp2 = vec![0.0; n];
    let mut wv = vec![0.0; n];
    let mut scratch = Vec::new();
    let q0 = model.normal_projection(o);
    let mut uq = vec![0.0; nn];
    for k in 0..steps {
        let db = driver.increment(k);
        if frames {
            let (x, u) = state.split_at(n);
            // U = u E
            for a in 0..d {
                for r in 0..n {
                    ucols[a * n + r] = (0..n).map(|c| u[c * n + r] * basis[(c, a)]).sum();
                }
            }
            for a in 0..d {
                b[a] += dot(&ucols[a * n..(a + 1) * n], db);
            }
            let ric = if opts.ricci_weight || opts.derivative_flow {
                let r = match const_ric {
                    Some(c) => &eye_d * c,
                    None => {
                        let um = DMatrix::from_column_slice(n, d, &ucols);
                        um.transpose() * ricci_matrix(model, &DVector::from_column_slice(x)) * um
                    }
                };
                if let Some(buf) = &mut out.ricci_parallel {
                    buf.extend_from_slice(r.as_slice());
                }
                Some(r)
            } else {
                None
            };
            if opts.ricci_weight {
                let r = ric.as_ref().unwrap();
                w = match const_ric {
                    Some(c) => w * (-0.5 * c * dt).exp(),
                    None => &w * sym_expm(&(r * (-0.5 * dt))),
                };
            }
            if opts.derivative_flow {
                let r = ric.as_ref().unwrap();
                let mut next = &z - r * &z * (0.5 * dt);
                for j in 0..d {
                    for (i, wi) in wv.iter_mut().enumerate() {
                        *wi = (0..d).map(|a| ucols[a * n + i] * z[(a, j)]).sum();
                    }
                    model.apply_dq(x, &wv, db, &mut tmp);
                    model.apply_p(x, &tmp, &mut tmp2);
                    for a in 0..d {
                        next[(a, j)] -= dot(&ucols[a * n..(a + 1) * n], &tmp2);
                    }
                }
                z = next;
            }
        }

        for (bi, di) in beta.iter_mut().zip(db) {
            *bi = di / dt;
        }
        let mut f = |_t: f64, y: &[f64], dy: &mut [f64]| {
            let (x, rest) = y.split_at(n);
            let (dx, du) = dy.split_at_mut(n);
            model.apply_p(x, &beta, dx);
            if frames {
                model.apply_gamma(x, dx, rest, n, du);
                du.iter_mut().for_each(|v| *v = -*v);
            }
        };
        for s in 0..opts.n_sub {
            rk.step(&mut f, s as f64 * h, h, &mut state);
        }
        model.retract_in_place(&mut state[..n])?;
        if frames {
            // u ← P(Σ) u P(o) + Q(Σ) u Q(o), then one Björck step
            let (x, u) = state.split_at_mut(n);
            for c in 0..n {
                for r in 0..n {
                    uq[c * n + r] = (0..n).map(|j| u[j * n + r] * q0[(j, c)]).sum();
                }
            }
            for c in 0..n {
                let col = c * n..(c + 1) * n;
                for r in 0..n {
                    tmp[r] = u[c * n + r] - uq[c * n + r];
                }
                model.apply_p(x, &tmp, &mut tmp2);
                model.apply_p(x, &uq[col.clone()], &mut wv);
                for r in 0..n {
                    u[c * n + r] = tmp2[r] + uq[c * n + r] - wv[r];
                }
            }
            let drift = bjorck_step(&mut state[n..], n, &mut scratch);
            if !(drift <= FRAME_FAIL) {
                return Err(Error::FrameDrift(drift));
            }
        }

        out.points.extend_from_slice(&state[..n]);
        if let Some(f) = &mut out.frames {
            f.extend_from_slice(&state[n..]);
        }
        if let Some(a) = &mut out.antidev {
            a.extend_from_slice(&b);
        }
        if let Some(buf) = &mut out.deriv_flow {
            buf.extend_from_slice(z.as_slice());
        }
        if let Some(buf) = &mut out.deriv_flow_inv {
            let inv = z
                .clone()
                .try_inverse()
                .unwrap_or_else(|| DMatrix::from_element(d, d, f64::NAN));
            buf.extend_from_slice(inv.as_slice());
        }
        if let Some(buf) = &mut out.ricci_weight {
            buf.extend_from_slice(w.as_slice());
        }
    }
    Ok(out)
}

/// Endpoint `Σ_T` of projection Brownian motion without any side processes.
pub(crate) fn projection_bm_endpoint(
    model: &ManifoldModel,
    o: &[f64],
    driver: &DrivingPath,
    n_sub: usize,
) -> Result<DVector<f64>> {
    let n = model.ambient_dim();
    let dt = driver.dt();
    let h = dt / n_sub as f64;
    let mut x = o.to_vec();
    let mut beta = vec![0.0; n];
    let mut rk = Rk4::new(n);
    for k in 0..driver.steps() {
        for (bi, di) in beta.iter_mut().zip(driver.increment(k)) {
            *bi = di / dt;
        }
        let mut f = |_t: f64, y: &[f64], dy: &mut [f64]| model.apply_p(y, &beta, dy);
        for s in 0..n_sub {
            rk.step(&mut f, s as f64 * h, h, &mut x);
        }
        model.retract_in_place(&mut x)?;
    }
    Ok(DVector::from_vec(x))
}

/// `Σ_k Δf(Σ)_k Δg(Σ)_k - Σ_k ⟨grad f, grad g⟩(Σ_k) Δ`.
pub fn quadratic_variation_check(
    model: &ManifoldModel,
    path: &GeometricPath,
    f: &ScalarField,
    g: &ScalarField,
) -> f64 {
    let mut bracket = 0.0;
    let mut clock = 0.0;
    for k in 0..path.steps() {
        let x0 = path.point_slice(k);
        let x1 = path.point_slice(k + 1);
        bracket += (f.eval(x1) - f.eval(x0)) * (g.eval(x1) - g.eval(x0));
        let m = DVector::from_column_slice(x0);
        let p = model.tangent_projection(&m);
        clock += (&p * f.ambient_gradient(x0)).dot(&(&p * g.ambient_gradient(x0))) * path.dt();
    }
    bracket - clock
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::sample_driver;
    use crate::linalg::{loglog_slope, max_abs_diff};
    use crate::tolerances::TOL_F;

    fn north(n: usize) -> DVector<f64> {
        let mut o = DVector::zeros(n);
        o[n - 1] = 1.0;
        o
    }

    #[test]
    fn flat_projection_bm_is_translated_driver() {
        let f = ManifoldModel::flat(3).unwrap();
        let o = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let drv = sample_driver(3, 1.0, 0.01, 1, 0, None).unwrap();
        let gp = simulate_projection_bm(&f, &o, &drv, &BmOptions::default()).unwrap();
        for k in [0, 37, 100] {
            assert!((gp.point(k) - (&o + drv.value(k))).amax() < 1e-12);
            assert!((gp.antidev(k).unwrap() - drv.value(k)).amax() < 1e-12);
            assert_eq!(gp.frame(k).unwrap(), DMatrix::identity(3, 3));
            assert_eq!(gp.deriv_flow(k).unwrap(), DMatrix::identity(3, 3));
            assert_eq!(gp.ricci_weight(k).unwrap(), DMatrix::identity(3, 3));
        }
    }

    #[test]
    fn sphere_path_invariants() {
        let s = ManifoldModel::sphere(3, 1.0).unwrap();
        let drv = sample_driver(3, 1.0, 1e-3, 2, 0, None).unwrap();
        let gp = simulate_projection_bm(&s, &north(3), &drv, &BmOptions::default()).unwrap();
        assert!(gp.max_constraint_violation(&s) <= TOL_F);
        assert!(gp.max_frame_drift() < 1e-8, "{}", gp.max_frame_drift());
        assert!(gp.max_flow_defect() < crate::tolerances::FLOW_TOL);
        let p0 = s.tangent_projection(&north(3));
        for k in [10, 500, 1000] {
            let u = gp.frame(k).unwrap();
            let q = s.normal_projection(&gp.point(k));
            let defect = (q * u * &p0).norm();
            assert!(defect < 1e-8, "{k}: {defect}");
            let w = gp.ricci_weight(k).unwrap();
            assert!(
                max_abs_diff(&w, &(DMatrix::identity(2, 2) * (-0.5 * gp.time(k)).exp())) < 1e-12
            );
        }
    }

    #[test]
    fn ricci_weight_on_sphere4() {
        let s = ManifoldModel::sphere(4, 2.0).unwrap();
        let drv = sample_driver(4, 0.5, 1e-2, 3, 0, None).unwrap();
        let gp =
            simulate_projection_bm(&s, &(north(4) * 2.0), &drv, &BmOptions::default()).unwrap();
        let c = 2.0 / 4.0;
        let w = gp.ricci_weight(gp.steps()).unwrap();
        assert!(max_abs_diff(&w, &(DMatrix::identity(3, 3) * (-0.5 * c * 0.5f64).exp())) < 1e-12);
    }

    #[test]
    fn general_ricci_path_matches_constant_path_on_sphere() {
        // feed the general code path with a sphere by comparing Ric_// with U^T Ric U
        let s = ManifoldModel::sphere(3, 1.0).unwrap();
        let drv = sample_driver(3, 0.2, 1e-2, 4, 0, None).unwrap();
        let gp = simulate_projection_bm(&s, &north(3), &drv, &BmOptions::default()).unwrap();
        for k in [0, 7, 19] {
            let u = gp.frame(k).unwrap();
            let um = &u * gp.basis();
            let r = um.transpose() * ricci_matrix(&s, &gp.point(k)) * &um;
            assert!(max_abs_diff(&r, &gp.ricci_parallel(k).unwrap()) < 1e-8);
        }
    }

    #[test]
    fn sl2_path_stays_on_group() {
        let g = ManifoldModel::sl2();
        let drv = sample_driver(4, 0.05, 1e-2, 5, 0, None).unwrap();
        let gp = simulate_projection_bm(&g, &g.default_origin(), &drv, &BmOptions::frames_only())
            .unwrap();
        assert!(gp.max_constraint_violation(&g) <= TOL_F);
        assert!(gp.max_frame_drift() < 1e-6);
    }

    #[test]
    fn stratonovich_linear_sde_is_exponential() {
        let f = ManifoldModel::flat(1).unwrap();
        let x1 = VectorField::from_poly("x", PolyField::new(vec![Poly::var(1, 0)]));
        let sys = SdeSystem::new("lin", f, vec![x1], None, DVector::from_vec(vec![1.0])).unwrap();
        let drv = sample_driver(1, 1.0, 1e-2, 6, 0, None).unwrap();
        let path = simulate_sde(&sys, &drv).unwrap();
        for k in [1, 50, 100] {
            let want = drv.value(k)[0].exp();
            assert!((path.points()[k][0] - want).abs() < 1e-6 * want.max(1.0));
        }
        // additive noise reproduces the driver
        let c = VectorField::from_poly("1", PolyField::constant(&[1.0]));
        let sys = SdeSystem::new(
            "bm",
            ManifoldModel::flat(1).unwrap(),
            vec![c],
            None,
            DVector::from_vec(vec![0.0]),
        )
        .unwrap();
        let path = simulate_sde(&sys, &drv).unwrap();
        assert!((path.points()[100][0] - drv.value(100)[0]).abs() < 1e-12);
    }

    #[test]
    fn generic_fields_match_projection_engine() {
        let s = ManifoldModel::sphere(3, 1.0).unwrap();
        let fields = (0..3)
            .map(|i| VectorField::projection_field(&s, i))
            .collect();
        let generic = SdeSystem::new("generic", s.clone(), fields, None, north(3)).unwrap();
        let drv = sample_driver(3, 0.5, 1e-3, 7, 0, None).unwrap();
        let a = simulate_sde(&generic, &drv).unwrap();
        let b = simulate_projection_bm(&s, &north(3), &drv, &BmOptions::points_only()).unwrap();
        assert!((a.points().last().unwrap() - b.endpoint()).norm() < 1e-10);
        let c = projection_bm_endpoint(&s, north(3).as_slice(), &drv, WZ_SUBSTEPS).unwrap();
        assert_eq!(c, b.endpoint());
    }

    #[test]
    fn mean_of_x3_decays() {
        let s = ManifoldModel::sphere(3, 1.0).unwrap();
        let paths = 2000;
        let t = 0.5;
        let xs: Vec<f64> = (0..paths)
            .map(|i| {
                let drv = sample_driver(3, t, 1e-2, 11, i, None).unwrap();
                projection_bm_endpoint(&s, north(3).as_slice(), &drv, 4).unwrap()[2]
            })
            .collect();
        let m = xs.iter().sum::<f64>() / paths as f64;
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (paths as f64 - 1.0)).sqrt();
        assert!(
            (m - (-t).exp()).abs() < 3.0 * sd / (paths as f64).sqrt() + 0.01,
            "{m}"
        );
    }

    #[test]
    fn quadratic_variation() {
        let s = ManifoldModel::sphere(3, 1.0).unwrap();
        let f = ScalarField::from_poly(Poly::var(3, 2));
        let dt = 1e-3;
        let drv = sample_driver(3, 1.0, dt, 12, 0, None).unwrap();
        let gp = simulate_projection_bm(&s, &north(3), &drv, &BmOptions::points_only()).unwrap();
        let r = quadratic_variation_check(&s, &gp, &f, &f);
        // fluctuation of Σ (Δf)² around its compensator is O(sqrt(Δ))
        assert!(r.abs() < 5.0 * dt.sqrt(), "{r}");

        let flat = ManifoldModel::flat(2).unwrap();
        let drv = sample_driver(2, 1.0, dt, 13, 0, None).unwrap();
        let gp = simulate_projection_bm(&flat, &DVector::zeros(2), &drv, &BmOptions::points_only())
            .unwrap();
        let x = ScalarField::from_poly(Poly::var(2, 0));
        let y = ScalarField::from_poly(Poly::var(2, 1));
        assert!(quadratic_variation_check(&flat, &gp, &x, &y).abs() < 5.0 * dt.sqrt());
        assert!(quadratic_variation_check(&flat, &gp, &x, &x).abs() < 5.0 * dt.sqrt());
    }

    #[test]
    fn wong_zakai_strong_order() {
        let s = ManifoldModel::sphere(3, 1.0).unwrap();
        let fine_exp = 12;
        let t = 1.0;
        let coarse = [6usize, 7, 8, 9, 10];
        let paths = 40;
        let mut errs = vec![0.0; coarse.len()];
        for i in 0..paths {
            let drv = sample_driver(3, t, t / (1u64 << fine_exp) as f64, 21, i, None).unwrap();
            let reference = projection_bm_endpoint(&s, north(3).as_slice(), &drv, 4).unwrap();
            for (e, &c) in errs.iter_mut().zip(&coarse) {
                let cd = drv.coarsen(1 << (fine_exp - c)).unwrap();
                let end = projection_bm_endpoint(&s, north(3).as_slice(), &cd, 4).unwrap();
                *e += (end - &reference).norm_squared();
            }
        }
        let rms: Vec<f64> = errs.iter().map(|e| (e / paths as f64).sqrt()).collect();
        let hs: Vec<f64> = coarse.iter().map(|&c| t / (1u64 << c) as f64).collect();
        let slope = loglog_slope(&hs, &rms);
        assert!(slope >= 0.4, "{slope} {rms:?}");
    }

    #[test]
    fn markov_consistency_smoke() {
        // E[x3(Σ_{t+s}) | Σ_t = x] = e^{-s} x3 for projection BM on the unit sphere
        let s = ManifoldModel::sphere(3, 1.0).unwrap();
        let x = DVector::from_vec(vec![0.6, 0.0, 0.8]);
        let paths = 1500;
        let mean: f64 = (0..paths)
            .map(|i| {
                let drv = sample_driver(3, 0.3, 1e-2, 31, i, None).unwrap();
                projection_bm_endpoint(&s, x.as_slice(), &drv, 4).unwrap()[2]
            })
            .sum::<f64>()
            / paths as f64;
        assert!((mean - 0.8 * (-0.3f64).exp()).abs() < 0.04);
    }

    #[test]
    fn derivative_flow_matches_bumped_paths_on_average() {
        // E[z_t] = e^{-t/2} I on the unit 2-sphere (Ric = 1)
        let s = ManifoldModel::sphere(3, 1.0).unwrap();
        let paths = 400;
        let mut acc = DMatrix::zeros(2, 2);
        for i in 0..paths {
            let drv = sample_driver(3, 0.5, 1e-2, 41, i, None).unwrap();
            let gp = simulate_projection_bm(&s, &north(3), &drv, &BmOptions::default()).unwrap();
            acc += gp.deriv_flow(gp.steps()).unwrap();
        }
        acc /= paths as f64;
        assert!(
            max_abs_diff(&acc, &(DMatrix::identity(2, 2) * (-0.25f64).exp())) < 0.05,
            "{acc}"
        );
    }

    #[test]
    fn builtin_systems() {
        for name in SdeSystem::builtin_names() {
            let sys = SdeSystem::builtin(name).unwrap();
            assert_eq!(sys.name(), *name);
        }
        assert!(matches!(
            SdeSystem::builtin("nope"),
            Err(Error::UnknownSystem(_))
        ));
        assert!(SdeSystem::builtin("heisenberg")
            .unwrap()
            .check_surjective(&DVector::zeros(3))
            .is_err());
        let s = SdeSystem::builtin("elliptic-sphere").unwrap();
        s.check_surjective(s.origin()).unwrap();
        let sharp = s.sharp(s.origin()).unwrap();
        assert!(max_abs_diff(&sharp, &s.model().tangent_projection(s.origin())) < 1e-12);
    }

    #[test]
    fn tangent_flow_matches_finite_difference() {
        let sys = SdeSystem::builtin("grushin")
            .unwrap()
            .with_origin(DVector::from_vec(vec![0.3, -0.2]))
            .unwrap();
        let drv = sample_driver(2, 0.5, 1e-2, 51, 0, None).unwrap();
        let v = DVector::from_vec(vec![0.6, 0.8]);
        let tf = simulate_tangent_flow(&sys, &drv, &v, 4).unwrap();
        let eps = 1e-6;
        let bump = |s: f64| {
            let o = sys.origin() + &v * s;
            let sys2 = sys.clone().with_origin(o).unwrap();
            simulate_sde(&sys2, &drv)
                .unwrap()
                .points()
                .last()
                .unwrap()
                .clone()
        };
        let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
        assert!((fd - tf.tangents.last().unwrap()).norm() < 1e-6);
        let jf = simulate_jacobian_flow(&sys, &drv, 4).unwrap();
        let j = jf.jac.last().unwrap();
        assert!((j * &v - tf.tangents.last().unwrap()).norm() < 1e-9);
        assert!(max_abs_diff(&(j * jf.jac_inv.last().unwrap()), &DMatrix::identity(2, 2)) < 1e-9);
    }

    #[test]
    fn driver_dimension_is_checked() {
        let s = ManifoldModel::sphere(3, 1.0).unwrap();
        let drv = sample_driver(2, 0.1, 1e-2, 0, 0, None).unwrap();
        assert!(matches!(
            simulate_projection_bm(&s, &north(3), &drv, &BmOptions::default()),
            Err(Error::Dimension(_))
        ));
    }
}
