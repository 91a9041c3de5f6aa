//! Numerical tolerances shared by the library and its tests.
//!
//! Values scaled by the manifold's characteristic length are multiplied by
//! [`crate::ManifoldModel::scale`] at the point of use.

/// On-manifold test `|F(m)| <= TOL_F * scale`.
pub const TOL_F: f64 = 1e-10;
/// Projection identities when `Q` and `dQ` are analytic.
pub const PROJ_TOL_ANALYTIC: f64 = 1e-9;
/// Projection identities involving a finite-difference `dQ`.
pub const PROJ_TOL_FD: f64 = 1e-5;
/// Tangency test `|Q v| <= TANG_TOL (1 + |v|)`.
pub const TANG_TOL: f64 = 1e-8;
/// Central-difference step for `dQ`, relative to scale.
pub const DQ_FD_STEP: f64 = 6e-6;
/// Smallest singular value of `F'(m)` accepted as full rank.
pub const JACOBIAN_RANK_TOL: f64 = 1e-8;
/// Gauss-Newton retraction iteration cap.
pub const MAX_RETRACT_ITERS: usize = 20;
/// Largest `|F(x)| / scale` the Gauss-Newton retraction accepts.
pub const RETRACT_BASIN: f64 = 0.5;

/// Curvature identities with analytic / finite-difference `dQ`.
pub const CURV_TOL_ANALYTIC: f64 = 1e-8;
pub const CURV_TOL_FD: f64 = 1e-4;
/// Bochner-Weitzenböck residual.
pub const BOCHNER_TOL: f64 = 1e-3;
/// Laplacian basis independence and Hessian-trace agreement.
pub const LAP_TOL: f64 = 1e-8;
/// Jacobi identity for polynomial fields.
pub const BRACKET_TOL: f64 = 1e-10;

/// Frame orthogonality for steps `<= 1e-3` on unit-scale manifolds.
pub const FRAME_TOL: f64 = 1e-8;
/// Orthogonality drift that aborts a transport.
pub const FRAME_FAIL: f64 = 1e-4;
/// Polar re-orthogonalization period.
pub const REORTH_EVERY: usize = 16;

/// Development accuracy at step `1e-3`.
pub const DEV_TOL: f64 = 1e-6;
pub const ROUNDTRIP_TOL: f64 = 1e-5;
pub const FLOW_TOL: f64 = 1e-8;

/// Wong-Zakai RK4 substeps per Brownian increment.
pub const WZ_SUBSTEPS: usize = 4;

/// Relative singular-value cut for Hörmander ranks.
pub const RANK_TOL: f64 = 1e-8;
/// Symmetry / positivity slack for reduced covariances.
pub const COV_TOL: f64 = 1e-10;
/// Paths whose flow condition number exceeds this are discarded.
pub const COND_MAX: f64 = 1e12;
