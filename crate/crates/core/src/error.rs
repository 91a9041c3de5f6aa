use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unknown manifold spec `{0}`")]
    UnknownManifold(String),
    #[error("unknown system `{0}`")]
    UnknownSystem(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("point is off the manifold: |F| = {residual:e} exceeds {tol:e}")]
    OffManifold { residual: f64, tol: f64 },
    #[error("constraint jacobian is rank deficient (smallest singular value {0:e})")]
    RankDeficient(f64),
    #[error("point is outside the retraction basin: |F| = {0:e}")]
    OutsideBasin(f64),
    #[error("retraction did not converge in {iters} iterations (|F| = {residual:e})")]
    RetractionFailed { iters: usize, residual: f64 },
    #[error("tangent vectors live at different base points")]
    BasePointMismatch,
    #[error("vector is not tangent: |Q v| = {0:e}")]
    NotTangent(f64),
    #[error("frame orthogonality drift {0:e} exceeds the failure limit")]
    FrameDrift(f64),
    #[error("loop is not closed (gap {0:e})")]
    OpenLoop(f64),
    #[error("holonomy angle needs a 2-dimensional manifold, got d = {0}")]
    NotSurface(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("field `{0}` is not polynomial")]
    NotPolynomial(String),
    #[error("X(m) is not surjective onto the tangent space (smallest gain {0:e})")]
    NotSurjective(f64),
    #[error("need 0 < t0 <= t, got t0 = {t0}, t = {t}")]
    BadHorizon { t0: f64, t: f64 },
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
