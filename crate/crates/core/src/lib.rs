//! Extrinsic Riemannian geometry and stochastic analysis on manifolds
//! embedded in Euclidean space.
//!
//! Every geometric quantity here is computed from the orthogonal projections
//! `P(m)` and `Q(m) = I - P(m)` onto the tangent and normal spaces of a
//! level-set manifold `M = {F = 0} ⊂ R^N`, together with the directional
//! derivative `dQ`. On top of that sit parallel transport, Cartan
//! development, Wong-Zakai simulation of Stratonovich SDEs on `M`, Monte
//! Carlo heat-kernel gradient estimators and Malliavin covariance
//! diagnostics.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod development;
pub mod driver;
mod error;
pub mod estimators;
pub mod geometry;
pub mod linalg;
pub mod malliavin;
pub mod manifold;
mod ode;
pub mod poly;
pub mod sde;
pub mod stats;
pub mod tolerances;
pub mod transport;

pub use development::{antidevelop, develop, integrate_flow, EuclideanPath, TimeVectorField};
pub use driver::{sample_driver, stream_seed, DrivingPath};
pub use error::{Error, Result};
pub use estimators::{
    bismut_gradient, bismut_gradient_multi, clark_ocone_check, elworthy_li_gradient,
    heat_expectation, heat_gradient_fd, ibp_residual, CameronMartinPath, CylinderFunction,
    IbpReport, IbpVariant,
};
pub use geometry::{ScalarField, VectorField};
pub use malliavin::{
    bracket_table, hormander_rank, nondegeneracy_report, reduced_covariance, BracketTable,
    HormanderReport, MalliavinSample, NondegeneracyReport,
};
pub use manifold::{ManifoldKind, ManifoldModel, TangentVector};
pub use poly::{Poly, PolyField};
pub use sde::{
    quadratic_variation_check, simulate_projection_bm, simulate_sde, BmOptions, GeometricPath,
    SdeSystem,
};
pub use stats::{McEstimate, McParams, Reduction};
pub use transport::{
    holonomy, inverse_transport, parallel_transport, DiscretePath, FramePath, Interpolation,
};

pub use nalgebra::{DMatrix, DVector};
