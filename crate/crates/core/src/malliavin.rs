//! Hörmander bracket tables, bracket ranks, and the reduced Malliavin
//! covariance `C̄_t = ∫₀ᵗ Z_τ⁻¹ X(Σ_τ) X(Σ_τ)ᵀ Z_τ⁻ᵀ dτ` along simulated paths.
//!
//! Covariances use the ambient Euclidean metric, pulled back to `τ_oM`
//! through the basis `E` at the origin.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::driver::{grid_steps, sample_driver, DrivingPath};
use crate::error::{Error, Result};
use crate::manifold::ManifoldModel;
use crate::poly::PolyField;
use crate::sde::{simulate_jacobian_flow, SdeSystem};
use crate::stats::McParams;
use crate::tolerances::{COND_MAX, COV_TOL, RANK_TOL};

/// Largest bracket level accepted by [`bracket_table`].
pub const MAX_BRACKET_LEVEL: usize = 4;

/// One iterated bracket and the expression that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct BracketEntry {
    pub field: PolyField,
    pub provenance: String,
}

/// `K₁ = {X₁, …, X_n}`, `K_{j+1} = {[X_i, K] : K ∈ K_j} ∪ K_j`.
#[derive(Clone, Debug)]
pub struct BracketTable {
    model: ManifoldModel,
    generations: Vec<Vec<BracketEntry>>,
}

impl BracketTable {
    pub fn level(&self) -> usize {
        self.generations.len()
    }

    pub fn model(&self) -> &ManifoldModel {
        &self.model
    }

    /// `K_j` for `j = 1..=level`.
    pub fn generation(&self, j: usize) -> &[BracketEntry] {
        &self.generations[j - 1]
    }

    /// Entries of `K_j` that are not identically zero.
    pub fn nonzero(&self, j: usize) -> Vec<&BracketEntry> {
        self.generation(j)
            .iter()
            .filter(|e| !e.field.is_zero())
            .collect()
    }
}

/// All iterated brackets of the diffusion fields up to `level`, computed
/// symbolically. Duplicates are kept.
pub fn bracket_table(sys: &SdeSystem, level: usize) -> Result<BracketTable> {
    if level == 0 || level > MAX_BRACKET_LEVEL {
        return Err(Error::InvalidParameter(format!(
            "bracket level must be in 1..={MAX_BRACKET_LEVEL}, got {level}"
        )));
    }
    let base: Vec<BracketEntry> = sys
        .fields()
        .iter()
        .enumerate()
        .map(|(i, x)| {
            x.poly()
                .map(|p| BracketEntry {
                    field: p.clone(),
                    provenance: format!("X{}", i + 1),
                })
                .ok_or_else(|| Error::NotPolynomial(x.label().to_string()))
        })
        .collect::<Result<_>>()?;
    let mut generations = vec![base.clone()];
    for _ in 1..level {
        let prev = generations.last().unwrap();
        let mut next = prev.clone();
        for (i, x) in base.iter().enumerate() {
            for k in prev {
                next.push(BracketEntry {
                    field: x.field.bracket(&k.field),
                    provenance: format!("[X{}, {}]", i + 1, k.provenance),
                });
            }
        }
        generations.push(next);
    }
    Ok(BracketTable {
        model: sys.model().clone(),
        generations,
    })
}

/// Tangent rank of each bracket generation at a point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HormanderReport {
    pub ranks: Vec<usize>,
    pub dim: usize,
    /// First level whose span is the whole tangent space.
    pub level_achieved: Option<usize>,
}

impl HormanderReport {
    pub fn satisfied(&self) -> bool {
        self.level_achieved.is_some()
    }
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.ncols() == 0 {
        return 0;
    }
    let sv = m.singular_values();
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * top).count()
}

pub fn hormander_rank(table: &BracketTable, m: &DVector<f64>) -> HormanderReport {
    let model = &table.model;
    let p = model.tangent_projection(m);
    let d = model.manifold_dim();
    let ranks: Vec<usize> = table
        .generations
        .iter()
        .map(|gen| {
            let cols: Vec<DVector<f64>> = gen
                .iter()
                .map(|e| &p * e.field.eval(m.as_slice()))
                .collect();
            numerical_rank(&DMatrix::from_columns(&cols))
        })
        .collect();
    let level_achieved = ranks.iter().position(|&r| r == d).map(|j| j + 1);
    HormanderReport {
        ranks,
        dim: d,
        level_achieved,
    }
}

/// Reduced covariance of one path.
#[derive(Clone, Debug, PartialEq)]
pub struct MalliavinSample {
    pub cov: DMatrix<f64>,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub det: f64,
    /// `max_k ‖Z_k‖ ‖Z_k⁻¹‖` along the path.
    pub condition: f64,
}

impl MalliavinSample {
    fn from_cov(cov: DMatrix<f64>, condition: f64) -> Self {
        let sym = (&cov + cov.transpose()) * 0.5;
        let mut eigenvalues: Vec<f64> = SymmetricEigen::new(sym.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        eigenvalues.sort_by(|a, b| a.total_cmp(b));
        let det = sym.determinant();
        Self {
            cov: sym,
            eigenvalues,
            det,
            condition,
        }
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// The flow was too ill-conditioned for the covariance to be trusted.
    pub fn discarded(&self) -> bool {
        !(self.condition <= COND_MAX)
    }

    pub fn check_invariants(&self) -> bool {
        let scale = 1.0 + self.cov.amax();
        (&self.cov - self.cov.transpose()).amax() <= COV_TOL * scale
            && self.lambda_min() >= -COV_TOL * scale
    }
}

/// `C̄_{t_k}` for every grid node `k` of the driver (trapezoid rule), along
/// with the flow condition number up to `t_k`.
pub fn reduced_covariance_series(
    sys: &SdeSystem,
    driver: &DrivingPath,
    n_sub: usize,
) -> Result<Vec<(DMatrix<f64>, f64)>> {
    let flow = simulate_jacobian_flow(sys, driver, n_sub)?;
    let e = sys.model().tangent_basis(sys.origin());
    let d = e.ncols();
    let integrand: Vec<DMatrix<f64>> = flow
        .points
        .iter()
        .zip(&flow.jac_inv)
        .map(|(x, k)| {
            let kx = e.transpose() * k * sys.field_matrix(x.as_slice());
            &kx * kx.transpose()
        })
        .collect();
    let dt = driver.dt();
    let mut acc = DMatrix::zeros(d, d);
    let mut cond: f64 = 1.0;
    let mut out = vec![(acc.clone() * dt, cond)];
    for k in 0..driver.steps() {
        acc += (&integrand[k] + &integrand[k + 1]) * 0.5;
        let c =
            flow.jac[k + 1].norm() * flow.jac_inv[k + 1].norm() / flow.jac[k + 1].nrows() as f64;
        cond = cond.max(if c.is_finite() { c } else { f64::INFINITY });
        out.push((&acc * dt, cond));
    }
    Ok(out)
}

/// `C̄_t` at the driver horizon.
pub fn reduced_covariance(
    sys: &SdeSystem,
    driver: &DrivingPath,
    n_sub: usize,
) -> Result<MalliavinSample> {
    let (cov, cond) = reduced_covariance_series(sys, driver, n_sub)?
        .pop()
        .unwrap();
    Ok(MalliavinSample::from_cov(cov, cond))
}

/// Empirical small-value fractions of `λ_min(C̄_t)` and `det C̄_t` over
/// the non-discarded paths.
#[derive(Clone, Debug, PartialEq)]
pub struct NondegeneracyReport {
    pub epsilons: Vec<f64>,
    pub frac_lambda_below: Vec<f64>,
    pub frac_det_below: Vec<f64>,
    pub kept: usize,
    pub discarded: usize,
    pub min_lambda: f64,
}

pub fn nondegeneracy_report(
    sys: &SdeSystem,
    t: f64,
    params: &McParams,
    epsilons: &[f64],
) -> Result<NondegeneracyReport> {
    if params.paths == 0 || params.n_sub == 0 {
        return Err(Error::InvalidParameter(
            "need at least one path and one substep".into(),
        ));
    }
    grid_steps(t, params.dt)?;
    let mut eps = epsilons.to_vec();
    eps.sort_by(|a, b| b.total_cmp(a));
    let samples: Vec<(f64, f64, bool)> = (0..params.paths as u64)
        .into_par_iter()
        .map(|i| {
            let drv = sample_driver(sys.noise_dim(), t, params.dt, params.seed, i, None)?;
            let s = reduced_covariance(sys, &drv, params.n_sub)?;
            Ok((s.lambda_min(), s.det, s.discarded()))
        })
        .collect::<Result<_>>()?;
    let kept: Vec<&(f64, f64, bool)> = samples.iter().filter(|s| !s.2).collect();
    let n = kept.len().max(1) as f64;
    let frac = |pick: fn(&(f64, f64, bool)) -> f64, e: f64| {
        kept.iter().filter(|s| pick(s) < e).count() as f64 / n
    };
    let frac_lambda_below: Vec<f64> = eps.iter().map(|&e| frac(|s| s.0, e)).collect();
    let frac_det_below: Vec<f64> = eps.iter().map(|&e| frac(|s| s.1, e)).collect();
    debug_assert!(frac_lambda_below.windows(2).all(|w| w[1] <= w[0]));
    debug_assert!(frac_det_below.windows(2).all(|w| w[1] <= w[0]));
    Ok(NondegeneracyReport {
        epsilons: eps,
        frac_lambda_below,
        frac_det_below,
        kept: kept.len(),
        discarded: samples.len() - kept.len(),
        min_lambda: kept.iter().map(|s| s.0).fold(f64::INFINITY, f64::min),
    })
}
