//! Monte Carlo estimators over projection Brownian motion: heat semigroup
//! values, Bismut and Elworthy-Li gradients, path-space integration by
//! parts residuals, and the flat Clark-Ocone representation defect.
//!
//! Gradients at `o` are reported in the basis `E` of `τ_oM` returned by
//! [`ManifoldModel::tangent_basis`].

use nalgebra::DVector;

pub use crate::driver::CameronMartinPath;
use crate::driver::{grid_steps, sample_driver, DrivingPath};
use crate::error::{Error, Result};
use crate::geometry::ScalarField;
use crate::manifold::{ManifoldModel, TangentVector};
use crate::poly::Poly;
use crate::sde::{
    projection_bm_endpoint, simulate_projection_bm, simulate_tangent_flow, BmOptions, SdeSystem,
};
use crate::stats::{run_paths, McEstimate, McParams};

fn driver_for(
    dim: usize,
    t: f64,
    params: &McParams,
    index: u64,
    negate: bool,
) -> Result<DrivingPath> {
    let d = sample_driver(dim, t, params.dt, params.seed, index, None)?;
    Ok(if negate { d.negated() } else { d })
}

fn check_f(model: &ManifoldModel, f: &ScalarField) -> Result<()> {
    if f.dim() != model.ambient_dim() {
        return Err(Error::Dimension(format!(
            "function of {} variables on M ⊂ R^{}",
            f.dim(),
            model.ambient_dim()
        )));
    }
    Ok(())
}

/// `E[f(Σ_t)]` for Brownian motion started at `o`.
pub fn heat_expectation(
    model: &ManifoldModel,
    o: &DVector<f64>,
    f: &ScalarField,
    t: f64,
    params: &McParams,
) -> Result<McEstimate> {
    model.check_on_manifold(o)?;
    check_f(model, f)?;
    grid_steps(t, params.dt)?;
    let n = model.ambient_dim();
    run_paths(params, 1, |i, neg| {
        let drv = driver_for(n, t, params, i, neg)?;
        let end = projection_bm_endpoint(model, o.as_slice(), &drv, params.n_sub)?;
        Ok(vec![f.eval(end.as_slice())])
    })
}

/// Central difference of `x ↦ E[f(Σ_t^x)]` along each basis vector `a_i` of
/// `τ_oM`, from the origins `retract(o ± step a_i)` driven by common noise.
pub fn heat_gradient_fd(
    model: &ManifoldModel,
    o: &DVector<f64>,
    f: &ScalarField,
    t: f64,
    step: f64,
    params: &McParams,
) -> Result<McEstimate> {
    model.check_on_manifold(o)?;
    check_f(model, f)?;
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "step must be positive, got {step}"
        )));
    }
    let n = model.ambient_dim();
    let basis = model.tangent_basis(o);
    let origins: Vec<(DVector<f64>, DVector<f64>)> = basis
        .column_iter()
        .map(|a| {
            Ok((
                model.retract(&(o + a * step))?,
                model.retract(&(o - a * step))?,
            ))
        })
        .collect::<Result<_>>()?;
    run_paths(params, basis.ncols(), |i, neg| {
        let drv = driver_for(n, t, params, i, neg)?;
        origins
            .iter()
            .map(|(plus, minus)| {
                let fp = f.eval(
                    projection_bm_endpoint(model, plus.as_slice(), &drv, params.n_sub)?.as_slice(),
                );
                let fm = f.eval(
                    projection_bm_endpoint(model, minus.as_slice(), &drv, params.n_sub)?.as_slice(),
                );
                Ok((fp - fm) / (2.0 * step))
            })
            .collect()
    })
}

fn check_horizon(t: f64, t0: f64) -> Result<()> {
    if !(t0 > 0.0 && t0 <= t) {
        return Err(Error::BadHorizon { t0, t });
    }
    Ok(())
}

/// `∇(e^{tΔ/2} f)(o) = E[(∫₀^{t₀} W_r db_r) f(Σ_t)] / t₀` with the Ricci
/// weight `W` and the anti-development `b`, as a `d`-vector in the basis of `τ_oM`.
pub fn bismut_gradient(
    model: &ManifoldModel,
    o: &DVector<f64>,
    f: &ScalarField,
    t: f64,
    t0: f64,
    params: &McParams,
) -> Result<McEstimate> {
    bismut_gradient_multi(model, o, f, t, &[t0], params)
}

/// [`bismut_gradient`] for several `t₀` on the same paths; components are
/// grouped by `t₀`, `d` per group.
pub fn bismut_gradient_multi(
    model: &ManifoldModel,
    o: &DVector<f64>,
    f: &ScalarField,
    t: f64,
    t0s: &[f64],
    params: &McParams,
) -> Result<McEstimate> {
    model.check_on_manifold(o)?;
    check_f(model, f)?;
    grid_steps(t, params.dt)?;
    let mut cuts = Vec::with_capacity(t0s.len());
    for &t0 in t0s {
        check_horizon(t, t0)?;
        cuts.push(grid_steps(t0, params.dt)?);
    }
    let n = model.ambient_dim();
    let d = model.manifold_dim();
    let opts = BmOptions {
        derivative_flow: false,
        ..BmOptions::default()
    }
    .with_n_sub(params.n_sub);
    run_paths(params, d * t0s.len(), |i, neg| {
        let drv = driver_for(n, t, params, i, neg)?;
        let gp = simulate_projection_bm(model, o, &drv, &opts)?;
        let value = f.eval(gp.point_slice(gp.steps()));
        let last = *cuts.iter().max().unwrap();
        let mut acc = DVector::zeros(d);
        let mut partial = vec![DVector::zeros(d); t0s.len()];
        for k in 0..last {
            acc += gp.ricci_weight(k).unwrap() * gp.antidev_increment(k).unwrap();
            for (p, &c) in partial.iter_mut().zip(&cuts) {
                if k + 1 == c {
                    *p = acc.clone();
                }
            }
        }
        let mut out = Vec::with_capacity(d * t0s.len());
        for (p, &t0) in partial.iter().zip(t0s) {
            out.extend(p.iter().map(|x| x * value / t0));
        }
        Ok(out)
    })
}

/// `v(e^{tL/2} f)(o) = E[f(Σ_t) ∫₀^{t₀} ⟨X^#(Σ_s) Z_s v, dB_s⟩] / t₀` for a
/// system whose fields span the tangent space.
pub fn elworthy_li_gradient(
    sys: &SdeSystem,
    v: &TangentVector,
    f: &ScalarField,
    t: f64,
    t0: f64,
    params: &McParams,
) -> Result<McEstimate> {
    let model = sys.model();
    check_f(model, f)?;
    check_horizon(t, t0)?;
    grid_steps(t, params.dt)?;
    let cut = grid_steps(t0, params.dt)?;
    if (&v.base - sys.origin()).amax() > 0.0 {
        return Err(Error::BasePointMismatch);
    }
    sys.check_surjective(sys.origin())?;
    // spot-check along one trajectory
    let probe = simulate_tangent_flow(
        sys,
        &driver_for(sys.noise_dim(), t, params, 0, false)?,
        &v.vec,
        params.n_sub,
    )?;
    for x in probe
        .points
        .iter()
        .step_by(probe.points.len().div_ceil(8).max(1))
    {
        sys.check_surjective(x)?;
    }
    let n = model.ambient_dim();
    run_paths(params, 1, |i, neg| {
        let drv = driver_for(sys.noise_dim(), t, params, i, neg)?;
        let flow = simulate_tangent_flow(sys, &drv, &v.vec, params.n_sub)?;
        let mut integral = 0.0;
        let mut pj = vec![0.0; n];
        for k in 0..cut {
            let db = drv.increment(k);
            let j = &flow.tangents[k];
            if sys.is_projection() {
                model.apply_p(flow.points[k].as_slice(), j.as_slice(), &mut pj);
                integral += crate::linalg::dot(&pj, db);
            } else {
                let s = sys.sharp(&flow.points[k])? * j;
                integral += crate::linalg::dot(s.as_slice(), db);
            }
        }
        let value = f.eval(flow.points.last().unwrap().as_slice());
        Ok(vec![value * integral / t0])
    })
}

/// `F(σ) = f(σ_{s₁}, …, σ_{s_k})` with `f` a polynomial in `k · N` variables;
/// block `j` (variables `x_{jN+1} … x_{(j+1)N}`) is the point `σ_{s_j}`.
#[derive(Clone, Debug, PartialEq)]
pub struct CylinderFunction {
    times: Vec<f64>,
    ambient_dim: usize,
    f: Poly,
    grad: Vec<Poly>,
}

impl CylinderFunction {
    pub fn new(times: Vec<f64>, ambient_dim: usize, f: Poly) -> Result<Self> {
        if times.is_empty() || times.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidParameter(
                "cylinder times must be positive".into(),
            ));
        }
        if f.nvars() != times.len() * ambient_dim {
            return Err(Error::Dimension(format!(
                "cylinder polynomial has {} variables, expected {} times {}",
                f.nvars(),
                times.len(),
                ambient_dim
            )));
        }
        let grad = f.gradient();
        Ok(Self {
            times,
            ambient_dim,
            f,
            grad,
        })
    }

    /// `F = f(σ_s)`.
    pub fn single(time: f64, f: Poly) -> Result<Self> {
        let n = f.nvars();
        Self::new(vec![time], n, f)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn poly(&self) -> &Poly {
        &self.f
    }

    pub fn eval(&self, points: &[f64]) -> f64 {
        self.f.eval(points)
    }

    /// Ambient gradient in block `j`.
    pub fn block_gradient(&self, points: &[f64], j: usize) -> DVector<f64> {
        let n = self.ambient_dim;
        DVector::from_iterator(n, (0..n).map(|i| self.grad[j * n + i].eval(points)))
    }
}

/// Which weight multiplies the Ricci term in the integration by parts formula.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum IbpVariant {
    /// `h' + ½ Ric_// h`.
    #[default]
    Standard,
    /// `h' + ½ Ric_// h'`, kept for comparison.
    DerivativeInRicci,
}

/// Component estimates of `E[X^h F] - E[F z^h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IbpReport {
    pub residual: McEstimate,
    pub directional: McEstimate,
    pub weighted: McEstimate,
}

/// Monte Carlo residual of the path-space integration by parts formula for
/// Brownian motion from `o`. `h` takes values in `R^d ≅ τ_oM`.
pub fn ibp_residual(
    model: &ManifoldModel,
    o: &DVector<f64>,
    h: &CameronMartinPath,
    big_f: &CylinderFunction,
    variant: IbpVariant,
    params: &McParams,
) -> Result<IbpReport> {
    model.check_on_manifold(o)?;
    let n = model.ambient_dim();
    let d = model.manifold_dim();
    if h.dim() != d {
        return Err(Error::Dimension(format!(
            "h takes values in R^{} but M has dimension {d}",
            h.dim()
        )));
    }
    if big_f.ambient_dim != n {
        return Err(Error::Dimension(format!(
            "cylinder function on R^{} but M ⊂ R^{n}",
            big_f.ambient_dim
        )));
    }
    let horizon = big_f.times.iter().copied().fold(0.0, f64::max);
    let steps = grid_steps(horizon, params.dt)?;
    let nodes: Vec<usize> = big_f
        .times
        .iter()
        .map(|&s| grid_steps(s, params.dt))
        .collect::<Result<_>>()?;
    let dt = params.dt;
    let h_nodes: Vec<DVector<f64>> = (0..=steps).map(|k| h.eval(k as f64 * dt)).collect();
    let slopes: Vec<DVector<f64>> = (0..steps)
        .map(|k| (&h_nodes[k + 1] - &h_nodes[k]) / dt)
        .collect();
    let ric_arg: Vec<DVector<f64>> = match variant {
        IbpVariant::Standard => h_nodes[..steps].to_vec(),
        IbpVariant::DerivativeInRicci => slopes.clone(),
    };
    let opts = BmOptions {
        derivative_flow: false,
        ..BmOptions::default()
    }
    .with_n_sub(params.n_sub);
    let est = run_paths(params, 3, |i, neg| {
        let drv = driver_for(n, horizon, params, i, neg)?;
        let gp = simulate_projection_bm(model, o, &drv, &opts)?;
        let mut pts = Vec::with_capacity(nodes.len() * n);
        for &k in &nodes {
            pts.extend_from_slice(gp.point_slice(k));
        }
        let value = big_f.eval(&pts);
        let mut directional = 0.0;
        for (j, &k) in nodes.iter().enumerate() {
            let u = gp.frame(k).unwrap();
            let carried = u * gp.basis() * &h_nodes[k];
            directional += big_f.block_gradient(&pts, j).dot(&carried);
        }
        let mut z = 0.0;
        for k in 0..steps {
            let w = &slopes[k] + gp.ricci_parallel(k).unwrap() * &ric_arg[k] * 0.5;
            z += w.dot(&gp.antidev_increment(k).unwrap());
        }
        let weighted = value * z;
        Ok(vec![directional - weighted, directional, weighted])
    })?;
    Ok(IbpReport {
        residual: est.select(&[0]),
        directional: est.select(&[1]),
        weighted: est.select(&[2]),
    })
}

/// Mean squared defect `E[(F - EF - Σ_k ⟨∇H(t_k, b_k), Δb_k⟩)²]` of the
/// Clark-Ocone representation of `F = f(b_t)` for Brownian motion `b` in
/// `R^d`, where `H(s, ·) = e^{(t-s)Δ/2} f` is evaluated in closed form.
pub fn clark_ocone_check(f: &Poly, t: f64, params: &McParams) -> Result<McEstimate> {
    let d = f.nvars();
    if d == 0 {
        return Err(Error::NotPolynomial(
            "a function of at least one variable is required".into(),
        ));
    }
    let steps = grid_steps(t, params.dt)?;
    let mean = f.gaussian_smooth(t).eval(&vec![0.0; d]);
    let grads: Vec<Vec<Poly>> = (0..steps)
        .map(|k| f.gaussian_smooth(t - k as f64 * params.dt).gradient())
        .collect();
    run_paths(params, 1, |i, neg| {
        let drv = driver_for(d, t, params, i, neg)?;
        let mut b = vec![0.0; d];
        let mut integral = 0.0;
        for (k, g) in grads.iter().enumerate() {
            let db = drv.increment(k);
            for (gi, dbi) in g.iter().zip(db) {
                integral += gi.eval(&b) * dbi;
            }
            b.iter_mut().zip(db).for_each(|(x, dx)| *x += dx);
        }
        let defect = f.eval(&b) - mean - integral;
        Ok(vec![defect * defect])
    })
}

/// `E` times a coordinate vector: the ambient tangent vector at `o`.
pub fn to_ambient(model: &ManifoldModel, o: &DVector<f64>, coords: &[f64]) -> DVector<f64> {
    model.tangent_basis(o) * DVector::from_column_slice(coords)
}
