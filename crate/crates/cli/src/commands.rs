//! One renderer per subcommand. Each returns the CSV header line, the data
//! rows, and extra `# result.*` metadata.

use std::f64::consts::PI;

use extrinsic::estimators::{bismut_gradient, heat_gradient_fd};
use extrinsic::geometry::{bochner_residual, curvature_operator, ricci_form_trace, ricci_matrix};
use extrinsic::malliavin::{bracket_table, hormander_rank, nondegeneracy_report};
use extrinsic::sde::{simulate_projection_bm, simulate_sde_with, BmOptions};
use extrinsic::tolerances::{
    BOCHNER_TOL, CURV_TOL_ANALYTIC, CURV_TOL_FD, PROJ_TOL_ANALYTIC, PROJ_TOL_FD,
};
use extrinsic::{
    antidevelop, clark_ocone_check, develop, elworthy_li_gradient, heat_expectation, holonomy,
    ibp_residual, parallel_transport, sample_driver, CameronMartinPath, CylinderFunction, DMatrix,
    DVector, DiscretePath, EuclideanPath, IbpVariant, ManifoldKind, ManifoldModel, McEstimate,
    McParams, Poly, Reduction, ScalarField, SdeSystem, TangentVector,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{Command, RunConfig};
use crate::CliError;

pub(crate) struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub results: Vec<(String, String)>,
}

impl Table {
    fn new(header: Vec<String>) -> Self {
        Self {
            header,
            rows: Vec::new(),
            results: Vec::new(),
        }
    }

    fn result(&mut self, key: &str, value: impl ToString) {
        self.results.push((key.to_string(), value.to_string()));
    }
}

pub(crate) fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn cols(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

fn manifold(cfg: &RunConfig) -> Result<ManifoldModel, CliError> {
    let spec = cfg
        .manifold
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("{} requires --manifold", cfg.command)))?;
    Ok(ManifoldModel::parse(spec)?)
}

fn origin(cfg: &RunConfig, model: &ManifoldModel) -> Result<DVector<f64>, CliError> {
    match &cfg.origin {
        Some(o) => {
            if o.len() != model.ambient_dim() {
                return Err(CliError::Usage(format!(
                    "origin has {} coordinates, expected {}",
                    o.len(),
                    model.ambient_dim()
                )));
            }
            let o = DVector::from_column_slice(o);
            model.check_on_manifold(&o)?;
            Ok(o)
        }
        None => Ok(model.default_origin()),
    }
}

/// `P(o)` times `--direction`, or the first basis vector of `τ_oM`.
fn tangent_direction(
    cfg: &RunConfig,
    model: &ManifoldModel,
    o: &DVector<f64>,
) -> Result<DVector<f64>, CliError> {
    match &cfg.direction {
        Some(v) => {
            if v.len() != model.ambient_dim() {
                return Err(CliError::Usage(format!(
                    "direction has {} coordinates, expected {}",
                    v.len(),
                    model.ambient_dim()
                )));
            }
            Ok(model.tangent_projection(o) * DVector::from_column_slice(v))
        }
        None => Ok(model.tangent_basis(o).column(0).into_owned()),
    }
}

fn mc_params(cfg: &RunConfig) -> McParams {
    McParams {
        paths: cfg.paths,
        dt: cfg.dt,
        seed: cfg.seed,
        n_sub: cfg.n_sub,
        reduction: if cfg.deterministic {
            Reduction::Deterministic
        } else {
            Reduction::Streaming
        },
        antithetic: cfg.antithetic,
    }
}

fn scalar(cfg: &RunConfig, nvars: usize) -> Result<ScalarField, CliError> {
    let src = cfg
        .f
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("{} requires --f", cfg.command)))?;
    Ok(ScalarField::parse(src, nvars)?)
}

fn system(cfg: &RunConfig) -> Result<SdeSystem, CliError> {
    let sys = match (&cfg.system, &cfg.manifold) {
        (Some(name), _) => SdeSystem::builtin(name)?,
        (None, Some(_)) => {
            let m = manifold(cfg)?;
            let o = origin(cfg, &m)?;
            return Ok(SdeSystem::projection(&m, o)?);
        }
        (None, None) => {
            return Err(CliError::Usage(format!(
                "{} requires --manifold or --system",
                cfg.command
            )))
        }
    };
    match &cfg.origin {
        Some(o) => Ok(sys.with_origin(DVector::from_column_slice(o))?),
        None => Ok(sys),
    }
}

fn estimate_rows(table: &mut Table, name: &str, est: &McEstimate) {
    for i in 0..est.dim() {
        table.rows.push(vec![
            name.to_string(),
            i.to_string(),
            num(est.mean[i]),
            num(est.stderr[i]),
        ]);
    }
}

fn estimate_table() -> Table {
    Table::new(
        ["estimator", "component", "mean", "stderr"]
            .map(String::from)
            .to_vec(),
    )
}

fn basis_result(table: &mut Table, model: &ManifoldModel, o: &DVector<f64>) {
    let e = model.tangent_basis(o);
    for (j, c) in e.column_iter().enumerate() {
        table.result(
            &format!("basis_{j}"),
            c.iter().map(|x| num(*x)).collect::<Vec<_>>().join(";"),
        );
    }
}

pub(crate) fn render(cfg: &RunConfig) -> Result<Table, CliError> {
    match cfg.command {
        Command::GeometryCheck => geometry_check(cfg),
        Command::Transport => transport(cfg),
        Command::Develop => develop_cmd(cfg),
        Command::Simulate => simulate(cfg),
        Command::Heat => heat(cfg),
        Command::Bismut => bismut(cfg),
        Command::ElworthyLi => elworthy_li(cfg),
        Command::Ibp => ibp(cfg),
        Command::ClarkOcone => clark_ocone(cfg),
        Command::Malliavin => malliavin(cfg),
    }
}

fn geometry_check(cfg: &RunConfig) -> Result<Table, CliError> {
    let model = manifold(cfg)?;
    let n = model.ambient_dim();
    let analytic = model.has_analytic_projection();
    let curv_tol = if analytic {
        CURV_TOL_ANALYTIC
    } else {
        CURV_TOL_FD
    };
    let proj_tol = if analytic {
        PROJ_TOL_ANALYTIC
    } else {
        PROJ_TOL_FD
    };
    let bochner_f = (n >= 2).then(|| ScalarField::from_poly(&Poly::var(n, 0) * &Poly::var(n, 1)));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut table = Table::new(
        ["sample", "check", "residual", "tolerance", "pass"]
            .map(String::from)
            .to_vec(),
    );
    let mut failures = 0usize;
    for s in 0..cfg.samples {
        let m = model.sample_point(&mut rng);
        let u = model.sample_tangent(&m, &mut rng).vec;
        let v = model.sample_tangent(&m, &mut rng).vec;
        let w = model.sample_tangent(&m, &mut rng).vec;
        let r = |a: &DVector<f64>, b: &DVector<f64>, c: &DVector<f64>| {
            curvature_operator(&model, &m, a, b) * c
        };
        let p = model.tangent_projection(&m);
        let ric = ricci_matrix(&model, &m);
        let mut checks: Vec<(&str, f64, f64)> = vec![
            ("projection_idempotent", (&p * &p - &p).amax(), proj_tol),
            (
                "curvature_antisymmetry",
                (r(&u, &v, &w) + r(&v, &u, &w)).amax(),
                curv_tol,
            ),
            (
                "bianchi",
                (r(&u, &v, &w) + r(&v, &w, &u) + r(&w, &u, &v)).amax(),
                curv_tol,
            ),
            (
                "ricci_symmetry",
                (u.dot(&(&ric * &v)) - v.dot(&(&ric * &u))).abs(),
                curv_tol,
            ),
            (
                "ricci_trace",
                (u.dot(&(&ric * &v)) - ricci_form_trace(&model, &m, &u, &v)).abs(),
                curv_tol,
            ),
        ];
        let oracle: Option<(DVector<f64>, DMatrix<f64>)> = match model.kind() {
            ManifoldKind::Flat | ManifoldKind::Cylinder => {
                Some((DVector::zeros(n), DMatrix::zeros(n, n)))
            }
            ManifoldKind::Sphere { rho } => {
                let k = 1.0 / (rho * rho);
                Some((
                    (&u * v.dot(&w) - &v * u.dot(&w)) * k,
                    &p * ((n as f64 - 2.0) * k),
                ))
            }
            _ => None,
        };
        if let Some((rw, ricci)) = oracle {
            checks.push(("curvature_oracle", (r(&u, &v, &w) - rw).amax(), curv_tol));
            checks.push(("ricci_oracle", (&ric - ricci).amax(), curv_tol));
        }
        if let (true, Some(f)) = (analytic, &bochner_f) {
            checks.push(("bochner", bochner_residual(&model, f, &m)?, BOCHNER_TOL));
        }
        for (name, res, tol) in checks {
            let pass = res <= tol;
            failures += usize::from(!pass);
            table.rows.push(vec![
                s.to_string(),
                name.to_string(),
                num(res),
                num(tol),
                pass.to_string(),
            ]);
        }
    }
    table.result("failures", failures);
    Ok(table)
}

fn transport(cfg: &RunConfig) -> Result<Table, CliError> {
    let model = manifold(cfg)?;
    let n = model.ambient_dim();
    let steps = cfg.steps;
    let path = match cfg.phi {
        Some(phi) => {
            let rho = match model.kind() {
                ManifoldKind::Sphere { rho } if n == 3 => *rho,
                _ => return Err(CliError::Usage("--phi needs a 2-sphere in R^3".into())),
            };
            DiscretePath::from_curve(&model, 0.0, 2.0 * PI, steps, |th| {
                let (s, c) = phi.sin_cos();
                (
                    DVector::from_vec(vec![rho * s * th.cos(), rho * s * th.sin(), rho * c]),
                    DVector::from_vec(vec![-rho * s * th.sin(), rho * s * th.cos(), 0.0]),
                )
            })?
        }
        None => {
            let o = origin(cfg, &model)?;
            let dir = model.tangent_basis(&o).transpose() * tangent_direction(cfg, &model, &o)?;
            develop(
                &model,
                &o,
                &EuclideanPath::straight_line(&dir, cfg.t, steps),
            )?
            .0
        }
    };
    let frames = parallel_transport(&model, &path)?;
    let mut header = vec!["t".to_string()];
    header.extend(cols("x", n));
    header.push("orth_drift".into());
    let mut table = Table::new(header);
    let eye = DMatrix::<f64>::identity(n, n);
    for ((t, x), u) in path.times().iter().zip(path.points()).zip(frames.frames()) {
        let mut row = vec![num(*t)];
        row.extend(x.iter().map(|v| num(*v)));
        row.push(num((u.transpose() * u - &eye).amax()));
        table.rows.push(row);
    }
    table.result("max_orth_drift", num(frames.max_orthogonality_drift()));
    if let Some(phi) = cfg.phi {
        let a = 2.0 * PI * (1.0 - phi.cos());
        let expected = a.sin().atan2(a.cos());
        // report on the branch of the expected angle
        let d = holonomy(&model, &path)? - expected;
        table.result("holonomy", num(expected + d.sin().atan2(d.cos())));
        table.result("holonomy_expected", num(expected));
    }
    Ok(table)
}

fn develop_cmd(cfg: &RunConfig) -> Result<Table, CliError> {
    let model = manifold(cfg)?;
    let o = origin(cfg, &model)?;
    let (n, d) = (model.ambient_dim(), model.manifold_dim());
    let dir = model.tangent_basis(&o).transpose() * tangent_direction(cfg, &model, &o)?;
    let b = EuclideanPath::straight_line(&dir, cfg.t, cfg.steps);
    let (path, _) = develop(&model, &o, &b)?;
    let back = antidevelop(&model, &path)?;
    let mut header = vec!["t".to_string()];
    header.extend(cols("b", d));
    header.extend(cols("x", n));
    header.push("roundtrip_err".into());
    let mut table = Table::new(header);
    for k in 0..=cfg.steps {
        let mut row = vec![num(b.times()[k])];
        row.extend(b.values()[k].iter().map(|v| num(*v)));
        row.extend(path.points()[k].iter().map(|v| num(*v)));
        row.push(num((&back.values()[k] - &b.values()[k]).amax()));
        table.rows.push(row);
    }
    table.result("sup_roundtrip_err", num(back.sup_distance(&b)));
    Ok(table)
}

fn simulate(cfg: &RunConfig) -> Result<Table, CliError> {
    let sys = system(cfg)?;
    let model = sys.model().clone();
    let n = model.ambient_dim();
    let rows: Vec<Vec<String>> = (0..cfg.paths as u64)
        .into_par_iter()
        .map(|i| -> Result<Vec<String>, CliError> {
            let drv = sample_driver(sys.noise_dim(), cfg.t, cfg.dt, cfg.seed, i, None)?;
            let end = if sys.is_projection() {
                let opts = BmOptions::points_only().with_n_sub(cfg.n_sub);
                simulate_projection_bm(&model, sys.origin(), &drv, &opts)?.endpoint()
            } else {
                simulate_sde_with(&sys, &drv, cfg.n_sub)?
                    .points()
                    .last()
                    .unwrap()
                    .clone()
            };
            let mut row = vec![i.to_string()];
            row.extend(end.iter().map(|v| num(*v)));
            row.push(num(model.constraint(end.as_slice()).amax()));
            Ok(row)
        })
        .collect::<Result<_, _>>()?;
    let mut header = vec!["path".to_string()];
    header.extend(cols("x", n));
    header.push("constraint".into());
    let mut table = Table::new(header);
    table.rows = rows;
    Ok(table)
}

fn heat(cfg: &RunConfig) -> Result<Table, CliError> {
    let model = manifold(cfg)?;
    let o = origin(cfg, &model)?;
    let f = scalar(cfg, model.ambient_dim())?;
    let est = heat_expectation(&model, &o, &f, cfg.t, &mc_params(cfg))?;
    let mut table = estimate_table();
    estimate_rows(&mut table, "heat", &est);
    Ok(table)
}

fn bismut(cfg: &RunConfig) -> Result<Table, CliError> {
    let model = manifold(cfg)?;
    let o = origin(cfg, &model)?;
    let f = scalar(cfg, model.ambient_dim())?;
    let params = mc_params(cfg);
    let est = bismut_gradient(&model, &o, &f, cfg.t, cfg.t0.unwrap_or(cfg.t), &params)?;
    let mut table = estimate_table();
    estimate_rows(&mut table, "bismut", &est);
    if let Some(h) = cfg.fd_step {
        let fd = heat_gradient_fd(&model, &o, &f, cfg.t, h, &params)?;
        estimate_rows(&mut table, "central_difference", &fd);
    }
    basis_result(&mut table, &model, &o);
    Ok(table)
}

fn elworthy_li(cfg: &RunConfig) -> Result<Table, CliError> {
    let sys = system(cfg)?;
    let model = sys.model();
    let o = sys.origin().clone();
    let v = TangentVector::new(model, o.clone(), tangent_direction(cfg, model, &o)?)?;
    let f = scalar(cfg, model.ambient_dim())?;
    let est = elworthy_li_gradient(
        &sys,
        &v,
        &f,
        cfg.t,
        cfg.t0.unwrap_or(cfg.t),
        &mc_params(cfg),
    )?;
    let mut table = estimate_table();
    estimate_rows(&mut table, "elworthy_li", &est);
    Ok(table)
}

fn ibp(cfg: &RunConfig) -> Result<Table, CliError> {
    let model = manifold(cfg)?;
    let o = origin(cfg, &model)?;
    let n = model.ambient_dim();
    let dir = model.tangent_basis(&o).transpose() * tangent_direction(cfg, &model, &o)?;
    let f = scalar(cfg, n)?;
    let poly = f
        .poly()
        .cloned()
        .ok_or_else(|| CliError::Usage("ibp needs a polynomial --f".into()))?;
    let big_f = CylinderFunction::single(cfg.t, poly)?;
    let variant = if cfg.ricci_derivative {
        IbpVariant::DerivativeInRicci
    } else {
        IbpVariant::Standard
    };
    let rep = ibp_residual(
        &model,
        &o,
        &CameronMartinPath::linear(dir),
        &big_f,
        variant,
        &mc_params(cfg),
    )?;
    let mut table = estimate_table();
    estimate_rows(&mut table, "residual", &rep.residual);
    estimate_rows(&mut table, "directional", &rep.directional);
    estimate_rows(&mut table, "weighted", &rep.weighted);
    Ok(table)
}

fn clark_ocone(cfg: &RunConfig) -> Result<Table, CliError> {
    let dim = match &cfg.manifold {
        Some(_) => {
            let m = manifold(cfg)?;
            if *m.kind() != ManifoldKind::Flat {
                return Err(CliError::Usage(
                    "clark-ocone runs on a flat manifold".into(),
                ));
            }
            m.ambient_dim()
        }
        None => 1,
    };
    let f = Poly::parse(cfg.f.as_deref().unwrap_or_default(), dim)?;
    let est = clark_ocone_check(&f, cfg.t, &mc_params(cfg))?;
    let mut table = estimate_table();
    estimate_rows(&mut table, "mean_squared_defect", &est);
    Ok(table)
}

fn malliavin(cfg: &RunConfig) -> Result<Table, CliError> {
    let sys = system(cfg)?;
    let brackets = bracket_table(&sys, cfg.level)?;
    let rank = hormander_rank(&brackets, sys.origin());
    let rep = nondegeneracy_report(&sys, cfg.t, &mc_params(cfg), &cfg.epsilons)?;
    let mut table = Table::new(
        ["epsilon", "frac_lambda_below", "frac_det_below"]
            .map(String::from)
            .to_vec(),
    );
    for ((e, l), d) in rep
        .epsilons
        .iter()
        .zip(&rep.frac_lambda_below)
        .zip(&rep.frac_det_below)
    {
        table.rows.push(vec![num(*e), num(*l), num(*d)]);
    }
    table.result(
        "ranks",
        rank.ranks
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    table.result(
        "hormander_level",
        rank.level_achieved
            .map_or("none".to_string(), |l| l.to_string()),
    );
    table.result("kept", rep.kept);
    table.result("discarded", rep.discarded);
    table.result("min_lambda", num(rep.min_lambda));
    Ok(table)
}
