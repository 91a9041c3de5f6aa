//! Command-line and config-file parsing into a [`RunConfig`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::CliError;

/// Seed used when neither `--seed`, the config file nor `CW_SEED` set one.
pub const DEFAULT_SEED: u64 = 42;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Command {
    GeometryCheck,
    Transport,
    Develop,
    Simulate,
    Heat,
    Bismut,
    ElworthyLi,
    Ibp,
    ClarkOcone,
    Malliavin,
}

impl Command {
    pub const ALL: [Command; 10] = [
        Command::GeometryCheck,
        Command::Transport,
        Command::Develop,
        Command::Simulate,
        Command::Heat,
        Command::Bismut,
        Command::ElworthyLi,
        Command::Ibp,
        Command::ClarkOcone,
        Command::Malliavin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::GeometryCheck => "geometry-check",
            Command::Transport => "transport",
            Command::Develop => "develop",
            Command::Simulate => "simulate",
            Command::Heat => "heat",
            Command::Bismut => "bismut",
            Command::ElworthyLi => "elworthy-li",
            Command::Ibp => "ibp",
            Command::ClarkOcone => "clark-ocone",
            Command::Malliavin => "malliavin",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "extrinsic",
    version,
    about = "Geometry and stochastic calculus on embedded manifolds"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Projection, curvature and Ricci identities at random points.
    GeometryCheck(Opts),
    /// Parallel transport along a latitude loop or a developed straight line.
    Transport(Opts),
    /// Develop a straight line and anti-develop it back.
    Develop(Opts),
    /// Endpoints of Brownian motion or of a builtin SDE system.
    Simulate(Opts),
    /// Monte Carlo heat semigroup `E f(Σ_t)`.
    Heat(Opts),
    /// Bismut gradient estimator.
    Bismut(Opts),
    /// Elworthy-Li directional derivative estimator.
    ElworthyLi(Opts),
    /// Integration by parts residual on path space.
    Ibp(Opts),
    /// Clark-Ocone representation defect for flat Brownian motion.
    ClarkOcone(Opts),
    /// Hörmander ranks and reduced Malliavin covariance statistics.
    Malliavin(Opts),
}

#[derive(Args, Debug, Default)]
struct Opts {
    /// key=value or JSON file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// e.g. `sphere:N=3,rho=1`, `flat:N=2`, `cylinder`, `torus:n=2`, `sl2`.
    #[arg(long)]
    manifold: Option<String>,
    /// Builtin SDE system name.
    #[arg(long)]
    system: Option<String>,
    /// Polynomial in the ambient coordinates `x1 … xN`.
    #[arg(long)]
    f: Option<String>,
    /// Comma-separated ambient coordinates.
    #[arg(long, allow_hyphen_values = true)]
    origin: Option<String>,
    /// Comma-separated ambient vector, projected onto the tangent space at the origin.
    #[arg(long, allow_hyphen_values = true)]
    direction: Option<String>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    t0: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    level: Option<usize>,
    /// Comma-separated thresholds.
    #[arg(long)]
    epsilons: Option<String>,
    /// Colatitude of the transport loop.
    #[arg(long)]
    phi: Option<f64>,
    /// Also estimate the gradient by central differences with this step.
    #[arg(long)]
    fd_step: Option<f64>,
    #[arg(long)]
    n_sub: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    workers: Option<usize>,
    /// Reduce samples in path order for bit-exact results.
    #[arg(long)]
    deterministic: bool,
    /// Pair every path with its negated driver.
    #[arg(long)]
    antithetic: bool,
    /// Use `h'` instead of `h` inside the Ricci term of the integration by parts weight.
    #[arg(long)]
    ricci_derivative: bool,
}

const KEYS: [&str; 23] = [
    "manifold",
    "system",
    "f",
    "origin",
    "direction",
    "t",
    "t0",
    "dt",
    "paths",
    "samples",
    "steps",
    "level",
    "epsilons",
    "phi",
    "fd_step",
    "n_sub",
    "seed",
    "out",
    "workers",
    "deterministic",
    "antithetic",
    "ricci_derivative",
    "command",
];

/// A fully resolved invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub manifold: Option<String>,
    pub system: Option<String>,
    pub f: Option<String>,
    pub origin: Option<Vec<f64>>,
    pub direction: Option<Vec<f64>>,
    pub t: f64,
    pub t0: Option<f64>,
    pub dt: f64,
    pub paths: usize,
    pub samples: usize,
    pub steps: usize,
    pub level: usize,
    pub epsilons: Vec<f64>,
    pub phi: Option<f64>,
    pub fd_step: Option<f64>,
    pub n_sub: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub deterministic: bool,
    pub antithetic: bool,
    pub ricci_derivative: bool,
}

impl RunConfig {
    /// Defaults for `command`.
    pub fn new(command: Command) -> Self {
        Self {
            command,
            manifold: None,
            system: None,
            f: None,
            origin: None,
            direction: None,
            t: 1.0,
            t0: None,
            dt: 1e-3,
            paths: 10_000,
            samples: 100,
            steps: 1000,
            level: 3,
            epsilons: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5],
            phi: None,
            fd_step: None,
            n_sub: 4,
            seed: DEFAULT_SEED,
            out: None,
            workers: None,
            deterministic: false,
            antithetic: false,
            ricci_derivative: false,
        }
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, CliError> {
            v.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("invalid value `{v}` for `{key}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool, CliError> {
            match v.trim() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(CliError::Usage(format!("invalid value `{v}` for `{key}`"))),
            }
        }
        let s = || Some(value.trim().to_string());
        match key {
            "manifold" => self.manifold = s(),
            "system" => self.system = s(),
            "f" => self.f = s(),
            "origin" => self.origin = Some(parse_list(key, value)?),
            "direction" => self.direction = Some(parse_list(key, value)?),
            "t" => self.t = num(key, value)?,
            "t0" => self.t0 = Some(num(key, value)?),
            "dt" => self.dt = num(key, value)?,
            "paths" => self.paths = num(key, value)?,
            "samples" => self.samples = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "level" => self.level = num(key, value)?,
            "epsilons" => self.epsilons = parse_list(key, value)?,
            "phi" => self.phi = Some(num(key, value)?),
            "fd_step" => self.fd_step = Some(num(key, value)?),
            "n_sub" => self.n_sub = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "out" => self.out = Some(PathBuf::from(value.trim())),
            "workers" => self.workers = Some(num(key, value)?),
            "deterministic" => self.deterministic = flag(key, value)?,
            "antithetic" => self.antithetic = flag(key, value)?,
            "ricci_derivative" => self.ricci_derivative = flag(key, value)?,
            other => return Err(CliError::Usage(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if !(self.dt > 0.0) {
            return usage(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.t > 0.0) {
            return usage(format!("t must be positive, got {}", self.t));
        }
        if self.paths < 1 {
            return usage("paths must be at least 1".into());
        }
        if let Some(t0) = self.t0 {
            if !(t0 > 0.0 && t0 <= self.t) {
                return usage(format!("need 0 < t0 <= t, got t0 = {t0}, t = {}", self.t));
            }
        }
        if self.workers == Some(0) {
            return usage("workers must be at least 1".into());
        }
        let needs = |key: &str, present: bool| {
            if present {
                Ok(())
            } else {
                usage(format!("{} requires --{key}", self.command))
            }
        };
        use Command::*;
        match self.command {
            GeometryCheck | Transport | Develop | Heat | Bismut | Ibp => {
                needs("manifold", self.manifold.is_some())?
            }
            Simulate | ElworthyLi => needs(
                "manifold or --system",
                self.manifold.is_some() || self.system.is_some(),
            )?,
            Malliavin => needs("system", self.system.is_some())?,
            ClarkOcone => {}
        }
        if matches!(self.command, Heat | Bismut | ElworthyLi | Ibp | ClarkOcone) {
            needs("f", self.f.is_some())?;
        }
        Ok(())
    }

    /// `key=value` pairs from which the configuration can be rebuilt. The
    /// output path and the worker count are omitted since they do not
    /// affect results.
    pub fn metadata(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = vec![("command", self.command.to_string())];
        let mut opt = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        opt("manifold", self.manifold.clone());
        opt("system", self.system.clone());
        opt("f", self.f.clone());
        opt("origin", self.origin.as_deref().map(list));
        opt("direction", self.direction.as_deref().map(list));
        opt("t", Some(self.t.to_string()));
        opt("t0", self.t0.map(|x| x.to_string()));
        opt("dt", Some(self.dt.to_string()));
        opt("paths", Some(self.paths.to_string()));
        opt("samples", Some(self.samples.to_string()));
        opt("steps", Some(self.steps.to_string()));
        opt("level", Some(self.level.to_string()));
        opt("epsilons", Some(list(&self.epsilons)));
        opt("phi", self.phi.map(|x| x.to_string()));
        opt("fd_step", self.fd_step.map(|x| x.to_string()));
        opt("n_sub", Some(self.n_sub.to_string()));
        opt("seed", Some(self.seed.to_string()));
        opt("deterministic", Some(self.deterministic.to_string()));
        opt("antithetic", Some(self.antithetic.to_string()));
        opt("ricci_derivative", Some(self.ricci_derivative.to_string()));
        out
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>, CliError> {
    v.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("invalid number `{x}` in `{key}`")))
        })
        .collect()
}

/// Reads a config file: a JSON object, or `key=value` lines with `#` comments.
pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    if text.trim_start().starts_with('{') {
        let doc: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("bad JSON config: {e}")))?;
        let obj = doc
            .as_object()
            .ok_or_else(|| CliError::Usage("JSON config must be an object".into()))?;
        for (k, v) in obj {
            let s = match v {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Array(items) => items
                    .iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
                other => other.to_string(),
            };
            map.insert(k.clone(), s);
        }
    } else {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("{}:{}: expected key=value", path.display(), no + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    for k in map.keys() {
        if !KEYS.contains(&k.as_str()) {
            return Err(CliError::Usage(format!(
                "unknown key `{k}` in {}",
                path.display()
            )));
        }
    }
    Ok(map)
}

/// Parses `argv` (including the program name). Precedence: flags, then the
/// config file, then `CW_SEED` for the seed, then defaults.
pub fn parse_config<I, S>(argv: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    let (command, opts) = match cli.command {
        Sub::GeometryCheck(o) => (Command::GeometryCheck, o),
        Sub::Transport(o) => (Command::Transport, o),
        Sub::Develop(o) => (Command::Develop, o),
        Sub::Simulate(o) => (Command::Simulate, o),
        Sub::Heat(o) => (Command::Heat, o),
        Sub::Bismut(o) => (Command::Bismut, o),
        Sub::ElworthyLi(o) => (Command::ElworthyLi, o),
        Sub::Ibp(o) => (Command::Ibp, o),
        Sub::ClarkOcone(o) => (Command::ClarkOcone, o),
        Sub::Malliavin(o) => (Command::Malliavin, o),
    };
    let mut cfg = RunConfig::new(command);
    if let Ok(seed) = std::env::var("CW_SEED") {
        cfg.set("seed", &seed).map_err(|_| {
            CliError::Usage(format!("CW_SEED must be an unsigned integer, got `{seed}`"))
        })?;
    }
    if let Some(path) = &opts.config {
        for (k, v) in read_config_file(path)? {
            if k == "command" {
                if v != command.as_str() {
                    return Err(CliError::Usage(format!(
                        "config is for `{v}` but `{command}` was invoked"
                    )));
                }
                continue;
            }
            cfg.set(&k, &v)?;
        }
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    let mut put = |k: &'static str, v: Option<String>| {
        if let Some(v) = v {
            flags.push((k, v));
        }
    };
    put("manifold", opts.manifold);
    put("system", opts.system);
    put("f", opts.f);
    put("origin", opts.origin);
    put("direction", opts.direction);
    put("t", opts.t.map(|x| x.to_string()));
    put("t0", opts.t0.map(|x| x.to_string()));
    put("dt", opts.dt.map(|x| x.to_string()));
    put("paths", opts.paths.map(|x| x.to_string()));
    put("samples", opts.samples.map(|x| x.to_string()));
    put("steps", opts.steps.map(|x| x.to_string()));
    put("level", opts.level.map(|x| x.to_string()));
    put("epsilons", opts.epsilons);
    put("phi", opts.phi.map(|x| x.to_string()));
    put("fd_step", opts.fd_step.map(|x| x.to_string()));
    put("n_sub", opts.n_sub.map(|x| x.to_string()));
    put("seed", opts.seed.map(|x| x.to_string()));
    put("out", opts.out.map(|p| p.display().to_string()));
    put("workers", opts.workers.map(|x| x.to_string()));
    put("deterministic", opts.deterministic.then(|| "true".into()));
    put("antithetic", opts.antithetic.then(|| "true".into()));
    put(
        "ricci_derivative",
        opts.ricci_derivative.then(|| "true".into()),
    );
    for (k, v) in flags {
        cfg.set(k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bismut_example() {
        let cfg = parse_config([
            "extrinsic",
            "bismut",
            "--manifold",
            "sphere:N=3,rho=1",
            "--t",
            "0.5",
            "--t0",
            "0.25",
            "--paths",
            "100000",
            "--seed",
            "42",
            "--f",
            "x3",
        ])
        .unwrap();
        assert_eq!(cfg.command, Command::Bismut);
        assert_eq!(cfg.t0, Some(0.25));
        assert_eq!(cfg.paths, 100_000);
    }

    #[test]
    fn missing_manifold_is_usage_error() {
        assert!(matches!(
            parse_config(["extrinsic", "geometry-check"]),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn t0_beyond_t_rejected() {
        let r = parse_config([
            "extrinsic",
            "bismut",
            "--manifold",
            "flat:N=1",
            "--f",
            "x1",
            "--t",
            "0.5",
            "--t0",
            "0.75",
        ]);
        assert!(matches!(r, Err(CliError::Usage(_))));
    }

    #[test]
    fn lists_and_negative_values() {
        let cfg = parse_config([
            "extrinsic",
            "ibp",
            "--manifold",
            "flat:N=2",
            "--f",
            "x1",
            "--direction",
            "-1,0.5",
        ])
        .unwrap();
        assert_eq!(cfg.direction, Some(vec![-1.0, 0.5]));
    }

    #[test]
    fn metadata_round_trips() {
        let cfg = parse_config([
            "extrinsic",
            "heat",
            "--manifold",
            "sphere:N=3,rho=1",
            "--f",
            "x3",
            "--dt",
            "0.01",
            "--deterministic",
        ])
        .unwrap();
        let mut rebuilt = RunConfig::new(Command::Heat);
        for (k, v) in cfg.metadata().into_iter().skip(1) {
            rebuilt.set(k, &v).unwrap();
        }
        assert_eq!(rebuilt, cfg);
    }
}
