//! Command-line driver: generate, train, extract and compare.
//!
//! Every knob lives in a flat `key = value` config file (see
//! [`CONFIG_KEYS`]); command-line flags override it. Exit codes: 0 success,
//! 2 usage or configuration error, 3 numerical divergence, 4 I/O failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::baselines::{alpha_grid, build_dictionary_matrix, lasso_best, stridge_fit};
use crate::error::Error;
use crate::extract::{expand_folded, prune, render_pde, report_csv, truth_table};
use crate::fitloss::{FitScheme, LossConfig, Norm};
use crate::grid::{make_grid, PhaseGrid};
use crate::operators::{FieldRho, OperatorTag};
use crate::solver::{generate_dataset, load_dataset, save_dataset, suggested_dt, Dataset, PhysicsSpec};
use crate::symnet::{
    load_checkpoint, save_checkpoint, AnsatzConfig, Components, FitTarget, PhysCoef, PhysicsParams, SpatialWeight,
};
use crate::train::{train, EpsSweep, TrainConfig};

/// Config keys with defaults and descriptions, in file order.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("eps", "0.0625", "scale parameter ε of the generated data"),
    ("nx", "200", "spatial cells of the generation grid on [0,1]"),
    ("nv", "16", "Gauss-Legendre velocity nodes"),
    ("nt", "56", "saved time levels"),
    ("stride_t", "1", "solver steps between saved levels"),
    ("stride_x", "1", "fine cells per saved cell"),
    ("dt", "auto", "solver step; auto = min(dx²/2, ε·dx)"),
    ("sigma_s", "const:1", "scattering σ^S(x): const:c or poly:a0,a1,..."),
    ("sigma_a", "const:0", "absorption σ^A(x)"),
    ("source", "const:0", "source G(x)"),
    ("init", "well_prepared", "initial g: well_prepared or zero_g"),
    ("scales", "2", "multiscale order M"),
    ("layers", "1", "layer count K"),
    ("base_ops", "identity,advection,projection", "base operators (identity, advection, projection, gradx, lapx)"),
    ("components", "two_component", "scalar or two_component"),
    ("target", "g", "modeled equations: g, rho or both"),
    ("mean_free_mask", "true", "structural mean-free guarantee on the g-equation"),
    ("adv_order", "1", "upwind order of the advection operator (1 or 2)"),
    ("phys_sigma_s", "known", "σ^S in the fit: known, zero, scalar:v or spatial:pieces:degree:init"),
    ("phys_sigma_a", "known", "σ^A in the fit"),
    ("phys_source", "known", "G in the fit"),
    ("norm", "l1", "residual norm: l1, l2 or huber:delta"),
    ("gamma_sparse", "1e-4", "ℓ¹ weight on network parameters"),
    ("gamma_cont", "1e-3", "continuity penalty on spatial weights"),
    ("gamma_meanfree", "0", "mean-free penalty weight"),
    ("scheme", "ars222", "fitting scheme: fe, be, imex1, ars222, bdf1..bdf4"),
    ("lr", "1e-3", "base Adam step size"),
    ("lr_physics", "auto", "step size of trainable physics; auto = lr"),
    ("adam_beta1", "0.9", "Adam β₁"),
    ("adam_beta2", "0.999", "Adam β₂"),
    ("adam_eps", "1e-8", "Adam ε"),
    ("epochs", "100", "passes over the residual indices"),
    ("minibatch", "full", "residual indices per step, or full"),
    ("per_scale_lr", "true", "scale-m step lr·ε_pred^m"),
    ("eps_mode", "global", "ε_pred range: global, or interval:i[,j,...] to sweep intervals"),
    ("seed", "0", "seed of every random choice"),
    ("timing", "false", "record wall-clock seconds in the history"),
    ("prune", "1e-3", "relative pruning threshold of extracted coefficients"),
    ("lasso_iters", "1000000", "coordinate-descent sweep cap"),
    ("stridge_lambda", "1e-5", "STRidge ridge parameter"),
    ("stridge_threshold", "0.1", "STRidge hard threshold"),
    ("stridge_sweeps", "10", "STRidge sweeps"),
    ("out", "out", "output directory"),
];

/// Resolved configuration: defaults overridden by a file, then by flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let values = CONFIG_KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect();
        ExperimentConfig { values }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// rejected.
    pub fn parse(text: &str) -> crate::Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| cfg_err(format!("line {}: expected key = value", ln + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> crate::Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(cfg_err(format!("unknown config key '{key}'"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("every key has a default")
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> crate::Result<T> {
        self.get(key).parse().map_err(|_| cfg_err(format!("bad value '{}' for '{key}'", self.get(key))))
    }

    fn flag(&self, key: &str) -> crate::Result<bool> {
        match self.get(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(cfg_err(format!("'{key}' must be true or false, got '{v}'"))),
        }
    }

    /// All keys in file order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _, _) in CONFIG_KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out"))
    }

    pub fn grid(&self) -> crate::Result<PhaseGrid> {
        make_grid(self.num("nx")?, self.num("nv")?)
    }

    pub fn physics_spec(&self, grid: &PhaseGrid) -> crate::Result<PhysicsSpec> {
        let ss = parse_spatial_fn(self.get("sigma_s"))?;
        let sa = parse_spatial_fn(self.get("sigma_a"))?;
        let src = parse_spatial_fn(self.get("source"))?;
        let eps: f64 = self.num("eps")?;
        let mut spec = PhysicsSpec::well_prepared(grid, eps, |x| eval_poly(&ss, x), |x| eval_poly(&sa, x), |x| eval_poly(&src, x))?;
        match self.get("init") {
            "well_prepared" => {}
            "zero_g" => spec.g0.data.iter_mut().for_each(|v| *v = 0.0),
            v => return Err(cfg_err(format!("init must be well_prepared or zero_g, got '{v}'"))),
        }
        Ok(spec)
    }

    pub fn dt(&self, grid: &PhaseGrid) -> crate::Result<f64> {
        match self.get("dt") {
            "auto" => Ok(suggested_dt(grid, self.num("eps")?)),
            _ => self.num("dt"),
        }
    }

    pub fn ansatz(&self) -> crate::Result<AnsatzConfig> {
        let base_ops = self.get("base_ops").split(',').map(|t| OperatorTag::parse(t.trim())).collect::<crate::Result<Vec<_>>>()?;
        let components = match self.get("components") {
            "scalar" => Components::Scalar,
            "two_component" => Components::TwoComponent,
            v => return Err(cfg_err(format!("components must be scalar or two_component, got '{v}'"))),
        };
        let target = match self.get("target") {
            "g" => FitTarget::G,
            "rho" => FitTarget::Rho,
            "both" => FitTarget::Both,
            v => return Err(cfg_err(format!("target must be g, rho or both, got '{v}'"))),
        };
        let cfg = AnsatzConfig {
            scales: self.num("scales")?,
            layers: self.num("layers")?,
            base_ops,
            components,
            target,
            mean_free_mask: self.flag("mean_free_mask")?,
            adv_order: self.num("adv_order")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn physics_params(&self) -> crate::Result<PhysicsParams> {
        Ok(PhysicsParams {
            sigma_s: parse_phys_init(self.get("phys_sigma_s"))?,
            sigma_a: parse_phys_init(self.get("phys_sigma_a"))?,
            source: parse_phys_init(self.get("phys_source"))?,
        })
    }

    pub fn loss(&self) -> crate::Result<LossConfig> {
        let norm = match self.get("norm") {
            "l1" => Norm::L1,
            "l2" => Norm::L2,
            v => match v.strip_prefix("huber:").and_then(|d| d.parse().ok()) {
                Some(d) => Norm::Huber(d),
                None => return Err(cfg_err(format!("norm must be l1, l2 or huber:delta, got '{v}'"))),
            },
        };
        let l = LossConfig {
            norm,
            gamma_sparse: self.num("gamma_sparse")?,
            gamma_cont: self.num("gamma_cont")?,
            gamma_meanfree: self.num("gamma_meanfree")?,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn scheme(&self) -> crate::Result<FitScheme> {
        FitScheme::parse(self.get("scheme"))
    }

    pub fn train(&self) -> crate::Result<TrainConfig> {
        let minibatch = match self.get("minibatch") {
            "full" => None,
            _ => Some(self.num("minibatch")?),
        };
        let lr_physics = match self.get("lr_physics") {
            "auto" => None,
            _ => Some(self.num("lr_physics")?),
        };
        let eps_sweep = match self.get("eps_mode") {
            "global" => EpsSweep::Global,
            v => {
                let list = v.strip_prefix("interval:").ok_or_else(|| cfg_err(format!("bad eps_mode '{v}'")))?;
                let ids = list
                    .split(',')
                    .map(|i| i.trim().parse().map_err(|_| cfg_err(format!("bad interval '{i}'"))))
                    .collect::<crate::Result<Vec<usize>>>()?;
                EpsSweep::Intervals(ids)
            }
        };
        Ok(TrainConfig {
            lr_base: self.num("lr")?,
            lr_physics,
            adam_beta1: self.num("adam_beta1")?,
            adam_beta2: self.num("adam_beta2")?,
            adam_eps: self.num("adam_eps")?,
            epochs: self.num("epochs")?,
            minibatch,
            per_scale_lr: self.flag("per_scale_lr")?,
            seed: self.num("seed")?,
            eps_sweep,
            timing: self.flag("timing")?,
        })
    }
}

/// Polynomial coefficients from `const:c` or `poly:a0,a1,...`.
pub fn parse_spatial_fn(s: &str) -> crate::Result<Vec<f64>> {
    let bad = || cfg_err(format!("expected const:c or poly:a0,a1,..., got '{s}'"));
    let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
    let vals = rest.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| bad())).collect::<crate::Result<Vec<_>>>()?;
    match kind {
        "const" if vals.len() == 1 => Ok(vals),
        "poly" if !vals.is_empty() => Ok(vals),
        _ => Err(bad()),
    }
}

fn eval_poly(a: &[f64], x: f64) -> f64 {
    a.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Initial physics coefficient: known, zero, scalar:v, spatial:pieces:degree:init.
fn parse_phys_init(s: &str) -> crate::Result<PhysCoef> {
    let bad = || cfg_err(format!("bad physics mode '{s}'"));
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["known"] => Ok(PhysCoef::Known),
        ["zero"] => Ok(PhysCoef::Zero),
        ["scalar", v] => Ok(PhysCoef::Scalar(v.parse().map_err(|_| bad())?)),
        ["spatial", p, d, v] => Ok(PhysCoef::Spatial(SpatialWeight::uniform(
            p.parse().map_err(|_| bad())?,
            d.parse().map_err(|_| bad())?,
            v.parse().map_err(|_| bad())?,
        )?)),
        _ => Err(bad()),
    }
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Divergence(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Divergence(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io(_) => CliError::Io(msg),
            Error::Instability { .. }
            | Error::StageDivergence(_)
            | Error::Scale(_)
            | Error::Overflow(_)
            | Error::Divergence { .. }
            | Error::EmptyModel => CliError::Divergence(msg),
            _ => CliError::Usage(msg),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_help() -> String {
    let mut s = String::from("Config keys (file lines `key = value`; defaults shown):\n");
    for (k, d, desc) in CONFIG_KEYS {
        let _ = writeln!(s, "  {k:<18} {d:<30} {desc}");
    }
    s
}

#[derive(Debug, Parser)]
#[command(name = "kinlearn", version, about = "Kinetic transport data generation and multiscale PDE discovery")]
#[command(after_help = config_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (config key `out`).
    #[arg(long)]
    out: Option<String>,
    /// Seed of every random choice (config key `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the kinetic system and write a KDS1 dataset plus a metadata sidecar.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        nx: Option<usize>,
        /// Saved time levels.
        #[arg(long)]
        nt: Option<usize>,
        /// Scattering coefficient: const:c or poly:a0,a1,...
        #[arg(long = "sigma-s")]
        sigma_s: Option<String>,
        /// Absorption coefficient, same forms as --sigma-s.
        #[arg(long = "sigma-a")]
        sigma_a: Option<String>,
    },
    /// Fit the ansatz to a dataset; writes a checkpoint and the history CSV.
    Train {
        #[command(flatten)]
        common: Common,
        /// KDS1 dataset.
        #[arg(long)]
        data: PathBuf,
        /// Fitting scheme (config key `scheme`).
        #[arg(long)]
        scheme: Option<String>,
        /// Multiscale order M.
        #[arg(long)]
        multiscale: Option<usize>,
        /// Sweep ε_pred over intervals (default 0,1,2).
        #[arg(long = "interval-sweep", num_args = 0..=1, default_missing_value = "0,1,2", value_name = "LIST")]
        interval_sweep: Option<String>,
        /// Passes over the residual indices (config key `epochs`).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Expand a checkpoint into the learned PDE and an error report.
    Extract {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset supplying ε, σ^S, σ^A of the ground truth.
        #[arg(long)]
        data: PathBuf,
    },
    /// Run a sparse-regression baseline on a dataset.
    Compare {
        #[command(flatten)]
        common: Common,
        /// KDS1 dataset.
        #[arg(long)]
        data: PathBuf,
        /// lasso or stridge.
        #[arg(long)]
        method: String,
    },
}

fn resolve_config(common: &Common, flags: &[(&str, Option<String>)]) -> CliResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::parse(&read_input(p)?)?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(o) = &common.out {
        cfg.set("out", o)?;
    }
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    Ok(cfg)
}

/// Reads an input file; a missing file is a usage error.
fn read_input(p: &Path) -> CliResult<String> {
    if !p.exists() {
        return Err(CliError::Usage(format!("input file {} does not exist", p.display())));
    }
    std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
}

fn load_input_dataset(p: &Path) -> CliResult<Dataset> {
    if !p.exists() {
        return Err(CliError::Usage(format!("dataset {} does not exist", p.display())));
    }
    Ok(load_dataset(p)?)
}

fn write_output(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn out_dir(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let d = cfg.out_dir();
    std::fs::create_dir_all(&d).map_err(|e| CliError::Io(format!("{}: {e}", d.display())))?;
    Ok(d)
}

/// Generates the dataset described by `cfg` into its output directory.
pub fn cmd_generate(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let grid = cfg.grid()?;
    let spec = cfg.physics_spec(&grid)?;
    let dt = cfg.dt(&grid)?;
    let nt: usize = cfg.num("nt")?;
    let stride_t: usize = cfg.num("stride_t")?;
    let ds = generate_dataset(&spec, &grid, dt, nt * stride_t, cfg.num("stride_x")?, stride_t)?;
    let dir = out_dir(cfg)?;
    let path = dir.join("dataset.kds");
    save_dataset(&ds, &path)?;
    write_output(&dir.join("dataset.meta"), &cfg.to_text())?;
    Ok(path)
}

/// Trains on `data`, writing `checkpoint.txt`, `history.csv` and
/// `train.meta`. A divergence still writes the last finite checkpoint.
pub fn cmd_train(cfg: &ExperimentConfig, data: &Path) -> CliResult<PathBuf> {
    let ds = load_input_dataset(data)?;
    let acfg = cfg.ansatz()?;
    let run = train(&ds, &acfg, &cfg.loss()?, &cfg.train()?, cfg.scheme()?, cfg.physics_params()?)?;
    let dir = out_dir(cfg)?;
    let ck = dir.join("checkpoint.txt");
    save_checkpoint(&acfg, &run.params, &ck)?;
    write_output(&dir.join("history.csv"), &run.history.to_csv())?;
    write_output(&dir.join("train.meta"), &cfg.to_text())?;
    match run.aborted {
        Some(e) => Err(CliError::Divergence(e.to_string())),
        None => Ok(ck),
    }
}

/// Writes `pde.txt` (pruned learned equations) and `report.csv`.
pub fn cmd_extract(cfg: &ExperimentConfig, checkpoint: &Path, data: &Path) -> CliResult<String> {
    if !checkpoint.exists() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let (acfg, params) = load_checkpoint(checkpoint)?;
    let ds = load_input_dataset(data)?;
    let known: [&FieldRho; 3] = [&ds.spec.sigma_s, &ds.spec.sigma_a, &ds.spec.source_g];
    let table = prune(&expand_folded(&params, &acfg, &ds.grid, known)?, cfg.num("prune")?);
    let mut pde = String::new();
    for eq in 0..2 {
        if (eq == 0 && acfg.target.has_g()) || (eq == 1 && acfg.target.has_rho()) {
            let _ = writeln!(pde, "{}", render_pde(&table, eq));
        }
    }
    let truth = truth_table(ds.epsilon(), &ds.spec.sigma_s, &ds.spec.sigma_a, acfg.target.has_g(), acfg.target.has_rho());
    let report = report_csv(&truth, &table, &ds.grid, acfg.adv_order)?;
    let dir = out_dir(cfg)?;
    write_output(&dir.join("pde.txt"), &pde)?;
    write_output(&dir.join("report.csv"), &report)?;
    Ok(pde)
}

/// Runs `method` on the g-equation dictionary of `data`; writes
/// `baseline_<method>.csv` and returns the rendered equation.
pub fn cmd_compare(cfg: &ExperimentConfig, data: &Path, method: &str) -> CliResult<String> {
    if method != "lasso" && method != "stridge" {
        return Err(CliError::Usage(format!("method must be lasso or stridge, got '{method}'")));
    }
    let ds = load_input_dataset(data)?;
    let dm = build_dictionary_matrix(&ds)?;
    let truth = truth_table(ds.epsilon(), &ds.spec.sigma_s, &ds.spec.sigma_a, true, false);
    let fit = if method == "lasso" {
        lasso_best(&dm, &truth, &ds.grid, &alpha_grid(), cfg.num("lasso_iters")?)?
    } else {
        stridge_fit(&dm, &truth, &ds.grid, cfg.num("stridge_lambda")?, cfg.num("stridge_threshold")?, cfg.num("stridge_sweeps")?)?
    };
    let report = report_csv(&truth, &fit.table, &ds.grid, 1)?;
    let dir = out_dir(cfg)?;
    write_output(&dir.join(format!("baseline_{method}.csv")), &report)?;
    Ok(render_pde(&fit.table, 0))
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate { common, eps, nx, nt, sigma_s, sigma_a } => {
            let cfg = resolve_config(
                &common,
                &[
                    ("eps", eps.map(|v| v.to_string())),
                    ("nx", nx.map(|v| v.to_string())),
                    ("nt", nt.map(|v| v.to_string())),
                    ("sigma_s", sigma_s),
                    ("sigma_a", sigma_a),
                ],
            )?;
            let p = cmd_generate(&cfg)?;
            println!("wrote {}", p.display());
        }
        Command::Train { common, data, scheme, multiscale, interval_sweep, epochs } => {
            let cfg = resolve_config(
                &common,
                &[
                    ("scheme", scheme),
                    ("scales", multiscale.map(|v| v.to_string())),
                    ("eps_mode", interval_sweep.map(|l| format!("interval:{l}"))),
                    ("epochs", epochs.map(|v| v.to_string())),
                ],
            )?;
            let p = cmd_train(&cfg, &data)?;
            println!("wrote {}", p.display());
        }
        Command::Extract { common, checkpoint, data } => {
            let cfg = resolve_config(&common, &[])?;
            print!("{}", cmd_extract(&cfg, &checkpoint, &data)?);
        }
        Command::Compare { common, data, method } => {
            let cfg = resolve_config(&common, &[])?;
            println!("{}", cmd_compare(&cfg, &data, &method)?);
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
