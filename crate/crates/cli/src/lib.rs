//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage or validation errors, 2 for
//! numerical failures (divergence, non-convergence), which also print a
//! JSON object on stderr.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use floquet_lab::benchmark::{sl_orbit, StuartLandau};
use floquet_lab::bounds::{analyze_measured, analyze_saturation, RegionSamples};
use floquet_lab::experiments::{
    illustration_e, multiplier_sweep, run_experiment, table_d, to_csv, write_atomic, ExperimentConfig, Illustration,
};
use floquet_lab::flow::{gronwall_window, integrate, transition_along, transition_matrix, FloquetResult, VectorField};
use floquet_lab::numerics::spectral_norm;
use floquet_lab::training::{train, TrainConfig};
use floquet_lab::{Error, Mlp};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const THREADS_ENV: &str = "FLOQUET_LAB_THREADS";

pub const TRAIN_SCHEMA: &str = "floquet-lab/train/v1";
pub const ANALYZE_SCHEMA: &str = "floquet-lab/analyze/v1";
pub const FLOQUET_SCHEMA: &str = "floquet-lab/floquet/v1";
pub const SWEEP_SCHEMA: &str = "floquet-lab/sweep/v1";
pub const EXPERIMENT_SCHEMA: &str = "floquet-lab/experiment/v1";

#[derive(Debug, Parser)]
#[command(name = "floquet-lab", version, about = "Saturation bounds and Floquet spectra for MLP vector fields")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config for the subcommand; must carry a matching "schema" field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, default_value = "out")]
    output_dir: PathBuf,

    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// RK4 steps over one period.
    #[arg(long, global = true)]
    steps: Option<usize>,

    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a network to the Stuart–Landau field and save its weights.
    Train,
    /// Saturation report of a network over a sampled region.
    Analyze(AnalyzeArgs),
    /// Transition matrix, multipliers and Grönwall window.
    Floquet(FloquetArgs),
    /// Multiplier windows of saved weights across a grid of scales.
    Sweep(SweepArgs),
    /// Run one illustration and write its CSV artifacts.
    Experiment(NamedArgs),
    /// Print one of the result tables (d, e or f).
    Table(NamedArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Region {
    UnitCircle,
    Annulus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Orbit {
    /// Prescribed curve (cos t, sin t).
    UnitCircle,
    /// Integrate the field from --x0.
    Trajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Field {
    StuartLandau,
}

#[derive(Debug, clap::Args)]
struct AnalyzeArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, value_enum)]
    region: Option<Region>,
    #[arg(long)]
    points: Option<usize>,
    /// Saturation threshold; defaults to the measured per-layer maximum.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    scale: Option<f64>,
}

#[derive(Debug, clap::Args)]
struct FloquetArgs {
    #[arg(long, conflicts_with = "field")]
    weights: Option<PathBuf>,
    #[arg(long, value_enum)]
    field: Option<Field>,
    #[arg(long, value_enum)]
    orbit: Option<Orbit>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    /// Period T.
    #[arg(long = "T")]
    period: Option<f64>,
    #[arg(long)]
    scale: Option<f64>,
}

#[derive(Debug, clap::Args)]
struct SweepArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, value_delimiter = ',')]
    s_values: Option<Vec<f64>>,
}

#[derive(Debug, clap::Args)]
struct NamedArgs {
    #[arg(long)]
    name: String,
    /// Pre-trained weights; skips training.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AnalyzeConfig {
    region: Region,
    points: usize,
    r_min: f64,
    r_max: f64,
    delta: Option<f64>,
    scale: Option<f64>,
    seed: u64,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            region: Region::UnitCircle,
            points: 1000,
            r_min: 0.1,
            r_max: 2.0,
            delta: None,
            scale: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FloquetConfig {
    orbit: Orbit,
    x0: Vec<f64>,
    period: f64,
    steps: usize,
    scale: Option<f64>,
    /// Samples of the curve used for C(U).
    orbit_points: usize,
}

impl Default for FloquetConfig {
    fn default() -> Self {
        Self {
            orbit: Orbit::UnitCircle,
            x0: vec![1.0, 0.0],
            period: std::f64::consts::TAU,
            steps: 4000,
            scale: None,
            orbit_points: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepConfig {
    s_values: Vec<f64>,
    orbit_points: usize,
    steps: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            s_values: vec![1.0, 2.0, 4.0, 7.0],
            orbit_points: 1000,
            steps: 4000,
        }
    }
}

/// Reads a JSON config, checks its "schema" tag and deserializes the rest.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>, schema: &str) -> Result<T, Error> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("config {} must be a JSON object", path.display())))?;
    match obj.remove("schema") {
        Some(Value::String(s)) if s == schema => {}
        Some(other) => {
            return Err(Error::Config(format!(
                "config {} has schema {other}, expected \"{schema}\"",
                path.display()
            )))
        }
        None => {
            return Err(Error::Config(format!(
                "config {} lacks a \"schema\" field (expected \"{schema}\")",
                path.display()
            )))
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
}

fn load_weights(path: &Path) -> Result<Mlp, Error> {
    Mlp::load(path).map_err(|e| Error::Config(format!("cannot load weights {}: {e}", path.display())))
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

struct Ctx<'a> {
    cli: &'a Cli,
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn progress(&mut self, msg: &str) {
        if !self.cli.quiet {
            let _ = writeln!(self.err, "{msg}");
        }
    }

    fn emit_json(&mut self, value: &impl Serialize) -> Result<(), Error> {
        let text = serde_json::to_string_pretty(value)?;
        writeln!(self.out, "{text}").map_err(|e| Error::Config(format!("cannot write output: {e}")))
    }

    fn emit_text(&mut self, text: &str) -> Result<(), Error> {
        write!(self.out, "{text}").map_err(|e| Error::Config(format!("cannot write output: {e}")))
    }
}

fn cmd_train(ctx: &mut Ctx) -> Result<(), Error> {
    let mut cfg: TrainConfig = load_config(ctx.cli.config.as_deref(), TRAIN_SCHEMA)?;
    if let Some(seed) = ctx.cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    ctx.progress(&format!(
        "training {}-unit {} net for {} epochs on {} samples",
        cfg.hidden_width, cfg.activation, cfg.optimizer.epochs, cfg.n_samples
    ));
    let report = train(&cfg, &StuartLandau)?;
    let dir = &ctx.cli.output_dir;
    let model_path = dir.join("model.json");
    write_atomic(&model_path, report.trained_model.to_json()?.as_bytes())?;
    let summary = json!({
        "schema": "floquet-lab/train-report/v1",
        "config": cfg,
        "final_mse": report.final_mse,
        "constraint_violations_after_projection": report.constraint_violations_after_projection,
        "loss_history": report.loss_history,
        "model": model_path,
    });
    write_atomic(&dir.join("train_report.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    ctx.emit_json(&json!({
        "final_mse": report.final_mse,
        "constraint_violations_after_projection": report.constraint_violations_after_projection,
        "model": model_path,
    }))
}

fn cmd_analyze(ctx: &mut Ctx, args: &AnalyzeArgs) -> Result<(), Error> {
    let mut cfg: AnalyzeConfig = load_config(ctx.cli.config.as_deref(), ANALYZE_SCHEMA)?;
    if let Some(r) = args.region {
        cfg.region = r;
    }
    if let Some(n) = args.points {
        cfg.points = n;
    }
    cfg.delta = args.delta.or(cfg.delta);
    cfg.scale = args.scale.or(cfg.scale);
    if let Some(seed) = ctx.cli.seed {
        cfg.seed = seed;
    }
    let mut m = load_weights(&args.weights)?;
    if let Some(s) = cfg.scale {
        m = m.with_scale(s)?;
    }
    let region = match cfg.region {
        Region::UnitCircle => RegionSamples::unit_circle(cfg.points)?,
        Region::Annulus => RegionSamples::annulus(cfg.points, cfg.r_min, cfg.r_max, cfg.seed)?,
    };
    let report = match cfg.delta {
        Some(delta) => analyze_saturation(&m, &region, delta)?,
        None => analyze_measured(&m, &region)?,
    };
    ctx.emit_json(&report)
}

fn cmd_floquet(ctx: &mut Ctx, args: &FloquetArgs) -> Result<(), Error> {
    let mut cfg: FloquetConfig = load_config(ctx.cli.config.as_deref(), FLOQUET_SCHEMA)?;
    if let Some(o) = args.orbit {
        cfg.orbit = o;
    }
    if let Some(x0) = &args.x0 {
        cfg.x0 = x0.clone();
    }
    if let Some(t) = args.period {
        cfg.period = t;
    }
    if let Some(n) = ctx.cli.steps {
        cfg.steps = n;
    }
    cfg.scale = args.scale.or(cfg.scale);
    if !(cfg.period > 0.0 && cfg.period.is_finite()) {
        return Err(Error::Config(format!("period T must be positive, got {}", cfg.period)));
    }
    if cfg.steps == 0 || cfg.orbit_points < 2 {
        return Err(Error::Config("steps must be positive and orbit_points ≥ 2".into()));
    }

    let mlp = match (&args.weights, args.field) {
        (Some(path), _) => {
            let m = load_weights(path)?;
            Some(match cfg.scale {
                Some(s) => m.with_scale(s)?,
                None => m,
            })
        }
        (None, Some(Field::StuartLandau)) => None,
        (None, None) => return Err(Error::Config("floquet needs --weights or --field stuart-landau".into())),
    };
    let vf: &dyn VectorField = match &mlp {
        Some(m) => m,
        None => &StuartLandau,
    };

    let (mut result, samples): (FloquetResult, Vec<Vec<f64>>) = match cfg.orbit {
        Orbit::UnitCircle => {
            if vf.dim() != 2 {
                return Err(Error::Config("the unit-circle orbit needs a planar field".into()));
            }
            let fr = transition_along(vf, &sl_orbit, cfg.period, cfg.steps)?;
            let pts = (0..cfg.orbit_points)
                .map(|k| sl_orbit(cfg.period * k as f64 / cfg.orbit_points as f64))
                .collect();
            (fr, pts)
        }
        Orbit::Trajectory => {
            let fr = transition_matrix(vf, &cfg.x0, cfg.period, cfg.steps)?;
            let traj = integrate(vf, &cfg.x0, (0.0, cfg.period), cfg.steps)?;
            (fr, traj.into_iter().map(|(_, x)| x).collect())
        }
    };
    let c_of_u = match &mlp {
        Some(m) => analyze_measured(m, &RegionSamples::new(samples, "curve samples")?)?.c_of_u,
        None => samples
            .iter()
            .map(|x| spectral_norm(&vf.jacobian(x)?))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .fold(0.0, f64::max),
    };
    result.window = Some(gronwall_window(c_of_u, cfg.period));
    ctx.emit_json(&result)
}

fn cmd_sweep(ctx: &mut Ctx, args: &SweepArgs) -> Result<(), Error> {
    let mut cfg: SweepConfig = load_config(ctx.cli.config.as_deref(), SWEEP_SCHEMA)?;
    if let Some(s) = &args.s_values {
        cfg.s_values = s.clone();
    }
    if let Some(n) = ctx.cli.steps {
        cfg.steps = n;
    }
    if cfg.s_values.is_empty() || cfg.s_values.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::Config("s_values must be nonempty and positive".into()));
    }
    let m = load_weights(&args.weights)?;
    ctx.progress(&format!("sweeping {} scales", cfg.s_values.len()));
    let rows = multiplier_sweep(&m, &cfg.s_values, cfg.orbit_points, cfg.steps)?;
    write_atomic(&ctx.cli.output_dir.join("sweep").join("multiplier_window.csv"), to_csv(&rows).as_bytes())?;
    ctx.emit_json(&rows)
}

fn experiment_config(ctx: &Ctx, weights: &Option<PathBuf>) -> Result<ExperimentConfig, Error> {
    let mut cfg: ExperimentConfig = load_config(ctx.cli.config.as_deref(), EXPERIMENT_SCHEMA)?;
    if let Some(seed) = ctx.cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = ctx.cli.steps {
        cfg.steps = n;
    }
    if weights.is_some() {
        cfg.weights = weights.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_experiment(ctx: &mut Ctx, args: &NamedArgs) -> Result<(), Error> {
    let which: Illustration = args.name.parse()?;
    let cfg = experiment_config(ctx, &args.weights)?;
    ctx.progress(&format!("running {which}"));
    let out = run_experiment(which, &cfg, &ctx.cli.output_dir)?;
    ctx.progress(&format!("wrote {}", out.dir.display()));
    ctx.emit_json(&out.manifest)
}

fn cmd_table(ctx: &mut Ctx, args: &NamedArgs) -> Result<(), Error> {
    let which: Illustration = args.name.parse()?;
    let cfg = experiment_config(ctx, &args.weights)?;
    let model = || -> Result<Mlp, Error> {
        match &cfg.weights {
            Some(p) => load_weights(p),
            None => {
                let tc = TrainConfig {
                    seed: cfg.seed,
                    ..cfg.train.clone().or(which.default_training()).unwrap_or_default()
                };
                Ok(train(&tc, &StuartLandau)?.trained_model)
            }
        }
    };
    let mut text = String::new();
    match which {
        Illustration::TableD => {
            text.push_str(&format!("{:<16} {:>16} {:>16}\n", "quantity", "numerical", "exact"));
            for r in table_d(cfg.orbit_points)?.rows() {
                text.push_str(&format!("{:<16} {:>16.6e} {:>16.6e}\n", r.quantity, r.numerical, r.exact));
            }
        }
        Illustration::IllustrationE => {
            if cfg.weights.is_none() {
                ctx.progress("training the 32-unit network");
            }
            let rows = illustration_e(&model()?, &cfg.s_values_for(which), &cfg.eval_point)?;
            text.push_str(&format!(
                "{:>6} {:>10} {:>10} {:>10} {:>7} {:>8}\n",
                "s", "actual", "refined", "original", "ratio", "delta"
            ));
            for r in rows {
                text.push_str(&format!(
                    "{:>6.1} {:>10.4e} {:>10.4e} {:>10.4e} {:>6.2}x {:>8.3e}\n",
                    r.s, r.actual, r.refined, r.original, r.ratio, r.delta
                ));
            }
        }
        Illustration::IllustrationF => {
            if cfg.weights.is_none() {
                ctx.progress("training the protocol network");
            }
            let rows = multiplier_sweep(&model()?, &cfg.s_values_for(which), cfg.orbit_points, cfg.steps)?;
            text.push_str(&format!(
                "{:>5} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
                "s", "delta", "C(U)", "|mu1|", "|mu2|", "e^-CT", "e^CT"
            ));
            for r in rows {
                text.push_str(&format!(
                    "{:>5} {:>10.3e} {:>10.3e} {:>10.3e} {:>10.3e} {:>10.3e} {:>10.3e}\n",
                    r.s, r.delta, r.c_of_u, r.mu1_abs, r.mu2_abs, r.window_lo, r.window_hi
                ));
            }
        }
        other => {
            return Err(Error::Config(format!(
                "{other} has no table form; use `experiment --name {other}`"
            )))
        }
    }
    ctx.emit_text(&text)
}

fn error_json(e: &Error) -> Value {
    let mut v = json!({ "error": e.kind(), "message": e.to_string() });
    match e {
        Error::Divergence { last_valid_t } => v["last_valid_t"] = json!(last_valid_t),
        Error::TrainingDivergence { epoch } => v["epoch"] = json!(epoch),
        Error::NonConvergence { iterations } => v["iterations"] = json!(iterations),
        _ => {}
    }
    v
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let target: &mut dyn Write = if code == 0 { out } else { err };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    let mut ctx = Ctx { cli: &cli, out, err };
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Train => cmd_train(&mut ctx),
        Command::Analyze(a) => cmd_analyze(&mut ctx, a),
        Command::Floquet(a) => cmd_floquet(&mut ctx, a),
        Command::Sweep(a) => cmd_sweep(&mut ctx, a),
        Command::Experiment(a) => cmd_experiment(&mut ctx, a),
        Command::Table(a) => cmd_table(&mut ctx, a),
    });
    match result {
        Ok(()) => 0,
        Err(e) if e.is_numerical() => {
            let _ = writeln!(ctx.err, "{}", error_json(&e));
            2
        }
        Err(e) => {
            let _ = writeln!(ctx.err, "error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("floquet-lab").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_subcommand_prints_usage() {
        let (code, _, err) = run_capture(&["frobnicate"]);
        assert_eq!(code, 1);
        assert!(err.contains("Usage"), "{err}");
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = run_capture(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("experiment"));
    }

    #[test]
    fn schema_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"schema": "floquet-lab/sweep/v1"}"#).unwrap();
        let err = load_config::<TrainConfig>(Some(&path), TRAIN_SCHEMA).unwrap_err();
        assert!(err.to_string().contains("expected \"floquet-lab/train/v1\""), "{err}");
        fs::write(&path, r#"{"hidden_width": 4}"#).unwrap();
        assert!(load_config::<TrainConfig>(Some(&path), TRAIN_SCHEMA)
            .unwrap_err()
            .to_string()
            .contains("lacks a \"schema\""));
        fs::write(&path, r#"{"schema": "floquet-lab/train/v1", "hidden_width": 4}"#).unwrap();
        let cfg: TrainConfig = load_config(Some(&path), TRAIN_SCHEMA).unwrap();
        assert_eq!(cfg.hidden_width, 4);
        fs::write(&path, r#"{"schema": "floquet-lab/train/v1", "hiden_width": 4}"#).unwrap();
        assert!(load_config::<TrainConfig>(Some(&path), TRAIN_SCHEMA).is_err());
    }

    #[test]
    fn numerical_errors_are_json() {
        let v = error_json(&Error::Divergence { last_valid_t: 1.5 });
        assert_eq!(v["error"], "divergence");
        assert_eq!(v["last_valid_t"], 1.5);
        let v = error_json(&Error::TrainingDivergence { epoch: 7 });
        assert_eq!(v["epoch"], 7);
    }
}
