//! Sweep runners for the numerical illustrations.
//!
//! Each runner is split into a pure function producing typed rows and
//! [`run_experiment`], which obtains the model (trained or loaded), writes
//! `<out>/<name>/*.csv` plus `manifest.json`, and returns what it wrote.
//! Sweeps over `s` run in parallel; rows come back in grid order.
//!
//! | name             | files                                          |
//! |------------------|------------------------------------------------|
//! | `illustration-a` | `jacobian_attenuation.csv`                     |
//! | `illustration-b` | `obstruction_sweep.csv`                        |
//! | `illustration-c` | `summary.csv`, `trajectories.csv`              |
//! | `table-d`        | `table_d.csv`                                  |
//! | `illustration-e` | `refined_comparison.csv`                       |
//! | `illustration-f` | `multiplier_window.csv`                        |
//!
//! Trained runs also write `model.json` in the weight-file format.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchmark::{sl_jacobian, sl_orbit, sl_reference, StuartLandau};
use crate::bounds::{analyze_measured, pointwise_jacobian_bound, weight_constant, RegionSamples};
use crate::error::{Error, Result};
use crate::flow::{gronwall_window, integrate, simpson_uniform, transition_along, transition_matrix, VectorField};
use crate::network::Mlp;
use crate::numerics::spectral_norm;
use crate::training::{train, TrainConfig};

pub const MANIFEST_SCHEMA: &str = "floquet-lab/manifest/v1";

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| {
                    if i + 1 == n {
                        hi
                    } else {
                        (a + (b - a) * i as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Illustration {
    IllustrationA,
    IllustrationB,
    IllustrationC,
    TableD,
    IllustrationE,
    IllustrationF,
}

impl Illustration {
    pub const ALL: [Illustration; 6] = [
        Illustration::IllustrationA,
        Illustration::IllustrationB,
        Illustration::IllustrationC,
        Illustration::TableD,
        Illustration::IllustrationE,
        Illustration::IllustrationF,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Illustration::IllustrationA => "illustration-a",
            Illustration::IllustrationB => "illustration-b",
            Illustration::IllustrationC => "illustration-c",
            Illustration::TableD => "table-d",
            Illustration::IllustrationE => "illustration-e",
            Illustration::IllustrationF => "illustration-f",
        }
    }

    pub fn default_s_values(self) -> Vec<f64> {
        match self {
            Illustration::IllustrationA | Illustration::IllustrationB => log_grid(1.0, 30.0, 30),
            Illustration::IllustrationC => vec![1.0, 4.0, 15.0],
            Illustration::TableD => Vec::new(),
            Illustration::IllustrationE => TABLE_E_S.to_vec(),
            Illustration::IllustrationF => vec![1.0, 2.0, 4.0, 7.0],
        }
    }

    /// Training setup used when no weights are supplied.
    pub fn default_training(self) -> Option<TrainConfig> {
        match self {
            Illustration::TableD => None,
            Illustration::IllustrationC | Illustration::IllustrationF => Some(TrainConfig::protocol()),
            _ => Some(TrainConfig::default()),
        }
    }
}

impl fmt::Display for Illustration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Illustration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        let key = key.strip_prefix("illustration-").unwrap_or(&key);
        let key = key.strip_prefix("table-").unwrap_or(key);
        match key {
            "a" => Ok(Illustration::IllustrationA),
            "b" => Ok(Illustration::IllustrationB),
            "c" => Ok(Illustration::IllustrationC),
            "d" => Ok(Illustration::TableD),
            "e" => Ok(Illustration::IllustrationE),
            "f" => Ok(Illustration::IllustrationF),
            _ => Err(Error::Config(format!(
                "unknown experiment `{s}`; expected one of {}",
                Illustration::ALL.map(Illustration::name).join(", ")
            ))),
        }
    }
}

/// The ten scales of the refined-bound table.
pub const TABLE_E_S: [f64; 10] = [1.0, 4.2, 7.4, 10.7, 13.9, 17.1, 20.3, 23.6, 26.8, 30.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Overrides the illustration's default grid.
    pub s_values: Option<Vec<f64>>,
    /// Offsets as multiples of `c_min = max_j ‖W_{1,j·}‖₂`.
    pub c_offsets: Vec<f64>,
    pub eval_point: Vec<f64>,
    pub orbit_points: usize,
    /// RK4 steps over one period.
    pub steps: usize,
    /// Pre-trained weights; skips training when set.
    pub weights: Option<PathBuf>,
    /// Overrides the default training setup (its seed is replaced by `seed`).
    pub train: Option<TrainConfig>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            s_values: None,
            c_offsets: vec![0.0, 1.5, 3.0, 6.0],
            eval_point: vec![0.8, 0.4],
            orbit_points: 1000,
            steps: 4000,
            weights: None,
            train: None,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.s_values {
            if s.is_empty() || s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::Config("s_values must be nonempty and positive".into()));
            }
        }
        if self.c_offsets.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(Error::Config("c_offsets must be non-negative".into()));
        }
        if self.eval_point.len() != 2 || self.eval_point.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("eval_point must be a finite planar point".into()));
        }
        if self.orbit_points < 2 {
            return Err(Error::Config("orbit_points must be at least 2".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        Ok(())
    }

    pub fn s_values_for(&self, which: Illustration) -> Vec<f64> {
        self.s_values.clone().unwrap_or_else(|| which.default_s_values())
    }
}

/// A row that knows its CSV header and how to print itself.
pub trait CsvRow {
    fn header() -> &'static [&'static str];
    fn record(&self) -> Vec<String>;
}

/// Formats with 9 significant digits; integers and short decimals stay short.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{v:.decimals$}");
        if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            fixed
        }
    } else {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        format!("{m}e{exp}")
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

pub fn to_csv<R: CsvRow>(rows: &[R]) -> String {
    let mut out = R::header().join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.record().join(","));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Illustration A

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttenuationRow {
    pub s: f64,
    pub actual_norm: f64,
    pub bound: f64,
    /// `s·‖W_1‖‖W_2‖`.
    pub c_w_factor: f64,
    /// `max_i σ′(a_i)` at the evaluation point.
    pub delta_factor: f64,
}

impl CsvRow for AttenuationRow {
    fn header() -> &'static [&'static str] {
        &["s", "actual_norm", "bound", "c_w_factor", "delta_factor"]
    }

    fn record(&self) -> Vec<String> {
        [self.s, self.actual_norm, self.bound, self.c_w_factor, self.delta_factor]
            .map(fmt_num)
            .to_vec()
    }
}

fn max_slopes(m: &Mlp, x: &[f64]) -> Result<Vec<f64>> {
    let trace = m.forward(x)?;
    Ok(trace
        .pre_activations
        .iter()
        .map(|a| a.iter().map(|&v| m.activation().deriv(v).abs()).fold(0.0, f64::max))
        .collect())
}

/// `‖Df(h₀; s)‖` against `C_W(s)·∏_k max_i σ′` at a fixed point.
pub fn illustration_a(model: &Mlp, s_values: &[f64], eval_point: &[f64]) -> Result<Vec<AttenuationRow>> {
    s_values
        .par_iter()
        .map(|&s| {
            let m = model.with_scale(s)?;
            let (_, jac) = m.jacobian(eval_point)?;
            let c_w = weight_constant(&m)?;
            let delta: f64 = max_slopes(&m, eval_point)?.into_iter().product();
            Ok(AttenuationRow {
                s,
                actual_norm: spectral_norm(&jac)?,
                bound: c_w * delta,
                c_w_factor: c_w,
                delta_factor: delta,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Illustration B

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstructionRow {
    pub s: f64,
    pub c_multiple: f64,
    pub c: f64,
    pub delta: f64,
    pub c_of_u: f64,
    /// `d·C(U)·T`.
    pub obstruction_bound: f64,
    /// `|ln det M| = 4π` of the exact oscillator.
    pub sl_reference: f64,
}

impl CsvRow for ObstructionRow {
    fn header() -> &'static [&'static str] {
        &["s", "c_multiple", "c", "delta", "c_of_u", "obstruction_bound", "sl_reference"]
    }

    fn record(&self) -> Vec<String> {
        [
            self.s,
            self.c_multiple,
            self.c,
            self.delta,
            self.c_of_u,
            self.obstruction_bound,
            self.sl_reference,
        ]
        .map(fmt_num)
        .to_vec()
    }
}

/// Obstruction bound on the unit circle for each offset multiple and scale.
/// Rows are grouped by offset, then ordered by `s`.
pub fn illustration_b(model: &Mlp, s_values: &[f64], c_multiples: &[f64], orbit_points: usize) -> Result<Vec<ObstructionRow>> {
    let orbit = RegionSamples::unit_circle(orbit_points)?;
    let c_min = model.max_first_row_norm();
    let d = model.dim() as f64;
    let jobs: Vec<(f64, f64)> = c_multiples
        .iter()
        .flat_map(|&k| s_values.iter().map(move |&s| (k, s)))
        .collect();
    jobs.par_iter()
        .map(|&(k, s)| {
            let c = k * c_min;
            let m = model.with_offset(model.offset() + c)?.with_scale(s)?;
            let rep = analyze_measured(&m, &orbit)?;
            Ok(ObstructionRow {
                s,
                c_multiple: k,
                c,
                delta: rep.delta_threshold,
                c_of_u: rep.c_of_u,
                obstruction_bound: d * rep.c_of_u * TAU,
                sl_reference: 4.0 * PI,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Illustration C

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortraitSummaryRow {
    /// `exact` for the oscillator itself, otherwise `mlp`.
    pub panel: String,
    pub s: Option<f64>,
    pub delta: Option<f64>,
    /// `∫₀ᵀ Tr Df(γ(t)) dt` along the unit circle.
    pub ln_det: f64,
    pub det: f64,
    /// `det Ψ(T)` from the variational equation, as a cross-check.
    pub det_psi: f64,
}

impl CsvRow for PortraitSummaryRow {
    fn header() -> &'static [&'static str] {
        &["panel", "s", "delta", "ln_det", "det", "det_psi"]
    }

    fn record(&self) -> Vec<String> {
        vec![
            self.panel.clone(),
            opt_num(self.s),
            opt_num(self.delta),
            fmt_num(self.ln_det),
            fmt_num(self.det),
            fmt_num(self.det_psi),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub panel: String,
    pub s: Option<f64>,
    pub trajectory: usize,
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

impl CsvRow for TrajectoryRow {
    fn header() -> &'static [&'static str] {
        &["panel", "s", "trajectory", "t", "x", "y"]
    }

    fn record(&self) -> Vec<String> {
        vec![
            self.panel.clone(),
            opt_num(self.s),
            self.trajectory.to_string(),
            fmt_num(self.t),
            fmt_num(self.x),
            fmt_num(self.y),
        ]
    }
}

/// Twelve starts: six angles at each of the radii 0.3 and 1.7, the outer
/// ring rotated by half a step.
pub fn spiral_fan_starts() -> Vec<Vec<f64>> {
    let mut starts = Vec::with_capacity(12);
    for (ring, r) in [0.3_f64, 1.7].into_iter().enumerate() {
        for k in 0..6 {
            let theta = TAU * (k as f64 + 0.5 * ring as f64) / 6.0;
            starts.push(vec![r * theta.cos(), r * theta.sin()]);
        }
    }
    starts
}

const PORTRAIT_HORIZON: f64 = 2.0 * TAU;
const PORTRAIT_STEPS: usize = 400;

fn portrait(vf: &dyn VectorField, panel: &str, s: Option<f64>) -> Result<Vec<TrajectoryRow>> {
    let mut rows = Vec::new();
    for (i, x0) in spiral_fan_starts().iter().enumerate() {
        for (t, x) in integrate(vf, x0, (0.0, PORTRAIT_HORIZON), PORTRAIT_STEPS)? {
            rows.push(TrajectoryRow {
                panel: panel.to_string(),
                s,
                trajectory: i,
                t,
                x: x[0],
                y: x[1],
            });
        }
    }
    Ok(rows)
}

/// Phase-portrait trajectories and the Liouville integral along the unit
/// circle, for the exact oscillator and for `model` at each `s`.
pub fn illustration_c(
    model: &Mlp,
    s_values: &[f64],
    orbit_points: usize,
    steps: usize,
) -> Result<(Vec<PortraitSummaryRow>, Vec<TrajectoryRow>)> {
    let orbit = RegionSamples::unit_circle(orbit_points)?;
    let exact = transition_along(&StuartLandau, &sl_orbit, TAU, steps)?;
    let mut summary = vec![PortraitSummaryRow {
        panel: "exact".into(),
        s: None,
        delta: None,
        ln_det: exact.trace_integral,
        det: exact.trace_integral.exp(),
        det_psi: exact.det_transition,
    }];
    let mut trajectories = portrait(&StuartLandau, "exact", None)?;
    let per_s: Vec<(PortraitSummaryRow, Vec<TrajectoryRow>)> = s_values
        .par_iter()
        .map(|&s| {
            let m = model.with_scale(s)?;
            let rep = analyze_measured(&m, &orbit)?;
            let fr = transition_along(&m, &sl_orbit, TAU, steps)?;
            let row = PortraitSummaryRow {
                panel: "mlp".into(),
                s: Some(s),
                delta: Some(rep.delta_threshold),
                ln_det: fr.trace_integral,
                det: fr.trace_integral.exp(),
                det_psi: fr.det_transition,
            };
            Ok((row, portrait(&m, "mlp", Some(s))?))
        })
        .collect::<Result<_>>()?;
    for (row, traj) in per_s {
        summary.push(row);
        trajectories.extend(traj);
    }
    Ok((summary, trajectories))
}

// ---------------------------------------------------------------------------
// Table D

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableDRow {
    pub quantity: String,
    pub numerical: f64,
    pub exact: f64,
}

impl CsvRow for TableDRow {
    fn header() -> &'static [&'static str] {
        &["quantity", "numerical", "exact"]
    }

    fn record(&self) -> Vec<String> {
        vec![self.quantity.clone(), fmt_num(self.numerical), fmt_num(self.exact)]
    }
}

/// The Liouville identity for the exact oscillator, evaluated on
/// `orbit_points` equispaced points of the unit circle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableD {
    /// Mean of `Tr Df` over the sample points.
    pub trace_mean: f64,
    /// Largest `|Tr Df + 2|` over the sample points.
    pub trace_max_deviation: f64,
    /// Composite Simpson over the closed sample grid.
    pub trace_integral: f64,
    /// `det Ψ(T)` from the variational equation started at (1, 0).
    pub det: f64,
    pub abs_ln_det: f64,
    /// `sup ‖Df‖₂` over the sample points.
    pub c_of_u: f64,
    /// `d·C(U)·T`.
    pub bound: f64,
}

impl TableD {
    pub fn rows(&self) -> Vec<TableDRow> {
        let r = sl_reference();
        let row = |q: &str, n: f64, e: f64| TableDRow {
            quantity: q.into(),
            numerical: n,
            exact: e,
        };
        vec![
            row("trace", self.trace_mean, r.trace_on_cycle),
            row("trace_integral", self.trace_integral, r.ln_det),
            row("det", self.det, r.det),
            row("abs_ln_det", self.abs_ln_det, -r.ln_det),
            row("bound_dCT", self.bound, -r.ln_det),
        ]
    }
}

pub fn table_d(orbit_points: usize) -> Result<TableD> {
    if orbit_points < 2 {
        return Err(Error::InvalidInput("need at least 2 orbit points".into()));
    }
    let n = orbit_points;
    let h = TAU / n as f64;
    // n + 1 nodes close the loop for the quadrature.
    let traces: Vec<f64> = (0..=n)
        .map(|k| {
            let p = sl_orbit(k as f64 * h);
            sl_jacobian(p[0], p[1]).trace()
        })
        .collect();
    let samples = &traces[..n];
    let trace_mean = samples.iter().sum::<f64>() / n as f64;
    let trace_max_deviation = samples.iter().map(|t| (t + 2.0).abs()).fold(0.0, f64::max);
    let c_of_u = (0..n)
        .map(|k| {
            let p = sl_orbit(k as f64 * h);
            spectral_norm(&sl_jacobian(p[0], p[1]))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let fr = transition_matrix(&StuartLandau, &[1.0, 0.0], TAU, n)?;
    Ok(TableD {
        trace_mean,
        trace_max_deviation,
        trace_integral: simpson_uniform(h, &traces),
        det: fr.det_transition,
        abs_ln_det: fr.det_transition.ln().abs(),
        c_of_u,
        bound: 2.0 * c_of_u * TAU,
    })
}

// ---------------------------------------------------------------------------
// Illustration E

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedRow {
    pub s: f64,
    pub actual: f64,
    pub refined: f64,
    pub original: f64,
    /// original / refined.
    pub ratio: f64,
    pub delta: f64,
}

impl CsvRow for RefinedRow {
    fn header() -> &'static [&'static str] {
        &["s", "actual", "refined", "original", "ratio", "delta"]
    }

    fn record(&self) -> Vec<String> {
        [self.s, self.actual, self.refined, self.original, self.ratio, self.delta]
            .map(fmt_num)
            .to_vec()
    }
}

/// Actual, refined and original Jacobian bounds at one point across `s`.
pub fn illustration_e(model: &Mlp, s_values: &[f64], point: &[f64]) -> Result<Vec<RefinedRow>> {
    s_values
        .par_iter()
        .map(|&s| {
            let m = model.with_scale(s)?;
            let b = pointwise_jacobian_bound(&m, point)?;
            let delta = max_slopes(&m, point)?.into_iter().fold(0.0, f64::max);
            Ok(RefinedRow {
                s,
                actual: b.actual,
                refined: b.refined,
                original: b.original,
                ratio: b.ratio(),
                delta,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Illustration F and generic sweeps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierRow {
    pub s: f64,
    pub delta: f64,
    pub c_of_u: f64,
    pub c_tilde: Option<f64>,
    pub mu1_abs: f64,
    pub mu2_abs: f64,
    pub window_lo: f64,
    pub window_hi: f64,
    pub det: f64,
    pub trace_integral: f64,
    pub contained: bool,
}

impl CsvRow for MultiplierRow {
    fn header() -> &'static [&'static str] {
        &[
            "s",
            "delta",
            "c_of_u",
            "c_tilde",
            "mu1_abs",
            "mu2_abs",
            "window_lo",
            "window_hi",
            "det",
            "trace_integral",
            "contained",
        ]
    }

    fn record(&self) -> Vec<String> {
        vec![
            fmt_num(self.s),
            fmt_num(self.delta),
            fmt_num(self.c_of_u),
            opt_num(self.c_tilde),
            fmt_num(self.mu1_abs),
            fmt_num(self.mu2_abs),
            fmt_num(self.window_lo),
            fmt_num(self.window_hi),
            fmt_num(self.det),
            fmt_num(self.trace_integral),
            self.contained.to_string(),
        ]
    }
}

/// Relative slack on the window endpoints, matching the flow checks.
const WINDOW_REL_TOL: f64 = 1e-9;

/// Transition matrix along the unit circle and its Grönwall window per `s`.
pub fn multiplier_sweep(model: &Mlp, s_values: &[f64], orbit_points: usize, steps: usize) -> Result<Vec<MultiplierRow>> {
    if model.dim() != 2 {
        return Err(Error::Dimension("the reference orbit is planar".into()));
    }
    let orbit = RegionSamples::unit_circle(orbit_points)?;
    s_values
        .par_iter()
        .map(|&s| {
            let m = model.with_scale(s)?;
            let rep = analyze_measured(&m, &orbit)?;
            let fr = transition_along(&m, &sl_orbit, TAU, steps)?;
            let (lo, hi) = gronwall_window(rep.c_of_u, TAU);
            let moduli = fr.multipliers.moduli();
            let contained = moduli
                .iter()
                .all(|&mu| mu >= lo * (1.0 - WINDOW_REL_TOL) && mu <= hi * (1.0 + WINDOW_REL_TOL));
            Ok(MultiplierRow {
                s,
                delta: rep.delta_threshold,
                c_of_u: rep.c_of_u,
                c_tilde: rep.c_tilde_of_u,
                mu1_abs: moduli[0],
                mu2_abs: moduli[1],
                window_lo: lo,
                window_hi: hi,
                det: fr.det_transition,
                trace_integral: fr.trace_integral,
                contained,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Artifacts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub config: TrainConfig,
    pub final_mse: f64,
    pub constraint_violations_after_projection: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub experiment: Illustration,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub s_values: Vec<f64>,
    /// SHA-256 over the canonical config and the model weights.
    pub input_hash: String,
    pub training: Option<TrainingSummary>,
    pub files: Vec<FileRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub model: Option<Mlp>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes via a temporary sibling and a rename so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn load_weights(path: &Path) -> Result<Mlp> {
    Mlp::load(path).map_err(|e| Error::Config(format!("cannot load weights {}: {e}", path.display())))
}

fn obtain_model(which: Illustration, cfg: &ExperimentConfig) -> Result<Option<(Mlp, Option<TrainingSummary>)>> {
    let Some(default_train) = which.default_training() else {
        return Ok(None);
    };
    if let Some(path) = &cfg.weights {
        return Ok(Some((load_weights(path)?, None)));
    }
    let tc = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone().unwrap_or(default_train)
    };
    let report = train(&tc, &StuartLandau)?;
    let summary = TrainingSummary {
        config: tc,
        final_mse: report.final_mse,
        constraint_violations_after_projection: report.constraint_violations_after_projection,
    };
    Ok(Some((report.trained_model, Some(summary))))
}

/// Runs one illustration and writes its artifacts under `out_root/<name>/`.
pub fn run_experiment(which: Illustration, cfg: &ExperimentConfig, out_root: &Path) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let s_values = cfg.s_values_for(which);
    let model = obtain_model(which, cfg)?;
    let mlp = model.as_ref().map(|(m, _)| m);
    let need = || mlp.ok_or_else(|| Error::Config(format!("{which} needs a model")));

    let mut files: Vec<(String, String)> = Vec::new();
    match which {
        Illustration::IllustrationA => {
            let rows = illustration_a(need()?, &s_values, &cfg.eval_point)?;
            files.push(("jacobian_attenuation.csv".into(), to_csv(&rows)));
        }
        Illustration::IllustrationB => {
            let rows = illustration_b(need()?, &s_values, &cfg.c_offsets, cfg.orbit_points)?;
            files.push(("obstruction_sweep.csv".into(), to_csv(&rows)));
        }
        Illustration::IllustrationC => {
            let (summary, traj) = illustration_c(need()?, &s_values, cfg.orbit_points, cfg.steps)?;
            files.push(("summary.csv".into(), to_csv(&summary)));
            files.push(("trajectories.csv".into(), to_csv(&traj)));
        }
        Illustration::TableD => {
            let table = table_d(cfg.orbit_points)?;
            files.push(("table_d.csv".into(), to_csv(&table.rows())));
        }
        Illustration::IllustrationE => {
            let rows = illustration_e(need()?, &s_values, &cfg.eval_point)?;
            files.push(("refined_comparison.csv".into(), to_csv(&rows)));
        }
        Illustration::IllustrationF => {
            let rows = multiplier_sweep(need()?, &s_values, cfg.orbit_points, cfg.steps)?;
            files.push(("multiplier_window.csv".into(), to_csv(&rows)));
        }
    }
    let weights_json = match &model {
        Some((m, _)) => Some(m.to_json()?),
        None => None,
    };
    if let (Some(json), Some((_, Some(_)))) = (&weights_json, &model) {
        files.push(("model.json".into(), json.clone()));
    }

    let dir = out_root.join(which.name());
    let mut records = Vec::with_capacity(files.len());
    for (name, contents) in &files {
        write_atomic(&dir.join(name), contents.as_bytes())?;
        records.push(FileRecord {
            path: name.clone(),
            sha256: sha256_hex(contents.as_bytes()),
        });
    }
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(cfg)?);
    hasher.update(which.name().as_bytes());
    if let Some(json) = &weights_json {
        hasher.update(json.as_bytes());
    }
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        experiment: which,
        config: cfg.clone(),
        seed: cfg.seed,
        s_values,
        input_hash: hex::encode(hasher.finalize()),
        training: model.as_ref().and_then(|(_, t)| t.clone()),
        files: records,
    };
    write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(ExperimentOutput {
        dir,
        manifest,
        model: model.map(|(m, _)| m),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_mlp;
    use crate::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_endpoints_and_spacing() {
        let g = log_grid(1.0, 30.0, 30);
        assert_eq!(g.len(), 30);
        assert_eq!((g[0], g[29]), (1.0, 30.0));
        let r = g[1] / g[0];
        for w in g.windows(2) {
            assert!((w[1] / w[0] - r).abs() < 1e-12);
        }
        assert!(log_grid(1.0, 2.0, 0).is_empty());
        assert_eq!(log_grid(3.0, 5.0, 1), vec![3.0]);
    }

    #[test]
    fn number_formatting() {
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(1.0), "1");
        assert_eq!(fmt_num(-2.0), "-2");
        assert_eq!(fmt_num(0.5), "0.5");
        assert_eq!(fmt_num(-12.566370614359172), "-12.5663706");
        assert_eq!(fmt_num(3.487342356209e-6), "3.48734236e-6");
        assert_eq!(fmt_num(123456789.0), "123456789");
        assert_eq!(fmt_num(1.5e12), "1.5e12");
        assert_eq!(fmt_num(f64::NAN), "nan");
        assert_eq!(fmt_num(f64::NEG_INFINITY), "-inf");
        for v in [1.0 / 3.0, -7.123456789123e-9, 2.0f64.sqrt() * 1e20, 0.000123456789] {
            let back: f64 = fmt_num(v).parse().unwrap();
            assert!(((back - v) / v).abs() < 1e-8, "{v} -> {}", fmt_num(v));
        }
    }

    #[test]
    fn names_round_trip() {
        for which in Illustration::ALL {
            assert_eq!(which.name().parse::<Illustration>().unwrap(), which);
        }
        assert_eq!("d".parse::<Illustration>().unwrap(), Illustration::TableD);
        assert_eq!("E".parse::<Illustration>().unwrap(), Illustration::IllustrationE);
        assert!(matches!("table-z".parse::<Illustration>(), Err(Error::Config(_))));
    }

    #[test]
    fn table_d_values() {
        let t = table_d(1000).unwrap();
        assert!(t.trace_max_deviation < 1e-12);
        assert!((t.trace_integral + 4.0 * PI).abs() < 1e-10);
        assert!((t.det - (-4.0 * PI).exp()).abs() / t.det < 1e-6);
        assert!((t.bound - 30.34).abs() < 5e-3, "{}", t.bound);
        let rows = t.rows();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].quantity, "trace");
    }

    #[test]
    fn attenuation_bound_dominates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_mlp(&mut rng, &[2, 16, 2], Activation::Tanh, 1.0, 0.0);
        let rows = illustration_a(&m, &log_grid(1.0, 30.0, 12), &[0.8, 0.4]).unwrap();
        for r in &rows {
            assert!(r.bound >= r.actual_norm * (1.0 - 1e-12));
            assert!((r.c_w_factor / r.s - rows[0].c_w_factor).abs() < 1e-9 * r.c_w_factor);
        }
    }

    #[test]
    fn obstruction_rows_are_grouped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_mlp(&mut rng, &[2, 8, 2], Activation::Tanh, 1.0, 0.0);
        let rows = illustration_b(&m, &[1.0, 2.0, 3.0], &[0.0, 6.0], 200).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].c_multiple, 0.0);
        assert_eq!(rows[3].c_multiple, 6.0);
        assert_eq!(rows[4].s, 2.0);
        assert!((rows[3].c - 6.0 * m.max_first_row_norm()).abs() < 1e-12);
        for r in &rows {
            assert!((r.obstruction_bound - 2.0 * r.c_of_u * TAU).abs() <= 1e-12 * r.obstruction_bound.max(1.0));
        }
        // Large offsets push the orbit into saturation.
        assert!(rows[5].delta < rows[2].delta);
    }

    #[test]
    fn chain_holds_in_refined_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_mlp(&mut rng, &[2, 32, 2], Activation::Tanh, 1.0, 0.0);
        for r in illustration_e(&m, &TABLE_E_S, &[0.8, 0.4]).unwrap() {
            assert!(r.actual <= r.refined * (1.0 + 1e-12) && r.refined <= r.original * (1.0 + 1e-12));
            assert!((r.ratio - r.original / r.refined).abs() < 1e-12 * r.ratio);
        }
    }

    #[test]
    fn multiplier_windows_contain_moduli() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_mlp(&mut rng, &[2, 8, 2], Activation::Tanh, 1.0, 0.0);
        let rows = multiplier_sweep(&m, &[1.0, 3.0, 10.0], 200, 800).unwrap();
        for r in &rows {
            assert!(r.contained, "{r:?}");
            assert!((r.window_lo * r.window_hi - 1.0).abs() < 1e-9);
            assert!(r.mu1_abs >= r.mu2_abs);
        }
    }

    #[test]
    fn portrait_fans() {
        let starts = spiral_fan_starts();
        assert_eq!(starts.len(), 12);
        let radii: Vec<f64> = starts.iter().map(|p| p[0].hypot(p[1])).collect();
        assert!(radii[..6].iter().all(|r| (r - 0.3).abs() < 1e-12));
        assert!(radii[6..].iter().all(|r| (r - 1.7).abs() < 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_mlp(&mut rng, &[2, 8, 2], Activation::Tanh, 1.0, 0.0);
        let (summary, traj) = illustration_c(&m, &[1.0, 15.0], 200, 800).unwrap();
        assert_eq!(summary.len(), 3);
        assert_eq!(summary[0].panel, "exact");
        assert!((summary[0].ln_det + 4.0 * PI).abs() < 1e-6);
        assert_eq!(traj.len(), 3 * 12 * (PORTRAIT_STEPS + 1));
        // Exact trajectories approach the unit circle.
        let last: Vec<&TrajectoryRow> = traj.iter().filter(|r| r.panel == "exact" && r.t == PORTRAIT_HORIZON).collect();
        assert_eq!(last.len(), 12);
        assert!(last.iter().all(|r| (r.x.hypot(r.y) - 1.0).abs() < 0.05));
    }

    #[test]
    fn table_d_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(Illustration::TableD, &ExperimentConfig::default(), dir.path()).unwrap();
        let csv = fs::read_to_string(out.dir.join("table_d.csv")).unwrap();
        assert!(csv.starts_with("quantity,numerical,exact\n"));
        assert_eq!(csv.lines().count(), 6);
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(out.dir.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest, out.manifest);
        assert_eq!(manifest.files[0].sha256, sha256_hex(csv.as_bytes()));
        // Re-running is deterministic and overwrites in place.
        let again = run_experiment(Illustration::TableD, &ExperimentConfig::default(), dir.path()).unwrap();
        assert_eq!(again.manifest, out.manifest);
        assert!(!out.dir.join(".table_d.csv.tmp").exists());
    }

    #[test]
    fn missing_weights_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            weights: Some(dir.path().join("absent.json")),
            ..ExperimentConfig::default()
        };
        match run_experiment(Illustration::IllustrationE, &cfg, dir.path()) {
            Err(Error::Config(msg)) => assert!(msg.contains("absent.json")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn loaded_weights_drive_the_sweep() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_mlp(&mut rng, &[2, 8, 2], Activation::Tanh, 1.0, 0.0);
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let cfg = ExperimentConfig {
            weights: Some(path),
            s_values: Some(vec![1.0, 2.0]),
            ..ExperimentConfig::default()
        };
        let out = run_experiment(Illustration::IllustrationE, &cfg, dir.path()).unwrap();
        assert!(out.manifest.training.is_none());
        assert_eq!(out.manifest.files.len(), 1);
        let csv = fs::read_to_string(out.dir.join("refined_comparison.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "s,actual,refined,original,ratio,delta");
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn invalid_experiment_configs() {
        let bad = [
            ExperimentConfig { s_values: Some(vec![]), ..ExperimentConfig::default() },
            ExperimentConfig { s_values: Some(vec![-1.0]), ..ExperimentConfig::default() },
            ExperimentConfig { eval_point: vec![1.0], ..ExperimentConfig::default() },
            ExperimentConfig { steps: 0, ..ExperimentConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
