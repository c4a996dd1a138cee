//! Least-squares fitting of the MLP field to a target field.
//!
//! Full-batch Adam on `mean ‖f_θ(x_i) − y_i‖²` over points drawn uniformly
//! by area from an annulus. The bias-shift protocol adds a frozen offset `c`,
//! keeps `b_1 = 0` and projects the rows of `W_1` onto the ball of radius
//! `row_norm_cap` after every step, so that on the unit circle
//! `a_j ≥ s·(c − cap) > 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::Activation;
use crate::benchmark::StuartLandau;
use crate::bounds::annulus_point;
use crate::error::{Error, Result};
use crate::flow::VectorField;
use crate::network::{Layer, Mlp};
use crate::numerics::Matrix;

/// Samples per gradient chunk. Chunks are summed in index order, so the
/// result does not depend on how many threads rayon uses.
const CHUNK: usize = 256;

/// Slack allowed above the cap when counting violations.
const CAP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_width: usize,
    pub activation: Activation,
    pub scale_s: f64,
    pub offset_c: f64,
    /// Upper bound on the row norms of `W_1`; `None` disables projection.
    pub row_norm_cap: Option<f64>,
    pub annulus: (f64, f64),
    pub n_samples: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub freeze_b1: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_width: 32,
            activation: Activation::Tanh,
            scale_s: 1.0,
            offset_c: 0.0,
            row_norm_cap: None,
            annulus: (0.1, 2.0),
            n_samples: 4096,
            optimizer: AdamConfig::default(),
            seed: 0,
            freeze_b1: false,
        }
    }
}

impl TrainConfig {
    /// The constrained setup: 256 units, `c = 2.5`, cap `2.0`, `b_1 = 0`.
    ///
    /// Most units start near `tanh(c)`, so the output layer has to grow
    /// large; a higher learning rate gets there within a few thousand steps.
    pub fn protocol() -> Self {
        Self {
            hidden_width: 256,
            offset_c: 2.5,
            row_norm_cap: Some(2.0),
            n_samples: 1024,
            optimizer: AdamConfig {
                learning_rate: 3e-2,
                epochs: 3000,
                ..AdamConfig::default()
            },
            freeze_b1: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.hidden_width == 0 {
            return bad("hidden_width must be positive".into());
        }
        if !(self.scale_s > 0.0 && self.scale_s.is_finite()) {
            return bad(format!("scale_s must be positive, got {}", self.scale_s));
        }
        if !(self.offset_c >= 0.0 && self.offset_c.is_finite()) {
            return bad(format!("offset_c must be ≥ 0, got {}", self.offset_c));
        }
        let (r_min, r_max) = self.annulus;
        if !(r_min >= 0.0 && r_min < r_max && r_max.is_finite()) {
            return bad(format!("annulus needs 0 ≤ r_min < r_max, got ({r_min}, {r_max})"));
        }
        if let Some(cap) = self.row_norm_cap {
            if !(cap > 0.0 && cap.is_finite()) {
                return bad(format!("row_norm_cap must be positive, got {cap}"));
            }
            if self.offset_c > 0.0 && cap >= self.offset_c {
                return bad(format!(
                    "row_norm_cap {cap} must be below offset_c {} for the protocol",
                    self.offset_c
                ));
            }
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", o.learning_rate));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad(format!("betas must lie in [0, 1), got ({}, {})", o.beta1, o.beta2));
        }
        if o.epsilon <= 0.0 || !o.epsilon.is_finite() {
            return bad(format!("epsilon must be positive, got {}", o.epsilon));
        }
        if o.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub final_mse: f64,
    /// Loss before each optimizer step.
    pub loss_history: Vec<f64>,
    pub constraint_violations_after_projection: usize,
    pub trained_model: Mlp,
}

/// Gradients of the MSE with respect to every weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

fn sample_points(cfg: &TrainConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_samples)
        .map(|_| annulus_point(&mut rng, cfg.annulus.0, cfg.annulus.1))
        .collect()
}

fn dataset_for(cfg: &TrainConfig, target: &dyn VectorField) -> Result<Vec<Sample>> {
    if target.dim() != 2 {
        return Err(Error::Dimension(format!(
            "annulus sampling is planar, target has dimension {}",
            target.dim()
        )));
    }
    sample_points(cfg)
        .into_iter()
        .map(|x| {
            let y = target.eval(&x)?;
            Ok(Sample { x, y })
        })
        .collect()
}

/// Annulus points with Stuart–Landau targets, deterministic in `cfg.seed`.
pub fn sample_dataset(cfg: &TrainConfig) -> Vec<Sample> {
    dataset_for(cfg, &StuartLandau).expect("Stuart–Landau is planar and total")
}

/// Flat copy of the parameters used inside the training loop.
#[derive(Clone)]
struct Params {
    /// Per layer `(rows, cols, row-major W, b)`.
    layers: Vec<(usize, usize, Vec<f64>, Vec<f64>)>,
}

impl Params {
    fn from_mlp(m: &Mlp) -> Self {
        Self {
            layers: m
                .layers()
                .iter()
                .map(|l| {
                    (
                        l.weight.rows(),
                        l.weight.cols(),
                        l.weight.as_slice().to_vec(),
                        l.bias.clone(),
                    )
                })
                .collect(),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|(r, c, w, b)| (*r, *c, vec![0.0; w.len()], vec![0.0; b.len()]))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.2.iter_mut().zip(&b.2).for_each(|(x, y)| *x += y);
            a.3.iter_mut().zip(&b.3).for_each(|(x, y)| *x += y);
        }
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|(_, _, w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    fn to_mlp(&self, act: Activation, s: f64, c: f64) -> Result<Mlp> {
        let layers = self
            .layers
            .iter()
            .map(|(r, c, w, b)| Layer::new(Matrix::new(*r, *c, w.clone())?, b.clone()))
            .collect::<Result<Vec<_>>>()?;
        Mlp::new(layers, act, s, c)
    }
}

/// σ′ from `a` and `z = σ(a)`, using the cheap identities where they exist.
#[inline]
fn slope(act: Activation, a: f64, z: f64) -> f64 {
    match act {
        Activation::Tanh => 1.0 - z * z,
        Activation::Sigmoid => z * (1.0 - z),
        _ => act.deriv(a),
    }
}

/// Sum of squared residuals over `batch` and the gradient of that sum.
fn chunk_gradient(p: &Params, act: Activation, s: f64, c: f64, batch: &[Sample]) -> (f64, Params) {
    let n_layers = p.layers.len();
    let mut g = p.zeros_like();
    let mut loss = 0.0;
    // zs[k] is the output of layer k; deltas[k] the gradient w.r.t. it.
    let mut zs: Vec<Vec<f64>> = p.layers.iter().map(|l| vec![0.0; l.0]).collect();
    let mut slopes = zs.clone();
    let mut deltas = zs.clone();
    for sample in batch {
        for k in 0..n_layers {
            let (rows, cols, w, b) = &p.layers[k];
            let (done, rest) = zs.split_at_mut(k);
            let input: &[f64] = if k == 0 { &sample.x } else { &done[k - 1] };
            let out = &mut rest[0];
            let hidden = k + 1 < n_layers;
            for i in 0..*rows {
                let row = &w[i * cols..(i + 1) * cols];
                let mut dot = 0.0;
                for j in 0..*cols {
                    dot += row[j] * input[j];
                }
                if hidden {
                    let a = s * (dot + b[i] + c);
                    let z = act.eval(a);
                    out[i] = z;
                    slopes[k][i] = s * slope(act, a, z);
                } else {
                    out[i] = dot + b[i];
                }
            }
        }
        for (i, (f, y)) in zs[n_layers - 1].iter().zip(&sample.y).enumerate() {
            let r = f - y;
            loss += r * r;
            deltas[n_layers - 1][i] = 2.0 * r;
        }
        for k in (0..n_layers).rev() {
            let (rows, cols, w, _) = &p.layers[k];
            let (lower, upper) = deltas.split_at_mut(k);
            let delta = &mut upper[0];
            if k + 1 < n_layers {
                // Move from ∂/∂z_k to ∂/∂(W_k z + b_k).
                for (d, sl) in delta.iter_mut().zip(&slopes[k]) {
                    *d *= sl;
                }
            }
            let input: &[f64] = if k == 0 { &sample.x } else { &zs[k - 1] };
            let (_, _, gw, gb) = &mut g.layers[k];
            for i in 0..*rows {
                let d = delta[i];
                gb[i] += d;
                let grow = &mut gw[i * cols..(i + 1) * cols];
                for j in 0..*cols {
                    grow[j] += d * input[j];
                }
            }
            if k > 0 {
                let next = &mut lower[k - 1];
                next.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..*rows {
                    let d = delta[i];
                    let row = &w[i * cols..(i + 1) * cols];
                    for j in 0..*cols {
                        next[j] += d * row[j];
                    }
                }
            }
        }
    }
    (loss, g)
}

/// MSE and its gradient, summed chunk by chunk in a fixed order.
fn full_gradient(p: &Params, act: Activation, s: f64, c: f64, data: &[Sample]) -> (f64, Params) {
    let parts: Vec<(f64, Params)> = data
        .par_chunks(CHUNK)
        .map(|chunk| chunk_gradient(p, act, s, c, chunk))
        .collect();
    let mut total = p.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_assign(g);
    }
    let n = data.len().max(1) as f64;
    total.values_mut().for_each(|v| *v /= n);
    (loss / n, total)
}

fn check_batch(m: &Mlp, batch: &[Sample]) -> Result<()> {
    let d = m.dim();
    if let Some(bad) = batch.iter().find(|s| s.x.len() != d || s.y.len() != d) {
        return Err(Error::Dimension(format!(
            "sample of dimensions ({}, {}) for a network on R^{d}",
            bad.x.len(),
            bad.y.len()
        )));
    }
    Ok(())
}

/// Mean squared residual of `m` on `batch`.
pub fn mse(m: &Mlp, batch: &[Sample]) -> Result<f64> {
    check_batch(m, batch)?;
    let p = Params::from_mlp(m);
    Ok(full_gradient(&p, m.activation(), m.scale(), m.offset(), batch).0)
}

/// Exact reverse-mode gradients of the MSE with respect to all weights and
/// biases, propagated through `a_k = s·(W_k z + b_k + c·1)`.
pub fn parameter_gradients(m: &Mlp, batch: &[Sample]) -> Result<Gradients> {
    check_batch(m, batch)?;
    let p = Params::from_mlp(m);
    let (_, g) = full_gradient(&p, m.activation(), m.scale(), m.offset(), batch);
    let mut weights = Vec::with_capacity(g.layers.len());
    let mut biases = Vec::with_capacity(g.layers.len());
    for (r, c, w, b) in g.layers {
        weights.push(Matrix::new(r, c, w)?);
        biases.push(b);
    }
    Ok(Gradients { weights, biases })
}

/// Uniform `[−1/√fan_in, 1/√fan_in]` for every weight and bias.
fn init_params(cfg: &TrainConfig, rng: &mut impl Rng) -> Params {
    let dims = [2, cfg.hidden_width, 2];
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let weight = (0..w[0] * w[1]).map(|_| rng.gen_range(-bound..=bound)).collect();
            let mut bias: Vec<f64> = (0..w[1]).map(|_| rng.gen_range(-bound..=bound)).collect();
            if k == 0 && cfg.freeze_b1 {
                bias.iter_mut().for_each(|b| *b = 0.0);
            }
            (w[1], w[0], weight, bias)
        })
        .collect();
    Params { layers }
}

/// Rescales rows of `W_1` longer than `cap`; returns how many still exceed
/// `cap + 1e−12` afterwards.
fn project_rows(p: &mut Params, cap: f64) -> usize {
    let (rows, cols, w, _) = &mut p.layers[0];
    let mut violations = 0;
    for i in 0..*rows {
        let row = &mut w[i * *cols..(i + 1) * *cols];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > cap {
            let f = cap / norm;
            row.iter_mut().for_each(|v| *v *= f);
            let after = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if after > cap + CAP_TOL {
                violations += 1;
            }
        }
    }
    violations
}

/// Fits a one-hidden-layer net to `target` on the annulus dataset.
pub fn train(cfg: &TrainConfig, target: &dyn VectorField) -> Result<TrainReport> {
    cfg.validate()?;
    let data = dataset_for(cfg, target)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(1);
    let mut p = init_params(cfg, &mut init_rng);
    let (act, s, c) = (cfg.activation, cfg.scale_s, cfg.offset_c);
    let opt = cfg.optimizer;

    let mut violations = match cfg.row_norm_cap {
        Some(cap) => project_rows(&mut p, cap),
        None => 0,
    };
    let mut m1 = p.zeros_like();
    let mut m2 = p.zeros_like();
    let mut loss_history = Vec::with_capacity(opt.epochs);
    for epoch in 0..opt.epochs {
        let (loss, mut g) = full_gradient(&p, act, s, c, &data);
        if !loss.is_finite() {
            return Err(Error::TrainingDivergence { epoch });
        }
        loss_history.push(loss);
        if cfg.freeze_b1 {
            g.layers[0].3.iter_mut().for_each(|v| *v = 0.0);
        }
        let t = (epoch + 1) as i32;
        let c1 = 1.0 - opt.beta1.powi(t);
        let c2 = 1.0 - opt.beta2.powi(t);
        let updates = p
            .values_mut()
            .zip(m1.values_mut())
            .zip(m2.values_mut())
            .zip(g.values_mut());
        for (((theta, m), v), gi) in updates {
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * *gi;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * *gi * *gi;
            *theta -= opt.learning_rate * (*m / c1) / ((*v / c2).sqrt() + opt.epsilon);
        }
        if cfg.freeze_b1 {
            p.layers[0].3.iter_mut().for_each(|v| *v = 0.0);
        }
        if let Some(cap) = cfg.row_norm_cap {
            violations += project_rows(&mut p, cap);
        }
    }

    let trained = p.to_mlp(act, s, c)?;
    let trained = trained.absorb_offset();
    let final_mse = mse(&trained, &data)?;
    if !final_mse.is_finite() {
        return Err(Error::TrainingDivergence { epoch: opt.epochs });
    }
    Ok(TrainReport {
        final_mse,
        loss_history,
        constraint_violations_after_projection: violations,
        trained_model: trained,
    })
}
