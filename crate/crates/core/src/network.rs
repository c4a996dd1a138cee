//! The MLP vector field
//!
//! ```text
//! f(x) = W_L z_{L-1} + b_L,   z_k = σ(a_k),   a_k = s·(W_k z_{k-1} + b_k + c·1)
//! ```
//!
//! with `z_0 = x`. The pre-activation scale `s` and the non-trainable offset
//! `c` apply to every hidden layer; the output layer is plain affine. By the
//! chain rule each hidden layer contributes `s·σ′(a_k)` to the input Jacobian
//! `Df(x) = W_L D_{L-1} W_{L-1} ⋯ D_1 W_1`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activations::Activation;
use crate::error::{Error, Result};
use crate::numerics::{matmul, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::Dimension(format!(
                "bias of length {} for a {}x{} weight",
                bias.len(),
                weight.rows(),
                weight.cols()
            )));
        }
        if bias.iter().any(|b| !b.is_finite()) || !weight.is_finite() {
            return Err(Error::InvalidInput("non-finite layer parameter".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    activation: Activation,
    scale_s: f64,
    offset_c: f64,
}

/// Intermediate vectors of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `a_k` for each hidden layer.
    pub pre_activations: Vec<Vec<f64>>,
    /// `z_k = σ(a_k)` for each hidden layer.
    pub post_activations: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

/// The factor sequence of `Df(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianFactors {
    /// `W_1, …, W_L`.
    pub weights: Vec<Matrix>,
    /// Per hidden layer, the diagonal `s·σ′(a_k(x))`.
    pub diags: Vec<Vec<f64>>,
}

impl JacobianFactors {
    /// `W_L D_{L-1} W_{L-1} ⋯ D_1 W_1`, accumulated right to left.
    pub fn assemble(&self) -> Result<Matrix> {
        let (first, rest) = self
            .weights
            .split_first()
            .ok_or_else(|| Error::InvalidInput("empty factor sequence".into()))?;
        let mut acc = first.clone();
        for (w, d) in rest.iter().zip(&self.diags) {
            acc = matmul(w, &acc.scale_rows(d)?)?;
        }
        Ok(acc)
    }
}

impl Mlp {
    pub fn new(layers: Vec<Layer>, activation: Activation, scale_s: f64, offset_c: f64) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::InvalidInput(
                "an MLP vector field needs at least one hidden layer".into(),
            ));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Dimension(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    k + 1,
                    pair[0].out_dim(),
                    k + 2,
                    pair[1].in_dim()
                )));
            }
        }
        let d_in = layers[0].in_dim();
        let d_out = layers[layers.len() - 1].out_dim();
        if d_in != d_out {
            return Err(Error::Dimension(format!(
                "vector field must map R^d to R^d, got {d_in} -> {d_out}"
            )));
        }
        if scale_s <= 0.0 || !scale_s.is_finite() {
            return Err(Error::InvalidInput(format!("scale s must be positive, got {scale_s}")));
        }
        if offset_c < 0.0 || !offset_c.is_finite() {
            return Err(Error::InvalidInput(format!("offset c must be ≥ 0, got {offset_c}")));
        }
        Ok(Self {
            layers,
            activation,
            scale_s,
            offset_c,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn scale(&self) -> f64 {
        self.scale_s
    }

    pub fn offset(&self) -> f64 {
        self.offset_c
    }

    /// State dimension d.
    pub fn dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// `[d_0, d_1, …, d_L]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Layer::out_dim)
            .collect()
    }

    pub fn num_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    /// Same weights at a different pre-activation scale.
    pub fn with_scale(&self, scale_s: f64) -> Result<Self> {
        Self::new(self.layers.clone(), self.activation, scale_s, self.offset_c)
    }

    pub fn with_offset(&self, offset_c: f64) -> Result<Self> {
        Self::new(self.layers.clone(), self.activation, self.scale_s, offset_c)
    }

    pub fn with_activation(&self, activation: Activation) -> Self {
        Self {
            activation,
            ..self.clone()
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "state has dimension {}, network expects {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn hidden_pre_activation(&self, layer: &Layer, z: &[f64]) -> Vec<f64> {
        let wz = layer.weight.mul_vec(z).expect("dimensions checked at construction");
        wz.iter()
            .zip(&layer.bias)
            .map(|(v, b)| self.scale_s * (v + b + self.offset_c))
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let (hidden, last) = self.layers.split_at(self.layers.len() - 1);
        let mut pre_activations = Vec::with_capacity(hidden.len());
        let mut post_activations = Vec::with_capacity(hidden.len());
        let mut z = x.to_vec();
        for layer in hidden {
            let a = self.hidden_pre_activation(layer, &z);
            z = a.iter().map(|&v| self.activation.eval(v)).collect();
            pre_activations.push(a);
            post_activations.push(z.clone());
        }
        let out = &last[0];
        let output = out
            .weight
            .mul_vec(&z)?
            .into_iter()
            .zip(&out.bias)
            .map(|(v, b)| v + b)
            .collect();
        Ok(ForwardTrace {
            pre_activations,
            post_activations,
            output,
        })
    }

    /// `f(x)` only.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.output)
    }

    /// Factor sequence `(W_ℓ, s·σ′(a_k))` at `x` from an existing trace.
    pub fn jacobian_factors(&self, trace: &ForwardTrace) -> JacobianFactors {
        JacobianFactors {
            weights: self.layers.iter().map(|l| l.weight.clone()).collect(),
            diags: trace
                .pre_activations
                .iter()
                .map(|a| a.iter().map(|&v| self.scale_s * self.activation.deriv(v)).collect())
                .collect(),
        }
    }

    /// Input Jacobian at `x`, both factored and assembled.
    pub fn jacobian(&self, x: &[f64]) -> Result<(JacobianFactors, Matrix)> {
        let trace = self.forward(x)?;
        let factors = self.jacobian_factors(&trace);
        let assembled = factors.assemble()?;
        Ok((factors, assembled))
    }

    /// `div f(x) = Tr(Df(x))`.
    pub fn trace_divergence(&self, x: &[f64]) -> Result<f64> {
        Ok(self.jacobian(x)?.1.trace())
    }

    /// Folds the offset into the hidden biases: `b_k ← b_k + c·1`, `c ← 0`.
    pub fn absorb_offset(&self) -> Self {
        if self.offset_c == 0.0 {
            return self.clone();
        }
        let c = self.offset_c;
        let n = self.layers.len();
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(k, l)| {
                if k + 1 < n {
                    Layer {
                        weight: l.weight.clone(),
                        bias: l.bias.iter().map(|b| b + c).collect(),
                    }
                } else {
                    l.clone()
                }
            })
            .collect();
        Self {
            layers,
            offset_c: 0.0,
            ..self.clone()
        }
    }

    /// `max_j ‖W_{1,j·}‖₂`, the largest row norm of the first weight matrix.
    pub fn max_first_row_norm(&self) -> f64 {
        let w = &self.layers[0].weight;
        (0..w.rows())
            .map(|i| w.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn to_weight_file(&self) -> WeightFile {
        WeightFile {
            dims: self.dims(),
            activation: self.activation,
            scale_s: self.scale_s,
            offset_c: self.offset_c,
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    w: l.weight.as_slice().to_vec(),
                    b: l.bias.clone(),
                })
                .collect(),
        }
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self> {
        if file.dims.len() != file.layers.len() + 1 {
            return Err(Error::Dimension(format!(
                "dims lists {} sizes for {} layers",
                file.dims.len(),
                file.layers.len()
            )));
        }
        let layers = file
            .layers
            .iter()
            .enumerate()
            .map(|(k, rec)| {
                let w = Matrix::new(file.dims[k + 1], file.dims[k], rec.w.clone())?;
                Layer::new(w, rec.b.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, file.activation, file.scale_s, file.offset_c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_weight_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_weight_file(&serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// On-disk weight format. `W` is row-major with shape `dims[k+1] × dims[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFile {
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub scale_s: f64,
    pub offset_c: f64,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    #[serde(rename = "W")]
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_mlp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_net(act: Activation) -> Mlp {
        Mlp::new(
            vec![
                Layer::new(Matrix::identity(2), vec![0.0; 2]).unwrap(),
                Layer::new(Matrix::identity(2), vec![0.0; 2]).unwrap(),
            ],
            act,
            1.0,
            0.0,
        )
        .unwrap()
    }

    /// Independent straight-line evaluation of W2 σ(s(W1 x + b1 + c)) + b2.
    fn straight_line(m: &Mlp, x: &[f64]) -> Vec<f64> {
        let l = m.layers();
        let (w1, b1, w2, b2) = (&l[0].weight, &l[0].bias, &l[1].weight, &l[1].bias);
        let mut h = vec![0.0; w1.rows()];
        for i in 0..w1.rows() {
            let mut acc = b1[i] + m.offset();
            for j in 0..w1.cols() {
                acc += w1[(i, j)] * x[j];
            }
            h[i] = m.activation().eval(m.scale() * acc);
        }
        (0..w2.rows())
            .map(|i| b2[i] + (0..w2.cols()).map(|j| w2[(i, j)] * h[j]).sum::<f64>())
            .collect()
    }

    fn fd_jacobian(m: &Mlp, x: &[f64], h: f64) -> Matrix {
        let d = x.len();
        let mut j = Matrix::zeros(d, d);
        for col in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[col] += h;
            xm[col] -= h;
            let fp = m.eval(&xp).unwrap();
            let fm = m.eval(&xm).unwrap();
            for row in 0..d {
                j[(row, col)] = (fp[row] - fm[row]) / (2.0 * h);
            }
        }
        j
    }

    #[test]
    fn forward_trivial_net() {
        let m = identity_net(Activation::Tanh);
        let t = m.forward(&[0.0, 0.0]).unwrap();
        assert_eq!(t.output, vec![0.0, 0.0]);
        assert_eq!(t.pre_activations[0], vec![0.0, 0.0]);
        assert!(matches!(m.forward(&[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn identity_activation_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_mlp(&mut rng, &[2, 5, 3, 2], Activation::Identity, 1.0, 0.0);
        let l = m.layers();
        let x = [0.3, -0.7];
        let mut z = x.to_vec();
        for layer in l {
            z = layer
                .weight
                .mul_vec(&z)
                .unwrap()
                .iter()
                .zip(&layer.bias)
                .map(|(a, b)| a + b)
                .collect();
        }
        let out = m.eval(&x).unwrap();
        for (a, b) in out.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
        let product = l.iter().skip(1).fold(l[0].weight.clone(), |acc, layer| matmul(&layer.weight, &acc).unwrap());
        let (_, j) = m.jacobian(&[5.0, 1.0]).unwrap();
        assert!(j.sub(&product).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (s, c) in [(1.0, 0.0), (3.0, 0.0), (2.0, 2.5)] {
            let m = random_mlp(&mut rng, &[2, 16, 2], Activation::Tanh, s, c);
            let got = m.eval(&[0.8, 0.4]).unwrap();
            let want = straight_line(&m, &[0.8, 0.4]);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jacobian_at_origin_is_output_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w2 = Matrix::new(2, 2, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let m = Mlp::new(
            vec![
                Layer::new(Matrix::identity(2), vec![0.0; 2]).unwrap(),
                Layer::new(w2.clone(), vec![0.3, 0.1]).unwrap(),
            ],
            Activation::Tanh,
            1.0,
            0.0,
        )
        .unwrap();
        let (_, j) = m.jacobian(&[0.0, 0.0]).unwrap();
        assert_eq!(j, w2);
    }

    #[test]
    fn jacobian_matches_finite_differences_on_wide_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let m = random_mlp(&mut rng, &[2, 32, 2], Activation::Tanh, 1.0, 0.0);
        let (_, j) = m.jacobian(&[0.8, 0.4]).unwrap();
        let fd = fd_jacobian(&m, &[0.8, 0.4], 1e-5);
        assert!(j.sub(&fd).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn jacobian_matches_finite_differences_random_nets() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let depth = rng.gen_range(1..=4);
            let d = rng.gen_range(1..=3);
            let mut dims = vec![d];
            for _ in 0..depth {
                dims.push(rng.gen_range(1..=16));
            }
            dims.push(d);
            let act = [Activation::Tanh, Activation::Sigmoid, Activation::Silu][rng.gen_range(0..3)];
            let s = rng.gen_range(0.5..2.0);
            let m = random_mlp(&mut rng, &dims, act, s, 0.0);
            for _ in 0..10 {
                let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let (factors, j) = m.jacobian(&x).unwrap();
                let fd = fd_jacobian(&m, &x, 1e-5);
                assert!(j.sub(&fd).unwrap().max_abs() < 1e-6);
                assert!(factors.assemble().unwrap().sub(&j).unwrap().max_abs() <= 1e-14);
                let bound = m.activation().lambda_sigma() * m.scale();
                assert!(factors.diags.iter().flatten().all(|v| v.abs() <= bound + 1e-12));
            }
        }
    }

    #[test]
    fn trace_divergence_cases() {
        let m = Mlp::new(
            vec![
                Layer::new(Matrix::identity(2), vec![0.0; 2]).unwrap(),
                Layer::new(Matrix::from_diag(&[-1.0, -1.0]), vec![0.0; 2]).unwrap(),
            ],
            Activation::Identity,
            1.0,
            0.0,
        )
        .unwrap();
        assert_eq!(m.trace_divergence(&[0.4, 0.2]).unwrap(), -2.0);

        let zero = Mlp::new(
            vec![
                Layer::new(Matrix::zeros(4, 2), vec![0.1; 4]).unwrap(),
                Layer::new(Matrix::zeros(2, 4), vec![0.0; 2]).unwrap(),
            ],
            Activation::Tanh,
            1.0,
            0.0,
        )
        .unwrap();
        assert_eq!(zero.trace_divergence(&[1.0, 1.0]).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_mlp(&mut rng, &[2, 8, 8, 2], Activation::Tanh, 1.5, 0.0);
        for _ in 0..20 {
            let x = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
            let fd = fd_jacobian(&m, &x, 1e-5);
            assert!((m.trace_divergence(&x).unwrap() - fd.trace()).abs() < 1e-6);
        }
    }

    #[test]
    fn absorb_offset_preserves_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let plain = random_mlp(&mut rng, &[2, 8, 2], Activation::Tanh, 1.0, 0.0);
        assert_eq!(plain.absorb_offset(), plain);

        let m = random_mlp(&mut rng, &[2, 16, 16, 2], Activation::Tanh, 1.7, 2.5);
        let absorbed = m.absorb_offset();
        assert_eq!(absorbed.offset(), 0.0);
        assert_eq!(absorbed.absorb_offset(), absorbed);
        for _ in 0..100 {
            let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let a = m.eval(&x).unwrap();
            let b = absorbed.eval(&x).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn scale_covariance_of_pre_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_mlp(&mut rng, &[2, 6, 2], Activation::Tanh, 1.0, 0.5);
        let x = [0.2, -0.9];
        let base = m.forward(&x).unwrap();
        for t in [0.5, 3.0, 12.0] {
            let scaled = m.with_scale(t).unwrap().forward(&x).unwrap();
            for (a, b) in scaled.pre_activations[0].iter().zip(&base.pre_activations[0]) {
                assert!((a - t * b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn rejects_malformed_networks() {
        let l1 = Layer::new(Matrix::zeros(3, 2), vec![0.0; 3]).unwrap();
        let bad = Layer::new(Matrix::zeros(2, 4), vec![0.0; 2]).unwrap();
        assert!(matches!(
            Mlp::new(vec![l1.clone(), bad], Activation::Tanh, 1.0, 0.0),
            Err(Error::Dimension(_))
        ));
        let l2 = Layer::new(Matrix::zeros(3, 3), vec![0.0; 3]).unwrap();
        assert!(Mlp::new(vec![l1.clone(), l2], Activation::Tanh, 1.0, 0.0).is_err());
        let l2 = Layer::new(Matrix::zeros(2, 3), vec![0.0; 2]).unwrap();
        assert!(Mlp::new(vec![l1.clone(), l2.clone()], Activation::Tanh, 0.0, 0.0).is_err());
        assert!(Mlp::new(vec![l1, l2], Activation::Tanh, 1.0, -1.0).is_err());
        assert!(Layer::new(Matrix::zeros(2, 2), vec![0.0]).is_err());
    }

    #[test]
    fn weight_file_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let m = random_mlp(&mut rng, &[2, 7, 5, 2], Activation::Sigmoid, 0.37, 1.25);
        let first = m.to_json().unwrap();
        let back = Mlp::from_json(&first).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json().unwrap(), first);
        let v: serde_json::Value = serde_json::from_str(&first).unwrap();
        assert_eq!(v["dims"], serde_json::json!([2, 7, 5, 2]));
        assert_eq!(v["activation"], "sigmoid");
        assert!(v["layers"][0]["W"].is_array());
    }
}
