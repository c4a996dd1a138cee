//! Scalar activations with exact derivatives and their global slope bounds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Supremum of SiLU′, attained at x ≈ 2.39936.
pub const SILU_MAX_SLOPE: f64 = 1.099_839_320_128_867;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Silu,
    Relu,
    Identity,
}

impl Activation {
    pub const ALL: [Activation; 5] = [
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Silu,
        Activation::Relu,
        Activation::Identity,
    ];

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Silu => x * sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => sech2(x),
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            // Subgradient at 0 is taken as 0.
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    /// `Λ_σ = sup |σ′|`.
    pub fn lambda_sigma(self) -> f64 {
        match self {
            Activation::Tanh | Activation::Relu | Activation::Identity => 1.0,
            Activation::Sigmoid => 0.25,
            Activation::Silu => SILU_MAX_SLOPE,
        }
    }

    /// Whether σ′ > 0 everywhere, so the derivative diagonals admit square roots.
    pub fn strictly_increasing(self) -> bool {
        matches!(self, Activation::Tanh | Activation::Sigmoid | Activation::Identity)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Silu => "silu",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown activation '{s}'")))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// sech²(x) written in terms of e^{−2|x|} so it keeps full relative
/// precision deep in the tails.
pub fn sech2(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    4.0 * e / ((1.0 + e) * (1.0 + e))
}

/// tanh′ bound on pre-activations of magnitude at least `r`: sech²(r).
pub fn saturation_radius_delta(activation: Activation, r: f64) -> Result<f64> {
    if activation != Activation::Tanh {
        return Err(Error::Unsupported(format!(
            "saturation radius is defined for tanh only, got {activation}"
        )));
    }
    if r < 0.0 || !r.is_finite() {
        return Err(Error::Domain(format!("saturation radius must be finite and ≥ 0, got {r}")));
    }
    Ok(sech2(r))
}
