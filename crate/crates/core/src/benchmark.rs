//! The Stuart–Landau oscillator
//!
//! ```text
//! ẋ = x − y − x(x² + y²)
//! ẏ = x + y − y(x² + y²)
//! ```
//!
//! Its limit cycle is the unit circle with period 2π, traversed
//! counter-clockwise, and `Tr Df = 2 − 4(x² + y²)` equals −2 on it.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;

pub fn sl_field(x: f64, y: f64) -> (f64, f64) {
    let r2 = x * x + y * y;
    (x - y - x * r2, x + y - y * r2)
}

pub fn sl_jacobian(x: f64, y: f64) -> Matrix {
    Matrix::from_raw(
        2,
        2,
        vec![
            1.0 - 3.0 * x * x - y * y,
            -1.0 - 2.0 * x * y,
            1.0 - 2.0 * x * y,
            1.0 - x * x - 3.0 * y * y,
        ],
    )
}

/// Point of the limit cycle at time `t` when started from (1, 0).
pub fn sl_orbit(t: f64) -> Vec<f64> {
    vec![t.cos(), t.sin()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StuartLandau;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlReference {
    pub period: f64,
    pub ln_det: f64,
    pub det: f64,
    /// Constant trace of the Jacobian along the cycle.
    pub trace_on_cycle: f64,
}

/// Exact monodromy constants of the unit-circle cycle.
pub fn sl_reference() -> SlReference {
    SlReference {
        period: TAU,
        ln_det: -4.0 * PI,
        det: (-4.0 * PI).exp(),
        trace_on_cycle: -2.0,
    }
}
