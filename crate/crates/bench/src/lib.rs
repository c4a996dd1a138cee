//! Fixtures shared by the benchmarks.

use floquet_lab::{Activation, Layer, Matrix, Mlp};

/// Dense matrix with deterministic, roughly uniform entries scaled by `1/sqrt(cols)`.
pub fn dense(rows: usize, cols: usize, salt: usize) -> Matrix {
    let scale = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|k| ((k * 7919 + salt * 104_729) as f64 * 0.618_033_988_7).sin() * scale)
        .collect();
    Matrix::new(rows, cols, data).expect("shape matches data")
}

/// Planar tanh network with the given hidden widths.
pub fn planar_mlp(hidden: &[usize], scale_s: f64) -> Mlp {
    let mut dims = vec![2];
    dims.extend_from_slice(hidden);
    dims.push(2);
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(k, w)| Layer::new(dense(w[1], w[0], k), vec![0.05; w[1]]).expect("consistent layer"))
        .collect();
    Mlp::new(layers, Activation::Tanh, scale_s, 0.0).expect("valid network")
}
