//! Fixed-step RK4 integration of a vector field and of its variational
//! equation `Ψ̇ = Df(γ(t)) Ψ`, `Ψ(0) = I`, plus the Floquet quantities
//! derived from the transition matrix `Ψ(T)`.
//!
//! The trace integral `∫ Tr Df(γ(t)) dt` is computed independently of `Ψ` by
//! composite Simpson quadrature on the RK4 grid, so comparing it against
//! `ln det Ψ(T)` checks the Liouville identity rather than restating it.

use serde::{Deserialize, Serialize};

use crate::benchmark::{sl_field, sl_jacobian, StuartLandau};
use crate::bounds::SaturationReport;
use crate::error::{Error, Result};
use crate::network::Mlp;
use crate::numerics::{determinant, eigenvalues, matmul, Matrix, Spectrum};

/// Autonomous field `x ↦ f(x)` on `R^d` with an analytic Jacobian.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn jacobian(&self, x: &[f64]) -> Result<Matrix>;
}

impl VectorField for Mlp {
    fn dim(&self) -> usize {
        Mlp::dim(self)
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        Mlp::eval(self, x)
    }

    fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        Ok(Mlp::jacobian(self, x)?.1)
    }
}

impl VectorField for StuartLandau {
    fn dim(&self) -> usize {
        2
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(2, x)?;
        let (fx, fy) = sl_field(x[0], x[1]);
        Ok(vec![fx, fy])
    }

    fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        check_dim(2, x)?;
        Ok(sl_jacobian(x[0], x[1]))
    }
}

/// `ẋ = A x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearField(pub Matrix);

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.0.rows()
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.0.mul_vec(x)
    }

    fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        check_dim(self.dim(), x)?;
        Ok(self.0.clone())
    }
}

/// `ẋ = 0` on `R^d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZeroField(pub usize);

impl VectorField for ZeroField {
    fn dim(&self) -> usize {
        self.0
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.0, x)?;
        Ok(vec![0.0; self.0])
    }

    fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        check_dim(self.0, x)?;
        Ok(Matrix::zeros(self.0, self.0))
    }
}

fn check_dim(d: usize, x: &[f64]) -> Result<()> {
    if x.len() == d {
        Ok(())
    } else {
        Err(Error::Dimension(format!("state of dimension {} for a field on R^{d}", x.len())))
    }
}

fn check_steps(steps: usize) -> Result<()> {
    if steps == 0 {
        Err(Error::InvalidInput("at least one integration step is required".into()))
    } else {
        Ok(())
    }
}

fn axpy(x: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect()
}

fn rk4_combine(x: &[f64], h: f64, k: [&[f64]; 4]) -> Vec<f64> {
    (0..x.len())
        .map(|i| x[i] + h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]))
        .collect()
}

pub type Trajectory = Vec<(f64, Vec<f64>)>;

/// Classical RK4 with `steps` equal steps over `t_span`.
pub fn integrate(vf: &dyn VectorField, x0: &[f64], t_span: (f64, f64), steps: usize) -> Result<Trajectory> {
    check_steps(steps)?;
    check_dim(vf.dim(), x0)?;
    let (t0, t1) = t_span;
    let h = (t1 - t0) / steps as f64;
    let mut out = Vec::with_capacity(steps + 1);
    let mut x = x0.to_vec();
    out.push((t0, x.clone()));
    for n in 0..steps {
        let t = t0 + n as f64 * h;
        let k1 = vf.eval(&x)?;
        let k2 = vf.eval(&axpy(&x, 0.5 * h, &k1))?;
        let k3 = vf.eval(&axpy(&x, 0.5 * h, &k2))?;
        let k4 = vf.eval(&axpy(&x, h, &k3))?;
        let next = rk4_combine(&x, h, [&k1, &k2, &k3, &k4]);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { last_valid_t: t });
        }
        x = next;
        let t_next = if n + 1 == steps { t1 } else { t0 + (n + 1) as f64 * h };
        out.push((t_next, x.clone()));
    }
    Ok(out)
}

/// Composite Simpson on a uniform grid; an odd interval count ends with a
/// Simpson 3/8 panel, and a single interval falls back to the trapezoid rule.
pub fn simpson_uniform(h: f64, y: &[f64]) -> f64 {
    let n = y.len().saturating_sub(1);
    match n {
        0 => 0.0,
        1 => 0.5 * h * (y[0] + y[1]),
        _ => {
            let even_end = if n.is_multiple_of(2) { n } else { n - 3 };
            let mut sum = 0.0;
            let mut i = 0;
            while i < even_end {
                sum += h / 3.0 * (y[i] + 4.0 * y[i + 1] + y[i + 2]);
                i += 2;
            }
            if n % 2 == 1 {
                let j = even_end;
                sum += 3.0 * h / 8.0 * (y[j] + 3.0 * y[j + 1] + 3.0 * y[j + 2] + y[j + 3]);
            }
            sum
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloquetResult {
    pub period_t: f64,
    pub steps: usize,
    pub transition_matrix: Matrix,
    pub det_transition: f64,
    /// `ln det Ψ(T)`; absent when the determinant is not positive.
    pub log_det: Option<f64>,
    pub trace_integral: f64,
    pub multipliers: Spectrum,
    /// `ln|μ_i| / T`, in multiplier order.
    pub exponents: Vec<f64>,
    /// `(e^{−C T}, e^{C T})` once a bound constant has been attached.
    pub window: Option<(f64, f64)>,
    /// State at `T` (the end of the integrated or prescribed curve).
    pub final_state: Vec<f64>,
}

impl FloquetResult {
    fn from_parts(period_t: f64, steps: usize, psi: Matrix, trace_integral: f64, final_state: Vec<f64>) -> Result<Self> {
        if !psi.is_finite() {
            return Err(Error::Divergence { last_valid_t: period_t });
        }
        let det_transition = determinant(&psi)?;
        let multipliers = eigenvalues(&psi)?;
        let exponents = multipliers
            .values()
            .iter()
            .map(|mu| mu.norm().ln() / period_t)
            .collect();
        Ok(Self {
            period_t,
            steps,
            log_det: (det_transition > 0.0).then(|| det_transition.ln()),
            det_transition,
            trace_integral,
            multipliers,
            exponents,
            window: None,
            final_state,
            transition_matrix: psi,
        })
    }

    /// Attach the Grönwall window `(e^{−C(U)T}, e^{C(U)T})`.
    pub fn with_window(mut self, report: &SaturationReport) -> Self {
        self.window = Some(gronwall_window(report.c_of_u, self.period_t));
        self
    }

    /// `|ln det Ψ(T) − ∫ Tr Df dt|`, or `None` if `det ≤ 0`.
    pub fn liouville_residual(&self) -> Option<f64> {
        self.log_det.map(|l| (l - self.trace_integral).abs())
    }
}

pub fn gronwall_window(c: f64, period: f64) -> (f64, f64) {
    ((-c * period).exp(), (c * period).exp())
}

/// Right-hand side of the joint system `(ẋ, Ψ̇) = (f(x), Df(x) Ψ)` at `x`.
fn variational_rhs(vf: &dyn VectorField, x: &[f64], psi: &Matrix) -> Result<(Vec<f64>, Matrix, f64)> {
    let jac = vf.jacobian(x)?;
    let tr = jac.trace();
    Ok((vf.eval(x)?, matmul(&jac, psi)?, tr))
}

fn mat_axpy(a: &Matrix, s: f64, b: &Matrix) -> Matrix {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x + s * y).collect();
    Matrix::from_raw(a.rows(), a.cols(), data)
}

fn mat_rk4(psi: &Matrix, h: f64, k: [&Matrix; 4]) -> Matrix {
    let data = rk4_combine(psi.as_slice(), h, [k[0].as_slice(), k[1].as_slice(), k[2].as_slice(), k[3].as_slice()]);
    Matrix::from_raw(psi.rows(), psi.cols(), data)
}

/// Integrates the state from `x0` together with `Ψ` over `[0, T]`.
pub fn transition_matrix(vf: &dyn VectorField, x0: &[f64], period: f64, steps: usize) -> Result<FloquetResult> {
    check_steps(steps)?;
    check_dim(vf.dim(), x0)?;
    let d = vf.dim();
    let h = period / steps as f64;
    let mut x = x0.to_vec();
    let mut psi = Matrix::identity(d);
    let mut traces = Vec::with_capacity(steps + 1);
    for n in 0..steps {
        let (k1, m1, tr) = variational_rhs(vf, &x, &psi)?;
        traces.push(tr);
        let (k2, m2, _) = variational_rhs(vf, &axpy(&x, 0.5 * h, &k1), &mat_axpy(&psi, 0.5 * h, &m1))?;
        let (k3, m3, _) = variational_rhs(vf, &axpy(&x, 0.5 * h, &k2), &mat_axpy(&psi, 0.5 * h, &m2))?;
        let (k4, m4, _) = variational_rhs(vf, &axpy(&x, h, &k3), &mat_axpy(&psi, h, &m3))?;
        let next = rk4_combine(&x, h, [&k1, &k2, &k3, &k4]);
        let next_psi = mat_rk4(&psi, h, [&m1, &m2, &m3, &m4]);
        if next.iter().any(|v| !v.is_finite()) || !next_psi.is_finite() {
            return Err(Error::Divergence {
                last_valid_t: n as f64 * h,
            });
        }
        x = next;
        psi = next_psi;
    }
    traces.push(vf.jacobian(&x)?.trace());
    FloquetResult::from_parts(period, steps, psi, simpson_uniform(h, &traces), x)
}

/// Transition matrix of the linearisation along a prescribed curve `γ(t)`,
/// which need not be an orbit of `vf`.
pub fn transition_along(
    vf: &dyn VectorField,
    curve: &dyn Fn(f64) -> Vec<f64>,
    period: f64,
    steps: usize,
) -> Result<FloquetResult> {
    check_steps(steps)?;
    let d = vf.dim();
    let h = period / steps as f64;
    let mut psi = Matrix::identity(d);
    let mut traces = Vec::with_capacity(steps + 1);
    let jac_at = |t: f64| -> Result<Matrix> {
        let p = curve(t);
        check_dim(d, &p)?;
        vf.jacobian(&p)
    };
    for n in 0..steps {
        let t = n as f64 * h;
        let j1 = jac_at(t)?;
        let jm = jac_at(t + 0.5 * h)?;
        let j4 = jac_at(t + h)?;
        traces.push(j1.trace());
        let m1 = matmul(&j1, &psi)?;
        let m2 = matmul(&jm, &mat_axpy(&psi, 0.5 * h, &m1))?;
        let m3 = matmul(&jm, &mat_axpy(&psi, 0.5 * h, &m2))?;
        let m4 = matmul(&j4, &mat_axpy(&psi, h, &m3))?;
        psi = mat_rk4(&psi, h, [&m1, &m2, &m3, &m4]);
        if !psi.is_finite() {
            return Err(Error::Divergence { last_valid_t: t });
        }
    }
    traces.push(jac_at(period)?.trace());
    FloquetResult::from_parts(period, steps, psi, simpson_uniform(h, &traces), curve(period))
}

struct Reversed<'a>(&'a dyn VectorField);

impl VectorField for Reversed<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.0.eval(x)?.into_iter().map(|v| -v).collect())
    }

    fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        Ok(self.0.jacobian(x)?.scaled(-1.0))
    }
}

/// `Ψ₋(T)` for the time-reversed system `ẏ = −f(y)`, `Ψ̇₋ = −Df(y) Ψ₋`.
pub fn reverse_transition(vf: &dyn VectorField, x0: &[f64], period: f64, steps: usize) -> Result<Matrix> {
    Ok(transition_matrix(&Reversed(vf), x0, period, steps)?.transition_matrix)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowCheck {
    pub c: f64,
    pub window: (f64, f64),
    /// `dim · C · T`, the bound on `|ln det Ψ(T)|`.
    pub det_bound: f64,
    pub det_ok: bool,
    pub per_multiplier_ok: Vec<bool>,
    pub exponents_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub abs_log_det: Option<f64>,
    pub det_bound_d: f64,
    /// `min(d, r) · C(U) · T` with `r` the narrowest hidden width.
    pub det_bound_r: f64,
    pub det_ok: bool,
    pub window: (f64, f64),
    pub per_multiplier_ok: Vec<bool>,
    /// `|λ_i| ≤ C(U)`.
    pub exponent_bound: f64,
    pub exponents_ok: bool,
    /// Same checks with `C̃(U)` in place of `C(U)`.
    pub refined: Option<WindowCheck>,
}

impl BoundCheck {
    pub fn all_ok(&self) -> bool {
        self.det_ok
            && self.exponents_ok
            && self.per_multiplier_ok.iter().all(|ok| *ok)
            && self
                .refined
                .as_ref()
                .is_none_or(|r| r.det_ok && r.exponents_ok && r.per_multiplier_ok.iter().all(|ok| *ok))
    }
}

/// Relative slack used for window containment.
pub const WINDOW_REL_TOL: f64 = 1e-9;

fn window_check(fr: &FloquetResult, c: f64, dim_factor: usize) -> WindowCheck {
    let t = fr.period_t;
    let window = gronwall_window(c, t);
    let det_bound = dim_factor as f64 * c * t;
    let det_ok = fr
        .log_det
        .is_some_and(|l| l.abs() <= det_bound * (1.0 + WINDOW_REL_TOL) + WINDOW_REL_TOL);
    let per_multiplier_ok = fr
        .multipliers
        .moduli()
        .into_iter()
        .map(|m| m >= window.0 * (1.0 - WINDOW_REL_TOL) && m <= window.1 * (1.0 + WINDOW_REL_TOL))
        .collect();
    let exponents_ok = fr
        .exponents
        .iter()
        .all(|l| l.abs() <= c * (1.0 + WINDOW_REL_TOL) + WINDOW_REL_TOL / t);
    WindowCheck {
        c,
        window,
        det_bound,
        det_ok,
        per_multiplier_ok,
        exponents_ok,
    }
}

/// Checks a transition matrix against a bound constant `c ≥ sup ‖Df‖` along
/// the curve, without a saturation report.
pub fn check_with_constant(fr: &FloquetResult, c: f64, c_tilde: Option<f64>, d: usize, r: usize) -> Result<BoundCheck> {
    if fr.transition_matrix.rows() != d {
        return Err(Error::Dimension(format!(
            "transition matrix is {}x{}, checked against d = {d}",
            fr.transition_matrix.rows(),
            fr.transition_matrix.cols()
        )));
    }
    let base = window_check(fr, c, d);
    let factor_r = d.min(r.max(1));
    let det_bound_r = factor_r as f64 * c * fr.period_t;
    let det_ok = fr
        .log_det
        .is_some_and(|l| l.abs() <= det_bound_r * (1.0 + WINDOW_REL_TOL) + WINDOW_REL_TOL);
    Ok(BoundCheck {
        abs_log_det: fr.log_det.map(f64::abs),
        det_bound_d: base.det_bound,
        det_bound_r,
        det_ok,
        window: base.window,
        per_multiplier_ok: base.per_multiplier_ok,
        exponent_bound: c,
        exponents_ok: base.exponents_ok,
        refined: c_tilde.map(|ct| window_check(fr, ct, factor_r)),
    })
}

/// Determinant, multiplier and exponent bounds implied by a saturation report.
pub fn check_floquet_bounds(fr: &FloquetResult, sr: &SaturationReport, d: usize) -> Result<BoundCheck> {
    check_with_constant(fr, sr.c_of_u, sr.c_tilde_of_u, d, sr.bottleneck_r)
}

/// `e^{c t} · dx0`, the Grönwall bound on trajectory separation.
pub fn flow_sensitivity_bound(c: f64, t: f64, dx0: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::Domain(format!("elapsed time must be ≥ 0, got {t}")));
    }
    Ok((c * t).exp() * dx0)
}

/// `e^{(ρ−1) C̃ T}` with `ρ = C/C̃`, i.e. `e^{(C − C̃) T}`.
pub fn amplification_ratio(c_of_u: f64, c_tilde: f64, period: f64) -> Result<f64> {
    if period < 0.0 {
        return Err(Error::Domain(format!("period must be ≥ 0, got {period}")));
    }
    if c_tilde < 0.0 || c_of_u < 0.0 {
        return Err(Error::Domain("bound constants must be nonnegative".into()));
    }
    Ok(((c_of_u - c_tilde) * period).exp())
}
