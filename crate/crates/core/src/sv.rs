//! Stochastic-volatility dynamics.
//!
//! Error log-volatilities follow a stationary AR(1) around `nu`; latent
//! log-volatilities follow a VAR(1) with diagonal persistence and innovation
//! covariance, which decouples into `q` independent AR(1) processes.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DppcaError, Result};
use crate::linalg::{ln_normal_pdf, std_normal};

/// Persistence values within this distance of ±1 are treated as non-stationary.
pub const STATIONARITY_TOL: f64 = 1e-12;

pub fn check_stationary(phi: f64) -> Result<()> {
    if phi.is_finite() && phi.abs() < 1.0 - STATIONARITY_TOL {
        Ok(())
    } else {
        Err(DppcaError::NonStationary { phi })
    }
}

/// `1 - φ²` without cancellation near |φ| = 1.
pub fn one_minus_phi_sq(phi: f64) -> f64 {
    (1.0 - phi) * (1.0 + phi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvScalarParams {
    pub nu: f64,
    pub phi: f64,
    pub v2: f64,
}

impl SvScalarParams {
    pub fn validate(&self) -> Result<()> {
        check_stationary(self.phi)?;
        if !(self.v2 > 0.0 && self.v2.is_finite()) {
            return Err(DppcaError::Invalid(format!("innovation variance {} must be positive", self.v2)));
        }
        if !self.nu.is_finite() {
            return Err(DppcaError::Invalid("AR center must be finite".into()));
        }
        Ok(())
    }

    pub fn stationary_var(&self) -> f64 {
        self.v2 / one_minus_phi_sq(self.phi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvVectorParams {
    pub mu: Vec<f64>,
    /// Diagonal of the persistence matrix.
    pub phi: Vec<f64>,
    /// Diagonal of the innovation covariance.
    pub v: Vec<f64>,
}

impl SvVectorParams {
    pub fn q(&self) -> usize {
        self.mu.len()
    }

    pub fn component(&self, j: usize) -> SvScalarParams {
        SvScalarParams {
            nu: self.mu[j],
            phi: self.phi[j],
            v2: self.v[j],
        }
    }

    pub fn set_component(&mut self, j: usize, c: SvScalarParams) {
        self.mu[j] = c.nu;
        self.phi[j] = c.phi;
        self.v[j] = c.v2;
    }

    pub fn validate(&self) -> Result<()> {
        if self.phi.len() != self.q() || self.v.len() != self.q() {
            return Err(DppcaError::Dimension("VAR(1) parameter lengths differ".into()));
        }
        (0..self.q()).try_for_each(|j| self.component(j).validate())
    }
}

/// Log-volatility paths: `eta` has one entry per time point, `lambda` is `M x q`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogVolatilityPath {
    pub eta: DVector<f64>,
    pub lambda: DMatrix<f64>,
}

impl LogVolatilityPath {
    pub fn is_finite(&self) -> bool {
        self.eta.iter().chain(self.lambda.iter()).all(|v| v.is_finite())
    }
}

/// `log N(x₁ | ν, v²/(1-φ²)) + Σ_{m≥2} log N(x_m | ν + φ(x_{m-1} - ν), v²)`.
pub fn sv_log_prior_scalar(path: &[f64], params: &SvScalarParams) -> Result<f64> {
    check_stationary(params.phi)?;
    Ok(sv_log_prior_unchecked(path, params))
}

pub(crate) fn sv_log_prior_unchecked(path: &[f64], params: &SvScalarParams) -> f64 {
    let SvScalarParams { nu, phi, v2 } = *params;
    let Some(first) = path.first() else {
        return 0.0;
    };
    let mut total = ln_normal_pdf(*first, nu, v2 / one_minus_phi_sq(phi));
    for w in path.windows(2) {
        total += ln_normal_pdf(w[1], nu + phi * (w[0] - nu), v2);
    }
    total
}

/// Sum of the per-component AR(1) log-densities over the columns of `lambda`.
pub fn sv_log_prior_vector(lambda: &DMatrix<f64>, params: &SvVectorParams) -> Result<f64> {
    if lambda.ncols() != params.q() {
        return Err(DppcaError::Dimension(format!(
            "lambda has {} columns but the VAR(1) has {} components",
            lambda.ncols(),
            params.q()
        )));
    }
    let mut total = 0.0;
    for j in 0..params.q() {
        let col: Vec<f64> = lambda.column(j).iter().copied().collect();
        total += sv_log_prior_scalar(&col, &params.component(j))?;
    }
    Ok(total)
}

pub fn simulate_sv_scalar<R: Rng + ?Sized>(params: &SvScalarParams, len: usize, rng: &mut R) -> Result<Vec<f64>> {
    params.validate()?;
    let mut out = Vec::with_capacity(len);
    if len == 0 {
        return Ok(out);
    }
    let sd = params.v2.sqrt();
    let mut x = params.nu + params.stationary_var().sqrt() * std_normal(rng);
    out.push(x);
    for _ in 1..len {
        x = params.nu + params.phi * (x - params.nu) + sd * std_normal(rng);
        out.push(x);
    }
    Ok(out)
}

/// Simulate a `len x q` VAR(1) path, components drawn in column order.
pub fn simulate_sv_vector<R: Rng + ?Sized>(
    params: &SvVectorParams,
    len: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    params.validate()?;
    let mut out = DMatrix::zeros(len, params.q());
    for j in 0..params.q() {
        let col = simulate_sv_scalar(&params.component(j), len, rng)?;
        out.set_column(j, &DVector::from_vec(col));
    }
    Ok(out)
}

/// Gaussian conditional of `x[m]` given the other path entries under the AR(1) prior,
/// returned as `(precision, mean)`.
pub fn site_prior(path: &[f64], m: usize, params: &SvScalarParams) -> (f64, f64) {
    let SvScalarParams { nu, phi, v2 } = *params;
    let len = path.len();
    // Each term has the form -(a x - b)² / (2 s²).
    let mut prec = 0.0;
    let mut lin = 0.0;
    let mut add = |a: f64, b: f64, s2: f64| {
        prec += a * a / s2;
        lin += a * b / s2;
    };
    if m == 0 {
        add(1.0, nu, v2 / one_minus_phi_sq(phi));
    } else {
        add(1.0, nu + phi * (path[m - 1] - nu), v2);
    }
    if m + 1 < len {
        add(phi, path[m + 1] - nu * (1.0 - phi), v2);
    }
    (prec, lin / prec)
}

/// Sum of squared standardized innovations scaled by `v²`:
/// `(1-φ²)(x₁-c)² + Σ_{m≥2} (x_m - c - φ(x_{m-1}-c))²`.
pub fn innovation_sum_of_squares(path: &[f64], center: f64, phi: f64) -> f64 {
    let Some(first) = path.first() else {
        return 0.0;
    };
    let mut ss = one_minus_phi_sq(phi) * (first - center).powi(2);
    for w in path.windows(2) {
        ss += (w[1] - center - phi * (w[0] - center)).powi(2);
    }
    ss
}
