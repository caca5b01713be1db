//! Random-intercept linear mixed model with polynomial time effects, fitted by
//! Gibbs sampling, and backwards selection of the polynomial degree.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::credible_interval;
use crate::config::LmmConfig;
use crate::error::{DppcaError, Result};
use crate::linalg::{sample_inv_gamma, std_normal, GaussianConditional};

pub const MAX_LMM_DEGREE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Estimate {
    fn from_draws(draws: &[f64]) -> Self {
        let (lower, upper) = credible_interval(draws);
        Estimate {
            mean: draws.iter().sum::<f64>() / draws.len() as f64,
            lower,
            upper,
        }
    }

    pub fn excludes_zero(&self) -> bool {
        self.lower > 0.0 || self.upper < 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmFit {
    pub variable: String,
    pub degree: usize,
    /// `beta[r]` multiplies `t^r`.
    pub beta: Vec<Estimate>,
    pub tau2: Estimate,
    pub sigma2_e: Estimate,
    /// Polynomial at the posterior-mean coefficients, one value per time point.
    pub trajectory: Vec<f64>,
    pub evolves_over_time: bool,
}

/// `t_m = m - (M + 1)/2` for `m = 1..M`.
pub fn centered_times(n_times: usize) -> Vec<f64> {
    let c = (n_times as f64 + 1.0) / 2.0;
    (1..=n_times).map(|m| m as f64 - c).collect()
}

pub fn polynomial(coefs: &[f64], t: f64) -> f64 {
    coefs.iter().rev().fold(0.0, |acc, c| acc * t + c)
}

/// `M x (d + 1)` matrix of powers of the centered times.
pub fn time_design(n_times: usize, degree: usize) -> DMatrix<f64> {
    let t = centered_times(n_times);
    DMatrix::from_fn(n_times, degree + 1, |m, r| t[m].powi(r as i32))
}

/// Current values of every LMM unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmState {
    pub beta: DVector<f64>,
    pub intercepts: DVector<f64>,
    pub tau2: f64,
    pub sigma2_e: f64,
}

/// Gibbs sampler for one variable's `n x M` profile matrix.
pub struct LmmSampler<'a> {
    y: &'a DMatrix<f64>,
    design: DMatrix<f64>,
    gram: DMatrix<f64>,
    cfg: &'a LmmConfig,
    pub state: LmmState,
}

impl<'a> LmmSampler<'a> {
    pub fn new(y: &'a DMatrix<f64>, degree: usize, cfg: &'a LmmConfig) -> Result<Self> {
        if degree > MAX_LMM_DEGREE {
            return Err(DppcaError::Invalid(format!("degree {degree} exceeds {MAX_LMM_DEGREE}")));
        }
        let (n, m) = y.shape();
        if n < 2 || m < 2 {
            return Err(DppcaError::Dimension(format!("profiles must be at least 2 x 2, got {n} x {m}")));
        }
        if degree + 1 > m {
            return Err(DppcaError::Invalid(format!("degree {degree} needs more than {m} time points")));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(DppcaError::Numerical("profiles contain non-finite values".into()));
        }
        let mean = y.mean();
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n * m) as f64;
        if var == 0.0 {
            log::warn!("constant profiles; variances are driven by their prior");
        }
        let design = time_design(m, degree);
        let gram = design.transpose() * &design * n as f64;
        let mut beta = DVector::zeros(degree + 1);
        beta[0] = mean;
        let start = var.max(cfg.var_rate);
        Ok(LmmSampler {
            y,
            design,
            gram,
            cfg,
            state: LmmState {
                beta,
                intercepts: DVector::zeros(n),
                tau2: start,
                sigma2_e: start,
            },
        })
    }

    /// `y_im - b_i` summed over observations, per time point.
    fn column_sums_less_intercepts(&self) -> DVector<f64> {
        let (n, m) = self.y.shape();
        let b_total = self.state.intercepts.sum();
        DVector::from_fn(m, |t, _| (0..n).map(|i| self.y[(i, t)]).sum::<f64>() - b_total)
    }

    pub fn beta_conditional(&self) -> Result<GaussianConditional> {
        let d1 = self.design.ncols();
        let s2 = self.state.sigma2_e;
        let precision = &self.gram / s2 + DMatrix::identity(d1, d1) / self.cfg.beta_prior_var;
        let linear = self.design.transpose() * self.column_sums_less_intercepts() / s2;
        GaussianConditional::from_precision(precision, &linear)
    }

    /// `(mean, variance)` of intercept `i` given everything else.
    pub fn intercept_conditional(&self, i: usize) -> (f64, f64) {
        let m = self.y.ncols();
        let fitted = &self.design * &self.state.beta;
        let r: f64 = (0..m).map(|t| self.y[(i, t)] - fitted[t]).sum();
        let prec = m as f64 / self.state.sigma2_e + 1.0 / self.state.tau2;
        (r / self.state.sigma2_e / prec, 1.0 / prec)
    }

    /// Inverse-gamma `(shape, scale)` of the random-intercept variance.
    pub fn tau2_conditional(&self) -> (f64, f64) {
        let n = self.y.nrows() as f64;
        (
            self.cfg.var_shape + n / 2.0,
            self.cfg.var_rate + 0.5 * self.state.intercepts.norm_squared(),
        )
    }

    pub fn residual_ss(&self) -> f64 {
        let (n, m) = self.y.shape();
        let fitted = &self.design * &self.state.beta;
        let mut ss = 0.0;
        for i in 0..n {
            for t in 0..m {
                ss += (self.y[(i, t)] - fitted[t] - self.state.intercepts[i]).powi(2);
            }
        }
        ss
    }

    pub fn sigma2_conditional(&self) -> (f64, f64) {
        let nm = self.y.len() as f64;
        (self.cfg.var_shape + nm / 2.0, self.cfg.var_rate + 0.5 * self.residual_ss())
    }

    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.state.beta = self.beta_conditional()?.sample(rng);
        for i in 0..self.y.nrows() {
            let (mean, var) = self.intercept_conditional(i);
            self.state.intercepts[i] = mean + var.sqrt() * std_normal(rng);
        }
        let (a, b) = self.tau2_conditional();
        self.state.tau2 = sample_inv_gamma(a, b, rng)?;
        let (a, b) = self.sigma2_conditional();
        self.state.sigma2_e = sample_inv_gamma(a, b, rng)?;
        Ok(())
    }
}

/// Fit a model of fixed degree to `n x M` profiles.
pub fn fit_lmm<R: Rng + ?Sized>(
    variable: &str,
    y: &DMatrix<f64>,
    degree: usize,
    cfg: &LmmConfig,
    rng: &mut R,
) -> Result<LmmFit> {
    cfg.validate()?;
    let mut sampler = LmmSampler::new(y, degree, cfg)?;
    let keep = (cfg.n_iterations - cfg.burn_in_raw) / cfg.thin;
    let mut betas = vec![Vec::with_capacity(keep); degree + 1];
    let mut tau2 = Vec::with_capacity(keep);
    let mut sigma2 = Vec::with_capacity(keep);
    for sweep in 1..=cfg.n_iterations {
        sampler.sweep(rng).map_err(|e| e.at_sweep(sweep))?;
        if sweep > cfg.burn_in_raw && (sweep - cfg.burn_in_raw).is_multiple_of(cfg.thin) {
            for (r, b) in betas.iter_mut().enumerate() {
                b.push(sampler.state.beta[r]);
            }
            tau2.push(sampler.state.tau2);
            sigma2.push(sampler.state.sigma2_e);
        }
    }
    if tau2.len() < 2 {
        return Err(DppcaError::TooFewSamples { needed: 2, have: tau2.len() });
    }
    let beta: Vec<Estimate> = betas.iter().map(|b| Estimate::from_draws(b)).collect();
    let means: Vec<f64> = beta.iter().map(|e| e.mean).collect();
    let trajectory = centered_times(y.ncols()).iter().map(|t| polynomial(&means, *t)).collect();
    Ok(LmmFit {
        variable: variable.to_string(),
        degree,
        beta,
        tau2: Estimate::from_draws(&tau2),
        sigma2_e: Estimate::from_draws(&sigma2),
        trajectory,
        evolves_over_time: degree >= 1,
    })
}

/// Fit from the cubic model down, dropping the top power while its 95% interval
/// contains zero.
pub fn backwards_select<R: Rng + ?Sized>(variable: &str, y: &DMatrix<f64>, cfg: &LmmConfig, rng: &mut R) -> Result<LmmFit> {
    let mut degree = cfg.max_degree.min(MAX_LMM_DEGREE).min(y.ncols() - 1);
    loop {
        let fit = fit_lmm(variable, y, degree, cfg, rng).map_err(|e| e.in_stage(format!("degree {degree}")))?;
        if degree == 0 || fit.beta[degree].excludes_zero() {
            return Ok(fit);
        }
        degree -= 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Evolving {
    Neither,
    OnlyA,
    OnlyB,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub variable: String,
    pub degree_a: Option<usize>,
    pub degree_b: Option<usize>,
    pub evolving: Evolving,
    /// Sign of the highest-order coefficient's posterior mean, for evolving fits.
    pub top_sign_a: Option<i8>,
    pub top_sign_b: Option<i8>,
    /// Both evolving with the same degree but opposite top-coefficient signs.
    pub sign_discordant: bool,
}

fn top_sign(fit: &LmmFit) -> Option<i8> {
    fit.evolves_over_time.then(|| if fit.beta[fit.degree].mean < 0.0 { -1 } else { 1 })
}

/// One row per variable fitted in either group, A's variables first.
pub fn compare_groups(fits_a: &[LmmFit], fits_b: &[LmmFit]) -> Vec<GroupComparison> {
    let mut names: Vec<&str> = fits_a.iter().map(|f| f.variable.as_str()).collect();
    for f in fits_b {
        if !names.contains(&f.variable.as_str()) {
            names.push(&f.variable);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let a = fits_a.iter().find(|f| f.variable == name);
            let b = fits_b.iter().find(|f| f.variable == name);
            let ev_a = a.is_some_and(|f| f.evolves_over_time);
            let ev_b = b.is_some_and(|f| f.evolves_over_time);
            let evolving = match (ev_a, ev_b) {
                (true, true) => Evolving::Both,
                (true, false) => Evolving::OnlyA,
                (false, true) => Evolving::OnlyB,
                (false, false) => Evolving::Neither,
            };
            let top_sign_a = a.and_then(top_sign);
            let top_sign_b = b.and_then(top_sign);
            let same_degree = a.map(|f| f.degree) == b.map(|f| f.degree);
            GroupComparison {
                variable: name.to_string(),
                degree_a: a.map(|f| f.degree),
                degree_b: b.map(|f| f.degree),
                evolving,
                top_sign_a,
                top_sign_b,
                sign_discordant: evolving == Evolving::Both && same_degree && top_sign_a != top_sign_b,
            }
        })
        .collect()
}

/// Draw `n x M` profiles from the model with the given coefficients.
pub fn simulate_profiles<R: Rng + ?Sized>(
    n: usize,
    n_times: usize,
    beta: &[f64],
    tau2: f64,
    sigma2_e: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    let t = centered_times(n_times);
    let mut y = DMatrix::zeros(n, n_times);
    for i in 0..n {
        let b = tau2.sqrt() * std_normal(rng);
        for m in 0..n_times {
            y[(i, m)] = polynomial(beta, t[m]) + b + sigma2_e.sqrt() * std_normal(rng);
        }
    }
    y
}
