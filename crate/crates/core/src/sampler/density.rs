//! Joint log-densities of the augmented model.

use nalgebra::DMatrix;

use crate::config::PriorConfig;
use crate::error::{DppcaError, Result};
use crate::linalg::{ln_inv_gamma_pdf, ln_normal_pdf, LN_2PI};
use crate::sampler::ModelState;
use crate::sv::{sv_log_prior_scalar, sv_log_prior_vector};
use crate::truncnorm::TruncatedNormal;

/// Sum over (i, m) of `log N_p(x_im | W_m u_im, e^{η_m} I) + log N_q(u_im | 0, diag e^{λ_·m})`
/// plus both stochastic-volatility priors.
pub fn log_aug_likelihood(state: &ModelState, data: &[DMatrix<f64>]) -> Result<f64> {
    state.check_dims(data)?;
    let q = state.q();
    let mut total = 0.0;
    for (m, x) in data.iter().enumerate() {
        let (n, p) = x.shape();
        let eta = state.vol.eta[m];
        let resid = x - &state.scores[m] * state.loadings[m].transpose();
        total += -0.5 * (n * p) as f64 * (LN_2PI + eta) - 0.5 * (-eta).exp() * resid.norm_squared();
        for j in 0..q {
            let lam = state.vol.lambda[(m, j)];
            let ss: f64 = state.scores[m].column(j).norm_squared();
            total += -0.5 * n as f64 * (LN_2PI + lam) - 0.5 * (-lam).exp() * ss;
        }
    }
    let eta: Vec<f64> = state.vol.eta.iter().copied().collect();
    total += sv_log_prior_scalar(&eta, &state.theta1)?;
    total += sv_log_prior_vector(&state.vol.lambda, &state.theta2)?;
    Ok(total)
}

pub(crate) fn persistence_prior(prior: &PriorConfig) -> TruncatedNormal {
    TruncatedNormal::new(prior.phi_mean, prior.phi_var.sqrt(), -1.0, 1.0)
}

/// Log prior density of the loadings and all stochastic-volatility parameters.
pub fn log_param_prior(state: &ModelState, prior: &PriorConfig) -> f64 {
    let s = prior.loading_prior_cov_scale;
    let mut total = 0.0;
    for w in &state.loadings {
        total += w.iter().map(|v| ln_normal_pdf(*v, 0.0, s)).sum::<f64>();
    }
    let shape = prior.ig_alpha / 2.0;
    let scale = prior.ig_beta / 2.0;
    let tn = persistence_prior(prior);
    total += ln_normal_pdf(state.theta1.nu, prior.nu_mean, prior.nu_var);
    total += ln_inv_gamma_pdf(state.theta1.v2, shape, scale);
    total += tn.ln_pdf(state.theta1.phi);
    for j in 0..state.q() {
        total += ln_normal_pdf(state.theta2.mu[j], prior.mu_mean, prior.mu_var);
        total += ln_inv_gamma_pdf(state.theta2.v[j], shape, scale);
        total += tn.ln_pdf(state.theta2.phi[j]);
    }
    total
}

/// Unnormalized log posterior: augmented likelihood plus parameter priors.
pub fn log_joint(state: &ModelState, data: &[DMatrix<f64>], prior: &PriorConfig) -> Result<f64> {
    let v = log_aug_likelihood(state, data)? + log_param_prior(state, prior);
    if v.is_nan() {
        return Err(DppcaError::Numerical("joint log-density is NaN".into()));
    }
    Ok(v)
}
