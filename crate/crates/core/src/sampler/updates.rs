//! Full conditionals and the per-block updates of one sweep.
//!
//! Conjugate blocks (scores, loadings, AR centers, innovation variances) are
//! drawn exactly. Persistence parameters and log-volatilities are updated by
//! Metropolis-Hastings; each MH block exposes its unnormalized log target so
//! it can be checked against the joint density.

use nalgebra::DMatrix;
use rand::Rng;

use crate::config::PriorConfig;
use crate::error::{DppcaError, Result};
use crate::linalg::{ln_normal_pdf, sample_inv_gamma, std_normal, GaussianConditional};
use crate::sampler::ModelState;
use crate::sv::{check_stationary, innovation_sum_of_squares, one_minus_phi_sq, site_prior, SvScalarParams};
use crate::truncnorm::TruncatedNormal;

/// Proposal densities below this are floored before taking logs.
const DENSITY_FLOOR: f64 = 1e-300;

// ---------------------------------------------------------------------------
// Scores and loadings

/// Conditional of `u_im`: precision `diag(e^{-λ_·m}) + e^{-η_m} WᵀW`,
/// mean `P⁻¹ e^{-η_m} Wᵀ x_im`.
pub fn scores_conditional(state: &ModelState, x: &DMatrix<f64>, i: usize, m: usize) -> Result<GaussianConditional> {
    let prec = scores_precision(state, m);
    let w = &state.loadings[m];
    let lin = w.transpose() * x.row(i).transpose() * (-state.vol.eta[m]).exp();
    GaussianConditional::from_precision(prec, &lin)
}

fn scores_precision(state: &ModelState, m: usize) -> DMatrix<f64> {
    let w = &state.loadings[m];
    let mut prec = w.transpose() * w * (-state.vol.eta[m]).exp();
    for j in 0..state.q() {
        prec[(j, j)] += (-state.vol.lambda[(m, j)]).exp();
    }
    prec
}

pub fn update_scores<R: Rng + ?Sized>(state: &mut ModelState, data: &[DMatrix<f64>], rng: &mut R) -> Result<()> {
    for (m, x) in data.iter().enumerate() {
        let prec = scores_precision(state, m);
        let lin = x * &state.loadings[m] * (-state.vol.eta[m]).exp();
        let draws = draw_rows(prec, &lin, rng).map_err(|e| e.at_time(m))?;
        state.scores[m] = draws;
    }
    Ok(())
}

/// Conditional of row `k` of `W_m`: precision `Ω⁻¹ + e^{-η_m} Σ_i u_im u_imᵀ`,
/// mean `P⁻¹ e^{-η_m} Σ_i x_ikm u_im`.
pub fn loadings_row_conditional(
    state: &ModelState,
    x: &DMatrix<f64>,
    prior: &PriorConfig,
    m: usize,
    k: usize,
) -> Result<GaussianConditional> {
    let prec = loadings_precision(state, prior, m);
    let u = &state.scores[m];
    let lin = u.transpose() * x.column(k) * (-state.vol.eta[m]).exp();
    GaussianConditional::from_precision(prec, &lin)
}

fn loadings_precision(state: &ModelState, prior: &PriorConfig, m: usize) -> DMatrix<f64> {
    let u = &state.scores[m];
    let mut prec = u.transpose() * u * (-state.vol.eta[m]).exp();
    for j in 0..state.q() {
        prec[(j, j)] += 1.0 / prior.loading_prior_cov_scale;
    }
    prec
}

pub fn update_loadings<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &[DMatrix<f64>],
    prior: &PriorConfig,
    rng: &mut R,
) -> Result<()> {
    for (m, x) in data.iter().enumerate() {
        let prec = loadings_precision(state, prior, m);
        let lin = x.transpose() * &state.scores[m] * (-state.vol.eta[m]).exp();
        let draws = draw_rows(prec, &lin, rng).map_err(|e| e.at_time(m))?;
        state.loadings[m] = draws;
    }
    Ok(())
}

/// Independent Gaussian draws sharing one precision; row `r` of `linear` is the
/// linear term of draw `r`.
fn draw_rows<R: Rng + ?Sized>(prec: DMatrix<f64>, linear: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    let chol = prec.clone().cholesky().ok_or_else(|| {
        DppcaError::Numerical(format!(
            "conditional precision is not positive definite (diag = {:?})",
            prec.diagonal().as_slice()
        ))
    })?;
    let q = prec.nrows();
    let means = chol.solve(&linear.transpose());
    let z = DMatrix::from_fn(q, linear.nrows(), |_, _| std_normal(rng));
    let noise = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| DppcaError::Numerical("singular Cholesky factor".into()))?;
    Ok((means + noise).transpose())
}

// ---------------------------------------------------------------------------
// AR(1) centers and innovation variances

/// Normal conditional `(mean, variance)` of the AR center given the path.
///
/// The stationary initial term contributes precision `(1-φ²)/v²`, every
/// transition `(1-φ)²/v²`.
pub fn sv_center_conditional(path: &[f64], phi: f64, v2: f64, prior_mean: f64, prior_var: f64) -> (f64, f64) {
    let omp2 = one_minus_phi_sq(phi);
    let omp = 1.0 - phi;
    let mut prec = 1.0 / prior_var;
    let mut lin = prior_mean / prior_var;
    if let Some(first) = path.first() {
        prec += omp2 / v2;
        lin += omp2 * first / v2;
    }
    for w in path.windows(2) {
        prec += omp * omp / v2;
        lin += omp * (w[1] - phi * w[0]) / v2;
    }
    (lin / prec, 1.0 / prec)
}

pub fn update_sv_mean<R: Rng + ?Sized>(
    path: &[f64],
    params: &mut SvScalarParams,
    prior_mean: f64,
    prior_var: f64,
    rng: &mut R,
) {
    let (mean, var) = sv_center_conditional(path, params.phi, params.v2, prior_mean, prior_var);
    params.nu = mean + var.sqrt() * std_normal(rng);
}

/// Inverse-gamma conditional `(shape, scale)` of the innovation variance:
/// `IG((α + M)/2, (β + SS)/2)`.
pub fn sv_innovation_conditional(path: &[f64], center: f64, phi: f64, ig_alpha: f64, ig_beta: f64) -> (f64, f64) {
    let ss = innovation_sum_of_squares(path, center, phi);
    ((ig_alpha + path.len() as f64) / 2.0, (ig_beta + ss) / 2.0)
}

pub fn update_sv_innovation_var<R: Rng + ?Sized>(
    path: &[f64],
    params: &mut SvScalarParams,
    ig_alpha: f64,
    ig_beta: f64,
    rng: &mut R,
) -> Result<()> {
    let (shape, scale) = sv_innovation_conditional(path, params.nu, params.phi, ig_alpha, ig_beta);
    params.v2 = sample_inv_gamma(shape, scale, rng)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Persistence

/// Unnormalized log target for `φ`: truncated-normal prior, the stationary
/// initial density (with its `√(1-φ²)` factor) and the AR transitions.
pub fn persistence_log_target(path: &[f64], center: f64, v2: f64, prior: &PriorConfig, phi: f64) -> f64 {
    if check_stationary(phi).is_err() {
        return f64::NEG_INFINITY;
    }
    let prior_term = -0.5 * (phi - prior.phi_mean).powi(2) / prior.phi_var;
    let ss = innovation_sum_of_squares(path, center, phi);
    prior_term + 0.5 * one_minus_phi_sq(phi).ln() - 0.5 * ss / v2
}

fn persistence_proposal(from: f64, step: f64) -> TruncatedNormal {
    TruncatedNormal::new(from, step, -1.0, 1.0)
}

/// Log MH acceptance ratio for moving `φ` from `from` to `to` under the
/// truncated random-walk proposal.
pub fn persistence_log_ratio(
    path: &[f64],
    params: &SvScalarParams,
    prior: &PriorConfig,
    step: f64,
    from: f64,
    to: f64,
) -> f64 {
    let target = |phi| persistence_log_target(path, params.nu, params.v2, prior, phi);
    let forward = persistence_proposal(from, step).ln_pdf(to).max(DENSITY_FLOOR.ln());
    let backward = persistence_proposal(to, step).ln_pdf(from).max(DENSITY_FLOOR.ln());
    target(to) - target(from) + backward - forward
}

/// One MH step on the persistence parameter; returns whether the move was accepted.
pub fn update_persistence_mh<R: Rng + ?Sized>(
    path: &[f64],
    params: &mut SvScalarParams,
    prior: &PriorConfig,
    step: f64,
    rng: &mut R,
) -> bool {
    let proposal = persistence_proposal(params.phi, step).sample(rng);
    if check_stationary(proposal).is_err() {
        return false;
    }
    let log_ratio = persistence_log_ratio(path, params, prior, step, params.phi, proposal);
    if accept(log_ratio, rng) {
        params.phi = proposal;
        true
    } else {
        false
    }
}

fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio >= 0.0 {
        return true;
    }
    let u: f64 = rng.random();
    u.ln() < log_ratio
}

// ---------------------------------------------------------------------------
// Log-volatilities

/// Single-site log target for a log-volatility `x`:
/// `-(count/2) x - e^{-x} ss / 2 - prec (x - mean)² / 2`,
/// where `(prec, mean)` is the AR(1) conditional of the site given its neighbours.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogVolTarget {
    /// Number of Gaussian terms whose variance is `e^x` (`n p` for errors, `n` for scores).
    pub count: f64,
    /// Sum of squares those terms contribute.
    pub ss: f64,
    pub prior_prec: f64,
    pub prior_mean: f64,
}

impl LogVolTarget {
    pub fn ln_target(&self, x: f64) -> f64 {
        -0.5 * self.count * x - 0.5 * (-x).exp() * self.ss - 0.5 * self.prior_prec * (x - self.prior_mean).powi(2)
    }

    pub fn grad(&self, x: f64) -> f64 {
        -0.5 * self.count + 0.5 * (-x).exp() * self.ss - self.prior_prec * (x - self.prior_mean)
    }

    pub fn hess(&self, x: f64) -> f64 {
        -0.5 * (-x).exp() * self.ss - self.prior_prec
    }

    /// Gaussian proposal `(mean, variance)` from a second-order expansion at `at`,
    /// or a random walk of scale `step` when the expansion is not concave.
    pub fn proposal(&self, at: f64, step: f64) -> (f64, f64) {
        let h = self.hess(at);
        let g = self.grad(at);
        if h < 0.0 && h.is_finite() && g.is_finite() {
            (at - g / h, -1.0 / h)
        } else {
            (at, step * step)
        }
    }

    pub fn log_ratio(&self, from: f64, to: f64, step: f64) -> f64 {
        let (fm, fv) = self.proposal(from, step);
        let (bm, bv) = self.proposal(to, step);
        let forward = ln_normal_pdf(to, fm, fv).max(DENSITY_FLOOR.ln());
        let backward = ln_normal_pdf(from, bm, bv).max(DENSITY_FLOOR.ln());
        self.ln_target(to) - self.ln_target(from) + backward - forward
    }

    /// One MH step from `current`; returns the new value and the accept flag.
    pub fn step<R: Rng + ?Sized>(&self, current: f64, step: f64, rng: &mut R) -> (f64, bool) {
        let (mean, var) = self.proposal(current, step);
        let proposal = mean + var.sqrt() * std_normal(rng);
        if !proposal.is_finite() {
            return (current, false);
        }
        let r = self.log_ratio(current, proposal, step);
        if !r.is_nan() && accept(r, rng) {
            (proposal, true)
        } else {
            (current, false)
        }
    }
}

/// Residual sum of squares `Σ_i ||x_im - W_m u_im||²` at time `m`.
pub fn residual_ss(state: &ModelState, x: &DMatrix<f64>, m: usize) -> f64 {
    (x - &state.scores[m] * state.loadings[m].transpose()).norm_squared()
}

pub fn eta_target(state: &ModelState, x: &DMatrix<f64>, m: usize) -> LogVolTarget {
    let path: Vec<f64> = state.vol.eta.iter().copied().collect();
    let (prior_prec, prior_mean) = site_prior(&path, m, &state.theta1);
    LogVolTarget {
        count: (x.nrows() * x.ncols()) as f64,
        ss: residual_ss(state, x, m),
        prior_prec,
        prior_mean,
    }
}

pub fn lambda_target(state: &ModelState, m: usize, j: usize) -> LogVolTarget {
    let path: Vec<f64> = state.vol.lambda.column(j).iter().copied().collect();
    let (prior_prec, prior_mean) = site_prior(&path, m, &state.theta2.component(j));
    LogVolTarget {
        count: state.scores[m].nrows() as f64,
        ss: state.scores[m].column(j).norm_squared(),
        prior_prec,
        prior_mean,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VolAcceptance {
    pub eta_accepted: usize,
    pub eta_proposed: usize,
    pub lambda_accepted: usize,
    pub lambda_proposed: usize,
}

/// One-site-at-a-time MH over every `η_m`, then every `λ_jm`.
pub fn update_log_volatilities_mh<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &[DMatrix<f64>],
    eta_step: f64,
    lambda_step: f64,
    rng: &mut R,
) -> VolAcceptance {
    let mut acc = VolAcceptance::default();
    update_eta(state, data, eta_step, rng, &mut acc);
    update_lambda(state, lambda_step, rng, &mut acc);
    acc
}

pub(crate) fn update_eta<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &[DMatrix<f64>],
    step: f64,
    rng: &mut R,
    acc: &mut VolAcceptance,
) {
    let len = state.vol.eta.len();
    let ss: Vec<f64> = (0..len).map(|m| residual_ss(state, &data[m], m)).collect();
    for m in 0..len {
        let path: Vec<f64> = state.vol.eta.iter().copied().collect();
        let (prior_prec, prior_mean) = site_prior(&path, m, &state.theta1);
        let target = LogVolTarget {
            count: (data[m].nrows() * data[m].ncols()) as f64,
            ss: ss[m],
            prior_prec,
            prior_mean,
        };
        let (v, ok) = target.step(path[m], step, rng);
        state.vol.eta[m] = v;
        acc.eta_proposed += 1;
        acc.eta_accepted += ok as usize;
    }
}

pub(crate) fn update_lambda<R: Rng + ?Sized>(state: &mut ModelState, step: f64, rng: &mut R, acc: &mut VolAcceptance) {
    let (len, q) = state.vol.lambda.shape();
    for j in 0..q {
        for m in 0..len {
            let target = lambda_target(state, m, j);
            let (v, ok) = target.step(state.vol.lambda[(m, j)], step, rng);
            state.vol.lambda[(m, j)] = v;
            acc.lambda_proposed += 1;
            acc.lambda_accepted += ok as usize;
        }
    }
}

pub(crate) fn column(m: &DMatrix<f64>, j: usize) -> Vec<f64> {
    m.column(j).iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_state(w: f64, eta: f64, lambda: f64) -> ModelState {
        crate::sampler::ModelState::new(
            vec![DMatrix::from_element(1, 1, w)],
            vec![DMatrix::zeros(1, 1)],
            nalgebra::DVector::from_element(1, eta),
            DMatrix::from_element(1, 1, lambda),
            SvScalarParams { nu: 0.0, phi: 0.5, v2: 1.0 },
            crate::sv::SvVectorParams { mu: vec![0.0], phi: vec![0.5], v: vec![1.0] },
        )
    }

    #[test]
    fn scores_one_dimensional_conjugate_arithmetic() {
        let state = tiny_state(1.0, 0.0, 0.0);
        let x = DMatrix::from_element(1, 1, 2.0);
        let c = scores_conditional(&state, &x, 0, 0).unwrap();
        assert!((c.mean[0] - 1.0).abs() < 1e-14);
        assert!((c.covariance()[(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn scores_prior_collapse_when_loadings_vanish() {
        let state = tiny_state(0.0, 0.0, 0.7);
        let x = DMatrix::from_element(1, 1, 2.0);
        let c = scores_conditional(&state, &x, 0, 0).unwrap();
        assert_eq!(c.mean[0], 0.0);
        assert!((c.covariance()[(0, 0)] - 0.7f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn loadings_prior_collapse_and_conjugate_arithmetic() {
        let prior = PriorConfig::default();
        let mut state = tiny_state(0.3, 0.0, 0.0);
        let x = DMatrix::from_element(1, 1, 2.0);
        let c = loadings_row_conditional(&state, &x, &prior, 0, 0).unwrap();
        assert_eq!(c.mean[0], 0.0);
        assert!((c.covariance()[(0, 0)] - 1.0).abs() < 1e-14);
        state.scores[0][(0, 0)] = 1.0;
        let c = loadings_row_conditional(&state, &x, &prior, 0, 0).unwrap();
        // precision 1 + 1, mean (1 * 2) / 2
        assert!((c.mean[0] - 1.0).abs() < 1e-14);
        assert!((c.covariance()[(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn scores_update_moments_match_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut state = tiny_state(0.8, -0.5, 0.4);
        let x = vec![DMatrix::from_element(1, 1, 1.5)];
        let c = scores_conditional(&state, &x[0], 0, 0).unwrap();
        let draws = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            update_scores(&mut state, &x, &mut rng).unwrap();
            let u = state.scores[0][(0, 0)];
            s += u;
            s2 += u * u;
        }
        let mean = s / draws as f64;
        let var = s2 / draws as f64 - mean * mean;
        let se = (c.covariance()[(0, 0)] / draws as f64).sqrt();
        assert!((mean - c.mean[0]).abs() < 3.0 * se, "{mean} vs {}", c.mean[0]);
        assert!((var / c.covariance()[(0, 0)] - 1.0).abs() < 0.02);
    }

    #[test]
    fn center_conditional_without_persistence_is_iid_formula() {
        let path = [0.4, -0.2, 1.1, 0.3];
        let (mean, var) = sv_center_conditional(&path, 0.0, 0.5, 1.0, 10.0);
        let prec = 1.0 / 10.0 + 4.0 / 0.5;
        let expect = (1.0 / 10.0 + path.iter().sum::<f64>() / 0.5) / prec;
        assert!((mean - expect).abs() < 1e-14 && (var - 1.0 / prec).abs() < 1e-14);
    }

    #[test]
    fn center_conditional_tends_to_gls() {
        let path = [0.4, -0.2, 1.1, 0.3, 0.8];
        let phi = 0.6;
        let (mean, _) = sv_center_conditional(&path, phi, 0.3, 5.0, 1e12);
        // GLS estimate of the center of a stationary AR(1)
        let omp2 = 1.0 - phi * phi;
        let num = omp2 * path[0] + (1.0 - phi) * path.windows(2).map(|w| w[1] - phi * w[0]).sum::<f64>();
        let den = omp2 + (path.len() - 1) as f64 * (1.0 - phi) * (1.0 - phi);
        assert!((mean - num / den).abs() < 1e-9);
    }

    #[test]
    fn innovation_conditional_single_term() {
        let (shape, scale) = sv_innovation_conditional(&[0.7], 0.2, 0.5, 6.0, 0.5);
        assert_eq!(shape, 3.5);
        assert!((scale - (0.5 + 0.75 * 0.25) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn persistence_ratio_is_antisymmetric() {
        let prior = PriorConfig::default();
        let path = [0.1, 0.4, -0.3, 0.2, 0.9, 0.5];
        let params = SvScalarParams { nu: 0.1, phi: 0.3, v2: 0.2 };
        for (a, b) in [(0.3, 0.8), (-0.95, 0.2), (0.999, -0.5)] {
            let fwd = persistence_log_ratio(&path, &params, &prior, 0.3, a, b);
            let bwd = persistence_log_ratio(&path, &params, &prior, 0.3, b, a);
            assert!((fwd + bwd).abs() < 1e-12, "{fwd} {bwd}");
        }
    }

    #[test]
    fn tiny_persistence_steps_are_almost_always_accepted() {
        let prior = PriorConfig::default();
        let path = [0.1, 0.4, -0.3, 0.2, 0.9, 0.5];
        let mut params = SvScalarParams { nu: 0.1, phi: 0.3, v2: 0.2 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let accepted = (0..10_000)
            .filter(|_| update_persistence_mh(&path, &mut params, &prior, 1e-6, &mut rng))
            .count();
        assert!(accepted > 9_990, "{accepted}");
    }

    #[test]
    fn log_vol_target_is_finite_with_zero_residuals() {
        let t = LogVolTarget { count: 100.0, ss: 0.0, prior_prec: 2.0, prior_mean: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = 0.0;
        for _ in 0..1000 {
            x = t.step(x, 0.5, &mut rng).0;
            assert!(x.is_finite());
        }
        // target is Gaussian N(-25, 1/2) when ss = 0
        assert!((x + 25.0).abs() < 5.0);
    }

    #[test]
    fn log_vol_ratio_is_antisymmetric() {
        let t = LogVolTarget { count: 40.0, ss: 13.0, prior_prec: 1.5, prior_mean: -0.3 };
        for (a, b) in [(-1.0, 0.5), (2.0, -3.0)] {
            assert!((t.log_ratio(a, b, 0.5) + t.log_ratio(b, a, 0.5)).abs() < 1e-12);
        }
    }
}
