//! Metropolis-within-Gibbs sampler for the dynamic PPCA model.
//!
//! One sweep updates, in order: scores, loadings, error log-volatilities,
//! latent log-volatilities, the AR centers `ν` and `μ`, the innovation
//! variances `v²` and `V`, and finally the persistence parameters `φ` and `Φ`.

pub mod density;
pub mod updates;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{McmcConfig, PriorConfig};
use crate::data::LongitudinalDataset;
use crate::error::{DppcaError, Result};
use crate::linalg::{ln_normal_pdf, GaussianConditional};
use crate::ppca::PpcaFit;
use crate::sv::{LogVolatilityPath, SvScalarParams, SvVectorParams};

pub use density::{log_aug_likelihood, log_joint, log_param_prior};
pub use updates::{
    eta_target, lambda_target, loadings_row_conditional, persistence_log_ratio, persistence_log_target,
    scores_conditional, sv_center_conditional, sv_innovation_conditional, update_loadings,
    update_log_volatilities_mh, update_persistence_mh, update_scores, update_sv_innovation_var, update_sv_mean,
    LogVolTarget, VolAcceptance,
};

/// One configuration of every latent quantity and parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// `W_m`, one `p x q` matrix per time point.
    pub loadings: Vec<DMatrix<f64>>,
    /// Scores at time `m` as an `n x q` matrix; row `i` is `u_im`.
    pub scores: Vec<DMatrix<f64>>,
    pub vol: LogVolatilityPath,
    pub theta1: SvScalarParams,
    pub theta2: SvVectorParams,
}

impl ModelState {
    pub fn new(
        loadings: Vec<DMatrix<f64>>,
        scores: Vec<DMatrix<f64>>,
        eta: DVector<f64>,
        lambda: DMatrix<f64>,
        theta1: SvScalarParams,
        theta2: SvVectorParams,
    ) -> Self {
        ModelState {
            loadings,
            scores,
            vol: LogVolatilityPath { eta, lambda },
            theta1,
            theta2,
        }
    }

    pub fn q(&self) -> usize {
        self.theta2.q()
    }

    pub fn n_times(&self) -> usize {
        self.loadings.len()
    }

    pub fn check_dims(&self, data: &[DMatrix<f64>]) -> Result<()> {
        let m_len = data.len();
        let q = self.q();
        let bad = |what: String| Err(DppcaError::Dimension(what));
        if self.loadings.len() != m_len || self.scores.len() != m_len {
            return bad(format!("state has {} time points, data has {}", self.loadings.len(), m_len));
        }
        if self.vol.eta.len() != m_len || self.vol.lambda.shape() != (m_len, q) {
            return bad("log-volatility path has the wrong shape".into());
        }
        if self.theta2.phi.len() != q || self.theta2.v.len() != q {
            return bad("VAR(1) parameters have the wrong length".into());
        }
        for (m, x) in data.iter().enumerate() {
            if self.loadings[m].shape() != (x.ncols(), q) {
                return bad(format!("loadings at time {m} are {:?}", self.loadings[m].shape()));
            }
            if self.scores[m].shape() != (x.nrows(), q) {
                return bad(format!("scores at time {m} are {:?}", self.scores[m].shape()));
            }
        }
        Ok(())
    }

    /// `W_m u_im` for every observation at time `m`, as an `n x p` matrix.
    pub fn reconstruction(&self, m: usize) -> DMatrix<f64> {
        &self.scores[m] * self.loadings[m].transpose()
    }

    /// Initial state: PPCA loadings and posterior-mean scores per time point,
    /// `η_m = log σ²_m`, `λ` at the prior center, SV parameters at their prior means.
    pub fn initial(ds: &LongitudinalDataset, fits: &[PpcaFit], prior: &PriorConfig) -> Result<Self> {
        if fits.len() != ds.n_times() {
            return Err(DppcaError::Dimension(format!(
                "{} initial fits for {} time points",
                fits.len(),
                ds.n_times()
            )));
        }
        let q = fits[0].q();
        let m_len = ds.n_times();
        let phi0 = density::persistence_prior(prior).mean_value();
        let v0 = prior.innovation_var_mean();
        let state = ModelState::new(
            fits.iter().map(|f| f.w.clone()).collect(),
            fits.iter().zip(ds.slices()).map(|(f, x)| f.posterior_scores(x)).collect(),
            DVector::from_iterator(m_len, fits.iter().map(|f| f.sigma2.ln())),
            DMatrix::from_element(m_len, q, prior.mu_mean),
            SvScalarParams {
                nu: prior.nu_mean,
                phi: phi0,
                v2: v0,
            },
            SvVectorParams {
                mu: vec![prior.mu_mean; q],
                phi: vec![phi0; q],
                v: vec![v0; q],
            },
        );
        state.check_dims(ds.slices())?;
        Ok(state)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRates {
    pub eta: f64,
    pub lambda: f64,
    pub phi: f64,
    pub phi_latent: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct AcceptanceCounts {
    vol: VolAcceptance,
    phi: (usize, usize),
    phi_latent: (usize, usize),
}

impl AcceptanceCounts {
    fn rates(&self) -> AcceptanceRates {
        let r = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        AcceptanceRates {
            eta: r(self.vol.eta_accepted, self.vol.eta_proposed),
            lambda: r(self.vol.lambda_accepted, self.vol.lambda_proposed),
            phi: r(self.phi.0, self.phi.1),
            phi_latent: r(self.phi_latent.0, self.phi_latent.1),
        }
    }
}

/// Retained states of one chain plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorChain {
    pub samples: Vec<ModelState>,
    pub acceptance: AcceptanceRates,
    pub config: McmcConfig,
    pub log_posterior_trace: Vec<f64>,
    /// Per retained sample and time point, the rotation applied by identification.
    pub rotations: Option<Vec<Vec<DMatrix<f64>>>>,
}

impl PosteriorChain {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn q(&self) -> usize {
        self.samples.first().map_or(self.config.q, |s| s.q())
    }

    pub fn n_times(&self) -> usize {
        self.samples.first().map_or(0, |s| s.n_times())
    }

    /// Trace of one scalar extracted from every retained state.
    pub fn trace<F: Fn(&ModelState) -> f64>(&self, f: F) -> Vec<f64> {
        self.samples.iter().map(f).collect()
    }

    /// Posterior mean of `W_m` for every time point.
    pub fn mean_loadings(&self) -> Vec<DMatrix<f64>> {
        let s = self.len() as f64;
        (0..self.n_times())
            .map(|m| self.samples.iter().map(|st| &st.loadings[m]).sum::<DMatrix<f64>>() / s)
            .collect()
    }

    /// Posterior mean of the scores for every time point.
    pub fn mean_scores(&self) -> Vec<DMatrix<f64>> {
        let s = self.len() as f64;
        (0..self.n_times())
            .map(|m| self.samples.iter().map(|st| &st.scores[m]).sum::<DMatrix<f64>>() / s)
            .collect()
    }
}

/// Mutable sampler: a state, its data and priors, and the RNG stream.
pub struct Sampler<'a> {
    pub state: ModelState,
    data: &'a [DMatrix<f64>],
    prior: &'a PriorConfig,
    config: &'a McmcConfig,
    rng: ChaCha8Rng,
    counts: AcceptanceCounts,
}

impl<'a> Sampler<'a> {
    pub fn new(state: ModelState, data: &'a [DMatrix<f64>], prior: &'a PriorConfig, config: &'a McmcConfig) -> Result<Self> {
        state.check_dims(data)?;
        state.theta1.validate()?;
        state.theta2.validate()?;
        Ok(Sampler {
            state,
            data,
            prior,
            config,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            counts: AcceptanceCounts::default(),
        })
    }

    pub fn sweep(&mut self) -> Result<()> {
        let steps = &self.config.mh_step_scales;
        let prior = self.prior;
        let st = &mut self.state;
        let rng = &mut self.rng;

        update_scores(st, self.data, rng)?;
        update_loadings(st, self.data, prior, rng)?;
        updates::update_eta(st, self.data, steps.eta, rng, &mut self.counts.vol);
        updates::update_lambda(st, steps.lambda, rng, &mut self.counts.vol);
        if !st.vol.is_finite() {
            return Err(DppcaError::Numerical("log-volatility left the finite range".into()));
        }

        let eta: Vec<f64> = st.vol.eta.iter().copied().collect();
        let q = st.q();
        let lambda: Vec<Vec<f64>> = (0..q).map(|j| updates::column(&st.vol.lambda, j)).collect();

        update_sv_mean(&eta, &mut st.theta1, prior.nu_mean, prior.nu_var, rng);
        for (j, path) in lambda.iter().enumerate() {
            let mut c = st.theta2.component(j);
            update_sv_mean(path, &mut c, prior.mu_mean, prior.mu_var, rng);
            st.theta2.set_component(j, c);
        }
        update_sv_innovation_var(&eta, &mut st.theta1, prior.ig_alpha, prior.ig_beta, rng)?;
        for (j, path) in lambda.iter().enumerate() {
            let mut c = st.theta2.component(j);
            update_sv_innovation_var(path, &mut c, prior.ig_alpha, prior.ig_beta, rng)?;
            st.theta2.set_component(j, c);
        }
        let ok = update_persistence_mh(&eta, &mut st.theta1, prior, steps.phi, rng);
        self.counts.phi.0 += ok as usize;
        self.counts.phi.1 += 1;
        for (j, path) in lambda.iter().enumerate() {
            let mut c = st.theta2.component(j);
            let ok = update_persistence_mh(path, &mut c, prior, steps.phi, rng);
            st.theta2.set_component(j, c);
            self.counts.phi_latent.0 += ok as usize;
            self.counts.phi_latent.1 += 1;
        }
        Ok(())
    }

    pub fn acceptance(&self) -> AcceptanceRates {
        self.counts.rates()
    }
}

/// Run a full chain from PPCA initial fits, keeping thinned post-burn-in states.
pub fn run_chain(
    ds: &LongitudinalDataset,
    prior: &PriorConfig,
    mcmc: &McmcConfig,
    init: &[PpcaFit],
) -> Result<PosteriorChain> {
    prior.validate()?;
    mcmc.validate()?;
    if init.len() != ds.n_times() {
        return Err(DppcaError::Dimension(format!(
            "need {} initial fits, got {}",
            ds.n_times(),
            init.len()
        )));
    }
    if init.iter().any(|f| f.q() != mcmc.q) {
        return Err(DppcaError::Dimension("initial fits do not match mcmc.q".into()));
    }
    let state = ModelState::initial(ds, init, prior)?;
    let mut sampler = Sampler::new(state, ds.slices(), prior, mcmc)?;
    let mut samples = Vec::with_capacity(mcmc.retained_count());
    let mut trace = Vec::with_capacity(mcmc.retained_count());
    for sweep in 1..=mcmc.n_iterations {
        sampler.sweep().map_err(|e| e.at_sweep(sweep))?;
        if mcmc.is_retained(sweep) {
            trace.push(log_joint(&sampler.state, ds.slices(), prior).map_err(|e| e.at_sweep(sweep))?);
            samples.push(sampler.state.clone());
        }
    }
    Ok(PosteriorChain {
        samples,
        acceptance: sampler.acceptance(),
        config: mcmc.clone(),
        log_posterior_trace: trace,
        rotations: None,
    })
}

/// A single block of the sweep, addressed by its indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Scores { i: usize, m: usize },
    LoadingsRow { m: usize, k: usize },
    Eta { m: usize },
    Lambda { j: usize, m: usize },
    Nu,
    Mu { j: usize },
    V2,
    VComponent { j: usize },
    Phi,
    PhiComponent { j: usize },
}

/// Log-density (up to a constant) of the block's full conditional as the sampler
/// uses it, evaluated at the block's current value in `state`. The conditional's
/// parameters are computed from `reference`, which must agree with `state`
/// everywhere outside the block.
pub fn block_log_conditional(
    reference: &ModelState,
    state: &ModelState,
    data: &[DMatrix<f64>],
    prior: &PriorConfig,
    block: Block,
) -> Result<f64> {
    let eta: Vec<f64> = reference.vol.eta.iter().copied().collect();
    Ok(match block {
        Block::Scores { i, m } => {
            let c: GaussianConditional = scores_conditional(reference, &data[m], i, m)?;
            c.ln_pdf(&state.scores[m].row(i).transpose())
        }
        Block::LoadingsRow { m, k } => {
            let c = loadings_row_conditional(reference, &data[m], prior, m, k)?;
            c.ln_pdf(&state.loadings[m].row(k).transpose())
        }
        Block::Eta { m } => eta_target(reference, &data[m], m).ln_target(state.vol.eta[m]),
        Block::Lambda { j, m } => lambda_target(reference, m, j).ln_target(state.vol.lambda[(m, j)]),
        Block::Nu => {
            let t = &reference.theta1;
            let (mean, var) = sv_center_conditional(&eta, t.phi, t.v2, prior.nu_mean, prior.nu_var);
            ln_normal_pdf(state.theta1.nu, mean, var)
        }
        Block::Mu { j } => {
            let c = reference.theta2.component(j);
            let path = updates::column(&reference.vol.lambda, j);
            let (mean, var) = sv_center_conditional(&path, c.phi, c.v2, prior.mu_mean, prior.mu_var);
            ln_normal_pdf(state.theta2.mu[j], mean, var)
        }
        Block::V2 => {
            let t = &reference.theta1;
            let (shape, scale) = sv_innovation_conditional(&eta, t.nu, t.phi, prior.ig_alpha, prior.ig_beta);
            crate::linalg::ln_inv_gamma_pdf(state.theta1.v2, shape, scale)
        }
        Block::VComponent { j } => {
            let c = reference.theta2.component(j);
            let path = updates::column(&reference.vol.lambda, j);
            let (shape, scale) = sv_innovation_conditional(&path, c.nu, c.phi, prior.ig_alpha, prior.ig_beta);
            crate::linalg::ln_inv_gamma_pdf(state.theta2.v[j], shape, scale)
        }
        Block::Phi => {
            let t = &reference.theta1;
            persistence_log_target(&eta, t.nu, t.v2, prior, state.theta1.phi)
        }
        Block::PhiComponent { j } => {
            let c = reference.theta2.component(j);
            let path = updates::column(&reference.vol.lambda, j);
            persistence_log_target(&path, c.nu, c.v2, prior, state.theta2.phi[j])
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::LN_2PI;

    #[test]
    fn standard_normal_corner_case() {
        let state = ModelState::new(
            vec![DMatrix::zeros(1, 1)],
            vec![DMatrix::zeros(1, 1)],
            DVector::zeros(1),
            DMatrix::zeros(1, 1),
            SvScalarParams { nu: 0.0, phi: 0.0, v2: 1.0 },
            SvVectorParams { mu: vec![0.0], phi: vec![0.0], v: vec![1.0] },
        );
        let data = vec![DMatrix::zeros(1, 1)];
        let v = log_aug_likelihood(&state, &data).unwrap();
        // -log(2π) from the two unit Gaussians, plus two N(0 | 0, 1) initial terms
        assert!((v - (-LN_2PI - LN_2PI)).abs() < 1e-14);
    }

    #[test]
    fn larger_residual_lowers_likelihood() {
        let mut state = ModelState::new(
            vec![DMatrix::from_element(2, 1, 1.0)],
            vec![DMatrix::from_element(1, 1, 0.5)],
            DVector::zeros(1),
            DMatrix::zeros(1, 1),
            SvScalarParams { nu: 0.0, phi: 0.3, v2: 1.0 },
            SvVectorParams { mu: vec![0.0], phi: vec![0.3], v: vec![1.0] },
        );
        let mut data = vec![DMatrix::from_element(1, 2, 0.5)];
        let base = log_aug_likelihood(&state, &data).unwrap();
        let mut prev = base;
        for d in 1..5 {
            data[0][(0, 1)] = 0.5 + d as f64;
            let v = log_aug_likelihood(&state, &data).unwrap();
            assert!(v < prev);
            prev = v;
        }
        state.scores.push(DMatrix::zeros(1, 1));
        assert!(log_aug_likelihood(&state, &data).is_err());
    }
}
