//! Hyperparameters and chain-control settings.
//!
//! Every knob lives in one JSON document with `prior`, `mcmc`, `data`, `lmm`
//! and `analysis` sections. Missing fields take their defaults, unknown fields
//! are rejected, and [`RunConfig::validate`] names the offending field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DppcaError, Result};

/// Priors on the loadings and on both stochastic-volatility processes.
///
/// Innovation variances get `IG(ig_alpha / 2, ig_beta / 2)`; persistence
/// parameters get a normal truncated to `[-1, 1]`. The same hyperparameters
/// serve the error process and every latent component, except the centers,
/// which have separate normal priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Each loading row has prior covariance `scale * I`.
    pub loading_prior_cov_scale: f64,
    pub nu_mean: f64,
    pub nu_var: f64,
    pub mu_mean: f64,
    pub mu_var: f64,
    pub ig_alpha: f64,
    pub ig_beta: f64,
    pub phi_mean: f64,
    pub phi_var: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            loading_prior_cov_scale: 1.0,
            nu_mean: 0.0,
            nu_var: 10.0,
            mu_mean: 0.0,
            mu_var: 10.0,
            ig_alpha: 6.0,
            ig_beta: 0.5,
            phi_mean: 0.75,
            phi_var: 0.1,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        positive("prior.loading_prior_cov_scale", self.loading_prior_cov_scale)?;
        finite("prior.nu_mean", self.nu_mean)?;
        positive("prior.nu_var", self.nu_var)?;
        finite("prior.mu_mean", self.mu_mean)?;
        positive("prior.mu_var", self.mu_var)?;
        positive("prior.ig_alpha", self.ig_alpha)?;
        positive("prior.ig_beta", self.ig_beta)?;
        finite("prior.phi_mean", self.phi_mean)?;
        positive("prior.phi_var", self.phi_var)?;
        Ok(())
    }

    /// Prior mean of an innovation variance, `(beta/2) / (alpha/2 - 1)`.
    ///
    /// Falls back to the IG mode when the mean does not exist (`alpha <= 2`).
    pub fn innovation_var_mean(&self) -> f64 {
        let shape = self.ig_alpha / 2.0;
        let scale = self.ig_beta / 2.0;
        if shape > 1.0 {
            scale / (shape - 1.0)
        } else {
            scale / (shape + 1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepScales {
    /// Random-walk fallback scale for latent log-volatilities.
    pub lambda: f64,
    /// Random-walk fallback scale for error log-volatilities.
    pub eta: f64,
    /// Standard deviation of the truncated random-walk proposal for persistence.
    pub phi: f64,
}

impl Default for StepScales {
    fn default() -> Self {
        StepScales {
            lambda: 0.5,
            eta: 0.5,
            phi: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub q: usize,
    pub n_iterations: usize,
    pub thin: usize,
    /// Raw sweeps discarded before thinning starts.
    pub burn_in_raw: usize,
    pub seed: u64,
    pub mh_step_scales: StepScales,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            q: 2,
            n_iterations: 500_000,
            thin: 500,
            burn_in_raw: 5_000,
            seed: 1,
            mh_step_scales: StepScales::default(),
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(DppcaError::config("mcmc.q", "must be at least 1"));
        }
        if self.thin == 0 {
            return Err(DppcaError::config("mcmc.thin", "must be at least 1"));
        }
        if self.burn_in_raw >= self.n_iterations {
            return Err(DppcaError::config(
                "mcmc.burn_in_raw",
                format!(
                    "must be smaller than mcmc.n_iterations ({} >= {})",
                    self.burn_in_raw, self.n_iterations
                ),
            ));
        }
        if self.retained_count() == 0 {
            return Err(DppcaError::config(
                "mcmc.thin",
                "no samples would be retained after burn-in and thinning",
            ));
        }
        positive("mcmc.mh_step_scales.lambda", self.mh_step_scales.lambda)?;
        positive("mcmc.mh_step_scales.eta", self.mh_step_scales.eta)?;
        positive("mcmc.mh_step_scales.phi", self.mh_step_scales.phi)?;
        Ok(())
    }

    /// Number of states kept: `floor((n_iterations - burn_in_raw) / thin)`.
    pub fn retained_count(&self) -> usize {
        self.n_iterations.saturating_sub(self.burn_in_raw) / self.thin.max(1)
    }

    /// Whether the state after raw sweep `sweep` (1-based) is kept.
    pub fn is_retained(&self, sweep: usize) -> bool {
        sweep > self.burn_in_raw && (sweep - self.burn_in_raw).is_multiple_of(self.thin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scaling {
    #[default]
    None,
    UnitVariance,
}

impl std::str::FromStr for Scaling {
    type Err = DppcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Scaling::None),
            "unit-variance" => Ok(Scaling::UnitVariance),
            other => Err(DppcaError::config(
                "data.scale",
                format!("expected `none` or `unit-variance`, got `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub group_column: String,
    pub center: bool,
    pub scale: Scaling,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            group_column: "group".to_string(),
            center: true,
            scale: Scaling::None,
        }
    }
}

/// Priors and chain settings for the follow-up mixed models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmmConfig {
    pub beta_prior_var: f64,
    /// Variances get `IG(var_shape, var_rate)`.
    pub var_shape: f64,
    pub var_rate: f64,
    pub n_iterations: usize,
    pub thin: usize,
    pub burn_in_raw: usize,
    pub seed: u64,
    pub max_degree: usize,
}

impl Default for LmmConfig {
    fn default() -> Self {
        LmmConfig {
            beta_prior_var: 100.0,
            var_shape: 0.5,
            var_rate: 0.5 * 0.1,
            n_iterations: 20_000,
            thin: 10,
            burn_in_raw: 2_000,
            seed: 1,
            max_degree: 3,
        }
    }
}

impl LmmConfig {
    pub fn validate(&self) -> Result<()> {
        positive("lmm.beta_prior_var", self.beta_prior_var)?;
        positive("lmm.var_shape", self.var_shape)?;
        positive("lmm.var_rate", self.var_rate)?;
        if self.thin == 0 {
            return Err(DppcaError::config("lmm.thin", "must be at least 1"));
        }
        if self.burn_in_raw >= self.n_iterations {
            return Err(DppcaError::config(
                "lmm.burn_in_raw",
                "must be smaller than lmm.n_iterations",
            ));
        }
        if (self.n_iterations - self.burn_in_raw) / self.thin < 10 {
            return Err(DppcaError::config(
                "lmm.thin",
                "fewer than 10 samples would be retained",
            ));
        }
        if self.max_degree > 3 {
            return Err(DppcaError::config("lmm.max_degree", "must be at most 3"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Variables ranked per time point.
    pub top_k: usize,
    pub ppc_replicates: usize,
    pub ppc_threshold: f64,
    pub ppc_bins: usize,
    /// Use signed-permutation matching instead of full orthogonal Procrustes.
    pub signed_permutation: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            top_k: 5,
            ppc_replicates: 200,
            ppc_threshold: 1.0,
            ppc_bins: 20,
            signed_permutation: false,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(DppcaError::config("analysis.top_k", "must be at least 1"));
        }
        if self.ppc_replicates == 0 {
            return Err(DppcaError::config(
                "analysis.ppc_replicates",
                "must be at least 1",
            ));
        }
        if self.ppc_bins == 0 {
            return Err(DppcaError::config("analysis.ppc_bins", "must be at least 1"));
        }
        finite("analysis.ppc_threshold", self.ppc_threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub prior: PriorConfig,
    pub mcmc: McmcConfig,
    pub data: DataConfig,
    pub lmm: LmmConfig,
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        self.mcmc.validate()?;
        self.lmm.validate()?;
        self.analysis.validate()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s).map_err(|e| {
            // serde reports the offending key in its message; surface it as a field error.
            DppcaError::config(json_error_field(&e.to_string()), e.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DppcaError::io(path, e))?;
        Self::from_json_str(&text)
    }
}

fn json_error_field(msg: &str) -> String {
    // "unknown field `foo`, expected ..." / "invalid type: ... for key `bar`"
    msg.split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<document>".to_string())
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(DppcaError::config(field, format!("must be a positive finite number, got {v}")))
    }
}

fn finite(field: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(DppcaError::config(field, format!("must be finite, got {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_protocol() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.mcmc.n_iterations, 500_000);
        assert_eq!(cfg.mcmc.thin, 500);
        assert_eq!(cfg.mcmc.burn_in_raw, 5_000);
        assert_eq!(cfg.mcmc.retained_count(), 990);
        // IG(6/2, 0.5/2) on the innovation variances
        assert_eq!(cfg.prior.ig_alpha / 2.0, 3.0);
        assert_eq!(cfg.prior.ig_beta / 2.0, 0.25);
        assert!((cfg.prior.innovation_var_mean() - 0.125).abs() < 1e-15);
        assert_eq!(cfg.prior.nu_var, 10.0);
        assert_eq!(cfg.prior.phi_mean, 0.75);
        assert_eq!(cfg.prior.phi_var, 0.1);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_document_fills_defaults() {
        let cfg = RunConfig::from_json_str(r#"{"mcmc": {"n_iterations": 100, "thin": 2, "burn_in_raw": 10}}"#)
            .unwrap();
        assert_eq!(cfg.mcmc.retained_count(), 45);
        assert_eq!(cfg.prior, PriorConfig::default());
    }

    #[test]
    fn invalid_field_is_named() {
        let err = RunConfig::from_json_str(r#"{"prior": {"nu_var": -1}}"#).unwrap_err();
        assert!(err.to_string().contains("prior.nu_var"), "{err}");
        assert!(err.is_config());

        let err = RunConfig::from_json_str(r#"{"mcmc": {"bogus": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");

        let err =
            RunConfig::from_json_str(r#"{"mcmc": {"n_iterations": 10, "burn_in_raw": 10}}"#).unwrap_err();
        assert!(err.to_string().contains("mcmc.burn_in_raw"));
    }

    #[test]
    fn retention_schedule() {
        let cfg = McmcConfig {
            n_iterations: 25,
            thin: 5,
            burn_in_raw: 3,
            ..Default::default()
        };
        let kept: Vec<usize> = (1..=cfg.n_iterations).filter(|&s| cfg.is_retained(s)).collect();
        assert_eq!(kept, vec![8, 13, 18, 23]);
        assert_eq!(kept.len(), cfg.retained_count());
    }
}
