//! Posterior summaries, influential-variable ranking and posterior predictive checks.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::error::{DppcaError, Result};
use crate::linalg::{sample_cov, std_normal};
use crate::sampler::{ModelState, PosteriorChain};

pub const MIN_SAMPLES: usize = 10;
pub const MAX_ACF_LAG: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    /// `acf[k]` for `k = 0..=min(40, S - 1)`.
    pub acf: Vec<f64>,
    pub ess: f64,
}

impl ParameterSummary {
    /// `"0.69 (0.15, 0.97)"` at the given number of decimals.
    pub fn format(&self, decimals: usize) -> String {
        format_estimate(self.mean, self.lower, self.upper, decimals)
    }
}

pub fn format_estimate(mean: f64, lower: f64, upper: f64, decimals: usize) -> String {
    format!("{mean:.decimals$} ({lower:.decimals$}, {upper:.decimals$})")
}

/// Type-7 (linear interpolation) quantile of already sorted values.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 2.5% and 97.5% type-7 quantiles.
pub fn credible_interval(values: &[f64]) -> (f64, f64) {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    (quantile_sorted(&s, 0.025), quantile_sorted(&s, 0.975))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

struct Acf {
    centered: Vec<f64>,
    c0: f64,
}

impl Acf {
    fn new(values: &[f64]) -> Self {
        let mu = mean(values);
        let centered: Vec<f64> = values.iter().map(|v| v - mu).collect();
        let c0 = centered.iter().map(|d| d * d).sum::<f64>() / values.len() as f64;
        Acf { centered, c0 }
    }

    /// Biased estimator; zero for every positive lag of a constant chain.
    fn at(&self, k: usize) -> f64 {
        if k == 0 {
            return 1.0;
        }
        if self.c0 <= 0.0 || k >= self.centered.len() {
            return 0.0;
        }
        let s = self.centered.len();
        let ck: f64 = (0..s - k).map(|t| self.centered[t] * self.centered[t + k]).sum::<f64>() / s as f64;
        ck / self.c0
    }
}

pub fn autocorrelation(values: &[f64], max_lag: usize) -> Vec<f64> {
    let acf = Acf::new(values);
    (0..=max_lag.min(values.len().saturating_sub(1))).map(|k| acf.at(k)).collect()
}

/// `S / (1 + 2 Σ ρ_k)`, summing positive lags until the first negative estimate.
pub fn effective_sample_size(values: &[f64]) -> f64 {
    let acf = Acf::new(values);
    let s = values.len();
    let mut sum = 0.0;
    for k in 1..s {
        let r = acf.at(k);
        if r < 0.0 || (r == 0.0 && acf.c0 <= 0.0) {
            break;
        }
        sum += r;
    }
    s as f64 / (1.0 + 2.0 * sum)
}

pub fn summarize_trace(name: &str, values: &[f64]) -> Result<ParameterSummary> {
    if values.len() < MIN_SAMPLES {
        return Err(DppcaError::TooFewSamples { needed: MIN_SAMPLES, have: values.len() });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DppcaError::Numerical(format!("trace of {name} is not finite")));
    }
    let (lower, upper) = credible_interval(values);
    Ok(ParameterSummary {
        name: name.to_string(),
        mean: mean(values),
        lower,
        upper,
        acf: autocorrelation(values, MAX_ACF_LAG),
        ess: effective_sample_size(values),
    })
}

type Extractor = Box<dyn Fn(&ModelState) -> f64 + Sync>;

/// Every scalar parameter and log-volatility, named as in chain output files.
pub fn scalar_parameters(q: usize, n_times: usize) -> Vec<(String, Extractor)> {
    let mut out: Vec<(String, Extractor)> = vec![
        ("nu".into(), Box::new(|s: &ModelState| s.theta1.nu)),
        ("phi".into(), Box::new(|s: &ModelState| s.theta1.phi)),
        ("v2".into(), Box::new(|s: &ModelState| s.theta1.v2)),
    ];
    for j in 0..q {
        out.push((format!("mu_{}", j + 1), Box::new(move |s: &ModelState| s.theta2.mu[j])));
        out.push((format!("phi_{}", j + 1), Box::new(move |s: &ModelState| s.theta2.phi[j])));
        out.push((format!("V_{}", j + 1), Box::new(move |s: &ModelState| s.theta2.v[j])));
    }
    for m in 0..n_times {
        out.push((format!("eta_{}", m + 1), Box::new(move |s: &ModelState| s.vol.eta[m])));
    }
    for m in 0..n_times {
        for j in 0..q {
            out.push((format!("lambda_{}_{}", j + 1, m + 1), Box::new(move |s: &ModelState| s.vol.lambda[(m, j)])));
        }
    }
    out
}

pub fn summarize(chain: &PosteriorChain) -> Result<Vec<ParameterSummary>> {
    if chain.len() < MIN_SAMPLES {
        return Err(DppcaError::TooFewSamples { needed: MIN_SAMPLES, have: chain.len() });
    }
    scalar_parameters(chain.q(), chain.n_times())
        .into_par_iter()
        .map(|(name, f)| summarize_trace(name, &chain.trace(f)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub variable: usize,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub ci_excludes_zero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRanking {
    /// Top entries per time point, most influential first.
    pub per_time: Vec<Vec<RankEntry>>,
    /// Distinct variables over all time points, in order of first appearance.
    pub union: Vec<usize>,
}

/// Rank variables per time point by the absolute posterior mean of their
/// loading on the first column; ties go to the lower index.
pub fn rank_influential(chain: &PosteriorChain, k: usize) -> Result<InfluenceRanking> {
    if chain.is_empty() {
        return Err(DppcaError::TooFewSamples { needed: 1, have: 0 });
    }
    let p = chain.samples[0].loadings[0].nrows();
    let k = k.min(p);
    let mut per_time = Vec::with_capacity(chain.n_times());
    let mut union = Vec::new();
    for m in 0..chain.n_times() {
        let mut entries: Vec<RankEntry> = (0..p)
            .map(|v| {
                let draws = chain.trace(|s| s.loadings[m][(v, 0)]);
                let (lower, upper) = credible_interval(&draws);
                RankEntry {
                    variable: v,
                    mean: mean(&draws),
                    lower,
                    upper,
                    ci_excludes_zero: lower > 0.0 || upper < 0.0,
                }
            })
            .collect();
        entries.sort_by(|a, b| b.mean.abs().total_cmp(&a.mean.abs()).then(a.variable.cmp(&b.variable)));
        entries.truncate(k);
        for e in &entries {
            if !union.contains(&e.variable) {
                union.push(e.variable);
            }
        }
        per_time.push(entries);
    }
    Ok(InfluenceRanking { per_time, union })
}

/// Mean absolute difference over the upper triangle, diagonal included.
pub fn covariance_mad(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let p = a.nrows();
    let mut total = 0.0;
    for c in 0..p {
        for r in 0..=c {
            total += (a[(r, c)] - b[(r, c)]).abs();
        }
    }
    total / (p * (p + 1) / 2) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` bin edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[0, upper]`; the last bin is closed.
    pub fn new(values: &[f64], bins: usize, upper: f64) -> Self {
        let bins = bins.max(1);
        let upper = if upper > 0.0 { upper } else { 1.0 };
        let width = upper / bins as f64;
        let edges = (0..=bins).map(|b| b as f64 * width).collect();
        let mut counts = vec![0; bins];
        for v in values {
            let b = ((v / width).floor() as usize).min(bins - 1);
            counts[b] += 1;
        }
        Histogram { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcReport {
    /// `mads[r][m]` for replicate `r` at time point `m`.
    pub mads: Vec<Vec<f64>>,
    /// Index of the retained sample behind each replicate.
    pub draws: Vec<usize>,
    pub threshold: f64,
    pub histogram: Histogram,
    pub fraction_above: f64,
}

/// Replicate dataset at one posterior state, same shape as the data.
pub fn replicate_dataset<R: rand::Rng + ?Sized>(state: &ModelState, n: usize, rng: &mut R) -> Vec<DMatrix<f64>> {
    let q = state.q();
    (0..state.n_times())
        .map(|m| {
            let w = &state.loadings[m];
            let sd_u: Vec<f64> = (0..q).map(|j| (0.5 * state.vol.lambda[(m, j)]).exp()).collect();
            let u = DMatrix::from_fn(n, q, |_, j| sd_u[j] * std_normal(rng));
            let sd_e = (0.5 * state.vol.eta[m]).exp();
            let e = DMatrix::from_fn(n, w.nrows(), |_, _| sd_e * std_normal(rng));
            u * w.transpose() + e
        })
        .collect()
}

/// Compare observed per-time covariances with those of datasets replicated from
/// `n_reps` evenly spaced retained states. Replicate `r` draws from stream `r` of
/// a generator seeded with `seed`, so results do not depend on thread scheduling.
pub fn posterior_predictive_check(
    chain: &PosteriorChain,
    ds: &LongitudinalDataset,
    n_reps: usize,
    threshold: f64,
    bins: usize,
    seed: u64,
) -> Result<PpcReport> {
    if chain.is_empty() || n_reps == 0 {
        return Err(DppcaError::TooFewSamples { needed: 1, have: chain.len().min(n_reps) });
    }
    chain.samples[0].check_dims(ds.slices())?;
    let observed: Vec<DMatrix<f64>> = ds.slices().iter().map(sample_cov).collect();
    let draws: Vec<usize> = (0..n_reps).map(|r| r * chain.len() / n_reps).collect();
    let mads: Vec<Vec<f64>> = draws
        .par_iter()
        .enumerate()
        .map(|(r, &s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            replicate_dataset(&chain.samples[s], ds.n(), &mut rng)
                .iter()
                .zip(&observed)
                .map(|(x, obs)| covariance_mad(obs, &sample_cov(x)))
                .collect()
        })
        .collect();
    let flat: Vec<f64> = mads.iter().flatten().copied().collect();
    let above = flat.iter().filter(|v| **v > threshold).count();
    let top = flat.iter().copied().fold(threshold, f64::max);
    Ok(PpcReport {
        histogram: Histogram::new(&flat, bins, top),
        fraction_above: above as f64 / flat.len() as f64,
        mads,
        draws,
        threshold,
    })
}
