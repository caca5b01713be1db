//! Synthetic longitudinal datasets drawn from the generative model, with the
//! realized ground truth kept alongside for validation.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::error::{DppcaError, Result};
use crate::linalg::{random_orthonormal, std_normal};
use crate::sv::{simulate_sv_scalar, simulate_sv_vector, SvScalarParams, SvVectorParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LoadingScheme {
    /// One random orthonormal-column matrix shared by every time point.
    Fixed,
    /// Columns rotate out of the base subspace by `angle_per_step` radians per time point.
    Rotating { angle_per_step: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub n: usize,
    pub p: usize,
    pub n_times: usize,
    pub q: usize,
    pub theta1: SvScalarParams,
    pub theta2: SvVectorParams,
    pub scheme: LoadingScheme,
}

impl Scenario {
    /// n = 20, p = 30, M = 8, q = 2, all persistences 0.8, ν = -1, μ = (1, 0.5),
    /// innovation variances 0.1.
    pub fn desk() -> Self {
        Scenario {
            n: 20,
            p: 30,
            n_times: 8,
            q: 2,
            theta1: SvScalarParams { nu: -1.0, phi: 0.8, v2: 0.1 },
            theta2: SvVectorParams {
                mu: vec![1.0, 0.5],
                phi: vec![0.8, 0.8],
                v: vec![0.1, 0.1],
            },
            scheme: LoadingScheme::Fixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `loadings[m]` is `p` rows of `q` values.
    pub loadings: Vec<Vec<Vec<f64>>>,
    pub theta1: SvScalarParams,
    pub theta2: SvVectorParams,
    pub eta: Vec<f64>,
    /// `lambda[m][j]`
    pub lambda: Vec<Vec<f64>>,
    /// `scores[m][i][j]`
    pub scores: Vec<Vec<Vec<f64>>>,
    pub seed: u64,
}

impl GroundTruth {
    pub fn loading_matrix(&self, m: usize) -> DMatrix<f64> {
        let rows = &self.loadings[m];
        DMatrix::from_fn(rows.len(), rows[0].len(), |k, j| rows[k][j])
    }

    /// Model-implied covariance `W_m diag(e^{λ_·m}) W_mᵀ + e^{η_m} I` at time `m`.
    pub fn implied_cov(&self, m: usize) -> DMatrix<f64> {
        let w = self.loading_matrix(m);
        let h = DMatrix::from_diagonal(&DVector::from_iterator(
            w.ncols(),
            self.lambda[m].iter().map(|l| l.exp()),
        ));
        let p = w.nrows();
        &w * h * w.transpose() + DMatrix::identity(p, p) * self.eta[m].exp()
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn loadings_for<R: Rng + ?Sized>(s: &Scenario, rng: &mut R) -> Vec<DMatrix<f64>> {
    match s.scheme {
        LoadingScheme::Fixed => {
            let w = random_orthonormal(s.p, s.q, rng);
            vec![w; s.n_times]
        }
        LoadingScheme::Rotating { angle_per_step } => {
            // base and perpendicular blocks are mutually orthogonal, so every
            // cos/sin mixture keeps orthonormal columns
            let basis = random_orthonormal(s.p, 2 * s.q, rng);
            let base = basis.columns(0, s.q).into_owned();
            let perp = basis.columns(s.q, s.q).into_owned();
            (0..s.n_times)
                .map(|m| {
                    let a = angle_per_step * m as f64;
                    &base * a.cos() + &perp * a.sin()
                })
                .collect()
        }
    }
}

/// Draw a dataset of `n` observations labelled `group` from the scenario.
pub fn simulate_dppca<R: Rng + ?Sized>(
    scenario: &Scenario,
    group: &str,
    rng: &mut R,
) -> Result<(LongitudinalDataset, GroundTruth)> {
    let s = scenario;
    if s.q == 0 || s.q >= s.n.min(s.p) {
        return Err(DppcaError::Invalid(format!(
            "need 0 < q < min(n, p), got q = {}, n = {}, p = {}",
            s.q, s.n, s.p
        )));
    }
    if s.theta2.q() != s.q {
        return Err(DppcaError::Dimension("theta2 does not have q components".into()));
    }
    if matches!(s.scheme, LoadingScheme::Rotating { .. }) && 2 * s.q > s.p {
        return Err(DppcaError::Invalid("rotating loadings need p >= 2q".into()));
    }
    let eta = simulate_sv_scalar(&s.theta1, s.n_times, rng)?;
    let lambda = simulate_sv_vector(&s.theta2, s.n_times, rng)?;
    let loadings = loadings_for(s, rng);
    let mut slices = Vec::with_capacity(s.n_times);
    let mut scores = Vec::with_capacity(s.n_times);
    for m in 0..s.n_times {
        let sd_u: Vec<f64> = (0..s.q).map(|j| (0.5 * lambda[(m, j)]).exp()).collect();
        let u = DMatrix::from_fn(s.n, s.q, |_, j| sd_u[j] * std_normal(rng));
        let sd_e = (0.5 * eta[m]).exp();
        let noise = DMatrix::from_fn(s.n, s.p, |_, _| sd_e * std_normal(rng));
        slices.push(&u * loadings[m].transpose() + noise);
        scores.push(u);
    }
    let ds = LongitudinalDataset::new(
        (1..=s.n).map(|i| format!("{group}{i}")).collect(),
        vec![group.to_string(); s.n],
        (1..=s.p).map(|k| format!("v{k}")).collect(),
        (1..=s.n_times).map(|m| m.to_string()).collect(),
        slices,
    )?;
    let truth = GroundTruth {
        loadings: loadings.iter().map(matrix_rows).collect(),
        theta1: s.theta1,
        theta2: s.theta2.clone(),
        eta,
        lambda: matrix_rows(&lambda),
        scores: scores.iter().map(matrix_rows).collect(),
        seed: 0,
    };
    Ok((ds, truth))
}

/// Seeded wrapper; the seed is recorded in the ground truth.
pub fn simulate_seeded(scenario: &Scenario, group: &str, seed: u64) -> Result<(LongitudinalDataset, GroundTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ds, mut truth) = simulate_dppca(scenario, group, &mut rng)?;
    truth.seed = seed;
    Ok((ds, truth))
}

/// Stack datasets that share variables and time labels (e.g. separately simulated groups).
pub fn concat_observations(parts: &[LongitudinalDataset]) -> Result<LongitudinalDataset> {
    let first = parts
        .first()
        .ok_or_else(|| DppcaError::Invalid("nothing to concatenate".into()))?;
    let mut ids = Vec::new();
    let mut groups = Vec::new();
    for d in parts {
        if d.variable_names() != first.variable_names() || d.time_labels() != first.time_labels() {
            return Err(DppcaError::Dimension("datasets disagree on variables or times".into()));
        }
        ids.extend(d.obs_ids().iter().cloned());
        groups.extend(d.groups().iter().cloned());
    }
    let slices = (0..first.n_times())
        .map(|m| {
            let n: usize = parts.iter().map(|d| d.n()).sum();
            let mut out = DMatrix::zeros(n, first.p());
            let mut row = 0;
            for d in parts {
                out.rows_mut(row, d.n()).copy_from(d.slice(m));
                row += d.n();
            }
            out
        })
        .collect();
    LongitudinalDataset::new(
        ids,
        groups,
        first.variable_names().to_vec(),
        first.time_labels().to_vec(),
        slices,
    )
}

/// Add noise with a compound-symmetric covariance (`variance` on the diagonal,
/// `variance * correlation` off it) to the variables in `block`, independently
/// per observation and time point. The isotropic-noise model cannot represent it.
pub fn inject_covariance_block<R: Rng + ?Sized>(
    ds: &LongitudinalDataset,
    block: Range<usize>,
    variance: f64,
    correlation: f64,
    rng: &mut R,
) -> Result<LongitudinalDataset> {
    if block.end > ds.p() || block.is_empty() {
        return Err(DppcaError::Invalid(format!("block {block:?} outside 0..{}", ds.p())));
    }
    if !(0.0..1.0).contains(&correlation) || variance <= 0.0 {
        return Err(DppcaError::Invalid("need variance > 0 and 0 <= correlation < 1".into()));
    }
    let shared_sd = (variance * correlation).sqrt();
    let own_sd = (variance * (1.0 - correlation)).sqrt();
    let mut out = ds.clone();
    for m in 0..ds.n_times() {
        let mut x = ds.slice(m).clone();
        for i in 0..ds.n() {
            let shared = shared_sd * std_normal(rng);
            for k in block.clone() {
                x[(i, k)] += shared + own_sd * std_normal(rng);
            }
        }
        out.set_slice(m, x)?;
    }
    Ok(out)
}

/// Add a polynomial mean trend `Σ_r coefs[r] t^r` in the centered time
/// `t = m + 1 - (M + 1)/2` to variable `k`, optionally restricted to one group.
pub fn add_mean_trend(ds: &LongitudinalDataset, k: usize, coefs: &[f64], group: Option<&str>) -> Result<LongitudinalDataset> {
    if k >= ds.p() {
        return Err(DppcaError::Invalid(format!("variable {k} out of range")));
    }
    let mut out = ds.clone();
    let center = (ds.n_times() as f64 + 1.0) / 2.0;
    for m in 0..ds.n_times() {
        let t = (m + 1) as f64 - center;
        let shift: f64 = coefs.iter().enumerate().map(|(r, c)| c * t.powi(r as i32)).sum();
        let mut x = ds.slice(m).clone();
        for i in 0..ds.n() {
            if group.is_none_or(|g| ds.groups()[i] == g) {
                x[(i, k)] += shift;
            }
        }
        out.set_slice(m, x)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sample_cov;

    #[test]
    fn seeded_runs_are_identical() {
        let s = Scenario::desk();
        let (a, ta) = simulate_seeded(&s, "g", 12).unwrap();
        let (b, tb) = simulate_seeded(&s, "g", 12).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = simulate_seeded(&s, "g", 13).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn large_sample_covariance_matches_model() {
        let mut s = Scenario::desk();
        s.n = 10_000;
        s.p = 6;
        s.n_times = 3;
        let (ds, truth) = simulate_seeded(&s, "g", 4).unwrap();
        for m in 0..s.n_times {
            let emp = sample_cov(ds.slice(m));
            let model = truth.implied_cov(m);
            for a in 0..s.p {
                for b in 0..s.p {
                    // five standard errors of a Gaussian sample covariance entry
                    let se = ((model[(a, a)] * model[(b, b)] + model[(a, b)].powi(2)) / s.n as f64).sqrt();
                    let err = (emp[(a, b)] - model[(a, b)]).abs();
                    assert!(err < 5.0 * se, "m={m} ({a},{b})");
                    // 5% of the entry on the diagonal, of sqrt(s_aa s_bb) off it
                    assert!(err < 0.05 * (model[(a, a)] * model[(b, b)]).sqrt(), "m={m} ({a},{b}) {err}");
                }
            }
        }
    }

    #[test]
    fn vanishing_latent_variance_leaves_isotropic_noise() {
        let s = Scenario {
            n: 10_000,
            p: 5,
            n_times: 2,
            q: 1,
            theta1: SvScalarParams { nu: 0.0, phi: 0.5, v2: 0.1 },
            theta2: SvVectorParams { mu: vec![-30.0], phi: vec![0.0], v: vec![1e-6] },
            scheme: LoadingScheme::Fixed,
        };
        let (ds, truth) = simulate_seeded(&s, "g", 8).unwrap();
        for m in 0..2 {
            let emp = sample_cov(ds.slice(m));
            let target = DMatrix::identity(5, 5) * truth.eta[m].exp();
            assert!((emp - target).amax() < 0.05 * truth.eta[m].exp());
        }
    }

    #[test]
    fn rotating_scheme_keeps_orthonormal_columns() {
        let mut s = Scenario::desk();
        s.scheme = LoadingScheme::Rotating { angle_per_step: 0.1 };
        let (_, truth) = simulate_seeded(&s, "g", 2).unwrap();
        for m in 0..s.n_times {
            let w = truth.loading_matrix(m);
            assert!((w.transpose() * &w - DMatrix::identity(2, 2)).amax() < 1e-12);
        }
        let angle = crate::linalg::max_principal_angle(&truth.loading_matrix(0), &truth.loading_matrix(7));
        assert!((angle - 0.7).abs() < 1e-9);
    }

    #[test]
    fn mean_trend_and_block_injection() {
        let (ds, _) = simulate_seeded(&Scenario::desk(), "g", 1).unwrap();
        let t = add_mean_trend(&ds, 3, &[0.0, 0.0, 1.0], None).unwrap();
        // t = 1 - 4.5 at the first time point
        assert!((t.value(0, 0, 3) - ds.value(0, 0, 3) - 12.25).abs() < 1e-12);
        assert_eq!(t.value(0, 0, 2), ds.value(0, 0, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inj = inject_covariance_block(&ds, 0..5, 2.0, 0.5, &mut rng).unwrap();
        assert_eq!(inj.value(3, 2, 7), ds.value(3, 2, 7));
        assert_ne!(inj.value(3, 2, 1), ds.value(3, 2, 1));
    }
}
