#![allow(dead_code)]

use std::io::Write;

use dppca::config::McmcConfig;
use dppca::simulate::GroundTruth;
use dppca::sampler::ModelState;
use nalgebra::{DMatrix, DVector};

/// Print straight to stderr so the line survives test-output capture.
pub fn report(passed: bool, name: &str, detail: &str) {
    let tag = if passed { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] {name}: {detail}");
}

pub fn state_from_truth(t: &GroundTruth) -> ModelState {
    let m_times = t.loadings.len();
    let q = t.theta2.q();
    ModelState::new(
        (0..m_times).map(|m| t.loading_matrix(m)).collect(),
        t.scores
            .iter()
            .map(|s| DMatrix::from_fn(s.len(), q, |i, j| s[i][j]))
            .collect(),
        DVector::from_vec(t.eta.clone()),
        DMatrix::from_fn(m_times, q, |m, j| t.lambda[m][j]),
        t.theta1,
        t.theta2.clone(),
    )
}

pub fn short_chain(seed: u64, n_iterations: usize, thin: usize, burn_in_raw: usize) -> McmcConfig {
    McmcConfig {
        n_iterations,
        thin,
        burn_in_raw,
        seed,
        ..McmcConfig::default()
    }
}

/// Normalized density and CDF on an equally spaced grid from unnormalized log values.
pub struct GridDensity {
    pub x: Vec<f64>,
    pub pdf: Vec<f64>,
    pub cdf: Vec<f64>,
}

impl GridDensity {
    pub fn new(x: Vec<f64>, log_values: &[f64]) -> Self {
        let top = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_values.iter().map(|l| (l - top).exp()).collect();
        let mut cdf = vec![0.0; x.len()];
        for i in 1..x.len() {
            cdf[i] = cdf[i - 1] + 0.5 * (w[i] + w[i - 1]) * (x[i] - x[i - 1]);
        }
        let z = cdf[x.len() - 1];
        GridDensity {
            pdf: w.iter().map(|v| v / z).collect(),
            cdf: cdf.iter().map(|v| v / z).collect(),
            x,
        }
    }

    pub fn mean(&self) -> f64 {
        self.expect(|x| x)
    }

    pub fn expect(&self, g: impl Fn(f64) -> f64) -> f64 {
        let f: Vec<f64> = self.x.iter().zip(&self.pdf).map(|(x, p)| g(*x) * p).collect();
        (1..self.x.len()).map(|i| 0.5 * (f[i] + f[i - 1]) * (self.x[i] - self.x[i - 1])).sum()
    }

    pub fn cdf_at(&self, v: f64) -> f64 {
        let n = self.x.len();
        if v <= self.x[0] {
            return 0.0;
        }
        if v >= self.x[n - 1] {
            return 1.0;
        }
        let i = self.x.partition_point(|x| *x <= v);
        let (x0, x1) = (self.x[i - 1], self.x[i]);
        // density is linear between nodes, so integrate it exactly
        let (p0, p1) = (self.pdf[i - 1], self.pdf[i]);
        let h = v - x0;
        let slope = (p1 - p0) / (x1 - x0);
        self.cdf[i - 1] + p0 * h + 0.5 * slope * h * h
    }

    /// Kolmogorov–Smirnov distance between the grid CDF and an empirical sample.
    pub fn ks(&self, draws: &[f64]) -> f64 {
        let mut s = draws.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len() as f64;
        s.iter()
            .enumerate()
            .map(|(i, v)| {
                let f = self.cdf_at(*v);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}
