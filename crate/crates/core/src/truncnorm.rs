//! Normal distribution truncated to an interval.

use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::linalg::{ln_normal_pdf, std_normal};

/// Below this window probability, rejection from the parent normal is abandoned
/// in favour of inverse-CDF sampling.
const REJECTION_MIN_MASS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedNormal {
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

fn std_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

fn std_inv_cdf(u: f64) -> f64 {
    Normal::standard().inverse_cdf(u)
}

impl TruncatedNormal {
    pub fn new(mean: f64, sd: f64, lo: f64, hi: f64) -> Self {
        assert!(sd > 0.0 && lo < hi, "invalid truncated normal");
        TruncatedNormal { mean, sd, lo, hi }
    }

    fn z_bounds(&self) -> (f64, f64) {
        ((self.lo - self.mean) / self.sd, (self.hi - self.mean) / self.sd)
    }

    /// Probability mass of the parent normal inside `[lo, hi]`.
    pub fn mass(&self) -> f64 {
        let (a, b) = self.z_bounds();
        if a > 0.0 {
            std_cdf(-a) - std_cdf(-b)
        } else {
            std_cdf(b) - std_cdf(a)
        }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x < self.lo || x > self.hi {
            return f64::NEG_INFINITY;
        }
        ln_normal_pdf(x, self.mean, self.sd * self.sd) - self.mass().ln()
    }

    pub fn mean_value(&self) -> f64 {
        let (a, b) = self.z_bounds();
        let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        self.mean + self.sd * (phi(a) - phi(b)) / self.mass()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.mass() >= REJECTION_MIN_MASS {
            loop {
                let x = self.mean + self.sd * std_normal(rng);
                if x >= self.lo && x <= self.hi {
                    return x;
                }
            }
        }
        self.sample_inverse_cdf(rng)
    }

    pub fn sample_inverse_cdf<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (a, b) = self.z_bounds();
        // Work in the lower tail, where the CDF keeps its relative precision.
        let (lo, hi, sign) = if a > 0.0 { (-b, -a, -1.0) } else { (a, b, 1.0) };
        let (fa, fb) = (std_cdf(lo), std_cdf(hi));
        let u = fa + rng.random::<f64>() * (fb - fa);
        let z = std_inv_cdf(u).clamp(lo, hi);
        self.mean + self.sd * sign * z
    }
}
