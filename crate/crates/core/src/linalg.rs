//! Small dense-matrix and density helpers shared by the samplers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{DppcaError, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn ln_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

/// Log-density of `IG(shape, scale)` (density ∝ x^{-shape-1} e^{-scale/x}).
pub fn ln_inv_gamma_pdf(x: f64, shape: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * scale.ln() - statrs::function::gamma::ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

pub fn sample_inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / scale)
        .map_err(|e| DppcaError::Numerical(format!("inverse-gamma({shape}, {scale}): {e}")))?;
    Ok(1.0 / g.sample(rng))
}

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn std_normal_vec<R: Rng + ?Sized>(len: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(len, |_, _| std_normal(rng))
}

/// Multivariate normal in precision form: density ∝ exp(-½ (x-m)ᵀ P (x-m)).
#[derive(Debug, Clone)]
pub struct GaussianConditional {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl GaussianConditional {
    /// Build from precision `P` and the linear term `b`, so that the mean is `P⁻¹ b`.
    pub fn from_precision(precision: DMatrix<f64>, linear: &DVector<f64>) -> Result<Self> {
        let chol = Cholesky::new(precision.clone()).ok_or_else(|| {
            DppcaError::Numerical(format!(
                "precision matrix is not positive definite (diag = {:?})",
                precision.diagonal().as_slice()
            ))
        })?;
        let mean = chol.solve(linear);
        Ok(GaussianConditional {
            mean,
            precision,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        // x = m + L⁻ᵀ z has covariance (L Lᵀ)⁻¹ = P⁻¹
        let z = std_normal_vec(self.dim(), rng);
        let l = self.chol.l();
        let offset = l
            .transpose()
            .solve_upper_triangular(&z)
            .expect("Cholesky factor is non-singular");
        &self.mean + offset
    }

    pub fn ln_pdf(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        let quad = (d.transpose() * &self.precision * &d)[(0, 0)];
        let ln_det_prec: f64 = 2.0 * self.chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (self.dim() as f64 * LN_2PI - ln_det_prec + quad)
    }
}

/// Sample covariance with divisor `n` (maximum-likelihood form), after removing column means.
pub fn sample_cov(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    (centered.transpose() * &centered) / n
}

/// Uniformly distributed `p x q` matrix with orthonormal columns (Haar measure).
pub fn random_orthonormal<R: Rng + ?Sized>(p: usize, q: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(p, q, |_, _| std_normal(rng));
    let qr = g.qr();
    let mut qm = qr.q();
    let r = qr.r();
    for j in 0..q {
        if r[(j, j)] < 0.0 {
            qm.column_mut(j).neg_mut();
        }
    }
    qm
}

pub fn random_orthogonal<R: Rng + ?Sized>(q: usize, rng: &mut R) -> DMatrix<f64> {
    random_orthonormal(q, q, rng)
}

/// Projector onto the column span of `w`: `W (WᵀW)⁻¹ Wᵀ`.
pub fn column_projector(w: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let gram = w.transpose() * w;
    let inv = gram.try_inverse()?;
    Some(w * inv * w.transpose())
}

/// Largest principal angle (radians) between the column spans of `a` and `b`.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let s = (qa.transpose() * qb).singular_values();
    let smallest = s.iter().cloned().fold(f64::INFINITY, f64::min).clamp(-1.0, 1.0);
    smallest.acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_conditional_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prec = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let b = DVector::from_vec(vec![1.0, -1.0]);
        let g = GaussianConditional::from_precision(prec.clone(), &b).unwrap();
        let cov = prec.try_inverse().unwrap();
        let mean = &cov * &b;
        assert!((&g.mean - &mean).amax() < 1e-12);
        let draws = 100_000;
        let mut acc = DVector::zeros(2);
        let mut acc2 = DMatrix::zeros(2, 2);
        for _ in 0..draws {
            let x = g.sample(&mut rng);
            acc += &x;
            acc2 += &x * x.transpose();
        }
        let m = acc / draws as f64;
        let c = acc2 / draws as f64 - &m * m.transpose();
        assert!((&m - &mean).amax() < 0.02);
        assert!((&c - &cov).amax() < 0.02);
    }

    #[test]
    fn gaussian_ln_pdf_matches_univariate() {
        let g = GaussianConditional::from_precision(
            DMatrix::from_element(1, 1, 4.0),
            &DVector::from_element(1, 2.0),
        )
        .unwrap();
        let x = DVector::from_element(1, 0.3);
        assert!((g.ln_pdf(&x) - ln_normal_pdf(0.3, 0.5, 0.25)).abs() < 1e-14);
    }

    #[test]
    fn inv_gamma_density_integrates_to_one() {
        let (a, b) = (3.0, 0.25);
        let h = 1e-4;
        let total: f64 = (1..200_000).map(|i| ln_inv_gamma_pdf(i as f64 * h, a, b).exp() * h).sum();
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_orthonormal(7, 3, &mut rng);
        assert!((w.transpose() * &w - DMatrix::identity(3, 3)).amax() < 1e-12);
        assert!(max_principal_angle(&w, &(&w * random_orthogonal(3, &mut rng))) < 1e-6);
    }
}
