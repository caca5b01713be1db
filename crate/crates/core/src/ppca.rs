//! Closed-form maximum-likelihood probabilistic PCA.
//!
//! For centered data with sample covariance `S` (divisor `n`), the MLE is
//! `W = U_q (Λ_q - σ² I)^{1/2}` with `σ²` the mean of the trailing `p - q`
//! eigenvalues. The rotation is fixed to the identity and each column is
//! signed so that its largest-magnitude entry is positive, making the fit a
//! reproducible template for identifying sampled loadings.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::{column_means, LongitudinalDataset};
use crate::error::{DppcaError, Result};
use crate::linalg::LN_2PI;

#[derive(Debug, Clone, PartialEq)]
pub struct PpcaFit {
    pub w: DMatrix<f64>,
    pub sigma2: f64,
    /// All `p` sample-covariance eigenvalues, descending.
    pub eigvals: DVector<f64>,
    pub sample_cov: DMatrix<f64>,
    /// False when the q-th and (q+1)-th eigenvalues tie, so the subspace is not unique.
    pub subspace_unique: bool,
}

impl PpcaFit {
    pub fn q(&self) -> usize {
        self.w.ncols()
    }

    pub fn p(&self) -> usize {
        self.w.nrows()
    }

    /// Model covariance `W Wᵀ + σ² I`.
    pub fn model_cov(&self) -> DMatrix<f64> {
        &self.w * self.w.transpose() + DMatrix::identity(self.p(), self.p()) * self.sigma2
    }

    /// `E[u | x] = (WᵀW + σ² I)⁻¹ Wᵀ x`, one row per observation.
    pub fn posterior_scores(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.w.transpose() * &self.w + DMatrix::identity(self.q(), self.q()) * self.sigma2;
        let minv = m.try_inverse().expect("WᵀW + σ²I is positive definite");
        (minv * self.w.transpose() * x.transpose()).transpose()
    }
}

/// Gaussian log-likelihood of the rows of `x` under `N(0, W Wᵀ + σ² I)`.
pub fn ppca_log_likelihood(x: &DMatrix<f64>, w: &DMatrix<f64>, sigma2: f64) -> f64 {
    let p = w.nrows();
    let c = w * w.transpose() + DMatrix::identity(p, p) * sigma2;
    let chol = c.cholesky().expect("model covariance is positive definite");
    let ln_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let sol = chol.solve(&x.transpose());
    let quad: f64 = x.transpose().component_mul(&sol).sum();
    -0.5 * (x.nrows() as f64 * (p as f64 * LN_2PI + ln_det) + quad)
}

pub fn fit_ppca(x: &DMatrix<f64>, q: usize) -> Result<PpcaFit> {
    let (n, p) = x.shape();
    if n < 2 {
        return Err(DppcaError::Degenerate(format!("need at least 2 observations, got {n}")));
    }
    if q == 0 || n <= q || q >= (n - 1).min(p) {
        return Err(DppcaError::Degenerate(format!(
            "latent dimension q = {q} requires q < min(n - 1, p) = {}",
            (n - 1).min(p)
        )));
    }
    let scale = x.amax().max(1.0);
    let max_abs_mean = column_means(x).amax();
    if max_abs_mean > 1e-8 * scale {
        return Err(DppcaError::NotCentered { max_abs_mean });
    }

    let nf = n as f64;
    let sample_cov = x.transpose() * x / nf;
    let (eigvals, top_vectors) = if p <= n {
        covariance_route(&sample_cov, q)
    } else {
        gram_route(x, q)
    };

    let sigma2 = eigvals.rows(q, p - q).sum() / (p - q) as f64;
    if sigma2.is_nan() || sigma2 <= 0.0 {
        return Err(DppcaError::Degenerate(format!(
            "noise variance estimate {sigma2:e} is not positive"
        )));
    }
    let gap = eigvals[q - 1] - eigvals[q];
    let subspace_unique = gap > 1e-10 * eigvals[0].abs().max(f64::MIN_POSITIVE);
    if !subspace_unique {
        log::warn!(
            "eigenvalues {} and {} tie ({} vs {}); principal subspace is not unique",
            q,
            q + 1,
            eigvals[q - 1],
            eigvals[q]
        );
    }

    let mut w = top_vectors;
    for j in 0..q {
        let mut col = w.column_mut(j);
        let (imax, _) = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        col.scale_mut((eigvals[j] - sigma2).max(0.0).sqrt());
    }

    Ok(PpcaFit {
        w,
        sigma2,
        eigvals,
        sample_cov,
        subspace_unique,
    })
}

fn sorted_eigen(mat: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(mat.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(mat.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

fn covariance_route(cov: &DMatrix<f64>, q: usize) -> (DVector<f64>, DMatrix<f64>) {
    let (vals, vecs) = sorted_eigen(cov);
    let vals = vals.into_iter().map(|v| v.max(0.0));
    (DVector::from_iterator(cov.nrows(), vals), vecs.columns(0, q).into_owned())
}

/// Eigenvectors of `XᵀX / n` recovered from the `n x n` Gram matrix `X Xᵀ / n`.
fn gram_route(x: &DMatrix<f64>, q: usize) -> (DVector<f64>, DMatrix<f64>) {
    let (n, p) = x.shape();
    let nf = n as f64;
    let gram = x * x.transpose() / nf;
    let (vals, vecs) = sorted_eigen(&gram);
    let mut eigvals = DVector::zeros(p);
    for (i, v) in vals.iter().enumerate() {
        eigvals[i] = v.max(0.0);
    }
    let mut u = DMatrix::zeros(p, q);
    for j in 0..q {
        let v = x.transpose() * vecs.column(j);
        let norm = v.norm();
        u.set_column(j, &(v / norm));
    }
    (eigvals, u)
}

/// One fit per time point, in time order.
pub fn fit_all_timepoints(ds: &LongitudinalDataset, q: usize) -> Result<Vec<PpcaFit>> {
    ds.slices()
        .iter()
        .enumerate()
        .map(|(m, x)| fit_ppca(x, q).map_err(|e| e.at_time(m)))
        .collect()
}
