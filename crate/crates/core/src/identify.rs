//! Post-hoc rotational identification of sampled loadings.

use nalgebra::DMatrix;

use crate::error::{DppcaError, Result};
use crate::sampler::{ModelState, PosteriorChain};

/// Orthogonal `R` minimizing `‖A R − T‖_F`, reflections allowed.
pub fn procrustes_rotation(a: &DMatrix<f64>, template: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.shape() != template.shape() {
        return Err(DppcaError::Dimension(format!(
            "procrustes: {:?} vs template {:?}",
            a.shape(),
            template.shape()
        )));
    }
    if !a.iter().chain(template.iter()).all(|v| v.is_finite()) {
        return Err(DppcaError::Numerical("procrustes input is not finite".into()));
    }
    let cross = a.transpose() * template;
    let svd = cross.svd(true, true);
    let sv = &svd.singular_values;
    let top = sv.max();
    if sv.min() <= 1e-12 * top.max(f64::MIN_POSITIVE) {
        log::warn!("procrustes cross-product is rank deficient; rotation is not unique");
    }
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    Ok(u * v_t)
}

/// Best `R = P S` over permutation matrices `P` and sign diagonals `S`.
pub fn signed_permutation_rotation(a: &DMatrix<f64>, template: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.shape() != template.shape() {
        return Err(DppcaError::Dimension("signed permutation: shape mismatch".into()));
    }
    let q = a.ncols();
    if q > 8 {
        return Err(DppcaError::Invalid(format!("signed permutation search over q = {q} is too large")));
    }
    // ‖A P S − T‖² depends on P, S only through the matched column inner products
    let cross = a.transpose() * template;
    let mut perm: Vec<usize> = (0..q).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        // column j of A goes to slot perm[j]; best sign makes each term |cross|
        let score: f64 = (0..q).map(|j| cross[(j, perm[j])].abs()).sum();
        if best.as_ref().is_none_or(|(s, _)| score > *s + 1e-15) {
            best = Some((score, perm.clone()));
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let (_, perm) = best.expect("at least one permutation");
    let mut r = DMatrix::zeros(q, q);
    for (j, &slot) in perm.iter().enumerate() {
        r[(j, slot)] = if cross[(j, slot)] < 0.0 { -1.0 } else { 1.0 };
    }
    Ok(r)
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

fn rotate_state(state: &mut ModelState, m: usize, r: &DMatrix<f64>) {
    state.loadings[m] = &state.loadings[m] * r;
    state.scores[m] = &state.scores[m] * r;
}

/// Rotate every retained loading matrix onto its time point's template; scores
/// are counter-rotated so `W u` is unchanged. Log-volatilities are left as sampled.
pub fn identify_chain(
    chain: &PosteriorChain,
    templates: &[DMatrix<f64>],
    signed_permutation: bool,
) -> Result<PosteriorChain> {
    let m_times = chain.n_times();
    if templates.len() != m_times {
        return Err(DppcaError::Dimension(format!(
            "{} templates for {} time points",
            templates.len(),
            m_times
        )));
    }
    let mut out = chain.clone();
    let mut rotations = Vec::with_capacity(chain.len());
    for (s, state) in out.samples.iter_mut().enumerate() {
        let mut per_time = Vec::with_capacity(m_times);
        for (m, t) in templates.iter().enumerate() {
            let r = if signed_permutation {
                signed_permutation_rotation(&state.loadings[m], t)
            } else {
                procrustes_rotation(&state.loadings[m], t)
            }
            .map_err(|e| e.at_time(m))?;
            rotate_state(state, m, &r);
            // rotations compose when a chain is identified more than once
            let total = match &chain.rotations {
                Some(prev) => &prev[s][m] * r,
                None => r,
            };
            per_time.push(total);
        }
        rotations.push(per_time);
    }
    out.rotations = Some(rotations);
    Ok(out)
}

/// Align each time point's posterior-mean loadings to those of the first time
/// point and counter-rotate its scores. Returns the aligned loadings, scores and
/// the rotations used (identity at the first time point).
pub fn unify_timepoints(
    mean_loadings: &[DMatrix<f64>],
    mean_scores: &[DMatrix<f64>],
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    if mean_loadings.len() != mean_scores.len() || mean_loadings.is_empty() {
        return Err(DppcaError::Dimension("loadings and scores must cover the same time points".into()));
    }
    let reference = &mean_loadings[0];
    let q = reference.ncols();
    let mut w_out = Vec::with_capacity(mean_loadings.len());
    let mut u_out = Vec::with_capacity(mean_loadings.len());
    let mut rots = Vec::with_capacity(mean_loadings.len());
    for (m, (w, u)) in mean_loadings.iter().zip(mean_scores).enumerate() {
        if u.ncols() != q {
            return Err(DppcaError::Dimension(format!("scores at time {m} have {} columns", u.ncols())));
        }
        let r = if m == 0 {
            DMatrix::identity(q, q)
        } else {
            procrustes_rotation(w, reference).map_err(|e| e.at_time(m))?
        };
        w_out.push(w * &r);
        u_out.push(u * &r);
        rots.push(r);
    }
    Ok((w_out, u_out, rots))
}

/// Trace of the sample covariance of `vec(W_m)` across retained samples, summed over time.
pub fn loading_dispersion(chain: &PosteriorChain) -> f64 {
    let means = chain.mean_loadings();
    let s = chain.len() as f64;
    if chain.len() < 2 {
        return 0.0;
    }
    chain
        .samples
        .iter()
        .map(|st| {
            st.loadings
                .iter()
                .zip(&means)
                .map(|(w, mu)| (w - mu).norm_squared())
                .sum::<f64>()
        })
        .sum::<f64>()
        / (s - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{random_orthogonal, random_orthonormal};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_exact_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_orthonormal(7, 3, &mut rng) * 2.0;
        let r = procrustes_rotation(&t, &t).unwrap();
        assert!((r - DMatrix::identity(3, 3)).amax() < 1e-12);
        let q = random_orthogonal(3, &mut rng);
        let a = &t * &q;
        let r = procrustes_rotation(&a, &t).unwrap();
        assert!((&r - q.transpose()).amax() < 1e-10);
        assert!((a * r - &t).norm() < 1e-10);
    }

    #[test]
    fn beats_random_orthogonal_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = DMatrix::from_fn(6, 2, |_, _| crate::linalg::std_normal(&mut rng));
        let t = DMatrix::from_fn(6, 2, |_, _| crate::linalg::std_normal(&mut rng));
        let r = procrustes_rotation(&a, &t).unwrap();
        let best = (&a * &r - &t).norm();
        for _ in 0..1000 {
            let q = random_orthogonal(2, &mut rng);
            assert!(best <= (&a * q - &t).norm() + 1e-12);
        }
    }

    #[test]
    fn signed_permutation_recovers_swaps_and_flips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_orthonormal(8, 3, &mut rng);
        let mut p = DMatrix::zeros(3, 3);
        p[(0, 2)] = -1.0;
        p[(1, 0)] = 1.0;
        p[(2, 1)] = -1.0;
        let a = &t * &p;
        let r = signed_permutation_rotation(&a, &t).unwrap();
        assert!((a * r - &t).amax() < 1e-12);
    }

    #[test]
    fn unify_aligns_rotated_copies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w1 = random_orthonormal(5, 2, &mut rng);
        let u = DMatrix::from_fn(4, 2, |i, j| (i + 2 * j) as f64);
        let mut ws = vec![w1.clone()];
        let mut us = vec![u.clone()];
        for _ in 0..3 {
            let q = random_orthogonal(2, &mut rng);
            ws.push(&w1 * &q);
            us.push(&u * &q);
        }
        let (wa, ua, rots) = unify_timepoints(&ws, &us).unwrap();
        assert_eq!(rots[0], DMatrix::identity(2, 2));
        for m in 0..4 {
            assert!((&wa[m] - &w1).amax() < 1e-10);
            assert!((&ua[m] - &u).amax() < 1e-10);
        }
    }

    #[test]
    fn next_permutation_enumerates_all() {
        let mut p = vec![0, 1, 2, 3];
        let mut count = 1;
        while next_permutation(&mut p) {
            count += 1;
        }
        assert_eq!(count, 24);
    }
}
