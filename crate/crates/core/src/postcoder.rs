//! Per-user receive postcoders maximizing the SINR quotient.
//!
//! For user k the SINR is the generalized Rayleigh quotient
//! `p_k |v^H a_k|² / v^H (B_k + σ² I) v` with `B_k = Σ_{j≠k} p_j a_j a_j^H`.
//! Its maximizer is the dominant generalized eigenvector, which for a rank-1
//! numerator is `(B_k + σ² I)^{-1} a_k` up to scale.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::config::SystemConfig;
use crate::metrics::{sinr_with, SolutionState, QOS_SLACK};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PostcoderError {
    #[error("interference-plus-noise covariance of user {user} is not positive definite (noise power {noise})")]
    Singular { user: usize, noise: f64 },
    #[error("effective channel of user {user} is zero")]
    ZeroChannel { user: usize },
}

/// `B_k + σ² I`.
pub fn interference_covariance(
    effective: &[DVector<Complex64>],
    powers: &DVector<f64>,
    k: usize,
    noise: f64,
) -> DMatrix<Complex64> {
    let m = effective[k].len();
    let mut b = DMatrix::<Complex64>::identity(m, m) * Complex64::new(noise, 0.0);
    for (j, a) in effective.iter().enumerate() {
        if j != k {
            b += a * a.adjoint() * Complex64::new(powers[j], 0.0);
        }
    }
    b
}

/// Unit-norm SINR-optimal postcoder of user `k`.
pub fn optimal_postcoder_for(
    effective: &[DVector<Complex64>],
    powers: &DVector<f64>,
    k: usize,
    noise: f64,
) -> Result<DVector<Complex64>, PostcoderError> {
    let cov = interference_covariance(effective, powers, k, noise);
    let chol = cov.cholesky().ok_or(PostcoderError::Singular { user: k, noise })?;
    let v = chol.solve(&effective[k]);
    let n = v.norm();
    if !(n > 0.0 && n.is_finite()) {
        return Err(PostcoderError::ZeroChannel { user: k });
    }
    Ok(v / Complex64::new(n, 0.0))
}

pub fn optimal_postcoder(
    state: &SolutionState,
    config: &SystemConfig,
    k: usize,
) -> Result<DVector<Complex64>, PostcoderError> {
    optimal_postcoder_for(state.effective_channels(), &state.powers, k, config.noise_watt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostcoderUpdate {
    pub postcoders: Vec<DVector<Complex64>>,
    /// Whether user k took the new vector.
    pub accepted: Vec<bool>,
}

/// Recomputes every postcoder. A user keeps its previous vector when the
/// optimal one would leave its rate below the threshold or cannot be
/// computed.
pub fn update_all_postcoders(state: &SolutionState, config: &SystemConfig) -> PostcoderUpdate {
    let a = state.effective_channels();
    let mut postcoders = Vec::with_capacity(state.num_users());
    let mut accepted = Vec::with_capacity(state.num_users());
    for k in 0..state.num_users() {
        let old = &state.postcoders[k];
        let candidate = optimal_postcoder_for(a, &state.powers, k, config.noise_watt).ok().filter(|v| {
            let g_new = sinr_with(a, &state.powers, v, k, config.noise_watt);
            let g_old = sinr_with(a, &state.powers, old, k, config.noise_watt);
            (1.0 + g_new).log2() >= config.rate_threshold_bpshz - QOS_SLACK && g_new >= g_old * (1.0 - 1e-12)
        });
        accepted.push(candidate.is_some());
        postcoders.push(candidate.unwrap_or_else(|| old.clone()));
    }
    PostcoderUpdate { postcoders, accepted }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::load_config;
    use crate::metrics::tests::{random_state, random_unit, small_config};
    use crate::metrics::{rates, sinr};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Dominant generalized eigenvector of `(p_k a a^H, B + σ²I)` by Cholesky
    /// whitening and a dense Hermitian eigendecomposition.
    fn generalized_eigvec(a: &DVector<Complex64>, pk: f64, cov: &DMatrix<Complex64>) -> DVector<Complex64> {
        let l = cov.clone().cholesky().unwrap().l();
        let l_inv = l.clone().try_inverse().unwrap();
        let num = a * a.adjoint() * Complex64::new(pk, 0.0);
        let c = &l_inv * num * l_inv.adjoint();
        let c = (&c + c.adjoint()) * Complex64::new(0.5, 0.0);
        let eig = c.symmetric_eigen();
        let top = eig.eigenvalues.imax();
        let w = eig.eigenvectors.column(top).into_owned();
        let v = l_inv.adjoint() * w;
        let n = v.norm();
        v / Complex64::new(n, 0.0)
    }

    fn phase_aligned_distance(x: &DVector<Complex64>, y: &DVector<Complex64>) -> f64 {
        let inner = y.dotc(x);
        let rot = if inner.norm() > 0.0 { inner / inner.norm() } else { Complex64::new(1.0, 0.0) };
        (x - y * rot).norm()
    }

    #[test]
    fn single_user_is_matched_filter() {
        let c = load_config("[system]\nbs_antennas = 4\nris_elements = 4\nusers = 1\n").unwrap();
        let s = random_state(&c, 1);
        let a = &s.effective_channels()[0];
        let v = optimal_postcoder(&s, &c, 0).unwrap();
        let mrc = a / Complex64::new(a.norm(), 0.0);
        assert!(phase_aligned_distance(&v, &mrc) < 1e-12);
    }

    #[test]
    fn orthogonal_interference() {
        let e0 = DVector::from_vec(vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]);
        let e1 = DVector::from_vec(vec![Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)]);
        let p = DVector::from_vec(vec![1.0, 1.0]);
        let v = optimal_postcoder_for(&[e0.clone(), e1], &p, 0, 1.0).unwrap();
        assert!(phase_aligned_distance(&v, &e0) < 1e-15);
    }

    #[test]
    fn zero_noise_singular_covariance() {
        let a = DVector::from_vec(vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]);
        let p = DVector::from_vec(vec![1.0, 1.0]);
        let err = optimal_postcoder_for(&[a.clone(), a], &p, 0, 0.0).unwrap_err();
        assert_eq!(err, PostcoderError::Singular { user: 0, noise: 0.0 });
    }

    #[test]
    fn matches_generalized_eigenvector_and_beats_random_vectors() {
        let c = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for seed in 0..20 {
            let s = random_state(&c, seed);
            let a = s.effective_channels();
            for k in 0..c.num_users {
                let v = optimal_postcoder(&s, &c, k).unwrap();
                let cov = interference_covariance(a, &s.powers, k, c.noise_watt);
                let oracle = generalized_eigvec(&a[k], s.powers[k], &cov);
                assert!(phase_aligned_distance(&v, &oracle) < 1e-8);
                let best = sinr_with(a, &s.powers, &v, k, c.noise_watt);
                for _ in 0..200 {
                    let r = random_unit(c.num_bs_antennas, &mut rng);
                    assert!(sinr_with(a, &s.powers, &r, k, c.noise_watt) <= best * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn optimal_postcoders_are_a_fixed_point() {
        let mut c = small_config();
        c.rate_threshold_bpshz = 0.0;
        let mut s = random_state(&c, 3);
        s.postcoders = update_all_postcoders(&s, &c).postcoders;
        let again = update_all_postcoders(&s, &c);
        for (a, b) in again.postcoders.iter().zip(&s.postcoders) {
            assert!(phase_aligned_distance(a, b) < 1e-12);
        }
    }

    #[test]
    fn users_decouple() {
        let c = small_config();
        let s = random_state(&c, 4);
        let all = update_all_postcoders(&s, &c);
        for k in (0..c.num_users).rev() {
            if all.accepted[k] {
                assert_eq!(all.postcoders[k], optimal_postcoder(&s, &c, k).unwrap());
            }
        }
    }

    #[test]
    fn user_below_threshold_keeps_previous_vector() {
        // Pick the user whose best achievable rate is lowest and set R_th
        // between it and the others' best rates.
        let mut c = small_config();
        let mut found = false;
        for seed in 0..200 {
            let s = random_state(&c, seed);
            let best: Vec<f64> = (0..c.num_users)
                .map(|k| {
                    let v = optimal_postcoder(&s, &c, k).unwrap();
                    (1.0 + sinr_with(s.effective_channels(), &s.powers, &v, k, c.noise_watt)).log2()
                })
                .collect();
            let weak = (0..c.num_users).min_by(|&i, &j| best[i].total_cmp(&best[j])).unwrap();
            let runner_up = (0..c.num_users)
                .filter(|&k| k != weak)
                .map(|k| best[k])
                .fold(f64::INFINITY, f64::min);
            if runner_up - best[weak] < 0.2 {
                continue;
            }
            c.rate_threshold_bpshz = 0.5 * (best[weak] + runner_up);
            let up = update_all_postcoders(&s, &c);
            for k in 0..c.num_users {
                assert_eq!(up.accepted[k], k != weak);
            }
            assert_eq!(up.postcoders[weak], s.postcoders[weak]);
            found = true;
            break;
        }
        assert!(found);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn update_is_unit_norm_and_never_lowers_sinr(seed in 0u64..100_000) {
            let mut c = small_config();
            c.rate_threshold_bpshz = 0.0;
            let mut s = random_state(&c, seed);
            let before: Vec<f64> = (0..c.num_users).map(|k| sinr(&s, &c, k)).collect();
            let rate_before = rates(&s, &c).sum();
            let up = update_all_postcoders(&s, &c);
            s.postcoders = up.postcoders;
            for k in 0..c.num_users {
                prop_assert!((s.postcoders[k].norm() - 1.0).abs() < 1e-9);
                prop_assert!(sinr(&s, &c, k) >= before[k] * (1.0 - 1e-12));
            }
            prop_assert!(rates(&s, &c).sum() >= rate_before - 1e-12);
        }

        #[test]
        fn global_phase_leaves_sinr_unchanged(seed in 0u64..100_000, phi in 0.0f64..6.28) {
            let c = small_config();
            let s = random_state(&c, seed);
            let v = optimal_postcoder(&s, &c, 0).unwrap();
            let rotated = &v * Complex64::from_polar(1.0, phi);
            let a = s.effective_channels();
            let g0 = sinr_with(a, &s.powers, &v, 0, c.noise_watt);
            let g1 = sinr_with(a, &s.powers, &rotated, 0, c.noise_watt);
            prop_assert!((g0 - g1).abs() <= 1e-12 * g0);
        }
    }
}
