//! RIS phase optimization by trust-region SCA.
//!
//! With `s_kj = v_k^H a_j` and `a_j = h_j + Σ_n H[:,n] e^{jϑ_n} g_j[n]`,
//! `∂s_kj/∂ϑ_n = j e^{jϑ_n} g_j[n] conj((H^H v_k)[n])`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::config::SystemConfig;
use crate::metrics::{postcoder_products, rate_gradients, sinr_and_gradients, SolutionState};
use crate::trust::{run_trust_region, trust_region_step, Block, InnerReport, Linearization, StepReport, TrustRegionState};

/// SINRs and `∂γ_k/∂ϑ` (K × N).
pub fn phase_sinr_gradients(state: &SolutionState, config: &SystemConfig) -> (DVector<f64>, DMatrix<f64>) {
    let ch = state.channels();
    let v = &state.postcoders;
    let k_users = state.num_users();
    let n_el = state.phases().len();
    let s = postcoder_products(v, state.effective_channels());
    let w: Vec<DVector<Complex64>> = v.iter().map(|vk| ch.ris_bs.adjoint() * vk).collect();
    let rot: Vec<Complex64> = state.phases().iter().map(|&t| Complex64::new(0.0, 1.0) * Complex64::from_polar(1.0, t)).collect();
    let ds = DMatrix::from_fn(k_users * k_users, n_el, |row, n| {
        let (k, j) = (row / k_users, row % k_users);
        rot[n] * ch.reflect[j][n] * w[k][n].conj()
    });
    let noise = DVector::from_fn(k_users, |k, _| config.noise_watt * v[k].norm_squared());
    sinr_and_gradients(&s, &ds, &state.powers, &noise)
}

/// Gradients of the per-user rates (K × N) and of the sum rate (N).
pub fn rate_gradient_phases(state: &SolutionState, config: &SystemConfig) -> (DMatrix<f64>, DVector<f64>) {
    let (gamma, d_gamma) = phase_sinr_gradients(state, config);
    let per_user = rate_gradients(&gamma, &d_gamma);
    let total = per_user.row_sum().transpose();
    (per_user, total)
}

/// Trust region with the configured initial phase radius, kept in `[1e-6, π]`.
pub fn phase_trust_region(config: &SystemConfig) -> TrustRegionState {
    TrustRegionState::new(config.tolerances.phase_trust_radius, 1e-6, PI, config.num_users)
}

/// The phase vector as a trust-region block.
pub struct PhaseBlock;

impl Block for PhaseBlock {
    fn point(&self, state: &SolutionState) -> DVector<f64> {
        state.phases().clone()
    }

    fn linearize(&self, state: &SolutionState, config: &SystemConfig, _radius: f64) -> Linearization {
        let (sinr, sinr_grad) = phase_sinr_gradients(state, config);
        let n = state.phases().len();
        Linearization {
            sinr,
            sinr_grad,
            lower: DVector::zeros(n),
            upper: DVector::from_element(n, 2.0 * PI),
            extra: None,
        }
    }

    fn apply(&self, state: &SolutionState, x: &DVector<f64>) -> Option<SolutionState> {
        let mut next = state.clone();
        next.set_phases(x.map(|t| t.clamp(0.0, 2.0 * PI)));
        Some(next)
    }
}

pub fn phase_sca_step(
    state: &SolutionState,
    config: &SystemConfig,
    tr: &mut TrustRegionState,
) -> (Option<SolutionState>, StepReport) {
    trust_region_step(&PhaseBlock, state, config, tr)
}

/// Repeats phase steps until the sum-rate gain stalls. Never lowers the true
/// sum rate and keeps every minimum rate.
pub fn optimize_phases(state: &SolutionState, config: &SystemConfig) -> (SolutionState, InnerReport) {
    let mut tr = phase_trust_region(config);
    run_trust_region(&PhaseBlock, state, config, &mut tr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelSet;
    use crate::config::load_config;
    use crate::metrics::tests::{random_state, small_config};
    use crate::metrics::{audit, rates, sum_rate};
    use crate::postcoder::update_all_postcoders;
    use proptest::prelude::*;

    fn fd_rates(state: &SolutionState, config: &SystemConfig, n: usize, h: f64) -> DVector<f64> {
        let mut plus = state.clone();
        let mut minus = state.clone();
        let mut t = state.phases().clone();
        t[n] += h;
        plus.set_phases(t.clone());
        t[n] -= 2.0 * h;
        minus.set_phases(t);
        (rates(&plus, config) - rates(&minus, config)) / (2.0 * h)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let c = small_config();
        for seed in 0..20 {
            let s = random_state(&c, seed);
            let (per_user, total) = rate_gradient_phases(&s, &c);
            for n in 0..c.num_ris_elements {
                let fd = fd_rates(&s, &c, n, 1e-6);
                for k in 0..c.num_users {
                    let scale = per_user.row(k).amax().max(1e-300);
                    assert!((per_user[(k, n)] - fd[k]).abs() <= 1e-5 * scale, "seed {seed} k {k} n {n}");
                }
                assert!((total[n] - fd.sum()).abs() <= 1e-5 * total.amax());
            }
        }
    }

    #[test]
    fn no_reflection_means_zero_gradient() {
        let c = small_config();
        let s = random_state(&c, 1);
        // rebuild with zero user–RIS path responses
        let mut g = (**s.geometry()).clone();
        for l in g.user_ris.iter_mut() {
            l.path_response.fill(Complex64::new(0.0, 0.0));
        }
        let z = SolutionState::new(
            std::sync::Arc::new(g),
            s.bs_positions().clone(),
            s.ris_positions().clone(),
            s.phases().clone(),
            s.powers.clone(),
            s.postcoders.clone(),
        )
        .unwrap();
        let (per_user, _) = rate_gradient_phases(&z, &c);
        assert!(per_user.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn periodic_in_two_pi() {
        let c = small_config();
        let s = random_state(&c, 2);
        let mut shifted = s.clone();
        let mut t = s.phases().clone();
        t[3] += 2.0 * PI;
        shifted.set_phases(t);
        let (a, _) = rate_gradient_phases(&s, &c);
        let (b, _) = rate_gradient_phases(&shifted, &c);
        assert!((sum_rate(&s, &c) - sum_rate(&shifted, &c)).abs() < 1e-12);
        assert!((a - b).amax() < 1e-9);
    }

    fn feasible_state(c: &SystemConfig, seed: u64) -> SolutionState {
        let mut s = random_state(c, seed);
        s.postcoders = update_all_postcoders(&s, c).postcoders;
        s
    }

    #[test]
    fn collapsed_radius_returns_input() {
        let mut c = small_config();
        c.rate_threshold_bpshz = 0.0;
        let s = feasible_state(&c, 3);
        let mut tr = phase_trust_region(&c);
        tr.radius = tr.min_radius;
        let (next, _) = phase_sca_step(&s, &c, &mut tr);
        assert!(next.is_none());
        let (out, report) = optimize_phases(&s, &c);
        assert!(report.accepted > 0);
        assert!(sum_rate(&out, &c) >= sum_rate(&s, &c));
    }

    #[test]
    fn single_element_alignment() {
        // a = h + c g e^{jϑ}; with v fixed the rate peaks at
        // ϑ* = arg(v^H h) − arg(v^H c g).
        let mut c = load_config("[system]\nbs_antennas = 2\nris_elements = 1\nusers = 1\n").unwrap();
        c.rate_threshold_bpshz = 0.0;
        let s = random_state(&c, 4);
        let strength = |s: &SolutionState| {
            let v = &s.postcoders[0];
            let ch: &ChannelSet = s.channels();
            (v.dotc(&ch.direct[0]), v.dotc(&(ch.ris_bs.column(0) * ch.reflect[0][0])))
        };
        // boost the RIS link so both paths are comparable
        let (d, r) = strength(&s);
        let mut g = (**s.geometry()).clone();
        g.ris_bs.path_response *= Complex64::new(0.7 * d.norm() / r.norm(), 0.0);
        let s = SolutionState::new(
            std::sync::Arc::new(g),
            s.bs_positions().clone(),
            s.ris_positions().clone(),
            s.phases().clone(),
            s.powers.clone(),
            s.postcoders.clone(),
        )
        .unwrap();
        let (direct, reflected) = strength(&s);
        let target = (direct.arg() - reflected.arg()).rem_euclid(2.0 * PI);
        let mut state = s;
        state.set_phases(DVector::from_element(1, (target + 2.0).rem_euclid(2.0 * PI)));
        let (out, _) = optimize_phases(&state, &c);
        let got = out.phases()[0];
        let diff = (got - target).rem_euclid(2.0 * PI);
        assert!(diff.min(2.0 * PI - diff) < 1e-3, "{got} vs {target}");
    }

    #[test]
    fn stationary_point_is_kept() {
        let mut c = small_config();
        c.rate_threshold_bpshz = 0.0;
        let s = feasible_state(&c, 5);
        let (once, _) = optimize_phases(&s, &c);
        let (twice, report) = optimize_phases(&once, &c);
        assert!(sum_rate(&twice, &c) - sum_rate(&once, &c) < 1e-3);
        assert!(report.iterations >= 1);
    }

    #[test]
    fn four_elements_reach_aligned_optimum() {
        // K = 1, fixed v: |v^H a|² = |α + Σ_n β_n e^{jϑ_n}|² peaks when every
        // term is aligned with α. A 16⁴ grid cannot beat that value.
        let mut c = load_config("[system]\nbs_antennas = 2\nris_elements = 4\nusers = 1\n").unwrap();
        c.rate_threshold_bpshz = 0.0;
        let s = random_state(&c, 11);
        let v = s.postcoders[0].clone();
        let terms = |s: &SolutionState| -> (Complex64, Vec<Complex64>) {
            let ch = s.channels();
            let beta = (0..4).map(|n| v.dotc(&(ch.ris_bs.column(n) * ch.reflect[0][n]))).collect();
            (v.dotc(&ch.direct[0]), beta)
        };
        let (alpha, beta) = terms(&s);
        let scale = alpha.norm() / beta.iter().map(|b| b.norm()).sum::<f64>();
        let mut g = (**s.geometry()).clone();
        g.ris_bs.path_response *= Complex64::new(scale, 0.0);
        let s = SolutionState::new(
            std::sync::Arc::new(g),
            s.bs_positions().clone(),
            s.ris_positions().clone(),
            s.phases().clone(),
            s.powers.clone(),
            s.postcoders.clone(),
        )
        .unwrap();
        let (alpha, beta) = terms(&s);
        let aligned = DVector::from_iterator(4, beta.iter().map(|b| (alpha.arg() - b.arg()).rem_euclid(2.0 * PI)));
        let mut best_state = s.clone();
        best_state.set_phases(aligned);
        let optimum = sum_rate(&best_state, &c);

        let (out, _) = optimize_phases(&s, &c);
        let got = sum_rate(&out, &c);
        assert!(got >= optimum - 1e-3, "{got} vs {optimum}");

        let mut grid_best = f64::NEG_INFINITY;
        let mut probe = s.clone();
        let step = 2.0 * PI / 16.0;
        for idx in 0..16usize.pow(4) {
            let t = DVector::from_fn(4, |n, _| ((idx >> (4 * n)) & 15) as f64 * step);
            probe.set_phases(t);
            grid_best = grid_best.max(sum_rate(&probe, &c));
        }
        assert!(grid_best <= optimum + 1e-12);
        assert!(got >= grid_best - 1e-3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn phase_optimization_is_monotone_and_feasible(seed in 0u64..10_000) {
            let mut c = small_config();
            c.rate_threshold_bpshz = 0.5;
            let s = feasible_state(&c, seed);
            prop_assume!(audit(&s, &c).qos <= 0.0);
            let (out, report) = optimize_phases(&s, &c);
            for w in report.rate_trace.windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
            let a = audit(&out, &c);
            prop_assert!(a.qos <= c.tolerances.kkt_eps);
            prop_assert!(a.unit_modulus <= 1e-15);
            prop_assert!(out.phases().iter().all(|&t| (0.0..=2.0 * PI).contains(&t)));
        }
    }
}
