//! Antenna and element position optimization by trust-region SCA.
//!
//! One code path serves both arrays. The pairwise spacing constraint
//! `‖x_i − x_j‖ ≥ d0` is replaced by its first-order inner approximation
//! `u_ij^T (x_i − x_j) ≥ d0` with `u_ij` the unit vector between the current
//! positions, so every solution of the surrogate keeps the true spacing.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::channel::{channel_position_jacobian, ArrayKind, PositionSet};
use crate::config::SystemConfig;
use crate::metrics::{postcoder_products, rate_gradients, sinr_and_gradients, sum_rate, SolutionState};
use crate::trust::{run_trust_region, trust_region_step, Block, InnerReport, Linearization, StepReport, TrustRegionState};

/// SINRs and `∂γ_k/∂X` (K × 2·count) with `X` interleaved `[x_1, y_1, …]`.
pub fn position_sinr_gradients(
    state: &SolutionState,
    which: ArrayKind,
    config: &SystemConfig,
) -> (DVector<f64>, DMatrix<f64>) {
    let geometry = state.geometry();
    let (bs, ris) = (state.bs_positions(), state.ris_positions());
    let ch = state.channels();
    let v = &state.postcoders;
    let k_users = state.num_users();
    let count = state.positions(which).len();
    let rot: Vec<Complex64> = state.phases().iter().map(|&t| Complex64::from_polar(1.0, t)).collect();
    let s = postcoder_products(v, state.effective_channels());
    let mut ds = DMatrix::<Complex64>::zeros(k_users * k_users, 2 * count);
    for i in 0..count {
        let jac = channel_position_jacobian(geometry, bs, ris, which, i).expect("index within array");
        for c in 0..2 {
            let col = 2 * i + c;
            match which {
                ArrayKind::Bs => {
                    // only entry i of every a_j moves
                    for j in 0..k_users {
                        let reflected: Complex64 = (0..rot.len())
                            .map(|n| jac.ris_bs[c][n] * rot[n] * ch.reflect[j][n])
                            .sum();
                        let da = jac.direct[j][c] + reflected;
                        for k in 0..k_users {
                            ds[(k * k_users + j, col)] = v[k][i].conj() * da;
                        }
                    }
                }
                ArrayKind::Ris => {
                    let h_col = ch.ris_bs.column(i);
                    for j in 0..k_users {
                        let da = &jac.ris_bs[c] * (rot[i] * ch.reflect[j][i]) + h_col * (rot[i] * jac.reflect[j][c]);
                        for k in 0..k_users {
                            ds[(k * k_users + j, col)] = v[k].dotc(&da);
                        }
                    }
                }
            }
        }
    }
    let noise = DVector::from_fn(k_users, |k, _| config.noise_watt * v[k].norm_squared());
    sinr_and_gradients(&s, &ds, &state.powers, &noise)
}

/// Gradients of the per-user rates (K × 2·count) and of the sum rate.
pub fn rate_gradient_positions(
    state: &SolutionState,
    which: ArrayKind,
    config: &SystemConfig,
) -> (DMatrix<f64>, DVector<f64>) {
    let (gamma, d_gamma) = position_sinr_gradients(state, which, config);
    let per_user = rate_gradients(&gamma, &d_gamma);
    let total = per_user.row_sum().transpose();
    (per_user, total)
}

/// Linearized spacing rows `−u^T x_i + u^T x_j ≤ −d0` for every pair close
/// enough to become active within a step of length `radius`.
pub fn spacing_half_spaces(set: &PositionSet, radius: f64) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let n = set.len();
    let mut rows = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let d = set.coords[i] - set.coords[j];
            let dist = d.norm();
            assert!(dist > 0.0, "coincident positions {i} and {j}");
            if dist - 2.0 * radius < set.min_spacing {
                rows.push((i, j, d / dist));
            }
        }
    }
    if rows.is_empty() {
        return None;
    }
    let mut g = DMatrix::zeros(rows.len(), 2 * n);
    for (r, (i, j, u)) in rows.iter().enumerate() {
        g[(r, 2 * i)] = -u.x;
        g[(r, 2 * i + 1)] = -u.y;
        g[(r, 2 * j)] = u.x;
        g[(r, 2 * j + 1)] = u.y;
    }
    Some((g, DVector::from_element(rows.len(), -set.min_spacing)))
}

/// Trust region starting at the configured radius, kept in `[1e-6 λ, A]`.
pub fn position_trust_region(config: &SystemConfig) -> TrustRegionState {
    TrustRegionState::new(
        config.position_trust_radius_m(),
        1e-6 * config.wavelength_m,
        config.region_side_m,
        config.num_users,
    )
}

/// The positions of one array as a trust-region block.
pub struct PositionBlock(pub ArrayKind);

impl Block for PositionBlock {
    fn point(&self, state: &SolutionState) -> DVector<f64> {
        state.positions(self.0).to_vector()
    }

    fn linearize(&self, state: &SolutionState, config: &SystemConfig, radius: f64) -> Linearization {
        let (sinr, sinr_grad) = position_sinr_gradients(state, self.0, config);
        let set = state.positions(self.0);
        let dim = 2 * set.len();
        Linearization {
            sinr,
            sinr_grad,
            lower: DVector::zeros(dim),
            upper: DVector::from_element(dim, set.side),
            extra: spacing_half_spaces(set, radius),
        }
    }

    fn apply(&self, state: &SolutionState, x: &DVector<f64>) -> Option<SolutionState> {
        let set = state.positions(self.0).with_vector(x);
        let tol = 1e-12 * set.side;
        if set.region_residual() > tol || (set.len() > 1 && set.spacing_residual() > tol) {
            return None;
        }
        let mut next = state.clone();
        next.set_positions(self.0, set).ok()?;
        Some(next)
    }
}

pub fn position_sca_step(
    state: &SolutionState,
    which: ArrayKind,
    config: &SystemConfig,
    tr: &mut TrustRegionState,
) -> (Option<SolutionState>, StepReport) {
    trust_region_step(&PositionBlock(which), state, config, tr)
}

/// Whether the scheme lets `which` move.
pub fn movable(config: &SystemConfig, which: ArrayKind) -> bool {
    match which {
        ArrayKind::Bs => config.scheme.bs_movable,
        ArrayKind::Ris => config.scheme.ris_movable,
    }
}

/// Optimizes the positions of one array; identity when the scheme keeps it
/// fixed.
pub fn optimize_positions(state: &SolutionState, which: ArrayKind, config: &SystemConfig) -> (SolutionState, InnerReport) {
    if !movable(config, which) {
        return (
            state.clone(),
            InnerReport {
                rate_trace: vec![sum_rate(state, config)],
                ..Default::default()
            },
        );
    }
    let mut tr = position_trust_region(config);
    run_trust_region(&PositionBlock(which), state, config, &mut tr)
}
