//! Alternating optimization driver.
//!
//! Each round updates, in order: postcoders, powers, RIS phases, antenna
//! positions, element positions. The phase and position blocks re-solve the
//! postcoders for every candidate they evaluate. An update is kept only if the energy
//! efficiency does not drop and every minimum rate still holds. The loop
//! stops when a round gains at most `ao_eps` (absolute) or after `n_max_ao`
//! rounds.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::channel::{sample_trial_geometry, ArrayKind, PositionSet};
use crate::config::{trial_rng, StreamPurpose, SystemConfig};
use crate::metrics::{audit, energy_efficiency, ConstraintAudit, SolutionState, QOS_SLACK};
use crate::phase::{phase_trust_region, PhaseBlock};
use crate::position::{movable, position_trust_region, PositionBlock};
use crate::postcoder::{optimal_postcoder_for, update_all_postcoders};
use crate::power::{feasibility_presolve, optimize_powers, DinkelbachTrace, GainTable};
use crate::trust::{run_trust_region, WithOptimalPostcoders};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AoError {
    #[error("no feasible initialization after {attempts} channel draws")]
    Infeasible { attempts: usize },
    #[error("position sampling failed: {0}")]
    Placement(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
}

/// Work done by one kind of subproblem over a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SubproblemStats {
    pub calls: usize,
    pub inner_iterations: usize,
    pub rollbacks: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SubproblemBreakdown {
    pub postcoder: SubproblemStats,
    pub power: SubproblemStats,
    pub phase: SubproblemStats,
    pub bs_position: SubproblemStats,
    pub ris_position: SubproblemStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialReport {
    pub trial: u64,
    pub scheme: String,
    /// EE of the initialization followed by the EE after every round.
    pub ee_per_iteration: Vec<f64>,
    pub iterations_used: usize,
    pub subproblems: SubproblemBreakdown,
    /// One trace per power-allocation call.
    pub dinkelbach: Vec<DinkelbachTrace>,
    pub final_audit: ConstraintAudit,
    pub termination: Termination,
    /// Channel draws discarded because no feasible start was found.
    pub redraws: usize,
}

impl TrialReport {
    pub fn final_ee(&self) -> f64 {
        *self.ee_per_iteration.last().expect("trace starts with the initial EE")
    }
}

/// Feasible start for one channel draw: postcoders and powers alternate
/// between the minimum-power solution and the SINR-optimal postcoders.
fn feasible_start(state: &mut SolutionState, config: &SystemConfig) -> bool {
    let k_users = state.num_users();
    let noise = config.noise_watt;
    let attempts = [DVector::zeros(k_users), DVector::from_vec(config.pmax_vec())];
    for p_design in attempts {
        let a = state.effective_channels().to_vec();
        let Ok(v) = (0..k_users)
            .map(|k| optimal_postcoder_for(&a, &p_design, k, noise))
            .collect::<Result<Vec<_>, _>>()
        else {
            continue;
        };
        state.postcoders = v;
        let mut found = false;
        for _ in 0..5 {
            let Ok(p) = feasibility_presolve(&GainTable::from_state(state, config), config) else { break };
            state.powers = p;
            let Ok(v) = (0..k_users)
                .map(|k| optimal_postcoder_for(&a, &state.powers, k, noise))
                .collect::<Result<Vec<_>, _>>()
            else {
                break;
            };
            state.postcoders = v;
            found = true;
        }
        if found && audit(state, config).passes(config.tolerances.kkt_eps) {
            return true;
        }
    }
    false
}

/// Random feasible initialization for `trial`, redrawing the channels up to
/// `max_redraws` times. Returns the state and the number of redraws.
pub fn initialize(config: &SystemConfig, trial: u64) -> Result<(SolutionState, usize), AoError> {
    let mut geo_rng = trial_rng(config.seed, trial, StreamPurpose::Geometry);
    let mut pos_rng = trial_rng(config.seed, trial, StreamPurpose::Positions);
    let mut phase_rng = trial_rng(config.seed, trial, StreamPurpose::Phases);
    let (side, d0) = (config.region_side_m, config.min_spacing_m);
    for attempt in 0..=config.max_redraws {
        let geometry = Arc::new(sample_trial_geometry(config, &mut geo_rng));
        let bs = PositionSet::sample(config.num_bs_antennas, side, d0, &mut pos_rng)
            .map_err(|e| AoError::Placement(e.to_string()))?;
        let ris = PositionSet::sample(config.num_ris_elements, side, d0, &mut pos_rng)
            .map_err(|e| AoError::Placement(e.to_string()))?;
        // uniform on (0, 2π]
        let phases = DVector::from_fn(config.num_ris_elements, |_, _| 2.0 * PI - phase_rng.gen_range(0.0..2.0 * PI));
        let m = config.num_bs_antennas;
        let placeholder = vec![DVector::from_element(m, Complex64::new(1.0 / (m as f64).sqrt(), 0.0)); config.num_users];
        let mut state = SolutionState::new(
            geometry,
            bs,
            ris,
            phases,
            DVector::zeros(config.num_users),
            placeholder,
        )
        .map_err(|e| AoError::Placement(e.to_string()))?;
        if feasible_start(&mut state, config) {
            return Ok((state, attempt));
        }
        log::debug!("trial {trial}: draw {attempt} infeasible, redrawing");
    }
    Err(AoError::Infeasible {
        attempts: config.max_redraws + 1,
    })
}

struct Guard<'a> {
    config: &'a SystemConfig,
    ee: f64,
}

impl Guard<'_> {
    /// Keeps `candidate` if EE does not drop and the minimum rates hold.
    fn offer(&mut self, state: &mut SolutionState, candidate: SolutionState, stats: &mut SubproblemStats, label: &str) {
        let ee = energy_efficiency(&candidate, self.config);
        let qos = audit(&candidate, self.config).qos;
        if ee >= self.ee && qos <= QOS_SLACK {
            log::trace!("{label}: EE +{:.3e}", ee - self.ee);
            *state = candidate;
            self.ee = ee;
        } else {
            stats.rollbacks += 1;
        }
    }
}

/// Runs the AO loop from a given feasible state.
pub fn run_from(state: SolutionState, config: &SystemConfig, trial: u64, redraws: usize) -> (SolutionState, TrialReport) {
    let mut state = state;
    let mut guard = Guard {
        config,
        ee: energy_efficiency(&state, config),
    };
    let mut ee_trace = vec![guard.ee];
    let mut stats = SubproblemBreakdown::default();
    let mut dinkelbach = Vec::new();
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    let timed = |s: &mut SubproblemStats, start: Instant| {
        s.calls += 1;
        s.wall_time_s += start.elapsed().as_secs_f64();
    };

    while iterations < config.tolerances.n_max_ao {
        let previous = guard.ee;
        iterations += 1;

        let t = Instant::now();
        let update = update_all_postcoders(&state, config);
        let mut cand = state.clone();
        cand.postcoders = update.postcoders;
        stats.postcoder.inner_iterations += 1;
        guard.offer(&mut state, cand, &mut stats.postcoder, "postcoder");
        timed(&mut stats.postcoder, t);

        let t = Instant::now();
        let gains = GainTable::from_state(&state, config);
        match optimize_powers(&gains, &state.powers, config) {
            Ok(sol) => {
                stats.power.inner_iterations += sol.total_inner_iterations;
                let mut cand = state.clone();
                cand.powers = sol.powers;
                dinkelbach.push(sol.trace);
                guard.offer(&mut state, cand, &mut stats.power, "power");
            }
            Err(e) => {
                log::debug!("trial {trial}: power update failed: {e}");
                stats.power.rollbacks += 1;
            }
        }
        timed(&mut stats.power, t);

        let t = Instant::now();
        let block = WithOptimalPostcoders {
            block: PhaseBlock,
            noise: config.noise_watt,
        };
        let (cand, report) = run_trust_region(&block, &state, config, &mut phase_trust_region(config));
        stats.phase.inner_iterations += report.iterations;
        guard.offer(&mut state, cand, &mut stats.phase, "phase");
        timed(&mut stats.phase, t);

        for (which, s, label) in [
            (ArrayKind::Bs, &mut stats.bs_position, "bs_position"),
            (ArrayKind::Ris, &mut stats.ris_position, "ris_position"),
        ] {
            let t = Instant::now();
            if !movable(config, which) {
                continue;
            }
            let block = WithOptimalPostcoders {
                block: PositionBlock(which),
                noise: config.noise_watt,
            };
            let (cand, report) = run_trust_region(&block, &state, config, &mut position_trust_region(config));
            s.inner_iterations += report.iterations;
            guard.offer(&mut state, cand, s, label);
            timed(s, t);
        }

        ee_trace.push(guard.ee);
        log::debug!("trial {trial}: round {iterations} EE {:.6}", guard.ee);
        if guard.ee - previous <= config.tolerances.ao_eps {
            termination = Termination::Converged;
            break;
        }
    }

    let report = TrialReport {
        trial,
        scheme: config.scheme.name().to_string(),
        ee_per_iteration: ee_trace,
        iterations_used: iterations,
        subproblems: stats,
        dinkelbach,
        final_audit: audit(&state, config),
        termination,
        redraws,
    };
    (state, report)
}

/// Initializes and optimizes one Monte Carlo trial.
pub fn run(config: &SystemConfig, trial: u64) -> Result<(SolutionState, TrialReport), AoError> {
    let (state, redraws) = initialize(config, trial)?;
    Ok(run_from(state, config, trial, redraws))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{load_config, SchemeFlags};

    fn desk() -> SystemConfig {
        load_config("seed = 7\n[system]\nbs_antennas = 4\nris_elements = 16\nusers = 3\n").unwrap()
    }

    #[test]
    fn initialization_is_deterministic_and_feasible() {
        let c = desk();
        let (a, ra) = initialize(&c, 3).unwrap();
        let (b, rb) = initialize(&c, 3).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.powers, b.powers);
        assert_eq!(a.phases(), b.phases());
        assert_eq!(a.bs_positions(), b.bs_positions());
        assert!(audit(&a, &c).passes(c.tolerances.kkt_eps));
        assert!(a.phases().iter().all(|&t| t > 0.0 && t <= 2.0 * PI));
    }

    #[test]
    fn zero_threshold_starts_silent() {
        let mut c = desk();
        c.rate_threshold_bpshz = 0.0;
        let (s, _) = initialize(&c, 0).unwrap();
        assert_eq!(s.powers, DVector::zeros(3));
        assert!(audit(&s, &c).qos <= 0.0);
    }

    #[test]
    fn no_iterations_returns_initialization() {
        let mut c = desk();
        c.tolerances.n_max_ao = 0;
        let (init, _) = initialize(&c, 1).unwrap();
        let (out, report) = run(&c, 1).unwrap();
        assert_eq!(report.iterations_used, 0);
        assert_eq!(report.ee_per_iteration, vec![energy_efficiency(&init, &c)]);
        assert_eq!(out.powers, init.powers);
    }

    #[test]
    fn fixed_scheme_trace_is_monotone() {
        let mut c = desk();
        c.scheme = SchemeFlags::FA_FE;
        let (init, _) = initialize(&c, 2).unwrap();
        let (out, report) = run(&c, 2).unwrap();
        assert_eq!(out.bs_positions(), init.bs_positions());
        assert_eq!(out.ris_positions(), init.ris_positions());
        assert_eq!(report.subproblems.bs_position.inner_iterations, 0);
        for w in report.ee_per_iteration.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
        assert!(report.final_audit.passes(c.tolerances.kkt_eps), "{}", report.final_audit);
    }

    #[test]
    fn movable_run_is_monotone_and_feasible() {
        let c = desk();
        let (_, report) = run(&c, 4).unwrap();
        assert!(report.iterations_used <= c.tolerances.n_max_ao);
        for w in report.ee_per_iteration.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
        assert!(report.final_ee() > report.ee_per_iteration[0]);
        assert!(report.final_audit.passes(c.tolerances.kkt_eps), "{}", report.final_audit);
    }

    #[test]
    fn unreachable_threshold_reports_infeasible() {
        let mut c = desk();
        c.rate_threshold_bpshz = 40.0;
        c.max_redraws = 2;
        assert_eq!(initialize(&c, 0).unwrap_err(), AoError::Infeasible { attempts: 3 });
    }
}
