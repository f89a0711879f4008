//! Trust-region SCA shared by the phase and position optimizers.
//!
//! Each step maximizes the linearized sum rate over the linearized
//! minimum-SINR half-spaces, a box, optional extra half-spaces and a ball of
//! radius Δ around the current point. A step is kept only if the true sum
//! rate does not drop and the true constraints hold.

use nalgebra::{DMatrix, DVector};

use crate::config::SystemConfig;
use crate::cvxcore::{self, ConvexSubproblem, Objective, SolverOptions};
use crate::metrics::{rate_gradients, sinrs, sum_rate, SolutionState, QOS_SLACK};
use crate::postcoder::optimal_postcoder_for;

/// Adaptive trust radius plus per-user SINR margins added to the linearized
/// minimum-SINR constraints after a step overshoots them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegionState {
    pub radius: f64,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Actual over predicted improvement of the last evaluated step.
    pub last_ratio: f64,
    pub margins: Vec<f64>,
}

impl TrustRegionState {
    pub fn new(radius: f64, min_radius: f64, max_radius: f64, users: usize) -> Self {
        Self {
            radius: radius.clamp(min_radius, max_radius),
            min_radius,
            max_radius,
            last_ratio: 0.0,
            margins: vec![0.0; users],
        }
    }

    fn shrink(&mut self, factor: f64) {
        self.radius = (self.radius * factor).max(self.min_radius);
    }

    fn grow(&mut self, factor: f64) {
        self.radius = (self.radius * factor).min(self.max_radius);
    }

    /// The radius has collapsed to its floor.
    pub fn exhausted(&self) -> bool {
        self.radius <= self.min_radius
    }
}

/// First-order model of one variable block at the current state.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub sinr: DVector<f64>,
    /// `∂γ_k/∂x`, K × dim.
    pub sinr_grad: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// Additional convex half-spaces `G x ≤ h`.
    pub extra: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl Linearization {
    pub fn rate_gradient(&self) -> DVector<f64> {
        let per_user = rate_gradients(&self.sinr, &self.sinr_grad);
        per_user.row_sum().transpose()
    }
}

/// A variable block of the solution state optimized by trust-region SCA.
pub trait Block {
    fn point(&self, state: &SolutionState) -> DVector<f64>;
    fn linearize(&self, state: &SolutionState, config: &SystemConfig, radius: f64) -> Linearization;
    /// State with the block set to `x`, or `None` if `x` breaks a hard
    /// constraint of the block.
    fn apply(&self, state: &SolutionState, x: &DVector<f64>) -> Option<SolutionState>;
}

/// Wraps a block so every candidate also takes the SINR-optimal postcoders
/// for its channels. Each user's SINR can only rise, so the wrapped block
/// keeps the rate and minimum-rate guarantees of the inner one.
pub struct WithOptimalPostcoders<B> {
    pub block: B,
    pub noise: f64,
}

impl<B: Block> Block for WithOptimalPostcoders<B> {
    fn point(&self, state: &SolutionState) -> DVector<f64> {
        self.block.point(state)
    }

    fn linearize(&self, state: &SolutionState, config: &SystemConfig, radius: f64) -> Linearization {
        self.block.linearize(state, config, radius)
    }

    fn apply(&self, state: &SolutionState, x: &DVector<f64>) -> Option<SolutionState> {
        let mut next = self.block.apply(state, x)?;
        for k in 0..next.num_users() {
            if let Ok(v) = optimal_postcoder_for(next.effective_channels(), &next.powers, k, self.noise) {
                next.postcoders[k] = v;
            }
        }
        Some(next)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepVerdict {
    Accepted,
    /// Surrogate could not be solved from the current point.
    SubproblemFailed,
    RateDecrease,
    QosViolation,
    StructuralViolation,
    /// No model improvement available: zero gradient or collapsed radius.
    Stationary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub verdict: StepVerdict,
    pub predicted: f64,
    pub actual: f64,
}

fn min_sinr(config: &SystemConfig) -> f64 {
    let r = config.rate_threshold_bpshz - QOS_SLACK;
    if r <= 0.0 {
        0.0
    } else {
        r.exp2() - 1.0
    }
}

/// One trust-region step. Returns the new state on acceptance and updates
/// `tr` either way.
pub fn trust_region_step<B: Block + ?Sized>(
    block: &B,
    state: &SolutionState,
    config: &SystemConfig,
    tr: &mut TrustRegionState,
) -> (Option<SolutionState>, StepReport) {
    let tol = &config.tolerances;
    let x0 = block.point(state);
    let lin = block.linearize(state, config, tr.radius);
    let c = lin.rate_gradient();
    let report = |verdict, predicted, actual| StepReport {
        verdict,
        predicted,
        actual,
    };
    if tr.exhausted() || c.norm() == 0.0 || !c.iter().all(|v| v.is_finite()) {
        return (None, report(StepVerdict::Stationary, 0.0, 0.0));
    }

    let gamma_th = config.sinr_threshold();
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    if gamma_th > 0.0 {
        // γ_k + ∇γ_k·(x − x0) ≥ γ_th + margin_k, with the margin capped so
        // the half-space still meets the ball
        for k in 0..lin.sinr.len() {
            let g = lin.sinr_grad.row(k).transpose();
            let reach = (lin.sinr[k] - gamma_th).max(0.0) + 0.5 * g.norm() * tr.radius;
            let margin = tr.margins[k].min(reach);
            let rhs = lin.sinr[k] - gamma_th - margin - g.dot(&x0);
            rows.push((-g, rhs));
        }
    }
    if let Some((g, h)) = &lin.extra {
        for i in 0..g.nrows() {
            rows.push((g.row(i).transpose(), h[i]));
        }
    }
    let mut problem = ConvexSubproblem::new(Objective::Linear(c.clone()), x0.len())
        .with_box(lin.lower.clone(), lin.upper.clone())
        .with_ball(x0.clone(), tr.radius);
    if !rows.is_empty() {
        let g = DMatrix::from_fn(rows.len(), x0.len(), |i, j| rows[i].0[j]);
        let h = DVector::from_fn(rows.len(), |i, _| rows[i].1);
        problem = problem.with_half_spaces(g, h);
    }
    let Ok(sol) = cvxcore::solve(&problem, Some(&x0), &SolverOptions::with_tol(1e-9 * c.norm() * tr.radius)) else {
        tr.shrink(tol.trust_shrink);
        return (None, report(StepVerdict::SubproblemFailed, 0.0, 0.0));
    };
    let x = sol.x;
    let predicted = c.dot(&(&x - &x0));
    if predicted <= 0.0 {
        tr.shrink(tol.trust_shrink);
        return (None, report(StepVerdict::Stationary, predicted, 0.0));
    }

    let Some(candidate) = block.apply(state, &x) else {
        tr.shrink(tol.trust_shrink);
        return (None, report(StepVerdict::StructuralViolation, predicted, 0.0));
    };
    let rate0 = sum_rate(state, config);
    let rate1 = sum_rate(&candidate, config);
    let actual = rate1 - rate0;
    tr.last_ratio = actual / predicted;

    let floor = min_sinr(config);
    let gamma1 = sinrs(&candidate, config);
    let mut qos_ok = true;
    for k in 0..gamma1.len() {
        if gamma1[k] < floor {
            qos_ok = false;
            tr.margins[k] += 2.0 * (gamma_th - gamma1[k]);
        }
    }
    if !qos_ok {
        tr.shrink(tol.trust_shrink);
        return (None, report(StepVerdict::QosViolation, predicted, actual));
    }
    if !(actual >= 0.0) {
        tr.shrink(tol.trust_shrink);
        return (None, report(StepVerdict::RateDecrease, predicted, actual));
    }
    if tr.last_ratio > tol.trust_accept_ratio {
        tr.grow(tol.trust_grow);
    } else {
        tr.shrink(tol.trust_shrink);
    }
    for m in tr.margins.iter_mut() {
        *m *= 0.5;
    }
    (Some(candidate), report(StepVerdict::Accepted, predicted, actual))
}

/// Outcome of an inner trust-region loop.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InnerReport {
    pub iterations: usize,
    pub accepted: usize,
    /// Sum rate at the start and after every accepted step.
    pub rate_trace: Vec<f64>,
}

/// Iterates trust-region steps until a well-modelled accepted step improves
/// the sum rate by less than `sca_eps`, the model is stationary, or
/// `n_max_inner` steps.
pub fn run_trust_region<B: Block + ?Sized>(
    block: &B,
    state: &SolutionState,
    config: &SystemConfig,
    tr: &mut TrustRegionState,
) -> (SolutionState, InnerReport) {
    let tol = &config.tolerances;
    let mut current = state.clone();
    let mut report = InnerReport {
        rate_trace: vec![sum_rate(state, config)],
        ..Default::default()
    };
    while report.iterations < tol.n_max_inner {
        let (next, step) = trust_region_step(block, &current, config, tr);
        report.iterations += 1;
        log::trace!(
            "step {}: {:?} predicted {:.3e} actual {:.3e} radius {:.3e}",
            report.iterations,
            step.verdict,
            step.predicted,
            step.actual,
            tr.radius
        );
        match next {
            Some(s) => {
                current = s;
                report.accepted += 1;
                report.rate_trace.push(sum_rate(&current, config));
                let reliable = tr.last_ratio > tol.trust_accept_ratio;
                if (reliable && step.actual < tol.sca_eps) || step.predicted < 0.1 * tol.sca_eps {
                    break;
                }
            }
            None if step.verdict == StepVerdict::Stationary && tr.exhausted() => break,
            None if step.verdict == StepVerdict::Stationary && step.predicted == 0.0 => break,
            None if tr.exhausted() => break,
            None => {}
        }
    }
    (current, report)
}
