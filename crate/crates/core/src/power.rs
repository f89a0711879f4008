//! Energy-efficient power allocation for fixed postcoders and channels.
//!
//! Dinkelbach's method turns `max R(p)/P(p)` into a sequence of subtractive
//! problems `max R(p) − λ P(p)`. Each is solved by SCA on the DC split
//! `R(p) = Σ_k log2(n_k + Σ_j p_j A_kj) − Σ_k log2(n_k + Σ_{j≠k} p_j A_kj)`
//! with the second term linearized. The minimum-rate constraints are linear
//! in `p` and enforced exactly.

use std::f64::consts::LN_2;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::config::SystemConfig;
use crate::cvxcore::{self, ConcaveObjective, ConvexSubproblem, CvxError, Objective, SolveStatus, SolverOptions};
use crate::metrics::{SolutionState, QOS_SLACK};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerError {
    #[error("minimum-rate constraints cannot be met within the power budget: {0}")]
    Infeasible(String),
    #[error("power subproblem failed: {0}")]
    Solver(#[from] CvxError),
}

/// `A[(k, j)] = |v_k^H a_j|²` and per-user noise `σ² ‖v_k‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainTable {
    pub gains: DMatrix<f64>,
    pub noise: DVector<f64>,
}

impl GainTable {
    pub fn new(gains: DMatrix<f64>, noise: DVector<f64>) -> Self {
        assert!(gains.is_square() && gains.nrows() == noise.len());
        Self { gains, noise }
    }

    pub fn from_state(state: &SolutionState, config: &SystemConfig) -> Self {
        let a = state.effective_channels();
        let v = &state.postcoders;
        let k = v.len();
        Self {
            gains: DMatrix::from_fn(k, k, |i, j| v[i].dotc(&a[j]).norm_sqr()),
            noise: DVector::from_fn(k, |i, _| config.noise_watt * v[i].norm_squared()),
        }
    }

    pub fn num_users(&self) -> usize {
        self.noise.len()
    }

    fn interference(&self, p: &DVector<f64>, k: usize) -> f64 {
        self.noise[k]
            + (0..self.num_users())
                .filter(|&j| j != k)
                .map(|j| p[j] * self.gains[(k, j)])
                .sum::<f64>()
    }

    pub fn sinr(&self, p: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.num_users(), |k, _| p[k] * self.gains[(k, k)] / self.interference(p, k))
    }

    pub fn sum_rate(&self, p: &DVector<f64>) -> f64 {
        self.sinr(p).iter().map(|g| (1.0 + g).log2()).sum()
    }

    pub fn energy_efficiency(&self, p: &DVector<f64>, config: &SystemConfig) -> f64 {
        self.sum_rate(p) / total_power(p, config)
    }

    /// Whether `p` meets every minimum rate (with [`QOS_SLACK`]) and the box.
    pub fn is_feasible(&self, p: &DVector<f64>, config: &SystemConfig) -> bool {
        let in_box = p.iter().enumerate().all(|(k, &x)| x >= 0.0 && x <= config.pmax(k));
        in_box
            && self
                .sinr(p)
                .iter()
                .all(|g| (1.0 + g).log2() >= config.rate_threshold_bpshz - QOS_SLACK)
    }
}

fn total_power(p: &DVector<f64>, config: &SystemConfig) -> f64 {
    p.sum() / config.amp_efficiency + config.circuit_power_watt
}

/// Subtractive objective `R(p) − λ P(p)`.
pub fn subtractive_objective(gains: &GainTable, p: &DVector<f64>, lambda: f64, config: &SystemConfig) -> f64 {
    gains.sum_rate(p) - lambda * total_power(p, config)
}

/// Componentwise-minimal powers meeting every SINR target with equality.
pub fn feasibility_presolve(gains: &GainTable, config: &SystemConfig) -> Result<DVector<f64>, PowerError> {
    let k_users = gains.num_users();
    let gamma = config.sinr_threshold();
    if gamma <= 0.0 {
        return Ok(DVector::zeros(k_users));
    }
    if let Some(k) = (0..k_users).find(|&k| gains.gains[(k, k)] <= 0.0) {
        return Err(PowerError::Infeasible(format!("user {k} has zero effective gain")));
    }
    // (I − D F) p = u with D F[k, j] = γ A_kj / A_kk for j ≠ k
    let mut system = DMatrix::<f64>::identity(k_users, k_users);
    let mut rhs = DVector::zeros(k_users);
    for k in 0..k_users {
        let akk = gains.gains[(k, k)];
        for j in 0..k_users {
            if j != k {
                system[(k, j)] = -gamma * gains.gains[(k, j)] / akk;
            }
        }
        rhs[k] = gamma * gains.noise[k] / akk;
    }
    let p = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| PowerError::Infeasible("singular SINR system".into()))?;
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(PowerError::Infeasible("SINR targets exceed the interference-limited region".into()));
    }
    for (k, &x) in p.iter().enumerate() {
        if x > config.pmax(k) * (1.0 + 1e-12) {
            return Err(PowerError::Infeasible(format!(
                "user {k} needs {x:.3e} W, budget {:.3e} W",
                config.pmax(k)
            )));
        }
    }
    Ok(DVector::from_fn(k_users, |k, _| p[k].min(config.pmax(k))))
}

/// Concave surrogate of `R(p) − λ Σp/η` around `p0` (constants dropped).
struct Surrogate<'a> {
    gains: &'a GainTable,
    linear: DVector<f64>,
}

impl<'a> Surrogate<'a> {
    fn new(gains: &'a GainTable, p0: &DVector<f64>, lambda: f64, config: &SystemConfig) -> Self {
        let k_users = gains.num_users();
        let mut linear = DVector::from_element(k_users, -lambda / config.amp_efficiency);
        for k in 0..k_users {
            let denom = gains.interference(p0, k) * LN_2;
            for j in 0..k_users {
                if j != k {
                    linear[j] -= gains.gains[(k, j)] / denom;
                }
            }
        }
        Self { gains, linear }
    }

    fn total(&self, p: &DVector<f64>, k: usize) -> f64 {
        self.gains.noise[k] + self.gains.gains.row(k).transpose().dot(p)
    }
}

impl ConcaveObjective for Surrogate<'_> {
    fn value(&self, p: &DVector<f64>) -> f64 {
        (0..self.gains.num_users()).map(|k| self.total(p, k).log2()).sum::<f64>() + self.linear.dot(p)
    }

    fn gradient(&self, p: &DVector<f64>) -> DVector<f64> {
        let mut g = self.linear.clone();
        for k in 0..self.gains.num_users() {
            g += self.gains.gains.row(k).transpose() / (self.total(p, k) * LN_2);
        }
        g
    }

    fn hessian(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let n = self.gains.num_users();
        let mut h = DMatrix::zeros(n, n);
        for k in 0..n {
            let a = self.gains.gains.row(k).transpose();
            h -= &a * a.transpose() / (self.total(p, k).powi(2) * LN_2);
        }
        h
    }
}

/// Linear minimum-SINR rows `G p ≤ h`.
fn qos_half_spaces(gains: &GainTable, gamma: f64) -> (DMatrix<f64>, DVector<f64>) {
    let k_users = gains.num_users();
    let mut g = DMatrix::zeros(k_users, k_users);
    let mut h = DVector::zeros(k_users);
    for k in 0..k_users {
        for j in 0..k_users {
            g[(k, j)] = if j == k { -gains.gains[(k, k)] } else { gamma * gains.gains[(k, j)] };
        }
        h[k] = -gamma * gains.noise[k];
    }
    (g, h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaStep {
    pub powers: DVector<f64>,
    /// Surrogate value at the linearization point and at the output.
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    /// The convex solver stopped on its iteration cap.
    pub hit_iteration_cap: bool,
}

/// One SCA step on the subtractive problem at `λ`, linearized at `p_current`.
pub fn sca_power_step(
    gains: &GainTable,
    p_current: &DVector<f64>,
    lambda: f64,
    config: &SystemConfig,
) -> Result<ScaStep, PowerError> {
    let k_users = gains.num_users();
    let surrogate = Surrogate::new(gains, p_current, lambda, config);
    let mut problem = ConvexSubproblem::new(Objective::Concave(&surrogate), k_users)
        .with_box(DVector::zeros(k_users), DVector::from_vec(config.pmax_vec()));
    let gamma = config.sinr_threshold();
    if gamma > 0.0 {
        let (g, h) = qos_half_spaces(gains, gamma);
        problem = problem.with_half_spaces(g, h);
    }
    let sol = cvxcore::solve(&problem, Some(p_current), &SolverOptions::with_tol(1e-10))?;
    let before = surrogate.value(p_current);
    let after = surrogate.value(&sol.x);
    Ok(ScaStep {
        powers: sol.x,
        surrogate_before: before,
        surrogate_after: after,
        hit_iteration_cap: sol.status == SolveStatus::MaxIterations,
    })
}

/// Per-outer-iteration record of Dinkelbach's method.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct DinkelbachTrace {
    pub lambda: Vec<f64>,
    /// `F(λ) = R(p) − λ P(p)` at the inner-loop output.
    pub objective: Vec<f64>,
    /// Energy efficiency of the inner-loop output.
    pub ee: Vec<f64>,
    pub inner_iterations: Vec<usize>,
}

impl DinkelbachTrace {
    pub fn terminal_objective(&self) -> Option<f64> {
        self.objective.last().copied()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "outer,lambda,objective,ee,inner_iterations")?;
        for i in 0..self.lambda.len() {
            writeln!(
                out,
                "{i},{:e},{:e},{:e},{}",
                self.lambda[i], self.objective[i], self.ee[i], self.inner_iterations[i]
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerSolution {
    pub powers: DVector<f64>,
    pub trace: DinkelbachTrace,
    /// `|F(λ)| ≤ dinkelbach_eps` was reached.
    pub converged: bool,
    pub total_inner_iterations: usize,
}

/// Dinkelbach outer loop with SCA inner loops. Starts from `p_init` when it
/// is feasible, otherwise from the presolve.
pub fn optimize_powers(
    gains: &GainTable,
    p_init: &DVector<f64>,
    config: &SystemConfig,
) -> Result<PowerSolution, PowerError> {
    let tol = &config.tolerances;
    let mut p = if gains.is_feasible(p_init, config) {
        p_init.clone()
    } else {
        feasibility_presolve(gains, config)?
    };
    let mut lambda = gains.energy_efficiency(&p, config);
    let mut trace = DinkelbachTrace::default();
    let mut converged = false;
    let mut total_inner = 0;
    for _ in 0..tol.n_max_inner.max(1) {
        let mut q = p.clone();
        let mut f_q = subtractive_objective(gains, &q, lambda, config);
        let mut inner = 0;
        while inner < tol.n_max_inner {
            let Ok(step) = sca_power_step(gains, &q, lambda, config) else { break };
            inner += 1;
            let cand = step.powers;
            if !gains.is_feasible(&cand, config) {
                break;
            }
            let f_new = subtractive_objective(gains, &cand, lambda, config);
            if f_new < f_q {
                break;
            }
            let gain = f_new - f_q;
            q = cand;
            f_q = f_new;
            if gain <= 1e-2 * tol.dinkelbach_eps {
                break;
            }
        }
        total_inner += inner;
        let ee_q = gains.energy_efficiency(&q, config);
        trace.lambda.push(lambda);
        trace.objective.push(f_q);
        trace.ee.push(ee_q);
        trace.inner_iterations.push(inner);
        if ee_q >= lambda {
            p = q;
        }
        if f_q.abs() <= tol.dinkelbach_eps {
            converged = true;
            break;
        }
        lambda = ee_q;
    }
    Ok(PowerSolution {
        powers: p,
        trace,
        converged,
        total_inner_iterations: total_inner,
    })
}
