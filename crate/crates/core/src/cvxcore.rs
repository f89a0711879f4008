//! Small dense convex solver for the SCA subproblems.
//!
//! Handles three problem shapes with one log-barrier Newton method:
//!
//! - linear programs over half-spaces and a box,
//! - a linear objective over half-spaces ∩ box ∩ Euclidean ball,
//! - a smooth concave objective over half-spaces ∩ box.
//!
//! All problems are maximizations. When the caller's starting point is not
//! strictly feasible, a phase-I problem (minimize a common slack shift τ of
//! the half-spaces and the ball, box kept hard) finds one first. Iterates are
//! strictly feasible throughout, so every returned point satisfies the
//! constraints exactly up to rounding. The solver is deterministic: no
//! randomization, fixed iteration order.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Smooth concave function with first and second derivatives.
pub trait ConcaveObjective {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Hessian; must be negative semidefinite on the feasible set.
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

pub enum Objective<'a> {
    Linear(DVector<f64>),
    Concave(&'a dyn ConcaveObjective),
}

impl Objective<'_> {
    fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            Objective::Linear(c) => c.dot(x),
            Objective::Concave(f) => f.value(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ball {
    pub center: DVector<f64>,
    pub radius: f64,
}

/// `maximize objective(x)` s.t. `G x <= h`, `lower <= x <= upper`,
/// `‖x − center‖ <= radius`.
pub struct ConvexSubproblem<'a> {
    pub objective: Objective<'a>,
    pub half_spaces: Option<(DMatrix<f64>, DVector<f64>)>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub ball: Option<Ball>,
}

impl<'a> ConvexSubproblem<'a> {
    pub fn new(objective: Objective<'a>, dim: usize) -> Self {
        Self {
            objective,
            half_spaces: None,
            lower: DVector::from_element(dim, f64::NEG_INFINITY),
            upper: DVector::from_element(dim, f64::INFINITY),
            ball: None,
        }
    }

    pub fn with_box(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn with_half_spaces(mut self, g: DMatrix<f64>, h: DVector<f64>) -> Self {
        self.half_spaces = Some((g, h));
        self
    }

    pub fn with_ball(mut self, center: DVector<f64>, radius: f64) -> Self {
        self.ball = Some(Ball { center, radius });
        self
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    /// Newton budget exhausted; the point is feasible but not certified.
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    /// Barrier duality-gap bound m/t at termination.
    pub gap: f64,
    pub newton_iterations: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CvxError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("problem is not bounded: coordinate {0} has an infinite bound and there is no ball")]
    Unbounded(usize),
    #[error("empty box on coordinate {0}")]
    EmptyBox(usize),
    /// No strictly feasible point exists. `residual` is the smallest common
    /// constraint violation found by phase I (≥ 0).
    #[error("infeasible (phase-I residual {residual:e})")]
    Infeasible { residual: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Target duality gap (objective units).
    pub tol: f64,
    pub max_newton: usize,
    /// Barrier parameter growth per outer iteration.
    pub mu: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_newton: 400,
            mu: 20.0,
        }
    }
}

impl SolverOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
struct SparseRow {
    idx: Vec<usize>,
    val: Vec<f64>,
    rhs: f64,
}

impl SparseRow {
    fn dot(&self, x: &DVector<f64>) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, v)| v * x[i]).sum()
    }
}

/// Normalized constraint set. In relaxed (phase-I) mode the last coordinate
/// of `y` is τ, added to every half-space and ball slack.
struct Constraints {
    n: usize,
    rows: Vec<SparseRow>,
    lower: Vec<(usize, f64)>,
    upper: Vec<(usize, f64)>,
    ball: Option<Ball>,
}

impl Constraints {
    fn build(p: &ConvexSubproblem<'_>) -> Result<Self, CvxError> {
        let n = p.dim();
        if p.upper.len() != n {
            return Err(CvxError::Dimension(format!(
                "lower has {n} entries, upper has {}",
                p.upper.len()
            )));
        }
        if let Objective::Linear(c) = &p.objective {
            if c.len() != n {
                return Err(CvxError::Dimension(format!("objective has {} entries, expected {n}", c.len())));
            }
        }
        let mut rows = Vec::new();
        if let Some((g, h)) = &p.half_spaces {
            if g.ncols() != n || g.nrows() != h.len() {
                return Err(CvxError::Dimension(format!(
                    "half-spaces {}x{} with {} offsets, expected {n} columns",
                    g.nrows(),
                    g.ncols(),
                    h.len()
                )));
            }
            for r in 0..g.nrows() {
                let norm = g.row(r).norm();
                if norm == 0.0 {
                    if h[r] < 0.0 {
                        return Err(CvxError::Infeasible { residual: -h[r] });
                    }
                    continue;
                }
                let (idx, val): (Vec<_>, Vec<_>) = (0..n)
                    .filter(|&c| g[(r, c)] != 0.0)
                    .map(|c| (c, g[(r, c)] / norm))
                    .unzip();
                rows.push(SparseRow {
                    idx,
                    val,
                    rhs: h[r] / norm,
                });
            }
        }
        if let Some(b) = &p.ball {
            if b.center.len() != n {
                return Err(CvxError::Dimension(format!("ball center has {} entries, expected {n}", b.center.len())));
            }
            if !(b.radius > 0.0) {
                return Err(CvxError::Infeasible { residual: -b.radius });
            }
        }
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        for i in 0..n {
            let (l, u) = (p.lower[i], p.upper[i]);
            if l >= u {
                return Err(CvxError::EmptyBox(i));
            }
            if l.is_finite() {
                lower.push((i, l));
            }
            if u.is_finite() {
                upper.push((i, u));
            }
            if p.ball.is_none() && !(l.is_finite() && u.is_finite()) {
                return Err(CvxError::Unbounded(i));
            }
        }
        Ok(Self {
            n,
            rows,
            lower,
            upper,
            ball: p.ball.clone(),
        })
    }

    fn count(&self) -> usize {
        self.rows.len() + self.lower.len() + self.upper.len() + usize::from(self.ball.is_some())
    }

    fn ball_slack(&self, x: &DVector<f64>) -> Option<f64> {
        self.ball.as_ref().map(|b| {
            let d2 = (x.rows(0, self.n) - &b.center).norm_squared();
            (b.radius * b.radius - d2) / (2.0 * b.radius)
        })
    }

    /// Largest violation over the relaxable constraints (rows and ball).
    fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let rows = self.rows.iter().map(|r| r.dot(x) - r.rhs);
        let ball = self.ball_slack(x).map(|s| -s);
        rows.chain(ball).fold(f64::NEG_INFINITY, f64::max)
    }

    fn box_ok(&self, y: &DVector<f64>) -> bool {
        self.lower.iter().all(|&(i, l)| y[i] > l) && self.upper.iter().all(|&(i, u)| y[i] < u)
    }

    /// Σ −log(slack); `None` outside the domain.
    fn barrier(&self, y: &DVector<f64>, relaxed: bool) -> Option<f64> {
        if !self.box_ok(y) {
            return None;
        }
        let tau = if relaxed { y[self.n] } else { 0.0 };
        let mut acc = 0.0;
        for r in &self.rows {
            let s = r.rhs - r.dot(y) + tau;
            if s <= 0.0 {
                return None;
            }
            acc -= s.ln();
        }
        if let Some(s) = self.ball_slack(y) {
            let s = s + tau;
            if s <= 0.0 {
                return None;
            }
            acc -= s.ln();
        }
        for &(i, l) in &self.lower {
            acc -= (y[i] - l).ln();
        }
        for &(i, u) in &self.upper {
            acc -= (u - y[i]).ln();
        }
        Some(acc)
    }

    /// Adds the barrier gradient and Hessian at a strictly feasible `y`.
    fn accumulate(&self, y: &DVector<f64>, relaxed: bool, grad: &mut DVector<f64>, hess: &mut DMatrix<f64>) {
        let tau_idx = relaxed.then_some(self.n);
        let tau = tau_idx.map_or(0.0, |i| y[i]);
        for r in &self.rows {
            // s = rhs − g·x + τ, ∂s/∂x = −g, ∂s/∂τ = 1
            let s = r.rhs - r.dot(y) + tau;
            let inv = 1.0 / s;
            let inv2 = inv * inv;
            for (a, &i) in r.idx.iter().enumerate() {
                grad[i] += r.val[a] * inv;
                for (b, &j) in r.idx.iter().enumerate() {
                    hess[(i, j)] += r.val[a] * r.val[b] * inv2;
                }
                if let Some(t) = tau_idx {
                    hess[(i, t)] -= r.val[a] * inv2;
                    hess[(t, i)] -= r.val[a] * inv2;
                }
            }
            if let Some(t) = tau_idx {
                grad[t] -= inv;
                hess[(t, t)] += inv2;
            }
        }
        if let Some(b) = &self.ball {
            // s = (r² − ‖x − c‖²)/(2r) + τ, ∂s/∂x = −(x − c)/r, ∂²s/∂x² = −I/r
            let n = self.n;
            let diff = y.rows(0, n) - &b.center;
            let s = (b.radius * b.radius - diff.norm_squared()) / (2.0 * b.radius) + tau;
            let inv = 1.0 / s;
            let a = -&diff / b.radius;
            for i in 0..n {
                grad[i] -= a[i] * inv;
                for j in 0..n {
                    hess[(i, j)] += a[i] * a[j] * inv * inv;
                }
                hess[(i, i)] += inv / b.radius;
            }
            if let Some(t) = tau_idx {
                grad[t] -= inv;
                hess[(t, t)] += inv * inv;
                for i in 0..n {
                    hess[(i, t)] += a[i] * inv * inv;
                    hess[(t, i)] += a[i] * inv * inv;
                }
            }
        }
        for &(i, l) in &self.lower {
            let inv = 1.0 / (y[i] - l);
            grad[i] -= inv;
            hess[(i, i)] += inv * inv;
        }
        for &(i, u) in &self.upper {
            let inv = 1.0 / (u - y[i]);
            grad[i] += inv;
            hess[(i, i)] += inv * inv;
        }
    }
}

/// Barrier function `t·(−objective) + barrier` for one of the two phases.
trait Centering {
    fn value(&self, y: &DVector<f64>, t: f64) -> Option<f64>;
    fn derivatives(&self, y: &DVector<f64>, t: f64) -> (DVector<f64>, DMatrix<f64>);
}

struct PhaseTwo<'p, 'o> {
    cons: &'p Constraints,
    objective: &'p Objective<'o>,
}

impl Centering for PhaseTwo<'_, '_> {
    fn value(&self, y: &DVector<f64>, t: f64) -> Option<f64> {
        let b = self.cons.barrier(y, false)?;
        Some(-t * self.objective.value(y) + b)
    }

    fn derivatives(&self, y: &DVector<f64>, t: f64) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.cons.n;
        let (mut g, mut h) = match self.objective {
            Objective::Linear(c) => (-t * c, DMatrix::zeros(n, n)),
            Objective::Concave(f) => (-t * f.gradient(y), -t * f.hessian(y)),
        };
        self.cons.accumulate(y, false, &mut g, &mut h);
        (g, h)
    }
}

struct PhaseOne<'p> {
    cons: &'p Constraints,
}

impl Centering for PhaseOne<'_> {
    fn value(&self, y: &DVector<f64>, t: f64) -> Option<f64> {
        let b = self.cons.barrier(y, true)?;
        Some(t * y[self.cons.n] + b)
    }

    fn derivatives(&self, y: &DVector<f64>, t: f64) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.cons.n;
        let mut g = DVector::zeros(n + 1);
        let mut h = DMatrix::zeros(n + 1, n + 1);
        g[n] = t;
        self.cons.accumulate(y, true, &mut g, &mut h);
        (g, h)
    }
}

/// Newton direction and decrement² for H d = −g.
fn newton_direction(g: &DVector<f64>, mut h: DMatrix<f64>) -> (DVector<f64>, f64) {
    let scale = (0..h.nrows()).map(|i| h[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut reg = 0.0;
    loop {
        if let Some(chol) = h.clone().cholesky() {
            let d = chol.solve(&(-g));
            let dec = -g.dot(&d);
            return (d, dec.max(0.0));
        }
        reg = if reg == 0.0 { scale * 1e-14 } else { reg * 100.0 };
        for i in 0..h.nrows() {
            h[(i, i)] += reg;
        }
    }
}

/// Damped Newton centering at fixed `t`. Returns the Newton steps used, or
/// stops early when `stop` holds for an iterate.
fn center<C: Centering>(
    prob: &C,
    y: &mut DVector<f64>,
    t: f64,
    budget: usize,
    stop: &dyn Fn(&DVector<f64>) -> bool,
) -> usize {
    let mut steps = 0;
    while steps < budget {
        let (g, h) = prob.derivatives(y, t);
        let (d, dec) = newton_direction(&g, h);
        steps += 1;
        if dec / 2.0 <= 1e-11 {
            break;
        }
        let Some(f0) = prob.value(y, t) else { break };
        let slope = g.dot(&d);
        let mut alpha = 1.0;
        let mut moved = false;
        while alpha > 1e-14 {
            let cand = &*y + alpha * &d;
            if let Some(f1) = prob.value(&cand, t) {
                let slack = 1e-13 * f0.abs().max(1.0);
                if f1 <= f0 + 0.25 * alpha * slope + slack {
                    *y = cand;
                    moved = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !moved || stop(y) {
            break;
        }
    }
    steps
}

/// Finds a strictly feasible point, starting from `x0` projected into the box.
fn phase_one(cons: &Constraints, x0: &DVector<f64>, opts: &SolverOptions) -> Result<(DVector<f64>, usize), CvxError> {
    let n = cons.n;
    let mut x = x0.clone();
    // strictly inside the box
    for &(i, l) in &cons.lower {
        let u = cons.upper.iter().find(|&&(j, _)| j == i).map(|&(_, u)| u);
        let margin = u.map_or(1e-3 * (1.0 + l.abs()), |u| 1e-6 * (u - l));
        x[i] = x[i].max(l + margin);
    }
    for &(i, u) in &cons.upper {
        let l = cons.lower.iter().find(|&&(j, _)| j == i).map(|&(_, l)| l);
        let margin = l.map_or(1e-3 * (1.0 + u.abs()), |l| 1e-6 * (u - l));
        x[i] = x[i].min(u - margin);
    }
    let viol = cons.max_violation(&x);
    if viol < 0.0 {
        return Ok((x, 0));
    }
    let mut y = DVector::zeros(n + 1);
    y.rows_mut(0, n).copy_from(&x);
    y[n] = viol.max(0.0) + viol.abs().max(1e-6);
    let prob = PhaseOne { cons };
    let m = (cons.count() + 1) as f64;
    let mut t = 1.0 / y[n].max(1e-300);
    let mut used = 0;
    let feasible = |y: &DVector<f64>| y[n] < 0.0;
    loop {
        used += center(&prob, &mut y, t, opts.max_newton.saturating_sub(used).max(1), &feasible);
        if feasible(&y) {
            return Ok((y.rows(0, n).into_owned(), used));
        }
        // y[n] − m/t lower-bounds the optimal τ
        if m / t < 1e-12 * (1.0 + y[n].abs()) || y[n] - m / t > 0.0 || used >= opts.max_newton {
            return Err(CvxError::Infeasible { residual: y[n].max(0.0) });
        }
        t *= opts.mu;
    }
}

/// Solves the subproblem. `start` is an optional hint (typically the current
/// SCA iterate); when it is not strictly feasible, phase I runs first.
pub fn solve(
    problem: &ConvexSubproblem<'_>,
    start: Option<&DVector<f64>>,
    opts: &SolverOptions,
) -> Result<Solution, CvxError> {
    let cons = Constraints::build(problem)?;
    let n = cons.n;
    let x0 = match start {
        Some(s) if s.len() == n => s.clone(),
        Some(s) => return Err(CvxError::Dimension(format!("start has {} entries, expected {n}", s.len()))),
        None => match &problem.ball {
            Some(b) => b.center.clone(),
            None => DVector::from_iterator(
                n,
                (0..n).map(|i| {
                    let (l, u) = (problem.lower[i], problem.upper[i]);
                    0.5 * (l + u)
                }),
            ),
        },
    };
    let (mut x, mut used) = phase_one(&cons, &x0, opts)?;

    let prob = PhaseTwo {
        cons: &cons,
        objective: &problem.objective,
    };
    let m = cons.count().max(1) as f64;
    let scale = match &problem.objective {
        Objective::Linear(c) => c.norm(),
        Objective::Concave(f) => f.gradient(&x).norm(),
    };
    let mut t = if scale > 0.0 { 1.0 / scale } else { 1.0 };
    let never = |_: &DVector<f64>| false;
    let status = loop {
        used += center(&prob, &mut x, t, opts.max_newton.saturating_sub(used).max(1), &never);
        if m / t <= opts.tol {
            break SolveStatus::Optimal;
        }
        if used >= opts.max_newton {
            break SolveStatus::MaxIterations;
        }
        t *= opts.mu;
    };
    Ok(Solution {
        objective: problem.objective.value(&x),
        x,
        status,
        gap: m / t,
        newton_iterations: used,
    })
}
