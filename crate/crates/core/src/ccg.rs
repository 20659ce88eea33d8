//! Column-and-constraint generation over classical uncertainty sets.
//!
//! The main problem is re-solved over a growing scenario list; each round an
//! adversarial subproblem looks for the realization with the largest recourse
//! cost. Box and budget subproblems are solved exactly by evaluating every
//! vertex (the recourse cost is convex in the demand). The ellipsoid
//! subproblem is a multi-start alternating ascent and carries no guarantee.

use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2};
use crate::lp::{recourse_value, recourse_value_and_grad, solve_main, Instance, MainSolution};
use crate::probgen::standard_normal;
use crate::rng::{derive_seed, stream};
use crate::uncertainty::{ClassicalSet, SetKind};

pub const MAX_BOX_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    IterLimit,
    TimeLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Main-problem objective `cᵀx + γ`.
    pub lower_bound: f64,
    pub gamma: f64,
    pub subproblem_value: f64,
    /// `cᵀx + q(ξ, x)` for the subproblem's realization.
    pub upper_bound: f64,
    pub xi: Vec<f64>,
    pub elapsed_secs: f64,
    pub subproblem_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CcgConfig {
    /// Relative convergence tolerance on `q − γ`.
    pub eps: f64,
    pub max_iter: usize,
    pub time_limit_secs: f64,
    pub ellipsoid_starts: usize,
    pub seed: u64,
}

impl Default for CcgConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            max_iter: 100,
            time_limit_secs: 900.0,
            ellipsoid_starts: 20,
            seed: 0,
        }
    }
}

impl CcgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidArgument("eps must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be positive".into()));
        }
        if !(self.time_limit_secs > 0.0) {
            return Err(Error::InvalidArgument("time limit must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcgResult {
    pub method: String,
    pub x: Vec<f64>,
    pub gamma: f64,
    /// `cᵀx + γ` of the last main problem.
    pub objective: f64,
    pub scenarios: Vec<Vec<f64>>,
    pub trace: Vec<TraceEntry>,
    pub status: Status,
    /// The subproblem may under-estimate the worst case.
    pub heuristic: bool,
}

impl CcgResult {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subsolution {
    pub xi: Vec<f64>,
    pub value: f64,
}

pub(crate) fn converged(q: f64, gamma: f64, eps: f64) -> bool {
    q <= gamma + eps * (1.0 + gamma.abs())
}

/// Shared outer loop: main problem, then `subproblem(main, iteration)`, until
/// the subproblem value is within tolerance of γ or a limit is reached.
pub(crate) fn outer_loop<F>(
    inst: &Instance,
    initial: Vec<f64>,
    eps: f64,
    max_iter: usize,
    time_limit_secs: f64,
    mut subproblem: F,
) -> Result<(MainSolution, Vec<Vec<f64>>, Vec<TraceEntry>, Status)>
where
    F: FnMut(&MainSolution, usize) -> Result<Subsolution>,
{
    let start = Instant::now();
    let limit = Duration::try_from_secs_f64(time_limit_secs).unwrap_or(Duration::MAX);
    let mut scenarios = vec![initial];
    let mut trace = Vec::new();
    for iteration in 1..=max_iter {
        let at = |e: Error| Error::AtIteration {
            iteration,
            source: Box::new(e),
        };
        let main = solve_main(inst, &scenarios).map_err(at)?;
        let sub_start = Instant::now();
        let sub = subproblem(&main, iteration).map_err(at)?;
        let subproblem_secs = sub_start.elapsed().as_secs_f64();
        let first = inst.first_stage_cost(&main.x);
        trace.push(TraceEntry {
            iteration,
            lower_bound: main.objective,
            gamma: main.gamma,
            subproblem_value: sub.value,
            upper_bound: first + sub.value,
            xi: sub.xi.clone(),
            elapsed_secs: start.elapsed().as_secs_f64(),
            subproblem_secs,
        });
        if converged(sub.value, main.gamma, eps) {
            return Ok((main, scenarios, trace, Status::Converged));
        }
        if start.elapsed() >= limit {
            return Ok((main, scenarios, trace, Status::TimeLimit));
        }
        scenarios.push(sub.xi);
        if iteration == max_iter {
            return Ok((main, scenarios, trace, Status::IterLimit));
        }
    }
    unreachable!("max_iter is positive")
}

fn require_gamma(set: &ClassicalSet) -> Result<f64> {
    set.gamma
        .ok_or_else(|| Error::InvalidArgument("uncertainty set has no calibrated radius".into()))
}

/// Evaluate q at every candidate in parallel; the first maximizer wins ties.
fn best_of(inst: &Instance, x: &[f64], candidates: Vec<Vec<f64>>) -> Result<Subsolution> {
    let values = candidates
        .par_iter()
        .map(|xi| recourse_value(inst, x, xi))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    Ok(Subsolution {
        value: values[best],
        xi: candidates.into_iter().nth(best).expect("nonempty"),
    })
}

/// Vertices `μ̂ ± Γ·Σ̂_ii·e_i` of the scaled L1 ball.
pub fn budget_vertices(set: &ClassicalSet) -> Result<Vec<Vec<f64>>> {
    let gamma = require_gamma(set)?;
    let diag = set.cov.diagonal();
    let mut out = Vec::with_capacity(2 * set.dim());
    for i in 0..set.dim() {
        for sign in [1.0, -1.0] {
            let mut v = set.mean.clone();
            v[i] += sign * gamma * diag[i];
            out.push(v);
        }
    }
    Ok(out)
}

pub fn box_vertices(set: &ClassicalSet) -> Result<Vec<Vec<f64>>> {
    let d = set.dim();
    if d > MAX_BOX_DIM {
        return Err(Error::TooManyDimensions {
            dim: d,
            max: MAX_BOX_DIM,
        });
    }
    Ok((0..1usize << d)
        .map(|mask| {
            (0..d)
                .map(|i| {
                    if mask >> i & 1 == 1 {
                        set.max[i]
                    } else {
                        set.min[i]
                    }
                })
                .collect()
        })
        .collect())
}

pub fn budget_subproblem(inst: &Instance, x: &[f64], set: &ClassicalSet) -> Result<Subsolution> {
    best_of(inst, x, budget_vertices(set)?)
}

pub fn box_subproblem(inst: &Instance, x: &[f64], set: &ClassicalSet) -> Result<Subsolution> {
    best_of(inst, x, box_vertices(set)?)
}

/// `argmax_{ξ ∈ E} πᵀξ = μ̂ + √Γ·Σ̂π/√(πᵀΣ̂π)`; `None` when `πᵀΣ̂π = 0`.
pub fn ellipsoid_support_point(set: &ClassicalSet, pi: &[f64]) -> Option<Vec<f64>> {
    let sp = set.cov.mul_vec(pi);
    let quad = dot(pi, &sp);
    if !(quad > 0.0) {
        return None;
    }
    let scale = set.radius_bound().sqrt() / quad.sqrt();
    Some(
        set.mean
            .iter()
            .zip(&sp)
            .map(|(m, s)| m + scale * s)
            .collect(),
    )
}

/// Start points: half uniform on the boundary, half at `μ̂ ± √Γ·L·e_i`.
fn ellipsoid_starts(set: &ClassicalSet, starts: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let l = set
        .cov_factor()
        .ok_or_else(|| Error::InvalidArgument("ellipsoid set has no covariance factor".into()))?;
    let r = require_gamma(set)?.sqrt();
    let d = set.dim();
    let map = |u: &[f64]| -> Vec<f64> {
        l.mul_vec(u)
            .iter()
            .zip(&set.mean)
            .map(|(a, m)| m + r * a)
            .collect()
    };
    let n_random = starts.div_ceil(2);
    let mut rng = stream(seed, "ellipsoid-starts", &[]);
    let mut out = Vec::with_capacity(starts);
    for _ in 0..n_random {
        let mut u: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
        let n = norm2(&u);
        if n > 0.0 {
            u.iter_mut().for_each(|v| *v /= n);
        }
        out.push(map(&u));
    }
    for k in 0..starts - n_random {
        let mut u = vec![0.0; d];
        u[(k / 2) % d] = if k % 2 == 0 { 1.0 } else { -1.0 };
        out.push(map(&u));
    }
    Ok(out)
}

/// Alternating ascent from one start; returns the visited values and the best point.
pub fn ellipsoid_ascent(
    inst: &Instance,
    x: &[f64],
    set: &ClassicalSet,
    start: Vec<f64>,
) -> Result<(Subsolution, Vec<f64>)> {
    const MAX_ROUNDS: usize = 200;
    let mut xi = start;
    let (mut q, mut pi) = recourse_value_and_grad(inst, x, &xi)?;
    let mut values = vec![q];
    for _ in 0..MAX_ROUNDS {
        let Some(next) = ellipsoid_support_point(set, &pi) else {
            break;
        };
        let (q_next, pi_next) = recourse_value_and_grad(inst, x, &next)?;
        if q_next <= q + 1e-12 * (1.0 + q.abs()) {
            break;
        }
        values.push(q_next);
        xi = next;
        q = q_next;
        pi = pi_next;
    }
    Ok((Subsolution { xi, value: q }, values))
}

pub fn ellipsoid_subproblem(
    inst: &Instance,
    x: &[f64],
    set: &ClassicalSet,
    starts: usize,
    seed: u64,
) -> Result<Subsolution> {
    if starts == 0 {
        return Err(Error::InvalidArgument(
            "ellipsoid subproblem needs at least one start".into(),
        ));
    }
    let runs = ellipsoid_starts(set, starts, seed)?
        .into_par_iter()
        .map(|s| ellipsoid_ascent(inst, x, set, s).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (k, r) in runs.iter().enumerate() {
        if r.value > runs[best].value {
            best = k;
        }
    }
    Ok(runs.into_iter().nth(best).expect("nonempty"))
}

pub fn classical_subproblem(
    inst: &Instance,
    x: &[f64],
    set: &ClassicalSet,
    starts: usize,
    seed: u64,
) -> Result<Subsolution> {
    match set.kind {
        SetKind::Budget => budget_subproblem(inst, x, set),
        SetKind::Box => box_subproblem(inst, x, set),
        SetKind::Ellipsoid => ellipsoid_subproblem(inst, x, set, starts, seed),
    }
}

pub fn method_name(kind: SetKind) -> &'static str {
    match kind {
        SetKind::Box => "ccg-box",
        SetKind::Budget => "ccg-budget",
        SetKind::Ellipsoid => "ccg-ellipsoid",
    }
}

/// CCG starting from the scenario list `{μ̂}`.
pub fn run_ccg(inst: &Instance, set: &ClassicalSet, cfg: &CcgConfig) -> Result<CcgResult> {
    cfg.validate()?;
    if set.dim() != inst.n_destinations() {
        return Err(Error::Dimension(format!(
            "set has dimension {}, instance has {} destinations",
            set.dim(),
            inst.n_destinations()
        )));
    }
    if set.kind != SetKind::Box {
        require_gamma(set)?;
    }
    let initial = set.mean.clone();
    let (main, scenarios, trace, status) = outer_loop(
        inst,
        initial,
        cfg.eps,
        cfg.max_iter,
        cfg.time_limit_secs,
        |main, iteration| {
            let seed = derive_seed(cfg.seed, "ccg-iteration", &[iteration as u64]);
            classical_subproblem(inst, &main.x, set, cfg.ellipsoid_starts, seed)
        },
    )?;
    Ok(CcgResult {
        method: method_name(set.kind).to_string(),
        x: main.x,
        gamma: main.gamma,
        objective: main.objective,
        scenarios,
        trace,
        status,
        heuristic: set.kind == SetKind::Ellipsoid,
    })
}

/// Largest `q(v, x) − γ` over every vertex of a box or budget set.
pub fn vertex_certificate(
    inst: &Instance,
    x: &[f64],
    gamma: f64,
    set: &ClassicalSet,
) -> Result<f64> {
    let vertices = match set.kind {
        SetKind::Budget => budget_vertices(set)?,
        SetKind::Box => box_vertices(set)?,
        SetKind::Ellipsoid => {
            return Err(Error::InvalidArgument(
                "ellipsoids have no finite vertex set".into(),
            ));
        }
    };
    Ok(best_of(inst, x, vertices)?.value - gamma)
}

/// Uniform point of a budget set: uniform in the L1 ball, then scaled.
pub fn sample_budget_interior<R: Rng + ?Sized>(rng: &mut R, set: &ClassicalSet) -> Vec<f64> {
    let d = set.dim();
    let gamma = set.radius_bound();
    let diag = set.cov.diagonal();
    let mut e: Vec<f64> = (0..=d).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= total);
    (0..d)
        .map(|i| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            set.mean[i] + sign * e[i] * gamma * diag[i]
        })
        .collect()
}
