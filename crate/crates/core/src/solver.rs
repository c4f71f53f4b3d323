//! Sequential QP solution of the scenario program with online support
//! estimation.
//!
//! Decision variables are the inputs; states follow by rollout, and each
//! iteration solves a QP in the input step with the dynamics linearized about
//! the current iterate. Scenarios whose facets are active in any iteration
//! form the support estimate.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use log::debug;
use nalgebra::{DMatrix, DVector, Matrix4xX};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{reduce_polytope, BoundingBox, Halfspace, Polytope};
use crate::planner::dynamics::{unicycle_jacobians, Disc, RobotInput, RobotState, TrajectoryPlan};
use crate::qp::{solve_qp, LinearRow, QpProblem};
use crate::risk::{certify, RiskCertificate, RiskConfig};
use crate::uncertainty::{ScenarioId, ScenarioSet};

/// Objective `sum_k |r_k(x_k, u_{k-1})|^2` over stages `k = 1..=N`.
pub trait LeastSquaresCost {
    fn residual_count(&self) -> usize;

    /// Residuals of stage `stage` and their Jacobians with respect to the
    /// state `(px, py, heading, s)` and the input `(v, omega)`.
    fn residuals(
        &self,
        stage: usize,
        x: &RobotState,
        u: &RobotInput,
        r: &mut [f64],
        jx: &mut [[f64; 4]],
        ju: &mut [[f64; 2]],
    );
}

/// Raw scenario halfspaces for one (stage, disc) pair.
#[derive(Debug, Clone)]
pub struct StageConstraints {
    /// 1-based stage index.
    pub stage: usize,
    pub disc: usize,
    pub halfspaces: Vec<Halfspace>,
    pub bbox: BoundingBox,
}

pub struct SpProblem<'a> {
    pub x_init: RobotState,
    pub horizon: usize,
    pub dt: f64,
    pub cost: &'a dyn LeastSquaresCost,
    pub input_lower: RobotInput,
    pub input_upper: RobotInput,
    pub discs: Vec<Disc>,
    pub stages: Vec<StageConstraints>,
    pub n_h: usize,
}

impl<'a> SpProblem<'a> {
    fn filtered(&self, keep: impl Fn(ScenarioId) -> bool) -> SpProblem<'a> {
        let stages = self
            .stages
            .iter()
            .map(|s| StageConstraints {
                halfspaces: s
                    .halfspaces
                    .iter()
                    .filter(|h| h.provenance.map_or(true, |p| keep(p.scenario)))
                    .copied()
                    .collect(),
                ..s.clone()
            })
            .collect();
        SpProblem { stages, discs: self.discs.clone(), ..*self }
    }

    /// The same problem with the given scenarios' constraints dropped.
    pub fn without(&self, ids: &BTreeSet<ScenarioId>) -> SpProblem<'a> {
        self.filtered(|id| !ids.contains(&id))
    }

    /// The same problem keeping only the given scenarios' constraints.
    pub fn restricted_to(&self, ids: &BTreeSet<ScenarioId>) -> SpProblem<'a> {
        self.filtered(|id| ids.contains(&id))
    }

    fn clamp(&self, u: &RobotInput) -> RobotInput {
        RobotInput {
            v: u.v.clamp(self.input_lower.v, self.input_upper.v),
            omega: u.omega.clamp(self.input_lower.omega, self.input_upper.omega),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub max_iterations: usize,
    /// Converged once the accepted step's max-norm falls below this.
    pub step_tolerance: f64,
    pub max_halvings: usize,
    /// Constraint violation (m) tolerated for an iterate to count as feasible.
    pub feasibility_tolerance: f64,
    pub regularization: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { max_iterations: 15, step_tolerance: 1e-8, max_halvings: 8, feasibility_tolerance: 1e-6, regularization: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    EarlyTerminated,
    Fallback,
    Infeasible,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub polytopes_us: u64,
    pub qp_us: u64,
    pub total_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub support_size: usize,
    pub active: Vec<ScenarioId>,
    pub removed: Vec<ScenarioId>,
    pub step_length: f64,
    pub max_violation: f64,
    pub kkt_residual: f64,
    pub qp_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub plan: TrajectoryPlan,
    pub support_set: BTreeSet<ScenarioId>,
    pub support_size: usize,
    pub removed: BTreeSet<ScenarioId>,
    pub certificate: RiskCertificate,
    pub iterations_used: usize,
    pub per_iteration_active: Vec<BTreeSet<ScenarioId>>,
    pub status: SolveStatus,
    pub timings: Timings,
    pub diagnostics: Vec<IterationRecord>,
    /// Polytopes in force when the returned plan was computed.
    pub polytopes: Vec<Polytope>,
}

/// `(union of active sets and removed, its size)`.
pub fn aggregate_support(
    per_iteration_active: &[BTreeSet<ScenarioId>],
    removed: &BTreeSet<ScenarioId>,
) -> (BTreeSet<ScenarioId>, usize) {
    let mut set: BTreeSet<ScenarioId> = removed.clone();
    for a in per_iteration_active {
        set.extend(a.iter().copied());
    }
    let n = set.len();
    (set, n)
}

/// Flags `infeasible` plus up to `budget` active scenarios, highest dual
/// score first (ties to the smaller id), and returns them ascending.
pub fn remove_scenarios(
    scenarios: &mut ScenarioSet,
    active_duals: &[(ScenarioId, f64)],
    infeasible: &[ScenarioId],
    budget: usize,
) -> Vec<ScenarioId> {
    let mut out: BTreeSet<ScenarioId> = infeasible.iter().copied().collect();
    let mut ranked: Vec<(ScenarioId, f64)> =
        active_duals.iter().copied().filter(|(id, _)| !scenarios.is_removed(*id) && !out.contains(id)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out.extend(ranked.iter().take(budget).map(|(id, _)| *id));
    for &id in &out {
        scenarios.mark_removed(id);
    }
    out.into_iter().collect()
}

/// Builds one stage polytope from the non-removed halfspaces, flagging
/// scenarios that make it empty. Returns the polytope and the newly removed ids.
fn build_polytope(stage: &StageConstraints, n_h: usize, scenarios: &mut ScenarioSet) -> Result<(Polytope, Vec<ScenarioId>)> {
    let mut newly = Vec::new();
    loop {
        let live: Vec<Halfspace> = stage
            .halfspaces
            .iter()
            .filter(|h| h.provenance.map_or(true, |p| !scenarios.is_removed(p.scenario)))
            .copied()
            .collect();
        match reduce_polytope(&live, &stage.bbox, n_h, stage.stage, stage.disc) {
            Ok(p) => return Ok((p, newly)),
            Err(Error::EmptyPolytope { blocking }) if !blocking.is_empty() => {
                for b in blocking {
                    if !scenarios.is_removed(b.scenario) {
                        scenarios.mark_removed(b.scenario);
                        newly.push(b.scenario);
                    }
                }
            }
            Err(e) => return Err(e),
        }
    }
}

/// Sensitivities `d x_k / d u` for `k = 0..=N`, each 4 x 2N.
fn sensitivities(plan: &TrajectoryPlan) -> Vec<Matrix4xX<f64>> {
    let n = plan.horizon();
    let mut out = Vec::with_capacity(n + 1);
    out.push(Matrix4xX::zeros(2 * n));
    for k in 0..n {
        let (a, b) = unicycle_jacobians(&plan.states[k], &plan.inputs[k], plan.dt);
        let mut next = a * &out[k];
        for r in 0..4 {
            next[(r, 2 * k)] += b[(r, 0)];
            next[(r, 2 * k + 1)] += b[(r, 1)];
        }
        out.push(next);
    }
    out
}

fn max_violation(plan: &TrajectoryPlan, discs: &[Disc], polytopes: &[Polytope]) -> f64 {
    polytopes
        .iter()
        .map(|p| p.max_violation(&discs[p.disc].center(&plan.states[p.stage])))
        .fold(0.0, f64::max)
}

struct Snapshot {
    plan: TrajectoryPlan,
    support: BTreeSet<ScenarioId>,
    removed: BTreeSet<ScenarioId>,
    feasible: bool,
    polytopes: Vec<Polytope>,
}

/// Solves the scenario program from `warm_start`, removing scenarios through
/// the flags of `scenarios`.
pub fn solve_sp(
    problem: &SpProblem,
    scenarios: &mut ScenarioSet,
    config: &RiskConfig,
    warm_start: &TrajectoryPlan,
    settings: &SolverSettings,
) -> Result<SolveResult> {
    let start = Instant::now();
    let n = problem.horizon;
    if warm_start.horizon() != n {
        return Err(Error::InvalidArgument("warm start horizon does not match the problem".into()));
    }
    if settings.max_iterations == 0 {
        return Err(Error::InvalidArgument("max_iterations must be at least 1".into()));
    }
    let mut timings = Timings::default();

    let mut removed: BTreeSet<ScenarioId> = scenarios.removed_ids().into_iter().collect();
    let mut removed_active = 0usize;

    let t = Instant::now();
    let mut polytopes = Vec::with_capacity(problem.stages.len());
    for stage in &problem.stages {
        let (p, newly) = build_polytope(stage, problem.n_h, scenarios)?;
        removed.extend(newly);
        polytopes.push(p);
    }
    timings.polytopes_us += t.elapsed().as_micros() as u64;

    let mut plan = TrajectoryPlan::rollout(
        problem.x_init,
        warm_start.inputs.iter().map(|u| problem.clamp(u)).collect(),
        problem.dt,
    );
    let mut violation = max_violation(&plan, &problem.discs, &polytopes);

    let mut per_iteration_active: Vec<BTreeSet<ScenarioId>> = Vec::new();
    let mut diagnostics = Vec::new();
    let mut history: Vec<Snapshot> = Vec::new();
    let mut support: BTreeSet<ScenarioId> = removed.clone();
    let mut status = None;

    for iteration in 1..=settings.max_iterations {
        let sens = sensitivities(&plan);
        let (h, g) = gauss_newton(problem, &plan, &sens, settings.regularization);

        // QP; infeasibility is resolved by flagging the conflicting scenarios
        let solution = loop {
            let (rows, tags) = constraint_rows(problem, &plan, &sens, &polytopes);
            let qp = QpProblem { hessian: h.clone(), gradient: g.clone(), equalities: vec![], inequalities: rows };
            let t = Instant::now();
            let res = solve_qp(&qp);
            timings.qp_us += t.elapsed().as_micros() as u64;
            match res {
                Ok(sol) => break Some((sol, tags)),
                Err(Error::InfeasibleQp { conflict }) => {
                    let ids: BTreeSet<ScenarioId> = conflict.iter().filter_map(|&i| tags[i]).collect();
                    if ids.is_empty() {
                        debug!("iteration {iteration}: QP infeasible without scenario constraints in conflict");
                        break None;
                    }
                    let flagged = remove_scenarios(scenarios, &[], &ids.into_iter().collect::<Vec<_>>(), 0);
                    removed.extend(flagged.iter().copied());
                    let t = Instant::now();
                    rebuild(problem, scenarios, &mut polytopes, &mut removed, &flagged)?;
                    timings.polytopes_us += t.elapsed().as_micros() as u64;
                }
                Err(e) => return Err(Error::Subproblem { iteration, source: Box::new(e) }),
            }
        };
        let Some((sol, tags)) = solution else {
            status = Some(SolveStatus::Infeasible);
            break;
        };

        let mut active = BTreeSet::new();
        let mut scores: BTreeMap<ScenarioId, f64> = BTreeMap::new();
        for &i in &sol.active {
            if let Some(id) = tags[i] {
                active.insert(id);
                *scores.entry(id).or_insert(0.0) += sol.duals[i];
            }
        }

        // line search on constraint violation
        let du = &sol.x;
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=settings.max_halvings {
            let inputs: Vec<RobotInput> = plan
                .inputs
                .iter()
                .enumerate()
                .map(|(k, u)| {
                    problem.clamp(&RobotInput { v: u.v + alpha * du[2 * k], omega: u.omega + alpha * du[2 * k + 1] })
                })
                .collect();
            let trial = TrajectoryPlan::rollout(problem.x_init, inputs, problem.dt);
            let v = max_violation(&trial, &problem.discs, &polytopes);
            if v <= settings.feasibility_tolerance || v < violation {
                accepted = Some((trial, v));
                break;
            }
            alpha *= 0.5;
        }
        let step_length = if accepted.is_some() { alpha * du.amax() } else { 0.0 };
        let stepped = accepted.is_some();
        if let Some((trial, v)) = accepted {
            plan = trial;
            violation = v;
        }

        per_iteration_active.push(active.clone());
        support.extend(active.iter().copied());
        support.extend(removed.iter().copied());
        let feasible = violation <= settings.feasibility_tolerance;
        diagnostics.push(IterationRecord {
            iteration,
            support_size: support.len(),
            active: active.iter().copied().collect(),
            removed: removed.iter().copied().collect(),
            step_length,
            max_violation: violation,
            kkt_residual: sol.kkt_residual,
            qp_iterations: sol.iterations,
        });
        history.push(Snapshot {
            plan: plan.clone(),
            support: support.clone(),
            removed: removed.clone(),
            feasible,
            polytopes: polytopes.clone(),
        });

        if support.len() > config.support_limit {
            status = Some(SolveStatus::Infeasible);
            break;
        }

        let mut removed_now = Vec::new();
        if removed_active < config.removal_budget && !scores.is_empty() {
            let ranked: Vec<(ScenarioId, f64)> = scores.into_iter().collect();
            removed_now = remove_scenarios(scenarios, &ranked, &[], config.removal_budget - removed_active);
            removed_active += removed_now.len();
            removed.extend(removed_now.iter().copied());
            let t = Instant::now();
            rebuild(problem, scenarios, &mut polytopes, &mut removed, &removed_now)?;
            timings.polytopes_us += t.elapsed().as_micros() as u64;
            violation = max_violation(&plan, &problem.discs, &polytopes);
        }

        if removed_now.is_empty() && (!stepped || step_length < settings.step_tolerance) {
            break;
        }
    }

    // pick the returned iterate
    let last_ok = history.last().map_or(false, |s| s.feasible && s.support.len() <= config.support_limit);
    let chosen = if last_ok && status.is_none() {
        status = Some(SolveStatus::Optimal);
        history.len().checked_sub(1)
    } else {
        let m = history.iter().rposition(|s| s.feasible && s.support.len() <= config.support_limit);
        status = Some(if m.is_some() { SolveStatus::EarlyTerminated } else { SolveStatus::Infeasible });
        m
    };
    let status = status.unwrap();

    let (plan, support_set, removed, iterations_used, polytopes) = match chosen {
        Some(m) => {
            let s = history.swap_remove(m);
            per_iteration_active.truncate(m + 1);
            (s.plan, s.support, s.removed, m + 1, s.polytopes)
        }
        None => {
            let (set, _) = aggregate_support(&per_iteration_active, &removed);
            let used = per_iteration_active.len();
            (plan, set, removed, used, polytopes)
        }
    };
    let support_size = support_set.len();
    let mut certificate = certify(support_size, config);
    if status == SolveStatus::Infeasible {
        certificate.certified = false;
        certificate.epsilon_bound = 1.0;
    }
    timings.total_us = start.elapsed().as_micros() as u64;
    debug!(
        "solve: status {status:?}, n_hat {support_size}, iterations {iterations_used}, removed {:?}",
        removed
    );
    Ok(SolveResult {
        plan,
        support_set,
        support_size,
        removed,
        certificate,
        iterations_used,
        per_iteration_active,
        status,
        timings,
        diagnostics,
        polytopes,
    })
}

/// Rebuilds the polytopes that carried facets of `flagged` scenarios.
fn rebuild(
    problem: &SpProblem,
    scenarios: &mut ScenarioSet,
    polytopes: &mut [Polytope],
    removed: &mut BTreeSet<ScenarioId>,
    flagged: &[ScenarioId],
) -> Result<()> {
    let mut pending: Vec<ScenarioId> = flagged.to_vec();
    while !pending.is_empty() {
        let mut next = Vec::new();
        for (i, stage) in problem.stages.iter().enumerate() {
            let touched = polytopes[i]
                .facets
                .iter()
                .any(|h| h.provenance.map_or(false, |p| pending.contains(&p.scenario)));
            if touched {
                let (p, newly) = build_polytope(stage, problem.n_h, scenarios)?;
                polytopes[i] = p;
                removed.extend(newly.iter().copied());
                next.extend(newly);
            }
        }
        pending = next;
    }
    Ok(())
}

fn gauss_newton(problem: &SpProblem, plan: &TrajectoryPlan, sens: &[Matrix4xX<f64>], reg: f64) -> (DMatrix<f64>, DVector<f64>) {
    let n = problem.horizon;
    let m = problem.cost.residual_count();
    let nu = 2 * n;
    let mut h = DMatrix::identity(nu, nu) * reg;
    let mut g = DVector::zeros(nu);
    let mut r = vec![0.0; m];
    let mut jx = vec![[0.0; 4]; m];
    let mut ju = vec![[0.0; 2]; m];
    let mut row = DVector::zeros(nu);
    for k in 1..=n {
        problem.cost.residuals(k, &plan.states[k], &plan.inputs[k - 1], &mut r, &mut jx, &mut ju);
        let sk = &sens[k];
        for i in 0..m {
            row.fill(0.0);
            for c in 0..2 * k {
                row[c] = (0..4).map(|s| jx[i][s] * sk[(s, c)]).sum();
            }
            row[2 * (k - 1)] += ju[i][0];
            row[2 * (k - 1) + 1] += ju[i][1];
            // only the first 2k entries can be non-zero
            let w = 2 * k;
            for a in 0..w {
                let ra = row[a];
                if ra == 0.0 {
                    continue;
                }
                g[a] += 2.0 * r[i] * ra;
                for b in 0..w {
                    h[(a, b)] += 2.0 * ra * row[b];
                }
            }
        }
    }
    (h, g)
}

/// Input-bound rows and linearized facet rows, with the scenario behind each row.
fn constraint_rows(
    problem: &SpProblem,
    plan: &TrajectoryPlan,
    sens: &[Matrix4xX<f64>],
    polytopes: &[Polytope],
) -> (Vec<LinearRow>, Vec<Option<ScenarioId>>) {
    let n = problem.horizon;
    let mut rows = Vec::with_capacity(4 * n + polytopes.len() * 8);
    let mut tags = Vec::with_capacity(rows.capacity());
    for (k, u) in plan.inputs.iter().enumerate() {
        let (lo, hi) = (&problem.input_lower, &problem.input_upper);
        rows.push(LinearRow::new(vec![(2 * k, 1.0)], hi.v - u.v));
        rows.push(LinearRow::new(vec![(2 * k, -1.0)], u.v - lo.v));
        rows.push(LinearRow::new(vec![(2 * k + 1, 1.0)], hi.omega - u.omega));
        rows.push(LinearRow::new(vec![(2 * k + 1, -1.0)], u.omega - lo.omega));
        tags.extend([None; 4]);
    }
    for poly in polytopes {
        let k = poly.stage;
        let disc = &problem.discs[poly.disc];
        let x = &plan.states[k];
        let c = disc.center(x);
        let jc = disc.jacobian(x);
        let sk = &sens[k];
        // d center / d u, 2 x 2k
        let mut dc = [vec![0.0; 2 * k], vec![0.0; 2 * k]];
        for (d, jrow) in dc.iter_mut().zip(jc.iter()) {
            for (col, v) in d.iter_mut().enumerate() {
                *v = (0..4).map(|s| jrow[s] * sk[(s, col)]).sum();
            }
        }
        for h in &poly.facets {
            let coeffs: Vec<(usize, f64)> = (0..2 * k)
                .map(|col| (col, h.normal.x * dc[0][col] + h.normal.y * dc[1][col]))
                .filter(|&(_, v)| v != 0.0)
                .collect();
            let rhs = h.slack(&c);
            if coeffs.is_empty() {
                // a constraint the inputs cannot influence
                if rhs >= 0.0 {
                    continue;
                }
                rows.push(LinearRow::new(vec![(0, 0.0)], rhs));
            } else {
                rows.push(LinearRow::new(coeffs, rhs));
            }
            tags.push(h.provenance.map(|p| p.scenario));
        }
    }
    (rows, tags)
}

/// Scenarios whose exclusion changes the solution by more than `tolerance`
/// in the input max-norm; one solve per scenario.
pub fn greedy_support(
    problem: &SpProblem,
    scenarios: &ScenarioSet,
    config: &RiskConfig,
    warm_start: &TrajectoryPlan,
    settings: &SolverSettings,
    tolerance: f64,
) -> Result<BTreeSet<ScenarioId>> {
    let base = solve_sp(problem, &mut scenarios.clone(), config, warm_start, settings)?;
    let reference = base.plan.input_vector();
    let mut out = BTreeSet::new();
    for id in scenarios.ids() {
        let excluded: BTreeSet<ScenarioId> = [id].into();
        let sub = problem.without(&excluded);
        let res = solve_sp(&sub, &mut scenarios.clone(), config, warm_start, settings)?;
        let diff = res.plan.input_vector().iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if diff > tolerance {
            out.insert(id);
        }
    }
    Ok(out)
}
