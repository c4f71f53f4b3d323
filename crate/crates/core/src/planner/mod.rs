//! Receding-horizon planner: sample, linearize, reduce, solve, certify, actuate.

pub mod dynamics;
pub mod mpcc;
pub mod projection;

use std::time::Instant;

use log::{debug, warn};
use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::baseline::{gaussian_baseline_halfspace, tightening};
use crate::geometry::{linearize_collision, reduce_polytope, BoundingBox, Halfspace, Polytope, Provenance};
use crate::risk::RiskConfig;
use crate::solver::{solve_sp, SolveResult, SolveStatus, SolverSettings, SpProblem, StageConstraints};
use crate::uncertainty::{sample_trajectories, stream_key, ObstacleModel, ScenarioSet, Vec2};

use dynamics::{Disc, RobotInput, RobotState, TrajectoryPlan};
use mpcc::{MpccCost, MpccWeights, ReferencePath};
use projection::{project_previous_plan, push_out_of_samples};

/// A dynamic obstacle as seen by the planner: its predictive model, anchored
/// at the current position, and its disc radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub model: ObstacleModel,
    pub radius: f64,
}

/// How collision constraints are formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintMethod {
    /// Sampled joint scenarios with online support certification.
    #[default]
    Scenario,
    /// Marginal Gaussian chance constraints per stage, obstacle and mode.
    Gaussian { epsilon_k: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    #[serde(default)]
    pub method: ConstraintMethod,
    pub horizon: usize,
    pub dt: f64,
    pub control_period: f64,
    pub weights: MpccWeights,
    pub path: ReferencePath,
    pub reference_speed: f64,
    pub discs: Vec<Disc>,
    pub risk: RiskConfig,
    pub input_lower: RobotInput,
    pub input_upper: RobotInput,
    /// Speed reduction per second while braking (m/s^2).
    pub max_deceleration: f64,
    pub n_h: usize,
    /// Half width of the box that closes every free-space polytope.
    pub box_half_width: f64,
    pub max_iterations: usize,
}

impl PlannerConfig {
    /// Mobile-robot defaults: a single disc of 0.325 m, N = 20 on a 0.2 s grid,
    /// 20 Hz control and `eps = 0.05, beta = 0.01, n_bar = 9, R = 1`.
    pub fn mobile_robot(path: ReferencePath, weights: MpccWeights) -> Result<Self> {
        Ok(Self {
            method: ConstraintMethod::Scenario,
            horizon: 20,
            dt: 0.2,
            control_period: 0.05,
            weights,
            path,
            reference_speed: 2.0,
            discs: vec![Disc { offset: 0.0, radius: 0.325 }],
            risk: RiskConfig::new(0.05, 0.01, 9, 1)?,
            input_lower: RobotInput::new(0.0, -2.0),
            input_upper: RobotInput::new(3.0, 2.0),
            max_deceleration: 2.0,
            n_h: 20,
            box_half_width: 10.0,
            max_iterations: 15,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        if !(self.dt > 0.0 && self.control_period > 0.0) {
            return bad("dt and control_period must be positive".into());
        }
        let w = &self.weights;
        if [w.velocity, w.angular_velocity, w.contour, w.lag].iter().any(|v| !(*v >= 0.0)) {
            return bad("weights must be non-negative".into());
        }
        if self.discs.is_empty() || self.discs.iter().any(|d| !(d.radius >= 0.0)) {
            return bad("at least one disc with a non-negative radius is required".into());
        }
        if self.input_lower.v > self.input_upper.v || self.input_lower.omega > self.input_upper.omega {
            return bad("input bounds are inverted".into());
        }
        if !(self.max_deceleration > 0.0) {
            return bad("max_deceleration must be positive".into());
        }
        if self.max_iterations == 0 || self.n_h == 0 {
            return bad("max_iterations and n_h must be positive".into());
        }
        if let ConstraintMethod::Gaussian { epsilon_k } = self.method {
            if !(epsilon_k > 0.0 && epsilon_k <= 0.5) {
                return bad(format!("epsilon_k must lie in (0, 0.5], got {epsilon_k}"));
            }
        }
        if self.risk.removal_budget > self.risk.support_limit {
            return bad("removal budget exceeds the support limit".into());
        }
        Ok(())
    }

    pub fn solver_settings(&self) -> SolverSettings {
        SolverSettings { max_iterations: self.max_iterations, ..Default::default() }
    }

    pub fn cost(&self) -> MpccCost {
        MpccCost { path: self.path.clone(), weights: self.weights, reference_speed: self.reference_speed }
    }
}

/// What the robot was told to do in a control step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// First input of a freshly certified plan.
    Plan,
    /// Input of the last certified plan at the elapsed time.
    PreviousPlan,
    Brake,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTimings {
    pub sampling_us: u64,
    pub linearization_us: u64,
    pub polytopes_us: u64,
    pub qp_us: u64,
    pub total_us: u64,
}

/// One line of the per-step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub time: f64,
    pub state: RobotState,
    pub input: RobotInput,
    pub support_size: usize,
    pub epsilon_bound: f64,
    pub certified: bool,
    pub removed: usize,
    pub status: SolveStatus,
    pub action: Action,
    pub timings: StepTimings,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub input: RobotInput,
    pub record: StepRecord,
    /// Absent when the subproblem failed before producing a plan.
    pub result: Option<SolveResult>,
}

/// Closed-loop planner state carried between control steps.
#[derive(Debug, Clone)]
pub struct Planner {
    pub config: PlannerConfig,
    seed: u64,
    step: u64,
    /// Most recent solution and the time it was computed.
    previous: Option<(TrajectoryPlan, f64)>,
    certified: Option<(TrajectoryPlan, f64)>,
    last_input: RobotInput,
}

impl Planner {
    pub fn new(config: PlannerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, seed, step: 0, previous: None, certified: None, last_input: RobotInput::default() })
    }

    pub fn last_certified_plan(&self) -> Option<&TrajectoryPlan> {
        self.certified.as_ref().map(|(p, _)| p)
    }

    /// Initial guess for a step at `time` from `state`: the previous solution
    /// advanced by the elapsed time with its last input held, or a straight
    /// run at the reference speed.
    pub fn warm_start(&self, time: f64, state: &RobotState) -> TrajectoryPlan {
        let c = &self.config;
        match &self.previous {
            Some((plan, made)) => advance(plan, *state, time - made),
            None => {
                let v = c.reference_speed.clamp(c.input_lower.v, c.input_upper.v);
                TrajectoryPlan::constant(*state, RobotInput::new(v, 0.0), c.horizon, c.dt)
            }
        }
    }

    /// One control step at simulation `time`.
    pub fn mpc_step(&mut self, time: f64, state: &RobotState, obstacles: &[Obstacle]) -> StepOutcome {
        let start = Instant::now();
        let step = self.step;
        self.step += 1;
        let mut timings = StepTimings::default();
        let outcome = self.plan(time, state, obstacles, step, &mut timings);

        let (input, action, status, result) = match outcome {
            Ok(res) => {
                self.previous = Some((res.plan.clone(), time));
                let usable = matches!(res.status, SolveStatus::Optimal | SolveStatus::EarlyTerminated);
                if res.certificate.certified && usable {
                    self.certified = Some((res.plan.clone(), time));
                    (res.plan.inputs[0], Action::Plan, res.status, Some(res))
                } else {
                    let (input, action) = self.fallback(time);
                    (input, action, SolveStatus::Fallback, Some(res))
                }
            }
            Err(e) => {
                warn!("step {step}: planner failed: {e}");
                let (input, action) = self.fallback(time);
                (input, action, SolveStatus::Fallback, None)
            }
        };
        self.last_input = input;
        timings.total_us = start.elapsed().as_micros() as u64;

        let (support_size, epsilon_bound, certified, removed) = match &result {
            Some(r) => (r.support_size, r.certificate.epsilon_bound, r.certificate.certified, r.removed.len()),
            None => (0, 1.0, false, 0),
        };
        let record = StepRecord {
            step,
            time,
            state: *state,
            input,
            support_size,
            epsilon_bound,
            certified: certified && action == Action::Plan,
            removed,
            status,
            action,
            timings,
        };
        StepOutcome { input, record, result }
    }

    fn fallback(&self, time: f64) -> (RobotInput, Action) {
        if let Some((plan, made)) = &self.certified {
            let elapsed = time - made;
            if elapsed < plan.horizon() as f64 * plan.dt - 1e-9 {
                if let Some(u) = plan.input_at(elapsed) {
                    return (u, Action::PreviousPlan);
                }
            }
        }
        let c = &self.config;
        let v = (self.last_input.v - c.max_deceleration * c.control_period).max(0.0);
        (RobotInput::new(v, 0.0), Action::Brake)
    }

    fn plan(
        &self,
        time: f64,
        state: &RobotState,
        obstacles: &[Obstacle],
        step: u64,
        timings: &mut StepTimings,
    ) -> Result<SolveResult> {
        let c = &self.config;
        let cost = c.cost();
        let warm = self.warm_start(time, state);
        if let ConstraintMethod::Gaussian { epsilon_k } = c.method {
            let t = Instant::now();
            let stages = gaussian_stages(c, &warm, obstacles, epsilon_k)?;
            timings.linearization_us = t.elapsed().as_micros() as u64;
            let problem = self.problem(state, &cost, stages);
            let res = solve_sp(&problem, &mut empty_scenarios(c.horizon), &c.risk, &warm, &c.solver_settings())?;
            timings.polytopes_us = res.timings.polytopes_us;
            timings.qp_us = res.timings.qp_us;
            return Ok(res);
        }

        let t = Instant::now();
        let mut scenarios = if obstacles.is_empty() {
            None
        } else {
            let models: Vec<ObstacleModel> = obstacles.iter().map(|o| o.model.clone()).collect();
            Some(sample_trajectories(&models, c.horizon, c.risk.sample_size, c.dt, stream_key(self.seed, step, 0))?)
        };
        timings.sampling_us = t.elapsed().as_micros() as u64;

        let radii: Vec<f64> = obstacles.iter().map(|o| o.radius).collect();
        let t = Instant::now();
        let stages = match scenarios.as_mut() {
            Some(sc) => {
                let pushed = push_out_of_samples(&warm, &stage_samples(sc, &radii), &c.discs);
                let first = linearize_all(c, &pushed, sc, &radii);
                let polytopes = reduce_all(c, &first);
                let projected = project_previous_plan(&pushed, &polytopes, &c.discs).unwrap_or(pushed);
                linearize_all(c, &projected, sc, &radii)
            }
            None => linearize_all(c, &warm, &empty_scenarios(c.horizon), &radii),
        };
        timings.linearization_us = t.elapsed().as_micros() as u64;

        let problem = self.problem(state, &cost, stages);
        let mut sc = scenarios.unwrap_or_else(|| empty_scenarios(c.horizon));
        let res = solve_sp(&problem, &mut sc, &c.risk, &warm, &c.solver_settings())?;
        timings.polytopes_us = res.timings.polytopes_us;
        timings.qp_us = res.timings.qp_us;
        debug!(
            "step {step}: n_hat {} removed {} status {:?} iterations {}",
            res.support_size,
            res.removed.len(),
            res.status,
            res.iterations_used
        );
        Ok(res)
    }
}

impl Planner {
    fn problem<'a>(&self, state: &RobotState, cost: &'a MpccCost, stages: Vec<StageConstraints>) -> SpProblem<'a> {
        let c = &self.config;
        SpProblem {
            x_init: *state,
            horizon: c.horizon,
            dt: c.dt,
            cost,
            input_lower: c.input_lower,
            input_upper: c.input_upper,
            discs: c.discs.clone(),
            stages,
            n_h: c.n_h,
        }
    }
}

/// Tightened marginal constraints at the disc centers of `around`, one per
/// stage, disc, obstacle and Gaussian mode.
fn gaussian_stages(
    c: &PlannerConfig,
    around: &TrajectoryPlan,
    obstacles: &[Obstacle],
    epsilon_k: f64,
) -> Result<Vec<StageConstraints>> {
    let modes: Vec<_> = obstacles.iter().map(|o| o.model.gaussian_modes(c.horizon, c.dt)).collect();
    let mut stages = Vec::with_capacity(c.horizon * c.discs.len());
    for k in 1..=c.horizon {
        let x = &around.states[k];
        for (d, disc) in c.discs.iter().enumerate() {
            let p_hat = disc.center(x);
            let mut halfspaces = Vec::new();
            for (o, obstacle_modes) in obstacles.iter().zip(&modes) {
                let r = disc.radius + o.radius;
                for mode in obstacle_modes {
                    let mean = mode.mean[k - 1];
                    let var = mode.variance[k - 1];
                    let sigma = Matrix2::new(var[0], 0.0, 0.0, var[1]);
                    let h = match gaussian_baseline_halfspace(p_hat, mean, &sigma, r, epsilon_k) {
                        Err(Error::DegenerateDirection) => {
                            let a = Vec2::new(-x.heading.cos(), -x.heading.sin());
                            let tight = tightening(a, &sigma, epsilon_k);
                            Halfspace::new(-a, -(a.dot(&mean) + r + tight))
                        }
                        other => other?,
                    };
                    halfspaces.push(h);
                }
            }
            stages.push(StageConstraints {
                stage: k,
                disc: d,
                halfspaces,
                bbox: BoundingBox::around(p_hat, c.box_half_width),
            });
        }
    }
    Ok(stages)
}

/// `plan` advanced by `elapsed` seconds (inputs held past its end), rolled out from `x0`.
pub fn advance(plan: &TrajectoryPlan, x0: RobotState, elapsed: f64) -> TrajectoryPlan {
    let last = *plan.inputs.last().expect("plan has at least one input");
    let inputs =
        (0..plan.horizon()).map(|k| plan.input_at(elapsed + k as f64 * plan.dt).unwrap_or(last)).collect();
    TrajectoryPlan::rollout(x0, inputs, plan.dt)
}

fn empty_scenarios(horizon: usize) -> ScenarioSet {
    ScenarioSet::from_positions(0, 0, horizon, Vec::new()).expect("empty layout")
}

/// Linearized collision halfspaces of every scenario, per stage and disc, at
/// the disc centers of `around`.
fn linearize_all(c: &PlannerConfig, around: &TrajectoryPlan, sc: &ScenarioSet, radii: &[f64]) -> Vec<StageConstraints> {
    let mut stages = Vec::with_capacity(c.horizon * c.discs.len());
    for k in 1..=c.horizon {
        let x = &around.states[k];
        for (d, disc) in c.discs.iter().enumerate() {
            let p_hat = disc.center(x);
            let mut halfspaces = Vec::with_capacity(sc.len() * sc.obstacle_count());
            for id in sc.ids() {
                for (j, r_obs) in radii.iter().enumerate() {
                    let delta = sc.position(id, j, k);
                    let r = disc.radius + r_obs;
                    let h = linearize_collision(p_hat, delta, r).unwrap_or_else(|_| {
                        // sample exactly on the linearization point: separate along the heading
                        let n = Vec2::new(x.heading.cos(), x.heading.sin());
                        Halfspace::new(n, n.dot(&delta) - r)
                    });
                    halfspaces.push(h.with_provenance(Provenance {
                        scenario: id,
                        obstacle: j as u32,
                        step: k as u32,
                        disc: d as u32,
                    }));
                }
            }
            stages.push(StageConstraints {
                stage: k,
                disc: d,
                halfspaces,
                bbox: BoundingBox::around(p_hat, c.box_half_width),
            });
        }
    }
    stages
}

/// Sampled obstacle positions with combined radii, per stage `1..=N`.
fn stage_samples(sc: &ScenarioSet, radii: &[f64]) -> Vec<Vec<(Vec2, f64)>> {
    (1..=sc.horizon())
        .map(|k| {
            sc.ids()
                .flat_map(|id| radii.iter().enumerate().map(move |(j, r)| (sc.position(id, j, k), *r)))
                .collect()
        })
        .collect()
}

/// Polytopes used only to place the linearization points. Empty stages are
/// skipped here; the solver decides on removal when it rebuilds them.
fn reduce_all(c: &PlannerConfig, stages: &[StageConstraints]) -> Vec<Polytope> {
    stages
        .iter()
        .filter_map(|s| reduce_polytope(&s.halfspaces, &s.bbox, c.n_h, s.stage, s.disc).ok())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight_config() -> PlannerConfig {
        let path = ReferencePath::straight(Vec2::zeros(), Vec2::new(50.0, 0.0)).unwrap();
        PlannerConfig::mobile_robot(path, MpccWeights::TRAJECTORIES).unwrap()
    }

    #[test]
    fn free_space_tracks_reference() {
        let mut planner = Planner::new(straight_config(), 1).unwrap();
        let out = planner.mpc_step(0.0, &RobotState::new(0.0, 0.0, 0.0), &[]);
        let res = out.result.unwrap();
        assert_eq!(out.record.action, Action::Plan);
        assert_eq!(res.support_size, 0);
        assert!(res.certificate.certified);
        assert!((out.input.v - 2.0).abs() < 1e-3 && out.input.omega.abs() < 1e-6, "{:?}", out.input);
    }

    #[test]
    fn warm_start_is_previous_plan_shifted() {
        let mut cfg = straight_config();
        cfg.control_period = cfg.dt;
        let mut planner = Planner::new(cfg, 1).unwrap();
        let x0 = RobotState::new(0.0, 0.3, 0.1);
        let out = planner.mpc_step(0.0, &x0, &[]);
        let plan = out.result.unwrap().plan;
        let x1 = plan.states[1];
        let warm = planner.warm_start(0.2, &x1);
        assert_eq!(warm, plan.shifted(x1, 1));
    }

    #[test]
    fn static_obstacle_is_avoided() {
        let cfg = straight_config();
        let obstacle = Obstacle { model: ObstacleModel::random_walk([2.5, 0.0], [0.3, 0.3]), radius: 0.3 };
        let mut planner = Planner::new(cfg.clone(), 5).unwrap();
        let out = planner.mpc_step(0.0, &RobotState::new(0.0, 0.0, 0.0), std::slice::from_ref(&obstacle));
        let res = out.result.unwrap();
        assert!(res.certificate.certified, "{:?} {:?}", res.status, res.certificate);
        let clearance = res
            .plan
            .states
            .iter()
            .map(|x| (x.p() - obstacle.model.position()).norm())
            .fold(f64::INFINITY, f64::min);
        assert!(clearance > cfg.discs[0].radius + obstacle.radius, "{clearance}");
        for p in &res.polytopes {
            let x = &res.plan.states[p.stage];
            assert!(p.contains(&cfg.discs[p.disc].center(x), 1e-6));
        }
    }

    #[test]
    fn impossible_support_brakes() {
        // a ring of obstacles on the path with n_bar = 0 cannot be certified
        let mut cfg = straight_config();
        cfg.risk = RiskConfig::with_sample_size(0.05, 0.01, 0, 0, 50).unwrap();
        let obstacles: Vec<Obstacle> = (0..3)
            .map(|i| Obstacle {
                model: ObstacleModel::random_walk([1.5 + i as f64, 0.0], [0.5, 0.5]),
                radius: 0.3,
            })
            .collect();
        let mut planner = Planner::new(cfg, 2).unwrap();
        let x0 = RobotState::new(0.0, 0.0, 0.0);
        planner.last_input = RobotInput::new(1.0, 0.0);
        let out = planner.mpc_step(0.0, &x0, &obstacles);
        assert_eq!(out.record.status, SolveStatus::Fallback);
        assert_eq!(out.record.action, Action::Brake);
        assert!((out.input.v - 0.9).abs() < 1e-12 && out.input.omega == 0.0);
        assert!(!out.record.certified);
    }
}
