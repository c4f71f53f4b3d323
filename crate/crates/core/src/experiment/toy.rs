//! The one-dimensional illustrating example: a unicycle that must stay above
//! an obstacle whose height is uncertain, while keeping close to `y = 0`.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{BoundingBox, Halfspace, Provenance};
use crate::planner::dynamics::{Disc, RobotInput, RobotState, TrajectoryPlan};
use crate::planner::mpcc::stage_cost_sum;
use crate::risk::RiskConfig;
use crate::solver::{
    greedy_support, solve_sp, LeastSquaresCost, SolveResult, SolverSettings, SpProblem, StageConstraints,
};
use crate::uncertainty::{keyed_rng, ScenarioId, ScenarioSet, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Robot plus obstacle radius.
    pub radius: f64,
    pub offset_mean: f64,
    pub offset_variance: f64,
    pub initial_height: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { horizon: 5, dt: 0.2, radius: 1.0, offset_mean: -1.3, offset_variance: 0.07, initial_height: 0.6 }
    }
}

/// `sum_k (p_k^y)^2 + omega^2 + (v - 2)^2`.
pub struct ToyCost;

impl LeastSquaresCost for ToyCost {
    fn residual_count(&self) -> usize {
        3
    }

    fn residuals(&self, _k: usize, x: &RobotState, u: &RobotInput, r: &mut [f64], jx: &mut [[f64; 4]], ju: &mut [[f64; 2]]) {
        r[0] = x.position[1];
        jx[0] = [0.0, 1.0, 0.0, 0.0];
        ju[0] = [0.0; 2];
        r[1] = u.omega;
        jx[1] = [0.0; 4];
        ju[1] = [0.0, 1.0];
        r[2] = u.v - 2.0;
        jx[2] = [0.0; 4];
        ju[2] = [1.0, 0.0];
    }
}

pub fn toy_settings() -> SolverSettings {
    SolverSettings { max_iterations: 100, step_tolerance: 1e-11, ..Default::default() }
}

impl ToyConfig {
    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.offset_mean + self.offset_variance.sqrt() * z
    }

    /// Obstacle heights `delta_k`, stored as positions `(0, delta_k)`.
    pub fn scenarios(&self, sample_count: usize, seed: u64) -> ScenarioSet {
        let mut samples = Vec::with_capacity(sample_count * self.horizon);
        for s in 0..sample_count {
            let mut rng = keyed_rng(seed, s as u64, 0);
            for _ in 0..self.horizon {
                samples.push(Vec2::new(0.0, self.draw(&mut rng)));
            }
        }
        let mut set = ScenarioSet::from_positions(sample_count, 1, self.horizon, samples).expect("consistent layout");
        set.seed = seed;
        set
    }

    pub fn initial_state(&self) -> RobotState {
        RobotState::new(0.0, self.initial_height, 0.0)
    }

    pub fn warm_start(&self) -> TrajectoryPlan {
        TrajectoryPlan::constant(self.initial_state(), RobotInput::new(2.0, 0.0), self.horizon, self.dt)
    }

    pub fn problem<'a>(&self, scenarios: &ScenarioSet, cost: &'a ToyCost) -> SpProblem<'a> {
        let warm = self.warm_start();
        let stages = (1..=self.horizon)
            .map(|k| StageConstraints {
                stage: k,
                disc: 0,
                // p^y >= delta + r  <=>  -p^y <= -(delta + r)
                halfspaces: scenarios
                    .ids()
                    .map(|id| {
                        let delta = scenarios.position(id, 0, k).y;
                        Halfspace::new(Vec2::new(0.0, -1.0), -(delta + self.radius)).with_provenance(Provenance {
                            scenario: id,
                            obstacle: 0,
                            step: k as u32,
                            disc: 0,
                        })
                    })
                    .collect(),
                bbox: BoundingBox::around(warm.states[k].p(), 10.0),
            })
            .collect();
        SpProblem {
            x_init: self.initial_state(),
            horizon: self.horizon,
            dt: self.dt,
            cost,
            input_lower: RobotInput::new(0.0, -2.0),
            input_upper: RobotInput::new(2.0, 2.0),
            discs: vec![Disc { offset: 0.0, radius: 0.0 }],
            stages,
            n_h: 20,
        }
    }

    pub fn solve(&self, scenarios: &mut ScenarioSet, risk: &RiskConfig) -> Result<SolveResult> {
        let problem = self.problem(scenarios, &ToyCost);
        solve_sp(&problem, scenarios, risk, &self.warm_start(), &toy_settings())
    }

    /// Fraction of fresh obstacle draws that violate the plan at some stage.
    pub fn empirical_risk(&self, plan: &TrajectoryPlan, samples: usize, seed: u64) -> f64 {
        let mut rng = keyed_rng(seed, u64::MAX, 1);
        let violated = (0..samples)
            .filter(|_| {
                let mut hit = false;
                for k in 1..=self.horizon {
                    // draw every stage so the stream layout does not depend on the plan
                    if plan.states[k].position[1] < self.draw(&mut rng) + self.radius {
                        hit = true;
                    }
                }
                hit
            })
            .count();
        violated as f64 / samples as f64
    }
}

pub fn toy_cost(plan: &TrajectoryPlan) -> f64 {
    stage_cost_sum(plan, &ToyCost)
}

/// A risk configuration that never blocks certification, for experiments
/// that only look at the support.
pub fn permissive_risk(sample_count: usize, removal_budget: usize) -> RiskConfig {
    RiskConfig::with_sample_size(1.0, 0.5, sample_count, removal_budget, sample_count)
        .expect("positive sample size")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportComparison {
    pub sample_size: usize,
    pub run: usize,
    pub estimated: Vec<ScenarioId>,
    pub greedy: Vec<ScenarioId>,
    pub greedy_within_estimate: bool,
    pub estimate_us: u64,
    pub greedy_us: u64,
}

/// Compares the active-set support estimate against the greedy oracle.
pub fn support_compare(config: &ToyConfig, sample_sizes: &[usize], runs: usize, seed: u64) -> Result<Vec<SupportComparison>> {
    let mut out = Vec::new();
    for &s in sample_sizes {
        for run in 0..runs {
            let scenarios = config.scenarios(s, crate::uncertainty::stream_key(seed, s as u64, run as u64));
            let risk = permissive_risk(s, 0);
            let problem = config.problem(&scenarios, &ToyCost);
            let warm = config.warm_start();

            let t = Instant::now();
            let est = solve_sp(&problem, &mut scenarios.clone(), &risk, &warm, &toy_settings())?;
            let estimate_us = t.elapsed().as_micros() as u64;

            let t = Instant::now();
            let greedy = greedy_support(&problem, &scenarios, &risk, &warm, &toy_settings(), 1e-6)?;
            let greedy_us = t.elapsed().as_micros() as u64;

            out.push(SupportComparison {
                sample_size: s,
                run,
                greedy_within_estimate: greedy.is_subset(&est.support_set),
                estimated: est.support_set.iter().copied().collect(),
                greedy: greedy.into_iter().collect(),
                estimate_us,
                greedy_us,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalRun {
    pub removal_budget: usize,
    pub sample_size: usize,
    pub repeat: usize,
    pub cost: f64,
    pub support_size: usize,
    pub removed: usize,
    pub certified: bool,
    pub epsilon_bound: f64,
    pub empirical_risk: f64,
}

/// Solves the example `repeats` times per removal budget, with the support
/// limit raised to `base_support + R` and the sample size derived from it.
pub fn removal_study(
    config: &ToyConfig,
    epsilon: f64,
    beta: f64,
    base_support: usize,
    budgets: &[usize],
    repeats: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<RemovalRun>> {
    let mut out = Vec::new();
    for &r in budgets {
        let risk = RiskConfig::with_removal_allowance(epsilon, beta, base_support, r)?;
        for repeat in 0..repeats {
            let key = crate::uncertainty::stream_key(seed, r as u64, repeat as u64);
            let mut scenarios = config.scenarios(risk.sample_size, key);
            let res = config.solve(&mut scenarios, &risk)?;
            out.push(RemovalRun {
                removal_budget: r,
                sample_size: risk.sample_size,
                repeat,
                cost: toy_cost(&res.plan),
                support_size: res.support_size,
                removed: res.removed.len(),
                certified: res.certificate.certified,
                epsilon_bound: res.certificate.epsilon_bound,
                empirical_risk: config.empirical_risk(&res.plan, mc_samples, key),
            });
        }
    }
    Ok(out)
}

/// Re-solves with only the support and removed scenarios; returns the max
/// input difference to the original plan.
pub fn support_reproduction_error(config: &ToyConfig, scenarios: &ScenarioSet, result: &SolveResult, risk: &RiskConfig) -> Result<f64> {
    let keep: BTreeSet<ScenarioId> = result.support_set.iter().copied().chain(result.removed.iter().copied()).collect();
    let problem = config.problem(scenarios, &ToyCost);
    let sub = problem.restricted_to(&keep);
    let mut flags = scenarios.clone();
    for &id in &result.removed {
        flags.mark_removed(id);
    }
    let fixed = RiskConfig { removal_budget: 0, ..*risk };
    let res = solve_sp(&sub, &mut flags, &fixed, &config.warm_start(), &toy_settings())?;
    Ok(res.plan.input_vector().iter().zip(result.plan.input_vector()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyMode {
    Solve,
    SupportCompare,
    RemovalStudy,
}

impl std::str::FromStr for ToyMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "solve" => Ok(Self::Solve),
            "support-compare" => Ok(Self::SupportCompare),
            "removal-study" => Ok(Self::RemovalStudy),
            other => Err(crate::error::Error::Config(format!(
                "unknown toy mode {other:?}; expected solve, support-compare or removal-study"
            ))),
        }
    }
}

impl ToyMode {
    /// Sample sizes (solve, support-compare) or removal budgets (removal-study).
    pub fn default_range(self) -> Vec<usize> {
        match self {
            Self::Solve => vec![400],
            Self::SupportCompare => (1..=10).map(|i| 100 * i).collect(),
            Self::RemovalStudy => (0..=10).map(|i| 2 * i).collect(),
        }
    }
}

pub const SUPPORT_COMPARE_RUNS: usize = 25;
pub const REMOVAL_EPSILON: f64 = 0.1;
pub const REMOVAL_BETA: f64 = 1e-6;
/// Support limit at `R = 0`; gives `S = 288`.
pub const REMOVAL_BASE_SUPPORT: usize = 2;
pub const REMOVAL_REPEATS: usize = 100;
pub const REMOVAL_MC_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySolve {
    pub sample_size: usize,
    pub seed: u64,
    pub cost: f64,
    pub support: Vec<ScenarioId>,
    pub plan: TrajectoryPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ToyReport {
    Solve(Vec<ToySolve>),
    SupportCompare(Vec<SupportComparison>),
    RemovalStudy(Vec<RemovalRun>),
}

/// Runs the example in `mode` over `range`, which holds sample sizes or, for
/// the removal study, removal budgets.
pub fn toy_example(mode: ToyMode, range: &[usize], seed: u64) -> Result<ToyReport> {
    let config = ToyConfig::default();
    if range.is_empty() || (mode != ToyMode::RemovalStudy && range.contains(&0)) {
        return Err(crate::error::Error::InvalidArgument("the range must hold positive sample sizes".into()));
    }
    Ok(match mode {
        ToyMode::Solve => ToyReport::Solve(
            range
                .iter()
                .map(|&s| {
                    let mut scenarios = config.scenarios(s, seed);
                    let res = config.solve(&mut scenarios, &permissive_risk(s, 0))?;
                    Ok(ToySolve {
                        sample_size: s,
                        seed,
                        cost: toy_cost(&res.plan),
                        support: res.support_set.iter().copied().collect(),
                        plan: res.plan,
                    })
                })
                .collect::<Result<_>>()?,
        ),
        ToyMode::SupportCompare => ToyReport::SupportCompare(support_compare(&config, range, SUPPORT_COMPARE_RUNS, seed)?),
        ToyMode::RemovalStudy => ToyReport::RemovalStudy(removal_study(
            &config,
            REMOVAL_EPSILON,
            REMOVAL_BETA,
            REMOVAL_BASE_SUPPORT,
            range,
            REMOVAL_REPEATS,
            REMOVAL_MC_SAMPLES,
            seed,
        )?),
    })
}

impl ToyReport {
    /// One row per stage, run or repeat, depending on the mode.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        match self {
            Self::Solve(solves) => {
                w.write_record(["sample_size", "stage", "x", "y", "v", "omega", "support_size", "cost"])?;
                for s in solves {
                    for (k, x) in s.plan.states.iter().enumerate() {
                        let u = s.plan.inputs.get(k);
                        w.write_record(&[
                            s.sample_size.to_string(),
                            k.to_string(),
                            x.position[0].to_string(),
                            x.position[1].to_string(),
                            u.map_or(String::new(), |u| u.v.to_string()),
                            u.map_or(String::new(), |u| u.omega.to_string()),
                            s.support.len().to_string(),
                            s.cost.to_string(),
                        ])?;
                    }
                }
            }
            Self::SupportCompare(rows) => {
                w.write_record([
                    "sample_size",
                    "run",
                    "estimated_size",
                    "greedy_size",
                    "greedy_within_estimate",
                    "estimate_us",
                    "greedy_us",
                ])?;
                for r in rows {
                    w.write_record(&[
                        r.sample_size.to_string(),
                        r.run.to_string(),
                        r.estimated.len().to_string(),
                        r.greedy.len().to_string(),
                        r.greedy_within_estimate.to_string(),
                        r.estimate_us.to_string(),
                        r.greedy_us.to_string(),
                    ])?;
                }
            }
            Self::RemovalStudy(rows) => {
                for r in rows {
                    w.serialize(r)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_variance_single_binding_constraint() {
        let cfg = ToyConfig { offset_variance: 0.0, offset_mean: -0.45, ..Default::default() };
        let scenarios = cfg.scenarios(30, 1);
        let risk = permissive_risk(30, 0);
        let problem = cfg.problem(&scenarios, &ToyCost);
        let res = solve_sp(&problem, &mut scenarios.clone(), &risk, &cfg.warm_start(), &toy_settings()).unwrap();
        // identical constraints collapse to the smallest id
        assert_eq!(res.support_size, 1);
        let greedy = greedy_support(&problem, &scenarios, &risk, &cfg.warm_start(), &toy_settings(), 1e-6).unwrap();
        // every scenario is interchangeable, so dropping one never changes the plan
        assert!(greedy.is_empty());

        let single = cfg.scenarios(1, 1);
        let risk = permissive_risk(1, 0);
        let problem = cfg.problem(&single, &ToyCost);
        let res = solve_sp(&problem, &mut single.clone(), &risk, &cfg.warm_start(), &toy_settings()).unwrap();
        let greedy = greedy_support(&problem, &single, &risk, &cfg.warm_start(), &toy_settings(), 1e-6).unwrap();
        assert_eq!(res.support_set, [1].into());
        assert_eq!(greedy, [1].into());
    }

    #[test]
    fn plan_stays_above_samples() {
        let cfg = ToyConfig::default();
        let mut scenarios = cfg.scenarios(400, 7);
        let risk = permissive_risk(400, 0);
        let res = cfg.solve(&mut scenarios, &risk).unwrap();
        for id in scenarios.ids() {
            for k in 1..=cfg.horizon {
                let y = res.plan.states[k].position[1];
                assert!(y >= scenarios.position(id, 0, k).y + cfg.radius - 1e-6);
            }
        }
        let err = support_reproduction_error(&cfg, &cfg.scenarios(400, 7), &res, &risk).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn report_modes_parse_and_run() {
        assert_eq!("removal-study".parse::<ToyMode>().unwrap(), ToyMode::RemovalStudy);
        assert!("nope".parse::<ToyMode>().is_err());
        let ToyReport::Solve(solves) = toy_example(ToyMode::Solve, &[50], 3).unwrap() else { panic!() };
        assert_eq!(solves[0].plan.states.len(), 6);
        let mut out = Vec::new();
        ToyReport::Solve(solves).write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 7);
        assert!(toy_example(ToyMode::Solve, &[], 3).is_err());
    }
}
