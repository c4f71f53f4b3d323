//! Closed-loop runs, plan validation and the summary table.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::experiment::config::ExperimentConfig;
use crate::experiment::montecarlo::{monte_carlo_cp, CpEstimate};
use crate::planner::dynamics::{unicycle_step, Disc, RobotState, TrajectoryPlan};
use crate::planner::{Action, ConstraintMethod, Obstacle, Planner, StepRecord};
use crate::uncertainty::{keyed_rng, sample_trajectories, stream_key, MotionKind, ObstacleModel, ScenarioSet, Vec2};

/// A certified plan kept for offline validation, with the predictive models
/// it was computed against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredPlan {
    pub rep: usize,
    pub step: u64,
    pub time: f64,
    pub support_size: usize,
    pub epsilon_bound: f64,
    pub plan: TrajectoryPlan,
    pub discs: Vec<Disc>,
    pub obstacles: Vec<Obstacle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanValidation {
    pub rep: usize,
    pub step: u64,
    pub time: f64,
    pub support_size: usize,
    pub epsilon_bound: f64,
    pub estimate: CpEstimate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub completed: bool,
    /// Seconds until the goal was reached, or until the run was cut off.
    pub duration: f64,
    pub traveled: f64,
    /// Smallest gap between robot and obstacle discs; negative on overlap.
    pub min_distance: f64,
    /// Number of times an overlap began.
    pub collisions: usize,
    pub fallback_steps: usize,
    pub runtime_mean_ms: f64,
    pub runtime_max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub rep: usize,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub plans: Vec<StoredPlan>,
    pub validations: Vec<PlanValidation>,
    pub metrics: RunMetrics,
    pub error: Option<String>,
}

/// Aggregates in the layout of the paper's result tables. CP columns are
/// maxima over all validated plans; the others are mean and sample standard
/// deviation over completed runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    #[serde(rename = "Method")]
    pub method: String,
    #[serde(rename = "CP_k")]
    pub max_marginal_cp: f64,
    #[serde(rename = "CP")]
    pub max_joint_cp: f64,
    #[serde(rename = "Spec.")]
    pub spec: f64,
    /// Raw ratio of the marginal or joint maximum to its specification.
    #[serde(rename = "Max CP/Spec.")]
    pub max_cp_over_spec: f64,
    #[serde(rename = "Dur.")]
    pub duration_mean: f64,
    #[serde(rename = "Dur. (std)")]
    pub duration_std: f64,
    #[serde(rename = "Trav.")]
    pub traveled_mean: f64,
    #[serde(rename = "Trav. (std)")]
    pub traveled_std: f64,
    #[serde(rename = "Min Dist.")]
    pub min_distance_mean: f64,
    #[serde(rename = "Min Dist. (std)")]
    pub min_distance_std: f64,
    #[serde(rename = "Collisions")]
    pub collisions: usize,
    #[serde(rename = "Runtime")]
    pub runtime_mean_ms: f64,
    #[serde(rename = "Runtime (Max)")]
    pub runtime_max_ms: f64,
    #[serde(rename = "Runs")]
    pub runs: usize,
    #[serde(rename = "Completed")]
    pub completed: usize,
    #[serde(rename = "Plans")]
    pub validated_plans: usize,
    /// Some run ended in an error or never reached the goal.
    #[serde(rename = "Incomplete")]
    pub incomplete: bool,
}

impl SummaryTable {
    pub const HEADER: [&'static str; 18] = [
        "Method",
        "CP_k",
        "CP",
        "Spec.",
        "Max CP/Spec.",
        "Dur.",
        "Dur. (std)",
        "Trav.",
        "Trav. (std)",
        "Min Dist.",
        "Min Dist. (std)",
        "Collisions",
        "Runtime",
        "Runtime (Max)",
        "Runs",
        "Completed",
        "Plans",
        "Incomplete",
    ];

    /// Values in [`Self::HEADER`] order.
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.method.clone(),
            self.max_marginal_cp.to_string(),
            self.max_joint_cp.to_string(),
            self.spec.to_string(),
            self.max_cp_over_spec.to_string(),
            self.duration_mean.to_string(),
            self.duration_std.to_string(),
            self.traveled_mean.to_string(),
            self.traveled_std.to_string(),
            self.min_distance_mean.to_string(),
            self.min_distance_std.to_string(),
            self.collisions.to_string(),
            self.runtime_mean_ms.to_string(),
            self.runtime_max_ms.to_string(),
            self.runs.to_string(),
            self.completed.to_string(),
            self.validated_plans.to_string(),
            self.incomplete.to_string(),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub runs: Vec<RunRecord>,
    pub summary: SummaryTable,
}

pub fn rep_seed(master: u64, rep: usize) -> u64 {
    stream_key(master, rep as u64, 0x5e5)
}

fn planner_seed(rep_seed: u64) -> u64 {
    stream_key(rep_seed, 0, 0)
}

/// The scenarios the planner draws at the first control step of `rep`.
pub fn initial_scenarios(config: &ExperimentConfig, rep: usize) -> Result<ScenarioSet> {
    let pc = &config.planner;
    let models: Vec<ObstacleModel> = config.obstacles.iter().map(|o| o.model.clone()).collect();
    sample_trajectories(&models, pc.horizon, pc.risk.sample_size, pc.dt, stream_key(planner_seed(rep_seed(config.seed, rep)), 0, 0))
}

/// The model advanced at the control period so that, sampled every
/// `dt / period` substeps, it has the planning-grid distribution.
fn substep_model(model: &ObstacleModel, dt: f64, period: f64) -> ObstacleModel {
    let mut m = model.clone();
    let scale = dt / period;
    m.process_noise[0][0] *= scale;
    m.process_noise[1][1] *= scale;
    if let MotionKind::MarkovChainGmm { ref mut crossing_probability, .. } = m.kind {
        *crossing_probability = 1.0 - (1.0 - *crossing_probability).powf(period / dt);
    }
    m
}

/// One closed-loop run without validation.
pub fn simulate_run(config: &ExperimentConfig, rep: usize) -> Result<RunRecord> {
    let seed = rep_seed(config.seed, rep);
    let pc = &config.planner;
    let mut planner = Planner::new(pc.clone(), planner_seed(seed))?;
    let truth_models: Vec<ObstacleModel> =
        config.obstacles.iter().map(|o| substep_model(&o.model, pc.dt, pc.control_period)).collect();
    let mut truth_rngs: Vec<_> = (0..config.obstacles.len()).map(|j| keyed_rng(seed, 1, j as u64)).collect();
    let mut positions: Vec<Vec2> = config.obstacles.iter().map(|o| o.model.position()).collect();
    let mut crossed: Vec<bool> = config.obstacles.iter().map(|o| o.model.is_crossed()).collect();

    let mut state = config.start_state();
    let mut steps = Vec::new();
    let mut plans = Vec::new();
    let mut metrics = RunMetrics { min_distance: f64::INFINITY, ..Default::default() };
    let mut overlapping = false;
    let mut last_store: Option<u64> = None;
    let goal = pc.path.length() - config.goal_tolerance;
    let max_steps = (config.max_duration / pc.control_period).ceil() as u64;

    for step in 0..max_steps {
        let time = step as f64 * pc.control_period;
        let seen: Vec<Obstacle> = config
            .obstacles
            .iter()
            .enumerate()
            .map(|(j, o)| Obstacle { model: o.model.rebased(positions[j], crossed[j]), radius: o.radius })
            .collect();
        let outcome = planner.mpc_step(time, &state, &seen);
        let record = outcome.record;
        if record.action != Action::Plan {
            metrics.fallback_steps += 1;
        }
        if record.action == Action::Plan && last_store.map_or(true, |s| step - s >= config.store_every as u64) {
            if let Some(res) = &outcome.result {
                plans.push(StoredPlan {
                    rep,
                    step,
                    time,
                    support_size: res.support_size,
                    epsilon_bound: res.certificate.epsilon_bound,
                    plan: res.plan.clone(),
                    discs: pc.discs.clone(),
                    obstacles: seen,
                });
                last_store = Some(step);
            }
        }
        steps.push(record);

        let next = unicycle_step(&state, &outcome.input, pc.control_period);
        metrics.traveled += (next.p() - state.p()).norm();
        state = next;
        for j in 0..positions.len() {
            positions[j] = truth_models[j].step(positions[j], &mut crossed[j], &mut truth_rngs[j], pc.control_period);
        }

        let gap = clearance(&state, &pc.discs, &config.obstacles, &positions);
        metrics.min_distance = metrics.min_distance.min(gap);
        if gap < 0.0 && !overlapping {
            metrics.collisions += 1;
        }
        overlapping = gap < 0.0;

        metrics.duration = time + pc.control_period;
        if pc.path.project(state.p()) >= goal {
            metrics.completed = true;
            break;
        }
    }

    let runtimes: Vec<f64> = steps.iter().map(|s| s.timings.total_us as f64 / 1000.0).collect();
    metrics.runtime_mean_ms = runtimes.iter().sum::<f64>() / runtimes.len().max(1) as f64;
    metrics.runtime_max_ms = runtimes.iter().copied().fold(0.0, f64::max);
    if !metrics.completed {
        warn!("{} rep {rep}: goal not reached within {} s", config.name, config.max_duration);
    }
    Ok(RunRecord { rep, seed, steps, plans, validations: Vec::new(), metrics, error: None })
}

fn clearance(state: &RobotState, discs: &[Disc], obstacles: &[Obstacle], positions: &[Vec2]) -> f64 {
    let mut gap = f64::INFINITY;
    for d in discs {
        let c = d.center(state);
        for (o, p) in obstacles.iter().zip(positions) {
            gap = gap.min((c - p).norm() - d.radius - o.radius);
        }
    }
    gap
}

/// Monte Carlo validation of stored plans, each with its own derived seed.
pub fn validate_plans(plans: &[StoredPlan], samples: usize, seed: u64) -> Result<Vec<PlanValidation>> {
    plans
        .iter()
        .map(|p| {
            let key = stream_key(seed, p.rep as u64, p.step);
            Ok(PlanValidation {
                rep: p.rep,
                step: p.step,
                time: p.time,
                support_size: p.support_size,
                epsilon_bound: p.epsilon_bound,
                estimate: monte_carlo_cp(&p.plan, &p.obstacles, &p.discs, samples, key)?,
            })
        })
        .collect()
}

/// Runs every repetition, validates its stored plans and summarizes.
///
/// Repetitions are spread over one worker per available core; every run owns
/// a seed derived from its index, so the output does not depend on scheduling.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(config.repetitions);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<RunRecord>>> = Mutex::new(vec![None; config.repetitions]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let rep = next.fetch_add(1, Ordering::Relaxed);
                if rep >= config.repetitions {
                    break;
                }
                let run = run_repetition(config, rep);
                slots.lock().expect("no worker panics while holding the lock")[rep] = Some(run);
            });
        }
    });
    let runs: Vec<RunRecord> = slots.into_inner().expect("workers joined").into_iter().flatten().collect();
    let summary = summarize(config, &runs);
    Ok(ExperimentOutput { config: config.clone(), runs, summary })
}

fn run_repetition(config: &ExperimentConfig, rep: usize) -> RunRecord {
    let run = simulate_run(config, rep).and_then(|mut run| {
        run.validations = validate_plans(&run.plans, config.mc_samples, stream_key(run.seed, 2, 0))?;
        Ok(run)
    });
    let run = run.unwrap_or_else(|e| {
        warn!("{} rep {rep} failed: {e}", config.name);
        RunRecord {
            rep,
            seed: rep_seed(config.seed, rep),
            steps: Vec::new(),
            plans: Vec::new(),
            validations: Vec::new(),
            metrics: RunMetrics::default(),
            error: Some(e.to_string()),
        }
    });
    info!(
        "{} rep {rep}: completed {} in {:.2} s, {} plans, max CP {:.4}",
        config.name,
        run.metrics.completed,
        run.metrics.duration,
        run.validations.len(),
        run.validations.iter().map(|v| v.estimate.joint).fold(0.0, f64::max)
    );
    run
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn summarize(config: &ExperimentConfig, runs: &[RunRecord]) -> SummaryTable {
    let validations: Vec<&PlanValidation> = runs.iter().flat_map(|r| &r.validations).collect();
    let max_joint = validations.iter().map(|v| v.estimate.joint).fold(0.0, f64::max);
    let max_marginal = validations.iter().map(|v| v.estimate.max_marginal()).fold(0.0, f64::max);
    let (spec, ratio) = match config.planner.method {
        ConstraintMethod::Scenario => (config.planner.risk.epsilon, max_joint / config.planner.risk.epsilon),
        ConstraintMethod::Gaussian { epsilon_k } => (epsilon_k, max_marginal / epsilon_k),
    };
    let done: Vec<&RunRecord> = runs.iter().filter(|r| r.metrics.completed).collect();
    let ok: Vec<&RunRecord> = runs.iter().filter(|r| r.error.is_none()).collect();
    let (duration_mean, duration_std) = mean_std(&done.iter().map(|r| r.metrics.duration).collect::<Vec<_>>());
    let (traveled_mean, traveled_std) = mean_std(&done.iter().map(|r| r.metrics.traveled).collect::<Vec<_>>());
    let (min_distance_mean, min_distance_std) = mean_std(&ok.iter().map(|r| r.metrics.min_distance).collect::<Vec<_>>());
    let step_ms: Vec<f64> =
        ok.iter().flat_map(|r| r.steps.iter().map(|s| s.timings.total_us as f64 / 1000.0)).collect();
    SummaryTable {
        method: config.name.clone(),
        max_marginal_cp: max_marginal,
        max_joint_cp: max_joint,
        spec,
        max_cp_over_spec: ratio,
        duration_mean,
        duration_std,
        traveled_mean,
        traveled_std,
        min_distance_mean,
        min_distance_std,
        collisions: runs.iter().map(|r| r.metrics.collisions).sum(),
        runtime_mean_ms: mean_std(&step_ms).0,
        runtime_max_ms: step_ms.iter().copied().fold(0.0, f64::max),
        runs: runs.len(),
        completed: done.len(),
        validated_plans: validations.len(),
        incomplete: done.len() < runs.len(),
    }
}

#[derive(Serialize)]
struct StepLine<'a> {
    rep: usize,
    #[serde(flatten)]
    record: &'a StepRecord,
}

#[derive(Serialize, Deserialize)]
struct ValidationRow {
    rep: usize,
    step: u64,
    time: f64,
    support_size: usize,
    epsilon_bound: f64,
    samples: usize,
    joint_cp: f64,
    joint_std_error: f64,
    max_marginal_cp: f64,
}

/// Writes `records.jsonl`, `plans.jsonl`, `validation.csv` and `summary.csv`.
pub fn write_outputs(output: &ExperimentOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut records = BufWriter::new(File::create(dir.join("records.jsonl"))?);
    let mut plans = BufWriter::new(File::create(dir.join("plans.jsonl"))?);
    for run in &output.runs {
        for s in &run.steps {
            serde_json::to_writer(&mut records, &StepLine { rep: run.rep, record: s })?;
            records.write_all(b"\n")?;
        }
        for p in &run.plans {
            serde_json::to_writer(&mut plans, p)?;
            plans.write_all(b"\n")?;
        }
    }
    records.flush()?;
    plans.flush()?;
    let validations: Vec<PlanValidation> = output.runs.iter().flat_map(|r| r.validations.clone()).collect();
    write_validation_csv(&validations, &dir.join("validation.csv"))?;
    write_summary_csv(std::slice::from_ref(&output.summary), &dir.join("summary.csv"))?;
    fs::write(dir.join("config.toml"), output.config.to_toml_string()?)?;
    Ok(())
}

pub fn write_summary_csv(rows: &[SummaryTable], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_validation_csv(validations: &[PlanValidation], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for v in validations {
        w.serialize(ValidationRow {
            rep: v.rep,
            step: v.step,
            time: v.time,
            support_size: v.support_size,
            epsilon_bound: v.epsilon_bound,
            samples: v.estimate.samples,
            joint_cp: v.estimate.joint,
            joint_std_error: v.estimate.joint_std_error,
            max_marginal_cp: v.estimate.max_marginal(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_plans(path: &Path) -> Result<Vec<StoredPlan>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::ObstacleModel;

    fn quiet_scene() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::static_obstacle().unwrap();
        cfg.obstacles = vec![Obstacle { model: ObstacleModel::random_walk([6.0, 3.0], [0.0, 0.0]), radius: 0.3 }];
        cfg.repetitions = 2;
        cfg.mc_samples = 1000;
        cfg
    }

    #[test]
    fn noiseless_scene_is_collision_free() {
        let out = run_experiment(&quiet_scene()).unwrap();
        assert_eq!(out.summary.completed, 2);
        assert_eq!(out.summary.collisions, 0);
        assert_eq!(out.summary.max_joint_cp, 0.0);
        assert!(out.summary.validated_plans > 0);
        assert!(out.runs.iter().all(|r| r.metrics.min_distance > 0.0));
    }

    #[test]
    fn runs_are_reproducible() {
        let mut cfg = ExperimentConfig::static_obstacle().unwrap();
        cfg.max_duration = 2.0;
        let a = simulate_run(&cfg, 3).unwrap();
        let b = simulate_run(&cfg, 3).unwrap();
        let strip = |r: &RunRecord| r.steps.iter().map(|s| (s.state, s.input, s.support_size)).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.plans, b.plans);
    }

    #[test]
    fn substeps_preserve_grid_variance() {
        let m = ObstacleModel::constant_velocity([0.0, 0.0], [1.0, 0.0], [0.3, 0.5]);
        let sub = substep_model(&m, 0.2, 0.05);
        let var = |model: &ObstacleModel, dt: f64, steps: usize| {
            let mut rng = keyed_rng(4, 0, 0);
            let n = 20_000;
            let xs: Vec<Vec2> = (0..n)
                .map(|_| {
                    let mut p = Vec2::zeros();
                    let mut c = false;
                    for _ in 0..steps {
                        p = model.step(p, &mut c, &mut rng, dt);
                    }
                    p
                })
                .collect();
            let my = xs.iter().map(|p| p.y).sum::<f64>() / n as f64;
            xs.iter().map(|p| (p.y - my).powi(2)).sum::<f64>() / n as f64
        };
        let grid = 0.5f64.powi(2) * 0.04;
        assert!((var(&sub, 0.05, 4) / grid - 1.0).abs() < 0.05);
        assert!((var(&m, 0.2, 1) / grid - 1.0).abs() < 0.05);
    }
}
