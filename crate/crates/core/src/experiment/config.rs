//! Experiment descriptions, loadable from TOML, and the built-in scenes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::dynamics::RobotState;
use crate::planner::mpcc::{MpccWeights, ReferencePath};
use crate::planner::{ConstraintMethod, Obstacle, PlannerConfig};
use crate::uncertainty::{MotionKind, ObstacleModel, Vec2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub repetitions: usize,
    pub seed: u64,
    /// Monte Carlo futures per validated plan.
    pub mc_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Simulated seconds before a run is declared incomplete.
    pub max_duration: f64,
    /// A run completes within this arc length of the path end.
    pub goal_tolerance: f64,
    /// Control steps between plans kept for validation.
    pub store_every: usize,
    pub planner: PlannerConfig,
    pub obstacles: Vec<Obstacle>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.mc_samples < 1000 {
            return Err(Error::Config(format!("mc_samples must be at least 1000, got {}", self.mc_samples)));
        }
        if !(self.max_duration > 0.0 && self.goal_tolerance >= 0.0) || self.store_every == 0 {
            return Err(Error::Config("max_duration, goal_tolerance and store_every must be positive".into()));
        }
        for o in &self.obstacles {
            o.model.validate()?;
            if !(o.radius >= 0.0) {
                return Err(Error::Config("obstacle radii must be non-negative".into()));
            }
        }
        self.planner.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.planner.risk = cfg.planner.risk.resolved()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Robot pose at the start of every run: the path start, facing along it.
    pub fn start_state(&self) -> RobotState {
        let (p, t) = self.planner.path.sample(0.0);
        RobotState::new(p.x, p.y, t.y.atan2(t.x))
    }

    pub fn with_method(mut self, method: ConstraintMethod) -> Self {
        self.planner.method = method;
        self.name = match method {
            ConstraintMethod::Scenario => self.name,
            ConstraintMethod::Gaussian { epsilon_k } => format!("{}-gaussian-{epsilon_k}", self.name),
        };
        self
    }

    /// Looks up a built-in scene by name.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "static" => Self::static_obstacle(),
            "gaussian-4" => Self::gaussian(4),
            "gaussian-8" => Self::gaussian(8),
            "gmm-8" => Self::gmm(8),
            other => Err(Error::Config(format!("unknown preset {other:?}; known: {}", PRESETS.join(", ")))),
        }
    }

    /// One obstacle at (6, 0) performing a zero-mean random walk.
    pub fn static_obstacle() -> Result<Self> {
        let path = ReferencePath::straight(Vec2::zeros(), Vec2::new(14.0, 0.0))?;
        Ok(Self {
            name: "static".into(),
            obstacles: vec![Obstacle { model: ObstacleModel::random_walk([6.0, 0.0], [0.3, 0.3]), radius: 0.3 }],
            ..Self::base(PlannerConfig::mobile_robot(path, MpccWeights::TRAJECTORIES)?)
        })
    }

    /// Pedestrians with constant mean velocity and `sigma_w = 0.3`, crossing
    /// and walking against a straight 20 m corridor. `count` is 4 or 8.
    pub fn gaussian(count: usize) -> Result<Self> {
        const PEDESTRIANS: [([f64; 2], [f64; 2]); 8] = [
            ([6.0, -2.5], [0.0, 0.7]),
            ([9.0, 2.5], [0.0, -0.7]),
            ([16.0, 0.4], [-1.0, 0.0]),
            ([13.0, -1.0], [-0.5, 0.2]),
            ([4.0, 2.0], [0.3, -0.6]),
            ([11.0, -2.0], [0.2, 0.6]),
            ([18.0, -0.8], [-0.8, 0.1]),
            ([14.0, 2.2], [-0.4, -0.5]),
        ];
        if count == 0 || count > PEDESTRIANS.len() {
            return Err(Error::Config(format!("the Gaussian scene has 1 to 8 pedestrians, not {count}")));
        }
        let path = ReferencePath::straight(Vec2::zeros(), Vec2::new(20.0, 0.0))?;
        Ok(Self {
            name: format!("gaussian-{count}"),
            obstacles: PEDESTRIANS[..count]
                .iter()
                .map(|(p, v)| Obstacle { model: ObstacleModel::constant_velocity(*p, *v, [0.3, 0.3]), radius: 0.3 })
                .collect(),
            ..Self::base(PlannerConfig::mobile_robot(path, MpccWeights::GAUSSIAN)?)
        })
    }

    /// Pedestrians walking alongside the corridor that may switch, once, to a
    /// diagonal course across it with probability 0.025 per step.
    pub fn gmm(count: usize) -> Result<Self> {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        // (position, horizontal direction, diagonal direction, speed)
        let pedestrians: [([f64; 2], [f64; 2], [f64; 2], f64); 8] = [
            ([8.0, 2.0], [-1.0, 0.0], [-s, -s], 0.8),
            ([14.0, 1.6], [-1.0, 0.0], [-s, -s], 0.8),
            ([20.0, 2.4], [-1.0, 0.0], [-s, -s], 1.0),
            ([11.0, -1.8], [-1.0, 0.0], [-s, s], 0.8),
            ([5.0, -2.2], [1.0, 0.0], [s, s], 0.6),
            ([17.0, -2.0], [-1.0, 0.0], [-s, s], 0.6),
            ([3.0, 2.6], [1.0, 0.0], [s, -s], 0.5),
            ([23.0, -1.5], [-1.0, 0.0], [-s, s], 0.9),
        ];
        if count == 0 || count > pedestrians.len() {
            return Err(Error::Config(format!("the GMM scene has 1 to 8 pedestrians, not {count}")));
        }
        let path = ReferencePath::straight(Vec2::zeros(), Vec2::new(20.0, 0.0))?;
        Ok(Self {
            name: format!("gmm-{count}"),
            obstacles: pedestrians[..count]
                .iter()
                .map(|&(p, horizontal, diagonal, speed)| {
                    let mut model = ObstacleModel::crossing(p, speed, 0.025, [0.3, 0.3]);
                    model.kind = MotionKind::MarkovChainGmm {
                        speed,
                        crossing_probability: 0.025,
                        horizontal,
                        diagonal,
                        crossed: false,
                    };
                    Obstacle { model, radius: 0.3 }
                })
                .collect(),
            ..Self::base(PlannerConfig::mobile_robot(path, MpccWeights::GMM)?)
        })
    }

    fn base(planner: PlannerConfig) -> Self {
        Self {
            name: String::new(),
            repetitions: 20,
            seed: 1,
            mc_samples: 100_000,
            output_dir: None,
            max_duration: 30.0,
            goal_tolerance: 0.5,
            store_every: 10,
            planner,
            obstacles: Vec::new(),
        }
    }
}

pub const PRESETS: [&str; 4] = ["static", "gaussian-4", "gaussian-8", "gmm-8"];
