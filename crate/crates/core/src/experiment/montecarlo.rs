//! Collision probability of a fixed plan under fresh obstacle futures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::dynamics::{Disc, TrajectoryPlan};
use crate::planner::Obstacle;
use crate::uncertainty::{keyed_rng, Vec2};

/// An obstacle is skipped when every Gaussian mode keeps this many standard
/// deviations of clearance at every stage; the mass ignored per mode and
/// stage is below 1e-15.
pub const PRUNE_SIGMAS: f64 = 8.0;

const CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpEstimate {
    pub samples: usize,
    /// Fraction of futures that overlap the plan at any stage.
    pub joint: f64,
    pub joint_std_error: f64,
    /// Per stage `1..=N`, ignoring what happened at other stages.
    pub marginal: Vec<f64>,
    pub marginal_std_error: Vec<f64>,
    /// Indices of obstacles left out by the clearance test.
    pub pruned: Vec<usize>,
}

impl CpEstimate {
    pub fn max_marginal(&self) -> f64 {
        self.marginal.iter().copied().fold(0.0, f64::max)
    }
}

/// Binomial standard error of a frequency `p` over `n` draws.
pub fn std_error(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

fn prunable(plan: &TrajectoryPlan, obstacle: &Obstacle, discs: &[Disc]) -> bool {
    let n = plan.horizon();
    obstacle.model.gaussian_modes(n, plan.dt).iter().all(|mode| {
        (1..=n).all(|k| {
            let var = mode.variance[k - 1];
            let sd = var[0].max(var[1]).sqrt();
            discs.iter().all(|d| {
                let gap = (d.center(&plan.states[k]) - mode.mean[k - 1]).norm() - d.radius - obstacle.radius;
                gap > PRUNE_SIGMAS * sd
            })
        })
    })
}

/// Estimates joint and marginal collision probabilities of `plan` from
/// `samples` futures drawn from the obstacles' models on the plan's grid.
pub fn monte_carlo_cp(
    plan: &TrajectoryPlan,
    obstacles: &[Obstacle],
    discs: &[Disc],
    samples: usize,
    seed: u64,
) -> Result<CpEstimate> {
    if samples == 0 {
        return Err(Error::InvalidArgument("at least one Monte Carlo sample is required".into()));
    }
    let n = plan.horizon();
    let pruned: Vec<usize> = (0..obstacles.len()).filter(|&j| prunable(plan, &obstacles[j], discs)).collect();
    let live: Vec<usize> = (0..obstacles.len()).filter(|j| !pruned.contains(j)).collect();

    let centers: Vec<Vec<Vec2>> = (1..=n).map(|k| discs.iter().map(|d| d.center(&plan.states[k])).collect()).collect();
    let mut joint = 0usize;
    let mut marginal = vec![0usize; n];
    let mut hit = vec![false; n];
    let mut future = vec![Vec2::zeros(); n];

    for chunk in 0..samples.div_ceil(CHUNK) {
        let count = CHUNK.min(samples - chunk * CHUNK);
        let mut rngs: Vec<_> = live.iter().map(|&j| keyed_rng(seed, chunk as u64, j as u64)).collect();
        for _ in 0..count {
            hit.iter_mut().for_each(|h| *h = false);
            for (slot, &j) in live.iter().enumerate() {
                let o = &obstacles[j];
                o.model.sample_future(&mut rngs[slot], plan.dt, &mut future);
                for k in 0..n {
                    if hit[k] {
                        continue;
                    }
                    hit[k] = discs.iter().zip(&centers[k]).any(|(d, c)| {
                        let r = d.radius + o.radius;
                        (c - future[k]).norm_squared() < r * r
                    });
                }
            }
            if hit.iter().any(|&h| h) {
                joint += 1;
            }
            for k in 0..n {
                marginal[k] += hit[k] as usize;
            }
        }
    }

    let joint = joint as f64 / samples as f64;
    let marginal: Vec<f64> = marginal.iter().map(|&m| m as f64 / samples as f64).collect();
    Ok(CpEstimate {
        samples,
        joint,
        joint_std_error: std_error(joint, samples),
        marginal_std_error: marginal.iter().map(|&p| std_error(p, samples)).collect(),
        marginal,
        pruned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::dynamics::{RobotInput, RobotState};
    use crate::uncertainty::ObstacleModel;

    fn disc() -> Vec<Disc> {
        vec![Disc { offset: 0.0, radius: 0.325 }]
    }

    #[test]
    fn distant_obstacles_never_collide() {
        let plan = TrajectoryPlan::constant(RobotState::new(0.0, 0.0, 0.0), RobotInput::new(1.0, 0.0), 20, 0.2);
        let far = Obstacle { model: ObstacleModel::random_walk([0.0, 30.0], [0.3, 0.3]), radius: 0.3 };
        let est = monte_carlo_cp(&plan, &[far], &disc(), 1000, 1).unwrap();
        assert_eq!(est.joint, 0.0);
        assert_eq!(est.pruned, vec![0]);
    }

    #[test]
    fn single_step_matches_quadrature() {
        // one step of a random walk: position ~ N(p0, (sigma dt)^2 I)
        let plan = TrajectoryPlan::constant(RobotState::new(0.0, 0.0, 0.0), RobotInput::new(0.0, 0.0), 1, 0.2);
        let (sigma_w, dt) = (3.0, 0.2);
        let p0 = [0.5, 0.3];
        let obstacle = Obstacle { model: ObstacleModel::random_walk(p0, [sigma_w, sigma_w]), radius: 0.3 };
        let r = 0.625;
        let s = sigma_w * dt;
        // polar midpoint rule over the collision disc around the robot
        let (nr, nt) = (400, 400);
        let mut mass = 0.0;
        for i in 0..nr {
            let rho = (i as f64 + 0.5) * r / nr as f64;
            for j in 0..nt {
                let th = (j as f64 + 0.5) * std::f64::consts::TAU / nt as f64;
                let (x, y) = (rho * th.cos() - p0[0], rho * th.sin() - p0[1]);
                let pdf = (-(x * x + y * y) / (2.0 * s * s)).exp() / (std::f64::consts::TAU * s * s);
                mass += pdf * rho * (r / nr as f64) * (std::f64::consts::TAU / nt as f64);
            }
        }
        let est = monte_carlo_cp(&plan, &[obstacle], &disc(), 100_000, 9).unwrap();
        assert!((est.joint - mass).abs() <= 3.0 * est.joint_std_error, "{} vs {mass}", est.joint);
        assert_eq!(est.joint, est.marginal[0]);
    }

    #[test]
    fn joint_dominates_marginals() {
        let plan = TrajectoryPlan::constant(RobotState::new(0.0, 0.0, 0.0), RobotInput::new(1.0, 0.0), 20, 0.2);
        let obstacles = vec![
            Obstacle { model: ObstacleModel::constant_velocity([4.0, 1.0], [-1.0, -0.3], [0.3, 0.3]), radius: 0.3 },
            Obstacle { model: ObstacleModel::crossing([1.0, 1.5], 0.5, 0.2, [0.3, 0.3]), radius: 0.3 },
        ];
        let est = monte_carlo_cp(&plan, &obstacles, &disc(), 5000, 3).unwrap();
        assert!(est.joint > 0.0);
        assert!(est.joint >= est.max_marginal());
        let again = monte_carlo_cp(&plan, &obstacles, &disc(), 5000, 3).unwrap();
        assert_eq!(est, again);
    }
}
