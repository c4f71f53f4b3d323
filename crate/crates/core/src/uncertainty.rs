//! Obstacle motion models and joint scenario sampling.
//!
//! All models advance positions on the planning grid as
//! `p[k+1] = p[k] + (drift + w[k]) * dt` with `w[k] ~ N(0, diag(sigma_w^2))`.

use std::io::Write;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;

/// Drift structure of an obstacle model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionKind {
    /// Zero-mean random walk around the initial position.
    GaussianRandomWalk,
    /// Constant mean velocity plus process noise.
    ConstantVelocityGaussian { velocity: [f64; 2] },
    /// Walks along `horizontal * speed` until a one-time switch to
    /// `diagonal * speed`, taken with probability `crossing_probability`
    /// at every step.
    MarkovChainGmm {
        speed: f64,
        crossing_probability: f64,
        #[serde(default = "default_horizontal")]
        horizontal: [f64; 2],
        #[serde(default = "default_diagonal")]
        diagonal: [f64; 2],
        /// Already switched to the diagonal regime.
        #[serde(default)]
        crossed: bool,
    },
}

fn default_horizontal() -> [f64; 2] {
    [1.0, 0.0]
}

fn default_diagonal() -> [f64; 2] {
    [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleModel {
    pub initial_position: [f64; 2],
    /// Process noise covariance (m^2/s^2); must be diagonal.
    pub process_noise: [[f64; 2]; 2],
    /// Variance of the position at step 0.
    #[serde(default)]
    pub initial_variance: [f64; 2],
    #[serde(flatten)]
    pub kind: MotionKind,
}

/// One Gaussian component of an obstacle's predicted trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMode {
    pub probability: f64,
    /// Mean positions for steps `1..=N`.
    pub mean: Vec<Vec2>,
    /// Per-axis variances for steps `1..=N`.
    pub variance: Vec<[f64; 2]>,
}

impl ObstacleModel {
    pub fn random_walk(position: [f64; 2], sigma_w: [f64; 2]) -> Self {
        Self {
            initial_position: position,
            process_noise: diag(sigma_w),
            initial_variance: [0.0; 2],
            kind: MotionKind::GaussianRandomWalk,
        }
    }

    pub fn constant_velocity(position: [f64; 2], velocity: [f64; 2], sigma_w: [f64; 2]) -> Self {
        Self {
            initial_position: position,
            process_noise: diag(sigma_w),
            initial_variance: [0.0; 2],
            kind: MotionKind::ConstantVelocityGaussian { velocity },
        }
    }

    pub fn crossing(position: [f64; 2], speed: f64, crossing_probability: f64, sigma_w: [f64; 2]) -> Self {
        Self {
            initial_position: position,
            process_noise: diag(sigma_w),
            initial_variance: [0.0; 2],
            kind: MotionKind::MarkovChainGmm {
                speed,
                crossing_probability,
                horizontal: default_horizontal(),
                diagonal: default_diagonal(),
                crossed: false,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.process_noise;
        if s[0][1] != 0.0 || s[1][0] != 0.0 {
            return Err(Error::InvalidArgument("process noise covariance must be diagonal".into()));
        }
        if !(s[0][0] >= 0.0 && s[1][1] >= 0.0) {
            return Err(Error::InvalidArgument("process noise variances must be non-negative".into()));
        }
        if !(self.initial_variance[0] >= 0.0 && self.initial_variance[1] >= 0.0) {
            return Err(Error::InvalidArgument("initial variances must be non-negative".into()));
        }
        if let MotionKind::MarkovChainGmm { crossing_probability, .. } = self.kind {
            if !(0.0..=1.0).contains(&crossing_probability) {
                return Err(Error::InvalidArgument(format!(
                    "crossing probability {crossing_probability} outside [0,1]"
                )));
            }
        }
        Ok(())
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.initial_position[0], self.initial_position[1])
    }

    /// Same model re-anchored at a new current position and regime.
    pub fn rebased(&self, position: Vec2, crossed_now: bool) -> Self {
        let mut out = self.clone();
        out.initial_position = [position.x, position.y];
        out.initial_variance = [0.0; 2];
        if let MotionKind::MarkovChainGmm { ref mut crossed, .. } = out.kind {
            *crossed = crossed_now;
        }
        out
    }

    pub fn is_crossed(&self) -> bool {
        matches!(self.kind, MotionKind::MarkovChainGmm { crossed: true, .. })
    }

    fn noise_std(&self) -> [f64; 2] {
        [self.process_noise[0][0].sqrt(), self.process_noise[1][1].sqrt()]
    }

    fn drift(&self, crossed: bool) -> Vec2 {
        match self.kind {
            MotionKind::GaussianRandomWalk => Vec2::zeros(),
            MotionKind::ConstantVelocityGaussian { velocity } => Vec2::new(velocity[0], velocity[1]),
            MotionKind::MarkovChainGmm { speed, horizontal, diagonal, .. } => {
                let b = if crossed { diagonal } else { horizontal };
                Vec2::new(b[0], b[1]) * speed
            }
        }
    }

    fn switch_probability(&self) -> f64 {
        match self.kind {
            MotionKind::MarkovChainGmm { crossing_probability, .. } => crossing_probability,
            _ => 0.0,
        }
    }

    /// Advances one grid step. `crossed` carries the regime between calls.
    pub fn step<R: Rng + ?Sized>(&self, position: Vec2, crossed: &mut bool, rng: &mut R, dt: f64) -> Vec2 {
        let pc = self.switch_probability();
        if pc > 0.0 {
            // the uniform is always drawn so the stream layout is regime independent
            let u: f64 = rng.gen();
            if !*crossed && u < pc {
                *crossed = true;
            }
        }
        let sd = self.noise_std();
        let wx: f64 = rng.sample(StandardNormal);
        let wy: f64 = rng.sample(StandardNormal);
        let w = Vec2::new(wx * sd[0], wy * sd[1]);
        position + (self.drift(*crossed) + w) * dt
    }

    /// Draws one future of `out.len()` steps into `out`.
    pub fn sample_future<R: Rng + ?Sized>(&self, rng: &mut R, dt: f64, out: &mut [Vec2]) {
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        let mut p = self.position()
            + Vec2::new(z0 * self.initial_variance[0].sqrt(), z1 * self.initial_variance[1].sqrt());
        let mut crossed = self.is_crossed();
        for slot in out.iter_mut() {
            p = self.step(p, &mut crossed, rng, dt);
            *slot = p;
        }
    }

    /// Gaussian components of the predicted positions over `horizon` steps.
    pub fn gaussian_modes(&self, horizon: usize, dt: f64) -> Vec<GaussianMode> {
        let step_var = [self.process_noise[0][0] * dt * dt, self.process_noise[1][1] * dt * dt];
        let variance: Vec<[f64; 2]> =
            (1..=horizon).map(|k| propagate_marginal_gaussian(self.initial_variance, step_var, k)).collect();
        let mean_for = |switch_step: Option<usize>| -> Vec<Vec2> {
            let mut p = self.position();
            let mut out = Vec::with_capacity(horizon);
            for k in 1..=horizon {
                let crossed = self.is_crossed() || switch_step.is_some_and(|j| k >= j);
                p += self.drift(crossed) * dt;
                out.push(p);
            }
            out
        };
        match self.kind {
            MotionKind::MarkovChainGmm { crossing_probability, crossed, .. } if !crossed => {
                markov_chain_modes(crossing_probability, horizon)
                    .into_iter()
                    .filter(|(_, prob)| *prob > 0.0)
                    .map(|(step, probability)| GaussianMode {
                        probability,
                        mean: mean_for(step),
                        variance: variance.clone(),
                    })
                    .collect()
            }
            _ => vec![GaussianMode { probability: 1.0, mean: mean_for(None), variance }],
        }
    }
}

fn diag(sigma: [f64; 2]) -> [[f64; 2]; 2] {
    [[sigma[0] * sigma[0], 0.0], [0.0, sigma[1] * sigma[1]]]
}

/// Per-axis variance after `k` steps of independent increments.
pub fn propagate_marginal_gaussian(sigma0: [f64; 2], sigma_w: [f64; 2], k: usize) -> [f64; 2] {
    let k = k as f64;
    [sigma0[0] + k * sigma_w[0], sigma0[1] + k * sigma_w[1]]
}

/// Modes of the one-switch Markov chain: `(Some(j), p)` switches at step
/// `j`, `(None, p)` never switches within the horizon.
pub fn markov_chain_modes(crossing_probability: f64, horizon: usize) -> Vec<(Option<usize>, f64)> {
    let pc = crossing_probability;
    let mut out: Vec<(Option<usize>, f64)> =
        (1..=horizon).map(|j| (Some(j), (1.0 - pc).powi(j as i32 - 1) * pc)).collect();
    out.push((None, (1.0 - pc).powi(horizon as i32)));
    out
}

/// `S` joint obstacle trajectories over `N` steps, with removal flags.
#[derive(Debug, Clone)]
pub struct ScenarioSet {
    samples: Vec<Vec2>,
    sample_count: usize,
    obstacle_count: usize,
    horizon: usize,
    pub seed: u64,
    removed: Vec<bool>,
}

/// Scenario ids are `1..=S`.
pub type ScenarioId = u32;

impl ScenarioSet {
    /// Builds a set from explicit positions laid out as `[scenario][obstacle][step]`.
    pub fn from_positions(
        sample_count: usize,
        obstacle_count: usize,
        horizon: usize,
        samples: Vec<Vec2>,
    ) -> Result<Self> {
        if samples.len() != sample_count * obstacle_count * horizon {
            return Err(Error::InvalidArgument("sample array has the wrong length".into()));
        }
        Ok(Self { samples, sample_count, obstacle_count, horizon, seed: 0, removed: vec![false; sample_count] })
    }

    pub fn len(&self) -> usize {
        self.sample_count
    }

    pub fn is_empty(&self) -> bool {
        self.sample_count == 0
    }

    pub fn obstacle_count(&self) -> usize {
        self.obstacle_count
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn ids(&self) -> impl Iterator<Item = ScenarioId> {
        1..=self.sample_count as ScenarioId
    }

    /// Position of `obstacle` at step `step` (1-based) in scenario `id`.
    pub fn position(&self, id: ScenarioId, obstacle: usize, step: usize) -> Vec2 {
        debug_assert!(step >= 1 && step <= self.horizon);
        let s = id as usize - 1;
        self.samples[(s * self.obstacle_count + obstacle) * self.horizon + step - 1]
    }

    pub fn is_removed(&self, id: ScenarioId) -> bool {
        self.removed[id as usize - 1]
    }

    /// Flags are sticky: there is no way to clear one.
    pub fn mark_removed(&mut self, id: ScenarioId) {
        self.removed[id as usize - 1] = true;
    }

    pub fn removed_ids(&self) -> Vec<ScenarioId> {
        self.ids().filter(|&i| self.is_removed(i)).collect()
    }

    /// Copy restricted to the given scenario ids; ids are renumbered
    /// `1..=len` in the order given. Removal flags are cleared.
    pub fn subset(&self, ids: &[ScenarioId]) -> ScenarioSet {
        let mut samples = Vec::with_capacity(ids.len() * self.obstacle_count * self.horizon);
        for &id in ids {
            let s = id as usize - 1;
            let block = self.obstacle_count * self.horizon;
            samples.extend_from_slice(&self.samples[s * block..(s + 1) * block]);
        }
        ScenarioSet {
            samples,
            sample_count: ids.len(),
            obstacle_count: self.obstacle_count,
            horizon: self.horizon,
            seed: self.seed,
            removed: vec![false; ids.len()],
        }
    }

    /// Writes `scenario_id,obstacle_id,step,x,y` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["scenario_id", "obstacle_id", "step", "x", "y"])?;
        for id in self.ids() {
            for m in 0..self.obstacle_count {
                for k in 1..=self.horizon {
                    let p = self.position(id, m, k);
                    w.write_record(&[
                        id.to_string(),
                        m.to_string(),
                        k.to_string(),
                        format!("{:.9}", p.x),
                        format!("{:.9}", p.y),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Mixes `(seed, a, b)` into an independent 64-bit stream key.
pub fn stream_key(seed: u64, a: u64, b: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(seed) ^ a) ^ b.rotate_left(32))
}

pub fn keyed_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, a, b))
}

/// Draws `sample_count` i.i.d. joint trajectories for all obstacles.
///
/// Each (scenario, obstacle) pair owns a generator keyed by the seed, so the
/// output does not depend on evaluation order.
pub fn sample_trajectories(
    models: &[ObstacleModel],
    horizon: usize,
    sample_count: usize,
    dt: f64,
    seed: u64,
) -> Result<ScenarioSet> {
    if sample_count == 0 || horizon == 0 || models.is_empty() {
        return Err(Error::InvalidArgument("sample count, horizon and obstacle count must be positive".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    for m in models {
        m.validate()?;
    }
    let m_count = models.len();
    let mut samples = vec![Vec2::zeros(); sample_count * m_count * horizon];
    for (block, chunk) in samples.chunks_mut(horizon).enumerate() {
        let scenario = block / m_count;
        let obstacle = block % m_count;
        let mut rng = keyed_rng(seed, scenario as u64, obstacle as u64);
        models[obstacle].sample_future(&mut rng, dt, chunk);
    }
    let mut set = ScenarioSet::from_positions(sample_count, m_count, horizon, samples)?;
    set.seed = seed;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn zero_noise_repeats_initial_position() {
        let m = ObstacleModel::random_walk([1.5, -2.0], [0.0, 0.0]);
        let set = sample_trajectories(&[m], 6, 50, 0.2, 3).unwrap();
        for id in set.ids() {
            for k in 1..=6 {
                assert_eq!(set.position(id, 0, k), Vec2::new(1.5, -2.0));
            }
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let models = [
            ObstacleModel::constant_velocity([0.0, 0.0], [1.0, 0.0], [0.3, 0.3]),
            ObstacleModel::crossing([3.0, 1.0], -1.0, 0.1, [0.3, 0.3]),
        ];
        let a = sample_trajectories(&models, 20, 100, 0.2, 42).unwrap();
        let b = sample_trajectories(&models, 20, 100, 0.2, 42).unwrap();
        let c = sample_trajectories(&models, 20, 100, 0.2, 43).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn rejects_invalid_models() {
        let mut m = ObstacleModel::random_walk([0.0, 0.0], [0.3, 0.3]);
        m.process_noise[0][1] = 0.01;
        assert!(sample_trajectories(&[m], 5, 5, 0.2, 0).is_err());
        let m = ObstacleModel::crossing([0.0, 0.0], 1.0, 1.5, [0.3, 0.3]);
        assert!(sample_trajectories(&[m], 5, 5, 0.2, 0).is_err());
    }

    #[test]
    fn random_walk_variance_grows_linearly() {
        let (sigma, dt, s) = (0.3, 0.2, 100_000);
        let m = ObstacleModel::random_walk([0.0, 0.0], [sigma, sigma]);
        let set = sample_trajectories(&[m], 10, s, dt, 11).unwrap();
        for k in [1, 5, 10] {
            let xs: Vec<f64> = set.ids().map(|id| set.position(id, 0, k).x).collect();
            let (mean, var) = mean_var(&xs);
            let expected = k as f64 * sigma * sigma * dt * dt;
            // std error of a normal sample variance: var * sqrt(2/(n-1))
            let se = expected * (2.0 / (s as f64 - 1.0)).sqrt();
            assert!((var - expected).abs() < 5.0 * se, "k={k}: {var} vs {expected}");
            assert!(mean.abs() < 5.0 * (expected / s as f64).sqrt());
        }
    }

    #[test]
    fn constant_velocity_mean_drifts() {
        let m = ObstacleModel::constant_velocity([1.0, 2.0], [1.0, -0.5], [0.3, 0.3]);
        let s = 100_000;
        let set = sample_trajectories(&[m], 5, s, 0.2, 5).unwrap();
        let k = 5;
        let xs: Vec<f64> = set.ids().map(|id| set.position(id, 0, k).x).collect();
        let ys: Vec<f64> = set.ids().map(|id| set.position(id, 0, k).y).collect();
        let var = k as f64 * 0.09 * 0.04;
        let se = (var / s as f64).sqrt();
        assert!((mean_var(&xs).0 - 2.0).abs() < 5.0 * se);
        assert!((mean_var(&ys).0 - 1.5).abs() < 5.0 * se);
    }

    #[test]
    fn obstacles_are_independent() {
        let models = [
            ObstacleModel::random_walk([0.0, 0.0], [0.3, 0.3]),
            ObstacleModel::random_walk([5.0, 0.0], [0.3, 0.3]),
        ];
        let s = 100_000;
        let set = sample_trajectories(&models, 3, s, 0.2, 9).unwrap();
        let a: Vec<f64> = set.ids().map(|id| set.position(id, 0, 3).x).collect();
        let b: Vec<f64> = set.ids().map(|id| set.position(id, 1, 3).x).collect();
        let (ma, va) = mean_var(&a);
        let (mb, vb) = mean_var(&b);
        let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (s as f64 - 1.0);
        let corr = cov / (va * vb).sqrt();
        assert!(corr.abs() < 5.0 / (s as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn crossing_step_frequencies() {
        let pc = 0.025;
        let horizon = 20;
        let s = 100_000;
        let m = ObstacleModel {
            initial_position: [0.0, 0.0],
            process_noise: [[0.0, 0.0], [0.0, 0.0]],
            initial_variance: [0.0; 2],
            kind: MotionKind::MarkovChainGmm {
                speed: 1.0,
                crossing_probability: pc,
                horizontal: [1.0, 0.0],
                diagonal: [0.0, 1.0],
                crossed: false,
            },
        };
        let set = sample_trajectories(&[m], horizon, s, 1.0, 21).unwrap();
        // with diagonal = +y and no noise, the first step with y > 0 is the switch step
        let mut counts = vec![0usize; horizon + 2];
        for id in set.ids() {
            let step = (1..=horizon).find(|&k| set.position(id, 0, k).y > 0.5);
            counts[step.unwrap_or(horizon + 1)] += 1;
        }
        let modes = markov_chain_modes(pc, horizon);
        for (idx, (step, p)) in modes.iter().enumerate() {
            let c = counts[step.unwrap_or(horizon + 1)] as f64 / s as f64;
            let se = (p * (1.0 - p) / s as f64).sqrt();
            assert!((c - p).abs() < 5.0 * se, "mode {idx}: {c} vs {p}");
        }
        let p2 = counts[2] as f64 / s as f64;
        let se = (0.024375f64 * (1.0 - 0.024375) / s as f64).sqrt();
        assert!((p2 - 0.024375).abs() < 3.0 * se, "{p2}");
    }

    #[test]
    fn markov_modes() {
        let modes = markov_chain_modes(0.025, 20);
        assert_eq!(modes.len(), 21);
        assert!((modes[1].1 - 0.024375).abs() < 1e-15);
        let total: f64 = modes.iter().map(|m| m.1).sum();
        assert!((total - 1.0).abs() < 1e-14);

        let never = markov_chain_modes(0.0, 20);
        let live: Vec<_> = never.iter().filter(|m| m.1 > 0.0).collect();
        assert_eq!(live.len(), 1);
        assert_eq!(live[0], &(None, 1.0));
    }

    #[test]
    fn marginal_propagation() {
        assert_eq!(propagate_marginal_gaussian([0.2, 0.1], [0.09, 0.09], 0), [0.2, 0.1]);
        assert_eq!(propagate_marginal_gaussian([0.0, 0.0], [0.09, 0.09], 1), [0.09, 0.09]);
        let v = propagate_marginal_gaussian([0.0, 0.0], [0.09, 0.09], 20);
        assert!((v[0] - 1.8).abs() < 1e-12);
    }

    #[test]
    fn gmm_mode_means() {
        let m = ObstacleModel::crossing([0.0, 0.0], 1.0, 0.025, [0.3, 0.3]);
        let modes = m.gaussian_modes(4, 0.5);
        assert_eq!(modes.len(), 5);
        let never = modes.last().unwrap();
        assert!((never.mean[3] - Vec2::new(2.0, 0.0)).norm() < 1e-12);
        // switch at step 3: two horizontal steps then two diagonal ones
        let s = std::f64::consts::FRAC_1_SQRT_2 * 0.5;
        let expect = Vec2::new(1.0 + 2.0 * s, 2.0 * s);
        assert!((modes[2].mean[3] - expect).norm() < 1e-12);
        assert!((never.variance[3][0] - 4.0 * 0.09 * 0.25).abs() < 1e-12);
    }

    #[test]
    fn csv_dump_has_one_row_per_position() {
        let m = ObstacleModel::random_walk([0.0, 0.0], [0.3, 0.3]);
        let set = sample_trajectories(&[m.clone(), m], 3, 4, 0.2, 1).unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 * 2 * 3);
        assert!(text.starts_with("scenario_id,obstacle_id,step,x,y"));
    }
}
