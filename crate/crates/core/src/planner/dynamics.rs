//! Euler-discretized unicycle with path progress as a fourth state.

use std::f64::consts::PI;

use nalgebra::{Matrix4, Matrix4x2, RowVector4};
use serde::{Deserialize, Serialize};

use crate::uncertainty::Vec2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub position: [f64; 2],
    /// Radians, wrapped to (-pi, pi].
    pub heading: f64,
    /// Arc length along the reference path.
    pub progress: f64,
}

impl RobotState {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { position: [x, y], heading: wrap_angle(heading), progress: 0.0 }
    }

    pub fn p(&self) -> Vec2 {
        Vec2::new(self.position[0], self.position[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotInput {
    pub v: f64,
    pub omega: f64,
}

impl RobotInput {
    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

pub fn unicycle_step(x: &RobotState, u: &RobotInput, dt: f64) -> RobotState {
    let (s, c) = x.heading.sin_cos();
    RobotState {
        position: [x.position[0] + u.v * c * dt, x.position[1] + u.v * s * dt],
        heading: wrap_angle(x.heading + u.omega * dt),
        progress: x.progress + u.v * dt,
    }
}

/// `(df/dx, df/du)` of [`unicycle_step`] in state order `(px, py, heading, s)`.
pub fn unicycle_jacobians(x: &RobotState, u: &RobotInput, dt: f64) -> (Matrix4<f64>, Matrix4x2<f64>) {
    let (s, c) = x.heading.sin_cos();
    let a = Matrix4::new(
        1.0, 0.0, -u.v * s * dt, 0.0, //
        0.0, 1.0, u.v * c * dt, 0.0, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    );
    let b = Matrix4x2::new(
        c * dt, 0.0, //
        s * dt, 0.0, //
        0.0, dt, //
        dt, 0.0,
    );
    (a, b)
}

/// A collision disc rigidly attached to the robot, `offset` metres ahead of
/// the reference point along the heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub offset: f64,
    pub radius: f64,
}

impl Disc {
    pub fn center(&self, x: &RobotState) -> Vec2 {
        let (s, c) = x.heading.sin_cos();
        x.p() + Vec2::new(c, s) * self.offset
    }

    /// Rows of `d center / d state`.
    pub fn jacobian(&self, x: &RobotState) -> [RowVector4<f64>; 2] {
        let (s, c) = x.heading.sin_cos();
        [
            RowVector4::new(1.0, 0.0, -self.offset * s, 0.0),
            RowVector4::new(0.0, 1.0, self.offset * c, 0.0),
        ]
    }
}

/// States `x_0..x_N` and inputs `u_0..u_{N-1}` on a grid of step `dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPlan {
    pub dt: f64,
    pub states: Vec<RobotState>,
    pub inputs: Vec<RobotInput>,
}

impl TrajectoryPlan {
    pub fn rollout(x0: RobotState, inputs: Vec<RobotInput>, dt: f64) -> Self {
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(x0);
        for u in &inputs {
            let next = unicycle_step(states.last().unwrap(), u, dt);
            states.push(next);
        }
        Self { dt, states, inputs }
    }

    pub fn constant(x0: RobotState, u: RobotInput, horizon: usize, dt: f64) -> Self {
        Self::rollout(x0, vec![u; horizon], dt)
    }

    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    /// Inputs advanced by `stages` with the last one repeated, rolled out from `x0`.
    pub fn shifted(&self, x0: RobotState, stages: usize) -> Self {
        let n = self.inputs.len();
        let last = *self.inputs.last().expect("plan has at least one input");
        let inputs = (0..n).map(|k| self.inputs.get(k + stages).copied().unwrap_or(last)).collect();
        Self::rollout(x0, inputs, self.dt)
    }

    /// Input in effect `elapsed` seconds after the plan start (zero-order hold).
    pub fn input_at(&self, elapsed: f64) -> Option<RobotInput> {
        let k = (elapsed / self.dt + 1e-9).floor();
        if k < 0.0 {
            return None;
        }
        self.inputs.get(k as usize).copied()
    }

    /// State at `elapsed` seconds, interpolated linearly between grid points.
    pub fn state_at(&self, elapsed: f64) -> RobotState {
        let t = (elapsed / self.dt).max(0.0);
        let k = (t.floor() as usize).min(self.states.len() - 1);
        if k + 1 >= self.states.len() {
            return self.states[k];
        }
        let a = t - k as f64;
        let (s0, s1) = (&self.states[k], &self.states[k + 1]);
        RobotState {
            position: [
                s0.position[0] + a * (s1.position[0] - s0.position[0]),
                s0.position[1] + a * (s1.position[1] - s0.position[1]),
            ],
            heading: wrap_angle(s0.heading + a * wrap_angle(s1.heading - s0.heading)),
            progress: s0.progress + a * (s1.progress - s0.progress),
        }
    }

    pub fn input_vector(&self) -> Vec<f64> {
        self.inputs.iter().flat_map(|u| [u.v, u.omega]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_speed_keeps_position() {
        let x = RobotState::new(1.0, -2.0, 0.7);
        let y = unicycle_step(&x, &RobotInput::new(0.0, 1.5), 0.2);
        assert_eq!(y.position, x.position);
        assert!((y.heading - 1.0).abs() < 1e-12);
    }

    #[test]
    fn straight_step() {
        let y = unicycle_step(&RobotState::new(0.0, 0.0, 0.0), &RobotInput::new(2.0, 0.0), 0.2);
        assert!((y.position[0] - 0.4).abs() < 1e-15 && y.position[1] == 0.0);
        assert!((y.progress - 0.4).abs() < 1e-15);
    }

    #[test]
    fn turning_recursion() {
        let mut x = RobotState::new(0.0, 0.0, 0.0);
        let mut heading = 0.0;
        for _ in 0..8 {
            let y = unicycle_step(&x, &RobotInput::new(1.0, 2.0), 0.2);
            assert!(((y.p() - x.p()).norm() - 0.2).abs() < 1e-12);
            heading += 0.4;
            x = y;
        }
        assert!((heading - 3.2f64).abs() < 1e-12);
        assert!((x.heading - wrap_angle(3.2)).abs() < 1e-12);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for _ in 0..100 {
            let x = RobotState {
                position: [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)],
                heading: rng.gen_range(-3.0..3.0),
                progress: rng.gen_range(0.0..10.0),
            };
            let u = RobotInput::new(rng.gen_range(0.0..3.0), rng.gen_range(-2.0..2.0));
            let (a, b) = unicycle_jacobians(&x, &u, 0.2);
            let vec_of = |s: RobotState| [s.position[0], s.position[1], s.heading, s.progress];
            for i in 0..4 {
                let mut xp = vec_of(x);
                let mut xm = vec_of(x);
                xp[i] += h;
                xm[i] -= h;
                let mk = |v: [f64; 4]| RobotState { position: [v[0], v[1]], heading: v[2], progress: v[3] };
                let fp = vec_of(unicycle_step(&mk(xp), &u, 0.2));
                let fm = vec_of(unicycle_step(&mk(xm), &u, 0.2));
                for r in 0..4 {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    assert!((fd - a[(r, i)]).abs() <= 1e-6 * (1.0 + fd.abs()), "A[{r},{i}]");
                }
            }
            for i in 0..2 {
                let (mut up, mut um) = (u, u);
                if i == 0 {
                    up.v += h;
                    um.v -= h;
                } else {
                    up.omega += h;
                    um.omega -= h;
                }
                let fp = vec_of(unicycle_step(&x, &up, 0.2));
                let fm = vec_of(unicycle_step(&x, &um, 0.2));
                for r in 0..4 {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    assert!((fd - b[(r, i)]).abs() <= 1e-6 * (1.0 + fd.abs()), "B[{r},{i}]");
                }
            }
        }
    }

    #[test]
    fn shift_duplicates_last_input() {
        let x0 = RobotState::new(0.0, 0.0, 0.0);
        let inputs = (0..4).map(|k| RobotInput::new(k as f64, 0.0)).collect();
        let plan = TrajectoryPlan::rollout(x0, inputs, 0.2);
        let s = plan.shifted(x0, 1);
        let vs: Vec<f64> = s.inputs.iter().map(|u| u.v).collect();
        assert_eq!(vs, vec![1.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn disc_center_and_jacobian() {
        let d = Disc { offset: 1.5, radius: 0.5 };
        let x = RobotState::new(1.0, 1.0, std::f64::consts::FRAC_PI_2);
        let c = d.center(&x);
        assert!((c - Vec2::new(1.0, 2.5)).norm() < 1e-12);
        let j = d.jacobian(&x);
        assert!((j[0][2] + 1.5).abs() < 1e-12);
    }
}
