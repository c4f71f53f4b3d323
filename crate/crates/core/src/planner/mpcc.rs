//! Contouring-control objective on a piecewise-linear reference path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::dynamics::{unicycle_jacobians, RobotInput, RobotState, TrajectoryPlan};
use crate::solver::LeastSquaresCost;
use crate::uncertainty::Vec2;

/// Polyline with an arc-length table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct ReferencePath {
    points: Vec<Vec2>,
    arc: Vec<f64>,
}

impl TryFrom<Vec<[f64; 2]>> for ReferencePath {
    type Error = Error;

    fn try_from(points: Vec<[f64; 2]>) -> Result<Self> {
        Self::new(points.into_iter().map(|p| Vec2::new(p[0], p[1])).collect())
    }
}

impl From<ReferencePath> for Vec<[f64; 2]> {
    fn from(path: ReferencePath) -> Self {
        path.points.iter().map(|p| [p.x, p.y]).collect()
    }
}

impl ReferencePath {
    pub fn new(points: Vec<Vec2>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidArgument("reference path needs at least two points".into()));
        }
        let mut arc = vec![0.0];
        for w in points.windows(2) {
            let len = (w[1] - w[0]).norm();
            if len <= 1e-9 {
                return Err(Error::InvalidArgument("reference path has a zero-length segment".into()));
            }
            arc.push(arc.last().unwrap() + len);
        }
        Ok(Self { points, arc })
    }

    pub fn straight(from: Vec2, to: Vec2) -> Result<Self> {
        Self::new(vec![from, to])
    }

    pub fn length(&self) -> f64 {
        *self.arc.last().unwrap()
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    fn segment(&self, s: f64) -> usize {
        let i = self.arc.partition_point(|&a| a <= s);
        i.clamp(1, self.points.len() - 1) - 1
    }

    /// Point and unit tangent at arc length `s`; the end segments extend
    /// beyond the path limits.
    pub fn sample(&self, s: f64) -> (Vec2, Vec2) {
        let i = self.segment(s);
        let t = (self.points[i + 1] - self.points[i]) / (self.arc[i + 1] - self.arc[i]);
        (self.points[i] + t * (s - self.arc[i]), t)
    }

    /// Arc length of the point on the path closest to `p`.
    pub fn project(&self, p: Vec2) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..self.points.len() - 1 {
            let (a, b) = (self.points[i], self.points[i + 1]);
            let len = self.arc[i + 1] - self.arc[i];
            let t = ((p - a).dot(&(b - a)) / (len * len)).clamp(0.0, 1.0);
            let d = (a + (b - a) * t - p).norm_squared();
            if d < best.0 {
                best = (d, self.arc[i] + t * len);
            }
        }
        best.1
    }

    /// `(lag, contour)` errors of position `p` against the path point at `s`.
    pub fn errors(&self, p: Vec2, s: f64) -> (f64, f64) {
        let (q, t) = self.sample(s);
        let n = Vec2::new(-t.y, t.x);
        let e = p - q;
        (t.dot(&e), n.dot(&e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpccWeights {
    pub velocity: f64,
    pub angular_velocity: f64,
    pub contour: f64,
    pub lag: f64,
}

impl MpccWeights {
    pub const TRAJECTORIES: Self = Self { velocity: 0.05, angular_velocity: 0.05, contour: 0.02, lag: 0.1 };
    pub const GAUSSIAN: Self = Self { velocity: 0.05, angular_velocity: 0.05, contour: 0.001, lag: 0.1 };
    pub const GMM: Self = Self { velocity: 0.15, angular_velocity: 0.05, contour: 0.005, lag: 0.1 };
}

#[derive(Debug, Clone)]
pub struct MpccCost {
    pub path: ReferencePath,
    pub weights: MpccWeights,
    pub reference_speed: f64,
}

impl LeastSquaresCost for MpccCost {
    fn residual_count(&self) -> usize {
        4
    }

    fn residuals(&self, _stage: usize, x: &RobotState, u: &RobotInput, r: &mut [f64], jx: &mut [[f64; 4]], ju: &mut [[f64; 2]]) {
        let w = &self.weights;
        let (sv, sw, sc, sl) = (w.velocity.sqrt(), w.angular_velocity.sqrt(), w.contour.sqrt(), w.lag.sqrt());
        let (lag, contour) = self.path.errors(x.p(), x.progress);
        let (_, t) = self.path.sample(x.progress);
        let n = Vec2::new(-t.y, t.x);

        r[0] = sv * (u.v - self.reference_speed);
        jx[0] = [0.0; 4];
        ju[0] = [sv, 0.0];

        r[1] = sw * u.omega;
        jx[1] = [0.0; 4];
        ju[1] = [0.0, sw];

        // d/ds of the path point is the tangent: lag falls by one, contour is unchanged
        r[2] = sc * contour;
        jx[2] = [sc * n.x, sc * n.y, 0.0, 0.0];
        ju[2] = [0.0; 2];

        r[3] = sl * lag;
        jx[3] = [sl * t.x, sl * t.y, 0.0, -sl];
        ju[3] = [0.0; 2];
    }
}

/// Cost of `plan`, summing stage `k = 1..=N` residuals with input `u_{k-1}`.
pub fn mpcc_cost(plan: &TrajectoryPlan, cost: &MpccCost) -> f64 {
    stage_cost_sum(plan, cost)
}

pub fn stage_cost_sum(plan: &TrajectoryPlan, cost: &dyn LeastSquaresCost) -> f64 {
    let m = cost.residual_count();
    let mut r = vec![0.0; m];
    let mut jx = vec![[0.0; 4]; m];
    let mut ju = vec![[0.0; 2]; m];
    let mut total = 0.0;
    for k in 1..=plan.horizon() {
        cost.residuals(k, &plan.states[k], &plan.inputs[k - 1], &mut r, &mut jx, &mut ju);
        total += r.iter().map(|v| v * v).sum::<f64>();
    }
    total
}

/// Gradient of the rolled-out cost with respect to `(v_0, w_0, v_1, ...)`, by
/// the adjoint recursion.
pub fn cost_gradient(plan: &TrajectoryPlan, cost: &dyn LeastSquaresCost) -> Vec<f64> {
    let n = plan.horizon();
    let m = cost.residual_count();
    let mut r = vec![0.0; m];
    let mut jx = vec![[0.0; 4]; m];
    let mut ju = vec![[0.0; 2]; m];
    let mut grad = vec![0.0; 2 * n];
    let mut lambda = nalgebra::Vector4::<f64>::zeros();
    for k in (1..=n).rev() {
        cost.residuals(k, &plan.states[k], &plan.inputs[k - 1], &mut r, &mut jx, &mut ju);
        // lambda <- dJ/dx_k
        for i in 0..m {
            for c in 0..4 {
                lambda[c] += 2.0 * r[i] * jx[i][c];
            }
        }
        let (a, b) = unicycle_jacobians(&plan.states[k - 1], &plan.inputs[k - 1], plan.dt);
        let gu = b.transpose() * lambda;
        grad[2 * (k - 1)] = gu[0];
        grad[2 * (k - 1) + 1] = gu[1];
        for i in 0..m {
            grad[2 * (k - 1)] += 2.0 * r[i] * ju[i][0];
            grad[2 * (k - 1) + 1] += 2.0 * r[i] * ju[i][1];
        }
        lambda = a.transpose() * lambda;
    }
    grad
}
