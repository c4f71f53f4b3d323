//! Moves the stage positions of a warm-start plan into their free-space
//! polytopes so they can serve as linearization points.

use crate::error::{Error, Result};
use crate::geometry::{clip_polygon, Halfspace, Polytope, Provenance};
use crate::planner::dynamics::{Disc, TrajectoryPlan};
use crate::uncertainty::Vec2;

pub const PROJECTION_MARGIN: f64 = 1e-4;
pub const MAX_SWEEPS: usize = 100;

/// Facets of one stage expressed on a common translation `t` of the robot:
/// `normal . t <= bound`.
fn translation_rows(plan: &TrajectoryPlan, stage: usize, discs: &[Disc], polytopes: &[Polytope]) -> Vec<(Halfspace, f64)> {
    let x = &plan.states[stage];
    let mut rows = Vec::new();
    for p in polytopes.iter().filter(|p| p.stage == stage) {
        let c = discs[p.disc].center(x);
        for h in &p.facets {
            rows.push((*h, h.offset - h.normal.dot(&c)));
        }
    }
    rows
}

/// Smallest translation along `dir` meeting every row with `margin` to spare.
fn along_direction(rows: &[(Halfspace, f64)], dir: Vec2, margin: f64) -> Option<f64> {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for (h, bound) in rows {
        let a = h.normal.dot(&dir);
        let b = bound - margin;
        if a.abs() < 1e-12 {
            if b < 0.0 {
                return None;
            }
        } else if a > 0.0 {
            hi = hi.min(b / a);
        } else {
            lo = lo.max(b / a);
        }
    }
    (lo <= hi).then(|| 0.0f64.clamp(lo, hi))
}

fn alternating(rows: &[(Halfspace, f64)], margin: f64) -> Option<Vec2> {
    let mut t = Vec2::zeros();
    for _ in 0..MAX_SWEEPS {
        for (h, bound) in rows {
            // aim past the margin so that the sweep order does not leave tiny violations
            let excess = h.normal.dot(&t) - (bound - 2.0 * margin);
            if excess > 0.0 {
                t -= h.normal * excess;
            }
        }
        if rows.iter().all(|(h, bound)| h.normal.dot(&t) <= bound - margin) {
            return Some(t);
        }
    }
    None
}

/// Projects every infeasible stage `1..=N` of `prev` into its polytopes.
///
/// A stage is first translated orthogonally to its heading; when no such
/// shift exists, alternating projections over the facets are used. Inputs are
/// kept, so the returned states are no longer a rollout of them.
pub fn project_previous_plan(prev: &TrajectoryPlan, polytopes: &[Polytope], discs: &[Disc]) -> Result<TrajectoryPlan> {
    let mut out = prev.clone();
    for k in 1..prev.states.len() {
        let rows = translation_rows(prev, k, discs, polytopes);
        if rows.iter().all(|(_, bound)| *bound >= 0.0) {
            continue;
        }
        let heading = prev.states[k].heading;
        let normal = Vec2::new(-heading.sin(), heading.cos());
        let t = match along_direction(&rows, normal, PROJECTION_MARGIN) {
            Some(lambda) => normal * lambda,
            None => alternating(&rows, PROJECTION_MARGIN)
                .or_else(|| nearest_in_polygon(&rows, PROJECTION_MARGIN))
                .ok_or_else(|| Error::EmptyPolytope { blocking: blocking_set(&rows) })?,
        };
        out.states[k].position[0] += t.x;
        out.states[k].position[1] += t.y;
    }
    Ok(out)
}

/// Closest point to the origin of the margin-shrunk translation polygon, for
/// slivers on which alternating projections converge too slowly.
fn nearest_in_polygon(rows: &[(Halfspace, f64)], margin: f64) -> Option<Vec2> {
    let big = 1e6;
    let mut poly = vec![Vec2::new(-big, -big), Vec2::new(big, -big), Vec2::new(big, big), Vec2::new(-big, big)];
    for (h, bound) in rows {
        poly = clip_polygon(&poly, &Halfspace::new(h.normal, bound - 1.5 * margin));
        if poly.len() < 3 {
            return None;
        }
    }
    let mut best = poly[0];
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let ab = b - a;
        let t = (-a.dot(&ab) / ab.norm_squared().max(1e-300)).clamp(0.0, 1.0);
        let q = a + ab * t;
        if q.norm_squared() < best.norm_squared() {
            best = q;
        }
    }
    rows.iter().all(|(h, bound)| h.normal.dot(&best) <= bound - margin).then_some(best)
}

/// Shifts every stage orthogonally to its heading until all disc centers
/// clear every sampled obstacle disc. Among the admissible shifts the one
/// closest to the previous stage's shift is taken, so consecutive stages
/// leave on the same side. `obstacles[i]` lists `(position, obstacle radius)`
/// for stage `i + 1`. Stages without an admissible shift are left unchanged.
pub fn push_out_of_samples(plan: &TrajectoryPlan, obstacles: &[Vec<(Vec2, f64)>], discs: &[Disc]) -> TrajectoryPlan {
    let mut out = plan.clone();
    let mut previous = 0.0;
    for (i, samples) in obstacles.iter().enumerate() {
        let k = i + 1;
        let x = &plan.states[k];
        let e = Vec2::new(-x.heading.sin(), x.heading.cos());
        let mut blocked = Vec::new();
        for disc in discs {
            let c = disc.center(x);
            for (delta, r) in samples {
                let r = r + disc.radius + PROJECTION_MARGIN;
                let d = delta - c;
                let along = e.dot(&d);
                let perp2 = d.norm_squared() - along * along;
                if perp2 < r * r {
                    let half = (r * r - perp2).sqrt();
                    blocked.push((along - half, along + half));
                }
            }
        }
        if blocked.iter().all(|(lo, hi)| !(*lo < 0.0 && 0.0 < *hi)) {
            previous = 0.0;
            continue;
        }
        blocked.sort_by(|a, b| a.0.total_cmp(&b.0));
        // gaps of the merged union, as candidate shifts
        let mut candidates = Vec::new();
        let (mut lo, mut hi) = blocked[0];
        candidates.push(lo);
        for &(a, b) in &blocked[1..] {
            if a > hi {
                candidates.push(hi);
                candidates.push(a);
                lo = a;
            }
            hi = hi.max(b);
        }
        let _ = lo;
        candidates.push(hi);
        if let Some(&best) = candidates.iter().min_by(|a, b| (*a - previous).abs().total_cmp(&(*b - previous).abs())) {
            out.states[k].position[0] += e.x * best;
            out.states[k].position[1] += e.y * best;
            previous = best;
        }
    }
    out
}

fn blocking_set(rows: &[(Halfspace, f64)]) -> Vec<Provenance> {
    let mut ids: Vec<Provenance> = rows.iter().filter_map(|(h, _)| h.provenance).collect();
    ids.sort();
    ids.dedup();
    ids
}
