//! Linearized collision constraints and per-stage free-space polygons.

use std::cmp::Ordering;
use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncertainty::{keyed_rng, ObstacleModel, ScenarioId, Vec2};

/// Which sampled position produced a constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Provenance {
    pub scenario: ScenarioId,
    pub obstacle: u32,
    pub step: u32,
    pub disc: u32,
}

/// `{ p : normal . p <= offset }` with a unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Halfspace {
    pub normal: Vec2,
    pub offset: f64,
    /// `None` for bounding-box facets.
    pub provenance: Option<Provenance>,
}

impl Halfspace {
    pub fn new(normal: Vec2, offset: f64) -> Self {
        let n = normal.norm();
        Self { normal: normal / n, offset: offset / n, provenance: None }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    /// `offset - normal . p`; non-negative inside.
    pub fn slack(&self, p: &Vec2) -> f64 {
        self.offset - self.normal.dot(p)
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        self.slack(p) >= 0.0
    }

    fn angle(&self) -> f64 {
        self.normal.y.atan2(self.normal.x)
    }

    fn scenario(&self) -> Option<ScenarioId> {
        self.provenance.map(|p| p.scenario)
    }
}

/// Axis-aligned bounds on the position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl BoundingBox {
    pub fn around(center: Vec2, half_width: f64) -> Self {
        Self {
            min: [center.x - half_width, center.y - half_width],
            max: [center.x + half_width, center.y + half_width],
        }
    }

    pub fn halfspaces(&self) -> [Halfspace; 4] {
        [
            Halfspace { normal: Vec2::new(1.0, 0.0), offset: self.max[0], provenance: None },
            Halfspace { normal: Vec2::new(0.0, 1.0), offset: self.max[1], provenance: None },
            Halfspace { normal: Vec2::new(-1.0, 0.0), offset: -self.min[0], provenance: None },
            Halfspace { normal: Vec2::new(0.0, -1.0), offset: -self.min[1], provenance: None },
        ]
    }

    pub fn corners(&self) -> [Vec2; 4] {
        [
            Vec2::new(self.min[0], self.min[1]),
            Vec2::new(self.max[0], self.min[1]),
            Vec2::new(self.max[0], self.max[1]),
            Vec2::new(self.min[0], self.max[1]),
        ]
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        p.x >= self.min[0] && p.x <= self.max[0] && p.y >= self.min[1] && p.y <= self.max[1]
    }
}

/// Free space of one robot disc at one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    pub stage: usize,
    pub disc: usize,
    /// Non-redundant facets ordered by normal angle; box facets have no
    /// provenance.
    pub facets: Vec<Halfspace>,
    /// Counter-clockwise vertices.
    pub vertices: Vec<Vec2>,
    /// More than `n_H` scenario facets survived the reduction.
    pub over_cap: bool,
}

impl Polytope {
    pub fn contains(&self, p: &Vec2, tolerance: f64) -> bool {
        self.facets.iter().all(|h| h.slack(p) >= -tolerance)
    }

    pub fn max_violation(&self, p: &Vec2) -> f64 {
        self.facets.iter().map(|h| -h.slack(p)).fold(0.0, f64::max)
    }

    pub fn scenario_facets(&self) -> impl Iterator<Item = &Halfspace> {
        self.facets.iter().filter(|h| h.provenance.is_some())
    }

    pub fn scenario_facet_count(&self) -> usize {
        self.scenario_facets().count()
    }
}

/// Tangent halfspace separating `p_hat` from the disc of radius `r` around `delta`.
pub fn linearize_collision(p_hat: Vec2, delta: Vec2, r: f64) -> Result<Halfspace> {
    let d = delta - p_hat;
    let dist = d.norm();
    if !(dist > 1e-12) {
        return Err(Error::DegenerateDirection);
    }
    let normal = d / dist;
    Ok(Halfspace { normal, offset: normal.dot(&delta) - r, provenance: None })
}

const OUT_TOL: f64 = 1e-10;
const PARALLEL_TOL: f64 = 1e-12;
const MIN_EDGE: f64 = 1e-9;
/// Normal-direction sectors; the tightest halfspace of each seeds the coarse polygon.
const SEED_SECTORS: usize = 64;

/// Monotone stand-in for the angle of `v`, in `[0, 4)`.
fn pseudo_angle(v: &Vec2) -> f64 {
    let p = v.x / (v.x.abs() + v.y.abs());
    if v.y < 0.0 {
        3.0 + p
    } else {
        1.0 - p
    }
}

#[derive(Clone, Copy)]
struct Line {
    h: Halfspace,
    dir: Vec2,
    angle: f64,
}

impl Line {
    fn new(h: Halfspace) -> Self {
        let dir = Vec2::new(-h.normal.y, h.normal.x);
        Self { h, dir, angle: dir.y.atan2(dir.x) }
    }

    fn out(&self, p: &Vec2) -> bool {
        self.h.normal.dot(p) - self.h.offset > OUT_TOL
    }
}

fn cross(a: &Vec2, b: &Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

fn intersect(a: &Halfspace, b: &Halfspace) -> Vec2 {
    let det = cross(&a.normal, &b.normal);
    Vec2::new(
        (a.offset * b.normal.y - b.offset * a.normal.y) / det,
        (a.normal.x * b.offset - b.normal.x * a.offset) / det,
    )
}

fn provenance_order(a: &Option<Provenance>, b: &Option<Provenance>) -> Ordering {
    match (a, b) {
        (None, None) => Ordering::Equal,
        (None, Some(_)) => Ordering::Less,
        (Some(_), None) => Ordering::Greater,
        (Some(x), Some(y)) => x.cmp(y),
    }
}

/// Sort-and-sweep halfplane intersection. Returns the facets in cyclic
/// order, or `None` when the intersection is empty or degenerate.
fn sweep(halfspaces: impl IntoIterator<Item = Halfspace>) -> Option<Vec<Halfspace>> {
    let mut lines: Vec<Line> = halfspaces.into_iter().map(Line::new).collect();
    lines.sort_by(|a, b| {
        a.angle
            .total_cmp(&b.angle)
            .then(a.h.offset.total_cmp(&b.h.offset))
            .then(provenance_order(&a.h.provenance, &b.h.provenance))
    });

    let mut dq: VecDeque<Line> = VecDeque::with_capacity(lines.len());
    for line in lines {
        while dq.len() > 1 && line.out(&intersect(&dq[dq.len() - 1].h, &dq[dq.len() - 2].h)) {
            dq.pop_back();
        }
        while dq.len() > 1 && line.out(&intersect(&dq[0].h, &dq[1].h)) {
            dq.pop_front();
        }
        if let Some(last) = dq.back() {
            if cross(&line.dir, &last.dir).abs() < PARALLEL_TOL {
                if line.dir.dot(&last.dir) < 0.0 {
                    return None;
                }
                // same direction: the sort put the tighter one first
                continue;
            }
        }
        dq.push_back(line);
    }
    while dq.len() > 2 && dq[0].out(&intersect(&dq[dq.len() - 1].h, &dq[dq.len() - 2].h)) {
        dq.pop_back();
    }
    while dq.len() > 2 && dq[dq.len() - 1].out(&intersect(&dq[0].h, &dq[1].h)) {
        dq.pop_front();
    }
    if dq.len() < 3 {
        return None;
    }
    Some(dq.into_iter().map(|l| l.h).collect())
}

/// Vertices of a cyclically ordered facet list; drops facets whose edge has
/// (numerically) zero length. Returns `None` if fewer than three remain or
/// the cycle is not convex.
fn polygon(mut facets: Vec<Halfspace>) -> Option<(Vec<Halfspace>, Vec<Vec2>)> {
    loop {
        let n = facets.len();
        if n < 3 {
            return None;
        }
        // vertex i lies between facet i and facet i+1
        let verts: Vec<Vec2> = (0..n).map(|i| intersect(&facets[i], &facets[(i + 1) % n])).collect();
        let degenerate = (0..n).find(|&i| {
            let prev = verts[(i + n - 1) % n];
            (verts[i] - prev).norm() < MIN_EDGE
        });
        match degenerate {
            Some(i) => {
                facets.remove(i);
            }
            None => {
                if verts.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
                    return None;
                }
                return Some((facets, verts));
            }
        }
    }
}

/// Intersection of `halfspaces` and the box as a polygon, or `None` when empty.
fn intersection_polygon(halfspaces: &[Halfspace], bbox: &BoundingBox) -> Option<(Vec<Halfspace>, Vec<Vec2>)> {
    let all = halfspaces.iter().copied().chain(bbox.halfspaces());
    let facets = sweep(all)?;
    let (facets, verts) = polygon(facets)?;
    // every vertex must satisfy every facet
    for v in &verts {
        if facets.iter().any(|h| h.normal.dot(v) - h.offset > 1e-7) {
            return None;
        }
    }
    Some((facets, verts))
}

/// Reduces a stage's halfspaces to the non-redundant facets inside `bbox`.
///
/// A coarse polygon built from the tightest halfspace of each normal-direction
/// sector (smallest slack at the box center) contains the true intersection,
/// so every halfspace that holds at all of its vertices is redundant and
/// skipped before the sweep.
pub fn reduce_polytope(
    halfspaces: &[Halfspace],
    bbox: &BoundingBox,
    n_h: usize,
    stage: usize,
    disc: usize,
) -> Result<Polytope> {
    let center = Vec2::new(0.5 * (bbox.min[0] + bbox.max[0]), 0.5 * (bbox.min[1] + bbox.max[1]));
    let candidates: Vec<Halfspace> = if halfspaces.len() > 2 * SEED_SECTORS {
        // tightest halfspace per normal-direction sector
        let mut best: Vec<Option<usize>> = vec![None; SEED_SECTORS];
        let mut best_slack = vec![f64::INFINITY; SEED_SECTORS];
        for (i, h) in halfspaces.iter().enumerate() {
            let b = ((pseudo_angle(&h.normal) * 0.25 * SEED_SECTORS as f64) as usize).min(SEED_SECTORS - 1);
            let slack = h.slack(&center);
            if slack < best_slack[b] {
                best_slack[b] = slack;
                best[b] = Some(i);
            }
        }
        let seed_idx: Vec<usize> = best.into_iter().flatten().collect();
        let seed: Vec<Halfspace> = seed_idx.iter().map(|&i| halfspaces[i]).collect();
        match intersection_polygon(&seed, bbox) {
            None => return Err(empty_polytope(&seed, bbox)),
            Some((_, coarse)) => {
                let c = coarse.iter().sum::<Vec2>() / coarse.len() as f64;
                let rho = coarse.iter().map(|v| (v - c).norm()).fold(0.0, f64::max);
                let mut keep = seed;
                let mut is_seed = vec![false; halfspaces.len()];
                seed_idx.iter().for_each(|&i| is_seed[i] = true);
                keep.extend(halfspaces.iter().enumerate().filter(|(i, h)| {
                    // the bounding circle settles most halfspaces without the vertex loop
                    !is_seed[*i]
                        && h.normal.dot(&c) + rho - h.offset > OUT_TOL
                        && coarse.iter().any(|v| h.normal.dot(v) - h.offset > OUT_TOL)
                }).map(|(_, h)| *h));
                keep
            }
        }
    } else {
        halfspaces.to_vec()
    };

    let (mut facets, _) = match intersection_polygon(&candidates, bbox) {
        Some(x) => x,
        None => return Err(empty_polytope(&candidates, bbox)),
    };
    facets.sort_by(|a, b| {
        a.angle()
            .total_cmp(&b.angle())
            .then(a.offset.total_cmp(&b.offset))
            .then(provenance_order(&a.provenance, &b.provenance))
    });
    // vertices in counter-clockwise order follow the angle-sorted facets
    let n = facets.len();
    let vertices = (0..n).map(|i| intersect(&facets[i], &facets[(i + 1) % n])).collect();
    // Every returned facet is non-redundant, so none can be dropped to honour
    // the cap without enlarging the set; the stage is flagged instead.
    let over_cap = facets.iter().filter(|h| h.provenance.is_some()).count() > n_h;
    Ok(Polytope { stage, disc, facets, vertices, over_cap })
}

fn is_feasible(halfspaces: &[Halfspace], bbox: &BoundingBox) -> bool {
    intersection_polygon(halfspaces, bbox).is_some()
}

/// Builds the error for an empty intersection with an irreducible subset of
/// blocking constraints (at most three in the plane, besides the box).
fn empty_polytope(halfspaces: &[Halfspace], bbox: &BoundingBox) -> Error {
    let mut pool: Vec<Halfspace> = halfspaces.to_vec();
    let mut found: Vec<Halfspace> = Vec::new();
    while is_feasible(&found, bbox) && !pool.is_empty() {
        // smallest prefix that is infeasible together with `found`
        let infeasible_with = |k: usize| {
            let mut set = found.clone();
            set.extend_from_slice(&pool[..k]);
            !is_feasible(&set, bbox)
        };
        let (mut lo, mut hi) = (0usize, pool.len());
        if !infeasible_with(hi) {
            break;
        }
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if infeasible_with(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        found.push(pool[hi - 1]);
        pool.truncate(hi - 1);
    }
    let mut blocking: Vec<Provenance> = found.iter().filter_map(|h| h.provenance).collect();
    blocking.sort();
    blocking.dedup();
    Error::EmptyPolytope { blocking }
}

/// Clips a convex polygon by one halfspace.
pub fn clip_polygon(poly: &[Vec2], h: &Halfspace) -> Vec<Vec2> {
    let n = poly.len();
    let mut out = Vec::with_capacity(n + 1);
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let (sa, sb) = (h.slack(&a), h.slack(&b));
        if sa >= 0.0 {
            out.push(a);
        }
        if (sa >= 0.0) != (sb >= 0.0) {
            let t = sa / (sa - sb);
            out.push(a + (b - a) * t);
        }
    }
    out
}

/// True when, inside the box, one halfspace's feasible set contains the other's.
pub fn is_redundant_pair(h1: &Halfspace, h2: &Halfspace, bbox: &BoundingBox) -> bool {
    const TOL: f64 = 1e-9;
    let corners = bbox.corners();
    let inside = |a: &Halfspace, b: &Halfspace| clip_polygon(&corners, a).iter().all(|v| b.slack(v) >= -TOL);
    inside(h1, h2) || inside(h2, h1)
}

/// Setup for measuring how often a batch of single-step samples contains no
/// redundant pair.
#[derive(Debug, Clone)]
pub struct RedundancyExperiment {
    pub model: ObstacleModel,
    pub linearization_point: Vec2,
    pub radius: f64,
    pub bbox: BoundingBox,
    pub dt: f64,
}

impl Default for RedundancyExperiment {
    fn default() -> Self {
        let mut model = ObstacleModel::random_walk([2.5, 3.5], [0.0, 0.0]);
        model.initial_variance = [1.0, 1.0];
        Self {
            model,
            linearization_point: Vec2::zeros(),
            radius: 0.625,
            bbox: BoundingBox::around(Vec2::zeros(), 5.0),
            dt: 0.2,
        }
    }
}

impl RedundancyExperiment {
    /// `(S, fraction of trials in which no pair of samples is redundant)`.
    pub fn run(&self, sample_sizes: &[usize], trials: usize, seed: u64) -> Vec<(usize, f64)> {
        sample_sizes
            .iter()
            .map(|&s| {
                let clean = (0..trials).filter(|&t| !self.trial_has_redundancy(s, seed, t as u64)).count();
                (s, clean as f64 / trials.max(1) as f64)
            })
            .collect()
    }

    fn trial_has_redundancy(&self, s: usize, seed: u64, trial: u64) -> bool {
        let mut rng = keyed_rng(seed, s as u64, trial);
        let mut buf = [Vec2::zeros()];
        let hs: Vec<Halfspace> = (0..s)
            .filter_map(|_| {
                self.model.sample_future(&mut rng, self.dt, &mut buf);
                // a sample coincident with the linearization point has no direction
                linearize_collision(self.linearization_point, buf[0], self.radius).ok()
            })
            .collect();
        (0..hs.len()).any(|i| (i + 1..hs.len()).any(|j| is_redundant_pair(&hs[i], &hs[j], &self.bbox)))
    }
}

/// Convenience wrapper over [`RedundancyExperiment::run`] with default geometry.
pub fn redundancy_experiment(
    model: &ObstacleModel,
    sample_sizes: &[usize],
    trials: usize,
    seed: u64,
) -> Vec<(usize, f64)> {
    let exp = RedundancyExperiment { model: model.clone(), ..Default::default() };
    exp.run(sample_sizes, trials, seed)
}

/// Writes `stage,disc,facet,ax,ay,b,scenario_id` rows.
pub fn write_polytopes_csv<W: Write>(polytopes: &[Polytope], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["stage", "disc", "facet", "ax", "ay", "b", "scenario_id"])?;
    for p in polytopes {
        for (i, h) in p.facets.iter().enumerate() {
            w.write_record(&[
                p.stage.to_string(),
                p.disc.to_string(),
                i.to_string(),
                format!("{:.12}", h.normal.x),
                format!("{:.12}", h.normal.y),
                format!("{:.12}", h.offset),
                h.scenario().map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hs(ax: f64, ay: f64, b: f64, scenario: u32) -> Halfspace {
        Halfspace::new(Vec2::new(ax, ay), b).with_provenance(Provenance { scenario, obstacle: 0, step: 1, disc: 0 })
    }

    #[test]
    fn linearize_axis_cases() {
        let h = linearize_collision(Vec2::zeros(), Vec2::new(2.0, 0.0), 1.0).unwrap();
        assert!((h.normal - Vec2::new(1.0, 0.0)).norm() < 1e-15);
        assert!((h.offset - 1.0).abs() < 1e-15);

        let h = linearize_collision(Vec2::zeros(), Vec2::new(0.0, 3.0), 0.625).unwrap();
        assert!((h.normal - Vec2::new(0.0, 1.0)).norm() < 1e-15);
        assert!((h.offset - 2.375).abs() < 1e-15);

        assert!(matches!(
            linearize_collision(Vec2::new(1.0, 1.0), Vec2::new(1.0, 1.0), 0.5),
            Err(Error::DegenerateDirection)
        ));
    }

    #[test]
    fn linearize_random_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let p = Vec2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let d = Vec2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let r = rng.gen_range(0.1..2.0);
            let h = linearize_collision(p, d, r).unwrap();
            assert!((h.normal.norm() - 1.0).abs() < 1e-9);
            // the boundary line is tangent to the collision disc
            assert!((h.slack(&d) + r).abs() < 1e-9);
            if (d - p).norm() > r {
                assert!(h.slack(&p) > 0.0);
            }
            // every point of the disc is excluded (or on the boundary)
            for i in 0..16 {
                let a = i as f64 * std::f64::consts::TAU / 16.0;
                let q = d + Vec2::new(a.cos(), a.sin()) * r * 0.999;
                assert!(h.slack(&q) < 0.0);
            }
        }
    }

    #[test]
    fn duplicates_collapse() {
        let b = BoundingBox::around(Vec2::zeros(), 5.0);
        let p = reduce_polytope(&[hs(1.0, 0.0, 1.0, 1), hs(1.0, 0.0, 1.0, 2)], &b, 20, 0, 0).unwrap();
        assert_eq!(p.scenario_facet_count(), 1);
        assert_eq!(p.scenario_facets().next().unwrap().provenance.unwrap().scenario, 1);
    }

    #[test]
    fn parallel_domination() {
        let b = BoundingBox::around(Vec2::zeros(), 5.0);
        let p = reduce_polytope(&[hs(1.0, 0.0, 1.0, 1), hs(1.0, 0.0, 2.0, 2), hs(0.0, 1.0, 1.0, 3)], &b, 20, 0, 0)
            .unwrap();
        let ids: Vec<u32> = p.scenario_facets().map(|h| h.provenance.unwrap().scenario).collect();
        assert_eq!(ids, vec![1, 3]);
        // box: left and bottom facets remain
        assert_eq!(p.facets.len(), 4);
        assert_eq!(p.vertices.len(), 4);
    }

    #[test]
    fn empty_intersection_reports_blockers() {
        let b = BoundingBox::around(Vec2::zeros(), 5.0);
        let mut many: Vec<Halfspace> = (0..200).map(|i| hs(1.0, 0.0, 3.0 + i as f64 * 0.01, 100 + i)).collect();
        many.push(hs(1.0, 0.0, -1.0, 7));
        many.push(hs(-1.0, 0.0, -0.5, 9));
        match reduce_polytope(&many, &b, 20, 0, 0) {
            Err(Error::EmptyPolytope { blocking }) => {
                let ids: Vec<u32> = blocking.iter().map(|p| p.scenario).collect();
                assert_eq!(ids, vec![7, 9]);
            }
            other => panic!("expected empty polytope, got {other:?}"),
        }
    }

    #[test]
    fn vertices_satisfy_facets_and_are_ccw() {
        let b = BoundingBox::around(Vec2::zeros(), 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let hs: Vec<Halfspace> = (0..300)
                .map(|i| {
                    let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    hs(a.cos(), a.sin(), rng.gen_range(0.5..8.0), i)
                })
                .collect();
            let p = reduce_polytope(&hs, &b, 20, 0, 0).unwrap();
            let n = p.vertices.len();
            let mut area = 0.0;
            for i in 0..n {
                let (a, c) = (p.vertices[i], p.vertices[(i + 1) % n]);
                area += cross(&a, &c);
                for h in &hs {
                    assert!(h.slack(&p.vertices[i]) > -1e-7);
                }
            }
            assert!(area > 0.0);
        }
    }

    #[test]
    fn redundant_pairs() {
        let b = BoundingBox::around(Vec2::zeros(), 5.0);
        let h = hs(1.0, 0.0, 1.0, 1);
        assert!(is_redundant_pair(&h, &h, &b));
        assert!(is_redundant_pair(&hs(1.0, 0.0, 1.0, 1), &hs(1.0, 0.0, 2.0, 2), &b));
        let (h1, h2) = (hs(1.0, 0.0, 1.0, 1), hs(0.0, 1.0, 1.0, 2));
        assert!(!is_redundant_pair(&h1, &h2, &b));
        // witnesses: one point in h1 only, one in h2 only
        let (p, q) = (Vec2::new(0.5, 2.0), Vec2::new(2.0, 0.5));
        assert!(h1.contains(&p) && !h2.contains(&p));
        assert!(h2.contains(&q) && !h1.contains(&q));
    }

    #[test]
    fn redundancy_experiment_edge_cases() {
        let exp = RedundancyExperiment::default();
        assert_eq!(exp.run(&[1], 20, 3), vec![(1, 1.0)]);

        let point = RedundancyExperiment { bbox: BoundingBox::around(Vec2::new(1.0, 1.0), 0.0), ..Default::default() };
        for (_, f) in point.run(&[2, 5], 30, 3) {
            assert_eq!(f, 0.0);
        }
    }

    #[test]
    fn polytope_csv() {
        let b = BoundingBox::around(Vec2::zeros(), 5.0);
        let p = reduce_polytope(&[hs(1.0, 0.0, 1.0, 4)], &b, 20, 3, 0).unwrap();
        let mut buf = Vec::new();
        write_polytopes_csv(&[p], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().any(|l| l.starts_with("3,0,") && l.ends_with(",4")));
    }
}
