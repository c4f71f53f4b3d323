//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use num_bigint::BigUint;
use num_traits::{One, ToPrimitive};
use rand::Rng;

use shmpc::geometry::{BoundingBox, Halfspace};
use shmpc::qp::QpProblem;
use shmpc::uncertainty::Vec2;

/// Exact `C(n, k)`.
pub fn binomial_exact(n: usize, k: usize) -> BigUint {
    let k = k.min(n - k);
    let mut c = BigUint::one();
    for i in 0..k {
        c = c * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    c
}

/// Natural log of a big integer, from its top 64 bits and the bit length.
pub fn ln_big(x: &BigUint) -> f64 {
    let bits = x.bits();
    if bits <= 64 {
        return (x.to_u64().unwrap() as f64).ln();
    }
    let shift = bits - 64;
    let top = (x >> shift).to_u64().unwrap() as f64;
    top.ln() + shift as f64 * std::f64::consts::LN_2
}

/// `eps(n) = 1 - (beta / (S C(S, n)))^(1 / (S - n))` with the exact binomial.
pub fn epsilon_oracle(n: usize, s: usize, beta: f64) -> f64 {
    if n >= s {
        return 1.0;
    }
    let ln_c = ln_big(&binomial_exact(s, n));
    -((beta.ln() - (s as f64).ln() - ln_c) / (s - n) as f64).exp_m1()
}

/// Solves a strictly convex QP by enumerating every linearly independent
/// active set of inequalities (equalities always active) and keeping the best
/// feasible stationary point. `None` when the feasible set is empty.
pub fn brute_force_qp(p: &QpProblem) -> Option<(DVector<f64>, f64)> {
    let n = p.gradient.len();
    let m = p.inequalities.len();
    let dense = |row: &shmpc::qp::LinearRow| {
        let mut a = DVector::zeros(n);
        for &(i, v) in &row.coeffs {
            a[i] += v;
        }
        a
    };
    let eq: Vec<(DVector<f64>, f64)> = p.equalities.iter().map(|r| (dense(r), r.rhs)).collect();
    let ineq: Vec<(DVector<f64>, f64)> = p.inequalities.iter().map(|r| (dense(r), r.rhs)).collect();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for mask in 0u32..(1 << m) {
        let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let rows: Vec<&(DVector<f64>, f64)> = eq.iter().chain(active.iter().map(|&i| &ineq[i])).collect();
        if rows.len() > n {
            continue;
        }
        let k = rows.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.hessian);
        for (j, (a, b)) in rows.iter().enumerate() {
            for i in 0..n {
                kkt[(i, n + j)] = a[i];
                kkt[(n + j, i)] = a[i];
            }
            rhs[n + j] = *b;
        }
        for i in 0..n {
            rhs[i] = -p.gradient[i];
        }
        let Some(sol) = kkt.clone().lu().solve(&rhs) else { continue };
        if (&kkt * &sol - &rhs).amax() > 1e-8 * (1.0 + rhs.amax()) {
            continue;
        }
        let x = sol.rows(0, n).into_owned();
        let feasible = eq.iter().all(|(a, b)| (a.dot(&x) - b).abs() <= 1e-7)
            && ineq.iter().all(|(a, b)| a.dot(&x) <= b + 1e-7);
        if !feasible {
            continue;
        }
        let obj = 0.5 * x.dot(&(&p.hessian * &x)) + p.gradient.dot(&x);
        if best.as_ref().map_or(true, |(_, o)| obj < *o) {
            best = Some((x, obj));
        }
    }
    best
}

/// Random strictly convex QP with `n` variables, `m` inequalities and `e`
/// equalities.
pub fn random_qp<R: Rng>(rng: &mut R, n: usize, m: usize, e: usize) -> QpProblem {
    let l = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let hessian = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
    let gradient = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
    let row = |rng: &mut R| {
        shmpc::qp::LinearRow::new((0..n).map(|i| (i, rng.gen_range(-1.0..1.0))).collect(), rng.gen_range(-1.0..1.0))
    };
    let equalities = (0..e).map(|_| row(rng)).collect();
    let inequalities = (0..m).map(|_| row(rng)).collect();
    QpProblem { hessian, gradient, equalities, inequalities }
}

/// Sutherland-Hodgman clip of a convex polygon by `normal . p <= offset`.
pub fn clip(poly: &[Vec2], h: &Halfspace) -> Vec<Vec2> {
    let mut out = Vec::new();
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let (fa, fb) = (h.normal.dot(&a) - h.offset, h.normal.dot(&b) - h.offset);
        if fa <= 0.0 {
            out.push(a);
        }
        if (fa < 0.0 && fb > 0.0) || (fa > 0.0 && fb < 0.0) {
            out.push(a + (b - a) * (fa / (fa - fb)));
        }
    }
    out
}

/// The intersection of every halfspace with the box, by successive clipping.
pub fn intersection_by_clipping(halfspaces: &[Halfspace], bbox: &BoundingBox) -> Vec<Vec2> {
    let mut poly = bbox.corners().to_vec();
    for h in halfspaces {
        poly = clip(&poly, h);
        if poly.is_empty() {
            break;
        }
    }
    poly
}

/// Indices of halfspaces whose line carries an edge of `poly` longer than
/// `min_edge`, i.e. the ones linear-programming redundancy elimination keeps.
pub fn supporting_halfspaces(halfspaces: &[Halfspace], poly: &[Vec2], min_edge: f64) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, h) in halfspaces.iter().enumerate() {
        let on = |p: &Vec2| (h.normal.dot(p) - h.offset).abs() <= 1e-9 * (1.0 + h.offset.abs());
        let supports = (0..poly.len()).any(|j| {
            let (a, b) = (poly[j], poly[(j + 1) % poly.len()]);
            on(&a) && on(&b) && (b - a).norm() > min_edge
        });
        if supports {
            out.push(i);
        }
    }
    out
}

/// Halfspaces tangent to random circles around the origin, the shape the
/// collision linearization produces, plus some random cuts.
pub fn random_halfspaces<R: Rng>(rng: &mut R, count: usize) -> Vec<Halfspace> {
    (0..count)
        .map(|_| {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let normal = Vec2::new(angle.cos(), angle.sin());
            let offset = if rng.gen_bool(0.97) { rng.gen_range(0.5..4.0) } else { rng.gen_range(-0.5..8.0) };
            Halfspace::new(normal, offset)
        })
        .collect()
}

/// Central differences of a scalar function of a vector.
pub fn central_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| <= tol * max(1, |b|)`, elementwise.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[derive(Debug, Default)]
pub struct ReducerCheck {
    pub membership_disagreements: usize,
    /// Reducer facets differing from the halfspaces that carry an edge.
    pub facet_mismatch: bool,
    pub scenario_facets: usize,
    pub flagged: bool,
    pub empty: bool,
}

/// Runs the reducer on `count` random halfspaces and compares it with the
/// clipping oracle on `points` uniform points around the box.
pub fn check_reducer<R: Rng>(rng: &mut R, count: usize, points: usize, n_h: usize) -> ReducerCheck {
    use shmpc::geometry::{reduce_polytope, Provenance};
    let bbox = BoundingBox::around(Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)), 5.0);
    let hs: Vec<Halfspace> = random_halfspaces(rng, count)
        .into_iter()
        .enumerate()
        .map(|(i, h)| h.with_provenance(Provenance { scenario: i as u32 + 1, obstacle: 0, step: 1, disc: 0 }))
        .collect();
    let poly = intersection_by_clipping(&hs, &bbox);
    let mut check = ReducerCheck::default();
    let reduced = match reduce_polytope(&hs, &bbox, n_h, 1, 0) {
        Ok(p) => p,
        Err(shmpc::Error::EmptyPolytope { .. }) => {
            check.empty = true;
            // the oracle must agree that nothing is left
            check.membership_disagreements = usize::from(poly.len() >= 3 && polygon_area(&poly) > 1e-12);
            return check;
        }
        Err(e) => panic!("{e}"),
    };
    check.scenario_facets = reduced.scenario_facet_count();
    check.flagged = reduced.over_cap;

    let inside_all = |p: &Vec2| bbox.contains(p) && hs.iter().all(|h| h.contains(p));
    let near_boundary = |p: &Vec2| {
        hs.iter().chain(bbox.halfspaces().iter()).any(|h| h.slack(p).abs() < 1e-9)
    };
    for _ in 0..points {
        let p = Vec2::new(rng.gen_range(bbox.min[0] - 1.0..bbox.max[0] + 1.0), rng.gen_range(bbox.min[1] - 1.0..bbox.max[1] + 1.0));
        if near_boundary(&p) {
            continue;
        }
        if reduced.contains(&p, 0.0) != inside_all(&p) {
            check.membership_disagreements += 1;
        }
    }

    let mut expected: Vec<u32> = supporting_halfspaces(&hs, &poly, 1e-7).iter().map(|&i| i as u32 + 1).collect();
    expected.sort_unstable();
    let mut got: Vec<u32> = reduced.scenario_facets().map(|h| h.provenance.unwrap().scenario).collect();
    got.sort_unstable();
    check.facet_mismatch = got != expected;
    check
}

pub fn polygon_area(poly: &[Vec2]) -> f64 {
    let mut a = 0.0;
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        a += p.x * q.y - p.y * q.x;
    }
    0.5 * a.abs()
}

/// `sum_n C(S, n) (1 - eps(n))^(S - n)` with the library's `eps(n)` and exact
/// binomials; terms with `eps(n) = 1` vanish.
pub fn allocation_sum(s: usize, beta: f64, n_bar: usize) -> f64 {
    (0..=n_bar.min(s - 1))
        .map(|n| {
            let eps = shmpc::risk::epsilon_of_n(n, s, beta).unwrap();
            if eps >= 1.0 {
                return 0.0;
            }
            (ln_big(&binomial_exact(s, n)) + (s - n) as f64 * (-eps).ln_1p()).exp()
        })
        .sum()
}
