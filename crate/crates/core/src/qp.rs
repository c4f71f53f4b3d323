//! Dense strictly convex QP solver (Goldfarb–Idnani dual active set).
//!
//! ```text
//! minimize    1/2 x' H x + g' x
//! subject to  a_e' x  = b_e
//!             a_i' x <= b_i
//! ```
//!
//! Constraint rows are sparse. Pivoting is deterministic: the most violated
//! inequality is added, ties going to the lowest index.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Inequalities with slack at or below this count as active.
pub const ACTIVITY_TOLERANCE: f64 = 1e-6;

const VIOLATION_TOLERANCE: f64 = 1e-9;
const DEPENDENCE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl LinearRow {
    pub fn new(coeffs: Vec<(usize, f64)>, rhs: f64) -> Self {
        Self { coeffs, rhs }
    }

    pub fn dot(&self, x: &DVector<f64>) -> f64 {
        self.coeffs.iter().map(|&(i, a)| a * x[i]).sum()
    }
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub equalities: Vec<LinearRow>,
    pub inequalities: Vec<LinearRow>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Inequalities with slack `<= ACTIVITY_TOLERANCE`, ascending.
    pub active: Vec<usize>,
    /// One multiplier per inequality, zero when not in the working set.
    pub duals: Vec<f64>,
    pub equality_duals: Vec<f64>,
    pub iterations: usize,
    /// Stationarity residual `|Hx + g + A'lambda|_inf / (1 + |g|_inf)`.
    pub kkt_residual: f64,
}

enum Outcome {
    Solved(QpSolution),
    /// Inequality indices of a (not necessarily irreducible) conflicting set.
    Infeasible(Vec<usize>),
}

/// Solves the QP. An infeasible problem yields [`Error::InfeasibleQp`] with an
/// irreducible subset of conflicting inequalities (equalities always kept).
pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution> {
    match goldfarb_idnani(problem)? {
        Outcome::Solved(sol) => Ok(sol),
        Outcome::Infeasible(raw) => Err(Error::InfeasibleQp { conflict: irreducible_conflict(problem, raw)? }),
    }
}

fn feasible_subset(problem: &QpProblem, subset: &[usize]) -> Result<bool> {
    let n = problem.gradient.len();
    let sub = QpProblem {
        hessian: DMatrix::identity(n, n),
        gradient: DVector::zeros(n),
        equalities: problem.equalities.clone(),
        inequalities: subset.iter().map(|&i| problem.inequalities[i].clone()).collect(),
    };
    Ok(matches!(goldfarb_idnani(&sub)?, Outcome::Solved(_)))
}

/// Deletion filter: drop every member whose removal keeps the set infeasible.
fn irreducible_conflict(problem: &QpProblem, raw: Vec<usize>) -> Result<Vec<usize>> {
    let mut set = raw;
    set.sort_unstable();
    set.dedup();
    if feasible_subset(problem, &set)? {
        // numerically inconclusive certificate: start from everything
        set = (0..problem.inequalities.len()).collect();
    }
    let mut i = 0;
    while i < set.len() {
        let mut trial = set.clone();
        trial.remove(i);
        if !feasible_subset(problem, &trial)? {
            set = trial;
        } else {
            i += 1;
        }
    }
    Ok(set)
}

struct Factor {
    n: usize,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    q: usize,
}

impl Factor {
    fn d_of(&self, row: &[(usize, f64)], sign: f64) -> DVector<f64> {
        let mut d = DVector::zeros(self.n);
        for col in 0..self.n {
            d[col] = sign * row.iter().map(|&(k, a)| self.j[(k, col)] * a).sum::<f64>();
        }
        d
    }

    fn z_of(&self, d: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.n);
        for col in self.q..self.n {
            let dc = d[col];
            if dc != 0.0 {
                z.axpy(dc, &self.j.column(col), 1.0);
            }
        }
        z
    }

    fn r_of(&self, d: &DVector<f64>) -> Vec<f64> {
        let q = self.q;
        let mut r = vec![0.0; q];
        for i in (0..q).rev() {
            let mut s = d[i];
            for k in i + 1..q {
                s -= self.r[(i, k)] * r[k];
            }
            r[i] = s / self.r[(i, i)];
        }
        r
    }

    /// Appends a constraint whose `J' n` is `d`; false if it is linearly
    /// dependent on the working set.
    fn add(&mut self, mut d: DVector<f64>) -> bool {
        let n = self.n;
        for jj in (self.q + 1..n).rev() {
            let (mut cc, mut ss) = (d[jj - 1], d[jj]);
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            d[jj] = 0.0;
            cc /= h;
            ss /= h;
            if cc < 0.0 {
                cc = -cc;
                ss = -ss;
                d[jj - 1] = -h;
            } else {
                d[jj - 1] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in 0..n {
                let t1 = self.j[(k, jj - 1)];
                let t2 = self.j[(k, jj)];
                self.j[(k, jj - 1)] = t1 * cc + t2 * ss;
                self.j[(k, jj)] = xny * (t1 + self.j[(k, jj - 1)]) - t2;
            }
        }
        self.q += 1;
        let q = self.q;
        for i in 0..q {
            self.r[(i, q - 1)] = d[i];
        }
        let scale = (0..q).map(|i| self.r[(i, i)].abs()).fold(1.0, f64::max);
        d[q - 1].abs() > DEPENDENCE_TOLERANCE * scale
    }

    /// Removes working-set position `l` and restores the triangular form.
    fn drop(&mut self, l: usize) {
        let n = self.n;
        let q = self.q;
        for col in l..q - 1 {
            for i in 0..n {
                self.r[(i, col)] = self.r[(i, col + 1)];
            }
        }
        for i in 0..n {
            self.r[(i, q - 1)] = 0.0;
        }
        self.q -= 1;
        let q = self.q;
        for jj in l..q {
            let (mut cc, mut ss) = (self.r[(jj, jj)], self.r[(jj + 1, jj)]);
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            cc /= h;
            ss /= h;
            self.r[(jj + 1, jj)] = 0.0;
            if cc < 0.0 {
                self.r[(jj, jj)] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[(jj, jj)] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in jj + 1..q {
                let t1 = self.r[(jj, k)];
                let t2 = self.r[(jj + 1, k)];
                self.r[(jj, k)] = t1 * cc + t2 * ss;
                self.r[(jj + 1, k)] = xny * (t1 + self.r[(jj, k)]) - t2;
            }
            for k in 0..n {
                let t1 = self.j[(k, jj)];
                let t2 = self.j[(k, jj + 1)];
                self.j[(k, jj)] = t1 * cc + t2 * ss;
                self.j[(k, jj + 1)] = xny * (self.j[(k, jj)] + t1) - t2;
            }
        }
    }
}

fn goldfarb_idnani(problem: &QpProblem) -> Result<Outcome> {
    let n = problem.gradient.len();
    if problem.hessian.nrows() != n || problem.hessian.ncols() != n {
        return Err(Error::QpFailure("hessian dimension mismatch".into()));
    }
    let me = problem.equalities.len();
    let mi = problem.inequalities.len();
    let g = &problem.gradient;

    let chol = nalgebra::linalg::Cholesky::new(problem.hessian.clone())
        .ok_or_else(|| Error::QpFailure("hessian is not positive definite".into()))?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::QpFailure("singular cholesky factor".into()))?;
    let mut fac = Factor { n, j: l_inv.transpose(), r: DMatrix::zeros(n, n), q: 0 };

    let mut x = -chol.solve(g);
    let mut f = 0.5 * g.dot(&x);
    // working set: constraint index (equalities first) and multiplier (>= form)
    let mut work: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut iterations = 0usize;

    for (e, row) in problem.equalities.iter().enumerate() {
        let d = fac.d_of(&row.coeffs, 1.0);
        let z = fac.z_of(&d);
        let r = fac.r_of(&d);
        let zn: f64 = row.coeffs.iter().map(|&(k, a)| z[k] * a).sum();
        let s = row.dot(&x) - row.rhs;
        if zn.abs() <= DEPENDENCE_TOLERANCE {
            if s.abs() > 1e-9 * (1.0 + row.rhs.abs()) {
                return Err(Error::QpFailure(format!("equality {e} is inconsistent")));
            }
            continue;
        }
        let t = -s / zn;
        x.axpy(t, &z, 1.0);
        for (uj, rj) in u.iter_mut().zip(&r) {
            *uj -= t * rj;
        }
        f += 0.5 * t * t * zn;
        if !fac.add(d) {
            return Err(Error::QpFailure(format!("equality {e} is linearly dependent")));
        }
        work.push(e);
        u.push(t);
    }

    let max_iterations = 10 * (n + mi + me) + 100;
    loop {
        iterations += 1;
        if iterations > max_iterations {
            return Err(Error::QpFailure("iteration limit reached".into()));
        }
        let mut p = None;
        let mut worst = -VIOLATION_TOLERANCE;
        for (i, row) in problem.inequalities.iter().enumerate() {
            let s = (row.rhs - row.dot(&x)) / row.rhs.abs().max(1.0);
            if s < worst && !work.contains(&(me + i)) {
                worst = s;
                p = Some(i);
            }
        }
        let Some(p) = p else { break };
        let row = &problem.inequalities[p];
        let mut u_plus = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iterations {
                return Err(Error::QpFailure("iteration limit reached".into()));
            }
            // constraint p in >= form: (-a)' x >= -b
            let d = fac.d_of(&row.coeffs, -1.0);
            let z = fac.z_of(&d);
            let r = fac.r_of(&d);
            let s_p = row.rhs - row.dot(&x);

            let mut t1 = f64::INFINITY;
            let mut l = None;
            for (k, (&c, &rk)) in work.iter().zip(&r).enumerate() {
                if c >= me && rk > 0.0 {
                    let ratio = u[k] / rk;
                    if ratio < t1 {
                        t1 = ratio;
                        l = Some(k);
                    }
                }
            }
            let zn: f64 = -row.coeffs.iter().map(|&(k, a)| z[k] * a).sum::<f64>();
            let t2 = if zn.abs() > DEPENDENCE_TOLERANCE { -s_p / zn } else { f64::INFINITY };
            let t = t1.min(t2);

            if t.is_infinite() {
                let mut conflict: Vec<usize> = vec![p];
                conflict.extend(work.iter().zip(&r).filter(|(&c, &rk)| c >= me && rk != 0.0).map(|(&c, _)| c - me));
                return Ok(Outcome::Infeasible(conflict));
            }
            if t2.is_infinite() {
                for (uj, rj) in u.iter_mut().zip(&r) {
                    *uj -= t * rj;
                }
                u_plus += t;
                let l = l.expect("finite partial step has a blocking constraint");
                work.remove(l);
                u.remove(l);
                fac.drop(l);
                continue;
            }

            x.axpy(t, &z, 1.0);
            f += t * zn * (0.5 * t + u_plus);
            for (uj, rj) in u.iter_mut().zip(&r) {
                *uj -= t * rj;
            }
            u_plus += t;

            if t2 <= t1 {
                if !fac.add(d) {
                    return Err(Error::QpFailure(format!("inequality {p} is linearly dependent")));
                }
                work.push(me + p);
                u.push(u_plus);
                break;
            }
            let l = l.expect("partial step has a blocking constraint");
            work.remove(l);
            u.remove(l);
            fac.drop(l);
        }
    }

    let mut duals = vec![0.0; mi];
    let mut equality_duals = vec![0.0; me];
    for (&c, &uc) in work.iter().zip(&u) {
        if c >= me {
            duals[c - me] = uc;
        } else {
            equality_duals[c] = -uc;
        }
    }
    let active: Vec<usize> = (0..mi)
        .filter(|&i| {
            let row = &problem.inequalities[i];
            row.rhs - row.dot(&x) <= ACTIVITY_TOLERANCE
        })
        .collect();

    let mut stationarity = &problem.hessian * &x + g;
    for (row, &lam) in problem.inequalities.iter().zip(&duals) {
        for &(k, a) in &row.coeffs {
            stationarity[k] += lam * a;
        }
    }
    for (row, &nu) in problem.equalities.iter().zip(&equality_duals) {
        for &(k, a) in &row.coeffs {
            stationarity[k] += nu * a;
        }
    }
    let kkt_residual = stationarity.amax() / (1.0 + g.amax());
    let objective = 0.5 * x.dot(&(&problem.hessian * &x)) + g.dot(&x);
    debug_assert!((objective - f).abs() <= 1e-6 * (1.0 + objective.abs()));

    Ok(Outcome::Solved(QpSolution { x, objective, active, duals, equality_duals, iterations, kkt_residual }))
}
