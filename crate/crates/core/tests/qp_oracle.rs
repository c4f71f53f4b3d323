mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shmpc::qp::{solve_qp, QpProblem};
use shmpc::Error;

fn only(problem: &QpProblem, rows: &[usize]) -> QpProblem {
    QpProblem { inequalities: rows.iter().map(|&i| problem.inequalities[i].clone()).collect(), ..problem.clone() }
}

#[test]
fn matches_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut solved, mut infeasible) = (0, 0);
    for _ in 0..400 {
        let n = rng.gen_range(2..=4);
        let m = rng.gen_range(0..=8);
        let e = rng.gen_range(0..=1);
        let problem = common::random_qp(&mut rng, n, m, e);
        match (common::brute_force_qp(&problem), solve_qp(&problem)) {
            (Some((x, obj)), Ok(sol)) => {
                solved += 1;
                assert!(common::close(sol.objective, obj, 1e-7), "objective {} vs {obj}", sol.objective);
                // strict convexity makes the minimizer unique
                assert!((&sol.x - &x).amax() < 1e-6, "{} vs {}", sol.x, x);
            }
            (None, Err(Error::InfeasibleQp { conflict })) => {
                infeasible += 1;
                assert!(common::brute_force_qp(&only(&problem, &conflict)).is_none());
                for drop in 0..conflict.len() {
                    let mut rest = conflict.clone();
                    rest.remove(drop);
                    assert!(common::brute_force_qp(&only(&problem, &rest)).is_some(), "{conflict:?} is reducible");
                }
            }
            (oracle, ours) => panic!("oracle {oracle:?} vs solver {ours:?}"),
        }
    }
    assert!(solved > 100 && infeasible > 20, "{solved} solved, {infeasible} infeasible");
}
