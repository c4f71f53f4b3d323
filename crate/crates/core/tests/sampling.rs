use proptest::prelude::*;

use shmpc::uncertainty::{markov_chain_modes, sample_trajectories, ObstacleModel};

fn models(sigma: f64, count: usize) -> Vec<ObstacleModel> {
    (0..count).map(|j| ObstacleModel::constant_velocity([j as f64, 1.0], [0.5, -0.2], [sigma, sigma])).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn seed_fixes_the_draw(seed in any::<u64>(), s in 1usize..40, m in 1usize..4, n in 1usize..8) {
        let a = sample_trajectories(&models(0.3, m), n, s, 0.2, seed).unwrap();
        let b = sample_trajectories(&models(0.3, m), n, s, 0.2, seed).unwrap();
        for id in a.ids() {
            for j in 0..m {
                for k in 1..=n {
                    prop_assert_eq!(a.position(id, j, k), b.position(id, j, k));
                }
            }
        }
        prop_assert_eq!((a.len(), a.obstacle_count(), a.horizon()), (s, m, n));
        prop_assert!(a.ids().all(|id| !a.is_removed(id)));
    }

    #[test]
    fn prefix_of_a_larger_draw(seed in any::<u64>(), s in 1usize..30, extra in 1usize..30) {
        // scenario i depends only on (seed, i)
        let small = sample_trajectories(&models(0.3, 2), 5, s, 0.2, seed).unwrap();
        let large = sample_trajectories(&models(0.3, 2), 5, s + extra, 0.2, seed).unwrap();
        for id in small.ids() {
            for j in 0..2 {
                for k in 1..=5 {
                    prop_assert_eq!(small.position(id, j, k), large.position(id, j, k));
                }
            }
        }
    }

    #[test]
    fn zero_noise_follows_the_mean(seed in any::<u64>(), vx in -2.0..2.0f64, vy in -2.0..2.0f64) {
        let m = ObstacleModel::constant_velocity([1.0, -1.0], [vx, vy], [0.0, 0.0]);
        let set = sample_trajectories(&[m], 6, 5, 0.2, seed).unwrap();
        for id in set.ids() {
            for k in 1..=6 {
                let p = set.position(id, 0, k);
                let t = 0.2 * k as f64;
                prop_assert!((p.x - (1.0 + vx * t)).abs() < 1e-12 && (p.y - (-1.0 + vy * t)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mode_probabilities_sum_to_one(pc in 0.0..=1.0f64, n in 1usize..40) {
        let modes = markov_chain_modes(pc, n);
        prop_assert_eq!(modes.len(), n + 1);
        prop_assert!((modes.iter().map(|m| m.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn step_variance_grows_linearly() {
    let (s, dt, sigma) = (40_000, 0.2, 0.3);
    let set = sample_trajectories(&models(sigma, 1), 10, s, dt, 9).unwrap();
    for k in [1, 5, 10] {
        let xs: Vec<f64> = set.ids().map(|id| set.position(id, 0, k).x).collect();
        let mean = xs.iter().sum::<f64>() / s as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (s - 1) as f64;
        let expected = k as f64 * sigma * sigma * dt * dt;
        // the sample variance has standard error expected * sqrt(2 / (s - 1))
        let se = expected * (2.0 / (s - 1) as f64).sqrt();
        assert!((var - expected).abs() < 5.0 * se, "step {k}: {var} vs {expected}");
    }
}
