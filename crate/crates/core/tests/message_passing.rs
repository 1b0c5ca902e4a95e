use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvbi::mrf::{build_graph, spmp_run, BernoulliMessage, SpmpConfig, MSG_FLOOR};
use tvbi::prior::MrfParams;
use tvbi_oracle::ising_marginals;

fn transition(p01: f64, p10: f64) -> [[f64; 2]; 2] {
    [[1.0 - p01, p01], [p10, 1.0 - p10]]
}

fn random_unary(rng: &mut ChaCha8Rng, n: usize) -> Vec<BernoulliMessage> {
    (0..n).map(|_| BernoulliMessage::from_prob(rng.random_range(0.02..0.98))).collect()
}

fn pairs(u: &[BernoulliMessage]) -> Vec<[f64; 2]> {
    u.iter().map(|m| [m.m0, m.m1]).collect()
}

#[test]
fn trees_are_exact_within_edge_count_iterations() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..40 {
        let len = rng.random_range(2..14);
        let (rows, cols) = if rng.random_bool(0.5) { (1, len) } else { (len, 1) };
        let (pr, pc) = (
            (rng.random_range(0.02..0.98), rng.random_range(0.02..0.98)),
            (rng.random_range(0.02..0.98), rng.random_range(0.02..0.98)),
        );
        let params = MrfParams::new(pr.0, pr.1, pc.0, pc.1).unwrap();
        let unary = random_unary(&mut rng, rows * cols);
        let exact = ising_marginals(rows, cols, &pairs(&unary), transition(pr.0, pr.1), transition(pc.0, pc.1));
        let mut g = build_graph((rows, cols), &params, &unary).unwrap();
        let cfg = SpmpConfig { max_iters: g.edge_count(), damping: 0.0, tol: 0.0 };
        let r = spmp_run(&mut g, &cfg).unwrap();
        for (m, e) in r.marginals.iter().zip(&exact) {
            assert!((m.m1 - e).abs() < 1e-9, "{rows}x{cols}: {} vs {e}", m.m1);
        }
    }
}

#[test]
fn damped_and_undamped_runs_share_the_tree_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for damping in [0.1, 0.3, 0.7] {
        let params = MrfParams::new(0.2, 0.6, 0.4, 0.1).unwrap();
        let unary = random_unary(&mut rng, 9);
        let run = |d: f64| {
            let mut g = build_graph((9, 1), &params, &unary).unwrap();
            spmp_run(&mut g, &SpmpConfig { max_iters: 2000, damping: d, tol: 1e-14 }).unwrap()
        };
        let (a, b) = (run(0.0), run(damping));
        assert!(a.converged && b.converged);
        for (x, y) in a.marginals.iter().zip(&b.marginals) {
            assert!((x.m1 - y.m1).abs() < 1e-10);
        }
    }
}

#[test]
fn warm_restart_with_new_unaries_matches_cold_start() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = MrfParams::isotropic(0.1, 0.3).unwrap();
    let cfg = SpmpConfig { max_iters: 500, damping: 0.3, tol: 1e-13 };
    let first = random_unary(&mut rng, 10);
    let second = random_unary(&mut rng, 10);
    let mut warm = build_graph((1, 10), &params, &first).unwrap();
    spmp_run(&mut warm, &cfg).unwrap();
    warm.set_unary(&second).unwrap();
    let a = spmp_run(&mut warm, &cfg).unwrap();
    let mut cold = build_graph((1, 10), &params, &second).unwrap();
    let b = spmp_run(&mut cold, &cfg).unwrap();
    for (x, y) in a.marginals.iter().zip(&b.marginals) {
        assert!((x.m1 - y.m1).abs() < 1e-10);
    }
    assert!(warm.set_unary(&second[..9]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn messages_stay_normalized_and_marginal_is_extrinsic_times_unary(
        rows in 1usize..7,
        cols in 1usize..7,
        p in (0.001f64..0.999, 0.001f64..0.999, 0.001f64..0.999, 0.001f64..0.999),
        probs in prop::collection::vec(0.0f64..=1.0, 36),
        damping in 0.0f64..0.9,
    ) {
        let params = MrfParams::new(p.0, p.1, p.2, p.3).unwrap();
        let unary: Vec<_> = probs[..rows * cols].iter().map(|&q| BernoulliMessage::from_prob(q)).collect();
        let mut g = build_graph((rows, cols), &params, &unary).unwrap();
        let r = spmp_run(&mut g, &SpmpConfig { damping, ..Default::default() }).unwrap();
        for m in g.messages().chain(&r.extrinsic).chain(&r.marginals) {
            prop_assert!((m.m0 + m.m1 - 1.0).abs() < 1e-9);
            prop_assert!(m.m0 >= MSG_FLOOR && m.m1 >= MSG_FLOOR);
        }
        for ((m, e), u) in r.marginals.iter().zip(&r.extrinsic).zip(g.unary()) {
            let want = e.m1 * u.m1 / (e.m1 * u.m1 + e.m0 * u.m0);
            prop_assert!((m.m1 - want).abs() < 1e-12);
        }
    }
}
