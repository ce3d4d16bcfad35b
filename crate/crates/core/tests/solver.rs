//! The two-objective min-norm weight solver against brute-force search.

mod common;

use common::{grid_min, norm_at};
use dilemma_forge::admo::{combine, solve_pareto_weights, ParetoWeights};
use dilemma_forge::nn::{ParamVector, Segment};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pair(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let dim = rng.gen_range(1..=8);
    let scale = 10f64.powf(rng.gen_range(-2.0..1.0));
    let g1: Vec<f64> = (0..dim).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
    let g2: Vec<f64> = match rng.gen_range(0..4) {
        // nearly parallel and nearly opposite pairs stress the normalization
        0 => g1.iter().map(|v| -0.7 * v + 1e-3 * rng.gen_range(-1.0..1.0)).collect(),
        1 => g1.iter().map(|v| 1.3 * v + 1e-3 * rng.gen_range(-1.0..1.0)).collect(),
        _ => (0..dim).map(|_| scale * rng.gen_range(-1.0..1.0)).collect(),
    };
    (g1, g2)
}

fn random_floors(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let c1 = rng.gen_range(0.0..0.45);
    let c2 = rng.gen_range(0.0..0.45);
    (c1, c2)
}

#[test]
fn solver_matches_grid_search_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..1000 {
        let (g1, g2) = random_pair(&mut rng);
        let floors = random_floors(&mut rng);
        let ParetoWeights { alpha, .. } = solve_pareto_weights(&g1, &g2, floors);
        assert!((alpha.0 + alpha.1 - 1.0).abs() < 1e-12, "trial {trial}");
        assert!(
            alpha.0 >= floors.0 - 1e-12 && alpha.1 >= floors.1 - 1e-12,
            "trial {trial}: {alpha:?} {floors:?}"
        );
        let solver = norm_at(alpha.0, &g1, &g2);
        let grid = grid_min(&g1, &g2, floors.0, 1.0 - floors.1);
        assert!(
            (solver - grid).abs() <= 1e-6,
            "trial {trial}: solver {solver} grid {grid} alpha {alpha:?} floors {floors:?}"
        );
    }
}

#[test]
fn interior_solutions_are_common_descent_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut interior = 0;
    for trial in 0..1000 {
        let (g1, g2) = random_pair(&mut rng);
        let floors = random_floors(&mut rng);
        let w = solve_pareto_weights(&g1, &g2, floors);
        let is_interior = !w.degenerate && w.alpha.0 > floors.0 + 1e-9 && w.alpha.1 > floors.1 + 1e-9;
        if !is_interior {
            continue;
        }
        interior += 1;
        let g: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| w.alpha.0 * a + w.alpha.1 * b).collect();
        let sq: f64 = g.iter().map(|v| v * v).sum();
        let scale = g1.iter().chain(&g2).map(|v| v * v).sum::<f64>();
        for (name, gi) in [("g_inc", &g1), ("g_pol", &g2)] {
            let inner: f64 = g.iter().zip(gi.iter()).map(|(a, b)| a * b).sum();
            assert!(inner >= -1e-9 * scale, "trial {trial}: <g*, {name}> = {inner}");
            assert!(
                (inner - sq).abs() <= 1e-8 * scale,
                "trial {trial}: <g*, {name}> = {inner}, |g*|^2 = {sq}"
            );
        }
    }
    assert!(
        interior > 100,
        "only {interior} interior cases; the test would be vacuous"
    );
}

fn as_param(values: Vec<f64>) -> ParamVector {
    let layout = vec![Segment {
        name: "g".into(),
        offset: 0,
        shape: (values.len(), 1),
    }];
    ParamVector::from_values(values, std::sync::Arc::new(layout))
}

proptest! {
    #[test]
    fn combined_direction_never_exceeds_the_endpoints(
        g1 in prop::collection::vec(-5.0f64..5.0, 1..6),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g2: Vec<f64> = g1.iter().map(|_| rng.gen_range(-5.0..5.0)).collect();
        let floors = random_floors(&mut rng);
        let w = solve_pareto_weights(&g1, &g2, floors);
        let g = combine(w.alpha, &as_param(g1.clone()), &as_param(g2.clone()));
        let at_lo = norm_at(floors.0, &g1, &g2);
        let at_hi = norm_at(1.0 - floors.1, &g1, &g2);
        prop_assert!(g.norm() <= at_lo.max(at_hi) + 1e-9);
        prop_assert!((g.norm() - norm_at(w.alpha.0, &g1, &g2)).abs() < 1e-9);
    }

    #[test]
    fn solver_is_symmetric_under_swapping_objectives(
        g1 in prop::collection::vec(-5.0f64..5.0, 1..6),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g2: Vec<f64> = g1.iter().map(|_| rng.gen_range(-5.0..5.0)).collect();
        let floors = random_floors(&mut rng);
        let a = solve_pareto_weights(&g1, &g2, floors);
        let b = solve_pareto_weights(&g2, &g1, (floors.1, floors.0));
        prop_assert!((norm_at(a.alpha.0, &g1, &g2) - norm_at(b.alpha.0, &g2, &g1)).abs() < 1e-9);
    }
}
