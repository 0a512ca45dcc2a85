//! Solver-level properties of `EW_lambda` on small instances.

use std::time::{Duration, Instant};

use ew_core::ew::{ew_exact_small, solve_ew_lambda, solve_ew_lambda_multistart, EwConfig, EwInit};
use ew_core::gw::{gw_approximation, GwOptions};
use ew_core::spaces::euclidean_grid;
use ew_core::{DistanceMatrix, MmSpace, ReferenceSpace, SimplexWeights};
use proptest::prelude::*;

fn line(p: &[f64]) -> DistanceMatrix {
    DistanceMatrix::from_fn(p.len(), |i, j| (p[i] - p[j]).abs()).unwrap()
}

fn planar(p: &[(f64, f64)]) -> DistanceMatrix {
    DistanceMatrix::from_fn(p.len(), |i, j| (p[i].0 - p[j].0).hypot(p[i].1 - p[j].1)).unwrap()
}

fn weights(raw: &[f64]) -> SimplexWeights {
    let s: f64 = raw.iter().sum();
    SimplexWeights::new(raw.iter().map(|w| w / s).collect()).unwrap()
}

fn starts(count: u64) -> Vec<EwInit> {
    let mut inits = vec![EwInit::Product, EwInit::GwApproximation];
    inits.extend((0..count).map(|seed| EwInit::Perturbed { seed, scale: 1.0 }));
    inits
}

fn cloud(max_len: usize) -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.1..1.0f64), 2..=max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn swapping_inputs_preserves_objective(a in cloud(5), b in cloud(5), zc in cloud(7)) {
        // Scattered Z: on a symmetric grid the product start is a symmetric
        // saddle and roundoff decides which way each orientation breaks.
        let zpts: Vec<(f64, f64)> = zc.iter().map(|p| (p.0, p.1)).collect();
        let z = ReferenceSpace::custom(planar(&zpts));
        let space = |c: &[(f64, f64, f64)]| {
            let pts: Vec<(f64, f64)> = c.iter().map(|p| (p.0, p.1)).collect();
            let w: Vec<f64> = c.iter().map(|p| p.2).collect();
            MmSpace::new(planar(&pts), weights(&w)).unwrap()
        };
        let (x1, x2) = (space(&a), space(&b));
        let mut cfg = EwConfig::new(1.0, 1e-2).unwrap();
        cfg.bcd_iters = 100;
        let fwd = solve_ew_lambda(&x1, &x2, &z, &cfg).unwrap();
        let bwd = solve_ew_lambda(&x2, &x1, &z, &cfg).unwrap();
        let settled = |r: &ew_core::ew::EmbedResult| r.converged && r.sinkhorn_converged;
        prop_assume!(settled(&fwd) && settled(&bwd));
        prop_assert!((fwd.objective - bwd.objective).abs() <= 1e-6,
            "{} vs {}", fwd.objective, bwd.objective);
    }
}

/// Unevenly spaced line on which each input embeds isometrically in exactly
/// one way.
fn uneven() -> (MmSpace, MmSpace, ReferenceSpace) {
    let zp: Vec<f64> = [0.0, 1.0, 3.0, 7.0, 8.0, 12.0].iter().map(|v| v / 12.0).collect();
    let z = ReferenceSpace::custom(line(&zp));
    let x1 = MmSpace::new(line(&[zp[0], zp[1], zp[2], zp[3]]), weights(&[0.1, 0.2, 0.3, 0.4])).unwrap();
    let x2 = MmSpace::new(line(&[zp[1], zp[2], zp[3], zp[4]]), weights(&[0.4, 0.1, 0.2, 0.3])).unwrap();
    (x1, x2, z)
}

#[test]
fn lambda_sweep_approaches_exact_value_with_vanishing_penalty() {
    let (x1, x2, z) = uneven();
    let exact = ew_exact_small(&x1, &x2, &z).unwrap();
    let eps = 1e-3;
    let mut previous = None;
    let mut penalties = Vec::new();
    for lambda in [1.0, 10.0, 100.0, 1000.0] {
        let mut cfg = EwConfig::new(lambda, eps).unwrap();
        cfg.bcd_iters = 60;
        cfg.sinkhorn_max_iter = 10_000;
        let r = solve_ew_lambda_multistart(&x1, &x2, &z, &cfg, &starts(32), previous.as_ref()).unwrap();
        assert!(
            r.objective.sqrt() <= exact + eps.sqrt(),
            "lambda {lambda}: sqrt F = {} vs exact {exact}",
            r.objective.sqrt()
        );
        penalties.push(r.terms.gw1 + r.terms.gw2);
        previous = Some(r.plan);
    }
    assert!(penalties.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{penalties:?}");
    assert!(*penalties.last().unwrap() < 1e-3, "{penalties:?}");
}

#[test]
fn gw_approximation_of_embedded_subset_improves_as_epsilon_shrinks() {
    let zp: Vec<f64> = [0.0, 1.0, 4.0, 6.0, 10.0].iter().map(|v| v / 10.0).collect();
    let z = ReferenceSpace::custom(line(&zp));
    let x = MmSpace::new(line(&[zp[1], zp[2], zp[4]]), weights(&[0.2, 0.5, 0.3])).unwrap();
    let objectives: Vec<f64> = [1e-1, 1e-2, 1e-3]
        .iter()
        .map(|&eps| gw_approximation(&x, &z, &GwOptions::new(eps)).unwrap().objective)
        .collect();
    assert!(objectives.windows(2).all(|w| w[1] < w[0]), "{objectives:?}");
    assert!(objectives[2] < 1e-3, "{objectives:?}");
}

/// Fastest of a few runs of one fixed-work solve.
fn timed_solve(n: usize, m: usize) -> Duration {
    let pts = |count: usize, offset: f64| -> Vec<(f64, f64)> {
        (0..count)
            .map(|i| {
                let t = i as f64 / count as f64 + offset;
                (t, (7.0 * t).sin() * 0.3)
            })
            .collect()
    };
    let x1 = MmSpace::new(planar(&pts(n, 0.0)), SimplexWeights::uniform(n)).unwrap();
    let x2 = MmSpace::new(planar(&pts(n, 0.01)), SimplexWeights::uniform(n)).unwrap();
    let side = (m as f64).sqrt().round() as usize;
    assert_eq!(side * side, m);
    let z = euclidean_grid(&[(0.0, 1.0), (-0.5, 0.5)], &[side, side]).unwrap();
    let mut cfg = EwConfig::new(1.0, 1e-1).unwrap();
    cfg.bcd_iters = 3;
    // Unreachable tolerance with a small cap fixes the Sinkhorn work per half-step.
    cfg.sinkhorn_tol = 1e-300;
    cfg.sinkhorn_max_iter = 5;
    (0..3)
        .map(|_| {
            let t = Instant::now();
            solve_ew_lambda(&x1, &x2, &z, &cfg).unwrap();
            t.elapsed()
        })
        .min()
        .unwrap()
}

#[test]
fn doubling_reference_size_is_at_most_quadratic() {
    let n = 30;
    // Warm up allocator and thread pool.
    timed_solve(n, 64);
    let small = timed_solve(n, 196);
    let large = timed_solve(n, 400);
    let ratio = large.as_secs_f64() / small.as_secs_f64();
    let growth = 400.0 / 196.0;
    assert!(
        ratio <= 4.5 * (growth / 2.0f64).powi(2),
        "m 196 -> 400: {small:?} -> {large:?} (x{ratio:.2})"
    );
}

#[test]
fn multistart_keeps_the_best_start() {
    let (x1, x2, z) = uneven();
    let cfg = EwConfig::new(10.0, 1e-2).unwrap();
    let inits = starts(4);
    let best = solve_ew_lambda_multistart(&x1, &x2, &z, &cfg, &inits, None).unwrap();
    for init in inits {
        let mut c = cfg.clone();
        c.init = init;
        assert!(best.objective <= solve_ew_lambda(&x1, &x2, &z, &c).unwrap().objective);
    }
    assert!(solve_ew_lambda_multistart(&x1, &x2, &z, &cfg, &[], None).is_err());
}

#[test]
fn warm_start_from_converged_plan_stays_put() {
    let (x1, x2, z) = uneven();
    let mut cfg = EwConfig::new(10.0, 1e-2).unwrap();
    cfg.bcd_iters = 80;
    let first = solve_ew_lambda(&x1, &x2, &z, &cfg).unwrap();
    let again = ew_core::ew::solve_ew_lambda_from(&x1, &x2, &z, &cfg, &first.plan).unwrap();
    assert!(again.objective <= first.objective + 1e-9);
}
