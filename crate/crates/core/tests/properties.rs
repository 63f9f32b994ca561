use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fup_lab::cantor::{fup_norm, hs_closed_form, minor_test, CantorSpec};
use fup_lab::discretization::{check_tree, perturbed_discretization};
use fup_lab::dolgopyat::{compute_constants, contraction_step, twisting_norms, TileRef};
use fup_lab::fio::{
    fup_grid_norm, operator_norm, thicken_with, FioOperator, GridFup, OperatorMatrix, ThickenOptions, ThickenedSet,
};
use fup_lab::linalg::{LinearOperator, C64};
use fup_lab::measures::{make_cantor_measure, random_cloud, standard_phase_dim, Phase};
use fup_lab::schottky::{
    box_scales, circle_margin, direction_grid, figure_disks, make_schottky, nonconcentration_constant,
    sample_limit_set, Disk,
};
use fup_lab::Budget;

fn digit_set(m: u32) -> impl Strategy<Value = Vec<u32>> {
    proptest::sample::subsequence((0..m).collect::<Vec<_>>(), 1..=(m as usize).min(3))
}

fn line_spec() -> impl Strategy<Value = CantorSpec> {
    (3u32..=5)
        .prop_flat_map(|m| (Just(m), digit_set(m), digit_set(m), 1u32..=3))
        .prop_map(|(m, a, b, k)| CantorSpec::line(m, &a, &b, k))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hs_norm_matches_closed_form(spec in line_spec()) {
        let rep = fup_norm(&spec, &Budget::default()).unwrap();
        prop_assert!((rep.hs - hs_closed_form(&spec)).abs() <= 1e-10);
    }

    #[test]
    fn norm_is_below_one_and_hs(spec in line_spec()) {
        let rep = fup_norm(&spec, &Budget::default()).unwrap();
        prop_assert!(rep.r <= rep.hs.min(1.0) + 1e-10, "r = {} hs = {}", rep.r, rep.hs);
        prop_assert!(rep.r > 0.0);
    }

    #[test]
    fn orthogonal_alphabets_give_rank_one_matrices(
        (m, a, b) in (3u32..=6).prop_flat_map(|m| (Just(m), digit_set(m), digit_set(m)))
    ) {
        let spec = CantorSpec::line(m, &a, &b, 1);
        if !minor_test(&spec).unwrap().nonorthogonal {
            let rep = fup_norm(&spec, &Budget::default()).unwrap();
            prop_assert!((rep.r - rep.hs).abs() <= 1e-10 * rep.hs.max(1.0));
        }
    }

    #[test]
    fn two_levels_in_base_m_are_one_level_in_base_m_squared(
        (m, a, b) in (3u32..=4).prop_flat_map(|m| (Just(m), digit_set(m), digit_set(m))),
        k in 1u32..=2,
    ) {
        let spread = |s: &[u32]| {
            let mut out: Vec<u32> = s.iter().flat_map(|hi| s.iter().map(move |lo| hi * m + lo)).collect();
            out.sort_unstable();
            out
        };
        let fine = fup_norm(&CantorSpec::line(m, &a, &b, 2 * k), &Budget::default()).unwrap().r;
        let coarse = fup_norm(&CantorSpec::line(m * m, &spread(&a), &spread(&b), k), &Budget::default()).unwrap().r;
        prop_assert!((fine - coarse).abs() <= 1e-10, "{fine} vs {coarse}");
    }

    #[test]
    fn phases_pass_finite_difference_checks(seed in any::<u64>()) {
        for phase in [standard_phase_dim(1), standard_phase_dim(2), Phase::sin_cos_plus_bilinear()] {
            let rep = phase.finite_difference_check(16, seed);
            prop_assert!(rep.max_relative_error < 1e-5, "{}: {}", phase.name, rep.max_relative_error);
            prop_assert!(rep.c0_bound_holds);
        }
    }

    #[test]
    fn operator_norm_is_bounded_by_frobenius(seed in any::<u64>(), n in 2usize..40, m in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = |k: usize, rng: &mut ChaCha8Rng| (0..k).map(|_| vec![rng.gen::<f64>()]).collect::<Vec<_>>();
        let rows = pts(n, &mut rng);
        let cols = pts(m, &mut rng);
        let rw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
        let cw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..2.0)).collect();
        let base = DMatrix::from_fn(n, m, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let mat = OperatorMatrix::from_parts(rows, rw, cols, cw, base, 0.1).unwrap();
        let sigma = operator_norm(&mat).unwrap().sigma;
        prop_assert!(sigma <= mat.frobenius() * (1.0 + 1e-12));
        prop_assert!(sigma >= mat.frobenius() / (n.min(m) as f64).sqrt() * (1.0 - 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_clouds_give_valid_trees(seed in any::<u64>(), d in 1usize..=2, count in 5usize..60) {
        let mu = random_cloud(d, count, 1e-9, seed).unwrap();
        let tree = perturbed_discretization(&mu, 1000, 2).unwrap();
        let rep = check_tree(&tree);
        prop_assert!(rep.all_passed(), "{:?}", rep.failures);
    }

    #[test]
    fn grid_norm_is_translation_invariant(shift in -20i64..20, seed in any::<u64>()) {
        let h = 1.0 / 64.0;
        let step = h / 4.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.gen::<f64>()]).collect();
        // lattice shifts keep the grid points and the set boundaries aligned
        let moved: Vec<Vec<f64>> = centers.iter().map(|c| vec![c[0] + shift as f64 * step]).collect();
        let r = 1.01 * h;
        let a = ThickenedSet::new(centers.clone(), r, None).unwrap();
        let b = ThickenedSet::new(moved, r, None).unwrap();
        let freq = ThickenedSet::new(centers, r, None).unwrap();
        let n0 = GridFup::new(&freq, &a, h, step, &Budget::default()).unwrap().norm().unwrap().sigma;
        let n1 = GridFup::new(&freq, &b, h, step, &Budget::default()).unwrap().norm().unwrap().sigma;
        prop_assert!((n0 - n1).abs() <= 1e-8, "{n0} vs {n1}");
    }

    #[test]
    fn circle_margin_is_invariant_under_rigid_motions(angle in 0.0..std::f64::consts::TAU, tx in -5.0..5.0f64, ty in -5.0..5.0f64) {
        let disks = figure_disks();
        let (s, c) = angle.sin_cos();
        let moved: Vec<Disk> = disks
            .iter()
            .map(|d| {
                let (x, y) = (d.center.re, d.center.im);
                Disk::new(c * x - s * y + tx, s * x + c * y + ty, d.radius).unwrap()
            })
            .collect();
        let m0 = circle_margin(&disks).unwrap().margin;
        let m1 = circle_margin(&moved).unwrap().margin;
        prop_assert!((m0 - m1).abs() <= 1e-6 * m0.max(1.0), "{m0} vs {m1}");
    }
}

#[test]
fn nonconcentration_decreases_with_more_directions_and_scales() {
    let g = make_schottky(&figure_disks()).unwrap();
    let limit = sample_limit_set(&g, 5, &Budget::default()).unwrap();
    let eps: Vec<f64> = box_scales(&limit)
        .into_iter()
        .filter(|e| *e >= 2.0 * limit.measure.scale_floor)
        .collect();
    assert!(eps.len() >= 2);
    let c = |e: &[f64], n: usize| nonconcentration_constant(&limit.measure, e, &direction_grid(n)).unwrap().value;
    let c8 = c(&eps, 8);
    let c16 = c(&eps, 16);
    let c32 = c(&eps, 32);
    assert!(c16 <= c8 && c32 <= c16, "{c8} {c16} {c32}");
    assert!(c32 > 0.0);
    let coarse = c(&eps[..1], 32);
    assert!(c32 <= coarse);
}

#[test]
fn contraction_chain_and_twisting_hold_for_random_inputs() {
    let budget = Budget::default();
    let mu = make_cantor_measure(&CantorSpec::line(3, &[0, 2], &[0, 2], 9), &budget).unwrap();
    let tree = perturbed_discretization(&mu, 1000, 0).unwrap();
    let phase = Phase::dot(1, 1.0);
    let h = 3f64.powi(-7);
    let constants = compute_constants(0.1, 2.0, 2.0, 1, 1.0).unwrap();
    let root = TileRef::new(0, 0);
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: Vec<C64> = (0..mu.len())
            .map(|_| C64::from_polar(rng.gen_range(0.0..1.0), rng.gen_range(0.0..std::f64::consts::TAU)))
            .collect();
        let rep = contraction_step(&tree, &tree, &phase, h, root, root, &f, &constants).unwrap();
        assert!(rep.chain_holds(1e-9), "seed {seed}: {} {} {}", rep.lhs, rep.middle, rep.r);
        for (lhs, rhs) in twisting_norms(&tree, &tree, &phase, h, root, root, &f, constants.theta).unwrap() {
            assert!(lhs <= rhs * (1.0 + 1e-9), "seed {seed}: twisted {lhs} > {rhs}");
        }
    }
}

#[test]
fn grid_operator_adjoint_is_consistent() {
    let h = 1.0 / 32.0;
    let set = ThickenedSet::new(vec![vec![0.1], vec![0.6]], h, None).unwrap();
    let op = GridFup::new(&set, &set, h, h / 4.0, &Budget::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<C64> = (0..op.ncols()).map(|_| C64::new(rng.gen(), rng.gen())).collect();
    let y: Vec<C64> = (0..op.nrows()).map(|_| C64::new(rng.gen(), rng.gen())).collect();
    let mut ax = vec![C64::new(0.0, 0.0); op.nrows()];
    let mut aty = vec![C64::new(0.0, 0.0); op.ncols()];
    op.apply(&x, &mut ax);
    op.apply_adjoint(&y, &mut aty);
    let lhs: C64 = ax.iter().zip(&y).map(|(a, b)| a * b.conj()).sum();
    let rhs: C64 = x.iter().zip(&aty).map(|(a, b)| a * b.conj()).sum();
    assert!((lhs - rhs).norm() <= 1e-10 * lhs.norm().max(1.0));
}

#[test]
fn grid_norm_matches_measure_operator_with_gaussian_normalisation() {
    // The h-Fourier kernel carries (2 pi h)^(-d/2) and the thickened measure
    // carries h^(delta - d), so the two norms differ by h^(d/2 - delta)(2 pi)^(-d/2).
    let budget = Budget::default();
    let delta = 2f64.ln() / 3f64.ln();
    let mu = make_cantor_measure(&CantorSpec::line(3, &[0, 2], &[0, 2], 5), &budget).unwrap();
    let h = 3f64.powi(-5);
    let opts = ThickenOptions {
        atom_samples: Some(1024),
        ..Default::default()
    };
    let th = thicken_with(&mu, h, delta, &opts).unwrap();
    let grid = fup_grid_norm(&th.set, &th.set, h, h / 4.0, &budget).unwrap().norm;
    let fio = FioOperator::new(&th.measure, &th.measure, &Phase::dot(1, 1.0), h)
        .unwrap()
        .norm(1e-10, 1)
        .unwrap()
        .sigma;
    let predicted = h.powf(0.5 - delta) * (2.0 * std::f64::consts::PI).powf(-0.5) * fio;
    assert!((grid / predicted - 1.0).abs() < 0.05, "grid {grid} vs {predicted}");
}
