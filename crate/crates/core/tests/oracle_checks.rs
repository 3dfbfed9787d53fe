//! Library kernels against the brute-force oracles.

use lraccel_core::bench::count_multiplies;
use lraccel_core::decompose::{build_layers, solve_linear, solve_z, SolverKind, Decomposition};
use lraccel_core::linalg::{reduced_rank_regression, regression_error, sym_eig};
use lraccel_core::sampler::SampleSet;
use lraccel_core::spatial::spatial_decompose;
use lraccel_core::tensor::{conv_forward, Activation, ConvLayer, FeatureMap, Layer, NetSpec, Shape};
use lraccel_oracles::{
    conv_count, grid_z_oracle, naive_conv, pair_count, pgd_rrr_oracle, triple_count, z_objective, ConvGeometry, Mat,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn to_mat(m: &DMatrix<f64>) -> Mat {
    Mat::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
}

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_forward_matches_naive_conv(
        kh in 1usize..4, kw in 1usize..4, c in 1usize..4, d in 1usize..7,
        sh in 1usize..3, sw in 1usize..3, ph in 0usize..2, pw in 0usize..2,
        extra_h in 0usize..6, extra_w in 0usize..6, relu in any::<bool>(), seed in any::<u64>(),
    ) {
        let (h, w) = (kh + extra_h, kw + extra_w);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<f32> = (0..d * (kh * kw * c + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let act = if relu { Activation::Relu } else { Activation::Identity };
        let layer = ConvLayer::new(kh, kw, c, d, weights.clone()).unwrap()
            .with_stride(sh, sw).with_padding(ph, pw).with_activation(act);
        let fm = FeatureMap::from_fn(Shape::new(c, h, w), |_, _, _| rng.random_range(-1.0..1.0));
        let got = conv_forward(&fm, &layer).unwrap();
        let g = ConvGeometry { kh, kw, c, d, stride: (sh, sw), pad: (ph, pw), relu };
        let want = naive_conv(fm.data(), h, w, &weights, &g);
        let (ho, wo) = g.output_hw(h, w);
        prop_assert_eq!(got.shape(), Shape::new(d, ho, wo));
        for (a, b) in got.data().iter().zip(&want) {
            prop_assert!((*a as f64 - b).abs() <= 1e-5 * (1.0 + b.abs()), "{} vs {}", a, b);
        }
    }

    #[test]
    fn solve_z_is_never_worse_than_the_grid(y in -8.0f64..8.0, yp in -8.0f64..8.0, lambda in 0.001f64..10.0) {
        let z = solve_z(y, yp, lambda);
        let (_, grid) = grid_z_oracle(y, yp, lambda);
        prop_assert!(z_objective(y, yp, lambda, z) <= grid + 1e-12);
    }

    #[test]
    fn rrr_beats_random_rank_constrained_matrices(seed in any::<u64>(), d_prime in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = uniform(8, 50, &mut rng);
        let z = uniform(8, 50, &mut rng) + 0.5 * &y;
        let sol = reduced_rank_regression(&y, &z, d_prime, 0.0).unwrap();
        let best = regression_error(&y, &z, &sol.m);
        for _ in 0..50 {
            let p = uniform(8, d_prime, &mut rng);
            let q = uniform(8, d_prime, &mut rng);
            let scale = rng.random_range(0.01..1.0);
            let cand = &sol.m + scale * (&p * q.transpose());
            // keep the candidate at rank d′ by truncating
            let svd = cand.svd(true, true);
            let mut s = svd.singular_values.clone();
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
            for &i in &idx[d_prime..] {
                s[i] = 0.0;
            }
            let trunc = svd.u.unwrap() * DMatrix::from_diagonal(&s) * svd.v_t.unwrap();
            prop_assert!(regression_error(&y, &z, &trunc) >= best - 1e-9 * best);
        }
    }
}

#[test]
fn solve_z_matches_grid_on_reference_cases() {
    for (y, yp, lambda, want) in [(-1.0, -2.0, 0.5, -2.0), (3.0, 3.0, 1.0, 3.0), (2.0, -1.0, 1.0, -1.0)] {
        let (grid_z, _) = grid_z_oracle(y, yp, lambda);
        assert!((grid_z - want).abs() < 1e-4);
        assert!((solve_z(y, yp, lambda) - want).abs() < 1e-12);
    }
}

#[test]
fn rrr_matches_projected_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..10 {
        let d_prime = 1 + trial % 7;
        let y = uniform(8, 50, &mut rng);
        let z = uniform(8, 50, &mut rng) + &y;
        let sol = reduced_rank_regression(&y, &z, d_prime, 0.0).unwrap();
        let ours = regression_error(&y, &z, &sol.m);
        let oracle = pgd_rrr_oracle(&to_mat(&y), &to_mat(&z), d_prime, 3, trial as u64);
        assert!(ours <= oracle * (1.0 + 1e-4), "trial {trial}: {ours} vs {oracle}");
        assert!((ours - oracle).abs() <= 1e-4 * oracle, "trial {trial}: {ours} vs {oracle}");
    }
}

#[test]
fn rrr_with_z_equal_y_is_pca_tail_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let y = uniform(6, 40, &mut rng);
    let eig = sym_eig(&(&y * y.transpose())).unwrap();
    for d_prime in 1..=6 {
        let sol = reduced_rank_regression(&y, &y, d_prime, 0.0).unwrap();
        let tail: f64 = eig.values.iter().skip(d_prime).sum();
        let err = regression_error(&y, &y, &sol.m);
        assert!((err - tail).abs() < 1e-9 * (1.0 + tail), "{d_prime}: {err} vs {tail}");
        let oracle = pgd_rrr_oracle(&to_mat(&y), &to_mat(&y), d_prime, 1, 0);
        assert!((oracle - tail).abs() < 1e-6 * (1.0 + tail));
    }
}

#[test]
fn decomposed_counts_match_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (k, c, d, d_prime, hw) = (3, 4, 8, 3, 7);
    let w: Vec<f32> = (0..d * (k * k * c + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
    let layer = ConvLayer::square(k, c, d, w).unwrap().with_padding(1, 1);
    let shape = Shape::new(c, hw, hw);

    let original = NetSpec::new(shape, vec![Layer::conv("a", layer.clone())]).unwrap();
    assert_eq!(count_multiplies(&original, None).unwrap()[0].multiplies, conv_count(k, k, c, d, hw, hw));

    let y = uniform(d, 40, &mut rng);
    let dec: Decomposition = solve_linear(&SampleSet::from_responses("a", y), d_prime).unwrap();
    let (a, b) = build_layers(&layer, &dec).unwrap();
    let pair = NetSpec::new(shape, vec![Layer::conv("a.lr0", a), Layer::conv("a.lr1", b)]).unwrap();
    let total: u64 = count_multiplies(&pair, None).unwrap().iter().map(|c| c.multiplies).sum();
    assert_eq!(total, pair_count(k, c, d, d_prime, hw * hw));

    let d_dprime = 5;
    let f = spatial_decompose(&layer, d_dprime).unwrap();
    let dec = Decomposition { solver: SolverKind::Linear, ..solve_linear(&SampleSet::from_responses("a", uniform(d, 40, &mut rng)), d_prime).unwrap() };
    let (h, pw) = build_layers(&f.horizontal, &dec).unwrap();
    let triple = NetSpec::new(
        shape,
        vec![Layer::conv("a.v", f.vertical), Layer::conv("a.h", h), Layer::conv("a.pw", pw)],
    )
    .unwrap();
    let total: u64 = count_multiplies(&triple, None).unwrap().iter().map(|c| c.multiplies).sum();
    assert_eq!(total, triple_count(k, c, d, d_prime, d_dprime, hw * hw));
}

#[test]
fn linear_decomposition_output_matches_naive_reference() {
    // the two-layer replacement against r(M·W·x + b) computed by the naive conv
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (k, c, d) = (3, 3, 6);
    let w: Vec<f32> = (0..d * (k * k * c + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
    let layer = ConvLayer::square(k, c, d, w.clone()).unwrap().with_padding(1, 1);
    let dec = solve_linear(&SampleSet::from_responses("a", uniform(d, 30, &mut rng)), 4).unwrap();
    let (a, b) = build_layers(&layer, &dec).unwrap();
    let fm = FeatureMap::from_fn(Shape::new(c, 5, 5), |_, _, _| rng.random_range(-1.0..1.0));
    let got = conv_forward(&conv_forward(&fm, &a).unwrap(), &b).unwrap();

    let g = ConvGeometry { kh: k, kw: k, c, d, stride: (1, 1), pad: (1, 1), relu: false };
    let y = naive_conv(fm.data(), 5, 5, &w, &g);
    let m = dec.m();
    for pos in 0..25 {
        let yv = DVector::from_fn(d, |o, _| y[o * 25 + pos]);
        let want = &m * yv + &dec.b;
        for o in 0..d {
            let v = want[o].max(0.0);
            assert!((got.data()[o * 25 + pos] as f64 - v).abs() < 1e-4 * (1.0 + v.abs()));
        }
    }
}
