mod common;

use fmm2d::covariance::{decompose, eval_c, fit_covariance, CovarianceConfig, ResidualTensor};
use fmm2d::fixed::smooth_fit;
use fmm2d::sim::{generate, Scenario, SimulationConfig};
use fmm2d::grid::{design_matrix_at, load_long_csv, write_long_csv, CsvSchema};
use fmm2d::inference::{bands, pointwise_bands, variance_dense, variance_fast, PCB_MULTIPLIER};
use fmm2d::pipeline::with_workers;
use fmm2d::pointwise::fit_pointwise;
use fmm2d::reduction::{collapse_weights, reduce_surface, Axis, ReductionWeights};
use fmm2d::sim::{band_metrics, ise};
use fmm2d::smooth::{axis_spec, SandwichSmoother, SmootherConfig, SurfaceSmoother, TensorProductSmoother};
use fmm2d::{Cell, Covariate, FunctionalDataset, SamplingGrid};
use nalgebra::DMatrix;
use proptest::prelude::*;

use common::{random_instance, rel_diff};

fn surface(r_len: usize, l_len: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-5.0..5.0f64, r_len * l_len).prop_map(move |v| DMatrix::from_vec(r_len, l_len, v))
}

fn build(backend: usize, r_len: usize, l_len: usize, k: (usize, usize), m: (usize, usize), lambda: (f64, f64)) -> SurfaceSmoother {
    let g = SamplingGrid::midpoint(r_len, l_len);
    let (sr, sl) = (axis_spec(r_len, k.0), axis_spec(l_len, k.1));
    if backend == 0 {
        SurfaceSmoother::Sandwich(SandwichSmoother::build(g.s_points(), g.t_points(), sr, sl, m, lambda).unwrap())
    } else {
        SurfaceSmoother::TensorProduct(
            TensorProductSmoother::build(g.s_points(), g.t_points(), sr, sl, m, lambda).unwrap(),
        )
    }
}

fn smoother_case() -> impl Strategy<Value = (usize, usize, usize, (usize, usize), (usize, usize), (f64, f64))> {
    (0usize..2, 6usize..10, 8usize..14, 4usize..6, 4usize..7, 1usize..3, 1usize..3, -3.0..3.0f64, -3.0..3.0f64)
        .prop_map(|(b, r, l, kr, kl, mr, ml, lr, ll)| (b, r, l, (kr, kl), (mr, ml), (10f64.powf(lr), 10f64.powf(ll))))
}

fn tiny_dataset(n: usize, r_len: usize, l_len: usize, y: Vec<f64>, x: Vec<f64>) -> FunctionalDataset {
    let grid = SamplingGrid::midpoint(r_len, l_len);
    let ys = (0..n)
        .map(|i| DMatrix::from_fn(r_len, l_len, |r, l| y[(i * r_len + r) * l_len + l]))
        .collect();
    FunctionalDataset::complete(
        grid,
        ys,
        vec![Covariate::time_invariant("x", x)],
        (0..n).map(|i| format!("id{i}")).collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn long_csv_round_trip(n in 4usize..7, r_len in 2usize..5, l_len in 2usize..6, seed in 0u64..1000) {
        let (ds, _) = random_instance(seed, n, r_len, l_len, seed % 2 == 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_long_csv(&ds, &path).unwrap();
        let back = load_long_csv(&path, &CsvSchema::default()).unwrap();
        prop_assert_eq!(back.grid().s_points(), ds.grid().s_points());
        prop_assert_eq!(back.grid().t_points(), ds.grid().t_points());
        prop_assert_eq!(back.mask(), ds.mask());
        for i in 0..n {
            for r in 0..r_len {
                for l in 0..l_len {
                    let c = Cell::new(r, l);
                    if ds.is_observed(i, c) {
                        prop_assert!((back.responses()[i][(r, l)] - ds.responses()[i][(r, l)]).abs() < 1e-12);
                        prop_assert!((back.covariates()[0].value(i, c) - ds.covariates()[0].value(i, c)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn unit_interval_points_are_not_moved(mut s in prop::collection::vec(0.0..=1.0f64, 2..8), mut t in prop::collection::vec(0.0..=1.0f64, 2..8)) {
        for v in [&mut s, &mut t] {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
        }
        prop_assume!(s.len() >= 2 && t.len() >= 2);
        let g = SamplingGrid::from_raw(s.clone(), t.clone()).unwrap();
        for (a, b) in g.s_points().iter().zip(&s) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
        for (a, b) in g.t_points().iter().zip(&t) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn complete_designs_have_every_subject(n in 4usize..9, r_len in 1usize..4, l_len in 1usize..4, seed in 0u64..100) {
        let (ds, _) = random_instance(seed, n, r_len.max(2), l_len.max(2), true);
        for r in 0..ds.grid().r_len() {
            for l in 0..ds.grid().l_len() {
                let (x, subjects) = design_matrix_at(&ds, Cell::new(r, l)).unwrap();
                prop_assert_eq!(x.nrows(), n);
                prop_assert_eq!(subjects.len(), n);
            }
        }
    }

    #[test]
    fn pointwise_fit_is_worker_invariant(seed in 0u64..1000, invariant in any::<bool>()) {
        let (ds, _) = random_instance(seed, 12, 4, 7, invariant);
        let one = with_workers(1, || fit_pointwise(&ds)).unwrap().unwrap();
        let many = with_workers(3, || fit_pointwise(&ds)).unwrap().unwrap();
        prop_assert_eq!(&one.beta_raw, &many.beta_raw);
        prop_assert_eq!(&one.sigma2_raw, &many.sigma2_raw);
        prop_assert_eq!(&one.gram_inv, &many.gram_inv);
    }

    #[test]
    fn smoothers_preserve_constants((b, r, l, k, m, lambda) in smoother_case(), c in -10.0..10.0f64) {
        let sm = build(b, r, l, k, m, lambda);
        let out = sm.apply(&DMatrix::from_element(r, l, c));
        prop_assert!(out.iter().all(|&v| (v - c).abs() < 1e-10));
    }

    #[test]
    fn smoothers_are_linear((b, r, l, k, m, lambda) in smoother_case(), seed in 0u64..1000, alpha in -3.0..3.0f64) {
        let sm = build(b, r, l, k, m, lambda);
        let (ds, _) = random_instance(seed, 4, r, l, true);
        let (a, bm) = (&ds.responses()[0], &ds.responses()[1]);
        let lhs = sm.apply(&(a * alpha + bm));
        let rhs = sm.apply(a) * alpha + sm.apply(bm);
        prop_assert!((lhs - rhs).amax() < 1e-12 * (1.0 + alpha.abs()) * 10.0);
    }

    #[test]
    fn smoothers_shrink((b, r, l, k, m, lambda) in smoother_case(), raw in surface(8, 12)) {
        let sm = build(b, 8, 12, k, m, lambda);
        let _ = (r, l);
        prop_assert!(sm.apply(&raw).norm() <= raw.norm() * (1.0 + 1e-12));
    }

    #[test]
    fn heavy_penalty_reproduces_bilinear_surfaces(b in 0usize..2, coef in prop::array::uniform4(-3.0..3.0f64)) {
        let (r_len, l_len) = (8, 12);
        let g = SamplingGrid::midpoint(r_len, l_len);
        let sm = build(b, r_len, l_len, (5, 6), (2, 2), (1e8, 1e8));
        let raw = DMatrix::from_fn(r_len, l_len, |r, l| {
            let (s, t) = (g.s_points()[r], g.t_points()[l]);
            coef[0] + coef[1] * s + coef[2] * t + coef[3] * s * t
        });
        prop_assert!((sm.apply(&raw) - &raw).amax() < 1e-4);
    }

    #[test]
    fn covariance_scales_quadratically(seed in 0u64..500) {
        let (ds, _) = random_instance(seed, 30, 6, 12, true);
        let res = ResidualTensor::complete(ds.responses().to_vec());
        let cfg = CovarianceConfig::default();
        let (e1, s1, _) = decompose(&res, ds.grid(), &cfg).unwrap();
        let (e2, s2, _) = decompose(&res.scaled(2.0), ds.grid(), &cfg).unwrap();
        let sig = DMatrix::zeros(6, 12);
        let m1 = fmm2d::covariance::CovarianceModel::new(ds.grid().clone(), e1.clone(), s1, sig.clone()).unwrap();
        let m2 = fmm2d::covariance::CovarianceModel::new(ds.grid().clone(), e2.clone(), s2, sig).unwrap();
        prop_assert!((e2.phi2 - 4.0 * e1.phi2).abs() <= 1e-8 * (1.0 + e1.phi2 * 4.0));
        let mut scale = 0.0f64;
        let mut err = 0.0f64;
        for (a, b) in [((0, 0), (0, 0)), ((1, 3), (4, 3)), ((5, 11), (2, 0)), ((3, 6), (3, 7))] {
            let (c1, c2) = (Cell::new(a.0, a.1), Cell::new(b.0, b.1));
            let v1 = eval_c(&m1, c1, c2);
            scale = scale.max(v1.abs());
            err = err.max((eval_c(&m2, c1, c2) - 4.0 * v1).abs());
        }
        prop_assert!(err <= 1e-8 * 4.0 * scale.max(1e-300));
    }

    #[test]
    fn integrated_kernel_is_contained_by_marginal(seed in 0u64..500, scenario in 0usize..2) {
        let scenario = if scenario == 0 { Scenario::S1 } else { Scenario::S2 };
        let cfg = SimulationConfig { n: 40, r: 10, l: 20, ..SimulationConfig::baseline(scenario, seed) };
        let data = generate(&cfg).unwrap();
        let ds = &data.dataset;
        let fit = fit_pointwise(ds).unwrap();
        let smoothed = smooth_fit(&fit, ds.grid(), ds.n_subjects(), &SmootherConfig::default()).unwrap();
        let (model, _) = fit_covariance(ds, &smoothed.beta_hat, smoothed.sigma2_hat.clone(), &CovarianceConfig::default()).unwrap();
        let c_w = &model.eigen.c_w_smoothed;
        let w = ds.grid().t_weights();
        let integrated = DMatrix::from_fn(10, 10, |r1, r2| {
            (0..20).map(|l| w[l] * eval_c(&model, Cell::new(r1, l), Cell::new(r2, l))).sum::<f64>()
        });
        prop_assert!((integrated - c_w).amax() <= c_w.amax());
    }

    #[test]
    fn fast_variance_matches_dense_oracle(seed in 0u64..10_000, lr in -2.0..2.0f64, ll in -2.0..2.0f64) {
        let (ds, cov) = random_instance(seed, 10, 5, 8, true);
        let fit = fit_pointwise(&ds).unwrap();
        for sm in common::smoothers(ds.grid(), (10f64.powf(lr), 10f64.powf(ll))) {
            for p in 0..2 {
                let fast = variance_fast(&fit, &cov, &sm, p).unwrap();
                let dense = variance_dense(&fit, &ds, &cov, &sm, p);
                prop_assert!(rel_diff(&fast, &dense) < 1e-8);
            }
        }
    }

    #[test]
    fn larger_noise_never_shrinks_variance(seed in 0u64..10_000, bump in prop::collection::vec(0.0..2.0f64, 40)) {
        let (ds, cov) = random_instance(seed, 10, 5, 8, true);
        let fit = fit_pointwise(&ds).unwrap();
        let mut bigger = cov.clone();
        bigger.sigma2_smoothed += DMatrix::from_vec(5, 8, bump);
        for sm in common::smoothers(ds.grid(), (0.5, 0.5)) {
            let v0 = variance_fast(&fit, &cov, &sm, 1).unwrap();
            let v1 = variance_fast(&fit, &bigger, &sm, 1).unwrap();
            prop_assert!(v0.iter().zip(v1.iter()).all(|(a, b)| *b >= *a - 1e-12 * a.abs()));
        }
    }

    #[test]
    fn simultaneous_band_contains_pointwise(beta in surface(3, 4), var in prop::collection::vec(0.0..4.0f64, 12), q in 2.0..6.0f64) {
        let var = DMatrix::from_vec(3, 4, var);
        let (plo, phi) = pointwise_bands(&beta, &var);
        let (slo, shi) = bands(&beta, &var, q);
        for c in 0..12 {
            prop_assert!(slo[c] <= plo[c] && phi[c] <= shi[c]);
            if var[c] > 0.0 {
                let ratio = (shi[c] - slo[c]) / (phi[c] - plo[c]);
                prop_assert!((ratio - q / PCB_MULTIPLIER).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reduction_is_linear(a in surface(5, 7), b in surface(5, 7), alpha in -3.0..3.0f64, quad in any::<bool>()) {
        let grid = SamplingGrid::new(vec![0.0, 0.1, 0.3, 0.6, 1.0], (0..7).map(|l| l as f64 / 6.0).collect()).unwrap();
        let weights = if quad { ReductionWeights::Quadrature } else { ReductionWeights::Unweighted };
        for axis in [Axis::S, Axis::T] {
            let w = collapse_weights(&grid, axis, weights);
            let lhs = reduce_surface(&(&a * alpha + &b), axis, &w);
            let rhs = reduce_surface(&a, axis, &w) * alpha + reduce_surface(&b, axis, &w);
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }
    }

    #[test]
    fn metrics_are_bounded(est in surface(4, 5), truth in surface(4, 5), half in prop::collection::vec(-1.0..3.0f64, 20)) {
        let grid = SamplingGrid::midpoint(4, 5);
        let half = DMatrix::from_vec(4, 5, half);
        prop_assert!(ise(&est, &truth, &grid) >= 0.0);
        let (cov, iaw) = band_metrics(&(&est - &half), &(&est + &half), &truth, &grid);
        prop_assert!((0.0..=1.0).contains(&cov));
        prop_assert!(iaw >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn ols_sampling_variance_matches_gauss_markov(seed in 0u64..1000) {
        let (n, reps, sigma) = (12usize, 2000usize, 1.5f64);
        let x: Vec<f64> = (0..n).map(|i| (i as f64 - 5.5) / 3.0).collect();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut slopes = Vec::with_capacity(reps);
        let mut factor = 0.0;
        for _ in 0..reps {
            let y: Vec<f64> = (0..n).map(|i| 1.0 + 2.0 * x[i] + sigma * fmm2d::rng::std_normal(&mut rng)).collect();
            let ds = tiny_dataset(n, 1, 1, y, x.clone());
            let fit = fit_pointwise(&ds).unwrap();
            slopes.push(fit.beta_raw[1][(0, 0)]);
            factor = fit.gram_inv_at(Cell::new(0, 0))[(1, 1)];
        }
        let mean = slopes.iter().sum::<f64>() / reps as f64;
        let var = slopes.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let expect = sigma * sigma * factor;
        prop_assert!((var / expect - 1.0).abs() < 0.2, "{} vs {}", var, expect);
    }
}
