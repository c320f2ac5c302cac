#![allow(dead_code)]

use fmm2d::covariance::{CovarianceModel, MarginalEigensystem, ScoreCovariance};
use fmm2d::rng::std_normal;
use fmm2d::smooth::{axis_spec, SandwichSmoother, SplineBasisSpec, SurfaceSmoother, TensorProductSmoother};
use fmm2d::{Covariate, FunctionalDataset, SamplingGrid};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random responses, one covariate and a random covariance model with two
/// components. `invariant` gives a time-invariant covariate and complete
/// data; otherwise the covariate varies by cell and a few cells are masked.
pub fn random_instance(
    seed: u64,
    n: usize,
    r_len: usize,
    l_len: usize,
    invariant: bool,
) -> (FunctionalDataset, CovarianceModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = SamplingGrid::midpoint(r_len, l_len);
    let y = (0..n)
        .map(|_| DMatrix::from_fn(r_len, l_len, |_, _| std_normal(&mut rng)))
        .collect();
    let cov = if invariant {
        Covariate::time_invariant("x", (0..n).map(|_| std_normal(&mut rng)).collect())
    } else {
        Covariate::time_varying(
            "x",
            (0..n)
                .map(|_| DMatrix::from_fn(r_len, l_len, |_, _| std_normal(&mut rng)))
                .collect(),
        )
    };
    let mask = (0..n)
        .map(|i| DMatrix::from_fn(r_len, l_len, |r, l| invariant || (i + 3 * r + 5 * l) % 11 != 0))
        .collect();
    let ds = FunctionalDataset::new(grid.clone(), y, mask, vec![cov], (0..n).map(|i| format!("s{i}")).collect())
        .unwrap();
    let j_len = 2;
    let k_len = 5;
    let psi = DMatrix::from_fn(r_len, j_len, |_, _| std_normal(&mut rng));
    let m = (0..j_len)
        .map(|_| {
            let a = DMatrix::from_fn(k_len, k_len, |_, _| std_normal(&mut rng));
            &a * a.transpose()
        })
        .collect();
    let eigen = MarginalEigensystem {
        psi,
        tau: DVector::from_element(j_len, 1.0),
        fve_achieved: 1.0,
        phi2: 0.0,
        c_w_smoothed: DMatrix::zeros(r_len, r_len),
    };
    let sigma2 = DMatrix::from_fn(r_len, l_len, |_, _| std_normal(&mut rng).abs());
    let model = CovarianceModel::new(
        grid,
        eigen,
        ScoreCovariance {
            basis_spec: SplineBasisSpec::cubic(k_len).unwrap(),
            coeffs: vec![],
            m,
        },
        sigma2,
    )
    .unwrap();
    (ds, model)
}

/// One smoother of each backend with moderate penalties.
pub fn smoothers(grid: &SamplingGrid, lambda: (f64, f64)) -> Vec<SurfaceSmoother> {
    let (s, t) = (grid.s_points(), grid.t_points());
    let spec_r = axis_spec(grid.r_len(), 4.min(grid.r_len()));
    let spec_l = axis_spec(grid.l_len(), 6.min(grid.l_len()));
    vec![
        SurfaceSmoother::Sandwich(SandwichSmoother::build(s, t, spec_r, spec_l, (2, 2), lambda).unwrap()),
        SurfaceSmoother::TensorProduct(TensorProductSmoother::build(s, t, spec_r, spec_l, (2, 2), lambda).unwrap()),
    ]
}

pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax()
}
