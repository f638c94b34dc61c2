//! Public-API workflow: raw sampled curves in, cross-validated fits and
//! predictions out.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use repfun::basis::BasisSystem;
use repfun::dataset::FunctionalDataset;
use repfun::estimators::{cross_validate, CvConfig, CvTask, Method, ModelConfig};
use repfun::geometry::{nearest_neighbor_map, ConditionGrouping, ConditionSet, Metric};

const N: usize = 60;
const P: usize = 6;
const GRID: usize = 41;

/// Six conditions in two spatial clusters; the first cluster's dimensions
/// share one true coefficient curve, the second cluster is inert.
fn make_problem() -> (Vec<DMatrix<f64>>, DVector<f64>, ConditionSet<f64>, Vec<f64>) {
    let grid: Vec<f64> = (0..GRID).map(|g| g as f64 / (GRID - 1) as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut curves = Vec::with_capacity(N);
    let mut y = DVector::zeros(N);
    for i in 0..N {
        let mut samples = DMatrix::zeros(GRID, P);
        let mut signal = 0.0;
        for d in 0..P {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            for (g, &t) in grid.iter().enumerate() {
                let tau = std::f64::consts::PI * t;
                samples[(g, d)] = a * tau.sin() + b * (2.0 * tau).cos();
            }
            if d < 3 {
                // <a sin(pi t) + b cos(2 pi t), sin(pi t)> over [0,1].
                signal += a * 0.5;
            }
        }
        let eps: f64 = rng.sample(StandardNormal);
        y[i] = signal + 0.05 * eps;
        curves.push(samples);
    }
    let coords = DMatrix::from_row_slice(
        P,
        2,
        &[0.0, 0.0, 0.1, 0.9, 1.0, 0.2, 40.0, 40.0, 40.9, 40.1, 41.0, 41.0],
    );
    (curves, y, ConditionSet::new(coords).unwrap(), grid)
}

#[test]
fn curves_to_cross_validated_fits_and_back() {
    let (curves, y, conditions, grid) = make_problem();
    let basis = BasisSystem::<f64>::bspline(4, 10, (0.0, 1.0)).unwrap();
    let data = FunctionalDataset::from_curves(&basis, &grid, &curves, y.clone()).unwrap();
    assert_eq!((data.n(), data.p(), data.basis_size()), (N, P, 10));

    let cfg = CvConfig::<f64> { lambda_grid_size: 40, folds: 5, ..CvConfig::default() };

    // Neighbor-fusion path.
    let map = nearest_neighbor_map(&conditions, Metric::Euclidean).unwrap();
    let fu = cross_validate(&data, &basis, &ModelConfig::Fu { map: &map }, &cfg).unwrap();
    assert_eq!(fu.method, Method::Fu);
    let preds = fu.predict(&data, &basis).unwrap();
    let resid = (&preds - &y).norm_squared() / N as f64;
    let var = {
        let mean = y.mean();
        y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / N as f64
    };
    assert!(resid < 0.2 * var, "FU residual {resid} vs response variance {var}");

    // Known-grouping path, plus the group-mean baseline on the same split.
    let grouping = ConditionGrouping::from_labels(&[0, 0, 0, 1, 1, 1]).unwrap();
    let gful =
        cross_validate(&data, &basis, &ModelConfig::Gful { grouping: &grouping }, &cfg).unwrap();
    let preds = gful.predict(&data, &basis).unwrap();
    let resid = (&preds - &y).norm_squared() / N as f64;
    assert!(resid < 0.2 * var, "GFUL residual {resid} vs response variance {var}");
    assert!(gful.alpha.is_some() && gful.lambda.is_some());
    let table = gful.cv_table.as_ref().unwrap();
    assert_eq!(table.len(), 40 * 10, "one row per (alpha, lambda) candidate");

    let hg = cross_validate(&data, &basis, &ModelConfig::Hg { grouping: &grouping }, &cfg).unwrap();
    for j in 0..3 {
        for k in (j + 1)..3 {
            assert!(hg.equality.declares(j, k), "group means force within-group equality");
        }
    }

    // Classification re-coding over the same curves.
    let labels: Vec<bool> = (0..N).map(|i| y[i] > 0.0).collect();
    let y01 = DVector::from_fn(N, |i, _| if labels[i] { 1.0 } else { 0.0 });
    let cls_data = FunctionalDataset::new(data.coeffs().to_vec(), y01).unwrap();
    let mut cls_cfg = cfg.clone();
    cls_cfg.task = CvTask::Classify;
    let cls = cross_validate(&cls_data, &basis, &ModelConfig::Gl1, &cls_cfg).unwrap();
    let classes = cls.predict_classes(&cls_data, &basis).unwrap();
    let hits = classes.iter().zip(&labels).filter(|(a, b)| a == b).count();
    assert!(hits >= (0.85 * N as f64) as usize, "classifier got {hits}/{N}");
}
