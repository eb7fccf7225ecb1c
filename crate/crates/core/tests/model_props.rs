mod common;

use common::{assign, random_base, random_point, rel_err, rng, Shape};
use marginal_lmm::model::params::{corr_cholesky_constrain, corr_cholesky_unconstrain};
use marginal_lmm::model::{joint_log_density, GlobalParamSpec, ParamEntry, Prior, Strategy, Transform};
use marginal_lmm::oracle;
use proptest::prelude::*;

#[test]
fn joint_density_matches_dense_oracle() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let base = random_base(&mut r, Shape::General);
        let n = base.model.classes().len();
        let model = base.model.with_strategies(&vec![Strategy::Sample; n]).unwrap();
        let x = random_point(&mut r, &model);
        let fast = joint_log_density(&model, &x).unwrap();
        let dense = oracle::joint_log_density(&model, &x).unwrap();
        assert!(rel_err(fast, dense) < 1e-8, "seed {seed}: {fast} vs {dense}");
    }
}

#[test]
fn joint_density_rejects_marginalized_classes() {
    let mut r = rng(1);
    let base = random_base(&mut r, Shape::General);
    let model = assign(&mut r, &base.model, &[0]);
    let x = random_point(&mut r, &model);
    assert!(joint_log_density(&model, &x).is_err());
}

fn spec_with(dim: usize) -> GlobalParamSpec {
    GlobalParamSpec::new(vec![
        ParamEntry {
            name: "beta".into(),
            prior: Prior::Normal { loc: 1.0, scale: 3.0 },
            size: 2,
        },
        ParamEntry {
            name: "tau".into(),
            prior: Prior::HalfCauchy { scale: 5.0 },
            size: 3,
        },
        ParamEntry {
            name: "sigma".into(),
            prior: Prior::HalfNormal { scale: 1.0 },
            size: 1,
        },
        ParamEntry {
            name: "L".into(),
            prior: Prior::LkjCholesky { dim, eta: 2.0 },
            size: 1,
        },
    ])
    .unwrap()
}

proptest! {
    #[test]
    fn constrain_round_trips(dim in 1usize..5, xs in prop::collection::vec(-3.0f64..3.0, 16)) {
        let spec = spec_with(dim);
        let x = &xs[..spec.unconstrained_dim()];
        let (theta, _) = spec.constrain(x).unwrap();
        let (again, _) = spec.constrain(&spec.unconstrain(&theta).unwrap()).unwrap();
        for (a, b) in again.flatten().iter().zip(theta.flatten()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn shifting_a_log_coordinate_shifts_the_jacobian(
        xs in prop::collection::vec(-2.0f64..2.0, 12),
        shift in -2.0f64..2.0,
        which in 0usize..4,
    ) {
        let spec = spec_with(3);
        let x = &xs[..spec.unconstrained_dim()];
        let positive: Vec<usize> = spec
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.prior.transform() == Transform::Log)
            .flat_map(|(i, e)| {
                let o = spec.offset(i);
                (0..e.size).map(move |k| o + k)
            })
            .collect();
        let j = positive[which % positive.len()];
        let (_, lj) = spec.constrain(x).unwrap();
        let mut y = x.to_vec();
        y[j] += shift;
        let (_, lj2) = spec.constrain(&y).unwrap();
        prop_assert!((lj2 - lj - shift).abs() < 1e-12);
    }

    #[test]
    fn correlation_factor_has_unit_rows(dim in 1usize..6, ys in prop::collection::vec(-4.0f64..4.0, 15)) {
        let m = dim * (dim - 1) / 2;
        let (l, _) = corr_cholesky_constrain(&ys[..m], dim);
        for r in 0..dim {
            let norm: f64 = (0..=r).map(|c| l[r * dim + c].powi(2)).sum();
            prop_assert!((norm - 1.0).abs() < 1e-12);
            prop_assert!(l[r * dim + r] > 0.0);
            for c in r + 1..dim {
                prop_assert_eq!(l[r * dim + c], 0.0);
            }
        }
        let back = corr_cholesky_unconstrain(&l, dim).unwrap();
        for (a, b) in back.iter().zip(&ys[..m]) {
            prop_assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
}
