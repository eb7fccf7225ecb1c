mod common;

use approx::assert_abs_diff_eq;
use common::{assign, max_rel_diff, random_base, random_point, rel_err, rng, Shape};
use marginal_lmm::linalg::DesignMatrix;
use marginal_lmm::marginal::{
    full_marginal_log_density, full_marginal_log_likelihood, full_marginal_preprocess, full_recovery,
    full_recovery_cov, full_recovery_moments, marginal_log_density, marginal_log_likelihood, recovery_conditional,
    recovery_sample, reparameterize_class, rao_blackwell_mean,
};
use marginal_lmm::model::{
    joint_log_density, standardize_class, EffectClass, GlobalParamSpec, Likelihood, LinearTerm, LmmModel,
    NoiseModel, ParamEntry, Prior, Scalar, Strategy,
};
use marginal_lmm::{oracle, Error};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;

fn scalar_model(y: f64, sigma_u: f64, var_y: f64, mean: f64) -> LmmModel {
    let a = DesignMatrix::new(1, 1, vec![0], vec![1.0]).unwrap();
    let class = EffectClass::new("u", a, vec![Scalar::Const(sigma_u)])
        .with_mean(vec![Scalar::Const(mean)])
        .with_strategy(Strategy::Marginalize);
    LmmModel::new(
        GlobalParamSpec::default(),
        vec![class],
        vec![],
        NoiseModel::Scale(Scalar::Const(var_y.sqrt())),
        Likelihood::Normal,
        vec![y],
    )
    .unwrap()
}

#[test]
fn scalar_marginal_density() {
    let m = scalar_model(0.0, 1.0, 1.0, 0.0);
    assert_abs_diff_eq!(marginal_log_density(&m, 0, &[]).unwrap(), -1.26551, epsilon = 1e-5);
}

#[test]
fn scalar_conditional() {
    let m = scalar_model(2.0, 1.0, 1.0, 0.0);
    let (mean, chol) = recovery_conditional(&m, 0, &[]).unwrap();
    assert_abs_diff_eq!(mean[0], 1.0, epsilon = 1e-14);
    assert_abs_diff_eq!(chol.reconstruct().data()[0], 0.5, epsilon = 1e-14);
}

#[test]
fn vanishing_prior_variance_gives_the_likelihood() {
    let y = 0.7;
    let m = scalar_model(y, 1e-6, 1.0, 0.2);
    let direct = -0.5 * ((y - 0.2f64).powi(2) + (2.0 * std::f64::consts::PI).ln());
    assert_abs_diff_eq!(marginal_log_density(&m, 0, &[]).unwrap(), direct, epsilon = 1e-6);
}

#[test]
fn uninformative_likelihood_keeps_the_prior_mean() {
    let m = scalar_model(0.7, 1.0, 1e8, 0.7);
    let (mean, _) = recovery_conditional(&m, 0, &[]).unwrap();
    assert_abs_diff_eq!(mean[0], 0.7, epsilon = 1e-4);
    let draws = recovery_sample(&m, 0, &[vec![]; 1], &mut rng(3)).unwrap();
    assert!((draws[0][0] - 0.7).abs() < 5.0);
}

#[test]
fn scalar_recovery_draws_match_the_conditional() {
    let m = scalar_model(2.0, 1.0, 1.0, 0.0);
    let draws = recovery_sample(&m, 0, &vec![vec![]; 100_000], &mut rng(11)).unwrap();
    let n = draws.len() as f64;
    let mean = draws.iter().map(|d| d[0]).sum::<f64>() / n;
    let var = draws.iter().map(|d| (d[0] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    assert!((var - 0.5).abs() < 0.01, "var {var}");
}

#[test]
fn marginal_then_recovery_reproduces_the_prior_joint() {
    // ancestral (u, y) vs y from the marginal then u from the recovery
    let mut r = rng(5);
    let n = 20_000;
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let y = 2f64.sqrt() * r.sample::<f64, _>(StandardNormal);
        let m = scalar_model(y, 1.0, 1.0, 0.0);
        let u = recovery_sample(&m, 0, &[vec![]], &mut r).unwrap()[0][0];
        pairs.push((u, y));
    }
    let nf = n as f64;
    let mu = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let vu = pairs.iter().map(|p| p.0 * p.0).sum::<f64>() / nf - mu * mu;
    let cuy = pairs.iter().map(|p| p.0 * p.1).sum::<f64>() / nf;
    assert!(mu.abs() < 0.04, "mean {mu}");
    assert!((vu - 1.0).abs() < 0.05, "var {vu}");
    assert!((cuy - 1.0).abs() < 0.06, "cov {cuy}");
}

fn check_single_class(seed: u64, shape: Shape) {
    let mut r = rng(seed);
    let base = random_base(&mut r, shape);
    let class = *base.eligible.choose(&mut r).unwrap();
    let model = assign(&mut r, &base.model, &[class]);
    let x = random_point(&mut r, &model);

    let fast = marginal_log_likelihood(&model, class, &x).unwrap();
    let dense = oracle::marginal_log_likelihood(&model, &x, &[class]).unwrap();
    assert!(rel_err(fast, dense) < 1e-8, "seed {seed}: {fast} vs {dense}");

    let st = model.materialize(&x).unwrap();
    let target = marginal_log_density(&model, class, &x).unwrap();
    assert!(rel_err(target, fast + model.prior_terms(&st).unwrap()) < 1e-12);

    let (mean, chol) = recovery_conditional(&model, class, &x).unwrap();
    let (dmean, dcov) = oracle::conditional(&model, &x, &[class]).unwrap();
    assert!(max_rel_diff(&mean, dmean.as_slice()) < 1e-8, "seed {seed}: mean");
    let cov = chol.reconstruct().to_dense();
    assert!(max_rel_diff(cov.as_slice(), dcov.as_slice()) < 1e-8, "seed {seed}: cov");
}

#[test]
fn single_class_matches_dense_oracle() {
    for seed in 0..100 {
        check_single_class(seed, Shape::General);
    }
}

#[test]
fn single_class_with_effect_dependent_noise_matches_dense_oracle() {
    for seed in 0..40 {
        let mut r = rng(1000 + seed);
        let base = random_base(&mut r, Shape::NoiseClass);
        if base.eligible.is_empty() {
            continue;
        }
        check_single_class(1000 + seed, Shape::NoiseClass);
    }
}

#[test]
fn marginalizing_a_noise_class_is_rejected() {
    let mut r = rng(7);
    let base = random_base(&mut r, Shape::NoiseClass);
    let err = base.model.with_strategy(0, Strategy::Marginalize).unwrap_err();
    assert!(matches!(err, Error::UnsupportedStructure(_)));
}

/// Log density of `u` under the recovery conditional.
fn conditional_log_density(model: &LmmModel, class: usize, x: &[f64], u: &[f64]) -> f64 {
    let (mean, chol) = recovery_conditional(model, class, x).unwrap();
    let r: Vec<f64> = u.iter().zip(&mean).map(|(a, b)| a - b).collect();
    let w = chol.solve_lower(&r).unwrap();
    let quad: f64 = w.iter().map(|v| v * v).sum();
    -0.5 * (quad + chol.logdet() + u.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

#[test]
fn marginal_times_conditional_is_the_joint() {
    for seed in 0..100 {
        let mut r = rng(200 + seed);
        let base = random_base(&mut r, Shape::General);
        let class = *base.eligible.choose(&mut r).unwrap();
        let sampled = assign(&mut r, &base.model, &[]).with_strategy(class, Strategy::Sample).unwrap();
        let marg = sampled.with_strategy(class, Strategy::Marginalize).unwrap();
        let xs = random_point(&mut r, &sampled);
        let o = sampled.layout().class_offsets[class].unwrap();
        let m = sampled.classes()[class].n_effects();
        let u = &xs[o..o + m];
        let xm: Vec<f64> = xs[..o].iter().chain(&xs[o + m..]).copied().collect();
        let joint = joint_log_density(&sampled, &xs).unwrap();
        let factored = marginal_log_density(&marg, class, &xm).unwrap() + conditional_log_density(&marg, class, &xm, u);
        assert!(rel_err(factored, joint) < 1e-8, "seed {seed}: {factored} vs {joint}");
    }
}

/// Reorders observations and relabels the groups of every class, returning
/// the permuted model and the matching coordinates.
fn permute(model: &LmmModel, x: &[f64], seed: u64) -> (LmmModel, Vec<f64>) {
    let mut r = rng(seed);
    let n = model.n_obs();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let mut x_new = x.to_vec();
    let classes = model
        .classes()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let k = c.design.n_groups();
            let d = c.block_dim();
            let mut label: Vec<usize> = (0..k).collect();
            label.shuffle(&mut r);
            let groups = order.iter().map(|&i| label[c.design.group_of()[i]]).collect();
            let coeffs = order.iter().flat_map(|&i| c.design.row(i).to_vec()).collect();
            if let Some(o) = model.layout().class_offsets[i] {
                for j in 0..k {
                    let (src, dst) = (o + j * d, o + label[j] * d);
                    x_new[dst..dst + d].copy_from_slice(&x[src..src + d]);
                }
            }
            let mut nc = c.clone();
            nc.design = DesignMatrix::new(k, d, groups, coeffs).unwrap();
            nc
        })
        .collect();
    let reorder = |v: &Vec<f64>| order.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let terms = |ts: &[LinearTerm]| {
        ts.iter()
            .map(|t| LinearTerm {
                coef: t.coef,
                covariate: t.covariate.as_ref().map(reorder),
            })
            .collect::<Vec<_>>()
    };
    let noise = match model.noise() {
        NoiseModel::Scale(s) => NoiseModel::Scale(*s),
        NoiseModel::LogLinear(ts) => NoiseModel::LogLinear(terms(ts)),
    };
    let y: Vec<f64> = order.iter().map(|&i| model.response()[i]).collect();
    let y = match model.likelihood() {
        Likelihood::Normal => y,
        Likelihood::LogNormal => y.iter().map(|v| v.exp()).collect(),
    };
    let permuted = LmmModel::new(
        model.params().clone(),
        classes,
        terms(model.offset_terms()),
        noise,
        model.likelihood(),
        y,
    )
    .unwrap();
    (permuted, x_new)
}

#[test]
fn invariant_to_observation_order_and_group_labels() {
    for seed in 0..50 {
        let mut r = rng(300 + seed);
        let base = random_base(&mut r, Shape::General);
        let class = *base.eligible.choose(&mut r).unwrap();
        let model = assign(&mut r, &base.model, &[class]);
        let x = random_point(&mut r, &model);
        let (pm, px) = permute(&model, &x, seed);
        let a = marginal_log_density(&model, class, &x).unwrap();
        let b = marginal_log_density(&pm, class, &px).unwrap();
        assert!(rel_err(a, b) < 1e-12, "seed {seed}: {a} vs {b}");
    }
}

fn isotropic_class_model(sigma: Scalar, mean: f64, strategy: Strategy) -> (LmmModel, usize) {
    let mut r = rng(17);
    let n = 12;
    let design = common::random_design(&mut r, n, 4, 2);
    let mut spec = GlobalParamSpec::default();
    let s = spec
        .push(ParamEntry {
            name: "sigma".into(),
            prior: Prior::HalfNormal { scale: 1.0 },
            size: 1,
        })
        .unwrap();
    let t = spec
        .push(ParamEntry {
            name: "tau".into(),
            prior: Prior::HalfNormal { scale: 1.0 },
            size: 1,
        })
        .unwrap();
    let sigma = match sigma {
        Scalar::Param { .. } => Scalar::param(t),
        c => c,
    };
    let class = EffectClass::new("u", design, vec![sigma; 2])
        .with_mean(vec![Scalar::Const(mean), Scalar::Const(-mean)])
        .with_strategy(strategy);
    let y = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let m = LmmModel::new(spec, vec![class], vec![], NoiseModel::Scale(Scalar::param(s)), Likelihood::Normal, y)
        .unwrap();
    (m, n)
}

#[test]
fn standardizing_keeps_the_marginal_density() {
    for sigma in [Scalar::Const(2.0), Scalar::param(1)] {
        let (m, _) = isotropic_class_model(sigma, 0.0, Strategy::Marginalize);
        let s = standardize_class(&m, 0).unwrap();
        assert_eq!(s.classes()[0].scales, vec![Scalar::Const(1.0); 2]);
        let mut r = rng(2);
        for _ in 0..10 {
            let x = random_point(&mut r, &m);
            let a = marginal_log_density(&m, 0, &x).unwrap();
            let b = marginal_log_density(&s, 0, &x).unwrap();
            assert!(rel_err(a, b) < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn standardizing_with_a_mean_keeps_the_joint_density() {
    let sigma = 2.0;
    let mu = 0.8;
    let (m, _) = isotropic_class_model(Scalar::Const(sigma), mu, Strategy::Sample);
    let s = standardize_class(&m, 0).unwrap();
    let mut r = rng(4);
    for _ in 0..10 {
        let xs = random_point(&mut r, &s);
        let g = m.layout().global_dim;
        let mut x = xs.clone();
        for (i, v) in x[g..].iter_mut().enumerate() {
            let mean = if i % 2 == 0 { mu } else { -mu };
            *v = mean + sigma * *v;
        }
        let a = joint_log_density(&s, &xs).unwrap();
        let b = joint_log_density(&m, &x).unwrap() + (x.len() - g) as f64 * sigma.ln();
        assert!(rel_err(a, b) < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn standardizing_a_unit_class_is_the_identity() {
    let (m, _) = isotropic_class_model(Scalar::Const(1.0), 0.0, Strategy::Marginalize);
    assert_eq!(standardize_class(&m, 0).unwrap(), m);
}

#[test]
fn standardizing_a_correlated_class_is_rejected() {
    let mut r = rng(9);
    let base = loop {
        let b = random_base(&mut r, Shape::General);
        if b.model.classes().iter().any(|c| c.corr.is_some()) {
            break b;
        }
    };
    let i = base.model.classes().iter().position(|c| c.corr.is_some()).unwrap();
    assert!(matches!(standardize_class(&base.model, i), Err(Error::UnsupportedStructure(_))));
}

fn check_full(seed: u64) -> (f64, f64, f64) {
    let mut r = rng(seed);
    let base = random_base(&mut r, Shape::Isotropic);
    let count = r.random_range(1..=base.eligible.len());
    let model = assign(&mut r, &base.model, &base.eligible[..count]);
    let pre = full_marginal_preprocess(&model).unwrap();
    let x = random_point(&mut r, &model);
    let classes = pre.classes().to_vec();

    let fast = full_marginal_log_likelihood(&model, &pre, &x).unwrap();
    let dense = oracle::marginal_log_likelihood(&model, &x, &classes).unwrap();
    let st = model.materialize(&x).unwrap();
    let target = full_marginal_log_density(&model, &pre, &x).unwrap();
    assert!(rel_err(target, fast + model.prior_terms(&st).unwrap()) < 1e-12);

    let (mean, sd) = full_recovery_moments(&model, &pre, &x).unwrap();
    let cov = full_recovery_cov(&pre, &sd);
    let (dmean, dcov) = oracle::conditional(&model, &x, &classes).unwrap();
    (
        rel_err(fast, dense),
        max_rel_diff(&mean, dmean.as_slice()),
        max_rel_diff(cov.as_slice(), dcov.as_slice()),
    )
}

#[test]
fn full_path_matches_dense_oracle() {
    for seed in 0..100 {
        let (ll, mean, cov) = check_full(400 + seed);
        assert!(ll < 1e-8, "seed {seed}: density {ll:e}");
        assert!(mean < 1e-8, "seed {seed}: mean {mean:e}");
        assert!(cov < 1e-8, "seed {seed}: cov {cov:e}");
    }
}

#[test]
fn full_path_agrees_with_single_class_path() {
    for seed in 0..50 {
        let mut r = rng(500 + seed);
        let base = random_base(&mut r, Shape::Isotropic);
        let model = assign(&mut r, &base.model, &[0]);
        let pre = full_marginal_preprocess(&model).unwrap();
        let x = random_point(&mut r, &model);
        let a = full_marginal_log_density(&model, &pre, &x).unwrap();
        let b = marginal_log_density(&model, 0, &x).unwrap();
        assert!(rel_err(a, b) < 1e-10, "seed {seed}: {a} vs {b}");
        let (mean, sd) = full_recovery_moments(&model, &pre, &x).unwrap();
        let (smean, chol) = recovery_conditional(&model, 0, &x).unwrap();
        assert!(max_rel_diff(&mean, &smean) < 1e-10, "seed {seed}: mean");
        let cov = full_recovery_cov(&pre, &sd);
        let scov = chol.reconstruct().to_dense();
        assert!(max_rel_diff(cov.as_slice(), scov.as_slice()) < 1e-10, "seed {seed}: cov");
    }
}

#[test]
fn full_path_scalar_case() {
    let m = scalar_model(2.0, 1.0, 1.0, 0.0);
    let pre = full_marginal_preprocess(&m).unwrap();
    assert_eq!(pre.q()[(0, 0)].abs(), 1.0);
    assert_eq!(pre.lambda(), &[1.0]);
    let direct = -0.5 * (4.0 / 2.0 + (2.0f64).ln() + (2.0 * std::f64::consts::PI).ln());
    assert_abs_diff_eq!(full_marginal_log_density(&m, &pre, &[]).unwrap(), direct, epsilon = 1e-14);
    let (mean, sd) = full_recovery_moments(&m, &pre, &[]).unwrap();
    assert_abs_diff_eq!(mean[0], 1.0, epsilon = 1e-14);
    assert_abs_diff_eq!(sd[0] * sd[0], 0.5, epsilon = 1e-14);

    let mut r = rng(8);
    let draws: Vec<f64> = (0..50_000).map(|_| full_recovery(&m, &pre, &[], &mut r).unwrap()[0]).collect();
    let n = draws.len() as f64;
    let mu = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((mu - 1.0).abs() < 0.015 && (var - 0.5).abs() < 0.015, "{mu} {var}");
}

#[test]
fn preprocessing_reconstructs_the_gram() {
    for seed in 0..30 {
        let mut r = rng(600 + seed);
        let base = random_base(&mut r, Shape::Isotropic);
        let model = assign(&mut r, &base.model, &base.eligible);
        let pre = full_marginal_preprocess(&model).unwrap();
        let x = random_point(&mut r, &model);
        let dense = oracle::dense_gram(&model, &x, pre.classes()).unwrap();
        let lam = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(pre.lambda()));
        let rebuilt = pre.q() * lam * pre.q().transpose();
        assert!(max_rel_diff(rebuilt.as_slice(), dense.as_slice()) < 1e-8, "seed {seed}");
        assert!(pre.lambda().iter().all(|l| *l >= 0.0));
    }
}

#[test]
fn crossed_intercepts_gram_counts_observations() {
    let mut r = rng(21);
    let n = 40;
    let ks = [3, 5, 4];
    let classes: Vec<EffectClass> = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let groups = (0..n).map(|_| r.random_range(0..k)).collect();
            let a = DesignMatrix::new(k, 1, groups, vec![1.0; n]).unwrap();
            EffectClass::new(format!("u{i}"), a, vec![Scalar::Const(0.7)]).with_strategy(Strategy::Marginalize)
        })
        .collect();
    let model = LmmModel::new(
        GlobalParamSpec::default(),
        classes,
        vec![],
        NoiseModel::Scale(Scalar::Const(1.0)),
        Likelihood::Normal,
        vec![0.0; n],
    )
    .unwrap();
    let pre = full_marginal_preprocess(&model).unwrap();
    let g = oracle::dense_gram(&model, &[], pre.classes()).unwrap();
    let lam = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(pre.lambda()));
    let rebuilt = pre.q() * lam * pre.q().transpose();
    let mut col = 0;
    for c in model.classes() {
        for j in 0..c.design.n_groups() {
            let count = c.design.group_of().iter().filter(|&&gj| gj == j).count() as f64;
            assert_eq!(g[(col, col)], count);
            assert_abs_diff_eq!(rebuilt.row(col).sum(), ks.len() as f64 * count, epsilon = 1e-9);
            col += 1;
        }
    }
}

#[test]
fn full_path_rejects_unequal_scales() {
    let mut r = rng(31);
    let base = loop {
        let b = random_base(&mut r, Shape::General);
        if b.model.classes().len() >= 2 {
            break b;
        }
    };
    let model = assign(&mut r, &base.model, &[0, 1]);
    assert!(matches!(full_marginal_preprocess(&model), Err(Error::UnsupportedStructure(_))));
}

#[test]
fn reparameterized_unit_class_is_the_identity() {
    let (m, _) = isotropic_class_model(Scalar::Const(1.0), 0.0, Strategy::Sample);
    let rp = reparameterize_class(&m, 0).unwrap();
    let mut r = rng(1);
    let x = random_point(&mut r, &rp);
    assert_eq!(rp.constrained_view(&x).unwrap(), m.constrained_view(&x).unwrap());
}

#[test]
fn reparameterized_joint_differs_by_the_jacobian() {
    for seed in 0..50 {
        let mut r = rng(700 + seed);
        let base = random_base(&mut r, Shape::General);
        let sampled = assign(&mut r, &base.model, &[]).with_strategy(0, Strategy::Sample).unwrap();
        let rp = reparameterize_class(&sampled, 0).unwrap();
        let xe = random_point(&mut r, &rp);
        let st = rp.materialize(&xe).unwrap();
        let effects: Vec<Option<Vec<f64>>> = st.classes.iter().map(|c| c.effects.clone()).collect();
        let xu = sampled.unconstrain(&st.theta, &effects).unwrap();
        let c = &sampled.classes()[0];
        let d = c.block_dim();
        let logdet_s: f64 = (0..d).map(|a| st.classes[0].factor[a * d + a].ln()).sum();
        let jac = c.design.n_groups() as f64 * logdet_s;
        let a = joint_log_density(&rp, &xe).unwrap();
        let b = joint_log_density(&sampled, &xu).unwrap() + jac;
        assert!(rel_err(a, b) < 1e-10, "seed {seed}: {a} vs {b}");
        // integrating either form out leaves the same evidence
        let mr = rp.with_strategy(0, Strategy::Marginalize).unwrap();
        let ms = sampled.with_strategy(0, Strategy::Marginalize).unwrap();
        let o = rp.layout().class_offsets[0].unwrap();
        let m = c.n_effects();
        let xm: Vec<f64> = xe[..o].iter().chain(&xe[o + m..]).copied().collect();
        let e1 = oracle::marginal_log_likelihood(&mr, &xm, &[0]).unwrap();
        let e2 = marginal_log_likelihood(&ms, 0, &xm).unwrap();
        assert!(rel_err(e1, e2) < 1e-8);
    }
}

#[test]
fn reparameterized_prior_decouples_effects_from_scale() {
    // funnel: tau ~ half-Cauchy, u ~ N(0, tau²); the standardized draw is
    // eps = u / tau regardless of tau
    let mut r = rng(41);
    let n = 100_000;
    let mut log_tau = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n);
    for _ in 0..n {
        let c: f64 = r.sample::<f64, _>(StandardNormal) / r.sample::<f64, _>(StandardNormal);
        let tau = 5.0 * c.abs();
        let u = tau * r.sample::<f64, _>(StandardNormal);
        let mut spec = GlobalParamSpec::default();
        let t = spec
            .push(ParamEntry {
                name: "tau".into(),
                prior: Prior::HalfCauchy { scale: 5.0 },
                size: 1,
            })
            .unwrap();
        if log_tau.len() < 200 {
            let a = DesignMatrix::new(1, 1, vec![], vec![]).unwrap();
            let class = EffectClass::new("u", a, vec![Scalar::param(t)]).reparameterized();
            let m = LmmModel::new(spec, vec![class], vec![], NoiseModel::Scale(Scalar::Const(1.0)), Likelihood::Normal, vec![])
                .unwrap();
            let theta = marginal_lmm::model::Theta::new(vec![vec![tau]]);
            let x = m.unconstrain(&theta, &[Some(vec![u])]).unwrap();
            assert_abs_diff_eq!(x[1], u / tau, epsilon = 1e-12 * (1.0 + (u / tau).abs()));
        }
        log_tau.push(tau.ln());
        eps.push(u / tau);
    }
    let corr = correlation(&log_tau, &eps);
    assert!(corr.abs() <= 0.02, "corr {corr}");
    let log_u: Vec<f64> = eps.iter().zip(&log_tau).map(|(e, l)| e.abs().ln() + l).collect();
    assert!(correlation(&log_tau, &log_u) > 0.5);
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn rao_blackwell_mean_at_one_draw_is_the_conditional_mean() {
    let mut r = rng(50);
    let base = random_base(&mut r, Shape::General);
    let model = assign(&mut r, &base.model, &[0]);
    let x = random_point(&mut r, &model);
    let (mean, _) = recovery_conditional(&model, 0, &x).unwrap();
    assert_eq!(rao_blackwell_mean(&model, 0, &[x]).unwrap(), mean);
}

#[test]
fn rao_blackwell_mean_varies_less_than_sampled_recovery() {
    let mut r = rng(51);
    let base = random_base(&mut r, Shape::General);
    let model = assign(&mut r, &base.model, &[0]);
    let center = random_point(&mut r, &model);
    let mut rb = Vec::new();
    let mut sampled = Vec::new();
    for seed in 0..20 {
        let mut r = rng(900 + seed);
        let draws: Vec<Vec<f64>> = (0..50)
            .map(|_| center.iter().map(|c| c + 0.3 * r.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        rb.push(rao_blackwell_mean(&model, 0, &draws).unwrap()[0]);
        let us = recovery_sample(&model, 0, &draws, &mut r).unwrap();
        sampled.push(us.iter().map(|u| u[0]).sum::<f64>() / us.len() as f64);
    }
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    assert!(var(&rb) <= var(&sampled), "{} vs {}", var(&rb), var(&sampled));
}
