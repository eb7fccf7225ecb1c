//! Random small mixed models for oracle and gradient tests.

#![allow(dead_code)]

use marginal_lmm::linalg::DesignMatrix;
use marginal_lmm::model::{
    EffectClass, EffectTarget, GlobalParamSpec, Likelihood, LinearTerm, LmmModel, NoiseModel, ParamEntry, Prior,
    Scalar, Strategy,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// Arbitrary scales, correlations, means and design scales.
    General,
    /// The first `iso` classes share one isotropic scale with fixed design
    /// scales, and the noise is homoscedastic.
    Isotropic,
    /// Class 0 shifts the log noise standard deviation.
    NoiseClass,
}

/// A model with every class sampled, plus which classes may be marginalized.
pub struct Base {
    pub model: LmmModel,
    /// Classes eligible for marginalization on the requested path.
    pub eligible: Vec<usize>,
}

fn push(spec: &mut GlobalParamSpec, name: String, prior: Prior, size: usize) -> usize {
    spec.push(ParamEntry { name, prior, size }).unwrap()
}

pub fn random_design<R: Rng>(rng: &mut R, n: usize, k: usize, d: usize) -> DesignMatrix {
    let groups: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let intercept = rng.random_bool(0.5);
    let coeffs: Vec<f64> = (0..n * d)
        .map(|i| {
            if intercept && i % d == 0 {
                1.0
            } else {
                rng.random_range(-1.5..1.5)
            }
        })
        .collect();
    DesignMatrix::new(k, d, groups, coeffs).unwrap()
}

pub fn random_base<R: Rng>(rng: &mut R, shape: Shape) -> Base {
    let n = rng.random_range(1..=30);
    let n_classes = rng.random_range(1..=3);
    let mut spec = GlobalParamSpec::default();
    let alpha = push(&mut spec, "alpha".into(), Prior::Normal { loc: 0.0, scale: 2.0 }, 1);
    let beta = push(&mut spec, "beta".into(), Prior::Normal { loc: 0.0, scale: 1.0 }, 1);
    let covariate: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let offset = vec![
        LinearTerm::intercept(Scalar::param(alpha)),
        LinearTerm::slope(Scalar::param(beta), covariate),
    ];
    let noise = if shape == Shape::NoiseClass {
        let ls = push(&mut spec, "log_sigma".into(), Prior::Normal { loc: 0.0, scale: 1.0 }, 1);
        let g = push(&mut spec, "gamma".into(), Prior::Normal { loc: 0.0, scale: 0.5 }, 1);
        let cov: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        NoiseModel::LogLinear(vec![
            LinearTerm::intercept(Scalar::param(ls)),
            LinearTerm::slope(Scalar::param(g), cov),
        ])
    } else {
        let s = push(&mut spec, "sigma".into(), Prior::HalfNormal { scale: 1.0 }, 1);
        NoiseModel::Scale(Scalar::param(s))
    };
    let n_iso = match shape {
        Shape::Isotropic => rng.random_range(1..=n_classes),
        _ => 0,
    };
    let shared_tau = (n_iso > 0).then(|| push(&mut spec, "tau".into(), Prior::HalfNormal { scale: 1.0 }, 1));

    let mut classes = Vec::with_capacity(n_classes);
    for i in 0..n_classes {
        let k = rng.random_range(1..=5);
        let d = rng.random_range(1..=3);
        let design = random_design(rng, n, k, d);
        let mut class = if i < n_iso {
            let tau = shared_tau.unwrap();
            EffectClass::new(format!("u{i}"), design, vec![Scalar::param(tau); d])
                .with_design_scale(Scalar::Const(rng.random_range(0.5..1.5)))
        } else {
            let t = push(&mut spec, format!("tau_{i}"), Prior::HalfCauchy { scale: 2.0 }, d);
            let scales = (0..d).map(|a| Scalar::Param { entry: t, index: a }).collect();
            let mut c = EffectClass::new(format!("u{i}"), design, scales);
            if d > 1 && rng.random_bool(0.6) {
                let eta = rng.random_range(0.8..3.0);
                let l = push(&mut spec, format!("L_{i}"), Prior::LkjCholesky { dim: d, eta }, 1);
                c = c.with_corr(l);
            }
            if rng.random_bool(0.3) {
                let s = push(&mut spec, format!("s_{i}"), Prior::HalfNormal { scale: 1.0 }, 1);
                c = c.with_design_scale(Scalar::param(s));
            } else if rng.random_bool(0.5) {
                c = c.with_design_scale(Scalar::Const(rng.random_range(0.5..2.0)));
            }
            c
        };
        if rng.random_bool(0.3) {
            let m = push(&mut spec, format!("mu_{i}"), Prior::Normal { loc: 0.0, scale: 1.0 }, d);
            class = class.with_mean((0..d).map(|a| Scalar::Param { entry: m, index: a }).collect());
        }
        if shape == Shape::NoiseClass && i == 0 {
            class = class
                .with_target(EffectTarget::LogNoiseScale)
                .with_design_scale(Scalar::Const(0.25));
        }
        classes.push(class);
    }

    let lognormal = shape == Shape::General && rng.random_bool(0.2);
    let y: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.sample::<f64, _>(StandardNormal) * 1.5;
            if lognormal {
                v.exp()
            } else {
                v
            }
        })
        .collect();
    let likelihood = if lognormal { Likelihood::LogNormal } else { Likelihood::Normal };
    let eligible = match shape {
        Shape::General => (0..n_classes).collect(),
        Shape::Isotropic => (0..n_iso).collect(),
        Shape::NoiseClass => (1..n_classes).collect(),
    };
    let model = LmmModel::new(spec, classes, offset, noise, likelihood, y).unwrap();
    Base { model, eligible }
}

/// Marginalizes `marg` and gives every other class a random strategy among
/// sampled and reparameterized.
pub fn assign<R: Rng>(rng: &mut R, model: &LmmModel, marg: &[usize]) -> LmmModel {
    let strategies: Vec<Strategy> = (0..model.classes().len())
        .map(|i| {
            if marg.contains(&i) {
                Strategy::Marginalize
            } else if rng.random_bool(0.5) {
                Strategy::Reparameterize
            } else {
                Strategy::Sample
            }
        })
        .collect();
    model.with_strategies(&strategies).unwrap()
}

pub fn random_point<R: Rng>(rng: &mut R, model: &LmmModel) -> Vec<f64> {
    (0..model.dim()).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Largest entrywise difference scaled by the largest reference magnitude.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}
