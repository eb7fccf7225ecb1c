use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::data::{Dataset, GroupColumn};
use super::{HarnessError, HarnessResult};
use crate::model::params::corr_cholesky_constrain;
use crate::model::{Likelihood, LmmModel, Prior, Strategy, Theta};

/// The `[synth]` section: sample size, group counts per group column,
/// covariate distributions and fixed true parameter values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    #[serde(default)]
    pub levels: BTreeMap<String, usize>,
    #[serde(default)]
    pub covariates: BTreeMap<String, CovariateSpec>,
    #[serde(default)]
    pub truth: BTreeMap<String, TruthValue>,
}

/// Covariate values drawn uniformly from a finite set or an interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovariateSpec {
    Values { values: Vec<f64> },
    Range { range: [f64; 2] },
}

impl CovariateSpec {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            CovariateSpec::Values { values } => values[rng.random_range(0..values.len())],
            CovariateSpec::Range { range: [lo, hi] } => lo + (hi - lo) * rng.random::<f64>(),
        }
    }
}

/// A scalar applies to every component of a parameter entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TruthValue {
    Scalar(f64),
    Vector(Vec<f64>),
}

const DEFAULT_LEVELS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub theta: Theta,
    /// Constrained global names, matching `theta.flatten()`.
    pub names: Vec<String>,
    /// Effects `u` of each class, by class name.
    pub effects: Vec<(String, Vec<f64>)>,
    /// Location before noise (log scale for log-normal models).
    pub linear_predictor: Vec<f64>,
    pub noise_sd: Vec<f64>,
}

impl GroundTruth {
    pub fn value(&self, name: &str) -> Option<f64> {
        let flat = self.theta.flatten();
        self.names.iter().position(|n| n == name).map(|i| flat[i])
    }
}

/// Ancestral simulation: globals from `truth` or their priors, group labels
/// covering every level, covariates from their declared distributions
/// (uniform on [-1, 1] if undeclared), effects from their distributions and
/// responses from the likelihood.
pub fn synth_data<R: Rng + ?Sized>(
    config: &ModelConfig,
    truth: &BTreeMap<String, TruthValue>,
    n: usize,
    rng: &mut R,
) -> HarnessResult<(Dataset, GroundTruth)> {
    if n == 0 {
        return Err(HarnessError::Config("synthetic sample size must be positive".into()));
    }
    let synth = config.synth.clone().unwrap_or_default();
    let mut numeric = BTreeMap::new();
    for col in config.numeric_columns() {
        let spec = synth.covariates.get(&col).cloned().unwrap_or(CovariateSpec::Range { range: [-1.0, 1.0] });
        numeric.insert(col, (0..n).map(|_| spec.draw(rng)).collect::<Vec<_>>());
    }
    let mut groups = BTreeMap::new();
    for col in config.group_columns() {
        let k = synth.levels.get(&col).copied().unwrap_or(DEFAULT_LEVELS).clamp(1, n);
        let mut raw: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        raw.shuffle(rng);
        let labels: Vec<String> = raw.iter().map(|j| format!("{col}{}", j + 1)).collect();
        groups.insert(col, GroupColumn::from_labels(&labels));
    }
    let placeholder = Dataset {
        response_name: config.response.clone(),
        response: vec![1.0; n],
        numeric,
        groups,
    };
    let model = config.build(&placeholder)?;
    let model = model
        .with_strategies(&vec![Strategy::Sample; model.classes().len()])
        .map_err(HarnessError::config)?;

    let spec = model.params();
    let mut values = Vec::with_capacity(spec.entries().len());
    for e in spec.entries() {
        let v = match truth.get(&e.name) {
            Some(TruthValue::Scalar(s)) => vec![*s; e.constrained_len()],
            Some(TruthValue::Vector(v)) if v.len() == e.constrained_len() => v.clone(),
            Some(TruthValue::Vector(v)) => {
                return Err(HarnessError::Config(format!(
                    "truth for {} has {} values, expected {}",
                    e.name,
                    v.len(),
                    e.constrained_len()
                )))
            }
            None => draw_prior(e.prior, e.size, rng),
        };
        values.push(v);
    }
    let theta = Theta::new(values);

    let effects = draw_effects(&model, &theta, rng);
    let x = model
        .unconstrain(&theta, &effects.iter().cloned().map(Some).collect::<Vec<_>>())
        .map_err(HarnessError::config)?;
    let st = model.materialize(&x).map_err(HarnessError::numerical)?;
    let sd: Vec<f64> = st.obs_var.iter().map(|v| v.sqrt()).collect();
    let response: Vec<f64> = st
        .location
        .iter()
        .zip(&sd)
        .map(|(m, s)| {
            let z: f64 = rng.sample(StandardNormal);
            let y = m + s * z;
            match model.likelihood() {
                Likelihood::Normal => y,
                Likelihood::LogNormal => y.exp(),
            }
        })
        .collect();
    if response.iter().any(|v| !v.is_finite()) {
        return Err(HarnessError::Numerical("simulated response is not finite".into()));
    }

    let truth = GroundTruth {
        names: spec.component_names(),
        theta,
        effects: model.classes().iter().map(|c| c.name.clone()).zip(effects).collect(),
        linear_predictor: st.location,
        noise_sd: sd,
    };
    Ok((
        Dataset {
            response,
            ..placeholder
        },
        truth,
    ))
}

fn draw_prior<R: Rng + ?Sized>(prior: Prior, size: usize, rng: &mut R) -> Vec<f64> {
    match prior {
        Prior::Normal { loc, scale } => (0..size).map(|_| loc + scale * rng.sample::<f64, _>(StandardNormal)).collect(),
        Prior::HalfNormal { scale } => (0..size).map(|_| (scale * rng.sample::<f64, _>(StandardNormal)).abs()).collect(),
        Prior::HalfCauchy { scale } => (0..size)
            .map(|_| (scale * (PI * (rng.random::<f64>() - 0.5)).tan()).abs())
            .collect(),
        Prior::LkjCholesky { dim, eta } => {
            let mut y = Vec::with_capacity(dim * (dim - 1) / 2);
            for i in 1..dim {
                for j in 0..i {
                    let a = eta + (dim as f64 - 2.0 - j as f64) / 2.0;
                    let b = Beta::new(a, a).expect("positive shape");
                    let cpc: f64 = 2.0 * b.sample(rng) - 1.0;
                    y.push(cpc.clamp(-1.0 + 1e-12, 1.0 - 1e-12).atanh());
                }
            }
            corr_cholesky_constrain(&y, dim).0
        }
    }
}

fn draw_effects<R: Rng + ?Sized>(model: &LmmModel, theta: &Theta, rng: &mut R) -> Vec<Vec<f64>> {
    model
        .classes()
        .iter()
        .map(|c| {
            let d = c.block_dim();
            let mean = c.mean_vec(theta);
            let s = c.cov_factor(theta);
            let mut u = Vec::with_capacity(c.n_effects());
            for _ in 0..c.design.n_groups() {
                let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                for a in 0..d {
                    u.push(mean[a] + (0..=a).map(|b| s[a * d + b] * z[b]).sum::<f64>());
                }
            }
            u
        })
        .collect()
}
