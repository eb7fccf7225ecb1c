//! TOML model configuration.
//!
//! ```toml
//! schema_version = 1
//! name = "pupil"
//! likelihood = "normal"          # or "lognormal"
//! response = "p_size"
//!
//! [intercept]
//! name = "alpha"
//! prior = { family = "normal", loc = 1000.0, scale = 500.0 }
//!
//! [[fixed]]
//! column = "load"
//! name = "beta"
//! prior = { family = "normal", scale = 10.0 }
//!
//! [noise.scale]
//! name = "sigma"
//! prior = { family = "half_normal", scale = 31.6 }
//!
//! [[classes]]
//! name = "subj"
//! group = "subj"
//! slopes = ["load"]               # an intercept is included unless intercept = false
//! scale = { name = "tau_subj", prior = { family = "half_normal", scale = 1000.0 } }
//! lkj_eta = 1.0
//! strategy = "sample"             # sample | marginalize | reparameterize
//! ```
//!
//! Prior `scale` values are standard deviations. A class scale may instead be
//! `{ fixed = 1.0 }`; `iid = true` uses one scale for every coefficient of the
//! class, and classes naming the same scale parameter share it. Classes with
//! `target = "noise"` shift the log noise standard deviation and need a
//! `[noise.log_linear]` section in place of `[noise.scale]`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::synth::SynthConfig;
use super::{HarnessError, HarnessResult};
use crate::model::{
    build_design, EffectClass, EffectTarget, GlobalParamSpec, Likelihood, LinearTerm, LmmModel, NoiseModel,
    ParamEntry, Prior, Scalar, Strategy,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub schema_version: u32,
    pub name: String,
    pub likelihood: LikelihoodName,
    pub response: String,
    #[serde(default)]
    pub intercept: Option<Coef>,
    #[serde(default)]
    pub fixed: Vec<FixedTerm>,
    pub noise: NoiseConfig,
    #[serde(default)]
    pub classes: Vec<ClassConfig>,
    #[serde(default)]
    pub sampler: SamplerOverrides,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LikelihoodName {
    Normal,
    Lognormal,
}

impl From<LikelihoodName> for Likelihood {
    fn from(l: LikelihoodName) -> Self {
        match l {
            LikelihoodName::Normal => Likelihood::Normal,
            LikelihoodName::Lognormal => Likelihood::LogNormal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    Normal {
        #[serde(default)]
        loc: f64,
        scale: f64,
    },
    HalfNormal {
        scale: f64,
    },
    HalfCauchy {
        scale: f64,
    },
}

impl PriorConfig {
    fn to_prior(self, what: &str) -> HarnessResult<Prior> {
        let (prior, scale) = match self {
            PriorConfig::Normal { loc, scale } => (Prior::Normal { loc, scale }, scale),
            PriorConfig::HalfNormal { scale } => (Prior::HalfNormal { scale }, scale),
            PriorConfig::HalfCauchy { scale } => (Prior::HalfCauchy { scale }, scale),
        };
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(HarnessError::Config(format!("{what}: prior scale {scale} must be positive")));
        }
        Ok(prior)
    }

    fn is_positive(self) -> bool {
        !matches!(self, PriorConfig::Normal { .. })
    }
}

/// A named scalar coefficient with its prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coef {
    pub name: String,
    pub prior: PriorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedTerm {
    pub column: String,
    pub name: String,
    pub prior: PriorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScaleSpec {
    Fixed { fixed: f64 },
    Param { name: String, prior: PriorConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub scale: Option<ScaleSpec>,
    #[serde(default)]
    pub log_linear: Option<LogLinearNoise>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogLinearNoise {
    pub intercept: Coef,
    #[serde(default)]
    pub fixed: Vec<FixedTerm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetName {
    #[default]
    Location,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassConfig {
    pub name: String,
    pub group: String,
    #[serde(default = "yes")]
    pub intercept: bool,
    #[serde(default)]
    pub slopes: Vec<String>,
    pub scale: ScaleSpec,
    #[serde(default)]
    pub iid: bool,
    #[serde(default)]
    pub lkj_eta: Option<f64>,
    #[serde(default)]
    pub mean: Option<Coef>,
    #[serde(default = "sample")]
    pub strategy: Strategy,
    #[serde(default)]
    pub target: TargetName,
}

fn yes() -> bool {
    true
}

fn sample() -> Strategy {
    Strategy::Sample
}

impl ClassConfig {
    pub fn block_dim(&self) -> usize {
        self.intercept as usize + self.slopes.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerOverrides {
    pub chains: Option<usize>,
    pub warmup: Option<usize>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub max_tree_depth: Option<usize>,
    pub target_accept: Option<f64>,
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> HarnessResult<Self> {
        let c: ModelConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> HarnessResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> HarnessResult<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        match (&self.noise.scale, &self.noise.log_linear) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(HarnessError::Config(
                    "noise needs exactly one of `scale` and `log_linear`".into(),
                ))
            }
        }
        let mut names = BTreeMap::new();
        for c in &self.classes {
            if names.insert(c.name.as_str(), ()).is_some() {
                return Err(HarnessError::Config(format!("duplicate class {}", c.name)));
            }
            let d = c.block_dim();
            if d == 0 {
                return Err(HarnessError::Config(format!("{}: no intercept and no slopes", c.name)));
            }
            match c.lkj_eta {
                Some(eta) if d < 2 => {
                    return Err(HarnessError::Config(format!(
                        "{}: lkj_eta {eta} given for a one-dimensional class",
                        c.name
                    )))
                }
                Some(eta) if !(eta > 0.0) => {
                    return Err(HarnessError::Config(format!("{}: lkj_eta must be positive", c.name)))
                }
                _ => {}
            }
            if c.target == TargetName::Noise && self.noise.log_linear.is_none() {
                return Err(HarnessError::Config(format!(
                    "{}: noise-target classes need [noise.log_linear]",
                    c.name
                )));
            }
        }
        Ok(())
    }

    /// Numeric columns the model reads, in first-use order.
    pub fn numeric_columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = Vec::new();
        let mut add = |c: &str| {
            if !cols.iter().any(|x| x == c) {
                cols.push(c.to_string());
            }
        };
        self.fixed.iter().for_each(|f| add(&f.column));
        if let Some(ll) = &self.noise.log_linear {
            ll.fixed.iter().for_each(|f| add(&f.column));
        }
        self.classes.iter().flat_map(|c| &c.slopes).for_each(|s| add(s));
        cols
    }

    /// Categorical group columns, in first-use order.
    pub fn group_columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = Vec::new();
        for c in &self.classes {
            if !cols.contains(&c.group) {
                cols.push(c.group.clone());
            }
        }
        cols
    }

    /// The model with per-class strategies taken from the config.
    pub fn build(&self, data: &Dataset) -> HarnessResult<LmmModel> {
        let mut spec = GlobalParamSpec::new(vec![]).map_err(HarnessError::config)?;
        let push = |spec: &mut GlobalParamSpec, name: &str, prior: Prior, size: usize| {
            spec.push(ParamEntry {
                name: name.to_string(),
                prior,
                size,
            })
            .map_err(HarnessError::config)
        };

        let mut offset = Vec::new();
        if let Some(c) = &self.intercept {
            let e = push(&mut spec, &c.name, c.prior.to_prior(&c.name)?, 1)?;
            offset.push(LinearTerm::intercept(Scalar::param(e)));
        }
        for f in &self.fixed {
            let e = push(&mut spec, &f.name, f.prior.to_prior(&f.name)?, 1)?;
            offset.push(LinearTerm::slope(Scalar::param(e), data.column(&f.column)?.to_vec()));
        }

        let noise = match (&self.noise.scale, &self.noise.log_linear) {
            (Some(ScaleSpec::Fixed { fixed }), _) => NoiseModel::Scale(Scalar::Const(*fixed)),
            (Some(ScaleSpec::Param { name, prior }), _) => {
                positive_prior(name, *prior)?;
                NoiseModel::Scale(Scalar::param(push(&mut spec, name, prior.to_prior(name)?, 1)?))
            }
            (None, Some(ll)) => {
                let e = push(&mut spec, &ll.intercept.name, ll.intercept.prior.to_prior(&ll.intercept.name)?, 1)?;
                let mut terms = vec![LinearTerm::intercept(Scalar::param(e))];
                for f in &ll.fixed {
                    let e = push(&mut spec, &f.name, f.prior.to_prior(&f.name)?, 1)?;
                    terms.push(LinearTerm::slope(Scalar::param(e), data.column(&f.column)?.to_vec()));
                }
                NoiseModel::LogLinear(terms)
            }
            (None, None) => unreachable!("validated"),
        };

        let mut classes = Vec::with_capacity(self.classes.len());
        for c in &self.classes {
            let d = c.block_dim();
            let g = data.group(&c.group)?;
            let slopes: Vec<&[f64]> = c.slopes.iter().map(|s| data.column(s)).collect::<HarnessResult<_>>()?;
            let rows: Vec<Vec<f64>> = (0..data.n())
                .map(|i| {
                    let lead = c.intercept.then_some(1.0);
                    lead.into_iter().chain(slopes.iter().map(|s| s[i])).collect()
                })
                .collect();
            let design = build_design(&g.index, g.levels.len(), &rows).map_err(HarnessError::config)?;

            let scales = match &c.scale {
                ScaleSpec::Fixed { fixed } => vec![Scalar::Const(*fixed); d],
                ScaleSpec::Param { name, prior } => {
                    positive_prior(name, *prior)?;
                    let size = if c.iid { 1 } else { d };
                    let e = match spec.index_of(name) {
                        Some(e) => {
                            let existing = &spec.entries()[e];
                            if existing.size != size || existing.prior != prior.to_prior(name)? {
                                return Err(HarnessError::Config(format!(
                                    "{}: shared scale {name} is declared with a different prior or size",
                                    c.name
                                )));
                            }
                            e
                        }
                        None => push(&mut spec, name, prior.to_prior(name)?, size)?,
                    };
                    (0..d)
                        .map(|a| Scalar::Param {
                            entry: e,
                            index: if c.iid { 0 } else { a },
                        })
                        .collect()
                }
            };
            let mut class = EffectClass::new(c.name.clone(), design, scales).with_strategy(c.strategy);
            if let Some(m) = &c.mean {
                let e = push(&mut spec, &m.name, m.prior.to_prior(&m.name)?, d)?;
                class = class.with_mean((0..d).map(|a| Scalar::Param { entry: e, index: a }).collect());
            }
            if let Some(eta) = c.lkj_eta {
                let e = push(&mut spec, &format!("L_{}", c.name), Prior::LkjCholesky { dim: d, eta }, 1)?;
                class = class.with_corr(e);
            }
            if c.target == TargetName::Noise {
                class = class.with_target(EffectTarget::LogNoiseScale);
            }
            classes.push(class);
        }

        LmmModel::new(spec, classes, offset, noise, self.likelihood.into(), data.response.clone()).map_err(|e| match e {
            crate::Error::Domain(m) => HarnessError::Data(m),
            e => HarnessError::config(e),
        })
    }
}

fn positive_prior(name: &str, prior: PriorConfig) -> HarnessResult<()> {
    if prior.is_positive() {
        Ok(())
    } else {
        Err(HarnessError::Config(format!(
            "{name}: scale parameters need a half-normal or half-Cauchy prior"
        )))
    }
}
