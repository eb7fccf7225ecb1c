use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, SamplerOverrides};
use super::data::{load_csv, write_levels, Dataset};
use super::{HarnessError, HarnessResult};
use crate::diagnostics::{summarize, Summary};
use crate::gradient::ModelTarget;
use crate::marginal::{full_recovery, recovery_sample, split_effects};
use crate::model::{EffectTarget, LmmModel, Strategy};
use crate::sampler::{chain_rng, run_chains, ChainOutput, DrawStats, NutsConfig};

/// How effect classes are handled, overriding the per-class config setting.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum StrategyChoice {
    /// Keep the strategies written in the config.
    #[default]
    Config,
    /// Sample every class.
    None,
    /// Integrate out the named classes; one name uses the single-class path.
    Marginalize(Vec<String>),
    /// Integrate out every location class jointly.
    MarginalizeAll,
    /// Non-centered sampling of the named classes.
    Reparam(Vec<String>),
}

impl FromStr for StrategyChoice {
    type Err = HarnessError;

    fn from_str(s: &str) -> HarnessResult<Self> {
        let list = |rest: &str| -> HarnessResult<Vec<String>> {
            let names: Vec<String> = rest.split(',').map(|n| n.trim().to_string()).collect();
            if names.iter().any(|n| n.is_empty()) {
                return Err(HarnessError::Config(format!("strategy {s:?} has an empty class name")));
            }
            Ok(names)
        };
        match s.split_once(':') {
            None if s == "none" => Ok(StrategyChoice::None),
            None if s == "config" => Ok(StrategyChoice::Config),
            Some(("marginalize", "all")) => Ok(StrategyChoice::MarginalizeAll),
            Some(("marginalize", rest)) => Ok(StrategyChoice::Marginalize(list(rest)?)),
            Some(("reparam", rest)) => Ok(StrategyChoice::Reparam(list(rest)?)),
            _ => Err(HarnessError::Config(format!(
                "unknown strategy {s:?}; expected none, marginalize:<classes>, marginalize:all or reparam:<classes>"
            ))),
        }
    }
}

impl fmt::Display for StrategyChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrategyChoice::Config => write!(f, "config"),
            StrategyChoice::None => write!(f, "none"),
            StrategyChoice::Marginalize(c) => write!(f, "marginalize:{}", c.join(",")),
            StrategyChoice::MarginalizeAll => write!(f, "marginalize:all"),
            StrategyChoice::Reparam(c) => write!(f, "reparam:{}", c.join(",")),
        }
    }
}

impl StrategyChoice {
    /// The model with strategies applied, and whether the joint full path is
    /// requested.
    pub fn apply(&self, model: &LmmModel) -> HarnessResult<(LmmModel, bool)> {
        let classes = model.classes();
        let index = |name: &str| {
            model
                .class_index(name)
                .ok_or_else(|| HarnessError::Config(format!("strategy names unknown class {name}")))
        };
        let mut strategies: Vec<Strategy> = vec![Strategy::Sample; classes.len()];
        let mut full = false;
        match self {
            StrategyChoice::Config => {
                strategies = classes.iter().map(|c| c.strategy).collect();
            }
            StrategyChoice::None => {}
            StrategyChoice::Marginalize(names) => {
                for n in names {
                    strategies[index(n)?] = Strategy::Marginalize;
                }
            }
            StrategyChoice::MarginalizeAll => {
                for (s, c) in strategies.iter_mut().zip(classes) {
                    if c.target == EffectTarget::Location {
                        *s = Strategy::Marginalize;
                    }
                }
                full = true;
            }
            StrategyChoice::Reparam(names) => {
                for n in names {
                    strategies[index(n)?] = Strategy::Reparameterize;
                }
            }
        }
        if matches!(self, StrategyChoice::Marginalize(_) | StrategyChoice::MarginalizeAll)
            && !strategies.contains(&Strategy::Marginalize)
        {
            return Err(HarnessError::Config(format!("strategy {self} marginalizes no class")));
        }
        let model = model.with_strategies(&strategies).map_err(HarnessError::config)?;
        Ok((model, full))
    }
}

/// Posterior draws in constrained coordinates together with recovered
/// effects of the marginalized classes.
#[derive(Debug, Clone)]
pub struct Fit {
    pub names: Vec<String>,
    /// `draws[c][i]` is draw `i` of chain `c`, columns as in `names`.
    pub draws: Vec<Vec<Vec<f64>>>,
    pub recovered_names: Vec<String>,
    pub recovered: Vec<Vec<Vec<f64>>>,
    pub chains: Vec<ChainOutput>,
    pub summary: Summary,
}

impl Fit {
    pub fn column(&self, name: &str) -> Option<Vec<Vec<f64>>> {
        let (rows, j) = match self.names.iter().position(|n| n == name) {
            Some(j) => (&self.draws, j),
            None => (&self.recovered, self.recovered_names.iter().position(|n| n == name)?),
        };
        Some(rows.iter().map(|c| c.iter().map(|d| d[j]).collect()).collect())
    }

    pub fn divergences(&self) -> usize {
        self.chains.iter().map(|c| c.divergences()).sum()
    }
}

/// Samples the model's HMC target and draws one exact conditional sample of
/// the marginalized effects per posterior draw.
pub fn fit(model: LmmModel, full: bool, nuts: &NutsConfig) -> HarnessResult<Fit> {
    let target = ModelTarget::new(Arc::new(model), full).map_err(HarnessError::config)?;
    let chains = run_chains(&target, nuts).map_err(HarnessError::numerical)?;
    let model = target.model();
    let marginalized = model.marginalized_classes();
    let recovered_names: Vec<String> = match target.pre() {
        Some(pre) => pre.classes().iter().flat_map(|&i| model.effect_names(i)).collect(),
        None => marginalized.iter().flat_map(|&i| model.effect_names(i)).collect(),
    };

    let per_chain: Vec<HarnessResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = chains
            .iter()
            .enumerate()
            .map(|(c, out)| {
                let target = &target;
                let marginalized = &marginalized;
                s.spawn(move || {
                    let model = target.model();
                    let constrained = out
                        .draws
                        .iter()
                        .map(|x| model.constrained_view(x))
                        .collect::<crate::Result<Vec<_>>>()
                        .map_err(HarnessError::numerical)?;
                    let mut rng = chain_rng(nuts.seed, nuts.chains + c);
                    let recovered = match (target.pre(), marginalized.first()) {
                        (Some(pre), _) => out
                            .draws
                            .iter()
                            .map(|x| {
                                let v = full_recovery(model, pre, x, &mut rng)?;
                                Ok(split_effects(model, pre, &v).into_iter().flat_map(|(_, u)| u).collect())
                            })
                            .collect::<crate::Result<Vec<Vec<f64>>>>(),
                        (None, Some(&i)) => recovery_sample(model, i, &out.draws, &mut rng),
                        (None, None) => Ok(vec![vec![]; out.draws.len()]),
                    }
                    .map_err(HarnessError::numerical)?;
                    Ok((constrained, recovered))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("recovery thread panicked")).collect()
    });
    let mut draws = Vec::with_capacity(chains.len());
    let mut recovered = Vec::with_capacity(chains.len());
    for r in per_chain {
        let (d, u) = r?;
        draws.push(d);
        recovered.push(u);
    }

    let names = model.constrained_names();
    let summary = summarize_parts(&names, &draws, &recovered_names, &recovered, &chains)?;
    Ok(Fit {
        names,
        draws,
        recovered_names,
        recovered,
        chains,
        summary,
    })
}

fn summarize_parts(
    names: &[String],
    draws: &[Vec<Vec<f64>>],
    recovered_names: &[String],
    recovered: &[Vec<Vec<f64>>],
    chains: &[ChainOutput],
) -> HarnessResult<Summary> {
    let all_names: Vec<String> = names.iter().chain(recovered_names).cloned().collect();
    let rows: Vec<Vec<Vec<f64>>> = draws
        .iter()
        .zip(recovered)
        .map(|(d, u)| d.iter().zip(u).map(|(a, b)| a.iter().chain(b).copied().collect()).collect())
        .collect();
    let stats: Vec<Vec<DrawStats>> = chains.iter().map(|c| c.stats.clone()).collect();
    let seconds = chains.iter().map(|c| c.sampling_seconds).sum();
    summarize(&all_names, &rows, &stats, seconds).map_err(HarnessError::numerical)
}

/// Command-line overrides; unset fields fall back to the config's
/// `[sampler]` section and then to the sampler defaults.
#[derive(Debug, Clone, Default)]
pub struct RunFlags {
    pub strategy: StrategyChoice,
    pub sampler: SamplerOverrides,
    pub out_dir: PathBuf,
}

impl RunFlags {
    pub fn nuts_config(&self, config: &ModelConfig) -> NutsConfig {
        let d = NutsConfig::default();
        let (a, b) = (&self.sampler, &config.sampler);
        NutsConfig {
            chains: a.chains.or(b.chains).unwrap_or(d.chains),
            warmup: a.warmup.or(b.warmup).unwrap_or(d.warmup),
            samples: a.samples.or(b.samples).unwrap_or(d.samples),
            seed: a.seed.or(b.seed).unwrap_or(d.seed),
            max_tree_depth: a.max_tree_depth.or(b.max_tree_depth).unwrap_or(d.max_tree_depth),
            target_accept: a.target_accept.or(b.target_accept).unwrap_or(d.target_accept),
            ..d
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// Warmup and sampling times are summed over chains.
    pub warmup_seconds: f64,
    pub sampling_seconds: f64,
    /// Post-warmup draws per second of sampling time.
    pub iterations_per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: String,
    pub config_sha256: String,
    pub data_sha256: String,
    pub strategy: String,
    pub seed: u64,
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub max_tree_depth: usize,
    pub target_accept: f64,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub timings: Timings,
    /// Every file written by the run, relative to the output directory.
    pub outputs: Vec<String>,
}

fn sha256_file(path: &Path) -> HarnessResult<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Loads config and data, fits the model under the chosen strategy and
/// writes draws, sampler statistics, recovered effects, the summary, the
/// group level mapping and the manifest into `flags.out_dir`.
pub fn run(config_path: &Path, data_path: &Path, flags: &RunFlags) -> HarnessResult<RunManifest> {
    let config = ModelConfig::load(config_path)?;
    let data = load_csv(data_path, &config)?;
    let model = config.build(&data)?;
    let (model, full) = flags.strategy.apply(&model)?;
    let nuts = flags.nuts_config(&config);
    nuts.validate().map_err(HarnessError::config)?;
    let fit = fit(model, full, &nuts)?;

    let outputs = write_outputs(&flags.out_dir, &fit, &data)?;
    let warmup_seconds = fit.chains.iter().map(|c| c.warmup_seconds).sum();
    let sampling_seconds = fit.chains.iter().map(|c| c.sampling_seconds).sum();
    let manifest = RunManifest {
        model: config.name.clone(),
        config_sha256: sha256_file(config_path)?,
        data_sha256: sha256_file(data_path)?,
        strategy: flags.strategy.to_string(),
        seed: nuts.seed,
        chains: nuts.chains,
        warmup: nuts.warmup,
        samples: nuts.samples,
        max_tree_depth: nuts.max_tree_depth,
        target_accept: nuts.target_accept,
        divergences: fit.summary.divergences,
        warmup_divergences: fit.chains.iter().map(|c| c.warmup_divergences).sum(),
        timings: Timings {
            warmup_seconds,
            sampling_seconds,
            iterations_per_second: fit.summary.iterations_per_second,
        },
        outputs: outputs.into_iter().chain(std::iter::once(MANIFEST.to_string())).collect(),
    };
    let text = toml::to_string(&manifest).map_err(|e| HarnessError::Io(e.to_string()))?;
    std::fs::write(flags.out_dir.join(MANIFEST), text)?;
    Ok(manifest)
}

pub const MANIFEST: &str = "manifest.toml";
pub const SUMMARY: &str = "summary.csv";
pub const LEVELS: &str = "levels.csv";

fn write_table(path: &Path, header: &[String], rows: &[Vec<f64>]) -> HarnessResult<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_outputs(dir: &Path, fit: &Fit, data: &Dataset) -> HarnessResult<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (c, chain) in fit.chains.iter().enumerate() {
        let name = format!("draws_{c}.csv");
        write_table(&dir.join(&name), &fit.names, &fit.draws[c])?;
        files.push(name);

        let name = format!("stats_{c}.csv");
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join(&name))?));
        for s in &chain.stats {
            w.serialize(s)?;
        }
        w.flush()?;
        files.push(name);

        if !fit.recovered_names.is_empty() {
            let name = format!("recovered_{c}.csv");
            write_table(&dir.join(&name), &fit.recovered_names, &fit.recovered[c])?;
            files.push(name);
        }
    }
    write_summary(&dir.join(SUMMARY), &fit.summary)?;
    files.push(SUMMARY.into());
    write_levels(BufWriter::new(File::create(dir.join(LEVELS))?), data)?;
    files.push(LEVELS.into());
    Ok(files)
}

pub fn write_summary(path: &Path, summary: &Summary) -> HarnessResult<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for p in &summary.params {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Prints a fixed-width summary table.
pub fn print_summary<W: Write>(mut out: W, summary: &Summary) -> std::io::Result<()> {
    writeln!(out, "{:<24} {:>12} {:>12} {:>10} {:>8} {:>8}", "name", "mean", "sd", "ess", "ess/it", "r_hat")?;
    for p in &summary.params {
        writeln!(
            out,
            "{:<24} {:>12.5} {:>12.5} {:>10.1} {:>8.4} {:>8.4}",
            p.name, p.mean, p.sd, p.ess, p.ess_per_iter, p.r_hat
        )?;
    }
    writeln!(
        out,
        "chains {}  draws/chain {}  divergences {}  iterations/s {:.1}",
        summary.chains, summary.draws_per_chain, summary.divergences, summary.iterations_per_second
    )
}

fn read_table(path: &Path) -> HarnessResult<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| HarnessError::Data(format!("{} row {}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// Recomputes the summary from the draws, recovered effects and sampler
/// statistics written by [`run`].
pub fn summarize_dir(dir: &Path) -> HarnessResult<Summary> {
    let manifest: Option<RunManifest> = std::fs::read_to_string(dir.join(MANIFEST))
        .ok()
        .map(|t| toml::from_str(&t).map_err(|e| HarnessError::Data(format!("{MANIFEST}: {e}"))))
        .transpose()?;
    let mut names = Vec::new();
    let mut chains = Vec::new();
    let mut stats = Vec::new();
    for c in 0.. {
        let draws = dir.join(format!("draws_{c}.csv"));
        if !draws.exists() {
            break;
        }
        let (mut header, mut rows) = read_table(&draws)?;
        let rec = dir.join(format!("recovered_{c}.csv"));
        if rec.exists() {
            let (h, r) = read_table(&rec)?;
            header.extend(h);
            rows.iter_mut().zip(r).for_each(|(a, b)| a.extend(b));
        }
        names = header;
        chains.push(rows);
        let mut r = csv::Reader::from_path(dir.join(format!("stats_{c}.csv")))?;
        stats.push(r.deserialize().collect::<Result<Vec<DrawStats>, _>>()?);
    }
    if chains.is_empty() {
        return Err(HarnessError::Data(format!("no draws files in {}", dir.display())));
    }
    let seconds = manifest.map_or(f64::NAN, |m| m.timings.sampling_seconds);
    summarize(&names, &chains, &stats, seconds).map_err(HarnessError::numerical)
}
