use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use marginal_lmm::harness::config::SamplerOverrides;
use marginal_lmm::harness::run::print_summary;
use marginal_lmm::harness::synth::TruthValue;
use marginal_lmm::harness::{
    benchmark, run, summarize_dir, synth_data, write_csv, BenchOptions, HarnessResult, ModelConfig,
    RunFlags,
};
use marginal_lmm::sampler::chain_rng;

#[derive(Parser)]
#[command(name = "marginal-lmm", version, about = "Bayesian mixed models with marginalized random effects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a CSV file and write draws, summary and manifest.
    Run(RunArgs),
    /// Time the marginal target and the dense oracle across problem sizes.
    Benchmark {
        /// Also write the report as CSV into this directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Simulate a dataset from a config; writes data.csv and truth.csv.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of observations; defaults to the config's [synth] n.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Recompute the summary table from the files of a previous run.
    Summarize {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// none | marginalize:<class>[,<class>] | marginalize:all | reparam:<class>[,<class>]
    #[arg(long, default_value = "config")]
    strategy: String,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    max_tree_depth: Option<usize>,
    #[arg(long)]
    target_accept: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> HarnessResult<()> {
    match command {
        Command::Run(a) => {
            let flags = RunFlags {
                strategy: a.strategy.parse()?,
                sampler: SamplerOverrides {
                    chains: a.chains,
                    warmup: a.warmup,
                    samples: a.samples,
                    seed: a.seed,
                    max_tree_depth: a.max_tree_depth,
                    target_accept: a.target_accept,
                },
                out_dir: a.out_dir,
            };
            let manifest = run(&a.config, &a.data, &flags)?;
            let summary = summarize_dir(&flags.out_dir)?;
            print_summary(std::io::stdout().lock(), &summary)?;
            println!("wrote {} files to {}", manifest.outputs.len(), flags.out_dir.display());
            Ok(())
        }
        Command::Benchmark { out_dir, seed } => {
            let report = benchmark(&BenchOptions {
                seed,
                ..Default::default()
            })?;
            report.print(std::io::stdout().lock())?;
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(&dir)?;
                let mut w = csv::Writer::from_path(dir.join("benchmark.csv"))?;
                w.write_record(["series", "size", "seconds"])?;
                for (series, rows) in [
                    ("fast", &report.fast),
                    ("dense", &report.dense),
                    ("groups", &report.groups),
                    ("gram", &report.gram),
                ] {
                    for t in rows {
                        w.write_record([series, &t.size.to_string(), &t.seconds.to_string()])?;
                    }
                }
                w.flush()?;
            }
            Ok(())
        }
        Command::Synth { config, out_dir, seed, n } => {
            let cfg = ModelConfig::load(&config)?;
            let section = cfg.synth.clone().unwrap_or_default();
            let n = n.unwrap_or(section.n);
            let truth: BTreeMap<String, TruthValue> = section.truth;
            let (data, gt) = synth_data(&cfg, &truth, n, &mut chain_rng(seed, 0))?;
            std::fs::create_dir_all(&out_dir)?;
            write_csv(BufWriter::new(File::create(out_dir.join("data.csv"))?), &data)?;
            let mut w = csv::Writer::from_path(out_dir.join("truth.csv"))?;
            w.write_record(["name", "value"])?;
            for (name, v) in gt.names.iter().zip(gt.theta.flatten()) {
                w.write_record([name.as_str(), &v.to_string()])?;
            }
            for (class, u) in &gt.effects {
                let c = cfg.classes.iter().find(|c| &c.name == class).expect("class from config");
                let d = c.block_dim();
                for (i, v) in u.iter().enumerate() {
                    w.write_record([format!("{class}[{},{}]", i / d + 1, i % d + 1), v.to_string()])?;
                }
            }
            w.flush()?;
            println!("wrote {n} rows to {}", out_dir.join("data.csv").display());
            Ok(())
        }
        Command::Summarize { out_dir } => {
            let summary = summarize_dir(&out_dir)?;
            print_summary(std::io::stdout().lock(), &summary)?;
            Ok(())
        }
    }
}

