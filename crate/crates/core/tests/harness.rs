use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use marginal_lmm::harness::config::SamplerOverrides;
use marginal_lmm::harness::synth::TruthValue;
use marginal_lmm::harness::{
    fit, read_csv, run, summarize_dir, synth_data, write_csv, HarnessError, ModelConfig, RunFlags, StrategyChoice,
};
use marginal_lmm::sampler::{chain_rng, NutsConfig};

const TOY: &str = r#"
schema_version = 1
name = "toy"
likelihood = "normal"
response = "y"

[intercept]
name = "alpha"
prior = { family = "normal", scale = 5.0 }

[[fixed]]
column = "x"
name = "beta"
prior = { family = "normal", scale = 5.0 }

[noise.scale]
name = "sigma"
prior = { family = "half_normal", scale = 2.0 }

[[classes]]
name = "g"
group = "g"
scale = { name = "tau", prior = { family = "half_normal", scale = 2.0 } }

[synth]
n = 200

[synth.levels]
g = 8

[synth.truth]
alpha = 1.0
beta = 0.5
sigma = 0.8
tau = 0.7
"#;

fn toy() -> ModelConfig {
    ModelConfig::from_toml(TOY).unwrap()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn truth(c: &ModelConfig) -> BTreeMap<String, TruthValue> {
    c.synth.clone().unwrap().truth
}

fn quick(seed: u64) -> NutsConfig {
    NutsConfig {
        warmup: 300,
        samples: 300,
        chains: 2,
        seed,
        ..Default::default()
    }
}

#[test]
fn group_levels_follow_first_appearance() {
    let c = toy();
    let data = read_csv("y,x,g\n1.0,0.5,a\n2.0,0.1,a\n3.0,-1,b\n".as_bytes(), &c).unwrap();
    let g = data.group("g").unwrap();
    assert_eq!(g.index, vec![0, 0, 1]);
    assert_eq!(g.n_levels(), 2);
    assert_eq!(g.levels, vec!["a", "b"]);
    let data = read_csv("g,y,x\n7,1,0\n3,1,0\n7,1,0\n".as_bytes(), &c).unwrap();
    assert_eq!(data.group("g").unwrap().index, vec![0, 1, 0]);
}

#[test]
fn ingestion_errors_name_the_row() {
    let mut c = toy();
    c.likelihood = marginal_lmm::harness::config::LikelihoodName::Lognormal;
    let err = read_csv("y,x,g\n1.0,0,a\n0.0,0,a\n".as_bytes(), &c).unwrap_err();
    assert!(matches!(&err, HarnessError::Data(m) if m.contains("row 2")), "{err}");
    let err = read_csv("y,x,g\n1.0,zz,a\n".as_bytes(), &toy()).unwrap_err();
    assert!(matches!(&err, HarnessError::Data(m) if m.contains("row 1") && m.contains("x")), "{err}");
    let err = read_csv("y,g\n1.0,a\n".as_bytes(), &toy()).unwrap_err();
    assert!(matches!(&err, HarnessError::Data(m) if m.contains("missing column x")), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn config_errors_are_rejected() {
    let bad = [
        TOY.replace("schema_version = 1", "schema_version = 2"),
        TOY.replace("schema_version = 1\n", ""),
        TOY.replace("likelihood = \"normal\"", "likelihood = \"poisson\""),
        TOY.replace("[noise.scale]", "[noise.log_linear]"),
        TOY.replace("scale = { name = \"tau\"", "lkj_eta = 2.0\nscale = { name = \"tau\""),
        TOY.replace("name = \"alpha\"", "name = \"alpha\"\ncolour = 3"),
    ];
    for text in bad {
        let err = ModelConfig::from_toml(&text).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
    }
    let c = ModelConfig::from_toml(&TOY.replace("family = \"half_normal\", scale = 2.0 } }", "family = \"normal\", scale = 2.0 } }")).unwrap();
    let (data, _) = synth_data(&toy(), &truth(&toy()), 20, &mut chain_rng(1, 0)).unwrap();
    assert!(matches!(c.build(&data), Err(HarnessError::Config(_))));
}

#[test]
fn strategies_parse_and_apply() {
    let cases = ["none", "config", "marginalize:g", "marginalize:all", "reparam:g", "marginalize:a,b"];
    for s in cases {
        assert_eq!(s.parse::<StrategyChoice>().unwrap().to_string(), s);
    }
    assert!("marginalize".parse::<StrategyChoice>().is_err());
    assert!("reparam:".parse::<StrategyChoice>().is_err());

    let c = toy();
    let (data, _) = synth_data(&c, &truth(&c), 50, &mut chain_rng(2, 0)).unwrap();
    let model = c.build(&data).unwrap();
    let (m, full) = StrategyChoice::MarginalizeAll.apply(&model).unwrap();
    assert!(full && m.marginalized_classes() == vec![0]);
    let err = StrategyChoice::Marginalize(vec!["nope".into()]).apply(&model).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn noise_classes_cannot_be_marginalized() {
    let c = ModelConfig::load(&configs_dir().join("stroop.toml")).unwrap();
    let (data, _) = synth_data(&c, &truth(&c), 300, &mut chain_rng(3, 0)).unwrap();
    let model = c.build(&data).unwrap();
    let err = StrategyChoice::Marginalize(vec!["s".into()]).apply(&model).unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)), "{err}");
}

#[test]
fn synthetic_data_round_trips_through_csv() {
    for name in ["toy", "grouseticks", "stroop", "gg05"] {
        let c = if name == "toy" {
            toy()
        } else {
            ModelConfig::load(&configs_dir().join(format!("{name}.toml"))).unwrap()
        };
        let (data, _) = synth_data(&c, &truth(&c), 150, &mut chain_rng(4, 0)).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &data).unwrap();
        let back = read_csv(buf.as_slice(), &c).unwrap();
        assert_eq!(back, data, "{name}");
    }
}

#[test]
fn vanishing_noise_reproduces_the_linear_predictor() {
    let c = toy();
    let mut t = truth(&c);
    t.insert("sigma".into(), TruthValue::Scalar(1e-8));
    let (data, gt) = synth_data(&c, &t, 500, &mut chain_rng(5, 0)).unwrap();
    for (y, m) in data.response.iter().zip(&gt.linear_predictor) {
        assert!((y - m).abs() <= 1e-6);
    }
    let x = data.column("x").unwrap();
    let g = &data.group("g").unwrap().index;
    let u = &gt.effects[0].1;
    for i in 0..data.n() {
        let expected = 1.0 + 0.5 * x[i] + u[g[i]];
        assert!((gt.linear_predictor[i] - expected).abs() < 1e-12);
    }
}

#[test]
fn unspecified_truth_is_drawn_from_the_prior() {
    let c = ModelConfig::load(&configs_dir().join("english.toml")).unwrap();
    let (_, a) = synth_data(&c, &BTreeMap::new(), 100, &mut chain_rng(6, 0)).unwrap();
    let (_, b) = synth_data(&c, &BTreeMap::new(), 100, &mut chain_rng(7, 0)).unwrap();
    assert_ne!(a.value("alpha"), b.value("alpha"));
    let l = a.theta.flatten();
    let i = a.names.iter().position(|n| n == "L_subj[2,1]").unwrap();
    assert!((l[i].powi(2) + l[i + 1].powi(2) - 1.0).abs() < 1e-12);
    assert!(a.value("tau_subj[1]").unwrap() > 0.0);
}

#[test]
fn bundled_configs_match_their_dimensions() {
    // (config, N, group counts, lognormal)
    let table: [(&str, usize, &[usize], bool); 11] = [
        ("pupil", 2228, &[20], false),
        ("grouseticks", 403, &[118, 63], false),
        ("eth", 73421, &[2972, 1128, 14], false),
        ("dillonE1", 2855, &[40, 48], true),
        ("dutch", 372, &[24, 16], false),
        ("eeg", 26176, &[334, 80], false),
        ("english", 768, &[48, 16], false),
        ("gg05", 672, &[42, 16, 2], true),
        ("mandarin", 547, &[37, 15], true),
        ("mandarin2", 595, &[40, 15], true),
        ("stroop", 3058, &[50, 50], true),
    ];
    for (name, n, groups, lognormal) in table {
        let c = ModelConfig::load(&configs_dir().join(format!("{name}.toml"))).unwrap();
        assert_eq!(c.name, name);
        let s = c.synth.clone().unwrap();
        assert_eq!(s.n, n, "{name}");
        let (data, _) = synth_data(&c, &s.truth, n, &mut chain_rng(8, 0)).unwrap();
        let model = c.build(&data).unwrap();
        assert_eq!(model.n_obs(), n);
        let k: Vec<usize> = model.classes().iter().map(|c| c.design.n_groups()).collect();
        assert_eq!(k, groups, "{name}");
        assert_eq!(model.likelihood() == marginal_lmm::model::Likelihood::LogNormal, lognormal, "{name}");
    }
    let pupil = ModelConfig::load(&configs_dir().join("pupil.toml")).unwrap();
    let alpha = pupil.intercept.unwrap();
    assert_eq!(
        alpha.prior,
        marginal_lmm::harness::config::PriorConfig::Normal { loc: 1000.0, scale: 500.0 }
    );
}

#[test]
fn pupil_shaped_file_has_twenty_subjects() {
    let c = ModelConfig::load(&configs_dir().join("pupil.toml")).unwrap();
    let (data, _) = synth_data(&c, &truth(&c), 2228, &mut chain_rng(9, 0)).unwrap();
    let mut buf = Vec::new();
    write_csv(&mut buf, &data).unwrap();
    let back = read_csv(buf.as_slice(), &c).unwrap();
    assert_eq!(back.n(), 2228);
    assert_eq!(back.group("subj").unwrap().n_levels(), 20);
}

#[test]
fn posterior_sd_of_beta_shrinks_with_n() {
    let c = toy();
    let sd = |n: usize| {
        let (data, _) = synth_data(&c, &truth(&c), n, &mut chain_rng(10, 0)).unwrap();
        let (model, full) = StrategyChoice::Marginalize(vec!["g".into()]).apply(&c.build(&data).unwrap()).unwrap();
        let f = fit(model, full, &NutsConfig { samples: 1000, chains: 4, ..quick(10) }).unwrap();
        f.summary.param("beta").unwrap().sd
    };
    let ratio = sd(200) / sd(2000);
    assert!((2.2..=4.5).contains(&ratio), "{ratio}");
}

#[test]
fn strategies_agree_on_a_toy() {
    let c = toy();
    let (data, _) = synth_data(&c, &truth(&c), 200, &mut chain_rng(11, 0)).unwrap();
    let base = c.build(&data).unwrap();
    let cfg = NutsConfig {
        samples: 2000,
        chains: 4,
        ..quick(11)
    };
    let fits: Vec<_> = ["none", "marginalize:g", "reparam:g"]
        .iter()
        .map(|s| {
            let (m, full) = s.parse::<StrategyChoice>().unwrap().apply(&base).unwrap();
            fit(m, full, &cfg).unwrap()
        })
        .collect();
    for name in ["alpha", "beta", "sigma", "tau"] {
        let a = fits[0].summary.param(name).unwrap();
        for f in &fits[1..] {
            let b = f.summary.param(name).unwrap();
            let se = (a.sd.powi(2) / a.ess + b.sd.powi(2) / b.ess).sqrt();
            assert!((a.mean - b.mean).abs() <= 3.0 * se, "{name}: {} vs {} (se {se})", a.mean, b.mean);
        }
    }
    assert_eq!(fits[1].recovered_names.len(), 8);
    assert!(fits[1].names.iter().all(|n| !n.starts_with("g[")));
}

fn write_toy_data(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let c = toy();
    let (data, _) = synth_data(&c, &truth(&c), 120, &mut chain_rng(seed, 0)).unwrap();
    let cfg = dir.join("toy.toml");
    std::fs::write(&cfg, TOY).unwrap();
    let csv = dir.join("toy.csv");
    write_csv(std::fs::File::create(&csv).unwrap(), &data).unwrap();
    (cfg, csv)
}

fn flags(dir: &Path, strategy: &str) -> RunFlags {
    RunFlags {
        strategy: strategy.parse().unwrap(),
        sampler: SamplerOverrides {
            chains: Some(2),
            warmup: Some(200),
            samples: Some(200),
            seed: Some(5),
            ..Default::default()
        },
        out_dir: dir.to_path_buf(),
    }
}

#[test]
fn identical_seeds_write_identical_draws() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, csv) = write_toy_data(tmp.path(), 12);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ma = run(&cfg, &csv, &flags(&a, "marginalize:g")).unwrap();
    run(&cfg, &csv, &flags(&b, "marginalize:g")).unwrap();
    for f in ma.outputs.iter().filter(|f| f.starts_with("draws") || f.starts_with("recovered")) {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn run_writes_every_listed_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, csv) = write_toy_data(tmp.path(), 13);
    let out = tmp.path().join("out");
    let m = run(&cfg, &csv, &flags(&out, "marginalize:g")).unwrap();
    let mut listed = m.outputs.clone();
    listed.sort();
    let mut present: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    present.sort();
    assert_eq!(listed, present);
    assert_eq!(m.strategy, "marginalize:g");
    assert_eq!(m.config_sha256.len(), 64);
    assert!(m.timings.iterations_per_second > 0.0);

    let header = std::fs::read_to_string(out.join("draws_0.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), "alpha,beta,sigma,tau");
    let mut rec = csv::Reader::from_path(out.join("recovered_1.csv")).unwrap();
    let names: Vec<String> = rec.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(names, (1..=8).map(|j| format!("g[{j},1]")).collect::<Vec<_>>());
    let levels = std::fs::read_to_string(out.join("levels.csv")).unwrap();
    assert_eq!(levels.lines().count(), 1 + 8);
}

#[test]
fn summary_is_reproduced_from_the_draws_files() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, csv) = write_toy_data(tmp.path(), 14);
    let out = tmp.path().join("out");
    run(&cfg, &csv, &flags(&out, "none")).unwrap();
    let c = ModelConfig::load(&cfg).unwrap();
    let data = marginal_lmm::harness::load_csv(&csv, &c).unwrap();
    let (model, full) = StrategyChoice::None.apply(&c.build(&data).unwrap()).unwrap();
    let f = fit(model, full, &flags(&out, "none").nuts_config(&c)).unwrap();
    let again = summarize_dir(&out).unwrap();
    assert_eq!(again.params.len(), f.summary.params.len());
    assert_eq!(again.divergences, f.summary.divergences);
    for (a, b) in again.params.iter().zip(&f.summary.params) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.sd, b.sd);
        assert_eq!(a.ess.to_bits(), b.ess.to_bits());
    }
}

#[test]
fn command_line_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_marginal-lmm");
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, csv) = write_toy_data(tmp.path(), 15);
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code().unwrap();
    let out = tmp.path().join("out");
    let common = ["--chains", "1", "--warmup", "50", "--samples", "20", "--out-dir", out.to_str().unwrap()];
    let run_with = |config: &Path, data: &Path, strategy: &str| {
        let mut a = vec!["run", "--config", config.to_str().unwrap(), "--data", data.to_str().unwrap(), "--strategy", strategy];
        a.extend(common);
        status(&a)
    };
    assert_eq!(run_with(&cfg, &csv, "marginalize:g"), 0);
    assert_eq!(status(&["summarize", "--out-dir", out.to_str().unwrap()]), 0);
    assert_eq!(run_with(&cfg, &csv, "marginalize:zzz"), 2);

    let bad_cfg = tmp.path().join("bad.toml");
    std::fs::write(&bad_cfg, TOY.replace("schema_version = 1", "schema_version = 9")).unwrap();
    assert_eq!(run_with(&bad_cfg, &csv, "none"), 2);

    let bad_csv = tmp.path().join("bad.csv");
    std::fs::write(&bad_csv, "y,x,g\n1,2,a\n1,oops,b\n").unwrap();
    assert_eq!(run_with(&cfg, &bad_csv, "none"), 3);

    let huge = tmp.path().join("huge.csv");
    std::fs::write(&huge, "y,x,g\n1e300,0,a\n-1e300,1,b\n1e300,0,b\n").unwrap();
    assert_eq!(run_with(&cfg, &huge, "none"), 4);

    let synth_out = tmp.path().join("synth");
    assert_eq!(status(&["synth", "--config", cfg.to_str().unwrap(), "--out-dir", synth_out.to_str().unwrap(), "--n", "30"]), 0);
    assert_eq!(std::fs::read_to_string(synth_out.join("data.csv")).unwrap().lines().count(), 31);
}
