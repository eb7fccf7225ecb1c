//! Wall-clock scaling of the marginal target, the dense oracle and the gram
//! kernel. Each size is timed as the median of `repeats` runs, and each run
//! repeats the call until `min_seconds` have elapsed.

use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{HarnessError, HarnessResult};
use crate::gradient::{grad_log_density, TargetKind};
use crate::linalg::DesignMatrix;
use crate::model::{
    intercept_slope_design, EffectClass, GlobalParamSpec, Likelihood, LinearTerm, LmmModel, NoiseModel, ParamEntry,
    Prior, Scalar, Strategy,
};
use crate::oracle;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    /// Observation counts for the fast path.
    pub sizes: Vec<usize>,
    /// Observation counts for the dense oracle.
    pub dense_sizes: Vec<usize>,
    /// Group counts of the marginalized class at `group_sweep_n` observations.
    pub group_sweep: Vec<usize>,
    pub group_sweep_n: usize,
    /// Observation count for the gram timing at block sizes 2 and 4.
    pub gram_n: usize,
    pub repeats: usize,
    pub min_seconds: f64,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            sizes: vec![2_000, 20_000, 200_000],
            dense_sizes: vec![500, 1_000, 2_000, 4_000],
            group_sweep: vec![100, 1_000, 10_000],
            group_sweep_n: 20_000,
            gram_n: 200_000,
            repeats: 5,
            min_seconds: 0.05,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub size: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub fast: Vec<Timing>,
    pub fast_slope: f64,
    pub dense: Vec<Timing>,
    pub dense_slope: f64,
    pub groups: Vec<Timing>,
    pub groups_slope: f64,
    pub gram: Vec<Timing>,
    /// Gram time at block size 4 over block size 2.
    pub gram_ratio: f64,
}

impl BenchReport {
    pub fn print<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let sections = [
            ("marginal density + gradient, by N", &self.fast, Some(self.fast_slope)),
            ("dense oracle, by N", &self.dense, Some(self.dense_slope)),
            ("marginal density + gradient, by groups", &self.groups, Some(self.groups_slope)),
            ("gram, by block size", &self.gram, None),
        ];
        for (title, rows, slope) in sections {
            writeln!(out, "{title}")?;
            for t in rows {
                writeln!(out, "  {:>8}  {:.6e} s", t.size, t.seconds)?;
            }
            if let Some(s) = slope {
                writeln!(out, "  log-log slope {s:.3}")?;
            }
        }
        writeln!(out, "  block size 4 / 2 time ratio {:.3}", self.gram_ratio)
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Median over `repeats` runs of the mean time per call.
pub fn time_it(repeats: usize, min_seconds: f64, mut f: impl FnMut()) -> f64 {
    f();
    let mut runs: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let start = Instant::now();
            let mut calls = 0u32;
            loop {
                f();
                calls += 1;
                let t = start.elapsed().as_secs_f64();
                if t >= min_seconds {
                    return t / calls as f64;
                }
            }
        })
        .collect();
    runs.sort_by(f64::total_cmp);
    runs[runs.len() / 2]
}

/// Two correlated intercept-and-slope classes with `k1` and `k2` groups; the
/// first is marginalized.
pub fn bench_model(n: usize, k1: usize, k2: usize, seed: u64) -> HarnessResult<LmmModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entry = |name: &str, prior, size| ParamEntry {
        name: name.into(),
        prior,
        size,
    };
    let spec = GlobalParamSpec::new(vec![
        entry("alpha", Prior::Normal { loc: 0.0, scale: 5.0 }, 1),
        entry("beta", Prior::Normal { loc: 0.0, scale: 5.0 }, 1),
        entry("sigma", Prior::HalfNormal { scale: 2.0 }, 1),
        entry("tau_a", Prior::HalfNormal { scale: 2.0 }, 2),
        entry("L_a", Prior::LkjCholesky { dim: 2, eta: 2.0 }, 1),
        entry("tau_b", Prior::HalfNormal { scale: 2.0 }, 2),
        entry("L_b", Prior::LkjCholesky { dim: 2, eta: 2.0 }, 1),
    ])
    .map_err(HarnessError::config)?;
    let t: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g1: Vec<usize> = (0..n).map(|i| if i < k1 { i } else { rng.random_range(0..k1) }).collect();
    let g2: Vec<usize> = (0..n).map(|i| if i < k2 { i } else { rng.random_range(0..k2) }).collect();
    let y: Vec<f64> = t.iter().map(|v| 0.5 + v + rng.random_range(-1.0..1.0)).collect();
    let class = |name: &str, g: &[usize], k: usize, tau: usize, l: usize| -> HarnessResult<EffectClass> {
        let design = intercept_slope_design(g, k, &[&t]).map_err(HarnessError::config)?;
        Ok(EffectClass::new(name, design, vec![Scalar::Param { entry: tau, index: 0 }, Scalar::Param { entry: tau, index: 1 }]).with_corr(l))
    };
    let classes = vec![
        class("a", &g1, k1, 3, 4)?.with_strategy(Strategy::Marginalize),
        class("b", &g2, k2, 5, 6)?,
    ];
    LmmModel::new(
        spec,
        classes,
        vec![LinearTerm::intercept(Scalar::param(0)), LinearTerm::slope(Scalar::param(1), t.clone())],
        NoiseModel::Scale(Scalar::param(2)),
        Likelihood::Normal,
        y,
    )
    .map_err(HarnessError::config)
}

fn point(model: &LmmModel, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..model.dim()).map(|_| rng.random_range(-0.5..0.5)).collect()
}

fn time_marginal(model: &LmmModel, opts: &BenchOptions) -> HarnessResult<f64> {
    let x = point(model, opts.seed);
    grad_log_density(TargetKind::Marginal(0), model, &x).map_err(HarnessError::numerical)?;
    Ok(time_it(opts.repeats, opts.min_seconds, || {
        black_box(grad_log_density(TargetKind::Marginal(0), model, black_box(&x)).unwrap());
    }))
}

fn slope(t: &[Timing]) -> f64 {
    let x: Vec<f64> = t.iter().map(|t| t.size as f64).collect();
    let y: Vec<f64> = t.iter().map(|t| t.seconds).collect();
    log_log_slope(&x, &y)
}

pub fn benchmark(opts: &BenchOptions) -> HarnessResult<BenchReport> {
    let (k1, k2) = (50, 20);
    let mut fast = Vec::new();
    for &n in &opts.sizes {
        let model = bench_model(n, k1, k2, opts.seed)?;
        fast.push(Timing {
            size: n,
            seconds: time_marginal(&model, opts)?,
        });
    }

    let mut dense = Vec::new();
    for &n in &opts.dense_sizes {
        let model = bench_model(n, k1, k2, opts.seed)?;
        let x = point(&model, opts.seed);
        oracle::marginal_log_likelihood(&model, &x, &[0]).map_err(HarnessError::numerical)?;
        let seconds = time_it(opts.repeats, opts.min_seconds, || {
            black_box(oracle::marginal_log_likelihood(&model, black_box(&x), &[0]).unwrap());
        });
        dense.push(Timing { size: n, seconds });
    }

    let mut groups = Vec::new();
    for &m in &opts.group_sweep {
        let model = bench_model(opts.group_sweep_n, m, k2, opts.seed)?;
        groups.push(Timing {
            size: m,
            seconds: time_marginal(&model, opts)?,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = opts.gram_n;
    let g: Vec<usize> = (0..n).map(|_| rng.random_range(0..100)).collect();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    let mut gram = Vec::new();
    for d in [2, 4] {
        let coeffs: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = DesignMatrix::new(100, d, g.clone(), coeffs).map_err(HarnessError::config)?;
        let seconds = time_it(opts.repeats, opts.min_seconds, || {
            black_box(a.gram(black_box(&w)).unwrap());
        });
        gram.push(Timing { size: d, seconds });
    }

    Ok(BenchReport {
        fast_slope: slope(&fast),
        dense_slope: slope(&dense),
        groups_slope: slope(&groups),
        gram_ratio: gram[1].seconds / gram[0].seconds,
        fast,
        dense,
        groups,
        gram,
    })
}
