//! Effective sample size, split R-hat and run summaries.

use std::collections::BTreeMap;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sampler::DrawStats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ess {
    pub ess: f64,
    /// Set when every draw is identical and the estimate is meaningless.
    pub degenerate: bool,
}

/// Biased autocovariance at all lags via zero-padded FFT.
fn autocovariance(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let m = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    buf.resize(m, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(m).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(m).process(&mut buf);
    buf[..n].iter().map(|c| c.re / (m as f64 * n as f64)).collect()
}

/// Effective sample size of one scalar quantity across chains, using the
/// combined autocorrelation estimate truncated by Geyer's initial monotone
/// sequence.
pub fn ess(chains: &[&[f64]]) -> Result<Ess> {
    if chains.is_empty() {
        return Err(Error::InvalidArgument("ess needs at least one chain".into()));
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap();
    if n < 4 {
        return Err(Error::InvalidArgument("ess needs at least 4 draws per chain".into()));
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let first = chains[0][0];
    if chains.iter().all(|c| c.iter().all(|v| *v == first)) {
        return Ok(Ess {
            ess: 0.0,
            degenerate: true,
        });
    }
    let m = chains.len() as f64;
    let nf = n as f64;
    let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(c)).collect();
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / nf).collect();
    let mean_var = acov.iter().map(|a| a[0] * nf / (nf - 1.0)).sum::<f64>() / m;
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if chains.len() > 1 {
        let gm = means.iter().sum::<f64>() / m;
        var_plus += means.iter().map(|v| (v - gm).powi(2)).sum::<f64>() / (m - 1.0);
    }
    if !(var_plus > 0.0) {
        return Ok(Ess {
            ess: 0.0,
            degenerate: true,
        });
    }
    let lag = |t: usize| acov.iter().map(|a| a[t]).sum::<f64>() / m;
    let rho_at = |t: usize| 1.0 - (mean_var - lag(t)) / var_plus;

    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho_at(1);
    rho[1] = odd;
    let mut t = 1;
    while t + 2 < n && t < n - 5 && even + odd > 0.0 {
        even = rho_at(t + 1);
        odd = rho_at(t + 2);
        if even + odd >= 0.0 {
            rho[t + 1] = even;
            rho[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t;
    if even > 0.0 && max_t + 1 < n {
        rho[max_t + 1] = even;
    }
    let mut t = 1;
    while t + 2 <= max_t {
        let prev = rho[t - 1] + rho[t];
        if rho[t + 1] + rho[t + 2] > prev {
            rho[t + 1] = prev / 2.0;
            rho[t + 2] = prev / 2.0;
        }
        t += 2;
    }
    let total = m * nf;
    let tail = if max_t + 1 < n { rho[max_t + 1] } else { 0.0 };
    let mut tau = -1.0 + 2.0 * rho[..=max_t.min(n - 1)].iter().sum::<f64>() + tail;
    tau = tau.max(1.0 / total.log10());
    Ok(Ess {
        ess: (total / tau).min(1.5 * total),
        degenerate: false,
    })
}

/// Split R-hat: each chain is halved and the between/within variance ratio is
/// computed over the halves.
pub fn r_hat(chains: &[&[f64]]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::InvalidArgument("r_hat needs at least 2 chains".into()));
    }
    let n = chains[0].len();
    if n < 4 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidArgument("r_hat needs equal chains of at least 4 draws".into()));
    }
    let half = n / 2;
    let mut parts: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        parts.push(&c[..half]);
        parts.push(&c[n - half..]);
    }
    let nf = half as f64;
    let mf = parts.len() as f64;
    let means: Vec<f64> = parts.iter().map(|p| p.iter().sum::<f64>() / nf).collect();
    let vars: Vec<f64> = parts
        .iter()
        .zip(&means)
        .map(|(p, m)| p.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (nf - 1.0))
        .collect();
    let gm = means.iter().sum::<f64>() / mf;
    let b = nf * means.iter().map(|m| (m - gm).powi(2)).sum::<f64>() / (mf - 1.0);
    let w = vars.iter().sum::<f64>() / mf;
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    Ok((var_plus / w).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub ess: f64,
    pub ess_per_iter: f64,
    pub r_hat: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub params: Vec<ParamSummary>,
    pub chains: usize,
    pub draws_per_chain: usize,
    pub divergences: usize,
    pub iterations_per_second: f64,
}

impl Summary {
    pub fn param(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Arithmetic mean of per-coordinate ESS for each parameter block, where
    /// a block is every name sharing the prefix before `[`.
    pub fn block_mean_ess(&self) -> Vec<(String, f64)> {
        let mut blocks: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        let mut order = Vec::new();
        for p in &self.params {
            let key = p.name.split('[').next().unwrap_or(&p.name);
            let e = blocks.entry(key).or_insert_with(|| {
                order.push(key);
                (0.0, 0)
            });
            e.0 += p.ess;
            e.1 += 1;
        }
        order
            .into_iter()
            .map(|k| (k.to_string(), blocks[k].0 / blocks[k].1 as f64))
            .collect()
    }
}

/// Summaries of every column. `chains[c][i][j]` is draw `i` of column `j` in
/// chain `c`; `seconds` is the total post-warmup sampling time over chains.
pub fn summarize(
    names: &[String],
    chains: &[Vec<Vec<f64>>],
    stats: &[Vec<DrawStats>],
    seconds: f64,
) -> Result<Summary> {
    if chains.is_empty() {
        return Err(Error::InvalidArgument("no chains to summarize".into()));
    }
    let draws = chains[0].len();
    if chains.iter().any(|c| c.len() != draws) {
        return Err(Error::InvalidArgument("chains have different lengths".into()));
    }
    let total = (draws * chains.len()) as f64;
    let mut params = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let cols: Vec<Vec<f64>> = chains
            .iter()
            .map(|c| c.iter().map(|d| d[j]).collect())
            .collect();
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        let all: Vec<f64> = cols.iter().flatten().copied().collect();
        let mean = all.iter().sum::<f64>() / total;
        let sd = if all.len() > 1 {
            (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (total - 1.0)).sqrt()
        } else {
            0.0
        };
        let e = if draws >= 4 {
            ess(&refs)?
        } else {
            Ess {
                ess: f64::NAN,
                degenerate: true,
            }
        };
        let rh = r_hat(&refs).unwrap_or(f64::NAN);
        params.push(ParamSummary {
            name: name.clone(),
            mean,
            sd,
            ess: e.ess,
            ess_per_iter: e.ess / total,
            r_hat: rh,
            degenerate: e.degenerate,
        });
    }
    let divergences = stats.iter().flatten().filter(|s| s.divergent).count();
    Ok(Summary {
        params,
        chains: chains.len(),
        draws_per_chain: draws,
        divergences,
        iterations_per_second: if seconds > 0.0 { total / seconds } else { f64::NAN },
    })
}
