//! Global parameters: priors, constraining transforms and their adjoints.

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use crate::error::{Error, Result};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Prior {
    Normal { loc: f64, scale: f64 },
    HalfNormal { scale: f64 },
    HalfCauchy { scale: f64 },
    LkjCholesky { dim: usize, eta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Log,
    CholeskyCorr,
}

impl Prior {
    pub fn transform(&self) -> Transform {
        match self {
            Prior::Normal { .. } => Transform::Identity,
            Prior::HalfNormal { .. } | Prior::HalfCauchy { .. } => Transform::Log,
            Prior::LkjCholesky { .. } => Transform::CholeskyCorr,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Prior::Normal { loc, scale } => loc.is_finite() && scale > 0.0,
            Prior::HalfNormal { scale } | Prior::HalfCauchy { scale } => scale > 0.0,
            Prior::LkjCholesky { dim, eta } => dim >= 1 && eta > 0.0,
        };
        if ok && !matches!(self, Prior::Normal { scale, .. } if !scale.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid prior {self:?}")))
        }
    }

    /// Log density of one scalar component.
    fn scalar_log_density(&self, x: f64) -> Result<f64> {
        match *self {
            Prior::Normal { loc, scale } => {
                let r = (x - loc) / scale;
                Ok(-0.5 * LN_2PI - scale.ln() - 0.5 * r * r)
            }
            Prior::HalfNormal { scale } => {
                positive(x)?;
                let r = x / scale;
                Ok(LN_2 - 0.5 * LN_2PI - scale.ln() - 0.5 * r * r)
            }
            Prior::HalfCauchy { scale } => {
                positive(x)?;
                let r = x / scale;
                Ok(LN_2 - PI.ln() - scale.ln() - (r * r).ln_1p())
            }
            Prior::LkjCholesky { .. } => unreachable!("matrix prior"),
        }
    }

    /// d/dx of the scalar log density.
    fn scalar_log_density_grad(&self, x: f64) -> f64 {
        match *self {
            Prior::Normal { loc, scale } => -(x - loc) / (scale * scale),
            Prior::HalfNormal { scale } => -x / (scale * scale),
            Prior::HalfCauchy { scale } => -2.0 * x / (scale * scale + x * x),
            Prior::LkjCholesky { .. } => unreachable!("matrix prior"),
        }
    }
}

fn positive(x: f64) -> Result<()> {
    if x > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("positive parameter has value {x}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub prior: Prior,
    /// Number of iid scalar components; ignored for matrix priors.
    #[serde(default = "one")]
    pub size: usize,
}

fn one() -> usize {
    1
}

impl ParamEntry {
    /// Length of the constrained value vector.
    pub fn constrained_len(&self) -> usize {
        match self.prior {
            Prior::LkjCholesky { dim, .. } => dim * dim,
            _ => self.size,
        }
    }

    pub fn unconstrained_len(&self) -> usize {
        match self.prior {
            Prior::LkjCholesky { dim, .. } => dim * (dim - 1) / 2,
            _ => self.size,
        }
    }

    /// Column names of the constrained components, e.g. `tau[1]` or `L[2,1]`.
    pub fn component_names(&self) -> Vec<String> {
        match self.prior {
            Prior::LkjCholesky { dim, .. } => (0..dim)
                .flat_map(|r| (0..dim).map(move |c| (r, c)))
                .map(|(r, c)| format!("{}[{},{}]", self.name, r + 1, c + 1))
                .collect(),
            _ if self.size == 1 => vec![self.name.clone()],
            _ => (0..self.size)
                .map(|i| format!("{}[{}]", self.name, i + 1))
                .collect(),
        }
    }
}

/// Constrained global parameter values, one vector per entry. Cholesky
/// correlation factors are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    values: Vec<Vec<f64>>,
}

impl Theta {
    pub fn new(values: Vec<Vec<f64>>) -> Self {
        Self { values }
    }

    pub fn entry(&self, e: usize) -> &[f64] {
        &self.values[e]
    }

    pub fn entry_mut(&mut self, e: usize) -> &mut [f64] {
        &mut self.values[e]
    }

    pub fn get(&self, e: usize, i: usize) -> f64 {
        self.values[e][i]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn zeros_like(&self) -> Theta {
        Theta {
            values: self.values.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }
}

/// Ordered global parameter entries with their unconstrained layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GlobalParamSpec {
    entries: Vec<ParamEntry>,
    offsets: Vec<usize>,
    dim: usize,
}

impl GlobalParamSpec {
    pub fn new(entries: Vec<ParamEntry>) -> Result<Self> {
        let mut spec = GlobalParamSpec::default();
        for e in entries {
            spec.push(e)?;
        }
        Ok(spec)
    }

    /// Append an entry; returns its index.
    pub fn push(&mut self, entry: ParamEntry) -> Result<usize> {
        entry.prior.validate()?;
        if entry.size == 0 && !matches!(entry.prior, Prior::LkjCholesky { .. }) {
            return Err(Error::InvalidArgument(format!("{}: size 0", entry.name)));
        }
        if self.index_of(&entry.name).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {}",
                entry.name
            )));
        }
        self.offsets.push(self.dim);
        self.dim += entry.unconstrained_len();
        self.entries.push(entry);
        Ok(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn unconstrained_dim(&self) -> usize {
        self.dim
    }

    pub fn offset(&self, e: usize) -> usize {
        self.offsets[e]
    }

    pub fn component_names(&self) -> Vec<String> {
        self.entries.iter().flat_map(|e| e.component_names()).collect()
    }

    /// Map unconstrained coordinates to constrained values; returns the log
    /// absolute Jacobian determinant of the map.
    pub fn constrain(&self, x: &[f64]) -> Result<(Theta, f64)> {
        crate::error::dim_check("unconstrained globals", self.dim, x.len())?;
        let mut values = Vec::with_capacity(self.entries.len());
        let mut log_jac = 0.0;
        for (e, entry) in self.entries.iter().enumerate() {
            let xs = &x[self.offsets[e]..self.offsets[e] + entry.unconstrained_len()];
            match entry.prior.transform() {
                Transform::Identity => values.push(xs.to_vec()),
                Transform::Log => {
                    values.push(xs.iter().map(|v| v.exp()).collect());
                    log_jac += xs.iter().sum::<f64>();
                }
                Transform::CholeskyCorr => {
                    let Prior::LkjCholesky { dim, .. } = entry.prior else {
                        unreachable!()
                    };
                    let (l, lj) = corr_cholesky_constrain(xs, dim);
                    values.push(l);
                    log_jac += lj;
                }
            }
        }
        Ok((Theta { values }, log_jac))
    }

    /// Inverse of [`constrain`](Self::constrain).
    pub fn unconstrain(&self, theta: &Theta) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(self.dim);
        for (e, entry) in self.entries.iter().enumerate() {
            let v = theta.entry(e);
            crate::error::dim_check(&entry.name, entry.constrained_len(), v.len())?;
            match entry.prior.transform() {
                Transform::Identity => x.extend_from_slice(v),
                Transform::Log => {
                    for &s in v {
                        positive(s)?;
                        x.push(s.ln());
                    }
                }
                Transform::CholeskyCorr => {
                    let Prior::LkjCholesky { dim, .. } = entry.prior else {
                        unreachable!()
                    };
                    x.extend(corr_cholesky_unconstrain(v, dim)?);
                }
            }
        }
        Ok(x)
    }

    /// Sum of the prior log densities of all entries at constrained values.
    pub fn prior_log_density(&self, theta: &Theta) -> Result<f64> {
        let mut lp = 0.0;
        for (e, entry) in self.entries.iter().enumerate() {
            let v = theta.entry(e);
            match entry.prior {
                Prior::LkjCholesky { dim, eta } => lp += lkj_cholesky_log_density(v, dim, eta)?,
                p => {
                    for &x in v {
                        lp += p.scalar_log_density(x)?;
                    }
                }
            }
        }
        Ok(lp)
    }

    /// Accumulate into `grad` the derivative, with respect to the unconstrained
    /// coordinates, of `prior + log_jacobian + Σ theta_bar · theta`.
    pub(crate) fn backprop(
        &self,
        x: &[f64],
        theta: &Theta,
        theta_bar: &Theta,
        grad: &mut [f64],
    ) {
        for (e, entry) in self.entries.iter().enumerate() {
            let off = self.offsets[e];
            let v = theta.entry(e);
            let vb = theta_bar.entry(e);
            match entry.prior {
                Prior::LkjCholesky { dim, eta } => {
                    let xs = &x[off..off + entry.unconstrained_len()];
                    let mut lbar = vb.to_vec();
                    lkj_cholesky_log_density_grad(v, dim, eta, &mut lbar);
                    corr_cholesky_backprop(xs, dim, &lbar, &mut grad[off..]);
                }
                p => {
                    let log_tf = p.transform() == Transform::Log;
                    for i in 0..v.len() {
                        let dv = vb[i] + p.scalar_log_density_grad(v[i]);
                        grad[off + i] += if log_tf { dv * v[i] + 1.0 } else { dv };
                    }
                }
            }
        }
    }
}

/// Row-wise construction of a correlation Cholesky factor from
/// unconstrained reals via canonical partial correlations `tanh(y)`.
pub fn corr_cholesky_constrain(y: &[f64], dim: usize) -> (Vec<f64>, f64) {
    debug_assert_eq!(y.len(), dim * (dim - 1) / 2);
    let mut l = vec![0.0; dim * dim];
    let mut log_jac = 0.0;
    l[0] = 1.0;
    let mut k = 0;
    for i in 1..dim {
        let mut sum_sqs = 0.0f64;
        for j in 0..i {
            let z = y[k].tanh();
            k += 1;
            log_jac += (1.0 - z * z).ln();
            if j > 0 {
                log_jac += 0.5 * (1.0 - sum_sqs).ln();
            }
            let v = z * (1.0 - sum_sqs).sqrt();
            l[i * dim + j] = v;
            sum_sqs += v * v;
        }
        l[i * dim + i] = (1.0 - sum_sqs).sqrt();
    }
    (l, log_jac)
}

pub fn corr_cholesky_unconstrain(l: &[f64], dim: usize) -> Result<Vec<f64>> {
    let mut y = Vec::with_capacity(dim * (dim - 1) / 2);
    for i in 1..dim {
        let mut sum_sqs = 0.0f64;
        for j in 0..i {
            let v = l[i * dim + j];
            let z = v / (1.0 - sum_sqs).sqrt();
            if !(z.abs() < 1.0) {
                return Err(Error::Domain(format!(
                    "correlation Cholesky entry ({i},{j}) = {v} is on or outside the boundary"
                )));
            }
            y.push(z.atanh());
            sum_sqs += v * v;
        }
    }
    Ok(y)
}

/// Reverse pass through [`corr_cholesky_constrain`] including its log
/// Jacobian; adds into `grad[..dim(dim-1)/2]`.
fn corr_cholesky_backprop(y: &[f64], dim: usize, lbar: &[f64], grad: &mut [f64]) {
    let mut k0 = 0;
    for i in 1..dim {
        // forward replay of row i
        let mut zs = Vec::with_capacity(i);
        let mut ss = Vec::with_capacity(i + 1);
        let mut vals = Vec::with_capacity(i);
        let mut sum_sqs = 0.0f64;
        for j in 0..i {
            let z = y[k0 + j].tanh();
            ss.push(sum_sqs);
            let v = z * (1.0 - sum_sqs).sqrt();
            zs.push(z);
            vals.push(v);
            sum_sqs += v * v;
        }
        let diag = (1.0 - sum_sqs).sqrt();
        // reverse
        let mut sbar = -lbar[i * dim + i] / (2.0 * diag);
        for j in (0..i).rev() {
            let v = vals[j];
            let z = zs[j];
            let s = ss[j];
            let w = (1.0 - s).sqrt();
            let vbar = lbar[i * dim + j] + 2.0 * v * sbar;
            let zbar = vbar * w;
            let wbar = vbar * z;
            sbar += -wbar / (2.0 * w);
            if j > 0 {
                sbar += -0.5 / (1.0 - s);
            }
            grad[k0 + j] += zbar * (1.0 - z * z) - 2.0 * z;
        }
        k0 += i;
    }
}

/// Log normalizing constant of the LKJ density over correlation matrices.
fn lkj_log_normalizer(dim: usize, eta: f64) -> f64 {
    let kk = dim as f64;
    (1..dim)
        .map(|k| {
            let m = kk - k as f64;
            let a = eta + (m - 1.0) / 2.0;
            (2.0 * eta - 2.0 + m) * m * LN_2 + m * ln_beta(a, a)
        })
        .sum()
}

/// LKJ density expressed on the Cholesky factor (includes the Jacobian of
/// `L ↦ L Lᵀ`).
pub fn lkj_cholesky_log_density(l: &[f64], dim: usize, eta: f64) -> Result<f64> {
    let mut lp = -lkj_log_normalizer(dim, eta);
    for i in 1..dim {
        let d = l[i * dim + i];
        if !(d > 0.0) {
            return Err(Error::Domain(format!(
                "correlation Cholesky diagonal {i} is {d}"
            )));
        }
        let c = (dim - i - 1) as f64 + 2.0 * eta - 2.0;
        lp += c * d.ln();
    }
    Ok(lp)
}

fn lkj_cholesky_log_density_grad(l: &[f64], dim: usize, eta: f64, lbar: &mut [f64]) {
    for i in 1..dim {
        let c = (dim - i - 1) as f64 + 2.0 * eta - 2.0;
        lbar[i * dim + i] += c / l[i * dim + i];
    }
}
