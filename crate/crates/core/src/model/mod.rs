//! The canonical mixed model: global parameters, effect classes, the linear
//! observation model and the unmarginalized joint density.

pub mod params;

use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};
use crate::linalg::{forward_substitute, BlockDiagonal, DesignMatrix};
pub use params::{GlobalParamSpec, ParamEntry, Prior, Theta, Transform};
use params::LN_2PI;

/// A scalar quantity that is either fixed or read from a global parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Scalar {
    Const(f64),
    Param { entry: usize, index: usize },
}

impl Scalar {
    pub fn param(entry: usize) -> Self {
        Scalar::Param { entry, index: 0 }
    }

    pub fn eval(&self, theta: &Theta) -> f64 {
        match *self {
            Scalar::Const(c) => c,
            Scalar::Param { entry, index } => theta.get(entry, index),
        }
    }

    pub(crate) fn accumulate(&self, bar: &mut Theta, v: f64) {
        if let Scalar::Param { entry, index } = *self {
            bar.entry_mut(entry)[index] += v;
        }
    }

    fn is_zero(&self) -> bool {
        matches!(self, Scalar::Const(c) if *c == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Sample,
    Marginalize,
    Reparameterize,
}

/// What the effects of a class shift: the mean of the response or the log
/// of its noise standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectTarget {
    Location,
    LogNoiseScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    Normal,
    LogNormal,
}

/// One class of grouped effects. Per group, `u_j ~ N(μ, S Sᵀ)` with
/// `S = diag(scales) · L` and `L` the optional correlation Cholesky factor;
/// the class contributes `design_scale · A u` to its target.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectClass {
    pub name: String,
    pub design: DesignMatrix,
    pub mean: Vec<Scalar>,
    pub scales: Vec<Scalar>,
    pub corr: Option<usize>,
    pub design_scale: Scalar,
    pub target: EffectTarget,
    pub strategy: Strategy,
}

impl EffectClass {
    pub fn new(name: impl Into<String>, design: DesignMatrix, scales: Vec<Scalar>) -> Self {
        let d = design.block_dim();
        EffectClass {
            name: name.into(),
            design,
            mean: vec![Scalar::Const(0.0); d],
            scales,
            corr: None,
            design_scale: Scalar::Const(1.0),
            target: EffectTarget::Location,
            strategy: Strategy::Sample,
        }
    }

    pub fn with_mean(mut self, mean: Vec<Scalar>) -> Self {
        self.mean = mean;
        self
    }

    pub fn with_corr(mut self, entry: usize) -> Self {
        self.corr = Some(entry);
        self
    }

    pub fn with_design_scale(mut self, s: Scalar) -> Self {
        self.design_scale = s;
        self
    }

    pub fn with_target(mut self, target: EffectTarget) -> Self {
        self.target = target;
        self
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = strategy;
        self
    }

    /// Switch to the non-centered form `u = μ + S ε`, `ε ~ N(0, I)`.
    pub fn reparameterized(self) -> Self {
        self.with_strategy(Strategy::Reparameterize)
    }

    pub fn block_dim(&self) -> usize {
        self.design.block_dim()
    }

    pub fn n_effects(&self) -> usize {
        self.design.n_cols()
    }

    pub fn mean_vec(&self, theta: &Theta) -> Vec<f64> {
        self.mean.iter().map(|m| m.eval(theta)).collect()
    }

    /// Lower-triangular `S` (row-major `d × d`) with `Σ_block = S Sᵀ`.
    pub fn cov_factor(&self, theta: &Theta) -> Vec<f64> {
        let d = self.block_dim();
        let mut s = vec![0.0; d * d];
        for a in 0..d {
            let t = self.scales[a].eval(theta);
            match self.corr {
                Some(e) => {
                    let l = theta.entry(e);
                    for b in 0..=a {
                        s[a * d + b] = t * l[a * d + b];
                    }
                }
                None => s[a * d + a] = t,
            }
        }
        s
    }

    /// Block-diagonal covariance of all effects of the class.
    pub fn covariance(&self, theta: &Theta) -> BlockDiagonal {
        let d = self.block_dim();
        let s = self.cov_factor(theta);
        let mut block = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                block[a * d + b] = (0..=a.min(b)).map(|c| s[a * d + c] * s[b * d + c]).sum();
            }
        }
        BlockDiagonal::replicate(self.design.n_groups(), d, &block)
    }

    fn effect_names(&self) -> Vec<String> {
        let d = self.block_dim();
        (0..self.design.n_groups())
            .flat_map(|j| (0..d).map(move |a| (j, a)))
            .map(|(j, a)| format!("{}[{},{}]", self.name, j + 1, a + 1))
            .collect()
    }
}

/// `coef · covariate`, or just `coef` when the covariate is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTerm {
    pub coef: Scalar,
    pub covariate: Option<Vec<f64>>,
}

impl LinearTerm {
    pub fn intercept(coef: Scalar) -> Self {
        LinearTerm { coef, covariate: None }
    }

    pub fn slope(coef: Scalar, covariate: Vec<f64>) -> Self {
        LinearTerm {
            coef,
            covariate: Some(covariate),
        }
    }
}

/// Observation noise standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    /// One standard deviation shared by all observations.
    Scale(Scalar),
    /// `log σ_n` as a sum of linear terms plus any `LogNoiseScale` classes.
    LogLinear(Vec<LinearTerm>),
}

/// Unconstrained coordinate layout: globals first, then one block per sampled
/// or reparameterized class.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub global_dim: usize,
    pub class_offsets: Vec<Option<usize>>,
    pub dim: usize,
}

impl Layout {
    pub fn class_slice<'a>(&self, x: &'a [f64], class: usize, m: usize) -> Option<&'a [f64]> {
        self.class_offsets[class].map(|o| &x[o..o + m])
    }
}

/// Convenience wrapper pairing unconstrained coordinates with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub unconstrained: Vec<f64>,
    pub layout: Layout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmmModel {
    params: GlobalParamSpec,
    classes: Vec<EffectClass>,
    offset: Vec<LinearTerm>,
    noise: NoiseModel,
    likelihood: Likelihood,
    response: Vec<f64>,
    log_jacobian_const: f64,
    layout: Layout,
}

impl LmmModel {
    /// `y` is the raw response; log-normal models take its logarithm here.
    pub fn new(
        params: GlobalParamSpec,
        classes: Vec<EffectClass>,
        offset: Vec<LinearTerm>,
        noise: NoiseModel,
        likelihood: Likelihood,
        y: Vec<f64>,
    ) -> Result<Self> {
        let (response, log_jacobian_const) = match likelihood {
            Likelihood::Normal => (y, 0.0),
            Likelihood::LogNormal => {
                if let Some(i) = y.iter().position(|v| !(*v > 0.0)) {
                    return Err(Error::Domain(format!(
                        "log-normal response at row {i} is {}",
                        y[i]
                    )));
                }
                let jac = -y.iter().map(|v| v.ln()).sum::<f64>();
                (y.iter().map(|v| v.ln()).collect(), jac)
            }
        };
        Self::from_parts(params, classes, offset, noise, likelihood, response, log_jacobian_const)
    }

    fn from_parts(
        params: GlobalParamSpec,
        classes: Vec<EffectClass>,
        offset: Vec<LinearTerm>,
        noise: NoiseModel,
        likelihood: Likelihood,
        response: Vec<f64>,
        log_jacobian_const: f64,
    ) -> Result<Self> {
        let n = response.len();
        if response.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("response has non-finite values".into()));
        }
        let mut model = LmmModel {
            params,
            classes,
            offset,
            noise,
            likelihood,
            response,
            log_jacobian_const,
            layout: Layout {
                global_dim: 0,
                class_offsets: vec![],
                dim: 0,
            },
        };
        for t in &model.offset {
            model.check_term(t, n)?;
        }
        match &model.noise {
            NoiseModel::Scale(s) => model.check_positive(s, "noise scale")?,
            NoiseModel::LogLinear(terms) => {
                for t in terms {
                    model.check_term(t, n)?;
                }
            }
        }
        for c in &model.classes {
            model.check_class(c, n)?;
        }
        model.layout = model.compute_layout();
        Ok(model)
    }

    fn check_scalar(&self, s: &Scalar, what: &str) -> Result<()> {
        match *s {
            Scalar::Const(c) if c.is_finite() => Ok(()),
            Scalar::Const(c) => Err(Error::InvalidArgument(format!("{what}: constant {c}"))),
            Scalar::Param { entry, index } => {
                let ok = self
                    .params
                    .entries()
                    .get(entry)
                    .is_some_and(|e| index < e.constrained_len() && e.prior.transform() != Transform::CholeskyCorr);
                if ok {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!(
                        "{what}: no scalar parameter ({entry}, {index})"
                    )))
                }
            }
        }
    }

    fn check_positive(&self, s: &Scalar, what: &str) -> Result<()> {
        self.check_scalar(s, what)?;
        let ok = match *s {
            Scalar::Const(c) => c > 0.0,
            Scalar::Param { entry, .. } => self.params.entries()[entry].prior.transform() == Transform::Log,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("{what} must be positive")))
        }
    }

    fn check_term(&self, t: &LinearTerm, n: usize) -> Result<()> {
        self.check_scalar(&t.coef, "linear term coefficient")?;
        if let Some(c) = &t.covariate {
            dim_check("linear term covariate", n, c.len())?;
        }
        Ok(())
    }

    fn check_class(&self, c: &EffectClass, n: usize) -> Result<()> {
        let d = c.block_dim();
        dim_check(&format!("{} observations", c.name), n, c.design.n_obs())?;
        dim_check(&format!("{} mean", c.name), d, c.mean.len())?;
        dim_check(&format!("{} scales", c.name), d, c.scales.len())?;
        for m in &c.mean {
            self.check_scalar(m, &c.name)?;
        }
        for s in &c.scales {
            self.check_positive(s, &format!("{} scale", c.name))?;
        }
        self.check_positive(&c.design_scale, &format!("{} design scale", c.name))?;
        if let Some(e) = c.corr {
            match self.params.entries().get(e).map(|e| e.prior) {
                Some(Prior::LkjCholesky { dim, .. }) if dim == d => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "{}: correlation entry {e} is not a {d}-dimensional Cholesky factor",
                        c.name
                    )))
                }
            }
        }
        if c.target == EffectTarget::LogNoiseScale {
            if !matches!(self.noise, NoiseModel::LogLinear(_)) {
                return Err(Error::UnsupportedStructure(format!(
                    "{}: noise-scale effects need a log-linear noise model",
                    c.name
                )));
            }
            if c.strategy == Strategy::Marginalize {
                return Err(Error::UnsupportedStructure(format!(
                    "{}: the observation variance depends on this class, so it cannot be marginalized",
                    c.name
                )));
            }
        }
        Ok(())
    }

    fn compute_layout(&self) -> Layout {
        let global_dim = self.params.unconstrained_dim();
        let mut dim = global_dim;
        let class_offsets = self
            .classes
            .iter()
            .map(|c| match c.strategy {
                Strategy::Marginalize => None,
                _ => {
                    let o = dim;
                    dim += c.n_effects();
                    Some(o)
                }
            })
            .collect();
        Layout {
            global_dim,
            class_offsets,
            dim,
        }
    }

    pub fn params(&self) -> &GlobalParamSpec {
        &self.params
    }

    pub fn classes(&self) -> &[EffectClass] {
        &self.classes
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    pub fn offset_terms(&self) -> &[LinearTerm] {
        &self.offset
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn likelihood(&self) -> Likelihood {
        self.likelihood
    }

    /// Response on the Gaussian scale (log-transformed for log-normal models).
    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn n_obs(&self) -> usize {
        self.response.len()
    }

    /// `-Σ log y` for log-normal models, otherwise 0.
    pub fn log_jacobian_const(&self) -> f64 {
        self.log_jacobian_const
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn marginalized_classes(&self) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&i| self.classes[i].strategy == Strategy::Marginalize)
            .collect()
    }

    pub fn param_vector(&self, x: Vec<f64>) -> Result<ParamVector> {
        dim_check("parameter vector", self.layout.dim, x.len())?;
        Ok(ParamVector {
            unconstrained: x,
            layout: self.layout.clone(),
        })
    }

    /// Copy of the model with the strategy of one class replaced.
    pub fn with_strategy(&self, class: usize, strategy: Strategy) -> Result<LmmModel> {
        let mut classes = self.classes.clone();
        let c = classes
            .get_mut(class)
            .ok_or_else(|| Error::InvalidArgument(format!("no class {class}")))?;
        c.strategy = strategy;
        self.replace_classes(classes)
    }

    pub fn with_strategies(&self, strategies: &[Strategy]) -> Result<LmmModel> {
        dim_check("strategies", self.classes.len(), strategies.len())?;
        let classes = self
            .classes
            .iter()
            .zip(strategies)
            .map(|(c, s)| c.clone().with_strategy(*s))
            .collect();
        self.replace_classes(classes)
    }

    fn replace_classes(&self, classes: Vec<EffectClass>) -> Result<LmmModel> {
        Self::from_parts(
            self.params.clone(),
            classes,
            self.offset.clone(),
            self.noise.clone(),
            self.likelihood,
            self.response.clone(),
            self.log_jacobian_const,
        )
    }

    /// Build the unconstrained vector from constrained globals and the
    /// effects `u` of every non-marginalized class (reparameterized classes
    /// are converted to their standardized coordinates).
    pub fn unconstrain(&self, theta: &Theta, effects: &[Option<Vec<f64>>]) -> Result<Vec<f64>> {
        dim_check("class effects", self.classes.len(), effects.len())?;
        let mut x = self.params.unconstrain(theta)?;
        for (c, u) in self.classes.iter().zip(effects) {
            if c.strategy == Strategy::Marginalize {
                continue;
            }
            let u = u
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("{}: effects missing", c.name)))?;
            dim_check(&c.name, c.n_effects(), u.len())?;
            match c.strategy {
                Strategy::Reparameterize => {
                    let d = c.block_dim();
                    let s = c.cov_factor(theta);
                    let mu = c.mean_vec(theta);
                    for uj in u.chunks(d) {
                        let mut e: Vec<f64> = uj.iter().zip(&mu).map(|(a, b)| a - b).collect();
                        forward_substitute(&s, d, &mut e);
                        x.extend(e);
                    }
                }
                _ => x.extend_from_slice(u),
            }
        }
        Ok(x)
    }

    /// Evaluate every deterministic quantity of the model at `x`.
    pub fn materialize(&self, x: &[f64]) -> Result<State> {
        dim_check("parameter vector", self.layout.dim, x.len())?;
        let (theta, log_jacobian) = self.params.constrain(&x[..self.layout.global_dim])?;
        let n = self.n_obs();
        let mut location = vec![0.0; n];
        for t in &self.offset {
            add_term(t, &theta, &mut location);
        }
        let mut log_sd = vec![0.0; n];
        match &self.noise {
            NoiseModel::Scale(s) => {
                let v = s.eval(&theta);
                if !(v > 0.0) {
                    return Err(Error::Domain(format!("noise scale {v}")));
                }
                log_sd.fill(v.ln());
            }
            NoiseModel::LogLinear(terms) => {
                for t in terms {
                    add_term(t, &theta, &mut log_sd);
                }
            }
        }
        let mut classes = Vec::with_capacity(self.classes.len());
        for (i, c) in self.classes.iter().enumerate() {
            let d = c.block_dim();
            let mean = c.mean_vec(&theta);
            let factor = c.cov_factor(&theta);
            let design_scale = c.design_scale.eval(&theta);
            if let Some(a) = (0..d).find(|&a| !(factor[a * d + a] > 0.0)) {
                return Err(Error::NotPositiveDefinite {
                    context: "effect covariance",
                    block: Some(a),
                });
            }
            let coords = self.layout.class_slice(x, i, c.n_effects()).map(|s| s.to_vec());
            let effects = coords.as_ref().map(|raw| match c.strategy {
                Strategy::Reparameterize => reconstruct(raw, &mean, &factor, d),
                _ => raw.clone(),
            });
            if let Some(u) = &effects {
                let out = match c.target {
                    EffectTarget::Location => &mut location,
                    EffectTarget::LogNoiseScale => &mut log_sd,
                };
                c.design.apply_add(u, design_scale, out)?;
            }
            classes.push(ClassState {
                mean,
                factor,
                design_scale,
                coords,
                effects,
            });
        }
        let obs_var: Vec<f64> = log_sd.iter().map(|z| (2.0 * z).exp()).collect();
        if let Some(i) = obs_var.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!("observation variance {} at row {i}", obs_var[i])));
        }
        Ok(State {
            theta,
            log_jacobian,
            classes,
            location,
            log_sd,
            obs_var,
        })
    }

    /// Log prior of the globals, their log Jacobian, and the log density of
    /// all sampled and reparameterized effects.
    pub fn prior_terms(&self, st: &State) -> Result<f64> {
        let mut lp = self.params.prior_log_density(&st.theta)? + st.log_jacobian;
        for (c, cs) in self.classes.iter().zip(&st.classes) {
            let d = c.block_dim();
            match c.strategy {
                Strategy::Marginalize => {}
                Strategy::Reparameterize => {
                    let e = cs.coords.as_ref().unwrap();
                    lp += -0.5 * e.iter().map(|v| v * v).sum::<f64>() - 0.5 * e.len() as f64 * LN_2PI;
                }
                Strategy::Sample => {
                    let u = cs.effects.as_ref().unwrap();
                    let logdet: f64 = (0..d).map(|a| cs.factor[a * d + a].ln()).sum();
                    let mut w = vec![0.0; d];
                    let mut quad = 0.0;
                    for uj in u.chunks(d) {
                        for a in 0..d {
                            w[a] = uj[a] - cs.mean[a];
                        }
                        forward_substitute(&cs.factor, d, &mut w);
                        quad += w.iter().map(|v| v * v).sum::<f64>();
                    }
                    let k = c.design.n_groups() as f64;
                    lp += -0.5 * quad - k * logdet - 0.5 * (k * d as f64) * LN_2PI;
                }
            }
        }
        Ok(lp)
    }

    /// Column names of [`constrained_view`](Self::constrained_view).
    pub fn constrained_names(&self) -> Vec<String> {
        let mut names = self.params.component_names();
        for c in &self.classes {
            if c.strategy != Strategy::Marginalize {
                names.extend(c.effect_names());
            }
        }
        names
    }

    /// Constrained globals followed by the effects `u` of every
    /// non-marginalized class.
    pub fn constrained_view(&self, x: &[f64]) -> Result<Vec<f64>> {
        let st = self.materialize(x)?;
        let mut out = st.theta.flatten();
        for cs in &st.classes {
            if let Some(u) = &cs.effects {
                out.extend_from_slice(u);
            }
        }
        Ok(out)
    }

    pub fn effect_names(&self, class: usize) -> Vec<String> {
        self.classes[class].effect_names()
    }
}

fn add_term(t: &LinearTerm, theta: &Theta, out: &mut [f64]) {
    let c = t.coef.eval(theta);
    match &t.covariate {
        None => out.iter_mut().for_each(|o| *o += c),
        Some(cov) => out.iter_mut().zip(cov).for_each(|(o, v)| *o += c * v),
    }
}

fn reconstruct(eps: &[f64], mean: &[f64], s: &[f64], d: usize) -> Vec<f64> {
    let mut u = Vec::with_capacity(eps.len());
    for e in eps.chunks(d) {
        for a in 0..d {
            u.push(mean[a] + (0..=a).map(|b| s[a * d + b] * e[b]).sum::<f64>());
        }
    }
    u
}

/// Deterministic quantities of a model at one parameter point.
#[derive(Debug, Clone)]
pub struct State {
    pub theta: Theta,
    pub log_jacobian: f64,
    pub classes: Vec<ClassState>,
    /// Offset plus contributions of all non-marginalized location classes.
    pub location: Vec<f64>,
    pub log_sd: Vec<f64>,
    pub obs_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ClassState {
    pub mean: Vec<f64>,
    pub factor: Vec<f64>,
    pub design_scale: f64,
    /// Raw unconstrained block (absent for marginalized classes).
    pub coords: Option<Vec<f64>>,
    /// Effects `u` (absent for marginalized classes).
    pub effects: Option<Vec<f64>>,
}

/// Log density of `y ~ N(mean, diag(var))`.
pub fn gaussian_diag_log_density(y: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..y.len() {
        let r = y[i] - mean[i];
        s += var[i].ln() + r * r / var[i];
    }
    -0.5 * (s + y.len() as f64 * LN_2PI)
}

/// Unmarginalized log density of the HMC target; every class must be sampled
/// or reparameterized.
pub fn joint_log_density(model: &LmmModel, x: &[f64]) -> Result<f64> {
    if let Some(&i) = model.marginalized_classes().first() {
        return Err(Error::InvalidArgument(format!(
            "class {} is marginalized; use the marginal density",
            model.classes()[i].name
        )));
    }
    let st = model.materialize(x)?;
    Ok(model.prior_terms(&st)?
        + gaussian_diag_log_density(model.response(), &st.location, &st.obs_var)
        + model.log_jacobian_const())
}

/// Design matrix from group indices and per-observation coefficient rows.
pub fn build_design(groups: &[usize], n_groups: usize, covariate_rows: &[Vec<f64>]) -> Result<DesignMatrix> {
    dim_check("covariate rows", groups.len(), covariate_rows.len())?;
    let d = covariate_rows.first().map_or(1, |r| r.len());
    let mut coeffs = Vec::with_capacity(groups.len() * d);
    for (i, r) in covariate_rows.iter().enumerate() {
        dim_check(&format!("covariate row {i}"), d, r.len())?;
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("covariate row {i} is not finite")));
        }
        coeffs.extend_from_slice(r);
    }
    DesignMatrix::new(n_groups, d, groups.to_vec(), coeffs)
}

/// Design for an intercept plus slopes on the given covariates.
pub fn intercept_slope_design(groups: &[usize], n_groups: usize, covariates: &[&[f64]]) -> Result<DesignMatrix> {
    let rows: Vec<Vec<f64>> = (0..groups.len())
        .map(|i| std::iter::once(1.0).chain(covariates.iter().map(|c| c[i])).collect())
        .collect();
    for c in covariates {
        dim_check("covariate", groups.len(), c.len())?;
    }
    build_design(groups, n_groups, &rows)
}

/// Moves a class with `u ~ N(μ, σ² I)` to standardized effects
/// `u' ~ N(0, I)` by folding `σ` into the design and `A μ` into the offset.
/// The returned model's density at `u'` equals the original at
/// `u = μ + σ u'` up to the Jacobian term `M log σ`.
pub fn standardize_class(model: &LmmModel, class: usize) -> Result<LmmModel> {
    let c = model
        .classes
        .get(class)
        .ok_or_else(|| Error::InvalidArgument(format!("no class {class}")))?;
    if c.corr.is_some() || c.scales.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::UnsupportedStructure(format!(
            "{}: covariance is not a scaled identity",
            c.name
        )));
    }
    let sigma = c.scales[0];
    let mut new = c.clone();
    new.scales = vec![Scalar::Const(1.0); c.block_dim()];
    new.mean = vec![Scalar::Const(0.0); c.block_dim()];
    let design_const = match (sigma, c.design_scale) {
        (Scalar::Const(sv), s) => {
            new.design = c.design.scaled(sv);
            new.design_scale = s;
            match s {
                Scalar::Const(v) => Some(v),
                _ => None,
            }
        }
        (p, Scalar::Const(sv)) => {
            new.design = c.design.scaled(sv);
            new.design_scale = p;
            Some(sv)
        }
        _ => {
            return Err(Error::UnsupportedStructure(format!(
                "{}: both the scale and the design scale are parameters",
                c.name
            )))
        }
    };
    let mut offset = model.offset.clone();
    let mut noise = model.noise.clone();
    for (a, m) in c.mean.iter().enumerate() {
        if m.is_zero() {
            continue;
        }
        let Some(sv) = design_const else {
            return Err(Error::UnsupportedStructure(format!(
                "{}: nonzero mean with a parameter design scale",
                c.name
            )));
        };
        let col: Vec<f64> = c.design.coeff_column(a).iter().map(|v| v * sv).collect();
        let term = LinearTerm::slope(*m, col);
        match (c.target, &mut noise) {
            (EffectTarget::Location, _) => offset.push(term),
            (EffectTarget::LogNoiseScale, NoiseModel::LogLinear(t)) => t.push(term),
            _ => unreachable!("validated at construction"),
        }
    }
    let mut classes = model.classes.clone();
    classes[class] = new;
    LmmModel::from_parts(
        model.params.clone(),
        classes,
        offset,
        noise,
        model.likelihood,
        model.response.clone(),
        model.log_jacobian_const,
    )
}
