//! Gradients of every HMC target with respect to the unconstrained
//! coordinates, by hand-written reverse passes over the structured forward
//! computations.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{backward_substitute_transposed, forward_substitute};
use crate::marginal::{
    self, class_workspace, full_marginal_preprocess, full_workspace, FullMarginalPre,
};
use crate::model::{
    gaussian_diag_log_density, joint_log_density, EffectClass, EffectTarget, LmmModel, NoiseModel, State, Strategy, Theta,
};
use crate::sampler::LogDensity;

#[derive(Debug, Clone, Copy)]
pub enum TargetKind<'a> {
    Joint,
    Marginal(usize),
    FullMarginal(&'a FullMarginalPre),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Value of the chosen target.
pub fn log_density(kind: TargetKind, model: &LmmModel, x: &[f64]) -> Result<f64> {
    match kind {
        TargetKind::Joint => joint_log_density(model, x),
        TargetKind::Marginal(i) => marginal::marginal_log_density(model, i, x),
        TargetKind::FullMarginal(pre) => marginal::full_marginal_log_density(model, pre, x),
    }
}

/// Adjoints accumulated for one effect class.
struct ClassBar {
    mean: Vec<f64>,
    factor: Vec<f64>,
    design_scale: f64,
}

/// Value and gradient of the chosen target.
pub fn grad_log_density(kind: TargetKind, model: &LmmModel, x: &[f64]) -> Result<GradResult> {
    let st = model.materialize(x)?;
    let n = model.n_obs();
    let y = model.response();
    let mut loc_bar = vec![0.0; n];
    let mut var_bar = vec![0.0; n];
    let mut bars: Vec<ClassBar> = model
        .classes()
        .iter()
        .map(|c| ClassBar {
            mean: vec![0.0; c.block_dim()],
            factor: vec![0.0; c.block_dim() * c.block_dim()],
            design_scale: 0.0,
        })
        .collect();

    let likelihood = match kind {
        TargetKind::Joint => {
            if !model.marginalized_classes().is_empty() {
                return Err(Error::InvalidArgument("joint target with marginalized classes".into()));
            }
            for i in 0..n {
                let v = st.obs_var[i];
                let r = y[i] - st.location[i];
                loc_bar[i] = r / v;
                var_bar[i] = -0.5 * (1.0 / v - r * r / (v * v));
            }
            gaussian_diag_log_density(y, &st.location, &st.obs_var)
        }
        TargetKind::Marginal(ci) => {
            if model.marginalized_classes() != [ci] {
                return Err(Error::InvalidArgument(format!(
                    "class {ci} must be the only marginalized class"
                )));
            }
            single_class_reverse(model, &st, ci, &mut loc_bar, &mut var_bar, &mut bars[ci])?
        }
        TargetKind::FullMarginal(pre) => full_reverse(model, pre, &st, &mut loc_bar, &mut var_bar, &mut bars)?,
    };
    let value = likelihood + model.log_jacobian_const() + model.prior_terms(&st)?;

    let mut grad = vec![0.0; model.dim()];
    let mut theta_bar = st.theta.zeros_like();
    let log_sd_bar: Vec<f64> = (0..n).map(|i| 2.0 * st.obs_var[i] * var_bar[i]).collect();

    for (ci, c) in model.classes().iter().enumerate() {
        let cs = &st.classes[ci];
        let d = c.block_dim();
        let bar = &mut bars[ci];
        let (Some(u), Some(raw)) = (&cs.effects, &cs.coords) else {
            continue;
        };
        let off = model.layout().class_offsets[ci].expect("non-marginalized class");
        let target_bar = match c.target {
            EffectTarget::Location => &loc_bar,
            EffectTarget::LogNoiseScale => &log_sd_bar,
        };
        let mut u_bar = c.design.apply_transpose(target_bar)?;
        let au = c.design.apply(u)?;
        bar.design_scale += au.iter().zip(target_bar).map(|(a, b)| a * b).sum::<f64>();
        u_bar.iter_mut().for_each(|v| *v *= cs.design_scale);
        match c.strategy {
            Strategy::Sample => {
                let mut w = vec![0.0; d];
                let mut ww = vec![0.0; d * d];
                for (j, uj) in u.chunks(d).enumerate() {
                    for a in 0..d {
                        w[a] = uj[a] - cs.mean[a];
                    }
                    forward_substitute(&cs.factor, d, &mut w);
                    for a in 0..d {
                        for b in 0..=a {
                            ww[a * d + b] += w[a] * w[b];
                        }
                    }
                    let mut g = w.clone();
                    backward_substitute_transposed(&cs.factor, d, &mut g);
                    for a in 0..d {
                        u_bar[j * d + a] -= g[a];
                        bar.mean[a] += g[a];
                    }
                }
                // S⁻ᵀ (Σ w wᵀ) restricted to the lower triangle
                let mut full = vec![0.0; d * d];
                for a in 0..d {
                    for b in 0..d {
                        full[a * d + b] = if b <= a { ww[a * d + b] } else { ww[b * d + a] };
                    }
                }
                for b in 0..d {
                    let mut col: Vec<f64> = (0..d).map(|a| full[a * d + b]).collect();
                    backward_substitute_transposed(&cs.factor, d, &mut col);
                    for a in b..d {
                        bar.factor[a * d + b] += col[a];
                    }
                }
                let k = c.design.n_groups() as f64;
                for a in 0..d {
                    bar.factor[a * d + a] -= k / cs.factor[a * d + a];
                }
                for (g, ub) in grad[off..off + u.len()].iter_mut().zip(&u_bar) {
                    *g += ub;
                }
            }
            Strategy::Reparameterize => {
                for (j, ej) in raw.chunks(d).enumerate() {
                    let ub = &u_bar[j * d..(j + 1) * d];
                    for a in 0..d {
                        bar.mean[a] += ub[a];
                        for b in 0..=a {
                            bar.factor[a * d + b] += ub[a] * ej[b];
                        }
                    }
                    for b in 0..d {
                        let sb: f64 = (b..d).map(|a| cs.factor[a * d + b] * ub[a]).sum();
                        grad[off + j * d + b] += sb - ej[b];
                    }
                }
            }
            Strategy::Marginalize => unreachable!(),
        }
    }

    for t in model.offset_terms() {
        t.coef.accumulate(&mut theta_bar, term_dot(t.covariate.as_deref(), &loc_bar));
    }
    match model.noise() {
        NoiseModel::Scale(s) => {
            let sigma = s.eval(&st.theta);
            s.accumulate(&mut theta_bar, log_sd_bar.iter().sum::<f64>() / sigma);
        }
        NoiseModel::LogLinear(terms) => {
            for t in terms {
                t.coef.accumulate(&mut theta_bar, term_dot(t.covariate.as_deref(), &log_sd_bar));
            }
        }
    }
    for (ci, c) in model.classes().iter().enumerate() {
        class_param_backprop(c, &st, &bars[ci], &mut theta_bar);
    }
    let gdim = model.layout().global_dim;
    model.params().backprop(&x[..gdim], &st.theta, &theta_bar, &mut grad[..gdim]);
    Ok(GradResult { value, grad })
}

fn term_dot(cov: Option<&[f64]>, bar: &[f64]) -> f64 {
    match cov {
        None => bar.iter().sum(),
        Some(c) => c.iter().zip(bar).map(|(a, b)| a * b).sum(),
    }
}

/// Push the mean, factor and design-scale adjoints of a class into `Θ`.
fn class_param_backprop(c: &EffectClass, st: &State, bar: &ClassBar, theta_bar: &mut Theta) {
    let d = c.block_dim();
    for (m, v) in c.mean.iter().zip(&bar.mean) {
        m.accumulate(theta_bar, *v);
    }
    c.design_scale.accumulate(theta_bar, bar.design_scale);
    let corr = c.corr.map(|e| st.theta.entry(e).to_vec());
    for a in 0..d {
        let t = c.scales[a].eval(&st.theta);
        match (&corr, c.corr) {
            (Some(l), Some(e)) => {
                let mut tb = 0.0;
                for b in 0..=a {
                    tb += bar.factor[a * d + b] * l[a * d + b];
                    theta_bar.entry_mut(e)[a * d + b] += t * bar.factor[a * d + b];
                }
                c.scales[a].accumulate(theta_bar, tb);
            }
            _ => c.scales[a].accumulate(theta_bar, bar.factor[a * d + a]),
        }
    }
}

/// Reverse pass of the single-class marginal likelihood. Fills the adjoints
/// of the predictor and observation variances and of the class mean, factor
/// and design scale; returns the likelihood value.
fn single_class_reverse(
    model: &LmmModel,
    st: &State,
    ci: usize,
    loc_bar: &mut [f64],
    var_bar: &mut [f64],
    bar: &mut ClassBar,
) -> Result<f64> {
    let c = &model.classes()[ci];
    let cs = &st.classes[ci];
    let ws = class_workspace(model, st, ci)?;
    let d = c.block_dim();
    let k = c.design.n_groups();
    let s = cs.design_scale;
    let a = &c.design;

    // E⁻¹ z = W (z - A F⁻¹ x)
    let af = a.apply(&ws.f_inv_x)?;
    let ez: Vec<f64> = (0..model.n_obs()).map(|i| ws.w[i] * (ws.z[i] - af[i])).collect();
    let q = a.apply_transpose(&ez)?;
    let f_inv = ws.f_chol.inverse();

    for i in 0..model.n_obs() {
        loc_bar[i] += ez[i];
        let row = a.row(i);
        let fb = f_inv.block(a.group_of()[i]);
        let mut quad = 0.0;
        for p in 0..d {
            for r in 0..d {
                quad += row[p] * fb[p * d + r] * row[r];
            }
        }
        let e_inv_nn = ws.w[i] - ws.w[i] * ws.w[i] * quad;
        var_bar[i] += 0.5 * (ez[i] * ez[i] - e_inv_nn);
    }

    // shared block adjoint ½ [Σ q qᵀ - k P + P (Σ F⁻¹) P]
    let p = ws.sigma_u_inv.block(0);
    let mut qq = vec![0.0; d * d];
    let mut fsum = vec![0.0; d * d];
    let mut qsum = vec![0.0; d];
    for j in 0..k {
        let qj = &q[j * d..(j + 1) * d];
        let fj = f_inv.block(j);
        for r in 0..d {
            qsum[r] += qj[r];
            for t in 0..d {
                qq[r * d + t] += qj[r] * qj[t];
                fsum[r * d + t] += fj[r * d + t];
            }
        }
    }
    let pfp = mat_mul(&mat_mul(p, &fsum, d), p, d);
    let sigma_bar: Vec<f64> = (0..d * d)
        .map(|i| 0.5 * (qq[i] - k as f64 * p[i] + pfp[i]))
        .collect();
    let s_eff: Vec<f64> = cs.factor.iter().map(|v| s * v).collect();
    let s_eff_bar = mat_mul(&sigma_bar, &s_eff, d);
    for r in 0..d {
        for t in 0..=r {
            let g = 2.0 * s_eff_bar[r * d + t];
            bar.factor[r * d + t] += s * g;
            bar.design_scale += g * cs.factor[r * d + t];
        }
        bar.mean[r] += s * qsum[r];
        bar.design_scale += cs.mean[r] * qsum[r];
    }
    Ok(ws.log_likelihood())
}

fn mat_mul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for r in 0..d {
        for t in 0..d {
            out[r * d + t] = (0..d).map(|m| a[r * d + m] * b[m * d + t]).sum();
        }
    }
    out
}

/// Reverse pass of the full marginal likelihood.
fn full_reverse(
    model: &LmmModel,
    pre: &FullMarginalPre,
    st: &State,
    loc_bar: &mut [f64],
    var_bar: &mut [f64],
    bars: &mut [ClassBar],
) -> Result<f64> {
    let ws = full_workspace(model, pre, st)?;
    let (tv, ty) = (ws.tau_v, ws.tau_y);
    let n = model.n_obs() as f64;
    let dd = pre.dim() as f64;
    let lambda = pre.lambda();
    let mut inv_c = 0.0;
    let mut h2 = 0.0;
    let mut lam_c = 0.0;
    let mut p_term = 0.0;
    let mut h = Vec::with_capacity(pre.dim());
    for k in 0..pre.dim() {
        let (p, c, l) = (ws.p[k], ws.c[k], lambda[k]);
        inv_c += 1.0 / c;
        h2 += (p / c) * (p / c);
        lam_c += l / c;
        p_term += p * p * (-2.0 / (ty * ty * ty * c) + l / (ty.powi(4) * c * c));
        h.push(p / c / (ty * ty));
    }
    let tv_bar = -0.5 * (-inv_c / (tv * tv) + dd / tv - h2 / (ty * ty * tv * tv));
    let ty_bar = -0.5 * (-lam_c / (ty * ty) + n / ty - ws.zz / (ty * ty) - p_term);
    // ∂ℓ/∂z = -z/τ_y + B Q h
    let qh = pre.q() * nalgebra::DVector::from_vec(h);
    let bqh = pre.b_apply(model, qh.as_slice())?;
    let z_bar: Vec<f64> = ws.z.iter().zip(&bqh).map(|(z, b)| -z / ty + b).collect();
    for (l, zb) in loc_bar.iter_mut().zip(&z_bar) {
        *l -= zb;
    }
    var_bar[0] += ty_bar;
    let neg: Vec<f64> = z_bar.iter().map(|v| -v).collect();
    let mean_bar = pre.b_transpose(model, &neg)?;
    for (&ci, &o) in pre.classes().iter().zip(pre.col_offsets()) {
        let d = model.classes()[ci].block_dim();
        let m = model.classes()[ci].n_effects();
        for (idx, v) in mean_bar[o..o + m].iter().enumerate() {
            bars[ci].mean[idx % d] += v;
        }
    }
    let first = pre.classes()[0];
    bars[first].factor[0] += 2.0 * st.classes[first].factor[0] * tv_bar;
    Ok(ws.log_likelihood())
}

/// A model bound to one of its HMC targets, ready for the sampler.
#[derive(Debug, Clone)]
pub struct ModelTarget {
    model: Arc<LmmModel>,
    pre: Option<Arc<FullMarginalPre>>,
}

impl ModelTarget {
    /// Chooses the joint target when nothing is marginalized, the single-class
    /// path for one marginalized class unless `full` is set, and the full path
    /// otherwise.
    pub fn new(model: Arc<LmmModel>, full: bool) -> Result<Self> {
        let m = model.marginalized_classes();
        let pre = if m.len() > 1 || (full && !m.is_empty()) {
            Some(Arc::new(full_marginal_preprocess(&model)?))
        } else {
            None
        };
        Ok(ModelTarget { model, pre })
    }

    pub fn model(&self) -> &Arc<LmmModel> {
        &self.model
    }

    pub fn pre(&self) -> Option<&Arc<FullMarginalPre>> {
        self.pre.as_ref()
    }

    pub fn kind(&self) -> TargetKind<'_> {
        match (&self.pre, self.model.marginalized_classes().first()) {
            (Some(p), _) => TargetKind::FullMarginal(p),
            (None, Some(&i)) => TargetKind::Marginal(i),
            (None, None) => TargetKind::Joint,
        }
    }
}

impl LogDensity for ModelTarget {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        log_density(self.kind(), &self.model, x)
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let r = grad_log_density(self.kind(), &self.model, x)?;
        grad.copy_from_slice(&r.grad);
        Ok(r.value)
    }
}
