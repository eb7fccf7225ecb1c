//! Marginalizing Gaussian effects out of the HMC target and recovering them
//! afterwards by exact conditional sampling.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{BlockCholesky, BlockDiagonal, DesignMatrix, DECOMPOSITION_TOL, STRUCTURAL_TOL};
use crate::model::params::LN_2PI;
use crate::model::{EffectTarget, LmmModel, NoiseModel, Scalar, State, Strategy};

/// Scratch state of one marginal density evaluation for a single class with
/// `u ~ N(μ, Σ_u)` and `y - r ~ N(A u, diag(v))`, where `r` is everything
/// else in the predictor.
#[derive(Debug, Clone)]
pub struct MarginalWorkspace {
    /// `y - r - A μ`.
    pub z: Vec<f64>,
    /// Inverse observation variances.
    pub w: Vec<f64>,
    pub sigma_u_inv: BlockDiagonal,
    /// Gram matrix `Aᵀ diag(w) A`.
    pub gram: BlockDiagonal,
    pub f_chol: BlockCholesky,
    /// `Aᵀ diag(w) z`.
    pub x: Vec<f64>,
    /// `F⁻¹ x`.
    pub f_inv_x: Vec<f64>,
    pub logdet_f: f64,
    pub logdet_u: f64,
    pub logdet_y: f64,
    /// `zᵀ diag(w) z`.
    pub quad_y: f64,
}

impl MarginalWorkspace {
    pub fn new(
        design: &DesignMatrix,
        mean: &[f64],
        sigma_u: &BlockCholesky,
        obs_var: &[f64],
        resid: &[f64],
    ) -> Result<Self> {
        crate::error::dim_check("residual", design.n_obs(), resid.len())?;
        crate::error::dim_check("observation variances", design.n_obs(), obs_var.len())?;
        if let Some(i) = obs_var.iter().position(|v| !(*v > 0.0)) {
            return Err(Error::Domain(format!("observation variance {} at row {i}", obs_var[i])));
        }
        let mut z = resid.to_vec();
        design.apply_add(mean, -1.0, &mut z)?;
        let w: Vec<f64> = obs_var.iter().map(|v| 1.0 / v).collect();
        let sigma_u_inv = sigma_u.inverse();
        let gram = design.gram(&w)?;
        let f = sigma_u_inv.add(&gram)?;
        let f_chol = f.cholesky().map_err(|e| match e {
            Error::NotPositiveDefinite { block, .. } => Error::NotPositiveDefinite {
                context: "marginal precision F",
                block,
            },
            e => e,
        })?;
        let wz: Vec<f64> = z.iter().zip(&w).map(|(a, b)| a * b).collect();
        let x = design.apply_transpose(&wz)?;
        let f_inv_x = f_chol.solve(&x)?;
        let quad_y = z.iter().zip(&wz).map(|(a, b)| a * b).sum();
        Ok(MarginalWorkspace {
            logdet_f: f_chol.logdet(),
            logdet_u: sigma_u.logdet(),
            logdet_y: obs_var.iter().map(|v| v.ln()).sum(),
            z,
            w,
            sigma_u_inv,
            gram,
            f_chol,
            x,
            f_inv_x,
            quad_y,
        })
    }

    /// `log N(y; r + A μ, A Σ_u Aᵀ + diag(v))`.
    pub fn log_likelihood(&self) -> f64 {
        let a = self.logdet_f + self.logdet_u + self.logdet_y;
        let b = self.quad_y - dot(&self.x, &self.f_inv_x);
        -0.5 * (a + b) - 0.5 * self.z.len() as f64 * LN_2PI
    }

    /// Conditional mean `μ + Σ_u (I - G F⁻¹) x`, which simplifies to
    /// `μ + F⁻¹ x` because `Σ_u (F - G) = I`.
    pub fn conditional_mean(&self, mean: &[f64]) -> Vec<f64> {
        mean.iter().zip(&self.f_inv_x).map(|(m, v)| m + v).collect()
    }

    /// Block Cholesky factor of the conditional covariance `F⁻¹`.
    pub fn conditional_cov_chol(&self) -> Result<BlockCholesky> {
        self.f_chol.inverse().cholesky()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn ensure_single(model: &LmmModel, class: usize) -> Result<()> {
    let m = model.marginalized_classes();
    if m == [class] {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "class {class} must be the only marginalized class (marginalized: {m:?})"
        )))
    }
}

/// Workspace for the marginalized class at a materialized state. The class
/// is integrated in terms of `s u`, where `s` is its design scale.
pub(crate) fn class_workspace(model: &LmmModel, st: &State, class: usize) -> Result<MarginalWorkspace> {
    let c = &model.classes()[class];
    let cs = &st.classes[class];
    let d = c.block_dim();
    let k = c.design.n_groups();
    let s = cs.design_scale;
    let mean: Vec<f64> = (0..k).flat_map(|_| cs.mean.iter().map(move |m| s * m)).collect();
    let factor: Vec<f64> = cs.factor.iter().map(|v| s * v).collect();
    let chol = BlockCholesky::from_factors(BlockDiagonal::replicate(k, d, &factor))?;
    let resid: Vec<f64> = model.response().iter().zip(&st.location).map(|(y, l)| y - l).collect();
    MarginalWorkspace::new(&c.design, &mean, &chol, &st.obs_var, &resid)
}

/// `log p(y | Θ, u_rest)` with `class` integrated out.
pub fn marginal_log_likelihood(model: &LmmModel, class: usize, x: &[f64]) -> Result<f64> {
    ensure_single(model, class)?;
    let st = model.materialize(x)?;
    Ok(class_workspace(model, &st, class)?.log_likelihood() + model.log_jacobian_const())
}

/// HMC target with `class` integrated out: marginal likelihood plus the
/// prior terms of the globals and the remaining effects.
pub fn marginal_log_density(model: &LmmModel, class: usize, x: &[f64]) -> Result<f64> {
    ensure_single(model, class)?;
    let st = model.materialize(x)?;
    Ok(class_workspace(model, &st, class)?.log_likelihood() + model.log_jacobian_const() + model.prior_terms(&st)?)
}

/// Mean and covariance Cholesky factor of `u | Θ, u_rest, y`.
pub fn recovery_conditional(model: &LmmModel, class: usize, x: &[f64]) -> Result<(Vec<f64>, BlockCholesky)> {
    ensure_single(model, class)?;
    let st = model.materialize(x)?;
    let ws = class_workspace(model, &st, class)?;
    let s = st.classes[class].design_scale;
    let k = model.classes()[class].design.n_groups();
    let mean_eff: Vec<f64> = (0..k)
        .flat_map(|_| st.classes[class].mean.iter().map(move |m| s * m))
        .collect();
    let mean = ws.conditional_mean(&mean_eff).iter().map(|v| v / s).collect();
    let chol = ws.conditional_cov_chol()?;
    let factors = chol.factors();
    let scaled = BlockDiagonal::new(
        factors.n_blocks(),
        factors.block_dim(),
        factors.data().iter().map(|v| v / s).collect(),
    )?;
    Ok((mean, BlockCholesky::from_factors(scaled)?))
}

/// One exact conditional draw of the marginalized effects per posterior draw.
pub fn recovery_sample<R: Rng + ?Sized>(
    model: &LmmModel,
    class: usize,
    draws: &[Vec<f64>],
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    draws
        .iter()
        .map(|x| {
            let (mean, chol) = recovery_conditional(model, class, x)?;
            let eps: Vec<f64> = (0..mean.len()).map(|_| rng.sample(StandardNormal)).collect();
            let dev = chol.mul_lower(&eps)?;
            Ok(mean.iter().zip(&dev).map(|(m, e)| m + e).collect())
        })
        .collect()
}

/// Posterior mean of the marginalized effects by averaging conditional means.
pub fn rao_blackwell_mean(model: &LmmModel, class: usize, draws: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; model.classes()[class].n_effects()];
    for x in draws {
        let (mean, _) = recovery_conditional(model, class, x)?;
        acc.iter_mut().zip(&mean).for_each(|(a, m)| *a += m);
    }
    let n = draws.len().max(1) as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Precomputed eigendecomposition for integrating out every marginalized
/// class at once when all of them share one isotropic scale and the noise is
/// homoscedastic.
#[derive(Debug, Clone)]
pub struct FullMarginalPre {
    classes: Vec<usize>,
    col_offsets: Vec<usize>,
    design_scales: Vec<f64>,
    q: DMatrix<f64>,
    lambda: Vec<f64>,
}

impl FullMarginalPre {
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// Offset of each class inside the stacked effect vector `v`.
    pub fn col_offsets(&self) -> &[usize] {
        &self.col_offsets
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    /// `Bᵀ t` in O(N L d).
    pub fn b_transpose(&self, model: &LmmModel, t: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        for (j, &c) in self.classes.iter().enumerate() {
            let a = &model.classes()[c].design;
            let o = self.col_offsets[j];
            a.apply_transpose_add(t, self.design_scales[j], &mut out[o..o + a.n_cols()])?;
        }
        Ok(out)
    }

    /// `B v` in O(N L d).
    pub fn b_apply(&self, model: &LmmModel, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; model.n_obs()];
        for (j, &c) in self.classes.iter().enumerate() {
            let a = &model.classes()[c].design;
            let o = self.col_offsets[j];
            a.apply_add(&v[o..o + a.n_cols()], self.design_scales[j], &mut out)?;
        }
        Ok(out)
    }

    fn check_model(&self, model: &LmmModel) -> Result<()> {
        if model.marginalized_classes() == self.classes {
            Ok(())
        } else {
            Err(Error::InvalidArgument("preprocessing was built for a different model".into()))
        }
    }
}

/// Verify the isotropy assumptions and eigendecompose `BᵀB` once.
pub fn full_marginal_preprocess(model: &LmmModel) -> Result<FullMarginalPre> {
    let classes = model.marginalized_classes();
    if classes.is_empty() {
        return Err(Error::InvalidArgument("no marginalized classes".into()));
    }
    if !matches!(model.noise(), NoiseModel::Scale(_)) {
        return Err(Error::UnsupportedStructure(
            "the observation noise must be one shared scale".into(),
        ));
    }
    if let Some(c) = model.classes().iter().find(|c| c.target == EffectTarget::LogNoiseScale) {
        return Err(Error::UnsupportedStructure(format!(
            "{}: observation variances vary with effects",
            c.name
        )));
    }
    let mut design_scales = Vec::new();
    for &i in &classes {
        let c = &model.classes()[i];
        match c.design_scale {
            Scalar::Const(s) => design_scales.push(s),
            Scalar::Param { .. } => {
                return Err(Error::UnsupportedStructure(format!(
                    "{}: design scale must be fixed",
                    c.name
                )))
            }
        }
    }
    verify_isotropy(model, &classes)?;

    let mut col_offsets = Vec::with_capacity(classes.len());
    let mut dim = 0;
    for &i in &classes {
        col_offsets.push(dim);
        dim += model.classes()[i].n_effects();
    }
    let mut btb = DMatrix::<f64>::zeros(dim, dim);
    let designs: Vec<&DesignMatrix> = classes.iter().map(|&i| &model.classes()[i].design).collect();
    for n in 0..model.n_obs() {
        for (p, ap) in designs.iter().enumerate() {
            let dp = ap.block_dim();
            let rp = col_offsets[p] + ap.group_of()[n] * dp;
            let cp = ap.row(n);
            for (q, aq) in designs.iter().enumerate() {
                let dq = aq.block_dim();
                let rq = col_offsets[q] + aq.group_of()[n] * dq;
                let cq = aq.row(n);
                let s = design_scales[p] * design_scales[q];
                for a in 0..dp {
                    for b in 0..dq {
                        btb[(rp + a, rq + b)] += s * cp[a] * cq[b];
                    }
                }
            }
        }
    }
    let eig = SymmetricEigen::new(btb);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut lambda = Vec::with_capacity(dim);
    for &l in eig.eigenvalues.iter() {
        if l < -DECOMPOSITION_TOL * scale {
            return Err(Error::NotPositiveDefinite {
                context: "gram eigenvalues",
                block: None,
            });
        }
        lambda.push(l.max(0.0));
    }
    Ok(FullMarginalPre {
        classes,
        col_offsets,
        design_scales,
        q: eig.eigenvectors,
        lambda,
    })
}

/// Check at a few random parameter points that every marginalized class has
/// covariance `τ_v I` with one common `τ_v`.
fn verify_isotropy(model: &LmmModel, classes: &[usize]) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..3 {
        let x: Vec<f64> = (0..model.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let st = model.materialize(&x)?;
        let first = &st.classes[classes[0]];
        let reference = first.factor[0];
        for &i in classes {
            let c = &model.classes()[i];
            let cs = &st.classes[i];
            let d = c.block_dim();
            let mut ok = true;
            for a in 0..d {
                for b in 0..d {
                    let want = if a == b { reference } else { 0.0 };
                    ok &= (cs.factor[a * d + b] - want).abs() <= STRUCTURAL_TOL * reference.abs().max(1.0);
                }
            }
            if !ok {
                return Err(Error::UnsupportedStructure(format!(
                    "{}: covariance is not the shared scaled identity",
                    c.name
                )));
            }
        }
    }
    Ok(())
}

/// Per-evaluation quantities of the full marginal path.
#[derive(Debug, Clone)]
pub struct FullWorkspace {
    /// `y - r - B μ`.
    pub z: Vec<f64>,
    /// `Qᵀ Bᵀ z`.
    pub p: Vec<f64>,
    /// `1/τ_v + λ/τ_y`.
    pub c: Vec<f64>,
    pub tau_v: f64,
    pub tau_y: f64,
    pub zz: f64,
    /// Stacked prior mean of `v`.
    pub mean: Vec<f64>,
}

impl FullWorkspace {
    pub fn log_likelihood(&self) -> f64 {
        let n = self.z.len() as f64;
        let d = self.c.len() as f64;
        let logdet: f64 = self.c.iter().map(|c| c.ln()).sum::<f64>() + d * self.tau_v.ln() + n * self.tau_y.ln();
        let corr: f64 = self.p.iter().zip(&self.c).map(|(p, c)| p * p / c).sum();
        let quad = self.zz / self.tau_y - corr / (self.tau_y * self.tau_y);
        -0.5 * (logdet + quad) - 0.5 * n * LN_2PI
    }
}

pub(crate) fn full_workspace(model: &LmmModel, pre: &FullMarginalPre, st: &State) -> Result<FullWorkspace> {
    pre.check_model(model)?;
    let tau_v = st.classes[pre.classes[0]].factor[0].powi(2);
    let tau_y = st.obs_var[0];
    if !(tau_v > 0.0) || !(tau_y > 0.0) {
        return Err(Error::Domain(format!("variances τ_v = {tau_v}, τ_y = {tau_y}")));
    }
    let mut mean = Vec::with_capacity(pre.dim());
    for &i in &pre.classes {
        let k = model.classes()[i].design.n_groups();
        for _ in 0..k {
            mean.extend_from_slice(&st.classes[i].mean);
        }
    }
    let bm = pre.b_apply(model, &mean)?;
    let z: Vec<f64> = (0..model.n_obs())
        .map(|n| model.response()[n] - st.location[n] - bm[n])
        .collect();
    let btz = pre.b_transpose(model, &z)?;
    let p = pre.q.tr_mul(&nalgebra::DVector::from_vec(btz)).data.into();
    let c = pre.lambda.iter().map(|l| 1.0 / tau_v + l / tau_y).collect();
    Ok(FullWorkspace {
        zz: dot(&z, &z),
        z,
        p,
        c,
        tau_v,
        tau_y,
        mean,
    })
}

/// `log p(y | Θ, u_rest)` with every marginalized class integrated out.
pub fn full_marginal_log_likelihood(model: &LmmModel, pre: &FullMarginalPre, x: &[f64]) -> Result<f64> {
    let st = model.materialize(x)?;
    Ok(full_workspace(model, pre, &st)?.log_likelihood() + model.log_jacobian_const())
}

/// HMC target of the full marginal path.
pub fn full_marginal_log_density(model: &LmmModel, pre: &FullMarginalPre, x: &[f64]) -> Result<f64> {
    let st = model.materialize(x)?;
    Ok(full_workspace(model, pre, &st)?.log_likelihood() + model.log_jacobian_const() + model.prior_terms(&st)?)
}

/// Conditional mean of the stacked effects and the eigenbasis scales
/// `1/√c` of their covariance `Q diag(1/c) Qᵀ`.
pub fn full_recovery_moments(model: &LmmModel, pre: &FullMarginalPre, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let st = model.materialize(x)?;
    let ws = full_workspace(model, pre, &st)?;
    let btz = pre.b_transpose(model, &ws.z)?;
    let scaled: Vec<f64> = (0..pre.dim())
        .map(|k| pre.lambda[k] * ws.p[k] / ws.c[k] / ws.tau_y)
        .collect();
    let corr = &pre.q * nalgebra::DVector::from_vec(scaled);
    let ratio = ws.tau_v / ws.tau_y;
    let mean = (0..pre.dim())
        .map(|i| ws.mean[i] + ratio * (btz[i] - corr[i]))
        .collect();
    let sd = ws.c.iter().map(|c| 1.0 / c.sqrt()).collect();
    Ok((mean, sd))
}

/// Dense conditional covariance `Q diag(1/c) Qᵀ` (D × D).
pub fn full_recovery_cov(pre: &FullMarginalPre, sd: &[f64]) -> DMatrix<f64> {
    let mut qs = pre.q.clone();
    for (k, s) in sd.iter().enumerate() {
        qs.column_mut(k).scale_mut(*s);
    }
    &qs * qs.transpose()
}

/// One exact draw of the stacked marginalized effects.
pub fn full_recovery<R: Rng + ?Sized>(model: &LmmModel, pre: &FullMarginalPre, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let (mean, sd) = full_recovery_moments(model, pre, x)?;
    let eps = nalgebra::DVector::from_iterator(sd.len(), sd.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)));
    let dev = &pre.q * eps;
    Ok(mean.iter().zip(dev.iter()).map(|(m, e)| m + e).collect())
}

/// Split a stacked effect vector into per-class pieces.
pub fn split_effects(model: &LmmModel, pre: &FullMarginalPre, v: &[f64]) -> Vec<(usize, Vec<f64>)> {
    pre.classes
        .iter()
        .zip(&pre.col_offsets)
        .map(|(&i, &o)| (i, v[o..o + model.classes()[i].n_effects()].to_vec()))
        .collect()
}

/// Copy of the model with `class` switched to the non-centered form.
pub fn reparameterize_class(model: &LmmModel, class: usize) -> Result<LmmModel> {
    model.with_strategy(class, Strategy::Reparameterize)
}
