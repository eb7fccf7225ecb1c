//! Dense reference computations. These build the full covariance matrices
//! the fast paths avoid and exist for validation and timing comparisons.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::params::LN_2PI;
use crate::model::{LmmModel, State, Strategy};

/// Log density of a multivariate normal via a dense Cholesky factorization.
pub fn mvn_log_density(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = cov.clone().cholesky().ok_or(Error::NotPositiveDefinite {
        context: "dense covariance",
        block: None,
    })?;
    let r = y - mean;
    let w = chol.l().solve_lower_triangular(&r).expect("nonsingular factor");
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (w.norm_squared() + logdet + y.len() as f64 * LN_2PI))
}

/// Dense view of one class: effective design `s·A`, mean and covariance of `u`.
pub struct DenseClass {
    pub design: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

pub fn dense_class(model: &LmmModel, st: &State, class: usize) -> DenseClass {
    let c = &model.classes()[class];
    let cs = &st.classes[class];
    let k = c.design.n_groups();
    DenseClass {
        design: c.design.to_dense() * cs.design_scale,
        mean: DVector::from_iterator(c.n_effects(), (0..k).flat_map(|_| cs.mean.iter().copied())),
        cov: c.covariance(&st.theta).to_dense(),
    }
}

fn stacked(model: &LmmModel, st: &State, classes: &[usize]) -> DenseClass {
    let parts: Vec<DenseClass> = classes.iter().map(|&i| dense_class(model, st, i)).collect();
    let n = model.n_obs();
    let m: usize = parts.iter().map(|p| p.mean.len()).sum();
    let mut design = DMatrix::zeros(n, m);
    let mut mean = DVector::zeros(m);
    let mut cov = DMatrix::zeros(m, m);
    let mut o = 0;
    for p in &parts {
        let mi = p.mean.len();
        design.view_mut((0, o), (n, mi)).copy_from(&p.design);
        mean.rows_mut(o, mi).copy_from(&p.mean);
        cov.view_mut((o, o), (mi, mi)).copy_from(&p.cov);
        o += mi;
    }
    DenseClass { design, mean, cov }
}

/// Marginal mean and covariance of `y` after integrating out `classes`.
fn marginal_moments(st: &State, b: &DenseClass) -> (DVector<f64>, DMatrix<f64>) {
    let mean = DVector::from_column_slice(&st.location) + &b.design * &b.mean;
    let mut e = &b.design * &b.cov * b.design.transpose();
    for (i, v) in st.obs_var.iter().enumerate() {
        e[(i, i)] += v;
    }
    (mean, e)
}

/// `log p(y | Θ, u_rest)` with the given location classes integrated out.
pub fn marginal_log_likelihood(model: &LmmModel, x: &[f64], classes: &[usize]) -> Result<f64> {
    let st = model.materialize(x)?;
    let b = stacked(model, &st, classes);
    let (mean, e) = marginal_moments(&st, &b);
    let y = DVector::from_column_slice(model.response());
    Ok(mvn_log_density(&y, &mean, &e)? + model.log_jacobian_const())
}

/// Gaussian conditional of the integrated effects given `y`.
pub fn conditional(model: &LmmModel, x: &[f64], classes: &[usize]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let st = model.materialize(x)?;
    let b = stacked(model, &st, classes);
    let (mean_y, e) = marginal_moments(&st, &b);
    let y = DVector::from_column_slice(model.response());
    let e_inv = e.try_inverse().ok_or(Error::NotPositiveDefinite {
        context: "dense covariance",
        block: None,
    })?;
    let k = &b.cov * b.design.transpose() * &e_inv;
    let mean = &b.mean + &k * (y - mean_y);
    let cov = &b.cov - &k * &b.design * &b.cov;
    Ok((mean, (&cov + cov.transpose()) * 0.5))
}

/// Joint log density of `(u, y)` as one dense Gaussian over all sampled
/// location classes, plus the global prior terms. Reparameterized classes are
/// not supported.
pub fn joint_log_density(model: &LmmModel, x: &[f64]) -> Result<f64> {
    let st = model.materialize(x)?;
    let classes: Vec<usize> = (0..model.classes().len()).collect();
    if model.classes().iter().any(|c| c.strategy != Strategy::Sample) {
        return Err(Error::InvalidArgument("dense joint needs all classes sampled".into()));
    }
    let b = stacked(model, &st, &classes);
    let n = model.n_obs();
    let m = b.mean.len();
    let mut offset = DVector::from_column_slice(&st.location);
    let mut u = DVector::zeros(m);
    let mut o = 0;
    for cs in &st.classes {
        let e = cs.effects.as_ref().unwrap();
        u.rows_mut(o, e.len()).copy_from_slice(e);
        o += e.len();
    }
    offset -= &b.design * &u;
    let mut mean = DVector::zeros(m + n);
    mean.rows_mut(0, m).copy_from(&b.mean);
    mean.rows_mut(m, n).copy_from(&(offset + &b.design * &b.mean));
    let mut cov = DMatrix::zeros(m + n, m + n);
    cov.view_mut((0, 0), (m, m)).copy_from(&b.cov);
    let cross = &b.design * &b.cov;
    cov.view_mut((m, 0), (n, m)).copy_from(&cross);
    cov.view_mut((0, m), (m, n)).copy_from(&cross.transpose());
    let mut e = &cross * b.design.transpose();
    for (i, v) in st.obs_var.iter().enumerate() {
        e[(i, i)] += v;
    }
    cov.view_mut((m, m), (n, n)).copy_from(&e);
    let mut point = DVector::zeros(m + n);
    point.rows_mut(0, m).copy_from(&u);
    point.rows_mut(m, n).copy_from_slice(model.response());
    let globals = model.params().prior_log_density(&st.theta)? + st.log_jacobian;
    Ok(globals + mvn_log_density(&point, &mean, &cov)? + model.log_jacobian_const())
}

/// Dense `BᵀB` over the given classes with their design scales.
pub fn dense_gram(model: &LmmModel, x: &[f64], classes: &[usize]) -> Result<DMatrix<f64>> {
    let st = model.materialize(x)?;
    let b = stacked(model, &st, classes);
    Ok(b.design.transpose() * &b.design)
}
