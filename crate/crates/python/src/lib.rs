//! Python module `marginal_lmm`: load a model from a config and CSV, evaluate
//! its HMC target, sample it and compute diagnostics.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::sync::Arc;

use marginal_lmm::diagnostics;
use marginal_lmm::gradient::ModelTarget;
use marginal_lmm::harness::{fit, load_csv, synth_data, write_csv, Fit, HarnessError, ModelConfig, StrategyChoice};
use marginal_lmm::model::LmmModel;
use marginal_lmm::sampler::{chain_rng, LogDensity, NutsConfig};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn harness_err(e: HarnessError) -> PyErr {
    match e {
        HarnessError::Config(_) | HarnessError::Data(_) => PyValueError::new_err(e.to_string()),
        HarnessError::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        HarnessError::Io(_) => PyIOError::new_err(e.to_string()),
    }
}

fn core_err(e: marginal_lmm::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A mixed model with a chosen marginalization strategy.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    base: LmmModel,
    target: ModelTarget,
    strategy: String,
}

impl PyModel {
    fn with(base: LmmModel, strategy: &str) -> PyResult<Self> {
        let choice: StrategyChoice = strategy.parse().map_err(harness_err)?;
        let (model, full) = choice.apply(&base).map_err(harness_err)?;
        let target = ModelTarget::new(Arc::new(model), full).map_err(core_err)?;
        Ok(PyModel {
            base,
            target,
            strategy: choice.to_string(),
        })
    }

    fn check_len(&self, x: &[f64]) -> PyResult<()> {
        if x.len() != self.target.dim() {
            return Err(PyValueError::new_err(format!("expected {} coordinates, got {}", self.target.dim(), x.len())));
        }
        Ok(())
    }
}

#[pymethods]
impl PyModel {
    /// Builds the model described by a TOML config from a CSV file.
    #[staticmethod]
    #[pyo3(signature = (config, data, strategy = "config"))]
    fn load(config: PathBuf, data: PathBuf, strategy: &str) -> PyResult<Self> {
        let cfg = ModelConfig::load(&config).map_err(harness_err)?;
        let dataset = load_csv(&data, &cfg).map_err(harness_err)?;
        PyModel::with(cfg.build(&dataset).map_err(harness_err)?, strategy)
    }

    /// The same model under another strategy, such as `"none"`,
    /// `"marginalize:subj"` or `"reparam:item"`.
    fn with_strategy(&self, strategy: &str) -> PyResult<Self> {
        PyModel::with(self.base.clone(), strategy)
    }

    #[getter]
    fn strategy(&self) -> &str {
        &self.strategy
    }

    /// Number of unconstrained coordinates of the target.
    #[getter]
    fn dim(&self) -> usize {
        self.target.dim()
    }

    /// Names of the values returned by `constrain`.
    fn names(&self) -> Vec<String> {
        self.target.model().constrained_names()
    }

    fn log_density(&self, x: Vec<f64>) -> PyResult<f64> {
        self.check_len(&x)?;
        self.target.log_density(&x).map_err(core_err)
    }

    /// Log density and its gradient.
    fn grad_log_density(&self, x: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
        self.check_len(&x)?;
        let mut grad = vec![0.0; x.len()];
        let value = self.target.log_density_grad(&x, &mut grad).map_err(core_err)?;
        Ok((value, grad))
    }

    /// Constrained globals and sampled effects at an unconstrained point.
    fn constrain(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check_len(&x)?;
        self.target.model().constrained_view(&x).map_err(core_err)
    }

    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (chains = 4, warmup = 1000, samples = 1000, seed = 1, max_tree_depth = 10, target_accept = 0.8))]
    fn sample(
        &self,
        py: Python<'_>,
        chains: usize,
        warmup: usize,
        samples: usize,
        seed: u64,
        max_tree_depth: usize,
        target_accept: f64,
    ) -> PyResult<PyFit> {
        let nuts = NutsConfig {
            warmup,
            samples,
            chains,
            seed,
            max_tree_depth,
            target_accept,
            ..Default::default()
        };
        let model = self.target.model().as_ref().clone();
        let full = self.target.pre().is_some();
        let result = py.detach(move || fit(model, full, &nuts)).map_err(harness_err)?;
        Ok(PyFit { fit: result })
    }

    fn __repr__(&self) -> String {
        format!("Model(dim={}, strategy={:?})", self.target.dim(), self.strategy)
    }
}

/// Posterior draws of one `Model.sample` call.
#[pyclass(name = "Fit", frozen)]
struct PyFit {
    fit: Fit,
}

#[pymethods]
impl PyFit {
    #[getter]
    fn names(&self) -> Vec<String> {
        self.fit.names.clone()
    }

    /// `draws[chain][draw][column]` in constrained coordinates.
    #[getter]
    fn draws(&self) -> Vec<Vec<Vec<f64>>> {
        self.fit.draws.clone()
    }

    #[getter]
    fn recovered_names(&self) -> Vec<String> {
        self.fit.recovered_names.clone()
    }

    /// Conditional draws of the marginalized effects, one per posterior draw.
    #[getter]
    fn recovered(&self) -> Vec<Vec<Vec<f64>>> {
        self.fit.recovered.clone()
    }

    #[getter]
    fn divergences(&self) -> usize {
        self.fit.divergences()
    }

    /// Per-chain draws of one named column, globals or recovered effects.
    fn column(&self, name: &str) -> PyResult<Vec<Vec<f64>>> {
        self.fit
            .column(name)
            .ok_or_else(|| PyValueError::new_err(format!("no column named {name}")))
    }

    /// Rows of `(name, mean, sd, ess, ess_per_iter, r_hat)`.
    fn summary(&self) -> Vec<(String, f64, f64, f64, f64, f64)> {
        self.fit
            .summary
            .params
            .iter()
            .map(|p| (p.name.clone(), p.mean, p.sd, p.ess, p.ess_per_iter, p.r_hat))
            .collect()
    }
}

fn refs(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    chains.iter().map(|c| c.as_slice()).collect()
}

/// Effective sample size over chains of equal length.
#[pyfunction]
fn ess(chains: Vec<Vec<f64>>) -> PyResult<f64> {
    diagnostics::ess(&refs(&chains)).map(|e| e.ess).map_err(core_err)
}

/// Split R-hat over chains of equal length.
#[pyfunction]
fn r_hat(chains: Vec<Vec<f64>>) -> PyResult<f64> {
    diagnostics::r_hat(&refs(&chains)).map_err(core_err)
}

/// Simulates a dataset from a config's `[synth]` section into a CSV file and
/// returns the true values of the global parameters.
#[pyfunction]
#[pyo3(signature = (config, out, n = None, seed = 1))]
fn synth(config: PathBuf, out: PathBuf, n: Option<usize>, seed: u64) -> PyResult<BTreeMap<String, f64>> {
    let cfg = ModelConfig::load(&config).map_err(harness_err)?;
    let section = cfg.synth.clone().unwrap_or_default();
    let n = n.unwrap_or(section.n);
    let (data, truth) = synth_data(&cfg, &section.truth, n, &mut chain_rng(seed, 0)).map_err(harness_err)?;
    let file = File::create(&out).map_err(|e| PyIOError::new_err(format!("{}: {e}", out.display())))?;
    write_csv(BufWriter::new(file), &data).map_err(harness_err)?;
    Ok(truth.names.iter().cloned().zip(truth.theta.flatten()).collect())
}

#[pymodule]
#[pyo3(name = "marginal_lmm")]
fn marginal_lmm_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyFit>()?;
    m.add_function(wrap_pyfunction!(ess, m)?)?;
    m.add_function(wrap_pyfunction!(r_hat, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    Ok(())
}
