//! Python bindings for `ganlab`: configs, training runs, metrics, toy data,
//! the gradient checker, and the diffusion noise schedule.

use std::collections::BTreeMap;
use std::fmt::Display;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use ganlab::cli;
use ganlab::diffusion::NoiseSchedule;
use ganlab::metrics::{self, Histogram, MetricsRecord};
use ganlab::nn::spectral_normalize;
use ganlab::toydata::{DistributionSpec, Rng};
use ganlab::trainers;
use ganlab::Matrix;

fn value_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(
            "expected a non-empty list of equal-length rows",
        ));
    }
    Ok(Matrix::from_rows(rows))
}

fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

fn probs_hist(p: Vec<f64>) -> Histogram {
    Histogram {
        lo: 0.0,
        hi: 1.0,
        probs: p,
    }
}

fn record_map(r: &MetricsRecord) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::from([
        ("step".to_string(), r.step as f64),
        ("d_loss".to_string(), r.d_loss),
        ("g_loss".to_string(), r.g_loss),
        ("kl".to_string(), r.kl),
        ("js".to_string(), r.js),
        ("w1".to_string(), r.w1),
        ("modes_covered".to_string(), r.modes_covered as f64),
        ("hq_frac".to_string(), r.high_quality_fraction),
        ("d_acc".to_string(), r.d_accuracy),
    ]);
    m.extend(r.extras.iter().map(|(k, v)| (k.clone(), *v)));
    m
}

/// A validated training configuration.
#[pyclass(name = "TrainConfig", module = "ganlab_py", from_py_object)]
#[derive(Clone)]
pub struct PyTrainConfig {
    inner: trainers::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    /// Parse TOML text; unknown keys and invalid values raise ValueError.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyTrainConfig {
            inner: cli::parse_config(text).map_err(value_err)?,
        })
    }

    fn to_toml(&self) -> String {
        cli::print_config(&self.inner)
    }

    #[getter]
    fn algorithm(&self) -> &'static str {
        self.inner.algorithm().name()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.experiment.steps
    }

    #[setter]
    fn set_steps(&mut self, steps: usize) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.experiment.steps = steps;
        next.validate().map_err(value_err)?;
        self.inner = next;
        Ok(())
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.experiment.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.experiment.seed = seed;
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig(algorithm={:?}, steps={}, seed={})",
            self.algorithm(),
            self.inner.experiment.steps,
            self.inner.experiment.seed
        )
    }
}

/// The outcome of a training run.
#[pyclass(name = "RunLog", module = "ganlab_py", frozen)]
pub struct PyRunLog {
    inner: trainers::RunLog,
}

#[pymethods]
impl PyRunLog {
    #[getter]
    fn diverged(&self) -> bool {
        self.inner.diverged()
    }

    #[getter]
    fn metrics_csv(&self) -> String {
        self.inner.metrics_csv()
    }

    /// One dict per evaluation point, including algorithm-specific extras.
    #[getter]
    fn records(&self) -> Vec<BTreeMap<String, f64>> {
        self.inner.records.iter().map(record_map).collect()
    }

    /// Final generator output on the held-out inputs, as a list of rows.
    #[getter]
    fn samples(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.inner.samples)
    }

    #[getter]
    fn wall_time_secs(&self) -> f64 {
        self.inner.wall_time_secs
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(value_err)
    }
}

/// Train a configuration to completion (releases the GIL while running).
#[pyfunction]
fn train(py: Python<'_>, config: &PyTrainConfig) -> PyResult<PyRunLog> {
    let cfg = config.inner.clone();
    let log = py
        .detach(move || trainers::train(&cfg))
        .map_err(value_err)?;
    Ok(PyRunLog { inner: log })
}

/// Jensen-Shannon divergence (nats) between two probability vectors.
#[pyfunction]
fn js(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    metrics::js(&probs_hist(p), &probs_hist(q)).map_err(value_err)
}

/// KL(p || q) between two probability vectors, with the library's epsilon.
#[pyfunction]
fn kl(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    metrics::kl(&probs_hist(p), &probs_hist(q)).map_err(value_err)
}

/// Exact 1-D Wasserstein-1 between equal-size samples.
#[pyfunction]
fn w1_exact(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    metrics::w1_exact(&xs, &ys).map_err(value_err)
}

/// Bin probabilities on a uniform layout over `[lo, hi]`.
#[pyfunction]
fn histogram(samples: Vec<f64>, bins: usize, lo: f64, hi: f64) -> PyResult<Vec<f64>> {
    Ok(metrics::histogram(&samples, bins, lo, hi)
        .map_err(value_err)?
        .probs)
}

/// Draw `n` points from a mixture of Gaussians on a circle.
#[pyfunction]
#[pyo3(signature = (n, modes=8, radius=2.0, std=0.05, seed=0))]
fn sample_ring(
    n: usize,
    modes: usize,
    radius: f64,
    std: f64,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let dist = DistributionSpec::MixtureRing { modes, radius, std };
    let m = dist.sample(n, &mut Rng::new(seed)).map_err(value_err)?;
    Ok(matrix_to_rows(&m))
}

/// Draw `n` values from a 1-D Gaussian.
#[pyfunction]
#[pyo3(signature = (n, mean=4.0, std=1.25, seed=0))]
fn sample_gaussian(n: usize, mean: f64, std: f64, seed: u64) -> PyResult<Vec<f64>> {
    let dist = DistributionSpec::Gaussian1D { mean, std };
    Ok(dist.sample(n, &mut Rng::new(seed)).map_err(value_err)?.data)
}

/// Run the finite-difference suite; returns `(name, passed, worst_ratio)` per check.
#[pyfunction]
#[pyo3(signature = (cases=100, seed=0))]
fn gradcheck(py: Python<'_>, cases: usize, seed: u64) -> PyResult<Vec<(String, bool, f64)>> {
    let results = py
        .detach(move || cli::cmd_gradcheck(cases, seed))
        .map_err(value_err)?;
    Ok(results
        .into_iter()
        .map(|r| (r.name.clone(), r.passed(), r.worst_ratio))
        .collect())
}

/// Cumulative signal fractions `alpha_bar_t` for `t = 1..=steps` of a linear schedule.
#[pyfunction]
fn linear_alpha_bars(steps: usize, start: f64, end: f64) -> PyResult<Vec<f64>> {
    let s = NoiseSchedule::linear(steps, start, end).map_err(value_err)?;
    (1..=steps)
        .map(|t| s.alpha_bar(t).map_err(value_err))
        .collect()
}

/// Power-iteration estimate of the top singular value of a weight matrix.
#[pyfunction]
#[pyo3(signature = (weights, iters=50))]
fn spectral_sigma(weights: Vec<Vec<f64>>, iters: usize) -> PyResult<f64> {
    let w = rows_to_matrix(&weights)?;
    let u = vec![1.0; w.rows];
    Ok(spectral_normalize(&w, &u, iters).map_err(value_err)?.sigma)
}

#[pymodule]
fn ganlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyRunLog>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(js, m)?)?;
    m.add_function(wrap_pyfunction!(kl, m)?)?;
    m.add_function(wrap_pyfunction!(w1_exact, m)?)?;
    m.add_function(wrap_pyfunction!(histogram, m)?)?;
    m.add_function(wrap_pyfunction!(sample_ring, m)?)?;
    m.add_function(wrap_pyfunction!(sample_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(linear_alpha_bars, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_sigma, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_map_flattens_extras() {
        let mut r = MetricsRecord {
            step: 5,
            d_loss: 1.0,
            g_loss: 2.0,
            kl: 0.1,
            js: 0.05,
            w1: 0.3,
            modes_covered: 7,
            high_quality_fraction: 0.9,
            d_accuracy: 0.5,
            extras: BTreeMap::new(),
        };
        r.extras.insert("cycle".into(), 0.01);
        let m = record_map(&r);
        assert_eq!(m["step"], 5.0);
        assert_eq!(m["modes_covered"], 7.0);
        assert_eq!(m["cycle"], 0.01);
        assert_eq!(m.len(), 10);
    }

    #[test]
    fn metrics_wrappers_match_core() {
        let k = kl(vec![0.5, 0.5], vec![0.25, 0.75]).unwrap();
        assert!((k - 0.143_841_036).abs() < 1e-8);
        assert_eq!(w1_exact(vec![0.0, 1.0], vec![1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(
            histogram(vec![0.1, 0.9], 2, 0.0, 1.0).unwrap(),
            vec![0.5, 0.5]
        );
    }

    #[test]
    fn sampling_and_schedule_shapes() {
        let ring = sample_ring(10, 8, 2.0, 0.05, 1).unwrap();
        assert_eq!(ring.len(), 10);
        assert!(ring.iter().all(|r| r.len() == 2));
        assert_eq!(sample_gaussian(7, 4.0, 1.25, 1).unwrap().len(), 7);
        let ab = linear_alpha_bars(1000, 1e-4, 0.02).unwrap();
        assert!(ab[999] < 1e-4 && ab[0] > 0.999);
    }

    #[test]
    fn spectral_sigma_of_diagonal() {
        let s = spectral_sigma(vec![vec![3.0, 0.0], vec![0.0, 1.0]], 50).unwrap();
        assert!((s - 3.0).abs() < 1e-9);
    }

    #[test]
    fn config_round_trip() {
        let c = PyTrainConfig::from_toml(
            "[experiment]\nalgorithm = \"lsgan\"\n[data]\nkind = \"ring\"\n",
        )
        .unwrap();
        assert_eq!(c.algorithm(), "lsgan");
        let again = PyTrainConfig::from_toml(&c.to_toml()).unwrap();
        assert!(again.inner == c.inner);
    }
}
