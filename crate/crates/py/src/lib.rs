//! Python bindings: configuration, experiments, the aggregation rules and
//! the feature diagnostics. Vectors cross the boundary as lists of floats.

use std::collections::BTreeSet;
use std::path::PathBuf;

use fsl_core::aggregation::{self, Defense, TrustState, WorkerUpdate};
use fsl_core::config::{self, RunConfig};
use fsl_core::diagnostics::{features_from_gradients, FeatureMode};
use fsl_core::nn::{Layer, ParameterSet};
use fsl_core::report;
use fsl_core::sim::{self, RoundMetrics, Summary};
use fsl_core::FslError;
use ndarray::{Array1, Array2};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: FslError) -> PyErr {
    if e.is_config_error() || matches!(e, FslError::Input(_)) {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Wrap a flat vector as a single-layer parameter set so the whole-model
/// aggregators can run on it.
fn as_update(worker: usize, v: &[f64], n: usize) -> PyResult<WorkerUpdate> {
    if v.len() < 2 {
        return Err(PyValueError::new_err("vectors need at least two entries"));
    }
    let d = v.len();
    let w = Array2::from_shape_vec((1, d - 1), v[..d - 1].to_vec()).expect("shape matches");
    let layer = Layer::dense(w, Array1::from_elem(1, v[d - 1])).map_err(py_err)?;
    Ok(WorkerUpdate {
        worker,
        params: ParameterSet::new(vec![layer]).map_err(py_err)?,
        num_samples: n,
    })
}

fn as_updates(rows: &[Vec<f64>], counts: Option<&[usize]>) -> PyResult<Vec<WorkerUpdate>> {
    if let Some(c) = counts {
        if c.len() != rows.len() {
            return Err(PyValueError::new_err("one sample count per row"));
        }
    }
    rows.iter()
        .enumerate()
        .map(|(i, r)| as_update(i, r, counts.map_or(1, |c| c[i])))
        .collect()
}

fn round_dict<'py>(py: Python<'py>, r: &RoundMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("round", r.round)?;
    d.set_item("test_error", r.test_error)?;
    d.set_item("all_acc", r.all_acc)?;
    d.set_item("src_acc", r.src_acc)?;
    d.set_item("asr", r.asr)?;
    d.set_item("gamma", r.gamma.clone())?;
    d.set_item("agg_wall_time", r.agg_wall_time)?;
    d.set_item("fallback", r.fallback)?;
    Ok(d)
}

fn summary_dict<'py>(py: Python<'py>, s: &Summary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("defense", &s.defense)?;
    d.set_item("rounds_averaged", s.rounds_averaged)?;
    d.set_item("test_error", s.test_error)?;
    d.set_item("all_acc", s.all_acc)?;
    d.set_item("src_acc", s.src_acc)?;
    d.set_item("asr", s.asr)?;
    d.set_item("mean_agg_wall_time", s.mean_agg_wall_time)?;
    d.set_item("attackers", s.attackers.clone())?;
    Ok(d)
}

/// A parsed configuration file.
#[pyclass(name = "Config", module = "fsl")]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: config::parse_config(&path).map_err(py_err)?,
        })
    }

    /// Parse config text; relative data paths resolve against `base_dir`.
    #[staticmethod]
    #[pyo3(signature = (text, base_dir = PathBuf::from(".")))]
    fn parse(text: &str, base_dir: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: config::parse_config_str(text, &base_dir.join("<string>")).map_err(py_err)?,
        })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.experiment.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.experiment.seed = seed;
    }

    #[getter]
    fn rounds(&self) -> usize {
        self.inner.experiment.rounds
    }

    #[setter]
    fn set_rounds(&mut self, rounds: usize) {
        self.inner.experiment.rounds = rounds;
    }

    #[getter]
    fn workers(&self) -> usize {
        self.inner.experiment.workers
    }

    #[getter]
    fn defense(&self) -> &'static str {
        self.inner.experiment.defense.name()
    }

    #[setter]
    fn set_defense(&mut self, name: &str) -> PyResult<()> {
        self.inner.experiment.defense = Defense::from_name(name).map_err(py_err)?;
        Ok(())
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output.dir.clone()
    }

    #[setter]
    fn set_output_dir(&mut self, dir: PathBuf) {
        self.inner.output.dir = dir;
    }

    /// Canonical `key = value` text, the input of the config hash.
    fn canonical(&self) -> String {
        config::canonical_text(&self.inner.experiment)
    }

    fn __repr__(&self) -> String {
        let e = &self.inner.experiment;
        format!(
            "Config(workers={}, rounds={}, defense={:?}, seed={})",
            e.workers,
            e.rounds,
            e.defense.name(),
            e.seed
        )
    }
}

/// A prepared experiment: data loaded, partitioned and poisoned.
#[pyclass(name = "Experiment", module = "fsl")]
struct PyExperiment {
    inner: sim::Experiment,
}

#[pymethods]
impl PyExperiment {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        Ok(PyExperiment {
            inner: sim::Experiment::prepare(config.inner.experiment.clone()).map_err(py_err)?,
        })
    }

    #[getter]
    fn attackers(&self) -> Vec<usize> {
        self.inner.attackers()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings().to_vec()
    }

    /// Train for the configured rounds. Returns `{"rounds": [...], "summary": {...}}`.
    #[pyo3(signature = (threads = 0))]
    fn run<'py>(&self, py: Python<'py>, threads: usize) -> PyResult<Bound<'py, PyDict>> {
        let exp = &self.inner;
        let result = py.detach(|| exp.run(threads)).map_err(py_err)?;
        let out = PyDict::new(py);
        let rounds = result
            .rounds
            .iter()
            .map(|r| round_dict(py, r))
            .collect::<PyResult<Vec<_>>>()?;
        out.set_item("rounds", rounds)?;
        out.set_item("summary", summary_dict(py, &result.summary)?)?;
        Ok(out)
    }
}

/// Run a configuration the way `fsl run` does, writing all output files.
#[pyfunction]
fn run_config(py: Python<'_>, config: &PyConfig) -> PyResult<()> {
    let cfg = config.inner.clone();
    py.detach(|| fsl_core::cli::run(&cfg)).map_err(py_err)
}

/// FL-Defender trust bookkeeping across rounds.
#[pyclass(name = "TrustState", module = "fsl")]
struct PyTrust {
    inner: TrustState,
}

#[pymethods]
impl PyTrust {
    #[new]
    fn new(workers: usize) -> Self {
        PyTrust {
            inner: TrustState::new(workers),
        }
    }

    /// Feed one round of last-layer gradients (rows follow `selected`) and
    /// return the trust of each selected worker.
    fn update(&mut self, grads: Vec<Vec<f64>>, selected: Vec<usize>) -> PyResult<Vec<f64>> {
        let f = aggregation::compress_last_layer(&grads).map_err(py_err)?;
        let centroid = f.centroid.expect("set by compress_last_layer");
        aggregation::fl_defender_trust(&f, centroid, &selected, &mut self.inner).map_err(py_err)
    }

    #[getter]
    fn history(&self) -> Vec<f64> {
        self.inner.history.clone()
    }

    #[getter]
    fn gamma(&self) -> Vec<f64> {
        self.inner.gamma.clone()
    }

    #[getter]
    fn fallback(&self) -> bool {
        self.inner.fallback
    }
}

#[pyfunction]
#[pyo3(signature = (rows, counts = None))]
fn fedavg(rows: Vec<Vec<f64>>, counts: Option<Vec<usize>>) -> PyResult<Vec<f64>> {
    let ups = as_updates(&rows, counts.as_deref())?;
    Ok(aggregation::fedavg(&ups).map_err(py_err)?.flatten())
}

#[pyfunction]
fn coordinate_median(rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(aggregation::coordinate_median(&as_updates(&rows, None)?)
        .map_err(py_err)?
        .flatten())
}

#[pyfunction]
#[pyo3(signature = (rows, beta = 0.2))]
fn trimmed_mean(rows: Vec<Vec<f64>>, beta: f64) -> PyResult<Vec<f64>> {
    Ok(aggregation::trimmed_mean(&as_updates(&rows, None)?, beta)
        .map_err(py_err)?
        .flatten())
}

/// Returns `(selected indices, aggregate)`.
#[pyfunction]
#[pyo3(signature = (rows, f = None, n_select = None))]
fn multi_krum(rows: Vec<Vec<f64>>, f: Option<usize>, n_select: Option<usize>) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let m = rows.len();
    let f = f.unwrap_or_else(|| aggregation::default_krum_f(m));
    let n = n_select.unwrap_or(m.saturating_sub(f));
    let sel = aggregation::multi_krum(&as_updates(&rows, None)?, f, n).map_err(py_err)?;
    Ok((sel.selected, sel.model.flatten()))
}

#[pyfunction]
fn foolsgold(histories: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    aggregation::foolsgold(&histories).map_err(py_err)
}

#[pyfunction]
fn cosine_similarity_matrix(rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let m = aggregation::cosine_similarity_matrix(&rows).map_err(py_err)?;
    Ok(m.0.outer_iter().map(|r| r.to_vec()).collect())
}

/// Returns `(pcs, eigenvalues)`; `pcs` has one `[pc1, pc2]` pair per row.
#[pyfunction]
fn pca2(rows: Vec<Vec<f64>>) -> PyResult<(Vec<[f64; 2]>, [f64; 2])> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must share a length"));
    }
    let a = Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j]);
    let f = aggregation::pca2(a.view()).map_err(py_err)?;
    Ok(((0..f.len()).map(|i| f.pair(i)).collect(), f.eigenvalues))
}

/// Per-worker `(magnitude, angle_deg)` features in one of the diagnostic
/// modes. Returns `{"mode", "workers": [...], "separation_margin"}`.
#[pyfunction]
#[pyo3(signature = (mode, grads, attackers = None))]
fn features<'py>(
    py: Python<'py>,
    mode: &str,
    grads: Vec<Vec<f64>>,
    attackers: Option<Vec<usize>>,
) -> PyResult<Bound<'py, PyDict>> {
    let mode: FeatureMode = mode.parse().map_err(py_err)?;
    let ids: Vec<usize> = (0..grads.len()).collect();
    let attackers: Option<BTreeSet<usize>> = attackers.map(|a| a.into_iter().collect());
    let rep = features_from_gradients(mode, &grads, &ids, attackers.as_ref()).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("mode", rep.mode.name())?;
    let workers = rep
        .workers
        .iter()
        .map(|w| {
            let d = PyDict::new(py);
            d.set_item("worker", w.worker)?;
            d.set_item("magnitude", w.magnitude)?;
            d.set_item("angle_deg", w.angle_deg)?;
            d.set_item("is_attacker", w.is_attacker)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    out.set_item("workers", workers)?;
    out.set_item("separation_margin", rep.separation_margin)?;
    Ok(out)
}

#[pyfunction]
fn fmt_sig6(v: f64) -> String {
    report::fmt_sig6(v)
}

#[pyfunction]
fn config_reference() -> String {
    config::reference_markdown()
}

#[pymodule]
fn fsl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyExperiment>()?;
    m.add_class::<PyTrust>()?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(fedavg, m)?)?;
    m.add_function(wrap_pyfunction!(coordinate_median, m)?)?;
    m.add_function(wrap_pyfunction!(trimmed_mean, m)?)?;
    m.add_function(wrap_pyfunction!(multi_krum, m)?)?;
    m.add_function(wrap_pyfunction!(foolsgold, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(pca2, m)?)?;
    m.add_function(wrap_pyfunction!(features, m)?)?;
    m.add_function(wrap_pyfunction!(fmt_sig6, m)?)?;
    m.add_function(wrap_pyfunction!(config_reference, m)?)?;
    m.add("DEFENSES", Defense::ALL_NAMES.to_vec())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vectors_survive_the_single_layer_wrapping() {
        let v = vec![1.0, -2.0, 3.5, 4.0];
        assert_eq!(as_update(0, &v, 1).unwrap().params.flatten(), v);
    }

    #[test]
    fn sample_counts_must_match_rows() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(as_updates(&rows, Some(&[1, 3])).unwrap()[1].num_samples, 3);
        assert!(as_updates(&rows, Some(&[1])).is_err());
    }
}
