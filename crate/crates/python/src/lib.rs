//! Python bindings. Matrices cross the boundary as lists of rows; configs
//! as JSON strings using the same schema as the command-line tool.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector, Vector3};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use latent_hri::data::{self, SynthMode, SynthSpec};
use latent_hri::eval::{self, ExperimentConfig};
use latent_hri::infer::{self, RolloutOptions};
use latent_hri::{gauss, hmm, train, BlockedGaussian, Error};

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.exit_code() {
        3 if matches!(e, Error::Io { .. }) => PyIOError::new_err(msg),
        4 => PyArithmeticError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("ragged matrix: rows differ in length"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn to_vector3(v: &[f64]) -> PyResult<Vector3<f64>> {
    match v {
        [x, y, z] => Ok(Vector3::new(*x, *y, *z)),
        _ => Err(PyValueError::new_err(format!("expected 3 coordinates, got {}", v.len()))),
    }
}

fn parse_block(name: &str) -> PyResult<hmm::Block> {
    match name {
        "full" => Ok(hmm::Block::Full),
        "human" => Ok(hmm::Block::Human),
        "robot" => Ok(hmm::Block::Robot),
        _ => Err(PyValueError::new_err(format!("block must be 'full', 'human' or 'robot', got '{name}'"))),
    }
}

fn train_config(json: Option<&str>) -> PyResult<train::TrainConfig> {
    let cfg: train::TrainConfig = match json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => train::TrainConfig::default(),
    };
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// Exact conditional of the robot block of N(mean, cov) given the first
/// `split` coordinates. Returns (mean, cov).
#[pyfunction]
fn condition_exact(mean: Vec<f64>, cov: Vec<Vec<f64>>, split: usize, z_h: Vec<f64>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let g = gauss::Gaussian::new(DVector::from_vec(mean), to_matrix(&cov)?).map_err(py_err)?;
    let j = BlockedGaussian::new(g, split).map_err(py_err)?;
    let c = gauss::condition_exact(&j, &DVector::from_vec(z_h)).map_err(py_err)?;
    Ok((c.mean.as_slice().to_vec(), to_rows(&c.cov)))
}

/// Two-sided Mann-Whitney U test. Returns (U, p).
#[pyfunction]
fn mann_whitney_u(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64)> {
    let t = eval::mann_whitney_u(&a, &b).map_err(py_err)?;
    Ok((t.u, t.p))
}

#[pyfunction]
fn mse(pred: Vec<Vec<f64>>, gt: Vec<Vec<f64>>) -> PyResult<f64> {
    eval::mse(&to_matrix(&pred)?, &to_matrix(&gt)?).map_err(py_err)
}

/// Run a full experiment from a JSON config; returns the markdown report.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg: ExperimentConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let report = py.detach(|| eval::run_experiment(&cfg)).map_err(py_err)?;
    Ok(report.to_markdown())
}

#[pyclass(name = "Hmm", module = "latent_hri", frozen)]
struct PyHmm(hmm::Hmm);

#[pymethods]
impl PyHmm {
    /// Build from initial probabilities, a row-stochastic transition
    /// matrix, per-state (mean, cov) pairs and the human block size.
    #[new]
    fn new(pi: Vec<f64>, trans: Vec<Vec<f64>>, components: Vec<(Vec<f64>, Vec<Vec<f64>>)>, split: usize) -> PyResult<Self> {
        let comps = components
            .into_iter()
            .map(|(m, c)| gauss::Gaussian::new(DVector::from_vec(m), to_matrix(&c)?).map_err(py_err))
            .collect::<PyResult<Vec<_>>>()?;
        let h = hmm::Hmm::new(DVector::from_vec(pi), to_matrix(&trans)?, comps, split).map_err(py_err)?;
        Ok(PyHmm(h))
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.0.n_states()
    }

    /// Forward variable over `obs` (one observation per row) on the
    /// 'full', 'human' or 'robot' block.
    #[pyo3(signature = (obs, block = "full"))]
    fn forward(&self, obs: Vec<Vec<f64>>, block: &str) -> PyResult<Vec<Vec<f64>>> {
        let seq: Vec<DVector<f64>> = obs.into_iter().map(DVector::from_vec).collect();
        let a = hmm::forward(&self.0, &seq, parse_block(block)?).map_err(py_err)?;
        Ok(to_rows(&a.values))
    }

    fn forward_unobserved(&self, horizon: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&hmm::forward_unobserved(&self.0, horizon).map_err(py_err)?.values))
    }

    /// Robot-block conditional (mean, cov) given a human posterior.
    #[pyo3(signature = (z_h, alpha, posterior_var = None))]
    fn condition(&self, z_h: Vec<f64>, alpha: Vec<f64>, posterior_var: Option<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let d = z_h.len();
        let (var, mode) = match posterior_var {
            Some(v) => (DVector::from_vec(v), hmm::CondMode::WithCov),
            None => (DVector::from_element(d, 1.0), hmm::CondMode::Point),
        };
        let post = gauss::Gaussian::diagonal(DVector::from_vec(z_h), &var);
        let g = hmm::gmr_condition(&self.0, &post, &DVector::from_vec(alpha), mode).map_err(py_err)?;
        Ok((g.mean.as_slice().to_vec(), to_rows(&g.cov)))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

#[pyclass(name = "KinematicChain", module = "latent_hri", frozen)]
struct PyChain(latent_hri::KinematicChain);

#[pymethods]
impl PyChain {
    #[staticmethod]
    fn planar_two_link(l1: f64, l2: f64) -> Self {
        PyChain(latent_hri::KinematicChain::planar_two_link(l1, l2))
    }

    #[staticmethod]
    #[pyo3(signature = (upper = 0.181, fore = 0.15))]
    fn humanoid_arm(upper: f64, fore: f64) -> Self {
        PyChain(latent_hri::KinematicChain::humanoid_arm(upper, fore))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyChain(latent_hri::KinematicChain::load(path).map_err(py_err)?))
    }

    #[getter]
    fn dof(&self) -> usize {
        self.0.dof()
    }

    fn fk(&self, q: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.0.fk(&DVector::from_vec(q)).map_err(py_err)?.as_slice().to_vec())
    }

    /// Plain position IK. Returns (q, residual).
    fn ik_baseline(&self, target: Vec<f64>, q_init: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
        let s = self.0.ik_baseline(&to_vector3(&target)?, &DVector::from_vec(q_init)).map_err(py_err)?;
        Ok((s.q.as_slice().to_vec(), s.residual))
    }

    /// IK regularised towards `mu_q`. Returns (q, residual).
    #[pyo3(signature = (target, mu_q, lambda_x = infer::LAMBDA_X, lambda_q = infer::LAMBDA_Q))]
    fn ik_with_prior(&self, target: Vec<f64>, mu_q: Vec<f64>, lambda_x: f64, lambda_q: f64) -> PyResult<(Vec<f64>, f64)> {
        let s = self
            .0
            .ik_with_prior(&to_vector3(&target)?, &DVector::from_vec(mu_q), lambda_x, lambda_q)
            .map_err(py_err)?;
        Ok((s.q.as_slice().to_vec(), s.residual))
    }
}

#[pyclass(name = "Dataset", module = "latent_hri", frozen)]
struct PyDataset(data::Dataset);

#[pymethods]
impl PyDataset {
    /// Synthetic coupled reach dataset. `mode` is 'hhi' (partner as
    /// positions) or 'hri' (partner as joint angles). Split into train and
    /// test with `train_fraction`.
    #[staticmethod]
    #[pyo3(signature = (count = 40, mode = "hri", seed = 0, noise = 0.05, length = 100, label = "reach", train_fraction = 0.8))]
    fn synth(count: usize, mode: &str, seed: u64, noise: f64, length: usize, label: &str, train_fraction: f64) -> PyResult<Self> {
        let mode = match mode {
            "hhi" => SynthMode::Hhi,
            "hri" => SynthMode::Hri,
            _ => return Err(PyValueError::new_err("mode must be 'hhi' or 'hri'")),
        };
        let mut spec = SynthSpec::single(label, count, mode);
        spec.noise = noise;
        spec.length = length;
        let ds = data::synth_generate(&spec, &mut latent_hri::rng_from_seed(seed)).map_err(py_err)?;
        Ok(PyDataset(data::split(&ds, train_fraction, seed).map_err(py_err)?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset(data::load_dataset(path).map_err(py_err)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::save_dataset(&self.0, path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.pairs.len()
    }

    fn labels(&self) -> Vec<String> {
        self.0.labels()
    }

    /// Feature widths (human, partner).
    fn widths(&self) -> (usize, usize) {
        (self.0.h_width(), self.0.r_width())
    }

    fn test_indices(&self) -> Vec<usize> {
        self.0.indices(data::Split::Test)
    }

    fn label(&self, i: usize) -> PyResult<String> {
        Ok(self.pair(i)?.label.clone())
    }

    /// Raw frames (human, partner), one frame per row.
    fn frames(&self, i: usize) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let p = self.pair(i)?;
        Ok((to_rows(&p.h_frames), to_rows(&p.r_frames)))
    }

    /// Window features (human, partner), one window per row.
    fn features(&self, i: usize) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (h, r) = self.0.features(self.pair(i)?).map_err(py_err)?;
        Ok((to_rows(&h.transpose()), to_rows(&r.transpose())))
    }
}

impl PyDataset {
    fn pair(&self, i: usize) -> PyResult<&data::TrajectoryPair> {
        self.0
            .pairs
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("trajectory {i} out of range")))
    }
}

#[pyclass(name = "ModelBundle", module = "latent_hri", frozen)]
struct PyBundle(train::ModelBundle);

#[pymethods]
impl PyBundle {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyBundle(train::ModelBundle::load(path).map_err(py_err)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.0.variant.to_string()
    }

    #[getter]
    fn stage(&self) -> &'static str {
        match self.0.stage {
            train::Stage::Hhi => "hhi",
            train::Stage::Hri => "hri",
        }
    }

    fn labels(&self) -> Vec<String> {
        self.0.interactions.keys().cloned().collect()
    }

    fn hmm(&self, label: &str) -> PyResult<PyHmm> {
        Ok(PyHmm(self.0.interaction(label).map_err(py_err)?.hmm.clone()))
    }

    /// Conditional partner prediction for human windows (one per row).
    fn predict<'py>(&self, py: Python<'py>, label: &str, x_h: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
        let p = infer::predict_windows(&self.0, label, &to_matrix(&x_h)?.transpose()).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("windows", to_rows(&p.r_windows.transpose()))?;
        d.set_item("alpha", to_rows(&p.alpha.values))?;
        d.set_item("latent_h", to_rows(&p.latent_h.transpose()))?;
        d.set_item("latent_r", to_rows(&p.latent_r.transpose()))?;
        Ok(d)
    }

    /// Reactive loop over human frames (one frame per row). With `hand`
    /// (one xyz per output step), IK adapts the command during contact.
    #[pyo3(signature = (label, h_frames, chain = None, hand = None))]
    fn rollout<'py>(
        &self,
        py: Python<'py>,
        label: &str,
        h_frames: Vec<Vec<f64>>,
        chain: Option<&PyChain>,
        hand: Option<Vec<Vec<f64>>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let chain = chain.map_or_else(|| latent_hri::KinematicChain::humanoid_arm(0.181, 0.15), |c| c.0.clone());
        let hand_positions = hand
            .map(|h| h.iter().map(|v| to_vector3(v)).collect::<PyResult<Vec<_>>>())
            .transpose()?;
        let opts = RolloutOptions {
            hand_positions,
            ..RolloutOptions::default()
        };
        let r = infer::rollout(&self.0, label, &to_matrix(&h_frames)?, &chain, &opts).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("q", to_rows(&r.q))?;
        d.set_item("q_smooth", to_rows(&r.q_smooth))?;
        d.set_item("alpha", to_rows(&r.alpha))?;
        d.set_item("gate", r.gate)?;
        d.set_item("stiffness_low", r.stiffness_low)?;
        Ok(d)
    }

    /// Per-trajectory conditional MSE on the dataset's test split:
    /// list of (trajectory index, window MSE, last-frame MSE).
    fn evaluate(&self, dataset: &PyDataset) -> PyResult<Vec<(usize, f64, f64)>> {
        let rows = eval::evaluate_bundle(&self.0, &dataset.0, "").map_err(py_err)?;
        Ok(rows.into_iter().map(|r| (r.trajectory, r.mse, r.mse_last)).collect())
    }
}

/// Human-human training. `config_json` follows the `train` section of the
/// experiment config. Returns (bundle, per-epoch total loss).
#[pyfunction]
#[pyo3(signature = (dataset, config_json = None, seed = 0))]
fn train_hhi(py: Python<'_>, dataset: &PyDataset, config_json: Option<&str>, seed: u64) -> PyResult<(PyBundle, Vec<f64>)> {
    let cfg = train_config(config_json)?;
    let t = py.detach(|| train::train_hhi(&dataset.0, &cfg, seed, None)).map_err(py_err)?;
    Ok((PyBundle(t.bundle), t.trace.iter().map(|r| r.total).collect()))
}

/// Robot training on top of a human-human bundle.
#[pyfunction]
#[pyo3(signature = (dataset, hhi, config_json = None, seed = 0))]
fn train_hri(
    py: Python<'_>,
    dataset: &PyDataset,
    hhi: &PyBundle,
    config_json: Option<&str>,
    seed: u64,
) -> PyResult<(PyBundle, Vec<f64>)> {
    let cfg = train_config(config_json)?;
    let t = py.detach(|| train::train_hri(&dataset.0, &hhi.0, &cfg, seed)).map_err(py_err)?;
    Ok((PyBundle(t.bundle), t.trace.iter().map(|r| r.total).collect()))
}

#[pymodule]
#[pyo3(name = "latent_hri")]
fn latent_hri_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyHmm>()?;
    m.add_class::<PyChain>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyBundle>()?;
    m.add_function(wrap_pyfunction!(condition_exact, m)?)?;
    m.add_function(wrap_pyfunction!(mann_whitney_u, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(train_hhi, m)?)?;
    m.add_function(wrap_pyfunction!(train_hri, m)?)?;
    Ok(())
}
