//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use dualpath::config::RunConfig;
use dualpath::flow::FlowModel;
use dualpath::metrics;
use dualpath::model::{DualPathCvae, GaussianLatent, LatentSource, ModelConfig};
use dualpath::motion::{generate_synthetic_dataset, GaitConfigSampler, Matrix, Skeleton};
use dualpath::nn::{load_checkpoint, AdamConfig, AdamState};
use dualpath::objectives::{self, Example, TrainSchedule};
use dualpath::sampler::min_pairwise_diversity;
use dualpath::Error;
use pyo3::exceptions::{PyFloatingPointError, PyIOError, PyValueError};
use pyo3::prelude::*;

type Rows = Vec<Vec<f64>>;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Json { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyFloatingPointError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &Rows) -> PyResult<Matrix> {
    Matrix::from_rows(rows).map_err(to_py)
}

fn rows(m: &Matrix) -> Rows {
    m.iter_rows().map(|r| r.to_vec()).collect()
}

fn matrices(seqs: &[Rows]) -> PyResult<Vec<Matrix>> {
    seqs.iter().map(matrix).collect()
}

/// Average pairwise L2 distance between sequences.
#[pyfunction]
#[pyo3(signature = (sequences, columns=None))]
fn apd(sequences: Vec<Rows>, columns: Option<Vec<usize>>) -> PyResult<f64> {
    metrics::apd(&matrices(&sequences)?, columns.as_deref()).map_err(to_py)
}

/// Minimum pairwise L2 distance between sequences.
#[pyfunction]
#[pyo3(signature = (sequences, columns=None))]
fn mpd(sequences: Vec<Rows>, columns: Option<Vec<usize>>) -> PyResult<f64> {
    metrics::mpd(&matrices(&sequences)?, columns.as_deref()).map_err(to_py)
}

/// Minimum pairwise squared distance, as used by the sampler objective.
#[pyfunction]
#[pyo3(signature = (sequences, columns=None))]
fn min_diversity(sequences: Vec<Rows>, columns: Option<Vec<usize>>) -> PyResult<f64> {
    min_pairwise_diversity(&matrices(&sequences)?, columns.as_deref()).map_err(to_py)
}

/// KL(N(mean_q, exp(log_std_q)^2) || N(mean_p, exp(log_std_p)^2)).
#[pyfunction]
fn kl_diag_gauss(mean_q: Vec<f64>, log_std_q: Vec<f64>, mean_p: Vec<f64>, log_std_p: Vec<f64>) -> PyResult<f64> {
    let q = GaussianLatent::new(mean_q, log_std_q).map_err(to_py)?;
    let p = GaussianLatent::new(mean_p, log_std_p).map_err(to_py)?;
    objectives::kl_diag_gauss(&q, &p).map_err(to_py)
}

/// Synthetic walker clips as `(past, future)` pairs.
#[pyfunction]
#[pyo3(signature = (count, past_frames=16, future_frames=32, seed=0))]
fn synthetic_dataset(count: usize, past_frames: usize, future_frames: usize, seed: u64) -> PyResult<Vec<(Rows, Rows)>> {
    let pairs = generate_synthetic_dataset(
        &Skeleton::walker(),
        count,
        past_frames,
        future_frames,
        &GaitConfigSampler::default(),
        seed,
    )
    .map_err(to_py)?;
    Ok(pairs.iter().map(|p| (rows(&p.past.frames), rows(&p.future.frames))).collect())
}

/// Default run configuration as a JSON document.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().emit()
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: DualPathCvae,
    opt: AdamState,
}

#[pymethods]
impl PyModel {
    /// `config` is a model-config JSON object; missing keys take defaults.
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = match config {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => ModelConfig::default(),
        };
        let inner = DualPathCvae::new(cfg, seed).map_err(to_py)?;
        let opt = AdamState::for_store(&inner.store);
        Ok(Self { inner, opt })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(to_py)?;
        let inner = DualPathCvae::from_checkpoint(&ck).map_err(to_py)?;
        let opt = ck.optimizer.unwrap_or_else(|| AdamState::for_store(&inner.store));
        Ok(Self { inner, opt })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, Some(&self.opt), Default::default()).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("config serializes")
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.store.len()
    }

    /// Trains for `epochs` more epochs; returns the mean total loss per epoch.
    #[pyo3(signature = (pairs, epochs, batch_size=16, lr=1e-4, seed=0))]
    fn train(
        &mut self,
        py: Python<'_>,
        pairs: Vec<(Rows, Rows)>,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let data: Vec<Example> = pairs
            .iter()
            .map(|(p, f)| Ok(Example { past: matrix(p)?, future: matrix(f)? }))
            .collect::<PyResult<_>>()?;
        let schedule = TrainSchedule {
            epochs,
            batch_size,
            adam: AdamConfig::with_lr(lr),
            seed,
        };
        let (model, opt) = (&mut self.inner, &mut self.opt);
        let log = py
            .detach(|| objectives::train_model(model, opt, &data, &schedule, 0, |_, _, _, _| Ok(())))
            .map_err(to_py)?;
        Ok(log.iter().map(|l| l.total).collect())
    }

    /// `k` futures for one past window. A fixed latent is drawn once from
    /// its prior and shared by all samples.
    #[pyo3(signature = (past, k, fix_zb=false, fix_zt=false, seed=0))]
    fn generate(&self, past: Rows, k: usize, fix_zb: bool, fix_zt: bool, seed: u64) -> PyResult<Vec<Rows>> {
        let c = matrix(&past)?;
        let mut rng = metrics::condition_rng(seed, 0);
        let source = |fixed: bool, prior: PyResult<GaussianLatent>, rng: &mut _| -> PyResult<LatentSource> {
            Ok(if fixed {
                LatentSource::Fixed(prior?.sample(rng))
            } else {
                LatentSource::PriorSample
            })
        };
        let zt = source(fix_zt, self.inner.prior_top(&c).map_err(to_py), &mut rng)?;
        let zb = source(fix_zb, self.inner.prior_bottom(&c).map_err(to_py), &mut rng)?;
        let out = self
            .inner
            .generate_controlled(&c, &zt, &zb, k, seed)
            .map_err(to_py)?;
        Ok(out.iter().map(rows).collect())
    }
}

#[pyclass(name = "PosePrior")]
struct PyPosePrior {
    inner: FlowModel,
}

#[pymethods]
impl PyPosePrior {
    #[new]
    #[pyo3(signature = (dim, layers=3, seed=0))]
    fn new(dim: usize, layers: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: FlowModel::new(dim, layers, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(to_py)?;
        Ok(Self {
            inner: FlowModel::from_checkpoint(&ck).map_err(to_py)?,
        })
    }

    /// Returns `(output, log_det)`.
    fn forward(&self, x: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
        self.inner.flow_forward(&x).map_err(to_py)
    }

    fn inverse(&self, o: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.flow_inverse(&o).map_err(to_py)
    }

    fn nll(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.flow_nll(&x).map_err(to_py)
    }
}

#[pymodule]
fn dualpath_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(apd, m)?)?;
    m.add_function(wrap_pyfunction!(mpd, m)?)?;
    m.add_function(wrap_pyfunction!(min_diversity, m)?)?;
    m.add_function(wrap_pyfunction!(kl_diag_gauss, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPosePrior>()?;
    Ok(())
}
