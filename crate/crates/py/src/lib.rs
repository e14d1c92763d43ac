//! Python bindings: simulation, pseudo-distances, model training and
//! evaluation, affine alignment.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use adapos_core::checkpoint::Checkpoint;
use adapos_core::eval::{self, Localizer, TrainedModel};
use adapos_core::harness::ModelSection;
use adapos_core::harness::ModelSize;
use adapos_core::metrics::{MetricConfig, MetricMode, PseudoDistanceProvider};
use adapos_core::models::{count_configurations as count, AntennaSubset, Architecture, ModelSpec, Network};
use adapos_core::sim::{self, Snapshot};
use adapos_core::training::{self, Strategy, TrainConfig, TrainHooks};
use adapos_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Format { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_)
        | Error::Usage(_)
        | Error::Validation(_)
        | Error::Comparability(_)
        | Error::ExcludedSingleAntenna
        | Error::AntennaId { .. }
        | Error::DegenerateFit(_)
        | Error::Shape { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for adapos_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Number of antenna subsets with size in `[n_min, n_max]`.
#[pyfunction]
fn count_configurations(a_max: usize, n_min: usize, n_max: usize) -> PyResult<u64> {
    count(a_max, n_min, n_max).py()
}

/// Least-squares affine map from `pred` onto `truth`: `(A, b, condition)`.
#[pyfunction]
fn fit_affine(pred: Vec<[f64; 2]>, truth: Vec<[f64; 2]>) -> PyResult<([[f64; 2]; 2], [f64; 2], f64)> {
    let t = eval::fit_affine(&pred, &truth).py()?;
    Ok((t.a, t.b, t.condition))
}

#[pyfunction]
fn mae(pred: Vec<[f64; 2]>, truth: Vec<[f64; 2]>) -> PyResult<f64> {
    eval::mae(&pred, &truth).py()
}

#[pyfunction]
fn spearman(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("sequences differ in length"));
    }
    Ok(adapos_core::metrics::spearman(&a, &b))
}

/// Simulated CIR recordings: one snapshot per timestamp, all antennas.
#[pyclass(module = "adapos", frozen)]
struct Dataset {
    inner: sim::Dataset,
    snapshots: Vec<Snapshot>,
}

impl Dataset {
    fn wrap(inner: sim::Dataset) -> PyResult<Self> {
        let snapshots = inner.snapshots().py()?;
        Ok(Self { inner, snapshots })
    }
}

#[pymethods]
impl Dataset {
    /// Simulates a random walk through a preset environment.
    #[staticmethod]
    #[pyo3(signature = (preset="desk", duration_s=60.0, rate_hz=6.6, max_speed=1.0, seed=0))]
    fn simulate(preset: &str, duration_s: f64, rate_hz: f64, max_speed: f64, seed: u64) -> PyResult<Self> {
        let env_seed = adapos_core::derive_seed(seed, "environment", 0);
        let mut env = match preset {
            "desk" => sim::Environment::desk(env_seed),
            "desk-mimo" => sim::Environment::desk_mimo(env_seed),
            other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
        };
        let traj = sim::generate_trajectory(
            &env,
            duration_s,
            rate_hz,
            max_speed,
            adapos_core::derive_seed(seed, "trajectory", 0),
        )
        .py()?;
        env.seed = adapos_core::derive_seed(seed, "noise", 0);
        Self::wrap(sim::generate_dataset(&env, &traj).py()?)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Self::wrap(sim::read_dataset(&path).py()?)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        sim::write_dataset(&path, &self.inner).py()
    }

    fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        sim::write_csv(&path, &self.inner).py()
    }

    #[getter]
    fn a_max(&self) -> usize {
        self.inner.a_max
    }

    fn __len__(&self) -> usize {
        self.snapshots.len()
    }

    fn positions(&self) -> Vec<[f64; 2]> {
        self.snapshots.iter().map(|s| s.position).collect()
    }

    fn timestamps(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.timestamp).collect()
    }

    /// Normalized taps of one snapshot and antenna, `[3][80]`.
    fn cir(&self, index: usize, antenna: usize) -> PyResult<Vec<Vec<f64>>> {
        let s = self
            .snapshots
            .get(index)
            .ok_or_else(|| PyValueError::new_err("snapshot index out of range"))?;
        let t = s
            .cirs
            .get(antenna)
            .ok_or_else(|| PyValueError::new_err("antenna id out of range"))?;
        Ok(t.data().chunks(sim::TAPS).map(|c| c.to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        format!("Dataset(snapshots={}, a_max={})", self.snapshots.len(), self.inner.a_max)
    }
}

fn metric_mode(mode: &str) -> PyResult<MetricMode> {
    match mode {
        "timestamp" => Ok(MetricMode::Timestamp),
        "cir" => Ok(MetricMode::Cir),
        "fused-geodesic" => Ok(MetricMode::FusedGeodesic),
        other => Err(PyValueError::new_err(format!("unknown metric mode {other:?}"))),
    }
}

fn metric_config(mode: &str, k: usize, speed: f64, cap: f64) -> PyResult<MetricConfig> {
    Ok(MetricConfig {
        mode: metric_mode(mode)?,
        speed,
        cap,
        k,
    })
}

/// Pseudo-distances between the snapshots of a dataset.
#[pyclass(module = "adapos", frozen)]
struct PseudoDistances {
    inner: PseudoDistanceProvider,
}

#[pymethods]
impl PseudoDistances {
    #[new]
    #[pyo3(signature = (dataset, mode="fused-geodesic", k=10, speed=1.0, cap=5.0))]
    fn new(dataset: &Dataset, mode: &str, k: usize, speed: f64, cap: f64) -> PyResult<Self> {
        let cfg = metric_config(mode, k, speed, cap)?;
        Ok(Self {
            inner: PseudoDistanceProvider::build(&cfg, &dataset.snapshots).py()?,
        })
    }

    fn distance(&self, n: usize, k: usize) -> PyResult<f64> {
        self.inner.distance(n, k).py()
    }

    fn distances_from(&self, n: usize) -> PyResult<Vec<f64>> {
        self.inner.distances_from(n).py()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn parse_strategy(s: &str) -> PyResult<Strategy> {
    s.parse().py()
}

fn parse_subset(ids: Option<Vec<usize>>, a_max: usize) -> PyResult<AntennaSubset> {
    match ids {
        None => Ok(AntennaSubset::full(a_max)),
        Some(v) => AntennaSubset::from_unsorted(v, a_max).py(),
    }
}

/// An AdaPos or baseline network with its parameters.
#[pyclass(module = "adapos", frozen)]
struct Model {
    spec: ModelSpec,
    strategy: Strategy,
    trained: TrainedModel,
}

#[pymethods]
impl Model {
    /// Freshly initialized network. `size` is `full`, `desk`, or `test`.
    #[new]
    #[pyo3(signature = (architecture="adapos", a_max=6, size="desk", seed=0))]
    fn new(architecture: &str, a_max: usize, size: &str, seed: u64) -> PyResult<Self> {
        let arch = match architecture {
            "adapos" => Architecture::AdaPos,
            "baseline" => Architecture::Baseline,
            other => return Err(PyValueError::new_err(format!("unknown architecture {other:?}"))),
        };
        let size = match size {
            "full" => ModelSize::Full,
            "desk" => ModelSize::Desk,
            "test" => ModelSize::Test,
            other => return Err(PyValueError::new_err(format!("unknown size {other:?}"))),
        };
        let spec = ModelSection { architecture: arch, size }.spec(arch, a_max);
        let (network, params) = Network::init(&spec, seed).py()?;
        Ok(Self {
            spec,
            strategy: Strategy::RandomN,
            trained: TrainedModel { network, params },
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let c = Checkpoint::load(&path).py()?;
        let (network, _) = Network::init(&c.model, 0).py()?;
        Ok(Self {
            spec: c.model,
            strategy: c.strategy,
            trained: TrainedModel { network, params: c.params },
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint {
            model: self.spec.clone(),
            strategy: self.strategy,
            params: self.trained.params.clone(),
        }
        .save(&path)
        .py()
    }

    #[getter]
    fn architecture(&self) -> String {
        self.spec.architecture().to_string()
    }

    #[getter]
    fn a_max(&self) -> usize {
        self.spec.a_max()
    }

    #[getter]
    fn strategy(&self) -> String {
        self.strategy.to_string()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.trained.params.numel()
    }

    /// Pseudo-coordinates for the given snapshots seen through `antennas`
    /// (all antennas when omitted).
    #[pyo3(signature = (dataset, indices=None, antennas=None))]
    fn predict(
        &self,
        py: Python<'_>,
        dataset: &Dataset,
        indices: Option<Vec<usize>>,
        antennas: Option<Vec<usize>>,
    ) -> PyResult<Vec<[f64; 2]>> {
        let subset = parse_subset(antennas, self.spec.a_max())?;
        let idx = indices.unwrap_or_else(|| (0..dataset.snapshots.len()).collect());
        let batch = idx
            .iter()
            .map(|&i| {
                dataset
                    .snapshots
                    .get(i)
                    .ok_or_else(|| PyValueError::new_err(format!("snapshot index {i} out of range")))
            })
            .collect::<PyResult<Vec<_>>>()?;
        py.detach(|| self.trained.locate(&batch, &subset)).py()
    }

    /// Siamese training against the dataset's pseudo-distances; returns the
    /// trained model and the per-step loss.
    #[pyo3(signature = (dataset, distances, strategy="random-n", steps=100, batch_size=32, lr=1e-3, warmup_steps=50, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &self,
        py: Python<'_>,
        dataset: &Dataset,
        distances: &PseudoDistances,
        strategy: &str,
        steps: usize,
        batch_size: usize,
        lr: f64,
        warmup_steps: u64,
        seed: u64,
    ) -> PyResult<(Model, Vec<f64>)> {
        let strategy = parse_strategy(strategy)?;
        let cfg = TrainConfig {
            strategy,
            batch_size,
            epochs: 1,
            pairs_per_epoch: Some(steps.max(1) * batch_size.max(1)),
            base_lr: lr,
            warmup_steps,
            seed,
            ..TrainConfig::default()
        };
        let out = py
            .detach(|| {
                training::train(
                    &self.trained.network,
                    &self.trained.params,
                    &dataset.snapshots,
                    &distances.inner,
                    &cfg,
                    TrainHooks::default(),
                )
            })
            .py()?;
        let losses = out.losses.iter().map(|r| r.loss).collect();
        Ok((
            Model {
                spec: self.spec.clone(),
                strategy,
                trained: TrainedModel {
                    network: self.trained.network.clone(),
                    params: out.params,
                },
            },
            losses,
        ))
    }

    /// Post-alignment MAE with random `n_e`-antenna subsets per batch.
    #[pyo3(signature = (dataset, n_e, seed=0, batch_size=64))]
    fn evaluate(&self, py: Python<'_>, dataset: &Dataset, n_e: usize, seed: u64, batch_size: usize) -> PyResult<f64> {
        py.detach(|| eval::evaluate_model(&self.trained, &dataset.snapshots, n_e, seed, batch_size))
            .py()
            .map(|e| e.mae)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(architecture={:?}, a_max={}, strategy={:?}, parameters={})",
            self.spec.architecture().to_string(),
            self.spec.a_max(),
            self.strategy.to_string(),
            self.trained.params.numel()
        )
    }
}

#[pymodule]
pub fn adapos(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(count_configurations, m)?)?;
    m.add_function(wrap_pyfunction!(fit_affine, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_class::<Dataset>()?;
    m.add_class::<PseudoDistances>()?;
    m.add_class::<Model>()?;
    Ok(())
}
