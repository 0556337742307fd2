use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde_json::Value;

use vegcast_core::baselines::Baseline;
use vegcast_core::cli::{self, read_dataset, DatasetManifest, RunConfig};
use vegcast_core::error::Error;
use vegcast_core::evaluation::{evaluate_forecasts, pixel_metrics as core_pixel_metrics, wilcoxon_signed_rank};
use vegcast_core::minicube::{load_minicube, save_minicube, Dataset as CoreDataset, Minicube as CoreMinicube, Split};
use vegcast_core::models::{load_checkpoint, save_checkpoint, Family, Forecast as CoreForecast, Model as CoreModel, ModelConfig, WeatherStats};
use vegcast_core::training::{train, TrainConfig, TrainStatus};

fn err(e: Error) -> PyErr {
    match e {
        Error::Contract(_) | Error::NoValidPixels => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py(py: Python<'_>, value: Value) -> PyResult<Py<PyAny>> {
    let json = PyModule::import(py, "json")?;
    Ok(json.call_method1("loads", (value.to_string(),))?.unbind())
}

fn parse_split(tag: &str) -> PyResult<Split> {
    tag.parse().map_err(err)
}

/// One spatio-temporal sample; arrays are returned flat in row-major order.
#[pyclass(name = "Minicube", frozen, skip_from_py_object, module = "vegcast")]
#[derive(Clone)]
struct Minicube {
    inner: CoreMinicube,
}

#[pymethods]
impl Minicube {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_minicube(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_minicube(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn split(&self) -> String {
        self.inner.split.to_string()
    }

    #[getter]
    fn location_id(&self) -> String {
        self.inner.location_id.clone()
    }

    #[getter]
    fn context_len(&self) -> usize {
        self.inner.context_len
    }

    #[getter]
    fn target_len(&self) -> usize {
        self.inner.target_len
    }

    /// `(steps, height, width)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.steps(), self.inner.height(), self.inner.width())
    }

    fn ndvi(&self) -> Vec<f32> {
        self.inner.ndvi.data().to_vec()
    }

    fn valid_mask(&self) -> PyResult<Vec<f32>> {
        Ok(self.inner.valid_mask().map_err(err)?.data().to_vec())
    }

    fn __repr__(&self) -> String {
        format!("Minicube(id={:?}, split={}, shape={:?})", self.inner.id, self.inner.split, self.shape())
    }
}

/// A `[K, H, W]` NDVI forecast for one minicube.
#[pyclass(name = "Forecast", frozen, from_py_object, module = "vegcast")]
#[derive(Clone)]
struct Forecast {
    inner: CoreForecast,
}

#[pymethods]
impl Forecast {
    #[getter]
    fn model_id(&self) -> String {
        self.inner.model_id.clone()
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash.clone()
    }

    #[getter]
    fn cube_id(&self) -> String {
        self.inner.cube_id.clone()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.ndvi_hat.shape().to_vec()
    }

    fn values(&self) -> Vec<f32> {
        self.inner.ndvi_hat.data().to_vec()
    }
}

/// A generated dataset directory.
#[pyclass(name = "Dataset", frozen, module = "vegcast")]
struct Dataset {
    manifest: DatasetManifest,
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    /// Generates the synthetic benchmark into `out`; `cubes` caps the total count.
    #[staticmethod]
    #[pyo3(signature = (out, seed = 0, cubes = None, force = false))]
    fn generate(out: PathBuf, seed: u64, cubes: Option<usize>, force: bool) -> PyResult<Self> {
        let cfg = RunConfig { out: Some(out.clone()), seed: Some(seed), cubes, ..Default::default() };
        cli::cmd_generate(&cfg, force).map_err(|e| PyValueError::new_err(e.message))?;
        Self::load(out)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (manifest, inner) = read_dataset(&path).map_err(err)?;
        Ok(Self { manifest, inner })
    }

    #[getter]
    fn hash(&self) -> String {
        self.manifest.hash.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.cubes.len()
    }

    fn split(&self, tag: &str) -> PyResult<Vec<Minicube>> {
        let tag = parse_split(tag)?;
        Ok(self.inner.split(tag).into_iter().map(|c| Minicube { inner: c.clone() }).collect())
    }

    /// Forecast of `persistence`, `prevyear` or `climatology` for one of this dataset's cubes.
    fn baseline_forecast(&self, name: &str, cube: &Minicube) -> PyResult<Forecast> {
        let b = Baseline::parse(name).map_err(err)?;
        Ok(Forecast { inner: b.forecast(&cube.inner, self.inner.history(&cube.inner)).map_err(err)? })
    }

    /// Scores forecasts against the cubes they name; returns the ScoreTable as a dict.
    fn evaluate(&self, py: Python<'_>, forecasts: Vec<Forecast>) -> PyResult<Py<PyAny>> {
        let mut cubes = Vec::with_capacity(forecasts.len());
        for f in &forecasts {
            let cube = self
                .inner
                .cubes
                .iter()
                .find(|c| c.id == f.inner.cube_id)
                .ok_or_else(|| PyValueError::new_err(format!("no cube {} in the dataset", f.inner.cube_id)))?;
            cubes.push(cube);
        }
        let first = forecasts.first().ok_or_else(|| PyValueError::new_err("no forecasts given"))?;
        let fcs: Vec<CoreForecast> = forecasts.iter().map(|f| f.inner.clone()).collect();
        let table = evaluate_forecasts(&first.inner.model_id, &first.inner.config_hash, &cubes, &fcs).map_err(err)?;
        to_py(py, serde_json::to_value(table).expect("serializable"))
    }
}

/// A forecasting model with its parameters.
#[pyclass(name = "Model", module = "vegcast")]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    /// Desk-scale model of `family`, with weather statistics fitted on the dataset's train split.
    #[new]
    #[pyo3(signature = (family, dataset, meteo = true, seed = 0))]
    fn new(family: &str, dataset: &Dataset, meteo: bool, seed: u64) -> PyResult<Self> {
        let family: Family = family.parse().map_err(err)?;
        let mut cfg = ModelConfig::desk(family);
        cfg.meteo = meteo;
        cfg.seed = seed;
        let stats = WeatherStats::fit(&dataset.inner.split(Split::Train)).map_err(err)?;
        Ok(Self { inner: CoreModel::new(cfg, stats).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_checkpoint(&path).map_err(err)?.model })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner, &[], Value::Null).map_err(err)
    }

    #[getter]
    fn model_id(&self) -> String {
        self.inner.model_id()
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash().to_string()
    }

    fn count_parameters(&self) -> usize {
        self.inner.count_parameters()
    }

    fn forecast(&self, cube: &Minicube) -> PyResult<Forecast> {
        Ok(Forecast { inner: self.inner.forecast(&cube.inner).map_err(err)? })
    }

    /// Trains on the dataset's train split with early stopping on val; returns the epoch log.
    #[pyo3(signature = (dataset, epochs = None, learning_rate = None, seed = 42))]
    fn train(
        &mut self,
        py: Python<'_>,
        dataset: &Dataset,
        epochs: Option<usize>,
        learning_rate: Option<f64>,
        seed: u64,
    ) -> PyResult<Py<PyAny>> {
        let mut cfg = TrainConfig::desk(self.inner.config.family);
        cfg.seed = seed;
        if let Some(e) = epochs {
            cfg.epochs = e;
        }
        if let Some(lr) = learning_rate {
            cfg.learning_rate = lr;
        }
        let size = dataset.inner.cubes[0].height();
        cfg.crop = cfg.crop.filter(|&c| c <= size);
        let out = train(self.inner.clone(), &dataset.inner.split(Split::Train), &dataset.inner.split(Split::Val), &cfg)
            .map_err(err)?;
        if let TrainStatus::Diverged { epoch } = out.status {
            return Err(PyRuntimeError::new_err(format!("training diverged at epoch {epoch}")));
        }
        self.inner = out.model;
        to_py(py, serde_json::to_value(&out.state.log.epochs).expect("serializable"))
    }
}

/// R², RMSE, NSE and |bias| of one pixel series; None when the pixel cannot be scored.
#[pyfunction]
fn pixel_metrics(py: Python<'_>, target: Vec<f64>, prediction: Vec<f64>, valid: Vec<bool>) -> PyResult<Option<Py<PyAny>>> {
    if target.len() != prediction.len() || target.len() != valid.len() {
        return Err(PyValueError::new_err("series lengths differ"));
    }
    match core_pixel_metrics(&target, &prediction, &valid) {
        Ok(m) => Ok(Some(to_py(py, serde_json::to_value(m).expect("serializable"))?)),
        Err(_) => Ok(None),
    }
}

/// Two-sided Wilcoxon signed-rank test on paired differences.
#[pyfunction]
fn wilcoxon(py: Python<'_>, diffs: Vec<f64>) -> PyResult<Py<PyAny>> {
    let w = wilcoxon_signed_rank(&diffs).map_err(err)?;
    to_py(py, serde_json::to_value(w).expect("serializable"))
}

/// Runs the `vegcast` command line with `args` (without the program name); returns the exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    cli::run(std::iter::once("vegcast".to_string()).chain(args))
}

#[pymodule]
fn vegcast(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Minicube>()?;
    m.add_class::<Forecast>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(pixel_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("FAMILIES", Family::ALL.iter().map(|f| f.as_str()).collect::<Vec<_>>())?;
    Ok(())
}
