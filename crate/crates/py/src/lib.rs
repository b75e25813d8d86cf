//! Python bindings: datasets, AU maps, models, CAM extraction, training and
//! evaluation. Images cross the boundary as nested `h x w` float lists.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;

use aufer_core::au::{AuMapBuilder, LandmarkSet, Point};
use aufer_core::cam::{self, CamMethod};
use aufer_core::config::RunConfig;
use aufer_core::metrics;
use aufer_core::model::ModelState;
use aufer_core::synth;
use aufer_core::tensor::Tensor;
use aufer_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Data { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFinite { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_rows(h: usize, w: usize, values: &[f64]) -> Vec<Vec<f64>> {
    (0..h).map(|r| values[r * w..(r + 1) * w].to_vec()).collect()
}

fn image_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image must be a non-empty rectangular list of rows"));
    }
    Tensor::new(vec![1, h, w], rows.concat()).map_err(py_err)
}

fn landmark_set(points: Vec<(f64, f64)>) -> PyResult<LandmarkSet> {
    LandmarkSet::new(points.into_iter().map(|(x, y)| Point { x, y }).collect()).map_err(py_err)
}

/// Flat `key = value` run configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone, Default)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<BTreeMap<String, String>>) -> PyResult<Self> {
        let mut inner = RunConfig::default();
        for (k, v) in overrides.unwrap_or_default() {
            inner.set(&k, &v).map_err(py_err)?;
        }
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        RunConfig::load(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, lambda={}, layer={})", self.inner.seed, self.inner.lambda, self.inner.layer)
    }
}

#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: synth::Dataset,
}

impl PyDataset {
    fn sample(&self, i: usize) -> PyResult<&synth::Sample> {
        self.inner
            .samples
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(format!("sample {i} out of range")))
    }
}

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes.clone()
    }

    fn id(&self, i: usize) -> PyResult<usize> {
        Ok(self.sample(i)?.id)
    }

    fn label(&self, i: usize) -> PyResult<usize> {
        Ok(self.sample(i)?.label)
    }

    fn image(&self, i: usize) -> PyResult<Vec<Vec<f64>>> {
        let s = self.sample(i)?;
        Ok(to_rows(s.height(), s.width(), s.image.data()))
    }

    /// Normalized `(x, y)` landmark coordinates.
    fn landmarks(&self, i: usize) -> PyResult<Vec<(f64, f64)>> {
        Ok(self.sample(i)?.landmarks.points().iter().map(|p| (p.x, p.y)).collect())
    }
}

#[pyclass(name = "SplitDataset")]
struct PySplitDataset {
    inner: synth::SplitDataset,
}

#[pymethods]
impl PySplitDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        synth::load_dataset(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        synth::save_dataset(&self.inner, &path).map_err(py_err)
    }

    /// `train`, `val` or `test`.
    fn split(&self, name: &str) -> PyResult<PyDataset> {
        let split = synth::Split::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown split {name:?}")))?;
        Ok(PyDataset {
            inner: self.inner.get(split).clone(),
        })
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.train.len() + self.inner.val.len() + self.inner.test.len()
    }
}

/// Renders the synthetic dataset described by `config`.
#[pyfunction]
fn generate(config: &PyConfig) -> PyResult<PySplitDataset> {
    synth::generate(&config.inner.synth())
        .map(|inner| PySplitDataset { inner })
        .map_err(py_err)
}

#[pyclass(name = "AuMapBuilder")]
struct PyAuMapBuilder {
    inner: AuMapBuilder,
}

#[pymethods]
impl PyAuMapBuilder {
    #[new]
    fn new(config: &PyConfig, classes: Vec<String>, image_size: (usize, usize)) -> PyResult<Self> {
        config
            .inner
            .au_builder(&classes, image_size)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma()
    }

    /// AU map for `label`, at image resolution or at `target` if given.
    #[pyo3(signature = (landmarks, label, target = None))]
    fn build(&self, landmarks: Vec<(f64, f64)>, label: usize, target: Option<(usize, usize)>) -> PyResult<Vec<Vec<f64>>> {
        let lm = landmark_set(landmarks)?;
        let map = match target {
            Some(t) => self.inner.with_target(t).and_then(|b| b.build(&lm, label)),
            None => self.inner.build_full(&lm, label),
        }
        .map_err(py_err)?;
        Ok(to_rows(map.height(), map.width(), map.values()))
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: ModelState,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized model for `image_size` inputs and `classes` outputs.
    #[new]
    fn new(config: &PyConfig, image_size: (usize, usize), classes: usize) -> PyResult<Self> {
        ModelState::init(config.inner.model(image_size, classes))
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ModelState::load(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn stage_count(&self) -> usize {
        self.inner.stage_count()
    }

    fn logits(&self, image: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let pass = self.inner.forward(&image_tensor(image)?).map_err(py_err)?;
        Ok(pass.logits.into_data())
    }

    fn predict(&self, image: Vec<Vec<f64>>) -> PyResult<usize> {
        let pass = self.inner.forward(&image_tensor(image)?).map_err(py_err)?;
        Ok(pass.predicted())
    }

    /// Channel-mean attention map at stage `layer` (1-based).
    fn attention(&self, image: Vec<Vec<f64>>, layer: usize) -> PyResult<Vec<Vec<f64>>> {
        let pass = self.inner.forward(&image_tensor(image)?).map_err(py_err)?;
        let t = self.inner.attention(&pass, layer).map_err(py_err)?;
        let (h, w) = (t.shape()[0], t.shape()[1]);
        Ok(to_rows(h, w, t.data()))
    }

    /// Normalized class activation map: `cam`, `gradcam`, `gradcampp` or `layercam`.
    fn cam(&self, image: Vec<Vec<f64>>, label: usize, layer: usize, method: &str) -> PyResult<Vec<Vec<f64>>> {
        let method = CamMethod::parse(method).map_err(py_err)?;
        let map = cam::extract(&self.inner, &image_tensor(image)?, label, layer, method).map_err(py_err)?;
        Ok(to_rows(map.h, map.w, &map.values))
    }
}

/// Trains `model` in place on the train split; returns one dict per epoch.
/// Alignment uses the builder when `align` is set (weighted by `lambda`).
#[pyfunction]
#[pyo3(signature = (model, data, config, align = true))]
fn train(
    model: &mut PyModel,
    data: &PySplitDataset,
    config: &PyConfig,
    align: bool,
) -> PyResult<Vec<BTreeMap<String, Option<f64>>>> {
    let size = data
        .inner
        .train
        .image_size()
        .ok_or_else(|| PyValueError::new_err("empty training split"))?;
    let builder = config.inner.au_builder(data.inner.classes(), size).map_err(py_err)?;
    let log = aufer_core::train::fit(
        &mut model.inner,
        &data.inner.train,
        &data.inner.val,
        &config.inner.train(),
        align.then_some(&builder),
    )
    .map_err(py_err)?;
    Ok(log
        .records
        .iter()
        .map(|r| {
            BTreeMap::from([
                ("epoch".to_string(), Some(r.epoch as f64)),
                ("ce".to_string(), Some(r.ce)),
                ("align".to_string(), r.align),
                ("r_train".to_string(), r.r_train),
                ("r_val".to_string(), r.r_val),
                ("acc_val".to_string(), Some(r.acc_val)),
                ("seconds".to_string(), Some(r.seconds)),
            ])
        })
        .collect())
}

/// Accuracy and localization cosines on `data` at `config.layer`.
#[pyfunction]
#[pyo3(signature = (model, data, config, with_au = false))]
fn evaluate(model: &PyModel, data: &PyDataset, config: &PyConfig, with_au: bool) -> PyResult<BTreeMap<String, f64>> {
    let size = data
        .inner
        .image_size()
        .ok_or_else(|| PyValueError::new_err("empty dataset"))?;
    let builder = config.inner.au_builder(&data.inner.classes, size).map_err(py_err)?;
    let report = metrics::evaluate(
        &model.inner,
        &data.inner,
        config.inner.layer,
        &builder,
        &config.inner.methods,
        with_au,
    )
    .map_err(py_err)?;
    let mut out = BTreeMap::from([
        ("cl".to_string(), report.cl),
        ("att_cos".to_string(), report.att_cos),
        ("n_scored".to_string(), report.n_scored as f64),
    ]);
    for (m, v) in &report.cam_cos {
        out.insert(format!("cam_cos.{}", m.as_str()), *v);
    }
    Ok(out)
}

/// Cosine similarity with the zero-norm clamp used by the alignment loss.
#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("length mismatch"));
    }
    Ok(aufer_core::tensor::cosine_similarity(&a, &b, aufer_core::tensor::COSINE_EPS))
}

#[pymodule]
fn aufer(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PySplitDataset>()?;
    m.add_class::<PyAuMapBuilder>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add("EXPRESSIONS", synth::expression_names())?;
    Ok(())
}
