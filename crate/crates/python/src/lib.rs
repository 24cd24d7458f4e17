//! Python bindings: datasets, models, training, explanations and stability.
//!
//! Images cross the boundary as flat `[3*h*w]` float lists in channel-major order.

use lficam::backbone::{AttentionLayer, BackboneConfig};
use lficam::checkpoint::{load_checkpoint, save_checkpoint};
use lficam::data::{self, BBox};
use lficam::oracles;
use lficam::stability::{self, CamMethod};
use lficam::training::{self, Augmentation, TrainConfig};
use lficam::{Error, LfiCamModel, ModelConfig, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn image_tensor(pixels: Vec<f32>, size: (usize, usize)) -> PyResult<Tensor<f32>> {
    Tensor::new(&[3, size.0, size.1], pixels).map_err(to_py)
}

/// A labelled image collection, optionally with one box per image.
#[pyclass(name = "Dataset", module = "lficam_py")]
pub struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Two-class blob images: label 0 has its blob on the left half, 1 on the right.
    #[staticmethod]
    #[pyo3(signature = (n, size = 32, seed = 0))]
    fn synthetic(n: usize, size: usize, seed: u64) -> PyResult<Self> {
        let inner = data::generate_synthetic_blobs(n, size, size, seed).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = data::load_packed(path).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        data::save_packed(&self.inner, path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn size(&self) -> (usize, usize) {
        (self.inner.height, self.inner.width)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels()
    }

    fn image(&self, index: usize) -> PyResult<Vec<f32>> {
        self.item(index).map(|i| i.pixels.data().to_vec())
    }

    fn bbox(&self, index: usize) -> PyResult<Option<(f64, f64, f64, f64)>> {
        Ok(self.item(index)?.bbox.as_ref().map(|b: &BBox| (b.x0, b.y0, b.x1, b.y1)))
    }

    /// The first `n` images and the rest.
    fn split(&self, n: usize) -> (PyDataset, PyDataset) {
        let (a, b) = self.inner.clone().split_at(n);
        (PyDataset { inner: a }, PyDataset { inner: b })
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(len={}, size={}x{}, classes={})",
            self.inner.len(),
            self.inner.height,
            self.inner.width,
            self.inner.num_classes
        )
    }
}

impl PyDataset {
    fn item(&self, index: usize) -> PyResult<&data::LabeledImage> {
        self.inner
            .items
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range for {} images", self.inner.len())))
    }
}

/// Prediction and explanation for one image.
#[pyclass(name = "Explanation", module = "lficam_py", get_all)]
pub struct PyExplanation {
    prediction: usize,
    logits: Vec<f32>,
    importance: Vec<f32>,
    /// Normalized map, row-major, `shape` = (m, n).
    cam: Vec<f32>,
    shape: (usize, usize),
}

#[pyclass(name = "Model", module = "lficam_py")]
pub struct PyModel {
    inner: LfiCamModel,
}

#[allow(clippy::too_many_arguments)]
fn model_config(
    input_size: usize,
    widths: Vec<usize>,
    strides: Option<Vec<usize>>,
    blocks_per_stage: usize,
    num_classes: usize,
    attention_layer: &str,
    fin_depth: usize,
    use_fin: bool,
) -> PyResult<ModelConfig> {
    let stage_strides = strides.unwrap_or_else(|| vec![2; widths.len()]);
    let attention_layer: AttentionLayer = attention_layer.parse().map_err(to_py)?;
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            input_size: (input_size, input_size),
            widths,
            stage_strides,
            blocks_per_stage,
            num_classes,
            attention_layer,
            ..BackboneConfig::default()
        },
        fin_depth,
        use_fin,
    };
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        input_size = 32,
        widths = vec![8, 16, 32],
        strides = None,
        blocks_per_stage = 1,
        num_classes = 2,
        attention_layer = "last",
        fin_depth = 4,
        use_fin = true,
        seed = 0,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        input_size: usize,
        widths: Vec<usize>,
        strides: Option<Vec<usize>>,
        blocks_per_stage: usize,
        num_classes: usize,
        attention_layer: &str,
        fin_depth: usize,
        use_fin: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = model_config(
            input_size,
            widths,
            strides,
            blocks_per_stage,
            num_classes,
            attention_layer,
            fin_depth,
            use_fin,
        )?;
        let inner = LfiCamModel::new(cfg, seed).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = load_checkpoint(path).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.inner, path).map_err(to_py)
    }

    /// The configuration as `key = value` lines.
    fn config(&self) -> String {
        self.inner.config().to_toml()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        self.inner.config().backbone.input_size
    }

    fn param_counts(&self) -> (usize, usize) {
        (self.inner.backbone_param_count(), self.inner.fin_param_count())
    }

    fn predict(&self, image: Vec<f32>) -> PyResult<usize> {
        let img = image_tensor(image, self.input_size())?;
        self.inner.predict(&img).map_err(to_py)
    }

    fn explain(&self, image: Vec<f32>) -> PyResult<PyExplanation> {
        let img = image_tensor(image, self.input_size())?;
        let out = self.inner.lfi_cam_forward(&img).map_err(to_py)?;
        Ok(PyExplanation {
            prediction: out.predicted_class(),
            logits: out.logits.data().to_vec(),
            importance: out.importance.as_slice().to_vec(),
            shape: (out.cam.height(), out.cam.width()),
            cam: out.cam.normalized.data().to_vec(),
        })
    }

    /// Normalized Score-CAM map; the target defaults to the model's prediction.
    #[pyo3(signature = (image, target = None, batch_size = 64))]
    fn score_cam(&self, image: Vec<f32>, target: Option<usize>, batch_size: usize) -> PyResult<Vec<f32>> {
        let img = image_tensor(image, self.input_size())?;
        let target = match target {
            Some(t) => t,
            None => self.inner.predict(&img).map_err(to_py)?,
        };
        let sc = oracles::score_cam(&self.inner, &img, target, batch_size).map_err(to_py)?;
        Ok(sc.map.normalized.data().to_vec())
    }

    #[pyo3(signature = (image, target = None))]
    fn vanilla_cam(&self, image: Vec<f32>, target: Option<usize>) -> PyResult<Vec<f32>> {
        let img = image_tensor(image, self.input_size())?;
        let target = match target {
            Some(t) => t,
            None => self.inner.predict(&img).map_err(to_py)?,
        };
        let map = oracles::vanilla_cam(&self.inner, &img, target).map_err(to_py)?;
        Ok(map.normalized.data().to_vec())
    }

    /// Top-1 error in percent.
    fn evaluate(&self, data: &PyDataset) -> PyResult<f64> {
        training::evaluate_top1(&self.inner, &data.inner).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        let b = &self.inner.config().backbone;
        format!(
            "Model(widths={:?}, classes={}, use_fin={})",
            b.widths,
            b.num_classes,
            self.inner.config().use_fin
        )
    }
}

type EpochRow = (usize, f64, f64, f64, f64);

/// Trains a fresh model; returns it with one `(epoch, lr, loss, train_err, test_err)` per epoch.
#[pyfunction]
#[pyo3(signature = (
    train_set, test_set, epochs = 30, base_lr = 0.1, batch_size = 64, weight_decay = 5e-4,
    seed = 0, use_fin = true, augmentation = "none", widths = vec![8, 16, 32], strides = None,
    fin_depth = 4,
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    train_set: &PyDataset,
    test_set: &PyDataset,
    epochs: usize,
    base_lr: f64,
    batch_size: usize,
    weight_decay: f64,
    seed: u64,
    use_fin: bool,
    augmentation: &str,
    widths: Vec<usize>,
    strides: Option<Vec<usize>>,
    fin_depth: usize,
) -> PyResult<(PyModel, Vec<EpochRow>)> {
    let tr = &train_set.inner;
    if tr.height != tr.width {
        return Err(PyValueError::new_err("only square images are supported here"));
    }
    let mcfg = model_config(tr.height, widths, strides, 1, tr.num_classes, "last", fin_depth, use_fin)?;
    let tcfg = TrainConfig {
        epochs,
        base_lr,
        batch_size,
        weight_decay,
        seed,
        use_fin,
        augmentation: augmentation.parse::<Augmentation>().map_err(to_py)?,
        ..TrainConfig::default()
    };
    let test = &test_set.inner;
    let (model, log) = py
        .detach(|| training::train_model(tr, test, &tcfg, &mcfg))
        .map_err(to_py)?;
    let rows = log
        .iter()
        .map(|m| (m.epoch, m.lr, m.train_loss, m.train_err, m.test_err))
        .collect();
    Ok((PyModel { inner: model }, rows))
}

type StabilityRows = (Vec<(f64, f64)>, usize, f64);

/// Per-model `(accuracy, mean_iou)` rows and the overall average IoU.
#[pyfunction]
#[pyo3(signature = (models, data, threshold = 127, method = "lfi"))]
fn stability_report(
    models: Vec<PyRef<'_, PyModel>>,
    data: &PyDataset,
    threshold: u8,
    method: &str,
) -> PyResult<StabilityRows> {
    let method: CamMethod = method.parse().map_err(to_py)?;
    let ids: Vec<String> = (0..models.len()).map(|i| i.to_string()).collect();
    let refs: Vec<&LfiCamModel> = models.iter().map(|m| &m.inner).collect();
    let report = stability::stability_protocol(&ids, &refs, &data.inner, threshold, method).map_err(to_py)?;
    let rows = report.rows.iter().map(|r| (r.accuracy, r.mean_iou)).collect();
    Ok((rows, report.baseline, report.average))
}

/// IoU of two equally sized boolean masks.
#[pyfunction]
fn iou(a: Vec<bool>, b: Vec<bool>, height: usize, width: usize) -> PyResult<f64> {
    let a = stability::BinaryMask::new(height, width, a).map_err(to_py)?;
    let b = stability::BinaryMask::new(height, width, b).map_err(to_py)?;
    stability::iou(&a, &b).map_err(to_py)
}

#[pymodule]
fn lficam_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyExplanation>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(stability_report, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    Ok(())
}
