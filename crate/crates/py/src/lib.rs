//! Python bindings. Images cross the boundary as flat row-major `CHW` float
//! lists plus `(height, width)`; label maps as flat `HW` byte sequences
//! (returned as `bytes`).

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use supmix::cli::{self, ExperimentConfig, Overrides};
use supmix::eval::{self, ConfusionMatrix, UndefinedIou};
use supmix::mixing::{self, LabelMap};
use supmix::numerics::Tensor;
use supmix::segnet::{SegModel, SegModelConfig};
use supmix::trainer::{argmax_labels, Variant};
use supmix::util::substream;

fn py_err(e: supmix::Error) -> PyErr {
    match e {
        supmix::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn image(data: Vec<f64>, height: usize, width: usize) -> PyResult<Tensor> {
    if height == 0 || width == 0 || !data.len().is_multiple_of(height * width) {
        return Err(PyValueError::new_err(format!(
            "{} values do not form channels of {height}×{width}",
            data.len()
        )));
    }
    let c = data.len() / (height * width);
    Tensor::new(vec![c, height, width], data).map_err(py_err)
}

fn label(data: Vec<u8>, height: usize, width: usize) -> PyResult<LabelMap> {
    LabelMap::new(height, width, data).map_err(py_err)
}

fn experiment(
    config: PathBuf,
    out: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    labeled_ratio: Option<f64>,
    variant: Option<&str>,
) -> PyResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&config).map_err(py_err)?;
    Overrides {
        out,
        seeds,
        labeled_ratio,
        variant: variant.map(Variant::parse).transpose().map_err(py_err)?,
    }
    .apply(&mut cfg);
    Ok(cfg)
}

/// Encoder–decoder segmentation network.
#[pyclass(name = "SegModel", module = "supmix_py")]
struct PySegModel {
    inner: SegModel,
}

#[pymethods]
impl PySegModel {
    #[new]
    #[pyo3(signature = (classes, widths = None, in_channels = 3, seed = 0))]
    fn new(classes: usize, widths: Option<(usize, usize, usize)>, in_channels: usize, seed: u64) -> PyResult<Self> {
        let mut cfg = SegModelConfig::new(classes);
        if let Some((a, b, c)) = widths {
            cfg.widths = [a, b, c];
        }
        cfg.in_channels = in_channels;
        Ok(Self { inner: SegModel::new(cfg, seed).map_err(py_err)? })
    }

    /// Loads a training checkpoint.
    #[staticmethod]
    fn load(path: PathBuf, classes: usize) -> PyResult<Self> {
        Ok(Self { inner: cli::load_model(&path, classes).map_err(py_err)? })
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.config().classes
    }

    #[getter]
    fn widths(&self) -> (usize, usize, usize) {
        let [a, b, c] = self.inner.config().widths;
        (a, b, c)
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Flat `KHW` logits.
    fn logits(&self, data: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<f64>> {
        let (logits, _) = self.inner.seg_forward(&image(data, height, width)?).map_err(py_err)?;
        Ok(logits.into_data())
    }

    /// Per-pixel argmax class.
    fn predict(&self, data: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<u8>> {
        let (logits, _) = self.inner.seg_forward(&image(data, height, width)?).map_err(py_err)?;
        Ok(argmax_labels(&logits).map_err(py_err)?.data().to_vec())
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!("SegModel(classes={}, widths={:?}, params={})", c.classes, c.widths, self.inner.param_count())
    }
}

/// Per-class IoU of one prediction; `None` where a class is absent from both.
#[pyfunction]
fn iou(prediction: Vec<u8>, truth: Vec<u8>, height: usize, width: usize, classes: usize) -> PyResult<Vec<Option<f64>>> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(&label(prediction, height, width)?, &label(truth, height, width)?)
        .map_err(py_err)?;
    Ok(eval::per_class_iou(&cm, UndefinedIou::Exclude))
}

/// SupMix: pastes ground-truth regions of the labeled image onto the unlabeled
/// one. Returns `(image, label, mask, selected_classes)`.
#[pyfunction]
#[pyo3(name = "supmix", signature = (x_l, y_l, x_u, y_u, height, width, background = 0, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn supmix_mix(
    x_l: Vec<f64>,
    y_l: Vec<u8>,
    x_u: Vec<f64>,
    y_u: Vec<u8>,
    height: usize,
    width: usize,
    background: u8,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<u8>, Vec<bool>, Vec<u8>)> {
    let mut rng = substream(seed, "py.supmix", &[]);
    let r = mixing::supmix(
        &image(x_l, height, width)?,
        &label(y_l, height, width)?,
        &image(x_u, height, width)?,
        &label(y_u, height, width)?,
        background,
        &mut rng,
    )
    .map_err(py_err)?;
    Ok((
        r.image.into_data(),
        r.label.data().to_vec(),
        r.mask.bits().to_vec(),
        r.selected.into_iter().collect(),
    ))
}

/// Writes a synthetic dataset; returns its manifest hash and class ratios.
#[pyfunction]
fn gen_data<'py>(py: Python<'py>, config: PathBuf, out: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let s = cli::cmd_gen_data(&config, &out).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("hash", &s.hash)?;
    d.set_item("class_names", &s.class_names)?;
    d.set_item("targets", &s.targets)?;
    d.set_item("ratios", &s.recount)?;
    d.set_item("within_tolerance", s.within_tolerance())?;
    Ok(d)
}

/// Trains every seed; returns `[(seed_dir, final_loss)]`.
#[pyfunction]
#[pyo3(signature = (config, out = None, seeds = None, labeled_ratio = None, variant = None))]
fn train(
    py: Python<'_>,
    config: PathBuf,
    out: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    labeled_ratio: Option<f64>,
    variant: Option<&str>,
) -> PyResult<Vec<(PathBuf, f64)>> {
    let cfg = experiment(config, out, seeds, labeled_ratio, variant)?;
    let s = py.detach(|| cli::cmd_train(&cfg)).map_err(py_err)?;
    Ok(s.seed_dirs.into_iter().zip(s.final_losses).collect())
}

/// Evaluates a run directory; one dict per seed, then the aggregate (`seed` None).
#[pyfunction]
#[pyo3(signature = (run_dir, manifest = None, out = None))]
fn evaluate<'py>(
    py: Python<'py>,
    run_dir: PathBuf,
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let (_, rows) = py
        .detach(|| cli::cmd_eval(&run_dir, manifest.as_deref(), out.as_deref()))
        .map_err(py_err)?;
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("variant", &r.variant)?;
            d.set_item("labeled_ratio", r.labeled_ratio)?;
            d.set_item("seed", r.seed)?;
            d.set_item("class_names", &r.report.class_names)?;
            d.set_item("iou", &r.report.iou)?;
            d.set_item("miou", r.report.miou)?;
            d.set_item("iou_std", &r.report.iou_std)?;
            d.set_item("miou_std", r.report.miou_std)?;
            Ok(d)
        })
        .collect()
}

/// Runs the ablation grid; returns the written files.
#[pyfunction]
#[pyo3(signature = (config, out = None, seeds = None, labeled_ratio = None))]
fn ablate(
    py: Python<'_>,
    config: PathBuf,
    out: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    labeled_ratio: Option<f64>,
) -> PyResult<Vec<PathBuf>> {
    let cfg = experiment(config, out, seeds, labeled_ratio, None)?;
    Ok(py.detach(|| cli::cmd_ablate(&cfg)).map_err(py_err)?.files)
}

#[pymodule]
fn supmix_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySegModel>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(supmix_mix, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add("IGNORE_INDEX", mixing::IGNORE_INDEX)?;
    Ok(())
}
