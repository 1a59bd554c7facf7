//! Python module `rfp`: configs, cost accounting, synthetic scenes, detectors,
//! box utilities and gradient checks.
//!
//! Boxes cross the boundary as `(x, y, w, h)` tuples and images as flat,
//! planar lists of floats with an explicit `(channels, height, width)`.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rfp_core::config::ExperimentConfig;
use rfp_core::cost::{self, AblationAxis};
use rfp_core::data::{render_sample, SceneSpec};
use rfp_core::detect::{self, BBox, Detection, GroundTruthBox, AP_IOU};
use rfp_core::gradcheck::{check_model, check_ops, GradCheckSettings};
use rfp_core::model::{Detector, RfpOverride};
use rfp_core::tensor::Tensor;
use rfp_core::Error;

type BoxTuple = (f64, f64, f64, f64);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } | Error::Parse { .. } => PyOSError::new_err(e.to_string()),
        Error::Contract(_) | Error::Invariant(_) => PyRuntimeError::new_err(e.to_string()),
    }
}

fn bbox(b: BoxTuple) -> BBox {
    BBox::new(b.0, b.1, b.2, b.3)
}

fn tuple(b: &BBox) -> BoxTuple {
    (b.x, b.y, b.w, b.h)
}

/// A validated experiment configuration.
#[pyclass(name = "Config", module = "rfp", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Parse TOML (empty string = all defaults) with `key=value` overrides.
    #[new]
    #[pyo3(signature = (toml = "", overrides = Vec::new()))]
    fn new(toml: &str, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyConfig {
            inner: ExperimentConfig::from_toml_with(toml, &overrides).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn config_hash(&self) -> String {
        self.inner.config_hash()
    }

    fn arch_hash(&self) -> String {
        self.inner.arch_hash().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn __repr__(&self) -> String {
        format!("Config(config_hash={})", self.inner.config_hash())
    }
}

fn report_dict<'py>(py: Python<'py>, r: &cost::CostReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("input", r.input_hw)?;
    d.set_item("params", r.params)?;
    d.set_item("macs", r.macs)?;
    d.set_item("flops", r.flops())?;
    d.set_item("elementwise", r.elementwise)?;
    Ok(d)
}

fn resolve_model(
    preset: &str,
    config: Option<&PyConfig>,
) -> PyResult<(rfp_core::model::DetectorConfig, (usize, usize))> {
    match preset {
        "resnet50" => Ok((cost::resnet50_preset(), cost::RESNET50_INPUT)),
        "desk" => {
            let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
            let det = cfg.detector().map_err(to_py)?;
            Ok((det, (cfg.data.scene.height, cfg.data.scene.width)))
        }
        other => Err(PyValueError::new_err(format!(
            "unknown preset `{other}` (resnet50, desk)"
        ))),
    }
}

/// Parameter and MAC totals of a preset (`resnet50` or `desk`).
#[pyfunction]
#[pyo3(signature = (preset = "desk", config = None, input = None))]
fn cost_report<'py>(
    py: Python<'py>,
    preset: &str,
    config: Option<&PyConfig>,
    input: Option<(usize, usize)>,
) -> PyResult<Bound<'py, PyDict>> {
    let (det, hw) = resolve_model(preset, config)?;
    let r = cost::count_detector(&det, input.unwrap_or(hw)).map_err(to_py)?;
    report_dict(py, &r)
}

/// Rows `(label, params, macs)` of an ablation over `branches`, `sharing` or `fusion`.
#[pyfunction]
#[pyo3(signature = (axis, preset = "resnet50", config = None, input = None))]
fn ablation(
    axis: &str,
    preset: &str,
    config: Option<&PyConfig>,
    input: Option<(usize, usize)>,
) -> PyResult<Vec<(String, u64, u64)>> {
    let axis: AblationAxis = axis.parse().map_err(to_py)?;
    let (det, hw) = resolve_model(preset, config)?;
    let t = cost::ablation_table(&det, axis, input.unwrap_or(hw)).map_err(to_py)?;
    Ok(t.rows.into_iter().map(|r| (r.label, r.params, r.macs)).collect())
}

/// Render synthetic scene `index`: `(pixels, channels, height, width, boxes)`,
/// pixels as planar bytes.
#[pyfunction]
#[pyo3(signature = (index, config = None))]
fn render_scene(index: usize, config: Option<&PyConfig>) -> PyResult<(Vec<u8>, usize, usize, usize, Vec<BoxTuple>)> {
    let spec: SceneSpec = config.map(|c| c.inner.data.scene.clone()).unwrap_or_default();
    spec.validate().map_err(to_py)?;
    let s = render_sample(&spec, index);
    let boxes = s.boxes.iter().map(tuple).collect();
    Ok((s.pixels, s.channels, s.height, s.width, boxes))
}

/// A 64-bit detector built from a config and seed.
#[pyclass(name = "Detector", module = "rfp")]
struct PyDetector {
    inner: Detector<f64>,
}

#[pymethods]
impl PyDetector {
    #[new]
    #[pyo3(signature = (config = None, seed = None))]
    fn new(config: Option<&PyConfig>, seed: Option<u64>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
        let det = Detector::new(&cfg.detector().map_err(to_py)?, seed.unwrap_or(cfg.model.seed)).map_err(to_py)?;
        Ok(PyDetector { inner: det })
    }

    fn num_params(&self) -> usize {
        self.inner.store.scalar_count()
    }

    /// Scored boxes `(x, y, w, h, score)` for a planar float image.
    #[pyo3(signature = (pixels, channels, height, width, force_branch = None))]
    fn detect(
        &self,
        pixels: Vec<f64>,
        channels: usize,
        height: usize,
        width: usize,
        force_branch: Option<usize>,
    ) -> PyResult<Vec<(f64, f64, f64, f64, f64)>> {
        let t = Tensor::new(&[1, channels, height, width], pixels).map_err(to_py)?;
        let ov = force_branch.map_or(RfpOverride::None, RfpOverride::ForceBranch);
        let dets = self.inner.detect(&t, 0, ov).map_err(to_py)?;
        Ok(dets
            .iter()
            .map(|d| (d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.score))
            .collect())
    }

    /// Multiply-accumulates of one forward pass, counted by the conv kernels.
    fn measure_macs(&self, height: usize, width: usize) -> PyResult<u64> {
        self.inner.measure_macs(height, width, RfpOverride::None).map_err(to_py)
    }

    /// Switch to single-branch inference (1-based branch). Refused unless fusion is branch pooling.
    fn fold(&mut self, branch: usize) -> PyResult<()> {
        self.inner.fold(branch).map_err(to_py)
    }
}

/// Greedy per-image NMS over `(image_id, (x, y, w, h), score)` triples.
#[pyfunction]
fn nms(dets: Vec<(usize, BoxTuple, f64)>, iou_threshold: f64) -> Vec<(usize, BoxTuple, f64)> {
    let dets: Vec<Detection> = dets
        .into_iter()
        .map(|(image_id, b, score)| Detection {
            image_id,
            bbox: bbox(b),
            score,
        })
        .collect();
    detect::nms(&dets, iou_threshold)
        .iter()
        .map(|d| (d.image_id, tuple(&d.bbox), d.score))
        .collect()
}

/// Average precision of detections against ground truth `(image_id, (x, y, w, h))`.
#[pyfunction]
#[pyo3(signature = (dets, gts, iou_threshold = AP_IOU))]
fn average_precision(
    dets: Vec<(usize, BoxTuple, f64)>,
    gts: Vec<(usize, BoxTuple)>,
    iou_threshold: f64,
) -> PyResult<f64> {
    let dets: Vec<Detection> = dets
        .into_iter()
        .map(|(image_id, b, score)| Detection {
            image_id,
            bbox: bbox(b),
            score,
        })
        .collect();
    let gts: Vec<GroundTruthBox> = gts
        .into_iter()
        .map(|(image_id, b)| GroundTruthBox {
            image_id,
            bbox: bbox(b),
        })
        .collect();
    Ok(detect::evaluate_ap(&dets, &gts, iou_threshold).map_err(to_py)?.ap)
}

#[pyfunction]
fn iou(a: BoxTuple, b: BoxTuple) -> f64 {
    detect::iou(&bbox(a), &bbox(b))
}

/// Finite-difference checks: `(name, passed, max_rel_err)` per op plus the full detector.
#[pyfunction]
#[pyo3(signature = (seeds = 10))]
fn gradcheck(py: Python<'_>, seeds: u64) -> PyResult<Vec<(String, bool, f64)>> {
    py.detach(|| {
        let mut out: Vec<_> = check_ops(0..seeds, &GradCheckSettings::ops()).map_err(to_py)?;
        out.push(check_model(0..seeds, 4, (16, 16), 8, &GradCheckSettings::model()).map_err(to_py)?);
        Ok(out
            .into_iter()
            .map(|r| (r.name.clone(), r.passed(), r.max_rel_err))
            .collect())
    })
}

#[pymodule]
fn rfp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(cost_report, m)?)?;
    m.add_function(wrap_pyfunction!(ablation, m)?)?;
    m.add_function(wrap_pyfunction!(render_scene, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("RESNET50_INPUT", cost::RESNET50_INPUT)?;
    Ok(())
}
