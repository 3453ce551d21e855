//! Python bindings: build a model, run detection on PPM images, and score
//! detection dumps. Tensors cross the boundary as `(shape, flat_data)`.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use y11_core::commands;
use y11_core::detect::{self, Detection};
use y11_core::io::{read_ppm, read_weights, write_weights};
use y11_core::metrics::{self, BBox};
use y11_core::pipeline::Detector;
use y11_core::{Error, ModelConfig, ModelGraph, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

type Box4 = (f32, f32, f32, f32);
type PyDetection = (usize, f32, Box4);

fn to_py(d: &Detection) -> PyDetection {
    let [a, b, c, e] = d.bbox;
    (d.class_id, d.score, (a, b, c, e))
}

fn from_py(&(class_id, score, (a, b, c, e)): &PyDetection) -> Detection {
    Detection { class_id, score, bbox: [a, b, c, e] }
}

/// A detector network with its parameters.
#[pyclass(module = "y11")]
struct Model {
    graph: ModelGraph,
}

#[pymethods]
impl Model {
    /// Builds a variant with seeded random parameters.
    #[new]
    #[pyo3(signature = (variant = "n", num_classes = 80, seed = 0))]
    fn new(variant: &str, num_classes: usize, seed: u64) -> PyResult<Self> {
        let graph = ModelGraph::build(variant, num_classes).map_err(py_err)?.init_random(seed);
        Ok(Model { graph })
    }

    /// Builds from `key = value` config text with seeded random parameters.
    #[staticmethod]
    #[pyo3(signature = (text, seed = 0))]
    fn from_config(text: &str, seed: u64) -> PyResult<Self> {
        let config = ModelConfig::parse(text).map_err(py_err)?;
        let graph = ModelGraph::from_config(config).map_err(py_err)?.init_random(seed);
        Ok(Model { graph })
    }

    fn load_weights(&mut self, path: PathBuf) -> PyResult<()> {
        let bytes = commands::read_file(&path).map_err(py_err)?;
        let entries = read_weights(&bytes).map_err(py_err)?;
        self.graph.load_weights(&entries).map_err(py_err)
    }

    fn save_weights(&self, path: PathBuf) -> PyResult<()> {
        let bytes = write_weights(&self.graph.export_weights()).map_err(py_err)?;
        std::fs::write(path, bytes).map_err(|e| py_err(e.into()))
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.graph.num_classes()
    }

    fn count_params(&self) -> usize {
        self.graph.count_params()
    }

    #[pyo3(signature = (input_size = 640))]
    fn gflops(&self, input_size: usize) -> PyResult<f64> {
        self.graph.count_flops(input_size).map_err(py_err)
    }

    /// Raw head outputs for an `N×3×H×W` input, one `(shape, data)` per stride.
    fn forward(&self, shape: [usize; 4], data: Vec<f32>) -> PyResult<Vec<([usize; 4], Vec<f32>)>> {
        let x = Tensor::new(shape, data).map_err(py_err)?;
        let outs = self.graph.forward(&x).map_err(py_err)?;
        Ok(outs.into_iter().map(|t| (t.dims(), t.into_data())).collect())
    }

    /// Detections `(class_id, score, (x1, y1, x2, y2))` for a PPM file.
    #[pyo3(signature = (image, input_size = 640, conf = 0.25, iou = 0.45))]
    fn detect(&self, image: PathBuf, input_size: usize, conf: f32, iou: f32) -> PyResult<Vec<PyDetection>> {
        let img = read_ppm(&commands::read_file(&image).map_err(py_err)?).map_err(py_err)?;
        let detector = Detector::new(self.graph.clone(), input_size, conf, iou).map_err(py_err)?;
        let (dets, _) = detector.detect(&img).map_err(py_err)?;
        Ok(dets.iter().map(to_py).collect())
    }
}

/// IoU of two `(x1, y1, x2, y2)` boxes.
#[pyfunction]
fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    metrics::iou(&BBox::new(a.0, a.1, a.2, a.3), &BBox::new(b.0, b.1, b.2, b.3))
}

/// Class-wise greedy NMS over `(class_id, score, box)` tuples.
#[pyfunction]
fn nms(detections: Vec<PyDetection>, iou_threshold: f32) -> Vec<PyDetection> {
    let dets: Vec<Detection> = detections.iter().map(from_py).collect();
    detect::nms(&dets, iou_threshold).iter().map(to_py).collect()
}

/// Scores a detection dump against an annotation file.
#[pyfunction]
#[pyo3(signature = (dets, anns, iou_sweep = "0.5:0.95:0.05", conf = 0.25))]
fn evaluate<'py>(py: Python<'py>, dets: PathBuf, anns: PathBuf, iou_sweep: &str, conf: f64) -> PyResult<Bound<'py, PyDict>> {
    let thresholds = commands::parse_iou_sweep(iou_sweep).map_err(py_err)?;
    let r = commands::eval(&dets, &anns, &thresholds, conf).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("map", r.map)?;
    d.set_item("map50", r.map50)?;
    d.set_item("precision", r.precision)?;
    d.set_item("recall", r.recall)?;
    d.set_item("f1", r.f1)?;
    d.set_item("thresholds", r.thresholds.clone())?;
    let per_class = PyDict::new(py);
    for c in &r.classes {
        per_class.set_item(c.category_id, c.ap.clone())?;
    }
    d.set_item("per_class_ap", per_class)?;
    Ok(d)
}

#[pymodule]
fn y11(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
