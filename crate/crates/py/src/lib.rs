//! Python bindings for `irblock_core`.

use std::sync::Arc;

use irblock_core::eval::metrics;
use irblock_core::oracle::{self, BackendKind, StubSpec};
use irblock_core::patch::{self, BlockBounds, Range};
use irblock_core::{DeConfig, Detection, EotConfig, Genome, GenomeTemplate, OracleHandle, Quantization};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: irblock_core::Error) -> PyErr {
    match e {
        irblock_core::Error::InvalidArgument(_) | irblock_core::Error::UndefinedMetric(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

#[pyclass(frozen, eq, from_py_object)]
#[derive(Clone, PartialEq)]
struct Block(irblock_core::Block);

#[pymethods]
impl Block {
    #[new]
    fn new(anchor_u: f64, anchor_v: f64, pixel_value: f64, rel_length: f64, angle_deg: f64) -> Self {
        Self(irblock_core::Block::new(anchor_u, anchor_v, pixel_value, rel_length, angle_deg))
    }

    #[getter]
    fn anchor_u(&self) -> f64 {
        self.0.anchor_u
    }
    #[getter]
    fn anchor_v(&self) -> f64 {
        self.0.anchor_v
    }
    #[getter]
    fn pixel_value(&self) -> f64 {
        self.0.pixel_value
    }
    #[getter]
    fn rel_length(&self) -> f64 {
        self.0.rel_length
    }
    #[getter]
    fn angle_deg(&self) -> f64 {
        self.0.angle_deg
    }

    fn genes(&self) -> Vec<f64> {
        self.0.genes().to_vec()
    }

    fn __repr__(&self) -> String {
        let b = &self.0;
        format!("Block({}, {}, {}, {}, {})", b.anchor_u, b.anchor_v, b.pixel_value, b.rel_length, b.angle_deg)
    }
}

#[pyclass(frozen, eq, from_py_object)]
#[derive(Clone, PartialEq)]
struct MaskBox(irblock_core::MaskBox);

#[pymethods]
impl MaskBox {
    #[new]
    fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self(irblock_core::MaskBox::new(x, y, w, h))
    }

    #[getter]
    fn x(&self) -> u32 {
        self.0.x
    }
    #[getter]
    fn y(&self) -> u32 {
        self.0.y
    }
    #[getter]
    fn w(&self) -> u32 {
        self.0.w
    }
    #[getter]
    fn h(&self) -> u32 {
        self.0.h
    }

    fn area(&self) -> u64 {
        self.0.area()
    }

    /// `(x1, y1, x2, y2)`.
    fn corners(&self) -> (f64, f64, f64, f64) {
        let [a, b, c, d] = self.0.corners();
        (a, b, c, d)
    }

    fn __repr__(&self) -> String {
        let m = &self.0;
        format!("MaskBox({}, {}, {}, {})", m.x, m.y, m.w, m.h)
    }
}

/// Row-major grayscale image with intensities in `[0, 1]`.
#[pyclass(frozen, eq, from_py_object)]
#[derive(Clone, PartialEq)]
struct GrayImage(irblock_core::GrayImage);

#[pymethods]
impl GrayImage {
    #[new]
    fn new(width: u32, height: u32, data: Vec<f64>) -> PyResult<Self> {
        irblock_core::GrayImage::new(width, height, data).map(Self).map_err(err)
    }

    #[staticmethod]
    fn filled(width: u32, height: u32, value: f64) -> Self {
        Self(irblock_core::GrayImage::filled(width, height, value))
    }

    #[staticmethod]
    fn load_png(path: &str) -> PyResult<Self> {
        irblock_core::GrayImage::load_png(path).map(Self).map_err(err)
    }

    fn save_png(&self, path: &str) -> PyResult<()> {
        self.0.save_png(path).map_err(err)
    }

    #[getter]
    fn width(&self) -> u32 {
        self.0.width()
    }
    #[getter]
    fn height(&self) -> u32 {
        self.0.height()
    }

    fn get(&self, x: u32, y: u32) -> f64 {
        self.0.get(x, y)
    }

    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.0.to_bytes()
    }
}

fn genome_of(blocks: &[Block]) -> Genome {
    let k = blocks.len();
    Genome {
        blocks: blocks.iter().map(|b| b.0).collect(),
        bounds_lo: vec![0.0; k * patch::GENES_PER_BLOCK],
        bounds_hi: [1.0, 1.0, 1.0, 1.0, 180.0].repeat(k),
    }
}

#[pyfunction]
fn width_for(pixel_value: f64, length_px: f64) -> PyResult<f64> {
    patch::width_for(pixel_value, length_px).map_err(err)
}

/// Corners `[P, P + l·u, P + l·u + w·v, P + w·v]` as `(x, y)` pairs.
#[pyfunction]
fn block_to_rect(block: &Block, mask: &MaskBox) -> Vec<(f64, f64)> {
    patch::block_to_rect(&block.0, &mask.0).corners.iter().map(|c| (c[0], c[1])).collect()
}

/// `mode` is `none`, `grid01` or `physical`.
#[pyfunction]
fn quantize(pixel_value: f64, mode: &str) -> PyResult<f64> {
    let mode: Quantization = mode.parse().map_err(err)?;
    patch::quantize_pixel_value(pixel_value, mode).map_err(err)
}

#[pyfunction]
fn composite(image: &GrayImage, blocks: Vec<Block>, mask: &MaskBox) -> GrayImage {
    GrayImage(irblock_core::raster::composite(&image.0, &genome_of(&blocks), &mask.0))
}

#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    oracle::iou(a, b)
}

type PyDetection = (f64, f64, f64, f64, f64);

fn detections(per_image: Vec<Vec<PyDetection>>) -> Vec<Vec<Detection>> {
    per_image
        .into_iter()
        .map(|d| d.into_iter().map(|(x1, y1, x2, y2, c)| Detection::person([x1, y1, x2, y2], c)).collect())
        .collect()
}

fn boxes(per_image: Vec<Vec<MaskBox>>) -> Vec<Vec<irblock_core::MaskBox>> {
    per_image.into_iter().map(|v| v.into_iter().map(|m| m.0).collect()).collect()
}

/// Detections are `(x1, y1, x2, y2, confidence)` person boxes, one list per image.
#[pyfunction]
#[pyo3(signature = (baseline, attacked, iou_threshold=0.5, conf_threshold=0.5))]
fn asr(baseline: Vec<Vec<MaskBox>>, attacked: Vec<Vec<PyDetection>>, iou_threshold: f64, conf_threshold: f64) -> PyResult<f64> {
    metrics::asr(&boxes(baseline), &detections(attacked), iou_threshold, conf_threshold).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (detections_per_image, ground_truth, iou_threshold=0.5))]
fn average_precision(detections_per_image: Vec<Vec<PyDetection>>, ground_truth: Vec<Vec<MaskBox>>, iou_threshold: f64) -> PyResult<f64> {
    metrics::average_precision(&detections(detections_per_image), &boxes(ground_truth), iou_threshold).map_err(err)
}

#[pyclass(frozen, get_all)]
struct AttackResult {
    best_fitness: Vec<f64>,
    blocks: Vec<Block>,
    queries: u64,
    generations: usize,
    terminated_early: bool,
    adversarial: GrayImage,
    trace_json: String,
}

/// Attacks one person box against the coverage stub. With `identity_eot` the
/// fitness is the plain stub confidence.
#[pyfunction]
#[pyo3(signature = (image, mask, k=7, length=0.12, pop_size=100, steps=10, seed=0, lam=2.0,
    quantization="physical", identity_eot=false, eot_samples=None))]
#[allow(clippy::too_many_arguments)]
fn run_attack(
    py: Python<'_>,
    image: &GrayImage,
    mask: &MaskBox,
    k: usize,
    length: f64,
    pop_size: usize,
    steps: usize,
    seed: u64,
    lam: f64,
    quantization: &str,
    identity_eot: bool,
    eot_samples: Option<usize>,
) -> PyResult<AttackResult> {
    let quantization: Quantization = quantization.parse().map_err(err)?;
    let bounds = BlockBounds { rel_length: Range::fixed(length), ..BlockBounds::default() };
    let template = GenomeTemplate::new(k, bounds, quantization).map_err(err)?;
    let de = DeConfig { pop_size, steps, seed, ..DeConfig::default() };
    let mut eot = if identity_eot { EotConfig::identity() } else { EotConfig::default() };
    eot.seed = seed;
    if let Some(n) = eot_samples {
        eot.n_samples = n;
    }
    let stub = StubSpec { lambda: lam, ..StubSpec::default() };
    let detector = stub.build(Some(image.0.clone()), vec![mask.0]).map_err(err)?;
    let handle = OracleHandle::new(BackendKind::BuiltinStub, Arc::clone(&detector));
    let trace = py
        .detach(|| irblock_core::run_attack(&image.0, &mask.0, &handle, &de, &eot, &template))
        .map_err(|f| err(f.error))?;
    let genome = trace.best_genome.clone().into_genome().map_err(err)?;
    let adversarial = irblock_core::raster::composite(&image.0, &genome, &mask.0).quantized_8bit();
    Ok(AttackResult {
        best_fitness: trace.best_fitness.clone(),
        blocks: genome.blocks.iter().map(|b| Block(*b)).collect(),
        queries: trace.queries,
        generations: trace.generations,
        terminated_early: trace.terminated_early,
        adversarial: GrayImage(adversarial),
        trace_json: trace.to_json().map_err(err)?,
    })
}

#[pymodule]
fn irblock(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Block>()?;
    m.add_class::<MaskBox>()?;
    m.add_class::<GrayImage>()?;
    m.add_class::<AttackResult>()?;
    m.add_function(wrap_pyfunction!(width_for, m)?)?;
    m.add_function(wrap_pyfunction!(block_to_rect, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(composite, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(asr, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(run_attack, m)?)?;
    Ok(())
}
