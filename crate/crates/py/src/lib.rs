//! Python bindings: images, visual prompts, the frozen encoder, the min-max
//! loss and mining, and the benchmark protocols.

use logoprompt_core::bench::{self, DatasetSpec, Method, MethodConfig, SplitPlan, SplitRule};
use logoprompt_core::dualenc::{self, DualEncoder, PretrainConfig, PretrainCorpus};
use logoprompt_core::error::Error;
use logoprompt_core::glyph::{self, Placement};
use logoprompt_core::image::Image;
use logoprompt_core::rng::{derive, tag};
use logoprompt_core::selection::{self, PairGroup};
use logoprompt_core::synth;
use pyo3::exceptions::{PyIndexError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use std::path::PathBuf;

fn to_py(err: Error) -> PyErr {
    let msg = err.to_string();
    match err {
        Error::Config { .. } => PyValueError::new_err(msg),
        Error::Index { .. } => PyIndexError::new_err(msg),
        Error::Io { .. } => PyOSError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

#[pyclass(name = "Image", module = "logoprompt", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyImage {
    inner: Image,
}

#[pymethods]
impl PyImage {
    /// Row-major RGB values in [0, 1], `height * width * 3` of them.
    #[new]
    fn new(height: usize, width: usize, pixels: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: Image::new(height, width, pixels).map_err(to_py)?,
        })
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn pixels(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn pixel(&self, row: usize, col: usize) -> PyResult<(f64, f64, f64)> {
        if row >= self.inner.height() || col >= self.inner.width() {
            return Err(PyIndexError::new_err(format!("pixel ({row}, {col}) out of range")));
        }
        let [r, g, b] = self.inner.pixel(row, col);
        Ok((r, g, b))
    }

    fn to_png<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &glyph::encode_png(&self.inner).map_err(to_py)?))
    }

    fn to_ppm<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &glyph::encode_ppm(&self.inner))
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.height(), self.inner.width())
    }
}

#[pyclass(name = "VisualPrompt", module = "logoprompt", frozen)]
pub struct PyVisualPrompt {
    inner: glyph::VisualPrompt,
}

#[pymethods]
impl PyVisualPrompt {
    #[getter]
    fn image(&self) -> PyImage {
        PyImage {
            inner: self.inner.pixels.clone(),
        }
    }

    #[getter]
    fn fg_color(&self) -> (f64, f64, f64) {
        let [r, g, b] = self.inner.fg_color;
        (r, g, b)
    }

    #[getter]
    fn bg_color(&self) -> (f64, f64, f64) {
        let [r, g, b] = self.inner.bg_color;
        (r, g, b)
    }

    /// The characters actually drawn.
    #[getter]
    fn shown(&self) -> String {
        self.inner.shown.clone()
    }

    fn __repr__(&self) -> String {
        format!("VisualPrompt({:?}, {}x{})", self.inner.shown, self.inner.height(), self.inner.width())
    }
}

#[pyfunction]
#[pyo3(signature = (class_name, height, width, seed=0))]
fn render_prompt(class_name: &str, height: usize, width: usize, seed: u64) -> PyResult<PyVisualPrompt> {
    Ok(PyVisualPrompt {
        inner: glyph::render_prompt(class_name, height, width, seed).map_err(to_py)?,
    })
}

/// Pastes `prompt` onto `image`; returns the new image and the block origin.
#[pyfunction]
#[pyo3(signature = (image, prompt, placement="rand", seed=0))]
fn apply_prompt(image: &PyImage, prompt: &PyVisualPrompt, placement: &str, seed: u64) -> PyResult<(PyImage, (usize, usize))> {
    let cond = glyph::apply_prompt(&image.inner, &prompt.inner, parse::<Placement>(placement)?, seed).map_err(to_py)?;
    Ok((PyImage { inner: cond.pixels }, cond.block_origin))
}

#[pyfunction]
#[pyo3(signature = (image_size=56, ratio=glyph::DEFAULT_PROMPT_RATIO))]
fn prompt_size(image_size: usize, ratio: f64) -> usize {
    glyph::prompt_size(image_size, ratio)
}

#[pyfunction]
fn class_names() -> Vec<String> {
    synth::CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

/// A procedural scene of class `class_id`.
#[pyfunction]
#[pyo3(signature = (class_id, size=56, seed=0))]
fn render_scene(class_id: usize, size: usize, seed: u64) -> PyResult<PyImage> {
    if class_id >= synth::CLASS_NAMES.len() {
        return Err(PyIndexError::new_err(format!("class {class_id} out of range")));
    }
    Ok(PyImage {
        inner: synth::render_scene(class_id, size, seed),
    })
}

#[pyfunction]
fn harmonic_mean(base: f64, new: f64) -> f64 {
    bench::harmonic_mean(base, new)
}

/// −log(min(real) / Σ max(negative)) for `(p(c|x), p(c|x_c))` pairs.
#[pyfunction]
fn minmax_loss(real: (f64, f64), negatives: Vec<(f64, f64)>) -> PyResult<f64> {
    let groups: Vec<PairGroup> = std::iter::once(PairGroup::real(0, real.0, real.1))
        .chain(negatives.iter().enumerate().map(|(i, &(a, b))| PairGroup::negative(i + 1, a, b)))
        .collect();
    selection::minmax_loss(&groups).map_err(to_py)
}

/// The `k` most probable classes other than `exclude`, with their probabilities.
#[pyfunction]
#[pyo3(signature = (probs, k, exclude=None))]
fn mine_hard_negatives(probs: Vec<f64>, k: usize, exclude: Option<usize>) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let m = selection::mine_hard_negatives(&probs, exclude, k).map_err(to_py)?;
    Ok((m.classes, m.probs))
}

#[pyclass(name = "DualEncoder", module = "logoprompt", frozen)]
pub struct PyDualEncoder {
    inner: DualEncoder,
}

#[pymethods]
impl PyDualEncoder {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: DualEncoder::load(&path).map_err(to_py)?,
        })
    }

    /// Pretrains on the synthetic corpus. Small `steps` and `per_class`
    /// give a quick, weak encoder.
    #[staticmethod]
    #[pyo3(signature = (steps=6000, per_class=4000, seed=0))]
    fn pretrain(steps: usize, per_class: usize, seed: u64) -> PyResult<Self> {
        let cfg = PretrainConfig {
            steps,
            per_class,
            seed,
            ..Default::default()
        };
        let corpus = PretrainCorpus::synthetic(&class_names(), cfg.image.image_size, cfg.per_class, derive(seed, &[tag("corpus")]))
            .map_err(to_py)?;
        let (inner, _) = dualenc::pretrain_surrogate(&corpus, &cfg).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn checksum(&self) -> String {
        self.inner.checksum()
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.image_size()
    }

    #[getter]
    fn temperature(&self) -> f64 {
        self.inner.temperature.value()
    }

    fn encode_image(&self, image: &PyImage) -> PyResult<Vec<f64>> {
        self.inner.encode_image(&image.inner).map_err(to_py)
    }

    fn encode_text(&self, texts: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        self.inner.encode_strings(&texts).map_err(to_py)
    }

    /// p(class | image) under the hand-crafted prompt for each class.
    fn class_probs(&self, image: &PyImage, class_names: Vec<String>) -> PyResult<Vec<f64>> {
        let text = self.inner.handcraft_embeddings(&class_names).map_err(to_py)?;
        let rows: Vec<Vec<f64>> = (0..text.rows()).map(|i| text.row(i).to_vec()).collect();
        let emb = self.inner.encode_image(&image.inner).map_err(to_py)?;
        dualenc::probs_from_embeddings(&emb, &rows, self.inner.temperature).map_err(to_py)
    }

    fn zero_shot_predict(&self, images: Vec<PyRef<'_, PyImage>>, class_names: Vec<String>) -> PyResult<Vec<usize>> {
        let refs: Vec<&Image> = images.iter().map(|i| &i.inner).collect();
        self.inner.zero_shot_predict(&refs, &class_names).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("DualEncoder(checksum={}…)", &self.inner.checksum()[..12])
    }
}

/// Runs one protocol and returns the metrics report as JSON.
#[pyfunction]
#[pyo3(signature = (
    encoder,
    method="logoprompt",
    protocol="few_shot",
    shots=16,
    seeds=vec![0, 1, 2, 3, 4],
    steps=200,
    corruption=None,
    num_classes=16,
    train_per_class=32,
    test_per_class=200,
    dataset_seed=0,
))]
#[allow(clippy::too_many_arguments)]
fn run_protocol(
    encoder: &PyDualEncoder,
    method: &str,
    protocol: &str,
    shots: usize,
    seeds: Vec<u64>,
    steps: usize,
    corruption: Option<&str>,
    num_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    dataset_seed: u64,
) -> PyResult<String> {
    let plan = match protocol {
        "few_shot" => SplitPlan::FewShot { shots },
        "base_to_new" => SplitPlan::BaseToNew {
            shots,
            rule: SplitRule::EvenOdd,
        },
        "domain_shift" => SplitPlan::DomainShift {
            shots,
            corruption: parse(corruption.ok_or_else(|| PyValueError::new_err("domain_shift needs a corruption"))?)?,
        },
        other => return Err(PyValueError::new_err(format!("unknown protocol `{other}`"))),
    };
    let mut cfg = MethodConfig::for_method(parse::<Method>(method)?);
    cfg.budget.steps = steps;
    let spec = DatasetSpec {
        num_classes,
        train_per_class,
        test_per_class,
        ..Default::default()
    };
    let ds = bench::generate_dataset(&spec, dataset_seed).map_err(to_py)?;
    let report = bench::run_protocol(Some(&encoder.inner), &ds, &plan, &cfg, &seeds).map_err(to_py)?;
    report.to_json().map_err(to_py)
}

#[pymodule]
fn logoprompt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyVisualPrompt>()?;
    m.add_class::<PyDualEncoder>()?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(apply_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(prompt_size, m)?)?;
    m.add_function(wrap_pyfunction!(class_names, m)?)?;
    m.add_function(wrap_pyfunction!(render_scene, m)?)?;
    m.add_function(wrap_pyfunction!(harmonic_mean, m)?)?;
    m.add_function(wrap_pyfunction!(minmax_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mine_hard_negatives, m)?)?;
    m.add_function(wrap_pyfunction!(run_protocol, m)?)?;
    m.add("DEFAULT_K", selection::DEFAULT_K)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
