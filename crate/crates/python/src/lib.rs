//! Python bindings: models, the cascade, metrics, toy data and the CLI.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use titkit::checkpoint::{load_checkpoint, save_checkpoint};
use titkit::corpus::build_vocab;
use titkit::eval::count_parameters;
use titkit::model::{Mode, ModelConfig};
use titkit::raster::{bilinear_resize, Image};
use titkit::synthesis::{make_toy_parallel, RenderConfig, ToyPairSpec};
use titkit::trainer::{TaskLosses, TaskWeights};

fn err(e: titkit::Error) -> PyErr {
    match e {
        titkit::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn load_image(path: PathBuf, config: &ModelConfig, resize: bool) -> PyResult<Image> {
    let img = Image::load_png(&path).map_err(err)?;
    let (h, w) = (config.image.image_height, config.image.image_width);
    if (img.height, img.width) == (h, w) {
        Ok(img)
    } else if resize {
        Ok(bilinear_resize(&img, h, w))
    } else {
        Err(PyValueError::new_err(format!(
            "image is {}x{} but the model expects {h}x{w}; pass resize=True",
            img.height, img.width
        )))
    }
}

/// A model bundle: any mode, freshly built or loaded from a checkpoint.
#[pyclass(name = "Model", module = "titkit", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: titkit::model::Model,
}

#[pymethods]
impl PyModel {
    /// `preset` is one of desk, tiny or paper. Vocabularies are given as the
    /// characters they contain.
    #[new]
    #[pyo3(signature = (mode, source_chars=None, target_chars=None, preset="desk", seed=0))]
    fn new(
        mode: &str,
        source_chars: Option<&str>,
        target_chars: Option<&str>,
        preset: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let mode: Mode = mode.parse().map_err(err)?;
        let config = match preset {
            "desk" => ModelConfig::desk(),
            "tiny" => ModelConfig::tiny(),
            "paper" => ModelConfig::paper(320),
            _ => return Err(PyValueError::new_err(format!("unknown preset {preset:?}"))),
        };
        let vocab = |chars: Option<&str>| chars.map(|c| build_vocab(&[c])).transpose().map_err(err);
        let inner = titkit::model::Model::new(config, mode, vocab(source_chars)?, vocab(target_chars)?, seed)
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let path = if path.is_dir() { path.join(titkit::trainer::CHECKPOINT_FILE) } else { path };
        Ok(Self {
            inner: load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    /// `(height, width)` of the images the model accepts.
    #[getter]
    fn image_size(&self) -> (usize, usize) {
        (self.inner.config.image.image_height, self.inner.config.image.image_width)
    }

    /// Parameter count per component.
    fn parameter_counts(&self) -> BTreeMap<String, usize> {
        count_parameters(&self.inner).rows.into_iter().collect()
    }

    #[pyo3(signature = (path, resize=false, beam=1))]
    fn translate_png(&self, path: PathBuf, resize: bool, beam: usize) -> PyResult<String> {
        let img = load_image(path, &self.inner.config, resize)?;
        Ok(self.inner.translate_images(&[&img], beam).map_err(err)?.remove(0))
    }

    #[pyo3(signature = (path, resize=false, beam=1))]
    fn recognize_png(&self, path: PathBuf, resize: bool, beam: usize) -> PyResult<String> {
        let img = load_image(path, &self.inner.config, resize)?;
        Ok(self.inner.recognize_images(&[&img], beam).map_err(err)?.remove(0))
    }

    #[pyo3(signature = (texts, beam=1))]
    fn translate_texts(&self, texts: Vec<String>, beam: usize) -> PyResult<Vec<String>> {
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        self.inner.translate_texts(&refs, beam).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Model(mode={:?}, parameters={})", self.mode(), count_parameters(&self.inner).total())
    }
}

/// An OCR model followed by a separate MT model.
#[pyclass(name = "Cascade", module = "titkit")]
struct PyCascade {
    inner: titkit::cascade::Cascade,
}

#[pymethods]
impl PyCascade {
    #[new]
    fn new(ocr: &PyModel, mt: &PyModel) -> PyResult<Self> {
        Ok(Self {
            inner: titkit::cascade::Cascade::new(ocr.inner.clone(), mt.inner.clone()).map_err(err)?,
        })
    }

    /// `(recognized source, translation)`.
    #[pyo3(signature = (path, resize=false))]
    fn translate_png(&self, path: PathBuf, resize: bool) -> PyResult<(String, String)> {
        let img = load_image(path, &self.inner.ocr.config, resize)?;
        let out = self.inner.translate(&[&img]).map_err(err)?.remove(0);
        Ok((out.recognized, out.translation))
    }
}

#[pyfunction]
#[pyo3(signature = (hypotheses, references, smooth=false))]
fn corpus_bleu(hypotheses: Vec<String>, references: Vec<String>, smooth: bool) -> PyResult<f64> {
    titkit::eval::corpus_bleu(&hypotheses, &references, smooth).map_err(err)
}

#[pyfunction]
fn cer(hypothesis: &str, reference: &str) -> PyResult<f64> {
    titkit::eval::cer(hypothesis, reference).map_err(err)
}

#[pyfunction]
fn edit_distance(a: &str, b: &str) -> usize {
    titkit::eval::edit_distance(a, b)
}

/// Weighted sum of the per-task losses that are given.
#[pyfunction]
#[pyo3(signature = (tit=None, mt=None, ocr=None, lambda_tit=1.0, lambda_mt=0.6, lambda_ocr=0.4))]
fn combined_loss(
    tit: Option<f64>,
    mt: Option<f64>,
    ocr: Option<f64>,
    lambda_tit: f64,
    lambda_mt: f64,
    lambda_ocr: f64,
) -> PyResult<f64> {
    let weights = TaskWeights {
        lambda_tit,
        lambda_mt,
        lambda_ocr,
    };
    titkit::trainer::combined_loss(&TaskLosses { tit, mt, ocr }, &weights).map_err(err)
}

/// `n` (source, target) pairs of the toy cipher language.
#[pyfunction]
#[pyo3(signature = (n, seed=0))]
fn toy_pairs(n: usize, seed: u64) -> PyResult<Vec<(String, String)>> {
    make_toy_parallel(&ToyPairSpec::default(), n, seed).map_err(err)
}

#[pyfunction]
fn toy_translate(source: &str) -> String {
    ToyPairSpec::default().translate(source)
}

/// Renders `text` with the default (or clean) settings and writes a PNG.
#[pyfunction]
#[pyo3(signature = (text, path, seed=0, clean=false))]
fn render_png(text: &str, path: PathBuf, seed: u64, clean: bool) -> PyResult<()> {
    let cfg = if clean { RenderConfig::clean() } else { RenderConfig::default() };
    cfg.render(text, &cfg.sample_spec(seed))
        .and_then(|img| img.save_png(&path))
        .map_err(err)
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    let argv = std::iter::once("titkit".to_string()).chain(args).collect();
    titkit::cli::main(argv)
}

#[pymodule]
#[pyo3(name = "titkit")]
fn titkit_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyCascade>()?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(cer, m)?)?;
    m.add_function(wrap_pyfunction!(edit_distance, m)?)?;
    m.add_function(wrap_pyfunction!(combined_loss, m)?)?;
    m.add_function(wrap_pyfunction!(toy_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(toy_translate, m)?)?;
    m.add_function(wrap_pyfunction!(render_png, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
