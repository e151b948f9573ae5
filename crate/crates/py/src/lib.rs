//! Python bindings for the synthpaste core.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use synthpaste::context_mining::{augment_context, extract_context_edited, Caption, NounLexicon, ObjectVocabulary};
use synthpaste::dataset::Rle;
use synthpaste::foreground::{extract_mask as core_extract_mask, ExtractionParams};
use synthpaste::gateway::{Client, GenerationRequest, MockBackend, PngBytes};
use synthpaste::mask::mask_to_bbox;
use synthpaste::pipeline::{self as core_pipeline, PipelineConfig, Recipe, Stage};
use synthpaste::prompting::{apply_edit_rules, label_set, EditRule, TemplateSet};
use synthpaste::selection::{rank_and_select, CandidateId, ScoredImage, SelectionPolicy};
use synthpaste::{BinaryMask, Error};

create_exception!(pysynthpaste, SynthPasteError, PyException);
create_exception!(pysynthpaste, ConfigError, SynthPasteError);
create_exception!(pysynthpaste, GatewayError, SynthPasteError);
create_exception!(pysynthpaste, PipelineError, SynthPasteError);

fn to_py(e: Error) -> PyErr {
    let message = e.to_string();
    match e.exit_code() {
        2 => ConfigError::new_err(message),
        3 => GatewayError::new_err(message),
        _ => PipelineError::new_err(message),
    }
}

/// Convert any serializable value to plain Python objects.
fn json_to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PipelineError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn recipe_name(recipe: Recipe) -> &'static str {
    match recipe {
        Recipe::PureSyn => "pure_syn",
        Recipe::SynFg => "syn_fg",
        Recipe::SynPlusReal => "syn_plus_real",
    }
}

/// Pipeline configuration. Every field is reachable through TOML.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new(labels: Vec<String>) -> Self {
        PyConfig { inner: PipelineConfig::new(&labels) }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: PipelineConfig::from_toml(text).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig { inner: PipelineConfig::load(&path).map_err(to_py)? })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels.clone()
    }

    #[getter]
    fn recipe(&self) -> &'static str {
        recipe_name(self.inner.recipe)
    }

    #[getter]
    fn master_seed(&self) -> u64 {
        self.inner.master_seed
    }

    #[setter]
    fn set_master_seed(&mut self, seed: u64) {
        self.inner.master_seed = seed;
    }

    #[getter]
    fn target_size(&self) -> usize {
        self.inner.counts.target_size
    }

    #[setter]
    fn set_target_size(&mut self, n: usize) {
        self.inner.counts.target_size = n;
    }

    #[getter]
    fn workers(&self) -> Option<usize> {
        self.inner.workers
    }

    #[setter]
    fn set_workers(&mut self, n: Option<usize>) {
        self.inner.workers = n;
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(labels={:?}, recipe={:?}, master_seed={})",
            self.inner.labels,
            recipe_name(self.inner.recipe),
            self.inner.master_seed
        )
    }
}

/// Staged, checkpointed pipeline rooted at a workspace directory.
#[pyclass(name = "Pipeline")]
struct PyPipeline {
    inner: core_pipeline::Pipeline,
}

#[pymethods]
impl PyPipeline {
    #[new]
    fn new(config: PyConfig, root: PathBuf) -> PyResult<Self> {
        Ok(PyPipeline { inner: core_pipeline::Pipeline::new(config.inner, root).map_err(to_py)? })
    }

    /// Stage names of the configured recipe, in order.
    fn stages(&self) -> Vec<&'static str> {
        self.inner.stages().into_iter().map(Stage::name).collect()
    }

    /// Run every stage; returns the stage reports and the dataset location.
    fn run(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let report = py.detach(|| self.inner.run()).map_err(to_py)?;
        let summary = serde_json::json!({
            "stages": report.stages,
            "dataset_dir": report.dataset_dir,
            "images": report.manifest.images.len(),
            "annotations": report.manifest.annotation_count,
        });
        json_to_py(py, &summary)
    }

    fn run_stage(&self, py: Python<'_>, stage: &str) -> PyResult<Py<PyAny>> {
        let stage: Stage = stage.parse().map_err(to_py)?;
        let report = py.detach(|| self.inner.run_stage(stage)).map_err(to_py)?;
        json_to_py(py, &report)
    }

    fn count_plan(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        json_to_py(py, &self.inner.count_plan().map_err(to_py)?)
    }

    #[getter]
    fn dataset_dir(&self) -> PathBuf {
        self.inner.dataset_dir()
    }
}

/// Referential-integrity and consistency check of a dataset directory.
#[pyfunction]
fn validate_dataset(py: Python<'_>, dir: PathBuf) -> PyResult<Py<PyAny>> {
    json_to_py(py, &core_pipeline::validate_dataset(&dir).map_err(to_py)?)
}

#[pyfunction]
fn dataset_stats(py: Python<'_>, dir: PathBuf) -> PyResult<Py<PyAny>> {
    json_to_py(py, &core_pipeline::stats_for(&dir).map_err(to_py)?)
}

/// The six foreground prompts of a label.
#[pyfunction]
fn foreground_prompts(label: &str) -> PyResult<Vec<String>> {
    let labels = label_set(&[label]).map_err(to_py)?;
    let templates = TemplateSet::bundled();
    (0..templates.foreground().len())
        .map(|t| templates.verbalize_foreground(&labels[0], t).map_err(to_py))
        .collect()
}

#[pyfunction]
fn background_prompts() -> PyResult<Vec<String>> {
    let templates = TemplateSet::bundled();
    (0..templates.background().len()).map(|t| templates.verbalize_background(t).map_err(to_py)).collect()
}

fn edit_rules(rules: Vec<(String, String)>) -> PyResult<Vec<EditRule>> {
    rules
        .into_iter()
        .map(|(kind, text)| match kind.as_str() {
            "remove" => EditRule::remove(&text),
            "append" => EditRule::append(&text),
            other => match other.strip_prefix("substitute:") {
                Some(target) => EditRule::substitute(target, &text),
                None => Err(Error::InvalidEditRule(format!("unknown rule kind {other:?}"))),
            },
        })
        .map(|r| r.map_err(to_py))
        .collect()
}

/// Apply caption edit rules. A rule is `("remove", target)`,
/// `("append", text)` or `("substitute:<target>", replacement)`.
#[pyfunction]
#[pyo3(name = "apply_edit_rules", signature = (caption, rules))]
fn py_apply_edit_rules(caption: &str, rules: Vec<(String, String)>) -> PyResult<String> {
    Ok(apply_edit_rules(caption, &edit_rules(rules)?))
}

/// Background prompts mined from one caption, free of the interest classes.
#[pyfunction]
#[pyo3(signature = (caption, labels, rules = Vec::new(), per_phrase = 1))]
fn context_prompts(caption: &str, labels: Vec<String>, rules: Vec<(String, String)>, per_phrase: usize) -> PyResult<Vec<String>> {
    let labels = label_set(&labels).map_err(to_py)?;
    let vocabulary = ObjectVocabulary::new(&labels, &NounLexicon::bundled());
    let caption = Caption::new(caption, "python", 0).map_err(to_py)?;
    let phrases = extract_context_edited(&caption, &vocabulary, &edit_rules(rules)?);
    Ok(augment_context(&phrases, per_phrase))
}

/// Indices of the kept candidates, best first. Each candidate is
/// `(faithfulness, {class: similarity}, own_class or None)`.
#[pyfunction]
#[pyo3(signature = (candidates, keep_k = None, keep_fraction = None, weight = 1.0))]
fn select(
    candidates: Vec<(f64, BTreeMap<String, f64>, Option<String>)>,
    keep_k: Option<usize>,
    keep_fraction: Option<f64>,
    weight: f64,
) -> PyResult<Vec<u32>> {
    let policy = match (keep_k, keep_fraction) {
        (Some(k), None) => SelectionPolicy::keep_k(k),
        (None, Some(f)) => SelectionPolicy::keep_fraction(f),
        _ => return Err(ConfigError::new_err("set exactly one of keep_k and keep_fraction")),
    }
    .with_weight(weight);
    let batch = candidates
        .into_iter()
        .enumerate()
        .map(|(i, (faithfulness, class_similarities, own_class))| ScoredImage {
            id: CandidateId { seed: 0, index: i as u32 },
            image: PngBytes(Vec::new()),
            prompt: String::new(),
            own_class,
            faithfulness,
            class_similarities,
        })
        .collect();
    Ok(rank_and_select(batch, &policy).map_err(to_py)?.into_iter().map(|c| c.id.index).collect())
}

fn mask_bytes<'py>(py: Python<'py>, mask: &BinaryMask) -> Bound<'py, PyBytes> {
    let bits: Vec<u8> = mask.to_bools().into_iter().map(u8::from).collect();
    PyBytes::new(py, &bits)
}

fn mask_from(width: u32, height: u32, bits: &[u8]) -> PyResult<BinaryMask> {
    if bits.len() != (width as usize) * (height as usize) {
        return Err(ConfigError::new_err("mask length does not match width * height"));
    }
    let bools: Vec<bool> = bits.iter().map(|&b| b != 0).collect();
    Ok(BinaryMask::from_bools(width, height, &bools))
}

/// Foreground mask of a PNG with a near-uniform background, as
/// `(width, height, row-major 0/1 bytes)`.
#[pyfunction]
fn extract_mask<'py>(py: Python<'py>, png: &[u8]) -> PyResult<(u32, u32, Bound<'py, PyBytes>)> {
    let image = PngBytes(png.to_vec()).decode().map_err(to_py)?.image;
    let mask = core_extract_mask(&image, &ExtractionParams::default()).map_err(to_py)?;
    Ok((mask.width(), mask.height(), mask_bytes(py, &mask)))
}

/// COCO `[x, y, w, h]` box of a row-major 0/1 mask.
#[pyfunction]
fn mask_bbox(width: u32, height: u32, bits: &[u8]) -> PyResult<[f64; 4]> {
    Ok(mask_to_bbox(&mask_from(width, height, bits)?).map_err(to_py)?.to_coco())
}

/// Uncompressed COCO RLE counts of a row-major 0/1 mask.
#[pyfunction]
fn rle_encode(width: u32, height: u32, bits: &[u8]) -> PyResult<Vec<u64>> {
    Ok(Rle::encode(&mask_from(width, height, bits)?).counts)
}

#[pyfunction]
fn rle_decode<'py>(py: Python<'py>, width: u32, height: u32, counts: Vec<u64>) -> PyResult<Bound<'py, PyBytes>> {
    let mask = Rle { size: [height, width], counts }.decode().map_err(to_py)?;
    Ok(mask_bytes(py, &mask))
}

/// PNG images from the deterministic mock backend.
#[pyfunction]
#[pyo3(signature = (prompt, n, seed, size = 256, labels = Vec::new()))]
fn mock_generate<'py>(
    py: Python<'py>,
    prompt: &str,
    n: u32,
    seed: u64,
    size: u32,
    labels: Vec<String>,
) -> PyResult<Vec<Bound<'py, PyBytes>>> {
    let client = Client::mock(MockBackend::new(TemplateSet::bundled()).with_labels(&labels));
    let req = GenerationRequest::new(prompt, n, seed).with_size(size, size);
    let images = client.generate_images(&req).map_err(to_py)?;
    Ok(images.iter().map(|p| PyBytes::new(py, p.as_bytes())).collect())
}

#[pymodule]
fn pysynthpaste(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("SynthPasteError", py.get_type::<SynthPasteError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("GatewayError", py.get_type::<GatewayError>())?;
    m.add("PipelineError", py.get_type::<PipelineError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(validate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_stats, m)?)?;
    m.add_function(wrap_pyfunction!(foreground_prompts, m)?)?;
    m.add_function(wrap_pyfunction!(background_prompts, m)?)?;
    m.add_function(wrap_pyfunction!(py_apply_edit_rules, m)?)?;
    m.add_function(wrap_pyfunction!(context_prompts, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(extract_mask, m)?)?;
    m.add_function(wrap_pyfunction!(mask_bbox, m)?)?;
    m.add_function(wrap_pyfunction!(rle_encode, m)?)?;
    m.add_function(wrap_pyfunction!(rle_decode, m)?)?;
    m.add_function(wrap_pyfunction!(mock_generate, m)?)?;
    Ok(())
}
