//! Staged, checkpointed execution of the dataset recipes.
//!
//! Every stage reads and writes a workspace directory:
//!
//! ```text
//! cdi/mined.json                    captions and prompts per CDI
//! candidates/fg/<label>/<t>/*.png   raw foreground renders
//! candidates/bg/...                 raw background renders
//! assets/fg/...                     extracted cutouts (AssetStore layout)
//! assets/bg/index.json              selected backgrounds
//! reports/...                       selection reports (CSV)
//! dataset/                          composed COCO dataset
//! mixed/                            dataset mixed with real images
//! stats.json                        statistics of the final dataset
//! stages/<stage>.json               completion records
//! ```
//!
//! A stage is skipped when its record matches the hash of its inputs and
//! the files it wrote are unchanged.

mod config;
mod plan;
mod store;

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{info, warn};

use crate::compositor::{build_dataset, AssetPool, BackgroundAsset, Layer, Pools, MIN_AUGMENTED_AREA};
use crate::context_mining::{CaptionPrompts, ContextMiner, NounLexicon, ObjectVocabulary};
use crate::dataset::{
    check_integrity, dataset_stats, emit_coco, import_coco, load_dataset, mix_coco, write_json_atomic, CocoDataset,
    DatasetManifest, DatasetStats, Origin, Rle,
};
use crate::foreground::{
    batch_seed, filter_foreground_batch, label_dir, load_asset, AssetProvenance, AssetStore, ForegroundAsset,
};
use crate::gateway::{Client, MockBackend, PngBytes};
use crate::mask::BBox;
use crate::prompting::{ClassLabel, TemplateSet};
use crate::rng::derive_seed;
use crate::selection::{rank_with_report, score_batch, write_report, CandidateId, ScoredImage};
use crate::{imageio, Error, Result};

pub use config::{
    Counts, ImageSizes, PipelineConfig, PromptConfig, RealData, RealSource, Recipe, SelectionConfig,
    DEFAULT_BG_KEEP_FRACTION, DEFAULT_FG_KEEP,
};
pub use plan::{plan_counts, BackgroundCounts, CountPlan, ForegroundCounts, PlanInputs, TrainingSize};
pub use store::{hash_file, hash_json, hash_outputs, StageRecord, StageStore};

const MINED_FILE: &str = "cdi/mined.json";
const FG_BATCHES: &str = "candidates/fg/batches.json";
const BG_BATCHES: &str = "candidates/bg/batches.json";
const BG_INDEX: &str = "assets/bg/index.json";
const STATS_FILE: &str = "stats.json";
const DATASET_DIR: &str = "dataset";
const MIXED_DIR: &str = "mixed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    MineCdi,
    GenForegrounds,
    GenBackgrounds,
    Filter,
    Compose,
    Mix,
    Stats,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::MineCdi,
        Stage::GenForegrounds,
        Stage::GenBackgrounds,
        Stage::Filter,
        Stage::Compose,
        Stage::Mix,
        Stage::Stats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::MineCdi => "mine-cdi",
            Stage::GenForegrounds => "gen-foregrounds",
            Stage::GenBackgrounds => "gen-backgrounds",
            Stage::Filter => "filter",
            Stage::Compose => "compose",
            Stage::Mix => "mix",
            Stage::Stats => "stats",
        }
    }

    /// Workspace paths owned by the stage. They are removed before it runs.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::MineCdi => &["cdi"],
            Stage::GenForegrounds => &["candidates/fg"],
            Stage::GenBackgrounds => &["candidates/bg"],
            Stage::Filter => &["assets", "reports"],
            Stage::Compose => &[DATASET_DIR],
            Stage::Mix => &[MIXED_DIR],
            Stage::Stats => &[STATS_FILE],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub outcome: Outcome,
    pub summary: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub stages: Vec<StageReport>,
    pub dataset_dir: PathBuf,
    pub manifest: DatasetManifest,
}

/// Captions and prompts mined from one CDI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedCdi {
    pub cdi: String,
    pub file: String,
    pub captions: Vec<CaptionPrompts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FgBatch {
    pub label: String,
    pub template_id: usize,
    pub prompt: String,
    pub seed: u64,
    pub count: u32,
    pub dir: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BgKind {
    Template,
    Context,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRun {
    pub prompt: String,
    pub seed: u64,
    pub count: u32,
}

/// One selection group of background candidates. Images of prompt `p`
/// live in `<dir>/p<pp>/<index>.png`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BgBatch {
    pub kind: BgKind,
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    pub dir: String,
    pub prompts: Vec<PromptRun>,
}

/// A selected background. Synthetic files are relative to the workspace;
/// real ones name an image of the real dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BgEntry {
    pub id: String,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub real_image: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub images: usize,
    pub annotations: usize,
    pub empty_images: usize,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn candidate_file(dir: &str, index: u32) -> String {
    format!("{dir}/{index:05}.png")
}

fn prompt_dir(dir: &str, p: usize) -> String {
    format!("{dir}/p{p:02}")
}

/// Split `total` images over `prompts` in round-robin order.
pub fn round_robin(total: u32, prompts: usize) -> Vec<u32> {
    if prompts == 0 {
        return Vec::new();
    }
    let p = prompts as u32;
    (0..p).map(|i| total / p + u32::from(i < total % p)).collect()
}

fn safe_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy())
        .unwrap_or_default()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Image files of a CDI directory, sorted by name, with unique stems.
pub fn list_cdis(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Config(format!("cdi_dir {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().map(|e| e.to_string_lossy().to_lowercase()).unwrap_or_default();
        if path.is_file() && matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            files.push(path);
        }
    }
    files.sort();
    let mut seen = BTreeMap::new();
    let mut out = Vec::with_capacity(files.len());
    for path in files {
        let stem = safe_stem(&path);
        if let Some(prev) = seen.insert(stem.clone(), path.clone()) {
            return Err(Error::Config(format!(
                "CDIs {} and {} share the name {stem:?}",
                prev.display(),
                path.display()
            )));
        }
        out.push((stem, path));
    }
    if out.is_empty() {
        return Err(Error::Config(format!("cdi_dir {} holds no png/jpg images", dir.display())));
    }
    Ok(out)
}

fn cdi_png(path: &Path) -> Result<PngBytes> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        imageio::decode(&bytes)?;
        return Ok(PngBytes(bytes));
    }
    Ok(PngBytes(imageio::encode_rgba(&imageio::read_image(path)?, &[])?))
}

pub fn load_templates(prompts: &PromptConfig) -> Result<TemplateSet> {
    let mut set = match (&prompts.templates, prompts.corrected_backgrounds) {
        (Some(_), true) => {
            return Err(Error::Config(
                "prompts.corrected_backgrounds applies to the bundled templates only".into(),
            ))
        }
        (Some(path), false) => TemplateSet::from_path(path).map_err(config_err)?,
        (None, true) => TemplateSet::bundled_corrected(),
        (None, false) => TemplateSet::bundled(),
    };
    if let Some(path) = &prompts.background_overrides {
        set.apply_overrides_path(path).map_err(config_err)?;
    }
    Ok(set)
}

fn load_lexicon(prompts: &PromptConfig) -> Result<NounLexicon> {
    match &prompts.lexicon {
        Some(path) => NounLexicon::from_path(path).map_err(config_err),
        None => Ok(NounLexicon::bundled()),
    }
}

/// Map every real category id onto the configured label of the same name.
fn real_categories(real: &CocoDataset, labels: &[ClassLabel]) -> Result<HashMap<u32, ClassLabel>> {
    let by_name: BTreeMap<&str, &ClassLabel> = labels.iter().map(|l| (l.name.as_str(), l)).collect();
    let real_names: Vec<&str> = real.manifest.categories.iter().map(|c| c.name.as_str()).collect();
    let mut sorted = real_names.clone();
    sorted.sort_unstable();
    if !sorted.iter().copied().eq(by_name.keys().copied()) {
        return Err(Error::CategoryMismatch(format!(
            "configured {:?} vs real {sorted:?}",
            by_name.keys().collect::<Vec<_>>()
        )));
    }
    Ok(real
        .manifest
        .categories
        .iter()
        .map(|c| (c.id, (*by_name[c.name.as_str()]).clone()))
        .collect())
}

/// Foreground pool read from an [`AssetStore`] on demand.
struct DiskForegrounds {
    paths: Vec<PathBuf>,
}

impl AssetPool<ForegroundAsset> for DiskForegrounds {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn get(&self, index: usize) -> Result<Cow<'_, ForegroundAsset>> {
        let path = self.paths.as_slice().get(index).ok_or(Error::EmptyPool("foreground"))?;
        load_asset(path).map(Cow::Owned)
    }
}

#[derive(Debug, Clone)]
struct RealLayer {
    label: ClassLabel,
    source: String,
    rle: Rle,
}

#[derive(Debug, Clone)]
enum BgSource {
    Synthetic { id: String, path: PathBuf },
    Real { id: String, path: PathBuf, layers: Vec<RealLayer> },
}

/// Background pool decoded on demand.
struct DiskBackgrounds {
    sources: Vec<BgSource>,
}

impl AssetPool<BackgroundAsset> for DiskBackgrounds {
    fn len(&self) -> usize {
        self.sources.len()
    }

    fn get(&self, index: usize) -> Result<Cow<'_, BackgroundAsset>> {
        let source = self.sources.as_slice().get(index).ok_or(Error::NoBackground)?;
        let (id, path) = match source {
            BgSource::Synthetic { id, path } | BgSource::Real { id, path, .. } => (id, path),
        };
        let image = imageio::rgba_to_rgb(&imageio::read_image(path)?);
        let mut asset = BackgroundAsset::new(id.clone(), image);
        if let BgSource::Real { layers, .. } = source {
            for layer in layers {
                let mask = layer.rle.decode()?;
                if (mask.width(), mask.height()) != asset.image.dimensions() {
                    return Err(Error::SchemaInvariantViolation(format!(
                        "annotation {} does not match the size of its image",
                        layer.source
                    )));
                }
                asset.base_layers.push(Layer {
                    category_id: layer.label.id,
                    label: layer.label.name.clone(),
                    source_asset: layer.source.clone(),
                    mask,
                });
            }
        }
        Ok(Cow::Owned(asset))
    }
}

/// Load a dataset directory and run every consistency check on it:
/// referential integrity, boxes and areas against the decoded masks, the
/// manifest, and the presence of each image file.
pub fn validate_dataset(dir: &Path) -> Result<ValidationReport> {
    let dataset = load_dataset(dir)?;
    check_integrity(&dataset.coco)?;
    dataset.manifest.check()?;
    if dataset.manifest.images.len() != dataset.coco.images.len()
        || dataset.manifest.annotation_count != dataset.coco.annotations.len() as u64
    {
        return Err(Error::SchemaInvariantViolation("manifest and annotations.json disagree".into()));
    }
    for image in &dataset.coco.images {
        let path = dataset.image_path(image);
        if !path.is_file() {
            return Err(Error::SchemaInvariantViolation(format!("missing image file {}", path.display())));
        }
    }
    let with_instances = dataset.annotations_by_image().len();
    Ok(ValidationReport {
        images: dataset.coco.images.len(),
        annotations: dataset.coco.annotations.len(),
        empty_images: dataset.coco.images.len() - with_instances,
    })
}

/// Statistics of a dataset directory, also written to `stats.json` by the
/// stats stage.
pub fn stats_for(dir: &Path) -> Result<DatasetStats> {
    Ok(dataset_stats(&DatasetManifest::load(&dir.join(crate::dataset::MANIFEST_FILE))?))
}

pub struct Pipeline {
    config: PipelineConfig,
    root: PathBuf,
    labels: Vec<ClassLabel>,
    templates: TemplateSet,
    client: Client,
    store: StageStore,
    pool: rayon::ThreadPool,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline").field("root", &self.root).field("recipe", &self.config.recipe).finish()
    }
}

impl Pipeline {
    /// Pipeline using the backend selected in the configuration.
    pub fn new(config: PipelineConfig, root: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let templates = load_templates(&config.prompts)?;
        let mock = MockBackend::new(templates.clone()).with_labels(&config.labels);
        let client = Client::from_config(&config.gateway, mock).map_err(config_err)?;
        Self::with_client(config, root, client)
    }

    pub fn with_client(config: PipelineConfig, root: impl Into<PathBuf>, client: Client) -> Result<Self> {
        config.validate()?;
        let labels = config.class_labels()?;
        let templates = load_templates(&config.prompts)?;
        let threads = config
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Pipeline {
            store: StageStore::new(&root),
            config,
            root,
            labels,
            templates,
            client,
            pool,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn labels(&self) -> &[ClassLabel] {
        &self.labels
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn stage_store(&self) -> &StageStore {
        &self.store
    }

    /// Stages of the configured recipe, in execution order.
    pub fn stages(&self) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| match s {
                Stage::MineCdi => self.config.cdi_dir.is_some() && self.config.recipe != Recipe::SynFg,
                Stage::Mix => self.config.recipe == Recipe::SynPlusReal,
                _ => true,
            })
            .collect()
    }

    /// Directory of the final dataset.
    pub fn dataset_dir(&self) -> PathBuf {
        match self.config.recipe {
            Recipe::SynPlusReal => self.root.join(MIXED_DIR),
            _ => self.root.join(DATASET_DIR),
        }
    }

    /// Nominal counts for the real inputs found on disk.
    pub fn count_plan(&self) -> Result<CountPlan> {
        let cdis = match &self.config.cdi_dir {
            Some(dir) if self.config.recipe != Recipe::SynFg => list_cdis(dir)?.len(),
            _ => 0,
        };
        let mut inputs = PlanInputs { cdis, ..Default::default() };
        if let Some(real) = self.real_dataset()? {
            inputs.real_images = real.coco.images.len();
            inputs.real_foregrounds = real.coco.annotations.len();
        }
        if let Some(mix) = self.mix_dataset()? {
            inputs.mix_images = mix.coco.images.len();
        }
        plan_counts(&self.config, &self.templates, inputs)
    }

    pub fn run(&self) -> Result<RunReport> {
        let mut stages = Vec::new();
        for stage in self.stages() {
            stages.push(self.run_stage(stage)?);
        }
        let dataset_dir = self.dataset_dir();
        let manifest = DatasetManifest::load(&dataset_dir.join(crate::dataset::MANIFEST_FILE))?;
        Ok(RunReport { stages, dataset_dir, manifest })
    }

    /// Run one stage unless its record shows it is up to date.
    pub fn run_stage(&self, stage: Stage) -> Result<StageReport> {
        if !self.stages().contains(&stage) {
            return Err(Error::Config(format!(
                "stage {stage} is not part of recipe {:?}{}",
                self.config.recipe,
                if stage == Stage::MineCdi { " without cdi_dir" } else { "" }
            )));
        }
        let inputs = self.stage_inputs(stage)?;
        if let Some(record) = self.store.completed(stage.name(), &inputs, stage.outputs())? {
            info!(stage = stage.name(), "up to date, skipped");
            return Ok(StageReport { stage, outcome: Outcome::Skipped, summary: record.summary });
        }
        self.store.clear(stage.name())?;
        for rel in stage.outputs() {
            let path = self.root.join(rel);
            if path.is_dir() {
                std::fs::remove_dir_all(&path).map_err(|e| Error::io(&path, e))?;
            } else if path.is_file() {
                std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
        info!(stage = stage.name(), "started");
        let summary = self.pool.install(|| match stage {
            Stage::MineCdi => self.mine_cdi(),
            Stage::GenForegrounds => self.gen_foregrounds(),
            Stage::GenBackgrounds => self.gen_backgrounds(),
            Stage::Filter => self.filter(),
            Stage::Compose => self.compose(),
            Stage::Mix => self.mix(),
            Stage::Stats => self.stats(),
        })?;
        let record = StageRecord {
            stage: stage.name().to_string(),
            inputs,
            outputs: hash_outputs(&self.root, stage.outputs())?,
            summary: summary.clone(),
        };
        self.store.save(&record)?;
        info!(stage = stage.name(), summary = %summary, "finished");
        Ok(StageReport { stage, outcome: Outcome::Ran, summary })
    }

    fn upstream(&self, stage: Stage) -> Result<String> {
        match self.store.load(stage.name())? {
            Some(r) => Ok(r.outputs),
            None => Err(Error::Pipeline(format!("stage {stage} has not completed yet"))),
        }
    }

    fn real_inputs(&self, source: Option<&RealSource>) -> Result<Value> {
        match source {
            Some(s) => Ok(json!({
                "annotations": hash_file(&s.annotations)?,
                "images": s.images,
            })),
            None => Ok(Value::Null),
        }
    }

    fn stage_inputs(&self, stage: Stage) -> Result<String> {
        let c = &self.config;
        let backend = c.gateway.backend;
        let real = c.real.as_ref().map(|r| RealSource { annotations: r.annotations.clone(), images: r.images.clone() });
        let value = match stage {
            Stage::MineCdi => {
                let dir = c.cdi_dir.as_ref().ok_or_else(|| Error::Config("cdi_dir is not set".into()))?;
                let cdis: Vec<(String, String)> = list_cdis(dir)?
                    .into_iter()
                    .map(|(stem, path)| Ok((stem, hash_file(&path)?)))
                    .collect::<Result<_>>()?;
                json!({
                    "labels": c.labels,
                    "cdis": cdis,
                    "captions_per_cdi": c.counts.captions_per_cdi,
                    "per_phrase": c.prompts.per_phrase,
                    "edit_rules": c.prompts.edit_rules,
                    "lexicon": c.prompts.lexicon.as_ref().map(|p| hash_file(p)).transpose()?,
                    "backend": backend,
                })
            }
            Stage::GenForegrounds => json!({
                "prompts": self.foreground_jobs()?.iter().map(|(_, _, p)| p.clone()).collect::<Vec<_>>(),
                "count": c.counts.fg_per_template,
                "size": c.image_size.foreground,
                "seed": c.master_seed,
                "backend": backend,
            }),
            Stage::GenBackgrounds => json!({
                "recipe": c.recipe,
                "prompts": (0..self.templates.background().len())
                    .map(|t| self.templates.verbalize_background(t))
                    .collect::<Result<Vec<_>>>()?,
                "count": c.counts.bg_per_template,
                "per_caption": c.counts.bg_per_caption,
                "size": c.image_size.background,
                "seed": c.master_seed,
                "mined": if self.stages().contains(&Stage::MineCdi) { Some(self.upstream(Stage::MineCdi)?) } else { None },
                "backend": backend,
            }),
            Stage::Filter => json!({
                "labels": c.labels,
                "recipe": c.recipe,
                "foregrounds": self.upstream(Stage::GenForegrounds)?,
                "backgrounds": self.upstream(Stage::GenBackgrounds)?,
                "keep": {
                    "fg": c.counts.fg_policy()?,
                    "bg": c.counts.bg_policy()?,
                    "caption": c.counts.bg_keep_per_caption,
                },
                "selection": c.selection,
                "extraction": c.extraction,
                "real": self.real_inputs(real.as_ref())?,
                "real_pastes": c.real.as_ref().map(|r| r.real_foreground_pastes(c.recipe)),
                "backend": backend,
            }),
            Stage::Compose => json!({
                "labels": c.labels,
                "recipe": c.recipe,
                "assets": self.upstream(Stage::Filter)?,
                "augment": c.augment,
                "target": c.counts.target_size,
                "seed": c.master_seed,
                "real": self.real_inputs(real.as_ref())?,
            }),
            Stage::Mix => json!({
                "dataset": self.upstream(Stage::Compose)?,
                "mix": self.real_inputs(c.real.as_ref().map(|r| r.mix_source()).as_ref())?,
                "fraction": c.real.as_ref().map(|r| r.real_fraction),
            }),
            Stage::Stats => json!({
                "dataset": self.upstream(if c.recipe == Recipe::SynPlusReal { Stage::Mix } else { Stage::Compose })?,
            }),
        };
        hash_json(&json!({ "stage": stage.name(), "inputs": value }))
    }

    fn real_dataset(&self) -> Result<Option<CocoDataset>> {
        match (&self.config.recipe, &self.config.real) {
            (Recipe::PureSyn, _) | (_, None) => Ok(None),
            (_, Some(r)) => import_coco(&r.annotations, &r.images).map(Some),
        }
    }

    fn mix_dataset(&self) -> Result<Option<CocoDataset>> {
        match (&self.config.recipe, &self.config.real) {
            (Recipe::SynPlusReal, Some(r)) => {
                let source = r.mix_source();
                import_coco(&source.annotations, &source.images).map(Some)
            }
            _ => Ok(None),
        }
    }

    fn label(&self, name: &str) -> Result<&ClassLabel> {
        self.labels
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::Pipeline(format!("label {name:?} is not configured")))
    }

    fn foreground_jobs(&self) -> Result<Vec<(ClassLabel, usize, String)>> {
        let mut jobs = Vec::new();
        for label in &self.labels {
            for t in self.templates.foreground() {
                jobs.push((label.clone(), t.id, self.templates.verbalize_foreground(label, t.id)?));
            }
        }
        Ok(jobs)
    }

    fn write_images(&self, dir: &str, images: &[PngBytes]) -> Result<()> {
        images
            .par_iter()
            .enumerate()
            .try_for_each(|(i, png)| imageio::write_file(&self.root.join(candidate_file(dir, i as u32)), png.as_bytes()))
    }

    fn read_candidate(&self, dir: &str, index: u32) -> Result<PngBytes> {
        let path = self.root.join(candidate_file(dir, index));
        std::fs::read(&path).map(PngBytes).map_err(|e| Error::io(&path, e))
    }

    fn mine_cdi(&self) -> Result<Value> {
        let c = &self.config;
        let dir = c.cdi_dir.as_ref().ok_or_else(|| Error::Config("cdi_dir is not set".into()))?;
        let lexicon = load_lexicon(&c.prompts)?;
        let miner = ContextMiner {
            captions_per_cdi: c.counts.captions_per_cdi,
            per_phrase: c.prompts.per_phrase,
            rules: c.prompts.edit_rules.clone(),
            vocabulary: ObjectVocabulary::new(&self.labels, &lexicon),
        };
        let mined: Vec<MinedCdi> = list_cdis(dir)?
            .par_iter()
            .map(|(stem, path)| {
                let png = cdi_png(path)?;
                Ok(MinedCdi {
                    cdi: stem.clone(),
                    file: path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
                    captions: miner.mine_grouped(stem, &png, &self.client)?,
                })
            })
            .collect::<Result<_>>()?;
        write_json_atomic(&self.root.join(MINED_FILE), &mined, true)?;
        let captions: usize = mined.iter().map(|m| m.captions.len()).sum();
        let prompts: usize = mined.iter().flat_map(|m| &m.captions).map(|g| g.prompts.len()).sum();
        info!(stage = "mine-cdi", cdis = mined.len(), captions, prompts, "mined contexts");
        Ok(json!({ "cdis": mined.len(), "captions": captions, "prompts": prompts }))
    }

    fn gen_foregrounds(&self) -> Result<Value> {
        let c = &self.config;
        let size = c.image_size.foreground;
        let batches: Vec<FgBatch> = self
            .foreground_jobs()?
            .par_iter()
            .map(|(label, t, prompt)| {
                let seed = batch_seed(c.master_seed, &label.name, *t);
                let dir = format!("candidates/fg/{}/{t}", label_dir(&label.name));
                let images = self.client.generate_many(prompt, c.counts.fg_per_template, seed, size, size)?;
                self.write_images(&dir, &images)?;
                Ok(FgBatch {
                    label: label.name.clone(),
                    template_id: *t,
                    prompt: prompt.clone(),
                    seed,
                    count: c.counts.fg_per_template,
                    dir,
                })
            })
            .collect::<Result<_>>()?;
        write_json_atomic(&self.root.join(FG_BATCHES), &batches, true)?;
        let images: u64 = batches.iter().map(|b| u64::from(b.count)).sum();
        Ok(json!({ "batches": batches.len(), "images": images }))
    }

    fn background_batches(&self) -> Result<Vec<BgBatch>> {
        let c = &self.config;
        let mut batches = Vec::new();
        if c.recipe == Recipe::SynFg {
            return Ok(batches);
        }
        for t in self.templates.background() {
            batches.push(BgBatch {
                kind: BgKind::Template,
                key: t.id.to_string(),
                caption: None,
                dir: format!("candidates/bg/template/{}", t.id),
                prompts: vec![PromptRun {
                    prompt: self.templates.verbalize_background(t.id)?,
                    seed: derive_seed(c.master_seed, &[&"bg", &t.id]),
                    count: c.counts.bg_per_template,
                }],
            });
        }
        if !self.stages().contains(&Stage::MineCdi) {
            return Ok(batches);
        }
        let mined: Vec<MinedCdi> = read_json(&self.root.join(MINED_FILE))?;
        for cdi in &mined {
            for (k, group) in cdi.captions.iter().enumerate() {
                if group.prompts.is_empty() {
                    warn!(stage = "gen-backgrounds", cdi = %cdi.cdi, caption = %group.caption.text, reason = "no context phrase left", "caption skipped");
                    continue;
                }
                let prompts = group
                    .prompts
                    .iter()
                    .zip(round_robin(c.counts.bg_per_caption, group.prompts.len()))
                    .enumerate()
                    .filter(|(_, (_, n))| *n > 0)
                    .map(|(p, (prompt, count))| PromptRun {
                        prompt: prompt.clone(),
                        seed: derive_seed(c.master_seed, &[&"bg-cdi", &cdi.cdi.as_str(), &k, &p]),
                        count,
                    })
                    .collect();
                batches.push(BgBatch {
                    kind: BgKind::Context,
                    key: format!("{}/{k}", cdi.cdi),
                    caption: Some(group.edited.clone()),
                    dir: format!("candidates/bg/cdi/{}/{k}", cdi.cdi),
                    prompts,
                });
            }
        }
        Ok(batches)
    }

    fn gen_backgrounds(&self) -> Result<Value> {
        let size = self.config.image_size.background;
        let batches = self.background_batches()?;
        batches.par_iter().try_for_each(|b| {
            b.prompts.par_iter().enumerate().try_for_each(|(p, run)| {
                let images = self.client.generate_many(&run.prompt, run.count, run.seed, size, size)?;
                self.write_images(&prompt_dir(&b.dir, p), &images)
            })
        })?;
        write_json_atomic(&self.root.join(BG_BATCHES), &batches, true)?;
        let count = |kind| batches.iter().filter(|b| b.kind == kind).count();
        let images: u64 = batches.iter().flat_map(|b| &b.prompts).map(|r| u64::from(r.count)).sum();
        Ok(json!({
            "template_batches": count(BgKind::Template),
            "context_batches": count(BgKind::Context),
            "images": images,
        }))
    }

    fn filter(&self) -> Result<Value> {
        let store = AssetStore::new(self.root.join("assets"));
        let (fg_synthetic, fg_failures) = self.filter_foregrounds(&store)?;
        let real = self.real_dataset()?;
        let remap = match &real {
            Some(r) => Some(real_categories(r, &self.labels)?),
            None => None,
        };
        let fg_real = match (&real, &remap, &self.config.real) {
            (Some(r), Some(m), Some(cfg)) if cfg.real_foreground_pastes(self.config.recipe) => {
                self.cut_real_foregrounds(r, m, &store)?
            }
            _ => 0,
        };
        let mut entries = self.filter_backgrounds()?;
        let bg_template = entries.iter().filter(|e| e.id.starts_with("template/")).count();
        let bg_context = entries.len() - bg_template;
        let bg_real = real.as_ref().map_or(0, |r| r.coco.images.len());
        if let Some(r) = &real {
            entries.extend(r.coco.images.iter().map(|img| BgEntry {
                id: format!("real/{}", img.id),
                origin: Origin::Real,
                file: None,
                real_image: Some(img.id),
                score: None,
            }));
        }
        write_json_atomic(&self.root.join(BG_INDEX), &entries, true)?;
        info!(
            stage = "filter",
            fg_synthetic, fg_real, fg_failures, bg_template, bg_context, bg_real,
            "pools ready"
        );
        Ok(json!({
            "foregrounds": { "synthetic": fg_synthetic, "real": fg_real, "failures": fg_failures },
            "backgrounds": { "template": bg_template, "context": bg_context, "real": bg_real },
        }))
    }

    fn filter_foregrounds(&self, store: &AssetStore) -> Result<(usize, usize)> {
        let c = &self.config;
        let policy = c.selection.apply(c.counts.fg_policy()?);
        let batches: Vec<FgBatch> = read_json(&self.root.join(FG_BATCHES))?;
        let counts: Vec<(usize, usize)> = batches
            .par_iter()
            .map(|b| {
                let label = self.label(&b.label)?;
                let candidates = (0..b.count)
                    .map(|i| Ok((CandidateId { seed: b.seed, index: i }, self.read_candidate(&b.dir, i)?)))
                    .collect::<Result<Vec<_>>>()?;
                let report = filter_foreground_batch(
                    label,
                    b.template_id,
                    &b.prompt,
                    candidates,
                    &self.labels,
                    &policy,
                    &c.extraction,
                    &self.client,
                )?;
                let csv = self.root.join(format!("reports/fg/{}/{}.csv", label_dir(&b.label), b.template_id));
                write_report(&csv, &report.rows)?;
                report.assets.par_iter().try_for_each(|a| store.save(a).map(|_| ()))?;
                Ok((report.assets.len(), report.failures.len()))
            })
            .collect::<Result<_>>()?;
        Ok(counts.into_iter().fold((0, 0), |(a, f), (x, y)| (a + x, f + y)))
    }

    fn cut_real_foregrounds(&self, real: &CocoDataset, remap: &HashMap<u32, ClassLabel>, store: &AssetStore) -> Result<usize> {
        let by_image = real.annotations_by_image();
        let counts: Vec<usize> = real
            .coco
            .images
            .par_iter()
            .map(|img| {
                let Some(anns) = by_image.get(&img.id) else { return Ok(0) };
                let rgba = imageio::read_image(&real.image_path(img))?;
                let mut saved = 0;
                for ann in anns {
                    let mask = ann.segmentation.decode()?;
                    if mask.count() < MIN_AUGMENTED_AREA {
                        warn!(stage = "filter", image = img.id, annotation = ann.id, reason = "object too small", "real foreground skipped");
                        continue;
                    }
                    let provenance = AssetProvenance {
                        label: remap[&ann.category_id].name.clone(),
                        template_id: None,
                        seed: img.id,
                        index: ann.id as u32,
                        prompt: img.file_name.clone(),
                        source_bbox: BBox { x: 0, y: 0, w: 0, h: 0 },
                        source_width: 0,
                        source_height: 0,
                        score: None,
                    };
                    store.save(&ForegroundAsset::from_masked(&rgba, &mask, provenance)?)?;
                    saved += 1;
                }
                Ok(saved)
            })
            .collect::<Result<_>>()?;
        Ok(counts.into_iter().sum())
    }

    fn filter_backgrounds(&self) -> Result<Vec<BgEntry>> {
        let c = &self.config;
        let template_policy = c.selection.apply(c.counts.bg_policy()?);
        let caption_policy = c.selection.apply(c.counts.caption_policy());
        let batches: Vec<BgBatch> = read_json(&self.root.join(BG_BATCHES))?;
        let groups: Vec<Vec<BgEntry>> = batches
            .par_iter()
            .map(|b| {
                let policy = match b.kind {
                    BgKind::Template => &template_policy,
                    BgKind::Context => &caption_policy,
                };
                let mut files = HashMap::new();
                let mut scored: Vec<ScoredImage> = Vec::new();
                for (p, run) in b.prompts.iter().enumerate() {
                    let dir = prompt_dir(&b.dir, p);
                    let candidates = (0..run.count)
                        .map(|i| {
                            let id = CandidateId { seed: run.seed, index: i };
                            files.insert(id, candidate_file(&dir, i));
                            Ok((id, self.read_candidate(&dir, i)?))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    scored.extend(score_batch(candidates, &run.prompt, None, &self.labels, policy, &self.client)?);
                }
                let (kept, rows) = rank_with_report(scored, policy)?;
                let kind = match b.kind {
                    BgKind::Template => "template",
                    BgKind::Context => "context",
                };
                write_report(&self.root.join(format!("reports/bg/{kind}/{}.csv", b.key)), &rows)?;
                Ok(kept
                    .iter()
                    .map(|k| BgEntry {
                        id: format!("{kind}/{}/{}_{}", b.key, k.id.seed, k.id.index),
                        origin: Origin::Synthetic,
                        file: Some(files[&k.id].clone()),
                        real_image: None,
                        score: Some(k.faithfulness),
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(groups.into_iter().flatten().collect())
    }

    fn background_pool(&self) -> Result<DiskBackgrounds> {
        let entries: Vec<BgEntry> = read_json(&self.root.join(BG_INDEX))?;
        let real = self.real_dataset()?;
        let remap = match &real {
            Some(r) => Some(real_categories(r, &self.labels)?),
            None => None,
        };
        let by_image = real.as_ref().map(|r| r.annotations_by_image()).unwrap_or_default();
        let real_images: HashMap<u64, _> = real.iter().flat_map(|r| r.coco.images.iter().map(|i| (i.id, i))).collect();
        let mut sources = Vec::with_capacity(entries.len());
        for e in entries {
            let source = match (e.file, e.real_image, &real, &remap) {
                (Some(file), _, _, _) => BgSource::Synthetic { id: e.id, path: self.root.join(file) },
                (None, Some(image_id), Some(r), Some(m)) => {
                    let img = real_images
                        .get(&image_id)
                        .ok_or_else(|| Error::Pipeline(format!("real image {image_id} is no longer in the dataset")))?;
                    let layers = by_image
                        .get(&image_id)
                        .into_iter()
                        .flatten()
                        .map(|a| RealLayer {
                            label: m[&a.category_id].clone(),
                            source: format!("real/{image_id}/{}", a.id),
                            rle: a.segmentation.clone(),
                        })
                        .collect();
                    BgSource::Real { id: e.id, path: r.image_path(img), layers }
                }
                _ => return Err(Error::Pipeline(format!("background {} has no source", e.id))),
            };
            sources.push(source);
        }
        Ok(DiskBackgrounds { sources })
    }

    fn compose(&self) -> Result<Value> {
        let c = &self.config;
        let paths = AssetStore::new(self.root.join("assets")).paths()?;
        let backgrounds = self.background_pool()?;
        let pools = Pools {
            foregrounds: std::sync::Arc::new(DiskForegrounds { paths }),
            backgrounds: std::sync::Arc::new(backgrounds),
            labels: std::sync::Arc::new(self.labels.clone()),
        };
        let seed = derive_seed(c.master_seed, &[&"compose"]);
        let stream = build_dataset(pools, c.counts.target_size, seed, &c.augment)?;
        let name = match c.recipe {
            Recipe::PureSyn => "pure_syn",
            Recipe::SynFg => "syn_fg",
            Recipe::SynPlusReal => "syn_plus_real",
        };
        let manifest = emit_coco(stream, &self.labels, &self.root.join(DATASET_DIR), name, &[c.master_seed])?;
        let empty = manifest.images.iter().filter(|i| i.instances.is_empty()).count();
        info!(stage = "compose", images = manifest.images.len(), annotations = manifest.annotation_count, empty, "dataset written");
        Ok(json!({
            "images": manifest.images.len(),
            "annotations": manifest.annotation_count,
            "empty_images": empty,
        }))
    }

    fn mix(&self) -> Result<Value> {
        let c = &self.config;
        let fraction = c.real.as_ref().map_or(0.0, |r| r.real_fraction);
        let syn = load_dataset(&self.root.join(DATASET_DIR))?;
        let real = self.mix_dataset()?.ok_or_else(|| Error::Config("mixing needs a [real] dataset".into()))?;
        let mixed = mix_coco(&syn, &real, fraction, &self.root.join(MIXED_DIR))?;
        let real_images = mixed.manifest.images.iter().filter(|i| i.origin == Origin::Real).count();
        info!(stage = "mix", images = mixed.manifest.images.len(), real_images, "datasets mixed");
        Ok(json!({ "images": mixed.manifest.images.len(), "real_images": real_images }))
    }

    fn stats(&self) -> Result<Value> {
        let stats = stats_for(&self.dataset_dir())?;
        write_json_atomic(&self.root.join(STATS_FILE), &stats, true)?;
        Ok(json!({ "images": stats.images, "annotations": stats.annotations }))
    }
}
