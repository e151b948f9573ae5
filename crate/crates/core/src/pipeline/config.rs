use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compositor::AugmentParams;
use crate::foreground::ExtractionParams;
use crate::gateway::GatewayConfig;
use crate::prompting::{label_set, ClassLabel, EditRule};
use crate::selection::{SelectionPolicy, DEFAULT_CLASS_PROMPT};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    /// Synthetic foregrounds on synthetic backgrounds.
    #[default]
    PureSyn,
    /// Synthetic foregrounds pasted onto real images, whose own objects stay labeled.
    SynFg,
    /// Synthetic and real foregrounds on synthetic and real backgrounds,
    /// mixed with the real images afterwards.
    SynPlusReal,
}

/// Stage sizes. Each `*_keep` / `*_keep_fraction` pair is exclusive; when
/// neither is set the default applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Counts {
    pub fg_per_template: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fg_keep: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fg_keep_fraction: Option<f64>,
    pub bg_per_template: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bg_keep: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bg_keep_fraction: Option<f64>,
    pub bg_per_caption: u32,
    pub bg_keep_per_caption: usize,
    pub captions_per_cdi: u32,
    pub target_size: usize,
}

pub const DEFAULT_FG_KEEP: usize = 200;
pub const DEFAULT_BG_KEEP_FRACTION: f64 = 0.95;

impl Default for Counts {
    fn default() -> Self {
        Counts {
            fg_per_template: 500,
            fg_keep: None,
            fg_keep_fraction: None,
            bg_per_template: 600,
            bg_keep: None,
            bg_keep_fraction: None,
            bg_per_caption: 80,
            bg_keep_per_caption: 30,
            captions_per_cdi: 2,
            target_size: 60_000,
        }
    }
}

fn keep_policy(k: Option<usize>, f: Option<f64>, default: SelectionPolicy, what: &str) -> Result<SelectionPolicy> {
    let policy = match (k, f) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(format!(
                "{what}: set either the keep count or the keep fraction, not both"
            )))
        }
        (Some(k), None) => SelectionPolicy::keep_k(k),
        (None, Some(f)) => SelectionPolicy::keep_fraction(f),
        (None, None) => default,
    };
    policy.validate().map_err(|e| Error::Config(format!("{what}: {e}")))?;
    Ok(policy)
}

impl Counts {
    pub fn fg_policy(&self) -> Result<SelectionPolicy> {
        keep_policy(self.fg_keep, self.fg_keep_fraction, SelectionPolicy::keep_k(DEFAULT_FG_KEEP), "foreground")
    }

    pub fn bg_policy(&self) -> Result<SelectionPolicy> {
        keep_policy(
            self.bg_keep,
            self.bg_keep_fraction,
            SelectionPolicy::keep_fraction(DEFAULT_BG_KEEP_FRACTION),
            "background",
        )
    }

    pub fn caption_policy(&self) -> SelectionPolicy {
        SelectionPolicy::keep_k(self.bg_keep_per_caption)
    }

    pub fn validate(&self) -> Result<()> {
        self.fg_policy()?;
        self.bg_policy()?;
        let positive = [
            ("fg_per_template", self.fg_per_template as usize),
            ("bg_per_template", self.bg_per_template as usize),
            ("bg_per_caption", self.bg_per_caption as usize),
            ("bg_keep_per_caption", self.bg_keep_per_caption),
            ("captions_per_cdi", self.captions_per_cdi as usize),
            ("target_size", self.target_size),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("counts.{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageSizes {
    pub foreground: u32,
    pub background: u32,
}

impl Default for ImageSizes {
    fn default() -> Self {
        ImageSizes { foreground: 512, background: 512 }
    }
}

/// Ranking knobs shared by every filter; keep counts live in [`Counts`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub class_penalty_weight: f64,
    pub class_prompt_pattern: String,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            class_penalty_weight: 1.0,
            class_prompt_pattern: DEFAULT_CLASS_PROMPT.to_string(),
        }
    }
}

impl SelectionConfig {
    pub fn apply(&self, policy: SelectionPolicy) -> SelectionPolicy {
        policy
            .with_weight(self.class_penalty_weight)
            .with_class_prompt(self.class_prompt_pattern.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Template manifest replacing the bundled one.
    pub templates: Option<PathBuf>,
    pub background_overrides: Option<PathBuf>,
    /// Use "empty kitchen" for background template 1.
    pub corrected_backgrounds: bool,
    /// Caption edits applied before context extraction.
    pub edit_rules: Vec<EditRule>,
    /// Prompt variants per context phrase (1..=3).
    pub per_phrase: usize,
    /// Noun list replacing the bundled lexicon.
    pub lexicon: Option<PathBuf>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            templates: None,
            background_overrides: None,
            corrected_backgrounds: false,
            edit_rules: Vec::new(),
            per_phrase: 1,
            lexicon: None,
        }
    }
}

/// A real COCO dataset used by the `syn_fg` and `syn_plus_real` recipes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealData {
    pub annotations: PathBuf,
    pub images: PathBuf,
    #[serde(default = "one")]
    pub real_fraction: f64,
    /// Cut the real objects out and add them to the foreground pool.
    /// Defaults to `false` for `syn_fg` and `true` for `syn_plus_real`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub include_real_foreground_pastes: Option<bool>,
    /// Dataset mixed into the output; defaults to the one above.
    #[serde(default)]
    pub mix: Option<RealSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealSource {
    pub annotations: PathBuf,
    pub images: PathBuf,
}

fn one() -> f64 {
    1.0
}

impl RealData {
    pub fn real_foreground_pastes(&self, recipe: Recipe) -> bool {
        self.include_real_foreground_pastes.unwrap_or(recipe == Recipe::SynPlusReal)
    }

    pub fn mix_source(&self) -> RealSource {
        self.mix.clone().unwrap_or(RealSource {
            annotations: self.annotations.clone(),
            images: self.images.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub labels: Vec<String>,
    #[serde(default)]
    pub recipe: Recipe,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub cdi_dir: Option<PathBuf>,
    #[serde(default)]
    pub real: Option<RealData>,
    #[serde(default)]
    pub counts: Counts,
    #[serde(default)]
    pub image_size: ImageSizes,
    #[serde(default)]
    pub augment: AugmentParams,
    #[serde(default)]
    pub extraction: ExtractionParams,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub prompts: PromptConfig,
    #[serde(default)]
    pub gateway: GatewayConfig,
    /// Worker threads; defaults to the number of CPUs.
    #[serde(default)]
    pub workers: Option<usize>,
}

impl PipelineConfig {
    pub fn new<S: AsRef<str>>(labels: &[S]) -> Self {
        PipelineConfig {
            labels: labels.iter().map(|s| s.as_ref().to_string()).collect(),
            recipe: Recipe::PureSyn,
            master_seed: 0,
            cdi_dir: None,
            real: None,
            counts: Counts::default(),
            image_size: ImageSizes::default(),
            augment: AugmentParams::default(),
            extraction: ExtractionParams::default(),
            selection: SelectionConfig::default(),
            prompts: PromptConfig::default(),
            gateway: GatewayConfig::default(),
            workers: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(config)
    }

    /// Make relative paths relative to `base`, the directory of the file
    /// the configuration was read from.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.cdi_dir, &mut self.prompts.templates, &mut self.prompts.background_overrides, &mut self.prompts.lexicon]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        if let Some(real) = &mut self.real {
            fix(&mut real.annotations);
            fix(&mut real.images);
            if let Some(mix) = &mut real.mix {
                fix(&mut mix.annotations);
                fix(&mut mix.images);
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn class_labels(&self) -> Result<Vec<ClassLabel>> {
        if self.labels.is_empty() {
            return Err(Error::Config("at least one label is required".into()));
        }
        label_set(&self.labels).map_err(|e| Error::Config(e.to_string()))
    }

    /// Every error here maps to exit code 2.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.class_labels()?;
        self.counts.validate()?;
        self.augment.validate().map_err(cfg)?;
        self.extraction.validate().map_err(cfg)?;
        self.selection.apply(SelectionPolicy::keep_k(1)).validate().map_err(cfg)?;
        for rule in &self.prompts.edit_rules {
            rule.validate().map_err(cfg)?;
        }
        if !(1..=3).contains(&self.prompts.per_phrase) {
            return Err(Error::Config("prompts.per_phrase must be in 1..=3".into()));
        }
        for side in [self.image_size.foreground, self.image_size.background] {
            if !(64..=2048).contains(&side) || side % 8 != 0 {
                return Err(Error::Config(format!("image sizes must be multiples of 8 in [64, 2048], got {side}")));
            }
        }
        match (&self.recipe, &self.real) {
            (Recipe::SynFg | Recipe::SynPlusReal, None) => {
                return Err(Error::Config(format!("recipe {:?} needs a [real] dataset", self.recipe)))
            }
            (_, Some(real)) if !(0.0..=1.0).contains(&real.real_fraction) => {
                return Err(Error::Config("real.real_fraction must be in [0, 1]".into()))
            }
            _ => {}
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }
}
