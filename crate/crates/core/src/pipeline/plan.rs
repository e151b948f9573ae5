use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, Recipe};
use crate::prompting::TemplateSet;
use crate::selection::fraction_count;
use crate::Result;

/// Sizes of the real inputs a recipe draws on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanInputs {
    /// Context description images.
    pub cdis: usize,
    /// Images of the real dataset used as backgrounds and cutout source.
    pub real_images: usize,
    /// Annotated objects in those images.
    pub real_foregrounds: usize,
    /// Images of the dataset mixed into the output.
    pub mix_images: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForegroundCounts {
    pub synthetic: usize,
    pub real: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackgroundCounts {
    pub template: usize,
    pub context: usize,
    pub real: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSize {
    pub synthetic: usize,
    pub real: usize,
}

/// Nominal pool and dataset sizes of a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountPlan {
    pub recipe: Recipe,
    pub real_images: usize,
    pub foregrounds: ForegroundCounts,
    pub backgrounds: BackgroundCounts,
    pub training: TrainingSize,
}

impl ForegroundCounts {
    pub fn total(&self) -> usize {
        self.synthetic + self.real
    }
}

impl BackgroundCounts {
    pub fn total(&self) -> usize {
        self.template + self.context + self.real
    }
}

impl TrainingSize {
    pub fn total(&self) -> usize {
        self.synthetic + self.real
    }
}

/// `24000` as `24k`, other values unchanged.
fn short(n: usize) -> String {
    if n >= 1000 && n.is_multiple_of(1000) {
        format!("{}k", n / 1000)
    } else {
        n.to_string()
    }
}

fn sum(parts: &[usize]) -> String {
    let shown: Vec<String> = parts.iter().filter(|&&n| n > 0).map(|&n| short(n)).collect();
    if shown.is_empty() {
        "-".into()
    } else {
        shown.join("+")
    }
}

impl fmt::Display for ForegroundCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&sum(&[self.synthetic, self.real]))
    }
}

impl fmt::Display for BackgroundCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&sum(&[self.template, self.context, self.real]))
    }
}

impl fmt::Display for TrainingSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&sum(&[self.synthetic, self.real]).replace('+', " + "))
    }
}

/// Pool sizes implied by the keep policies, assuming every caption yields
/// at least one prompt and every kept foreground extracts cleanly.
pub fn plan_counts(config: &PipelineConfig, templates: &TemplateSet, inputs: PlanInputs) -> Result<CountPlan> {
    config.validate()?;
    let c = &config.counts;
    let labels = config.labels.len();
    let fg_keep = c.fg_policy()?.selected_count(c.fg_per_template as usize);
    let bg_keep = c.bg_policy()?.selected_count(c.bg_per_template as usize);
    let caption_keep = c.caption_policy().selected_count(c.bg_per_caption as usize);
    let uses_real = config.recipe != Recipe::PureSyn;
    let synthetic_backgrounds = config.recipe != Recipe::SynFg;
    let real_pastes = uses_real && config.real.as_ref().is_some_and(|r| r.real_foreground_pastes(config.recipe));
    let mixed = match (&config.recipe, &config.real) {
        (Recipe::SynPlusReal, Some(real)) => fraction_count(real.real_fraction, inputs.mix_images),
        _ => 0,
    };
    Ok(CountPlan {
        recipe: config.recipe,
        real_images: inputs.cdis.max(if uses_real { inputs.real_images } else { 0 }).max(mixed),
        foregrounds: ForegroundCounts {
            synthetic: labels * templates.foreground().len() * fg_keep,
            real: if real_pastes { inputs.real_foregrounds } else { 0 },
        },
        backgrounds: BackgroundCounts {
            template: if synthetic_backgrounds { templates.background().len() * bg_keep } else { 0 },
            context: if synthetic_backgrounds { inputs.cdis * c.captions_per_cdi as usize * caption_keep } else { 0 },
            real: if uses_real { inputs.real_images } else { 0 },
        },
        training: TrainingSize { synthetic: c.target_size, real: mixed },
    })
}
