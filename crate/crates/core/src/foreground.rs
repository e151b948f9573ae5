//! Foreground cutouts from plain-background renders.
//!
//! The background colour is estimated from a ring along the image border,
//! everything connected to the border that stays within a colour tolerance
//! of it is background, and the remainder is cleaned with a small closing
//! and opening before keeping the largest component.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use image::{Rgba, RgbaImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::gateway::{Client, PngBytes};
use crate::prompting::{ClassLabel, TemplateSet};
use crate::rng::derive_seed;
use crate::selection::{rank_with_report, score_batch, CandidateId, RankedRow, SelectionPolicy};
use crate::mask::{border_positions, mask_to_bbox, ring_positions, BBox, BinaryMask};
use crate::{imageio, Error, Result};

pub const MIN_SIDE: u32 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionParams {
    /// Per-channel tolerance around the background colour, in [0, 1].
    pub chroma_threshold: f64,
    /// Thickness of the border ring used to estimate the background.
    pub border_ring: u32,
    pub morph_radius: u32,
    pub min_area: f64,
    pub max_area: f64,
    /// Assets touching more than this share of the image border are rejected.
    pub max_border_touch: f64,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        ExtractionParams {
            chroma_threshold: 30.0 / 255.0,
            border_ring: 8,
            morph_radius: 2,
            min_area: 0.02,
            max_area: 0.80,
            max_border_touch: 0.25,
        }
    }
}

impl ExtractionParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.chroma_threshold > 0.0
            && self.chroma_threshold < 1.0
            && self.border_ring >= 1
            && 0.0 < self.min_area
            && self.min_area < self.max_area
            && self.max_area <= 1.0
            && (0.0..=1.0).contains(&self.max_border_touch);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("bad extraction parameters {self:?}")))
        }
    }

    fn min_side(&self) -> u32 {
        MIN_SIDE.max(2 * self.border_ring + 1)
    }
}

/// Per-channel median colour and the largest per-channel standard
/// deviation over the border ring.
pub fn estimate_background(image: &RgbaImage, border_ring: u32) -> ([u8; 3], f64) {
    let (w, h) = image.dimensions();
    let mut channels: [Vec<u8>; 3] = Default::default();
    for (x, y) in ring_positions(w, h, border_ring) {
        let p = image.get_pixel(x, y);
        for c in 0..3 {
            channels[c].push(p[c]);
        }
    }
    let mut colour = [0u8; 3];
    let mut worst = 0.0f64;
    for c in 0..3 {
        let values = &mut channels[c];
        let n = values.len() as f64;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        worst = worst.max(var.sqrt());
        values.sort_unstable();
        colour[c] = values[values.len() / 2];
    }
    (colour, worst)
}

/// Foreground mask of a single object rendered on a uniform background.
pub fn extract_mask(image: &RgbaImage, params: &ExtractionParams) -> Result<BinaryMask> {
    params.validate()?;
    let (w, h) = image.dimensions();
    let min = params.min_side();
    if w < min || h < min {
        return Err(Error::ImageTooSmall { width: w, height: h, min });
    }
    let (bg, std_dev) = estimate_background(image, params.border_ring);
    let limit = 3.0 * params.chroma_threshold * 255.0;
    if std_dev > limit {
        return Err(Error::BackgroundNotUniform { std_dev, limit });
    }
    let tol = (params.chroma_threshold * 255.0).round() as i32;
    let near_bg = |p: &Rgba<u8>| (0..3).all(|c| (p[c] as i32 - bg[c] as i32).abs() <= tol);

    let mut background = BinaryMask::new(w, h);
    let mut queue = VecDeque::new();
    for (x, y) in border_positions(w, h) {
        if near_bg(image.get_pixel(x, y)) && !background.get(x, y) {
            background.set(x, y, true);
            queue.push_back((x, y));
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        let neighbours = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        for (nx, ny) in neighbours {
            if nx < w && ny < h && !background.get(nx, ny) && near_bg(image.get_pixel(nx, ny)) {
                background.set(nx, ny, true);
                queue.push_back((nx, ny));
            }
        }
    }

    let mask = background
        .invert()
        .close(params.morph_radius)
        .open(params.morph_radius)
        .largest_component();
    let fraction = mask.area_fraction();
    if mask.count() == 0 || fraction < params.min_area {
        return Err(Error::NoForeground { area_fraction: fraction });
    }
    if fraction > params.max_area {
        return Err(Error::OversizedForeground { area_fraction: fraction });
    }
    Ok(mask)
}

/// Share of the outermost pixel ring covered by the mask.
pub fn border_touch(mask: &BinaryMask) -> f64 {
    let ring = border_positions(mask.width(), mask.height()).count();
    if ring == 0 {
        return 0.0;
    }
    mask.border_count() as f64 / ring as f64
}

/// Where an asset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetProvenance {
    pub label: String,
    /// Foreground template id, `None` for cutouts taken from real data.
    pub template_id: Option<usize>,
    pub seed: u64,
    pub index: u32,
    pub prompt: String,
    /// Box of the cutout in the source image.
    pub source_bbox: BBox,
    pub source_width: u32,
    pub source_height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// A cutout cropped to its mask's bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundAsset {
    pub image: RgbaImage,
    pub mask: BinaryMask,
    pub provenance: AssetProvenance,
}

impl ForegroundAsset {
    /// Crop `image` to the box of `mask`. Alpha is set from the mask.
    pub fn from_masked(image: &RgbaImage, mask: &BinaryMask, provenance: AssetProvenance) -> Result<Self> {
        if image.dimensions() != (mask.width(), mask.height()) {
            return Err(Error::InvalidParams("image and mask sizes differ".into()));
        }
        let bbox = mask_to_bbox(mask)?;
        let cropped_mask = mask.crop(bbox);
        let cropped = RgbaImage::from_fn(bbox.w, bbox.h, |x, y| {
            let mut p = *image.get_pixel(bbox.x + x, bbox.y + y);
            p[3] = if cropped_mask.get(x, y) { 255 } else { 0 };
            p
        });
        let provenance = AssetProvenance {
            source_bbox: bbox,
            source_width: image.width(),
            source_height: image.height(),
            ..provenance
        };
        Ok(ForegroundAsset {
            image: cropped,
            mask: cropped_mask,
            provenance,
        })
    }

    pub fn label(&self) -> &str {
        &self.provenance.label
    }

    pub fn file_stem(&self) -> String {
        format!("{}_{}", self.provenance.seed, self.provenance.index)
    }

    /// Directory of this asset below a store root.
    pub fn relative_dir(&self) -> PathBuf {
        let template = match self.provenance.template_id {
            Some(t) => t.to_string(),
            None => "real".to_string(),
        };
        PathBuf::from("fg").join(label_dir(&self.provenance.label)).join(template)
    }
}

pub(crate) fn label_dir(label: &str) -> String {
    label.replace(' ', "_")
}

/// Decode a render, extract its mask and check the asset is usable.
pub fn extract_asset(png: &PngBytes, provenance: AssetProvenance, params: &ExtractionParams) -> Result<ForegroundAsset> {
    let decoded = png.decode()?;
    let mask = extract_mask(&decoded.image, params)?;
    let touch = border_touch(&mask);
    if touch >= params.max_border_touch {
        return Err(Error::OversizedForeground { area_fraction: mask.area_fraction() });
    }
    ForegroundAsset::from_masked(&decoded.image, &mask, provenance)
}

/// Directory-backed asset store: `fg/<label>/<template>/<seed>_<index>.png`
/// (RGBA, alpha is the mask) with a `.json` provenance file beside it.
#[derive(Debug, Clone)]
pub struct AssetStore {
    root: PathBuf,
}

impl AssetStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        AssetStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn save(&self, asset: &ForegroundAsset) -> Result<PathBuf> {
        let dir = self.root.join(asset.relative_dir());
        let png = dir.join(format!("{}.png", asset.file_stem()));
        imageio::write_file(&png, &imageio::encode_rgba(&asset.image, &[])?)?;
        let json = serde_json::to_vec_pretty(&asset.provenance)?;
        imageio::write_file(&png.with_extension("json"), &json)?;
        Ok(png)
    }

    /// Image paths of every asset under the store, sorted.
    pub fn paths(&self) -> Result<Vec<PathBuf>> {
        let mut pngs = Vec::new();
        collect_pngs(&self.root.join("fg"), &mut pngs)?;
        pngs.sort();
        Ok(pngs)
    }

    /// Every asset under the store, sorted by path.
    pub fn load_all(&self) -> Result<Vec<ForegroundAsset>> {
        self.paths()?.iter().map(|p| load_asset(p)).collect()
    }
}

fn collect_pngs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_pngs(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "png") {
            out.push(path);
        }
    }
    Ok(())
}

pub fn load_asset(png: &Path) -> Result<ForegroundAsset> {
    let image = imageio::read_png(png)?.image;
    let json_path = png.with_extension("json");
    let text = std::fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let provenance: AssetProvenance = serde_json::from_slice(&text)?;
    let mask = BinaryMask::from_fn(image.width(), image.height(), |x, y| image.get_pixel(x, y)[3] >= 128);
    Ok(ForegroundAsset { image, mask, provenance })
}

/// Sizes for one foreground pool build.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolSpec {
    pub per_template_n: u32,
    pub policy: SelectionPolicy,
    pub width: u32,
    pub height: u32,
}

/// Assets plus the reasons individual candidates were dropped.
#[derive(Debug, Clone, Default)]
pub struct PoolReport {
    pub assets: Vec<ForegroundAsset>,
    pub failures: Vec<String>,
    /// Selection rows of every candidate, in rank order per batch.
    pub rows: Vec<RankedRow>,
}

/// Seed of the `(label, template)` foreground batch.
pub fn batch_seed(master: u64, label: &str, template_id: usize) -> u64 {
    derive_seed(master, &[&"fg", &label, &template_id])
}

/// Score, select and extract one `(label, template)` batch. Extraction
/// failures are collected; the batch fails only when nothing survives.
#[allow(clippy::too_many_arguments)]
pub fn filter_foreground_batch(
    label: &ClassLabel,
    template_id: usize,
    prompt: &str,
    candidates: Vec<(CandidateId, PngBytes)>,
    interest: &[ClassLabel],
    policy: &SelectionPolicy,
    params: &ExtractionParams,
    gateway: &Client,
) -> Result<PoolReport> {
    let scored = score_batch(candidates, prompt, Some(&label.name), interest, policy, gateway)?;
    let (kept, rows) = rank_with_report(scored, policy)?;
    let results: Vec<_> = kept
        .par_iter()
        .map(|c| {
            let provenance = AssetProvenance {
                label: label.name.clone(),
                template_id: Some(template_id),
                seed: c.id.seed,
                index: c.id.index,
                prompt: prompt.to_string(),
                source_bbox: BBox { x: 0, y: 0, w: 0, h: 0 },
                source_width: 0,
                source_height: 0,
                score: Some(c.faithfulness),
            };
            extract_asset(&c.image, provenance, params).map_err(|e| format!("{prompt} #{}: {e}", c.id.index))
        })
        .collect();
    let mut report = PoolReport { rows, ..Default::default() };
    for r in results {
        match r {
            Ok(asset) => report.assets.push(asset),
            Err(msg) => {
                warn!(stage = "extract", reason = %msg, "foreground dropped");
                report.failures.push(msg);
            }
        }
    }
    if report.assets.is_empty() {
        return Err(Error::Pipeline(format!(
            "every candidate of foreground batch {:?} failed extraction",
            prompt
        )));
    }
    Ok(report)
}

/// Generate, select and extract foregrounds for every label and template.
pub fn build_foreground_pool(
    labels: &[ClassLabel],
    templates: &TemplateSet,
    spec: &PoolSpec,
    params: &ExtractionParams,
    gateway: &Client,
    master_seed: u64,
) -> Result<PoolReport> {
    if labels.is_empty() {
        return Err(Error::InvalidParams("foreground pool needs at least one label".into()));
    }
    spec.policy.validate()?;
    let mut pool = PoolReport::default();
    for label in labels {
        for template in templates.foreground() {
            let prompt = templates.verbalize_foreground(label, template.id)?;
            let seed = batch_seed(master_seed, &label.name, template.id);
            let images = gateway.generate_many(&prompt, spec.per_template_n, seed, spec.width, spec.height)?;
            let candidates = images
                .into_iter()
                .enumerate()
                .map(|(i, png)| (CandidateId { seed, index: i as u32 }, png))
                .collect();
            let report = filter_foreground_batch(label, template.id, &prompt, candidates, labels, &spec.policy, params, gateway)?;
            pool.assets.extend(report.assets);
            pool.failures.extend(report.failures);
            pool.rows.extend(report.rows);
        }
    }
    Ok(pool)
}
