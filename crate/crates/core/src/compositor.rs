//! Cut-paste composition.
//!
//! Foreground assets are rotated, scaled and flipped, pasted onto a
//! background with a Gaussian-feathered boundary, and the per-instance
//! masks are kept consistent with the paste order: a later paste hides
//! whatever it covers. Labels stay binary, only pixels are feathered.

use std::borrow::Cow;
use std::collections::VecDeque;
use std::sync::Arc;

use image::{Rgb, RgbImage, Rgba, RgbaImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::foreground::ForegroundAsset;
use crate::mask::{disk_offsets, mask_to_bbox, BBox, BinaryMask};
use crate::prompting::ClassLabel;
use crate::rng::{derive_seed, stream};
use crate::{Error, Result};

/// Masks smaller than this after augmentation are rejected.
pub const MIN_AUGMENTED_AREA: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    /// Rotation is drawn from `[-rotation_range, rotation_range]` degrees.
    pub rotation_range: f64,
    /// Object longer side as a fraction of the background's shorter side.
    pub scale_range: [f64; 2],
    pub flip_prob: f64,
    pub blur_sigma: f64,
    pub pastes_per_bg: usize,
    pub min_visible_fraction: f64,
    pub max_place_attempts: usize,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            rotation_range: 30.0,
            scale_range: [0.15, 0.50],
            flip_prob: 0.5,
            blur_sigma: 2.0,
            pastes_per_bg: 4,
            min_visible_fraction: 0.25,
            max_place_attempts: 10,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        let ok = (0.0..=180.0).contains(&self.rotation_range)
            && 0.0 < lo
            && lo < hi
            && hi <= 1.0
            && (0.0..=1.0).contains(&self.flip_prob)
            && self.blur_sigma.is_finite()
            && self.blur_sigma >= 0.0
            && self.pastes_per_bg >= 1
            && self.min_visible_fraction > 0.0
            && self.min_visible_fraction <= 1.0
            && self.max_place_attempts >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("bad augmentation parameters {self:?}")))
        }
    }
}

/// Geometric part of an augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub rotation_deg: f64,
    /// Longer side of the transformed mask, in pixels.
    pub longer_side: f64,
    pub flip: bool,
}

impl Transform {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, bg_short_side: u32, params: &AugmentParams) -> Self {
        let r = params.rotation_range;
        let rotation_deg = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let [lo, hi] = params.scale_range;
        let s = rng.random_range(lo..=hi);
        let flip = rng.random_bool(params.flip_prob);
        Transform {
            rotation_deg,
            longer_side: s * bg_short_side as f64,
            flip,
        }
    }
}

/// Rotate about the mask centroid, scale to the requested longer side and
/// optionally mirror. Nearest-neighbour for the mask, bilinear over mask
/// pixels for colour. The result is cropped to its mask.
pub fn transform_asset(asset: &ForegroundAsset, t: Transform) -> Result<ForegroundAsset> {
    let (cx, cy) = asset.mask.centroid().ok_or(Error::EmptyMask)?;
    let (sin, cos) = t.rotation_deg.to_radians().sin_cos();
    let rot = |x: f64, y: f64| (x * cos - y * sin, x * sin + y * cos);

    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in asset.mask.iter_set() {
        let (u, v) = rot(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        x0 = x0.min(u);
        x1 = x1.max(u);
        y0 = y0.min(v);
        y1 = y1.max(v);
    }
    // a rotated unit pixel spans |cos| + |sin| along each axis
    let footprint = cos.abs() + sin.abs();
    let rotated_longer = (x1 - x0).max(y1 - y0) + footprint;
    let k = t.longer_side / rotated_longer;
    if !(k.is_finite() && k > 0.0) {
        return Err(Error::DegenerateTransform { area: 0 });
    }

    let (w, h) = (asset.mask.width() as f64, asset.mask.height() as f64);
    let corners = [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)];
    let (mut qx0, mut qx1, mut qy0, mut qy1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in corners {
        let (u, v) = rot(x - cx, y - cy);
        qx0 = qx0.min(k * u);
        qx1 = qx1.max(k * u);
        qy0 = qy0.min(k * v);
        qy1 = qy1.max(k * v);
    }
    let ox = qx0.floor() - 1.0;
    let oy = qy0.floor() - 1.0;
    let out_w = (qx1.ceil() + 1.0 - ox) as u32;
    let out_h = (qy1.ceil() + 1.0 - oy) as u32;

    // inverse map: p = R(-θ)(q / k) + c
    let inv = |qx: f64, qy: f64| {
        let (u, v) = (qx / k, qy / k);
        (u * cos + v * sin + cx, -u * sin + v * cos + cy)
    };
    let mut mask = BinaryMask::new(out_w, out_h);
    let mut image = RgbaImage::new(out_w, out_h);
    for j in 0..out_h {
        for i in 0..out_w {
            let (px, py) = inv(ox + i as f64 + 0.5, oy + j as f64 + 0.5);
            let (nx, ny) = (px.floor() as i64, py.floor() as i64);
            if !asset.mask.get_signed(nx, ny) {
                continue;
            }
            mask.set(i, j, true);
            image.put_pixel(i, j, sample_bilinear(asset, px, py, (nx as u32, ny as u32)));
        }
    }
    if t.flip {
        mask = BinaryMask::from_fn(out_w, out_h, |x, y| mask.get(out_w - 1 - x, y));
        image::imageops::flip_horizontal_in_place(&mut image);
    }
    let area = mask.count();
    if area < MIN_AUGMENTED_AREA {
        return Err(Error::DegenerateTransform { area });
    }
    let bbox = mask_to_bbox(&mask)?;
    let image = image::imageops::crop_imm(&image, bbox.x, bbox.y, bbox.w, bbox.h).to_image();
    Ok(ForegroundAsset {
        image,
        mask: mask.crop(bbox),
        provenance: asset.provenance.clone(),
    })
}

/// Bilinear colour over the four neighbours that are inside the mask,
/// renormalised; falls back to the nearest pixel.
fn sample_bilinear(asset: &ForegroundAsset, px: f64, py: f64, nearest: (u32, u32)) -> Rgba<u8> {
    let (u, v) = (px - 0.5, py - 0.5);
    let (x0, y0) = (u.floor() as i64, v.floor() as i64);
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let mut acc = [0.0f64; 3];
    let mut total = 0.0;
    for (dx, dy, wgt) in [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ] {
        let (x, y) = (x0 + dx, y0 + dy);
        if wgt > 0.0 && asset.mask.get_signed(x, y) {
            let p = asset.image.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                acc[c] += wgt * p[c] as f64;
            }
            total += wgt;
        }
    }
    if total <= 0.0 {
        let p = asset.image.get_pixel(nearest.0, nearest.1);
        return Rgba([p[0], p[1], p[2], 255]);
    }
    let ch = |c: usize| (acc[c] / total).round().clamp(0.0, 255.0) as u8;
    Rgba([ch(0), ch(1), ch(2), 255])
}

/// Sample a transform and apply it.
pub fn augment_foreground<R: Rng + ?Sized>(
    asset: &ForegroundAsset,
    bg_short_side: u32,
    rng: &mut R,
    params: &AugmentParams,
) -> Result<ForegroundAsset> {
    transform_asset(asset, Transform::sample(rng, bg_short_side, params))
}

/// Radius of the feathering kernel for `sigma`.
pub fn kernel_radius(sigma: f64) -> u32 {
    if sigma <= 0.0 {
        0
    } else {
        (2.0 * sigma).ceil() as u32
    }
}

/// Normalised Gaussian weights over the disk of radius `⌈2σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<((i64, i64), f64)> {
    let r = kernel_radius(sigma);
    if r == 0 {
        return vec![((0, 0), 1.0)];
    }
    let raw: Vec<_> = disk_offsets(r)
        .into_iter()
        .map(|(dx, dy)| ((dx, dy), (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp()))
        .collect();
    let sum: f64 = raw.iter().map(|(_, w)| w).sum();
    raw.into_iter().map(|(o, w)| (o, w / sum)).collect()
}

/// Paste `asset` with its top-left corner at `(x, y)` and return the
/// placed binary mask, canvas-sized.
pub fn paste(canvas: &mut RgbImage, asset: &ForegroundAsset, x: i64, y: i64, blur_sigma: f64) -> Result<BinaryMask> {
    let (cw, ch) = canvas.dimensions();
    let (aw, ah) = (asset.mask.width(), asset.mask.height());
    if x < 0 || y < 0 || x + aw as i64 > cw as i64 || y + ah as i64 > ch as i64 {
        return Err(Error::OutOfBounds { x, y, width: aw, height: ah });
    }
    let placed = asset.mask.placed(cw, ch, x, y);
    let r = kernel_radius(blur_sigma);
    if r == 0 {
        for (px, py) in asset.mask.iter_set() {
            let p = asset.image.get_pixel(px, py);
            canvas.put_pixel(x as u32 + px, y as u32 + py, Rgb([p[0], p[1], p[2]]));
        }
        return Ok(placed);
    }

    // work on a local grid padded by the kernel radius
    let pad = r as i64;
    let (lw, lh) = (aw + 2 * r, ah + 2 * r);
    let local = asset.mask.placed(lw, lh, pad, pad);
    let colours = extend_colours(asset, &local, r);
    let support = local.dilate(r);
    let inner = local.erode(r);
    let kernel = gaussian_kernel(blur_sigma);
    for (lx, ly) in support.iter_set() {
        let (gx, gy) = (x + lx as i64 - pad, y + ly as i64 - pad);
        if gx < 0 || gy < 0 || gx >= cw as i64 || gy >= ch as i64 {
            continue;
        }
        let alpha = if inner.get(lx, ly) {
            1.0
        } else {
            kernel
                .iter()
                .filter(|((dx, dy), _)| local.get_signed(lx as i64 + dx, ly as i64 + dy))
                .map(|(_, w)| w)
                .sum::<f64>()
                .min(1.0)
        };
        if alpha <= 0.0 {
            continue;
        }
        let fg = colours[(ly * lw + lx) as usize];
        let bg = canvas.get_pixel_mut(gx as u32, gy as u32);
        for c in 0..3 {
            bg[c] = (alpha * fg[c] as f64 + (1.0 - alpha) * bg[c] as f64).round() as u8;
        }
    }
    Ok(placed)
}

/// Asset colours on the padded local grid; pixels outside the mask take
/// the colour of the nearest mask pixel (4-connected BFS), up to `r` away.
fn extend_colours(asset: &ForegroundAsset, local: &BinaryMask, r: u32) -> Vec<[u8; 3]> {
    let (lw, lh) = (local.width(), local.height());
    let mut colours = vec![[0u8; 3]; (lw * lh) as usize];
    let mut seen = local.clone();
    let mut queue = VecDeque::new();
    for (lx, ly) in local.iter_set() {
        let p = asset.image.get_pixel(lx - r, ly - r);
        colours[(ly * lw + lx) as usize] = [p[0], p[1], p[2]];
        queue.push_back((lx, ly));
    }
    while let Some((x, y)) = queue.pop_front() {
        let c = colours[(y * lw + x) as usize];
        for (nx, ny) in [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)] {
            if nx < lw && ny < lh && !seen.get(nx, ny) {
                seen.set(nx, ny, true);
                colours[(ny * lw + nx) as usize] = c;
                queue.push_back((nx, ny));
            }
        }
    }
    colours
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub category_id: u32,
    pub label: String,
    /// Canvas-sized, after occlusion.
    pub mask: BinaryMask,
    pub bbox: BBox,
    pub visible_fraction: f64,
    pub source_asset: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleProvenance {
    pub background: String,
    pub assets: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeSample {
    pub image: RgbImage,
    pub instances: Vec<Instance>,
    pub provenance: SampleProvenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundAsset {
    pub id: String,
    pub image: RgbImage,
    /// Objects already present in the image, kept as labels under any pastes.
    pub base_layers: Vec<Layer>,
}

impl BackgroundAsset {
    pub fn new(id: impl Into<String>, image: RgbImage) -> Self {
        BackgroundAsset {
            id: id.into(),
            image,
            base_layers: Vec::new(),
        }
    }
}

/// One pasted mask before occlusion is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub category_id: u32,
    pub label: String,
    pub source_asset: String,
    pub mask: BinaryMask,
}

/// Apply paste-order occlusion: every layer loses the pixels of all later
/// layers. Layers whose visible share drops below `min_visible` (or to
/// nothing) are dropped.
pub fn layer_instances(layers: Vec<Layer>, min_visible: f64) -> Vec<Instance> {
    let mut visible: Vec<BinaryMask> = layers.iter().map(|l| l.mask.clone()).collect();
    for i in 0..layers.len() {
        for later in &layers[i + 1..] {
            visible[i].subtract(&later.mask);
        }
    }
    layers
        .into_iter()
        .zip(visible)
        .filter_map(|(layer, mask)| {
            let pasted = layer.mask.count();
            let shown = mask.count();
            if pasted == 0 || shown == 0 {
                return None;
            }
            let visible_fraction = shown as f64 / pasted as f64;
            if visible_fraction < min_visible {
                return None;
            }
            let bbox = mask_to_bbox(&mask).ok()?;
            Some(Instance {
                category_id: layer.category_id,
                label: layer.label,
                mask,
                bbox,
                visible_fraction,
                source_asset: layer.source_asset,
            })
        })
        .collect()
}

/// Identifier of an asset inside a pool.
pub fn asset_id(asset: &ForegroundAsset) -> String {
    let p = &asset.provenance;
    let template = p.template_id.map_or("real".to_string(), |t| t.to_string());
    format!("{}/{}/{}_{}", p.label, template, p.seed, p.index)
}

fn category_of(labels: &[ClassLabel], name: &str) -> Result<u32> {
    labels
        .iter()
        .find(|l| l.name == name)
        .map(|l| l.id)
        .ok_or_else(|| Error::InvalidParams(format!("asset label {name:?} is not a configured class")))
}

/// Paste `assets` in order onto a copy of `background`. Returns the
/// sample plus the pre-occlusion layers.
pub fn compose_traced<R: Rng + ?Sized>(
    background: &BackgroundAsset,
    assets: &[&ForegroundAsset],
    labels: &[ClassLabel],
    rng: &mut R,
    params: &AugmentParams,
    seed: u64,
) -> Result<(CompositeSample, Vec<Layer>)> {
    params.validate()?;
    let (w, h) = background.image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::NoBackground);
    }
    let short = w.min(h);
    let mut canvas = background.image.clone();
    let mut layers = background.base_layers.clone();
    for asset in assets {
        let category_id = category_of(labels, asset.label())?;
        for _ in 0..params.max_place_attempts {
            let moved = match augment_foreground(asset, short, rng, params) {
                Ok(a) => a,
                Err(Error::DegenerateTransform { .. }) => continue,
                Err(e) => return Err(e),
            };
            let (aw, ah) = (moved.mask.width(), moved.mask.height());
            if aw > w || ah > h {
                continue;
            }
            let x = rng.random_range(0..=(w - aw)) as i64;
            let y = rng.random_range(0..=(h - ah)) as i64;
            let mask = paste(&mut canvas, &moved, x, y, params.blur_sigma)?;
            layers.push(Layer {
                category_id,
                label: asset.label().to_string(),
                source_asset: asset_id(asset),
                mask,
            });
            break;
        }
    }
    let instances = layer_instances(layers.clone(), params.min_visible_fraction);
    let sample = CompositeSample {
        image: canvas,
        instances,
        provenance: SampleProvenance {
            background: background.id.clone(),
            assets: assets.iter().map(|a| asset_id(a)).collect(),
            seed,
        },
    };
    Ok((sample, layers))
}

pub fn compose_sample<R: Rng + ?Sized>(
    background: &BackgroundAsset,
    assets: &[&ForegroundAsset],
    labels: &[ClassLabel],
    rng: &mut R,
    params: &AugmentParams,
    seed: u64,
) -> Result<CompositeSample> {
    compose_traced(background, assets, labels, rng, params, seed).map(|(s, _)| s)
}

/// Which background and foregrounds one sample uses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub background: usize,
    pub foregrounds: Vec<usize>,
}

/// Backgrounds uniformly with replacement; foregrounds from a shuffled
/// cycle that is reshuffled only once every asset has been used.
pub fn plan_dataset(fg_count: usize, bg_count: usize, target: usize, pastes: usize, seed: u64) -> Result<Vec<SamplePlan>> {
    if fg_count == 0 {
        return Err(Error::EmptyPool("foreground"));
    }
    if bg_count == 0 {
        return Err(Error::EmptyPool("background"));
    }
    if target == 0 || pastes == 0 {
        return Err(Error::InvalidParams("target size and pastes per background must be >= 1".into()));
    }
    let mut rng = stream(seed, "plan", 0);
    let mut cycle: Vec<usize> = (0..fg_count).collect();
    let mut next = fg_count;
    let mut plans = Vec::with_capacity(target);
    for _ in 0..target {
        let background = rng.random_range(0..bg_count);
        let foregrounds = (0..pastes)
            .map(|_| {
                if next == fg_count {
                    cycle.shuffle(&mut rng);
                    next = 0;
                }
                next += 1;
                cycle[next - 1]
            })
            .collect();
        plans.push(SamplePlan { background, foregrounds });
    }
    Ok(plans)
}

/// Indexed asset collection. Lets large pools live on disk.
pub trait AssetPool<T: Clone>: Send + Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<Cow<'_, T>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Clone + Send + Sync> AssetPool<T> for Vec<T> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn get(&self, index: usize) -> Result<Cow<'_, T>> {
        self.as_slice()
            .get(index)
            .map(Cow::Borrowed)
            .ok_or_else(|| Error::InvalidParams(format!("pool index {index} out of range")))
    }
}

/// Shared inputs of a dataset build.
#[derive(Clone)]
pub struct Pools {
    pub foregrounds: Arc<dyn AssetPool<ForegroundAsset>>,
    pub backgrounds: Arc<dyn AssetPool<BackgroundAsset>>,
    pub labels: Arc<Vec<ClassLabel>>,
}

impl std::fmt::Debug for Pools {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pools")
            .field("foregrounds", &self.foregrounds.len())
            .field("backgrounds", &self.backgrounds.len())
            .field("labels", &self.labels)
            .finish()
    }
}

/// Compose sample `index` of a plan. Each sample draws from its own RNG
/// stream so the output does not depend on scheduling.
pub fn compose_planned(pools: &Pools, plan: &SamplePlan, index: usize, seed: u64, params: &AugmentParams) -> Result<CompositeSample> {
    let background = pools.backgrounds.get(plan.background)?;
    let owned: Vec<Cow<'_, ForegroundAsset>> =
        plan.foregrounds.iter().map(|&i| pools.foregrounds.get(i)).collect::<Result<_>>()?;
    let assets: Vec<&ForegroundAsset> = owned.iter().map(|a| a.as_ref()).collect();
    let sample_seed = derive_seed(seed, &[&"compose", &index]);
    let mut rng = stream(seed, "compose", index as u64);
    compose_sample(&background, &assets, &pools.labels, &mut rng, params, sample_seed)
}

/// Ordered stream of composed samples, built in parallel chunks.
pub struct DatasetStream {
    pools: Pools,
    plans: Vec<SamplePlan>,
    params: AugmentParams,
    seed: u64,
    next: usize,
    chunk: usize,
    ready: VecDeque<Result<CompositeSample>>,
}

impl DatasetStream {
    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    pub fn plans(&self) -> &[SamplePlan] {
        &self.plans
    }
}

impl Iterator for DatasetStream {
    type Item = Result<CompositeSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.ready.is_empty() && self.next < self.plans.len() {
            let end = (self.next + self.chunk).min(self.plans.len());
            let batch: Vec<_> = (self.next..end)
                .into_par_iter()
                .map(|i| compose_planned(&self.pools, &self.plans[i], i, self.seed, &self.params))
                .collect();
            self.ready.extend(batch);
            self.next = end;
        }
        self.ready.pop_front()
    }
}

pub fn build_dataset(pools: Pools, target: usize, seed: u64, params: &AugmentParams) -> Result<DatasetStream> {
    params.validate()?;
    let plans = plan_dataset(pools.foregrounds.len(), pools.backgrounds.len(), target, params.pastes_per_bg, seed)?;
    Ok(DatasetStream {
        pools,
        plans,
        params: params.clone(),
        seed,
        next: 0,
        chunk: 4 * rayon::current_num_threads().max(1),
        ready: VecDeque::new(),
    })
}
