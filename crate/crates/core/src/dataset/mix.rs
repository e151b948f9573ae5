use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::coco::{check_integrity, CocoAnnotation, CocoDataset, CocoFile, CocoImage, ANNOTATIONS_FILE, MANIFEST_FILE};
use super::{write_json_atomic, DatasetManifest, InstanceSummary, ManifestImage};
use crate::rng::{derive_seed, stream};
use crate::selection::fraction_count;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    pub real_manifest: PathBuf,
    pub real_fraction: f64,
    /// Also cut the real objects out and add them to the foreground pool.
    #[serde(default)]
    pub include_real_foreground_pastes: bool,
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.real_fraction) {
            return Err(Error::InvalidParams(format!(
                "real_fraction must be in [0, 1], got {}",
                self.real_fraction
            )));
        }
        Ok(())
    }
}

/// Seed for the real-image draw, derived from the synthetic lineage.
fn mix_seed(lineage: &[u64]) -> u64 {
    derive_seed(lineage.first().copied().unwrap_or(0), &[&"mix", &(lineage.len() as u64)])
}

/// Indices of `ceil(fraction * n)` real images, uniform without
/// replacement, in ascending order.
pub fn choose_real(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let k = fraction_count(fraction, n);
    let mut rng = stream(seed, "mix-real", 0);
    let mut picked = sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Map real category ids onto synthetic ones by name.
fn category_map(syn: &DatasetManifest, real: &DatasetManifest) -> Result<HashMap<u32, u32>> {
    let by_name: BTreeMap<&str, u32> = syn.categories.iter().map(|c| (c.name.as_str(), c.id)).collect();
    let real_names: BTreeMap<&str, u32> = real.categories.iter().map(|c| (c.name.as_str(), c.id)).collect();
    if by_name.keys().ne(real_names.keys()) {
        let syn_names: Vec<_> = by_name.keys().collect();
        let other: Vec<_> = real_names.keys().collect();
        return Err(Error::CategoryMismatch(format!("synthetic {syn_names:?} vs real {other:?}")));
    }
    Ok(real_names.into_iter().map(|(name, id)| (id, by_name[name])).collect())
}

/// Manifest-level mix: synthetic images first, then the sampled real ones,
/// ids re-densified and category ids remapped by name.
pub fn mix_manifests(syn: &DatasetManifest, real: &DatasetManifest, real_fraction: f64) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&real_fraction) {
        return Err(Error::InvalidParams(format!("real_fraction must be in [0, 1], got {real_fraction}")));
    }
    let remap = category_map(syn, real)?;
    if real_fraction == 0.0 {
        return Ok(syn.clone());
    }
    let seed = mix_seed(&syn.seed_lineage);
    let mut out = syn.clone();
    for i in choose_real(real.images.len(), real_fraction, seed) {
        let src = &real.images[i];
        let instances: Vec<InstanceSummary> = src
            .instances
            .iter()
            .map(|inst| InstanceSummary { category_id: remap[&inst.category_id], ..inst.clone() })
            .collect();
        out.annotation_count += instances.len() as u64;
        out.images.push(ManifestImage {
            id: out.images.len() as u64 + 1,
            instances,
            ..src.clone()
        });
    }
    out.seed_lineage.push(seed);
    out.name = format!("{}+{}", syn.name, real.name);
    out.check()?;
    Ok(out)
}

pub fn mix_datasets(syn: &DatasetManifest, spec: &MixSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let real = DatasetManifest::load(&spec.real_manifest)?;
    mix_manifests(syn, &real, spec.real_fraction)
}

fn copy(src: &Path, dst: &Path) -> Result<()> {
    if let Some(parent) = dst.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::copy(src, dst).map_err(|e| Error::io(src, e))?;
    Ok(())
}

/// Write a self-contained mixed dataset to `out_dir`: images are copied,
/// real ones renamed to their new id.
pub fn mix_coco(syn: &CocoDataset, real: &CocoDataset, real_fraction: f64, out_dir: &Path) -> Result<CocoDataset> {
    let manifest = mix_manifests(&syn.manifest, &real.manifest, real_fraction)?;
    let remap = category_map(&syn.manifest, &real.manifest)?;
    let mut coco = syn.coco.clone();
    for image in &syn.coco.images {
        copy(&syn.image_path(image), &out_dir.join(&image.file_name))?;
    }
    let by_image = real.annotations_by_image();
    let picked = if real_fraction == 0.0 {
        Vec::new()
    } else {
        choose_real(real.coco.images.len(), real_fraction, mix_seed(&syn.manifest.seed_lineage))
    };
    let mut manifest = manifest;
    for i in picked {
        let src = &real.coco.images[i];
        let id = coco.images.len() as u64 + 1;
        let ext = Path::new(&src.file_name).extension().map_or("png".into(), |e| e.to_string_lossy().into_owned());
        let file_name = format!("images/{id:06}.{ext}");
        copy(&real.image_path(src), &out_dir.join(&file_name))?;
        manifest.images[id as usize - 1].file = file_name.clone();
        coco.images.push(CocoImage { id, file_name, ..src.clone() });
        for ann in by_image.get(&src.id).into_iter().flatten() {
            coco.annotations.push(CocoAnnotation {
                id: coco.annotations.len() as u64 + 1,
                image_id: id,
                category_id: remap[&ann.category_id],
                ..(*ann).clone()
            });
        }
    }
    check_integrity(&coco)?;
    if coco.annotations.len() as u64 != manifest.annotation_count {
        return Err(Error::SchemaInvariantViolation("mixed annotation count disagrees with manifest".into()));
    }
    write_json_atomic(&out_dir.join(ANNOTATIONS_FILE), &coco, false)?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(CocoDataset { root: out_dir.to_path_buf(), coco: CocoFile { ..coco }, manifest })
}
