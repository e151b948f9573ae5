//! Dataset files: COCO emission and import, the dataset manifest, mixing
//! synthetic with real data, and summary statistics.

mod coco;
mod mix;
pub mod rle;
mod stats;

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::prompting::ClassLabel;
use crate::{Error, Result};

pub use coco::{
    check_integrity, emit_coco, import_coco, load_dataset, CocoAnnotation, CocoCategory,
    CocoDataset, CocoFile, CocoImage, ANNOTATIONS_FILE, MANIFEST_FILE,
};
pub use mix::{choose_real, mix_coco, mix_datasets, mix_manifests, MixSpec};
pub use rle::Rle;
pub use stats::{dataset_stats, DatasetStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Synthetic,
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub category_id: u32,
    pub visible_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: u64,
    pub file: String,
    pub width: u32,
    pub height: u32,
    pub origin: Origin,
    #[serde(default)]
    pub instances: Vec<InstanceSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub categories: Vec<ClassLabel>,
    pub images: Vec<ManifestImage>,
    pub annotation_count: u64,
    pub seed_lineage: Vec<u64>,
}

impl DatasetManifest {
    /// Image ids dense from 1, instance categories known, counts consistent.
    pub fn check(&self) -> Result<()> {
        crate::prompting::validate_labels(&self.categories)
            .map_err(|e| Error::SchemaInvariantViolation(e.to_string()))?;
        let ids: HashSet<u32> = self.categories.iter().map(|c| c.id).collect();
        let mut total = 0u64;
        for (i, image) in self.images.iter().enumerate() {
            if image.id != i as u64 + 1 {
                return Err(Error::SchemaInvariantViolation(format!(
                    "image #{i} has id {}, expected {}",
                    image.id,
                    i + 1
                )));
            }
            for inst in &image.instances {
                if !ids.contains(&inst.category_id) {
                    return Err(Error::SchemaInvariantViolation(format!(
                        "image {} references unknown category {}",
                        image.id, inst.category_id
                    )));
                }
            }
            total += image.instances.len() as u64;
        }
        if total != self.annotation_count {
            return Err(Error::SchemaInvariantViolation(format!(
                "annotation_count is {}, images hold {total}",
                self.annotation_count
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_atomic(path, self, true)
    }
}

/// Serialize to `<path>.tmp` and rename into place.
pub(crate) fn write_json_atomic<T: Serialize>(path: &Path, value: &T, pretty: bool) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("json.tmp");
    {
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut writer = std::io::BufWriter::new(file);
        if pretty {
            serde_json::to_writer_pretty(&mut writer, value)?;
        } else {
            serde_json::to_writer(&mut writer, value)?;
        }
        writer.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
        writer.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
