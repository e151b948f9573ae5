use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{DatasetManifest, Origin};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub images: u64,
    pub synthetic_images: u64,
    pub real_images: u64,
    pub real_ratio: f64,
    pub annotations: u64,
    pub per_category: BTreeMap<String, u64>,
    /// Number of images holding exactly `k` instances.
    pub instances_per_image: BTreeMap<usize, u64>,
    pub mean_instances_per_image: f64,
    pub mean_visible_fraction: f64,
}

pub fn dataset_stats(manifest: &DatasetManifest) -> DatasetStats {
    let names: BTreeMap<u32, &str> = manifest.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    let mut stats = DatasetStats {
        per_category: manifest.categories.iter().map(|c| (c.name.clone(), 0)).collect(),
        ..Default::default()
    };
    let mut visible_sum = 0.0;
    for image in &manifest.images {
        stats.images += 1;
        match image.origin {
            Origin::Synthetic => stats.synthetic_images += 1,
            Origin::Real => stats.real_images += 1,
        }
        *stats.instances_per_image.entry(image.instances.len()).or_default() += 1;
        for inst in &image.instances {
            stats.annotations += 1;
            visible_sum += inst.visible_fraction;
            if let Some(name) = names.get(&inst.category_id) {
                *stats.per_category.entry(name.to_string()).or_default() += 1;
            }
        }
    }
    if stats.images > 0 {
        stats.real_ratio = stats.real_images as f64 / stats.images as f64;
        stats.mean_instances_per_image = stats.annotations as f64 / stats.images as f64;
    }
    if stats.annotations > 0 {
        stats.mean_visible_fraction = visible_sum / stats.annotations as f64;
    }
    stats
}

impl DatasetStats {
    /// Plain-text table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "images               {}", self.images);
        let _ = writeln!(out, "  synthetic          {}", self.synthetic_images);
        let _ = writeln!(out, "  real               {}", self.real_images);
        let _ = writeln!(out, "real ratio           {:.4}", self.real_ratio);
        let _ = writeln!(out, "annotations          {}", self.annotations);
        let _ = writeln!(out, "instances / image    {:.3}", self.mean_instances_per_image);
        let _ = writeln!(out, "mean visible frac    {:.3}", self.mean_visible_fraction);
        let _ = writeln!(out, "per category:");
        for (name, n) in &self.per_category {
            let _ = writeln!(out, "  {name:<18} {n}");
        }
        let _ = writeln!(out, "instances per image histogram:");
        for (k, n) in &self.instances_per_image {
            let _ = writeln!(out, "  {k:<18} {n}");
        }
        out
    }
}
