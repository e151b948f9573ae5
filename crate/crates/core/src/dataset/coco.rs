use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::rle::Rle;
use super::{write_json_atomic, DatasetManifest, InstanceSummary, ManifestImage, Origin};
use crate::compositor::CompositeSample;
use crate::mask::BinaryMask;
use crate::prompting::ClassLabel;
use crate::{imageio, Error, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const MANIFEST_FILE: &str = "manifest.json";

const WRITE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: [f64; 4],
    pub segmentation: Rle,
    pub area: u64,
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CocoCategory {
    pub id: u32,
    pub name: String,
}

/// The `annotations.json` document, exactly these three keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoFile {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

fn violation(msg: String) -> Error {
    Error::SchemaInvariantViolation(msg)
}

/// Full referential and geometric consistency check.
pub fn check_integrity(coco: &CocoFile) -> Result<()> {
    let mut categories = HashSet::new();
    for c in &coco.categories {
        if !categories.insert(c.id) {
            return Err(violation(format!("duplicate category id {}", c.id)));
        }
    }
    let mut images = HashMap::new();
    for (i, img) in coco.images.iter().enumerate() {
        if img.id != i as u64 + 1 {
            return Err(violation(format!("image #{i} has id {}, ids must be dense from 1", img.id)));
        }
        images.insert(img.id, img);
    }
    coco.annotations
        .par_iter()
        .enumerate()
        .try_for_each(|(i, ann)| {
            if ann.id != i as u64 + 1 {
                return Err(violation(format!("annotation #{i} has id {}", ann.id)));
            }
            let img = images
                .get(&ann.image_id)
                .ok_or_else(|| violation(format!("annotation {} references missing image {}", ann.id, ann.image_id)))?;
            if !categories.contains(&ann.category_id) {
                return Err(violation(format!(
                    "annotation {} references missing category {}",
                    ann.id, ann.category_id
                )));
            }
            if ann.segmentation.size != [img.height, img.width] {
                return Err(violation(format!("annotation {} mask size differs from its image", ann.id)));
            }
            let bbox = ann.segmentation.bbox()?;
            if ann.bbox != bbox.to_coco() || ann.area != ann.segmentation.area() || ann.area == 0 {
                return Err(violation(format!("annotation {} bbox/area disagree with its mask", ann.id)));
            }
            if ann.iscrowd != 0 {
                return Err(violation(format!("annotation {} is a crowd region", ann.id)));
            }
            Ok(())
        })
}

fn annotation(id: u64, image_id: u64, category_id: u32, mask: &BinaryMask) -> Result<CocoAnnotation> {
    let segmentation = Rle::encode(mask);
    let bbox = segmentation.bbox()?;
    Ok(CocoAnnotation {
        id,
        image_id,
        category_id,
        bbox: bbox.to_coco(),
        area: segmentation.area(),
        segmentation,
        iscrowd: 0,
    })
}

pub fn image_file(id: u64) -> String {
    format!("images/{id:06}.png")
}

/// Write `images/NNNNNN.png` and `annotations.json` for an ordered stream
/// of samples. Ids follow stream order. `annotations.json` and the manifest
/// are only written once the whole stream passed the consistency check.
pub fn emit_coco<I>(samples: I, categories: &[ClassLabel], out_dir: &Path, name: &str, seed_lineage: &[u64]) -> Result<DatasetManifest>
where
    I: IntoIterator<Item = Result<CompositeSample>>,
{
    crate::prompting::validate_labels(categories)?;
    let known: HashSet<u32> = categories.iter().map(|c| c.id).collect();
    let mut coco = CocoFile {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: categories.iter().map(|c| CocoCategory { id: c.id, name: c.name.clone() }).collect(),
    };
    let mut manifest_images = Vec::new();
    let mut pending = Vec::with_capacity(WRITE_CHUNK);
    let mut iter = samples.into_iter().peekable();
    while iter.peek().is_some() {
        pending.clear();
        for sample in iter.by_ref().take(WRITE_CHUNK) {
            pending.push(sample?);
        }
        let first_id = coco.images.len() as u64 + 1;
        pending
            .par_iter()
            .enumerate()
            .try_for_each(|(k, sample)| {
                let path = out_dir.join(image_file(first_id + k as u64));
                imageio::write_file(&path, &imageio::encode_rgb(&sample.image, &[])?)
            })?;
        for (k, sample) in pending.iter().enumerate() {
            let image_id = first_id + k as u64;
            let (width, height) = sample.image.dimensions();
            coco.images.push(CocoImage { id: image_id, file_name: image_file(image_id), width, height });
            let mut instances = Vec::new();
            for inst in &sample.instances {
                if !known.contains(&inst.category_id) {
                    return Err(violation(format!("instance of unknown category {}", inst.category_id)));
                }
                let id = coco.annotations.len() as u64 + 1;
                coco.annotations.push(annotation(id, image_id, inst.category_id, &inst.mask)?);
                instances.push(InstanceSummary { category_id: inst.category_id, visible_fraction: inst.visible_fraction });
            }
            manifest_images.push(ManifestImage {
                id: image_id,
                file: image_file(image_id),
                width,
                height,
                origin: Origin::Synthetic,
                instances,
            });
        }
    }
    check_integrity(&coco)?;
    let manifest = DatasetManifest {
        name: name.to_string(),
        categories: categories.to_vec(),
        annotation_count: coco.annotations.len() as u64,
        images: manifest_images,
        seed_lineage: seed_lineage.to_vec(),
    };
    manifest.check()?;
    write_json_atomic(&out_dir.join(ANNOTATIONS_FILE), &coco, false)?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// A COCO file together with the directory its `file_name`s are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct CocoDataset {
    pub root: PathBuf,
    pub coco: CocoFile,
    pub manifest: DatasetManifest,
}

impl CocoDataset {
    pub fn image_path(&self, image: &CocoImage) -> PathBuf {
        self.root.join(&image.file_name)
    }

    /// Annotations grouped by image id.
    pub fn annotations_by_image(&self) -> BTreeMap<u64, Vec<&CocoAnnotation>> {
        let mut out: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
        for a in &self.coco.annotations {
            out.entry(a.image_id).or_default().push(a);
        }
        out
    }
}

/// Load a dataset written by [`emit_coco`] or [`super::mix_coco`].
pub fn load_dataset(dir: &Path) -> Result<CocoDataset> {
    let coco = CocoFile::load(&dir.join(ANNOTATIONS_FILE))?;
    let manifest = DatasetManifest::load(&dir.join(MANIFEST_FILE))?;
    Ok(CocoDataset { root: dir.to_path_buf(), coco, manifest })
}

#[derive(Deserialize)]
struct LooseImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct LooseAnnotation {
    image_id: u64,
    category_id: u32,
    segmentation: Value,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Deserialize)]
struct LooseCategory {
    id: u32,
    name: String,
}

#[derive(Deserialize)]
struct LooseFile {
    images: Vec<LooseImage>,
    #[serde(default)]
    annotations: Vec<LooseAnnotation>,
    categories: Vec<LooseCategory>,
}

fn rasterize_polygons(polys: &[Value], width: u32, height: u32) -> Result<BinaryMask> {
    let polys: Vec<Vec<(f64, f64)>> = polys
        .iter()
        .map(|p| {
            let flat: Vec<f64> = serde_json::from_value(p.clone())?;
            Ok(flat.chunks_exact(2).map(|c| (c[0], c[1])).collect())
        })
        .collect::<Result<_>>()?;
    Ok(BinaryMask::from_fn(width, height, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut inside = false;
        for poly in &polys {
            let n = poly.len();
            for i in 0..n {
                let (x0, y0) = poly[i];
                let (x1, y1) = poly[(i + 1) % n];
                if (y0 > py) != (y1 > py) && px < x0 + (py - y0) / (y1 - y0) * (x1 - x0) {
                    inside = !inside;
                }
            }
        }
        inside
    }))
}

fn decode_segmentation(seg: &Value, width: u32, height: u32) -> Result<BinaryMask> {
    match seg {
        Value::Array(polys) => rasterize_polygons(polys, width, height),
        Value::Object(map) if map.get("counts").is_some_and(Value::is_string) => Err(Error::Serde(
            "compressed (string) RLE segmentations are not supported".into(),
        )),
        Value::Object(_) => {
            let rle: Rle = serde_json::from_value(seg.clone())?;
            if rle.size != [height, width] {
                return Err(violation("RLE size differs from its image".into()));
            }
            rle.decode()
        }
        _ => Err(Error::Serde("unrecognised segmentation".into())),
    }
}

/// Read a real COCO dataset. Image and annotation ids are re-densified in
/// file order, crowd regions and empty masks are skipped, and boxes and
/// areas are recomputed from the masks.
pub fn import_coco(annotations: &Path, image_root: &Path) -> Result<CocoDataset> {
    let bytes = std::fs::read(annotations).map_err(|e| Error::io(annotations, e))?;
    let loose: LooseFile = serde_json::from_slice(&bytes)?;
    let mut categories: Vec<ClassLabel> = loose
        .categories
        .iter()
        .map(|c| ClassLabel::new(c.id, &c.name))
        .collect::<Result<_>>()?;
    categories.sort_by_key(|c| c.id);
    crate::prompting::validate_labels(&categories)?;

    let mut id_map = HashMap::new();
    let mut images = Vec::new();
    for (i, img) in loose.images.iter().enumerate() {
        let id = i as u64 + 1;
        if id_map.insert(img.id, id).is_some() {
            return Err(violation(format!("duplicate image id {}", img.id)));
        }
        images.push(CocoImage { id, file_name: img.file_name.clone(), width: img.width, height: img.height });
    }
    let known: HashSet<u32> = categories.iter().map(|c| c.id).collect();
    let mut coco_annotations = Vec::new();
    let mut instances: Vec<Vec<InstanceSummary>> = vec![Vec::new(); images.len()];
    for ann in &loose.annotations {
        if ann.iscrowd != 0 {
            continue;
        }
        let image_id = *id_map
            .get(&ann.image_id)
            .ok_or_else(|| violation(format!("annotation references missing image {}", ann.image_id)))?;
        if !known.contains(&ann.category_id) {
            return Err(violation(format!("annotation references missing category {}", ann.category_id)));
        }
        let img = &images[image_id as usize - 1];
        let mask = decode_segmentation(&ann.segmentation, img.width, img.height)?;
        if mask.count() == 0 {
            continue;
        }
        let id = coco_annotations.len() as u64 + 1;
        coco_annotations.push(annotation(id, image_id, ann.category_id, &mask)?);
        instances[image_id as usize - 1].push(InstanceSummary { category_id: ann.category_id, visible_fraction: 1.0 });
    }
    let coco = CocoFile {
        images,
        annotations: coco_annotations,
        categories: categories.iter().map(|c| CocoCategory { id: c.id, name: c.name.clone() }).collect(),
    };
    check_integrity(&coco)?;
    let manifest = DatasetManifest {
        name: annotations.file_stem().map_or("real".into(), |s| s.to_string_lossy().into_owned()),
        categories,
        annotation_count: coco.annotations.len() as u64,
        images: coco
            .images
            .iter()
            .zip(instances)
            .map(|(img, instances)| ManifestImage {
                id: img.id,
                file: img.file_name.clone(),
                width: img.width,
                height: img.height,
                origin: Origin::Real,
                instances,
            })
            .collect(),
        seed_lineage: Vec::new(),
    };
    Ok(CocoDataset { root: image_root.to_path_buf(), coco, manifest })
}
