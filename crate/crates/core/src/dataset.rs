//! COCO annotation ingestion, dataset statistics and regime labels.
//!
//! A [`DatasetIndex`] is an immutable, validated view over one or more COCO
//! annotation files. Boxes are kept in COCO `xywh` form throughout.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// Slack for the box-inside-image check; COCO exports often carry float noise.
const FIT_EPS: f64 = 1e-6;

/// Axis-aligned box in COCO convention: top-left corner plus width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", from = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl From<[f64; 4]> for BoundingBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        BoundingBox { x, y, w, h }
    }
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoundingBox { x, y, w, h }
    }

    /// Returns a description of the first violated invariant, if any.
    pub fn check(&self) -> Option<String> {
        let all_finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !all_finite {
            Some("non-finite coordinate".into())
        } else if self.w <= 0.0 || self.h <= 0.0 {
            Some(format!("non-positive box dimension {}x{}", self.w, self.h))
        } else if self.x < 0.0 || self.y < 0.0 {
            Some(format!("negative box origin ({}, {})", self.x, self.y))
        } else {
            None
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn scaled(&self, factor: f64) -> Self {
        BoundingBox::new(self.x * factor, self.y * factor, self.w * factor, self.h * factor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: f64,
    pub height: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BoundingBox,
}

/// Validated in-memory index over COCO annotations.
///
/// Image ids, category ids and annotation ids are unique across the whole
/// index, every annotation references a known image and category, and every
/// box lies inside its image.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    name: String,
    images: Vec<ImageInfo>,
    categories: Vec<Category>,
    annotations: Vec<Annotation>,
    image_pos: HashMap<u64, usize>,
    category_pos: HashMap<u64, usize>,
}

impl PartialEq for DatasetIndex {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.images == other.images
            && self.categories == other.categories
            && self.annotations == other.annotations
    }
}

// Wire shape of a COCO document. Unknown fields (file_name, area, iscrowd,
// segmentation, info, licenses, ...) are ignored.
#[derive(Deserialize)]
struct RawDocument {
    images: Vec<RawImage>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<Category>,
}

#[derive(Deserialize)]
struct RawImage {
    id: u64,
    width: f64,
    height: f64,
}

#[derive(Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

impl DatasetIndex {
    /// Validates the parts and builds the index.
    pub fn new(
        name: impl Into<String>,
        images: Vec<ImageInfo>,
        categories: Vec<Category>,
        annotations: Vec<Annotation>,
    ) -> Result<Self> {
        let mut image_pos = HashMap::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if image_pos.insert(img.id, i).is_some() {
                return Err(Error::DuplicateId { kind: "image", id: img.id });
            }
            if !(img.width > 0.0 && img.height > 0.0 && img.width.is_finite() && img.height.is_finite()) {
                return Err(Error::InvalidImage {
                    image_id: img.id,
                    reason: format!("non-positive size {}x{}", img.width, img.height),
                });
            }
        }
        let mut category_pos = HashMap::with_capacity(categories.len());
        for (i, cat) in categories.iter().enumerate() {
            if category_pos.insert(cat.id, i).is_some() {
                return Err(Error::DuplicateId { kind: "category", id: cat.id });
            }
        }
        let mut seen_ann = HashMap::with_capacity(annotations.len());
        for ann in &annotations {
            if seen_ann.insert(ann.id, ()).is_some() {
                return Err(Error::DuplicateId { kind: "annotation", id: ann.id });
            }
            let Some(&ip) = image_pos.get(&ann.image_id) else {
                return Err(Error::Reference { kind: "image", id: ann.image_id });
            };
            if !category_pos.contains_key(&ann.category_id) {
                return Err(Error::Reference { kind: "category", id: ann.category_id });
            }
            if let Some(reason) = ann.bbox.check() {
                return Err(Error::InvalidAnnotation { annotation_id: ann.id, reason });
            }
            let img = &images[ip];
            if ann.bbox.x2() > img.width + FIT_EPS || ann.bbox.y2() > img.height + FIT_EPS {
                return Err(Error::InvalidAnnotation {
                    annotation_id: ann.id,
                    reason: format!(
                        "box extends past image {} bounds {}x{}",
                        img.id, img.width, img.height
                    ),
                });
            }
        }
        Ok(DatasetIndex {
            name: name.into(),
            images,
            categories,
            annotations,
            image_pos,
            category_pos,
        })
    }

    pub fn empty(name: impl Into<String>) -> Self {
        DatasetIndex::new(name, vec![], vec![], vec![]).expect("empty index is valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn images(&self) -> &[ImageInfo] {
        &self.images
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.image_pos.get(&id).map(|&i| &self.images[i])
    }

    pub fn category(&self, id: u64) -> Option<&Category> {
        self.category_pos.get(&id).map(|&i| &self.categories[i])
    }

    pub fn images_in(&self, split: Split) -> impl Iterator<Item = &ImageInfo> {
        self.images.iter().filter(move |img| img.split == split)
    }

    /// Annotations whose image belongs to `split`, in insertion order.
    pub fn annotations_in(&self, split: Split) -> impl Iterator<Item = &Annotation> {
        self.annotations
            .iter()
            .filter(move |a| self.image(a.image_id).is_some_and(|img| img.split == split))
    }

    /// Combines two indices (typically different splits of one dataset).
    /// Categories with the same id must agree on the name; image and
    /// annotation ids must not collide.
    pub fn merge(self, other: DatasetIndex) -> Result<Self> {
        let mut categories = self.categories;
        for cat in other.categories {
            match categories.iter().find(|c| c.id == cat.id) {
                Some(existing) if existing.name == cat.name => {}
                Some(_) => return Err(Error::DuplicateId { kind: "category", id: cat.id }),
                None => categories.push(cat),
            }
        }
        let mut images = self.images;
        images.extend(other.images);
        let mut annotations = self.annotations;
        annotations.extend(other.annotations);
        DatasetIndex::new(self.name, images, categories, annotations)
    }

    /// Serializes back to a COCO document. Images carry an extra `split`
    /// field, which [`parse_coco`] ignores.
    pub fn to_coco_json(&self) -> serde_json::Value {
        let images: Vec<_> = self
            .images
            .iter()
            .map(|i| serde_json::json!({"id": i.id, "width": i.width, "height": i.height, "split": i.split}))
            .collect();
        let annotations: Vec<_> = self
            .annotations
            .iter()
            .map(|a| {
                serde_json::json!({
                    "id": a.id,
                    "image_id": a.image_id,
                    "category_id": a.category_id,
                    "bbox": a.bbox,
                    "area": a.bbox.area(),
                    "iscrowd": 0,
                })
            })
            .collect();
        serde_json::json!({
            "images": images,
            "annotations": annotations,
            "categories": self.categories,
        })
    }
}

/// Parses one COCO annotation file; every image is tagged with `split`.
pub fn parse_coco(raw: &[u8], split: Split) -> Result<DatasetIndex> {
    parse_coco_named(raw, split, "dataset")
}

pub fn parse_coco_named(raw: &[u8], split: Split, name: &str) -> Result<DatasetIndex> {
    let doc: RawDocument = serde_json::from_slice(raw).map_err(|e| Error::from_json(&e, raw))?;
    let images = doc
        .images
        .into_iter()
        .map(|i| ImageInfo { id: i.id, width: i.width, height: i.height, split })
        .collect();
    let annotations = doc
        .annotations
        .into_iter()
        .map(|a| Annotation {
            id: a.id,
            image_id: a.image_id,
            category_id: a.category_id,
            bbox: a.bbox.into(),
        })
        .collect();
    DatasetIndex::new(name, images, doc.categories, annotations)
}

pub fn load_coco(path: impl AsRef<Path>, split: Split) -> Result<DatasetIndex> {
    let path = path.as_ref();
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|n| n.to_str())
        .unwrap_or("dataset");
    parse_coco_named(&raw, split, name)
}

/// Loads `<dir>/{train,val,test}.json`, skipping missing splits. The dataset
/// is named after the directory.
pub fn load_dataset_dir(dir: impl AsRef<Path>) -> Result<DatasetIndex> {
    let dir = dir.as_ref();
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("dataset");
    let mut index: Option<DatasetIndex> = None;
    for split in Split::ALL {
        let path = dir.join(format!("{split}.json"));
        if !path.exists() {
            continue;
        }
        let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let part = parse_coco_named(&raw, split, name)?;
        index = Some(match index {
            Some(acc) => acc.merge(part)?,
            None => part,
        });
    }
    index.ok_or_else(|| Error::Invalid(format!("no split files found under {}", dir.display())))
}

/// Table-I-style aggregates of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_classes: usize,
    pub num_train_images: usize,
    pub num_val_images: usize,
    #[serde(default)]
    pub num_test_images: usize,
    /// Mean of 100·w/image_width; absent when no annotation contributes.
    pub avg_object_width_pct: Option<f64>,
    pub avg_object_height_pct: Option<f64>,
    pub boxes_per_image_mean: f64,
}

impl DatasetStats {
    /// Geometric mean of the average width and height percentages.
    pub fn avg_object_size_pct(&self) -> Option<f64> {
        Some((self.avg_object_width_pct? * self.avg_object_height_pct?).sqrt())
    }

    /// `"17x21"`, rounded for display.
    pub fn size_label(&self) -> String {
        match (self.avg_object_width_pct, self.avg_object_height_pct) {
            (Some(w), Some(h)) => format!("{:.0}x{:.0}", w, h),
            _ => "-".to_string(),
        }
    }
}

/// Which annotations feed the object-size averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeSource {
    #[default]
    Train,
    All,
}

pub fn compute_stats(index: &DatasetIndex) -> DatasetStats {
    compute_stats_with(index, SizeSource::Train)
}

pub fn compute_stats_with(index: &DatasetIndex, source: SizeSource) -> DatasetStats {
    let mut counts: BTreeMap<Split, usize> = BTreeMap::new();
    for img in index.images() {
        *counts.entry(img.split).or_default() += 1;
    }

    let (mut sum_w, mut sum_h, mut n) = (0.0, 0.0, 0usize);
    for ann in index.annotations() {
        let img = index.image(ann.image_id).expect("validated reference");
        if source == SizeSource::Train && img.split != Split::Train {
            continue;
        }
        sum_w += 100.0 * ann.bbox.w / img.width;
        sum_h += 100.0 * ann.bbox.h / img.height;
        n += 1;
    }
    let mean = |s: f64| (n > 0).then(|| s / n as f64);

    let boxes_per_image_mean = if index.images().is_empty() {
        0.0
    } else {
        index.annotations().len() as f64 / index.images().len() as f64
    };

    DatasetStats {
        num_classes: index.categories().len(),
        num_train_images: counts.get(&Split::Train).copied().unwrap_or(0),
        num_val_images: counts.get(&Split::Val).copied().unwrap_or(0),
        num_test_images: counts.get(&Split::Test).copied().unwrap_or(0),
        avg_object_width_pct: mean(sum_w),
        avg_object_height_pct: mean(sum_h),
        boxes_per_image_mean,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegimeThresholds {
    /// Geometric-mean object size (% of image) below which a dataset counts
    /// as a small-object dataset.
    pub small_object_pct: f64,
    /// Train images strictly above this make a large dataset.
    pub large_threshold: usize,
    /// Train images at or below this make a small dataset.
    pub small_threshold: usize,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        RegimeThresholds {
            small_object_pct: 5.0,
            large_threshold: 4000,
            small_threshold: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegimeLabel {
    pub small_dataset: bool,
    pub small_object: bool,
    pub large_dataset: bool,
}

impl RegimeLabel {
    pub const SMALL_DATASET: RegimeLabel =
        RegimeLabel { small_dataset: true, small_object: false, large_dataset: false };
    pub const SMALL_OBJECT: RegimeLabel =
        RegimeLabel { small_dataset: false, small_object: true, large_dataset: false };
    pub const LARGE_DATASET: RegimeLabel =
        RegimeLabel { small_dataset: false, small_object: false, large_dataset: true };

    pub fn describe(&self) -> &'static str {
        match (self.small_dataset, self.small_object, self.large_dataset) {
            (true, _, _) => "small-dataset",
            (_, true, true) => "small-object+large",
            (_, true, _) => "small-object",
            (_, _, true) => "large-dataset",
            _ => "unlabeled",
        }
    }
}

/// Assigns the regime flags.
///
/// Small-object takes precedence over small-dataset: a dataset with small
/// objects is reported in the small-object group only, so the small-dataset
/// group holds datasets that are hard purely because of their size.
pub fn classify_regime(stats: &DatasetStats, thresholds: &RegimeThresholds) -> RegimeLabel {
    let small_object = stats
        .avg_object_size_pct()
        .is_some_and(|s| s < thresholds.small_object_pct);
    let large_dataset = stats.num_train_images > thresholds.large_threshold;
    let small_dataset =
        !small_object && !large_dataset && stats.num_train_images <= thresholds.small_threshold;
    RegimeLabel { small_dataset, small_object, large_dataset }
}
