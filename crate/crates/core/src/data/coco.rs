//! COCO-style instance annotations.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mask::{rasterize_polygons, rle_decode, BinaryMask, Rle};
use crate::encoders::ImageSample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle(Rle),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Segmentation,
    /// `[x, y, width, height]`.
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: u64,
    pub name: String,
    #[serde(default)]
    pub supercategory: String,
}

/// Validated annotation file. Image paths resolve against `root`, the
/// directory the file was loaded from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<CategoryRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

fn parse_err(record: impl std::fmt::Display, detail: impl Into<String>) -> Error {
    Error::Parse { record: record.to_string(), detail: detail.into() }
}

impl DatasetIndex {
    pub fn new(images: Vec<ImageRecord>, annotations: Vec<AnnotationRecord>, categories: Vec<CategoryRecord>) -> Result<Self> {
        let index = Self { images, annotations, categories, root: PathBuf::new() };
        index.validate()?;
        Ok(index)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let index: Self = serde_json::from_str(text).map_err(|e| parse_err("file", e.to_string()))?;
        index.validate()?;
        Ok(index)
    }

    /// Pretty JSON with a trailing newline; the canonical on-disk form.
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("index serialises");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut images = BTreeMap::new();
        for im in &self.images {
            if images.insert(im.id, im).is_some() {
                return Err(parse_err(format!("image {}", im.id), "duplicate id"));
            }
            if im.height == 0 || im.width == 0 {
                return Err(parse_err(format!("image {}", im.id), "zero-sized image"));
            }
        }
        let mut cats = BTreeSet::new();
        let mut names = BTreeSet::new();
        for c in &self.categories {
            if !cats.insert(c.id) {
                return Err(parse_err(format!("category {}", c.id), "duplicate id"));
            }
            if !names.insert(c.name.as_str()) {
                return Err(parse_err(format!("category {}", c.id), format!("duplicate name {:?}", c.name)));
            }
        }
        let mut anns = BTreeSet::new();
        for a in &self.annotations {
            let rec = format!("annotation {}", a.id);
            if !anns.insert(a.id) {
                return Err(parse_err(rec, "duplicate id"));
            }
            let Some(im) = images.get(&a.image_id) else {
                return Err(parse_err(rec, format!("references missing image {}", a.image_id)));
            };
            if !cats.contains(&a.category_id) {
                return Err(parse_err(rec, format!("references missing category {}", a.category_id)));
            }
            decode_segmentation(&a.segmentation, im.height, im.width).map_err(|d| parse_err(&rec, d))?;
        }
        Ok(())
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn category(&self, id: u64) -> Option<&CategoryRecord> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn category_by_name(&self, name: &str) -> Option<&CategoryRecord> {
        self.categories.iter().find(|c| c.name == name)
    }

    /// Category names in file order.
    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn annotations_for_image(&self, image_id: u64) -> impl Iterator<Item = &AnnotationRecord> {
        self.annotations.iter().filter(move |a| a.image_id == image_id)
    }

    /// Ascending ids of images with at least one instance of `name`.
    pub fn image_ids_with_category(&self, name: &str) -> Vec<u64> {
        let Some(cat) = self.category_by_name(name) else { return Vec::new() };
        let ids: BTreeSet<u64> =
            self.annotations.iter().filter(|a| a.category_id == cat.id).map(|a| a.image_id).collect();
        ids.into_iter().collect()
    }

    pub fn decode_mask(&self, ann: &AnnotationRecord) -> Result<BinaryMask> {
        let im = self
            .image(ann.image_id)
            .ok_or_else(|| parse_err(format!("annotation {}", ann.id), "missing image"))?;
        decode_segmentation(&ann.segmentation, im.height, im.width).map_err(|d| parse_err(format!("annotation {}", ann.id), d))
    }

    pub fn image_path(&self, id: u64) -> Option<PathBuf> {
        self.image(id).map(|im| self.root.join(&im.file_name))
    }

    pub fn load_image(&self, id: u64) -> Result<ImageSample> {
        let path = self.image_path(id).ok_or_else(|| parse_err(format!("image {id}"), "unknown image id"))?;
        ImageSample::load_png(&path, id.to_string())
    }
}

pub fn decode_segmentation(seg: &Segmentation, height: usize, width: usize) -> std::result::Result<BinaryMask, String> {
    match seg {
        Segmentation::Polygons(polys) => rasterize_polygons(polys, height, width),
        Segmentation::Rle(rle) => {
            if rle.size != [height, width] {
                return Err(format!("RLE size {:?} differs from image {height}x{width}", rle.size));
            }
            rle_decode(rle)
        }
    }
}

pub fn load_annotations(path: &Path) -> Result<DatasetIndex> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut index = DatasetIndex::from_json_str(&text).map_err(|e| match e {
        Error::Parse { record, detail } => Error::Parse { record: format!("{}: {record}", path.display()), detail },
        other => other,
    })?;
    index.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(index)
}
