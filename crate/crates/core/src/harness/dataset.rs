//! Dataset documents: a JSON index of images, categories and boxes, with
//! PNM image files stored next to it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoding::ToyImage;
use crate::error::{Error, Result};
use crate::eval::GroundTruthBox;
use crate::proposal::BBox;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub id: u64,
    /// Path relative to the dataset document.
    pub file: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryEntry {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub image_id: u64,
    pub category_id: u64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDoc {
    pub images: Vec<ImageEntry>,
    pub categories: Vec<CategoryEntry>,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub doc: DatasetDoc,
    pub root: PathBuf,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&s);
        let doc: DatasetDoc = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::format(format!("{}: at `{}`: {}", path.display(), e.path(), e.inner())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let ds = Dataset { doc, root };
        ds.validate()?;
        Ok(ds)
    }

    /// Writes the document; image files are the caller's responsibility.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(&self.doc).expect("dataset serializes");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for img in &self.doc.images {
            if seen.insert(img.id, ()).is_some() {
                return Err(Error::format(format!("duplicate image id {}", img.id)));
            }
        }
        let mut names = BTreeMap::new();
        for c in &self.doc.categories {
            if names.insert(c.id, ()).is_some() {
                return Err(Error::format(format!("duplicate category id {}", c.id)));
            }
        }
        for a in &self.doc.annotations {
            if !seen.contains_key(&a.image_id) {
                return Err(Error::format(format!("annotation for unknown image {}", a.image_id)));
            }
            if !names.contains_key(&a.category_id) {
                return Err(Error::format(format!("annotation for unknown category {}", a.category_id)));
            }
            if !(a.w > 0.0 && a.h > 0.0) {
                return Err(Error::format(format!("empty box on image {}", a.image_id)));
            }
        }
        Ok(())
    }

    pub fn image_path(&self, entry: &ImageEntry) -> PathBuf {
        self.root.join(&entry.file)
    }

    pub fn load_image(&self, entry: &ImageEntry) -> Result<ToyImage> {
        let img = ToyImage::read_pnm(&self.image_path(entry))?;
        if (img.width(), img.height()) != (entry.width, entry.height) {
            return Err(Error::format(format!(
                "{}: is {}x{}, index says {}x{}",
                entry.file,
                img.width(),
                img.height(),
                entry.width,
                entry.height
            )));
        }
        Ok(img)
    }

    pub fn category_name(&self, id: u64) -> Option<&str> {
        self.doc.categories.iter().find(|c| c.id == id).map(|c| c.name.as_str())
    }

    pub fn category_id(&self, name: &str) -> Option<u64> {
        self.doc.categories.iter().find(|c| c.name == name).map(|c| c.id)
    }

    pub fn ground_truth(&self) -> Result<Vec<GroundTruthBox>> {
        self.doc
            .annotations
            .iter()
            .map(|a| {
                Ok(GroundTruthBox {
                    image_id: a.image_id,
                    category: self.category_name(a.category_id).expect("validated").to_string(),
                    bbox: BBox::from_xywh(a.x, a.y, a.w, a.h)?,
                })
            })
            .collect()
    }
}
