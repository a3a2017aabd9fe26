//! Planted-signal synthetic datasets.
//!
//! Each object is a patch whose embedding points along the embedding of one
//! term in its category's prompt. Distractors are patches pointing along terms
//! that appear in no prompt, and carry no annotation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Annotation, CategoryEntry, DatasetDoc, ImageEntry};
use super::run::Corpus;
use crate::bank::AttributeKind;
use crate::encoding::{token_vector, ImageEmbedder, ToyImage};
use crate::error::{Error, Result};
use crate::numeric::dot;
use crate::prompt::fixtures::{fixture_categories, fixture_terms};
use crate::prompt::forge::normalize_term;
use crate::prompt::{AttributeSet, PromptBank, Source};
use crate::weights::{rng_for, ModelWeights};

/// Draws per image before giving up on the construction check.
const MAX_ATTEMPTS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCategory {
    pub name: String,
    pub attributes: AttributeSet,
    /// Bank term whose embedding is planted.
    pub planted_term: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub images: usize,
    pub width: usize,
    pub height: usize,
    pub patch: usize,
    pub channels: usize,
    pub categories: Vec<SynthCategory>,
    pub objects_per_image: usize,
    /// Probability that an image also holds one unannotated distractor.
    pub distractor_rate: f64,
    pub distractor_terms: Vec<String>,
    /// Background pixels are uniform in `[0.5 - spread, 0.5 + spread]`.
    pub background_spread: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// One fixture category, `terms_per_kind` leading terms per column, with a
    /// seed-chosen planted term. Distractor terms come from the other fixture
    /// categories.
    pub fn from_fixture(category: &str, terms_per_kind: usize, images: usize, seed: u64) -> Result<Self> {
        let mut attributes = AttributeSet::default();
        for kind in AttributeKind::DESCRIPTIVE {
            let terms = fixture_terms(category, kind)
                .ok_or_else(|| Error::config(format!("no attribute table for `{category}`")))?;
            for t in terms.iter().filter_map(|t| normalize_term(t)) {
                if attributes.column(kind).len() >= terms_per_kind {
                    break;
                }
                attributes.push(kind, &t, Source::Fixture)?;
            }
        }
        let all: Vec<String> = AttributeKind::DESCRIPTIVE
            .iter()
            .flat_map(|k| attributes.terms(*k).into_iter().map(str::to_owned).collect::<Vec<_>>())
            .collect();
        let mut rng = rng_for(seed, "synth-planted-term");
        let planted_term = all
            .get(rng.random_range(0..all.len().max(1)))
            .cloned()
            .ok_or_else(|| Error::config("empty attribute set"))?;
        let own: BTreeSet<&str> = all.iter().map(String::as_str).collect();
        let mut distractor_terms = Vec::new();
        for other in fixture_categories().into_iter().filter(|c| *c != category) {
            for kind in AttributeKind::DESCRIPTIVE {
                for t in fixture_terms(other, kind).unwrap_or_default() {
                    if let Some(t) = normalize_term(&t) {
                        if !own.contains(t.as_str()) && !distractor_terms.contains(&t) {
                            distractor_terms.push(t);
                        }
                    }
                }
            }
        }
        Ok(SynthSpec {
            images,
            width: 32,
            height: 32,
            patch: 4,
            channels: 3,
            categories: vec![SynthCategory {
                name: category.to_string(),
                attributes,
                planted_term,
            }],
            objects_per_image: 1,
            distractor_rate: 0.2,
            distractor_terms,
            background_spread: 0.15,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.width % self.patch != 0 || self.height % self.patch != 0 {
            return Err(Error::config("image size must be a multiple of the patch size"));
        }
        let cells = (self.width / self.patch) * (self.height / self.patch);
        if self.objects_per_image + 1 > cells {
            return Err(Error::config(format!("{} objects do not fit {cells} cells", self.objects_per_image)));
        }
        if self.categories.is_empty() {
            return Err(Error::config("no categories"));
        }
        for c in &self.categories {
            let in_bank = AttributeKind::DESCRIPTIVE
                .iter()
                .any(|k| c.attributes.terms(*k).contains(&c.planted_term.as_str()));
            if !in_bank {
                return Err(Error::config(format!(
                    "planted term `{}` is not in the `{}` attributes",
                    c.planted_term, c.name
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(Error::config("distractor rate must be in [0, 1]"));
        }
        if self.distractor_rate > 0.0 && self.distractor_terms.is_empty() {
            return Err(Error::config("distractors requested but no distractor terms"));
        }
        if !(0.0..=0.5).contains(&self.background_spread) {
            return Err(Error::config("background spread must be in [0, 0.5]"));
        }
        Ok(())
    }

    /// Prompt bank holding each category's attributes.
    pub fn prompt_bank(&self) -> PromptBank {
        let mut pb = PromptBank::new();
        for c in &self.categories {
            pb.categories.insert(c.name.clone(), c.attributes.clone());
        }
        pb
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedObject {
    pub image_id: u64,
    pub cell: usize,
    /// Category name, or `None` for a distractor.
    pub category: Option<String>,
    pub term: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub corpus: Corpus,
    pub planted: Vec<PlantedObject>,
    /// Unit-norm planted direction per term.
    pub directions: BTreeMap<String, Vec<f64>>,
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Pixels in `{lo, hi}` maximizing the patch embedding's dot with `dir`.
fn planted_patch(embedder: &ImageEmbedder, dir: &[f64]) -> Vec<f64> {
    let w = embedder.weight();
    let n = w.rows();
    let last = dir[dir.len() - 1] / n as f64;
    (0..n)
        .map(|k| {
            let g = dot(w.row(k), dir) + last;
            if g > 0.0 { quantize(0.95) } else { quantize(0.05) }
        })
        .collect()
}

fn write_patch(img: &mut ToyImage, cell: (usize, usize), patch: usize, values: &[f64]) -> Result<()> {
    let c = img.channels();
    for dy in 0..patch {
        for dx in 0..patch {
            for ch in 0..c {
                let v = values[(dy * patch + dx) * c + ch];
                img.set_pixel(cell.0 * patch + dx, cell.1 * patch + dy, ch, v)?;
            }
        }
    }
    Ok(())
}

pub fn synth_dataset(spec: &SynthSpec, weights: &ModelWeights) -> Result<SynthOutput> {
    spec.validate()?;
    let embedder = weights.embedder();
    if embedder.patch() != spec.patch || embedder.channels() != spec.channels {
        return Err(Error::config("synthetic layout does not match the image embedder"));
    }
    let dim = embedder.dim();
    let dir_of = |t: &str| token_vector(t, dim, weights.text_seed());
    let mut directions = BTreeMap::new();
    for c in &spec.categories {
        directions.insert(c.planted_term.clone(), dir_of(&c.planted_term));
    }
    for t in &spec.distractor_terms {
        directions.entry(t.clone()).or_insert_with(|| dir_of(t));
    }
    let patterns: BTreeMap<&str, Vec<f64>> = directions
        .iter()
        .map(|(t, d)| (t.as_str(), planted_patch(embedder, d)))
        .collect();

    let cols = spec.width / spec.patch;
    let cells = cols * (spec.height / spec.patch);
    let mut rng = rng_for(spec.seed, "synth");
    let mut images = Vec::with_capacity(spec.images);
    let mut doc = DatasetDoc {
        categories: spec
            .categories
            .iter()
            .enumerate()
            .map(|(i, c)| CategoryEntry { id: i as u64 + 1, name: c.name.clone() })
            .collect(),
        ..Default::default()
    };
    let mut planted = Vec::new();
    let ext = if spec.channels == 1 { "pgm" } else { "ppm" };

    for n in 0..spec.images {
        let image_id = n as u64 + 1;
        let mut built = None;
        for _ in 0..MAX_ATTEMPTS {
            let px: Vec<f64> = (0..spec.width * spec.height * spec.channels)
                .map(|_| quantize(0.5 + rng.random_range(-1.0..=1.0) * spec.background_spread))
                .collect();
            let mut img = ToyImage::new(spec.width, spec.height, spec.channels, px)?;
            let mut order: Vec<usize> = (0..cells).collect();
            order.shuffle(&mut rng);
            let mut objects = Vec::new();
            for (k, &cell) in order.iter().take(spec.objects_per_image).enumerate() {
                let cat = &spec.categories[(n + k) % spec.categories.len()];
                objects.push(PlantedObject {
                    image_id,
                    cell,
                    category: Some(cat.name.clone()),
                    term: cat.planted_term.clone(),
                });
            }
            if rng.random_bool(spec.distractor_rate) {
                let term = spec.distractor_terms[rng.random_range(0..spec.distractor_terms.len())].clone();
                objects.push(PlantedObject {
                    image_id,
                    cell: order[spec.objects_per_image],
                    category: None,
                    term,
                });
            }
            for o in &objects {
                write_patch(&mut img, (o.cell % cols, o.cell / cols), spec.patch, &patterns[o.term.as_str()])?;
            }
            if verify_planting(&img, embedder, &objects, &directions)? {
                built = Some((img, objects));
                break;
            }
        }
        let (img, objects) = built.ok_or_else(|| {
            Error::Generation(format!("image {image_id}: planted cells fail the construction check; try another seed"))
        })?;
        for o in &objects {
            if let Some(cat) = &o.category {
                let (cx, cy) = (o.cell % cols, o.cell / cols);
                doc.annotations.push(Annotation {
                    image_id,
                    category_id: doc.categories.iter().find(|c| &c.name == cat).expect("category").id,
                    x: (cx * spec.patch) as f64,
                    y: (cy * spec.patch) as f64,
                    w: spec.patch as f64,
                    h: spec.patch as f64,
                });
            }
        }
        doc.images.push(ImageEntry {
            id: image_id,
            file: format!("img_{image_id:05}.{ext}"),
            width: spec.width,
            height: spec.height,
        });
        images.push(img);
        planted.extend(objects);
    }
    Ok(SynthOutput {
        corpus: Corpus { doc, images },
        planted,
        directions,
    })
}

/// Every annotated planted cell must beat every cell not carrying the same
/// term on dot product with its direction.
fn verify_planting(
    img: &ToyImage,
    embedder: &ImageEmbedder,
    objects: &[PlantedObject],
    directions: &BTreeMap<String, Vec<f64>>,
) -> Result<bool> {
    let tokens = crate::encoding::embed_image(img, embedder)?;
    for o in objects.iter().filter(|o| o.category.is_some()) {
        let dir = &directions[&o.term];
        let own = dot(tokens.row(o.cell), dir);
        let beaten = (0..tokens.rows())
            .filter(|&j| !objects.iter().any(|p| p.cell == j && p.term == o.term))
            .any(|j| dot(tokens.row(j), dir) >= own);
        if beaten {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Writes images, `dataset.json` and `planted.json` into `dir`.
pub fn write_synth(out: &SynthOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (entry, img) in out.corpus.doc.images.iter().zip(&out.corpus.images) {
        img.write_pnm(&dir.join(&entry.file))?;
    }
    let ds = super::dataset::Dataset {
        doc: out.corpus.doc.clone(),
        root: dir.to_path_buf(),
    };
    ds.save(&dir.join("dataset.json"))?;
    let planted = dir.join("planted.json");
    let mut s = serde_json::to_string_pretty(&out.planted).expect("planted serializes");
    s.push('\n');
    std::fs::write(&planted, s).map_err(|e| Error::io(&planted, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DetectionConfig;

    fn setup(images: usize, seed: u64) -> (SynthSpec, ModelWeights) {
        let config = DetectionConfig { dim: 16, heads: 2, layers: 2, ..Default::default() };
        let spec = SynthSpec::from_fixture("polyp", 6, images, seed).unwrap();
        (spec, ModelWeights::seeded(&config).unwrap())
    }

    #[test]
    fn one_box_per_image_without_distractors() {
        let (mut spec, w) = setup(12, 3);
        spec.distractor_rate = 0.0;
        let out = synth_dataset(&spec, &w).unwrap();
        assert_eq!(out.corpus.doc.annotations.len(), 12);
        assert_eq!(out.planted.len(), 12);
        for img in &out.corpus.doc.images {
            assert_eq!(out.corpus.doc.annotations.iter().filter(|a| a.image_id == img.id).count(), 1);
        }
    }

    #[test]
    fn seed_deterministic() {
        let (spec, w) = setup(6, 9);
        assert_eq!(synth_dataset(&spec, &w).unwrap(), synth_dataset(&spec, &w).unwrap());
        let (other, _) = setup(6, 10);
        assert_ne!(synth_dataset(&other, &w).unwrap().corpus, synth_dataset(&spec, &w).unwrap().corpus);
    }

    #[test]
    fn planted_cell_is_the_argmax() {
        let (mut spec, w) = setup(20, 4);
        spec.distractor_rate = 0.5;
        let out = synth_dataset(&spec, &w).unwrap();
        let dir = &out.directions[&spec.categories[0].planted_term];
        for (o, img) in out.planted.iter().filter(|o| o.category.is_some()).zip(&out.corpus.images) {
            let toks = crate::encoding::embed_image(img, w.embedder()).unwrap();
            let own = dot(toks.row(o.cell), dir);
            for j in (0..toks.rows()).filter(|j| *j != o.cell) {
                assert!(dot(toks.row(j), dir) < own);
            }
        }
        let norm: f64 = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn planted_term_must_be_in_bank() {
        let (mut spec, _) = setup(1, 0);
        spec.categories[0].planted_term = "zebra".into();
        assert!(spec.validate().is_err());
    }
}
