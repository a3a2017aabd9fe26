//! Dataset-level detection runs and their output artifacts.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::{Dataset, DatasetDoc};
use crate::bank::{build_bank, load_bank_checked, save_bank, KnowledgeBank};
use crate::config::{DetectionConfig, Mode};
use crate::encoding::ToyImage;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult, GroundTruthBox, ScoredBox};
use crate::exec::ExecPolicy;
use crate::fusion::SelectionTrace;
use crate::proposal::{detect_with_forward, BBox};
use crate::prompt::PromptBank;
use crate::weights::ModelWeights;

/// A dataset with its images decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub doc: DatasetDoc,
    pub images: Vec<ToyImage>,
}

impl Corpus {
    pub fn load(path: &Path) -> Result<Self> {
        let ds = Dataset::load(path)?;
        let images = ds
            .doc
            .images
            .iter()
            .map(|e| ds.load_image(e))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { doc: ds.doc, images })
    }

    pub fn category_names(&self) -> Vec<&str> {
        self.doc.categories.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn ground_truth(&self) -> Result<Vec<GroundTruthBox>> {
        Dataset {
            doc: self.doc.clone(),
            root: Default::default(),
        }
        .ground_truth()
    }

    /// Hash of the index document and every decoded pixel.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.doc).expect("dataset serializes"));
        for img in &self.images {
            for p in img.pixels() {
                h.update(p.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// One knowledge bank per category.
#[derive(Debug, Clone, PartialEq)]
pub struct BankSet {
    banks: BTreeMap<String, KnowledgeBank>,
}

/// File name of a category's cached bank inside a cache directory.
pub fn cache_file_name(category: &str) -> String {
    let slug: String = category
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    format!("{slug}.pgkb")
}

impl BankSet {
    pub fn new(banks: BTreeMap<String, KnowledgeBank>) -> Self {
        BankSet { banks }
    }

    /// Encodes the prompt of every requested category.
    pub fn build(
        prompts: &PromptBank,
        categories: &[&str],
        weights: &ModelWeights,
        config: &DetectionConfig,
    ) -> Result<Self> {
        let mut banks = BTreeMap::new();
        for &c in categories {
            let (text, tags) = prompts.category_prompt(c, config.n_l)?;
            banks.insert(c.to_string(), build_bank(&text, &tags, weights, config)?);
        }
        Ok(BankSet { banks })
    }

    pub fn load_dir(
        dir: &Path,
        categories: &[&str],
        weights: &ModelWeights,
        config: &DetectionConfig,
    ) -> Result<Self> {
        let mut banks = BTreeMap::new();
        for &c in categories {
            let path = dir.join(cache_file_name(c));
            banks.insert(c.to_string(), load_bank_checked(&path, weights, config)?);
        }
        Ok(BankSet { banks })
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (c, b) in &self.banks {
            save_bank(b, &dir.join(cache_file_name(c)))?;
        }
        Ok(())
    }

    pub fn get(&self, category: &str) -> Result<&KnowledgeBank> {
        self.banks
            .get(category)
            .ok_or_else(|| Error::config(format!("no knowledge bank for `{category}`")))
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.banks.keys().map(String::as_str)
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (c, b) in &self.banks {
            h.update(c.as_bytes());
            h.update([0u8]);
            h.update(b.content_hash().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub category_id: u64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub image_id: u64,
    pub category: String,
    #[serde(flatten)]
    pub trace: SelectionTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectRun {
    pub predictions: Vec<PredictionRecord>,
    pub traces: Vec<TraceRecord>,
    pub eval: EvalResult,
    pub images: usize,
    /// Detection passes: images times categories.
    pub passes: usize,
}

fn check_capacity(corpus: &Corpus, banks: &BankSet, config: &DetectionConfig, categories: &[&str]) -> Result<()> {
    if config.mode != Mode::Structural || config.fusion_set().is_empty() {
        return Ok(());
    }
    for img in &corpus.images {
        let cells = (img.width() / config.patch) * (img.height() / config.patch);
        if config.top_p > cells {
            return Err(Error::config(format!("top_p = {} exceeds the {cells} image tokens", config.top_p)));
        }
    }
    for &c in categories {
        let n = banks.get(c)?.token_count();
        if config.top_q > n {
            return Err(Error::config(format!("top_q = {} exceeds the {n} `{c}` prompt tokens", config.top_q)));
        }
    }
    Ok(())
}

/// Detects every dataset category on every image and evaluates the result.
pub fn detect_dataset(
    corpus: &Corpus,
    banks: &BankSet,
    weights: &ModelWeights,
    config: &DetectionConfig,
    policy: ExecPolicy,
) -> Result<DetectRun> {
    config.validate()?;
    let categories: Vec<(u64, &str)> = corpus.doc.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    let names: Vec<&str> = categories.iter().map(|c| c.1).collect();
    check_capacity(corpus, banks, config, &names)?;
    let jobs: Vec<(usize, u64, &str)> = (0..corpus.images.len())
        .flat_map(|i| categories.iter().map(move |&(id, name)| (i, id, name)))
        .collect();
    let results = policy.map(&jobs, |&(i, _, name)| {
        let bank = banks.get(name)?;
        detect_with_forward(&corpus.images[i], name, bank, weights, config)
    });

    let mut predictions = Vec::new();
    let mut traces = Vec::new();
    let mut scored = Vec::new();
    for (&(i, cat_id, name), r) in jobs.iter().zip(results) {
        let det = r?;
        let image_id = corpus.doc.images[i].id;
        for p in &det.proposals {
            predictions.push(PredictionRecord {
                image_id,
                category_id: cat_id,
                x1: p.bbox.x1,
                y1: p.bbox.y1,
                x2: p.bbox.x2,
                y2: p.bbox.y2,
                score: p.score,
            });
            scored.push(ScoredBox {
                image_id,
                category: name.to_string(),
                bbox: p.bbox,
                score: p.score,
            });
        }
        traces.extend(det.forward.traces.into_iter().map(|trace| TraceRecord {
            image_id,
            category: name.to_string(),
            trace,
        }));
    }
    let eval = evaluate(&scored, &corpus.ground_truth()?)?;
    Ok(DetectRun {
        predictions,
        traces,
        eval,
        images: corpus.images.len(),
        passes: jobs.len(),
    })
}

impl PredictionRecord {
    pub fn bbox(&self) -> Result<BBox> {
        BBox::new(self.x1, self.y1, self.x2, self.y2)
    }
}

/// Resolved configuration and input digests, written with every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStamp {
    pub config: DetectionConfig,
    pub model_digest: String,
    pub weights_digest: String,
    pub bank_digest: String,
    pub dataset_digest: String,
}

impl RunStamp {
    pub fn new(config: &DetectionConfig, weights: &ModelWeights, banks: &BankSet, corpus: &Corpus) -> Self {
        RunStamp {
            config: config.clone(),
            model_digest: config.model_digest(),
            weights_digest: weights.digest().to_string(),
            bank_digest: banks.digest(),
            dataset_digest: corpus.digest(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub eval: EvalResult,
    pub images: usize,
    pub passes: usize,
    pub traces: usize,
    pub stamp: RunStamp,
}

pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_STAMP_FILE: &str = "resolved_config.toml";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Writes traces one record per line through a single buffered appender.
pub fn write_traces(path: &Path, traces: &[TraceRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for t in traces {
        serde_json::to_writer(&mut w, t).expect("trace serializes");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_run(out_dir: &Path, run: &DetectRun, stamp: &RunStamp) -> Result<Metrics> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join(PREDICTIONS_FILE), &run.predictions)?;
    write_traces(&out_dir.join(TRACES_FILE), &run.traces)?;
    let metrics = Metrics {
        eval: run.eval.clone(),
        images: run.images,
        passes: run.passes,
        traces: run.traces.len(),
        stamp: stamp.clone(),
    };
    write_json(&out_dir.join(METRICS_FILE), &metrics)?;
    let toml = format!(
        "# model {}\n# weights {}\n# banks {}\n# dataset {}\n{}",
        stamp.model_digest,
        stamp.weights_digest,
        stamp.bank_digest,
        stamp.dataset_digest,
        stamp.config.to_toml()
    );
    let p = out_dir.join(CONFIG_STAMP_FILE);
    std::fs::write(&p, toml).map_err(|e| Error::io(&p, e))?;
    Ok(metrics)
}

/// `detect_dataset` followed by `write_run`.
pub fn run_detect(
    corpus: &Corpus,
    banks: &BankSet,
    weights: &ModelWeights,
    config: &DetectionConfig,
    out_dir: &Path,
    policy: ExecPolicy,
) -> Result<(DetectRun, Metrics)> {
    let run = detect_dataset(corpus, banks, weights, config, policy)?;
    let metrics = write_run(out_dir, &run, &RunStamp::new(config, weights, banks, corpus))?;
    Ok((run, metrics))
}
