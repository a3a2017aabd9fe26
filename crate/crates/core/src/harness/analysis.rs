//! Trace-file analyses: selection frequency per layer and attribute kind,
//! and attention strength per image.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::TraceRecord;
use crate::bank::AttributeKind;
use crate::error::{Error, Result};

/// Parses a trace file, reporting the first bad line by number.
pub fn read_traces(reader: impl BufRead) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::format(format!("trace line {}: {e}", n + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(format!("trace line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_trace_file(path: &Path) -> Result<Vec<TraceRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_traces(std::io::BufReader::new(f))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyReport {
    /// layer -> kind -> selection count.
    pub counts: BTreeMap<usize, BTreeMap<AttributeKind, u64>>,
    /// Distinct images seen in the trace.
    pub images: usize,
    /// Distinct `(image, category)` passes seen in the trace.
    pub passes: usize,
    pub total: u64,
}

impl FrequencyReport {
    pub fn kind_total(&self, kind: AttributeKind) -> u64 {
        self.counts.values().filter_map(|m| m.get(&kind)).sum()
    }

    /// Whether `total == q * fused_layers * passes`.
    pub fn conserves(&self, q: usize, fused_layers: usize) -> bool {
        self.total == (q * fused_layers * self.passes) as u64
    }

    pub fn render(&self) -> String {
        let kinds = AttributeKind::DESCRIPTIVE;
        let mut s = String::from("layer");
        for k in kinds {
            s.push_str(&format!("\t{}", k.plural()));
        }
        s.push_str("\tother\n");
        for (layer, m) in &self.counts {
            s.push_str(&layer.to_string());
            for k in kinds {
                s.push_str(&format!("\t{}", m.get(&k).copied().unwrap_or(0)));
            }
            let other: u64 = m.iter().filter(|(k, _)| !kinds.contains(k)).map(|(_, v)| v).sum();
            s.push_str(&format!("\t{other}\n"));
        }
        s.push_str(&format!("images: {}\tpasses: {}\ttotal: {}\n", self.images, self.passes, self.total));
        s
    }
}

pub fn aggregate_selection_frequency(traces: &[TraceRecord]) -> FrequencyReport {
    let mut counts: BTreeMap<usize, BTreeMap<AttributeKind, u64>> = BTreeMap::new();
    let mut images = BTreeSet::new();
    let mut passes = BTreeSet::new();
    let mut total = 0;
    for r in traces {
        images.insert(r.image_id);
        passes.insert((r.image_id, r.category.as_str()));
        let layer = counts.entry(r.trace.layer).or_default();
        for tag in &r.trace.prompt_tags {
            *layer.entry(*tag).or_default() += 1;
            total += 1;
        }
    }
    FrequencyReport {
        counts,
        images: images.len(),
        passes: passes.len(),
        total,
    }
}

pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAttention {
    pub image_id: u64,
    pub category: String,
    pub t2v: f64,
    pub v2t: f64,
    /// Mean of `t2v` and `v2t`.
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub per_image: Vec<ImageAttention>,
    /// Counts of `per_image[..].mean` over equal bins of `[0, 1]`.
    pub histogram: Vec<u64>,
}

impl AttentionStats {
    pub fn render(&self) -> String {
        let mut s = String::from("image\tcategory\tt2v\tv2t\tmean\n");
        for a in &self.per_image {
            s.push_str(&format!(
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}\n",
                a.image_id, a.category, a.t2v, a.v2t, a.mean
            ));
        }
        let w = 1.0 / self.histogram.len() as f64;
        for (i, c) in self.histogram.iter().enumerate() {
            s.push_str(&format!("[{:.1}, {:.1}{}\t{c}\n", i as f64 * w, (i + 1) as f64 * w, if i + 1 == self.histogram.len() { "]" } else { ")" }));
        }
        s
    }
}

pub fn attention_strength_stats(traces: &[TraceRecord]) -> AttentionStats {
    let mut acc: BTreeMap<(u64, &str), (f64, f64, usize)> = BTreeMap::new();
    for r in traces {
        let e = acc.entry((r.image_id, r.category.as_str())).or_default();
        e.0 += r.trace.mean_attention_t2v;
        e.1 += r.trace.mean_attention_v2t;
        e.2 += 1;
    }
    let mut histogram = vec![0u64; HISTOGRAM_BINS];
    let per_image = acc
        .into_iter()
        .map(|((image_id, category), (t2v, v2t, n))| {
            let (t2v, v2t) = (t2v / n as f64, v2t / n as f64);
            let mean = (t2v + v2t) / 2.0;
            let bin = ((mean.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            histogram[bin] += 1;
            ImageAttention {
                image_id,
                category: category.to_string(),
                t2v,
                v2t,
                mean,
            }
        })
        .collect();
    AttentionStats { per_image, histogram }
}
