//! P/Q grid and fusion-layer ablations.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::run::{detect_dataset, BankSet, Corpus};
use crate::config::{DetectionConfig, Mode};
use crate::error::{Error, Result};
use crate::eval::EvalResult;
use crate::exec::ExecPolicy;
use crate::weights::{rng_for, ModelWeights};

/// Cells re-run independently to cross-check the grid.
const CROSS_CHECKS: usize = 3;
const HIGHLIGHT: (usize, usize) = (10, 10);

/// Rows are Q values, columns are P values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqGrid {
    pub p_values: Vec<usize>,
    pub q_values: Vec<usize>,
    pub cells: Vec<Vec<EvalResult>>,
    /// `(P, Q)` of the marked cell, when it is on the grid.
    pub highlight: Option<(usize, usize)>,
}

impl PqGrid {
    pub fn cell(&self, p: usize, q: usize) -> Option<&EvalResult> {
        let c = self.p_values.iter().position(|&v| v == p)?;
        let r = self.q_values.iter().position(|&v| v == q)?;
        Some(&self.cells[r][c])
    }

    /// Plain-text AP table; the highlighted cell is starred.
    pub fn render(&self) -> String {
        let mut s = String::from("Q \\ P");
        for p in &self.p_values {
            s.push_str(&format!("\t{p}"));
        }
        s.push('\n');
        for (r, q) in self.q_values.iter().enumerate() {
            s.push_str(&q.to_string());
            for (c, p) in self.p_values.iter().enumerate() {
                let star = if self.highlight == Some((*p, *q)) { "*" } else { "" };
                s.push_str(&format!("\t{:.1}{star}", 100.0 * self.cells[r][c].ap));
            }
            s.push('\n');
        }
        s
    }
}

fn with_pq(config: &DetectionConfig, p: usize, q: usize) -> DetectionConfig {
    DetectionConfig {
        top_p: p,
        top_q: q,
        mode: Mode::Structural,
        ..config.clone()
    }
}

pub fn run_pq_grid(
    corpus: &Corpus,
    banks: &BankSet,
    weights: &ModelWeights,
    config: &DetectionConfig,
    p_values: &[usize],
    q_values: &[usize],
    policy: ExecPolicy,
) -> Result<PqGrid> {
    if p_values.is_empty() || q_values.is_empty() {
        return Err(Error::config("P and Q value lists must be nonempty"));
    }
    let mut cells = Vec::with_capacity(q_values.len());
    for &q in q_values {
        let mut row = Vec::with_capacity(p_values.len());
        for &p in p_values {
            row.push(detect_dataset(corpus, banks, weights, &with_pq(config, p, q), policy)?.eval);
        }
        cells.push(row);
    }
    let grid = PqGrid {
        p_values: p_values.to_vec(),
        q_values: q_values.to_vec(),
        cells,
        highlight: (p_values.contains(&HIGHLIGHT.0) && q_values.contains(&HIGHLIGHT.1)).then_some(HIGHLIGHT),
    };

    let total = p_values.len() * q_values.len();
    let mut rng = rng_for(config.seed, "pq-cross-check");
    for flat in sample(&mut rng, total, CROSS_CHECKS.min(total)) {
        let (r, c) = (flat / p_values.len(), flat % p_values.len());
        let (p, q) = (p_values[c], q_values[r]);
        let again = detect_dataset(corpus, banks, weights, &with_pq(config, p, q), ExecPolicy::Sequential)?.eval;
        if again != grid.cells[r][c] {
            return Err(Error::Integrity(format!("grid cell P={p} Q={q} disagrees with a standalone run")));
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerStrategy {
    /// Fuse at layer `k` only.
    SingleLayer,
    /// Fuse at layers `k..=N`.
    SuffixRange,
}

impl std::str::FromStr for LayerStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_layer" | "single-layer" => Ok(LayerStrategy::SingleLayer),
            "suffix_range" | "suffix-range" => Ok(LayerStrategy::SuffixRange),
            other => Err(Error::config(format!("unknown layer strategy `{other}`"))),
        }
    }
}

impl LayerStrategy {
    pub fn layers(self, k: usize, n: usize) -> Vec<usize> {
        match self {
            LayerStrategy::SingleLayer => vec![k],
            LayerStrategy::SuffixRange => (k..=n).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub k: usize,
    pub fusion_layers: Vec<usize>,
    pub eval: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTable {
    pub strategy: LayerStrategy,
    pub rows: Vec<LayerRow>,
}

impl LayerTable {
    pub fn render(&self) -> String {
        let mut s = String::from("k\tlayers\tAP\tAP50\n");
        for r in &self.rows {
            let layers: Vec<String> = r.fusion_layers.iter().map(|l| l.to_string()).collect();
            s.push_str(&format!(
                "{}\t{}\t{:.1}\t{:.1}\n",
                r.k,
                layers.join(","),
                100.0 * r.eval.ap,
                100.0 * r.eval.ap50
            ));
        }
        s
    }
}

pub fn run_layer_ablation(
    corpus: &Corpus,
    banks: &BankSet,
    weights: &ModelWeights,
    config: &DetectionConfig,
    strategy: LayerStrategy,
    policy: ExecPolicy,
) -> Result<LayerTable> {
    let n = config.layers;
    if n == 0 {
        return Err(Error::config("layer ablation needs at least one layer"));
    }
    let rows = (1..=n)
        .map(|k| {
            let fusion_layers = strategy.layers(k, n);
            let cfg = DetectionConfig {
                fusion_layers: Some(fusion_layers.clone()),
                mode: Mode::Structural,
                ..config.clone()
            };
            Ok(LayerRow {
                k,
                fusion_layers,
                eval: detect_dataset(corpus, banks, weights, &cfg, policy)?.eval,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerTable { strategy, rows })
}
