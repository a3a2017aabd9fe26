//! Grounding head: a fixed anchor grid scored by word-region alignment
//! between final image tokens and final target tokens, then greedy NMS.

use serde::{Deserialize, Serialize};

use crate::bank::KnowledgeBank;
use crate::config::DetectionConfig;
use crate::encoding::{PatchGrid, ToyImage};
use crate::error::{Error, Result};
use crate::fusion::{forward, ForwardOutput};
use crate::numeric::{dot, TokenMatrix};
use crate::weights::ModelWeights;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 < x2 && y1 < y2) || ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::config(format!("degenerate box ({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    /// From `(x, y, w, h)`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(x, y, x + w, y + h)
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    /// Image-token row this anchor is scored from.
    pub cell: usize,
}

/// Anchors ordered scale-major: anchor `s * N_v + j` sits on cell `j`.
pub fn anchor_grid(width: usize, height: usize, patch: usize, scales: &[f64]) -> Result<Vec<Anchor>> {
    if patch == 0 || width % patch != 0 || height % patch != 0 {
        return Err(Error::config(format!(
            "{width}x{height} is not divisible by patch size {patch}"
        )));
    }
    let grid = PatchGrid {
        cols: width / patch,
        rows: height / patch,
        patch,
    };
    let (w, h) = (width as f64, height as f64);
    let mut out = Vec::with_capacity(grid.cells() * scales.len());
    for &s in scales {
        let half = s * patch as f64 / 2.0;
        for cell in 0..grid.cells() {
            let (x1, y1, x2, y2) = grid.cell_box(cell);
            let (cx, cy) = ((x1 + x2) / 2.0, (y1 + y2) / 2.0);
            let bbox = BBox::new(
                (cx - half).max(0.0),
                (cy - half).max(0.0),
                (cx + half).min(w),
                (cy + half).min(h),
            )?;
            out.push(Anchor { bbox, cell });
        }
    }
    Ok(out)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `logistic(max_k <o[cell], t[k]> / sqrt(D))` for each anchor.
pub fn grounding_scores(o_final: &TokenMatrix, t_final: &TokenMatrix, anchors: &[Anchor]) -> Result<Vec<f64>> {
    if t_final.valid_count() == 0 {
        return Err(Error::NoAttendable);
    }
    if o_final.dim() != t_final.dim() {
        return Err(Error::config("image and text widths differ"));
    }
    let scale = 1.0 / (o_final.dim() as f64).sqrt();
    let cell_scores: Vec<f64> = (0..o_final.rows())
        .map(|j| {
            let best = t_final
                .valid_indices()
                .map(|k| dot(o_final.row(j), t_final.row(k)))
                .fold(f64::NEG_INFINITY, f64::max);
            logistic(best * scale)
        })
        .collect();
    anchors
        .iter()
        .map(|a| {
            cell_scores.get(a.cell).copied().ok_or(Error::IndexOutOfRange {
                index: a.cell,
                len: cell_scores.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    pub category: String,
    /// Position in the anchor list; breaks score ties.
    pub anchor: usize,
}

/// Greedy per-category suppression in descending score order (ties by lower
/// anchor index). Survivors keep their scores and come back in that order.
pub fn nms(proposals: &[Proposal], iou_threshold: f64) -> Vec<Proposal> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .score
            .total_cmp(&proposals[a].score)
            .then(proposals[a].anchor.cmp(&proposals[b].anchor))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Proposal> = Vec::new();
    for i in order {
        let p = &proposals[i];
        let suppressed = kept
            .iter()
            .any(|k| k.category == p.category && iou(&k.bbox, &p.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(p.clone());
        }
    }
    kept
}

/// Proposals together with the forward pass that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub proposals: Vec<Proposal>,
    pub forward: ForwardOutput,
}

pub fn detect_with_forward(
    image: &ToyImage,
    target_text: &str,
    bank: &KnowledgeBank,
    weights: &ModelWeights,
    config: &DetectionConfig,
) -> Result<Detection> {
    let fwd = forward(image, target_text, bank, weights, config)?;
    let anchors = anchor_grid(image.width(), image.height(), config.patch, &config.anchor_scales)?;
    let scores = grounding_scores(&fwd.o_final, &fwd.t_final, &anchors)?;
    let candidates: Vec<Proposal> = anchors
        .iter()
        .zip(&scores)
        .enumerate()
        .filter(|(_, (_, s))| **s >= config.score_threshold)
        .map(|(i, (a, s))| Proposal {
            bbox: a.bbox,
            score: *s,
            category: target_text.to_string(),
            anchor: i,
        })
        .collect();
    Ok(Detection {
        proposals: nms(&candidates, config.nms_iou),
        forward: fwd,
    })
}

pub fn detect(
    image: &ToyImage,
    target_text: &str,
    bank: &KnowledgeBank,
    weights: &ModelWeights,
    config: &DetectionConfig,
) -> Result<Vec<Proposal>> {
    detect_with_forward(image, target_text, bank, weights, config).map(|d| d.proposals)
}
