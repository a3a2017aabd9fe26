//! The forward pass over both streams.
//!
//! Baseline mode runs full cross-modal attention between every image token
//! and the target text at every layer. Structural mode replaces it, at the
//! configured fusion layers, with attention restricted to the mutually
//! selected tokens, re-integrated as residuals; other layers run the two
//! encoder stacks independently.
//!
//! Layer `l` (1-based) consumes depth `l - 1` representations: `O^{l-1}`,
//! `T^{l-1}` and bank snapshot `B^{l-1}`.

use serde::{Deserialize, Serialize};

use crate::bank::{AttributeKind, KnowledgeBank};
use crate::config::{DetectionConfig, Mode};
use crate::encoding::{embed_image, embed_text, tokenize, ToyImage};
use crate::error::{Error, Result};
use crate::numeric::{
    encoder_layer, multi_head_attention, multi_head_attention_with_weights, residual_add, Matrix,
    TokenMatrix,
};
use crate::selection::{select_prompt_top_q, select_visual_top_p};
use crate::weights::{LayerWeights, ModelWeights};

/// What one fused layer selected, and how concentrated its attention was.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    /// 1-based layer index.
    pub layer: usize,
    pub visual_indices: Vec<usize>,
    pub prompt_indices: Vec<usize>,
    pub visual_scores: Vec<f64>,
    pub prompt_scores: Vec<f64>,
    pub prompt_tags: Vec<AttributeKind>,
    /// Selected image tokens attending to the target text.
    pub mean_attention_t2v: f64,
    /// Selected prompt tokens attending to the image.
    pub mean_attention_v2t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub o_final: TokenMatrix,
    pub t_final: TokenMatrix,
    pub traces: Vec<SelectionTrace>,
}

/// Full cross-modal attention followed by each stream's encoder block.
pub fn glip_layer(
    o: &TokenMatrix,
    p: &TokenMatrix,
    weights: &LayerWeights,
) -> Result<(TokenMatrix, TokenMatrix)> {
    let o_t2v = multi_head_attention(o, p, &weights.t2v)?;
    let p_v2t = multi_head_attention(p, o, &weights.v2t)?;
    let o_next = encoder_layer(&residual_add(o, &o_t2v)?, &weights.image)?;
    let p_next = encoder_layer(&residual_add(p, &p_v2t)?, &weights.text)?;
    Ok((o_next, p_next))
}

/// Adds fused row `k` to row `indices[k]` of `o`; other rows are untouched.
pub fn scatter_residual(o: &TokenMatrix, fused: &Matrix, indices: &[usize]) -> Result<TokenMatrix> {
    if fused.rows() != indices.len() {
        return Err(Error::config(format!(
            "{} fused rows for {} indices",
            fused.rows(),
            indices.len()
        )));
    }
    if !indices.is_empty() && fused.cols() != o.dim() {
        return Err(Error::config("fused width does not match image width"));
    }
    let (mut data, mask) = o.clone().into_parts();
    for (k, &j) in indices.iter().enumerate() {
        if j >= data.rows() {
            return Err(Error::IndexOutOfRange {
                index: j,
                len: data.rows(),
            });
        }
        for (x, f) in data.row_mut(j).iter_mut().zip(fused.row(k)) {
            *x += f;
        }
    }
    TokenMatrix::new(data, mask)
}

/// Adds the mean of the fused rows to every valid row of `t`.
pub fn pool_broadcast_residual(t: &TokenMatrix, fused: &Matrix) -> Result<TokenMatrix> {
    if fused.rows() == 0 {
        return Err(Error::config("no fused rows to pool"));
    }
    if fused.cols() != t.dim() {
        return Err(Error::config("fused width does not match text width"));
    }
    let mut pooled = vec![0.0; t.dim()];
    for k in 0..fused.rows() {
        for (p, f) in pooled.iter_mut().zip(fused.row(k)) {
            *p += f;
        }
    }
    let n = fused.rows() as f64;
    pooled.iter_mut().for_each(|p| *p /= n);
    let (mut data, mask) = t.clone().into_parts();
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        for (x, p) in data.row_mut(i).iter_mut().zip(&pooled) {
            *x += p;
        }
    }
    TokenMatrix::new(data, mask)
}

/// One selected-token fusion layer.
pub fn structural_layer(
    o: &TokenMatrix,
    t: &TokenMatrix,
    bank_layer: &TokenMatrix,
    bank_tags: &[AttributeKind],
    weights: &LayerWeights,
    config: &DetectionConfig,
    layer: usize,
) -> Result<(TokenMatrix, TokenMatrix, SelectionTrace)> {
    let reduction = config.selection_reduction;
    let kv = select_visual_top_p(o, bank_layer, config.top_p, reduction)?;
    let kl = select_prompt_top_q(bank_layer, &kv, config.top_q, reduction)?;

    let kv_tokens = kv.as_tokens()?;
    let kl_tokens = kl.as_tokens()?;
    let fused_o = multi_head_attention_with_weights(&kv_tokens, t, &weights.t2v)?;
    let fused_t = multi_head_attention_with_weights(&kl_tokens, o, &weights.v2t)?;

    let o_res = scatter_residual(o, fused_o.output.matrix(), &kv.indices)?;
    let t_res = pool_broadcast_residual(t, fused_t.output.matrix())?;
    let o_next = encoder_layer(&o_res, &weights.image)?;
    let t_next = encoder_layer(&t_res, &weights.text)?;

    let trace = SelectionTrace {
        layer,
        prompt_tags: kl.indices.iter().map(|&i| bank_tags[i]).collect(),
        mean_attention_t2v: fused_o.peak_attention(kv_tokens.mask()),
        mean_attention_v2t: fused_t.peak_attention(kl_tokens.mask()),
        visual_indices: kv.indices,
        prompt_indices: kl.indices,
        visual_scores: kv.scores,
        prompt_scores: kl.scores,
    };
    Ok((o_next, t_next, trace))
}

/// Initial target-text representation `T^0`.
pub fn embed_target(target_text: &str, weights: &ModelWeights, config: &DetectionConfig) -> Result<TokenMatrix> {
    embed_text(&tokenize(target_text), config.dim, config.n_l, weights.text_seed())
}

pub fn forward(
    image: &ToyImage,
    target_text: &str,
    bank: &KnowledgeBank,
    weights: &ModelWeights,
    config: &DetectionConfig,
) -> Result<ForwardOutput> {
    bank.ensure_compatible(weights, config)?;
    weights.check_config(config)?;
    let mut o = embed_image(image, weights.embedder())?;
    let mut t = embed_target(target_text, weights, config)?;
    if t.valid_count() == 0 {
        return Err(Error::EmptyPrompt("target text has no tokens".into()));
    }
    let fused = config.fusion_set();
    let mut traces = Vec::new();
    for (i, lw) in weights.layers().iter().enumerate() {
        let layer = i + 1;
        (o, t) = match config.mode {
            Mode::Baseline => glip_layer(&o, &t, lw)?,
            Mode::Structural if fused.contains(&layer) => {
                let (o2, t2, trace) =
                    structural_layer(&o, &t, bank.layer(i), bank.tags(), lw, config, layer)?;
                traces.push(trace);
                (o2, t2)
            }
            Mode::Structural => (encoder_layer(&o, &lw.image)?, encoder_layer(&t, &lw.text)?),
        };
    }
    Ok(ForwardOutput {
        o_final: o,
        t_final: t,
        traces,
    })
}
