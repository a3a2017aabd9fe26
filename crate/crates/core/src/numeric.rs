//! Dense numeric kernels: row softmax, layer normalization, multi-head
//! attention and the post-norm encoder block shared by the image and text
//! streams.
//!
//! Everything here is a pure function of its arguments. Masked rows are never
//! deleted; they are excluded from attention through `-inf` logits and passed
//! through the encoder block untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::config("ragged rows"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::config(format!(
                "matmul shape mismatch: {}x{} · {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (oj, &bkj) in o.iter_mut().zip(rhs.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        Ok(out)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A sequence of embedded tokens with a per-row validity mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMatrix {
    data: Matrix,
    mask: Vec<bool>,
}

impl TokenMatrix {
    pub fn new(data: Matrix, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != data.rows() {
            return Err(Error::config(format!(
                "mask length {} does not match {} rows",
                mask.len(),
                data.rows()
            )));
        }
        if data.rows() == 0 || data.cols() == 0 {
            return Err(Error::config("token matrix must have rows > 0 and dim > 0"));
        }
        if !data.is_finite() {
            return Err(Error::NumericDomain(
                "token matrix contains non-finite entries".into(),
            ));
        }
        Ok(TokenMatrix { data, mask })
    }

    /// All rows valid.
    pub fn dense(data: Matrix) -> Result<Self> {
        let mask = vec![true; data.rows()];
        TokenMatrix::new(data, mask)
    }

    pub fn rows(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.then_some(i))
    }

    pub(crate) fn into_parts(self) -> (Matrix, Vec<bool>) {
        (self.data, self.mask)
    }

    /// Crate-internal unchecked constructor for kernels whose outputs are
    /// finite by construction of finite inputs.
    pub(crate) fn from_parts(data: Matrix, mask: Vec<bool>) -> Self {
        debug_assert_eq!(mask.len(), data.rows());
        TokenMatrix { data, mask }
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        if self.data.is_finite() {
            Ok(())
        } else {
            Err(Error::NumericDomain("non-finite value produced".into()))
        }
    }
}

/// Row-wise softmax. Entries may be `-inf` (masked); NaN and `+inf` are
/// rejected, as is a row with no finite entry.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        softmax_in_place(out.row_mut(i))?;
    }
    Ok(out)
}

fn softmax_in_place(row: &mut [f64]) -> Result<()> {
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v.is_nan() || v == f64::INFINITY {
            return Err(Error::NumericDomain(format!("softmax input {v}")));
        }
        max = max.max(v);
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::NoAttendable);
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// Layer normalization over each valid row; masked rows are copied through.
pub fn layer_norm(m: &TokenMatrix, gain: &[f64], bias: &[f64], eps: f64) -> Result<TokenMatrix> {
    let d = m.dim();
    if gain.len() != d || bias.len() != d {
        return Err(Error::config(format!(
            "layer norm parameters have lengths {}/{}, expected {d}",
            gain.len(),
            bias.len()
        )));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::config("layer norm eps must be a positive finite number"));
    }
    let mut out = m.matrix().clone();
    for i in m.valid_indices() {
        norm_row(out.row_mut(i), gain, bias, eps);
    }
    let out = TokenMatrix::from_parts(out, m.mask().to_vec());
    out.check_finite()?;
    Ok(out)
}

fn norm_row(row: &mut [f64], gain: &[f64], bias: &[f64], eps: f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for ((v, g), b) in row.iter_mut().zip(gain).zip(bias) {
        *v = (*v - mean) * inv * g + b;
    }
}

/// Projections of one multi-head attention module. Projections act on row
/// vectors: `q = x · w_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    heads: usize,
    head_dim: usize,
    pub(crate) w_q: Matrix,
    pub(crate) w_k: Matrix,
    pub(crate) w_v: Matrix,
    pub(crate) w_o: Matrix,
}

impl AttentionParams {
    pub fn new(heads: usize, w_q: Matrix, w_k: Matrix, w_v: Matrix, w_o: Matrix) -> Result<Self> {
        let d = w_q.rows();
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("{heads} heads do not divide width {d}")));
        }
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v), ("w_o", &w_o)] {
            if w.rows() != d || w.cols() != d {
                return Err(Error::config(format!(
                    "{name} is {}x{}, expected {d}x{d}",
                    w.rows(),
                    w.cols()
                )));
            }
            if !w.is_finite() {
                return Err(Error::NumericDomain(format!("{name} has non-finite entries")));
            }
        }
        Ok(AttentionParams {
            heads,
            head_dim: d / heads,
            w_q,
            w_k,
            w_v,
            w_o,
        })
    }

    /// Identity projections everywhere.
    pub fn identity(dim: usize, heads: usize) -> Result<Self> {
        let i = Matrix::identity(dim);
        AttentionParams::new(heads, i.clone(), i.clone(), i.clone(), i)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }

    pub fn with_output(mut self, w_o: Matrix) -> Result<Self> {
        if w_o.rows() != self.dim() || w_o.cols() != self.dim() {
            return Err(Error::config("output projection shape mismatch"));
        }
        self.w_o = w_o;
        Ok(self)
    }

    pub fn projections(&self) -> [(&'static str, &Matrix); 4] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ]
    }
}

/// Attention output together with the per-head weight matrices
/// (`query.rows × key_value.rows` each; masked query rows are all zero).
#[derive(Debug, Clone)]
pub struct Attended {
    pub output: TokenMatrix,
    pub weights: Vec<Matrix>,
}

impl Attended {
    /// Mean over heads and valid query rows of the largest attention weight.
    pub fn peak_attention(&self, query_mask: &[bool]) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for w in &self.weights {
            for (i, _) in query_mask.iter().enumerate().filter(|(_, m)| **m) {
                sum += w.row(i).iter().copied().fold(0.0, f64::max);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

pub fn multi_head_attention(
    query: &TokenMatrix,
    key_value: &TokenMatrix,
    params: &AttentionParams,
) -> Result<TokenMatrix> {
    multi_head_attention_with_weights(query, key_value, params).map(|a| a.output)
}

pub fn multi_head_attention_with_weights(
    query: &TokenMatrix,
    key_value: &TokenMatrix,
    params: &AttentionParams,
) -> Result<Attended> {
    let d = params.dim();
    if query.dim() != d || key_value.dim() != d {
        return Err(Error::config(format!(
            "attention width {d} does not match query {} / key-value {}",
            query.dim(),
            key_value.dim()
        )));
    }
    if key_value.valid_count() == 0 {
        return Err(Error::NoAttendable);
    }
    let q = query.matrix().matmul(&params.w_q)?;
    let k = key_value.matrix().matmul(&params.w_k)?;
    let v = key_value.matrix().matmul(&params.w_v)?;
    let hd = params.head_dim;
    let scale = params.scale();
    let nq = query.rows();
    let nk = key_value.rows();
    let kv_mask = key_value.mask();

    let mut concat = Matrix::zeros(nq, d);
    let mut weights = Vec::with_capacity(params.heads);
    let mut logits = vec![0.0; nk];
    for h in 0..params.heads {
        let cols = h * hd..(h + 1) * hd;
        let mut w = Matrix::zeros(nq, nk);
        for i in query.valid_indices() {
            let qi = &q.row(i)[cols.clone()];
            for (j, l) in logits.iter_mut().enumerate() {
                *l = if kv_mask[j] {
                    dot(qi, &k.row(j)[cols.clone()]) * scale
                } else {
                    f64::NEG_INFINITY
                };
            }
            softmax_in_place(&mut logits)?;
            w.row_mut(i).copy_from_slice(&logits);
            let out = &mut concat.row_mut(i)[cols.clone()];
            for (j, &a) in logits.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, vj) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += a * vj;
                }
            }
        }
        weights.push(w);
    }
    let mut output = concat.matmul(&params.w_o)?;
    for i in 0..nq {
        if !query.is_valid(i) {
            output.row_mut(i).fill(0.0);
        }
    }
    let output = TokenMatrix::from_parts(output, query.mask().to_vec());
    output.check_finite()?;
    Ok(Attended { output, weights })
}

/// One post-norm transformer encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub self_attn: AttentionParams,
    /// `D × 4D`
    pub ffn_w1: Matrix,
    /// `4D × D`
    pub ffn_w2: Matrix,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub eps: f64,
}

impl EncoderLayerParams {
    pub fn dim(&self) -> usize {
        self.self_attn.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let hidden = self.ffn_w1.cols();
        if self.ffn_w1.rows() != d || self.ffn_w2.rows() != hidden || self.ffn_w2.cols() != d {
            return Err(Error::config(format!(
                "feed-forward shapes {}x{} / {}x{} inconsistent with width {d}",
                self.ffn_w1.rows(),
                self.ffn_w1.cols(),
                self.ffn_w2.rows(),
                self.ffn_w2.cols()
            )));
        }
        for v in [&self.ln1_gain, &self.ln1_bias, &self.ln2_gain, &self.ln2_bias] {
            if v.len() != d {
                return Err(Error::config("layer norm vector length mismatch"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("layer norm eps must be > 0"));
        }
        Ok(())
    }
}

/// `LN2(h + FFN(h))` with `h = LN1(x + MHA(x, x))`. Masked rows are returned
/// exactly as given.
pub fn encoder_layer(m: &TokenMatrix, params: &EncoderLayerParams) -> Result<TokenMatrix> {
    params.validate()?;
    if m.dim() != params.dim() {
        return Err(Error::config(format!(
            "encoder width {} does not match input width {}",
            params.dim(),
            m.dim()
        )));
    }
    let attn = multi_head_attention(m, m, &params.self_attn)?;
    let h = residual_add(m, &attn)?;
    let h = layer_norm(&h, &params.ln1_gain, &params.ln1_bias, params.eps)?;
    let f = feed_forward(&h, &params.ffn_w1, &params.ffn_w2)?;
    let out = residual_add(&h, &f)?;
    layer_norm(&out, &params.ln2_gain, &params.ln2_bias, params.eps)
}

/// ReLU MLP on valid rows; masked rows map to zero.
fn feed_forward(m: &TokenMatrix, w1: &Matrix, w2: &Matrix) -> Result<TokenMatrix> {
    let hidden = w1.cols();
    let d = w2.cols();
    let mut out = Matrix::zeros(m.rows(), d);
    let mut act = vec![0.0; hidden];
    for i in m.valid_indices() {
        act.fill(0.0);
        for (k, &x) in m.row(i).iter().enumerate() {
            for (a, w) in act.iter_mut().zip(w1.row(k)) {
                *a += x * w;
            }
        }
        let o = out.row_mut(i);
        for (k, &a) in act.iter().enumerate() {
            if a <= 0.0 {
                continue;
            }
            for (oj, w) in o.iter_mut().zip(w2.row(k)) {
                *oj += a * w;
            }
        }
    }
    Ok(TokenMatrix::from_parts(out, m.mask().to_vec()))
}

/// Row-wise sum on valid rows; masked rows keep `base`.
pub(crate) fn residual_add(base: &TokenMatrix, delta: &TokenMatrix) -> Result<TokenMatrix> {
    if base.rows() != delta.rows() || base.dim() != delta.dim() {
        return Err(Error::config("residual shape mismatch"));
    }
    let mut out = base.matrix().clone();
    for i in base.valid_indices() {
        for (o, d) in out.row_mut(i).iter_mut().zip(delta.row(i)) {
            *o += d;
        }
    }
    let out = TokenMatrix::from_parts(out, base.mask().to_vec());
    out.check_finite()?;
    Ok(out)
}
