//! Model parameters: the patch embedder, per-layer image/text encoder blocks
//! and the two cross-modal attention directions.
//!
//! On disk the weights are a JSON manifest (tensor name, shape, offset) next
//! to a flat little-endian `f64` blob.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::DetectionConfig;
use crate::encoding::ImageEmbedder;
use crate::error::{Error, Result};
use crate::numeric::{AttentionParams, EncoderLayerParams, Matrix};

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

/// Deterministic RNG for a named parameter group.
pub fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"promptground-rng");
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Parameters of fusion layer `i`: the image and text encoder blocks plus
/// independent projections for text-to-vision and vision-to-text attention.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub image: EncoderLayerParams,
    pub text: EncoderLayerParams,
    pub t2v: AttentionParams,
    pub v2t: AttentionParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    embedder: ImageEmbedder,
    layers: Vec<LayerWeights>,
    text_seed: u64,
    heads: usize,
    digest: String,
}

// Projection noise around the identity and feed-forward scale for seeded
// initialization.
const PROJ_NOISE: f64 = 0.05;
const FFN_SCALE: f64 = 0.1;
// Query/key gain; larger values keep attention peaked on matching tokens
// instead of averaging a whole stream.
const QK_GAIN: f64 = 2.0;
// Attention output gain: attended values enter each residual as a small
// perturbation, so six post-norm layers do not smooth a stream into one vector.
const OUT_GAIN: f64 = 0.1;

impl ModelWeights {
    pub fn new(embedder: ImageEmbedder, layers: Vec<LayerWeights>, text_seed: u64, heads: usize) -> Result<Self> {
        let dim = embedder.dim();
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("{heads} heads do not divide width {dim}")));
        }
        for (i, l) in layers.iter().enumerate() {
            for enc in [&l.image, &l.text] {
                enc.validate()?;
                if enc.dim() != dim {
                    return Err(Error::config(format!("layer {i} width {} != {dim}", enc.dim())));
                }
            }
            for a in [&l.image.self_attn, &l.text.self_attn, &l.t2v, &l.v2t] {
                if a.dim() != dim || a.heads() != heads {
                    return Err(Error::config(format!("layer {i} attention shape mismatch")));
                }
            }
        }
        let mut w = ModelWeights {
            embedder,
            layers,
            text_seed,
            heads,
            digest: String::new(),
        };
        w.digest = w.compute_digest();
        Ok(w)
    }

    /// Seeded near-identity initialization derived from `config.seed`.
    pub fn seeded(config: &DetectionConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let seed = config.seed;
        let embedder = ImageEmbedder::seeded(d, config.patch, config.channels, seed)?;
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let mut rng = rng_for(seed, &format!("layer-{i}"));
            let image = seeded_encoder(&mut rng, d, config.heads, config.eps)?;
            let text = seeded_encoder(&mut rng, d, config.heads, config.eps)?;
            let t2v = seeded_attention(&mut rng, d, config.heads, OUT_GAIN)?;
            let v2t = seeded_attention(&mut rng, d, config.heads, OUT_GAIN)?;
            layers.push(LayerWeights { image, text, t2v, v2t });
        }
        ModelWeights::new(embedder, layers, seed, config.heads)
    }

    pub fn embedder(&self) -> &ImageEmbedder {
        &self.embedder
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &LayerWeights {
        &self.layers[i]
    }

    pub fn text_seed(&self) -> u64 {
        self.text_seed
    }

    pub fn dim(&self) -> usize {
        self.embedder.dim()
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Checks shapes against a configuration.
    pub fn check_config(&self, config: &DetectionConfig) -> Result<()> {
        let checks = [
            ("dim", self.dim(), config.dim),
            ("heads", self.heads, config.heads),
            ("layers", self.layers.len(), config.layers),
            ("patch", self.embedder.patch(), config.patch),
            ("channels", self.embedder.channels(), config.channels),
        ];
        for (name, have, want) in checks {
            if have != want {
                return Err(Error::config(format!(
                    "weights have {name} = {have}, config expects {want}"
                )));
            }
        }
        Ok(())
    }

    /// Flat tensor listing in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        let mat = |m: &Matrix| (vec![m.rows(), m.cols()], m.data().to_vec());
        let (s, v) = mat(self.embedder.weight());
        out.push(("embed.weight".to_string(), s, v));
        out.push(("embed.bias".to_string(), vec![self.dim()], self.embedder.bias().to_vec()));
        for (i, l) in self.layers.iter().enumerate() {
            for (side, enc) in [("image", &l.image), ("text", &l.text)] {
                let p = format!("layers.{i}.{side}");
                for (n, m) in enc.self_attn.projections() {
                    let (s, v) = mat(m);
                    out.push((format!("{p}.attn.{n}"), s, v));
                }
                let (s, v) = mat(&enc.ffn_w1);
                out.push((format!("{p}.ffn_w1"), s, v));
                let (s, v) = mat(&enc.ffn_w2);
                out.push((format!("{p}.ffn_w2"), s, v));
                for (n, vec) in [
                    ("ln1.gain", &enc.ln1_gain),
                    ("ln1.bias", &enc.ln1_bias),
                    ("ln2.gain", &enc.ln2_gain),
                    ("ln2.bias", &enc.ln2_bias),
                ] {
                    out.push((format!("{p}.{n}"), vec![vec.len()], vec.clone()));
                }
            }
            for (side, a) in [("t2v", &l.t2v), ("v2t", &l.v2t)] {
                for (n, m) in a.projections() {
                    let (s, v) = mat(m);
                    out.push((format!("layers.{i}.{side}.{n}"), s, v));
                }
            }
        }
        out
    }

    fn compute_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"promptground-weights-v1");
        h.update(self.text_seed.to_le_bytes());
        h.update((self.heads as u64).to_le_bytes());
        h.update((self.embedder.patch() as u64).to_le_bytes());
        h.update((self.embedder.channels() as u64).to_le_bytes());
        for (name, shape, data) in self.tensors() {
            h.update(name.as_bytes());
            for s in shape {
                h.update((s as u64).to_le_bytes());
            }
            for v in data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes `<path>` (manifest) and `<path>.bin` (blob).
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let blob_path = blob_path_for(manifest_path);
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, data) in self.tensors() {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: blob.len() / 8,
            });
            for v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = WeightsManifest {
            format_version: WEIGHTS_FORMAT_VERSION,
            dim: self.dim(),
            heads: self.heads,
            layers: self.layers.len(),
            patch: self.embedder.patch(),
            channels: self.embedder.channels(),
            text_seed: self.text_seed,
            eps: self.layers.first().map_or(1e-5, |l| l.image.eps),
            blob: blob_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            blob_sha256: hex::encode(Sha256::digest(&blob)),
            digest: self.digest.clone(),
            tensors,
        };
        std::fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))
    }

    /// Loads weights and validates them against `config`.
    pub fn load(manifest_path: &Path, config: &DetectionConfig) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: WeightsManifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("weights manifest: {e}")))?;
        if manifest.format_version != WEIGHTS_FORMAT_VERSION {
            return Err(Error::format(format!(
                "weights format version {} (expected {WEIGHTS_FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let blob_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.blob);
        let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 || blob.len() % 8 != 0 {
            return Err(Error::Integrity(format!("{} checksum mismatch", blob_path.display())));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut table = BTreeMap::new();
        for t in &manifest.tensors {
            let n: usize = t.shape.iter().product();
            let slice = values
                .get(t.offset..t.offset + n)
                .ok_or_else(|| Error::Integrity(format!("tensor {} exceeds blob", t.name)))?;
            table.insert(t.name.clone(), (t.shape.clone(), slice.to_vec()));
        }
        let weights = from_table(&manifest, &mut table)?;
        if weights.digest != manifest.digest {
            return Err(Error::Integrity("weights digest mismatch".into()));
        }
        weights.check_config(config)?;
        Ok(weights)
    }
}

pub fn blob_path_for(manifest_path: &Path) -> PathBuf {
    let mut name = manifest_path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".bin");
    manifest_path.with_file_name(name)
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsManifest {
    format_version: u32,
    dim: usize,
    heads: usize,
    layers: usize,
    patch: usize,
    channels: usize,
    text_seed: u64,
    eps: f64,
    blob: String,
    blob_sha256: String,
    digest: String,
    tensors: Vec<TensorEntry>,
}

type Table = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

fn take_matrix(t: &mut Table, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let (shape, data) = t
        .remove(name)
        .ok_or_else(|| Error::format(format!("missing tensor {name}")))?;
    if shape != [rows, cols] {
        return Err(Error::config(format!(
            "tensor {name} has shape {shape:?}, expected [{rows}, {cols}]"
        )));
    }
    Matrix::new(rows, cols, data)
}

fn take_vec(t: &mut Table, name: &str, len: usize) -> Result<Vec<f64>> {
    let (shape, data) = t
        .remove(name)
        .ok_or_else(|| Error::format(format!("missing tensor {name}")))?;
    if shape != [len] {
        return Err(Error::config(format!(
            "tensor {name} has shape {shape:?}, expected [{len}]"
        )));
    }
    Ok(data)
}

fn take_attention(t: &mut Table, prefix: &str, d: usize, heads: usize) -> Result<AttentionParams> {
    AttentionParams::new(
        heads,
        take_matrix(t, &format!("{prefix}.w_q"), d, d)?,
        take_matrix(t, &format!("{prefix}.w_k"), d, d)?,
        take_matrix(t, &format!("{prefix}.w_v"), d, d)?,
        take_matrix(t, &format!("{prefix}.w_o"), d, d)?,
    )
}

fn from_table(m: &WeightsManifest, t: &mut Table) -> Result<ModelWeights> {
    let d = m.dim;
    let pixels = m.patch * m.patch * m.channels;
    let embedder = ImageEmbedder::new(
        take_matrix(t, "embed.weight", pixels, d)?,
        take_vec(t, "embed.bias", d)?,
        m.patch,
        m.channels,
    )?;
    let mut layers = Vec::with_capacity(m.layers);
    for i in 0..m.layers {
        let mut enc = |side: &str| -> Result<EncoderLayerParams> {
            let p = format!("layers.{i}.{side}");
            let self_attn = take_attention(t, &format!("{p}.attn"), d, m.heads)?;
            let ffn_w1 = take_matrix(t, &format!("{p}.ffn_w1"), d, 4 * d)?;
            let ffn_w2 = take_matrix(t, &format!("{p}.ffn_w2"), 4 * d, d)?;
            Ok(EncoderLayerParams {
                self_attn,
                ffn_w1,
                ffn_w2,
                ln1_gain: take_vec(t, &format!("{p}.ln1.gain"), d)?,
                ln1_bias: take_vec(t, &format!("{p}.ln1.bias"), d)?,
                ln2_gain: take_vec(t, &format!("{p}.ln2.gain"), d)?,
                ln2_bias: take_vec(t, &format!("{p}.ln2.bias"), d)?,
                eps: m.eps,
            })
        };
        let image = enc("image")?;
        let text = enc("text")?;
        let t2v = take_attention(t, &format!("layers.{i}.t2v"), d, m.heads)?;
        let v2t = take_attention(t, &format!("layers.{i}.v2t"), d, m.heads)?;
        layers.push(LayerWeights { image, text, t2v, v2t });
    }
    if let Some(extra) = t.keys().next() {
        return Err(Error::format(format!("unexpected tensor {extra}")));
    }
    ModelWeights::new(embedder, layers, m.text_seed, m.heads)
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| { let z: f64 = StandardNormal.sample(&mut *rng); std * z })
        .collect();
    Matrix::new(rows, cols, data).expect("shape")
}

fn near_identity(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
    let mut m = gaussian(rng, d, d, PROJ_NOISE / (d as f64).sqrt());
    for i in 0..d {
        m.set(i, i, m.get(i, i) + 1.0);
    }
    m
}

fn seeded_attention(rng: &mut ChaCha8Rng, d: usize, heads: usize, out_gain: f64) -> Result<AttentionParams> {
    let w_q = near_identity(rng, d).scaled(QK_GAIN);
    let w_k = near_identity(rng, d).scaled(QK_GAIN);
    let w_v = near_identity(rng, d);
    let w_o = near_identity(rng, d).scaled(out_gain);
    AttentionParams::new(heads, w_q, w_k, w_v, w_o)
}

fn seeded_encoder(rng: &mut ChaCha8Rng, d: usize, heads: usize, eps: f64) -> Result<EncoderLayerParams> {
    let self_attn = seeded_attention(rng, d, heads, OUT_GAIN)?;
    let ffn_w1 = gaussian(rng, d, 4 * d, FFN_SCALE / (d as f64).sqrt());
    let ffn_w2 = gaussian(rng, 4 * d, d, FFN_SCALE / ((4 * d) as f64).sqrt());
    Ok(EncoderLayerParams {
        self_attn,
        ffn_w1,
        ffn_w2,
        ln1_gain: vec![1.0; d],
        ln1_bias: vec![0.0; d],
        ln2_gain: vec![1.0; d],
        ln2_bias: vec![0.0; d],
        eps,
    })
}
