//! The auxiliary branch: a prompt encoded once through the shared language
//! encoder stack, with every layer snapshot kept for reuse across images.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::DetectionConfig;
use crate::encoding::{embed_text, tokenize};
use crate::error::{Error, Result};
use crate::numeric::{encoder_layer, Matrix, TokenMatrix};
use crate::weights::ModelWeights;

pub const BANK_FORMAT_VERSION: u32 = 1;
const BANK_MAGIC: &[u8; 4] = b"PGKB";

/// Attribute kind carried by each prompt token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Color,
    Shape,
    Texture,
    Location,
    Other,
    Pad,
}

impl AttributeKind {
    /// The four attribute columns of a category description.
    pub const DESCRIPTIVE: [AttributeKind; 4] = [
        AttributeKind::Color,
        AttributeKind::Shape,
        AttributeKind::Texture,
        AttributeKind::Location,
    ];

    pub const ALL: [AttributeKind; 6] = [
        AttributeKind::Color,
        AttributeKind::Shape,
        AttributeKind::Texture,
        AttributeKind::Location,
        AttributeKind::Other,
        AttributeKind::Pad,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttributeKind::Color => "color",
            AttributeKind::Shape => "shape",
            AttributeKind::Texture => "texture",
            AttributeKind::Location => "location",
            AttributeKind::Other => "other",
            AttributeKind::Pad => "pad",
        }
    }

    /// Plural column name used in prompt documents and client requests.
    pub fn plural(self) -> &'static str {
        match self {
            AttributeKind::Color => "colors",
            AttributeKind::Shape => "shapes",
            AttributeKind::Texture => "textures",
            AttributeKind::Location => "locations",
            AttributeKind::Other => "other",
            AttributeKind::Pad => "pad",
        }
    }
}

impl std::fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AttributeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "color" | "colors" => Ok(AttributeKind::Color),
            "shape" | "shapes" => Ok(AttributeKind::Shape),
            "texture" | "textures" => Ok(AttributeKind::Texture),
            "location" | "locations" => Ok(AttributeKind::Location),
            "other" => Ok(AttributeKind::Other),
            "pad" => Ok(AttributeKind::Pad),
            other => Err(Error::format(format!("unknown attribute kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBank {
    layers: Vec<TokenMatrix>,
    token_tags: Vec<AttributeKind>,
    prompt_text: String,
    weights_digest: String,
    config_digest: String,
    source_digest: String,
}

fn source_digest(prompt: &str, tags: &[AttributeKind], weights: &str, config: &str) -> String {
    let mut h = Sha256::new();
    h.update(b"promptground-bank-v1");
    h.update((prompt.len() as u64).to_le_bytes());
    h.update(prompt.as_bytes());
    for t in tags {
        h.update(t.as_str().as_bytes());
        h.update([0u8]);
    }
    h.update(weights.as_bytes());
    h.update(config.as_bytes());
    hex::encode(h.finalize())
}

/// Encodes `prompt_text` through every text encoder layer of `weights`.
///
/// `tags` gives one attribute kind per prompt token; pad rows are tagged
/// [`AttributeKind::Pad`] automatically.
pub fn build_bank(
    prompt_text: &str,
    tags: &[AttributeKind],
    weights: &ModelWeights,
    config: &DetectionConfig,
) -> Result<KnowledgeBank> {
    weights.check_config(config)?;
    let tokens = tokenize(prompt_text);
    if tokens.len() > config.n_l {
        return Err(Error::Capacity {
            count: tokens.len(),
            limit: config.n_l,
        });
    }
    if tags.len() != tokens.len() {
        return Err(Error::config(format!(
            "{} tags for {} prompt tokens",
            tags.len(),
            tokens.len()
        )));
    }
    if tags.contains(&AttributeKind::Pad) {
        return Err(Error::config("real prompt tokens cannot be tagged pad"));
    }
    let mut layers = Vec::with_capacity(config.layers + 1);
    layers.push(embed_text(&tokens, config.dim, config.n_l, weights.text_seed())?);
    for layer in weights.layers() {
        let next = encoder_layer(layers.last().expect("non-empty"), &layer.text)?;
        layers.push(next);
    }
    let mut token_tags = tags.to_vec();
    token_tags.resize(config.n_l, AttributeKind::Pad);
    let config_digest = config.model_digest();
    let source_digest = source_digest(prompt_text, &token_tags, weights.digest(), &config_digest);
    Ok(KnowledgeBank {
        layers,
        token_tags,
        prompt_text: prompt_text.to_string(),
        weights_digest: weights.digest().to_string(),
        config_digest,
        source_digest,
    })
}

impl KnowledgeBank {
    /// `B^0 ..= B^N`.
    pub fn layers(&self) -> &[TokenMatrix] {
        &self.layers
    }

    pub fn layer(&self, depth: usize) -> &TokenMatrix {
        &self.layers[depth]
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn tags(&self) -> &[AttributeKind] {
        &self.token_tags
    }

    pub fn prompt_text(&self) -> &str {
        &self.prompt_text
    }

    pub fn source_digest(&self) -> &str {
        &self.source_digest
    }

    pub fn weights_digest(&self) -> &str {
        &self.weights_digest
    }

    pub fn config_digest(&self) -> &str {
        &self.config_digest
    }

    pub fn token_count(&self) -> usize {
        self.layers[0].valid_count()
    }

    /// Hash of every stored value, for immutability checks.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            for v in l.matrix().data() {
                h.update(v.to_le_bytes());
            }
            for m in l.mask() {
                h.update([*m as u8]);
            }
        }
        h.update(self.source_digest.as_bytes());
        hex::encode(h.finalize())
    }

    /// Fails with a stale-bank error unless built for these weights and
    /// model configuration.
    pub fn ensure_compatible(&self, weights: &ModelWeights, config: &DetectionConfig) -> Result<()> {
        if self.weights_digest != weights.digest() {
            return Err(Error::Stale {
                what: "bank (weights)",
                expected: weights.digest().to_string(),
                found: self.weights_digest.clone(),
            });
        }
        let cfg = config.model_digest();
        if self.config_digest != cfg {
            return Err(Error::Stale {
                what: "bank (config)",
                expected: cfg,
                found: self.config_digest.clone(),
            });
        }
        if self.layers.len() != config.layers + 1 || self.layers[0].rows() != config.n_l {
            return Err(Error::config("bank shape does not match configuration"));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankHeader {
    source_digest: String,
    weights_digest: String,
    config_digest: String,
    depth: usize,
    n_l: usize,
    dim: usize,
    prompt_text: String,
    tags: Vec<AttributeKind>,
    mask: Vec<bool>,
    blob_sha256: String,
}

/// Writes the bank cache: magic, version, header length, JSON header, then
/// every layer as little-endian `f64`.
pub fn save_bank(bank: &KnowledgeBank, path: &Path) -> Result<()> {
    let mut blob = Vec::new();
    for l in &bank.layers {
        for v in l.matrix().data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = BankHeader {
        source_digest: bank.source_digest.clone(),
        weights_digest: bank.weights_digest.clone(),
        config_digest: bank.config_digest.clone(),
        depth: bank.depth(),
        n_l: bank.layers[0].rows(),
        dim: bank.layers[0].dim(),
        prompt_text: bank.prompt_text.clone(),
        tags: bank.token_tags.clone(),
        mask: bank.layers[0].mask().to_vec(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + blob.len());
    out.extend_from_slice(BANK_MAGIC);
    out.extend_from_slice(&BANK_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn load_bank(path: &Path) -> Result<KnowledgeBank> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bank(&bytes)
}

/// Loads a cached bank and rejects it if it was built for other weights or
/// another model configuration.
pub fn load_bank_checked(
    path: &Path,
    weights: &ModelWeights,
    config: &DetectionConfig,
) -> Result<KnowledgeBank> {
    let bank = load_bank(path)?;
    bank.ensure_compatible(weights, config)?;
    Ok(bank)
}

fn decode_bank(bytes: &[u8]) -> Result<KnowledgeBank> {
    if bytes.len() < 16 || &bytes[..4] != BANK_MAGIC {
        return Err(Error::Integrity("not a knowledge bank file (bad magic or truncated)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != BANK_FORMAT_VERSION {
        return Err(Error::format(format!(
            "bank format version {version} (expected {BANK_FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_bytes = bytes
        .get(16..16usize.saturating_add(header_len))
        .ok_or_else(|| Error::Integrity("truncated bank header".into()))?;
    let header: BankHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Integrity(format!("bank header: {e}")))?;
    let blob = &bytes[16 + header_len..];
    let per_layer = header.n_l * header.dim;
    let expected = (header.depth + 1) * per_layer * 8;
    if blob.len() != expected {
        return Err(Error::Integrity(format!(
            "bank blob has {} bytes, expected {expected}",
            blob.len()
        )));
    }
    if hex::encode(Sha256::digest(blob)) != header.blob_sha256 {
        return Err(Error::Integrity("bank blob checksum mismatch".into()));
    }
    if header.tags.len() != header.n_l || header.mask.len() != header.n_l {
        return Err(Error::Integrity("bank tag/mask length mismatch".into()));
    }
    let recomputed = source_digest(
        &header.prompt_text,
        &header.tags,
        &header.weights_digest,
        &header.config_digest,
    );
    if recomputed != header.source_digest {
        return Err(Error::Integrity("bank source digest mismatch".into()));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let layers = values
        .chunks_exact(per_layer)
        .map(|chunk| {
            let m = Matrix::new(header.n_l, header.dim, chunk.to_vec())?;
            TokenMatrix::new(m, header.mask.clone())
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Integrity(format!("bank layer: {e}")))?;
    Ok(KnowledgeBank {
        layers,
        token_tags: header.tags,
        prompt_text: header.prompt_text,
        weights_digest: header.weights_digest,
        config_digest: header.config_digest,
        source_digest: header.source_digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(layers: usize) -> (ModelWeights, DetectionConfig) {
        let config = DetectionConfig {
            dim: 8,
            heads: 2,
            layers,
            n_l: 6,
            ..Default::default()
        };
        (ModelWeights::seeded(&config).unwrap(), config)
    }

    fn tags(n: usize) -> Vec<AttributeKind> {
        (0..n).map(|i| AttributeKind::DESCRIPTIVE[i % 4]).collect()
    }

    #[test]
    fn zero_layers_is_the_embedding() {
        let (w, c) = setup(0);
        let bank = build_bank("pink oval", &tags(2), &w, &c).unwrap();
        assert_eq!(bank.layers().len(), 1);
        assert_eq!(bank.layer(0), &embed_text(&tokenize("pink oval"), 8, 6, w.text_seed()).unwrap());
        assert_eq!(bank.tags()[2..], [AttributeKind::Pad; 4]);
    }

    #[test]
    fn layers_unroll_the_text_stack() {
        let (w, c) = setup(2);
        let bank = build_bank("pink oval smooth", &tags(3), &w, &c).unwrap();
        let l1 = encoder_layer(bank.layer(0), &w.layer(0).text).unwrap();
        let l2 = encoder_layer(&l1, &w.layer(1).text).unwrap();
        assert_eq!(bank.layer(2), &l2);
        for l in bank.layers() {
            assert_eq!(l.mask(), bank.layer(0).mask());
        }
        let again = build_bank("pink oval smooth", &tags(3), &w, &c).unwrap();
        assert_eq!(again, bank);
        assert_eq!(again.source_digest(), bank.source_digest());
    }

    #[test]
    fn overflow_reports_count() {
        let (w, c) = setup(1);
        let err = build_bank("a b c d e f g h", &tags(8), &w, &c).unwrap_err();
        assert!(matches!(err, Error::Capacity { count: 8, limit: 6 }));
        assert!(err.to_string().contains("2 over"));
    }

    #[test]
    fn cache_round_trip_and_corruption() {
        let (w, c) = setup(2);
        let bank = build_bank("red round", &tags(2), &w, &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.kb");
        save_bank(&bank, &path).unwrap();
        let back = load_bank_checked(&path, &w, &c).unwrap();
        assert_eq!(back, bank);
        assert_eq!(back.content_hash(), bank.content_hash());

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_bank(&path), Err(Error::Integrity(_))));

        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(load_bank(&path), Err(Error::Integrity(_))));

        let mut versioned = bytes.clone();
        versioned[4] = 9;
        std::fs::write(&path, &versioned).unwrap();
        assert!(matches!(load_bank(&path), Err(Error::Format(_))));
    }

    #[test]
    fn stale_cache_detected() {
        let (w, c) = setup(2);
        let bank = build_bank("red round", &tags(2), &w, &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.kb");
        save_bank(&bank, &path).unwrap();

        let other_cfg = DetectionConfig { n_l: 7, ..c.clone() };
        let err = load_bank_checked(&path, &w, &other_cfg).unwrap_err();
        assert!(matches!(err, Error::Stale { .. }));

        let other_w = ModelWeights::seeded(&DetectionConfig { seed: 5, ..c.clone() }).unwrap();
        let err = load_bank_checked(&path, &other_w, &c).unwrap_err();
        assert!(matches!(err, Error::Stale { .. }));
    }

    #[test]
    fn tag_count_must_match_tokens() {
        let (w, c) = setup(1);
        assert!(build_bank("red round", &tags(1), &w, &c).is_err());
    }
}
