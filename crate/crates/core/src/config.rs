//! Detection configuration: one flat document, loadable from TOML, with
//! environment overrides (`PROMPTGROUND_<FIELD>`) layered on top.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "PROMPTGROUND_";

/// `PROMPTGROUND_*` variables that configure clients, not the model.
pub const CLIENT_ENV_VARS: [&str; 3] = ["VQA_ENDPOINT", "LLM_ENDPOINT", "API_KEY"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Full cross-modal attention between image and target text at every layer.
    Baseline,
    /// Selected-token fusion against the prompt knowledge bank.
    Structural,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "structural" => Ok(Mode::Structural),
            other => Err(Error::config(format!("unknown mode `{other}`"))),
        }
    }
}

/// How a candidate's similarity vector against the reference rows collapses
/// to one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Max,
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Reduction::Max),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::config(format!("unknown reduction `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Padded language length shared by the target text and the prompt bank.
    pub n_l: usize,
    pub patch: usize,
    pub channels: usize,
    pub eps: f64,
    pub top_p: usize,
    pub top_q: usize,
    /// 1-based layer indices; `None` fuses at every layer.
    pub fusion_layers: Option<Vec<usize>>,
    pub selection_reduction: Reduction,
    pub mode: Mode,
    pub seed: u64,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub anchor_scales: Vec<f64>,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            dim: 32,
            heads: 4,
            layers: 6,
            n_l: 64,
            patch: 4,
            channels: 3,
            eps: 1e-5,
            top_p: 10,
            top_q: 10,
            fusion_layers: None,
            selection_reduction: Reduction::Max,
            mode: Mode::Structural,
            seed: 0,
            nms_iou: 0.5,
            score_threshold: 0.05,
            anchor_scales: vec![1.0],
        }
    }
}

impl DetectionConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: DetectionConfig =
            toml::from_str(s).map_err(|e| Error::format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `PROMPTGROUND_*` overrides from the given variables.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            if let Some(field) = k.as_ref().strip_prefix(ENV_PREFIX) {
                if CLIENT_ENV_VARS.contains(&field) {
                    continue;
                }
                self.set_field(&field.to_ascii_lowercase(), v.as_ref())?;
            }
        }
        self.validate()
    }

    /// Sets one field from its textual form (`fusion_layers` takes a
    /// comma-separated list, empty for none, `all` for every layer).
    pub fn set_field(&mut self, field: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(field: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("invalid value `{v}` for {field}")))
        }
        match field {
            "dim" => self.dim = num(field, value)?,
            "heads" => self.heads = num(field, value)?,
            "layers" => self.layers = num(field, value)?,
            "n_l" => self.n_l = num(field, value)?,
            "patch" => self.patch = num(field, value)?,
            "channels" => self.channels = num(field, value)?,
            "eps" => self.eps = num(field, value)?,
            "top_p" => self.top_p = num(field, value)?,
            "top_q" => self.top_q = num(field, value)?,
            "seed" => self.seed = num(field, value)?,
            "nms_iou" => self.nms_iou = num(field, value)?,
            "score_threshold" => self.score_threshold = num(field, value)?,
            "mode" => self.mode = value.trim().parse()?,
            "selection_reduction" => self.selection_reduction = value.trim().parse()?,
            "fusion_layers" => self.fusion_layers = parse_layer_list(value)?,
            "anchor_scales" => {
                self.anchor_scales = value
                    .split(',')
                    .map(|s| num::<f64>(field, s))
                    .collect::<Result<_>>()?
            }
            other => return Err(Error::config(format!("unknown config field `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::config("dim must be at least 2"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "heads ({}) must divide dim ({})",
                self.heads, self.dim
            )));
        }
        if self.n_l == 0 || self.patch == 0 {
            return Err(Error::config("n_l and patch must be positive"));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config("channels must be 1 or 3"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps must be > 0"));
        }
        if self.top_p == 0 || self.top_q == 0 {
            return Err(Error::config("top_p and top_q must be at least 1"));
        }
        if let Some(layers) = &self.fusion_layers {
            if let Some(bad) = layers.iter().find(|&&l| l == 0 || l > self.layers) {
                return Err(Error::config(format!(
                    "fusion layer {bad} outside 1..={}",
                    self.layers
                )));
            }
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::config("nms_iou must lie in (0, 1]"));
        }
        if !self.score_threshold.is_finite() {
            return Err(Error::config("score_threshold must be finite"));
        }
        if self.anchor_scales.is_empty() || self.anchor_scales.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("anchor_scales must be non-empty and positive"));
        }
        Ok(())
    }

    /// The resolved, de-duplicated set of fused layers.
    pub fn fusion_set(&self) -> BTreeSet<usize> {
        match &self.fusion_layers {
            None => (1..=self.layers).collect(),
            Some(v) => v.iter().copied().collect(),
        }
    }

    pub fn pixels_per_patch(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Digest of the fields that shape the model and its knowledge bank.
    /// Selection, fusion placement and post-processing knobs are excluded so
    /// one cached bank serves every ablation cell.
    pub fn model_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"promptground-model-v1");
        for v in [self.dim, self.heads, self.layers, self.n_l, self.patch, self.channels] {
            h.update((v as u64).to_le_bytes());
        }
        h.update(self.eps.to_le_bytes());
        h.update(self.seed.to_le_bytes());
        hex::encode(h.finalize())
    }
}

pub fn parse_layer_list(value: &str) -> Result<Option<Vec<usize>>> {
    let v = value.trim();
    if v.eq_ignore_ascii_case("all") {
        return Ok(None);
    }
    if v.is_empty() || v.eq_ignore_ascii_case("none") {
        return Ok(Some(Vec::new()));
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("invalid fusion layer `{s}`")))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}
