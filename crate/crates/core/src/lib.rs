//! Attribute-prompted grounding detection on toy images.
//!
//! A two-branch model: the main branch fuses image patches with the target
//! name, and an auxiliary knowledge bank holds a category's attribute prompt
//! encoded through the same text layers. In structural mode each fusion layer
//! picks the image tokens most aligned with the bank (Top-P), then the bank
//! tokens most aligned with those (Top-Q), and fuses only those.

pub mod bank;
pub mod config;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod exec;
pub mod fusion;
pub mod harness;
pub mod numeric;
pub mod prompt;
pub mod proposal;
pub mod selection;
pub mod weights;

pub use bank::{build_bank, load_bank, load_bank_checked, save_bank, AttributeKind, KnowledgeBank};
pub use config::{DetectionConfig, Mode, Reduction};
pub use encoding::{embed_image, embed_text, tokenize, ImageEmbedder, ToyImage};
pub use error::{Error, Result};
pub use eval::{evaluate, evaluate_ap, EvalResult, GroundTruthBox, ScoredBox};
pub use exec::ExecPolicy;
pub use fusion::{forward, ForwardOutput, SelectionTrace};
pub use proposal::{detect, iou, nms, BBox, Proposal};
pub use weights::ModelWeights;
