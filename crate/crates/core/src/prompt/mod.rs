//! Prompt generation: per-image attribute answers, per-category attribute
//! expansion, and the persisted prompt bank that feeds the knowledge bank.

pub mod client;
pub mod fixtures;
pub mod forge;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bank::AttributeKind;
use crate::error::{Error, Result};

pub const PROMPT_BANK_SCHEMA: u32 = 1;

/// Where a term came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Vqa,
    Llm,
    Fixture,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub term: String,
    pub source: Source,
}

/// An instance-level term with the attribute kind of the question it answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaggedTerm {
    pub term: String,
    pub kind: AttributeKind,
    pub source: Source,
}

/// Four ordered attribute columns; the first occurrence of a term wins.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSet {
    #[serde(default)]
    pub colors: Vec<Term>,
    #[serde(default)]
    pub shapes: Vec<Term>,
    #[serde(default)]
    pub textures: Vec<Term>,
    #[serde(default)]
    pub locations: Vec<Term>,
}

impl AttributeSet {
    pub fn column(&self, kind: AttributeKind) -> &[Term] {
        match kind {
            AttributeKind::Color => &self.colors,
            AttributeKind::Shape => &self.shapes,
            AttributeKind::Texture => &self.textures,
            AttributeKind::Location => &self.locations,
            AttributeKind::Other | AttributeKind::Pad => &[],
        }
    }

    fn column_mut(&mut self, kind: AttributeKind) -> Result<&mut Vec<Term>> {
        match kind {
            AttributeKind::Color => Ok(&mut self.colors),
            AttributeKind::Shape => Ok(&mut self.shapes),
            AttributeKind::Texture => Ok(&mut self.textures),
            AttributeKind::Location => Ok(&mut self.locations),
            other => Err(Error::config(format!("`{other}` is not an attribute column"))),
        }
    }

    /// Appends `term` unless the column already holds it. Returns whether it was added.
    pub fn push(&mut self, kind: AttributeKind, term: &str, source: Source) -> Result<bool> {
        let col = self.column_mut(kind)?;
        if col.iter().any(|t| t.term == term) {
            return Ok(false);
        }
        col.push(Term {
            term: term.to_string(),
            source,
        });
        Ok(true)
    }

    pub fn extend(&mut self, kind: AttributeKind, terms: &[String], source: Source) -> Result<()> {
        for t in terms {
            self.push(kind, t, source)?;
        }
        Ok(())
    }

    pub fn terms(&self, kind: AttributeKind) -> Vec<&str> {
        self.column(kind).iter().map(|t| t.term.as_str()).collect()
    }

    pub fn is_empty(&self) -> bool {
        AttributeKind::DESCRIPTIVE
            .iter()
            .all(|k| self.column(*k).is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptBank {
    pub schema_version: u32,
    pub categories: BTreeMap<String, AttributeSet>,
    /// category -> image id -> instance terms in question order.
    #[serde(default)]
    pub instances: BTreeMap<String, BTreeMap<String, Vec<TaggedTerm>>>,
}

impl Default for PromptBank {
    fn default() -> Self {
        PromptBank {
            schema_version: PROMPT_BANK_SCHEMA,
            categories: BTreeMap::new(),
            instances: BTreeMap::new(),
        }
    }
}

fn check_term(term: &str, at: &str) -> Result<()> {
    if term.trim().is_empty() {
        return Err(Error::format(format!("{at}: empty term")));
    }
    if term.chars().any(|c| c.is_uppercase()) {
        return Err(Error::format(format!("{at}: term `{term}` is not lowercase")));
    }
    Ok(())
}

impl PromptBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != PROMPT_BANK_SCHEMA {
            return Err(Error::format(format!(
                "prompt bank schema {} (expected {PROMPT_BANK_SCHEMA})",
                self.schema_version
            )));
        }
        for (cat, set) in &self.categories {
            for kind in AttributeKind::DESCRIPTIVE {
                for t in set.column(kind) {
                    check_term(&t.term, &format!("categories.{cat}.{}", kind.plural()))?;
                }
            }
        }
        for (cat, images) in &self.instances {
            if !self.categories.contains_key(cat) {
                return Err(Error::format(format!("instances.{cat}: unknown category")));
            }
            for (img, terms) in images {
                for t in terms {
                    let at = format!("instances.{cat}.{img}");
                    check_term(&t.term, &at)?;
                    if !AttributeKind::DESCRIPTIVE.contains(&t.kind) {
                        return Err(Error::format(format!("{at}.kind: `{}` is not an attribute column", t.kind)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Instance term lists for `category`, in image-id order.
    pub fn instance_prompts(&self, category: &str) -> Vec<Vec<TaggedTerm>> {
        self.instances
            .get(category)
            .map(|m| m.values().cloned().collect())
            .unwrap_or_default()
    }

    /// Prompt text and token tags for one category.
    pub fn category_prompt(&self, category: &str, max_tokens: usize) -> Result<(String, Vec<AttributeKind>)> {
        let set = self
            .categories
            .get(category)
            .ok_or_else(|| Error::config(format!("no category `{category}` in prompt bank")))?;
        forge::build_category_prompt(category, &self.instance_prompts(category), set, max_tokens)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("prompt bank serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(s);
        let bank: PromptBank = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::format(format!("prompt bank at `{}`: {}", e.path(), e.inner())))?;
        bank.validate()?;
        Ok(bank)
    }
}

pub fn save_prompt_bank(bank: &PromptBank, path: &Path) -> Result<()> {
    bank.validate()?;
    std::fs::write(path, bank.to_json()).map_err(|e| Error::io(path, e))
}

pub fn load_prompt_bank(path: &Path) -> Result<PromptBank> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PromptBank::from_json(&s)
}
