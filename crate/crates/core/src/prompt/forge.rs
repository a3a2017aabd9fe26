//! Instance answers, category expansion, and their merge into prompt text.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::client::{ClientError, LlmClient, LlmRequest, LlmResponse, RetryPolicy, VqaClient, VqaRequest};
use super::{AttributeSet, PromptBank, Source, TaggedTerm};
use crate::bank::AttributeKind;
use crate::encoding::tokenize;
use crate::error::{Error, Result};

/// One VQA question. `label` is the word asked about ("morphology"), `kind`
/// the attribute column its answer lands in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub label: String,
    pub kind: AttributeKind,
    pub text: String,
}

pub fn question_text(label: &str, category: &str) -> String {
    format!("What is the {label} of the {category}?")
}

impl Question {
    pub fn new(label: &str, kind: AttributeKind, category: &str) -> Self {
        Question {
            label: label.to_string(),
            kind,
            text: question_text(label, category),
        }
    }
}

/// One question per attribute column.
pub fn default_questions(category: &str) -> Vec<Question> {
    AttributeKind::DESCRIPTIVE
        .iter()
        .map(|k| Question::new(k.as_str(), *k, category))
        .collect()
}

/// Lowercased, with internal whitespace and punctuation collapsed to hyphens
/// so the term stays a single token.
pub fn normalize_term(raw: &str) -> Option<String> {
    let toks = tokenize(raw);
    if toks.is_empty() {
        None
    } else {
        Some(toks.tokens().join("-"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuestionFailure {
    pub question: String,
    pub error: ClientError,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstancePrompt {
    pub terms: Vec<TaggedTerm>,
    pub failures: Vec<QuestionFailure>,
}

/// Runs `f` over `items` with at most `limit` calls in flight; results keep
/// input order.
fn bounded_map<T: Sync, R: Send>(items: &[T], limit: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let limit = limit.max(1);
    if limit == 1 {
        return items.iter().map(&f).collect();
    }
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(limit) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|it| s.spawn(|| f(it))).collect();
            out.extend(handles.into_iter().map(|h| h.join().expect("client worker panicked")));
        });
    }
    out
}

/// Asks every question about one image. Failed questions are reported in
/// `failures`; the call only fails when no question was answered.
pub fn generate_instance_prompt(
    image_ref: &str,
    questions: &[Question],
    client: &dyn VqaClient,
    retry: RetryPolicy,
    max_in_flight: usize,
) -> Result<InstancePrompt> {
    if questions.is_empty() {
        return Err(Error::config("no questions to ask"));
    }
    let answers = bounded_map(questions, max_in_flight, |q| {
        let req = VqaRequest {
            image_ref: image_ref.to_string(),
            question: q.text.clone(),
        };
        retry.run(|| client.ask(&req))
    });
    let mut out = InstancePrompt {
        terms: Vec::new(),
        failures: Vec::new(),
    };
    for (q, a) in questions.iter().zip(answers) {
        match a.map(|r| normalize_term(&r.answer)) {
            Ok(Some(term)) => out.terms.push(TaggedTerm {
                term,
                kind: q.kind,
                source: Source::Vqa,
            }),
            Ok(None) => out.failures.push(QuestionFailure {
                question: q.text.clone(),
                error: ClientError::NotFound("empty answer".into()),
            }),
            Err(error) => out.failures.push(QuestionFailure {
                question: q.text.clone(),
                error,
            }),
        }
    }
    if out.terms.is_empty() {
        return Err(Error::EmptyPrompt(format!(
            "{image_ref}: all {} questions failed",
            questions.len()
        )));
    }
    Ok(out)
}

/// Accepts `{"terms": [...]}`, a bare JSON array, or a comma-separated list.
pub fn parse_expansion(raw: &str) -> Result<Vec<String>> {
    let trimmed = raw.trim();
    let items: Vec<String> = if trimmed.starts_with('{') {
        serde_json::from_str::<LlmResponse>(trimmed)
            .map(|r| r.terms)
            .map_err(|_| Error::format(format!("unparseable expansion response: {raw}")))?
    } else if trimmed.starts_with('[') {
        serde_json::from_str::<Vec<String>>(trimmed)
            .map_err(|_| Error::format(format!("unparseable expansion response: {raw}")))?
    } else if !trimmed.is_empty() && !trimmed.contains(['{', '}', '[', ']', '\n']) {
        trimmed.split(',').map(str::to_owned).collect()
    } else {
        return Err(Error::format(format!("unparseable expansion response: {raw}")));
    };
    let mut seen = BTreeSet::new();
    Ok(items
        .iter()
        .filter_map(|s| normalize_term(s))
        .filter(|t| seen.insert(t.clone()))
        .collect())
}

pub fn expand_category_attributes(
    category: &str,
    kind: AttributeKind,
    client: &dyn LlmClient,
    retry: RetryPolicy,
) -> Result<Vec<String>> {
    if !AttributeKind::DESCRIPTIVE.contains(&kind) {
        return Err(Error::config(format!("`{kind}` is not an attribute column")));
    }
    let req = LlmRequest {
        category: category.to_string(),
        kind: kind.plural().to_string(),
    };
    let raw = retry.run(|| client.expand(&req))?;
    parse_expansion(&raw)
}

/// Prompt text in column order (colors, shapes, textures, locations); within a
/// column instance terms come first, then expansion terms, each once.
pub fn build_category_prompt(
    category: &str,
    instance_prompts: &[Vec<TaggedTerm>],
    expansions: &AttributeSet,
    max_tokens: usize,
) -> Result<(String, Vec<AttributeKind>)> {
    let mut words: Vec<String> = Vec::new();
    let mut tags = Vec::new();
    for kind in AttributeKind::DESCRIPTIVE {
        let mut seen = BTreeSet::new();
        let instance = instance_prompts
            .iter()
            .flatten()
            .filter(|t| t.kind == kind)
            .map(|t| t.term.as_str());
        let expansion = expansions.column(kind).iter().map(|t| t.term.as_str());
        for term in instance.chain(expansion) {
            let Some(norm) = normalize_term(term) else { continue };
            if seen.insert(norm.clone()) {
                words.push(norm);
                tags.push(kind);
            }
        }
    }
    if words.is_empty() {
        return Err(Error::EmptyPrompt(format!("no attributes for `{category}`")));
    }
    if words.len() > max_tokens {
        return Err(Error::Capacity {
            count: words.len(),
            limit: max_tokens,
        });
    }
    Ok((words.join(" "), tags))
}

/// Appends up to `per_kind` terms of `other` to each column of `clean`,
/// keeping their own column tags.
pub fn mix_noise(clean: &AttributeSet, other: &AttributeSet, per_kind: usize) -> AttributeSet {
    let mut out = clean.clone();
    for kind in AttributeKind::DESCRIPTIVE {
        for t in other.column(kind).iter().take(per_kind) {
            out.push(kind, &t.term, t.source).expect("descriptive column");
        }
    }
    out
}

/// What to ask about one category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryRequest {
    pub category: String,
    /// `(image id, image reference)` pairs for instance questions.
    pub images: Vec<(String, String)>,
    pub questions: Vec<Question>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForgeOptions {
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub llm_source: Source,
}

impl Default for ForgeOptions {
    fn default() -> Self {
        ForgeOptions {
            retry: RetryPolicy::default(),
            max_in_flight: 4,
            llm_source: Source::Llm,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ForgeReport {
    pub bank: PromptBank,
    /// `(category, image id, failure)` for every unanswered question.
    pub failures: Vec<(String, String, QuestionFailure)>,
}

/// Builds a whole prompt bank. Instance answers become instance entries; the
/// category columns hold the merged instance-then-expansion terms.
pub fn forge_prompt_bank(
    requests: &[CategoryRequest],
    vqa: &dyn VqaClient,
    llm: &dyn LlmClient,
    options: ForgeOptions,
) -> Result<ForgeReport> {
    let mut report = ForgeReport::default();
    for req in requests {
        let mut set = AttributeSet::default();
        let mut instances = Vec::new();
        for (image_id, image_ref) in &req.images {
            match generate_instance_prompt(image_ref, &req.questions, vqa, options.retry, options.max_in_flight) {
                Ok(p) => {
                    for f in p.failures {
                        report.failures.push((req.category.clone(), image_id.clone(), f));
                    }
                    instances.push((image_id.clone(), p.terms));
                }
                Err(Error::EmptyPrompt(_)) => {
                    for q in &req.questions {
                        report.failures.push((
                            req.category.clone(),
                            image_id.clone(),
                            QuestionFailure {
                                question: q.text.clone(),
                                error: ClientError::Transport("retries exhausted".into()),
                            },
                        ));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        for (_, terms) in &instances {
            for t in terms {
                set.push(t.kind, &t.term, t.source)?;
            }
        }
        let kinds = AttributeKind::DESCRIPTIVE;
        let expansions = bounded_map(&kinds, options.max_in_flight, |k| {
            expand_category_attributes(&req.category, *k, llm, options.retry)
        });
        for (kind, terms) in kinds.iter().zip(expansions) {
            set.extend(*kind, &terms?, options.llm_source)?;
        }
        if !instances.is_empty() {
            report
                .bank
                .instances
                .insert(req.category.clone(), instances.into_iter().collect());
        }
        report.bank.categories.insert(req.category.clone(), set);
    }
    report.bank.validate()?;
    Ok(report)
}
