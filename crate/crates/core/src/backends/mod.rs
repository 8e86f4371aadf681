//! Generation/annotation backends and the JSON-lines wire protocol.
//!
//! Every message is one UTF-8 JSON object per line with a `type` field:
//!
//! ```text
//! {"type":"generate","prompt":"A photo of a nurse","count":48,"seed":7}
//! {"type":"generate_result","image_ids":["...", ...]}
//! {"type":"annotate","image_id":"...","question":"What is ...?","choices":["male","female"]}
//! {"type":"annotate_result","answer":"female"}
//! {"type":"error","message":"..."}
//! ```
//!
//! Over HTTP the same objects are POSTed to `/generate` and `/annotate`.

pub mod remote;
pub mod store;
pub mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::counterfactuals::{allocate, question_for, PromptSet, QuestionPlan, NO, PERSON_QUESTION, YES};
use crate::error::Result;
use crate::model::{AnnotationRecord, BiasAxis};

/// Answer sentinel for questions a backend cannot map onto the choice list.
pub const UNKNOWN: &str = "UNKNOWN";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub count: usize,
    pub seed: u64,
    /// Forced attributes behind `prompt`. Model backends may ignore this;
    /// the synthetic world needs it to condition its joint.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub modifiers: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotateRequest {
    pub image_id: String,
    pub question: String,
    pub choices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotateResponse {
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Generate(GenerateRequest),
    GenerateResult(GenerateResponse),
    Annotate(AnnotateRequest),
    AnnotateResult(AnnotateResponse),
    Error { message: String },
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("backend reported error: {0}")]
    Remote(String),
    #[error("replay store has no entry for {0}")]
    ReplayMiss(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Timeout(_) | BackendError::Transport(_) | BackendError::Protocol(_))
    }
}

pub trait Backend {
    /// Identifier written to run manifests.
    fn id(&self) -> String;
    fn generate(&mut self, request: &GenerateRequest) -> Result<GenerateResponse, BackendError>;
    fn annotate(&mut self, request: &AnnotateRequest) -> Result<AnnotateResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn generate(&mut self, request: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        (**self).generate(request)
    }

    fn annotate(&mut self, request: &AnnotateRequest) -> Result<AnnotateResponse, BackendError> {
        (**self).annotate(request)
    }
}

/// Deterministic sub-seed for a labelled stream (prompt text, run phase).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn with_retries<T>(
    max_retries: u32,
    what: &str,
    mut call: impl FnMut() -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let mut attempt = 0;
    loop {
        match call() {
            Ok(v) => return Ok(v),
            Err(e) if e.is_retryable() && attempt < max_retries => {
                attempt += 1;
                log::warn!("{what} failed ({e}); retry {attempt}/{max_retries}");
            }
            Err(e) => return Err(e),
        }
    }
}

/// Tallies from one [`generate_and_annotate`] call.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnnotationStats {
    pub images: usize,
    pub persons: usize,
    pub off_list_answers: usize,
}

/// Generate `budget` images for `prompt_set` and extract every axis from each.
///
/// The person question is asked first; images without a person keep empty
/// attributes. Records come back sorted by image id so concurrent or
/// reordered backends give identical output.
pub fn generate_and_annotate(
    prompt_set: &PromptSet,
    axes: &[BiasAxis],
    budget: usize,
    seed: u64,
    max_retries: u32,
    backend: &mut dyn Backend,
) -> Result<(Vec<AnnotationRecord>, AnnotationStats)> {
    let counts = allocate(prompt_set, budget)?;
    let plans: Vec<_> = axes.iter().map(|a| (a, question_for(a))).collect();
    let mut records = Vec::with_capacity(budget);
    let mut stats = AnnotationStats::default();

    for (variant, &count) in prompt_set.variants.iter().zip(&counts) {
        let request = GenerateRequest {
            prompt: variant.prompt.clone(),
            count,
            seed: derive_seed(seed, &variant.prompt),
            modifiers: variant.modifiers.clone(),
        };
        let response = with_retries(max_retries, "generate", || {
            let r = backend.generate(&request)?;
            if r.image_ids.len() != count {
                return Err(BackendError::Protocol(format!(
                    "asked for {count} images of `{}`, got {}",
                    request.prompt,
                    r.image_ids.len()
                )));
            }
            Ok(r)
        })?;
        let mut ids = response.image_ids;
        ids.sort();

        for image_id in ids {
            let mut ask = |question: &str, choices: &[String]| {
                let req = AnnotateRequest {
                    image_id: image_id.clone(),
                    question: question.to_string(),
                    choices: choices.to_vec(),
                };
                with_retries(max_retries, "annotate", || backend.annotate(&req)).map(|r| r.answer)
            };
            let yes_no = [YES.to_string(), NO.to_string()];
            let person = ask(PERSON_QUESTION, &yes_no)?;
            let mut record = AnnotationRecord {
                image_id: image_id.clone(),
                prompt_variant: variant.prompt.clone(),
                person_present: person == YES,
                attributes: BTreeMap::new(),
                off_list: BTreeMap::new(),
            };
            if person != YES && person != NO {
                record.off_list.insert("person".into(), person);
            }
            if record.person_present {
                for (axis, plan) in &plans {
                    match plan {
                        QuestionPlan::Choice { text, choices } => {
                            let answer = ask(text, choices)?;
                            if choices.contains(&answer) {
                                record.attributes.insert(axis.id.clone(), answer);
                            } else {
                                record.off_list.insert(axis.id.clone(), answer);
                            }
                        }
                        QuestionPlan::Compound { parts, fallback } => {
                            let mut label = Some(fallback.clone());
                            for (text, category) in parts {
                                let answer = ask(text, &yes_no)?;
                                if answer == YES {
                                    label = Some(category.clone());
                                    break;
                                } else if answer != NO {
                                    record.off_list.insert(axis.id.clone(), answer);
                                    label = None;
                                    break;
                                }
                            }
                            if let Some(label) = label {
                                record.attributes.insert(axis.id.clone(), label);
                            }
                        }
                    }
                }
            }
            stats.images += 1;
            stats.persons += usize::from(record.person_present);
            stats.off_list_answers += record.off_list.len();
            records.push(record);
        }
    }
    if stats.off_list_answers > 0 {
        log::warn!(
            "{} off-list answers recorded and excluded from distributions",
            stats.off_list_answers
        );
    }
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok((records, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_messages_carry_type_tag() {
        let m = Message::Generate(GenerateRequest {
            prompt: "A photo of a nurse".into(),
            count: 2,
            seed: 7,
            modifiers: BTreeMap::new(),
        });
        let line = serde_json::to_string(&m).unwrap();
        assert_eq!(line, r#"{"type":"generate","prompt":"A photo of a nurse","count":2,"seed":7}"#);
        let err: Message = serde_json::from_str(r#"{"type":"error","message":"boom"}"#).unwrap();
        assert_eq!(err, Message::Error { message: "boom".into() });
    }

    #[test]
    fn derive_seed_is_stable_and_label_sensitive() {
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    }

    #[test]
    fn retries_stop_at_limit() {
        let mut calls = 0;
        let r: Result<(), _> = with_retries(2, "x", || {
            calls += 1;
            Err(BackendError::Timeout("slow".into()))
        });
        assert!(r.is_err());
        assert_eq!(calls, 3);

        let mut calls = 0;
        let r: Result<(), _> = with_retries(5, "x", || {
            calls += 1;
            Err(BackendError::Remote("no model".into()))
        });
        assert!(r.is_err());
        assert_eq!(calls, 1);
    }
}
