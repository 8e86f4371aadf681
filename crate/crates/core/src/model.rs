//! Domain types shared by the audit, metrics and mitigation modules.
//!
//! Everything here is plain data: immutable once validated, `Send + Sync`,
//! and serializable to the JSON documents the CLI reads and writes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backends::synthetic::WorldSpec;
use crate::error::ConfigError;

/// Tolerance for "sums to one" checks on probability vectors.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_IMAGE_BUDGET: usize = 48;
pub const DEFAULT_EPSILON: f64 = 0.35;
pub const DEFAULT_MAX_RETRIES: u32 = 3;

/// Ground cost used by the Wasserstein-1 distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    /// Categories sit at positions `0..k-1` in declaration order; cost `|i - j|`.
    #[default]
    Ordinal,
    /// 0/1 cost; W1 reduces to total variation.
    Nominal,
}

impl Transport {
    pub fn as_str(self) -> &'static str {
        match self {
            Transport::Ordinal => "ordinal",
            Transport::Nominal => "nominal",
        }
    }
}

impl std::str::FromStr for Transport {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ordinal" => Ok(Transport::Ordinal),
            "nominal" => Ok(Transport::Nominal),
            other => Err(format!("unknown transport mode `{other}` (expected ordinal|nominal)")),
        }
    }
}

/// Where a category's prompt fragment goes relative to the subject noun.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fragment {
    /// Adjective placed in front of the subject ("a *male* nurse").
    Before(String),
    /// Clause appended after the prompt ("a nurse *working indoors*").
    After(String),
}

impl Fragment {
    pub fn text(&self) -> &str {
        match self {
            Fragment::Before(t) | Fragment::After(t) => t,
        }
    }
}

/// One yes/no sub-question of a compound extraction question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubQuestion {
    pub text: String,
    /// Category assigned when this part is answered "yes".
    pub category: String,
}

/// Extraction question asked of the annotator for one axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Question {
    /// Multiple choice; the text carries the choice list in parentheses.
    Choice(String),
    /// Ordered yes/no parts; the first "yes" wins, all "no" means `fallback`.
    Compound {
        parts: Vec<SubQuestion>,
        fallback: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasAxis {
    pub id: String,
    pub categories: Vec<String>,
    pub prompt_fragments: Vec<Fragment>,
    /// Missing questions are filled in by [`validate_config`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<Question>,
    /// Nominal axes ignore category order even under ordinal transport.
    #[serde(default = "default_true")]
    pub ordinal: bool,
}

fn default_true() -> bool {
    true
}

impl BiasAxis {
    pub fn k(&self) -> usize {
        self.categories.len()
    }

    pub fn category_index(&self, label: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == label)
    }

    /// Transport actually used for this axis under a run-wide mode.
    pub fn transport(&self, mode: Transport) -> Transport {
        if self.ordinal {
            mode
        } else {
            Transport::Nominal
        }
    }

    /// Human label derived from the id: `gender_bias` -> `gender`.
    pub fn display_name(&self) -> String {
        self.id
            .strip_suffix("_bias")
            .unwrap_or(&self.id)
            .replace('_', " ")
    }
}

/// A single prompt variant: the base prompt with forced attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    /// Fully composed prompt text sent to the generator.
    pub prompt: String,
    pub base_prompt: String,
    /// Forced attributes, axis id -> category label. Empty for the initial prompt.
    pub modifiers: BTreeMap<String, String>,
    /// Share of the image budget, in `(0, 1]`.
    pub weight: f64,
}

/// Probability vector over one axis's categories, in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDistribution {
    pub axis_id: String,
    pub probs: Vec<f64>,
    /// Contributing annotations; 0 for analytic distributions.
    pub n_samples: usize,
}

impl AttributeDistribution {
    pub fn new(axis_id: impl Into<String>, probs: Vec<f64>, n_samples: usize) -> Result<Self, String> {
        check_simplex(&probs)?;
        Ok(Self {
            axis_id: axis_id.into(),
            probs,
            n_samples,
        })
    }

    pub fn point_mass(axis_id: impl Into<String>, k: usize, index: usize) -> Self {
        let mut probs = vec![0.0; k];
        probs[index] = 1.0;
        Self {
            axis_id: axis_id.into(),
            probs,
            n_samples: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdealDistribution {
    pub axis_id: String,
    pub probs: Vec<f64>,
}

impl IdealDistribution {
    pub fn new(axis_id: impl Into<String>, probs: Vec<f64>) -> Result<Self, String> {
        check_simplex(&probs)?;
        Ok(Self {
            axis_id: axis_id.into(),
            probs,
        })
    }

    pub fn uniform(axis_id: impl Into<String>, k: usize) -> Self {
        Self {
            axis_id: axis_id.into(),
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn as_distribution(&self) -> AttributeDistribution {
        AttributeDistribution {
            axis_id: self.axis_id.clone(),
            probs: self.probs.clone(),
            n_samples: 0,
        }
    }
}

/// Attributes extracted from one generated image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    /// Composed prompt of the variant that produced the image.
    pub prompt_variant: String,
    pub person_present: bool,
    /// On-list answers only, axis id -> category label.
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    /// Answers outside the choice list, kept verbatim and never counted.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub off_list: BTreeMap<String, String>,
}

/// Raw and normalized Wasserstein-1 deviation of one axis from its ideal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasDeviation {
    pub w: f64,
    pub w_bar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEntry {
    pub intervened: String,
    pub measured: String,
    pub is_value: f64,
    pub w_init: BiasDeviation,
    pub w_intervened: BiasDeviation,
    /// Distribution of the measured axis under the simulated intervention.
    pub intervened_distribution: Vec<f64>,
}

/// Matrix of intersectional sensitivities, rows intervened, columns measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMatrix {
    pub row_axes: Vec<String>,
    pub col_axes: Vec<String>,
    /// Row-major entries, `row_axes.len() * col_axes.len()` of them.
    pub entries: Vec<SensitivityEntry>,
    /// Initial deviation of every column axis.
    pub init: Vec<BiasDeviation>,
    pub init_distributions: Vec<AttributeDistribution>,
    pub transport: Transport,
}

impl SensitivityMatrix {
    pub fn entry(&self, row: usize, col: usize) -> &SensitivityEntry {
        &self.entries[row * self.col_axes.len() + col]
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.entry(row, col).is_value
    }

    pub fn values(&self) -> Vec<Vec<f64>> {
        (0..self.row_axes.len())
            .map(|r| (0..self.col_axes.len()).map(|c| self.value(r, c)).collect())
            .collect()
    }

    pub fn row_index(&self, axis: &str) -> Option<usize> {
        self.row_axes.iter().position(|a| a == axis)
    }

    pub fn col_index(&self, axis: &str) -> Option<usize> {
        self.col_axes.iter().position(|a| a == axis)
    }

    pub fn get(&self, intervened: &str, measured: &str) -> Option<f64> {
        Some(self.value(self.row_index(intervened)?, self.col_index(measured)?))
    }
}

/// The audit configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub axes: Vec<BiasAxis>,
    pub base_prompt: String,
    /// Subject noun phrase that adjectives attach to; defaults to the words
    /// after the last article of `base_prompt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    /// Ideal distribution per axis; missing axes get a uniform ideal.
    #[serde(default)]
    pub ideal: BTreeMap<String, Vec<f64>>,
    #[serde(default = "default_budget")]
    pub image_budget: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default)]
    pub transport: Transport,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Ground-truth world used by the synthetic backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<WorldSpec>,
}

fn default_budget() -> usize {
    DEFAULT_IMAGE_BUDGET
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_backend() -> String {
    "synthetic".to_string()
}

fn default_retries() -> u32 {
    DEFAULT_MAX_RETRIES
}

impl AuditConfig {
    /// Minimal config with defaults for everything but axes and prompt.
    pub fn new(axes: Vec<BiasAxis>, base_prompt: impl Into<String>) -> Self {
        Self {
            axes,
            base_prompt: base_prompt.into(),
            subject: None,
            ideal: BTreeMap::new(),
            image_budget: DEFAULT_IMAGE_BUDGET,
            seed: 0,
            epsilon: DEFAULT_EPSILON,
            backend: default_backend(),
            transport: Transport::default(),
            max_retries: DEFAULT_MAX_RETRIES,
            synthetic: None,
        }
    }

    pub fn axis(&self, id: &str) -> Option<&BiasAxis> {
        self.axes.iter().find(|a| a.id == id)
    }

    pub fn axis_index(&self, id: &str) -> Option<usize> {
        self.axes.iter().position(|a| a.id == id)
    }

    /// Ideal for `axis_id`, uniform when the document leaves it out.
    pub fn ideal_for(&self, axis: &BiasAxis) -> IdealDistribution {
        match self.ideal.get(&axis.id) {
            Some(probs) => IdealDistribution {
                axis_id: axis.id.clone(),
                probs: probs.clone(),
            },
            None => IdealDistribution::uniform(&axis.id, axis.k()),
        }
    }

    pub fn ideals(&self) -> Vec<IdealDistribution> {
        self.axes.iter().map(|a| self.ideal_for(a)).collect()
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let raw: AuditConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::single(format!("parse error: {e}")))?;
        validate_config(raw)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Check a probability vector: finite, non-negative, sums to one.
pub fn check_simplex(probs: &[f64]) -> Result<(), String> {
    if probs.is_empty() {
        return Err("not a probability vector: empty".into());
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(format!("not a probability vector: {probs:?} has negative or non-finite entries"));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(format!("not a probability vector: {probs:?} sums to {sum}"));
    }
    Ok(())
}

/// Default multiple-choice question for an axis without one.
pub fn default_question(axis: &BiasAxis) -> Question {
    Question::Choice(format!(
        "What is the {} ({}) of the person?",
        axis.display_name(),
        axis.categories.join(", ")
    ))
}

/// Choice labels listed inside the last parenthesized group of a question.
pub fn listed_choices(question: &str) -> Option<Vec<String>> {
    let open = question.rfind('(')?;
    let close = open + question[open..].find(')')?;
    Some(
        question[open + 1..close]
            .split(',')
            .map(|s| s.trim().to_string())
            .collect(),
    )
}

fn validate_axis(axis: &BiasAxis, problems: &mut Vec<String>) {
    let id = &axis.id;
    if id.trim().is_empty() {
        problems.push("axis with empty id".into());
    }
    if axis.categories.len() < 2 {
        problems.push(format!("axis `{id}`: axis needs ≥2 categories"));
    }
    let mut seen = BTreeSet::new();
    for c in &axis.categories {
        if c.trim().is_empty() {
            problems.push(format!("axis `{id}`: empty category label"));
        } else if !seen.insert(c.as_str()) {
            problems.push(format!("axis `{id}`: duplicate category `{c}`"));
        }
    }
    if axis.prompt_fragments.len() != axis.categories.len() {
        problems.push(format!(
            "axis `{id}`: {} categories but {} prompt fragments",
            axis.categories.len(),
            axis.prompt_fragments.len()
        ));
    }
    match &axis.question {
        None => {}
        Some(Question::Choice(text)) => match listed_choices(text) {
            Some(listed) => {
                let listed: BTreeSet<_> = listed.iter().map(String::as_str).collect();
                let declared: BTreeSet<_> = axis.categories.iter().map(String::as_str).collect();
                if listed != declared {
                    problems.push(format!(
                        "axis `{id}`: question choices {listed:?} do not match categories {declared:?}"
                    ));
                }
            }
            None => problems.push(format!("axis `{id}`: question does not list its choices in parentheses")),
        },
        Some(Question::Compound { parts, fallback }) => {
            let mut covered: BTreeSet<&str> = parts.iter().map(|p| p.category.as_str()).collect();
            covered.insert(fallback.as_str());
            let declared: BTreeSet<_> = axis.categories.iter().map(String::as_str).collect();
            if covered != declared || parts.len() + 1 != axis.categories.len() {
                problems.push(format!(
                    "axis `{id}`: compound question must cover each category exactly once (parts + fallback)"
                ));
            }
        }
    }
}

/// Validate a parsed config and fill defaults (questions, uniform ideals).
pub fn validate_config(mut config: AuditConfig) -> Result<AuditConfig, ConfigError> {
    let mut problems = Vec::new();

    if config.axes.is_empty() {
        problems.push("config declares no axes".into());
    }
    let mut ids = BTreeSet::new();
    for axis in &config.axes {
        if !ids.insert(axis.id.as_str()) {
            problems.push(format!("duplicate axis id `{}`", axis.id));
        }
        validate_axis(axis, &mut problems);
    }
    if config.base_prompt.trim().is_empty() {
        problems.push("base_prompt is empty".into());
    }
    if let Some(subject) = &config.subject {
        if !config.base_prompt.contains(subject.as_str()) {
            problems.push(format!("subject `{subject}` does not occur in base_prompt"));
        }
    }
    for (axis_id, probs) in &config.ideal {
        match config.axis(axis_id) {
            None => problems.push(format!("ideal references undeclared axis `{axis_id}`")),
            Some(axis) => {
                if probs.len() != axis.k() {
                    problems.push(format!(
                        "ideal for `{axis_id}` has {} entries, axis has {} categories",
                        probs.len(),
                        axis.k()
                    ));
                } else if let Err(e) = check_simplex(probs) {
                    problems.push(format!("ideal for `{axis_id}`: {e}"));
                }
            }
        }
    }
    if !(config.epsilon > 0.0 && config.epsilon < 1.0) {
        problems.push(format!("epsilon {} outside (0, 1)", config.epsilon));
    }
    let widest = config.axes.iter().map(BiasAxis::k).max().unwrap_or(0);
    if config.image_budget == 0 || config.image_budget < widest {
        problems.push(format!(
            "image_budget {} is smaller than the widest axis ({widest} categories)",
            config.image_budget
        ));
    }
    if problems.is_empty() {
        if let Some(world) = &config.synthetic {
            if let Err(e) = crate::backends::synthetic::SyntheticWorld::new(&config.axes, world) {
                problems.push(format!("synthetic world: {e}"));
            }
        }
    }
    if !problems.is_empty() {
        return Err(ConfigError { problems });
    }

    for axis in &mut config.axes {
        if axis.question.is_none() {
            axis.question = Some(default_question(axis));
        }
    }
    let fills: Vec<_> = config
        .axes
        .iter()
        .filter(|a| !config.ideal.contains_key(&a.id))
        .map(|a| (a.id.clone(), IdealDistribution::uniform(&a.id, a.k()).probs))
        .collect();
    config.ideal.extend(fills);
    Ok(config)
}
