//! Domain types shared across the pipeline: benchmark items, retrieval
//! candidates, predictions, run configuration and per-example traces.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// One of the four option letters of a multiple-choice question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AnswerLetter {
    A,
    B,
    C,
    D,
}

impl AnswerLetter {
    pub const ALL: [AnswerLetter; 4] = [AnswerLetter::A, AnswerLetter::B, AnswerLetter::C, AnswerLetter::D];

    pub fn as_str(self) -> &'static str {
        match self {
            AnswerLetter::A => "A",
            AnswerLetter::B => "B",
            AnswerLetter::C => "C",
            AnswerLetter::D => "D",
        }
    }

    /// Case-insensitive conversion from a single character.
    pub fn from_char(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'A' => Some(AnswerLetter::A),
            'B' => Some(AnswerLetter::B),
            'C' => Some(AnswerLetter::C),
            'D' => Some(AnswerLetter::D),
            _ => None,
        }
    }
}

impl fmt::Display for AnswerLetter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("not an answer letter: {0:?}")]
pub struct ParseLetterError(pub String);

impl FromStr for AnswerLetter {
    type Err = ParseLetterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => AnswerLetter::from_char(c)
                .filter(|_| c.is_ascii_uppercase())
                .ok_or_else(|| ParseLetterError(s.to_string())),
            _ => Err(ParseLetterError(s.to_string())),
        }
    }
}

impl Serialize for AnswerLetter {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for AnswerLetter {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MediaKind {
    #[serde(rename = "png")]
    Png,
    #[serde(rename = "jpeg")]
    Jpeg,
    #[serde(rename = "dicom-rendered")]
    DicomRendered,
}

impl MediaKind {
    /// MIME type used when the image is inlined into a request.
    pub fn mime(self) -> &'static str {
        match self {
            MediaKind::Png | MediaKind::DicomRendered => "image/png",
            MediaKind::Jpeg => "image/jpeg",
        }
    }
}

/// Reference to an image attached to a question. The pipeline never decodes
/// pixels; images are forwarded to backends as opaque payloads.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    #[serde(rename = "path")]
    pub locator: String,
    #[serde(rename = "kind")]
    pub media_kind: MediaKind,
}

impl ImageRef {
    pub fn new(locator: impl Into<String>, media_kind: MediaKind) -> Self {
        Self { locator: locator.into(), media_kind }
    }

    /// True for `http(s)://` and `data:` locators, which are forwarded as-is.
    pub fn is_url(&self) -> bool {
        let l = self.locator.as_str();
        l.starts_with("http://") || l.starts_with("https://") || l.starts_with("data:")
    }
}

/// A validated multiple-choice benchmark item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqExample {
    pub id: String,
    pub question: String,
    pub options: BTreeMap<AnswerLetter, String>,
    #[serde(rename = "answer")]
    pub gold_answer: AnswerLetter,
    #[serde(rename = "explanation")]
    pub gold_explanation: String,
    #[serde(rename = "task")]
    pub task_name: String,
    pub category: String,
    pub images: Vec<ImageRef>,
}

impl McqExample {
    pub fn option(&self, letter: AnswerLetter) -> &str {
        // validate_example guarantees every letter is present
        self.options.get(&letter).map(String::as_str).unwrap_or("")
    }

    /// Options rendered one per line as `A. text`, in letter order.
    pub fn render_options(&self) -> String {
        AnswerLetter::ALL
            .iter()
            .map(|l| format!("{l}. {}", self.option(*l)))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// The text used as this example's retrieval key: question followed by
    /// the options. Gold answer and explanation are never part of the key.
    pub fn retrieval_text(&self) -> String {
        format!("{}\n{}", self.question, self.render_options())
    }
}

/// Option entries as they appear in a record, preserving duplicates so they
/// can be reported instead of silently collapsed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawOptions(pub Vec<(String, String)>);

impl<'de> Deserialize<'de> for RawOptions {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = RawOptions;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping option letters to text")
            }

            fn visit_map<M: MapAccess<'de>>(self, mut map: M) -> Result<RawOptions, M::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, String>()? {
                    entries.push((k, v));
                }
                Ok(RawOptions(entries))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

/// A dataset record as decoded from one line of the dataset file, before
/// structural validation.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawRecord {
    pub id: Option<String>,
    pub question: Option<String>,
    pub options: Option<RawOptions>,
    pub answer: Option<String>,
    pub explanation: Option<String>,
    pub task: Option<String>,
    pub category: Option<String>,
    pub images: Option<Vec<ImageRef>>,
}

impl From<&McqExample> for RawRecord {
    fn from(ex: &McqExample) -> Self {
        RawRecord {
            id: Some(ex.id.clone()),
            question: Some(ex.question.clone()),
            options: Some(RawOptions(
                ex.options.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            )),
            answer: Some(ex.gold_answer.to_string()),
            explanation: Some(ex.gold_explanation.clone()),
            task: Some(ex.task_name.clone()),
            category: Some(ex.category.clone()),
            images: Some(ex.images.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("record {record}: missing or empty field `{field}`")]
    MissingField { record: String, field: String },
    #[error("record {record}: option `{letter}` appears more than once")]
    DuplicateOption { record: String, letter: String },
    #[error("record {record}: unexpected option key `{key}` (expected A-D)")]
    UnexpectedOption { record: String, key: String },
    #[error("record {record}: gold answer `{answer}` is not one of the options")]
    GoldAnswerNotInOptions { record: String, answer: String },
    #[error("record {record}: image with empty locator")]
    EmptyImageLocator { record: String },
}

fn non_empty(record: &str, field: &str, value: Option<String>) -> Result<String, ValidationError> {
    match value {
        Some(v) if !v.trim().is_empty() => Ok(v),
        _ => Err(ValidationError::MissingField { record: record.to_string(), field: field.to_string() }),
    }
}

/// Checks a decoded record against the structural invariants of
/// [`McqExample`] and converts it.
pub fn validate_example(raw: RawRecord) -> Result<McqExample, ValidationError> {
    let id = non_empty("<unknown>", "id", raw.id)?;
    let question = non_empty(&id, "question", raw.question)?;

    let entries = raw
        .options
        .ok_or_else(|| ValidationError::MissingField { record: id.clone(), field: "options".into() })?;
    let mut options = BTreeMap::new();
    for (key, text) in entries.0 {
        let letter: AnswerLetter = key
            .parse()
            .map_err(|_| ValidationError::UnexpectedOption { record: id.clone(), key: key.clone() })?;
        if options.contains_key(&letter) {
            return Err(ValidationError::DuplicateOption { record: id.clone(), letter: key });
        }
        let text = non_empty(&id, &format!("options.{letter}"), Some(text))?;
        options.insert(letter, text);
    }
    for letter in AnswerLetter::ALL {
        if !options.contains_key(&letter) {
            return Err(ValidationError::MissingField { record: id.clone(), field: format!("options.{letter}") });
        }
    }

    let answer = non_empty(&id, "answer", raw.answer)?;
    let gold_answer = answer
        .trim()
        .parse::<AnswerLetter>()
        .ok()
        .filter(|l| options.contains_key(l))
        .ok_or_else(|| ValidationError::GoldAnswerNotInOptions { record: id.clone(), answer: answer.clone() })?;

    let task_name = non_empty(&id, "task", raw.task)?;
    let category = non_empty(&id, "category", raw.category)?;
    let images = raw.images.unwrap_or_default();
    if images.iter().any(|img| img.locator.trim().is_empty()) {
        return Err(ValidationError::EmptyImageLocator { record: id });
    }

    Ok(McqExample {
        id,
        question,
        options,
        gold_answer,
        gold_explanation: raw.explanation.unwrap_or_default(),
        task_name,
        category,
        images,
    })
}

/// A bank example's position in a retrieval or rerank list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCandidate {
    pub example_id: String,
    pub similarity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerank_score: Option<f64>,
    pub rank: usize,
}

/// Output of the context stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBundle {
    pub predicted_task: String,
    pub predicted_category: String,
    pub top_k: Vec<(McqExample, RetrievalCandidate)>,
}

impl ContextBundle {
    pub fn examples(&self) -> impl Iterator<Item = &McqExample> {
        self.top_k.iter().map(|(ex, _)| ex)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub answer: AnswerLetter,
    pub explanation: String,
    pub confidence: Option<f64>,
    pub revised: bool,
}

impl Prediction {
    pub fn new(answer: AnswerLetter, explanation: impl Into<String>) -> Self {
        Self { answer, explanation: explanation.into(), confidence: None, revised: false }
    }
}

/// Which agents participate in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Reasoning agent alone, no retrieved context.
    MraOnly,
    /// Context agent feeding the reasoning agent; no validation.
    CuaMra,
    /// All three agents.
    Full,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::MraOnly => "mra_only",
            Mode::CuaMra => "cua_mra",
            Mode::Full => "full",
        }
    }

    pub fn uses_context(self) -> bool {
        !matches!(self, Mode::MraOnly)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mra_only" => Ok(Mode::MraOnly),
            "cua_mra" => Ok(Mode::CuaMra),
            "full" => Ok(Mode::Full),
            other => Err(ConfigError::Invalid(format!("unknown mode `{other}`"))),
        }
    }
}

/// Rank weighting used when voting for task and category labels.
/// Both schemes are strictly decreasing in rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteWeighting {
    /// `k - rank + 1`: 5,4,3,2,1 for five members.
    #[default]
    Linear,
    /// `1 / rank`.
    Reciprocal,
}

impl VoteWeighting {
    pub fn weight(self, rank: usize, k: usize) -> f64 {
        match self {
            VoteWeighting::Linear => (k + 1).saturating_sub(rank) as f64,
            VoteWeighting::Reciprocal => 1.0 / rank.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Candidates pulled from the vector index.
    pub n_retrieve: usize,
    /// Candidates kept after reranking.
    pub k_rerank: usize,
    /// A prediction is accepted only when its confidence strictly exceeds this.
    pub confidence_threshold: f64,
    pub mode: Mode,
    pub max_in_flight: usize,
    /// Re-asks after an unparseable reply, and transport retries per call.
    pub retry_limit: u32,
    pub seed: u64,
    pub vote_weighting: VoteWeighting,
    /// Render gold explanations of retrieved examples into reasoning prompts.
    pub include_example_explanations: bool,
    /// Show the rejected answer to the revision step.
    pub revision_sees_rejected: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_retrieve: 10,
            k_rerank: 5,
            confidence_threshold: 0.7,
            mode: Mode::Full,
            max_in_flight: 4,
            retry_limit: 2,
            seed: 0,
            vote_weighting: VoteWeighting::Linear,
            include_example_explanations: true,
            revision_sees_rejected: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_retrieve == 0 {
            return Err(ConfigError::Invalid("n_retrieve must be positive".into()));
        }
        if self.k_rerank == 0 || self.k_rerank > self.n_retrieve {
            return Err(ConfigError::Invalid(format!(
                "k_rerank must be in 1..={} (got {})",
                self.n_retrieve, self.k_rerank
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(ConfigError::Invalid(format!(
                "confidence_threshold must be in [0, 1] (got {})",
                self.confidence_threshold
            )));
        }
        if self.max_in_flight == 0 {
            return Err(ConfigError::Invalid("max_in_flight must be positive".into()));
        }
        Ok(())
    }
}

/// One backend call made while processing an example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<String>,
    pub prompt_rendered: String,
    pub raw_model_output: Option<String>,
    pub parsed_result_summary: String,
    pub started_at_ms: u64,
    pub duration_ms: u64,
    /// Transport attempts, including the successful one.
    pub attempts: u32,
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Ordered record of every backend call made for one example.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub example_id: String,
    pub stages: Vec<StageRecord>,
    /// Pipeline-level degradations and decisions that are not tied to one call.
    #[serde(default)]
    pub notes: Vec<String>,
}

impl PipelineTrace {
    pub fn new(example_id: impl Into<String>) -> Self {
        Self { example_id: example_id.into(), ..Default::default() }
    }

    pub fn stages_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a StageRecord> + 'a {
        self.stages.iter().filter(move |s| s.stage_name == name)
    }

    pub fn has_stage(&self, name: &str) -> bool {
        self.stages.iter().any(|s| s.stage_name == name)
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.notes.iter().any(|n| n == flag) || self.stages.iter().any(|s| s.flags.iter().any(|f| f == flag))
    }
}
