//! Validation stage: verbalized confidence for the reasoning answer, and a
//! fresh answer from the retrieved context when confidence does not exceed
//! the threshold.

use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use super::reasoning::{format_reminder, parse_answer, render_reference_examples};
use crate::backend::{GenParams, Generator, PromptPart, Role};
use crate::model::{McqExample, PipelineConfig, Prediction, RetrievalCandidate};
use crate::templates::Templates;
use crate::trace::Recorder;

pub const STAGE_CONFIDENCE: &str = "validation.confidence";
pub const STAGE_REVISE: &str = "validation.revise";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReviseError {
    #[error("revision failed after {attempts} calls: {reason}")]
    ReviseFailed { attempts: u32, reason: String },
}

/// Confidence as parsed, or the 0.0 fallback when no reply could be read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confidence {
    pub value: f64,
    pub parse_failed: bool,
}

/// Reads the last number on the last non-empty line, clamped to `[0, 1]`.
pub fn parse_confidence(reply: &str) -> Option<f64> {
    static NUM: OnceLock<Regex> = OnceLock::new();
    let num = NUM.get_or_init(|| Regex::new(r"[-+]?(?:\d+\.?\d*|\.\d+)").unwrap());
    let line = reply.lines().map(str::trim).rfind(|l| !l.is_empty())?;
    let value: f64 = num.find_iter(line).last()?.as_str().parse().ok()?;
    value.is_finite().then(|| value.clamp(0.0, 1.0))
}

fn examples_block(top_k: &[(McqExample, RetrievalCandidate)], include_explanations: bool) -> String {
    let blocks = render_reference_examples(top_k.iter().map(|(ex, _)| ex), include_explanations);
    if blocks.is_empty() {
        String::new()
    } else {
        format!("{}\n\n", blocks.join("\n\n"))
    }
}

pub fn estimate_confidence(
    mcq: &McqExample,
    prediction: &Prediction,
    top_k: &[(McqExample, RetrievalCandidate)],
    llm: &dyn Generator,
    templates: &Templates,
    cfg: &PipelineConfig,
    rec: &mut Recorder<'_>,
) -> Confidence {
    let max_attempts = cfg.retry_limit + 1;
    let params = GenParams::with_max_tokens(32);
    let base = templates.confidence.render(&[
        ("examples", &examples_block(top_k, cfg.include_example_explanations)),
        ("question", &mcq.question),
        ("options", &mcq.render_options()),
        ("answer", &format!("{}. {}", prediction.answer, mcq.option(prediction.answer))),
        ("explanation", &prediction.explanation),
    ]);
    for attempt in 1..=max_attempts {
        let mut prompt = base.clone();
        if attempt > 1 {
            prompt.push_str(&format!(
                "\nREMINDER (attempt {attempt} of {max_attempts}): the last line must be a single decimal number between 0 and 1.\n"
            ));
        }
        match rec.generate(STAGE_CONFIDENCE, &templates.confidence.id, llm, Role::Confidence, &[PromptPart::text(prompt)], &params) {
            Ok(reply) => match parse_confidence(&reply) {
                Some(value) => {
                    rec.annotate(format!("confidence {value}"));
                    return Confidence { value, parse_failed: false };
                }
                None => {
                    rec.annotate("unparseable confidence");
                    rec.flag("parse_failed");
                }
            },
            Err(_) => break,
        }
    }
    rec.note("validation: confidence unavailable, using 0.0");
    Confidence { value: 0.0, parse_failed: true }
}

/// Asks for a fresh answer grounded on the reference examples. The rejected
/// answer is shown only when `rejected` is given.
pub fn revise(
    mcq: &McqExample,
    top_k: &[(McqExample, RetrievalCandidate)],
    rejected: Option<&Prediction>,
    llm: &dyn Generator,
    templates: &Templates,
    cfg: &PipelineConfig,
    rec: &mut Recorder<'_>,
) -> Result<Prediction, ReviseError> {
    let max_attempts = cfg.retry_limit + 1;
    let params = GenParams::with_max_tokens(512);
    let rejected_line = rejected
        .map(|p| format!("A previous answer, {}, was judged unreliable.\n", p.answer))
        .unwrap_or_default();
    let base = templates.revision.render(&[
        ("examples", &examples_block(top_k, cfg.include_example_explanations)),
        ("question", &mcq.question),
        ("options", &mcq.render_options()),
        ("rejected", &rejected_line),
    ]);
    let mut reason = String::new();
    for attempt in 1..=max_attempts {
        let mut parts = vec![PromptPart::text(base.clone())];
        if attempt > 1 {
            parts.push(PromptPart::text(format_reminder(attempt, max_attempts)));
        }
        match rec.generate(STAGE_REVISE, &templates.revision.id, llm, Role::Revision, &parts, &params) {
            Ok(reply) => match parse_answer(&reply) {
                Ok((answer, explanation)) => {
                    rec.annotate(format!("revised answer {answer}"));
                    return Ok(Prediction { answer, explanation, confidence: None, revised: true });
                }
                Err(e) => {
                    rec.annotate("unparseable answer");
                    rec.flag("parse_failed");
                    reason = e.to_string();
                }
            },
            Err(e) => return Err(ReviseError::ReviseFailed { attempts: attempt, reason: e.to_string() }),
        }
    }
    Err(ReviseError::ReviseFailed { attempts: max_attempts, reason })
}

/// Accepts the prediction iff its confidence strictly exceeds the threshold;
/// otherwise revises. The returned prediction carries the measured
/// confidence. A failed revision keeps the original prediction.
pub fn run_validation_agent(
    mcq: &McqExample,
    prediction: &Prediction,
    top_k: &[(McqExample, RetrievalCandidate)],
    llm: &dyn Generator,
    templates: &Templates,
    cfg: &PipelineConfig,
    rec: &mut Recorder<'_>,
) -> Prediction {
    let confidence = estimate_confidence(mcq, prediction, top_k, llm, templates, cfg, rec);
    let accepted = Prediction { confidence: Some(confidence.value), ..prediction.clone() };
    if confidence.value > cfg.confidence_threshold {
        rec.note(format!("validation: accepted at confidence {}", confidence.value));
        return accepted;
    }
    rec.note(format!(
        "validation: confidence {} <= threshold {}, revising",
        confidence.value, cfg.confidence_threshold
    ));
    let rejected = cfg.revision_sees_rejected.then_some(prediction);
    match revise(mcq, top_k, rejected, llm, templates, cfg, rec) {
        Ok(revised) => Prediction { confidence: Some(confidence.value), ..revised },
        Err(e) => {
            rec.note(format!("degraded: {e}; keeping original answer"));
            accepted
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{RetryPolicy, ScriptedBackend};
    use crate::model::{AnswerLetter, PipelineTrace};
    use crate::trace::FixedClock;

    fn mcq() -> McqExample {
        McqExample {
            id: "case".into(),
            question: "Most likely condition on this chest X-ray?".into(),
            options: [
                (AnswerLetter::A, "Pneumothorax"),
                (AnswerLetter::B, "Congestive heart failure"),
                (AnswerLetter::C, "Pulmonary embolism"),
                (AnswerLetter::D, "Lobar pneumonia"),
            ]
            .into_iter()
            .map(|(l, t)| (l, t.to_string()))
            .collect(),
            gold_answer: AnswerLetter::B,
            gold_explanation: String::new(),
            task_name: "differential diagnosis".into(),
            category: "cardiac".into(),
            images: vec![],
        }
    }

    fn original() -> Prediction {
        Prediction::new(AnswerLetter::C, "Wedge-shaped opacity suggests embolism.")
    }

    fn validate(mock: &ScriptedBackend, threshold: f64) -> (Prediction, PipelineTrace) {
        let mut trace = PipelineTrace::new("case");
        let retry = RetryPolicy::immediate(2);
        let mut rec = Recorder::new(&mut trace, &FixedClock, &retry);
        let cfg = PipelineConfig { confidence_threshold: threshold, ..Default::default() };
        let out = run_validation_agent(&mcq(), &original(), &[], mock, &Templates::default(), &cfg, &mut rec);
        (out, trace)
    }

    fn confidence_mock(reply: &str) -> ScriptedBackend {
        ScriptedBackend::new()
            .on_regex(Some(Role::Confidence), "PROPOSED ANSWER", reply)
            .on_regex(Some(Role::Revision), "QUESTION", "ANSWER: B\nEXPLANATION: pulmonary edema pattern")
    }

    #[test]
    fn confidence_parsing() {
        assert_eq!(parse_confidence("0.85"), Some(0.85));
        assert_eq!(parse_confidence("1.7"), Some(1.0));
        assert_eq!(parse_confidence("-0.2"), Some(0.0));
        assert_eq!(parse_confidence("Reasoning...\nConfidence: 0.4\n\n"), Some(0.4));
        assert_eq!(parse_confidence(".5"), Some(0.5));
        assert_eq!(parse_confidence("fairly sure"), None);
        assert_eq!(parse_confidence(""), None);
    }

    #[test]
    fn confident_answer_accepted() {
        let (p, trace) = validate(&confidence_mock("0.9"), 0.7);
        assert_eq!(p, Prediction { confidence: Some(0.9), ..original() });
        assert!(!trace.has_stage(STAGE_REVISE));
    }

    #[test]
    fn low_confidence_revises() {
        let (p, trace) = validate(&confidence_mock("0.5"), 0.7);
        assert_eq!(p.answer, AnswerLetter::B);
        assert_eq!(p.explanation, "pulmonary edema pattern");
        assert!(p.revised);
        assert_eq!(p.confidence, Some(0.5));
        assert!(trace.has_stage(STAGE_REVISE));
    }

    #[test]
    fn threshold_is_strict() {
        let (p, _) = validate(&confidence_mock("0.7"), 0.7);
        assert!(p.revised);
    }

    #[test]
    fn unparseable_confidence_forces_revision() {
        let (p, trace) = validate(&confidence_mock("quite confident"), 0.7);
        assert_eq!(p.confidence, Some(0.0));
        assert!(p.revised);
        assert_eq!(trace.stages_named(STAGE_CONFIDENCE).count(), 3);
        assert!(trace.has_flag("parse_failed"));
    }

    #[test]
    fn failed_revision_keeps_original() {
        let mock = ScriptedBackend::new()
            .on_regex(Some(Role::Confidence), "PROPOSED ANSWER", "0.2")
            .on_regex(Some(Role::Revision), "QUESTION", "hmm");
        let (p, trace) = validate(&mock, 0.7);
        assert_eq!(p, Prediction { confidence: Some(0.2), ..original() });
        assert_eq!(trace.stages_named(STAGE_REVISE).count(), 3);
    }

    #[test]
    fn revision_matching_original_still_marked_revised() {
        let mock = ScriptedBackend::new()
            .on_regex(Some(Role::Confidence), "PROPOSED ANSWER", "0.1")
            .on_regex(Some(Role::Revision), "QUESTION", "ANSWER: C\nEXPLANATION: still embolism");
        let (p, _) = validate(&mock, 0.7);
        assert_eq!(p.answer, AnswerLetter::C);
        assert!(p.revised);
    }

    #[test]
    fn rejected_answer_hidden_by_default() {
        let mut trace = PipelineTrace::new("case");
        let retry = RetryPolicy::immediate(0);
        let mut rec = Recorder::new(&mut trace, &FixedClock, &retry);
        let mock = confidence_mock("0.1");
        let cfg = PipelineConfig::default();
        revise(&mcq(), &[], None, &mock, &Templates::default(), &cfg, &mut rec).unwrap();
        revise(&mcq(), &[], Some(&original()), &mock, &Templates::default(), &cfg, &mut rec).unwrap();
        assert!(!trace.stages[0].prompt_rendered.contains("judged unreliable"));
        assert!(trace.stages[1].prompt_rendered.contains("A previous answer, C, was judged unreliable."));
    }
}
