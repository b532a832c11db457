//! Reasoning stage: grounded multimodal prompt, answer extraction.

use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::backend::{BackendError, GenParams, Generator, PromptPart, Role};
use crate::model::{AnswerLetter, ContextBundle, McqExample, PipelineConfig, Prediction};
use crate::templates::Templates;
use crate::trace::Recorder;

pub const STAGE_REASONING: &str = "reasoning";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no answer letter found in {raw:?}")]
pub struct UnparseableAnswer {
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReasoningError {
    #[error("reasoning failed after {attempts} calls: {reason}")]
    ReasoningFailed { attempts: u32, reason: String },
}

impl ReasoningError {
    fn from_backend(attempts: u32, e: &BackendError) -> Self {
        ReasoningError::ReasoningFailed { attempts, reason: e.to_string() }
    }
}

/// Renders retrieved examples as numbered reference blocks, in rank order.
pub fn render_reference_examples<'a>(examples: impl Iterator<Item = &'a McqExample>, include_explanations: bool) -> Vec<String> {
    examples
        .enumerate()
        .map(|(i, ex)| {
            let mut block = format!(
                "REFERENCE EXAMPLE {}\nQuestion: {}\n{}\nAnswer: {}",
                i + 1,
                ex.question,
                ex.render_options(),
                ex.gold_answer
            );
            if include_explanations && !ex.gold_explanation.is_empty() {
                block.push_str(&format!("\nExplanation: {}", ex.gold_explanation));
            }
            block
        })
        .collect()
}

fn render_question(mcq: &McqExample) -> String {
    format!("QUESTION:\n{}\n{}", mcq.question, mcq.render_options())
}

/// Builds the reasoning prompt: instructions, optional predicted labels and
/// reference examples, the question, then the images in their given order.
pub fn build_reasoning_prompt(
    mcq: &McqExample,
    bundle: Option<&ContextBundle>,
    templates: &Templates,
    include_explanations: bool,
) -> Vec<PromptPart> {
    build_parts(mcq, bundle, templates, include_explanations, None)
}

fn build_parts(
    mcq: &McqExample,
    bundle: Option<&ContextBundle>,
    templates: &Templates,
    include_explanations: bool,
    reminder: Option<String>,
) -> Vec<PromptPart> {
    let mut parts = vec![PromptPart::text(templates.reasoning.render(&[]))];
    if let Some(bundle) = bundle {
        parts.push(PromptPart::text(format!(
            "PREDICTED TASK: {}\nPREDICTED CATEGORY: {}",
            bundle.predicted_task, bundle.predicted_category
        )));
        parts.extend(render_reference_examples(bundle.examples(), include_explanations).into_iter().map(PromptPart::text));
    }
    parts.push(PromptPart::text(render_question(mcq)));
    if let Some(r) = reminder {
        parts.push(PromptPart::text(r));
    }
    parts.extend(mcq.images.iter().cloned().map(PromptPart::image));
    parts
}

pub(crate) fn format_reminder(attempt: u32, max_attempts: u32) -> String {
    format!(
        "REMINDER (attempt {attempt} of {max_attempts}): your previous reply could not be read. \
         Reply with exactly two lines:\nANSWER: <one of A, B, C, D>\nEXPLANATION: <text>"
    )
}

struct Patterns {
    tag: Regex,
    explanation: Regex,
    fallbacks: [Regex; 4],
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        tag: Regex::new(r"(?i)\banswer\s*:\s*\(?([A-D])\b\)?\.?").unwrap(),
        explanation: Regex::new(r"(?i)\bexplanation\s*:[ \t]*").unwrap(),
        fallbacks: [
            // "A." standing alone
            Regex::new(r"(?i)(?:^|[^A-Za-z0-9])(([A-D])\.)(?:\s|$)").unwrap(),
            // "(A)"
            Regex::new(r"(?i)(\(([A-D])\))").unwrap(),
            // "option A"
            Regex::new(r"(?i)(\boption\s+([A-D])\b)").unwrap(),
            // "answer is A"
            Regex::new(r"(?i)(\banswer\s+is\s*:?\s*([A-D])\b)").unwrap(),
        ],
    })
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Extracts the chosen letter and explanation from a model reply.
///
/// Cascade: an `ANSWER:` tag wins; otherwise the fallback patterns `A.`,
/// `(A)`, `option A`, `answer is A` are tried in that order and the first
/// occurrence of the first matching pattern is used. The explanation is the
/// text after an `EXPLANATION:` tag when present, else the whole reply with
/// the matched answer token removed and whitespace collapsed.
pub fn parse_answer(raw: &str) -> Result<(AnswerLetter, String), UnparseableAnswer> {
    let p = patterns();
    let (letter, span) = if let Some(c) = p.tag.captures(raw) {
        let m = c.get(0).unwrap();
        (c[1].chars().next().and_then(AnswerLetter::from_char), m.start()..m.end())
    } else {
        p.fallbacks
            .iter()
            .find_map(|re| re.captures(raw))
            .map(|c| {
                let token = c.get(1).unwrap();
                (c[2].chars().next().and_then(AnswerLetter::from_char), token.start()..token.end())
            })
            .ok_or_else(|| UnparseableAnswer { raw: raw.to_string() })?
    };
    let letter = letter.ok_or_else(|| UnparseableAnswer { raw: raw.to_string() })?;

    let explanation = match p.explanation.find(raw) {
        Some(m) => {
            let end = if span.start >= m.end() { span.start } else { raw.len() };
            raw[m.end()..end].trim_end().to_string()
        }
        None => collapse_ws(&format!("{} {}", &raw[..span.start], &raw[span.end..])),
    };
    Ok((letter, explanation))
}

/// Calls the multimodal backend and parses its answer, re-asking with a
/// format reminder up to `retry_limit` times when the reply is unreadable.
pub fn run_reasoning_agent(
    mcq: &McqExample,
    bundle: Option<&ContextBundle>,
    mllm: &dyn Generator,
    templates: &Templates,
    cfg: &PipelineConfig,
    rec: &mut Recorder<'_>,
) -> Result<Prediction, ReasoningError> {
    let max_attempts = cfg.retry_limit + 1;
    let params = GenParams::with_max_tokens(512);
    let mut last = String::new();
    for attempt in 1..=max_attempts {
        let reminder = (attempt > 1).then(|| format_reminder(attempt, max_attempts));
        let parts = build_parts(mcq, bundle, templates, cfg.include_example_explanations, reminder);
        let reply = rec
            .generate(STAGE_REASONING, &templates.reasoning.id, mllm, Role::Reasoning, &parts, &params)
            .map_err(|e| ReasoningError::from_backend(attempt, &e))?;
        match parse_answer(&reply) {
            Ok((answer, explanation)) => {
                rec.annotate(format!("answer {answer}"));
                return Ok(Prediction::new(answer, explanation));
            }
            Err(e) => {
                rec.annotate("unparseable answer");
                rec.flag("parse_failed");
                last = e.to_string();
            }
        }
    }
    Err(ReasoningError::ReasoningFailed { attempts: max_attempts, reason: last })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{joined_text, RetryPolicy, ScriptedBackend};
    use crate::model::{ImageRef, MediaKind, PipelineTrace, RetrievalCandidate};
    use crate::trace::FixedClock;

    fn mcq(images: usize) -> McqExample {
        McqExample {
            id: "q1".into(),
            question: "Most likely diagnosis?".into(),
            options: AnswerLetter::ALL.iter().map(|l| (*l, format!("diagnosis {l}"))).collect(),
            gold_answer: AnswerLetter::B,
            gold_explanation: String::new(),
            task_name: "differential diagnosis".into(),
            category: "cardiac".into(),
            images: (0..images).map(|i| ImageRef::new(format!("img{i}.png"), MediaKind::Png)).collect(),
        }
    }

    fn bundle(k: usize) -> ContextBundle {
        let top_k = (0..k)
            .map(|i| {
                let mut ex = mcq(0);
                ex.id = format!("r{i}");
                ex.question = format!("Reference question {i}?");
                ex.gold_explanation = format!("reference explanation {i}");
                let c = RetrievalCandidate { example_id: ex.id.clone(), similarity: 0.5, rerank_score: Some(0.5), rank: i + 1 };
                (ex, c)
            })
            .collect();
        ContextBundle { predicted_task: "differential diagnosis".into(), predicted_category: "cardiac".into(), top_k }
    }

    #[test]
    fn canonical_format() {
        let (l, e) = parse_answer("ANSWER: B\nEXPLANATION: Cardiomegaly with edema.").unwrap();
        assert_eq!(l, AnswerLetter::B);
        assert_eq!(e, "Cardiomegaly with edema.");
    }

    #[test]
    fn parenthesized_fallback_removes_token() {
        let (l, e) = parse_answer("The answer is (C) because the costophrenic angle is blunted.").unwrap();
        assert_eq!(l, AnswerLetter::C);
        assert_eq!(e, "The answer is because the costophrenic angle is blunted.");
    }

    #[test]
    fn garbage_is_unparseable() {
        assert!(parse_answer("No abnormality seen.").is_err());
    }

    #[test]
    fn prompt_without_bundle_has_no_context() {
        let parts = build_reasoning_prompt(&mcq(0), None, &Templates::default(), true);
        let text = joined_text(&parts);
        assert!(!text.contains("REFERENCE EXAMPLE"));
        assert!(!text.contains("PREDICTED TASK"));
        assert_eq!(parts.len(), 2);
    }

    #[test]
    fn prompt_with_bundle_has_k_blocks_in_order() {
        let parts = build_reasoning_prompt(&mcq(0), Some(&bundle(2)), &Templates::default(), true);
        let blocks: Vec<_> = parts.iter().filter_map(|p| p.as_text()).filter(|t| t.starts_with("REFERENCE EXAMPLE")).collect();
        assert_eq!(blocks.len(), 2);
        assert!(blocks[0].contains("Reference question 0?"));
        assert!(blocks[1].contains("Reference question 1?"));
        assert!(blocks[0].contains("Explanation: reference explanation 0"));
        let no_expl = build_reasoning_prompt(&mcq(0), Some(&bundle(2)), &Templates::default(), false);
        assert!(!joined_text(&no_expl).contains("reference explanation"));
    }

    #[test]
    fn images_come_last_in_order() {
        let parts = build_reasoning_prompt(&mcq(2), Some(&bundle(1)), &Templates::default(), true);
        let n = parts.len();
        assert_eq!(parts[n - 2], PromptPart::image(ImageRef::new("img0.png", MediaKind::Png)));
        assert_eq!(parts[n - 1], PromptPart::image(ImageRef::new("img1.png", MediaKind::Png)));
    }

    #[test]
    fn prompt_is_deterministic() {
        let a = build_reasoning_prompt(&mcq(1), Some(&bundle(3)), &Templates::default(), true);
        let b = build_reasoning_prompt(&mcq(1), Some(&bundle(3)), &Templates::default(), true);
        assert_eq!(a, b);
    }

    fn run(mock: &ScriptedBackend) -> (Result<Prediction, ReasoningError>, PipelineTrace) {
        let mut trace = PipelineTrace::new("q1");
        let retry = RetryPolicy::immediate(2);
        let mut rec = Recorder::new(&mut trace, &FixedClock, &retry);
        let out = run_reasoning_agent(&mcq(0), None, mock, &Templates::default(), &PipelineConfig::default(), &mut rec);
        (out, trace)
    }

    #[test]
    fn canonical_reply_becomes_prediction() {
        let mock = ScriptedBackend::new().on_regex(Some(Role::Reasoning), "Most likely", "ANSWER: B\nEXPLANATION: edema");
        let (out, trace) = run(&mock);
        let p = out.unwrap();
        assert_eq!((p.answer, p.explanation.as_str(), p.confidence, p.revised), (AnswerLetter::B, "edema", None, false));
        assert_eq!(trace.stages.len(), 1);
    }

    #[test]
    fn reask_after_unparseable_reply() {
        let mock = ScriptedBackend::new()
            .on_regex(Some(Role::Reasoning), "attempt 2 of 3", "ANSWER: D\nEXPLANATION: second try")
            .on_regex(Some(Role::Reasoning), "Most likely", "I am not sure.");
        let (out, trace) = run(&mock);
        assert_eq!(out.unwrap().answer, AnswerLetter::D);
        assert_eq!(trace.stages.len(), 2);
        assert!(trace.stages[0].flags.contains(&"parse_failed".to_string()));
    }

    #[test]
    fn all_unparseable_fails() {
        let mock = ScriptedBackend::new().on_regex(Some(Role::Reasoning), "Most likely", "I am not sure.");
        let (out, trace) = run(&mock);
        assert!(matches!(out, Err(ReasoningError::ReasoningFailed { attempts: 3, .. })));
        assert_eq!(trace.stages.len(), 3);
    }
}
