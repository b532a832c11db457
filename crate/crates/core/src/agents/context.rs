//! Context stage: nearest-neighbour retrieval over the bank, pointwise LLM
//! reranking, and rank-weighted voting for the task and category labels.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::backend::{BackendError, Embedder, GenParams, Generator, PromptPart, Role};
use crate::model::{ContextBundle, McqExample, PipelineConfig, RetrievalCandidate, VoteWeighting};
use crate::retrieval::{RagBank, RetrievalError};
use crate::templates::Templates;
use crate::trace::Recorder;

pub const STAGE_RETRIEVE: &str = "context.retrieve";
pub const STAGE_RERANK: &str = "context.rerank";

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("retrieval failed: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("query embedding failed: {0}")]
    Embedding(BackendError),
    #[error("index returned unknown example id {0}")]
    UnknownExample(String),
    #[error("retrieval returned no candidates")]
    NoCandidates,
}

/// Parses a relevance reply: `SCORE: <n>` anywhere, or a bare integer.
/// Only integers in 0..=100 are accepted.
pub fn parse_rerank_score(reply: &str) -> Option<u32> {
    static TAGGED: OnceLock<Regex> = OnceLock::new();
    let tagged = TAGGED.get_or_init(|| Regex::new(r"(?i)\bscore\s*[:=]\s*(\d{1,3})\b").unwrap());
    let value = match tagged.captures(reply) {
        Some(c) => c[1].parse::<u32>().ok()?,
        None => {
            let t = reply.trim();
            if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) || t.len() > 3 {
                return None;
            }
            t.parse().ok()?
        }
    };
    (value <= 100).then_some(value)
}

fn rerank_prompt(templates: &Templates, mcq: &McqExample, candidate: &McqExample, attempt: u32, max_attempts: u32) -> String {
    let mut prompt = templates.rerank.render(&[
        ("query_question", &mcq.question),
        ("query_options", &mcq.render_options()),
        ("candidate_id", &candidate.id),
        ("candidate_question", &candidate.question),
        ("candidate_options", &candidate.render_options()),
        ("candidate_task", &candidate.task_name),
        ("candidate_category", &candidate.category),
    ]);
    if attempt > 1 {
        prompt.push_str(&format!(
            "\nREMINDER (attempt {attempt} of {max_attempts}): reply with exactly one line \"SCORE: <integer 0-100>\" and nothing else.\n"
        ));
    }
    prompt
}

/// Outcome of reranking, including whether every scoring call failed.
#[derive(Debug, Clone, PartialEq)]
pub struct Reranked {
    pub candidates: Vec<(McqExample, RetrievalCandidate)>,
    /// No candidate received a score; the list is in similarity order.
    pub degraded: bool,
}

/// Scores each candidate once (re-asking up to `retry_limit` times on an
/// unparseable reply) and re-sorts by score descending, ties by prior rank.
/// Candidates left unscored keep their position in the input list.
pub fn rerank(
    mcq: &McqExample,
    candidates: Vec<(McqExample, RetrievalCandidate)>,
    llm: &dyn Generator,
    templates: &Templates,
    cfg: &PipelineConfig,
    rec: &mut Recorder<'_>,
) -> Reranked {
    let max_attempts = cfg.retry_limit + 1;
    let params = GenParams::with_max_tokens(16);
    let mut scores: Vec<Option<u32>> = Vec::with_capacity(candidates.len());

    for (candidate, _) in &candidates {
        let mut score = None;
        for attempt in 1..=max_attempts {
            let prompt = rerank_prompt(templates, mcq, candidate, attempt, max_attempts);
            let reply = rec.generate(STAGE_RERANK, &templates.rerank.id, llm, Role::Rerank, &[PromptPart::text(prompt)], &params);
            match reply {
                Ok(text) => match parse_rerank_score(&text) {
                    Some(s) => {
                        rec.annotate(format!("{}: score {s}", candidate.id));
                        score = Some(s);
                        break;
                    }
                    None => {
                        rec.annotate(format!("{}: unparseable score", candidate.id));
                        rec.flag("parse_failed");
                    }
                },
                // transport budget already spent inside the call
                Err(_) => break,
            }
        }
        if score.is_none() {
            rec.flag("score_absent");
            rec.note(format!("rerank: no score for {}", candidate.id));
        }
        scores.push(score);
    }

    let degraded = scores.iter().all(Option::is_none);
    let mut scored: Vec<(usize, u32)> = scores.iter().enumerate().filter_map(|(i, s)| s.map(|s| (i, s))).collect();
    let slots: Vec<usize> = scored.iter().map(|(i, _)| *i).collect();
    scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    for (slot, (src, _)) in slots.iter().zip(&scored) {
        order[*slot] = *src;
    }

    let mut taken: Vec<Option<(McqExample, RetrievalCandidate)>> = candidates.into_iter().map(Some).collect();
    let ranked = order
        .into_iter()
        .enumerate()
        .map(|(pos, src)| {
            let (ex, mut cand) = taken[src].take().expect("each source used once");
            cand.rerank_score = scores[src].map(|s| s as f64 / 100.0);
            cand.rank = pos + 1;
            (ex, cand)
        })
        .collect();
    Reranked { candidates: ranked, degraded }
}

/// Rank-weighted vote over one label field. Ties go to the label whose best
/// member has the lowest rank, then to the lexicographically smaller label.
fn vote_label<'a>(
    members: impl Iterator<Item = (&'a str, usize)>,
    k: usize,
    weighting: VoteWeighting,
) -> Option<String> {
    let mut table: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (label, rank) in members {
        let entry = table.entry(label).or_insert((0.0, usize::MAX));
        entry.0 += weighting.weight(rank, k);
        entry.1 = entry.1.min(rank);
    }
    table
        .into_iter()
        .min_by(|a, b| {
            // reciprocal weights can tie exactly in theory but not in floating point
            let by_weight = if (a.1 .0 - b.1 .0).abs() <= 1e-9 {
                std::cmp::Ordering::Equal
            } else {
                b.1 .0.partial_cmp(&a.1 .0).unwrap_or(std::cmp::Ordering::Equal)
            };
            by_weight
                .then(a.1 .1.cmp(&b.1 .1))
                .then(a.0.cmp(b.0))
        })
        .map(|(label, _)| label.to_string())
}

/// Predicts `(task, category)` by independent weighted votes over `top_k`.
/// Returns empty strings only for an empty list.
pub fn vote_task_category(top_k: &[(McqExample, RetrievalCandidate)], weighting: VoteWeighting) -> (String, String) {
    let k = top_k.len();
    let task = vote_label(top_k.iter().map(|(ex, c)| (ex.task_name.as_str(), c.rank)), k, weighting);
    let category = vote_label(top_k.iter().map(|(ex, c)| (ex.category.as_str(), c.rank)), k, weighting);
    (task.unwrap_or_default(), category.unwrap_or_default())
}

/// Retrieve `n_retrieve`, rerank, keep `k_rerank`, vote.
pub fn run_context_agent(
    mcq: &McqExample,
    bank: &RagBank,
    embedder: &dyn Embedder,
    llm: &dyn Generator,
    templates: &Templates,
    cfg: &PipelineConfig,
    rec: &mut Recorder<'_>,
) -> Result<ContextBundle, ContextError> {
    let query = mcq.retrieval_text();
    let mut vectors = rec.embed(STAGE_RETRIEVE, embedder, std::slice::from_ref(&query)).map_err(ContextError::Embedding)?;
    let hits = bank.index().query_vector(&vectors.remove(0), cfg.n_retrieve)?;
    if hits.is_empty() {
        return Err(ContextError::NoCandidates);
    }
    let candidates = hits
        .into_iter()
        .map(|c| {
            bank.get(&c.example_id)
                .cloned()
                .map(|ex| (ex, c.clone()))
                .ok_or(ContextError::UnknownExample(c.example_id))
        })
        .collect::<Result<Vec<_>, _>>()?;
    rec.annotate(format!(
        "retrieved {}",
        candidates.iter().map(|(ex, _)| ex.id.as_str()).collect::<Vec<_>>().join(",")
    ));

    let Reranked { mut candidates, degraded } = rerank(mcq, candidates, llm, templates, cfg, rec);
    if degraded {
        rec.note("degraded: rerank failed for every candidate, using similarity order");
    }
    candidates.truncate(cfg.k_rerank);
    let (predicted_task, predicted_category) = vote_task_category(&candidates, cfg.vote_weighting);
    rec.note(format!("vote: task={predicted_task:?} category={predicted_category:?}"));
    Ok(ContextBundle { predicted_task, predicted_category, top_k: candidates })
}
