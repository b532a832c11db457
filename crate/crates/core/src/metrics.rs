//! Answer accuracy and explanation-quality metrics.
//!
//! Variants implemented here:
//! - BLEU: sentence-level BLEU-4, uniform weights, add-one smoothing for
//!   n-gram orders with no matches, brevity penalty `exp(1 - r/c)` when the
//!   candidate is shorter than the reference.
//! - ROUGE-L: LCS precision/recall combined as plain F1.
//! - METEOR: exact then stem alignment, `F_mean = 10PR / (R + 9P)`,
//!   fragmentation penalty `0.5 * (chunks / matches)^3`. No synonym stage.
//! - BERTScore: greedy max-cosine matching over backend token embeddings,
//!   cosines clipped at zero, no IDF weighting.
//!
//! Corpus scores are unweighted means over items that have a reference
//! explanation. Numbers are comparable only with other runs of this crate.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::OnceLock;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use crate::backend::{embed, BackendError, Embedder, RetryPolicy};

/// Lowercases, splits on whitespace, trims leading and trailing punctuation
/// from each token and drops tokens that were punctuation only.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Fraction of `true` values; 0.0 for an empty input.
pub fn accuracy(correct: impl IntoIterator<Item = bool>) -> f64 {
    let (hits, total) = correct.into_iter().fold((0usize, 0usize), |(h, t), c| (h + c as usize, t + 1));
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

pub fn bleu(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let refs = ngram_counts(reference, n);
        let matches: usize = cand.iter().map(|(g, c)| (*c).min(refs.get(g).copied().unwrap_or(0))).sum();
        let total = (candidate.len() + 1).saturating_sub(n);
        let precision = if matches > 0 {
            matches as f64 / total as f64
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += precision.ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let brevity = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    brevity * (log_sum / 4.0).exp()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn stemmer() -> &'static Stemmer {
    static S: OnceLock<Stemmer> = OnceLock::new();
    S.get_or_init(|| Stemmer::create(Algorithm::English))
}

pub fn stem(token: &str) -> String {
    stemmer().stem(token).into_owned()
}

/// Greedy one-to-one alignment of equal keys. Each candidate position, in
/// order, takes the unmatched reference position right after the previous
/// match when possible (to keep chunks contiguous), else the first one.
fn align_stage(
    cand_keys: &[String],
    ref_keys: &[String],
    cand_used: &mut [bool],
    ref_used: &mut [bool],
    matches: &mut Vec<(usize, usize)>,
) {
    let mut prev: Option<usize> = None;
    for (i, key) in cand_keys.iter().enumerate() {
        if cand_used[i] {
            prev = matches.iter().find(|(c, _)| *c == i).map(|(_, r)| *r);
            continue;
        }
        let free = |j: usize| !ref_used[j] && ref_keys[j] == *key;
        let next = prev.map(|p| p + 1).filter(|&j| j < ref_keys.len() && free(j));
        let chosen = next.or_else(|| (0..ref_keys.len()).find(|&j| free(j)));
        match chosen {
            Some(j) => {
                cand_used[i] = true;
                ref_used[j] = true;
                matches.push((i, j));
                prev = Some(j);
            }
            None => prev = None,
        }
    }
}

/// Number of maximal runs of matches contiguous in both sequences.
pub fn count_chunks(matches: &[(usize, usize)]) -> usize {
    let mut sorted = matches.to_vec();
    sorted.sort_unstable();
    let mut chunks = 0;
    let mut last: Option<(usize, usize)> = None;
    for (c, r) in sorted {
        match last {
            Some((lc, lr)) if c == lc + 1 && r == lr + 1 => {}
            _ => chunks += 1,
        }
        last = Some((c, r));
    }
    chunks
}

/// Matched `(candidate, reference)` position pairs after the exact and stem
/// stages.
pub fn meteor_alignment(candidate: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut cand_used = vec![false; candidate.len()];
    let mut ref_used = vec![false; reference.len()];
    let mut matches = Vec::new();
    align_stage(candidate, reference, &mut cand_used, &mut ref_used, &mut matches);
    let cand_stems: Vec<String> = candidate.iter().map(|t| stem(t)).collect();
    let ref_stems: Vec<String> = reference.iter().map(|t| stem(t)).collect();
    align_stage(&cand_stems, &ref_stems, &mut cand_used, &mut ref_used, &mut matches);
    matches.sort_unstable();
    matches
}

pub fn meteor(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let alignment = meteor_alignment(candidate, reference);
    let m = alignment.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (count_chunks(&alignment) as f64 / m).powi(3);
    f_mean * (1.0 - penalty)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy-matching F1 over precomputed token vectors.
pub fn bert_score_from_vectors(candidate: &[Vec<f32>], reference: &[Vec<f32>]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let sims: Vec<Vec<f64>> = candidate
        .iter()
        .map(|c| reference.iter().map(|r| cosine(c, r).clamp(0.0, 1.0)).collect())
        .collect();
    let precision = sims.iter().map(|row| row.iter().cloned().fold(0.0, f64::max)).sum::<f64>() / candidate.len() as f64;
    let recall = (0..reference.len())
        .map(|j| sims.iter().map(|row| row[j]).fold(0.0, f64::max))
        .sum::<f64>()
        / reference.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Embeds each token with `embedder` and scores by greedy cosine matching.
pub fn bert_score(
    candidate: &[String],
    reference: &[String],
    embedder: &dyn Embedder,
    retry: &RetryPolicy,
) -> Result<f64, BackendError> {
    if candidate.is_empty() || reference.is_empty() {
        return Ok(0.0);
    }
    let mut texts = candidate.to_vec();
    texts.extend_from_slice(reference);
    let mut vectors = embed(embedder, &texts, retry).result?;
    let ref_vecs = vectors.split_off(candidate.len());
    Ok(bert_score_from_vectors(&vectors, &ref_vecs))
}

/// Per-item input to [`evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub correct: bool,
    pub answered: bool,
    pub revised: bool,
    /// Empty for unanswered items.
    pub candidate_explanation: String,
    pub reference_explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric_variants: String,
    pub accuracy: f64,
    pub bleu: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub bert_score: f64,
    pub n_items: usize,
    pub n_unanswered: usize,
    pub n_revised: usize,
    /// Items with a reference explanation, over which text metrics are averaged.
    pub n_scored: usize,
}

pub const METRIC_VARIANTS: &str = "bleu=sentence BLEU-4, add-one smoothing on zero counts; \
rouge_l=LCS F1 (beta=1); meteor=exact+stem, Fmean 10PR/(R+9P), penalty 0.5*(ch/m)^3; \
bert_score=greedy max-cosine F1 over backend token embeddings, no idf";

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

pub fn evaluate(items: &[EvalItem], embedder: &dyn Embedder, retry: &RetryPolicy) -> Result<EvalReport, BackendError> {
    let (mut b, mut r, mut m, mut s) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for item in items.iter().filter(|i| !i.reference_explanation.trim().is_empty()) {
        let cand = tokenize(&item.candidate_explanation);
        let reference = tokenize(&item.reference_explanation);
        b.push(bleu(&cand, &reference));
        r.push(rouge_l(&cand, &reference));
        m.push(meteor(&cand, &reference));
        s.push(bert_score(&cand, &reference, embedder, retry)?);
    }
    Ok(EvalReport {
        metric_variants: METRIC_VARIANTS.to_string(),
        accuracy: accuracy(items.iter().map(|i| i.correct)),
        bleu: mean(&b),
        rouge_l: mean(&r),
        meteor: mean(&m),
        bert_score: mean(&s),
        n_items: items.len(),
        n_unanswered: items.iter().filter(|i| !i.answered).count(),
        n_revised: items.iter().filter(|i| i.revised).count(),
        n_scored: b.len(),
    })
}

impl EvalReport {
    /// Fixed-width table with one row per `(label, report)`.
    pub fn table(rows: &[(&str, &EvalReport)]) -> String {
        let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>6}  {:>7}  {:>6}  {:>9}",
            "Model", "Accuracy", "BLEU", "ROUGE-L", "METEOR", "BERTScore"
        );
        for (label, rep) in rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7.2}%  {:>6.4}  {:>7.4}  {:>6.4}  {:>9.4}",
                label,
                rep.accuracy * 100.0,
                rep.bleu,
                rep.rouge_l,
                rep.meteor,
                rep.bert_score
            );
        }
        let _ = writeln!(out, "# {}", METRIC_VARIANTS);
        out
    }
}
