//! Per-example agent wiring, batch runs and result persistence.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{run_context_agent, run_reasoning_agent, run_validation_agent};
use crate::backend::{BackendError, Embedder, Generator, RetryPolicy};
use crate::metrics::{evaluate, EvalItem, EvalReport};
use crate::model::{AnswerLetter, ConfigError, McqExample, Mode, PipelineConfig, PipelineTrace, Prediction};
use crate::retrieval::RagBank;
use crate::templates::Templates;
use crate::trace::{Clock, FixedClock, Recorder};

/// Everything a pipeline run needs besides the configuration. `bank` and
/// `embedder` are only required by modes that use the context agent.
#[derive(Clone)]
pub struct PipelineDeps {
    pub bank: Option<Arc<RagBank>>,
    pub embedder: Option<Arc<dyn Embedder>>,
    pub context_llm: Arc<dyn Generator>,
    pub reasoning_llm: Arc<dyn Generator>,
    pub validation_llm: Arc<dyn Generator>,
    /// Token embedder used for the embedding-matching explanation metric.
    pub metric_embedder: Arc<dyn Embedder>,
    pub templates: Templates,
    pub retry: RetryPolicy,
    pub clock: Arc<dyn Clock>,
}

impl PipelineDeps {
    /// Same backend for every role, default templates, no backoff delays and
    /// a fixed clock.
    pub fn uniform(llm: Arc<dyn Generator>, embedder: Arc<dyn Embedder>, bank: Option<Arc<RagBank>>) -> Self {
        PipelineDeps {
            bank,
            embedder: Some(embedder.clone()),
            context_llm: llm.clone(),
            reasoning_llm: llm.clone(),
            validation_llm: llm,
            metric_embedder: embedder,
            templates: Templates::default(),
            retry: RetryPolicy::immediate(0),
            clock: Arc::new(FixedClock),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Answered(Prediction),
    Unanswered { reason: String },
}

impl Outcome {
    pub fn prediction(&self) -> Option<&Prediction> {
        match self {
            Outcome::Answered(p) => Some(p),
            Outcome::Unanswered { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub example_id: String,
    pub mode: Mode,
    #[serde(rename = "final")]
    pub outcome: Outcome,
    pub gold: AnswerLetter,
    pub correct: bool,
    pub degraded: bool,
    pub timing_ms: u64,
    pub trace: PipelineTrace,
}

/// One line of `results.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultLine {
    pub example_id: String,
    pub mode: Mode,
    pub answer: Option<AnswerLetter>,
    pub explanation: Option<String>,
    pub confidence: Option<f64>,
    pub revised: bool,
    pub correct: bool,
    pub degraded: bool,
    pub timing_ms: u64,
}

impl From<&RunResult> for ResultLine {
    fn from(r: &RunResult) -> Self {
        let p = r.outcome.prediction();
        ResultLine {
            example_id: r.example_id.clone(),
            mode: r.mode,
            answer: p.map(|p| p.answer),
            explanation: p.map(|p| p.explanation.clone()),
            confidence: p.and_then(|p| p.confidence),
            revised: p.is_some_and(|p| p.revised),
            correct: r.correct,
            degraded: r.degraded,
            timing_ms: r.timing_ms,
        }
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    deps: PipelineDeps,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, mut deps: PipelineDeps) -> Result<Self, ConfigError> {
        cfg.validate()?;
        if cfg.mode.uses_context() && (deps.bank.is_none() || deps.embedder.is_none()) {
            return Err(ConfigError::Invalid(format!(
                "mode {} needs a RAG bank and an embedder",
                cfg.mode.as_str()
            )));
        }
        deps.retry.retry_limit = cfg.retry_limit;
        Ok(Pipeline { cfg, deps })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Runs one example. Never fails: a context failure falls back to
    /// reasoning alone and a reasoning failure leaves the example unanswered.
    pub fn run_example(&self, mcq: &McqExample) -> RunResult {
        let deps = &self.deps;
        let cfg = &self.cfg;
        let started = deps.clock.now_ms();
        let mut trace = PipelineTrace::new(&mcq.id);
        let mut rec = Recorder::new(&mut trace, deps.clock.as_ref(), &deps.retry);

        let bundle = match (cfg.mode.uses_context(), &deps.bank, &deps.embedder) {
            (true, Some(bank), Some(embedder)) => {
                match run_context_agent(mcq, bank, embedder.as_ref(), deps.context_llm.as_ref(), &deps.templates, cfg, &mut rec)
                {
                    Ok(b) => Some(b),
                    Err(e) => {
                        rec.note(format!("degraded: context agent failed ({e}), falling back to mra_only"));
                        None
                    }
                }
            }
            _ => None,
        };

        let outcome = match run_reasoning_agent(mcq, bundle.as_ref(), deps.reasoning_llm.as_ref(), &deps.templates, cfg, &mut rec)
        {
            Ok(pred) => match (&bundle, cfg.mode) {
                (Some(b), Mode::Full) => Outcome::Answered(run_validation_agent(
                    mcq,
                    &pred,
                    &b.top_k,
                    deps.validation_llm.as_ref(),
                    &deps.templates,
                    cfg,
                    &mut rec,
                )),
                _ => Outcome::Answered(pred),
            },
            Err(e) => {
                rec.note(format!("unanswered: {e}"));
                Outcome::Unanswered { reason: e.to_string() }
            }
        };

        let correct = outcome.prediction().is_some_and(|p| p.answer == mcq.gold_answer);
        let degraded = matches!(outcome, Outcome::Unanswered { .. })
            || trace.notes.iter().any(|n| n.starts_with("degraded"))
            || trace.stages.iter().any(|s| s.error.is_some());
        RunResult {
            example_id: mcq.id.clone(),
            mode: cfg.mode,
            outcome,
            gold: mcq.gold_answer,
            correct,
            degraded,
            timing_ms: deps.clock.now_ms().saturating_sub(started),
            trace,
        }
    }

    /// Runs every example with at most `max_in_flight` in progress. Results
    /// come back in input order.
    pub fn run_batch(&self, dataset: &[McqExample]) -> Result<(Vec<RunResult>, EvalReport), BackendError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.max_in_flight)
            .build()
            .map_err(|e| BackendError::InvalidRequest(format!("worker pool: {e}")))?;
        let results: Vec<RunResult> = pool.install(|| dataset.par_iter().map(|ex| self.run_example(ex)).collect());
        let items: Vec<EvalItem> = results.iter().zip(dataset).map(|(r, ex)| eval_item(r, ex)).collect();
        let report = evaluate(&items, self.deps.metric_embedder.as_ref(), &self.deps.retry)?;
        Ok((results, report))
    }
}

fn eval_item(r: &RunResult, ex: &McqExample) -> EvalItem {
    let p = r.outcome.prediction();
    EvalItem {
        correct: r.correct,
        answered: p.is_some(),
        revised: p.is_some_and(|p| p.revised),
        candidate_explanation: p.map(|p| p.explanation.clone()).unwrap_or_default(),
        reference_explanation: ex.gold_explanation.clone(),
    }
}

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path} line {line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
    #[error("result for `{0}` has no matching dataset example")]
    UnknownExample(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Scores a results file against the dataset it was produced from. The
/// stored `correct` flag is recomputed from the dataset's gold answers.
pub fn evaluate_result_lines(
    lines: &[ResultLine],
    dataset: &[McqExample],
    embedder: &dyn Embedder,
    retry: &RetryPolicy,
) -> Result<EvalReport, ResultsError> {
    let by_id: std::collections::HashMap<&str, &McqExample> = dataset.iter().map(|e| (e.id.as_str(), e)).collect();
    let items = lines
        .iter()
        .map(|l| {
            let ex = by_id.get(l.example_id.as_str()).ok_or_else(|| ResultsError::UnknownExample(l.example_id.clone()))?;
            Ok(EvalItem {
                correct: l.answer == Some(ex.gold_answer),
                answered: l.answer.is_some(),
                revised: l.revised,
                candidate_explanation: l.explanation.clone().unwrap_or_default(),
                reference_explanation: ex.gold_explanation.clone(),
            })
        })
        .collect::<Result<Vec<_>, ResultsError>>()?;
    Ok(evaluate(&items, embedder, retry)?)
}

pub fn read_result_lines(path: &Path) -> Result<Vec<ResultLine>, ResultsError> {
    let text = fs::read_to_string(path).map_err(|source| ResultsError::Io { path: path.to_path_buf(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ResultsError::Format {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// File name for an example's trace. Ids that are not already safe file
/// names get a digest suffix so distinct ids never collide.
pub fn trace_file_name(example_id: &str) -> String {
    let safe: String = example_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    if safe == example_id && !safe.starts_with('.') {
        format!("{safe}.json")
    } else {
        let digest = hex::encode(&Sha256::digest(example_id.as_bytes())[..4]);
        format!("{}-{digest}.json", safe.trim_start_matches('.'))
    }
}

pub const RESULTS_FILE: &str = "results.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const TRACES_DIR: &str = "traces";

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ResultsError> {
    fs::write(path, bytes).map_err(|source| ResultsError::Io { path: path.to_path_buf(), source })
}

pub fn write_results_file(path: &Path, results: &[RunResult]) -> Result<(), ResultsError> {
    let mut buf = Vec::new();
    for r in results {
        serde_json::to_writer(&mut buf, &ResultLine::from(r)).expect("result lines serialize");
        buf.push(b'\n');
    }
    write_file(path, &buf)
}

pub fn write_report(json_path: &Path, txt_path: Option<&Path>, label: &str, report: &EvalReport) -> Result<(), ResultsError> {
    let mut json = serde_json::to_vec_pretty(report).expect("report serializes");
    json.push(b'\n');
    write_file(json_path, &json)?;
    if let Some(txt) = txt_path {
        write_file(txt, EvalReport::table(&[(label, report)]).as_bytes())?;
    }
    Ok(())
}

/// Writes `results.jsonl`, `report.json`, `report.txt` and one trace file
/// per example under `dir`.
pub fn persist_run(dir: &Path, results: &[RunResult], report: &EvalReport) -> Result<(), ResultsError> {
    let traces = dir.join(TRACES_DIR);
    fs::create_dir_all(&traces).map_err(|source| ResultsError::Io { path: traces.clone(), source })?;
    write_results_file(&dir.join(RESULTS_FILE), results)?;
    let label = results.first().map_or("run", |r| r.mode.as_str());
    write_report(&dir.join(REPORT_JSON), Some(&dir.join(REPORT_TXT)), label, report)?;
    for r in results {
        let path = traces.join(trace_file_name(&r.example_id));
        let mut json = serde_json::to_vec_pretty(&r.trace).expect("trace serializes");
        json.push(b'\n');
        write_file(&path, &json)?;
    }
    Ok(())
}

pub fn load_trace(dir: &Path, example_id: &str) -> Result<PipelineTrace, ResultsError> {
    let base = if dir.join(TRACES_DIR).is_dir() { dir.join(TRACES_DIR) } else { dir.to_path_buf() };
    let path = base.join(trace_file_name(example_id));
    let text = fs::read_to_string(&path).map_err(|source| ResultsError::Io { path: path.clone(), source })?;
    serde_json::from_str(&text).map_err(|e| ResultsError::Format { path, line: 1, message: e.to_string() })
}

/// Human-readable stage listing. Prompts are elided unless `full` is set.
pub fn render_trace(trace: &PipelineTrace, full: bool) -> String {
    let mut out = format!("trace for {}\n", trace.example_id);
    for (i, s) in trace.stages.iter().enumerate() {
        let mut line = format!("{:>2}. {:<22} attempts={}", i + 1, s.stage_name, s.attempts);
        if let Some(t) = &s.template_id {
            line.push_str(&format!(" template={t}"));
        }
        if !s.flags.is_empty() {
            line.push_str(&format!(" flags=[{}]", s.flags.join(",")));
        }
        out.push_str(&line);
        out.push('\n');
        if !s.parsed_result_summary.is_empty() {
            out.push_str(&format!("    result: {}\n", s.parsed_result_summary));
        }
        if let Some(e) = &s.error {
            out.push_str(&format!("    error: {e}\n"));
        }
        if full {
            out.push_str("    prompt:\n");
            for l in s.prompt_rendered.lines() {
                out.push_str(&format!("      {l}\n"));
            }
            if let Some(raw) = &s.raw_model_output {
                out.push_str("    output:\n");
                for l in raw.lines() {
                    out.push_str(&format!("      {l}\n"));
                }
            }
        } else {
            out.push_str(&format!("    prompt: <{} chars elided, use --full>\n", s.prompt_rendered.chars().count()));
        }
    }
    for n in &trace.notes {
        out.push_str(&format!("note: {n}\n"));
    }
    out
}
