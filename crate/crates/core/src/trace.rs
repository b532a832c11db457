//! Per-example call recording.

use std::time::{SystemTime, UNIX_EPOCH};

use crate::backend::{
    complete_multimodal, embed, BackendError, Embedder, GenParams, Generator, PromptPart, RetryPolicy, Role,
};
use crate::model::{PipelineTrace, StageRecord};

/// Time source for trace timestamps and durations.
pub trait Clock: Send + Sync {
    /// Milliseconds since the Unix epoch.
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// Always reports time zero, so traces and result files are byte-stable.
#[derive(Debug, Clone, Copy, Default)]
pub struct FixedClock;

impl Clock for FixedClock {
    fn now_ms(&self) -> u64 {
        0
    }
}

/// Appends exactly one [`StageRecord`] per backend call, successful or not.
pub struct Recorder<'a> {
    pub trace: &'a mut PipelineTrace,
    pub clock: &'a dyn Clock,
    pub retry: &'a RetryPolicy,
}

impl<'a> Recorder<'a> {
    pub fn new(trace: &'a mut PipelineTrace, clock: &'a dyn Clock, retry: &'a RetryPolicy) -> Self {
        Self { trace, clock, retry }
    }

    pub fn generate(
        &mut self,
        stage: &str,
        template_id: &str,
        backend: &dyn Generator,
        role: Role,
        parts: &[PromptPart],
        params: &GenParams,
    ) -> Result<String, BackendError> {
        let started = self.clock.now_ms();
        let outcome = complete_multimodal(backend, role, parts, params, self.retry);
        let prompt = render_parts(parts);
        self.push(stage, Some(template_id), prompt, started, outcome.attempts, &outcome.result);
        outcome.result
    }

    pub fn embed(&mut self, stage: &str, backend: &dyn Embedder, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        let started = self.clock.now_ms();
        let outcome = embed(backend, texts, self.retry);
        let summary = match &outcome.result {
            Ok(v) => Ok(format!("{} vectors of dimension {}", v.len(), v.first().map_or(0, Vec::len))),
            Err(e) => Err(e.clone()),
        };
        self.push(stage, None, texts.join("\n"), started, outcome.attempts, &summary);
        if let Ok(summary) = summary {
            self.annotate(summary);
        }
        outcome.result
    }

    fn push(
        &mut self,
        stage: &str,
        template_id: Option<&str>,
        prompt: String,
        started: u64,
        attempts: u32,
        result: &Result<String, BackendError>,
    ) {
        let duration = self.clock.now_ms().saturating_sub(started);
        self.trace.stages.push(StageRecord {
            stage_name: stage.to_string(),
            template_id: template_id.map(str::to_string),
            prompt_rendered: prompt,
            raw_model_output: result.as_ref().ok().cloned(),
            parsed_result_summary: String::new(),
            started_at_ms: started,
            duration_ms: duration,
            attempts,
            error: result.as_ref().err().map(|e| e.to_string()),
            flags: match result {
                Err(_) => vec!["call_failed".into()],
                Ok(_) if attempts > 1 => vec!["retried".into()],
                Ok(_) => vec![],
            },
        });
    }

    /// Sets the parsed-result summary of the most recent record.
    pub fn annotate(&mut self, summary: impl Into<String>) {
        if let Some(last) = self.trace.stages.last_mut() {
            last.parsed_result_summary = summary.into();
        }
    }

    /// Adds a flag to the most recent record.
    pub fn flag(&mut self, flag: &str) {
        if let Some(last) = self.trace.stages.last_mut() {
            last.flags.push(flag.to_string());
        }
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.trace.notes.push(note.into());
    }
}

fn render_parts(parts: &[PromptPart]) -> String {
    parts
        .iter()
        .map(|p| match p {
            PromptPart::Text { text } => text.clone(),
            PromptPart::Image { image } => format!("[image: {}]", image.locator),
        })
        .collect::<Vec<_>>()
        .join("\n")
}
