#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use mas_rvqa::backend::{Embedder, FaultInjector, Generator, HashEmbedder, MockScript, RetryPolicy, ScriptedBackend};
use mas_rvqa::datasets::load_dataset;
use mas_rvqa::orchestrator::{Pipeline, PipelineDeps};
use mas_rvqa::retrieval::RagBank;
use mas_rvqa::{McqExample, Mode, PipelineConfig};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn synthetic() -> Vec<McqExample> {
    load_dataset(fixture("synthetic50.jsonl")).unwrap().examples
}

pub fn bank(embedder: &dyn Embedder) -> Arc<RagBank> {
    let examples = load_dataset(fixture("rag_bank.jsonl")).unwrap().examples;
    Arc::new(RagBank::build(examples, embedder, &RetryPolicy::immediate(0)).unwrap())
}

pub fn scripted() -> ScriptedBackend {
    ScriptedBackend::from_script(&MockScript::load(&fixture("ablation_script.json")).unwrap()).unwrap()
}

/// The scripted ablation scenario with the hash embedder and fixed clock.
pub fn ablation_pipeline(mode: Mode, max_in_flight: usize) -> Pipeline {
    let embedder = Arc::new(HashEmbedder::default());
    let deps = PipelineDeps::uniform(Arc::new(scripted()), embedder.clone(), Some(bank(embedder.as_ref())));
    let cfg = PipelineConfig { mode, max_in_flight, ..Default::default() };
    Pipeline::new(cfg, deps).unwrap()
}

/// Same scenario with every generator and the retrieval embedder failing a
/// seeded fraction of attempts.
pub fn faulty_pipeline(
    rate: f64,
    seed: u64,
    retry_limit: u32,
) -> (Pipeline, Arc<FaultInjector<ScriptedBackend>>, Arc<FaultInjector<HashEmbedder>>) {
    let clean = HashEmbedder::default();
    let bank = bank(&clean);
    let llm = Arc::new(FaultInjector::new(scripted(), rate, seed));
    let embedder = Arc::new(FaultInjector::new(HashEmbedder::default(), rate, seed));
    let mut deps = PipelineDeps::uniform(llm.clone() as Arc<dyn Generator>, embedder.clone() as Arc<dyn Embedder>, Some(bank));
    deps.metric_embedder = Arc::new(clean);
    let cfg = PipelineConfig { retry_limit, ..Default::default() };
    (Pipeline::new(cfg, deps).unwrap(), llm, embedder)
}
