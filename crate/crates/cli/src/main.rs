use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mas_rvqa::backend::{BackendError, Embedder, HashEmbedder, RetryPolicy};
use mas_rvqa::config::{RunConfig, RunConfigError};
use mas_rvqa::datasets::{build_hard_set, build_rag_bank, load_dataset, sample_pool, save_dataset, ModelResultMatrix};
use mas_rvqa::metrics::EvalReport;
use mas_rvqa::orchestrator::{
    evaluate_result_lines, load_trace, persist_run, read_result_lines, render_trace, write_report, Pipeline,
    ResultsError, RESULTS_FILE,
};
use mas_rvqa::retrieval::{build_index, RetrievalError};
use mas_rvqa::Mode;

/// Multi-agent retrieval-augmented pipeline for multiple-choice radiology VQA.
#[derive(Debug, Parser)]
#[command(name = "mas-rvqa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a dataset file and report every invalid line.
    Validate {
        /// Line-delimited JSON dataset.
        dataset: PathBuf,
    },
    /// Vector index operations.
    Index {
        #[command(subcommand)]
        command: IndexCommand,
    },
    /// Run the pipeline over a dataset and write results, report and traces.
    Run(RunArgs),
    /// Draw a per-task pool from a dataset.
    Sample {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        per_task: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep the pool examples that at least `min-wrong` models got wrong.
    Hardset {
        #[arg(long)]
        pool: PathBuf,
        /// JSON file {"models": [...], "results": {id: {model: bool}}}.
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, default_value_t = 3)]
        min_wrong: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the summary as JSON.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Stratified RAG bank from the dataset examples outside the pool.
    Ragbank {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a results file against its dataset.
    Eval {
        /// results.jsonl from `run`.
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Token embedder for the embedding-matching metric.
        #[arg(long, value_enum, default_value_t = EmbedBackend::Hash)]
        embed_backend: EmbedBackend,
        /// Run configuration supplying embedder settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output JSON report; a text table is printed to stdout.
        #[arg(long)]
        report: PathBuf,
    },
    /// Inspect stored traces.
    Trace {
        #[command(subcommand)]
        command: TraceCommand,
    },
}

#[derive(Debug, Subcommand)]
enum IndexCommand {
    /// Embed a bank and write its vector index.
    Build {
        /// Line-delimited JSON bank.
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run configuration supplying the embedder; hash embedder when absent.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum TraceCommand {
    /// Print the stage sequence of one example.
    Show {
        /// Run output directory or its traces/ subdirectory.
        dir: PathBuf,
        example_id: String,
        /// Include prompts and raw model output.
        #[arg(long)]
        full: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EmbedBackend {
    /// Feature-hashing embedder, no network.
    Hash,
    /// Embeddings endpoint from the run configuration.
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    #[value(name = "mra_only")]
    MraOnly,
    #[value(name = "cua_mra")]
    CuaMra,
    Full,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::MraOnly => Mode::MraOnly,
            ModeArg::CuaMra => Mode::CuaMra,
            ModeArg::Full => Mode::Full,
        }
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides pipeline.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides pipeline.max_in_flight.
    #[arg(long)]
    max_in_flight: Option<usize>,
    /// Overrides pipeline.confidence_threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Overrides pipeline.n_retrieve.
    #[arg(long)]
    n_retrieve: Option<usize>,
    /// Overrides pipeline.k_rerank.
    #[arg(long)]
    k_rerank: Option<usize>,
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    let p = &mut cfg.pipeline;
    p.mode = args.mode.into();
    p.seed = args.seed.unwrap_or(p.seed);
    p.max_in_flight = args.max_in_flight.unwrap_or(p.max_in_flight);
    p.confidence_threshold = args.threshold.unwrap_or(p.confidence_threshold);
    p.n_retrieve = args.n_retrieve.unwrap_or(p.n_retrieve);
    p.k_rerank = args.k_rerank.unwrap_or(p.k_rerank);
    cfg.pipeline.validate()?;

    let dataset = load_dataset(&args.dataset)?;
    if dataset.is_empty() {
        bail!("{} contains no examples", args.dataset.display());
    }
    let pipeline = Pipeline::new(cfg.pipeline.clone(), cfg.deps()?)?;
    let (results, report) = pipeline.run_batch(&dataset.examples)?;
    persist_run(&args.out, &results, &report)?;
    print!("{}", EvalReport::table(&[(cfg.pipeline.mode.as_str(), &report)]));
    println!(
        "{} examples, {} unanswered, {} revised; wrote {}",
        report.n_items,
        report.n_unanswered,
        report.n_revised,
        args.out.join(RESULTS_FILE).display()
    );
    Ok(())
}

fn embedder_from(config: Option<&Path>, http: bool) -> Result<(Arc<dyn Embedder>, RetryPolicy)> {
    match config {
        Some(path) => {
            let mut cfg = RunConfig::load(path)?;
            if http {
                cfg.backend.kind = mas_rvqa::config::BackendKind::Http;
            }
            Ok((cfg.metric_embedder()?, cfg.retry_policy()))
        }
        None if http => bail!("--embed-backend http needs --config for the endpoint"),
        None => Ok((Arc::new(HashEmbedder::default()), RetryPolicy::default())),
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate { dataset } => {
            let ds = load_dataset(&dataset)?;
            println!("{} examples OK", ds.len());
            println!("tasks: {}", ds.tasks.iter().cloned().collect::<Vec<_>>().join(", "));
            println!("categories: {}", ds.categories.iter().cloned().collect::<Vec<_>>().join(", "));
        }
        Command::Index { command: IndexCommand::Build { bank, out, config } } => {
            let examples = load_dataset(&bank)?.examples;
            let (embedder, retry) = match &config {
                Some(path) => {
                    let cfg = RunConfig::load(path)?;
                    (cfg.backends()?.1, cfg.retry_policy())
                }
                None => (Arc::new(HashEmbedder::default()) as Arc<dyn Embedder>, RetryPolicy::default()),
            };
            let index = build_index(&examples, embedder.as_ref(), &retry)?;
            index.save(&out)?;
            println!("indexed {} examples (dimension {}) into {}", index.len(), index.dim(), out.display());
        }
        Command::Run(args) => run(args)?,
        Command::Sample { dataset, per_task, seed, out } => {
            let pool = sample_pool(&load_dataset(&dataset)?.examples, per_task, seed)?;
            save_dataset(&out, &pool)?;
            println!("sampled {} examples into {}", pool.len(), out.display());
        }
        Command::Hardset { pool, matrix, min_wrong, out, summary } => {
            if min_wrong == 0 {
                bail!("--min-wrong must be positive");
            }
            let pool = load_dataset(&pool)?.examples;
            let matrix = ModelResultMatrix::load(&matrix)?;
            let (hard, report) = build_hard_set(&pool, &matrix, min_wrong)?;
            save_dataset(&out, &hard)?;
            if let Some(path) = summary {
                let json = serde_json::to_string_pretty(&report)? + "\n";
                std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
            }
            print!("{}", report.render());
        }
        Command::Ragbank { dataset, pool, size, seed, out } => {
            let dataset = load_dataset(&dataset)?.examples;
            let pool = load_dataset(&pool)?.examples;
            let bank = build_rag_bank(&dataset, &pool, size, seed)?;
            save_dataset(&out, &bank)?;
            println!("wrote {} bank examples to {}", bank.len(), out.display());
        }
        Command::Eval { results, dataset, embed_backend, config, report } => {
            let lines = read_result_lines(&results)?;
            let dataset = load_dataset(&dataset)?.examples;
            let (embedder, retry) = embedder_from(config.as_deref(), embed_backend == EmbedBackend::Http)?;
            let rep = evaluate_result_lines(&lines, &dataset, embedder.as_ref(), &retry)?;
            write_report(&report, None, "", &rep)?;
            let label = lines.first().map_or("results", |l| l.mode.as_str());
            print!("{}", EvalReport::table(&[(label, &rep)]));
        }
        Command::Trace { command: TraceCommand::Show { dir, example_id, full } } => {
            print!("{}", render_trace(&load_trace(&dir, &example_id)?, full));
        }
    }
    Ok(())
}

/// Whether an error came from a model backend (exit code 2) rather than
/// from input files or settings (exit code 1).
fn is_backend_failure(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        if let Some(e) = cause.downcast_ref::<BackendError>() {
            return !matches!(e, BackendError::InvalidRequest(_));
        }
        if let Some(e) = cause.downcast_ref::<RunConfigError>() {
            return e.is_backend();
        }
        if let Some(RetrievalError::EmbeddingFailed { .. }) = cause.downcast_ref::<RetrievalError>() {
            return true;
        }
        matches!(cause.downcast_ref::<ResultsError>(), Some(ResultsError::Backend(e)) if !matches!(e, BackendError::InvalidRequest(_)))
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_backend_failure(&e) { 2 } else { 1 })
        }
    }
}
