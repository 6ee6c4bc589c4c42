use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use coarsefine_core::dataset::{
    convert_caption_jsonl, load_contents, load_dataset, load_queries, DatasetError, Direction,
};
use coarsefine_core::embedstore::{ingest_embeddings, StoreError};
use coarsefine_core::eval::{evaluate, sweep_k, write_csv, EvalError};
use coarsefine_core::pipeline::{
    make_backend, retrieve_batch, BackendKind, Corpus, PipelineConfig, PipelineError, Query,
};
use coarsefine_core::reinjection::{verify_fixture_dir, KernelError, KERNEL_TOLERANCE};
use coarsefine_core::synthetic::{generate, SyntheticSpec};
use tracing::{info, warn};

mod error;

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "coarsefine", version, about = "Coarse-then-fine multimodal retrieval")]
struct Cli {
    /// Pipeline config file (.toml or .json); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate an embedding store and print a summary line.
    EmbedIngest {
        /// Store manifest (JSON).
        manifest: PathBuf,
    },
    /// Rank candidates for each query; writes one JSON line per query.
    Retrieve {
        #[command(flatten)]
        input: QueryInput,
        #[command(flatten)]
        run: RunArgs,
        /// Output file (default stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a dataset at one k; writes a CSV report.
    Eval {
        /// Dataset manifest.
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// CSV output (default stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-query results as JSONL.
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Evaluate a dataset at several k values; one CSV row each.
    SweepK {
        /// Dataset manifest.
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated, strictly increasing.
        #[arg(long, value_delimiter = ',', default_values_t = [3usize, 5, 7, 9])]
        ks: Vec<usize>,
        #[command(flatten)]
        run: RunArgs,
        /// CSV output (default stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the re-injection kernel against fixture files.
    KernelVerify {
        /// Directory of case_*.json fixtures.
        #[arg(long)]
        fixtures: PathBuf,
    },
    /// Write a seeded synthetic dataset.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        candidates: usize,
        #[arg(long, default_value_t = 50)]
        queries: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 10)]
        clusters: usize,
        /// Std-dev of candidates around their cluster centre.
        #[arg(long, default_value_t = 0.35)]
        cluster_spread: f64,
        /// Std-dev of the offset from gold candidate to query.
        #[arg(long, default_value_t = 0.25)]
        query_noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "synthetic")]
        name: String,
    },
    /// Convert caption JSONL (one image per line) into a dataset manifest.
    Convert {
        /// Caption JSONL: {id?, image, caption or captions}.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        direction: DirectionArg,
        #[arg(long)]
        name: String,
        /// Candidate store manifest, as referenced from the output directory.
        #[arg(long)]
        candidate_store: PathBuf,
        /// Query store manifest, as referenced from the output directory.
        #[arg(long)]
        query_store: PathBuf,
        /// Output manifest path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct QueryInput {
    /// Dataset manifest; supplies store, queries and candidate payloads.
    #[arg(long, conflicts_with_all = ["store", "queries"])]
    dataset: Option<PathBuf>,
    /// Candidate store manifest.
    #[arg(long, requires = "queries")]
    store: Option<PathBuf>,
    /// JSONL of {query_id, text?, image?, embedding}.
    #[arg(long, requires = "store")]
    queries: Option<PathBuf>,
    /// JSONL of candidate payloads {id, text?, image?}.
    #[arg(long, requires = "store")]
    contents: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Mock,
    Http,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DirectionArg {
    TextToImage,
    ImageToText,
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Chat completions URL for the http backend.
    #[arg(long)]
    endpoint: Option<String>,
    /// Model name sent to the http backend.
    #[arg(long)]
    model: Option<String>,
    /// Coarse pool size.
    #[arg(long)]
    k: Option<usize>,
    /// Re-injection ratio in [0, 1].
    #[arg(long)]
    alpha: Option<f64>,
    /// Skip generative rescoring; output the coarse order.
    #[arg(long)]
    no_fine: bool,
    /// Resolve equal fine scores by coarse similarity instead of entropy.
    #[arg(long)]
    no_tiebreak: bool,
    /// Fail with exit 3 instead of degrading when the backend is down.
    #[arg(long)]
    strict: bool,
    /// Maximum backend calls in flight.
    #[arg(long)]
    jobs: Option<usize>,
    /// Mock backend seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Std-dev of Gaussian noise on mock scores.
    #[arg(long)]
    mock_noise: Option<f64>,
    /// Probability that a mock score is replaced by a uniform draw.
    #[arg(long)]
    mock_error_rate: Option<f64>,
    /// Quantize mock scores to this many levels.
    #[arg(long)]
    mock_levels: Option<u32>,
    /// Scoring prompt template file with {query} and {candidate}.
    #[arg(long)]
    score_template: Option<PathBuf>,
}

fn read_config(path: Option<&Path>) -> Result<PipelineConfig, CliError> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let raw = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&raw).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&raw).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::input(format!("config {}: {e}", path.display())))
}

fn resolve_config(path: Option<&Path>, run: &RunArgs) -> Result<PipelineConfig, CliError> {
    let mut c = read_config(path)?;
    if let Some(b) = run.backend {
        c.backend = match b {
            BackendArg::Mock => BackendKind::Mock,
            BackendArg::Http => BackendKind::Http,
        };
    }
    if let Some(e) = &run.endpoint {
        c.http.endpoint = e.clone();
    }
    if let Some(m) = &run.model {
        c.http.model = m.clone();
    }
    if let Some(k) = run.k {
        c.k = k;
    }
    if let Some(a) = run.alpha {
        c.alpha = a;
    }
    if run.no_fine {
        c.enable_fine_stage = false;
    }
    if run.no_tiebreak {
        c.enable_tiebreak = false;
    }
    if run.strict {
        c.strict = true;
    }
    if let Some(j) = run.jobs {
        c.jobs = j;
    }
    if let Some(s) = run.seed {
        c.mock.seed = s;
    }
    if let Some(n) = run.mock_noise {
        c.mock.noise_sigma = n;
    }
    if let Some(r) = run.mock_error_rate {
        c.mock.error_rate = r;
    }
    if let Some(l) = run.mock_levels {
        c.mock.levels = Some(l);
    }
    if let Some(t) = &run.score_template {
        c.score_template_path = Some(t.clone());
    }
    c.validate().map_err(CliError::from)?;
    c.load_templates()
        .map_err(|e| CliError::input(format!("score template: {e}")))?;
    let mut echo = serde_json::to_value(&c).expect("config serializes");
    if let Some(key) = echo.pointer_mut("/http/api_key") {
        if !key.is_null() {
            *key = "<redacted>".into();
        }
    }
    eprintln!("{}", serde_json::json!({ "resolved_config": echo }));
    Ok(c)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(
            fs::File::create(p).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(io::BufWriter::new(io::stdout().lock())),
    })
}

fn io_err(e: io::Error) -> CliError {
    CliError::input(format!("write failed: {e}"))
}

fn cmd_embed_ingest(manifest: &Path) -> Result<(), CliError> {
    let store = ingest_embeddings(manifest)?;
    let m = store.manifest();
    let (min, mean, max) = store.norm_stats().unwrap_or((0.0, 0.0, 0.0));
    println!(
        "count={} dim={} dtype=f32le normalization={} norm_min={min:.6} norm_mean={mean:.6} norm_max={max:.6}",
        m.count,
        m.dim,
        serde_json::to_value(m.normalization)
            .expect("serializable")
            .as_str()
            .unwrap_or("?"),
    );
    Ok(())
}

fn load_input(input: &QueryInput) -> Result<(Vec<Query>, Corpus), CliError> {
    if let Some(ds) = &input.dataset {
        let ds = load_dataset(ds)?;
        return Ok((ds.queries, ds.corpus));
    }
    match (&input.store, &input.queries) {
        (Some(store), Some(queries)) => {
            let store = Arc::new(ingest_embeddings(store)?);
            let contents = match &input.contents {
                Some(p) => load_contents(p)?,
                None => Default::default(),
            };
            Ok((load_queries(queries)?, Corpus::with_contents(store, contents)))
        }
        _ => Err(CliError::input("give --dataset, or --store with --queries")),
    }
}

fn cmd_retrieve(cli: &Cli, input: &QueryInput, run: &RunArgs, out: Option<&Path>) -> Result<(), CliError> {
    let config = resolve_config(cli.config.as_deref(), run)?;
    let (queries, corpus) = load_input(input)?;
    let backend = make_backend(&config, &queries, corpus.store.clone())?;
    let outcomes = retrieve_batch(&queries, &corpus, &config, backend.as_ref())?;
    let mut w = output(out)?;
    let mut failed = 0;
    for (q, outcome) in queries.iter().zip(outcomes) {
        match outcome {
            Ok(r) => {
                if r.degraded && config.enable_fine_stage {
                    warn!(query = %r.query_id, "fine stage unavailable; coarse order used");
                }
                serde_json::to_writer(&mut w, &r).map_err(|e| CliError::input(e.to_string()))?;
                writeln!(w).map_err(io_err)?;
            }
            Err(e) => {
                failed += 1;
                eprintln!("query {}: {e}", q.id);
            }
        }
    }
    w.flush().map_err(io_err)?;
    info!(queries = queries.len(), failed, "retrieve done");
    if failed > 0 {
        return Err(CliError::input(format!("{failed} queries failed")));
    }
    Ok(())
}

fn cmd_eval(
    cli: &Cli,
    dataset: &Path,
    run: &RunArgs,
    out: Option<&Path>,
    results: Option<&Path>,
) -> Result<(), CliError> {
    let config = resolve_config(cli.config.as_deref(), run)?;
    let ds = load_dataset(dataset)?;
    let backend = make_backend(&config, &ds.queries, ds.corpus.store.clone())?;
    let (report, ranked) = evaluate(&ds, &config, backend.as_ref())?;
    if let Some(p) = results {
        let mut w = output(Some(p))?;
        for r in &ranked {
            serde_json::to_writer(&mut w, r).map_err(|e| CliError::input(e.to_string()))?;
            writeln!(w).map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
    }
    eprintln!(
        "{}",
        serde_json::json!({
            "timing": {
                "mean_ms_per_query": report.mean_ms_per_query,
                "mean_backend_ms_per_query": report.mean_backend_ms_per_query,
            },
            "failed_queries": report.failed_queries,
            "max_backend_calls": report.max_backend_calls,
        })
    );
    let mut w = output(out)?;
    write_csv(std::slice::from_ref(&report), &mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

fn cmd_sweep_k(cli: &Cli, dataset: &Path, ks: &[usize], run: &RunArgs, out: Option<&Path>) -> Result<(), CliError> {
    let config = resolve_config(cli.config.as_deref(), run)?;
    let ds = load_dataset(dataset)?;
    let backend = make_backend(&config, &ds.queries, ds.corpus.store.clone())?;
    let reports = sweep_k(ks, &ds, &config, backend.as_ref())?;
    let mut w = output(out)?;
    write_csv(&reports, &mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

fn cmd_kernel_verify(dir: &Path) -> Result<(), CliError> {
    let report = verify_fixture_dir(dir)?;
    for c in &report.checks {
        println!(
            "{} fused_dev={:.3e} equiv_dev={:.3e} boundaries={} {}",
            c.name,
            c.fused_deviation,
            c.equivalence_deviation,
            if c.boundaries_exact { "exact" } else { "inexact" },
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    println!(
        "fixtures={} max_deviation={:.3e} tolerance={KERNEL_TOLERANCE:e}",
        report.checks.len(),
        report.max_deviation()
    );
    if report.all_passed() {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "max deviation {:.3e} exceeds {KERNEL_TOLERANCE:e}",
            report.max_deviation()
        )))
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::EmbedIngest { manifest } => cmd_embed_ingest(manifest),
        Command::Retrieve { input, run, out } => cmd_retrieve(cli, input, run, out.as_deref()),
        Command::Eval {
            dataset,
            run,
            out,
            results,
        } => cmd_eval(cli, dataset, run, out.as_deref(), results.as_deref()),
        Command::SweepK { dataset, ks, run, out } => cmd_sweep_k(cli, dataset, ks, run, out.as_deref()),
        Command::KernelVerify { fixtures } => cmd_kernel_verify(fixtures),
        Command::Synth {
            out,
            candidates,
            queries,
            dim,
            clusters,
            cluster_spread,
            query_noise,
            seed,
            name,
        } => {
            if *queries > *candidates || *dim == 0 || *clusters == 0 || *candidates == 0 {
                return Err(CliError::input("need 0 < queries <= candidates, dim > 0, clusters > 0"));
            }
            let spec = SyntheticSpec {
                name: name.clone(),
                candidates: *candidates,
                queries: *queries,
                dim: *dim,
                clusters: *clusters,
                cluster_spread: *cluster_spread,
                query_noise: *query_noise,
                seed: *seed,
            };
            let path = generate(&spec).write(out)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Convert {
            input,
            direction,
            name,
            candidate_store,
            query_store,
            out,
        } => {
            let direction = match direction {
                DirectionArg::TextToImage => Direction::QueryTextToImage,
                DirectionArg::ImageToText => Direction::QueryImageToText,
            };
            let path = convert_caption_jsonl(input, direction, name, candidate_store, query_store, out)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_writer(io::stderr)
        .with_max_level(level)
        .with_target(false)
        .with_ansi(false)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::BackendUnavailable(_) => CliError::Backend(e.to_string()),
            other => CliError::input(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Pipeline(p) => p.into(),
            other => CliError::input(other.to_string()),
        }
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        CliError::input(e.to_string())
    }
}
