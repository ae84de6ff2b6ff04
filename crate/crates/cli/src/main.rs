//! `semsense` command line.
//!
//! Every flag can also be set through an environment variable with the
//! `SEMSENSE_` prefix (`--max-inflight` is `SEMSENSE_MAX_INFLIGHT`, and so on).
//!
//! Exit codes: 0 success, 1 usage or config error, 2 stage failure,
//! 3 consistency violation.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use semsense::annotation::{agreement_report, export_csv, AnnotationServer, AnnotationService, AnnotationTask, JudgmentStore};
use semsense::artifacts;
use semsense::backend::{protocol, Capability, GenerationParams, HttpTransport, Transport, WireRequest};
use semsense::pipeline::{self, selftest, Pipeline, RunConfig, Stage};
use semsense::Error;

#[derive(Parser)]
#[command(name = "semsense", version, about = "Semantic-sensitivity evaluation for NLI classifiers")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML).
    #[arg(long, global = true, env = "SEMSENSE_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory, overriding `out_dir`.
    #[arg(long, global = true, env = "SEMSENSE_OUT")]
    out: Option<PathBuf>,
    /// Overrides both configured seeds.
    #[arg(long, global = true, env = "SEMSENSE_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true, env = "SEMSENSE_MAX_INFLIGHT")]
    max_inflight: Option<usize>,
    /// Validate config and backend reachability, then exit without writing.
    #[arg(long, global = true, env = "SEMSENSE_DRY_RUN")]
    dry_run: bool,
    /// Endpoint override as `<capability>=<url>`; repeatable.
    #[arg(long, global = true, env = "SEMSENSE_BACKEND_URL", value_delimiter = ',')]
    backend_url: Vec<String>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    Ingest,
    Filter,
    Generate,
    Evaluate,
    Analyze,
    Report,
    /// Run the pipeline, or a single stage with `--stage`.
    Run {
        #[arg(long, env = "SEMSENSE_STAGE")]
        stage: Option<String>,
        /// Resume from this stage through `report`.
        #[arg(long, conflicts_with = "stage")]
        from: Option<String>,
    },
    /// Human evaluation of accepted variations.
    Annotate {
        #[command(subcommand)]
        action: AnnotateAction,
    },
    /// End-to-end fixture run against the golden report.
    Selftest {
        /// Work directory (a temporary one by default).
        #[arg(long)]
        dir: Option<PathBuf>,
        /// Rewrite the golden files from this run.
        #[arg(long)]
        bless: bool,
    },
    /// Probe a live inference server for wire-protocol conformance.
    Conform {
        #[arg(long)]
        url: String,
        #[arg(long, default_value = "nli")]
        nli_model: String,
        #[arg(long, default_value = "generator")]
        generation_model: String,
        /// Also probe `/v1/embed` with this model.
        #[arg(long)]
        embedding_model: Option<String>,
    },
}

#[derive(Subcommand)]
enum AnnotateAction {
    /// Serve the annotation API (and static assets, if configured).
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
    /// Write all judgments as CSV.
    Export {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Percent agreement and Cohen's kappa between the two annotators.
    Kappa,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Consistency(_) => 3,
        Error::Config(_) | Error::UnknownFormat(_) => 1,
        _ => 2,
    }
}

fn kind(e: &Error) -> &'static str {
    match e.root() {
        Error::Consistency(_) => "consistency",
        Error::Config(_) | Error::UnknownFormat(_) => "config",
        Error::MissingInput { .. } => "missing_input",
        Error::Transport { .. } | Error::Backend { .. } | Error::MalformedResponse(_) => "backend",
        Error::Io { .. } | Error::Parse { .. } => "io",
        _ => "stage",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEMSENSE_LOG", level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(message)) => {
            eprintln!("{}", json!({"error": message, "kind": "usage"}));
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("{}", json!({"error": e.to_string(), "kind": kind(&e)}));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(global: &Global) -> Result<RunConfig, Failure> {
    let path = global
        .config
        .as_ref()
        .ok_or_else(|| Failure::Usage("--config (or SEMSENSE_CONFIG) is required".into()))?;
    if !path.is_file() {
        return Err(Error::Config(format!("config file {} not found", path.display())).into());
    }
    let mut config = RunConfig::load(path)?;
    if let Some(out) = &global.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = global.seed {
        config.seeds.subset = seed;
        config.seeds.annotation = seed;
    }
    if let Some(n) = global.max_inflight {
        config.backend.max_inflight = n;
    }
    for spec in &global.backend_url {
        let (cap, url) = spec
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--backend-url expects <capability>=<url>, got `{spec}`")))?;
        let cap = Capability::parse(cap)
            .ok_or_else(|| Failure::Usage(format!("unknown capability `{cap}` (nli, generate, embed)")))?;
        config.backend.endpoints.set(cap, url.to_string());
    }
    Ok(config)
}

fn parse_stage(name: &str) -> Result<Stage, Failure> {
    name.parse().map_err(|_| {
        let names: Vec<_> = Stage::ALL.iter().map(|s| s.name()).collect();
        Failure::Usage(format!("unknown stage `{name}` (one of {})", names.join(", ")))
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    let stage = match &cli.command {
        Command::Ingest => Some(Stage::Ingest),
        Command::Filter => Some(Stage::Filter),
        Command::Generate => Some(Stage::Generate),
        Command::Evaluate => Some(Stage::Evaluate),
        Command::Analyze => Some(Stage::Analyze),
        Command::Report => Some(Stage::Report),
        _ => None,
    };
    match cli.command {
        Command::Selftest { dir, bless } => return selftest_cmd(dir, bless),
        Command::Conform {
            url,
            nli_model,
            generation_model,
            embedding_model,
        } => return conform(&url, &nli_model, &generation_model, embedding_model.as_deref()),
        _ => {}
    }

    let config = load_config(&cli.global)?;
    if cli.global.dry_run {
        for line in pipeline::dry_run(&config)? {
            println!("{line}");
        }
        return Ok(());
    }

    match cli.command {
        Command::Run { stage: Some(name), .. } => run_stages(&config, &[parse_stage(&name)?]),
        Command::Run { from, .. } => {
            let from = from.as_deref().map(parse_stage).transpose()?.unwrap_or(Stage::Ingest);
            let stages: Vec<Stage> = Stage::ALL.into_iter().filter(|s| *s >= from).collect();
            run_stages(&config, &stages)
        }
        Command::Annotate { action } => annotate(config, action),
        _ => run_stages(&config, &[stage.expect("stage subcommand")]),
    }
}

fn run_stages(config: &RunConfig, stages: &[Stage]) -> Result<(), Failure> {
    let pipeline = Pipeline::new(config.clone())?;
    for stage in stages {
        pipeline.run_stage(*stage)?;
        println!("{stage}: ok");
    }
    let stats = pipeline.run_stats();
    println!(
        "cache: {} hits, {} misses, {} entries",
        stats.cache.hits, stats.cache.misses, stats.cache.entries
    );
    if stages.contains(&Stage::Report) {
        println!("report: {}", pipeline.out_dir().join(artifacts::REPORT_MD).display());
    }
    Ok(())
}

fn tasks(pipeline: &Pipeline) -> Result<Vec<AnnotationTask>, Failure> {
    let path = pipeline.out_dir().join(pipeline::ANNOTATION_TASKS);
    if path.is_file() {
        Ok(artifacts::read_jsonl(&path)?)
    } else {
        Ok(pipeline.annotation_tasks()?)
    }
}

fn annotators(config: &RunConfig) -> Result<&[String], Failure> {
    match config.annotation.annotators.as_slice() {
        a @ [_, _] => Ok(a),
        _ => Err(Failure::Usage("annotation.annotators must name two annotators".into())),
    }
}

fn annotate(config: RunConfig, action: AnnotateAction) -> Result<(), Failure> {
    let pair = annotators(&config)?.to_vec();
    let pipeline = Pipeline::new(config.clone())?;
    let tasks = tasks(&pipeline)?;
    let store = JudgmentStore::open(config.journal_path())?;
    match action {
        AnnotateAction::Serve { addr, static_dir } => {
            let mut service = AnnotationService::new(tasks, store, &pair)?;
            if let Some(dir) = static_dir.or(config.annotation.static_dir.clone()) {
                service = service.with_static_dir(dir);
            }
            let server = AnnotationServer::bind(&addr, Arc::new(service))?;
            println!("annotation service on {}", server.url());
            server.wait();
            Ok(())
        }
        AnnotateAction::Export { output } => {
            let csv = export_csv(&tasks, &store.snapshot())?;
            match output {
                Some(path) => artifacts::write_bytes(&path, csv.as_bytes())?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        AnnotateAction::Kappa => {
            let (a, b) = store.paired(&tasks, &pair[0], &pair[1])?;
            let report = agreement_report(&a, &b)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
            Ok(())
        }
    }
}

fn selftest_cmd(dir: Option<PathBuf>, bless: bool) -> Result<(), Failure> {
    let tmp;
    let dir = match dir {
        Some(d) => {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            d
        }
        None => {
            tmp = std::env::temp_dir().join(format!("semsense-selftest-{}", std::process::id()));
            let _ = std::fs::remove_dir_all(&tmp);
            std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
            tmp
        }
    };
    if bless {
        selftest::bless(&dir)?;
        println!("golden files written to {}", selftest::GOLDEN_DIR);
        return Ok(());
    }
    let outcome = selftest::run(&dir)?;
    for line in outcome.summary() {
        println!("{line}");
    }
    let w = &outcome.cold.report.weighted;
    if let Some(first) = w.first() {
        println!(
            "weighted rates: r_s = {:.2}, r_r = {:.2} over n' = {}",
            first.r_s.unwrap_or(f64::NAN),
            first.r_r.unwrap_or(f64::NAN),
            first.n_prime
        );
    }
    if outcome.passed() {
        println!("selftest: ok");
        Ok(())
    } else {
        Err(Error::Consistency("selftest output differs from the golden report".into()).into())
    }
}

fn conform(url: &str, nli_model: &str, generation_model: &str, embedding_model: Option<&str>) -> Result<(), Failure> {
    let endpoints = semsense::backend::Endpoints {
        nli: Some(url.to_string()),
        generate: Some(url.to_string()),
        embed: Some(url.to_string()),
    };
    let transport = HttpTransport::new(endpoints, Duration::from_secs(60), 0);
    let mut probes = vec![
        (
            Capability::Nli,
            nli_model,
            protocol::nli_request("A man is sleeping on a couch.", "A person is resting.", nli_model),
        ),
        (
            Capability::Generate,
            generation_model,
            protocol::generate_request(
                &semsense::backend::build_prompt("A man is sleeping on a couch"),
                &GenerationParams::default(),
                generation_model,
            ),
        ),
    ];
    if let Some(m) = embedding_model {
        probes.push((Capability::Embed, m, protocol::embed_request("A man is sleeping.", m)));
    }
    let mut failed = 0;
    for (capability, model, body) in probes {
        let request = WireRequest {
            capability,
            model: model.to_string(),
            body,
            attempt: 0,
        };
        let verdict = transport.call(&request).and_then(|response| {
            protocol::validate_response(capability, &response).map_err(Error::MalformedResponse)?;
            if capability == Capability::Nli {
                protocol::parse_nli_response(&response)?;
            }
            Ok(())
        });
        match verdict {
            Ok(()) => println!("{capability}: ok"),
            Err(e) => {
                failed += 1;
                println!("{capability}: FAIL {e}");
            }
        }
    }
    if failed > 0 {
        return Err(Error::Consistency(format!("{failed} capability probe(s) failed")).into());
    }
    Ok(())
}
