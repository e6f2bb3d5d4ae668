use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hwdyn_core::gateway::BackendKind;
use hwdyn_core::pipeline::{run_pipeline, PipelineConfig, PipelineError, SessionStatus, Stage};

#[derive(Debug, Parser)]
#[command(name = "hwdyn", version, about = "Code homework-session transcripts and analyse them")]
struct Cli {
    /// Pipeline config (TOML or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Corpus root; overrides the config.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Stage to run when no subcommand is given.
    #[arg(long, global = true)]
    stage: Option<Stage>,
    /// Sessions processed at once.
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    /// Directory of recorded responses; selects the mock backend.
    #[arg(long, global = true)]
    mock_fixtures: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Segment and merge recordings into the session store.
    Ingest,
    /// Repair transcription errors.
    Correct,
    /// Assign parent/child roles to speakers.
    Roles,
    /// Code behaviours and conflicts and count features.
    Code,
    /// Agreement against expert labels.
    Agree,
    /// Emotion curves and the cross-session band.
    Emotions,
    /// Distributions, survey shifts and correlations.
    Stats,
    /// All corpus-level analyses and reports.
    Report,
    /// The whole pipeline.
    Run,
}

impl From<Command> for Stage {
    fn from(c: Command) -> Stage {
        match c {
            Command::Ingest => Stage::Ingest,
            Command::Correct => Stage::Correct,
            Command::Roles => Stage::Roles,
            Command::Code => Stage::Code,
            Command::Agree => Stage::Agree,
            Command::Emotions => Stage::Emotions,
            Command::Stats => Stage::Stats,
            Command::Report => Stage::Report,
            Command::Run => Stage::Run,
        }
    }
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(p) = &cli.corpus {
        config.corpus_root = p.clone();
    }
    if let Some(p) = &cli.out {
        config.out_dir = p.clone();
    }
    if let Some(n) = cli.concurrency {
        config.concurrency = n;
    }
    if let Some(p) = &cli.mock_fixtures {
        config.mock_fixtures = Some(p.clone());
        config.backend.backend_kind = BackendKind::Mock;
    }
    Ok(config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let stage = match (cli.command, cli.stage) {
        (Some(_), Some(_)) => {
            eprintln!("error: give either a subcommand or --stage, not both");
            return ExitCode::from(2);
        }
        (Some(c), None) => Stage::from(c),
        (None, s) => s.unwrap_or(Stage::Run),
    };

    let result = build_config(&cli).and_then(|config| run_pipeline(&config, stage));
    match result {
        Ok(manifest) => {
            for s in &manifest.sessions {
                let status = match s.status {
                    SessionStatus::Ok => "ok",
                    SessionStatus::Warning => "warning",
                    SessionStatus::Error => "error",
                };
                match &s.failure {
                    Some(f) => eprintln!("{:<24} {status:<8} {}: {}", s.session_id, f.stage, f.message),
                    None => eprintln!("{:<24} {status:<8} {} warning(s), {} error(s)", s.session_id, s.warnings, s.errors),
                }
            }
            for f in &manifest.corpus_findings.findings {
                eprintln!("{f}");
            }
            for r in &manifest.reports {
                println!("{r}");
            }
            ExitCode::from(manifest.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
