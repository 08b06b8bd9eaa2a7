use agenttune::memory::{load_document, MemoryDocument};
use agenttune::session::{persist, BackendChoice};
use agenttune::{resume_session, run_session, SessionConfig, SessionError, SessionReport};
use clap::{Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "agenttune", version, about = "LLM-guided auto-tuning for storage systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a tuning session from a config file
    Run {
        /// Session config (JSON)
        #[arg(long)]
        config: PathBuf,
        /// Session directory to write (and resume from)
        #[arg(long, default_value = "session")]
        out: PathBuf,
        /// Override the configured backend: http, greedy-mock, scripted
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        token_budget: Option<u64>,
        /// Wall-clock budget in seconds
        #[arg(long)]
        time_budget: Option<f64>,
        #[arg(long)]
        max_iters: Option<u32>,
        #[arg(long)]
        branching: Option<u32>,
        #[arg(long)]
        top_k: Option<usize>,
        /// Long-term memory document to load and update
        #[arg(long)]
        ltm: Option<PathBuf>,
        /// Transcript file for the scripted backend
        #[arg(long)]
        transcript: Option<PathBuf>,
        /// Continue the interrupted session found in the output directory
        #[arg(long)]
        resume: bool,
    },
    /// Print the report of a finished session
    Report {
        dir: PathBuf,
    },
    /// Inspect, export, or import long-term memory documents
    Memory {
        #[command(subcommand)]
        action: MemoryAction,
    },
    /// Re-run a recorded session from its transcript and compare reports
    Replay {
        dir: PathBuf,
        /// Exit nonzero when the replayed report differs from the stored one
        #[arg(long)]
        verify: bool,
    },
}

#[derive(Subcommand)]
enum MemoryAction {
    /// Print id, tier, confidence, and text of every stored insight
    List {
        #[arg(long)]
        ltm: PathBuf,
    },
    /// Copy the document to another file
    Export {
        #[arg(long)]
        ltm: PathBuf,
        #[arg(long)]
        to: PathBuf,
    },
    /// Replace the document with another file's contents
    Import {
        #[arg(long)]
        ltm: PathBuf,
        #[arg(long)]
        from: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_SETUP: u8 = 3;

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            config,
            out,
            backend,
            seed,
            token_budget,
            time_budget,
            max_iters,
            branching,
            top_k,
            ltm,
            transcript,
            resume,
        } => {
            let mut session_config = match load_config(&config) {
                Ok(c) => c,
                Err(message) => {
                    eprintln!("error: {message}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            if let Some(name) = backend {
                session_config.backend = match parse_backend(&name) {
                    Some(b) => b,
                    None => {
                        eprintln!("error: unknown backend {name:?} (expected http, greedy-mock, or scripted)");
                        return ExitCode::from(EXIT_SETUP);
                    }
                };
            }
            if let Some(v) = seed {
                session_config.seed = v;
            }
            if let Some(v) = token_budget {
                session_config.token_budget = Some(v);
            }
            if let Some(v) = time_budget {
                session_config.time_budget_s = Some(v);
            }
            if let Some(v) = max_iters {
                session_config.max_iterations = Some(v);
            }
            if let Some(v) = branching {
                session_config.branching = v;
            }
            if let Some(v) = top_k {
                session_config.top_k = v;
            }
            if let Some(path) = ltm {
                session_config.ltm_path = Some(path);
            }
            if let Some(path) = transcript {
                session_config.transcript_path = Some(path);
            }
            let result = if resume {
                resume_session(&session_config, &out)
            } else {
                run_session(&session_config, &out)
            };
            match result {
                Ok(report) => {
                    print_report(&report);
                    println!("session directory: {}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    match e {
                        SessionError::Config(_) => ExitCode::from(EXIT_CONFIG),
                        SessionError::Setup(_) => ExitCode::from(EXIT_SETUP),
                        _ => ExitCode::FAILURE,
                    }
                }
            }
        }
        Command::Report { dir } => match read_report(&dir) {
            Ok(report) => {
                print_report(&report);
                ExitCode::SUCCESS
            }
            Err(message) => {
                eprintln!("error: {message}");
                ExitCode::from(EXIT_CONFIG)
            }
        },
        Command::Memory { action } => match run_memory(action) {
            Ok(()) => ExitCode::SUCCESS,
            Err(message) => {
                eprintln!("error: {message}");
                ExitCode::from(EXIT_CONFIG)
            }
        },
        Command::Replay { dir, verify } => run_replay(&dir, verify),
    }
}

fn load_config(path: &Path) -> Result<SessionConfig, String> {
    let text = fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("cannot parse config {}: {e}", path.display()))
}

fn parse_backend(name: &str) -> Option<BackendChoice> {
    match name {
        "http" => Some(BackendChoice::Http),
        "greedy-mock" => Some(BackendChoice::GreedyMock),
        "scripted" => Some(BackendChoice::Scripted),
        _ => None,
    }
}

fn read_report(dir: &Path) -> Result<SessionReport, String> {
    let path = dir.join(persist::REPORT_FILE);
    let text =
        fs::read_to_string(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("cannot parse {}: {e}", path.display()))
}

fn print_report(report: &SessionReport) {
    for row in &report.per_iteration {
        println!(
            "iteration {:>2}  best {:<18}  tokens {:>8}  errors {}",
            row.iteration,
            format!("{:.4}", row.best_so_far),
            row.cumulative_tokens,
            row.errors_so_far
        );
    }
    println!(
        "stopped after {} iteration(s): {}",
        report.iterations, report.stop_reason
    );
    let settings: Vec<String> = report
        .best_config
        .values
        .iter()
        .map(|(name, value)| format!("{name}={value}"))
        .collect();
    println!("best value {:.4} with {}", report.best_value, settings.join(" "));
    println!(
        "mpg {:.4}  tc95 {}  te {:.4}  twer {:.4}",
        report.mpg, report.tc95, report.te, report.twer
    );
}

fn run_memory(action: MemoryAction) -> Result<(), String> {
    match action {
        MemoryAction::List { ltm } => {
            if !ltm.exists() {
                return Ok(());
            }
            let document =
                load_document(&ltm).map_err(|e| format!("{}: {e}", ltm.display()))?;
            for insight in &document.insights {
                println!(
                    "{}  {}  {:.4}  {}",
                    insight.id, insight.tier, insight.confidence, insight.text
                );
            }
            Ok(())
        }
        MemoryAction::Export { ltm, to } => {
            let bytes =
                fs::read(&ltm).map_err(|e| format!("cannot read {}: {e}", ltm.display()))?;
            serde_json::from_slice::<MemoryDocument>(&bytes)
                .map_err(|e| format!("cannot parse {}: {e}", ltm.display()))?;
            fs::write(&to, bytes).map_err(|e| format!("cannot write {}: {e}", to.display()))?;
            Ok(())
        }
        MemoryAction::Import { ltm, from } => {
            let bytes =
                fs::read(&from).map_err(|e| format!("cannot read {}: {e}", from.display()))?;
            serde_json::from_slice::<MemoryDocument>(&bytes)
                .map_err(|e| format!("cannot parse {}: {e}", from.display()))?;
            fs::write(&ltm, bytes).map_err(|e| format!("cannot write {}: {e}", ltm.display()))?;
            Ok(())
        }
    }
}

fn run_replay(dir: &Path, verify: bool) -> ExitCode {
    let stored = match fs::read(dir.join(persist::REPORT_FILE)) {
        Ok(bytes) => bytes,
        Err(e) => {
            eprintln!("error: cannot read stored report: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let mut config = match load_config(&dir.join(persist::SESSION_FILE)) {
        Ok(c) => c,
        Err(message) => {
            eprintln!("error: {message}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let transcript = dir.join(persist::TRANSCRIPT_FILE);
    if !transcript.exists() {
        eprintln!("error: no transcript in {}", dir.display());
        return ExitCode::from(EXIT_CONFIG);
    }

    let scratch = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    config.backend = BackendChoice::Scripted;
    config.transcript_path = Some(transcript);
    // seed memory from the snapshot taken at session start; pointing at
    // a scratch copy keeps the final LTM write away from the original
    config.ltm_path = None;
    let snapshot = dir.join(persist::LTM_START_FILE);
    if snapshot.exists() {
        let seed = scratch.path().join("ltm_seed.json");
        if let Err(e) = fs::copy(&snapshot, &seed) {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
        config.ltm_path = Some(seed);
    }

    let replay_dir = scratch.path().join("replay");
    let report = match run_session(&config, &replay_dir) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: replay failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    let replayed = match fs::read(replay_dir.join(persist::REPORT_FILE)) {
        Ok(bytes) => bytes,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    print_report(&report);
    if replayed == stored {
        println!("replay matches the stored report");
        ExitCode::SUCCESS
    } else {
        println!("replay DIFFERS from the stored report");
        if verify {
            ExitCode::FAILURE
        } else {
            ExitCode::SUCCESS
        }
    }
}
