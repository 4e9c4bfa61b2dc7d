//! `shep` — static rewriting and control-transfer policing for PE32
//! kernel-style modules, from the command line.
//!
//! Subcommands: `analyze` (discovery as JSON), `rewrite` (instrument one
//! file), `verify` (original vs rewritten equivalence), `attack` (replay a
//! scenario), `bench` (whole-directory report table), `gen` (corpus and
//! scenario generator).
//!
//! Exit codes: 0 success, 1 input or parse problem, 2 analysis found
//! nothing usable, 3 rewrite failure, 4 verification divergence,
//! 5 scenario expectation mismatch.

mod analyze;
mod attack;
mod bench;
mod generate;
mod rewrite;
mod verify;

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use shep_core::analyzer::{parse_sidecar, SymbolTable};

// ---------------------------------------------------------------------------
// Exit codes and errors
// ---------------------------------------------------------------------------

pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_SCENARIO: i32 = 5;

/// A command failure with the exit code it maps to.
#[derive(Debug)]
pub enum CmdError {
    /// Missing files, unreadable bytes, malformed PE or JSON input.
    Input(String),
    /// Discovery ran but produced nothing a later stage could use.
    Analysis(String),
    /// The rewrite pipeline refused the file.
    Rewrite(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Input(_) => 1,
            CmdError::Analysis(_) => 2,
            CmdError::Rewrite(_) => 3,
        }
    }
}

impl fmt::Display for CmdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CmdError::Input(m) | CmdError::Analysis(m) | CmdError::Rewrite(m) => {
                write!(f, "{m}")
            }
        }
    }
}

impl std::error::Error for CmdError {}

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Parser)]
#[command(
    name = "shep",
    version,
    about = "Static PE32 rewriting and runtime control-transfer policing",
    after_help = "Set SHEP_LOG=<path> to append monitor decisions to a file \
during verify and attack runs."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Discover functions and basic blocks; print the code graph as JSON.
    Analyze {
        file: PathBuf,
        /// Symbol sidecar naming extra entry points.
        #[arg(long)]
        sym: Option<PathBuf>,
        /// Write the JSON here instead of stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Instrument a module and write the rewritten file.
    Rewrite {
        file: PathBuf,
        /// Output path (default: <stem>.shep.<ext> next to the input).
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        sym: Option<PathBuf>,
        /// Print the report row on stdout in this format
        /// (default: a short summary on stderr).
        #[arg(long, value_enum)]
        report: Option<ReportFormat>,
        /// Also guard direct calls (more stubs, more coverage).
        #[arg(long)]
        instrument_direct_calls: bool,
    },
    /// Run original and rewritten modules on the same inputs and compare.
    Verify {
        original: PathBuf,
        rewritten: PathBuf,
        /// Seed for the generated input vectors.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// How many input vectors to run.
        #[arg(long, default_value_t = 5)]
        vectors: usize,
        /// Deny transfers onto writable pages too.
        #[arg(long)]
        strict_writable_deny: bool,
    },
    /// Replay an attack scenario against its freshly instrumented module.
    Attack {
        /// Scenario description (JSON; see `shep gen` for examples).
        scenario: PathBuf,
        /// Deny transfers onto writable pages too.
        #[arg(long)]
        strict_writable_deny: bool,
    },
    /// Rewrite every .sys file in a directory; one report row per file.
    Bench {
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Csv)]
        report: ReportFormat,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        instrument_direct_calls: bool,
    },
    /// Generate a validated corpus plus the attack scenario bundle.
    Gen {
        /// Output directory (created if needed).
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of corpus modules.
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CmdError> {
    std::fs::read(path).map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))
}

pub fn load_sidecar(path: Option<&Path>) -> Result<Option<SymbolTable>, CmdError> {
    let Some(path) = path else { return Ok(None) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))?;
    parse_sidecar(&text)
        .map(Some)
        .map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))
}

/// Monitor log destination, taken from the environment.
pub fn shep_log() -> Option<String> {
    std::env::var("SHEP_LOG").ok().filter(|s| !s.is_empty())
}

/// Accept `0x`-prefixed hex or plain decimal.
pub fn parse_u32(s: &str) -> Result<u32, String> {
    let t = s.trim();
    let parsed = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(h) => u32::from_str_radix(h, 16),
        None => t.parse(),
    };
    parsed.map_err(|_| format!("bad 32-bit value {s:?}"))
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

fn run(cmd: Command) -> Result<i32, CmdError> {
    match cmd {
        Command::Analyze { file, sym, out } => {
            analyze::cmd_analyze(&file, sym.as_deref(), out.as_deref())
        }
        Command::Rewrite {
            file,
            out,
            sym,
            report,
            instrument_direct_calls,
        } => rewrite::cmd_rewrite(
            &file,
            out.as_deref(),
            sym.as_deref(),
            report,
            instrument_direct_calls,
        ),
        Command::Verify {
            original,
            rewritten,
            seed,
            vectors,
            strict_writable_deny,
        } => verify::cmd_verify(&original, &rewritten, seed, vectors, strict_writable_deny),
        Command::Attack {
            scenario,
            strict_writable_deny,
        } => attack::cmd_attack(&scenario, strict_writable_deny),
        Command::Bench {
            dir,
            report,
            jobs,
            instrument_direct_calls,
        } => bench::cmd_bench(&dir, report, jobs, instrument_direct_calls),
        Command::Gen { out, seed, count } => generate::cmd_gen(&out, seed, count),
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("shep: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
