//! `kronadapt` command-line front end.
//!
//! Exit codes: 0 success, 2 argument or configuration error, 3 IO or file
//! format error, 4 numerical failure (including diverged training runs and
//! failed `inspect --verify` checks). Every failure prints exactly one line
//! on stderr of the form `kronadapt: error[<category>]: <message>`.

mod bench;
mod config;
mod decompose;
mod inspect;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kronadapt::{Error, ErrorCategory, KronShape};

use crate::config::FileConfig;

#[derive(Debug, Parser)]
#[command(name = "kronadapt", version, about = "Kronecker-product SVD adapters")]
struct Cli {
    /// Print machine-readable JSON on stdout instead of a human summary.
    #[arg(long, global = true)]
    json: bool,

    /// TOML file overriding defaults; command-line flags win over it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decompose a weight matrix into a SoKA checkpoint.
    Decompose(decompose::DecomposeArgs),
    /// Compare SoKA and LoRA parameter and matvec costs.
    Bench(bench::BenchArgs),
    /// Run the synthetic training battery.
    Train(train::TrainArgs),
    /// Summarize and optionally verify a checkpoint.
    Inspect(inspect::InspectArgs),
}

/// `--shape` value: explicit `m,n,p,q` or `auto`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeArg {
    Auto,
    Explicit(KronShape),
}

impl std::str::FromStr for ShapeArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(ShapeArg::Auto);
        }
        s.parse()
            .map(ShapeArg::Explicit)
            .map_err(|e: Error| e.to_string())
    }
}

impl ShapeArg {
    /// Resolve against a weight of the given size, checking compatibility.
    pub fn resolve(self, rows: usize, cols: usize) -> kronadapt::Result<KronShape> {
        match self {
            ShapeArg::Auto => KronShape::auto(rows, cols),
            ShapeArg::Explicit(s) => {
                s.check_weight(rows, cols)?;
                Ok(s)
            }
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SeedArg {
    /// Global seed. Falls back to the config file, then KRONADAPT_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

impl SeedArg {
    pub fn resolve(&self, cfg: &FileConfig) -> Result<u64, CliError> {
        if let Some(s) = self.seed.or(cfg.seed) {
            return Ok(s);
        }
        match std::env::var("KRONADAPT_SEED") {
            Ok(v) => v.trim().parse().map_err(|_| {
                CliError::argument(format!("KRONADAPT_SEED={v:?} is not an unsigned integer"))
            }),
            Err(_) => Ok(0),
        }
    }
}

/// A failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    category: &'static str,
    code: u8,
    message: String,
}

impl CliError {
    pub fn argument(message: impl Into<String>) -> Self {
        Self {
            category: "argument",
            code: 2,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self {
            category: "numerical",
            code: 4,
            message: message.into(),
        }
    }

    pub fn verify(message: impl Into<String>) -> Self {
        Self {
            category: "verify",
            code: 4,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (category, code) = match e.category() {
            ErrorCategory::Argument => ("argument", 2),
            ErrorCategory::Io => ("io", 3),
            ErrorCategory::Numerical => ("numerical", 4),
        };
        Self {
            category,
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

/// Output context shared by all subcommands.
pub struct Ctx {
    pub json: bool,
    pub config: FileConfig,
}

impl Ctx {
    /// Print a human summary line, suppressed in JSON mode.
    pub fn say(&self, line: impl AsRef<str>) {
        if !self.json {
            out(line);
        }
    }

    pub fn emit_json(&self, value: &serde_json::Value) {
        if self.json {
            out(serde_json::to_string_pretty(value).expect("json values serialize"));
        }
    }
}

/// Write a line to stdout; a closed pipe is not an error worth reporting.
pub fn out(line: impl AsRef<str>) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{}", line.as_ref());
}

fn run(cli: Cli) -> CliResult {
    let config = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let ctx = Ctx {
        json: cli.json,
        config,
    };
    match cli.command {
        Command::Decompose(a) => decompose::run(&ctx, a),
        Command::Bench(a) => bench::run(&ctx, a),
        Command::Train(a) => train::run(&ctx, a),
        Command::Inspect(a) => inspect::run(&ctx, a),
    }
}

fn one_line(s: &str) -> String {
    s.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.kind().to_string();
            let detail = e.render().to_string();
            let first = detail
                .lines()
                .next()
                .map(|l| l.trim_start_matches("error: ").to_string())
                .unwrap_or(text);
            eprintln!("kronadapt: error[argument]: {}", one_line(&first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kronadapt: error[{}]: {}", e.category, one_line(&e.message));
            ExitCode::from(e.code)
        }
    }
}
