use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ehv_cli::{
    cmd_bench_mask, cmd_compile, cmd_explore, cmd_fixtures, cmd_gbom_export, cmd_gbom_verify,
    cmd_simulate, CommandOutcome,
};

/// Runtime governance engine: policy compilation, deterministic
/// simulation, exhaustive safety exploration, and audit tooling.
#[derive(Parser)]
#[command(name = "ehv", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a policy grammar against a vocabulary and print a summary.
    Compile {
        /// Grammar file (see `ehv fixtures` for the format).
        grammar: PathBuf,
        /// Vocab file declaring `size` and token lexemes.
        vocab: PathBuf,
        /// Maximum DFA state count before compilation is rejected.
        #[arg(long, default_value_t = ehv_core::dfa::DEFAULT_STATE_BUDGET)]
        budget: usize,
    },
    /// Run a scenario deterministically and report metrics.
    Simulate {
        /// Scenario file; omit to use --workload defaults.
        scenario: Option<PathBuf>,
        /// Built-in workload profile (W1..W5, mixed) when no file is given.
        #[arg(long)]
        workload: Option<String>,
        /// Seed for --workload runs.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Directory for the event log, metrics, and per-node audit logs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exhaustively explore the enforcement state machine at small scope.
    Explore {
        /// Policy versions to model (dosage ceiling family).
        #[arg(long, default_value_t = 5)]
        versions: u64,
        /// How many of the fixture actions to include (1..=3).
        #[arg(long, default_value_t = 3)]
        actions: usize,
        /// Depth bound; exceeding it flags the run incomplete.
        #[arg(long, default_value_t = 64)]
        depth: usize,
        /// Distinct-state budget; exceeding it flags the run incomplete.
        #[arg(long, default_value_t = 1_000_000)]
        budget: usize,
    },
    /// Audit-log tooling.
    #[command(subcommand)]
    Gbom(GbomCommand),
    /// Measure per-step mask application latency.
    BenchMask {
        /// Vocabulary size for the logit vectors.
        #[arg(long, default_value_t = 50_000)]
        vocab: u32,
        #[arg(long, default_value_t = 10_000)]
        iterations: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Grammar to compile for the masking automaton (defaults to the
        /// bundled dosage policy).
        #[arg(long)]
        grammar: Option<PathBuf>,
    },
    /// Write the bundled policy fixtures and example scenarios to a
    /// directory.
    Fixtures {
        #[arg(long, default_value = "fixtures")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum GbomCommand {
    /// Export a persisted log as an OSCAL assessment-results document.
    Export {
        /// Newline-delimited record log (node0.gbom from `simulate --out`).
        log: PathBuf,
        /// Output file; prints to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the hash chain of a log or an exported document.
    Verify {
        /// A record log or an OSCAL export.
        file: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compile {
            grammar,
            vocab,
            budget,
        } => cmd_compile(&grammar, &vocab, budget),
        Command::Simulate {
            scenario,
            workload,
            seed,
            out,
        } => cmd_simulate(
            scenario.as_deref(),
            workload.as_deref(),
            seed,
            out.as_deref(),
        ),
        Command::Explore {
            versions,
            actions,
            depth,
            budget,
        } => cmd_explore(versions, actions, depth, budget),
        Command::Gbom(GbomCommand::Export { log, out }) => cmd_gbom_export(&log, out.as_deref()),
        Command::Gbom(GbomCommand::Verify { file }) => cmd_gbom_verify(&file),
        Command::BenchMask {
            vocab,
            iterations,
            seed,
            grammar,
        } => cmd_bench_mask(vocab, iterations, seed, grammar.as_deref()),
        Command::Fixtures { out } => cmd_fixtures(&out),
    };

    match result {
        Ok(CommandOutcome { exit_code, report }) => {
            print!("{report}");
            if exit_code == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
