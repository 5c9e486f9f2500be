use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use kinlab_cli::run::default_out_dir;
use kinlab_cli::{parse_config, run, CommandKind, Format, RunError};

/// Runs one experiment from a `key = value` config file.
#[derive(Parser)]
#[command(name = "kinlab", version)]
struct Args {
    command: CommandKind,
    /// Config file; every key is optional and documented defaults apply.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: runs/<command>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it. Falls back to KINLAB_THREADS.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

fn fail(kind: &str, messages: Vec<String>, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "messages": messages } }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let threads = args.threads.or_else(|| std::env::var("KINLAB_THREADS").ok().and_then(|s| s.parse().ok()));
    if let Some(k) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            return fail("threads", vec![e.to_string()], 2);
        }
    }
    let text = match &args.config {
        Some(p) => match std::fs::read_to_string(p) {
            Ok(t) => t,
            Err(e) => return fail("io", vec![format!("{}: {e}", p.display())], 2),
        },
        None => String::new(),
    };
    let mut plan = match parse_config(args.command, &text) {
        Ok(p) => p,
        Err(e) => return fail("config", e.messages, 2),
    };
    if let Some(s) = args.seed {
        plan.set_seed(s);
    }
    let out = args.out.unwrap_or_else(|| default_out_dir(args.command));
    match run(&plan, &out, args.format) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(RunError::Kin(e)) => fail("run", vec![e.to_string()], 1),
        Err(RunError::Io(e)) => fail("io", vec![e], 1),
    }
}
