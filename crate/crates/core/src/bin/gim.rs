use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::json;

use gim::config::{key_help, RunConfig};
use gim::data::{generate, write_dataset};
use gim::gradcheck::{isolation_check, run_suite};
use gim::report::{build_report, render_table};
use gim::run::{cache_run, find_runs, probe_run, train_run};
use gim::GimError;

const VALIDATION: u8 = 1;
const RUNTIME: u8 = 2;
const ACCEPTANCE: u8 = 3;

#[derive(Parser)]
#[command(name = "gim", version, about = "Greedy InfoMax: train gradient-isolated encoder stacks and probe them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset described by a config as a GIMD file.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a stack; writes config.txt, run.json, metrics.jsonl and checkpoint.gimc.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Shorthand for `--set schedule.mode=...`.
        #[arg(long)]
        schedule: Option<String>,
        /// Shorthand for `--set output.dir=...`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Store one trained module's outputs over the training items as GIMA.
    Cache {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        module: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit linear probes on a trained run; writes probe.json.
    Probe {
        #[arg(long)]
        run: PathBuf,
        /// Probe only this module (index M is the context unit).
        #[arg(long)]
        module: Option<usize>,
    },
    /// Finite-difference check of every primitive plus the isolation check.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarise run directories that share a config digest.
    Report {
        /// Run directories, or directories holding them.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
    extra: serde_json::Value,
}

impl From<GimError> for Failure {
    fn from(e: GimError) -> Self {
        let extra = match &e {
            GimError::Config { key, line, .. } => json!({ "key": key, "line": line }),
            _ => json!({}),
        };
        Failure {
            code: if e.is_validation() { VALIDATION } else { RUNTIME },
            kind: e.kind(),
            message: e.to_string(),
            extra,
        }
    }
}

fn overrides(set: &[String]) -> Result<Vec<(String, String)>, Failure> {
    set.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Failure {
                    code: VALIDATION,
                    kind: "argument",
                    message: format!("--set expects KEY=VALUE, got {kv:?}"),
                    extra: json!({}),
                })
        })
        .collect()
}

fn load_config(path: Option<&PathBuf>, set: &[(String, String)]) -> Result<RunConfig, Failure> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(GimError::from)?,
        None => String::new(),
    };
    Ok(RunConfig::parse_with(&text, set)?)
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Synth { config, set, out } => {
            let cfg = load_config(config.as_ref(), &overrides(&set)?)?;
            let gim::config::DataSource::Synthetic(mut spec) = cfg.data else {
                return Err(GimError::Config {
                    key: "data.path".into(),
                    line: 0,
                    msg: "synth needs a synthetic data spec".into(),
                }
                .into());
            };
            spec.n_items += cfg.test_items;
            let ds = generate(&spec)?;
            write_dataset(&ds, &out)?;
            println!("{}", json!({ "out": out, "items": ds.len(), "item_shape": ds.item_shape() }));
        }
        Command::Train { config, set, schedule, out } => {
            let mut set = overrides(&set)?;
            if let Some(s) = schedule {
                set.push(("schedule.mode".into(), s));
            }
            if let Some(o) = out {
                set.push(("output.dir".into(), o.display().to_string()));
            }
            let cfg = load_config(config.as_ref(), &set)?;
            let (_, meta, _) = train_run(&cfg)?;
            println!("{}", serde_json::to_string(&meta).map_err(GimError::from)?);
        }
        Command::Cache { run, module, out } => {
            let store = cache_run(&run, module, &out)?;
            println!("{}", json!({ "out": out, "module": store.module, "samples": store.len(), "sample_shape": store.sample_shape() }));
        }
        Command::Probe { run, module } => {
            let report = probe_run(&run, module)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(GimError::from)?);
        }
        Command::Gradcheck { cases, seed } => {
            let entries = run_suite(cases, seed)?;
            let mut ok = true;
            for e in &entries {
                println!("{:<22} cases {:>4}  worst {:.3e}  {}", e.name, e.cases, e.worst, if e.passed { "pass" } else { "FAIL" });
                ok &= e.passed;
            }
            let isolated = isolation_check(seed)?;
            println!("{:<22} {}", "isolation", if isolated { "pass" } else { "FAIL" });
            if !(ok && isolated) {
                return Err(Failure {
                    code: ACCEPTANCE,
                    kind: "acceptance",
                    message: "gradient checks failed".into(),
                    extra: json!({ "failed": entries.iter().filter(|e| !e.passed).map(|e| e.name).collect::<Vec<_>>(), "isolation": isolated }),
                });
            }
        }
        Command::Report { runs, out } => {
            let mut dirs = Vec::new();
            for r in &runs {
                dirs.extend(find_runs(r)?);
            }
            let report = build_report(&dirs)?;
            print!("{}", render_table(&report));
            if let Some(out) = out {
                std::fs::write(&out, serde_json::to_string_pretty(&report).map_err(GimError::from)? + "\n").map_err(GimError::from)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let command = Cli::command().after_long_help(key_help());
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            eprintln!("{}", json!({ "error": "argument", "message": message.trim(), "exit_code": VALIDATION }));
            return ExitCode::from(VALIDATION);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let mut body = json!({ "error": f.kind, "message": f.message, "exit_code": f.code });
            if let (Some(b), Some(extra)) = (body.as_object_mut(), f.extra.as_object()) {
                b.extend(extra.clone());
            }
            eprintln!("{body}");
            ExitCode::from(f.code)
        }
    }
}
