//! `blockrg`: runs the check suites and writes JSON reports and CSV tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use blockrg_core::flow::{multi_start, stop_sweep, Schedule, ToyMaps};
use blockrg_core::report::{exit_code, list_checks, run_suite, Report, RunConfig, Suite};
use clap::{Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "blockrg", version, about = "Block-averaging RG check suites on small lattices")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set e=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Include wall times in the report.
    #[arg(long, global = true)]
    timings: bool,

    /// List every check with what it verifies and exit.
    #[arg(long)]
    list_checks: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Counterterm flow: zero maps, multi-start uniqueness, bound flags.
    Flow {
        /// Write the trajectory of the toy-map solution as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// RG-step invariance, free partition functions, minimizers, averaging bounds.
    Rgstep,
    /// Stability ratio, Monte Carlo against Wick, determinant and resolvent bounds.
    Stability,
    /// Cluster expansion, boundary terms, reblocking, partition of unity, regions.
    ExpansionCheck,
    /// Schedule constraints and the stop index.
    Schedule {
        /// Write the stop-index sweep over N = 10..30 as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Every suite.
    All,
    /// Print the effective config in `key = value` form.
    Config,
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, String> {
    let mut text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => String::new(),
    };
    let mut keys = Vec::new();
    for o in overrides {
        let (k, _) = o.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got `{o}`"))?;
        keys.push(k.trim().to_string());
    }
    text = text
        .lines()
        .filter(|l| {
            let key = l.split('#').next().unwrap_or("").split('=').next().unwrap_or("").trim();
            !keys.iter().any(|k| k == key)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    for o in overrides {
        text.push_str(o);
        text.push('\n');
    }
    RunConfig::parse(&text).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct FlowRow {
    k: usize,
    e_k: f64,
    eps: f64,
    m: f64,
    eps0: f64,
    activity_norm: f64,
    flags_ok: bool,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), String> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    for r in rows {
        w.serialize(r).map_err(|e| e.to_string())?;
    }
    w.flush().map_err(|e| e.to_string())
}

fn flow_csv(s: &Schedule, path: &Path) -> Result<(), String> {
    let k = s.stop_index().map_err(|e| e.to_string())?;
    let maps = ToyMaps { c: 1e-3, schedule: s };
    let (sols, _) = multi_start(s, &maps, k, &[[0.0, 0.0]], 1e-15).map_err(|e| e.to_string())?;
    write_csv(
        path,
        sols[0].trajectory.iter().map(|r| FlowRow {
            k: r.k,
            e_k: r.e_k,
            eps: r.eps,
            m: r.m,
            eps0: r.eps0,
            activity_norm: r.activity_norm,
            flags_ok: r.flags.all(),
        }),
    )
}

fn schedule_csv(s: &Schedule, path: &Path) -> Result<(), String> {
    let rows = stop_sweep(s, 10..=30).map_err(|e| e.to_string())?;
    write_csv(path, rows)
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    if cli.list_checks {
        print!("{}", list_checks());
        return Ok(ExitCode::SUCCESS);
    }
    let config = load_config(cli.config.as_deref(), &cli.overrides)?;
    let Some(command) = cli.command else {
        return Err("no command given; see --help".into());
    };
    let suites: Vec<Suite> = match &command {
        Command::Flow { csv } => {
            if let Some(p) = csv {
                flow_csv(&config.schedule, p)?;
            }
            vec![Suite::Flow]
        }
        Command::Rgstep => vec![Suite::Rgstep],
        Command::Stability => vec![Suite::Stability],
        Command::ExpansionCheck => vec![Suite::ExpansionCheck],
        Command::Schedule { csv } => {
            if let Some(p) = csv {
                schedule_csv(&config.schedule, p)?;
            }
            vec![Suite::Schedule]
        }
        Command::All => Suite::ALL.to_vec(),
        Command::Config => {
            print!("{}", config.emit());
            return Ok(ExitCode::SUCCESS);
        }
    };
    let records = run_suite(&config, &suites, cli.timings);
    for r in &records {
        let status = if r.pass { "PASS" } else { "FAIL" };
        let value = r.value.map_or_else(|| r.error.clone().unwrap_or_default(), |v| format!("{v:.3e}"));
        eprintln!("{status} {} value={value} tol={:.1e}", r.name, r.tolerance);
    }
    let code = exit_code(&records);
    let json = Report::new(&config, &suites, records).to_json().map_err(|e| e.to_string())?;
    match &cli.out {
        Some(p) => fs::write(p, json + "\n").map_err(|e| format!("{}: {e}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(ExitCode::from(code as u8))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
