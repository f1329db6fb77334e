//! Command-line verbs. Each one parses flags, calls into the library and maps
//! the result onto the exit-code contract: 0 pass, 1 assertion failure or
//! divergence, 2 usage or schema error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::bitstats::{self, Tolerances};
use crate::clustering::{self, GameParams};
use crate::commitments;
use crate::contract::{self, ReplayStatus};
use crate::experiments::{self, ExperimentError, Probe, ProbeConfig, Scenario};
use crate::pipeline::ModelConfig;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Seed used when neither the flag nor the scenario file gives one.
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Parser)]
#[command(name = "vinfer", version, about = "Verifiable pipelined inference simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    OffChain,
    OnChain,
}

impl Preset {
    pub fn tolerances(self) -> Tolerances {
        match self {
            Preset::OffChain => Tolerances::OFF_CHAIN,
            Preset::OnChain => Tolerances::ON_CHAIN,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario file and write its report; exit 0 iff all assertions pass.
    Montecarlo {
        scenario: PathBuf,
        /// Overrides the scenario's seed (the file's seed, else 0).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compare two trace files and print the statistics as JSON.
    Compare {
        reference: PathBuf,
        candidate: PathBuf,
        #[arg(long, value_enum, default_value = "off-chain")]
        preset: Preset,
    },
    /// Re-execute a contract log and check every recorded state root.
    Replay { log: PathBuf },
    /// Print the committee-game acceptance bounds.
    Bounds {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        q: usize,
        #[arg(long)]
        eps1: f64,
        #[arg(long)]
        eps2: f64,
        #[arg(long)]
        r: f64,
        #[arg(long)]
        json: bool,
    },
    /// Check Monte Carlo acceptance against the bounds over a parameter grid.
    BoundsGrid {
        #[arg(long, default_value_t = 2000)]
        trials: u64,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run several protocol scenarios and compare each deviation's payoff
    /// with the honest one.
    Equilibrium {
        scenarios: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Pipeline-level detection rates for the built-in attacks.
    Detect {
        #[arg(long, default_value_t = 10_000)]
        trials: u64,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Verify-prefill against full-prefill op counts for several segment counts.
    Costs {
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        segments: Vec<u32>,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Honest-pair pass rate and the largest noise scale meeting the target.
    Calibrate {
        #[arg(long, default_value_t = 1000)]
        trials: u64,
        #[arg(long, default_value_t = 0.999)]
        target: f64,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Write honest and quantized trace files for `compare`.
    Fixtures {
        #[arg(long, default_value = "fixtures")]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Run one protocol trial with the contract log enabled.
    Task {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        trial: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out/task")]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the verb.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli.command),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_USAGE
            } else {
                EXIT_PASS
            }
        }
    }
}

fn usage(msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    EXIT_USAGE
}

fn json_line<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn load_scenario(path: &Path, seed: Option<u64>, trials: Option<u64>) -> Result<Scenario, ExperimentError> {
    let mut s = Scenario::load(path)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    if let Some(t) = trials {
        s.trials = t;
    }
    s.validate()?;
    Ok(s)
}

pub fn execute(command: Command) -> i32 {
    match command {
        Command::Montecarlo { scenario, seed, trials, out } => cmd_montecarlo(&scenario, seed, trials, &out),
        Command::Compare { reference, candidate, preset } => cmd_compare(&reference, &candidate, preset),
        Command::Replay { log } => cmd_replay(&log),
        Command::Bounds { n, q, eps1, eps2, r, json } => cmd_bounds(
            GameParams {
                n,
                q,
                eps1,
                eps2,
                r,
                ..GameParams::baseline()
            },
            json,
        ),
        Command::BoundsGrid { trials, seed, out } => {
            let rows = experiments::bounds_check(&experiments::default_bounds_grid(), trials, seed);
            let verdict = experiments::grid_verdict(&rows);
            if let Err(e) = fs::create_dir_all(&out).and_then(|_| fs::write(out.join("bounds_grid.csv"), experiments::bounds_csv(&rows))) {
                return usage(e);
            }
            println!("{}", json_line(&verdict));
            if verdict.pass {
                EXIT_PASS
            } else {
                EXIT_FAIL
            }
        }
        Command::Equilibrium { scenarios, seed, trials, out } => cmd_equilibrium(&scenarios, seed, trials, &out),
        Command::Detect { trials, seed } => {
            let cfg = ProbeConfig::default();
            let forged_cfg = ProbeConfig { max_tokens: 32, ..cfg };
            let probes = [
                (Probe::Quantize { bits: 8 }, cfg),
                (Probe::EarlyStop { at: 4 }, cfg),
                (Probe::ForgedOutput { small_dim: 8, seed: 99 }, forged_cfg),
                (Probe::Lazy, cfg),
            ];
            for (probe, c) in probes {
                match experiments::attack_detection(probe, &c, trials, seed) {
                    Ok(r) => println!("{}", serde_json::to_string(&r).expect("serializable")),
                    Err(e) => return usage(e),
                }
            }
            EXIT_PASS
        }
        Command::Costs { segments, seed } => match experiments::cost_ratios(&segments, 8, 12, seed) {
            Ok(rows) => {
                print!("{}", experiments::cost_csv(&rows));
                EXIT_PASS
            }
            Err(e) => usage(e),
        },
        Command::Calibrate { trials, target, seed } => match experiments::calibrate_noise(ModelConfig::default(), trials, seed, target) {
            Ok(c) => {
                println!("{}", json_line(&c));
                if c.default_pass_rate >= target {
                    EXIT_PASS
                } else {
                    EXIT_FAIL
                }
            }
            Err(e) => usage(e),
        },
        Command::Fixtures { out, seed } => match experiments::write_compare_fixtures(&out, seed) {
            Ok(paths) => {
                for p in paths {
                    println!("{}", p.display());
                }
                EXIT_PASS
            }
            Err(e) => usage(e),
        },
        Command::Task { scenario, trial, seed, out } => {
            let s = match load_scenario(&scenario, seed, None) {
                Ok(s) => s,
                Err(e) => return usage(e),
            };
            match experiments::write_logged_trial(&s, trial, &out) {
                Ok(rec) => {
                    println!("{}", json_line(&rec));
                    EXIT_PASS
                }
                Err(e) => usage(e),
            }
        }
    }
}

pub fn cmd_montecarlo(path: &Path, seed: Option<u64>, trials: Option<u64>, out: &Path) -> i32 {
    let scenario = match load_scenario(path, seed, trials) {
        Ok(s) => s,
        Err(e) => return usage(e),
    };
    let report = match experiments::run_scenario(&scenario) {
        Ok(r) => r,
        Err(e) => return usage(e),
    };
    if let Err(e) = report.write(out) {
        return usage(e);
    }
    print!("{}", report.assertion_table());
    for e in &report.errors {
        eprintln!("warning: {e}");
    }
    if report.passed() {
        EXIT_PASS
    } else {
        EXIT_FAIL
    }
}

pub fn cmd_compare(reference: &Path, candidate: &Path, preset: Preset) -> i32 {
    let load = |p: &Path| commitments::read_trace_file(p).map_err(|e| format!("{}: {e}", p.display()));
    let (a, b) = match (load(reference), load(candidate)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return usage(e),
    };
    let tol = preset.tolerances();
    let stats = match bitstats::compare_traces(&a, &b, &tol) {
        Ok(s) => s,
        Err(e) => return usage(e),
    };
    let accepted = bitstats::accept(&stats, &tol);
    println!(
        "{}",
        json_line(&serde_json::json!({
            "preset": match preset { Preset::OffChain => "off-chain", Preset::OnChain => "on-chain" },
            "stats": stats,
            "accept": accepted,
        }))
    );
    if accepted {
        EXIT_PASS
    } else {
        EXIT_FAIL
    }
}

pub fn cmd_replay(path: &Path) -> i32 {
    let log = match fs::read_to_string(path) {
        Ok(l) => l,
        Err(e) => return usage(format!("{}: {e}", path.display())),
    };
    match contract::replay(&log) {
        Ok(ReplayStatus::Verified { entries }) => {
            println!("verified {entries} entries");
            EXIT_PASS
        }
        Ok(ReplayStatus::Truncated { entries }) => {
            eprintln!("warning: log truncated after {entries} entries");
            println!("verified {entries} entries");
            EXIT_PASS
        }
        Ok(ReplayStatus::Diverged { index, reason }) => {
            println!("diverged at entry {index}: {reason}");
            EXIT_FAIL
        }
        Err(e) => usage(e),
    }
}

pub fn cmd_bounds(params: GameParams, json: bool) -> i32 {
    if let Err(e) = params.validate() {
        return usage(e);
    }
    let honest = clustering::honest_accept_lower_bound(&params);
    let d = clustering::dishonest_accept_upper_bound(&params);
    if json {
        println!("{}", json_line(&serde_json::json!({ "params": params, "honest_lower_bound": honest, "dishonest": d })));
    } else {
        println!("n={} q={} eps1={} eps2={} r={}", params.n, params.q, params.eps1, params.eps2, params.r);
        println!("honest_lower_bound   {honest:.6}");
        println!("p_d1                 {:.6}", d.p_d1);
        println!("p_d2                 {:.6}", d.p_d2);
        println!("p_d3                 {:.6}", d.p_d3);
        println!("dishonest_total      {:.6}", d.total);
        println!("dishonest_union      {:.6}", d.naive_total);
    }
    EXIT_PASS
}

pub fn cmd_equilibrium(paths: &[PathBuf], seed: Option<u64>, trials: Option<u64>, out: &Path) -> i32 {
    let mut reports = Vec::new();
    for p in paths {
        let s = match load_scenario(p, seed, trials) {
            Ok(s) => s,
            Err(e) => return usage(e),
        };
        match experiments::run_scenario(&s) {
            Ok(r) => reports.push(r),
            Err(e) => return usage(e),
        }
    }
    let rows = match experiments::equilibrium_check(&reports) {
        Ok(rows) => rows,
        Err(e) => return usage(e),
    };
    let written = fs::create_dir_all(out)
        .and_then(|_| fs::write(out.join("equilibrium.csv"), experiments::equilibrium_csv(&rows)))
        .and_then(|_| fs::write(out.join("payoffs.csv"), experiments::payoffs_csv(&experiments::payoff_table(&reports))));
    if let Err(e) = written {
        return usage(e);
    }
    print!("{}", experiments::equilibrium_csv(&rows));
    if rows.iter().all(|r| r.holds) {
        EXIT_PASS
    } else {
        EXIT_FAIL
    }
}
