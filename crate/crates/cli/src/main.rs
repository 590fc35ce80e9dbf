use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use beamsurfer::baselines::oracle_best_pair;
use beamsurfer::channel::{rx_heatmap, write_heatmap_csv};
use beamsurfer::config::{ConfigError, Scenario, ScenarioConfig};
use beamsurfer::engine::run;
use clap::{Parser, Subcommand};

mod summary;
mod sweep;

use summary::{headline, read_run, summarize, write_run, RunMeta, TRACE_JSONL};
use sweep::Axis;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 3;
const EXIT_AUDIT: u8 = 4;
const EXIT_ACQUISITION: u8 = 5;
const EXIT_SWEEP_FAILURES: u8 = 6;

#[derive(Parser)]
#[command(name = "beamsurfer", version, about = "Beam management simulator for 60 GHz links")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its traces and summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the cross product of axis values over several seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `path=v1,v2` where path is a dotted key in the config, e.g. motion.speed.
        #[arg(long)]
        axis: Vec<Axis>,
        #[arg(long, default_value_t = 1)]
        trials: usize,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// First seed; defaults to the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Writes the batch report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the RSS grid of every receive beam over time.
    Heatmap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Transmit beam held fixed; defaults to the best one at t = 0.
        #[arg(long)]
        tx_beam: Option<usize>,
        #[arg(long, default_value_t = 10.0)]
        step_ms: f64,
    },
    /// Recompute summaries from run directories.
    Report {
        /// A run directory or a directory of run directories.
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(ConfigError),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

type CmdResult = Result<u8, Failure>;

fn load(config: &Path, seed: Option<u64>) -> Result<Scenario, ConfigError> {
    let s = ScenarioConfig::load(config)?;
    match seed {
        Some(seed) => s.with_seed(seed),
        None => Ok(s),
    }
}

fn cmd_run(config: &Path, seed: Option<u64>, out: &Path) -> CmdResult {
    let s = load(config, seed)?;
    let trace = run(&s).context("simulation failed")?;
    let summary = summarize(&trace, s.config.protocol.control_snr_db);
    write_run(out, &RunMeta::new(&s, &trace), &trace, &summary)?;
    println!("config {} seed {}", summary.config_hash, summary.seed);
    println!("{}", headline(&summary));
    if !summary.audit_passed {
        eprintln!("invariant audit failed: {:?}", summary.audit);
        return Ok(EXIT_AUDIT);
    }
    if summary.acquisition_failed {
        eprintln!("link acquisition failed");
        return Ok(EXIT_ACQUISITION);
    }
    Ok(0)
}

fn cmd_sweep(
    config: &Path,
    axes: &[Axis],
    trials: usize,
    jobs: usize,
    seed: Option<u64>,
    out: Option<&Path>,
) -> CmdResult {
    let text = fs::read_to_string(config).map_err(|source| ConfigError::Io {
        path: config.to_path_buf(),
        source,
    })?;
    let template: serde_json::Value = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
        what: config.display().to_string(),
        source,
    })?;
    let first_seed = seed.unwrap_or_else(|| template.get("seed").and_then(|v| v.as_u64()).unwrap_or(0));
    let base = config.parent().unwrap_or(Path::new("."));
    let reports = sweep::sweep(&template, base, axes, first_seed, trials.max(1), jobs)?;
    print!("{}", sweep::table(&reports));
    for r in &reports {
        for f in &r.failures {
            eprintln!("{}: {f}", r.label());
        }
    }
    if let Some(out) = out {
        serde_json::to_writer_pretty(BufWriter::new(File::create(out).context("cannot create report")?), &reports)
            .context("cannot write report")?;
    }
    Ok(if reports.iter().any(|r| !r.failures.is_empty()) {
        EXIT_SWEEP_FAILURES
    } else {
        0
    })
}

fn cmd_heatmap(config: &Path, out: &Path, tx_beam: Option<usize>, step_ms: f64) -> CmdResult {
    let s = load(config, None)?;
    if !(step_ms > 0.0) {
        return Err(anyhow::anyhow!("step must be positive").into());
    }
    let tx = match tx_beam {
        Some(b) if b < s.link.tx_codebook.len() => b,
        Some(b) => return Err(anyhow::anyhow!("transmit beam {b} is outside the codebook").into()),
        None => oracle_best_pair(&s.link, &s.motion.sample_state(0.0), 0.0).tx_beam,
    };
    let steps = (s.config.duration_ms / step_ms).floor() as usize;
    let times: Vec<f64> = (0..=steps).map(|i| i as f64 * step_ms).collect();
    let grid = rx_heatmap(&s.link, &s.motion, tx, &times);
    let f = File::create(out).with_context(|| format!("cannot create {}", out.display()))?;
    write_heatmap_csv(BufWriter::new(f), &times, &grid).context("cannot write heatmap")?;
    println!("{} receive beams x {} samples, transmit beam {tx}", grid.len(), times.len());
    Ok(0)
}

fn run_dirs(root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if root.join(TRACE_JSONL).exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("cannot read {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(TRACE_JSONL).exists())
        .collect();
    dirs.sort();
    anyhow::ensure!(!dirs.is_empty(), "no traces under {}", root.display());
    Ok(dirs)
}

fn cmd_report(traces: &Path, out: Option<&Path>) -> CmdResult {
    let mut summaries = Vec::new();
    for dir in run_dirs(traces)? {
        let (meta, trace) = read_run(&dir)?;
        let s = summarize(&trace, meta.control_snr_db);
        println!("{} (config {} seed {})", dir.display(), s.config_hash, s.seed);
        println!("{}", headline(&s));
        summaries.push(s);
    }
    if let Some(out) = out {
        let f = File::create(out).with_context(|| format!("cannot create {}", out.display()))?;
        serde_json::to_writer_pretty(BufWriter::new(f), &summaries).context("cannot write report")?;
    }
    Ok(if summaries.iter().all(|s| s.audit_passed) { 0 } else { EXIT_AUDIT })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, seed, out } => cmd_run(config, *seed, out),
        Command::Sweep {
            config,
            axis,
            trials,
            jobs,
            seed,
            out,
        } => cmd_sweep(config, axis, *trials, *jobs, *seed, out.as_deref()),
        Command::Heatmap {
            config,
            out,
            tx_beam,
            step_ms,
        } => cmd_heatmap(config, out, *tx_beam, *step_ms),
        Command::Report { traces, out } => cmd_report(traces, out.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
