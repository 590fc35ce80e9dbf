//! Parameter sweeps: the cross product of axis values, each cell run over
//! several seeds.

use std::path::Path;

use anyhow::{bail, Context, Result};
use beamsurfer::config::ScenarioConfig;
use beamsurfer::engine::run;
use beamsurfer::metrics::{compute_bct, mean_std, median};
use beamsurfer::scenarios::{aligned_pair_series, SERIES_STEP_MS};
use beamsurfer::trace::Policy;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::summary::{summarize, RunSummary};

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    /// Dotted path into the config document, e.g. `motion.speed`.
    pub path: String,
    pub values: Vec<Value>,
}

impl std::str::FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (path, values) = s.split_once('=').context("axis must look like name=v1,v2")?;
        if path.is_empty() {
            bail!("axis name is empty");
        }
        let values: Vec<Value> = values
            .split(',')
            .filter(|v| !v.is_empty())
            .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
            .collect();
        if values.is_empty() {
            bail!("axis '{path}' has no values");
        }
        Ok(Axis {
            path: path.to_string(),
            values,
        })
    }
}

/// Sets `path` in `doc`, creating intermediate objects as needed.
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let mut keys = path.split('.').peekable();
    while let Some(key) = keys.next() {
        let obj = cur
            .as_object_mut()
            .with_context(|| format!("cannot set '{path}': '{key}' is not inside an object"))?;
        if keys.peek().is_none() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(key).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one key")
}

/// Every combination of axis values, in row-major order.
pub fn cells(axes: &[Axis]) -> Vec<Vec<(String, Value)>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.into_iter()
            .flat_map(|cell| {
                axis.values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((axis.path.clone(), v.clone()));
                    c
                })
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyAggregate {
    pub policy: Policy,
    pub runs: usize,
    pub within_3db_mean: f64,
    pub deviation_mean: f64,
    /// Mean over runs of the per-run deviation spread.
    pub deviation_std: f64,
    pub median_throughput_bps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub axes: Vec<(String, Value)>,
    /// Coherence time of the pair aligned at t = 0, first seed; None if unbounded.
    pub coherence_ms: Option<f64>,
    pub aggregates: Vec<PolicyAggregate>,
    pub runs: Vec<RunSummary>,
    /// `seed: message` for every run that did not complete.
    pub failures: Vec<String>,
}

impl CellReport {
    pub fn label(&self) -> String {
        if self.axes.is_empty() {
            return "(base)".into();
        }
        self.axes
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn aggregate(runs: &[RunSummary]) -> Vec<PolicyAggregate> {
    let mut policies: Vec<Policy> = runs.iter().flat_map(|r| r.policies.iter().map(|p| p.policy)).collect();
    policies.sort();
    policies.dedup();
    policies
        .into_iter()
        .map(|p| {
            let per: Vec<_> = runs.iter().filter_map(|r| r.policy(p)).collect();
            let devs: Vec<_> = per.iter().filter_map(|s| s.deviation).collect();
            let mut medians: Vec<f64> = per.iter().filter_map(|s| s.median_throughput_bps).collect();
            PolicyAggregate {
                policy: p,
                runs: per.len(),
                within_3db_mean: mean_std(&devs.iter().map(|d| d.fraction_within_3db).collect::<Vec<_>>()).0,
                deviation_mean: mean_std(&devs.iter().map(|d| d.mean).collect::<Vec<_>>()).0,
                deviation_std: mean_std(&devs.iter().map(|d| d.std).collect::<Vec<_>>()).0,
                median_throughput_bps: median(&mut medians),
            }
        })
        .collect()
}

enum Outcome {
    Done(Box<RunSummary>, Option<f64>),
    Failed(String),
}

fn run_one(template: &Value, base: &Path, cell: &[(String, Value)], seed: u64, want_bct: bool) -> Outcome {
    let attempt = || -> Result<(RunSummary, Option<f64>)> {
        let mut doc = template.clone();
        for (path, v) in cell {
            set_path(&mut doc, path, v.clone())?;
        }
        set_path(&mut doc, "seed", Value::from(seed))?;
        let config: ScenarioConfig = serde_json::from_value(doc).context("invalid config")?;
        let s = config.resolve(base)?;
        let trace = run(&s)?;
        let bct = if want_bct {
            let series = aligned_pair_series(&s.link, &s.motion, s.config.duration_ms, SERIES_STEP_MS);
            compute_bct(&series)?.ms()
        } else {
            None
        };
        Ok((summarize(&trace, s.config.protocol.control_snr_db), bct))
    };
    match attempt() {
        Ok((summary, bct)) => Outcome::Done(Box::new(summary), bct),
        Err(e) => Outcome::Failed(format!("seed {seed}: {e:#}")),
    }
}

/// Runs every cell for `trials` consecutive seeds starting at `first_seed`.
/// Failed runs are recorded per cell; the rest of the batch still runs.
pub fn sweep(
    template: &Value,
    base: &Path,
    axes: &[Axis],
    first_seed: u64,
    trials: usize,
    jobs: usize,
) -> Result<Vec<CellReport>> {
    let grid = cells(axes);
    let tasks: Vec<(usize, u64)> = (0..grid.len())
        .flat_map(|c| (0..trials as u64).map(move |k| (c, first_seed + k)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let outcomes: Vec<Outcome> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(c, seed)| run_one(template, base, &grid[c], seed, seed == first_seed))
            .collect()
    });

    let mut reports: Vec<CellReport> = grid
        .into_iter()
        .map(|axes| CellReport {
            axes,
            coherence_ms: None,
            aggregates: Vec::new(),
            runs: Vec::new(),
            failures: Vec::new(),
        })
        .collect();
    for ((c, _), outcome) in tasks.into_iter().zip(outcomes) {
        match outcome {
            Outcome::Done(summary, bct) => {
                if bct.is_some() {
                    reports[c].coherence_ms = bct;
                }
                reports[c].runs.push(*summary);
            }
            Outcome::Failed(msg) => reports[c].failures.push(msg),
        }
    }
    for r in &mut reports {
        r.aggregates = aggregate(&r.runs);
    }
    Ok(reports)
}

/// Plain-text table: one row per cell and policy.
pub fn table(reports: &[CellReport]) -> String {
    let mut out = String::from("cell\tpolicy\truns\twithin3dB\tdev_mean\tdev_std\tmedian_gbps\tbct_ms\tfailures\n");
    for r in reports {
        if r.aggregates.is_empty() {
            out.push_str(&format!("{}\t-\t0\t-\t-\t-\t-\t-\t{}\n", r.label(), r.failures.len()));
        }
        for a in &r.aggregates {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.3}\t{:.2}\t{:.2}\t{}\t{}\t{}\n",
                r.label(),
                a.policy,
                a.runs,
                a.within_3db_mean,
                a.deviation_mean,
                a.deviation_std,
                a.median_throughput_bps
                    .map(|v| format!("{:.2}", v / 1e9))
                    .unwrap_or_else(|| "-".into()),
                r.coherence_ms.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into()),
                r.failures.len()
            ));
        }
    }
    out
}
