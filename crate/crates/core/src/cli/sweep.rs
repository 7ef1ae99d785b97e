use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{create_dir, parse_config, read_text, write, write_run, CliError, Result};
use crate::metrics::METRICS_HEADER;
use crate::models::Algorithm;
use crate::trainers::{train, RunLog, TrainConfig, TrainError};

/// A grid of configs: `base` with every combination of axis values, each
/// run once per seed.
///
/// ```toml
/// seeds = [0, 1, 2]
///
/// [[axis]]
/// key = "regularizers.dp_noise_std"
/// values = [0.0, 0.1]
///
/// [base.experiment]
/// algorithm = "vanilla"
/// [base.data]
/// kind = "ring"
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: toml::Table,
    #[serde(default, rename = "axis")]
    pub axes: Vec<Axis>,
    /// Defaults to the base config's seed.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    /// Dotted path into the config, e.g. `model.pack_k`.
    pub key: String,
    pub values: Vec<toml::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub index: usize,
    pub assignments: Vec<(String, toml::Value)>,
    pub seed: u64,
    pub config: TrainConfig,
}

pub fn parse_sweep(text: &str) -> Result<SweepSpec> {
    toml::from_str(text).map_err(|e| CliError::Parse(e.message().to_string()))
}

fn set_dotted(
    table: &mut toml::Table,
    key: &str,
    value: toml::Value,
) -> std::result::Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().ok_or("empty key")?;
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| format!("`{p}` in `{key}` is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Cartesian product of the axes (first axis varies slowest), then seeds.
pub fn expand_sweep(spec: &SweepSpec) -> Result<Vec<SweepCell>> {
    let mut combos: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
    for axis in &spec.axes {
        if axis.values.is_empty() {
            return Err(CliError::Parse(format!(
                "sweep axis `{}` has no values",
                axis.key
            )));
        }
        combos = combos
            .into_iter()
            .flat_map(|c| {
                axis.values.iter().map(move |v| {
                    let mut next = c.clone();
                    next.push((axis.key.clone(), v.clone()));
                    next
                })
            })
            .collect();
    }
    let base_seed = spec
        .base
        .get("experiment")
        .and_then(|e| e.get("seed"))
        .and_then(|s| s.as_integer())
        .unwrap_or(0) as u64;
    let seeds = spec.seeds.clone().unwrap_or_else(|| vec![base_seed]);

    let mut cells = Vec::with_capacity(combos.len() * seeds.len());
    for combo in combos {
        for &seed in &seeds {
            let index = cells.len();
            let mut table = spec.base.clone();
            let context = |msg: String| CliError::Parse(format!("sweep cell {index}: {msg}"));
            for (k, v) in &combo {
                set_dotted(&mut table, k, v.clone()).map_err(context)?;
            }
            set_dotted(
                &mut table,
                "experiment.seed",
                toml::Value::Integer(seed as i64),
            )
            .map_err(context)?;
            let text = toml::to_string(&table).map_err(|e| context(e.to_string()))?;
            let config = parse_config(&text).map_err(|e| context(e.to_string()))?;
            cells.push(SweepCell {
                index,
                assignments: combo.clone(),
                seed,
                config,
            });
        }
    }
    Ok(cells)
}

/// Run `jobs` on a pool of `parallel` workers, preserving input order.
fn run_pool<T: Sync, R: Send>(
    parallel: usize,
    jobs: &[T],
    f: impl Fn(&T) -> R + Sync + Send,
) -> Result<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| CliError::Pool(e.to_string()))?;
    Ok(pool.install(|| jobs.par_iter().map(f).collect()))
}

fn csv_field(text: String) -> String {
    if text.contains([',', '"', '\n']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text
    }
}

fn value_text(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn status_text(log: &RunLog) -> &'static str {
    if log.diverged() {
        "diverged"
    } else {
        "completed"
    }
}

/// Run every cell, write `cell_NNNN/` run directories and `index.csv`.
/// Diverged runs are recorded, not treated as failures.
pub fn cmd_sweep(
    sweep_path: &Path,
    out_dir: &Path,
    parallel: usize,
    svg: bool,
) -> Result<Vec<(SweepCell, RunLog)>> {
    let spec = parse_sweep(&read_text(sweep_path)?)?;
    let cells = expand_sweep(&spec)?;
    let logs = run_pool(parallel, &cells, |c| train(&c.config))?;
    create_dir(out_dir)?;

    let mut index = String::from("cell");
    for axis in &spec.axes {
        index.push(',');
        index.push_str(&csv_field(axis.key.clone()));
    }
    index.push_str(",seed,status,");
    index.push_str(METRICS_HEADER);
    index.push('\n');

    let mut out = Vec::with_capacity(cells.len());
    for (cell, log) in cells.into_iter().zip(logs) {
        let log = log?;
        write_run(&out_dir.join(format!("cell_{:04}", cell.index)), &log, svg)?;
        index.push_str(&cell.index.to_string());
        for (_, v) in &cell.assignments {
            index.push(',');
            index.push_str(&csv_field(value_text(v)));
        }
        index.push_str(&format!(",{},{},", cell.seed, status_text(&log)));
        match log.final_record() {
            Some(r) => index.push_str(&r.csv_row()),
            None => index.push_str(&vec![""; METRICS_HEADER.split(',').count()].join(",")),
        }
        index.push('\n');
        out.push((cell, log));
    }
    write(&out_dir.join("index.csv"), &index)?;
    Ok(out)
}

pub const COMPARE_HEADER: &str = "model,algorithm,runs,js,w1,modes_covered,wall_time_secs,diverged";

/// One row of the adversarial-versus-diffusion comparison. Metric columns
/// are means over the runs that did not diverge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub model: String,
    pub algorithm: String,
    pub runs: usize,
    pub js: f64,
    pub w1: f64,
    pub modes_covered: f64,
    pub wall_time_secs: f64,
    pub diverged: usize,
}

impl CompareRow {
    fn from_logs(model: &str, algorithm: Algorithm, logs: &[RunLog]) -> CompareRow {
        let ok: Vec<_> = logs
            .iter()
            .filter(|l| !l.diverged())
            .filter_map(|l| l.final_record())
            .collect();
        let mean = |f: &dyn Fn(&crate::metrics::MetricsRecord) -> f64| {
            if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
            }
        };
        CompareRow {
            model: model.to_string(),
            algorithm: algorithm.name().to_string(),
            runs: logs.len(),
            js: mean(&|r| r.js),
            w1: mean(&|r| r.w1),
            modes_covered: mean(&|r| r.modes_covered as f64),
            wall_time_secs: logs.iter().map(|l| l.wall_time_secs).sum::<f64>()
                / logs.len().max(1) as f64,
            diverged: logs.len() - ok.len(),
        }
    }

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.model,
            self.algorithm,
            self.runs,
            self.js,
            self.w1,
            self.modes_covered,
            self.wall_time_secs,
            self.diverged
        )
    }
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = format!("{COMPARE_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Train the adversarial config and a diffusion run on the same data and
/// seeds, then write per-run directories and `compare.csv`.
pub fn cmd_compare(
    gan: &TrainConfig,
    seeds: &[u64],
    out_dir: &Path,
    parallel: usize,
) -> Result<Vec<CompareRow>> {
    if gan.algorithm() == Algorithm::Ddpm {
        return Err(CliError::Train(TrainError::Config {
            key: "experiment.algorithm".into(),
            msg:
                "compare needs an adversarial algorithm; the diffusion side is added automatically"
                    .into(),
        }));
    }
    let mut diffusion = gan.clone();
    diffusion.experiment.algorithm = Algorithm::Ddpm;
    diffusion.experiment.n_critic = None;
    diffusion.experiment.unroll_k = 0;
    diffusion.model.pack_k = 1;
    diffusion.validate()?;

    let mut jobs = Vec::new();
    for (name, base) in [("gan", gan), ("diffusion", &diffusion)] {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.experiment.seed = seed;
            jobs.push((name, seed, cfg));
        }
    }
    let logs = run_pool(parallel, &jobs, |(_, _, cfg)| train(cfg))?;
    create_dir(out_dir)?;
    let mut by_model: Vec<(&str, Algorithm, Vec<RunLog>)> = vec![
        ("gan", gan.algorithm(), Vec::new()),
        ("diffusion", Algorithm::Ddpm, Vec::new()),
    ];
    for ((name, seed, _), log) in jobs.iter().zip(logs) {
        let log = log?;
        write_run(
            &out_dir.join(name).join(format!("seed_{seed}")),
            &log,
            false,
        )?;
        let slot = by_model
            .iter_mut()
            .find(|m| m.0 == *name)
            .expect("known model");
        slot.2.push(log);
    }
    let rows: Vec<CompareRow> = by_model
        .iter()
        .map(|(name, alg, logs)| CompareRow::from_logs(name, *alg, logs))
        .collect();
    write(&out_dir.join("compare.csv"), &compare_csv(&rows))?;
    Ok(rows)
}
