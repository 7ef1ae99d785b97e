//! Command implementations behind the `ganlab` binary.
//!
//! Configs are TOML documents with a `version = 1` key and the sections of
//! [`TrainConfig`]. Every command writes plain CSV/JSON artifacts into an
//! output directory.

mod svg;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use svg::histogram_svg;
pub use sweep::{
    cmd_compare, cmd_sweep, compare_csv, expand_sweep, parse_sweep, Axis, CompareRow, SweepCell,
    SweepSpec, COMPARE_HEADER,
};

use crate::gradcheck::{self, CheckResult, GradCheckError};
use crate::matrix::Matrix;
use crate::metrics::MetricsRecord;
use crate::toydata::Rng;
use crate::trainers::{
    score_samples, train, EvalTarget, RunLog, SampleScores, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: malformed run log: {msg}")]
    RunLog { path: PathBuf, msg: String },
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
    #[error("worker pool: {0}")]
    Pool(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parse and validate a TOML config, applying defaults.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig =
        toml::from_str(text).map_err(|e| CliError::Parse(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// TOML text that [`parse_config`] maps back to the same config.
pub fn print_config(cfg: &TrainConfig) -> String {
    toml::to_string(cfg).expect("configs serialize to TOML")
}

/// Artifacts of one training run inside `dir`.
pub fn write_run(dir: &Path, log: &RunLog, svg: bool) -> Result<()> {
    create_dir(dir)?;
    write(&dir.join("metrics.csv"), &log.metrics_csv())?;
    write(&dir.join("samples.csv"), &log.samples.to_csv())?;
    write(&dir.join("config.toml"), &print_config(&log.config))?;
    let json = serde_json::to_string_pretty(log).expect("run logs serialize");
    write(&dir.join("runlog.json"), &json)?;
    if svg {
        if let Some(text) = run_histogram(log) {
            write(&dir.join("histogram.svg"), &text)?;
        }
    }
    Ok(())
}

/// Reference draw for rescoring a finished run, when the data is a sampled
/// distribution.
fn reference_target(cfg: &TrainConfig) -> Option<std::result::Result<EvalTarget, TrainError>> {
    let dist = cfg.data.distribution()?;
    let n = cfg.experiment.eval_samples.max(1);
    let mut rng = Rng::new(cfg.experiment.seed).substream(5);
    Some(EvalTarget::for_distribution(&dist, n, &mut rng).map_err(TrainError::from))
}

fn run_histogram(log: &RunLog) -> Option<String> {
    let target = reference_target(&log.config)?.ok()?;
    Some(histogram_svg(
        &target,
        &log.samples,
        log.config.algorithm().name(),
    ))
}

/// Train from a config file and write artifacts to `out_dir`.
pub fn cmd_train(
    config_path: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    svg: bool,
) -> Result<RunLog> {
    let mut cfg = parse_config(&read_text(config_path)?)?;
    if let Some(s) = seed {
        cfg.experiment.seed = s;
    }
    let log = train(&cfg)?;
    write_run(out_dir, &log, svg)?;
    Ok(log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub algorithm: String,
    pub diverged: bool,
    pub final_record: Option<MetricsRecord>,
    /// The stored samples scored against a fresh reference draw.
    pub rescored: Option<SampleScores>,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut out = format!(
            "algorithm: {}\ndiverged: {}\n",
            self.algorithm, self.diverged
        );
        if let Some(r) = &self.final_record {
            out.push_str(&format!(
                "final step {}: kl={} js={} w1={} modes={} hq_frac={} d_acc={}\n",
                r.step, r.kl, r.js, r.w1, r.modes_covered, r.high_quality_fraction, r.d_accuracy
            ));
            for (k, v) in &r.extras {
                out.push_str(&format!("  {k} = {v}\n"));
            }
        }
        if let Some(s) = &self.rescored {
            out.push_str(&format!(
                "rescored samples: kl={} js={} w1={} modes={} hq_frac={}\n",
                s.kl, s.js, s.w1, s.modes_covered, s.high_quality_fraction
            ));
        }
        out
    }
}

pub fn load_runlog(path: &Path) -> Result<RunLog> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::RunLog {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Summarize a stored run (`runlog.json`, or a run directory containing one).
pub fn cmd_eval(runlog_path: &Path) -> Result<EvalReport> {
    let path = if runlog_path.is_dir() {
        runlog_path.join("runlog.json")
    } else {
        runlog_path.to_path_buf()
    };
    let log = load_runlog(&path)?;
    let rescored = match reference_target(&log.config) {
        Some(target) if log.samples.rows > 0 => {
            Some(score_samples(&target?, &log.samples).map_err(TrainError::from)?)
        }
        _ => None,
    };
    Ok(EvalReport {
        algorithm: log.config.algorithm().name().to_string(),
        diverged: log.diverged(),
        final_record: log.final_record().cloned(),
        rescored,
    })
}

/// The finite-difference suite; callers decide how to report failures.
pub fn cmd_gradcheck(cases: usize, seed: u64) -> Result<Vec<CheckResult>> {
    Ok(gradcheck::run_suite(cases, seed)?)
}

pub fn gradcheck_report(results: &[CheckResult]) -> String {
    let mut out = String::new();
    for r in results {
        let status = if r.passed() { "ok" } else { "FAILED" };
        out.push_str(&format!(
            "{:<24} {:>4} cases  worst {:.3e}  {status}\n",
            r.name, r.cases, r.worst_ratio
        ));
        if let Some(f) = &r.first_failure {
            out.push_str(&format!("    {f}\n"));
        }
    }
    out
}

/// Rows of a samples file written by [`write_run`].
pub fn read_samples(path: &Path) -> Result<Matrix> {
    Matrix::from_csv(&read_text(path)?).map_err(|msg| CliError::RunLog {
        path: path.to_path_buf(),
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Algorithm;
    use crate::trainers::DataSpec;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config(
            "[experiment]\nalgorithm = \"vanilla\"\n[data]\nkind = \"gaussian1d\"\nmean = 4.0\nstd = 1.25\n",
        )
        .unwrap();
        assert_eq!(cfg.version, 1);
        assert_eq!(cfg.model.z_dim, 100);
        assert_eq!(cfg.lr_g(), 0.0002);
        assert_eq!((cfg.optim.beta1, cfg.optim.beta2), (0.5, 0.999));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config(
            "foo = 1\n[experiment]\nalgorithm = \"vanilla\"\n[data]\nkind = \"ring\"\n",
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("foo"), "{err}");
        let err = parse_config("[experiment]\nalgorithm = \"gan9\"\n[data]\nkind = \"ring\"\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("gan9") && err.contains("wgan_gp"), "{err}");
    }

    #[test]
    fn pack_divisibility_is_checked() {
        let err = parse_config(
            "[experiment]\nalgorithm = \"vanilla\"\nbatch = 33\n[model]\npack_k = 2\n[data]\nkind = \"ring\"\n",
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("batch"), "{err}");
    }

    #[test]
    fn print_parse_round_trip() {
        let mut cfg = TrainConfig::new(
            Algorithm::WganGp,
            DataSpec::Ring {
                modes: 8,
                radius: 2.0,
                std: 0.05,
            },
        );
        cfg.regularizers.dp_noise_std = 0.1;
        cfg.optim.lr_d = Some(1e-4 / 3.0);
        assert_eq!(parse_config(&print_config(&cfg)).unwrap(), cfg);
        cfg.resolve();
        assert_eq!(parse_config(&print_config(&cfg)).unwrap(), cfg);
        let cyc = TrainConfig::new(Algorithm::CycleganToy, DataSpec::TwoDomain);
        assert_eq!(parse_config(&print_config(&cyc)).unwrap(), cyc);
    }
}
