//! Experiment plumbing: versioned TOML run configs, repeated learner runs
//! with per-run log directories, the summary table and metric series.

use crate::generators::{generate_instance, GenerateError, InstanceSpec};
use crate::geometry::{compute_constants, ConstantSet, ConstantsError, Mode, PracticalOverrides};
use crate::learner::{run_skippy_eleanor, LearnerConfig, LearnerError, LogRecord, Opt1Mode};
use crate::generators::Instance;
use crate::geometry::Preconditioning;
use crate::mdp::MemorylessPolicy;
use crate::oracles::{
    certificate_radius, check_range_bound, conversion_value_gap, linearity_certificate, skip_convert, stage_designs,
    LinearityCertificate, OracleError, RangeBoundReport,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CONFIG_VERSION: u32 = 1;
pub const SUMMARY_HEADER: [&str; 7] = ["seed", "instance", "v_star", "v_pi", "episodes", "q_updates", "terminated_by"];
pub const SERIES_HEADER: [&str; 7] = ["run", "m", "m_prime", "sigma_sum", "x", "c_value", "outcome"];
pub const SUBOPTIMALITY_HEADER: [&str; 5] = ["run", "seed", "v_star", "v_pi", "suboptimality"];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("malformed log {path}: {message}")]
    Log { path: String, message: String },
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Constants(#[from] ConstantsError),
    #[error("oracle: {0}")]
    Oracle(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerSection {
    pub epsilon: f64,
    pub zeta: f64,
    pub mode: Mode,
    pub opt1: Opt1Mode,
    pub restarts: usize,
    pub rounds: usize,
    pub episode_cap: u64,
    pub timing: bool,
    pub practical: PracticalOverrides,
}

impl Default for LearnerSection {
    fn default() -> Self {
        let l = LearnerConfig::default();
        Self {
            epsilon: l.epsilon,
            zeta: l.zeta,
            mode: Mode::Practical,
            opt1: l.opt1,
            restarts: l.restarts,
            rounds: l.rounds,
            episode_cap: l.episode_cap,
            timing: l.timing,
            practical: PracticalOverrides::default(),
        }
    }
}

impl LearnerSection {
    pub fn learner_config(&self) -> LearnerConfig {
        LearnerConfig {
            epsilon: self.epsilon,
            zeta: self.zeta,
            opt1: self.opt1,
            restarts: self.restarts,
            rounds: self.rounds,
            episode_cap: self.episode_cap,
            timing: self.timing,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub repeats: usize,
    pub out: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, repeats: 1, out: PathBuf::from("runs") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub instance: InstanceSpec,
    #[serde(default)]
    pub learner: LearnerSection,
    #[serde(default)]
    pub run: RunSection,
}

impl RunConfig {
    pub fn new(instance: InstanceSpec) -> Self {
        Self { version: CONFIG_VERSION, instance, learner: LearnerSection::default(), run: RunSection::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn check(&self) -> Result<(), HarnessError> {
        if self.version != CONFIG_VERSION {
            return Err(HarnessError::Config(format!("unsupported version {} (expected {CONFIG_VERSION})", self.version)));
        }
        if self.run.repeats == 0 {
            return Err(HarnessError::Config("repeats must be at least 1".into()));
        }
        if let InstanceSpec::File { path } = &self.instance {
            if !path.exists() {
                return Err(HarnessError::Config(format!("instance file {} does not exist", path.display())));
            }
        }
        self.learner.learner_config().check().map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// One summary row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub seed: u64,
    pub instance: String,
    pub v_star: f64,
    pub v_pi: f64,
    pub episodes: u64,
    pub q_updates: usize,
    pub terminated_by: String,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub row: SummaryRow,
    /// Empty when the learner aborted.
    pub log: Vec<LogRecord>,
    pub constants: Option<ConstantSet>,
}

pub fn constants_for(cfg: &RunConfig, d: usize, horizon: usize, l1: f64, l2: f64) -> Result<ConstantSet, ConstantsError> {
    let l = &cfg.learner;
    compute_constants(d, horizon, l.epsilon, l.zeta, l1, l2, l.mode, Some(&l.practical))
}

/// Run every repeat in memory. Repeat r uses learner seed `seed + r`.
pub fn run_repeats(cfg: &RunConfig) -> Result<Vec<RunOutput>, HarnessError> {
    cfg.check()?;
    let inst = generate_instance(&cfg.instance)?;
    let consts = constants_for(cfg, inst.phi.dim, inst.mdp.horizon(), inst.phi.l1, inst.phi.l2)?;
    let learner = cfg.learner.learner_config();
    let name = inst.metadata.name.clone();
    Ok((0..cfg.run.repeats)
        .into_par_iter()
        .map(|r| {
            let seed = cfg.run.seed.wrapping_add(r as u64);
            match run_skippy_eleanor(&inst.mdp, &inst.phi, &learner, &consts, Some(&inst.samples), seed) {
                Ok(run) => {
                    let f = &run.final_record;
                    RunOutput {
                        row: SummaryRow {
                            seed,
                            instance: name.clone(),
                            v_star: f.v_star,
                            v_pi: f.v_pi,
                            episodes: f.episodes,
                            q_updates: f.q_updates,
                            terminated_by: f.terminated_by.as_str().into(),
                        },
                        log: run.log,
                        constants: Some(consts.clone()),
                    }
                }
                Err(e) => failed_row(seed, &name, &e),
            }
        })
        .collect())
}

fn failed_row(seed: u64, name: &str, e: &LearnerError) -> RunOutput {
    RunOutput {
        row: SummaryRow {
            seed,
            instance: name.into(),
            v_star: f64::NAN,
            v_pi: f64::NAN,
            episodes: 0,
            q_updates: 0,
            terminated_by: format!("error: {e}"),
        },
        log: Vec::new(),
        constants: None,
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String, HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?).expect("csv is utf-8"))
}

fn log_text(log: &[LogRecord]) -> String {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r).expect("log records serialize"));
        out.push('\n');
    }
    out
}

/// Generate, run every repeat and write `summary.csv`, `config.toml`,
/// `instance.json` and `run-<r>/log.jsonl` under the output directory.
pub fn run_experiment(cfg: &RunConfig, out: &Path) -> Result<Vec<SummaryRow>, HarnessError> {
    let outputs = run_repeats(cfg)?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let inst = generate_instance(&cfg.instance)?;
    let meta = out.join("instance.json");
    std::fs::write(&meta, serde_json::to_string_pretty(&inst.metadata).expect("metadata serializes")).map_err(io_err(&meta))?;
    let cpath = out.join("config.toml");
    std::fs::write(&cpath, cfg.to_toml()).map_err(io_err(&cpath))?;
    for (r, o) in outputs.iter().enumerate() {
        let dir = out.join(format!("run-{r}"));
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let p = dir.join("log.jsonl");
        std::fs::write(&p, log_text(&o.log)).map_err(io_err(&p))?;
    }
    let rows: Vec<SummaryRow> = outputs.into_iter().map(|o| o.row).collect();
    let spath = out.join("summary.csv");
    std::fs::write(&spath, summary_csv(&rows)?).map_err(io_err(&spath))?;
    Ok(rows)
}

pub fn parse_log(text: &str, path: &str) -> Result<Vec<LogRecord>, HarnessError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| HarnessError::Log { path: path.into(), message: format!("line {}: {e}", i + 1) })
        })
        .collect()
}

/// Metric tables: per-iteration series and the final suboptimality table.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub series: String,
    pub suboptimality: String,
}

/// Build the series (Σσ̄, x, C per iteration) and suboptimality tables from
/// named run logs.
pub fn emit_metrics(logs: &[(String, Vec<LogRecord>)]) -> Result<Metrics, HarnessError> {
    let mut series = csv::Writer::from_writer(Vec::new());
    series.write_record(SERIES_HEADER)?;
    let mut sub = csv::Writer::from_writer(Vec::new());
    sub.write_record(SUBOPTIMALITY_HEADER)?;
    for (name, log) in logs {
        let mut seed = None;
        for rec in log {
            match rec {
                LogRecord::Header { seed: s, .. } => seed = Some(*s),
                LogRecord::Iteration(it) => {
                    let outcome = serde_json::to_value(it.outcome).expect("outcome serializes");
                    series.write_record([
                        name.clone(),
                        it.m.to_string(),
                        it.m_prime.to_string(),
                        it.sigma_sum.to_string(),
                        it.x.to_string(),
                        it.c_value.to_string(),
                        outcome.as_str().unwrap_or_default().to_string(),
                    ])?;
                }
                LogRecord::Final(f) => {
                    let seed = seed.ok_or_else(|| HarnessError::Log { path: name.clone(), message: "final record before header".into() })?;
                    sub.write_record([
                        name.clone(),
                        seed.to_string(),
                        f.v_star.to_string(),
                        f.v_pi.to_string(),
                        (f.v_star - f.v_pi).to_string(),
                    ])?;
                }
            }
        }
    }
    let finish = |w: csv::Writer<Vec<u8>>| -> Result<String, HarnessError> {
        Ok(String::from_utf8(w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?).expect("csv is utf-8"))
    };
    Ok(Metrics { series: finish(series)?, suboptimality: finish(sub)? })
}

/// Read every `run-*/log.jsonl` below `dir` and write `series.csv` and
/// `suboptimality.csv` next to them.
pub fn emit_metrics_dir(dir: &Path) -> Result<Metrics, HarnessError> {
    let mut runs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("log.jsonl").is_file())
        .collect();
    runs.sort();
    let mut logs = Vec::new();
    for r in runs {
        let p = r.join("log.jsonl");
        let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
        let name = r.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        logs.push((name, parse_log(&text, &p.display().to_string())?));
    }
    let metrics = emit_metrics(&logs)?;
    for (file, body) in [("series.csv", &metrics.series), ("suboptimality.csv", &metrics.suboptimality)] {
        let p = dir.join(file);
        std::fs::write(&p, body).map_err(io_err(&p))?;
    }
    Ok(metrics)
}

/// Oracle checks on one instance: realizability, the range bound with an
/// identity preconditioner, the skip conversion and its linearity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub instance: String,
    pub eta_hat: f64,
    pub exhaustive: bool,
    pub sample: String,
    pub range_bound: RangeBoundReport,
    pub alpha: f64,
    pub kept_states: usize,
    pub total_states: usize,
    pub conversion_gap: f64,
    pub certificate: LinearityCertificate,
}

pub fn verify_instance(inst: &Instance, consts: &ConstantSet, seed: u64) -> Result<VerifyReport, HarnessError> {
    let oracle = |e: OracleError| HarnessError::Oracle(e.to_string());
    let (mdp, phi) = (&inst.mdp, &inst.phi);
    let thetas = inst.samples.thetas();
    let q = Preconditioning::new(mdp.horizon(), phi.dim, phi.l2, consts.l3);
    let designs = stage_designs(&thetas, &q, consts.d0).map_err(|e| HarnessError::Oracle(e.to_string()))?;
    let range_bound = check_range_bound(phi, &thetas, &designs);
    let ranges = inst.samples.range_table(phi);
    let conv = skip_convert(mdp, phi, consts.alpha, &ranges).map_err(oracle)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policies = vec![MemorylessPolicy::uniform(&conv.mdp)];
    policies.extend((0..16).map(|_| MemorylessPolicy::random(&conv.mdp, &mut rng)));
    let conversion_gap = conversion_value_gap(mdp, &conv, &policies).map_err(oracle)?;
    let radius = certificate_radius(phi.l2, mdp.horizon(), phi.dim, consts.d0, consts.alpha);
    let certificate = linearity_certificate(&conv, 16, 16, radius, seed).map_err(oracle)?;
    Ok(VerifyReport {
        instance: inst.metadata.name.clone(),
        eta_hat: inst.samples.eta_hat,
        exhaustive: inst.samples.exhaustive,
        sample: inst.samples.description.clone(),
        range_bound,
        alpha: consts.alpha,
        kept_states: conv.kept.iter().flatten().filter(|&&k| k).count(),
        total_states: mdp.num_states(),
        conversion_gap,
        certificate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let cfg = RunConfig::new(InstanceSpec::Fig1);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "version = 1\nbogus = 3\n[instance]\ngenerator = \"fig1\"\n";
        assert!(RunConfig::from_toml(text).is_err());
        let text = "version = 1\n[instance]\ngenerator = \"fig1\"\n[learner]\nepsilon = 0.1\nfoo = 1\n";
        assert!(RunConfig::from_toml(text).is_err());
    }

    #[test]
    fn empty_metrics_have_headers() {
        let m = emit_metrics(&[]).unwrap();
        assert_eq!(m.series.trim(), SERIES_HEADER.join(","));
        assert_eq!(m.suboptimality.trim(), SUBOPTIMALITY_HEADER.join(","));
    }

    #[test]
    fn summary_has_one_header() {
        let row = SummaryRow {
            seed: 1,
            instance: "x".into(),
            v_star: 1.0,
            v_pi: 0.5,
            episodes: 3,
            q_updates: 0,
            terminated_by: "converged".into(),
        };
        let text = summary_csv(&[row.clone(), row]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], SUMMARY_HEADER.join(","));
    }

    #[test]
    fn verify_fig1() {
        let cfg = RunConfig::new(InstanceSpec::Fig1);
        let inst = generate_instance(&cfg.instance).unwrap();
        let consts = constants_for(&cfg, inst.phi.dim, inst.mdp.horizon(), inst.phi.l1, inst.phi.l2).unwrap();
        let r = verify_instance(&inst, &consts, 3).unwrap();
        assert!(r.eta_hat < 1e-9);
        assert!(r.range_bound.max_excess <= 1e-8);
        assert!(r.conversion_gap < 1e-9);
        assert!(r.certificate.kappa_hat < 1e-9);
    }
}
