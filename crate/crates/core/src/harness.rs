//! Experiment harness behind the `quotasteer` command line.
//!
//! An experiment is a TOML file:
//!
//! ```toml
//! seed = 42
//! n = 50
//! out_dir = "out/race-uniform"
//! batch_size = 5          # optional, default 5
//! subgroups = 1           # optional, default 1
//! max_retries = 10        # optional, default 10
//! tier = "attribute_distribution"
//! headlines = "headlines.txt"   # optional; bundled corpus otherwise
//!
//! [target]                # or: target_file = "race.toml"
//! name = "race"
//! kind = "nominal"
//! labels = ["Black", "East Asian", "..."]
//! weights = [0.111, "..."]      # or counts = [...]
//!
//! [generator]
//! backend = "mock"        # mock | fixture | remote
//! preset = "race"         # or weights = [...] aligned with the target labels
//! compliance = 1.0
//! # path = "fixture.jsonl"       (fixture)
//! # endpoint = "tcp://host:port" (remote)
//!
//! [belief]
//! mode = "internal"       # internal | external
//! # classifier = "mock-token" | "table" | "remote"; path / endpoint as needed
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::annotation;
use crate::attribute::{quantize_target, Histogram, TargetFile, TargetSpec};
use crate::belief::{BeliefSource, MockTokenClassifier, RemoteClassifier, TableClassifier};
use crate::control::{self, LoopConfig, Outcome, RunError, RunReport};
use crate::error::{Error, Result};
use crate::generator::{
    presets, Backend, MockBiasConfig, MockGenerator, PromptTier, RemoteBackend, ReplayBackend,
};
use crate::metrics::{self, DistancePreset, GroundDistance, ProbDist};
use crate::rng;

const BUNDLED_HEADLINES: &str = include_str!("../data/headlines.txt");

/// Process exit codes. Stable across versions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Converged = 0,
    ConfigError = 2,
    NotConverged = 3,
    BackendFailure = 4,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub n: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_subgroups")]
    pub subgroups: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_tier")]
    pub tier: PromptTier,
    pub headlines: Option<PathBuf>,
    pub target: Option<TargetFile>,
    pub target_file: Option<PathBuf>,
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub belief: BeliefConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_batch_size() -> usize {
    control::DEFAULT_BATCH_SIZE
}
fn default_subgroups() -> usize {
    1
}
fn default_max_retries() -> u32 {
    control::DEFAULT_MAX_RETRIES
}
fn default_tier() -> PromptTier {
    PromptTier::AttributeDistribution
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase", deny_unknown_fields)]
pub enum GeneratorConfig {
    Mock {
        preset: Option<String>,
        weights: Option<Vec<f64>>,
        #[serde(default = "full_compliance")]
        compliance: f64,
    },
    Fixture {
        path: PathBuf,
    },
    Remote {
        endpoint: String,
    },
}

fn full_compliance() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeliefConfig {
    #[serde(default)]
    pub mode: BeliefMode,
    pub classifier: Option<String>,
    pub path: Option<PathBuf>,
    pub endpoint: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeliefMode {
    #[default]
    Internal,
    External,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub batch_size: Option<usize>,
    pub subgroups: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, base)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = Some(seed);
        }
        if let Some(dir) = &o.out_dir {
            self.out_dir = dir.clone();
        }
        if let Some(b) = o.batch_size {
            self.batch_size = b;
        }
        if let Some(g) = o.subgroups {
            self.subgroups = g;
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.out_dir)
    }

    pub fn target_spec(&self) -> Result<TargetSpec> {
        match (&self.target, &self.target_file) {
            (Some(t), None) => t.clone().try_into(),
            (None, Some(p)) => TargetSpec::load(self.resolve(p)),
            (Some(_), Some(_)) => Err(Error::InvalidTarget(
                "give either [target] or target_file, not both".into(),
            )),
            (None, None) => Err(Error::InvalidTarget("no target configured".into())),
        }
    }

    pub fn headlines(&self) -> Result<Vec<String>> {
        let text = match &self.headlines {
            Some(p) => fs::read_to_string(self.resolve(p))?,
            None => BUNDLED_HEADLINES.to_string(),
        };
        let lines: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        if lines.is_empty() {
            return Err(Error::InvalidParameter("headline corpus is empty".into()));
        }
        Ok(lines)
    }

    pub fn loop_config(&self) -> Result<LoopConfig> {
        let spec = self.target_spec()?;
        let ledger = quantize_target(&spec, self.n)?;
        Ok(LoopConfig::new(ledger)
            .with_belief(self.belief_source()?)
            .with_batch_size(self.batch_size)
            .with_max_retries(self.max_retries)
            .with_subgroups(self.subgroups)
            .with_tier(self.tier))
    }

    fn belief_source(&self) -> Result<BeliefSource> {
        let b = &self.belief;
        if b.mode == BeliefMode::Internal {
            return Ok(BeliefSource::Internal);
        }
        let kind = b.classifier.as_deref().unwrap_or("mock-token");
        Ok(match kind {
            "mock-token" => BeliefSource::external(MockTokenClassifier),
            "table" => {
                let path = b.path.as_ref().ok_or_else(|| {
                    Error::InvalidParameter("table classifier needs `path`".into())
                })?;
                BeliefSource::external(TableClassifier::load("table", self.resolve(path))?)
            }
            "remote" => {
                let endpoint = b.endpoint.as_deref().ok_or_else(|| {
                    Error::InvalidParameter("remote classifier needs `endpoint`".into())
                })?;
                BeliefSource::external(RemoteClassifier::connect("remote", endpoint)?)
            }
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown classifier {other:?}"
                )))
            }
        })
    }

    /// Build the configured backend for a target over `spec`'s schema.
    pub fn backend(&self, spec: &TargetSpec) -> Result<Box<dyn Backend + Send>, SetupError> {
        match &self.generator {
            GeneratorConfig::Mock {
                preset,
                weights,
                compliance,
            } => {
                let seed = self.seed.ok_or_else(|| {
                    SetupError::Config(Error::InvalidParameter("mock runs need a seed".into()))
                })?;
                let mock_seed = rng::derive_seed(seed, rng::MOCK_STREAM);
                let schema = spec.schema().clone();
                let weights = match (preset, weights) {
                    (Some(name), None) => {
                        let p =
                            presets::by_name(name, *compliance, mock_seed).ok_or_else(|| {
                                SetupError::Config(Error::InvalidParameter(format!(
                                    "unknown mock preset {name:?}"
                                )))
                            })?;
                        align_weights(&p, &schema).map_err(SetupError::Config)?
                    }
                    (None, Some(w)) => w.clone(),
                    (None, None) => vec![1.0 / schema.len() as f64; schema.len()],
                    (Some(_), Some(_)) => {
                        return Err(SetupError::Config(Error::InvalidParameter(
                            "give either a mock preset or weights".into(),
                        )))
                    }
                };
                let cfg = MockBiasConfig::new(schema, weights, *compliance, mock_seed)
                    .map_err(SetupError::Config)?;
                Ok(Box::new(MockGenerator::new(cfg)))
            }
            GeneratorConfig::Fixture { path } => Ok(Box::new(
                ReplayBackend::load(self.resolve(path)).map_err(SetupError::Config)?,
            )),
            GeneratorConfig::Remote { endpoint } => Ok(Box::new(
                RemoteBackend::connect(endpoint).map_err(|e| SetupError::Backend(e.to_string()))?,
            )),
        }
    }
}

/// Preset weights re-indexed by label name onto `schema`.
fn align_weights(
    preset: &MockBiasConfig,
    schema: &crate::attribute::AttributeSchema,
) -> Result<Vec<f64>> {
    if preset.schema.len() != schema.len() {
        return Err(Error::SchemaMismatch {
            left: schema.name().to_string(),
            right: format!("preset over {:?}", preset.schema.labels()),
        });
    }
    schema
        .labels()
        .iter()
        .map(|l| {
            preset
                .schema
                .index_of(l)
                .map(|i| preset.internal_weights[i])
                .ok_or_else(|| Error::UnknownLabel {
                    schema: preset.schema.name().to_string(),
                    label: l.clone(),
                })
        })
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum SetupError {
    #[error(transparent)]
    Config(Error),
    #[error("backend unavailable: {0}")]
    Backend(String),
}

/// What a run/ablate command produced.
#[derive(Debug)]
pub struct CmdOutcome {
    pub status: ExitStatus,
    pub report: Option<RunReport>,
    pub message: String,
}

impl CmdOutcome {
    fn config(err: impl std::fmt::Display) -> Self {
        Self {
            status: ExitStatus::ConfigError,
            report: None,
            message: format!("config error: {err}"),
        }
    }
}

/// Files written for every run: `trace.jsonl`, `report.json`,
/// `histogram.csv`, `target.csv` and the plot-ready `choices.csv`.
pub fn write_run_outputs(dir: &Path, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("trace.jsonl"), report.trace_journal())?;
    fs::write(dir.join("report.json"), report.to_json())?;
    fs::write(
        dir.join("histogram.csv"),
        report.final_histogram().to_csv()?,
    )?;
    fs::write(dir.join("target.csv"), report.target_histogram().to_csv()?)?;
    fs::write(dir.join("choices.csv"), trace_csv(report)?)?;
    Ok(())
}

/// Run an experiment without touching the filesystem. A backend failure
/// still returns the partial report when there is one.
pub fn run_experiment(config: &ExperimentConfig, ablation: bool) -> CmdOutcome {
    let prepared = config
        .target_spec()
        .and_then(|spec| Ok((config.loop_config()?, config.headlines()?, spec)));
    let (loop_cfg, headlines, spec) = match prepared {
        Ok(p) => p,
        Err(e) => return CmdOutcome::config(e),
    };
    let mut backend = match config.backend(&spec) {
        Ok(b) => b,
        Err(SetupError::Config(e)) => return CmdOutcome::config(e),
        Err(e @ SetupError::Backend(_)) => {
            return CmdOutcome {
                status: ExitStatus::BackendFailure,
                report: None,
                message: e.to_string(),
            }
        }
    };
    let result = if ablation {
        control::run_ablation(&loop_cfg, &mut backend, &headlines)
    } else {
        control::run(&loop_cfg, &mut backend, &headlines)
    };
    match result {
        Ok(report) => {
            let status = if ablation || report.converged {
                ExitStatus::Converged
            } else {
                ExitStatus::NotConverged
            };
            CmdOutcome {
                status,
                message: summary(&report),
                report: Some(report),
            }
        }
        Err(RunError::Config(e)) => CmdOutcome::config(e),
        Err(err) => CmdOutcome {
            status: ExitStatus::BackendFailure,
            report: err.partial_report().cloned(),
            message: format!("run aborted: {err}"),
        },
    }
}

fn execute(config: &ExperimentConfig, ablation: bool) -> CmdOutcome {
    let outcome = run_experiment(config, ablation);
    if let Some(report) = &outcome.report {
        if let Err(e) = write_run_outputs(&config.out_dir(), report) {
            return CmdOutcome::config(e);
        }
    }
    outcome
}

/// Run the quota loop. Exit 0 iff the target was met exactly.
pub fn cmd_run(config: &ExperimentConfig) -> CmdOutcome {
    execute(config, false)
}

/// Run with quota tracking disabled. Completing the requested number of
/// generations exits 0; the outputs show the backend's unsteered bias.
pub fn cmd_ablate(config: &ExperimentConfig) -> CmdOutcome {
    execute(config, true)
}

fn summary(report: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} run over {:?}: converged={} iterations={} unmatched={}",
        report.mode, report.attribute, report.converged, report.iterations, report.unmatched
    );
    let _ = writeln!(s, "final  {}", report.final_histogram());
    let _ = writeln!(s, "target {}", report.target_histogram());
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
    let _ = write!(
        s,
        "js_div={} emd={} tv={}",
        fmt(report.js_div),
        fmt(report.emd),
        fmt(report.tv)
    );
    s
}

#[derive(Debug, Serialize)]
pub struct SimulationOutput {
    pub analysis: metrics::CoverageAnalysis,
    pub p_decimal: f64,
    pub expected_share_pct: f64,
    pub simulation: metrics::CoverageSimulation,
}

pub fn cmd_simulate(k: u64, b: u64, trials: u64, runs: u64, seed: u64) -> Result<SimulationOutput> {
    let analysis = metrics::coverage_analysis(k, b, trials)?;
    let simulation = metrics::coverage_simulation(k, b, trials, runs, seed)?;
    Ok(SimulationOutput {
        p_decimal: analysis.p_f64(),
        expected_share_pct: analysis.expected_share_pct(),
        analysis,
        simulation,
    })
}

impl SimulationOutput {
    pub fn table(&self) -> String {
        let a = &self.analysis;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "k={} b={} trials={}  p={}/{} ({:.4})  expected={:.3}  sigma={:.3}  share={:.2}%",
            a.k,
            a.b,
            a.trials,
            a.p.numer(),
            a.p.denom(),
            self.p_decimal,
            a.expected,
            a.sigma,
            self.expected_share_pct
        );
        let sim = &self.simulation;
        let _ = writeln!(
            s,
            "simulated {} runs (seed {}): mean count {:.3}, mean share {:.2}%, 95% band [{:.1}%, {:.1}%]",
            sim.runs, sim.seed, sim.mean_count, sim.mean_share_pct, sim.central_band_pct.0, sim.central_band_pct.1
        );
        let _ = writeln!(
            s,
            "category,mean_count,mean_share_pct,min_share_pct,max_share_pct"
        );
        for (i, c) in sim.per_category.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{:.4},{:.4},{:.2},{:.2}",
                i + 1,
                c.mean_count,
                c.mean_share_pct,
                c.min_share_pct,
                c.max_share_pct
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub js_div: f64,
    pub emd: f64,
    pub tv: f64,
}

/// Compare two `label,count` histograms. The first file fixes the label order;
/// the second must use the same labels.
pub fn cmd_metrics(a_text: &str, b_text: &str, preset: DistancePreset) -> Result<MetricsReport> {
    let a = Histogram::from_csv(a_text, None)?;
    let b = Histogram::from_csv(b_text, Some(a.schema().clone()))?;
    let p = ProbDist::from_histogram(&a)?;
    let q = ProbDist::from_histogram(&b)?;
    let d = GroundDistance::preset(preset, a.schema().len());
    Ok(MetricsReport {
        js_div: metrics::js_divergence(&p, &q)?,
        emd: metrics::emd(&p, &q, &d)?,
        tv: metrics::total_variation(p.probs(), q.probs()),
    })
}

pub fn cmd_kappa(a_text: &str, b_text: &str) -> Result<Vec<annotation::PairScore>> {
    let mut sets = annotation::parse_annotations(a_text, &[])?;
    let schemas: Vec<Arc<_>> = sets.iter().map(|s| s.schema().clone()).collect();
    sets.extend(annotation::parse_annotations(b_text, &schemas)?);
    let scores = annotation::pairwise_scores(&sets);
    if scores.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    Ok(scores)
}

/// One row per accepted generation with the running total-variation gap.
pub fn trace_csv(report: &RunReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "index",
        "step",
        "iteration",
        "subgroup",
        "label",
        "running_tv",
    ])?;
    for (i, r) in report
        .records
        .iter()
        .filter(|r| r.outcome == Outcome::Accepted)
        .enumerate()
    {
        w.write_record([
            (i + 1).to_string(),
            r.step.to_string(),
            r.iteration.to_string(),
            r.subgroup.to_string(),
            r.believed.clone().unwrap_or_default(),
            r.running_tv.map(|v| format!("{v:.6}")).unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn cmd_trace_export(report_path: impl AsRef<Path>) -> Result<String> {
    let report = RunReport::from_json(&fs::read_to_string(report_path)?)?;
    trace_csv(&report)
}
