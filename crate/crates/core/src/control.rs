//! The quota-steering loop.
//!
//! Each iteration offers the backend only the labels whose bins still have
//! quota, checks what it produced, and decrements the matching bin. Outputs
//! whose believed label is not on the current menu are retried (up to
//! `max_retries`) against the current menu; if a step runs out of retries the
//! run stops unconverged. Once every bin reaches zero the realized histogram
//! equals the target exactly.
//!
//! Batches: all requests in a batch carry the menu as it stood when the batch
//! started, but responses are settled one at a time in order, so a label
//! that depletes mid-batch is rejected for the rest of that batch.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribute::{largest_remainder, AttributeKind, AttributeSchema, Histogram, QuotaLedger};
use crate::belief::{resolve_attribute, BeliefSource};
use crate::error::Error;
use crate::generator::{Backend, BackendError, GenerationRequest, GenerationResponse, PromptTier};
use crate::metrics::{self, DistancePreset, GroundDistance, ProbDist};

pub const DEFAULT_BATCH_SIZE: usize = 5;
pub const DEFAULT_MAX_RETRIES: u32 = 10;

pub const TRACE_SCHEMA: &str = "quotasteer.trace.v1";
pub const REPORT_SCHEMA: &str = "quotasteer.report.v1";

#[derive(Debug)]
pub struct LoopConfig {
    pub target: QuotaLedger,
    pub belief: BeliefSource,
    pub batch_size: usize,
    pub max_retries: u32,
    pub subgroups: usize,
    pub tier: PromptTier,
}

impl LoopConfig {
    pub fn new(target: QuotaLedger) -> Self {
        Self {
            target,
            belief: BeliefSource::Internal,
            batch_size: DEFAULT_BATCH_SIZE,
            max_retries: DEFAULT_MAX_RETRIES,
            subgroups: 1,
            tier: PromptTier::AttributeDistribution,
        }
    }

    pub fn with_belief(mut self, belief: BeliefSource) -> Self {
        self.belief = belief;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn with_max_retries(mut self, max_retries: u32) -> Self {
        self.max_retries = max_retries;
        self
    }

    pub fn with_subgroups(mut self, subgroups: usize) -> Self {
        self.subgroups = subgroups;
        self
    }

    pub fn with_tier(mut self, tier: PromptTier) -> Self {
        self.tier = tier;
        self
    }

    pub fn schema(&self) -> &Arc<AttributeSchema> {
        self.target.schema()
    }

    fn validate(&self) -> Result<(), Error> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        if self.subgroups == 0 {
            return Err(Error::InvalidParameter("subgroups must be >= 1".into()));
        }
        if self.target.total_target() == 0 {
            return Err(Error::InvalidParameter("target is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Accepted,
    RejectedRetry,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    /// Position in the trace, counting every attempt.
    pub step: u64,
    /// Batch number, starting at 1.
    pub iteration: u64,
    pub subgroup: usize,
    /// Schema name.
    pub attribute: String,
    pub headline: String,
    /// Labels with quota left when this attempt was judged.
    pub menu: Vec<String>,
    pub claimed: Option<String>,
    pub believed: Option<String>,
    pub outcome: Outcome,
    pub retries_used: u32,
    pub image_ref: String,
    /// Total variation between the accepted-so-far histogram and the target
    /// weights; set on accepted records only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub running_tv: Option<f64>,
}

/// Final record of one step plus the rejected attempts that preceded it.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub record: GenerationRecord,
    pub rejected: Vec<GenerationRecord>,
}

impl StepResult {
    pub fn records(&self) -> impl Iterator<Item = &GenerationRecord> {
        self.rejected.iter().chain(std::iter::once(&self.record))
    }
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error("ledger already converged")]
    Converged,
    #[error("backend failed: {source}")]
    Backend {
        source: BackendError,
        partial: Vec<GenerationRecord>,
    },
    #[error("could not resolve attribute: {source}")]
    Belief {
        source: Error,
        partial: Vec<GenerationRecord>,
    },
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid loop configuration: {0}")]
    Config(#[from] Error),
    #[error("backend failed: {source}")]
    Backend {
        source: BackendError,
        partial: Box<RunReport>,
    },
    #[error("could not resolve attribute: {source}")]
    Belief {
        source: Error,
        partial: Box<RunReport>,
    },
}

impl RunError {
    pub fn partial_report(&self) -> Option<&RunReport> {
        match self {
            RunError::Config(_) => None,
            RunError::Backend { partial, .. } | RunError::Belief { partial, .. } => Some(partial),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Controlled,
    /// Quota tracking disabled: full menu every time, ledger untouched.
    Ablation,
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunMode::Controlled => write!(f, "controlled"),
            RunMode::Ablation => write!(f, "ablation"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub mode: RunMode,
    pub attribute: String,
    pub kind: AttributeKind,
    pub labels: Vec<String>,
    pub target_counts: Vec<u64>,
    pub final_counts: Vec<u64>,
    pub js_div: Option<f64>,
    pub emd: Option<f64>,
    pub tv: Option<f64>,
    pub ground_distance: DistancePreset,
    pub converged: bool,
    pub iterations: u64,
    pub unmatched: u64,
    pub subgroups: usize,
    pub records: Vec<GenerationRecord>,
}

impl RunReport {
    pub fn attribute_schema(&self) -> Arc<AttributeSchema> {
        Arc::new(
            AttributeSchema::new(self.attribute.clone(), self.kind, self.labels.clone())
                .expect("report labels come from a valid schema"),
        )
    }

    pub fn final_histogram(&self) -> Histogram {
        Histogram::from_counts(self.attribute_schema(), self.final_counts.clone())
            .expect("counts match labels")
    }

    pub fn target_histogram(&self) -> Histogram {
        Histogram::from_counts(self.attribute_schema(), self.target_counts.clone())
            .expect("counts match labels")
    }

    pub fn accepted(&self) -> impl Iterator<Item = &GenerationRecord> {
        self.records
            .iter()
            .filter(|r| r.outcome == Outcome::Accepted)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, Error> {
        let report: RunReport = serde_json::from_str(text)?;
        if report.schema != REPORT_SCHEMA {
            return Err(Error::Parse(format!(
                "unsupported report schema {:?}, expected {REPORT_SCHEMA:?}",
                report.schema
            )));
        }
        Ok(report)
    }

    /// Trace journal: one JSON record per line, each tagged with the trace schema.
    pub fn trace_journal(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            schema: &'static str,
            #[serde(flatten)]
            record: &'a GenerationRecord,
        }
        let mut out = String::new();
        for record in &self.records {
            let line = Line {
                schema: TRACE_SCHEMA,
                record,
            };
            out.push_str(&serde_json::to_string(&line).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Labels whose bins still have quota, in schema order.
pub fn remaining_menu(ledger: &QuotaLedger) -> Vec<String> {
    let schema = ledger.schema();
    ledger
        .remaining()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(i, _)| schema.label(i).to_string())
        .collect()
}

/// Split each label's count across `groups` sequential sub-targets, using the
/// same largest-remainder rule as target quantization.
pub fn partition_subgroups(target: &[u64], groups: usize) -> Vec<Vec<u64>> {
    let even = vec![1.0 / groups as f64; groups];
    let per_label: Vec<Vec<u64>> = target
        .iter()
        .map(|&c| largest_remainder(&even, c))
        .collect();
    (0..groups)
        .map(|g| per_label.iter().map(|split| split[g]).collect())
        .collect()
}

struct Runner<'a, B: Backend> {
    config: &'a LoopConfig,
    backend: &'a mut B,
    headlines: &'a [String],
    cursor: usize,
    records: Vec<GenerationRecord>,
    realized: Vec<u64>,
    target_weights: Vec<f64>,
    iteration: u64,
    subgroup: usize,
}

enum Fault {
    Backend(BackendError),
    Belief(Error),
}

impl<'a, B: Backend> Runner<'a, B> {
    fn new(config: &'a LoopConfig, backend: &'a mut B, headlines: &'a [String]) -> Self {
        Self {
            config,
            backend,
            headlines,
            cursor: 0,
            records: Vec::new(),
            realized: vec![0; config.schema().len()],
            target_weights: config.target.target_weights(),
            iteration: 0,
            subgroup: 0,
        }
    }

    fn schema(&self) -> &AttributeSchema {
        self.config.schema()
    }

    fn next_headline(&mut self) -> String {
        let h = self.headlines[self.cursor % self.headlines.len()].clone();
        self.cursor += 1;
        h
    }

    fn request(&self, headline: &str, ledger: &QuotaLedger, full_menu: bool) -> GenerationRequest {
        let tier = self.config.tier;
        let menu = if full_menu {
            self.schema().labels().to_vec()
        } else {
            remaining_menu(ledger)
        };
        let quotas = (tier == PromptTier::AttributeDistribution).then(|| {
            let schema = self.schema();
            if full_menu {
                ledger.target().to_vec()
            } else {
                menu.iter()
                    .map(|l| ledger.remaining()[schema.index_of(l).expect("menu from schema")])
                    .collect()
            }
        });
        GenerationRequest {
            prompt_text: headline.to_string(),
            tier,
            menu: if tier.declares_attribute() {
                menu
            } else {
                Vec::new()
            },
            batch_hint: self.config.batch_size as u32,
            quotas: if tier.declares_attribute() {
                quotas
            } else {
                None
            },
        }
    }

    fn running_tv(&self) -> f64 {
        let total: u64 = self.realized.iter().sum();
        let realized: Vec<f64> = self
            .realized
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect();
        metrics::total_variation(&realized, &self.target_weights)
    }

    /// Judge `first` and retry until accepted or out of retries. In ablation
    /// mode every in-schema label is acceptable and the ledger is untouched.
    fn settle(
        &mut self,
        first: GenerationResponse,
        first_request: GenerationRequest,
        ledger: &mut QuotaLedger,
        ablation: bool,
    ) -> Result<Outcome, Fault> {
        let mut response = first;
        let mut request = first_request;
        let mut retries = 0u32;
        loop {
            response.check_against(&request).map_err(Fault::Backend)?;
            let believed = resolve_attribute(&self.config.belief, &response, self.schema())
                .map_err(Fault::Belief)?;
            let menu = if ablation {
                self.schema().labels().to_vec()
            } else {
                remaining_menu(ledger)
            };
            let index = self.schema().index_of(&believed);
            let acceptable = match index {
                Some(i) => ablation || ledger.has_remaining(i),
                None => false,
            };
            let mut record = GenerationRecord {
                step: self.records.len() as u64,
                iteration: self.iteration,
                subgroup: self.subgroup,
                attribute: self.schema().name().to_string(),
                headline: request.prompt_text.clone(),
                menu,
                claimed: response.claimed_label.clone(),
                believed: Some(believed),
                outcome: Outcome::Accepted,
                retries_used: retries,
                image_ref: response.image_ref.clone(),
                running_tv: None,
            };
            if acceptable {
                let i = index.expect("acceptable implies in schema");
                if !ablation {
                    ledger.decrement(i).expect("bin checked non-empty");
                }
                self.realized[i] += 1;
                record.running_tv = Some(self.running_tv());
                self.records.push(record);
                return Ok(Outcome::Accepted);
            }
            if retries >= self.config.max_retries {
                record.outcome = Outcome::Exhausted;
                self.records.push(record);
                return Ok(Outcome::Exhausted);
            }
            record.outcome = Outcome::RejectedRetry;
            self.records.push(record);
            retries += 1;
            request = self.request(&request.prompt_text, ledger, ablation);
            response = self.backend.generate(&request).map_err(Fault::Backend)?;
        }
    }

    /// One batch against `ledger`. Returns the number of exhausted steps.
    fn batch(
        &mut self,
        ledger: &mut QuotaLedger,
        size: usize,
        ablation: bool,
    ) -> Result<u64, Fault> {
        self.iteration += 1;
        let requests: Vec<GenerationRequest> = (0..size)
            .map(|_| {
                let h = self.next_headline();
                self.request(&h, ledger, ablation)
            })
            .collect();
        let results = self.backend.generate_batch(&requests);
        let mut exhausted = 0;
        for (request, result) in requests.into_iter().zip(results) {
            let response = result.map_err(Fault::Backend)?;
            if self.settle(response, request, ledger, ablation)? == Outcome::Exhausted {
                exhausted += 1;
            }
        }
        Ok(exhausted)
    }

    fn finish(self, mode: RunMode, unmatched: u64, all_converged: bool) -> RunReport {
        let schema = self.config.schema().clone();
        let target = self.config.target.target().to_vec();
        let final_counts = self.realized;
        let preset = DistancePreset::for_kind(schema.kind());
        let (js_div, emd, tv) = if final_counts.iter().sum::<u64>() > 0 {
            let p = ProbDist::from_histogram(
                &Histogram::from_counts(schema.clone(), final_counts.clone()).expect("width"),
            )
            .expect("non-empty");
            let q = ProbDist::from_histogram(&self.config.target.target_histogram())
                .expect("target non-empty");
            let d = GroundDistance::preset(preset, schema.len());
            (
                metrics::js_divergence(&p, &q).ok(),
                metrics::emd(&p, &q, &d).ok(),
                Some(metrics::total_variation(p.probs(), q.probs())),
            )
        } else {
            (None, None, None)
        };
        let converged = match mode {
            RunMode::Controlled => all_converged && unmatched == 0,
            RunMode::Ablation => final_counts == target,
        };
        RunReport {
            schema: REPORT_SCHEMA.to_string(),
            mode,
            attribute: schema.name().to_string(),
            kind: schema.kind(),
            labels: schema.labels().to_vec(),
            target_counts: target,
            final_counts,
            js_div,
            emd,
            tv,
            ground_distance: preset,
            converged,
            iterations: self.iteration,
            unmatched,
            subgroups: self.config.subgroups,
            records: self.records,
        }
    }
}

fn check_headlines(headlines: &[String]) -> Result<(), RunError> {
    if headlines.is_empty() {
        return Err(RunError::Config(Error::InvalidParameter(
            "no headlines".into(),
        )));
    }
    Ok(())
}

/// Execute a single step against `ledger`, outside any batch.
pub fn step<B: Backend>(
    config: &LoopConfig,
    backend: &mut B,
    ledger: &mut QuotaLedger,
    headline: &str,
) -> Result<StepResult, StepError> {
    if ledger.is_converged() {
        return Err(StepError::Converged);
    }
    let headlines = [headline.to_string()];
    let mut runner = Runner::new(config, backend, &headlines);
    runner.iteration = 1;
    let request = runner.request(headline, ledger, false);
    let first = runner.backend.generate(&request);
    let outcome = first
        .map_err(Fault::Backend)
        .and_then(|resp| runner.settle(resp, request, ledger, false));
    let mut records = runner.records;
    match outcome {
        Ok(_) => {
            let record = records.pop().expect("settle records the final attempt");
            Ok(StepResult {
                record,
                rejected: records,
            })
        }
        Err(Fault::Backend(source)) => Err(StepError::Backend {
            source,
            partial: records,
        }),
        Err(Fault::Belief(source)) => Err(StepError::Belief {
            source,
            partial: records,
        }),
    }
}

/// Drive the backend until every bin of the target is filled, or a step
/// runs out of retries.
pub fn run<B: Backend>(
    config: &LoopConfig,
    backend: &mut B,
    headlines: &[String],
) -> Result<RunReport, RunError> {
    config.validate()?;
    check_headlines(headlines)?;
    let schema = config.schema().clone();
    let parts = partition_subgroups(config.target.target(), config.subgroups);
    let mut runner = Runner::new(config, backend, headlines);
    let mut unmatched = 0u64;
    let mut all_converged = true;
    for (g, counts) in parts.into_iter().enumerate() {
        let mut ledger = QuotaLedger::new(schema.clone(), counts);
        runner.subgroup = g;
        while !ledger.is_converged() {
            let size = config.batch_size.min(ledger.remaining_total() as usize);
            match runner.batch(&mut ledger, size, false) {
                Ok(0) => {}
                Ok(n) => {
                    unmatched += n;
                    break;
                }
                Err(fault) => {
                    let partial = Box::new(runner.finish(RunMode::Controlled, unmatched, false));
                    return Err(match fault {
                        Fault::Backend(source) => RunError::Backend { source, partial },
                        Fault::Belief(source) => RunError::Belief { source, partial },
                    });
                }
            }
        }
        if !ledger.is_converged() {
            all_converged = false;
            break;
        }
    }
    Ok(runner.finish(RunMode::Controlled, unmatched, all_converged))
}

/// Same pipeline with quota tracking switched off: the full label set is
/// offered every time and nothing is decremented, so the realized histogram
/// shows the backend's own preferences.
pub fn run_ablation<B: Backend>(
    config: &LoopConfig,
    backend: &mut B,
    headlines: &[String],
) -> Result<RunReport, RunError> {
    config.validate()?;
    check_headlines(headlines)?;
    let total = config.target.total_target();
    let mut untouched = config.target.clone();
    let mut runner = Runner::new(config, backend, headlines);
    let mut unmatched = 0u64;
    while runner.realized.iter().sum::<u64>() < total {
        let left = total - runner.realized.iter().sum::<u64>();
        let size = config.batch_size.min(left as usize);
        match runner.batch(&mut untouched, size, true) {
            Ok(0) => {}
            Ok(n) => {
                unmatched += n;
                break;
            }
            Err(fault) => {
                let partial = Box::new(runner.finish(RunMode::Ablation, unmatched, false));
                return Err(match fault {
                    Fault::Backend(source) => RunError::Backend { source, partial },
                    Fault::Belief(source) => RunError::Belief { source, partial },
                });
            }
        }
    }
    debug_assert_eq!(untouched, config.target);
    Ok(runner.finish(RunMode::Ablation, unmatched, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribute::{quantize_target, TargetSpec};
    use crate::generator::{presets, MockBiasConfig, MockGenerator, ReplayBackend};

    fn headlines() -> Vec<String> {
        (0..20).map(|i| format!("headline {i}")).collect()
    }

    fn gender_ledger(female: u64, male: u64) -> QuotaLedger {
        QuotaLedger::new(
            Arc::new(presets::binary_gender_schema()),
            vec![male, female],
        )
    }

    #[test]
    fn menu_lists_open_bins_in_order() {
        let schema = Arc::new(AttributeSchema::nominal("x", ["a", "b", "c"]).unwrap());
        let ledger = QuotaLedger::new(schema.clone(), vec![2, 0, 1]);
        assert_eq!(remaining_menu(&ledger), ["a", "c"]);
        assert!(remaining_menu(&QuotaLedger::new(schema, vec![0, 0, 0])).is_empty());

        let race =
            quantize_target(&TargetSpec::uniform(Arc::new(crate::codebook::race())), 50).unwrap();
        assert_eq!(remaining_menu(&race).len(), 9);
    }

    #[test]
    fn singleton_menu_step_accepts() {
        let mut ledger = gender_ledger(3, 0);
        let config = LoopConfig::new(ledger.clone());
        let mut mock = MockGenerator::new(presets::gender(1.0, 5));
        let out = step(&config, &mut mock, &mut ledger, "h").unwrap();
        assert_eq!(out.record.outcome, Outcome::Accepted);
        assert_eq!(out.record.believed.as_deref(), Some("female"));
        assert!(out.rejected.is_empty());
        assert_eq!(ledger.remaining_for("female"), Some(2));
    }

    #[test]
    fn off_menu_backend_exhausts_without_touching_ledger() {
        let schema = Arc::new(presets::binary_gender_schema());
        let cfg = MockBiasConfig::new(schema, vec![1.0, 0.0], 0.0, 11).unwrap();
        let mut mock = MockGenerator::new(cfg);
        let mut ledger = gender_ledger(3, 0);
        let before = ledger.clone();
        let config = LoopConfig::new(ledger.clone()).with_max_retries(0);
        let out = step(&config, &mut mock, &mut ledger, "h").unwrap();
        assert_eq!(out.record.outcome, Outcome::Exhausted);
        assert_eq!(ledger, before);

        let config = LoopConfig::new(ledger.clone()).with_max_retries(3);
        let out = step(&config, &mut mock, &mut ledger, "h").unwrap();
        assert_eq!(out.rejected.len(), 3);
        assert!(out
            .rejected
            .iter()
            .all(|r| r.outcome == Outcome::RejectedRetry));
        assert_eq!(out.record.retries_used, 3);
    }

    #[test]
    fn single_seeded_race_step_conserves_mass() {
        let spec = TargetSpec::uniform(Arc::new(crate::codebook::race()));
        let mut ledger = quantize_target(&spec, 50).unwrap();
        let config = LoopConfig::new(ledger.clone());
        let mut mock = MockGenerator::new(presets::race_white_heavy(1.0, 99));
        let out = step(&config, &mut mock, &mut ledger, "h").unwrap();
        let label = out.record.believed.unwrap();
        let i = ledger.schema().index_of(&label).unwrap();
        let before = config.target.remaining()[i];
        assert!(before == 6 || before == 5);
        assert_eq!(ledger.remaining()[i], before - 1);
        assert_eq!(ledger.remaining_total() + ledger.accepted(), 50);
    }

    #[test]
    fn step_on_converged_ledger_is_an_error() {
        let mut ledger = gender_ledger(0, 0);
        let config = LoopConfig::new(gender_ledger(1, 0));
        let mut mock = MockGenerator::new(presets::gender(1.0, 5));
        assert!(matches!(
            step(&config, &mut mock, &mut ledger, "h"),
            Err(StepError::Converged)
        ));
    }

    #[test]
    fn gender_balance_from_extreme_bias() {
        let config = LoopConfig::new(gender_ledger(100, 100));
        let mut mock = MockGenerator::new(presets::gender(1.0, 1));
        let report = run(&config, &mut mock, &headlines()).unwrap();
        assert!(report.converged);
        assert_eq!(report.final_counts, vec![100, 100]);
        assert_eq!(report.js_div, Some(0.0));
        assert_eq!(report.emd, Some(0.0));
        assert_eq!(report.unmatched, 0);
    }

    #[test]
    fn ninety_ten_target() {
        let schema = Arc::new(AttributeSchema::nominal("gender", ["female", "male"]).unwrap());
        let spec = TargetSpec::weights(schema.clone(), vec![0.9, 0.1]).unwrap();
        let config = LoopConfig::new(quantize_target(&spec, 50).unwrap());
        let cfg = MockBiasConfig::new(schema, vec![0.015, 0.985], 1.0, 4).unwrap();
        let report = run(&config, &mut MockGenerator::new(cfg), &headlines()).unwrap();
        assert_eq!(report.final_counts, vec![45, 5]);
    }

    #[test]
    fn subgroups_sum_to_global_target() {
        let target = [6, 6, 6, 6, 6, 5, 5, 5, 5];
        for g in 1..=7 {
            let parts = partition_subgroups(&target, g);
            assert_eq!(parts.len(), g);
            for (label, &want) in target.iter().enumerate() {
                assert_eq!(parts.iter().map(|p| p[label]).sum::<u64>(), want);
            }
        }
    }

    #[test]
    fn subgrouped_run_converges_exactly() {
        let spec = TargetSpec::uniform(Arc::new(crate::codebook::race()));
        let config = LoopConfig::new(quantize_target(&spec, 50).unwrap()).with_subgroups(3);
        let mut mock = MockGenerator::new(presets::race_white_heavy(1.0, 8));
        let report = run(&config, &mut mock, &headlines()).unwrap();
        assert!(report.converged);
        assert_eq!(report.final_counts, config.target.target());
        assert_eq!(report.accepted().map(|r| r.subgroup).max(), Some(2));
    }

    #[test]
    fn backend_failure_carries_partial_report() {
        let fixture = ReplayBackend::new(vec![GenerationResponse {
            claimed_label: Some("male".into()),
            image_ref: "a".into(),
        }]);
        let mut fixture = fixture;
        let config = LoopConfig::new(gender_ledger(1, 1)).with_batch_size(1);
        let err = run(&config, &mut fixture, &headlines()).unwrap_err();
        let partial = err.partial_report().unwrap();
        assert_eq!(partial.records.len(), 1);
        assert!(!partial.converged);
        assert!(matches!(
            err,
            RunError::Backend {
                source: BackendError::FixtureExhausted { .. },
                ..
            }
        ));
    }

    #[test]
    fn ablation_keeps_backend_bias() {
        let config = LoopConfig::new(gender_ledger(100, 100));
        let mut mock = MockGenerator::new(presets::gender(1.0, 2));
        let report = run_ablation(&config, &mut mock, &headlines()).unwrap();
        assert_eq!(report.final_counts.iter().sum::<u64>(), 200);
        // 200 draws at 98.5%: mean 197, sd ~1.72
        let male = report.final_counts[0] as f64;
        assert!((male - 197.0).abs() <= 3.0 * (200.0f64 * 0.985 * 0.015).sqrt() + 1e-9);
        assert!(!report.converged);
        assert!(report.js_div.unwrap() > 0.1);
    }

    #[test]
    fn ablation_with_unbiased_backend_is_near_uniform() {
        let config = LoopConfig::new(gender_ledger(500, 500));
        let cfg =
            MockBiasConfig::uniform(Arc::new(presets::binary_gender_schema()), 1.0, 3).unwrap();
        let report = run_ablation(&config, &mut MockGenerator::new(cfg), &headlines()).unwrap();
        assert!(report.js_div.unwrap() < 0.01);
    }

    #[test]
    fn report_json_round_trip_and_journal() {
        let config = LoopConfig::new(gender_ledger(3, 2));
        let mut mock = MockGenerator::new(presets::gender(0.5, 6));
        let report = run(&config, &mut mock, &headlines()).unwrap();
        let back = RunReport::from_json(&report.to_json()).unwrap();
        assert_eq!(back, report);
        let journal = report.trace_journal();
        assert_eq!(journal.lines().count(), report.records.len());
        assert!(journal.lines().all(|l| l.contains(TRACE_SCHEMA)));
        let mut tampered = report.clone();
        tampered.schema = "other".into();
        assert!(RunReport::from_json(&tampered.to_json()).is_err());
    }

    #[test]
    fn config_validation() {
        let mut mock = MockGenerator::new(presets::gender(1.0, 5));
        let bad = LoopConfig::new(gender_ledger(1, 1)).with_batch_size(0);
        assert!(matches!(
            run(&bad, &mut mock, &headlines()),
            Err(RunError::Config(_))
        ));
        let bad = LoopConfig::new(gender_ledger(1, 1)).with_subgroups(0);
        assert!(matches!(
            run(&bad, &mut mock, &headlines()),
            Err(RunError::Config(_))
        ));
        let ok = LoopConfig::new(gender_ledger(1, 1));
        assert!(matches!(run(&ok, &mut mock, &[]), Err(RunError::Config(_))));
    }
}
