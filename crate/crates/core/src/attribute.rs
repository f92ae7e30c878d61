//! Attribute schemas, target distributions and the quota ledger.
//!
//! A [`TargetSpec`] is either a fractional distribution or a set of explicit
//! per-label counts. [`quantize_target`] turns it into a [`QuotaLedger`] whose
//! integer counts sum exactly to the requested number of generations, using
//! largest-remainder apportionment with ties going to the lower label index.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::control::{GenerationRecord, Outcome};
use crate::error::{Error, Result};

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Nominal,
    /// Bin index doubles as the ground-distance coordinate.
    Ordinal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema")]
pub struct AttributeSchema {
    name: String,
    kind: AttributeKind,
    labels: Vec<String>,
}

#[derive(Deserialize)]
struct RawSchema {
    name: String,
    kind: AttributeKind,
    labels: Vec<String>,
}

impl TryFrom<RawSchema> for AttributeSchema {
    type Error = Error;

    fn try_from(raw: RawSchema) -> Result<Self> {
        AttributeSchema::new(raw.name, raw.kind, raw.labels)
    }
}

impl AttributeSchema {
    pub fn new<S: Into<String>>(
        name: impl Into<String>,
        kind: AttributeKind,
        labels: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let name = name.into();
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if name.trim().is_empty() {
            return Err(Error::InvalidSchema("schema name is empty".into()));
        }
        if labels.len() < 2 {
            return Err(Error::InvalidSchema(format!(
                "schema {name:?} needs at least 2 labels, got {}",
                labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for label in &labels {
            if label.is_empty() {
                return Err(Error::InvalidSchema(format!(
                    "schema {name:?} has an empty label"
                )));
            }
            if !seen.insert(label.as_str()) {
                return Err(Error::InvalidSchema(format!(
                    "schema {name:?} repeats label {label:?}"
                )));
            }
        }
        Ok(Self { name, kind, labels })
    }

    pub fn nominal<S: Into<String>>(
        name: impl Into<String>,
        labels: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        Self::new(name, AttributeKind::Nominal, labels)
    }

    pub fn ordinal<S: Into<String>>(
        name: impl Into<String>,
        labels: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        Self::new(name, AttributeKind::Ordinal, labels)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> AttributeKind {
        self.kind
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn require_index(&self, label: &str) -> Result<usize> {
        self.index_of(label).ok_or_else(|| Error::UnknownLabel {
            schema: self.name.clone(),
            label: label.to_string(),
        })
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub(crate) fn ensure_same(&self, other: &AttributeSchema) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::SchemaMismatch {
                left: self.name.clone(),
                right: other.name.clone(),
            })
        }
    }
}

/// Desired per-label mass: either fractions summing to one or exact counts.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetMass {
    Weights(Vec<f64>),
    Counts(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    schema: Arc<AttributeSchema>,
    mass: TargetMass,
}

impl TargetSpec {
    pub fn weights(schema: Arc<AttributeSchema>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != schema.len() {
            return Err(Error::InvalidTarget(format!(
                "{} weights for {} labels",
                weights.len(),
                schema.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidTarget(
                "weights must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidTarget(format!(
                "weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self {
            schema,
            mass: TargetMass::Weights(weights),
        })
    }

    pub fn counts(schema: Arc<AttributeSchema>, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != schema.len() {
            return Err(Error::InvalidTarget(format!(
                "{} counts for {} labels",
                counts.len(),
                schema.len()
            )));
        }
        Ok(Self {
            schema,
            mass: TargetMass::Counts(counts),
        })
    }

    pub fn uniform(schema: Arc<AttributeSchema>) -> Self {
        let k = schema.len();
        Self {
            schema,
            mass: TargetMass::Weights(vec![1.0 / k as f64; k]),
        }
    }

    /// Weights looked up by label name; labels not mentioned get zero.
    pub fn from_label_weights<'a>(
        schema: Arc<AttributeSchema>,
        pairs: impl IntoIterator<Item = (&'a str, f64)>,
    ) -> Result<Self> {
        let mut weights = vec![0.0; schema.len()];
        for (label, w) in pairs {
            weights[schema.require_index(label)?] = w;
        }
        Self::weights(schema, weights)
    }

    pub fn schema(&self) -> &Arc<AttributeSchema> {
        &self.schema
    }

    pub fn mass(&self) -> &TargetMass {
        &self.mass
    }

    /// Total implied by explicit counts, if any.
    pub fn explicit_total(&self) -> Option<u64> {
        match &self.mass {
            TargetMass::Counts(c) => Some(c.iter().sum()),
            TargetMass::Weights(_) => None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: TargetFile = toml::from_str(text)?;
        file.try_into()
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(&TargetFile::from(self)).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// On-disk form of a target spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetFile {
    pub name: String,
    pub kind: AttributeKind,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<u64>>,
}

impl TryFrom<TargetFile> for TargetSpec {
    type Error = Error;

    fn try_from(file: TargetFile) -> Result<Self> {
        let schema = Arc::new(AttributeSchema::new(file.name, file.kind, file.labels)?);
        match (file.weights, file.counts) {
            (Some(w), None) => TargetSpec::weights(schema, w),
            (None, Some(c)) => TargetSpec::counts(schema, c),
            (Some(_), Some(_)) => Err(Error::InvalidTarget(
                "give either `weights` or `counts`, not both".into(),
            )),
            (None, None) => Err(Error::InvalidTarget("missing `weights` or `counts`".into())),
        }
    }
}

impl From<&TargetSpec> for TargetFile {
    fn from(spec: &TargetSpec) -> Self {
        let (weights, counts) = match &spec.mass {
            TargetMass::Weights(w) => (Some(w.clone()), None),
            TargetMass::Counts(c) => (None, Some(c.clone())),
        };
        TargetFile {
            name: spec.schema.name.clone(),
            kind: spec.schema.kind,
            labels: spec.schema.labels.clone(),
            weights,
            counts,
        }
    }
}

/// Apportion `n` generations over the bins of `spec`.
pub fn quantize_target(spec: &TargetSpec, n: u64) -> Result<QuotaLedger> {
    if n == 0 {
        return Err(Error::InvalidParameter(
            "number of generations must be positive".into(),
        ));
    }
    if spec.schema.is_empty() {
        return Err(Error::InvalidSchema("empty schema".into()));
    }
    let counts = match &spec.mass {
        TargetMass::Counts(counts) => {
            let actual: u64 = counts.iter().sum();
            if actual != n {
                return Err(Error::CountSumMismatch {
                    expected: n,
                    actual,
                });
            }
            counts.clone()
        }
        TargetMass::Weights(weights) => largest_remainder(weights, n),
    };
    Ok(QuotaLedger::new(spec.schema.clone(), counts))
}

/// Hamilton apportionment: floor every quota, hand the leftover units to the
/// largest fractional remainders, ties to the lower index.
pub(crate) fn largest_remainder(weights: &[f64], n: u64) -> Vec<u64> {
    let total: f64 = weights.iter().sum();
    let mut counts = Vec::with_capacity(weights.len());
    let mut remainders = Vec::with_capacity(weights.len());
    for &w in weights {
        let mut quota = n as f64 * w / total;
        // absorb float noise so integral quotas stay integral
        let nearest = quota.round();
        if (quota - nearest).abs() <= 1e-9 * nearest.max(1.0) {
            quota = nearest;
        }
        let floor = quota.floor();
        counts.push(floor as u64);
        remainders.push(quota - floor);
    }
    let assigned: u64 = counts.iter().sum();
    let leftover = n.saturating_sub(assigned) as usize;
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| remainders[b].total_cmp(&remainders[a]).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(leftover) {
        counts[i] += 1;
    }
    counts
}

/// Remaining per-label counts. Mutation is not synchronized; callers own that.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuotaLedger {
    schema: Arc<AttributeSchema>,
    target: Vec<u64>,
    remaining: Vec<u64>,
    total_target: u64,
    accepted: u64,
}

impl QuotaLedger {
    pub fn new(schema: Arc<AttributeSchema>, counts: Vec<u64>) -> Self {
        assert_eq!(schema.len(), counts.len(), "ledger width must match schema");
        let total_target = counts.iter().sum();
        Self {
            schema,
            target: counts.clone(),
            remaining: counts,
            total_target,
            accepted: 0,
        }
    }

    pub fn schema(&self) -> &Arc<AttributeSchema> {
        &self.schema
    }

    pub fn remaining(&self) -> &[u64] {
        &self.remaining
    }

    pub fn remaining_for(&self, label: &str) -> Option<u64> {
        self.schema.index_of(label).map(|i| self.remaining[i])
    }

    pub fn target(&self) -> &[u64] {
        &self.target
    }

    pub fn total_target(&self) -> u64 {
        self.total_target
    }

    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    pub fn remaining_total(&self) -> u64 {
        self.remaining.iter().sum()
    }

    pub fn is_converged(&self) -> bool {
        self.remaining.iter().all(|&c| c == 0)
    }

    pub fn has_remaining(&self, index: usize) -> bool {
        self.remaining.get(index).is_some_and(|&c| c > 0)
    }

    pub fn decrement(&mut self, index: usize) -> Result<()> {
        let slot = self
            .remaining
            .get_mut(index)
            .ok_or_else(|| Error::InvalidParameter(format!("bin index {index} out of range")))?;
        if *slot == 0 {
            return Err(Error::DepletedBin(self.schema.label(index).to_string()));
        }
        *slot -= 1;
        self.accepted += 1;
        debug_assert_eq!(self.remaining_total() + self.accepted, self.total_target);
        Ok(())
    }

    pub fn decrement_label(&mut self, label: &str) -> Result<()> {
        let index = self.schema.require_index(label)?;
        self.decrement(index)
    }

    /// Target expressed as fractions of the total.
    pub fn target_weights(&self) -> Vec<f64> {
        let n = self.total_target.max(1) as f64;
        self.target.iter().map(|&c| c as f64 / n).collect()
    }

    pub fn target_histogram(&self) -> Histogram {
        Histogram {
            schema: self.schema.clone(),
            counts: self.target.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    schema: Arc<AttributeSchema>,
    counts: Vec<u64>,
}

impl Histogram {
    pub fn zeros(schema: Arc<AttributeSchema>) -> Self {
        let counts = vec![0; schema.len()];
        Self { schema, counts }
    }

    pub fn from_counts(schema: Arc<AttributeSchema>, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != schema.len() {
            return Err(Error::InvalidParameter(format!(
                "{} counts for {} labels",
                counts.len(),
                schema.len()
            )));
        }
        Ok(Self { schema, counts })
    }

    pub fn schema(&self) -> &Arc<AttributeSchema> {
        &self.schema
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, label: &str) -> Option<u64> {
        self.schema.index_of(label).map(|i| self.counts[i])
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, index: usize) {
        self.counts[index] += 1;
    }

    pub fn add_label(&mut self, label: &str) -> Result<()> {
        let i = self.schema.require_index(label)?;
        self.counts[i] += 1;
        Ok(())
    }

    /// Counts sorted descending; handy when only the multiset matters.
    pub fn sorted_counts(&self) -> Vec<u64> {
        let mut c = self.counts.clone();
        c.sort_unstable_by(|a, b| b.cmp(a));
        c
    }

    /// `label,count` rows with a header line.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["label", "count"])?;
        for (label, count) in self.schema.labels().iter().zip(&self.counts) {
            w.write_record([label.as_str(), &count.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Parse `label,count` rows. The header row is optional. When no schema is
    /// given, a nominal one is built from the labels in file order.
    pub fn from_csv(text: &str, schema: Option<Arc<AttributeSchema>>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(Error::Parse(format!(
                    "row {}: expected `label,count`",
                    i + 1
                )));
            }
            if i == 0 && &rec[0] == "label" && &rec[1] == "count" {
                continue;
            }
            let count: u64 = rec[1]
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: bad count {:?}", i + 1, &rec[1])))?;
            rows.push((rec[0].to_string(), count));
        }
        let schema = match schema {
            Some(s) => s,
            None => Arc::new(AttributeSchema::nominal(
                "histogram",
                rows.iter().map(|(l, _)| l.clone()),
            )?),
        };
        let mut counts = vec![0; schema.len()];
        for (label, count) in rows {
            counts[schema.require_index(&label)?] += count;
        }
        Ok(Self { schema, counts })
    }
}

impl fmt::Display for Histogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .schema
            .labels()
            .iter()
            .zip(&self.counts)
            .map(|(l, c)| format!("{l}:{c}"))
            .collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

/// Which label of a record to count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    /// What the backend declared.
    Claimed,
    /// What the belief resolver decided.
    Believed,
}

/// Histogram over accepted records only; rejected and exhausted attempts are
/// skipped, as are accepted records that carry no label of the requested kind.
pub fn histogram_of(
    schema: Arc<AttributeSchema>,
    records: &[GenerationRecord],
    which: LabelSource,
) -> Result<Histogram> {
    let mut hist = Histogram::zeros(schema.clone());
    for record in records {
        if record.attribute != schema.name() {
            return Err(Error::SchemaMismatch {
                left: schema.name().to_string(),
                right: record.attribute.clone(),
            });
        }
        if record.outcome != Outcome::Accepted {
            continue;
        }
        let label = match which {
            LabelSource::Claimed => record.claimed.as_deref(),
            LabelSource::Believed => record.believed.as_deref(),
        };
        if let Some(label) = label {
            hist.add_label(label)?;
        }
    }
    Ok(hist)
}
