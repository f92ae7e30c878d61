//! Deciding which attribute a generated artifact actually shows.
//!
//! Internal belief trusts the backend's own declaration; external belief asks
//! a classifier adapter. Skin tone is handled by snapping a pre-averaged face
//! color onto the 10-swatch Monk scale.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::attribute::AttributeSchema;
use crate::error::{Error, Result};
use crate::generator::{mock_token_label, GenerationResponse};
use crate::remote::LineClient;

pub type Rgb = [u8; 3];

/// Adapter around some model that labels an artifact. Implementations state
/// their own reentrancy; `&self` callers may share one across threads only if
/// the adapter is `Sync`.
pub trait ExternalClassifier: Send {
    fn name(&self) -> &str;

    fn classify(&self, image_ref: &str, schema: &AttributeSchema) -> Result<String>;
}

pub enum BeliefSource {
    Internal,
    External(Box<dyn ExternalClassifier>),
}

impl fmt::Debug for BeliefSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BeliefSource::Internal => write!(f, "Internal"),
            BeliefSource::External(c) => write!(f, "External({})", c.name()),
        }
    }
}

impl BeliefSource {
    pub fn external(classifier: impl ExternalClassifier + 'static) -> Self {
        BeliefSource::External(Box::new(classifier))
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            BeliefSource::Internal => "internal",
            BeliefSource::External(_) => "external",
        }
    }
}

pub fn resolve_attribute(
    source: &BeliefSource,
    response: &GenerationResponse,
    schema: &AttributeSchema,
) -> Result<String> {
    match source {
        BeliefSource::Internal => response.claimed_label.clone().ok_or(Error::MissingClaim),
        BeliefSource::External(classifier) => {
            let label = classifier.classify(&response.image_ref, schema)?;
            if schema.index_of(&label).is_none() {
                return Err(Error::SchemaMismatch {
                    left: schema.name().to_string(),
                    right: format!("classifier {} returned {label:?}", classifier.name()),
                });
            }
            Ok(label)
        }
    }
}

/// Lookup table from image reference to label, e.g. offline classifier output.
#[derive(Debug, Clone, Default)]
pub struct TableClassifier {
    name: String,
    table: HashMap<String, String>,
}

impl TableClassifier {
    pub fn new(name: impl Into<String>, table: HashMap<String, String>) -> Self {
        Self {
            name: name.into(),
            table,
        }
    }

    /// `image_ref,label` rows; an optional `image_ref,label` header is skipped.
    pub fn load(name: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut table = HashMap::new();
        for rec in reader.records() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(Error::Parse("expected `image_ref,label` rows".into()));
            }
            if &rec[0] == "image_ref" {
                continue;
            }
            table.insert(rec[0].to_string(), rec[1].to_string());
        }
        Ok(Self::new(name, table))
    }
}

impl ExternalClassifier for TableClassifier {
    fn name(&self) -> &str {
        &self.name
    }

    fn classify(&self, image_ref: &str, _schema: &AttributeSchema) -> Result<String> {
        self.table
            .get(image_ref)
            .cloned()
            .ok_or_else(|| Error::Classifier(format!("{}: no entry for {image_ref:?}", self.name)))
    }
}

/// Reads the ground-truth label out of a mock generator's image token.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockTokenClassifier;

impl ExternalClassifier for MockTokenClassifier {
    fn name(&self) -> &str {
        "mock-token"
    }

    fn classify(&self, image_ref: &str, _schema: &AttributeSchema) -> Result<String> {
        mock_token_label(image_ref)
            .map(str::to_string)
            .ok_or_else(|| Error::Classifier(format!("not a mock token: {image_ref:?}")))
    }
}

#[derive(Debug, Serialize)]
struct ClassifyRequest<'a> {
    image_ref: &'a str,
    schema: &'a str,
    labels: &'a [String],
}

#[derive(Debug, Deserialize)]
struct ClassifyResponse {
    label: String,
}

/// Classifier reached over the same line protocol as remote backends:
/// `{"image_ref", "schema", "labels"}` in, `{"label"}` or `{"error"}` out.
pub struct RemoteClassifier<R, W> {
    name: String,
    client: Mutex<LineClient<R, W>>,
}

impl RemoteClassifier<std::net::TcpStream, std::net::TcpStream> {
    pub fn connect(name: impl Into<String>, endpoint: &str) -> Result<Self> {
        Ok(Self::from_client(name, LineClient::connect(endpoint)?))
    }
}

impl<R, W> RemoteClassifier<R, W> {
    pub fn from_client(name: impl Into<String>, client: LineClient<R, W>) -> Self {
        Self {
            name: name.into(),
            client: Mutex::new(client),
        }
    }
}

impl<R, W> ExternalClassifier for RemoteClassifier<R, W>
where
    R: std::io::Read + Send,
    W: std::io::Write + Send,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn classify(&self, image_ref: &str, schema: &AttributeSchema) -> Result<String> {
        let req = ClassifyRequest {
            image_ref,
            schema: schema.name(),
            labels: schema.labels(),
        };
        let mut client = self.client.lock().expect("classifier client poisoned");
        client
            .call::<_, ClassifyResponse>(&req)
            .map(|r| r.label)
            .map_err(|e| Error::Classifier(format!("{}: {e}", self.name)))
    }
}

/// Several classifiers run side by side. Their answers are reported
/// individually and never merged.
#[derive(Default)]
pub struct ClassifierPanel {
    members: Vec<Box<dyn ExternalClassifier>>,
}

impl ClassifierPanel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, classifier: impl ExternalClassifier + 'static) -> Self {
        self.members.push(Box::new(classifier));
        self
    }

    pub fn classify_all(
        &self,
        image_ref: &str,
        schema: &AttributeSchema,
    ) -> Vec<(String, Result<String>)> {
        self.members
            .iter()
            .map(|c| {
                let res = c.classify(image_ref, schema).and_then(|label| {
                    schema.require_index(&label)?;
                    Ok(label)
                });
                (c.name().to_string(), res)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MonkGroup {
    Light,
    Medium,
    Dark,
}

impl MonkGroup {
    pub fn label(self) -> &'static str {
        match self {
            MonkGroup::Light => "Light",
            MonkGroup::Medium => "Medium",
            MonkGroup::Dark => "Dark",
        }
    }
}

pub fn monk_group(index: u8) -> Result<MonkGroup> {
    match index {
        1..=3 => Ok(MonkGroup::Light),
        4..=6 => Ok(MonkGroup::Medium),
        7..=10 => Ok(MonkGroup::Dark),
        _ => Err(Error::InvalidParameter(format!(
            "Monk index {index} outside 1..=10"
        ))),
    }
}

pub trait ColorMetric {
    fn distance(&self, a: Rgb, b: Rgb) -> f64;
}

/// Euclidean distance over 8-bit sRGB channels.
#[derive(Debug, Clone, Copy, Default)]
pub struct EuclideanRgb;

impl ColorMetric for EuclideanRgb {
    fn distance(&self, a: Rgb, b: Rgb) -> f64 {
        let sq: i32 = a
            .iter()
            .zip(&b)
            .map(|(&x, &y)| {
                let d = i32::from(x) - i32::from(y);
                d * d
            })
            .sum();
        f64::from(sq).sqrt()
    }
}

const DEFAULT_MONK_SCALE: &str = include_str!("../data/monk_scale.csv");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonkScale {
    swatches: [Rgb; 10],
}

impl Default for MonkScale {
    fn default() -> Self {
        Self::parse(DEFAULT_MONK_SCALE).expect("bundled Monk scale parses")
    }
}

impl MonkScale {
    pub fn new(swatches: [Rgb; 10]) -> Self {
        Self { swatches }
    }

    /// Swatch for 1-based `index`.
    pub fn swatch(&self, index: u8) -> Option<Rgb> {
        (1..=10)
            .contains(&index)
            .then(|| self.swatches[usize::from(index) - 1])
    }

    pub fn swatches(&self) -> &[Rgb; 10] {
        &self.swatches
    }

    /// Ten `index, R, G, B` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut slots: [Option<Rgb>; 10] = [None; 10];
        for rec in reader.records() {
            let rec = rec?;
            if rec.len() != 4 {
                return Err(Error::Parse("expected `index, R, G, B`".into()));
            }
            let index: usize = rec[0]
                .parse()
                .map_err(|_| Error::Parse(format!("bad swatch index {:?}", &rec[0])))?;
            if !(1..=10).contains(&index) {
                return Err(Error::Parse(format!("swatch index {index} outside 1..=10")));
            }
            let mut rgb = [0u8; 3];
            for (c, field) in rgb.iter_mut().zip(rec.iter().skip(1)) {
                *c = field
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad channel value {field:?}")))?;
            }
            if slots[index - 1].replace(rgb).is_some() {
                return Err(Error::Parse(format!("swatch {index} listed twice")));
            }
        }
        let mut swatches = [[0u8; 3]; 10];
        for (i, slot) in slots.iter().enumerate() {
            swatches[i] = slot.ok_or_else(|| Error::Parse(format!("swatch {} missing", i + 1)))?;
        }
        Ok(Self { swatches })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn quantize(&self, color: Rgb) -> u8 {
        quantize_skin_tone(self, color, &EuclideanRgb)
    }
}

/// Nearest swatch (1-based) under `metric`; ties go to the lower index.
pub fn quantize_skin_tone(scale: &MonkScale, mean_color: Rgb, metric: &dyn ColorMetric) -> u8 {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (i, &swatch) in scale.swatches.iter().enumerate() {
        let d = metric.distance(mean_color, swatch);
        if d < best_dist {
            best = i;
            best_dist = d;
        }
    }
    (best + 1) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::presets;

    fn response(claim: Option<&str>, image_ref: &str) -> GenerationResponse {
        GenerationResponse {
            claimed_label: claim.map(str::to_string),
            image_ref: image_ref.into(),
        }
    }

    #[test]
    fn internal_returns_claim() {
        let schema = presets::binary_gender_schema();
        let label = resolve_attribute(
            &BeliefSource::Internal,
            &response(Some("female"), "x"),
            &schema,
        );
        assert_eq!(label.unwrap(), "female");
        assert!(matches!(
            resolve_attribute(&BeliefSource::Internal, &response(None, "x"), &schema),
            Err(Error::MissingClaim)
        ));
    }

    #[test]
    fn external_uses_classifier_and_checks_schema() {
        let schema = crate::codebook::race();
        let table = HashMap::from([
            ("img-1".to_string(), "Black".to_string()),
            ("img-2".to_string(), "unknown".to_string()),
        ]);
        let source = BeliefSource::external(TableClassifier::new("stub", table));
        assert_eq!(
            resolve_attribute(&source, &response(Some("White"), "img-1"), &schema).unwrap(),
            "Black"
        );
        assert!(matches!(
            resolve_attribute(&source, &response(None, "img-2"), &schema),
            Err(Error::SchemaMismatch { .. })
        ));
        assert!(matches!(
            resolve_attribute(&source, &response(None, "img-3"), &schema),
            Err(Error::Classifier(_))
        ));
    }

    #[test]
    fn panel_keeps_disagreeing_answers_apart() {
        let schema = crate::codebook::age();
        let a = TableClassifier::new("vit-a", HashMap::from([("i".into(), "19-35".into())]));
        let b = TableClassifier::new("vit-b", HashMap::from([("i".into(), "1-18".into())]));
        let out = ClassifierPanel::new()
            .with(a)
            .with(b)
            .classify_all("i", &schema);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].1.as_deref().unwrap(), "19-35");
        assert_eq!(out[1].1.as_deref().unwrap(), "1-18");
    }

    #[test]
    fn monk_groups() {
        assert_eq!(monk_group(1).unwrap(), MonkGroup::Light);
        assert_eq!(monk_group(3).unwrap(), MonkGroup::Light);
        assert_eq!(monk_group(4).unwrap(), MonkGroup::Medium);
        assert_eq!(monk_group(5).unwrap(), MonkGroup::Medium);
        assert_eq!(monk_group(7).unwrap(), MonkGroup::Dark);
        assert_eq!(monk_group(10).unwrap(), MonkGroup::Dark);
        assert!(monk_group(0).is_err());
        assert!(monk_group(11).is_err());
    }

    #[test]
    fn swatch_seven_maps_to_seven() {
        let scale = MonkScale::default();
        assert_eq!(scale.quantize(scale.swatch(7).unwrap()), 7);
    }

    #[test]
    fn equidistant_color_goes_to_lower_index() {
        let scale = MonkScale::new([
            [0, 0, 0],
            [10, 0, 0],
            [200, 200, 200],
            [201, 200, 200],
            [202, 200, 200],
            [203, 200, 200],
            [204, 200, 200],
            [205, 200, 200],
            [206, 200, 200],
            [207, 200, 200],
        ]);
        assert_eq!(scale.quantize([5, 0, 0]), 1);
    }

    #[test]
    fn scale_file_errors() {
        assert!(MonkScale::parse("1, 0, 0, 0\n").is_err());
        let dup = DEFAULT_MONK_SCALE.replace("2, 243", "1, 243");
        assert!(MonkScale::parse(&dup).is_err());
        assert!(MonkScale::parse(&DEFAULT_MONK_SCALE.replace("246", "300")).is_err());
    }

    #[test]
    fn sweep_reaches_every_group() {
        let scale = MonkScale::default();
        let mut groups = std::collections::HashSet::new();
        for v in (0..=255u8).rev() {
            groups.insert(monk_group(scale.quantize([v, v, v])).unwrap());
        }
        assert_eq!(groups.len(), 3);
    }
}
