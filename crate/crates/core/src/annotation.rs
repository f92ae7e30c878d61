//! Human annotation sets and pairwise intercoder reliability.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::attribute::AttributeSchema;
use crate::error::{Error, Result};

/// Kappa above this counts as robust agreement.
pub const ROBUST_KAPPA: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    coder_id: String,
    schema: Arc<AttributeSchema>,
    labels: BTreeMap<String, usize>,
}

impl AnnotationSet {
    pub fn new(coder_id: impl Into<String>, schema: Arc<AttributeSchema>) -> Self {
        Self {
            coder_id: coder_id.into(),
            schema,
            labels: BTreeMap::new(),
        }
    }

    /// Build from `(item, label)` pairs.
    pub fn from_pairs<'a>(
        coder_id: impl Into<String>,
        schema: Arc<AttributeSchema>,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut set = Self::new(coder_id, schema);
        for (item, label) in pairs {
            set.insert(item, label)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, item_id: impl Into<String>, label: &str) -> Result<()> {
        let item_id = item_id.into();
        let index = self.schema.require_index(label)?;
        if self.labels.contains_key(&item_id) {
            return Err(Error::Parse(format!(
                "coder {:?} labeled item {item_id:?} twice",
                self.coder_id
            )));
        }
        self.labels.insert(item_id, index);
        Ok(())
    }

    pub fn coder_id(&self) -> &str {
        &self.coder_id
    }

    pub fn schema(&self) -> &Arc<AttributeSchema> {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_of(&self, item_id: &str) -> Option<&str> {
        self.labels.get(item_id).map(|&i| self.schema.label(i))
    }

    /// Label-index pairs for items both coders annotated.
    fn paired(&self, other: &AnnotationSet) -> Result<Vec<(usize, usize)>> {
        self.schema.ensure_same(&other.schema)?;
        let pairs: Vec<_> = self
            .labels
            .iter()
            .filter_map(|(item, &a)| other.labels.get(item).map(|&b| (a, b)))
            .collect();
        if pairs.is_empty() {
            return Err(Error::EmptyIntersection);
        }
        Ok(pairs)
    }
}

pub fn percent_agreement(a: &AnnotationSet, b: &AnnotationSet) -> Result<f64> {
    let pairs = a.paired(b)?;
    let agree = pairs.iter().filter(|(x, y)| x == y).count();
    Ok(agree as f64 / pairs.len() as f64)
}

/// Cohen's kappa over the items both coders labeled. When chance agreement
/// is 1 (both coders used one identical label throughout) the result is 1.
pub fn cohen_kappa(a: &AnnotationSet, b: &AnnotationSet) -> Result<f64> {
    let pairs = a.paired(b)?;
    let n = pairs.len() as f64;
    let k = a.schema.len();
    let mut margin_a = vec![0usize; k];
    let mut margin_b = vec![0usize; k];
    let mut agree = 0usize;
    for &(x, y) in &pairs {
        margin_a[x] += 1;
        margin_b[y] += 1;
        if x == y {
            agree += 1;
        }
    }
    let p_o = agree as f64 / n;
    let p_e: f64 = margin_a
        .iter()
        .zip(&margin_b)
        .map(|(&ma, &mb)| (ma as f64 / n) * (mb as f64 / n))
        .sum();
    // p_e == 1 forces both coders onto one shared label, so p_o == 1 too
    if p_e >= 1.0 {
        return Ok(1.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

pub fn is_robust(kappa: f64) -> bool {
    kappa > ROBUST_KAPPA
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairScore {
    pub schema: String,
    pub coder_a: String,
    pub coder_b: String,
    pub items: usize,
    pub kappa: f64,
    pub agreement: f64,
    pub robust: bool,
}

/// Scores for every coder pair that shares a schema and at least one item.
pub fn pairwise_scores(sets: &[AnnotationSet]) -> Vec<PairScore> {
    let mut out = Vec::new();
    for (i, a) in sets.iter().enumerate() {
        for b in &sets[i + 1..] {
            if a.schema != b.schema {
                continue;
            }
            let (Ok(kappa), Ok(agreement)) = (cohen_kappa(a, b), percent_agreement(a, b)) else {
                continue;
            };
            let items = a
                .labels
                .keys()
                .filter(|k| b.labels.contains_key(*k))
                .count();
            out.push(PairScore {
                schema: a.schema.name().to_string(),
                coder_a: a.coder_id.clone(),
                coder_b: b.coder_id.clone(),
                items,
                kappa,
                agreement,
                robust: is_robust(kappa),
            });
        }
    }
    out
}

/// Parse `item_id,coder_id,schema_name,label` rows into one set per
/// (coder, schema). Schema names resolve against `schemas` first, then the
/// bundled codebook.
pub fn parse_annotations(
    text: &str,
    schemas: &[Arc<AttributeSchema>],
) -> Result<Vec<AnnotationSet>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut resolved: HashMap<String, Arc<AttributeSchema>> = schemas
        .iter()
        .map(|s| (s.name().to_string(), s.clone()))
        .collect();
    let mut sets: Vec<AnnotationSet> = Vec::new();
    let mut index: HashMap<(String, String), usize> = HashMap::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(Error::Parse(format!(
                "row {}: expected item_id,coder_id,schema_name,label",
                row + 1
            )));
        }
        if row == 0 && &rec[0] == "item_id" {
            continue;
        }
        let (item, coder, schema_name, label) = (&rec[0], &rec[1], &rec[2], &rec[3]);
        let schema = match resolved.get(schema_name) {
            Some(s) => s.clone(),
            None => {
                let s = Arc::new(crate::codebook::by_name(schema_name).ok_or_else(|| {
                    Error::Parse(format!("row {}: unknown schema {schema_name:?}", row + 1))
                })?);
                resolved.insert(schema_name.to_string(), s.clone());
                s
            }
        };
        let key = (coder.to_string(), schema_name.to_string());
        let slot = *index.entry(key).or_insert_with(|| {
            sets.push(AnnotationSet::new(coder, schema));
            sets.len() - 1
        });
        sets[slot].insert(item, label)?;
    }
    Ok(sets)
}

pub fn load_annotations(
    path: impl AsRef<Path>,
    schemas: &[Arc<AttributeSchema>],
) -> Result<Vec<AnnotationSet>> {
    parse_annotations(&std::fs::read_to_string(path)?, schemas)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Arc<AttributeSchema> {
        Arc::new(AttributeSchema::nominal("x", ["x", "y", "z"]).unwrap())
    }

    fn set(coder: &str, labels: &[&str]) -> AnnotationSet {
        let items: Vec<String> = (0..labels.len()).map(|i| format!("i{i}")).collect();
        AnnotationSet::from_pairs(
            coder,
            schema(),
            items.iter().map(String::as_str).zip(labels.iter().copied()),
        )
        .unwrap()
    }

    #[test]
    fn identical_sets_have_kappa_one() {
        let a = set("a", &["x", "y", "x", "z"]);
        let b = set("b", &["x", "y", "x", "z"]);
        assert_eq!(cohen_kappa(&a, &b).unwrap(), 1.0);
        assert_eq!(percent_agreement(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn checkerboard_has_kappa_zero() {
        // p_o = 2/4, marginals 1/2 each, so p_e = 1/4 + 1/4 = 1/2
        let a = set("a", &["x", "x", "y", "y"]);
        let b = set("b", &["x", "y", "x", "y"]);
        assert!(cohen_kappa(&a, &b).unwrap().abs() < 1e-12);
        assert_eq!(percent_agreement(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn agreement_counts() {
        let a = set("a", &["x", "y", "z", "x"]);
        let b = set("b", &["x", "y", "z", "y"]);
        assert_eq!(percent_agreement(&a, &b).unwrap(), 0.75);
        let c = set("c", &["y", "z", "x", "y"]);
        assert_eq!(percent_agreement(&a, &c).unwrap(), 0.0);
    }

    #[test]
    fn single_label_everywhere_is_perfect() {
        let a = set("a", &["x", "x", "x"]);
        let b = set("b", &["x", "x", "x"]);
        assert_eq!(cohen_kappa(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn robust_threshold() {
        assert!(is_robust(0.85));
        assert!(!is_robust(0.8));
        assert!(!is_robust(0.64));
    }

    #[test]
    fn disjoint_items_error() {
        let a = AnnotationSet::from_pairs("a", schema(), [("p", "x")]).unwrap();
        let b = AnnotationSet::from_pairs("b", schema(), [("q", "x")]).unwrap();
        assert!(matches!(cohen_kappa(&a, &b), Err(Error::EmptyIntersection)));
        assert!(matches!(
            percent_agreement(&a, &b),
            Err(Error::EmptyIntersection)
        ));
    }

    #[test]
    fn only_shared_items_count() {
        let a =
            AnnotationSet::from_pairs("a", schema(), [("p", "x"), ("q", "y"), ("r", "z")]).unwrap();
        let b = AnnotationSet::from_pairs("b", schema(), [("p", "x"), ("q", "y")]).unwrap();
        assert_eq!(percent_agreement(&a, &b).unwrap(), 1.0);
        assert_eq!(pairwise_scores(&[a, b])[0].items, 2);
    }

    #[test]
    fn labels_outside_schema_and_duplicates_rejected() {
        let mut a = AnnotationSet::new("a", schema());
        assert!(a.insert("p", "w").is_err());
        a.insert("p", "x").unwrap();
        assert!(a.insert("p", "y").is_err());
    }

    #[test]
    fn parse_file_groups_by_coder() {
        let text = "item_id,coder_id,schema_name,label\n\
                    img1,ann1,gender,Male\n\
                    img1,ann2,gender,Male\n\
                    img2,ann1,gender,Female\n\
                    img2,ann2,gender,Unable to distinguish\n";
        let sets = parse_annotations(text, &[]).unwrap();
        assert_eq!(sets.len(), 2);
        let scores = pairwise_scores(&sets);
        assert_eq!(scores.len(), 1);
        assert_eq!(scores[0].agreement, 0.5);
        assert!(parse_annotations("img1,ann1,nope,Male\n", &[]).is_err());
    }
}
