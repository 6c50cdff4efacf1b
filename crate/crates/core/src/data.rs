//! Tabular dataset ingestion and the bundled synthetic logistic dataset.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: FeatureKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub features: Vec<ColumnSpec>,
    pub label: String,
}

impl Schema {
    pub fn kinds(&self) -> Vec<FeatureKind> {
        self.features.iter().map(|c| c.kind).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|c| c.name.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be in [0, 1] and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-column affine map; discrete columns keep their raw values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.means.iter().zip(&self.scales))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: Schema,
    /// Standardized feature rows.
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: Split,
    pub standardizer: Standardizer,
    pub fingerprint: String,
}

impl Dataset {
    pub fn num_features(&self) -> usize {
        self.schema.features.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn rows(&self, indices: &[usize]) -> Vec<Vec<f64>> {
        indices.iter().map(|&i| self.features[i].clone()).collect()
    }

    pub fn train_rows(&self) -> Vec<Vec<f64>> {
        self.rows(&self.split.train)
    }

    pub fn validation_rows(&self) -> Vec<Vec<f64>> {
        self.rows(&self.split.validation)
    }

    pub fn test_rows(&self) -> Vec<Vec<f64>> {
        self.rows(&self.split.test)
    }

    /// One-hot label distributions for the given rows.
    pub fn one_hot(&self, indices: &[usize]) -> Vec<Vec<f64>> {
        indices
            .iter()
            .map(|&i| {
                let mut t = vec![0.0; self.num_classes()];
                t[self.labels[i]] = 1.0;
                t
            })
            .collect()
    }

    /// Parses a delimited file of raw instances (schema feature columns; the label
    /// column is ignored if present) and standardizes them like the training data.
    pub fn parse_instances(&self, bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
        let headers = reader.headers()?.clone();
        let positions = feature_positions(&self.schema, &headers)?;
        let mut out = Vec::new();
        for (r, record) in reader.records().enumerate() {
            let record = record?;
            let raw = parse_row(&self.schema, &positions, &record, r + 1)?;
            out.push(self.standardizer.apply(&raw));
        }
        Ok(out)
    }
}

fn feature_positions(schema: &Schema, headers: &csv::StringRecord) -> Result<Vec<usize>> {
    schema
        .features
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == c.name)
                .ok_or_else(|| Error::Schema(format!("missing column {:?}", c.name)))
        })
        .collect()
}

fn parse_row(schema: &Schema, positions: &[usize], record: &csv::StringRecord, row: usize) -> Result<Vec<f64>> {
    positions
        .iter()
        .zip(&schema.features)
        .map(|(&p, col)| {
            let cell = record.get(p).unwrap_or("");
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Data {
                    row,
                    column: col.name.clone(),
                    message: format!("cannot parse {cell:?} as a finite number"),
                })
        })
        .collect()
}

/// Content fingerprint of the raw bytes and the schema.
pub fn fingerprint(bytes: &[u8], schema: &Schema) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.update(serde_json::to_vec(schema)?);
    Ok(hex::encode(hasher.finalize()))
}

fn split_indices(n: usize, fractions: &SplitFractions, seed: u64) -> Split {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    let n_train = (fractions.train * n as f64).floor() as usize;
    let n_val = ((fractions.validation * n as f64).floor() as usize).min(n - n_train);
    let mut split = Split {
        train: order[..n_train].to_vec(),
        validation: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    split.train.sort_unstable();
    split.validation.sort_unstable();
    split.test.sort_unstable();
    split
}

/// Parses, validates, splits and standardizes a delimited dataset with a header row.
pub fn ingest_bytes(bytes: &[u8], schema: &Schema, fractions: &SplitFractions, seed: u64) -> Result<Dataset> {
    fractions.validate()?;
    if schema.features.is_empty() {
        return Err(Error::Schema("schema declares no feature columns".into()));
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let headers = reader.headers()?.clone();
    let positions = feature_positions(schema, &headers)?;
    let label_pos = headers
        .iter()
        .position(|h| h == schema.label)
        .ok_or_else(|| Error::Schema(format!("missing label column {:?}", schema.label)))?;

    let mut raw_rows = Vec::new();
    let mut raw_labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        raw_rows.push(parse_row(schema, &positions, &record, r + 1)?);
        let label = record.get(label_pos).unwrap_or("").to_string();
        if label.is_empty() {
            return Err(Error::Data {
                row: r + 1,
                column: schema.label.clone(),
                message: "empty label".into(),
            });
        }
        raw_labels.push(label);
    }
    if raw_rows.is_empty() {
        return Err(Error::EmptyDataset);
    }

    // numeric labels sort numerically, anything else lexicographically
    let numeric = raw_labels.iter().all(|l| l.parse::<f64>().is_ok());
    let mut class_names: Vec<String> = raw_labels.clone();
    if numeric {
        class_names.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    } else {
        class_names.sort();
    }
    class_names.dedup();
    if class_names.len() < 2 {
        return Err(Error::Schema(format!(
            "label column {:?} has a single class",
            schema.label
        )));
    }
    let lookup: BTreeMap<&str, usize> = class_names.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let labels = raw_labels.iter().map(|l| lookup[l.as_str()]).collect();

    let split = split_indices(raw_rows.len(), fractions, seed);
    if split.train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let d = schema.features.len();
    let mut means = vec![0.0; d];
    let mut scales = vec![1.0; d];
    for (j, col) in schema.features.iter().enumerate() {
        if col.kind == FeatureKind::Continuous {
            let n = split.train.len() as f64;
            let mean = split.train.iter().map(|&i| raw_rows[i][j]).sum::<f64>() / n;
            let var = split
                .train
                .iter()
                .map(|&i| (raw_rows[i][j] - mean).powi(2))
                .sum::<f64>()
                / n;
            means[j] = mean;
            if var > 0.0 {
                scales[j] = var.sqrt();
            }
        }
    }
    let standardizer = Standardizer { means, scales };
    let features = raw_rows.iter().map(|r| standardizer.apply(r)).collect();
    Ok(Dataset {
        schema: schema.clone(),
        features,
        labels,
        class_names,
        split,
        standardizer,
        fingerprint: fingerprint(bytes, schema)?,
    })
}

pub fn ingest(path: &Path, schema: &Schema, fractions: &SplitFractions, seed: u64) -> Result<Dataset> {
    ingest_bytes(&std::fs::read(path)?, schema, fractions, seed)
}

/// Parameters of the bundled synthetic binary classification dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub instances: usize,
    pub features: usize,
    /// Trailing features with a zero coefficient.
    pub irrelevant_features: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            instances: 5000,
            features: 8,
            irrelevant_features: 1,
            seed: 0,
        }
    }
}

/// Generated data with the logistic model that labels it.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub csv: String,
    pub schema: Schema,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

impl SyntheticData {
    /// `P(label = 1 | x)` under the generating model, for raw (unstandardized) features.
    pub fn probability(&self, raw: &[f64]) -> f64 {
        let z = self.intercept + self.coefficients.iter().zip(raw).map(|(w, x)| w * x).sum::<f64>();
        1.0 / (1.0 + (-z).exp())
    }
}

/// Every fourth feature is a three-level discrete feature centered at 1; the
/// rest are standard normal. Relevant coefficients alternate in sign with
/// decaying magnitude.
pub fn synthetic_logistic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.features == 0 || spec.irrelevant_features >= spec.features {
        return Err(Error::InvalidArgument(format!(
            "need at least one relevant feature, got {} of {}",
            spec.features - spec.irrelevant_features.min(spec.features),
            spec.features
        )));
    }
    if spec.instances == 0 {
        return Err(Error::EmptyDataset);
    }
    let d = spec.features;
    let relevant = d - spec.irrelevant_features;
    let kinds: Vec<FeatureKind> = (0..d)
        .map(|j| {
            if j % 4 == 3 {
                FeatureKind::Discrete
            } else {
                FeatureKind::Continuous
            }
        })
        .collect();
    let coefficients: Vec<f64> = (0..d)
        .map(|j| {
            if j >= relevant {
                0.0
            } else {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                sign * 2.5 / (1.0 + 0.4 * j as f64)
            }
        })
        .collect();
    let intercept = 0.0;
    // discrete features enter the logit through (x - 1)
    let offset: f64 = (0..d)
        .filter(|&j| kinds[j] == FeatureKind::Discrete)
        .map(|j| coefficients[j])
        .sum();
    let intercept = intercept - offset;

    let mut rng = seeded(spec.seed);
    let names: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    let mut csv = names.join(",");
    csv.push_str(",label\n");
    for _ in 0..spec.instances {
        let x: Vec<f64> = kinds
            .iter()
            .map(|k| match k {
                FeatureKind::Continuous => StandardNormal.sample(&mut rng),
                FeatureKind::Discrete => rng.random_range(0..3) as f64,
            })
            .collect();
        let z = intercept + coefficients.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>();
        let p = 1.0 / (1.0 + (-z).exp());
        let label = u8::from(rng.random::<f64>() < p);
        for v in &x {
            csv.push_str(&format!("{v},"));
        }
        csv.push_str(&format!("{label}\n"));
    }
    let schema = Schema {
        features: names
            .into_iter()
            .zip(kinds)
            .map(|(name, kind)| ColumnSpec { name, kind })
            .collect(),
        label: "label".into(),
    };
    Ok(SyntheticData {
        csv,
        schema,
        coefficients,
        intercept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_schema() -> Schema {
        Schema {
            features: vec![
                ColumnSpec {
                    name: "a".into(),
                    kind: FeatureKind::Continuous,
                },
                ColumnSpec {
                    name: "b".into(),
                    kind: FeatureKind::Discrete,
                },
            ],
            label: "y".into(),
        }
    }

    #[test]
    fn ingests_toy_file() {
        let text = "a,b,y\n1.0,0,cat\n2.0,1,dog\n3.0,1,cat\n";
        let ds = ingest_bytes(text.as_bytes(), &toy_schema(), &SplitFractions::default(), 0).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.class_names, vec!["cat", "dog"]);
        assert_eq!(ds.labels, vec![0, 1, 0]);
        assert_eq!(
            ds.split.train.len() + ds.split.validation.len() + ds.split.test.len(),
            3
        );
        // discrete column untouched
        assert_eq!(
            ds.features.iter().map(|r| r[1]).collect::<Vec<_>>(),
            vec![0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn standardizes_with_train_statistics_only() {
        let data = synthetic_logistic(&SyntheticSpec {
            instances: 400,
            ..Default::default()
        })
        .unwrap();
        let ds = ingest_bytes(data.csv.as_bytes(), &data.schema, &SplitFractions::default(), 3).unwrap();
        for (j, kind) in data.schema.kinds().iter().enumerate() {
            let col: Vec<f64> = ds.split.train.iter().map(|&i| ds.features[i][j]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            if *kind == FeatureKind::Continuous {
                assert!(mean.abs() < 1e-9);
                let var = col.iter().map(|v| v * v).sum::<f64>() / col.len() as f64;
                assert!((var - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fingerprint_is_stable_and_content_sensitive() {
        let text = "a,b,y\n1.0,0,0\n2.0,1,1\n";
        let a = ingest_bytes(text.as_bytes(), &toy_schema(), &SplitFractions::default(), 0).unwrap();
        let b = ingest_bytes(text.as_bytes(), &toy_schema(), &SplitFractions::default(), 0).unwrap();
        assert_eq!(a.fingerprint, b.fingerprint);
        let c = ingest_bytes(
            "a,b,y\n1.0,0,0\n2.5,1,1\n".as_bytes(),
            &toy_schema(),
            &SplitFractions::default(),
            0,
        )
        .unwrap();
        assert_ne!(a.fingerprint, c.fingerprint);
    }

    #[test]
    fn reports_errors_with_location() {
        let schema = toy_schema();
        let fr = SplitFractions::default();
        let missing = ingest_bytes("a,y\n1,0\n".as_bytes(), &schema, &fr, 0).unwrap_err();
        assert!(matches!(missing, Error::Schema(_)));
        let bad = ingest_bytes("a,b,y\n1,0,0\n2,x,1\n".as_bytes(), &schema, &fr, 0).unwrap_err();
        match bad {
            Error::Data { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected {other:?}"),
        }
        let single = ingest_bytes("a,b,y\n1,0,0\n2,1,0\n".as_bytes(), &schema, &fr, 0).unwrap_err();
        assert!(matches!(single, Error::Schema(_)));
        let bad_split = SplitFractions {
            train: 0.5,
            validation: 0.1,
            test: 0.1,
        };
        assert!(ingest_bytes("a,b,y\n1,0,0\n2,1,1\n".as_bytes(), &schema, &bad_split, 0).is_err());
    }

    #[test]
    fn synthetic_dataset_shape_and_determinism() {
        let spec = SyntheticSpec {
            instances: 200,
            features: 12,
            irrelevant_features: 2,
            seed: 4,
        };
        let a = synthetic_logistic(&spec).unwrap();
        let b = synthetic_logistic(&spec).unwrap();
        assert_eq!(a.csv, b.csv);
        assert_eq!(a.coefficients.len(), 12);
        assert_eq!(&a.coefficients[10..], &[0.0, 0.0]);
        assert_eq!(a.csv.lines().count(), 201);
        let ds = ingest_bytes(a.csv.as_bytes(), &a.schema, &SplitFractions::default(), 0).unwrap();
        assert_eq!(ds.num_features(), 12);
        assert_eq!(ds.num_classes(), 2);
        let parsed = ds.parse_instances(a.csv.as_bytes()).unwrap();
        assert_eq!(parsed, ds.features);
    }
}
