//! Layer-wise probing: route a tap's feature maps straight into the model's
//! frozen classifier to get that layer's own prediction.
//!
//! The probe head is global average pooling, a channel adaptation when the
//! tap width differs from the classifier width, and the classifier's dense
//! sigmoid. Nothing is fitted per tap.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::fmt::fmt_f64;
use crate::model::{ActivationStore, ModelGraph, TapPoint};
use crate::stats::extract_feature_means;
use crate::tensor::{self, Tensor};

/// How a tap's `c_t` channel means are mapped onto a `d_f`-dim classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adaptation {
    Direct,
    /// Mean of each consecutive block of `k` channels (`c_t == k * d_f`).
    GroupAverage(usize),
    /// The channel vector repeated `k` times (`d_f == k * c_t`).
    Tile(usize),
}

impl Adaptation {
    pub fn resolve(channels: usize, classifier_dim: usize) -> Result<Self> {
        let unsupported = Error::UnsupportedTapShape {
            channels,
            classifier_dim,
        };
        if channels == 0 || classifier_dim == 0 {
            return Err(unsupported);
        }
        if channels == classifier_dim {
            Ok(Adaptation::Direct)
        } else if channels % classifier_dim == 0 {
            Ok(Adaptation::GroupAverage(channels / classifier_dim))
        } else if classifier_dim % channels == 0 {
            Ok(Adaptation::Tile(classifier_dim / channels))
        } else {
            Err(unsupported)
        }
    }
}

pub fn adapt_channels(v: &[f64], classifier_dim: usize) -> Result<Vec<f64>> {
    Ok(match Adaptation::resolve(v.len(), classifier_dim)? {
        Adaptation::Direct => v.to_vec(),
        Adaptation::GroupAverage(k) => v
            .chunks_exact(k)
            .map(|block| {
                let mut s = 0f64;
                for x in block {
                    s += x;
                }
                s / k as f64
            })
            .collect(),
        Adaptation::Tile(k) => {
            let mut out = Vec::with_capacity(classifier_dim);
            for _ in 0..k {
                out.extend_from_slice(v);
            }
            out
        }
    })
}

/// The classifier's dense layer, detached from the trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ProbeHead {
    pub fn from_model(model: &ModelGraph) -> Self {
        let (weights, bias) = model.classifier_params();
        Self {
            weights: weights.to_vec(),
            bias,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Pre-sigmoid logit for one captured tensor (`n == 1`).
    pub fn logit(&self, activation: &Tensor) -> Result<f64> {
        self.logit_from_means(&tensor::global_avg_pool(single(activation)?))
    }

    pub fn logit_from_means(&self, means: &[f64]) -> Result<f64> {
        let v = adapt_channels(means, self.dim())?;
        tensor::dense_logit(&v, &self.weights, self.bias)
    }

    pub fn probability(&self, activation: &Tensor) -> Result<f64> {
        self.probability_from_means(&tensor::global_avg_pool(single(activation)?))
    }

    pub fn probability_from_means(&self, means: &[f64]) -> Result<f64> {
        let v = adapt_channels(means, self.dim())?;
        tensor::dense_sigmoid(&v, &self.weights, self.bias)
    }
}

fn single(t: &Tensor) -> Result<&Tensor> {
    if t.shape().n != 1 {
        return Err(Error::shape(format!("probe takes one sample, got n = {}", t.shape().n)));
    }
    Ok(t)
}

/// Probability the frozen classifier assigns to the captured tap.
pub fn probe_forward(model: &ModelGraph, tap_id: &str, activations: &ActivationStore) -> Result<f64> {
    let t = activations
        .get(tap_id)
        .ok_or_else(|| Error::MissingTap(tap_id.to_string()))?;
    ProbeHead::from_model(model).probability(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRecord {
    pub sample_id: String,
    pub tap_id: String,
    pub probability: f64,
    /// Raw per-filter spatial means of the tap.
    pub feature_means: Vec<f64>,
}

/// The full sample x tap grid, ordered by sample then tap declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTable {
    sample_ids: Vec<String>,
    tap_ids: Vec<String>,
    records: Vec<ProbeRecord>,
    dataset_sha256: Option<String>,
}

impl ProbeTable {
    /// Assembles a table, checking the grid is complete and in canonical order.
    pub fn new(
        sample_ids: Vec<String>,
        tap_ids: Vec<String>,
        records: Vec<ProbeRecord>,
        dataset_sha256: Option<String>,
    ) -> Result<Self> {
        if records.len() != sample_ids.len() * tap_ids.len() {
            return Err(Error::shape(format!(
                "probe table has {} records for {} samples x {} taps",
                records.len(),
                sample_ids.len(),
                tap_ids.len()
            )));
        }
        let mut widths: HashMap<&str, usize> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            let (s, t) = (i / tap_ids.len().max(1), i % tap_ids.len().max(1));
            if r.sample_id != sample_ids[s] || r.tap_id != tap_ids[t] {
                return Err(Error::shape(format!(
                    "record {i} is ({}, {}), expected ({}, {})",
                    r.sample_id, r.tap_id, sample_ids[s], tap_ids[t]
                )));
            }
            if !r.probability.is_finite() {
                return Err(Error::NonFinite(format!("probability of {} at {}", r.sample_id, r.tap_id)));
            }
            let w = *widths.entry(r.tap_id.as_str()).or_insert(r.feature_means.len());
            if w != r.feature_means.len() || w == 0 {
                return Err(Error::shape(format!(
                    "tap `{}` has inconsistent filter counts",
                    r.tap_id
                )));
            }
        }
        Ok(Self {
            sample_ids,
            tap_ids,
            records,
            dataset_sha256,
        })
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn tap_ids(&self) -> &[String] {
        &self.tap_ids
    }

    pub fn records(&self) -> &[ProbeRecord] {
        &self.records
    }

    pub fn dataset_sha256(&self) -> Option<&str> {
        self.dataset_sha256.as_deref()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn tap_index(&self, tap_id: &str) -> Option<usize> {
        self.tap_ids.iter().position(|t| t == tap_id)
    }

    /// Records for one tap, in sample order.
    pub fn tap_records(&self, tap_id: &str) -> impl Iterator<Item = &ProbeRecord> {
        let stride = self.tap_ids.len();
        let t = self.tap_index(tap_id);
        self.records
            .iter()
            .skip(t.unwrap_or(0))
            .step_by(stride.max(1))
            .take(if t.is_some() { self.sample_ids.len() } else { 0 })
    }

    /// Probe probabilities of one tap across samples.
    pub fn probabilities(&self, tap_id: &str) -> Vec<f64> {
        self.tap_records(tap_id).map(|r| r.probability).collect()
    }

    pub fn write_probabilities_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sample_id,tap_id,probability\n");
        for r in &self.records {
            push_row(&mut out, &[&r.sample_id, &r.tap_id, &fmt_f64(r.probability)]);
        }
        write_file(path, out.as_bytes())
    }

    pub fn write_feature_means_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sample_id,tap_id,filter_index,feature_mean\n");
        for r in &self.records {
            for (j, m) in r.feature_means.iter().enumerate() {
                push_row(&mut out, &[&r.sample_id, &r.tap_id, &j.to_string(), &fmt_f64(*m)]);
            }
        }
        write_file(path, out.as_bytes())
    }

    /// Rebuilds a table from the two CSV files written above.
    pub fn read_csvs(probabilities: &Path, feature_means: &Path) -> Result<Self> {
        let mut sample_ids: Vec<String> = Vec::new();
        let mut tap_ids: Vec<String> = Vec::new();
        let mut records: Vec<ProbeRecord> = Vec::new();
        let mut at: HashMap<(String, String), usize> = HashMap::new();

        for row in read_csv(probabilities, &["sample_id", "tap_id", "probability"])? {
            let (line, f) = row;
            let (sample, tap) = (f[0].clone(), f[1].clone());
            let probability = parse_f64(probabilities, line, "probability", &f[2])?;
            if sample_ids.last() != Some(&sample) {
                sample_ids.push(sample.clone());
            }
            if !tap_ids.contains(&tap) {
                tap_ids.push(tap.clone());
            }
            if at.insert((sample.clone(), tap.clone()), records.len()).is_some() {
                return Err(Error::schema(
                    probabilities,
                    format!("line {line}: duplicate row for ({sample}, {tap})"),
                ));
            }
            records.push(ProbeRecord {
                sample_id: sample,
                tap_id: tap,
                probability,
                feature_means: Vec::new(),
            });
        }

        for (line, f) in read_csv(feature_means, &["sample_id", "tap_id", "filter_index", "feature_mean"])? {
            let &i = at.get(&(f[0].clone(), f[1].clone())).ok_or_else(|| {
                Error::schema(
                    feature_means,
                    format!("line {line}: ({}, {}) has no probability row", f[0], f[1]),
                )
            })?;
            let j: usize = f[2].parse().map_err(|_| {
                Error::schema(feature_means, format!("line {line}: field `filter_index` is not an integer"))
            })?;
            let rec = &mut records[i];
            if j != rec.feature_means.len() {
                return Err(Error::schema(
                    feature_means,
                    format!("line {line}: field `filter_index` is {j}, expected {}", rec.feature_means.len()),
                ));
            }
            rec.feature_means.push(parse_f64(feature_means, line, "feature_mean", &f[3])?);
        }

        Self::new(sample_ids, tap_ids, records, None)
            .map_err(|e| Error::schema(probabilities, e.to_string()))
    }
}

pub(crate) fn push_row(out: &mut String, fields: &[&str]) {
    for (i, f) in fields.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        if f.contains([',', '"', '\n', '\r']) {
            out.push('"');
            out.push_str(&f.replace('"', "\"\""));
            out.push('"');
        } else {
            out.push_str(f);
        }
    }
    out.push('\n');
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn parse_f64(file: &Path, line: usize, field: &str, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::schema(file, format!("line {line}: field `{field}` is not a number: `{s}`")))
}

/// Reads a header-checked CSV; yields `(line number, fields)`.
pub(crate) fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<(usize, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::schema(path, e.to_string()))?;
    let found = reader.headers().map_err(|e| Error::schema(path, e.to_string()))?;
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::schema(
            path,
            format!("header is `{}`, expected `{}`", found.iter().collect::<Vec<_>>().join(","), header.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::schema(path, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(Error::schema(path, format!("line {}: expected {} fields", i + 2, header.len())));
        }
        rows.push((i + 2, rec.iter().map(str::to_string).collect()));
    }
    Ok(rows)
}

/// One forward pass per sample with every tap captured.
///
/// Samples are processed on the current rayon pool; the result is in the
/// given sample order regardless of scheduling.
pub fn probe_dataset(model: &ModelGraph, taps: &[TapPoint], samples: &[Sample]) -> Result<ProbeTable> {
    let head = ProbeHead::from_model(model);
    let per_sample: Vec<Vec<ProbeRecord>> = samples
        .par_iter()
        .map(|sample| {
            let wrap = |e: Error| Error::Sample {
                id: sample.id.clone(),
                source: Box::new(e),
            };
            if taps.is_empty() {
                return Ok(Vec::new());
            }
            let (_, store) = model.forward(&sample.tensor, taps).map_err(wrap)?;
            taps.iter()
                .map(|tap| {
                    let t = store.get(&tap.id).ok_or_else(|| wrap(Error::MissingTap(tap.id.clone())))?;
                    let feature_means = extract_feature_means(t);
                    let probability = head.probability_from_means(&feature_means).map_err(wrap)?;
                    Ok(ProbeRecord {
                        sample_id: sample.id.clone(),
                        tap_id: tap.id.clone(),
                        probability,
                        feature_means,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let sample_ids = if taps.is_empty() {
        Vec::new()
    } else {
        samples.iter().map(|s| s.id.clone()).collect()
    };
    ProbeTable::new(
        sample_ids,
        taps.iter().map(|t| t.id.clone()).collect(),
        per_sample.into_iter().flatten().collect(),
        Some(crate::dataset::samples_sha256(samples)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptation_rules() {
        let v: Vec<f64> = (0..64).map(|i| i as f64).collect();
        assert_eq!(adapt_channels(&v, 64).unwrap(), v);
        assert_eq!(adapt_channels(&[1.0, 3.0, 5.0, 7.0], 2).unwrap(), vec![2.0, 6.0]);
        assert_eq!(adapt_channels(&[1.0, 2.0], 6).unwrap(), vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(matches!(
            adapt_channels(&[1.0, 2.0, 3.0], 7),
            Err(Error::UnsupportedTapShape {
                channels: 3,
                classifier_dim: 7
            })
        ));
        assert_eq!(Adaptation::resolve(128, 64).unwrap(), Adaptation::GroupAverage(2));
        assert_eq!(Adaptation::resolve(64, 2048).unwrap(), Adaptation::Tile(32));
    }

    #[test]
    fn constant_tap_closed_form() {
        let head = ProbeHead {
            weights: vec![0.3, -0.1, 0.25],
            bias: -0.2,
        };
        let c = 1.5f32;
        let t = Tensor::filled(tensor::Shape4::new(1, 3, 4, 4), c);
        let expected = tensor::sigmoid(-0.2 + c as f64 * (0.3 - 0.1 + 0.25));
        assert!((head.probability(&t).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_tap() {
        let f = crate::model::fixtures::planted(&Default::default(), 1);
        let g = f.graph().unwrap();
        assert!(matches!(
            probe_forward(&g, "nope", &ActivationStore::default()),
            Err(Error::MissingTap(_))
        ));
    }

    #[test]
    fn incomplete_grid_is_rejected() {
        let rec = |s: &str, t: &str| ProbeRecord {
            sample_id: s.into(),
            tap_id: t.into(),
            probability: 0.5,
            feature_means: vec![1.0],
        };
        let ok = ProbeTable::new(
            vec!["a".into()],
            vec!["t1".into(), "t2".into()],
            vec![rec("a", "t1"), rec("a", "t2")],
            None,
        );
        assert!(ok.is_ok());
        assert!(ProbeTable::new(vec!["a".into()], vec!["t1".into(), "t2".into()], vec![rec("a", "t1")], None).is_err());
        assert!(ProbeTable::new(
            vec!["a".into()],
            vec!["t1".into(), "t2".into()],
            vec![rec("a", "t2"), rec("a", "t1")],
            None
        )
        .is_err());
    }
}
