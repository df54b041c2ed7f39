//! Stable on-disk formats for every interpretability output.
//!
//! JSON files have sorted keys and shortest round-trip floats; CSV floats go
//! through [`fmt_f64`]. Identical inputs give byte-identical files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fmt::fmt_f64;
use crate::probe::{push_row, write_file};
use crate::stats::{
    normalize_for_display, CorrelationBasis, CorrelationMatrix, Diagnostics, ImportanceRanking, RankedFilter, RidgeFit,
};

pub const PROBES_CSV: &str = "probes.csv";
pub const FEATURE_MEANS_CSV: &str = "feature_means.csv";
pub const SPLIT_CSV: &str = "split.csv";
pub const REGRESSION_JSON: &str = "regression.json";
pub const CORRELATION_CSV: &str = "correlation.csv";
pub const CORRELATION_META_JSON: &str = "correlation_meta.json";
pub const IMPORTANCE_JSON: &str = "importance.json";
pub const MAPS_DIR: &str = "maps";
pub const RUN_JSON: &str = "run.json";
pub const BUNDLE_JSON: &str = "bundle.json";

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn to_json_text(v: &Value) -> String {
    // serde_json's default map is ordered by key.
    let mut s = serde_json::to_string_pretty(v).expect("JSON values always serialize");
    s.push('\n');
    s
}

pub fn write_json(path: &Path, v: &Value) -> Result<()> {
    write_file(path, to_json_text(v).as_bytes())
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))
}

/// Finite values as numbers, infinities as `"+inf"` / `"-inf"`.
fn real(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v > 0.0 {
        json!("+inf")
    } else if v < 0.0 {
        json!("-inf")
    } else {
        json!("nan")
    }
}

fn reals(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|&x| real(x)).collect())
}

fn opt_reals(v: &Option<Vec<f64>>) -> Value {
    v.as_ref().map_or(Value::Null, |v| reals(v))
}

/// Field accessors that report the file and field on failure.
struct Fields<'a> {
    file: &'a Path,
    at: String,
    obj: &'a Map<String, Value>,
}

impl<'a> Fields<'a> {
    fn new(file: &'a Path, at: String, v: &'a Value) -> Result<Self> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::schema(file, format!("{at}: expected an object")))?;
        Ok(Self { file, at, obj })
    }

    fn err(&self, field: &str, what: &str) -> Error {
        Error::schema(self.file, format!("{}: field `{field}` {what}", self.at))
    }

    fn get(&self, field: &str) -> Result<&'a Value> {
        self.obj.get(field).ok_or_else(|| self.err(field, "is missing"))
    }

    fn parse_real(&self, field: &str, v: &Value) -> Result<f64> {
        match v {
            Value::Number(n) => n.as_f64().ok_or_else(|| self.err(field, "is not a number")),
            Value::String(s) if s == "+inf" => Ok(f64::INFINITY),
            Value::String(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            _ => Err(self.err(field, "is not a number")),
        }
    }

    fn real(&self, field: &str) -> Result<f64> {
        self.parse_real(field, self.get(field)?)
    }

    fn opt_real(&self, field: &str) -> Result<Option<f64>> {
        match self.get(field)? {
            Value::Null => Ok(None),
            v => self.parse_real(field, v).map(Some),
        }
    }

    fn reals(&self, field: &str) -> Result<Vec<f64>> {
        self.get(field)?
            .as_array()
            .ok_or_else(|| self.err(field, "is not an array"))?
            .iter()
            .map(|v| self.parse_real(field, v))
            .collect()
    }

    fn opt_reals(&self, field: &str) -> Result<Option<Vec<f64>>> {
        match self.get(field)? {
            Value::Null => Ok(None),
            _ => self.reals(field).map(Some),
        }
    }

    fn uint(&self, field: &str) -> Result<u64> {
        self.get(field)?.as_u64().ok_or_else(|| self.err(field, "is not an unsigned integer"))
    }

    fn int(&self, field: &str) -> Result<i64> {
        self.get(field)?.as_i64().ok_or_else(|| self.err(field, "is not an integer"))
    }

    fn string(&self, field: &str) -> Result<String> {
        self.get(field)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| self.err(field, "is not a string"))
    }

    fn opt_string(&self, field: &str) -> Result<Option<String>> {
        match self.obj.get(field) {
            None | Some(Value::Null) => Ok(None),
            Some(_) => self.string(field).map(Some),
        }
    }

    fn strings(&self, field: &str) -> Result<Vec<String>> {
        self.get(field)?
            .as_array()
            .ok_or_else(|| self.err(field, "is not an array"))?
            .iter()
            .map(|v| v.as_str().map(str::to_string).ok_or_else(|| self.err(field, "holds a non-string")))
            .collect()
    }
}

/// One tap's fit and diagnostics as stored in `regression.json`.
#[derive(Debug, Clone, PartialEq)]
pub struct TapRegression {
    pub tap_id: String,
    pub group: Option<String>,
    pub fit: RidgeFit,
    pub diagnostics: Diagnostics,
}

impl TapRegression {
    pub fn to_json(&self) -> Value {
        let d = &self.diagnostics;
        let mut m = Map::new();
        m.insert("tap_id".into(), json!(self.tap_id));
        if let Some(g) = &self.group {
            m.insert("group".into(), json!(g));
        }
        m.insert("n".into(), json!(self.fit.n));
        m.insert("p".into(), json!(self.fit.p));
        m.insert("alpha".into(), real(self.fit.alpha));
        m.insert("intercept".into(), real(self.fit.intercept));
        m.insert("coefficients".into(), reals(&self.fit.coefficients));
        m.insert("se".into(), opt_reals(&d.se));
        m.insert("t_values".into(), opt_reals(&d.t_values));
        m.insert("p_values".into(), opt_reals(&d.p_values));
        m.insert("r_squared".into(), d.r_squared.map_or(Value::Null, real));
        m.insert("r_squared_raw".into(), d.r_squared_raw.map_or(Value::Null, real));
        m.insert("residual_fraction".into(), d.residual_fraction.map_or(Value::Null, real));
        m.insert("residual_variance".into(), d.residual_variance.map_or(Value::Null, real));
        m.insert("dof".into(), json!(d.dof));
        m.insert("feature_mean_se".into(), reals(&d.feature_mean_se));
        m.insert("flags".into(), json!(d.flags));
        Value::Object(m)
    }

    fn from_json(file: &Path, index: usize, v: &Value) -> Result<Self> {
        let f = Fields::new(file, format!("entry {index}"), v)?;
        let fit = RidgeFit {
            intercept: f.real("intercept")?,
            coefficients: f.reals("coefficients")?,
            alpha: f.real("alpha")?,
            n: f.uint("n")? as usize,
            p: f.uint("p")? as usize,
        };
        if fit.coefficients.len() != fit.p {
            return Err(f.err("coefficients", &format!("has {} entries, p is {}", fit.coefficients.len(), fit.p)));
        }
        let diagnostics = Diagnostics {
            r_squared: f.opt_real("r_squared")?,
            r_squared_raw: f.opt_real("r_squared_raw")?,
            residual_fraction: f.opt_real("residual_fraction")?,
            se: f.opt_reals("se")?,
            t_values: f.opt_reals("t_values")?,
            p_values: f.opt_reals("p_values")?,
            dof: f.int("dof")?,
            residual_variance: f.opt_real("residual_variance")?,
            feature_mean_se: f.reals("feature_mean_se")?,
            flags: f.strings("flags")?,
        };
        Ok(Self {
            tap_id: f.string("tap_id")?,
            group: f.opt_string("group")?,
            fit,
            diagnostics,
        })
    }
}

pub fn write_regression_json(regressions: &[TapRegression], path: &Path) -> Result<()> {
    write_json(path, &Value::Array(regressions.iter().map(TapRegression::to_json).collect()))
}

pub fn read_regression_json(path: &Path) -> Result<Vec<TapRegression>> {
    let v = read_json(path)?;
    let items = v
        .as_array()
        .ok_or_else(|| Error::schema(path, "expected a JSON array of tap regressions"))?;
    items
        .iter()
        .enumerate()
        .map(|(i, item)| TapRegression::from_json(path, i, item))
        .collect()
}

/// Square CSV: a `tap` header cell followed by the labels, then one row per
/// label.
pub fn write_correlation_csv(m: &CorrelationMatrix, path: &Path) -> Result<()> {
    let mut out = String::new();
    let mut header = vec!["tap"];
    header.extend(m.labels.iter().map(String::as_str));
    push_row(&mut out, &header);
    for (i, label) in m.labels.iter().enumerate() {
        let cells: Vec<String> = (0..m.len()).map(|j| fmt_f64(m.get(i, j))).collect();
        let mut row = vec![label.as_str()];
        row.extend(cells.iter().map(String::as_str));
        push_row(&mut out, &row);
    }
    write_file(path, out.as_bytes())
}

/// Reads a matrix written by [`write_correlation_csv`]. Basis and degenerate
/// flags are not part of the CSV and come back as defaults.
pub fn read_correlation_csv(path: &Path) -> Result<CorrelationMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::schema(path, e.to_string()))?;
    let header = reader.headers().map_err(|e| Error::schema(path, e.to_string()))?.clone();
    if header.get(0) != Some("tap") {
        return Err(Error::schema(path, "first header cell must be `tap`"));
    }
    let labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let m = labels.len();
    let mut values = Vec::with_capacity(m * m);
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::schema(path, e.to_string()))?;
        if i >= m || rec.len() != m + 1 || rec.get(0) != Some(labels[i].as_str()) {
            return Err(Error::schema(path, format!("line {}: expected row `{}`", i + 2, labels.get(i).map_or("", |s| s))));
        }
        for (j, cell) in rec.iter().skip(1).enumerate() {
            values.push(cell.parse::<f64>().map_err(|_| {
                Error::schema(path, format!("line {}: field `{}` is not a number", i + 2, labels[j]))
            })?);
        }
    }
    if values.len() != m * m {
        return Err(Error::schema(path, format!("expected {m} rows")));
    }
    Ok(CorrelationMatrix {
        labels,
        values,
        degenerate: vec![false; m * m],
        basis: CorrelationBasis::default(),
    })
}

/// Basis and degenerate pairs, which the CSV grid does not carry.
pub fn correlation_meta(m: &CorrelationMatrix) -> Value {
    let mut pairs = Vec::new();
    for i in 0..m.len() {
        for j in i..m.len() {
            if m.is_degenerate(i, j) {
                pairs.push(json!([m.labels[i], m.labels[j]]));
            }
        }
    }
    json!({ "basis": m.basis.as_str(), "degenerate_pairs": pairs })
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count does not match {width}x{height}");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Display-normalizes a row-major `height x width` map and writes it as PGM.
pub fn render_feature_map(map: &[f32], width: usize, height: usize, path: &Path) -> Result<()> {
    if map.len() != width * height {
        return Err(Error::shape(format!("map has {} values, expected {width}x{height}", map.len())));
    }
    write_file(path, &encode_pgm(width, height, &normalize_for_display(map)))
}

/// File name for a rendered filter map; unusual characters in the tap id are
/// replaced so the name is portable.
pub fn map_file_name(tap_id: &str, filter: usize) -> String {
    let safe: String = tap_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}_f{filter}.pgm")
}

/// Relative image paths keyed by `(tap_id, filter)`.
pub type MapRefs = BTreeMap<(String, usize), String>;

fn ranked_json(tap: &str, list: &[RankedFilter], maps: Option<&MapRefs>) -> Value {
    Value::Array(
        list.iter()
            .map(|r| {
                let mut m = Map::new();
                m.insert("filter".into(), json!(r.filter));
                m.insert("coefficient".into(), real(r.coefficient));
                if let Some(path) = maps.and_then(|mp| mp.get(&(tap.to_string(), r.filter))) {
                    m.insert("image".into(), json!(path));
                }
                Value::Object(m)
            })
            .collect(),
    )
}

pub fn importance_json(rankings: &[ImportanceRanking], maps: Option<&MapRefs>) -> Value {
    Value::Array(
        rankings
            .iter()
            .map(|r| {
                json!({
                    "tap_id": r.tap_id,
                    "k": r.k,
                    "top_positive": ranked_json(&r.tap_id, &r.top_positive, maps),
                    "top_negative": ranked_json(&r.tap_id, &r.top_negative, maps),
                })
            })
            .collect(),
    )
}

pub fn write_importance_report(rankings: &[ImportanceRanking], maps: Option<&MapRefs>, path: &Path) -> Result<()> {
    if rankings.is_empty() {
        return write_file(path, b"[]\n");
    }
    write_json(path, &importance_json(rankings, maps))
}

pub fn read_importance_report(path: &Path) -> Result<Vec<ImportanceRanking>> {
    let v = read_json(path)?;
    let items = v
        .as_array()
        .ok_or_else(|| Error::schema(path, "expected a JSON array of rankings"))?;
    let mut out = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let f = Fields::new(path, format!("entry {i}"), item)?;
        let list = |field: &str| -> Result<Vec<RankedFilter>> {
            let arr = f.get(field)?.as_array().ok_or_else(|| f.err(field, "is not an array"))?;
            arr.iter()
                .enumerate()
                .map(|(j, e)| {
                    let g = Fields::new(path, format!("entry {i}.{field}[{j}]"), e)?;
                    Ok(RankedFilter {
                        filter: g.uint("filter")? as usize,
                        coefficient: g.real("coefficient")?,
                    })
                })
                .collect()
        };
        out.push(ImportanceRanking {
            tap_id: f.string("tap_id")?,
            k: f.uint("k")? as usize,
            top_positive: list("top_positive")?,
            top_negative: list("top_negative")?,
        });
    }
    Ok(out)
}

/// Merges `entries` into `dir/run.json`, creating it if needed.
pub fn update_run_metadata(dir: &Path, entries: Map<String, Value>) -> Result<()> {
    let path = dir.join(RUN_JSON);
    let mut obj = if path.exists() {
        match read_json(&path)? {
            Value::Object(m) => m,
            _ => return Err(Error::schema(&path, "expected a JSON object")),
        }
    } else {
        Map::new()
    };
    obj.insert("tool_version".into(), json!(TOOL_VERSION));
    obj.extend(entries);
    write_json(&path, &Value::Object(obj))
}

fn bundle_files(dir: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let here = dir.join(rel);
    let mut entries: Vec<_> = std::fs::read_dir(&here)
        .map_err(|e| Error::io(&here, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&here, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for path in entries {
        let name = rel.join(path.file_name().unwrap_or_default());
        if path.is_dir() {
            bundle_files(dir, &name, out)?;
        } else if name != Path::new(BUNDLE_JSON) {
            out.push(name);
        }
    }
    Ok(())
}

fn rel_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn file_sha256(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

/// Writes `bundle.json` listing every other file under `dir` with its size
/// and SHA-256.
pub fn write_bundle_manifest(dir: &Path) -> Result<()> {
    let mut files = Vec::new();
    bundle_files(dir, Path::new(""), &mut files)?;
    files.sort_by_key(|p| rel_string(p));
    let mut listed = Vec::new();
    for rel in files {
        let (sha, bytes) = file_sha256(&dir.join(&rel))?;
        listed.push(json!({ "path": rel_string(&rel), "sha256": sha, "bytes": bytes }));
    }
    write_json(&dir.join(BUNDLE_JSON), &json!({ "files": listed }))
}

/// Re-hashes every file named in `bundle.json`; returns the paths that are
/// missing or whose content changed, plus files not listed.
pub fn verify_bundle(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(BUNDLE_JSON);
    let v = read_json(&path)?;
    let f = Fields::new(&path, "bundle".into(), &v)?;
    let listed = f.get("files")?.as_array().ok_or_else(|| f.err("files", "is not an array"))?;
    let mut bad = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, entry) in listed.iter().enumerate() {
        let e = Fields::new(&path, format!("files[{i}]"), entry)?;
        let rel = e.string("path")?;
        let want = e.string("sha256")?;
        let target = dir.join(&rel);
        match file_sha256(&target) {
            Ok((sha, _)) if sha == want => {}
            _ => bad.push(rel.clone()),
        }
        seen.insert(rel);
    }
    let mut present = Vec::new();
    bundle_files(dir, Path::new(""), &mut present)?;
    for p in present {
        let rel = rel_string(&p);
        if !seen.contains(&rel) {
            bad.push(rel);
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{correlation_from_vectors, rank_filters};

    #[test]
    fn identity_correlation_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let m = correlation_from_vectors(
            vec!["a".into(), "b".into()],
            &[vec![1.0, -1.0, 1.0, -1.0], vec![1.0, 1.0, -1.0, -1.0]],
            CorrelationBasis::ProbeOutputs,
        )
        .unwrap();
        write_correlation_csv(&m, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "tap,a,b\na,1,0\nb,0,1\n");
        let back = read_correlation_csv(&path).unwrap();
        assert_eq!(back.values, m.values);
    }

    #[test]
    fn correlation_csv_round_trips_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let m = correlation_from_vectors(
            vec!["x,1".into(), "y".into(), "z".into()],
            &[vec![0.1, 0.7, 0.3], vec![1.0, 3.0, 2.0], vec![3e-7, 1e-7, 2.5e-7]],
            CorrelationBasis::ProbeOutputs,
        )
        .unwrap();
        write_correlation_csv(&m, &path).unwrap();
        let back = read_correlation_csv(&path).unwrap();
        assert_eq!(back.labels, m.labels);
        for (a, b) in back.values.iter().zip(&m.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn pgm_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        render_feature_map(&[0.0, 2.0, 0.0, 2.0], 2, 2, &path).unwrap();
        let mut expected = b"P5\n2 2\n255\n".to_vec();
        expected.extend([32, 96, 32, 96]);
        assert_eq!(std::fs::read(&path).unwrap(), expected);
        render_feature_map(&[5.0; 6], 3, 2, &path).unwrap();
        assert_eq!(&std::fs::read(&path).unwrap()[11..], &[64; 6]);
    }

    #[test]
    fn importance_report_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.json");
        write_importance_report(&[], None, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().trim(), "[]");
        assert!(read_importance_report(&path).unwrap().is_empty());

        let coeffs: Vec<f64> = (0..12).map(|i| (i as f64 - 5.5) * 0.1).collect();
        let r = rank_filters("conv", &coeffs, 5);
        let mut maps = MapRefs::new();
        maps.insert(("conv".into(), 11), "maps/conv_f11.pgm".into());
        write_importance_report(std::slice::from_ref(&r), Some(&maps), &path).unwrap();
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v[0]["top_positive"].as_array().unwrap().len(), 5);
        assert_eq!(v[0]["top_negative"].as_array().unwrap().len(), 5);
        assert_eq!(v[0]["top_positive"][0]["image"], "maps/conv_f11.pgm");
        assert_eq!(read_importance_report(&path).unwrap(), vec![r]);
    }

    #[test]
    fn regression_round_trip_with_infinities() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let reg = TapRegression {
            tap_id: "t".into(),
            group: Some("stage2".into()),
            fit: RidgeFit {
                intercept: 0.1,
                coefficients: vec![0.25, -1e-9],
                alpha: 1.0,
                n: 10,
                p: 2,
            },
            diagnostics: Diagnostics {
                r_squared: Some(0.5),
                r_squared_raw: Some(0.5),
                residual_fraction: Some(0.5),
                se: Some(vec![0.0, 0.1]),
                t_values: Some(vec![f64::INFINITY, -1e-8]),
                p_values: Some(vec![0.0, 1.0]),
                dof: 7,
                residual_variance: Some(0.01),
                feature_mean_se: vec![0.3, 0.2],
                flags: vec!["infinite_t".into()],
            },
        };
        write_regression_json(std::slice::from_ref(&reg), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"+inf\""));
        assert!(text.find("\"alpha\"").unwrap() < text.find("\"coefficients\"").unwrap());
        assert_eq!(read_regression_json(&path).unwrap(), vec![reg]);
    }

    #[test]
    fn bundle_manifest_verifies() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("maps")).unwrap();
        std::fs::write(dir.path().join("a.csv"), "x\n").unwrap();
        std::fs::write(dir.path().join("maps/m.pgm"), "P5").unwrap();
        write_bundle_manifest(dir.path()).unwrap();
        assert!(verify_bundle(dir.path()).unwrap().is_empty());
        std::fs::write(dir.path().join("a.csv"), "y\n").unwrap();
        assert_eq!(verify_bundle(dir.path()).unwrap(), vec!["a.csv".to_string()]);
    }
}
