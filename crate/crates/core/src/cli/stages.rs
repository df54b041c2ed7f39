//! The pipeline stages. Each reads its inputs from a bundle directory and
//! writes its outputs (plus refreshed `run.json` and `bundle.json`) to
//! another, which may be the same directory.

use std::path::{Path, PathBuf};

use log::info;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::dataset::{list_dataset, load_sample, samples_sha256, split, Sample, SplitFractions};
use crate::error::{Error, Result};
use crate::model::{load_model, sha256_hex, ModelGraph, TapPoint};
use crate::probe::{probe_dataset, push_row, read_csv, write_file, ProbeTable};
use crate::report::{
    correlation_meta, read_importance_report, read_json, read_regression_json, render_feature_map,
    update_run_metadata, write_bundle_manifest, write_correlation_csv, write_importance_report, write_json,
    write_regression_json, MapRefs, TapRegression, CORRELATION_CSV, CORRELATION_META_JSON, FEATURE_MEANS_CSV,
    IMPORTANCE_JSON, MAPS_DIR, PROBES_CSV, REGRESSION_JSON, RUN_JSON, SPLIT_CSV,
};
use crate::stats::{
    correlation_from_vectors, correlation_matrix, diagnose, rank_fit, ridge_fit, CorrelationBasis, DesignMatrix,
};

pub struct LoadedModel {
    pub graph: ModelGraph,
    pub manifest_sha256: String,
}

pub fn load_model_files(manifest: &Path, weights: &Path) -> Result<LoadedModel> {
    let m = std::fs::read(manifest).map_err(|e| Error::io(manifest, e))?;
    let w = std::fs::read(weights).map_err(|e| Error::io(weights, e))?;
    Ok(LoadedModel {
        graph: load_model(&m, &w)?,
        manifest_sha256: sha256_hex(&m),
    })
}

/// Taps whose id matches `pattern`, in declaration order.
pub fn select_taps(model: &ModelGraph, pattern: Option<&str>) -> Result<Vec<TapPoint>> {
    let Some(pattern) = pattern else {
        return Ok(model.taps().to_vec());
    };
    let glob = glob::Pattern::new(pattern).map_err(|e| Error::Config(format!("bad tap glob `{pattern}`: {e}")))?;
    let taps: Vec<TapPoint> = model.taps().iter().filter(|t| glob.matches(&t.id)).cloned().collect();
    if taps.is_empty() {
        return Err(Error::Config(format!("tap glob `{pattern}` matches no tap")));
    }
    Ok(taps)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn entries(pairs: Vec<(&str, Value)>) -> Map<String, Value> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn write_split_csv(path: &Path, ids: &[(String, u8, PathBuf)], parts: &[crate::dataset::Partition]) -> Result<()> {
    let mut out = String::from("sample_id,label,partition\n");
    for ((id, label, _), p) in ids.iter().zip(parts) {
        push_row(&mut out, &[id, &label.to_string(), p.as_str()]);
    }
    write_file(path, out.as_bytes())
}

/// Hash over every dataset file's id and byte content, in id order.
pub fn dataset_files_sha256(files: &[(String, u8, PathBuf)]) -> Result<String> {
    let mut h = Sha256::new();
    for (id, label, path) in files {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        h.update((id.len() as u64).to_le_bytes());
        h.update(id.as_bytes());
        h.update([*label]);
        h.update(Sha256::digest(&bytes));
    }
    Ok(hex::encode(h.finalize()))
}

/// Interpretability sample ids from `split.csv`, in file order.
pub fn read_interp_ids(path: &Path) -> Result<Vec<String>> {
    Ok(read_csv(path, &["sample_id", "label", "partition"])?
        .into_iter()
        .filter(|(_, f)| f[2] == "interp")
        .map(|(_, f)| f[0].clone())
        .collect())
}

/// Splits the dataset, probes the interpretability partition and writes
/// `probes.csv`, `feature_means.csv` and `split.csv`.
pub fn stage_probe(cfg: &RunConfig, out: &Path) -> Result<ProbeTable> {
    ensure_dir(out)?;
    let model = load_model_files(&cfg.model, &cfg.weights)?;
    let taps = select_taps(&model.graph, cfg.taps.as_deref())?;
    let files = list_dataset(&cfg.data)?;
    if files.is_empty() {
        return Err(Error::Config(format!("dataset {} has no samples", cfg.data.display())));
    }
    let dataset_sha256 = dataset_files_sha256(&files)?;
    let fractions: SplitFractions = cfg.fractions()?;
    let parts = split(files.len(), fractions, cfg.seed);
    let interp: Vec<Sample> = parts
        .interp
        .iter()
        .map(|&i| {
            let (id, label, path) = &files[i];
            load_sample(id, *label, path, model.graph.input_shape())
        })
        .collect::<Result<_>>()?;
    info!("probing {} samples at {} taps", interp.len(), taps.len());
    let table = probe_dataset(&model.graph, &taps, &interp)?;
    table.write_probabilities_csv(&out.join(PROBES_CSV))?;
    table.write_feature_means_csv(&out.join(FEATURE_MEANS_CSV))?;
    write_split_csv(&out.join(SPLIT_CSV), &files, &parts.partition_of(files.len()))?;
    let tap_meta: Vec<Value> = taps
        .iter()
        .map(|t| json!({ "id": t.id, "layer": t.layer, "group": t.group }))
        .collect();
    update_run_metadata(
        out,
        entries(vec![
            ("model_manifest_sha256", json!(model.manifest_sha256)),
            ("weights_sha256", json!(model.graph.weights_sha256())),
            ("dataset_sha256", json!(dataset_sha256)),
            ("interp_sha256", json!(samples_sha256(&interp))),
            ("dataset_size", json!(files.len())),
            (
                "split",
                json!({
                    "fractions": [fractions.train, fractions.val, fractions.interp],
                    "sizes": [parts.train.len(), parts.val.len(), parts.interp.len()],
                }),
            ),
            ("seed", json!(cfg.seed)),
            ("taps", Value::Array(tap_meta)),
        ]),
    )?;
    write_bundle_manifest(out)?;
    Ok(table)
}

fn tap_groups(dir: &Path) -> Vec<(String, Option<String>)> {
    let Ok(run) = read_json(&dir.join(RUN_JSON)) else {
        return Vec::new();
    };
    run["taps"]
        .as_array()
        .map(|taps| {
            taps.iter()
                .filter_map(|t| Some((t["id"].as_str()?.to_string(), t["group"].as_str().map(str::to_string))))
                .collect()
        })
        .unwrap_or_default()
}

/// Ridge fit and diagnostics for every tap of a probe table.
pub fn fit_table(table: &ProbeTable, alpha: f64, groups: &[(String, Option<String>)]) -> Result<Vec<TapRegression>> {
    table
        .tap_ids()
        .iter()
        .map(|tap| {
            let d = DesignMatrix::from_probe_table(table, tap)?;
            let fit = ridge_fit(&d, alpha)?;
            let diagnostics = diagnose(&fit, &d)?;
            let group = groups.iter().find(|(id, _)| id == tap).and_then(|(_, g)| g.clone());
            Ok(TapRegression {
                tap_id: tap.clone(),
                group,
                fit,
                diagnostics,
            })
        })
        .collect()
}

pub fn stage_fit(input: &Path, out: &Path, alpha: f64) -> Result<Vec<TapRegression>> {
    ensure_dir(out)?;
    let table = ProbeTable::read_csvs(&input.join(PROBES_CSV), &input.join(FEATURE_MEANS_CSV))?;
    let regs = fit_table(&table, alpha, &tap_groups(input))?;
    write_regression_json(&regs, &out.join(REGRESSION_JSON))?;
    update_run_metadata(out, entries(vec![("alpha", json!(alpha))]))?;
    write_bundle_manifest(out)?;
    Ok(regs)
}

pub fn stage_correlate(input: &Path, out: &Path, basis: CorrelationBasis) -> Result<()> {
    ensure_dir(out)?;
    let m = match basis {
        CorrelationBasis::ProbeOutputs => {
            correlation_matrix(&ProbeTable::read_csvs(&input.join(PROBES_CSV), &input.join(FEATURE_MEANS_CSV))?)?
        }
        CorrelationBasis::CoefficientVectors => {
            let regs = read_regression_json(&input.join(REGRESSION_JSON))?;
            let labels = regs.iter().map(|r| r.tap_id.clone()).collect();
            let vectors: Vec<Vec<f64>> = regs.into_iter().map(|r| r.fit.coefficients).collect();
            correlation_from_vectors(labels, &vectors, basis)?
        }
    };
    write_correlation_csv(&m, &out.join(CORRELATION_CSV))?;
    write_json(&out.join(CORRELATION_META_JSON), &correlation_meta(&m))?;
    update_run_metadata(out, entries(vec![("basis", json!(basis.as_str()))]))?;
    write_bundle_manifest(out)
}

pub fn stage_rank(input: &Path, out: &Path, k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    ensure_dir(out)?;
    let regs = read_regression_json(&input.join(REGRESSION_JSON))?;
    let rankings: Vec<_> = regs.iter().map(|r| rank_fit(&r.tap_id, &r.fit, k)).collect();
    write_importance_report(&rankings, None, &out.join(IMPORTANCE_JSON))?;
    update_run_metadata(out, entries(vec![("k", json!(k))]))?;
    write_bundle_manifest(out)
}

/// Renders every ranked filter's feature map for the first interpretability
/// sample and links the images from `importance.json`.
pub fn stage_render(input: &Path, out: &Path, model: &Path, weights: &Path, data: &Path) -> Result<()> {
    ensure_dir(out)?;
    let rankings = read_importance_report(&input.join(IMPORTANCE_JSON))?;
    let interp = read_interp_ids(&input.join(SPLIT_CSV))?;
    let sample_id = interp
        .first()
        .ok_or_else(|| Error::schema(input.join(SPLIT_CSV), "no interpretability sample to render"))?;
    let model = load_model_files(model, weights)?;
    let (_, label, path) = list_dataset(data)?
        .into_iter()
        .find(|(id, _, _)| id == sample_id)
        .ok_or_else(|| Error::Config(format!("sample `{sample_id}` not found under {}", data.display())))?;
    let sample = load_sample(sample_id, label, &path, model.graph.input_shape())?;
    let taps: Vec<TapPoint> = rankings
        .iter()
        .map(|r| {
            model
                .graph
                .tap(&r.tap_id)
                .cloned()
                .ok_or_else(|| Error::MissingTap(r.tap_id.clone()))
        })
        .collect::<Result<_>>()?;
    let (_, store) = model.graph.forward(&sample.tensor, &taps)?;
    let maps_dir = out.join(MAPS_DIR);
    ensure_dir(&maps_dir)?;
    let mut refs = MapRefs::new();
    for r in &rankings {
        let t = store.get(&r.tap_id).ok_or_else(|| Error::MissingTap(r.tap_id.clone()))?;
        let s = t.shape();
        for f in r.top_positive.iter().chain(&r.top_negative) {
            let name = crate::report::map_file_name(&r.tap_id, f.filter);
            render_feature_map(t.channel(0, f.filter), s.w, s.h, &maps_dir.join(&name))?;
            refs.insert((r.tap_id.clone(), f.filter), format!("{MAPS_DIR}/{name}"));
        }
    }
    write_importance_report(&rankings, Some(&refs), &out.join(IMPORTANCE_JSON))?;
    update_run_metadata(out, entries(vec![("render_sample", json!(sample_id))]))?;
    write_bundle_manifest(out)
}

fn staging_dir(out: &Path) -> PathBuf {
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "bundle".into());
    out.with_file_name(format!(".{name}.partial"))
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// Runs every stage into a staging directory and moves it to `cfg.out` on
/// success. On failure the staging directory is removed.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let out = cfg.out.clone();
    if out.exists() {
        let is_bundle = out.join(crate::report::BUNDLE_JSON).is_file();
        let is_empty = std::fs::read_dir(&out).map_err(|e| Error::io(&out, e))?.next().is_none();
        if !is_bundle && !is_empty {
            return Err(Error::Config(format!(
                "{} exists and is not a bundle; refusing to overwrite",
                out.display()
            )));
        }
    }
    let staging = staging_dir(&out);
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    let result = (|| -> Result<()> {
        stage("probe", stage_probe(cfg, &staging))?;
        stage("fit", stage_fit(&staging, &staging, cfg.alpha))?;
        stage("correlate", stage_correlate(&staging, &staging, cfg.basis))?;
        stage("rank", stage_rank(&staging, &staging, cfg.k))?;
        if cfg.render {
            stage("render", stage_render(&staging, &staging, &cfg.model, &cfg.weights, &cfg.data))?;
        }
        Ok(())
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_dir_all(&staging);
        return Err(e);
    }
    if out.exists() {
        std::fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    }
    std::fs::rename(&staging, &out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

/// Runs `f` on a rayon pool of `threads` workers (0 picks automatically).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
    Ok(pool.install(f))
}
