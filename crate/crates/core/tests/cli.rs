use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cnnxray::dataset::read_tensor;
use cnnxray::model::fixtures::{self, PlantedConfig};
use cnnxray::report::encode_pgm;
use cnnxray::stats::normalize_for_display;

fn cnnxray(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cnnxray"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

struct Setup {
    _root: tempfile::TempDir,
    dir: PathBuf,
}

impl Setup {
    fn new(seed: u64, images: usize) -> Self {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().to_path_buf();
        let cfg = PlantedConfig::default();
        std::fs::create_dir_all(dir.join("model")).unwrap();
        fixtures::planted(&cfg, seed).write_to(&dir.join("model")).unwrap();
        fixtures::write_planted_images(&cfg, seed, images, &dir.join("data")).unwrap();
        Self { _root: root, dir }
    }

    fn path(&self, rel: &str) -> String {
        self.dir.join(rel).to_string_lossy().into_owned()
    }

    fn model_args(&self) -> Vec<String> {
        vec![
            "--model".into(),
            self.path("model/manifest.json"),
            "--weights".into(),
            self.path("model/weights.bin"),
            "--data".into(),
            self.path("data"),
        ]
    }

    fn run(&self, cmd: &str, extra: &[&str]) -> Output {
        let mut args: Vec<String> = vec![cmd.into()];
        args.extend(self.model_args());
        args.extend(extra.iter().map(|s| s.to_string()));
        cnnxray(&args.iter().map(String::as_str).collect::<Vec<_>>())
    }
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn stages_reproduce_the_pipeline_byte_for_byte() {
    let s = Setup::new(2, 120);
    let piped = s.path("piped");
    let out = s.run("pipeline", &["--out", &piped, "--render", "--alpha", "0.5", "--k", "3", "--seed", "9"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let staged = s.path("staged");
    assert_eq!(code(&s.run("probe", &["--out", &staged, "--seed", "9"])), 0);
    assert_eq!(code(&cnnxray(&["fit", "--in", &staged, "--alpha", "0.5"])), 0);
    assert_eq!(code(&cnnxray(&["correlate", "--in", &staged, "--basis", "probe"])), 0);
    assert_eq!(code(&cnnxray(&["rank", "--in", &staged, "--k", "3"])), 0);
    let mut render = vec!["render".to_string(), "--in".into(), staged.clone()];
    render.extend(s.model_args());
    assert_eq!(code(&cnnxray(&render.iter().map(String::as_str).collect::<Vec<_>>())), 0);

    let a = read_tree(Path::new(&piped));
    let b = read_tree(Path::new(&staged));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(b[k] == *v, "{k} differs");
    }
    assert_eq!(code(&cnnxray(&["verify", "--in", &piped])), 0);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let s = Setup::new(4, 60);
    let cfg = s.dir.join("cfg.json");
    std::fs::write(&cfg, r#"{"alpha": 3.0, "k": 2, "split": [0.5, 0.25, 0.25]}"#).unwrap();
    let out_dir = s.path("bundle");
    let out = s.run("pipeline", &["--config", cfg.to_str().unwrap(), "--k", "4", "--out", &out_dir]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(s.dir.join("bundle/run.json")).unwrap()).unwrap();
    assert_eq!(run["alpha"], 3.0);
    assert_eq!(run["k"], 4);
    assert_eq!(run["split"]["sizes"], serde_json::json!([30, 15, 15]));
}

#[test]
fn exit_codes() {
    let s = Setup::new(1, 40);
    let out_dir = s.path("bundle");
    assert_eq!(code(&s.run("pipeline", &["--out", &out_dir])), 0);

    // Coefficient vectors of a 3-filter and a 6-filter tap cannot be correlated.
    let out = cnnxray(&["correlate", "--in", &out_dir, "--basis", "coef"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("basis unavailable"));

    assert_eq!(code(&cnnxray(&["pipeline", "--bogus"])), 2);
    assert_eq!(code(&s.run("pipeline", &["--out", &out_dir, "--split", "0.5,0.5,0.5"])), 2);
    assert_eq!(code(&s.run("pipeline", &["--out", &out_dir, "--taps", "nothing*"])), 2);

    let out = cnnxray(&[
        "pipeline",
        "--model",
        "/nonexistent/manifest.json",
        "--weights",
        "/nonexistent/w.bin",
        "--data",
        &s.path("data"),
        "--out",
        &s.path("other"),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage `probe`"));

    std::fs::write(s.dir.join("bundle/correlation.csv"), "tampered").unwrap();
    assert_eq!(code(&cnnxray(&["verify", "--in", &out_dir])), 1);

    let out = cnnxray(&["fit", "--in", &s.path("model")]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("probes.csv"));
}

#[test]
fn too_few_samples_are_flagged_but_complete() {
    let s = Setup::new(6, 200);
    let out_dir = s.path("bundle");
    // floor(190) + floor(4) leaves 6 interpretability samples for 6 filters.
    let out = s.run("pipeline", &["--out", &out_dir, "--split", "0.95,0.02,0.03"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let regs = cnnxray::report::read_regression_json(&s.dir.join("bundle/regression.json")).unwrap();
    let conv2 = regs.iter().find(|r| r.tap_id == "conv2").unwrap();
    assert_eq!(conv2.fit.n, 6);
    assert!(conv2.diagnostics.flags.iter().any(|f| f == "insufficient_samples"));
    assert!(conv2.diagnostics.se.is_none() && conv2.diagnostics.p_values.is_none());
    let conv1 = regs.iter().find(|r| r.tap_id == "conv1").unwrap();
    assert!(conv1.diagnostics.p_values.is_some());
}

#[test]
fn failed_pipeline_leaves_no_output() {
    let s = Setup::new(3, 20);
    for i in 0..20 {
        let neg = s.dir.join(format!("data/negative/broken_{i}.pgm"));
        std::fs::write(neg, b"P5\n24 24\n255\n").unwrap();
    }
    let out_dir = s.path("bundle");
    let out = s.run("pipeline", &["--out", &out_dir]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage `probe`") && err.contains("broken_"), "{err}");
    assert!(!s.dir.join("bundle").exists());
    assert!(!s.dir.join(".bundle.partial").exists());
}

#[test]
fn dump_and_render_reproduce_display_bytes() {
    let s = Setup::new(8, 4);
    let dumps = s.path("dumps");
    let out = cnnxray(&[
        "dump",
        "--model",
        &s.path("model/manifest.json"),
        "--weights",
        &s.path("model/weights.bin"),
        "--data",
        &s.path("data"),
        "--input",
        "positive/synth_0000.pgm",
        "--out",
        &dumps,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let dump = s.dir.join("dumps/conv2.cxt");
    let maps = s.path("maps");
    assert_eq!(code(&cnnxray(&["render", "--dump", dump.to_str().unwrap(), "--out", &maps, "--filters", "3,0"])), 0);
    let t = read_tensor(&dump).unwrap();
    let sh = t.shape();
    for f in [0, 3] {
        let want = encode_pgm(sh.w, sh.h, &normalize_for_display(t.channel(0, f)));
        assert_eq!(std::fs::read(s.dir.join(format!("maps/conv2_f{f}.pgm"))).unwrap(), want);
    }
}

#[test]
fn prepare_writes_every_variant() {
    let s = Setup::new(0, 6);
    let out_dir = s.path("augmented");
    let out = cnnxray(&["prepare", "--in", &s.path("data"), "--out", &out_dir, "--seed", "1"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("written 24"));
    assert_eq!(cnnxray::cli::dataset_ids(Path::new(&out_dir)).unwrap().len(), 24);
    assert_eq!(code(&cnnxray(&["prepare", "--in", &s.path("data"), "--out", &out_dir, "--max-deg", "30"])), 2);
}

#[test]
fn shapes_prints_every_layer() {
    let s = Setup::new(0, 0);
    let out = cnnxray(&["shapes", "--model", &s.path("model/manifest.json"), "--weights", &s.path("model/weights.bin")]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l.starts_with("conv2\tconv2d\t6\t24\t24")), "{text}");
}
