//! Command-line front end.

mod config;
pub mod stages;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;

use crate::augment::{prepare, AugmentOps};
use crate::dataset::{list_dataset, load_sample, write_tensor, SplitFractions};
use crate::error::{Error, Result};
use crate::model::fixtures;
use crate::report::{map_file_name, render_feature_map, verify_bundle};
use crate::stats::CorrelationBasis;
use stages::{load_model_files, select_taps};

pub const THREADS_ENV: &str = "CNNXRAY_THREADS";

#[derive(Debug, Parser)]
#[command(name = "cnnxray", version, about = "Probe, regress and rank the filters of a trained CNN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BasisArg {
    /// Probe probabilities across samples.
    Probe,
    /// Ridge coefficient vectors.
    Coef,
}

impl From<BasisArg> for CorrelationBasis {
    fn from(b: BasisArg) -> Self {
        match b {
            BasisArg::Probe => CorrelationBasis::ProbeOutputs,
            BasisArg::Coef => CorrelationBasis::CoefficientVectors,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixtureKind {
    Alexnet,
    Resnet,
    Planted,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON file with run settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Glob over tap ids.
    #[arg(long)]
    pub taps: Option<String>,
    #[arg(long, value_enum)]
    pub basis: Option<BasisArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train, validation and interpretability fractions, e.g. 0.7,0.15,0.15.
    #[arg(long)]
    pub split: Option<String>,
    /// Render feature maps of the ranked filters.
    #[arg(long)]
    pub render: bool,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.model {
            c.model = v.clone();
        }
        if let Some(v) = &self.weights {
            c.weights = v.clone();
        }
        if let Some(v) = &self.data {
            c.data = v.clone();
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = &self.taps {
            c.taps = Some(v.clone());
        }
        if let Some(v) = self.basis {
            c.basis = v.into();
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.split {
            let f = SplitFractions::parse(v)?;
            c.split = [f.train, f.val, f.interp];
        }
        c.render |= self.render;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Copy a dataset and add flipped and rotated variants.
    Prepare {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_hflip: bool,
        #[arg(long)]
        no_vflip: bool,
        #[arg(long)]
        no_rotate: bool,
        /// Largest rotation angle in degrees.
        #[arg(long, default_value_t = 10.0)]
        max_deg: f64,
        /// Rotated copies per image.
        #[arg(long, default_value_t = 1)]
        rotations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Probe the interpretability split at every selected tap.
    Probe(RunArgs),
    /// Ridge fit and diagnostics per tap from a probe table.
    Fit {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = crate::stats::DEFAULT_ALPHA)]
        alpha: f64,
    },
    /// Tap-by-tap correlation matrix.
    Correlate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "probe")]
        basis: BasisArg,
    },
    /// Top positive and negative filters per tap.
    Rank {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = crate::stats::DEFAULT_K)]
        k: usize,
    },
    /// Render feature maps, either for a ranked bundle or from a tensor dump.
    Render {
        #[arg(long = "in", required_unless_present = "dump")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, requires = "input")]
        model: Option<PathBuf>,
        #[arg(long, requires = "input")]
        weights: Option<PathBuf>,
        #[arg(long, requires = "input")]
        data: Option<PathBuf>,
        /// Activation dump written by `dump`.
        #[arg(long, conflicts_with = "input")]
        dump: Option<PathBuf>,
        /// Channels to render from the dump; all when omitted.
        #[arg(long, value_delimiter = ',')]
        filters: Vec<usize>,
    },
    /// Write the activations of one image at every selected tap.
    Dump {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Image or tensor dump, relative to --data when given.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        taps: Option<String>,
    },
    /// Probe, fit, correlate, rank and optionally render in one go.
    Pipeline(RunArgs),
    /// Print the output shape of every layer.
    Shapes {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Write a built-in fixture model.
    Fixture {
        #[arg(long, value_enum)]
        kind: FixtureKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic square/no-square image set.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every hash in a bundle manifest.
    Verify {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

/// Worker count from `CNNXRAY_THREADS`; unset or `0` means automatic.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(0),
        Ok(v) if v.trim().is_empty() => Ok(0),
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a non-negative integer, got `{v}`"))),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let threads = threads_from_env()?;
    stages::with_threads(threads, move || dispatch(cli.command))?
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Prepare {
            input,
            out,
            no_hflip,
            no_vflip,
            no_rotate,
            max_deg,
            rotations,
            seed,
        } => {
            let ops = AugmentOps {
                hflip: !no_hflip,
                vflip: !no_vflip,
                rotate: (!no_rotate).then_some(max_deg),
                rotations,
            };
            let s = prepare(&input, &out, &ops, seed)?;
            println!(
                "inputs {} written {} (positive {}, negative {}) skipped {}",
                s.inputs, s.written, s.positive, s.negative, s.skipped
            );
            Ok(())
        }
        Command::Probe(args) => {
            let cfg = args.resolve()?;
            let t = stages::stage_probe(&cfg, &cfg.out)?;
            println!("{} samples x {} taps", t.sample_ids().len(), t.tap_ids().len());
            Ok(())
        }
        Command::Fit { input, out, alpha } => {
            let regs = stages::stage_fit(&input, out.as_deref().unwrap_or(&input), alpha)?;
            for r in regs {
                let r2 = r.diagnostics.r_squared.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!("{}\tR2 {r2}\tdof {}", r.tap_id, r.diagnostics.dof);
            }
            Ok(())
        }
        Command::Correlate { input, out, basis } => {
            stages::stage_correlate(&input, out.as_deref().unwrap_or(&input), basis.into())
        }
        Command::Rank { input, out, k } => stages::stage_rank(&input, out.as_deref().unwrap_or(&input), k),
        Command::Render {
            input,
            out,
            model,
            weights,
            data,
            dump,
            filters,
        } => match (dump, input) {
            (Some(dump), _) => {
                let out = out.ok_or_else(|| Error::Config("--out is required with --dump".into()))?;
                render_dump(&dump, &out, &filters)
            }
            (None, Some(input)) => {
                let need = |v: Option<PathBuf>, flag: &str| v.ok_or_else(|| Error::Config(format!("{flag} is required")));
                let (model, weights, data) = (need(model, "--model")?, need(weights, "--weights")?, need(data, "--data")?);
                stages::stage_render(&input, out.as_deref().unwrap_or(&input), &model, &weights, &data)
            }
            (None, None) => Err(Error::Config("either --in or --dump is required".into())),
        },
        Command::Dump {
            model,
            weights,
            input,
            data,
            out,
            taps,
        } => dump(&model, &weights, &input, data.as_deref(), &out, taps.as_deref()),
        Command::Pipeline(args) => {
            let cfg = args.resolve()?;
            let out = stages::run_pipeline(&cfg)?;
            println!("bundle written to {}", out.display());
            Ok(())
        }
        Command::Shapes { model, weights } => {
            let m = load_model_files(&model, &weights)?;
            println!("layer\tkind\tfilters\theight\twidth");
            for r in m.graph.validate_shapes()? {
                println!("{}\t{}\t{}\t{}\t{}", r.layer, r.kind.as_str(), r.channels, r.height, r.width);
            }
            Ok(())
        }
        Command::Fixture { kind, seed, out } => {
            let f = match kind {
                FixtureKind::Alexnet => fixtures::alexnet(seed),
                FixtureKind::Resnet => fixtures::resnet(seed),
                FixtureKind::Planted => fixtures::planted(&fixtures::PlantedConfig::default(), seed),
            };
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            f.write_to(&out)
        }
        Command::Synth { seed, count, out } => {
            fixtures::write_planted_images(&fixtures::PlantedConfig::default(), seed, count, &out)
        }
        Command::Verify { input } => {
            let bad = verify_bundle(&input)?;
            if bad.is_empty() {
                println!("ok");
                Ok(())
            } else {
                Err(Error::schema(input.join(crate::report::BUNDLE_JSON), format!("mismatched files: {}", bad.join(", "))))
            }
        }
    }
}

fn dump(model: &Path, weights: &Path, input: &Path, data: Option<&Path>, out: &Path, taps: Option<&str>) -> Result<()> {
    let m = load_model_files(model, weights)?;
    let taps = select_taps(&m.graph, taps)?;
    let path = data.map_or_else(|| input.to_path_buf(), |d| d.join(input));
    let id = input.to_string_lossy().into_owned();
    let sample = load_sample(&id, 0, &path, m.graph.input_shape())?;
    let (p, store) = m.graph.forward(&sample.tensor, &taps)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for tap in &taps {
        let t = store.get(&tap.id).ok_or_else(|| Error::MissingTap(tap.id.clone()))?;
        let name = map_file_name(&tap.id, 0).replace("_f0.pgm", ".cxt");
        write_tensor(&out.join(name), t)?;
    }
    println!("probability {p}");
    Ok(())
}

fn render_dump(dump: &Path, out: &Path, filters: &[usize]) -> Result<()> {
    let t = crate::dataset::read_tensor(dump)?;
    let s = t.shape();
    let all: Vec<usize> = (0..s.c).collect();
    let filters = if filters.is_empty() { &all[..] } else { filters };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let stem = dump.file_stem().unwrap_or_default().to_string_lossy();
    for &f in filters {
        if f >= s.c {
            return Err(Error::Config(format!("filter {f} out of range for {} channels", s.c)));
        }
        render_feature_map(t.channel(0, f), s.w, s.h, &out.join(map_file_name(&stem, f)))?;
    }
    Ok(())
}

/// Lists the samples a dataset directory would contribute.
pub fn dataset_ids(dir: &Path) -> Result<Vec<String>> {
    Ok(list_dataset(dir)?.into_iter().map(|(id, _, _)| id).collect())
}
