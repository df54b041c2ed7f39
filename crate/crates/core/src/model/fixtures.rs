//! Reference models built in code: an AlexNet-style sequence and a
//! ResNet-50-style bottleneck network with fixed target layer shapes, plus a
//! small planted-filter model with a matching synthetic image generator.
//!
//! Kernel sizes, strides and padding are reconstructions: only the output
//! sizes and filter counts are pinned. All fixtures take a 240x240
//! single-channel input.

use std::collections::HashMap;
use std::path::Path;

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{Activation, BlobRef, LayerManifest, LayerOpManifest, Manifest, TapPoint, FORMAT_VERSION};
use super::{sha256_hex, weights_to_bytes, ModelGraph};
use crate::error::{Error, Result};

/// A manifest with its weights, ready to bind or write to disk.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub manifest: Manifest,
    pub weights: Vec<f32>,
}

impl Fixture {
    pub fn into_parts(self) -> (Manifest, Vec<f32>) {
        (self.manifest, self.weights)
    }

    pub fn weights_bytes(&self) -> Vec<u8> {
        weights_to_bytes(&self.weights)
    }

    pub fn manifest_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn graph(&self) -> Result<ModelGraph> {
        ModelGraph::bind(&self.manifest, &self.weights)
    }

    /// Writes `manifest.json` and `weights.bin` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = dir.join("manifest.json");
        std::fs::write(&m, self.manifest_json()).map_err(|e| Error::io(&m, e))?;
        let w = dir.join("weights.bin");
        std::fs::write(&w, self.weights_bytes()).map_err(|e| Error::io(&w, e))?;
        Ok(())
    }
}

/// Incrementally assembles a manifest and its weight blob.
pub struct ManifestBuilder {
    input_shape: [usize; 3],
    layers: Vec<LayerManifest>,
    taps: Vec<TapPoint>,
    weights: Vec<f32>,
    channels: HashMap<String, usize>,
    rng: ChaCha8Rng,
}

impl ManifestBuilder {
    pub fn new(input_shape: [usize; 3], seed: u64) -> Self {
        Self {
            input_shape,
            layers: Vec::new(),
            taps: Vec::new(),
            weights: Vec::new(),
            channels: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn alloc(&mut self, values: Vec<f32>) -> BlobRef {
        let r = BlobRef {
            offset: self.weights.len(),
            len: values.len(),
        };
        self.weights.extend(values);
        r
    }

    fn uniform(&mut self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| self.rng.random_range(lo..hi)).collect()
    }

    fn channels_of(&self, layer: &str) -> usize {
        self.channels.get(layer).copied().unwrap_or(0)
    }

    fn push(&mut self, name: &str, op: LayerOpManifest, inputs: &[&str], channels: usize) {
        self.layers.push(LayerManifest {
            name: name.to_string(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            output_shape: None,
        });
        self.channels.insert(name.to_string(), channels);
    }

    pub fn input(&mut self, name: &str) {
        let c = self.input_shape[0];
        self.push(name, LayerOpManifest::Input, &[], c);
    }

    /// He-uniform initialised convolution with a square kernel.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(&mut self, name: &str, input: &str, out: usize, kernel: usize, stride: usize, pad: usize, act: Activation) {
        let cin = self.channels_of(input);
        let fan_in = (cin * kernel * kernel) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let w = self.uniform(out * cin * kernel * kernel, -bound, bound);
        let b = self.uniform(out, -0.01, 0.01);
        self.conv_with(name, input, w, b, (kernel, kernel), stride, pad, act);
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_with(
        &mut self,
        name: &str,
        input: &str,
        weights: Vec<f32>,
        bias: Vec<f32>,
        kernel: (usize, usize),
        stride: usize,
        pad: usize,
        act: Activation,
    ) {
        let cin = self.channels_of(input);
        let out = bias.len();
        assert_eq!(weights.len(), out * cin * kernel.0 * kernel.1, "conv `{name}` weight count");
        let weights = self.alloc(weights);
        let bias = self.alloc(bias);
        self.push(
            name,
            LayerOpManifest::Conv2d {
                in_channels: cin,
                out_channels: out,
                kernel: [kernel.0, kernel.1],
                stride: [stride, stride],
                padding: [pad, pad],
                activation: act,
                weights,
                bias,
            },
            &[input],
            out,
        );
    }

    /// Batch norm with mildly randomised running statistics; `gamma_scale`
    /// multiplies the drawn gammas.
    pub fn batchnorm(&mut self, name: &str, input: &str, gamma_scale: f32) {
        let c = self.channels_of(input);
        let gamma = self.uniform(c, 0.8, 1.2).into_iter().map(|g| g * gamma_scale).collect();
        let beta = self.uniform(c, -0.1, 0.1);
        let mean = self.uniform(c, -0.1, 0.1);
        let var = self.uniform(c, 0.5, 1.5);
        self.batchnorm_with(name, input, gamma, beta, mean, var, 1e-3);
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm_with(
        &mut self,
        name: &str,
        input: &str,
        gamma: Vec<f32>,
        beta: Vec<f32>,
        mean: Vec<f32>,
        var: Vec<f32>,
        epsilon: f32,
    ) {
        let c = gamma.len();
        let op = LayerOpManifest::Batchnorm {
            epsilon,
            gamma: self.alloc(gamma),
            beta: self.alloc(beta),
            running_mean: self.alloc(mean),
            running_var: self.alloc(var),
        };
        self.push(name, op, &[input], c);
    }

    pub fn relu(&mut self, name: &str, input: &str) {
        let c = self.channels_of(input);
        self.push(name, LayerOpManifest::Relu, &[input], c);
    }

    pub fn maxpool(&mut self, name: &str, input: &str, kernel: usize, stride: usize) {
        let c = self.channels_of(input);
        let op = LayerOpManifest::Maxpool {
            kernel: [kernel, kernel],
            stride: [stride, stride],
            ceil_mode: false,
        };
        self.push(name, op, &[input], c);
    }

    pub fn global_avg_pool(&mut self, name: &str, input: &str) {
        let c = self.channels_of(input);
        self.push(name, LayerOpManifest::GlobalAvgPool, &[input], c);
    }

    pub fn dense_sigmoid(&mut self, name: &str, input: &str) {
        let d = self.channels_of(input);
        let bound = 1.0 / (d as f32).sqrt();
        let w = self.uniform(d, -bound, bound);
        self.dense_sigmoid_with(name, input, w, 0.0);
    }

    pub fn dense_sigmoid_with(&mut self, name: &str, input: &str, weights: Vec<f32>, bias: f32) {
        let op = LayerOpManifest::DenseSigmoid {
            weights: self.alloc(weights),
            bias: self.alloc(vec![bias]),
        };
        self.push(name, op, &[input], 1);
    }

    pub fn residual_begin(&mut self, name: &str, input: &str) {
        let c = self.channels_of(input);
        self.push(name, LayerOpManifest::ResidualBegin, &[input], c);
    }

    pub fn residual_add(&mut self, name: &str, a: &str, b: &str) {
        let c = self.channels_of(a);
        self.push(name, LayerOpManifest::ResidualAdd, &[a, b], c);
    }

    /// Declares the expected `(c, h, w)` output of an existing layer.
    pub fn expect(&mut self, layer: &str, shape: [usize; 3]) {
        let l = self
            .layers
            .iter_mut()
            .find(|l| l.name == layer)
            .unwrap_or_else(|| panic!("no layer `{layer}`"));
        l.output_shape = Some(shape);
    }

    pub fn tap(&mut self, tap: TapPoint) {
        self.taps.push(tap);
    }

    pub fn finish(self, classifier: &str) -> Fixture {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            input_shape: self.input_shape,
            weights_sha256: sha256_hex(&weights_to_bytes(&self.weights)),
            classifier: classifier.to_string(),
            layers: self.layers,
            taps: self.taps,
        };
        Fixture {
            manifest,
            weights: self.weights,
        }
    }
}

pub const FIXTURE_INPUT: [usize; 3] = [1, 240, 240];

/// Layer name, output side length and filter count of the AlexNet-style
/// fixture, in execution order.
pub const ALEXNET_LAYERS: [(&str, usize, usize); 13] = [
    ("conv_2d", 59, 64),
    ("bn", 59, 64),
    ("max_pooling_2d", 29, 64),
    ("conv_2d_1", 29, 64),
    ("bn_1", 29, 64),
    ("max_pooling_2d_1", 14, 64),
    ("conv_2d_2", 14, 64),
    ("bn_2", 14, 64),
    ("conv_2d_3", 14, 64),
    ("bn_3", 14, 64),
    ("conv_2d_4", 14, 64),
    ("bn_4", 14, 64),
    ("max_pooling_2d_2", 7, 64),
];

/// Sequential AlexNet-style network. Convolutions carry a fused ReLU; every
/// row of [`ALEXNET_LAYERS`] is also a tap.
pub fn alexnet(seed: u64) -> Fixture {
    let mut b = ManifestBuilder::new(FIXTURE_INPUT, seed);
    b.input("input");
    b.conv("conv_2d", "input", 64, 8, 4, 0, Activation::Relu);
    b.batchnorm("bn", "conv_2d", 1.0);
    b.maxpool("max_pooling_2d", "bn", 3, 2);
    b.conv("conv_2d_1", "max_pooling_2d", 64, 5, 1, 2, Activation::Relu);
    b.batchnorm("bn_1", "conv_2d_1", 1.0);
    b.maxpool("max_pooling_2d_1", "bn_1", 3, 2);
    b.conv("conv_2d_2", "max_pooling_2d_1", 64, 3, 1, 1, Activation::Relu);
    b.batchnorm("bn_2", "conv_2d_2", 1.0);
    b.conv("conv_2d_3", "bn_2", 64, 3, 1, 1, Activation::Relu);
    b.batchnorm("bn_3", "conv_2d_3", 1.0);
    b.conv("conv_2d_4", "bn_3", 64, 3, 1, 1, Activation::Relu);
    b.batchnorm("bn_4", "conv_2d_4", 1.0);
    b.maxpool("max_pooling_2d_2", "bn_4", 2, 2);
    b.global_avg_pool("global_avg_pool", "max_pooling_2d_2");
    b.dense_sigmoid("dense", "global_avg_pool");
    for (name, side, filters) in ALEXNET_LAYERS {
        b.expect(name, [filters, side, side]);
        b.tap(TapPoint::new(name, name));
    }
    b.finish("dense")
}

/// Stage, tap/layer name, output side length and filter count of the
/// ResNet-style fixture.
pub const RESNET_LAYERS: [(&str, &str, usize, usize); 24] = [
    ("stage1", "conv_1", 120, 64),
    ("stage1", "bn_1", 120, 64),
    ("stage1", "activation", 120, 64),
    ("stage1", "max_pooling_2d", 59, 64),
    ("stage2", "stage2_input", 59, 64),
    ("stage2", "stage2_conv_block", 59, 256),
    ("stage2", "stage2_identity_block_1", 59, 256),
    ("stage2", "stage2_identity_block_2", 59, 256),
    ("stage3", "stage3_input", 30, 128),
    ("stage3", "stage3_conv_block", 30, 512),
    ("stage3", "stage3_identity_block_1", 30, 512),
    ("stage3", "stage3_identity_block_2", 30, 512),
    ("stage3", "stage3_identity_block_3", 30, 512),
    ("stage4", "stage4_input", 15, 256),
    ("stage4", "stage4_conv_block", 15, 1024),
    ("stage4", "stage4_identity_block_1", 15, 1024),
    ("stage4", "stage4_identity_block_2", 15, 1024),
    ("stage4", "stage4_identity_block_3", 15, 1024),
    ("stage4", "stage4_identity_block_4", 15, 1024),
    ("stage4", "stage4_identity_block_5", 15, 1024),
    ("stage5", "stage5_input", 8, 512),
    ("stage5", "stage5_conv_block", 8, 2048),
    ("stage5", "stage5_identity_block_1", 8, 2048),
    ("stage5", "stage5_identity_block_2", 8, 2048),
];

/// Bottleneck residual unit: 1x1 (stride) -> 3x3 -> 1x1 expansion, with a
/// projection shortcut when `project` is set. Returns the name of the
/// reduced-width first activation and of the block output.
fn bottleneck(
    b: &mut ManifestBuilder,
    block: &str,
    input: &str,
    width: usize,
    stride: usize,
    project: bool,
) -> (String, String) {
    let begin = format!("{block}_begin");
    b.residual_begin(&begin, input);
    let n = |s: &str| format!("{block}_{s}");
    b.conv(&n("a_conv"), &begin, width, 1, stride, 0, Activation::None);
    b.batchnorm(&n("a_bn"), &n("a_conv"), 1.0);
    b.relu(&n("a_relu"), &n("a_bn"));
    b.conv(&n("b_conv"), &n("a_relu"), width, 3, 1, 1, Activation::None);
    b.batchnorm(&n("b_bn"), &n("b_conv"), 1.0);
    b.relu(&n("b_relu"), &n("b_bn"));
    b.conv(&n("c_conv"), &n("b_relu"), 4 * width, 1, 1, 0, Activation::None);
    // A damped last gain keeps activations bounded across the 16 additions.
    b.batchnorm(&n("c_bn"), &n("c_conv"), 0.2);
    let shortcut = if project {
        b.conv(&n("shortcut_conv"), &begin, 4 * width, 1, stride, 0, Activation::None);
        b.batchnorm(&n("shortcut_bn"), &n("shortcut_conv"), 1.0);
        n("shortcut_bn")
    } else {
        begin.clone()
    };
    b.residual_add(&n("add"), &n("c_bn"), &shortcut);
    b.relu(block, &n("add"));
    (n("a_relu"), block.to_string())
}

/// ResNet-50-style network (3, 4, 6, 3 bottleneck blocks).
///
/// `stageK_input` taps the first reduced-width activation of each stage's
/// convolutional block; block taps are the post-addition activations.
pub fn resnet(seed: u64) -> Fixture {
    let mut b = ManifestBuilder::new(FIXTURE_INPUT, seed);
    b.input("input");
    b.conv("conv_1", "input", 64, 7, 2, 3, Activation::None);
    b.batchnorm("bn_1", "conv_1", 1.0);
    b.relu("activation", "bn_1");
    b.maxpool("max_pooling_2d", "activation", 3, 2);

    let mut taps = vec![
        TapPoint::new("conv_1", "conv_1"),
        TapPoint::new("bn_1", "bn_1"),
        TapPoint::new("activation", "activation"),
        TapPoint::new("max_pooling_2d", "max_pooling_2d"),
    ]
    .into_iter()
    .map(|t| t.with_group("stage1"))
    .collect::<Vec<_>>();

    let stages = [(2usize, 64usize, 1usize, 2usize), (3, 128, 2, 3), (4, 256, 2, 5), (5, 512, 2, 2)];
    let mut current = "max_pooling_2d".to_string();
    for (stage, width, stride, identities) in stages {
        let group = format!("stage{stage}");
        let block = format!("stage{stage}_conv_block");
        let (first, out) = bottleneck(&mut b, &block, &current, width, stride, true);
        let input_tap = format!("stage{stage}_input");
        taps.push(TapPoint::new(&input_tap, first).with_group(&group));
        taps.push(TapPoint::new(&block, &out).with_group(&group));
        current = out;
        for i in 1..=identities {
            let block = format!("stage{stage}_identity_block_{i}");
            let (_, out) = bottleneck(&mut b, &block, &current, width, 1, false);
            taps.push(TapPoint::new(&block, &out).with_group(&group));
            current = out;
        }
    }
    b.global_avg_pool("global_avg_pool", &current);
    b.dense_sigmoid("dense", "global_avg_pool");

    for (_, name, side, filters) in RESNET_LAYERS {
        let layer = taps
            .iter()
            .find(|t| t.id == name)
            .map(|t| t.layer.clone())
            .expect("every table row is tapped");
        b.expect(&layer, [filters, side, side]);
    }
    for t in taps {
        b.tap(t);
    }
    b.finish("dense")
}

/// Shape of the planted-filter model and its synthetic images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedConfig {
    pub image_size: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    /// Index of the square detector among the second layer's filters.
    pub planted_filter: usize,
    /// Classifier weight on the planted filter's channel.
    pub planted_weight: f32,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            image_size: 24,
            conv1_filters: 3,
            conv2_filters: 6,
            planted_filter: 3,
            planted_weight: 2.0,
        }
    }
}

/// Two-convolution model whose second layer holds a hand-set bright-square
/// detector.
///
/// `conv1` filter 0 is a delta kernel passing brightness through; the other
/// first-layer filters are random. In `conv2` the planted filter sums a 3x3
/// patch of that brightness channel and is biased so it only fires on
/// patches brighter than one half. The remaining filters and classifier
/// weights are small random values.
pub fn planted(cfg: &PlantedConfig, seed: u64) -> Fixture {
    let s = cfg.image_size;
    let mut b = ManifestBuilder::new([1, s, s], seed);
    b.input("input");

    let mut w1 = Vec::with_capacity(cfg.conv1_filters * 9);
    for f in 0..cfg.conv1_filters {
        for k in 0..9 {
            w1.push(if f == 0 {
                if k == 4 {
                    1.0
                } else {
                    0.0
                }
            } else {
                b.rng().random_range(-0.5..0.5)
            });
        }
    }
    b.conv_with("conv1", "input", w1, vec![0.0; cfg.conv1_filters], (3, 3), 1, 1, Activation::Relu);

    let per_filter = cfg.conv1_filters * 9;
    let mut w2 = Vec::with_capacity(cfg.conv2_filters * per_filter);
    let mut b2 = Vec::with_capacity(cfg.conv2_filters);
    for f in 0..cfg.conv2_filters {
        if f == cfg.planted_filter {
            w2.extend((0..per_filter).map(|k| if k < 9 { 1.0 } else { 0.0 }));
            b2.push(-4.5);
        } else {
            for _ in 0..per_filter {
                w2.push(b.rng().random_range(-0.3..0.3));
            }
            b2.push(0.0);
        }
    }
    b.conv_with("conv2", "conv1", w2, b2, (3, 3), 1, 1, Activation::Relu);
    b.global_avg_pool("gap", "conv2");

    let mut wd = Vec::with_capacity(cfg.conv2_filters);
    for f in 0..cfg.conv2_filters {
        wd.push(if f == cfg.planted_filter {
            cfg.planted_weight
        } else {
            b.rng().random_range(-0.5..0.5)
        });
    }
    b.dense_sigmoid_with("dense", "gap", wd, -0.8);
    b.tap(TapPoint::new("conv1", "conv1"));
    b.tap(TapPoint::new("conv2", "conv2"));
    b.finish("dense")
}

const IMAGE_SEED_SALT: u64 = 0x5eed_0f_1a6e;

/// A generated image with its dataset-relative path (`positive/...` or
/// `negative/...`).
#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub path: String,
    pub positive: bool,
    pub image: GrayImage,
}

/// Noisy grayscale images; every other one carries a bright, roughly centred
/// square of random size and brightness.
pub fn planted_images(cfg: &PlantedConfig, seed: u64, count: usize) -> Vec<SyntheticImage> {
    let s = cfg.image_size as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ IMAGE_SEED_SALT);
    (0..count)
        .map(|i| {
            let positive = i % 2 == 0;
            let mut img = GrayImage::from_fn(s, s, |_, _| Luma([rng.random_range(0..90u8)]));
            if positive {
                let side = rng.random_range(s / 3..=s * 3 / 5);
                let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-2i32..=2);
                let x0 = ((s - side) / 2) as i32 + jitter(&mut rng);
                let y0 = ((s - side) / 2) as i32 + jitter(&mut rng);
                let level = rng.random_range(150..=255u32);
                for y in y0.max(0)..(y0 + side as i32).min(s as i32) {
                    for x in x0.max(0)..(x0 + side as i32).min(s as i32) {
                        let noise = rng.random_range(0..30u32);
                        let v = (level + noise).saturating_sub(15).min(255) as u8;
                        img.put_pixel(x as u32, y as u32, Luma([v]));
                    }
                }
            }
            let class = if positive { "positive" } else { "negative" };
            SyntheticImage {
                path: format!("{class}/synth_{i:04}.pgm"),
                positive,
                image: img,
            }
        })
        .collect()
}

/// Writes [`planted_images`] under `dir` as binary PGM files.
pub fn write_planted_images(cfg: &PlantedConfig, seed: u64, count: usize, dir: &Path) -> Result<()> {
    for img in planted_images(cfg, seed, count) {
        let path = dir.join(&img.path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        crate::dataset::write_pnm(&path, &image::DynamicImage::ImageLuma8(img.image))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alexnet_declares_table_shapes() {
        let f = alexnet(0);
        let g = f.graph().unwrap();
        let rows = g.validate_shapes().unwrap();
        for (name, side, filters) in ALEXNET_LAYERS {
            let row = rows.iter().find(|r| r.layer == name).unwrap();
            assert_eq!((row.channels, row.height, row.width), (filters, side, side), "{name}");
        }
        assert_eq!(g.taps().len(), 13);
        assert_eq!(g.classifier_input().name, "max_pooling_2d_2");
    }

    #[test]
    fn planted_images_are_deterministic() {
        let cfg = PlantedConfig::default();
        let a = planted_images(&cfg, 3, 6);
        let b = planted_images(&cfg, 3, 6);
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.path, y.path);
        }
        assert!(a[0].positive && !a[1].positive);
    }
}
