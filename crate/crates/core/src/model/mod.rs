//! Model graphs: loading, validation, forward execution with activation
//! capture, and symbolic shape propagation.

pub mod fixtures;
pub mod manifest;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::rc::Rc;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{
    self, BatchNormParams, ConvParams, PoolParams, Shape4, Tensor,
};

pub use manifest::{
    Activation, BlobRef, LayerKind, LayerManifest, LayerOpManifest, Manifest, TapPoint, FORMAT_VERSION,
};

/// A layer with its parameters bound to weight data.
#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    /// Indices of upstream layers in [`ModelGraph::layers`].
    pub inputs: Vec<usize>,
    pub op: LayerOp,
    pub declared_output: Option<[usize; 3]>,
}

#[derive(Debug, Clone)]
pub enum LayerOp {
    Input,
    Conv2d { params: ConvParams, relu: bool },
    BatchNorm(BatchNormParams),
    Relu,
    MaxPool(PoolParams),
    GlobalAvgPool,
    DenseSigmoid { weights: Vec<f64>, bias: f64 },
    ResidualBegin,
    ResidualAdd,
}

/// A validated, immutable model with all parameters bound.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    layers: Vec<Layer>,
    index: HashMap<String, usize>,
    input_shape: [usize; 3],
    classifier: usize,
    classifier_input: usize,
    taps: Vec<TapPoint>,
    weights_sha256: String,
}

/// Parses a manifest and weights blob and returns the bound graph.
pub fn load_model(manifest_bytes: &[u8], weights_bytes: &[u8]) -> Result<ModelGraph> {
    let manifest: Manifest =
        serde_json::from_slice(manifest_bytes).map_err(|e| Error::ManifestParse(e.to_string()))?;
    if weights_bytes.len() % 4 != 0 {
        return Err(Error::WeightsSizeMismatch {
            expected: declared_len(&manifest),
            actual: weights_bytes.len() / 4,
        });
    }
    let weights: Vec<f32> = weights_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    // Size first: a truncated blob is the more useful diagnosis than a hash mismatch.
    check_blob_size(&manifest, weights.len())?;
    let actual = sha256_hex(weights_bytes);
    if !actual.eq_ignore_ascii_case(&manifest.weights_sha256) {
        return Err(Error::WeightsHashMismatch {
            expected: manifest.weights_sha256.clone(),
            actual,
        });
    }
    ModelGraph::bind(&manifest, &weights)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn weights_to_bytes(weights: &[f32]) -> Vec<u8> {
    weights.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn declared_len(manifest: &Manifest) -> usize {
    manifest
        .layers
        .iter()
        .flat_map(|l| l.op.blobs())
        .map(|(_, b)| b.len)
        .sum()
}

fn check_blob_size(manifest: &Manifest, actual: usize) -> Result<()> {
    let expected = declared_len(manifest);
    if expected != actual {
        return Err(Error::WeightsSizeMismatch { expected, actual });
    }
    Ok(())
}

impl ModelGraph {
    /// Validates the manifest structure and binds parameter slices out of
    /// `weights`. The weights hash is not checked here; see [`load_model`].
    pub fn bind(manifest: &Manifest, weights: &[f32]) -> Result<Self> {
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::ManifestParse(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        if manifest.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::ManifestParse("input_shape has a zero dimension".into()));
        }
        check_blob_size(manifest, weights.len())?;

        let order = topological_order(&manifest.layers)?;
        let mut index = HashMap::with_capacity(order.len());
        for (pos, &src) in order.iter().enumerate() {
            index.insert(manifest.layers[src].name.clone(), pos);
        }

        let mut layers = Vec::with_capacity(order.len());
        for &src in &order {
            let lm = &manifest.layers[src];
            let inputs = lm.inputs.iter().map(|name| index[name]).collect();
            layers.push(Layer {
                name: lm.name.clone(),
                kind: lm.op.kind(),
                inputs,
                op: bind_op(lm, weights)?,
                declared_output: lm.output_shape,
            });
        }

        let inputs: Vec<_> = layers.iter().filter(|l| l.kind == LayerKind::Input).collect();
        if inputs.len() != 1 {
            let layer = inputs.get(1).map(|l| l.name.as_str()).unwrap_or("<none>");
            return Err(Error::graph(layer, "model needs exactly one input layer"));
        }

        let classifier = *index.get(&manifest.classifier).ok_or_else(|| {
            Error::graph(&manifest.classifier, "classifier names no layer")
        })?;
        for layer in &layers {
            if layer.kind == LayerKind::DenseSigmoid && layer.name != manifest.classifier {
                return Err(Error::graph(&layer.name, "only the classifier may be dense_sigmoid"));
            }
        }
        let head = &layers[classifier];
        if head.kind != LayerKind::DenseSigmoid {
            return Err(Error::graph(&head.name, "classifier must be a dense_sigmoid layer"));
        }
        let gap = head.inputs[0];
        if layers[gap].kind != LayerKind::GlobalAvgPool {
            return Err(Error::graph(&head.name, "classifier input must be a global_avg_pool layer"));
        }
        let classifier_input = layers[gap].inputs[0];
        for (pos, layer) in layers.iter().enumerate() {
            for &i in &layer.inputs {
                let upstream = &layers[i];
                let vector_out = matches!(upstream.kind, LayerKind::GlobalAvgPool | LayerKind::DenseSigmoid);
                if vector_out && !(upstream.kind == LayerKind::GlobalAvgPool && pos == classifier) {
                    return Err(Error::graph(
                        &layer.name,
                        format!("cannot consume the vector output of `{}`", upstream.name),
                    ));
                }
            }
        }
        if !reaches(&layers, classifier) {
            return Err(Error::graph(&head.name, "classifier is not reachable from the input"));
        }

        let mut seen = HashSet::new();
        for tap in &manifest.taps {
            if !seen.insert(tap.id.as_str()) {
                return Err(Error::graph(&tap.layer, format!("duplicate tap id `{}`", tap.id)));
            }
            let pos = *index
                .get(&tap.layer)
                .ok_or_else(|| Error::graph(&tap.layer, format!("tap `{}` names an unknown layer", tap.id)))?;
            check_tappable(&layers[pos])?;
        }

        Ok(Self {
            layers,
            index,
            input_shape: manifest.input_shape,
            classifier,
            classifier_input,
            taps: manifest.taps.clone(),
            weights_sha256: manifest.weights_sha256.clone(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.index.get(name).map(|&i| &self.layers[i])
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn taps(&self) -> &[TapPoint] {
        &self.taps
    }

    pub fn tap(&self, id: &str) -> Option<&TapPoint> {
        self.taps.iter().find(|t| t.id == id)
    }

    pub fn weights_sha256(&self) -> &str {
        &self.weights_sha256
    }

    pub fn classifier(&self) -> &Layer {
        &self.layers[self.classifier]
    }

    /// Weights and bias of the terminal dense layer.
    pub fn classifier_params(&self) -> (&[f64], f64) {
        match &self.layers[self.classifier].op {
            LayerOp::DenseSigmoid { weights, bias } => (weights, *bias),
            _ => unreachable!("classifier validated as dense_sigmoid"),
        }
    }

    /// The feature-map layer feeding the classifier's global average pool.
    pub fn classifier_input(&self) -> &Layer {
        &self.layers[self.classifier_input]
    }

    /// Runs one sample (`n == 1`) and captures the requested taps.
    pub fn forward(&self, x: &Tensor, taps: &[TapPoint]) -> Result<(f64, ActivationStore)> {
        if x.shape().n != 1 {
            return Err(Error::shape(format!("forward takes one sample, got n = {}", x.shape().n)));
        }
        let (probs, store) = self.execute(x, taps)?;
        Ok((probs[0], store))
    }

    /// Runs a whole batch through the graph; one probability per sample.
    pub fn forward_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.execute(x, &[]).map(|(p, _)| p)
    }

    fn execute(&self, x: &Tensor, taps: &[TapPoint]) -> Result<(Vec<f64>, ActivationStore)> {
        let [c, h, w] = self.input_shape;
        let s = x.shape();
        if (s.c, s.h, s.w) != (c, h, w) {
            return Err(Error::shape(format!(
                "input is {}x{}x{}, model expects {c}x{h}x{w}",
                s.c, s.h, s.w
            )));
        }

        let mut wanted: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        for tap in taps {
            let pos = *self
                .index
                .get(&tap.layer)
                .ok_or_else(|| Error::graph(&tap.layer, format!("tap `{}` names an unknown layer", tap.id)))?;
            check_tappable(&self.layers[pos])?;
            wanted.entry(pos).or_default().push(tap.id.as_str());
        }

        let mut consumers = vec![0usize; self.layers.len()];
        for layer in &self.layers {
            for &i in &layer.inputs {
                consumers[i] += 1;
            }
        }

        let mut maps: Vec<Option<Rc<Tensor>>> = vec![None; self.layers.len()];
        let mut pooled: Option<Vec<f64>> = None;
        let mut probs = Vec::new();
        let mut store = ActivationStore::default();

        for (pos, layer) in self.layers.iter().enumerate() {
            let arg = |k: usize| -> &Rc<Tensor> {
                maps[layer.inputs[k]].as_ref().expect("upstream map computed in topological order")
            };
            let out: Option<Rc<Tensor>> = match &layer.op {
                LayerOp::Input => Some(Rc::new(x.clone())),
                LayerOp::Conv2d { params, relu } => {
                    let y = tensor::conv2d(arg(0), params).map_err(|e| in_layer(e, &layer.name))?;
                    Some(Rc::new(if *relu { tensor::relu(&y) } else { y }))
                }
                LayerOp::BatchNorm(p) => Some(Rc::new(
                    tensor::batchnorm_infer(arg(0), p).map_err(|e| in_layer(e, &layer.name))?,
                )),
                LayerOp::Relu => Some(Rc::new(tensor::relu(arg(0)))),
                LayerOp::MaxPool(p) => Some(Rc::new(
                    tensor::maxpool2d(arg(0), p).map_err(|e| in_layer(e, &layer.name))?,
                )),
                LayerOp::ResidualBegin => Some(Rc::clone(arg(0))),
                LayerOp::ResidualAdd => Some(Rc::new(
                    tensor::residual_add(arg(0), arg(1)).map_err(|e| in_layer(e, &layer.name))?,
                )),
                LayerOp::GlobalAvgPool => {
                    pooled = Some(tensor::global_avg_pool(arg(0)));
                    None
                }
                LayerOp::DenseSigmoid { weights, bias } => {
                    let pooled = pooled.take().expect("classifier follows its pool");
                    if pooled.len() != weights.len() * s.n {
                        return Err(in_layer(
                            Error::shape(format!(
                                "classifier expects {} features, got {}",
                                weights.len(),
                                pooled.len() / s.n
                            )),
                            &layer.name,
                        ));
                    }
                    for v in pooled.chunks(weights.len()) {
                        probs.push(tensor::dense_sigmoid(v, weights, *bias)?);
                    }
                    None
                }
            };
            if let (Some(t), Some(ids)) = (&out, wanted.get(&pos)) {
                for id in ids {
                    store.insert(id, (**t).clone());
                }
            }
            maps[pos] = out;
            for &i in &layer.inputs {
                consumers[i] -= 1;
                if consumers[i] == 0 {
                    maps[i] = None;
                }
            }
        }
        Ok((probs, store))
    }

    /// Propagates shapes from the input and returns one row per layer.
    pub fn validate_shapes(&self) -> Result<Vec<ShapeRow>> {
        let [c, h, w] = self.input_shape;
        let mut shapes: Vec<[usize; 3]> = Vec::with_capacity(self.layers.len());
        let mut rows = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let inp = |k: usize| shapes[layer.inputs[k]];
            let fail = |msg: String| in_layer(Error::shape(msg), &layer.name);
            let out = match &layer.op {
                LayerOp::Input => [c, h, w],
                LayerOp::Conv2d { params, .. } => {
                    let [ic, ih, iw] = inp(0);
                    if ic != params.in_channels() {
                        return Err(fail(format!(
                            "expects {} input channels, upstream has {ic}",
                            params.in_channels()
                        )));
                    }
                    let (oh, ow) = params.output_hw(ih, iw).map_err(|e| in_layer(e, &layer.name))?;
                    [params.out_channels(), oh, ow]
                }
                LayerOp::BatchNorm(p) => {
                    let s = inp(0);
                    if s[0] != p.channels() {
                        return Err(fail(format!("has {} channels, upstream has {}", p.channels(), s[0])));
                    }
                    s
                }
                LayerOp::Relu | LayerOp::ResidualBegin => inp(0),
                LayerOp::MaxPool(p) => {
                    let [ic, ih, iw] = inp(0);
                    let (oh, ow) = p.output_hw(ih, iw).map_err(|e| in_layer(e, &layer.name))?;
                    [ic, oh, ow]
                }
                LayerOp::ResidualAdd => {
                    let (a, b) = (inp(0), inp(1));
                    if a != b {
                        return Err(fail(format!("adds {a:?} to {b:?}")));
                    }
                    a
                }
                LayerOp::GlobalAvgPool => [inp(0)[0], 1, 1],
                LayerOp::DenseSigmoid { weights, .. } => {
                    if inp(0)[0] != weights.len() {
                        return Err(fail(format!(
                            "expects {} features, upstream has {}",
                            weights.len(),
                            inp(0)[0]
                        )));
                    }
                    [1, 1, 1]
                }
            };
            if let Some(declared) = layer.declared_output {
                if declared != out {
                    return Err(fail(format!("declared output {declared:?}, computed {out:?}")));
                }
            }
            shapes.push(out);
            rows.push(ShapeRow {
                layer: layer.name.clone(),
                kind: layer.kind,
                channels: out[0],
                height: out[1],
                width: out[2],
            });
        }
        Ok(rows)
    }
}

fn in_layer(err: Error, layer: &str) -> Error {
    match err {
        Error::ShapeMismatch(msg) => Error::ShapeMismatch(format!("layer `{layer}`: {msg}")),
        other => other,
    }
}

fn check_tappable(layer: &Layer) -> Result<()> {
    if matches!(layer.kind, LayerKind::GlobalAvgPool | LayerKind::DenseSigmoid) {
        return Err(Error::graph(&layer.name, "taps must name a feature-map layer"));
    }
    Ok(())
}

fn reaches(layers: &[Layer], target: usize) -> bool {
    let mut stack = vec![target];
    let mut seen = vec![false; layers.len()];
    while let Some(i) = stack.pop() {
        if layers[i].kind == LayerKind::Input {
            return true;
        }
        if !std::mem::replace(&mut seen[i], true) {
            stack.extend(&layers[i].inputs);
        }
    }
    false
}

/// Kahn's algorithm; ties go to the earlier manifest position so a valid
/// manifest order is preserved.
fn topological_order(layers: &[LayerManifest]) -> Result<Vec<usize>> {
    let mut by_name = HashMap::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        if l.name.is_empty() {
            return Err(Error::graph("<unnamed>", "layer names must be non-empty"));
        }
        if by_name.insert(l.name.as_str(), i).is_some() {
            return Err(Error::graph(&l.name, "duplicate layer name"));
        }
    }
    let mut indegree = vec![0usize; layers.len()];
    let mut downstream: Vec<Vec<usize>> = vec![Vec::new(); layers.len()];
    for (i, l) in layers.iter().enumerate() {
        let arity = l.op.kind().arity();
        if l.inputs.len() != arity {
            return Err(Error::graph(
                &l.name,
                format!("{} takes {arity} input(s), got {}", l.op.kind().as_str(), l.inputs.len()),
            ));
        }
        for name in &l.inputs {
            let &j = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::graph(&l.name, format!("unknown input `{name}`")))?;
            indegree[i] += 1;
            downstream[j].push(i);
        }
    }
    let mut ready: std::collections::BTreeSet<usize> =
        (0..layers.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(layers.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &d in &downstream[i] {
            indegree[d] -= 1;
            if indegree[d] == 0 {
                ready.insert(d);
            }
        }
    }
    if order.len() != layers.len() {
        let stuck = (0..layers.len()).find(|&i| indegree[i] > 0).expect("cycle member");
        return Err(Error::graph(&layers[stuck].name, "layer is part of a cycle"));
    }
    Ok(order)
}

fn slice<'a>(weights: &'a [f32], layer: &str, what: &str, blob: BlobRef, expected: usize) -> Result<&'a [f32]> {
    if blob.len != expected {
        return Err(Error::graph(
            layer,
            format!("{what} declares {} values, shape needs {expected}", blob.len),
        ));
    }
    let end = blob
        .offset
        .checked_add(blob.len)
        .filter(|&e| e <= weights.len())
        .ok_or_else(|| Error::graph(layer, format!("{what} runs past the end of the weights blob")))?;
    Ok(&weights[blob.offset..end])
}

fn bind_op(lm: &LayerManifest, weights: &[f32]) -> Result<LayerOp> {
    let name = lm.name.as_str();
    let to_graph = |e: Error| match e {
        Error::ShapeMismatch(msg) | Error::NonFinite(msg) => Error::graph(name, msg),
        other => other,
    };
    Ok(match &lm.op {
        LayerOpManifest::Input => LayerOp::Input,
        LayerOpManifest::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            activation,
            weights: wref,
            bias,
        } => {
            let shape = Shape4::new(*out_channels, *in_channels, kernel[0], kernel[1]);
            let w = slice(weights, name, "weights", *wref, shape.len())?;
            let b = slice(weights, name, "bias", *bias, *out_channels)?;
            let params = ConvParams::new(
                Tensor::new(shape, w.to_vec()).map_err(to_graph)?,
                b.to_vec(),
                (stride[0], stride[1]),
                (padding[0], padding[1]),
            )
            .map_err(to_graph)?;
            LayerOp::Conv2d {
                params,
                relu: *activation == Activation::Relu,
            }
        }
        LayerOpManifest::Batchnorm {
            epsilon,
            gamma,
            beta,
            running_mean,
            running_var,
        } => {
            let c = gamma.len;
            let get = |what, r| slice(weights, name, what, r, c).map(<[f32]>::to_vec);
            LayerOp::BatchNorm(
                BatchNormParams::new(
                    get("gamma", *gamma)?,
                    get("beta", *beta)?,
                    get("running_mean", *running_mean)?,
                    get("running_var", *running_var)?,
                    *epsilon,
                )
                .map_err(to_graph)?,
            )
        }
        LayerOpManifest::Relu => LayerOp::Relu,
        LayerOpManifest::Maxpool {
            kernel,
            stride,
            ceil_mode,
        } => {
            if kernel.contains(&0) || stride.contains(&0) {
                return Err(Error::graph(name, "pool kernel and stride must be at least 1"));
            }
            LayerOp::MaxPool(PoolParams {
                kernel: (kernel[0], kernel[1]),
                stride: (stride[0], stride[1]),
                ceil_mode: *ceil_mode,
            })
        }
        LayerOpManifest::GlobalAvgPool => LayerOp::GlobalAvgPool,
        LayerOpManifest::DenseSigmoid { weights: wref, bias } => {
            let w = slice(weights, name, "weights", *wref, wref.len)?;
            let b = slice(weights, name, "bias", *bias, 1)?;
            if w.is_empty() || w.iter().chain(b).any(|v| !v.is_finite()) {
                return Err(Error::graph(name, "dense weights must be non-empty and finite"));
            }
            LayerOp::DenseSigmoid {
                weights: w.iter().map(|&v| v as f64).collect(),
                bias: b[0] as f64,
            }
        }
        LayerOpManifest::ResidualBegin => LayerOp::ResidualBegin,
        LayerOpManifest::ResidualAdd => LayerOp::ResidualAdd,
    })
}

/// Captured activations keyed by tap id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationStore {
    maps: BTreeMap<String, Tensor>,
}

impl ActivationStore {
    pub fn insert(&mut self, tap_id: &str, t: Tensor) {
        self.maps.insert(tap_id.to_string(), t);
    }

    pub fn get(&self, tap_id: &str) -> Option<&Tensor> {
        self.maps.get(tap_id)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.maps.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// One row of the shape table produced by [`ModelGraph::validate_shapes`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeRow {
    pub layer: String,
    pub kind: LayerKind,
    /// Filter count (output channels).
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}
