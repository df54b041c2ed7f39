//! On-disk model description.
//!
//! A model is a JSON manifest plus a headerless blob of little-endian `f32`
//! values. Every parameter array in the manifest is a [`BlobRef`] into that
//! blob, measured in `f32` elements.

use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// `(c, h, w)` of a single input sample.
    pub input_shape: [usize; 3],
    /// Lowercase hex SHA-256 of the weights blob bytes.
    pub weights_sha256: String,
    pub classifier: String,
    pub layers: Vec<LayerManifest>,
    #[serde(default)]
    pub taps: Vec<TapPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub name: String,
    #[serde(flatten)]
    pub op: LayerOpManifest,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    /// Declared `(c, h, w)` output; checked during shape validation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_shape: Option<[usize; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum LayerOpManifest {
    Input,
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
        /// Activation fused onto the convolution output.
        #[serde(default)]
        activation: Activation,
        weights: BlobRef,
        bias: BlobRef,
    },
    Batchnorm {
        epsilon: f32,
        gamma: BlobRef,
        beta: BlobRef,
        running_mean: BlobRef,
        running_var: BlobRef,
    },
    Relu,
    Maxpool {
        kernel: [usize; 2],
        stride: [usize; 2],
        #[serde(default)]
        ceil_mode: bool,
    },
    GlobalAvgPool,
    DenseSigmoid {
        weights: BlobRef,
        bias: BlobRef,
    },
    ResidualBegin,
    ResidualAdd,
}

impl LayerOpManifest {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerOpManifest::Input => LayerKind::Input,
            LayerOpManifest::Conv2d { .. } => LayerKind::Conv2d,
            LayerOpManifest::Batchnorm { .. } => LayerKind::Batchnorm,
            LayerOpManifest::Relu => LayerKind::Relu,
            LayerOpManifest::Maxpool { .. } => LayerKind::Maxpool,
            LayerOpManifest::GlobalAvgPool => LayerKind::GlobalAvgPool,
            LayerOpManifest::DenseSigmoid { .. } => LayerKind::DenseSigmoid,
            LayerOpManifest::ResidualBegin => LayerKind::ResidualBegin,
            LayerOpManifest::ResidualAdd => LayerKind::ResidualAdd,
        }
    }

    pub(crate) fn blobs(&self) -> Vec<(&'static str, BlobRef)> {
        match *self {
            LayerOpManifest::Conv2d { weights, bias, .. } => vec![("weights", weights), ("bias", bias)],
            LayerOpManifest::Batchnorm {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => vec![
                ("gamma", gamma),
                ("beta", beta),
                ("running_mean", running_mean),
                ("running_var", running_var),
            ],
            LayerOpManifest::DenseSigmoid { weights, bias } => vec![("weights", weights), ("bias", bias)],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv2d,
    Batchnorm,
    Relu,
    Maxpool,
    GlobalAvgPool,
    DenseSigmoid,
    ResidualBegin,
    ResidualAdd,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Batchnorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::Maxpool => "maxpool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::DenseSigmoid => "dense_sigmoid",
            LayerKind::ResidualBegin => "residual_begin",
            LayerKind::ResidualAdd => "residual_add",
        }
    }

    pub(crate) fn arity(self) -> usize {
        match self {
            LayerKind::Input => 0,
            LayerKind::ResidualAdd => 2,
            _ => 1,
        }
    }
}

/// A named capture point on a layer's output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TapPoint {
    pub id: String,
    pub layer: String,
    /// Optional grouping label such as `stage4`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl TapPoint {
    pub fn new(id: impl Into<String>, layer: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            layer: layer.into(),
            group: None,
        }
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group = Some(group.into());
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_json_layout() {
        let layer = LayerManifest {
            name: "pool".into(),
            op: LayerOpManifest::Maxpool {
                kernel: [2, 2],
                stride: [2, 2],
                ceil_mode: false,
            },
            inputs: vec!["conv".into()],
            output_shape: None,
        };
        let json = serde_json::to_value(&layer).unwrap();
        assert_eq!(json["kind"], "maxpool");
        assert_eq!(json["params"]["kernel"], serde_json::json!([2, 2]));
        assert_eq!(serde_json::from_value::<LayerManifest>(json).unwrap(), layer);

        let relu: LayerManifest =
            serde_json::from_str(r#"{"name":"r","kind":"relu","inputs":["x"]}"#).unwrap();
        assert_eq!(relu.op, LayerOpManifest::Relu);
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let err = serde_json::from_str::<LayerManifest>(r#"{"name":"s","kind":"softmax","inputs":["x"]}"#);
        assert!(err.is_err());
    }
}
