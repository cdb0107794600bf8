//! Declarative network descriptions.
//!
//! An [`ArchSpec`] is a TOML document listing layers in execution order.
//! Example:
//!
//! ```toml
//! name = "mlp"
//! input_shape = [2, 1, 1]
//!
//! [[layers]]
//! name = "fc1"
//! kind = "dense"
//! base_in = 2
//! base_out = 16
//! norm = true
//! activation = "relu"
//! ```
//!
//! Layer defaults: `kernel = 1`, `stride = 1`, "same" padding, `slimmable = true`,
//! `stage = 0`, `norm = false`, `activation = "none"`, `bias = !norm`.
//! Depthwise convolutions and pooling layers carry their input channel count
//! through and ignore the width ratio.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv2d,
    DepthwiseConv2d,
    GlobalAvgpool,
}

impl LayerKind {
    /// Layers whose output channel count follows their input.
    pub fn channel_preserving(self) -> bool {
        matches!(self, LayerKind::DepthwiseConv2d | LayerKind::GlobalAvgpool)
    }

    pub fn has_weights(self) -> bool {
        self != LayerKind::GlobalAvgpool
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub base_in: usize,
    pub base_out: usize,
    #[serde(default = "one")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default = "yes")]
    pub slimmable: bool,
    #[serde(default)]
    pub stage: usize,
    #[serde(default)]
    pub norm: bool,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<bool>,
    #[serde(default)]
    pub output_averaging: bool,
    /// Output width is tied to `active_in * expand` instead of the ratio.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expand: Option<usize>,
}

impl LayerSpec {
    pub fn has_bias(&self) -> bool {
        self.kind.has_weights() && self.bias.unwrap_or(!self.norm)
    }

    /// True when this layer's output width is chosen by the width ratio.
    pub fn width_bearing(&self) -> bool {
        self.slimmable && !self.kind.channel_preserving() && self.expand.is_none()
    }

    pub fn effective_padding(&self) -> usize {
        self.padding
            .unwrap_or(if self.kernel % 2 == 1 { self.kernel / 2 } else { 0 })
    }
}

/// How a ratio-scaled channel count is snapped to the divisor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthRounding {
    /// `floor(base * r / d) * d`, at least `d`.
    #[default]
    Floor,
    /// Round to the nearest multiple of `d`, bumped up one step if that loses
    /// more than 10% (the MobileNet v2 reference convention).
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    #[serde(default)]
    pub width_rounding: WidthRounding,
    /// `(channels, height, width)`.
    pub input_shape: [usize; 3],
    /// `[from, to]`: the output of layer `from` is added to the output of layer `to`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub residuals: Vec<[usize; 2]>,
    pub layers: Vec<LayerSpec>,
}

/// Spatial extent entering and leaving a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Spatial {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

const MOBILENET_V1: &str = include_str!("../archs/mobilenet_v1.toml");
const MOBILENET_V2: &str = include_str!("../archs/mobilenet_v2.toml");
const MLP: &str = include_str!("../archs/mlp_2_16_16_2.toml");
const SMALL_CNN: &str = include_str!("../archs/small_cnn.toml");

impl ArchSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ArchSpec = toml::from_str(text).map_err(|e| Error::Config(format!("arch spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("arch spec serializes")
    }

    /// Names of the architectures shipped with the crate.
    pub fn builtin_names() -> &'static [&'static str] {
        &["mobilenet_v1", "mobilenet_v2", "mlp_2_16_16_2", "small_cnn"]
    }

    pub fn builtin(name: &str) -> Option<Self> {
        let text = match name {
            "mobilenet_v1" => MOBILENET_V1,
            "mobilenet_v2" => MOBILENET_V2,
            "mlp_2_16_16_2" | "mlp" => MLP,
            "small_cnn" => SMALL_CNN,
            _ => return None,
        };
        Some(Self::from_toml(text).expect("shipped arch specs are valid"))
    }

    /// Resolves a builtin name or reads a TOML file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if let Some(spec) = Self::builtin(name_or_path) {
            return Ok(spec);
        }
        let text = std::fs::read_to_string(name_or_path)
            .map_err(|e| Error::Config(format!("cannot read arch `{name_or_path}`: {e}")))?;
        Self::from_toml(&text)
    }

    pub fn num_width_bearing(&self) -> usize {
        self.layers.iter().filter(|l| l.width_bearing()).count()
    }

    pub fn num_stages(&self) -> usize {
        self.layers.iter().map(|l| l.stage).max().map_or(0, |s| s + 1)
    }

    pub fn output_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.base_out)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("arch `{}`: {msg}", self.name)));
        if self.layers.is_empty() {
            return bad("no layers".into());
        }
        if self.input_shape.contains(&0) {
            return bad(format!("input shape {:?} has a zero extent", self.input_shape));
        }
        let mut channels = self.input_shape[0];
        let mut prev_stage = self.layers[0].stage;
        for (i, l) in self.layers.iter().enumerate() {
            if l.base_in != channels {
                return bad(format!(
                    "layer {i} `{}` expects {} input channels but receives {channels}",
                    l.name, l.base_in
                ));
            }
            if l.kind.channel_preserving() && l.base_out != l.base_in {
                return bad(format!("layer `{}` must keep its channel count", l.name));
            }
            if l.base_out == 0 || l.kernel == 0 || l.stride == 0 {
                return bad(format!("layer `{}` has a zero size attribute", l.name));
            }
            if let Some(t) = l.expand {
                if l.kind != LayerKind::Conv2d || l.base_out != l.base_in * t {
                    return bad(format!(
                        "expansion layer `{}` must be a conv with base_out = base_in * {t}",
                        l.name
                    ));
                }
            }
            if l.output_averaging && l.kind == LayerKind::DepthwiseConv2d {
                return bad(format!("depthwise layer `{}` cannot use output averaging", l.name));
            }
            if l.stage < prev_stage || l.stage > prev_stage + 1 {
                return bad(format!("stage ids are not contiguous at layer `{}`", l.name));
            }
            prev_stage = l.stage;
            channels = l.base_out;
        }
        for &[from, to] in &self.residuals {
            if from >= to || to >= self.layers.len() {
                return bad(format!("residual [{from}, {to}] out of order"));
            }
            if self.layers[from].base_out != self.layers[to].base_out {
                return bad(format!("residual [{from}, {to}] joins different channel counts"));
            }
        }
        self.spatial_plan().map(|_| ())
    }

    /// Spatial sizes through the network, checking kernels fit.
    pub fn spatial_plan(&self) -> Result<Vec<Spatial>> {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        let mut plan = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let in_hw = (h, w);
            match l.kind {
                LayerKind::Dense => {
                    if (h, w) != (1, 1) {
                        return Err(Error::Config(format!(
                            "dense layer `{}` needs 1x1 spatial input, got {h}x{w}",
                            l.name
                        )));
                    }
                }
                LayerKind::GlobalAvgpool => {
                    h = 1;
                    w = 1;
                }
                LayerKind::Conv2d | LayerKind::DepthwiseConv2d => {
                    let p = l.effective_padding();
                    if l.kernel > h + 2 * p || l.kernel > w + 2 * p {
                        return Err(Error::Config(format!(
                            "layer `{}` kernel {} exceeds input {h}x{w}",
                            l.name, l.kernel
                        )));
                    }
                    h = (h + 2 * p - l.kernel) / l.stride + 1;
                    w = (w + 2 * p - l.kernel) / l.stride + 1;
                }
            }
            plan.push(Spatial { in_hw, out_hw: (h, w) });
        }
        Ok(plan)
    }
}
