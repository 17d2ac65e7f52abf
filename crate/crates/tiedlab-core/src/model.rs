//! Declarative model configs and the sequential model builder.
//!
//! A [`ModelConfig`] is a JSON document listing typed layer nodes; [`build`]
//! validates the shape chain, draws seeded weights and returns a [`Model`]
//! exposing forward, backward, parameter iteration and accounting. Residual
//! bottleneck blocks (standard and tied) are composite nodes built from the
//! primitive layers.
//!
//! Config JSON shape:
//!
//! ```json
//! {
//!   "name": "toy",
//!   "input": [1, 16, 16],
//!   "classes": 2,
//!   "seed": 0,
//!   "layers": [
//!     {"kind": "conv", "c_in": 1, "c_out": 8, "k": 3, "pad": 1},
//!     {"kind": "relu"},
//!     {"kind": "tbc", "c_in": 8, "c_out": 16, "k": 3, "pad": 1, "blocks": 2},
//!     {"kind": "gap"},
//!     {"kind": "tfc", "c_in": 16, "c_out": 2, "blocks": 2}
//!   ]
//! }
//! ```
//!
//! Unknown keys are rejected, layer errors name the offending index, and a
//! config plus its seed fully determine the built weights.

use serde::{Deserialize, Serialize};

use crate::autograd::{
    conv_backward, fc_backward_rows, global_avg_pool_backward, relu_backward, relu_backward_mat,
    tfc_backward_rows, tied_se_backward,
};
use crate::error::{Error, Result};
use crate::ops::{conv2d, fully_connected, group_conv2d, relu, relu_mat, ConvSpec, ConvWeights};
use crate::rng::Rng;
use crate::tensor::{Tensor2, Tensor4};
use crate::tied::{
    tbc_forward_fast, tfc_forward_rows, tgc_forward, tied_se_forward, TfcWeights, TiedConvWeights,
    TiedSeSpec, TiedSeWeights,
};

/// Shape of the value flowing between layers: a feature map (c, h, w) or a
/// flat per-sample feature vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Shape {
    Map(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    pub fn label(&self) -> String {
        match self {
            Shape::Map(c, h, w) => format!("{c}x{h}x{w}"),
            Shape::Flat(d) => format!("{d}"),
        }
    }
}

/// Default reduction ratio of the optional TiedSE stage inside a tied
/// bottleneck.
pub const BOTTLENECK_SE_RATIO: usize = 4;

fn default_stride() -> usize {
    1
}

fn default_bias() -> bool {
    true
}

/// One typed layer in a model config.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind")]
pub enum LayerNode {
    #[serde(rename = "conv")]
    Conv {
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    #[serde(rename = "gconv")]
    GConv {
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
    },
    #[serde(rename = "tbc")]
    Tbc {
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        blocks: usize,
        bias: bool,
    },
    #[serde(rename = "tgc")]
    Tgc {
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        blocks: usize,
        bias: bool,
    },
    #[serde(rename = "fc")]
    Fc {
        c_in: usize,
        c_out: usize,
        bias: bool,
    },
    #[serde(rename = "tfc")]
    Tfc {
        c_in: usize,
        c_out: usize,
        blocks: usize,
        bias: bool,
    },
    #[serde(rename = "tied_se")]
    TiedSe {
        c: usize,
        r: usize,
        blocks: usize,
        bias: bool,
    },
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "gap")]
    Gap,
    #[serde(rename = "flatten")]
    Flatten,
    #[serde(rename = "bottleneck")]
    Bottleneck {
        c_in: usize,
        planes: usize,
        stride: usize,
        bias: bool,
    },
    #[serde(rename = "tied_bottleneck")]
    TiedBottleneck {
        c_in: usize,
        planes: usize,
        blocks: usize,
        stride: usize,
        se: bool,
        bias: bool,
    },
}

// Per-kind parameter structs so unknown keys are rejected with a clear
// message; serde's internally-tagged enums cannot enforce that themselves.
mod raw {
    use serde::Deserialize;

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Conv {
        pub c_in: usize,
        pub c_out: usize,
        pub k: usize,
        #[serde(default = "super::default_stride")]
        pub stride: usize,
        #[serde(default)]
        pub pad: usize,
        #[serde(default = "super::default_bias")]
        pub bias: bool,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct GConv {
        pub c_in: usize,
        pub c_out: usize,
        pub k: usize,
        #[serde(default = "super::default_stride")]
        pub stride: usize,
        #[serde(default)]
        pub pad: usize,
        pub groups: usize,
        #[serde(default = "super::default_bias")]
        pub bias: bool,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Tbc {
        pub c_in: usize,
        pub c_out: usize,
        pub k: usize,
        #[serde(default = "super::default_stride")]
        pub stride: usize,
        #[serde(default)]
        pub pad: usize,
        pub blocks: usize,
        #[serde(default = "super::default_bias")]
        pub bias: bool,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Tgc {
        pub c_in: usize,
        pub c_out: usize,
        pub k: usize,
        #[serde(default = "super::default_stride")]
        pub stride: usize,
        #[serde(default)]
        pub pad: usize,
        pub groups: usize,
        pub blocks: usize,
        #[serde(default = "super::default_bias")]
        pub bias: bool,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Fc {
        pub c_in: usize,
        pub c_out: usize,
        #[serde(default = "super::default_bias")]
        pub bias: bool,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Tfc {
        pub c_in: usize,
        pub c_out: usize,
        pub blocks: usize,
        #[serde(default = "super::default_bias")]
        pub bias: bool,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct TiedSe {
        pub c: usize,
        pub r: usize,
        pub blocks: usize,
        #[serde(default = "super::default_bias")]
        pub bias: bool,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Empty {}

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Bottleneck {
        pub c_in: usize,
        pub planes: usize,
        #[serde(default = "super::default_stride")]
        pub stride: usize,
        #[serde(default = "super::default_bias")]
        pub bias: bool,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct TiedBottleneck {
        pub c_in: usize,
        pub planes: usize,
        pub blocks: usize,
        #[serde(default = "super::default_stride")]
        pub stride: usize,
        #[serde(default)]
        pub se: bool,
        #[serde(default = "super::default_bias")]
        pub bias: bool,
    }
}

impl<'de> Deserialize<'de> for LayerNode {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        use serde::de::Error as DeError;
        let mut value = serde_json::Value::deserialize(deserializer)?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| DeError::custom("layer must be a JSON object"))?;
        let kind = obj
            .remove("kind")
            .and_then(|v| v.as_str().map(str::to_string))
            .ok_or_else(|| DeError::custom("layer missing string field `kind`"))?;
        let rest = serde_json::Value::Object(obj.clone());
        let fail = |e: serde_json::Error| DeError::custom(format!("layer kind `{kind}`: {e}"));
        Ok(match kind.as_str() {
            "conv" => {
                let p: raw::Conv = serde_json::from_value(rest).map_err(fail)?;
                LayerNode::Conv {
                    c_in: p.c_in,
                    c_out: p.c_out,
                    k: p.k,
                    stride: p.stride,
                    pad: p.pad,
                    bias: p.bias,
                }
            }
            "gconv" => {
                let p: raw::GConv = serde_json::from_value(rest).map_err(fail)?;
                LayerNode::GConv {
                    c_in: p.c_in,
                    c_out: p.c_out,
                    k: p.k,
                    stride: p.stride,
                    pad: p.pad,
                    groups: p.groups,
                    bias: p.bias,
                }
            }
            "tbc" => {
                let p: raw::Tbc = serde_json::from_value(rest).map_err(fail)?;
                LayerNode::Tbc {
                    c_in: p.c_in,
                    c_out: p.c_out,
                    k: p.k,
                    stride: p.stride,
                    pad: p.pad,
                    blocks: p.blocks,
                    bias: p.bias,
                }
            }
            "tgc" => {
                let p: raw::Tgc = serde_json::from_value(rest).map_err(fail)?;
                LayerNode::Tgc {
                    c_in: p.c_in,
                    c_out: p.c_out,
                    k: p.k,
                    stride: p.stride,
                    pad: p.pad,
                    groups: p.groups,
                    blocks: p.blocks,
                    bias: p.bias,
                }
            }
            "fc" => {
                let p: raw::Fc = serde_json::from_value(rest).map_err(fail)?;
                LayerNode::Fc {
                    c_in: p.c_in,
                    c_out: p.c_out,
                    bias: p.bias,
                }
            }
            "tfc" => {
                let p: raw::Tfc = serde_json::from_value(rest).map_err(fail)?;
                LayerNode::Tfc {
                    c_in: p.c_in,
                    c_out: p.c_out,
                    blocks: p.blocks,
                    bias: p.bias,
                }
            }
            "tied_se" => {
                let p: raw::TiedSe = serde_json::from_value(rest).map_err(fail)?;
                LayerNode::TiedSe {
                    c: p.c,
                    r: p.r,
                    blocks: p.blocks,
                    bias: p.bias,
                }
            }
            "relu" => {
                let _: raw::Empty = serde_json::from_value(rest).map_err(fail)?;
                LayerNode::Relu
            }
            "gap" => {
                let _: raw::Empty = serde_json::from_value(rest).map_err(fail)?;
                LayerNode::Gap
            }
            "flatten" => {
                let _: raw::Empty = serde_json::from_value(rest).map_err(fail)?;
                LayerNode::Flatten
            }
            "bottleneck" => {
                let p: raw::Bottleneck = serde_json::from_value(rest).map_err(fail)?;
                LayerNode::Bottleneck {
                    c_in: p.c_in,
                    planes: p.planes,
                    stride: p.stride,
                    bias: p.bias,
                }
            }
            "tied_bottleneck" => {
                let p: raw::TiedBottleneck = serde_json::from_value(rest).map_err(fail)?;
                LayerNode::TiedBottleneck {
                    c_in: p.c_in,
                    planes: p.planes,
                    blocks: p.blocks,
                    stride: p.stride,
                    se: p.se,
                    bias: p.bias,
                }
            }
            other => return Err(DeError::custom(format!("unknown layer kind `{other}`"))),
        })
    }
}

/// The convolution stages of a (tied) bottleneck block: 1×1 reduce, 3×3 mid
/// (tied in the tied variant), 1×1 expand to 4·planes, optional TiedSE, and
/// a 1×1 projection shortcut when the input and output shapes differ.
#[derive(Debug, Clone)]
pub struct BottleneckParts {
    pub reduce: ConvSpec,
    pub mid: ConvSpec,
    pub expand: ConvSpec,
    pub se: Option<TiedSeSpec>,
    pub shortcut: Option<ConvSpec>,
}

impl LayerNode {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerNode::Conv { .. } => "conv",
            LayerNode::GConv { .. } => "gconv",
            LayerNode::Tbc { .. } => "tbc",
            LayerNode::Tgc { .. } => "tgc",
            LayerNode::Fc { .. } => "fc",
            LayerNode::Tfc { .. } => "tfc",
            LayerNode::TiedSe { .. } => "tied_se",
            LayerNode::Relu => "relu",
            LayerNode::Gap => "gap",
            LayerNode::Flatten => "flatten",
            LayerNode::Bottleneck { .. } => "bottleneck",
            LayerNode::TiedBottleneck { .. } => "tied_bottleneck",
        }
    }

    /// The convolution spec of a conv-like node.
    pub fn conv_spec(&self) -> Option<ConvSpec> {
        match *self {
            LayerNode::Conv {
                c_in,
                c_out,
                k,
                stride,
                pad,
                bias,
            } => Some(ConvSpec::standard(c_in, c_out, k, stride, pad, bias)),
            LayerNode::GConv {
                c_in,
                c_out,
                k,
                stride,
                pad,
                groups,
                bias,
            } => Some(ConvSpec::grouped(c_in, c_out, k, stride, pad, groups, bias)),
            LayerNode::Tbc {
                c_in,
                c_out,
                k,
                stride,
                pad,
                blocks,
                bias,
            } => Some(ConvSpec::tied(c_in, c_out, k, stride, pad, blocks, bias)),
            LayerNode::Tgc {
                c_in,
                c_out,
                k,
                stride,
                pad,
                groups,
                blocks,
                bias,
            } => Some(ConvSpec::tied_grouped(
                c_in, c_out, k, stride, pad, groups, blocks, bias,
            )),
            _ => None,
        }
    }

    /// Substructure of a bottleneck node.
    pub fn bottleneck_parts(&self) -> Option<Result<BottleneckParts>> {
        let (c_in, planes, blocks, stride, se, bias) = match *self {
            LayerNode::Bottleneck {
                c_in,
                planes,
                stride,
                bias,
            } => (c_in, planes, 1, stride, false, bias),
            LayerNode::TiedBottleneck {
                c_in,
                planes,
                blocks,
                stride,
                se,
                bias,
            } => (c_in, planes, blocks, stride, se, bias),
            _ => return None,
        };
        let c_out = 4 * planes;
        let build = || -> Result<BottleneckParts> {
            if planes == 0 || blocks == 0 || planes % blocks != 0 {
                return Err(Error::shape(format!(
                    "bottleneck planes {planes} must be a positive multiple of blocks {blocks}"
                )));
            }
            let mid = if blocks > 1 {
                ConvSpec::tied(planes, planes, 3, stride, 1, blocks, bias)
            } else {
                ConvSpec::standard(planes, planes, 3, stride, 1, bias)
            };
            let se_spec = se.then(|| TiedSeSpec::new(c_out, BOTTLENECK_SE_RATIO, blocks, bias));
            if let Some(s) = &se_spec {
                s.validate()?;
            }
            // projection shortcut only when the shapes differ
            let shortcut = (c_in != c_out || stride != 1)
                .then(|| ConvSpec::standard(c_in, c_out, 1, stride, 0, bias));
            Ok(BottleneckParts {
                reduce: ConvSpec::standard(c_in, planes, 1, 1, 0, bias),
                mid,
                expand: ConvSpec::standard(planes, c_out, 1, 1, 0, bias),
                se: se_spec,
                shortcut,
            })
        };
        Some(build())
    }

    /// Validate this node against the incoming shape and return the outgoing
    /// shape.
    pub fn out_shape(&self, input: &Shape) -> Result<Shape> {
        match self {
            LayerNode::Conv { .. }
            | LayerNode::GConv { .. }
            | LayerNode::Tbc { .. }
            | LayerNode::Tgc { .. } => {
                let spec = self.conv_spec().expect("conv-like node");
                spec.validate()?;
                match input {
                    Shape::Map(c, h, w) if *c == spec.c_in => {
                        let (oh, ow) = spec.out_dims(*h, *w)?;
                        Ok(Shape::Map(spec.c_out, oh, ow))
                    }
                    Shape::Map(c, ..) => Err(Error::shape(format!(
                        "{} expects {} input channels, got {c}",
                        self.kind_name(),
                        spec.c_in
                    ))),
                    Shape::Flat(_) => Err(Error::shape(format!(
                        "{} cannot consume a flat input",
                        self.kind_name()
                    ))),
                }
            }
            LayerNode::Fc { c_in, c_out, .. } => match input {
                Shape::Flat(d) if d == c_in => Ok(Shape::Flat(*c_out)),
                other => Err(Error::shape(format!(
                    "fc expects a flat input of {c_in}, got {other:?}"
                ))),
            },
            LayerNode::Tfc {
                c_in,
                c_out,
                blocks,
                ..
            } => {
                if *blocks == 0 || c_in % blocks != 0 || c_out % blocks != 0 {
                    return Err(Error::shape(format!(
                        "blocks {blocks} must divide c_in {c_in} and c_out {c_out}"
                    )));
                }
                match input {
                    Shape::Flat(d) if d == c_in => Ok(Shape::Flat(*c_out)),
                    other => Err(Error::shape(format!(
                        "tfc expects a flat input of {c_in}, got {other:?}"
                    ))),
                }
            }
            LayerNode::TiedSe { c, r, blocks, bias } => {
                let spec = TiedSeSpec::new(*c, *r, *blocks, *bias);
                spec.validate()?;
                match input {
                    Shape::Map(ci, h, w) if ci == c => Ok(Shape::Map(*c, *h, *w)),
                    other => Err(Error::shape(format!(
                        "tied_se expects a {c}-channel map, got {other:?}"
                    ))),
                }
            }
            LayerNode::Relu => Ok(input.clone()),
            LayerNode::Gap => match input {
                Shape::Map(c, ..) => Ok(Shape::Flat(*c)),
                Shape::Flat(_) => Err(Error::shape("gap expects a feature map")),
            },
            LayerNode::Flatten => match input {
                Shape::Map(c, h, w) => Ok(Shape::Flat(c * h * w)),
                Shape::Flat(_) => Err(Error::shape("flatten expects a feature map")),
            },
            LayerNode::Bottleneck { .. } | LayerNode::TiedBottleneck { .. } => {
                let parts = self.bottleneck_parts().expect("bottleneck node")?;
                match input {
                    Shape::Map(c, h, w) if *c == parts.reduce.c_in => {
                        let mid_in = parts.reduce.c_out;
                        let (oh, ow) = parts.mid.out_dims(*h, *w)?;
                        let _ = mid_in;
                        Ok(Shape::Map(parts.expand.c_out, oh, ow))
                    }
                    other => Err(Error::shape(format!(
                        "bottleneck expects a {}-channel map, got {other:?}",
                        parts.reduce.c_in
                    ))),
                }
            }
        }
    }
}

/// Declarative model description; see the module docs for the JSON shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    /// Input feature-map shape as [c, h, w].
    pub input: [usize; 3],
    pub classes: usize,
    /// Weight-initialization seed.
    pub seed: u64,
    pub layers: Vec<LayerNode>,
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialization");
        s.push('\n');
        s
    }

    pub fn input_shape(&self) -> Shape {
        Shape::Map(self.input[0], self.input[1], self.input[2])
    }

    /// Check every dimension and the full shape chain; errors name the
    /// offending layer index.
    pub fn validate(&self) -> Result<()> {
        if self.input.contains(&0) {
            return Err(Error::Config {
                layer: None,
                message: format!("input shape {:?} has a zero dimension", self.input),
            });
        }
        if self.classes < 2 {
            return Err(Error::Config {
                layer: None,
                message: format!("classes must be >= 2, got {}", self.classes),
            });
        }
        let mut shape = self.input_shape();
        for (i, node) in self.layers.iter().enumerate() {
            shape = node
                .out_shape(&shape)
                .map_err(|e| Error::config(i, e.to_string()))?;
        }
        Ok(())
    }

    /// Shape after every layer, starting with the input shape.
    pub fn shape_chain(&self) -> Result<Vec<Shape>> {
        let mut shapes = vec![self.input_shape()];
        for (i, node) in self.layers.iter().enumerate() {
            let next = node
                .out_shape(shapes.last().unwrap())
                .map_err(|e| Error::config(i, e.to_string()))?;
            shapes.push(next);
        }
        Ok(shapes)
    }
}

/// Value flowing through the model: a feature map or a per-sample row
/// matrix.
#[derive(Debug, Clone)]
pub enum Value {
    Map(Tensor4),
    Flat(Tensor2),
}

impl Value {
    pub fn shape(&self) -> Shape {
        match self {
            Value::Map(t) => Shape::Map(t.c(), t.h(), t.w()),
            Value::Flat(m) => Shape::Flat(m.cols()),
        }
    }

    pub fn as_map(&self) -> Result<&Tensor4> {
        match self {
            Value::Map(t) => Ok(t),
            Value::Flat(_) => Err(Error::shape("expected a feature map, got flat features")),
        }
    }

    pub fn as_flat(&self) -> Result<&Tensor2> {
        match self {
            Value::Flat(m) => Ok(m),
            Value::Map(_) => Err(Error::shape("expected flat features, got a feature map")),
        }
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    spec: ConvSpec,
    w: Tensor2,
    bias: Option<Vec<f64>>,
}

impl ConvLayer {
    fn init(spec: ConvSpec, rng: &mut Rng) -> Result<Self> {
        let wts = TiedConvWeights::init(&spec, rng)?;
        Ok(ConvLayer {
            spec,
            w: wts.w,
            bias: wts.bias,
        })
    }

    fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        // tied block convolutions run through the folded fast path; it is
        // bitwise-equal to the per-block path
        if self.spec.blocks > 1 && self.spec.groups == 1 {
            let wts = TiedConvWeights {
                w: self.w.clone(),
                bias: self.bias.clone(),
            };
            tbc_forward_fast(x, &self.spec, &wts)
        } else if self.spec.blocks > 1 || self.spec.groups > 1 {
            let wts = TiedConvWeights {
                w: self.w.clone(),
                bias: self.bias.clone(),
            };
            tgc_forward(x, &self.spec, &wts)
        } else if self.spec.groups > 1 {
            let wts = ConvWeights {
                w: self.w.clone(),
                bias: self.bias.clone(),
            };
            group_conv2d(x, &self.spec, &wts)
        } else {
            let wts = ConvWeights {
                w: self.w.clone(),
                bias: self.bias.clone(),
            };
            conv2d(x, &self.spec, &wts)
        }
    }

    fn backward(
        &self,
        x: &Tensor4,
        grad_out: &Tensor4,
    ) -> Result<(Tensor4, Tensor2, Option<Vec<f64>>)> {
        let g = conv_backward(x, &self.spec, &self.w, grad_out)?;
        Ok((g.input, g.weights, g.bias))
    }

    fn weight_elems(&self) -> u64 {
        self.w.data().len() as u64
    }
}

#[derive(Debug, Clone)]
struct BottleneckLayer {
    reduce: ConvLayer,
    mid: ConvLayer,
    expand: ConvLayer,
    se: Option<(TiedSeSpec, TiedSeWeights)>,
    shortcut: Option<ConvLayer>,
}

impl BottleneckLayer {
    fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let a1 = relu(&self.reduce.forward(x)?);
        let a2 = relu(&self.mid.forward(&a1)?);
        let r3 = self.expand.forward(&a2)?;
        let a3 = match &self.se {
            Some((spec, wts)) => tied_se_forward(&r3, spec, wts)?,
            None => r3,
        };
        let sc = match &self.shortcut {
            Some(proj) => proj.forward(x)?,
            None => x.clone(),
        };
        Ok(relu(&a3.add(&sc)?))
    }

    fn backward(&self, x: &Tensor4, grad_out: &Tensor4) -> Result<(Tensor4, BottleneckGrads)> {
        // recompute the forward intermediates
        let r1 = self.reduce.forward(x)?;
        let a1 = relu(&r1);
        let r2 = self.mid.forward(&a1)?;
        let a2 = relu(&r2);
        let r3 = self.expand.forward(&a2)?;
        let a3 = match &self.se {
            Some((spec, wts)) => tied_se_forward(&r3, spec, wts)?,
            None => r3.clone(),
        };
        let sc = match &self.shortcut {
            Some(proj) => proj.forward(x)?,
            None => x.clone(),
        };
        let s = a3.add(&sc)?;

        let gs = relu_backward(&s, grad_out);
        // residual branch
        let (gr3, se_grads) = match &self.se {
            Some((spec, wts)) => {
                let g = tied_se_backward(&r3, spec, wts, &gs)?;
                (
                    g.input,
                    Some(((g.reduce_w, g.reduce_bias), (g.expand_w, g.expand_bias))),
                )
            }
            None => (gs.clone(), None),
        };
        let (ga2, expand_w, expand_b) = self.expand.backward(&a2, &gr3)?;
        let gr2 = relu_backward(&r2, &ga2);
        let (ga1, mid_w, mid_b) = self.mid.backward(&a1, &gr2)?;
        let gr1 = relu_backward(&r1, &ga1);
        let (gx_res, reduce_w, reduce_b) = self.reduce.backward(x, &gr1)?;
        // shortcut branch
        let (gx_sc, shortcut) = match &self.shortcut {
            Some(proj) => {
                let (gx, w, b) = proj.backward(x, &gs)?;
                (gx, Some((w, b)))
            }
            None => (gs, None),
        };
        let gx = gx_res.add(&gx_sc)?;
        Ok((
            gx,
            BottleneckGrads {
                reduce: (reduce_w, reduce_b),
                mid: (mid_w, mid_b),
                expand: (expand_w, expand_b),
                se: se_grads,
                shortcut,
            },
        ))
    }
}

/// Weight/bias gradient pair of one conv stage.
type WeightGrads = (Tensor2, Option<Vec<f64>>);

#[derive(Debug, Clone)]
struct BottleneckGrads {
    reduce: WeightGrads,
    mid: WeightGrads,
    expand: WeightGrads,
    se: Option<(WeightGrads, WeightGrads)>,
    shortcut: Option<WeightGrads>,
}

#[derive(Debug, Clone)]
enum Built {
    Conv(ConvLayer),
    Fc {
        w: Tensor2,
        bias: Option<Vec<f64>>,
    },
    Tfc {
        blocks: usize,
        wts: TfcWeights,
    },
    TiedSe {
        spec: TiedSeSpec,
        wts: TiedSeWeights,
    },
    Relu,
    Gap,
    Flatten,
    Block(Box<BottleneckLayer>),
}

/// Per-layer gradients in the model's canonical parameter order.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    /// One buffer per parameter tensor, ordered layer by layer, weights
    /// before bias.
    pub buffers: Vec<Vec<f64>>,
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> ModelGrads {
        ModelGrads {
            buffers: model
                .param_sizes()
                .iter()
                .map(|&len| vec![0.0; len])
                .collect(),
        }
    }
}

/// A built sequential model with initialized weights.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    layers: Vec<Built>,
}

/// Validate `config`, draw seeded weights and construct the model.
///
/// Weights are drawn layer by layer in config order, uniform in `[-a, a]`
/// with `a = sqrt(1/fan_in)` counted on the thin bank; biases start at zero.
/// The same config and seed always produce bitwise-identical weights.
pub fn build(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = Rng::seeded(config.seed);
    let mut layers = Vec::with_capacity(config.layers.len());
    for (i, node) in config.layers.iter().enumerate() {
        let built = build_layer(node, &mut rng).map_err(|e| Error::config(i, e.to_string()))?;
        layers.push(built);
    }
    Ok(Model {
        config: config.clone(),
        layers,
    })
}

fn build_layer(node: &LayerNode, rng: &mut Rng) -> Result<Built> {
    Ok(match node {
        LayerNode::Conv { .. }
        | LayerNode::GConv { .. }
        | LayerNode::Tbc { .. }
        | LayerNode::Tgc { .. } => {
            Built::Conv(ConvLayer::init(node.conv_spec().expect("conv-like"), rng)?)
        }
        LayerNode::Fc { c_in, c_out, bias } => {
            let bound = (1.0 / *c_in as f64).sqrt();
            Built::Fc {
                w: Tensor2::new(*c_out, *c_in, rng.uniform_vec(c_in * c_out, bound))?,
                bias: bias.then(|| vec![0.0; *c_out]),
            }
        }
        LayerNode::Tfc {
            c_in,
            c_out,
            blocks,
            bias,
        } => Built::Tfc {
            blocks: *blocks,
            wts: TfcWeights::init(*c_in, *c_out, *blocks, *bias, rng)?,
        },
        LayerNode::TiedSe { c, r, blocks, bias } => {
            let spec = TiedSeSpec::new(*c, *r, *blocks, *bias);
            let wts = TiedSeWeights::init(&spec, rng)?;
            Built::TiedSe { spec, wts }
        }
        LayerNode::Relu => Built::Relu,
        LayerNode::Gap => Built::Gap,
        LayerNode::Flatten => Built::Flatten,
        LayerNode::Bottleneck { .. } | LayerNode::TiedBottleneck { .. } => {
            let parts = node.bottleneck_parts().expect("bottleneck node")?;
            let reduce = ConvLayer::init(parts.reduce, rng)?;
            let mid = ConvLayer::init(parts.mid, rng)?;
            let expand = ConvLayer::init(parts.expand, rng)?;
            let se = match parts.se {
                Some(spec) => {
                    let wts = TiedSeWeights::init(&spec, rng)?;
                    Some((spec, wts))
                }
                None => None,
            };
            let shortcut = match parts.shortcut {
                Some(spec) => Some(ConvLayer::init(spec, rng)?),
                None => None,
            };
            Built::Block(Box::new(BottleneckLayer {
                reduce,
                mid,
                expand,
                se,
                shortcut,
            }))
        }
    })
}

fn fc_forward_rows(x: &Tensor2, w: &Tensor2, bias: Option<&[f64]>) -> Result<Tensor2> {
    let mut data = Vec::with_capacity(x.rows() * w.rows());
    for i in 0..x.rows() {
        data.extend(fully_connected(x.row(i), w, bias)?);
    }
    Tensor2::new(x.rows(), w.rows(), data)
}

fn layer_forward(built: &Built, v: &Value) -> Result<Value> {
    Ok(match built {
        Built::Conv(layer) => Value::Map(layer.forward(v.as_map()?)?),
        Built::Fc { w, bias } => Value::Flat(fc_forward_rows(v.as_flat()?, w, bias.as_deref())?),
        Built::Tfc { blocks, wts } => Value::Flat(tfc_forward_rows(v.as_flat()?, *blocks, wts)?),
        Built::TiedSe { spec, wts } => Value::Map(tied_se_forward(v.as_map()?, spec, wts)?),
        Built::Relu => match v {
            Value::Map(t) => Value::Map(relu(t)),
            Value::Flat(m) => Value::Flat(relu_mat(m)),
        },
        Built::Gap => Value::Flat(crate::ops::global_avg_pool(v.as_map()?)),
        Built::Flatten => {
            let t = v.as_map()?;
            let (n, c, h, w) = t.dims();
            Value::Flat(Tensor2::new(n, c * h * w, t.data().to_vec())?)
        }
        Built::Block(block) => Value::Map(block.forward(v.as_map()?)?),
    })
}

enum LayerGrads {
    None,
    Tensors(Vec<Vec<f64>>),
}

fn layer_backward(built: &Built, input: &Value, grad: &Value) -> Result<(Value, LayerGrads)> {
    Ok(match built {
        Built::Conv(layer) => {
            let (gx, gw, gb) = layer.backward(input.as_map()?, grad.as_map()?)?;
            let mut bufs = vec![gw.data().to_vec()];
            if let Some(b) = gb {
                bufs.push(b);
            }
            (Value::Map(gx), LayerGrads::Tensors(bufs))
        }
        Built::Fc { w, bias } => {
            let (gx, gw, gb) =
                fc_backward_rows(input.as_flat()?, w, grad.as_flat()?, bias.is_some())?;
            let mut bufs = vec![gw.data().to_vec()];
            if let Some(b) = gb {
                bufs.push(b);
            }
            (Value::Flat(gx), LayerGrads::Tensors(bufs))
        }
        Built::Tfc { blocks, wts } => {
            let (gx, gw, gb) = tfc_backward_rows(input.as_flat()?, *blocks, wts, grad.as_flat()?)?;
            let mut bufs = vec![gw.data().to_vec()];
            if let Some(b) = gb {
                bufs.push(b);
            }
            (Value::Flat(gx), LayerGrads::Tensors(bufs))
        }
        Built::TiedSe { spec, wts } => {
            let g = tied_se_backward(input.as_map()?, spec, wts, grad.as_map()?)?;
            let mut bufs = vec![g.reduce_w.data().to_vec()];
            if let Some(b) = g.reduce_bias {
                bufs.push(b);
            }
            bufs.push(g.expand_w.data().to_vec());
            if let Some(b) = g.expand_bias {
                bufs.push(b);
            }
            (Value::Map(g.input), LayerGrads::Tensors(bufs))
        }
        Built::Relu => match (input, grad) {
            (Value::Map(x), Value::Map(g)) => (Value::Map(relu_backward(x, g)), LayerGrads::None),
            (Value::Flat(x), Value::Flat(g)) => {
                (Value::Flat(relu_backward_mat(x, g)), LayerGrads::None)
            }
            _ => return Err(Error::shape("relu backward: mismatched value kinds")),
        },
        Built::Gap => {
            let x = input.as_map()?;
            (
                Value::Map(global_avg_pool_backward(x.dims(), grad.as_flat()?)),
                LayerGrads::None,
            )
        }
        Built::Flatten => {
            let x = input.as_map()?;
            let (n, c, h, w) = x.dims();
            let g = grad.as_flat()?;
            (
                Value::Map(Tensor4::new(n, c, h, w, g.data().to_vec())?),
                LayerGrads::None,
            )
        }
        Built::Block(block) => {
            let (gx, g) = block.backward(input.as_map()?, grad.as_map()?)?;
            let mut bufs = Vec::new();
            let mut push_pair = |w: &Tensor2, b: &Option<Vec<f64>>| {
                bufs.push(w.data().to_vec());
                if let Some(b) = b {
                    bufs.push(b.clone());
                }
            };
            push_pair(&g.reduce.0, &g.reduce.1);
            push_pair(&g.mid.0, &g.mid.1);
            push_pair(&g.expand.0, &g.expand.1);
            if let Some((reduce, expand)) = &g.se {
                push_pair(&reduce.0, &reduce.1);
                push_pair(&expand.0, &expand.1);
            }
            if let Some((w, b)) = &g.shortcut {
                push_pair(w, b);
            }
            (Value::Map(gx), LayerGrads::Tensors(bufs))
        }
    })
}

impl Model {
    /// Forward pass; the input must match the config's (c, h, w).
    pub fn forward(&self, x: &Tensor4) -> Result<Value> {
        self.check_input(x)?;
        let mut v = Value::Map(x.clone());
        for built in &self.layers {
            v = layer_forward(built, &v)?;
        }
        Ok(v)
    }

    /// Forward pass keeping every layer input; `values[i]` feeds layer `i`
    /// and the last entry is the model output.
    pub fn forward_traced(&self, x: &Tensor4) -> Result<Vec<Value>> {
        self.check_input(x)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(Value::Map(x.clone()));
        for built in &self.layers {
            let next = layer_forward(built, values.last().unwrap())?;
            values.push(next);
        }
        Ok(values)
    }

    /// Class logits; errors unless the model ends in a flat layer of
    /// `classes` features.
    pub fn logits(&self, x: &Tensor4) -> Result<Tensor2> {
        match self.forward(x)? {
            Value::Flat(m) if m.cols() == self.config.classes => Ok(m),
            other => Err(Error::shape(format!(
                "model output {:?} is not a flat vector of {} classes",
                other.shape(),
                self.config.classes
            ))),
        }
    }

    /// Reverse pass over a [`Model::forward_traced`] trace. Returns the
    /// gradients for every parameter tensor in canonical order.
    pub fn backward(&self, trace: &[Value], grad_out: &Value) -> Result<ModelGrads> {
        if trace.len() != self.layers.len() + 1 {
            return Err(Error::shape(format!(
                "trace has {} values for {} layers",
                trace.len(),
                self.layers.len()
            )));
        }
        let mut per_layer: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());
        let mut grad = grad_out.clone();
        for (i, built) in self.layers.iter().enumerate().rev() {
            let (gx, grads) = layer_backward(built, &trace[i], &grad)?;
            per_layer.push(grads);
            grad = gx;
        }
        per_layer.reverse();
        let mut buffers = Vec::new();
        for grads in per_layer {
            if let LayerGrads::Tensors(bufs) = grads {
                buffers.extend(bufs);
            }
        }
        Ok(ModelGrads { buffers })
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let [c, h, w] = self.config.input;
        if (x.c(), x.h(), x.w()) != (c, h, w) {
            return Err(Error::shape(format!(
                "input {:?} does not match configured shape {c}x{h}x{w}",
                x.dims()
            )));
        }
        Ok(())
    }

    /// Lengths of every parameter tensor in canonical order (weights before
    /// bias, layer by layer).
    pub fn param_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        for built in &self.layers {
            collect_param_sizes(built, &mut sizes);
        }
        sizes
    }

    /// Mutable views of every parameter tensor in canonical order.
    pub fn param_buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for built in &mut self.layers {
            collect_params_mut(built, &mut out);
        }
        out
    }

    /// Total parameter element count (weights plus bias).
    pub fn param_count(&self) -> u64 {
        self.param_sizes().iter().map(|&s| s as u64).sum()
    }

    /// Weight-only element count, bias excluded.
    pub fn weight_count(&self) -> u64 {
        let mut total = 0u64;
        for built in &self.layers {
            total += match built {
                Built::Conv(l) => l.weight_elems(),
                Built::Fc { w, .. } => w.data().len() as u64,
                Built::Tfc { wts, .. } => wts.w.data().len() as u64,
                Built::TiedSe { wts, .. } => {
                    (wts.reduce.w.data().len() + wts.expand.w.data().len()) as u64
                }
                Built::Relu | Built::Gap | Built::Flatten => 0,
                Built::Block(b) => {
                    let mut t =
                        b.reduce.weight_elems() + b.mid.weight_elems() + b.expand.weight_elems();
                    if let Some((_, wts)) = &b.se {
                        t += (wts.reduce.w.data().len() + wts.expand.w.data().len()) as u64;
                    }
                    if let Some(p) = &b.shortcut {
                        t += p.weight_elems();
                    }
                    t
                }
            };
        }
        total
    }

    /// Per-layer summary of this model on a single-sample input.
    pub fn summary(&self) -> Result<crate::count::CountReport> {
        crate::count::model_report(&self.config, 1, None)
    }
}

fn collect_param_sizes(built: &Built, out: &mut Vec<usize>) {
    match built {
        Built::Conv(l) => {
            out.push(l.w.data().len());
            if let Some(b) = &l.bias {
                out.push(b.len());
            }
        }
        Built::Fc { w, bias } => {
            out.push(w.data().len());
            if let Some(b) = bias {
                out.push(b.len());
            }
        }
        Built::Tfc { wts, .. } => {
            out.push(wts.w.data().len());
            if let Some(b) = &wts.bias {
                out.push(b.len());
            }
        }
        Built::TiedSe { wts, .. } => {
            out.push(wts.reduce.w.data().len());
            if let Some(b) = &wts.reduce.bias {
                out.push(b.len());
            }
            out.push(wts.expand.w.data().len());
            if let Some(b) = &wts.expand.bias {
                out.push(b.len());
            }
        }
        Built::Relu | Built::Gap | Built::Flatten => {}
        Built::Block(block) => {
            collect_param_sizes(&Built::Conv(block.reduce.clone()), out);
            collect_param_sizes(&Built::Conv(block.mid.clone()), out);
            collect_param_sizes(&Built::Conv(block.expand.clone()), out);
            if let Some((spec, wts)) = &block.se {
                collect_param_sizes(
                    &Built::TiedSe {
                        spec: spec.clone(),
                        wts: wts.clone(),
                    },
                    out,
                );
            }
            if let Some(p) = &block.shortcut {
                collect_param_sizes(&Built::Conv(p.clone()), out);
            }
        }
    }
}

fn collect_params_mut<'a>(built: &'a mut Built, out: &mut Vec<&'a mut [f64]>) {
    match built {
        Built::Conv(l) => {
            out.push(l.w.data_mut());
            if let Some(b) = &mut l.bias {
                out.push(b.as_mut_slice());
            }
        }
        Built::Fc { w, bias } => {
            out.push(w.data_mut());
            if let Some(b) = bias {
                out.push(b.as_mut_slice());
            }
        }
        Built::Tfc { wts, .. } => {
            out.push(wts.w.data_mut());
            if let Some(b) = &mut wts.bias {
                out.push(b.as_mut_slice());
            }
        }
        Built::TiedSe { wts, .. } => {
            out.push(wts.reduce.w.data_mut());
            if let Some(b) = &mut wts.reduce.bias {
                out.push(b.as_mut_slice());
            }
            out.push(wts.expand.w.data_mut());
            if let Some(b) = &mut wts.expand.bias {
                out.push(b.as_mut_slice());
            }
        }
        Built::Relu | Built::Gap | Built::Flatten => {}
        Built::Block(block) => {
            let block = block.as_mut();
            collect_conv_params_mut(&mut block.reduce, out);
            collect_conv_params_mut(&mut block.mid, out);
            collect_conv_params_mut(&mut block.expand, out);
            if let Some((_, wts)) = &mut block.se {
                out.push(wts.reduce.w.data_mut());
                if let Some(b) = &mut wts.reduce.bias {
                    out.push(b.as_mut_slice());
                }
                out.push(wts.expand.w.data_mut());
                if let Some(b) = &mut wts.expand.bias {
                    out.push(b.as_mut_slice());
                }
            }
            if let Some(p) = &mut block.shortcut {
                collect_conv_params_mut(p, out);
            }
        }
    }
}

fn collect_conv_params_mut<'a>(layer: &'a mut ConvLayer, out: &mut Vec<&'a mut [f64]>) {
    out.push(layer.w.data_mut());
    if let Some(b) = &mut layer.bias {
        out.push(b.as_mut_slice());
    }
}

fn conv_node(tied_blocks: usize, c_in: usize, c_out: usize, k: usize, pad: usize) -> LayerNode {
    if tied_blocks > 1 {
        LayerNode::Tbc {
            c_in,
            c_out,
            k,
            stride: 1,
            pad,
            blocks: tied_blocks,
            bias: true,
        }
    } else {
        LayerNode::Conv {
            c_in,
            c_out,
            k,
            stride: 1,
            pad,
            bias: true,
        }
    }
}

fn head_node(tied_blocks: usize, c_in: usize, c_out: usize) -> LayerNode {
    if tied_blocks > 1 {
        LayerNode::Tfc {
            c_in,
            c_out,
            blocks: tied_blocks,
            bias: true,
        }
    } else {
        LayerNode::Fc {
            c_in,
            c_out,
            bias: true,
        }
    }
}

/// Residual block node whose 3×3 stage is a tied block convolution:
/// 1×1 reduce, 3×3 tied mid, 1×1 expand to `4 * planes`, optional TiedSE,
/// projection shortcut when shapes differ. `planes` must be a multiple of
/// `blocks`.
pub fn tied_bottleneck(
    c_in: usize,
    planes: usize,
    blocks: usize,
    stride: usize,
    use_tied_se: bool,
) -> LayerNode {
    LayerNode::TiedBottleneck {
        c_in,
        planes,
        blocks,
        stride,
        se: use_tied_se,
        bias: true,
    }
}

/// Matched pair of small classifiers for 1×16×16 inputs and 2 classes:
/// identical topology, the inner convolutions and the head tied in the first
/// config and untied in the second.
///
/// Widths are fixed at 1 → 8 → 16 → 32 (all divisible by 4), stride 1
/// throughout, with a flatten head — the task is to locate a blob, so the
/// classifier must keep spatial position (global pooling of
/// translation-equivariant features would erase it). The 1-channel stem
/// cannot be tied (one channel does not split into blocks), so it stays a
/// standard convolution in both configs; every other conv and the fc head
/// are tied. The head ties with `min(b, 2)` blocks because the class count
/// is 2. With `b = 1` the two configs are identical.
pub fn make_toy_pair(b: usize) -> Result<(ModelConfig, ModelConfig)> {
    if !matches!(b, 1 | 2 | 4) {
        return Err(Error::input(format!(
            "toy pair block count must be 1, 2 or 4, got {b}"
        )));
    }
    let head_b = b.min(2);
    let stem = LayerNode::Conv {
        c_in: 1,
        c_out: 8,
        k: 3,
        stride: 1,
        pad: 1,
        bias: true,
    };
    let make = |tied: bool| -> ModelConfig {
        let cb = if tied { b } else { 1 };
        let hb = if tied { head_b } else { 1 };
        ModelConfig {
            name: if tied && b > 1 {
                format!("toy_tied_b{b}")
            } else {
                "toy_untied".to_string()
            },
            input: [1, 16, 16],
            classes: 2,
            seed: 0,
            layers: vec![
                stem.clone(),
                LayerNode::Relu,
                conv_node(cb, 8, 16, 3, 1),
                LayerNode::Relu,
                conv_node(cb, 16, 32, 3, 1),
                LayerNode::Relu,
                LayerNode::Flatten,
                head_node(hb, 32 * 16 * 16, 2),
            ],
        }
    };
    Ok((make(true), make(false)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::bitwise_eq;

    fn smoke_config() -> ModelConfig {
        ModelConfig {
            name: "smoke".into(),
            input: [2, 6, 6],
            classes: 2,
            seed: 3,
            layers: vec![
                LayerNode::Conv {
                    c_in: 2,
                    c_out: 4,
                    k: 3,
                    stride: 1,
                    pad: 1,
                    bias: true,
                },
                LayerNode::Relu,
                LayerNode::Flatten,
                LayerNode::Fc {
                    c_in: 4 * 6 * 6,
                    c_out: 2,
                    bias: true,
                },
            ],
        }
    }

    #[test]
    fn smoke_chain_builds_and_forwards() {
        let config = smoke_config();
        let model = build(&config).unwrap();
        let mut rng = Rng::seeded(4);
        let x = Tensor4::random(3, 2, 6, 6, 1.0, &mut rng);
        let logits = model.logits(&x).unwrap();
        assert_eq!((logits.rows(), logits.cols()), (3, 2));
    }

    #[test]
    fn illegal_tbc_blocks_name_the_layer() {
        let mut config = smoke_config();
        config.layers[0] = LayerNode::Tbc {
            c_in: 6,
            c_out: 6,
            k: 3,
            stride: 1,
            pad: 1,
            blocks: 4,
            bias: true,
        };
        config.input = [6, 6, 6];
        config.layers[3] = LayerNode::Fc {
            c_in: 6 * 6 * 6,
            c_out: 2,
            bias: true,
        };
        let err = config.validate().unwrap_err();
        match err {
            Error::Config {
                layer: Some(0),
                message,
            } => {
                assert!(message.contains('4') && message.contains('6'), "{message}");
            }
            other => panic!("expected layer-0 config error, got {other:?}"),
        }
    }

    #[test]
    fn build_is_deterministic() {
        let (tied, _) = make_toy_pair(2).unwrap();
        let a = build(&tied).unwrap();
        let b = build(&tied).unwrap();
        let mut rng = Rng::seeded(5);
        let x = Tensor4::random(2, 1, 16, 16, 1.0, &mut rng);
        let la = a.logits(&x).unwrap();
        let lb = b.logits(&x).unwrap();
        assert!(bitwise_eq(la.data(), lb.data()));
    }

    #[test]
    fn declared_shapes_match_forward_shapes() {
        let (tied, _) = make_toy_pair(4).unwrap();
        let model = build(&tied).unwrap();
        let chain = tied.shape_chain().unwrap();
        let mut rng = Rng::seeded(6);
        let x = Tensor4::random(2, 1, 16, 16, 1.0, &mut rng);
        let trace = model.forward_traced(&x).unwrap();
        for (value, shape) in trace.iter().zip(&chain) {
            assert_eq!(&value.shape(), shape);
        }
    }

    #[test]
    fn toy_pair_b1_configs_identical() {
        let (tied, untied) = make_toy_pair(1).unwrap();
        assert_eq!(tied.layers, untied.layers);
    }

    #[test]
    fn toy_pair_tied_quarter_weights() {
        let (tied, untied) = make_toy_pair(2).unwrap();
        let tm = build(&tied).unwrap();
        let um = build(&untied).unwrap();
        // tied-eligible layers (everything but the shared 1-channel stem)
        let stem = 8 * 9;
        let tied_w = tm.weight_count() - stem;
        let untied_w = um.weight_count() - stem;
        assert_eq!(tied_w * 4, untied_w);
    }

    #[test]
    fn fully_tied_twin_has_exact_inverse_square_params() {
        // with a multi-channel input every conv and fc can tie, so the
        // conv/fc weight total shrinks by exactly B squared
        for b in [2usize, 4] {
            let untied = ModelConfig {
                name: "full".into(),
                input: [4, 6, 6],
                classes: 4,
                seed: 1,
                layers: vec![
                    LayerNode::Conv {
                        c_in: 4,
                        c_out: 8,
                        k: 3,
                        stride: 1,
                        pad: 1,
                        bias: true,
                    },
                    LayerNode::Relu,
                    LayerNode::Conv {
                        c_in: 8,
                        c_out: 16,
                        k: 3,
                        stride: 1,
                        pad: 1,
                        bias: true,
                    },
                    LayerNode::Relu,
                    LayerNode::Gap,
                    LayerNode::Fc {
                        c_in: 16,
                        c_out: 4,
                        bias: true,
                    },
                ],
            };
            let tied = ModelConfig {
                layers: untied
                    .layers
                    .iter()
                    .map(|node| match *node {
                        LayerNode::Conv {
                            c_in,
                            c_out,
                            k,
                            stride,
                            pad,
                            bias,
                        } => LayerNode::Tbc {
                            c_in,
                            c_out,
                            k,
                            stride,
                            pad,
                            blocks: b,
                            bias,
                        },
                        LayerNode::Fc { c_in, c_out, bias } => LayerNode::Tfc {
                            c_in,
                            c_out,
                            blocks: b,
                            bias,
                        },
                        ref other => other.clone(),
                    })
                    .collect(),
                ..untied.clone()
            };
            let tw = build(&tied).unwrap().weight_count();
            let uw = build(&untied).unwrap().weight_count();
            assert_eq!(tw * (b * b) as u64, uw, "b={b}");
        }
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let (tied, _) = make_toy_pair(2).unwrap();
        let text = tied.to_json_pretty();
        let back = ModelConfig::from_json(&text).unwrap();
        assert_eq!(tied, back);

        let bad = text.replace("\"k\": 3", "\"k\": 3, \"kernel\": 3");
        let err = ModelConfig::from_json(&bad).unwrap_err();
        assert!(err.to_string().contains("kernel"), "{err}");

        let malformed = "{ not json";
        match ModelConfig::from_json(malformed).unwrap_err() {
            Error::Parse(msg) => assert!(msg.contains("line"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bottleneck_untied_matches_standard_block_bitwise() {
        // same seed => same draws => tbc(B=1) mid equals conv mid bitwise
        let tied_cfg = ModelConfig {
            name: "tb".into(),
            input: [8, 5, 5],
            classes: 2,
            seed: 9,
            layers: vec![LayerNode::TiedBottleneck {
                c_in: 8,
                planes: 4,
                blocks: 1,
                stride: 1,
                se: false,
                bias: true,
            }],
        };
        let untied_cfg = ModelConfig {
            layers: vec![LayerNode::Bottleneck {
                c_in: 8,
                planes: 4,
                stride: 1,
                bias: true,
            }],
            ..tied_cfg.clone()
        };
        let tm = build(&tied_cfg).unwrap();
        let um = build(&untied_cfg).unwrap();
        let mut rng = Rng::seeded(10);
        let x = Tensor4::random(2, 8, 5, 5, 1.0, &mut rng);
        let a = tm.forward(&x).unwrap();
        let b = um.forward(&x).unwrap();
        assert!(bitwise_eq(
            a.as_map().unwrap().data(),
            b.as_map().unwrap().data()
        ));
    }

    #[test]
    fn zero_residual_bottleneck_is_identity_plus_relu() {
        let cfg = ModelConfig {
            name: "zr".into(),
            input: [16, 5, 5],
            classes: 2,
            seed: 11,
            layers: vec![LayerNode::Bottleneck {
                c_in: 16,
                planes: 4,
                stride: 1,
                bias: true,
            }],
        };
        let mut model = build(&cfg).unwrap();
        // c_in == 4*planes, stride 1: identity shortcut, so zeroing the
        // residual weights leaves relu(x)
        for buf in model.param_buffers_mut() {
            for v in buf.iter_mut() {
                *v = 0.0;
            }
        }
        let mut rng = Rng::seeded(12);
        let x = Tensor4::random(1, 16, 5, 5, 1.0, &mut rng);
        let y = model.forward(&x).unwrap();
        let expect = relu(&x);
        assert!(bitwise_eq(y.as_map().unwrap().data(), expect.data()));
    }

    #[test]
    fn bottleneck_params_match_accounting() {
        let cfg = ModelConfig {
            name: "bp".into(),
            input: [8, 5, 5],
            classes: 2,
            seed: 13,
            layers: vec![LayerNode::TiedBottleneck {
                c_in: 8,
                planes: 4,
                blocks: 2,
                stride: 1,
                se: true,
                bias: true,
            }],
        };
        let model = build(&cfg).unwrap();
        let report = crate::count::model_report(&cfg, 1, None).unwrap();
        assert_eq!(report.total_params, model.param_count());
    }
}
