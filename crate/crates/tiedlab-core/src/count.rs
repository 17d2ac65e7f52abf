//! Exact parameter and multiply-accumulate accounting for every layer kind.
//!
//! Weight counts follow directly from the bank shapes: a standard k×k
//! convolution holds `k²·c_in·c_out` weights; grouping divides by `G`; tying
//! divides by `B` twice (thinner filters, fewer of them), so tied block
//! convolution holds `k²·c_in·c_out/B²` and tied group convolution
//! `k²·c_in·c_out/(G·B)`. MACs scale with the work actually performed:
//! grouping divides by `G` and tying by `B` — shared weights do not shrink
//! the compute, only the thinner per-block filters do.
//!
//! One MAC is one multiply plus one add; bias additions and activations are
//! excluded. Parameter identities here are exact integer statements, not
//! approximations, and the test surface asserts them as such.

use crate::error::{Error, Result};
use crate::model::{LayerNode, ModelConfig, Shape};
use crate::ops::ConvSpec;

/// Parameter count of a convolution spec; bias included only when
/// `has_bias` is set.
pub fn conv_params(spec: &ConvSpec) -> Result<u64> {
    spec.validate()?;
    let mut total = spec.weight_params();
    if spec.has_bias {
        total += spec.bias_len() as u64;
    }
    Ok(total)
}

/// MAC count of a convolution spec applied to an `n`×c_in×`h`×`w` input.
pub fn conv_macs(spec: &ConvSpec, n: usize, h: usize, w: usize) -> Result<u64> {
    spec.validate()?;
    let (oh, ow) = spec.out_dims(h, w)?;
    // per output element: in_per_partition * k * k multiplies
    let per_elem = spec.in_per_partition() as u64 * (spec.k * spec.k) as u64;
    Ok(per_elem * spec.c_out as u64 * (oh * ow) as u64 * n as u64)
}

/// Parameter count of a (tied) fully connected layer.
pub fn fc_params(c_in: usize, c_out: usize, blocks: usize, has_bias: bool) -> Result<u64> {
    if blocks == 0 || !c_in.is_multiple_of(blocks) || !c_out.is_multiple_of(blocks) {
        return Err(Error::shape(format!(
            "blocks {blocks} must divide c_in {c_in} and c_out {c_out}"
        )));
    }
    let w = (c_in / blocks) as u64 * (c_out / blocks) as u64;
    let b = if has_bias { (c_out / blocks) as u64 } else { 0 };
    Ok(w + b)
}

/// MAC count of a (tied) fully connected layer over `n` samples.
pub fn fc_macs(c_in: usize, c_out: usize, blocks: usize, n: usize) -> Result<u64> {
    if blocks == 0 || !c_in.is_multiple_of(blocks) || !c_out.is_multiple_of(blocks) {
        return Err(Error::shape(format!(
            "blocks {blocks} must divide c_in {c_in} and c_out {c_out}"
        )));
    }
    // every block multiplies (c_in/B)·(c_out/B); there are B blocks
    Ok((c_in as u64 * c_out as u64 / blocks as u64) * n as u64)
}

/// Parameter count of a TiedSE block: both tied layers, pooling and
/// activations excluded.
pub fn tied_se_params(c: usize, r: usize, blocks: usize, has_bias: bool) -> Result<u64> {
    if r == 0 || blocks == 0 || !c.is_multiple_of(r * blocks) {
        return Err(Error::shape(format!(
            "tied_se requires r*blocks = {} to divide c = {c}",
            r * blocks
        )));
    }
    Ok(fc_params(c, c / r, blocks, has_bias)? + fc_params(c / r, c, blocks, has_bias)?)
}

/// MAC count of a TiedSE block over `n` samples (the two tied layers only).
pub fn tied_se_macs(c: usize, r: usize, blocks: usize, n: usize) -> Result<u64> {
    if r == 0 || blocks == 0 || !c.is_multiple_of(r * blocks) {
        return Err(Error::shape(format!(
            "tied_se requires r*blocks = {} to divide c = {c}",
            r * blocks
        )));
    }
    Ok(fc_macs(c, c / r, blocks, n)? + fc_macs(c / r, c, blocks, n)?)
}

/// One row of a [`CountReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct CountRow {
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub macs: u64,
    pub out_shape: String,
}

/// Per-layer accounting for a model, with optional ratios against an untied
/// baseline of identical length.
#[derive(Debug, Clone, PartialEq)]
pub struct CountReport {
    pub rows: Vec<CountRow>,
    pub total_params: u64,
    pub total_macs: u64,
    /// (per-row weight ratios, total weight ratio, total mac ratio) vs the
    /// baseline, bias excluded from the weight ratios.
    pub ratios: Option<(Vec<f64>, f64, f64)>,
}

impl CountReport {
    /// CSV with the stable column order `name,kind,params,macs,out_shape`,
    /// one row per layer plus a trailing `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,kind,params,macs,out_shape\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.name, r.kind, r.params, r.macs, r.out_shape
            ));
        }
        out.push_str(&format!(
            "total,,{},{},\n",
            self.total_params, self.total_macs
        ));
        out
    }

    /// Aligned plain-text table; ratio column included when a baseline was
    /// supplied.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let has_ratio = self.ratios.is_some();
        out.push_str(&format!(
            "{:<20} {:<16} {:>12} {:>14} {:>12}{}\n",
            "name",
            "kind",
            "params",
            "macs",
            "out_shape",
            if has_ratio { "  weight_ratio" } else { "" }
        ));
        for (i, r) in self.rows.iter().enumerate() {
            let ratio = match &self.ratios {
                Some((rows, _, _)) => format!("   {:>11.4}", rows[i]),
                None => String::new(),
            };
            out.push_str(&format!(
                "{:<20} {:<16} {:>12} {:>14} {:>12}{}\n",
                r.name, r.kind, r.params, r.macs, r.out_shape, ratio
            ));
        }
        match &self.ratios {
            Some((_, pr, mr)) => out.push_str(&format!(
                "{:<20} {:<16} {:>12} {:>14} {:>12}   {:>11.4} (macs {:.4})\n",
                "total", "", self.total_params, self.total_macs, "", pr, mr
            )),
            None => out.push_str(&format!(
                "{:<20} {:<16} {:>12} {:>14} {:>12}\n",
                "total", "", self.total_params, self.total_macs, ""
            )),
        }
        out
    }
}

/// Parameter count of one layer node.
pub fn node_params(node: &LayerNode) -> Result<u64> {
    match node {
        LayerNode::Conv { .. }
        | LayerNode::GConv { .. }
        | LayerNode::Tbc { .. }
        | LayerNode::Tgc { .. } => conv_params(&node.conv_spec().expect("conv-like node")),
        LayerNode::Fc { c_in, c_out, bias } => fc_params(*c_in, *c_out, 1, *bias),
        LayerNode::Tfc {
            c_in,
            c_out,
            blocks,
            bias,
        } => fc_params(*c_in, *c_out, *blocks, *bias),
        LayerNode::TiedSe { c, r, blocks, bias } => tied_se_params(*c, *r, *blocks, *bias),
        LayerNode::Relu | LayerNode::Gap | LayerNode::Flatten => Ok(0),
        LayerNode::Bottleneck { .. } | LayerNode::TiedBottleneck { .. } => {
            let parts = node.bottleneck_parts().expect("bottleneck node")?;
            let mut total = conv_params(&parts.reduce)?
                + conv_params(&parts.mid)?
                + conv_params(&parts.expand)?;
            if let Some(se) = &parts.se {
                total += tied_se_params(se.c, se.r, se.blocks, se.has_bias)?;
            }
            if let Some(sc) = &parts.shortcut {
                total += conv_params(sc)?;
            }
            Ok(total)
        }
    }
}

/// Weight-only count of one layer node (bias excluded).
pub fn node_weight_params(node: &LayerNode) -> Result<u64> {
    let strip = |spec: &ConvSpec| -> ConvSpec {
        ConvSpec {
            has_bias: false,
            ..*spec
        }
    };
    match node {
        LayerNode::Conv { .. }
        | LayerNode::GConv { .. }
        | LayerNode::Tbc { .. }
        | LayerNode::Tgc { .. } => conv_params(&strip(&node.conv_spec().expect("conv-like node"))),
        LayerNode::Fc { c_in, c_out, .. } => fc_params(*c_in, *c_out, 1, false),
        LayerNode::Tfc {
            c_in,
            c_out,
            blocks,
            ..
        } => fc_params(*c_in, *c_out, *blocks, false),
        LayerNode::TiedSe { c, r, blocks, .. } => tied_se_params(*c, *r, *blocks, false),
        LayerNode::Relu | LayerNode::Gap | LayerNode::Flatten => Ok(0),
        LayerNode::Bottleneck { .. } | LayerNode::TiedBottleneck { .. } => {
            let parts = node.bottleneck_parts().expect("bottleneck node")?;
            let mut total = conv_params(&strip(&parts.reduce))?
                + conv_params(&strip(&parts.mid))?
                + conv_params(&strip(&parts.expand))?;
            if let Some(se) = &parts.se {
                total += tied_se_params(se.c, se.r, se.blocks, false)?;
            }
            if let Some(sc) = &parts.shortcut {
                total += conv_params(&strip(sc))?;
            }
            Ok(total)
        }
    }
}

/// MAC count of one layer node on an input of shape `shape` (`n` samples).
pub fn node_macs(node: &LayerNode, shape: &Shape, n: usize) -> Result<u64> {
    match (node, shape) {
        (
            LayerNode::Conv { .. }
            | LayerNode::GConv { .. }
            | LayerNode::Tbc { .. }
            | LayerNode::Tgc { .. },
            Shape::Map(_, h, w),
        ) => conv_macs(&node.conv_spec().expect("conv-like node"), n, *h, *w),
        (LayerNode::Fc { c_in, c_out, .. }, Shape::Flat(_)) => fc_macs(*c_in, *c_out, 1, n),
        (
            LayerNode::Tfc {
                c_in,
                c_out,
                blocks,
                ..
            },
            Shape::Flat(_),
        ) => fc_macs(*c_in, *c_out, *blocks, n),
        (LayerNode::TiedSe { c, r, blocks, .. }, Shape::Map(..)) => {
            tied_se_macs(*c, *r, *blocks, n)
        }
        (LayerNode::Relu | LayerNode::Gap | LayerNode::Flatten, _) => Ok(0),
        (LayerNode::Bottleneck { .. } | LayerNode::TiedBottleneck { .. }, Shape::Map(_, h, w)) => {
            let parts = node.bottleneck_parts().expect("bottleneck node")?;
            let (oh, ow) = parts.mid.out_dims(*h, *w)?;
            let mut total = conv_macs(&parts.reduce, n, *h, *w)?
                + conv_macs(&parts.mid, n, *h, *w)?
                + conv_macs(&parts.expand, n, oh, ow)?;
            if let Some(se) = &parts.se {
                total += tied_se_macs(se.c, se.r, se.blocks, n)?;
            }
            if let Some(sc) = &parts.shortcut {
                total += conv_macs(sc, n, *h, *w)?;
            }
            Ok(total)
        }
        _ => Err(Error::shape(format!(
            "layer {node:?} cannot consume shape {shape:?}"
        ))),
    }
}

/// Per-layer and total counts for a config on an `n`-sample input; ratio
/// columns when `baseline` is supplied (row counts must match).
pub fn model_report(
    config: &ModelConfig,
    n: usize,
    baseline: Option<&ModelConfig>,
) -> Result<CountReport> {
    let rows = count_rows(config, n)?;
    let total_params = rows.iter().map(|r| r.params).sum();
    let total_macs = rows.iter().map(|r| r.macs).sum();
    let ratios = match baseline {
        Some(base) => {
            let brows = count_rows(base, n)?;
            if brows.len() != rows.len() {
                return Err(Error::input(format!(
                    "baseline has {} layers, config has {}",
                    brows.len(),
                    rows.len()
                )));
            }
            // ratios compare weight elements only: tied bias shrinks by B,
            // not B², and would blur the headline tying factor
            let weights: Vec<u64> = config
                .layers
                .iter()
                .map(node_weight_params)
                .collect::<Result<_>>()?;
            let bweights: Vec<u64> = base
                .layers
                .iter()
                .map(node_weight_params)
                .collect::<Result<_>>()?;
            let per_row: Vec<f64> = weights
                .iter()
                .zip(&bweights)
                .map(|(&r, &b)| {
                    if b == 0 {
                        if r == 0 {
                            1.0
                        } else {
                            f64::INFINITY
                        }
                    } else {
                        r as f64 / b as f64
                    }
                })
                .collect();
            let wp: u64 = weights.iter().sum();
            let bp: u64 = bweights.iter().sum();
            let bm: u64 = brows.iter().map(|r| r.macs).sum();
            let pr = if bp == 0 { 1.0 } else { wp as f64 / bp as f64 };
            let mr = if bm == 0 {
                1.0
            } else {
                total_macs as f64 / bm as f64
            };
            Some((per_row, pr, mr))
        }
        None => None,
    };
    Ok(CountReport {
        rows,
        total_params,
        total_macs,
        ratios,
    })
}

fn count_rows(config: &ModelConfig, n: usize) -> Result<Vec<CountRow>> {
    config.validate()?;
    let mut shape = config.input_shape();
    let mut rows = Vec::with_capacity(config.layers.len());
    for (i, node) in config.layers.iter().enumerate() {
        let params = node_params(node).map_err(|e| Error::config(i, e.to_string()))?;
        let macs = node_macs(node, &shape, n).map_err(|e| Error::config(i, e.to_string()))?;
        shape = node
            .out_shape(&shape)
            .map_err(|e| Error::config(i, e.to_string()))?;
        rows.push(CountRow {
            name: format!("{}_{}", node.kind_name(), i),
            kind: node.kind_name().to_string(),
            params,
            macs,
            out_shape: shape.label(),
        });
    }
    Ok(rows)
}
