//! Multiply-add counting over resolved widths.
//!
//! Conventions: conv `out_h * out_w * k_h * k_w * c_in * c_out`, depthwise
//! `c * k_h * k_w * out_h * out_w`, dense `c_in * c_out`. Normalization,
//! activations, pooling and residual additions are not counted.

use std::collections::BTreeMap;
use std::io::Write;

use crate::arch::{ArchSpec, LayerKind};
use crate::width::{resolve, LayerWidth, WidthConfig, WidthSample};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerFlops {
    pub name: String,
    pub stage: usize,
    pub width: LayerWidth,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopsReport {
    pub total: u64,
    pub layers: Vec<LayerFlops>,
    pub stages: BTreeMap<usize, u64>,
}

impl FlopsReport {
    pub fn millions(&self) -> f64 {
        self.total as f64 / 1e6
    }
}

/// Counts at the config's own global ratio.
pub fn count_flops(arch: &ArchSpec, cfg: &WidthConfig) -> Result<FlopsReport> {
    count_flops_at(arch, cfg, &cfg.sample())
}

pub fn count_flops_at(arch: &ArchSpec, cfg: &WidthConfig, sample: &WidthSample) -> Result<FlopsReport> {
    let widths = resolve(arch, cfg, sample)?;
    let plan = arch.spatial_plan()?;
    let mut layers = Vec::with_capacity(arch.layers.len());
    let mut stages = BTreeMap::new();
    let mut total = 0u64;
    for ((l, w), sp) in arch.layers.iter().zip(&widths).zip(&plan) {
        let (oh, ow) = (sp.out_hw.0 as u64, sp.out_hw.1 as u64);
        let k = (l.kernel * l.kernel) as u64;
        let (cin, cout) = (w.active_in as u64, w.active_out as u64);
        let flops = match l.kind {
            LayerKind::Conv2d => oh * ow * k * cin * cout,
            LayerKind::DepthwiseConv2d => cin * k * oh * ow,
            LayerKind::Dense => cin * cout,
            LayerKind::GlobalAvgpool => 0,
        };
        total += flops;
        *stages.entry(l.stage).or_insert(0) += flops;
        layers.push(LayerFlops {
            name: l.name.clone(),
            stage: l.stage,
            width: *w,
            flops,
        });
    }
    Ok(FlopsReport { total, layers, stages })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumRow {
    pub width: f64,
    pub flops: u64,
    /// Top-1 error in percent, when evaluated.
    pub top1err: Option<f64>,
}

/// One row per ratio, FLOPs only.
pub fn sweep_spectrum(arch: &ArchSpec, cfg: &WidthConfig, widths: &[f64]) -> Result<Vec<SpectrumRow>> {
    widths
        .iter()
        .map(|&r| {
            Ok(SpectrumRow {
                width: r,
                flops: count_flops(arch, &cfg.with_ratio(r))?.total,
                top1err: None,
            })
        })
        .collect()
}

/// Stages that own at least one width-bearing layer, excluding the stem (stage 0).
pub fn slimmable_stages(arch: &ArchSpec) -> Vec<usize> {
    let mut stages: Vec<usize> = arch
        .layers
        .iter()
        .filter(|l| l.width_bearing() && l.stage > 0)
        .map(|l| l.stage)
        .collect();
    stages.dedup();
    stages
}

/// Applies `extra` to one stage at a time on top of the global ratio sweep.
///
/// The lower bound is widened to `lower_bound * extra` so the slimmed stage
/// stays resolvable at the bottom of the sweep.
pub fn stage_sweep(
    arch: &ArchSpec,
    stages: &[usize],
    extra: f64,
    widths: &[f64],
    lower_bound: f64,
    divisor: usize,
) -> Result<Vec<(usize, Vec<SpectrumRow>)>> {
    stages
        .iter()
        .map(|&s| {
            let cfg = WidthConfig::with_stage_ratio(arch, s, extra, lower_bound * extra, divisor);
            Ok((s, sweep_spectrum(arch, &cfg, widths)?))
        })
        .collect()
}

/// CSV with header `width,flops,top1err`; `top1err` is blank when not evaluated.
pub fn write_spectrum_csv<W: Write>(out: W, rows: &[SpectrumRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| crate::Error::Io(e.into());
    w.write_record(["width", "flops", "top1err"]).map_err(io)?;
    for r in rows {
        let err = r.top1err.map(|e| format!("{e:.2}")).unwrap_or_default();
        w.write_record([format!("{}", r.width), r.flops.to_string(), err])
            .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
