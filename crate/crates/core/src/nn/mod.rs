//! Slimmable layers, switchable batch norm and whole networks built from an [`ArchSpec`].

mod bn;
mod layer;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

pub use bn::{BatchNorm, BnMode, RunningStats};
pub use layer::{residual_profile, ConvAttrs, ResidualProfile, SlimmableLayer};

use crate::arch::{Activation, ArchSpec, LayerSpec};
use crate::tensor::{BatchStats, Tensor};
use crate::width::{resolve, LayerWidth, WidthConfig, WidthSample, WidthTag};
use crate::{Error, Result};

/// One declared layer with its optional normalization.
#[derive(Debug)]
pub struct Block {
    pub spec: LayerSpec,
    /// `None` for pooling.
    pub layer: Option<SlimmableLayer>,
    pub bn: Option<BatchNorm>,
}

/// Logits plus the batch statistics each train-mode normalization observed.
#[derive(Debug)]
pub struct NetOutput {
    pub logits: Tensor,
    /// `(block index, width, stats)`.
    pub batch_stats: Vec<(usize, usize, BatchStats)>,
}

#[derive(Debug)]
pub struct SlimmableNet {
    arch: ArchSpec,
    width: WidthConfig,
    blocks: Vec<Block>,
    forwards: AtomicUsize,
}

impl SlimmableNet {
    pub fn new<R: Rng + ?Sized>(arch: ArchSpec, width: WidthConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        width.validate()?;
        let mut blocks = Vec::with_capacity(arch.layers.len());
        for spec in &arch.layers {
            let layer = if spec.kind.has_weights() {
                let conv = ConvAttrs {
                    kernel: spec.kernel,
                    stride: spec.stride,
                    padding: spec.padding,
                };
                Some(SlimmableLayer::new(
                    &spec.name,
                    spec.kind,
                    spec.base_in,
                    spec.base_out,
                    conv,
                    spec.has_bias(),
                    spec.output_averaging,
                    rng,
                )?)
            } else {
                None
            };
            let bn = if spec.norm {
                Some(BatchNorm::new(&format!("{}.bn", spec.name), spec.base_out)?)
            } else {
                None
            };
            blocks.push(Block {
                spec: spec.clone(),
                layer,
                bn,
            });
        }
        let mut net = Self {
            arch,
            width,
            blocks,
            forwards: AtomicUsize::new(0),
        };
        net.track_default_widths()?;
        Ok(net)
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn width_config(&self) -> &WidthConfig {
        &self.width
    }

    /// Replaces the width config and re-derives the tracked widths.
    pub fn set_width_config(&mut self, width: WidthConfig) -> Result<()> {
        width.validate()?;
        self.width = width;
        self.track_default_widths()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    /// Running statistics follow the smallest and largest widths.
    fn track_default_widths(&mut self) -> Result<()> {
        let lo = self.resolve(&WidthSample::global(self.width.lower_bound, WidthTag::Smallest))?;
        let hi = self.resolve(&WidthSample::global(1.0, WidthTag::Largest))?;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if let Some(bn) = &mut b.bn {
                bn.set_tracked_widths([lo[i].active_out, hi[i].active_out]);
            }
        }
        Ok(())
    }

    pub fn resolve(&self, sample: &WidthSample) -> Result<Vec<LayerWidth>> {
        resolve(&self.arch, &self.width, sample)
    }

    pub fn resolve_ratio(&self, ratio: f64) -> Result<Vec<LayerWidth>> {
        self.resolve(&WidthSample::global(ratio, WidthTag::Random))
    }

    /// Number of forward passes run so far.
    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    /// Runs the network at resolved `widths` without touching stored state.
    pub fn forward(&self, x: &Tensor, widths: &[LayerWidth], mode: BnMode) -> Result<NetOutput> {
        if widths.len() != self.blocks.len() {
            return Err(Error::Width(format!(
                "{} layer widths for {} layers",
                widths.len(),
                self.blocks.len()
            )));
        }
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let mut saved: Vec<Option<Tensor>> = vec![None; self.blocks.len()];
        let mut batch_stats = Vec::new();
        let mut h = x.clone();
        for (i, (block, w)) in self.blocks.iter().zip(widths).enumerate() {
            h = match &block.layer {
                Some(layer) => layer.forward_at(&h, w.active_in, w.active_out)?,
                None => global_avgpool(&h, &block.spec.name)?,
            };
            if let Some(bn) = &block.bn {
                let (y, stats) = bn.normalize(&h, w.active_out, mode)?;
                if let Some(s) = stats {
                    batch_stats.push((i, w.active_out, s));
                }
                h = y;
            }
            if block.spec.activation == Activation::Relu {
                h = h.relu();
            }
            for &[from, to] in &self.arch.residuals {
                if to == i {
                    let skip = saved[from].as_ref().expect("residual source precedes target");
                    h = h.add(skip)?;
                }
            }
            if self.arch.residuals.iter().any(|r| r[0] == i) {
                saved[i] = Some(h.clone());
            }
        }
        let logits = if h.shape().len() > 2 {
            let b = h.shape()[0];
            h.reshape(&[b, h.numel() / b])?
        } else {
            h
        };
        Ok(NetOutput { logits, batch_stats })
    }

    pub fn forward_sample(&self, x: &Tensor, sample: &WidthSample, mode: BnMode) -> Result<NetOutput> {
        self.forward(x, &self.resolve(sample)?, mode)
    }

    /// Folds a train-mode pass's batch statistics into the tracked running averages.
    pub fn track(&mut self, out: &NetOutput) {
        for (i, width, stats) in &out.batch_stats {
            if let Some(bn) = &mut self.blocks[*i].bn {
                bn.update_running(*width, stats);
            }
        }
    }

    /// All trainable tensors in declaration order.
    pub fn parameters(&self) -> Vec<Tensor> {
        let mut p = Vec::new();
        for b in &self.blocks {
            if let Some(l) = &b.layer {
                p.extend(l.parameters());
            }
            if let Some(bn) = &b.bn {
                p.extend(bn.parameters());
            }
        }
        p
    }

    pub fn zero_grad(&self) {
        self.parameters().iter().for_each(Tensor::zero_grad);
    }

    /// Copies of every parameter's values, for before/after comparisons.
    pub fn parameter_values(&self) -> Vec<Vec<f32>> {
        self.parameters().iter().map(Tensor::to_vec).collect()
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = (usize, &BatchNorm)> {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.bn.as_ref().map(|bn| (i, bn)))
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = (usize, &mut BatchNorm)> {
        self.blocks
            .iter_mut()
            .enumerate()
            .filter_map(|(i, b)| b.bn.as_mut().map(|bn| (i, bn)))
    }

    /// True when every normalization has statistics for its width at `ratio`.
    pub fn has_stats_at(&self, ratio: f64) -> Result<bool> {
        let widths = self.resolve_ratio(ratio)?;
        Ok(self
            .batch_norms()
            .all(|(i, bn)| bn.stats(widths[i].active_out).is_some()))
    }

    pub fn clear_stats(&mut self) {
        self.batch_norms_mut().for_each(|(_, bn)| bn.clear_stats());
    }
}

fn global_avgpool(x: &Tensor, name: &str) -> Result<Tensor> {
    match x.shape() {
        [_, _, h, w] if h == w => Ok(x.avgpool(*h, 1)?),
        s => Err(Error::Config(format!(
            "pooling `{name}` needs square spatial input, got {s:?}"
        ))),
    }
}

/// Row-wise argmax of `[B, C]` logits.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}
