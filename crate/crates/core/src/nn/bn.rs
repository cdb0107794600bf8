//! Batch normalization with shared affine parameters and per-width statistics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::tensor::{BatchStats, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    #[default]
    Train,
    Eval,
}

/// Running mean and (biased) variance for one resolved width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    /// Moving-average initial state: zero mean, unit variance.
    pub fn init(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    /// `s <- m * s + (1 - m) * batch`.
    pub fn accumulate(&mut self, batch: &BatchStats, m: f32) {
        for (s, b) in self.mean.iter_mut().zip(&batch.mean) {
            *s = m * *s + (1.0 - m) * b;
        }
        for (s, b) in self.var.iter_mut().zip(&batch.var) {
            *s = m * *s + (1.0 - m) * b;
        }
    }
}

#[derive(Debug)]
pub struct BatchNorm {
    pub name: String,
    pub base: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f32,
    pub momentum: f32,
    pub mode: BnMode,
    stats: BTreeMap<usize, RunningStats>,
    tracked: BTreeSet<usize>,
}

impl BatchNorm {
    pub fn new(name: &str, base: usize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            base,
            gamma: Tensor::parameter(format!("{name}.gamma"), &[base], vec![1.0; base])?,
            beta: Tensor::parameter(format!("{name}.beta"), &[base], vec![0.0; base])?,
            eps: 1e-5,
            momentum: 0.9,
            mode: BnMode::Train,
            stats: BTreeMap::new(),
            tracked: BTreeSet::new(),
        })
    }

    pub fn tracked_widths(&self) -> &BTreeSet<usize> {
        &self.tracked
    }

    pub fn set_tracked_widths(&mut self, widths: impl IntoIterator<Item = usize>) {
        self.tracked = widths.into_iter().collect();
    }

    pub fn stats(&self, width: usize) -> Option<&RunningStats> {
        self.stats.get(&width)
    }

    pub fn all_stats(&self) -> &BTreeMap<usize, RunningStats> {
        &self.stats
    }

    pub fn set_stats(&mut self, width: usize, stats: RunningStats) -> Result<()> {
        self.check_width(width)?;
        if stats.mean.len() != width || stats.var.len() != width {
            return Err(Error::Config(format!(
                "`{}`: statistics of length {} stored for width {width}",
                self.name,
                stats.mean.len()
            )));
        }
        if stats.var.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::Config(format!(
                "`{}`: negative or NaN variance at width {width}",
                self.name
            )));
        }
        self.stats.insert(width, stats);
        Ok(())
    }

    pub fn clear_stats(&mut self) {
        self.stats.clear();
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width == 0 || width > self.base {
            return Err(Error::Width(format!(
                "`{}`: width {width} outside [1, {}]",
                self.name, self.base
            )));
        }
        Ok(())
    }

    fn missing(&self, width: usize) -> Error {
        Error::MissingStats {
            layer: self.name.clone(),
            width,
        }
    }

    /// Normalizes without touching stored state. Train mode also returns the
    /// batch statistics it used.
    pub fn normalize(&self, x: &Tensor, width: usize, mode: BnMode) -> Result<(Tensor, Option<BatchStats>)> {
        self.check_width(width)?;
        let got = x.shape().get(1).copied().unwrap_or(0);
        if got != width {
            return Err(Error::ChannelMismatch {
                layer: self.name.clone(),
                expected: width,
                got,
            });
        }
        let gamma = self.gamma.slice_channels(&[width])?;
        let beta = self.beta.slice_channels(&[width])?;
        match mode {
            BnMode::Train => {
                let (y, stats) = x.batch_norm(&gamma, &beta, self.eps)?;
                Ok((y, Some(stats)))
            }
            BnMode::Eval => {
                let s = self.stats.get(&width).ok_or_else(|| self.missing(width))?;
                Ok((x.bn_eval(&gamma, &beta, &s.mean, &s.var, self.eps)?, None))
            }
        }
    }

    /// Normalizes in the layer's own mode; in train mode, running statistics
    /// are updated only for tracked widths.
    pub fn forward(&mut self, x: &Tensor, width: usize) -> Result<Tensor> {
        let (y, batch) = self.normalize(x, width, self.mode)?;
        if let Some(b) = batch {
            self.update_running(width, &b);
        }
        Ok(y)
    }

    /// Moving-average update, skipped for untracked widths.
    pub fn update_running(&mut self, width: usize, batch: &BatchStats) {
        if self.tracked.contains(&width) {
            let m = self.momentum;
            self.stats
                .entry(width)
                .or_insert_with(|| RunningStats::init(width))
                .accumulate(batch, m);
        }
    }

    /// Folds eval-mode normalization into `x -> g * x + b`.
    pub fn merge(&self, width: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let s = self.stats.get(&width).ok_or_else(|| self.missing(width))?;
        let gamma = self.gamma.data();
        let beta = self.beta.data();
        let g: Vec<f32> = (0..width).map(|c| gamma[c] / (s.var[c] + self.eps).sqrt()).collect();
        let b = (0..width).map(|c| beta[c] - g[c] * s.mean[c]).collect();
        Ok((g, b))
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        vec![self.gamma.clone(), self.beta.clone()]
    }
}
