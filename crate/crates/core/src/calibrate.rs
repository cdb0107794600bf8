//! Post-training batch-norm statistics at arbitrary widths.
//!
//! Running statistics are only tracked for the smallest and largest widths
//! during training. Any other width gets its statistics here, by running the
//! frozen network in train-mode normalization over a seeded subset of the
//! data and accumulating the observed batch means and variances.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::nn::{BnMode, RunningStats, SlimmableNet};
use crate::tensor::{no_grad, BatchStats};
use crate::train::evaluate;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Average {
    /// `s_t = m * s_{t-1} + (1 - m) * batch_t` from `(0, 1)` with the layer momentum.
    Moving,
    /// Momentum `(t - 1) / t`: the arithmetic mean of the batch statistics.
    #[default]
    Exact,
}

impl fmt::Display for Average {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Average::Moving => "moving",
            Average::Exact => "exact",
        })
    }
}

impl FromStr for Average {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moving" => Ok(Average::Moving),
            "exact" => Ok(Average::Exact),
            _ => Err(Error::Config(format!(
                "unknown average `{s}`; expected exact or moving"
            ))),
        }
    }
}

/// Accumulates batch statistics for one width of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulator {
    pub average: Average,
    pub momentum: f32,
    pub batches: usize,
    pub stats: RunningStats,
}

impl Accumulator {
    pub fn new(width: usize, average: Average, momentum: f32) -> Self {
        Self {
            average,
            momentum,
            batches: 0,
            stats: RunningStats::init(width),
        }
    }

    pub fn push(&mut self, batch: &BatchStats) {
        self.batches += 1;
        let m = match self.average {
            Average::Moving => self.momentum,
            Average::Exact => (self.batches - 1) as f32 / self.batches as f32,
        };
        self.stats.accumulate(batch, m);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPlan {
    pub widths: Vec<f64>,
    /// Number of examples to draw; `None` uses the whole dataset.
    pub samples: Option<usize>,
    pub average: Average,
    pub batch_size: usize,
    pub seed: u64,
}

/// The first `s` entries of a seeded permutation, drawn without replacement.
/// A smaller `s` with the same seed yields a prefix of a larger one.
pub fn calibration_subset(len: usize, s: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(s);
    idx
}

/// Per-layer statistics computed for one width ratio: `(block, width, stats)`.
pub type WidthStats = Vec<(usize, usize, RunningStats)>;

/// Statistics for one ratio, without touching the network.
pub fn collect_stats(
    net: &SlimmableNet,
    data: &Dataset,
    batches: &[Vec<usize>],
    ratio: f64,
    average: Average,
) -> Result<WidthStats> {
    let widths = net.resolve_ratio(ratio)?;
    let mut acc: BTreeMap<usize, Accumulator> = BTreeMap::new();
    for idx in batches {
        let (x, _) = data.batch(idx);
        let out = no_grad(|| net.forward(&x, &widths, BnMode::Train))?;
        for (i, w, s) in &out.batch_stats {
            let momentum = net.blocks()[*i].bn.as_ref().map_or(0.9, |bn| bn.momentum);
            acc.entry(*i)
                .or_insert_with(|| Accumulator::new(*w, average, momentum))
                .push(s);
        }
    }
    Ok(acc.into_iter().map(|(i, a)| (i, a.stats.mean.len(), a.stats)).collect())
}

/// What a calibration run stored.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub widths: Vec<f64>,
    pub examples: usize,
    pub batches: usize,
}

/// Computes and stores statistics for every ratio in `plan.widths`.
///
/// Widths are processed in parallel over the read-only network and written
/// back in ascending ratio order, so the result does not depend on the order
/// of `plan.widths` or on thread scheduling. Weights, `gamma` and `beta` are
/// never modified.
pub fn calibrate(net: &mut SlimmableNet, data: &Dataset, plan: &CalibrationPlan) -> Result<CalibrationReport> {
    let s = plan.samples.unwrap_or(data.len());
    if s == 0 {
        return Err(Error::Config("calibration needs at least one sample".into()));
    }
    if s > data.len() {
        return Err(Error::Config(format!(
            "{s} calibration samples requested from {} examples",
            data.len()
        )));
    }
    if plan.batch_size == 0 {
        return Err(Error::Config("calibration batch size must be positive".into()));
    }
    let lb = net.width_config().lower_bound;
    if let Some(r) = plan.widths.iter().find(|r| !(**r >= lb - 1e-9 && **r <= 1.0 + 1e-9)) {
        return Err(Error::Width(format!("calibration width {r} outside [{lb}, 1]")));
    }
    let subset = calibration_subset(data.len(), s, plan.seed);
    let batches: Vec<Vec<usize>> = subset.chunks(plan.batch_size).map(<[usize]>::to_vec).collect();

    let mut widths = plan.widths.clone();
    widths.sort_by(f64::total_cmp);
    widths.dedup();
    let frozen: &SlimmableNet = net;
    let results: Vec<WidthStats> = widths
        .par_iter()
        .map(|&r| collect_stats(frozen, data, &batches, r, plan.average))
        .collect::<Result<_>>()?;
    for per_width in results {
        for (i, w, stats) in per_width {
            let bn = net.blocks_mut()[i]
                .bn
                .as_mut()
                .expect("stats come from a normalization layer");
            bn.set_stats(w, stats)?;
        }
    }
    log::info!(
        "calibrated {} widths over {s} examples in {} batches",
        widths.len(),
        batches.len()
    );
    Ok(CalibrationReport {
        widths,
        examples: s,
        batches: batches.len(),
    })
}

/// Evaluates a conventionally trained network at narrower widths.
///
/// Widths that already have statistics everywhere (the trained width) are
/// evaluated as they are; the others are calibrated first.
pub fn naive_slimmable_eval(
    net: &mut SlimmableNet,
    calib_data: &Dataset,
    eval_data: &Dataset,
    plan: &CalibrationPlan,
) -> Result<Vec<(f64, f64)>> {
    let mut missing = Vec::new();
    for &r in &plan.widths {
        if !net.has_stats_at(r)? {
            missing.push(r);
        }
    }
    if !missing.is_empty() {
        calibrate(
            net,
            calib_data,
            &CalibrationPlan {
                widths: missing,
                ..plan.clone()
            },
        )?;
    }
    plan.widths
        .iter()
        .map(|&r| Ok((r, evaluate(net, eval_data, r, plan.batch_size)?)))
        .collect()
}
