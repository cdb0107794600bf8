//! Width ratios, channel rounding and per-iteration width sampling.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, WidthRounding};
use crate::{Error, Result};

/// Float slack for ratios produced by range arithmetic (0.25 + 3 * 0.025 etc.).
const RATIO_SLACK: f64 = 1e-9;

/// `max(divisor, floor(base * ratio / divisor) * divisor)`, capped at `base`.
pub fn round_width(base: usize, ratio: f64, divisor: usize) -> Result<usize> {
    if divisor == 0 {
        return Err(Error::Width("divisor must be positive".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0 + RATIO_SLACK) {
        return Err(Error::Width(format!("ratio {ratio} outside (0, 1]")));
    }
    if base < divisor {
        return Err(Error::Width(format!(
            "base width {base} is smaller than divisor {divisor}; declare the layer non-slimmable"
        )));
    }
    let units = (base as f64 * ratio / divisor as f64 + RATIO_SLACK).floor() as usize;
    Ok((units * divisor).max(divisor).min(base))
}

/// Nearest multiple of `divisor` (at least `divisor`), plus one step when
/// rounding down would lose more than 10% of `base * ratio`. Capped at `base`.
pub fn round_width_nearest(base: usize, ratio: f64, divisor: usize) -> Result<usize> {
    // shares the argument checks
    round_width(base, ratio, divisor)?;
    let v = base as f64 * ratio;
    let d = divisor as f64;
    let mut w = ((v + d / 2.0 + RATIO_SLACK) / d).floor() * d;
    w = w.max(d);
    if w < 0.9 * v {
        w += d;
    }
    Ok((w as usize).min(base))
}

pub fn round_width_with(rounding: WidthRounding, base: usize, ratio: f64, divisor: usize) -> Result<usize> {
    match rounding {
        WidthRounding::Floor => round_width(base, ratio, divisor),
        WidthRounding::Nearest => round_width_nearest(base, ratio, divisor),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthMode {
    Uniform,
    Nonuniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthConfig {
    pub mode: WidthMode,
    pub global_ratio: f64,
    /// Per width-bearing layer multipliers on top of the global ratio (nonuniform mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_layer_ratios: Option<Vec<f64>>,
    pub lower_bound: f64,
    pub divisor: usize,
}

impl Default for WidthConfig {
    fn default() -> Self {
        Self::uniform(1.0, 0.25, 8)
    }
}

impl WidthConfig {
    pub fn uniform(ratio: f64, lower_bound: f64, divisor: usize) -> Self {
        Self {
            mode: WidthMode::Uniform,
            global_ratio: ratio,
            per_layer_ratios: None,
            lower_bound,
            divisor,
        }
    }

    pub fn nonuniform(per_layer: Vec<f64>, lower_bound: f64, divisor: usize) -> Self {
        Self {
            mode: WidthMode::Nonuniform,
            global_ratio: 1.0,
            per_layer_ratios: Some(per_layer),
            lower_bound,
            divisor,
        }
    }

    /// Multiplies the ratio of every width-bearing layer in `stage` by `extra`.
    pub fn with_stage_ratio(arch: &ArchSpec, stage: usize, extra: f64, lower_bound: f64, divisor: usize) -> Self {
        let per_layer = arch
            .layers
            .iter()
            .filter(|l| l.width_bearing())
            .map(|l| if l.stage == stage { extra } else { 1.0 })
            .collect();
        Self::nonuniform(per_layer, lower_bound, divisor)
    }

    pub fn with_ratio(&self, ratio: f64) -> Self {
        Self {
            global_ratio: ratio,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower_bound > 0.0 && self.lower_bound < 1.0) {
            return Err(Error::Width(format!(
                "lower bound ratio {} must be in (0, 1)",
                self.lower_bound
            )));
        }
        if self.divisor == 0 {
            return Err(Error::Width("divisor must be positive".into()));
        }
        if self.mode == WidthMode::Nonuniform && self.per_layer_ratios.is_none() {
            return Err(Error::Width("nonuniform mode needs per-layer ratios".into()));
        }
        Ok(())
    }

    /// Sample that reproduces this config's own global ratio.
    pub fn sample(&self) -> WidthSample {
        WidthSample {
            ratios: vec![self.global_ratio],
            tag: WidthTag::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthTag {
    Smallest,
    Largest,
    Random,
}

impl fmt::Display for WidthTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WidthTag::Smallest => "smallest",
            WidthTag::Largest => "largest",
            WidthTag::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthSample {
    /// One global ratio, or one ratio per width-bearing layer.
    pub ratios: Vec<f64>,
    pub tag: WidthTag,
}

impl WidthSample {
    pub fn global(ratio: f64, tag: WidthTag) -> Self {
        Self {
            ratios: vec![ratio],
            tag,
        }
    }

    pub fn ratio(&self) -> f64 {
        self.ratios[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingRule {
    /// Largest + smallest + (n - 2) random.
    Sandwich,
    NRandom,
    MinPlusRandom,
    MaxPlusRandom,
}

impl SamplingRule {
    pub const ALL: [SamplingRule; 4] = [
        SamplingRule::NRandom,
        SamplingRule::MinPlusRandom,
        SamplingRule::MaxPlusRandom,
        SamplingRule::Sandwich,
    ];

    pub fn includes_largest(self) -> bool {
        matches!(self, SamplingRule::Sandwich | SamplingRule::MaxPlusRandom)
    }

    pub fn includes_smallest(self) -> bool {
        matches!(self, SamplingRule::Sandwich | SamplingRule::MinPlusRandom)
    }

    /// Row label in the style of the sampling-rule ablation table.
    pub fn label(self, n: usize) -> String {
        match self {
            SamplingRule::NRandom => format!("{n} random"),
            SamplingRule::MinPlusRandom => format!("min+{} random", n.saturating_sub(1)),
            SamplingRule::MaxPlusRandom => format!("max+{} random", n.saturating_sub(1)),
            SamplingRule::Sandwich => format!("min+{} random+max", n.saturating_sub(2)),
        }
    }
}

impl fmt::Display for SamplingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingRule::Sandwich => "sandwich",
            SamplingRule::NRandom => "n_random",
            SamplingRule::MinPlusRandom => "min_plus_random",
            SamplingRule::MaxPlusRandom => "max_plus_random",
        })
    }
}

impl FromStr for SamplingRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sandwich" => Ok(SamplingRule::Sandwich),
            "n_random" => Ok(SamplingRule::NRandom),
            "min_plus_random" => Ok(SamplingRule::MinPlusRandom),
            "max_plus_random" => Ok(SamplingRule::MaxPlusRandom),
            other => Err(Error::Config(format!("unknown sampling rule `{other}`"))),
        }
    }
}

/// Widths for one training iteration, largest first when present.
pub fn sample_widths<R: Rng + ?Sized>(
    rule: SamplingRule,
    n: usize,
    lower_bound: f64,
    rng: &mut R,
) -> Result<Vec<WidthSample>> {
    let min_n = if rule == SamplingRule::Sandwich { 2 } else { 1 };
    if n < min_n {
        return Err(Error::Width(format!("rule {rule} needs n >= {min_n}, got {n}")));
    }
    if !(lower_bound > 0.0 && lower_bound < 1.0) {
        return Err(Error::Width(format!(
            "lower bound ratio {lower_bound} must be in (0, 1)"
        )));
    }
    let mut out = Vec::with_capacity(n);
    if rule.includes_largest() {
        out.push(WidthSample::global(1.0, WidthTag::Largest));
    }
    if rule.includes_smallest() {
        out.push(WidthSample::global(lower_bound, WidthTag::Smallest));
    }
    while out.len() < n {
        let r = rng.gen_range(lower_bound..1.0);
        out.push(WidthSample::global(r, WidthTag::Random));
    }
    Ok(out)
}

/// Concrete channel counts entering and leaving one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerWidth {
    pub active_in: usize,
    pub active_out: usize,
}

/// Per-layer channel counts for `arch` under `cfg` at `sample`.
///
/// The effective ratio of a width-bearing layer is the sample's global ratio
/// times the config's per-layer multiplier (1.0 in uniform mode), unless the
/// sample already carries one ratio per width-bearing layer.
pub fn resolve(arch: &ArchSpec, cfg: &WidthConfig, sample: &WidthSample) -> Result<Vec<LayerWidth>> {
    cfg.validate()?;
    let n_bearing = arch.num_width_bearing();
    let per_layer = match (cfg.mode, &cfg.per_layer_ratios) {
        (WidthMode::Nonuniform, Some(r)) => {
            if r.len() != n_bearing {
                return Err(Error::Width(format!(
                    "{} per-layer ratios for {n_bearing} slimmable layers",
                    r.len()
                )));
            }
            Some(r.as_slice())
        }
        _ => None,
    };
    let explicit = match sample.ratios.len() {
        1 => None,
        n if n == n_bearing => Some(sample.ratios.as_slice()),
        n => {
            return Err(Error::Width(format!(
                "sample has {n} ratios for {n_bearing} slimmable layers"
            )))
        }
    };

    let mut widths = Vec::with_capacity(arch.layers.len());
    let mut channels = arch.input_shape[0];
    let mut j = 0;
    for layer in &arch.layers {
        let active_out = if layer.kind.channel_preserving() {
            channels
        } else if let Some(t) = layer.expand {
            channels * t
        } else if layer.slimmable {
            let ratio = match explicit {
                Some(r) => r[j],
                None => sample.ratios[0] * per_layer.map_or(1.0, |p| p[j]),
            };
            j += 1;
            if ratio < cfg.lower_bound - RATIO_SLACK {
                return Err(Error::Width(format!(
                    "layer `{}` ratio {ratio} below lower bound {}",
                    layer.name, cfg.lower_bound
                )));
            }
            round_width_with(arch.width_rounding, layer.base_out, ratio.min(1.0), cfg.divisor)?
        } else {
            layer.base_out
        };
        widths.push(LayerWidth {
            active_in: channels,
            active_out,
        });
        channels = active_out;
    }
    Ok(widths)
}

/// Ratio range written `lo:step:hi` (inclusive) or `lo:hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WidthRange {
    pub lo: f64,
    pub step: Option<f64>,
    pub hi: f64,
}

impl WidthRange {
    pub fn values(&self) -> Vec<f64> {
        match self.step {
            None => vec![self.lo, self.hi],
            Some(step) => {
                let n = ((self.hi - self.lo) / step + 1e-6).floor() as usize + 1;
                // round away float noise so 0.25 + 3 * 0.025 prints as 0.325
                (0..n)
                    .map(|i| ((self.lo + i as f64 * step) * 1e9).round() / 1e9)
                    .collect()
            }
        }
    }
}

impl FromStr for WidthRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |p: &str| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number `{p}` in width range `{s}`")))
        };
        let parts: Vec<&str> = s.split(':').collect();
        let range = match parts.as_slice() {
            [lo, hi] => WidthRange {
                lo: parse(lo)?,
                step: None,
                hi: parse(hi)?,
            },
            [lo, step, hi] => WidthRange {
                lo: parse(lo)?,
                step: Some(parse(step)?),
                hi: parse(hi)?,
            },
            _ => return Err(Error::Config(format!("width range `{s}` is not lo:step:hi or lo:hi"))),
        };
        if !(range.lo > 0.0 && range.lo <= range.hi && range.hi <= 1.0) {
            return Err(Error::Config(format!(
                "width range `{s}` must satisfy 0 < lo <= hi <= 1"
            )));
        }
        if matches!(range.step, Some(st) if st <= 0.0) {
            return Err(Error::Config(format!("width range `{s}` needs a positive step")));
        }
        Ok(range)
    }
}
