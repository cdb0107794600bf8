//! Merges `--config` files, flags and defaults.

use std::path::Path;

use serde::Deserialize;
use usnet::data::DataSpec;
use usnet::train::{LossKind, TrainPlan};
use usnet::width::{SamplingRule, WidthConfig, WidthRange};
use usnet::ArchSpec;

use crate::args::TrainOpts;
use crate::{CliError, CliResult};

/// Keys accepted in a `--config` file; names match the long flags.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub arch: Option<String>,
    pub data: Option<String>,
    pub eval_data: Option<String>,
    pub width_range: Option<String>,
    pub n_widths: Option<usize>,
    pub rule: Option<SamplingRule>,
    pub distill: Option<bool>,
    pub loss: Option<LossKind>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr_start: Option<f64>,
    pub lr_end: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub divisor: Option<usize>,
    pub seed: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

/// A fully specified training setup.
#[derive(Debug, Clone)]
pub struct Setup {
    pub arch: ArchSpec,
    pub data: DataSpec,
    pub eval_data: Option<DataSpec>,
    pub width: WidthConfig,
    pub plan: TrainPlan,
}

/// Defaults that differ between commands.
#[derive(Debug, Clone, Copy)]
pub struct Defaults {
    pub n_widths: usize,
    pub distill: bool,
}

impl Default for Defaults {
    fn default() -> Self {
        Self {
            n_widths: 4,
            distill: true,
        }
    }
}

fn parse<T: std::str::FromStr<Err = usnet::Error>>(s: Option<String>) -> CliResult<Option<T>> {
    s.map(|v| v.parse::<T>().map_err(CliError::from)).transpose()
}

pub fn resolve(opts: &TrainOpts, defaults: Defaults) -> CliResult<Setup> {
    let file = match &opts.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let arch_name = opts
        .arch
        .clone()
        .or(file.arch)
        .unwrap_or_else(|| "mlp_2_16_16_2".into());
    let arch = ArchSpec::load(&arch_name)?;
    let data = match opts.data.clone() {
        Some(d) => d,
        None => parse::<DataSpec>(file.data)?.ok_or_else(|| CliError::Usage("--data is required".into()))?,
    };
    let eval_data = match opts.eval_data.clone() {
        Some(d) => Some(d),
        None => parse::<DataSpec>(file.eval_data)?,
    };
    let range = match opts.width_range {
        Some(r) => r,
        None => parse::<WidthRange>(file.width_range)?.unwrap_or(WidthRange {
            lo: 0.25,
            step: None,
            hi: 1.0,
        }),
    };
    if (range.hi - 1.0).abs() > 1e-9 {
        return Err(CliError::Usage(format!(
            "width range must end at 1.0, got {}",
            range.hi
        )));
    }
    let lower_bound = range.lo;
    if !(lower_bound > 0.0 && lower_bound < 1.0) {
        return Err(CliError::Usage(format!(
            "smallest width {lower_bound} must lie in (0, 1)"
        )));
    }
    let divisor = opts.divisor.or(file.divisor).unwrap_or(8);
    let width = WidthConfig::uniform(1.0, lower_bound, divisor);
    width.validate()?;

    let base = TrainPlan::default();
    let plan = TrainPlan {
        n_widths: opts.n_widths.or(file.n_widths).unwrap_or(defaults.n_widths),
        rule: opts.rule.or(file.rule).unwrap_or(base.rule),
        distill: opts.distill.or(file.distill).unwrap_or(defaults.distill),
        loss_kind: opts.loss.or(file.loss).unwrap_or(base.loss_kind),
        epochs: opts.epochs.or(file.epochs).unwrap_or(base.epochs),
        batch_size: opts.batch.or(file.batch).unwrap_or(base.batch_size),
        lr_start: opts.lr_start.or(file.lr_start).unwrap_or(base.lr_start),
        lr_end: opts.lr_end.or(file.lr_end).unwrap_or(base.lr_end),
        momentum: opts.momentum.or(file.momentum).unwrap_or(base.momentum),
        weight_decay: opts.weight_decay.or(file.weight_decay).unwrap_or(base.weight_decay),
        seed: opts.seed.or(file.seed).unwrap_or(base.seed),
    };
    plan.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(Setup {
        arch,
        data,
        eval_data,
        width,
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(data: &str) -> TrainOpts {
        TrainOpts {
            data: Some(data.parse().unwrap()),
            ..TrainOpts::default()
        }
    }

    #[test]
    fn defaults() {
        let s = resolve(&opts("synth:two_gaussians:64:0"), Defaults::default()).unwrap();
        assert_eq!(s.plan.n_widths, 4);
        assert_eq!(s.plan.rule, SamplingRule::Sandwich);
        assert!(s.plan.distill);
        assert_eq!(s.width.divisor, 8);
        assert_eq!(s.width.lower_bound, 0.25);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(
            &p,
            "epochs = 7\nseed = 3\nrule = \"max_plus_random\"\ndata = \"synth:two_moons_like:32:1\"\n",
        )
        .unwrap();
        let o = TrainOpts {
            config: Some(p),
            seed: Some(9),
            ..TrainOpts::default()
        };
        let s = resolve(&o, Defaults::default()).unwrap();
        assert_eq!((s.plan.epochs, s.plan.seed), (7, 9));
        assert_eq!(s.plan.rule, SamplingRule::MaxPlusRandom);
        assert_eq!(s.data.to_string(), "synth:two_moons_like:32:1");
    }

    #[test]
    fn invalid_combinations() {
        let o = TrainOpts {
            rule: Some(SamplingRule::NRandom),
            distill: Some(true),
            ..opts("synth:two_gaussians:64:0")
        };
        assert!(matches!(resolve(&o, Defaults::default()), Err(CliError::Usage(_))));
        let o = TrainOpts {
            width_range: Some("0.25:0.5".parse().unwrap()),
            ..opts("synth:two_gaussians:64:0")
        };
        assert!(resolve(&o, Defaults::default()).is_err());
        assert!(resolve(&TrainOpts::default(), Defaults::default()).is_err());
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "epochz = 7\n").unwrap();
        assert!(FileConfig::load(&p).is_err());
    }
}
