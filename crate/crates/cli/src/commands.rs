//! Command implementations. Each writes its report to `out`.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use usnet::calibrate::{calibrate as calibrate_net, CalibrationPlan};
use usnet::data::{load_checkpoint, save_checkpoint, CheckpointMeta, Dataset};
use usnet::flops::{count_flops, slimmable_stages, stage_sweep, sweep_spectrum, write_spectrum_csv, SpectrumRow};
use usnet::train::{evaluate, plan_from_log, plan_record, train as train_net, SgdOptimizer, TrainLog, TrainPlan};
use usnet::width::{SamplingRule, WidthConfig, WidthTag};
use usnet::{ArchSpec, SlimmableNet};

use crate::args::{AblateArgs, CalibrateArgs, FlopsArgs, SweepArgs, TrainArgs};
use crate::config::{resolve, Defaults, Setup};
use crate::{CliError, CliResult};

/// Log records kept inside the checkpoint.
const LOG_TAIL: usize = 20;

fn io(e: std::io::Error) -> CliError {
    CliError::Core(e.into())
}

fn default_log_path(ckpt: &Path) -> PathBuf {
    let mut p = ckpt.as_os_str().to_owned();
    p.push(".log.jsonl");
    PathBuf::from(p)
}

/// Builds and trains a network from a resolved setup; all randomness comes from `plan.seed`.
pub fn train_setup(setup: &Setup, data: &Dataset) -> CliResult<(SlimmableNet, TrainLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(setup.plan.seed);
    let mut net = SlimmableNet::new(setup.arch.clone(), setup.width.clone(), &mut rng)?;
    let mut opt = SgdOptimizer::for_plan(&setup.plan);
    let log = train_net(&mut net, &mut opt, data, &setup.plan, &mut rng)?;
    Ok((net, log))
}

pub fn train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let setup = resolve(&a.opts, Defaults::default())?;
    let data = setup.data.load()?;
    let (net, log) = train_setup(&setup, &data)?;
    let lines = log.json_lines();
    let record = plan_record(&setup.plan);
    let log_path = a.log.clone().unwrap_or_else(|| default_log_path(&a.out));
    let text: String = std::iter::once(&record)
        .chain(&lines)
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(&log_path, text).map_err(io)?;
    let mut tail = vec![record];
    tail.extend(lines.iter().skip(lines.len().saturating_sub(LOG_TAIL)).cloned());
    let meta = CheckpointMeta {
        seed: setup.plan.seed,
        log_tail: tail,
    };
    save_checkpoint(&a.out, &net, &meta)?;
    writeln!(
        out,
        "trained {} for {} epochs ({} steps)",
        setup.arch.name, setup.plan.epochs, log.steps
    )
    .map_err(io)?;
    for tag in [WidthTag::Smallest, WidthTag::Largest] {
        if let Some(r) = log.last(tag) {
            writeln!(
                out,
                "  {tag:<8} width: loss {:.4}, train accuracy {:.2}%",
                r.loss,
                100.0 * r.accuracy
            )
            .map_err(io)?;
        }
    }
    writeln!(out, "checkpoint: {}\nlog: {}", a.out.display(), log_path.display()).map_err(io)?;
    Ok(())
}

pub fn calibrate(a: &CalibrateArgs, out: &mut dyn Write) -> CliResult<()> {
    if !a.ckpt.exists() {
        return Err(CliError::Usage(format!("checkpoint {} not found", a.ckpt.display())));
    }
    let (mut net, meta) = load_checkpoint(&a.ckpt)?;
    let data = a.data.load()?;
    let batch = a
        .batch
        .or_else(|| plan_from_log(&meta.log_tail).map(|p| p.batch_size))
        .unwrap_or(TrainPlan::default().batch_size);
    let plan = CalibrationPlan {
        widths: a.widths.values(),
        samples: a.samples,
        average: a.average,
        batch_size: batch,
        seed: a.seed.unwrap_or(meta.seed),
    };
    let report = calibrate_net(&mut net, &data, &plan)?;
    let dest = a.out.as_ref().unwrap_or(&a.ckpt);
    save_checkpoint(dest, &net, &meta)?;
    writeln!(
        out,
        "calibrated {} widths ({} average) over {} examples in {} batches -> {}",
        report.widths.len(),
        a.average,
        report.examples,
        report.batches,
        dest.display()
    )
    .map_err(io)?;
    Ok(())
}

fn write_rows(path: Option<&Path>, rows: &[SpectrumRow], out: &mut dyn Write) -> CliResult<()> {
    match path {
        Some(p) => write_spectrum_csv(std::fs::File::create(p).map_err(io)?, rows)?,
        None => write_spectrum_csv(&mut *out, rows)?,
    }
    Ok(())
}

pub fn sweep(a: &SweepArgs, out: &mut dyn Write) -> CliResult<()> {
    let widths = a.widths.values();
    let (arch, cfg, net) = match (&a.ckpt, &a.arch) {
        (Some(p), _) => {
            let (net, _) = load_checkpoint(p)?;
            (net.arch().clone(), net.width_config().clone(), Some(net))
        }
        (None, Some(name)) => (
            ArchSpec::load(name)?,
            WidthConfig::uniform(1.0, a.lower_bound, a.divisor),
            None,
        ),
        (None, None) => return Err(CliError::Usage("sweep needs --ckpt or --arch".into())),
    };
    if let Some(extra) = a.stage_extra {
        if a.data.is_some() {
            return Err(CliError::Usage("--stage-extra sweeps FLOPs only; drop --data".into()));
        }
        let curves = stage_sweep(
            &arch,
            &slimmable_stages(&arch),
            extra,
            &widths,
            cfg.lower_bound,
            cfg.divisor,
        )?;
        for (stage, rows) in curves {
            match &a.out {
                Some(p) => {
                    let stem = p.with_extension("");
                    let path = PathBuf::from(format!("{}.stage{stage}.csv", stem.display()));
                    write_rows(Some(&path), &rows, out)?;
                }
                None => {
                    writeln!(out, "# stage {stage}, extra ratio {extra}").map_err(io)?;
                    write_rows(None, &rows, out)?;
                }
            }
        }
        return Ok(());
    }
    let mut rows = sweep_spectrum(&arch, &cfg, &widths)?;
    if let Some(spec) = &a.data {
        let net = net.as_ref().expect("clap requires --ckpt with --data");
        let uncalibrated: Vec<String> = widths
            .iter()
            .filter(|&&r| !net.has_stats_at(r).unwrap_or(false))
            .map(|r| r.to_string())
            .collect();
        if !uncalibrated.is_empty() {
            return Err(CliError::Usage(format!(
                "widths {} have no batch-norm statistics; run `usnet calibrate` for them first",
                uncalibrated.join(", ")
            )));
        }
        let data = spec.load()?;
        for row in &mut rows {
            row.top1err = Some(100.0 * (1.0 - evaluate(net, &data, row.width, a.batch)?));
        }
    }
    write_rows(a.out.as_deref(), &rows, out)
}

pub fn flops(a: &FlopsArgs, out: &mut dyn Write) -> CliResult<()> {
    let arch = ArchSpec::load(&a.arch)?;
    let cfg = WidthConfig::uniform(a.width, a.lower_bound, a.divisor);
    let report = count_flops(&arch, &cfg)?;
    writeln!(
        out,
        "{} at {}x: {:.1}M multiply-adds",
        arch.name,
        a.width,
        report.millions()
    )
    .map_err(io)?;
    for (stage, f) in &report.stages {
        writeln!(out, "  stage {stage}: {:.2}M", *f as f64 / 1e6).map_err(io)?;
    }
    if a.per_layer {
        for l in &report.layers {
            writeln!(
                out,
                "    {:<14} {:>5} -> {:<5} {:>12}",
                l.name, l.width.active_in, l.width.active_out, l.flops
            )
            .map_err(io)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub rule: SamplingRule,
    pub label: String,
    /// Accuracy in `[0, 1]` per evaluated width.
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub widths: Vec<f64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, rule: SamplingRule) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.rule == rule)
    }
}

/// Trains once per sampling rule with otherwise identical settings (and the
/// same initialization), calibrates, and reports held-out accuracy at the
/// smallest width, 0.5, 0.75 and 1.0.
pub fn ablate(a: &AblateArgs, out: &mut dyn Write) -> CliResult<AblationTable> {
    let setup = resolve(
        &a.opts,
        Defaults {
            n_widths: 3,
            distill: false,
        },
    )?;
    let data = setup.data.load()?;
    let (train_data, eval_data) = match &setup.eval_data {
        Some(spec) => (data, spec.load()?),
        None => data.split(0.2, &mut ChaCha8Rng::seed_from_u64(setup.plan.seed)),
    };
    let k0 = setup.width.lower_bound;
    let mut widths = vec![k0];
    widths.extend([0.5, 0.75, 1.0].into_iter().filter(|&w| w > k0 + 1e-9));

    let mut rows = Vec::new();
    for rule in SamplingRule::ALL {
        let plan = TrainPlan {
            rule,
            distill: setup.plan.distill && rule.includes_largest(),
            ..setup.plan.clone()
        };
        let run = Setup { plan, ..setup.clone() };
        let (mut net, _) = train_setup(&run, &train_data)?;
        let cal = CalibrationPlan {
            widths: widths.clone(),
            samples: None,
            average: Default::default(),
            batch_size: run.plan.batch_size,
            seed: run.plan.seed,
        };
        calibrate_net(&mut net, &train_data, &cal)?;
        let accuracy = widths
            .iter()
            .map(|&r| evaluate(&net, &eval_data, r, run.plan.batch_size))
            .collect::<usnet::Result<Vec<_>>>()?;
        rows.push(AblationRow {
            rule,
            label: rule.label(run.plan.n_widths),
            accuracy,
        });
    }
    let table = AblationTable { widths, rows };

    let header: Vec<String> = table.widths.iter().map(|w| format!("{w:>7}")).collect();
    writeln!(out, "{:<22}{}", "sampling rule", header.join("")).map_err(io)?;
    for r in &table.rows {
        let cells: Vec<String> = r.accuracy.iter().map(|a| format!("{:>7.2}", 100.0 * a)).collect();
        writeln!(out, "{:<22}{}", r.label, cells.join("")).map_err(io)?;
    }
    if let Some(p) = &a.out {
        let mut w = csv::Writer::from_path(p).map_err(|e| io(e.into()))?;
        let mut head = vec!["rule".to_string()];
        head.extend(table.widths.iter().map(|x| format!("acc@{x}")));
        w.write_record(&head).map_err(|e| io(e.into()))?;
        for r in &table.rows {
            let mut rec = vec![r.label.clone()];
            rec.extend(r.accuracy.iter().map(|a| format!("{a:.4}")));
            w.write_record(&rec).map_err(|e| io(e.into()))?;
        }
        w.flush().map_err(io)?;
    }
    Ok(table)
}
