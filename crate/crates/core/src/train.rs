//! Multi-width training: sandwich-rule sampling with inplace distillation.
//!
//! Each iteration zeroes gradients once, runs the sampled widths (largest
//! first, against ground truth), lets every other width learn from the
//! detached largest-width logits when distilling, accumulates all gradients
//! into the shared weights and takes a single optimizer step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::nn::{predictions, BnMode, SlimmableNet};
use crate::tensor::{no_grad, Sgd, Tensor};
use crate::width::{sample_widths, LayerWidth, SamplingRule, WidthSample, WidthTag};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub n_widths: usize,
    pub rule: SamplingRule,
    pub distill: bool,
    pub loss_kind: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            n_widths: 4,
            rule: SamplingRule::Sandwich,
            distill: true,
            loss_kind: LossKind::CrossEntropy,
            epochs: 50,
            batch_size: 64,
            lr_start: 0.1,
            lr_end: 0.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_widths == 0 {
            return bad("n_widths must be at least 1".into());
        }
        if self.rule == SamplingRule::Sandwich && self.n_widths < 2 {
            return bad(format!("the sandwich rule needs n_widths >= 2, got {}", self.n_widths));
        }
        if self.distill && !self.rule.includes_largest() {
            return bad(format!(
                "distillation needs a rule that samples the largest width; `{}` does not",
                self.rule
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if ![self.lr_start, self.lr_end, self.momentum, self.weight_decay]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
        {
            return bad("learning rates, momentum and weight decay must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Log line recording the plan a checkpoint was trained with.
pub fn plan_record(plan: &TrainPlan) -> String {
    serde_json::json!({ "train_plan": plan }).to_string()
}

/// Recovers the plan written by [`plan_record`] from a log tail.
pub fn plan_from_log(lines: &[String]) -> Option<TrainPlan> {
    lines.iter().find_map(|l| {
        let v: serde_json::Value = serde_json::from_str(l).ok()?;
        serde_json::from_value(v.get("train_plan")?.clone()).ok()
    })
}

/// `lr_start + (lr_end - lr_start) * t / total`.
pub fn linear_lr(lr_start: f64, lr_end: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return lr_start;
    }
    lr_start + (lr_end - lr_start) * t as f64 / total as f64
}

/// What a training step needs from an optimizer.
pub trait Optimizer {
    fn zero_grad(&mut self, params: &[Tensor]);
    fn step(&mut self, params: &[Tensor], lr: f64) -> Result<()>;
}

/// SGD with momentum and weight decay.
#[derive(Debug, Clone, Default)]
pub struct SgdOptimizer {
    sgd: Sgd,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdOptimizer {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            sgd: Sgd::new(),
            momentum,
            weight_decay,
        }
    }

    pub fn for_plan(plan: &TrainPlan) -> Self {
        Self::new(plan.momentum, plan.weight_decay)
    }
}

impl Optimizer for SgdOptimizer {
    fn zero_grad(&mut self, params: &[Tensor]) {
        params.iter().for_each(Tensor::zero_grad);
    }

    fn step(&mut self, params: &[Tensor], lr: f64) -> Result<()> {
        Ok(self
            .sgd
            .step(params, lr as f32, self.momentum as f32, self.weight_decay as f32)?)
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut v = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        v[r * classes + l] = 1.0;
    }
    Tensor::new(&[labels.len(), classes], v).expect("one-hot shape")
}

/// Loss against integer labels; L1/L2 compare raw outputs with one-hot targets.
pub fn ground_truth_loss(logits: &Tensor, labels: &[usize], kind: LossKind) -> Result<Tensor> {
    Ok(match kind {
        LossKind::CrossEntropy => logits.cross_entropy(labels)?,
        LossKind::L1 => logits.l1_loss(&one_hot(labels, logits.shape()[1]))?,
        LossKind::L2 => logits.l2_loss(&one_hot(labels, logits.shape()[1]))?,
    })
}

/// Student loss against a detached teacher: soft cross entropy on
/// `softmax(teacher)`, or mean absolute / squared difference of raw outputs.
pub fn distill_loss(student: &Tensor, teacher: &Tensor, kind: LossKind) -> Result<Tensor> {
    if !teacher.is_detached() {
        return Err(Error::Config(
            "teacher output must be detached before distillation".into(),
        ));
    }
    Ok(match kind {
        LossKind::CrossEntropy => {
            let target = no_grad(|| teacher.softmax())?;
            student.soft_cross_entropy(&target)?
        }
        LossKind::L1 => student.l1_loss(teacher)?,
        LossKind::L2 => student.l2_loss(teacher)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub samples: Vec<WidthSample>,
    pub losses: Vec<f32>,
    /// Correct predictions per pass, against ground truth.
    pub correct: Vec<usize>,
}

/// One iteration of multi-width training on a single batch.
pub fn train_step<R: Rng + ?Sized, O: Optimizer>(
    net: &mut SlimmableNet,
    opt: &mut O,
    x: &Tensor,
    labels: &[usize],
    plan: &TrainPlan,
    lr: f64,
    rng: &mut R,
) -> Result<StepReport> {
    let samples = sample_widths(plan.rule, plan.n_widths, net.width_config().lower_bound, rng)?;
    let params = net.parameters();
    opt.zero_grad(&params);
    let mut teacher: Option<Tensor> = None;
    let mut report = StepReport {
        samples: Vec::with_capacity(samples.len()),
        losses: Vec::with_capacity(samples.len()),
        correct: Vec::with_capacity(samples.len()),
    };
    for sample in samples {
        let out = net.forward_sample(x, &sample, BnMode::Train)?;
        let loss = match &teacher {
            Some(t) if plan.distill => distill_loss(&out.logits, t, plan.loss_kind)?,
            _ => ground_truth_loss(&out.logits, labels, plan.loss_kind)?,
        };
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: format!("loss at width {:.4} ({})", sample.ratio(), sample.tag),
                epoch: 0,
                step: 0,
            });
        }
        loss.backward()?;
        if plan.distill && teacher.is_none() && sample.tag == WidthTag::Largest {
            teacher = Some(out.logits.detach());
        }
        let correct = predictions(&out.logits)
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        net.track(&out);
        report.samples.push(sample);
        report.losses.push(value);
        report.correct.push(correct);
    }
    opt.step(&params, lr)?;
    Ok(report)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub tag: WidthTag,
    pub loss: f64,
    pub accuracy: f64,
}

impl LogRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub steps: usize,
}

impl TrainLog {
    pub fn json_lines(&self) -> Vec<String> {
        self.records.iter().map(LogRecord::to_json).collect()
    }

    pub fn last(&self, tag: WidthTag) -> Option<&LogRecord> {
        self.records.iter().rev().find(|r| r.tag == tag)
    }
}

/// Runs `plan.epochs` passes over `data` with a linearly decaying learning rate.
///
/// Per epoch and width tag, the log holds the mean training loss and the
/// accuracy of the training-mode passes.
pub fn train<R: Rng + ?Sized, O: Optimizer>(
    net: &mut SlimmableNet,
    opt: &mut O,
    data: &Dataset,
    plan: &TrainPlan,
    rng: &mut R,
) -> Result<TrainLog> {
    plan.validate()?;
    if data.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let per_epoch = data.len().div_ceil(plan.batch_size);
    let total = plan.epochs * per_epoch;
    let mut log = TrainLog::default();
    let tags = [WidthTag::Largest, WidthTag::Smallest, WidthTag::Random];
    for epoch in 0..plan.epochs {
        // per tag: loss sum, passes, correct, seen
        let mut acc = [(0.0f64, 0usize, 0usize, 0usize); 3];
        for (i, idx) in data.shuffled_batches(plan.batch_size, rng).into_iter().enumerate() {
            let t = epoch * per_epoch + i;
            let (x, y) = data.batch(&idx);
            let lr = linear_lr(plan.lr_start, plan.lr_end, t, total);
            let report = train_step(net, opt, &x, &y, plan, lr, rng).map_err(|e| match e {
                Error::NonFinite { what, .. } => Error::NonFinite { what, epoch, step: t },
                e => e,
            })?;
            for ((s, l), c) in report.samples.iter().zip(&report.losses).zip(&report.correct) {
                let slot = &mut acc[tags.iter().position(|t| *t == s.tag).expect("known tag")];
                slot.0 += *l as f64;
                slot.1 += 1;
                slot.2 += c;
                slot.3 += y.len();
            }
            log.steps += 1;
        }
        for (tag, (loss, passes, correct, seen)) in tags.iter().zip(acc) {
            if passes > 0 {
                let rec = LogRecord {
                    epoch,
                    tag: *tag,
                    loss: loss / passes as f64,
                    accuracy: correct as f64 / seen as f64,
                };
                log::info!("{}", rec.to_json());
                log.records.push(rec);
            }
        }
    }
    Ok(log)
}

/// Fraction of correct predictions at resolved `widths`, without gradients.
pub fn accuracy_at(
    net: &SlimmableNet,
    data: &Dataset,
    widths: &[LayerWidth],
    mode: BnMode,
    batch: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk);
        let out = no_grad(|| net.forward(&x, widths, mode))?;
        correct += predictions(&out.logits).iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Eval-mode accuracy at a global width ratio; needs statistics for that width.
pub fn evaluate(net: &SlimmableNet, data: &Dataset, ratio: f64, batch: usize) -> Result<f64> {
    accuracy_at(net, data, &net.resolve_ratio(ratio)?, BnMode::Eval, batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchSpec;
    use crate::data::{synth_generate, SynthKind};
    use crate::width::WidthConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mlp(seed: u64) -> SlimmableNet {
        let arch = ArchSpec::builtin("mlp").unwrap();
        SlimmableNet::new(
            arch,
            WidthConfig::uniform(1.0, 0.25, 1),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    #[test]
    fn plan_validation() {
        assert!(TrainPlan::default().validate().is_ok());
        let p = TrainPlan {
            rule: SamplingRule::NRandom,
            ..TrainPlan::default()
        };
        assert!(p.validate().is_err());
        let p = TrainPlan {
            rule: SamplingRule::NRandom,
            distill: false,
            ..TrainPlan::default()
        };
        assert!(p.validate().is_ok());
        let p = TrainPlan {
            n_widths: 1,
            ..TrainPlan::default()
        };
        assert!(p.validate().is_err());
        let p = TrainPlan {
            rule: SamplingRule::MinPlusRandom,
            ..TrainPlan::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn linear_schedule_endpoints() {
        assert_eq!(linear_lr(0.1, 0.0, 0, 10), 0.1);
        assert_eq!(linear_lr(0.1, 0.0, 10, 10), 0.0);
        assert_eq!(linear_lr(0.5, 0.1, 5, 10), 0.5 + (0.1 - 0.5) * 0.5);
    }

    #[test]
    fn uniform_logits_distill_to_ln2() {
        let s = Tensor::parameter("s", &[3, 2], vec![0.0; 6]).unwrap();
        let t = Tensor::new(&[3, 2], vec![0.0; 6]).unwrap();
        let l = distill_loss(&s, &t, LossKind::CrossEntropy).unwrap();
        assert!((l.item() - std::f32::consts::LN_2).abs() < 1e-6);
        assert_eq!(distill_loss(&s, &t, LossKind::L2).unwrap().item(), 0.0);
        assert_eq!(distill_loss(&s, &t, LossKind::L1).unwrap().item(), 0.0);
    }

    #[test]
    fn undetached_teacher_is_rejected() {
        let p = Tensor::parameter("p", &[1, 2], vec![0.0, 1.0]).unwrap();
        let teacher = p.mul_scalar(2.0);
        assert!(distill_loss(&p, &teacher, LossKind::CrossEntropy).is_err());
        assert!(distill_loss(&p, &teacher.detach(), LossKind::CrossEntropy).is_ok());
    }

    #[test]
    fn teacher_branch_contributes_no_gradient() {
        let w_t = Tensor::parameter("wt", &[1, 2], vec![0.3, -0.2]).unwrap();
        let w_s = Tensor::parameter("ws", &[1, 2], vec![0.1, 0.5]).unwrap();
        let teacher = w_t.mul_scalar(3.0).detach();
        distill_loss(&w_s, &teacher, LossKind::CrossEntropy)
            .unwrap()
            .backward()
            .unwrap();
        assert!(w_t.grad().is_none());
        assert!(w_s.grad().is_some());
    }

    #[test]
    fn two_width_sandwich_runs_two_passes() {
        let mut net = mlp(1);
        let data = synth_generate(SynthKind::TwoGaussians, 16, 0).unwrap();
        let (x, y) = data.batch(&(0..16).collect::<Vec<_>>());
        let plan = TrainPlan {
            n_widths: 2,
            ..TrainPlan::default()
        };
        let mut opt = SgdOptimizer::for_plan(&plan);
        let r = train_step(
            &mut net,
            &mut opt,
            &x,
            &y,
            &plan,
            0.1,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(net.forward_count(), 2);
        assert_eq!(r.samples[0].tag, WidthTag::Largest);
        assert_eq!(r.samples[1].tag, WidthTag::Smallest);
        assert_eq!(r.samples[1].ratio(), 0.25);
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let mut net = mlp(2);
        let before = net.parameter_values();
        let data = synth_generate(SynthKind::TwoGaussians, 8, 0).unwrap();
        let (x, y) = data.batch(&(0..8).collect::<Vec<_>>());
        let plan = TrainPlan::default();
        let mut opt = SgdOptimizer::for_plan(&plan);
        let r = train_step(
            &mut net,
            &mut opt,
            &x,
            &y,
            &plan,
            0.0,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(r.losses.iter().all(|l| l.is_finite()));
        assert_eq!(net.parameter_values(), before);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut net = mlp(3);
        let before = net.parameter_values();
        let data = synth_generate(SynthKind::TwoGaussians, 8, 0).unwrap();
        let plan = TrainPlan {
            epochs: 0,
            ..TrainPlan::default()
        };
        let log = train(
            &mut net,
            &mut SgdOptimizer::for_plan(&plan),
            &data,
            &plan,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(log.steps, 0);
        assert_eq!(net.parameter_values(), before);
    }

    #[test]
    fn plan_survives_the_log_tail() {
        let plan = TrainPlan {
            batch_size: 17,
            seed: 4,
            ..TrainPlan::default()
        };
        let lines = vec![
            LogRecord {
                epoch: 0,
                tag: WidthTag::Largest,
                loss: 1.0,
                accuracy: 0.5,
            }
            .to_json(),
            plan_record(&plan),
        ];
        assert_eq!(plan_from_log(&lines), Some(plan));
        assert_eq!(plan_from_log(&lines[..1]), None);
    }

    #[test]
    fn log_records_are_json_lines() {
        let rec = LogRecord {
            epoch: 3,
            tag: WidthTag::Smallest,
            loss: 0.5,
            accuracy: 0.75,
        };
        assert_eq!(
            rec.to_json(),
            r#"{"epoch":3,"tag":"smallest","loss":0.5,"accuracy":0.75}"#
        );
    }
}
