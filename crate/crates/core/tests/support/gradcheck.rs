//! Finite-difference gradient checking against a 64-bit reference forward.
//!
//! The reference forwards here are written from the op definitions, with no
//! code shared with `usnet::tensor`. Loss for a check is `sum(r * op(inputs))`
//! with a fixed random projection `r`.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usnet::tensor::{forward_op, OpAttrs, OpKind, Target, Tensor};

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;

pub struct Case {
    pub kind: OpKind,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f32>>,
    pub differentiable: Vec<bool>,
    pub attrs: OpAttrs,
}

pub struct CheckResult {
    pub kind: OpKind,
    pub shapes: Vec<Vec<usize>>,
    pub worst_rel_err: f64,
}

fn numel(s: &[usize]) -> usize {
    s.iter().product()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero so kinks (relu, |x|) are not straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1f32..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

pub fn random_case(kind: OpKind, rng: &mut ChaCha8Rng) -> Case {
    let mut attrs = OpAttrs::default();
    let d = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (shapes, values, differentiable): (Vec<Vec<usize>>, Vec<Vec<f32>>, Vec<bool>) = match kind {
        OpKind::MatMul => {
            let (m, k, n) = (d(rng, 1, 4), d(rng, 1, 5), d(rng, 1, 4));
            let a = uniform(rng, m * k, -1.0, 1.0);
            let b = uniform(rng, k * n, -1.0, 1.0);
            (vec![vec![m, k], vec![k, n]], vec![a, b], vec![true, true])
        }
        OpKind::Transpose => {
            let s = vec![d(rng, 1, 5), d(rng, 1, 5)];
            let v = uniform(rng, numel(&s), -1.0, 1.0);
            (vec![s], vec![v], vec![true])
        }
        OpKind::Conv2d | OpKind::DepthwiseConv2d => {
            let (b, cin, h, w) = (d(rng, 1, 2), d(rng, 1, 3), d(rng, 3, 6), d(rng, 3, 6));
            let k = [1, 3][rng.gen_range(0..2)];
            attrs.stride = d(rng, 1, 2);
            attrs.padding = if rng.gen_bool(0.5) { None } else { Some(d(rng, 0, 1)) };
            let wshape = if kind == OpKind::Conv2d {
                vec![d(rng, 1, 3), cin, k, k]
            } else {
                vec![cin, 1, k, k]
            };
            let xs = vec![b, cin, h, w];
            let xv = uniform(rng, numel(&xs), -1.0, 1.0);
            let wv = uniform(rng, numel(&wshape), -1.0, 1.0);
            (vec![xs, wshape], vec![xv, wv], vec![true, true])
        }
        OpKind::Add | OpKind::Mul => {
            let s: Vec<usize> = (0..d(rng, 1, 3)).map(|_| d(rng, 1, 4)).collect();
            let a = uniform(rng, numel(&s), -1.0, 1.0);
            let b = uniform(rng, numel(&s), -1.0, 1.0);
            (vec![s.clone(), s], vec![a, b], vec![true, true])
        }
        OpKind::BiasAdd => {
            let mut s = vec![d(rng, 1, 3), d(rng, 1, 4)];
            if rng.gen_bool(0.5) {
                s.extend([d(rng, 1, 3), d(rng, 1, 3)]);
            }
            let a = uniform(rng, numel(&s), -1.0, 1.0);
            let b = uniform(rng, s[1], -1.0, 1.0);
            let c = s[1];
            (vec![s, vec![c]], vec![a, b], vec![true, true])
        }
        OpKind::MulScalar | OpKind::Sum => {
            attrs.scalar = rng.gen_range(-2.0..2.0);
            let s: Vec<usize> = (0..d(rng, 1, 3)).map(|_| d(rng, 1, 4)).collect();
            let v = uniform(rng, numel(&s), -1.0, 1.0);
            (vec![s], vec![v], vec![true])
        }
        OpKind::Relu => {
            let s: Vec<usize> = (0..d(rng, 1, 3)).map(|_| d(rng, 1, 4)).collect();
            let v = away_from_zero(rng, numel(&s));
            (vec![s], vec![v], vec![true])
        }
        OpKind::AvgPool => {
            attrs.kernel = d(rng, 1, 3);
            attrs.stride = d(rng, 1, 2);
            let s = vec![d(rng, 1, 2), d(rng, 1, 3), d(rng, 3, 5), d(rng, 3, 5)];
            let v = uniform(rng, numel(&s), -1.0, 1.0);
            (vec![s], vec![v], vec![true])
        }
        OpKind::Softmax | OpKind::LogSoftmax => {
            let s = vec![d(rng, 1, 4), d(rng, 2, 5)];
            let v = uniform(rng, numel(&s), -2.0, 2.0);
            (vec![s], vec![v], vec![true])
        }
        OpKind::CrossEntropy => {
            let (rows, cols) = (d(rng, 1, 4), d(rng, 2, 5));
            let v = uniform(rng, rows * cols, -2.0, 2.0);
            attrs.target = Some(if rng.gen_bool(0.5) {
                Target::Labels((0..rows).map(|_| rng.gen_range(0..cols)).collect())
            } else {
                let raw = uniform(rng, rows * cols, 0.1, 1.0);
                let mut probs = Vec::with_capacity(raw.len());
                for row in raw.chunks(cols) {
                    let z: f32 = row.iter().sum();
                    probs.extend(row.iter().map(|p| p / z));
                }
                Target::Tensor(Tensor::new(&[rows, cols], probs).unwrap())
            });
            (vec![vec![rows, cols]], vec![v], vec![true])
        }
        OpKind::L1Loss | OpKind::L2Loss => {
            let s: Vec<usize> = (0..d(rng, 1, 3)).map(|_| d(rng, 1, 4)).collect();
            let target = uniform(rng, numel(&s), -1.0, 1.0);
            let offset = away_from_zero(rng, numel(&s));
            let v: Vec<f32> = target.iter().zip(&offset).map(|(t, o)| t + o).collect();
            attrs.target = Some(Target::Tensor(Tensor::new(&s, target).unwrap()));
            (vec![s], vec![v], vec![true])
        }
        OpKind::SliceChannels => {
            let s: Vec<usize> = (0..d(rng, 2, 4)).map(|_| d(rng, 1, 4)).collect();
            let nlens = d(rng, 1, s.len());
            attrs.lens = s[..nlens].iter().map(|&n| rng.gen_range(1..=n)).collect();
            let v = uniform(rng, numel(&s), -1.0, 1.0);
            (vec![s], vec![v], vec![true])
        }
        OpKind::Reshape => {
            let (a, b, c) = (d(rng, 1, 3), d(rng, 1, 3), d(rng, 1, 3));
            attrs.shape = vec![a * b, c];
            let v = uniform(rng, a * b * c, -1.0, 1.0);
            (vec![vec![a, b, c]], vec![v], vec![true])
        }
        OpKind::BatchNorm | OpKind::BnEval => {
            let mut s = vec![d(rng, 2, 4), d(rng, 1, 3)];
            if rng.gen_bool(0.5) {
                s.extend([d(rng, 1, 3), d(rng, 1, 3)]);
            }
            let c = s[1];
            let x = uniform(rng, numel(&s), -1.0, 1.0);
            let g = uniform(rng, c, 0.5, 1.5);
            let b = uniform(rng, c, -0.5, 0.5);
            attrs.eps = 1e-3;
            attrs.mean = uniform(rng, c, -0.5, 0.5);
            attrs.var = uniform(rng, c, 0.2, 2.0);
            (vec![s, vec![c], vec![c]], vec![x, g, b], vec![true, true, true])
        }
    };
    Case {
        kind,
        shapes,
        values,
        differentiable,
        attrs,
    }
}

fn target_values(attrs: &OpAttrs) -> Vec<f64> {
    match attrs.target.as_ref().expect("loss op needs a target") {
        Target::Tensor(t) => t.to_vec().iter().map(|&v| v as f64).collect(),
        Target::Labels(_) => unreachable!(),
    }
}

fn conv64(x: &[f64], xs: &[usize], w: &[f64], ws: &[usize], stride: usize, pad: usize, depthwise: bool) -> Vec<f64> {
    let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    let channels: Vec<usize> = if depthwise { vec![co] } else { (0..cin).collect() };
                    for ci in channels {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                let xv = x[((bi * cin + ci) * h + iy as usize) * wd + ix as usize];
                                let wi = if depthwise { ci } else { co * cin + ci };
                                acc += xv * w[(wi * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn log_softmax64(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

/// Reference forward in 64-bit arithmetic.
pub fn forward64(kind: OpKind, shapes: &[Vec<usize>], xs: &[Vec<f64>], attrs: &OpAttrs) -> Vec<f64> {
    let x = &xs[0];
    let s = &shapes[0];
    match kind {
        OpKind::MatMul => {
            let (m, k, n) = (s[0], s[1], shapes[1][1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] = (0..k).map(|p| x[i * k + p] * xs[1][p * n + j]).sum();
                }
            }
            out
        }
        OpKind::Transpose => {
            let (r, c) = (s[0], s[1]);
            (0..r * c).map(|i| x[(i % r) * c + i / r]).collect()
        }
        OpKind::Conv2d | OpKind::DepthwiseConv2d => {
            let k = shapes[1][2];
            let pad = attrs.padding.unwrap_or(if k % 2 == 1 { k / 2 } else { 0 });
            conv64(
                x,
                s,
                &xs[1],
                &shapes[1],
                attrs.stride,
                pad,
                kind == OpKind::DepthwiseConv2d,
            )
        }
        OpKind::Add => x.iter().zip(&xs[1]).map(|(a, b)| a + b).collect(),
        OpKind::Mul => x.iter().zip(&xs[1]).map(|(a, b)| a * b).collect(),
        OpKind::BiasAdd => {
            let inner: usize = s[2..].iter().product();
            x.iter()
                .enumerate()
                .map(|(i, v)| v + xs[1][(i / inner) % s[1]])
                .collect()
        }
        OpKind::MulScalar => x.iter().map(|v| v * attrs.scalar as f64).collect(),
        OpKind::Sum => vec![x.iter().sum()],
        OpKind::Relu => x.iter().map(|v| v.max(0.0)).collect(),
        OpKind::AvgPool => {
            let k = attrs.kernel;
            let ones = vec![1.0 / (k * k) as f64; s[1] * k * k];
            conv64(x, s, &ones, &[s[1], 1, k, k], attrs.stride, 0, true)
        }
        OpKind::LogSoftmax => log_softmax64(x, s[1]),
        OpKind::Softmax => log_softmax64(x, s[1]).iter().map(|v| v.exp()).collect(),
        OpKind::CrossEntropy => {
            let (rows, cols) = (s[0], s[1]);
            let lp = log_softmax64(x, cols);
            let total: f64 = match attrs.target.as_ref().unwrap() {
                Target::Labels(l) => l.iter().enumerate().map(|(r, &c)| lp[r * cols + c]).sum(),
                Target::Tensor(t) => t.to_vec().iter().zip(&lp).map(|(p, l)| *p as f64 * l).sum(),
            };
            vec![-total / rows as f64]
        }
        OpKind::L1Loss => {
            let t = target_values(attrs);
            vec![x.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>() / t.len() as f64]
        }
        OpKind::L2Loss => {
            let t = target_values(attrs);
            vec![x.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / t.len() as f64]
        }
        OpKind::SliceChannels => {
            let mut dst = s.clone();
            dst[..attrs.lens.len()].copy_from_slice(&attrs.lens);
            let mut out = Vec::new();
            let total: usize = s.iter().product();
            for flat in 0..total {
                // decode the multi-index; keep entries inside the prefix box
                let mut rem = flat;
                let mut keep = true;
                for d in (0..s.len()).rev() {
                    let i = rem % s[d];
                    rem /= s[d];
                    if i >= dst[d] {
                        keep = false;
                    }
                }
                if keep {
                    out.push(x[flat]);
                }
            }
            out
        }
        OpKind::Reshape => x.clone(),
        OpKind::BatchNorm | OpKind::BnEval => {
            let (b, c) = (s[0], s[1]);
            let inner: usize = s[2..].iter().product();
            let n = (b * inner) as f64;
            let eps = attrs.eps as f64;
            let (mean, var): (Vec<f64>, Vec<f64>) = if kind == OpKind::BatchNorm {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (i, v) in x.iter().enumerate() {
                    mean[(i / inner) % c] += v / n;
                }
                for (i, v) in x.iter().enumerate() {
                    let ch = (i / inner) % c;
                    var[ch] += (v - mean[ch]).powi(2) / n;
                }
                (mean, var)
            } else {
                (
                    attrs.mean.iter().map(|&v| v as f64).collect(),
                    attrs.var.iter().map(|&v| v as f64).collect(),
                )
            };
            x.iter()
                .enumerate()
                .map(|(i, v)| {
                    let ch = (i / inner) % c;
                    xs[1][ch] * (v - mean[ch]) / (var[ch] + eps).sqrt() + xs[2][ch]
                })
                .collect()
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative error `||a - b|| / max(||a||, ||b||)`; zero when both are negligible.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-6 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn check_case(case: &Case, rng: &mut ChaCha8Rng) -> CheckResult {
    let inputs: Vec<Tensor> = case
        .shapes
        .iter()
        .zip(&case.values)
        .zip(&case.differentiable)
        .enumerate()
        .map(|(i, ((s, v), &diff))| {
            if diff {
                Tensor::parameter(format!("in{i}"), s, v.clone()).unwrap()
            } else {
                Tensor::new(s, v.clone()).unwrap()
            }
        })
        .collect();
    let out = forward_op(case.kind, &inputs, &case.attrs).unwrap();
    let proj: Vec<f32> = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let proj_t = Tensor::new(out.shape(), proj.clone()).unwrap();
    out.mul(&proj_t).unwrap().sum().backward().unwrap();

    let xs64: Vec<Vec<f64>> = case
        .values
        .iter()
        .map(|v| v.iter().map(|&x| x as f64).collect())
        .collect();
    let loss64 = |xs: &[Vec<f64>]| -> f64 {
        forward64(case.kind, &case.shapes, xs, &case.attrs)
            .iter()
            .zip(&proj)
            .map(|(y, r)| y * *r as f64)
            .sum()
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        if !case.differentiable[i] {
            continue;
        }
        let analytic: Vec<f64> = input
            .grad()
            .unwrap_or_else(|| vec![0.0; input.numel()])
            .iter()
            .map(|&g| g as f64)
            .collect();
        let mut fd = vec![0.0; analytic.len()];
        for j in 0..fd.len() {
            let mut plus = xs64.clone();
            plus[i][j] += FD_STEP;
            let mut minus = xs64.clone();
            minus[i][j] -= FD_STEP;
            fd[j] = (loss64(&plus) - loss64(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &fd));
    }
    CheckResult {
        kind: case.kind,
        shapes: case.shapes.clone(),
        worst_rel_err: worst,
    }
}

/// Runs `per_kind` random cases for every op kind; returns one result per case.
pub fn run_suite(seed: u64, per_kind: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for kind in OpKind::ALL {
        let mut seen = std::collections::BTreeSet::new();
        let mut attempts = 0;
        while seen.len() < per_kind && attempts < 100 * per_kind {
            attempts += 1;
            let case = random_case(kind, &mut rng);
            // distinct shapes only
            if seen.insert(case.shapes.clone()) {
                results.push(check_case(&case, &mut rng));
            }
        }
    }
    results
}
