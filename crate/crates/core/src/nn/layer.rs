//! First-k channel slicing layers.

use rand::Rng;

use crate::arch::LayerKind;
use crate::tensor::{no_grad, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvAttrs {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Option<usize>,
}

impl Default for ConvAttrs {
    fn default() -> Self {
        Self {
            kernel: 1,
            stride: 1,
            padding: None,
        }
    }
}

/// A dense, conv or depthwise layer that runs on the leading `active_in`
/// input and `active_out` output channels of its base-sized weights.
#[derive(Debug)]
pub struct SlimmableLayer {
    pub name: String,
    pub kind: LayerKind,
    pub base_in: usize,
    pub base_out: usize,
    pub conv: ConvAttrs,
    /// `[out, in]` for dense, `[out, in, k, k]` for conv, `[c, 1, k, k]` for depthwise.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub output_averaging: bool,
    pub active_in: usize,
    pub active_out: usize,
}

impl SlimmableLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        kind: LayerKind,
        base_in: usize,
        base_out: usize,
        conv: ConvAttrs,
        bias: bool,
        output_averaging: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let k = conv.kernel;
        let (shape, fan_in) = match kind {
            LayerKind::Dense => (vec![base_out, base_in], base_in),
            LayerKind::Conv2d => (vec![base_out, base_in, k, k], base_in * k * k),
            LayerKind::DepthwiseConv2d => {
                if base_in != base_out {
                    return Err(Error::Config(format!(
                        "depthwise layer `{name}` must keep its channel count"
                    )));
                }
                if output_averaging {
                    return Err(Error::Config(format!(
                        "depthwise layer `{name}` cannot average its output: each output sees one input channel"
                    )));
                }
                (vec![base_out, 1, k, k], k * k)
            }
            LayerKind::GlobalAvgpool => {
                return Err(Error::Config(format!("`{name}`: pooling has no weights")));
            }
        };
        // fan-in scaled uniform (He) at base width; every width reuses these weights
        let bound = (6.0 / fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        let weight = Tensor::parameter(format!("{name}.weight"), &shape, data)?;
        let bias = if bias {
            Some(Tensor::parameter(
                format!("{name}.bias"),
                &[base_out],
                vec![0.0; base_out],
            )?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            kind,
            base_in,
            base_out,
            conv,
            weight,
            bias,
            output_averaging,
            active_in: base_in,
            active_out: base_out,
        })
    }

    pub fn set_active(&mut self, active_in: usize, active_out: usize) -> Result<()> {
        self.check_active(active_in, active_out)?;
        self.active_in = active_in;
        self.active_out = active_out;
        Ok(())
    }

    fn check_active(&self, active_in: usize, active_out: usize) -> Result<()> {
        let ok = (1..=self.base_in).contains(&active_in)
            && (1..=self.base_out).contains(&active_out)
            && (self.kind != LayerKind::DepthwiseConv2d || active_in == active_out);
        if ok {
            Ok(())
        } else {
            Err(Error::Width(format!(
                "layer `{}`: active {active_in}x{active_out} outside base {}x{}",
                self.name, self.base_in, self.base_out
            )))
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_at(x, self.active_in, self.active_out)
    }

    pub fn forward_at(&self, x: &Tensor, active_in: usize, active_out: usize) -> Result<Tensor> {
        self.check_active(active_in, active_out)?;
        let mut y = self.aggregate(x, active_in, active_out)?;
        if self.output_averaging {
            y = y.mul_scalar(1.0 / active_in as f32);
        }
        if let Some(b) = &self.bias {
            y = y.bias_add(&b.slice_channels(&[active_out])?)?;
        }
        Ok(y)
    }

    /// `y_o = sum_{i < active_in} w_{o,i} x_i` with no bias or averaging.
    fn aggregate(&self, x: &Tensor, active_in: usize, active_out: usize) -> Result<Tensor> {
        let got = x.shape().get(1).copied().unwrap_or(0);
        if got != active_in {
            return Err(Error::ChannelMismatch {
                layer: self.name.clone(),
                expected: active_in,
                got,
            });
        }
        Ok(match self.kind {
            LayerKind::Dense => {
                let batch = x.shape()[0];
                let x2 = if x.shape().len() == 2 {
                    x.clone()
                } else if x.numel() == batch * active_in {
                    x.reshape(&[batch, active_in])?
                } else {
                    return Err(Error::Config(format!(
                        "dense layer `{}` needs flat input, got {:?}",
                        self.name,
                        x.shape()
                    )));
                };
                let w = self.weight.slice_channels(&[active_out, active_in])?;
                x2.matmul(&w.transpose()?)?
            }
            LayerKind::Conv2d => {
                let w = self.weight.slice_channels(&[active_out, active_in])?;
                x.conv2d(&w, self.conv.stride, self.conv.padding)?
            }
            LayerKind::DepthwiseConv2d => {
                let w = self.weight.slice_channels(&[active_out])?;
                x.depthwise_conv2d(&w, self.conv.stride, self.conv.padding)?
            }
            LayerKind::GlobalAvgpool => unreachable!("rejected at construction"),
        })
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        let mut p = vec![self.weight.clone()];
        p.extend(self.bias.clone());
        p
    }
}

/// Residual errors `delta_k = |y^n - y^k|` of partial aggregations.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualProfile {
    pub k0: usize,
    /// `deltas[k - k0][o]`: mean over batch (and positions) for output neuron `o`.
    pub deltas: Vec<Vec<f64>>,
    /// `(k, o)` where `delta_{k+1} > delta_k`.
    pub violations: Vec<(usize, usize)>,
}

impl ResidualProfile {
    pub fn delta(&self, k: usize) -> &[f64] {
        &self.deltas[k - self.k0]
    }

    pub fn is_monotone(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Measures how the partial aggregation over the first `k` input channels
/// approaches the full one, for `k = k0..=base_in`. Monotonicity is reported,
/// not enforced.
pub fn residual_profile(layer: &SlimmableLayer, x: &Tensor, k0: usize) -> Result<ResidualProfile> {
    if layer.kind == LayerKind::DepthwiseConv2d {
        return Err(Error::Config(format!(
            "residual profile of `{}`: depthwise outputs aggregate a single channel",
            layer.name
        )));
    }
    let n = layer.base_in;
    if k0 == 0 || k0 > n {
        return Err(Error::Width(format!("k0 = {k0} outside [1, {n}]")));
    }
    let out = layer.base_out;
    no_grad(|| {
        let full = layer.aggregate(x, n, out)?.to_vec();
        let batch = x.shape()[0];
        let mut deltas = Vec::with_capacity(n - k0 + 1);
        for k in k0..=n {
            let mut lens = x.shape().to_vec();
            lens[1] = k;
            let xk = x.slice_channels(&lens[..2])?;
            let part = layer.aggregate(&xk, k, out)?.to_vec();
            let per_neuron = part.len() / (batch * out);
            let mut d = vec![0.0f64; out];
            for (i, (a, b)) in full.iter().zip(&part).enumerate() {
                d[(i / per_neuron) % out] += (*a as f64 - *b as f64).abs();
            }
            let denom = (batch * per_neuron) as f64;
            d.iter_mut().for_each(|v| *v /= denom);
            deltas.push(d);
        }
        let mut violations = Vec::new();
        for (i, pair) in deltas.windows(2).enumerate() {
            for o in 0..out {
                if pair[1][o] > pair[0][o] {
                    violations.push((k0 + i, o));
                }
            }
        }
        Ok(ResidualProfile { k0, deltas, violations })
    })
}
