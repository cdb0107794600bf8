use std::str::FromStr;

use super::{numel, Result, Tensor, TensorError};

/// Every differentiable operation the graph understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Transpose,
    Conv2d,
    DepthwiseConv2d,
    Add,
    BiasAdd,
    Mul,
    MulScalar,
    Relu,
    AvgPool,
    Softmax,
    LogSoftmax,
    CrossEntropy,
    L1Loss,
    L2Loss,
    SliceChannels,
    Reshape,
    Sum,
    BatchNorm,
    BnEval,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Conv2d,
        OpKind::DepthwiseConv2d,
        OpKind::Add,
        OpKind::BiasAdd,
        OpKind::Mul,
        OpKind::MulScalar,
        OpKind::Relu,
        OpKind::AvgPool,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::CrossEntropy,
        OpKind::L1Loss,
        OpKind::L2Loss,
        OpKind::SliceChannels,
        OpKind::Reshape,
        OpKind::Sum,
        OpKind::BatchNorm,
        OpKind::BnEval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Conv2d => "conv2d",
            OpKind::DepthwiseConv2d => "depthwise_conv2d",
            OpKind::Add => "add",
            OpKind::BiasAdd => "bias_add",
            OpKind::Mul => "mul",
            OpKind::MulScalar => "mul_scalar",
            OpKind::Relu => "relu",
            OpKind::AvgPool => "avgpool",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::L1Loss => "l1_loss",
            OpKind::L2Loss => "l2_loss",
            OpKind::SliceChannels => "slice_channels",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::BatchNorm => "batch_norm",
            OpKind::BnEval => "bn_eval",
        }
    }

    fn arity(self) -> usize {
        match self {
            OpKind::MatMul | OpKind::Conv2d | OpKind::DepthwiseConv2d => 2,
            OpKind::Add | OpKind::BiasAdd | OpKind::Mul => 2,
            OpKind::BatchNorm | OpKind::BnEval => 3,
            _ => 1,
        }
    }
}

impl FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TensorError::UnknownOp(s.to_string()))
    }
}

/// Loss targets. Tensor targets must not require grad.
#[derive(Debug, Clone)]
pub enum Target {
    Labels(Vec<usize>),
    Tensor(Tensor),
}

/// Op-specific attributes for [`forward_op`]. Unused fields are ignored.
#[derive(Debug, Clone)]
pub struct OpAttrs {
    pub stride: usize,
    /// `None` means "same" padding (`kernel / 2`) for odd kernels, 0 otherwise.
    pub padding: Option<usize>,
    pub kernel: usize,
    pub scalar: f32,
    pub lens: Vec<usize>,
    pub shape: Vec<usize>,
    pub target: Option<Target>,
    pub eps: f32,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl Default for OpAttrs {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: None,
            kernel: 2,
            scalar: 1.0,
            lens: Vec::new(),
            shape: Vec::new(),
            target: None,
            eps: 1e-5,
            mean: Vec::new(),
            var: Vec::new(),
        }
    }
}

/// Per-channel batch mean and biased variance observed by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Dispatch by kind. The typed methods on [`Tensor`] are the usual entry point.
pub fn forward_op(kind: OpKind, inputs: &[Tensor], attrs: &OpAttrs) -> Result<Tensor> {
    if inputs.len() != kind.arity() {
        return Err(TensorError::Arity {
            op: kind.name(),
            expected: kind.arity(),
            got: inputs.len(),
        });
    }
    let x = &inputs[0];
    let need_target = |op: &'static str| {
        attrs.target.clone().ok_or(TensorError::InvalidAttr {
            op,
            msg: "missing target".into(),
        })
    };
    match kind {
        OpKind::MatMul => x.matmul(&inputs[1]),
        OpKind::Transpose => x.transpose(),
        OpKind::Conv2d => x.conv2d(&inputs[1], attrs.stride, attrs.padding),
        OpKind::DepthwiseConv2d => x.depthwise_conv2d(&inputs[1], attrs.stride, attrs.padding),
        OpKind::Add => x.add(&inputs[1]),
        OpKind::BiasAdd => x.bias_add(&inputs[1]),
        OpKind::Mul => x.mul(&inputs[1]),
        OpKind::MulScalar => Ok(x.mul_scalar(attrs.scalar)),
        OpKind::Relu => Ok(x.relu()),
        OpKind::AvgPool => x.avgpool(attrs.kernel, attrs.stride),
        OpKind::Softmax => x.softmax(),
        OpKind::LogSoftmax => x.log_softmax(),
        OpKind::CrossEntropy => match need_target("cross_entropy")? {
            Target::Labels(l) => x.cross_entropy(&l),
            Target::Tensor(t) => x.soft_cross_entropy(&t),
        },
        OpKind::L1Loss => match need_target("l1_loss")? {
            Target::Tensor(t) => x.l1_loss(&t),
            Target::Labels(_) => Err(TensorError::InvalidAttr {
                op: "l1_loss",
                msg: "needs a tensor target".into(),
            }),
        },
        OpKind::L2Loss => match need_target("l2_loss")? {
            Target::Tensor(t) => x.l2_loss(&t),
            Target::Labels(_) => Err(TensorError::InvalidAttr {
                op: "l2_loss",
                msg: "needs a tensor target".into(),
            }),
        },
        OpKind::SliceChannels => x.slice_channels(&attrs.lens),
        OpKind::Reshape => x.reshape(&attrs.shape),
        OpKind::Sum => Ok(x.sum()),
        OpKind::BatchNorm => Ok(x.batch_norm(&inputs[1], &inputs[2], attrs.eps)?.0),
        OpKind::BnEval => x.bn_eval(&inputs[1], &inputs[2], &attrs.mean, &attrs.var, attrs.eps),
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

pub(crate) enum Op {
    MatMul {
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        rows: usize,
        cols: usize,
    },
    Conv2d(ConvGeom),
    Depthwise(ConvGeom),
    Add,
    BiasAdd {
        channels: usize,
        inner: usize,
    },
    Mul,
    MulScalar(f32),
    Relu,
    AvgPool(ConvGeom),
    Softmax {
        cols: usize,
    },
    LogSoftmax {
        cols: usize,
    },
    CrossEntropy {
        probs: Vec<f32>,
        target: Vec<f32>,
        rows: usize,
        cols: usize,
    },
    L1 {
        target: Vec<f32>,
    },
    L2 {
        target: Vec<f32>,
    },
    Slice {
        src: Vec<usize>,
        dst: Vec<usize>,
    },
    Reshape,
    Sum,
    BatchNorm {
        xhat: Vec<f32>,
        invstd: Vec<f32>,
        channels: usize,
        inner: usize,
    },
    BnEval {
        invstd: Vec<f32>,
        centered: Vec<f32>,
        channels: usize,
        inner: usize,
    },
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidAttr { op, msg: msg.into() }
}

fn check_target(op: &'static str, pred: &Tensor, target: &Tensor) -> Result<Vec<f32>> {
    if target.requires_grad() || target.has_graph() {
        return Err(TensorError::TargetRequiresGrad { op });
    }
    if pred.shape() != target.shape() {
        return Err(mismatch(op, pred.shape(), target.shape()));
    }
    Ok(target.to_vec())
}

fn conv_geom(
    op: &'static str,
    x: &[usize],
    w: &[usize],
    stride: usize,
    padding: Option<usize>,
    depthwise: bool,
) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 {
        return Err(mismatch(op, x, w));
    }
    let (batch, cin, h, wd) = (x[0], x[1], x[2], x[3]);
    let (cout, wcin, kh, kw) = (w[0], w[1], w[2], w[3]);
    if depthwise {
        if wcin != 1 || cout != cin {
            return Err(mismatch(op, x, w));
        }
    } else if wcin != cin {
        return Err(mismatch(op, x, w));
    }
    if stride == 0 {
        return Err(invalid(op, "stride must be >= 1"));
    }
    let pad = padding.unwrap_or(if kh % 2 == 1 { kh / 2 } else { 0 });
    if kh > h + 2 * pad || kw > wd + 2 * pad {
        return Err(invalid(op, format!("kernel {kh}x{kw} exceeds padded input {h}x{wd}")));
    }
    Ok(ConvGeom {
        batch,
        cin,
        cout,
        h,
        w: wd,
        kh,
        kw,
        stride,
        pad,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (wd + 2 * pad - kw) / stride + 1,
    })
}

fn row_softmax(x: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            z += *oi;
        }
        o.iter_mut().for_each(|v| *v /= z);
    }
    out
}

fn row_log_softmax(x: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = xi - lse;
        }
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps each flat index of the prefix-sliced shape `dst` to its flat index in `src`.
fn slice_index_map(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let src_strides = strides(src);
    let n = numel(dst);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; dst.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for d in (0..dst.len()).rev() {
            idx[d] += 1;
            if idx[d] < dst[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    // (batch, channels, inner spatial size)
    (shape[0], shape[1], shape[2..].iter().product())
}

impl Tensor {
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(mismatch("matmul", a, b));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let (x, y) = (self.data(), rhs.data());
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = x[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, bv) in orow.iter_mut().zip(&y[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        drop((x, y));
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            Op::MatMul { m, k, n },
            vec![self.clone(), rhs.clone()],
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(invalid("transpose", format!("expects rank 2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let x = self.data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![cols, rows],
            out,
            Op::Transpose { rows, cols },
            vec![self.clone()],
        ))
    }

    pub fn conv2d(&self, weight: &Tensor, stride: usize, padding: Option<usize>) -> Result<Tensor> {
        let g = conv_geom("conv2d", self.shape(), weight.shape(), stride, padding, false)?;
        let (x, w) = (self.data(), weight.data());
        let mut out = vec![0.0f32; g.batch * g.cout * g.oh * g.ow];
        for b in 0..g.batch {
            for co in 0..g.cout {
                let obase = (b * g.cout + co) * g.oh * g.ow;
                for ci in 0..g.cin {
                    let xbase = (b * g.cin + ci) * g.h * g.w;
                    let wbase = (co * g.cin + ci) * g.kh * g.kw;
                    conv_plane_fwd(&g, &x[xbase..], &w[wbase..], &mut out[obase..]);
                }
            }
        }
        drop((x, w));
        Ok(Tensor::from_op(
            vec![g.batch, g.cout, g.oh, g.ow],
            out,
            Op::Conv2d(g),
            vec![self.clone(), weight.clone()],
        ))
    }

    pub fn depthwise_conv2d(&self, weight: &Tensor, stride: usize, padding: Option<usize>) -> Result<Tensor> {
        let g = conv_geom("depthwise_conv2d", self.shape(), weight.shape(), stride, padding, true)?;
        let (x, w) = (self.data(), weight.data());
        let mut out = vec![0.0f32; g.batch * g.cout * g.oh * g.ow];
        for b in 0..g.batch {
            for c in 0..g.cin {
                let obase = (b * g.cout + c) * g.oh * g.ow;
                let xbase = (b * g.cin + c) * g.h * g.w;
                conv_plane_fwd(&g, &x[xbase..], &w[c * g.kh * g.kw..], &mut out[obase..]);
            }
        }
        drop((x, w));
        Ok(Tensor::from_op(
            vec![g.batch, g.cout, g.oh, g.ow],
            out,
            Op::Depthwise(g),
            vec![self.clone(), weight.clone()],
        ))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(mismatch("add", self.shape(), rhs.shape()));
        }
        let out = self.data().iter().zip(rhs.data().iter()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Add,
            vec![self.clone(), rhs.clone()],
        ))
    }

    /// Adds a `[C]` vector along axis 1 of a `[B, C, ...]` tensor.
    pub fn bias_add(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 || bias.shape() != [s[1]] {
            return Err(mismatch("bias_add", s, bias.shape()));
        }
        let (_, channels, inner) = channel_layout(s);
        let b = bias.data();
        let mut out = self.to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += b[(i / inner) % channels];
        }
        drop(b);
        Ok(Tensor::from_op(
            s.to_vec(),
            out,
            Op::BiasAdd { channels, inner },
            vec![self.clone(), bias.clone()],
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(mismatch("mul", self.shape(), rhs.shape()));
        }
        let out = self.data().iter().zip(rhs.data().iter()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Mul,
            vec![self.clone(), rhs.clone()],
        ))
    }

    pub fn mul_scalar(&self, s: f32) -> Tensor {
        let out = self.data().iter().map(|v| v * s).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::MulScalar(s), vec![self.clone()])
    }

    pub fn relu(&self) -> Tensor {
        let out = self.data().iter().map(|v| v.max(0.0)).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Relu, vec![self.clone()])
    }

    /// Average pooling without padding.
    pub fn avgpool(&self, kernel: usize, stride: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(invalid("avgpool", format!("expects rank 4, got {s:?}")));
        }
        let wshape = [s[1], 1, kernel, kernel];
        let g = conv_geom("avgpool", s, &wshape, stride, Some(0), true)?;
        let x = self.data();
        let scale = 1.0 / (kernel * kernel) as f32;
        let mut out = vec![0.0; g.batch * g.cout * g.oh * g.ow];
        let window = vec![scale; kernel * kernel];
        for plane in 0..g.batch * g.cin {
            conv_plane_fwd(&g, &x[plane * g.h * g.w..], &window, &mut out[plane * g.oh * g.ow..]);
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![g.batch, g.cout, g.oh, g.ow],
            out,
            Op::AvgPool(g),
            vec![self.clone()],
        ))
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(invalid(op, format!("expects [batch, classes], got {s:?}"))),
        }
    }

    /// Softmax over the class axis of `[batch, classes]`.
    pub fn softmax(&self) -> Result<Tensor> {
        let (_, cols) = self.rows_cols("softmax")?;
        let out = row_softmax(&self.data(), cols);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Softmax { cols },
            vec![self.clone()],
        ))
    }

    pub fn log_softmax(&self) -> Result<Tensor> {
        let (_, cols) = self.rows_cols("log_softmax")?;
        let out = row_log_softmax(&self.data(), cols);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::LogSoftmax { cols },
            vec![self.clone()],
        ))
    }

    /// Mean negative log-likelihood of integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols("cross_entropy")?;
        if labels.len() != rows {
            return Err(mismatch("cross_entropy", self.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(invalid(
                "cross_entropy",
                format!("label {bad} out of range for {cols} classes"),
            ));
        }
        let mut target = vec![0.0; rows * cols];
        for (r, &l) in labels.iter().enumerate() {
            target[r * cols + l] = 1.0;
        }
        self.cross_entropy_dense(target, rows, cols)
    }

    /// Mean cross entropy `H(target, softmax(self))` against a probability tensor.
    pub fn soft_cross_entropy(&self, target: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols("cross_entropy")?;
        let target = check_target("cross_entropy", self, target)?;
        self.cross_entropy_dense(target, rows, cols)
    }

    fn cross_entropy_dense(&self, target: Vec<f32>, rows: usize, cols: usize) -> Result<Tensor> {
        let x = self.data();
        let logp = row_log_softmax(&x, cols);
        let probs = row_softmax(&x, cols);
        drop(x);
        let loss = -logp.iter().zip(&target).map(|(l, t)| l * t).sum::<f32>() / rows as f32;
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                probs,
                target,
                rows,
                cols,
            },
            vec![self.clone()],
        ))
    }

    pub fn l1_loss(&self, target: &Tensor) -> Result<Tensor> {
        let target = check_target("l1_loss", self, target)?;
        let n = target.len() as f32;
        let loss = self.data().iter().zip(&target).map(|(a, b)| (a - b).abs()).sum::<f32>() / n;
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            Op::L1 { target },
            vec![self.clone()],
        ))
    }

    pub fn l2_loss(&self, target: &Tensor) -> Result<Tensor> {
        let target = check_target("l2_loss", self, target)?;
        let n = target.len() as f32;
        let loss = self
            .data()
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            / n;
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            Op::L2 { target },
            vec![self.clone()],
        ))
    }

    /// Keeps the first `lens[d]` entries along each leading axis `d`; trailing
    /// axes beyond `lens.len()` are kept whole.
    pub fn slice_channels(&self, lens: &[usize]) -> Result<Tensor> {
        let src = self.shape().to_vec();
        if lens.len() > src.len() || lens.iter().zip(&src).any(|(l, s)| *l == 0 || l > s) {
            return Err(mismatch("slice_channels", &src, lens));
        }
        let mut dst = src.clone();
        dst[..lens.len()].copy_from_slice(lens);
        if dst == src {
            // identity slice still records a node so the graph shape stays uniform
            let out = self.to_vec();
            return Ok(Tensor::from_op(
                dst.clone(),
                out,
                Op::Slice { src, dst },
                vec![self.clone()],
            ));
        }
        let map = slice_index_map(&src, &dst);
        let x = self.data();
        let out = map.iter().map(|&i| x[i]).collect();
        drop(x);
        Ok(Tensor::from_op(
            dst.clone(),
            out,
            Op::Slice { src, dst },
            vec![self.clone()],
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(mismatch("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            Op::Reshape,
            vec![self.clone()],
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![s], Op::Sum, vec![self.clone()])
    }

    /// Train-mode batch normalization over every axis except 1, with biased variance.
    pub fn batch_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<(Tensor, BatchStats)> {
        let s = self.shape();
        if s.len() < 2 || gamma.shape() != [s[1]] || beta.shape() != [s[1]] {
            return Err(mismatch("batch_norm", s, gamma.shape()));
        }
        let (batch, channels, inner) = channel_layout(s);
        let count = (batch * inner) as f32;
        let x = self.data();
        let mut mean = vec![0.0f32; channels];
        let mut var = vec![0.0f32; channels];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * inner;
                mean[c] += x[base..base + inner].iter().sum::<f32>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * inner;
                var[c] += x[base..base + inner].iter().map(|v| (v - mean[c]).powi(2)).sum::<f32>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let invstd: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        for (i, (xh, o)) in xhat.iter_mut().zip(out.iter_mut()).enumerate() {
            let c = (i / inner) % channels;
            *xh = (x[i] - mean[c]) * invstd[c];
            *o = g[c] * *xh + bt[c];
        }
        drop((x, g, bt));
        let y = Tensor::from_op(
            s.to_vec(),
            out,
            Op::BatchNorm {
                xhat,
                invstd,
                channels,
                inner,
            },
            vec![self.clone(), gamma.clone(), beta.clone()],
        );
        Ok((y, BatchStats { mean, var }))
    }

    /// Eval-mode normalization with supplied statistics.
    pub fn bn_eval(&self, gamma: &Tensor, beta: &Tensor, mean: &[f32], var: &[f32], eps: f32) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 || gamma.shape() != [s[1]] || beta.shape() != [s[1]] {
            return Err(mismatch("bn_eval", s, gamma.shape()));
        }
        let (_, channels, inner) = channel_layout(s);
        if mean.len() != channels || var.len() != channels {
            return Err(mismatch("bn_eval", s, &[mean.len()]));
        }
        let invstd: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (x, g, bt) = (self.data(), gamma.data(), beta.data());
        let mut centered = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        for (i, (ce, o)) in centered.iter_mut().zip(out.iter_mut()).enumerate() {
            let c = (i / inner) % channels;
            *ce = x[i] - mean[c];
            *o = g[c] * (*ce * invstd[c]) + bt[c];
        }
        drop((x, g, bt));
        Ok(Tensor::from_op(
            s.to_vec(),
            out,
            Op::BnEval {
                invstd,
                centered,
                channels,
                inner,
            },
            vec![self.clone(), gamma.clone(), beta.clone()],
        ))
    }
}

fn conv_plane_fwd(g: &ConvGeom, x: &[f32], w: &[f32], out: &mut [f32]) {
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let wv = w[ky * g.kw + kx];
            for oy in 0..g.oh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let xrow = &x[iy as usize * g.w..];
                let orow = &mut out[oy * g.ow..(oy + 1) * g.ow];
                for (ox, o) in orow.iter_mut().enumerate() {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix >= 0 && ix < g.w as isize {
                        *o += wv * xrow[ix as usize];
                    }
                }
            }
        }
    }
}

/// Accumulates input and weight gradients of one (input plane, kernel) pair.
fn conv_plane_bwd(g: &ConvGeom, x: &[f32], w: &[f32], gout: &[f32], dx: &mut [f32], dw: &mut [f32]) {
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let wv = w[ky * g.kw + kx];
            let mut acc = 0.0f32;
            for oy in 0..g.oh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let row = iy as usize * g.w;
                for ox in 0..g.ow {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix >= 0 && ix < g.w as isize {
                        let go = gout[oy * g.ow + ox];
                        acc += go * x[row + ix as usize];
                        dx[row + ix as usize] += go * wv;
                    }
                }
            }
            dw[ky * g.kw + kx] += acc;
        }
    }
}

/// Gradients for each input of `op`, given the output values and upstream gradient.
pub(crate) fn backward(op: &Op, inputs: &[Tensor], out: &[f32], gout: &[f32]) -> Vec<Option<Vec<f32>>> {
    let want = |i: usize| inputs[i].requires_grad();
    match op {
        Op::MatMul { m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let da = want(0).then(|| {
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        da[i * k + p] = (0..n).map(|j| gout[i * n + j] * b[p * n + j]).sum();
                    }
                }
                da
            });
            let db = want(1).then(|| {
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = a[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += av * gout[i * n + j];
                        }
                    }
                }
                db
            });
            vec![da, db]
        }
        Op::Transpose { rows, cols } => {
            let mut dx = vec![0.0; rows * cols];
            for r in 0..*rows {
                for c in 0..*cols {
                    dx[r * cols + c] = gout[c * rows + r];
                }
            }
            vec![Some(dx)]
        }
        Op::Conv2d(g) => {
            let (x, w) = (inputs[0].data(), inputs[1].data());
            let mut dx = vec![0.0; x.len()];
            let mut dw = vec![0.0; w.len()];
            let (hw, ohw, kk) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
            for b in 0..g.batch {
                for co in 0..g.cout {
                    let go = &gout[(b * g.cout + co) * ohw..];
                    for ci in 0..g.cin {
                        let xo = (b * g.cin + ci) * hw;
                        let wo = (co * g.cin + ci) * kk;
                        conv_plane_bwd(g, &x[xo..], &w[wo..], go, &mut dx[xo..xo + hw], &mut dw[wo..wo + kk]);
                    }
                }
            }
            vec![want(0).then_some(dx), want(1).then_some(dw)]
        }
        Op::Depthwise(g) => {
            let (x, w) = (inputs[0].data(), inputs[1].data());
            let mut dx = vec![0.0; x.len()];
            let mut dw = vec![0.0; w.len()];
            let (hw, ohw, kk) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
            for b in 0..g.batch {
                for c in 0..g.cin {
                    let xo = (b * g.cin + c) * hw;
                    let go = &gout[(b * g.cout + c) * ohw..];
                    conv_plane_bwd(
                        g,
                        &x[xo..],
                        &w[c * kk..],
                        go,
                        &mut dx[xo..xo + hw],
                        &mut dw[c * kk..(c + 1) * kk],
                    );
                }
            }
            vec![want(0).then_some(dx), want(1).then_some(dw)]
        }
        Op::AvgPool(g) => {
            let kk = g.kh * g.kw;
            let window = vec![1.0 / kk as f32; kk];
            let x = inputs[0].data();
            let mut dx = vec![0.0; x.len()];
            let mut scratch = vec![0.0; kk];
            let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
            for plane in 0..g.batch * g.cin {
                conv_plane_bwd(
                    g,
                    &x[plane * hw..],
                    &window,
                    &gout[plane * ohw..],
                    &mut dx[plane * hw..(plane + 1) * hw],
                    &mut scratch,
                );
            }
            vec![Some(dx)]
        }
        Op::Add => vec![Some(gout.to_vec()), Some(gout.to_vec())],
        Op::BiasAdd { channels, inner } => {
            let mut db = vec![0.0; *channels];
            for (i, g) in gout.iter().enumerate() {
                db[(i / inner) % channels] += g;
            }
            vec![Some(gout.to_vec()), Some(db)]
        }
        Op::Mul => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let da = gout.iter().zip(b.iter()).map(|(g, v)| g * v).collect();
            let db = gout.iter().zip(a.iter()).map(|(g, v)| g * v).collect();
            vec![Some(da), Some(db)]
        }
        Op::MulScalar(s) => vec![Some(gout.iter().map(|g| g * s).collect())],
        Op::Relu => vec![Some(
            gout.iter()
                .zip(out)
                .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                .collect(),
        )],
        Op::Softmax { cols } => {
            let mut dx = vec![0.0; out.len()];
            for ((y, g), d) in out.chunks(*cols).zip(gout.chunks(*cols)).zip(dx.chunks_mut(*cols)) {
                let dot: f32 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                for ((di, yi), gi) in d.iter_mut().zip(y).zip(g) {
                    *di = yi * (gi - dot);
                }
            }
            vec![Some(dx)]
        }
        Op::LogSoftmax { cols } => {
            let mut dx = vec![0.0; out.len()];
            for ((y, g), d) in out.chunks(*cols).zip(gout.chunks(*cols)).zip(dx.chunks_mut(*cols)) {
                let gsum: f32 = g.iter().sum();
                for ((di, yi), gi) in d.iter_mut().zip(y).zip(g) {
                    *di = gi - yi.exp() * gsum;
                }
            }
            vec![Some(dx)]
        }
        Op::CrossEntropy {
            probs,
            target,
            rows,
            cols,
        } => {
            let scale = gout[0] / *rows as f32;
            let mut dx = vec![0.0; probs.len()];
            for ((p, t), d) in probs.chunks(*cols).zip(target.chunks(*cols)).zip(dx.chunks_mut(*cols)) {
                let tsum: f32 = t.iter().sum();
                for ((di, pi), ti) in d.iter_mut().zip(p).zip(t) {
                    *di = scale * (pi * tsum - ti);
                }
            }
            vec![Some(dx)]
        }
        Op::L1 { target } => {
            let x = inputs[0].data();
            let scale = gout[0] / target.len() as f32;
            let dx = x
                .iter()
                .zip(target)
                .map(|(a, b)| {
                    let d = a - b;
                    if d > 0.0 {
                        scale
                    } else if d < 0.0 {
                        -scale
                    } else {
                        0.0
                    }
                })
                .collect();
            vec![Some(dx)]
        }
        Op::L2 { target } => {
            let x = inputs[0].data();
            let scale = 2.0 * gout[0] / target.len() as f32;
            vec![Some(x.iter().zip(target).map(|(a, b)| scale * (a - b)).collect())]
        }
        Op::Slice { src, dst } => {
            let mut dx = vec![0.0; numel(src)];
            if src == dst {
                dx.copy_from_slice(gout);
            } else {
                for (g, i) in gout.iter().zip(slice_index_map(src, dst)) {
                    dx[i] = *g;
                }
            }
            vec![Some(dx)]
        }
        Op::Reshape => vec![Some(gout.to_vec())],
        Op::Sum => vec![Some(vec![gout[0]; inputs[0].numel()])],
        Op::BatchNorm {
            xhat,
            invstd,
            channels,
            inner,
        } => {
            let gamma = inputs[1].data();
            let count = (xhat.len() / channels) as f32;
            let mut dgamma = vec![0.0f32; *channels];
            let mut dbeta = vec![0.0f32; *channels];
            for (i, (g, xh)) in gout.iter().zip(xhat).enumerate() {
                let c = (i / inner) % channels;
                dgamma[c] += g * xh;
                dbeta[c] += g;
            }
            let dx = want(0).then(|| {
                gout.iter()
                    .zip(xhat)
                    .enumerate()
                    .map(|(i, (g, xh))| {
                        let c = (i / inner) % channels;
                        gamma[c] * invstd[c] / count * (count * g - dbeta[c] - xh * dgamma[c])
                    })
                    .collect()
            });
            vec![dx, want(1).then_some(dgamma), want(2).then_some(dbeta)]
        }
        Op::BnEval {
            invstd,
            centered,
            channels,
            inner,
        } => {
            let gamma = inputs[1].data();
            let mut dgamma = vec![0.0f32; *channels];
            let mut dbeta = vec![0.0f32; *channels];
            let mut dx = vec![0.0f32; gout.len()];
            for (i, g) in gout.iter().enumerate() {
                let c = (i / inner) % channels;
                dgamma[c] += g * centered[i] * invstd[c];
                dbeta[c] += g;
                dx[i] = g * gamma[c] * invstd[c];
            }
            vec![
                want(0).then_some(dx),
                want(1).then_some(dgamma),
                want(2).then_some(dbeta),
            ]
        }
    }
}
