//! Reverse-mode tape.
//!
//! Every operation appends a node holding its output value and the operand
//! handles its backward rule needs. Operands always precede their result, so
//! a single reverse sweep over the node list visits each node once in
//! topological order.

use std::fmt;
use std::str::FromStr;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output length `ceil(L / stride)`; zeros split left/right, extra on the right.
    Same,
    /// No padding; output length `floor((L - k) / stride) + 1`.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BnMode<'a> {
    /// Normalize with batch statistics (taken along axis 1).
    Train { eps: f64 },
    /// Normalize with stored running statistics.
    Eval {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

/// Batch statistics produced by a training-mode batchnorm, used to update
/// running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-feature variance.
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatVec,
    Add,
    Sub,
    Mul,
    Scale,
    BiasAdd,
    ScaleRows,
    Conv1d,
    MaxPool1d,
    BatchNorm1d,
    Relu,
    Tanh,
    Sigmoid,
    MaskedSoftmax,
    Concat,
    Gather,
    Reshape,
    Sum,
    Mean,
    Outer,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::MatVec,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::BiasAdd,
        OpKind::ScaleRows,
        OpKind::Conv1d,
        OpKind::MaxPool1d,
        OpKind::BatchNorm1d,
        OpKind::Relu,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::MaskedSoftmax,
        OpKind::Concat,
        OpKind::Gather,
        OpKind::Reshape,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Outer,
        OpKind::CrossEntropy,
    ];

    pub fn parse(name: &str) -> Option<Self> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::MatVec => "matvec",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::BiasAdd => "bias_add",
            OpKind::ScaleRows => "scale_rows",
            OpKind::Conv1d => "conv1d",
            OpKind::MaxPool1d => "maxpool1d",
            OpKind::BatchNorm1d => "batchnorm1d",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::MaskedSoftmax => "masked_softmax",
            OpKind::Concat => "concat",
            OpKind::Gather => "gather",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Outer => "outer",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown op kind `{s}`")))
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    BiasAdd(Var, Var),
    ScaleRows(Var, Var),
    Conv1d {
        x: Var,
        kernel: Var,
        stride: usize,
        pad_left: usize,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm1d {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    MaskedSoftmax(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Outer(Var, Var),
    CrossEntropy {
        p: Var,
        label: usize,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatVec(..) => OpKind::MatVec,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::BiasAdd(..) => OpKind::BiasAdd,
            Op::ScaleRows(..) => OpKind::ScaleRows,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::MaxPool1d { .. } => OpKind::MaxPool1d,
            Op::BatchNorm1d { .. } => OpKind::BatchNorm1d,
            Op::Relu(..) => OpKind::Relu,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::MaskedSoftmax(..) => OpKind::MaskedSoftmax,
            Op::Concat { .. } => OpKind::Concat,
            Op::Gather { .. } => OpKind::Gather,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Outer(..) => OpKind::Outer,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Probability floor applied before the logarithm in cross-entropy.
pub const CE_FLOOR: f64 = 1e-12;

/// Recorded computation for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<OpKind>,
}

fn conv_out_len(len: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(len);
            Some((out, total / 2))
        }
        Padding::Valid => {
            if k > len {
                None
            } else {
                Some(((len - k) / stride + 1, 0))
            }
        }
    }
}

/// Output length of [`Tape::conv1d`] for an input of length `len`.
pub fn conv1d_output_len(len: usize, k: usize, stride: usize, padding: Padding) -> Option<usize> {
    if k == 0 || stride == 0 || len == 0 {
        return None;
    }
    conv_out_len(len, k, stride, padding).map(|(n, _)| n)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Flips the sign of every backward contribution of `kind`. Only useful
    /// for checking that a gradient checker notices a broken rule.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` call with respect to `v`, if any
    /// flowed into it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Matrix-vector product `w [m x k] . x [k] -> [m]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (sw, sx) = (self.shape(w), self.shape(x));
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(Error::shape("matvec", format!("{sw:?} x {sx:?}")));
        }
        let (m, k) = (sw[0], sw[1]);
        let (wd, xd) = (self.value(w).data(), self.value(x).data());
        let out: Vec<f64> = (0..m)
            .map(|i| wd[i * k..(i + 1) * k].iter().zip(xd).map(|(a, b)| a * b).sum())
            .collect();
        let rg = self.rg(w) || self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![m], out), Op::MatVec(w, x), rg))
    }

    pub fn outer(&mut self, u: Var, v: Var) -> Result<Var> {
        let (su, sv) = (self.shape(u), self.shape(v));
        if su.len() != 1 || sv.len() != 1 {
            return Err(Error::shape("outer", format!("{su:?} x {sv:?}")));
        }
        let (ud, vd) = (self.value(u).data(), self.value(v).data());
        let out: Vec<f64> = ud.iter().flat_map(|a| vd.iter().map(move |b| a * b)).collect();
        let shape = vec![ud.len(), vd.len()];
        let rg = self.rg(u) || self.rg(v);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Outer(u, v), rg))
    }

    // ---------------------------------------------------------------- elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, c), rg)
    }

    /// Adds `bias[r]` to every entry of row `r` of a rank-2 tensor
    /// (or elementwise for a rank-1 `x` of matching length).
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let cols = match sx.len() {
            1 => 1,
            2 => sx[1],
            _ => 0,
        };
        if cols == 0 || sb.len() != 1 || sb[0] != sx[0] {
            return Err(Error::shape("bias_add", format!("{sx:?} + {sb:?}")));
        }
        let bd = self.value(bias).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i / cols])
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::from_parts(sx, out), Op::BiasAdd(x, bias), rg))
    }

    /// Multiplies row `r` of `x [rows x cols]` by `w[r]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 1 || sw[0] != sx[0] {
            return Err(Error::shape("scale_rows", format!("{sx:?} * {sw:?}")));
        }
        let cols = sx[1];
        let wd = self.value(w).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * wd[i / cols])
            .collect();
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::from_parts(sx, out), Op::ScaleRows(x, w), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    // ---------------------------------------------------------------- convolution & pooling

    /// Cross-correlation of `x [c_in x L]` with `kernel [c_out x c_in x k]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 2 || sk.len() != 3 || sk[1] != sx[0] {
            return Err(Error::shape("conv1d", format!("input {sx:?}, kernel {sk:?}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv1d", "stride must be >= 1"));
        }
        let (cin, len, cout, k) = (sx[0], sx[1], sk[0], sk[2]);
        let (lout, pad_left) = conv_out_len(len, k, stride, padding).ok_or_else(|| {
            Error::shape(
                "conv1d",
                format!("kernel size {k} exceeds input length {len} under VALID padding"),
            )
        })?;
        let (xd, kd) = (self.value(x).data(), self.value(kernel).data());
        let mut out = vec![0.0; cout * lout];
        for o in 0..cout {
            let orow = &mut out[o * lout..(o + 1) * lout];
            for c in 0..cin {
                let w = &kd[(o * cin + c) * k..(o * cin + c + 1) * k];
                let xrow = &xd[c * len..(c + 1) * len];
                for (t, ov) in orow.iter_mut().enumerate() {
                    let start = (t * stride) as isize - pad_left as isize;
                    let q_lo = (-start).max(0) as usize;
                    let q_hi = ((len as isize - start).min(k as isize)).max(0) as usize;
                    let mut acc = 0.0;
                    for q in q_lo..q_hi {
                        acc += w[q] * xrow[(start + q as isize) as usize];
                    }
                    *ov += acc;
                }
            }
        }
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            Tensor::from_parts(vec![cout, lout], out),
            Op::Conv1d {
                x,
                kernel,
                stride,
                pad_left,
            },
            rg,
        ))
    }

    /// Per-row windowed maximum of `x [c x L]`. Ties resolve to the lowest index.
    pub fn maxpool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::shape("maxpool1d", format!("expected [c, L], got {sx:?}")));
        }
        let (c, len) = (sx[0], sx[1]);
        if window == 0 || stride == 0 || window > len {
            return Err(Error::shape(
                "maxpool1d",
                format!("window {window} / stride {stride} invalid for length {len}"),
            ));
        }
        let lout = (len - window) / stride + 1;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(c * lout);
        let mut argmax = Vec::with_capacity(c * lout);
        for r in 0..c {
            for t in 0..lout {
                let base = r * len + t * stride;
                let mut best = base;
                for i in base + 1..base + window {
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![c, lout], out),
            Op::MaxPool1d { x, argmax },
            rg,
        ))
    }

    /// Batch normalization of `x [features x samples]` with statistics taken
    /// along axis 1 and per-feature `gamma`/`beta`.
    ///
    /// In training mode with a single sample the transform degrades to the
    /// identity (the input handle is returned unchanged) and a warning is logged.
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::shape("batchnorm1d", format!("expected [F, N], got {sx:?}")));
        }
        let (f, n) = (sx[0], sx[1]);
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(Error::shape(
                "batchnorm1d",
                format!(
                    "gamma {:?} / beta {:?} for {f} features",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xd = self.value(x).data();
        let (mut means, mut vars_biased, eps, batch_stats) = match mode {
            BnMode::Train { eps } => {
                if n < 2 {
                    log::warn!("batchnorm1d: training batch of size {n}; using identity");
                    return Ok((x, None));
                }
                let mut means = vec![0.0; f];
                let mut vars = vec![0.0; f];
                for r in 0..f {
                    let row = &xd[r * n..(r + 1) * n];
                    let m = row.iter().sum::<f64>() / n as f64;
                    means[r] = m;
                    vars[r] = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
                }
                (means, vars, eps, true)
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != f || var.len() != f {
                    return Err(Error::shape(
                        "batchnorm1d",
                        format!("running stats of length {}/{} for {f} features", mean.len(), var.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = vars_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; f * n];
        let mut out = vec![0.0; f * n];
        for r in 0..f {
            for i in 0..n {
                let h = (xd[r * n + i] - means[r]) * inv_std[r];
                xhat[r * n + i] = h;
                out[r * n + i] = gd[r] * h + bd[r];
            }
        }
        let stats = if batch_stats {
            let corr = n as f64 / (n as f64 - 1.0);
            Some(BatchStats {
                mean: std::mem::take(&mut means),
                var: vars_biased.iter_mut().map(|v| *v * corr).collect(),
            })
        } else {
            None
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::from_parts(sx, out),
            Op::BatchNorm1d {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, stats))
    }

    // ---------------------------------------------------------------- normalization

    /// Softmax over the unmasked entries of a rank-1 `s`; masked entries are
    /// exactly zero. With every entry masked, returns the zero vector if
    /// `allow_empty`, otherwise a domain error.
    pub fn masked_softmax(&mut self, s: Var, mask: Option<&[bool]>, allow_empty: bool) -> Result<Var> {
        let ss = self.shape(s).to_vec();
        if ss.len() != 1 {
            return Err(Error::shape("masked_softmax", format!("expected rank 1, got {ss:?}")));
        }
        let n = ss[0];
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::shape(
                    "masked_softmax",
                    format!("mask length {} for {n} energies", m.len()),
                ));
            }
        }
        let active = |i: usize| mask.is_none_or(|m| m[i]);
        let sd = self.value(s).data();
        if (0..n).any(|i| active(i) && !sd[i].is_finite()) {
            return Err(Error::NonFinite("masked_softmax input".into()));
        }
        let mut out = vec![0.0; n];
        let max = (0..n)
            .filter(|&i| active(i))
            .map(|i| sd[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            if !allow_empty {
                return Err(Error::domain("masked_softmax", "every entry is masked"));
            }
        } else {
            let mut total = 0.0;
            for i in (0..n).filter(|&i| active(i)) {
                let e = (sd[i] - max).exp();
                out[i] = e;
                total += e;
            }
            for v in &mut out {
                *v /= total;
            }
        }
        let rg = self.rg(s);
        Ok(self.push(Tensor::from_parts(ss, out), Op::MaskedSoftmax(s), rg))
    }

    pub fn softmax(&mut self, s: Var) -> Result<Var> {
        self.masked_softmax(s, None, false)
    }

    /// `-ln(max(p[label], 1e-12))` for a probability vector `p`.
    pub fn cross_entropy(&mut self, p: Var, label: usize) -> Result<Var> {
        let sp = self.shape(p).to_vec();
        if sp.len() != 1 {
            return Err(Error::shape("cross_entropy", format!("expected rank 1, got {sp:?}")));
        }
        if label >= sp[0] {
            return Err(Error::Index {
                what: "class label",
                index: label,
                size: sp[0],
            });
        }
        let pd = self.value(p).data();
        let total: f64 = pd.iter().sum();
        if pd.iter().any(|&v| v < 0.0) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::domain(
                "cross_entropy",
                format!("not a probability vector (sum {total})"),
            ));
        }
        let loss = -pd[label].max(CE_FLOOR).ln();
        let rg = self.rg(p);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { p, label }, rg))
    }

    // ---------------------------------------------------------------- structure

    /// Concatenates rank-1 tensors (axis 0) or rank-2 tensors along axis 0 or 1.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        let rank = s0.len();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} for shape {s0:?}")));
        }
        for p in parts {
            let sp = self.shape(*p);
            let ok = sp.len() == rank && (0..rank).all(|d| d == axis || sp[d] == s0[d]);
            if !ok {
                return Err(Error::shape("concat", format!("{s0:?} with {sp:?} on axis {axis}")));
            }
        }
        let total: usize = parts.iter().map(|p| self.shape(*p)[axis]).sum();
        let (shape, data) = if rank == 1 || axis == 0 {
            let mut data = Vec::new();
            for p in parts {
                data.extend_from_slice(self.value(*p).data());
            }
            let mut shape = s0.clone();
            shape[0] = total;
            (shape, data)
        } else {
            let rows = s0[0];
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(self.value(*p).row(r));
                }
            }
            (vec![rows, total], data)
        };
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Picks flat entries of `x` into a new tensor of `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                what: "gather source",
                index: bad,
                size: n,
            });
        }
        if shape.iter().product::<usize>() != index.len() || shape.contains(&0) {
            return Err(Error::shape(
                "gather",
                format!("{} indices into shape {shape:?}", index.len()),
            ));
        }
        let xd = self.value(x).data();
        let out: Vec<f64> = index.iter().map(|&i| xd[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Gather { x, index }, rg))
    }

    /// Half-open slice `[start, end)` along `axis` of a rank-1 or rank-2 tensor.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || sx.len() > 2 || start >= end || end > sx[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {end}) on axis {axis} of {sx:?}"),
            ));
        }
        let (index, shape) = match (sx.len(), axis) {
            (1, _) => ((start..end).collect(), vec![end - start]),
            (_, 0) => ((start * sx[1]..end * sx[1]).collect(), vec![end - start, sx[1]]),
            _ => {
                let cols = sx[1];
                let idx = (0..sx[0])
                    .flat_map(|r| (start..end).map(move |c| r * cols + c))
                    .collect();
                (idx, vec![sx[0], end - start])
            }
        };
        self.gather(x, index, &shape)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    // ---------------------------------------------------------------- backward

    /// Back-propagates from a one-element `loss`, replacing any gradients
    /// from a previous call. Gradients accumulate additively across
    /// multiple uses of a node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        lv.check_finite("loss")?;
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.fault == Some(self.nodes[i].op.kind()) {
                let flipped: Vec<f64> = g.iter().map(|v| -v).collect();
                self.propagate(i, &flipped);
            } else {
                self.propagate(i, &g);
            }
            // operands always precede node i, so its own slot is untouched
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient buffer of operand `v`, or `None` if it takes no gradient.
    fn buf(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn acc(&mut self, v: Var, contrib: impl IntoIterator<Item = f64>) {
        if let Some(b) = self.buf(v) {
            for (dst, c) in b.iter_mut().zip(contrib) {
                *dst += c;
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // The op is moved out temporarily so operand buffers can be borrowed.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let bd = self.value(*b).data().to_vec();
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            da[r * k + p] = grow.iter().zip(&bd[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.acc(*a, da);
                }
                if self.rg(*b) {
                    let ad = self.value(*a).data().to_vec();
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ad[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    self.acc(*b, db);
                }
            }
            Op::MatVec(w, x) => {
                let sw = self.shape(*w).to_vec();
                let (m, k) = (sw[0], sw[1]);
                if self.rg(*w) {
                    let xd = self.value(*x).data().to_vec();
                    let dw: Vec<f64> = (0..m * k).map(|idx| g[idx / k] * xd[idx % k]).collect();
                    self.acc(*w, dw);
                }
                if self.rg(*x) {
                    let wd = self.value(*w).data();
                    let mut dx = vec![0.0; k];
                    for r in 0..m {
                        for (d, wv) in dx.iter_mut().zip(&wd[r * k..(r + 1) * k]) {
                            *d += g[r] * wv;
                        }
                    }
                    self.acc(*x, dx);
                }
            }
            Op::Outer(u, v) => {
                let (ud, vd) = (self.value(*u).data().to_vec(), self.value(*v).data().to_vec());
                let n = vd.len();
                if self.rg(*u) {
                    let du: Vec<f64> = (0..ud.len())
                        .map(|r| g[r * n..(r + 1) * n].iter().zip(&vd).map(|(a, b)| a * b).sum())
                        .collect();
                    self.acc(*u, du);
                }
                if self.rg(*v) {
                    let mut dv = vec![0.0; n];
                    for (r, uv) in ud.iter().enumerate() {
                        for (d, gv) in dv.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *d += uv * gv;
                        }
                    }
                    self.acc(*v, dv);
                }
            }
            Op::Add(a, b) => {
                self.acc(*a, g.iter().copied());
                self.acc(*b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.acc(*a, g.iter().copied());
                self.acc(*b, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bd = self.value(*b).data().to_vec();
                    self.acc(*a, g.iter().zip(bd).map(|(x, y)| x * y));
                }
                if self.rg(*b) {
                    let ad = self.value(*a).data().to_vec();
                    self.acc(*b, g.iter().zip(ad).map(|(x, y)| x * y));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(*x, g.iter().map(|v| v * c));
            }
            Op::BiasAdd(x, bias) => {
                self.acc(*x, g.iter().copied());
                if self.rg(*bias) {
                    let rows = self.shape(*bias)[0];
                    let cols = g.len() / rows;
                    let db: Vec<f64> = (0..rows).map(|r| g[r * cols..(r + 1) * cols].iter().sum()).collect();
                    self.acc(*bias, db);
                }
            }
            Op::ScaleRows(x, w) => {
                let rows = self.shape(*w)[0];
                let cols = g.len() / rows;
                if self.rg(*x) {
                    let wd = self.value(*w).data().to_vec();
                    self.acc(*x, g.iter().enumerate().map(|(i, v)| v * wd[i / cols]));
                }
                if self.rg(*w) {
                    let xd = self.value(*x).data();
                    let dw: Vec<f64> = (0..rows)
                        .map(|r| {
                            g[r * cols..(r + 1) * cols]
                                .iter()
                                .zip(&xd[r * cols..(r + 1) * cols])
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    self.acc(*w, dw);
                }
            }
            Op::Conv1d {
                x,
                kernel,
                stride,
                pad_left,
            } => {
                let (sx, sk) = (self.shape(*x).to_vec(), self.shape(*kernel).to_vec());
                let (cin, len, cout, k) = (sx[0], sx[1], sk[0], sk[2]);
                let lout = g.len() / cout;
                let (stride, pad_left) = (*stride, *pad_left);
                let xd = self.value(*x).data().to_vec();
                let kd = self.value(*kernel).data().to_vec();
                let bounds = |t: usize| {
                    let start = (t * stride) as isize - pad_left as isize;
                    let q_lo = (-start).max(0) as usize;
                    let q_hi = ((len as isize - start).min(k as isize)).max(0) as usize;
                    (start, q_lo, q_hi)
                };
                if self.rg(*x) {
                    let mut dx = vec![0.0; cin * len];
                    for o in 0..cout {
                        for c in 0..cin {
                            let w = &kd[(o * cin + c) * k..(o * cin + c + 1) * k];
                            let drow = &mut dx[c * len..(c + 1) * len];
                            for t in 0..lout {
                                let gv = g[o * lout + t];
                                if gv == 0.0 {
                                    continue;
                                }
                                let (start, q_lo, q_hi) = bounds(t);
                                for q in q_lo..q_hi {
                                    drow[(start + q as isize) as usize] += gv * w[q];
                                }
                            }
                        }
                    }
                    self.acc(*x, dx);
                }
                if self.rg(*kernel) {
                    let mut dk = vec![0.0; cout * cin * k];
                    for o in 0..cout {
                        for c in 0..cin {
                            let dw = &mut dk[(o * cin + c) * k..(o * cin + c + 1) * k];
                            let xrow = &xd[c * len..(c + 1) * len];
                            for t in 0..lout {
                                let gv = g[o * lout + t];
                                if gv == 0.0 {
                                    continue;
                                }
                                let (start, q_lo, q_hi) = bounds(t);
                                for q in q_lo..q_hi {
                                    dw[q] += gv * xrow[(start + q as isize) as usize];
                                }
                            }
                        }
                    }
                    self.acc(*kernel, dk);
                }
            }
            Op::MaxPool1d { x, argmax } => {
                if let Some(b) = self.buf(*x) {
                    for (gv, &src) in g.iter().zip(argmax) {
                        b[src] += gv;
                    }
                }
            }
            Op::BatchNorm1d {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let f = inv_std.len();
                let n = g.len() / f;
                if self.rg(*gamma) {
                    let dg: Vec<f64> = (0..f)
                        .map(|r| (0..n).map(|i| g[r * n + i] * xhat[r * n + i]).sum())
                        .collect();
                    self.acc(*gamma, dg);
                }
                if self.rg(*beta) {
                    let db: Vec<f64> = (0..f).map(|r| g[r * n..(r + 1) * n].iter().sum()).collect();
                    self.acc(*beta, db);
                }
                if self.rg(*x) {
                    let gd = self.value(*gamma).data().to_vec();
                    let mut dx = vec![0.0; f * n];
                    for r in 0..f {
                        let dxhat: Vec<f64> = (0..n).map(|i| g[r * n + i] * gd[r]).collect();
                        if *batch_stats {
                            let s1: f64 = dxhat.iter().sum();
                            let s2: f64 = dxhat.iter().enumerate().map(|(i, d)| d * xhat[r * n + i]).sum();
                            for i in 0..n {
                                dx[r * n + i] = inv_std[r] / n as f64
                                    * (n as f64 * dxhat[i] - s1 - xhat[r * n + i] * s2);
                            }
                        } else {
                            for i in 0..n {
                                dx[r * n + i] = dxhat[i] * inv_std[r];
                            }
                        }
                    }
                    self.acc(*x, dx);
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data().to_vec();
                self.acc(*x, g.iter().zip(xd).map(|(gv, v)| if v > 0.0 { *gv } else { 0.0 }));
            }
            Op::Tanh(x) => {
                let yd = self.nodes[i].value.data().to_vec();
                self.acc(*x, g.iter().zip(yd).map(|(gv, y)| gv * (1.0 - y * y)));
            }
            Op::Sigmoid(x) => {
                let yd = self.nodes[i].value.data().to_vec();
                self.acc(*x, g.iter().zip(yd).map(|(gv, y)| gv * y * (1.0 - y)));
            }
            Op::MaskedSoftmax(s) => {
                let yd = self.nodes[i].value.data().to_vec();
                let dot: f64 = yd.iter().zip(g).map(|(y, gv)| y * gv).sum();
                self.acc(*s, yd.iter().zip(g).map(|(y, gv)| y * (gv - dot)));
            }
            Op::CrossEntropy { p, label } => {
                let pv = self.value(*p).data()[*label];
                let d = if pv > CE_FLOOR { -g[0] / pv } else { 0.0 };
                let label = *label;
                if let Some(b) = self.buf(*p) {
                    b[label] += d;
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                if out_shape.len() == 1 || *axis == 0 {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).numel();
                        self.acc(*p, g[off..off + n].iter().copied());
                        off += n;
                    }
                } else {
                    let (rows, total) = (out_shape[0], out_shape[1]);
                    let mut off = 0;
                    for p in parts {
                        let c = self.shape(*p)[1];
                        let part: Vec<f64> = (0..rows)
                            .flat_map(|r| g[r * total + off..r * total + off + c].iter().copied())
                            .collect();
                        self.acc(*p, part);
                        off += c;
                    }
                }
            }
            Op::Gather { x, index } => {
                if let Some(b) = self.buf(*x) {
                    for (gv, &src) in g.iter().zip(index) {
                        b[src] += gv;
                    }
                }
            }
            Op::Reshape(x) => self.acc(*x, g.iter().copied()),
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.acc(*x, std::iter::repeat_n(g[0], n));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.acc(*x, std::iter::repeat_n(g[0] / n as f64, n));
            }
        }
        self.nodes[i].op = op;
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
