//! Dense tensors with reverse-mode automatic differentiation.
//!
//! All values live on a [`Tape`]: building an op appends a node holding the
//! forward result plus enough bookkeeping to push gradients back through it.
//! [`Tape::backward`] walks the nodes once in reverse creation order, so any
//! value built through the tape API is differentiable with respect to every
//! tracked leaf beneath it.
//!
//! Conventions:
//! - spatial tensors are NCHW (`[n, c, h, w]`), vectors are `[len]`,
//!   fully-connected weights are `[out, in]`, scalars are `[1]`
//! - storage is `f32`; reductions that feed losses accumulate in `f64`
//! - every forward result is checked for NaN/Inf before it lands on the tape

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Zero padding applied symmetrically before a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Pad by `(k - 1) / 2` on each side; stride 1 preserves spatial dims.
    Same,
    /// No padding.
    Valid,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Dims disagree with what the op requires; the message names the op.
    Shape(String),
    /// Kernel spatial size must be odd so `Same` padding is symmetric.
    EvenKernel(usize),
    /// Only strides 1 and 2 are supported.
    BadStride(usize),
    /// 2x2 pooling halves spatial dims, so they must be even.
    OddSpatial { h: usize, w: usize },
    /// `backward` needs a single-element tensor as the root.
    NonScalarRoot(Vec<usize>),
    /// `backward` already ran on this tape.
    TapeUsed,
    /// An op produced NaN or Inf.
    NonFinite(&'static str),
    /// Soft Dice requires probabilities in `[0, 1]`.
    ProbOutOfRange(f32),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            TensorError::EvenKernel(k) => write!(f, "kernel size {k} is even; must be odd"),
            TensorError::BadStride(s) => write!(f, "stride {s} unsupported; use 1 or 2"),
            TensorError::OddSpatial { h, w } => {
                write!(f, "2x2 pooling needs even spatial dims, got {h}x{w}")
            }
            TensorError::NonScalarRoot(d) => {
                write!(f, "backward root must be a scalar, got dims {d:?}")
            }
            TensorError::TapeUsed => write!(f, "backward already ran on this tape"),
            TensorError::NonFinite(op) => write!(f, "{op} produced a non-finite value"),
            TensorError::ProbOutOfRange(p) => {
                write!(f, "soft dice input {p} outside [0, 1]")
            }
        }
    }
}

impl core::error::Error for TensorError {}

pub type Result<T> = core::result::Result<T, TensorError>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        input: TensorId,
        /// Flat input index of the winning element per output element.
        argmax: Vec<u32>,
    },
    AvgPool2 {
        input: TensorId,
    },
    Upsample2 {
        input: TensorId,
    },
    ConcatChannels {
        a: TensorId,
        b: TensorId,
    },
    Relu {
        input: TensorId,
    },
    Sigmoid {
        input: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        input: TensorId,
        factor: f32,
    },
    FullyConnected {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    GlobalAvgPool {
        input: TensorId,
    },
    Sum {
        input: TensorId,
    },
    WeightedBceLogits {
        logits: TensorId,
        /// 1 for foreground, 0 for background.
        target: Vec<f32>,
        weight: Vec<f32>,
        clip: f64,
    },
    SoftDice {
        probs: TensorId,
        target: Vec<f32>,
        smooth: f64,
    },
    MseVec {
        pred: TensorId,
        target: Vec<f32>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    dims: Vec<usize>,
    values: Vec<f32>,
    op: Op,
    /// True for tracked leaves and anything computed from one.
    needs_grad: bool,
}

/// Gradient tape: owns every tensor of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    used: bool,
}

fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

fn sigmoid32(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::expf(-x))
    } else {
        let e = libm::expf(x);
        e / (1.0 + e)
    }
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].dims
    }

    pub fn values(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].values
    }

    /// Scalar convenience accessor; panics when the tensor is not 1-element.
    pub fn scalar(&self, id: TensorId) -> f32 {
        let n = &self.nodes[id.0];
        assert_eq!(n.values.len(), 1, "scalar() on tensor with dims {:?}", n.dims);
        n.values[0]
    }

    /// Gradient of the last `backward` root with respect to `id`.
    ///
    /// `None` until `backward` runs, and for nodes that never needed a
    /// gradient.
    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, dims: Vec<usize>, values: Vec<f32>, op: Op, needs_grad: bool) -> TensorId {
        debug_assert_eq!(numel(&dims), values.len());
        self.nodes.push(Node {
            dims,
            values,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn check_finite(values: &[f32], op: &'static str) -> Result<()> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite(op))
        }
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Adds a leaf. `tracked` marks it as a parameter: `backward` will
    /// produce a gradient for it.
    pub fn leaf(&mut self, dims: &[usize], values: Vec<f32>, tracked: bool) -> Result<TensorId> {
        if numel(dims) != values.len() {
            return Err(TensorError::Shape(format!(
                "leaf dims {:?} hold {} elements but {} values were given",
                dims,
                numel(dims),
                values.len()
            )));
        }
        Self::check_finite(&values, "leaf")?;
        Ok(self.push(dims.to_vec(), values, Op::Leaf, tracked))
    }

    /// 2-D cross-correlation over NCHW input with an OIKK kernel.
    ///
    /// Output spatial size is `(d + 2p - k) / stride + 1` per axis with
    /// `p = (k - 1) / 2` for `Same` and `0` for `Valid`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        padding: Padding,
    ) -> Result<TensorId> {
        if stride != 1 && stride != 2 {
            return Err(TensorError::BadStride(stride));
        }
        let idims = self.dims(input).to_vec();
        let kdims = self.dims(kernel).to_vec();
        let bdims = self.dims(bias).to_vec();
        if idims.len() != 4 {
            return Err(TensorError::Shape(format!(
                "conv2d input must be [n, c, h, w], got {idims:?}"
            )));
        }
        if kdims.len() != 4 || kdims[2] != kdims[3] {
            return Err(TensorError::Shape(format!(
                "conv2d kernel must be [out, in, k, k], got {kdims:?}"
            )));
        }
        let (n, ci, h, w) = (idims[0], idims[1], idims[2], idims[3]);
        let (co, ki, k) = (kdims[0], kdims[1], kdims[2]);
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel(k));
        }
        if ki != ci {
            return Err(TensorError::Shape(format!(
                "conv2d kernel expects {ki} input channels, input has {ci}"
            )));
        }
        if bdims != [co] {
            return Err(TensorError::Shape(format!(
                "conv2d bias must be [{co}], got {bdims:?}"
            )));
        }
        let pad = match padding {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        };
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(TensorError::Shape(format!(
                "conv2d kernel {k}x{k} larger than padded input {h}x{w} (pad {pad})"
            )));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;

        let iv = &self.nodes[input.0].values;
        let kv = &self.nodes[kernel.0].values;
        let bv = &self.nodes[bias.0].values;
        let mut out = vec![0.0f32; n * co * ho * wo];
        for nb in 0..n {
            for o in 0..co {
                let out_base = (nb * co + o) * ho * wo;
                out[out_base..out_base + ho * wo].fill(bv[o]);
                for i in 0..ci {
                    let in_base = (nb * ci + i) * h * w;
                    for ky in 0..k {
                        for kx in 0..k {
                            let wgt = kv[((o * ci + i) * k + ky) * k + kx];
                            if wgt == 0.0 {
                                continue;
                            }
                            // Valid output range for this tap: input coords
                            // y*s + ky - pad and x*s + kx - pad must stay in
                            // bounds.
                            let (y_lo, y_hi) = tap_range(ky, pad, stride, h, ho);
                            let (x_lo, x_hi) = tap_range(kx, pad, stride, w, wo);
                            for y in y_lo..y_hi {
                                let iy = y * stride + ky - pad;
                                let in_row = in_base + iy * w;
                                let out_row = out_base + y * wo;
                                if stride == 1 {
                                    let off = kx as isize - pad as isize;
                                    for x in x_lo..x_hi {
                                        let ix = (x as isize + off) as usize;
                                        out[out_row + x] += wgt * iv[in_row + ix];
                                    }
                                } else {
                                    for x in x_lo..x_hi {
                                        let ix = x * stride + kx - pad;
                                        out[out_row + x] += wgt * iv[in_row + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Self::check_finite(&out, "conv2d")?;
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            vec![n, co, ho, wo],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
            needs,
        ))
    }

    /// 2x2 max pooling with stride 2. Ties go to the first element in
    /// row-major window order, so gradients route deterministically.
    pub fn max_pool2(&mut self, input: TensorId) -> Result<TensorId> {
        let d = self.dims(input).to_vec();
        if d.len() != 4 {
            return Err(TensorError::Shape(format!(
                "max_pool2 input must be [n, c, h, w], got {d:?}"
            )));
        }
        let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::OddSpatial { h, w });
        }
        let (ho, wo) = (h / 2, w / 2);
        let iv = &self.nodes[input.0].values;
        let mut out = vec![0.0f32; n * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        for nc in 0..n * c {
            let in_base = nc * h * w;
            let out_base = nc * ho * wo;
            for y in 0..ho {
                for x in 0..wo {
                    let mut best_idx = in_base + (2 * y) * w + 2 * x;
                    let mut best = iv[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = in_base + (2 * y + dy) * w + 2 * x + dx;
                        if iv[idx] > best {
                            best = iv[idx];
                            best_idx = idx;
                        }
                    }
                    out[out_base + y * wo + x] = best;
                    argmax[out_base + y * wo + x] = best_idx as u32;
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(vec![n, c, ho, wo], out, Op::MaxPool2 { input, argmax }, needs))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, input: TensorId) -> Result<TensorId> {
        let d = self.dims(input).to_vec();
        if d.len() != 4 {
            return Err(TensorError::Shape(format!(
                "avg_pool2 input must be [n, c, h, w], got {d:?}"
            )));
        }
        let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::OddSpatial { h, w });
        }
        let (ho, wo) = (h / 2, w / 2);
        let iv = &self.nodes[input.0].values;
        let mut out = vec![0.0f32; n * c * ho * wo];
        for nc in 0..n * c {
            let in_base = nc * h * w;
            let out_base = nc * ho * wo;
            for y in 0..ho {
                for x in 0..wo {
                    let i = in_base + (2 * y) * w + 2 * x;
                    out[out_base + y * wo + x] =
                        0.25 * (iv[i] + iv[i + 1] + iv[i + w] + iv[i + w + 1]);
                }
            }
        }
        Self::check_finite(&out, "avg_pool2")?;
        let needs = self.needs(input);
        Ok(self.push(vec![n, c, ho, wo], out, Op::AvgPool2 { input }, needs))
    }

    /// Nearest-neighbour 2x upsampling: each input element becomes a 2x2
    /// block.
    pub fn upsample2_nearest(&mut self, input: TensorId) -> Result<TensorId> {
        let d = self.dims(input).to_vec();
        if d.len() != 4 {
            return Err(TensorError::Shape(format!(
                "upsample2_nearest input must be [n, c, h, w], got {d:?}"
            )));
        }
        let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
        let (ho, wo) = (2 * h, 2 * w);
        let iv = &self.nodes[input.0].values;
        let mut out = vec![0.0f32; n * c * ho * wo];
        for nc in 0..n * c {
            let in_base = nc * h * w;
            let out_base = nc * ho * wo;
            for y in 0..ho {
                let in_row = in_base + (y / 2) * w;
                let out_row = out_base + y * wo;
                for x in 0..wo {
                    out[out_row + x] = iv[in_row + x / 2];
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(vec![n, c, ho, wo], out, Op::Upsample2 { input }, needs))
    }

    /// Concatenates along the channel axis; batch and spatial dims must
    /// match.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let da = self.dims(a).to_vec();
        let db = self.dims(b).to_vec();
        if da.len() != 4 || db.len() != 4 {
            return Err(TensorError::Shape(format!(
                "concat_channels needs two [n, c, h, w] tensors, got {da:?} and {db:?}"
            )));
        }
        if da[0] != db[0] || da[2] != db[2] || da[3] != db[3] {
            return Err(TensorError::Shape(format!(
                "concat_channels batch/spatial dims differ: {da:?} vs {db:?}"
            )));
        }
        let (n, ca, cb, h, w) = (da[0], da[1], db[1], da[2], da[3]);
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0f32; n * (ca + cb) * h * w];
        let plane = h * w;
        for nb in 0..n {
            let out_base = nb * (ca + cb) * plane;
            let a_base = nb * ca * plane;
            let b_base = nb * cb * plane;
            out[out_base..out_base + ca * plane]
                .copy_from_slice(&av[a_base..a_base + ca * plane]);
            out[out_base + ca * plane..out_base + (ca + cb) * plane]
                .copy_from_slice(&bv[b_base..b_base + cb * plane]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![n, ca + cb, h, w], out, Op::ConcatChannels { a, b }, needs))
    }

    /// Elementwise `max(0, x)`. The derivative at exactly zero is zero.
    pub fn relu(&mut self, input: TensorId) -> Result<TensorId> {
        let iv = &self.nodes[input.0].values;
        let out: Vec<f32> = iv.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let dims = self.dims(input).to_vec();
        let needs = self.needs(input);
        Ok(self.push(dims, out, Op::Relu { input }, needs))
    }

    /// Elementwise logistic sigmoid, computed in the numerically stable
    /// branch form.
    pub fn sigmoid(&mut self, input: TensorId) -> Result<TensorId> {
        let iv = &self.nodes[input.0].values;
        let out: Vec<f32> = iv.iter().map(|&v| sigmoid32(v)).collect();
        let dims = self.dims(input).to_vec();
        let needs = self.needs(input);
        Ok(self.push(dims, out, Op::Sigmoid { input }, needs))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let da = self.dims(a).to_vec();
        let db = self.dims(b);
        if da != db {
            return Err(TensorError::Shape(format!("add dims {da:?} vs {db:?}")));
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let out: Vec<f32> = av.iter().zip(bv).map(|(x, y)| x + y).collect();
        Self::check_finite(&out, "add")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(da, out, Op::Add { a, b }, needs))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let da = self.dims(a).to_vec();
        let db = self.dims(b);
        if da != db {
            return Err(TensorError::Shape(format!("mul dims {da:?} vs {db:?}")));
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let out: Vec<f32> = av.iter().zip(bv).map(|(x, y)| x * y).collect();
        Self::check_finite(&out, "mul")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(da, out, Op::Mul { a, b }, needs))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, input: TensorId, factor: f32) -> Result<TensorId> {
        let iv = &self.nodes[input.0].values;
        let out: Vec<f32> = iv.iter().map(|&v| v * factor).collect();
        Self::check_finite(&out, "scale")?;
        let dims = self.dims(input).to_vec();
        let needs = self.needs(input);
        Ok(self.push(dims, out, Op::Scale { input, factor }, needs))
    }

    /// `y = W x + b` for a 1-D input, `[out, in]` weight and `[out]` bias.
    pub fn fully_connected(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let dx = self.dims(x).to_vec();
        let dw = self.dims(w).to_vec();
        let db = self.dims(b).to_vec();
        if dx.len() != 1 || dw.len() != 2 || db.len() != 1 {
            return Err(TensorError::Shape(format!(
                "fully_connected needs x [in], w [out, in], b [out]; got {dx:?}, {dw:?}, {db:?}"
            )));
        }
        let (dout, din) = (dw[0], dw[1]);
        if dx[0] != din || db[0] != dout {
            return Err(TensorError::Shape(format!(
                "fully_connected w {dw:?} incompatible with x {dx:?} / b {db:?}"
            )));
        }
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0f32; dout];
        for o in 0..dout {
            let row = &wv[o * din..(o + 1) * din];
            let mut acc = bv[o];
            for i in 0..din {
                acc += row[i] * xv[i];
            }
            out[o] = acc;
        }
        Self::check_finite(&out, "fully_connected")?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(vec![dout], out, Op::FullyConnected { x, w, b }, needs))
    }

    /// Mean over both spatial axes of a single-sample `[1, c, h, w]` tensor,
    /// producing `[c]`. The mean accumulates in `f64`.
    pub fn global_avg_pool(&mut self, input: TensorId) -> Result<TensorId> {
        let d = self.dims(input).to_vec();
        if d.len() != 4 || d[0] != 1 {
            return Err(TensorError::Shape(format!(
                "global_avg_pool input must be [1, c, h, w], got {d:?}"
            )));
        }
        let (c, h, w) = (d[1], d[2], d[3]);
        let plane = h * w;
        let iv = &self.nodes[input.0].values;
        let mut out = vec![0.0f32; c];
        for ch in 0..c {
            let mut acc = 0.0f64;
            for &v in &iv[ch * plane..(ch + 1) * plane] {
                acc += v as f64;
            }
            out[ch] = (acc / plane as f64) as f32;
        }
        Self::check_finite(&out, "global_avg_pool")?;
        let needs = self.needs(input);
        Ok(self.push(vec![c], out, Op::GlobalAvgPool { input }, needs))
    }

    /// Sum of all elements, as a `[1]` scalar. Accumulates in `f64`.
    pub fn sum(&mut self, input: TensorId) -> Result<TensorId> {
        let iv = &self.nodes[input.0].values;
        let acc: f64 = iv.iter().map(|&v| v as f64).sum();
        let out = vec![acc as f32];
        Self::check_finite(&out, "sum")?;
        let needs = self.needs(input);
        Ok(self.push(vec![1], out, Op::Sum { input }, needs))
    }

    /// Mean of per-element weighted binary cross-entropy on logits:
    /// `mean_i(w_i * -ln p_i)` where `p_i` is the predicted probability of
    /// the true class. Probabilities are clamped to `[clip, 1 - clip]`
    /// before the log, which bounds the value; the gradient is the
    /// unclamped `w/n * (sigmoid(l) - g)` everywhere, so saturated
    /// elements still receive a restoring pull.
    ///
    /// `target` must be 0/1 and `weight` positive, both matching the logits
    /// element count. The whole reduction runs in `f64`.
    pub fn weighted_bce_with_logits(
        &mut self,
        logits: TensorId,
        target: &[f32],
        weight: &[f32],
        clip: f64,
    ) -> Result<TensorId> {
        let lv = &self.nodes[logits.0].values;
        if target.len() != lv.len() || weight.len() != lv.len() {
            return Err(TensorError::Shape(format!(
                "weighted_bce_with_logits: {} logits, {} targets, {} weights",
                lv.len(),
                target.len(),
                weight.len()
            )));
        }
        let mut acc = 0.0f64;
        for i in 0..lv.len() {
            let p = sigmoid64(lv[i] as f64);
            let p_true = if target[i] > 0.5 { p } else { 1.0 - p };
            let p_clamped = p_true.clamp(clip, 1.0 - clip);
            acc += weight[i] as f64 * -libm::log(p_clamped);
        }
        let out = vec![(acc / lv.len() as f64) as f32];
        Self::check_finite(&out, "weighted_bce_with_logits")?;
        let needs = self.needs(logits);
        Ok(self.push(
            vec![1],
            out,
            Op::WeightedBceLogits {
                logits,
                target: target.to_vec(),
                weight: weight.to_vec(),
                clip,
            },
            needs,
        ))
    }

    /// Soft Dice loss `1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s)` over
    /// probabilities `p` in `[0, 1]` and a 0/1 target `g`. Runs in `f64`.
    pub fn soft_dice(&mut self, probs: TensorId, target: &[f32], smooth: f64) -> Result<TensorId> {
        let pv = &self.nodes[probs.0].values;
        if target.len() != pv.len() {
            return Err(TensorError::Shape(format!(
                "soft_dice: {} probs vs {} targets",
                pv.len(),
                target.len()
            )));
        }
        for &p in pv.iter() {
            if !(0.0..=1.0).contains(&p) {
                return Err(TensorError::ProbOutOfRange(p));
            }
        }
        let mut inter = 0.0f64;
        let mut psum = 0.0f64;
        let mut gsum = 0.0f64;
        for i in 0..pv.len() {
            inter += pv[i] as f64 * target[i] as f64;
            psum += pv[i] as f64;
            gsum += target[i] as f64;
        }
        let loss = 1.0 - (2.0 * inter + smooth) / (psum + gsum + smooth);
        let out = vec![loss as f32];
        Self::check_finite(&out, "soft_dice")?;
        let needs = self.needs(probs);
        Ok(self.push(
            vec![1],
            out,
            Op::SoftDice {
                probs,
                target: target.to_vec(),
                smooth,
            },
            needs,
        ))
    }

    /// Mean squared error between a prediction vector and a constant target.
    pub fn mse(&mut self, pred: TensorId, target: &[f32]) -> Result<TensorId> {
        let pv = &self.nodes[pred.0].values;
        if target.len() != pv.len() {
            return Err(TensorError::Shape(format!(
                "mse: {} predictions vs {} targets",
                pv.len(),
                target.len()
            )));
        }
        let mut acc = 0.0f64;
        for i in 0..pv.len() {
            let d = pv[i] as f64 - target[i] as f64;
            acc += d * d;
        }
        let out = vec![(acc / pv.len() as f64) as f32];
        Self::check_finite(&out, "mse")?;
        let needs = self.needs(pred);
        Ok(self.push(
            vec![1],
            out,
            Op::MseVec {
                pred,
                target: target.to_vec(),
            },
            needs,
        ))
    }

    /// Runs reverse-mode accumulation from a scalar root, filling gradients
    /// for every node that leads to a tracked leaf. One shot per tape.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.used {
            return Err(TensorError::TapeUsed);
        }
        let rd = self.dims(root);
        if numel(rd) != 1 {
            return Err(TensorError::NonScalarRoot(rd.to_vec()));
        }
        self.used = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.accumulate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn grad_slot<'a>(
        grads: &'a mut [Option<Vec<f32>>],
        nodes: &[Node],
        id: TensorId,
    ) -> &'a mut Vec<f32> {
        grads[id.0].get_or_insert_with(|| vec![0.0f32; nodes[id.0].values.len()])
    }

    fn accumulate(&self, idx: usize, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let (input, kernel, bias, stride, pad) = (*input, *kernel, *bias, *stride, *pad);
                let idims = &nodes[input.0].dims;
                let kdims = &nodes[kernel.0].dims;
                let odims = &nodes[idx].dims;
                let (n, ci, h, w) = (idims[0], idims[1], idims[2], idims[3]);
                let (co, k) = (kdims[0], kdims[2]);
                let (ho, wo) = (odims[2], odims[3]);
                let iv = &nodes[input.0].values;
                let kv = &nodes[kernel.0].values;
                let need_in = nodes[input.0].needs_grad;
                let need_k = nodes[kernel.0].needs_grad;
                let need_b = nodes[bias.0].needs_grad;

                if need_b {
                    let gb = Self::grad_slot(grads, nodes, bias);
                    for nb in 0..n {
                        for o in 0..co {
                            let base = (nb * co + o) * ho * wo;
                            let mut acc = 0.0f32;
                            for g in &gout[base..base + ho * wo] {
                                acc += g;
                            }
                            gb[o] += acc;
                        }
                    }
                }
                if !need_in && !need_k {
                    return;
                }
                // Split borrows: kernel grad and input grad live in
                // different slots, touched in separate passes per tap.
                for nb in 0..n {
                    for o in 0..co {
                        let out_base = (nb * co + o) * ho * wo;
                        for i in 0..ci {
                            let in_base = (nb * ci + i) * h * w;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (y_lo, y_hi) = tap_range(ky, pad, stride, h, ho);
                                    let (x_lo, x_hi) = tap_range(kx, pad, stride, w, wo);
                                    let kidx = ((o * ci + i) * k + ky) * k + kx;
                                    if need_k {
                                        let mut acc = 0.0f32;
                                        for y in y_lo..y_hi {
                                            let iy = y * stride + ky - pad;
                                            let in_row = in_base + iy * w;
                                            let out_row = out_base + y * wo;
                                            for x in x_lo..x_hi {
                                                let ix = x * stride + kx - pad;
                                                acc += gout[out_row + x] * iv[in_row + ix];
                                            }
                                        }
                                        Self::grad_slot(grads, nodes, kernel)[kidx] += acc;
                                    }
                                    if need_in {
                                        let wgt = kv[kidx];
                                        if wgt == 0.0 {
                                            continue;
                                        }
                                        let gin = Self::grad_slot(grads, nodes, input);
                                        for y in y_lo..y_hi {
                                            let iy = y * stride + ky - pad;
                                            let in_row = in_base + iy * w;
                                            let out_row = out_base + y * wo;
                                            for x in x_lo..x_hi {
                                                let ix = x * stride + kx - pad;
                                                gin[in_row + ix] += wgt * gout[out_row + x];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let input = *input;
                if nodes[input.0].needs_grad {
                    let argmax = argmax.clone();
                    let gin = Self::grad_slot(grads, nodes, input);
                    for (out_idx, &in_idx) in argmax.iter().enumerate() {
                        gin[in_idx as usize] += gout[out_idx];
                    }
                }
            }
            Op::AvgPool2 { input } => {
                let input = *input;
                if nodes[input.0].needs_grad {
                    let d = &nodes[idx].dims;
                    let (n, c, ho, wo) = (d[0], d[1], d[2], d[3]);
                    let w = nodes[input.0].dims[3];
                    let gin = Self::grad_slot(grads, nodes, input);
                    for nc in 0..n * c {
                        let out_base = nc * ho * wo;
                        let in_base = nc * (2 * ho) * (2 * wo);
                        for y in 0..ho {
                            for x in 0..wo {
                                let g = 0.25 * gout[out_base + y * wo + x];
                                let i = in_base + (2 * y) * w + 2 * x;
                                gin[i] += g;
                                gin[i + 1] += g;
                                gin[i + w] += g;
                                gin[i + w + 1] += g;
                            }
                        }
                    }
                }
            }
            Op::Upsample2 { input } => {
                let input = *input;
                if nodes[input.0].needs_grad {
                    let d = &nodes[idx].dims;
                    let (n, c, ho, wo) = (d[0], d[1], d[2], d[3]);
                    let (h, w) = (ho / 2, wo / 2);
                    let gin = Self::grad_slot(grads, nodes, input);
                    for nc in 0..n * c {
                        let out_base = nc * ho * wo;
                        let in_base = nc * h * w;
                        for y in 0..ho {
                            let in_row = in_base + (y / 2) * w;
                            let out_row = out_base + y * wo;
                            for x in 0..wo {
                                gin[in_row + x / 2] += gout[out_row + x];
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels { a, b } => {
                let (a, b) = (*a, *b);
                let da = nodes[a.0].dims.clone();
                let db = nodes[b.0].dims.clone();
                let (n, ca, cb) = (da[0], da[1], db[1]);
                let plane = da[2] * da[3];
                if nodes[a.0].needs_grad {
                    let ga = Self::grad_slot(grads, nodes, a);
                    for nb in 0..n {
                        let out_base = nb * (ca + cb) * plane;
                        let a_base = nb * ca * plane;
                        for j in 0..ca * plane {
                            ga[a_base + j] += gout[out_base + j];
                        }
                    }
                }
                if nodes[b.0].needs_grad {
                    let gb = Self::grad_slot(grads, nodes, b);
                    for nb in 0..n {
                        let out_base = nb * (ca + cb) * plane + ca * plane;
                        let b_base = nb * cb * plane;
                        for j in 0..cb * plane {
                            gb[b_base + j] += gout[out_base + j];
                        }
                    }
                }
            }
            Op::Relu { input } => {
                let input = *input;
                if nodes[input.0].needs_grad {
                    let iv = &nodes[input.0].values;
                    let gin = Self::grad_slot(grads, nodes, input);
                    for i in 0..iv.len() {
                        if iv[i] > 0.0 {
                            gin[i] += gout[i];
                        }
                    }
                }
            }
            Op::Sigmoid { input } => {
                let input = *input;
                if nodes[input.0].needs_grad {
                    let yv = &nodes[idx].values;
                    let gin = Self::grad_slot(grads, nodes, input);
                    for i in 0..yv.len() {
                        gin[i] += gout[i] * yv[i] * (1.0 - yv[i]);
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if nodes[id.0].needs_grad {
                        let g = Self::grad_slot(grads, nodes, id);
                        for i in 0..gout.len() {
                            g[i] += gout[i];
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if nodes[a.0].needs_grad {
                    let bv = nodes[b.0].values.clone();
                    let ga = Self::grad_slot(grads, nodes, a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * bv[i];
                    }
                }
                if nodes[b.0].needs_grad {
                    let av = nodes[a.0].values.clone();
                    let gb = Self::grad_slot(grads, nodes, b);
                    for i in 0..gout.len() {
                        gb[i] += gout[i] * av[i];
                    }
                }
            }
            Op::Scale { input, factor } => {
                let (input, factor) = (*input, *factor);
                if nodes[input.0].needs_grad {
                    let gin = Self::grad_slot(grads, nodes, input);
                    for i in 0..gout.len() {
                        gin[i] += gout[i] * factor;
                    }
                }
            }
            Op::FullyConnected { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let din = nodes[x.0].dims[0];
                let dout = nodes[b.0].dims[0];
                if nodes[b.0].needs_grad {
                    let gb = Self::grad_slot(grads, nodes, b);
                    for o in 0..dout {
                        gb[o] += gout[o];
                    }
                }
                if nodes[w.0].needs_grad {
                    let xv = nodes[x.0].values.clone();
                    let gw = Self::grad_slot(grads, nodes, w);
                    for o in 0..dout {
                        for i in 0..din {
                            gw[o * din + i] += gout[o] * xv[i];
                        }
                    }
                }
                if nodes[x.0].needs_grad {
                    let wv = nodes[w.0].values.clone();
                    let gx = Self::grad_slot(grads, nodes, x);
                    for o in 0..dout {
                        for i in 0..din {
                            gx[i] += gout[o] * wv[o * din + i];
                        }
                    }
                }
            }
            Op::GlobalAvgPool { input } => {
                let input = *input;
                if nodes[input.0].needs_grad {
                    let d = &nodes[input.0].dims;
                    let (c, plane) = (d[1], d[2] * d[3]);
                    let inv = 1.0 / plane as f32;
                    let gin = Self::grad_slot(grads, nodes, input);
                    for ch in 0..c {
                        let g = gout[ch] * inv;
                        for v in &mut gin[ch * plane..(ch + 1) * plane] {
                            *v += g;
                        }
                    }
                }
            }
            Op::Sum { input } => {
                let input = *input;
                if nodes[input.0].needs_grad {
                    let g = gout[0];
                    let gin = Self::grad_slot(grads, nodes, input);
                    for v in gin.iter_mut() {
                        *v += g;
                    }
                }
            }
            Op::WeightedBceLogits {
                logits,
                target,
                weight,
                clip,
            } => {
                let logits = *logits;
                if nodes[logits.0].needs_grad {
                    let lv = nodes[logits.0].values.clone();
                    let target = target.clone();
                    let weight = weight.clone();
                    let clip = *clip;
                    let inv_n = 1.0 / lv.len() as f64;
                    let g = gout[0] as f64;
                    let _ = clip;
                    let gin = Self::grad_slot(grads, nodes, logits);
                    for i in 0..lv.len() {
                        let p = sigmoid64(lv[i] as f64);
                        let t = if target[i] > 0.5 { 1.0 } else { 0.0 };
                        // The clip bounds the forward value only; the
                        // gradient stays sigmoid(l) - g everywhere so
                        // saturated pixels keep pulling back toward the
                        // target instead of freezing.
                        gin[i] += (g * weight[i] as f64 * inv_n * (p - t)) as f32;
                    }
                }
            }
            Op::SoftDice {
                probs,
                target,
                smooth,
            } => {
                let probs = *probs;
                if nodes[probs.0].needs_grad {
                    let pv = nodes[probs.0].values.clone();
                    let target = target.clone();
                    let smooth = *smooth;
                    let mut inter = 0.0f64;
                    let mut psum = 0.0f64;
                    let mut gsum = 0.0f64;
                    for i in 0..pv.len() {
                        inter += pv[i] as f64 * target[i] as f64;
                        psum += pv[i] as f64;
                        gsum += target[i] as f64;
                    }
                    let denom = psum + gsum + smooth;
                    let num = 2.0 * inter + smooth;
                    let g = gout[0] as f64;
                    let gin = Self::grad_slot(grads, nodes, probs);
                    for i in 0..pv.len() {
                        // d/dp_i of -(2I+s)/(P+G+s): quotient rule.
                        let d = -(2.0 * target[i] as f64 * denom - num) / (denom * denom);
                        gin[i] += (g * d) as f32;
                    }
                }
            }
            Op::MseVec { pred, target } => {
                let pred = *pred;
                if nodes[pred.0].needs_grad {
                    let pv = nodes[pred.0].values.clone();
                    let target = target.clone();
                    let inv_n = 2.0 / pv.len() as f64;
                    let g = gout[0] as f64;
                    let gin = Self::grad_slot(grads, nodes, pred);
                    for i in 0..pv.len() {
                        gin[i] += (g * inv_n * (pv[i] as f64 - target[i] as f64)) as f32;
                    }
                }
            }
        }
    }
}

/// Output coordinate range `[lo, hi)` for which `y*stride + tap - pad` lands
/// inside `[0, in_dim)`.
fn tap_range(tap: usize, pad: usize, stride: usize, in_dim: usize, out_dim: usize) -> (usize, usize) {
    let off = tap as isize - pad as isize;
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let last_in = in_dim as isize - 1 - off;
    if last_in < 0 {
        return (0, 0);
    }
    let hi = (last_in as usize / stride + 1).min(out_dim);
    (lo.min(hi), hi)
}
