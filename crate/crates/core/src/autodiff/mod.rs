//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass as an append-only
//! list of nodes. Inputs always precede the node that consumes them, so the
//! reverse of insertion order is a valid topological order for backward.
//!
//! [`Tape::backward_seeded`] is the general entry point: it accepts cotangent
//! seeds on arbitrary nodes and a `wrt` set, and only visits nodes lying on a
//! path from some `wrt` node to some seed. This pruning is what lets the
//! advocacy step take per-subnetwork gradients from one shared forward pass
//! without paying for gradients nobody asked for.

mod gradcheck;
pub mod kernels;

use std::collections::HashMap;

use rand::Rng;

pub use gradcheck::{grad_check, grad_check_at, grad_pairs_at, relative_error};

use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, Scalar, Tensor};
use kernels::ConvGeometry;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train/eval switch for batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics produced by a train-mode batch norm, for updating running stats.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n - 1) variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Identity(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeometry, out_channels: usize },
    ConvTranspose2d { x: Var, w: Var, b: Var, geom: ConvGeometry, in_channels: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, invstd: Vec<T>, train: bool },
    Dropout { x: Var, mask: Vec<T> },
    LogSoftmax { x: Var, outer: usize, len: usize, inner: usize },
    ConcatChannels { parts: Vec<(Var, usize)>, inner: usize },
    PickMean { x: Var, picks: Vec<usize>, count: usize },
    AbsSumMean(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Identity(x)
            | Op::Reshape(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::MaxPool2d { x, .. }
            | Op::Dropout { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::PickMean { x, .. }
            | Op::AbsSumMean(x) => vec![*x],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatChannels { parts, .. } => parts.iter().map(|&(v, _)| v).collect(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only record of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the requested `wrt` nodes.
#[derive(Clone)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; every `wrt` node has an entry (zeros when unreachable).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<T: Scalar> std::fmt::Debug for Gradients<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map().entries(self.grads.iter()).finish()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g),
    }
}

fn nchw(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::Shape(format!("{what} expects an NCHW tensor, got {shape:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Pass-through node; used to give each consumer of a shared value its own
    /// handle so gradients can be taken along one branch only.
    pub fn identity(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Identity(x))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Collapse all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let outer = shape[0];
        let inner = shape[1..].iter().product::<usize>().max(1);
        self.reshape(x, [outer, inner])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same_shape(self.shape(a), self.shape(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Elementwise product; gradients flow to both operands.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same_shape(self.shape(a), self.shape(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel()).unwrap_or_else(T::one);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push(value, Op::Sigmoid(x))
    }

    /// `x (B x in) · wᵀ + b` with `w` stored `out x in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (batch, inp, out) = match (xs, ws) {
            ([batch, inp], [out, win]) if inp == win && bs == [*out] => (*batch, *inp, *out),
            _ => return Err(Error::Shape(format!("linear: input {xs:?}, weight {ws:?}, bias {bs:?} do not agree"))),
        };
        let mut data = vec![T::zero(); batch * out];
        for row in data.chunks_mut(out) {
            row.copy_from_slice(self.value(b).data());
        }
        T::gemm(batch, inp, out, T::one(), self.value(x).data(), (inp, 1), self.value(w).data(), (1, inp), T::one(), &mut data, (out, 1));
        let value = Tensor::new([batch, out], data)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Cross-correlation of an NCHW input with an `O x C x K x K` weight.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (batch, c, h, wd) = nchw(self.shape(x), "conv2d")?;
        let (o, wc, k, k2) = nchw(self.shape(w), "conv2d weight")?;
        if wc != c || k != k2 {
            return Err(Error::Shape(format!("conv2d: input has {c} channels but weight is {:?}", self.shape(w))));
        }
        if self.shape(b) != [o] {
            return Err(Error::Shape(format!("conv2d: bias {:?} for {o} output channels", self.shape(b))));
        }
        let geom = ConvGeometry::conv(c, h, wd, k, stride, padding)?;
        let mut data = vec![T::zero(); batch * o * geom.col_cols()];
        kernels::correlate_batch(self.value(x).data(), batch, &geom, self.value(w).data(), o, &mut data);
        kernels::add_channel_bias(&mut data, batch, o, self.value(b).data());
        let value = Tensor::new([batch, o, geom.out_h, geom.out_w], data)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, out_channels: o }))
    }

    /// Fractionally strided convolution with an `Cin x Cout x K x K` weight.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (batch, cin, h, wd) = nchw(self.shape(x), "conv_transpose2d")?;
        let (wcin, cout, k, k2) = nchw(self.shape(w), "conv_transpose2d weight")?;
        if wcin != cin || k != k2 {
            return Err(Error::Shape(format!("conv_transpose2d: input has {cin} channels but weight is {:?}", self.shape(w))));
        }
        if self.shape(b) != [cout] {
            return Err(Error::Shape(format!("conv_transpose2d: bias {:?} for {cout} output channels", self.shape(b))));
        }
        let geom = ConvGeometry::transposed(cout, h, wd, k, stride, padding)?;
        let mut data = vec![T::zero(); batch * geom.image_len()];
        kernels::correlate_batch_adjoint(self.value(x).data(), batch, &geom, self.value(w).data(), cin, &mut data);
        kernels::add_channel_bias(&mut data, batch, cout, self.value(b).data());
        let value = Tensor::new([batch, cout, geom.height, geom.width], data)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom, in_channels: cin }))
    }

    /// Non-overlapping `window x window` max pool. Ties go to the first
    /// element in row-major order.
    pub fn maxpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let (batch, c, h, w) = nchw(self.shape(x), "maxpool2d")?;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::Shape(format!("maxpool2d: extent {h}x{w} is not divisible by window {window}")));
        }
        let (oh, ow) = (h / window, w / window);
        let input = self.value(x).data();
        let mut out = Vec::with_capacity(batch * c * oh * ow);
        let mut argmax = Vec::with_capacity(batch * c * oh * ow);
        for plane in 0..batch * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * window * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * window + dy) * w + ox * window + dx;
                            if input[idx] > input[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(input[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new([batch, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }))
    }

    /// Batch normalization over all axes but the channel axis (axis 1).
    ///
    /// Train mode normalizes with biased batch statistics and returns the
    /// batch mean and unbiased variance; eval mode uses `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        running: (&[T], &[T]),
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("batch_norm expects N x C x ..., got {shape:?}")));
        }
        let (batch, channels) = (shape[0], shape[1]);
        let plane: usize = shape[2..].iter().product();
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::Shape(format!(
                "batch_norm: gamma {:?} / beta {:?} for {channels} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if mode == Mode::Train && batch < 2 {
            return Err(Error::InvalidArgument(format!("batch_norm in train mode needs a batch of at least 2, got {batch}")));
        }
        let input = self.value(x).data();
        let count = batch * plane;
        let mut invstd = vec![T::zero(); channels];
        let mut mean = vec![T::zero(); channels];
        let mut stats = None;
        match mode {
            Mode::Train => {
                let mut unbiased = vec![T::zero(); channels];
                for ch in 0..channels {
                    let mut sum = 0.0f64;
                    for b in 0..batch {
                        let off = (b * channels + ch) * plane;
                        sum += lane_sum(&input[off..off + plane], |v| v);
                    }
                    let mu = sum / count as f64;
                    let mut sq = 0.0f64;
                    for b in 0..batch {
                        let off = (b * channels + ch) * plane;
                        sq += lane_sum(&input[off..off + plane], |v| (v - mu) * (v - mu));
                    }
                    let var = sq / count as f64;
                    mean[ch] = T::from_f64_lossy(mu);
                    invstd[ch] = T::from_f64_lossy(1.0 / (var + eps.as_f64()).sqrt());
                    unbiased[ch] = T::from_f64_lossy(sq / (count - 1).max(1) as f64);
                }
                stats = Some(BatchStats { mean: mean.clone(), var: unbiased });
            }
            Mode::Eval => {
                let (rm, rv) = running;
                if rm.len() != channels || rv.len() != channels {
                    return Err(Error::Shape(format!(
                        "batch_norm: running stats of length {}/{} for {channels} channels",
                        rm.len(),
                        rv.len()
                    )));
                }
                mean.copy_from_slice(rm);
                for ch in 0..channels {
                    invstd[ch] = T::one() / (rv[ch] + eps).sqrt();
                }
            }
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); input.len()];
        let mut out = vec![T::zero(); input.len()];
        let planes = input.chunks(plane).zip(xhat.chunks_mut(plane).zip(out.chunks_mut(plane)));
        for (i, (xs, (hs, os))) in planes.enumerate() {
            let ch = i % channels;
            let (mu, is, ga, be) = (mean[ch], invstd[ch], g[ch], bt[ch]);
            for ((&xv, h), o) in xs.iter().zip(hs.iter_mut()).zip(os.iter_mut()) {
                *h = (xv - mu) * is;
                *o = ga * *h + be;
            }
        }
        let value = Tensor::new(shape, out)?;
        let var = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, invstd, train: mode == Mode::Train });
        Ok((var, stats))
    }

    /// Inverted dropout: train mode zeroes each element with probability `p`
    /// and scales survivors by `1/(1-p)`; eval mode (or `p == 0`) is identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability must be in [0, 1), got {p}")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(self.identity(x));
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel()).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    /// Numerically stabilized log-softmax along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!("log_softmax axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let input = self.value(x).data();
        let mut out = vec![T::zero(); input.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                // accumulate in f64 so the f32 path still normalizes to ~1e-7
                let max = (0..len).map(|j| input[at(j)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (input[at(j)].as_f64() - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[at(j)] = T::from_f64_lossy(input[at(j)].as_f64() - lse);
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::LogSoftmax { x, outer, len, inner }))
    }

    /// Concatenate along axis 1; all parts must agree on every other axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let ref_shape = self.shape(*first).to_vec();
        if ref_shape.len() < 2 {
            return Err(Error::Shape(format!("concat_channels needs rank >= 2, got {ref_shape:?}")));
        }
        let batch = ref_shape[0];
        let inner: usize = ref_shape[2..].iter().product();
        let mut with_channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != ref_shape.len() || s[0] != batch || s[2..] != ref_shape[2..] {
                return Err(Error::Shape(format!("concat_channels: {s:?} vs {ref_shape:?}")));
            }
            with_channels.push((p, s[1]));
        }
        let total: usize = with_channels.iter().map(|&(_, c)| c).sum();
        let mut data = Vec::with_capacity(batch * total * inner);
        for b in 0..batch {
            for &(p, c) in &with_channels {
                data.extend_from_slice(&self.value(p).data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = ref_shape;
        shape[1] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::ConcatChannels { parts: with_channels, inner }))
    }

    /// `-mean_b x[b, pick_b]` over the rows with a pick; exactly zero (and a
    /// constant, so no gradient) when no row has one.
    pub fn nll_mean(&mut self, x: Var, picks: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = match *shape.as_slice() {
            [r, c] => (r, c),
            _ => return Err(Error::Shape(format!("nll expects a 2-d input, got {shape:?}"))),
        };
        if picks.len() != rows {
            return Err(Error::Shape(format!("nll: {} targets for {rows} rows", picks.len())));
        }
        let mut flat = Vec::new();
        for (r, p) in picks.iter().enumerate() {
            if let Some(c) = *p {
                if c >= cols {
                    return Err(Error::InvalidArgument(format!("class index {c} out of range for {cols} classes")));
                }
                flat.push(r * cols + c);
            }
        }
        if flat.is_empty() {
            return Ok(self.leaf(Tensor::scalar(T::zero())));
        }
        let count = flat.len();
        let data = self.value(x).data();
        let total: T = flat.iter().map(|&i| data[i]).sum();
        let value = Tensor::scalar(-total / T::from_usize(count).unwrap_or_else(T::one));
        Ok(self.push(value, Op::PickMean { x, picks: flat, count }))
    }

    /// `(1/B) Σ |x|` where `B` is the leading extent.
    pub fn abs_sum_mean(&mut self, x: Var) -> Var {
        let batch = T::from_usize(self.shape(x)[0]).unwrap_or_else(T::one);
        let total: T = self.value(x).data().iter().map(|v| v.abs()).sum();
        self.push(Tensor::scalar(total / batch), Op::AbsSumMean(x))
    }

    /// Gradients of a scalar `loss` with respect to `wrt`.
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        self.backward_seeded(&[(loss, Tensor::ones(self.shape(loss).to_vec()))], wrt)
    }

    /// Vector-Jacobian products seeded with cotangents on arbitrary nodes.
    ///
    /// Each `wrt` node receives `Σ_seeds ∂⟨seed, node_value⟩/∂wrt`. Nodes that
    /// do not connect a `wrt` node to a seed are never visited. The tape is not
    /// modified, so repeated calls return bit-identical results.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor<T>)], wrt: &[Var]) -> Result<Gradients<T>> {
        let n = self.nodes.len();
        let mut from_wrt = vec![false; n];
        for v in wrt {
            from_wrt[v.0] = true;
        }
        for i in 0..n {
            if !from_wrt[i] && self.nodes[i].op.inputs().iter().any(|v| from_wrt[v.0]) {
                from_wrt[i] = true;
            }
        }
        let mut active = vec![false; n];
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        for (v, g) in seeds {
            ensure_same_shape(self.shape(*v), g.shape())?;
            if from_wrt[v.0] {
                active[v.0] = true;
                accumulate(&mut grads[v.0], g.clone());
            }
        }
        for i in (0..n).rev() {
            if active[i] {
                for v in self.nodes[i].op.inputs() {
                    if from_wrt[v.0] {
                        active[v.0] = true;
                    }
                }
            }
        }
        let mut keep = vec![false; n];
        for v in wrt {
            keep[v.0] = true;
        }
        for i in (0..n).rev() {
            if !active[i] {
                continue;
            }
            let Some(g) = (if keep[i] { grads[i].clone() } else { grads[i].take() }) else {
                continue;
            };
            for (v, gi) in self.vjp(i, &g, &active)? {
                accumulate(&mut grads[v.0], gi);
            }
        }
        let mut out = HashMap::with_capacity(wrt.len());
        for &v in wrt {
            let g = grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()));
            out.insert(v, g);
        }
        Ok(Gradients { grads: out })
    }

    fn vjp(&self, i: usize, g: &Tensor<T>, active: &[bool]) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let need = |v: Var| active[v.0];
        let like = |v: Var, data: Vec<T>| Tensor::new(self.shape(v).to_vec(), data);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Identity(x) => out.push((*x, g.clone())),
            Op::Reshape(x) => out.push((*x, g.clone().reshape(self.shape(*x).to_vec())?)),
            Op::Add(a, b) => {
                if need(*a) {
                    out.push((*a, g.clone()));
                }
                if need(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    let d = g.data().iter().zip(self.value(*b).data()).map(|(&gv, &bv)| gv * bv).collect();
                    out.push((*a, like(*a, d)?));
                }
                if need(*b) {
                    let d = g.data().iter().zip(self.value(*a).data()).map(|(&gv, &av)| gv * av).collect();
                    out.push((*b, like(*b, d)?));
                }
            }
            Op::Scale(x, f) => out.push((*x, g.map(|v| v * *f))),
            Op::Sum(x) => out.push((*x, Tensor::full(self.shape(*x).to_vec(), g.data()[0]))),
            Op::Relu(x) => {
                let d = g.data().iter().zip(node.value.data()).map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() }).collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Sigmoid(x) => {
                let d = g.data().iter().zip(node.value.data()).map(|(&gv, &s)| gv * s * (T::one() - s)).collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Linear { x, w, b } => {
                let (batch, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let outf = self.shape(*w)[0];
                if need(*x) {
                    let mut d = vec![T::zero(); batch * inp];
                    T::gemm(batch, outf, inp, T::one(), g.data(), (outf, 1), self.value(*w).data(), (inp, 1), T::zero(), &mut d, (inp, 1));
                    out.push((*x, like(*x, d)?));
                }
                if need(*w) {
                    let mut d = vec![T::zero(); outf * inp];
                    T::gemm(outf, batch, inp, T::one(), g.data(), (1, outf), self.value(*x).data(), (inp, 1), T::zero(), &mut d, (inp, 1));
                    out.push((*w, like(*w, d)?));
                }
                if need(*b) {
                    let mut d = vec![T::zero(); outf];
                    for row in g.data().chunks(outf) {
                        d.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                    }
                    out.push((*b, like(*b, d)?));
                }
            }
            Op::Conv2d { x, w, b, geom, out_channels } => {
                let batch = self.shape(*x)[0];
                if need(*x) {
                    let mut d = vec![T::zero(); self.value(*x).numel()];
                    kernels::correlate_batch_adjoint(g.data(), batch, geom, self.value(*w).data(), *out_channels, &mut d);
                    out.push((*x, like(*x, d)?));
                }
                if need(*w) {
                    let mut d = vec![T::zero(); self.value(*w).numel()];
                    kernels::correlate_batch_weight_grad(self.value(*x).data(), g.data(), batch, geom, *out_channels, &mut d);
                    out.push((*w, like(*w, d)?));
                }
                if need(*b) {
                    out.push((*b, like(*b, kernels::channel_sums(g.data(), batch, *out_channels))?));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, in_channels } => {
                let batch = self.shape(*x)[0];
                if need(*x) {
                    let mut d = vec![T::zero(); self.value(*x).numel()];
                    kernels::correlate_batch(g.data(), batch, geom, self.value(*w).data(), *in_channels, &mut d);
                    out.push((*x, like(*x, d)?));
                }
                if need(*w) {
                    let mut d = vec![T::zero(); self.value(*w).numel()];
                    kernels::correlate_batch_weight_grad(g.data(), self.value(*x).data(), batch, geom, *in_channels, &mut d);
                    out.push((*w, like(*w, d)?));
                }
                if need(*b) {
                    out.push((*b, like(*b, kernels::channel_sums(g.data(), batch, geom.channels))?));
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                out.push((*x, like(*x, d)?));
            }
            Op::BatchNorm { x, gamma, beta, xhat, invstd, train } => {
                let shape = self.shape(*x);
                let (batch, channels) = (shape[0], shape[1]);
                let plane = self.value(*x).numel() / (batch * channels);
                let mut sum_g = vec![T::zero(); channels];
                let mut sum_gx = vec![T::zero(); channels];
                for (i, (gs, hs)) in g.data().chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                    let ch = i % channels;
                    let (mut a, mut b) = (T::zero(), T::zero());
                    for (&gv, &h) in gs.iter().zip(hs) {
                        a += gv;
                        b += gv * h;
                    }
                    sum_g[ch] += a;
                    sum_gx[ch] += b;
                }
                if need(*x) {
                    let gam = self.value(*gamma).data();
                    let m = T::from_usize(batch * plane).unwrap_or_else(T::one);
                    let mut d = vec![T::zero(); g.data().len()];
                    let planes = d.chunks_mut(plane).zip(g.data().chunks(plane).zip(xhat.chunks(plane)));
                    for (i, (ds, (gs, hs))) in planes.enumerate() {
                        let ch = i % channels;
                        let scale = gam[ch] * invstd[ch];
                        if *train {
                            let (mg, mgx) = (sum_g[ch] / m, sum_gx[ch] / m);
                            for ((dv, &gv), &h) in ds.iter_mut().zip(gs).zip(hs) {
                                *dv = scale * (gv - mg - h * mgx);
                            }
                        } else {
                            for (dv, &gv) in ds.iter_mut().zip(gs) {
                                *dv = scale * gv;
                            }
                        }
                    }
                    out.push((*x, like(*x, d)?));
                }
                if need(*gamma) {
                    out.push((*gamma, like(*gamma, sum_gx)?));
                }
                if need(*beta) {
                    out.push((*beta, like(*beta, sum_g)?));
                }
            }
            Op::Dropout { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                out.push((*x, like(*x, d)?));
            }
            Op::LogSoftmax { x, outer, len, inner } => {
                let y = node.value.data();
                let gd = g.data();
                let mut d = vec![T::zero(); gd.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let gsum: T = (0..*len).map(|j| gd[at(j)]).sum();
                        for j in 0..*len {
                            d[at(j)] = gd[at(j)] - y[at(j)].exp() * gsum;
                        }
                    }
                }
                out.push((*x, like(*x, d)?));
            }
            Op::ConcatChannels { parts, inner } => {
                let batch = node.value.shape()[0];
                let total: usize = parts.iter().map(|&(_, c)| c).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    if need(p) {
                        let mut d = Vec::with_capacity(batch * c * inner);
                        for b in 0..batch {
                            let start = (b * total + offset) * inner;
                            d.extend_from_slice(&g.data()[start..start + c * inner]);
                        }
                        out.push((p, like(p, d)?));
                    }
                    offset += c;
                }
            }
            Op::PickMean { x, picks, count } => {
                let mut d = vec![T::zero(); self.value(*x).numel()];
                let step = -g.data()[0] / T::from_usize(*count).unwrap_or_else(T::one);
                for &p in picks {
                    d[p] += step;
                }
                out.push((*x, like(*x, d)?));
            }
            Op::AbsSumMean(x) => {
                let batch = T::from_usize(self.shape(*x)[0]).unwrap_or_else(T::one);
                let step = g.data()[0] / batch;
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .map(|&v| {
                        if v > T::zero() {
                            step
                        } else if v < T::zero() {
                            -step
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                out.push((*x, like(*x, d)?));
            }
        }
        Ok(out)
    }
}

/// Sum of `f(x)` in f64 over eight independent accumulators.
fn lane_sum<T: Scalar>(xs: &[T], f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += f(v.as_f64());
        }
    }
    let tail: f64 = chunks.remainder().iter().map(|v| f(v.as_f64())).sum();
    acc.iter().sum::<f64>() + tail
}
