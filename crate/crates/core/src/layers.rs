//! Layer plans, parameter initialization, and parameter partitions.
//!
//! A [`Network`] is a list of [`LayerSpec`]s plus the non-trainable batch-norm
//! running statistics. Trainable tensors live outside the network in a
//! [`ParameterPartition`] so that several networks (an advocate's own encoder
//! and decoder, say) can be grouped under one optimizer partition.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{BatchStats, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const JUDGE_HIDDEN: usize = 512;
pub const JUDGE_DROPOUT: f64 = 0.2;
pub const MAX_ADVOCATE_BLOCKS: usize = 3;
pub const MAX_JUDGE_BLOCKS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Deconv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Sigmoid,
    MaxPool {
        window: usize,
    },
    Dropout {
        p: f64,
    },
    Flatten,
    LogSoftmax,
    /// `relu(x + bn(conv(relu(bn(conv(x))))))` with 3x3, padding-1 convolutions.
    Residual {
        channels: usize,
    },
}

impl LayerSpec {
    fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv { in_channels, out_channels, kernel, stride, padding }
    }

    fn deconv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Deconv { in_channels, out_channels, kernel, stride, padding }
    }

    /// Trainable tensor shapes with their fan-in (`None` for batch-norm affine terms).
    fn param_layout(&self) -> Vec<(&'static str, Vec<usize>, Option<usize>)> {
        match *self {
            LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                let fan_in = in_channels * kernel * kernel;
                vec![("weight", vec![out_channels, in_channels, kernel, kernel], Some(fan_in)), ("bias", vec![out_channels], Some(fan_in))]
            }
            LayerSpec::Deconv { in_channels, out_channels, kernel, .. } => {
                // fan-in of a transposed conv weight (in, out, k, k) is out*k*k
                let fan_in = out_channels * kernel * kernel;
                vec![("weight", vec![in_channels, out_channels, kernel, kernel], Some(fan_in)), ("bias", vec![out_channels], Some(fan_in))]
            }
            LayerSpec::Linear { in_features, out_features } => {
                vec![("weight", vec![out_features, in_features], Some(in_features)), ("bias", vec![out_features], Some(in_features))]
            }
            LayerSpec::BatchNorm { channels } => {
                vec![("gamma", vec![channels], None), ("beta", vec![channels], None)]
            }
            LayerSpec::Residual { channels } => {
                let conv = LayerSpec::conv(channels, channels, 3, 1, 1).param_layout();
                let bn = LayerSpec::BatchNorm { channels }.param_layout();
                conv.iter().chain(&bn).chain(&conv).chain(&bn).cloned().collect()
            }
            _ => vec![],
        }
    }

    fn batch_norm_channels(&self) -> Vec<usize> {
        match *self {
            LayerSpec::BatchNorm { channels } => vec![channels],
            LayerSpec::Residual { channels } => vec![channels, channels],
            _ => vec![],
        }
    }

    /// Output shape (without batch axis) for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(Error::Shape(format!("{what} expects C x H x W input, got {input:?}"))),
            }
        };
        let check_channels = |have: usize, want: usize, what: &str| {
            if have == want {
                Ok(())
            } else {
                Err(Error::Shape(format!("{what} expects {want} input channels, got {have}")))
            }
        };
        match *self {
            LayerSpec::Conv { in_channels, out_channels, kernel, stride, padding } => {
                let (c, h, w) = spatial("conv")?;
                check_channels(c, in_channels, "conv")?;
                let g = crate::autodiff::kernels::ConvGeometry::conv(c, h, w, kernel, stride, padding)?;
                Ok(vec![out_channels, g.out_h, g.out_w])
            }
            LayerSpec::Deconv { in_channels, out_channels, kernel, stride, padding } => {
                let (c, h, w) = spatial("deconv")?;
                check_channels(c, in_channels, "deconv")?;
                let g = crate::autodiff::kernels::ConvGeometry::transposed(out_channels, h, w, kernel, stride, padding)?;
                Ok(vec![out_channels, g.height, g.width])
            }
            LayerSpec::Linear { in_features, out_features } => match *input {
                [f] if f == in_features => Ok(vec![out_features]),
                _ => Err(Error::Shape(format!("linear expects [{in_features}], got {input:?}"))),
            },
            LayerSpec::BatchNorm { channels } | LayerSpec::Residual { channels } => {
                check_channels(input.first().copied().unwrap_or(0), channels, "batch norm")?;
                Ok(input.to_vec())
            }
            LayerSpec::MaxPool { window } => {
                let (c, h, w) = spatial("max pool")?;
                if window == 0 || h % window != 0 || w % window != 0 {
                    return Err(Error::Shape(format!("max pool window {window} does not divide {h}x{w}")));
                }
                Ok(vec![c, h / window, w / window])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Dropout { .. } | LayerSpec::LogSoftmax => Ok(input.to_vec()),
        }
    }
}

/// Output shape of a whole plan, validating every layer.
pub fn infer_shape(plan: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>> {
    plan.iter().try_fold(input.to_vec(), |shape, layer| layer.output_shape(&shape))
}

/// I.i.d. uniform on `[-1/√fan_in, 1/√fan_in]`.
pub fn init_fanin_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::InvalidArgument("fan_in must be at least 1".into()));
    }
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound))).collect())
}

fn check_stage_extent(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % 4 != 0 || width % 4 != 0 {
        return Err(Error::Shape(format!("input extent {height}x{width} must be divisible by 4 (two 2x2 pools)")));
    }
    Ok(())
}

fn conv_bn_relu(plan: &mut Vec<LayerSpec>, cin: usize, cout: usize) {
    plan.push(LayerSpec::conv(cin, cout, 3, 1, 1));
    plan.push(LayerSpec::BatchNorm { channels: cout });
    plan.push(LayerSpec::Relu);
}

/// The two-stage convolutional feature stack shared by the advocate encoder
/// and the judge: `in → 32×H/4×W/4`. `blocks == 0` is the plain four-conv
/// plan; `blocks > 0` places that many residual blocks in each stage.
fn feature_stack(in_channels: usize, blocks: usize) -> Vec<LayerSpec> {
    let mut plan = Vec::new();
    if blocks == 0 {
        conv_bn_relu(&mut plan, in_channels, 32);
        conv_bn_relu(&mut plan, 32, 64);
        plan.push(LayerSpec::MaxPool { window: 2 });
        conv_bn_relu(&mut plan, 64, 64);
        conv_bn_relu(&mut plan, 64, 32);
        plan.push(LayerSpec::MaxPool { window: 2 });
    } else {
        conv_bn_relu(&mut plan, in_channels, 32);
        plan.extend((0..blocks).map(|_| LayerSpec::Residual { channels: 32 }));
        plan.push(LayerSpec::MaxPool { window: 2 });
        conv_bn_relu(&mut plan, 32, 64);
        plan.extend((0..blocks).map(|_| LayerSpec::Residual { channels: 64 }));
        conv_bn_relu(&mut plan, 64, 32);
        plan.push(LayerSpec::MaxPool { window: 2 });
    }
    plan
}

/// Advocate encoder: `in_channels×H×W → 32×H/4×W/4`.
pub fn build_advocate_encoder(in_channels: usize, height: usize, width: usize, blocks: usize) -> Result<Vec<LayerSpec>> {
    check_stage_extent(height, width)?;
    if blocks > MAX_ADVOCATE_BLOCKS {
        return Err(Error::InvalidArgument(format!("advocate residual blocks must be in 0..={MAX_ADVOCATE_BLOCKS}, got {blocks}")));
    }
    let plan = feature_stack(in_channels, blocks);
    infer_shape(&plan, &[in_channels, height, width])?;
    Ok(plan)
}

/// Advocate decoder: `32×H/4×W/4 → out_channels×H×W` attention in (0, 1).
pub fn build_advocate_decoder(out_channels: usize, height: usize, width: usize) -> Result<Vec<LayerSpec>> {
    check_stage_extent(height, width)?;
    let mut plan = Vec::new();
    for (cin, cout, k, s, p) in [(32, 32, 3, 1, 1), (32, 16, 2, 2, 0), (16, 8, 2, 2, 0), (8, 4, 5, 1, 2)] {
        plan.push(LayerSpec::deconv(cin, cout, k, s, p));
        plan.push(LayerSpec::BatchNorm { channels: cout });
        plan.push(LayerSpec::Relu);
    }
    plan.push(LayerSpec::conv(4, 2, 3, 1, 1));
    plan.push(LayerSpec::BatchNorm { channels: 2 });
    plan.push(LayerSpec::conv(2, out_channels, 1, 1, 0));
    plan.push(LayerSpec::Sigmoid);
    let out = infer_shape(&plan, &[32, height / 4, width / 4])?;
    if out != [out_channels, height, width] {
        return Err(Error::Shape(format!("decoder produces {out:?}, cannot restore {out_channels}x{height}x{width}")));
    }
    Ok(plan)
}

/// Judge: `evidence_channels×H×W → log-probabilities over num_classes`.
pub fn build_judge(num_classes: usize, evidence_channels: usize, height: usize, width: usize, blocks: usize) -> Result<Vec<LayerSpec>> {
    check_stage_extent(height, width)?;
    if blocks > MAX_JUDGE_BLOCKS {
        return Err(Error::InvalidArgument(format!("judge residual blocks must be in 0..={MAX_JUDGE_BLOCKS}, got {blocks}")));
    }
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {num_classes}")));
    }
    let mut plan = feature_stack(evidence_channels, blocks);
    plan.push(LayerSpec::Flatten);
    plan.push(LayerSpec::Linear { in_features: 32 * (height / 4) * (width / 4), out_features: JUDGE_HIDDEN });
    plan.push(LayerSpec::BatchNorm { channels: JUDGE_HIDDEN });
    plan.push(LayerSpec::Relu);
    plan.push(LayerSpec::Dropout { p: JUDGE_DROPOUT });
    plan.push(LayerSpec::Linear { in_features: JUDGE_HIDDEN, out_features: num_classes });
    plan.push(LayerSpec::LogSoftmax);
    infer_shape(&plan, &[evidence_channels, height, width])?;
    Ok(plan)
}

/// Running mean / variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

/// A validated layer plan and its batch-norm buffers.
#[derive(Clone, Debug)]
pub struct Network<T> {
    plan: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    running: Vec<RunningStats<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn new(plan: Vec<LayerSpec>, input_shape: &[usize]) -> Result<Self> {
        let output_shape = infer_shape(&plan, input_shape)?;
        let running = plan.iter().flat_map(LayerSpec::batch_norm_channels).map(RunningStats::new).collect();
        Ok(Self { plan, input_shape: input_shape.to_vec(), output_shape, running })
    }

    pub fn plan(&self) -> &[LayerSpec] {
        &self.plan
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }

    /// `(name, shape)` of every trainable tensor, in the order `forward` consumes them.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        self.plan
            .iter()
            .enumerate()
            .flat_map(|(i, layer)| {
                layer.param_layout().into_iter().enumerate().map(move |(j, (name, shape, _))| {
                    let name =
                        if matches!(layer, LayerSpec::Residual { .. }) { format!("{i}.{}.{name}", j / 2) } else { format!("{i}.{name}") };
                    (name, shape)
                })
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Fresh parameters: fan-in uniform weights and biases, unit gamma, zero beta.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<(String, Tensor<T>)>> {
        let names = self.param_specs();
        let mut out = Vec::with_capacity(names.len());
        let layouts = self.plan.iter().flat_map(LayerSpec::param_layout);
        for ((name, _), (kind, shape, fan_in)) in names.into_iter().zip(layouts) {
            let t = match (fan_in, kind) {
                (Some(f), _) => init_fanin_uniform(&shape, f, rng)?,
                (None, "gamma") => Tensor::ones(shape),
                (None, _) => Tensor::zeros(shape),
            };
            out.push((name, t));
        }
        Ok(out)
    }

    /// Run the plan on a batch. `params` must follow [`Network::param_specs`].
    ///
    /// In train mode the batch statistics of every batch-norm layer are
    /// returned in layer order; pass them to [`Network::update_running`] to
    /// fold them into the running estimates.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        params: &[Var],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Vec<BatchStats<T>>)> {
        let expected = self.param_specs().len();
        if params.len() != expected {
            return Err(Error::InvalidArgument(format!("network takes {expected} parameter tensors, got {}", params.len())));
        }
        let in_shape = &tape.shape(x)[1..];
        if in_shape != self.input_shape.as_slice() {
            return Err(Error::Shape(format!("network expects per-example input {:?}, got {in_shape:?}", self.input_shape)));
        }
        let mut params = params.iter().copied();
        let mut next = || params.next().expect("parameter count checked above");
        let mut stats = Vec::new();
        let mut bn_index = 0;
        let mut h = x;
        for layer in &self.plan {
            h = match *layer {
                LayerSpec::Conv { stride, padding, .. } => {
                    let (w, b) = (next(), next());
                    tape.conv2d(h, w, b, stride, padding)?
                }
                LayerSpec::Deconv { stride, padding, .. } => {
                    let (w, b) = (next(), next());
                    tape.conv_transpose2d(h, w, b, stride, padding)?
                }
                LayerSpec::Linear { .. } => {
                    let (w, b) = (next(), next());
                    tape.linear(h, w, b)?
                }
                LayerSpec::BatchNorm { .. } => {
                    let (g, b) = (next(), next());
                    let out = batch_norm(tape, h, g, b, mode, &self.running[bn_index], &mut stats)?;
                    bn_index += 1;
                    out
                }
                LayerSpec::Residual { .. } => {
                    let (w1, b1, g1, be1) = (next(), next(), next(), next());
                    let (w2, b2, g2, be2) = (next(), next(), next(), next());
                    let y = tape.conv2d(h, w1, b1, 1, 1)?;
                    let y = batch_norm(tape, y, g1, be1, mode, &self.running[bn_index], &mut stats)?;
                    let y = tape.relu(y);
                    let y = tape.conv2d(y, w2, b2, 1, 1)?;
                    let y = batch_norm(tape, y, g2, be2, mode, &self.running[bn_index + 1], &mut stats)?;
                    bn_index += 2;
                    let y = tape.add(y, h)?;
                    tape.relu(y)
                }
                LayerSpec::Relu => tape.relu(h),
                LayerSpec::Sigmoid => tape.sigmoid(h),
                LayerSpec::MaxPool { window } => tape.maxpool2d(h, window)?,
                LayerSpec::Dropout { p } => tape.dropout(h, p, mode, rng)?,
                LayerSpec::Flatten => tape.flatten(h)?,
                LayerSpec::LogSoftmax => tape.log_softmax(h, 1)?,
            };
        }
        Ok((h, stats))
    }

    /// `running ← (1 - momentum)·running + momentum·batch` for every layer.
    pub fn update_running(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        if stats.len() != self.running.len() {
            return Err(Error::InvalidArgument(format!("{} batch statistics for {} batch-norm layers", stats.len(), self.running.len())));
        }
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let keep = T::one() - m;
        for (running, batch) in self.running.iter_mut().zip(stats) {
            for (r, b) in running.mean.iter_mut().zip(&batch.mean) {
                *r = keep * *r + m * *b;
            }
            for (r, b) in running.var.iter_mut().zip(&batch.var) {
                *r = keep * *r + m * *b;
            }
        }
        Ok(())
    }
}

fn batch_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    mode: Mode,
    running: &RunningStats<T>,
    collected: &mut Vec<BatchStats<T>>,
) -> Result<Var> {
    let eps = T::from_f64_lossy(BN_EPS);
    let (y, stats) = tape.batch_norm(x, gamma, beta, mode, (&running.mean, &running.var), eps)?;
    collected.extend(stats);
    Ok(y)
}

/// Identity of an optimizer partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PartitionName {
    Judge,
    /// Advocate for the given 1-based class.
    Advocate(usize),
    SharedEncoder,
}

impl fmt::Display for PartitionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionName::Judge => write!(f, "judge"),
            PartitionName::Advocate(i) => write!(f, "advocate_{i}"),
            PartitionName::SharedEncoder => write!(f, "shared_encoder"),
        }
    }
}

impl FromStr for PartitionName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "judge" => Ok(PartitionName::Judge),
            "shared_encoder" => Ok(PartitionName::SharedEncoder),
            _ => s
                .strip_prefix("advocate_")
                .and_then(|i| i.parse().ok())
                .filter(|&i| i >= 1)
                .map(PartitionName::Advocate)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown partition `{s}`"))),
        }
    }
}

/// A named group of trainable tensors that the optimizer steps together.
#[derive(Clone, Debug)]
pub struct ParameterPartition<T> {
    pub name: PartitionName,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
    pub frozen: bool,
}

impl<T: Scalar> ParameterPartition<T> {
    pub fn new(name: PartitionName, named: Vec<(String, Tensor<T>)>) -> Self {
        let (names, tensors) = named.into_iter().unzip();
        Self { name, names, tensors, frozen: false }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Register every tensor on the tape as a leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }
}
