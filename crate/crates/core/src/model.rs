//! The four model variants and their forward passes.
//!
//! Every variant is an ensemble of attention modules (encoder → decoder →
//! sigmoid) feeding a judge. Each module's map `a^i` masks the input into
//! evidence `e_i = a^i ⊙ x`; the evidence is stacked in ascending class order
//! and the judge emits log-probabilities over the classes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Mode, Tape, Var};
use crate::class::Class;
use crate::error::{Error, Result};
use crate::layers::{
    build_advocate_decoder, build_advocate_encoder, build_judge, Network, ParameterPartition, PartitionName, MAX_ADVOCATE_BLOCKS,
    MAX_JUDGE_BLOCKS,
};
use crate::optim::AdamState;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Advocacy,
    HonestAdvocacy,
    MultiAttention,
    Attention,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Advocacy, Variant::HonestAdvocacy, Variant::MultiAttention, Variant::Attention];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Advocacy => "advocacy",
            Variant::HonestAdvocacy => "honest_advocacy",
            Variant::MultiAttention => "multi_attention",
            Variant::Attention => "attention",
        }
    }

    /// Trained with interleaved per-partition advocacy updates.
    pub fn is_advocacy(self) -> bool {
        matches!(self, Variant::Advocacy | Variant::HonestAdvocacy)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub shared_encoder: bool,
    /// Residual blocks per judge stage; 0 selects the plain conv plan.
    pub judge_blocks: usize,
    /// Residual blocks per advocate encoder stage; 0 selects the plain conv plan.
    pub advocate_blocks: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, num_classes: usize, channels: usize, height: usize, width: usize) -> Self {
        Self { variant, num_classes, channels, height, width, shared_encoder: true, judge_blocks: 0, advocate_blocks: 0 }
    }

    /// Number of attention modules: 1 for the single-attention baseline, N otherwise.
    pub fn num_modules(&self) -> usize {
        if self.variant == Variant::Attention {
            1
        } else {
            self.num_classes
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", format!("need at least 2, got {}", self.num_classes)));
        }
        if self.channels == 0 {
            return Err(Error::config("model.channels", "must be positive"));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("model.extent", format!("{}x{} must be positive and divisible by 4", self.height, self.width)));
        }
        if self.judge_blocks > MAX_JUDGE_BLOCKS {
            return Err(Error::config("model.judge_blocks", format!("must be in 0..={MAX_JUDGE_BLOCKS}")));
        }
        if self.advocate_blocks > MAX_ADVOCATE_BLOCKS {
            return Err(Error::config("model.advocate_blocks", format!("must be in 0..={MAX_ADVOCATE_BLOCKS}")));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Tensors produced by one forward pass over a batch.
#[derive(Clone, Debug)]
pub struct ForwardResult<T> {
    /// `a^i`, one per module, each `B×C×H×W`.
    pub attention: Vec<Tensor<T>>,
    /// `e_i = a^i ⊙ x`, one per module.
    pub evidence: Vec<Tensor<T>>,
    /// `E`, the evidence stacked along channels (`B×(M·C)×H×W`).
    pub stacked: Tensor<T>,
    /// `log ŷ`, `B×N`.
    pub log_probs: Tensor<T>,
}

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardGraph {
    /// Shared encoder output `h` (shared-encoder models only).
    pub shared_features: Option<Var>,
    /// Per-module decoder input; an identity branch of `h` when the encoder is shared.
    pub branches: Vec<Var>,
    pub attention: Vec<Var>,
    pub evidence: Vec<Var>,
    pub stacked: Var,
    pub log_probs: Var,
}

/// Batch statistics gathered by a train-mode forward.
#[derive(Clone, Debug)]
pub struct RunningUpdates<T> {
    judge: Vec<BatchStats<T>>,
    encoders: Vec<Vec<BatchStats<T>>>,
    decoders: Vec<Vec<BatchStats<T>>>,
}

/// An attention-ensemble classifier in one of the four variants.
///
/// Partitions are ordered `[judge, advocate_1, …, advocate_M, shared_encoder?]`.
/// An advocate partition holds its own encoder (when not shared) followed by
/// its decoder.
#[derive(Clone, Debug)]
pub struct AdvocacyModel<T> {
    pub(crate) config: ModelConfig,
    pub(crate) judge: Network<T>,
    pub(crate) encoders: Vec<Network<T>>,
    pub(crate) decoders: Vec<Network<T>>,
    pub(crate) partitions: Vec<ParameterPartition<T>>,
    pub(crate) adam: Vec<AdamState<T>>,
    pub(crate) mode: Mode,
    pub(crate) dropout_rng: ChaCha8Rng,
}

impl<T: Scalar> AdvocacyModel<T> {
    /// Build and initialize. Initialization draws only from `init_rng` and is
    /// identical for variants with equal architecture.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, init_rng: &mut R, dropout_rng: ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (c, h, w) = (config.channels, config.height, config.width);
        let modules = config.num_modules();
        let judge = Network::new(build_judge(config.num_classes, modules * c, h, w, config.judge_blocks)?, &[modules * c, h, w])?;
        let encoder = Network::new(build_advocate_encoder(c, h, w, config.advocate_blocks)?, &[c, h, w])?;
        let decoder = Network::new(build_advocate_decoder(c, h, w)?, encoder.output_shape())?;
        let encoders = vec![encoder; if config.shared_encoder { 1 } else { modules }];
        let decoders = vec![decoder; modules];

        let mut partitions = vec![ParameterPartition::new(PartitionName::Judge, judge.init_params(init_rng)?)];
        for i in 0..modules {
            let mut named = Vec::new();
            if !config.shared_encoder {
                named.extend(prefixed("encoder", encoders[i].init_params(init_rng)?));
            }
            named.extend(prefixed("decoder", decoders[i].init_params(init_rng)?));
            partitions.push(ParameterPartition::new(PartitionName::Advocate(i + 1), named));
        }
        if config.shared_encoder {
            partitions.push(ParameterPartition::new(PartitionName::SharedEncoder, encoders[0].init_params(init_rng)?));
        }
        let adam = partitions.iter().map(AdamState::new).collect();
        Ok(Self { config, judge, encoders, decoders, partitions, adam, mode: Mode::Train, dropout_rng })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn num_modules(&self) -> usize {
        self.config.num_modules()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn partitions(&self) -> &[ParameterPartition<T>] {
        &self.partitions
    }

    pub fn adam_states(&self) -> &[AdamState<T>] {
        &self.adam
    }

    pub fn partition_index(&self, name: PartitionName) -> Result<usize> {
        self.partitions
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("model has no partition `{name}`")))
    }

    pub fn partition(&self, name: PartitionName) -> Result<&ParameterPartition<T>> {
        Ok(&self.partitions[self.partition_index(name)?])
    }

    pub fn set_frozen(&mut self, name: PartitionName, frozen: bool) -> Result<()> {
        let i = self.partition_index(name)?;
        self.partitions[i].frozen = frozen;
        Ok(())
    }

    /// Adam step counter `t` of every partition.
    pub fn partition_step_counters(&self) -> BTreeMap<PartitionName, u64> {
        self.partitions.iter().zip(&self.adam).map(|(p, s)| (p.name, s.t)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.partitions.iter().map(ParameterPartition::numel).sum()
    }

    /// Register every partition tensor on `tape`, indexed like [`AdvocacyModel::partitions`].
    pub fn register_params(&self, tape: &mut Tape<T>) -> Vec<Vec<Var>> {
        self.partitions.iter().map(|p| p.register(tape)).collect()
    }

    /// Record the forward pass on `tape` using the parameter leaves `params`
    /// (shaped like [`AdvocacyModel::register_params`]). Attention modules run
    /// in `mode` and the judge in `judge_mode`. Train-mode networks report
    /// their batch-norm statistics, to be folded in with
    /// [`AdvocacyModel::apply_running`].
    pub fn forward_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        params: &[Vec<Var>],
        mode: Mode,
        judge_mode: Mode,
        rng: &mut R,
    ) -> Result<(ForwardGraph, RunningUpdates<T>)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != self.config.input_shape() {
            return Err(Error::Shape(format!("model expects a B x {:?} batch, got {shape:?}", self.config.input_shape())));
        }
        let modules = self.num_modules();
        let expected: Vec<usize> = self.partitions.iter().map(ParameterPartition::len).collect();
        let got: Vec<usize> = params.iter().map(Vec::len).collect();
        if expected != got {
            return Err(Error::InvalidArgument(format!("parameter leaves per partition {got:?} do not match the model's {expected:?}")));
        }
        let mut updates = RunningUpdates { judge: vec![], encoders: vec![], decoders: vec![] };

        let mut shared_features = None;
        let mut branches = Vec::with_capacity(modules);
        if self.config.shared_encoder {
            let (h, stats) = self.encoders[0].forward(tape, x, &params[modules + 1], mode, rng)?;
            updates.encoders.push(stats);
            shared_features = Some(h);
            for _ in 0..modules {
                branches.push(tape.identity(h));
            }
        } else {
            for i in 0..modules {
                let n = self.encoders[i].param_specs().len();
                let (h, stats) = self.encoders[i].forward(tape, x, &params[i + 1][..n], mode, rng)?;
                updates.encoders.push(stats);
                branches.push(h);
            }
        }

        let mut attention = Vec::with_capacity(modules);
        let mut evidence = Vec::with_capacity(modules);
        for i in 0..modules {
            let own = &params[i + 1];
            let dec = &own[own.len() - self.decoders[i].param_specs().len()..];
            let (a, stats) = self.decoders[i].forward(tape, branches[i], dec, mode, rng)?;
            updates.decoders.push(stats);
            evidence.push(tape.mul(a, x)?);
            attention.push(a);
        }
        let stacked = tape.concat_channels(&evidence)?;
        let (log_probs, stats) = self.judge.forward(tape, stacked, &params[0], judge_mode, rng)?;
        updates.judge = stats;
        let graph = ForwardGraph { shared_features, branches, attention, evidence, stacked, log_probs };
        Ok((graph, updates))
    }

    pub fn apply_running(&mut self, updates: &RunningUpdates<T>) -> Result<()> {
        let nets = std::iter::once(&mut self.judge).chain(&mut self.encoders).chain(&mut self.decoders);
        let stats = std::iter::once(&updates.judge).chain(&updates.encoders).chain(&updates.decoders);
        for (net, stats) in nets.zip(stats) {
            if !stats.is_empty() {
                net.update_running(stats)?;
            }
        }
        Ok(())
    }

    /// Forward `x` (`B×C×H×W`) in the current mode. Running statistics are not
    /// updated; dropout masks come from a copy of the model's dropout stream.
    pub fn full_forward(&self, x: &Tensor<T>) -> Result<ForwardResult<T>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let mut rng = self.dropout_rng.clone();
        let params = self.register_params(&mut tape);
        let (g, _) = self.forward_on_tape(&mut tape, xv, &params, self.mode, self.mode, &mut rng)?;
        let values = |vars: &[Var]| vars.iter().map(|&v| tape.value(v).clone()).collect();
        Ok(ForwardResult {
            attention: values(&g.attention),
            evidence: values(&g.evidence),
            stacked: tape.value(g.stacked).clone(),
            log_probs: tape.value(g.log_probs).clone(),
        })
    }

    /// `(a^i, e_i)` for module `i` (1-based) in the current mode.
    pub fn advocate_forward(&self, x: &Tensor<T>, i: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let modules = self.num_modules();
        if i == 0 || i > modules {
            return Err(Error::InvalidArgument(format!("advocate index {i} out of range 1..={modules}")));
        }
        if x.ndim() != 4 || x.shape()[1..] != self.config.input_shape() {
            return Err(Error::Shape(format!("model expects a B x {:?} batch, got {:?}", self.config.input_shape(), x.shape())));
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let own = self.partitions[i].register(&mut tape);
        let mut rng = self.dropout_rng.clone();
        let h = if self.config.shared_encoder {
            let enc = self.partitions[modules + 1].register(&mut tape);
            self.encoders[0].forward(&mut tape, xv, &enc, self.mode, &mut rng)?.0
        } else {
            let n = self.encoders[i - 1].param_specs().len();
            self.encoders[i - 1].forward(&mut tape, xv, &own[..n], self.mode, &mut rng)?.0
        };
        let dec = &own[own.len() - self.decoders[i - 1].param_specs().len()..];
        let (a, _) = self.decoders[i - 1].forward(&mut tape, h, dec, self.mode, &mut rng)?;
        let e = tape.mul(a, xv)?;
        Ok((tape.value(a).clone(), tape.value(e).clone()))
    }

    /// Eval-mode log-probabilities for a whole image set, `chunk` rows at a time.
    pub fn log_probs(&self, images: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        let rows = images.shape().first().copied().unwrap_or(0);
        let chunk = chunk.max(1);
        let mut data = Vec::with_capacity(rows * self.num_classes());
        let mut rng = self.dropout_rng.clone();
        for start in (0..rows).step_by(chunk) {
            let x = images.slice_outer(start, chunk.min(rows - start))?;
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let params = self.register_params(&mut tape);
            let (g, _) = self.forward_on_tape(&mut tape, xv, &params, Mode::Eval, Mode::Eval, &mut rng)?;
            data.extend_from_slice(tape.value(g.log_probs).data());
        }
        Tensor::new(vec![rows, self.num_classes()], data)
    }

    /// Eval-mode class predictions.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<Class>> {
        Ok(argmax_rows(&self.log_probs(images, 256)?))
    }
}

fn prefixed<T>(prefix: &str, named: Vec<(String, Tensor<T>)>) -> Vec<(String, Tensor<T>)> {
    named.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

/// Per-row argmax of a `B×N` score matrix; exact ties go to the lowest class.
pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Vec<Class> {
    let cols = scores.shape().get(1).copied().unwrap_or(1);
    scores
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            Class::from_index(best)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::layers::init_fanin_uniform;

    fn model<T: Scalar>(variant: Variant, n: usize, extent: usize, seed: u64) -> AdvocacyModel<T> {
        let cfg = ModelConfig::new(variant, n, 1, extent, extent);
        AdvocacyModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed), ChaCha8Rng::seed_from_u64(seed + 1)).unwrap()
    }

    fn batch(b: usize, extent: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_fanin_uniform::<f32, _>(&[b, 1, extent, extent], 1, &mut rng).unwrap().map(|v| v.abs())
    }

    #[test]
    fn forward_arity() {
        let m = model::<f32>(Variant::Advocacy, 10, 28, 0);
        let r = m.full_forward(&batch(4, 28, 1)).unwrap();
        assert_eq!(r.stacked.shape(), &[4, 10, 28, 28]);
        assert_eq!(r.log_probs.shape(), &[4, 10]);
        assert_eq!(r.attention.len(), 10);

        let m = model::<f32>(Variant::Attention, 10, 28, 0);
        let r = m.full_forward(&batch(4, 28, 1)).unwrap();
        assert_eq!(r.stacked.shape(), &[4, 1, 28, 28]);
        assert_eq!(r.log_probs.shape(), &[4, 10]);
    }

    #[test]
    fn zero_input_gives_zero_evidence() {
        let m = model::<f32>(Variant::Advocacy, 3, 12, 0);
        let (a, e) = m.advocate_forward(&Tensor::zeros(vec![2, 1, 12, 12]), 2).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(m.advocate_forward(&Tensor::zeros(vec![2, 1, 12, 12]), 4).is_err());
        assert!(m.advocate_forward(&Tensor::zeros(vec![2, 1, 12, 12]), 0).is_err());
    }

    #[test]
    fn saturated_attention_passes_input_through() {
        let mut m = model::<f32>(Variant::Advocacy, 3, 12, 0);
        let p = &mut m.partitions[2];
        let last_bias = p.tensors.len() - 1;
        p.tensors[last_bias].data_mut().fill(1e4);
        let x = batch(2, 12, 3);
        let (a, e) = m.advocate_forward(&x, 2).unwrap();
        assert!(a.data().iter().all(|&v| v == 1.0));
        assert_eq!(e, x);
    }

    #[test]
    fn evidence_channels_match_separate_advocate_forward() {
        for mode in [Mode::Train, Mode::Eval] {
            let mut m = model::<f32>(Variant::Advocacy, 3, 12, 5);
            m.set_mode(mode);
            let x = batch(3, 12, 6);
            let r = m.full_forward(&x).unwrap();
            for i in 1..=3 {
                let (a, e) = m.advocate_forward(&x, i).unwrap();
                assert_eq!(a, r.attention[i - 1]);
                assert_eq!(e, r.evidence[i - 1]);
            }
        }
    }

    #[test]
    fn swapping_advocates_swaps_evidence() {
        let mut m = model::<f32>(Variant::Advocacy, 3, 12, 7);
        m.set_mode(Mode::Eval);
        let x = batch(2, 12, 8);
        let before = m.full_forward(&x).unwrap();
        m.partitions.swap(1, 3);
        m.decoders.swap(0, 2);
        let after = m.full_forward(&x).unwrap();
        assert_eq!(before.evidence[0], after.evidence[2]);
        assert_eq!(before.evidence[2], after.evidence[0]);
        assert_eq!(before.evidence[1], after.evidence[1]);
    }

    #[test]
    fn variant_parity_at_initialization() {
        let a = model::<f32>(Variant::Advocacy, 4, 12, 11);
        let b = model::<f32>(Variant::HonestAdvocacy, 4, 12, 11);
        let c = model::<f32>(Variant::MultiAttention, 4, 12, 11);
        for ((pa, pb), pc) in a.partitions.iter().zip(&b.partitions).zip(&c.partitions) {
            assert_eq!(pa.tensors, pb.tensors);
            let shapes = |p: &ParameterPartition<f32>| p.tensors.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
            assert_eq!(shapes(pa), shapes(pc));
            assert_eq!(pa.names, pc.names);
        }
    }

    #[test]
    fn partitions_are_disjoint_and_complete() {
        for variant in Variant::ALL {
            for shared in [true, false] {
                let mut cfg = ModelConfig::new(variant, 3, 1, 12, 12);
                cfg.shared_encoder = shared;
                let m: AdvocacyModel<f32> =
                    AdvocacyModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0), ChaCha8Rng::seed_from_u64(1)).unwrap();
                let from_nets: usize = m.judge.param_count()
                    + m.encoders.iter().map(Network::param_count).sum::<usize>()
                    + m.decoders.iter().map(Network::param_count).sum::<usize>();
                assert_eq!(m.param_count(), from_nets);
                let names: std::collections::BTreeSet<_> = m.partitions.iter().map(|p| p.name).collect();
                assert_eq!(names.len(), m.partitions.len());
                assert_eq!(m.partitions.len(), 1 + m.num_modules() + usize::from(shared));
            }
        }
    }

    #[test]
    fn fresh_counters_are_zero() {
        let m = model::<f32>(Variant::HonestAdvocacy, 3, 12, 0);
        let c = m.partition_step_counters();
        assert_eq!(c.len(), 5);
        assert!(c.values().all(|&t| t == 0));
    }

    #[test]
    fn argmax_ties_to_lowest() {
        let s = Tensor::from_f64(vec![3, 3], &[-0.1, -5.0, -5.0, -1.0, -1.0, -3.0, -2.0, -0.5, -0.5]).unwrap();
        let p: Vec<usize> = argmax_rows::<f64>(&s).into_iter().map(Class::get).collect();
        assert_eq!(p, vec![1, 1, 2]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::new(Variant::Advocacy, 10, 1, 28, 28);
        assert!(cfg.validate().is_ok());
        cfg.judge_blocks = 6;
        assert!(cfg.validate().unwrap_err().to_string().contains("model.judge_blocks"));
        let cfg = ModelConfig::new(Variant::Advocacy, 10, 1, 30, 28);
        assert!(cfg.validate().is_err());
        assert_eq!("honest_advocacy".parse::<Variant>().unwrap(), Variant::HonestAdvocacy);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn forward_invariants_hold(variant_ix in 0usize..4, seed in 0u64..1000, train in proptest::bool::ANY) {
            let variant = Variant::ALL[variant_ix];
            let mut m = model::<f32>(variant, 3, 8, seed);
            m.set_mode(if train { Mode::Train } else { Mode::Eval });
            let x = batch(2, 8, seed);
            let r = m.full_forward(&x).unwrap();
            proptest::prop_assert_eq!(r.attention.len(), m.num_modules());
            for (a, e) in r.attention.iter().zip(&r.evidence) {
                proptest::prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
                for ((a, x), e) in a.data().iter().zip(x.data()).zip(e.data()) {
                    proptest::prop_assert_eq!(a * x, *e);
                }
            }
            for row in r.log_probs.data().chunks(3) {
                let total: f64 = row.iter().map(|&v| f64::from(v).exp()).sum();
                proptest::prop_assert!((total - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn argmax_picks_first_maximum(rows in proptest::collection::vec(proptest::collection::vec(0u8..3, 4), 1..6)) {
            let flat: Vec<f64> = rows.iter().flatten().map(|&v| f64::from(v)).collect();
            let scores = Tensor::new([rows.len(), 4], flat).unwrap();
            for (row, c) in rows.iter().zip(argmax_rows(&scores)) {
                let best = *row.iter().max().unwrap();
                proptest::prop_assert_eq!(c.index(), row.iter().position(|&v| v == best).unwrap());
            }
        }
    }
}
