//! Losses, the interleaved advocacy update, end-to-end baseline training,
//! early stopping and the frozen-judge continuation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Mode, Tape, Var};
use crate::class::Class;
use crate::data::{batches, split_indices, LabeledDataset};
use crate::error::{Error, Result};
use crate::layers::PartitionName;
use crate::model::{AdvocacyModel, Variant};
use crate::optim::{adam_step, OptimConfig};
use crate::seed;
use crate::tensor::{Scalar, Tensor};

/// Batch mean of `-log ŷ[y]`.
pub fn ce_loss<T: Scalar>(tape: &mut Tape<T>, log_probs: Var, labels: &[Class]) -> Result<Var> {
    let picks: Vec<Option<usize>> = labels.iter().map(|c| Some(c.index())).collect();
    tape.nll_mean(log_probs, &picks)
}

/// Batch mean of `-log ŷ[i]`, whatever the true labels.
pub fn advocate_loss<T: Scalar>(tape: &mut Tape<T>, log_probs: Var, i: Class) -> Result<Var> {
    let rows = tape.shape(log_probs).first().copied().unwrap_or(0);
    tape.nll_mean(log_probs, &vec![Some(i.index()); rows])
}

/// Mean of `-log ŷ[i]` over the rows whose label is `i`; a constant zero
/// (no gradient) when there are none.
pub fn honest_advocate_loss<T: Scalar>(tape: &mut Tape<T>, log_probs: Var, i: Class, labels: &[Class]) -> Result<Var> {
    let cols = tape.shape(log_probs).get(1).copied().unwrap_or(0);
    if i.index() >= cols {
        return Err(Error::InvalidArgument(format!("advocate class {i} out of range for {cols} classes")));
    }
    let picks: Vec<Option<usize>> = labels.iter().map(|&y| (y == i).then_some(i.index())).collect();
    tape.nll_mean(log_probs, &picks)
}

/// `λ · Σ_maps mean_b Σ|a|`.
pub fn attention_l1_penalty<T: Scalar>(tape: &mut Tape<T>, maps: &[Var], lambda: f64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &a in maps {
        let p = tape.abs_sum_mean(a);
        total = Some(match total {
            Some(t) => tape.add(t, p)?,
            None => p,
        });
    }
    Ok(match total {
        Some(t) => tape.scale(t, T::from_f64_lossy(lambda)),
        None => tape.leaf(Tensor::scalar(T::zero())),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    /// Weight λ of the attention L1 penalty.
    pub l1_coefficient: f64,
    pub seed: u64,
    /// Epochs of frozen-judge continuation run after fitting (0 disables it).
    pub frozen_judge_epochs: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            max_epochs: 100,
            patience: 10,
            validation_fraction: 0.1,
            l1_coefficient: 1e-4,
            seed: 0,
            frozen_judge_epochs: 0,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config(
                "train.validation_fraction",
                format!("must be strictly between 0 and 1, got {}", self.validation_fraction),
            ));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("train.batch_size", format!("must be at least 2, got {}", self.batch_size)));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::config("train.eval_batch_size", "must be at least 1"));
        }
        if !(self.l1_coefficient >= 0.0 && self.l1_coefficient.is_finite()) {
            return Err(Error::config("train.l1_coefficient", format!("must be >= 0, got {}", self.l1_coefficient)));
        }
        Ok(())
    }
}

/// What one training step did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Judge cross-entropy at the pre-step parameters.
    pub judge_loss: f64,
    /// Advocate objective (including the L1 term) per module; `None` when skipped.
    pub advocate_losses: Vec<Option<f64>>,
    /// Partitions stepped, in order.
    pub stepped: Vec<PartitionName>,
}

fn take_all<T: Scalar>(grads: &mut Gradients<T>, vars: &[Var]) -> Vec<Option<Tensor<T>>> {
    vars.iter().map(|&v| grads.take(v)).collect()
}

fn step_partition<T: Scalar>(
    model: &mut AdvocacyModel<T>,
    index: usize,
    grads: &[Option<Tensor<T>>],
    optim: &OptimConfig,
    report: &mut StepReport,
    observer: &mut dyn FnMut(PartitionName, &AdvocacyModel<T>),
) -> Result<()> {
    adam_step(&mut model.partitions[index], grads, &mut model.adam[index], optim)?;
    let name = model.partitions[index].name;
    report.stepped.push(name);
    observer(name, model);
    Ok(())
}

/// Run the shared train-mode forward, with the judge in eval mode when it is frozen.
fn train_forward<T: Scalar>(
    model: &mut AdvocacyModel<T>,
    tape: &mut Tape<T>,
    images: &Tensor<T>,
) -> Result<(Var, Vec<Vec<Var>>, crate::model::ForwardGraph)> {
    let judge_mode = if model.partitions[0].frozen { Mode::Eval } else { Mode::Train };
    let x = tape.leaf(images.clone());
    let params = model.register_params(tape);
    let mut rng = model.dropout_rng.clone();
    let (graph, updates) = model.forward_on_tape(tape, x, &params, Mode::Train, judge_mode, &mut rng)?;
    model.dropout_rng = rng;
    model.apply_running(&updates)?;
    Ok((x, params, graph))
}

fn check_batch<T: Scalar>(model: &AdvocacyModel<T>, images: &Tensor<T>, labels: &[Class]) -> Result<()> {
    if images.shape().first() != Some(&labels.len()) {
        return Err(Error::Shape(format!("{:?} images for {} labels", images.shape(), labels.len())));
    }
    if let Some(bad) = labels.iter().find(|c| c.get() > model.num_classes()) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range 1..={}", model.num_classes())));
    }
    Ok(())
}

/// One interleaved advocacy update; see [`advocacy_train_step_observed`].
pub fn advocacy_train_step<T: Scalar>(
    model: &mut AdvocacyModel<T>,
    images: &Tensor<T>,
    labels: &[Class],
    lambda: f64,
    optim: &OptimConfig,
) -> Result<StepReport> {
    advocacy_train_step_observed(model, images, labels, lambda, optim, &mut |_, _| {})
}

/// One interleaved advocacy update.
///
/// A single forward pass produces `log ŷ`; every gradient is taken from it at
/// the pre-step parameters. The judge steps on cross-entropy, then each
/// advocate `i` in ascending order steps on its own objective plus the L1
/// penalty on `a^i`. The honest variant skips advocates whose class is absent
/// from the batch. With a shared encoder, the encoder gradients that flow
/// through each stepped advocate's decoder are summed and applied in one final
/// step. Frozen partitions are skipped. `observer` sees the model after every
/// partition step.
pub fn advocacy_train_step_observed<T: Scalar>(
    model: &mut AdvocacyModel<T>,
    images: &Tensor<T>,
    labels: &[Class],
    lambda: f64,
    optim: &OptimConfig,
    observer: &mut dyn FnMut(PartitionName, &AdvocacyModel<T>),
) -> Result<StepReport> {
    let variant = model.variant();
    if !variant.is_advocacy() {
        return Err(Error::InvalidArgument(format!("advocacy step on the `{variant}` variant")));
    }
    check_batch(model, images, labels)?;
    let honest = variant == Variant::HonestAdvocacy;
    let modules = model.num_modules();
    let mut tape = Tape::new();
    let (_, params, graph) = train_forward(model, &mut tape, images)?;

    let judge_loss = ce_loss(&mut tape, graph.log_probs, labels)?;
    let mut report =
        StepReport { judge_loss: tape.value(judge_loss).item()?.as_f64(), advocate_losses: vec![None; modules], stepped: Vec::new() };
    if !model.partitions[0].frozen {
        let mut grads = tape.backward(judge_loss, &params[0])?;
        let g = take_all(&mut grads, &params[0]);
        step_partition(model, 0, &g, optim, &mut report, observer)?;
    }

    let encoder_index = modules + 1;
    let train_encoder = graph.shared_features.is_some() && !model.partitions[encoder_index].frozen;
    let mut encoder_seed: Option<Tensor<T>> = None;
    #[allow(clippy::needless_range_loop)]
    for i in 1..=modules {
        let class = Class::from_index(i - 1);
        if model.partitions[i].frozen || (honest && !labels.contains(&class)) {
            continue;
        }
        let objective = if honest {
            honest_advocate_loss(&mut tape, graph.log_probs, class, labels)?
        } else {
            advocate_loss(&mut tape, graph.log_probs, class)?
        };
        let penalty = attention_l1_penalty(&mut tape, &[graph.attention[i - 1]], lambda)?;
        let loss = tape.add(objective, penalty)?;
        report.advocate_losses[i - 1] = Some(tape.value(loss).item()?.as_f64());

        let branch = graph.branches[i - 1];
        let mut wrt = params[i].clone();
        if train_encoder {
            wrt.push(branch);
        }
        let mut grads = tape.backward(loss, &wrt)?;
        if train_encoder {
            let g = grads.take(branch).expect("branch gradient requested");
            match &mut encoder_seed {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                None => encoder_seed = Some(g),
            }
        }
        let g = take_all(&mut grads, &params[i]);
        step_partition(model, i, &g, optim, &mut report, observer)?;
    }

    if let (Some(seed), Some(h)) = (encoder_seed, graph.shared_features) {
        let mut grads = tape.backward_seeded(&[(h, seed)], &params[encoder_index])?;
        let g = take_all(&mut grads, &params[encoder_index]);
        step_partition(model, encoder_index, &g, optim, &mut report, observer)?;
    }
    Ok(report)
}

/// One end-to-end step of a baseline: cross-entropy plus the L1 penalty on
/// every attention map, one backward pass, and an Adam step on every
/// unfrozen partition.
pub fn baseline_train_step<T: Scalar>(
    model: &mut AdvocacyModel<T>,
    images: &Tensor<T>,
    labels: &[Class],
    lambda: f64,
    optim: &OptimConfig,
) -> Result<StepReport> {
    let variant = model.variant();
    if variant.is_advocacy() {
        return Err(Error::InvalidArgument(format!("end-to-end step on the `{variant}` variant")));
    }
    check_batch(model, images, labels)?;
    let mut tape = Tape::new();
    let (_, params, graph) = train_forward(model, &mut tape, images)?;
    let ce = ce_loss(&mut tape, graph.log_probs, labels)?;
    let penalty = attention_l1_penalty(&mut tape, &graph.attention, lambda)?;
    let loss = tape.add(ce, penalty)?;
    let mut report =
        StepReport { judge_loss: tape.value(ce).item()?.as_f64(), advocate_losses: vec![None; model.num_modules()], stepped: Vec::new() };
    let live: Vec<usize> = (0..params.len()).filter(|&p| !model.partitions[p].frozen).collect();
    let wrt: Vec<Var> = live.iter().flat_map(|&p| params[p].iter().copied()).collect();
    let mut grads = tape.backward(loss, &wrt)?;
    for p in live {
        let g = take_all(&mut grads, &params[p]);
        step_partition(model, p, &g, optim, &mut report, &mut |_, _| {})?;
    }
    Ok(report)
}

/// The training step matching the model's variant.
pub fn train_step<T: Scalar>(
    model: &mut AdvocacyModel<T>,
    images: &Tensor<T>,
    labels: &[Class],
    lambda: f64,
    optim: &OptimConfig,
) -> Result<StepReport> {
    if model.variant().is_advocacy() {
        advocacy_train_step(model, images, labels, lambda, optim)
    } else {
        baseline_train_step(model, images, labels, lambda, optim)
    }
}

/// Eval-mode mean cross-entropy and accuracy.
pub fn evaluate<T: Scalar>(model: &AdvocacyModel<T>, ds: &LabeledDataset, chunk: usize) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument(format!("cannot evaluate on empty dataset `{}`", ds.name)));
    }
    let log_probs = model.log_probs(&ds.images.cast::<T>(), chunk)?;
    let n = model.num_classes();
    let mut loss = 0.0;
    let mut correct = 0usize;
    let preds = crate::model::argmax_rows(&log_probs);
    for (row, (y, p)) in ds.labels.iter().zip(&preds).enumerate() {
        loss -= log_probs.data()[row * n + y.index()].as_f64();
        correct += usize::from(y == p);
    }
    Ok((loss / ds.len() as f64, correct as f64 / ds.len() as f64))
}

/// Outcome of feeding one validation loss to [`EarlyStopping`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on a validation loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, epoch: 0 }
    }

    pub fn observe(&mut self, loss: f64) -> Verdict {
        self.epoch += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = self.epoch;
            Verdict::Improved
        } else if self.epoch - self.best_epoch >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }

    /// 1-based epoch of the best loss so far (0 before any improvement).
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Everything a training run reports.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub variant: Variant,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub step_counters: BTreeMap<PartitionName, u64>,
    pub test_metrics: BTreeMap<String, f64>,
    pub wall_clock_seconds: Option<f64>,
}

const EPOCH_HEADER: &str = "epoch,train_loss,val_loss,val_accuracy";

impl RunRecord {
    /// Key-value block followed by a blank line and a per-epoch CSV table.
    /// Floats use the shortest representation that parses back exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "best_epoch = {}", self.best_epoch);
        let _ = writeln!(s, "stopped_early = {}", self.stopped_early);
        for (name, t) in &self.step_counters {
            let _ = writeln!(s, "steps.{name} = {t}");
        }
        for (key, v) in &self.test_metrics {
            let _ = writeln!(s, "test.{key} = {v:?}");
        }
        if let Some(w) = self.wall_clock_seconds {
            let _ = writeln!(s, "wall_clock_seconds = {w:?}");
        }
        let _ = writeln!(s, "\n{EPOCH_HEADER}");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:?},{:?},{:?}", e.epoch, e.train_loss, e.val_loss, e.val_accuracy);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |message: String| Error::Format { what: "run record", message };
        let mut lines = text.lines();
        let mut kv = BTreeMap::new();
        for line in lines.by_ref() {
            if line.trim().is_empty() {
                break;
            }
            let (k, v) = line.split_once(" = ").ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        fn parse<V: FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<V> {
            kv.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format { what: "run record", message: format!("missing or malformed `{key}`") })
        }
        let mut record = RunRecord {
            variant: parse(&kv, "variant")?,
            seed: parse(&kv, "seed")?,
            best_epoch: parse(&kv, "best_epoch")?,
            stopped_early: parse(&kv, "stopped_early")?,
            epochs: Vec::new(),
            step_counters: BTreeMap::new(),
            test_metrics: BTreeMap::new(),
            wall_clock_seconds: kv.get("wall_clock_seconds").map(|_| parse(&kv, "wall_clock_seconds")).transpose()?,
        };
        for key in kv.keys() {
            if let Some(name) = key.strip_prefix("steps.") {
                record.step_counters.insert(name.parse()?, parse(&kv, key)?);
            } else if let Some(metric) = key.strip_prefix("test.") {
                record.test_metrics.insert(metric.to_string(), parse(&kv, key)?);
            }
        }
        match lines.next() {
            Some(EPOCH_HEADER) => {}
            other => return Err(bad(format!("expected epoch table header, got {other:?}"))),
        }
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| bad(format!("malformed epoch row `{line}`")))
            };
            if f.len() != 4 {
                return Err(bad(format!("malformed epoch row `{line}`")));
            }
            record.epochs.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad(format!("malformed epoch row `{line}`")))?,
                train_loss: num(1)?,
                val_loss: num(2)?,
                val_accuracy: num(3)?,
            });
        }
        Ok(record)
    }
}

fn check_dataset<T: Scalar>(model: &AdvocacyModel<T>, ds: &LabeledDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument(format!("dataset `{}` is empty", ds.name)));
    }
    if ds.image_shape() != model.config().input_shape() || ds.num_classes != model.num_classes() {
        return Err(Error::Shape(format!(
            "dataset `{}` ({:?}, {} classes) does not match the model ({:?}, {} classes)",
            ds.name,
            ds.image_shape(),
            ds.num_classes,
            model.config().input_shape(),
            model.num_classes()
        )));
    }
    Ok(())
}

/// One pass over `train` in seeded order; returns the example-weighted judge loss.
fn run_epoch<T: Scalar>(
    model: &mut AdvocacyModel<T>,
    train: &LabeledDataset,
    cfg: &TrainConfig,
    optim: &OptimConfig,
    shuffle_seed: u64,
    epoch: u64,
) -> Result<f64> {
    model.set_mode(Mode::Train);
    let mut total = 0.0;
    let mut seen = 0usize;
    for idx in batches(train.len(), cfg.batch_size, shuffle_seed, epoch)? {
        // batch norm needs two examples per batch in train mode
        if idx.len() < 2 {
            continue;
        }
        let (x, y) = train.batch(&idx)?;
        let report = train_step(model, &x.cast::<T>(), &y, cfg.l1_coefficient, optim)?;
        total += report.judge_loss * idx.len() as f64;
        seen += idx.len();
    }
    model.set_mode(Mode::Eval);
    Ok(if seen == 0 { f64::NAN } else { total / seen as f64 })
}

/// Train with a seeded validation split and early stopping, then restore the
/// snapshot with the lowest validation loss.
pub fn fit<T: Scalar>(model: &mut AdvocacyModel<T>, pool: &LabeledDataset, cfg: &TrainConfig, optim: &OptimConfig) -> Result<RunRecord> {
    cfg.validate()?;
    optim.validate()?;
    check_dataset(model, pool)?;
    let started = Instant::now();
    let (train_idx, val_idx) = split_indices(pool.len(), cfg.validation_fraction, seed::derive_seed(cfg.seed, seed::SPLIT))?;
    let train = pool.subset(&train_idx)?;
    let val = pool.subset(&val_idx)?;
    let shuffle_seed = seed::derive_seed(cfg.seed, seed::SHUFFLE);

    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: Option<AdvocacyModel<T>> = None;
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let train_loss = run_epoch(model, &train, cfg, optim, shuffle_seed, epoch as u64)?;
        let (val_loss, val_accuracy) = evaluate(model, &val, cfg.eval_batch_size)?;
        epochs.push(EpochRecord { epoch, train_loss, val_loss, val_accuracy });
        match stopper.observe(val_loss) {
            Verdict::Improved => best = Some(model.clone()),
            Verdict::Continue => {}
            Verdict::Stop => {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    if let Some(best) = best {
        *model = best;
    }
    model.set_mode(Mode::Eval);
    Ok(RunRecord {
        variant: model.variant(),
        seed: cfg.seed,
        epochs,
        best_epoch: stopper.best_epoch(),
        stopped_early,
        step_counters: model.partition_step_counters(),
        test_metrics: BTreeMap::new(),
        wall_clock_seconds: Some(started.elapsed().as_secs_f64()),
    })
}

/// Freeze the judge and keep updating only the attention modules for
/// `epochs` passes over `train`. Accuracy on `eval` before and after is
/// reported as `accuracy_before` / `accuracy_after`; the judge stays frozen.
pub fn continue_with_frozen_judge<T: Scalar>(
    model: &mut AdvocacyModel<T>,
    train: &LabeledDataset,
    eval: &LabeledDataset,
    epochs: usize,
    cfg: &TrainConfig,
    optim: &OptimConfig,
) -> Result<RunRecord> {
    cfg.validate()?;
    optim.validate()?;
    check_dataset(model, train)?;
    check_dataset(model, eval)?;
    let started = Instant::now();
    model.set_frozen(PartitionName::Judge, true)?;
    let (_, before) = evaluate(model, eval, cfg.eval_batch_size)?;
    let shuffle_seed = seed::derive_seed(cfg.seed, "frozen_judge");
    let mut records = Vec::new();
    for epoch in 1..=epochs {
        let train_loss = run_epoch(model, train, cfg, optim, shuffle_seed, epoch as u64)?;
        let (val_loss, val_accuracy) = evaluate(model, eval, cfg.eval_batch_size)?;
        records.push(EpochRecord { epoch, train_loss, val_loss, val_accuracy });
    }
    let (_, after) = evaluate(model, eval, cfg.eval_batch_size)?;
    let mut test_metrics = BTreeMap::new();
    test_metrics.insert("accuracy_before".to_string(), before);
    test_metrics.insert("accuracy_after".to_string(), after);
    Ok(RunRecord {
        variant: model.variant(),
        seed: cfg.seed,
        epochs: records,
        best_epoch: epochs,
        stopped_early: false,
        step_counters: model.partition_step_counters(),
        test_metrics,
        wall_clock_seconds: Some(started.elapsed().as_secs_f64()),
    })
}
