//! Acceptance gate: one PASS/FAIL line per criterion, run sequentially so
//! wall-clock limits are measured on an otherwise idle process.
//!
//! Pass a substring argument to run only matching criteria.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use advocacy::autodiff::{grad_check, grad_pairs_at, relative_error, Mode, Tape, Var};
use advocacy::class::Class;
use advocacy::config::{ExperimentConfig, DATA_ROOT_ENV};
use advocacy::data::{load_idx, make_binary_mnist, make_imbalanced, make_imbalanced_mnist, LabeledDataset};
use advocacy::harness::{cmd_train, train_run, Invocation, TrainedRun};
use advocacy::layers::PartitionName;
use advocacy::metrics::{aupr, auroc, error_reduction};
use advocacy::model::{argmax_rows, AdvocacyModel, ModelConfig, Variant};
use advocacy::optim::OptimConfig;
use advocacy::seed::stream_rng;
use advocacy::training::{
    advocacy_train_step_observed, advocate_loss, attention_l1_penalty, ce_loss, continue_with_frozen_judge, honest_advocate_loss,
};
use advocacy::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV).map_or_else(|| workspace().join("data"), PathBuf::from)
}

fn config(name: &str) -> Result<ExperimentConfig, String> {
    ok(ExperimentConfig::load(workspace().join("configs").join(name)))
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<Class> {
    (0..n).map(|_| Class::from_index(rng.gen_range(0..classes))).collect()
}

// ---------------------------------------------------------------- criterion 1

const GRAD_TOL: f64 = 1e-4;
/// Model-level partials smaller than this are compared against it, which
/// bounds their absolute error by 1e-9. Conv biases feeding train-mode batch
/// norm have an exactly zero derivative, where central differences only see
/// roundoff.
const MODEL_GRAD_FLOOR: f64 = 1e-5;

/// `Σ out ⊙ r` for a fixed random `r`.
fn weighted_sum(tp: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let r = random(tp.shape(v), &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let r = tp.leaf(r);
    let p = tp.mul(v, r).unwrap();
    tp.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var], u64) -> advocacy::Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        (
            "add/mul/scale",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|tp, p, s| {
                let m = tp.mul(p[0], p[1])?;
                let a = tp.add(m, p[0])?;
                let y = tp.scale(a, 0.7);
                Ok(weighted_sum(tp, y, s))
            }),
        ),
        (
            "relu",
            vec![vec![3, 4]],
            Box::new(|tp, p, s| {
                let y = tp.relu(p[0]);
                Ok(weighted_sum(tp, y, s))
            }),
        ),
        (
            "sigmoid",
            vec![vec![3, 4]],
            Box::new(|tp, p, s| {
                let y = tp.sigmoid(p[0]);
                Ok(weighted_sum(tp, y, s))
            }),
        ),
        (
            "linear",
            vec![vec![2, 5], vec![3, 5], vec![3]],
            Box::new(|tp, p, s| {
                let y = tp.linear(p[0], p[1], p[2])?;
                Ok(weighted_sum(tp, y, s))
            }),
        ),
        (
            "conv2d",
            vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
            Box::new(|tp, p, s| {
                let y = tp.conv2d(p[0], p[1], p[2], 1 + (s as usize % 2), 1)?;
                Ok(weighted_sum(tp, y, s))
            }),
        ),
        (
            "conv_transpose2d",
            vec![vec![2, 3, 3, 3], vec![3, 2, 2, 2], vec![2]],
            Box::new(|tp, p, s| {
                let y = tp.conv_transpose2d(p[0], p[1], p[2], 2, 0)?;
                Ok(weighted_sum(tp, y, s))
            }),
        ),
        (
            "maxpool2d",
            vec![vec![1, 2, 4, 4]],
            Box::new(|tp, p, s| {
                let y = tp.maxpool2d(p[0], 2)?;
                Ok(weighted_sum(tp, y, s))
            }),
        ),
        (
            "batch_norm train",
            vec![vec![2, 3, 4, 4], vec![3], vec![3]],
            Box::new(|tp, p, s| {
                let (y, _) = tp.batch_norm(p[0], p[1], p[2], Mode::Train, (&[], &[]), 1e-5)?;
                Ok(weighted_sum(tp, y, s))
            }),
        ),
        (
            "batch_norm eval",
            vec![vec![2, 3, 2, 2], vec![3], vec![3]],
            Box::new(|tp, p, s| {
                let (y, _) = tp.batch_norm(p[0], p[1], p[2], Mode::Eval, (&[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0]), 1e-5)?;
                Ok(weighted_sum(tp, y, s))
            }),
        ),
        (
            "dropout",
            vec![vec![4, 5]],
            Box::new(|tp, p, s| {
                let y = tp.dropout(p[0], 0.3, Mode::Train, &mut ChaCha8Rng::seed_from_u64(s))?;
                Ok(weighted_sum(tp, y, s))
            }),
        ),
        (
            "log_softmax",
            vec![vec![2, 4, 3]],
            Box::new(|tp, p, s| {
                let y = tp.log_softmax(p[0], 1)?;
                Ok(weighted_sum(tp, y, s))
            }),
        ),
        (
            "concat/flatten/reshape",
            vec![vec![2, 1, 2, 2], vec![2, 2, 2, 2]],
            Box::new(|tp, p, s| {
                let c = tp.concat_channels(&[p[0], p[1]])?;
                let f = tp.flatten(c)?;
                let r = tp.reshape(f, [4, 6])?;
                Ok(weighted_sum(tp, r, s))
            }),
        ),
        (
            "nll_mean",
            vec![vec![3, 4]],
            Box::new(|tp, p, _| {
                let ls = tp.log_softmax(p[0], 1)?;
                tp.nll_mean(ls, &[Some(1), None, Some(3)])
            }),
        ),
        ("abs_sum_mean", vec![vec![2, 3]], Box::new(|tp, p, _| Ok(tp.abs_sum_mean(p[0])))),
        (
            "mean/identity",
            vec![vec![2, 3]],
            Box::new(|tp, p, _| {
                let m = tp.mean(p[0]);
                Ok(tp.identity(m))
            }),
        ),
    ]
}

#[derive(Clone, Copy)]
enum LossKind {
    Ce,
    Advocate(usize),
    Honest(usize),
}

fn loss_value(forward: &impl Fn(&mut Tape<f64>, &[Var]) -> advocacy::Result<Var>, params: &[Tensor<f64>]) -> f64 {
    let mut tp = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tp.leaf(p.clone())).collect();
    let loss = forward(&mut tp, &vars).unwrap();
    tp.value(loss).data()[0]
}

/// Worst relative error over sampled coordinates of every parameter tensor
/// of a small f64 advocacy model for one loss.
///
/// The model holds tens of thousands of ReLUs behind batch norm over four
/// examples, so a probe of width `h` regularly straddles a kink. When the
/// central difference disagrees, the coordinate is compared against the
/// second-order one-sided differences instead; a kink spoils at most one side
/// while a wrong analytic gradient disagrees with both.
fn model_grad_error(seed: u64, kind: LossKind) -> advocacy::Result<(f64, usize)> {
    let classes = 3;
    let mut cfg = ModelConfig::new(Variant::Advocacy, classes, 1, 4, 4);
    cfg.shared_encoder = seed % 2 == 0;
    let model = AdvocacyModel::<f64>::new(cfg, &mut stream_rng(seed, "init"), stream_rng(seed, "dropout"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = 4;
    let x = Tensor::new([batch, 1, 4, 4], (0..batch * 16).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let mut y = labels(&mut rng, batch, classes);
    if let LossKind::Honest(i) = kind {
        y[0] = Class::from_index(i - 1);
    }
    let sizes: Vec<usize> = model.partitions().iter().map(|p| p.len()).collect();
    let params: Vec<Tensor<f64>> = model.partitions().iter().flat_map(|p| p.tensors.iter().cloned()).collect();
    let coords: Vec<(usize, usize)> = params.iter().enumerate().map(|(k, t)| (k, rng.gen_range(0..t.numel()))).collect();
    let dropout = stream_rng(seed, "forward");
    let forward = |tp: &mut Tape<f64>, flat: &[Var]| -> advocacy::Result<Var> {
        let mut groups = Vec::new();
        let mut rest = flat;
        for &n in &sizes {
            let (head, tail) = rest.split_at(n);
            groups.push(head.to_vec());
            rest = tail;
        }
        let xv = tp.leaf(x.clone());
        let (g, _) = model.forward_on_tape(tp, xv, &groups, Mode::Train, Mode::Train, &mut dropout.clone())?;
        match kind {
            LossKind::Ce => ce_loss(tp, g.log_probs, &y),
            LossKind::Advocate(i) => {
                let o = advocate_loss(tp, g.log_probs, Class::from_index(i - 1))?;
                let p = attention_l1_penalty(tp, &[g.attention[i - 1]], 1e-2)?;
                tp.add(o, p)
            }
            LossKind::Honest(i) => honest_advocate_loss(tp, g.log_probs, Class::from_index(i - 1), &y),
        }
    };
    let pairs = grad_pairs_at(forward, &params, 1e-5, &coords)?;
    let f0 = loss_value(&forward, &params);
    let mut worst = 0.0f64;
    let mut one_sided = 0;
    let mut probe = params.clone();
    for (&(a, central), &(k, j)) in pairs.iter().zip(&coords) {
        let mut err = relative_error(a, central, MODEL_GRAD_FLOOR);
        if err < GRAD_TOL {
            worst = worst.max(err);
            continue;
        }
        one_sided += 1;
        let mut at = |d: f64| {
            let original = probe[k].data()[j];
            probe[k].data_mut()[j] = original + d;
            let v = loss_value(&forward, &probe);
            probe[k].data_mut()[j] = original;
            v
        };
        // shrink the step until one side clears the nearest kink
        for h in [1e-5, 1e-6] {
            let right = (-3.0 * f0 + 4.0 * at(h) - at(2.0 * h)) / (2.0 * h);
            let left = (3.0 * f0 - 4.0 * at(-h) + at(-2.0 * h)) / (2.0 * h);
            err = err.min(relative_error(a, right, MODEL_GRAD_FLOOR)).min(relative_error(a, left, MODEL_GRAD_FLOOR));
            if err < GRAD_TOL {
                break;
            }
        }
        worst = worst.max(err);
    }
    Ok((worst, one_sided))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let seeds = 20u64;
    let mut worst_op = ("", 0.0f64);
    for seed in 0..seeds {
        for (name, shapes, f) in op_cases() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            let err = ok(grad_check(|tp, p| f(tp, p, seed), &params, 1e-6))?;
            ensure(err < GRAD_TOL, || format!("op {name} seed {seed}: relative error {err:.2e}"))?;
            if err > worst_op.1 {
                worst_op = (name, err);
            }
        }
    }
    let mut worst_model = ("", 0.0f64);
    let mut one_sided = 0;
    for seed in 0..seeds {
        let i = 1 + seed as usize % 3;
        for (name, kind) in [("ce", LossKind::Ce), ("advocate", LossKind::Advocate(i)), ("honest", LossKind::Honest(i))] {
            let (err, kinks) = ok(model_grad_error(seed, kind))?;
            one_sided += kinks;
            ensure(err < GRAD_TOL, || format!("model + {name} loss seed {seed}: relative error {err:.2e}"))?;
            if err > worst_model.1 {
                worst_model = (name, err);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.0} s"))?;
    Ok(format!(
        "{} ops x {seeds} seeds, worst {:.1e} ({}); model x 3 losses x {seeds} seeds, worst {:.1e} ({}), \
         {one_sided} kink-straddling probes checked one-sided",
        op_cases().len(),
        worst_op.1,
        worst_op.0,
        worst_model.1,
        worst_model.0
    ))
}

// ---------------------------------------------------------------- criterion 2

fn snapshot(m: &AdvocacyModel<f32>) -> Vec<Vec<Vec<u32>>> {
    m.partitions().iter().map(|p| p.tensors.iter().map(|t| t.data().iter().map(|v| v.to_bits()).collect()).collect()).collect()
}

/// Runs one step, checking after every sub-step that only the stepped
/// partition changed. Returns the stepped partitions in order.
fn observed_step(model: &mut AdvocacyModel<f32>, x: &Tensor<f32>, y: &[Class]) -> Result<Vec<PartitionName>, String> {
    let mut prev = snapshot(model);
    let mut violation = None;
    let mut order = Vec::new();
    let mut observer = |name: PartitionName, m: &AdvocacyModel<f32>| {
        let now = snapshot(m);
        let idx = m.partition_index(name).unwrap();
        for (q, (a, b)) in prev.iter().zip(&now).enumerate() {
            if q != idx && a != b && violation.is_none() {
                violation = Some(format!("partition {} changed while {name} stepped", m.partitions()[q].name));
            }
        }
        prev = now;
        order.push(name);
    };
    ok(advocacy_train_step_observed(model, x, y, 1e-4, &OptimConfig::default(), &mut observer))?;
    match violation {
        Some(v) => Err(v),
        None => Ok(order),
    }
}

fn criterion_2() -> Outcome {
    let classes = 3;
    let mut checked = 0;
    for variant in [Variant::Advocacy, Variant::HonestAdvocacy] {
        for shared in [true, false] {
            // every non-empty set of present classes: each advocate sees 0 or
            // more examples of its class, up to all classes present
            for present in 1u32..(1 << classes) {
                let mut cfg = ModelConfig::new(variant, classes, 1, 8, 8);
                cfg.shared_encoder = shared;
                let mut model = ok(AdvocacyModel::<f32>::new(cfg, &mut stream_rng(1, "init"), stream_rng(1, "dropout")))?;
                let cls: Vec<usize> = (0..classes).filter(|k| present >> k & 1 == 1).collect();
                let y: Vec<Class> = (0..4).map(|r| Class::from_index(cls[r % cls.len()])).collect();
                let x = Tensor::new([4, 1, 8, 8], (0..256).map(|v| (v % 17) as f32 / 17.0).collect()).unwrap();
                let before = model.partition_step_counters();
                let order = observed_step(&mut model, &x, &y)?;
                let advocates: Vec<usize> =
                    order.iter().filter_map(|p| if let PartitionName::Advocate(i) = p { Some(*i) } else { None }).collect();
                let expected: Vec<usize> = match variant {
                    Variant::HonestAdvocacy => cls.iter().map(|k| k + 1).collect(),
                    _ => (1..=classes).collect(),
                };
                ensure(order.first() == Some(&PartitionName::Judge), || format!("{variant}: judge did not step first"))?;
                ensure(order.iter().filter(|p| **p == PartitionName::Judge).count() == 1, || "judge stepped twice".into())?;
                ensure(advocates == expected, || format!("{variant} classes {cls:?}: advocates {advocates:?}, expected {expected:?}"))?;
                ensure(order.contains(&PartitionName::SharedEncoder) == shared, || "shared encoder schedule".into())?;
                let after = model.partition_step_counters();
                for (name, t) in &after {
                    let stepped = u64::from(order.contains(name));
                    ensure(*t == before[name] + stepped, || format!("{name} step counter {t}"))?;
                }
                checked += 1;
            }
        }
    }
    let mut cfg = ModelConfig::new(Variant::Advocacy, classes, 1, 8, 8);
    cfg.shared_encoder = true;
    let mut model = ok(AdvocacyModel::<f32>::new(cfg, &mut stream_rng(2, "init"), stream_rng(2, "dropout")))?;
    ok(model.set_frozen(PartitionName::Judge, true))?;
    ok(model.set_frozen(PartitionName::Advocate(2), true))?;
    let x = Tensor::new([3, 1, 8, 8], (0..192).map(|v| (v % 5) as f32 / 5.0).collect()).unwrap();
    let order = observed_step(&mut model, &x, &[Class::from_index(0), Class::from_index(1), Class::from_index(2)])?;
    let expected = [PartitionName::Advocate(1), PartitionName::Advocate(3), PartitionName::SharedEncoder];
    ensure(order == expected, || format!("frozen judge/advocate_2 schedule {order:?}"))?;
    Ok(format!("{checked} batches over all class subsets, shared and unshared encoders, plus a frozen-partition batch"))
}

// ---------------------------------------------------------------- criterion 3

fn brute_nll(lp: &[f64], cols: usize, picks: &[Option<usize>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (row, p) in picks.iter().enumerate() {
        if let Some(c) = p {
            total -= lp[row * cols + c];
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn criterion_3() -> Outcome {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=10);
        let b = rng.gen_range(1..=12);
        let y = labels(&mut rng, b, n);
        let mut tp = Tape::<f64>::new();
        let logits = tp.leaf(random(&[b, n], &mut rng).map(|v| 4.0 * v));
        let lp = ok(tp.log_softmax(logits, 1))?;
        let lpv = tp.value(lp).data().to_vec();
        let ce = ok(ce_loss(&mut tp, lp, &y))?;
        let ce = tp.value(ce).data()[0];
        let ce_ref = brute_nll(&lpv, n, &y.iter().map(|c| Some(c.index())).collect::<Vec<_>>());
        worst = worst.max((ce - ce_ref).abs());
        for i in (0..n).map(Class::from_index) {
            let a = ok(advocate_loss(&mut tp, lp, i))?;
            let a = tp.value(a).data()[0];
            worst = worst.max((a - brute_nll(&lpv, n, &vec![Some(i.index()); b])).abs());
            let h = ok(honest_advocate_loss(&mut tp, lp, i, &y))?;
            let picks: Vec<Option<usize>> = y.iter().map(|&c| (c == i).then_some(i.index())).collect();
            worst = worst.max((tp.value(h).data()[0] - brute_nll(&lpv, n, &picks)).abs());
            if !y.contains(&i) {
                ensure(tp.value(h).data()[0] == 0.0, || format!("honest loss for absent class {i} is nonzero"))?;
                let g = ok(tp.backward(h, &[logits]))?;
                let zero = g.get(logits).is_none_or(|t| t.data().iter().all(|&v| v == 0.0));
                ensure(zero, || format!("honest loss for absent class {i} has a gradient"))?;
                cases += 1;
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max deviation from brute force {worst:.2e}"))?;
    ensure(cases > 0, || "no absent-class case exercised".into())?;
    Ok(format!("200 random batches, max deviation {worst:.1e}; {cases} absent-class cases give 0 with zero gradient"))
}

// ---------------------------------------------------------------- criterion 4 / 11

fn criterion_4(runs: &mut HashMap<Variant, TrainedRun>) -> Outcome {
    let cfg = config("synthetic.toml")?;
    let data = ok(cfg.load_data(None))?;
    ensure(data.train.len() == 800 && data.test.len() == 200, || "expected 800 train / 200 test".into())?;
    let start = Instant::now();
    let mut parts = Vec::new();
    for v in Variant::ALL {
        let run = ok(train_run(&cfg, &data, v, cfg.seeds[0]))?;
        let acc = run.record.test_metrics["accuracy"];
        let epochs = run.record.epochs.len();
        let first = run.record.epochs.iter().find(|e| e.val_accuracy >= 0.95).map_or(0, |e| e.epoch);
        parts.push(format!("{v} {:.1}% ({epochs} ep, val >= 95% at ep {first}, {:.0} s)", 100.0 * acc, start.elapsed().as_secs_f64()));
        ensure(acc >= 0.95 && epochs <= 10, || format!("{v}: accuracy {acc} after {epochs} epochs"))?;
        runs.insert(v, run);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 180.0, || format!("took {secs:.0} s: {}", parts.join(", ")))?;
    Ok(format!("{}; {secs:.0} s total", parts.join(", ")))
}

fn criterion_11(runs: &mut HashMap<Variant, TrainedRun>) -> Outcome {
    let cfg = config("synthetic.toml")?;
    let data = ok(cfg.load_data(None))?;
    let tc = cfg.train_config(cfg.seeds[0]);
    let mut parts = Vec::new();
    for v in [Variant::HonestAdvocacy, Variant::Advocacy] {
        let model = match runs.get_mut(&v) {
            Some(run) => &mut run.model,
            None => return Err(format!("no trained {v} model from criterion 4")),
        };
        let judge_before = model.partition(PartitionName::Judge).unwrap().tensors.clone();
        let rec = ok(continue_with_frozen_judge(model, &data.train, &data.test, tc.frozen_judge_epochs, &tc, &cfg.optim))?;
        ensure(model.partition(PartitionName::Judge).unwrap().tensors == judge_before, || "judge changed".into())?;
        let (before, after) = (rec.test_metrics["accuracy_before"], rec.test_metrics["accuracy_after"]);
        let delta = 100.0 * (after - before);
        parts.push(format!("{v} {:.1}% -> {:.1}%", 100.0 * before, 100.0 * after));
        match v {
            Variant::HonestAdvocacy => ensure(delta.abs() <= 2.0, || format!("honest change {delta:+.1} points"))?,
            _ => ensure(after <= before, || format!("dishonest accuracy rose {delta:+.1} points"))?,
        }
    }
    Ok(format!("{} epochs with the judge frozen: {}", tc.frozen_judge_epochs, parts.join(", ")))
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    let cfg = config("mnist_desk.toml")?;
    let root = data_root();
    let data = cfg.load_data(Some(&root)).map_err(|e| format!("{e} (run scripts/fetch_mnist.sh)"))?;
    ensure(data.train.len() == 5000 && data.test.len() == 10_000, || "expected 5,000 train / 10,000 test".into())?;
    let start = Instant::now();
    let mut parts = Vec::new();
    for v in Variant::ALL {
        let run = ok(train_run(&cfg, &data, v, cfg.seeds[0]))?;
        let acc = run.record.test_metrics["accuracy"];
        let epochs = run.record.epochs.len();
        parts.push(format!("{v} {:.2}% ({epochs} ep)", 100.0 * acc));
        ensure(acc >= 0.90 && epochs <= 20, || format!("{v}: accuracy {acc} after {epochs} epochs"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 1800.0, || format!("took {secs:.0} s: {}", parts.join(", ")))?;
    Ok(format!("{}; {secs:.0} s total", parts.join(", ")))
}

// ---------------------------------------------------------------- criterion 6

/// `(baseline accuracy, model accuracy, reference reduction)` in percent.
const REFERENCE_REDUCTIONS: [(f64, f64, f64); 22] = [
    (99.16, 99.33, 20.0),
    (99.16, 99.32, 19.0),
    (99.16, 99.42, 31.0),
    (89.71, 90.11, 4.0),
    (89.71, 90.81, 11.0),
    (89.71, 91.62, 19.0),
    (83.29, 83.29, 0.0),
    (83.29, 82.80, -3.0),
    (83.29, 83.22, 0.0),
    (83.29, 77.73, -33.0),
    (45.79, 45.79, 0.0),
    (45.79, 45.74, 0.0),
    (45.79, 46.34, 1.0),
    (45.79, 39.03, -12.0),
    (98.68, 98.68, 0.0),
    (98.68, 99.00, 24.0),
    (98.68, 99.17, 37.0),
    (98.68, 99.17, 37.0),
    (99.23, 99.23, 0.0),
    (99.23, 99.32, 11.0),
    (99.23, 99.31, 10.0),
    (99.23, 98.72, -66.0),
];

fn criterion_6() -> Outcome {
    let mut worst = 0.0f64;
    for (base, model, expected) in REFERENCE_REDUCTIONS {
        let r = ok(error_reduction(model, base))?;
        ensure((r - expected).abs() <= 1.0, || format!("{base} -> {model}: {r:.2}% vs {expected}%"))?;
        worst = worst.max((r - expected).abs());
    }
    let main: Vec<String> = REFERENCE_REDUCTIONS[..6].iter().map(|&(b, m, _)| format!("{:.1}", error_reduction(m, b).unwrap())).collect();
    Ok(format!("{} reference reductions within {worst:.2} points (first six: {}%)", REFERENCE_REDUCTIONS.len(), main.join("/")))
}

// ---------------------------------------------------------------- criterion 7

fn tiny_pool(per_class: &[usize]) -> LabeledDataset {
    let n: usize = per_class.iter().sum();
    let mut labels = Vec::with_capacity(n);
    for (k, &c) in per_class.iter().enumerate() {
        labels.extend(std::iter::repeat_n(Class::from_index(k), c));
    }
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    let images = Tensor::new([n, 1, 2, 2], (0..4 * n).map(|i| (i % 251) as f32 / 255.0).collect()).unwrap();
    LabeledDataset::new("pool", images, labels, per_class.len()).unwrap()
}

fn criterion_7() -> Outcome {
    let pool = tiny_pool(&[6100; 10]);
    let a = ok(make_imbalanced_mnist(&pool, 11))?;
    let b = ok(make_imbalanced_mnist(&pool, 11))?;
    let c = ok(make_imbalanced_mnist(&pool, 12))?;
    let expected: Vec<usize> = (0..10).map(|k| 600 * (k + 1)).collect();
    ensure(a.class_counts() == expected, || format!("imbalanced counts {:?}", a.class_counts()))?;
    ensure(a.images == b.images && a.labels == b.labels, || "imbalanced builder is not seed-deterministic".into())?;
    ensure(a.images != c.images, || "different seeds chose identical subsets".into())?;

    let root = data_root().join("mnist");
    let train = load_idx(root.join("train-images-idx3-ubyte"), root.join("train-labels-idx1-ubyte"))
        .map_err(|e| format!("{e} (run scripts/fetch_mnist.sh)"))?;
    let test = ok(load_idx(root.join("t10k-images-idx3-ubyte"), root.join("t10k-labels-idx1-ubyte")))?;
    let mut notes = Vec::new();
    for (ds, split) in [(&train, "train"), (&test, "test")] {
        let bin = ok(make_binary_mnist(ds))?;
        let counts = ds.class_counts();
        ensure(bin.class_counts() == vec![counts[4], counts[9]], || format!("binary {split} counts changed"))?;
        ensure(bin.num_classes == 2 && bin.len() == counts[4] + counts[9], || "binary keeps other digits".into())?;
        let again = ok(make_binary_mnist(ds))?;
        ensure(again.images == bin.images, || "binary builder is not deterministic".into())?;
        notes.push(format!("binary {split} {:?}", bin.class_counts()));
    }
    let nines = train.class_counts()[9];
    match make_imbalanced_mnist(&train, 0) {
        Err(_) if nines < 6000 => notes.push(format!("full MNIST has {nines} nines < 6000, builder refuses")),
        Err(e) => return Err(format!("imbalanced MNIST failed: {e}")),
        Ok(ds) => ensure(ds.class_counts() == expected, || "imbalanced MNIST counts".into())?,
    }
    let fit = ok(make_imbalanced(&train, 594, 0))?;
    ensure(fit.class_counts() == (1..=10).map(|k| 594 * k).collect::<Vec<_>>(), || "step 594 counts".into())?;
    Ok(format!("600*(k+1) exact on a 10x6100 pool, seed-deterministic; {}", notes.join("; ")))
}

// ---------------------------------------------------------------- criterion 8

fn auroc_oracle(s: &[f64], l: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| l[i]) {
        for j in (0..s.len()).filter(|&j| !l[j]) {
            den += 1.0;
            num += if s[i] > s[j] {
                1.0
            } else if s[i] == s[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

fn aupr_oracle(s: &[f64], l: &[bool]) -> f64 {
    let mut thresholds = s.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let pos = l.iter().filter(|&&v| v).count() as f64;
    let (mut prev, mut area) = (0.0, 0.0);
    for t in thresholds {
        let sel: Vec<usize> = (0..s.len()).filter(|&i| s[i] >= t).collect();
        let tp = sel.iter().filter(|&&i| l[i]).count() as f64;
        area += (tp / pos - prev) * tp / sel.len() as f64;
        prev = tp / pos;
    }
    area
}

/// Every sequence of tie groups `(positives, negatives)`, highest score
/// first, with `p` positives and `n` negatives in total.
fn tie_patterns(p: usize, n: usize) -> Vec<Vec<(usize, usize)>> {
    if p == 0 && n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for gp in 0..=p {
        for gn in 0..=n {
            if gp + gn == 0 {
                continue;
            }
            for mut rest in tie_patterns(p - gp, n - gn) {
                rest.insert(0, (gp, gn));
                out.push(rest);
            }
        }
    }
    out
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut patterns = 0usize;
    let mut worst = 0.0f64;
    for size in 2..=8usize {
        for p in 1..size {
            for groups in tie_patterns(p, size - p) {
                let mut items: Vec<(f64, bool)> = Vec::with_capacity(size);
                for (g, &(gp, gn)) in groups.iter().enumerate() {
                    let score = 1.0 - g as f64 / groups.len() as f64;
                    items.extend(std::iter::repeat_n((score, true), gp));
                    items.extend(std::iter::repeat_n((score, false), gn));
                }
                items.shuffle(&mut rng);
                let s: Vec<f64> = items.iter().map(|i| i.0).collect();
                let l: Vec<bool> = items.iter().map(|i| i.1).collect();
                let e1 = (ok(auroc(&s, &l))? - auroc_oracle(&s, &l)).abs();
                let e2 = (ok(aupr(&s, &l))? - aupr_oracle(&s, &l)).abs();
                worst = worst.max(e1).max(e2);
                ensure(e1 <= 1e-12 && e2 <= 1e-12, || format!("scores {s:?} labels {l:?}: errors {e1:e}, {e2:e}"))?;
                patterns += 1;
            }
        }
    }
    Ok(format!("all {patterns} distinct tie/label patterns of size 2..=8, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9() -> Outcome {
    let (classes, h) = (4, 12);
    let mut forwards = 0;
    for v in Variant::ALL {
        for m in 0..10u64 {
            let mut cfg = ModelConfig::new(v, classes, 1, h, h);
            cfg.shared_encoder = m % 2 == 0;
            let mut model = ok(AdvocacyModel::<f32>::new(cfg, &mut stream_rng(m, "init"), stream_rng(m, "dropout")))?;
            for f in 0..10u64 {
                model.set_mode(if f % 2 == 0 { Mode::Train } else { Mode::Eval });
                let mut rng = ChaCha8Rng::seed_from_u64(m * 100 + f);
                let x = Tensor::new([3, 1, h, h], (0..3 * h * h).map(|_| rng.gen_range(0.0f32..1.0)).collect()).unwrap();
                let r = ok(model.full_forward(&x))?;
                for (a, e) in r.attention.iter().zip(&r.evidence) {
                    ensure(a.data().iter().all(|v| (0.0..=1.0).contains(v)), || format!("{v}: attention outside [0, 1]"))?;
                    let exact = a.data().iter().zip(x.data()).zip(e.data()).all(|((a, x), e)| a * x == *e);
                    ensure(exact, || format!("{v}: evidence differs from a * x"))?;
                }
                for row in r.log_probs.data().chunks(classes) {
                    let total: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
                    ensure((total - 1.0).abs() <= 1e-6, || format!("{v}: softmax sums to {total}"))?;
                }
                let preds = argmax_rows(&r.log_probs);
                for (row, p) in r.log_probs.data().chunks(classes).zip(&preds) {
                    let best = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let first = row.iter().position(|&v| v == best).unwrap();
                    ensure(p.index() == first, || format!("{v}: argmax picked {p} over column {first}"))?;
                }
                forwards += 1;
            }
        }
    }
    let ties = Tensor::new([3, 4], vec![0.5f64, 0.5, 0.1, 0.5, 0.0, 0.0, 0.0, 0.0, -1.0, 2.0, 2.0, 1.0]).unwrap();
    let got: Vec<usize> = argmax_rows(&ties).iter().map(|c| c.get()).collect();
    ensure(got == [1, 1, 2], || format!("tie-breaking gave {got:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let vals: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| rng.gen_range(0..3) as f64 / 2.0).collect();
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(Tensor::new([2, 3, 4, 4], vals.clone()).unwrap());
        let y = ok(tp.maxpool2d(x, 2))?;
        let s = tp.sum(y);
        let g = ok(tp.backward(s, &[x]))?.take(x).unwrap();
        for plane in 0..6 {
            for (oy, ox) in (0..2).flat_map(|a| (0..2).map(move |b| (a, b))) {
                let idx: Vec<usize> = (0..4).map(|k| plane * 16 + (2 * oy + k / 2) * 4 + 2 * ox + k % 2).collect();
                let winners: Vec<usize> = idx.iter().copied().filter(|&i| g.data()[i] != 0.0).collect();
                let best = idx.iter().map(|&i| vals[i]).fold(f64::NEG_INFINITY, f64::max);
                let first = *idx.iter().find(|&&i| vals[i] == best).unwrap();
                ensure(winners == [first] && g.data()[first] == 1.0, || format!("pool window mask {winners:?}"))?;
            }
        }
    }
    Ok(format!("{forwards} random forwards ({} per variant), tie rows, 100 max-pool masks with ties", forwards / 4))
}

// ---------------------------------------------------------------- criterion 10

fn criterion_10() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let text = ok(std::fs::read_to_string(workspace().join("configs/synthetic.toml")))?
        .replace("train_per_class = 200", "train_per_class = 40")
        .replace("max_epochs = 3", "max_epochs = 2");
    let cfg_path = dir.path().join("det.toml");
    ok(std::fs::write(&cfg_path, text))?;
    let mut files = Vec::new();
    for k in 0..2 {
        let inv = Invocation { config: cfg_path.clone(), out: Some(dir.path().join(format!("run{k}"))), ..Default::default() };
        let manifest = ok(cmd_train(&inv))?;
        ok(manifest.verify())?;
        let metrics = manifest.artifacts.iter().find(|p| p.ends_with("metrics.txt")).cloned();
        files.push(metrics.ok_or("manifest lists no metrics file")?);
    }
    let a = ok(std::fs::read(&files[0]))?;
    let b = ok(std::fs::read(&files[1]))?;
    ensure(a == b, || "metrics files differ".into())?;
    let ckpt = |k: usize| std::fs::read(files[k].with_file_name("checkpoint.bin")).unwrap_or_default();
    ensure(ckpt(0) == ckpt(1) && !ckpt(0).is_empty(), || "checkpoints differ".into())?;
    Ok(format!("two train runs: metrics ({} bytes) and checkpoints bit-identical", a.len()))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut runs = HashMap::new();
    type Criterion<'a> = (&'a str, Box<dyn FnMut() -> Outcome + 'a>);
    let runs_cell = std::cell::RefCell::new(&mut runs);
    let criteria: Vec<Criterion> = vec![
        ("1 gradient fidelity", Box::new(criterion_1)),
        ("2 update schedule and freeze isolation", Box::new(criterion_2)),
        ("3 loss oracles", Box::new(criterion_3)),
        ("4 synthetic bars", Box::new(|| criterion_4(&mut runs_cell.borrow_mut()))),
        ("5 MNIST desk scale", Box::new(criterion_5)),
        ("6 error-rate reduction arithmetic", Box::new(criterion_6)),
        ("7 dataset variants", Box::new(criterion_7)),
        ("8 ranking metric oracles", Box::new(criterion_8)),
        ("9 forward invariants", Box::new(criterion_9)),
        ("10 determinism", Box::new(criterion_10)),
        ("11 frozen judge direction", Box::new(|| criterion_11(&mut runs_cell.borrow_mut()))),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, mut f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{secs:.1} s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why} [{secs:.1} s]");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
