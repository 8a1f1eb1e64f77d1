//! Subcommand implementations behind the `advocacy` binary.
//!
//! Every command writes its artifacts under the output directory and a
//! `manifest.toml` listing them, written last.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::autodiff::Mode;
use crate::checkpoint;
use crate::class::Class;
use crate::config::{ExperimentConfig, ExperimentData};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{
    aupr, auroc, confusion_diff, error_reduction, export_evidence_images, matrix_csv, mean_std, ConfusionMatrix, MetricsTable,
    ScoredPredictions,
};
use crate::model::{AdvocacyModel, Variant};
use crate::seed::{self, stream_rng};
use crate::training::{continue_with_frozen_judge, fit, RunRecord};

pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Options shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Invocation {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed_override: Option<u64>,
    pub data_root: Option<PathBuf>,
}

impl Invocation {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed_override {
            cfg.seeds = vec![s];
        }
        let out = self.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
        Ok((cfg, out))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub library_version: String,
    pub started_unix_seconds: u64,
    pub finished_unix_seconds: u64,
    pub wall_clock_seconds: f64,
    pub artifacts: Vec<PathBuf>,
    pub config: String,
}

impl RunManifest {
    /// Fails if any listed artifact is missing.
    pub fn verify(&self) -> Result<()> {
        match self.artifacts.iter().find(|p| !p.is_file()) {
            Some(p) => Err(Error::InvalidArgument(format!("manifest lists missing artifact {}", p.display()))),
            None => Ok(()),
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format { what: "manifest", message: e.to_string() })
    }
}

struct ManifestBuilder {
    command: &'static str,
    config: String,
    started: SystemTime,
    clock: Instant,
    artifacts: Vec<PathBuf>,
}

impl ManifestBuilder {
    fn new(command: &'static str, cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self { command, config: cfg.to_toml()?, started: SystemTime::now(), clock: Instant::now(), artifacts: Vec::new() })
    }

    fn write(&mut self, path: PathBuf, bytes: impl AsRef<[u8]>) -> Result<()> {
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.artifacts.push(path);
        Ok(())
    }

    fn finish(self, dir: &Path) -> Result<RunManifest> {
        let unix = |t: SystemTime| t.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let manifest = RunManifest {
            command: self.command.to_string(),
            library_version: LIBRARY_VERSION.to_string(),
            started_unix_seconds: unix(self.started),
            finished_unix_seconds: unix(SystemTime::now()),
            wall_clock_seconds: self.clock.elapsed().as_secs_f64(),
            artifacts: self.artifacts,
            config: self.config,
        };
        manifest.verify()?;
        let path = dir.join("manifest.toml");
        let text = toml::to_string(&manifest).map_err(|e| Error::Format { what: "manifest", message: e.to_string() })?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Test-set metrics of a trained model: accuracy and mean cross-entropy,
/// plus AUROC/AUPR of the class-2 score for two-class data.
pub fn test_metrics(model: &AdvocacyModel<f32>, test: &LabeledDataset, chunk: usize) -> Result<(BTreeMap<String, f64>, ConfusionMatrix)> {
    let log_probs = model.log_probs(&test.images, chunk)?;
    let n = model.num_classes();
    let loss = test.labels.iter().enumerate().map(|(r, y)| -(log_probs.data()[r * n + y.index()] as f64)).sum::<f64>() / test.len() as f64;
    let scored = ScoredPredictions::from_log_probs(&log_probs, test.labels.clone())?;
    let mut m = BTreeMap::new();
    m.insert("accuracy".to_string(), scored.accuracy()?);
    m.insert("loss".to_string(), loss);
    if n == 2 {
        let positive = Class::from_index(1);
        let labels: Vec<bool> = test.labels.iter().map(|&y| y == positive).collect();
        let scores = scored.class_scores(positive);
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            m.insert("auroc".to_string(), auroc(&scores, &labels)?);
            m.insert("aupr".to_string(), aupr(&scores, &labels)?);
        }
    }
    Ok((m, scored.confusion()?))
}

/// One trained model with its record and test confusion matrix.
pub struct TrainedRun {
    pub model: AdvocacyModel<f32>,
    pub record: RunRecord,
    pub confusion: ConfusionMatrix,
}

/// Builds, fits and tests one variant for one master seed. The record's
/// wall-clock field is cleared so it depends only on the inputs.
pub fn train_run(cfg: &ExperimentConfig, data: &ExperimentData, variant: Variant, seed: u64) -> Result<TrainedRun> {
    let model_cfg = cfg.model_config(variant)?;
    let train_cfg = cfg.train_config(seed);
    let mut model = AdvocacyModel::new(model_cfg, &mut stream_rng(seed, seed::INIT), stream_rng(seed, seed::DROPOUT))?;
    let mut record = fit(&mut model, &data.train, &train_cfg, &cfg.optim)?;
    let (metrics, confusion) = test_metrics(&model, &data.test, train_cfg.eval_batch_size)?;
    record.test_metrics = metrics;
    record.wall_clock_seconds = None;
    Ok(TrainedRun { model, record, confusion })
}

fn run_dir(out: &Path, variant: Variant, seed: u64) -> PathBuf {
    out.join(format!("{variant}-seed{seed}"))
}

fn write_run(m: &mut ManifestBuilder, dir: &Path, run: &TrainedRun) -> Result<()> {
    create_dir(dir)?;
    m.write(dir.join("metrics.txt"), run.record.to_text())?;
    m.write(dir.join("confusion.csv"), run.confusion.to_csv())?;
    m.write(dir.join("checkpoint.bin"), checkpoint::encode(&run.model)?)
}

/// Trains `variant` with the first seed and writes checkpoint, metrics and
/// confusion matrix to `<out>/<variant>-seed<seed>/`.
pub fn cmd_train(inv: &Invocation) -> Result<RunManifest> {
    let (cfg, out) = inv.load()?;
    let data = cfg.load_data(inv.data_root.as_deref())?;
    let seed = cfg.seeds[0];
    let mut m = ManifestBuilder::new("train", &cfg)?;
    let run = train_run(&cfg, &data, cfg.variant, seed)?;
    let dir = run_dir(&out, cfg.variant, seed);
    write_run(&mut m, &dir, &run)?;
    m.finish(&dir)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub variant: Variant,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: Option<f64>,
    /// Percent reduction of the mean error rate relative to `attention`.
    pub error_reduction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareSummary {
    pub rows: Vec<SummaryRow>,
    pub warnings: Vec<String>,
}

impl CompareSummary {
    /// Human-readable table with accuracies in percent.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<16} {:>4} {:>16} {:>10}\n", "variant", "runs", "accuracy %", "err. red.");
        for r in &self.rows {
            let acc = match r.std_accuracy {
                Some(sd) => format!("{:.2} ± {:.2}", 100.0 * r.mean_accuracy, 100.0 * sd),
                None => format!("{:.2}", 100.0 * r.mean_accuracy),
            };
            let red = r.error_reduction.map_or_else(|| "-".to_string(), |e| format!("{:.0}%", e));
            let _ = writeln!(s, "{:<16} {:>4} {:>16} {:>10}", r.variant.as_str(), r.runs, acc, red);
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut t = MetricsTable::new(&["variant", "runs", "mean_accuracy", "std_accuracy", "error_reduction_percent"]);
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:?}"));
        for r in &self.rows {
            t.push(vec![
                r.variant.to_string(),
                r.runs.to_string(),
                format!("{:?}", r.mean_accuracy),
                opt(r.std_accuracy),
                opt(r.error_reduction),
            ])?;
        }
        Ok(t.to_csv())
    }
}

/// Mean and sample deviation of accuracy per variant, in the order given,
/// with error reduction against the `attention` baseline when it is present.
pub fn summarize(variants: &[Variant], accuracies: &[(Variant, f64)]) -> Result<CompareSummary> {
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &v in variants {
        let accs: Vec<f64> = accuracies.iter().filter(|(w, _)| *w == v).map(|(_, a)| *a).collect();
        let (mean, std) = mean_std(&accs).ok_or_else(|| Error::InvalidArgument(format!("no runs of `{v}`")))?;
        if std.is_none() {
            warnings.push(format!("`{v}` has a single run; standard deviation omitted"));
        }
        rows.push(SummaryRow { variant: v, runs: accs.len(), mean_accuracy: mean, std_accuracy: std, error_reduction: None });
    }
    if let Some(base) = rows.iter().find(|r| r.variant == Variant::Attention).map(|r| r.mean_accuracy) {
        for r in &mut rows {
            r.error_reduction = match error_reduction(r.mean_accuracy, base) {
                Ok(e) => Some(e),
                Err(_) => {
                    warnings.push("baseline accuracy is 1; error reduction omitted".to_string());
                    None
                }
            };
        }
        warnings.dedup();
    }
    Ok(CompareSummary { rows, warnings })
}

/// Trains every compared variant for every seed and writes per-run
/// artifacts, `runs.csv`, `summary.csv`, `summary.txt` and, when a pair is
/// configured, `confusion_diff.csv`.
pub fn cmd_compare(inv: &Invocation) -> Result<(RunManifest, CompareSummary)> {
    let (cfg, out) = inv.load()?;
    let compare = cfg.compare.clone().ok_or_else(|| Error::config("compare", "the compare command needs a [compare] section"))?;
    let data = cfg.load_data(inv.data_root.as_deref())?;
    create_dir(&out)?;
    let mut m = ManifestBuilder::new("compare", &cfg)?;
    let mut table = MetricsTable::new(&["variant", "seed", "accuracy", "loss", "best_epoch", "epochs"]);
    let mut accuracies = Vec::new();
    let mut confusions: BTreeMap<&str, Vec<ConfusionMatrix>> = BTreeMap::new();
    for &variant in &compare.variants {
        for &seed in &cfg.seeds {
            let run = train_run(&cfg, &data, variant, seed)?;
            write_run(&mut m, &run_dir(&out, variant, seed), &run)?;
            let acc = run.record.test_metrics["accuracy"];
            table.push(vec![
                variant.to_string(),
                seed.to_string(),
                format!("{acc:?}"),
                format!("{:?}", run.record.test_metrics["loss"]),
                run.record.best_epoch.to_string(),
                run.record.epochs.len().to_string(),
            ])?;
            accuracies.push((variant, acc));
            confusions.entry(variant.as_str()).or_default().push(run.confusion);
        }
    }
    let summary = summarize(&compare.variants, &accuracies)?;
    m.write(out.join("runs.csv"), table.to_csv())?;
    m.write(out.join("summary.csv"), summary.to_csv()?)?;
    m.write(out.join("summary.txt"), summary.to_table())?;
    if let Some([a, b]) = compare.confusion_pair {
        let diff = confusion_diff(&confusions[a.as_str()], &confusions[b.as_str()])?;
        m.write(out.join("confusion_diff.csv"), matrix_csv(&diff))?;
    }
    Ok((m.finish(&out)?, summary))
}

fn load_matching(path: &Path, cfg: &ExperimentConfig) -> Result<AdvocacyModel<f32>> {
    let model: AdvocacyModel<f32> = checkpoint::load(path)?;
    if model.variant() != cfg.variant {
        return Err(Error::config("variant", format!("checkpoint holds `{}`, config names `{}`", model.variant(), cfg.variant)));
    }
    let expected = cfg.model_config(cfg.variant)?;
    if *model.config() != expected {
        return Err(Error::config("model", format!("checkpoint architecture {:?} differs from config {expected:?}", model.config())));
    }
    Ok(model)
}

/// Continues a checkpointed model with the judge frozen for
/// `train.frozen_judge_epochs` passes over the training pool and reports
/// test accuracy before and after.
pub fn cmd_frozen_judge(inv: &Invocation, checkpoint_path: &Path) -> Result<(RunManifest, RunRecord)> {
    let (cfg, out) = inv.load()?;
    let mut model = load_matching(checkpoint_path, &cfg)?;
    let data = cfg.load_data(inv.data_root.as_deref())?;
    let train_cfg = cfg.train_config(cfg.seeds[0]);
    let mut m = ManifestBuilder::new("frozen-judge", &cfg)?;
    let mut record =
        continue_with_frozen_judge(&mut model, &data.train, &data.test, train_cfg.frozen_judge_epochs, &train_cfg, &cfg.optim)?;
    record.wall_clock_seconds = None;
    let dir = out.join(format!("{}-frozen-judge", cfg.variant));
    create_dir(&dir)?;
    m.write(dir.join("metrics.txt"), record.to_text())?;
    m.write(dir.join("checkpoint.bin"), checkpoint::encode(&model)?)?;
    Ok((m.finish(&dir)?, record))
}

/// Writes the input and per-class evidence images of test example `index`
/// (0-based) to `<out>/evidence-<index>/`.
pub fn cmd_export_attention(inv: &Invocation, checkpoint_path: &Path, index: usize) -> Result<RunManifest> {
    let (cfg, out) = inv.load()?;
    let mut model = load_matching(checkpoint_path, &cfg)?;
    let data = cfg.load_data(inv.data_root.as_deref())?;
    if index >= data.test.len() {
        return Err(Error::InvalidArgument(format!("image index {index} out of range for {} test examples", data.test.len())));
    }
    model.set_mode(Mode::Eval);
    let (x, _) = data.test.batch(&[index])?;
    let dir = out.join(format!("evidence-{index}"));
    let mut m = ManifestBuilder::new("export-attention", &cfg)?;
    m.artifacts = export_evidence_images(&model, &x, &dir)?;
    m.finish(&dir)
}
