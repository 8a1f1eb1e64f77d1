//! TOML experiment configuration and dataset resolution.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_idx, make_binary_mnist, make_imbalanced, make_synthetic_bars, LabeledDataset, IDX_CLASSES};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::optim::OptimConfig;
use crate::seed;
use crate::training::TrainConfig;

/// Relative dataset paths resolve against this directory when it is set.
pub const DATA_ROOT_ENV: &str = "ADVOCACY_DATA_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    None,
    /// Training class `k` (0-based) keeps `imbalance_step * (k + 1)` examples.
    Imbalanced,
    /// Digits 4 and 9 only, relabelled as classes 1 and 2.
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    SyntheticBars {
        classes: usize,
        extent: usize,
        sigma: f64,
        train_per_class: usize,
        test_per_class: usize,
    },
    Idx {
        name: String,
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep a seeded random subset of this many training examples.
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
        #[serde(default)]
        transform: Transform,
        #[serde(default = "default_imbalance_step")]
        imbalance_step: usize,
    },
}

fn default_imbalance_step() -> usize {
    600
}

/// Architecture options; class count and image geometry come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOptions {
    pub shared_encoder: bool,
    pub judge_blocks: usize,
    pub advocate_blocks: usize,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self { shared_encoder: true, judge_blocks: 0, advocate_blocks: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareOptions {
    pub variants: Vec<Variant>,
    /// `[a, b]`: the averaged confusion difference `mean(a) - mean(b)`.
    #[serde(default)]
    pub confusion_pair: Option<[Variant; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Variant trained by `train` and expected by `frozen-judge`.
    pub variant: Variant,
    /// Master seeds; `train` uses the first, `compare` all of them.
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Seed of the training/test subsampling, shared by every run.
    #[serde(default)]
    pub data_seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelOptions,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub compare: Option<CompareOptions>,
}

/// Training pool and test set of one experiment.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e.span().map_or_else(|| "config".to_string(), |s| field_at(text, s.start));
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "list at least one seed"));
        }
        match &self.dataset {
            DatasetSpec::SyntheticBars { classes, extent, sigma, train_per_class, test_per_class } => {
                if *classes < 2 || classes > extent {
                    return Err(Error::config("dataset.classes", format!("need 2..={extent} classes, got {classes}")));
                }
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    return Err(Error::config("dataset.sigma", "must be finite and non-negative"));
                }
                if *train_per_class == 0 || *test_per_class == 0 {
                    return Err(Error::config("dataset.train_per_class", "per-class counts must be positive"));
                }
            }
            DatasetSpec::Idx { train_limit, test_limit, imbalance_step, transform, .. } => {
                if *train_limit == Some(0) {
                    return Err(Error::config("dataset.train_limit", "must be positive"));
                }
                if *test_limit == Some(0) {
                    return Err(Error::config("dataset.test_limit", "must be positive"));
                }
                if *transform == Transform::Imbalanced && *imbalance_step == 0 {
                    return Err(Error::config("dataset.imbalance_step", "must be positive"));
                }
            }
        }
        if let Some(c) = &self.compare {
            if c.variants.len() < 2 {
                return Err(Error::config("compare.variants", "list at least two variants"));
            }
            if let Some(pair) = c.confusion_pair {
                if let Some(v) = pair.iter().find(|v| !c.variants.contains(v)) {
                    return Err(Error::config("compare.confusion_pair", format!("`{v}` is not in compare.variants")));
                }
            }
        }
        self.train.validate()?;
        self.optim.validate()?;
        self.model_config(self.variant)?.validate()
    }

    /// Number of classes and `[C, H, W]` implied by the dataset spec.
    pub fn data_geometry(&self) -> (usize, [usize; 3]) {
        match &self.dataset {
            DatasetSpec::SyntheticBars { classes, extent, .. } => (*classes, [1, *extent, *extent]),
            DatasetSpec::Idx { transform: Transform::Binary, .. } => (2, [1, 28, 28]),
            DatasetSpec::Idx { .. } => (IDX_CLASSES, [1, 28, 28]),
        }
    }

    pub fn model_config(&self, variant: Variant) -> Result<ModelConfig> {
        let (classes, [c, h, w]) = self.data_geometry();
        let mut m = ModelConfig::new(variant, classes, c, h, w);
        m.shared_encoder = self.model.shared_encoder;
        m.judge_blocks = self.model.judge_blocks;
        m.advocate_blocks = self.model.advocate_blocks;
        Ok(m)
    }

    /// Training config for one master seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }

    /// Builds the training pool and test set. Relative IDX paths resolve
    /// against `data_root` when given.
    pub fn load_data(&self, data_root: Option<&Path>) -> Result<ExperimentData> {
        let data_rng_seed = seed::derive_seed(self.data_seed, seed::DATA);
        match &self.dataset {
            DatasetSpec::SyntheticBars { classes, extent, sigma, train_per_class, test_per_class } => {
                let train = make_synthetic_bars(*classes, *train_per_class, *extent, *sigma, data_rng_seed)?;
                let test = make_synthetic_bars(*classes, *test_per_class, *extent, *sigma, seed::splitmix64(data_rng_seed))?;
                Ok(ExperimentData { train, test })
            }
            DatasetSpec::Idx {
                name,
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
                transform,
                imbalance_step,
            } => {
                let resolve = |p: &PathBuf| match data_root {
                    Some(root) if p.is_relative() => root.join(p),
                    _ => p.clone(),
                };
                let mut train = load_idx(resolve(train_images), resolve(train_labels))?;
                let mut test = load_idx(resolve(test_images), resolve(test_labels))?;
                train.name = format!("{name}-train");
                test.name = format!("{name}-test");
                match transform {
                    Transform::None => {}
                    Transform::Imbalanced => train = make_imbalanced(&train, *imbalance_step, data_rng_seed)?,
                    Transform::Binary => {
                        train = make_binary_mnist(&train)?;
                        test = make_binary_mnist(&test)?;
                    }
                }
                let train = limit(train, *train_limit, data_rng_seed)?;
                let test = limit(test, *test_limit, seed::splitmix64(data_rng_seed))?;
                Ok(ExperimentData { train, test })
            }
        }
    }
}

/// A sorted seeded sample of `n` examples, or the whole set when `n` covers it.
fn limit(ds: LabeledDataset, n: Option<usize>, seed: u64) -> Result<LabeledDataset> {
    match n {
        Some(n) if n < ds.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut keep = rand::seq::index::sample(&mut rng, ds.len(), n).into_vec();
            keep.sort_unstable();
            let mut out = ds.subset(&keep)?;
            out.name = format!("{}-{n}", ds.name);
            Ok(out)
        }
        _ => Ok(ds),
    }
}

/// Dotted `section.key` of the entry on the line holding byte `offset`.
fn field_at(text: &str, offset: usize) -> String {
    let mut section = String::new();
    let mut key = String::new();
    let mut pos = 0;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            section = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            key = k.trim().to_string();
        }
        pos += line.len() + 1;
        if pos > offset {
            break;
        }
    }
    match (section.is_empty(), key.is_empty()) {
        (true, true) => "config".to_string(),
        (true, false) => key,
        (false, true) => section,
        (false, false) => format!("{section}.{key}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BARS: &str = r#"
variant = "advocacy"
seeds = [0]
out_dir = "runs/bars"

[dataset]
kind = "synthetic_bars"
classes = 4
extent = 28
sigma = 0.2
train_per_class = 5
test_per_class = 2

[train]
batch_size = 8
max_epochs = 1
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(BARS).unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.patience, TrainConfig::default().patience);
        assert_eq!(cfg.optim, OptimConfig::default());
        assert!(cfg.model.shared_encoder);
        let m = cfg.model_config(Variant::Attention).unwrap();
        assert_eq!((m.num_classes, m.input_shape()), (4, [1, 28, 28]));
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn field_level_errors() {
        let bad = BARS.replace("max_epochs = 1", "max_epochs = 1\nvalidation_fraction = 1.5");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "train.validation_fraction"), "{err}");

        let typo = BARS.replace("batch_size = 8", "batch_sise = 8");
        let err = ExperimentConfig::from_toml(&typo).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "train.batch_sise"), "{err}");

        let err = ExperimentConfig::from_toml(&BARS.replace("seeds = [0]", "seeds = []")).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "seeds"));

        let err = ExperimentConfig::from_toml(&BARS.replace("\"advocacy\"", "\"advocate\"")).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "variant"), "{err}");
    }

    #[test]
    fn compare_section_is_checked() {
        let one = format!("{BARS}\n[compare]\nvariants = [\"advocacy\"]\n");
        assert!(ExperimentConfig::from_toml(&one).is_err());
        let pair =
            format!("{BARS}\n[compare]\nvariants = [\"advocacy\", \"attention\"]\nconfusion_pair = [\"multi_attention\", \"advocacy\"]\n");
        let err = ExperimentConfig::from_toml(&pair).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "compare.confusion_pair"));
    }

    #[test]
    fn synthetic_data_is_seeded() {
        let cfg = ExperimentConfig::from_toml(BARS).unwrap();
        let a = cfg.load_data(None).unwrap();
        let b = cfg.load_data(None).unwrap();
        assert_eq!(a.train.images, b.train.images);
        assert_eq!((a.train.len(), a.test.len()), (20, 8));
        assert_ne!(a.train.images.data()[..784], a.test.images.data()[..784]);
    }

    #[test]
    fn missing_idx_files_are_io_errors() {
        let text = r#"
variant = "attention"
seeds = [1]
out_dir = "out"
[dataset]
kind = "idx"
name = "mnist"
train_images = "nope-images"
train_labels = "nope-labels"
test_images = "nope-images"
test_labels = "nope-labels"
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = cfg.load_data(Some(dir.path())).unwrap_err();
        assert!(matches!(&err, Error::Io { path, .. } if path.starts_with(dir.path())));
    }
}
