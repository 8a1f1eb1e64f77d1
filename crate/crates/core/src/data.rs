//! Datasets: IDX ingestion, the MNIST variants, a synthetic bar corpus, and
//! seeded splitting and batching.

use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::class::Class;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// Classes in every MNIST-family IDX dataset.
pub const IDX_CLASSES: usize = 10;

/// Images `S×C×H×W` in `[0, 1]` with 1-based labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub images: Tensor<f32>,
    pub labels: Vec<Class>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, images: Tensor<f32>, labels: Vec<Class>, num_classes: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::Shape(format!("dataset images must be S x C x H x W, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Shape(format!("{} images but {} labels", images.shape()[0], labels.len())));
        }
        if let Some(bad) = labels.iter().find(|c| c.get() > num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} exceeds {num_classes} classes")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("image values must lie in [0, 1]".into()));
        }
        Ok(Self { name: name.into(), images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Examples per class, index 0 for class 1.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for c in &self.labels {
            counts[c.index()] += 1;
        }
        counts
    }

    /// The examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument(format!("empty subset of `{}`", self.name)));
        }
        Ok(Self {
            name: self.name.clone(),
            images: self.images.gather_outer(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<Class>)> {
        Ok((self.images.gather_outer(indices)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format { what, message: format!("truncated header ({} bytes)", bytes.len()) })
}

/// Parse an IDX image file into `S×1×H×W` pixels scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    const WHAT: &str = "IDX images";
    let magic = be_u32(bytes, 0, WHAT)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format { what: WHAT, message: format!("expected magic {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}") });
    }
    let count = be_u32(bytes, 4, WHAT)? as usize;
    let rows = be_u32(bytes, 8, WHAT)? as usize;
    let cols = be_u32(bytes, 12, WHAT)? as usize;
    let body = &bytes[16..];
    let want = count * rows * cols;
    if body.len() != want {
        return Err(Error::Format {
            what: WHAT,
            message: format!("header declares {count}x{rows}x{cols} = {want} pixels, file holds {}", body.len()),
        });
    }
    Tensor::new(vec![count, 1, rows, cols], body.iter().map(|&b| b as f32 / 255.0).collect())
}

/// Parse an IDX label file into 1-based classes (digit `k` is class `k + 1`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<Class>> {
    const WHAT: &str = "IDX labels";
    let magic = be_u32(bytes, 0, WHAT)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format { what: WHAT, message: format!("expected magic {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}") });
    }
    let count = be_u32(bytes, 4, WHAT)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Format { what: WHAT, message: format!("header declares {count} labels, file holds {}", body.len()) });
    }
    body.iter().map(|&b| Class::new(b as usize + 1, IDX_CLASSES)).collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = parse_idx_images(&read(ip)?)?;
    let labels = parse_idx_labels(&read(lp)?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Format {
            what: "IDX pair",
            message: format!("{} images in {} but {} labels in {}", images.shape()[0], ip.display(), labels.len(), lp.display()),
        });
    }
    let name = ip.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    LabeledDataset::new(name, images, labels, IDX_CLASSES)
}

/// Encode a single-channel dataset as an IDX image/label pair.
pub fn encode_idx(ds: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let [c, h, w] = ds.image_shape();
    if c != 1 {
        return Err(Error::Shape(format!("IDX stores single-channel images, got {c} channels")));
    }
    if ds.num_classes > 256 {
        return Err(Error::InvalidArgument("IDX labels are single bytes".into()));
    }
    let mut images = Vec::with_capacity(16 + ds.images.numel());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, h as u32, w as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(ds.images.data().iter().map(|&p| (p * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS_MAGIC, ds.len() as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    labels.extend(ds.labels.iter().map(|c| c.index() as u8));
    Ok((images, labels))
}

pub fn write_idx(ds: &LabeledDataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (images, labels) = encode_idx(ds)?;
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    std::fs::write(ip, images).map_err(|e| Error::io(ip, e))?;
    std::fs::write(lp, labels).map_err(|e| Error::io(lp, e))
}

/// Keep `step·(k+1)` uniformly sampled examples of the class at 0-based position `k`.
pub fn make_imbalanced(ds: &LabeledDataset, step: usize, seed: u64) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for k in 0..ds.num_classes {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i].index() == k).collect();
        let want = step * (k + 1);
        if members.len() < want {
            return Err(Error::InvalidArgument(format!("class {} has {} examples, imbalanced split needs {want}", k + 1, members.len())));
        }
        keep.extend(sample(&mut rng, members.len(), want).into_iter().map(|j| members[j]));
    }
    keep.sort_unstable();
    let mut out = ds.subset(&keep)?;
    out.name = format!("{}-imbalanced", ds.name);
    Ok(out)
}

/// Digit `k` keeps exactly `600·(k+1)` training examples.
pub fn make_imbalanced_mnist(train: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    if train.num_classes != IDX_CLASSES {
        return Err(Error::InvalidArgument(format!("expected 10-class MNIST, got {} classes", train.num_classes)));
    }
    make_imbalanced(train, 600, seed)
}

/// Only digits 4 and 9, relabeled as classes 1 and 2.
pub fn make_binary_mnist(ds: &LabeledDataset) -> Result<LabeledDataset> {
    let (four, nine) = (Class::from_index(4), Class::from_index(9));
    let keep: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == four || ds.labels[i] == nine).collect();
    let mut out = ds.subset(&keep)?;
    out.labels = out.labels.iter().map(|&c| Class::from_index(usize::from(c == nine))).collect();
    out.num_classes = 2;
    out.name = format!("{}-binary", ds.name);
    Ok(out)
}

/// Class `k` (0-based) is a full-width bar of value 1 on row `k` over uniform
/// noise in `[0, σ]`. Examples cycle through the classes.
pub fn make_synthetic_bars(num_classes: usize, samples_per_class: usize, extent: usize, sigma: f64, seed: u64) -> Result<LabeledDataset> {
    if num_classes < 2 || num_classes > extent {
        return Err(Error::InvalidArgument(format!("need 2 <= num_classes <= extent, got {num_classes} and {extent}")));
    }
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::InvalidArgument(format!("noise level must be in [0, 1], got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = num_classes * samples_per_class;
    let plane = extent * extent;
    let mut data = Vec::with_capacity(total * plane);
    let mut labels = Vec::with_capacity(total);
    for j in 0..total {
        let k = j % num_classes;
        for r in 0..extent {
            for _ in 0..extent {
                let noise = if sigma > 0.0 { rng.gen_range(0.0..=sigma) } else { 0.0 };
                data.push(if r == k { 1.0 } else { noise as f32 });
            }
        }
        labels.push(Class::from_index(k));
    }
    LabeledDataset::new("synthetic-bars", Tensor::new(vec![total, 1, extent, extent], data)?, labels, num_classes)
}

/// Deterministic batch order for `(shuffle_seed, epoch)`; the last partial batch is kept.
pub fn batches(len: usize, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Seeded uniform train/validation split of `0..len`; both index sets sorted.
pub fn split_indices(len: usize, validation_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("validation fraction must be in (0, 1), got {validation_fraction}")));
    }
    let n_val = ((len as f64 * validation_fraction).round() as usize).max(1);
    if len < n_val + 2 {
        return Err(Error::InvalidArgument(format!("{len} examples are too few to split off {n_val} for validation")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}
