//! Evaluation metrics, confusion matrices, error-rate reduction and PGM
//! export of attention evidence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Mode;
use crate::class::Class;
use crate::error::{Error, Result};
use crate::model::AdvocacyModel;
use crate::tensor::{Scalar, Tensor};

pub fn accuracy(preds: &[Class], labels: &[Class]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("accuracy: {} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty prediction set".into()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// N x N counts; rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { n: num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn from_predictions(preds: &[Class], labels: &[Class], num_classes: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::InvalidArgument(format!("confusion matrix: {} predictions for {} labels", preds.len(), labels.len())));
        }
        let mut m = Self::new(num_classes);
        for (&p, &y) in preds.iter().zip(labels) {
            m.record(y, p)?;
        }
        Ok(m)
    }

    pub fn record(&mut self, truth: Class, pred: Class) -> Result<()> {
        if truth.get() > self.n || pred.get() > self.n {
            return Err(Error::InvalidArgument(format!("confusion matrix over {} classes cannot record ({truth}, {pred})", self.n)));
        }
        self.counts[truth.index() * self.n + pred.index()] += 1;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: Class, pred: Class) -> u64 {
        self.counts[truth.index() * self.n + pred.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks(self.n).map(|r| r.iter().sum()).collect()
    }

    /// Header row of predicted classes, then one row per true class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for j in 1..=self.n {
            let _ = write!(s, ",{j}");
        }
        s.push('\n');
        for (i, row) in self.counts.chunks(self.n).enumerate() {
            let _ = write!(s, "{}", i + 1);
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }
}

/// Entrywise `mean(a) - mean(b)` with the diagonal set to zero. A positive
/// entry (i, j) means the `b` runs made fewer i -> j mistakes.
pub fn confusion_diff(a: &[ConfusionMatrix], b: &[ConfusionMatrix]) -> Result<Vec<Vec<f64>>> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Shape(format!("confusion_diff over {} and {} matrices", a.len(), b.len())));
    }
    let n = a[0].n;
    if a.iter().chain(b).any(|m| m.n != n) {
        return Err(Error::Shape("confusion_diff: matrices differ in class count".into()));
    }
    let runs = a.len() as f64;
    let mut out = vec![vec![0.0; n]; n];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            if i == j {
                continue;
            }
            let sa: u64 = a.iter().map(|m| m.counts[i * n + j]).sum();
            let sb: u64 = b.iter().map(|m| m.counts[i * n + j]).sum();
            *cell = (sa as f64 - sb as f64) / runs;
        }
    }
    Ok(out)
}

pub fn matrix_csv(m: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for row in m {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

/// Per-example predicted distributions with their true labels.
#[derive(Clone, Debug)]
pub struct ScoredPredictions {
    pub probs: Tensor<f64>,
    pub labels: Vec<Class>,
}

impl ScoredPredictions {
    pub fn new(probs: Tensor<f64>, labels: Vec<Class>) -> Result<Self> {
        if probs.ndim() != 2 || probs.shape()[0] != labels.len() {
            return Err(Error::Shape(format!("scored predictions: probabilities {:?} for {} labels", probs.shape(), labels.len())));
        }
        let n = probs.shape()[1];
        for (row, p) in probs.data().chunks(n).enumerate() {
            let total: f64 = p.iter().sum();
            if (total - 1.0).abs() > 1e-6 || p.iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidArgument(format!("row {row} is not a distribution (sums to {total})")));
            }
        }
        if labels.iter().any(|y| y.get() > n) {
            return Err(Error::InvalidArgument(format!("label out of range for {n} classes")));
        }
        Ok(Self { probs, labels })
    }

    pub fn from_log_probs<T: Scalar>(log_probs: &Tensor<T>, labels: Vec<Class>) -> Result<Self> {
        Self::new(log_probs.cast::<f64>().map(f64::exp), labels)
    }

    pub fn num_classes(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn predictions(&self) -> Vec<Class> {
        crate::model::argmax_rows(&self.probs)
    }

    /// Score of `class` for every example.
    pub fn class_scores(&self, class: Class) -> Vec<f64> {
        let n = self.num_classes();
        self.probs.data().chunks(n).map(|p| p[class.index()]).collect()
    }

    pub fn accuracy(&self) -> Result<f64> {
        accuracy(&self.predictions(), &self.labels)
    }

    pub fn confusion(&self) -> Result<ConfusionMatrix> {
        ConfusionMatrix::from_predictions(&self.predictions(), &self.labels, self.num_classes())
    }
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("AUROC/AUPR need both positive and negative labels".into()));
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Area under the ROC curve as the Mann-Whitney statistic: the probability
/// that a random positive outscores a random negative, ties counting half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut negatives_below = neg as f64;
    let mut wins = 0.0;
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i]).count() as f64;
        let n = g.len() as f64 - p;
        negatives_below -= n;
        wins += p * (negatives_below + 0.5 * n);
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Average precision: the sum over distinct score thresholds of
/// `(R_k - R_{k-1}) * P_k`, without interpolation.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_binary(scores, labels)?;
    let (mut tp, mut seen, mut area) = (0usize, 0usize, 0.0);
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i]).count();
        tp += p;
        seen += g.len();
        area += (p as f64 / pos as f64) * (tp as f64 / seen as f64);
    }
    Ok(area)
}

/// Relative reduction in error rate, in percent. Inputs above 1 are read as
/// percentages.
pub fn error_reduction(acc_model: f64, acc_baseline: f64) -> Result<f64> {
    let norm = |a: f64| if a > 1.0 { a / 100.0 } else { a };
    let (m, b) = (norm(acc_model), norm(acc_baseline));
    if !(0.0..=1.0).contains(&m) || !(0.0..=1.0).contains(&b) {
        return Err(Error::InvalidArgument(format!("accuracies {acc_model} / {acc_baseline} out of range")));
    }
    if b >= 1.0 {
        return Err(Error::InvalidArgument("baseline accuracy is 1: no error to reduce".into()));
    }
    Ok(((1.0 - b) - (1.0 - m)) / (1.0 - b) * 100.0)
}

/// Mean and sample standard deviation; the deviation is `None` for fewer
/// than two values.
pub fn mean_std(values: &[f64]) -> Option<(f64, Option<f64>)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Some((mean, std))
}

/// One key-value block of run metrics.
pub fn metrics_block(metrics: &BTreeMap<String, f64>) -> String {
    metrics.iter().map(|(k, v)| format!("{k} = {v:?}\n")).collect()
}

/// A comma-separated table with a fixed column set, one row per run.
#[derive(Clone, Debug, Default)]
pub struct MetricsTable {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl MetricsTable {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::InvalidArgument(format!("metrics row has {} cells for {} columns", row.len(), self.columns.len())));
        }
        if row.iter().any(|c| c.contains([',', '\n'])) {
            return Err(Error::InvalidArgument(format!("metrics cell with a separator in {row:?}")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

/// Maps [0, 1] to a byte, clamping out-of-range values.
pub fn to_gray(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if width * height != pixels.len() || width == 0 || height == 0 {
        return Err(Error::Shape(format!("PGM of {width}x{height} with {} pixels", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Parses a binary PGM with maxval 255. Comments are not supported.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |message: String| Error::Format { what: "PGM", message };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad(format!("expected magic P5, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad header field `{s}`")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad(format!("expected maxval 255, found {maxval}")));
    }
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != w * h {
        return Err(bad(format!("expected {} pixel bytes, found {}", w * h, body.len())));
    }
    Ok((w, h, body.to_vec()))
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(width, height, pixels)?).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Channels of one C x H x W image stacked vertically into a (C*H) x W
/// grayscale picture.
fn image_bytes<T: Scalar>(values: &[T]) -> Vec<u8> {
    values.iter().map(|v| to_gray(v.as_f64())).collect()
}

/// Writes `input.pgm` and `evidence_class_<i>.pgm` for i = 1..N for one
/// example of shape 1 x C x H x W, returning the paths written.
pub fn export_evidence_images<T: Scalar>(model: &AdvocacyModel<T>, x: &Tensor<T>, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    let [c, h, w] = model.config().input_shape();
    if x.shape() != [1, c, h, w] {
        return Err(Error::Shape(format!("export expects one example of shape [1, {c}, {h}, {w}], got {:?}", x.shape())));
    }
    if model.mode() != Mode::Eval {
        return Err(Error::InvalidArgument("evidence export needs the model in eval mode".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let result = model.full_forward(x)?;
    let mut written = Vec::with_capacity(model.num_modules() + 1);
    let input = out_dir.join("input.pgm");
    write_pgm(&input, w, c * h, &image_bytes(x.data()))?;
    written.push(input);
    for (k, e) in result.evidence.iter().enumerate() {
        let path = out_dir.join(format!("evidence_class_{}.pgm", k + 1));
        write_pgm(&path, w, c * h, &image_bytes(e.data()))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn classes(v: &[usize]) -> Vec<Class> {
        v.iter().map(|&c| Class::from_index(c)).collect()
    }

    #[test]
    fn accuracy_examples() {
        let y = classes(&[0, 1, 2, 3]);
        assert_eq!(accuracy(&y, &y).unwrap(), 1.0);
        assert_eq!(accuracy(&classes(&[1, 2, 3, 0]), &y).unwrap(), 0.0);
        assert_eq!(accuracy(&classes(&[0, 1, 2, 0]), &y).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&y[..2], &y).is_err());
    }

    #[test]
    fn confusion_rows_sum_to_class_counts() {
        let y = classes(&[0, 0, 1, 2, 2, 2]);
        let p = classes(&[0, 1, 1, 2, 0, 2]);
        let m = ConfusionMatrix::from_predictions(&p, &y, 3).unwrap();
        assert_eq!(m.row_sums(), vec![2, 1, 3]);
        assert_eq!(m.total(), 6);
        assert_eq!(m.get(Class::from_index(2), Class::from_index(0)), 1);
        assert!(m.to_csv().starts_with("true\\pred,1,2,3\n1,1,1,0\n"));
    }

    #[test]
    fn confusion_diff_examples() {
        let y = classes(&[4, 9, 4]);
        let a = ConfusionMatrix::from_predictions(&classes(&[9, 9, 4]), &y, 10).unwrap();
        let b = ConfusionMatrix::from_predictions(&y, &y, 10).unwrap();
        let same = confusion_diff(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap();
        assert!(same.iter().flatten().all(|&v| v == 0.0));
        let d = confusion_diff(&[a], &[b]).unwrap();
        for (i, row) in d.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if (i, j) == (4, 9) { 1.0 } else { 0.0 });
            }
        }
        assert!(confusion_diff(&[ConfusionMatrix::new(2)], &[ConfusionMatrix::new(3)]).is_err());
        assert!(confusion_diff(&[], &[]).is_err());
    }

    #[test]
    fn scored_predictions_validate_rows() {
        let ok = Tensor::new([2, 2], vec![0.25, 0.75, 1.0, 0.0]).unwrap();
        let s = ScoredPredictions::new(ok, classes(&[1, 1])).unwrap();
        assert_eq!(s.accuracy().unwrap(), 0.5);
        assert_eq!(s.class_scores(Class::from_index(1)), vec![0.75, 0.0]);
        let bad = Tensor::new([1, 2], vec![0.5, 0.6]).unwrap();
        assert!(ScoredPredictions::new(bad, classes(&[0])).is_err());
    }

    /// Pair counting over every positive/negative pair.
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

    /// Precision and recall recounted from scratch at every distinct threshold.
    fn aupr_oracle(s: &[f64], l: &[bool]) -> f64 {
        let mut t: Vec<f64> = s.to_vec();
        t.sort_by(|a, b| b.total_cmp(a));
        t.dedup();
        let pos = l.iter().filter(|&&v| v).count() as f64;
        let mut prev_recall = 0.0;
        let mut area = 0.0;
        for th in t {
            let sel: Vec<usize> = (0..s.len()).filter(|&i| s[i] >= th).collect();
            let tp = sel.iter().filter(|&&i| l[i]).count() as f64;
            let recall = tp / pos;
            area += (recall - prev_recall) * tp / sel.len() as f64;
            prev_recall = recall;
        }
        area
    }

    #[test]
    fn ranking_metric_examples() {
        let l = [true, true, false, false];
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &l).unwrap(), 1.0);
        assert_eq!(aupr(&[0.9, 0.8, 0.2, 0.1], &l).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &l).unwrap(), 0.5);
        assert_eq!(aupr(&[0.5; 4], &l).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(aupr(&[0.1], &[false]).is_err());
    }

    #[test]
    fn ranking_metrics_match_oracles_on_small_patterns() {
        for n in 2..=6usize {
            let alphabet = n.min(4);
            let score_patterns = alphabet.pow(n as u32);
            for mask in 1..(1u32 << n) - 1 {
                let l: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                for code in 0..score_patterns {
                    let s: Vec<f64> = (0..n).map(|i| (code / alphabet.pow(i as u32) % alphabet) as f64 / 4.0).collect();
                    assert!((auroc(&s, &l).unwrap() - auroc_oracle(&s, &l)).abs() < 1e-12);
                    assert!((aupr(&s, &l).unwrap() - aupr_oracle(&s, &l)).abs() < 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn ranking_metrics_are_bounded(
            data in proptest::collection::vec((0u8..5, any::<bool>()), 2..20)
        ) {
            let s: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
            let l: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(l.iter().any(|&v| v) && l.iter().any(|&v| !v));
            let (r, p) = (auroc(&s, &l).unwrap(), aupr(&s, &l).unwrap());
            prop_assert!((0.0..=1.0).contains(&r) && (0.0..=1.0).contains(&p));
            prop_assert!((r - auroc_oracle(&s, &l)).abs() < 1e-12);
        }
    }

    #[test]
    fn error_reduction_examples() {
        assert_eq!(error_reduction(99.33, 99.16).unwrap().round(), 20.0);
        assert_eq!(error_reduction(0.9942, 0.9916).unwrap().round(), 31.0);
        assert_eq!(error_reduction(0.9, 0.9).unwrap(), 0.0);
        assert!(error_reduction(0.9, 1.0).is_err());
        assert!(error_reduction(-0.1, 0.5).is_err());
    }

    #[test]
    fn mean_std_sample_convention() {
        assert_eq!(mean_std(&[]), None);
        assert_eq!(mean_std(&[2.0]), Some((2.0, None)));
        let (m, s) = mean_std(&[1.0, 3.0]).unwrap();
        assert_eq!((m, s), (2.0, Some(2f64.sqrt())));
    }

    #[test]
    fn metrics_table_rejects_ragged_rows() {
        let mut t = MetricsTable::new(&["variant", "accuracy"]);
        t.push(vec!["advocacy".into(), "0.5".into()]).unwrap();
        assert!(t.push(vec!["x".into()]).is_err());
        assert!(t.push(vec!["a,b".into(), "1".into()]).is_err());
        assert_eq!(t.to_csv(), "variant,accuracy\nadvocacy,0.5\n");
        let mut kv = BTreeMap::new();
        kv.insert("accuracy".to_string(), 0.5);
        assert_eq!(metrics_block(&kv), "accuracy = 0.5\n");
    }

    #[test]
    fn pgm_round_trip() {
        let px: Vec<u8> = (0..12).map(|v| v * 20).collect();
        let bytes = encode_pgm(4, 3, &px).unwrap();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(decode_pgm(&bytes).unwrap(), (4, 3, px.clone()));
        assert!(decode_pgm(b"P2\n1 1\n255\n\x00").is_err());
        assert!(decode_pgm(&bytes[..bytes.len() - 1]).is_err());
        assert!(encode_pgm(5, 3, &px).is_err());
        assert_eq!((to_gray(-1.0), to_gray(0.5), to_gray(2.0)), (0, 128, 255));
    }
}
