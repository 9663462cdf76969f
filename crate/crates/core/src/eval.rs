//! Accuracy, confusion matrices, feature-cluster metrics and report export.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor, NORM_EPS};
use crate::trainer::{infer, InferMode, ModelState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrAccuracy {
    pub overall: f64,
    /// SNR -> (accuracy, frame count).
    pub per_snr: BTreeMap<i16, (f64, usize)>,
}

impl SnrAccuracy {
    pub fn accuracy_at(&self, snr: i16) -> Option<f64> {
        self.per_snr.get(&snr).map(|v| v.0)
    }
}

fn check_lengths(a: usize, b: usize, c: usize) -> Result<()> {
    if a == 0 {
        return Err(Error::Empty("no predictions"));
    }
    if a != b || a != c {
        return Err(Error::Config(format!(
            "length mismatch: {a} predictions, {b} labels, {c} SNRs"
        )));
    }
    Ok(())
}

/// Per-SNR and pooled accuracy.
pub fn accuracy_by_snr(preds: &[usize], labels: &[usize], snrs: &[i16]) -> Result<SnrAccuracy> {
    check_lengths(preds.len(), labels.len(), snrs.len())?;
    let mut cells: BTreeMap<i16, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for ((p, y), s) in preds.iter().zip(labels).zip(snrs) {
        let c = cells.entry(*s).or_insert((0, 0));
        c.1 += 1;
        if p == y {
            c.0 += 1;
            correct += 1;
        }
    }
    Ok(SnrAccuracy {
        overall: correct as f64 / preds.len() as f64,
        per_snr: cells
            .into_iter()
            .map(|(s, (k, n))| (s, (k as f64 / n as f64, n)))
            .collect(),
    })
}

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total().max(1) as f64
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::OutOfRange(format!("pair ({y}, {p}) with {classes} classes")));
        }
        counts[y][p] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub intra_class_cos: f64,
    pub inter_class_cos: f64,
    pub silhouette: f64,
}

fn unit_rows(features: &[Vec<f64>]) -> Vec<Vec<f64>> {
    features
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < NORM_EPS {
                vec![0.0; r.len()]
            } else {
                r.iter().map(|v| v / n).collect()
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean within-class and between-class pairwise cosine, and the mean
/// silhouette under cosine distance. Runs in `O(N M d)` via class sums.
pub fn cluster_metrics(features: &[Vec<f64>], labels: &[usize]) -> Result<ClusterMetrics> {
    if features.len() != labels.len() {
        return Err(Error::Config("features and labels differ in length".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::Config("cluster metrics need at least two classes".into()));
    }
    if let Some((c, _)) = by_class.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::Config(format!("class {c} has fewer than two samples")));
    }
    let d = features[0].len();
    let u = unit_rows(features);
    let sq: Vec<f64> = u.iter().map(|r| dot(r, r)).collect();
    let classes: Vec<usize> = by_class.keys().copied().collect();
    let slot: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(k, &c)| (c, k)).collect();
    let mut sums = vec![vec![0.0; d]; classes.len()];
    let mut sq_sums = vec![0.0; classes.len()];
    for (i, &y) in labels.iter().enumerate() {
        let k = slot[&y];
        for (s, v) in sums[k].iter_mut().zip(&u[i]) {
            *s += v;
        }
        sq_sums[k] += sq[i];
    }
    let counts: Vec<f64> = classes.iter().map(|c| by_class[c].len() as f64).collect();
    let total: Vec<f64> = (0..d).map(|j| sums.iter().map(|s| s[j]).sum()).collect();
    let n = labels.len() as f64;

    let intra_sum: f64 = (0..classes.len()).map(|k| dot(&sums[k], &sums[k]) - sq_sums[k]).sum();
    let intra_pairs: f64 = counts.iter().map(|c| c * (c - 1.0)).sum();
    let all_sum = dot(&total, &total) - sq.iter().sum::<f64>();
    let inter_pairs = n * (n - 1.0) - intra_pairs;

    let mut sil = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let k = slot[&y];
        let a = 1.0 - (dot(&u[i], &sums[k]) - sq[i]) / (counts[k] - 1.0);
        let b = (0..classes.len())
            .filter(|&o| o != k)
            .map(|o| 1.0 - dot(&u[i], &sums[o]) / counts[o])
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            sil += (b - a) / m;
        }
    }
    Ok(ClusterMetrics {
        intra_class_cos: intra_sum / intra_pairs,
        inter_class_cos: (all_sum - intra_sum) / inter_pairs,
        silhouette: sil / n,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Config("spearman needs two equal series of length >= 2".into()));
    }
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let mean = (x.len() as f64 + 1.0) / 2.0;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mean) * (b - mean)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mean).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - mean).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub mode: InferMode,
    pub accuracy: SnrAccuracy,
    pub confusion_pooled: ConfusionMatrix,
    pub confusion_by_snr: BTreeMap<i16, ConfusionMatrix>,
    pub cluster: Option<ClusterMetrics>,
}

/// Evaluated test set: report plus per-frame outputs.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub snrs: Vec<i16>,
    pub features: Vec<Vec<f64>>,
}

/// Runs inference on `ds` and computes every metric. Confusion matrices are
/// produced for each SNR in `confusion_snrs` that occurs in the data.
pub fn evaluate<T: Scalar>(
    state: &ModelState<T>,
    ds: &Dataset,
    mode: InferMode,
    confusion_snrs: &[i16],
) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if ds.classes != state.class_names {
        return Err(Error::Config(format!(
            "dataset classes {:?} differ from checkpoint classes {:?}",
            ds.classes, state.class_names
        )));
    }
    let inf = infer(&ds.frames, state, mode)?;
    let labels = ds.labels();
    let snrs = ds.snrs();
    let m = state.class_names.len();
    let features = rows_f64(&inf.features);
    let mut confusion_by_snr = BTreeMap::new();
    for &s in confusion_snrs {
        let (p, y): (Vec<usize>, Vec<usize>) = inf
            .labels
            .iter()
            .zip(&labels)
            .zip(&snrs)
            .filter(|(_, &fs)| fs == s)
            .map(|((&p, &y), _)| (p, y))
            .unzip();
        if !p.is_empty() {
            confusion_by_snr.insert(s, confusion_matrix(&p, &y, m)?);
        }
    }
    let report = EvalReport {
        class_names: state.class_names.clone(),
        mode,
        accuracy: accuracy_by_snr(&inf.labels, &labels, &snrs)?,
        confusion_pooled: confusion_matrix(&inf.labels, &labels, m)?,
        confusion_by_snr,
        cluster: cluster_metrics(&features, &labels).ok(),
    };
    Ok(Evaluation {
        report,
        predictions: inf.labels,
        labels,
        snrs,
        features,
    })
}

pub fn rows_f64<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let cols = t.shape().get(1).copied().unwrap_or(0);
    (0..t.shape()[0])
        .map(|i| t.data()[i * cols..(i + 1) * cols].iter().map(|v| v.as_f64()).collect())
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    }
}

fn write_confusion(path: &Path, cm: &ConfusionMatrix, names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["true\\pred".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (name, row) in names.iter().zip(&cm.counts) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `accuracy_by_snr.csv`, `confusion_<snr>.csv` (per reported SNR and
/// `pooled`), `cluster_metrics.json` and `features.csv`.
pub fn export_report(eval: &Evaluation, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    if eval.predictions.is_empty() {
        return Err(Error::Empty("report has no frames"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let r = &eval.report;

    let path = dir.join("accuracy_by_snr.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["snr_db", "frames", "accuracy"])
        .map_err(|e| csv_err(&path, e))?;
    for (s, (acc, n)) in &r.accuracy.per_snr {
        w.write_record([s.to_string(), n.to_string(), acc.to_string()])
            .map_err(|e| csv_err(&path, e))?;
    }
    w.write_record([
        "pooled".to_string(),
        eval.predictions.len().to_string(),
        r.accuracy.overall.to_string(),
    ])
    .map_err(|e| csv_err(&path, e))?;
    w.flush().map_err(|e| Error::io(&path, e))?;

    for (s, cm) in &r.confusion_by_snr {
        write_confusion(&dir.join(format!("confusion_{s}dB.csv")), cm, &r.class_names)?;
    }
    write_confusion(&dir.join("confusion_pooled.csv"), &r.confusion_pooled, &r.class_names)?;

    let path = dir.join("cluster_metrics.json");
    let json = serde_json::json!({
        "mode": r.mode,
        "overall_accuracy": r.accuracy.overall,
        "intra_class_cos": r.cluster.map(|c| c.intra_class_cos),
        "inter_class_cos": r.cluster.map(|c| c.inter_class_cos),
        "silhouette": r.cluster.map(|c| c.silhouette),
    });
    fs::write(&path, serde_json::to_string_pretty(&json)?).map_err(|e| Error::io(&path, e))?;

    let path = dir.join("features.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let d = eval.features.first().map_or(0, Vec::len);
    let mut header = vec!["label".to_string(), "snr_db".to_string()];
    header.extend((0..d).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(|e| csv_err(&path, e))?;
    for ((f, &y), s) in eval.features.iter().zip(&eval.labels).zip(&eval.snrs) {
        let mut rec = vec![r.class_names[y].clone(), s.to_string()];
        rec.extend(f.iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
