mod common;

use std::collections::BTreeMap;

use common::rng;
use kgamc::eval::{
    accuracy_by_snr, cluster_metrics, confusion_matrix, export_report, spearman, EvalReport, Evaluation,
};
use kgamc::trainer::InferMode;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn cos_dist(u: &[f64], v: &[f64]) -> f64 {
    let d: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    1.0 - if nu < 1e-12 || nv < 1e-12 { 0.0 } else { d / (nu * nv) }
}

/// Pairwise O(N^2) reference: (intra, inter, silhouette).
fn brute_cluster(f: &[Vec<f64>], y: &[usize]) -> (f64, f64, f64) {
    let n = f.len();
    let (mut intra, mut ni, mut inter, mut no) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let c = 1.0 - cos_dist(&f[i], &f[j]);
            if y[i] == y[j] {
                intra += c;
                ni += 1.0;
            } else {
                inter += c;
                no += 1.0;
            }
        }
    }
    let mut sil = 0.0;
    for i in 0..n {
        let mut per: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        for j in 0..n {
            if i != j {
                let e = per.entry(y[j]).or_default();
                e.0 += cos_dist(&f[i], &f[j]);
                e.1 += 1.0;
            }
        }
        let a = per[&y[i]].0 / per[&y[i]].1;
        let b = per
            .iter()
            .filter(|(k, _)| **k != y[i])
            .map(|(_, (s, c))| s / c)
            .fold(f64::INFINITY, f64::min);
        if a.max(b) > 0.0 {
            sil += (b - a) / a.max(b);
        }
    }
    (intra / ni, inter / no, sil / n as f64)
}

fn gaussian_rows(r: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| r.sample(StandardNormal)).collect())
        .collect()
}

/// Random orthogonal matrix from Gram-Schmidt on Gaussian rows.
fn rotation(r: &mut impl Rng, d: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    for mut v in gaussian_rows(r, d, d) {
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        q.push(v);
    }
    q
}

#[test]
fn random_guessing_scores_one_in_ten() {
    let mut r = rng(1);
    let n = 10_000;
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..10)).collect();
    let preds: Vec<usize> = (0..n).map(|_| r.gen_range(0..10)).collect();
    let snrs: Vec<i16> = (0..n).map(|i| [-10, 0, 10][i % 3]).collect();
    let a = accuracy_by_snr(&preds, &labels, &snrs).unwrap();
    assert!((a.overall - 0.1).abs() < 0.02);
    assert_eq!(a.per_snr.len(), 3);
    assert_eq!(a.per_snr.values().map(|v| v.1).sum::<usize>(), n);
    for (acc, _) in a.per_snr.values() {
        assert!((acc - 0.1).abs() < 0.03);
    }
}

#[test]
fn confusion_trace_equals_pooled_accuracy() {
    let mut r = rng(2);
    for _ in 0..20 {
        let n = r.gen_range(1..500);
        let m = r.gen_range(2..12);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..m)).collect();
        let preds: Vec<usize> = labels
            .iter()
            .map(|&y| if r.gen_bool(0.6) { y } else { r.gen_range(0..m) })
            .collect();
        let cm = confusion_matrix(&preds, &labels, m).unwrap();
        let a = accuracy_by_snr(&preds, &labels, &vec![0; n]).unwrap();
        assert_eq!(cm.total(), n as u64);
        assert!((cm.accuracy() - a.overall).abs() < 1e-12);
        let mut counts = vec![0u64; m];
        labels.iter().for_each(|&y| counts[y] += 1);
        assert_eq!(cm.row_sums(), counts);
    }
}

#[test]
fn cluster_metrics_match_pairwise_reference() {
    let mut r = rng(3);
    for case in 0..30 {
        let n = r.gen_range(6..60);
        let m = r.gen_range(2..5);
        let d = r.gen_range(2..8);
        let mut y: Vec<usize> = (0..n).map(|i| i % m).collect();
        y.swap(0, n - 1);
        let mut f = gaussian_rows(&mut r, n, d);
        if case % 5 == 0 {
            f[1] = vec![0.0; d];
        }
        let c = cluster_metrics(&f, &y).unwrap();
        let (intra, inter, sil) = brute_cluster(&f, &y);
        assert!((c.intra_class_cos - intra).abs() < 1e-9);
        assert!((c.inter_class_cos - inter).abs() < 1e-9);
        assert!((c.silhouette - sil).abs() < 1e-9);
    }
}

#[test]
fn cluster_metrics_are_rotation_invariant() {
    let mut r = rng(4);
    let (n, d) = (80, 12);
    let y: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let f: Vec<Vec<f64>> = gaussian_rows(&mut r, n, d)
        .into_iter()
        .zip(&y)
        .map(|(mut v, &c)| {
            v[c] += 3.0;
            v
        })
        .collect();
    let q = rotation(&mut r, d);
    let rotated: Vec<Vec<f64>> = f
        .iter()
        .map(|v| {
            q.iter()
                .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    let (a, b) = (cluster_metrics(&f, &y).unwrap(), cluster_metrics(&rotated, &y).unwrap());
    assert!((a.intra_class_cos - b.intra_class_cos).abs() < 1e-9);
    assert!((a.inter_class_cos - b.inter_class_cos).abs() < 1e-9);
    assert!((a.silhouette - b.silhouette).abs() < 1e-9);
    assert!(a.intra_class_cos > a.inter_class_cos);
}

#[test]
fn random_features_have_no_structure() {
    let mut r = rng(5);
    let n = 2000;
    let y: Vec<usize> = (0..n).map(|_| r.gen_range(0..10)).collect();
    let c = cluster_metrics(&gaussian_rows(&mut r, n, 64), &y).unwrap();
    assert!(c.intra_class_cos.abs() < 0.05);
    assert!(c.inter_class_cos.abs() < 0.05);
    assert!(c.silhouette.abs() < 0.05);
}

#[test]
fn report_export_round_trip() {
    let mut r = rng(6);
    let names: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
    let n = 90;
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let snrs: Vec<i16> = (0..n).map(|i| [-4, 0, 8][(i / 3) % 3]).collect();
    let preds: Vec<usize> = labels
        .iter()
        .map(|&y| if r.gen_bool(0.7) { y } else { (y + 1) % 3 })
        .collect();
    let features = gaussian_rows(&mut r, n, 5);
    let zero: Vec<usize> = (0..n).filter(|&i| snrs[i] == 0).collect();
    let cm0 = confusion_matrix(
        &zero.iter().map(|&i| preds[i]).collect::<Vec<_>>(),
        &zero.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
        3,
    )
    .unwrap();
    let report = EvalReport {
        class_names: names.clone(),
        mode: InferMode::Classifier,
        accuracy: accuracy_by_snr(&preds, &labels, &snrs).unwrap(),
        confusion_pooled: confusion_matrix(&preds, &labels, 3).unwrap(),
        confusion_by_snr: BTreeMap::from([(0, cm0.clone())]),
        cluster: cluster_metrics(&features, &labels).ok(),
    };
    let eval = Evaluation {
        report: report.clone(),
        predictions: preds,
        labels,
        snrs,
        features,
    };
    let dir = tempfile::tempdir().unwrap();
    export_report(&eval, dir.path()).unwrap();

    let mut rd = csv::Reader::from_path(dir.path().join("accuracy_by_snr.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    for row in &rows[..3] {
        let s: i16 = row[0].parse().unwrap();
        let acc: f64 = row[2].parse().unwrap();
        assert_eq!(acc, report.accuracy.per_snr[&s].0);
        assert_eq!(row[1].parse::<usize>().unwrap(), 30);
    }
    assert_eq!(&rows[3][0], "pooled");
    assert_eq!(rows[3][2].parse::<f64>().unwrap(), report.accuracy.overall);

    let mut rd = csv::Reader::from_path(dir.path().join("confusion_0dB.csv")).unwrap();
    let cm: Vec<Vec<u64>> = rd
        .records()
        .map(|r| r.unwrap().iter().skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(cm, cm0.counts);
    assert!(dir.path().join("confusion_pooled.csv").exists());

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("cluster_metrics.json")).unwrap()).unwrap();
    assert_eq!(
        json["intra_class_cos"].as_f64().unwrap(),
        report.cluster.unwrap().intra_class_cos
    );

    let mut rd = csv::Reader::from_path(dir.path().join("features.csv")).unwrap();
    assert_eq!(rd.headers().unwrap().len(), 7);
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), n);
    assert_eq!(rows[4][2].parse::<f64>().unwrap(), eval.features[4][0]);
    assert_eq!(&rows[4][0], "B");
}

proptest! {
    #[test]
    fn spearman_is_bounded_and_rank_based(
        x in prop::collection::vec(-100.0f64..100.0, 3..30),
        seed in 0u64..1000,
    ) {
        let mut r = rng(seed);
        let y: Vec<f64> = x.iter().map(|_| r.gen_range(-1.0..1.0)).collect();
        let rho = spearman(&x, &y).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
        let warped: Vec<f64> = x.iter().map(|v| v.powi(3) + 7.0).collect();
        prop_assert!((spearman(&warped, &y).unwrap() - rho).abs() < 1e-12);
        prop_assert!((spearman(&y, &x).unwrap() - rho).abs() < 1e-12);
    }
}
