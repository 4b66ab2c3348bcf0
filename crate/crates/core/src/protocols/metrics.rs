use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util;

/// K×K counts, rows are ground truth and columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::Protocol("confusion matrix must be square and non-empty".into()));
        }
        Ok(ConfusionMatrix {
            k,
            counts: rows.concat(),
        })
    }

    /// Builds a matrix from paired truth and prediction labels.
    pub fn from_labels(k: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Protocol(format!(
                "{} truth labels but {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut m = Self::new(k);
        for (&t, &p) in truth.iter().zip(pred) {
            m.add(t, p)?;
        }
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.k || pred >= self.k {
            return Err(Error::Protocol(format!(
                "label pair ({truth}, {pred}) out of range for {} classes",
                self.k
            )));
        }
        self.counts[truth * self.k + pred] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.k).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, pred)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Protocol(format!(
                "cannot merge {}-class and {}-class confusions",
                self.k, other.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// CSV with a header row `truth,0,1,..` and one row per true class.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::format("confusion csv", e.to_string());
        let mut header = vec!["truth".to_string()];
        header.extend((0..self.k).map(|p| p.to_string()));
        w.write_record(&header).map_err(csv_err)?;
        for (t, row) in self.rows().iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::format("confusion csv", e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::format("confusion csv", e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::format("confusion csv", msg);
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let k = r.headers().map_err(|e| bad(e.to_string()))?.len().saturating_sub(1);
        let mut rows = Vec::new();
        for (t, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.get(0) != Some(t.to_string().as_str()) {
                return Err(bad(format!("row {t} is labelled {:?}", rec.get(0))));
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|c| c.trim().parse::<u64>().map_err(|e| bad(format!("row {t}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        if rows.len() != k {
            return Err(bad(format!("{k} columns but {} rows", rows.len())));
        }
        Self::from_rows(rows).map_err(|e| bad(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        io_util::write_atomic(path, self.to_csv()?.as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let bytes = io_util::read(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::format("confusion csv", e.to_string()))?;
        Self::from_csv(text)
    }
}

/// Accuracy, unweighted F1 and unweighted average recall over all folds.
///
/// Per-class entries are `None` for classes with no ground-truth samples;
/// those classes are left out of `uf1` and `uar`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub uf1: f64,
    pub uar: f64,
    pub f1_per_class: Vec<Option<f64>>,
    pub acc_per_class: Vec<Option<f64>>,
    pub support: Vec<u64>,
    pub folds: usize,
    pub total: ConfusionMatrix,
}

/// Sums per-class TP/FP/FN over folds, then takes unweighted means.
pub fn compute_metrics(folds: &[ConfusionMatrix]) -> Result<MetricsReport> {
    let Some(first) = folds.first() else {
        return Err(Error::Protocol("no fold confusions to aggregate".into()));
    };
    let mut total = ConfusionMatrix::new(first.k);
    for f in folds {
        total.merge(f)?;
    }
    if total.total() == 0 {
        return Err(Error::Protocol("all fold confusions are empty".into()));
    }
    let k = total.k;
    let mut f1 = Vec::with_capacity(k);
    let mut recall = Vec::with_capacity(k);
    let mut support = Vec::with_capacity(k);
    let (mut tp_sum, mut fp_sum) = (0u64, 0u64);
    for c in 0..k {
        let tp = total.get(c, c);
        let n = total.row_sum(c);
        let fp = total.col_sum(c) - tp;
        let fn_ = n - tp;
        tp_sum += tp;
        fp_sum += fp;
        support.push(n);
        if n == 0 {
            f1.push(None);
            recall.push(None);
        } else {
            f1.push(Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64));
            recall.push(Some(tp as f64 / n as f64));
        }
    }
    let mean = |xs: &[Option<f64>]| {
        let present: Vec<f64> = xs.iter().flatten().copied().collect();
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MetricsReport {
        acc: tp_sum as f64 / (tp_sum + fp_sum) as f64,
        uf1: mean(&f1),
        uar: mean(&recall),
        f1_per_class: f1,
        acc_per_class: recall,
        support,
        folds: folds.len(),
        total,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn worked_example() {
        let m = ConfusionMatrix::from_labels(2, &[0, 0, 0, 1, 1], &[0, 0, 1, 1, 0]).unwrap();
        let r = compute_metrics(&[m]).unwrap();
        assert!((r.f1_per_class[0].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.f1_per_class[1].unwrap() - 0.5).abs() < 1e-12);
        assert!((r.uf1 - 7.0 / 12.0).abs() < 1e-12);
        assert!((r.uar - 7.0 / 12.0).abs() < 1e-12);
        assert!((r.acc - 0.6).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions() {
        let m = ConfusionMatrix::from_labels(3, &[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        let r = compute_metrics(&[m]).unwrap();
        assert_eq!((r.acc, r.uf1, r.uar), (1.0, 1.0, 1.0));
    }

    #[test]
    fn absent_class_is_left_out_of_means() {
        let m = ConfusionMatrix::from_labels(3, &[0, 0, 1], &[0, 2, 1]).unwrap();
        let r = compute_metrics(&[m]).unwrap();
        assert_eq!(r.acc_per_class, vec![Some(0.5), Some(1.0), None]);
        assert!((r.uar - 0.75).abs() < 1e-15);
        assert_eq!(r.support, vec![2, 1, 0]);
    }

    #[test]
    fn errors() {
        assert!(matches!(compute_metrics(&[]), Err(Error::Protocol(_))));
        assert!(matches!(
            compute_metrics(&[ConfusionMatrix::new(3)]),
            Err(Error::Protocol(_))
        ));
        let a = ConfusionMatrix::from_labels(2, &[0], &[0]).unwrap();
        assert!(matches!(
            compute_metrics(&[a, ConfusionMatrix::new(3)]),
            Err(Error::Protocol(_))
        ));
        assert!(ConfusionMatrix::new(2).add(2, 0).is_err());
        assert!(ConfusionMatrix::from_rows(vec![vec![1, 2]]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = ConfusionMatrix::from_rows(vec![vec![3, 0, 1], vec![0, 7, 2], vec![5, 0, 0]]).unwrap();
        let text = m.to_csv().unwrap();
        assert_eq!(text, "truth,0,1,2\n0,3,0,1\n1,0,7,2\n2,5,0,0\n");
        assert_eq!(ConfusionMatrix::from_csv(&text).unwrap(), m);
        assert!(ConfusionMatrix::from_csv("truth,0,1\n0,1,x\n1,0,0\n").is_err());
        assert!(ConfusionMatrix::from_csv("truth,0,1\n0,1,1\n").is_err());
    }

    fn random_confusion(rng: &mut ChaCha8Rng, k: usize) -> ConfusionMatrix {
        let rows = (0..k)
            .map(|_| (0..k).map(|_| rng.random_range(0..20)).collect())
            .collect();
        ConfusionMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn accuracy_is_fraction_correct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let k = rng.random_range(2..6);
            let m = random_confusion(&mut rng, k);
            let r = compute_metrics(std::slice::from_ref(&m)).unwrap();
            assert_eq!(r.acc, m.correct() as f64 / m.total() as f64);
        }
    }

    #[test]
    fn identical_input_gives_identical_report() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let folds: Vec<_> = (0..4).map(|_| random_confusion(&mut rng, 4)).collect();
        let a = serde_json::to_string(&compute_metrics(&folds).unwrap()).unwrap();
        let b = serde_json::to_string(&compute_metrics(&folds.clone()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn splitting_counts_across_folds_changes_nothing(
            cells in prop::collection::vec((0u64..15, 0u64..15), 9),
        ) {
            let whole = ConfusionMatrix::from_rows(cells.chunks(3).map(|r| r.iter().map(|(a, b)| a + b).collect()).collect()).unwrap();
            prop_assume!(whole.total() > 0);
            let a = ConfusionMatrix::from_rows(cells.chunks(3).map(|r| r.iter().map(|p| p.0).collect()).collect()).unwrap();
            let b = ConfusionMatrix::from_rows(cells.chunks(3).map(|r| r.iter().map(|p| p.1).collect()).collect()).unwrap();
            let one = compute_metrics(std::slice::from_ref(&whole)).unwrap();
            let two = compute_metrics(&[a, b]).unwrap();
            prop_assert_eq!(one.acc, two.acc);
            prop_assert_eq!(one.uf1, two.uf1);
            prop_assert_eq!(one.uar, two.uar);
            prop_assert_eq!(one.total, two.total);
        }

        #[test]
        fn relabelling_classes_keeps_unweighted_scores(
            cells in prop::collection::vec(0u64..15, 16),
            perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let m = ConfusionMatrix::from_rows(cells.chunks(4).map(<[u64]>::to_vec).collect()).unwrap();
            prop_assume!(m.total() > 0);
            let mut p = ConfusionMatrix::new(4);
            for t in 0..4 {
                for q in 0..4 {
                    p.counts[perm[t] * 4 + perm[q]] = m.get(t, q);
                }
            }
            let (a, b) = (compute_metrics(&[m]).unwrap(), compute_metrics(&[p]).unwrap());
            prop_assert!((a.uf1 - b.uf1).abs() < 1e-12);
            prop_assert!((a.uar - b.uar).abs() < 1e-12);
            prop_assert_eq!(a.acc, b.acc);
        }
    }
}
