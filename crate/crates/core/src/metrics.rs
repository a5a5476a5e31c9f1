//! Classification scores, model cost records, and the before/after effects
//! report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::Model;

const MIB: f64 = (1 << 20) as f64;

fn check_lengths(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Exact-match fraction; 0 for empty input.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `(tp, fp, fn)` per class.
fn confusion_counts(preds: &[usize], labels: &[usize], k: usize) -> Result<Vec<[usize; 3]>> {
    check_lengths(preds, labels)?;
    let mut c = vec![[0usize; 3]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= k || l >= k {
            return Err(Error::Index(format!("class id {} out of range for {k} classes", p.max(l))));
        }
        if p == l {
            c[l][0] += 1;
        } else {
            c[p][1] += 1;
            c[l][2] += 1;
        }
    }
    Ok(c)
}

/// Per-class F1 `2tp / (2tp + fp + fn)`; a class with no predictions and no
/// labels scores 0.
pub fn per_class_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<Vec<f64>> {
    Ok(confusion_counts(preds, labels, k)?
        .iter()
        .map(|&[tp, fp, fn_]| {
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                (2 * tp) as f64 / denom as f64
            }
        })
        .collect())
}

/// Unweighted mean of the per-class F1 over all `k` classes.
pub fn macro_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Argument("macro_f1 needs at least one class".into()));
    }
    Ok(per_class_f1(preds, labels, k)?.iter().sum::<f64>() / k as f64)
}

/// Per-class F1 averaged with weights equal to class support.
pub fn weighted_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    let f1 = per_class_f1(preds, labels, k)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut support = vec![0usize; k];
    for &l in labels {
        support[l] += 1;
    }
    Ok(f1.iter().zip(&support).map(|(f, &s)| f * s as f64).sum::<f64>() / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Average {
    #[default]
    Macro,
    Weighted,
}

pub fn f1(preds: &[usize], labels: &[usize], k: usize, average: F1Average) -> Result<f64> {
    match average {
        F1Average::Macro => macro_f1(preds, labels, k),
        F1Average::Weighted => weighted_f1(preds, labels, k),
    }
}

/// Cost of one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub params: usize,
    /// Per-image forward GFLOPs.
    pub gflops: f64,
    /// `4 · (params + buffers)` in MiB.
    pub memory_mb: f64,
    /// Serialized checkpoint size in MiB.
    pub size_mb: f64,
    pub size_bytes: usize,
}

pub fn cost_report(model: &Model) -> Result<MetricsRecord> {
    let size_bytes = checkpoint::to_bytes(model)?.len();
    Ok(MetricsRecord {
        params: model.count_params(),
        gflops: model.count_flops(1) as f64 / 1e9,
        memory_mb: model.memory_footprint_bytes() as f64 / MIB,
        size_mb: size_bytes as f64 / MIB,
        size_bytes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub f1: f64,
}

/// Cost plus (optionally) classification scores of one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub cost: MetricsRecord,
    pub scores: Option<Scores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub metric: String,
    pub before: f64,
    pub after: f64,
    /// `after / before`; absent when `before` is 0.
    pub ratio: Option<f64>,
    /// `after − before`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectsReport {
    pub rows: Vec<EffectRow>,
}

/// Before/after comparison with both ratio and difference per metric.
pub fn effects(before: &Snapshot, after: &Snapshot) -> EffectsReport {
    let row = |metric: &str, b: f64, a: f64| EffectRow {
        metric: metric.to_string(),
        before: b,
        after: a,
        ratio: (b != 0.0).then(|| a / b),
        delta: a - b,
    };
    let mut rows = Vec::new();
    if let (Some(b), Some(a)) = (before.scores, after.scores) {
        rows.push(row("accuracy", b.accuracy, a.accuracy));
        rows.push(row("f1", b.f1, a.f1));
    }
    let (b, a) = (&before.cost, &after.cost);
    rows.push(row("gflops", b.gflops, a.gflops));
    rows.push(row("params_m", b.params as f64 / 1e6, a.params as f64 / 1e6));
    rows.push(row("memory_mb", b.memory_mb, a.memory_mb));
    rows.push(row("size_mb", b.size_mb, a.size_mb));
    EffectsReport { rows }
}

impl EffectsReport {
    pub fn row(&self, metric: &str) -> Option<&EffectRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>12} {:>12} {:>9} {:>12}", "metric", "before", "after", "ratio", "delta");
        for r in &self.rows {
            let ratio = r.ratio.map_or_else(|| "-".to_string(), |v| format!("{:.2}%", 100.0 * v));
            let _ = writeln!(
                s,
                "{:<10} {:>12.6} {:>12.6} {:>9} {:>+12.6}",
                r.metric, r.before, r.after, ratio, r.delta
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn binary_hand_oracle() {
        let (p, l) = ([1, 1, 1, 1], [1, 1, 0, 0]);
        assert_eq!(accuracy(&p, &l).unwrap(), 0.5);
        let f = per_class_f1(&p, &l, 2).unwrap();
        assert_eq!(f, vec![0.0, 2.0 / 3.0]);
        assert!((macro_f1(&p, &l, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // weighted: class 0 and 1 have support 2 each
        assert!((weighted_f1(&p, &l, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn trivial_cases() {
        let l = [0, 1, 2, 2];
        assert_eq!(accuracy(&l, &l).unwrap(), 1.0);
        assert_eq!(macro_f1(&l, &l, 3).unwrap(), 1.0);
        // missing class 3 contributes 0
        assert_eq!(macro_f1(&l, &l, 4).unwrap(), 0.75);
        assert_eq!(accuracy(&[1, 2, 0, 0], &l).unwrap(), 0.0);
        assert!(matches!(accuracy(&[0], &[0, 1]), Err(Error::Argument(_))));
        assert!(matches!(macro_f1(&[5], &[0], 3), Err(Error::Index(_))));
    }

    fn snap(params: usize, gflops: f64, acc: f64) -> Snapshot {
        Snapshot {
            cost: MetricsRecord {
                params,
                gflops,
                memory_mb: 4.0 * params as f64 / MIB,
                size_mb: 1.0,
                size_bytes: 1 << 20,
            },
            scores: Some(Scores { accuracy: acc, f1: acc }),
        }
    }

    #[test]
    fn effects_examples() {
        let a = snap(27_700_000, 4.36, 0.851);
        let e = effects(&a, &a);
        assert!(e.rows.iter().all(|r| r.ratio == Some(1.0) && r.delta == 0.0));
        let e = effects(&a, &snap(10_440_000, 2.16, 0.845));
        assert!((e.row("params_m").unwrap().ratio.unwrap() - 0.3769).abs() < 5e-5);
        assert!((e.row("gflops").unwrap().ratio.unwrap() - 0.4954).abs() < 5e-5);
        assert!((e.row("accuracy").unwrap().delta + 0.006).abs() < 1e-12);
        let t = e.to_table();
        assert!(t.contains("37.69%"), "{t}");
        assert!(t.contains("49.54%"), "{t}");
    }

    #[test]
    fn cost_report_matches_counters() {
        let m = Model::new(crate::model::ModelConfig::default()).unwrap();
        let c = cost_report(&m).unwrap();
        assert_eq!(c.params, m.count_params());
        assert_eq!(c.size_bytes, checkpoint::to_bytes(&m).unwrap().len());
        assert_eq!(c.size_mb * MIB, c.size_bytes as f64);
        assert_eq!(c.memory_mb * MIB, (4 * m.count_params()) as f64);
    }

    proptest! {
        #[test]
        fn scores_are_bounded(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..60)) {
            let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            for v in [accuracy(&p, &l).unwrap(), macro_f1(&p, &l, 5).unwrap(), weighted_f1(&p, &l, 5).unwrap()] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let all_present = (0..5).all(|c| l.contains(&c));
            prop_assert_eq!(macro_f1(&p, &l, 5).unwrap() == 1.0, p == l && all_present);
        }
    }
}
