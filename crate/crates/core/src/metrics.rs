//! Voxel-wise segmentation metrics and per-dataset aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::LabelMask;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn scaled(&self, k: u64) -> Self {
        ConfusionCounts {
            tp: self.tp * k,
            tn: self.tn * k,
            fp: self.fp * k,
            fn_: self.fn_ * k,
        }
    }

    /// Counts with foreground and background exchanged.
    pub fn swapped(&self) -> Self {
        ConfusionCounts {
            tp: self.tn,
            tn: self.tp,
            fp: self.fn_,
            fn_: self.fp,
        }
    }
}

/// Tallies prediction against ground truth over every voxel.
pub fn confusion(pred: &LabelMask, truth: &LabelMask) -> Result<ConfusionCounts> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape(format!(
            "prediction dims {:?} differ from truth dims {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub volume_id: String,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub dsc: f64,
    /// Set when a ratio had a zero denominator and the 1.0 convention applied.
    #[serde(default)]
    pub degenerate: bool,
}

impl MetricReport {
    pub fn new(volume_id: impl Into<String>, acc: f64, sen: f64, spe: f64, dsc: f64) -> Self {
        MetricReport {
            volume_id: volume_id.into(),
            acc,
            sen,
            spe,
            dsc,
            degenerate: false,
        }
    }
}

/// Accuracy, sensitivity, specificity and Dice from confusion counts.
///
/// A ratio whose denominator is zero (no positives, or no negatives, in
/// either mask) is reported as 1.0 and flags the report as degenerate.
pub fn compute_metrics(volume_id: impl Into<String>, c: &ConfusionCounts) -> Result<MetricReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Parameter("cannot compute metrics over zero voxels".into()));
    }
    let mut degenerate = false;
    let mut ratio = |num: u64, den: u64| {
        if den == 0 {
            degenerate = true;
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    let acc = ratio(c.tp + c.tn, total);
    let sen = ratio(c.tp, c.tp + c.fn_);
    let spe = ratio(c.tn, c.tn + c.fp);
    let dsc = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    Ok(MetricReport {
        volume_id: volume_id.into(),
        acc,
        sen,
        spe,
        dsc,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub dsc: f64,
}

impl MetricMeans {
    fn mean_of<'a>(items: impl Iterator<Item = (f64, f64, f64, f64)> + 'a) -> Self {
        let mut n = 0usize;
        let mut s = [0.0; 4];
        for (a, b, c, d) in items {
            s[0] += a;
            s[1] += b;
            s[2] += c;
            s[3] += d;
            n += 1;
        }
        let n = n as f64;
        MetricMeans {
            acc: s[0] / n,
            sen: s[1] / n,
            spe: s[2] / n,
            dsc: s[3] / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub dataset: String,
    pub volumes: usize,
    #[serde(flatten)]
    pub means: MetricMeans,
}

/// One row per dataset plus an average row, like a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub datasets: Vec<DatasetSummary>,
    pub average: MetricMeans,
}

/// Per-dataset means, then the unweighted mean of those dataset means.
///
/// Datasets keep the order in which they first appear.
pub fn aggregate(groups: &[(String, Vec<MetricReport>)]) -> Result<SummaryTable> {
    if groups.is_empty() || groups.iter().all(|(_, r)| r.is_empty()) {
        return Err(Error::Parameter("aggregate needs at least one report".into()));
    }
    // Merge repeated dataset names while keeping first-seen order.
    let mut order: Vec<&str> = Vec::new();
    let mut merged: BTreeMap<&str, Vec<&MetricReport>> = BTreeMap::new();
    for (name, reports) in groups {
        if reports.is_empty() {
            continue;
        }
        if !merged.contains_key(name.as_str()) {
            order.push(name);
        }
        merged.entry(name).or_default().extend(reports.iter());
    }
    let datasets: Vec<DatasetSummary> = order
        .iter()
        .map(|name| {
            let reports = &merged[name];
            DatasetSummary {
                dataset: name.to_string(),
                volumes: reports.len(),
                means: MetricMeans::mean_of(reports.iter().map(|r| (r.acc, r.sen, r.spe, r.dsc))),
            }
        })
        .collect();
    let average = MetricMeans::mean_of(
        datasets
            .iter()
            .map(|d| (d.means.acc, d.means.sen, d.means.spe, d.means.dsc)),
    );
    Ok(SummaryTable { datasets, average })
}

pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("volume_id,acc,sen,spe,dsc\n");
    for r in reports {
        let _ = writeln!(out, "{},{},{},{},{}", r.volume_id, r.acc, r.sen, r.spe, r.dsc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_agreement() {
        let m = LabelMask::from_fn([4, 3, 2], |x, y, _| x > y).unwrap();
        let c = confusion(&m, &m).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let r = compute_metrics("v", &c).unwrap();
        assert_eq!((r.acc, r.sen, r.spe, r.dsc), (1.0, 1.0, 1.0, 1.0));
        assert!(!r.degenerate);
    }

    #[test]
    fn total_disagreement() {
        let pred = LabelMask::new([10, 1, 1], vec![1; 10]).unwrap();
        let truth = LabelMask::zeros([10, 1, 1]).unwrap();
        let c = confusion(&pred, &truth).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 0, tn: 0, fp: 10, fn_: 0 });
    }

    #[test]
    fn dim_mismatch() {
        let a = LabelMask::zeros([2, 2, 2]).unwrap();
        let b = LabelMask::zeros([2, 2, 3]).unwrap();
        assert!(matches!(confusion(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn worked_example() {
        let c = ConfusionCounts { tp: 3, tn: 5, fp: 1, fn_: 1 };
        let r = compute_metrics("v", &c).unwrap();
        assert_eq!(r.dsc, 0.75);
        assert_eq!(r.sen, 0.75);
        assert!((r.spe - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(r.acc, 0.8);
    }

    #[test]
    fn empty_target_convention() {
        let c = ConfusionCounts { tp: 0, tn: 12, fp: 0, fn_: 0 };
        let r = compute_metrics("v", &c).unwrap();
        assert_eq!((r.dsc, r.sen, r.spe, r.acc), (1.0, 1.0, 1.0, 1.0));
        assert!(r.degenerate);
        assert!(compute_metrics("v", &ConfusionCounts::default()).is_err());
    }

    #[test]
    fn aggregate_is_mean_of_group_means() {
        let r = |v: f64| MetricReport::new("x", v, v, v, v);
        let t = aggregate(&[
            ("a".into(), vec![r(0.2), r(0.4)]),
            ("b".into(), vec![r(0.9)]),
        ])
        .unwrap();
        assert!((t.datasets[0].means.acc - 0.3).abs() < 1e-15);
        assert!((t.average.acc - 0.6).abs() < 1e-15);
        let single = aggregate(&[("a".into(), vec![r(0.2), r(0.4)])]).unwrap();
        assert_eq!(single.average, single.datasets[0].means);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn csv_layout() {
        let csv = reports_to_csv(&[MetricReport::new("p1", 1.0, 0.5, 0.25, 0.75)]);
        assert_eq!(csv, "volume_id,acc,sen,spe,dsc\np1,1,0.5,0.25,0.75\n");
    }

    proptest! {
        #[test]
        fn matches_brute_force_tally(bits in proptest::collection::vec((0u8..2, 0u8..2), 216)) {
            let pred = LabelMask::new([6, 6, 6], bits.iter().map(|b| b.0).collect()).unwrap();
            let truth = LabelMask::new([6, 6, 6], bits.iter().map(|b| b.1).collect()).unwrap();
            let c = confusion(&pred, &truth).unwrap();
            let mut expect = [0u64; 4];
            for z in 0..6 { for y in 0..6 { for x in 0..6 {
                let (p, t) = (pred.get(x, y, z), truth.get(x, y, z));
                expect[(p as usize) * 2 + t as usize] += 1;
            }}}
            prop_assert_eq!(c.tn, expect[0]);
            prop_assert_eq!(c.fn_, expect[1]);
            prop_assert_eq!(c.fp, expect[2]);
            prop_assert_eq!(c.tp, expect[3]);
            prop_assert_eq!(c.total(), 216);
        }
    }
}
