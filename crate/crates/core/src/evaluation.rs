//! Point-level detection metrics with boundary-tolerant matching.
//!
//! The positive class is significant stenosis. A prediction at a center
//! point is matched against the per-voxel annotation of the whole
//! centerline: a positive prediction is a true positive when an annotated
//! positive voxel lies strictly closer than `tolerance` voxels (the center
//! itself always counts), and symmetrically for negative predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOLERANCE: usize = 5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn correct(&self) -> u64 {
        self.tp + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ConfusionCounts::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToleranceRule {
    /// Matches must lie strictly closer than this many voxels.
    pub tolerance: usize,
    /// Also forgive negative predictions next to a negative annotation.
    pub forgive_negatives: bool,
}

impl Default for ToleranceRule {
    fn default() -> Self {
        ToleranceRule {
            tolerance: DEFAULT_TOLERANCE,
            forgive_negatives: true,
        }
    }
}

impl ToleranceRule {
    pub fn exact() -> Self {
        ToleranceRule {
            tolerance: 0,
            forgive_negatives: true,
        }
    }
}

/// Plain per-point confusion counts.
pub fn exact_confusion(predicted: &[bool], truth: &[bool]) -> Result<ConfusionCounts> {
    if predicted.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Confusion counts of center-point predictions against a per-voxel
/// annotation track, forgiving disagreements near label boundaries.
pub fn tolerant_confusion(
    predicted: &[bool],
    centers: &[usize],
    truth: &[bool],
    rule: ToleranceRule,
) -> Result<ConfusionCounts> {
    if predicted.len() != centers.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} centers",
            predicted.len(),
            centers.len()
        )));
    }
    if let Some(&bad) = centers.iter().find(|&&c| c >= truth.len()) {
        return Err(Error::Domain(format!(
            "center {bad} lies beyond the centerline of length {}",
            truth.len()
        )));
    }
    // Distance < tolerance, i.e. at most tolerance - 1 voxels away.
    let reach = rule.tolerance.saturating_sub(1);
    let any_within = |center: usize, wanted: bool| {
        let lo = center.saturating_sub(reach);
        let hi = (center + reach).min(truth.len() - 1);
        truth[lo..=hi].contains(&wanted)
    };

    let mut c = ConfusionCounts::default();
    for (&p, &center) in predicted.iter().zip(centers) {
        if p {
            if any_within(center, true) {
                c.tp += 1;
            } else {
                c.fp += 1;
            }
        } else {
            let negative_ok = if rule.forgive_negatives {
                any_within(center, false)
            } else {
                !truth[center]
            };
            if negative_ok {
                c.tn += 1;
            } else {
                c.fn_ += 1;
            }
        }
    }
    Ok(c)
}

/// A metric value; `None` when its denominator is zero.
pub type Metric = Option<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: Metric,
    pub sens: Metric,
    pub spec: Metric,
    pub ppv: Metric,
    pub npv: Metric,
    pub f1: Metric,
    pub mcc: Metric,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    /// MCC with the undefined case mapped to 0.
    pub fn mcc_or_zero(&self) -> f64 {
        self.mcc.unwrap_or(0.0)
    }

    /// Values in table column order: ACC, Sens, Spec, PPV, NPV, F1, MCC.
    pub fn columns(&self) -> [Metric; 7] {
        [
            self.acc, self.sens, self.spec, self.ppv, self.npv, self.f1, self.mcc,
        ]
    }

    /// Names of metrics whose denominator was zero.
    pub fn undefined(&self) -> Vec<&'static str> {
        METRIC_NAMES
            .iter()
            .zip(self.columns())
            .filter_map(|(&n, v)| v.is_none().then_some(n))
            .collect()
    }
}

pub const METRIC_NAMES: [&str; 7] = ["ACC", "Sens", "Spec", "PPV", "NPV", "F1", "MCC"];

fn ratio(num: f64, den: f64) -> Metric {
    (den != 0.0).then(|| num / den)
}

pub fn compute_metrics(counts: ConfusionCounts) -> Result<MetricsReport> {
    if counts.total() == 0 {
        return Err(Error::Domain(
            "metrics need at least one classified point".to_string(),
        ));
    }
    let (tp, fp, tn, fn_) = (
        counts.tp as f64,
        counts.fp as f64,
        counts.tn as f64,
        counts.fn_ as f64,
    );
    let sens = ratio(tp, tp + fn_);
    let ppv = ratio(tp, tp + fp);
    let f1 = match (ppv, sens) {
        (Some(p), Some(s)) => ratio(2.0 * p * s, p + s),
        _ => None,
    };
    let mcc_den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    Ok(MetricsReport {
        acc: ratio(tp + tn, tp + tn + fp + fn_),
        sens,
        spec: ratio(tn, tn + fp),
        ppv,
        npv: ratio(tn, tn + fn_),
        f1,
        mcc: ratio(tp * tn - fp * fn_, mcc_den),
        counts,
    })
}

/// Pooled (micro-averaged) report plus the per-fold reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub pooled: MetricsReport,
    pub per_fold: Vec<Option<MetricsReport>>,
}

/// Sums the counts of every fold, then computes metrics once.
pub fn aggregate_folds(per_fold: &[ConfusionCounts]) -> Result<AggregateReport> {
    if per_fold.is_empty() {
        return Err(Error::Domain("no folds to aggregate".to_string()));
    }
    let pooled = compute_metrics(per_fold.iter().copied().sum())?;
    Ok(AggregateReport {
        pooled,
        per_fold: per_fold.iter().map(|&c| compute_metrics(c).ok()).collect(),
    })
}

fn cell(v: Metric) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

pub const TABLE_HEADER: &str = "Method,ACC,Sens,Spec,PPV,NPV,F1,MCC";

/// One delimiter-separated row in table column order.
pub fn table_row(method: &str, report: &MetricsReport) -> String {
    let mut row = method.replace(',', ";");
    for v in report.columns() {
        row.push(',');
        row.push_str(&cell(v));
    }
    row
}
