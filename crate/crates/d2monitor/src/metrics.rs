//! Classification metrics and evaluation reports.
//!
//! Positive class is 1 (unsafe). All 0/0 metric cases are defined as 0.

use serde::{Deserialize, Serialize};

use crate::cascade::CascadeBundle;
use crate::error::{D2Error, Result};
use crate::probes::{flops_estimate, Probe};
use crate::trajectory::Dataset;

/// Confusion counts; `fn_` is the false-negative count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Count a prediction/label pair into a confusion matrix.
pub fn confusion(preds: &[u8], labels: &[u8]) -> Result<Confusion> {
    if preds.len() != labels.len() {
        return Err(D2Error::LengthMismatch(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(D2Error::EmptyDataset);
    }
    let mut c = Confusion { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for (&p, &y) in preds.iter().zip(labels) {
        if p > 1 || y > 1 {
            return Err(D2Error::Invalid("predictions and labels must be binary".into()));
        }
        match (p, y) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => unreachable!(),
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub f2_pos: f64,
    pub precision_pos: f64,
    pub recall_pos: f64,
    /// False rejection rate: fraction of benign inputs flagged unsafe,
    /// `FP / (FP + TN)`.
    pub frr: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    ratio(2.0 * precision * recall, precision + recall)
}

/// Derive all scores from a confusion matrix.
pub fn scores(c: &Confusion) -> Scores {
    let (tp, fp, fn_, tn) =
        (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let precision_pos = ratio(tp, tp + fp);
    let recall_pos = ratio(tp, tp + fn_);
    let f1_pos = f1(precision_pos, recall_pos);
    // negative class scores come from the swapped matrix
    let precision_neg = ratio(tn, tn + fn_);
    let recall_neg = ratio(tn, tn + fp);
    let f1_neg = f1(precision_neg, recall_neg);
    Scores {
        accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
        f1_macro: 0.5 * (f1_pos + f1_neg),
        // F-beta with beta = 2 weights recall four times as much
        f2_pos: ratio(5.0 * precision_pos * recall_pos, 4.0 * precision_pos + recall_pos),
        precision_pos,
        recall_pos,
        frr: ratio(fp, fp + tn),
    }
}

/// Evaluation report; emitted as JSON by the CLI. `routed_fraction` is
/// present only for cascade evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub f2_pos: f64,
    pub precision_pos: f64,
    pub recall_pos: f64,
    pub frr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub routed_fraction: Option<f64>,
    pub expected_params: f64,
    pub expected_mflops: f64,
}

impl Report {
    fn from_scores(s: Scores) -> Report {
        Report {
            accuracy: s.accuracy,
            f1_macro: s.f1_macro,
            f2_pos: s.f2_pos,
            precision_pos: s.precision_pos,
            recall_pos: s.recall_pos,
            frr: s.frr,
            routed_fraction: None,
            expected_params: 0.0,
            expected_mflops: 0.0,
        }
    }
}

/// Evaluate a standalone probe on a labeled dataset.
pub fn evaluate_probe(probe: &Probe, ds: &Dataset) -> Result<Report> {
    let labels = ds.labels()?;
    let preds = ds
        .samples()
        .iter()
        .map(|t| probe.predict(t).map(|p| p.label))
        .collect::<Result<Vec<u8>>>()?;
    let c = confusion(&preds, &labels)?;
    let mut report = Report::from_scores(scores(&c));
    report.expected_params = probe.spec.param_count() as f64;
    report.expected_mflops =
        flops_estimate(&probe.spec, ds.steps(), ds.dim(), probe.spec.readout)? / 1e6;
    Ok(report)
}

/// Evaluate a cascade bundle on a labeled dataset, returning the report and
/// the per-sample route records.
pub fn evaluate_cascade(
    bundle: &CascadeBundle,
    ds: &Dataset,
) -> Result<(Report, Vec<crate::cascade::RouteRecord>)> {
    let labels = ds.labels()?;
    let records = bundle.classify_all(ds)?;
    let preds: Vec<u8> = records.iter().map(|r| r.final_label).collect();
    let c = confusion(&preds, &labels)?;

    let routed = records.iter().filter(|r| r.routed).count();
    let rho = routed as f64 / records.len() as f64;
    let mean_window = if routed == 0 {
        1.0
    } else {
        records
            .iter()
            .filter_map(|r| r.window.map(|(lo, hi)| (hi - lo + 1) as f64))
            .sum::<f64>()
            / routed as f64
    };

    let mut report = Report::from_scores(scores(&c));
    report.routed_fraction = Some(rho);
    report.expected_params = bundle.expected_params(rho);
    report.expected_mflops =
        bundle.expected_flops(rho, mean_window, ds.steps(), ds.dim())? / 1e6;
    Ok((report, records))
}
