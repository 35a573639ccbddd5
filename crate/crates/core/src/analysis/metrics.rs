use serde::Serialize;

use crate::error::{Error, Result};
use crate::tasks::Polarity;
use crate::tensor::Tensor;

/// Detection rates with intrusive as the positive class. A rate whose
/// denominator is empty is NaN and its flag is false.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConfusionMetrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    /// False alarms over true negatives.
    pub fpr: f64,
    /// Misses over true positives.
    pub fnr: f64,
    pub accuracy: f64,
    pub fpr_defined: bool,
    pub fnr_defined: bool,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (f64::NAN, false)
    } else {
        (num as f64 / den as f64, true)
    }
}

pub fn confusion_metrics(predicted: &[Polarity], truth: &[Polarity]) -> Result<ConfusionMetrics> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::pre(format!(
            "{} predictions for {} ground-truth labels",
            predicted.len(),
            truth.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (Polarity::Intrusive, Polarity::Intrusive) => tp += 1,
            (Polarity::Intrusive, Polarity::NonIntrusive) => fp += 1,
            (Polarity::NonIntrusive, Polarity::NonIntrusive) => tn += 1,
            (Polarity::NonIntrusive, Polarity::Intrusive) => fn_ += 1,
        }
    }
    let (fpr, fpr_defined) = ratio(fp, fp + tn);
    let (fnr, fnr_defined) = ratio(fn_, fn_ + tp);
    Ok(ConfusionMetrics {
        tp,
        fp,
        tn,
        fn_,
        fpr,
        fnr,
        accuracy: (tp + tn) as f64 / truth.len() as f64,
        fpr_defined,
        fnr_defined,
    })
}

/// Pixel accuracy `|L∩R| / |L|` and intersection over union
/// `|L∩R| / |L∪R|` of a predicted mask `R` against the truth `L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaskScores {
    /// NaN when the truth mask is empty.
    pub pa: f64,
    pub pa_defined: bool,
    /// 1 when both masks are empty.
    pub iu: f64,
}

pub fn pa_iu(predicted: &Tensor, truth: &Tensor) -> Result<MaskScores> {
    if predicted.shape() != truth.shape() {
        return Err(Error::pre(format!(
            "mask shapes {:?} and {:?} differ",
            predicted.shape(),
            truth.shape()
        )));
    }
    let binary = |t: &Tensor| t.data().iter().all(|&v| v == 0.0 || v == 1.0);
    if !binary(predicted) || !binary(truth) {
        return Err(Error::pre("masks must hold only 0 and 1"));
    }
    let (mut inter, mut l, mut union) = (0usize, 0usize, 0usize);
    for (&r, &t) in predicted.data().iter().zip(truth.data()) {
        let (r, t) = (r == 1.0, t == 1.0);
        inter += usize::from(r && t);
        l += usize::from(t);
        union += usize::from(r || t);
    }
    let (pa, pa_defined) = ratio(inter, l);
    let iu = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok(MaskScores { pa, pa_defined, iu })
}
