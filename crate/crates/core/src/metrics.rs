//! Overlap, ranking and cross-validation metrics.
//!
//! Pixel metrics pool every pixel of every evaluated stack. AP groups tied
//! scores into a single threshold (so a constant predictor scores the
//! positive prevalence); a tie-broken-by-index variant is reported next to it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::folds::split_folds;
use crate::inference::ScoreSummary;
use crate::stack::{CtStack, ScoreVolume};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Pixel confusion counts at a fixed threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl OverlapCounts {
    /// Prediction is positive when `score >= threshold`.
    pub fn from_scores(scores: &[f32], gt: &[u8], threshold: f64) -> Result<Self> {
        if scores.len() != gt.len() {
            return Err(Error::arg(format!("{} scores vs {} labels", scores.len(), gt.len())));
        }
        let mut c = Self::default();
        for (&s, &g) in scores.iter().zip(gt) {
            match (f64::from(s) >= threshold, g == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    pub fn merge(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }

    /// `(dice, jaccard)`; both 1 when prediction and truth are empty.
    pub fn dice_jaccard(&self) -> (f64, f64) {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        if self.tp + self.fp + self.fn_ == 0 {
            return (1.0, 1.0);
        }
        (2.0 * tp / (2.0 * tp + fp + fn_), tp / (tp + fp + fn_))
    }
}

pub fn dice_jaccard(scores: &[f32], gt: &[u8], threshold: f64) -> Result<(f64, f64)> {
    Ok(OverlapCounts::from_scores(scores, gt, threshold)?.dice_jaccard())
}

fn check_ranking_input<S: Copy + Into<f64>>(scores: &[S], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::arg(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|&s| s.into().is_nan()) {
        return Err(Error::arg("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score; ties keep index order.
fn descending_order<S: Copy + Into<f64>>(scores: &[S]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].into().total_cmp(&scores[a].into()).then(a.cmp(&b)));
    order
}

/// Average precision with tied scores sharing one threshold:
/// `Σ_t (R_t − R_{t−1})·P_t` over distinct scores `t`, descending.
pub fn average_precision<S: Copy + Into<f64>>(scores: &[S], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_ranking_input(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    let order = descending_order(scores);
    let (mut tp, mut fp, mut prev_tp) = (0u64, 0u64, 0u64);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]].into();
        while i < order.len() && scores[order[i]].into() == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / pos as f64 * (tp as f64 / (tp + fp) as f64);
            prev_tp = tp;
        }
    }
    Ok(ap)
}

/// Average precision with ties broken by input order: the mean over
/// positives of precision at that positive's rank.
pub fn average_precision_stable<S: Copy + Into<f64>>(scores: &[S], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_ranking_input(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    let mut tp = 0u64;
    let mut ap = 0.0;
    for (rank, &i) in descending_order(scores).iter().enumerate() {
        if labels[i] {
            tp += 1;
            ap += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / pos as f64)
}

/// Mann–Whitney AUC: fraction of (positive, negative) pairs ranked
/// correctly, ties counted ½.
pub fn roc_auc<S: Copy + Into<f64>>(scores: &[S], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_ranking_input(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ROC AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].into().total_cmp(&scores[b].into()));
    // Twice the number of correctly ordered pairs, ties contribute 1.
    let mut twice: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]].into();
        let (mut p, mut n) = (0u128, 0u128);
        while i < order.len() && scores[order[i]].into() == t {
            if labels[order[i]] {
                p += 1;
            } else {
                n += 1;
            }
            i += 1;
        }
        twice += p * (2 * neg_below + n);
        neg_below += n;
    }
    Ok(twice as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// `(threshold, precision, recall)` at each distinct score, descending.
pub fn pr_curve<S: Copy + Into<f64>>(scores: &[S], labels: &[bool]) -> Result<Vec<(f64, f64, f64)>> {
    let (pos, _) = check_ranking_input(scores, labels)?;
    curve(scores, labels, |tp, fp, _| {
        (tp as f64 / (tp + fp) as f64, tp as f64 / pos.max(1) as f64)
    })
}

/// `(threshold, false-positive rate, true-positive rate)`.
pub fn roc_curve<S: Copy + Into<f64>>(scores: &[S], labels: &[bool]) -> Result<Vec<(f64, f64, f64)>> {
    let (pos, neg) = check_ranking_input(scores, labels)?;
    curve(scores, labels, |tp, fp, _| {
        (fp as f64 / neg.max(1) as f64, tp as f64 / pos.max(1) as f64)
    })
}

fn curve<S: Copy + Into<f64>>(
    scores: &[S],
    labels: &[bool],
    point: impl Fn(u64, u64, f64) -> (f64, f64),
) -> Result<Vec<(f64, f64, f64)>> {
    let order = descending_order(scores);
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut out = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]].into();
        while i < order.len() && scores[order[i]].into() == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (a, b) = point(tp, fp, t);
        out.push((t, a, b));
    }
    Ok(out)
}

pub fn write_curve_csv(path: &Path, header: &str, points: &[(f64, f64, f64)]) -> Result<()> {
    let mut text = format!("{header}\n");
    for (a, b, c) in points {
        writeln!(text, "{a},{b},{c}").unwrap();
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dice: f64,
    pub jaccard: f64,
    /// `None` when the evaluated pixels contain no positive.
    pub pixel_ap: Option<f64>,
    pub pixel_ap_stable: Option<f64>,
    /// AP over frame-average scores.
    pub frame_ap: Option<f64>,
    /// AP over stack-frame (L^p) scores.
    pub frame_ap_lp: Option<f64>,
    /// `None` unless both positive and negative stacks are present.
    pub stack_auc: Option<f64>,
    pub counts: OverlapCounts,
    pub threshold: f64,
    pub p: f64,
    /// Dice convention used when prediction and truth are both empty.
    pub empty_dice: f64,
    pub n_stacks: usize,
    pub n_frames: usize,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Score predictions against ground truth matched by stack id.
pub fn evaluate(preds: &[ScoreVolume], gts: &[CtStack], threshold: f64, p: f64) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} stacks",
            preds.len(),
            gts.len()
        )));
    }
    let by_id: BTreeMap<&str, &ScoreVolume> = preds.iter().map(|v| (v.stack_id.as_str(), v)).collect();
    if by_id.len() != preds.len() {
        return Err(Error::arg("duplicate prediction ids"));
    }
    let mut counts = OverlapCounts::default();
    let mut pixel_scores: Vec<f32> = Vec::new();
    let mut pixel_labels: Vec<bool> = Vec::new();
    let (mut frame_avg, mut frame_lp, mut frame_labels) = (Vec::new(), Vec::new(), Vec::new());
    let (mut stack_scores, mut stack_labels) = (Vec::new(), Vec::new());
    for gt in gts {
        let pred = by_id
            .get(gt.stack_id.as_str())
            .ok_or_else(|| Error::arg(format!("no prediction for stack {}", gt.stack_id)))?;
        if pred.scores.dim() != gt.frames.dim() {
            return Err(Error::arg(format!("shape mismatch for stack {}", gt.stack_id)));
        }
        let mask = gt
            .mask
            .as_ref()
            .ok_or_else(|| Error::arg(format!("stack {} has no ground-truth mask", gt.stack_id)))?;
        let scores = pred.scores.as_standard_layout();
        let mask_std = mask.as_standard_layout();
        let (s, m) = (scores.as_slice().unwrap(), mask_std.as_slice().unwrap());
        counts = counts.merge(OverlapCounts::from_scores(s, m, threshold)?);
        pixel_scores.extend_from_slice(s);
        pixel_labels.extend(m.iter().map(|&v| v == 1));

        let summary = ScoreSummary::from_volume(pred, p)?;
        frame_avg.extend_from_slice(&summary.frame_avg);
        frame_lp.extend_from_slice(&summary.frame_lp);
        frame_labels.extend((0..gt.depth()).map(|f| gt.frame_is_positive(f)));
        stack_scores.push(summary.stack_score);
        stack_labels.push(gt.is_positive());
    }
    let (dice, jaccard) = counts.dice_jaccard();
    Ok(EvalReport {
        dice,
        jaccard,
        pixel_ap: defined(average_precision(&pixel_scores, &pixel_labels))?,
        pixel_ap_stable: defined(average_precision_stable(&pixel_scores, &pixel_labels))?,
        frame_ap: defined(average_precision(&frame_avg, &frame_labels))?,
        frame_ap_lp: defined(average_precision(&frame_lp, &frame_labels))?,
        stack_auc: defined(roc_auc(&stack_scores, &stack_labels))?,
        counts,
        threshold,
        p,
        empty_dice: 1.0,
        n_stacks: gts.len(),
        n_frames: frame_labels.len(),
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    /// Folds on which the metric was defined.
    pub folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub fold_count: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
    pub per_fold: Vec<EvalReport>,
    pub summary: BTreeMap<String, MeanStd>,
}

/// Reads one metric from a report; `None` when it is undefined.
pub type MetricFn = fn(&EvalReport) -> Option<f64>;

/// Named metric accessors, in report order.
pub fn metric_fields() -> [(&'static str, MetricFn); 6] {
    [
        ("dice", |r| Some(r.dice)),
        ("jaccard", |r| Some(r.jaccard)),
        ("pixel_ap", |r| r.pixel_ap),
        ("frame_ap", |r| r.frame_ap),
        ("frame_ap_lp", |r| r.frame_ap_lp),
        ("stack_auc", |r| r.stack_auc),
    ]
}

pub fn summarize_folds(per_fold: &[EvalReport]) -> BTreeMap<String, MeanStd> {
    let mut out = BTreeMap::new();
    for (name, get) in metric_fields() {
        let values: Vec<f64> = per_fold.iter().filter_map(get).collect();
        if let Some((mean, std)) = mean_std(&values) {
            out.insert(
                name.to_owned(),
                MeanStd {
                    mean,
                    std,
                    folds: values.len(),
                },
            );
        }
    }
    out
}

/// For each fold: `pipeline(train_ids, test_ids)` trains on the other folds
/// and evaluates on this one. Folds come from [`split_folds`].
pub fn cross_validate<F>(stack_ids: &[String], folds: usize, seed: u64, mut pipeline: F) -> Result<CvReport>
where
    F: FnMut(usize, &[String], &[String]) -> Result<EvalReport>,
{
    if folds < 2 {
        return Err(Error::arg("cross validation needs at least 2 folds"));
    }
    let split = split_folds(stack_ids, folds, seed)?;
    let mut per_fold = Vec::with_capacity(folds);
    for k in 0..folds {
        per_fold.push(pipeline(k, &split.complement(k), &split.fold(k))?);
    }
    let summary = summarize_folds(&per_fold);
    Ok(CvReport {
        fold_count: folds,
        seed,
        assignment: split.assignment,
        per_fold,
        summary,
    })
}
