//! Pixel-level segmentation and depth metrics.
//!
//! Thresholded segmentation metrics are micro-averaged: confusion counts are
//! pooled across images before any ratio is taken. AUC and AP rank every
//! pooled pixel score. Depth errors pool valid pixels; the wire-depth error
//! is averaged per image over images that contain wires.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Add, AddAssign};

use crate::error::{Error, Result};

/// Column order of every emitted report.
pub const REPORT_COLUMNS: [&str; 9] = [
    "iou",
    "auc",
    "ap",
    "precision",
    "recall",
    "f1",
    "abs_rel",
    "mae",
    "abs_rel_wd",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SegCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Add for SegCounts {
    type Output = SegCounts;
    fn add(self, o: SegCounts) -> SegCounts {
        SegCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for SegCounts {
    fn add_assign(&mut self, o: SegCounts) {
        *self = *self + o;
    }
}

fn binary(op: &'static str, v: f32) -> Result<bool> {
    if v == 0.0 {
        Ok(false)
    } else if v == 1.0 {
        Ok(true)
    } else {
        Err(Error::NonBinary { op, value: v as f64 })
    }
}

/// Confusion counts of two binary masks (values exactly 0 or 1).
pub fn seg_counts(pred: &[f32], gt: &[f32]) -> Result<SegCounts> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "seg_counts",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    let mut c = SegCounts::default();
    for (&p, &t) in pred.iter().zip(gt) {
        match (binary("seg_counts", p)?, binary("seg_counts", t)?) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ThresholdMetrics {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when at least one ratio was 0/0 and reported as 0.
    pub degenerate: bool,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn threshold_metrics(c: SegCounts) -> ThresholdMetrics {
    let (iou, d_iou) = ratio(c.tp, c.tp + c.fp + c.fn_);
    let (precision, d_p) = ratio(c.tp, c.tp + c.fp);
    let (recall, d_r) = ratio(c.tp, c.tp + c.fn_);
    let (f1, d_f) = if precision + recall > 0.0 {
        (2.0 * precision * recall / (precision + recall), false)
    } else {
        (0.0, true)
    };
    ThresholdMetrics {
        iou,
        precision,
        recall,
        f1,
        degenerate: d_iou || d_p || d_r || d_f,
        precision_undefined: d_p,
        recall_undefined: d_r,
    }
}

fn sorted_by_score(scores: &[f32], labels: &[bool]) -> Vec<(f32, bool)> {
    let mut v: Vec<(f32, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    v.sort_by(|a, b| b.0.total_cmp(&a.0));
    v
}

/// ROC AUC (rank statistic with tied ranks averaged) and average precision
/// (precision summed over recall increments at each distinct score).
/// `None` when the labels hold a single class.
pub fn ranking_metrics(scores: &[f32], labels: &[bool]) -> Result<Option<(f64, f64)>> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "ranking_metrics",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let sorted = sorted_by_score(scores, labels);

    // walk tie groups from highest score down
    let n = sorted.len();
    let mut rank_sum_pos = 0.0f64;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        let mut pos = 0u64;
        while j < n && sorted[j].0 == sorted[i].0 {
            pos += sorted[j].1 as u64;
            j += 1;
        }
        let len = (j - i) as u64;
        // ascending ranks of this group are n-j+1 ..= n-i
        let avg_rank = ((n - j + 1) + (n - i)) as f64 / 2.0;
        rank_sum_pos += avg_rank * pos as f64;
        tp += pos;
        fp += len - pos;
        if pos > 0 {
            ap += (pos as f64 / n_pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    let auc = u / (n_pos as f64 * n_neg as f64);
    Ok(Some((auc, ap)))
}

/// Threshold maximizing F1 when predicting `score >= threshold`, and that F1.
pub fn best_f1_threshold(scores: &[f32], labels: &[bool]) -> Option<(f32, f64)> {
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    if n_pos == 0 {
        return None;
    }
    let sorted = sorted_by_score(scores, labels);
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut best: Option<(f32, f64)> = None;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + (n_pos - tp)) as f64;
        if best.map_or(true, |b| f1 > b.1) {
            best = Some((t, f1));
        }
    }
    best
}

/// `(abs_rel, mae)` over pixels where `valid` is set (all pixels if `None`).
pub fn depth_metrics(pred: &[f32], gt: &[f32], valid: Option<&[bool]>) -> Result<Option<(f64, f64)>> {
    let acc = DepthSums::collect(pred, gt, valid)?;
    Ok(acc.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct DepthSums {
    abs_rel: f64,
    abs: f64,
    count: u64,
}

impl DepthSums {
    fn collect(pred: &[f32], gt: &[f32], valid: Option<&[bool]>) -> Result<Self> {
        if pred.len() != gt.len() || valid.is_some_and(|v| v.len() != gt.len()) {
            return Err(Error::ShapeMismatch {
                op: "depth_metrics",
                lhs: vec![pred.len()],
                rhs: vec![gt.len()],
            });
        }
        let mut s = DepthSums::default();
        for i in 0..gt.len() {
            if valid.map_or(true, |v| v[i]) && gt[i] > 0.0 {
                let e = (pred[i] as f64 - gt[i] as f64).abs();
                s.abs += e;
                s.abs_rel += e / gt[i] as f64;
                s.count += 1;
            }
        }
        Ok(s)
    }

    fn finish(&self) -> Option<(f64, f64)> {
        (self.count > 0).then(|| (self.abs_rel / self.count as f64, self.abs / self.count as f64))
    }
}

/// Grows a binary mask by a disk of `radius` pixels.
pub fn dilate(mask: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let r = radius as isize;
    let mut out = vec![false; mask.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !mask[y as usize * w + x as usize] {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if dy * dy + dx * dx <= r * r && yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        out[yy as usize * w + xx as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// Absolute relative depth error over ground-truth wire pixels of one
/// `h x w` image, the mask optionally dilated. `None` without wire pixels.
pub fn wire_depth_abs_rel(
    pred: &[f32],
    gt: &[f32],
    wire_mask: &[f32],
    h: usize,
    w: usize,
    dilation_radius: usize,
) -> Result<Option<f64>> {
    if wire_mask.len() != h * w || gt.len() != h * w {
        return Err(Error::ShapeMismatch {
            op: "wire_depth_abs_rel",
            lhs: vec![h, w],
            rhs: vec![wire_mask.len()],
        });
    }
    let mask: Vec<bool> = wire_mask
        .iter()
        .map(|&v| binary("wire_depth_abs_rel", v))
        .collect::<Result<_>>()?;
    let mask = dilate(&mask, h, w, dilation_radius);
    Ok(DepthSums::collect(pred, gt, Some(&mask))?.finish().map(|(r, _)| r))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct EvalOptions {
    /// Probability at or above which a pixel counts as wire.
    pub threshold: f32,
    pub wire_dilation: usize,
    /// Average thresholded metrics per image instead of pooling counts.
    pub macro_average: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            wire_dilation: 0,
            macro_average: false,
        }
    }
}

/// Mergeable per-split accumulator.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    counts: SegCounts,
    per_image: Vec<SegCounts>,
    scores: Vec<f32>,
    labels: Vec<bool>,
    depth: DepthSums,
    wd_sum: f64,
    wd_images: u64,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one `h x w` image: wire probabilities, binary ground truth,
    /// predicted and true depth.
    pub fn add_image(
        &mut self,
        prob: &[f32],
        gt_mask: &[f32],
        pred_depth: &[f32],
        gt_depth: &[f32],
        (h, w): (usize, usize),
        opts: &EvalOptions,
    ) -> Result<()> {
        let n = h * w;
        if [prob.len(), gt_mask.len(), pred_depth.len(), gt_depth.len()] != [n; 4] {
            return Err(Error::ShapeMismatch {
                op: "add_image",
                lhs: vec![h, w],
                rhs: vec![prob.len(), gt_mask.len(), pred_depth.len(), gt_depth.len()],
            });
        }
        let pred: Vec<f32> = prob
            .iter()
            .map(|&p| if p >= opts.threshold { 1.0 } else { 0.0 })
            .collect();
        let c = seg_counts(&pred, gt_mask)?;
        self.counts += c;
        self.per_image.push(c);
        self.scores.extend_from_slice(prob);
        self.labels.extend(gt_mask.iter().map(|&v| v == 1.0));
        let d = DepthSums::collect(pred_depth, gt_depth, None)?;
        self.depth.abs += d.abs;
        self.depth.abs_rel += d.abs_rel;
        self.depth.count += d.count;
        if let Some(wd) = wire_depth_abs_rel(pred_depth, gt_depth, gt_mask, h, w, opts.wire_dilation)? {
            self.wd_sum += wd;
            self.wd_images += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: MetricAccumulator) {
        self.counts += other.counts;
        self.per_image.extend(other.per_image);
        self.scores.extend(other.scores);
        self.labels.extend(other.labels);
        self.depth.abs += other.depth.abs;
        self.depth.abs_rel += other.depth.abs_rel;
        self.depth.count += other.depth.count;
        self.wd_sum += other.wd_sum;
        self.wd_images += other.wd_images;
    }

    pub fn counts(&self) -> SegCounts {
        self.counts
    }

    pub fn scores_and_labels(&self) -> (&[f32], &[bool]) {
        (&self.scores, &self.labels)
    }

    pub fn finish(&self, opts: &EvalOptions) -> Result<EvalReport> {
        let mut flags = Vec::new();
        let tm = if opts.macro_average && !self.per_image.is_empty() {
            let k = self.per_image.len() as f64;
            let mut m = ThresholdMetrics::default();
            for &c in &self.per_image {
                let t = threshold_metrics(c);
                m.iou += t.iou / k;
                m.precision += t.precision / k;
                m.recall += t.recall / k;
                m.f1 += t.f1 / k;
                m.degenerate |= t.degenerate;
                m.precision_undefined |= t.precision_undefined;
                m.recall_undefined |= t.recall_undefined;
            }
            m
        } else {
            threshold_metrics(self.counts)
        };
        if tm.precision_undefined {
            flags.push(ReportFlag::PrecisionUndefined);
        }
        if tm.recall_undefined {
            flags.push(ReportFlag::RecallUndefined);
        }
        if tm.degenerate {
            flags.push(ReportFlag::DegenerateCounts);
        }
        let ranking = ranking_metrics(&self.scores, &self.labels)?;
        if ranking.is_none() {
            flags.push(ReportFlag::SingleClass);
        }
        let depth = self.depth.finish();
        if depth.is_none() {
            flags.push(ReportFlag::NoValidDepth);
        }
        let abs_rel_wd = (self.wd_images > 0).then(|| self.wd_sum / self.wd_images as f64);
        if abs_rel_wd.is_none() {
            flags.push(ReportFlag::NoWirePixels);
        }
        Ok(EvalReport {
            iou: tm.iou,
            auc: ranking.map(|r| r.0),
            ap: ranking.map(|r| r.1),
            precision: tm.precision,
            recall: tm.recall,
            f1: tm.f1,
            abs_rel: depth.map(|d| d.0),
            depth_mae: depth.map(|d| d.1),
            abs_rel_wd,
            n_samples: self.per_image.len(),
            threshold: opts.threshold,
            flags,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFlag {
    PrecisionUndefined,
    RecallUndefined,
    DegenerateCounts,
    SingleClass,
    NoValidDepth,
    NoWirePixels,
}

impl ReportFlag {
    pub fn name(self) -> &'static str {
        match self {
            ReportFlag::PrecisionUndefined => "precision_undefined",
            ReportFlag::RecallUndefined => "recall_undefined",
            ReportFlag::DegenerateCounts => "degenerate_counts",
            ReportFlag::SingleClass => "single_class_ground_truth",
            ReportFlag::NoValidDepth => "no_valid_depth",
            ReportFlag::NoWirePixels => "no_wire_pixels",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub iou: f64,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub abs_rel: Option<f64>,
    pub depth_mae: Option<f64>,
    pub abs_rel_wd: Option<f64>,
    pub n_samples: usize,
    pub threshold: f32,
    pub flags: Vec<ReportFlag>,
}

impl EvalReport {
    /// Values in [`REPORT_COLUMNS`] order.
    pub fn columns(&self) -> [(&'static str, Option<f64>); 9] {
        let v = [
            Some(self.iou),
            self.auc,
            self.ap,
            Some(self.precision),
            Some(self.recall),
            Some(self.f1),
            self.abs_rel,
            self.depth_mae,
            self.abs_rel_wd,
        ];
        let mut out = [("", None); 9];
        for (i, name) in REPORT_COLUMNS.iter().enumerate() {
            out[i] = (*name, v[i]);
        }
        out
    }

    pub fn get(&self, column: &str) -> Option<f64> {
        self.columns().iter().find(|c| c.0 == column).and_then(|c| c.1)
    }

    pub fn has_flag(&self, flag: ReportFlag) -> bool {
        self.flags.contains(&flag)
    }
}
