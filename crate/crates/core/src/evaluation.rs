//! Otsu foreground masks, liver fat-fraction quantification and cohort
//! error reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phantom::STEATOSIS_CUTOFF;

pub const OTSU_BINS: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("histogram has no counts")]
    EmptyHistogram,
    #[error("liver mask selects no voxels")]
    EmptyLiverMask,
    #[error("ff map has {found} voxels but mask has {expected}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("prediction and reference subjects differ: missing {missing:?}, unexpected {unexpected:?}")]
    SubjectMismatch { missing: Vec<String>, unexpected: Vec<String> },
}

/// Between-class score `n0 n1 (mu0 - mu1)^2 / n^2`, scaled by `n^2`.
///
/// `n0, s0` are the count and first moment of the lower class, `n, s` of
/// the whole histogram. Computed from exact integer moments so any two
/// callers with the same moments get the same bits.
pub fn between_class_score(n0: u64, s0: u64, n: u64, s: u64) -> f64 {
    let n1 = n - n0;
    if n0 == 0 || n1 == 0 {
        return f64::NEG_INFINITY;
    }
    // n0 n1 (mu0 - mu1)^2 = (s0 n - s n0)^2 / (n0 n1)
    let d = s0 as i128 * n as i128 - s as i128 * n0 as i128;
    let d = d as f64;
    d * d / (n0 as f64 * n1 as f64)
}

/// Otsu threshold bin: voxels in bins strictly above it are foreground.
///
/// Only thresholds leaving both classes non-empty are scored; ties go to
/// the lowest bin. A histogram occupying a single bin returns that bin.
pub fn otsu_threshold(histogram: &[u64]) -> Result<usize, EvalError> {
    let n: u64 = histogram.iter().sum();
    if n == 0 {
        return Err(EvalError::EmptyHistogram);
    }
    let s: u64 = histogram.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best: Option<(usize, f64)> = None;
    for (t, &c) in histogram.iter().enumerate() {
        n0 += c;
        s0 += t as u64 * c;
        if n0 == 0 || n0 == n {
            continue;
        }
        let score = between_class_score(n0, s0, n, s);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((t, score));
        }
    }
    Ok(match best {
        Some((t, _)) => t,
        None => histogram.iter().rposition(|&c| c > 0).expect("nonzero histogram"),
    })
}

/// Bin of `v` in a 256-bin linear histogram over `[0, max]`.
pub fn histogram_bin(v: f64, max: f64) -> usize {
    if !(max > 0.0) || !(v > 0.0) {
        return 0;
    }
    ((v / max * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    /// Upper edge of the threshold bin in image units; `None` for an all-zero slice.
    pub threshold: Option<f64>,
}

impl ForegroundMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Otsu mask of one nonnegative `W + F` slice.
pub fn foreground_mask(wf_sum: &[f64], height: usize, width: usize) -> ForegroundMask {
    assert_eq!(wf_sum.len(), height * width, "slice size");
    let max = wf_sum.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return ForegroundMask { height, width, mask: vec![false; wf_sum.len()], threshold: None };
    }
    let bins: Vec<usize> = wf_sum.iter().map(|&v| histogram_bin(v, max)).collect();
    let mut hist = [0u64; OTSU_BINS];
    for &b in &bins {
        hist[b] += 1;
    }
    let t = otsu_threshold(&hist).expect("nonempty slice");
    ForegroundMask {
        height,
        width,
        mask: bins.iter().map(|&b| b > t).collect(),
        threshold: Some((t + 1) as f64 * max / OTSU_BINS as f64),
    }
}

/// Median of `values`; even counts average the two middle values.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    Some(if values.len() % 2 == 1 { values[m] } else { 0.5 * (values[m - 1] + values[m]) })
}

/// Median FF over every liver voxel of a subject's stack.
pub fn liver_ff(ff: &[f64], liver_mask: &[bool]) -> Result<f64, EvalError> {
    if ff.len() != liver_mask.len() {
        return Err(EvalError::SizeMismatch { expected: liver_mask.len(), found: ff.len() });
    }
    let mut v: Vec<f64> = ff.iter().zip(liver_mask).filter(|(_, &m)| m).map(|(&f, _)| f).collect();
    median(&mut v).ok_or(EvalError::EmptyLiverMask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiverClass {
    Normal,
    Fatty,
}

/// Fatty iff `ff > cutoff`; a value equal to the cutoff is normal.
pub fn classify_liver_at(ff: f64, cutoff: f64) -> LiverClass {
    if ff > cutoff {
        LiverClass::Fatty
    } else {
        LiverClass::Normal
    }
}

pub fn classify_liver(ff: f64) -> LiverClass {
    classify_liver_at(ff, STEATOSIS_CUTOFF)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiverRow {
    pub id: String,
    pub reference: f64,
    pub predicted: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiverReport {
    pub cutoff: f64,
    pub subjects: Vec<LiverRow>,
    pub mae: f64,
    /// Mean of `predicted - reference`.
    pub bias: f64,
    /// Reference normal, predicted fatty.
    pub normal_to_fatty: usize,
    /// Reference fatty, predicted normal.
    pub fatty_to_normal: usize,
}

impl LiverReport {
    pub fn misclassified(&self) -> usize {
        self.normal_to_fatty + self.fatty_to_normal
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,reference_ff,predicted_ff,abs_error,reference_class,predicted_class\n");
        for r in &self.subjects {
            let _ = writeln!(
                out,
                "{},{},{},{},{:?},{:?}",
                r.id,
                r.reference,
                r.predicted,
                r.abs_error,
                classify_liver_at(r.reference, self.cutoff),
                classify_liver_at(r.predicted, self.cutoff)
            );
        }
        out
    }
}

/// Per-subject liver errors and misclassification counts. Rows follow the
/// order of `references`.
pub fn liver_report(
    predictions: &[(String, f64)],
    references: &[(String, f64)],
    cutoff: f64,
) -> Result<LiverReport, EvalError> {
    let missing: Vec<String> = references
        .iter()
        .filter(|(id, _)| !predictions.iter().any(|(p, _)| p == id))
        .map(|(id, _)| id.clone())
        .collect();
    let unexpected: Vec<String> = predictions
        .iter()
        .filter(|(id, _)| !references.iter().any(|(r, _)| r == id))
        .map(|(id, _)| id.clone())
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() || predictions.len() != references.len() {
        return Err(EvalError::SubjectMismatch { missing, unexpected });
    }
    let mut rows = Vec::with_capacity(references.len());
    let (mut n2f, mut f2n) = (0, 0);
    for (id, reference) in references {
        let predicted = predictions.iter().find(|(p, _)| p == id).map(|(_, v)| *v).expect("checked above");
        match (classify_liver_at(*reference, cutoff), classify_liver_at(predicted, cutoff)) {
            (LiverClass::Normal, LiverClass::Fatty) => n2f += 1,
            (LiverClass::Fatty, LiverClass::Normal) => f2n += 1,
            _ => {}
        }
        rows.push(LiverRow { id: id.clone(), reference: *reference, predicted, abs_error: (predicted - reference).abs() });
    }
    let n = rows.len().max(1) as f64;
    let mae = rows.iter().map(|r| r.abs_error).sum::<f64>() / n;
    let bias = rows.iter().map(|r| r.predicted - r.reference).sum::<f64>() / n;
    Ok(LiverReport { cutoff, subjects: rows, mae, bias, normal_to_fatty: n2f, fatty_to_normal: f2n })
}

/// Voxelwise (reference, predicted) pairs over a mask, as CSV for scatter plots.
pub fn scatter_csv(reference: &[f64], predicted: &[f64], mask: &[bool]) -> String {
    let mut out = String::from("reference_ff,predicted_ff\n");
    for ((r, p), &m) in reference.iter().zip(predicted).zip(mask) {
        if m {
            let _ = writeln!(out, "{r},{p}");
        }
    }
    out
}

/// Mean absolute difference over a mask; `None` when the mask is empty.
pub fn masked_mae(a: &[f64], b: &[f64], mask: &[bool]) -> Option<f64> {
    let (mut acc, mut n) = (0.0, 0usize);
    for ((x, y), &m) in a.iter().zip(b).zip(mask) {
        if m {
            acc += (x - y).abs();
            n += 1;
        }
    }
    (n > 0).then(|| acc / n as f64)
}
