//! Evaluation metrics: Dice overlap, head-circumference differences, and
//! Hausdorff distance, reported per case.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::ellipse::{fit_ellipse, BinaryMask, EllipseParams};

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    DimMismatch(String),
    /// Hausdorff distance is undefined when either mask is empty.
    EmptyMask,
    /// Circumference differences need positive circumferences.
    NonPositiveCircumference(f64),
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::DimMismatch(msg) => write!(f, "dimension mismatch: {msg}"),
            MetricsError::EmptyMask => write!(f, "metric undefined on an empty mask"),
            MetricsError::NonPositiveCircumference(v) => {
                write!(f, "circumference {v} must be positive")
            }
        }
    }
}

impl core::error::Error for MetricsError {}

pub type Result<T> = core::result::Result<T, MetricsError>;

/// Which pixel sets the Hausdorff distance compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HausdorffMode {
    /// Boundary pixels only: sensitive to contour deviations.
    Contour,
    /// All foreground pixels.
    Region,
}

/// Metrics for one evaluated case. `failed` marks predictions whose mask
/// was empty or unfittable; the Option fields are None exactly then.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub case_id: String,
    pub dsc: f64,
    pub hc_pred_mm: Option<f64>,
    pub hc_gt_mm: f64,
    pub df_mm: Option<f64>,
    pub adf_mm: Option<f64>,
    pub hd_px: Option<f64>,
    pub hd_mm: Option<f64>,
    pub failed: bool,
}

/// Mean and population standard deviation of one metric over the
/// non-failed cases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Aggregate over a split: failed cases are excluded from every mean but
/// counted.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub cases: usize,
    pub failed: usize,
    pub dsc: MeanStd,
    pub df_mm: MeanStd,
    pub adf_mm: MeanStd,
    pub hd_px: MeanStd,
    pub hd_mm: MeanStd,
}

fn check_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(MetricsError::DimMismatch(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Dice similarity `2|A n B| / (|A| + |B|)`. Both-empty is defined as 1,
/// one-empty as 0.
pub fn dice_score(seg: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_dims(seg, gt)?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (s, g) in seg.data().iter().zip(gt.data()) {
        inter += (s & g) as usize;
        total += (s + g) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

fn pixel_set(mask: &BinaryMask, mode: HausdorffMode) -> Vec<(usize, usize)> {
    match mode {
        HausdorffMode::Contour => mask.boundary_pixels(),
        HausdorffMode::Region => {
            let mut out = Vec::new();
            for y in 0..mask.height() {
                for x in 0..mask.width() {
                    if mask.get(y, x) {
                        out.push((y, x));
                    }
                }
            }
            out
        }
    }
}

/// Largest squared distance from a point of `from` to its nearest point of
/// `to`. Squared integer distances are exact in f64.
fn directed_sq(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    let mut worst = 0.0f64;
    for &(fy, fx) in from {
        let mut best = f64::MAX;
        for &(ty, tx) in to {
            let dy = ty as f64 - fy as f64;
            let dx = tx as f64 - fx as f64;
            let d2 = dy * dy + dx * dx;
            if d2 < best {
                best = d2;
            }
        }
        if best > worst {
            worst = best;
        }
    }
    worst
}

/// Symmetric Hausdorff distance `max(h(S,R), h(R,S))` in pixels.
pub fn hausdorff_distance(seg: &BinaryMask, gt: &BinaryMask, mode: HausdorffMode) -> Result<f64> {
    check_dims(seg, gt)?;
    let s = pixel_set(seg, mode);
    let r = pixel_set(gt, mode);
    if s.is_empty() || r.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    Ok(libm::sqrt(directed_sq(&s, &r).max(directed_sq(&r, &s))))
}

/// Signed and absolute circumference difference in mm.
pub fn circumference_differences(hc_pred_mm: f64, hc_gt_mm: f64) -> Result<(f64, f64)> {
    if hc_pred_mm <= 0.0 {
        return Err(MetricsError::NonPositiveCircumference(hc_pred_mm));
    }
    if hc_gt_mm <= 0.0 {
        return Err(MetricsError::NonPositiveCircumference(hc_gt_mm));
    }
    let df = hc_pred_mm - hc_gt_mm;
    Ok((df, df.abs()))
}

/// Thresholds probabilities at 0.5 into a mask.
pub fn threshold_probs(probs: &[f32], h: usize, w: usize) -> BinaryMask {
    let mut mask = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            if probs[y * w + x] > 0.5 {
                mask.set(y, x, true);
            }
        }
    }
    mask
}

/// Evaluates one case: thresholds the probabilities, compares against the
/// ground-truth mask and ellipse, and extracts the predicted circumference
/// by ellipse-fitting the predicted mask.
///
/// A prediction whose mask is empty or unfittable yields a failed report
/// (Dice still computed) rather than an error.
pub fn evaluate_case(
    case_id: &str,
    seg_probs: &[f32],
    gt_mask: &BinaryMask,
    gt_ellipse: &EllipseParams,
    pixel_size_mm: f64,
    hd_mode: HausdorffMode,
) -> Result<CaseReport> {
    let (h, w) = (gt_mask.height(), gt_mask.width());
    if seg_probs.len() != h * w {
        return Err(MetricsError::DimMismatch(format!(
            "{} probabilities vs {h}x{w} ground truth",
            seg_probs.len()
        )));
    }
    let pred = threshold_probs(seg_probs, h, w);
    let dsc = dice_score(&pred, gt_mask)?;
    let hc_gt_mm = gt_ellipse
        .circumference_mm(pixel_size_mm)
        .map_err(|_| MetricsError::NonPositiveCircumference(pixel_size_mm))?;

    let fitted = fit_ellipse(&pred);
    let (hc_pred_mm, df, adf, hd_px, hd_mm, failed) = match fitted {
        Ok(e) => match e.circumference_mm(pixel_size_mm) {
            Ok(hc_pred) => {
                let (df, adf) = circumference_differences(hc_pred, hc_gt_mm)?;
                // Mask is non-empty here, so Hausdorff is defined.
                let hd = hausdorff_distance(&pred, gt_mask, hd_mode)?;
                (
                    Some(hc_pred),
                    Some(df),
                    Some(adf),
                    Some(hd),
                    Some(hd * pixel_size_mm),
                    false,
                )
            }
            Err(_) => (None, None, None, None, None, true),
        },
        Err(_) => (None, None, None, None, None, true),
    };

    Ok(CaseReport {
        case_id: String::from(case_id),
        dsc,
        hc_pred_mm,
        hc_gt_mm,
        df_mm: df,
        adf_mm: adf,
        hd_px,
        hd_mm,
        failed,
    })
}

fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: libm::sqrt(var),
    }
}

/// Aggregates case reports; failed cases are counted but excluded from the
/// means.
pub fn summarize(reports: &[CaseReport]) -> Summary {
    let ok: Vec<&CaseReport> = reports.iter().filter(|r| !r.failed).collect();
    let pick = |f: fn(&CaseReport) -> f64| -> Vec<f64> { ok.iter().map(|r| f(r)).collect() };
    Summary {
        cases: reports.len(),
        failed: reports.len() - ok.len(),
        dsc: mean_std(&pick(|r| r.dsc)),
        df_mm: mean_std(&pick(|r| r.df_mm.unwrap_or(0.0))),
        adf_mm: mean_std(&pick(|r| r.adf_mm.unwrap_or(0.0))),
        hd_px: mean_std(&pick(|r| r.hd_px.unwrap_or(0.0))),
        hd_mm: mean_std(&pick(|r| r.hd_mm.unwrap_or(0.0))),
    }
}
