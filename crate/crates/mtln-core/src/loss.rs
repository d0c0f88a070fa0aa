//! The compound training objective: boundary-weighted cross-entropy plus
//! soft Dice for segmentation, MSE for the ellipse parameters, combined as
//! `L = alpha1 * L_seg + alpha2 * L_et`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::ellipse::{boundary_distance_map, BinaryMask, GeomError};
use crate::tensor::{Tape, TensorError, TensorId};

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    BadConfig(String),
    Geom(GeomError),
    Tensor(TensorError),
    DimMismatch(String),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::BadConfig(msg) => write!(f, "bad loss config: {msg}"),
            LossError::Geom(e) => write!(f, "{e}"),
            LossError::Tensor(e) => write!(f, "{e}"),
            LossError::DimMismatch(msg) => write!(f, "dimension mismatch: {msg}"),
        }
    }
}

impl core::error::Error for LossError {}

impl From<GeomError> for LossError {
    fn from(e: GeomError) -> Self {
        LossError::Geom(e)
    }
}

impl From<TensorError> for LossError {
    fn from(e: TensorError) -> Self {
        LossError::Tensor(e)
    }
}

pub type Result<T> = core::result::Result<T, LossError>;

/// Weights and shape constants of the compound loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the segmentation term.
    pub alpha1: f64,
    /// Weight of the ellipse-regression term; 0 disables it (single-task).
    pub alpha2: f64,
    /// Amplitude of the boundary weight map; 0 yields a uniform map.
    pub omega0: f64,
    /// Width of the boundary emphasis band, in pixels.
    pub sigma: f64,
    /// Probability clamp inside the cross-entropy log.
    pub p_clip: f64,
    /// Additive smoothing of the soft Dice ratio.
    pub dice_smooth: f64,
    /// Use the raw printed weight formula `1 + w0 * exp(d / (2 sigma^2))`,
    /// which grows away from the boundary, instead of the Gaussian decay
    /// `1 + w0 * exp(-d^2 / (2 sigma^2))`. Kept for comparison runs only.
    pub growing_weight_form: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha1: 1.0,
            alpha2: 2.0,
            omega0: 30.0,
            sigma: 10.0,
            p_clip: 1e-7,
            dice_smooth: 1e-6,
            growing_weight_form: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 {
            return Err(LossError::BadConfig(format!(
                "alpha1 {} and alpha2 {} must be non-negative",
                self.alpha1, self.alpha2
            )));
        }
        if self.omega0 < 0.0 {
            return Err(LossError::BadConfig(format!(
                "omega0 {} must be non-negative",
                self.omega0
            )));
        }
        if self.sigma <= 0.0 {
            return Err(LossError::BadConfig(format!(
                "sigma {} must be positive",
                self.sigma
            )));
        }
        if !(0.0..0.5).contains(&self.p_clip) || self.p_clip == 0.0 {
            return Err(LossError::BadConfig(format!(
                "p_clip {} must lie in (0, 0.5)",
                self.p_clip
            )));
        }
        if self.dice_smooth < 0.0 {
            return Err(LossError::BadConfig(format!(
                "dice_smooth {} must be non-negative",
                self.dice_smooth
            )));
        }
        Ok(())
    }
}

/// Per-pixel loss amplification concentrated near the mask boundary:
/// `w(x) = 1 + omega0 * exp(-d(x)^2 / (2 sigma^2))` with `d` the Euclidean
/// distance to the nearest boundary pixel. `omega0 = 0` short-circuits to a
/// uniform map (no boundary needed).
pub fn boundary_weight_map(mask: &BinaryMask, cfg: &LossConfig) -> Result<Vec<f32>> {
    cfg.validate()?;
    let len = mask.height() * mask.width();
    if cfg.omega0 == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let dist = boundary_distance_map(mask)?;
    let two_sigma_sq = 2.0 * cfg.sigma * cfg.sigma;
    let out = dist
        .iter()
        .map(|&d| {
            let arg = if cfg.growing_weight_form {
                d / two_sigma_sq
            } else {
                -(d * d) / two_sigma_sq
            };
            (1.0 + cfg.omega0 * libm::exp(arg)) as f32
        })
        .collect();
    Ok(out)
}

/// Pixel-weighted cross-entropy on logits against a binary mask.
pub fn weighted_cross_entropy(
    tape: &mut Tape,
    seg_logits: TensorId,
    gt_mask: &BinaryMask,
    weights: &[f32],
    p_clip: f64,
) -> Result<TensorId> {
    let target = gt_mask.to_f32();
    Ok(tape.weighted_bce_with_logits(seg_logits, &target, weights, p_clip)?)
}

/// Soft Dice loss of probabilities against a binary mask.
pub fn soft_dice_loss(
    tape: &mut Tape,
    seg_probs: TensorId,
    gt_mask: &BinaryMask,
    dice_smooth: f64,
) -> Result<TensorId> {
    let target = gt_mask.to_f32();
    Ok(tape.soft_dice(seg_probs, &target, dice_smooth)?)
}

/// Segmentation term: boundary-weighted cross-entropy plus unweighted soft
/// Dice. The weight map scales the pixel-wise term only; Dice is a scalar
/// overlap ratio.
pub fn segmentation_loss(
    tape: &mut Tape,
    seg_logits: TensorId,
    gt_mask: &BinaryMask,
    cfg: &LossConfig,
) -> Result<TensorId> {
    let dims = tape.dims(seg_logits).to_vec();
    let n: usize = dims.iter().product();
    if n != gt_mask.height() * gt_mask.width() {
        return Err(LossError::DimMismatch(format!(
            "logits {dims:?} vs {}x{} mask",
            gt_mask.height(),
            gt_mask.width()
        )));
    }
    let w = boundary_weight_map(gt_mask, cfg)?;
    let ce = weighted_cross_entropy(tape, seg_logits, gt_mask, &w, cfg.p_clip)?;
    let probs = tape.sigmoid(seg_logits)?;
    let dice = soft_dice_loss(tape, probs, gt_mask, cfg.dice_smooth)?;
    Ok(tape.add(ce, dice)?)
}

/// Mean squared error over the 5 normalized ellipse parameters.
pub fn ellipse_param_mse(
    tape: &mut Tape,
    pred: TensorId,
    gt_normalized: &[f32; 5],
) -> Result<TensorId> {
    if tape.dims(pred) != [5] {
        return Err(LossError::DimMismatch(format!(
            "ellipse prediction must be a 5-vector, got {:?}",
            tape.dims(pred)
        )));
    }
    Ok(tape.mse(pred, gt_normalized)?)
}

/// Combines the two terms: `alpha1 * l_seg + alpha2 * l_et`. Passing no
/// ellipse term (or `alpha2 = 0`) keeps the regression head out of the
/// graph entirely, so its parameters receive no gradient.
pub fn total_loss(
    tape: &mut Tape,
    l_seg: TensorId,
    l_et: Option<TensorId>,
    cfg: &LossConfig,
) -> Result<TensorId> {
    let seg_term = tape.scale(l_seg, cfg.alpha1 as f32)?;
    match l_et {
        Some(et) if cfg.alpha2 > 0.0 => {
            let et_term = tape.scale(et, cfg.alpha2 as f32)?;
            Ok(tape.add(seg_term, et_term)?)
        }
        _ => Ok(seg_term),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ellipse::{rasterize_ellipse, EllipseParams};

    fn table_cfg() -> LossConfig {
        LossConfig::default()
    }

    fn single_pixel_mask() -> BinaryMask {
        let mut m = BinaryMask::zeros(64, 64);
        m.set(4, 4, true);
        m
    }

    #[test]
    fn weight_map_boundary_value_is_one_plus_amplitude() {
        let m = single_pixel_mask();
        let w = boundary_weight_map(&m, &table_cfg()).unwrap();
        assert_eq!(w[4 * 64 + 4], 31.0);
    }

    #[test]
    fn weight_map_at_one_sigma_distance() {
        // d = 10 with sigma = 10: w = 1 + 30 * exp(-1/2) = 19.1959...
        let m = single_pixel_mask();
        let w = boundary_weight_map(&m, &table_cfg()).unwrap();
        let w10 = w[4 * 64 + 14];
        assert!((19.1..=19.3).contains(&(w10 as f64)), "{w10}");
        assert!((w10 as f64 - 19.19592).abs() < 1e-4);
    }

    #[test]
    fn weight_map_decays_to_one_far_away() {
        let m = single_pixel_mask();
        let w = boundary_weight_map(&m, &table_cfg()).unwrap();
        // d = 50 = 5 sigma.
        let far = w[4 * 64 + 54];
        assert!(far >= 1.0 && (far as f64) < 1.0002, "{far}");
        assert!(w.iter().all(|&v| v >= 1.0));
    }

    #[test]
    fn weight_map_zero_amplitude_is_uniform_even_without_boundary() {
        let empty = BinaryMask::zeros(8, 8);
        let cfg = LossConfig {
            omega0: 0.0,
            ..table_cfg()
        };
        let w = boundary_weight_map(&empty, &cfg).unwrap();
        assert!(w.iter().all(|&v| v == 1.0));
        // With amplitude, the missing boundary is an error.
        assert!(matches!(
            boundary_weight_map(&empty, &table_cfg()),
            Err(LossError::Geom(GeomError::NoBoundary))
        ));
    }

    #[test]
    fn growing_weight_form_increases_with_distance() {
        let m = single_pixel_mask();
        let cfg = LossConfig {
            growing_weight_form: true,
            ..table_cfg()
        };
        let w = boundary_weight_map(&m, &cfg).unwrap();
        assert_eq!(w[4 * 64 + 4], 31.0);
        assert!(w[4 * 64 + 34] > w[4 * 64 + 14]);
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        for bad in [
            LossConfig { alpha1: -1.0, ..table_cfg() },
            LossConfig { omega0: -0.1, ..table_cfg() },
            LossConfig { sigma: 0.0, ..table_cfg() },
            LossConfig { p_clip: 0.0, ..table_cfg() },
            LossConfig { p_clip: 0.5, ..table_cfg() },
            LossConfig { dice_smooth: -1.0, ..table_cfg() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        assert!(table_cfg().validate().is_ok());
    }

    fn small_mask() -> BinaryMask {
        rasterize_ellipse(
            &EllipseParams {
                cx: 8.0,
                cy: 8.0,
                a: 5.0,
                b: 3.0,
                theta: 0.4,
            },
            16,
            16,
        )
        .unwrap()
    }

    #[test]
    fn cross_entropy_all_zero_logits_is_ln_two() {
        let m = small_mask();
        let mut t = Tape::new();
        let logits = t.leaf(&[1, 1, 16, 16], vec![0.0; 256], true).unwrap();
        let w = vec![1.0f32; 256];
        let loss = weighted_cross_entropy(&mut t, logits, &m, &w, 1e-7).unwrap();
        assert!((t.scalar(loss) - core::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_near_perfect_prediction_vanishes() {
        let m = small_mask();
        let logits_v: Vec<f32> = m.data().iter().map(|&v| if v == 1 { 20.0 } else { -20.0 }).collect();
        let mut t = Tape::new();
        let logits = t.leaf(&[1, 1, 16, 16], logits_v, true).unwrap();
        let w = vec![1.0f32; 256];
        let loss = weighted_cross_entropy(&mut t, logits, &m, &w, 1e-7).unwrap();
        assert!(t.scalar(loss) < 1e-6);
    }

    #[test]
    fn segmentation_loss_reduces_to_plain_ce_plus_dice_when_uniform() {
        let m = small_mask();
        let logits_v: Vec<f32> = (0..256).map(|i| ((i * 13 % 29) as f32 - 14.0) * 0.1).collect();
        let cfg = LossConfig {
            omega0: 0.0,
            ..table_cfg()
        };

        let mut t1 = Tape::new();
        let l1 = t1.leaf(&[1, 1, 16, 16], logits_v.clone(), true).unwrap();
        let total = segmentation_loss(&mut t1, l1, &m, &cfg).unwrap();

        let mut t2 = Tape::new();
        let l2 = t2.leaf(&[1, 1, 16, 16], logits_v, true).unwrap();
        let ce = weighted_cross_entropy(&mut t2, l2, &m, &vec![1.0; 256], cfg.p_clip).unwrap();
        let probs = t2.sigmoid(l2).unwrap();
        let dice = soft_dice_loss(&mut t2, probs, &m, cfg.dice_smooth).unwrap();

        assert_eq!(t1.scalar(total), t2.scalar(ce) + t2.scalar(dice));
    }

    #[test]
    fn segmentation_loss_perfect_prediction_is_tiny() {
        let m = small_mask();
        let logits_v: Vec<f32> = m.data().iter().map(|&v| if v == 1 { 25.0 } else { -25.0 }).collect();
        let mut t = Tape::new();
        let l = t.leaf(&[1, 1, 16, 16], logits_v, true).unwrap();
        let loss = segmentation_loss(&mut t, l, &m, &table_cfg()).unwrap();
        assert!(t.scalar(loss) < 1e-4, "{}", t.scalar(loss));
    }

    #[test]
    fn boundary_errors_cost_more_as_amplitude_grows() {
        let m = small_mask();
        // Mispredict exactly the boundary pixels.
        let logits_v: Vec<f32> = {
            let boundary = m.boundary_pixels();
            let mut v: Vec<f32> = m.data().iter().map(|&g| if g == 1 { 6.0 } else { -6.0 }).collect();
            for (y, x) in boundary {
                v[y * 16 + x] = -6.0;
            }
            v
        };
        let mut last = 0.0;
        for omega0 in [0.0, 10.0, 30.0] {
            let cfg = LossConfig { omega0, ..table_cfg() };
            let mut t = Tape::new();
            let l = t.leaf(&[1, 1, 16, 16], logits_v.clone(), true).unwrap();
            let loss = segmentation_loss(&mut t, l, &m, &cfg).unwrap();
            assert!(t.scalar(loss) > last);
            last = t.scalar(loss);
        }
    }

    #[test]
    fn ellipse_mse_off_by_two_in_one_coordinate() {
        let mut t = Tape::new();
        let pred = t.leaf(&[5], vec![1.0, 2.0, 3.0, 4.0, 5.0], true).unwrap();
        let gt = [1.0f32, 2.0, 5.0, 4.0, 5.0];
        let loss = ellipse_param_mse(&mut t, pred, &gt).unwrap();
        assert!((t.scalar(loss) - 0.8).abs() < 1e-6);
    }

    #[test]
    fn ellipse_mse_is_symmetric_and_zero_at_match() {
        let p = [0.3f32, 0.4, 0.2, 0.1, 0.7];
        let q = [0.1f32, 0.5, 0.25, 0.15, 0.2];
        let run = |a: &[f32; 5], b: &[f32; 5]| -> f32 {
            let mut t = Tape::new();
            let pv = t.leaf(&[5], a.to_vec(), true).unwrap();
            let loss = ellipse_param_mse(&mut t, pv, b).unwrap();
            t.scalar(loss)
        };
        assert_eq!(run(&p, &q), run(&q, &p));
        assert_eq!(run(&p, &p), 0.0);
    }

    #[test]
    fn ellipse_mse_rejects_wrong_length() {
        let mut t = Tape::new();
        let pred = t.leaf(&[4], vec![0.0; 4], true).unwrap();
        assert!(matches!(
            ellipse_param_mse(&mut t, pred, &[0.0; 5]),
            Err(LossError::DimMismatch(_))
        ));
    }

    #[test]
    fn total_loss_combines_with_table_weights() {
        // alpha1 = 1, alpha2 = 2, L_seg = 0.5, L_et = 0.25 -> 1.0.
        let mut t = Tape::new();
        let ls = t.leaf(&[1], vec![0.5], true).unwrap();
        let le = t.leaf(&[1], vec![0.25], true).unwrap();
        let total = total_loss(&mut t, ls, Some(le), &table_cfg()).unwrap();
        assert_eq!(t.scalar(total), 1.0);
    }

    #[test]
    fn total_loss_zero_inputs_and_single_task() {
        let cfg = table_cfg();
        let mut t = Tape::new();
        let ls = t.leaf(&[1], vec![0.0], true).unwrap();
        let le = t.leaf(&[1], vec![0.0], true).unwrap();
        let total = total_loss(&mut t, ls, Some(le), &cfg).unwrap();
        assert_eq!(t.scalar(total), 0.0);

        let single = LossConfig { alpha2: 0.0, ..cfg };
        let mut t = Tape::new();
        let ls = t.leaf(&[1], vec![0.5], true).unwrap();
        let le = t.leaf(&[1], vec![9.0], true).unwrap();
        let total = total_loss(&mut t, ls, Some(le), &single).unwrap();
        assert_eq!(t.scalar(total), 0.5);
        // The ellipse term never entered the graph, so it has no gradient.
        t.backward(total).unwrap();
        assert!(t.grad(le).is_none());
    }

    #[test]
    fn losses_stay_finite_at_extreme_logits() {
        let m = small_mask();
        for v in [-1e4f32, -50.0, 0.0, 50.0, 1e4] {
            let mut t = Tape::new();
            let l = t.leaf(&[1, 1, 16, 16], vec![v; 256], true).unwrap();
            let loss = segmentation_loss(&mut t, l, &m, &table_cfg()).unwrap();
            assert!(t.scalar(loss).is_finite(), "logit {v}");
            assert!(t.scalar(loss) >= 0.0);
        }
    }
}
