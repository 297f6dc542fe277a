//! Instance-class weighted loss: per-class confidence from augmented views,
//! smoothed over time, turned into `(1 - delta)^lambda` loss weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{argmax, Grid, ProbMap};
use crate::model::{backward_weighted_ce, weighted_ce_pixel, FeatureMap, HeadParams};

/// Which pixels enter a class's mean confidence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassMeanMode {
    /// Class probability averaged over every pixel.
    AllPixels,
    /// Class probability averaged over pixels predicted as that class.
    PredictedPixels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcwlConfig {
    pub lambda: f64,
    pub sigma: f64,
    pub enable_aug: bool,
    pub enable_ema: bool,
    pub class_mean_mode: ClassMeanMode,
}

impl Default for IcwlConfig {
    fn default() -> Self {
        Self {
            lambda: 3.0,
            sigma: 0.999,
            enable_aug: true,
            enable_ema: true,
            class_mean_mode: ClassMeanMode::AllPixels,
        }
    }
}

impl IcwlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidParameter(format!("lambda = {} must be >= 0", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::InvalidParameter(format!("sigma = {} outside [0, 1]", self.sigma)));
        }
        Ok(())
    }
}

/// Smoothed per-class confidence, starting at full confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyState {
    pub delta: Vec<f64>,
    pub step: u64,
}

impl DifficultyState {
    pub fn new(classes: usize) -> Self {
        Self {
            delta: vec![1.0; classes],
            step: 0,
        }
    }
}

/// Mean class probability over views and pixels. `None` marks a class no
/// pixel was predicted as, which only happens in predicted-pixels mode.
pub fn class_confidence(preds: &[ProbMap], classes: usize, mode: ClassMeanMode) -> Result<Vec<Option<f64>>> {
    let first = preds
        .first()
        .ok_or_else(|| Error::InvalidParameter("class confidence needs at least one view".into()))?;
    if preds.iter().any(|p| !p.same_shape(first)) || first.classes() != classes {
        return Err(Error::Shape("view predictions must share the original frame".into()));
    }
    let mut sums = vec![0.0; classes];
    let mut counts = vec![0usize; classes];
    for p in preds {
        for px in p.pixel_iter() {
            match mode {
                ClassMeanMode::AllPixels => {
                    for (s, v) in sums.iter_mut().zip(px) {
                        *s += v;
                    }
                }
                ClassMeanMode::PredictedPixels => {
                    let (c, v) = argmax(px);
                    sums[c] += v;
                    counts[c] += 1;
                }
            }
        }
    }
    let total = (preds.len() * first.grid().pixels()) as f64;
    Ok(match mode {
        ClassMeanMode::AllPixels => sums.into_iter().map(|s| Some(s / total)).collect(),
        ClassMeanMode::PredictedPixels => sums
            .into_iter()
            .zip(counts)
            .map(|(s, n)| (n > 0).then(|| s / n as f64))
            .collect(),
    })
}

/// One EMA step of the per-class confidence; classes without an
/// observation keep their value.
pub fn update_difficulty(state: &mut DifficultyState, observed: &[Option<f64>], cfg: &IcwlConfig) -> Result<()> {
    if observed.len() != state.delta.len() {
        return Err(Error::Shape("observation length differs from class count".into()));
    }
    for (d, o) in state.delta.iter_mut().zip(observed) {
        if let Some(y) = *o {
            let next = if cfg.enable_ema {
                cfg.sigma * *d + (1.0 - cfg.sigma) * y
            } else {
                y
            };
            *d = next.clamp(0.0, 1.0);
        }
    }
    state.step += 1;
    Ok(())
}

/// `(1 - delta_c)^lambda` for every class, with `0^0 = 1`.
pub fn loss_weights(state: &DifficultyState, lambda: f64) -> Vec<f64> {
    state
        .delta
        .iter()
        .map(|d| (1.0 - d).max(0.0).powf(lambda))
        .collect()
}

/// Weighted soft cross-entropy of the student against the pseudo label.
pub fn weighted_consistency_loss(
    student: &HeadParams,
    feat: &FeatureMap,
    pseudo: &ProbMap,
    weights: &[f64],
) -> Result<(HeadParams, f64)> {
    backward_weighted_ce(student, feat, pseudo, weights)
}

/// Per-pixel weighted loss, as a one-channel grid.
pub fn weighted_loss_map(student_pred: &ProbMap, pseudo: &ProbMap, weights: &[f64]) -> Result<Grid> {
    if !student_pred.same_shape(pseudo) || weights.len() != pseudo.classes() {
        return Err(Error::Shape("loss map inputs disagree".into()));
    }
    let mut dz = vec![0.0; weights.len()];
    let data = student_pred
        .pixel_iter()
        .zip(pseudo.pixel_iter())
        .map(|(p, t)| weighted_ce_pixel(p, t, weights, &mut dz))
        .collect();
    Grid::new(pseudo.height(), pseudo.width(), 1, data)
}
