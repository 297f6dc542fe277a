//! The online adaptation loop and its baselines.
//!
//! Each frame is first evaluated with the current student (predict, then
//! adapt); ground truth is used for nothing else. Then, depending on the
//! method, a pseudo label is built, the student takes one Adam step and the
//! teacher follows by EMA. State carries across domains and rounds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{mean_prediction, view_predictions, ViewSet};
use crate::error::{Error, Result};
use crate::grids::{argmax_conf, Grid, ProbMap};
use crate::icat::{fixed_from_predictions, icat_from_predictions, IcatConfig, Predictions, ThresholdReport};
use crate::icwl::{class_confidence, loss_weights, update_difficulty, weighted_loss_map, IcwlConfig};
use crate::metrics::ConfusionMatrix;
use crate::model::{backward_custom, backward_weighted_ce, extract_features, forward, AdaptState, HeadParams};
use crate::scenes::{DomainKind, DomainStream, Frame};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    /// No adaptation.
    Source,
    /// Entropy minimization on the student alone.
    Entropy,
    /// Mean teacher with one global confidence threshold.
    FixedThreshold,
    /// Mean teacher with instance-class thresholds and class-weighted loss.
    Cotica,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Source => "source",
            Self::Entropy => "entropy",
            Self::FixedThreshold => "fixed-threshold",
            Self::Cotica => "cotica",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Source, Self::Entropy, Self::FixedThreshold, Self::Cotica]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    /// Label used in outputs, e.g. `cotica` or `icat-only`.
    pub name: String,
    pub kind: MethodKind,
    pub icat: IcatConfig,
    pub icwl: IcwlConfig,
    pub lr: f64,
    pub teacher_momentum: f64,
    /// Threshold of the fixed-threshold baseline.
    pub fixed_tau: f64,
    pub views: ViewSet,
}

impl MethodSpec {
    pub fn new(kind: MethodKind) -> Self {
        Self {
            name: kind.name().to_string(),
            kind,
            icat: IcatConfig::default(),
            icwl: IcwlConfig::default(),
            lr: 1e-3,
            teacher_momentum: 0.999,
            fixed_tau: IcatConfig::default().tau0,
            views: ViewSet::default(),
        }
    }

    /// Resolves a method name, including the two ablations:
    /// `icat-only` (unweighted loss) and `icwl-only` (`beta = 1`).
    pub fn named(name: &str, base: &MethodSpec) -> Result<Self> {
        let mut m = base.clone();
        m.name = name.to_string();
        match name {
            "icat-only" => {
                m.kind = MethodKind::Cotica;
                m.icwl.lambda = 0.0;
            }
            "icwl-only" => {
                m.kind = MethodKind::Cotica;
                m.icat.beta = 1.0;
            }
            other => m.kind = other.parse()?,
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.icat.validate()?;
        self.icwl.validate()?;
        self.views.validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidParameter(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.teacher_momentum) {
            return Err(Error::InvalidParameter(format!(
                "teacher momentum {} outside [0, 1]",
                self.teacher_momentum
            )));
        }
        if !(self.fixed_tau >= 0.0) {
            return Err(Error::InvalidParameter(format!("fixed threshold {} must be >= 0", self.fixed_tau)));
        }
        Ok(())
    }
}

/// Evaluation and adaptation statistics for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub round: usize,
    pub domain_index: usize,
    pub domain: DomainKind,
    /// Per-class true positives of the student's prediction.
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    pub correct: u64,
    pub pixels: u64,
    pub loss: f64,
    pub thresholds: Option<ThresholdReport>,
    pub delta: Vec<f64>,
    pub weights: Vec<f64>,
    pub wall_ms: f64,
    pub loss_map: Option<Grid>,
}

impl FrameRecord {
    pub fn classes(&self) -> usize {
        self.intersection.len()
    }

    pub fn iou(&self) -> Vec<Option<f64>> {
        crate::metrics::pooled_iou(&self.intersection, &self.union)
    }

    pub fn miou(&self) -> Option<f64> {
        crate::metrics::mean_present(&self.iou())
    }

    pub fn pixel_accuracy(&self) -> f64 {
        self.correct as f64 / self.pixels as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub method: String,
    /// Sweep point label, empty outside sweeps.
    pub variant: String,
    pub seed: u64,
    pub frames: Vec<FrameRecord>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AdaptOptions {
    /// Keep the per-pixel weighted loss map of every n-th frame; 0 keeps none.
    pub loss_map_every: usize,
}

/// Mean per-pixel Shannon entropy term and its logit derivative.
#[inline]
pub fn entropy_pixel(probs: &[f64], dz: &mut [f64]) -> f64 {
    let h: f64 = -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>();
    for (d, &p) in dz.iter_mut().zip(probs) {
        *d = if p > 0.0 { -p * (p.ln() + h) } else { 0.0 };
    }
    h
}

/// Mean prediction entropy of the head on a feature map, with gradient.
pub fn entropy_loss(params: &HeadParams, feat: &crate::model::FeatureMap) -> Result<(HeadParams, f64)> {
    backward_custom(params, feat, |_, probs, dz| entropy_pixel(probs, dz))
}

fn evaluate_frame(pred: &ProbMap, frame: &Frame, classes: usize) -> Result<(Vec<u64>, Vec<u64>, u64)> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(&argmax_conf(pred).label, &frame.labels)?;
    let inter = (0..classes).map(|c| cm.intersection(c)).collect();
    let union = (0..classes).map(|c| cm.union(c)).collect();
    let correct = (0..classes).map(|c| cm.get(c, c)).sum();
    Ok((inter, union, correct))
}

struct Clock(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Clock {
    fn start() -> Self {
        Clock(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    fn elapsed_ms(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.0.elapsed().as_secs_f64() * 1e3
        }
        #[cfg(target_arch = "wasm32")]
        {
            0.0
        }
    }
}

/// Adapts one step on a single frame and returns its record.
pub fn adapt_frame(
    state: &mut AdaptState,
    frame: &Frame,
    method: &MethodSpec,
    opts: &AdaptOptions,
) -> Result<FrameRecord> {
    let clock = Clock::start();
    let classes = state.student.classes();
    let feat = extract_features(&frame.image);
    let student_pred = forward(&state.student, &feat)?;
    let (intersection, union, correct) = evaluate_frame(&student_pred, frame, classes)?;
    let mut record = FrameRecord {
        index: frame.index,
        round: frame.round,
        domain_index: frame.domain_index,
        domain: frame.domain,
        intersection,
        union,
        correct,
        pixels: (frame.labels.height() * frame.labels.width()) as u64,
        loss: 0.0,
        thresholds: None,
        delta: state.difficulty.delta.clone(),
        weights: vec![1.0; classes],
        wall_ms: 0.0,
        loss_map: None,
    };

    let diverged = |detail: String| Error::Diverged {
        frame: frame.index,
        round: frame.round,
        domain: frame.domain.to_string(),
        detail,
    };

    match method.kind {
        MethodKind::Source => {}
        MethodKind::Entropy => {
            let (grads, loss) = entropy_loss(&state.student, &feat)?;
            if !loss.is_finite() {
                return Err(diverged(format!("entropy loss {loss}")));
            }
            state.optimizer_step(&grads).map_err(|e| diverged(e.to_string()))?;
            record.loss = loss;
        }
        MethodKind::FixedThreshold | MethodKind::Cotica => {
            let views = view_predictions(&state.teacher, &frame.image, &method.views)?;
            let aug_mean = mean_prediction(&views)?;
            let teacher_pred = match method.views.identity_index() {
                Some(i) => views[i].clone(),
                None => forward(&state.teacher, &feat)?,
            };
            let source_pred = forward(state.source(), &feat)?;
            let preds = Predictions {
                teacher: &teacher_pred,
                student: &student_pred,
                source: &source_pred,
            };

            let (pseudo, report, _) = if method.kind == MethodKind::Cotica {
                icat_from_predictions(&preds, &aug_mean, &method.icat)?
            } else {
                fixed_from_predictions(&preds, &aug_mean, method.fixed_tau, method.icat.mask_source)?
            };

            let weights = if method.kind == MethodKind::Cotica {
                let observed = if method.icwl.enable_aug {
                    class_confidence(&views, classes, method.icwl.class_mean_mode)?
                } else {
                    class_confidence(std::slice::from_ref(&teacher_pred), classes, method.icwl.class_mean_mode)?
                };
                update_difficulty(&mut state.difficulty, &observed, &method.icwl)?;
                loss_weights(&state.difficulty, method.icwl.lambda)
            } else {
                vec![1.0; classes]
            };

            let (grads, loss) = backward_weighted_ce(&state.student, &feat, &pseudo, &weights)?;
            if !loss.is_finite() {
                return Err(diverged(format!("consistency loss {loss}")));
            }
            if opts.loss_map_every > 0 && frame.index % opts.loss_map_every == 0 {
                record.loss_map = Some(weighted_loss_map(&student_pred, &pseudo, &weights)?);
            }
            state.optimizer_step(&grads).map_err(|e| diverged(e.to_string()))?;
            state.ema_update_teacher(method.teacher_momentum)?;
            record.loss = loss;
            record.thresholds = Some(report);
            record.delta = state.difficulty.delta.clone();
            record.weights = weights;
        }
    }
    record.wall_ms = clock.elapsed_ms();
    Ok(record)
}

/// Runs a method over the whole stream, one update per frame.
pub fn adapt_stream(
    stream: &DomainStream,
    source: &HeadParams,
    method: &MethodSpec,
    seed: u64,
    opts: &AdaptOptions,
) -> Result<(RunRecord, AdaptState)> {
    method.validate()?;
    if stream.is_empty() {
        return Err(Error::InvalidParameter("stream is empty".into()));
    }
    let mut state = AdaptState::new(source.clone(), method.lr);
    let frames = stream
        .iter()
        .map(|f| adapt_frame(&mut state, f, method, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        RunRecord {
            method: method.name.clone(),
            variant: String::new(),
            seed,
            frames,
        },
        state,
    ))
}

/// Pooled mIoU of one (round, domain block) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub round: usize,
    pub domain_index: usize,
    pub domain: DomainKind,
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
}

/// Per-cell pooled metrics in stream order.
pub fn summarize(frames: &[FrameRecord]) -> Vec<CellSummary> {
    let mut cells: Vec<(usize, usize, DomainKind, Vec<u64>, Vec<u64>)> = Vec::new();
    for f in frames {
        match cells.last_mut() {
            Some(c) if c.0 == f.round && c.1 == f.domain_index => {
                for k in 0..f.classes() {
                    c.3[k] += f.intersection[k];
                    c.4[k] += f.union[k];
                }
            }
            _ => cells.push((f.round, f.domain_index, f.domain, f.intersection.clone(), f.union.clone())),
        }
    }
    cells
        .into_iter()
        .map(|(round, domain_index, domain, inter, union)| {
            let iou = crate::metrics::pooled_iou(&inter, &union);
            let miou = crate::metrics::mean_present(&iou).unwrap_or(0.0);
            CellSummary {
                round,
                domain_index,
                domain,
                iou,
                miou,
            }
        })
        .collect()
}

/// Mean over cells of the pooled cell mIoU.
pub fn mean_miou(frames: &[FrameRecord]) -> f64 {
    let cells = summarize(frames);
    cells.iter().map(|c| c.miou).sum::<f64>() / cells.len() as f64
}

/// Mean over the cells of one round.
pub fn round_miou(frames: &[FrameRecord], round: usize) -> Option<f64> {
    let cells: Vec<f64> = summarize(frames)
        .into_iter()
        .filter(|c| c.round == round)
        .map(|c| c.miou)
        .collect();
    (!cells.is_empty()).then(|| cells.iter().sum::<f64>() / cells.len() as f64)
}

/// Threshold reports of every adapted frame.
pub fn threshold_reports(run: &RunRecord) -> Vec<ThresholdReport> {
    run.frames.iter().filter_map(|f| f.thresholds.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FeatureMap, FEATURES};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn method_names_resolve() {
        let base = MethodSpec::new(MethodKind::Cotica);
        for n in ["source", "entropy", "fixed-threshold", "cotica"] {
            assert_eq!(MethodSpec::named(n, &base).unwrap().kind.name(), n);
        }
        let icat = MethodSpec::named("icat-only", &base).unwrap();
        assert_eq!((icat.kind, icat.icwl.lambda), (MethodKind::Cotica, 0.0));
        let icwl = MethodSpec::named("icwl-only", &base).unwrap();
        assert_eq!((icwl.kind, icwl.icat.beta), (MethodKind::Cotica, 1.0));
        assert!(matches!(MethodSpec::named("tent", &base), Err(Error::Config(_))));
    }

    #[test]
    fn entropy_examples() {
        let mut dz = vec![0.0; 6];
        let h = entropy_pixel(&[1.0 / 6.0; 6], &mut dz);
        assert!((h - 6f64.ln()).abs() < 1e-12);
        assert!((h - 1.7918).abs() < 1e-4);
        assert!(dz.iter().all(|d| d.abs() < 1e-15));

        let mut confident = vec![1e-12; 6];
        confident[2] = 1.0 - 5e-12;
        let h = entropy_pixel(&confident, &mut dz);
        assert!(h < 1e-9);
        assert!(dz.iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let data = (0..3 * 2 * FEATURES).map(|_| rng.gen_range(0.0..1.0)).collect();
            let feat = FeatureMap::from_grid(Grid::new(3, 2, FEATURES, data).unwrap()).unwrap();
            let params = HeadParams::init(FEATURES, 5, 4, &mut rng);
            let (g, _) = entropy_loss(&params, &feat).unwrap();
            for i in (0..params.values().len()).step_by(7) {
                let h = 1e-6;
                let mut p = params.clone();
                p.values_mut()[i] += h;
                let up = entropy_loss(&p, &feat).unwrap().1;
                p.values_mut()[i] -= 2.0 * h;
                let down = entropy_loss(&p, &feat).unwrap().1;
                let fd = (up - down) / (2.0 * h);
                let a = g.values()[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel <= 1e-4, "coord {i}: {a} vs {fd}");
            }
        }
    }
}
