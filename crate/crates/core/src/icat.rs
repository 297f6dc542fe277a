//! Instance-class adaptive thresholding.
//!
//! For every image, the confidences of pixels predicted as class `c` are
//! sorted in descending order and the value at rank `floor(alpha * n)`
//! becomes that class's instance threshold `phi`. It is blended with the
//! global initial threshold, `tau = beta * tau0 + (1 - beta) * phi`, and
//! pixels whose confidence reaches their class threshold keep the direct
//! teacher prediction while the rest take the view-averaged prediction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{mean_prediction, view_predictions, ViewSet};
use crate::error::{Error, Result};
use crate::grids::{argmax_conf, ConfLabelPair, Grid, Image, ProbMap};
use crate::model::{extract_features, forward, HeadParams};

/// Which network a confidence map is read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Teacher,
    Student,
    Source,
}

impl FromStr for ModelRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Self::Teacher),
            "student" => Ok(Self::Student),
            "source" => Ok(Self::Source),
            _ => Err(Error::InvalidParameter(format!("unknown model role `{s}`"))),
        }
    }
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Teacher => "teacher",
            Self::Student => "student",
            Self::Source => "source",
        })
    }
}

/// Rank formula for the percentile lookup.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IndexRule {
    /// `floor(alpha * n)`
    #[serde(rename = "eq4")]
    Alpha,
    /// `floor(alpha * tau0 * n)`
    #[serde(rename = "alg1")]
    AlphaTau0,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcatConfig {
    pub tau0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub distribution_source: ModelRole,
    pub mask_source: ModelRole,
    pub index_rule: IndexRule,
}

impl Default for IcatConfig {
    fn default() -> Self {
        Self {
            tau0: 0.99,
            alpha: 0.2,
            beta: 0.9,
            distribution_source: ModelRole::Teacher,
            mask_source: ModelRole::Source,
            index_rule: IndexRule::Alpha,
        }
    }
}

impl IcatConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau0", self.tau0), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Confidences of the pixels predicted as one class, sorted descending.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassConfDist {
    pub class: usize,
    pub values: Vec<f64>,
}

impl ClassConfDist {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn class_conf_dists(pred: &ConfLabelPair, classes: usize) -> Vec<ClassConfDist> {
    let mut dists: Vec<ClassConfDist> = (0..classes)
        .map(|class| ClassConfDist {
            class,
            values: Vec::new(),
        })
        .collect();
    for (&conf, &l) in pred.conf.iter().zip(pred.label.data()) {
        dists[l as usize].values.push(conf);
    }
    for d in &mut dists {
        d.values.sort_by(|a, b| b.total_cmp(a));
    }
    dists
}

/// Rank used for the percentile lookup in a distribution of `n` values.
pub fn percentile_index(n: usize, cfg: &IcatConfig) -> usize {
    let frac = match cfg.index_rule {
        IndexRule::Alpha => cfg.alpha,
        IndexRule::AlphaTau0 => cfg.alpha * cfg.tau0,
    };
    ((frac * n as f64).floor() as usize).min(n.saturating_sub(1))
}

/// Instance threshold `phi` of one class; `tau0` for an absent class.
pub fn percentile_threshold(dist: &ClassConfDist, cfg: &IcatConfig) -> f64 {
    if dist.is_empty() {
        return cfg.tau0;
    }
    dist.values[percentile_index(dist.len(), cfg)]
}

/// Convex blend of the initial and instance thresholds.
pub fn blend_threshold(phi: f64, cfg: &IcatConfig) -> f64 {
    let tau = cfg.beta * cfg.tau0 + (1.0 - cfg.beta) * phi;
    tau.clamp(cfg.tau0.min(phi), cfg.tau0.max(phi))
}

/// Per-class thresholds and mask statistics for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdReport {
    pub tau: Vec<f64>,
    pub phi: Vec<f64>,
    /// Size of each class confidence distribution.
    pub counts: Vec<usize>,
    /// Pixels whose mask-source label is the class.
    pub mask_counts: Vec<usize>,
    /// Of those, pixels whose confidence reached the class threshold.
    pub accepted: Vec<usize>,
}

impl ThresholdReport {
    pub fn classes(&self) -> usize {
        self.tau.len()
    }

    /// Fraction of the class's pixels that kept the direct prediction.
    pub fn acceptance(&self, class: usize) -> Option<f64> {
        (self.mask_counts[class] > 0)
            .then(|| self.accepted[class] as f64 / self.mask_counts[class] as f64)
    }

    /// Fraction of the class's pixels that took the view-averaged label.
    pub fn aug_usage(&self, class: usize) -> Option<f64> {
        self.acceptance(class).map(|a| 1.0 - a)
    }
}

/// Thresholds `(tau, phi, counts)` from a confidence map.
pub fn compute_thresholds(dist_pred: &ConfLabelPair, classes: usize, cfg: &IcatConfig) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let dists = class_conf_dists(dist_pred, classes);
    let phi: Vec<f64> = dists.iter().map(|d| percentile_threshold(d, cfg)).collect();
    let tau = phi.iter().map(|&p| blend_threshold(p, cfg)).collect();
    let counts = dists.iter().map(ClassConfDist::len).collect();
    (tau, phi, counts)
}

/// Result of masking the pseudo label.
#[derive(Clone, Debug, PartialEq)]
pub struct Refined {
    pub pseudo: ProbMap,
    /// `true` where the direct teacher prediction was kept.
    pub mask: Vec<bool>,
    pub mask_counts: Vec<usize>,
    pub accepted: Vec<usize>,
}

/// Per pixel, keeps the teacher prediction when the mask confidence reaches
/// the threshold of the mask-source class, else takes the averaged map.
pub fn refine_pseudo_label(
    teacher_pred: &ProbMap,
    aug_mean: &ProbMap,
    mask_conf: &ConfLabelPair,
    tau: &[f64],
) -> Result<Refined> {
    let classes = teacher_pred.classes();
    if !teacher_pred.same_shape(aug_mean)
        || mask_conf.height() != teacher_pred.height()
        || mask_conf.width() != teacher_pred.width()
        || tau.len() != classes
    {
        return Err(Error::Shape("pseudo-label inputs disagree in shape".into()));
    }
    let n = teacher_pred.grid().pixels();
    let mut out = Grid::zeros(teacher_pred.height(), teacher_pred.width(), classes);
    let mut mask = Vec::with_capacity(n);
    let mut mask_counts = vec![0; classes];
    let mut accepted = vec![0; classes];
    let direct = teacher_pred.grid().data();
    let averaged = aug_mean.grid().data();
    for (i, dst) in out.data_mut().chunks_exact_mut(classes).enumerate() {
        let c = mask_conf.label.data()[i] as usize;
        let keep = mask_conf.conf[i] >= tau[c];
        let src = if keep { direct } else { averaged };
        dst.copy_from_slice(&src[i * classes..(i + 1) * classes]);
        mask_counts[c] += 1;
        accepted[c] += keep as usize;
        mask.push(keep);
    }
    Ok(Refined {
        pseudo: ProbMap::from_grid_unchecked(out),
        mask,
        mask_counts,
        accepted,
    })
}

/// Predictions of the three networks on the original frame.
#[derive(Clone, Debug)]
pub struct Predictions<'a> {
    pub teacher: &'a ProbMap,
    pub student: &'a ProbMap,
    pub source: &'a ProbMap,
}

impl Predictions<'_> {
    pub fn get(&self, role: ModelRole) -> &ProbMap {
        match role {
            ModelRole::Teacher => self.teacher,
            ModelRole::Student => self.student,
            ModelRole::Source => self.source,
        }
    }
}

/// Pseudo label and statistics for one frame given precomputed predictions
/// and per-class thresholds.
pub fn pseudo_label_with_thresholds(
    preds: &Predictions<'_>,
    aug_mean: &ProbMap,
    mask_source: ModelRole,
    tau: Vec<f64>,
    phi: Vec<f64>,
    counts: Vec<usize>,
) -> Result<(ProbMap, ThresholdReport, Vec<bool>)> {
    let mask_conf = argmax_conf(preds.get(mask_source));
    let refined = refine_pseudo_label(preds.teacher, aug_mean, &mask_conf, &tau)?;
    let report = ThresholdReport {
        tau,
        phi,
        counts,
        mask_counts: refined.mask_counts,
        accepted: refined.accepted,
    };
    Ok((refined.pseudo, report, refined.mask))
}

/// Adaptive-threshold pseudo label from precomputed predictions.
pub fn icat_from_predictions(
    preds: &Predictions<'_>,
    aug_mean: &ProbMap,
    cfg: &IcatConfig,
) -> Result<(ProbMap, ThresholdReport, Vec<bool>)> {
    cfg.validate()?;
    let classes = preds.teacher.classes();
    let (tau, phi, counts) = compute_thresholds(&argmax_conf(preds.get(cfg.distribution_source)), classes, cfg);
    pseudo_label_with_thresholds(preds, aug_mean, cfg.mask_source, tau, phi, counts)
}

/// Fixed-threshold pseudo label: every class uses `tau`.
pub fn fixed_from_predictions(
    preds: &Predictions<'_>,
    aug_mean: &ProbMap,
    tau: f64,
    mask_source: ModelRole,
) -> Result<(ProbMap, ThresholdReport, Vec<bool>)> {
    let classes = preds.teacher.classes();
    let counts = class_conf_dists(&argmax_conf(preds.teacher), classes)
        .iter()
        .map(ClassConfDist::len)
        .collect();
    pseudo_label_with_thresholds(preds, aug_mean, mask_source, vec![tau; classes], vec![tau; classes], counts)
}

/// Output of the full thresholding pipeline on one image.
#[derive(Clone, Debug)]
pub struct IcatOutput {
    pub pseudo: ProbMap,
    pub report: ThresholdReport,
    pub mask: Vec<bool>,
}

/// Runs all forwards, the view average and the thresholding for one image.
pub fn icat_step(
    student: &HeadParams,
    teacher: &HeadParams,
    source: &HeadParams,
    img: &Image,
    views: &ViewSet,
    cfg: &IcatConfig,
) -> Result<IcatOutput> {
    let feat = extract_features(img);
    let t = forward(teacher, &feat)?;
    let s = forward(student, &feat)?;
    let src = forward(source, &feat)?;
    let aug = mean_prediction(&view_predictions(teacher, img, views)?)?;
    let preds = Predictions {
        teacher: &t,
        student: &s,
        source: &src,
    };
    let (pseudo, report, mask) = icat_from_predictions(&preds, &aug, cfg)?;
    Ok(IcatOutput { pseudo, report, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::LabelMap;
    use crate::model::FEATURES;
    use crate::scenes::{generate_scene, SceneSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(h: usize, w: usize, conf: Vec<f64>, labels: Vec<u8>) -> ConfLabelPair {
        ConfLabelPair {
            conf,
            label: LabelMap::new(h, w, labels).unwrap(),
        }
    }

    fn dist(values: &[f64]) -> ClassConfDist {
        ClassConfDist {
            class: 0,
            values: values.to_vec(),
        }
    }

    #[test]
    fn class_distributions() {
        let p = pair(1, 2, vec![0.8, 0.9], vec![1, 1]);
        let d = class_conf_dists(&p, 3);
        assert!(d[0].is_empty() && d[2].is_empty());
        assert_eq!(d[1].values, vec![0.9, 0.8]);

        let p = pair(2, 2, vec![0.5, 0.6, 0.7, 0.8], vec![0; 4]);
        let d = class_conf_dists(&p, 2);
        assert_eq!(d[0].len(), 4);
        assert!(d[1].is_empty());
    }

    #[test]
    fn percentile_examples() {
        let cfg = IcatConfig {
            alpha: 0.4,
            ..Default::default()
        };
        let d = dist(&[0.99, 0.95, 0.90, 0.80, 0.70]);
        assert_eq!(percentile_index(5, &cfg), 2);
        assert_eq!(percentile_threshold(&d, &cfg), 0.90);

        for alpha in [0.0, 0.2, 0.5, 0.99, 1.0] {
            let cfg = IcatConfig { alpha, ..Default::default() };
            assert_eq!(percentile_threshold(&dist(&[0.9; 7]), &cfg), 0.9);
        }
        assert_eq!(percentile_threshold(&dist(&[]), &IcatConfig::default()), 0.99);

        // alpha = 1 would index one past the end.
        let cfg = IcatConfig { alpha: 1.0, ..Default::default() };
        assert_eq!(percentile_threshold(&d, &cfg), 0.70);
    }

    #[test]
    fn index_rules_differ_by_tau0_factor() {
        let plain = IcatConfig { alpha: 0.2, tau0: 0.99, ..Default::default() };
        let scaled = IcatConfig { index_rule: IndexRule::AlphaTau0, ..plain.clone() };
        assert_eq!(percentile_index(100, &plain), 20);
        assert_eq!(percentile_index(100, &scaled), 19);
        for n in 1..500 {
            let a = percentile_index(n, &plain);
            let b = percentile_index(n, &scaled);
            assert!(a >= b && a - b <= 1);
        }
    }

    #[test]
    fn blend_examples() {
        let fixed = IcatConfig { beta: 1.0, ..Default::default() };
        assert_eq!(blend_threshold(0.3, &fixed), 0.99);
        let free = IcatConfig { beta: 0.0, ..Default::default() };
        assert_eq!(blend_threshold(0.3, &free), 0.3);
        let cfg = IcatConfig::default();
        assert!((blend_threshold(0.90, &cfg) - 0.981).abs() < 1e-12);
    }

    #[test]
    fn refine_extremes_and_brute_force() {
        let teacher = ProbMap::from_grid(Grid::new(2, 2, 2, vec![0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.3, 0.7]).unwrap()).unwrap();
        let aug = ProbMap::uniform(2, 2, 2);
        let mask_conf = pair(2, 2, vec![0.95, 0.7, 0.85, 0.6], vec![0, 1, 0, 1]);

        let r = refine_pseudo_label(&teacher, &aug, &mask_conf, &[0.0, 0.0]).unwrap();
        assert_eq!(r.pseudo, teacher);
        assert!(r.mask.iter().all(|&m| m));

        let r = refine_pseudo_label(&teacher, &aug, &mask_conf, &[1.1, 1.1]).unwrap();
        assert_eq!(r.pseudo, aug);
        assert!(r.mask.iter().all(|&m| !m));

        let tau = [0.9, 0.65];
        let r = refine_pseudo_label(&teacher, &aug, &mask_conf, &tau).unwrap();
        for i in 0..4 {
            let c = mask_conf.label.data()[i] as usize;
            let keep = mask_conf.conf[i] >= tau[c];
            assert_eq!(r.mask[i], keep);
            let src = if keep { &teacher } else { &aug };
            assert_eq!(r.pseudo.pixel(i / 2, i % 2), src.pixel(i / 2, i % 2));
        }
        assert_eq!(r.mask, vec![true, true, false, false]);
        assert_eq!(r.mask_counts, vec![2, 2]);
        assert_eq!(r.accepted, vec![1, 1]);

        assert!(refine_pseudo_label(&teacher, &ProbMap::uniform(1, 2, 2), &mask_conf, &tau).is_err());
        assert!(refine_pseudo_label(&teacher, &aug, &mask_conf, &[0.5]).is_err());
    }

    fn setup(seed: u64) -> (HeadParams, HeadParams, HeadParams, Image) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = HeadParams::init(FEATURES, 8, 6, &mut rng);
        let b = HeadParams::init(FEATURES, 8, 6, &mut rng);
        let c = HeadParams::init(FEATURES, 8, 6, &mut rng);
        let img = generate_scene(&SceneSpec { seed, height: 12, width: 16, ..Default::default() }).unwrap().0;
        (a, b, c, img)
    }

    #[test]
    fn beta_one_matches_fixed_threshold() {
        let (s, t, src, img) = setup(11);
        let cfg = IcatConfig { beta: 1.0, ..Default::default() };
        let views = ViewSet::default();
        let out = icat_step(&s, &t, &src, &img, &views, &cfg).unwrap();

        let feat = extract_features(&img);
        let (tp, sp, srcp) = (forward(&t, &feat).unwrap(), forward(&s, &feat).unwrap(), forward(&src, &feat).unwrap());
        let aug = mean_prediction(&view_predictions(&t, &img, &views).unwrap()).unwrap();
        let preds = Predictions { teacher: &tp, student: &sp, source: &srcp };
        let (pseudo, _, mask) = fixed_from_predictions(&preds, &aug, 0.99, ModelRole::Source).unwrap();
        assert_eq!(out.mask, mask);
        assert_eq!(out.pseudo, pseudo);
    }

    #[test]
    fn identity_views_and_open_thresholds_give_teacher() {
        let (s, t, src, img) = setup(12);
        let cfg = IcatConfig { tau0: 0.0, beta: 1.0, ..Default::default() };
        let out = icat_step(&s, &t, &src, &img, &ViewSet::identity(), &cfg).unwrap();
        assert_eq!(out.pseudo, forward(&t, &extract_features(&img)).unwrap());
        assert!(out.mask.iter().all(|&m| m));
    }

    #[test]
    fn single_class_acceptance_by_enumeration() {
        // Teacher, student and source all predict class 0 everywhere with
        // varied confidence.
        let mut p = HeadParams::zeros(FEATURES, 4, 3);
        p.b2_mut()[0] = 6.0;
        p.w1_mut()[0] = 1.0; // raw red -> hidden 0
        p.w2_mut()[0] = 4.0; // hidden 0 -> class 0
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = (0..8 * 8 * 3).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let img = Image::new(8, 8, data).unwrap();
        let cfg = IcatConfig::default();
        let out = icat_step(&p, &p, &p, &img, &ViewSet::default(), &cfg).unwrap();

        let pred = forward(&p, &extract_features(&img)).unwrap();
        let confs: Vec<f64> = pred.pixel_iter().map(|px| px[0]).collect();
        assert!(pred.pixel_iter().all(|px| px[0] > px[1]));
        let mut sorted = confs.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let phi = sorted[(0.2 * 64.0) as usize];
        let tau = 0.9 * 0.99 + 0.1 * phi;
        let expect = confs.iter().filter(|&&c| c >= tau).count() as f64 / 64.0;
        assert_eq!(out.report.phi[0], phi);
        assert!((out.report.tau[0] - tau).abs() < 1e-15);
        assert_eq!(out.report.acceptance(0), Some(expect));
        assert_eq!(out.report.acceptance(1), None);
        assert_eq!(out.report.tau[1], 0.99);
    }

    fn arb_pair() -> impl Strategy<Value = (ConfLabelPair, usize)> {
        (1usize..7, 1usize..7, 2usize..6).prop_flat_map(|(h, w, c)| {
            (
                prop::collection::vec(0.01f64..=1.0, h * w),
                prop::collection::vec(0u8..c as u8, h * w),
            )
                .prop_map(move |(conf, labels)| (pair(h, w, conf, labels), c))
        })
    }

    proptest! {
        #[test]
        fn partition_and_blend_bounds((p, c) in arb_pair(), alpha in 0.0f64..=1.0, beta in 0.0f64..=1.0, tau0 in 0.0f64..=1.0) {
            let dists = class_conf_dists(&p, c);
            let mut all: Vec<f64> = dists.iter().flat_map(|d| d.values.iter().copied()).collect();
            let mut orig = p.conf.clone();
            all.sort_by(f64::total_cmp);
            orig.sort_by(f64::total_cmp);
            prop_assert_eq!(all, orig);
            for d in &dists {
                prop_assert!(d.values.windows(2).all(|w| w[0] >= w[1]));
            }
            let cfg = IcatConfig { alpha, beta, tau0, ..Default::default() };
            let (tau, phi, counts) = compute_thresholds(&p, c, &cfg);
            prop_assert_eq!(counts.iter().sum::<usize>(), p.conf.len());
            for k in 0..c {
                prop_assert!(tau[k] >= tau0.min(phi[k]) && tau[k] <= tau0.max(phi[k]));
                if counts[k] == 0 {
                    prop_assert_eq!(tau[k], tau0);
                }
            }
        }

        #[test]
        fn dominating_distribution_has_higher_threshold(
            base in prop::collection::vec(0.0f64..0.5, 1..40),
            bumps in prop::collection::vec(0.0f64..0.5, 40),
            alpha in 0.0f64..=1.0,
        ) {
            let mut b = base.clone();
            b.sort_by(|x, y| y.total_cmp(x));
            let mut a: Vec<f64> = b.iter().zip(&bumps).map(|(v, d)| v + d).collect();
            a.sort_by(|x, y| y.total_cmp(x));
            let cfg = IcatConfig { alpha, ..Default::default() };
            prop_assert!(a.iter().zip(&b).all(|(x, y)| x >= y));
            prop_assert!(percentile_threshold(&dist(&a), &cfg) >= percentile_threshold(&dist(&b), &cfg));
        }

        #[test]
        fn acceptance_is_nonincreasing_in_threshold((p, c) in arb_pair(), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let h = p.height();
            let w = p.width();
            let teacher = ProbMap::uniform(h, w, c);
            let aug = ProbMap::uniform(h, w, c);
            let a = refine_pseudo_label(&teacher, &aug, &p, &vec![lo; c]).unwrap();
            let b = refine_pseudo_label(&teacher, &aug, &p, &vec![hi; c]).unwrap();
            for k in 0..c {
                prop_assert!(b.accepted[k] <= a.accepted[k]);
            }
            prop_assert!(a.pseudo.max_sum_error() <= 1e-12);
        }
    }
}
