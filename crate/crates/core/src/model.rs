//! The toy segmenter: fixed per-pixel features, a trainable two-layer head
//! with hand-derived backprop, Adam, teacher EMA and source pretraining.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{View, DEFAULT_SCALES};
use crate::error::{Error, Result};
use crate::grids::{read_u32, resize_prob, softmax_in_place, Grid, Image, LabelMap, ProbMap};
use crate::icwl::DifficultyState;
use crate::metrics::ConfusionMatrix;

/// Number of per-pixel features produced by [`extract_features`].
pub const FEATURES: usize = 12;
pub const DEFAULT_HIDDEN: usize = 16;
/// Added inside the logarithm of every cross-entropy term.
pub const LOG_EPS: f64 = 1e-12;

pub const CPRM_MAGIC: [u8; 4] = *b"CPRM";
pub const CPRM_VERSION: u32 = 1;

const BLUR_RADIUS: usize = 2;

/// Fixed per-pixel descriptors of an image.
///
/// | index | feature                                   | range  |
/// |-------|-------------------------------------------|--------|
/// | 0..3  | raw r, g, b                               | [0, 1] |
/// | 3..6  | 5x5 box-blurred r, g, b                   | [0, 1] |
/// | 6     | horizontal luminance gradient magnitude   | [0, 1] |
/// | 7     | vertical luminance gradient magnitude     | [0, 1] |
/// | 8     | 5x5 luminance standard deviation, x2      | [0, 1] |
/// | 9     | row coordinate, 0 at top                  | [0, 1] |
/// | 10    | column coordinate, 0 at left              | [0, 1] |
/// | 11    | luminance                                 | [0, 1] |
///
/// Windows and difference stencils clamp at the border, so the recipe is
/// mirror-symmetric except for the column coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Grid);

impl FeatureMap {
    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn pixels(&self) -> usize {
        self.0.pixels()
    }

    pub fn from_grid(grid: Grid) -> Result<Self> {
        if grid.channels() != FEATURES {
            return Err(Error::Shape(format!(
                "feature grid needs {FEATURES} channels, got {}",
                grid.channels()
            )));
        }
        Ok(Self(grid))
    }
}

#[inline]
fn luminance(px: &[f64]) -> f64 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

pub fn extract_features(img: &Image) -> FeatureMap {
    let (h, w) = (img.height(), img.width());
    let g = img.grid();
    let lum: Vec<f64> = g.pixel_iter().map(luminance).collect();
    let mut out = Grid::zeros(h, w, FEATURES);
    let rows_den = if h > 1 { (h - 1) as f64 } else { 2.0 };
    let cols_den = if w > 1 { (w - 1) as f64 } else { 2.0 };
    let row_off = if h > 1 { 0.0 } else { 1.0 };
    let col_off = if w > 1 { 0.0 } else { 1.0 };

    for r in 0..h {
        let r0 = r.saturating_sub(BLUR_RADIUS);
        let r1 = (r + BLUR_RADIUS).min(h - 1);
        for c in 0..w {
            let c0 = c.saturating_sub(BLUR_RADIUS);
            let c1 = (c + BLUR_RADIUS).min(w - 1);
            let centre = lum[r * w + c];
            let mut blur = [0.0; 3];
            let (mut d1, mut d2) = (0.0, 0.0);
            for rr in r0..=r1 {
                for cc in c0..=c1 {
                    let px = g.pixel(rr, cc);
                    blur[0] += px[0];
                    blur[1] += px[1];
                    blur[2] += px[2];
                    let d = lum[rr * w + cc] - centre;
                    d1 += d;
                    d2 += d * d;
                }
            }
            let n = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
            let var = (d2 / n - (d1 / n) * (d1 / n)).max(0.0);
            let gx = (lum[r * w + (c + 1).min(w - 1)] - lum[r * w + c.saturating_sub(1)]).abs();
            let gy = (lum[(r + 1).min(h - 1) * w + c] - lum[r.saturating_sub(1) * w + c]).abs();

            let px = g.pixel(r, c);
            let f = out.pixel_mut(r, c);
            f[0] = px[0];
            f[1] = px[1];
            f[2] = px[2];
            f[3] = blur[0] / n;
            f[4] = blur[1] / n;
            f[5] = blur[2] / n;
            f[6] = gx.min(1.0);
            f[7] = gy.min(1.0);
            f[8] = (2.0 * var.sqrt()).min(1.0);
            f[9] = (r as f64 + row_off) / rows_den;
            f[10] = (c as f64 + col_off) / cols_den;
            f[11] = centre;
        }
    }
    FeatureMap(out)
}

/// Parameters of the two-layer head, stored flat as `w1 | b1 | w2 | b2`
/// with `w1` laid out `[feature][hidden]` and `w2` `[hidden][class]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    features: usize,
    hidden: usize,
    classes: usize,
    values: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(features: usize, hidden: usize, classes: usize) -> Self {
        let n = features * hidden + hidden + hidden * classes + classes;
        Self {
            features,
            hidden,
            classes,
            values: vec![0.0; n],
        }
    }

    /// He-style random initialization.
    pub fn init<R: Rng>(features: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(features, hidden, classes);
        let s1 = (2.0 / features as f64).sqrt();
        let s2 = (2.0 / hidden as f64).sqrt();
        for v in p.w1_mut() {
            *v = rng.gen_range(-1.0..1.0) * s1;
        }
        for v in p.w2_mut() {
            *v = rng.gen_range(-1.0..1.0) * s2;
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.features, self.hidden, self.classes)
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn offsets(&self) -> [usize; 4] {
        let a = self.features * self.hidden;
        let b = a + self.hidden;
        let c = b + self.hidden * self.classes;
        [a, b, c, c + self.classes]
    }

    pub fn w1(&self) -> &[f64] {
        &self.values[..self.offsets()[0]]
    }

    pub fn b1(&self) -> &[f64] {
        let o = self.offsets();
        &self.values[o[0]..o[1]]
    }

    pub fn w2(&self) -> &[f64] {
        let o = self.offsets();
        &self.values[o[1]..o[2]]
    }

    pub fn b2(&self) -> &[f64] {
        let o = self.offsets();
        &self.values[o[2]..o[3]]
    }

    pub fn w1_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.values[..o[0]]
    }

    pub fn b1_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.values[o[0]..o[1]]
    }

    pub fn w2_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.values[o[1]..o[2]]
    }

    pub fn b2_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.values[o[2]..o[3]]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_layout(&self, other: &HeadParams) -> bool {
        self.features == other.features && self.hidden == other.hidden && self.classes == other.classes
    }

    pub fn write_cprm<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&CPRM_MAGIC)?;
        for v in [CPRM_VERSION, self.features as u32, self.hidden as u32, self.classes as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_cprm<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != CPRM_MAGIC {
            return Err(Error::Format(format!("bad params magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != CPRM_VERSION {
            return Err(Error::Format(format!("unsupported params version {version}")));
        }
        let features = read_u32(&mut r)? as usize;
        let hidden = read_u32(&mut r)? as usize;
        let classes = read_u32(&mut r)? as usize;
        if features == 0 || hidden == 0 || classes < 2 || features * hidden > 1 << 24 {
            return Err(Error::Format(format!(
                "implausible params layout {features}x{hidden}x{classes}"
            )));
        }
        let mut p = Self::zeros(features, hidden, classes);
        let mut bytes = vec![0u8; p.values.len() * 8];
        r.read_exact(&mut bytes)?;
        for (v, b) in p.values.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().unwrap());
        }
        if !p.all_finite() {
            return Err(Error::NonFinite("stored parameters".into()));
        }
        Ok(p)
    }
}

fn check_layout(params: &HeadParams, feat: &FeatureMap) -> Result<()> {
    if params.features != feat.grid().channels() {
        return Err(Error::Shape(format!(
            "params expect {} features, map has {}",
            params.features,
            feat.grid().channels()
        )));
    }
    Ok(())
}

/// Hidden activations and class probabilities for one pixel.
#[inline]
fn pixel_forward(p: &HeadParams, x: &[f64], hidden: &mut [f64], probs: &mut [f64]) {
    let (w1, b1, w2, b2) = (p.w1(), p.b1(), p.w2(), p.b2());
    let hd = p.hidden;
    hidden.copy_from_slice(b1);
    for (f, &xf) in x.iter().enumerate() {
        if xf == 0.0 {
            continue;
        }
        let row = &w1[f * hd..(f + 1) * hd];
        for (a, &wv) in hidden.iter_mut().zip(row) {
            *a += xf * wv;
        }
    }
    probs.copy_from_slice(b2);
    let c = p.classes;
    for (j, a) in hidden.iter_mut().enumerate() {
        if *a <= 0.0 {
            *a = 0.0;
            continue;
        }
        let row = &w2[j * c..(j + 1) * c];
        for (z, &wv) in probs.iter_mut().zip(row) {
            *z += *a * wv;
        }
    }
    softmax_in_place(probs);
}

/// Class probabilities for every pixel of a feature map.
pub fn forward(params: &HeadParams, feat: &FeatureMap) -> Result<ProbMap> {
    check_layout(params, feat)?;
    let c = params.classes;
    let mut out = Grid::zeros(feat.height(), feat.width(), c);
    let mut hidden = vec![0.0; params.hidden];
    for (x, probs) in feat.grid().pixel_iter().zip(out.data_mut().chunks_exact_mut(c)) {
        pixel_forward(params, x, &mut hidden, probs);
    }
    if !out.all_finite() {
        return Err(Error::NonFinite("forward pass".into()));
    }
    Ok(ProbMap::from_grid_unchecked(out))
}

/// Gradient of a pixel-averaged loss through the head.
///
/// `pixel_loss(i, probs, dlogits)` receives the pixel index and predicted
/// probabilities, writes the derivative of that pixel's loss with respect
/// to its logits and returns the pixel loss. The result is the mean loss
/// and its parameter gradient.
pub fn backward_custom<F>(
    params: &HeadParams,
    feat: &FeatureMap,
    mut pixel_loss: F,
) -> Result<(HeadParams, f64)>
where
    F: FnMut(usize, &[f64], &mut [f64]) -> f64,
{
    check_layout(params, feat)?;
    let (hd, c) = (params.hidden, params.classes);
    let n = feat.pixels() as f64;
    let mut grad = params.zeros_like();
    let mut hidden = vec![0.0; hd];
    let mut probs = vec![0.0; c];
    let mut dz = vec![0.0; c];
    let mut da = vec![0.0; hd];
    let mut total = 0.0;
    let o = params.offsets();
    let w2 = params.w2();
    for (i, x) in feat.grid().pixel_iter().enumerate() {
        pixel_forward(params, x, &mut hidden, &mut probs);
        dz.iter_mut().for_each(|v| *v = 0.0);
        total += pixel_loss(i, &probs, &mut dz);
        if dz.iter().all(|&v| v == 0.0) {
            continue;
        }
        let g = grad.values.as_mut_slice();
        let (gw1, rest) = g.split_at_mut(o[0]);
        let (gb1, rest) = rest.split_at_mut(o[1] - o[0]);
        let (gw2, gb2) = rest.split_at_mut(o[2] - o[1]);
        for (b, &d) in gb2.iter_mut().zip(&dz) {
            *b += d;
        }
        for j in 0..hd {
            let row = &w2[j * c..(j + 1) * c];
            da[j] = if hidden[j] > 0.0 {
                let grow = &mut gw2[j * c..(j + 1) * c];
                let mut acc = 0.0;
                for k in 0..c {
                    grow[k] += hidden[j] * dz[k];
                    acc += row[k] * dz[k];
                }
                acc
            } else {
                0.0
            };
        }
        for (b, &d) in gb1.iter_mut().zip(&da) {
            *b += d;
        }
        for (f, &xf) in x.iter().enumerate() {
            if xf == 0.0 {
                continue;
            }
            let grow = &mut gw1[f * hd..(f + 1) * hd];
            for (gv, &d) in grow.iter_mut().zip(&da) {
                *gv += xf * d;
            }
        }
    }
    for v in grad.values.iter_mut() {
        *v /= n;
    }
    Ok((grad, total / n))
}

/// Per-pixel weighted soft cross-entropy and its logit derivative:
/// `-sum_c w_c t_c ln(p_c + eps)`.
#[inline]
pub fn weighted_ce_pixel(probs: &[f64], target: &[f64], weights: &[f64], dz: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    let mut s = 0.0;
    for k in 0..probs.len() {
        let wt = weights[k] * target[k];
        if wt != 0.0 {
            loss -= wt * (probs[k] + LOG_EPS).ln();
            s += wt * probs[k] / (probs[k] + LOG_EPS);
        }
    }
    for k in 0..probs.len() {
        let wt = weights[k] * target[k];
        dz[k] = probs[k] * s - wt * probs[k] / (probs[k] + LOG_EPS);
    }
    loss
}

/// Mean weighted cross-entropy against soft targets and its gradient.
pub fn backward_weighted_ce(
    params: &HeadParams,
    feat: &FeatureMap,
    target: &ProbMap,
    weights: &[f64],
) -> Result<(HeadParams, f64)> {
    if target.height() != feat.height()
        || target.width() != feat.width()
        || target.classes() != params.classes
        || weights.len() != params.classes
    {
        return Err(Error::Shape("target, weights and params disagree".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidParameter("loss weights must be finite and >= 0".into()));
    }
    let c = params.classes;
    let t = target.grid().data();
    backward_custom(params, feat, |i, probs, dz| {
        weighted_ce_pixel(probs, &t[i * c..(i + 1) * c], weights, dz)
    })
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if grads.len() != params.len() || params.len() != self.m.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient coordinate {i}")));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Everything one adaptation run mutates, plus the frozen source copy.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptState {
    pub student: HeadParams,
    pub teacher: HeadParams,
    source: HeadParams,
    pub difficulty: DifficultyState,
    pub optimizer: Adam,
    pub step: u64,
}

impl AdaptState {
    /// Student and teacher both start as copies of the source model.
    pub fn new(source: HeadParams, lr: f64) -> Self {
        let n = source.values.len();
        let classes = source.classes;
        Self {
            student: source.clone(),
            teacher: source.clone(),
            source,
            difficulty: DifficultyState::new(classes),
            optimizer: Adam::new(lr, n),
            step: 0,
        }
    }

    pub fn source(&self) -> &HeadParams {
        &self.source
    }

    pub fn optimizer_step(&mut self, grads: &HeadParams) -> Result<()> {
        self.optimizer.step(&mut self.student.values, &grads.values)?;
        self.step += 1;
        Ok(())
    }

    pub fn ema_update_teacher(&mut self, momentum: f64) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, momentum)
    }

    /// Binary snapshot: `CSTA`, version, step, class count, delta, then
    /// student, teacher and source `CPRM` blocks and the Adam moments.
    pub fn write_state<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"CSTA")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.difficulty.delta.len() as u32).to_le_bytes())?;
        for v in &self.difficulty.delta {
            w.write_all(&v.to_le_bytes())?;
        }
        self.student.write_cprm(&mut w)?;
        self.teacher.write_cprm(&mut w)?;
        self.source.write_cprm(&mut w)?;
        w.write_all(&self.optimizer.step.to_le_bytes())?;
        for v in self.optimizer.m.iter().chain(&self.optimizer.v) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// `teacher <- m * teacher + (1 - m) * student`, elementwise.
pub fn ema_update(teacher: &mut HeadParams, student: &HeadParams, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::InvalidParameter(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    if !teacher.same_layout(student) {
        return Err(Error::Shape("teacher and student layouts differ".into()));
    }
    for (t, s) in teacher.values.iter_mut().zip(&student.values) {
        *t = momentum * *t + (1.0 - momentum) * s;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceTrainConfig {
    pub train_frames: usize,
    pub heldout_frames: usize,
    pub epochs: usize,
    pub lr: f64,
    pub hidden: usize,
    pub seed: u64,
    pub target_miou: f64,
    /// Rescale each training frame by a random view scale every epoch.
    #[serde(default)]
    pub scale_augment: bool,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        Self {
            train_frames: 48,
            heldout_frames: 16,
            epochs: 40,
            lr: 0.01,
            hidden: DEFAULT_HIDDEN,
            seed: 7,
            target_miou: 0.85,
            scale_augment: false,
        }
    }
}

/// Pooled confusion matrix of a model's argmax over labelled frames.
pub fn evaluate(params: &HeadParams, frames: &[(Image, LabelMap)]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(params.classes);
    for (img, labels) in frames {
        let p = forward(params, &extract_features(img))?;
        cm.accumulate(&crate::grids::argmax_conf(&p).label, labels)?;
    }
    Ok(cm)
}

/// Fits the source head on clean frames with one full-frame Adam step per
/// frame per epoch, then checks held-out mIoU against the target.
pub fn pretrain_source(
    train: &[(Image, LabelMap)],
    heldout: &[(Image, LabelMap)],
    classes: usize,
    cfg: &SourceTrainConfig,
) -> Result<HeadParams> {
    if cfg.epochs == 0 {
        return Err(Error::InvalidParameter("source training needs at least one epoch".into()));
    }
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::InvalidParameter("source training needs train and held-out frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = HeadParams::init(FEATURES, cfg.hidden, classes, &mut rng);
    let mut adam = Adam::new(cfg.lr, params.values.len());
    let data: Vec<(FeatureMap, ProbMap)> = train
        .iter()
        .map(|(img, labels)| Ok((extract_features(img), ProbMap::one_hot(labels, classes)?)))
        .collect::<Result<_>>()?;
    let ones = vec![1.0; classes];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let scale = if cfg.scale_augment {
                DEFAULT_SCALES[rng.gen_range(0..DEFAULT_SCALES.len())]
            } else {
                1.0
            };
            let (grad, _) = if scale == 1.0 {
                backward_weighted_ce(&params, &data[i].0, &data[i].1, &ones)?
            } else {
                let (img, _) = &train[i];
                let (h, w) = View { scale, flip: false }.output_dims(img.height(), img.width());
                let feat = extract_features(&img.resize(h, w));
                let target = resize_prob(&data[i].1, h, w);
                backward_weighted_ce(&params, &feat, &target, &ones)?
            };
            adam.step(&mut params.values, &grad.values)?;
        }
    }
    let achieved = evaluate(&params, heldout)?.miou()?;
    if achieved < cfg.target_miou {
        return Err(Error::TrainingTarget {
            achieved,
            target: cfg.target_miou,
        });
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::HFlip;
    use approx::assert_abs_diff_eq;

    fn random_features(h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        let data = (0..h * w * FEATURES).map(|_| rng.gen_range(0.0..1.0)).collect();
        FeatureMap::from_grid(Grid::new(h, w, FEATURES, data).unwrap()).unwrap()
    }

    #[test]
    fn constant_image_has_flat_texture_features() {
        let f = extract_features(&Image::filled(9, 11, [0.3, 0.6, 0.2]));
        for px in f.grid().pixel_iter() {
            assert_eq!(px[6], 0.0);
            assert_eq!(px[7], 0.0);
            assert_eq!(px[8], 0.0);
        }
    }

    #[test]
    fn flipped_image_features_mirror() {
        let (img, _) = crate::scenes::generate_scene(&crate::scenes::SceneSpec {
            height: 16,
            width: 20,
            ..Default::default()
        })
        .unwrap();
        let a = extract_features(&img);
        let b = extract_features(&img.hflip());
        let w = img.width();
        for r in 0..img.height() {
            for c in 0..w {
                let fa = a.grid().pixel(r, c);
                let fb = b.grid().pixel(r, w - 1 - c);
                for k in 0..FEATURES {
                    let expect = if k == 10 { 1.0 - fa[k] } else { fa[k] };
                    assert_abs_diff_eq!(fb[k], expect, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn features_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = (0..10 * 12 * 3).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let f = extract_features(&Image::new(10, 12, data).unwrap());
        assert!(f.grid().data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feat = random_features(3, 4, &mut rng);
        let p = forward(&HeadParams::zeros(FEATURES, 8, 5), &feat).unwrap();
        assert!(p.grid().data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

        let mut params = HeadParams::zeros(FEATURES, 8, 5);
        params.b2_mut()[0] = 2f64.ln();
        let p = forward(&params, &feat).unwrap();
        assert_abs_diff_eq!(p.pixel(0, 0)[0], 2.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn doubling_output_weights_sharpens() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let feat = random_features(3, 3, &mut rng);
            let params = HeadParams::init(FEATURES, 8, 4, &mut rng);
            let mut doubled = params.clone();
            for v in doubled.w2_mut() {
                *v *= 2.0;
            }
            let a = forward(&params, &feat).unwrap();
            let b = forward(&doubled, &feat).unwrap();
            for (pa, pb) in a.pixel_iter().zip(b.pixel_iter()) {
                let ma = pa.iter().copied().fold(0.0, f64::max);
                let mb = pb.iter().copied().fold(0.0, f64::max);
                let uniform = pa.iter().all(|&v| (v - pa[0]).abs() < 1e-12);
                if !uniform {
                    assert!(mb > ma, "{mb} <= {ma}");
                }
            }
        }
    }

    #[test]
    fn weighted_ce_hand_values() {
        let feat = FeatureMap::from_grid(Grid::zeros(1, 1, FEATURES)).unwrap();
        let params = HeadParams::zeros(FEATURES, 4, 2);
        let target = ProbMap::from_grid(Grid::new(1, 1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        let (g, loss) = backward_weighted_ce(&params, &feat, &target, &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(loss, 2f64.ln(), epsilon = 1e-11);
        assert!(g.values().iter().any(|&v| v != 0.0));

        let (g, loss) = backward_weighted_ce(&params, &feat, &target, &[0.0, 0.0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_ce_rejects_bad_inputs() {
        let feat = FeatureMap::from_grid(Grid::zeros(1, 1, FEATURES)).unwrap();
        let params = HeadParams::zeros(FEATURES, 4, 2);
        let target = ProbMap::uniform(1, 1, 2);
        assert!(backward_weighted_ce(&params, &feat, &target, &[-1.0, 1.0]).is_err());
        assert!(backward_weighted_ce(&params, &feat, &target, &[1.0]).is_err());
        assert!(backward_weighted_ce(&params, &feat, &ProbMap::uniform(1, 2, 2), &[1.0, 1.0]).is_err());
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut adam = Adam::new(0.1, 1);
        let mut p = [0.5];
        adam.step(&mut p, &[1.0]).unwrap();
        assert_abs_diff_eq!(p[0], 0.4, epsilon = 1e-8);

        let mut adam = Adam::new(0.1, 2);
        let mut p = [0.5, -0.25];
        adam.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, [0.5, -0.25]);

        assert!(adam.step(&mut p, &[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn ema_limits_and_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let student = HeadParams::init(FEATURES, 4, 3, &mut rng);
        let t0 = HeadParams::init(FEATURES, 4, 3, &mut rng);

        let mut t = t0.clone();
        ema_update(&mut t, &student, 1.0).unwrap();
        assert_eq!(t, t0);
        ema_update(&mut t, &student, 0.0).unwrap();
        assert_eq!(t, student);

        let m: f64 = 0.9;
        let mut t = t0.clone();
        for _ in 0..50 {
            ema_update(&mut t, &student, m).unwrap();
        }
        for ((tv, sv), t0v) in t.values().iter().zip(student.values()).zip(t0.values()) {
            assert_abs_diff_eq!(*tv, sv + m.powi(50) * (t0v - sv), epsilon = 1e-12);
        }
        assert!(ema_update(&mut t, &student, 1.5).is_err());
    }

    #[test]
    fn state_updates_leave_source_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let source = HeadParams::init(FEATURES, 4, 3, &mut rng);
        let mut state = AdaptState::new(source.clone(), 0.01);
        assert_eq!(state.teacher, state.student);
        assert!(state.difficulty.delta.iter().all(|&d| d == 1.0));
        let mut g = source.zeros_like();
        g.values_mut().iter_mut().for_each(|v| *v = 0.3);
        state.optimizer_step(&g).unwrap();
        state.ema_update_teacher(0.5).unwrap();
        assert_ne!(state.student, source);
        assert_eq!(state.source(), &source);
    }

    #[test]
    fn cprm_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = HeadParams::init(FEATURES, 6, 4, &mut rng);
        let mut bytes = Vec::new();
        p.write_cprm(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"CPRM");
        assert_eq!(&bytes[8..12], &(FEATURES as u32).to_le_bytes());
        assert_eq!(HeadParams::read_cprm(&bytes[..]).unwrap(), p);
        assert!(HeadParams::read_cprm(&bytes[..10]).is_err());
    }

    #[test]
    fn zero_epochs_fail() {
        let frames = crate::scenes::clean_set(&Default::default(), 1, 0).unwrap();
        let cfg = SourceTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(pretrain_source(&frames, &frames, 6, &cfg).is_err());
    }
}
