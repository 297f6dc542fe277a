//! Procedural street scenes, weather-style corruptions and the continual
//! domain streams built from them.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{Grid, Image, LabelMap};

pub const SKY: u8 = 0;
pub const ROAD: u8 = 1;
pub const SIDEWALK: u8 = 2;
pub const BUILDING: u8 = 3;
pub const VEGETATION: u8 = 4;
pub const VEHICLE: u8 = 5;

pub const DEFAULT_CLASSES: usize = 6;
pub const CLASS_NAMES: [&str; DEFAULT_CLASSES] =
    ["sky", "road", "sidewalk", "building", "vegetation", "vehicle"];

/// Display name of a class index.
pub fn class_name(c: usize) -> String {
    CLASS_NAMES
        .get(c)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{c}"))
}

/// SplitMix64 finalizer, used to derive independent child seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Number of foreground objects (buildings, vegetation, vehicles).
    pub density: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 96,
            classes: DEFAULT_CLASSES,
            density: 6,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::InvalidParameter(format!(
                "scene must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if !(2..=DEFAULT_CLASSES).contains(&self.classes) {
            return Err(Error::InvalidParameter(format!(
                "scene class count must be in 2..=6, got {}",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

struct Canvas {
    rgb: Grid,
    labels: LabelMap,
    classes: usize,
}

impl Canvas {
    fn paint(&mut self, row: usize, col: usize, class: u8, rgb: [f64; 3]) {
        self.rgb.pixel_mut(row, col).copy_from_slice(&rgb);
        self.labels.set(row, col, class % self.classes as u8);
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    let shift = rng.gen_range(-amount..=amount);
    [
        base[0] + shift + rng.gen_range(-amount..=amount) * 0.5,
        base[1] + shift + rng.gen_range(-amount..=amount) * 0.5,
        base[2] + shift + rng.gen_range(-amount..=amount) * 0.5,
    ]
}

fn noisy(rng: &mut ChaCha8Rng, rgb: [f64; 3], amount: f64) -> [f64; 3] {
    let n = rng.gen_range(-amount..=amount);
    [rgb[0] + n, rgb[1] + n, rgb[2] + n]
}

/// Renders one labelled scene. Identical specs give bit-identical output.
///
/// Layers, back to front: sky gradient, far-building band, sidewalk strip,
/// road, then `density` objects cycling building / vegetation / vehicle.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Image, LabelMap)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let hf = h as f64;
    let wf = w as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cv = Canvas {
        rgb: Grid::zeros(h, w, 3),
        labels: LabelMap::filled(h, w, SKY),
        classes: spec.classes,
    };

    let horizon = ((hf * rng.gen_range(0.30..0.42)).round() as usize).clamp(1, h - 4);
    let road_top = ((hf * rng.gen_range(0.62..0.72)).round() as usize).clamp(horizon + 3, h - 1);
    let walk = ((hf * rng.gen_range(0.06..0.10)).round() as usize).clamp(1, road_top - horizon - 1);
    let walk_top = road_top - walk;

    let sky_top = jitter(&mut rng, [0.40, 0.60, 0.92], 0.04);
    let sky_low = jitter(&mut rng, [0.72, 0.82, 0.95], 0.03);
    let far = jitter(&mut rng, [0.50, 0.42, 0.40], 0.05);
    let walk_rgb = jitter(&mut rng, [0.64, 0.60, 0.54], 0.04);
    let road_rgb = jitter(&mut rng, [0.32, 0.32, 0.35], 0.03);

    for r in 0..h {
        for c in 0..w {
            if r < horizon {
                let t = r as f64 / horizon.max(1) as f64;
                let base = [
                    sky_top[0] + t * (sky_low[0] - sky_top[0]),
                    sky_top[1] + t * (sky_low[1] - sky_top[1]),
                    sky_top[2] + t * (sky_low[2] - sky_top[2]),
                ];
                let px = noisy(&mut rng, base, 0.01);
                cv.paint(r, c, SKY, px);
            } else if r < walk_top {
                let px = noisy(&mut rng, far, 0.03);
                cv.paint(r, c, BUILDING, px);
            } else if r < road_top {
                let tile = if c % 6 == 0 { -0.08 } else { 0.0 };
                let base = [walk_rgb[0] + tile, walk_rgb[1] + tile, walk_rgb[2] + tile];
                let px = noisy(&mut rng, base, 0.03);
                cv.paint(r, c, SIDEWALK, px);
            } else {
                let px = noisy(&mut rng, road_rgb, 0.035);
                cv.paint(r, c, ROAD, px);
            }
        }
    }

    let kinds = [BUILDING, VEGETATION, VEHICLE];
    let mut objects: Vec<u8> = (0..spec.density).map(|i| kinds[i % 3]).collect();
    // Painter's order: buildings first, vehicles last.
    objects.sort_by_key(|k| match *k {
        BUILDING => 0,
        VEGETATION => 1,
        _ => 2,
    });

    for kind in objects {
        match kind {
            BUILDING => {
                let bw = ((wf * rng.gen_range(0.08..0.22)).round() as usize).max(2);
                let x0 = rng.gen_range(0..w.saturating_sub(bw).max(1));
                let rise = (hf * rng.gen_range(0.06..0.26)).round() as usize;
                let top = horizon.saturating_sub(rise).max(1);
                let base = jitter(&mut rng, [0.56, 0.38, 0.32], 0.06);
                for r in top..walk_top {
                    for c in x0..(x0 + bw).min(w) {
                        let window = (r - top) % 4 == 1 && (c - x0) % 3 == 1;
                        let shade = if window { -0.18 } else { 0.0 };
                        let px = noisy(
                            &mut rng,
                            [base[0] + shade, base[1] + shade, base[2] + shade * 0.5],
                            0.03,
                        );
                        cv.paint(r, c, BUILDING, px);
                    }
                }
            }
            VEGETATION => {
                let cx = rng.gen_range(0.0..wf);
                let cy = horizon as f64 + hf * rng.gen_range(-0.06..0.06);
                let rx = wf * rng.gen_range(0.05..0.11);
                let ry = hf * rng.gen_range(0.06..0.13);
                let base = jitter(&mut rng, [0.22, 0.48, 0.20], 0.04);
                let r0 = (cy - ry).floor().max(0.0) as usize;
                let r1 = ((cy + ry).ceil() as usize).min(walk_top);
                let c0 = (cx - rx).floor().max(0.0) as usize;
                let c1 = ((cx + rx).ceil() as usize).min(w);
                for r in r0..r1 {
                    for c in c0..c1 {
                        let dy = (r as f64 + 0.5 - cy) / ry;
                        let dx = (c as f64 + 0.5 - cx) / rx;
                        if dx * dx + dy * dy <= 1.0 {
                            let px = noisy(&mut rng, base, 0.09);
                            cv.paint(r, c, VEGETATION, px);
                        }
                    }
                }
            }
            _ => {
                let vw = ((wf * rng.gen_range(0.12..0.22)).round() as usize).max(3);
                let vh = ((hf * rng.gen_range(0.08..0.14)).round() as usize).max(3);
                let lo = road_top + 1;
                let hi = h.saturating_sub(vh).max(lo + 1);
                let y0 = rng.gen_range(lo..hi).min(h - 1);
                let x0 = rng.gen_range(0..w.saturating_sub(vw).max(1));
                let base = jitter(&mut rng, [0.78, 0.20, 0.16], 0.06);
                let radius = 1usize;
                for r in y0..(y0 + vh).min(h) {
                    for c in x0..(x0 + vw).min(w) {
                        let dr = (r - y0).min(y0 + vh - 1 - r);
                        let dc = (c - x0).min(x0 + vw - 1 - c);
                        if dr + dc < radius {
                            continue;
                        }
                        let glass = r - y0 < vh / 3 && dc >= 2;
                        let px = if glass {
                            noisy(&mut rng, [0.25, 0.28, 0.34], 0.02)
                        } else {
                            noisy(&mut rng, base, 0.025)
                        };
                        cv.paint(r, c, VEHICLE, px);
                    }
                }
            }
        }
    }

    Ok((Image::from_grid_clamped(cv.rgb), cv.labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Clean,
    Night,
    Fog,
    Rain,
    Snow,
}

impl DomainKind {
    pub const ALL: [DomainKind; 5] = [
        DomainKind::Clean,
        DomainKind::Night,
        DomainKind::Fog,
        DomainKind::Rain,
        DomainKind::Snow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DomainKind::Clean => "clean",
            DomainKind::Night => "night",
            DomainKind::Fog => "fog",
            DomainKind::Rain => "rain",
            DomainKind::Snow => "snow",
        }
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DomainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DomainKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown domain kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub severity: f64,
    pub seed: u64,
}

const FOG_GRAY: f64 = 0.7;
const RAIN_RGB: [f64; 3] = [0.74, 0.77, 0.84];
const SNOW_RGB: [f64; 3] = [0.95, 0.95, 0.97];

/// Applies a weather-style corruption to an image. Severity 0 is the
/// identity for every kind; `clean` is the identity at any severity.
pub fn corrupt(img: &Image, d: &DomainSpec) -> Result<Image> {
    if !(0.0..=1.0).contains(&d.severity) {
        return Err(Error::InvalidParameter(format!(
            "severity {} outside [0, 1]",
            d.severity
        )));
    }
    let s = d.severity;
    let (h, w) = (img.height(), img.width());
    let mut g = img.grid().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
    match d.kind {
        DomainKind::Clean => return Ok(img.clone()),
        DomainKind::Night => {
            let dim = 1.0 - 0.8 * s;
            let warm_cut = 1.0 - 0.25 * s;
            for px in g.data_mut().chunks_exact_mut(3) {
                px[0] *= dim * warm_cut;
                px[1] *= dim * warm_cut;
                px[2] *= dim;
            }
        }
        DomainKind::Fog => {
            let denom = (h.max(2) - 1) as f64;
            for r in 0..h {
                let height_frac = 1.0 - r as f64 / denom;
                let strength = s * (0.5 + 0.5 * height_frac);
                for c in 0..w {
                    for v in g.pixel_mut(r, c) {
                        *v = (1.0 - strength) * *v + strength * FOG_GRAY;
                    }
                }
            }
        }
        DomainKind::Rain => {
            let budget = (0.10 * s * (h * w) as f64).floor() as usize;
            let mut covered = vec![false; h * w];
            let mut used = 0;
            let mut attempts = 0;
            while used < budget && attempts < 100 * (budget + 1) {
                attempts += 1;
                let x = rng.gen_range(0..w);
                let y = rng.gen_range(0..h);
                let len = rng.gen_range(3..9);
                let tint = rng.gen_range(-0.04..0.04);
                for k in 0..len {
                    let (r, c) = (y + k, x + k / 3);
                    if r >= h || c >= w || used >= budget {
                        break;
                    }
                    if !covered[r * w + c] {
                        covered[r * w + c] = true;
                        used += 1;
                    }
                    let px = g.pixel_mut(r, c);
                    for ch in 0..3 {
                        px[ch] = RAIN_RGB[ch] + tint;
                    }
                }
            }
        }
        DomainKind::Snow => {
            let budget = (0.15 * s * (h * w) as f64).floor() as usize;
            let mut covered = vec![false; h * w];
            let mut used = 0;
            let mut attempts = 0;
            while used < budget && attempts < 100 * (budget + 1) {
                attempts += 1;
                // Most flakes settle on the lower (ground) part of the frame.
                let y = if rng.gen_bool(0.85) {
                    (h as f64 * rng.gen_range(0.55..1.0)) as usize
                } else {
                    rng.gen_range(0..h)
                }
                .min(h - 1);
                let x = rng.gen_range(0..w);
                let radius: i64 = rng.gen_range(1..3);
                let tint = rng.gen_range(-0.03..0.02);
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        if dx * dx + dy * dy > radius * radius || used >= budget {
                            continue;
                        }
                        let (r, c) = (y as i64 + dy, x as i64 + dx);
                        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                            continue;
                        }
                        let (r, c) = (r as usize, c as usize);
                        if !covered[r * w + c] {
                            covered[r * w + c] = true;
                            used += 1;
                        }
                        let px = g.pixel_mut(r, c);
                        for ch in 0..3 {
                            px[ch] = SNOW_RGB[ch] + tint;
                        }
                    }
                }
            }
        }
    }
    Ok(Image::from_grid_clamped(g))
}

/// One domain block in a stream schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSetting {
    pub kind: DomainKind,
    pub severity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSpec {
    pub schedule: Vec<DomainSetting>,
    pub rounds: usize,
    pub frames_per_domain: usize,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            schedule: vec![
                DomainSetting {
                    kind: DomainKind::Fog,
                    severity: 0.8,
                },
                DomainSetting {
                    kind: DomainKind::Night,
                    severity: 0.5,
                },
                DomainSetting {
                    kind: DomainKind::Rain,
                    severity: 0.6,
                },
                DomainSetting {
                    kind: DomainKind::Snow,
                    severity: 0.6,
                },
            ],
            rounds: 3,
            frames_per_domain: 20,
            seed: 1000,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::InvalidParameter("stream schedule is empty".into()));
        }
        if self.rounds == 0 || self.frames_per_domain == 0 {
            return Err(Error::InvalidParameter(
                "rounds and frames_per_domain must be at least 1".into(),
            ));
        }
        for d in &self.schedule {
            if !(0.0..=1.0).contains(&d.severity) {
                return Err(Error::InvalidParameter(format!(
                    "severity {} for {} outside [0, 1]",
                    d.severity, d.kind
                )));
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.rounds * self.schedule.len() * self.frames_per_domain
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// Position in the stream.
    pub index: usize,
    pub round: usize,
    /// Position of the domain block within the schedule.
    pub domain_index: usize,
    pub domain: DomainKind,
    pub frame_in_domain: usize,
    pub image: Arc<Image>,
    pub labels: Arc<LabelMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainStream {
    pub spec: StreamSpec,
    pub frames: Vec<Frame>,
}

impl DomainStream {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Frame> {
        self.frames.iter()
    }
}

fn scene_seed(stream_seed: u64, domain_index: usize, frame: usize) -> u64 {
    mix_seed(&[stream_seed, 1, domain_index as u64, frame as u64])
}

fn corruption_seed(stream_seed: u64, domain_index: usize, frame: usize) -> u64 {
    mix_seed(&[stream_seed, 2, domain_index as u64, frame as u64])
}

/// Renders the corrupted frame for one (domain block, frame) slot.
pub fn render_slot(
    template: &SceneSpec,
    spec: &StreamSpec,
    domain_index: usize,
    frame: usize,
) -> Result<(Image, LabelMap)> {
    let setting = spec.schedule[domain_index];
    let scene = template.with_seed(scene_seed(spec.seed, domain_index, frame));
    let (img, labels) = generate_scene(&scene)?;
    let d = DomainSpec {
        kind: setting.kind,
        severity: setting.severity,
        seed: corruption_seed(spec.seed, domain_index, frame),
    };
    Ok((corrupt(&img, &d)?, labels))
}

/// Builds the continual stream: for every round, every scheduled domain
/// emits `frames_per_domain` frames. Rounds replay the same scenes with the
/// same corruptions.
pub fn build_stream(template: &SceneSpec, spec: &StreamSpec) -> Result<DomainStream> {
    template.validate()?;
    spec.validate()?;
    let slots: Vec<(usize, usize)> = (0..spec.schedule.len())
        .flat_map(|d| (0..spec.frames_per_domain).map(move |f| (d, f)))
        .collect();
    let render = |&(d, f): &(usize, usize)| {
        render_slot(template, spec, d, f).map(|(i, l)| (Arc::new(i), Arc::new(l)))
    };
    #[cfg(feature = "parallel")]
    let rendered: Vec<_> = {
        use rayon::prelude::*;
        slots.par_iter().map(render).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let rendered: Vec<_> = slots.iter().map(render).collect::<Result<_>>()?;

    let mut frames = Vec::with_capacity(spec.frame_count());
    for round in 0..spec.rounds {
        for (slot, &(d, f)) in slots.iter().enumerate() {
            let (image, labels) = &rendered[slot];
            frames.push(Frame {
                index: frames.len(),
                round,
                domain_index: d,
                domain: spec.schedule[d].kind,
                frame_in_domain: f,
                image: Arc::clone(image),
                labels: Arc::clone(labels),
            });
        }
    }
    Ok(DomainStream {
        spec: spec.clone(),
        frames,
    })
}

/// Uncorrupted labelled scenes, e.g. for source training or held-out
/// evaluation.
pub fn clean_set(template: &SceneSpec, count: usize, seed: u64) -> Result<Vec<(Image, LabelMap)>> {
    (0..count)
        .map(|i| generate_scene(&template.with_seed(mix_seed(&[seed, 3, i as u64]))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn present(labels: &LabelMap) -> [bool; 6] {
        let mut p = [false; 6];
        for &l in labels.data() {
            p[l as usize] = true;
        }
        p
    }

    #[test]
    fn scenes_are_deterministic() {
        let spec = SceneSpec {
            seed: 42,
            ..Default::default()
        };
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&spec.with_seed(43)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn zero_density_has_only_background() {
        for seed in 0..50 {
            let spec = SceneSpec {
                seed,
                density: 0,
                ..Default::default()
            };
            let (_, labels) = generate_scene(&spec).unwrap();
            let p = present(&labels);
            assert!(!p[VEGETATION as usize] && !p[VEHICLE as usize]);
            assert!(p[SKY as usize] && p[ROAD as usize]);
        }
    }

    #[test]
    fn every_class_is_common_across_seeds() {
        let mut counts = [0usize; 6];
        for seed in 0..1000 {
            let (_, labels) = generate_scene(&SceneSpec::default().with_seed(seed)).unwrap();
            for (c, p) in present(&labels).iter().enumerate() {
                counts[c] += *p as usize;
            }
        }
        for (c, n) in counts.iter().enumerate() {
            assert!(*n >= 900, "class {} present in only {n} of 1000 scenes", class_name(c));
        }
    }

    #[test]
    fn small_class_counts_fold_labels() {
        let spec = SceneSpec {
            classes: 2,
            ..Default::default()
        };
        let (_, labels) = generate_scene(&spec).unwrap();
        labels.validate(2).unwrap();
        let p = present(&labels);
        assert!(p[0] && p[1]);
    }

    #[test]
    fn corruption_examples() {
        let (img, _) = generate_scene(&SceneSpec::default()).unwrap();
        let clean = DomainSpec {
            kind: DomainKind::Clean,
            severity: 0.9,
            seed: 1,
        };
        assert_eq!(corrupt(&img, &clean).unwrap(), img);

        let night = DomainSpec {
            kind: DomainKind::Night,
            severity: 1.0,
            seed: 1,
        };
        let dark = corrupt(&img, &night).unwrap();
        for (a, b) in dark.grid().data().iter().zip(img.grid().data()) {
            assert!(a <= b);
        }

        let gray = Image::filled(16, 16, [0.7; 3]);
        let fog = DomainSpec {
            kind: DomainKind::Fog,
            severity: 0.5,
            seed: 1,
        };
        let fogged = corrupt(&gray, &fog).unwrap();
        for (a, b) in fogged.grid().data().iter().zip(gray.grid().data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn severity_out_of_range_is_rejected() {
        let img = Image::filled(8, 8, [0.5; 3]);
        for s in [-0.1, 1.5, f64::NAN] {
            let d = DomainSpec {
                kind: DomainKind::Fog,
                severity: s,
                seed: 0,
            };
            assert!(corrupt(&img, &d).is_err());
        }
    }

    #[test]
    fn overwrite_budgets_are_respected() {
        let (img, _) = generate_scene(&SceneSpec::default()).unwrap();
        let total = (img.height() * img.width()) as f64;
        for (kind, cap) in [(DomainKind::Rain, 0.10), (DomainKind::Snow, 0.15)] {
            for s in [0.3, 1.0] {
                let out = corrupt(
                    &img,
                    &DomainSpec {
                        kind,
                        severity: s,
                        seed: 9,
                    },
                )
                .unwrap();
                let changed = (0..img.height())
                    .flat_map(|r| (0..img.width()).map(move |c| (r, c)))
                    .filter(|&(r, c)| out.rgb(r, c) != img.rgb(r, c))
                    .count() as f64;
                assert!(changed <= cap * s * total, "{kind} changed {changed}");
                assert!(changed > 0.0);
            }
        }
    }

    #[test]
    fn stream_shape_and_tags() {
        let template = SceneSpec {
            height: 16,
            width: 24,
            ..Default::default()
        };
        let spec = StreamSpec {
            frames_per_domain: 10,
            ..Default::default()
        };
        let s = build_stream(&template, &spec).unwrap();
        assert_eq!(s.len(), 120);
        for (i, f) in s.iter().enumerate() {
            assert_eq!(f.index, i);
            assert_eq!(f.round, i / 40);
            assert_eq!(f.domain_index, (i % 40) / 10);
            assert_eq!(f.domain, spec.schedule[f.domain_index].kind);
        }
        // Rounds replay identical frames.
        for i in 0..40 {
            assert_eq!(s.frames[i].image, s.frames[i + 80].image);
            assert_eq!(s.frames[i].labels, s.frames[i + 40].labels);
        }
        assert_eq!(build_stream(&template, &spec).unwrap(), s);

        let one = StreamSpec {
            schedule: vec![spec.schedule[0]],
            rounds: 1,
            frames_per_domain: 1,
            seed: 3,
        };
        let s = build_stream(&template, &one).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.frames[0].round, 0);
    }

    #[test]
    fn stream_labels_are_uncorrupted() {
        let template = SceneSpec {
            height: 16,
            width: 24,
            ..Default::default()
        };
        let spec = StreamSpec {
            frames_per_domain: 2,
            rounds: 1,
            ..Default::default()
        };
        let s = build_stream(&template, &spec).unwrap();
        for f in s.iter() {
            let seed = scene_seed(spec.seed, f.domain_index, f.frame_in_domain);
            let (_, labels) = generate_scene(&template.with_seed(seed)).unwrap();
            assert_eq!(*f.labels, labels);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn zero_severity_is_identity(seed in 0u64..1000, k in 0usize..5) {
            let (img, _) = generate_scene(&SceneSpec { seed, height: 12, width: 20, ..Default::default() }).unwrap();
            let d = DomainSpec { kind: DomainKind::ALL[k], severity: 0.0, seed };
            let out = corrupt(&img, &d).unwrap();
            for (a, b) in out.grid().data().iter().zip(img.grid().data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn corruption_stays_in_unit_range(seed in 0u64..1000, k in 0usize..5, s in 0.0f64..=1.0) {
            let (img, _) = generate_scene(&SceneSpec { seed, height: 12, width: 20, ..Default::default() }).unwrap();
            let d = DomainSpec { kind: DomainKind::ALL[k], severity: s, seed };
            let out = corrupt(&img, &d).unwrap();
            prop_assert!(out.grid().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
