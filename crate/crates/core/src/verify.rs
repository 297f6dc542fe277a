//! Self-check suite behind `cotica verify`: gradient and percentile
//! oracles, the reduction chain, EMA closed forms and determinism.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapt::{adapt_stream, AdaptOptions, MethodKind, MethodSpec, RunRecord};
use crate::augment::{aug_mean_prediction, ViewSet};
use crate::error::Result;
use crate::grids::{argmax_conf, ConfLabelPair, Grid, LabelMap, ProbMap};
use crate::icat::{compute_thresholds, IcatConfig, IndexRule};
use crate::icwl::{update_difficulty, DifficultyState, IcwlConfig};
use crate::model::{
    backward_weighted_ce, ema_update, extract_features, forward, FeatureMap, HeadParams, FEATURES,
};
use crate::records::write_frames;
use crate::scenes::{build_stream, DomainKind, DomainSetting, SceneSpec, StreamSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, result: Result<(bool, String)>) -> Check {
    match result {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn random_features(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<FeatureMap> {
    let data = (0..h * w * FEATURES).map(|_| rng.gen_range(-1.0..1.0)).collect();
    FeatureMap::from_grid(Grid::new(h, w, FEATURES, data)?)
}

fn random_probs(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Result<ProbMap> {
    let mut data = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    ProbMap::from_grid(Grid::new(h, w, c, data)?)
}

/// Worst relative error between analytic and central-difference
/// gradients over every coordinate of `instances` random problems.
pub fn gradient_oracle(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for k in 0..instances {
        let c = rng.gen_range(2..=6);
        let feat = random_features(2, 2, &mut rng)?;
        let params = HeadParams::init(FEATURES, 4, c, &mut rng);
        let target = random_probs(2, 2, c, &mut rng)?;
        let weights: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..1.0)).collect();
        let loss = |p: &HeadParams| -> Result<(HeadParams, f64)> {
            if k % 2 == 0 {
                backward_weighted_ce(p, &feat, &target, &weights)
            } else {
                crate::adapt::entropy_loss(p, &feat)
            }
        };
        let (g, _) = loss(&params)?;
        for i in 0..params.values().len() {
            let mut p = params.clone();
            p.values_mut()[i] += h;
            let up = loss(&p)?.1;
            p.values_mut()[i] -= 2.0 * h;
            let down = loss(&p)?.1;
            let fd = (up - down) / (2.0 * h);
            let a = g.values()[i];
            let scale = a.abs().max(fd.abs());
            // Coordinates whose true derivative is ~0 are compared absolutely.
            let err = if scale < 1e-7 { (a - fd).abs() } else { (a - fd).abs() / scale };
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Number of random maps on which the thresholds disagree with a plain
/// sort-and-index reference, under both index rules.
pub fn percentile_oracle(maps: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..maps {
        let (h, w, c) = (rng.gen_range(1..8), rng.gen_range(1..8), rng.gen_range(2..7));
        let conf: Vec<f64> = (0..h * w).map(|_| (rng.gen_range(0..50) as f64) / 49.0).collect();
        let labels: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..c) as u8).collect();
        let pair = ConfLabelPair {
            conf: conf.clone(),
            label: LabelMap::new(h, w, labels.clone())?,
        };
        for rule in [IndexRule::Alpha, IndexRule::AlphaTau0] {
            let cfg = IcatConfig {
                tau0: rng.gen_range(0.5..1.0),
                alpha: rng.gen_range(0.0..1.0),
                beta: rng.gen_range(0.0..1.0),
                index_rule: rule,
                ..Default::default()
            };
            let (tau, phi, _) = compute_thresholds(&pair, c, &cfg);
            for class in 0..c {
                let mut v: Vec<f64> = conf
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &l)| l as usize == class)
                    .map(|(&x, _)| x)
                    .collect();
                v.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
                let frac = if rule == IndexRule::Alpha { cfg.alpha } else { cfg.alpha * cfg.tau0 };
                let expect_phi = if v.is_empty() {
                    cfg.tau0
                } else {
                    v[((frac * v.len() as f64).floor() as usize).min(v.len() - 1)]
                };
                let lo = cfg.tau0.min(expect_phi);
                let hi = cfg.tau0.max(expect_phi);
                let expect_tau = (cfg.beta * cfg.tau0 + (1.0 - cfg.beta) * expect_phi).clamp(lo, hi);
                if phi[class] != expect_phi || tau[class] != expect_tau {
                    mismatches += 1;
                }
            }
        }
    }
    Ok(mismatches)
}

fn short_stream(frames: usize) -> Result<(SceneSpec, crate::scenes::DomainStream)> {
    let scene = SceneSpec {
        height: 16,
        width: 24,
        ..Default::default()
    };
    let spec = StreamSpec {
        schedule: vec![
            DomainSetting {
                kind: DomainKind::Fog,
                severity: 0.6,
            },
            DomainSetting {
                kind: DomainKind::Snow,
                severity: 0.6,
            },
        ],
        rounds: 1,
        frames_per_domain: frames / 2,
        seed: 77,
    };
    Ok((scene.clone(), build_stream(&scene, &spec)?))
}

fn small_source(seed: u64) -> HeadParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HeadParams::init(FEATURES, 8, 6, &mut rng)
}

/// Adaptive thresholds with beta = 1 and unit weights must trace the
/// fixed-threshold baseline exactly.
pub fn reduction_chain(frames: usize) -> Result<(bool, String)> {
    let (_, stream) = short_stream(frames)?;
    let source = small_source(3);
    let mut views = vec![crate::augment::View::IDENTITY];
    views.push(crate::augment::View { scale: 0.5, flip: true });
    let views = ViewSet::new(views)?;
    let mut fixed = MethodSpec::new(MethodKind::FixedThreshold);
    fixed.views = views.clone();
    let mut reduced = MethodSpec::new(MethodKind::Cotica);
    reduced.views = views;
    reduced.icat.beta = 1.0;
    reduced.icwl.lambda = 0.0;
    fixed.fixed_tau = reduced.icat.tau0;
    let opts = AdaptOptions { loss_map_every: 1 };
    let (a, _) = adapt_stream(&stream, &source, &fixed, 0, &opts)?;
    let (b, _) = adapt_stream(&stream, &source, &reduced, 0, &opts)?;
    let same = a.frames.iter().zip(&b.frames).all(|(x, y)| {
        x.loss.to_bits() == y.loss.to_bits()
            && x.loss_map == y.loss_map
            && x.thresholds.as_ref().map(|t| (&t.mask_counts, &t.accepted))
                == y.thresholds.as_ref().map(|t| (&t.mask_counts, &t.accepted))
            && x.intersection == y.intersection
    });

    let img = &stream.frames[0].image;
    let teacher = forward(&source, &extract_features(img))?;
    let identity = aug_mean_prediction(&source, img, &ViewSet::identity())? == teacher;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let feat = random_features(3, 3, &mut rng)?;
    let target = random_probs(3, 3, 6, &mut rng)?;
    let (_, weighted) = backward_weighted_ce(&source, &feat, &target, &crate::icwl::loss_weights(&DifficultyState::new(6), 0.0))?;
    let pred = forward(&source, &feat)?;
    let plain: f64 = pred
        .pixel_iter()
        .zip(target.pixel_iter())
        .map(|(p, t)| -p.iter().zip(t).map(|(p, t)| t * (p + crate::model::LOG_EPS).ln()).sum::<f64>())
        .sum::<f64>()
        / 9.0;
    let ce = (weighted - plain).abs() <= 1e-12;
    Ok((
        same && identity && ce,
        format!("trace identical: {same}, identity view: {identity}, lambda=0 loss gap {:.1e}", (weighted - plain).abs()),
    ))
}

/// Largest deviation of iterated EMAs from their geometric closed forms.
pub fn ema_closed_form(steps: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let student = HeadParams::init(FEATURES, 4, 3, &mut rng);
    let start = HeadParams::init(FEATURES, 4, 3, &mut rng);
    let mut teacher = start.clone();
    let m: f64 = 0.999;
    let cfg = IcwlConfig::default();
    let mut state = DifficultyState::new(3);
    let obs = [Some(0.2), Some(0.5), Some(0.9)];
    for _ in 0..steps {
        ema_update(&mut teacher, &student, m)?;
        update_difficulty(&mut state, &obs, &cfg)?;
    }
    let decay = m.powi(steps as i32);
    let mut worst: f64 = 0.0;
    for ((t, s), t0) in teacher.values().iter().zip(student.values()).zip(start.values()) {
        worst = worst.max((t - (s + (t0 - s) * decay)).abs());
    }
    let sdecay = cfg.sigma.powi(steps as i32);
    for (d, o) in state.delta.iter().zip(obs) {
        let o = o.expect("set above");
        worst = worst.max((d - (o + (1.0 - o) * sdecay)).abs());
    }
    Ok(worst)
}

fn frames_csv(run: &RunRecord) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_frames(run, &mut buf)?;
    Ok(buf)
}

/// Two identical runs must serialise to identical bytes.
pub fn determinism(frames: usize) -> Result<bool> {
    let (_, stream) = short_stream(frames)?;
    let source = small_source(4);
    let mut m = MethodSpec::new(MethodKind::Cotica);
    m.views = ViewSet::new(vec![crate::augment::View::IDENTITY, crate::augment::View { scale: 1.5, flip: true }])?;
    let (a, _) = adapt_stream(&stream, &source, &m, 0, &AdaptOptions::default())?;
    let (b, _) = adapt_stream(&stream, &source, &m, 0, &AdaptOptions::default())?;
    Ok(frames_csv(&a)? == frames_csv(&b)?)
}

/// Argmax ties resolve to the lowest class index.
fn argmax_ties() -> Result<bool> {
    let p = ProbMap::from_grid(Grid::new(1, 1, 3, vec![0.4, 0.4, 0.2])?)?;
    Ok(argmax_conf(&p).label.data()[0] == 0)
}

/// Runs every check. `quick` shrinks instance counts.
pub fn run_all(quick: bool) -> Vec<Check> {
    let (grads, maps, frames, steps) = if quick { (20, 100, 8, 1000) } else { (100, 1000, 40, 10_000) };
    vec![
        check(
            "gradient oracle",
            gradient_oracle(grads, 1).map(|e| (e <= 1e-4, format!("{grads} instances, worst relative error {e:.2e}"))),
        ),
        check(
            "percentile oracle",
            percentile_oracle(maps, 2).map(|n| (n == 0, format!("{maps} maps, {n} mismatches"))),
        ),
        check("reduction chain", reduction_chain(frames)),
        check(
            "ema closed form",
            ema_closed_form(steps).map(|e| (e <= 1e-10, format!("{steps} steps, worst gap {e:.2e}"))),
        ),
        check(
            "determinism",
            determinism(frames.min(8)).map(|ok| (ok, "repeated run CSVs compared byte for byte".to_string())),
        ),
        check("argmax ties", argmax_ties().map(|ok| (ok, "lowest index wins".to_string()))),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        for c in run_all(true) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
