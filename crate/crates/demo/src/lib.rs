//! Browser front end: render a corrupted scene, predict it with a small
//! source model, and inspect the per-class adaptive thresholds.

use cotica::augment::{aug_mean_prediction, ViewSet};
use cotica::error::{Error, Result};
use cotica::grids::{argmax_conf, Image, LabelMap, ProbMap};
use cotica::icat::{icat_from_predictions, IcatConfig, IndexRule, Predictions};
use cotica::metrics::ConfusionMatrix;
use cotica::model::{evaluate, extract_features, forward, pretrain_source, HeadParams, SourceTrainConfig};
use cotica::scenes::{class_name, clean_set, corrupt, generate_scene, DomainKind, DomainSpec, SceneSpec};
use serde_json::json;
use wasm_bindgen::prelude::*;

const CLASS_RGB: [[u8; 3]; 6] = [
    [110, 170, 230],
    [90, 90, 90],
    [200, 170, 140],
    [160, 70, 60],
    [60, 140, 60],
    [230, 200, 40],
];

fn demo_scene() -> SceneSpec {
    SceneSpec {
        height: 48,
        width: 72,
        ..SceneSpec::default()
    }
}

fn image_rgba(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.height() * img.width() * 4);
    for r in 0..img.height() {
        for c in 0..img.width() {
            out.extend(img.rgb(r, c).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
            out.push(255);
        }
    }
    out
}

fn labels_rgba(labels: &LabelMap) -> Vec<u8> {
    labels
        .data()
        .iter()
        .flat_map(|&l| {
            let [r, g, b] = CLASS_RGB[l as usize % CLASS_RGB.len()];
            [r, g, b, 255]
        })
        .collect()
}

/// Trained source head plus the frame currently on screen.
pub struct Session {
    params: HeadParams,
    clean_miou: f64,
    clean: Image,
    corrupted: Image,
    labels: LabelMap,
    prediction: ProbMap,
}

impl Session {
    pub fn new(seed: u64) -> Result<Self> {
        let scene = demo_scene();
        let cfg = SourceTrainConfig {
            train_frames: 16,
            heldout_frames: 4,
            epochs: 15,
            target_miou: 0.0,
            seed,
            scale_augment: false,
            ..SourceTrainConfig::default()
        };
        let train = clean_set(&scene, cfg.train_frames, cfg.seed)?;
        let heldout = clean_set(&scene, cfg.heldout_frames, cfg.seed.wrapping_add(1))?;
        let params = pretrain_source(&train, &heldout, scene.classes, &cfg)?;
        let clean_miou = evaluate(&params, &heldout)?.miou()?;
        let (img, labels) = generate_scene(&scene.with_seed(seed))?;
        let prediction = forward(&params, &extract_features(&img))?;
        Ok(Self {
            params,
            clean_miou,
            clean: img.clone(),
            corrupted: img,
            labels,
            prediction,
        })
    }

    /// Operation 1: a new scene under a named corruption.
    pub fn render(&mut self, scene_seed: u64, domain: &str, severity: f64) -> Result<()> {
        let kind: DomainKind = domain.parse()?;
        let (img, labels) = generate_scene(&demo_scene().with_seed(scene_seed))?;
        let corrupted = corrupt(
            &img,
            &DomainSpec {
                kind,
                severity,
                seed: scene_seed,
            },
        )?;
        self.prediction = forward(&self.params, &extract_features(&corrupted))?;
        self.clean = img;
        self.corrupted = corrupted;
        self.labels = labels;
        Ok(())
    }

    /// Operation 2: source prediction scored against the ground truth.
    pub fn prediction_summary(&self) -> Result<serde_json::Value> {
        let pred = argmax_conf(&self.prediction);
        let mut cm = ConfusionMatrix::new(self.params.classes());
        cm.accumulate(&pred.label, &self.labels)?;
        let iou: Vec<_> = cm
            .iou_per_class()
            .iter()
            .enumerate()
            .map(|(c, v)| json!({ "class": class_name(c), "iou": v }))
            .collect();
        Ok(json!({
            "miou": cm.miou().ok(),
            "clean_miou": self.clean_miou,
            "accuracy": cm.pixel_accuracy(),
            "classes": iou,
        }))
    }

    pub fn prediction_labels(&self) -> LabelMap {
        argmax_conf(&self.prediction).label
    }

    /// Operation 3: per-class thresholds on the current frame and the
    /// pixels that keep the direct prediction.
    pub fn thresholds(&self, tau0: f64, alpha: f64, beta: f64, scaled_rank: bool) -> Result<(serde_json::Value, Vec<bool>)> {
        let cfg = IcatConfig {
            tau0,
            alpha,
            beta,
            index_rule: if scaled_rank { IndexRule::AlphaTau0 } else { IndexRule::Alpha },
            ..IcatConfig::default()
        };
        let aug = aug_mean_prediction(&self.params, &self.corrupted, &ViewSet::default())?;
        let preds = Predictions {
            teacher: &self.prediction,
            student: &self.prediction,
            source: &self.prediction,
        };
        let (_, report, mask) = icat_from_predictions(&preds, &aug, &cfg)?;
        let rows: Vec<_> = (0..report.classes())
            .map(|c| {
                json!({
                    "class": class_name(c),
                    "pixels": report.counts[c],
                    "phi": report.phi[c],
                    "tau": report.tau[c],
                    "kept": report.acceptance(c),
                })
            })
            .collect();
        let kept = mask.iter().filter(|&&k| k).count();
        Ok((json!({ "kept_fraction": kept as f64 / mask.len() as f64, "classes": rows }), mask))
    }
}

fn js_err(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        Session::new(seed as u64).map(Demo).map_err(js_err)
    }

    pub fn width(&self) -> usize {
        self.0.clean.width()
    }

    pub fn height(&self) -> usize {
        self.0.clean.height()
    }

    pub fn render(&mut self, scene_seed: u32, domain: &str, severity: f64) -> Result<(), JsError> {
        self.0.render(scene_seed as u64, domain, severity).map_err(js_err)
    }

    pub fn clean_rgba(&self) -> Vec<u8> {
        image_rgba(&self.0.clean)
    }

    pub fn corrupted_rgba(&self) -> Vec<u8> {
        image_rgba(&self.0.corrupted)
    }

    pub fn labels_rgba(&self) -> Vec<u8> {
        labels_rgba(&self.0.labels)
    }

    pub fn prediction_rgba(&self) -> Vec<u8> {
        labels_rgba(&self.0.prediction_labels())
    }

    /// JSON with mIoU and per-class IoU of the source prediction.
    pub fn prediction_summary(&self) -> Result<String, JsError> {
        self.0.prediction_summary().map(|v| v.to_string()).map_err(js_err)
    }

    /// JSON per-class threshold table.
    pub fn thresholds(&self, tau0: f64, alpha: f64, beta: f64, scaled_rank: bool) -> Result<String, JsError> {
        self.0.thresholds(tau0, alpha, beta, scaled_rank).map(|(v, _)| v.to_string()).map_err(js_err)
    }

    /// Kept pixels in their predicted colour, replaced pixels in black.
    pub fn mask_rgba(&self, tau0: f64, alpha: f64, beta: f64, scaled_rank: bool) -> Result<Vec<u8>, JsError> {
        let (_, mask) = self.0.thresholds(tau0, alpha, beta, scaled_rank).map_err(js_err)?;
        let mut rgba = self.prediction_rgba();
        for (px, keep) in rgba.chunks_exact_mut(4).zip(mask) {
            if !keep {
                px[..3].fill(0);
            }
        }
        Ok(rgba)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_runs_all_three_operations() {
        let mut s = Session::new(1).unwrap();
        assert!(s.clean_miou > 0.3, "{}", s.clean_miou);
        s.render(5, "fog", 0.6).unwrap();
        let summary = s.prediction_summary().unwrap();
        assert!(summary["miou"].as_f64().unwrap() <= 1.0);
        assert_eq!(summary["classes"].as_array().unwrap().len(), 6);

        let (table, mask) = s.thresholds(0.99, 0.2, 0.9, false).unwrap();
        assert_eq!(mask.len(), 48 * 72);
        for row in table["classes"].as_array().unwrap() {
            let tau = row["tau"].as_f64().unwrap();
            let phi = row["phi"].as_f64().unwrap();
            assert!(tau >= phi.min(0.99) - 1e-12 && tau <= phi.max(0.99) + 1e-12);
        }
        let (strict, _) = s.thresholds(1.0, 0.2, 1.0, false).unwrap();
        assert!(strict["kept_fraction"].as_f64().unwrap() <= table["kept_fraction"].as_f64().unwrap());
        assert!(s.render(1, "hail", 0.5).is_err());
    }

    #[test]
    fn rgba_buffers_match_the_frame() {
        let s = Session::new(2).unwrap();
        let d = Demo(s);
        let n = d.width() * d.height() * 4;
        assert_eq!(d.clean_rgba().len(), n);
        assert_eq!(d.labels_rgba().len(), n);
        assert_eq!(d.prediction_rgba().len(), n);
    }
}
