//! Multi-view test-time augmentation and the view-averaged teacher
//! prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{renormalize, resize_prob, Grid, HFlip, Image, ProbMap};
use crate::model::{extract_features, forward, HeadParams};

pub const DEFAULT_SCALES: [f64; 7] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct View {
    pub scale: f64,
    pub flip: bool,
}

impl View {
    pub const IDENTITY: View = View {
        scale: 1.0,
        flip: false,
    };

    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        let h = (self.scale * height as f64).round().max(1.0) as usize;
        let w = (self.scale * width as f64).round().max(1.0) as usize;
        (h, w)
    }
}

/// Ordered list of augmentation views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ViewSet(Vec<View>);

impl Default for ViewSet {
    /// Every scale in [`DEFAULT_SCALES`], each without and with a flip.
    fn default() -> Self {
        Self(
            DEFAULT_SCALES
                .iter()
                .flat_map(|&scale| [false, true].map(|flip| View { scale, flip }))
                .collect(),
        )
    }
}

impl ViewSet {
    pub fn new(views: Vec<View>) -> Result<Self> {
        let set = Self(views);
        set.validate()?;
        Ok(set)
    }

    pub fn identity() -> Self {
        Self(vec![View::IDENTITY])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidParameter("view set is empty".into()));
        }
        if let Some(v) = self.0.iter().find(|v| !(v.scale > 0.0) || !v.scale.is_finite()) {
            return Err(Error::InvalidParameter(format!("view scale {} must be > 0", v.scale)));
        }
        Ok(())
    }

    pub fn views(&self) -> &[View] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Position of the identity view, if present.
    pub fn identity_index(&self) -> Option<usize> {
        self.0.iter().position(|v| *v == View::IDENTITY)
    }
}

/// Rescale, then optionally flip.
pub fn apply_view(img: &Image, view: &View) -> Image {
    let (h, w) = view.output_dims(img.height(), img.width());
    let scaled = img.resize(h, w);
    if view.flip {
        scaled.hflip()
    } else {
        scaled
    }
}

/// Maps a prediction made under `view` back to the original frame.
pub fn invert_view(pred: &ProbMap, view: &View, height: usize, width: usize) -> ProbMap {
    if view.flip {
        resize_prob(&pred.hflip(), height, width)
    } else {
        resize_prob(pred, height, width)
    }
}

/// Model predictions for every view, each mapped back to the original
/// frame. Order follows the view set.
pub fn view_predictions(params: &HeadParams, img: &Image, views: &ViewSet) -> Result<Vec<ProbMap>> {
    views.validate()?;
    let run = |v: &View| -> Result<ProbMap> {
        let p = forward(params, &extract_features(&apply_view(img, v)))?;
        Ok(invert_view(&p, v, img.height(), img.width()))
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        views.views().par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        views.views().iter().map(run).collect()
    }
}

/// Elementwise mean of maps accumulated left to right, then renormalized.
/// A single map is returned unchanged.
pub fn mean_prediction(preds: &[ProbMap]) -> Result<ProbMap> {
    let first = preds
        .first()
        .ok_or_else(|| Error::InvalidParameter("no predictions to average".into()))?;
    if preds.iter().any(|p| !p.same_shape(first)) {
        return Err(Error::Shape("view predictions differ in shape".into()));
    }
    if preds.len() == 1 {
        return Ok(first.clone());
    }
    let mut acc = Grid::zeros(first.height(), first.width(), first.classes());
    for p in preds {
        for (a, v) in acc.data_mut().iter_mut().zip(p.grid().data()) {
            *a += v;
        }
    }
    let n = preds.len() as f64;
    for a in acc.data_mut() {
        *a /= n;
    }
    renormalize(&mut acc);
    Ok(ProbMap::from_grid_unchecked(acc))
}

/// Teacher prediction averaged over augmentation views.
pub fn aug_mean_prediction(teacher: &HeadParams, img: &Image, views: &ViewSet) -> Result<ProbMap> {
    mean_prediction(&view_predictions(teacher, img, views)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::PROB_SUM_TOL;
    use crate::model::FEATURES;
    use crate::scenes::{generate_scene, SceneSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_scene(h: usize, w: usize) -> Image {
        generate_scene(&SceneSpec {
            height: h,
            width: w,
            ..Default::default()
        })
        .unwrap()
        .0
    }

    #[test]
    fn default_view_set_has_fourteen_views() {
        let v = ViewSet::default();
        assert_eq!(v.len(), 14);
        assert!(v.views().iter().all(|x| x.scale > 0.0));
        assert_eq!(v.identity_index(), Some(4));
        assert!(ViewSet::new(vec![]).is_err());
        assert!(ViewSet::new(vec![View { scale: 0.0, flip: false }]).is_err());
    }

    #[test]
    fn apply_view_examples() {
        let img = small_scene(64, 96);
        assert_eq!(apply_view(&img, &View::IDENTITY), img);
        let flip = View { scale: 1.0, flip: true };
        assert_eq!(apply_view(&apply_view(&img, &flip), &flip), img);
        let half = apply_view(&img, &View { scale: 0.5, flip: false });
        assert_eq!((half.height(), half.width()), (32, 48));
    }

    #[test]
    fn invert_view_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = HeadParams::init(FEATURES, 6, 3, &mut rng);
        let img = small_scene(10, 12);
        let pred = forward(&params, &extract_features(&img)).unwrap();
        assert_eq!(invert_view(&pred, &View::IDENTITY, 10, 12), pred);
        let flip = View { scale: 1.0, flip: true };
        assert_eq!(invert_view(&pred, &flip, 10, 12), pred.hflip());

        let constant = ProbMap::from_grid(Grid::filled(5, 7, 4, 0.25)).unwrap();
        for v in ViewSet::default().views() {
            let (h, w) = v.output_dims(5, 7);
            let scaled = ProbMap::from_grid(Grid::filled(h, w, 4, 0.25)).unwrap();
            let back = invert_view(&scaled, v, 5, 7);
            for (a, b) in back.grid().data().iter().zip(constant.grid().data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_identity_view_is_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = HeadParams::init(FEATURES, 6, 4, &mut rng);
        let img = small_scene(12, 16);
        let plain = forward(&params, &extract_features(&img)).unwrap();
        assert_eq!(aug_mean_prediction(&params, &img, &ViewSet::identity()).unwrap(), plain);
    }

    #[test]
    fn zero_teacher_is_uniform_under_all_views() {
        let img = small_scene(12, 16);
        let p = aug_mean_prediction(&HeadParams::zeros(FEATURES, 4, 5), &img, &ViewSet::default()).unwrap();
        assert!(p.grid().data().iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn three_views_match_brute_force_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = HeadParams::init(FEATURES, 6, 3, &mut rng);
        let img = small_scene(8, 8).resize(4, 4);
        let views = ViewSet::new(vec![
            View { scale: 0.5, flip: true },
            View { scale: 1.0, flip: false },
            View { scale: 2.0, flip: true },
        ])
        .unwrap();
        let got = aug_mean_prediction(&params, &img, &views).unwrap();

        // Oracle: recompute each view by hand with explicit loops.
        let mut expect = vec![0.0; 4 * 4 * 3];
        for v in views.views() {
            let (h, w) = v.output_dims(4, 4);
            let mut viewed = img.resize(h, w);
            if v.flip {
                viewed = viewed.hflip();
            }
            let mut pred = forward(&params, &extract_features(&viewed)).unwrap();
            if v.flip {
                pred = pred.hflip();
            }
            let back = resize_prob(&pred, 4, 4);
            for (e, x) in expect.iter_mut().zip(back.grid().data()) {
                *e += x / 3.0;
            }
        }
        for (g, e) in got.grid().data().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
        assert!(got.max_sum_error() <= PROB_SUM_TOL);
    }

    #[test]
    fn mean_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = HeadParams::init(FEATURES, 6, 3, &mut rng);
        let img = small_scene(10, 14);
        let preds = view_predictions(&params, &img, &ViewSet::default()).unwrap();
        let a = mean_prediction(&preds).unwrap();
        let mut rev = preds.clone();
        rev.reverse();
        let b = mean_prediction(&rev).unwrap();
        for (x, y) in a.grid().data().iter().zip(b.grid().data()) {
            assert!((x - y).abs() < 1e-14);
        }
        assert_eq!(a, mean_prediction(&preds).unwrap());
    }
}
