use cotica::augment::{aug_mean_prediction, View, ViewSet};
use cotica::grids::{argmax_conf, Grid, HFlip, Image, LabelMap, ProbMap};
use cotica::icat::{compute_thresholds, refine_pseudo_label, IcatConfig, IndexRule};
use cotica::model::{extract_features, forward, HeadParams, FEATURES};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(h: usize, w: usize, values: &[f64]) -> Image {
    let data = (0..h * w * 3).map(|i| values[i % values.len()]).collect();
    Image::new(h, w, data).unwrap()
}

fn params(seed: u64, classes: usize) -> HeadParams {
    HeadParams::init(FEATURES, 6, classes, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_rows_are_distributions(
        seed in 0u64..1000,
        classes in 2usize..7,
        values in prop::collection::vec(0.0f64..=1.0, 1..40),
    ) {
        let img = image(9, 11, &values);
        let p = forward(&params(seed, classes), &extract_features(&img)).unwrap();
        prop_assert!(p.max_sum_error() < 1e-12);
        prop_assert!(p.grid().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identity_view_set_returns_the_direct_prediction(
        seed in 0u64..1000,
        values in prop::collection::vec(0.0f64..=1.0, 1..40),
    ) {
        let img = image(8, 10, &values);
        let teacher = params(seed, 4);
        let direct = forward(&teacher, &extract_features(&img)).unwrap();
        prop_assert_eq!(aug_mean_prediction(&teacher, &img, &ViewSet::identity()).unwrap(), direct);
    }

    #[test]
    fn flip_only_views_average_to_a_distribution(
        seed in 0u64..1000,
        values in prop::collection::vec(0.0f64..=1.0, 1..40),
    ) {
        let img = image(8, 12, &values);
        let views = ViewSet::new(vec![View::IDENTITY, View { scale: 1.0, flip: true }]).unwrap();
        let mean = aug_mean_prediction(&params(seed, 3), &img, &views).unwrap();
        prop_assert!(mean.max_sum_error() < 1e-12);
    }

    #[test]
    fn cgrd_round_trip_and_flip_involution(
        h in 1usize..6,
        w in 1usize..6,
        c in 1usize..4,
        values in prop::collection::vec(-1e6f64..1e6, 1..20),
    ) {
        let data = (0..h * w * c).map(|i| values[i % values.len()]).collect();
        let g = Grid::new(h, w, c, data).unwrap();
        let mut buf = Vec::new();
        g.write_cgrd(&mut buf).unwrap();
        prop_assert_eq!(Grid::read_cgrd(buf.as_slice()).unwrap(), g.clone());
        prop_assert_eq!(g.hflip().hflip(), g);
    }

    #[test]
    fn thresholds_stay_between_base_and_instance_values(
        conf in prop::collection::vec(0.0f64..=1.0, 12),
        labels in prop::collection::vec(0u8..4, 12),
        tau0 in 0.0f64..=1.0,
        alpha in 0.0f64..1.0,
        beta in 0.0f64..=1.0,
        scaled_rank in any::<bool>(),
    ) {
        let pair = cotica::grids::ConfLabelPair { conf: conf.clone(), label: LabelMap::new(3, 4, labels.clone()).unwrap() };
        let cfg = IcatConfig {
            tau0,
            alpha,
            beta,
            index_rule: if scaled_rank { IndexRule::AlphaTau0 } else { IndexRule::Alpha },
            ..IcatConfig::default()
        };
        let (tau, phi, counts) = compute_thresholds(&pair, 4, &cfg);
        for c in 0..4 {
            prop_assert!(tau[c] >= tau0.min(phi[c]) && tau[c] <= tau0.max(phi[c]));
            if counts[c] == 0 {
                prop_assert_eq!(phi[c], tau0);
            } else {
                prop_assert!(conf.iter().zip(&labels).any(|(&v, &l)| l as usize == c && v == phi[c]));
            }
        }
    }

    #[test]
    fn kept_pixels_carry_the_teacher_prediction(
        seed in 0u64..500,
        values in prop::collection::vec(0.0f64..=1.0, 1..30),
        tau in prop::collection::vec(0.0f64..=1.0, 3),
    ) {
        let img = image(8, 8, &values);
        let feat = extract_features(&img);
        let teacher = forward(&params(seed, 3), &feat).unwrap();
        let other = ProbMap::uniform(8, 8, 3);
        let mask_conf = argmax_conf(&forward(&params(seed + 1, 3), &feat).unwrap());
        let r = refine_pseudo_label(&teacher, &other, &mask_conf, &tau).unwrap();
        for (i, keep) in r.mask.iter().enumerate() {
            let (row, col) = (i / 8, i % 8);
            let expect = if *keep { teacher.pixel(row, col) } else { other.pixel(row, col) };
            prop_assert_eq!(r.pseudo.pixel(row, col), expect);
            prop_assert_eq!(*keep, mask_conf.conf[i] >= tau[mask_conf.label.data()[i] as usize]);
        }
        prop_assert_eq!(r.mask_counts.iter().sum::<usize>(), 64);
    }
}
