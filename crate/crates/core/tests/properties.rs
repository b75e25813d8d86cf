mod common;

use aufer_core::au::AuMapBuilder;
use aufer_core::cam::{self, CamMethod};
use aufer_core::metrics;
use aufer_core::model::{ModelConfig, ModelState, StageConfig};
use aufer_core::synth::{canonical_landmarks, expression_names, generate, SynthConfig};
use aufer_core::tensor::{cosine_similarity, Graph, Tensor, COSINE_EPS};
use aufer_core::train::{fit, TrainConfig};
use proptest::prelude::*;

fn small_model(seed: u64) -> ModelState {
    ModelState::init(ModelConfig {
        input_size: (12, 12, 1),
        stages: vec![StageConfig::new(3, 1, false), StageConfig::new(5, 1, true)],
        classes: 4,
        attention_layer: 2,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn image_from(values: &[f64]) -> Tensor {
    Tensor::new(vec![1, 12, 12], values.to_vec()).unwrap()
}

fn map_cosine(a: &[f64], b: &[f64]) -> f64 {
    cosine_similarity(a, b, COSINE_EPS)
}

fn graph_cosine(t: &[f64], a: &[f64]) -> f64 {
    let mut g = Graph::new();
    let n = t.len();
    let tv = g.constant(Tensor::new(vec![1, n], t.to_vec()).unwrap());
    let av = g.constant(Tensor::new(vec![1, n], a.to_vec()).unwrap());
    let r = g.cosine_sim_map(tv, av, COSINE_EPS).unwrap();
    g.value(r).item().unwrap()
}

#[test]
fn gradients_match_finite_differences() {
    for (op, worst) in common::gradient_suite(20, 1000) {
        assert!(worst < 1e-4, "{op}: worst relative error {worst:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn cosine_is_scale_invariant(
        pairs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 4..32),
        alpha in 0.01f64..100.0,
        beta in 0.01f64..100.0,
    ) {
        let (t, a): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assume!(t.iter().any(|v| v.abs() > 1e-3) && a.iter().any(|v| v.abs() > 1e-3));
        let ts: Vec<f64> = t.iter().map(|v| alpha * v).collect();
        let as_: Vec<f64> = a.iter().map(|v| beta * v).collect();
        prop_assert!((graph_cosine(&ts, &as_) - graph_cosine(&t, &a)).abs() < 1e-10);
    }

    #[test]
    fn cosine_stays_in_range(pairs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..32)) {
        let (t, a): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let r = graph_cosine(&t, &a);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        let tn: Vec<f64> = t.iter().map(|v| v.abs()).collect();
        let an: Vec<f64> = a.iter().map(|v| v.abs()).collect();
        prop_assert!(graph_cosine(&tn, &an) >= -1e-12);
    }

    #[test]
    fn channel_mean_is_linear(
        f in prop::collection::vec(-1.0f64..1.0, 3 * 16),
        h in prop::collection::vec(-1.0f64..1.0, 3 * 16),
    ) {
        let mean = |v: &[f64]| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![3, 4, 4], v.to_vec()).unwrap());
            let m = g.channel_mean(x).unwrap();
            g.value(m).data().to_vec()
        };
        let sum: Vec<f64> = f.iter().zip(&h).map(|(a, b)| a + b).collect();
        let lhs = mean(&sum);
        let (mf, mh) = (mean(&f), mean(&h));
        for i in 0..16 {
            prop_assert!((lhs[i] - (mf[i] + mh[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_and_gradients_are_deterministic(
        seed in 0u64..1000,
        pixels in prop::collection::vec(0.0f64..1.0, 144),
        y in 0usize..4,
    ) {
        let image = image_from(&pixels);
        let run = || {
            let m = small_model(seed);
            let pass = m.forward(&image).unwrap();
            let (_, grads) = cam::layer_gradients(&m, &image, y, 2).unwrap();
            (pass.logits, grads)
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        prop_assert_eq!(l1.data(), l2.data());
        prop_assert_eq!(g1.data(), g2.data());
    }

    #[test]
    fn extractors_return_unit_range_maps_without_side_effects(
        seed in 0u64..1000,
        pixels in prop::collection::vec(0.0f64..1.0, 144),
        y in 0usize..4,
    ) {
        let m = small_model(seed);
        let before = m.to_bytes();
        let image = image_from(&pixels);
        for method in CamMethod::ALL {
            let map = cam::extract(&m, &image, y, 2, method).unwrap();
            prop_assert_eq!((map.h, map.w), (6, 6));
            prop_assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
            let max = map.values.iter().copied().fold(0.0f64, f64::max);
            prop_assert!(map.is_zero() || (max - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(before, m.to_bytes());
    }

    #[test]
    fn extractors_ignore_positive_head_scaling(
        seed in 0u64..1000,
        pixels in prop::collection::vec(0.0f64..1.0, 144),
        y in 0usize..4,
        alpha in 0.05f64..20.0,
    ) {
        let m = small_model(seed);
        let mut scaled = m.clone();
        let w = scaled.param_mut("head.weight").unwrap();
        let cols = w.shape()[1];
        for v in &mut w.data_mut()[y * cols..(y + 1) * cols] {
            *v *= alpha;
        }
        let image = image_from(&pixels);
        // GradCAM++ weights mix g^2 and g^3 terms, so they are not homogeneous
        // in the gradient scale.
        for method in [CamMethod::Cam, CamMethod::GradCam, CamMethod::LayerCam] {
            let a = cam::extract(&m, &image, y, 2, method).unwrap();
            let b = cam::extract(&scaled, &image, y, 2, method).unwrap();
            for (u, v) in a.values.iter().zip(&b.values) {
                prop_assert!((u - v).abs() < 1e-9, "{}: {} vs {}", method, u, v);
            }
        }
    }

    #[test]
    fn au_maps_are_normalized_for_every_class(
        seed in 0u64..1000,
        noise in prop::collection::vec((-0.01f64..0.01, -0.01f64..0.01), 68),
    ) {
        let classes = expression_names();
        let builder = AuMapBuilder::with_defaults(&classes, (64, 64), (16, 16)).unwrap();
        let base = canonical_landmarks();
        let pts = base
            .points()
            .iter()
            .zip(&noise)
            .map(|(p, (dx, dy))| aufer_core::au::Point::new(p.x + dx, p.y + dy))
            .collect();
        let lm = aufer_core::au::LandmarkSet::new(pts).unwrap();
        let label = seed as usize % classes.len();
        for map in [builder.build_full(&lm, label).unwrap(), builder.build(&lm, label).unwrap()] {
            prop_assert!(map.values().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(map.max(), 1.0);
        }
        prop_assert_eq!(builder.build(&lm, label).unwrap(), builder.build(&lm, label).unwrap());
    }

    #[test]
    fn au_map_argmax_follows_translation(
        label in 0usize..6,
        dx in -4i32..=4,
        dy in -4i32..=4,
    ) {
        let classes = expression_names();
        let builder = AuMapBuilder::with_defaults(&classes, (64, 64), (64, 64)).unwrap();
        let base = canonical_landmarks();
        let moved = base.translated(dx as f64 / 64.0, dy as f64 / 64.0);
        let (r0, c0) = builder.build_full(&base, label).unwrap().argmax();
        let (r1, c1) = builder.build_full(&moved, label).unwrap().argmax();
        prop_assert!((r1 as i32 - r0 as i32 - dy).abs() <= 1);
        prop_assert!((c1 as i32 - c0 as i32 - dx).abs() <= 1);
    }
}

#[test]
fn gradcam_equals_cam_on_gap_heads() {
    for seed in 0..20 {
        let m = small_model(seed);
        let pixels: Vec<f64> = (0..144).map(|i| ((i * 37 + seed as usize * 11) % 101) as f64 / 101.0).collect();
        let image = image_from(&pixels);
        for y in 0..4 {
            let a = cam::extract(&m, &image, y, 2, CamMethod::Cam).unwrap();
            let b = cam::extract(&m, &image, y, 2, CamMethod::GradCam).unwrap();
            if a.is_zero() && b.is_zero() {
                continue;
            }
            let r = map_cosine(&a.values, &b.values);
            assert!((r - 1.0).abs() < 1e-6, "seed {seed} class {y}: cosine {r}");
        }
    }
}

#[test]
fn stronger_alignment_does_not_lower_final_r() {
    let data = generate(&SynthConfig {
        samples_per_class: 6,
        image_size: (32, 32),
        split: (0.67, 0.17),
        seed: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let config = ModelConfig {
        input_size: (32, 32, 1),
        stages: vec![StageConfig::new(4, 1, true), StageConfig::new(8, 1, true)],
        attention_layer: 2,
        seed: 4,
        ..ModelConfig::default()
    };
    let builder = AuMapBuilder::with_defaults(&data.train.classes, (32, 32), (32, 32)).unwrap();
    let final_r = |lambda: f64| {
        let mut m = ModelState::init(config.clone()).unwrap();
        let cfg = TrainConfig {
            lambda,
            lr: 0.01,
            epochs: 4,
            batch_size: 4,
            attention_layer: 2,
            seed: 4,
            ..TrainConfig::default()
        };
        fit(&mut m, &data.train, &data.val, &cfg, Some(&builder)).unwrap();
        let target = builder.with_target((8, 8)).unwrap();
        metrics::att_cos(&m, &data.train, 2, &target).unwrap()
    };
    let (r0, r100) = (final_r(0.0), final_r(100.0));
    assert!(r100 >= r0, "lambda=100 gave R {r100}, lambda=0 gave {r0}");
}

#[test]
fn evaluation_leaves_the_model_unchanged_and_scores_in_unit_range() {
    let data = generate(&SynthConfig {
        samples_per_class: 4,
        image_size: (32, 32),
        split: (0.5, 0.25),
        seed: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let m = ModelState::init(ModelConfig {
        input_size: (32, 32, 1),
        stages: vec![StageConfig::new(4, 1, true), StageConfig::new(6, 1, true)],
        attention_layer: 2,
        seed: 9,
        ..ModelConfig::default()
    })
    .unwrap();
    let before = m.to_bytes();
    let builder = AuMapBuilder::with_defaults(&data.test.classes, (32, 32), (32, 32)).unwrap();
    let report = metrics::evaluate(&m, &data.test, 2, &builder, &CamMethod::ALL, false).unwrap();
    assert_eq!(before, m.to_bytes());
    assert_eq!(report.n_samples, data.test.len());
    for v in report.cam_cos.values().chain([&report.att_cos, &report.cl]) {
        assert!((0.0..=1.0).contains(v), "{v}");
    }
}
