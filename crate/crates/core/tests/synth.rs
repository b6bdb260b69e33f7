use proptest::prelude::*;
use ucorr_core::synth::{
    augment, centroid_x, flight_poses, generate_flight, generate_sample, resize_nni, wire_pixel_rate,
    AugmentationConfig, Image, Pose, Scene, SceneConfig,
};

fn spanned() -> SceneConfig {
    SceneConfig {
        wire_count: [2, 3],
        wire_depth: [8.0, 30.0],
        wire_sag: [0.0, 0.5],
        wire_span: Some([3.0, 6.0]),
        ..SceneConfig::default()
    }
}

fn shifted(b: f64) -> Pose {
    Pose {
        position: [b, 0.0, 0.0],
        ..Pose::default()
    }
}

#[test]
fn same_seed_same_bytes() {
    let cfg = SceneConfig::default();
    for seed in [0, 1, 99] {
        assert_eq!(generate_sample(&cfg, seed).unwrap(), generate_sample(&cfg, seed).unwrap());
    }
    assert_ne!(generate_sample(&cfg, 1).unwrap(), generate_sample(&cfg, 2).unwrap());
}

/// Per-wire horizontal shift of the anti-aliased coverage between the
/// origin pose and a pose `b` meters to the right, for wires with at least
/// 16 mask pixels in both views.
fn measured_shifts(scene: &Scene, b: f64) -> Vec<(f64, f64)> {
    let visible = |m: &Image| m.data.iter().filter(|&&v| v == 1.0).count() >= 16;
    (0..scene.wires.len())
        .filter(|&i| visible(&scene.wire_mask(i, &Pose::default())) && visible(&scene.wire_mask(i, &shifted(b))))
        .map(|i| {
            let c0 = centroid_x(&scene.wire_coverage(i, &Pose::default())).unwrap();
            let c1 = centroid_x(&scene.wire_coverage(i, &shifted(b))).unwrap();
            (scene.wires[i].depth, c0 - c1)
        })
        .collect()
}

#[test]
fn rendered_shift_matches_pinhole_parallax() {
    let cfg = spanned();
    let f = cfg.focal_px();
    let b = 0.5;
    let mut checked = 0;
    for seed in 0..20 {
        let scene = Scene::generate(&cfg, seed).unwrap();
        for (z, shift) in measured_shifts(&scene, b) {
            let expected = f * b / z;
            assert!((shift - expected).abs() < 0.5, "seed {seed}: {shift} vs {expected}");
            checked += 1;
        }
    }
    assert!(checked >= 20, "{checked}");
}

#[test]
fn parallax_decreases_with_depth() {
    // same world scenes rendered 8x finer, so sub-pixel differences resolve
    let cfg = SceneConfig {
        height: 512,
        width: 512,
        ..spanned()
    };
    let mut pairs = 0;
    for seed in 0..20 {
        let scene = Scene::generate(&cfg, seed).unwrap();
        let mut shifts = measured_shifts(&scene, 0.5);
        shifts.sort_by(|a, b| a.0.total_cmp(&b.0));
        for pair in shifts.windows(2) {
            assert!(pair[0].0 < pair[1].0);
            assert!(pair[0].1 > pair[1].1, "seed {seed}: {pair:?}");
            pairs += 1;
        }
    }
    assert!(pairs >= 10, "{pairs}");
}

#[test]
fn depth_bounded_and_wire_pixels_take_wire_depth() {
    let cfg = SceneConfig::default();
    for seed in 0..10 {
        let scene = Scene::generate(&cfg, seed).unwrap();
        let view = scene.render(&Pose::default());
        let wire_depths: Vec<f32> = scene.wires.iter().map(|w| w.depth as f32).collect();
        for (m, d) in view.wire_mask.data.iter().zip(&view.depth.data) {
            assert!(d.is_finite() && *d > 0.0 && *d <= cfg.far_plane);
            if *m == 1.0 {
                assert!(wire_depths.contains(d));
            }
        }
    }
}

#[test]
fn default_wire_rate_in_band() {
    let cfg = SceneConfig::default();
    let flights: Vec<_> = (0..20).map(|s| generate_flight(&cfg, s, 4).unwrap()).collect();
    let rate = wire_pixel_rate(flights.iter().flat_map(|f| f.views.iter().map(|v| &v.wire_mask)));
    assert!((0.001..=0.05).contains(&rate), "{rate}");
}

#[test]
fn rotation_jitter_moves_frames() {
    let cfg = SceneConfig {
        rotation_jitter_deg: 1.0,
        translation: [0.0; 3],
        ..SceneConfig::default()
    };
    let poses = flight_poses(&cfg, 4, 3);
    assert_ne!(poses[0].pan_px, poses[1].pan_px);
}

fn arb_mask() -> impl Strategy<Value = Image> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        proptest::collection::vec(prop_oneof![Just(0.0f32), Just(1.0f32)], h * w)
            .prop_map(move |d| Image::new(h, w, 1, d).unwrap())
    })
}

proptest! {
    #[test]
    fn resize_preserves_value_set(m in arb_mask(), th in 1usize..20, tw in 1usize..20) {
        let r = resize_nni(&m, th, tw).unwrap();
        prop_assert_eq!((r.height, r.width), (th, tw));
        prop_assert!(r.data.iter().all(|v| m.data.contains(v)));
    }

    #[test]
    fn photometric_keeps_wire_count(seed in 0u64..1000) {
        let s = generate_sample(&SceneConfig::default(), seed % 7).unwrap();
        let a = augment(&s, &AugmentationConfig::photometric_only(), seed);
        prop_assert_eq!(&a.wire_mask, &s.wire_mask);
        prop_assert_eq!(&a.depth, &s.depth);
    }

    #[test]
    fn flips_keep_wire_count(seed in 0u64..1000) {
        let s = generate_sample(&SceneConfig::default(), seed % 7).unwrap();
        let a = augment(&s, &AugmentationConfig::always(), seed);
        let count = |m: &Image| m.data.iter().filter(|&&v| v == 1.0).count();
        prop_assert_eq!(count(&a.wire_mask), count(&s.wire_mask));
    }
}
