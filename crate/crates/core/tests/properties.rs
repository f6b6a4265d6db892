use proptest::prelude::*;
use refgen_core::config::RunConfig;
use refgen_core::eval::color_distance;
use refgen_core::geometry::{decode_coord, encode_coord, Image};
use refgen_core::model::{patchify, unpatchify};
use refgen_core::sampling::pointmap_to_coords;

fn image(max_side: usize) -> impl Strategy<Value = Image> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(gw, gh)| {
        let (w, h) = (gw * 2, gh * 2);
        prop::collection::vec(0.0f32..=1.0, w * h * 3).prop_map(move |d| Image::new(w, h, d).unwrap())
    })
}

proptest! {
    #[test]
    fn coordinate_encoding_round_trips(c in -0.5f64..=0.5) {
        let e = encode_coord(c);
        prop_assert!((0.05..=0.95).contains(&e));
        prop_assert!((decode_coord(e) - c).abs() < 1e-6);
    }

    #[test]
    fn encoded_surface_is_foreground(c in prop::array::uniform3(-0.5f64..=0.5)) {
        let mut img = Image::filled(2, 1, 0.0);
        img.set_pixel(1, 0, c.map(encode_coord));
        let fg = pointmap_to_coords(&img);
        prop_assert_eq!(fg.len(), 1);
        prop_assert_eq!(fg[0].0, 1);
    }

    #[test]
    fn patchify_inverts(img in image(4)) {
        let t = patchify(&img, 2).unwrap();
        let back = unpatchify(&t, img.width, img.height, 2).unwrap();
        for (a, b) in back.data.iter().zip(&img.data) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn color_distance_ignores_uniform_shading(
        c in prop::array::uniform3(0.05f32..=1.0),
        k in 0.3f32..=1.0,
    ) {
        prop_assert!(color_distance(c, c.map(|v| v * k)) < 1e-5);
        prop_assert!((color_distance(c, [0.5, 0.2, 0.9]) - color_distance([0.5, 0.2, 0.9], c)).abs() < 1e-12);
    }

    #[test]
    fn integer_overrides_round_trip(steps in 1usize..100_000, seed in any::<u32>()) {
        let mut cfg = RunConfig::default();
        cfg.apply_override(&format!("train.steps={steps}")).unwrap();
        cfg.apply_override(&format!("sample.seed={seed}")).unwrap();
        prop_assert_eq!(cfg.train.steps, steps);
        prop_assert_eq!(cfg.sample.seed, seed as u64);
        prop_assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    }
}
