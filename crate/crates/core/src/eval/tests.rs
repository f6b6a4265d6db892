use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{generate_dataset, DatasetConfig};

fn noise(seed: u64, w: usize, h: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(w, h, (0..w * h * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn samples(n: usize) -> Vec<TrainingSample> {
    generate_dataset(&DatasetConfig {
        count: n,
        views: 4,
        seed: 3,
        ..DatasetConfig::default()
    })
    .unwrap()
}

#[test]
fn self_match_finds_every_probe() {
    let img = noise(1, 32, 32);
    let probes = gradient_probes(&img, 64);
    assert_eq!(probes.len(), 64);
    assert_eq!(correspondence_count(&img, &img, 64, 0.9), 64);
    for m in best_matches(&img, &img, &probes) {
        assert_eq!(m.best, m.probe);
        assert!((m.ncc - 1.0).abs() < 1e-9);
    }
}

#[test]
fn independent_noise_has_almost_no_matches() {
    let n = correspondence_count(&noise(1, 32, 32), &noise(2, 32, 32), 64, 0.9);
    assert!(n <= 2, "{n} chance matches");
}

#[test]
fn ncc_matches_brute_force_pearson() {
    let (a, b) = (noise(5, 16, 16), noise(6, 16, 16));
    let gray = |img: &Image, x: usize, y: usize| {
        let p = img.pixel(x, y);
        0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
    };
    let corr = |px: usize, py: usize, qx: usize, qy: usize| {
        let mut u = vec![];
        let mut v = vec![];
        for dy in 0..PATCH {
            for dx in 0..PATCH {
                u.push(gray(&a, px + dx - 3, py + dy - 3));
                v.push(gray(&b, qx + dx - 3, qy + dy - 3));
            }
        }
        let n = u.len() as f64;
        let (mu, mv) = (u.iter().sum::<f64>() / n, v.iter().sum::<f64>() / n);
        let cov: f64 = u.iter().zip(&v).map(|(x, y)| (x - mu) * (y - mv)).sum();
        let su = u.iter().map(|x| (x - mu).powi(2)).sum::<f64>().sqrt();
        let sv = v.iter().map(|y| (y - mv).powi(2)).sum::<f64>().sqrt();
        cov / (su * sv)
    };
    let probes = [(3, 3), (8, 5), (12, 12)];
    for m in best_matches(&a, &b, &probes) {
        let mut best = -1.0f64;
        for qy in 3..13 {
            for qx in 3..13 {
                best = best.max(corr(m.probe.0, m.probe.1, qx, qy));
            }
        }
        assert!((m.ncc - best).abs() < 1e-9, "{} vs {best}", m.ncc);
        assert!((corr(m.probe.0, m.probe.1, m.best.0, m.best.1) - m.ncc).abs() < 1e-9);
    }
}

#[test]
fn ground_truth_is_aligned_and_gray_is_not() {
    for s in samples(4) {
        let score = alignment_score(&s.target_rgb, &s.target_pointmap, &s.views, 0.15).unwrap();
        assert!(score > 0.95, "ground truth alignment {score}");
        let gray = Image::filled(s.target_rgb.width, s.target_rgb.height, 0.5);
        let g = alignment_score(&gray, &s.target_pointmap, &s.views, 0.15).unwrap();
        assert!(g < score - 0.3, "gray alignment {g} vs {score}");
    }
}

#[test]
fn empty_pointmap_is_an_error() {
    let s = &samples(1)[0];
    let blank = Image::filled(32, 32, 0.0);
    assert!(matches!(
        alignment_score(&s.target_rgb, &blank, &s.views, 0.15),
        Err(Error::EmptyForeground)
    ));
}

#[test]
fn masked_mse_ignores_unmasked_pixels() {
    let a = Image::filled(2, 1, 0.0);
    let mut b = Image::filled(2, 1, 0.0);
    b.set_pixel(1, 0, [1.0, 1.0, 1.0]);
    b.set_pixel(0, 0, [0.5, 0.0, 0.0]);
    assert!((masked_mse(&a, &b, &[true, false]) - 0.25 / 3.0).abs() < 1e-12);
    assert_eq!(masked_mse(&a, &b, &[false, false]), 0.0);
}

#[test]
fn report_aggregates_and_csv() {
    let row = |i, rgb, al| EvalRow {
        index: i,
        asset_id: 7,
        caption: 1,
        rgb_mse: rgb,
        pm_mse: None,
        alignment: Some(al),
        correspondences: i,
        probes: 4,
    };
    let r = EvalReport {
        label: "x".into(),
        rows: vec![row(0, 1.0, 0.5), row(1, 2.0, 0.7), row(2, 6.0, 0.9)],
    };
    assert_eq!(r.rgb_mse().unwrap(), Aggregate { mean: 3.0, median: 2.0 });
    assert!(r.pm_mse().is_none());
    assert!(r.all_finite());
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().nth(4).unwrap().starts_with("mean,,,3.000000,,0.700000,1.000000"));
}

#[test]
fn contact_sheet_layout() {
    let a = Image::filled(4, 3, 0.0);
    let sheet = contact_sheet(&[vec![&a, &a], vec![&a]]).unwrap();
    assert_eq!((sheet.width, sheet.height), (2 * 4 + 3 * 2, 2 * 3 + 3 * 2));
    assert_eq!(sheet.pixel(2, 2), [0.0; 3]);
    assert_eq!(sheet.pixel(8, 5), [1.0; 3]);
}

#[test]
fn variants_parse_and_differ_in_one_key() {
    let base = crate::model::ModelConfig::default();
    for v in Variant::ALL {
        assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        let diff = config_diff(&base, &v.apply(&base));
        match v {
            Variant::Full | Variant::Views(4) => assert!(diff.is_empty()),
            _ => assert_eq!(diff.len(), 1, "{v}: {diff:?}"),
        }
    }
    assert!("views-0".parse::<Variant>().is_err());
    assert!("bogus".parse::<Variant>().is_err());
}
