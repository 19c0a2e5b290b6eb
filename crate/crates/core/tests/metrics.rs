use diffcolor::guidance::{cosine, GuidanceBackend, ToyGuidance, ToyGuidanceConfig};
use diffcolor::metrics::*;
use diffcolor::{ColorImage, Error, Rng};
use nalgebra::{DMatrix, DVector};

fn pattern() -> ColorImage {
    ColorImage::from_fn(24, 20, |x, y| {
        let v = |c: f64| 0.5 + 0.3 * (0.7 * x as f64 + c).sin() * (0.45 * y as f64).cos();
        [v(0.0), v(1.0), v(2.0)]
    })
    .unwrap()
}

fn random(seed: u64, w: usize, h: usize) -> ColorImage {
    let mut rng = Rng::new(seed);
    ColorImage::from_fn(w, h, |_, _| [rng.uniform(), rng.uniform(), rng.uniform()]).unwrap()
}

#[test]
fn psnr_matches_brute_force_mse() {
    for seed in 0..5 {
        let (a, b) = (random(seed, 13, 9), random(seed + 100, 13, 9));
        let mut sum = 0.0;
        for y in 0..9 {
            for x in 0..13 {
                let (p, q) = (a.get(x, y), b.get(x, y));
                for c in 0..3 {
                    sum += (p[c] - q[c]).powi(2);
                }
            }
        }
        let oracle = 10.0 * (1.0 / (sum / (13.0 * 9.0 * 3.0))).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - oracle).abs() < 1e-9);
    }
}

#[test]
fn psnr_uniform_half_difference() {
    let a = ColorImage::filled(16, 16, [0.0; 3]).unwrap();
    let b = ColorImage::filled(16, 16, [0.5; 3]).unwrap();
    assert!((psnr(&a, &b, 1.0).unwrap() - 6.0206).abs() < 1e-3);
}

#[test]
fn psnr_decreases_with_noise_amplitude() {
    let base = ColorImage::filled(16, 16, [0.5; 3]).unwrap();
    let mut prev = f64::INFINITY;
    for k in 1..8 {
        let amp = 0.05 * k as f64;
        let mut rng = Rng::new(3);
        let noisy = ColorImage::from_fn(16, 16, |_, _| {
            let s = if rng.uniform() < 0.5 { -amp } else { amp };
            [0.5 + s; 3]
        })
        .unwrap();
        let p = psnr(&base, &noisy, 1.0).unwrap();
        assert!(p < prev);
        prev = p;
    }
}

// Reference values from scikit-image 0.25 `structural_similarity(a, b,
// gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
// data_range=1.0, channel_axis=2)` on the same arrays.
#[test]
fn ssim_matches_reference_implementation() {
    let a = pattern();
    let neg = ColorImage::from_fn(24, 20, |x, y| a.get(x, y).map(|v| 1.0 - v)).unwrap();
    assert!((ssim(&a, &neg).unwrap() - (-0.910_596_527_306_366_2)).abs() < 1e-9);

    let (w, h) = (24, 20);
    let b = ColorImage::from_fn(w, h, |x, y| {
        let p = a.get(x, y);
        let k = |c: usize| ((y * w + x) * 3 + c) as f64;
        [0, 1, 2].map(|c| (p[c] + 0.1 * (3.1 * k(c)).sin()).clamp(0.0, 1.0))
    })
    .unwrap();
    assert!((ssim(&a, &b).unwrap() - 0.918_685_085_669_183_7).abs() < 1e-9);
}

#[test]
fn ssim_identity_symmetry_bounds() {
    let (a, b) = (random(1, 16, 16), random(2, 16, 16));
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    assert!((ab - ba).abs() < 1e-15);
    assert!((-1.0..=1.0).contains(&ab));
}

#[test]
fn lpips_toy_matches_hand_computed_features() {
    let g = ToyGuidance::new(ToyGuidanceConfig::default()).unwrap();
    let f = ToyFeatures::new(g.clone());
    let (a, b) = (random(5, 16, 16), random(6, 16, 16));
    let fa = f.extract(&a).unwrap();
    // first tile by hand
    let tile = ColorImage::from_fn(8, 8, |x, y| a.get(x, y)).unwrap();
    assert_eq!(&fa[..13], g.image_features(&tile).as_slice());

    let fb = f.extract(&b).unwrap();
    let mut total = 0.0;
    for k in 0..4 {
        let (pa, pb) = (&fa[13 * k..13 * (k + 1)], &fb[13 * k..13 * (k + 1)]);
        let (na, nb) = (pa.iter().map(|v| v * v).sum::<f64>().sqrt(), pb.iter().map(|v| v * v).sum::<f64>().sqrt());
        total += pa.iter().zip(pb).map(|(x, y)| (x / na - y / nb).powi(2)).sum::<f64>();
    }
    assert!((lpips_like(&a, &b, &f).unwrap() - total / 4.0).abs() < 1e-12);
}

#[test]
fn fid_sampled_unit_shift() {
    let mut rng = Rng::new(11);
    let a: Vec<Vec<f64>> = (0..100_000).map(|_| vec![rng.normal()]).collect();
    let b: Vec<Vec<f64>> = (0..100_000).map(|_| vec![1.0 + rng.normal()]).collect();
    let d = fid(&a, &b).unwrap();
    assert!((d - 1.0).abs() < 0.02, "{d}");
}

#[test]
fn fid_moment_fed_closed_forms() {
    let m = |mean: f64, var: f64| Moments { mean: DVector::from_element(1, mean), cov: DMatrix::from_element(1, 1, var) };
    assert_eq!(fid_from_moments(&m(0.0, 1.0), &m(0.0, 4.0)).unwrap(), 1.0);
    assert_eq!(fid_from_moments(&m(2.0, 9.0), &m(2.0, 9.0)).unwrap(), 0.0);
    // diagonal 2-D: sum of per-axis 1-D distances
    let d2 = Moments { mean: DVector::from_vec(vec![0.0, 0.0]), cov: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 9.0])) };
    let e2 = Moments { mean: DVector::from_vec(vec![3.0, 0.0]), cov: DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])) };
    let expected = 9.0 + (1.0 + 4.0 - 4.0) + (9.0 + 1.0 - 6.0);
    assert!((fid_from_moments(&d2, &e2).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn fid_ignores_sample_order() {
    let mut rng = Rng::new(4);
    let a: Vec<Vec<f64>> = (0..40).map(|_| rng.normal_vec(3)).collect();
    let b: Vec<Vec<f64>> = (0..40).map(|_| rng.normal_vec(3).iter().map(|v| 0.5 * v + 0.2).collect()).collect();
    let (mut ra, mut rb) = (a.clone(), b.clone());
    ra.reverse();
    rb.rotate_left(7);
    let (d, dr) = (fid(&a, &b).unwrap(), fid(&ra, &rb).unwrap());
    assert!(d >= 0.0 && (d - dr).abs() < 1e-9);
    assert!(fid(&a, &a).unwrap() < 1e-6);
}

#[test]
fn clip_score_matches_pairwise_oracle() {
    let g = ToyGuidance::new(ToyGuidanceConfig::default()).unwrap();
    let images: Vec<ColorImage> = (0..6).map(|i| random(20 + i, 12, 12)).collect();
    let prompts: Vec<String> =
        ["A red car.", "A blue sky.", "A green field.", "A gray photo.", "A pink flower.", "An orange cat."]
            .map(String::from)
            .to_vec();
    let mut oracle = 0.0;
    for (img, p) in images.iter().zip(&prompts) {
        let (ei, et) = (g.encode_image(img).unwrap(), g.encode_text(p));
        oracle += cosine(ei.as_slice(), et.as_slice()).unwrap().max(0.0);
    }
    oracle *= 100.0 / 6.0;
    let s = clip_score(&images, &prompts, &g).unwrap();
    assert!((s - oracle).abs() < 1e-6);
    assert!((0.0..=100.0).contains(&s));
}

fn write_set(dir: &std::path::Path, seed: u64, n: usize) {
    for i in 0..n {
        random(seed + i as u64, 16, 16).save(dir.join(format!("img{i}.png"))).unwrap();
    }
}

#[test]
fn report_self_comparison_and_ordering() {
    let refs = tempfile::tempdir().unwrap();
    let other = tempfile::tempdir().unwrap();
    write_set(refs.path(), 0, 4);
    write_set(other.path(), 1000, 4);
    let g = ToyGuidance::new(ToyGuidanceConfig::default()).unwrap();
    let f = ToyFeatures::new(g.clone());
    let cfg = ReportConfig::default();

    let same = run_report(refs.path(), refs.path(), None, &cfg, &f, &g).unwrap();
    let s = &same.summary;
    assert_eq!((s.psnr, s.ssim, s.lpips), (100.0, 1.0, 0.0));
    assert!(s.fid.unwrap() < 1e-6);

    let diff = run_report(other.path(), refs.path(), None, &cfg, &f, &g).unwrap();
    let d = &diff.summary;
    assert!(d.psnr < s.psnr && d.ssim < s.ssim && d.lpips > s.lpips && d.fid.unwrap() > s.fid.unwrap());

    let out = tempfile::tempdir().unwrap();
    let (csv_path, md_path) = diff.write(out.path(), "random").unwrap();
    let csv = std::fs::read_to_string(csv_path).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 + 1);
    assert!(csv.starts_with("file,fid,psnr,ssim,lpips,clip"));
    assert!(std::fs::read_to_string(md_path).unwrap().contains("| random |"));
}

#[test]
fn report_with_prompts_and_missing_pairs() {
    let refs = tempfile::tempdir().unwrap();
    let outs = tempfile::tempdir().unwrap();
    write_set(refs.path(), 0, 3);
    write_set(outs.path(), 50, 2);
    let g = ToyGuidance::new(ToyGuidanceConfig::default()).unwrap();
    let f = ToyFeatures::new(g.clone());
    let err = run_report(outs.path(), refs.path(), None, &ReportConfig::default(), &f, &g).unwrap_err();
    assert!(matches!(&err, Error::MissingPair(p) if p.ends_with("img2.png")), "{err}");

    write_set(outs.path(), 50, 3);
    let prompts = refs.path().join("prompts.json");
    std::fs::write(&prompts, r#"{"img0.png": "A red car.", "img1.png": "A blue sky.", "img2.png": "A green field."}"#)
        .unwrap();
    let r = run_report(outs.path(), refs.path(), Some(&prompts), &ReportConfig::default(), &f, &g).unwrap();
    assert!(r.rows.iter().all(|row| row.clip.is_some()));
    assert!(r.summary.clip.is_some());
}
