mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ragdetect::degrade::{
    gaussian_blur, jpeg_decode, jpeg_degrade, jpeg_encode, mean_abs_laplacian, mse, Degradation, RasterImage, BLUR_SIGMAS,
    JPEG_QUALITIES,
};

fn natural() -> RasterImage {
    RasterImage::open(common::data_dir().join("data/natural.png")).unwrap()
}

/// Symmetric reflection with the edge pixel repeated: `… 1 0 | 0 1 …`.
fn mirror(i: i64, n: i64) -> i64 {
    let period = 2 * n;
    let m = i.rem_euclid(period);
    if m < n {
        m
    } else {
        period - 1 - m
    }
}

/// Direct 2-D convolution with the normalized Gaussian, rounded once.
fn dense_oracle(img: &RasterImage, sigma: f64) -> RasterImage {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k2 = Vec::new();
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let w = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            total += w;
            k2.push((dx, dy, w));
        }
    }
    let (w, h, c) = (img.width() as i64, img.height() as i64, img.channels());
    let mut out = Vec::with_capacity(img.pixels().len());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for &(dx, dy, k) in &k2 {
                    let sx = mirror(x + dx, w) as u32;
                    let sy = mirror(y + dy, h) as u32;
                    acc += k / total * f64::from(img.get(sx, sy, ch));
                }
                out.push(acc.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RasterImage::new(img.width(), img.height(), c, out).unwrap()
}

fn max_abs_diff(a: &RasterImage, b: &RasterImage) -> u8 {
    a.pixels().iter().zip(b.pixels()).map(|(x, y)| x.abs_diff(*y)).max().unwrap()
}

#[test]
fn blur_matches_dense_convolution_on_random_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for (i, sigma) in [0.5, 1.0, 2.0, 3.0].into_iter().enumerate() {
        let channels = if i % 2 == 0 { 3 } else { 1 };
        let (w, h) = (rng.random_range(3..20), rng.random_range(3..20));
        let px = (0..w * h * channels as u32).map(|_| rng.random::<u8>()).collect();
        let img = RasterImage::new(w, h, channels, px).unwrap();
        let d = max_abs_diff(&gaussian_blur(&img, sigma).unwrap(), &dense_oracle(&img, sigma));
        assert!(d <= 1, "sigma {sigma}: {d}");
    }
}

#[test]
fn blur_matches_oracle_on_natural_crop() {
    let img = natural();
    let crop: Vec<u8> = (0..24u32)
        .flat_map(|y| (0..24u32).flat_map(move |x| (0..3u8).map(move |c| (x, y, c))))
        .map(|(x, y, c)| img.get(x + 40, y + 40, c))
        .collect();
    let crop = RasterImage::new(24, 24, 3, crop).unwrap();
    assert!(max_abs_diff(&gaussian_blur(&crop, 2.0).unwrap(), &dense_oracle(&crop, 2.0)) <= 1);
}

#[test]
fn stronger_blur_removes_more_detail() {
    let img = natural();
    let mut last = mean_abs_laplacian(&img);
    for sigma in BLUR_SIGMAS {
        let l = mean_abs_laplacian(&gaussian_blur(&img, sigma).unwrap());
        assert!(l < last, "sigma {sigma}");
        last = l;
    }
}

#[test]
fn jpeg_error_shrinks_with_quality_on_natural_image() {
    let img = natural();
    let errors: Vec<f64> = JPEG_QUALITIES.iter().map(|&q| mse(&img, &jpeg_degrade(&img, q).unwrap())).collect();
    // Qualities are listed ascending.
    assert!(errors.windows(2).all(|w| w[0] >= w[1]), "{errors:?}");
    assert!(mse(&img, &jpeg_degrade(&img, 40).unwrap()) >= mse(&img, &jpeg_degrade(&img, 80).unwrap()));
    assert!(errors[0] > 0.0);
}

#[test]
fn jpeg_high_quality_is_close_on_smooth_gradient() {
    let px: Vec<u8> = (0..64u32)
        .flat_map(|y| (0..64u32).flat_map(move |x| [(x * 4) as u8, (y * 4) as u8, ((x + y) * 2) as u8]))
        .collect();
    let img = RasterImage::new(64, 64, 3, px).unwrap();
    let back = jpeg_degrade(&img, 100).unwrap();
    assert!(max_abs_diff(&img, &back) <= 4, "{}", max_abs_diff(&img, &back));
}

#[test]
fn jpeg_preserves_shape_for_gray_and_rgb() {
    for channels in [1u8, 3] {
        let img = RasterImage::filled(37, 21, channels, 128).unwrap();
        let bytes = jpeg_encode(&img, 60).unwrap();
        assert_eq!(&bytes[..2], &[0xFF, 0xD8]);
        let back = jpeg_decode(&bytes).unwrap();
        assert_eq!((back.width(), back.height(), back.channels()), (37, 21, channels));
    }
}

#[test]
fn degradations_are_deterministic() {
    let img = natural();
    for d in ["blur:2", "jpeg:50"] {
        let d: Degradation = d.parse().unwrap();
        assert_eq!(d.apply(&img).unwrap(), d.apply(&img).unwrap());
    }
}

#[test]
fn png_roundtrip_is_lossless() {
    let img = natural();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.png");
    img.save(&p).unwrap();
    assert_eq!(RasterImage::open(&p).unwrap(), img);
}
