#![allow(dead_code)]

use mitodet::imaging::RasterImage;
use mitodet::Point;
use rand::Rng;

pub fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

pub fn angle_deg(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
    dot.acos().to_degrees()
}

/// A random hematoxylin-like and eosin-like pair near the usual reference
/// directions; the first always has the larger blue component.
pub fn random_stains<R: Rng>(rng: &mut R) -> [[f64; 3]; 2] {
    let mut jitter = |base: [f64; 3]| {
        unit([
            (base[0] + rng.random_range(-0.08..0.08)).max(0.01),
            (base[1] + rng.random_range(-0.08..0.08)).max(0.01),
            (base[2] + rng.random_range(-0.08..0.08)).max(0.01),
        ])
    };
    let h = jitter([0.65, 0.70, 0.29]);
    let e = jitter([0.07, 0.99, 0.11]);
    [h, e]
}

/// Beer-Lambert forward model: intensity = 255 · exp(−(c_h·h + c_e·e)).
pub fn compose(stains: &[[f64; 3]; 2], c: [f64; 2]) -> [u8; 3] {
    let mut px = [0u8; 3];
    for k in 0..3 {
        let od = c[0] * stains[0][k] + c[1] * stains[1][k];
        px[k] = (255.0 * (-od).exp()).round().clamp(0.0, 255.0) as u8;
    }
    px
}

/// Scattered pixels: background, pure stains and mixtures.
pub fn beer_lambert_image<R: Rng>(rng: &mut R, size: u32, stains: &[[f64; 3]; 2]) -> RasterImage {
    let pixels: Vec<[f64; 2]> = (0..size * size)
        .map(|_| match rng.random_range(0..10) {
            0..=2 => [0.0, 0.0],
            3 | 4 => [rng.random_range(0.4..1.8), 0.0],
            5 | 6 => [0.0, rng.random_range(0.4..1.8)],
            _ => [rng.random_range(0.1..1.2), rng.random_range(0.1..1.2)],
        })
        .collect();
    RasterImage::from_fn(size, size, |x, y| compose(stains, pixels[(y * size + x) as usize]))
}

/// Tissue-like raster: smooth blob concentration fields over a white
/// background, rendered through the forward model.
pub fn textured_raster<R: Rng>(rng: &mut R, size: u32, stains: &[[f64; 3]; 2]) -> RasterImage {
    // half nuclei (hematoxylin), half stroma (eosin)
    let blobs: Vec<(f64, f64, f64, f64, usize)> = (0..24)
        .map(|i| {
            (
                rng.random_range(0.0..f64::from(size)),
                rng.random_range(0.0..f64::from(size)),
                rng.random_range(4.0..14.0),
                rng.random_range(0.5..1.6),
                i % 2,
            )
        })
        .collect();
    RasterImage::from_fn(size, size, |x, y| {
        let (fx, fy) = (f64::from(x), f64::from(y));
        let mut c = [0.0, 0.0];
        for &(bx, by, r, amp, stain) in &blobs {
            let d2 = (fx - bx).powi(2) + (fy - by).powi(2);
            c[stain] += amp * (-d2 / (2.0 * r * r)).exp();
        }
        compose(stains, c)
    })
}

/// Maximum cardinality of a radius-limited one-to-one matching, with the
/// minimum total distance among maximum matchings. Exhaustive.
pub fn brute_force_matching(dets: &[Point], gts: &[Point], radius: f64) -> (usize, f64) {
    fn go(i: usize, dets: &[Point], gts: &[Point], r: f64, used: &mut Vec<bool>, best: &mut (usize, f64), cur: (usize, f64)) {
        if i == dets.len() {
            if cur.0 > best.0 || (cur.0 == best.0 && cur.1 < best.1) {
                *best = cur;
            }
            return;
        }
        go(i + 1, dets, gts, r, used, best, cur);
        for j in 0..gts.len() {
            let d = dets[i].distance(&gts[j]);
            if !used[j] && d <= r {
                used[j] = true;
                go(i + 1, dets, gts, r, used, best, (cur.0 + 1, cur.1 + d));
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0.0);
    go(0, dets, gts, radius, &mut vec![false; gts.len()], &mut best, (0, 0.0));
    best
}

pub fn random_points<R: Rng>(rng: &mut R, max: usize, extent: f64) -> Vec<Point> {
    let n = rng.random_range(0..=max);
    (0..n)
        .map(|_| Point::new(rng.random_range(0.0..=extent), rng.random_range(0.0..=extent)))
        .collect()
}

pub fn random_textured<R: Rng>(rng: &mut R, size: u32) -> RasterImage {
    let stains = random_stains(rng);
    textured_raster(rng, size, &stains)
}
