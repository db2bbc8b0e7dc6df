//! Seeded synthetic images with known ground truth.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imagery::{Image, ScribbleMask, UNLABELED};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn quantize(v: f64) -> f64 {
    v.round().clamp(0.0, 255.0)
}

/// I.i.d. uniform 8-bit RGB noise.
pub fn noise_image(width: usize, height: usize, rng: &mut impl Rng) -> Image {
    let rgb = (0..width * height)
        .map(|_| [(); 3].map(|_| rng.random_range(0..=255u8) as f64))
        .collect();
    Image::new(width, height, rgb).expect("valid dimensions")
}

/// Bilinear blend of four random corner colors plus uniform noise of
/// amplitude `noise` per channel.
pub fn smooth_image(width: usize, height: usize, noise: f64, rng: &mut impl Rng) -> Image {
    let corners: [[f64; 3]; 4] = [(); 4].map(|_| [(); 3].map(|_| rng.random_range(0.0..=255.0)));
    let sx = (width.max(2) - 1) as f64;
    let sy = (height.max(2) - 1) as f64;
    let rgb = (0..width * height)
        .map(|p| {
            let (x, y) = ((p % width) as f64 / sx, (p / width) as f64 / sy);
            let mut px = [0.0; 3];
            for (c, out) in px.iter_mut().enumerate() {
                let v = corners[0][c] * (1.0 - x) * (1.0 - y)
                    + corners[1][c] * x * (1.0 - y)
                    + corners[2][c] * (1.0 - x) * y
                    + corners[3][c] * x * y;
                *out = quantize(v + rng.random_range(-noise..=noise));
            }
            px
        })
        .collect();
    Image::new(width, height, rgb).expect("valid dimensions")
}

/// A two-region image split by a random line, with one short horizontal
/// scribble inside each region.
#[derive(Debug, Clone)]
pub struct TwoRegion {
    pub image: Image,
    pub scribbles: ScribbleMask,
    pub truth: Vec<usize>,
    pub colors: [[f64; 3]; 2],
}

#[derive(Debug, Clone, Copy)]
pub struct TwoRegionParams {
    pub side: usize,
    /// Minimum Euclidean RGB distance between the two region colors.
    pub min_gap: f64,
    pub noise: f64,
    pub scribble_len: usize,
}

impl Default for TwoRegionParams {
    fn default() -> Self {
        Self {
            side: 64,
            min_gap: 60.0,
            noise: 5.0,
            scribble_len: 10,
        }
    }
}

fn region_colors(min_gap: f64, noise: f64, rng: &mut impl Rng) -> [[f64; 3]; 2] {
    let lo = noise;
    let hi = 255.0 - noise;
    loop {
        let a: [f64; 3] = [(); 3].map(|_| rng.random_range(lo..=hi).round());
        let b: [f64; 3] = [(); 3].map(|_| rng.random_range(lo..=hi).round());
        let gap = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        // Keep the gap moderate so the task is not trivially easy.
        if gap >= min_gap && gap <= min_gap + 60.0 {
            return [a, b];
        }
    }
}

pub fn two_region(params: TwoRegionParams, rng: &mut impl Rng) -> TwoRegion {
    let side = params.side;
    let n = side * side;
    let truth = loop {
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let (nx, ny) = (angle.cos(), angle.sin());
        let c = side as f64 / 2.0;
        let offset = rng.random_range(-(side as f64) / 6.0..=side as f64 / 6.0);
        let truth: Vec<usize> = (0..n)
            .map(|p| {
                let (x, y) = ((p % side) as f64 - c, (p / side) as f64 - c);
                usize::from(x * nx + y * ny > offset)
            })
            .collect();
        let ones = truth.iter().filter(|&&t| t == 1).count();
        if ones >= n / 5 && ones <= 4 * n / 5 {
            break truth;
        }
    };
    let colors = region_colors(params.min_gap, params.noise, rng);
    let rgb = truth
        .iter()
        .map(|&t| colors[t].map(|c| quantize(c + rng.random_range(-params.noise..=params.noise))))
        .collect();
    let image = Image::new(side, side, rgb).expect("valid dimensions");

    let mut labels = vec![UNLABELED; n];
    for class in 0..2 {
        let margin = 2usize;
        loop {
            let y = rng.random_range(margin..side - margin);
            let x0 = rng.random_range(margin..side - margin - params.scribble_len);
            let inside = (y - margin..=y + margin).all(|yy| {
                (x0 - margin..x0 + params.scribble_len + margin)
                    .all(|xx| truth[yy * side + xx] == class)
            });
            if inside {
                for x in x0..x0 + params.scribble_len {
                    labels[y * side + x] = class as u8;
                }
                break;
            }
        }
    }
    let scribbles = ScribbleMask::new(side, side, labels, 2).expect("labels in range");
    TwoRegion {
        image,
        scribbles,
        truth,
        colors,
    }
}

/// `count` distinct pixel indices below `n`, sorted.
pub fn distinct_indices(n: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut v = sample(rng, n, count).into_vec();
    v.sort_unstable();
    v
}
