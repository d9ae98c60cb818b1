//! Procedural RGB textures in `[0, 1]`, shape `[size, size, 3]`.

use crate::numerics::{SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureKind {
    Stripes,
    Dots,
    GaussianBlobs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub kind: TextureKind,
    /// Stripe period or dot grid spacing in pixels; blob count for blobs.
    pub period: usize,
    pub image: Tensor,
}

type Rgb = [f64; 3];

fn paint(size: usize, mut coverage: impl FnMut(usize, usize) -> f64, bg: Rgb, fg: Rgb) -> Tensor {
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let a = coverage(y, x).clamp(0.0, 1.0);
            data.extend((0..3).map(|c| bg[c] + (fg[c] - bg[c]) * a));
        }
    }
    Tensor::new(vec![size, size, 3], data).expect("size > 0")
}

/// Hard-edged stripes; `phase` shifts the pattern along the varying axis.
pub fn stripes(size: usize, period: usize, vertical: bool, phase: usize, bg: Rgb, fg: Rgb) -> Tensor {
    let period = period.max(2);
    paint(
        size,
        |y, x| {
            let u = if vertical { x } else { y };
            if (u + period - phase % period) % period < period / 2 {
                1.0
            } else {
                0.0
            }
        },
        bg,
        fg,
    )
}

fn dots(size: usize, spacing: usize, bg: Rgb, fg: Rgb) -> Tensor {
    let r = spacing as f64 / 4.0;
    let center = (spacing as f64 - 1.0) / 2.0;
    paint(
        size,
        |y, x| {
            let dy = (y % spacing) as f64 - center;
            let dx = (x % spacing) as f64 - center;
            if dy * dy + dx * dx <= r * r {
                1.0
            } else {
                0.0
            }
        },
        bg,
        fg,
    )
}

fn blobs(size: usize, count: usize, rng: &mut SeededRng, bg: Rgb, fg: Rgb) -> Tensor {
    let s = size as f64;
    let centers: Vec<(f64, f64, f64)> = (0..count)
        .map(|_| (rng.uniform_range(0.0, s), rng.uniform_range(0.0, s), rng.uniform_range(s / 8.0, s / 4.0)))
        .collect();
    paint(
        size,
        |y, x| {
            centers
                .iter()
                .map(|&(cy, cx, sig)| {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    (-d2 / (2.0 * sig * sig)).exp()
                })
                .sum()
        },
        bg,
        fg,
    )
}

fn color(rng: &mut SeededRng, lo: f64, hi: f64) -> Rgb {
    [rng.uniform_range(lo, hi), rng.uniform_range(lo, hi), rng.uniform_range(lo, hi)]
}

/// Periods that tile `size` exactly, at least 4 pixels and at most half the image.
fn periods(size: usize) -> Vec<usize> {
    let p: Vec<usize> = (4..=size / 2).filter(|p| size % p == 0).collect();
    if p.is_empty() {
        vec![size.max(2)]
    } else {
        p
    }
}

/// `n` textures cycling through `kinds`, deterministic in `seed`.
pub fn make_texture_dataset(kinds: &[TextureKind], n: usize, size: usize, seed: u64) -> Vec<Texture> {
    if kinds.is_empty() || size == 0 {
        return Vec::new();
    }
    let mut rng = SeededRng::new(seed);
    let choices = periods(size);
    (0..n)
        .map(|i| {
            let kind = kinds[i % kinds.len()];
            let bg = color(&mut rng, 0.05, 0.45);
            let fg = color(&mut rng, 0.55, 0.95);
            let period = choices[rng.index(0, choices.len())];
            match kind {
                TextureKind::Stripes => {
                    let vertical = rng.uniform() < 0.5;
                    let phase = rng.index(0, period);
                    Texture { kind, period, image: stripes(size, period, vertical, phase, bg, fg) }
                }
                TextureKind::Dots => Texture { kind, period, image: dots(size, period, bg, fg) },
                TextureKind::GaussianBlobs => {
                    let count = rng.index(3, 7);
                    Texture { kind, period: count, image: blobs(size, count, &mut rng, bg, fg) }
                }
            }
        })
        .collect()
}
