use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LabeledWindow;
use crate::raster::Patch;

/// Each source window yields this many training windows: the original, a
/// horizontal flip, a vertical flip, one random quarter-turn rotation, one
/// random intensity jitter, and a Gaussian blur.
pub const AUGMENT_FACTOR: usize = 6;

const BLUR_SIGMA: f64 = 2.0;
const GAIN_RANGE: (f32, f32) = (0.9, 1.1);
const OFFSET_RANGE: (f32, f32) = (-0.05, 0.05);

fn flip_h(p: &Patch) -> Patch {
    let mut out = Vec::with_capacity(p.pixels.len());
    for r in 0..p.height {
        out.extend(p.pixels[r * p.width..(r + 1) * p.width].iter().rev());
    }
    Patch::new(p.width, p.height, out)
}

fn flip_v(p: &Patch) -> Patch {
    let mut out = Vec::with_capacity(p.pixels.len());
    for r in (0..p.height).rev() {
        out.extend_from_slice(&p.pixels[r * p.width..(r + 1) * p.width]);
    }
    Patch::new(p.width, p.height, out)
}

/// Clockwise rotation by `quarter_turns * 90` degrees.
fn rotate(p: &Patch, quarter_turns: u32) -> Patch {
    let mut cur = p.clone();
    for _ in 0..quarter_turns % 4 {
        let (w, h) = (cur.width, cur.height);
        let mut out = vec![0.0; w * h];
        // (r, c) -> (c, h - 1 - r) in an h x w output
        for r in 0..h {
            for c in 0..w {
                out[c * h + (h - 1 - r)] = cur.pixels[r * w + c];
            }
        }
        cur = Patch::new(h, w, out);
    }
    cur
}

fn jitter(p: &Patch, gain: f32, offset: f32) -> Patch {
    Patch::new(
        p.width,
        p.height,
        p.pixels
            .iter()
            .map(|v| (v * gain + offset).clamp(0.0, 1.0))
            .collect(),
    )
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(p: &Patch, sigma: f64) -> Patch {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (w, h) = (p.width, p.height);
    if w == 0 || h == 0 {
        return p.clone();
    }
    let r = radius as usize;

    let mut tmp = vec![0.0f32; w * h];
    let mut padded = vec![0.0f32; w + 2 * r];
    for (src, dst) in p.pixels.chunks_exact(w).zip(tmp.chunks_exact_mut(w)) {
        padded[..r].fill(src[0]);
        padded[r..r + w].copy_from_slice(src);
        padded[r + w..].fill(src[w - 1]);
        for (k, &kv) in kernel.iter().enumerate() {
            for (d, &v) in dst.iter_mut().zip(&padded[k..k + w]) {
                *d += kv * v;
            }
        }
    }
    let mut out = vec![0.0f32; w * h];
    for (row, dst) in out.chunks_exact_mut(w).enumerate() {
        for (k, &kv) in kernel.iter().enumerate() {
            let sr = (row as i64 + k as i64 - radius).clamp(0, h as i64 - 1) as usize;
            for (d, &v) in dst.iter_mut().zip(&tmp[sr * w..(sr + 1) * w]) {
                *d += kv * v;
            }
        }
        dst.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Patch::new(p.width, p.height, out)
}

/// Lazily yields the augmented set in source order, [`AUGMENT_FACTOR`]
/// windows per source, all carrying the source label.
pub fn augment_iter(
    set: &[LabeledWindow],
    rng_seed: u64,
) -> impl Iterator<Item = LabeledWindow> + '_ {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    set.iter().flat_map(move |src| {
        let turns = rng.random_range(1..=3u32);
        let gain = rng.random_range(GAIN_RANGE.0..GAIN_RANGE.1);
        let offset = rng.random_range(OFFSET_RANGE.0..OFFSET_RANGE.1);
        let label = src.label;
        (0..AUGMENT_FACTOR).map(move |k| {
            let p = &src.pixels;
            let pixels = match k {
                0 => p.clone(),
                1 => flip_h(p),
                2 => flip_v(p),
                3 => rotate(p, turns),
                4 => jitter(p, gain, offset),
                _ => gaussian_blur(p, BLUR_SIGMA),
            };
            LabeledWindow { pixels, label }
        })
    })
}

pub fn augment(set: &[LabeledWindow], rng_seed: u64) -> Vec<LabeledWindow> {
    augment_iter(set, rng_seed).collect()
}
