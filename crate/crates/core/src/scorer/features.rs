use crate::raster::Patch;

/// Bump when the feature definitions change; stored in model files.
pub const FEATURE_SET_VERSION: u32 = 1;
pub const FEATURE_COUNT: usize = 5;
pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "mean_intensity",
    "intensity_std",
    "center_minus_annulus",
    "p5_contrast",
    "gradient_energy",
];

pub type FeatureVector = [f64; FEATURE_COUNT];

const HIST_BINS: usize = 1024;

/// Window features, in [`FEATURE_NAMES`] order:
///
/// * mean and standard deviation of intensity;
/// * mean of the central disc (radius `size/4`) minus the mean of the
///   surrounding annulus out to the inscribed circle;
/// * mean minus the 5th percentile (how far the dark tail reaches);
/// * mean squared forward-difference gradient magnitude.
pub fn window_features(p: &Patch) -> FeatureVector {
    let (w, h) = (p.width, p.height);
    let n = (w * h) as f64;
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let r_disc = w.min(h) as f64 / 4.0;
    let r_ann = w.min(h) as f64 / 2.0;

    // four interleaved histograms avoid serializing on repeated bins
    let mut hist = vec![0u32; 4 * HIST_BINS];
    let (mut sum, mut sumsq, mut grad) = (0.0f64, 0.0f64, 0.0f64);
    let (mut disc_sum, mut disc_n, mut ann_sum, mut ann_n) = (0.0f64, 0usize, 0.0f64, 0usize);
    let scale = HIST_BINS as f32 - 1.0;

    for r in 0..h {
        let row = &p.pixels[r * w..(r + 1) * w];
        let (s, ss) = lane_sums(row);
        sum += s;
        sumsq += ss;
        for (k, &v) in row.iter().enumerate() {
            let b = ((v * scale) as i32).clamp(0, HIST_BINS as i32 - 1) as usize;
            hist[(k & 3) * HIST_BINS + b] += 1;
        }
        if w > 1 {
            grad += sq_diff_sum(&row[..w - 1], &row[1..]);
        }
        if r + 1 < h {
            grad += sq_diff_sum(row, &p.pixels[(r + 1) * w..(r + 2) * w]);
        }

        let dy = r as f64 - cy;
        if let Some((a0, a1)) = span(cx, dy, r_ann, w) {
            let s_ann = lane_sums(&row[a0..=a1]).0;
            let mut s_disc = 0.0f64;
            let mut n_disc = 0;
            if let Some((d0, d1)) = span(cx, dy, r_disc, w) {
                s_disc = lane_sums(&row[d0..=d1]).0;
                n_disc = d1 - d0 + 1;
            }
            disc_sum += s_disc;
            disc_n += n_disc;
            ann_sum += s_ann - s_disc;
            ann_n += a1 - a0 + 1 - n_disc;
        }
    }
    let hist: Vec<u32> = (0..HIST_BINS)
        .map(|b| (0..4).map(|k| hist[k * HIST_BINS + b]).sum())
        .collect();

    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0);
    let center = if disc_n > 0 && ann_n > 0 {
        disc_sum / disc_n as f64 - ann_sum / ann_n as f64
    } else {
        0.0
    };
    let target = ((0.05 * n).ceil() as u64).max(1);
    let mut acc = 0u64;
    let mut p5 = 1.0;
    for (b, &count) in hist.iter().enumerate() {
        acc += count as u64;
        if acc >= target {
            p5 = (b as f64 + 0.5) / (HIST_BINS as f64 - 1.0);
            break;
        }
    }
    let grad_terms = ((w.saturating_sub(1)) * h + w * h.saturating_sub(1)).max(1) as f64;
    [mean, var.sqrt(), center, mean - p5, grad / grad_terms]
}

/// Sum and sum of squares, accumulated in independent lanes.
fn lane_sums(xs: &[f32]) -> (f64, f64) {
    let mut s = [0.0f64; 4];
    let mut ss = [0.0f64; 4];
    let mut chunks = xs.chunks_exact(4);
    for ch in &mut chunks {
        for k in 0..4 {
            let x = ch[k] as f64;
            s[k] += x;
            ss[k] += x * x;
        }
    }
    for &v in chunks.remainder() {
        let x = v as f64;
        s[0] += x;
        ss[0] += x * x;
    }
    (s.iter().sum(), ss.iter().sum())
}

fn sq_diff_sum(a: &[f32], b: &[f32]) -> f64 {
    let mut g = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            let d = y[k] - x[k];
            g[k] += d * d;
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += (y - x) * (y - x);
    }
    g.iter().map(|&v| v as f64).sum::<f64>() + tail as f64
}

/// Inclusive column range of a row inside a circle of radius `r` centered at
/// column `cx`, `dy` rows from the center.
fn span(cx: f64, dy: f64, r: f64, w: usize) -> Option<(usize, usize)> {
    let rem = r * r - dy * dy;
    if rem < 0.0 {
        return None;
    }
    let half = rem.sqrt();
    let lo = (cx - half).ceil().max(0.0);
    let hi = (cx + half).floor().min(w as f64 - 1.0);
    if lo > hi {
        None
    } else {
        Some((lo as usize, hi as usize))
    }
}
