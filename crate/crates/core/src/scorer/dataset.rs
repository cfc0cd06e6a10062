use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Label, LabeledWindow, ScorerError};
use crate::raster::{read_gray_raw, write_gray_u16, Patch};

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    path: String,
    label: Label,
}

/// Writes windows as 16-bit PNGs plus `labels.csv` with `path,label` rows.
pub fn write_labeled_set(dir: &Path, windows: &[LabeledWindow]) -> Result<(), ScorerError> {
    std::fs::create_dir_all(dir)?;
    let mut csv = csv::Writer::from_path(dir.join("labels.csv"))?;
    for (i, w) in windows.iter().enumerate() {
        let name = format!("w{i:06}.png");
        let samples = w
            .pixels
            .pixels
            .iter()
            .map(|&v| (v * 65535.0).round().clamp(0.0, 65535.0) as u16)
            .collect();
        write_gray_u16(&dir.join(&name), w.pixels.width, w.pixels.height, samples)?;
        csv.serialize(LabelRow {
            path: name,
            label: w.label,
        })?;
    }
    csv.flush()?;
    Ok(())
}

/// Reads a directory of PGM/PNG windows listed in `labels.csv`. Paths are
/// relative to the directory.
pub fn read_labeled_set(dir: &Path) -> Result<Vec<LabeledWindow>, ScorerError> {
    let mut rdr = csv::Reader::from_path(dir.join("labels.csv"))?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: LabelRow = row?;
        let (w, h, raw, full) = read_gray_raw(&dir.join(&row.path))?;
        if w != h {
            return Err(ScorerError::Dataset(format!(
                "{}: window is {w}x{h}, not square",
                row.path
            )));
        }
        out.push(LabeledWindow {
            pixels: Patch::new(w, h, raw.into_iter().map(|v| v / full).collect()),
            label: row.label,
        });
    }
    Ok(out)
}

/// Seeded uniform split of `n` indices into (train, held-out), with
/// `round(n * held_out_fraction)` held out.
pub fn split_holdout(n: usize, held_out_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_held = ((n as f64) * held_out_fraction).round() as usize;
    let held = idx.split_off(n - n_held.min(n));
    let (mut train, mut held) = (idx, held);
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}
