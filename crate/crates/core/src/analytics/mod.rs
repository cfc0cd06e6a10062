//! Observational-bias measurement against the area-weighted thermal-inertia
//! distribution, and catalog measurement statistics.

mod render;
mod stats;

pub use render::{bias_csv, bias_svg};
pub use stats::{summary_stats, SummaryStats, ToneFractions};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidates::{TiBasemap, TiBins};

pub const BIAS_REPORT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("no valid basemap area inside latitude band [{0}, {1}]")]
    ZeroArea(f64, f64),
    #[error("KL divergence undefined: bin {0} has observations but zero expected probability")]
    UndefinedKl(usize),
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Area fraction of the latitude band falling in each thermal-inertia bin.
///
/// Integrates over the primary grid (or the fallback when there is no
/// primary), filling primary no-data from the fallback. Pixels are weighted
/// by `cos(latitude)` so equirectangular rows count by true surface area.
pub fn expected_distribution(
    map: &TiBasemap,
    lat_band: (f64, f64),
    bins: &TiBins,
) -> Result<Vec<f64>, AnalyticsError> {
    let (lo, hi) = lat_band;
    if !(lo <= hi) {
        return Err(AnalyticsError::Invalid(format!(
            "latitude band [{lo}, {hi}]"
        )));
    }
    let (grid, fill) = match (map.primary(), map.fallback()) {
        (Some(p), f) => (p, f),
        (None, Some(f)) => (f, None),
        (None, None) => unreachable!("TiBasemap always holds a grid"),
    };
    let mut mass = vec![0.0; bins.len()];
    for r in 0..grid.height() {
        let lat = grid.pixel_center(r, 0).lat;
        if lat < lo || lat > hi {
            continue;
        }
        let w = lat.to_radians().cos().max(0.0);
        for c in 0..grid.width() {
            let v = grid
                .value(r, c)
                .or_else(|| fill.and_then(|f| f.nearest(grid.pixel_center(r, c))));
            if let Some(b) = v.and_then(|v| bins.bin_of(v)) {
                mass[b] += w;
            }
        }
    }
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Err(AnalyticsError::ZeroArea(lo, hi));
    }
    Ok(mass.into_iter().map(|m| m / total).collect())
}

/// `Σ o_i ln(o_i / e_i)` with `o` the normalized observed counts. Bins with
/// no observations contribute nothing. `expected` is renormalized the same
/// way, so identical inputs give exactly zero.
pub fn kl_divergence(observed: &[f64], expected: &[f64]) -> Result<f64, AnalyticsError> {
    if observed.len() != expected.len() {
        return Err(AnalyticsError::Invalid(format!(
            "{} observed bins vs {} expected",
            observed.len(),
            expected.len()
        )));
    }
    if observed
        .iter()
        .chain(expected)
        .any(|v| !v.is_finite() || *v < 0.0)
    {
        return Err(AnalyticsError::Invalid(
            "counts and probabilities must be finite and nonnegative".into(),
        ));
    }
    let n: f64 = observed.iter().sum();
    if n <= 0.0 {
        return Err(AnalyticsError::Empty("observed counts"));
    }
    let e_sum: f64 = expected.iter().sum();
    if (e_sum - 1.0).abs() > 1e-9 {
        return Err(AnalyticsError::Invalid(format!(
            "expected probabilities sum to {e_sum}"
        )));
    }
    let mut d = 0.0;
    for (i, (&o, &e)) in observed.iter().zip(expected).enumerate() {
        if o == 0.0 {
            continue;
        }
        if e == 0.0 {
            return Err(AnalyticsError::UndefinedKl(i));
        }
        let p = o / n;
        d += p * (p / (e / e_sum)).ln();
    }
    // Gibbs: rounding can leave a tiny negative residue for O == E
    Ok(d.max(0.0))
}

/// Cube root of the summed cubes of individual crater diameters.
pub fn effective_diameter(diameters: &[f64]) -> Result<f64, AnalyticsError> {
    if diameters.is_empty() {
        return Err(AnalyticsError::Empty("diameter list"));
    }
    if let Some(d) = diameters.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
        return Err(AnalyticsError::Invalid(format!(
            "diameter {d} must be positive"
        )));
    }
    Ok(diameters.iter().map(|d| d * d * d).sum::<f64>().cbrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiHistogram {
    pub bin_edges: Vec<f64>,
    pub bin_labels: Vec<String>,
    pub observed: Vec<u64>,
    pub expected: Vec<f64>,
}

impl TiHistogram {
    pub fn observed_fraction(&self) -> Vec<f64> {
        let n: u64 = self.observed.iter().sum();
        self.observed
            .iter()
            .map(|&o| if n == 0 { 0.0 } else { o as f64 / n as f64 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub schema_version: u32,
    pub selection: String,
    pub n_items: usize,
    pub histogram: TiHistogram,
    pub d_kl: f64,
}

/// Bins thermal-inertia values and compares them with `expected`.
pub fn bias_report_with_expected(
    ti_values: &[f64],
    bins: &TiBins,
    expected: &[f64],
    label: &str,
) -> Result<BiasReport, AnalyticsError> {
    if ti_values.is_empty() {
        return Err(AnalyticsError::Empty("selection"));
    }
    if expected.len() != bins.len() {
        return Err(AnalyticsError::Invalid(
            "expected distribution does not match bins".into(),
        ));
    }
    let mut observed = vec![0u64; bins.len()];
    for &v in ti_values {
        let b = bins.bin_of(v).ok_or_else(|| {
            AnalyticsError::Invalid(format!("thermal inertia {v} is outside every bin"))
        })?;
        observed[b] += 1;
    }
    let obs_f: Vec<f64> = observed.iter().map(|&o| o as f64).collect();
    let d_kl = kl_divergence(&obs_f, expected)?;
    Ok(BiasReport {
        schema_version: BIAS_REPORT_VERSION,
        selection: label.to_string(),
        n_items: ti_values.len(),
        histogram: TiHistogram {
            bin_edges: bins.edges().to_vec(),
            bin_labels: (0..bins.len()).map(|b| bins.label(b)).collect(),
            observed,
            expected: expected.to_vec(),
        },
        d_kl,
    })
}

pub fn bias_report(
    ti_values: &[f64],
    map: &TiBasemap,
    bins: &TiBins,
    lat_band: (f64, f64),
    label: &str,
) -> Result<BiasReport, AnalyticsError> {
    if ti_values.is_empty() {
        return Err(AnalyticsError::Empty("selection"));
    }
    let expected = expected_distribution(map, lat_band, bins)?;
    bias_report_with_expected(ti_values, bins, &expected, label)
}
