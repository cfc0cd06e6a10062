use serde::{Deserialize, Serialize};

use super::AnalyticsError;
use crate::catalog::{CatalogEntry, CraterType, Tone};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToneFractions {
    pub dark: f64,
    pub light: f64,
    pub dual: f64,
}

/// Fractions are taken over the entries that record the attribute and are
/// `None` when none do. Standard deviations use the n-1 denominator and are
/// `None` below two samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub n: usize,
    pub mean_diam: f64,
    pub std_diam: Option<f64>,
    /// Set when there is only one entry, so no spread can be estimated.
    pub single_sample: bool,
    pub cluster_fraction: f64,
    pub halo_fraction: Option<f64>,
    pub ray_fraction: Option<f64>,
    pub tone_fractions: Option<ToneFractions>,
    pub mean_dci: Option<f64>,
    pub std_dci: Option<f64>,
    pub mean_ti: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = (xs.len() > 1)
        .then(|| (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(m), sd)
}

fn fraction(flags: impl Iterator<Item = Option<bool>>) -> Option<f64> {
    let (mut yes, mut n) = (0usize, 0usize);
    for f in flags.flatten() {
        n += 1;
        yes += f as usize;
    }
    (n > 0).then(|| yes as f64 / n as f64)
}

pub fn summary_stats(entries: &[CatalogEntry]) -> Result<SummaryStats, AnalyticsError> {
    if entries.is_empty() {
        return Err(AnalyticsError::Empty("catalog entries"));
    }
    let diams: Vec<f64> = entries.iter().map(|e| e.effective_diameter).collect();
    let (mean_diam, std_diam) = mean_std(&diams);
    let dci: Vec<f64> = entries.iter().filter_map(|e| e.dust_cover_index).collect();
    let (mean_dci, std_dci) = mean_std(&dci);
    let ti: Vec<f64> = entries.iter().filter_map(|e| e.thermal_inertia).collect();
    let tones: Vec<Tone> = entries.iter().filter_map(|e| e.tone).collect();
    let tone_fractions = (!tones.is_empty()).then(|| {
        let f = |t: Tone| tones.iter().filter(|&&x| x == t).count() as f64 / tones.len() as f64;
        ToneFractions {
            dark: f(Tone::Dark),
            light: f(Tone::Light),
            dual: f(Tone::Dual),
        }
    });
    Ok(SummaryStats {
        n: entries.len(),
        mean_diam: mean_diam.expect("nonempty"),
        std_diam,
        single_sample: entries.len() == 1,
        cluster_fraction: entries
            .iter()
            .filter(|e| e.crater_type == CraterType::Cluster)
            .count() as f64
            / entries.len() as f64,
        halo_fraction: fraction(entries.iter().map(|e| e.halo)),
        ray_fraction: fraction(entries.iter().map(|e| e.rays)),
        tone_fractions,
        mean_dci,
        std_dci,
        mean_ti: mean_std(&ti).0,
    })
}
