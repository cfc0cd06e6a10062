//! File layout of a pipeline output directory, shared by the command line
//! tool and the review server.
//!
//! ```text
//! <output>/scan/                 grids, checkpoint, index
//! <output>/candidates.jsonl      dateable candidates with thermal inertia
//! <output>/selections/<sel>.jsonl
//! <output>/reports/expected.json area-weighted bin probabilities
//! <output>/reports/bias_<sel>.{json,csv}, bias.svg
//! <output>/reports/train.json, calibration.json
//! <output>/review/               decision log and catalog
//! <output>/config/<command>.toml resolved configuration of each run
//! ```

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analytics::{bias_report_with_expected, AnalyticsError, BiasReport};
use crate::candidates::TiBins;
use crate::catalog::CatalogEntry;
use crate::scan::write_atomic;

pub const EXPECTED_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    TopK,
    Stratified,
    Catalog,
}

impl Selection {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::TopK => "top_k",
            Self::Stratified => "stratified",
            Self::Catalog => "catalog",
        }
    }
}

impl std::fmt::Display for Selection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Selection {
    type Err = String;

    /// Accepts `top_k`, `top-k`, `stratified` and `catalog`.
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "top_k" | "top-k" => Ok(Self::TopK),
            "stratified" => Ok(Self::Stratified),
            "catalog" => Ok(Self::Catalog),
            _ => Err(format!(
                "unknown selection `{s}` (expected top_k, stratified or catalog)"
            )),
        }
    }
}

/// Expected per-bin probabilities for a latitude band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedFile {
    pub schema_version: u32,
    pub lat_min: f64,
    pub lat_max: f64,
    pub bin_edges: Vec<f64>,
    pub expected: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OutputLayout {
    root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn scan_dir(&self) -> PathBuf {
        self.root.join("scan")
    }

    pub fn candidates(&self) -> PathBuf {
        self.root.join("candidates.jsonl")
    }

    pub fn selection(&self, sel: Selection) -> PathBuf {
        self.root
            .join("selections")
            .join(format!("{}.jsonl", sel.as_str()))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn expected(&self) -> PathBuf {
        self.reports_dir().join("expected.json")
    }

    pub fn bias_json(&self, sel: Selection) -> PathBuf {
        self.reports_dir()
            .join(format!("bias_{}.json", sel.as_str()))
    }

    pub fn bias_csv(&self, sel: Selection) -> PathBuf {
        self.reports_dir()
            .join(format!("bias_{}.csv", sel.as_str()))
    }

    pub fn bias_svg(&self) -> PathBuf {
        self.reports_dir().join("bias.svg")
    }

    pub fn train_report(&self) -> PathBuf {
        self.reports_dir().join("train.json")
    }

    pub fn calibration_report(&self) -> PathBuf {
        self.reports_dir().join("calibration.json")
    }

    pub fn review_dir(&self) -> PathBuf {
        self.root.join("review")
    }

    pub fn config_echo(&self, command: &str) -> PathBuf {
        self.root.join("config").join(format!("{command}.toml"))
    }
}

/// Pretty JSON written atomically, creating parent directories.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).map_err(std::io::Error::other)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> std::io::Result<T> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| {
        std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("{}: {e}", path.display()),
        )
    })
}

/// Bias of the catalog entries that carry a thermal-inertia value.
pub fn catalog_bias(
    entries: &[CatalogEntry],
    expected: &ExpectedFile,
) -> Result<BiasReport, AnalyticsError> {
    let bins = TiBins::new(expected.bin_edges.clone())
        .map_err(|e| AnalyticsError::Invalid(e.to_string()))?;
    let ti: Vec<f64> = entries.iter().filter_map(|e| e.thermal_inertia).collect();
    bias_report_with_expected(&ti, &bins, &expected.expected, Selection::Catalog.as_str())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_names() {
        for s in [Selection::TopK, Selection::Stratified, Selection::Catalog] {
            assert_eq!(s.as_str().parse::<Selection>().unwrap(), s);
        }
        assert_eq!("top-k".parse::<Selection>().unwrap(), Selection::TopK);
        assert!("best".parse::<Selection>().is_err());
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let l = OutputLayout::new(dir.path());
        let e = ExpectedFile {
            schema_version: EXPECTED_VERSION,
            lat_min: -60.0,
            lat_max: 60.0,
            bin_edges: vec![0.0, 500.0, 1000.0],
            expected: vec![0.25, 0.75],
        };
        write_json(&l.expected(), &e).unwrap();
        assert_eq!(read_json::<ExpectedFile>(&l.expected()).unwrap(), e);
        let r = catalog_bias(&[], &e);
        assert!(matches!(r, Err(AnalyticsError::Empty(_))));
    }
}
