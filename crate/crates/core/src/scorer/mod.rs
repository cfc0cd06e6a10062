//! Two-class window scoring: the scorer interface, a linear baseline over
//! hand features, training-set augmentation, and post-hoc calibration.

mod augment;
mod baseline;
mod calibration;
mod dataset;
mod features;

pub use augment::{augment, augment_iter, gaussian_blur, AUGMENT_FACTOR};
pub use baseline::{
    fit_logistic, train_baseline, BaselineScorerModel, ModelFile, MODEL_FORMAT_VERSION,
};
pub use calibration::{
    apply_calibration, calibration_nll, calibration_nll_gradient, ece, fit_bcts, fit_bcts_traced,
    BctsFit, CalibrationModel, ECE_BINS,
};
pub use dataset::{read_labeled_set, split_holdout, write_labeled_set};
pub use features::{
    window_features, FeatureVector, FEATURE_COUNT, FEATURE_NAMES, FEATURE_SET_VERSION,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{Patch, RasterError};

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("window is {got_w}x{got_h}, scorer expects {size}x{size}")]
    WindowShape {
        size: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("training set must contain both classes")]
    SingleClass,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    pub pixels: Patch,
    pub label: Label,
}

/// Pre-calibration logits for (non-impact, fresh impact).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawScore {
    pub z_neg: f64,
    pub z_pos: f64,
}

impl RawScore {
    pub fn new(z_neg: f64, z_pos: f64) -> Result<Self, ScorerError> {
        if !(z_neg.is_finite() && z_pos.is_finite()) {
            return Err(ScorerError::InvalidModel(format!(
                "non-finite logits ({z_neg}, {z_pos})"
            )));
        }
        Ok(Self { z_neg, z_pos })
    }

    pub fn logits(&self) -> [f64; 2] {
        [self.z_neg, self.z_pos]
    }
}

/// Anything that can score a square window. Implementations are immutable
/// once built and shared across scan workers.
pub trait WindowScorer: Send + Sync {
    fn window_size(&self) -> usize;

    fn score_window(&self, window: &Patch) -> Result<RawScore, ScorerError>;

    /// Stable digest of everything that affects scores.
    fn fingerprint(&self) -> String;
}

pub(crate) fn check_shape(size: usize, window: &Patch) -> Result<(), ScorerError> {
    if window.width != size || window.height != size {
        return Err(ScorerError::WindowShape {
            size,
            got_w: window.width,
            got_h: window.height,
        });
    }
    Ok(())
}
