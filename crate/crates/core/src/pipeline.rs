//! Run configuration and the stage functions that chain the modules:
//! train, calibrate, scan, build, select, report.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{
    bias_report_with_expected, expected_distribution, AnalyticsError, BiasReport,
};
use crate::candidates::{
    apply_filters, assign_ti, build_candidates, stratified_top, top_k, Candidate, CandidateError,
    FilterParams, TiBasemap, TiBins, DEFAULT_GROUPING_RADIUS_M,
};
use crate::raster::{ArchiveSource, WindowParams};
use crate::scan::{scan_archive, ScanError, ScanOutcome, ScoreGrid};
use crate::scorer::{
    augment_iter, ece, fit_bcts_traced, fit_logistic, split_holdout, window_features,
    BaselineScorerModel, CalibrationModel, Label, LabeledWindow, ModelFile, RawScore, ScorerError,
    WindowScorer, AUGMENT_FACTOR, ECE_BINS,
};
use crate::synth::{SynthError, SyntheticWorldConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Scan(#[from] ScanError),
    #[error(transparent)]
    Candidate(#[from] CandidateError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub archive: PathBuf,
    pub basemaps: PathBuf,
    pub training: PathBuf,
    pub model: PathBuf,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            archive: "work/archive".into(),
            basemaps: "work/basemaps".into(),
            training: "work/training".into(),
            model: "work/model.json".into(),
            output: "work/out".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsConfig {
    pub training: u64,
    pub split: u64,
    pub augment: u64,
}

impl Default for SeedsConfig {
    fn default() -> Self {
        Self {
            training: 3,
            split: 1,
            augment: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub window: WindowParams,
    pub grouping_radius_m: f64,
    pub filter: FilterParams,
    pub bin_edges: Vec<f64>,
    pub per_bin: usize,
    pub k: usize,
    pub parallelism: usize,
    pub holdout_fraction: f64,
    /// Cap on labeled windows per class drawn from the synthetic world.
    pub max_train_per_class: usize,
    pub seeds: SeedsConfig,
    /// Synthetic world generated by the `synth` command.
    pub world: SyntheticWorldConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            window: WindowParams::default(),
            grouping_radius_m: DEFAULT_GROUPING_RADIUS_M,
            filter: FilterParams::default(),
            bin_edges: TiBins::default().edges().to_vec(),
            per_bin: 100,
            k: 1000,
            parallelism: 1,
            holdout_fraction: 0.1,
            max_train_per_class: 2000,
            seeds: SeedsConfig::default(),
            world: SyntheticWorldConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Selection sizes scaled to the synthetic demo world: 100 by confidence,
    /// 10 per thermal-inertia bin.
    pub fn demo() -> Self {
        Self {
            per_bin: 10,
            k: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let f = &self.filter;
        for (name, v) in [
            ("nondetect_threshold", f.nondetect_threshold),
            ("detect_threshold", f.detect_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if f.nondetect_threshold > f.detect_threshold {
            return bad("nondetect_threshold exceeds detect_threshold".into());
        }
        if !(f.lat_min <= f.lat_max) {
            return bad("filter.lat_min exceeds filter.lat_max".into());
        }
        WindowParams::new(self.window.size, self.window.stride)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(self.grouping_radius_m > 0.0) {
            return bad("grouping_radius_m must be positive".into());
        }
        self.bins()?;
        if self.parallelism == 0 {
            return bad("parallelism must be >= 1".into());
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad("holdout_fraction must be in (0, 1)".into());
        }
        if self.per_bin == 0 || self.k == 0 || self.max_train_per_class == 0 {
            return bad("k, per_bin and max_train_per_class must be >= 1".into());
        }
        self.world.validate()?;
        Ok(())
    }

    pub fn bins(&self) -> Result<TiBins, PipelineError> {
        TiBins::new(self.bin_edges.clone()).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_sources: usize,
    pub n_train_sources: usize,
    pub n_train_augmented: usize,
    pub n_held_out: usize,
    pub held_out_accuracy: f64,
    pub ece_uncalibrated: f64,
    pub ece_calibrated: f64,
    pub calibration: CalibrationModel,
    pub calibration_iterations: usize,
}

const FEATURE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub n_sources: usize,
    pub n_train_sources: usize,
    pub n_train_augmented: usize,
    pub n_held_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_held_out: usize,
    pub held_out_accuracy: f64,
    pub ece_uncalibrated: f64,
    pub ece_calibrated: f64,
    pub calibration: CalibrationModel,
    pub calibration_iterations: usize,
}

fn check_window_shapes(windows: &[LabeledWindow], size: usize) -> Result<(), PipelineError> {
    for w in windows {
        if w.pixels.width != size || w.pixels.height != size {
            return Err(ScorerError::WindowShape {
                size,
                got_w: w.pixels.width,
                got_h: w.pixels.height,
            }
            .into());
        }
    }
    Ok(())
}

fn pool(parallelism: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))
}

/// Fits the baseline on the augmented training split. Augmented windows are
/// streamed in chunks. The held-out split is left for [`calibrate_scorer`].
pub fn fit_scorer(
    windows: &[LabeledWindow],
    cfg: &PipelineConfig,
) -> Result<(BaselineScorerModel, FitReport), PipelineError> {
    let size = cfg.window.size;
    check_window_shapes(windows, size)?;
    let (train_idx, held_idx) = split_holdout(windows.len(), cfg.holdout_fraction, cfg.seeds.split);
    let train: Vec<LabeledWindow> = train_idx.iter().map(|&i| windows[i].clone()).collect();

    let pool = pool(cfg.parallelism)?;
    let mut feats = Vec::with_capacity(train.len() * AUGMENT_FACTOR);
    let mut labels = Vec::with_capacity(train.len() * AUGMENT_FACTOR);
    let mut stream = augment_iter(&train, cfg.seeds.augment);
    loop {
        let chunk: Vec<LabeledWindow> = stream
            .by_ref()
            .take(FEATURE_CHUNK * AUGMENT_FACTOR)
            .collect();
        if chunk.is_empty() {
            break;
        }
        let f: Vec<_> = pool.install(|| {
            chunk
                .par_iter()
                .map(|w| window_features(&w.pixels))
                .collect()
        });
        feats.extend(f);
        labels.extend(chunk.iter().map(|w| w.label.is_positive()));
    }
    let model = fit_logistic(&feats, &labels, size)?;
    Ok((
        model,
        FitReport {
            n_sources: windows.len(),
            n_train_sources: train.len(),
            n_train_augmented: feats.len(),
            n_held_out: held_idx.len(),
        },
    ))
}

/// Fits the calibration on the held-out split of `windows`, the same split
/// [`fit_scorer`] left out.
pub fn calibrate_scorer(
    model: &BaselineScorerModel,
    windows: &[LabeledWindow],
    cfg: &PipelineConfig,
) -> Result<CalibrationReport, PipelineError> {
    check_window_shapes(windows, cfg.window.size)?;
    let (_, held_idx) = split_holdout(windows.len(), cfg.holdout_fraction, cfg.seeds.split);
    let held: Vec<&LabeledWindow> = held_idx.iter().map(|&i| &windows[i]).collect();
    let scored: Vec<(RawScore, Label)> = pool(cfg.parallelism)?.install(|| {
        held.par_iter()
            .map(|w| model.score_window(&w.pixels).map(|s| (s, w.label)))
            .collect::<Result<_, _>>()
    })?;
    let fit = fit_bcts_traced(&scored)?;
    let probs = |m: &CalibrationModel| -> Vec<(f64, Label)> {
        scored
            .iter()
            .map(|(s, y)| (crate::scorer::apply_calibration(m, s).1, *y))
            .collect()
    };
    let calibrated = probs(&fit.model);
    let correct = calibrated
        .iter()
        .filter(|(p, y)| (*p >= 0.5) == y.is_positive())
        .count();
    Ok(CalibrationReport {
        n_held_out: held.len(),
        held_out_accuracy: correct as f64 / held.len().max(1) as f64,
        ece_uncalibrated: ece(&probs(&CalibrationModel::identity()), ECE_BINS)?,
        ece_calibrated: ece(&calibrated, ECE_BINS)?,
        calibration: fit.model,
        calibration_iterations: fit.iterations,
    })
}

/// [`fit_scorer`] then [`calibrate_scorer`].
pub fn train_and_calibrate(
    windows: &[LabeledWindow],
    cfg: &PipelineConfig,
) -> Result<(ModelFile, TrainReport), PipelineError> {
    let (model, fit) = fit_scorer(windows, cfg)?;
    let cal = calibrate_scorer(&model, windows, cfg)?;
    let report = TrainReport {
        n_sources: fit.n_sources,
        n_train_sources: fit.n_train_sources,
        n_train_augmented: fit.n_train_augmented,
        n_held_out: cal.n_held_out,
        held_out_accuracy: cal.held_out_accuracy,
        ece_uncalibrated: cal.ece_uncalibrated,
        ece_calibrated: cal.ece_calibrated,
        calibration: cal.calibration,
        calibration_iterations: cal.calibration_iterations,
    };
    Ok((ModelFile::new(model, cal.calibration), report))
}

/// Groups scored windows, keeps dateable candidates inside the latitude
/// band, and samples thermal inertia for each.
pub fn build_filtered_candidates(
    grids: &[ScoreGrid],
    archive: &dyn ArchiveSource,
    map: &TiBasemap,
    cfg: &PipelineConfig,
) -> Result<Vec<Candidate>, PipelineError> {
    let all = build_candidates(grids, archive.metas(), cfg.grouping_radius_m)?;
    let mut kept = apply_filters(all, &cfg.filter);
    assign_ti(&mut kept, map);
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selections {
    pub top_k: Vec<Candidate>,
    /// Bin by bin, each in descending confidence.
    pub stratified: Vec<Candidate>,
}

pub fn select(cands: &[Candidate], cfg: &PipelineConfig) -> Result<Selections, PipelineError> {
    let bins = cfg.bins()?;
    Ok(Selections {
        top_k: top_k(cands, cfg.k),
        stratified: stratified_top(cands, &bins, cfg.per_bin)
            .into_values()
            .flatten()
            .collect(),
    })
}

/// Thermal-inertia values of a selection, skipping candidates without one.
pub fn selection_ti(cands: &[Candidate]) -> Vec<f64> {
    cands.iter().filter_map(|c| c.ti_value).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSummary {
    pub expected: Vec<f64>,
    pub top_k: BiasReport,
    pub stratified: BiasReport,
}

pub fn bias_summary(
    sel: &Selections,
    map: &TiBasemap,
    cfg: &PipelineConfig,
) -> Result<BiasSummary, PipelineError> {
    let bins = cfg.bins()?;
    let expected = expected_distribution(map, (cfg.filter.lat_min, cfg.filter.lat_max), &bins)?;
    Ok(BiasSummary {
        top_k: bias_report_with_expected(&selection_ti(&sel.top_k), &bins, &expected, "top_k")?,
        stratified: bias_report_with_expected(
            &selection_ti(&sel.stratified),
            &bins,
            &expected,
            "stratified",
        )?,
        expected,
    })
}

pub struct PipelineRun {
    pub model: ModelFile,
    pub train: TrainReport,
    pub scan: ScanOutcome,
    pub candidates: Vec<Candidate>,
    pub selections: Selections,
    pub bias: BiasSummary,
}

/// Every stage in memory over one archive.
pub fn run_in_memory(
    archive: &dyn ArchiveSource,
    training: &[LabeledWindow],
    map: &TiBasemap,
    cfg: &PipelineConfig,
) -> Result<PipelineRun, PipelineError> {
    cfg.validate()?;
    let (model, train) = train_and_calibrate(training, cfg)?;
    let scan = scan_archive(
        archive,
        &model.scorer,
        &model.calibration,
        cfg.window,
        cfg.parallelism,
    )?;
    let candidates = build_filtered_candidates(&scan.grids, archive, map, cfg)?;
    let selections = select(&candidates, cfg)?;
    let bias = bias_summary(&selections, map, cfg)?;
    Ok(PipelineRun {
        model,
        train,
        scan,
        candidates,
        selections,
        bias,
    })
}
