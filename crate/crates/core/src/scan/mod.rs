//! Parallel evaluation of a window scorer over every window of every
//! observation in an archive.
//!
//! Work is partitioned per observation; workers share nothing mutable and
//! send finished grids to a single committing thread. Output therefore does
//! not depend on the worker count.

mod grid;
mod store;

pub use grid::{GridIndexEntry, ScoreGrid};
pub(crate) use store::write_atomic;
pub use store::{ScanCheckpoint, ScanIndex, ScanStore, SCAN_INDEX_VERSION};

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::raster::{extract_windows, ArchiveSource, Observation, RasterError, WindowParams};
use crate::scorer::{apply_calibration, CalibrationModel, ScorerError, WindowScorer};

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("parallelism must be >= 1")]
    Parallelism,
    #[error("scorer expects {scorer}px windows, scan configured for {configured}px")]
    WindowSize { scorer: usize, configured: usize },
    #[error("checkpoint fingerprint {found} does not match current configuration {expected}; rescan without --resume or restore the original model and window settings")]
    FingerprintMismatch { expected: String, found: String },
    #[error("no checkpoint to resume from in {0}")]
    NoCheckpoint(String),
    #[error("scan interrupted after {completed} observations")]
    Interrupted { completed: usize },
    #[error("score grid format: {0}")]
    Format(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error("thread pool: {0}")]
    Pool(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanFailure {
    pub observation_id: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ScanOutcome {
    /// Sorted by observation id.
    pub grids: Vec<ScoreGrid>,
    pub failures: Vec<ScanFailure>,
    pub windows_scored: usize,
    pub elapsed: Duration,
}

impl ScanOutcome {
    pub fn windows_per_second(&self) -> f64 {
        self.windows_scored as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }

    /// Digest over every grid's serialized bytes, in id order.
    pub fn checksum(&self) -> String {
        combined_checksum(&self.grids)
    }
}

pub fn combined_checksum(grids: &[ScoreGrid]) -> String {
    let mut sorted: Vec<&ScoreGrid> = grids.iter().collect();
    sorted.sort_by(|a, b| a.observation_id().cmp(b.observation_id()));
    let mut h = Sha256::new();
    for g in sorted {
        h.update(g.to_bytes());
    }
    hex::encode(h.finalize())
}

/// Digest identifying everything that determines scan output.
pub fn config_fingerprint(
    scorer: &dyn WindowScorer,
    calibration: &CalibrationModel,
    params: WindowParams,
) -> String {
    let mut h = Sha256::new();
    h.update(scorer.fingerprint().as_bytes());
    h.update(serde_json::to_vec(calibration).expect("calibration serializes"));
    h.update(serde_json::to_vec(&params).expect("params serialize"));
    hex::encode(h.finalize())
}

/// Scores every window of one observation and calibrates the result.
pub fn scan_observation(
    obs: &Observation,
    scorer: &dyn WindowScorer,
    calibration: &CalibrationModel,
    params: WindowParams,
) -> Result<ScoreGrid, ScanError> {
    let (rows, cols) = params.grid_dims(obs.width(), obs.height());
    let mut values = Vec::with_capacity(rows * cols);
    for w in extract_windows(obs.meta(), params) {
        let patch = obs.window_patch(&w)?;
        let raw = scorer.score_window(&patch)?;
        let (_, p_pos) = apply_calibration(calibration, &raw);
        values.push(p_pos as f32);
    }
    ScoreGrid::new(obs.id(), params, rows, cols, values)
}

fn panic_message(e: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = e.downcast_ref::<&str>() {
        format!("panic: {s}")
    } else if let Some(s) = e.downcast_ref::<String>() {
        format!("panic: {s}")
    } else {
        "panic".to_string()
    }
}

fn scan_one(
    archive: &dyn ArchiveSource,
    id: &str,
    scorer: &dyn WindowScorer,
    calibration: &CalibrationModel,
    params: WindowParams,
) -> Result<ScoreGrid, String> {
    catch_unwind(AssertUnwindSafe(|| {
        let obs = archive.load(id)?;
        scan_observation(&obs, scorer, calibration, params)
    }))
    .map_err(panic_message)?
    .map_err(|e| e.to_string())
}

fn build_pool(parallelism: usize) -> Result<rayon::ThreadPool, ScanError> {
    if parallelism == 0 {
        return Err(ScanError::Parallelism);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| ScanError::Pool(e.to_string()))
}

fn check_sizes(scorer: &dyn WindowScorer, params: WindowParams) -> Result<(), ScanError> {
    if scorer.window_size() != params.size {
        return Err(ScanError::WindowSize {
            scorer: scorer.window_size(),
            configured: params.size,
        });
    }
    Ok(())
}

/// Scans an archive in memory. Failed observations are reported in
/// [`ScanOutcome::failures`] and do not affect other grids.
pub fn scan_archive(
    archive: &dyn ArchiveSource,
    scorer: &dyn WindowScorer,
    calibration: &CalibrationModel,
    params: WindowParams,
    parallelism: usize,
) -> Result<ScanOutcome, ScanError> {
    use rayon::prelude::*;
    check_sizes(scorer, params)?;
    let pool = build_pool(parallelism)?;
    let start = Instant::now();
    let ids: Vec<&str> = archive.metas().iter().map(|m| m.id.as_str()).collect();
    let results: Vec<(&str, Result<ScoreGrid, String>)> = pool.install(|| {
        ids.par_iter()
            .map(|&id| (id, scan_one(archive, id, scorer, calibration, params)))
            .collect()
    });
    let mut grids = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(g) => grids.push(g),
            Err(message) => failures.push(ScanFailure {
                observation_id: id.to_string(),
                message,
            }),
        }
    }
    let windows_scored = grids.iter().map(|g| g.values().len()).sum();
    Ok(ScanOutcome {
        grids,
        failures,
        windows_scored,
        elapsed: start.elapsed(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub parallelism: usize,
    /// Stop committing after this many observations in this run, leaving
    /// the checkpoint as a killed process would.
    pub stop_after: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            parallelism: 1,
            stop_after: None,
        }
    }
}

/// Scans into a persistent store, committing one grid file per observation
/// and updating the checkpoint after each commit.
pub fn scan_to_store(
    archive: &dyn ArchiveSource,
    scorer: &dyn WindowScorer,
    calibration: &CalibrationModel,
    params: WindowParams,
    opts: RunOptions,
    store: &ScanStore,
) -> Result<ScanOutcome, ScanError> {
    let fingerprint = config_fingerprint(scorer, calibration, params);
    store.reset()?;
    let checkpoint = ScanCheckpoint {
        fingerprint,
        completed_ids: BTreeSet::new(),
    };
    store.save_checkpoint(&checkpoint)?;
    run(
        archive,
        scorer,
        calibration,
        params,
        opts,
        store,
        checkpoint,
    )
}

/// Continues an interrupted [`scan_to_store`]. Observations already listed in
/// the checkpoint are loaded from the store rather than rescanned.
pub fn resume_scan(
    archive: &dyn ArchiveSource,
    scorer: &dyn WindowScorer,
    calibration: &CalibrationModel,
    params: WindowParams,
    opts: RunOptions,
    store: &ScanStore,
) -> Result<ScanOutcome, ScanError> {
    let expected = config_fingerprint(scorer, calibration, params);
    let checkpoint = store
        .load_checkpoint()?
        .ok_or_else(|| ScanError::NoCheckpoint(store.dir().display().to_string()))?;
    if checkpoint.fingerprint != expected {
        return Err(ScanError::FingerprintMismatch {
            expected,
            found: checkpoint.fingerprint,
        });
    }
    run(
        archive,
        scorer,
        calibration,
        params,
        opts,
        store,
        checkpoint,
    )
}

fn run(
    archive: &dyn ArchiveSource,
    scorer: &dyn WindowScorer,
    calibration: &CalibrationModel,
    params: WindowParams,
    opts: RunOptions,
    store: &ScanStore,
    mut checkpoint: ScanCheckpoint,
) -> Result<ScanOutcome, ScanError> {
    use rayon::prelude::*;
    check_sizes(scorer, params)?;
    let pool = build_pool(opts.parallelism)?;
    let start = Instant::now();
    let pending: Vec<&str> = archive
        .metas()
        .iter()
        .map(|m| m.id.as_str())
        .filter(|id| !checkpoint.completed_ids.contains(*id))
        .collect();

    let cancel = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(String, Result<ScoreGrid, String>)>();
    let mut failures = Vec::new();
    let mut committed = 0usize;
    let mut commit_error = None;

    std::thread::scope(|s| {
        let cancel = &cancel;
        let pending = &pending;
        let pool = &pool;
        s.spawn(move || {
            pool.install(|| {
                pending.par_iter().for_each_with(tx, |tx, &id| {
                    if cancel.load(Ordering::SeqCst) {
                        return;
                    }
                    let r = scan_one(archive, id, scorer, calibration, params);
                    let _ = tx.send((id.to_string(), r));
                });
            });
        });

        // single writer: grid file, then checkpoint
        for (id, result) in rx {
            if cancel.load(Ordering::SeqCst) {
                continue;
            }
            match result {
                Ok(grid) => {
                    let committed_ok = store.write_grid(&grid).and_then(|_| {
                        checkpoint.completed_ids.insert(id);
                        store.save_checkpoint(&checkpoint)
                    });
                    if let Err(e) = committed_ok {
                        commit_error = Some(e);
                        cancel.store(true, Ordering::SeqCst);
                        continue;
                    }
                    committed += 1;
                    if opts.stop_after.is_some_and(|n| committed >= n) {
                        cancel.store(true, Ordering::SeqCst);
                    }
                }
                Err(message) => failures.push(ScanFailure {
                    observation_id: id,
                    message,
                }),
            }
        }
    });

    if let Some(e) = commit_error {
        return Err(e);
    }
    if cancel.load(Ordering::SeqCst) && committed < pending.len() {
        return Err(ScanError::Interrupted {
            completed: checkpoint.completed_ids.len(),
        });
    }

    let mut grids = Vec::with_capacity(checkpoint.completed_ids.len());
    for id in &checkpoint.completed_ids {
        grids.push(store.read_grid(id)?);
    }
    failures.sort_by(|a, b| a.observation_id.cmp(&b.observation_id));
    store.write_index(&checkpoint.fingerprint, params, &grids, &failures)?;
    let windows_scored = grids.iter().map(|g| g.values().len()).sum();
    Ok(ScanOutcome {
        grids,
        failures,
        windows_scored,
        elapsed: start.elapsed(),
    })
}
