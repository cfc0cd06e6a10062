use chrono::{TimeZone, Utc};
use impactscan::candidates::{apply_filters, build_candidates, write_candidates, FilterParams};
use impactscan::raster::{
    ArchiveSource, GeoTransform, InMemoryArchive, Observation, ObservationMeta, Patch, RasterError,
    WindowParams,
};
use impactscan::scan::{
    resume_scan, scan_archive, scan_to_store, RunOptions, ScanError, ScanStore,
};
use impactscan::scorer::{window_features, CalibrationModel, RawScore, ScorerError, WindowScorer};
use impactscan::synth::{SyntheticWorld, SyntheticWorldConfig};

/// Scores windows by their center-minus-annulus contrast.
struct ContrastScorer;

impl WindowScorer for ContrastScorer {
    fn window_size(&self) -> usize {
        300
    }

    fn score_window(&self, window: &Patch) -> Result<RawScore, ScorerError> {
        let f = window_features(window);
        Ok(RawScore {
            z_neg: 0.0,
            z_pos: 40.0 * f[2].abs() - 2.0,
        })
    }

    fn fingerprint(&self) -> String {
        "contrast-test-1".into()
    }
}

fn world() -> SyntheticWorld {
    SyntheticWorld::generate(&SyntheticWorldConfig {
        n_sites: 10,
        rng_seed: 11,
        impact_rate: 0.2,
        ..Default::default()
    })
    .unwrap()
}

fn flat_archive(n: usize, w: usize, h: usize) -> InMemoryArchive {
    let obs = (0..n)
        .map(|i| {
            let meta = ObservationMeta {
                id: format!("F{i:04}"),
                acquired_at: Utc.with_ymd_and_hms(2010, 1, 1, 0, 0, 0).unwrap()
                    + chrono::Duration::days(i as i64),
                width: w,
                height: h,
                geo: GeoTransform::new(10.0 + i as f64 * 0.1, 0.0, 1e-4).unwrap(),
            };
            Observation::new(meta, vec![0.4; w * h]).unwrap()
        })
        .collect();
    InMemoryArchive::new(obs).unwrap()
}

fn params() -> WindowParams {
    WindowParams::default()
}

fn candidate_bytes(grids: &[impactscan::scan::ScoreGrid], archive: &dyn ArchiveSource) -> Vec<u8> {
    let cands = apply_filters(
        build_candidates(grids, archive.metas(), 600.0).unwrap(),
        &FilterParams::default(),
    );
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("candidates.jsonl");
    write_candidates(&p, &cands).unwrap();
    std::fs::read(p).unwrap()
}

#[test]
fn worker_count_does_not_change_output() {
    let w = world();
    let cal = CalibrationModel::identity();
    let one = scan_archive(&w, &ContrastScorer, &cal, params(), 1).unwrap();
    let four = scan_archive(&w, &ContrastScorer, &cal, params(), 4).unwrap();
    assert!(one.failures.is_empty());
    assert_eq!(one.checksum(), four.checksum());
    assert_eq!(
        candidate_bytes(&one.grids, &w),
        candidate_bytes(&four.grids, &w)
    );

    let d1 = tempfile::tempdir().unwrap();
    let d4 = tempfile::tempdir().unwrap();
    let s1 = scan_to_store(
        &w,
        &ContrastScorer,
        &cal,
        params(),
        RunOptions {
            parallelism: 1,
            stop_after: None,
        },
        &ScanStore::open(d1.path()).unwrap(),
    )
    .unwrap();
    let s4 = scan_to_store(
        &w,
        &ContrastScorer,
        &cal,
        params(),
        RunOptions {
            parallelism: 4,
            stop_after: None,
        },
        &ScanStore::open(d4.path()).unwrap(),
    )
    .unwrap();
    assert_eq!(s1.checksum(), one.checksum());
    assert_eq!(s4.checksum(), one.checksum());
    assert_eq!(
        std::fs::read(d1.path().join("index.json")).unwrap(),
        std::fs::read(d4.path().join("index.json")).unwrap()
    );
}

#[test]
fn hundred_observations_give_1500_windows() {
    let a = flat_archive(100, 600, 450);
    let out = scan_archive(
        &a,
        &ContrastScorer,
        &CalibrationModel::identity(),
        params(),
        2,
    )
    .unwrap();
    assert_eq!(out.grids.len(), 100);
    assert_eq!(out.windows_scored, 1500);
    assert!(out.grids.iter().all(|g| (g.rows(), g.cols()) == (3, 5)));
}

#[test]
fn empty_archive_is_not_an_error() {
    let a = InMemoryArchive::new(Vec::new()).unwrap();
    let out = scan_archive(
        &a,
        &ContrastScorer,
        &CalibrationModel::identity(),
        params(),
        1,
    )
    .unwrap();
    assert!(out.grids.is_empty() && out.failures.is_empty());
    assert_eq!(out.windows_scored, 0);
}

/// Panics when asked for one particular observation.
struct Poisoned(InMemoryArchive, &'static str);

impl ArchiveSource for Poisoned {
    fn metas(&self) -> &[ObservationMeta] {
        self.0.metas()
    }

    fn load(&self, id: &str) -> Result<Observation, RasterError> {
        if id == self.1 {
            panic!("corrupt tile {id}");
        }
        self.0.load(id)
    }
}

#[test]
fn a_panicking_observation_is_isolated() {
    let a = Poisoned(flat_archive(6, 300, 300), "F0003");
    let out = scan_archive(
        &a,
        &ContrastScorer,
        &CalibrationModel::identity(),
        params(),
        3,
    )
    .unwrap();
    assert_eq!(out.grids.len(), 5);
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.failures[0].observation_id, "F0003");
    assert!(out.failures[0].message.contains("corrupt tile"));

    let dir = tempfile::tempdir().unwrap();
    let store = ScanStore::open(dir.path()).unwrap();
    let out = scan_to_store(
        &a,
        &ContrastScorer,
        &CalibrationModel::identity(),
        params(),
        RunOptions::default(),
        &store,
    )
    .unwrap();
    assert_eq!(out.grids.len(), 5);
    assert_eq!(store.read_index().unwrap().failures.len(), 1);
}

#[test]
fn kill_and_resume_matches_uninterrupted() {
    let w = world();
    let cal = CalibrationModel::identity();
    let full_dir = tempfile::tempdir().unwrap();
    let full = scan_to_store(
        &w,
        &ContrastScorer,
        &cal,
        params(),
        RunOptions {
            parallelism: 2,
            stop_after: None,
        },
        &ScanStore::open(full_dir.path()).unwrap(),
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let store = ScanStore::open(dir.path()).unwrap();
    let err = scan_to_store(
        &w,
        &ContrastScorer,
        &cal,
        params(),
        RunOptions {
            parallelism: 2,
            stop_after: Some(4),
        },
        &store,
    )
    .unwrap_err();
    let ScanError::Interrupted { completed } = err else {
        panic!("expected interruption, got {err}");
    };
    assert!(completed >= 4 && completed < w.metas().len());
    assert_eq!(
        store
            .load_checkpoint()
            .unwrap()
            .unwrap()
            .completed_ids
            .len(),
        completed
    );
    // a stray temp file from the moment of the kill must not matter
    std::fs::write(dir.path().join("grids").join("junk.grid.tmp"), b"partial").unwrap();

    let resumed = resume_scan(
        &w,
        &ContrastScorer,
        &cal,
        params(),
        RunOptions {
            parallelism: 3,
            stop_after: None,
        },
        &store,
    )
    .unwrap();
    assert_eq!(resumed.checksum(), full.checksum());
    assert_eq!(
        candidate_bytes(&resumed.grids, &w),
        candidate_bytes(&full.grids, &w)
    );
    assert_eq!(
        std::fs::read(dir.path().join("index.json")).unwrap(),
        std::fs::read(full_dir.path().join("index.json")).unwrap()
    );
}

#[test]
fn resume_rejects_changed_stride() {
    let a = flat_archive(4, 600, 450);
    let cal = CalibrationModel::identity();
    let dir = tempfile::tempdir().unwrap();
    let store = ScanStore::open(dir.path()).unwrap();
    let _ = scan_to_store(
        &a,
        &ContrastScorer,
        &cal,
        params(),
        RunOptions {
            parallelism: 1,
            stop_after: Some(1),
        },
        &store,
    );
    let other = WindowParams::new(300, 100).unwrap();
    let err = resume_scan(
        &a,
        &ContrastScorer,
        &cal,
        other,
        RunOptions::default(),
        &store,
    )
    .unwrap_err();
    assert!(
        matches!(err, ScanError::FingerprintMismatch { .. }),
        "{err}"
    );
    assert!(err.to_string().contains("rescan"));
}

#[test]
fn resume_without_checkpoint_fails() {
    let a = flat_archive(1, 300, 300);
    let dir = tempfile::tempdir().unwrap();
    let store = ScanStore::open(dir.path()).unwrap();
    let err = resume_scan(
        &a,
        &ContrastScorer,
        &CalibrationModel::identity(),
        params(),
        RunOptions::default(),
        &store,
    )
    .unwrap_err();
    assert!(matches!(err, ScanError::NoCheckpoint(_)));
}

#[test]
fn mismatched_window_size_and_zero_workers_are_rejected() {
    let a = flat_archive(1, 300, 300);
    let cal = CalibrationModel::identity();
    let err = scan_archive(
        &a,
        &ContrastScorer,
        &cal,
        WindowParams::new(200, 50).unwrap(),
        1,
    )
    .unwrap_err();
    assert!(matches!(
        err,
        ScanError::WindowSize {
            scorer: 300,
            configured: 200
        }
    ));
    assert!(matches!(
        scan_archive(&a, &ContrastScorer, &cal, params(), 0),
        Err(ScanError::Parallelism)
    ));
}
