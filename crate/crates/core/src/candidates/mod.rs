//! Turning score grids into spatially grouped candidates, and selecting
//! candidates for review.
//!
//! Grouping is greedy and seed-centered: windows are visited in descending
//! posterior, and each still-unassigned window opens a candidate that absorbs
//! every other unassigned window whose center lies within the grouping
//! radius of the seed's center. A window therefore belongs to exactly one
//! candidate, and no two seeds are closer than the radius.

mod basemap;
mod geodesy;
mod selection;
mod store;

pub use basemap::{sample_footprint_mean, sample_ti, Grid, TiBasemap, TiSample, TiSource};
pub use geodesy::{great_circle_distance, meters_per_degree, MARS_RADIUS_M};
pub use selection::{
    apply_filters, assign_ti, stratified_top, top_k, FilterParams, FormationWindow, TiBins,
    TimelinePoint,
};
pub use store::{read_candidates, write_candidates, CANDIDATE_SCHEMA_VERSION};

use std::collections::HashMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::raster::{window_center_geo, GeoPoint, ObservationMeta, RasterError, WindowRef};
use crate::scan::ScoreGrid;

pub const DEFAULT_GROUPING_RADIUS_M: f64 = 600.0;

#[derive(Debug, Error)]
pub enum CandidateError {
    #[error("score grid for unknown observation `{0}`")]
    UnknownObservation(String),
    #[error("score grid for `{id}` is {got_rows}x{got_cols}, expected {rows}x{cols}")]
    GridShape {
        id: String,
        rows: usize,
        cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("more than one score grid for `{0}`")]
    DuplicateGrid(String),
    #[error("basemap: {0}")]
    Basemap(String),
    #[error("footprint: {0}")]
    Footprint(String),
    #[error("candidate store: {0}")]
    Store(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One window of a candidate's timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub window: WindowRef,
    pub acquired_at: DateTime<Utc>,
    pub p_pos: f64,
    pub center: GeoPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub seed: WindowRef,
    pub center: GeoPoint,
    /// Posterior of the seed window, the maximum over members.
    pub confidence: f64,
    /// Sorted by acquisition time, then observation id, then offsets.
    pub members: Vec<Member>,
    #[serde(default)]
    pub ti_value: Option<f64>,
    #[serde(default = "missing_source")]
    pub ti_source: TiSource,
    /// Set by [`apply_filters`] for dateable candidates.
    #[serde(default)]
    pub formation: Option<FormationWindow>,
}

fn missing_source() -> TiSource {
    TiSource::Missing
}

/// Stable id derived from the seed window.
pub fn candidate_id(observation_id: &str, row_off: usize, col_off: usize) -> String {
    let digest = Sha256::digest(format!("{observation_id}:{row_off}:{col_off}").as_bytes());
    format!("c{}", hex::encode(&digest[..8]))
}

struct Scored {
    obs: usize,
    grid_row: usize,
    grid_col: usize,
    p: f32,
    window: WindowRef,
    center: GeoPoint,
}

/// Uniform lat/lon bucket grid sized to the grouping radius.
struct Buckets {
    cell_deg: f64,
    n_lon: i64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl Buckets {
    fn new(cell_deg: f64) -> Self {
        Self {
            cell_deg,
            n_lon: (360.0 / cell_deg).ceil() as i64,
            cells: HashMap::new(),
        }
    }

    fn key(&self, p: GeoPoint) -> (i64, i64) {
        let lat = ((p.lat + 90.0) / self.cell_deg).floor() as i64;
        let lon = (p.lon / self.cell_deg).floor() as i64;
        (lat, lon.rem_euclid(self.n_lon))
    }

    fn insert(&mut self, p: GeoPoint, idx: usize) {
        let k = self.key(p);
        self.cells.entry(k).or_default().push(idx);
    }

    /// Every bucket that may hold points within `radius_deg` of `p`.
    fn neighborhood(&self, p: GeoPoint, radius_deg: f64) -> Vec<(i64, i64)> {
        let (klat, klon) = self.key(p);
        let max_lat = (p.lat.abs() + 2.0 * radius_deg).min(90.0);
        let cos = max_lat.to_radians().cos();
        let span = if cos < 1e-9 {
            self.n_lon
        } else {
            ((radius_deg / cos) / self.cell_deg).ceil() as i64 + 1
        };
        let mut out = Vec::new();
        for dlat in -2..=2 {
            if 2 * span + 1 >= self.n_lon {
                out.extend((0..self.n_lon).map(|l| (klat + dlat, l)));
            } else {
                out.extend(
                    (-span..=span).map(|d| (klat + dlat, (klon + d).rem_euclid(self.n_lon))),
                );
            }
        }
        out
    }
}

/// Groups every window of every grid into candidates, returned in
/// descending confidence.
pub fn build_candidates(
    grids: &[ScoreGrid],
    metas: &[ObservationMeta],
    radius_m: f64,
) -> Result<Vec<Candidate>, CandidateError> {
    let mut sorted_metas: Vec<&ObservationMeta> = metas.iter().collect();
    sorted_metas.sort_by(|a, b| a.id.cmp(&b.id));
    let index: HashMap<&str, usize> = sorted_metas
        .iter()
        .enumerate()
        .map(|(i, m)| (m.id.as_str(), i))
        .collect();

    let mut seen = vec![false; sorted_metas.len()];
    let mut windows = Vec::new();
    for grid in grids {
        let &obs = index
            .get(grid.observation_id())
            .ok_or_else(|| CandidateError::UnknownObservation(grid.observation_id().to_string()))?;
        if std::mem::replace(&mut seen[obs], true) {
            return Err(CandidateError::DuplicateGrid(
                grid.observation_id().to_string(),
            ));
        }
        let meta = sorted_metas[obs];
        let (rows, cols) = grid.params().grid_dims(meta.width, meta.height);
        if (rows, cols) != (grid.rows(), grid.cols()) {
            return Err(CandidateError::GridShape {
                id: meta.id.clone(),
                rows,
                cols,
                got_rows: grid.rows(),
                got_cols: grid.cols(),
            });
        }
        for (r, c, p) in grid.cells() {
            let window = grid.window(r, c);
            let center = window_center_geo(meta, &window)?;
            windows.push(Scored {
                obs,
                grid_row: r,
                grid_col: c,
                p,
                window,
                center,
            });
        }
    }

    windows.sort_by(|a, b| {
        b.p.total_cmp(&a.p)
            .then(a.obs.cmp(&b.obs))
            .then(a.grid_row.cmp(&b.grid_row))
            .then(a.grid_col.cmp(&b.grid_col))
    });

    let radius_deg = radius_m / meters_per_degree(MARS_RADIUS_M);
    let mut buckets = Buckets::new(radius_deg.max(1e-9));
    for (i, w) in windows.iter().enumerate() {
        buckets.insert(w.center, i);
    }

    let mut assigned = vec![false; windows.len()];
    let mut out = Vec::new();
    for seed_idx in 0..windows.len() {
        if assigned[seed_idx] {
            continue;
        }
        assigned[seed_idx] = true;
        let seed = &windows[seed_idx];
        let mut member_idx = vec![seed_idx];
        for key in buckets.neighborhood(seed.center, radius_deg) {
            let Some(bucket) = buckets.cells.get(&key) else {
                continue;
            };
            for &j in bucket {
                if !assigned[j]
                    && great_circle_distance(seed.center, windows[j].center, MARS_RADIUS_M)
                        <= radius_m
                {
                    assigned[j] = true;
                    member_idx.push(j);
                }
            }
        }
        let mut members: Vec<(usize, Member)> = member_idx
            .into_iter()
            .map(|j| {
                let w = &windows[j];
                (
                    w.obs,
                    Member {
                        window: w.window.clone(),
                        acquired_at: sorted_metas[w.obs].acquired_at,
                        p_pos: w.p as f64,
                        center: w.center,
                    },
                )
            })
            .collect();
        members.sort_by(|(oa, a), (ob, b)| {
            a.acquired_at
                .cmp(&b.acquired_at)
                .then(oa.cmp(ob))
                .then(a.window.row_off.cmp(&b.window.row_off))
                .then(a.window.col_off.cmp(&b.window.col_off))
        });
        out.push(Candidate {
            id: candidate_id(
                &seed.window.observation_id,
                seed.window.row_off,
                seed.window.col_off,
            ),
            seed: seed.window.clone(),
            center: seed.center,
            confidence: seed.p as f64,
            members: members.into_iter().map(|(_, m)| m).collect(),
            ti_value: None,
            ti_source: TiSource::Missing,
            formation: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{GeoTransform, WindowParams};
    use chrono::TimeZone;

    /// 300x300 observation whose single window is centered on `center`.
    fn single(id: &str, day: u32, center: GeoPoint) -> ObservationMeta {
        let dpp = 1e-4;
        let half = 149.5 * dpp;
        ObservationMeta {
            id: id.into(),
            acquired_at: Utc.with_ymd_and_hms(2015, 1, day, 0, 0, 0).unwrap(),
            width: 300,
            height: 300,
            geo: GeoTransform::new(center.lon - half, center.lat + half, dpp).unwrap(),
        }
    }

    fn grid(id: &str, p: f32) -> ScoreGrid {
        ScoreGrid::new(id, WindowParams::default(), 1, 1, vec![p]).unwrap()
    }

    fn offset_east(p: GeoPoint, meters: f64) -> GeoPoint {
        GeoPoint::new(p.lat, p.lon + meters / meters_per_degree(MARS_RADIUS_M))
    }

    #[test]
    fn nearby_detections_merge() {
        let a = GeoPoint::new(0.0, 30.0);
        let metas = vec![single("a", 1, a), single("b", 2, offset_east(a, 500.0))];
        let c = build_candidates(&[grid("a", 0.2), grid("b", 0.99)], &metas, 600.0).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].members.len(), 2);
        assert_eq!(c[0].seed.observation_id, "b");
        assert_eq!(c[0].members[0].window.observation_id, "a");
        assert!((c[0].confidence - 0.99f32 as f64).abs() < 1e-12);
    }

    #[test]
    fn distant_detections_split() {
        let a = GeoPoint::new(0.0, 30.0);
        let metas = vec![single("a", 1, a), single("b", 2, offset_east(a, 700.0))];
        let c = build_candidates(&[grid("a", 0.9), grid("b", 0.99)], &metas, 600.0).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c[0].confidence > c[1].confidence);
    }

    #[test]
    fn singleton() {
        let metas = vec![single("a", 1, GeoPoint::new(10.0, 100.0))];
        let c = build_candidates(&[grid("a", 0.42)], &metas, 600.0).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].confidence, 0.42f32 as f64);
        assert_eq!(c[0].id, candidate_id("a", 0, 0));
    }

    #[test]
    fn merges_across_prime_meridian() {
        let a = GeoPoint::new(0.0, 359.999);
        let metas = vec![single("a", 1, a), single("b", 2, offset_east(a, 200.0))];
        let c = build_candidates(&[grid("a", 0.5), grid("b", 0.6)], &metas, 600.0).unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn mismatches_are_errors() {
        let metas = vec![single("a", 1, GeoPoint::new(0.0, 0.0))];
        assert!(matches!(
            build_candidates(&[grid("zz", 0.5)], &metas, 600.0),
            Err(CandidateError::UnknownObservation(_))
        ));
        let wrong = ScoreGrid::new("a", WindowParams::default(), 2, 1, vec![0.1, 0.2]).unwrap();
        assert!(matches!(
            build_candidates(&[wrong], &metas, 600.0),
            Err(CandidateError::GridShape { .. })
        ));
        assert!(matches!(
            build_candidates(&[grid("a", 0.1), grid("a", 0.1)], &metas, 600.0),
            Err(CandidateError::DuplicateGrid(_))
        ));
    }

    #[test]
    fn equal_scores_tie_break_by_observation() {
        let a = GeoPoint::new(0.0, 30.0);
        let metas = vec![single("b", 1, a), single("a", 2, offset_east(a, 100.0))];
        let c = build_candidates(&[grid("b", 0.7), grid("a", 0.7)], &metas, 600.0).unwrap();
        assert_eq!(c[0].seed.observation_id, "a");
    }
}
