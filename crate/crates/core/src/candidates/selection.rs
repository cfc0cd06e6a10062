use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{sample_ti, Candidate, CandidateError, TiBasemap, TiSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelinePoint {
    pub observation_id: String,
    pub acquired_at: DateTime<Utc>,
    pub p_pos: f64,
}

/// Interval `(before, after]` in which the impact formed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormationWindow {
    pub before: TimelinePoint,
    pub after: TimelinePoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    pub lat_min: f64,
    pub lat_max: f64,
    /// A member below this posterior counts as a non-detection.
    pub nondetect_threshold: f64,
    /// A member at or above this posterior counts as a detection.
    pub detect_threshold: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            lat_min: -60.0,
            lat_max: 60.0,
            nondetect_threshold: 0.5,
            detect_threshold: 0.95,
        }
    }
}

fn formation_of(c: &Candidate, params: &FilterParams) -> Option<FormationWindow> {
    let first_detection = c
        .members
        .iter()
        .find(|m| m.p_pos >= params.detect_threshold)?;
    // latest non-detection strictly before the first detection
    let before = c.members.iter().rfind(|m| {
        m.p_pos < params.nondetect_threshold && m.acquired_at < first_detection.acquired_at
    })?;
    Some(FormationWindow {
        before: TimelinePoint {
            observation_id: before.window.observation_id.clone(),
            acquired_at: before.acquired_at,
            p_pos: before.p_pos,
        },
        after: TimelinePoint {
            observation_id: first_detection.window.observation_id.clone(),
            acquired_at: first_detection.acquired_at,
            p_pos: first_detection.p_pos,
        },
    })
}

/// Keeps candidates inside the latitude band that have an earlier
/// non-detection bounding their formation date, recording that window.
pub fn apply_filters(cands: Vec<Candidate>, params: &FilterParams) -> Vec<Candidate> {
    cands
        .into_iter()
        .filter_map(|mut c| {
            if c.center.lat < params.lat_min || c.center.lat > params.lat_max {
                return None;
            }
            c.formation = Some(formation_of(&c, params)?);
            Some(c)
        })
        .collect()
}

/// Samples thermal inertia at each candidate's seed center.
pub fn assign_ti(cands: &mut [Candidate], map: &TiBasemap) {
    for c in cands {
        let s = sample_ti(map, c.center);
        c.ti_value = s.value;
        c.ti_source = s.source;
    }
}

fn by_confidence(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.id.cmp(&b.id))
}

/// First `k` candidates by descending confidence, ties broken by id.
pub fn top_k(cands: &[Candidate], k: usize) -> Vec<Candidate> {
    let mut v = cands.to_vec();
    v.sort_by(by_confidence);
    v.truncate(k);
    v
}

/// Thermal-inertia bins: `[e0, e1), [e1, e2), …` with the last bin open
/// above its lower edge. The final edge only documents the nominal range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiBins {
    edges: Vec<f64>,
}

impl Default for TiBins {
    fn default() -> Self {
        Self {
            edges: (0..=10).map(|i| i as f64 * 100.0).collect(),
        }
    }
}

impl TiBins {
    pub fn new(edges: Vec<f64>) -> Result<Self, CandidateError> {
        if edges.len() < 2 {
            return Err(CandidateError::Basemap(
                "need at least two bin edges".into(),
            ));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| !e.is_finite()) {
            return Err(CandidateError::Basemap(
                "bin edges must be finite and increasing".into(),
            ));
        }
        Ok(Self { edges })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bin_of(&self, v: f64) -> Option<usize> {
        if !v.is_finite() || v < self.edges[0] {
            return None;
        }
        let n = self.len();
        Some(self.edges[1..n].partition_point(|&e| e <= v))
    }

    /// Human-readable bin label, e.g. `100-200` or `900+`.
    pub fn label(&self, bin: usize) -> String {
        if bin + 1 == self.len() {
            format!("{}+", self.edges[bin])
        } else {
            format!("{}-{}", self.edges[bin], self.edges[bin + 1])
        }
    }
}

/// Top `per_bin` candidates by confidence within each thermal-inertia bin.
/// Candidates without a TI value are skipped. Every bin has an entry.
pub fn stratified_top(
    cands: &[Candidate],
    bins: &TiBins,
    per_bin: usize,
) -> BTreeMap<usize, Vec<Candidate>> {
    let mut out: BTreeMap<usize, Vec<Candidate>> =
        (0..bins.len()).map(|b| (b, Vec::new())).collect();
    for c in cands {
        if c.ti_source == TiSource::Missing {
            continue;
        }
        if let Some(b) = c.ti_value.and_then(|v| bins.bin_of(v)) {
            out.get_mut(&b).unwrap().push(c.clone());
        }
    }
    for list in out.values_mut() {
        list.sort_by(by_confidence);
        list.truncate(per_bin);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::candidates::Member;
    use crate::raster::{GeoPoint, WindowRef};
    use chrono::TimeZone;

    fn member(day: u32, p: f64) -> Member {
        Member {
            window: WindowRef {
                observation_id: format!("o{day}"),
                row_off: 0,
                col_off: 0,
                size: 300,
            },
            acquired_at: Utc.with_ymd_and_hms(2016, 1, day, 0, 0, 0).unwrap(),
            p_pos: p,
            center: GeoPoint::new(0.0, 0.0),
        }
    }

    fn cand(id: &str, lat: f64, conf: f64, members: Vec<Member>) -> Candidate {
        Candidate {
            id: id.into(),
            seed: members
                .first()
                .map(|m| m.window.clone())
                .unwrap_or(WindowRef {
                    observation_id: "x".into(),
                    row_off: 0,
                    col_off: 0,
                    size: 300,
                }),
            center: GeoPoint::new(lat, 10.0),
            confidence: conf,
            members,
            ti_value: None,
            ti_source: TiSource::Missing,
            formation: None,
        }
    }

    fn with_ti(mut c: Candidate, ti: f64) -> Candidate {
        c.ti_value = Some(ti);
        c.ti_source = TiSource::Primary;
        c
    }

    #[test]
    fn dateable_candidate_kept_with_formation_window() {
        let c = cand("a", 10.0, 0.99, vec![member(1, 0.02), member(2, 0.99)]);
        let out = apply_filters(vec![c], &FilterParams::default());
        assert_eq!(out.len(), 1);
        let f = out[0].formation.as_ref().unwrap();
        assert_eq!(f.before.observation_id, "o1");
        assert_eq!(f.after.observation_id, "o2");
    }

    #[test]
    fn undateable_and_high_latitude_dropped() {
        let lone = cand("a", 10.0, 0.99, vec![member(1, 0.99)]);
        let north = cand("b", 61.0, 0.99, vec![member(1, 0.02), member(2, 0.99)]);
        let south = cand("c", -61.0, 0.99, vec![member(1, 0.02), member(2, 0.99)]);
        assert!(apply_filters(vec![lone, north, south], &FilterParams::default()).is_empty());
    }

    #[test]
    fn nondetection_must_precede_first_detection() {
        // non-detection only after the detection: not dateable
        let c = cand(
            "a",
            0.0,
            0.99,
            vec![member(1, 0.99), member(2, 0.1), member(3, 0.98)],
        );
        assert!(apply_filters(vec![c], &FilterParams::default()).is_empty());
        // same-date low score does not count as earlier
        let mut m = member(1, 0.1);
        m.window.observation_id = "o0".into();
        let c = cand("b", 0.0, 0.99, vec![m, member(1, 0.99)]);
        assert!(apply_filters(vec![c], &FilterParams::default()).is_empty());
        // intermediate scores between 0.5 and 0.95 are neither
        let c = cand("c", 0.0, 0.9, vec![member(1, 0.1), member(2, 0.9)]);
        assert!(apply_filters(vec![c], &FilterParams::default()).is_empty());
    }

    #[test]
    fn latest_nondetection_is_recorded() {
        let c = cand(
            "a",
            0.0,
            0.99,
            vec![
                member(1, 0.0),
                member(3, 0.3),
                member(5, 0.97),
                member(7, 0.99),
            ],
        );
        let out = apply_filters(vec![c], &FilterParams::default());
        let f = out[0].formation.as_ref().unwrap();
        assert_eq!(f.before.observation_id, "o3");
        assert_eq!(f.after.observation_id, "o5");
        // idempotent
        assert_eq!(apply_filters(out.clone(), &FilterParams::default()), out);
    }

    #[test]
    fn top_k_ordering() {
        let cs = vec![
            cand("x", 0.0, 0.97, vec![]),
            cand("y", 0.0, 0.99, vec![]),
            cand("z", 0.0, 0.98, vec![]),
        ];
        let ids: Vec<_> = top_k(&cs, 2).into_iter().map(|c| c.id).collect();
        assert_eq!(ids, ["y", "z"]);
        assert_eq!(top_k(&cs, 10).len(), 3);
        let tied = vec![cand("b", 0.0, 0.9, vec![]), cand("a", 0.0, 0.9, vec![])];
        let ids: Vec<_> = top_k(&tied, 2).into_iter().map(|c| c.id).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn bins_are_half_open_with_open_top() {
        let b = TiBins::default();
        assert_eq!(b.len(), 10);
        assert_eq!(b.bin_of(0.0), Some(0));
        assert_eq!(b.bin_of(99.999), Some(0));
        assert_eq!(b.bin_of(100.0), Some(1));
        assert_eq!(b.bin_of(899.9), Some(8));
        assert_eq!(b.bin_of(900.0), Some(9));
        assert_eq!(b.bin_of(1050.0), Some(9));
        assert_eq!(b.bin_of(-1.0), None);
        assert_eq!(b.label(9), "900+");
        assert!(TiBins::new(vec![0.0]).is_err());
        assert!(TiBins::new(vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn stratified_selection() {
        let cs = vec![
            with_ti(cand("a", 0.0, 0.9, vec![]), 100.0),
            with_ti(cand("b", 0.0, 0.8, vec![]), 150.0),
            with_ti(cand("c", 0.0, 0.7, vec![]), 1050.0),
            cand("d", 0.0, 0.99, vec![]),
        ];
        let s = stratified_top(&cs, &TiBins::default(), 100);
        assert_eq!(s.len(), 10);
        assert_eq!(
            s[&1].iter().map(|c| c.id.as_str()).collect::<Vec<_>>(),
            ["a", "b"]
        );
        assert_eq!(s[&9][0].id, "c");
        assert_eq!(s.values().map(Vec::len).sum::<usize>(), 3);
        let s1 = stratified_top(&cs, &TiBins::default(), 1);
        assert_eq!(s1[&1].len(), 1);
        assert_eq!(s1[&1][0].id, "a");
    }
}
