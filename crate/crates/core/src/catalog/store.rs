use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::Utc;
use serde::{Deserialize, Serialize};

use super::jsonl::AppendLog;
use super::{
    transition_allowed, CatalogEntry, CatalogError, Decision, Measurements, ReviewDecision,
    ReviewStatus, CATALOG_VERSION, DECISION_LOG_VERSION,
};
use crate::candidates::{
    great_circle_distance, read_candidates, write_candidates, Candidate, TiBins, MARS_RADIUS_M,
};
use crate::raster::GeoPoint;
use crate::scan::write_atomic;

/// Radius for the "already catalogued nearby" hint.
pub const DEFAULT_HINT_RADIUS_M: f64 = 5_000.0;
const SNAPSHOT_EVERY: usize = 100;
const MAX_PAGE_SIZE: usize = 1000;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    bin_edges: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    schema_version: u32,
    decisions: usize,
    statuses: BTreeMap<String, ReviewStatus>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateFilter {
    pub status: Option<ReviewStatus>,
    pub ti_bin: Option<usize>,
    pub lat_min: Option<f64>,
    pub lat_max: Option<f64>,
    pub min_confidence: Option<f64>,
    pub max_confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewedCandidate {
    pub candidate: Candidate,
    pub status: ReviewStatus,
    pub ti_bin: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePage {
    pub total: usize,
    pub page: usize,
    pub page_size: usize,
    pub items: Vec<ReviewedCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearestEntry {
    pub impact_id: String,
    pub distance_m: f64,
}

struct State {
    /// Descending confidence, id tie-break.
    candidates: Vec<Candidate>,
    index: HashMap<String, usize>,
    status: Vec<ReviewStatus>,
    decisions: Vec<ReviewDecision>,
    entries: Vec<CatalogEntry>,
    since_snapshot: usize,
}

struct Logs {
    decisions: AppendLog,
    catalog: AppendLog,
}

/// Directory-backed review store. Reads take a shared lock; every write is
/// appended and synced by one writer at a time before the in-memory state
/// changes.
pub struct CatalogStore {
    dir: PathBuf,
    bins: TiBins,
    state: RwLock<State>,
    logs: Mutex<Logs>,
}

fn replay(
    statuses: &mut [ReviewStatus],
    index: &HashMap<String, usize>,
    decisions: &[ReviewDecision],
) -> Result<(), CatalogError> {
    for d in decisions {
        let i = *index.get(&d.candidate_id).ok_or_else(|| {
            CatalogError::Corrupt(format!(
                "decision {} names unknown candidate {}",
                d.decision_id, d.candidate_id
            ))
        })?;
        if d.from != statuses[i] || !(d.supervisor_override || transition_allowed(d.from, d.status))
        {
            return Err(CatalogError::Corrupt(format!(
                "decision {} ({} -> {}) does not replay from {}",
                d.decision_id, d.from, d.status, statuses[i]
            )));
        }
        statuses[i] = d.status;
    }
    Ok(())
}

impl CatalogStore {
    /// Initializes a store over `candidates`. Fails if one already exists.
    pub fn create(
        dir: &Path,
        candidates: &[Candidate],
        bins: &TiBins,
    ) -> Result<Self, CatalogError> {
        fs::create_dir_all(dir)?;
        if dir.join("store.json").exists() {
            return Err(CatalogError::AlreadyExists(dir.display().to_string()));
        }
        write_candidates(&dir.join("candidates.jsonl"), candidates)?;
        let manifest = Manifest {
            schema_version: DECISION_LOG_VERSION,
            bin_edges: bins.edges().to_vec(),
        };
        write_atomic(
            &dir.join("store.json"),
            &serde_json::to_vec_pretty(&manifest)?,
        )?;
        Self::open(dir)
    }

    pub fn open(dir: &Path) -> Result<Self, CatalogError> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("store.json"))?)?;
        let bins = TiBins::new(manifest.bin_edges)?;
        let mut candidates = read_candidates(&dir.join("candidates.jsonl"))?;
        candidates.sort_by(|a, b| {
            b.confidence
                .total_cmp(&a.confidence)
                .then_with(|| a.id.cmp(&b.id))
        });
        let index: HashMap<String, usize> = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id.clone(), i))
            .collect();
        if index.len() != candidates.len() {
            return Err(CatalogError::Corrupt("duplicate candidate ids".into()));
        }

        let (decision_log, decisions): (_, Vec<ReviewDecision>) = AppendLog::open(
            &dir.join("decisions.jsonl"),
            "impactscan.decisions",
            DECISION_LOG_VERSION,
        )?;
        let (catalog_log, entries): (_, Vec<CatalogEntry>) = AppendLog::open(
            &dir.join("catalog.jsonl"),
            "impactscan.catalog",
            CATALOG_VERSION,
        )?;
        for (i, d) in decisions.iter().enumerate() {
            if d.decision_id != i as u64 + 1 {
                return Err(CatalogError::Corrupt(format!(
                    "decision {} out of sequence",
                    d.decision_id
                )));
            }
        }

        let mut status = vec![ReviewStatus::Unreviewed; candidates.len()];
        let mut start = 0;
        if let Some(snap) = Self::read_snapshot(dir) {
            if snap.decisions <= decisions.len()
                && snap.statuses.keys().all(|k| index.contains_key(k))
            {
                for (id, s) in &snap.statuses {
                    status[index[id]] = *s;
                }
                start = snap.decisions;
            } else {
                log::warn!("ignoring snapshot ahead of the decision log");
            }
        }
        replay(&mut status, &index, &decisions[start..])?;

        Ok(Self {
            dir: dir.to_path_buf(),
            bins,
            state: RwLock::new(State {
                candidates,
                index,
                status,
                decisions,
                entries,
                since_snapshot: 0,
            }),
            logs: Mutex::new(Logs {
                decisions: decision_log,
                catalog: catalog_log,
            }),
        })
    }

    fn read_snapshot(dir: &Path) -> Option<Snapshot> {
        let bytes = fs::read(dir.join("snapshot.json")).ok()?;
        serde_json::from_slice::<Snapshot>(&bytes)
            .ok()
            .filter(|s| s.schema_version == DECISION_LOG_VERSION)
    }

    fn write_snapshot(&self, st: &State) -> Result<(), CatalogError> {
        let snap = Snapshot {
            schema_version: DECISION_LOG_VERSION,
            decisions: st.decisions.len(),
            statuses: st
                .candidates
                .iter()
                .zip(&st.status)
                .filter(|(_, s)| **s != ReviewStatus::Unreviewed)
                .map(|(c, s)| (c.id.clone(), *s))
                .collect(),
        };
        write_atomic(&self.dir.join("snapshot.json"), &serde_json::to_vec(&snap)?)?;
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn bins(&self) -> &TiBins {
        &self.bins
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, State> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, State> {
        self.state.write().unwrap_or_else(|e| e.into_inner())
    }

    fn logs(&self) -> std::sync::MutexGuard<'_, Logs> {
        self.logs.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn len(&self) -> usize {
        self.read().candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: &str) -> Option<ReviewedCandidate> {
        let st = self.read();
        st.index.get(id).map(|&i| self.reviewed(&st, i))
    }

    fn reviewed(&self, st: &State, i: usize) -> ReviewedCandidate {
        let c = &st.candidates[i];
        ReviewedCandidate {
            candidate: c.clone(),
            status: st.status[i],
            ti_bin: c.ti_value.and_then(|v| self.bins.bin_of(v)),
        }
    }

    pub fn status(&self, id: &str) -> Result<ReviewStatus, CatalogError> {
        let st = self.read();
        st.index
            .get(id)
            .map(|&i| st.status[i])
            .ok_or_else(|| CatalogError::UnknownCandidate(id.to_string()))
    }

    /// Validates and appends a decision, then updates the status. Concurrent
    /// writers are serialized; the last one to commit sets the status.
    pub fn record_decision(
        &self,
        candidate_id: &str,
        decision: Decision,
    ) -> Result<ReviewDecision, CatalogError> {
        if decision.reviewer.trim().is_empty() {
            return Err(CatalogError::InvalidQuery(
                "reviewer id must not be empty".into(),
            ));
        }
        let mut logs = self.logs();
        let mut st = self.write();
        let i = *st
            .index
            .get(candidate_id)
            .ok_or_else(|| CatalogError::UnknownCandidate(candidate_id.to_string()))?;
        let from = st.status[i];
        if !decision.supervisor_override && !transition_allowed(from, decision.status) {
            return Err(CatalogError::IllegalTransition {
                candidate: candidate_id.to_string(),
                from,
                to: decision.status,
            });
        }
        let rec = ReviewDecision {
            decision_id: st.decisions.len() as u64 + 1,
            candidate_id: candidate_id.to_string(),
            from,
            status: decision.status,
            reviewer: decision.reviewer,
            notes: decision.notes,
            supervisor_override: decision.supervisor_override,
            timestamp: Utc::now(),
        };
        logs.decisions.append(&rec)?;
        st.status[i] = rec.status;
        st.decisions.push(rec.clone());
        st.since_snapshot += 1;
        if st.since_snapshot >= SNAPSHOT_EVERY {
            self.write_snapshot(&st)?;
            st.since_snapshot = 0;
        }
        Ok(rec)
    }

    /// Decisions for one candidate in log order.
    pub fn history(&self, candidate_id: &str) -> Result<Vec<ReviewDecision>, CatalogError> {
        let st = self.read();
        if !st.index.contains_key(candidate_id) {
            return Err(CatalogError::UnknownCandidate(candidate_id.to_string()));
        }
        Ok(st
            .decisions
            .iter()
            .filter(|d| d.candidate_id == candidate_id)
            .cloned()
            .collect())
    }

    pub fn decisions(&self) -> Vec<ReviewDecision> {
        self.read().decisions.clone()
    }

    /// Current statuses recomputed from the full log, starting every
    /// candidate at unreviewed.
    pub fn replayed_statuses(&self) -> Result<BTreeMap<String, ReviewStatus>, CatalogError> {
        let st = self.read();
        let mut status = vec![ReviewStatus::Unreviewed; st.candidates.len()];
        replay(&mut status, &st.index, &st.decisions)?;
        Ok(st
            .candidates
            .iter()
            .map(|c| c.id.clone())
            .zip(status)
            .collect())
    }

    pub fn statuses(&self) -> BTreeMap<String, ReviewStatus> {
        let st = self.read();
        st.candidates
            .iter()
            .map(|c| c.id.clone())
            .zip(st.status.iter().copied())
            .collect()
    }

    /// Writes the status snapshot now rather than waiting for the interval.
    pub fn snapshot(&self) -> Result<(), CatalogError> {
        let _logs = self.logs();
        let mut st = self.write();
        self.write_snapshot(&st)?;
        st.since_snapshot = 0;
        Ok(())
    }

    pub fn promote_to_catalog(
        &self,
        candidate_id: &str,
        m: Measurements,
    ) -> Result<CatalogEntry, CatalogError> {
        let eff = m.validate()?;
        let mut logs = self.logs();
        let mut st = self.write();
        let i = *st
            .index
            .get(candidate_id)
            .ok_or_else(|| CatalogError::UnknownCandidate(candidate_id.to_string()))?;
        if st.status[i] != ReviewStatus::Confirmed {
            return Err(CatalogError::NotConfirmed {
                candidate: candidate_id.to_string(),
                status: st.status[i],
            });
        }
        if st.entries.iter().any(|e| e.candidate_id == candidate_id) {
            return Err(CatalogError::AlreadyPromoted(candidate_id.to_string()));
        }
        let c = &st.candidates[i];
        let fw = c.formation.as_ref().ok_or_else(|| {
            CatalogError::InvalidMeasurements(format!(
                "candidate {candidate_id} has no formation window"
            ))
        })?;
        if fw.before.acquired_at >= fw.after.acquired_at {
            return Err(CatalogError::InvalidMeasurements(
                "before image is not earlier than after image".into(),
            ));
        }
        let entry = CatalogEntry {
            impact_id: format!("I{:04}", st.entries.len() + 1),
            candidate_id: candidate_id.to_string(),
            lat: c.center.lat,
            lon: c.center.lon,
            crater_type: m.crater_type,
            halo: m.halo,
            rays: m.rays,
            tone: m.tone,
            diameters: m.diameters,
            effective_diameter: eff,
            dust_cover_index: m.dust_cover_index,
            thermal_inertia: c.ti_value,
            before_image: fw.before.observation_id.clone(),
            before_date: fw.before.acquired_at,
            after_image: fw.after.observation_id.clone(),
            after_date: fw.after.acquired_at,
            followup_image: m.followup_image,
        };
        logs.catalog.append(&entry)?;
        st.entries.push(entry.clone());
        Ok(entry)
    }

    pub fn entries(&self) -> Vec<CatalogEntry> {
        self.read().entries.clone()
    }

    pub fn entry_for(&self, candidate_id: &str) -> Option<CatalogEntry> {
        self.read()
            .entries
            .iter()
            .find(|e| e.candidate_id == candidate_id)
            .cloned()
    }

    /// Closest catalog entry within `max_m`, ignoring the one promoted from
    /// `exclude_candidate`.
    pub fn nearest_entry(
        &self,
        p: GeoPoint,
        max_m: f64,
        exclude_candidate: Option<&str>,
    ) -> Option<NearestEntry> {
        self.read()
            .entries
            .iter()
            .filter(|e| Some(e.candidate_id.as_str()) != exclude_candidate)
            .map(|e| NearestEntry {
                impact_id: e.impact_id.clone(),
                distance_m: great_circle_distance(p, GeoPoint::new(e.lat, e.lon), MARS_RADIUS_M),
            })
            .filter(|n| n.distance_m <= max_m)
            .min_by(|a, b| {
                a.distance_m
                    .total_cmp(&b.distance_m)
                    .then_with(|| a.impact_id.cmp(&b.impact_id))
            })
    }

    /// One page (1-based) of matching candidates in descending confidence
    /// with id tie-break.
    pub fn query(
        &self,
        f: &CandidateFilter,
        page: usize,
        page_size: usize,
    ) -> Result<CandidatePage, CatalogError> {
        if page == 0 {
            return Err(CatalogError::InvalidQuery("page starts at 1".into()));
        }
        if page_size == 0 || page_size > MAX_PAGE_SIZE {
            return Err(CatalogError::InvalidQuery(format!(
                "page_size must be in 1..={MAX_PAGE_SIZE}"
            )));
        }
        if let Some(b) = f.ti_bin {
            if b >= self.bins.len() {
                return Err(CatalogError::InvalidQuery(format!(
                    "bin {b} out of range 0..{}",
                    self.bins.len()
                )));
            }
        }
        for v in [f.min_confidence, f.max_confidence].into_iter().flatten() {
            if !(0.0..=1.0).contains(&v) {
                return Err(CatalogError::InvalidQuery(format!(
                    "confidence bound {v} outside [0, 1]"
                )));
            }
        }
        for v in [f.lat_min, f.lat_max].into_iter().flatten() {
            if !(-90.0..=90.0).contains(&v) {
                return Err(CatalogError::InvalidQuery(format!(
                    "latitude bound {v} outside [-90, 90]"
                )));
            }
        }
        if let (Some(a), Some(b)) = (f.lat_min, f.lat_max) {
            if a > b {
                return Err(CatalogError::InvalidQuery("lat_min exceeds lat_max".into()));
            }
        }
        if let (Some(a), Some(b)) = (f.min_confidence, f.max_confidence) {
            if a > b {
                return Err(CatalogError::InvalidQuery(
                    "min_confidence exceeds max_confidence".into(),
                ));
            }
        }

        let st = self.read();
        let matching: Vec<usize> = (0..st.candidates.len())
            .filter(|&i| {
                let c = &st.candidates[i];
                f.status.is_none_or(|s| st.status[i] == s)
                    && f.ti_bin
                        .is_none_or(|b| c.ti_value.and_then(|v| self.bins.bin_of(v)) == Some(b))
                    && f.lat_min.is_none_or(|v| c.center.lat >= v)
                    && f.lat_max.is_none_or(|v| c.center.lat <= v)
                    && f.min_confidence.is_none_or(|v| c.confidence >= v)
                    && f.max_confidence.is_none_or(|v| c.confidence <= v)
            })
            .collect();
        let items = matching
            .iter()
            .skip((page - 1).saturating_mul(page_size))
            .take(page_size)
            .map(|&i| self.reviewed(&st, i))
            .collect();
        Ok(CandidatePage {
            total: matching.len(),
            page,
            page_size,
            items,
        })
    }

    /// Catalog tables sorted by thermal inertia: site properties, then
    /// before/after and follow-up image ids.
    pub fn export_tables(
        &self,
        properties_csv: &Path,
        images_csv: &Path,
    ) -> Result<(), CatalogError> {
        let mut entries = self.entries();
        entries.sort_by(|a, b| {
            a.thermal_inertia
                .unwrap_or(f64::INFINITY)
                .total_cmp(&b.thermal_inertia.unwrap_or(f64::INFINITY))
                .then_with(|| a.impact_id.cmp(&b.impact_id))
        });
        let yes_no = |v: Option<bool>| match v {
            Some(true) => "Y".to_string(),
            Some(false) => "N".to_string(),
            None => String::new(),
        };
        let opt =
            |v: Option<f64>, prec: usize| v.map(|x| format!("{x:.prec$}")).unwrap_or_default();

        let mut w = csv::Writer::from_path(properties_csv)?;
        w.write_record([
            "id",
            "latitude_n",
            "longitude_e",
            "type",
            "halo",
            "rays",
            "tone",
            "effective_diameter_m",
            "dust_cover_index",
            "thermal_inertia",
        ])?;
        for e in &entries {
            w.write_record([
                e.impact_id.clone(),
                format!("{:.4}", e.lat),
                format!("{:.4}", e.lon),
                serde_json::to_value(e.crater_type)?
                    .as_str()
                    .unwrap_or_default()
                    .to_string(),
                yes_no(e.halo),
                yes_no(e.rays),
                e.tone
                    .map(|t| {
                        serde_json::to_value(t)
                            .ok()
                            .and_then(|v| v.as_str().map(str::to_string))
                            .unwrap_or_default()
                    })
                    .unwrap_or_default(),
                format!("{:.2}", e.effective_diameter),
                opt(e.dust_cover_index, 3),
                opt(e.thermal_inertia, 0),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(images_csv)?;
        w.write_record([
            "id",
            "latitude",
            "longitude",
            "before_image",
            "before_date",
            "after_image",
            "after_date",
            "followup_image",
        ])?;
        for e in &entries {
            w.write_record([
                e.impact_id.clone(),
                format!("{:.4}", e.lat),
                format!("{:.4}", e.lon),
                e.before_image.clone(),
                e.before_date.format("%Y-%m-%d").to_string(),
                e.after_image.clone(),
                e.after_date.format("%Y-%m-%d").to_string(),
                e.followup_image.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
