//! Review workflow state, the append-only decision log, and confirmed
//! impact catalog entries.

mod jsonl;
mod store;

pub use store::{
    CandidateFilter, CandidatePage, CatalogStore, NearestEntry, ReviewedCandidate,
    DEFAULT_HINT_RADIUS_M,
};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::effective_diameter;
use crate::candidates::CandidateError;

pub const DECISION_LOG_VERSION: u32 = 1;
pub const CATALOG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("unknown candidate {0}")]
    UnknownCandidate(String),
    #[error("illegal transition {from} -> {to} for candidate {candidate}")]
    IllegalTransition {
        candidate: String,
        from: ReviewStatus,
        to: ReviewStatus,
    },
    #[error("candidate {candidate} has status {status}; promotion requires confirmed")]
    NotConfirmed {
        candidate: String,
        status: ReviewStatus,
    },
    #[error("candidate {0} is already in the catalog")]
    AlreadyPromoted(String),
    #[error("invalid measurements: {0}")]
    InvalidMeasurements(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("store already initialized at {0}")]
    AlreadyExists(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Candidate(#[from] CandidateError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Unreviewed,
    NonImpact,
    OldImpact,
    UndateableFresh,
    KnownFresh,
    NewFresh,
    Duplicate,
    FollowupRequested,
    Confirmed,
    RejectedAfterFollowup,
}

impl ReviewStatus {
    pub const ALL: [ReviewStatus; 10] = [
        Self::Unreviewed,
        Self::NonImpact,
        Self::OldImpact,
        Self::UndateableFresh,
        Self::KnownFresh,
        Self::NewFresh,
        Self::Duplicate,
        Self::FollowupRequested,
        Self::Confirmed,
        Self::RejectedAfterFollowup,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Unreviewed => "unreviewed",
            Self::NonImpact => "non_impact",
            Self::OldImpact => "old_impact",
            Self::UndateableFresh => "undateable_fresh",
            Self::KnownFresh => "known_fresh",
            Self::NewFresh => "new_fresh",
            Self::Duplicate => "duplicate",
            Self::FollowupRequested => "followup_requested",
            Self::Confirmed => "confirmed",
            Self::RejectedAfterFollowup => "rejected_after_followup",
        }
    }

    /// First-pass review categories.
    pub fn is_triage(self) -> bool {
        matches!(
            self,
            Self::NonImpact
                | Self::OldImpact
                | Self::UndateableFresh
                | Self::KnownFresh
                | Self::NewFresh
                | Self::Duplicate
        )
    }
}

impl std::fmt::Display for ReviewStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ReviewStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown review status `{s}`"))
    }
}

/// Transitions a reviewer may make without a supervisor override.
///
/// Unreviewed candidates go to a triage category. Triage categories may be
/// reassigned among themselves while reviewers disagree, until follow-up is
/// requested for a new fresh impact. A follow-up ends confirmed or rejected.
pub fn transition_allowed(from: ReviewStatus, to: ReviewStatus) -> bool {
    use ReviewStatus::*;
    match (from, to) {
        (Unreviewed, t) => t.is_triage(),
        (NewFresh, FollowupRequested) => true,
        (f, t) if f.is_triage() => t.is_triage(),
        (FollowupRequested, Confirmed | RejectedAfterFollowup) => true,
        _ => false,
    }
}

/// A reviewer's request to set a candidate's status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub status: ReviewStatus,
    pub reviewer: String,
    #[serde(default)]
    pub notes: String,
    /// Bypasses the transition rules; recorded in the log.
    #[serde(default)]
    pub supervisor_override: bool,
}

impl Decision {
    pub fn new(status: ReviewStatus, reviewer: &str) -> Self {
        Self {
            status,
            reviewer: reviewer.to_string(),
            notes: String::new(),
            supervisor_override: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewDecision {
    /// 1-based position in the log.
    pub decision_id: u64,
    pub candidate_id: String,
    pub from: ReviewStatus,
    pub status: ReviewStatus,
    pub reviewer: String,
    pub notes: String,
    pub supervisor_override: bool,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CraterType {
    Single,
    Cluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tone {
    Dark,
    Light,
    Dual,
}

/// Follow-up measurements supplied when promoting a confirmed candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurements {
    pub crater_type: CraterType,
    /// Individual crater diameters in meters.
    pub diameters: Vec<f64>,
    #[serde(default)]
    pub halo: Option<bool>,
    #[serde(default)]
    pub rays: Option<bool>,
    #[serde(default)]
    pub tone: Option<Tone>,
    #[serde(default)]
    pub dust_cover_index: Option<f64>,
    #[serde(default)]
    pub followup_image: Option<String>,
}

impl Measurements {
    pub fn validate(&self) -> Result<f64, CatalogError> {
        let n = self.diameters.len();
        match self.crater_type {
            CraterType::Single if n != 1 => {
                return Err(CatalogError::InvalidMeasurements(format!(
                    "a single crater needs exactly one diameter, got {n}"
                )))
            }
            CraterType::Cluster if n < 2 => {
                return Err(CatalogError::InvalidMeasurements(format!(
                    "a cluster needs at least two diameters, got {n}"
                )))
            }
            _ => {}
        }
        if let Some(d) = self.dust_cover_index {
            if !d.is_finite() {
                return Err(CatalogError::InvalidMeasurements(
                    "dust cover index must be finite".into(),
                ));
            }
        }
        effective_diameter(&self.diameters)
            .map_err(|e| CatalogError::InvalidMeasurements(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub impact_id: String,
    pub candidate_id: String,
    pub lat: f64,
    pub lon: f64,
    pub crater_type: CraterType,
    pub halo: Option<bool>,
    pub rays: Option<bool>,
    pub tone: Option<Tone>,
    pub diameters: Vec<f64>,
    pub effective_diameter: f64,
    pub dust_cover_index: Option<f64>,
    pub thermal_inertia: Option<f64>,
    pub before_image: String,
    pub before_date: DateTime<Utc>,
    pub after_image: String,
    pub after_date: DateTime<Utc>,
    pub followup_image: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ReviewStatus::*;

    #[test]
    fn legal_paths() {
        for path in [
            [Unreviewed, NewFresh, FollowupRequested, Confirmed],
            [
                Unreviewed,
                NewFresh,
                FollowupRequested,
                RejectedAfterFollowup,
            ],
        ] {
            assert!(path.windows(2).all(|w| transition_allowed(w[0], w[1])));
        }
        assert!(transition_allowed(Unreviewed, Duplicate));
        assert!(transition_allowed(NewFresh, OldImpact));
    }

    #[test]
    fn illegal_transitions() {
        let illegal = [
            (Confirmed, Unreviewed),
            (Unreviewed, Confirmed),
            (Unreviewed, FollowupRequested),
            (Unreviewed, RejectedAfterFollowup),
            (Unreviewed, Unreviewed),
            (NonImpact, FollowupRequested),
            (OldImpact, Confirmed),
            (Duplicate, Unreviewed),
            (NewFresh, Confirmed),
            (FollowupRequested, NewFresh),
            (FollowupRequested, Unreviewed),
            (Confirmed, RejectedAfterFollowup),
            (RejectedAfterFollowup, Confirmed),
            (Confirmed, NewFresh),
        ];
        for (a, b) in illegal {
            assert!(!transition_allowed(a, b), "{a} -> {b}");
        }
    }

    #[test]
    fn status_strings_round_trip() {
        for s in ReviewStatus::ALL {
            assert_eq!(s.as_str().parse::<ReviewStatus>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
        }
        assert!("fresh".parse::<ReviewStatus>().is_err());
    }

    #[test]
    fn measurement_rules() {
        let m = |t, d: &[f64]| Measurements {
            crater_type: t,
            diameters: d.to_vec(),
            halo: None,
            rays: None,
            tone: None,
            dust_cover_index: None,
            followup_image: None,
        };
        assert!((m(CraterType::Cluster, &[3.0, 4.0, 5.0]).validate().unwrap() - 6.0).abs() < 1e-12);
        assert_eq!(m(CraterType::Single, &[4.5]).validate().unwrap(), 4.5);
        assert!(m(CraterType::Single, &[3.0, 4.0]).validate().is_err());
        assert!(m(CraterType::Cluster, &[3.0]).validate().is_err());
        assert!(m(CraterType::Cluster, &[3.0, -1.0]).validate().is_err());
    }
}
