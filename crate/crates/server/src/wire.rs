//! JSON bodies. Field names are part of the contract with the review UI.

use chrono::{DateTime, Utc};
use impactscan::candidates::TiSource;
use impactscan::catalog::ReviewStatus;
use impactscan::raster::{GeoPoint, WindowRef};
use serde::{Deserialize, Serialize};

pub const API_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub schema_version: u32,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormationDates {
    pub before_observation: String,
    pub before_date: DateTime<Utc>,
    pub after_observation: String,
    pub after_date: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub id: String,
    pub status: ReviewStatus,
    pub confidence: f64,
    pub center: GeoPoint,
    pub n_members: usize,
    pub ti_value: Option<f64>,
    pub ti_bin: Option<usize>,
    pub formation: Option<FormationDates>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePageBody {
    pub schema_version: u32,
    pub total: usize,
    pub page: usize,
    pub page_size: usize,
    pub items: Vec<CandidateSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberView {
    pub index: usize,
    pub observation_id: String,
    pub acquired_at: DateTime<Utc>,
    pub p_pos: f64,
    /// Drawn with a green outline in the review UI.
    pub outlined: bool,
    pub window: WindowRef,
    pub image_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogHint {
    pub impact_id: String,
    pub distance_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionView {
    pub decision_id: u64,
    pub from: ReviewStatus,
    pub status: ReviewStatus,
    pub reviewer: String,
    pub notes: String,
    pub supervisor_override: bool,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDetail {
    pub schema_version: u32,
    pub id: String,
    pub status: ReviewStatus,
    pub confidence: f64,
    pub center: GeoPoint,
    pub outline_threshold: f64,
    /// Acquisition order.
    pub members: Vec<MemberView>,
    pub formation: Option<FormationDates>,
    pub ti_value: Option<f64>,
    pub ti_source: TiSource,
    pub ti_bin: Option<usize>,
    pub ti_bin_label: Option<String>,
    /// Closest other catalog entry within the hint radius.
    pub nearest_catalog_entry: Option<CatalogHint>,
    /// Set once the candidate itself is in the catalog.
    pub impact_id: Option<String>,
    pub followup_image_url: Option<String>,
    pub history: Vec<DecisionView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub status: ReviewStatus,
    pub reviewer: String,
    #[serde(default)]
    pub notes: String,
    #[serde(default)]
    pub supervisor_override: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionResponse {
    pub schema_version: u32,
    pub candidate_id: String,
    pub decision_id: u64,
    pub from: ReviewStatus,
    pub status: ReviewStatus,
}
