use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use chrono::{DateTime, Duration, TimeZone, Utc};
use http_body_util::BodyExt;
use impactscan::analytics::{bias_report_with_expected, BiasReport};
use impactscan::candidates::{
    write_candidates, Candidate, FormationWindow, Member, TiBins, TiSource, TimelinePoint,
};
use impactscan::catalog::{CraterType, Decision, Measurements, ReviewStatus};
use impactscan::layout::{write_json, ExpectedFile, OutputLayout, Selection, EXPECTED_VERSION};
use impactscan::raster::{
    write_observation, GeoPoint, GeoTransform, Observation, ObservationMeta, WindowRef,
};
use impactscan_server::wire::*;
use impactscan_server::{router, AppState};
use serde::de::DeserializeOwned;
use tower::ServiceExt;

fn date(y: i32, m: u32, d: u32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(y, m, d, 0, 0, 0).unwrap()
}

fn member(obs: &str, at: DateTime<Utc>, p: f64, center: GeoPoint) -> Member {
    Member {
        window: WindowRef {
            observation_id: obs.into(),
            row_off: 75,
            col_off: 150,
            size: 300,
        },
        acquired_at: at,
        p_pos: p,
        center,
    }
}

/// Three observations of one site; the impact appears in the second.
fn timeline_candidate() -> Candidate {
    let center = GeoPoint::new(11.8, 21.4);
    let members = vec![
        member("OBS_A", date(2015, 1, 19), 0.0, center),
        member("OBS_B", date(2016, 11, 17), 0.99, center),
        member("OBS_C", date(2017, 6, 2), 0.99, center),
    ];
    Candidate {
        id: "timeline".into(),
        seed: members[1].window.clone(),
        center,
        confidence: 0.99,
        formation: Some(FormationWindow {
            before: TimelinePoint {
                observation_id: "OBS_A".into(),
                acquired_at: date(2015, 1, 19),
                p_pos: 0.0,
            },
            after: TimelinePoint {
                observation_id: "OBS_B".into(),
                acquired_at: date(2016, 11, 17),
                p_pos: 0.99,
            },
        }),
        members,
        ti_value: Some(250.0),
        ti_source: TiSource::Primary,
    }
}

fn filler(i: usize) -> Candidate {
    let center = GeoPoint::new(-40.0 + (i % 80) as f64, 100.0 + (i / 80) as f64);
    let t = date(2012, 1, 1) + Duration::days(i as i64);
    let members = vec![
        member(&format!("X{i}_0"), t, 0.1, center),
        member(&format!("X{i}_1"), t + Duration::days(300), 0.9, center),
    ];
    Candidate {
        id: format!("c{i:04}"),
        seed: members[1].window.clone(),
        center,
        confidence: 0.5 + (i % 400) as f64 * 1e-3,
        formation: Some(FormationWindow {
            before: TimelinePoint {
                observation_id: members[0].window.observation_id.clone(),
                acquired_at: t,
                p_pos: 0.1,
            },
            after: TimelinePoint {
                observation_id: members[1].window.observation_id.clone(),
                acquired_at: t + Duration::days(300),
                p_pos: 0.9,
            },
        }),
        members,
        ti_value: Some((i * 13 % 1100) as f64),
        ti_source: TiSource::Primary,
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    layout: OutputLayout,
    app: Router,
    state: Arc<AppState>,
}

fn fixture(n_fillers: usize, with_reports: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let archive = dir.path().join("archive");
    for (k, (id, at)) in [
        ("OBS_A", date(2015, 1, 19)),
        ("OBS_B", date(2016, 11, 17)),
        ("OBS_C", date(2017, 6, 2)),
    ]
    .into_iter()
    .enumerate()
    {
        let meta = ObservationMeta {
            id: id.into(),
            acquired_at: at,
            width: 600,
            height: 450,
            geo: GeoTransform::new(21.38, 11.82, 1e-4).unwrap(),
        };
        let px = (0..600 * 450)
            .map(|i| ((i * 7 + k * 11) % 97) as f32 / 97.0)
            .collect();
        write_observation(&archive, &Observation::new(meta, px).unwrap()).unwrap();
    }
    let layout = OutputLayout::new(dir.path().join("out"));
    let mut cands = vec![timeline_candidate()];
    cands.extend((0..n_fillers).map(filler));
    std::fs::create_dir_all(layout.root()).unwrap();
    write_candidates(&layout.candidates(), &cands).unwrap();

    let bins = TiBins::default();
    if with_reports {
        let expected = vec![0.1; 10];
        write_json(
            &layout.expected(),
            &ExpectedFile {
                schema_version: EXPECTED_VERSION,
                lat_min: -60.0,
                lat_max: 60.0,
                bin_edges: bins.edges().to_vec(),
                expected: expected.clone(),
            },
        )
        .unwrap();
        let top: Vec<f64> = vec![50.0, 60.0, 150.0, 120.0];
        let strat: Vec<f64> = (0..10).map(|b| b as f64 * 100.0 + 5.0).collect();
        for (sel, ti) in [(Selection::TopK, top), (Selection::Stratified, strat)] {
            let r = bias_report_with_expected(&ti, &bins, &expected, sel.as_str()).unwrap();
            write_json(&layout.bias_json(sel), &r).unwrap();
        }
    }
    let state = Arc::new(AppState::open(layout.clone(), archive, &bins).unwrap());
    let app = router(state.clone(), &[]).unwrap();
    Fixture {
        _dir: dir,
        layout,
        app,
        state,
    }
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>, Option<String>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let schema = resp
        .headers()
        .get("x-schema-version")
        .map(|v| v.to_str().unwrap().to_string());
    let body = resp
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, body, schema)
}

async fn get<T: DeserializeOwned>(app: &Router, uri: &str) -> (StatusCode, T) {
    let (s, body, schema) = send(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    assert_eq!(schema.as_deref(), Some("1"), "{uri}");
    (s, serde_json::from_slice(&body).unwrap())
}

async fn post_decision(app: &Router, id: &str, body: serde_json::Value) -> (StatusCode, Vec<u8>) {
    let req = Request::post(format!("/candidates/{id}/decision"))
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (s, b, _) = send(app, req).await;
    (s, b)
}

#[tokio::test]
async fn list_pages_and_filters() {
    let f = fixture(999, false);
    let (s, page): (_, CandidatePageBody) =
        get(&f.app, "/candidates?status=unreviewed&page=1").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(page.total, 1000);
    assert_eq!(page.items.len(), DEFAULT_PAGE_SIZE_FOR_TEST);
    assert_eq!(page.items[0].id, "timeline");
    assert!(page
        .items
        .windows(2)
        .all(|w| w[0].confidence >= w[1].confidence));

    let (_, bin9): (_, CandidatePageBody) = get(&f.app, "/candidates?bin=9&page_size=1000").await;
    assert!(bin9.total > 0);
    assert!(bin9.items.iter().all(|c| c.ti_value.unwrap() >= 900.0));

    for bad in [
        "/candidates?page_size=0",
        "/candidates?page=0",
        "/candidates?bin=x",
        "/candidates?bin=10",
        "/candidates?status=bogus",
        "/candidates?min_conf=2",
        "/candidates?colour=red",
    ] {
        let (s, e): (_, ErrorBody) = get(&f.app, bad).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{bad}");
        assert_eq!(e.code, "bad_request");
        assert_eq!(e.schema_version, API_SCHEMA_VERSION);
    }
}

const DEFAULT_PAGE_SIZE_FOR_TEST: usize = impactscan_server::DEFAULT_PAGE_SIZE;

#[tokio::test]
async fn detail_of_timeline_fixture() {
    let f = fixture(3, false);
    let (s, d): (_, CandidateDetail) = get(&f.app, "/candidates/timeline").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(d.members.len(), 3);
    assert_eq!(
        d.members.iter().map(|m| m.outlined).collect::<Vec<_>>(),
        vec![false, true, true]
    );
    assert!(d
        .members
        .windows(2)
        .all(|w| w[0].acquired_at <= w[1].acquired_at));
    let fw = d.formation.unwrap();
    assert_eq!(fw.before_date, date(2015, 1, 19));
    assert_eq!(fw.after_date, date(2016, 11, 17));
    assert_eq!(d.ti_bin, Some(2));
    assert_eq!(d.ti_bin_label.as_deref(), Some("200-300"));
    assert_eq!(
        d.members[1].image_url,
        "/candidates/timeline/members/1/image.png"
    );
    assert!(d.nearest_catalog_entry.is_none() && d.followup_image_url.is_none());

    let (_, other): (_, CandidateDetail) = get(&f.app, "/candidates/c0001").await;
    assert!(other.members.iter().all(|m| !m.outlined));

    let (s, e): (_, ErrorBody) = get(&f.app, "/candidates/nope").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(e.code, "not_found");
}

#[tokio::test]
async fn decisions_follow_the_state_machine() {
    let f = fixture(2, false);
    let (s, b) = post_decision(
        &f.app,
        "timeline",
        serde_json::json!({"status": "new_fresh", "reviewer": "r1", "notes": "dark blast"}),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let r: DecisionResponse = serde_json::from_slice(&b).unwrap();
    assert_eq!(
        (r.from, r.status, r.decision_id),
        (ReviewStatus::Unreviewed, ReviewStatus::NewFresh, 1)
    );

    let (s, b) = post_decision(
        &f.app,
        "c0000",
        serde_json::json!({"status": "confirmed", "reviewer": "r1"}),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    let e: ErrorBody = serde_json::from_slice(&b).unwrap();
    assert_eq!(e.code, "illegal_transition");

    let (s, _) = post_decision(
        &f.app,
        "nope",
        serde_json::json!({"status": "new_fresh", "reviewer": "r1"}),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = post_decision(
        &f.app,
        "timeline",
        serde_json::json!({"status": "maybe", "reviewer": "r1"}),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post_decision(
        &f.app,
        "timeline",
        serde_json::json!({"status": "old_impact", "reviewer": ""}),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (_, d): (_, CandidateDetail) = get(&f.app, "/candidates/timeline").await;
    assert_eq!(d.status, ReviewStatus::NewFresh);
    assert_eq!(d.history.len(), 1);
    assert_eq!(d.history[0].notes, "dark blast");
}

#[tokio::test]
async fn two_clients_posting_at_once_are_both_logged() {
    let f = fixture(1, false);
    let a = post_decision(
        &f.app,
        "c0000",
        serde_json::json!({"status": "old_impact", "reviewer": "a"}),
    );
    let b = post_decision(
        &f.app,
        "c0000",
        serde_json::json!({"status": "non_impact", "reviewer": "b"}),
    );
    let ((sa, _), (sb, _)) = tokio::join!(a, b);
    assert_eq!((sa, sb), (StatusCode::OK, StatusCode::OK));
    let (_, d): (_, CandidateDetail) = get(&f.app, "/candidates/c0000").await;
    assert_eq!(d.history.len(), 2);
    assert_eq!(d.status, d.history[1].status);
    let mut reviewers: Vec<_> = d.history.iter().map(|h| h.reviewer.as_str()).collect();
    reviewers.sort();
    assert_eq!(reviewers, vec!["a", "b"]);
}

#[tokio::test]
async fn member_images() {
    let f = fixture(0, false);
    let uri = "/candidates/timeline/members/1/image.png";
    let (s, png, schema) = send(&f.app, Request::get(uri).body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(schema.as_deref(), Some("1"));
    let img = image::load_from_memory(&png).unwrap();
    assert_eq!((img.width(), img.height()), (400, 400));
    let (_, again, _) = send(&f.app, Request::get(uri).body(Body::empty()).unwrap()).await;
    assert_eq!(png, again);

    for bad in [
        "/candidates/timeline/members/3/image.png",
        "/candidates/timeline/members/x/image.png",
        "/candidates/nope/members/0/image.png",
    ] {
        let (s, _): (_, ErrorBody) = get(&f.app, bad).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{bad}");
    }
}

#[tokio::test]
async fn bias_reports() {
    let empty = fixture(0, false);
    for sel in ["top_k", "stratified", "catalog"] {
        let (s, e): (_, ErrorBody) =
            get(&empty.app, &format!("/reports/bias?selection={sel}")).await;
        assert_eq!(s, StatusCode::CONFLICT, "{sel}");
        assert_eq!(e.code, "pipeline_outputs_missing");
    }
    let (s, _): (_, ErrorBody) = get(&empty.app, "/reports/bias?selection=best").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let f = fixture(0, true);
    let (_, top): (_, BiasReport) = get(&f.app, "/reports/bias?selection=top_k").await;
    let (_, strat): (_, BiasReport) = get(&f.app, "/reports/bias?selection=stratified").await;
    assert!(strat.d_kl < top.d_kl);
    let on_disk: serde_json::Value =
        serde_json::from_slice(&std::fs::read(f.layout.bias_json(Selection::TopK)).unwrap())
            .unwrap();
    let (_, served): (_, serde_json::Value) = get(&f.app, "/reports/bias?selection=top_k").await;
    assert_eq!(served, on_disk);

    // catalog bias needs a confirmed, promoted impact
    let (s, _): (_, ErrorBody) = get(&f.app, "/reports/bias?selection=catalog").await;
    assert_eq!(s, StatusCode::CONFLICT);
    for st in [
        ReviewStatus::NewFresh,
        ReviewStatus::FollowupRequested,
        ReviewStatus::Confirmed,
    ] {
        f.state
            .store
            .record_decision("timeline", Decision::new(st, "r1"))
            .unwrap();
    }
    f.state
        .store
        .promote_to_catalog(
            "timeline",
            Measurements {
                crater_type: CraterType::Single,
                diameters: vec![4.2],
                halo: None,
                rays: None,
                tone: None,
                dust_cover_index: None,
                followup_image: Some("https://example.org/followup/ESP_012345".into()),
            },
        )
        .unwrap();
    let (s, cat): (_, BiasReport) = get(&f.app, "/reports/bias?selection=catalog").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(cat.n_items, 1);
    assert_eq!(cat.histogram.observed[2], 1);
    let (_, d): (_, CandidateDetail) = get(&f.app, "/candidates/timeline").await;
    assert_eq!(d.impact_id.as_deref(), Some("I0001"));
    assert!(d.followup_image_url.unwrap().ends_with("ESP_012345"));
}

#[tokio::test]
async fn unknown_routes_use_the_error_body() {
    let f = fixture(0, false);
    let (s, e): (_, ErrorBody) = get(&f.app, "/nowhere").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(e.code, "not_found");
}
