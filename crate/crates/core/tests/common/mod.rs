#![allow(dead_code)]

use chrono::{Duration, TimeZone, Utc};
use impactscan::candidates::{Candidate, FormationWindow, Member, TiSource, TimelinePoint};
use impactscan::raster::{GeoPoint, WindowRef};

/// `n` dateable candidates spread over latitude and thermal inertia, with
/// confidence decreasing by id.
pub fn candidates(n: usize) -> Vec<Candidate> {
    let t0 = Utc.with_ymd_and_hms(2012, 3, 1, 0, 0, 0).unwrap();
    (0..n)
        .map(|i| {
            let center = GeoPoint::new(-50.0 + (i % 100) as f64, 10.0 + i as f64 * 0.5);
            let obs = |k: usize| format!("O{i:04}_{k}");
            let member = |k: usize, p: f64| Member {
                window: WindowRef {
                    observation_id: obs(k),
                    row_off: 75,
                    col_off: 150,
                    size: 300,
                },
                acquired_at: t0 + Duration::days(200 * k as i64),
                p_pos: p,
                center,
            };
            let confidence = 0.99 - i as f64 * 1e-4;
            let members = vec![member(0, 0.02), member(1, confidence), member(2, 0.9)];
            Candidate {
                id: format!("c{i:04}"),
                seed: members[1].window.clone(),
                center,
                confidence,
                formation: Some(FormationWindow {
                    before: TimelinePoint {
                        observation_id: obs(0),
                        acquired_at: members[0].acquired_at,
                        p_pos: 0.02,
                    },
                    after: TimelinePoint {
                        observation_id: obs(1),
                        acquired_at: members[1].acquired_at,
                        p_pos: confidence,
                    },
                }),
                members,
                ti_value: Some((i * 37 % 1100) as f64),
                ti_source: TiSource::Primary,
            }
        })
        .collect()
}
