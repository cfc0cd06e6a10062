//! Seeded synthetic archive: repeat observations of scattered sites on a
//! smooth thermal-inertia field, with impacts injected at a constant rate
//! per unit area and time. Impact contrast falls with thermal inertia, so
//! detection is biased toward low-TI terrain while the true rate is not.
//!
//! Observations are rendered on demand from the seed, one at a time, so a
//! large world never has to sit in memory.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidates::{meters_per_degree, CandidateError, Grid, TiBasemap, MARS_RADIUS_M};
use crate::raster::{
    normalize_lon, write_observation, ArchiveSource, GeoPoint, GeoTransform, Observation,
    ObservationMeta, RasterError,
};
use crate::scorer::{Label, LabeledWindow};

pub const BASEMAP_NODATA: f32 = 65535.0;
const SECONDS_PER_YEAR: f64 = 365.25 * 86_400.0;

// RNG streams, one per generation concern
const STREAM_FIELD: u64 = 1;
const STREAM_SITES: u64 = 2;
const STREAM_RENDER: u64 = 3;
const STREAM_TRAIN: u64 = 4;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic world config: {0}")]
    Config(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Basemap(#[from] CandidateError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml: {0}")]
    Toml(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TiFieldConfig {
    /// Field values are mapped to be roughly uniform by area on `[0, max_ti]`.
    pub max_ti: f64,
    pub n_modes: usize,
    pub min_wavelength_deg: f64,
    pub max_wavelength_deg: f64,
    pub primary_deg_per_px: f64,
    pub fallback_deg_per_px: f64,
    /// Leave a no-data patch in the primary map so the fallback is used.
    pub primary_gap: bool,
}

impl Default for TiFieldConfig {
    fn default() -> Self {
        Self {
            max_ti: 1200.0,
            n_modes: 8,
            min_wavelength_deg: 8.0,
            max_wavelength_deg: 60.0,
            primary_deg_per_px: 0.25,
            fallback_deg_per_px: 1.0,
            primary_gap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectabilityConfig {
    /// Blast-zone amplitude on zero-TI terrain is log-uniform in this range.
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    /// Contrast is scaled by `exp(-ti / ti_scale)`.
    pub ti_scale: f64,
    pub radius_px_min: f64,
    pub radius_px_max: f64,
    /// Fraction of impacts with a bright rather than dark blast zone.
    pub light_fraction: f64,
}

impl Default for DetectabilityConfig {
    fn default() -> Self {
        Self {
            amplitude_min: 0.08,
            amplitude_max: 0.6,
            ti_scale: 600.0,
            radius_px_min: 14.0,
            radius_px_max: 40.0,
            light_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticWorldConfig {
    pub rng_seed: u64,
    pub n_sites: usize,
    pub site_width: usize,
    pub site_height: usize,
    pub meters_per_px: f64,
    /// Sites are spread uniformly by area between these latitudes.
    pub lat_min: f64,
    pub lat_max: f64,
    pub ti_field: TiFieldConfig,
    /// Impacts per square kilometer per year, independent of terrain.
    pub impact_rate: f64,
    pub start: DateTime<Utc>,
    pub span_years: f64,
    pub min_obs_per_site: usize,
    pub max_obs_per_site: usize,
    /// Repeat observations are offset by up to this many pixels.
    pub registration_jitter_px: usize,
    pub noise_sigma: f64,
    pub texture_amplitude: f64,
    pub texture_cell_px: usize,
    pub detectability: DetectabilityConfig,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            rng_seed: 7,
            n_sites: 1200,
            site_width: 600,
            site_height: 450,
            meters_per_px: 6.0,
            lat_min: -65.0,
            lat_max: 65.0,
            ti_field: TiFieldConfig::default(),
            impact_rate: 0.02,
            start: Utc.with_ymd_and_hms(2007, 1, 1, 0, 0, 0).unwrap(),
            span_years: 10.0,
            min_obs_per_site: 2,
            max_obs_per_site: 4,
            registration_jitter_px: 12,
            noise_sigma: 0.012,
            texture_amplitude: 0.015,
            texture_cell_px: 64,
            detectability: DetectabilityConfig::default(),
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        let d = &self.detectability;
        let t = &self.ti_field;
        if self.site_width == 0 || self.site_height == 0 {
            return bad("site dimensions must be positive");
        }
        if 2 * self.registration_jitter_px >= self.site_width.min(self.site_height) {
            return bad("registration jitter exceeds the site");
        }
        if !(self.meters_per_px > 0.0) {
            return bad("meters_per_px must be positive");
        }
        if !(-90.0 <= self.lat_min && self.lat_min < self.lat_max && self.lat_max <= 90.0) {
            return bad("latitude range must satisfy -90 <= lat_min < lat_max <= 90");
        }
        if !(self.impact_rate >= 0.0 && self.impact_rate.is_finite()) {
            return bad("impact_rate must be finite and nonnegative");
        }
        if !(self.span_years > 0.0) {
            return bad("span_years must be positive");
        }
        if self.min_obs_per_site == 0 || self.min_obs_per_site > self.max_obs_per_site {
            return bad("need 1 <= min_obs_per_site <= max_obs_per_site");
        }
        if !(self.noise_sigma >= 0.0 && self.texture_amplitude >= 0.0) || self.texture_cell_px == 0
        {
            return bad("noise and texture settings must be nonnegative with a positive cell size");
        }
        if !(0.0 < d.amplitude_min && d.amplitude_min <= d.amplitude_max) {
            return bad("need 0 < amplitude_min <= amplitude_max");
        }
        if !(0.0 < d.radius_px_min && d.radius_px_min <= d.radius_px_max) {
            return bad("need 0 < radius_px_min <= radius_px_max");
        }
        if !(d.ti_scale > 0.0) || !(0.0..=1.0).contains(&d.light_fraction) {
            return bad("ti_scale must be positive and light_fraction in [0, 1]");
        }
        if !(t.max_ti > 0.0 && t.max_ti < BASEMAP_NODATA as f64) || t.n_modes == 0 {
            return bad("max_ti must be in (0, 65535) with at least one field mode");
        }
        if !(0.0 < t.min_wavelength_deg && t.min_wavelength_deg <= t.max_wavelength_deg) {
            return bad("need 0 < min_wavelength_deg <= max_wavelength_deg");
        }
        if !(t.primary_deg_per_px > 0.0 && t.fallback_deg_per_px > 0.0) {
            return bad("basemap resolutions must be positive");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let cfg: Self = toml::from_str(text).map_err(|e| SynthError::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn deg_per_px(&self) -> f64 {
        self.meters_per_px / meters_per_degree(MARS_RADIUS_M)
    }
}

/// One injected impact, as recorded in the ground-truth file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthImpact {
    pub site: usize,
    pub lat: f64,
    pub lon: f64,
    pub time: DateTime<Utc>,
    /// Signed peak intensity change of the blast zone.
    pub contrast: f64,
    pub ti: f64,
    pub radius_m: f64,
}

#[derive(Debug, Clone)]
struct Mode {
    k_lon: f64,
    k_lat: f64,
    phase: f64,
    amp: f64,
}

/// Smooth random field mapped through its area-weighted quantiles.
#[derive(Debug, Clone)]
pub struct TiField {
    modes: Vec<Mode>,
    quantiles: Vec<f64>,
    max_ti: f64,
}

impl TiField {
    fn generate(cfg: &SyntheticWorldConfig) -> Self {
        let t = &cfg.ti_field;
        let mut rng = stream(cfg.rng_seed, STREAM_FIELD, 0);
        let modes: Vec<Mode> = (0..t.n_modes)
            .map(|_| {
                let wl =
                    (rng.random_range(t.min_wavelength_deg.ln()..=t.max_wavelength_deg.ln())).exp();
                let dir = rng.random_range(0.0..PI);
                // whole cycles around the planet keep the field periodic in longitude
                let k_lon = (360.0 * dir.cos() / wl).round() / 360.0;
                Mode {
                    k_lon,
                    k_lat: dir.sin() / wl,
                    phase: rng.random_range(0.0..2.0 * PI),
                    amp: rng.random_range(0.5..1.0),
                }
            })
            .collect();
        let mut field = Self {
            modes,
            quantiles: Vec::new(),
            max_ti: t.max_ti,
        };

        // area-weighted quantile table over the site band on a 0.5° lattice
        let mut samples: Vec<(f64, f64)> = Vec::new();
        let step = 0.5;
        let mut lat = cfg.lat_min + step / 2.0;
        while lat < cfg.lat_max {
            let w = lat.to_radians().cos();
            let mut lon = step / 2.0;
            while lon < 360.0 {
                samples.push((field.raw(lat, lon), w));
                lon += step;
            }
            lat += step;
        }
        samples.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = samples.iter().map(|s| s.1).sum();
        let n_q = 1000;
        let mut quantiles = vec![samples[0].0];
        let (mut acc, mut k) = (0.0, 0);
        for q in 1..=n_q {
            let target = total * q as f64 / n_q as f64;
            while k + 1 < samples.len() && acc + samples[k].1 < target {
                acc += samples[k].1;
                k += 1;
            }
            quantiles.push(samples[k].0);
        }
        field.quantiles = quantiles;
        field
    }

    fn raw(&self, lat: f64, lon: f64) -> f64 {
        self.modes
            .iter()
            .map(|m| m.amp * (2.0 * PI * (m.k_lon * lon + m.k_lat * lat) + m.phase).cos())
            .sum()
    }

    /// Thermal inertia at a point, continuous in position.
    pub fn ti(&self, lat: f64, lon: f64) -> f64 {
        let v = self.raw(lat, lon);
        let q = &self.quantiles;
        let n = q.len() - 1;
        let i = q.partition_point(|&x| x <= v);
        let pos = if i == 0 {
            0.0
        } else if i > n {
            n as f64
        } else {
            let (a, b) = (q[i - 1], q[i]);
            let frac = if b > a { (v - a) / (b - a) } else { 0.0 };
            (i - 1) as f64 + frac
        };
        self.max_ti * pos / n as f64
    }
}

fn stream(seed: u64, stream_id: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream_id);
    rng
}

#[derive(Debug, Clone)]
struct InjectedImpact {
    truth: GroundTruthImpact,
    radius_px: f64,
    n_rays: f64,
    ray_phase: f64,
}

#[derive(Debug, Clone)]
struct Site {
    center: GeoPoint,
    albedo: f64,
    impacts: Vec<InjectedImpact>,
}

#[derive(Debug, Clone)]
struct ObsPlan {
    site: usize,
    /// Offset of this observation's upper-left pixel in the site frame.
    row_shift: i64,
    col_shift: i64,
}

/// A generated world: observation plans, ground truth and the TI field.
/// Implements [`ArchiveSource`] by rendering observations on request.
pub struct SyntheticWorld {
    cfg: SyntheticWorldConfig,
    field: TiField,
    sites: Vec<Site>,
    metas: Vec<ObservationMeta>,
    plans: Vec<ObsPlan>,
}

impl SyntheticWorld {
    pub fn generate(cfg: &SyntheticWorldConfig) -> Result<Self, SynthError> {
        cfg.validate()?;
        let field = TiField::generate(cfg);
        let dpp = cfg.deg_per_px();
        let (w, h) = (cfg.site_width, cfg.site_height);
        let jitter = cfg.registration_jitter_px as i64;
        let d = &cfg.detectability;
        let span_s = cfg.span_years * SECONDS_PER_YEAR;
        let sin_lo = cfg.lat_min.to_radians().sin();
        let sin_hi = cfg.lat_max.to_radians().sin();
        let id_width = cfg.n_sites.saturating_sub(1).to_string().len().max(5);

        let mut sites = Vec::with_capacity(cfg.n_sites);
        let mut metas = Vec::new();
        let mut plans = Vec::new();
        for s in 0..cfg.n_sites {
            let mut rng = stream(cfg.rng_seed, STREAM_SITES, s as u64);
            let lat = rng.random_range(sin_lo..sin_hi).asin().to_degrees();
            let lon = rng.random_range(0.0..360.0);
            let center = GeoPoint::new(lat, lon);
            let geo = GeoTransform::new(
                normalize_lon(lon - (w as f64 - 1.0) / 2.0 * dpp),
                lat + (h as f64 - 1.0) / 2.0 * dpp,
                dpp,
            )?;
            let site_ti = field.ti(lat, lon);
            let albedo = 0.62 - 0.22 * (site_ti / cfg.ti_field.max_ti).min(1.0);

            let n_obs = rng.random_range(cfg.min_obs_per_site..=cfg.max_obs_per_site);
            let mut times: Vec<f64> = (0..n_obs).map(|_| rng.random_range(0.0..span_s)).collect();
            times.sort_by(f64::total_cmp);
            for (k, t) in times.iter().enumerate() {
                let (row_shift, col_shift) = if jitter > 0 {
                    (
                        rng.random_range(-jitter..=jitter),
                        rng.random_range(-jitter..=jitter),
                    )
                } else {
                    (0, 0)
                };
                let origin = geo.pixel_to_geo(row_shift as f64, col_shift as f64);
                metas.push(ObservationMeta {
                    id: format!("S{s:0id_width$}_{k}"),
                    acquired_at: cfg.start + Duration::milliseconds((t * 1000.0).round() as i64),
                    width: w,
                    height: h,
                    geo: GeoTransform::new(origin.lon, origin.lat, dpp)?,
                });
                plans.push(ObsPlan {
                    site: s,
                    row_shift,
                    col_shift,
                });
            }

            // impacts fall in the region every repeat observation covers
            let inner_w = (w as i64 - 2 * jitter) as f64;
            let inner_h = (h as i64 - 2 * jitter) as f64;
            let area_km2 =
                inner_w * inner_h * cfg.meters_per_px.powi(2) * lat.to_radians().cos() / 1e6;
            let lambda = cfg.impact_rate * area_km2 * cfg.span_years;
            let n_imp = if lambda > 0.0 {
                Poisson::new(lambda)
                    .map_err(|e| SynthError::Config(e.to_string()))?
                    .sample(&mut rng) as usize
            } else {
                0
            };
            let mut impacts = Vec::with_capacity(n_imp);
            for _ in 0..n_imp {
                let row = jitter as f64 + rng.random_range(0.0..inner_h) - 0.5;
                let col = jitter as f64 + rng.random_range(0.0..inner_w) - 0.5;
                let p = geo.pixel_to_geo(row, col);
                let t = rng.random_range(0.0..span_s);
                let amp = rng
                    .random_range(d.amplitude_min.ln()..=d.amplitude_max.ln())
                    .exp();
                let radius_px = rng.random_range(d.radius_px_min..=d.radius_px_max);
                let sign = if rng.random_bool(d.light_fraction) {
                    1.0
                } else {
                    -1.0
                };
                let ti = field.ti(p.lat, p.lon);
                impacts.push(InjectedImpact {
                    truth: GroundTruthImpact {
                        site: s,
                        lat: p.lat,
                        lon: p.lon,
                        time: cfg.start + Duration::milliseconds((t * 1000.0).round() as i64),
                        contrast: sign * amp * (-ti / d.ti_scale).exp(),
                        ti,
                        radius_m: radius_px * cfg.meters_per_px,
                    },
                    radius_px,
                    n_rays: rng.random_range(3..=7) as f64,
                    ray_phase: rng.random_range(0.0..2.0 * PI),
                });
            }
            sites.push(Site {
                center,
                albedo,
                impacts,
            });
        }

        let mut order: Vec<usize> = (0..metas.len()).collect();
        order.sort_by(|&a, &b| metas[a].id.cmp(&metas[b].id));
        let metas = order.iter().map(|&i| metas[i].clone()).collect();
        let plans = order.iter().map(|&i| plans[i].clone()).collect();
        Ok(Self {
            cfg: cfg.clone(),
            field,
            sites,
            metas,
            plans,
        })
    }

    pub fn config(&self) -> &SyntheticWorldConfig {
        &self.cfg
    }

    pub fn field(&self) -> &TiField {
        &self.field
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn site_center(&self, site: usize) -> GeoPoint {
        self.sites[site].center
    }

    /// Every injected impact, ordered by site then injection order.
    pub fn ground_truth(&self) -> Vec<GroundTruthImpact> {
        self.sites
            .iter()
            .flat_map(|s| s.impacts.iter().map(|i| i.truth.clone()))
            .collect()
    }

    /// Area in km² over which impacts are injected, summed over sites.
    pub fn impact_area_km2(&self) -> f64 {
        let j = 2.0 * self.cfg.registration_jitter_px as f64;
        let px_area = (self.cfg.site_width as f64 - j) * (self.cfg.site_height as f64 - j);
        self.sites
            .iter()
            .map(|s| {
                px_area * self.cfg.meters_per_px.powi(2) * s.center.lat.to_radians().cos() / 1e6
            })
            .sum()
    }

    /// Observation ids of one site, in acquisition order.
    pub fn site_observations(&self, site: usize) -> Vec<&ObservationMeta> {
        let mut v: Vec<&ObservationMeta> = self
            .metas
            .iter()
            .zip(&self.plans)
            .filter(|(_, p)| p.site == site)
            .map(|(m, _)| m)
            .collect();
        v.sort_by_key(|m| m.acquired_at);
        v
    }

    pub fn site_of(&self, observation_id: &str) -> Option<usize> {
        self.index_of(observation_id).map(|i| self.plans[i].site)
    }

    fn index_of(&self, id: &str) -> Option<usize> {
        self.metas.binary_search_by(|m| m.id.as_str().cmp(id)).ok()
    }

    fn render(&self, i: usize) -> Result<Observation, RasterError> {
        let meta = &self.metas[i];
        let plan = &self.plans[i];
        let site = &self.sites[plan.site];
        let cfg = &self.cfg;
        let (w, h) = (meta.width, meta.height);

        // coarse texture in the site frame, shared by every repeat observation
        let cell = cfg.texture_cell_px as f64;
        let j = cfg.registration_jitter_px as i64;
        let gw = ((cfg.site_width as i64 + 2 * j) as f64 / cell).ceil() as usize + 2;
        let gh = ((cfg.site_height as i64 + 2 * j) as f64 / cell).ceil() as usize + 2;
        let mut trng = stream(cfg.rng_seed, STREAM_RENDER, plan.site as u64);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let ctrl: Vec<f64> = (0..gw * gh)
            .map(|_| cfg.texture_amplitude * unit.sample(&mut trng))
            .collect();

        let cols: Vec<(usize, f64)> = (0..w)
            .map(|c| {
                let fc = (c as i64 + plan.col_shift + j) as f64 / cell;
                let c0 = fc.floor() as usize;
                (c0, fc - c0 as f64)
            })
            .collect();
        let mut pixels = vec![0f32; w * h];
        for r in 0..h {
            let fr = (r as i64 + plan.row_shift + j) as f64 / cell;
            let r0 = fr.floor() as usize;
            let tr = fr - r0 as f64;
            let (top, bot) = (
                &ctrl[r0 * gw..(r0 + 1) * gw],
                &ctrl[(r0 + 1) * gw..(r0 + 2) * gw],
            );
            for (px, &(c0, tc)) in pixels[r * w..(r + 1) * w].iter_mut().zip(&cols) {
                let tex = (1.0 - tr) * ((1.0 - tc) * top[c0] + tc * top[c0 + 1])
                    + tr * ((1.0 - tc) * bot[c0] + tc * bot[c0 + 1]);
                *px = (site.albedo + tex) as f32;
            }
        }

        for imp in site
            .impacts
            .iter()
            .filter(|imp| imp.truth.time < meta.acquired_at)
        {
            let (pr, pc) = meta
                .geo
                .geo_to_pixel(GeoPoint::new(imp.truth.lat, imp.truth.lon));
            let reach = 3.0 * imp.radius_px;
            let r_lo = (pr - reach).floor().max(0.0) as usize;
            let r_hi = ((pr + reach).ceil().max(0.0) as usize).min(h.saturating_sub(1));
            let c_lo = (pc - reach).floor().max(0.0) as usize;
            let c_hi = ((pc + reach).ceil().max(0.0) as usize).min(w.saturating_sub(1));
            let (pr, pc) = (pr as f32, pc as f32);
            let inv_r = 1.0 / imp.radius_px as f32;
            let (reach2, contrast) = ((reach * reach) as f32, imp.truth.contrast as f32);
            let (n_rays, phase) = (imp.n_rays as f32, imp.ray_phase as f32);
            for r in r_lo..=r_hi {
                let dy = r as f32 - pr;
                let row = &mut pixels[r * w..(r + 1) * w];
                for (c, px) in row.iter_mut().enumerate().take(c_hi + 1).skip(c_lo) {
                    let dx = c as f32 - pc;
                    let d2 = dy * dy + dx * dx;
                    if d2 > reach2 {
                        continue;
                    }
                    let u = d2.sqrt() * inv_r;
                    let mut v = (-u * u).exp();
                    if u > 0.7 {
                        let a = (n_rays * dy.atan2(dx) + phase).cos().max(0.0);
                        v += 0.5 * a.powi(8) * (-(u - 0.7) / 1.2).exp();
                    }
                    *px += contrast * v;
                }
            }
        }

        let mut nrng = stream(cfg.rng_seed, STREAM_RENDER, (1 << 40) + i as u64);
        let noise = cfg.noise_sigma as f32;
        for v in pixels.iter_mut() {
            let n: f32 = StandardNormal.sample(&mut nrng);
            *v = (*v + noise * n).clamp(0.0, 1.0);
        }
        Observation::new(meta.clone(), pixels)
    }

    /// Primary and fallback TI maps sampled from the field over the site band.
    pub fn basemap(&self) -> Result<TiBasemap, SynthError> {
        let t = &self.cfg.ti_field;
        let lat_top = (self.cfg.lat_max + 1.0).min(90.0);
        let lat_bot = (self.cfg.lat_min - 1.0).max(-90.0);
        let make = |dpp: f64, gap: bool| -> Result<Grid, SynthError> {
            let width = (360.0 / dpp).round() as usize;
            let height = ((lat_top - lat_bot) / dpp).ceil() as usize;
            let geo = GeoTransform::new(dpp / 2.0, lat_top - dpp / 2.0, dpp)?;
            let mut values = Vec::with_capacity(width * height);
            for r in 0..height {
                for c in 0..width {
                    let p = geo.pixel_to_geo(r as f64, c as f64);
                    let in_gap =
                        gap && (5.0..20.0).contains(&p.lat) && (100.0..130.0).contains(&p.lon);
                    values.push(if in_gap {
                        BASEMAP_NODATA
                    } else {
                        self.field.ti(p.lat, p.lon).round() as f32
                    });
                }
            }
            Ok(Grid::new(geo, width, height, values, BASEMAP_NODATA)?)
        };
        Ok(TiBasemap::new(
            Some(make(t.primary_deg_per_px, t.primary_gap)?),
            Some(make(t.fallback_deg_per_px, false)?),
        )?)
    }

    /// Balanced labeled windows drawn from ground truth: windows roughly
    /// centered on impacts in post-impact observations, and windows with no
    /// visible impact. At most `max_per_class` of each.
    pub fn training_windows(
        &self,
        size: usize,
        max_per_class: usize,
        seed: u64,
    ) -> Result<Vec<LabeledWindow>, SynthError> {
        let mut rng = stream(self.cfg.rng_seed ^ seed, STREAM_TRAIN, 0);
        let (w, h) = (self.cfg.site_width, self.cfg.site_height);
        if size > w.min(h) {
            return Err(SynthError::Config(format!(
                "training window {size}px exceeds the site"
            )));
        }
        let half = (size as f64 - 1.0) / 2.0;
        let clamp_center = |v: f64, n: usize| v.clamp(half, n as f64 - 1.0 - half);

        let mut pos_specs = Vec::new();
        for (i, m) in self.metas.iter().enumerate() {
            let site = &self.sites[self.plans[i].site];
            for imp in site
                .impacts
                .iter()
                .filter(|imp| imp.truth.time < m.acquired_at)
            {
                let (r, c) = m
                    .geo
                    .geo_to_pixel(GeoPoint::new(imp.truth.lat, imp.truth.lon));
                pos_specs.push((i, r, c));
            }
        }
        shuffle(&mut pos_specs, &mut rng);
        pos_specs.truncate(max_per_class);
        let n = pos_specs.len();

        let mut by_obs: Vec<Vec<(usize, f64, f64, Label)>> = vec![Vec::new(); self.metas.len()];
        let stride_half = 37.0;
        for (i, r, c) in pos_specs {
            let r = clamp_center(r + rng.random_range(-stride_half..=stride_half), h);
            let c = clamp_center(c + rng.random_range(-stride_half..=stride_half), w);
            by_obs[i].push((i, r, c, Label::Positive));
        }
        let mut negs = 0;
        let mut attempts = 0;
        while negs < n && attempts < 50 * n.max(1) {
            attempts += 1;
            let i = rng.random_range(0..self.metas.len());
            let m = &self.metas[i];
            let r = rng.random_range(half..=h as f64 - 1.0 - half);
            let c = rng.random_range(half..=w as f64 - 1.0 - half);
            let site = &self.sites[self.plans[i].site];
            let visible = site
                .impacts
                .iter()
                .filter(|imp| imp.truth.time < m.acquired_at)
                .any(|imp| {
                    let (ir, ic) = m
                        .geo
                        .geo_to_pixel(GeoPoint::new(imp.truth.lat, imp.truth.lon));
                    let reach = half + 3.0 * imp.radius_px;
                    (ir - r).abs() <= reach && (ic - c).abs() <= reach
                });
            if !visible {
                by_obs[i].push((i, r, c, Label::Negative));
                negs += 1;
            }
        }

        let per_obs: Vec<Vec<LabeledWindow>> = by_obs
            .par_iter()
            .enumerate()
            .filter(|(_, specs)| !specs.is_empty())
            .map(|(i, specs)| {
                let obs = self.render(i)?;
                Ok(specs
                    .iter()
                    .map(|&(_, r, c, label)| LabeledWindow {
                        pixels: obs.crop_padded(
                            (r - half).round() as i64,
                            (c - half).round() as i64,
                            size,
                            size,
                            0.0,
                        ),
                        label,
                    })
                    .collect())
            })
            .collect::<Result<_, RasterError>>()?;
        Ok(per_obs.into_iter().flatten().collect())
    }

    /// Writes observations, basemaps, ground truth and the config.
    pub fn write_dir(&self, dir: &Path) -> Result<(), SynthError> {
        self.write_archive(&dir.join("archive"))?;
        self.basemap()?.write_dir(&dir.join("basemaps"))?;
        self.write_ground_truth(&dir.join("ground_truth.jsonl"))?;
        std::fs::write(dir.join("world.toml"), self.cfg.to_toml())?;
        Ok(())
    }

    /// Renders every observation into `dir` as PNG plus sidecar.
    pub fn write_archive(&self, dir: &Path) -> Result<(), SynthError> {
        std::fs::create_dir_all(dir)?;
        (0..self.metas.len())
            .into_par_iter()
            .try_for_each(|i| -> Result<(), SynthError> {
                write_observation(dir, &self.render(i)?)?;
                Ok(())
            })
    }

    pub fn write_ground_truth(&self, path: &Path) -> Result<(), SynthError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for g in self.ground_truth() {
            serde_json::to_writer(&mut f, &g)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}

impl ArchiveSource for SyntheticWorld {
    fn metas(&self) -> &[ObservationMeta] {
        &self.metas
    }

    fn load(&self, id: &str) -> Result<Observation, RasterError> {
        let i = self
            .index_of(id)
            .ok_or_else(|| RasterError::UnknownObservation(id.to_string()))?;
        self.render(i)
    }
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthImpact>, SynthError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(SynthError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{extract_windows, WindowParams};

    fn small(seed: u64) -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            rng_seed: seed,
            n_sites: 12,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = SyntheticWorld::generate(&small(3)).unwrap();
        let b = SyntheticWorld::generate(&small(3)).unwrap();
        assert_eq!(a.metas(), b.metas());
        assert_eq!(a.ground_truth(), b.ground_truth());
        let id = &a.metas()[5].id;
        assert_eq!(a.load(id).unwrap(), b.load(id).unwrap());
        let c = SyntheticWorld::generate(&small(4)).unwrap();
        assert_ne!(a.metas(), c.metas());
    }

    #[test]
    fn zero_rate_repeats_differ_only_by_noise() {
        let cfg = SyntheticWorldConfig {
            impact_rate: 0.0,
            registration_jitter_px: 0,
            ..small(5)
        };
        let w = SyntheticWorld::generate(&cfg).unwrap();
        assert!(w.ground_truth().is_empty());
        let obs = w.site_observations(0);
        let a = w.load(&obs[0].id).unwrap();
        let b = w.load(&obs[1].id).unwrap();
        let diffs: Vec<f64> = a
            .pixels()
            .iter()
            .zip(b.pixels())
            .map(|(x, y)| (x - y) as f64)
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let sd =
            (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt();
        assert!(mean.abs() < 1e-3);
        // difference of two independent noise draws
        assert!((sd - cfg.noise_sigma * 2f64.sqrt()).abs() < 0.1 * cfg.noise_sigma);
    }

    #[test]
    fn poisson_count_oracle() {
        for seed in 0..20 {
            let cfg = SyntheticWorldConfig {
                n_sites: 300,
                impact_rate: 0.05,
                ..small(seed)
            };
            let w = SyntheticWorld::generate(&cfg).unwrap();
            let lambda = cfg.impact_rate * w.impact_area_km2() * cfg.span_years;
            let n = w.ground_truth().len() as f64;
            assert!(
                (n - lambda).abs() < 4.0 * lambda.sqrt(),
                "seed {seed}: {n} vs {lambda}"
            );
        }
    }

    #[test]
    fn impacts_are_covered_by_post_impact_windows() {
        let w = SyntheticWorld::generate(&small(9)).unwrap();
        let params = WindowParams::default();
        for g in w.ground_truth() {
            for m in w
                .site_observations(g.site)
                .into_iter()
                .filter(|m| m.acquired_at > g.time)
            {
                let (r, c) = m.geo.geo_to_pixel(GeoPoint::new(g.lat, g.lon));
                assert!(m.contains_pixel(r, c));
                assert!(extract_windows(m, params).iter().any(|win| {
                    let (r0, c0) = (win.row_off as f64 - 0.5, win.col_off as f64 - 0.5);
                    r >= r0 && r < r0 + win.size as f64 && c >= c0 && c < c0 + win.size as f64
                }));
            }
        }
    }

    #[test]
    fn ti_is_roughly_uniform_by_area() {
        let w = SyntheticWorld::generate(&small(1)).unwrap();
        let mut counts = [0.0f64; 12];
        let mut total = 0.0;
        for i in 0..260 {
            let lat = -64.75 + i as f64 * 0.5;
            let wt = lat.to_radians().cos();
            for j in 0..720 {
                let ti = w.field().ti(lat, j as f64 * 0.5 + 0.25);
                assert!((0.0..=1200.0).contains(&ti));
                counts[((ti / 100.0) as usize).min(11)] += wt;
                total += wt;
            }
        }
        for c in counts {
            assert!((c / total - 1.0 / 12.0).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn training_windows_are_balanced() {
        let w = SyntheticWorld::generate(&small(2)).unwrap();
        let set = w.training_windows(300, 40, 0).unwrap();
        let pos = set.iter().filter(|s| s.label == Label::Positive).count();
        assert!(pos > 0);
        assert_eq!(set.len(), 2 * pos);
        assert!(set
            .iter()
            .all(|s| s.pixels.width == 300 && s.pixels.height == 300));
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = small(11);
        assert_eq!(
            SyntheticWorldConfig::from_toml(&cfg.to_toml()).unwrap(),
            cfg
        );
        assert!(SyntheticWorldConfig::from_toml("n_sites = 3\nbogus = 1\n").is_err());
        let bad = SyntheticWorldConfig {
            min_obs_per_site: 0,
            ..small(1)
        };
        assert!(bad.validate().is_err());
    }
}
