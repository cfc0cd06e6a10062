//! Raster data model: equirectangular geotransforms, observations, and the
//! sliding-window tiling used by the scanner.

mod archive;
mod io;

pub use archive::{ArchiveSource, DirectoryArchive, InMemoryArchive};
pub use io::{
    import_observation, read_gray_raw, read_sidecar, render_context_png, write_gray_u16,
    write_observation, ObservationSidecar,
};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_WINDOW_SIZE: usize = 300;
pub const DEFAULT_STRIDE: usize = 75;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("invalid geotransform: {0}")]
    GeoTransform(String),
    #[error("invalid observation `{id}`: {reason}")]
    Observation { id: String, reason: String },
    #[error("metadata field `{field}`: {reason}")]
    Metadata { field: &'static str, reason: String },
    #[error("window {row_off},{col_off}+{size} does not fit observation `{id}`")]
    WindowOutOfBounds {
        id: String,
        row_off: usize,
        col_off: usize,
        size: usize,
    },
    #[error("window belongs to `{window}`, not `{observation}`")]
    WrongObservation { window: String, observation: String },
    #[error("unknown observation `{0}`")]
    UnknownObservation(String),
    #[error("unsupported raster: {0}")]
    Unsupported(String),
    #[error("image decode: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A point on the planet, degrees north / degrees east.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }
}

/// Normalizes a longitude into `[0, 360)`.
pub fn normalize_lon(lon: f64) -> f64 {
    let l = lon.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if l >= 360.0 {
        0.0
    } else {
        l
    }
}

/// Signed longitude difference `b - a` wrapped into `[-180, 180)`.
pub fn lon_delta(a: f64, b: f64) -> f64 {
    (b - a + 180.0).rem_euclid(360.0) - 180.0
}

#[derive(Deserialize)]
struct GeoTransformRaw {
    origin_lon: f64,
    origin_lat: f64,
    deg_per_px: f64,
}

/// Equirectangular pixel ↔ geographic mapping with square pixels and north up.
///
/// The origin is the center of the upper-left pixel; pixel `(row, col)` has
/// center `(origin_lat - row * deg_per_px, origin_lon + col * deg_per_px)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeoTransformRaw")]
pub struct GeoTransform {
    origin_lon: f64,
    origin_lat: f64,
    deg_per_px: f64,
}

impl TryFrom<GeoTransformRaw> for GeoTransform {
    type Error = RasterError;

    fn try_from(raw: GeoTransformRaw) -> Result<Self, Self::Error> {
        GeoTransform::new(raw.origin_lon, raw.origin_lat, raw.deg_per_px)
    }
}

impl GeoTransform {
    pub fn new(origin_lon: f64, origin_lat: f64, deg_per_px: f64) -> Result<Self, RasterError> {
        if !(deg_per_px.is_finite() && deg_per_px > 0.0) {
            return Err(RasterError::GeoTransform(format!(
                "deg_per_px must be positive, got {deg_per_px}"
            )));
        }
        if !(-90.0..=90.0).contains(&origin_lat) {
            return Err(RasterError::GeoTransform(format!(
                "origin_lat {origin_lat} outside [-90, 90]"
            )));
        }
        if !origin_lon.is_finite() {
            return Err(RasterError::GeoTransform("origin_lon not finite".into()));
        }
        Ok(Self {
            origin_lon: normalize_lon(origin_lon),
            origin_lat,
            deg_per_px,
        })
    }

    pub fn origin_lon(&self) -> f64 {
        self.origin_lon
    }

    pub fn origin_lat(&self) -> f64 {
        self.origin_lat
    }

    pub fn deg_per_px(&self) -> f64 {
        self.deg_per_px
    }

    /// Geographic coordinates of a (fractional) pixel position.
    pub fn pixel_to_geo(&self, row: f64, col: f64) -> GeoPoint {
        GeoPoint {
            lat: self.origin_lat - row * self.deg_per_px,
            lon: normalize_lon(self.origin_lon + col * self.deg_per_px),
        }
    }

    /// Fractional `(row, col)` of a geographic point. Longitudes are taken on
    /// the branch nearest the origin.
    pub fn geo_to_pixel(&self, p: GeoPoint) -> (f64, f64) {
        let row = (self.origin_lat - p.lat) / self.deg_per_px;
        let col = lon_delta(self.origin_lon, p.lon) / self.deg_per_px;
        (row, col)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationMeta {
    pub id: String,
    pub acquired_at: DateTime<Utc>,
    pub width: usize,
    pub height: usize,
    pub geo: GeoTransform,
}

impl ObservationMeta {
    pub fn validate(&self) -> Result<(), RasterError> {
        if self.id.is_empty() {
            return Err(RasterError::Observation {
                id: self.id.clone(),
                reason: "empty id".into(),
            });
        }
        if self.width == 0 || self.height == 0 {
            return Err(RasterError::Observation {
                id: self.id.clone(),
                reason: format!("degenerate size {}x{}", self.width, self.height),
            });
        }
        Ok(())
    }

    pub fn contains_pixel(&self, row: f64, col: f64) -> bool {
        row >= -0.5
            && col >= -0.5
            && row < self.height as f64 - 0.5
            && col < self.width as f64 - 0.5
    }
}

/// One archive image: metadata plus grayscale intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    meta: ObservationMeta,
    pixels: Vec<f32>,
}

impl Observation {
    pub fn new(meta: ObservationMeta, pixels: Vec<f32>) -> Result<Self, RasterError> {
        meta.validate()?;
        if pixels.len() != meta.width * meta.height {
            return Err(RasterError::Observation {
                id: meta.id.clone(),
                reason: format!(
                    "{} pixels for a {}x{} image",
                    pixels.len(),
                    meta.width,
                    meta.height
                ),
            });
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(RasterError::Observation {
                id: meta.id.clone(),
                reason: format!("pixel value {bad} outside [0, 1]"),
            });
        }
        Ok(Self { meta, pixels })
    }

    pub fn meta(&self) -> &ObservationMeta {
        &self.meta
    }

    pub fn id(&self) -> &str {
        &self.meta.id
    }

    pub fn width(&self) -> usize {
        self.meta.width
    }

    pub fn height(&self) -> usize {
        self.meta.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.meta.width + col]
    }

    /// Copies the pixels under `w` into a square patch.
    pub fn window_patch(&self, w: &WindowRef) -> Result<Patch, RasterError> {
        check_window(&self.meta, w)?;
        let mut out = Vec::with_capacity(w.size * w.size);
        for r in w.row_off..w.row_off + w.size {
            let start = r * self.meta.width + w.col_off;
            out.extend_from_slice(&self.pixels[start..start + w.size]);
        }
        Ok(Patch::new(w.size, w.size, out))
    }

    /// Crop of an arbitrary rectangle; pixels outside the image read as `fill`.
    pub fn crop_padded(
        &self,
        row0: i64,
        col0: i64,
        height: usize,
        width: usize,
        fill: f32,
    ) -> Patch {
        let mut out = vec![fill; width * height];
        for r in 0..height {
            let sr = row0 + r as i64;
            if sr < 0 || sr >= self.meta.height as i64 {
                continue;
            }
            for c in 0..width {
                let sc = col0 + c as i64;
                if sc < 0 || sc >= self.meta.width as i64 {
                    continue;
                }
                out[r * width + c] = self.get(sr as usize, sc as usize);
            }
        }
        Patch::new(width, height, out)
    }
}

/// A small row-major grayscale raster (a classifier window, a crop).
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Patch {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), width * height, "patch buffer size");
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Self::new(width, height, vec![v; width * height])
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowParams {
    pub size: usize,
    pub stride: usize,
}

impl Default for WindowParams {
    fn default() -> Self {
        Self {
            size: DEFAULT_WINDOW_SIZE,
            stride: DEFAULT_STRIDE,
        }
    }
}

impl WindowParams {
    pub fn new(size: usize, stride: usize) -> Result<Self, RasterError> {
        if size == 0 || stride == 0 {
            return Err(RasterError::GeoTransform(format!(
                "window size and stride must be >= 1 (got {size}/{stride})"
            )));
        }
        Ok(Self { size, stride })
    }

    /// `(rows, cols)` of window positions in a `width x height` image.
    pub fn grid_dims(&self, width: usize, height: usize) -> (usize, usize) {
        let n = |extent: usize| {
            if extent < self.size {
                0
            } else {
                (extent - self.size) / self.stride + 1
            }
        };
        let (rows, cols) = (n(height), n(width));
        if rows == 0 || cols == 0 {
            (0, 0)
        } else {
            (rows, cols)
        }
    }

    pub fn window_at(&self, observation_id: &str, grid_row: usize, grid_col: usize) -> WindowRef {
        WindowRef {
            observation_id: observation_id.to_string(),
            row_off: grid_row * self.stride,
            col_off: grid_col * self.stride,
            size: self.size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowRef {
    pub observation_id: String,
    pub row_off: usize,
    pub col_off: usize,
    pub size: usize,
}

impl WindowRef {
    /// Fractional pixel coordinates of the window's center.
    pub fn center_pixel(&self) -> (f64, f64) {
        let half = (self.size as f64 - 1.0) / 2.0;
        (self.row_off as f64 + half, self.col_off as f64 + half)
    }
}

fn check_window(meta: &ObservationMeta, w: &WindowRef) -> Result<(), RasterError> {
    if w.observation_id != meta.id {
        return Err(RasterError::WrongObservation {
            window: w.observation_id.clone(),
            observation: meta.id.clone(),
        });
    }
    if w.size == 0 || w.row_off + w.size > meta.height || w.col_off + w.size > meta.width {
        return Err(RasterError::WindowOutOfBounds {
            id: meta.id.clone(),
            row_off: w.row_off,
            col_off: w.col_off,
            size: w.size,
        });
    }
    Ok(())
}

/// All fully-contained windows of an observation, row-major by offset.
pub fn extract_windows(meta: &ObservationMeta, params: WindowParams) -> Vec<WindowRef> {
    let (rows, cols) = params.grid_dims(meta.width, meta.height);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(params.window_at(&meta.id, r, c));
        }
    }
    out
}

pub fn window_center_geo(meta: &ObservationMeta, w: &WindowRef) -> Result<GeoPoint, RasterError> {
    check_window(meta, w)?;
    let (row, col) = w.center_pixel();
    Ok(meta.geo.pixel_to_geo(row, col))
}
