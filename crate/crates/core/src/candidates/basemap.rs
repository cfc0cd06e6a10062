//! Thermal-inertia basemaps: nearest-pixel point sampling with a coarse
//! fallback grid, and footprint averaging.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CandidateError;
use crate::raster::{
    read_gray_raw, read_sidecar, write_gray_u16, GeoPoint, GeoTransform, ObservationSidecar,
};

/// A single-band map on an equirectangular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    geo: GeoTransform,
    width: usize,
    height: usize,
    values: Vec<f32>,
    nodata: f32,
}

impl Grid {
    pub fn new(
        geo: GeoTransform,
        width: usize,
        height: usize,
        values: Vec<f32>,
        nodata: f32,
    ) -> Result<Self, CandidateError> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(CandidateError::Basemap(format!(
                "{} values for a {width}x{height} grid",
                values.len()
            )));
        }
        Ok(Self {
            geo,
            width,
            height,
            values,
            nodata,
        })
    }

    pub fn geo(&self) -> &GeoTransform {
        &self.geo
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn nodata(&self) -> f32 {
        self.nodata
    }

    pub fn raw(&self) -> &[f32] {
        &self.values
    }

    /// Value at a pixel, or `None` for no-data. Negative values are treated
    /// as no-data.
    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.values[row * self.width + col];
        if v == self.nodata || !v.is_finite() || v < 0.0 {
            None
        } else {
            Some(v as f64)
        }
    }

    /// Fractional `(row, col)` of `p`, with the column moved one turn east
    /// when that lands inside a grid spanning more than half the planet.
    pub fn locate(&self, p: GeoPoint) -> (f64, f64) {
        let (r, c) = self.geo.geo_to_pixel(p);
        (r, self.unwrap_col(c))
    }

    fn unwrap_col(&self, c: f64) -> f64 {
        let turn = 360.0 / self.geo.deg_per_px();
        if c < -0.5 && c + turn < self.width as f64 - 0.5 {
            c + turn
        } else {
            c
        }
    }

    /// Pixel whose center is closest to `p`, if inside the grid.
    pub fn nearest_pixel(&self, p: GeoPoint) -> Option<(usize, usize)> {
        let (r, c) = self.locate(p);
        let (r, c) = (r.round(), c.round());
        if r < 0.0 || c < 0.0 || r >= self.height as f64 || c >= self.width as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn nearest(&self, p: GeoPoint) -> Option<f64> {
        self.nearest_pixel(p).and_then(|(r, c)| self.value(r, c))
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> GeoPoint {
        self.geo.pixel_to_geo(row as f64, col as f64)
    }

    /// Reads a 16-bit grayscale raster whose samples are the map values in
    /// physical units, plus a sidecar carrying the geotransform and `nodata`.
    pub fn read(image_path: &Path, sidecar_path: &Path) -> Result<Self, CandidateError> {
        let sidecar = read_sidecar(sidecar_path)?;
        let geo = sidecar.geotransform()?;
        let nodata = sidecar
            .nodata
            .ok_or_else(|| CandidateError::Basemap("sidecar missing `nodata`".into()))?;
        let (w, h, raw, _) = read_gray_raw(image_path)?;
        Self::new(geo, w, h, raw, nodata as f32)
    }

    /// Writes `<dir>/<name>.png` + `<dir>/<name>.json`. Values are rounded to
    /// integers in `[0, 65535]`.
    pub fn write(&self, dir: &Path, name: &str) -> Result<(), CandidateError> {
        fs::create_dir_all(dir)?;
        let samples = self
            .values
            .iter()
            .map(|v| v.round().clamp(0.0, 65535.0) as u16)
            .collect();
        write_gray_u16(
            &dir.join(format!("{name}.png")),
            self.width,
            self.height,
            samples,
        )?;
        let sidecar = ObservationSidecar {
            origin_lon: Some(self.geo.origin_lon()),
            origin_lat: Some(self.geo.origin_lat()),
            deg_per_px: Some(self.geo.deg_per_px()),
            width: Some(self.width),
            height: Some(self.height),
            nodata: Some(self.nodata as f64),
            ..Default::default()
        };
        fs::write(
            dir.join(format!("{name}.json")),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiSource {
    Primary,
    Fallback,
    Missing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiSample {
    pub value: Option<f64>,
    pub source: TiSource,
}

/// Fine primary thermal-inertia map with a coarse fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct TiBasemap {
    primary: Option<Grid>,
    fallback: Option<Grid>,
}

impl TiBasemap {
    pub fn new(primary: Option<Grid>, fallback: Option<Grid>) -> Result<Self, CandidateError> {
        if primary.is_none() && fallback.is_none() {
            return Err(CandidateError::Basemap(
                "at least one grid is required".into(),
            ));
        }
        Ok(Self { primary, fallback })
    }

    pub fn primary(&self) -> Option<&Grid> {
        self.primary.as_ref()
    }

    pub fn fallback(&self) -> Option<&Grid> {
        self.fallback.as_ref()
    }

    /// Loads `primary.{png,json}` and/or `fallback.{png,json}` from a directory.
    pub fn read_dir(dir: &Path) -> Result<Self, CandidateError> {
        let load = |name: &str| -> Result<Option<Grid>, CandidateError> {
            let (img, side) = (
                dir.join(format!("{name}.png")),
                dir.join(format!("{name}.json")),
            );
            if img.exists() && side.exists() {
                Grid::read(&img, &side).map(Some)
            } else {
                Ok(None)
            }
        };
        Self::new(load("primary")?, load("fallback")?)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), CandidateError> {
        if let Some(g) = &self.primary {
            g.write(dir, "primary")?;
        }
        if let Some(g) = &self.fallback {
            g.write(dir, "fallback")?;
        }
        Ok(())
    }

    /// Value used to fill a location: primary if valid, else fallback.
    pub fn value_at(&self, p: GeoPoint) -> Option<f64> {
        sample_ti(self, p).value
    }
}

/// Nearest-pixel thermal inertia at a point, primary first.
pub fn sample_ti(map: &TiBasemap, p: GeoPoint) -> TiSample {
    if let Some(v) = map.primary.as_ref().and_then(|g| g.nearest(p)) {
        return TiSample {
            value: Some(v),
            source: TiSource::Primary,
        };
    }
    if let Some(v) = map.fallback.as_ref().and_then(|g| g.nearest(p)) {
        return TiSample {
            value: Some(v),
            source: TiSource::Fallback,
        };
    }
    TiSample {
        value: None,
        source: TiSource::Missing,
    }
}

/// Unweighted mean of the valid pixels whose centers fall inside `polygon`
/// (vertices as lat/lon, either winding).
pub fn sample_footprint_mean(grid: &Grid, polygon: &[GeoPoint]) -> Result<f64, CandidateError> {
    if polygon.len() < 3 {
        return Err(CandidateError::Footprint(
            "polygon needs at least 3 vertices".into(),
        ));
    }
    // work in pixel space so longitudes are unwrapped relative to the grid
    let mut pts: Vec<(f64, f64)> = polygon.iter().map(|&p| grid.geo.geo_to_pixel(p)).collect();
    let mean_c = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let shift = grid.unwrap_col(mean_c) - mean_c;
    for p in &mut pts {
        p.1 += shift;
    }
    let area2: f64 = pts
        .iter()
        .zip(pts.iter().cycle().skip(1))
        .map(|(a, b)| a.1 * b.0 - b.1 * a.0)
        .sum();
    if area2.abs() <= 0.0 {
        return Err(CandidateError::Footprint("polygon has zero area".into()));
    }
    let (rmin, rmax) = pts.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| {
        (lo.min(p.0), hi.max(p.0))
    });
    let (cmin, cmax) = pts.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| {
        (lo.min(p.1), hi.max(p.1))
    });
    let r0 = rmin.ceil().max(0.0) as usize;
    let c0 = cmin.ceil().max(0.0) as usize;
    let r1 = (rmax.floor().min(grid.height as f64 - 1.0)).max(-1.0);
    let c1 = (cmax.floor().min(grid.width as f64 - 1.0)).max(-1.0);
    let (mut sum, mut n) = (0.0, 0usize);
    if r1 >= 0.0 && c1 >= 0.0 {
        for r in r0..=r1 as usize {
            for c in c0..=c1 as usize {
                if point_in_polygon(r as f64, c as f64, &pts) {
                    if let Some(v) = grid.value(r, c) {
                        sum += v;
                        n += 1;
                    }
                }
            }
        }
    }
    if n == 0 {
        return Err(CandidateError::Footprint(
            "polygon covers no valid pixels".into(),
        ));
    }
    Ok(sum / n as f64)
}

/// Even-odd rule; points on the left/top edges count as inside.
fn point_in_polygon(y: f64, x: f64, pts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (yi, xi) = pts[i];
        let (yj, xj) = pts[j];
        if (yi > y) != (yj > y) {
            let x_cross = xi + (y - yi) * (xj - xi) / (yj - yi);
            if x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

#[cfg(test)]
mod tests {
    use super::*;

    const NODATA: f32 = 65535.0;

    fn grid(values: Vec<f32>, w: usize, dpp: f64) -> Grid {
        let h = values.len() / w;
        Grid::new(
            GeoTransform::new(10.0, 5.0, dpp).unwrap(),
            w,
            h,
            values,
            NODATA,
        )
        .unwrap()
    }

    #[test]
    fn global_grid_east_of_antimeridian() {
        // 36 columns of 10 degrees starting at lon 5
        let values: Vec<f32> = (0..36).map(|c| c as f32).collect();
        let g = Grid::new(
            GeoTransform::new(5.0, 0.0, 10.0).unwrap(),
            36,
            1,
            values,
            NODATA,
        )
        .unwrap();
        assert_eq!(g.nearest(GeoPoint::new(0.0, 355.0)), Some(35.0));
        assert_eq!(g.nearest(GeoPoint::new(0.0, 200.0)), Some(20.0));
        assert_eq!(g.nearest(GeoPoint::new(0.0, 185.0)), Some(18.0));
        assert_eq!(g.nearest(GeoPoint::new(0.0, 0.2)), Some(0.0));
        let sq = [(1.0, 250.0), (1.0, 270.0), (-1.0, 270.0), (-1.0, 250.0)]
            .map(|(la, lo)| GeoPoint::new(la, lo));
        assert_eq!(sample_footprint_mean(&g, &sq).unwrap(), 25.5);
    }

    #[test]
    fn exact_pixel_hit() {
        let m = TiBasemap::new(Some(grid(vec![150.0, 300.0, 450.0, 600.0], 2, 0.1)), None).unwrap();
        let s = sample_ti(&m, GeoPoint::new(5.0, 10.0));
        assert_eq!(
            s,
            TiSample {
                value: Some(150.0),
                source: TiSource::Primary
            }
        );
        let s = sample_ti(&m, GeoPoint::new(4.9, 10.1));
        assert_eq!(s.value, Some(600.0));
    }

    #[test]
    fn fallback_then_missing() {
        let primary = grid(vec![NODATA, 300.0], 2, 0.1);
        let fallback = grid(vec![210.0], 1, 1.0);
        let m = TiBasemap::new(Some(primary), Some(fallback)).unwrap();
        assert_eq!(
            sample_ti(&m, GeoPoint::new(5.0, 10.0)),
            TiSample {
                value: Some(210.0),
                source: TiSource::Fallback
            }
        );
        // outside primary coverage but inside fallback
        assert_eq!(
            sample_ti(&m, GeoPoint::new(4.7, 10.0)).source,
            TiSource::Fallback
        );

        let none = TiBasemap::new(
            Some(grid(vec![NODATA], 1, 0.1)),
            Some(grid(vec![NODATA], 1, 1.0)),
        )
        .unwrap();
        assert_eq!(
            sample_ti(&none, GeoPoint::new(5.0, 10.0)),
            TiSample {
                value: None,
                source: TiSource::Missing
            }
        );
    }

    #[test]
    fn negative_values_are_nodata() {
        let m = TiBasemap::new(Some(grid(vec![-5.0], 1, 0.1)), None).unwrap();
        assert_eq!(
            sample_ti(&m, GeoPoint::new(5.0, 10.0)).source,
            TiSource::Missing
        );
    }

    #[test]
    fn requires_a_grid() {
        assert!(TiBasemap::new(None, None).is_err());
    }

    fn rect(lat0: f64, lat1: f64, lon0: f64, lon1: f64) -> Vec<GeoPoint> {
        vec![
            GeoPoint::new(lat0, lon0),
            GeoPoint::new(lat0, lon1),
            GeoPoint::new(lat1, lon1),
            GeoPoint::new(lat1, lon0),
        ]
    }

    #[test]
    fn footprint_means() {
        let g = grid(vec![100.0, 200.0, 400.0, 800.0], 2, 0.1);
        // single pixel (row 0, col 0)
        assert_eq!(
            sample_footprint_mean(&g, &rect(5.04, 4.96, 9.96, 10.04)).unwrap(),
            100.0
        );
        // first row: {100, 200}
        assert_eq!(
            sample_footprint_mean(&g, &rect(5.04, 4.96, 9.96, 10.14)).unwrap(),
            150.0
        );
        let holes = grid(vec![NODATA, NODATA, 5.0, 5.0], 2, 0.1);
        assert!(sample_footprint_mean(&holes, &rect(5.04, 4.96, 9.96, 10.14)).is_err());
        assert!(sample_footprint_mean(&g, &rect(5.0, 5.0, 9.9, 10.1)).is_err());
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = TiBasemap::new(
            Some(grid(vec![100.0, NODATA, 1200.0, 7.0], 2, 0.1)),
            Some(grid(vec![250.0], 1, 1.0)),
        )
        .unwrap();
        m.write_dir(dir.path()).unwrap();
        assert_eq!(TiBasemap::read_dir(dir.path()).unwrap(), m);
    }
}
