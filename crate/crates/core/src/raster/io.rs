use std::fs;
use std::path::Path;

use chrono::{DateTime, Utc};
use image::{DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use super::{GeoTransform, Observation, ObservationMeta, RasterError, WindowRef};

/// JSON metadata stored next to every raster.
///
/// All fields are optional at parse time so that missing ones can be reported
/// by name instead of as a generic deserialization failure.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationSidecar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acquired_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_lon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deg_per_px: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    /// Basemaps only: value marking missing data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodata: Option<f64>,
}

fn required<T: Clone>(v: &Option<T>, field: &'static str) -> Result<T, RasterError> {
    v.clone().ok_or(RasterError::Metadata {
        field,
        reason: "missing".into(),
    })
}

impl ObservationSidecar {
    pub fn from_meta(meta: &ObservationMeta) -> Self {
        Self {
            id: Some(meta.id.clone()),
            acquired_at: Some(
                meta.acquired_at
                    .to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            ),
            origin_lon: Some(meta.geo.origin_lon()),
            origin_lat: Some(meta.geo.origin_lat()),
            deg_per_px: Some(meta.geo.deg_per_px()),
            width: Some(meta.width),
            height: Some(meta.height),
            nodata: None,
        }
    }

    pub fn geotransform(&self) -> Result<GeoTransform, RasterError> {
        let lon = required(&self.origin_lon, "origin_lon")?;
        let lat = required(&self.origin_lat, "origin_lat")?;
        let dpp = required(&self.deg_per_px, "deg_per_px")?;
        if !(dpp.is_finite() && dpp > 0.0) {
            return Err(RasterError::Metadata {
                field: "deg_per_px",
                reason: format!("must be positive, got {dpp}"),
            });
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(RasterError::Metadata {
                field: "origin_lat",
                reason: format!("{lat} outside [-90, 90]"),
            });
        }
        GeoTransform::new(lon, lat, dpp)
    }

    pub fn acquired_at(&self) -> Result<DateTime<Utc>, RasterError> {
        let raw = required(&self.acquired_at, "acquired_at")?;
        DateTime::parse_from_rfc3339(&raw)
            .map(|t| t.with_timezone(&Utc))
            .map_err(|e| RasterError::Metadata {
                field: "acquired_at",
                reason: format!("not ISO-8601 ({e}): {raw}"),
            })
    }

    /// Builds observation metadata for an image of the given dimensions.
    pub fn to_meta(&self, width: usize, height: usize) -> Result<ObservationMeta, RasterError> {
        let id = required(&self.id, "id")?;
        if id.is_empty() {
            return Err(RasterError::Metadata {
                field: "id",
                reason: "empty".into(),
            });
        }
        let acquired_at = self.acquired_at()?;
        let geo = self.geotransform()?;
        if let Some(w) = self.width {
            if w != width {
                return Err(RasterError::Metadata {
                    field: "width",
                    reason: format!("sidecar says {w}, image has {width}"),
                });
            }
        }
        if let Some(h) = self.height {
            if h != height {
                return Err(RasterError::Metadata {
                    field: "height",
                    reason: format!("sidecar says {h}, image has {height}"),
                });
            }
        }
        let meta = ObservationMeta {
            id,
            acquired_at,
            width,
            height,
            geo,
        };
        meta.validate()?;
        Ok(meta)
    }
}

pub fn read_sidecar(path: &Path) -> Result<ObservationSidecar, RasterError> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Decodes an 8- or 16-bit grayscale raster (PGM P5 or PNG) as raw sample
/// values plus the full-scale value of its bit depth.
pub fn read_gray_raw(path: &Path) -> Result<(usize, usize, Vec<f32>, f32), RasterError> {
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => Ok((
            w,
            h,
            buf.into_raw().into_iter().map(f32::from).collect(),
            255.0,
        )),
        DynamicImage::ImageLuma16(buf) => Ok((
            w,
            h,
            buf.into_raw().into_iter().map(f32::from).collect(),
            65535.0,
        )),
        other => Err(RasterError::Unsupported(format!(
            "{}: expected 8/16-bit grayscale, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Reads an image plus its JSON sidecar into a validated observation with
/// intensities normalized to `[0, 1]`.
pub fn import_observation(
    image_path: &Path,
    metadata_path: &Path,
) -> Result<Observation, RasterError> {
    let sidecar = read_sidecar(metadata_path)?;
    let (w, h, raw, full_scale) = read_gray_raw(image_path)?;
    let meta = sidecar.to_meta(w, h)?;
    let pixels = raw.into_iter().map(|v| v / full_scale).collect();
    Observation::new(meta, pixels)
}

/// Writes raw 16-bit samples as a grayscale PNG.
pub fn write_gray_u16(
    path: &Path,
    width: usize,
    height: usize,
    samples: Vec<u16>,
) -> Result<(), RasterError> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, samples).ok_or_else(|| {
            RasterError::Unsupported("sample buffer does not match dimensions".into())
        })?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// 8-bit grayscale PNG of a window plus `margin` pixels of context on every
/// side. Intensities are stretched between the 1st and 99th percentiles of
/// the pixels that fall inside the image; the area outside it is black.
pub fn render_context_png(
    obs: &Observation,
    window: &WindowRef,
    margin: usize,
) -> Result<Vec<u8>, RasterError> {
    if window.observation_id != obs.id() {
        return Err(RasterError::Observation {
            id: obs.id().to_string(),
            reason: format!("window belongs to {}", window.observation_id),
        });
    }
    let side = window.size + 2 * margin;
    let (r0, c0) = (
        window.row_off as i64 - margin as i64,
        window.col_off as i64 - margin as i64,
    );
    let crop = obs.crop_padded(r0, c0, side, side, f32::NAN);
    let mut inside: Vec<f32> = crop
        .pixels
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .collect();
    let (lo, hi) = if inside.is_empty() {
        (0.0, 1.0)
    } else {
        inside.sort_by(f32::total_cmp);
        let q = |f: f64| inside[((inside.len() - 1) as f64 * f).round() as usize];
        (q(0.01), q(0.99))
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = crop
        .pixels
        .iter()
        .map(|&v| {
            if v.is_nan() {
                0
            } else {
                (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
            }
        })
        .collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(side as u32, side as u32, bytes).expect("buffer matches size");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Writes `<dir>/<id>.png` (16-bit) and `<dir>/<id>.json`.
pub fn write_observation(dir: &Path, obs: &Observation) -> Result<(), RasterError> {
    let id = obs.id();
    if id.contains(['/', '\\']) || id.starts_with('.') {
        return Err(RasterError::Observation {
            id: id.to_string(),
            reason: "id is not usable as a file name".into(),
        });
    }
    fs::create_dir_all(dir)?;
    let samples = obs
        .pixels()
        .iter()
        .map(|&v| (v * 65535.0).round().clamp(0.0, 65535.0) as u16)
        .collect();
    write_gray_u16(
        &dir.join(format!("{id}.png")),
        obs.width(),
        obs.height(),
        samples,
    )?;
    let sidecar = ObservationSidecar::from_meta(obs.meta());
    fs::write(
        dir.join(format!("{id}.json")),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn sidecar() -> ObservationSidecar {
        ObservationSidecar {
            id: Some("F02_036541".into()),
            acquired_at: Some("2014-05-13T10:00:00Z".into()),
            origin_lon: Some(21.4),
            origin_lat: Some(11.8),
            deg_per_px: Some(1e-4),
            ..Default::default()
        }
    }

    fn write_json(path: &Path, s: &ObservationSidecar) {
        fs::write(path, serde_json::to_string(s).unwrap()).unwrap();
    }

    #[test]
    fn context_png_is_400px_and_deterministic() {
        let meta = ObservationMeta {
            id: "A".into(),
            acquired_at: Utc.with_ymd_and_hms(2014, 5, 13, 0, 0, 0).unwrap(),
            width: 450,
            height: 350,
            geo: GeoTransform::new(0.0, 0.0, 1e-4).unwrap(),
        };
        let px = (0..450 * 350).map(|i| (i % 450) as f32 / 450.0).collect();
        let obs = Observation::new(meta, px).unwrap();
        let w = WindowRef {
            observation_id: "A".into(),
            row_off: 0,
            col_off: 150,
            size: 300,
        };
        let png = render_context_png(&obs, &w, 50).unwrap();
        assert_eq!(png, render_context_png(&obs, &w, 50).unwrap());
        let img = image::load_from_memory(&png).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (400, 400));
        // the top margin lies above the image
        assert_eq!(img.get_pixel(200, 10).0[0], 0);
        assert!(img.get_pixel(399, 200).0[0] == 0 && img.get_pixel(349, 200).0[0] == 255);
        let other = WindowRef {
            observation_id: "B".into(),
            ..w
        };
        assert!(render_context_png(&obs, &other, 50).is_err());
    }

    #[test]
    fn sixteen_bit_full_scale_maps_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.png");
        write_gray_u16(&img, 2, 1, vec![0, 65535]).unwrap();
        let meta = dir.path().join("a.json");
        write_json(&meta, &sidecar());
        let obs = import_observation(&img, &meta).unwrap();
        assert_eq!(obs.pixels(), &[0.0, 1.0]);
        assert_eq!(
            obs.meta().acquired_at,
            Utc.with_ymd_and_hms(2014, 5, 13, 10, 0, 0).unwrap()
        );
        // determinism
        assert_eq!(import_observation(&img, &meta).unwrap(), obs);
    }

    #[test]
    fn pgm_p5_is_supported() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.pgm");
        let mut bytes = b"P5\n3 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 51, 255]);
        fs::write(&img, bytes).unwrap();
        let meta = dir.path().join("a.json");
        write_json(&meta, &sidecar());
        let obs = import_observation(&img, &meta).unwrap();
        assert_eq!(obs.width(), 3);
        assert!((obs.pixels()[1] - 0.2).abs() < 1e-7);
        assert_eq!(obs.pixels()[2], 1.0);
    }

    #[test]
    fn missing_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.png");
        write_gray_u16(&img, 1, 1, vec![7]).unwrap();
        let meta = dir.path().join("a.json");
        write_json(
            &meta,
            &ObservationSidecar {
                acquired_at: None,
                ..sidecar()
            },
        );
        match import_observation(&img, &meta) {
            Err(RasterError::Metadata { field, .. }) => assert_eq!(field, "acquired_at"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.png");
        write_gray_u16(&img, 2, 2, vec![0; 4]).unwrap();
        let meta = dir.path().join("a.json");
        write_json(
            &meta,
            &ObservationSidecar {
                width: Some(3),
                ..sidecar()
            },
        );
        assert!(matches!(
            import_observation(&img, &meta),
            Err(RasterError::Metadata { field: "width", .. })
        ));
    }

    #[test]
    fn write_then_import_round_trips_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let meta = sidecar().to_meta(3, 2).unwrap();
        let pixels: Vec<f32> = [0u16, 1, 1000, 30000, 65534, 65535]
            .iter()
            .map(|&q| q as f32 / 65535.0)
            .collect();
        let obs = Observation::new(meta, pixels).unwrap();
        write_observation(dir.path(), &obs).unwrap();
        let back = import_observation(
            &dir.path().join("F02_036541.png"),
            &dir.path().join("F02_036541.json"),
        )
        .unwrap();
        assert_eq!(back, obs);
    }

    #[test]
    fn color_images_are_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("c.png");
        image::RgbImage::new(2, 2).save(&img).unwrap();
        assert!(matches!(
            read_gray_raw(&img),
            Err(RasterError::Unsupported(_))
        ));
    }
}
