use crate::raster::GeoPoint;

/// IAU mean radius of Mars, meters.
pub const MARS_RADIUS_M: f64 = 3_389_500.0;

/// Haversine great-circle distance between two points on a sphere.
pub fn great_circle_distance(a: GeoPoint, b: GeoPoint, radius_m: f64) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * radius_m * h.sqrt().min(1.0).asin()
}

/// Meters per degree of latitude on a sphere.
pub fn meters_per_degree(radius_m: f64) -> f64 {
    radius_m * std::f64::consts::PI / 180.0
}
