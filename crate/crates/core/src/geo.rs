//! Geodesy, path interpolation, and feature normalization.
//!
//! Everything here is a pure function on immutable inputs. Distances use a
//! spherical Earth of radius [`EARTH_RADIUS_KM`]; latitude/longitude
//! interpolation along a leg is componentwise linear.

use crate::error::{Error, Result};

/// Spherical Earth radius in kilometers. Recorded in model metadata so that
/// serialized models reproduce distances exactly.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Reference distance floor for slant range, in meters. Transmission loss is
/// referenced to 1 m, so log-range terms need a positive floor.
pub const REFERENCE_RANGE_M: f64 = 1.0;

/// A point on (or under) the ocean surface. Depth is meters, positive down.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
    pub depth: f64,
}

impl GeoPoint {
    /// Validates coordinate ranges: lat in [-90, 90], lon in [-180, 180],
    /// depth finite and non-negative.
    pub fn new(lat: f64, lon: f64, depth: f64) -> Result<Self> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::OutOfRange {
                what: "latitude",
                value: lat,
                min: -90.0,
                max: 90.0,
            });
        }
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::OutOfRange {
                what: "longitude",
                value: lon,
                min: -180.0,
                max: 180.0,
            });
        }
        if !depth.is_finite() || depth < 0.0 {
            return Err(Error::OutOfRange {
                what: "depth",
                value: depth,
                min: 0.0,
                max: f64::INFINITY,
            });
        }
        Ok(GeoPoint { lat, lon, depth })
    }

    /// Surface point (depth 0).
    pub fn surface(lat: f64, lon: f64) -> Result<Self> {
        GeoPoint::new(lat, lon, 0.0)
    }
}

/// Min–max scaling intervals for the depth-like and frequency features.
/// Computed from the training split once and stored with the model; inference
/// reuses them verbatim.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormRanges {
    pub src_depth: (f64, f64),
    pub rcv_depth: (f64, f64),
    pub bathy_depth: (f64, f64),
    pub freq_hz: (f64, f64),
}

impl NormRanges {
    pub fn validate(&self) -> Result<()> {
        for (what, (lo, hi)) in [
            ("src_depth range", self.src_depth),
            ("rcv_depth range", self.rcv_depth),
            ("bathy_depth range", self.bathy_depth),
            ("freq_hz range", self.freq_hz),
        ] {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::Config(format!("{what}: max must exceed min ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

/// The seven normalized geometry features fed to the feature encoder:
/// source lat/lon/depth, receiver lat/lon/depth, frequency. All in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector(pub [f64; 7]);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64; 7] {
        &self.0
    }
}

/// Great-circle distance in kilometers, ignoring depth.
pub fn haversine_km(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();
    let s = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * s.sqrt().min(1.0).asin()
}

/// Three-dimensional source–receiver distance in meters: haversine horizontal
/// leg combined Euclideanly with the depth difference, clamped at the 1 m
/// reference distance.
pub fn slant_range_m(src: &GeoPoint, rcv: &GeoPoint) -> f64 {
    let horiz_m = haversine_km(src, rcv) * 1000.0;
    let dz = rcv.depth - src.depth;
    (horiz_m * horiz_m + dz * dz).sqrt().max(REFERENCE_RANGE_M)
}

/// Point at fraction `xi` of the way from `a` to `b`, componentwise linear in
/// lat, lon, and depth.
pub fn interpolate_geodesic(a: &GeoPoint, b: &GeoPoint, xi: f64) -> GeoPoint {
    debug_assert!((0.0..=1.0).contains(&xi));
    GeoPoint {
        lat: a.lat + xi * (b.lat - a.lat),
        lon: a.lon + xi * (b.lon - a.lon),
        depth: a.depth + xi * (b.depth - a.depth),
    }
}

fn minmax(what: &'static str, x: f64, (lo, hi): (f64, f64)) -> Result<f64> {
    if x < lo || x > hi {
        return Err(Error::OutOfRange {
            what,
            value: x,
            min: lo,
            max: hi,
        });
    }
    Ok((x - lo) / (hi - lo))
}

/// Normalized latitude: (lat + 90) / 180.
pub fn normalize_lat(lat: f64) -> f64 {
    (lat + 90.0) / 180.0
}

/// Normalized longitude: (lon + 180) / 360.
pub fn normalize_lon(lon: f64) -> f64 {
    (lon + 180.0) / 360.0
}

/// Builds the seven-feature input vector. Latitude and longitude use the fixed
/// affine maps; depths and frequency are min–max scaled by `ranges`.
/// Fails with `OutOfRange` when a value falls outside its stored range, which
/// signals a train/inference distribution mismatch.
pub fn normalize_features(
    src: &GeoPoint,
    rcv: &GeoPoint,
    f_hz: f64,
    ranges: &NormRanges,
) -> Result<FeatureVector> {
    Ok(FeatureVector([
        normalize_lat(src.lat),
        normalize_lon(src.lon),
        minmax("src_depth", src.depth, ranges.src_depth)?,
        normalize_lat(rcv.lat),
        normalize_lon(rcv.lon),
        minmax("rcv_depth", rcv.depth, ranges.rcv_depth)?,
        minmax("freq_hz", f_hz, ranges.freq_hz)?,
    ]))
}

/// Inverse of [`normalize_features`]: recovers (src, rcv, f_hz).
pub fn denormalize_features(v: &FeatureVector, ranges: &NormRanges) -> (GeoPoint, GeoPoint, f64) {
    let inv = |t: f64, (lo, hi): (f64, f64)| lo + t * (hi - lo);
    let x = &v.0;
    (
        GeoPoint {
            lat: x[0] * 180.0 - 90.0,
            lon: x[1] * 360.0 - 180.0,
            depth: inv(x[2], ranges.src_depth),
        },
        GeoPoint {
            lat: x[3] * 180.0 - 90.0,
            lon: x[4] * 360.0 - 180.0,
            depth: inv(x[5], ranges.rcv_depth),
        },
        inv(x[6], ranges.freq_hz),
    )
}

/// Normalizes one bathymetry depth using the stored bathymetry range.
pub fn normalize_bathy_depth(d: f64, ranges: &NormRanges) -> Result<f64> {
    minmax("bathy_depth", d, ranges.bathy_depth)
}
