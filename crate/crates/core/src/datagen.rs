//! Synthetic data generation: analytic or gridded bathymetry, path profile
//! sampling, a deterministic closed-form transmission-loss oracle, nominal
//! one-third-octave bands, and dataset splitting/serialization.
//!
//! The oracle is a documented stand-in for a full ray-tracing solver. It
//! keeps the structure that matters to the surrogate — dominant
//! spreading-plus-absorption, a shallow-bathymetry excess, a
//! frequency-dependent interference ripple, and source/receiver depth
//! factors — while staying cheap and exactly known.

use crate::encoders::{BathyProfile, PROFILE_LEN};
use crate::error::{Error, Result};
use crate::geo::{self, GeoPoint, NormRanges};
use crate::model::TrainingSample;
use crate::physics;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt::Write as _;
use std::path::Path;

/// Nominal one-third-octave band centers per decade (renard numbers).
const THIRD_OCTAVE_DECADE: [f64; 10] =
    [1.0, 1.25, 1.6, 2.0, 2.5, 3.15, 4.0, 5.0, 6.3, 8.0];

/// Standard nominal third-octave centers within [f_lo, f_hi], inclusive.
pub fn third_octave_bands(f_lo: f64, f_hi: f64) -> Vec<f64> {
    assert!(f_lo <= f_hi && f_lo > 0.0);
    let mut out = Vec::new();
    let mut decade = 10f64.powi((f_lo.log10() - 1.0).floor() as i32);
    while decade <= f_hi {
        for &n in &THIRD_OCTAVE_DECADE {
            let f = n * decade;
            if f >= f_lo - 1e-9 && f <= f_hi + 1e-9 {
                out.push(f);
            }
        }
        decade *= 10.0;
    }
    out
}

/// Parameters of the analytic synthetic seabed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticBathy {
    pub a: f64,
    pub b: f64,
    pub base: f64,
    pub amplitude: f64,
}

impl Default for AnalyticBathy {
    fn default() -> Self {
        AnalyticBathy { a: 40.0, b: 40.0, base: 50.0, amplitude: 300.0 }
    }
}

/// A regular lat/lon grid of seabed depths with bilinear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct GridBathy {
    pub lat0: f64,
    pub lon0: f64,
    pub dlat: f64,
    pub dlon: f64,
    pub nrows: usize,
    pub ncols: usize,
    /// row-major [nrows x ncols] depths, meters positive down
    pub depths: Vec<f64>,
}

impl GridBathy {
    pub fn depth_at(&self, lat: f64, lon: f64) -> Result<f64> {
        let mut fi = (lat - self.lat0) / self.dlat;
        let mut fj = (lon - self.lon0) / self.dlon;
        // tolerate boundary roundoff of a few ulps
        let tol = 1e-9;
        if fi < -tol || fj < -tol || fi > (self.nrows - 1) as f64 + tol || fj > (self.ncols - 1) as f64 + tol
        {
            return Err(Error::OutOfGrid { lat, lon });
        }
        fi = fi.clamp(0.0, (self.nrows - 1) as f64);
        fj = fj.clamp(0.0, (self.ncols - 1) as f64);
        // clamp the base cell so points on the far edge interpolate within
        // the last cell
        let i0 = (fi.floor() as usize).min(self.nrows.saturating_sub(2));
        let j0 = (fj.floor() as usize).min(self.ncols.saturating_sub(2));
        let (ti, tj) = (fi - i0 as f64, fj - j0 as f64);
        let at = |i: usize, j: usize| self.depths[i * self.ncols + j];
        let i1 = (i0 + 1).min(self.nrows - 1);
        let j1 = (j0 + 1).min(self.ncols - 1);
        Ok(at(i0, j0) * (1.0 - ti) * (1.0 - tj)
            + at(i1, j0) * ti * (1.0 - tj)
            + at(i0, j1) * (1.0 - ti) * tj
            + at(i1, j1) * ti * tj)
    }
}

/// Where seabed depths come from.
#[derive(Debug, Clone, PartialEq)]
pub enum BathySource {
    Analytic(AnalyticBathy),
    Grid(GridBathy),
}

impl Default for BathySource {
    fn default() -> Self {
        BathySource::Analytic(AnalyticBathy::default())
    }
}

/// Seabed depth at a point. The analytic field is
/// base + amplitude*(0.5 + 0.5 sin(a*lat_rad) cos(b*lon_rad)), clamped to
/// [10, 400] m; grids interpolate bilinearly.
pub fn synth_depth(lat: f64, lon: f64, src: &BathySource) -> Result<f64> {
    match src {
        BathySource::Analytic(p) => {
            let s = (p.a * lat.to_radians()).sin() * (p.b * lon.to_radians()).cos();
            Ok((p.base + p.amplitude * (0.5 + 0.5 * s)).clamp(10.0, 400.0))
        }
        BathySource::Grid(g) => g.depth_at(lat, lon),
    }
}

/// Samples the 128-point depth profile at path midpoints
/// xi_k = (k + 1/2) / 128.
pub fn sample_profile(src: &GeoPoint, rcv: &GeoPoint, bathy: &BathySource) -> Result<BathyProfile> {
    let mut depths = Vec::with_capacity(PROFILE_LEN);
    for k in 0..PROFILE_LEN {
        let xi = (k as f64 + 0.5) / PROFILE_LEN as f64;
        let p = geo::interpolate_geodesic(src, rcv, xi);
        depths.push(synth_depth(p.lat, p.lon, bathy)?);
    }
    BathyProfile::new(depths)
}

/// Constants of the synthetic transmission-loss oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    /// shallow-excess coefficient, dB/km
    pub c_b: f64,
    /// reference depth for the shallow excess, m
    pub d_ref: f64,
    /// interference ripple amplitude, dB
    pub c_i: f64,
    /// interference length scale at 1 kHz, m
    pub lambda0: f64,
    /// depth-term amplitude, dB
    pub c_z: f64,
    /// observation noise standard deviation, dB
    pub sigma_data: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            c_b: 2.0,
            d_ref: 100.0,
            c_i: 3.0,
            lambda0: 500.0,
            c_z: 5.0,
            sigma_data: 1.0,
            seed: 0,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic synthetic ground-truth TL in (0, 200].
///
/// TL = 20 log10(R) + thorp(f) R_km
///    + c_b R_km mean_k max(0, 1 - d_k/d_ref)
///    + c_i sin(2 pi R / lambda(f))        with lambda(f) = lambda0 sqrt(1000/f)
///    + c_z sin(pi z_rcv / 110) sin(pi z_src / 30)
///    (+ Gaussian noise when `noisy`), clipped to (0, 200].
pub fn oracle_tl(
    src: &GeoPoint,
    rcv: &GeoPoint,
    f_hz: f64,
    profile: &BathyProfile,
    cfg: &OracleConfig,
    noisy: bool,
    row_index: u64,
) -> f64 {
    let r_m = geo::slant_range_m(src, rcv);
    let r_km = r_m / 1000.0;
    let mut tl = 20.0 * r_m.log10() + physics::thorp_alpha(f_hz / 1000.0) * r_km;
    let shallow: f64 = profile
        .depths()
        .iter()
        .map(|&d| (1.0 - d / cfg.d_ref).max(0.0))
        .sum::<f64>()
        / PROFILE_LEN as f64;
    tl += cfg.c_b * r_km * shallow;
    let lambda = cfg.lambda0 * (1000.0 / f_hz).sqrt();
    tl += cfg.c_i * (2.0 * std::f64::consts::PI * r_m / lambda).sin();
    tl += cfg.c_z * (std::f64::consts::PI * rcv.depth / 110.0).sin()
        * (std::f64::consts::PI * src.depth / 30.0).sin();
    if noisy && cfg.sigma_data > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ row_index));
        let n = Normal::new(0.0, cfg.sigma_data).unwrap();
        tl += n.sample(&mut rng);
    }
    tl.clamp(1e-3, 200.0)
}

/// Shape of the generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_sources: usize,
    pub receivers_per_source: usize,
    pub max_radius_km: f64,
    pub max_rcv_depth_m: f64,
    pub src_depth_range: (f64, f64),
    pub f_lo_hz: f64,
    pub f_hi_hz: f64,
    /// train/val/test fractions, must sum to 1
    pub split: (f64, f64, f64),
    pub seed: u64,
    /// shipping-lane endpoints the sources are placed along
    pub lane_start: (f64, f64),
    pub lane_end: (f64, f64),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_sources: 20,
            receivers_per_source: 175,
            max_radius_km: 100.0,
            max_rcv_depth_m: 110.0,
            src_depth_range: (5.0, 15.0),
            f_lo_hz: 12.5,
            f_hi_hz: 8000.0,
            split: (0.75, 0.15, 0.10),
            seed: 0,
            lane_start: (48.6, -124.6),
            lane_end: (49.3, -123.2),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.split;
        if (a + b + c - 1.0).abs() > 1e-9 || a <= 0.0 || b < 0.0 || c < 0.0 {
            return Err(Error::Config(format!("split fractions must sum to 1, got {:?}", self.split)));
        }
        if self.max_radius_km <= 0.0 || self.n_sources == 0 || self.receivers_per_source == 0 {
            return Err(Error::Config("dataset spec needs positive counts and radius".into()));
        }
        if self.f_lo_hz > self.f_hi_hz || self.f_lo_hz <= 0.0 {
            return Err(Error::Config("bad frequency band edges".into()));
        }
        Ok(())
    }
}

/// Split dataset plus the normalization contract and provenance manifest.
pub struct GeneratedDataset {
    pub train: Vec<TrainingSample>,
    pub val: Vec<TrainingSample>,
    pub test: Vec<TrainingSample>,
    pub ranges: NormRanges,
    pub bands: Vec<f64>,
    pub manifest: String,
}

/// Pads a (min, max) interval by half a percent of its width on each side so
/// held-out samples drawn from the same distribution normalize cleanly.
/// Degenerate intervals widen by a magnitude-scaled floor instead.
fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let w = (hi - lo).max(1e-6 * lo.abs().max(hi.abs()).max(1.0));
    (lo - 0.005 * w, hi + 0.005 * w)
}

/// Normalization ranges from a training split: observed min/max of source
/// depth, receiver depth, profile depths, and frequency, slightly padded.
/// Deterministic in the split contents, so regenerating from a written
/// train file reproduces the ranges exactly.
pub fn ranges_from_training_split(train: &[TrainingSample]) -> Result<NormRanges> {
    if train.is_empty() {
        return Err(Error::Config("cannot derive ranges from an empty split".into()));
    }
    let mut src_d = (f64::INFINITY, f64::NEG_INFINITY);
    let mut rcv_d = (f64::INFINITY, f64::NEG_INFINITY);
    let mut bat_d = (f64::INFINITY, f64::NEG_INFINITY);
    let mut freq = (f64::INFINITY, f64::NEG_INFINITY);
    for s in train {
        src_d = (src_d.0.min(s.src.depth), src_d.1.max(s.src.depth));
        rcv_d = (rcv_d.0.min(s.rcv.depth), rcv_d.1.max(s.rcv.depth));
        freq = (freq.0.min(s.f_hz), freq.1.max(s.f_hz));
        for &d in s.profile.depths() {
            bat_d = (bat_d.0.min(d), bat_d.1.max(d));
        }
    }
    let ranges = NormRanges {
        src_depth: padded(src_d.0, src_d.1),
        rcv_depth: padded(rcv_d.0, rcv_d.1),
        bathy_depth: padded(bat_d.0, bat_d.1),
        freq_hz: padded(freq.0, freq.1),
    };
    ranges.validate()?;
    Ok(ranges)
}

/// Generates the dataset: sources on a seeded lane, receivers uniform in a
/// horizontal disk with uniform depths, all band frequencies per pair,
/// oracle targets, seeded 75/15/10 permutation split, normalization ranges
/// from the training split only.
pub fn generate_dataset(
    spec: &DatasetSpec,
    bathy: &BathySource,
    oracle: &OracleConfig,
) -> Result<GeneratedDataset> {
    spec.validate()?;
    let bands = third_octave_bands(spec.f_lo_hz, spec.f_hi_hz);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // sources along the lane with a small seeded cross-track jitter
    let mut sources = Vec::with_capacity(spec.n_sources);
    for i in 0..spec.n_sources {
        let t = if spec.n_sources == 1 { 0.5 } else { i as f64 / (spec.n_sources - 1) as f64 };
        let lat = spec.lane_start.0 + t * (spec.lane_end.0 - spec.lane_start.0)
            + rng.random_range(-0.02..0.02);
        let lon = spec.lane_start.1 + t * (spec.lane_end.1 - spec.lane_start.1)
            + rng.random_range(-0.02..0.02);
        let depth = rng.random_range(spec.src_depth_range.0..spec.src_depth_range.1);
        sources.push(GeoPoint::new(lat, lon, depth)?);
    }

    let mut rows: Vec<TrainingSample> = Vec::with_capacity(
        spec.n_sources * spec.receivers_per_source * bands.len(),
    );
    let mut row_index = 0u64;
    for src in &sources {
        for _ in 0..spec.receivers_per_source {
            // uniform in the disk: r = R sqrt(u)
            let u: f64 = rng.random();
            let r_km = spec.max_radius_km * u.sqrt();
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let dlat = r_km * theta.cos() / 111.195;
            let dlon = r_km * theta.sin() / (111.195 * src.lat.to_radians().cos());
            let depth = rng.random_range(0.0..spec.max_rcv_depth_m);
            let rcv = GeoPoint::new(src.lat + dlat, src.lon + dlon, depth)?;
            let profile = sample_profile(src, &rcv, bathy)?;
            for &f_hz in &bands {
                let tl = oracle_tl(src, &rcv, f_hz, &profile, oracle, true, row_index);
                rows.push(TrainingSample {
                    src: *src,
                    rcv,
                    f_hz,
                    profile: profile.clone(),
                    tl_db: tl,
                });
                row_index += 1;
            }
        }
    }

    // seeded permutation split
    let n = rows.len();
    let n_train = ((spec.split.0 * n as f64).round() as usize).min(n);
    let n_val = ((spec.split.1 * n as f64).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        let mut split_rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ 0x51ee7));
        order.shuffle(&mut split_rng);
    }
    let mut train = Vec::with_capacity(n_train);
    let mut val = Vec::with_capacity(n_val);
    let mut test = Vec::with_capacity(n - n_train - n_val);
    for (k, &i) in order.iter().enumerate() {
        let row = rows[i].clone();
        if k < n_train {
            train.push(row);
        } else if k < n_train + n_val {
            val.push(row);
        } else {
            test.push(row);
        }
    }

    // normalization ranges from the training split only, padded slightly
    let ranges = ranges_from_training_split(&train)?;

    let mut manifest = String::new();
    let _ = writeln!(manifest, "seatwin-dataset-manifest v1");
    let _ = writeln!(manifest, "seed {}", spec.seed);
    let _ = writeln!(manifest, "oracle_seed {}", oracle.seed);
    let _ = writeln!(
        manifest,
        "spec n_sources {} receivers_per_source {} max_radius_km {} max_rcv_depth_m {} src_depth {}..{} f {}..{} split {} {} {}",
        spec.n_sources,
        spec.receivers_per_source,
        spec.max_radius_km,
        spec.max_rcv_depth_m,
        spec.src_depth_range.0,
        spec.src_depth_range.1,
        spec.f_lo_hz,
        spec.f_hi_hz,
        spec.split.0,
        spec.split.1,
        spec.split.2
    );
    let _ = writeln!(
        manifest,
        "oracle c_b {} d_ref {} c_i {} lambda0 {} c_z {} sigma_data {}",
        oracle.c_b, oracle.d_ref, oracle.c_i, oracle.lambda0, oracle.c_z, oracle.sigma_data
    );
    let _ = writeln!(manifest, "bands {}", bands.len());
    let _ = writeln!(
        manifest,
        "note nominal third-octave centers from {} to {} Hz number {}; the conventional band count quoted for this range is 30",
        spec.f_lo_hz,
        spec.f_hi_hz,
        bands.len()
    );
    let _ = writeln!(manifest, "rows total {} train {} val {} test {}", n, train.len(), val.len(), test.len());

    Ok(GeneratedDataset { train, val, test, ranges, bands, manifest })
}

/// FNV-1a 64-bit hash, used for manifest file fingerprints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Writes one split to delimited text with the standard header.
pub fn write_dataset_file(samples: &[TrainingSample], path: &Path) -> Result<()> {
    let mut s = String::new();
    s.push_str("src_lat,src_lon,src_depth,rcv_lat,rcv_lon,rcv_depth,freq_hz");
    for k in 0..PROFILE_LEN {
        let _ = write!(s, ",bathy_{k:03}");
    }
    s.push_str(",tl_db\n");
    for r in samples {
        let _ = write!(
            s,
            "{},{},{},{},{},{},{}",
            r.src.lat, r.src.lon, r.src.depth, r.rcv.lat, r.rcv.lon, r.rcv.depth, r.f_hz
        );
        for d in r.profile.depths() {
            let _ = write!(s, ",{d}");
        }
        let _ = writeln!(s, ",{}", r.tl_db);
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Reads a dataset file written by [`write_dataset_file`].
pub fn read_dataset_file(path: &Path) -> Result<Vec<TrainingSample>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::FormatError {
        path: path.display().to_string(),
        detail: "empty file".into(),
    })?;
    if !header.starts_with("src_lat,src_lon,src_depth") {
        return Err(Error::FormatError {
            path: path.display().to_string(),
            detail: "bad header".into(),
        });
    }
    let want_cols = 8 + PROFILE_LEN;
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut vals = Vec::with_capacity(want_cols);
        for tok in line.split(',') {
            vals.push(tok.parse::<f64>().map_err(|_| Error::FormatError {
                path: path.display().to_string(),
                detail: format!("row {}: bad float {tok:?}", ln + 2),
            })?);
        }
        if vals.len() != want_cols {
            return Err(Error::FormatError {
                path: path.display().to_string(),
                detail: format!("row {}: expected {} columns, got {}", ln + 2, want_cols, vals.len()),
            });
        }
        out.push(TrainingSample {
            src: GeoPoint::new(vals[0], vals[1], vals[2])?,
            rcv: GeoPoint::new(vals[3], vals[4], vals[5])?,
            f_hz: vals[6],
            profile: BathyProfile::new(vals[7..7 + PROFILE_LEN].to_vec())?,
            tl_db: vals[7 + PROFILE_LEN],
        });
    }
    Ok(out)
}

/// Reads a plain-text grid bathymetry file: a `grid lat0 lon0 dlat dlon
/// nrows ncols` header line followed by row-major depths.
pub fn read_grid_file(path: &Path) -> Result<GridBathy> {
    let text = std::fs::read_to_string(path)?;
    let mut toks = text.split_whitespace();
    let magic = toks.next();
    if magic != Some("grid") {
        return Err(Error::FormatError {
            path: path.display().to_string(),
            detail: "expected `grid` header".into(),
        });
    }
    let mut next_f = |what: &str| -> Result<f64> {
        toks.next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::FormatError {
                path: path.display().to_string(),
                detail: format!("bad {what}"),
            })
    };
    let lat0 = next_f("lat0")?;
    let lon0 = next_f("lon0")?;
    let dlat = next_f("dlat")?;
    let dlon = next_f("dlon")?;
    let nrows = next_f("nrows")? as usize;
    let ncols = next_f("ncols")? as usize;
    let mut depths = Vec::with_capacity(nrows * ncols);
    for _ in 0..nrows * ncols {
        depths.push(next_f("depth")?);
    }
    if dlat <= 0.0 || dlon <= 0.0 || nrows == 0 || ncols == 0 {
        return Err(Error::FormatError {
            path: path.display().to_string(),
            detail: "grid axes must be positive and non-empty".into(),
        });
    }
    Ok(GridBathy { lat0, lon0, dlat, dlon, nrows, ncols, depths })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn third_octave_full_range_has_29_bands() {
        let bands = third_octave_bands(12.5, 8000.0);
        assert_eq!(bands.len(), 29);
        assert_eq!(bands[0], 12.5);
        assert_eq!(*bands.last().unwrap(), 8000.0);
        // strictly increasing
        for w in bands.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn third_octave_degenerate_and_pair() {
        assert_eq!(third_octave_bands(1000.0, 1000.0), vec![1000.0]);
        assert_eq!(third_octave_bands(20.0, 25.0), vec![20.0, 25.0]);
    }

    #[test]
    fn synth_depth_formula_midpoint() {
        // where sin*cos vanishes the depth is base + amplitude/2 = 200 m
        let b = BathySource::Analytic(AnalyticBathy::default());
        let d = synth_depth(0.0, 90.0 / 40.0, &b).unwrap(); // cos(40 * lon_rad) = cos(pi/2) = 0? no: use lat=0 so sin = 0
        let d0 = synth_depth(0.0, -123.0, &b).unwrap();
        assert!((d0 - 200.0).abs() < 1e-9, "sin(0) = 0 -> midpoint, got {d0}");
        let _ = d;
    }

    #[test]
    fn synth_depth_hand_value() {
        let p = AnalyticBathy::default();
        let b = BathySource::Analytic(p);
        let (lat, lon): (f64, f64) = (49.0, -123.0);
        let want = (p.base
            + p.amplitude
                * (0.5
                    + 0.5
                        * (p.a * lat.to_radians()).sin()
                        * (p.b * lon.to_radians()).cos()))
        .clamp(10.0, 400.0);
        assert_eq!(synth_depth(lat, lon, &b).unwrap(), want);
    }

    #[test]
    fn grid_constant_field_interpolates_constant() {
        let g = BathySource::Grid(GridBathy {
            lat0: 48.0,
            lon0: -125.0,
            dlat: 0.1,
            dlon: 0.1,
            nrows: 20,
            ncols: 20,
            depths: vec![75.0; 400],
        });
        for (lat, lon) in [(48.0, -125.0), (48.95, -123.55), (49.9, -123.1)] {
            assert!((synth_depth(lat, lon, &g).unwrap() - 75.0).abs() < 1e-12);
        }
        assert!(matches!(
            synth_depth(47.0, -125.0, &g),
            Err(Error::OutOfGrid { .. })
        ));
    }

    #[test]
    fn profile_constant_depth_and_src_eq_rcv() {
        let g = BathySource::Grid(GridBathy {
            lat0: 48.0,
            lon0: -125.0,
            dlat: 0.2,
            dlon: 0.2,
            nrows: 12,
            ncols: 12,
            depths: vec![120.0; 144],
        });
        let a = GeoPoint::new(48.5, -124.5, 10.0).unwrap();
        let b = GeoPoint::new(48.9, -124.0, 40.0).unwrap();
        let p = sample_profile(&a, &b, &g).unwrap();
        assert!(p.depths().iter().all(|&d| (d - 120.0).abs() < 1e-12));
        let p2 = sample_profile(&a, &a, &g).unwrap();
        assert!(p2.depths().windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn profile_linear_field_is_linear_in_index() {
        // depth linear in latitude -> profile linear in sample index
        let g = BathySource::Grid(GridBathy {
            lat0: 48.0,
            lon0: -125.0,
            dlat: 0.1,
            dlon: 1.0,
            nrows: 30,
            ncols: 3,
            depths: (0..90).map(|i| 50.0 + (i / 3) as f64 * 2.0).collect(),
        });
        let a = GeoPoint::new(48.2, -124.5, 0.0).unwrap();
        let b = GeoPoint::new(49.8, -124.5, 0.0).unwrap();
        let p = sample_profile(&a, &b, &g).unwrap();
        let d = p.depths();
        let step = d[1] - d[0];
        for w in d.windows(2) {
            assert!((w[1] - w[0] - step).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_reduces_to_spreading_absorption_in_benign_case() {
        // deep flat bathymetry, zero depths, phase chosen so the ripple is 0
        let cfg = OracleConfig { sigma_data: 0.0, ..Default::default() };
        let profile = BathyProfile::new(vec![300.0; PROFILE_LEN]).unwrap();
        let src = GeoPoint::new(0.0, 0.0, 0.0).unwrap();
        // 1 degree of latitude is 111.195 km; pick a receiver so R = lambda * k
        // not needed: with f = 1000 Hz, lambda = 500 m; R = 111195 m = 222.39 * 500
        // -> not integral. Instead verify against the full formula.
        let rcv = GeoPoint::new(1.0, 0.0, 0.0).unwrap();
        let got = oracle_tl(&src, &rcv, 1000.0, &profile, &cfg, false, 0);
        let r = geo::slant_range_m(&src, &rcv);
        let want = 20.0 * r.log10()
            + physics::thorp_alpha(1.0) * r / 1000.0
            + cfg.c_i * (2.0 * std::f64::consts::PI * r / 500.0).sin();
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn oracle_hand_value() {
        // R = 1 km, f = 1 kHz, profile 50 m, depths 0, noise off:
        // 60 + 0.0690 + 2*1*0.5 + 3 sin(4 pi) + 0 = 61.069
        let cfg = OracleConfig { sigma_data: 0.0, ..Default::default() };
        let profile = BathyProfile::new(vec![50.0; PROFILE_LEN]).unwrap();
        let src = GeoPoint::new(0.0, 0.0, 0.0).unwrap();
        let dlat = 1.0 / 111.195; // 1 km north
        let rcv = GeoPoint::new(dlat, 0.0, 0.0).unwrap();
        let got = oracle_tl(&src, &rcv, 1000.0, &profile, &cfg, false, 0);
        // haversine introduces sub-meter deviation from exactly 1 km; compare
        // against the formula at the actual range
        let r = geo::slant_range_m(&src, &rcv);
        let want = 20.0 * r.log10()
            + physics::thorp_alpha(1.0) * r / 1000.0
            + 2.0 * (r / 1000.0) * 0.5
            + 3.0 * (2.0 * std::f64::consts::PI * r / 500.0).sin();
        assert!((got - want).abs() < 1e-9);
        assert!((got - 61.069).abs() < 0.05, "got {got}");
    }

    #[test]
    fn oracle_is_clipped_and_deterministic() {
        let cfg = OracleConfig::default();
        let profile = BathyProfile::new(vec![20.0; PROFILE_LEN]).unwrap();
        let src = GeoPoint::new(48.6, -124.6, 10.0).unwrap();
        let rcv = GeoPoint::new(49.3, -123.2, 60.0).unwrap(); // ~130 km
        let a = oracle_tl(&src, &rcv, 8000.0, &profile, &cfg, true, 7);
        let b = oracle_tl(&src, &rcv, 8000.0, &profile, &cfg, true, 7);
        assert_eq!(a, b);
        assert!(a <= 200.0 && a > 0.0);
        // deep water, high absorption at 8 kHz over 130 km: clipped at 200
        assert_eq!(a, 200.0);
    }

    #[test]
    fn oracle_residual_envelope() {
        // |oracle - (spreading + absorption)| <= c_b R_km + c_i + c_z
        let cfg = OracleConfig { sigma_data: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let bathy = BathySource::default();
        for _ in 0..100 {
            let src = GeoPoint::new(
                rng.random_range(48.5..49.4),
                rng.random_range(-124.5..-123.3),
                rng.random_range(5.0..15.0),
            )
            .unwrap();
            let rcv = GeoPoint::new(
                src.lat + rng.random_range(-0.5..0.5),
                src.lon + rng.random_range(-0.5..0.5),
                rng.random_range(0.0..110.0),
            )
            .unwrap();
            let f = rng.random_range(12.5..8000.0);
            let profile = sample_profile(&src, &rcv, &bathy).unwrap();
            let tl = oracle_tl(&src, &rcv, f, &profile, &cfg, false, 0);
            if tl >= 200.0 {
                continue; // clip active, envelope not meaningful
            }
            let r = geo::slant_range_m(&src, &rcv);
            let base = 20.0 * r.log10() + physics::thorp_alpha(f / 1000.0) * r / 1000.0;
            let envelope = cfg.c_b * r / 1000.0 + cfg.c_i + cfg.c_z;
            assert!((tl - base).abs() <= envelope + 1e-9);
        }
    }

    #[test]
    fn generate_counts_splits_and_bounds() {
        let spec = DatasetSpec {
            n_sources: 3,
            receivers_per_source: 10,
            max_radius_km: 40.0,
            seed: 60,
            ..Default::default()
        };
        let ds = generate_dataset(&spec, &BathySource::default(), &OracleConfig::default()).unwrap();
        let n = 3 * 10 * 29;
        assert_eq!(ds.train.len() + ds.val.len() + ds.test.len(), n);
        let frac = ds.train.len() as f64 / n as f64;
        assert!((frac - 0.75).abs() <= 1.0 / n as f64 + 1e-12);
        for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            assert!(s.rcv.depth <= 110.0);
            assert!(geo::haversine_km(&s.src, &s.rcv) <= 40.0 + 1e-6);
            assert!(s.tl_db > 0.0 && s.tl_db <= 200.0);
        }
        // normalization ranges cover val/test values
        for s in ds.val.iter().chain(&ds.test) {
            assert!(s.rcv.depth >= ds.ranges.rcv_depth.0 && s.rcv.depth <= ds.ranges.rcv_depth.1);
            assert!(s.f_hz >= ds.ranges.freq_hz.0 && s.f_hz <= ds.ranges.freq_hz.1);
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let spec = DatasetSpec {
            n_sources: 2,
            receivers_per_source: 5,
            seed: 61,
            ..Default::default()
        };
        let a = generate_dataset(&spec, &BathySource::default(), &OracleConfig::default()).unwrap();
        let b = generate_dataset(&spec, &BathySource::default(), &OracleConfig::default()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.manifest, b.manifest);
    }

    #[test]
    fn degenerate_single_row_split() {
        let spec = DatasetSpec {
            n_sources: 1,
            receivers_per_source: 1,
            f_lo_hz: 1000.0,
            f_hi_hz: 1000.0,
            split: (1.0, 0.0, 0.0),
            seed: 62,
            ..Default::default()
        };
        let ds = generate_dataset(&spec, &BathySource::default(), &OracleConfig::default()).unwrap();
        assert_eq!(ds.train.len(), 1);
        assert_eq!(ds.val.len(), 0);
        assert_eq!(ds.test.len(), 0);
    }

    #[test]
    fn dataset_file_roundtrip() {
        let spec = DatasetSpec {
            n_sources: 1,
            receivers_per_source: 4,
            f_lo_hz: 100.0,
            f_hi_hz: 400.0,
            seed: 63,
            ..Default::default()
        };
        let ds = generate_dataset(&spec, &BathySource::default(), &OracleConfig::default()).unwrap();
        let dir = std::env::temp_dir().join("seatwin_datagen_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("train.csv");
        write_dataset_file(&ds.train, &path).unwrap();
        let back = read_dataset_file(&path).unwrap();
        assert_eq!(ds.train, back);
        // write-read-write is byte stable
        let b1 = std::fs::read(&path).unwrap();
        write_dataset_file(&back, &path).unwrap();
        let b2 = std::fs::read(&path).unwrap();
        assert_eq!(b1, b2);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn grid_file_parses() {
        let dir = std::env::temp_dir().join("seatwin_grid_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("g.txt");
        std::fs::write(&path, "grid 48.0 -125.0 0.5 0.5 2 3\n10 20 30\n40 50 60\n").unwrap();
        let g = read_grid_file(&path).unwrap();
        assert_eq!(g.nrows, 2);
        assert_eq!(g.ncols, 3);
        assert_eq!(g.depth_at(48.0, -125.0).unwrap(), 10.0);
        assert_eq!(g.depth_at(48.5, -124.0).unwrap(), 60.0);
        std::fs::remove_dir_all(&dir).ok();
    }
}
