//! Per-leg vessel speed optimization against sound exposure level at a fixed
//! receptor.
//!
//! Each leg between consecutive waypoints gets a constant speed chosen by
//! grid search over [V0, Vmax]; speeds at or above the nominal V0 keep every
//! leg inside its baseline time budget automatically. The discrete SEL
//! objective samples the geodesic at step midpoints and energy-sums received
//! levels over steps of `dt` seconds.

use crate::datagen::{sample_profile, BathySource};
use crate::error::Result;
use crate::geo::{self, GeoPoint};
use crate::model::{Predictor, SurrogateModel};
use crate::physics::jomopans_echo_sl;
use std::fmt::Write as _;
use std::path::Path;

/// Meters per second per knot.
pub const KNOT_MS: f64 = 0.514;

/// Number of candidate speeds evaluated per leg.
pub const SPEED_GRID_POINTS: usize = 200;

/// A fixed route with speed bounds and acoustic parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    /// waypoint latitudes/longitudes (depth field unused)
    pub waypoints: Vec<GeoPoint>,
    pub v0_knots: f64,
    pub vmax_knots: f64,
    /// acoustic source depth of the ship, m
    pub source_depth_m: f64,
    pub vessel_length_m: f64,
    pub f_hz: f64,
    /// SEL integration step, s
    pub dt_s: f64,
}

impl Route {
    pub fn validate(&self) -> Result<()> {
        if self.waypoints.len() < 2 {
            return Err(crate::error::Error::Config("route needs at least two waypoints".into()));
        }
        if !(self.v0_knots > 0.0 && self.vmax_knots >= self.v0_knots) {
            return Err(crate::error::Error::Config(
                "speeds must satisfy 0 < v0 <= vmax".into(),
            ));
        }
        if self.dt_s <= 0.0 {
            return Err(crate::error::Error::Config("dt must be positive".into()));
        }
        Ok(())
    }
}

/// The protected location where exposure is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Receptor(pub GeoPoint);

/// One sample of the received-level time series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlSample {
    /// seconds from voyage start (midpoint of the step)
    pub t_s: f64,
    pub lat: f64,
    pub lon: f64,
    pub speed_knots: f64,
    pub sl_db: f64,
    pub tl_db: f64,
    pub rl_db: f64,
}

/// One optimized leg.
#[derive(Debug, Clone, PartialEq)]
pub struct LegPlan {
    pub index: usize,
    pub length_km: f64,
    /// baseline time budget at V0, s
    pub time_budget_s: f64,
    /// chosen speed, knots
    pub speed_knots: f64,
    /// actual transit time at the chosen speed, s
    pub duration_s: f64,
    pub sel_db: f64,
    pub rl_samples: Vec<RlSample>,
}

/// The optimized voyage.
#[derive(Debug, Clone, PartialEq)]
pub struct VoyagePlan {
    pub legs: Vec<LegPlan>,
    /// concatenated RL series with cumulative timestamps
    pub rl_series: Vec<RlSample>,
    /// energy sum over legs, dB
    pub total_sel_db: f64,
    pub total_time_s: f64,
}

/// Transmission loss provider from a ship position to a receptor. The
/// surrogate implements this; tests may stub it.
pub trait TlPredictor {
    fn tl(&self, src: &GeoPoint, rcv: &GeoPoint, f_hz: f64) -> Result<f64>;

    /// Batched form; implementations with batched fast paths override this.
    fn tl_batch(&self, srcs: &[GeoPoint], rcv: &GeoPoint, f_hz: f64) -> Result<Vec<f64>> {
        srcs.iter().map(|s| self.tl(s, rcv, f_hz)).collect()
    }
}

/// Surrogate-backed TL with profile sampling against a bathymetry source.
pub struct SurrogateTl<'a> {
    predictor: Predictor<'a>,
    bathy: &'a BathySource,
    tl_max_clamp: bool,
}

impl<'a> SurrogateTl<'a> {
    pub fn new(model: &'a SurrogateModel, bathy: &'a BathySource) -> Result<Self> {
        Ok(SurrogateTl { predictor: Predictor::new(model)?, bathy, tl_max_clamp: true })
    }
}

impl TlPredictor for SurrogateTl<'_> {
    fn tl(&self, src: &GeoPoint, rcv: &GeoPoint, f_hz: f64) -> Result<f64> {
        let profile = sample_profile(src, rcv, self.bathy)?;
        Ok(self
            .predictor
            .predict(src, rcv, f_hz, &profile, self.tl_max_clamp)?
            .mean)
    }

    fn tl_batch(&self, srcs: &[GeoPoint], rcv: &GeoPoint, f_hz: f64) -> Result<Vec<f64>> {
        let queries: Vec<crate::model::QueryPoint> = srcs
            .iter()
            .map(|s| {
                Ok(crate::model::QueryPoint {
                    src: *s,
                    rcv: *rcv,
                    f_hz,
                    profile: sample_profile(s, rcv, self.bathy)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(self
            .predictor
            .predict_batch(&queries, self.tl_max_clamp)?
            .iter()
            .map(|p| p.mean)
            .collect())
    }
}

/// Baseline per-leg time budget at the nominal speed: L / (V0 kappa).
pub fn leg_time_budget(length_km: f64, v0_knots: f64) -> f64 {
    length_km * 1000.0 / (v0_knots * KNOT_MS)
}

/// Midpoint ship positions and their TL values for an `n`-step split of one
/// leg. The point set depends only on `n`, so speed candidates sharing a
/// discretization share these values.
fn leg_tl_samples(
    tl: &dyn TlPredictor,
    w0: &GeoPoint,
    w1: &GeoPoint,
    n: usize,
    receptor: &Receptor,
    route: &Route,
) -> Result<(Vec<GeoPoint>, Vec<f64>)> {
    let mut ships = Vec::with_capacity(n);
    for j in 0..n {
        let xi = (j as f64 + 0.5) / n as f64;
        let mut ship = geo::interpolate_geodesic(w0, w1, xi);
        ship.depth = route.source_depth_m;
        ships.push(ship);
    }
    let tls = tl.tl_batch(&ships, &receptor.0, route.f_hz)?;
    Ok((ships, tls))
}

fn assemble_leg_sel(
    ships: &[GeoPoint],
    tls: &[f64],
    speed_knots: f64,
    route: &Route,
) -> (f64, Vec<RlSample>) {
    let sl = jomopans_echo_sl(route.f_hz, speed_knots, route.vessel_length_m);
    let mut energy = 0.0;
    let mut samples = Vec::with_capacity(ships.len());
    for (j, (ship, &tl_db)) in ships.iter().zip(tls).enumerate() {
        let rl = sl - tl_db;
        energy += 10f64.powf(rl / 10.0) * route.dt_s;
        samples.push(RlSample {
            t_s: (j as f64 + 0.5) * route.dt_s,
            lat: ship.lat,
            lon: ship.lon,
            speed_knots,
            sl_db: sl,
            tl_db,
            rl_db: rl,
        });
    }
    (10.0 * energy.log10(), samples)
}

fn steps_for_speed(l_m: f64, speed_knots: f64, dt_s: f64) -> usize {
    ((l_m / (speed_knots * KNOT_MS * dt_s)).ceil() as usize).max(1)
}

/// Discrete SEL of one leg at a constant speed, plus the RL samples (with
/// leg-local timestamps).
pub fn leg_sel(
    tl: &dyn TlPredictor,
    w0: &GeoPoint,
    w1: &GeoPoint,
    speed_knots: f64,
    receptor: &Receptor,
    route: &Route,
) -> Result<(f64, Vec<RlSample>)> {
    let l_m = geo::haversine_km(w0, w1) * 1000.0;
    let n = steps_for_speed(l_m, speed_knots, route.dt_s);
    let (ships, tls) = leg_tl_samples(tl, w0, w1, n, receptor, route)?;
    Ok(assemble_leg_sel(&ships, &tls, speed_knots, route))
}

/// Grid-searches the leg speed over [V0, Vmax] (inclusive endpoints,
/// [`SPEED_GRID_POINTS`] candidates) and returns the minimizing plan. Ties
/// break toward the lower speed.
pub fn optimize_leg(
    tl: &dyn TlPredictor,
    index: usize,
    w0: &GeoPoint,
    w1: &GeoPoint,
    receptor: &Receptor,
    route: &Route,
) -> Result<LegPlan> {
    let length_km = geo::haversine_km(w0, w1);
    let budget = leg_time_budget(length_km, route.v0_knots);
    let candidates: Vec<f64> = if route.vmax_knots == route.v0_knots {
        vec![route.v0_knots]
    } else {
        (0..SPEED_GRID_POINTS)
            .map(|i| {
                route.v0_knots
                    + (route.vmax_knots - route.v0_knots) * i as f64
                        / (SPEED_GRID_POINTS - 1) as f64
            })
            .collect()
    };
    let l_m = length_km * 1000.0;
    let mut tl_cache: std::collections::BTreeMap<usize, (Vec<GeoPoint>, Vec<f64>)> =
        std::collections::BTreeMap::new();
    let mut best: Option<(f64, f64, Vec<RlSample>)> = None;
    for &v in &candidates {
        let n = steps_for_speed(l_m, v, route.dt_s);
        if !tl_cache.contains_key(&n) {
            tl_cache.insert(n, leg_tl_samples(tl, w0, w1, n, receptor, route)?);
        }
        let (ships, tls) = &tl_cache[&n];
        let (sel, samples) = assemble_leg_sel(ships, tls, v, route);
        let better = match &best {
            None => true,
            Some((best_sel, _, _)) => sel < *best_sel,
        };
        if better {
            best = Some((sel, v, samples));
        }
    }
    let (sel_db, speed_knots, rl_samples) = best.expect("at least one candidate");
    let duration_s = length_km * 1000.0 / (speed_knots * KNOT_MS);
    Ok(LegPlan {
        index,
        length_km,
        time_budget_s: budget,
        speed_knots,
        duration_s,
        sel_db,
        rl_samples,
    })
}

/// Optimizes every leg independently and concatenates the results.
pub fn optimize_route(tl: &dyn TlPredictor, route: &Route, receptor: &Receptor) -> Result<VoyagePlan> {
    route.validate()?;
    let mut legs = Vec::with_capacity(route.waypoints.len() - 1);
    for i in 0..route.waypoints.len() - 1 {
        legs.push(optimize_leg(
            tl,
            i,
            &route.waypoints[i],
            &route.waypoints[i + 1],
            receptor,
            route,
        )?);
    }
    let mut rl_series = Vec::new();
    let mut offset = 0.0;
    let mut energy = 0.0;
    let mut total_time = 0.0;
    for leg in &legs {
        for s in &leg.rl_samples {
            let mut s = *s;
            s.t_s += offset;
            rl_series.push(s);
        }
        offset += leg.duration_s;
        total_time += leg.duration_s;
        energy += 10f64.powf(leg.sel_db / 10.0);
    }
    Ok(VoyagePlan {
        legs,
        rl_series,
        total_sel_db: 10.0 * energy.log10(),
        total_time_s: total_time,
    })
}

/// Parses a plain-text route file:
/// key-value lines (`v0_knots`, `vmax_knots`, `vessel_length_m`, `freq_hz`,
/// `dt_s`, `source_depth_m`), one `receptor lat lon depth` line, and two or
/// more `waypoint lat lon` lines.
pub fn read_route_file(path: &Path) -> Result<(Route, Receptor)> {
    let text = std::fs::read_to_string(path)?;
    let mut route = Route {
        waypoints: Vec::new(),
        v0_knots: 10.0,
        vmax_knots: 20.0,
        source_depth_m: 10.0,
        vessel_length_m: 200.0,
        f_hz: 400.0,
        dt_s: 60.0,
    };
    let mut receptor = None;
    let perr = |ln: usize, detail: String| crate::error::Error::FormatError {
        path: path.display().to_string(),
        detail: format!("line {}: {detail}", ln + 1),
    };
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let key = toks.next().unwrap();
        let mut f = |what: &str| -> Result<f64> {
            toks.next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| perr(ln, format!("bad {what}")))
        };
        match key {
            "v0_knots" => route.v0_knots = f("v0_knots")?,
            "vmax_knots" => route.vmax_knots = f("vmax_knots")?,
            "vessel_length_m" => route.vessel_length_m = f("vessel_length_m")?,
            "freq_hz" => route.f_hz = f("freq_hz")?,
            "dt_s" => route.dt_s = f("dt_s")?,
            "source_depth_m" => route.source_depth_m = f("source_depth_m")?,
            "receptor" => {
                let lat = f("receptor lat")?;
                let lon = f("receptor lon")?;
                let depth = f("receptor depth")?;
                receptor = Some(Receptor(GeoPoint::new(lat, lon, depth)?));
            }
            "waypoint" => {
                let lat = f("waypoint lat")?;
                let lon = f("waypoint lon")?;
                route.waypoints.push(GeoPoint::new(lat, lon, 0.0)?);
            }
            other => return Err(perr(ln, format!("unknown key {other:?}"))),
        }
    }
    let receptor = receptor.ok_or_else(|| perr(0, "missing receptor line".into()))?;
    route.validate()?;
    Ok((route, receptor))
}

/// Structured-text rendering of an optimized plan.
pub fn plan_to_string(plan: &VoyagePlan) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seatwin-voyage-plan v1");
    let _ = writeln!(s, "legs {}", plan.legs.len());
    for leg in &plan.legs {
        let _ = writeln!(
            s,
            "leg {} length_km {} budget_s {} speed_knots {} duration_s {} sel_db {}",
            leg.index, leg.length_km, leg.time_budget_s, leg.speed_knots, leg.duration_s, leg.sel_db
        );
    }
    let _ = writeln!(s, "total_sel_db {}", plan.total_sel_db);
    let _ = writeln!(s, "total_time_s {}", plan.total_time_s);
    s
}

/// Delimited RL time series for external plotting.
pub fn rl_series_to_csv(plan: &VoyagePlan) -> String {
    let mut s = String::from("t_s,lat,lon,speed_knots,sl_db,tl_db,rl_db\n");
    for r in &plan.rl_series {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.t_s, r.lat, r.lon, r.speed_knots, r.sl_db, r.tl_db, r.rl_db
        );
    }
    s
}
