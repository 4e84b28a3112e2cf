//! Assimilation of sparse hydrophone transmission-loss observations into a
//! frozen trained surrogate.
//!
//! Observations are converted to residual space (observed TL minus the
//! current physics mean) before exact Gaussian conditioning, so the update
//! equations type-check against the GP residual. The update is transient: it
//! wraps the frozen model without touching its parameters; persisting it
//! writes a sidecar file referencing the base model.

use crate::encoders::{BathyProfile, PROFILE_LEN};
use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::model::{PredictiveTL, QueryPoint, SurrogateModel};
use crate::svgp::{ConditionedPredictor, ConditioningCovariance};
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::path::Path;

/// One hydrophone measurement of TL from a known source.
#[derive(Debug, Clone, PartialEq)]
pub struct HydrophoneObs {
    pub source: GeoPoint,
    /// hydrophone position
    pub position: GeoPoint,
    pub f_hz: f64,
    /// seabed profile along the source-hydrophone path
    pub profile: BathyProfile,
    pub tl_obs_db: f64,
    /// per-observation noise variance; falls back to the model's trained
    /// likelihood noise
    pub noise_var: Option<f64>,
}

impl HydrophoneObs {
    pub fn validate(&self, tl_max: f64) -> Result<()> {
        if !(self.tl_obs_db > 0.0 && self.tl_obs_db <= tl_max) {
            return Err(Error::OutOfRange {
                what: "tl_obs_db",
                value: self.tl_obs_db,
                min: 0.0,
                max: tl_max,
            });
        }
        Ok(())
    }
}

/// A frozen model with hydrophone observations folded into its GP posterior.
pub struct AssimilatedModel<'a> {
    model: &'a SurrogateModel,
    cond: ConditionedPredictor,
}

impl<'a> AssimilatedModel<'a> {
    pub fn build(model: &'a SurrogateModel, observations: &[HydrophoneObs]) -> Result<Self> {
        Self::build_with_mode(model, observations, ConditioningCovariance::Prior)
    }

    pub fn build_with_mode(
        model: &'a SurrogateModel,
        observations: &[HydrophoneObs],
        mode: ConditioningCovariance,
    ) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::Config("assimilation needs at least one observation".into()));
        }
        let n = observations.len();
        let mut latents = Vec::with_capacity(n * model.config.d_lat());
        let mut residuals = Vec::with_capacity(n);
        let mut noises = Vec::with_capacity(n);
        for o in observations {
            o.validate(model.config.tl_max)?;
            let (f, b) = model.normalize_query(&o.source, &o.position, o.f_hz, &o.profile)?;
            let lat = model.latents(
                &Tensor::from_vec(&[1, 7], f.to_vec()),
                &Tensor::from_vec(&[1, PROFILE_LEN], b),
            )?;
            latents.extend_from_slice(lat.data());
            residuals.push(o.tl_obs_db - model.physics_mean(&o.source, &o.position, o.f_hz));
            noises.push(o.noise_var.unwrap_or_else(|| model.noise.noise_var()));
        }
        let cond = ConditionedPredictor::build_full(
            &model.variational,
            &model.hyper,
            &noises,
            &latents,
            &residuals,
            mode,
        )?;
        Ok(AssimilatedModel { model, cond })
    }

    fn latent_of(&self, q: &QueryPoint) -> Result<Vec<f64>> {
        let (f, b) = self
            .model
            .normalize_query(&q.src, &q.rcv, q.f_hz, &q.profile)?;
        Ok(self
            .model
            .latents(
                &Tensor::from_vec(&[1, 7], f.to_vec()),
                &Tensor::from_vec(&[1, PROFILE_LEN], b),
            )?
            .into_data())
    }

    fn compose(&self, q: &QueryPoint, mu: f64, var: f64, clamp: bool) -> PredictiveTL {
        let mean = self.model.physics_mean(&q.src, &q.rcv, q.f_hz) + mu;
        let clamped = clamp && mean > self.model.config.tl_max;
        PredictiveTL {
            mean: if clamped { self.model.config.tl_max } else { mean },
            variance: var,
            clamped,
        }
    }

    /// Posterior (assimilated) prediction.
    pub fn predict(&self, q: &QueryPoint, clamp: bool) -> Result<PredictiveTL> {
        let z = self.latent_of(q)?;
        let (mu, var) = self.cond.predict(&z);
        Ok(self.compose(q, mu, var, clamp))
    }

    /// Prior (unassimilated) prediction from the same factorization.
    pub fn predict_prior(&self, q: &QueryPoint, clamp: bool) -> Result<PredictiveTL> {
        let z = self.latent_of(q)?;
        let (mu, var) = self.cond.predict_prior(&z);
        Ok(self.compose(q, mu, var, clamp))
    }
}

/// Prior/posterior evaluation at one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryEval {
    pub prior_mean: f64,
    pub prior_sigma: f64,
    pub post_mean: f64,
    pub post_sigma: f64,
    pub truth: Option<f64>,
}

/// Before/after comparison over a caller-supplied query set.
#[derive(Debug, Clone, PartialEq)]
pub struct AssimilationReport {
    pub rows: Vec<QueryEval>,
    /// mean signed error before/after, present when truths are supplied
    pub mean_signed_before: Option<f64>,
    pub mean_signed_after: Option<f64>,
    pub mean_sigma_before: f64,
    pub mean_sigma_after: f64,
}

/// Folds observations into the model and evaluates prior vs posterior on the
/// query set. `truths` (when given) must align with `queries`.
pub fn assimilate(
    model: &SurrogateModel,
    observations: &[HydrophoneObs],
    queries: &[QueryPoint],
    truths: Option<&[f64]>,
) -> Result<(AssimilationReport, ())> {
    let am = AssimilatedModel::build(model, observations)?;
    let report = evaluate(&am, queries, truths)?;
    Ok((report, ()))
}

/// Evaluates an assimilated model over a query set.
pub fn evaluate(
    am: &AssimilatedModel,
    queries: &[QueryPoint],
    truths: Option<&[f64]>,
) -> Result<AssimilationReport> {
    if let Some(t) = truths {
        assert_eq!(t.len(), queries.len());
    }
    let mut rows = Vec::with_capacity(queries.len());
    let (mut sb, mut sa) = (0.0, 0.0);
    let (mut eb, mut ea) = (0.0, 0.0);
    for (i, q) in queries.iter().enumerate() {
        let prior = am.predict_prior(q, true)?;
        let post = am.predict(q, true)?;
        let truth = truths.map(|t| t[i]);
        if let Some(y) = truth {
            eb += prior.mean - y;
            ea += post.mean - y;
        }
        sb += prior.variance.sqrt();
        sa += post.variance.sqrt();
        rows.push(QueryEval {
            prior_mean: prior.mean,
            prior_sigma: prior.variance.sqrt(),
            post_mean: post.mean,
            post_sigma: post.variance.sqrt(),
            truth,
        });
    }
    let n = queries.len() as f64;
    Ok(AssimilationReport {
        rows,
        mean_signed_before: truths.map(|_| eb / n),
        mean_signed_after: truths.map(|_| ea / n),
        mean_sigma_before: sb / n,
        mean_sigma_after: sa / n,
    })
}

/// Seeded query set: receivers uniform in a horizontal disk around `center`
/// at the center's depth, all paired with the same source and frequency.
pub fn disk_queries(
    center: &GeoPoint,
    src: &GeoPoint,
    f_hz: f64,
    bathy: &crate::datagen::BathySource,
    radius_km: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<QueryPoint>> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let r: f64 = radius_km * rng.random_range(0.0f64..1.0).sqrt();
        let th = rng.random_range(0.0..std::f64::consts::TAU);
        let rcv = GeoPoint::new(
            center.lat + r * th.cos() / 111.195,
            center.lon + r * th.sin() / (111.195 * center.lat.to_radians().cos()),
            center.depth,
        )?;
        let profile = crate::datagen::sample_profile(src, &rcv, bathy)?;
        out.push(QueryPoint { src: *src, rcv, f_hz, profile });
    }
    Ok(out)
}

/// Raw observation file row (profile not yet attached).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObsRow {
    pub src: GeoPoint,
    pub hyd: GeoPoint,
    pub f_hz: f64,
    pub tl_obs_db: f64,
}

/// Reads the delimited observation file:
/// src_lat,src_lon,src_depth,hyd_lat,hyd_lon,hyd_depth,freq_hz,tl_obs_db.
pub fn read_obs_file(path: &Path) -> Result<Vec<ObsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::FormatError {
        path: path.display().to_string(),
        detail: "empty file".into(),
    })?;
    if !header.starts_with("src_lat,src_lon,src_depth,hyd_lat") {
        return Err(Error::FormatError {
            path: path.display().to_string(),
            detail: "bad header".into(),
        });
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::FormatError {
                    path: path.display().to_string(),
                    detail: format!("row {}: bad float {t:?}", ln + 2),
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != 8 {
            return Err(Error::FormatError {
                path: path.display().to_string(),
                detail: format!("row {}: expected 8 columns", ln + 2),
            });
        }
        out.push(ObsRow {
            src: GeoPoint::new(vals[0], vals[1], vals[2])?,
            hyd: GeoPoint::new(vals[3], vals[4], vals[5])?,
            f_hz: vals[6],
            tl_obs_db: vals[7],
        });
    }
    Ok(out)
}

pub fn obs_file_header() -> &'static str {
    "src_lat,src_lon,src_depth,hyd_lat,hyd_lon,hyd_depth,freq_hz,tl_obs_db"
}

/// Sidecar file persisting a transient assimilation next to its base model.
pub fn write_sidecar(
    path: &Path,
    base_model_name: &str,
    observations: &[HydrophoneObs],
) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "seatwin-assimilation-sidecar v1");
    let _ = writeln!(s, "base_model {base_model_name}");
    let _ = writeln!(s, "observations {}", observations.len());
    for o in observations {
        let noise = o
            .noise_var
            .map(|v| v.to_string())
            .unwrap_or_else(|| "trained".to_string());
        let _ = writeln!(
            s,
            "obs {} {} {} {} {} {} {} {} {}",
            o.source.lat,
            o.source.lon,
            o.source.depth,
            o.position.lat,
            o.position.lon,
            o.position.depth,
            o.f_hz,
            o.tl_obs_db,
            noise
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Plain-text rendering of the report.
pub fn report_to_string(r: &AssimilationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seatwin-assimilation-report v1");
    let _ = writeln!(s, "queries {}", r.rows.len());
    let _ = writeln!(s, "mean_sigma_before {}", r.mean_sigma_before);
    let _ = writeln!(s, "mean_sigma_after {}", r.mean_sigma_after);
    if let (Some(b), Some(a)) = (r.mean_signed_before, r.mean_signed_after) {
        let _ = writeln!(s, "mean_signed_error_before {b}");
        let _ = writeln!(s, "mean_signed_error_after {a}");
    }
    s.push_str("prior_mean,prior_sigma,post_mean,post_sigma,truth\n");
    for row in &r.rows {
        let truth = row.truth.map(|t| t.to_string()).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            row.prior_mean, row.prior_sigma, row.post_mean, row.post_sigma, truth
        );
    }
    s
}
