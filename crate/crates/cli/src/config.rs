//! Plain-text run configuration: one `key value` pair per line, `#` comments.
//! Command-line flags override file values.

use seatwin_core::datagen::{DatasetSpec, OracleConfig};
use seatwin_core::encoders::EncoderConfig;
use seatwin_core::error::{Error, Result};
use seatwin_core::model::{Ablation, ModelConfig};
use seatwin_core::train::TrainConfig;
use std::collections::BTreeMap;
use std::path::Path;

/// Everything a run can configure, with library defaults.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub dataset: DatasetSpecOpts,
    pub oracle: OracleOpts,
    pub model: ModelOpts,
    pub train: TrainOpts,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSpecOpts {
    pub n_sources: Option<usize>,
    pub receivers_per_source: Option<usize>,
    pub max_radius_km: Option<f64>,
    pub max_rcv_depth_m: Option<f64>,
    pub f_lo_hz: Option<f64>,
    pub f_hi_hz: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct OracleOpts {
    pub c_b: Option<f64>,
    pub d_ref: Option<f64>,
    pub c_i: Option<f64>,
    pub lambda0: Option<f64>,
    pub c_z: Option<f64>,
    pub sigma_data: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ModelOpts {
    pub d_omega: Option<usize>,
    pub d_z: Option<usize>,
    pub d_lat: Option<usize>,
    pub num_inducing: Option<usize>,
    pub tl_max: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOpts {
    pub batch_size: Option<usize>,
    pub lr_max: Option<f64>,
    pub lr_min: Option<f64>,
    pub weight_decay: Option<f64>,
    pub clip_norm: Option<f64>,
    pub lambda: Option<f64>,
    pub patience: Option<usize>,
    pub max_epochs: Option<usize>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut kv = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut toks = line.split_whitespace();
            let key = toks.next().unwrap().to_string();
            let val = toks.next().map(str::to_string).ok_or_else(|| {
                Error::Config(format!("{}:{}: missing value for {key}", path.display(), ln + 1))
            })?;
            if toks.next().is_some() {
                return Err(Error::Config(format!(
                    "{}:{}: trailing tokens after {key}",
                    path.display(),
                    ln + 1
                )));
            }
            kv.insert(key, val);
        }
        let mut cfg = RunConfig::default();
        for (key, val) in kv {
            cfg.set(&key, &val)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, val: &str) -> Result<()> {
        fn pf(key: &str, val: &str) -> Result<f64> {
            val.parse()
                .map_err(|_| Error::Config(format!("bad float for {key}: {val:?}")))
        }
        fn pu(key: &str, val: &str) -> Result<usize> {
            val.parse()
                .map_err(|_| Error::Config(format!("bad integer for {key}: {val:?}")))
        }
        match key {
            "data.n_sources" => self.dataset.n_sources = Some(pu(key, val)?),
            "data.receivers_per_source" => self.dataset.receivers_per_source = Some(pu(key, val)?),
            "data.max_radius_km" => self.dataset.max_radius_km = Some(pf(key, val)?),
            "data.max_rcv_depth_m" => self.dataset.max_rcv_depth_m = Some(pf(key, val)?),
            "data.f_lo_hz" => self.dataset.f_lo_hz = Some(pf(key, val)?),
            "data.f_hi_hz" => self.dataset.f_hi_hz = Some(pf(key, val)?),
            "oracle.c_b" => self.oracle.c_b = Some(pf(key, val)?),
            "oracle.d_ref" => self.oracle.d_ref = Some(pf(key, val)?),
            "oracle.c_i" => self.oracle.c_i = Some(pf(key, val)?),
            "oracle.lambda0" => self.oracle.lambda0 = Some(pf(key, val)?),
            "oracle.c_z" => self.oracle.c_z = Some(pf(key, val)?),
            "oracle.sigma_data" => self.oracle.sigma_data = Some(pf(key, val)?),
            "model.d_omega" => self.model.d_omega = Some(pu(key, val)?),
            "model.d_z" => self.model.d_z = Some(pu(key, val)?),
            "model.d_lat" => self.model.d_lat = Some(pu(key, val)?),
            "model.num_inducing" => self.model.num_inducing = Some(pu(key, val)?),
            "model.tl_max" => self.model.tl_max = Some(pf(key, val)?),
            "train.batch_size" => self.train.batch_size = Some(pu(key, val)?),
            "train.lr_max" => self.train.lr_max = Some(pf(key, val)?),
            "train.lr_min" => self.train.lr_min = Some(pf(key, val)?),
            "train.weight_decay" => self.train.weight_decay = Some(pf(key, val)?),
            "train.clip_norm" => self.train.clip_norm = Some(pf(key, val)?),
            "train.lambda" => self.train.lambda = Some(pf(key, val)?),
            "train.patience" => self.train.patience = Some(pu(key, val)?),
            "train.max_epochs" => self.train.max_epochs = Some(pu(key, val)?),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn dataset_spec(&self, seed: u64) -> DatasetSpec {
        let mut s = DatasetSpec { seed, ..Default::default() };
        if let Some(v) = self.dataset.n_sources {
            s.n_sources = v;
        }
        if let Some(v) = self.dataset.receivers_per_source {
            s.receivers_per_source = v;
        }
        if let Some(v) = self.dataset.max_radius_km {
            s.max_radius_km = v;
        }
        if let Some(v) = self.dataset.max_rcv_depth_m {
            s.max_rcv_depth_m = v;
        }
        if let Some(v) = self.dataset.f_lo_hz {
            s.f_lo_hz = v;
        }
        if let Some(v) = self.dataset.f_hi_hz {
            s.f_hi_hz = v;
        }
        s
    }

    pub fn oracle_config(&self, seed: u64) -> OracleConfig {
        let mut o = OracleConfig { seed, ..Default::default() };
        if let Some(v) = self.oracle.c_b {
            o.c_b = v;
        }
        if let Some(v) = self.oracle.d_ref {
            o.d_ref = v;
        }
        if let Some(v) = self.oracle.c_i {
            o.c_i = v;
        }
        if let Some(v) = self.oracle.lambda0 {
            o.lambda0 = v;
        }
        if let Some(v) = self.oracle.c_z {
            o.c_z = v;
        }
        if let Some(v) = self.oracle.sigma_data {
            o.sigma_data = v;
        }
        o
    }

    pub fn model_config(&self, ablation: Ablation) -> ModelConfig {
        let mut c = ModelConfig::for_ablation(ablation);
        let enc = EncoderConfig {
            d_omega: self.model.d_omega.unwrap_or(c.encoder.d_omega),
            d_z: self.model.d_z.unwrap_or(c.encoder.d_z),
            d_lat: self.model.d_lat.unwrap_or(c.encoder.d_lat),
        };
        c.encoder = enc;
        if let Some(v) = self.model.num_inducing {
            c.num_inducing = v;
        }
        if let Some(v) = self.model.tl_max {
            c.tl_max = v;
        }
        c
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let mut t = TrainConfig { seed, ..Default::default() };
        if let Some(v) = self.train.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.train.lr_max {
            t.lr_max = v;
        }
        if let Some(v) = self.train.lr_min {
            t.lr_min = v;
        }
        if let Some(v) = self.train.weight_decay {
            t.weight_decay = v;
        }
        if let Some(v) = self.train.clip_norm {
            t.clip_norm = v;
        }
        if let Some(v) = self.train.lambda {
            t.lambda = v;
        }
        if let Some(v) = self.train.patience {
            t.patience = v;
        }
        if let Some(v) = self.train.max_epochs {
            t.max_epochs = v;
        }
        t
    }
}
