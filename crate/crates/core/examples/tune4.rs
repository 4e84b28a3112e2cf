// scratch tuning harness for the self-consistency training criterion
use seatwin_core::datagen::{generate_dataset, BathySource, DatasetSpec, OracleConfig};
use seatwin_core::model::{ModelConfig, SurrogateModel};
use seatwin_core::train::{train, validate, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|v| v.parse().unwrap()).unwrap_or(80);
    let lr: f64 = args.get(2).map(|v| v.parse().unwrap()).unwrap_or(1e-3);
    let batch: usize = args.get(3).map(|v| v.parse().unwrap()).unwrap_or(512);

    let f_hi: f64 = args.get(4).map(|v| v.parse().unwrap()).unwrap_or(800.0);
    let n_src: usize = args.get(5).map(|v| v.parse().unwrap()).unwrap_or(5);
    let m_ind: usize = args.get(6).map(|v| v.parse().unwrap()).unwrap_or(128);
    let spec = DatasetSpec {
        n_sources: n_src,
        receivers_per_source: 125,
        max_radius_km: 30.0,
        f_lo_hz: 25.0,
        f_hi_hz: f_hi,
        seed: 1001,
        ..Default::default()
    };
    let oracle = OracleConfig { lambda0: 20_000.0, sigma_data: 1.0, seed: 1001, ..Default::default() };
    let ds = generate_dataset(&spec, &BathySource::default(), &oracle).unwrap();
    eprintln!("rows: {}", ds.train.len() + ds.val.len() + ds.test.len());

    let d: usize = args.get(7).map(|v| v.parse().unwrap()).unwrap_or(16);
    let config = ModelConfig {
        num_inducing: m_ind,
        encoder: seatwin_core::encoders::EncoderConfig { d_omega: d, d_z: d, d_lat: d },
        ..Default::default()
    };
    let mut model = SurrogateModel::new(config, ds.ranges, 1002).unwrap();
    model.init_inducing_from_samples(&ds.train, 1003).unwrap();
    let cfg = TrainConfig {
        batch_size: batch,
        lr_max: lr,
        max_epochs: epochs,
        patience: 30,
        seed: 1004,
        ..Default::default()
    };
    let t = Instant::now();
    let out = train(model, &ds.train, &ds.val, &cfg).unwrap();
    let wall = t.elapsed().as_secs_f64();
    for rec in out.log.iter().step_by(10) {
        eprintln!("{}", rec.to_line());
    }
    if let Some(last) = out.log.last() {
        eprintln!("{}", last.to_line());
    }
    let m = validate(&out.model, &ds.val, 200.0).unwrap();
    eprintln!(
        "FINAL epochs {} wall {:.0}s mse {:.3} coverage {:.3} rmspe {:.2} noise_var {:.3}",
        out.log.len(),
        wall,
        m.mse,
        m.coverage_2s,
        m.rmspe,
        out.model.noise.noise_var()
    );
}
