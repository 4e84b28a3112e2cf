//! seatwin command-line pipeline: synthetic data generation, surrogate
//! training, evaluation, field prediction, voyage speed optimization, and
//! hydrophone assimilation.

mod config;

use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use seatwin_core::assimilate::{
    self, evaluate as assim_evaluate, AssimilatedModel, HydrophoneObs,
};
use seatwin_core::datagen::{
    self, fnv1a64, read_dataset_file, read_grid_file, sample_profile, write_dataset_file,
    BathySource,
};
use seatwin_core::error::Error;
use seatwin_core::geo::GeoPoint;
use seatwin_core::model::{Ablation, Predictor, QueryPoint, SurrogateModel};
use seatwin_core::model_io;
use seatwin_core::train::{self, validate};
use seatwin_core::voyage::{
    optimize_route, plan_to_string, read_route_file, rl_series_to_csv, SurrogateTl,
};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "seatwin", version, about = "Probabilistic transmission-loss surrogate pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// run configuration file (key value lines); flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// master seed for this command
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// worker threads; the desk-scale pipeline runs single-threaded and
    /// produces identical output for any value
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// model variant: full, zero-mean, or physics-mean-only
    #[arg(long, default_value = "full")]
    ablation: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/val/test splits plus manifest)
    GenData {
        #[command(flatten)]
        common: Common,
        /// optional gridded bathymetry file (default: analytic seabed)
        #[arg(long)]
        bathy_grid: Option<PathBuf>,
    },
    /// Train a surrogate on a generated dataset
    Train {
        #[command(flatten)]
        common: Common,
        /// dataset directory produced by gen-data
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a trained model on the held-out test split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Predict a TL field over a receiver grid for one source
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// source position as lat,lon,depth
        #[arg(long)]
        source: String,
        /// receiver grid as lat0,lat1,nlat,lon0,lon1,nlon,depth,freq_hz
        #[arg(long)]
        grid: String,
        /// optional gridded bathymetry file (default: analytic seabed)
        #[arg(long)]
        bathy_grid: Option<PathBuf>,
    },
    /// Optimize per-leg vessel speeds along a route file
    OptimizeVoyage {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        route: PathBuf,
        #[arg(long)]
        bathy_grid: Option<PathBuf>,
    },
    /// Assimilate hydrophone observations and report prior vs posterior
    Assimilate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// observation file (src/hydrophone positions, frequency, observed TL)
        #[arg(long)]
        obs: PathBuf,
        /// query disk around the first hydrophone: radius_km,count
        #[arg(long, default_value = "5.0,100")]
        query_disk: String,
        #[arg(long)]
        bathy_grid: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io(_) => 3,
                Error::FailureEscalation { .. } => 4,
                _ => 2,
            }
        }
    };
    std::process::exit(code);
}

fn check_common(c: &Common) -> Result<RunConfig, Error> {
    if c.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    Ablation::parse(&c.ablation)?;
    match &c.config {
        Some(path) => RunConfig::from_file(path),
        None => Ok(RunConfig::default()),
    }
}

fn out_file(common: &Common, name: &str) -> Result<PathBuf, Error> {
    if !common.out.is_dir() {
        return Err(Error::Io(format!(
            "output directory {} does not exist",
            common.out.display()
        )));
    }
    Ok(common.out.join(name))
}

fn bathy_source(grid: &Option<PathBuf>) -> Result<BathySource, Error> {
    match grid {
        Some(path) => Ok(BathySource::Grid(read_grid_file(path)?)),
        None => Ok(BathySource::default()),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { common, bathy_grid } => cmd_gen_data(common, bathy_grid),
        Command::Train { common, data } => cmd_train(common, data),
        Command::Eval { common, data, model } => cmd_eval(common, data, model),
        Command::Predict { common, model, source, grid, bathy_grid } => {
            cmd_predict(common, model, source, grid, bathy_grid)
        }
        Command::OptimizeVoyage { common, model, route, bathy_grid } => {
            cmd_optimize_voyage(common, model, route, bathy_grid)
        }
        Command::Assimilate { common, model, obs, query_disk, bathy_grid } => {
            cmd_assimilate(common, model, obs, query_disk, bathy_grid)
        }
    }
}

fn cmd_gen_data(common: Common, bathy_grid: Option<PathBuf>) -> Result<(), Error> {
    let cfg = check_common(&common)?;
    let spec = cfg.dataset_spec(common.seed);
    let oracle = cfg.oracle_config(common.seed);
    let bathy = bathy_source(&bathy_grid)?;
    let ds = datagen::generate_dataset(&spec, &bathy, &oracle)?;

    let train_path = out_file(&common, "train.csv")?;
    write_dataset_file(&ds.train, &train_path)?;
    let val_path = out_file(&common, "val.csv")?;
    write_dataset_file(&ds.val, &val_path)?;
    let test_path = out_file(&common, "test.csv")?;
    write_dataset_file(&ds.test, &test_path)?;

    let mut manifest = ds.manifest.clone();
    for (name, path) in [("train.csv", &train_path), ("val.csv", &val_path), ("test.csv", &test_path)] {
        let bytes = std::fs::read(path)?;
        let _ = writeln!(manifest, "hash {name} {:016x}", fnv1a64(&bytes));
    }
    std::fs::write(out_file(&common, "manifest.txt")?, &manifest)?;

    let n = ds.train.len() + ds.val.len() + ds.test.len();
    println!(
        "generated {n} rows: train {} ({:.4}), val {} ({:.4}), test {} ({:.4})",
        ds.train.len(),
        ds.train.len() as f64 / n as f64,
        ds.val.len(),
        ds.val.len() as f64 / n as f64,
        ds.test.len(),
        ds.test.len() as f64 / n as f64,
    );
    println!("bands {}", ds.bands.len());
    Ok(())
}

/// Recomputes the normalization contract from the train split (deterministic
/// given the file contents) and the dataset fingerprint for provenance.
fn load_training_data(
    data: &Path,
) -> Result<(Vec<seatwin_core::model::TrainingSample>, Vec<seatwin_core::model::TrainingSample>, seatwin_core::geo::NormRanges, String), Error> {
    let train_path = data.join("train.csv");
    let train_set = read_dataset_file(&train_path)?;
    let val_set = read_dataset_file(&data.join("val.csv"))?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("train/val splits must be nonempty".into()));
    }
    let ranges = datagen::ranges_from_training_split(&train_set)?;
    let hash = format!("{:016x}", fnv1a64(&std::fs::read(&train_path)?));
    Ok((train_set, val_set, ranges, hash))
}

fn cmd_train(common: Common, data: PathBuf) -> Result<(), Error> {
    let cfg = check_common(&common)?;
    let ablation = Ablation::parse(&common.ablation)?;
    let (train_set, val_set, ranges, dataset_hash) = load_training_data(&data)?;

    let model_cfg = cfg.model_config(ablation);
    let mut model = SurrogateModel::new(model_cfg, ranges, common.seed)?;
    model.meta.dataset_hash = dataset_hash.clone();
    model.meta.created = format!("seed{}-data{}", common.seed, dataset_hash);
    model.init_inducing_from_samples(&train_set, common.seed ^ 0xabcdef)?;

    let tcfg = cfg.train_config(common.seed);
    let started = Instant::now();
    let outcome = train::train(model, &train_set, &val_set, &tcfg)?;
    let elapsed = started.elapsed().as_secs_f64();

    let mut log = String::new();
    for rec in &outcome.log {
        let _ = writeln!(log, "{}", rec.to_line());
        println!("{}", rec.to_line());
    }
    let _ = writeln!(
        log,
        "best_epoch {} stopped_early {} wall_s {elapsed:.1}",
        outcome.best_epoch, outcome.stopped_early
    );
    std::fs::write(out_file(&common, "train_log.txt")?, &log)?;
    model_io::save(&outcome.model, &out_file(&common, "model.txt")?)?;
    println!(
        "trained {} epochs (best {}), wall {elapsed:.1}s, model written",
        outcome.log.len(),
        outcome.best_epoch
    );
    Ok(())
}

fn cmd_eval(common: Common, data: PathBuf, model_path: PathBuf) -> Result<(), Error> {
    check_common(&common)?;
    let model = model_io::load(&model_path)?;
    let test_set = read_dataset_file(&data.join("test.csv"))?;
    if test_set.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    let metrics = validate(&model, &test_set, model.config.tl_max)?;
    let mut doc = String::new();
    let _ = writeln!(doc, "seatwin-metrics v1");
    let _ = writeln!(doc, "rows {}", test_set.len());
    let _ = writeln!(doc, "mean_signed_error_db {}", metrics.mean_signed_error);
    let _ = writeln!(doc, "residual_std_db {}", metrics.residual_std);
    let _ = writeln!(doc, "mse_db2 {}", metrics.mse);
    let _ = writeln!(doc, "rmspe_pct {}", metrics.rmspe);
    let _ = writeln!(doc, "coverage_2sigma {}", metrics.coverage_2s);
    let _ = writeln!(doc, "neg_elbo {}", metrics.val_neg_elbo);
    std::fs::write(out_file(&common, "metrics.txt")?, &doc)?;
    print!("{doc}");
    Ok(())
}

fn parse_floats(s: &str, n: usize, what: &str) -> Result<Vec<f64>, Error> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad {what}: {s:?}")))?;
    if vals.len() != n {
        return Err(Error::Config(format!("{what} needs {n} comma-separated values")));
    }
    Ok(vals)
}

fn cmd_predict(
    common: Common,
    model_path: PathBuf,
    source: String,
    grid: String,
    bathy_grid: Option<PathBuf>,
) -> Result<(), Error> {
    check_common(&common)?;
    let model = model_io::load(&model_path)?;
    let s = parse_floats(&source, 3, "--source")?;
    let g = parse_floats(&grid, 8, "--grid")?;
    let src = GeoPoint::new(s[0], s[1], s[2])?;
    let (lat0, lat1, nlat) = (g[0], g[1], g[2] as usize);
    let (lon0, lon1, nlon) = (g[3], g[4], g[5] as usize);
    let (depth, f_hz) = (g[6], g[7]);
    if nlat == 0 || nlon == 0 {
        return Err(Error::Config("grid counts must be positive".into()));
    }
    let bathy = bathy_source(&bathy_grid)?;

    let started = Instant::now();
    let mut queries = Vec::with_capacity(nlat * nlon);
    for i in 0..nlat {
        let lat = if nlat == 1 { lat0 } else { lat0 + (lat1 - lat0) * i as f64 / (nlat - 1) as f64 };
        for j in 0..nlon {
            let lon =
                if nlon == 1 { lon0 } else { lon0 + (lon1 - lon0) * j as f64 / (nlon - 1) as f64 };
            let rcv = GeoPoint::new(lat, lon, depth)?;
            let profile = sample_profile(&src, &rcv, &bathy)?;
            queries.push(QueryPoint { src, rcv, f_hz, profile });
        }
    }
    let prep_s = started.elapsed().as_secs_f64();

    let predictor = Predictor::new(&model)?;
    let t0 = Instant::now();
    let out = predictor.predict_batch(&queries, true)?;
    let predict_s = t0.elapsed().as_secs_f64();

    let mut csv = String::from("lat,lon,depth,freq,tl_mean,tl_sigma\n");
    for (q, p) in queries.iter().zip(&out) {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            q.rcv.lat,
            q.rcv.lon,
            q.rcv.depth,
            q.f_hz,
            p.mean,
            p.variance.sqrt()
        );
    }
    std::fs::write(out_file(&common, "tl_field.csv")?, &csv)?;
    println!(
        "predicted {} points in {predict_s:.3}s (grid prep {prep_s:.3}s), field written",
        out.len()
    );
    Ok(())
}

fn cmd_optimize_voyage(
    common: Common,
    model_path: PathBuf,
    route_path: PathBuf,
    bathy_grid: Option<PathBuf>,
) -> Result<(), Error> {
    check_common(&common)?;
    let model = model_io::load(&model_path)?;
    let (route, receptor) = read_route_file(&route_path)?;
    let bathy = bathy_source(&bathy_grid)?;
    let tl = SurrogateTl::new(&model, &bathy)?;
    let plan = optimize_route(&tl, &route, &receptor)?;
    std::fs::write(out_file(&common, "voyage_plan.txt")?, plan_to_string(&plan))?;
    std::fs::write(out_file(&common, "rl_series.csv")?, rl_series_to_csv(&plan))?;
    for leg in &plan.legs {
        println!(
            "leg {}: {:.2} km at {:.2} kn, SEL {:.2} dB, time {:.0}/{:.0} s",
            leg.index, leg.length_km, leg.speed_knots, leg.sel_db, leg.duration_s, leg.time_budget_s
        );
    }
    println!(
        "total SEL {:.2} dB over {:.0} s; plan and RL series written",
        plan.total_sel_db, plan.total_time_s
    );
    Ok(())
}

fn cmd_assimilate(
    common: Common,
    model_path: PathBuf,
    obs_path: PathBuf,
    query_disk: String,
    bathy_grid: Option<PathBuf>,
) -> Result<(), Error> {
    check_common(&common)?;
    let model = model_io::load(&model_path)?;
    let rows = assimilate::read_obs_file(&obs_path)?;
    if rows.is_empty() {
        return Err(Error::Config("observation file has no rows".into()));
    }
    let qd = parse_floats(&query_disk, 2, "--query-disk")?;
    let (radius_km, n_queries) = (qd[0], qd[1] as usize);
    let bathy = bathy_source(&bathy_grid)?;

    let observations: Vec<HydrophoneObs> = rows
        .iter()
        .map(|r| {
            Ok(HydrophoneObs {
                source: r.src,
                position: r.hyd,
                f_hz: r.f_hz,
                profile: sample_profile(&r.src, &r.hyd, &bathy)?,
                tl_obs_db: r.tl_obs_db,
                noise_var: None,
            })
        })
        .collect::<Result<_, Error>>()?;

    let am = AssimilatedModel::build(&model, &observations)?;

    // query disk around the first hydrophone, seeded by --seed
    let queries = assimilate::disk_queries(
        &rows[0].hyd,
        &rows[0].src,
        rows[0].f_hz,
        &bathy,
        radius_km,
        n_queries,
        common.seed,
    )?;
    let report = assim_evaluate(&am, &queries, None)?;

    std::fs::write(
        out_file(&common, "assimilation_report.txt")?,
        assimilate::report_to_string(&report),
    )?;
    assimilate::write_sidecar(
        &out_file(&common, "assimilation_sidecar.txt")?,
        &model_path.display().to_string(),
        &observations,
    )?;
    println!(
        "assimilated {} observation(s); mean sigma {:.3} -> {:.3} dB over {} queries",
        observations.len(),
        report.mean_sigma_before,
        report.mean_sigma_after,
        report.rows.len()
    );
    Ok(())
}
