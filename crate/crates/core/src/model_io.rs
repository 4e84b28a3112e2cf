//! Versioned plain-text model files.
//!
//! Layout: a fixed header (format version, provenance, config, normalization
//! ranges) followed by named parameter and buffer arrays with explicit
//! shapes, row-major, eight values per line. Floats print in Rust's shortest
//! round-trip form, so save -> load -> save is byte-identical.

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::geo::{NormRanges, EARTH_RADIUS_KM};
use crate::model::{LatentMode, ModelConfig, ModelMeta, SurrogateModel};
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "seatwin-model";
const VALUES_PER_LINE: usize = 8;

fn fmt_values(out: &mut String, data: &[f64]) {
    for chunk in data.chunks(VALUES_PER_LINE) {
        let mut first = true;
        for v in chunk {
            if !first {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
            first = false;
        }
        out.push('\n');
    }
}

/// Serializes a model to its text form.
pub fn to_string(model: &SurrogateModel) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC} v{FORMAT_VERSION}");
    let _ = writeln!(s, "seed {}", model.meta.seed);
    let _ = writeln!(s, "dataset_hash {}", field_or_dash(&model.meta.dataset_hash));
    let _ = writeln!(s, "created {}", field_or_dash(&model.meta.created));
    let _ = writeln!(s, "earth_radius_km {EARTH_RADIUS_KM}");
    let _ = writeln!(s, "tl_max {}", model.config.tl_max);
    let _ = writeln!(
        s,
        "latent_mode {}",
        match model.config.latent_mode {
            LatentMode::Encoded => "encoded",
            LatentMode::Raw => "raw",
        }
    );
    let _ = writeln!(s, "freeze_physics {}", u8::from(model.config.freeze_physics));
    let _ = writeln!(s, "d_omega {}", model.config.encoder.d_omega);
    let _ = writeln!(s, "d_z {}", model.config.encoder.d_z);
    let _ = writeln!(s, "d_lat {}", model.config.encoder.d_lat);
    let _ = writeln!(s, "num_inducing {}", model.config.num_inducing);
    for (name, (lo, hi)) in [
        ("src_depth", model.ranges.src_depth),
        ("rcv_depth", model.ranges.rcv_depth),
        ("bathy_depth", model.ranges.bathy_depth),
        ("freq_hz", model.ranges.freq_hz),
    ] {
        let _ = writeln!(s, "range {name} {lo} {hi}");
    }
    model.visit_params(&mut |name, t, _| {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "param {name} {}", shape.join(" "));
        fmt_values(&mut s, t.data());
    });
    if let Some(enc) = &model.encoders {
        enc.visit_buffers(&mut |name, data| {
            let _ = writeln!(s, "buffer {name} {}", data.len());
            fmt_values(&mut s, data);
        });
    }
    s.push_str("end\n");
    s
}

fn field_or_dash(v: &str) -> &str {
    if v.is_empty() {
        "-"
    } else {
        v
    }
}

pub fn save(model: &SurrogateModel, path: &Path) -> Result<()> {
    let mut ok = true;
    model.visit_params(&mut |_, t, _| ok &= t.all_finite());
    if !ok {
        return Err(Error::Config("refusing to save non-finite parameters".into()));
    }
    std::fs::write(path, to_string(model))?;
    Ok(())
}

struct Parser<'a> {
    lines: std::iter::Peekable<std::str::Lines<'a>>,
    path: String,
    line_no: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::FormatError {
            path: self.path.clone(),
            detail: format!("line {}: {}", self.line_no, detail.into()),
        }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        self.line_no += 1;
        self.lines
            .next()
            .ok_or_else(|| self.err("unexpected end of file"))
    }

    fn header_value(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next_line()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| self.err(format!("expected `{key} ...`, got {line:?}")))
    }

    fn read_values(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let line = self.next_line()?;
            for tok in line.split(' ') {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| self.err(format!("bad float {tok:?}")))?;
                out.push(v);
            }
        }
        if out.len() != n {
            return Err(self.err(format!("expected {n} values, got {}", out.len())));
        }
        Ok(out)
    }
}

/// Loads a model from its text form, verifying the format version and every
/// array shape.
pub fn load(path: &Path) -> Result<SurrogateModel> {
    let text = std::fs::read_to_string(path)?;
    from_str(&text, &path.display().to_string())
}

pub fn from_str(text: &str, path: &str) -> Result<SurrogateModel> {
    let mut p = Parser { lines: text.lines().peekable(), path: path.to_string(), line_no: 0 };

    let first = p.next_line()?;
    match first.strip_prefix(const_format_prefix()) {
        Some(v) => {
            let found: u32 = v
                .parse()
                .map_err(|_| p.err(format!("bad version {v:?}")))?;
            if found != FORMAT_VERSION {
                return Err(Error::VersionMismatch { found, supported: FORMAT_VERSION });
            }
        }
        None => return Err(p.err(format!("bad magic line {first:?}"))),
    }

    let seed: u64 = p
        .header_value("seed")?
        .parse()
        .map_err(|_| p.err("bad seed"))?;
    let dataset_hash = dash_to_empty(p.header_value("dataset_hash")?);
    let created = dash_to_empty(p.header_value("created")?);
    let _earth: f64 = p
        .header_value("earth_radius_km")?
        .parse()
        .map_err(|_| p.err("bad earth radius"))?;
    let tl_max: f64 = p
        .header_value("tl_max")?
        .parse()
        .map_err(|_| p.err("bad tl_max"))?;
    let latent_mode = match p.header_value("latent_mode")? {
        "encoded" => LatentMode::Encoded,
        "raw" => LatentMode::Raw,
        other => return Err(p.err(format!("bad latent_mode {other:?}"))),
    };
    let freeze_physics = match p.header_value("freeze_physics")? {
        "0" => false,
        "1" => true,
        other => return Err(p.err(format!("bad freeze_physics {other:?}"))),
    };
    let d_omega: usize = p.header_value("d_omega")?.parse().map_err(|_| p.err("bad d_omega"))?;
    let d_z: usize = p.header_value("d_z")?.parse().map_err(|_| p.err("bad d_z"))?;
    let d_lat: usize = p.header_value("d_lat")?.parse().map_err(|_| p.err("bad d_lat"))?;
    let num_inducing: usize = p
        .header_value("num_inducing")?
        .parse()
        .map_err(|_| p.err("bad num_inducing"))?;

    let read_range = |key: &str, p: &mut Parser| -> Result<(f64, f64)> {
        let v = p.header_value("range")?;
        let mut it = v.split(' ');
        let name = it.next().unwrap_or("");
        if name != key {
            return Err(p.err(format!("expected range {key}, got {name}")));
        }
        let lo: f64 = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| p.err("bad range lo"))?;
        let hi: f64 = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| p.err("bad range hi"))?;
        Ok((lo, hi))
    };
    let ranges = NormRanges {
        src_depth: read_range("src_depth", &mut p)?,
        rcv_depth: read_range("rcv_depth", &mut p)?,
        bathy_depth: read_range("bathy_depth", &mut p)?,
        freq_hz: read_range("freq_hz", &mut p)?,
    };

    let config = ModelConfig {
        encoder: EncoderConfig { d_omega, d_z, d_lat },
        num_inducing,
        tl_max,
        latent_mode,
        freeze_physics,
    };
    let mut model = SurrogateModel::new(config, ranges, seed)?;
    model.meta = ModelMeta { seed, dataset_hash, created };

    // parameter arrays, in visit order
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    model.visit_params(&mut |name, t, _| expected.push((name, t.shape().to_vec())));
    let mut loaded: Vec<Tensor> = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let line = p.next_line()?;
        let want_head = format!(
            "param {name} {}",
            shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ")
        );
        if line != want_head {
            return Err(p.err(format!("expected {want_head:?}, got {line:?}")));
        }
        let numel: usize = shape.iter().product();
        loaded.push(Tensor::from_vec(shape, p.read_values(numel)?));
    }
    let mut it = loaded.into_iter();
    model.visit_params_mut(&mut |_, t, _| *t = it.next().expect("counted above"));

    if model.encoders.is_some() {
        let mut buf_specs: Vec<(String, usize)> = Vec::new();
        model
            .encoders
            .as_ref()
            .unwrap()
            .visit_buffers(&mut |name, data| buf_specs.push((name, data.len())));
        let mut bufs: Vec<Vec<f64>> = Vec::with_capacity(buf_specs.len());
        for (name, len) in &buf_specs {
            let line = p.next_line()?;
            let want_head = format!("buffer {name} {len}");
            if line != want_head {
                return Err(p.err(format!("expected {want_head:?}, got {line:?}")));
            }
            bufs.push(p.read_values(*len)?);
        }
        let mut it = bufs.into_iter();
        model
            .encoders
            .as_mut()
            .unwrap()
            .visit_buffers_mut(&mut |_, data| *data = it.next().expect("counted above"));
    }

    let last = p.next_line()?;
    if last != "end" {
        return Err(p.err(format!("expected end marker, got {last:?}")));
    }
    Ok(model)
}

fn const_format_prefix() -> &'static str {
    "seatwin-model v"
}

fn dash_to_empty(v: &str) -> String {
    if v == "-" {
        String::new()
    } else {
        v.to_string()
    }
}
