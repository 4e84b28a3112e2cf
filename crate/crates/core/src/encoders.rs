//! Differentiable bathymetry and geometry encoders plus the fusion block
//! that produces the latent input of the GP residual head.
//!
//! Layout convention is channels-last throughout: conv activations are
//! `[B, L, C]`, dense activations `[B, F]`. Conv weights are `[O, K*C]` with
//! tap-major columns; the flattened pooled tensor `[B, 16, 32]` therefore has
//! index `bin*32 + channel`.
//!
//! The bathymetry path is Conv1D(1->8->16->32, kernel 5, same padding) with
//! SiLU then batch norm after each conv, adaptive average pooling to 16,
//! flatten to 512, and a 512->256->128->64->d_omega head (SiLU + batch norm
//! between layers, final layer plain). The geometry path is a
//! 7->32->64->128->256->128->64->d_z MLP with batch norm then GELU after
//! every layer but the last. Fusion concatenates the two embeddings and
//! applies one affine layer with GELU to d_lat.

use crate::autodiff::{math, BnBatchStats, BnMode, Tape, Var};
use crate::error::{Error, Result};
use crate::geo::{normalize_bathy_depth, NormRanges};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Number of bathymetry samples along the source-receiver path.
pub const PROFILE_LEN: usize = 128;

/// Pooled temporal length after the conv stack.
pub const POOLED_LEN: usize = 16;

const CONV_CHANNELS: [usize; 4] = [1, 8, 16, 32];
const CONV_KERNEL: usize = 5;
const BATHY_HEAD_WIDTHS: [usize; 4] = [512, 256, 128, 64];
const FEATURE_WIDTHS: [usize; 7] = [7, 32, 64, 128, 256, 128, 64];

/// Running-statistics momentum for batch-norm updates (new = (1-m)*old + m*batch).
pub const BN_MOMENTUM: f64 = 0.1;

/// Seabed depths sampled uniformly along the source-receiver path, meters
/// positive down.
#[derive(Debug, Clone, PartialEq)]
pub struct BathyProfile {
    depths: Vec<f64>,
}

impl BathyProfile {
    pub fn new(depths: Vec<f64>) -> Result<Self> {
        if depths.len() != PROFILE_LEN {
            return Err(Error::ShapeMismatch {
                what: "bathymetry profile",
                expected: PROFILE_LEN,
                got: depths.len(),
            });
        }
        Ok(BathyProfile { depths })
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    /// Min-max normalized view in [0,1] under the stored bathymetry range.
    pub fn normalized(&self, ranges: &NormRanges) -> Result<Vec<f64>> {
        self.depths
            .iter()
            .map(|&d| normalize_bathy_depth(d, ranges))
            .collect()
    }

    /// Writes the normalized view into a caller-provided slice.
    pub fn normalized_into(&self, ranges: &NormRanges, out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(out.len(), PROFILE_LEN);
        for (o, &d) in out.iter_mut().zip(&self.depths) {
            *o = normalize_bathy_depth(d, ranges)?;
        }
        Ok(())
    }
}

/// Embedding widths. Table defaults in the reference architecture are 64;
/// the desk-scale default here is 16 to keep CPU training in minutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub d_omega: usize,
    pub d_z: usize,
    pub d_lat: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { d_omega: 16, d_z: 16, d_lat: 16 }
    }
}

/// Batch-norm parameters and running statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnParams {
    fn identity(c: usize) -> Self {
        BnParams {
            gamma: Tensor::full(&[c], 1.0),
            beta: Tensor::zeros(&[c]),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }
}

/// One affine (dense or conv) layer with optional batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Tensor,
    pub b: Tensor,
    pub bn: Option<BnParams>,
}

/// All encoder weights. Architecture is fixed; only embedding widths vary.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// three conv layers (1->8->16->32), each with batch norm
    pub conv: Vec<Layer>,
    /// bathy head: 512->256->128->64->d_omega, batch norm on all but last
    pub bathy_head: Vec<Layer>,
    /// feature MLP: 7->...->d_z, batch norm on all but last
    pub feature: Vec<Layer>,
    /// fusion affine (d_z + d_omega) -> d_lat, no batch norm
    pub fusion: Layer,
}

fn init_layer(rng: &mut ChaCha8Rng, out_dim: usize, fan_in: usize, bn: bool, bn_c: usize) -> Layer {
    let s = (1.0 / fan_in as f64).sqrt();
    let w: Vec<f64> = (0..out_dim * fan_in).map(|_| rng.random_range(-s..s)).collect();
    let b: Vec<f64> = (0..out_dim).map(|_| rng.random_range(-s..s)).collect();
    Layer {
        w: Tensor::from_vec(&[out_dim, fan_in], w),
        b: Tensor::from_vec(&[out_dim], b),
        bn: if bn { Some(BnParams::identity(bn_c)) } else { None },
    }
}

impl EncoderParams {
    /// Seeded initialization, uniform in +-sqrt(1/fan_in) per layer.
    pub fn init(config: EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = Vec::new();
        for i in 0..3 {
            let (cin, cout) = (CONV_CHANNELS[i], CONV_CHANNELS[i + 1]);
            conv.push(init_layer(&mut rng, cout, CONV_KERNEL * cin, true, cout));
        }
        let mut bathy_head = Vec::new();
        for i in 0..3 {
            bathy_head.push(init_layer(
                &mut rng,
                BATHY_HEAD_WIDTHS[i + 1],
                BATHY_HEAD_WIDTHS[i],
                true,
                BATHY_HEAD_WIDTHS[i + 1],
            ));
        }
        bathy_head.push(init_layer(&mut rng, config.d_omega, BATHY_HEAD_WIDTHS[3], false, 0));
        let mut feature = Vec::new();
        for i in 0..6 {
            feature.push(init_layer(
                &mut rng,
                FEATURE_WIDTHS[i + 1],
                FEATURE_WIDTHS[i],
                true,
                FEATURE_WIDTHS[i + 1],
            ));
        }
        feature.push(init_layer(&mut rng, config.d_z, FEATURE_WIDTHS[6], false, 0));
        let fusion = init_layer(&mut rng, config.d_lat, config.d_z + config.d_omega, false, 0);
        EncoderParams { config, conv, bathy_head, feature, fusion }
    }

    /// All-zero weights and biases (batch norm at identity): useful to reduce
    /// the model to a constant-input GP.
    pub fn zeroed(config: EncoderConfig) -> Self {
        let mut p = EncoderParams::init(config, 0);
        for layer in p
            .conv
            .iter_mut()
            .chain(p.bathy_head.iter_mut())
            .chain(p.feature.iter_mut())
            .chain(std::iter::once(&mut p.fusion))
        {
            layer.w = Tensor::zeros(layer.w.shape());
            layer.b = Tensor::zeros(layer.b.shape());
        }
        p
    }

    fn layers(&self) -> impl Iterator<Item = (&'static str, usize, &Layer)> {
        self.conv
            .iter()
            .enumerate()
            .map(|(i, l)| ("conv", i, l))
            .chain(self.bathy_head.iter().enumerate().map(|(i, l)| ("bathy_head", i, l)))
            .chain(self.feature.iter().enumerate().map(|(i, l)| ("feature", i, l)))
            .chain(std::iter::once(("fusion", 0usize, &self.fusion)))
    }

    /// Visits every trainable tensor in a fixed order: (name, tensor,
    /// decayed-by-weight-decay flag).
    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor, bool)) {
        for (group, i, layer) in self.layers() {
            f(format!("encoder.{group}{i}.weight"), &layer.w, true);
            f(format!("encoder.{group}{i}.bias"), &layer.b, true);
            if let Some(bn) = &layer.bn {
                f(format!("encoder.{group}{i}.bn.gamma"), &bn.gamma, true);
                f(format!("encoder.{group}{i}.bn.beta"), &bn.beta, true);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor, bool)) {
        let mut idx = 0usize;
        let mut apply = |name: String, t: &mut Tensor, decay: bool| {
            f(name, t, decay);
            idx += 1;
        };
        for (group, layers) in [
            ("conv", &mut self.conv),
            ("bathy_head", &mut self.bathy_head),
            ("feature", &mut self.feature),
        ] {
            for (i, layer) in layers.iter_mut().enumerate() {
                apply(format!("encoder.{group}{i}.weight"), &mut layer.w, true);
                apply(format!("encoder.{group}{i}.bias"), &mut layer.b, true);
                if let Some(bn) = &mut layer.bn {
                    apply(format!("encoder.{group}{i}.bn.gamma"), &mut bn.gamma, true);
                    apply(format!("encoder.{group}{i}.bn.beta"), &mut bn.beta, true);
                }
            }
        }
        apply("encoder.fusion0.weight".to_string(), &mut self.fusion.w, true);
        apply("encoder.fusion0.bias".to_string(), &mut self.fusion.b, true);
        let _ = idx;
    }

    /// Visits batch-norm running statistics (buffers, not trained).
    pub fn visit_buffers(&self, f: &mut dyn FnMut(String, &[f64])) {
        for (group, i, layer) in self.layers() {
            if let Some(bn) = &layer.bn {
                f(format!("encoder.{group}{i}.bn.running_mean"), &bn.running_mean);
                f(format!("encoder.{group}{i}.bn.running_var"), &bn.running_var);
            }
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(String, &mut Vec<f64>)) {
        for (group, layers) in [
            ("conv", &mut self.conv),
            ("bathy_head", &mut self.bathy_head),
            ("feature", &mut self.feature),
        ] {
            for (i, layer) in layers.iter_mut().enumerate() {
                if let Some(bn) = &mut layer.bn {
                    f(format!("encoder.{group}{i}.bn.running_mean"), &mut bn.running_mean);
                    f(format!("encoder.{group}{i}.bn.running_var"), &mut bn.running_var);
                }
            }
        }
    }

    /// Folds training-batch statistics into the running statistics, in the
    /// same order `forward_tape` emitted them.
    pub fn apply_bn_updates(&mut self, stats: &[BnBatchStats]) {
        let mut it = stats.iter();
        for layers in [&mut self.conv, &mut self.bathy_head, &mut self.feature] {
            for layer in layers.iter_mut() {
                if let Some(bn) = &mut layer.bn {
                    let s = it.next().expect("batch-stat count mismatch");
                    let n = s.count as f64;
                    let unbias = if s.count > 1 { n / (n - 1.0) } else { 1.0 };
                    for (r, m) in bn.running_mean.iter_mut().zip(&s.mean) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                    }
                    for (r, v) in bn.running_var.iter_mut().zip(&s.var) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * (v * unbias);
                    }
                }
            }
        }
        assert!(it.next().is_none(), "batch-stat count mismatch");
    }
}

/// Tape handles for every trainable encoder tensor.
pub struct EncoderVars {
    conv: Vec<LayerVars>,
    bathy_head: Vec<LayerVars>,
    feature: Vec<LayerVars>,
    fusion: LayerVars,
}

struct LayerVars {
    w: Var,
    b: Var,
    bn: Option<(Var, Var)>,
}

fn bind_layer(tape: &mut Tape, layer: &Layer) -> LayerVars {
    LayerVars {
        w: tape.leaf(layer.w.clone()),
        b: tape.leaf(layer.b.clone()),
        bn: layer
            .bn
            .as_ref()
            .map(|bn| (tape.leaf(bn.gamma.clone()), tape.leaf(bn.beta.clone()))),
    }
}

impl EncoderVars {
    pub fn bind(tape: &mut Tape, p: &EncoderParams) -> Self {
        EncoderVars {
            conv: p.conv.iter().map(|l| bind_layer(tape, l)).collect(),
            bathy_head: p.bathy_head.iter().map(|l| bind_layer(tape, l)).collect(),
            feature: p.feature.iter().map(|l| bind_layer(tape, l)).collect(),
            fusion: bind_layer(tape, &p.fusion),
        }
    }

    /// Leaf vars in the same order as `EncoderParams::visit`.
    pub fn visit(&self, f: &mut dyn FnMut(Var)) {
        for group in [&self.conv, &self.bathy_head, &self.feature] {
            for l in group {
                f(l.w);
                f(l.b);
                if let Some((g, b)) = l.bn {
                    f(g);
                    f(b);
                }
            }
        }
        f(self.fusion.w);
        f(self.fusion.b);
    }
}

fn bn_mode(train: bool, bn: &BnParams) -> BnMode {
    if train {
        BnMode::Train
    } else {
        BnMode::Eval { mean: bn.running_mean.clone(), var: bn.running_var.clone() }
    }
}

/// Builds the full encoder forward pass on the tape.
///
/// `features` is a `[B,7]` leaf of normalized geometry features, `bathy` a
/// `[B,128]` leaf of normalized profiles. Returns the `[B,d_lat]` latent var
/// and, in training mode, the batch statistics of every batch-norm layer in
/// forward order.
pub fn forward_tape(
    tape: &mut Tape,
    params: &EncoderParams,
    vars: &EncoderVars,
    features: Var,
    bathy: Var,
    train: bool,
) -> Result<(Var, Vec<BnBatchStats>)> {
    let bsz = tape.value(features).rows();
    if tape.value(features).cols() != 7 {
        return Err(Error::ShapeMismatch {
            what: "feature vector",
            expected: 7,
            got: tape.value(features).cols(),
        });
    }
    if tape.value(bathy).cols() != PROFILE_LEN {
        return Err(Error::ShapeMismatch {
            what: "bathymetry profile",
            expected: PROFILE_LEN,
            got: tape.value(bathy).cols(),
        });
    }
    let mut stats = Vec::new();

    // bathy conv stack, channels-last [B, 128, C]; conv -> SiLU -> BN
    let mut x = tape.reshape(bathy, &[bsz, PROFILE_LEN, 1]);
    for (layer, lv) in params.conv.iter().zip(&vars.conv) {
        let y = tape.conv1d(x, lv.w, lv.b, CONV_KERNEL);
        let a = tape.silu(y);
        let bn = layer.bn.as_ref().unwrap();
        let (g, b) = lv.bn.unwrap();
        let (z, st) = tape.batch_norm(a, g, b, bn_mode(train, bn));
        if let Some(st) = st {
            stats.push(st);
        }
        x = z;
    }
    let pooled = tape.avg_pool(x, POOLED_LEN)?;
    let mut h = tape.reshape(pooled, &[bsz, POOLED_LEN * CONV_CHANNELS[3]]);

    // bathy head: Linear -> SiLU -> BN, final layer plain
    for (layer, lv) in params.bathy_head.iter().zip(&vars.bathy_head) {
        let y = tape.linear(h, lv.w, lv.b);
        h = match (&layer.bn, lv.bn) {
            (Some(bn), Some((g, b))) => {
                let a = tape.silu(y);
                let (z, st) = tape.batch_norm(a, g, b, bn_mode(train, bn));
                if let Some(st) = st {
                    stats.push(st);
                }
                z
            }
            _ => y,
        };
    }
    let z_omega = h;

    // feature MLP: Linear -> BN -> GELU, final layer plain
    let mut h = features;
    for (layer, lv) in params.feature.iter().zip(&vars.feature) {
        let y = tape.linear(h, lv.w, lv.b);
        h = match (&layer.bn, lv.bn) {
            (Some(bn), Some((g, b))) => {
                let (z, st) = tape.batch_norm(y, g, b, bn_mode(train, bn));
                if let Some(st) = st {
                    stats.push(st);
                }
                tape.gelu(z)
            }
            _ => y,
        };
    }
    let z_g = h;

    // fusion: concat -> affine -> GELU
    let cat = tape.concat2(z_g, z_omega);
    let f = tape.linear(cat, vars.fusion.w, vars.fusion.b);
    let z_lat = tape.gelu(f);
    Ok((z_lat, stats))
}

fn bn_inv_std(bn: &BnParams) -> Vec<f64> {
    bn.running_var
        .iter()
        .map(|v| 1.0 / (v + crate::autodiff::BN_EPS).sqrt())
        .collect()
}

/// One fused pass: v = silu(x + conv_bias), then the frozen-stats
/// normalization affine. Dispatches to the AVX2 kernel when available.
fn silu_bn_inplace(buf: &mut [f64], bias: &[f64], bn: &BnParams) {
    let inv_std = bn_inv_std(bn);
    crate::simd::silu_bn_rows(
        buf,
        bn.gamma.numel(),
        &crate::simd::FusedBn {
            bias,
            mean: &bn.running_mean,
            inv_std: &inv_std,
            gamma: bn.gamma.data(),
            beta: bn.beta.data(),
        },
    );
}

/// One fused pass: frozen-stats normalization affine, then gelu.
fn bn_gelu_inplace(buf: &mut [f64], bn: &BnParams) {
    let c = bn.gamma.numel();
    let inv_std = bn_inv_std(bn);
    let (g, b) = (bn.gamma.data(), bn.beta.data());
    for row in buf.chunks_exact_mut(c) {
        for (j, x) in row.iter_mut().enumerate() {
            let v = crate::autodiff::bn_affine(*x, bn.running_mean[j], inv_std[j], g[j], b[j]);
            *x = math::gelu(v);
        }
    }
}

fn linear_forward_into(x: &[f64], bsz: usize, layer: &Layer, with_bias: bool, out: &mut [f64]) {
    let (nout, nin) = (layer.w.rows(), layer.w.cols());
    debug_assert_eq!(x.len(), bsz * nin);
    debug_assert_eq!(out.len(), bsz * nout);
    let beta = if with_bias {
        for row in out.chunks_exact_mut(nout) {
            row.copy_from_slice(layer.b.data());
        }
        1.0
    } else {
        0.0
    };
    crate::linalg::gemm(bsz, nin, nout, 1.0, x, false, layer.w.data(), true, beta, out);
}

/// Evaluation-mode batch forward pass (frozen batch-norm statistics) through
/// buffered kernels — no gradient bookkeeping. `features` is `[B,7]`,
/// `bathy` `[B,128]`. Bit-identical to the tape forward in eval mode: both
/// paths share the same conv, affine, normalization, and activation kernels.
pub fn encode_batch(params: &EncoderParams, features: &Tensor, bathy: &Tensor) -> Result<Tensor> {
    use crate::scratch::ScratchVec;
    let bsz = features.rows();
    if features.cols() != 7 {
        return Err(Error::ShapeMismatch { what: "feature vector", expected: 7, got: features.cols() });
    }
    if bathy.cols() != PROFILE_LEN {
        return Err(Error::ShapeMismatch {
            what: "bathymetry profile",
            expected: PROFILE_LEN,
            got: bathy.cols(),
        });
    }

    // bathy conv stack, channels-last; conv -> SiLU -> BN fused in place
    let mut x = ScratchVec::take(bsz * PROFILE_LEN);
    x.copy_from_slice(bathy.data());
    let mut c_in = 1usize;
    for layer in &params.conv {
        let o = layer.w.rows();
        let mut y = ScratchVec::take(bsz * PROFILE_LEN * o);
        crate::autodiff::conv1d_same_into(
            &x,
            bsz,
            PROFILE_LEN,
            c_in,
            layer.w.data(),
            o,
            None,
            CONV_KERNEL,
            &mut y,
        );
        silu_bn_inplace(&mut y, layer.b.data(), layer.bn.as_ref().unwrap());
        x = y;
        c_in = o;
    }
    // adaptive average pool 128 -> 16 (channels-last), then flatten
    let stride = PROFILE_LEN / POOLED_LEN;
    let c = c_in;
    let mut pooled = ScratchVec::take_zeroed(bsz * POOLED_LEN * c);
    for bi in 0..bsz {
        for oi in 0..POOLED_LEN {
            let dst = &mut pooled[(bi * POOLED_LEN + oi) * c..(bi * POOLED_LEN + oi + 1) * c];
            for li in (oi * stride)..((oi + 1) * stride) {
                let src = &x[(bi * PROFILE_LEN + li) * c..(bi * PROFILE_LEN + li + 1) * c];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
            for d in dst.iter_mut() {
                *d /= stride as f64;
            }
        }
    }

    // bathy head: Linear -> SiLU -> BN, final layer plain
    let mut h = pooled;
    for layer in &params.bathy_head {
        let mut y = ScratchVec::take(bsz * layer.w.rows());
        match &layer.bn {
            Some(bn) => {
                linear_forward_into(&h, bsz, layer, false, &mut y);
                silu_bn_inplace(&mut y, layer.b.data(), bn);
            }
            None => linear_forward_into(&h, bsz, layer, true, &mut y),
        }
        h = y;
    }
    let z_omega = h;

    // feature MLP: Linear -> BN -> GELU, final layer plain
    let mut h = ScratchVec::take(bsz * 7);
    h.copy_from_slice(features.data());
    for layer in &params.feature {
        let mut y = ScratchVec::take(bsz * layer.w.rows());
        linear_forward_into(&h, bsz, layer, true, &mut y);
        if let Some(bn) = &layer.bn {
            bn_gelu_inplace(&mut y, bn);
        }
        h = y;
    }
    let z_g = h;

    // fusion: concat -> affine -> GELU
    let (dz, dom) = (params.config.d_z, params.config.d_omega);
    let mut cat = ScratchVec::take(bsz * (dz + dom));
    for i in 0..bsz {
        cat[i * (dz + dom)..i * (dz + dom) + dz].copy_from_slice(&z_g[i * dz..(i + 1) * dz]);
        cat[i * (dz + dom) + dz..(i + 1) * (dz + dom)]
            .copy_from_slice(&z_omega[i * dom..(i + 1) * dom]);
    }
    let d_lat = params.config.d_lat;
    let mut z = vec![0.0; bsz * d_lat];
    linear_forward_into(&cat, bsz, &params.fusion, true, &mut z);
    for v in z.iter_mut() {
        *v = math::gelu(*v);
    }
    Ok(Tensor::from_vec(&[bsz, d_lat], z))
}

/// Bathymetry embedding of one normalized profile (evaluation mode).
pub fn bathy_encode(params: &EncoderParams, omega_norm: &[f64]) -> Result<Vec<f64>> {
    if omega_norm.len() != PROFILE_LEN {
        return Err(Error::ShapeMismatch {
            what: "bathymetry profile",
            expected: PROFILE_LEN,
            got: omega_norm.len(),
        });
    }
    let mut tape = Tape::new();
    let vars = EncoderVars::bind(&mut tape, params);
    let b = tape.leaf(Tensor::from_vec(&[1, PROFILE_LEN], omega_norm.to_vec()));
    let mut x = tape.reshape(b, &[1, PROFILE_LEN, 1]);
    for (layer, lv) in params.conv.iter().zip(&vars.conv) {
        let y = tape.conv1d(x, lv.w, lv.b, CONV_KERNEL);
        let a = tape.silu(y);
        let bn = layer.bn.as_ref().unwrap();
        let (g, bt) = lv.bn.unwrap();
        let (z, _) = tape.batch_norm(a, g, bt, bn_mode(false, bn));
        x = z;
    }
    let pooled = tape.avg_pool(x, POOLED_LEN)?;
    let mut h = tape.reshape(pooled, &[1, POOLED_LEN * CONV_CHANNELS[3]]);
    for (layer, lv) in params.bathy_head.iter().zip(&vars.bathy_head) {
        let y = tape.linear(h, lv.w, lv.b);
        h = match (&layer.bn, lv.bn) {
            (Some(bn), Some((g, bt))) => {
                let a = tape.silu(y);
                let (z, _) = tape.batch_norm(a, g, bt, bn_mode(false, bn));
                z
            }
            _ => y,
        };
    }
    Ok(tape.value(h).data().to_vec())
}

/// Geometry embedding of one normalized feature vector (evaluation mode).
pub fn feature_encode(params: &EncoderParams, features: &[f64; 7]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = EncoderVars::bind(&mut tape, params);
    let mut h = tape.leaf(Tensor::from_vec(&[1, 7], features.to_vec()));
    for (layer, lv) in params.feature.iter().zip(&vars.feature) {
        let y = tape.linear(h, lv.w, lv.b);
        h = match (&layer.bn, lv.bn) {
            (Some(bn), Some((g, bt))) => {
                let (z, _) = tape.batch_norm(y, g, bt, bn_mode(false, bn));
                tape.gelu(z)
            }
            _ => y,
        };
    }
    Ok(tape.value(h).data().to_vec())
}

/// Fusion of one geometry and one bathymetry embedding: concat, affine, GELU.
pub fn fuse(params: &EncoderParams, z_g: &[f64], z_omega: &[f64]) -> Result<Vec<f64>> {
    let cfg = params.config;
    if z_g.len() != cfg.d_z {
        return Err(Error::ShapeMismatch { what: "geometry embedding", expected: cfg.d_z, got: z_g.len() });
    }
    if z_omega.len() != cfg.d_omega {
        return Err(Error::ShapeMismatch {
            what: "bathymetry embedding",
            expected: cfg.d_omega,
            got: z_omega.len(),
        });
    }
    let mut cat = z_g.to_vec();
    cat.extend_from_slice(z_omega);
    let w = &params.fusion.w;
    let b = &params.fusion.b;
    let mut out = Vec::with_capacity(cfg.d_lat);
    for o in 0..cfg.d_lat {
        let mut s = b.data()[o];
        for (j, c) in cat.iter().enumerate() {
            s += w.data()[o * cat.len() + j] * c;
        }
        out.push(math::gelu(s));
    }
    Ok(out)
}
