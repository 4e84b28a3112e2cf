//! Reverse-mode automatic differentiation on a flat tape of tensor ops.
//!
//! The op set is exactly what the surrogate's loss needs: dense/conv layers,
//! batch normalization, the activations, the ARD product kernel, Cholesky
//! factorization, and triangular solves. Nodes are append-only, so inputs
//! always precede outputs and one reverse sweep propagates adjoints.
//!
//! The Cholesky adjoint follows the standard blocked identity
//! `A_bar = L^-T Phi(L^T L_bar) L^-1` (Phi keeps the lower triangle and
//! halves the diagonal), symmetrized at the end. Triangular-solve adjoints
//! use `B_bar = L^-T X_bar`, `L_bar = -tril(B_bar X^T)` and the transposed
//! analogue. Both are verified against central finite differences in the
//! tests below.

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Scalar activation math shared by the tape and the plain inference path.
pub mod math {
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;

    /// Branchless exponential core for |x| <= 709: Cody-Waite reduction plus
    /// a degree-12 Taylor polynomial, exponent applied through the bit
    /// pattern. Agrees with the system exp to a couple of ulps and
    /// auto-vectorizes inside slice loops. NaN propagates.
    #[inline]
    pub fn exp_core(x: f64) -> f64 {
        // magic-number round-to-int keeps the conversion SIMD-friendly
        let shifted = x * std::f64::consts::LOG2_E + 6_755_399_441_055_744.0;
        let kf = shifted - 6_755_399_441_055_744.0;
        let r = (x - kf * LN2_HI) - kf * LN2_LO;
        let p = 1.0
            + r * (1.0
                + r * (0.5
                    + r * (1.0 / 6.0
                        + r * (1.0 / 24.0
                            + r * (1.0 / 120.0
                                + r * (1.0 / 720.0
                                    + r * (1.0 / 5040.0
                                        + r * (1.0 / 40320.0
                                            + r * (1.0 / 362880.0
                                                + r * (1.0 / 3628800.0
                                                    + r * (1.0 / 39916800.0
                                                        + r * (1.0 / 479001600.0))))))))))));
        // 2^k assembled from the magic sum's low mantissa bits: the shifted
        // add leaves k's two's-complement low bits in place, and
        // (k << 52) + (1023 << 52) is exactly the exponent field. Logical
        // shifts only, so the whole function vectorizes on AVX2.
        let two_k = f64::from_bits((shifted.to_bits() << 52).wrapping_add(1023u64 << 52));
        p * two_k
    }

    /// Full-range exponential built on [`exp_core`].
    #[inline]
    pub fn exp_fast(x: f64) -> f64 {
        if !(x.abs() <= 708.0) {
            if x.is_nan() {
                return x;
            }
            return if x > 0.0 { f64::INFINITY } else { 0.0 };
        }
        exp_core(x)
    }

    #[inline]
    pub fn sigmoid(x: f64) -> f64 {
        // clamp keeps exp_core in range; sigmoid saturates far earlier
        let x = x.clamp(-708.0, 708.0);
        let e = exp_core(-x.abs());
        let s = e / (1.0 + e);
        if x >= 0.0 {
            1.0 - s
        } else {
            s
        }
    }

    #[inline]
    pub fn silu(x: f64) -> f64 {
        x * sigmoid(x)
    }

    #[inline]
    pub fn dsilu(x: f64) -> f64 {
        let s = sigmoid(x);
        s * (1.0 + x * (1.0 - s))
    }

    /// Standard normal CDF via the exact error function.
    #[inline]
    pub fn normal_cdf(x: f64) -> f64 {
        0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
    }

    #[inline]
    pub fn normal_pdf(x: f64) -> f64 {
        (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    /// Exact (Gaussian CDF) GELU, not the tanh approximation.
    #[inline]
    pub fn gelu(x: f64) -> f64 {
        x * normal_cdf(x)
    }

    #[inline]
    pub fn dgelu(x: f64) -> f64 {
        normal_cdf(x) + x * normal_pdf(x)
    }

    /// Numerically stable `ln(1 + e^x)`.
    #[inline]
    pub fn softplus(x: f64) -> f64 {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }

    /// Inverse of softplus: `ln(e^y - 1)`, stable for large y.
    #[inline]
    pub fn softplus_inv(y: f64) -> f64 {
        debug_assert!(y > 0.0);
        y + (-(-y).exp_m1()).ln()
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Batch-normalization statistics mode.
#[derive(Debug, Clone)]
pub enum BnMode {
    /// Per-batch statistics (couples samples in the batch).
    Train,
    /// Frozen running statistics; per-sample outputs are batch-independent.
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

/// Batch statistics computed by a training-mode batch-norm node, for the
/// caller to fold into running statistics.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    /// Biased (1/N) per-channel mean of the incoming batch.
    pub mean: Vec<f64>,
    /// Biased (1/N) per-channel variance of the incoming batch.
    pub var: Vec<f64>,
    /// Reduction count per channel.
    pub count: usize,
}

pub(crate) const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    MulElem(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    SubFromConst(usize),
    Exp(usize),
    Ln(usize),
    Recip(usize),
    Softplus(usize),
    Relu(usize),
    Silu(usize),
    Gelu(usize),
    SumAll(usize),
    MeanAll(usize),
    /// out = scalar * x, scalar a 1-element node
    MulScalar { scalar: usize, x: usize },
    /// out[i] = scalar for i in 0..len
    BroadcastScalar { scalar: usize },
    /// out = a*c1 + b*c2 with a,b scalar nodes and c1,c2 constant vectors
    LinComb2 { a: usize, b: usize, c1: Tensor, c2: Tensor },
    /// y = x W^T + bias, x:[B,in], w:[out,in], bias:[out]
    Linear { x: usize, w: usize, b: usize },
    /// channels-last conv: x:[B,L,C], w:[O,K*C], bias:[O], same padding
    Conv1d { x: usize, w: usize, b: usize, k: usize, pad: usize },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mode: BnMode,
        /// stats used in the forward pass (batch stats in Train mode)
        used_mean: Vec<f64>,
        used_var: Vec<f64>,
    },
    /// [B,L,C] -> [B,out_len,C], L divisible by out_len
    AvgPool { x: usize, out_len: usize },
    Reshape(usize),
    /// concat along the last dim of two rank-2 tensors with equal rows
    Concat2(usize, usize),
    /// out[i,j] = sum_d ((x[i,d]-y[j,d])/ls[d])^2
    ArdSqdist { x: usize, y: usize, ls: usize },
    /// sigma_f^2 * exp(-sqrt(qm)) * (1 + qr/(2 alpha))^(-alpha)
    ProductKernel { qm: usize, qr: usize, sig_f2: usize, alpha: usize },
    AddDiag(usize),
    Cholesky(usize),
    /// solves op(L) X = B with L from a Cholesky node
    TriSolve { l: usize, b: usize, transpose: bool },
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    /// [n,m] -> [m]: column sums of squares
    ColSumSquares(usize),
    SumSquares(usize),
    /// sum of ln(diag) of a square lower-triangular matrix
    LogDiagSum(usize),
    /// lower triangle passthrough with softplus on the diagonal, zero above
    LowerTriSoftplusDiag(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by a backward sweep. Only leaves retain gradients.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the loss with respect to a leaf var (zeros tensor if the
    /// leaf did not influence the loss).
    pub fn take(&mut self, v: Var, shape: &[usize]) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        debug_assert_eq!(out.shape(), self.value(b).shape());
        out.axpy(1.0, self.value(b));
        self.push(out, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        debug_assert_eq!(out.shape(), self.value(b).shape());
        out.axpy(-1.0, self.value(b));
        self.push(out, Op::Sub(a.0, b.0))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        debug_assert_eq!(av.shape(), bv.shape());
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(av.shape(), data);
        self.push(out, Op::MulElem(a.0, b.0))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let out = Tensor::from_vec(v.shape(), v.data().iter().map(|t| t * c).collect());
        self.push(out, Op::Scale(x.0, c))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let out = Tensor::from_vec(v.shape(), v.data().iter().map(|t| t + c).collect());
        self.push(out, Op::AddConst(x.0))
    }

    pub fn sub_from_const(&mut self, c: Tensor, x: Var) -> Var {
        let v = self.value(x);
        debug_assert_eq!(c.shape(), v.shape());
        let data = c.data().iter().zip(v.data()).map(|(a, b)| a - b).collect();
        let out = Tensor::from_vec(v.shape(), data);
        self.push(out, Op::SubFromConst(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::from_vec(v.shape(), v.data().iter().map(|t| t.exp()).collect());
        self.push(out, Op::Exp(x.0))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::from_vec(v.shape(), v.data().iter().map(|t| t.ln()).collect());
        self.push(out, Op::Ln(x.0))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::from_vec(v.shape(), v.data().iter().map(|t| 1.0 / t).collect());
        self.push(out, Op::Recip(x.0))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::from_vec(v.shape(), v.data().iter().map(|&t| math::softplus(t)).collect());
        self.push(out, Op::Softplus(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::from_vec(v.shape(), v.data().iter().map(|t| t.max(0.0)).collect());
        self.push(out, Op::Relu(x.0))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::from_vec(v.shape(), v.data().iter().map(|&t| math::silu(t)).collect());
        self.push(out, Op::Silu(x.0))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::from_vec(v.shape(), v.data().iter().map(|&t| math::gelu(t)).collect());
        self.push(out, Op::Gelu(x.0))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x.0))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x.0))
    }

    pub fn mul_scalar(&mut self, scalar: Var, x: Var) -> Var {
        let s = self.value(scalar).item();
        let v = self.value(x);
        let out = Tensor::from_vec(v.shape(), v.data().iter().map(|t| t * s).collect());
        self.push(out, Op::MulScalar { scalar: scalar.0, x: x.0 })
    }

    pub fn broadcast_scalar(&mut self, scalar: Var, len: usize) -> Var {
        let s = self.value(scalar).item();
        self.push(Tensor::full(&[len], s), Op::BroadcastScalar { scalar: scalar.0 })
    }

    /// `a*c1 + b*c2` with scalar vars `a`, `b` and constant coefficient
    /// vectors (the physics-mean evaluation over a batch).
    pub fn lin_comb2(&mut self, a: Var, b: Var, c1: Tensor, c2: Tensor) -> Var {
        debug_assert_eq!(c1.shape(), c2.shape());
        let av = self.value(a).item();
        let bv = self.value(b).item();
        let data = c1
            .data()
            .iter()
            .zip(c2.data())
            .map(|(x, y)| av * x + bv * y)
            .collect();
        let out = Tensor::from_vec(c1.shape(), data);
        self.push(out, Op::LinComb2 { a: a.0, b: b.0, c1, c2 })
    }

    /// Dense layer `y = x W^T + bias` with x `[B,in]`, w `[out,in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (bsz, nin) = (xv.rows(), xv.cols());
        let nout = wv.rows();
        debug_assert_eq!(wv.cols(), nin);
        debug_assert_eq!(bv.numel(), nout);
        let mut out = vec![0.0; bsz * nout];
        for r in 0..bsz {
            out[r * nout..(r + 1) * nout].copy_from_slice(bv.data());
        }
        linalg::gemm(bsz, nin, nout, 1.0, xv.data(), false, wv.data(), true, 1.0, &mut out);
        self.push(Tensor::from_vec(&[bsz, nout], out), Op::Linear { x: x.0, w: w.0, b: b.0 })
    }

    /// Channels-last 1-D convolution with same padding. x `[B,L,C]`,
    /// w `[O, K*C]` (tap-major columns), bias `[O]`; output `[B,L,O]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, k: usize) -> Var {
        assert!(k % 2 == 1, "same padding requires odd kernel");
        let pad = (k - 1) / 2;
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (bsz, l, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let o = wv.rows();
        debug_assert_eq!(wv.cols(), k * c);
        debug_assert_eq!(bv.numel(), o);
        let out = conv1d_same(xv.data(), bsz, l, c, wv.data(), o, bv.data(), k);
        self.push(
            Tensor::from_vec(&[bsz, l, o], out),
            Op::Conv1d { x: x.0, w: w.0, b: b.0, k, pad },
        )
    }

    /// Batch normalization over the last dimension (channels). Returns the
    /// normalized output and, in training mode, the batch statistics for
    /// running-average updates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
    ) -> (Var, Option<BnBatchStats>) {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap();
        let n = xv.numel() / c;
        let gv = self.value(gamma);
        let bv = self.value(beta);
        debug_assert_eq!(gv.numel(), c);
        debug_assert_eq!(bv.numel(), c);

        let (used_mean, used_var, stats) = match &mode {
            BnMode::Train => {
                assert!(n > 1, "training-mode batch norm needs more than one sample");
                let mut mean = vec![0.0; c];
                for row in xv.data().chunks_exact(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                for m in mean.iter_mut() {
                    *m /= n as f64;
                }
                let mut var = vec![0.0; c];
                for row in xv.data().chunks_exact(c) {
                    for ((v, m), xr) in var.iter_mut().zip(&mean).zip(row) {
                        let d = xr - m;
                        *v += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v /= n as f64;
                }
                let stats = BnBatchStats { mean: mean.clone(), var: var.clone(), count: n };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                debug_assert_eq!(mean.len(), c);
                debug_assert_eq!(var.len(), c);
                (mean.clone(), var.clone(), None)
            }
        };

        let inv_std: Vec<f64> = used_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(c) {
            for (j, &xr) in row.iter().enumerate() {
                out.push(bn_affine(xr, used_mean[j], inv_std[j], gv.data()[j], bv.data()[j]));
            }
        }
        let shape = xv.shape().to_vec();
        let var = self.push(
            Tensor::from_vec(&shape, out),
            Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, mode, used_mean, used_var },
        );
        (var, stats)
    }

    /// Adaptive average pooling `[B,L,C] -> [B,out_len,C]`; L must divide
    /// evenly by out_len.
    pub fn avg_pool(&mut self, x: Var, out_len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (bsz, l, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if l % out_len != 0 {
            return Err(Error::ShapeMismatch { what: "avg_pool input length", expected: out_len, got: l });
        }
        let s = l / out_len;
        let mut out = vec![0.0; bsz * out_len * c];
        for bi in 0..bsz {
            for oi in 0..out_len {
                let dst = &mut out[(bi * out_len + oi) * c..(bi * out_len + oi + 1) * c];
                for li in (oi * s)..((oi + 1) * s) {
                    let src = &xv.data()[(bi * l + li) * c..(bi * l + li + 1) * c];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
                for d in dst.iter_mut() {
                    *d /= s as f64;
                }
            }
        }
        Ok(self.push(Tensor::from_vec(&[bsz, out_len, c], out), Op::AvgPool { x: x.0, out_len }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).reshaped(shape);
        self.push(out, Op::Reshape(x.0))
    }

    pub fn concat2(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let rows = av.rows();
        debug_assert_eq!(rows, bv.rows());
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        self.push(Tensor::from_vec(&[rows, ca + cb], out), Op::Concat2(a.0, b.0))
    }

    /// ARD-weighted squared distances: out[i,j] = sum_d ((x[i,d]-y[j,d])/ls[d])^2.
    pub fn ard_sqdist(&mut self, x: Var, y: Var, ls: Var) -> Var {
        let xv = self.value(x);
        let yv = self.value(y);
        let lv = self.value(ls);
        let d = xv.cols();
        debug_assert_eq!(yv.cols(), d);
        debug_assert_eq!(lv.numel(), d);
        let (n, m) = (xv.rows(), yv.rows());
        let inv2: Vec<f64> = lv.data().iter().map(|l| 1.0 / (l * l)).collect();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let xi = &xv.data()[i * d..(i + 1) * d];
            for j in 0..m {
                let yj = &yv.data()[j * d..(j + 1) * d];
                let mut s = 0.0;
                for k in 0..d {
                    let diff = xi[k] - yj[k];
                    s += diff * diff * inv2[k];
                }
                out[i * m + j] = s;
            }
        }
        self.push(Tensor::from_vec(&[n, m], out), Op::ArdSqdist { x: x.0, y: y.0, ls: ls.0 })
    }

    /// Product kernel `sig_f2 * exp(-sqrt(qm)) * (1 + qr/(2 alpha))^(-alpha)`
    /// applied elementwise to the two scaled-distance matrices.
    pub fn product_kernel(&mut self, qm: Var, qr: Var, sig_f2: Var, alpha: Var) -> Var {
        let qmv = self.value(qm);
        let qrv = self.value(qr);
        debug_assert_eq!(qmv.shape(), qrv.shape());
        let s2 = self.value(sig_f2).item();
        let al = self.value(alpha).item();
        // exp(-sqrt(qm)) * (1 + qr/(2a))^(-a) merged into a single exponential
        let data: Vec<f64> = qmv
            .data()
            .iter()
            .zip(qrv.data())
            .map(|(&m, &r)| s2 * math::exp_fast(-(m.sqrt() + al * (r / (2.0 * al)).ln_1p())))
            .collect();
        let out = Tensor::from_vec(qmv.shape(), data);
        self.push(out, Op::ProductKernel { qm: qm.0, qr: qr.0, sig_f2: sig_f2.0, alpha: alpha.0 })
    }

    pub fn add_diag(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.rows();
        debug_assert_eq!(xv.cols(), n);
        let mut out = xv.clone();
        for i in 0..n {
            out.data_mut()[i * n + i] += eps;
        }
        self.push(out, Op::AddDiag(x.0))
    }

    /// Cholesky factorization node. The input must already carry any jitter;
    /// failure here means the caller's jitter escalation was exhausted.
    pub fn cholesky(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.rows();
        let l = linalg::cholesky(xv.data(), n)
            .ok_or(Error::FailureEscalation { jitter_cap: 0.0 })?;
        Ok(self.push(Tensor::from_vec(&[n, n], l), Op::Cholesky(x.0)))
    }

    /// Solves `L X = B` (or `L^T X = B` when `transpose`).
    pub fn tri_solve(&mut self, l: Var, b: Var, transpose: bool) -> Var {
        let lv = self.value(l);
        let bv = self.value(b);
        let n = lv.rows();
        let m = bv.cols();
        debug_assert_eq!(bv.rows(), n);
        let x = if transpose {
            linalg::solve_lower_transpose(lv.data(), n, bv.data(), m)
        } else {
            linalg::solve_lower(lv.data(), n, bv.data(), m)
        };
        self.push(Tensor::from_vec(&[n, m], x), Op::TriSolve { l: l.0, b: b.0, transpose })
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, k) = if ta { (av.cols(), av.rows()) } else { (av.rows(), av.cols()) };
        let (kb, n) = if tb { (bv.cols(), bv.rows()) } else { (bv.rows(), bv.cols()) };
        debug_assert_eq!(k, kb);
        let out = linalg::matmul(m, k, n, av.data(), ta, bv.data(), tb);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul { a: a.0, b: b.0, ta, tb })
    }

    pub fn col_sum_squares(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                let v = xv.data()[i * m + j];
                out[j] += v * v;
            }
        }
        self.push(Tensor::from_vec(&[m], out), Op::ColSumSquares(x.0))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = linalg::sum_squares(self.value(x).data());
        self.push(Tensor::scalar(s), Op::SumSquares(x.0))
    }

    pub fn log_diag_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.rows();
        let s: f64 = (0..n).map(|i| xv.data()[i * n + i].ln()).sum();
        self.push(Tensor::scalar(s), Op::LogDiagSum(x.0))
    }

    /// Maps a raw square matrix to a valid lower-triangular factor: strict
    /// lower passthrough, softplus on the diagonal, zeros above.
    pub fn lower_tri_softplus_diag(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.rows();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                out[i * n + j] = if i == j {
                    math::softplus(xv.data()[i * n + i])
                } else {
                    xv.data()[i * n + j]
                };
            }
        }
        self.push(Tensor::from_vec(&[n, n], out), Op::LowerTriSoftplusDiag(x.0))
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], idx: usize, contribution: Tensor) {
        match &mut grads[idx] {
            Some(t) => t.axpy(1.0, &contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                let mut neg = g.clone();
                for v in neg.data_mut() {
                    *v = -*v;
                }
                self.acc(grads, *b, neg);
            }
            Op::MulElem(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let ga = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
                );
                let gb = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                );
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Scale(x, c) => {
                let gx = Tensor::from_vec(g.shape(), g.data().iter().map(|t| t * c).collect());
                self.acc(grads, *x, gx);
            }
            Op::AddConst(x) => self.acc(grads, *x, g.clone()),
            Op::SubFromConst(x) => {
                let mut neg = g.clone();
                for v in neg.data_mut() {
                    *v = -*v;
                }
                self.acc(grads, *x, neg);
            }
            Op::Exp(x) => {
                let out = &node.value;
                let gx = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(out.data()).map(|(gg, o)| gg * o).collect(),
                );
                self.acc(grads, *x, gx);
            }
            Op::Ln(x) => {
                let xv = &self.nodes[*x].value;
                let gx = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(xv.data()).map(|(gg, v)| gg / v).collect(),
                );
                self.acc(grads, *x, gx);
            }
            Op::Recip(x) => {
                let xv = &self.nodes[*x].value;
                let gx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gg, v)| -gg / (v * v))
                        .collect(),
                );
                self.acc(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let xv = &self.nodes[*x].value;
                let gx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gg, &v)| gg * math::sigmoid(v))
                        .collect(),
                );
                self.acc(grads, *x, gx);
            }
            Op::Relu(x) => {
                let xv = &self.nodes[*x].value;
                let gx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gg, &v)| if v > 0.0 { *gg } else { 0.0 })
                        .collect(),
                );
                self.acc(grads, *x, gx);
            }
            Op::Silu(x) => {
                let xv = &self.nodes[*x].value;
                let gx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gg, &v)| gg * math::dsilu(v))
                        .collect(),
                );
                self.acc(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let xv = &self.nodes[*x].value;
                let gx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gg, &v)| gg * math::dgelu(v))
                        .collect(),
                );
                self.acc(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let xv = &self.nodes[*x].value;
                self.acc(grads, *x, Tensor::full(xv.shape(), g.item()));
            }
            Op::MeanAll(x) => {
                let xv = &self.nodes[*x].value;
                self.acc(grads, *x, Tensor::full(xv.shape(), g.item() / xv.numel() as f64));
            }
            Op::MulScalar { scalar, x } => {
                let s = self.nodes[*scalar].value.item();
                let xv = &self.nodes[*x].value;
                let gx = Tensor::from_vec(g.shape(), g.data().iter().map(|t| t * s).collect());
                let gs: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                self.acc(grads, *x, gx);
                self.acc(grads, *scalar, Tensor::scalar(gs));
            }
            Op::BroadcastScalar { scalar } => {
                let gs: f64 = g.data().iter().sum();
                self.acc(grads, *scalar, Tensor::scalar(gs));
            }
            Op::LinComb2 { a, b, c1, c2 } => {
                let ga: f64 = g.data().iter().zip(c1.data()).map(|(x, y)| x * y).sum();
                let gb: f64 = g.data().iter().zip(c2.data()).map(|(x, y)| x * y).sum();
                self.acc(grads, *a, Tensor::scalar(ga));
                self.acc(grads, *b, Tensor::scalar(gb));
            }
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let (bsz, nin) = (xv.rows(), xv.cols());
                let nout = wv.rows();
                // x_bar += g W ; w_bar += g^T x ; b_bar += colsum g
                let gx = linalg::matmul(bsz, nout, nin, g.data(), false, wv.data(), false);
                self.acc(grads, *x, Tensor::from_vec(&[bsz, nin], gx));
                let gw = linalg::matmul(nout, bsz, nin, g.data(), true, xv.data(), false);
                self.acc(grads, *w, Tensor::from_vec(&[nout, nin], gw));
                let mut gb = vec![0.0; nout];
                for r in 0..bsz {
                    for j in 0..nout {
                        gb[j] += g.data()[r * nout + j];
                    }
                }
                self.acc(grads, *b, Tensor::from_vec(&[nout], gb));
            }
            Op::Conv1d { x, w, b, k, pad } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let (bsz, l, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let o = wv.rows();
                let rows = bsz * l;
                let cols = im2col(xv.data(), bsz, l, c, *k, *pad);
                // w_bar += g^T cols
                let gw = linalg::matmul(o, rows, k * c, g.data(), true, &cols, false);
                self.acc(grads, *w, Tensor::from_vec(&[o, k * c], gw));
                // bias
                let mut gb = vec![0.0; o];
                for r in 0..rows {
                    for j in 0..o {
                        gb[j] += g.data()[r * o + j];
                    }
                }
                self.acc(grads, *b, Tensor::from_vec(&[o], gb));
                // x_bar via col2im of g W
                let gcols = linalg::matmul(rows, o, k * c, g.data(), false, wv.data(), false);
                let mut gx = vec![0.0; bsz * l * c];
                col2im_add(&gcols, bsz, l, c, *k, *pad, &mut gx);
                self.acc(grads, *x, Tensor::from_vec(&[bsz, l, c], gx));
            }
            Op::BatchNorm { x, gamma, beta, mode, used_mean, used_var } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gamma].value;
                let c = *xv.shape().last().unwrap();
                let n = xv.numel() / c;
                let inv_std: Vec<f64> =
                    used_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                // accumulated per-channel sums of g and g*xhat
                for (row_x, row_g) in xv.data().chunks_exact(c).zip(g.data().chunks_exact(c)) {
                    for j in 0..c {
                        let xhat = (row_x[j] - used_mean[j]) * inv_std[j];
                        dgamma[j] += row_g[j] * xhat;
                        dbeta[j] += row_g[j];
                    }
                }

                let mut gx = Vec::with_capacity(xv.numel());
                match mode {
                    BnMode::Eval { .. } => {
                        for row_g in g.data().chunks_exact(c) {
                            for j in 0..c {
                                gx.push(row_g[j] * gv.data()[j] * inv_std[j]);
                            }
                        }
                    }
                    BnMode::Train => {
                        let nn = n as f64;
                        for (row_x, row_g) in
                            xv.data().chunks_exact(c).zip(g.data().chunks_exact(c))
                        {
                            for j in 0..c {
                                let xhat = (row_x[j] - used_mean[j]) * inv_std[j];
                                let t = row_g[j] - dbeta[j] / nn - xhat * dgamma[j] / nn;
                                gx.push(gv.data()[j] * inv_std[j] * t);
                            }
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), gx));
                self.acc(grads, *gamma, Tensor::from_vec(&[c], dgamma));
                self.acc(grads, *beta, Tensor::from_vec(&[c], dbeta));
            }
            Op::AvgPool { x, out_len } => {
                let xv = &self.nodes[*x].value;
                let (bsz, l, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let s = l / out_len;
                let mut gx = vec![0.0; bsz * l * c];
                for bi in 0..bsz {
                    for li in 0..l {
                        let oi = li / s;
                        let src = &g.data()[(bi * out_len + oi) * c..(bi * out_len + oi + 1) * c];
                        let dst = &mut gx[(bi * l + li) * c..(bi * l + li + 1) * c];
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d += v / s as f64;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), gx));
            }
            Op::Reshape(x) => {
                let xv = &self.nodes[*x].value;
                self.acc(grads, *x, g.reshaped(xv.shape()));
            }
            Op::Concat2(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let rows = av.rows();
                let (ca, cb) = (av.cols(), bv.cols());
                let mut ga = vec![0.0; rows * ca];
                let mut gb = vec![0.0; rows * cb];
                for r in 0..rows {
                    let row = &g.data()[r * (ca + cb)..(r + 1) * (ca + cb)];
                    ga[r * ca..(r + 1) * ca].copy_from_slice(&row[..ca]);
                    gb[r * cb..(r + 1) * cb].copy_from_slice(&row[ca..]);
                }
                self.acc(grads, *a, Tensor::from_vec(&[rows, ca], ga));
                self.acc(grads, *b, Tensor::from_vec(&[rows, cb], gb));
            }
            Op::ArdSqdist { x, y, ls } => {
                let xv = &self.nodes[*x].value;
                let yv = &self.nodes[*y].value;
                let lv = &self.nodes[*ls].value;
                let d = xv.cols();
                let (n, m) = (xv.rows(), yv.rows());
                let inv2: Vec<f64> = lv.data().iter().map(|l| 1.0 / (l * l)).collect();
                let mut gx = vec![0.0; n * d];
                let mut gy = vec![0.0; m * d];
                let mut gl = vec![0.0; d];
                for i in 0..n {
                    let xi = &xv.data()[i * d..(i + 1) * d];
                    for j in 0..m {
                        let yj = &yv.data()[j * d..(j + 1) * d];
                        let gg = g.data()[i * m + j];
                        if gg == 0.0 {
                            continue;
                        }
                        for kk in 0..d {
                            let diff = xi[kk] - yj[kk];
                            let t = 2.0 * diff * inv2[kk] * gg;
                            gx[i * d + kk] += t;
                            gy[j * d + kk] -= t;
                            // d/d_ls of diff^2/ls^2 = -2 diff^2 / ls^3
                            gl[kk] -= 2.0 * diff * diff * inv2[kk] / lv.data()[kk] * gg;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(&[n, d], gx));
                self.acc(grads, *y, Tensor::from_vec(&[m, d], gy));
                self.acc(grads, *ls, Tensor::from_vec(&[d], gl));
            }
            Op::ProductKernel { qm, qr, sig_f2, alpha } => {
                let qmv = &self.nodes[*qm].value;
                let qrv = &self.nodes[*qr].value;
                let s2 = self.nodes[*sig_f2].value.item();
                let al = self.nodes[*alpha].value.item();
                let kv = &node.value;
                let numel = kv.numel();
                let mut gqm = vec![0.0; numel];
                let mut gqr = vec![0.0; numel];
                let mut gs2 = 0.0;
                let mut gal = 0.0;
                for idx in 0..numel {
                    let gg = g.data()[idx];
                    if gg == 0.0 {
                        continue;
                    }
                    let k = kv.data()[idx];
                    let m = qmv.data()[idx];
                    let r = qrv.data()[idx];
                    let u = r / (2.0 * al);
                    let base = 1.0 + u;
                    gs2 += gg * k / s2;
                    // d k / d qm = -k / (2 sqrt(qm)); zero in the coincident limit
                    if m > 1e-300 {
                        gqm[idx] = -gg * k / (2.0 * m.sqrt());
                    }
                    gqr[idx] = -gg * k / (2.0 * base);
                    gal += gg * k * (u / base - u.ln_1p());
                }
                self.acc(grads, *qm, Tensor::from_vec(qmv.shape(), gqm));
                self.acc(grads, *qr, Tensor::from_vec(qrv.shape(), gqr));
                self.acc(grads, *sig_f2, Tensor::scalar(gs2));
                self.acc(grads, *alpha, Tensor::scalar(gal));
            }
            Op::AddDiag(x) => self.acc(grads, *x, g.clone()),
            Op::Cholesky(x) => {
                // A_bar = L^-T Phi(L^T L_bar) L^-1, then symmetrize.
                let lv = &node.value;
                let n = lv.rows();
                let mut phi = linalg::matmul(n, n, n, lv.data(), true, g.data(), false);
                for i in 0..n {
                    for j in 0..n {
                        if j > i {
                            phi[i * n + j] = 0.0;
                        } else if j == i {
                            phi[i * n + j] *= 0.5;
                        }
                    }
                }
                // Q = L^-T Phi
                let q = linalg::solve_lower_transpose(lv.data(), n, &phi, n);
                // S = Q L^-1  =>  S^T = L^-T Q^T
                let mut qt = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        qt[j * n + i] = q[i * n + j];
                    }
                }
                let st = linalg::solve_lower_transpose(lv.data(), n, &qt, n);
                // a_bar = (S + S^T)/2 ; st holds S^T
                let mut ga = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        ga[i * n + j] = 0.5 * (st[j * n + i] + st[i * n + j]);
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(&[n, n], ga));
            }
            Op::TriSolve { l, b, transpose } => {
                let lv = &self.nodes[*l].value;
                let xv = &node.value; // solution X
                let n = lv.rows();
                let m = xv.cols();
                let (gb, gl) = if !*transpose {
                    // L X = B: b_bar = L^-T g ; l_bar = -tril(b_bar X^T)
                    let gb = linalg::solve_lower_transpose(lv.data(), n, g.data(), m);
                    let mut gl = linalg::matmul(n, m, n, &gb, false, xv.data(), true);
                    for v in gl.iter_mut() {
                        *v = -*v;
                    }
                    (gb, gl)
                } else {
                    // L^T X = B: b_bar = L^-1 g ; l_bar = -tril(X b_bar^T)
                    let gb = linalg::solve_lower(lv.data(), n, g.data(), m);
                    let mut gl = linalg::matmul(n, m, n, xv.data(), false, &gb, true);
                    for v in gl.iter_mut() {
                        *v = -*v;
                    }
                    (gb, gl)
                };
                let mut gl_masked = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..=i {
                        gl_masked[i * n + j] = gl[i * n + j];
                    }
                }
                self.acc(grads, *b, Tensor::from_vec(&[n, m], gb));
                self.acc(grads, *l, Tensor::from_vec(&[n, n], gl_masked));
            }
            Op::MatMul { a, b, ta, tb } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (m, k) = if *ta { (av.cols(), av.rows()) } else { (av.rows(), av.cols()) };
                let n = if *tb { bv.rows() } else { bv.cols() };
                // gradient wrt stored a
                let ga = if !*ta {
                    // a_bar = g op(B)^T
                    if !*tb {
                        linalg::matmul(m, n, k, g.data(), false, bv.data(), true)
                    } else {
                        linalg::matmul(m, n, k, g.data(), false, bv.data(), false)
                    }
                } else {
                    // stored a is k x m: a_bar_stored = op(B) g^T
                    if !*tb {
                        linalg::matmul(k, n, m, bv.data(), false, g.data(), true)
                    } else {
                        linalg::matmul(k, n, m, bv.data(), true, g.data(), true)
                    }
                };
                let gb = if !*tb {
                    // b_bar = op(A)^T g
                    if !*ta {
                        linalg::matmul(k, m, n, av.data(), true, g.data(), false)
                    } else {
                        linalg::matmul(k, m, n, av.data(), false, g.data(), false)
                    }
                } else {
                    // stored b is n x k: b_bar_stored = g^T op(A)
                    if !*ta {
                        linalg::matmul(n, m, k, g.data(), true, av.data(), false)
                    } else {
                        linalg::matmul(n, m, k, g.data(), true, av.data(), true)
                    }
                };
                self.acc(grads, *a, Tensor::from_vec(av.shape(), ga));
                self.acc(grads, *b, Tensor::from_vec(bv.shape(), gb));
            }
            Op::ColSumSquares(x) => {
                let xv = &self.nodes[*x].value;
                let (n, m) = (xv.rows(), xv.cols());
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        gx[i * m + j] = 2.0 * xv.data()[i * m + j] * g.data()[j];
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(&[n, m], gx));
            }
            Op::SumSquares(x) => {
                let xv = &self.nodes[*x].value;
                let gg = g.item();
                let gx = Tensor::from_vec(
                    xv.shape(),
                    xv.data().iter().map(|v| 2.0 * v * gg).collect(),
                );
                self.acc(grads, *x, gx);
            }
            Op::LogDiagSum(x) => {
                let xv = &self.nodes[*x].value;
                let n = xv.rows();
                let gg = g.item();
                let mut gx = vec![0.0; n * n];
                for i in 0..n {
                    gx[i * n + i] = gg / xv.data()[i * n + i];
                }
                self.acc(grads, *x, Tensor::from_vec(&[n, n], gx));
            }
            Op::LowerTriSoftplusDiag(x) => {
                let xv = &self.nodes[*x].value;
                let n = xv.rows();
                let mut gx = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..=i {
                        gx[i * n + j] = if i == j {
                            g.data()[i * n + i] * math::sigmoid(xv.data()[i * n + i])
                        } else {
                            g.data()[i * n + j]
                        };
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(&[n, n], gx));
            }
        }
    }
}

/// Normalized affine: `((x - mean) * inv_std) * gamma + beta`. Shared by the
/// tape and eval paths so both produce identical bits.
#[inline]
pub(crate) fn bn_affine(x: f64, mean: f64, inv_std: f64, gamma: f64, beta: f64) -> f64 {
    ((x - mean) * inv_std) * gamma + beta
}

/// Direct interior convolution with output-channel accumulators held in
/// registers; `O` is the compile-time output width. Weights come transposed
/// as `[k*c, O]` so the inner loop broadcasts one input value against a
/// contiguous weight row.
fn conv_rows_direct<const O: usize>(
    x: &[f64],
    rows_from: usize,
    rows_to: usize,
    c: usize,
    wt: &[f64],
    bias: &[f64],
    k: usize,
    pad: usize,
    out: &mut [f64],
) {
    let kc = k * c;
    let mut acc = [0.0f64; O];
    for r in rows_from..rows_to {
        acc.copy_from_slice(&bias[..O]);
        let window = &x[(r - pad) * c..(r - pad) * c + kc];
        for (j, &xv) in window.iter().enumerate() {
            let wrow = &wt[j * O..(j + 1) * O];
            for oc in 0..O {
                acc[oc] += xv * wrow[oc];
            }
        }
        out[r * O..(r + 1) * O].copy_from_slice(&acc);
    }
}

fn conv_rows_generic(
    x: &[f64],
    rows_from: usize,
    rows_to: usize,
    c: usize,
    wt: &[f64],
    bias: &[f64],
    k: usize,
    pad: usize,
    o: usize,
    out: &mut [f64],
) {
    let kc = k * c;
    let mut acc = vec![0.0f64; o];
    for r in rows_from..rows_to {
        acc.copy_from_slice(bias);
        let window = &x[(r - pad) * c..(r - pad) * c + kc];
        for (j, &xv) in window.iter().enumerate() {
            let wrow = &wt[j * o..(j + 1) * o];
            for (a, wv) in acc.iter_mut().zip(wrow) {
                *a += xv * wv;
            }
        }
        out[r * o..(r + 1) * o].copy_from_slice(&acc);
    }
}

/// Same-padding channels-last convolution forward, shared by the tape op and
/// the buffered inference path. Allocating wrapper around
/// [`conv1d_same_into`].
pub fn conv1d_same(
    x: &[f64],
    bsz: usize,
    l: usize,
    c: usize,
    w: &[f64],
    o: usize,
    bias: &[f64],
    k: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; bsz * l * o];
    conv1d_same_into(x, bsz, l, c, w, o, Some(bias), k, &mut out);
    out
}

/// Same-padding channels-last convolution into a caller-provided buffer
/// (fully overwritten).
///
/// In channels-last layout the k*c-tap window of interior row r is the
/// contiguous slice `x[(r-pad)*c ..]`, so the interior runs either as a
/// register-blocked direct kernel (single input channel) or as patch-row
/// memcpys plus one big GEMM. Rows whose window crosses a sample boundary or
/// the buffer edge are recomputed exactly with zero padding afterwards.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_same_into(
    x: &[f64],
    bsz: usize,
    l: usize,
    c: usize,
    w: &[f64],
    o: usize,
    bias: Option<&[f64]>,
    k: usize,
    out: &mut [f64],
) {
    let zeros;
    let (bias, prefill) = match bias {
        Some(b) => (b, true),
        None => {
            zeros = vec![0.0; o];
            (&zeros[..], false)
        }
    };
    let pad = (k - 1) / 2;
    debug_assert!(l > 2 * pad, "signal shorter than the kernel");
    let rows = bsz * l;
    let kc = k * c;
    debug_assert_eq!(out.len(), rows * o);
    // transpose weights to [k*c, O] for broadcast-friendly inner loops
    let mut wt = crate::scratch::ScratchVec::take(kc * o);
    for oc in 0..o {
        for j in 0..kc {
            wt[j * o + oc] = w[oc * kc + j];
        }
    }
    let (from, to) = (pad, rows - pad);
    if c == 1 {
        // tiny k*c: the register-blocked direct kernel beats GEMM packing
        match o {
            8 => conv_rows_direct::<8>(x, from, to, c, &wt, bias, k, pad, out),
            16 => conv_rows_direct::<16>(x, from, to, c, &wt, bias, k, pad, out),
            32 => conv_rows_direct::<32>(x, from, to, c, &wt, bias, k, pad, out),
            64 => conv_rows_direct::<64>(x, from, to, c, &wt, bias, k, pad, out),
            _ => conv_rows_generic(x, from, to, c, &wt, bias, k, pad, o, out),
        }
    } else {
        // interior windows are contiguous kc-slices: materialize patch rows
        // with straight memcpy and GEMM, tiled so the patch block stays
        // cache-resident
        const BLOCK_ROWS: usize = 4096;
        let mut cols = crate::scratch::ScratchVec::take(BLOCK_ROWS.min(to - from) * kc);
        let mut block_from = from;
        while block_from < to {
            let block_to = (block_from + BLOCK_ROWS).min(to);
            let m = block_to - block_from;
            for (i, row) in cols[..m * kc].chunks_exact_mut(kc).enumerate() {
                let start = (block_from - pad + i) * c;
                row.copy_from_slice(&x[start..start + kc]);
            }
            let beta = if prefill {
                for r in block_from..block_to {
                    out[r * o..(r + 1) * o].copy_from_slice(bias);
                }
                1.0
            } else {
                0.0
            };
            linalg::gemm(
                m,
                kc,
                o,
                1.0,
                &cols[..m * kc],
                false,
                &wt,
                false,
                beta,
                &mut out[block_from * o..block_to * o],
            );
            block_from = block_to;
        }
    }
    // boundary rows: windows that cross a sample edge (contaminated by the
    // neighboring sample in the interior pass, or skipped at the buffer ends)
    for bi in 0..bsz {
        for li in (0..pad).chain(l - pad..l) {
            let r = bi * l + li;
            let dst = &mut out[r * o..(r + 1) * o];
            dst.copy_from_slice(bias);
            for t in 0..k {
                let src = li as isize + t as isize - pad as isize;
                if src >= 0 && (src as usize) < l {
                    let xrow = &x[(bi * l + src as usize) * c..][..c];
                    for cc in 0..c {
                        let xv = xrow[cc];
                        let wrow = &wt[(t * c + cc) * o..(t * c + cc + 1) * o];
                        for (d, wv) in dst.iter_mut().zip(wrow) {
                            *d += xv * wv;
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds a channels-last `[B,L,C]` signal into `[B*L, K*C]` patch rows
/// (column index `t*C + c`), zero-padded at the boundaries.
fn im2col(x: &[f64], bsz: usize, l: usize, c: usize, k: usize, pad: usize) -> Vec<f64> {
    let mut cols = vec![0.0; bsz * l * k * c];
    for bi in 0..bsz {
        for li in 0..l {
            let row = &mut cols[(bi * l + li) * k * c..(bi * l + li + 1) * k * c];
            for t in 0..k {
                let src = li as isize + t as isize - pad as isize;
                if src >= 0 && (src as usize) < l {
                    let s = (bi * l + src as usize) * c;
                    row[t * c..(t + 1) * c].copy_from_slice(&x[s..s + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch-row gradients back onto the
/// signal.
fn col2im_add(cols: &[f64], bsz: usize, l: usize, c: usize, k: usize, pad: usize, gx: &mut [f64]) {
    for bi in 0..bsz {
        for li in 0..l {
            let row = &cols[(bi * l + li) * k * c..(bi * l + li + 1) * k * c];
            for t in 0..k {
                let src = li as isize + t as isize - pad as isize;
                if src >= 0 && (src as usize) < l {
                    let s = (bi * l + src as usize) * c;
                    for cc in 0..c {
                        gx[s + cc] += row[t * c + cc];
                    }
                }
            }
        }
    }
}
