//! Sparse variational GP residual head.
//!
//! The covariance is a product of a Matern-1/2 (exponential) kernel and a
//! rational quadratic kernel, each with its own ARD lengthscales, scaled by
//! a common output variance:
//!
//! ```text
//! k(z, z') = sig_f^2 * exp(-sqrt(sum_d (dz_d/l_mat_d)^2))
//!                    * (1 + sum_d (dz_d/l_rq_d)^2 / (2 alpha))^(-alpha)
//! ```
//!
//! All positive hyperparameters (output scale, lengthscales, alpha, noise)
//! are stored as unconstrained reals mapped through softplus. The variational
//! covariance is parameterized by a lower-triangular factor with a
//! softplus-positive diagonal, so S = F F^T stays positive definite under
//! unconstrained optimization.

use crate::autodiff::{math, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// First nonzero jitter tried after a clean factorization fails.
pub const JITTER_BASE: f64 = 1e-6;
/// Largest jitter tried before declaring the batch degenerate.
pub const JITTER_MAX: f64 = 1e-2;

/// Kernel hyperparameters in unconstrained (softplus-domain) storage.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelHyper {
    pub raw_sig_f2: Tensor,
    pub raw_alpha: Tensor,
    pub raw_ls_mat: Tensor,
    pub raw_ls_rq: Tensor,
}

/// Constrained kernel hyperparameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelValues {
    pub sig_f2: f64,
    pub alpha: f64,
    pub ls_mat: Vec<f64>,
    pub ls_rq: Vec<f64>,
}

impl KernelHyper {
    /// Defaults: output scale 25 dB^2 (residuals are tens of dB), all
    /// lengthscales 1, alpha 1.
    pub fn new(d_lat: usize) -> Self {
        KernelHyper::from_values(25.0, 1.0, &vec![1.0; d_lat], &vec![1.0; d_lat])
    }

    pub fn from_values(sig_f2: f64, alpha: f64, ls_mat: &[f64], ls_rq: &[f64]) -> Self {
        assert_eq!(ls_mat.len(), ls_rq.len());
        let inv = |v: &[f64]| -> Vec<f64> { v.iter().map(|&x| math::softplus_inv(x)).collect() };
        KernelHyper {
            raw_sig_f2: Tensor::scalar(math::softplus_inv(sig_f2)),
            raw_alpha: Tensor::scalar(math::softplus_inv(alpha)),
            raw_ls_mat: Tensor::from_vec(&[ls_mat.len()], inv(ls_mat)),
            raw_ls_rq: Tensor::from_vec(&[ls_rq.len()], inv(ls_rq)),
        }
    }

    pub fn d_lat(&self) -> usize {
        self.raw_ls_mat.numel()
    }

    pub fn values(&self) -> KernelValues {
        KernelValues {
            sig_f2: math::softplus(self.raw_sig_f2.item()),
            alpha: math::softplus(self.raw_alpha.item()),
            ls_mat: self.raw_ls_mat.data().iter().map(|&x| math::softplus(x)).collect(),
            ls_rq: self.raw_ls_rq.data().iter().map(|&x| math::softplus(x)).collect(),
        }
    }
}

/// Inducing locations and the Gaussian variational distribution q(u).
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    /// inducing locations, [M, d_lat]
    pub z: Tensor,
    /// variational mean, [M]
    pub m: Tensor,
    /// raw lower-triangular factor of S, [M, M]; diagonal passes through
    /// softplus, strict upper triangle is ignored
    pub s_raw: Tensor,
}

impl VariationalState {
    /// m = 0, S = I, inducing locations provided by the caller.
    pub fn new(z: Tensor) -> Self {
        let m_dim = z.rows();
        let mut s_raw = Tensor::zeros(&[m_dim, m_dim]);
        let diag_raw = math::softplus_inv(1.0);
        for i in 0..m_dim {
            s_raw.data_mut()[i * m_dim + i] = diag_raw;
        }
        VariationalState { z, m: Tensor::zeros(&[m_dim]), s_raw }
    }

    /// Random inducing locations in the unit cube (placeholder before
    /// data-driven initialization).
    pub fn seeded(m_dim: usize, d_lat: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..m_dim * d_lat).map(|_| rng.random_range(-1.0..1.0)).collect();
        VariationalState::new(Tensor::from_vec(&[m_dim, d_lat], z))
    }

    pub fn num_inducing(&self) -> usize {
        self.z.rows()
    }

    /// The constrained lower-triangular factor F with softplus diagonal.
    pub fn s_factor(&self) -> Tensor {
        let n = self.num_inducing();
        let mut f = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..=i {
                f.data_mut()[i * n + j] = if i == j {
                    math::softplus(self.s_raw.data()[i * n + i])
                } else {
                    self.s_raw.data()[i * n + j]
                };
            }
        }
        f
    }

    /// S = F F^T.
    pub fn s_matrix(&self) -> Tensor {
        let n = self.num_inducing();
        let f = self.s_factor();
        Tensor::from_vec(&[n, n], linalg::matmul(n, n, n, f.data(), false, f.data(), true))
    }

    /// Sets the raw factor so that S equals the given SPD matrix (used in
    /// tests and conditioning): F = chol(S).
    pub fn set_s_matrix(&mut self, s: &Tensor) -> Result<()> {
        let n = self.num_inducing();
        let l = linalg::cholesky(s.data(), n)
            .ok_or(Error::FailureEscalation { jitter_cap: 0.0 })?;
        let mut raw = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..=i {
                raw.data_mut()[i * n + j] = if i == j {
                    math::softplus_inv(l[i * n + i])
                } else {
                    l[i * n + j]
                };
            }
        }
        self.s_raw = raw;
        Ok(())
    }
}

/// Observation noise variance, softplus-stored.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodNoise {
    pub raw: Tensor,
}

impl LikelihoodNoise {
    pub fn new(noise_var: f64) -> Self {
        LikelihoodNoise { raw: Tensor::scalar(math::softplus_inv(noise_var)) }
    }

    pub fn noise_var(&self) -> f64 {
        math::softplus(self.raw.item())
    }
}

/// Single kernel evaluation. The two factors merge into one exponential:
/// `exp(-sqrt(qm)) * (1 + qr/(2a))^(-a) = exp(-sqrt(qm) - a ln1p(qr/(2a)))`.
pub fn kernel_eval(a: &[f64], b: &[f64], h: &KernelValues) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut qm = 0.0;
    let mut qr = 0.0;
    for d in 0..a.len() {
        let dz = a[d] - b[d];
        let tm = dz / h.ls_mat[d];
        let tr = dz / h.ls_rq[d];
        qm += tm * tm;
        qr += tr * tr;
    }
    h.sig_f2 * math::exp_fast(-(qm.sqrt() + h.alpha * (qr / (2.0 * h.alpha)).ln_1p()))
}

/// One kernel row k(a, B) against a dimension-major (transposed) point set.
/// Accumulating per dimension across all columns vectorizes cleanly and is
/// the single code path used by both matrix and pointwise prediction, so
/// their results agree bitwise.
fn kernel_row_t(
    a: &[f64],
    bt: &[f64],
    m: usize,
    inv_ls_mat: &[f64],
    inv_ls_rq: &[f64],
    h: &KernelValues,
    qm: &mut [f64],
    qr: &mut [f64],
    out: &mut [f64],
) {
    let d = a.len();
    qm[..m].fill(0.0);
    qr[..m].fill(0.0);
    for dd in 0..d {
        let av = a[dd];
        let (im, ir) = (inv_ls_mat[dd], inv_ls_rq[dd]);
        let brow = &bt[dd * m..(dd + 1) * m];
        for j in 0..m {
            let diff = av - brow[j];
            let tm = diff * im;
            let tr = diff * ir;
            qm[j] += tm * tm;
            qr[j] += tr * tr;
        }
    }
    for j in 0..m {
        out[j] =
            h.sig_f2 * math::exp_fast(-(qm[j].sqrt() + h.alpha * (qr[j] / (2.0 * h.alpha)).ln_1p()));
    }
}

fn transpose(b: &[f64], m: usize, d: usize) -> Vec<f64> {
    let mut bt = vec![0.0; d * m];
    for j in 0..m {
        for dd in 0..d {
            bt[dd * m + j] = b[j * d + dd];
        }
    }
    bt
}

/// Kernel matrix between two point sets, n x m rows-by-columns.
pub fn kernel_matrix(a: &[f64], n: usize, b: &[f64], m: usize, h: &KernelValues) -> Vec<f64> {
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let d = a.len() / n;
    let inv_m: Vec<f64> = h.ls_mat.iter().map(|l| 1.0 / l).collect();
    let inv_r: Vec<f64> = h.ls_rq.iter().map(|l| 1.0 / l).collect();
    let bt = transpose(b, m, d);
    let mut out = vec![0.0; n * m];
    let mut qm = vec![0.0; m];
    let mut qr = vec![0.0; m];
    for i in 0..n {
        kernel_row_t(
            &a[i * d..(i + 1) * d],
            &bt,
            m,
            &inv_m,
            &inv_r,
            h,
            &mut qm,
            &mut qr,
            &mut out[i * m..(i + 1) * m],
        );
    }
    out
}

/// Cholesky with escalating jitter. Tries a clean factorization first, then
/// jitter from [`JITTER_BASE`] up to [`JITTER_MAX`] in decade steps. Returns
/// the lower factor and the jitter used; `FailureEscalation` past the cap.
pub fn chol_with_jitter(k: &[f64], n: usize) -> Result<(Vec<f64>, f64)> {
    let mut eps = 0.0;
    loop {
        let mut kj = k.to_vec();
        if eps > 0.0 {
            for i in 0..n {
                kj[i * n + i] += eps;
            }
        }
        if let Some(l) = linalg::cholesky(&kj, n) {
            return Ok((l, eps));
        }
        eps = if eps == 0.0 { JITTER_BASE } else { eps * 10.0 };
        if eps > JITTER_MAX {
            return Err(Error::FailureEscalation { jitter_cap: JITTER_MAX });
        }
    }
}

/// Precomputed factors for fast repeated prediction with a frozen state.
#[derive(Debug, Clone)]
pub struct PredictiveCache {
    m_dim: usize,
    d_lat: usize,
    z: Vec<f64>,
    /// dimension-major copy of the inducing locations
    zt: Vec<f64>,
    inv_ls_mat: Vec<f64>,
    inv_ls_rq: Vec<f64>,
    values: KernelValues,
    /// K_ZZ^-1 m
    alpha_vec: Vec<f64>,
    /// K_ZZ^-1 - K_ZZ^-1 S K_ZZ^-1 (symmetric)
    v_mat: Vec<f64>,
    /// jitter used for the K_ZZ factorization
    pub jitter: f64,
}

impl PredictiveCache {
    pub fn build(v: &VariationalState, h: &KernelHyper) -> Result<Self> {
        let m_dim = v.num_inducing();
        let d_lat = h.d_lat();
        let values = h.values();
        let kzz = kernel_matrix(v.z.data(), m_dim, v.z.data(), m_dim, &values);
        let (l, jitter) = chol_with_jitter(&kzz, m_dim)?;

        // alpha = K^-1 m
        let tmp = linalg::solve_lower(&l, m_dim, v.m.data(), 1);
        let alpha_vec = linalg::solve_lower_transpose(&l, m_dim, &tmp, 1);

        // V = K^-1 - K^-1 S K^-1; with S = F F^T and W = K^-1 F:
        // V = K^-1 - W W^T
        let f = v.s_factor();
        let tmp = linalg::solve_lower(&l, m_dim, f.data(), m_dim);
        let w = linalg::solve_lower_transpose(&l, m_dim, &tmp, m_dim);
        // K^-1 via solves on the identity
        let mut eye = vec![0.0; m_dim * m_dim];
        for i in 0..m_dim {
            eye[i * m_dim + i] = 1.0;
        }
        let tmp = linalg::solve_lower(&l, m_dim, &eye, m_dim);
        let kinv = linalg::solve_lower_transpose(&l, m_dim, &tmp, m_dim);
        let mut v_mat = kinv;
        linalg::gemm(m_dim, m_dim, m_dim, -1.0, &w, false, &w, true, 1.0, &mut v_mat);

        Ok(PredictiveCache {
            m_dim,
            d_lat,
            zt: transpose(v.z.data(), m_dim, d_lat),
            inv_ls_mat: values.ls_mat.iter().map(|l| 1.0 / l).collect(),
            inv_ls_rq: values.ls_rq.iter().map(|l| 1.0 / l).collect(),
            z: v.z.data().to_vec(),
            values,
            alpha_vec,
            v_mat,
            jitter,
        })
    }

    pub fn values(&self) -> &KernelValues {
        &self.values
    }

    /// Cross-kernel vector k(z_star, Z), length M. Shares the row kernel
    /// with the batched path, so pointwise and batched predictions agree
    /// bitwise.
    pub fn cross(&self, z_star: &[f64]) -> Vec<f64> {
        debug_assert_eq!(z_star.len(), self.d_lat);
        let mut k = vec![0.0; self.m_dim];
        let mut qm = vec![0.0; self.m_dim];
        let mut qr = vec![0.0; self.m_dim];
        kernel_row_t(
            z_star,
            &self.zt,
            self.m_dim,
            &self.inv_ls_mat,
            &self.inv_ls_rq,
            &self.values,
            &mut qm,
            &mut qr,
            &mut k,
        );
        k
    }

    /// Predictive mean and variance of the residual at one latent point.
    /// Variance is floored at zero after the numerics.
    pub fn predict(&self, z_star: &[f64]) -> (f64, f64) {
        let k = self.cross(z_star);
        let mu: f64 = k.iter().zip(&self.alpha_vec).map(|(a, b)| a * b).sum();
        let kv = linalg::matmul(self.m_dim, self.m_dim, 1, &self.v_mat, false, &k, false);
        let quad: f64 = k.iter().zip(&kv).map(|(a, b)| a * b).sum();
        let var = (self.values.sig_f2 - quad).max(0.0);
        (mu, var)
    }

    /// Batched marginal posterior over rows of `latents` ([B, d_lat]).
    pub fn predict_batch(&self, latents: &[f64], bsz: usize) -> (Vec<f64>, Vec<f64>) {
        let kxz = kernel_matrix(latents, bsz, &self.z, self.m_dim, &self.values); // [B, M]
        let mut mu = vec![0.0; bsz];
        linalg::gemm(bsz, self.m_dim, 1, 1.0, &kxz, false, &self.alpha_vec, false, 0.0, &mut mu);
        let kv = linalg::matmul(bsz, self.m_dim, self.m_dim, &kxz, false, &self.v_mat, false);
        let mut var = vec![0.0; bsz];
        for i in 0..bsz {
            let mut quad = 0.0;
            for j in 0..self.m_dim {
                quad += kv[i * self.m_dim + j] * kxz[i * self.m_dim + j];
            }
            var[i] = (self.values.sig_f2 - quad).max(0.0);
        }
        (mu, var)
    }
}

/// One-shot predictive (builds the factor cache, then predicts).
pub fn predictive(z_star: &[f64], v: &VariationalState, h: &KernelHyper) -> Result<(f64, f64)> {
    Ok(PredictiveCache::build(v, h)?.predict(z_star))
}

/// Batched form of [`predictive`] sharing one factorization.
pub fn marginal_posterior_batch(
    latents: &[f64],
    bsz: usize,
    v: &VariationalState,
    h: &KernelHyper,
) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok(PredictiveCache::build(v, h)?.predict_batch(latents, bsz))
}

/// KL(q(u) || p(u)) with p(u) = N(0, K_ZZ):
/// 0.5 [ tr(K^-1 S) + m^T K^-1 m - M + logdet K - logdet S ].
pub fn kl_qp(v: &VariationalState, h: &KernelHyper) -> Result<f64> {
    let m_dim = v.num_inducing();
    let values = h.values();
    let kzz = kernel_matrix(v.z.data(), m_dim, v.z.data(), m_dim, &values);
    let (l, _) = chol_with_jitter(&kzz, m_dim)?;
    let f = v.s_factor();
    let lf = linalg::solve_lower(&l, m_dim, f.data(), m_dim);
    let trace = linalg::sum_squares(&lf);
    let lm = linalg::solve_lower(&l, m_dim, v.m.data(), 1);
    let maha = linalg::sum_squares(&lm);
    let logdet_k: f64 = (0..m_dim).map(|i| 2.0 * l[i * m_dim + i].ln()).sum();
    let logdet_s: f64 = (0..m_dim).map(|i| 2.0 * f.data()[i * m_dim + i].ln()).sum();
    Ok(0.5 * (trace + maha - m_dim as f64 + logdet_k - logdet_s))
}

/// Gaussian expected log-likelihood of one residual observation:
/// E_{f ~ N(mu, v)} [ log N(r | f, noise) ].
pub fn expected_loglik(r: f64, mu: f64, v: f64, noise_var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * noise_var).ln()
        - (r - mu) * (r - mu) / (2.0 * noise_var)
        - v / (2.0 * noise_var)
}

/// Mini-batch negative ELBO (the training loss, minimized):
/// (N/B) * sum_i -E_q[log N(r_i | f(z_i), noise)] + KL(q || p).
pub fn elbo_minibatch(
    residuals: &[f64],
    latents: &[f64],
    v: &VariationalState,
    h: &KernelHyper,
    noise_var: f64,
    n_total: usize,
    batch: usize,
) -> Result<f64> {
    assert!(batch > 0 && residuals.len() == batch);
    let (mu, var) = marginal_posterior_batch(latents, batch, v, h)?;
    let nell: f64 = residuals
        .iter()
        .zip(mu.iter().zip(&var))
        .map(|(&r, (&m, &vv))| -expected_loglik(r, m, vv, noise_var))
        .sum();
    Ok((n_total as f64 / batch as f64) * nell + kl_qp(v, h)?)
}

/// Which covariance enters the assimilation update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConditioningCovariance {
    /// Prior kernel covariances among/to the observation points, matching the
    /// written update equations.
    #[default]
    Prior,
    /// Variational posterior covariances (statistically tighter variant).
    Posterior,
}

/// Exact Gaussian conditioning of the residual posterior on observed
/// residuals. Wraps a frozen predictive cache; does not retrain anything.
#[derive(Debug, Clone)]
pub struct ConditionedPredictor {
    base: PredictiveCache,
    obs_latents: Vec<f64>,
    n_obs: usize,
    /// Cholesky factor of C_KK + noise I
    l_obs: Vec<f64>,
    /// (C_KK + noise I)^-1 innovation
    weights: Vec<f64>,
    mode: ConditioningCovariance,
}

impl ConditionedPredictor {
    /// `obs_residuals` are residual-space observations (TL minus physics
    /// mean); the innovation subtracts the prior GP mean at each observation.
    pub fn build(
        v: &VariationalState,
        h: &KernelHyper,
        noise_var: f64,
        obs_latents: &[f64],
        obs_residuals: &[f64],
    ) -> Result<Self> {
        Self::build_with_mode(v, h, noise_var, obs_latents, obs_residuals, ConditioningCovariance::Prior)
    }

    pub fn build_with_mode(
        v: &VariationalState,
        h: &KernelHyper,
        noise_var: f64,
        obs_latents: &[f64],
        obs_residuals: &[f64],
        mode: ConditioningCovariance,
    ) -> Result<Self> {
        let noise = vec![noise_var; obs_residuals.len()];
        Self::build_full(v, h, &noise, obs_latents, obs_residuals, mode)
    }

    /// Fully general form with one noise variance per observation.
    pub fn build_full(
        v: &VariationalState,
        h: &KernelHyper,
        noise_vars: &[f64],
        obs_latents: &[f64],
        obs_residuals: &[f64],
        mode: ConditioningCovariance,
    ) -> Result<Self> {
        let n_obs = obs_residuals.len();
        assert!(n_obs >= 1, "need at least one observation");
        assert_eq!(noise_vars.len(), n_obs);
        let base = PredictiveCache::build(v, h)?;
        let d = h.d_lat();
        debug_assert_eq!(obs_latents.len(), n_obs * d);

        let mut c_kk = match mode {
            ConditioningCovariance::Prior => {
                kernel_matrix(obs_latents, n_obs, obs_latents, n_obs, base.values())
            }
            ConditioningCovariance::Posterior => posterior_cov(&base, obs_latents, n_obs),
        };
        for i in 0..n_obs {
            c_kk[i * n_obs + i] += noise_vars[i];
        }
        let l_obs = linalg::cholesky(&c_kk, n_obs)
            .ok_or(Error::FailureEscalation { jitter_cap: 0.0 })?;

        // innovation: y_K - mu_GP(z_K)
        let mut innov = vec![0.0; n_obs];
        for i in 0..n_obs {
            let (mu, _) = base.predict(&obs_latents[i * d..(i + 1) * d]);
            innov[i] = obs_residuals[i] - mu;
        }
        let tmp = linalg::solve_lower(&l_obs, n_obs, &innov, 1);
        let weights = linalg::solve_lower_transpose(&l_obs, n_obs, &tmp, 1);

        Ok(ConditionedPredictor {
            base,
            obs_latents: obs_latents.to_vec(),
            n_obs,
            l_obs,
            weights,
            mode,
        })
    }

    fn cross_obs(&self, z_star: &[f64]) -> Vec<f64> {
        let d = self.base.d_lat;
        match self.mode {
            ConditioningCovariance::Prior => {
                let mut k = vec![0.0; self.n_obs];
                for i in 0..self.n_obs {
                    k[i] = kernel_eval(
                        z_star,
                        &self.obs_latents[i * d..(i + 1) * d],
                        self.base.values(),
                    );
                }
                k
            }
            ConditioningCovariance::Posterior => {
                posterior_cross(&self.base, z_star, &self.obs_latents, self.n_obs)
            }
        }
    }

    /// Posterior (assimilated) mean and variance of the residual at one
    /// latent point. Variance is floored at zero.
    pub fn predict(&self, z_star: &[f64]) -> (f64, f64) {
        let (mu0, var0) = self.base.predict(z_star);
        let k = self.cross_obs(z_star);
        let mu = mu0 + k.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>();
        let half = linalg::solve_lower(&self.l_obs, self.n_obs, &k, 1);
        let var = (var0 - linalg::sum_squares(&half)).max(0.0);
        (mu, var)
    }

    /// Prior (unassimilated) prediction from the wrapped cache.
    pub fn predict_prior(&self, z_star: &[f64]) -> (f64, f64) {
        self.base.predict(z_star)
    }
}

/// Posterior covariance matrix of the SVGP at a point set:
/// Sigma(a,b) = k(a,b) - k_aZ (K^-1 - K^-1 S K^-1) k_Zb.
fn posterior_cov(cache: &PredictiveCache, pts: &[f64], n: usize) -> Vec<f64> {
    let d = cache.d_lat;
    let kxz = kernel_matrix(pts, n, &cache.z, cache.m_dim, &cache.values);
    let kv = linalg::matmul(n, cache.m_dim, cache.m_dim, &kxz, false, &cache.v_mat, false);
    let mut out = kernel_matrix(pts, n, pts, n, &cache.values);
    linalg::gemm(n, cache.m_dim, n, -1.0, &kv, false, &kxz, true, 1.0, &mut out);
    let _ = d;
    out
}

/// Posterior cross-covariance between one point and a point set.
fn posterior_cross(cache: &PredictiveCache, z_star: &[f64], pts: &[f64], n: usize) -> Vec<f64> {
    let ks = cache.cross(z_star); // [M]
    let kxz = kernel_matrix(pts, n, &cache.z, cache.m_dim, &cache.values); // [n, M]
    let vks = linalg::matmul(cache.m_dim, cache.m_dim, 1, &cache.v_mat, false, &ks, false);
    let d = cache.d_lat;
    let mut out = vec![0.0; n];
    for i in 0..n {
        let prior = kernel_eval(z_star, &pts[i * d..(i + 1) * d], &cache.values);
        let mut corr = 0.0;
        for j in 0..cache.m_dim {
            corr += kxz[i * cache.m_dim + j] * vks[j];
        }
        out[i] = prior - corr;
    }
    out
}

/// Tape leaf handles for all trainable GP parameters.
pub struct SvgpVars {
    pub raw_sig_f2: Var,
    pub raw_alpha: Var,
    pub raw_ls_mat: Var,
    pub raw_ls_rq: Var,
    pub z: Var,
    pub m: Var,
    pub s_raw: Var,
    pub raw_noise: Var,
}

impl SvgpVars {
    pub fn bind(
        tape: &mut Tape,
        h: &KernelHyper,
        v: &VariationalState,
        noise: &LikelihoodNoise,
    ) -> Self {
        SvgpVars {
            raw_sig_f2: tape.leaf(h.raw_sig_f2.clone()),
            raw_alpha: tape.leaf(h.raw_alpha.clone()),
            raw_ls_mat: tape.leaf(h.raw_ls_mat.clone()),
            raw_ls_rq: tape.leaf(h.raw_ls_rq.clone()),
            z: tape.leaf(v.z.clone()),
            m: tape.leaf(v.m.clone()),
            s_raw: tape.leaf(v.s_raw.clone()),
            raw_noise: tape.leaf(noise.raw.clone()),
        }
    }

    /// Leaf vars in a fixed order matching the model's parameter walk.
    pub fn visit(&self, f: &mut dyn FnMut(Var)) {
        f(self.raw_sig_f2);
        f(self.raw_alpha);
        f(self.raw_ls_mat);
        f(self.raw_ls_rq);
        f(self.z);
        f(self.m);
        f(self.s_raw);
        f(self.raw_noise);
    }
}

/// GP quantities assembled on the tape for one batch.
pub struct GpTapeOut {
    /// marginal posterior mean over the batch, [B]
    pub mu: Var,
    /// marginal posterior variance over the batch, [B]
    pub var: Var,
    /// KL(q || p), scalar
    pub kl: Var,
    /// constrained noise variance, scalar
    pub noise_var: Var,
    /// jitter applied to K_ZZ
    pub jitter: f64,
}

/// Builds the batched SVGP marginal posterior and KL on the tape.
///
/// `latents` is a `[B, d_lat]` var. The jitter level is chosen by plain
/// escalation on the current K_ZZ values, then applied as a constant shift
/// so gradients flow through the factorization itself.
pub fn build_gp(tape: &mut Tape, vars: &SvgpVars, latents: Var) -> Result<GpTapeOut> {
    let bsz = tape.value(latents).rows();
    let m_dim = tape.value(vars.m).numel();

    let sig_f2 = tape.softplus(vars.raw_sig_f2);
    let alpha = tape.softplus(vars.raw_alpha);
    let ls_mat = tape.softplus(vars.raw_ls_mat);
    let ls_rq = tape.softplus(vars.raw_ls_rq);
    let noise_var = tape.softplus(vars.raw_noise);
    let s_factor = tape.lower_tri_softplus_diag(vars.s_raw);

    let qm_zz = tape.ard_sqdist(vars.z, vars.z, ls_mat);
    let qr_zz = tape.ard_sqdist(vars.z, vars.z, ls_rq);
    let kzz = tape.product_kernel(qm_zz, qr_zz, sig_f2, alpha);
    let (_, jitter) = chol_with_jitter(tape.value(kzz).data(), m_dim)?;
    let kzz_j = if jitter > 0.0 { tape.add_diag(kzz, jitter) } else { kzz };
    let l = tape.cholesky(kzz_j)?;

    let qm_zx = tape.ard_sqdist(vars.z, latents, ls_mat);
    let qr_zx = tape.ard_sqdist(vars.z, latents, ls_rq);
    let kzx = tape.product_kernel(qm_zx, qr_zx, sig_f2, alpha); // [M, B]

    let a = tape.tri_solve(l, kzx, false); // L^-1 K_Zx
    let c = tape.tri_solve(l, a, true); // K^-1 K_Zx
    let m_col = tape.reshape(vars.m, &[m_dim, 1]);
    let mu_col = tape.matmul(c, m_col, true, false); // [B, 1]
    let mu = tape.reshape(mu_col, &[bsz]);

    let t = tape.matmul(s_factor, c, true, false); // F^T K^-1 K_Zx, [M, B]
    let v3 = tape.col_sum_squares(t);
    let v2 = tape.col_sum_squares(a);
    let kss = tape.broadcast_scalar(sig_f2, bsz);
    let dv = tape.sub(kss, v2);
    let var = tape.add(dv, v3);

    // KL terms
    let lf = tape.tri_solve(l, s_factor, false);
    let trace = tape.sum_squares(lf);
    let lm = tape.tri_solve(l, m_col, false);
    let maha = tape.sum_squares(lm);
    let ld_k2 = tape.log_diag_sum(l);
    let ld_k = tape.scale(ld_k2, 2.0);
    let ld_s2 = tape.log_diag_sum(s_factor);
    let ld_s = tape.scale(ld_s2, 2.0);
    let s1 = tape.add(trace, maha);
    let s2 = tape.sub(ld_k, ld_s);
    let s3 = tape.add(s1, s2);
    let s4 = tape.add_const(s3, -(m_dim as f64));
    let kl = tape.scale(s4, 0.5);

    Ok(GpTapeOut { mu, var, kl, noise_var, jitter })
}

/// Appends the scaled negative expected log-likelihood to the tape:
/// (N/B) * sum_i [ 0.5 ln(2 pi noise) + ((r_i-mu_i)^2 + v_i) / (2 noise) ].
pub fn build_scaled_nell(
    tape: &mut Tape,
    gp: &GpTapeOut,
    residual: Var,
    n_total: usize,
    batch: usize,
) -> Var {
    let d = tape.sub(gp.mu, residual);
    let d2 = tape.mul_elem(d, d);
    let s = tape.add(d2, gp.var);
    let ssum = tape.sum_all(s);
    let two_noise = tape.scale(gp.noise_var, 2.0);
    let inv = tape.recip(two_noise);
    let quad = tape.mul_scalar(inv, ssum);
    let scaled_noise = tape.scale(gp.noise_var, 2.0 * std::f64::consts::PI);
    let ln_noise = tape.ln(scaled_noise);
    let logterm = tape.scale(ln_noise, 0.5 * batch as f64);
    let nell = tape.add(logterm, quad);
    tape.scale(nell, n_total as f64 / batch as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper_1d() -> KernelHyper {
        KernelHyper::from_values(1.0, 1.0, &[1.0], &[1.0])
    }

    #[test]
    fn kernel_at_zero_distance_is_sig_f2() {
        let h = KernelHyper::from_values(3.7, 1.2, &[0.8, 1.3], &[0.5, 2.0]).values();
        let z = [0.4, -0.2];
        assert!((kernel_eval(&z, &z, &h) - 3.7).abs() < 1e-12);
    }

    #[test]
    fn kernel_hand_value_1d() {
        // l_mat = l_rq = 1, alpha = 1, sig_f2 = 1, |dz| = 1:
        // exp(-1) * (1.5)^(-1) = 0.2452530...
        let h = hyper_1d().values();
        let k = kernel_eval(&[0.0], &[1.0], &h);
        assert!((k - 0.245253).abs() < 1e-6, "got {k}");
    }

    #[test]
    fn kernel_symmetry() {
        let h = KernelHyper::from_values(2.0, 0.7, &[0.9, 1.1, 1.3], &[1.2, 0.6, 0.8]).values();
        let a = [0.1, -0.4, 0.9];
        let b = [-0.7, 0.3, 0.2];
        assert_eq!(kernel_eval(&a, &b, &h), kernel_eval(&b, &a, &h));
    }

    #[test]
    fn kernel_matrix_matches_entrywise_oracle() {
        let h = KernelHyper::from_values(2.5, 1.4, &[0.7, 1.2], &[1.0, 0.9]).values();
        let pts = [0.0, 0.0, 1.0, -0.5, -0.3, 0.8];
        let k = kernel_matrix(&pts, 3, &pts, 3, &h);
        for i in 0..3 {
            assert!((k[i * 3 + i] - 2.5).abs() < 1e-12);
            for j in 0..3 {
                let direct = kernel_eval(&pts[i * 2..i * 2 + 2], &pts[j * 2..j * 2 + 2], &h);
                assert_eq!(k[i * 3 + j], direct);
            }
        }
    }

    #[test]
    fn gram_matrix_is_psd_on_random_points() {
        // min eigenvalue >= -1e-8 * sig_f2, checked through factorization of
        // G + 1e-8*sig_f2*I
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = KernelHyper::from_values(4.0, 0.8, &[0.6, 1.0, 1.5], &[1.1, 0.7, 0.9]).values();
        let n = 20;
        let pts: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut g = kernel_matrix(&pts, n, &pts, n, &h);
        for i in 0..n {
            g[i * n + i] += 1e-8 * h.sig_f2;
        }
        assert!(linalg::cholesky(&g, n).is_some());
    }

    #[test]
    fn jitter_clean_psd_factors_without_jitter() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let (_, eps) = chol_with_jitter(&eye, 2).unwrap();
        assert_eq!(eps, 0.0);
    }

    #[test]
    fn jitter_escalates_on_rank_deficiency() {
        let ones = vec![1.0; 9];
        let (l, eps) = chol_with_jitter(&ones, 3).unwrap();
        assert!(eps > 0.0 && eps <= JITTER_MAX);
        let back = linalg::matmul(3, 3, 3, &l, false, &l, true);
        for i in 0..3 {
            for j in 0..3 {
                let want = 1.0 + if i == j { eps } else { 0.0 };
                assert!((back[i * 3 + j] - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn jitter_fails_on_negative_diagonal() {
        let bad = vec![-1.0, 0.0, 0.0, -1.0];
        assert!(matches!(
            chol_with_jitter(&bad, 2),
            Err(Error::FailureEscalation { .. })
        ));
    }

    #[test]
    fn predictive_zero_mean_gives_zero() {
        let h = KernelHyper::new(2);
        let v = VariationalState::seeded(5, 2, 9);
        let (mu, _) = predictive(&[0.3, -0.1], &v, &h).unwrap();
        assert_eq!(mu, 0.0);
    }

    #[test]
    fn predictive_at_single_inducing_point_interpolates() {
        // M=1, sig_f2=1: k_*Z = K_ZZ = 1, so mu = m1 and var = S11, exactly
        let h = KernelHyper::from_values(1.0, 1.0, &[1.0], &[1.0]);
        let mut v = VariationalState::new(Tensor::from_vec(&[1, 1], vec![0.7]));
        v.m = Tensor::from_vec(&[1], vec![2.5]);
        v.set_s_matrix(&Tensor::from_vec(&[1, 1], vec![0.36])).unwrap();
        let (mu, var) = predictive(&[0.7], &v, &h).unwrap();
        assert!((mu - 2.5).abs() < 1e-10, "mu {mu}");
        assert!((var - 0.36).abs() < 1e-10, "var {var}");
    }

    #[test]
    fn predictive_far_field_reverts_to_prior() {
        let h = KernelHyper::from_values(2.0, 1.0, &[0.5, 0.5], &[0.5, 0.5]);
        let mut v = VariationalState::seeded(4, 2, 10);
        v.m = Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, 3.0]);
        let (mu, var) = predictive(&[500.0, -500.0], &v, &h).unwrap();
        assert!(mu.abs() < 1e-6);
        assert!((var - 2.0).abs() < 1e-6);
    }

    #[test]
    fn batch_predictive_agrees_with_pointwise() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let h = KernelHyper::from_values(3.0, 1.1, &[0.8, 1.2, 0.7], &[0.9, 1.0, 1.4]);
        let mut v = VariationalState::seeded(6, 3, 23);
        for x in v.m.data_mut() {
            *x = rng.random_range(-2.0..2.0);
        }
        let pts: Vec<f64> = (0..5 * 3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let (mu_b, var_b) = marginal_posterior_batch(&pts, 5, &v, &h).unwrap();
        let cache = PredictiveCache::build(&v, &h).unwrap();
        for i in 0..5 {
            let (mu, var) = cache.predict(&pts[i * 3..(i + 1) * 3]);
            assert!((mu - mu_b[i]).abs() < 1e-10);
            assert!((var - var_b[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn predictive_variance_bounded_when_s_below_k() {
        // S = K/2 (so S < K): variance must lie in [0, sig_f2]
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let h = KernelHyper::from_values(2.0, 1.0, &[1.0, 1.0], &[1.0, 1.0]);
        let mut v = VariationalState::seeded(5, 2, 25);
        let kzz = kernel_matrix(v.z.data(), 5, v.z.data(), 5, &h.values());
        let mut half = Tensor::from_vec(&[5, 5], kzz);
        for x in half.data_mut() {
            *x *= 0.5;
        }
        v.set_s_matrix(&half).unwrap();
        let cache = PredictiveCache::build(&v, &h).unwrap();
        for _ in 0..50 {
            let p = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let (_, var) = cache.predict(&p);
            assert!((0.0..=2.0 + 1e-9).contains(&var), "var {var}");
        }
    }

    #[test]
    fn kl_zero_for_matching_distributions() {
        // m = 0, S = K_ZZ -> KL = 0
        let h = KernelHyper::from_values(2.0, 1.3, &[0.9, 1.1], &[1.0, 0.8]);
        let mut v = VariationalState::seeded(4, 2, 26);
        let kzz = kernel_matrix(v.z.data(), 4, v.z.data(), 4, &h.values());
        v.set_s_matrix(&Tensor::from_vec(&[4, 4], kzz)).unwrap();
        let kl = kl_qp(&v, &h).unwrap();
        assert!(kl.abs() < 1e-9, "kl {kl}");
    }

    #[test]
    fn kl_hand_value_m1() {
        // K=[1], S=[1], m=[1]: 0.5 (1 + 1 - 1 + 0 - 0) = 0.5
        let h = KernelHyper::from_values(1.0, 1.0, &[1.0], &[1.0]);
        let mut v = VariationalState::new(Tensor::from_vec(&[1, 1], vec![0.0]));
        v.m = Tensor::from_vec(&[1], vec![1.0]);
        v.set_s_matrix(&Tensor::from_vec(&[1, 1], vec![1.0])).unwrap();
        let kl = kl_qp(&v, &h).unwrap();
        assert!((kl - 0.5).abs() < 1e-10, "kl {kl}");
    }

    #[test]
    fn kl_nonnegative_on_random_states() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        for trial in 0..20 {
            let h = KernelHyper::from_values(
                rng.random_range(0.5..5.0),
                rng.random_range(0.5..2.0),
                &[rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)],
                &[rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)],
            );
            let mut v = VariationalState::seeded(5, 2, 100 + trial);
            for x in v.m.data_mut() {
                *x = rng.random_range(-2.0..2.0);
            }
            for x in v.s_raw.data_mut() {
                *x = rng.random_range(-0.5..0.5);
            }
            let kl = kl_qp(&v, &h).unwrap();
            assert!(kl >= -1e-9, "trial {trial}: kl {kl}");
        }
    }

    #[test]
    fn expected_loglik_plug_in_zero() {
        let noise = 1.0 / (2.0 * std::f64::consts::PI);
        assert!(expected_loglik(3.0, 3.0, 0.0, noise).abs() < 1e-12);
    }

    #[test]
    fn expected_loglik_decreasing_in_variance() {
        let mut prev = expected_loglik(1.0, 0.5, 0.0, 2.0);
        for i in 1..10 {
            let cur = expected_loglik(1.0, 0.5, i as f64 * 0.3, 2.0);
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn expected_loglik_matches_monte_carlo() {
        use rand_distr::{Distribution, Normal};
        let (r, mu, v, noise) = (1.3, 0.4, 0.8, 1.7);
        let analytic = expected_loglik(r, mu, v, noise);
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let dist = Normal::new(mu, v.sqrt()).unwrap();
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let f: f64 = dist.sample(&mut rng);
            let ll = -0.5 * (2.0 * std::f64::consts::PI * noise).ln()
                - (r - f) * (r - f) / (2.0 * noise);
            sum += ll;
            sumsq += ll * ll;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (analytic - mean).abs() < 3.0 * se,
            "analytic {analytic}, mc {mean} +- {se}"
        );
    }

    #[test]
    fn elbo_scaling_in_dataset_size() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let h = KernelHyper::from_values(2.0, 1.0, &[1.0, 1.0], &[1.0, 1.0]);
        let mut v = VariationalState::seeded(4, 2, 30);
        for x in v.m.data_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
        let latents: Vec<f64> = (0..3 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let resid = [0.5, -1.0, 2.0];
        let kl = kl_qp(&v, &h).unwrap();
        let e1 = elbo_minibatch(&resid, &latents, &v, &h, 1.0, 3, 3).unwrap();
        let e2 = elbo_minibatch(&resid, &latents, &v, &h, 1.0, 6, 3).unwrap();
        // doubling N doubles the likelihood part exactly, KL unchanged
        assert!(((e2 - kl) - 2.0 * (e1 - kl)).abs() < 1e-9);
    }

    #[test]
    fn elbo_matches_straight_line_reimplementation() {
        // independent from-scratch evaluation of the formula on 5 points
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let d = 2;
        let m_dim = 3;
        let h = KernelHyper::from_values(1.8, 0.9, &[0.8, 1.1], &[1.3, 0.7]);
        let mut v = VariationalState::seeded(m_dim, d, 32);
        for x in v.m.data_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
        for x in v.s_raw.data_mut() {
            *x = rng.random_range(-0.4..0.4);
        }
        let b = 5;
        let n_total = 40;
        let noise = 1.3;
        let latents: Vec<f64> = (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let resid: Vec<f64> = (0..b).map(|_| rng.random_range(-3.0..3.0)).collect();

        let got = elbo_minibatch(&resid, &latents, &v, &h, noise, n_total, b).unwrap();

        // oracle: dense evaluation with explicit inverses via cholesky
        let hv = h.values();
        let kzz = kernel_matrix(v.z.data(), m_dim, v.z.data(), m_dim, &hv);
        let (l, eps) = chol_with_jitter(&kzz, m_dim).unwrap();
        assert_eq!(eps, 0.0);
        let s = v.s_matrix();
        let f = v.s_factor();
        let mut nell_sum = 0.0;
        for i in 0..b {
            let zi = &latents[i * d..(i + 1) * d];
            let kz: Vec<f64> = (0..m_dim)
                .map(|j| kernel_eval(zi, &v.z.data()[j * d..(j + 1) * d], &hv))
                .collect();
            // mu = kz^T K^-1 m; var = k** - kz^T K^-1 kz + kz^T K^-1 S K^-1 kz
            let t = linalg::solve_lower(&l, m_dim, &kz, 1);
            let kinv_kz = linalg::solve_lower_transpose(&l, m_dim, &t, 1);
            let mu: f64 = kinv_kz.iter().zip(v.m.data()).map(|(a, c)| a * c).sum();
            let quad1: f64 = kz.iter().zip(&kinv_kz).map(|(a, c)| a * c).sum();
            let sk = linalg::matmul(m_dim, m_dim, 1, s.data(), false, &kinv_kz, false);
            let quad2: f64 = kinv_kz.iter().zip(&sk).map(|(a, c)| a * c).sum();
            let var = hv.sig_f2 - quad1 + quad2;
            nell_sum -= expected_loglik(resid[i], mu, var, noise);
        }
        let lf = linalg::solve_lower(&l, m_dim, f.data(), m_dim);
        let lm = linalg::solve_lower(&l, m_dim, v.m.data(), 1);
        let logdet_k: f64 = (0..m_dim).map(|i| 2.0 * l[i * m_dim + i].ln()).sum();
        let logdet_s: f64 = (0..m_dim).map(|i| 2.0 * f.data()[i * m_dim + i].ln()).sum();
        let kl = 0.5
            * (linalg::sum_squares(&lf) + linalg::sum_squares(&lm) - m_dim as f64 + logdet_k
                - logdet_s);
        let want = (n_total as f64 / b as f64) * nell_sum + kl;
        assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
    }

    #[test]
    fn tape_elbo_matches_plain_evaluation() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let d = 3;
        let m_dim = 4;
        let h = KernelHyper::from_values(2.2, 1.2, &[0.9, 1.0, 1.2], &[0.7, 1.4, 1.0]);
        let mut v = VariationalState::seeded(m_dim, d, 34);
        for x in v.m.data_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
        let noise = LikelihoodNoise::new(0.9);
        let b = 6;
        let n_total = 60;
        let latents: Vec<f64> = (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let resid: Vec<f64> = (0..b).map(|_| rng.random_range(-2.0..2.0)).collect();

        let plain =
            elbo_minibatch(&resid, &latents, &v, &h, noise.noise_var(), n_total, b).unwrap();

        let mut tape = Tape::new();
        let vars = SvgpVars::bind(&mut tape, &h, &v, &noise);
        let lat = tape.leaf(Tensor::from_vec(&[b, d], latents));
        let gp = build_gp(&mut tape, &vars, lat).unwrap();
        let r = tape.leaf(Tensor::from_vec(&[b], resid));
        let nell = build_scaled_nell(&mut tape, &gp, r, n_total, b);
        let loss = tape.add(nell, gp.kl);
        let got = tape.value(loss).item();
        assert!((got - plain).abs() < 1e-9, "tape {got}, plain {plain}");
    }

    #[test]
    fn tape_elbo_gradients_match_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let d = 3;
        let m_dim = 5;
        let b = 4;
        let n_total = 20;
        let mut h = KernelHyper::from_values(1.5, 1.1, &[0.9, 1.2, 0.8], &[1.0, 0.7, 1.3]);
        let mut v = VariationalState::seeded(m_dim, d, 36);
        for x in v.m.data_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
        for x in v.s_raw.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
        let mut noise = LikelihoodNoise::new(1.1);
        let latents: Vec<f64> = (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let resid: Vec<f64> = (0..b).map(|_| rng.random_range(-2.0..2.0)).collect();

        let eval = |h: &KernelHyper, v: &VariationalState, noise: &LikelihoodNoise| -> f64 {
            let mut tape = Tape::new();
            let vars = SvgpVars::bind(&mut tape, h, v, noise);
            let lat = tape.leaf(Tensor::from_vec(&[b, d], latents.clone()));
            let gp = build_gp(&mut tape, &vars, lat).unwrap();
            let r = tape.leaf(Tensor::from_vec(&[b], resid.clone()));
            let nell = build_scaled_nell(&mut tape, &gp, r, n_total, b);
            let loss = tape.add(nell, gp.kl);
            tape.value(loss).item()
        };

        // analytic gradients at the base point
        let analytic: Vec<Tensor> = {
            let mut tape = Tape::new();
            let vars = SvgpVars::bind(&mut tape, &h, &v, &noise);
            let lat = tape.leaf(Tensor::from_vec(&[b, d], latents.clone()));
            let gp = build_gp(&mut tape, &vars, lat).unwrap();
            let r = tape.leaf(Tensor::from_vec(&[b], resid.clone()));
            let nell = build_scaled_nell(&mut tape, &gp, r, n_total, b);
            let loss = tape.add(nell, gp.kl);
            let grads = tape.backward(loss);
            let mut out = Vec::new();
            vars.visit(&mut |var| {
                out.push(grads.get(var).cloned().unwrap_or_else(|| Tensor::scalar(0.0)))
            });
            out
        };

        let step = 1e-5;
        let tol = 1e-4;
        // perturb every entry of every GP parameter tensor, in visit order
        for pi in 0..8 {
            let numel = analytic[pi].numel();
            for ci in 0..numel {
                let mut with = |delta: f64| -> f64 {
                    {
                        let field: &mut Tensor = match pi {
                            0 => &mut h.raw_sig_f2,
                            1 => &mut h.raw_alpha,
                            2 => &mut h.raw_ls_mat,
                            3 => &mut h.raw_ls_rq,
                            4 => &mut v.z,
                            5 => &mut v.m,
                            6 => &mut v.s_raw,
                            _ => &mut noise.raw,
                        };
                        field.data_mut()[ci] += delta;
                    }
                    let out = eval(&h, &v, &noise);
                    {
                        let field: &mut Tensor = match pi {
                            0 => &mut h.raw_sig_f2,
                            1 => &mut h.raw_alpha,
                            2 => &mut h.raw_ls_mat,
                            3 => &mut h.raw_ls_rq,
                            4 => &mut v.z,
                            5 => &mut v.m,
                            6 => &mut v.s_raw,
                            _ => &mut noise.raw,
                        };
                        field.data_mut()[ci] -= delta;
                    }
                    out
                };
                let fp = with(step);
                let fm = with(-step);
                let numeric = (fp - fm) / (2.0 * step);
                let a = analytic[pi].data()[ci];
                let denom = a.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    (a - numeric).abs() / denom < tol,
                    "param {pi}[{ci}]: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn conditioning_noiseless_interpolates_observation() {
        let h = KernelHyper::from_values(2.0, 1.0, &[1.0, 1.0], &[1.0, 1.0]);
        let mut v = VariationalState::seeded(4, 2, 40);
        v.m = Tensor::from_vec(&[4], vec![0.5, -0.2, 0.9, 0.1]);
        let obs_z = [0.25, -0.4];
        let obs_r = [3.0];
        let cond = ConditionedPredictor::build(&v, &h, 1e-9, &obs_z, &obs_r).unwrap();
        let (mu, var) = cond.predict(&obs_z);
        assert!((mu - 3.0).abs() < 1e-3, "mu {mu}");
        assert!(var <= 1e-3, "var {var}");
    }

    #[test]
    fn conditioning_zero_innovation_preserves_mean() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let h = KernelHyper::from_values(2.0, 1.0, &[0.8, 1.2], &[1.0, 0.9]);
        let mut v = VariationalState::seeded(5, 2, 42);
        for x in v.m.data_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
        let cache = PredictiveCache::build(&v, &h).unwrap();
        let obs_z = [0.3, 0.1, -0.5, 0.7];
        let obs_r: Vec<f64> = (0..2)
            .map(|i| cache.predict(&obs_z[i * 2..(i + 1) * 2]).0)
            .collect();
        let cond = ConditionedPredictor::build(&v, &h, 0.5, &obs_z, &obs_r).unwrap();
        for _ in 0..50 {
            let q = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let (mu0, _) = cache.predict(&q);
            let (mu1, _) = cond.predict(&q);
            assert!((mu0 - mu1).abs() < 1e-9);
        }
    }

    #[test]
    fn conditioning_never_increases_variance() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for mode in [ConditioningCovariance::Prior, ConditioningCovariance::Posterior] {
            let h = KernelHyper::from_values(3.0, 1.0, &[1.0, 1.0], &[1.0, 1.0]);
            let mut v = VariationalState::seeded(5, 2, 44);
            for x in v.m.data_mut() {
                *x = rng.random_range(-1.0..1.0);
            }
            let obs_z: Vec<f64> = (0..3 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let obs_r: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let cond =
                ConditionedPredictor::build_with_mode(&v, &h, 0.8, &obs_z, &obs_r, mode).unwrap();
            for _ in 0..100 {
                let q = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
                let (_, var0) = cond.predict_prior(&q);
                let (_, var1) = cond.predict(&q);
                assert!(var1 <= var0 + 1e-12, "mode {mode:?}: {var1} > {var0}");
            }
        }
    }

    #[test]
    fn conditioning_twice_reduces_variance_further() {
        let h = KernelHyper::from_values(2.0, 1.0, &[1.0], &[1.0]);
        let mut v = VariationalState::seeded(3, 1, 45);
        v.m = Tensor::from_vec(&[3], vec![0.4, -0.3, 0.2]);
        let obs_z = [0.1];
        let obs_r = [1.5];
        let once = ConditionedPredictor::build(&v, &h, 0.5, &obs_z, &obs_r).unwrap();
        let twice_z = [0.1, 0.1];
        let twice_r = [1.5, 1.5];
        let twice = ConditionedPredictor::build(&v, &h, 0.5, &twice_z, &twice_r).unwrap();
        let q = [0.3];
        let (_, v1) = once.predict(&q);
        let (_, v2) = twice.predict(&q);
        assert!(v2 <= v1 + 1e-12);
        assert!(v2 >= 0.0);
    }
}
