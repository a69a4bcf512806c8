//! Exact Gaussian process regression.
//!
//! The model keeps its training data (the GP is non-parametric), a
//! Cholesky factor of `K(X,X) + σ²I + jitter·I`, and the weight vector
//! `alpha` solved against the targets. Targets are centered and scaled
//! before fitting so the zero-mean convention holds, and the transform is
//! inverted on prediction. Hyperparameters are optimized by L-BFGS on the
//! negative log marginal likelihood with analytic gradients, best of
//! several randomly perturbed restarts.

pub mod kernel;
pub mod optimize;

pub use kernel::{KernelConfig, KernelFamily};
pub use optimize::{minimize, OptimOptions, OptimOutcome};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_6;

/// Relative jitter ladder applied to the mean diagonal when the plain
/// covariance matrix fails to factor.
const JITTER_LADDER: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];

/// Affine transform applied to targets before fitting.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TargetTransform {
    pub mean: f64,
    pub scale: f64,
}

impl TargetTransform {
    fn identity() -> Self {
        TargetTransform {
            mean: 0.0,
            scale: 1.0,
        }
    }
}

/// Controls for hyperparameter optimization.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Scale targets to unit variance in addition to centering them.
    pub scale_targets: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            restarts: 5,
            max_iters: 500,
            seed: 0,
            scale_targets: true,
        }
    }
}

/// A fitted Gaussian process. Immutable once constructed; safe to share
/// for concurrent prediction.
#[derive(Debug, Clone)]
pub struct GpModel {
    kernel: KernelConfig,
    x_train: DMatrix<f64>,
    y_train: DVector<f64>,
    transform: TargetTransform,
    chol_l: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
    nlml: f64,
}

/// Joint posterior over a batch of test inputs.
#[derive(Debug, Clone)]
pub struct PosteriorPrediction {
    pub mean: DVector<f64>,
    /// Full covariance matrix of the test outputs.
    pub covariance: DMatrix<f64>,
    pub includes_noise: bool,
}

impl PosteriorPrediction {
    /// Per-point standard deviations (sqrt of the covariance diagonal).
    pub fn std(&self) -> DVector<f64> {
        DVector::from_fn(self.mean.len(), |i, _| self.covariance[(i, i)].sqrt())
    }
}

struct Factorization {
    l: DMatrix<f64>,
    alpha: DVector<f64>,
    nlml: f64,
    jitter: f64,
}

fn cholesky_with_jitter(
    ky: &DMatrix<f64>,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = ky.nrows();
    let mean_diag = ky.trace() / n as f64;
    for (step, level) in JITTER_LADDER.iter().enumerate() {
        let jitter = level * mean_diag;
        let mut m = ky.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            if step > 1 {
                log::debug!(
                    "cholesky jitter escalated to {jitter:.3e} ({level:.0e} of mean diagonal)"
                );
            }
            return Ok((chol, jitter));
        }
    }
    Err(Error::Conditioning {
        max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] * mean_diag,
    })
}

fn noisy_covariance(kernel: &KernelConfig, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut ky = kernel.eval(x, x)?;
    let sigma2 = kernel.noise_variance();
    for i in 0..ky.nrows() {
        ky[(i, i)] += sigma2;
    }
    Ok(ky)
}

fn factorize(kernel: &KernelConfig, x: &DMatrix<f64>, z: &DVector<f64>) -> Result<Factorization> {
    let n = x.nrows();
    if n == 0 {
        return Ok(Factorization {
            l: DMatrix::zeros(0, 0),
            alpha: DVector::zeros(0),
            nlml: 0.0,
            jitter: 0.0,
        });
    }
    let ky = noisy_covariance(kernel, x)?;
    let (chol, jitter) = cholesky_with_jitter(&ky)?;
    let alpha = chol.solve(z);
    let l = chol.unpack();
    let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let nlml = 0.5 * z.dot(&alpha) + 0.5 * log_det + 0.5 * n as f64 * LN_2PI;
    Ok(Factorization {
        l,
        alpha,
        nlml,
        jitter,
    })
}

/// Negative log marginal likelihood of `y` under `kernel` at its current
/// hyperparameters (no target transform applied).
pub fn nlml(kernel: &KernelConfig, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    Ok(factorize(kernel, x, y)?.nlml)
}

/// NLML and its gradient with respect to the packed hyperparameters.
///
/// Uses the trace identity `∂NLML/∂θ_j = -1/2 tr((ααᵀ - K_y⁻¹) ∂K_y/∂θ_j)`
/// with analytic kernel derivatives.
pub fn nlml_with_grad(
    kernel: &KernelConfig,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(f64, Vec<f64>)> {
    let n = x.nrows();
    let (_, dk) = kernel.eval_symmetric_with_grads(x)?;
    let ky = noisy_covariance(kernel, x)?;
    let (chol, _) = cholesky_with_jitter(&ky)?;
    let alpha = chol.solve(y);
    let k_inv = chol.inverse();
    let l = chol.unpack();
    let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let value = 0.5 * y.dot(&alpha) + 0.5 * log_det + 0.5 * n as f64 * LN_2PI;

    let g_mat = &alpha * alpha.transpose() - k_inv;
    let mut grad = Vec::with_capacity(kernel.n_params());
    for d in &dk {
        let trace_product = g_mat.zip_fold(d, 0.0, |acc, g, dv| acc + g * dv);
        grad.push(-0.5 * trace_product);
    }
    // ∂K_y/∂log σ² = σ² I.
    grad.push(-0.5 * kernel.noise_variance() * g_mat.trace());
    Ok((value, grad))
}

fn column_std(x: &DMatrix<f64>, j: usize) -> f64 {
    let n = x.nrows() as f64;
    let col = x.column(j);
    let mean = col.sum() / n;
    (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

fn initial_theta(config: &KernelConfig, x: &DMatrix<f64>, z: &DVector<f64>) -> Vec<f64> {
    let n = z.len() as f64;
    let mean_z = z.sum() / n;
    let var_z = (z.iter().map(|v| (v - mean_z) * (v - mean_z)).sum::<f64>() / n).max(1e-12);
    let d = config.dim();
    let mut theta = Vec::with_capacity(config.n_params());
    match config.family() {
        KernelFamily::Linear => {
            // The linear kernel sums over dimensions; spread the target
            // variance across them.
            theta.push((var_z / d.max(1) as f64).ln());
            for j in 0..d {
                theta.push(x.column(j).sum() / x.nrows() as f64);
            }
        }
        _ => {
            theta.push(var_z.ln());
            if config.shared_lengthscale() {
                let mean_log_std = (0..d)
                    .map(|j| column_std(x, j).max(1e-8).ln())
                    .sum::<f64>()
                    / d.max(1) as f64;
                theta.push(mean_log_std);
            } else {
                for j in 0..d {
                    theta.push(column_std(x, j).max(1e-8).ln());
                }
            }
        }
    }
    theta.push((0.1 * var_z).ln());
    theta
}

impl GpModel {
    /// Build a model at fixed hyperparameters, no optimization and no
    /// target transform. Accepts an empty training set, in which case
    /// predictions equal the prior.
    pub fn with_hyperparams(
        x: DMatrix<f64>,
        y: DVector<f64>,
        kernel: KernelConfig,
    ) -> Result<GpModel> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: y.len(),
                context: "training rows vs targets".to_string(),
            });
        }
        let f = factorize(&kernel, &x, &y)?;
        Ok(GpModel {
            kernel,
            x_train: x,
            y_train: y,
            transform: TargetTransform::identity(),
            chol_l: f.l,
            alpha: f.alpha,
            jitter: f.jitter,
            nlml: f.nlml,
        })
    }

    /// Fit hyperparameters by minimizing the NLML, best of
    /// `opts.restarts` randomly perturbed starts (restarts run in
    /// parallel and the outcome is deterministic for a given seed).
    pub fn fit(
        x: DMatrix<f64>,
        y: DVector<f64>,
        config: KernelConfig,
        opts: &FitOptions,
    ) -> Result<GpModel> {
        if x.nrows() < 2 {
            return Err(Error::EmptyDataset(format!(
                "{} training row(s); at least 2 required to fit",
                x.nrows()
            )));
        }
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: y.len(),
                context: "training rows vs targets".to_string(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::ContractViolation(
                "training targets must be finite".to_string(),
            ));
        }

        let mean = y.sum() / y.len() as f64;
        let scale = if opts.scale_targets {
            let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / y.len() as f64;
            if var.sqrt() > 1e-12 {
                var.sqrt()
            } else {
                1.0
            }
        } else {
            1.0
        };
        let transform = TargetTransform { mean, scale };
        let z = DVector::from_fn(y.len(), |i, _| (y[i] - mean) / scale);

        let base_theta = initial_theta(&config, &x, &z);
        let optim_opts = OptimOptions {
            max_iters: opts.max_iters,
            ..OptimOptions::default()
        };

        let starts: Vec<Vec<f64>> = (0..opts.restarts.max(1))
            .map(|r| {
                if r == 0 {
                    base_theta.clone()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(
                        opts.seed ^ (r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                    );
                    base_theta
                        .iter()
                        .map(|t| t + rng.random_range(-2.0..2.0))
                        .collect()
                }
            })
            .collect();

        let outcomes: Vec<Option<OptimOutcome>> = starts
            .par_iter()
            .map(|theta0| {
                let objective = |theta: &[f64]| {
                    if theta.iter().any(|t| !t.is_finite() || t.abs() > 50.0) {
                        return None;
                    }
                    let mut k = config.clone();
                    k.set_theta(theta);
                    match nlml_with_grad(&k, &x, &z) {
                        Ok((f, g))
                            if f.is_finite() && g.iter().all(|v| v.is_finite()) =>
                        {
                            Some((f, g))
                        }
                        _ => None,
                    }
                };
                minimize(objective, theta0, &optim_opts)
            })
            .collect();

        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for (r, outcome) in outcomes.into_iter().enumerate() {
            let Some(o) = outcome else { continue };
            if !o.f.is_finite() {
                continue;
            }
            let better = match &best {
                None => true,
                Some((_, f_best, _)) => o.f < *f_best,
            };
            if better {
                best = Some((r, o.f, o.x));
            }
        }
        let Some((_, _, theta)) = best else {
            return Err(Error::OptimizationFailed(
                "every restart produced a non-finite NLML".to_string(),
            ));
        };

        let mut kernel = config;
        kernel.set_theta(&theta);
        let f = factorize(&kernel, &x, &z)?;
        Ok(GpModel {
            kernel,
            x_train: x,
            y_train: y,
            transform,
            chol_l: f.l,
            alpha: f.alpha,
            jitter: f.jitter,
            nlml: f.nlml,
        })
    }

    pub fn kernel(&self) -> &KernelConfig {
        &self.kernel
    }

    pub fn nlml(&self) -> f64 {
        self.nlml
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn transform(&self) -> TargetTransform {
        self.transform
    }

    pub fn n_train(&self) -> usize {
        self.x_train.nrows()
    }

    /// Lower-triangular Cholesky factor of the (jittered) noisy training
    /// covariance.
    pub fn cholesky_l(&self) -> &DMatrix<f64> {
        &self.chol_l
    }

    /// Posterior mean and full covariance at `x_star`, computed through
    /// the cached Cholesky factor. `include_noise` adds the observation
    /// noise `σ²` to the covariance diagonal.
    pub fn predict(&self, x_star: &DMatrix<f64>, include_noise: bool) -> Result<PosteriorPrediction> {
        if x_star.ncols() != self.kernel.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.kernel.dim(),
                got: x_star.ncols(),
                context: "prediction inputs".to_string(),
            });
        }
        let m = x_star.nrows();
        let (mean_z, mut cov_z) = if self.x_train.nrows() == 0 {
            (DVector::zeros(m), self.kernel.eval(x_star, x_star)?)
        } else {
            let k_star = self.kernel.eval(&self.x_train, x_star)?;
            let mean_z = k_star.transpose() * &self.alpha;
            let v = self
                .chol_l
                .solve_lower_triangular(&k_star)
                .ok_or(Error::Conditioning { max_jitter: self.jitter })?;
            let cov_z = self.kernel.eval(x_star, x_star)? - v.transpose() * &v;
            (mean_z, cov_z)
        };
        if include_noise {
            let sigma2 = self.kernel.noise_variance();
            for i in 0..m {
                cov_z[(i, i)] += sigma2;
            }
        }

        let scale2 = self.transform.scale * self.transform.scale;
        let mean = DVector::from_fn(m, |i, _| mean_z[i] * self.transform.scale + self.transform.mean);
        let mut covariance = cov_z * scale2;
        let mut worst_clamp = 0.0_f64;
        for i in 0..m {
            let v = covariance[(i, i)];
            if v < 0.0 {
                worst_clamp = worst_clamp.max(-v);
                covariance[(i, i)] = 0.0;
            }
        }
        if worst_clamp > 1e-10 {
            log::warn!("posterior variance clamped to 0 (worst overshoot {worst_clamp:.3e})");
        }
        Ok(PosteriorPrediction {
            mean,
            covariance,
            includes_noise: include_noise,
        })
    }

    pub fn to_record(&self) -> GpModelRecord {
        GpModelRecord {
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            kernel: self.kernel.clone(),
            x_train: (0..self.x_train.nrows())
                .map(|i| self.x_train.row(i).iter().copied().collect())
                .collect(),
            y_train: self.y_train.iter().copied().collect(),
            target_mean: self.transform.mean,
            target_scale: self.transform.scale,
            nlml: self.nlml,
        }
    }

    /// Rebuild a model from its serialized record; the Cholesky factor is
    /// recomputed and checked against the stored NLML within 1e-6.
    pub fn from_record(record: GpModelRecord) -> Result<GpModel> {
        let n = record.x_train.len();
        let d = record.kernel.dim();
        for (i, row) in record.x_train.iter().enumerate() {
            if row.len() != d {
                return Err(Error::ModelLoad(format!(
                    "training row {i} has {} columns, kernel expects {d}",
                    row.len()
                )));
            }
        }
        if record.y_train.len() != n {
            return Err(Error::ModelLoad(format!(
                "{n} training rows but {} targets",
                record.y_train.len()
            )));
        }
        let x = DMatrix::from_fn(n, d, |i, j| record.x_train[i][j]);
        let y = DVector::from_vec(record.y_train.clone());
        let transform = TargetTransform {
            mean: record.target_mean,
            scale: record.target_scale,
        };
        let z = DVector::from_fn(n, |i, _| (y[i] - transform.mean) / transform.scale);
        let f = factorize(&record.kernel, &x, &z)?;
        if (f.nlml - record.nlml).abs() > 1e-6 {
            return Err(Error::ModelLoad(format!(
                "recomputed NLML {:.9} does not match stored {:.9}",
                f.nlml, record.nlml
            )));
        }
        Ok(GpModel {
            kernel: record.kernel,
            x_train: x,
            y_train: y,
            transform,
            chol_l: f.l,
            alpha: f.alpha,
            jitter: f.jitter,
            nlml: f.nlml,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_record()).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<GpModel> {
        let record: GpModelRecord =
            serde_json::from_str(text).map_err(|e| Error::ModelLoad(e.to_string()))?;
        GpModel::from_record(record)
    }
}

/// Serialized form of a [`GpModel`]: the kernel with its
/// log-hyperparameters, the training data, the target transform and an
/// NLML checksum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpModelRecord {
    pub library_version: String,
    pub kernel: KernelConfig,
    pub x_train: Vec<Vec<f64>>,
    pub y_train: Vec<f64>,
    pub target_mean: f64,
    pub target_scale: f64,
    pub nlml: f64,
}
