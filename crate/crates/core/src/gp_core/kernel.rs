//! Covariance functions and their hyperparameter gradients.
//!
//! Hyperparameters are stored as a flat vector in log space (offsets of
//! the linear kernel stay in natural units), so the optimizer works
//! unconstrained:
//!
//! * Matérn 5/2 / squared exponential: `[log σ_f², log ρ_1..ρ_d, log σ²]`
//!   (a single shared `log ρ` when `shared_lengthscale` is set);
//! * linear: `[log σ_f², c_1..c_d, log σ²]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT5: f64 = 2.236_067_977_499_79;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Matern52,
    SquaredExponential,
    Linear,
}

impl KernelFamily {
    pub fn label(self) -> &'static str {
        match self {
            KernelFamily::Matern52 => "Ma5",
            KernelFamily::SquaredExponential => "SE",
            KernelFamily::Linear => "Lin",
        }
    }
}

/// A kernel family plus its packed hyperparameters for a fixed input
/// dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelConfig {
    family: KernelFamily,
    dim: usize,
    shared_lengthscale: bool,
    theta: Vec<f64>,
}

impl KernelConfig {
    /// Unit output scale and lengthscales (zero offsets for the linear
    /// family), noise variance 0.1.
    pub fn new(family: KernelFamily, dim: usize) -> Self {
        let mut theta = vec![0.0; dim + 1]; // log σ_f² plus per-dim entries
        theta.push((0.1_f64).ln());
        KernelConfig {
            family,
            dim,
            shared_lengthscale: false,
            theta,
        }
    }

    /// Use one lengthscale for every input dimension (Matérn/SE only).
    pub fn with_shared_lengthscale(mut self) -> Self {
        if !matches!(self.family, KernelFamily::Linear) && !self.shared_lengthscale {
            self.shared_lengthscale = true;
            self.theta = vec![self.theta[0], 0.0, *self.theta.last().unwrap()];
        }
        self
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shared_lengthscale(&self) -> bool {
        self.shared_lengthscale
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn set_theta(&mut self, theta: &[f64]) {
        assert_eq!(theta.len(), self.theta.len(), "theta length mismatch");
        self.theta.copy_from_slice(theta);
    }

    pub fn output_scale(&self) -> f64 {
        self.theta[0].exp()
    }

    pub fn noise_variance(&self) -> f64 {
        self.theta[self.theta.len() - 1].exp()
    }

    /// Lengthscale per input dimension (expanded when shared).
    pub fn lengthscales(&self) -> Vec<f64> {
        match self.family {
            KernelFamily::Linear => vec![f64::NAN; self.dim],
            _ => {
                if self.shared_lengthscale {
                    vec![self.theta[1].exp(); self.dim]
                } else {
                    self.theta[1..=self.dim].iter().map(|t| t.exp()).collect()
                }
            }
        }
    }

    /// Offsets of the linear kernel.
    pub fn offsets(&self) -> Vec<f64> {
        match self.family {
            KernelFamily::Linear => self.theta[1..=self.dim].to_vec(),
            _ => Vec::new(),
        }
    }

    fn check_dim(&self, cols: usize, context: &str) -> Result<()> {
        if cols != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: cols,
                context: context.to_string(),
            });
        }
        Ok(())
    }

    /// Cross-covariance matrix `K(A, B)` (noise not included).
    pub fn eval(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(a.ncols(), "kernel eval lhs")?;
        self.check_dim(b.ncols(), "kernel eval rhs")?;
        let sf2 = self.output_scale();
        let out = match self.family {
            KernelFamily::Matern52 | KernelFamily::SquaredExponential => {
                let rho = self.lengthscales();
                DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
                    let mut r2 = 0.0;
                    for k in 0..self.dim {
                        let d = (a[(i, k)] - b[(j, k)]) / rho[k];
                        r2 += d * d;
                    }
                    match self.family {
                        KernelFamily::Matern52 => matern52_of_r(sf2, r2.sqrt()),
                        _ => sf2 * (-0.5 * r2).exp(),
                    }
                })
            }
            KernelFamily::Linear => {
                let c = self.offsets();
                DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
                    let mut dot = 0.0;
                    for k in 0..self.dim {
                        dot += (a[(i, k)] - c[k]) * (b[(j, k)] - c[k]);
                    }
                    sf2 * dot
                })
            }
        };
        Ok(out)
    }

    /// `K(X, X)` plus the gradient matrices `∂K/∂θ_j` for every packed
    /// hyperparameter except the noise variance (whose contribution to
    /// `K + σ²I` is `σ² I` and is handled by the caller).
    pub fn eval_symmetric_with_grads(
        &self,
        x: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        self.check_dim(x.ncols(), "kernel grads")?;
        let n = x.nrows();
        let sf2 = self.output_scale();
        let k = self.eval(x, x)?;
        // ∂K/∂log σ_f² = K for every family.
        let mut grads = vec![k.clone()];
        match self.family {
            KernelFamily::Matern52 | KernelFamily::SquaredExponential => {
                let rho = self.lengthscales();
                let n_ls = if self.shared_lengthscale { 1 } else { self.dim };
                let mut ls_grads = vec![DMatrix::zeros(n, n); n_ls];
                for i in 0..n {
                    for j in 0..n {
                        let mut r2 = 0.0;
                        let mut s = vec![0.0; self.dim];
                        for m in 0..self.dim {
                            let d = (x[(i, m)] - x[(j, m)]) / rho[m];
                            s[m] = d * d;
                            r2 += s[m];
                        }
                        let r = r2.sqrt();
                        // dK/dlog ρ_m = coeff(r) * s_m
                        let coeff = match self.family {
                            KernelFamily::Matern52 => {
                                (5.0 / 3.0) * sf2 * (1.0 + SQRT5 * r) * (-SQRT5 * r).exp()
                            }
                            _ => sf2 * (-0.5 * r2).exp(),
                        };
                        if self.shared_lengthscale {
                            ls_grads[0][(i, j)] = coeff * r2;
                        } else {
                            for m in 0..self.dim {
                                ls_grads[m][(i, j)] = coeff * s[m];
                            }
                        }
                    }
                }
                grads.extend(ls_grads);
            }
            KernelFamily::Linear => {
                let c = self.offsets();
                for m in 0..self.dim {
                    let g = DMatrix::from_fn(n, n, |i, j| {
                        -sf2 * (x[(i, m)] + x[(j, m)] - 2.0 * c[m])
                    });
                    grads.push(g);
                }
            }
        }
        Ok((k, grads))
    }
}

fn matern52_of_r(sf2: f64, r: f64) -> f64 {
    let a = SQRT5 * r;
    sf2 * (1.0 + a + a * a / 3.0) * (-a).exp()
}
