//! Diagonal Gaussians, Gaussian mixtures, responsibilities, and the KL terms
//! used by the mixture-prior loss.
//!
//! Plain-`f64` versions live on the types; [`ad`] has the same quantities as
//! tape ops for training.

use std::f64::consts::PI;

use crate::error::{shape_err, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5; // ln(2π)

/// Diagonal Gaussian parameterised by mean and log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return shape_err(
                "DiagGaussian",
                format!("mean {} vs log_var {}", mean.len(), log_var.len()),
            );
        }
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn var(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }

    pub fn log_pdf(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return shape_err(
                "log_pdf",
                format!("z has {} dims, gaussian {}", z.len(), self.dim()),
            );
        }
        let mut acc = 0.0;
        for ((&x, &m), &lv) in z.iter().zip(&self.mean).zip(&self.log_var) {
            let d = x - m;
            acc += lv + d * d * (-lv).exp() + LN_2PI;
        }
        Ok(-0.5 * acc)
    }

    /// `KL(self || N(0, I)) = -1/2 Σ (log σ² - μ² - σ² + 1)`.
    pub fn kl_to_std_normal(&self) -> f64 {
        -0.5 * self
            .mean
            .iter()
            .zip(&self.log_var)
            .map(|(&m, &lv)| lv - m * m - lv.exp() + 1.0)
            .sum::<f64>()
    }

    /// `mean + exp(log_var / 2) * noise`.
    pub fn reparam_sample(&self, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.dim() {
            return shape_err(
                "reparam_sample",
                format!("noise {} vs dim {}", noise.len(), self.dim()),
            );
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.log_var)
            .zip(noise)
            .map(|((&m, &lv), &n)| m + (0.5 * lv).exp() * n)
            .collect())
    }
}

/// `K` diagonal components with mixing weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    components: Vec<DiagGaussian>,
    weights: Vec<f64>,
}

impl MixtureParams {
    pub fn new(components: Vec<DiagGaussian>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument("mixture needs K >= 1".into()));
        }
        if weights.len() != components.len() {
            return shape_err("MixtureParams", "one weight per component");
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return shape_err("MixtureParams", "components differ in dimension");
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidArgument(format!(
                "weights {weights:?} are not a distribution"
            )));
        }
        Ok(Self {
            components,
            weights,
        })
    }

    /// Equal weights `1/K`.
    pub fn uniform(components: Vec<DiagGaussian>) -> Result<Self> {
        let k = components.len().max(1);
        Self::new(components, vec![1.0 / k as f64; k])
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn components(&self) -> &[DiagGaussian] {
        &self.components
    }

    pub fn component(&self, k: usize) -> &DiagGaussian {
        &self.components[k]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn log_joint(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.components
            .iter()
            .zip(&self.weights)
            .map(|(c, &w)| Ok(w.ln() + c.log_pdf(z)?))
            .collect()
    }

    /// `log Σ_k π_k N(z; μ_k, Σ_k)` via log-sum-exp.
    pub fn log_pdf(&self, z: &[f64]) -> Result<f64> {
        Ok(log_sum_exp(&self.log_joint(z)?))
    }

    /// Posterior component probabilities at `z`, computed in log space.
    pub fn responsibilities(&self, z: &[f64]) -> Result<Responsibilities> {
        let lj = self.log_joint(z)?;
        let lse = log_sum_exp(&lj);
        if !lse.is_finite() {
            return Err(Error::Domain {
                op: "responsibilities",
                detail: "every component density underflowed".into(),
            });
        }
        Ok(Responsibilities(
            lj.iter().map(|l| (l - lse).exp()).collect(),
        ))
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Posterior probabilities over mixture components.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities(pub Vec<f64>);

impl Responsibilities {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        crate::util::argmax(&self.0)
    }

    /// `Σ_k π̃_k (log π̃_k + log K)` with `0 log 0 = 0`.
    pub fn kl_to_uniform(&self) -> f64 {
        kl_categorical_to_uniform(&self.0)
    }
}

pub fn kl_categorical_to_uniform(p: &[f64]) -> f64 {
    let ln_k = (p.len() as f64).ln();
    p.iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| q * (q.ln() + ln_k))
        .sum()
}

/// Density of the standard normal, used by quadrature oracles.
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// The same quantities as differentiable tape ops.
pub mod ad {
    use crate::error::Result;
    use crate::tensor::{Tape, Tensor, Var};

    use super::LN_2PI;

    fn row_sums(tape: &mut Tape, m: Var) -> Result<Var> {
        let (rows, cols) = (tape.value(m).rows(), tape.value(m).cols());
        let ones = tape.constant(Tensor::full(&[cols, 1], 1.0))?;
        let s = tape.matmul(m, ones)?;
        tape.reshape(s, &[rows])
    }

    /// Log-density of a diagonal Gaussian; `mean`, `log_var`, `z` are `[d]`. Scalar result.
    pub fn gaussian_log_pdf(tape: &mut Tape, mean: Var, log_var: Var, z: Var) -> Result<Var> {
        let d = tape.value(mean).numel();
        let diff = tape.sub(z, mean)?;
        let sq = tape.square(diff)?;
        let neg_lv = tape.neg(log_var)?;
        let prec = tape.exp(neg_lv)?;
        let maha = tape.mul(sq, prec)?;
        let inner = tape.add(maha, log_var)?;
        let s = tape.sum(inner)?;
        let s = tape.add_scalar(s, d as f64 * LN_2PI)?;
        tape.scale(s, -0.5)
    }

    /// Per-component log-densities for stacked `[K, d]` means/log-variances at `z: [d]`.
    pub fn component_log_pdfs(tape: &mut Tape, means: Var, log_vars: Var, z: Var) -> Result<Var> {
        let d = tape.value(means).cols();
        let diff = tape.sub(means, z)?;
        let sq = tape.square(diff)?;
        let neg_lv = tape.neg(log_vars)?;
        let prec = tape.exp(neg_lv)?;
        let maha = tape.mul(sq, prec)?;
        let inner = tape.add(maha, log_vars)?;
        let s = row_sums(tape, inner)?;
        let s = tape.add_scalar(s, d as f64 * LN_2PI)?;
        tape.scale(s, -0.5)
    }

    /// Log-normalise a `[K]` vector of log-joints into log-responsibilities.
    pub fn log_responsibilities(tape: &mut Tape, log_joint: Var) -> Result<Var> {
        let k = tape.value(log_joint).numel();
        let row = tape.reshape(log_joint, &[1, k])?;
        let lse = tape.logsumexp_rows(row)?;
        let col = tape.reshape(log_joint, &[k, 1])?;
        let out = tape.sub(col, lse)?;
        tape.reshape(out, &[k])
    }

    /// `log Σ_k exp(log_joint_k)`, scalar.
    pub fn mixture_log_pdf(tape: &mut Tape, log_joint: Var) -> Result<Var> {
        let k = tape.value(log_joint).numel();
        let row = tape.reshape(log_joint, &[1, k])?;
        let lse = tape.logsumexp_rows(row)?;
        tape.reshape(lse, &[])
    }

    pub fn kl_to_std_normal(tape: &mut Tape, mean: Var, log_var: Var) -> Result<Var> {
        let m2 = tape.square(mean)?;
        let v = tape.exp(log_var)?;
        let a = tape.sub(log_var, m2)?;
        let b = tape.sub(a, v)?;
        let s = tape.sum(b)?;
        let d = tape.value(mean).numel() as f64;
        let s = tape.add_scalar(s, d)?;
        tape.scale(s, -0.5)
    }

    /// `Σ_k exp(lr_k) (lr_k + log K)` from log-responsibilities.
    pub fn kl_categorical_to_uniform(tape: &mut Tape, log_resp: Var) -> Result<Var> {
        let k = tape.value(log_resp).numel();
        let p = tape.exp(log_resp)?;
        let shifted = tape.add_scalar(log_resp, (k as f64).ln())?;
        let prod = tape.mul(p, shifted)?;
        tape.sum(prod)
    }

    pub fn reparam(tape: &mut Tape, mean: Var, log_var: Var, noise: Var) -> Result<Var> {
        let half = tape.scale(log_var, 0.5)?;
        let std = tape.exp(half)?;
        let scaled = tape.mul(std, noise)?;
        tape.add(mean, scaled)
    }
}
