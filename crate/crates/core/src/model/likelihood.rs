//! Marginal likelihood with the effects integrated out.
//!
//! With Σ = σ_e² I + Z D Zᵀ, where Z stacks the incidence matrices of the
//! sources with σ_m² > 0 and D = diag(σ_m²), the Woodbury identity gives
//!
//! ```text
//! A      = D⁻¹ + ZᵀZ / σ_e²
//! log|Σ| = n log σ_e² + Σ_m J_m log σ_m² + log|A|
//! rᵀΣ⁻¹r = rᵀr / σ_e² − (Zᵀr)ᵀ A⁻¹ (Zᵀr) / σ_e⁴
//! ```
//!
//! so only a dense Cholesky factorization of the (effects × effects) matrix A
//! is needed, never the n × n covariance.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::{MeanPrior, VarianceVector};
use crate::design::Dataset;
use crate::error::{Error, Result};

/// Precomputed cross-products for repeated likelihood evaluations.
#[derive(Debug, Clone)]
pub struct MarginalLikelihood {
    n: usize,
    mean: f64,
    /// Σ (y − ȳ)²
    centered_ss: f64,
    offsets: Vec<usize>,
    sizes: Vec<usize>,
    /// Column 0 is the intercept, then the effects of every source.
    cross: DMatrix<f64>,
    /// Zᵀ(y − ȳ) over the same columns.
    zty: Vec<f64>,
}

impl MarginalLikelihood {
    pub fn new(ds: &Dataset) -> Self {
        let y = ds.responses();
        let n = y.len();
        let mean = ds.mean();
        let centered: Vec<f64> = y.iter().map(|v| v - mean).collect();
        let cp = CrossProducts::new(ds, &centered);
        Self {
            n,
            mean,
            centered_ss: centered.iter().map(|v| v * v).sum(),
            offsets: cp.offsets,
            sizes: cp.sizes,
            cross: cp.cross,
            zty: cp.zty,
        }
    }

    pub fn n_sources(&self) -> usize {
        self.sizes.len() + 1
    }

    /// log N(y; μ1, Σ) for variances `sigma2` (one per source, residual last).
    pub fn log_likelihood(&self, sigma2: &[f64], mu: f64) -> Result<f64> {
        self.evaluate(sigma2, mu, None)
    }

    /// log ∫ N(y; μ1, Σ) N(μ; m₀, τ²) dμ, i.e. the likelihood with the grand
    /// mean integrated against its prior.
    pub fn log_likelihood_mean_integrated(&self, sigma2: &[f64], prior: &MeanPrior) -> Result<f64> {
        self.evaluate(sigma2, prior.mean, Some(prior.sd * prior.sd))
    }

    fn evaluate(&self, sigma2: &[f64], mu: f64, mean_var: Option<f64>) -> Result<f64> {
        let m_total = self.n_sources();
        if sigma2.len() != m_total {
            return Err(Error::Degenerate(format!(
                "expected {m_total} variance components, got {}",
                sigma2.len()
            )));
        }
        let se2 = sigma2[m_total - 1];
        if !(se2 > 0.0 && se2.is_finite()) {
            return Err(Error::Singular("residual variance must be > 0 for a nonsingular covariance".into()));
        }
        let n = self.n as f64;
        let shift = mu - self.mean;
        // r = y − μ1; rᵀr and Zᵀr from the centered cross-products
        let rtr = self.centered_ss + n * shift * shift;

        let mut cols: Vec<usize> = Vec::new();
        let mut prior_prec: Vec<f64> = Vec::new();
        let mut logdet = n * se2.ln();
        if let Some(tau2) = mean_var {
            cols.push(0);
            prior_prec.push(1.0 / tau2);
            logdet += tau2.ln();
        }
        for (m, (&off, &size)) in self.offsets.iter().zip(&self.sizes).enumerate() {
            let s2 = sigma2[m];
            if s2 < 0.0 || !s2.is_finite() {
                return Err(Error::Degenerate(format!("variance {s2} is invalid")));
            }
            if s2 > 0.0 {
                cols.extend(off..off + size);
                prior_prec.extend(std::iter::repeat_n(1.0 / s2, size));
                logdet += size as f64 * s2.ln();
            }
        }

        if cols.is_empty() {
            return Ok(-0.5 * (n * (2.0 * PI).ln() + logdet + rtr / se2));
        }
        let q = cols.len();
        let mut a = DMatrix::from_fn(q, q, |i, j| self.cross[(cols[i], cols[j])] / se2);
        for (i, p) in prior_prec.iter().enumerate() {
            a[(i, i)] += p;
        }
        let b = DVector::from_iterator(
            q,
            cols.iter().map(|&c| self.zty[c] - shift * self.cross[(c, 0)]),
        );
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::Singular("Woodbury system is not positive definite".into()))?;
        let logdet_a: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let x = chol.solve(&b);
        let quad = rtr / se2 - b.dot(&x) / (se2 * se2);
        Ok(-0.5 * (n * (2.0 * PI).ln() + logdet + logdet_a + quad))
    }
}

/// XᵀX and Xᵀv for X = [1 | Z_1 | … | Z_K], the intercept followed by the
/// incidence columns of every non-residual source.
#[derive(Debug, Clone)]
pub(crate) struct CrossProducts {
    pub offsets: Vec<usize>,
    pub sizes: Vec<usize>,
    pub cross: DMatrix<f64>,
    pub zty: Vec<f64>,
}

impl CrossProducts {
    pub fn new(ds: &Dataset, v: &[f64]) -> Self {
        let mut offsets = Vec::new();
        let mut sizes = Vec::new();
        let mut q = 1;
        for m in ds.memberships() {
            offsets.push(q);
            sizes.push(m.n_effects);
            q += m.n_effects;
        }
        let mut cross = DMatrix::zeros(q, q);
        let mut zty = vec![0.0; q];
        let mut cols = Vec::with_capacity(offsets.len() + 1);
        for (i, &vi) in v.iter().enumerate() {
            cols.clear();
            cols.push(0);
            for (m, off) in ds.memberships().iter().zip(&offsets) {
                cols.push(off + m.effect_of[i]);
            }
            for &a in &cols {
                zty[a] += vi;
                for &b in &cols {
                    cross[(a, b)] += 1.0;
                }
            }
        }
        Self { offsets, sizes, cross, zty }
    }
}

/// log N(y; μ1, Σ_m σ_m² Z_m Z_mᵀ + σ_e² I).
pub fn marginal_log_likelihood(ds: &Dataset, v: &VarianceVector, mu: f64) -> Result<f64> {
    MarginalLikelihood::new(ds).log_likelihood(v.sigma2(), mu)
}
