//! The additive normal variance-components model.
//!
//! y = μ + Σ_m Z_m η_m + e, with η_m ~ N(0, σ_m² I) for each non-residual
//! source and e ~ N(0, σ_e² I). Variances are indexed by source in layout
//! order; the residual is always last.

mod likelihood;
mod mixing;
mod prior;

pub use likelihood::{marginal_log_likelihood, MarginalLikelihood};
pub(crate) use likelihood::CrossProducts;
pub use mixing::{submodel_posterior, IntegrationConfig, SubmodelEstimate, SubmodelPosterior};
pub use prior::{
    prior_log_density, sample_dirichlet, Concentration, MeanPrior, ModelPrior, PerSource, PriorConfig,
    PriorKind, PriorSpec,
};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::design::Dataset;
use crate::error::{Error, Result};

/// Variance components with their total and relative shares.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceVector {
    sigma2: Vec<f64>,
    total: f64,
    phi: Vec<f64>,
}

impl VarianceVector {
    pub fn new(sigma2: Vec<f64>) -> Result<Self> {
        if sigma2.is_empty() {
            return Err(Error::Degenerate("empty variance vector".into()));
        }
        if let Some(v) = sigma2.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Degenerate(format!("variance {v} is not a finite non-negative number")));
        }
        let total: f64 = sigma2.iter().sum();
        let phi = if total > 0.0 {
            sigma2.iter().map(|s| s / total).collect()
        } else {
            vec![0.0; sigma2.len()]
        };
        Ok(Self { sigma2, total, phi })
    }

    /// Build from the total T and simplex shares φ.
    pub fn from_relative(total: f64, phi: &[f64]) -> Result<Self> {
        if !total.is_finite() || total < 0.0 {
            return Err(Error::Degenerate(format!("total variance {total} is invalid")));
        }
        let s: f64 = phi.iter().sum();
        if phi.iter().any(|p| !p.is_finite() || *p < 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Degenerate("shares must lie on the simplex".into()));
        }
        Ok(Self {
            sigma2: phi.iter().map(|p| p * total).collect(),
            total,
            phi: phi.to_vec(),
        })
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn len(&self) -> usize {
        self.sigma2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma2.is_empty()
    }
}

/// T = Σ σ_m² and φ_m = σ_m² / T.
pub fn relative_components(sigma2: &[f64]) -> Result<(f64, Vec<f64>)> {
    if sigma2.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Degenerate("variances must be finite and non-negative".into()));
    }
    let total: f64 = sigma2.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("all variance components are zero".into()));
    }
    Ok((total, sigma2.iter().map(|s| s / total).collect()))
}

/// Draw a response vector from the model with fresh effects for every source.
pub fn simulate_responses<R: Rng + ?Sized>(ds: &Dataset, mu: f64, sigma2: &[f64], rng: &mut R) -> Vec<f64> {
    let n_eff = ds.layout().n_effect_sources();
    assert_eq!(sigma2.len(), n_eff + 1, "one variance per source");
    let effects: Vec<Vec<f64>> = ds
        .memberships()
        .iter()
        .zip(sigma2)
        .map(|(m, &s2)| {
            let sd = s2.sqrt();
            (0..m.n_effects)
                .map(|_| { let z: f64 = StandardNormal.sample(&mut *rng); sd * z })
                .collect()
        })
        .collect();
    responses_with_effects(ds, mu, &effects, sigma2[n_eff], rng)
}

/// Draw a response vector given fixed effects; only the residuals are new.
pub fn responses_with_effects<R: Rng + ?Sized>(
    ds: &Dataset,
    mu: f64,
    effects: &[Vec<f64>],
    residual_var: f64,
    rng: &mut R,
) -> Vec<f64> {
    let sd = residual_var.sqrt();
    (0..ds.n())
        .map(|i| {
            let fixed: f64 = ds
                .memberships()
                .iter()
                .zip(effects)
                .map(|(m, eta)| eta[m.effect_of[i]])
                .sum();
            let e: f64 = StandardNormal.sample(&mut *rng);
            mu + fixed + sd * e
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_component_examples() {
        let (t, phi) = relative_components(&[3.0, 1.0]).unwrap();
        assert_eq!(t, 4.0);
        assert_eq!(phi, vec![0.75, 0.25]);
        let (_, phi) = relative_components(&[2.0, 2.0, 2.0]).unwrap();
        assert!(phi.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        let (_, phi) = relative_components(&[0.0, 5.0]).unwrap();
        assert_eq!(phi, vec![0.0, 1.0]);
        assert!(matches!(relative_components(&[0.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn variance_vector_invariants() {
        let v = VarianceVector::new(vec![0.3, 1.2, 0.5]).unwrap();
        assert!((v.phi().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (s, p) in v.sigma2().iter().zip(v.phi()) {
            assert!((s - p * v.total()).abs() < 1e-12);
        }
        let w = VarianceVector::from_relative(v.total(), v.phi()).unwrap();
        for (a, b) in v.sigma2().iter().zip(w.sigma2()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(VarianceVector::new(vec![-1.0]).is_err());
    }
}
