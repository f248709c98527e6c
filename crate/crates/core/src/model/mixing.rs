//! Posterior probabilities of submodels under a model-mixing prior.
//!
//! Every inclusion set S of non-residual sources (the residual is always
//! included) gets a marginal likelihood
//!
//! ```text
//! p(y | S) = ∫ p(y | μ, T, φ_S) p(μ) p(T) p(φ_S) dμ dT dφ_S
//! ```
//!
//! The grand mean is integrated analytically. The remaining (T, φ_S) integral
//! is estimated by adaptive importance sampling in the unconstrained
//! coordinates u = (log T, log φ_i / φ_k): a pilot from the prior, a few
//! rounds fitting a multivariate t proposal to the weighted draws, and a final
//! pass with a defensive mixture of the prior and that proposal.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::prior::{ln_dirichlet, sample_dirichlet};
use super::{MarginalLikelihood, MeanPrior, ModelPrior, PriorSpec};
use crate::design::Dataset;
use crate::error::{Error, Result};
use crate::seed::{self, tag};

/// At most this many non-residual sources are enumerated.
pub const MAX_MIXING_SOURCES: usize = 8;

const T_DOF: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrationConfig {
    /// Draws in the final importance-sampling pass, per submodel.
    pub draws: usize,
    /// Prior draws used to initialise the proposal.
    pub pilot: usize,
    pub adapt_rounds: usize,
    /// Weight of the prior in the defensive mixture proposal.
    pub defensive_weight: f64,
    pub seed: u64,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            draws: 4000,
            pilot: 2000,
            adapt_rounds: 3,
            defensive_weight: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubmodelEstimate {
    /// Included non-residual sources.
    pub included: Vec<String>,
    pub prior_prob: f64,
    /// `None` when the prior probability is zero and no integration ran.
    pub log_marginal: Option<f64>,
    pub log_marginal_se: Option<f64>,
    pub effective_draws: Option<f64>,
    pub posterior_prob: f64,
    pub posterior_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubmodelPosterior {
    pub sources: Vec<String>,
    pub submodels: Vec<SubmodelEstimate>,
    /// Posterior inclusion probability per non-residual source.
    pub inclusion: Vec<f64>,
}

impl SubmodelPosterior {
    pub fn find(&self, included: &[&str]) -> Option<&SubmodelEstimate> {
        self.submodels
            .iter()
            .find(|s| s.included.len() == included.len() && included.iter().all(|n| s.included.iter().any(|i| i == n)))
    }
}

struct Target<'a> {
    ml: &'a MarginalLikelihood,
    mean: MeanPrior,
    /// Indices of the included components, residual last.
    comps: Vec<usize>,
    alpha: Vec<f64>,
    t_max: f64,
    m_total: usize,
}

impl Target<'_> {
    fn shares(&self, u: &[f64]) -> Vec<f64> {
        let k = self.comps.len();
        let mut z: Vec<f64> = u[1..].to_vec();
        z.push(0.0);
        debug_assert_eq!(z.len(), k);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Prior density in u-coordinates: p(T) T · Dir(φ) Π φ_i.
    fn log_prior(&self, u: &[f64]) -> f64 {
        let t = u[0].exp();
        if !(t > 0.0 && t <= self.t_max) {
            return f64::NEG_INFINITY;
        }
        let phi = self.shares(u);
        let jac: f64 = if phi.len() > 1 { phi.iter().map(|p| p.ln()).sum() } else { 0.0 };
        -self.t_max.ln() + u[0] + ln_dirichlet(&phi, &self.alpha) + jac
    }

    fn log_likelihood(&self, u: &[f64]) -> f64 {
        let t = u[0].exp();
        let phi = self.shares(u);
        let mut sigma2 = vec![0.0; self.m_total];
        for (&c, p) in self.comps.iter().zip(&phi) {
            sigma2[c] = p * t;
        }
        self.ml
            .log_likelihood_mean_integrated(&sigma2, &self.mean)
            .unwrap_or(f64::NEG_INFINITY)
    }

    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let t = self.t_max * rng.random::<f64>().max(f64::MIN_POSITIVE);
        let phi = sample_dirichlet(&self.alpha, rng);
        let k = phi.len();
        let mut u = vec![t.ln()];
        for p in &phi[..k - 1] {
            u.push(p.max(f64::MIN_POSITIVE).ln() - phi[k - 1].max(f64::MIN_POSITIVE).ln());
        }
        u
    }
}

/// Multivariate t proposal.
struct StudentT {
    loc: DVector<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
    dof: f64,
}

impl StudentT {
    fn new(loc: DVector<f64>, cov: DMatrix<f64>, dof: f64) -> Option<Self> {
        let d = loc.len() as f64;
        let chol = cov.cholesky()?.l();
        let logdet: f64 = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_norm = ln_gamma((dof + d) / 2.0)
            - ln_gamma(dof / 2.0)
            - 0.5 * d * (dof * std::f64::consts::PI).ln()
            - 0.5 * logdet;
        Some(Self { loc, chol, log_norm, dof })
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.loc.len();
        let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut *rng)));
        let g: f64 = ChiSquared::new(self.dof).expect("dof > 0").sample(rng);
        let x = &self.loc + (&self.chol * z) * (self.dof / g).sqrt();
        x.iter().copied().collect()
    }

    fn log_density(&self, u: &[f64]) -> f64 {
        let d = self.loc.len() as f64;
        let diff = DVector::from_column_slice(u) - &self.loc;
        let w = self.chol.solve_lower_triangular(&diff).expect("nonsingular factor");
        self.log_norm - 0.5 * (self.dof + d) * (1.0 + w.norm_squared() / self.dof).ln()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Weighted moments of the draws; `None` if the weights have collapsed.
fn fit_proposal(draws: &[Vec<f64>], log_w: &[f64]) -> Option<StudentT> {
    let d = draws[0].len();
    let lse = log_sum_exp(log_w);
    if !lse.is_finite() {
        return None;
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - lse).exp()).collect();
    let mut mean = DVector::zeros(d);
    for (x, wi) in draws.iter().zip(&w) {
        mean += DVector::from_column_slice(x) * *wi;
    }
    let mut cov = DMatrix::zeros(d, d);
    for (x, wi) in draws.iter().zip(&w) {
        let diff = DVector::from_column_slice(x) - &mean;
        cov += &diff * diff.transpose() * *wi;
    }
    // inflate to keep the proposal wider than the target
    cov *= 2.0;
    for i in 0..d {
        cov[(i, i)] += 1e-6;
    }
    StudentT::new(mean, cov, T_DOF)
}

struct Estimate {
    log_marginal: f64,
    se: f64,
    ess: f64,
}

fn integrate<R: Rng + ?Sized>(target: &Target<'_>, cfg: &IntegrationConfig, rng: &mut R) -> Estimate {
    let alpha = cfg.defensive_weight.clamp(1e-3, 1.0);
    let mut draws: Vec<Vec<f64>> = (0..cfg.pilot.max(10)).map(|_| target.sample_prior(rng)).collect();
    let mut log_w: Vec<f64> = draws.iter().map(|u| target.log_likelihood(u)).collect();
    let mut proposal = fit_proposal(&draws, &log_w);

    let pass = |proposal: &Option<StudentT>, n: usize, rng: &mut R| -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut out = Vec::with_capacity(n);
        let mut lw = Vec::with_capacity(n);
        for _ in 0..n {
            let u = match proposal {
                Some(t) if rng.random::<f64>() >= alpha => t.sample(rng),
                _ => target.sample_prior(rng),
            };
            let lp = target.log_prior(&u);
            let w = if lp == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                let lq = match proposal {
                    Some(t) => log_sum_exp(&[alpha.ln() + lp, (1.0 - alpha).ln() + t.log_density(&u)]),
                    None => lp,
                };
                target.log_likelihood(&u) + lp - lq
            };
            out.push(u);
            lw.push(w);
        }
        (out, lw)
    };

    for _ in 0..cfg.adapt_rounds {
        let (d, w) = pass(&proposal, cfg.pilot.max(10), rng);
        draws = d;
        log_w = w;
        if let Some(p) = fit_proposal(&draws, &log_w) {
            proposal = Some(p);
        }
    }
    let (_, log_w) = pass(&proposal, cfg.draws.max(10), rng);

    let n = log_w.len() as f64;
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let mean = scaled.iter().sum::<f64>() / n;
    let var = scaled.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sum_sq: f64 = scaled.iter().map(|w| w * w).sum();
    Estimate {
        log_marginal: max + mean.ln(),
        se: (var / n).sqrt() / mean,
        ess: (mean * n).powi(2) / sum_sq,
    }
}

/// Enumerate all 2^(M−1) submodels and estimate their posterior probabilities.
pub fn submodel_posterior(ds: &Dataset, prior: &ModelPrior, cfg: &IntegrationConfig) -> Result<SubmodelPosterior> {
    let layout = ds.layout();
    let m_total = layout.n_sources();
    let k = layout.n_effect_sources();
    let (null_prob, delta, t_max) = match &prior.variance {
        PriorSpec::ModelMixing { null_prob, delta, t_max } => (null_prob, delta, *t_max),
        _ => return Err(Error::Prior("submodel posteriors need a model-mixing prior".into())),
    };
    prior.variance.validate(m_total)?;
    if k > MAX_MIXING_SOURCES {
        return Err(Error::EnumerationCap(format!(
            "{k} non-residual sources exceed the cap of {MAX_MIXING_SOURCES}; use posterior-predictive tests instead"
        )));
    }
    let deltas = delta.values(m_total);
    let ml = MarginalLikelihood::new(ds);
    let names: Vec<String> = layout.sources()[..k].iter().map(|s| s.name.clone()).collect();

    let results: Vec<(Vec<usize>, f64, Option<Estimate>)> = (0..1usize << k)
        .into_par_iter()
        .map(|mask| {
            let included: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
            let prior_prob: f64 = (0..k)
                .map(|i| if mask & (1 << i) != 0 { 1.0 - null_prob[i] } else { null_prob[i] })
                .product();
            if prior_prob <= 0.0 {
                return (included, prior_prob, None);
            }
            let mut comps = included.clone();
            comps.push(m_total - 1);
            let target = Target {
                ml: &ml,
                mean: prior.mean,
                alpha: comps.iter().map(|&c| deltas[c]).collect(),
                comps,
                t_max,
                m_total,
            };
            let mut rng = seed::stream(cfg.seed, &[tag::SUBMODEL, mask as u64]);
            let est = integrate(&target, cfg, &mut rng);
            (included, prior_prob, Some(est))
        })
        .collect();

    let log_post: Vec<f64> = results
        .iter()
        .map(|(_, p, e)| match e {
            Some(e) if e.log_marginal.is_finite() => p.ln() + e.log_marginal,
            _ => f64::NEG_INFINITY,
        })
        .collect();
    let lse = log_sum_exp(&log_post);
    if !lse.is_finite() {
        return Err(Error::Degenerate("no submodel has a finite marginal likelihood".into()));
    }
    let post: Vec<f64> = log_post.iter().map(|l| (l - lse).exp()).collect();
    let ses: Vec<f64> = results
        .iter()
        .map(|(_, _, e)| e.as_ref().map_or(0.0, |e| if e.se.is_finite() { e.se } else { 0.0 }))
        .collect();

    let submodels: Vec<SubmodelEstimate> = results
        .iter()
        .enumerate()
        .map(|(s, (included, prior_prob, est))| {
            // delta method: ∂p_s/∂ℓ_j = p_s (1{s=j} − p_j)
            let var: f64 = (0..post.len())
                .map(|j| {
                    let g = post[s] * (f64::from(u8::from(s == j)) - post[j]);
                    g * g * ses[j] * ses[j]
                })
                .sum();
            SubmodelEstimate {
                included: included.iter().map(|&i| names[i].clone()).collect(),
                prior_prob: *prior_prob,
                log_marginal: est.as_ref().map(|e| e.log_marginal),
                log_marginal_se: est.as_ref().map(|e| e.se),
                effective_draws: est.as_ref().map(|e| e.ess),
                posterior_prob: post[s],
                posterior_se: var.sqrt(),
            }
        })
        .collect();
    let inclusion = (0..k)
        .map(|i| {
            results
                .iter()
                .zip(&post)
                .filter(|((inc, _, _), _)| inc.contains(&i))
                .map(|(_, p)| p)
                .sum()
        })
        .collect();
    Ok(SubmodelPosterior {
        sources: names,
        submodels,
        inclusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Concentration, PriorConfig, PriorKind};

    fn mixing_prior(ds: &Dataset, null_prob: f64) -> ModelPrior {
        PriorConfig {
            kind: PriorKind::ModelMixing,
            null_prob: Some(crate::model::prior::PerSource::All(null_prob)),
            delta: Some(Concentration::Shared(1.0)),
            ..Default::default()
        }
        .resolve(ds)
        .unwrap()
    }

    fn small() -> Dataset {
        Dataset::one_way(&[vec![0.1, -0.3, 0.4], vec![0.2, 0.5, -0.1], vec![0.0, 0.3, -0.2]]).unwrap()
    }

    #[test]
    fn probabilities_sum_to_one() {
        let ds = small();
        let post = submodel_posterior(&ds, &mixing_prior(&ds, 0.5), &IntegrationConfig::default()).unwrap();
        assert_eq!(post.submodels.len(), 2);
        let s: f64 = post.submodels.iter().map(|s| s.posterior_prob).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn null_probability_one_forces_the_null() {
        let ds = small();
        let post = submodel_posterior(&ds, &mixing_prior(&ds, 1.0), &IntegrationConfig::default()).unwrap();
        let with_a = post.find(&["group"]).unwrap();
        assert_eq!(with_a.posterior_prob, 0.0);
        assert!(with_a.log_marginal.is_none());
        assert_eq!(post.find(&[]).unwrap().posterior_prob, 1.0);
    }

    #[test]
    fn null_submodel_matches_one_dimensional_quadrature() {
        // S = {residual}: p(y) = ∫₀^Tmax p(y | T) / Tmax dT, μ integrated analytically
        let ds = small();
        let prior = mixing_prior(&ds, 0.5);
        let post = submodel_posterior(&ds, &prior, &IntegrationConfig::default()).unwrap();
        let est = post.find(&[]).unwrap();
        let ml = MarginalLikelihood::new(&ds);
        let t_max = match prior.variance {
            PriorSpec::ModelMixing { t_max, .. } => t_max,
            _ => unreachable!(),
        };
        let steps = 200_000;
        let h = t_max / steps as f64;
        let vals: Vec<f64> = (0..steps)
            .map(|i| {
                let t = (i as f64 + 0.5) * h;
                ml.log_likelihood_mean_integrated(&[0.0, t], &prior.mean).unwrap()
            })
            .collect();
        let quad = log_sum_exp(&vals) + h.ln() - t_max.ln();
        let got = est.log_marginal.unwrap();
        let se = est.log_marginal_se.unwrap();
        assert!((got - quad).abs() < 4.0 * se + 1e-3, "{got} vs {quad} (se {se})");
    }

    #[test]
    fn enumeration_cap() {
        let mut obs = Vec::new();
        let names: Vec<String> = (0..9).map(|i| format!("f{i}")).collect();
        for r in 0..4 {
            obs.push(crate::design::Observation::new(
                r as f64,
                names.iter().enumerate().map(|(i, n)| (n.clone(), format!("l{}", (r >> (i % 2)) & 1))),
            ));
        }
        let decl: Vec<_> = names.iter().map(|n| crate::design::FactorDecl::crossed(n.clone())).collect();
        let opts = crate::design::LayoutOptions { max_interaction_order: 1, interactions: None };
        let ds = Dataset::build(&decl, obs, &opts).unwrap();
        let prior = mixing_prior(&ds, 0.5);
        assert!(matches!(
            submodel_posterior(&ds, &prior, &IntegrationConfig::default()),
            Err(Error::EnumerationCap(_))
        ));
    }
}
