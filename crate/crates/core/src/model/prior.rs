use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::VarianceVector;
use crate::design::Dataset;
use crate::error::{Error, Result};

/// Dirichlet concentration: one shared δ or one δ_m per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Concentration {
    Shared(f64),
    PerComponent(Vec<f64>),
}

impl Default for Concentration {
    fn default() -> Self {
        Concentration::Shared(1.0)
    }
}

impl Concentration {
    pub fn values(&self, k: usize) -> Vec<f64> {
        match self {
            Concentration::Shared(d) => vec![*d; k],
            Concentration::PerComponent(v) => v.clone(),
        }
    }

    fn select(&self, idx: &[usize]) -> Concentration {
        match self {
            Concentration::Shared(d) => Concentration::Shared(*d),
            Concentration::PerComponent(v) => Concentration::PerComponent(idx.iter().map(|&i| v[i]).collect()),
        }
    }

    fn validate(&self, k: usize) -> Result<()> {
        let vals = self.values(k);
        if vals.len() != k {
            return Err(Error::Prior(format!("expected {k} concentrations, got {}", vals.len())));
        }
        if vals.iter().any(|d| !d.is_finite() || *d <= 0.0) {
            return Err(Error::Prior("Dirichlet concentrations must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// Proper prior on the variance components. There is no improper variant.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    /// σ_m ~ Uniform(0, U_m) independently, one bound per source.
    IndependentUniform { upper_sd: Vec<f64> },
    /// φ ~ Dirichlet(δ) on the relative variances, T ~ Uniform(0, T_max).
    DirichletRelative { delta: Concentration, t_max: f64 },
    /// Point mass at σ_m² = 0 with probability π₀_m for each non-residual
    /// source; given the inclusion set S, a Dirichlet-relative prior over S
    /// and the residual.
    ModelMixing {
        null_prob: Vec<f64>,
        delta: Concentration,
        t_max: f64,
    },
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Prior(format!("{name} must be finite and > 0, got {v}")))
    }
}

impl PriorSpec {
    pub fn independent_uniform(upper_sd: Vec<f64>) -> Result<Self> {
        let p = PriorSpec::IndependentUniform { upper_sd };
        p.validate(p.declared_len().unwrap_or(0))?;
        Ok(p)
    }

    pub fn dirichlet_relative(delta: Concentration, t_max: f64) -> Result<Self> {
        check_positive("t_max", t_max)?;
        if let Concentration::Shared(d) = delta {
            check_positive("delta", d)?;
        }
        Ok(PriorSpec::DirichletRelative { delta, t_max })
    }

    pub fn model_mixing(null_prob: Vec<f64>, delta: Concentration, t_max: f64) -> Result<Self> {
        let p = PriorSpec::ModelMixing { null_prob, delta, t_max };
        p.validate(p.declared_len().unwrap_or(1))?;
        Ok(p)
    }

    fn declared_len(&self) -> Option<usize> {
        match self {
            PriorSpec::IndependentUniform { upper_sd } => Some(upper_sd.len()),
            PriorSpec::DirichletRelative { .. } => None,
            PriorSpec::ModelMixing { null_prob, .. } => Some(null_prob.len() + 1),
        }
    }

    /// Check the hyperparameters against a model with `m` sources.
    pub fn validate(&self, m: usize) -> Result<()> {
        if m == 0 {
            return Err(Error::Prior("model has no variance components".into()));
        }
        match self {
            PriorSpec::IndependentUniform { upper_sd } => {
                if upper_sd.len() != m {
                    return Err(Error::Prior(format!("expected {m} upper bounds, got {}", upper_sd.len())));
                }
                for &u in upper_sd {
                    check_positive("upper_sd", u)?;
                }
            }
            PriorSpec::DirichletRelative { delta, t_max } => {
                check_positive("t_max", *t_max)?;
                delta.validate(m)?;
            }
            PriorSpec::ModelMixing { null_prob, delta, t_max } => {
                check_positive("t_max", *t_max)?;
                delta.validate(m)?;
                if null_prob.len() + 1 != m {
                    return Err(Error::Prior(format!(
                        "expected {} null probabilities, got {}",
                        m - 1,
                        null_prob.len()
                    )));
                }
                if null_prob.iter().any(|p| !p.is_finite() || !(0.0..=1.0).contains(p)) {
                    return Err(Error::Prior("null probabilities must lie in [0, 1]".into()));
                }
            }
        }
        Ok(())
    }

    /// The prior for the model with component `index` deleted.
    pub fn without_component(&self, index: usize, m: usize) -> Result<Self> {
        if index + 1 >= m {
            return Err(Error::Prior("only non-residual components can be removed".into()));
        }
        let keep: Vec<usize> = (0..m).filter(|&i| i != index).collect();
        Ok(match self {
            PriorSpec::IndependentUniform { upper_sd } => PriorSpec::IndependentUniform {
                upper_sd: keep.iter().map(|&i| upper_sd[i]).collect(),
            },
            PriorSpec::DirichletRelative { delta, t_max } => PriorSpec::DirichletRelative {
                delta: delta.select(&keep),
                t_max: *t_max,
            },
            PriorSpec::ModelMixing { .. } => {
                return Err(Error::Prior("model-mixing priors are not used for constrained fits".into()))
            }
        })
    }

    /// Draw a variance vector with `m` components from the prior.
    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> VarianceVector {
        let sigma2 = match self {
            PriorSpec::IndependentUniform { upper_sd } => upper_sd
                .iter()
                .map(|u| (u * rng.random::<f64>()).powi(2))
                .collect(),
            PriorSpec::DirichletRelative { delta, t_max } => {
                let t = t_max * rng.random::<f64>();
                sample_dirichlet(&delta.values(m), rng).into_iter().map(|p| p * t).collect()
            }
            PriorSpec::ModelMixing { null_prob, delta, t_max } => {
                let deltas = delta.values(m);
                let included: Vec<usize> = (0..m)
                    .filter(|&i| i + 1 == m || rng.random::<f64>() >= null_prob[i])
                    .collect();
                let t = t_max * rng.random::<f64>();
                let shares = sample_dirichlet(&included.iter().map(|&i| deltas[i]).collect::<Vec<_>>(), rng);
                let mut s = vec![0.0; m];
                for (&i, p) in included.iter().zip(shares) {
                    s[i] = p * t;
                }
                s
            }
        };
        VarianceVector::new(sigma2).expect("prior draws are valid variances")
    }
}

/// Dirichlet draw computed in log space so that small concentrations do not
/// underflow to an all-zero vector.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let logs: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            if a >= 1.0 {
                Gamma::new(a, 1.0).expect("shape > 0").sample(rng).ln()
            } else {
                let g = Gamma::new(a + 1.0, 1.0).expect("shape > 0").sample(rng).ln();
                let u: f64 = rng.random::<f64>();
                g + u.max(f64::MIN_POSITIVE).ln() / a
            }
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

pub(crate) fn ln_dirichlet(phi: &[f64], alpha: &[f64]) -> f64 {
    if phi.len() == 1 {
        return 0.0;
    }
    if phi.iter().any(|&p| p <= 0.0) {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = alpha.iter().sum();
    ln_gamma(sum) - alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>()
        + phi.iter().zip(alpha).map(|(p, a)| (a - 1.0) * p.ln()).sum::<f64>()
}

/// Log prior density of `v`.
///
/// The reference measure differs by family:
/// - IndependentUniform: Lebesgue measure on the SDs (σ_1, …, σ_M), so the
///   density is Π 1/U_m inside the box.
/// - DirichletRelative: Lebesgue measure on (T, φ_1, …, φ_{M−1}), giving
///   p(T) · Dir(φ; δ). The density of the σ² vector itself is this divided by
///   T^{M−1}, the Jacobian of (T, φ) ↦ σ² = T φ.
/// - ModelMixing: P(S) times the DirichletRelative density over the included
///   components S ∪ {residual}, on the (T, φ_S) coordinates of that submodel.
pub fn prior_log_density(prior: &PriorSpec, v: &VarianceVector) -> f64 {
    let m = v.len();
    match prior {
        PriorSpec::IndependentUniform { upper_sd } => {
            if upper_sd.len() != m {
                return f64::NEG_INFINITY;
            }
            let mut acc = 0.0;
            for (s2, u) in v.sigma2().iter().zip(upper_sd) {
                if s2.sqrt() > *u {
                    return f64::NEG_INFINITY;
                }
                acc -= u.ln();
            }
            acc
        }
        PriorSpec::DirichletRelative { delta, t_max } => {
            let t = v.total();
            if !(t > 0.0 && t <= *t_max) {
                return f64::NEG_INFINITY;
            }
            -t_max.ln() + ln_dirichlet(v.phi(), &delta.values(m))
        }
        PriorSpec::ModelMixing { null_prob, delta, t_max } => {
            let t = v.total();
            if !(t > 0.0 && t <= *t_max) || null_prob.len() + 1 != m || v.sigma2()[m - 1] <= 0.0 {
                return f64::NEG_INFINITY;
            }
            let deltas = delta.values(m);
            let mut log_p_set = 0.0;
            let mut included = Vec::new();
            for (i, &p0) in null_prob.iter().enumerate() {
                if v.sigma2()[i] > 0.0 {
                    log_p_set += (1.0 - p0).ln();
                    included.push(i);
                } else {
                    log_p_set += p0.ln();
                }
            }
            included.push(m - 1);
            let phi: Vec<f64> = included.iter().map(|&i| v.phi()[i]).collect();
            let alpha: Vec<f64> = included.iter().map(|&i| deltas[i]).collect();
            log_p_set - t_max.ln() + ln_dirichlet(&phi, &alpha)
        }
    }
}

/// Proper normal prior on the grand mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanPrior {
    pub mean: f64,
    pub sd: f64,
}

impl MeanPrior {
    pub fn new(mean: f64, sd: f64) -> Result<Self> {
        if !mean.is_finite() {
            return Err(Error::Prior("mean prior location must be finite".into()));
        }
        check_positive("mean prior sd", sd)?;
        Ok(Self { mean, sd })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelPrior {
    pub variance: PriorSpec,
    pub mean: MeanPrior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    IndependentUniform,
    #[default]
    DirichletRelative,
    ModelMixing,
}

/// Scalar-or-per-component value in a prior configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerSource {
    All(f64),
    Each(Vec<f64>),
}

impl PerSource {
    fn expand(&self, k: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            PerSource::All(v) => Ok(vec![*v; k]),
            PerSource::Each(v) if v.len() == k => Ok(v.clone()),
            PerSource::Each(v) => Err(Error::Prior(format!("{what}: expected {k} values, got {}", v.len()))),
        }
    }
}

/// Prior as written in a configuration file; `null` fields take data-driven
/// defaults when resolved against a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub kind: PriorKind,
    pub delta: Option<Concentration>,
    pub t_max: Option<f64>,
    pub upper_sd: Option<PerSource>,
    pub null_prob: Option<PerSource>,
    pub mean: Option<f64>,
    pub mean_sd: Option<f64>,
}

impl PriorConfig {
    pub fn dirichlet(delta: f64) -> Self {
        Self {
            kind: PriorKind::DirichletRelative,
            delta: Some(Concentration::Shared(delta)),
            ..Default::default()
        }
    }

    /// Resolve defaults against `ds`:
    /// T_max = 10 · var(y), U_m = 10 · sd(y), μ ~ N(ȳ, (10 · sd(y))²),
    /// δ = 1, π₀ = 0.5. A zero sample variance is replaced by 1.
    pub fn resolve(&self, ds: &Dataset) -> Result<ModelPrior> {
        let m = ds.layout().n_sources();
        let var = ds.variance();
        let scale = if var > 0.0 && var.is_finite() { var } else { 1.0 };
        let t_max = self.t_max.unwrap_or(10.0 * scale);
        let delta = self.delta.clone().unwrap_or_default();
        let variance = match self.kind {
            PriorKind::IndependentUniform => {
                let upper = match &self.upper_sd {
                    Some(u) => u.expand(m, "upper_sd")?,
                    None => vec![10.0 * scale.sqrt(); m],
                };
                PriorSpec::IndependentUniform { upper_sd: upper }
            }
            PriorKind::DirichletRelative => PriorSpec::DirichletRelative { delta, t_max },
            PriorKind::ModelMixing => {
                let null_prob = match &self.null_prob {
                    Some(p) => p.expand(m - 1, "null_prob")?,
                    None => vec![0.5; m - 1],
                };
                PriorSpec::ModelMixing { null_prob, delta, t_max }
            }
        };
        variance.validate(m)?;
        let mean = MeanPrior::new(
            self.mean.unwrap_or_else(|| ds.mean()),
            self.mean_sd.unwrap_or(10.0 * scale.sqrt()),
        )?;
        Ok(ModelPrior { variance, mean })
    }

    /// The configuration with every default made explicit.
    pub fn resolved_config(&self, ds: &Dataset) -> Result<PriorConfig> {
        let p = self.resolve(ds)?;
        let mut out = PriorConfig {
            kind: self.kind,
            mean: Some(p.mean.mean),
            mean_sd: Some(p.mean.sd),
            ..Default::default()
        };
        match p.variance {
            PriorSpec::IndependentUniform { upper_sd } => out.upper_sd = Some(PerSource::Each(upper_sd)),
            PriorSpec::DirichletRelative { delta, t_max } => {
                out.delta = Some(delta);
                out.t_max = Some(t_max);
            }
            PriorSpec::ModelMixing { null_prob, delta, t_max } => {
                out.null_prob = Some(PerSource::Each(null_prob));
                out.delta = Some(delta);
                out.t_max = Some(t_max);
            }
        }
        Ok(out)
    }
}
