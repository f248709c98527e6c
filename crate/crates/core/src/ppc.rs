//! Posterior-predictive tests of σ_m² = 0.
//!
//! The model is refitted with source m deleted, replicate datasets are drawn
//! from that constrained posterior, and a statistic for source m computed on
//! the observed data is compared against its replicate distribution.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anova::{expected_mean_squares, sums_of_squares};
use crate::design::Dataset;
use crate::error::{Error, Result};
use crate::model::{responses_with_effects, simulate_responses, ModelPrior};
use crate::sampler::{fit, ParamSummary, PosteriorDraws, SamplerConfig};
use crate::seed::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Re-draw every effect from N(0, σ_k²), then the residuals.
    #[default]
    Marginal,
    /// Keep the drawn effects and re-draw only the residuals.
    Conditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Ss,
    FRatio,
    MeanRange,
    MaxAbsMean,
}

impl Statistic {
    pub const ALL: [Statistic; 4] = [Statistic::Ss, Statistic::FRatio, Statistic::MeanRange, Statistic::MaxAbsMean];

    pub fn name(self) -> &'static str {
        match self {
            Statistic::Ss => "ss",
            Statistic::FRatio => "f_ratio",
            Statistic::MeanRange => "mean_range",
            Statistic::MaxAbsMean => "max_abs_mean",
        }
    }
}

impl std::str::FromStr for Statistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Statistic::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownStatistic(s.to_string()))
    }
}

impl std::fmt::Display for Statistic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Posterior of the model without the tested source.
#[derive(Debug, Clone)]
pub struct ConstrainedFit {
    pub source: String,
    pub dataset: Dataset,
    pub draws: PosteriorDraws,
}

/// Fit the model with non-residual source `source` deleted. The prior loses
/// that component; under a Dirichlet-relative prior the simplex is over the
/// remaining sources.
pub fn constrained_fit(ds: &Dataset, prior: &ModelPrior, source: &str, cfg: &SamplerConfig) -> Result<ConstrainedFit> {
    let idx = ds.layout().source_index(source)?;
    let reduced = ds.without_source(source)?;
    let variance = prior.variance.without_component(idx, ds.layout().n_sources())?;
    let draws = fit(
        &reduced,
        &ModelPrior {
            variance,
            mean: prior.mean,
        },
        cfg,
    )?;
    Ok(ConstrainedFit {
        source: source.to_string(),
        dataset: reduced,
        draws,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replicates {
    pub responses: Vec<Vec<f64>>,
    /// Index of the posterior draw behind each replicate.
    pub draw_index: Vec<usize>,
    /// True when more replicates than retained draws were requested and
    /// draws were resampled with replacement.
    pub with_replacement: bool,
}

/// Draw `r` replicate response vectors from the posterior predictive of
/// `draws`, fitted on `ds`.
pub fn replicate(draws: &PosteriorDraws, ds: &Dataset, scheme: Scheme, r: usize, seed: u64) -> Result<Replicates> {
    let n_draws = draws.len();
    if n_draws == 0 {
        return Err(Error::InsufficientDraws("no posterior draws to replicate from".into()));
    }
    if r == 0 {
        return Err(Error::Config("at least one replicate is required".into()));
    }
    let with_replacement = r > n_draws;
    let draw_index: Vec<usize> = if with_replacement {
        let mut rng = seed::stream(seed, &[tag::REPLICATE, u64::MAX]);
        (0..r).map(|_| rng.random_range(0..n_draws)).collect()
    } else {
        (0..r).map(|i| i * n_draws / r).collect()
    };
    let responses = draw_index
        .par_iter()
        .enumerate()
        .map(|(i, &d)| {
            let mut rng = seed::stream(seed, &[tag::REPLICATE, i as u64]);
            let draw = &draws.draws[d];
            match scheme {
                Scheme::Marginal => simulate_responses(ds, draw.mu, &draw.sigma2, &mut rng),
                Scheme::Conditional => {
                    let k = draw.sigma2.len() - 1;
                    responses_with_effects(ds, draw.mu, &draw.effects, draw.sigma2[k], &mut rng)
                }
            }
        })
        .collect();
    Ok(Replicates {
        responses,
        draw_index,
        with_replacement,
    })
}

fn group_means(ds: &Dataset, source: usize) -> Result<Vec<f64>> {
    let mem = ds.membership(source)?;
    let mut sums = vec![0.0; mem.n_effects];
    for (y, &e) in ds.responses().iter().zip(&mem.effect_of) {
        sums[e] += y;
    }
    Ok(sums.iter().zip(&mem.counts).map(|(s, &c)| s / c as f64).collect())
}

/// Weights w with Σ_k w_k E(MS_k) = E(MS_m) when σ_m² = 0.
pub fn denominator_weights(ems: &[Vec<f64>], source: usize) -> Result<Vec<f64>> {
    let m = ems.len();
    let c = DMatrix::from_fn(m, m, |i, j| ems[i][j]);
    let mut target = ems[source].clone();
    target[source] = 0.0;
    // wᵀ C = targetᵀ
    let w = c
        .transpose()
        .lu()
        .solve(&DVector::from_vec(target))
        .ok_or_else(|| Error::Singular("EMS matrix is not invertible".into()))?;
    Ok(w.iter().map(|v| if v.abs() < 1e-12 { 0.0 } else { *v }).collect())
}

/// Statistic for source `source` (by name) on `ds`.
pub fn statistic(ds: &Dataset, source: &str, stat: Statistic) -> Result<f64> {
    let idx = ds.layout().source_index(source)?;
    if idx + 1 == ds.layout().n_sources() {
        return Err(Error::Config("the residual is not a testable source".into()));
    }
    match stat {
        Statistic::Ss => Ok(sums_of_squares(ds)?.rows[idx].ss),
        Statistic::FRatio => {
            let table = sums_of_squares(ds)?;
            let w = denominator_weights(&expected_mean_squares(ds)?, idx)?;
            let ms = table.ms();
            let den: f64 = w.iter().zip(&ms).map(|(w, m)| w * m).sum();
            let f = ms[idx] / den;
            if den.is_nan() || den <= 0.0 || !f.is_finite() {
                return Err(Error::Degenerate(format!(
                    "f_ratio for `{source}` is undefined: MS = {:e}, denominator = {den:e}",
                    ms[idx]
                )));
            }
            Ok(f)
        }
        Statistic::MeanRange => {
            let means = group_means(ds, idx)?;
            let max = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = means.iter().cloned().fold(f64::INFINITY, f64::min);
            Ok(max - min)
        }
        Statistic::MaxAbsMean => {
            let grand = ds.mean();
            Ok(group_means(ds, idx)?
                .iter()
                .map(|m| (m - grand).abs())
                .fold(0.0, f64::max))
        }
    }
}

/// (1 + #{T_rep ≥ T_obs}) / (R + 1).
pub fn ppp_value(t_obs: f64, replicates: &[f64]) -> f64 {
    let ge = replicates.iter().filter(|&&t| t >= t_obs).count();
    (1 + ge) as f64 / (replicates.len() + 1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpcConfig {
    pub scheme: Scheme,
    pub replicates: usize,
    /// Seed for the replicate streams; the constrained fit uses the sampler's.
    pub seed: u64,
}

impl Default for PpcConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Marginal,
            replicates: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstrainedSummary {
    pub sources: Vec<String>,
    pub draws: usize,
    pub summaries: Vec<ParamSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PpcReport {
    pub source: String,
    pub statistic: Statistic,
    pub t_obs: f64,
    pub replicates: Vec<f64>,
    pub p: f64,
    pub scheme: Scheme,
    pub with_replacement: bool,
    pub constrained: ConstrainedSummary,
}

impl PpcReport {
    /// Recompute p from the stored replicates.
    pub fn recompute_p(&self) -> f64 {
        ppp_value(self.t_obs, &self.replicates)
    }
}

/// Full pipeline for one tested source and several statistics sharing the
/// same constrained fit and replicate datasets.
pub fn ppc(
    ds: &Dataset,
    prior: &ModelPrior,
    source: &str,
    stats: &[Statistic],
    sampler: &SamplerConfig,
    cfg: &PpcConfig,
) -> Result<Vec<PpcReport>> {
    if stats.is_empty() {
        return Err(Error::Config("no statistics requested".into()));
    }
    let t_obs: Vec<f64> = stats.iter().map(|&s| statistic(ds, source, s)).collect::<Result<_>>()?;
    let cf = constrained_fit(ds, prior, source, sampler)?;
    let reps = replicate(&cf.draws, &cf.dataset, cfg.scheme, cfg.replicates, cfg.seed)?;
    let values: Vec<Vec<f64>> = reps
        .responses
        .par_iter()
        .map(|y| {
            let full = ds.with_responses(y.clone())?;
            stats.iter().map(|&s| statistic(&full, source, s)).collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let constrained = ConstrainedSummary {
        sources: cf.draws.sources.clone(),
        draws: cf.draws.len(),
        summaries: cf.draws.summaries(),
    };
    Ok(stats
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let replicates: Vec<f64> = values.iter().map(|v| v[j]).collect();
            PpcReport {
                source: source.to_string(),
                statistic: s,
                t_obs: t_obs[j],
                p: ppp_value(t_obs[j], &replicates),
                replicates,
                scheme: cfg.scheme,
                with_replacement: reps.with_replacement,
                constrained: constrained.clone(),
            }
        })
        .collect())
}
