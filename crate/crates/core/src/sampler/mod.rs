//! Gibbs / Metropolis-within-Gibbs sampling for the full model.
//!
//! Each iteration draws (μ, η) jointly from their exact normal conditional
//! given the variances, then the variances given (μ, η):
//! - IndependentUniform: each precision 1/σ_m² has a Gamma((J_m − 1)/2, SS_m/2)
//!   conditional truncated to [1/U_m², ∞), sampled exactly.
//! - DirichletRelative: random-walk Metropolis on u = (log T, log φ_k/φ_M),
//!   one coordinate at a time, with the Jacobian T · Π φ_m in the target.

mod diagnostics;
mod summary;

pub use diagnostics::{diagnose, Diagnostics, ParamDiagnostic};
pub use summary::{
    finite_pop_summaries, finite_sd, sign_probability, summarize, FinitePopulation, Functional, ParamSummary,
};

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::Dataset;
use crate::error::{Error, Result};
use crate::model::{prior_log_density, sample_dirichlet, CrossProducts, MeanPrior, ModelPrior, PriorSpec, VarianceVector};
use crate::seed::{self, tag};

/// Variances are kept above this fraction of their prior scale (U_m² or
/// T_max). Without it, data fitted exactly by the model drive every variance
/// to zero and the conditional precision overflows.
pub const VARIANCE_FLOOR: f64 = 1e-24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub chains: usize,
    /// Iterations per chain, burn-in included.
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Initial random-walk scale for each (log T, log-ratio φ) coordinate.
    pub initial_step: f64,
    /// Iterations between step-size adjustments during burn-in.
    pub adapt_window: usize,
    pub target_acceptance: f64,
    /// Proposals per coordinate after burn-in over which at least one
    /// acceptance is required.
    pub stall_window: usize,
    /// When false the data are ignored and the chain explores the prior.
    pub likelihood: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            iterations: 5000,
            burn_in: 2500,
            thin: 5,
            seed: 0,
            initial_step: 0.5,
            adapt_window: 50,
            target_acceptance: 0.44,
            stall_window: 500,
            likelihood: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Config("chains must be ≥ 1".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn_in ({}) must be less than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be ≥ 1".into()));
        }
        if !(self.initial_step.is_finite() && self.initial_step > 0.0) {
            return Err(Error::Config("initial_step must be finite and > 0".into()));
        }
        if self.adapt_window == 0 || self.stall_window == 0 {
            return Err(Error::Config("adaptation windows must be ≥ 1".into()));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::Config("target_acceptance must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn draws_per_chain(&self) -> usize {
        (self.iterations - self.burn_in).div_ceil(self.thin)
    }
}

/// One retained state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Draw {
    pub chain: usize,
    pub mu: f64,
    /// Effects per non-residual source.
    pub effects: Vec<Vec<f64>>,
    /// Per source, residual last.
    pub sigma2: Vec<f64>,
    pub total: f64,
    pub phi: Vec<f64>,
    /// Finite-population SD per source; the residual entry is computed from
    /// the implied residuals y − μ − Σ η.
    pub finite_sd: Vec<f64>,
    pub log_joint: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainInfo {
    /// Acceptance rate after burn-in per Metropolis coordinate (empty for
    /// IndependentUniform).
    pub acceptance: Vec<f64>,
    pub step: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorDraws {
    pub sources: Vec<String>,
    pub n_effects: Vec<usize>,
    pub chains: usize,
    /// Chain-major: all draws of chain 0, then chain 1, …
    pub draws: Vec<Draw>,
    pub chain_info: Vec<ChainInfo>,
    pub warnings: Vec<String>,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn chain(&self, c: usize) -> impl Iterator<Item = &Draw> {
        self.draws.iter().filter(move |d| d.chain == c)
    }

    /// Scalar parameters by name with their per-draw values.
    pub fn scalar_columns(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = vec![("mu".to_string(), self.draws.iter().map(|d| d.mu).collect())];
        for (prefix, pick) in [
            ("sigma2", (|d: &Draw, k: usize| d.sigma2[k]) as fn(&Draw, usize) -> f64),
            ("s", |d: &Draw, k: usize| d.finite_sd[k]),
            ("phi", |d: &Draw, k: usize| d.phi[k]),
        ] {
            for (k, name) in self.sources.iter().enumerate() {
                out.push((format!("{prefix}.{name}"), self.draws.iter().map(|d| pick(d, k)).collect()));
            }
        }
        out.push(("T".to_string(), self.draws.iter().map(|d| d.total).collect()));
        out
    }

    /// Header and rows for a CSV export, one row per retained draw.
    pub fn table(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let cols = self.scalar_columns();
        let mut header = vec!["chain".to_string()];
        header.extend(cols.iter().map(|(n, _)| n.clone()));
        header.push("log_joint".into());
        let rows = self
            .draws
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let mut r = vec![d.chain as f64];
                r.extend(cols.iter().map(|(_, v)| v[i]));
                r.push(d.log_joint);
                r
            })
            .collect();
        (header, rows)
    }

    pub fn summaries(&self) -> Vec<ParamSummary> {
        self.scalar_columns().into_iter().map(|(n, v)| summarize(&n, &v)).collect()
    }

    pub fn diagnostics(&self) -> Result<Diagnostics> {
        let params = self
            .scalar_columns()
            .into_iter()
            .map(|(name, values)| {
                let per = values.len() / self.chains;
                let chains: Vec<Vec<f64>> = values.chunks(per.max(1)).map(|c| c.to_vec()).collect();
                diagnose(&name, &chains)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Diagnostics::new(params))
    }
}

/// Draw (μ, η) from their joint normal conditional given the variances.
///
/// Sources with σ_m² = 0 have their effects fixed at zero.
pub fn sample_location<R: Rng + ?Sized>(
    ds: &Dataset,
    sigma2: &[f64],
    mean: &MeanPrior,
    rng: &mut R,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let cp = CrossProducts::new(ds, ds.responses());
    let mut out = vec![Vec::new(); cp.sizes.len()];
    let mu = location_step(&cp, sigma2, mean, true, rng, &mut out)?;
    Ok((mu, out))
}

fn location_step<R: Rng + ?Sized>(
    cp: &CrossProducts,
    sigma2: &[f64],
    mean: &MeanPrior,
    likelihood: bool,
    rng: &mut R,
    effects: &mut [Vec<f64>],
) -> Result<f64> {
    let k = sigma2.len() - 1;
    let se2 = sigma2[k];
    let mut cols = vec![0usize];
    let mut prior_prec = vec![1.0 / (mean.sd * mean.sd)];
    for (m, &s2) in sigma2[..k].iter().enumerate() {
        if s2 > 0.0 {
            cols.extend(cp.offsets[m]..cp.offsets[m] + cp.sizes[m]);
            prior_prec.extend(std::iter::repeat_n(1.0 / s2, cp.sizes[m]));
        }
    }
    let q = cols.len();
    let data_w = if likelihood { 1.0 / se2 } else { 0.0 };
    let mut p = DMatrix::from_fn(q, q, |i, j| cp.cross[(cols[i], cols[j])] * data_w);
    for (i, pp) in prior_prec.iter().enumerate() {
        p[(i, i)] += pp;
    }
    let mut b = DVector::from_iterator(q, cols.iter().map(|&c| cp.zty[c] * data_w));
    b[0] += mean.mean / (mean.sd * mean.sd);
    let chol = p
        .cholesky()
        .ok_or_else(|| Error::Singular("conditional precision of (μ, η) is not positive definite".into()))?;
    let centre = chol.solve(&b);
    let z = DVector::from_iterator(q, (0..q).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let dev = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
    let x = centre + dev;

    for (m, eff) in effects.iter_mut().enumerate() {
        eff.clear();
        eff.resize(cp.sizes[m], 0.0);
    }
    let mut idx = 1;
    for m in 0..k {
        if sigma2[m] > 0.0 {
            for e in effects[m].iter_mut() {
                *e = x[idx];
                idx += 1;
            }
        }
    }
    Ok(x[0])
}

/// Sample τ ~ Gamma(shape a, rate b) conditioned on τ ≥ c.
fn truncated_gamma<R: Rng + ?Sized>(a: f64, b: f64, c: f64, rng: &mut R) -> f64 {
    let b = b.max(1e-300);
    if c * b <= a {
        let g = Gamma::new(a, 1.0 / b).expect("valid gamma");
        loop {
            let t = g.sample(rng);
            if t >= c {
                return t;
            }
        }
    }
    // tail: τ = c + x with an exponential envelope for x
    let lambda = if a >= 1.0 { b - (a - 1.0) / c } else { b };
    let ex = Exp::new(lambda).expect("positive rate");
    loop {
        let x = ex.sample(rng);
        let log_acc = if a >= 1.0 {
            (a - 1.0) * ((x / c).ln_1p() - x / c)
        } else {
            (a - 1.0) * (x / c).ln_1p()
        };
        let u: f64 = rng.random();
        if u.ln() <= log_acc {
            return c + x;
        }
    }
}

fn log_normal_sum(ss: f64, count: f64, var: f64) -> f64 {
    -0.5 * count * (2.0 * PI * var).ln() - ss / (2.0 * var)
}

/// Log target of the Dirichlet-relative Metropolis step in u coordinates.
struct RelativeTarget<'a> {
    delta: &'a [f64],
    t_max: f64,
    /// (sum of squares, count) per source, residual last.
    stats: Vec<(f64, f64)>,
    likelihood: bool,
}

impl RelativeTarget<'_> {
    fn shares(u: &[f64]) -> Vec<f64> {
        let mut logs: Vec<f64> = u[1..].to_vec();
        logs.push(0.0);
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logs.iter().map(|l| (l - lse).exp()).collect()
    }

    fn log_phi(u: &[f64]) -> Vec<f64> {
        let mut logs: Vec<f64> = u[1..].to_vec();
        logs.push(0.0);
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logs.iter().map(|l| l - lse).collect()
    }

    fn eval(&self, u: &[f64]) -> f64 {
        let log_t = u[0];
        let t = log_t.exp();
        if !(t > 0.0 && t <= self.t_max) {
            return f64::NEG_INFINITY;
        }
        let lp = Self::log_phi(u);
        let log_floor = (VARIANCE_FLOOR * self.t_max).ln();
        if lp.iter().any(|l| log_t + l < log_floor) {
            return f64::NEG_INFINITY;
        }
        // Dirichlet density times the log-ratio Jacobian Π φ_m: Σ δ_m log φ_m
        let mut acc = log_t - self.t_max.ln() + dirichlet_norm(self.delta);
        for (l, d) in lp.iter().zip(self.delta) {
            acc += d * l;
        }
        if self.likelihood {
            for ((ss, cnt), l) in self.stats.iter().zip(&lp) {
                let log_var = log_t + l;
                acc += -0.5 * cnt * log_var - ss / (2.0 * log_var.exp());
            }
        }
        acc
    }
}

fn dirichlet_norm(delta: &[f64]) -> f64 {
    use statrs::function::gamma::ln_gamma;
    if delta.len() == 1 {
        return 0.0;
    }
    ln_gamma(delta.iter().sum::<f64>()) - delta.iter().map(|&d| ln_gamma(d)).sum::<f64>()
}

struct Chain<'a> {
    ds: &'a Dataset,
    cp: &'a CrossProducts,
    prior: &'a ModelPrior,
    cfg: &'a SamplerConfig,
    index: usize,
}

impl Chain<'_> {
    fn run(&self) -> Result<(Vec<Draw>, ChainInfo)> {
        let mut rng = seed::stream(self.cfg.seed, &[tag::CHAIN, self.index as u64]);
        let k = self.ds.layout().n_effect_sources();
        let m = k + 1;
        let y = self.ds.responses();
        let n = y.len();
        let mems = self.ds.memberships();

        let mut sigma2 = self.initial_variances(&mut rng);
        let mut effects: Vec<Vec<f64>> = vec![Vec::new(); k];
        let mut resid = vec![0.0; n];

        let (delta, t_max) = match &self.prior.variance {
            PriorSpec::DirichletRelative { delta, t_max } => (delta.values(m), *t_max),
            _ => (Vec::new(), 0.0),
        };
        let relative = !delta.is_empty();
        let mut u = Vec::new();
        let mut step = Vec::new();
        if relative {
            let t: f64 = sigma2.iter().sum();
            u.push(t.ln());
            for s in &sigma2[..k] {
                u.push((s / sigma2[k]).ln());
            }
            step = vec![self.cfg.initial_step; m];
        }
        let mut accepted_window = vec![0usize; step.len()];
        let mut accepted_post = vec![0usize; step.len()];
        let mut stall = vec![0usize; step.len()];
        let mut batch = 0usize;

        let mut draws = Vec::with_capacity(self.cfg.draws_per_chain());
        for it in 0..self.cfg.iterations {
            let mu = location_step(self.cp, &sigma2, &self.prior.mean, self.cfg.likelihood, &mut rng, &mut effects)?;
            if !mu.is_finite() || effects.iter().flatten().any(|e| !e.is_finite()) {
                return Err(self.non_finite(it, "location draw", mu, &sigma2));
            }
            for (i, r) in resid.iter_mut().enumerate() {
                let fit: f64 = mems.iter().zip(&effects).map(|(mm, e)| e[mm.effect_of[i]]).sum();
                *r = y[i] - mu - fit;
            }
            let mut stats: Vec<(f64, f64)> = effects
                .iter()
                .map(|e| (e.iter().map(|v| v * v).sum(), e.len() as f64))
                .collect();
            stats.push((resid.iter().map(|r| r * r).sum(), n as f64));

            match &self.prior.variance {
                PriorSpec::IndependentUniform { upper_sd } => {
                    for (j, ((ss, cnt), u_sd)) in stats.iter().zip(upper_sd).enumerate() {
                        let draw = if self.cfg.likelihood {
                            1.0 / truncated_gamma((cnt - 1.0) / 2.0, ss / 2.0, 1.0 / (u_sd * u_sd), &mut rng)
                        } else {
                            (u_sd * rng.random::<f64>()).powi(2)
                        };
                        sigma2[j] = draw.max(VARIANCE_FLOOR * u_sd * u_sd);
                    }
                }
                PriorSpec::DirichletRelative { .. } => {
                    let target = RelativeTarget {
                        delta: &delta,
                        t_max,
                        stats,
                        likelihood: self.cfg.likelihood,
                    };
                    let mut cur = target.eval(&u);
                    if !cur.is_finite() {
                        return Err(self.non_finite(it, "log target", mu, &sigma2));
                    }
                    for c in 0..u.len() {
                        let old = u[c];
                        let z: f64 = rng.sample(StandardNormal);
                        u[c] = old + step[c] * z;
                        let prop = target.eval(&u);
                        if prop.is_nan() {
                            return Err(self.non_finite(it, &format!("proposal for {}", self.coord_name(c)), mu, &sigma2));
                        }
                        let lu: f64 = rng.random::<f64>().ln();
                        let acc = lu < prop - cur;
                        if acc {
                            cur = prop;
                            accepted_window[c] += 1;
                        } else {
                            u[c] = old;
                        }
                        if it >= self.cfg.burn_in {
                            if acc {
                                accepted_post[c] += 1;
                                stall[c] = 0;
                            } else {
                                stall[c] += 1;
                                if stall[c] >= self.cfg.stall_window {
                                    return Err(Error::StepSize {
                                        chain: self.index,
                                        parameter: self.coord_name(c),
                                        window: self.cfg.stall_window,
                                        step: step[c],
                                    });
                                }
                            }
                        }
                    }
                    let t = u[0].exp();
                    for (s, p) in sigma2.iter_mut().zip(RelativeTarget::shares(&u)) {
                        *s = t * p;
                    }
                    if it < self.cfg.burn_in && (it + 1) % self.cfg.adapt_window == 0 {
                        batch += 1;
                        let gain = (1.0 / (batch as f64).sqrt()).clamp(0.01, 0.1);
                        for c in 0..step.len() {
                            let rate = accepted_window[c] as f64 / self.cfg.adapt_window as f64;
                            let dir = if rate > self.cfg.target_acceptance { 1.0 } else { -1.0 };
                            step[c] = (step[c].ln() + dir * gain).exp().clamp(1e-4, 20.0);
                        }
                    }
                    if (it + 1) % self.cfg.adapt_window == 0 {
                        accepted_window.iter_mut().for_each(|a| *a = 0);
                    }
                }
                PriorSpec::ModelMixing { .. } => unreachable!("rejected in fit"),
            }
            if sigma2.iter().any(|s| !s.is_finite()) {
                return Err(self.non_finite(it, "variance update", mu, &sigma2));
            }

            if it >= self.cfg.burn_in && (it - self.cfg.burn_in) % self.cfg.thin == 0 {
                draws.push(self.record(mu, &effects, &sigma2, &resid)?);
            }
        }
        let post = (self.cfg.iterations - self.cfg.burn_in) as f64;
        Ok((
            draws,
            ChainInfo {
                acceptance: accepted_post.iter().map(|a| *a as f64 / post).collect(),
                step,
            },
        ))
    }

    fn initial_variances<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let m = self.ds.layout().n_sources();
        let var = self.ds.variance();
        let scale = if var > 0.0 && var.is_finite() { var } else { 1.0 };
        let jitter: Vec<f64> = sample_dirichlet(&vec![1.0; m], rng);
        let base: Vec<f64> = jitter.iter().map(|j| scale * (0.5 * j + 0.5 / m as f64)).collect();
        match &self.prior.variance {
            PriorSpec::IndependentUniform { upper_sd } => {
                base.iter().zip(upper_sd).map(|(b, u)| b.min((0.5 * u).powi(2))).collect()
            }
            PriorSpec::DirichletRelative { t_max, .. } => {
                let t: f64 = base.iter().sum();
                let f = if t > 0.5 * t_max { 0.5 * t_max / t } else { 1.0 };
                base.iter().map(|b| b * f).collect()
            }
            PriorSpec::ModelMixing { .. } => base,
        }
    }

    fn record(&self, mu: f64, effects: &[Vec<f64>], sigma2: &[f64], resid: &[f64]) -> Result<Draw> {
        let k = effects.len();
        let v = VarianceVector::new(sigma2.to_vec())?;
        let mut finite_sd: Vec<f64> = effects.iter().map(|e| finite_sd(e).unwrap_or(0.0)).collect();
        finite_sd.push(finite_sd_of(resid));

        let mut lj = 0.0;
        if self.cfg.likelihood {
            lj += log_normal_sum(resid.iter().map(|r| r * r).sum(), resid.len() as f64, sigma2[k]);
        }
        for (e, &s2) in effects.iter().zip(sigma2) {
            if s2 > 0.0 {
                lj += log_normal_sum(e.iter().map(|x| x * x).sum(), e.len() as f64, s2);
            }
        }
        let mp = &self.prior.mean;
        lj += log_normal_sum((mu - mp.mean).powi(2), 1.0, mp.sd * mp.sd);
        lj += prior_log_density(&self.prior.variance, &v);
        Ok(Draw {
            chain: self.index,
            mu,
            effects: effects.to_vec(),
            sigma2: sigma2.to_vec(),
            total: v.total(),
            phi: v.phi().to_vec(),
            finite_sd,
            log_joint: lj,
        })
    }

    fn coord_name(&self, c: usize) -> String {
        if c == 0 {
            "log T".into()
        } else {
            format!("log phi ratio {}", self.ds.layout().sources()[c - 1].name)
        }
    }

    fn non_finite(&self, iteration: usize, what: &str, mu: f64, sigma2: &[f64]) -> Error {
        Error::NonFinite {
            chain: self.index,
            iteration,
            state: format!("{what}: mu = {mu:e}, sigma2 = {sigma2:?}"),
        }
    }
}

fn finite_sd_of(v: &[f64]) -> f64 {
    finite_sd(v).unwrap_or(0.0)
}

/// Run all chains and merge their retained draws in chain order.
pub fn fit(ds: &Dataset, prior: &ModelPrior, cfg: &SamplerConfig) -> Result<PosteriorDraws> {
    cfg.validate()?;
    let m = ds.layout().n_sources();
    if matches!(prior.variance, PriorSpec::ModelMixing { .. }) {
        return Err(Error::Prior(
            "model-mixing priors are handled by the submodel posterior, not the sampler".into(),
        ));
    }
    prior.variance.validate(m)?;
    let cp = CrossProducts::new(ds, ds.responses());
    let results: Vec<Result<(Vec<Draw>, ChainInfo)>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| {
            Chain {
                ds,
                cp: &cp,
                prior,
                cfg,
                index: c,
            }
            .run()
        })
        .collect();
    let mut draws = Vec::with_capacity(cfg.chains * cfg.draws_per_chain());
    let mut chain_info = Vec::with_capacity(cfg.chains);
    for r in results {
        let (d, info) = r?;
        draws.extend(d);
        chain_info.push(info);
    }
    let sources = ds.layout().source_names();
    let mut n_effects: Vec<usize> = ds.memberships().iter().map(|mm| mm.n_effects).collect();
    n_effects.push(ds.n());
    let warnings = sources
        .iter()
        .zip(&n_effects)
        .filter(|(_, &j)| j < 2)
        .map(|(s, _)| format!("source `{s}` has fewer than 2 effects; finite-population SD skipped"))
        .collect();
    Ok(PosteriorDraws {
        sources,
        n_effects,
        chains: cfg.chains,
        draws,
        chain_info,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Concentration, PriorConfig};

    fn small() -> Dataset {
        Dataset::one_way(&[
            vec![1.2, 0.8, 1.9, 1.1],
            vec![-0.3, 0.2, 0.4, -0.8],
            vec![2.5, 3.1, 2.2, 2.9],
            vec![0.1, 0.0, 0.6, 0.3],
        ])
        .unwrap()
    }

    fn quick() -> SamplerConfig {
        SamplerConfig {
            chains: 2,
            iterations: 600,
            burn_in: 200,
            thin: 2,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut c = SamplerConfig::default();
        assert!(c.validate().is_ok());
        c.burn_in = c.iterations;
        assert!(c.validate().is_err());
        let c = SamplerConfig { thin: 0, ..Default::default() };
        assert!(c.validate().is_err());
        assert_eq!(SamplerConfig::default().draws_per_chain(), 500);
    }

    #[test]
    fn truncated_gamma_respects_bound_and_tail() {
        let mut rng = seed::stream(3, &[]);
        for &(a, b, c) in &[(2.0, 1.0, 0.5), (2.0, 1.0, 10.0), (0.5, 3.0, 4.0), (3.5, 0.01, 1e4)] {
            let draws: Vec<f64> = (0..4000).map(|_| truncated_gamma(a, b, c, &mut rng)).collect();
            assert!(draws.iter().all(|&t| t >= c));
            if c * b > a && a >= 1.0 {
                // far tail: approximately c + Exp(b − (a−1)/c)
                let mean = draws.iter().sum::<f64>() / 4000.0 - c;
                let approx = 1.0 / (b - (a - 1.0) / c);
                assert!(mean > 0.0 && mean < 2.0 * approx);
            }
        }
    }

    #[test]
    fn truncated_gamma_matches_truncated_mean() {
        // Gamma(2, 1) | τ ≥ 1: E = (c² + 2c + 2)/(c + 1) at c = 1 → 2.5
        let mut rng = seed::stream(4, &[]);
        let n = 40_000;
        let m: f64 = (0..n).map(|_| truncated_gamma(2.0, 1.0, 1.0, &mut rng)).sum::<f64>() / n as f64;
        assert!((m - 2.5).abs() < 0.03, "{m}");
        // tail branch, c = 4: E = (16 + 8 + 2)/5 = 5.2
        let m: f64 = (0..n).map(|_| truncated_gamma(2.0, 1.0, 4.0, &mut rng)).sum::<f64>() / n as f64;
        assert!((m - 5.2).abs() < 0.04, "{m}");
    }

    #[test]
    fn same_seed_same_draws() {
        let ds = small();
        let prior = PriorConfig::default().resolve(&ds).unwrap();
        let a = fit(&ds, &prior, &quick()).unwrap();
        let b = fit(&ds, &prior, &quick()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2 * 200);
        let c = fit(&ds, &prior, &SamplerConfig { seed: 12, ..quick() }).unwrap();
        assert_ne!(a.draws[0].mu, c.draws[0].mu);
    }

    #[test]
    fn uniform_prior_draws_stay_in_support() {
        let ds = small();
        let prior = PriorConfig {
            kind: crate::model::PriorKind::IndependentUniform,
            upper_sd: Some(crate::model::PerSource::Each(vec![3.0, 0.9])),
            ..Default::default()
        }
        .resolve(&ds)
        .unwrap();
        let d = fit(&ds, &prior, &quick()).unwrap();
        assert!(d.draws.iter().all(|x| x.sigma2[0] <= 9.0 && x.sigma2[1] <= 0.81));
        assert!(d.draws.iter().all(|x| x.finite_sd.iter().all(|s| *s >= 0.0)));
    }

    #[test]
    fn all_zero_data_with_tiny_bounds_pins_mu() {
        let ds = Dataset::one_way(&[vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]]).unwrap();
        let prior = ModelPrior {
            variance: PriorSpec::independent_uniform(vec![1e-6, 1e-6]).unwrap(),
            mean: MeanPrior::new(0.0, 10.0).unwrap(),
        };
        let d = fit(&ds, &prior, &quick()).unwrap();
        let mean = d.draws.iter().map(|x| x.mu).sum::<f64>() / d.len() as f64;
        assert!(mean.abs() < 1e-3);
    }

    #[test]
    fn prior_only_run_recovers_dirichlet_mean() {
        let ds = small();
        let prior = ModelPrior {
            variance: PriorSpec::dirichlet_relative(Concentration::PerComponent(vec![2.0, 6.0]), 5.0).unwrap(),
            mean: MeanPrior::new(0.0, 1.0).unwrap(),
        };
        let cfg = SamplerConfig {
            likelihood: false,
            iterations: 8000,
            burn_in: 500,
            thin: 1,
            ..quick()
        };
        let d = fit(&ds, &prior, &cfg).unwrap();
        let phi: f64 = d.draws.iter().map(|x| x.phi[0]).sum::<f64>() / d.len() as f64;
        let t: f64 = d.draws.iter().map(|x| x.total).sum::<f64>() / d.len() as f64;
        assert!((phi - 0.25).abs() < 0.02, "{phi}");
        assert!((t - 2.5).abs() < 0.15, "{t}");
    }

    #[test]
    fn mixing_prior_is_rejected() {
        let ds = small();
        let prior = ModelPrior {
            variance: PriorSpec::model_mixing(vec![0.5], Concentration::Shared(1.0), 5.0).unwrap(),
            mean: MeanPrior::new(0.0, 1.0).unwrap(),
        };
        assert!(matches!(fit(&ds, &prior, &quick()), Err(Error::Prior(_))));
    }

    #[test]
    fn stalled_chain_reports_step_size() {
        let ds = small();
        let prior = PriorConfig::default().resolve(&ds).unwrap();
        // burn-in far too short to shrink an absurd step; proposals never land
        let cfg = SamplerConfig {
            initial_step: 1e3,
            iterations: 800,
            burn_in: 1,
            stall_window: 100,
            ..quick()
        };
        assert!(matches!(fit(&ds, &prior, &cfg), Err(Error::StepSize { .. })));
    }

    #[test]
    fn table_columns() {
        let ds = small();
        let prior = PriorConfig::default().resolve(&ds).unwrap();
        let d = fit(&ds, &prior, &quick()).unwrap();
        let (h, rows) = d.table();
        assert_eq!(
            h,
            [
                "chain",
                "mu",
                "sigma2.group",
                "sigma2.residual",
                "s.group",
                "s.residual",
                "phi.group",
                "phi.residual",
                "T",
                "log_joint"
            ]
        );
        assert_eq!(rows.len(), d.len());
        assert!(rows.iter().all(|r| r.len() == h.len()));
    }
}
