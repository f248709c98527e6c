use serde::{Deserialize, Serialize};

use super::PosteriorDraws;
use crate::error::{Error, Result};

/// sqrt(Σ (x − x̄)² / (J − 1)); `None` when J < 2.
pub fn finite_sd(values: &[f64]) -> Option<f64> {
    let j = values.len();
    if j < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / j as f64;
    Some((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (j - 1) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinitePopulation {
    pub sources: Vec<String>,
    /// `values[d][k]` is s for draw d and the k-th reported source.
    pub values: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Finite-population SD of every source with at least two effects, per draw.
pub fn finite_pop_summaries(draws: &PosteriorDraws) -> FinitePopulation {
    let mut sources = Vec::new();
    let mut keep = Vec::new();
    let mut warnings = Vec::new();
    for (k, (name, &j)) in draws.sources.iter().zip(&draws.n_effects).enumerate() {
        if j < 2 {
            warnings.push(format!("source `{name}` has {j} effect(s); skipped"));
        } else {
            sources.push(name.clone());
            keep.push(k);
        }
    }
    let values = draws
        .draws
        .iter()
        .map(|d| keep.iter().map(|&k| d.finite_sd[k]).collect())
        .collect();
    FinitePopulation { sources, values, warnings }
}

/// Scalar functional of a draw whose sign is of interest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Functional {
    Mu,
    Effect { source: usize, index: usize },
    /// η_plus − η_minus within one source.
    Contrast { source: usize, plus: usize, minus: usize },
}

impl Functional {
    fn check(&self, draws: &PosteriorDraws) -> Result<()> {
        let n_eff = draws.n_effects.len().saturating_sub(1);
        let bad = |s: usize, idx: &[usize]| s >= n_eff || idx.iter().any(|&i| i >= draws.n_effects[s]);
        match *self {
            Functional::Mu => Ok(()),
            Functional::Effect { source, index } if !bad(source, &[index]) => Ok(()),
            Functional::Contrast { source, plus, minus } if !bad(source, &[plus, minus]) => Ok(()),
            _ => Err(Error::UnknownSource(format!("{self:?} does not name an effect of this model"))),
        }
    }
}

/// Fraction of retained draws with the functional strictly positive.
pub fn sign_probability(draws: &PosteriorDraws, f: &Functional) -> Result<f64> {
    f.check(draws)?;
    if draws.is_empty() {
        return Err(Error::InsufficientDraws("no retained draws".into()));
    }
    let pos = draws
        .draws
        .iter()
        .filter(|d| {
            let v = match *f {
                Functional::Mu => d.mu,
                Functional::Effect { source, index } => d.effects[source][index],
                Functional::Contrast { source, plus, minus } => d.effects[source][plus] - d.effects[source][minus],
            };
            v > 0.0
        })
        .count();
    Ok(pos as f64 / draws.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q975: f64,
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(name: &str, values: &[f64]) -> ParamSummary {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p| if s.is_empty() { f64::NAN } else { quantile_sorted(&s, p) };
    ParamSummary {
        name: name.to_string(),
        mean,
        sd,
        q025: q(0.025),
        q25: q(0.25),
        q50: q(0.5),
        q75: q(0.75),
        q975: q(0.975),
    }
}
