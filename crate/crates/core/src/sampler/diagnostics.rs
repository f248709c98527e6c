//! Multi-chain effective sample size and split-chain R̂.

use serde::Serialize;

use crate::error::{Error, Result};

/// Split-chain R̂ above this value is flagged.
pub const RHAT_FLAG: f64 = 1.05;
pub const MIN_DRAWS_PER_CHAIN: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamDiagnostic {
    pub name: String,
    /// `None` when the parameter is constant.
    pub ess: Option<f64>,
    /// `None` when undefined (no within-chain variation).
    pub rhat: Option<f64>,
    pub flagged: bool,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub params: Vec<ParamDiagnostic>,
    pub any_flagged: bool,
}

impl Diagnostics {
    pub fn new(params: Vec<ParamDiagnostic>) -> Self {
        let any_flagged = params.iter().any(|p| p.flagged);
        Self { params, any_flagged }
    }

    pub fn get(&self, name: &str) -> Option<&ParamDiagnostic> {
        self.params.iter().find(|p| p.name == name)
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// (W, B/n) for equal-length chains.
fn within_between(chains: &[&[f64]]) -> (f64, f64) {
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = chains.iter().map(|c| var(c)).sum::<f64>() / chains.len() as f64;
    let b_over_n = if chains.len() > 1 { var(&means) } else { 0.0 };
    (w, b_over_n)
}

fn autocov(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    let m = mean(x);
    (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / n as f64
}

/// ESS and split R̂ for one parameter from equal-length chains.
pub fn diagnose(name: &str, chains: &[Vec<f64>]) -> Result<ParamDiagnostic> {
    if chains.len() < 2 {
        return Err(Error::InsufficientDraws(format!(
            "diagnostics need ≥ 2 chains, got {}",
            chains.len()
        )));
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::InsufficientDraws("chains have unequal lengths".into()));
    }
    if n < MIN_DRAWS_PER_CHAIN {
        return Err(Error::InsufficientDraws(format!(
            "diagnostics need ≥ {MIN_DRAWS_PER_CHAIN} draws per chain, got {n}"
        )));
    }
    let first = chains[0][0];
    if chains.iter().flatten().all(|&v| v == first) {
        return Ok(ParamDiagnostic {
            name: name.to_string(),
            ess: None,
            rhat: None,
            flagged: false,
            degenerate: true,
        });
    }

    let half = n / 2;
    let split: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..half], &c[n - half..]])
        .collect();
    let (w_s, b_s) = within_between(&split);
    let rhat = if w_s > 0.0 {
        Some((((half as f64 - 1.0) / half as f64 * w_s + b_s) / w_s).sqrt())
    } else {
        None
    };

    let refs: Vec<&[f64]> = chains.iter().map(|c| c.as_slice()).collect();
    let (w, b) = within_between(&refs);
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b;
    let ess = if w > 0.0 {
        let m = chains.len() as f64;
        let rho = |t: usize| {
            let acov = refs.iter().map(|c| autocov(c, t)).sum::<f64>() / m;
            1.0 - (w - acov * n as f64 / (n as f64 - 1.0)) / var_plus
        };
        // Geyer's initial positive and monotone sequence
        let mut tau = -1.0;
        let mut prev = f64::INFINITY;
        let mut t = 0;
        while t + 1 < n {
            let pair = rho(t) + rho(t + 1);
            if pair <= 0.0 {
                break;
            }
            let pair = pair.min(prev);
            tau += 2.0 * pair;
            prev = pair;
            t += 2;
        }
        let total = m * n as f64;
        // as in Stan: τ ≥ 1/log10(N) caps ESS at N log10(N) for antithetic chains
        Some(total / tau.max(1.0 / total.log10()))
    } else {
        None
    };
    let flagged = rhat.is_none_or(|r| r > RHAT_FLAG);
    Ok(ParamDiagnostic {
        name: name.to_string(),
        ess,
        rhat,
        flagged,
        degenerate: false,
    })
}
