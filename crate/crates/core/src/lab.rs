//! Simulation studies: null calibration and power of the posterior-predictive
//! test, prior sensitivity sweeps, simulation-based calibration of the
//! sampler, and a synthetic nested survey generator.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::design::{Dataset, FactorDecl, LayoutOptions, Observation};
use crate::error::{Error, Result};
use crate::model::{simulate_responses, Concentration, ModelPrior, PriorConfig, PriorKind};
use crate::ppc::{ppc, PpcConfig, Scheme, Statistic};
use crate::sampler::{fit, ParamSummary, SamplerConfig};
use crate::seed::{self, derive_seed, tag};

/// How optimality of a statistic is judged in power studies.
pub const SIZE_ADJUSTED_CRITERION: &str = "size-adjusted power: each statistic rejects when p <= c, where c is the \
largest value whose empirical rejection rate on the sigma = 0 datasets does not exceed alpha";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

/// SHA-256 of the JSON serialization of `config`, with the crate version.
pub fn provenance<T: Serialize>(config: &T, seed: u64) -> Provenance {
    let bytes = serde_json::to_vec(config).expect("configs serialize");
    Provenance {
        config_hash: hex::encode(Sha256::digest(&bytes)),
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DesignSpec {
    /// One factor `group`; unequal sizes give an unbalanced design.
    OneWay { group_sizes: Vec<usize> },
    /// Crossed factors `A` and `B` with equal replication.
    TwoWay {
        a_levels: usize,
        b_levels: usize,
        replicates: usize,
    },
}

impl DesignSpec {
    pub fn balanced_one_way(groups: usize, per_group: usize) -> Self {
        DesignSpec::OneWay {
            group_sizes: vec![per_group; groups],
        }
    }

    /// The layout filled with zero responses.
    pub fn template(&self) -> Result<Dataset> {
        match self {
            DesignSpec::OneWay { group_sizes } => {
                if group_sizes.contains(&0) {
                    return Err(Error::Config("group sizes must be ≥ 1".into()));
                }
                let groups: Vec<Vec<f64>> = group_sizes.iter().map(|&n| vec![0.0; n]).collect();
                Dataset::one_way(&groups)
            }
            &DesignSpec::TwoWay {
                a_levels,
                b_levels,
                replicates,
            } => {
                if replicates == 0 {
                    return Err(Error::Config("replicates must be ≥ 1".into()));
                }
                let mut obs = Vec::new();
                for a in 0..a_levels {
                    for b in 0..b_levels {
                        for _ in 0..replicates {
                            obs.push(Observation::new(0.0, [("A", format!("a{a:02}")), ("B", format!("b{b:02}"))]));
                        }
                    }
                }
                Dataset::build(
                    &[FactorDecl::crossed("A"), FactorDecl::crossed("B")],
                    obs,
                    &LayoutOptions::default(),
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub design: DesignSpec,
    /// Source under test.
    pub source: String,
    /// True SD of the tested source at each grid point.
    pub grid: Vec<f64>,
    /// True SDs of the other sources; the residual defaults to 1 and any
    /// other unlisted source to 0.
    pub background_sd: BTreeMap<String, f64>,
    pub mu: f64,
    pub statistics: Vec<Statistic>,
    pub replicates: usize,
    /// Simulated datasets per grid point.
    pub datasets: usize,
    pub sampler: SamplerConfig,
    pub alpha: f64,
    pub seed: u64,
    pub scheme: Scheme,
    pub prior: PriorConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            design: DesignSpec::balanced_one_way(10, 5),
            source: "group".into(),
            grid: vec![0.0],
            background_sd: BTreeMap::new(),
            mu: 0.0,
            statistics: vec![Statistic::Ss],
            replicates: 200,
            datasets: 200,
            sampler: SamplerConfig {
                chains: 2,
                iterations: 1500,
                burn_in: 500,
                thin: 5,
                ..Default::default()
            },
            alpha: 0.05,
            seed: 0,
            scheme: Scheme::Marginal,
            prior: PriorConfig::default(),
        }
    }
}

impl StudyConfig {
    fn validate(&self) -> Result<Dataset> {
        if self.grid.is_empty() || self.grid.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Study("grid values must be finite and ≥ 0".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Study(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.datasets == 0 || self.replicates == 0 {
            return Err(Error::Study("datasets and replicates must be ≥ 1".into()));
        }
        if self.statistics.is_empty() {
            return Err(Error::Study("no statistics requested".into()));
        }
        self.sampler.validate()?;
        let template = self.design.template()?;
        let idx = template.layout().source_index(&self.source)?;
        if idx + 1 == template.layout().n_sources() {
            return Err(Error::Study("the residual cannot be tested".into()));
        }
        for (name, sd) in &self.background_sd {
            template.layout().source_index(name)?;
            if name == &self.source {
                return Err(Error::Study(format!("`{name}` is the tested source; set it through the grid")));
            }
            if !sd.is_finite() || *sd < 0.0 {
                return Err(Error::Study(format!("background SD for `{name}` must be finite and ≥ 0")));
            }
        }
        Ok(template)
    }

    fn true_variances(&self, template: &Dataset, sigma: f64) -> Vec<f64> {
        template
            .layout()
            .sources()
            .iter()
            .map(|s| {
                let sd = if s.name == self.source {
                    sigma
                } else {
                    self.background_sd
                        .get(&s.name)
                        .copied()
                        .unwrap_or(if s.is_residual() { 1.0 } else { 0.0 })
                };
                sd * sd
            })
            .collect()
    }
}

/// p-values indexed [grid point][statistic][dataset].
fn run_grid(cfg: &StudyConfig, template: &Dataset, grid: &[(usize, f64)], study: u64) -> Result<Vec<Vec<Vec<f64>>>> {
    let tasks: Vec<(usize, usize, f64)> = grid
        .iter()
        .flat_map(|&(g, s)| (0..cfg.datasets).map(move |i| (g, i, s)))
        .collect();
    let results: Vec<Vec<f64>> = tasks
        .par_iter()
        .map(|&(g, i, sigma)| {
            let key = [study, g as u64, i as u64];
            let mut rng = seed::stream(cfg.seed, &[study, tag::DATASET, g as u64, i as u64]);
            let y = simulate_responses(template, cfg.mu, &cfg.true_variances(template, sigma), &mut rng);
            let ds = template.with_responses(y)?;
            let prior = cfg.prior.resolve(&ds)?;
            let sampler = SamplerConfig {
                seed: derive_seed(cfg.seed, &[tag::FIT, key[0], key[1], key[2]]),
                ..cfg.sampler.clone()
            };
            let pc = PpcConfig {
                scheme: cfg.scheme,
                replicates: cfg.replicates,
                seed: derive_seed(cfg.seed, &[tag::PPC, key[0], key[1], key[2]]),
            };
            let reports = ppc(&ds, &prior, &cfg.source, &cfg.statistics, &sampler, &pc)?;
            Ok(reports.iter().map(|r| r.p).collect())
        })
        .collect::<Result<_>>()?;
    // tasks are ordered by grid point, then dataset
    Ok(results
        .chunks(cfg.datasets)
        .map(|block| (0..cfg.statistics.len()).map(|j| block.iter().map(|p| p[j]).collect()).collect())
        .collect())
}

fn rate_se(rate: f64, count: usize) -> f64 {
    (rate * (1.0 - rate) / count as f64).sqrt()
}

/// Minimum number of datasets for binomial standard errors to be reported
/// as usable.
pub const MIN_DATASETS_FOR_SE: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationSummary {
    pub statistic: Statistic,
    pub p_values: Vec<f64>,
    /// Sorted distinct p-values with the empirical CDF at each.
    pub ecdf: Vec<(f64, f64)>,
    pub fraction_below_alpha: f64,
    /// sqrt(rate (1 − rate) / N) at the observed rate.
    pub se: f64,
    /// α + 2 sqrt(α (1 − α) / N).
    pub threshold: f64,
    pub conservative: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub source: String,
    pub datasets: usize,
    pub alpha: f64,
    pub se_usable: bool,
    pub warnings: Vec<String>,
    pub statistics: Vec<CalibrationSummary>,
    pub provenance: Provenance,
}

fn ecdf(p: &[f64]) -> Vec<(f64, f64)> {
    let mut s = p.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in s.iter().enumerate() {
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = (i + 1) as f64 / n,
            _ => out.push((v, (i + 1) as f64 / n)),
        }
    }
    out
}

/// Null behaviour of the test: every dataset is simulated with the tested
/// source's SD at 0.
pub fn calibration_study(cfg: &StudyConfig) -> Result<CalibrationReport> {
    let template = cfg.validate()?;
    let zero = cfg
        .grid
        .iter()
        .position(|&s| s == 0.0)
        .ok_or_else(|| Error::Study("calibration needs σ = 0 in the grid".into()))?;
    let p = run_grid(cfg, &template, &[(zero, 0.0)], tag::CALIBRATION)?;
    let n = cfg.datasets;
    let se_usable = n >= MIN_DATASETS_FOR_SE;
    let mut warnings = Vec::new();
    if !se_usable {
        warnings.push(format!(
            "only {n} dataset(s); binomial standard errors need at least {MIN_DATASETS_FOR_SE} to be usable"
        ));
    }
    let threshold = cfg.alpha + 2.0 * rate_se(cfg.alpha, n);
    let statistics = cfg
        .statistics
        .iter()
        .zip(&p[0])
        .map(|(&statistic, pv)| {
            let rate = pv.iter().filter(|&&x| x < cfg.alpha).count() as f64 / n as f64;
            CalibrationSummary {
                statistic,
                ecdf: ecdf(pv),
                p_values: pv.clone(),
                fraction_below_alpha: rate,
                se: rate_se(rate, n),
                threshold,
                conservative: rate <= threshold,
            }
        })
        .collect();
    Ok(CalibrationReport {
        source: cfg.source.clone(),
        datasets: n,
        alpha: cfg.alpha,
        se_usable,
        warnings,
        statistics,
        provenance: provenance(cfg, cfg.seed),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerCell {
    pub sigma: f64,
    pub statistic: Statistic,
    pub count: usize,
    /// Rate of p < α.
    pub rate: f64,
    pub se: f64,
    /// Rate of p ≤ c_s with the size-adjusted critical value c_s.
    pub adjusted_rate: Option<f64>,
    pub adjusted_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankEntry {
    pub statistic: Statistic,
    pub power: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranking {
    pub sigma: f64,
    /// Most powerful first.
    pub order: Vec<RankEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerTable {
    pub source: String,
    pub balanced: bool,
    pub alpha: f64,
    pub grid: Vec<f64>,
    pub statistics: Vec<Statistic>,
    pub datasets: usize,
    pub criterion: String,
    /// Size-adjusted critical p-value per statistic; `None` without a σ = 0
    /// grid point.
    pub critical: Vec<Option<f64>>,
    pub cells: Vec<PowerCell>,
    pub rankings: Vec<Ranking>,
    /// [grid point][statistic][dataset]
    pub p_values: Vec<Vec<Vec<f64>>>,
    pub provenance: Provenance,
}

impl PowerTable {
    pub fn cell(&self, sigma: f64, statistic: Statistic) -> Option<&PowerCell> {
        self.cells.iter().find(|c| c.sigma == sigma && c.statistic == statistic)
    }
}

/// Largest c among the null p-values with #{p ≤ c} / N ≤ α (0 if none).
pub fn size_adjusted_critical(null_p: &[f64], alpha: f64) -> f64 {
    let mut s = null_p.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut c = 0.0;
    for (i, &v) in s.iter().enumerate() {
        // all ties at v are rejected together
        let count = s[i..].iter().take_while(|&&x| x == v).count() + i;
        if count as f64 / n <= alpha {
            c = v;
        } else {
            break;
        }
    }
    c
}

/// Rejection rates per grid point and statistic, raw and size-adjusted.
pub fn power_study(cfg: &StudyConfig) -> Result<PowerTable> {
    if cfg.statistics.len() < 2 {
        return Err(Error::Study("a power study compares at least 2 statistics".into()));
    }
    if cfg.grid.len() < 2 {
        return Err(Error::Study("a power study needs an alternative: at least 2 grid points".into()));
    }
    let template = cfg.validate()?;
    let grid: Vec<(usize, f64)> = cfg.grid.iter().copied().enumerate().collect();
    let p = run_grid(cfg, &template, &grid, tag::POWER)?;
    let n = cfg.datasets;
    let zero = cfg.grid.iter().position(|&s| s == 0.0);
    let critical: Vec<Option<f64>> = (0..cfg.statistics.len())
        .map(|j| zero.map(|z| size_adjusted_critical(&p[z][j], cfg.alpha)))
        .collect();

    let mut cells = Vec::new();
    let mut rankings = Vec::new();
    for (g, &sigma) in cfg.grid.iter().enumerate() {
        let mut order = Vec::new();
        for (j, &statistic) in cfg.statistics.iter().enumerate() {
            let pv = &p[g][j];
            let rate = pv.iter().filter(|&&x| x < cfg.alpha).count() as f64 / n as f64;
            let adjusted_rate = critical[j].map(|c| pv.iter().filter(|&&x| x <= c).count() as f64 / n as f64);
            let cell = PowerCell {
                sigma,
                statistic,
                count: n,
                rate,
                se: rate_se(rate, n),
                adjusted_rate,
                adjusted_se: adjusted_rate.map(|r| rate_se(r, n)),
            };
            order.push(RankEntry {
                statistic,
                power: cell.adjusted_rate.unwrap_or(cell.rate),
                se: cell.adjusted_se.unwrap_or(cell.se),
            });
            cells.push(cell);
        }
        order.sort_by(|a, b| b.power.total_cmp(&a.power));
        rankings.push(Ranking { sigma, order });
    }
    Ok(PowerTable {
        source: cfg.source.clone(),
        balanced: template.is_balanced(),
        alpha: cfg.alpha,
        grid: cfg.grid.clone(),
        statistics: cfg.statistics.clone(),
        datasets: n,
        criterion: SIZE_ADJUSTED_CRITERION.to_string(),
        critical,
        cells,
        rankings,
        p_values: p,
        provenance: provenance(cfg, cfg.seed),
    })
}

/// Largest allowed shift of a posterior φ summary across the δ grid.
pub const SENSITIVITY_SHIFT: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub delta: f64,
    pub summaries: Vec<ParamSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentShift {
    pub source: String,
    /// Range across δ of the posterior mean of φ.
    pub mean_shift: f64,
    /// Range across δ of the 2.5% and 97.5% posterior quantiles of φ.
    pub lower_shift: f64,
    pub upper_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub deltas: Vec<f64>,
    pub points: Vec<SweepPoint>,
    pub shifts: Vec<ComponentShift>,
    /// `None` for a single δ.
    pub sensitive: Option<bool>,
    pub threshold: f64,
}

/// Refit under DirichletRelative(δ) for each δ, keeping the rest of `base`.
///
/// Every fit uses the same sampler seed. The flag is raised when the
/// posterior mean or an outer 95% quantile of some φ_m moves by more than
/// [`SENSITIVITY_SHIFT`] across the grid.
pub fn sensitivity_sweep(ds: &Dataset, deltas: &[f64], base: &PriorConfig, sampler: &SamplerConfig) -> Result<SweepReport> {
    if deltas.is_empty() || deltas.iter().any(|d| !d.is_finite() || *d <= 0.0) {
        return Err(Error::Study("δ grid must be non-empty with all values > 0".into()));
    }
    let points: Vec<SweepPoint> = deltas
        .par_iter()
        .map(|&delta| {
            let pc = PriorConfig {
                kind: PriorKind::DirichletRelative,
                delta: Some(Concentration::Shared(delta)),
                ..base.clone()
            };
            let draws = fit(ds, &pc.resolve(ds)?, sampler)?;
            let summaries = draws
                .summaries()
                .into_iter()
                .filter(|s| s.name != "mu" && s.name != "T")
                .collect();
            Ok(SweepPoint { delta, summaries })
        })
        .collect::<Result<_>>()?;
    let shifts: Vec<ComponentShift> = ds
        .layout()
        .source_names()
        .into_iter()
        .map(|source| {
            let key = format!("phi.{source}");
            let pick = |f: fn(&ParamSummary) -> f64| -> f64 {
                let v: Vec<f64> = points
                    .iter()
                    .map(|p| f(p.summaries.iter().find(|s| s.name == key).expect("phi summary")))
                    .collect();
                v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min)
            };
            ComponentShift {
                mean_shift: pick(|s| s.mean),
                lower_shift: pick(|s| s.q025),
                upper_shift: pick(|s| s.q975),
                source,
            }
        })
        .collect();
    let sensitive = (deltas.len() > 1).then(|| {
        shifts
            .iter()
            .any(|s| s.mean_shift.max(s.lower_shift).max(s.upper_shift) > SENSITIVITY_SHIFT)
    });
    Ok(SweepReport {
        deltas: deltas.to_vec(),
        points,
        shifts,
        sensitive,
        threshold: SENSITIVITY_SHIFT,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoVariances {
    pub region: f64,
    pub state: f64,
    pub msa: f64,
    pub plan: f64,
    /// Plan-by-MSA interaction; `None` leaves the term out of the model.
    pub plan_msa: Option<f64>,
    pub residual: f64,
}

impl Default for DemoVariances {
    fn default() -> Self {
        Self {
            region: 0.2,
            state: 0.1,
            msa: 0.1,
            plan: 1.0,
            plan_msa: None,
            residual: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NestedDemoConfig {
    pub regions: usize,
    pub states_per_region: usize,
    pub msas_per_state: usize,
    pub plans: usize,
    /// Individuals per (MSA, plan) cell.
    pub per_cell: usize,
    pub variances: DemoVariances,
    pub mu: f64,
    pub seed: u64,
}

impl Default for NestedDemoConfig {
    fn default() -> Self {
        Self {
            regions: 4,
            states_per_region: 3,
            msas_per_state: 2,
            plans: 4,
            per_cell: 3,
            variances: DemoVariances::default(),
            mu: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NestedDemo {
    pub dataset: Dataset,
    /// Generating variance per source, in layout order.
    pub truth: Vec<(String, f64)>,
    pub notes: Vec<String>,
}

/// Regions ⊃ states ⊃ MSAs, crossed with health plans.
pub fn generate_nested_demo(cfg: &NestedDemoConfig) -> Result<NestedDemo> {
    let counts = [
        ("regions", cfg.regions, 2),
        ("states_per_region", cfg.states_per_region, 2),
        ("msas_per_state", cfg.msas_per_state, 1),
        ("plans", cfg.plans, 2),
        ("per_cell", cfg.per_cell, 1),
    ];
    for (name, v, min) in counts {
        if v < min {
            return Err(Error::Config(format!("{name} must be ≥ {min}, got {v}")));
        }
    }
    let v = &cfg.variances;
    for (name, x) in [
        ("region", v.region),
        ("state", v.state),
        ("msa", v.msa),
        ("plan", v.plan),
        ("plan_msa", v.plan_msa.unwrap_or(0.0)),
    ] {
        if !x.is_finite() || x < 0.0 {
            return Err(Error::Config(format!("variance `{name}` must be finite and ≥ 0")));
        }
    }
    if !(v.residual.is_finite() && v.residual > 0.0) {
        return Err(Error::Config("residual variance must be finite and > 0".into()));
    }

    let mut rng = seed::stream(cfg.seed, &[tag::DEMO]);
    let mut normal = |var: f64, k: usize| -> Vec<f64> {
        (0..k).map(|_| var.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let n_states = cfg.regions * cfg.states_per_region;
    let n_msas = n_states * cfg.msas_per_state;
    let region_eff = normal(v.region, cfg.regions);
    let state_eff = normal(v.state, n_states);
    let msa_eff = normal(v.msa, n_msas);
    let plan_eff = normal(v.plan, cfg.plans);
    let inter_eff = normal(v.plan_msa.unwrap_or(0.0), n_msas * cfg.plans);
    let resid = normal(v.residual, n_msas * cfg.plans * cfg.per_cell);

    let with_msa = cfg.msas_per_state > 1;
    let mut notes = Vec::new();
    if !with_msa {
        notes.push("one MSA per state: the MSA level coincides with state and is folded into it".into());
    }
    let mut obs = Vec::with_capacity(resid.len());
    let mut k = 0;
    for (r, &re) in region_eff.iter().enumerate() {
        for s in 0..cfg.states_per_region {
            let si = r * cfg.states_per_region + s;
            for m in 0..cfg.msas_per_state {
                let mi = si * cfg.msas_per_state + m;
                for p in 0..cfg.plans {
                    for _ in 0..cfg.per_cell {
                        let mut y = cfg.mu + re + state_eff[si] + msa_eff[mi] + plan_eff[p] + resid[k];
                        if v.plan_msa.is_some() {
                            y += inter_eff[mi * cfg.plans + p];
                        }
                        k += 1;
                        let mut labels = vec![
                            ("region", format!("r{r:02}")),
                            ("state", format!("r{r:02}s{s:02}")),
                            ("plan", format!("p{p:02}")),
                        ];
                        if with_msa {
                            labels.push(("msa", format!("r{r:02}s{s:02}m{m:02}")));
                        }
                        obs.push(Observation::new(y, labels));
                    }
                }
            }
        }
    }

    let mut decls = vec![FactorDecl::crossed("region"), FactorDecl::nested("state", "region")];
    let inner = if with_msa {
        decls.push(FactorDecl::nested("msa", "state"));
        "msa"
    } else {
        "state"
    };
    decls.push(FactorDecl::crossed("plan"));
    let interactions = match v.plan_msa {
        Some(_) => vec![vec![inner.to_string(), "plan".to_string()]],
        None => Vec::new(),
    };
    let dataset = Dataset::build(
        &decls,
        obs,
        &LayoutOptions {
            interactions: Some(interactions),
            ..Default::default()
        },
    )?;
    notes.extend(dataset.layout().notes().iter().cloned());

    let truth = dataset
        .layout()
        .sources()
        .iter()
        .map(|s| {
            let t = match s.name.as_str() {
                "region" => v.region,
                "state" if with_msa => v.state,
                "state" => v.state + v.msa,
                "msa" => v.msa,
                "plan" => v.plan,
                "residual" => v.residual,
                _ => v.plan_msa.unwrap_or(0.0),
            };
            (s.name.clone(), t)
        })
        .collect();
    Ok(NestedDemo { dataset, truth, notes })
}

#[derive(Debug, Clone)]
pub struct SbcConfig {
    pub design: DesignSpec,
    /// Fixed prior: SBC needs the same prior for simulation and fitting.
    pub prior: ModelPrior,
    pub replications: usize,
    /// Posterior draws kept per replication (evenly thinned); ranks lie in
    /// 0..=draws.
    pub draws: usize,
    pub bins: usize,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SbcParameter {
    pub name: String,
    pub ranks: Vec<usize>,
    pub histogram: Vec<usize>,
    pub chi2: f64,
    pub p_value: f64,
}

/// Simulation-based calibration: for each replication draw parameters from
/// the prior, simulate data, fit, and record the rank of each true value
/// among the posterior draws. Reported for μ and every σ_m².
pub fn sbc(cfg: &SbcConfig) -> Result<Vec<SbcParameter>> {
    if cfg.bins < 2 || (cfg.draws + 1) % cfg.bins != 0 {
        return Err(Error::Study("bins must be ≥ 2 and divide draws + 1".into()));
    }
    let template = cfg.design.template()?;
    let m = template.layout().n_sources();
    cfg.prior.variance.validate(m)?;
    let ranks: Vec<Vec<usize>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::stream(cfg.seed, &[tag::DATASET, r as u64]);
            let v = cfg.prior.variance.sample(m, &mut rng);
            let mu = cfg.prior.mean.mean + cfg.prior.mean.sd * rng.sample::<f64, _>(StandardNormal);
            let ds = template.with_responses(simulate_responses(&template, mu, v.sigma2(), &mut rng))?;
            let sampler = SamplerConfig {
                seed: derive_seed(cfg.seed, &[tag::FIT, r as u64]),
                ..cfg.sampler.clone()
            };
            let post = fit(&ds, &cfg.prior, &sampler)?;
            if post.len() < cfg.draws {
                return Err(Error::InsufficientDraws(format!(
                    "{} retained draws, {} needed",
                    post.len(),
                    cfg.draws
                )));
            }
            let keep: Vec<usize> = (0..cfg.draws).map(|i| i * post.len() / cfg.draws).collect();
            let mut out = vec![keep.iter().filter(|&&i| post.draws[i].mu < mu).count()];
            for k in 0..m {
                out.push(keep.iter().filter(|&&i| post.draws[i].sigma2[k] < v.sigma2()[k]).count());
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut names = vec!["mu".to_string()];
    names.extend(template.layout().source_names().into_iter().map(|s| format!("sigma2.{s}")));
    let width = (cfg.draws + 1) / cfg.bins;
    let expected = cfg.replications as f64 / cfg.bins as f64;
    let chi = ChiSquared::new((cfg.bins - 1) as f64).expect("dof > 0");
    Ok(names
        .into_iter()
        .enumerate()
        .map(|(p, name)| {
            let rk: Vec<usize> = ranks.iter().map(|r| r[p]).collect();
            let mut histogram = vec![0usize; cfg.bins];
            for &x in &rk {
                histogram[x / width] += 1;
            }
            let chi2: f64 = histogram.iter().map(|&h| (h as f64 - expected).powi(2) / expected).sum();
            SbcParameter {
                name,
                ranks: rk,
                histogram,
                chi2,
                p_value: 1.0 - chi.cdf(chi2),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anova::analyze;
    use crate::model::{MeanPrior, PriorSpec};

    fn tiny_study() -> StudyConfig {
        StudyConfig {
            design: DesignSpec::balanced_one_way(5, 3),
            grid: vec![0.0, 2.0],
            statistics: vec![Statistic::Ss, Statistic::MeanRange],
            replicates: 40,
            datasets: 6,
            sampler: SamplerConfig {
                chains: 2,
                iterations: 300,
                burn_in: 100,
                thin: 2,
                ..Default::default()
            },
            seed: 17,
            ..Default::default()
        }
    }

    #[test]
    fn provenance_hash_is_stable() {
        let a = provenance(&tiny_study(), 1);
        assert_eq!(a, provenance(&tiny_study(), 1));
        assert_eq!(a.config_hash.len(), 64);
        let other = StudyConfig { seed: 18, ..tiny_study() };
        assert_ne!(a.config_hash, provenance(&other, 1).config_hash);
    }

    #[test]
    fn critical_value_allows_ties() {
        let p = [0.01, 0.01, 0.02, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
        assert_eq!(size_adjusted_critical(&p, 0.2), 0.01);
        assert_eq!(size_adjusted_critical(&p, 0.15), 0.0);
        assert_eq!(size_adjusted_critical(&p, 0.3), 0.02);
    }

    #[test]
    fn ecdf_merges_ties() {
        assert_eq!(ecdf(&[0.5, 0.1, 0.5, 1.0]), vec![(0.1, 0.25), (0.5, 0.75), (1.0, 1.0)]);
    }

    #[test]
    fn calibration_single_dataset() {
        let cfg = StudyConfig { datasets: 1, ..tiny_study() };
        let r = calibration_study(&cfg).unwrap();
        assert!(!r.se_usable);
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.statistics[0].p_values.len(), 1);
    }

    #[test]
    fn calibration_is_reproducible_and_needs_zero() {
        let a = calibration_study(&tiny_study()).unwrap();
        let b = calibration_study(&tiny_study()).unwrap();
        assert_eq!(a, b);
        let bad = StudyConfig { grid: vec![1.0, 2.0], ..tiny_study() };
        assert!(matches!(calibration_study(&bad), Err(Error::Study(_))));
    }

    #[test]
    fn power_preconditions() {
        let one = StudyConfig { grid: vec![0.0], ..tiny_study() };
        assert!(matches!(power_study(&one), Err(Error::Study(_))));
        let single_stat = StudyConfig { statistics: vec![Statistic::Ss], ..tiny_study() };
        assert!(matches!(power_study(&single_stat), Err(Error::Study(_))));
    }

    #[test]
    fn power_table_is_consistent() {
        let t = power_study(&tiny_study()).unwrap();
        assert_eq!(t.cells.len(), 4);
        for c in &t.cells {
            assert!((0.0..=1.0).contains(&c.rate));
            assert!((c.se - rate_se(c.rate, c.count)).abs() < 1e-15);
            assert!(c.adjusted_rate.unwrap() <= 1.0);
        }
        for (j, s) in t.statistics.iter().enumerate() {
            let null = t.cell(0.0, *s).unwrap();
            assert!(null.adjusted_rate.unwrap() <= t.alpha + 1e-12);
            assert!(t.critical[j].is_some());
        }
        assert_eq!(t.rankings.len(), 2);
    }

    #[test]
    fn sweep_flag_and_single_delta() {
        let ds = Dataset::one_way(&[vec![0.3, 0.1, 0.2], vec![1.5, 1.2, 1.9], vec![-0.4, 0.0, -0.2]]).unwrap();
        let s = SamplerConfig {
            chains: 2,
            iterations: 400,
            burn_in: 200,
            ..Default::default()
        };
        let one = sensitivity_sweep(&ds, &[1.0], &PriorConfig::default(), &s).unwrap();
        assert_eq!(one.sensitive, None);
        assert_eq!(one.points.len(), 1);
        assert!(sensitivity_sweep(&ds, &[0.0], &PriorConfig::default(), &s).is_err());
    }

    #[test]
    fn demo_layout_and_truth() {
        let cfg = NestedDemoConfig {
            variances: DemoVariances {
                plan_msa: Some(0.3),
                ..Default::default()
            },
            ..Default::default()
        };
        let d = generate_nested_demo(&cfg).unwrap();
        assert_eq!(
            d.dataset.layout().source_names(),
            ["region", "state", "msa", "plan", "msa:plan", "residual"]
        );
        assert_eq!(d.dataset.n(), 4 * 3 * 2 * 4 * 3);
        assert_eq!(d.truth[4], ("msa:plan".to_string(), 0.3));
        assert_eq!(d, generate_nested_demo(&cfg).unwrap());
        let folded = generate_nested_demo(&NestedDemoConfig { msas_per_state: 1, ..Default::default() }).unwrap();
        assert_eq!(folded.dataset.layout().source_names(), ["region", "state", "plan", "residual"]);
        assert!(generate_nested_demo(&NestedDemoConfig { plans: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn demo_without_structure_has_unit_f_ratios() {
        let cfg = NestedDemoConfig {
            regions: 6,
            states_per_region: 4,
            msas_per_state: 3,
            plans: 5,
            per_cell: 4,
            variances: DemoVariances {
                region: 0.0,
                state: 0.0,
                msa: 0.0,
                plan: 0.0,
                plan_msa: None,
                residual: 1.0,
            },
            seed: 2,
            ..Default::default()
        };
        let d = generate_nested_demo(&cfg).unwrap();
        let t = analyze(&d.dataset).unwrap();
        let ms_e = t.rows.last().unwrap().ms;
        for row in &t.rows[..t.rows.len() - 1] {
            let f = row.ms / ms_e;
            // F(df, large) has SD ≈ sqrt(2/df)
            assert!((f - 1.0).abs() < 4.0 * (2.0 / row.df as f64).sqrt() + 0.05, "{}: {f}", row.name);
        }
    }

    #[test]
    fn sbc_runs_and_checks_bins() {
        let cfg = SbcConfig {
            design: DesignSpec::balanced_one_way(4, 3),
            prior: ModelPrior {
                variance: PriorSpec::dirichlet_relative(Concentration::Shared(1.0), 4.0).unwrap(),
                mean: MeanPrior::new(0.0, 1.0).unwrap(),
            },
            replications: 10,
            draws: 19,
            bins: 4,
            sampler: SamplerConfig {
                chains: 1,
                iterations: 300,
                burn_in: 100,
                thin: 10,
                ..Default::default()
            },
            seed: 1,
        };
        let r = sbc(&cfg).unwrap();
        assert_eq!(r.len(), 3);
        assert!(r.iter().all(|p| p.ranks.len() == 10 && p.ranks.iter().all(|&x| x <= 19)));
        assert!(sbc(&SbcConfig { bins: 3, ..cfg }).is_err());
    }
}
