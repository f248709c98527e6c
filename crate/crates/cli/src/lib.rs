//! The `varcomp` command line: configuration, dispatch and report files.

pub mod ingest;
pub mod report;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use varcomp::lab::{self, DesignSpec, NestedDemoConfig, StudyConfig};
use varcomp::model::submodel_posterior;
use varcomp::sampler::{self, finite_pop_summaries, sign_probability, Functional};
use varcomp::seed::derive_seed;
use varcomp::{
    analyze, Dataset, IntegrationConfig, LayoutOptions, PpcConfig, Relation, PriorConfig, SamplerConfig, Scheme, Statistic,
};

use crate::ingest::{ingest_csv, write_dataset_csv, FactorSpec, DEFAULT_RESPONSE};

pub const REPORT_FILE: &str = "report.json";

/// Seed-derivation keys, one per subcommand.
mod key {
    pub const ANOVA: u64 = 0x101;
    pub const FIT: u64 = 0x102;
    pub const PPC: u64 = 0x103;
    pub const MIX: u64 = 0x104;
    pub const CALIBRATE: u64 = 0x105;
    pub const POWER: u64 = 0x106;
    pub const SWEEP: u64 = 0x107;
    pub const DEMO: u64 = 0x108;
}

#[derive(Debug, Parser)]
#[command(name = "varcomp", version, about = "Variance-components analysis, Bayesian fits and posterior-predictive tests")]
pub struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the config's.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (speed only).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Default)]
pub struct DataArgs {
    /// Long-format CSV input; overrides `data.path`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Response column; overrides `data.response`.
    #[arg(long)]
    pub response: Option<String>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Classical ANOVA table, expected mean squares and moment estimates.
    Anova(DataArgs),
    /// Posterior draws under the configured prior.
    Fit(DataArgs),
    /// Posterior-predictive test that one variance component is zero.
    Ppc {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        source: Option<String>,
        /// Test statistic; repeat or comma-separate for several.
        #[arg(long = "stat", value_delimiter = ',')]
        stats: Vec<Statistic>,
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<Scheme>,
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Posterior probabilities of submodels under a point-mass prior.
    Mix(DataArgs),
    /// Null calibration study of the posterior-predictive test.
    Calibrate,
    /// Power of several test statistics over a grid of true SDs.
    Power,
    /// Prior sensitivity across Dirichlet concentrations.
    Sweep(DataArgs),
    /// Synthetic nested survey dataset.
    Demo,
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    match s {
        "marginal" => Ok(Scheme::Marginal),
        "conditional" => Ok(Scheme::Conditional),
        _ => Err(format!("unknown scheme `{s}` (expected marginal or conditional)")),
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Anova(_) => "anova",
            Command::Fit(_) => "fit",
            Command::Ppc { .. } => "ppc",
            Command::Mix(_) => "mix",
            Command::Calibrate => "calibrate",
            Command::Power => "power",
            Command::Sweep(_) => "sweep",
            Command::Demo => "demo",
        }
    }

    fn key(&self) -> u64 {
        match self {
            Command::Anova(_) => key::ANOVA,
            Command::Fit(_) => key::FIT,
            Command::Ppc { .. } => key::PPC,
            Command::Mix(_) => key::MIX,
            Command::Calibrate => key::CALIBRATE,
            Command::Power => key::POWER,
            Command::Sweep(_) => key::SWEEP,
            Command::Demo => key::DEMO,
        }
    }

    fn data_args(&self) -> Option<&DataArgs> {
        match self {
            Command::Anova(d) | Command::Fit(d) | Command::Mix(d) | Command::Sweep(d) => Some(d),
            Command::Ppc { data, .. } => Some(data),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub response: String,
    /// Factor columns in declaration order; empty means every non-response
    /// column, with nesting inferred from the labels.
    pub factors: Vec<FactorSpec>,
    pub layout: LayoutOptions,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            response: DEFAULT_RESPONSE.into(),
            factors: Vec::new(),
            layout: LayoutOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    /// Functionals whose posterior sign probability is reported.
    pub signs: Vec<Functional>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpcSettings {
    pub source: Option<String>,
    pub statistics: Vec<Statistic>,
    pub scheme: Scheme,
    pub replicates: usize,
    /// Also write `replicates.csv`.
    pub write_replicates: bool,
}

impl Default for PpcSettings {
    fn default() -> Self {
        Self {
            source: None,
            statistics: vec![Statistic::Ss],
            scheme: Scheme::Marginal,
            replicates: PpcConfig::default().replicates,
            write_replicates: true,
        }
    }
}

/// Overrides applied to `study` for the power subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerSettings {
    pub designs: Vec<DesignSpec>,
    pub grid: Vec<f64>,
    pub statistics: Vec<Statistic>,
}

impl Default for PowerSettings {
    fn default() -> Self {
        Self {
            designs: vec![
                DesignSpec::balanced_one_way(10, 5),
                DesignSpec::OneWay {
                    group_sizes: vec![2, 3, 3, 4, 5, 5, 6, 7, 7, 8],
                },
            ],
            grid: vec![0.0, 0.5, 1.0, 2.0],
            statistics: Statistic::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub deltas: Vec<f64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            deltas: vec![0.1, 0.5, 1.0, 4.0, 16.0],
        }
    }
}

/// Everything a run needs; every section has defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub prior: PriorConfig,
    pub sampler: SamplerConfig,
    pub fit: FitSettings,
    pub ppc: PpcSettings,
    pub mix: IntegrationConfig,
    pub study: StudyConfig,
    pub power: PowerSettings,
    pub sweep: SweepSettings,
    pub demo: NestedDemoConfig,
}

impl RunConfig {
    /// Replace every component seed by one derived from the root seed and
    /// the subcommand.
    fn derive_seeds(&mut self, cmd: u64) {
        let root = self.seed;
        let s = |i: u64| derive_seed(root, &[cmd, i]);
        self.sampler.seed = s(0);
        self.mix.seed = s(1);
        self.study.seed = s(2);
        self.study.sampler.seed = s(3);
        self.demo.seed = s(4);
    }
}

/// Failure reported as `{"error": {"kind", "message"}}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub kind: String,
    pub message: String,
}

impl Failure {
    fn new(kind: &str, message: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> String {
        json!({ "error": { "kind": self.kind, "message": self.message } }).to_string()
    }
}

impl From<varcomp::Error> for Failure {
    fn from(e: varcomp::Error) -> Self {
        Failure::new(e.kind(), e.to_string())
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

type CliResult<T> = Result<T, Failure>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::new("io", format!("{}: {e}", path.display()))
}

pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::new("config", format!("{}: {e}", path.display())))
}

/// Files written by one run, keyed by file name.
#[derive(Debug, Default)]
pub struct Outputs {
    pub report: Value,
    pub stdout: String,
    pub files: BTreeMap<String, String>,
}

struct Csv(csv::Writer<Vec<u8>>);

impl Csv {
    fn new<S: AsRef<str>>(header: &[S]) -> Self {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header.iter().map(AsRef::as_ref)).expect("in-memory write");
        Csv(w)
    }

    fn row<S: AsRef<str>>(&mut self, rec: &[S]) {
        self.0.write_record(rec.iter().map(AsRef::as_ref)).expect("in-memory write");
    }

    fn finish(self) -> String {
        String::from_utf8(self.0.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Load the input and record the factor declarations actually used.
fn load_dataset(cfg: &mut RunConfig) -> CliResult<Dataset> {
    let path = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| Failure::new("config", "no input data: pass --data or set data.path"))?;
    if !path.exists() {
        return Err(Failure::new("config", format!("input file {} does not exist", path.display())));
    }
    let ds = ingest_csv(path, &cfg.data.response, &cfg.data.factors, &cfg.data.layout)?;
    cfg.data.factors = factor_specs(&ds);
    Ok(ds)
}

fn factor_specs(ds: &Dataset) -> Vec<FactorSpec> {
    ds.layout()
        .declarations()
        .into_iter()
        .map(|d| FactorSpec {
            name: d.name,
            nested_in: match d.relation {
                Relation::Crossed => None,
                Relation::NestedIn(p) => Some(p),
            },
        })
        .collect()
}

/// Run a parsed command against a configuration and return report contents
/// without touching the filesystem.
pub fn execute(command: &Command, mut cfg: RunConfig) -> CliResult<Outputs> {
    if let Some(d) = command.data_args() {
        if let Some(p) = &d.data {
            cfg.data.path = Some(p.clone());
        }
        if let Some(r) = &d.response {
            cfg.data.response = r.clone();
        }
    }
    if let Command::Ppc {
        source,
        stats,
        scheme,
        replicates,
        ..
    } = command
    {
        if source.is_some() {
            cfg.ppc.source = source.clone();
        }
        if !stats.is_empty() {
            cfg.ppc.statistics = stats.clone();
        }
        if let Some(s) = scheme {
            cfg.ppc.scheme = *s;
        }
        if let Some(r) = replicates {
            cfg.ppc.replicates = *r;
        }
    }
    cfg.derive_seeds(command.key());

    let mut out = Outputs::default();
    let result = match command {
        Command::Anova(_) => {
            let ds = load_dataset(&mut cfg)?;
            let table = analyze(&ds)?;
            out.stdout = table.to_string();
            let named = |v: &[f64]| -> BTreeMap<String, f64> { table.names().into_iter().zip(v.iter().copied()).collect() };
            json!({
                "sources": table.rows,
                "ems": table.ems,
                "mom": table.mom.as_ref().map(|m| json!({ "raw": named(&m.raw), "truncated": named(&m.truncated) })),
                "total_ss": table.total_ss,
                "balanced": table.balanced,
                "heuristic": table.heuristic,
                "notes": ds.layout().notes(),
            })
        }
        Command::Fit(_) => {
            let ds = load_dataset(&mut cfg)?;
            let prior = cfg.prior.resolve(&ds)?;
            cfg.prior = cfg.prior.resolved_config(&ds)?;
            let draws = sampler::fit(&ds, &prior, &cfg.sampler)?;
            let (header, rows) = draws.table();
            let mut csv = Csv::new(&header);
            for r in &rows {
                csv.row(&r.iter().map(|&v| num(v)).collect::<Vec<_>>());
            }
            out.files.insert("draws.csv".into(), csv.finish());
            let mut warnings = draws.warnings.clone();
            let diagnostics = match draws.diagnostics() {
                Ok(d) => Some(d),
                Err(e) => {
                    warnings.push(e.to_string());
                    None
                }
            };
            let fp = finite_pop_summaries(&draws);
            warnings.extend(fp.warnings.iter().cloned());
            let comparison: Vec<Value> = fp
                .sources
                .iter()
                .enumerate()
                .map(|(j, name)| {
                    let k = draws.sources.iter().position(|s| s == name).expect("source listed");
                    let n = draws.len() as f64;
                    let s_mean = fp.values.iter().map(|v| v[j]).sum::<f64>() / n;
                    let sigma_mean = draws.draws.iter().map(|d| d.sigma2[k].sqrt()).sum::<f64>() / n;
                    json!({ "source": name, "finite_sd_mean": s_mean, "sigma_mean": sigma_mean, "ratio": s_mean / sigma_mean })
                })
                .collect();
            let signs = cfg
                .fit
                .signs
                .iter()
                .map(|f| Ok(json!({ "functional": f, "positive_probability": sign_probability(&draws, f)? })))
                .collect::<CliResult<Vec<Value>>>()?;
            json!({
                "sources": draws.sources,
                "n_effects": draws.n_effects,
                "draws": draws.len(),
                "summaries": draws.summaries(),
                "diagnostics": diagnostics,
                "chain_info": draws.chain_info,
                "finite_vs_superpopulation": comparison,
                "signs": signs,
                "warnings": warnings,
            })
        }
        Command::Ppc { .. } => {
            let ds = load_dataset(&mut cfg)?;
            let source = match &cfg.ppc.source {
                Some(s) => s.clone(),
                None => {
                    let names = ds.layout().source_names();
                    if names.len() == 2 {
                        names[0].clone()
                    } else {
                        return Err(Failure::new("config", "choose the tested component with --source"));
                    }
                }
            };
            cfg.ppc.source = Some(source.clone());
            let prior = cfg.prior.resolve(&ds)?;
            cfg.prior = cfg.prior.resolved_config(&ds)?;
            let pcfg = PpcConfig {
                scheme: cfg.ppc.scheme,
                replicates: cfg.ppc.replicates,
                seed: derive_seed(cfg.seed, &[key::PPC, 5]),
            };
            let reports = varcomp::ppc::ppc(&ds, &prior, &source, &cfg.ppc.statistics, &cfg.sampler, &pcfg)?;
            if cfg.ppc.write_replicates {
                let mut header = vec!["replicate".to_string()];
                header.extend(reports.iter().map(|r| r.statistic.name().to_string()));
                let mut csv = Csv::new(&header);
                for i in 0..cfg.ppc.replicates {
                    let mut rec = vec![i.to_string()];
                    rec.extend(reports.iter().map(|r| num(r.replicates[i])));
                    csv.row(&rec);
                }
                out.files.insert("replicates.csv".into(), csv.finish());
            }
            json!({ "reports": reports })
        }
        Command::Mix(_) => {
            let ds = load_dataset(&mut cfg)?;
            cfg.prior.kind = varcomp::model::PriorKind::ModelMixing;
            let prior = cfg.prior.resolve(&ds)?;
            cfg.prior = cfg.prior.resolved_config(&ds)?;
            let post = submodel_posterior(&ds, &prior, &cfg.mix)?;
            serde_json::to_value(post).expect("serializable")
        }
        Command::Calibrate => {
            let rep = lab::calibration_study(&cfg.study)?;
            let mut header = vec!["dataset".to_string()];
            header.extend(rep.statistics.iter().map(|s| s.statistic.name().to_string()));
            let mut csv = Csv::new(&header);
            for i in 0..rep.datasets {
                let mut rec = vec![i.to_string()];
                rec.extend(rep.statistics.iter().map(|s| num(s.p_values[i])));
                csv.row(&rec);
            }
            out.files.insert("pvalues.csv".into(), csv.finish());
            serde_json::to_value(rep).expect("serializable")
        }
        Command::Power => {
            let mut csv = Csv::new(&[
                "design", "balanced", "sigma", "statistic", "count", "rate", "se", "adjusted_rate", "adjusted_se",
            ]);
            let mut tables = Vec::new();
            for (d, design) in cfg.power.designs.iter().enumerate() {
                let study = StudyConfig {
                    design: design.clone(),
                    grid: cfg.power.grid.clone(),
                    statistics: cfg.power.statistics.clone(),
                    seed: derive_seed(cfg.study.seed, &[d as u64]),
                    ..cfg.study.clone()
                };
                let t = lab::power_study(&study)?;
                for c in &t.cells {
                    csv.row(&[
                        d.to_string(),
                        t.balanced.to_string(),
                        num(c.sigma),
                        c.statistic.name().to_string(),
                        c.count.to_string(),
                        num(c.rate),
                        num(c.se),
                        opt(c.adjusted_rate),
                        opt(c.adjusted_se),
                    ]);
                }
                tables.push(json!({ "design": design, "table": t }));
            }
            out.files.insert("power.csv".into(), csv.finish());
            json!({ "criterion": lab::SIZE_ADJUSTED_CRITERION, "tables": tables })
        }
        Command::Sweep(_) => {
            let ds = load_dataset(&mut cfg)?;
            let rep = lab::sensitivity_sweep(&ds, &cfg.sweep.deltas, &cfg.prior, &cfg.sampler)?;
            let mut csv = Csv::new(&["delta", "parameter", "mean", "sd", "q025", "q50", "q975"]);
            for p in &rep.points {
                for s in &p.summaries {
                    csv.row(&[num(p.delta), s.name.clone(), num(s.mean), num(s.sd), num(s.q025), num(s.q50), num(s.q975)]);
                }
            }
            out.files.insert("sweep.csv".into(), csv.finish());
            serde_json::to_value(rep).expect("serializable")
        }
        Command::Demo => {
            let demo = lab::generate_nested_demo(&cfg.demo)?;
            let mut buf = Vec::new();
            write_dataset_csv(&demo.dataset, DEFAULT_RESPONSE, &mut buf)?;
            out.files.insert("demo.csv".into(), String::from_utf8(buf).expect("CSV is UTF-8"));
            let truth: BTreeMap<&str, f64> = demo.truth.iter().map(|(n, v)| (n.as_str(), *v)).collect();
            let data = DataConfig {
                path: None,
                response: DEFAULT_RESPONSE.into(),
                factors: factor_specs(&demo.dataset),
                layout: LayoutOptions {
                    interactions: Some(
                        demo.dataset
                            .layout()
                            .source_names()
                            .iter()
                            .filter(|n| n.contains(':'))
                            .map(|n| n.split(':').map(str::to_string).collect())
                            .collect(),
                    ),
                    ..LayoutOptions::default()
                },
            };
            json!({
                "observations": demo.dataset.n(),
                "sources": demo.dataset.layout().source_names(),
                "truth": truth,
                "data": data,
                "notes": demo.notes,
                "balance": demo.dataset.balance(),
                "provenance": lab::provenance(&cfg.demo, cfg.seed),
            })
        }
    };
    out.report = json!({
        "command": command.name(),
        "seed": cfg.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "result": result,
    });
    Ok(out)
}

fn write_outputs(dir: &Path, out: &Outputs) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let report = report::to_canonical(&out.report).map_err(|e| Failure::new("io", e.to_string()))?;
    let mut files = vec![(REPORT_FILE.to_string(), report)];
    files.extend(out.files.iter().map(|(k, v)| (k.clone(), v.clone())));
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

fn run_cli(cli: Cli) -> CliResult<Outputs> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::new("config", "--threads must be ≥ 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Failure::new("config", e.to_string()))?;
    let out = pool.install(|| execute(&cli.command, cfg))?;
    write_outputs(&cli.out, &out)?;
    Ok(out)
}

/// Parse arguments, run, and return the process exit code: 0 on success, 1
/// on failure (error JSON on stderr), 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run_cli(cli) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(out.stdout.as_bytes());
            0
        }
        Err(f) => {
            eprintln!("{}", f.to_json());
            1
        }
    }
}
