//! Classical ANOVA decomposition and method-of-moments estimates.
//!
//! Supported designs are balanced layouts (crossed and/or nested) and one-way
//! layouts with arbitrary group sizes. Sums of squares come from a sweep over
//! cell means: the effect of a source is its cell mean about the grand mean
//! minus the effects of every source whose defining factors it contains.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::design::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnovaRow {
    pub name: String,
    pub df: usize,
    pub ss: f64,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomEstimates {
    /// C⁻¹ · MS; may be negative.
    pub raw: Vec<f64>,
    /// max(raw, 0) componentwise.
    pub truncated: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnovaTable {
    pub rows: Vec<AnovaRow>,
    /// `ems[m][k]` is the coefficient of σ_k² in E(MS_m). Empty until filled.
    pub ems: Vec<Vec<f64>>,
    pub mom: Option<MomEstimates>,
    pub total_ss: f64,
    pub balanced: bool,
    /// Set for unbalanced designs, where the moment estimates are heuristic.
    pub heuristic: bool,
}

impl AnovaTable {
    pub fn row(&self, name: &str) -> Option<&AnovaRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn ms(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.ms).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.name.clone()).collect()
    }
}

impl fmt::Display for AnovaTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(6).max(6);
        writeln!(f, "{:<width$}  {:>6}  {:>14}  {:>14}", "source", "df", "SS", "MS")?;
        for r in &self.rows {
            writeln!(f, "{:<width$}  {:>6}  {:>14.6}  {:>14.6}", r.name, r.df, r.ss, r.ms)?;
        }
        let df_total: usize = self.rows.iter().map(|r| r.df).sum();
        writeln!(f, "{:<width$}  {:>6}  {:>14.6}", "total", df_total, self.total_ss)?;
        if let Some(mom) = &self.mom {
            writeln!(f)?;
            writeln!(f, "{:<width$}  {:>14}  {:>14}", "component", "raw", "truncated")?;
            for (r, (raw, tr)) in self.rows.iter().zip(mom.raw.iter().zip(&mom.truncated)) {
                writeln!(f, "{:<width$}  {:>14.6}  {:>14.6}", r.name, raw, tr)?;
            }
            if self.heuristic {
                writeln!(f, "(unbalanced design: moment estimates are heuristic)")?;
            }
        }
        Ok(())
    }
}

enum Support {
    OneWay { balanced: bool },
    Balanced,
}

fn support(ds: &Dataset) -> Result<Support> {
    let balanced = ds.is_balanced();
    let layout = ds.layout();
    if layout.n_effect_sources() == 1 {
        return Ok(Support::OneWay { balanced });
    }
    if !balanced {
        return Err(Error::UnsupportedDesign(
            "unbalanced data are supported only for one-way layouts (a single non-residual source)".into(),
        ));
    }
    let defs: Vec<BTreeSet<usize>> = layout.sources()[..layout.n_effect_sources()]
        .iter()
        .map(|s| s.defining.iter().copied().collect())
        .collect();
    for (i, a) in defs.iter().enumerate() {
        for b in &defs[i + 1..] {
            let meet: BTreeSet<usize> = a.intersection(b).copied().collect();
            if !meet.is_empty() && !defs.contains(&meet) {
                return Err(Error::UnsupportedDesign(format!(
                    "source set is not closed under marginality: no source is defined by factors {:?}",
                    meet.iter().map(|&f| layout.factors()[f].as_str()).collect::<Vec<_>>()
                )));
            }
        }
    }
    Ok(Support::Balanced)
}

fn strictly_contains(outer: &[usize], inner: &[usize]) -> bool {
    inner.len() < outer.len() && inner.iter().all(|f| outer.contains(f))
}

/// Degrees of freedom, sums of squares and mean squares per source.
pub fn sums_of_squares(ds: &Dataset) -> Result<AnovaTable> {
    let support = support(ds)?;
    let layout = ds.layout();
    let y = ds.responses();
    let n = y.len();
    let grand = ds.mean();
    let centered: Vec<f64> = y.iter().map(|v| v - grand).collect();
    let total_ss: f64 = centered.iter().map(|v| v * v).sum();

    let n_eff = layout.n_effect_sources();
    let sources = &layout.sources()[..n_eff];
    let mut order: Vec<usize> = (0..n_eff).collect();
    order.sort_by_key(|&m| sources[m].defining.len());

    let mut effects: Vec<Vec<f64>> = vec![Vec::new(); n_eff];
    let mut dfs = vec![0usize; n_eff];
    for &m in &order {
        let mem = ds.membership(m)?;
        let mut sums = vec![0.0; mem.n_effects];
        for (i, &e) in mem.effect_of.iter().enumerate() {
            sums[e] += centered[i];
        }
        let means: Vec<f64> = sums.iter().zip(&mem.counts).map(|(s, &c)| s / c as f64).collect();
        let mut eff: Vec<f64> = mem.effect_of.iter().map(|&e| means[e]).collect();
        let mut lower_df = 0usize;
        for &t in &order {
            if t != m && strictly_contains(&sources[m].defining, &sources[t].defining) {
                for (v, lower) in eff.iter_mut().zip(&effects[t]) {
                    *v -= lower;
                }
                lower_df += dfs[t];
            }
        }
        let df = (mem.n_effects - 1).checked_sub(lower_df).filter(|&d| d > 0).ok_or_else(|| {
            Error::UnsupportedDesign(format!("source `{}` has no degrees of freedom", sources[m].name))
        })?;
        dfs[m] = df;
        effects[m] = eff;
    }

    let mut residual = centered.clone();
    for eff in &effects {
        for (r, e) in residual.iter_mut().zip(eff) {
            *r -= e;
        }
    }
    let used: usize = dfs.iter().sum();
    let df_res = (n - 1)
        .checked_sub(used)
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::UnsupportedDesign("no residual degrees of freedom".into()))?;

    let mut rows: Vec<AnovaRow> = (0..n_eff)
        .map(|m| {
            let ss: f64 = effects[m].iter().map(|v| v * v).sum();
            AnovaRow {
                name: sources[m].name.clone(),
                df: dfs[m],
                ss,
                ms: ss / dfs[m] as f64,
            }
        })
        .collect();
    let ss_res: f64 = residual.iter().map(|v| v * v).sum();
    rows.push(AnovaRow {
        name: layout.sources()[n_eff].name.clone(),
        df: df_res,
        ss: ss_res,
        ms: ss_res / df_res as f64,
    });

    let (balanced, heuristic) = match support {
        Support::OneWay { balanced } => (balanced, !balanced),
        Support::Balanced => (true, false),
    };
    Ok(AnovaTable {
        rows,
        ems: Vec::new(),
        mom: None,
        total_ss,
        balanced,
        heuristic,
    })
}

/// Expected-mean-square coefficients under the all-random additive model.
///
/// Balanced designs use the standard rule: σ_k² enters E(MS_m) with
/// coefficient N / L_k (replicates per level combination of source k) when
/// source k's defining factors contain those of m. Unbalanced one-way
/// layouts use n₀ = (N − Σ n_j² / N) / (J − 1).
pub fn expected_mean_squares(ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    let support = support(ds)?;
    let layout = ds.layout();
    let m_total = layout.n_sources();
    let n_eff = layout.n_effect_sources();
    let n = ds.n() as f64;
    let mut c = vec![vec![0.0; m_total]; m_total];
    for row in c.iter_mut() {
        row[m_total - 1] = 1.0;
    }
    match support {
        Support::OneWay { balanced: false } => {
            let counts = &ds.membership(0)?.counts;
            let j = counts.len() as f64;
            let sum_sq: f64 = counts.iter().map(|&c| (c * c) as f64).sum();
            c[0][0] = (n - sum_sq / n) / (j - 1.0);
        }
        _ => {
            let sources = layout.sources();
            for m in 0..n_eff {
                for k in 0..n_eff {
                    let contains = sources[m].defining.iter().all(|f| sources[k].defining.contains(f));
                    if contains {
                        c[m][k] = n / ds.membership(k)?.n_effects as f64;
                    }
                }
            }
        }
    }
    Ok(c)
}

/// Solve MS = C σ² for σ²; reports both the raw and the truncated solution.
pub fn mom_estimates(table: &AnovaTable) -> Result<MomEstimates> {
    let m = table.rows.len();
    if table.ems.len() != m || table.ems.iter().any(|r| r.len() != m) {
        return Err(Error::Singular("EMS matrix is missing or has the wrong shape".into()));
    }
    let c = DMatrix::from_fn(m, m, |i, j| table.ems[i][j]);
    let ms = DVector::from_vec(table.ms());
    let raw = c
        .lu()
        .solve(&ms)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular("EMS matrix is not invertible".into()))?;
    let raw: Vec<f64> = raw.iter().copied().collect();
    let truncated = raw.iter().map(|&v| v.max(0.0)).collect();
    Ok(MomEstimates { raw, truncated })
}

/// Full table: sums of squares, EMS matrix and moment estimates.
pub fn analyze(ds: &Dataset) -> Result<AnovaTable> {
    let mut table = sums_of_squares(ds)?;
    table.ems = expected_mean_squares(ds)?;
    table.mom = Some(mom_estimates(&table)?);
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{FactorDecl, LayoutOptions, Observation};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn zero_error_one_way() {
        let ds = Dataset::one_way(&[vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap();
        let t = analyze(&ds).unwrap();
        assert!(close(t.rows[0].ss, 4.0));
        assert!(close(t.rows[1].ss, 0.0));
        assert_eq!((t.rows[0].df, t.rows[1].df), (1, 2));
        let mom = t.mom.unwrap();
        assert!(close(mom.raw[0], 2.0));
        assert!(close(mom.raw[1], 0.0));
    }

    #[test]
    fn worked_one_way() {
        let ds = Dataset::one_way(&[vec![0.0, 2.0], vec![1.0, 3.0]]).unwrap();
        let t = analyze(&ds).unwrap();
        // ȳ = 1.5; group means 1, 2
        let ss_a = 2.0 * (1.0f64 - 1.5).powi(2) + 2.0 * (2.0f64 - 1.5).powi(2);
        let ss_e = (0.0f64 - 1.0).powi(2) + (2.0f64 - 1.0).powi(2) + (1.0f64 - 2.0).powi(2) + (3.0f64 - 2.0).powi(2);
        assert!(close(t.rows[0].ss, ss_a) && close(ss_a, 1.0));
        assert!(close(t.rows[1].ss, ss_e) && close(ss_e, 4.0));
        assert!(close(t.rows[0].ms, 1.0));
        assert!(close(t.rows[1].ms, 2.0));
        assert_eq!(t.ems, vec![vec![2.0, 1.0], vec![0.0, 1.0]]);
        let mom = t.mom.unwrap();
        assert!(close(mom.raw[0], -0.5));
        assert_eq!(mom.truncated[0], 0.0);
        assert!(close(mom.raw[1], 2.0));
    }

    #[test]
    fn constant_data() {
        let ds = Dataset::one_way(&[vec![5.0, 5.0], vec![5.0, 5.0]]).unwrap();
        let t = sums_of_squares(&ds).unwrap();
        assert!(t.rows.iter().all(|r| r.ss == 0.0));
    }

    fn crossed(a: usize, b: usize, n: usize, f: impl Fn(usize, usize, usize) -> f64) -> Dataset {
        let mut o = Vec::new();
        for i in 0..a {
            for j in 0..b {
                for k in 0..n {
                    o.push(Observation::new(
                        f(i, j, k),
                        [("A", format!("a{i}")), ("B", format!("b{j}"))],
                    ));
                }
            }
        }
        Dataset::build(
            &[FactorDecl::crossed("A"), FactorDecl::crossed("B")],
            o,
            &LayoutOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn two_by_two_ems_rule() {
        let ds = crossed(2, 2, 2, |i, j, k| (i + 2 * j + 3 * k) as f64);
        let c = expected_mean_squares(&ds).unwrap();
        assert_eq!(c[0], vec![4.0, 0.0, 2.0, 1.0]);
        assert_eq!(c[1], vec![0.0, 4.0, 2.0, 1.0]);
        assert_eq!(c[2], vec![0.0, 0.0, 2.0, 1.0]);
        assert_eq!(c[3], vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn residual_row_is_unit() {
        let ds = Dataset::one_way(&[vec![0.0, 1.0, 2.0], vec![1.0, 3.0]]).unwrap();
        let c = expected_mean_squares(&ds).unwrap();
        assert_eq!(c[1], vec![0.0, 1.0]);
        let n0 = (5.0 - (9.0 + 4.0) / 5.0) / 1.0;
        assert!(close(c[0][0], n0));
        assert!(analyze(&ds).unwrap().heuristic);
    }

    #[test]
    fn mom_identity_round_trip() {
        let ds = Dataset::one_way(&[vec![0.0, 2.0], vec![1.0, 3.0]]).unwrap();
        let mut t = analyze(&ds).unwrap();
        for (m, row) in t.rows.iter_mut().enumerate() {
            row.ms = t.ems[m].iter().sum(); // C · (1, 1)
        }
        let mom = mom_estimates(&t).unwrap();
        assert_eq!(mom.raw, vec![1.0, 1.0]);
    }

    #[test]
    fn unbalanced_two_way_is_unsupported() {
        let ds = crossed(2, 2, 2, |i, j, k| (i + j + k) as f64);
        let mut obs = ds.observations().to_vec();
        obs.pop();
        let ds = Dataset::build(
            &[FactorDecl::crossed("A"), FactorDecl::crossed("B")],
            obs,
            &LayoutOptions::default(),
        )
        .unwrap();
        let err = sums_of_squares(&ds).unwrap_err();
        assert!(matches!(err, Error::UnsupportedDesign(ref m) if m.contains("one-way")));
        assert!(expected_mean_squares(&ds).is_err());
    }

    #[test]
    fn singular_ems_is_reported() {
        let ds = Dataset::one_way(&[vec![0.0, 2.0], vec![1.0, 3.0]]).unwrap();
        let mut t = sums_of_squares(&ds).unwrap();
        t.ems = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        assert!(matches!(mom_estimates(&t), Err(Error::Singular(_))));
    }

    #[test]
    fn nested_decomposition_sums_to_total() {
        let mut o = Vec::new();
        for r in 0..3 {
            for s in 0..2 {
                for k in 0..3 {
                    let y = ((r * 13 + s * 7 + k * 5) % 11) as f64 * 0.37;
                    o.push(Observation::new(y, [("region", format!("r{r}")), ("state", format!("s{s}"))]));
                }
            }
        }
        let ds = Dataset::build(
            &[FactorDecl::crossed("region"), FactorDecl::nested("state", "region")],
            o,
            &LayoutOptions::default(),
        )
        .unwrap();
        let t = analyze(&ds).unwrap();
        assert_eq!(t.rows.iter().map(|r| r.df).collect::<Vec<_>>(), vec![2, 3, 12]);
        let sum: f64 = t.rows.iter().map(|r| r.ss).sum();
        assert!((sum - t.total_ss).abs() <= 1e-9 * t.total_ss);
        // nested EMS: region row = (6, 3, 1), state row = (0, 3, 1)
        assert_eq!(t.ems[0], vec![6.0, 3.0, 1.0]);
        assert_eq!(t.ems[1], vec![0.0, 3.0, 1.0]);
    }
}
