//! Datasets and their exchangeable-batch structure.
//!
//! A [`FactorLayout`] lists the factors of a dataset, their levels, how they
//! relate (crossed or nested), and the ordered variance sources derived from
//! them. Each non-residual source groups observations into exchangeable
//! effects; [`Membership`] records which effect every observation belongs to.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RESIDUAL: &str = "residual";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Crossed,
    NestedIn(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorDecl {
    pub name: String,
    pub relation: Relation,
}

impl FactorDecl {
    pub fn crossed(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            relation: Relation::Crossed,
        }
    }

    pub fn nested(name: impl Into<String>, parent: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            relation: Relation::NestedIn(parent.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub response: f64,
    pub labels: BTreeMap<String, String>,
}

impl Observation {
    pub fn new<K, V>(response: f64, labels: impl IntoIterator<Item = (K, V)>) -> Self
    where
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            response,
            labels: labels
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutOptions {
    /// Highest interaction order enumerated automatically.
    pub max_interaction_order: usize,
    /// Explicit interaction list; replaces automatic enumeration when set.
    pub interactions: Option<Vec<Vec<String>>>,
}

impl Default for LayoutOptions {
    fn default() -> Self {
        Self {
            max_interaction_order: 2,
            interactions: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Effect,
    Residual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Source {
    pub name: String,
    /// Factors named by the source, in declaration order.
    pub factors: Vec<usize>,
    /// `factors` plus all their ancestors under nesting, sorted.
    pub defining: Vec<usize>,
    pub kind: SourceKind,
}

impl Source {
    pub fn is_residual(&self) -> bool {
        self.kind == SourceKind::Residual
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorLayout {
    factors: Vec<String>,
    levels: Vec<Vec<String>>,
    parents: Vec<Option<usize>>,
    sources: Vec<Source>,
    notes: Vec<String>,
}

impl FactorLayout {
    pub fn factors(&self) -> &[String] {
        &self.factors
    }

    pub fn levels(&self, factor: usize) -> &[String] {
        &self.levels[factor]
    }

    pub fn parent(&self, factor: usize) -> Option<usize> {
        self.parents[factor]
    }

    pub fn factor_index(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f == name)
    }

    pub fn sources(&self) -> &[Source] {
        &self.sources
    }

    pub fn source_names(&self) -> Vec<String> {
        self.sources.iter().map(|s| s.name.clone()).collect()
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    /// Number of non-residual sources (M − 1).
    pub fn n_effect_sources(&self) -> usize {
        self.sources.len() - 1
    }

    pub fn source_index(&self, name: &str) -> Result<usize> {
        self.sources
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::UnknownSource(name.to_string()))
    }

    /// Diagnostics produced while building the layout (e.g. dropped interactions).
    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    pub fn declarations(&self) -> Vec<FactorDecl> {
        self.factors
            .iter()
            .zip(&self.parents)
            .map(|(name, parent)| match parent {
                None => FactorDecl::crossed(name.clone()),
                Some(p) => FactorDecl::nested(name.clone(), self.factors[*p].clone()),
            })
            .collect()
    }

    fn without_source(&self, index: usize) -> Self {
        let mut out = self.clone();
        out.sources.remove(index);
        out
    }
}

fn ancestors(parents: &[Option<usize>], factor: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut cur = parents[factor];
    while let Some(p) = cur {
        out.push(p);
        cur = parents[p];
    }
    out
}

fn closure(parents: &[Option<usize>], factors: &[usize]) -> Vec<usize> {
    let mut set = BTreeSet::new();
    for &f in factors {
        set.insert(f);
        set.extend(ancestors(parents, f));
    }
    set.into_iter().collect()
}

fn admissible(parents: &[Option<usize>], factors: &[usize]) -> bool {
    factors.iter().all(|&f| {
        let anc = ancestors(parents, f);
        factors.iter().all(|g| !anc.contains(g))
    })
}

/// Maps each observation to its effect within one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub effect_of: Vec<usize>,
    pub n_effects: usize,
    pub counts: Vec<usize>,
    /// Level-index key (over the source's defining factors) of every effect.
    pub cells: Vec<Vec<usize>>,
}

fn cell_membership(level_index: &[Vec<usize>], defining: &[usize]) -> Membership {
    let keys: Vec<Vec<usize>> = level_index
        .iter()
        .map(|row| defining.iter().map(|&f| row[f]).collect())
        .collect();
    let distinct: BTreeSet<&Vec<usize>> = keys.iter().collect();
    let cells: Vec<Vec<usize>> = distinct.into_iter().cloned().collect();
    let lookup: HashMap<&Vec<usize>, usize> =
        cells.iter().enumerate().map(|(i, c)| (c, i)).collect();
    let effect_of: Vec<usize> = keys.iter().map(|k| lookup[k]).collect();
    let mut counts = vec![0usize; cells.len()];
    for &e in &effect_of {
        counts[e] += 1;
    }
    Membership {
        effect_of,
        n_effects: cells.len(),
        counts,
        cells,
    }
}

fn level_indices(
    factors: &[String],
    levels: &[Vec<String>],
    observations: &[Observation],
) -> Result<Vec<Vec<usize>>> {
    let lookups: Vec<HashMap<&str, usize>> = levels
        .iter()
        .map(|ls| ls.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect())
        .collect();
    observations
        .iter()
        .enumerate()
        .map(|(row, obs)| {
            factors
                .iter()
                .zip(&lookups)
                .map(|(f, lookup)| {
                    let label = obs.labels.get(f).ok_or_else(|| Error::Observation {
                        row,
                        message: format!("missing label for factor `{f}`"),
                    })?;
                    lookup.get(label.as_str()).copied().ok_or_else(|| Error::Observation {
                        row,
                        message: format!("level `{label}` is not a level of factor `{f}`"),
                    })
                })
                .collect()
        })
        .collect()
}

fn validate_observations(observations: &[Observation]) -> Result<()> {
    for (row, obs) in observations.iter().enumerate() {
        if !obs.response.is_finite() {
            return Err(Error::Observation {
                row,
                message: format!("response {} is not finite", obs.response),
            });
        }
    }
    Ok(())
}

/// Build the factor layout for a set of observations.
///
/// Sources are enumerated as main effects in declaration order, then
/// interactions ordered by size and then lexicographically by factor
/// declaration index, then the residual. Automatically enumerated interactions
/// whose cells all hold a single observation would coincide with the
/// residual and are omitted with a note.
pub fn build_layout(
    declarations: &[FactorDecl],
    observations: &[Observation],
    options: &LayoutOptions,
) -> Result<FactorLayout> {
    if declarations.is_empty() {
        return Err(Error::Layout("at least one factor must be declared".into()));
    }
    if observations.is_empty() {
        return Err(Error::Dataset("no observations".into()));
    }
    validate_observations(observations)?;

    let factors: Vec<String> = declarations.iter().map(|d| d.name.clone()).collect();
    for (i, f) in factors.iter().enumerate() {
        if f.is_empty() {
            return Err(Error::Layout("factor names must be non-empty".into()));
        }
        if f == RESIDUAL {
            return Err(Error::Layout(format!("`{RESIDUAL}` is reserved and cannot name a factor")));
        }
        if factors[..i].contains(f) {
            return Err(Error::Layout(format!("factor `{f}` declared twice")));
        }
    }

    let parents: Vec<Option<usize>> = declarations
        .iter()
        .map(|d| match &d.relation {
            Relation::Crossed => Ok(None),
            Relation::NestedIn(p) => match factors.iter().position(|f| f == p) {
                Some(pi) if factors[pi] != d.name => Ok(Some(pi)),
                Some(_) => Err(Error::Layout(format!("factor `{}` cannot be nested in itself", d.name))),
                None => Err(Error::Layout(format!(
                    "unknown level relation: `{}` nested in undeclared factor `{p}`",
                    d.name
                ))),
            },
        })
        .collect::<Result<_>>()?;
    for start in 0..parents.len() {
        let mut cur = parents[start];
        let mut steps = 0;
        while let Some(p) = cur {
            steps += 1;
            if p == start || steps > parents.len() {
                return Err(Error::Layout(format!(
                    "cyclic nesting involving factor `{}`",
                    factors[start]
                )));
            }
            cur = parents[p];
        }
    }

    let mut levels: Vec<Vec<String>> = Vec::with_capacity(factors.len());
    for f in &factors {
        let mut set = BTreeSet::new();
        for (row, obs) in observations.iter().enumerate() {
            let label = obs.labels.get(f).ok_or_else(|| Error::Observation {
                row,
                message: format!("missing label for factor `{f}`"),
            })?;
            set.insert(label.clone());
        }
        if set.len() < 2 {
            return Err(Error::Layout(format!(
                "factor `{f}` has a single level; a variance source needs at least 2"
            )));
        }
        levels.push(set.into_iter().collect());
    }
    let level_index = level_indices(&factors, &levels, observations)?;

    for (f, parent) in parents.iter().enumerate() {
        if let Some(p) = parent {
            let child = cell_membership(&level_index, &closure(&parents, &[f]));
            let par = cell_membership(&level_index, &closure(&parents, &[*p]));
            if child.n_effects == par.n_effects {
                return Err(Error::Layout(format!(
                    "factor `{}` has a single level within every level of `{}`",
                    factors[f], factors[*p]
                )));
            }
        }
    }

    let mut notes = Vec::new();
    let mut sources: Vec<Source> = (0..factors.len())
        .map(|f| Source {
            name: factors[f].clone(),
            factors: vec![f],
            defining: closure(&parents, &[f]),
            kind: SourceKind::Effect,
        })
        .collect();

    let interaction_sets: Vec<Vec<usize>> = match &options.interactions {
        Some(list) => {
            let mut sets = BTreeSet::new();
            for names in list {
                let mut idx = Vec::with_capacity(names.len());
                for n in names {
                    let i = factors.iter().position(|f| f == n).ok_or_else(|| {
                        Error::Layout(format!("interaction names undeclared factor `{n}`"))
                    })?;
                    if idx.contains(&i) {
                        return Err(Error::Layout(format!("interaction repeats factor `{n}`")));
                    }
                    idx.push(i);
                }
                if idx.len() < 2 {
                    return Err(Error::Layout("an interaction needs at least two factors".into()));
                }
                idx.sort_unstable();
                if !admissible(&parents, &idx) {
                    return Err(Error::Layout(format!(
                        "interaction {} crosses a factor with its own ancestor",
                        names.join(":")
                    )));
                }
                if cell_membership(&level_index, &closure(&parents, &idx))
                    .counts
                    .iter()
                    .all(|&c| c <= 1)
                {
                    notes.push(format!(
                        "interaction {} has one observation per cell and is confounded with the residual",
                        names.join(":")
                    ));
                }
                sets.insert(idx);
            }
            let mut v: Vec<Vec<usize>> = sets.into_iter().collect();
            v.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
            v
        }
        None => {
            let mut v = Vec::new();
            for order in 2..=options.max_interaction_order.min(factors.len()) {
                for combo in combinations(factors.len(), order) {
                    if !admissible(&parents, &combo) {
                        continue;
                    }
                    let m = cell_membership(&level_index, &closure(&parents, &combo));
                    if m.counts.iter().all(|&c| c <= 1) {
                        notes.push(format!(
                            "interaction {} omitted: every cell holds a single observation",
                            combo.iter().map(|&i| factors[i].as_str()).collect::<Vec<_>>().join(":")
                        ));
                        continue;
                    }
                    v.push(combo);
                }
            }
            v
        }
    };
    for combo in interaction_sets {
        sources.push(Source {
            name: combo
                .iter()
                .map(|&i| factors[i].as_str())
                .collect::<Vec<_>>()
                .join(":"),
            defining: closure(&parents, &combo),
            factors: combo,
            kind: SourceKind::Effect,
        });
    }
    sources.push(Source {
        name: RESIDUAL.to_string(),
        factors: Vec::new(),
        defining: (0..factors.len()).collect(),
        kind: SourceKind::Residual,
    });

    Ok(FactorLayout {
        factors,
        levels,
        parents,
        sources,
        notes,
    })
}

/// All `k`-subsets of `0..n` in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Result of the balance check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Balance {
    pub balanced: bool,
    /// Common replicate count per cell, when balanced.
    pub replicates: Option<usize>,
    pub empty_cells: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    observations: Vec<Observation>,
    responses: Vec<f64>,
    layout: FactorLayout,
    level_index: Vec<Vec<usize>>,
    memberships: Vec<Membership>,
}

impl Dataset {
    /// Build the layout from the declarations and wrap the observations.
    pub fn build(
        declarations: &[FactorDecl],
        observations: Vec<Observation>,
        options: &LayoutOptions,
    ) -> Result<Self> {
        let layout = build_layout(declarations, &observations, options)?;
        Self::new(observations, layout)
    }

    pub fn new(observations: Vec<Observation>, layout: FactorLayout) -> Result<Self> {
        if observations.len() < 2 {
            return Err(Error::Dataset(format!(
                "at least 2 observations required, got {}",
                observations.len()
            )));
        }
        validate_observations(&observations)?;
        let level_index = level_indices(&layout.factors, &layout.levels, &observations)?;
        let memberships = layout
            .sources
            .iter()
            .filter(|s| !s.is_residual())
            .map(|s| cell_membership(&level_index, &s.defining))
            .collect::<Vec<_>>();
        for (s, m) in layout.sources.iter().zip(&memberships) {
            if m.n_effects < 2 {
                return Err(Error::Dataset(format!(
                    "source `{}` has fewer than 2 observed levels",
                    s.name
                )));
            }
        }
        let responses = observations.iter().map(|o| o.response).collect();
        Ok(Self {
            observations,
            responses,
            layout,
            level_index,
            memberships,
        })
    }

    /// One-way dataset from groups of responses; group `j` is labelled `gNNN`.
    pub fn one_way(groups: &[Vec<f64>]) -> Result<Self> {
        let observations = groups
            .iter()
            .enumerate()
            .flat_map(|(j, g)| {
                g.iter()
                    .map(move |&y| Observation::new(y, [("group", format!("g{j:03}"))]))
            })
            .collect();
        Self::build(&[FactorDecl::crossed("group")], observations, &LayoutOptions::default())
    }

    pub fn layout(&self) -> &FactorLayout {
        &self.layout
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn n(&self) -> usize {
        self.responses.len()
    }

    /// Level index of every observation for every factor.
    pub fn level_index(&self) -> &[Vec<usize>] {
        &self.level_index
    }

    /// Effect membership for non-residual source `source`.
    pub fn membership(&self, source: usize) -> Result<&Membership> {
        self.memberships.get(source).ok_or_else(|| {
            Error::UnknownSource(match self.layout.sources.get(source) {
                Some(s) => format!("{} (residual has no membership)", s.name),
                None => format!("#{source}"),
            })
        })
    }

    pub fn memberships(&self) -> &[Membership] {
        &self.memberships
    }

    /// Human-readable label of effect `effect` of source `source`.
    pub fn effect_label(&self, source: usize, effect: usize) -> String {
        let s = &self.layout.sources[source];
        let cell = &self.memberships[source].cells[effect];
        s.defining
            .iter()
            .zip(cell)
            .map(|(&f, &l)| self.layout.levels[f][l].as_str())
            .collect::<Vec<_>>()
            .join("/")
    }

    pub fn mean(&self) -> f64 {
        self.responses.iter().sum::<f64>() / self.n() as f64
    }

    /// Sample variance with denominator n − 1.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.responses.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (self.n() - 1) as f64
    }

    /// Copy of this dataset with the responses replaced.
    pub fn with_responses(&self, responses: Vec<f64>) -> Result<Self> {
        if responses.len() != self.n() {
            return Err(Error::Dataset(format!(
                "expected {} responses, got {}",
                self.n(),
                responses.len()
            )));
        }
        if let Some(row) = responses.iter().position(|y| !y.is_finite()) {
            return Err(Error::Observation {
                row,
                message: "response is not finite".into(),
            });
        }
        let mut out = self.clone();
        for (o, &y) in out.observations.iter_mut().zip(&responses) {
            o.response = y;
        }
        out.responses = responses;
        Ok(out)
    }

    /// The dataset with source `name` deleted from the model. Labels are kept.
    pub fn without_source(&self, name: &str) -> Result<Self> {
        let idx = self.layout.source_index(name)?;
        if self.layout.sources[idx].is_residual() {
            return Err(Error::Config("the residual source cannot be removed".into()));
        }
        let mut out = self.clone();
        out.layout = self.layout.without_source(idx);
        out.memberships.remove(idx);
        Ok(out)
    }

    pub fn is_balanced(&self) -> bool {
        self.balance().balanced
    }

    /// Balance check over the full (nesting-respecting) cross of all factors.
    ///
    /// Balanced means every cell holds the same positive number of
    /// observations and every nested factor has the same number of levels
    /// within each level of its parent.
    pub fn balance(&self) -> Balance {
        let parents = &self.layout.parents;
        let n_factors = self.layout.factors.len();
        let mut warnings = Vec::new();

        let mut branching_uniform = true;
        for f in 0..n_factors {
            if let Some(p) = parents[f] {
                let child_def = closure(parents, &[f]);
                let par_def = closure(parents, &[p]);
                let mut per_parent: BTreeMap<Vec<usize>, BTreeSet<Vec<usize>>> = BTreeMap::new();
                for row in &self.level_index {
                    let pk = par_def.iter().map(|&i| row[i]).collect();
                    let ck = child_def.iter().map(|&i| row[i]).collect();
                    per_parent.entry(pk).or_default().insert(ck);
                }
                let sizes: BTreeSet<usize> = per_parent.values().map(|s| s.len()).collect();
                if sizes.len() > 1 {
                    branching_uniform = false;
                    warnings.push(format!(
                        "factor `{}` has an unequal number of levels within `{}`",
                        self.layout.factors[f], self.layout.factors[p]
                    ));
                }
            }
        }

        let roots: Vec<usize> = (0..n_factors).filter(|&f| parents[f].is_none()).collect();
        let trees: Vec<Vec<usize>> = roots
            .iter()
            .map(|&r| {
                (0..n_factors)
                    .filter(|&f| f == r || ancestors(parents, f).contains(&r))
                    .collect()
            })
            .collect();
        let chains: Vec<Membership> = trees
            .iter()
            .map(|t| cell_membership(&self.level_index, t))
            .collect();
        let full: u128 = chains.iter().map(|c| c.n_effects as u128).product();
        let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for i in 0..self.n() {
            let key: Vec<usize> = chains.iter().map(|c| c.effect_of[i]).collect();
            *counts.entry(key).or_default() += 1;
        }
        let observed = counts.len() as u128;
        let empty_cells = full.saturating_sub(observed).min(usize::MAX as u128) as usize;
        if empty_cells > 0 {
            warnings.push(format!("{empty_cells} empty cell(s) in the factor cross"));
        }
        let distinct: BTreeSet<usize> = counts.values().copied().collect();
        let balanced = branching_uniform && empty_cells == 0 && distinct.len() == 1;
        Balance {
            balanced,
            replicates: if balanced { distinct.into_iter().next() } else { None },
            empty_cells,
            warnings,
        }
    }
}
