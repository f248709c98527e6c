//! Long-format CSV input: one row per observation, a numeric response column
//! and one column per factor.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use varcomp::{Dataset, Error, FactorDecl, LayoutOptions, Observation};

/// A factor column and how it relates to the others.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    pub name: String,
    #[serde(default)]
    pub nested_in: Option<String>,
}

impl FactorSpec {
    pub fn decl(&self) -> FactorDecl {
        match &self.nested_in {
            Some(p) => FactorDecl::nested(&self.name, p),
            None => FactorDecl::crossed(&self.name),
        }
    }
}

pub const DEFAULT_RESPONSE: &str = "y";

/// Read a dataset from CSV. With `factors` empty every column other than the
/// response is a factor, in header order, and nesting is inferred: see
/// [`infer_factors`].
pub fn ingest_csv(path: &Path, response: &str, factors: &[FactorSpec], options: &LayoutOptions) -> Result<Dataset, Error> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    parse_csv(&text, response, factors, options)
}

pub fn parse_csv(text: &str, response: &str, factors: &[FactorSpec], options: &LayoutOptions) -> Result<Dataset, Error> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Dataset(format!("cannot read header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(Error::Dataset("empty file: no header row".into()));
    }
    let column = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| {
            Error::Dataset(format!("column `{name}` not found; header is [{}]", header.join(", ")))
        })
    };
    let y_col = column(response)?;
    let explicit = !factors.is_empty();
    let mut specs: Vec<FactorSpec> = if explicit {
        factors.to_vec()
    } else {
        header
            .iter()
            .filter(|h| *h != response)
            .map(|h| FactorSpec {
                name: h.clone(),
                nested_in: None,
            })
            .collect()
    };
    if specs.is_empty() {
        return Err(Error::Dataset(format!("no factor columns besides the response `{response}`")));
    }
    let cols: Vec<usize> = specs.iter().map(|s| column(&s.name)).collect::<Result<_, _>>()?;

    let mut obs = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::Observation {
            row,
            message: format!("line {line}: {e}"),
        })?;
        let raw = rec.get(y_col).unwrap_or("");
        let y: f64 = raw.parse().map_err(|_| Error::Observation {
            row,
            message: format!("line {line}, column `{response}`: `{raw}` is not a number"),
        })?;
        if !y.is_finite() {
            return Err(Error::Observation {
                row,
                message: format!("line {line}, column `{response}`: response `{raw}` is not finite"),
            });
        }
        let mut labels = Vec::with_capacity(cols.len());
        for (spec, &c) in specs.iter().zip(&cols) {
            let v = rec.get(c).unwrap_or("");
            if v.is_empty() {
                return Err(Error::Observation {
                    row,
                    message: format!("line {line}, column `{}`: empty level label", spec.name),
                });
            }
            labels.push((spec.name.clone(), v.to_string()));
        }
        obs.push(Observation::new(y, labels));
    }
    if obs.is_empty() {
        return Err(Error::Dataset("empty file: no data rows".into()));
    }
    if !explicit {
        specs = infer_factors(&specs, &obs);
    }
    let decls: Vec<FactorDecl> = specs.iter().map(FactorSpec::decl).collect();
    Dataset::build(&decls, obs, options)
}

/// Mark factor B as nested in A when B has more levels than A and each level
/// of B occurs with exactly one level of A. Among several such A the one with
/// the most levels is chosen, so region ⊃ state ⊃ msa resolves to the chain.
pub fn infer_factors(specs: &[FactorSpec], obs: &[Observation]) -> Vec<FactorSpec> {
    let levels: Vec<BTreeSet<&str>> = specs
        .iter()
        .map(|s| obs.iter().map(|o| o.labels[&s.name].as_str()).collect())
        .collect();
    let maps_into = |b: &str, a: &str| {
        let mut parent: BTreeMap<&str, &str> = BTreeMap::new();
        obs.iter().all(|o| {
            let (lb, la) = (o.labels[b].as_str(), o.labels[a].as_str());
            *parent.entry(lb).or_insert(la) == la
        })
    };
    specs
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let parent = specs
                .iter()
                .enumerate()
                .filter(|&(j, a)| j != i && levels[j].len() < levels[i].len() && maps_into(&b.name, &a.name))
                .max_by_key(|&(j, _)| (levels[j].len(), std::cmp::Reverse(j)))
                .map(|(_, a)| a.name.clone());
            FactorSpec {
                name: b.name.clone(),
                nested_in: parent,
            }
        })
        .collect()
}

/// Write the dataset back as CSV: factor columns in declaration order, then the
/// response. Floats use the shortest representation that round-trips.
pub fn write_dataset_csv<W: std::io::Write>(ds: &Dataset, response: &str, out: W) -> Result<(), Error> {
    let io = |e: csv::Error| Error::Dataset(format!("cannot write CSV: {e}"));
    let mut w = csv::Writer::from_writer(out);
    let factors = ds.layout().factors();
    let mut header: Vec<&str> = factors.iter().map(String::as_str).collect();
    header.push(response);
    w.write_record(&header).map_err(io)?;
    for o in ds.observations() {
        let mut rec: Vec<String> = factors.iter().map(|f| o.labels[f].clone()).collect();
        rec.push(format!("{}", o.response));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Dataset(format!("cannot write CSV: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Dataset, Error> {
        parse_csv(text, "y", &[], &LayoutOptions::default())
    }

    #[test]
    fn one_way_file() {
        let ds = parse("group,y\na,0\na,2\nb,1\nb,3\n").unwrap();
        assert_eq!(ds.n(), 4);
        assert_eq!(ds.layout().n_sources(), 2);
    }

    #[test]
    fn missing_response_column_names_header() {
        let e = parse("group,value\na,1\nb,2\n").unwrap_err().to_string();
        assert!(e.contains("`y`") && e.contains("group, value"), "{e}");
    }

    #[test]
    fn nan_response_reports_row() {
        let e = parse("group,y\na,1\na,NaN\nb,2\n").unwrap_err();
        assert!(matches!(e, Error::Observation { row: 1, .. }), "{e}");
        assert!(e.to_string().contains("line 3"));
        let e = parse("group,y\na,1\nb,x\n").unwrap_err();
        assert!(e.to_string().contains("`x` is not a number"));
    }

    #[test]
    fn empty_inputs() {
        assert!(parse("").unwrap_err().to_string().contains("empty"));
        assert!(parse("group,y\n").unwrap_err().to_string().contains("no data rows"));
    }

    #[test]
    fn nested_factors_from_specs() {
        let text = "region,state,y\nr1,s1,1\nr1,s1,2\nr1,s2,3\nr1,s2,1\nr2,s3,0\nr2,s3,2\nr2,s4,5\nr2,s4,4\n";
        let specs = [
            FactorSpec { name: "region".into(), nested_in: None },
            FactorSpec { name: "state".into(), nested_in: Some("region".into()) },
        ];
        let ds = parse_csv(text, "y", &specs, &LayoutOptions::default()).unwrap();
        assert_eq!(ds.layout().source_names(), ["region", "state", "residual"]);
    }

    #[test]
    fn nesting_inferred_from_labels() {
        let text = "region,state,plan,y\nr1,s1,p1,1\nr1,s1,p2,2\nr1,s2,p1,3\nr1,s2,p2,1\nr2,s3,p1,0\nr2,s3,p2,2\nr2,s4,p1,5\nr2,s4,p2,4\n";
        let ds = parse(text).unwrap();
        let decls = ds.layout().declarations();
        assert_eq!(decls[1], FactorDecl::nested("state", "region"));
        assert_eq!(decls[2], FactorDecl::crossed("plan"));
        assert!(ds.is_balanced());
    }

    #[test]
    fn round_trip() {
        let ds = parse("g,h,y\na,u,0.1\na,v,-2.5e-7\nb,u,3\nb,v,1e300\na,u,0.30000000000000004\nb,v,7\n").unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&ds, "y", &mut buf).unwrap();
        let back = parse(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back.responses(), ds.responses());
        assert_eq!(back.observations(), ds.observations());
    }
}
