//! Conditional probability tables over finite alphabets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for a conditional distribution to count as normalized.
pub const NORMALIZATION_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TableError {
    #[error("table `{table}`: {msg}")]
    Invalid { table: String, msg: String },
}

fn invalid(table: &str, msg: impl Into<String>) -> TableError {
    TableError::Invalid {
        table: table.to_string(),
        msg: msg.into(),
    }
}

/// `P(variable | parents)`, one distribution per parent-value tuple.
///
/// Rows are keyed by parent values in the order of `parents`. A row may be
/// absent when the parent configuration carries no mass (see
/// [`ConditionalTable::empty_cells`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalTable {
    pub variable: String,
    pub values: Vec<i64>,
    pub parents: Vec<String>,
    pub rows: BTreeMap<Vec<i64>, Vec<f64>>,
    /// Parent configurations with zero mass in the source.
    pub empty_cells: Vec<Vec<i64>>,
    /// True when the variable or any parent is latent.
    pub involves_latent: bool,
}

impl ConditionalTable {
    pub fn row(&self, parent_values: &[i64]) -> Option<&[f64]> {
        self.rows.get(parent_values).map(Vec::as_slice)
    }

    pub fn value_index(&self, value: i64) -> Option<usize> {
        self.values.iter().position(|&v| v == value)
    }

    /// `P(variable = value | parents = parent_values)`; `None` when the value
    /// is outside the alphabet or the row is missing.
    pub fn prob(&self, value: i64, parent_values: &[i64]) -> Option<f64> {
        let k = self.value_index(value)?;
        self.row(parent_values).map(|r| r[k])
    }

    /// Checks shape and normalization of every row.
    pub fn check(&self) -> Result<(), TableError> {
        let name = &self.variable;
        if self.values.is_empty() {
            return Err(invalid(name, "empty alphabet"));
        }
        let mut seen = self.values.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.values.len() {
            return Err(invalid(name, "duplicate values in alphabet"));
        }
        for (given, probs) in &self.rows {
            if given.len() != self.parents.len() {
                return Err(invalid(
                    name,
                    format!(
                        "row {given:?} has {} parent values, expected {}",
                        given.len(),
                        self.parents.len()
                    ),
                ));
            }
            if probs.len() != self.values.len() {
                return Err(invalid(
                    name,
                    format!(
                        "row {given:?} has {} probabilities, expected {}",
                        probs.len(),
                        self.values.len()
                    ),
                ));
            }
            if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(invalid(name, format!("row {given:?} has a probability outside [0, 1]")));
            }
            let total: f64 = probs.iter().sum();
            if (total - 1.0).abs() > NORMALIZATION_TOL {
                return Err(invalid(name, format!("row {given:?} sums to {total}, not 1")));
            }
        }
        Ok(())
    }

    /// Checks that rows cover exactly the product of the parent alphabets.
    pub fn check_complete(&self, parent_alphabets: &[&[i64]]) -> Result<(), TableError> {
        let combos = cartesian(parent_alphabets);
        for c in &combos {
            if !self.rows.contains_key(c) {
                return Err(invalid(&self.variable, format!("missing row for parents {c:?}")));
            }
        }
        if self.rows.len() != combos.len() {
            return Err(invalid(
                &self.variable,
                "rows for parent values outside their alphabets",
            ));
        }
        Ok(())
    }
}

/// Every tuple in the product of `alphabets`, in lexicographic order of
/// positions.
pub fn cartesian(alphabets: &[&[i64]]) -> Vec<Vec<i64>> {
    let mut out: Vec<Vec<i64>> = vec![Vec::new()];
    for alpha in alphabets {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                alpha.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect();
    }
    out
}

/// Serialized variable with its table, shared by scenario and joint-model
/// documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawVariable {
    pub name: String,
    pub time: f64,
    pub values: Vec<i64>,
    #[serde(default)]
    pub parents: Vec<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub latent: bool,
    pub table: Vec<RawRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRow {
    pub given: Vec<i64>,
    pub probs: Vec<f64>,
}

impl RawVariable {
    /// Converts to a table; duplicate rows are an error.
    pub fn to_table(&self) -> Result<ConditionalTable, TableError> {
        let mut rows = BTreeMap::new();
        for r in &self.table {
            if rows.insert(r.given.clone(), r.probs.clone()).is_some() {
                return Err(invalid(&self.name, format!("duplicate row {:?}", r.given)));
            }
        }
        let t = ConditionalTable {
            variable: self.name.clone(),
            values: self.values.clone(),
            parents: self.parents.clone(),
            rows,
            empty_cells: Vec::new(),
            involves_latent: self.latent,
        };
        t.check()?;
        Ok(t)
    }

    pub fn from_table(table: &ConditionalTable, time: f64, latent: bool) -> RawVariable {
        RawVariable {
            name: table.variable.clone(),
            time,
            values: table.values.clone(),
            parents: table.parents.clone(),
            latent,
            table: table
                .rows
                .iter()
                .map(|(given, probs)| RawRow {
                    given: given.clone(),
                    probs: probs.clone(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(probs: Vec<f64>) -> RawVariable {
        RawVariable {
            name: "L".into(),
            time: 1.0,
            values: vec![0, 1],
            parents: vec!["A".into()],
            latent: false,
            table: vec![
                RawRow {
                    given: vec![0],
                    probs: vec![0.5, 0.5],
                },
                RawRow { given: vec![1], probs },
            ],
        }
    }

    #[test]
    fn valid_table() {
        let t = raw(vec![0.25, 0.75]).to_table().unwrap();
        assert_eq!(t.prob(1, &[1]), Some(0.75));
        assert_eq!(t.prob(2, &[1]), None);
        t.check_complete(&[&[0, 1]]).unwrap();
        assert!(t.check_complete(&[&[0, 1, 2]]).is_err());
    }

    #[test]
    fn unnormalized_row_names_the_table() {
        let err = raw(vec![0.4, 0.5]).to_table().unwrap_err();
        assert!(err.to_string().contains("`L`"));
        assert!(err.to_string().contains("sums to"));
    }

    #[test]
    fn cartesian_order() {
        let c = cartesian(&[&[0, 1], &[5, 6]]);
        assert_eq!(c, vec![vec![0, 5], vec![0, 6], vec![1, 5], vec![1, 6]]);
        assert_eq!(cartesian(&[]), vec![Vec::<i64>::new()]);
    }
}
