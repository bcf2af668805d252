//! Baseline identification: the g-formula for a controlled direct effect
//! and a brute-force truncated-factorization oracle over a full joint model
//! that may contain latent variables.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::Cohort;
pub use crate::table::ConditionalTable;
use crate::table::{cartesian, RawVariable, TableError, NORMALIZATION_TOL};

/// Largest number of joint cells the oracle will enumerate.
pub const MAX_CELLS: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IdentifyError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("`{variable}`: {msg}")]
    Model { variable: String, msg: String },
    #[error("positivity failure: cell {cell} has zero mass")]
    Positivity { cell: String },
    #[error("table for `{0}` involves a latent variable")]
    LatentInput(String),
    #[error("cell space of {0} cells exceeds the limit of {MAX_CELLS}")]
    TooLarge(usize),
    #[error("order is not compatible with the parent structure: {0}")]
    BadOrder(String),
    #[error("total mass {0} differs from 1")]
    Unnormalized(f64),
    #[error("zero denominator")]
    ZeroDenominator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointVariable {
    pub time: f64,
    pub latent: bool,
    pub table: ConditionalTable,
}

impl JointVariable {
    pub fn name(&self) -> &str {
        &self.table.variable
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawJointModel {
    variables: Vec<RawVariable>,
}

/// A discrete joint law as a product of conditional tables, listed in an
/// order that respects timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    variables: Vec<JointVariable>,
    /// Parent positions of every variable.
    parent_index: Vec<Vec<usize>>,
}

impl JointModel {
    pub fn new(variables: Vec<JointVariable>) -> Result<JointModel, IdentifyError> {
        let mut names = BTreeSet::new();
        let mut parent_index = Vec::with_capacity(variables.len());
        for (k, v) in variables.iter().enumerate() {
            if !names.insert(v.name().to_string()) {
                return Err(IdentifyError::Model {
                    variable: v.name().to_string(),
                    msg: "duplicate variable".into(),
                });
            }
            if k > 0 && variables[k - 1].time > v.time {
                return Err(IdentifyError::Model {
                    variable: v.name().to_string(),
                    msg: "variables must be listed in timestamp order".into(),
                });
            }
            let mut idx = Vec::new();
            let mut alphabets: Vec<&[i64]> = Vec::new();
            for p in &v.table.parents {
                let q = variables[..k]
                    .iter()
                    .position(|u| u.name() == p)
                    .filter(|&q| variables[q].time < v.time)
                    .ok_or_else(|| IdentifyError::Model {
                        variable: v.name().to_string(),
                        msg: format!("parent `{p}` is not a strictly earlier variable"),
                    })?;
                idx.push(q);
                alphabets.push(&variables[q].table.values);
            }
            v.table.check()?;
            v.table.check_complete(&alphabets)?;
            parent_index.push(idx);
        }
        let mut variables = variables;
        for k in 0..variables.len() {
            let latent = variables[k].latent || parent_index[k].iter().any(|&q| variables[q].latent);
            variables[k].table.involves_latent = latent;
        }
        Ok(JointModel {
            variables,
            parent_index,
        })
    }

    pub fn parse(text: &str) -> Result<JointModel, IdentifyError> {
        let raw: RawJointModel = toml::from_str(text).map_err(|e| IdentifyError::Parse(e.to_string()))?;
        let vars = raw
            .variables
            .iter()
            .map(|r| {
                Ok(JointVariable {
                    time: r.time,
                    latent: r.latent,
                    table: r.to_table()?,
                })
            })
            .collect::<Result<Vec<_>, IdentifyError>>()?;
        JointModel::new(vars)
    }

    pub fn to_toml(&self) -> String {
        let raw = RawJointModel {
            variables: self
                .variables
                .iter()
                .map(|v| RawVariable::from_table(&v.table, v.time, v.latent))
                .collect(),
        };
        toml::to_string(&raw).expect("joint model serializes")
    }

    pub fn variables(&self) -> &[JointVariable] {
        &self.variables
    }

    pub fn index(&self, name: &str) -> Result<usize, IdentifyError> {
        self.variables
            .iter()
            .position(|v| v.name() == name)
            .ok_or_else(|| IdentifyError::UnknownVariable(name.to_string()))
    }

    pub fn parents_of(&self, k: usize) -> &[usize] {
        &self.parent_index[k]
    }

    fn cell_count(&self) -> Result<usize, IdentifyError> {
        let mut cells: usize = 1;
        for v in &self.variables {
            cells = cells.saturating_mul(v.table.values.len());
        }
        if cells > MAX_CELLS {
            return Err(IdentifyError::TooLarge(cells));
        }
        Ok(cells)
    }

    /// Every joint cell with its probability, in listing order.
    pub fn enumerate(&self) -> Result<Vec<(Vec<i64>, f64)>, IdentifyError> {
        self.cell_count()?;
        let alphabets: Vec<&[i64]> = self.variables.iter().map(|v| v.table.values.as_slice()).collect();
        Ok(cartesian(&alphabets)
            .into_iter()
            .map(|cell| {
                let p = self.cell_probability(&cell);
                (cell, p)
            })
            .collect())
    }

    fn cell_probability(&self, cell: &[i64]) -> f64 {
        let mut p = 1.0;
        for (k, v) in self.variables.iter().enumerate() {
            let given: Vec<i64> = self.parent_index[k].iter().map(|&q| cell[q]).collect();
            p *= v.table.prob(cell[k], &given).expect("complete table");
        }
        p
    }

    /// Total mass of the product of tables.
    pub fn total_mass(&self) -> Result<f64, IdentifyError> {
        Ok(self.enumerate()?.iter().map(|c| c.1).sum())
    }

    /// Exact `P(variable | parents)` by marginalizing the joint. Parent
    /// configurations with zero mass are listed in `empty_cells`.
    pub fn conditional(&self, variable: &str, parents: &[&str]) -> Result<ConditionalTable, IdentifyError> {
        let k = self.index(variable)?;
        let pidx = parents.iter().map(|p| self.index(p)).collect::<Result<Vec<_>, _>>()?;
        let values = self.variables[k].table.values.clone();
        let mut mass: BTreeMap<Vec<i64>, Vec<f64>> = BTreeMap::new();
        for (cell, p) in self.enumerate()? {
            let given: Vec<i64> = pidx.iter().map(|&q| cell[q]).collect();
            let row = mass.entry(given).or_insert_with(|| vec![0.0; values.len()]);
            let vi = values.iter().position(|&v| v == cell[k]).expect("value in alphabet");
            row[vi] += p;
        }
        let mut rows = BTreeMap::new();
        let mut empty_cells = Vec::new();
        for (given, row) in mass {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                rows.insert(given, row.iter().map(|m| m / total).collect());
            } else {
                empty_cells.push(given);
            }
        }
        let involves_latent = self.variables[k].latent || pidx.iter().any(|&q| self.variables[q].latent);
        Ok(ConditionalTable {
            variable: variable.to_string(),
            values,
            parents: parents.iter().map(|p| p.to_string()).collect(),
            rows,
            empty_cells,
            involves_latent,
        })
    }

    /// Every ordering of the variables in which parents precede children.
    pub fn topological_orders(&self) -> Vec<Vec<usize>> {
        let n = self.variables.len();
        let mut out = Vec::new();
        let mut order = Vec::with_capacity(n);
        let mut placed = vec![false; n];
        fn rec(model: &JointModel, order: &mut Vec<usize>, placed: &mut [bool], out: &mut Vec<Vec<usize>>) {
            if order.len() == placed.len() {
                out.push(order.clone());
                return;
            }
            for k in 0..placed.len() {
                if !placed[k] && model.parent_index[k].iter().all(|&q| placed[q]) {
                    placed[k] = true;
                    order.push(k);
                    rec(model, order, placed, out);
                    order.pop();
                    placed[k] = false;
                }
            }
        }
        rec(self, &mut order, &mut placed, &mut out);
        out
    }
}

/// Empirical `P(variable | parents)` over baseline variables of a cohort.
/// Alphabets are the observed values; parent configurations in the product
/// of observed parent alphabets without any observation are listed in
/// `empty_cells`.
pub fn fit_table(cohort: &Cohort, variable: &str, parents: &[&str]) -> Result<ConditionalTable, IdentifyError> {
    let idx = |name: &str| {
        cohort
            .alphabet
            .baseline_index(name)
            .ok_or_else(|| IdentifyError::UnknownVariable(name.to_string()))
    };
    let k = idx(variable)?;
    let pidx = parents.iter().map(|p| idx(p)).collect::<Result<Vec<_>, _>>()?;
    let observed = |j: usize| -> Vec<i64> {
        let set: BTreeSet<i64> = cohort.paths.iter().map(|p| p.baseline[j]).collect();
        set.into_iter().collect()
    };
    let values = observed(k);
    let parent_alphabets: Vec<Vec<i64>> = pidx.iter().map(|&j| observed(j)).collect();
    let mut counts: BTreeMap<Vec<i64>, Vec<f64>> = BTreeMap::new();
    for p in &cohort.paths {
        let given: Vec<i64> = pidx.iter().map(|&j| p.baseline[j]).collect();
        let row = counts.entry(given).or_insert_with(|| vec![0.0; values.len()]);
        let vi = values.iter().position(|&v| v == p.baseline[k]).expect("observed value");
        row[vi] += 1.0;
    }
    let refs: Vec<&[i64]> = parent_alphabets.iter().map(Vec::as_slice).collect();
    let empty_cells = cartesian(&refs)
        .into_iter()
        .filter(|c| !counts.contains_key(c))
        .collect();
    let rows = counts
        .into_iter()
        .map(|(g, row)| {
            let total: f64 = row.iter().sum();
            (g, row.iter().map(|c| c / total).collect())
        })
        .collect();
    Ok(ConditionalTable {
        variable: variable.to_string(),
        values,
        parents: parents.iter().map(|p| p.to_string()).collect(),
        rows,
        empty_cells,
        involves_latent: false,
    })
}

/// A deterministic value rule: a constant or a lookup on one earlier
/// variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ValueRule {
    Constant { value: i64 },
    Lookup { reads: String, map: BTreeMap<String, i64> },
}

impl ValueRule {
    pub fn constant(value: i64) -> ValueRule {
        ValueRule::Constant { value }
    }

    pub fn lookup(reads: &str, pairs: &[(i64, i64)]) -> ValueRule {
        ValueRule::Lookup {
            reads: reads.to_string(),
            map: pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    pub fn reads(&self) -> Option<&str> {
        match self {
            ValueRule::Constant { .. } => None,
            ValueRule::Lookup { reads, .. } => Some(reads),
        }
    }

    /// Value given the read variable's value (ignored for constants).
    pub fn apply(&self, read: Option<i64>) -> Option<i64> {
        match self {
            ValueRule::Constant { value } => Some(*value),
            ValueRule::Lookup { map, .. } => map.get(&read?.to_string()).copied(),
        }
    }

    pub fn parse(text: &str) -> Result<ValueRule, IdentifyError> {
        toml::from_str(text).map_err(|e| IdentifyError::Parse(e.to_string()))
    }
}

/// Observed tables the g-formula needs.
#[derive(Debug, Clone, PartialEq)]
pub struct GformulaTables {
    /// `P(L | A)`.
    pub covariate: ConditionalTable,
    /// `P(B | A, L, K)`.
    pub outcome: ConditionalTable,
    pub treatment: String,
    pub mediator: String,
}

impl GformulaTables {
    /// Exact observed tables of a joint model with variables `A, L, K, B`.
    pub fn from_model(model: &JointModel, a: &str, l: &str, k: &str, b: &str) -> Result<GformulaTables, IdentifyError> {
        Ok(GformulaTables {
            covariate: model.conditional(l, &[a])?,
            outcome: model.conditional(b, &[a, l, k])?,
            treatment: a.to_string(),
            mediator: k.to_string(),
        })
    }

    /// Empirical tables from cohort baselines.
    pub fn from_cohort(cohort: &Cohort, a: &str, l: &str, k: &str, b: &str) -> Result<GformulaTables, IdentifyError> {
        Ok(GformulaTables {
            covariate: fit_table(cohort, l, &[a])?,
            outcome: fit_table(cohort, b, &[a, l, k])?,
            treatment: a.to_string(),
            mediator: k.to_string(),
        })
    }
}

fn describe(names: &[String], values: &[i64]) -> String {
    let parts: Vec<String> = names.iter().zip(values).map(|(n, v)| format!("{n}={v}")).collect();
    format!("({})", parts.join(", "))
}

/// `Σ_l P(l | A=a) Σ_b h(b) P(b | A=a, L=l, K=k_rule(l))`.
pub fn gformula_direct_effect(
    tables: &GformulaTables,
    a: i64,
    k_rule: &ValueRule,
    h: &dyn Fn(i64) -> f64,
) -> Result<f64, IdentifyError> {
    for t in [&tables.covariate, &tables.outcome] {
        if t.involves_latent {
            return Err(IdentifyError::LatentInput(t.variable.clone()));
        }
    }
    let l_name = &tables.covariate.variable;
    let l_row = tables.covariate.row(&[a]).ok_or_else(|| IdentifyError::Positivity {
        cell: describe(std::slice::from_ref(&tables.treatment), &[a]),
    })?;
    let mut total = 0.0;
    for (li, &l) in tables.covariate.values.iter().enumerate() {
        let pl = l_row[li];
        if pl == 0.0 {
            continue;
        }
        let k = k_rule.apply(Some(l)).ok_or_else(|| IdentifyError::Model {
            variable: tables.mediator.clone(),
            msg: format!("rule has no value for {l_name}={l}"),
        })?;
        let mut given = Vec::with_capacity(3);
        for p in &tables.outcome.parents {
            given.push(if *p == tables.treatment {
                a
            } else if p == l_name {
                l
            } else if *p == tables.mediator {
                k
            } else {
                return Err(IdentifyError::UnknownVariable(p.clone()));
            });
        }
        let row = tables.outcome.row(&given).ok_or_else(|| IdentifyError::Positivity {
            cell: describe(&tables.outcome.parents, &given),
        })?;
        let inner: f64 = tables.outcome.values.iter().zip(row).map(|(&b, p)| h(b) * p).sum();
        total += pl * inner;
    }
    Ok(total)
}

/// Ratio of the g-formula risks `P(B=1)` under `a1` and `a2`.
pub fn relative_direct_risk(
    tables: &GformulaTables,
    a1: i64,
    a2: i64,
    k_rule: &ValueRule,
) -> Result<f64, IdentifyError> {
    let event = |b: i64| f64::from(u8::from(b == 1));
    let num = gformula_direct_effect(tables, a1, k_rule, &event)?;
    let den = gformula_direct_effect(tables, a2, k_rule, &event)?;
    if den == 0.0 {
        return Err(IdentifyError::ZeroDenominator);
    }
    Ok(num / den)
}

/// A distribution over the observed variables of a joint model.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub variables: Vec<String>,
    pub probs: BTreeMap<Vec<i64>, f64>,
}

impl Distribution {
    pub fn total(&self) -> f64 {
        self.probs.values().sum()
    }

    /// `P(variable = value)`.
    pub fn marginal(&self, variable: &str, value: i64) -> Result<f64, IdentifyError> {
        let k = self
            .variables
            .iter()
            .position(|v| v == variable)
            .ok_or_else(|| IdentifyError::UnknownVariable(variable.to_string()))?;
        Ok(self.probs.iter().filter(|(c, _)| c[k] == value).map(|(_, p)| p).sum())
    }

    pub fn max_abs_difference(&self, other: &Distribution) -> f64 {
        let keys: BTreeSet<&Vec<i64>> = self.probs.keys().chain(other.probs.keys()).collect();
        keys.into_iter()
            .map(|k| (self.probs.get(k).unwrap_or(&0.0) - other.probs.get(k).unwrap_or(&0.0)).abs())
            .fold(0.0, f64::max)
    }
}

/// Counterfactual law by truncated factorization: enforced variables become
/// point masses at their rule's value, every other factor (latent ones
/// included) is kept, and latent variables are summed out. Enumeration
/// follows `order` (a parent-respecting order; listing order if `None`).
/// The result must carry unit mass without renormalization.
pub fn truncated_factorization_oracle(
    full: &JointModel,
    enforced: &BTreeMap<String, ValueRule>,
    order: Option<&[usize]>,
) -> Result<Distribution, IdentifyError> {
    full.cell_count()?;
    let n = full.variables.len();
    let default_order: Vec<usize> = (0..n).collect();
    let order = order.unwrap_or(&default_order);
    let mut seen = vec![false; n];
    for &k in order {
        if k >= n || seen[k] || full.parent_index[k].iter().any(|&q| !seen[q]) {
            return Err(IdentifyError::BadOrder(format!("{order:?}")));
        }
        seen[k] = true;
    }
    if order.len() != n {
        return Err(IdentifyError::BadOrder(format!("{order:?}")));
    }
    let mut rules: Vec<Option<(&ValueRule, Option<usize>)>> = vec![None; n];
    for (name, rule) in enforced {
        let k = full.index(name)?;
        let read = rule.reads().map(|r| full.index(r)).transpose()?;
        rules[k] = Some((rule, read));
    }

    let observed: Vec<usize> = (0..n).filter(|&k| !full.variables[k].latent).collect();
    let mut probs: BTreeMap<Vec<i64>, f64> = BTreeMap::new();
    let mut cell = vec![0i64; n];
    let mut assigned = vec![false; n];

    struct Ctx<'a> {
        full: &'a JointModel,
        order: &'a [usize],
        rules: &'a [Option<(&'a ValueRule, Option<usize>)>],
        observed: &'a [usize],
    }
    fn rec(
        ctx: &Ctx<'_>,
        depth: usize,
        mass: f64,
        cell: &mut [i64],
        assigned: &mut [bool],
        probs: &mut BTreeMap<Vec<i64>, f64>,
    ) -> Result<(), IdentifyError> {
        if depth == ctx.order.len() {
            let key: Vec<i64> = ctx.observed.iter().map(|&k| cell[k]).collect();
            *probs.entry(key).or_insert(0.0) += mass;
            return Ok(());
        }
        let k = ctx.order[depth];
        let var = &ctx.full.variables[k];
        match ctx.rules[k] {
            Some((rule, read)) => {
                let read_value = match read {
                    Some(q) if !assigned[q] => {
                        return Err(IdentifyError::BadOrder(format!(
                            "rule for `{}` reads `{}` before it is assigned",
                            var.name(),
                            ctx.full.variables[q].name()
                        )))
                    }
                    Some(q) => Some(cell[q]),
                    None => None,
                };
                let v = rule.apply(read_value).ok_or_else(|| IdentifyError::Model {
                    variable: var.name().to_string(),
                    msg: format!("rule has no value for {read_value:?}"),
                })?;
                if var.table.value_index(v).is_none() {
                    return Err(IdentifyError::Model {
                        variable: var.name().to_string(),
                        msg: format!("enforced value {v} is outside the alphabet"),
                    });
                }
                cell[k] = v;
                assigned[k] = true;
                rec(ctx, depth + 1, mass, cell, assigned, probs)?;
                assigned[k] = false;
            }
            None => {
                let given: Vec<i64> = ctx.full.parent_index[k].iter().map(|&q| cell[q]).collect();
                let row = var.table.row(&given).expect("complete table");
                for (vi, &v) in var.table.values.iter().enumerate() {
                    cell[k] = v;
                    assigned[k] = true;
                    rec(ctx, depth + 1, mass * row[vi], cell, assigned, probs)?;
                }
                assigned[k] = false;
            }
        }
        Ok(())
    }
    let ctx = Ctx {
        full,
        order,
        rules: &rules,
        observed: &observed,
    };
    rec(&ctx, 0, 1.0, &mut cell, &mut assigned, &mut probs)?;
    let dist = Distribution {
        variables: observed.iter().map(|&k| full.variables[k].name().to_string()).collect(),
        probs,
    };
    let total = dist.total();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(IdentifyError::Unnormalized(total));
    }
    Ok(dist)
}

/// A random binary model over `W` (latent), `A`, `L`, `K`, `B` with edges
/// `W→L, W→B, A→L, A→K, A→B, L→K, L→B, K→B`; every conditional probability
/// is drawn uniformly from `[0.05, 0.95]`.
pub fn random_confounded_model(seed: u64) -> JointModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec: [(&str, f64, bool, &[&str]); 5] = [
        ("W", 0.0, true, &[]),
        ("A", 1.0, false, &[]),
        ("L", 2.0, false, &["A", "W"]),
        ("K", 3.0, false, &["A", "L"]),
        ("B", 4.0, false, &["A", "L", "K", "W"]),
    ];
    let vars = spec
        .iter()
        .map(|&(name, time, latent, parents)| {
            let binary: Vec<&[i64]> = parents.iter().map(|_| [0i64, 1].as_slice()).collect();
            let rows = cartesian(&binary)
                .into_iter()
                .map(|g| {
                    let p: f64 = rng.random_range(0.05..0.95);
                    (g, vec![1.0 - p, p])
                })
                .collect();
            JointVariable {
                time,
                latent,
                table: ConditionalTable {
                    variable: name.to_string(),
                    values: vec![0, 1],
                    parents: parents.iter().map(|p| p.to_string()).collect(),
                    rows,
                    empty_cells: Vec::new(),
                    involves_latent: latent,
                },
            }
        })
        .collect();
    JointModel::new(vars).expect("generated model is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn regime(a: i64, k: ValueRule) -> BTreeMap<String, ValueRule> {
        BTreeMap::from([("A".to_string(), ValueRule::constant(a)), ("K".to_string(), k)])
    }

    #[test]
    fn model_is_normalized() {
        let m = random_confounded_model(1);
        assert!((m.total_mass().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn marginalizing_latent_matches_enumeration() {
        let m = random_confounded_model(2);
        let t = m.conditional("L", &["A"]).unwrap();
        assert!(!t.involves_latent);
        // Direct sum over the joint.
        let cells = m.enumerate().unwrap();
        for a in [0, 1] {
            let pa: f64 = cells.iter().filter(|(c, _)| c[1] == a).map(|c| c.1).sum();
            let pla: f64 = cells.iter().filter(|(c, _)| c[1] == a && c[2] == 1).map(|c| c.1).sum();
            assert!((t.prob(1, &[a]).unwrap() - pla / pa).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_parent_list_gives_marginal() {
        let m = random_confounded_model(3);
        let t = m.conditional("B", &[]).unwrap();
        let cells = m.enumerate().unwrap();
        let p1: f64 = cells.iter().filter(|(c, _)| c[4] == 1).map(|c| c.1).sum();
        assert!((t.prob(1, &[]).unwrap() - p1).abs() < 1e-14);
    }

    #[test]
    fn gformula_equals_oracle() {
        let m = random_confounded_model(4);
        let tables = GformulaTables::from_model(&m, "A", "L", "K", "B").unwrap();
        let k_rule = ValueRule::lookup("L", &[(0, 1), (1, 0)]);
        for a in [0, 1] {
            let g = gformula_direct_effect(&tables, a, &k_rule, &|b| b as f64).unwrap();
            let d = truncated_factorization_oracle(&m, &regime(a, k_rule.clone()), None).unwrap();
            assert!((g - d.marginal("B", 1).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn latent_tables_are_rejected() {
        let m = random_confounded_model(5);
        let mut tables = GformulaTables::from_model(&m, "A", "L", "K", "B").unwrap();
        tables.outcome = m.conditional("B", &["A", "L", "K", "W"]).unwrap();
        let err = gformula_direct_effect(&tables, 1, &ValueRule::constant(0), &|b| b as f64).unwrap_err();
        assert_eq!(err, IdentifyError::LatentInput("B".into()));
    }

    #[test]
    fn independent_outcome_gives_its_marginal() {
        let mut m = random_confounded_model(6);
        let vars: Vec<JointVariable> = m
            .variables()
            .iter()
            .map(|v| {
                let mut v = v.clone();
                if v.name() == "B" {
                    for row in v.table.rows.values_mut() {
                        *row = vec![0.7, 0.3];
                    }
                }
                v
            })
            .collect();
        m = JointModel::new(vars).unwrap();
        let tables = GformulaTables::from_model(&m, "A", "L", "K", "B").unwrap();
        for a in [0, 1] {
            for k in [0, 1] {
                let g = gformula_direct_effect(&tables, a, &ValueRule::constant(k), &|b| b as f64).unwrap();
                assert!((g - 0.3).abs() < 1e-12);
            }
        }
        let rr = relative_direct_risk(&tables, 1, 0, &ValueRule::constant(1)).unwrap();
        assert!((rr - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_mass_cell_is_a_positivity_error() {
        let m = random_confounded_model(7);
        let vars: Vec<JointVariable> = m
            .variables()
            .iter()
            .map(|v| {
                let mut v = v.clone();
                if v.name() == "K" {
                    for row in v.table.rows.values_mut() {
                        *row = vec![1.0, 0.0];
                    }
                }
                v
            })
            .collect();
        let m = JointModel::new(vars).unwrap();
        let tables = GformulaTables::from_model(&m, "A", "L", "K", "B").unwrap();
        let err = gformula_direct_effect(&tables, 0, &ValueRule::constant(1), &|b| b as f64).unwrap_err();
        assert!(err.to_string().contains("K=1"), "{err}");
    }

    #[test]
    fn topological_orders_of_the_five_variable_model() {
        let m = random_confounded_model(8);
        let orders = m.topological_orders();
        // W and A are free; L needs both; K then B.
        assert_eq!(orders.len(), 2);
        let bad = [1, 2, 0, 3, 4];
        let err = truncated_factorization_oracle(&m, &BTreeMap::new(), Some(&bad)).unwrap_err();
        assert!(matches!(err, IdentifyError::BadOrder(_)));
    }

    #[test]
    fn value_rule_toml() {
        assert_eq!(ValueRule::parse("value = 1").unwrap(), ValueRule::constant(1));
        let r = ValueRule::parse("reads = \"L\"\nmap = { \"0\" = 1, \"1\" = 0 }").unwrap();
        assert_eq!(r.apply(Some(0)), Some(1));
    }
}
