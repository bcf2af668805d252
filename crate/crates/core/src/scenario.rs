//! Declarative generative models and interventions.
//!
//! A [`ScenarioSpec`] describes the factual law: conditional tables for the
//! baseline variables, piecewise-constant intensities for continuous-risk
//! modules and jump probabilities for schedule-restricted modules. An
//! [`InterventionSpec`] describes a deterministic action: enforced baseline
//! values and enforced jump decisions, each a function of the strictly prior
//! non-intervened history.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::events::{Alphabet, MarkSig, ModuleSig};
use crate::expr::{is_reserved, CompiledExpr, Expr, ExprError, StateView};
use crate::graph::{GraphError, LocalIndependenceGraph};
use crate::table::{ConditionalTable, RawVariable, TableError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("no modules")]
    NoModules,
    #[error("`{id}`: {msg}")]
    Invalid { id: String, msg: String },
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("`{id}`: {source}")]
    Expr { id: String, source: ExprError },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("module `{module}` at t={time}: rate {value} outside [0, {cap}]")]
    RateOutOfRange {
        module: String,
        time: f64,
        value: f64,
        cap: f64,
    },
    #[error("module `{module}` at t={time}: jump probability {value} outside [0, 1]")]
    ProbabilityOutOfRange { module: String, time: f64, value: f64 },
    #[error("rule for `{target}` evaluated to {value}: {msg}")]
    RuleValue { target: String, value: f64, msg: String },
}

fn invalid(id: &str, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        id: id.to_string(),
        msg: msg.into(),
    }
}

fn expr_err(id: &str) -> impl Fn(ExprError) -> ScenarioError + '_ {
    move |source| ScenarioError::Expr {
        id: id.to_string(),
        source,
    }
}

fn digest_of(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    horizon: f64,
    #[serde(default)]
    baseline: Vec<RawVariable>,
    #[serde(default)]
    modules: Vec<RawModule>,
    #[serde(default)]
    schedules: Vec<RawSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    graph: Option<RawGraph>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModule {
    name: String,
    #[serde(default)]
    absorbing: bool,
    #[serde(default)]
    initial: i64,
    #[serde(default)]
    depends: Vec<String>,
    cap: f64,
    marks: Vec<RawMark>,
}

fn one() -> i64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMark {
    #[serde(default)]
    label: u32,
    #[serde(default = "one")]
    delta: i64,
    rate: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    name: String,
    #[serde(default)]
    initial: i64,
    #[serde(default)]
    label: u32,
    #[serde(default = "one")]
    delta: i64,
    times: Vec<f64>,
    #[serde(default)]
    depends: Vec<String>,
    prob: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSpec {
    pub time: f64,
    pub table: ConditionalTable,
    /// Baseline indices of the table parents.
    pub parent_slots: Vec<usize>,
}

impl BaselineSpec {
    pub fn name(&self) -> &str {
        &self.table.variable
    }

    /// Distribution of the variable given already-assigned baseline values.
    pub fn distribution(&self, baseline: &[i64]) -> &[f64] {
        let given: Vec<i64> = self.parent_slots.iter().map(|&k| baseline[k]).collect();
        self.table.row(&given).expect("complete table checked at construction")
    }

    pub fn prob_of(&self, value: i64, baseline: &[i64]) -> f64 {
        match self.table.value_index(value) {
            Some(k) => self.distribution(baseline)[k],
            None => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntensityMark {
    pub label: u32,
    pub delta: i64,
    pub rate: CompiledExpr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntensitySpec {
    pub module: String,
    pub depends: BTreeSet<String>,
    pub absorbing: bool,
    pub cap: f64,
    pub initial: i64,
    pub marks: Vec<IntensityMark>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentSchedule {
    pub module: String,
    pub times: Vec<f64>,
    pub depends: BTreeSet<String>,
    pub prob: CompiledExpr,
    pub label: u32,
    pub delta: i64,
    pub initial: i64,
}

#[derive(Debug, Clone, Copy)]
pub enum ModuleKind<'a> {
    Intensity(&'a IntensitySpec),
    Scheduled(&'a TreatmentSchedule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum KindIndex {
    Intensity(usize),
    Scheduled(usize),
}

/// A validated generative model. Module indices follow
/// [`Alphabet::modules`], which is sorted by module name.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    horizon: f64,
    baseline: Vec<BaselineSpec>,
    intensities: Vec<IntensitySpec>,
    schedules: Vec<TreatmentSchedule>,
    kinds: Vec<KindIndex>,
    graph: Option<LocalIndependenceGraph>,
    alphabet: Arc<Alphabet>,
    decision_times: Vec<(f64, usize)>,
}

fn check_name(name: &str) -> Result<(), ScenarioError> {
    let mut chars = name.chars();
    let ok = matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_');
    if !ok || is_reserved(name) {
        return Err(invalid(name, "invalid or reserved name"));
    }
    Ok(())
}

impl ScenarioSpec {
    pub fn parse(text: &str) -> Result<ScenarioSpec, ScenarioError> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        ScenarioSpec::from_raw(raw)
    }

    fn from_raw(raw: RawScenario) -> Result<ScenarioSpec, ScenarioError> {
        if !(raw.horizon.is_finite() && raw.horizon > 0.0) {
            return Err(invalid("horizon", "must be finite and positive"));
        }
        if raw.modules.is_empty() && raw.schedules.is_empty() {
            return Err(ScenarioError::NoModules);
        }
        let mut names = BTreeSet::new();
        let all_names = raw
            .baseline
            .iter()
            .map(|b| &b.name)
            .chain(raw.modules.iter().map(|m| &m.name))
            .chain(raw.schedules.iter().map(|s| &s.name));
        for n in all_names {
            check_name(n)?;
            if !names.insert(n.clone()) {
                return Err(invalid(n, "duplicate identifier"));
            }
        }

        // Baseline variables in (time, name) order.
        let mut raw_baseline = raw.baseline.clone();
        for b in &raw_baseline {
            if !b.time.is_finite() {
                return Err(invalid(&b.name, "baseline time must be finite"));
            }
        }
        raw_baseline.sort_by(|a, b| a.time.total_cmp(&b.time).then_with(|| a.name.cmp(&b.name)));
        let base_names: Vec<String> = raw_baseline.iter().map(|b| b.name.clone()).collect();
        let mut baseline: Vec<BaselineSpec> = Vec::with_capacity(raw_baseline.len());
        for b in &raw_baseline {
            let table = b.to_table()?;
            let mut parent_slots = Vec::with_capacity(b.parents.len());
            let mut alphabets: Vec<&[i64]> = Vec::new();
            for p in &b.parents {
                let k = base_names
                    .iter()
                    .position(|n| n == p)
                    .ok_or_else(|| invalid(&b.name, format!("parent `{p}` is not a baseline variable")))?;
                if raw_baseline[k].time >= b.time {
                    return Err(invalid(&b.name, format!("parent `{p}` is not strictly earlier")));
                }
                parent_slots.push(k);
                alphabets.push(&raw_baseline[k].values);
            }
            table.check_complete(&alphabets)?;
            baseline.push(BaselineSpec {
                time: b.time,
                table,
                parent_slots,
            });
        }

        // Alphabet: modules sorted by name.
        let mut modules: Vec<(ModuleSig, KindIndex)> = Vec::new();
        for (k, m) in raw.modules.iter().enumerate() {
            if m.marks.is_empty() {
                return Err(invalid(&m.name, "module declares no marks"));
            }
            let mut labels = BTreeSet::new();
            for mk in &m.marks {
                if !labels.insert(mk.label) {
                    return Err(invalid(&m.name, format!("duplicate mark label {}", mk.label)));
                }
                if mk.delta == 0 {
                    return Err(invalid(&m.name, "mark delta must be nonzero"));
                }
            }
            if !(m.cap.is_finite() && m.cap > 0.0) {
                return Err(invalid(&m.name, "cap must be finite and positive"));
            }
            modules.push((
                ModuleSig {
                    name: m.name.clone(),
                    marks: m
                        .marks
                        .iter()
                        .map(|mk| MarkSig {
                            label: mk.label,
                            delta: mk.delta,
                        })
                        .collect(),
                    initial: m.initial,
                    schedule: None,
                },
                KindIndex::Intensity(k),
            ));
        }
        for (k, s) in raw.schedules.iter().enumerate() {
            if s.times.is_empty() {
                return Err(invalid(&s.name, "schedule has no times"));
            }
            if s.times.windows(2).any(|w| w[1] <= w[0]) {
                return Err(invalid(&s.name, "schedule times must be strictly increasing"));
            }
            if s.times.iter().any(|&t| !(t > 0.0 && t <= raw.horizon)) {
                return Err(invalid(&s.name, "schedule times must lie in (0, T]"));
            }
            if s.delta == 0 {
                return Err(invalid(&s.name, "delta must be nonzero"));
            }
            modules.push((
                ModuleSig {
                    name: s.name.clone(),
                    marks: vec![MarkSig {
                        label: s.label,
                        delta: s.delta,
                    }],
                    initial: s.initial,
                    schedule: Some(s.times.clone()),
                },
                KindIndex::Scheduled(k),
            ));
        }
        modules.sort_by(|a, b| a.0.name.cmp(&b.0.name));
        let alphabet = Arc::new(Alphabet {
            horizon: raw.horizon,
            baseline: base_names.clone(),
            modules: modules.iter().map(|m| m.0.clone()).collect(),
        });
        let kinds: Vec<KindIndex> = modules.iter().map(|m| m.1).collect();

        let check_depends = |id: &str, depends: &[String]| -> Result<BTreeSet<String>, ScenarioError> {
            let mut out = BTreeSet::new();
            for d in depends {
                if alphabet.slot(d).is_none() {
                    return Err(invalid(id, format!("unknown dependency `{d}`")));
                }
                if d != id {
                    out.insert(d.clone());
                }
            }
            Ok(out)
        };
        let check_reads = |id: &str, e: &Expr, depends: &BTreeSet<String>| -> Result<(), ScenarioError> {
            for r in e.references() {
                if r != id && !depends.contains(&r) {
                    return Err(invalid(id, format!("reads undeclared dependency `{r}`")));
                }
            }
            Ok(())
        };

        let mut intensities = Vec::with_capacity(raw.modules.len());
        for m in &raw.modules {
            let depends = check_depends(&m.name, &m.depends)?;
            let mut marks = Vec::with_capacity(m.marks.len());
            for mk in &m.marks {
                let e = Expr::parse(&mk.rate).map_err(expr_err(&m.name))?;
                if e.uses_time() {
                    return Err(invalid(&m.name, "intensities may not read `t`"));
                }
                check_reads(&m.name, &e, &depends)?;
                marks.push(IntensityMark {
                    label: mk.label,
                    delta: mk.delta,
                    rate: e.compile(&alphabet).map_err(expr_err(&m.name))?,
                });
            }
            intensities.push(IntensitySpec {
                module: m.name.clone(),
                depends,
                absorbing: m.absorbing,
                cap: m.cap,
                initial: m.initial,
                marks,
            });
        }
        let mut schedules = Vec::with_capacity(raw.schedules.len());
        for s in &raw.schedules {
            let depends = check_depends(&s.name, &s.depends)?;
            let e = Expr::parse(&s.prob).map_err(expr_err(&s.name))?;
            check_reads(&s.name, &e, &depends)?;
            schedules.push(TreatmentSchedule {
                module: s.name.clone(),
                times: s.times.clone(),
                depends,
                prob: e.compile(&alphabet).map_err(expr_err(&s.name))?,
                label: s.label,
                delta: s.delta,
                initial: s.initial,
            });
        }

        let mut decision_times: Vec<(f64, usize)> = Vec::new();
        for (j, sig) in alphabet.modules.iter().enumerate() {
            if let Some(times) = &sig.schedule {
                decision_times.extend(times.iter().map(|&t| (t, j)));
            }
        }
        decision_times.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if let Some(w) = decision_times.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(invalid(
                &alphabet.modules[w[1].1].name,
                format!(
                    "shares decision time {} with `{}`; modules may not jump simultaneously",
                    w[0].0, alphabet.modules[w[0].1].name
                ),
            ));
        }

        let graph = match &raw.graph {
            Some(g) => Some(LocalIndependenceGraph::parse(&g.text)?),
            None => None,
        };

        Ok(ScenarioSpec {
            horizon: raw.horizon,
            baseline,
            intensities,
            schedules,
            kinds,
            graph,
            alphabet,
            decision_times,
        })
    }

    fn to_raw(&self) -> RawScenario {
        let mut modules = Vec::new();
        let mut schedules = Vec::new();
        for j in 0..self.alphabet.modules.len() {
            match self.module_kind(j) {
                ModuleKind::Intensity(spec) => modules.push(RawModule {
                    name: spec.module.clone(),
                    absorbing: spec.absorbing,
                    initial: spec.initial,
                    depends: spec.depends.iter().cloned().collect(),
                    cap: spec.cap,
                    marks: spec
                        .marks
                        .iter()
                        .map(|m| RawMark {
                            label: m.label,
                            delta: m.delta,
                            rate: m.rate.source().to_string(),
                        })
                        .collect(),
                }),
                ModuleKind::Scheduled(s) => schedules.push(RawSchedule {
                    name: s.module.clone(),
                    initial: s.initial,
                    label: s.label,
                    delta: s.delta,
                    times: s.times.clone(),
                    depends: s.depends.iter().cloned().collect(),
                    prob: s.prob.source().to_string(),
                }),
            }
        }
        RawScenario {
            horizon: self.horizon,
            baseline: self
                .baseline
                .iter()
                .map(|b| RawVariable::from_table(&b.table, b.time, false))
                .collect(),
            modules,
            schedules,
            graph: self.graph.as_ref().map(|g| RawGraph { text: g.to_string() }),
        }
    }

    /// Canonical text form; `parse(to_toml(s)) == s`.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_raw()).expect("scenario serializes")
    }

    /// SHA-256 of the canonical text.
    pub fn digest(&self) -> String {
        digest_of(&self.to_toml())
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn alphabet(&self) -> &Arc<Alphabet> {
        &self.alphabet
    }

    /// Baseline variables in baseline order.
    pub fn baseline(&self) -> &[BaselineSpec] {
        &self.baseline
    }

    pub fn graph(&self) -> Option<&LocalIndependenceGraph> {
        self.graph.as_ref()
    }

    pub fn with_graph(mut self, graph: LocalIndependenceGraph) -> Self {
        self.graph = Some(graph);
        self
    }

    pub fn n_modules(&self) -> usize {
        self.kinds.len()
    }

    pub fn module_kind(&self, module: usize) -> ModuleKind<'_> {
        match self.kinds[module] {
            KindIndex::Intensity(k) => ModuleKind::Intensity(&self.intensities[k]),
            KindIndex::Scheduled(k) => ModuleKind::Scheduled(&self.schedules[k]),
        }
    }

    pub fn module_index(&self, name: &str) -> Option<usize> {
        self.alphabet.module_index(name)
    }

    /// All schedule decision points `(time, module)`, sorted by time.
    pub fn decision_times(&self) -> &[(f64, usize)] {
        &self.decision_times
    }

    /// Per-mark rates of an intensity module, written into `out`; returns
    /// the total. Absorbing modules have rate zero once they left their
    /// initial state.
    pub fn rates<V: StateView + ?Sized>(
        &self,
        module: usize,
        state: &V,
        out: &mut Vec<f64>,
    ) -> Result<f64, ScenarioError> {
        out.clear();
        let ModuleKind::Intensity(spec) = self.module_kind(module) else {
            return Ok(0.0);
        };
        if spec.absorbing {
            let own = state.slot(self.alphabet.module_slot(module));
            if own != spec.initial as f64 {
                out.resize(spec.marks.len(), 0.0);
                return Ok(0.0);
            }
        }
        let mut total = 0.0;
        for m in &spec.marks {
            let r = m.rate.eval(state);
            if !(r >= 0.0 && r <= spec.cap) {
                return Err(ScenarioError::RateOutOfRange {
                    module: spec.module.clone(),
                    time: state.time(),
                    value: r,
                    cap: spec.cap,
                });
            }
            out.push(r);
            total += r;
        }
        Ok(total)
    }

    /// Factual probability that a scheduled module jumps at the current
    /// decision time.
    pub fn jump_probability<V: StateView + ?Sized>(&self, module: usize, state: &V) -> Result<f64, ScenarioError> {
        let ModuleKind::Scheduled(s) = self.module_kind(module) else {
            return Err(invalid(&self.alphabet.modules[module].name, "not schedule-restricted"));
        };
        let p = s.prob.eval(state);
        if !(0.0..=1.0).contains(&p) {
            return Err(ScenarioError::ProbabilityOutOfRange {
                module: s.module.clone(),
                time: state.time(),
                value: p,
            });
        }
        Ok(p)
    }

    /// Declared dependency set of every baseline variable and module,
    /// excluding self-dependence.
    pub fn declared_dependencies(&self) -> Vec<(String, BTreeSet<String>)> {
        let mut out: Vec<(String, BTreeSet<String>)> = self
            .baseline
            .iter()
            .map(|b| (b.name().to_string(), b.table.parents.iter().cloned().collect()))
            .collect();
        for j in 0..self.n_modules() {
            let (name, deps) = match self.module_kind(j) {
                ModuleKind::Intensity(s) => (&s.module, &s.depends),
                ModuleKind::Scheduled(s) => (&s.module, &s.depends),
            };
            out.push((name.clone(), deps.clone()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIntervention {
    #[serde(default)]
    baseline: Vec<RawBaselineRule>,
    #[serde(default)]
    modules: Vec<RawModuleRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBaselineRule {
    variable: String,
    value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModuleRule {
    module: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    jump: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    jump_at: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    suppress: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRule {
    pub variable: String,
    /// Index into the scenario's baseline variables.
    pub index: usize,
    pub value: CompiledExpr,
}

/// How an intervened module's events are enforced.
#[derive(Debug, Clone, PartialEq)]
pub enum DecisionRule {
    /// Jump at a decision time iff the expression, evaluated on the
    /// left-limit state at that time, is nonzero.
    Jump(CompiledExpr),
    /// Jump exactly at the listed decision times.
    JumpAt(Vec<f64>),
    /// Never jump.
    Suppress,
}

impl DecisionRule {
    pub fn decide<V: StateView + ?Sized>(&self, module: &str, state: &V) -> Result<bool, ScenarioError> {
        match self {
            DecisionRule::Jump(e) => {
                let v = e.eval(state);
                if v.is_nan() {
                    return Err(ScenarioError::RuleValue {
                        target: module.to_string(),
                        value: v,
                        msg: "decision is undefined".into(),
                    });
                }
                Ok(v != 0.0)
            }
            DecisionRule::JumpAt(times) => Ok(times.contains(&state.time())),
            DecisionRule::Suppress => Ok(false),
        }
    }

    /// Names the rule reads, excluding `t`.
    pub fn reads(&self) -> BTreeSet<String> {
        match self {
            DecisionRule::Jump(e) => e.source().references(),
            _ => BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleRule {
    pub module: String,
    pub index: usize,
    pub rule: DecisionRule,
}

/// A deterministic action: enforced baseline values and enforced decisions
/// for intervened modules. Everything not listed is left untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionSpec {
    baseline: Vec<BaselineRule>,
    modules: Vec<ModuleRule>,
}

impl InterventionSpec {
    /// The identity action.
    pub fn identity() -> InterventionSpec {
        InterventionSpec {
            baseline: Vec::new(),
            modules: Vec::new(),
        }
    }

    pub fn parse(text: &str, scenario: &ScenarioSpec) -> Result<InterventionSpec, ScenarioError> {
        let raw: RawIntervention = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        let alpha = scenario.alphabet();
        let mut baseline = Vec::with_capacity(raw.baseline.len());
        for r in &raw.baseline {
            let index = alpha
                .baseline_index(&r.variable)
                .ok_or_else(|| invalid(&r.variable, "not a baseline variable"))?;
            let e = Expr::parse(&r.value).map_err(expr_err(&r.variable))?;
            if e.uses_time() {
                return Err(invalid(&r.variable, "baseline rules may not read `t`"));
            }
            baseline.push(BaselineRule {
                variable: r.variable.clone(),
                index,
                value: e.compile(alpha).map_err(expr_err(&r.variable))?,
            });
        }
        let mut modules = Vec::with_capacity(raw.modules.len());
        for r in &raw.modules {
            let index = alpha
                .module_index(&r.module)
                .ok_or_else(|| invalid(&r.module, "not a module"))?;
            let rule = match (&r.jump, &r.jump_at, r.suppress) {
                (Some(src), None, None) => {
                    let e = Expr::parse(src).map_err(expr_err(&r.module))?;
                    DecisionRule::Jump(e.compile(alpha).map_err(expr_err(&r.module))?)
                }
                (None, Some(times), None) => {
                    if times.windows(2).any(|w| w[1] <= w[0]) {
                        return Err(invalid(&r.module, "jump_at times must be strictly increasing"));
                    }
                    DecisionRule::JumpAt(times.clone())
                }
                (None, None, Some(true)) => DecisionRule::Suppress,
                _ => {
                    return Err(invalid(
                        &r.module,
                        "exactly one of `jump`, `jump_at` or `suppress = true` is required",
                    ))
                }
            };
            modules.push(ModuleRule {
                module: r.module.clone(),
                index,
                rule,
            });
        }
        Ok(InterventionSpec { baseline, modules })
    }

    fn to_raw(&self) -> RawIntervention {
        RawIntervention {
            baseline: self
                .baseline
                .iter()
                .map(|r| RawBaselineRule {
                    variable: r.variable.clone(),
                    value: r.value.source().to_string(),
                })
                .collect(),
            modules: self
                .modules
                .iter()
                .map(|r| {
                    let mut raw = RawModuleRule {
                        module: r.module.clone(),
                        jump: None,
                        jump_at: None,
                        suppress: None,
                    };
                    match &r.rule {
                        DecisionRule::Jump(e) => raw.jump = Some(e.source().to_string()),
                        DecisionRule::JumpAt(t) => raw.jump_at = Some(t.clone()),
                        DecisionRule::Suppress => raw.suppress = Some(true),
                    }
                    raw
                })
                .collect(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_raw()).expect("intervention serializes")
    }

    pub fn digest(&self) -> String {
        digest_of(&self.to_toml())
    }

    pub fn is_identity(&self) -> bool {
        self.baseline.is_empty() && self.modules.is_empty()
    }

    pub fn baseline_rules(&self) -> &[BaselineRule] {
        &self.baseline
    }

    pub fn module_rules(&self) -> &[ModuleRule] {
        &self.modules
    }

    pub fn baseline_rule(&self, index: usize) -> Option<&BaselineRule> {
        self.baseline.iter().find(|r| r.index == index)
    }

    pub fn module_rule(&self, module: usize) -> Option<&DecisionRule> {
        self.modules.iter().find(|r| r.index == module).map(|r| &r.rule)
    }

    /// The intervened set.
    pub fn intervened(&self) -> BTreeSet<String> {
        self.baseline
            .iter()
            .map(|r| r.variable.clone())
            .chain(self.modules.iter().map(|r| r.module.clone()))
            .collect()
    }

    /// Evaluates an enforced baseline value against the variable's alphabet.
    pub fn enforced_baseline<V: StateView + ?Sized>(
        &self,
        rule: &BaselineRule,
        scenario: &ScenarioSpec,
        state: &V,
    ) -> Result<i64, ScenarioError> {
        let v = rule.value.eval(state);
        let spec = &scenario.baseline()[rule.index];
        if v.fract() != 0.0 || spec.table.value_index(v as i64).is_none() {
            return Err(ScenarioError::RuleValue {
                target: rule.variable.clone(),
                value: v,
                msg: "not in the variable's alphabet".into(),
            });
        }
        Ok(v as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum InterventionViolation {
    /// More than one rule targets the same variable.
    DuplicateRule { target: String },
    /// A baseline rule reads a variable that is not strictly earlier.
    ReadsNonPrior { target: String, read: String },
    /// A rule reads intervened history.
    ReadsIntervened { target: String, read: String },
    /// A rule enforces jumps of a module that is not schedule-restricted.
    NotScheduleRestricted { target: String },
    /// A rule enforces a jump off the module's schedule.
    OffSchedule { target: String, time: f64 },
}

impl fmt::Display for InterventionViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InterventionViolation::DuplicateRule { target } => {
                write!(f, "more than one rule for `{target}`")
            }
            InterventionViolation::ReadsNonPrior { target, read } => {
                write!(
                    f,
                    "baseline rule for `{target}` reads `{read}`, which is not strictly prior"
                )
            }
            InterventionViolation::ReadsIntervened { target, read } => {
                write!(f, "rule for `{target}` reads intervened history of `{read}`")
            }
            InterventionViolation::NotScheduleRestricted { target } => write!(
                f,
                "rule for `{target}` enforces jumps but `{target}` is not schedule-restricted"
            ),
            InterventionViolation::OffSchedule { target, time } => {
                write!(f, "rule for `{target}` enforces a jump at {time}, off its schedule")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct InterventionReport {
    pub violations: Vec<InterventionViolation>,
}

impl InterventionReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the action axioms: rules only for intervened variables, baseline
/// rules reading strictly prior non-intervened variables, follow-up rules
/// predictable in the non-intervened history, and enforced jumps only for
/// schedule-restricted modules on their grid.
pub fn validate_intervention(scenario: &ScenarioSpec, theta: &InterventionSpec) -> InterventionReport {
    let mut report = InterventionReport::default();
    let intervened = theta.intervened();
    let mut seen = BTreeSet::new();
    let targets = theta
        .baseline
        .iter()
        .map(|r| &r.variable)
        .chain(theta.modules.iter().map(|r| &r.module));
    for t in targets {
        if !seen.insert(t.clone()) {
            report
                .violations
                .push(InterventionViolation::DuplicateRule { target: t.clone() });
        }
    }

    let times: BTreeMap<&str, f64> = scenario.baseline().iter().map(|b| (b.name(), b.time)).collect();
    for r in &theta.baseline {
        let own_time = scenario.baseline()[r.index].time;
        for read in r.value.source().references() {
            match times.get(read.as_str()) {
                Some(&t) if t < own_time => {}
                _ => report.violations.push(InterventionViolation::ReadsNonPrior {
                    target: r.variable.clone(),
                    read: read.clone(),
                }),
            }
            if intervened.contains(&read) {
                report.violations.push(InterventionViolation::ReadsIntervened {
                    target: r.variable.clone(),
                    read,
                });
            }
        }
    }

    for r in &theta.modules {
        for read in r.rule.reads() {
            if intervened.contains(&read) {
                report.violations.push(InterventionViolation::ReadsIntervened {
                    target: r.module.clone(),
                    read,
                });
            }
        }
        match (scenario.module_kind(r.index), &r.rule) {
            (_, DecisionRule::Suppress) => {}
            (ModuleKind::Intensity(_), _) => report.violations.push(InterventionViolation::NotScheduleRestricted {
                target: r.module.clone(),
            }),
            (ModuleKind::Scheduled(s), DecisionRule::JumpAt(ts)) => {
                for &t in ts {
                    if !s.times.contains(&t) {
                        report.violations.push(InterventionViolation::OffSchedule {
                            target: r.module.clone(),
                            time: t,
                        });
                    }
                }
            }
            (ModuleKind::Scheduled(_), DecisionRule::Jump(_)) => {}
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const STATIC_SCENARIO: &str = r#"
horizon = 1.0

[[baseline]]
name = "B"
time = 4.0
values = [0, 1]
parents = ["A", "L", "K"]
table = [
  { given = [0, 0, 0], probs = [0.9, 0.1] },
  { given = [0, 0, 1], probs = [0.8, 0.2] },
  { given = [0, 1, 0], probs = [0.7, 0.3] },
  { given = [0, 1, 1], probs = [0.6, 0.4] },
  { given = [1, 0, 0], probs = [0.5, 0.5] },
  { given = [1, 0, 1], probs = [0.4, 0.6] },
  { given = [1, 1, 0], probs = [0.3, 0.7] },
  { given = [1, 1, 1], probs = [0.2, 0.8] },
]

[[baseline]]
name = "W"
time = 0.0
values = [0, 1]
table = [{ given = [], probs = [0.5, 0.5] }]

[[baseline]]
name = "A"
time = 1.0
values = [0, 1]
table = [{ given = [], probs = [0.5, 0.5] }]

[[baseline]]
name = "L"
time = 2.0
values = [0, 1]
parents = ["A", "W"]
table = [
  { given = [0, 0], probs = [0.8, 0.2] },
  { given = [0, 1], probs = [0.4, 0.6] },
  { given = [1, 0], probs = [0.6, 0.4] },
  { given = [1, 1], probs = [0.2, 0.8] },
]

[[baseline]]
name = "K"
time = 3.0
values = [0, 1]
parents = ["A", "L"]
table = [
  { given = [0, 0], probs = [0.7, 0.3] },
  { given = [0, 1], probs = [0.4, 0.6] },
  { given = [1, 0], probs = [0.5, 0.5] },
  { given = [1, 1], probs = [0.2, 0.8] },
]

[[modules]]
name = "D"
cap = 1.0
marks = [{ rate = "0" }]
"#;

    #[test]
    fn static_config_orders_baseline() {
        let s = ScenarioSpec::parse(STATIC_SCENARIO).unwrap();
        let order: Vec<&str> = s.baseline().iter().map(|b| b.name()).collect();
        assert_eq!(order, vec!["W", "A", "L", "K", "B"]);
    }

    #[test]
    fn empty_module_list_is_rejected() {
        let err = ScenarioSpec::parse("horizon = 1.0\n").unwrap_err();
        assert_eq!(err, ScenarioError::NoModules);
        assert_eq!(err.to_string(), "no modules");
    }

    #[test]
    fn unnormalized_table_is_rejected_by_name() {
        let text = STATIC_SCENARIO.replace("probs = [0.5, 0.5] }]\n\n[[baseline]]\nname = \"L\"", "X");
        assert!(ScenarioSpec::parse(&text).is_err());
        let text = STATIC_SCENARIO.replacen(
            "name = \"A\"\ntime = 1.0\nvalues = [0, 1]\ntable = [{ given = [], probs = [0.5, 0.5] }]",
            "name = \"A\"\ntime = 1.0\nvalues = [0, 1]\ntable = [{ given = [], probs = [0.5, 0.4] }]",
            1,
        );
        let err = ScenarioSpec::parse(&text).unwrap_err();
        assert!(err.to_string().contains("`A`"), "{err}");
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = ScenarioSpec::parse("horizon = 1.0\n[[modules]]\nname = \n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") || msg.contains("3:"), "{msg}");
    }

    #[test]
    fn later_parent_is_rejected() {
        let text = STATIC_SCENARIO.replace("parents = [\"A\", \"W\"]", "parents = [\"A\", \"K\"]");
        let err = ScenarioSpec::parse(&text).unwrap_err();
        assert!(err.to_string().contains("strictly earlier"), "{err}");
    }

    #[test]
    fn undeclared_reads_are_rejected() {
        let text = r#"
horizon = 1.0
[[modules]]
name = "C"
cap = 1.0
depends = []
marks = [{ rate = "0.1 + 0.1*B" }]
[[modules]]
name = "B"
cap = 1.0
marks = [{ rate = "0.1" }]
"#;
        let err = ScenarioSpec::parse(text).unwrap_err();
        assert!(err.to_string().contains("undeclared"), "{err}");
    }

    #[test]
    fn shared_decision_times_are_rejected() {
        let text = r#"
horizon = 1.0
[[schedules]]
name = "K"
times = [0.5]
prob = "0.5"
[[schedules]]
name = "M"
times = [0.5]
prob = "0.5"
"#;
        let err = ScenarioSpec::parse(text).unwrap_err();
        assert!(err.to_string().contains("simultaneously"), "{err}");
    }

    #[test]
    fn canonical_form_is_a_fixed_point() {
        let s = ScenarioSpec::parse(STATIC_SCENARIO).unwrap();
        let printed = s.to_toml();
        let again = ScenarioSpec::parse(&printed).unwrap();
        assert_eq!(again, s);
        assert_eq!(again.to_toml(), printed);
        assert_eq!(again.digest(), s.digest());
    }
}
