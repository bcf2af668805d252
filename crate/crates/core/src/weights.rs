//! Likelihood-ratio weights `W_t = dP_θ/dP` on `F_t`, inverse probability
//! weighted estimation and positivity diagnostics.
//!
//! The weight factorizes over intervened variables. Baseline rules and
//! scheduled decisions contribute indicator-over-probability factors. A
//! suppressed intensity module (`λ* = 0`) contributes
//! `1{no events by t} · exp(∫_0^t λ ds)`, which grows continuously between
//! events; log-weights are therefore carried as piecewise-linear paths.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::events::{Cohort, Path, Side};
use crate::expr::{RestrictedView, SlotState, StateView};
use crate::graph::LocalIndependenceGraph;
use crate::scenario::{validate_intervention, DecisionRule, InterventionSpec, ModuleKind, ScenarioError, ScenarioSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("invalid intervention: {0}")]
    InvalidIntervention(String),
    #[error("path {id}: observed {what} of `{target}` at t={time} has zero factual probability")]
    ZeroProbability {
        id: u64,
        target: String,
        what: &'static str,
        time: f64,
    },
    #[error("empty effective sample")]
    EmptyEffectiveSample,
    #[error("unknown variable `{0}`")]
    UnknownName(String),
    #[error("cohort alphabet does not match the scenario")]
    AlphabetMismatch,
}

/// A right-continuous, piecewise-linear log-weight: after knot `i` the
/// value is `values[i] + slopes[i]·(t − times[i])` until the next knot.
/// Once a value is `-∞` the path stays there.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogWeightPath {
    times: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl Default for LogWeightPath {
    fn default() -> Self {
        LogWeightPath::zero()
    }
}

impl LogWeightPath {
    pub fn zero() -> LogWeightPath {
        LogWeightPath {
            times: vec![0.0],
            values: vec![0.0],
            slopes: vec![0.0],
        }
    }

    fn last_value(&self) -> f64 {
        *self.values.last().expect("at least one knot")
    }

    /// Appends a knot at `time ≥` the last knot. Ignored once at `-∞`.
    pub fn push(&mut self, time: f64, value: f64, slope: f64) {
        if self.last_value() == f64::NEG_INFINITY {
            return;
        }
        let slope = if value == f64::NEG_INFINITY { 0.0 } else { slope };
        if *self.times.last().expect("at least one knot") == time {
            *self.values.last_mut().expect("knot") = value;
            *self.slopes.last_mut().expect("knot") = slope;
        } else {
            self.times.push(time);
            self.values.push(value);
            self.slopes.push(slope);
        }
    }

    fn knot_index(&self, t: f64) -> usize {
        self.times.partition_point(|&k| k <= t).saturating_sub(1)
    }

    pub fn value(&self, t: f64) -> f64 {
        let i = self.knot_index(t);
        let v = self.values[i];
        if v == f64::NEG_INFINITY {
            return v;
        }
        v + self.slopes[i] * (t - self.times[i]).max(0.0)
    }

    /// Slope in effect just after `t`.
    pub fn slope(&self, t: f64) -> f64 {
        self.slopes[self.knot_index(t)]
    }

    pub fn knots(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    pub fn is_step(&self) -> bool {
        self.slopes.iter().all(|&s| s == 0.0)
    }

    /// Pointwise sum, accumulated in the order of `parts`.
    pub fn sum(parts: &[&LogWeightPath]) -> LogWeightPath {
        let mut knots: Vec<f64> = parts.iter().flat_map(|p| p.times.iter().copied()).collect();
        knots.sort_by(f64::total_cmp);
        knots.dedup();
        let mut out = LogWeightPath::zero();
        for &k in &knots {
            let mut v = 0.0;
            let mut s = 0.0;
            for p in parts {
                v += p.value(k);
                s += p.slope(k);
            }
            out.push(k, v, s);
        }
        out
    }
}

/// Per-target log-weight factors and their total.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightTrajectory {
    /// `(target, log factor)` for every intervened variable, in slot order.
    pub factors: Vec<(String, LogWeightPath)>,
    pub total: LogWeightPath,
    pub final_weight: f64,
}

impl WeightTrajectory {
    pub fn weight_at(&self, t: f64) -> f64 {
        self.total.value(t).exp()
    }
}

fn state_view<'a>(values: &'a [f64], time: f64) -> SlotState<'a> {
    SlotState { values, time }
}

fn baseline_state(path: &Path) -> Vec<f64> {
    path.slot_values(0.0, Side::Left)
}

fn decision_observed(path: &Path, module: usize, s: f64) -> bool {
    path.module_events(module).any(|e| e.time == s)
}

/// Distinct times at which any module changes state.
fn event_times(path: &Path) -> Vec<f64> {
    let mut ts: Vec<f64> = path.events.iter().map(|e| e.time).collect();
    ts.dedup();
    ts
}

/// Evaluates `f` on `view`, optionally through a restriction.
fn with_view<T>(
    view: &SlotState<'_>,
    allowed: Option<&[bool]>,
    hidden: &mut BTreeSet<usize>,
    f: impl FnOnce(&dyn StateView) -> T,
) -> T {
    match allowed {
        Some(a) => {
            let rv = RestrictedView::new(view, a);
            let out = f(&rv);
            hidden.extend(rv.hidden_reads());
            out
        }
        None => f(view),
    }
}

fn table_prob(scenario: &ScenarioSpec, k: usize, value: i64, view: &dyn StateView) -> f64 {
    let spec = &scenario.baseline()[k];
    let mut given = Vec::with_capacity(spec.parent_slots.len());
    for &p in &spec.parent_slots {
        let v = view.slot(p);
        if v.is_nan() {
            return f64::NAN;
        }
        given.push(v as i64);
    }
    spec.table.prob(value, &given).unwrap_or(f64::NAN)
}

/// Log weight factor of one intervened target. `allowed` restricts every
/// state read; hidden reads are added to `hidden`.
fn target_factor(
    path: &Path,
    scenario: &ScenarioSpec,
    target: Target<'_>,
    allowed: Option<&[bool]>,
    hidden: &mut BTreeSet<usize>,
) -> Result<LogWeightPath, WeightError> {
    let mut out = LogWeightPath::zero();
    match target {
        Target::Baseline(theta, k) => {
            let rule = theta.baseline_rule(k).expect("rule exists");
            let values = baseline_state(path);
            let view = state_view(&values, 0.0);
            let observed = path.baseline[k];
            let (enforced, p) = with_view(&view, allowed, hidden, |v| {
                let e = rule.value.eval(v);
                (e, table_prob(scenario, k, observed, v))
            });
            if p == 0.0 {
                return Err(WeightError::ZeroProbability {
                    id: path.id,
                    target: rule.variable.clone(),
                    what: "value",
                    time: 0.0,
                });
            }
            let lw = if enforced.is_nan() || p.is_nan() {
                f64::NAN
            } else if enforced == observed as f64 {
                -p.ln()
            } else {
                f64::NEG_INFINITY
            };
            out.push(0.0, lw, 0.0);
        }
        Target::Module(rule, j) => match (scenario.module_kind(j), rule) {
            (ModuleKind::Scheduled(sched), _) => {
                let name = &sched.module;
                let mut acc = 0.0;
                for &s in &sched.times {
                    let values = path.slot_values(s, Side::Left);
                    let view = state_view(&values, s);
                    let (decision, p) = with_view(&view, allowed, hidden, |v| {
                        (rule.decide(name, v), scenario.jump_probability(j, v))
                    });
                    let observed = decision_observed(path, j, s);
                    let p = match p {
                        Ok(p) => p,
                        Err(e) if allowed.is_none() => return Err(e.into()),
                        Err(_) => f64::NAN,
                    };
                    let p_obs = if observed { p } else { 1.0 - p };
                    if p_obs == 0.0 {
                        return Err(WeightError::ZeroProbability {
                            id: path.id,
                            target: name.clone(),
                            what: "decision",
                            time: s,
                        });
                    }
                    acc += match decision {
                        Ok(d) if d == observed => -p_obs.ln(),
                        Ok(_) => f64::NEG_INFINITY,
                        Err(e) if allowed.is_none() => return Err(e.into()),
                        Err(_) => f64::NAN,
                    };
                    out.push(s, acc, 0.0);
                }
            }
            (ModuleKind::Intensity(_), DecisionRule::Suppress) => {
                let horizon = scenario.horizon();
                let mut knots = vec![0.0];
                knots.extend(event_times(path));
                let first_event = path.module_events(j).next().map(|e| e.time);
                let mut acc = 0.0;
                let mut buf = Vec::new();
                for (i, &a) in knots.iter().enumerate() {
                    if first_event.is_some_and(|e| e <= a) {
                        out.push(first_event.expect("checked"), f64::NEG_INFINITY, 0.0);
                        break;
                    }
                    let values = path.slot_values(a, Side::Right);
                    let view = state_view(&values, a);
                    let rate = with_view(&view, allowed, hidden, |v| scenario.rates(j, v, &mut buf));
                    let rate = match rate {
                        Ok(r) => r,
                        Err(e) if allowed.is_none() => return Err(e.into()),
                        Err(_) => f64::NAN,
                    };
                    out.push(a, acc, rate);
                    let b = knots.get(i + 1).copied().unwrap_or(horizon);
                    acc += rate * (b - a);
                }
            }
            (ModuleKind::Intensity(spec), _) => {
                return Err(WeightError::InvalidIntervention(format!(
                    "`{}` is intensity-driven; only `suppress` is supported",
                    spec.module
                )))
            }
        },
    }
    Ok(out)
}

#[derive(Clone, Copy)]
enum Target<'a> {
    Baseline(&'a InterventionSpec, usize),
    Module(&'a DecisionRule, usize),
}

/// Intervened targets in slot order.
fn targets<'a>(scenario: &ScenarioSpec, theta: &'a InterventionSpec) -> Vec<(String, usize, Target<'a>)> {
    let alphabet = scenario.alphabet();
    let nb = alphabet.baseline.len();
    let mut out: Vec<(String, usize, Target<'a>)> = theta
        .baseline_rules()
        .iter()
        .map(|r| (r.variable.clone(), r.index, Target::Baseline(theta, r.index)))
        .chain(
            theta
                .module_rules()
                .iter()
                .map(|r| (r.module.clone(), nb + r.index, Target::Module(&r.rule, r.index))),
        )
        .collect();
    out.sort_by_key(|t| t.1);
    out
}

fn check(scenario: &ScenarioSpec, theta: &InterventionSpec) -> Result<(), WeightError> {
    if let Some(v) = validate_intervention(scenario, theta).violations.first() {
        return Err(WeightError::InvalidIntervention(v.to_string()));
    }
    Ok(())
}

/// `W_t` for one path in factorized log form.
pub fn weight_trajectory(
    path: &Path,
    scenario: &ScenarioSpec,
    theta: &InterventionSpec,
) -> Result<WeightTrajectory, WeightError> {
    check(scenario, theta)?;
    trajectory_unchecked(path, scenario, theta)
}

fn trajectory_unchecked(
    path: &Path,
    scenario: &ScenarioSpec,
    theta: &InterventionSpec,
) -> Result<WeightTrajectory, WeightError> {
    let mut hidden = BTreeSet::new();
    let mut factors = Vec::new();
    for (name, _, target) in targets(scenario, theta) {
        factors.push((name, target_factor(path, scenario, target, None, &mut hidden)?));
    }
    let total = LogWeightPath::sum(&factors.iter().map(|f| &f.1).collect::<Vec<_>>());
    let final_weight = total.value(scenario.horizon()).exp();
    Ok(WeightTrajectory {
        factors,
        total,
        final_weight,
    })
}

/// Weight trajectories for every path of a cohort, in path order.
pub fn cohort_weights(
    cohort: &Cohort,
    scenario: &ScenarioSpec,
    theta: &InterventionSpec,
) -> Result<Vec<WeightTrajectory>, WeightError> {
    if *cohort.alphabet != **scenario.alphabet() {
        return Err(WeightError::AlphabetMismatch);
    }
    check(scenario, theta)?;
    cohort
        .paths
        .par_iter()
        .map(|p| trajectory_unchecked(p, scenario, theta))
        .collect()
}

/// A path functional `h`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Functional {
    /// Value of a baseline variable or module at `t`.
    StateAt {
        name: String,
        t: f64,
    },
    /// `1{module has an event in (0, t]}`.
    EventBy {
        module: String,
        t: f64,
    },
    /// `1{module has no event in (0, t]}`.
    NoEventBy {
        module: String,
        t: f64,
    },
    /// `∫_0^t V_s ds`.
    TimeIntegral {
        module: String,
        t: f64,
    },
    Product(Vec<Functional>),
}

impl Functional {
    pub fn eval(&self, path: &Path) -> Result<f64, WeightError> {
        let module = |name: &str| {
            path.alphabet
                .module_index(name)
                .ok_or_else(|| WeightError::UnknownName(name.to_string()))
        };
        Ok(match self {
            Functional::StateAt { name, t } => path
                .value_of(name, *t, Side::Right)
                .ok_or_else(|| WeightError::UnknownName(name.clone()))?,
            Functional::EventBy { module: m, t } => {
                let j = module(m)?;
                f64::from(u8::from(path.module_events(j).any(|e| e.time <= *t)))
            }
            Functional::NoEventBy { module: m, t } => {
                let j = module(m)?;
                f64::from(u8::from(!path.module_events(j).any(|e| e.time <= *t)))
            }
            Functional::TimeIntegral { module: m, t } => {
                let j = module(m)?;
                let mut level = path.alphabet.modules[j].initial as f64;
                let mut last = 0.0;
                let mut acc = 0.0;
                for e in path.module_events(j).take_while(|e| e.time <= *t) {
                    acc += level * (e.time - last);
                    level += e.delta as f64;
                    last = e.time;
                }
                acc + level * (t - last)
            }
            Functional::Product(parts) => {
                let mut acc = 1.0;
                for p in parts {
                    acc *= p.eval(path)?;
                }
                acc
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Normalization {
    /// Horvitz–Thompson: `(1/n) Σ W h`.
    Raw,
    /// Hájek: `Σ W h / Σ W`.
    SelfNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

/// Weighted mean of `h` with delta-method standard error.
pub fn weighted_mean(weights: &[f64], h: &[f64], normalization: Normalization) -> Result<Estimate, WeightError> {
    let n = weights.len() as f64;
    let sum_w: f64 = weights.iter().sum();
    if sum_w.is_nan() || sum_w <= 0.0 {
        return Err(WeightError::EmptyEffectiveSample);
    }
    match normalization {
        Normalization::Raw => {
            let prods: Vec<f64> = weights.iter().zip(h).map(|(w, x)| w * x).collect();
            let mean = prods.iter().sum::<f64>() / n;
            let var = if n > 1.0 {
                prods.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            Ok(Estimate {
                value: mean,
                se: (var / n).sqrt(),
            })
        }
        Normalization::SelfNormalized => {
            let mean = weights.iter().zip(h).map(|(w, x)| w * x).sum::<f64>() / sum_w;
            let ss: f64 = weights.iter().zip(h).map(|(w, x)| (w * (x - mean)).powi(2)).sum();
            Ok(Estimate {
                value: mean,
                se: ss.sqrt() / sum_w,
            })
        }
    }
}

/// IPW estimate of `E_{P_θ}[h]` from a factual cohort, weighting by `W_T`.
pub fn ipw_expectation(
    cohort: &Cohort,
    scenario: &ScenarioSpec,
    theta: &InterventionSpec,
    functional: &Functional,
    normalization: Normalization,
) -> Result<Estimate, WeightError> {
    let w = cohort_weights(cohort, scenario, theta)?;
    let weights: Vec<f64> = w.iter().map(|x| x.final_weight).collect();
    ipw_from_weights(cohort, &weights, functional, normalization)
}

/// As [`ipw_expectation`] with precomputed final weights.
pub fn ipw_from_weights(
    cohort: &Cohort,
    weights: &[f64],
    functional: &Functional,
    normalization: Normalization,
) -> Result<Estimate, WeightError> {
    let h = cohort
        .paths
        .iter()
        .map(|p| functional.eval(p))
        .collect::<Result<Vec<_>, _>>()?;
    weighted_mean(weights, &h, normalization)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightDiagnostics {
    pub grid: Vec<f64>,
    /// Cohort mean of `W_t` at each grid time.
    pub mean: Vec<f64>,
    /// Monte Carlo standard error of each mean.
    pub se: Vec<f64>,
    pub max_weight: f64,
    /// `(Σ W_T)² / Σ W_T²`.
    pub n_eff: f64,
    pub zero_weights: usize,
}

pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

pub fn weight_diagnostics(
    cohort: &Cohort,
    scenario: &ScenarioSpec,
    theta: &InterventionSpec,
    grid: &[f64],
) -> Result<WeightDiagnostics, WeightError> {
    let w = cohort_weights(cohort, scenario, theta)?;
    Ok(diagnostics_from(&w, grid))
}

pub fn diagnostics_from(w: &[WeightTrajectory], grid: &[f64]) -> WeightDiagnostics {
    let n = w.len() as f64;
    let mut mean = Vec::with_capacity(grid.len());
    let mut se = Vec::with_capacity(grid.len());
    for &t in grid {
        let vals: Vec<f64> = w.iter().map(|x| x.weight_at(t)).collect();
        let m = vals.iter().sum::<f64>() / n;
        let var = if n > 1.0 {
            vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        mean.push(m);
        se.push((var / n).sqrt());
    }
    let finals: Vec<f64> = w.iter().map(|x| x.final_weight).collect();
    WeightDiagnostics {
        grid: grid.to_vec(),
        mean,
        se,
        max_weight: finals.iter().copied().fold(0.0, f64::max),
        n_eff: effective_sample_size(&finals),
        zero_weights: finals.iter().filter(|&&x| x == 0.0).count(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositivityReport {
    /// Minimum over the cohort of `P(V = θV | past)` for intervened
    /// baseline variables.
    pub baseline_min: Option<f64>,
    /// Minimum over decision times of `P(decision = θ-decision | past)`
    /// among paths consistent with `θ` so far.
    pub decision_min: Option<f64>,
    /// Number of paths with `W_T = 0`.
    pub zero_weight_paths: usize,
    /// Minimum of the same probabilities over the scenario's state grid;
    /// `None` when no intervened decision exists or the grid is unbounded.
    pub analytic_min: Option<f64>,
    pub flags: Vec<String>,
    pub pass: bool,
}

fn min_opt(a: Option<f64>, b: f64) -> Option<f64> {
    Some(a.map_or(b, |x| x.min(b)))
}

/// Empirical and analytic lower bounds on the probabilities whose
/// positivity the weights require.
pub fn positivity_check(cohort: &Cohort, scenario: &ScenarioSpec, theta: &InterventionSpec) -> PositivityReport {
    let mut flags = Vec::new();
    if let Some(v) = validate_intervention(scenario, theta).violations.first() {
        flags.push(format!("invalid intervention: {v}"));
    }
    let mut baseline_min: Option<f64> = None;
    let mut decision_min: Option<f64> = None;
    let mut zero_weight_paths = 0;

    for path in &cohort.paths {
        let values = baseline_state(path);
        let view = state_view(&values, 0.0);
        let mut consistent = true;
        for rule in theta.baseline_rules() {
            let enforced = rule.value.eval(&view);
            let p = if enforced.fract() == 0.0 {
                table_prob(scenario, rule.index, enforced as i64, &view)
            } else {
                f64::NAN
            };
            let p = if p.is_nan() { 0.0 } else { p };
            baseline_min = min_opt(baseline_min, p);
            consistent &= path.baseline[rule.index] as f64 == enforced;
        }
        let mut decisions: Vec<(f64, usize, &DecisionRule)> = Vec::new();
        for r in theta.module_rules() {
            if let ModuleKind::Scheduled(s) = scenario.module_kind(r.index) {
                decisions.extend(s.times.iter().map(|&t| (t, r.index, &r.rule)));
            } else if decision_observed_any(path, r.index) {
                consistent = false;
            }
        }
        decisions.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (s, j, rule) in decisions {
            if !consistent {
                break;
            }
            let values = path.slot_values(s, Side::Left);
            let view = state_view(&values, s);
            let name = &scenario.alphabet().modules[j].name;
            let (Ok(d), Ok(p)) = (rule.decide(name, &view), scenario.jump_probability(j, &view)) else {
                flags.push(format!("path {}: `{name}` could not be evaluated at t={s}", path.id));
                continue;
            };
            let p_theta = if d { p } else { 1.0 - p };
            decision_min = min_opt(decision_min, p_theta);
            consistent &= decision_observed(path, j, s) == d;
        }
        if !consistent {
            zero_weight_paths += 1;
        }
    }

    let analytic_min = analytic_positivity(scenario, theta, &mut flags);
    if baseline_min == Some(0.0) {
        flags.push("some path has zero probability of the enforced baseline value".into());
    }
    if decision_min == Some(0.0) {
        flags.push("some θ-consistent path has zero probability of the enforced decision".into());
    }
    if analytic_min == Some(0.0) {
        flags.push("a reachable state gives the enforced value zero probability".into());
    }
    if !cohort.is_empty() && zero_weight_paths == cohort.len() {
        flags.push("every path has zero weight".into());
    }
    let pass = flags.is_empty();
    PositivityReport {
        baseline_min,
        decision_min,
        zero_weight_paths,
        analytic_min,
        flags,
        pass,
    }
}

fn decision_observed_any(path: &Path, j: usize) -> bool {
    path.module_events(j).next().is_some()
}

/// Minimum enforced-value probability over a finite grid of states that
/// covers every state reachable under `θ`.
fn analytic_positivity(scenario: &ScenarioSpec, theta: &InterventionSpec, flags: &mut Vec<String>) -> Option<f64> {
    let alphabet = scenario.alphabet();
    let nb = alphabet.baseline.len();
    let mut min: Option<f64> = None;

    // Baseline configurations with positive mass, intervened values enforced.
    let mut configs: Vec<Vec<i64>> = vec![Vec::new()];
    for (k, spec) in scenario.baseline().iter().enumerate() {
        let mut next = Vec::new();
        for c in &configs {
            let probs = spec.distribution(c).to_vec();
            match theta.baseline_rule(k) {
                Some(rule) => {
                    let mut values: Vec<f64> = c.iter().map(|&v| v as f64).collect();
                    values.resize(alphabet.n_slots(), f64::NAN);
                    let view = state_view(&values, 0.0);
                    let enforced = rule.value.eval(&view);
                    let idx = (enforced.fract() == 0.0)
                        .then(|| spec.table.value_index(enforced as i64))
                        .flatten();
                    let p = idx.map_or(0.0, |i| probs[i]);
                    if p == 0.0 {
                        flags.push(format!(
                            "`{}` = {enforced} has zero probability given {:?}",
                            spec.name(),
                            &c[..]
                        ));
                    }
                    min = min_opt(min, p);
                    let mut c2 = c.clone();
                    c2.push(enforced as i64);
                    next.push(c2);
                }
                None => {
                    for (i, &v) in spec.table.values.iter().enumerate() {
                        if probs[i] > 0.0 {
                            let mut c2 = c.clone();
                            c2.push(v);
                            next.push(c2);
                        }
                    }
                }
            }
        }
        configs = next;
    }

    // Module state ranges.
    let mut ranges: Vec<Option<Vec<i64>>> = Vec::with_capacity(scenario.n_modules());
    for j in 0..scenario.n_modules() {
        let sig = &alphabet.modules[j];
        ranges.push(match scenario.module_kind(j) {
            ModuleKind::Scheduled(s) => Some((0..=s.times.len() as i64).map(|k| s.initial + k * s.delta).collect()),
            ModuleKind::Intensity(spec)
                if spec.absorbing || matches!(theta.module_rule(j), Some(DecisionRule::Suppress)) =>
            {
                let mut r = vec![spec.initial];
                if spec.absorbing {
                    r.extend(sig.marks.iter().map(|m| spec.initial + m.delta));
                }
                r.sort_unstable();
                r.dedup();
                Some(r)
            }
            ModuleKind::Intensity(_) => None,
        });
    }

    for r in theta.module_rules() {
        let ModuleKind::Scheduled(sched) = scenario.module_kind(r.index) else {
            continue;
        };
        let mut reads: BTreeSet<usize> = sched
            .prob
            .source()
            .references()
            .iter()
            .chain(r.rule.reads().iter())
            .filter_map(|n| alphabet.slot(n))
            .filter(|&s| s >= nb)
            .collect();
        reads.insert(nb + r.index);
        let mut module_grid: Vec<Vec<(usize, i64)>> = vec![Vec::new()];
        for &slot in &reads {
            let Some(range) = &ranges[slot - nb] else {
                flags.push(format!(
                    "`{}` reads the unbounded module `{}`; analytic check skipped",
                    sched.module,
                    alphabet.slot_name(slot)
                ));
                return min;
            };
            module_grid = module_grid
                .into_iter()
                .flat_map(|prefix| {
                    range.iter().map(move |&v| {
                        let mut p = prefix.clone();
                        p.push((slot, v));
                        p
                    })
                })
                .collect();
        }
        for &s in &sched.times {
            for c in &configs {
                for g in &module_grid {
                    let mut values: Vec<f64> = c.iter().map(|&v| v as f64).collect();
                    values.extend(alphabet.modules.iter().map(|m| m.initial as f64));
                    for &(slot, v) in g {
                        values[slot] = v as f64;
                    }
                    let view = state_view(&values, s);
                    let (Ok(d), Ok(p)) = (
                        r.rule.decide(&sched.module, &view),
                        scenario.jump_probability(r.index, &view),
                    ) else {
                        continue;
                    };
                    min = min_opt(min, if d { p } else { 1.0 - p });
                }
            }
        }
    }
    min
}

/// Result of recomputing log factors from `cl(V)`-restricted history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorizationResult {
    pub ok: bool,
    /// Largest `|full − restricted|` over factors and evaluation times.
    pub max_discrepancy: f64,
    /// Largest `|Σ factors − total|`.
    pub sum_discrepancy: f64,
    /// `(target, hidden slot name)` pairs read outside the closure.
    pub hidden_reads: Vec<(String, String)>,
}

const FACTOR_TOL: f64 = 1e-10;

fn discrepancy(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else if a.is_nan() || b.is_nan() || a.is_infinite() || b.is_infinite() {
        f64::INFINITY
    } else {
        (a - b).abs()
    }
}

fn allowed_slots(scenario: &ScenarioSpec, graph: &LocalIndependenceGraph, name: &str) -> Vec<bool> {
    let alphabet = scenario.alphabet();
    let closure = graph
        .closure(name)
        .unwrap_or_else(|_| BTreeSet::from([name.to_string()]));
    (0..alphabet.n_slots())
        .map(|s| closure.contains(alphabet.slot_name(s)))
        .collect()
}

/// Log factor of the factual likelihood of one variable relative to a
/// reference law: uniform baseline values, unit-rate Poisson marks and fair
/// coin decisions.
fn likelihood_factor(
    path: &Path,
    scenario: &ScenarioSpec,
    slot: usize,
    allowed: Option<&[bool]>,
    hidden: &mut BTreeSet<usize>,
) -> Result<LogWeightPath, WeightError> {
    let alphabet = scenario.alphabet();
    let nb = alphabet.baseline.len();
    let mut out = LogWeightPath::zero();
    if slot < nb {
        let values = baseline_state(path);
        let view = state_view(&values, 0.0);
        let p = with_view(&view, allowed, hidden, |v| {
            table_prob(scenario, slot, path.baseline[slot], v)
        });
        let size = scenario.baseline()[slot].table.values.len() as f64;
        out.push(0.0, p.ln() + size.ln(), 0.0);
        return Ok(out);
    }
    let j = slot - nb;
    let lift = |r: Result<f64, ScenarioError>| -> Result<f64, WeightError> {
        match r {
            Ok(x) => Ok(x),
            Err(e) if allowed.is_none() => Err(e.into()),
            Err(_) => Ok(f64::NAN),
        }
    };
    match scenario.module_kind(j) {
        ModuleKind::Scheduled(sched) => {
            let mut acc = 0.0;
            for &s in &sched.times {
                let values = path.slot_values(s, Side::Left);
                let view = state_view(&values, s);
                let p = lift(with_view(&view, allowed, hidden, |v| scenario.jump_probability(j, v)))?;
                let p_obs = if decision_observed(path, j, s) { p } else { 1.0 - p };
                acc += p_obs.ln() + std::f64::consts::LN_2;
                out.push(s, acc, 0.0);
            }
        }
        ModuleKind::Intensity(spec) => {
            let horizon = scenario.horizon();
            let mut knots = vec![0.0];
            knots.extend(event_times(path));
            let n_marks = spec.marks.len() as f64;
            let mut acc = 0.0;
            let mut buf = Vec::new();
            for (i, &a) in knots.iter().enumerate() {
                if i > 0 {
                    if let Some(e) = path.module_events(j).find(|e| e.time == a) {
                        // The jump reads the rate in effect just before it.
                        let values = path.slot_values(a, Side::Left);
                        let view = state_view(&values, a);
                        lift(with_view(&view, allowed, hidden, |v| scenario.rates(j, v, &mut buf)))?;
                        let m = spec.marks.iter().position(|m| m.label == e.mark).unwrap_or(0);
                        acc += buf.get(m).copied().unwrap_or(f64::NAN).ln();
                    }
                }
                let values = path.slot_values(a, Side::Right);
                let view = state_view(&values, a);
                let rate = lift(with_view(&view, allowed, hidden, |v| scenario.rates(j, v, &mut buf)))?;
                let slope = n_marks - rate;
                out.push(a, acc, slope);
                let b = knots.get(i + 1).copied().unwrap_or(horizon);
                acc += slope * (b - a);
            }
        }
    }
    Ok(out)
}

fn compare_paths(a: &LogWeightPath, b: &LogWeightPath, horizon: f64) -> f64 {
    let mut times: Vec<f64> = a.knots().iter().chain(b.knots()).copied().collect();
    times.push(horizon);
    times
        .iter()
        .map(|&t| discrepancy(a.value(t), b.value(t)))
        .fold(0.0, f64::max)
}

/// Recomputes every factual likelihood factor and every weight factor using
/// only the history of `cl(V)` in `graph`, and compares with the
/// full-history computation. Also checks that the weight factors sum to the
/// total.
pub fn factorization_check(
    path: &Path,
    scenario: &ScenarioSpec,
    theta: &InterventionSpec,
    graph: &LocalIndependenceGraph,
) -> Result<FactorizationResult, WeightError> {
    check(scenario, theta)?;
    let alphabet = scenario.alphabet();
    let horizon = scenario.horizon();
    let mut max_discrepancy: f64 = 0.0;
    let mut hidden_reads = Vec::new();
    let mut record = |name: &str, hidden: BTreeSet<usize>| {
        for s in hidden {
            hidden_reads.push((name.to_string(), alphabet.slot_name(s).to_string()));
        }
    };

    for slot in 0..alphabet.n_slots() {
        let name = alphabet.slot_name(slot);
        let allowed = allowed_slots(scenario, graph, name);
        let mut none = BTreeSet::new();
        let full = likelihood_factor(path, scenario, slot, None, &mut none)?;
        let mut hidden = BTreeSet::new();
        let restricted = likelihood_factor(path, scenario, slot, Some(&allowed), &mut hidden)?;
        max_discrepancy = max_discrepancy.max(compare_paths(&full, &restricted, horizon));
        record(name, hidden);
    }

    let trajectory = trajectory_unchecked(path, scenario, theta)?;
    for ((name, _, target), (_, full)) in targets(scenario, theta).into_iter().zip(&trajectory.factors) {
        let allowed = allowed_slots(scenario, graph, &name);
        let mut hidden = BTreeSet::new();
        let restricted = target_factor(path, scenario, target, Some(&allowed), &mut hidden)?;
        max_discrepancy = max_discrepancy.max(compare_paths(full, &restricted, horizon));
        record(&name, hidden);
    }

    let mut times: Vec<f64> = trajectory.total.knots().to_vec();
    times.push(horizon);
    let mut sum_discrepancy: f64 = 0.0;
    for &t in &times {
        let s: f64 = trajectory.factors.iter().map(|f| f.1.value(t)).sum();
        sum_discrepancy = sum_discrepancy.max(discrepancy(s, trajectory.total.value(t)));
    }

    hidden_reads.sort();
    hidden_reads.dedup();
    Ok(FactorizationResult {
        ok: max_discrepancy <= FACTOR_TOL && sum_discrepancy <= FACTOR_TOL && hidden_reads.is_empty(),
        max_discrepancy,
        sum_discrepancy,
        hidden_reads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::simulate_cohort;

    const COIN: &str = r#"
horizon = 1.0
[[baseline]]
name = "A"
time = 0.0
values = [0, 1]
table = [{ given = [], probs = [0.5, 0.5] }]
[[modules]]
name = "B"
absorbing = true
depends = ["A"]
cap = 2.0
marks = [{ rate = "0.3 + 0.4*A" }]
"#;

    fn setup(theta: &str) -> (ScenarioSpec, InterventionSpec) {
        let s = ScenarioSpec::parse(COIN).unwrap();
        let th = InterventionSpec::parse(theta, &s).unwrap();
        (s, th)
    }

    #[test]
    fn identity_weights_are_one() {
        let (s, th) = setup("");
        let c = simulate_cohort(&s, 200, 1).unwrap();
        let w = cohort_weights(&c, &s, &th).unwrap();
        assert!(w.iter().all(|x| x.final_weight == 1.0 && x.factors.is_empty()));
        let d = diagnostics_from(&w, &[0.5, 1.0]);
        assert_eq!(d.n_eff, 200.0);
        let h = Functional::EventBy {
            module: "B".into(),
            t: 1.0,
        };
        let est = ipw_expectation(&c, &s, &th, &h, Normalization::SelfNormalized).unwrap();
        let freq = c.paths.iter().filter(|p| !p.events.is_empty()).count() as f64 / 200.0;
        assert_eq!(est.value, freq);
    }

    #[test]
    fn baseline_coin_weights() {
        let (s, th) = setup("[[baseline]]\nvariable = \"A\"\nvalue = \"1\"\n");
        let c = simulate_cohort(&s, 20_000, 2).unwrap();
        let w = cohort_weights(&c, &s, &th).unwrap();
        for (p, x) in c.paths.iter().zip(&w) {
            let expected = if p.baseline[0] == 1 { 2.0 } else { 0.0 };
            assert!((x.final_weight - expected).abs() < 1e-12);
        }
        let h = Functional::StateAt {
            name: "A".into(),
            t: 1.0,
        };
        let est = ipw_expectation(&c, &s, &th, &h, Normalization::Raw).unwrap();
        let mean_w = w.iter().map(|x| x.final_weight).sum::<f64>() / 20_000.0;
        assert!((est.value - mean_w).abs() < 1e-12);
        assert!((est.value - 1.0).abs() < 0.03);
    }

    #[test]
    fn half_cohort_weights_halve_n_eff() {
        let w: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 2.0 } else { 0.0 }).collect();
        assert_eq!(effective_sample_size(&w), 50.0);
    }

    #[test]
    fn all_zero_weights_is_an_error() {
        let err = weighted_mean(&[0.0, 0.0], &[1.0, 0.0], Normalization::SelfNormalized).unwrap_err();
        assert_eq!(err.to_string(), "empty effective sample");
    }

    #[test]
    fn suppress_weight_is_girsanov() {
        let (s, th) = setup("[[modules]]\nmodule = \"B\"\nsuppress = true\n");
        let c = simulate_cohort(&s, 300, 5).unwrap();
        for p in &c.paths {
            let w = weight_trajectory(p, &s, &th).unwrap();
            let rate = 0.3 + 0.4 * p.baseline[0] as f64;
            match p.events.first() {
                None => assert!((w.final_weight - rate.exp()).abs() < 1e-12),
                Some(e) => {
                    assert_eq!(w.final_weight, 0.0);
                    let before = w.total.value(e.time * 0.5);
                    assert!((before - rate * e.time * 0.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn log_weight_sum_and_absorption() {
        let mut a = LogWeightPath::zero();
        a.push(0.5, 1.0, 2.0);
        a.push(0.7, f64::NEG_INFINITY, 3.0);
        a.push(0.9, 4.0, 0.0);
        assert_eq!(a.value(0.6), 1.0 + 2.0 * 0.1);
        assert_eq!(a.value(1.0), f64::NEG_INFINITY);
        let mut b = LogWeightPath::zero();
        b.push(0.0, 0.0, 1.0);
        let s = LogWeightPath::sum(&[&a, &b]);
        assert!((s.value(0.6) - (1.2 + 0.6)).abs() < 1e-15);
        assert_eq!(s.value(0.8), f64::NEG_INFINITY);
    }
}
