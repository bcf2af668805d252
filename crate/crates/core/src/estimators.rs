//! Aalen additive hazards regression and the modified sequential
//! G-estimator.
//!
//! Both estimators sweep the pooled event times once. The design matrix
//! `Σ Y_i x_i x_iᵀ` is maintained incrementally as individuals change state,
//! so a fit costs `O((n + events)·p²)` plus one `p × p` solve per outcome
//! event time.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::events::{Alphabet, Cohort, Regime, StepFunction};
use crate::expr::SlotState;
use crate::scenario::{DecisionRule, InterventionSpec, ModuleKind, ScenarioSpec};
use crate::simulate::individual_rng;

/// Largest condition number accepted for a per-event design matrix.
pub const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("unknown module `{0}`")]
    UnknownModule(String),
    #[error("missing required variable `{0}`")]
    MissingVariable(String),
    #[error("design degenerate: {0}")]
    DesignDegenerate(String),
    #[error("intervention not of the required form: {0}")]
    InterventionForm(String),
    #[error("empty cohort")]
    EmptyCohort,
}

/// A predictable covariate: the intercept or the left-limit value of a
/// baseline variable or module.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Covariate {
    Intercept,
    Slot { label: String, slot: usize },
}

impl Covariate {
    /// Parses `1`, a variable name, or `<module>minus` (the explicit
    /// left-limit spelling of a module's state).
    pub fn parse(label: &str, alphabet: &Alphabet) -> Result<Covariate, EstimatorError> {
        let label = label.trim();
        if label == "1" {
            return Ok(Covariate::Intercept);
        }
        let slot = alphabet
            .slot(label)
            .or_else(|| {
                label
                    .strip_suffix("minus")
                    .and_then(|m| alphabet.module_index(m).map(|j| alphabet.module_slot(j)))
            })
            .ok_or_else(|| EstimatorError::UnknownCovariate(label.to_string()))?;
        Ok(Covariate::Slot {
            label: label.to_string(),
            slot,
        })
    }

    pub fn parse_list(list: &str, alphabet: &Alphabet) -> Result<Vec<Covariate>, EstimatorError> {
        list.split(',').map(|c| Covariate::parse(c, alphabet)).collect()
    }

    pub fn label(&self) -> &str {
        match self {
            Covariate::Intercept => "1",
            Covariate::Slot { label, .. } => label,
        }
    }

    fn value(&self, values: &[f64]) -> f64 {
        match self {
            Covariate::Intercept => 1.0,
            Covariate::Slot { slot, .. } => values[*slot],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AalenFit {
    pub labels: Vec<String>,
    /// Cumulative coefficients `Ψ̂`, one per covariate.
    #[serde(skip)]
    pub coefficients: Vec<StepFunction>,
    /// Cumulative optional-variation variance of each coefficient.
    #[serde(skip)]
    pub variances: Vec<StepFunction>,
    /// Outcome event times whose increment was skipped as singular.
    pub skipped: Vec<f64>,
    /// `(time, at-risk count)` at every outcome event time.
    pub at_risk: Vec<(f64, usize)>,
}

impl AalenFit {
    pub fn coefficient(&self, label: &str) -> Option<&StepFunction> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|k| &self.coefficients[k])
    }

    pub fn se(&self, k: usize, t: f64) -> f64 {
        self.variances[k].value(t).max(0.0).sqrt()
    }
}

/// Pooled events of a cohort as `(time, individual, module, delta)`, ordered
/// by time then individual.
fn pooled_events(cohort: &Cohort) -> Vec<(f64, usize, usize, i64)> {
    let mut ev: Vec<(f64, usize, usize, i64)> = cohort
        .paths
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.events.iter().map(move |e| (e.time, i, e.module, e.delta)))
        .collect();
    ev.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ev
}

/// Groups consecutive entries with equal time.
fn time_groups<T>(ev: &[(f64, T, usize, i64)]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for k in 1..=ev.len() {
        if k == ev.len() || ev[k].0 != ev[start].0 {
            out.push((start, k));
            start = k;
        }
    }
    out
}

/// Inverse of a symmetric positive definite `p × p` matrix (row-major), or
/// `None` when its condition number exceeds [`CONDITION_LIMIT`].
pub fn guarded_inverse(m: &[f64], p: usize) -> Option<Vec<f64>> {
    match p {
        0 => None,
        1 => (m[0] > 0.0).then(|| vec![1.0 / m[0]]),
        2 => {
            let (a, b, d) = (m[0], m[1], m[3]);
            let half_tr = 0.5 * (a + d);
            let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            let (hi, lo) = (half_tr + disc, half_tr - disc);
            if lo.is_nan() || lo <= 0.0 || hi / lo > CONDITION_LIMIT {
                return None;
            }
            let det = a * d - b * b;
            Some(vec![d / det, -b / det, -b / det, a / det])
        }
        _ => {
            let mat = DMatrix::from_row_slice(p, p, m);
            let eig = mat.clone().symmetric_eigen();
            let hi = eig.eigenvalues.max();
            let lo = eig.eigenvalues.min();
            if lo.is_nan() || lo <= 0.0 || hi / lo > CONDITION_LIMIT {
                return None;
            }
            let inv = mat.try_inverse()?;
            Some(inv.transpose().as_slice().to_vec())
        }
    }
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let p = v.len();
    (0..p).map(|r| (0..p).map(|c| m[r * p + c] * v[c]).sum()).collect()
}

fn add_outer(acc: &mut [f64], x: &[f64], w: f64) {
    let p = x.len();
    for r in 0..p {
        for c in 0..p {
            acc[r * p + c] += w * x[r] * x[c];
        }
    }
}

struct Individuals {
    values: Vec<Vec<f64>>,
    initial: Vec<f64>,
    risk_slots: Vec<usize>,
}

impl Individuals {
    fn new(cohort: &Cohort, risk_modules: &[usize]) -> Individuals {
        let alphabet = &cohort.alphabet;
        let values = cohort
            .paths
            .iter()
            .map(|p| p.slot_values(0.0, crate::events::Side::Left))
            .collect();
        let risk_slots: Vec<usize> = risk_modules.iter().map(|&j| alphabet.module_slot(j)).collect();
        let initial = risk_modules
            .iter()
            .map(|&j| alphabet.modules[j].initial as f64)
            .collect();
        Individuals {
            values,
            initial,
            risk_slots,
        }
    }

    fn at_risk(&self, i: usize) -> bool {
        self.risk_slots
            .iter()
            .zip(&self.initial)
            .all(|(&s, &init)| self.values[i][s] == init)
    }
}

fn module_index(alphabet: &Alphabet, name: &str) -> Result<usize, EstimatorError> {
    alphabet
        .module_index(name)
        .ok_or_else(|| EstimatorError::UnknownModule(name.to_string()))
}

/// Aalen additive hazards fit of `outcome` on `covariates`. Individuals are
/// at risk while `outcome` and every `censor` module are in their initial
/// state; only at-risk outcome events count.
pub fn aalen_fit(
    cohort: &Cohort,
    outcome: &str,
    covariates: &[Covariate],
    censor: &[&str],
) -> Result<AalenFit, EstimatorError> {
    let alphabet = cohort.alphabet.clone();
    let out_j = module_index(&alphabet, outcome)?;
    let mut risk = vec![out_j];
    for c in censor {
        risk.push(module_index(&alphabet, c)?);
    }
    let p = covariates.len();
    let mut ind = Individuals::new(cohort, &risk);
    let row = |values: &[f64]| -> Vec<f64> { covariates.iter().map(|c| c.value(values)).collect() };

    let mut design = vec![0.0; p * p];
    let mut n_risk = 0usize;
    for i in 0..cohort.len() {
        if ind.at_risk(i) {
            add_outer(&mut design, &row(&ind.values[i]), 1.0);
            n_risk += 1;
        }
    }

    let events = pooled_events(cohort);
    let mut coef_incs: Vec<Vec<(f64, f64)>> = vec![Vec::new(); p];
    let mut var_incs: Vec<Vec<(f64, f64)>> = vec![Vec::new(); p];
    let mut skipped = Vec::new();
    let mut at_risk = Vec::new();

    for (start, end) in time_groups(&events) {
        let s = events[start].0;
        let mut dn = vec![0.0; p];
        let mut dnn = vec![0.0; p * p];
        let mut count = 0;
        for &(_, i, j, _) in &events[start..end] {
            if j == out_j && ind.at_risk(i) {
                let x = row(&ind.values[i]);
                for (a, b) in dn.iter_mut().zip(&x) {
                    *a += b;
                }
                add_outer(&mut dnn, &x, 1.0);
                count += 1;
            }
        }
        if count > 0 {
            at_risk.push((s, n_risk));
            // Columns that vanish on the whole risk set carry no information
            // and get a zero increment.
            let active: Vec<usize> = (0..p).filter(|&k| design[k * p + k] > 0.0).collect();
            let q = active.len();
            let sub = |m: &[f64]| -> Vec<f64> {
                active
                    .iter()
                    .flat_map(|&a| active.iter().map(move |&b| m[a * p + b]))
                    .collect()
            };
            match guarded_inverse(&sub(&design), q) {
                Some(inv) if q > 0 => {
                    let dn_a: Vec<f64> = active.iter().map(|&k| dn[k]).collect();
                    let dnn_a = sub(&dnn);
                    let inc = mat_vec(&inv, &dn_a);
                    for (r, &k) in active.iter().enumerate() {
                        coef_incs[k].push((s, inc[r]));
                        // (S⁻¹ dNN S⁻¹)_kk
                        let mut v = 0.0;
                        for a in 0..q {
                            for b in 0..q {
                                v += inv[r * q + a] * dnn_a[a * q + b] * inv[b * q + r];
                            }
                        }
                        var_incs[k].push((s, v));
                    }
                }
                _ => skipped.push(s),
            }
        }
        for &(_, i, j, delta) in &events[start..end] {
            let slot = alphabet.module_slot(j);
            if ind.at_risk(i) {
                add_outer(&mut design, &row(&ind.values[i]), -1.0);
                n_risk -= 1;
            }
            ind.values[i][slot] += delta as f64;
            if ind.at_risk(i) {
                add_outer(&mut design, &row(&ind.values[i]), 1.0);
                n_risk += 1;
            }
        }
    }

    if at_risk.is_empty() {
        log::warn!("no at-risk `{outcome}` events; the fit is identically zero");
    }
    let step = |incs: Vec<(f64, f64)>| StepFunction::from_increments(0.0, incs).expect("finite event times");
    Ok(AalenFit {
        labels: covariates.iter().map(|c| c.label().to_string()).collect(),
        coefficients: coef_incs.into_iter().map(step).collect(),
        variances: var_incs.into_iter().map(step).collect(),
        skipped,
        at_risk,
    })
}

/// Variable names used by the sequential G-estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GcdeConfig {
    pub treatment: String,
    pub covariate: String,
    pub mediator: String,
    pub outcome: String,
    pub censor: String,
}

impl Default for GcdeConfig {
    fn default() -> Self {
        GcdeConfig {
            treatment: "A".into(),
            covariate: "L".into(),
            mediator: "K".into(),
            outcome: "B".into(),
            censor: "C".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GcdeFit {
    #[serde(skip)]
    pub gamma0: StepFunction,
    #[serde(skip)]
    pub gamma_a: StepFunction,
    #[serde(skip)]
    pub psi_k: StepFunction,
    pub stage1: AalenFit,
    /// Outcome event times skipped as singular in the weighted stage.
    pub skipped: Vec<f64>,
    /// `(time, at risk with treatment 0, at risk with treatment ≠ 0)`.
    pub at_risk: Vec<(f64, usize, usize)>,
}

#[derive(Default, Clone, Copy)]
struct LevelSums {
    s00: f64,
    s01: f64,
    s11: f64,
    m0: f64,
    m1: f64,
}

impl LevelSums {
    fn add(&mut self, a: f64, w: f64) {
        self.s00 += w;
        self.s01 += w * a;
        self.s11 += w * a * a;
        self.m0 += w;
        self.m1 += w * a;
    }
}

/// The modified sequential G-estimator.
///
/// Stage 1 fits `(1, A, L, K_{t−})` to obtain `Ψ̂ᴷ`. Stage 2 weights each
/// at-risk individual by `Ĥ_i(t) = exp(∫_0^{t−} K_{i,s−} dΨ̂ᴷ_s)`. Stage 3
/// regresses on `(1, A)` with weights `Ĥ`, removing the mediator
/// contribution `K_{s−} dΨ̂ᴷ_s`.
///
/// Writing `Ĥ_i(t) = exp(K_i(t−)·Ψ̂ᴷ(t−)) · b_i` with `b_i` constant
/// between the individual's own mediator jumps lets the weighted design be
/// kept as sums per mediator level.
pub fn sequential_g_fit(cohort: &Cohort, config: &GcdeConfig) -> Result<GcdeFit, EstimatorError> {
    if cohort.is_empty() {
        return Err(EstimatorError::EmptyCohort);
    }
    let alphabet = cohort.alphabet.clone();
    let slot_of = |name: &str| {
        alphabet
            .slot(name)
            .ok_or_else(|| EstimatorError::MissingVariable(name.to_string()))
    };
    let a_slot = slot_of(&config.treatment)?;
    slot_of(&config.covariate)?;
    let k_slot = slot_of(&config.mediator)?;
    let out_j = module_index(&alphabet, &config.outcome)?;
    let cens_j = module_index(&alphabet, &config.censor)?;
    let k_j = alphabet
        .module_index(&config.mediator)
        .ok_or_else(|| EstimatorError::MissingVariable(config.mediator.clone()))?;

    let initial_a: Vec<f64> = cohort
        .paths
        .iter()
        .map(|p| p.slot_values(0.0, crate::events::Side::Left)[a_slot])
        .collect();
    if initial_a.iter().all(|&a| a == initial_a[0]) {
        return Err(EstimatorError::DesignDegenerate(format!(
            "every individual has {} = {}",
            config.treatment, initial_a[0]
        )));
    }

    let covs = vec![
        Covariate::Intercept,
        Covariate::parse(&config.treatment, &alphabet)?,
        Covariate::parse(&config.covariate, &alphabet)?,
        Covariate::Slot {
            label: format!("{}minus", config.mediator),
            slot: k_slot,
        },
    ];
    let stage1 = aalen_fit(cohort, &config.outcome, &covs, &[&config.censor])?;
    let psi_k = stage1.coefficients[3].clone();

    let mut ind = Individuals::new(cohort, &[out_j, cens_j]);
    let mut log_b = vec![0.0; cohort.len()];
    let mut levels: BTreeMap<i64, LevelSums> = BTreeMap::new();
    let mut arms = [0usize; 2];
    let arm = |a: f64| usize::from(a != 0.0);
    for i in 0..cohort.len() {
        if ind.at_risk(i) {
            let v = &ind.values[i];
            levels.entry(v[k_slot] as i64).or_default().add(v[a_slot], 1.0);
            arms[arm(v[a_slot])] += 1;
        }
    }

    let events = pooled_events(cohort);
    let mut g0 = Vec::new();
    let mut ga = Vec::new();
    let mut skipped = Vec::new();
    let mut at_risk = Vec::new();

    for (start, end) in time_groups(&events) {
        let s = events[start].0;
        let psi_minus = psi_k.left_limit(s);
        let d_psi = psi_k.value(s) - psi_minus;
        let mut r = [0.0; 2];
        let mut count = 0;
        for &(_, i, j, _) in &events[start..end] {
            if j == out_j && ind.at_risk(i) {
                let v = &ind.values[i];
                let h = (v[k_slot] * psi_minus + log_b[i]).exp();
                r[0] += h;
                r[1] += h * v[a_slot];
                count += 1;
            }
        }
        if count > 0 {
            at_risk.push((s, arms[0], arms[1]));
            let mut d = [0.0; 4];
            let mut q = [0.0; 2];
            for (&k, sums) in &levels {
                let e = (k as f64 * psi_minus).exp();
                d[0] += e * sums.s00;
                d[1] += e * sums.s01;
                d[3] += e * sums.s11;
                q[0] += e * k as f64 * sums.m0;
                q[1] += e * k as f64 * sums.m1;
            }
            d[2] = d[1];
            match guarded_inverse(&d, 2) {
                Some(inv) => {
                    let rhs = [r[0] - q[0] * d_psi, r[1] - q[1] * d_psi];
                    let inc = mat_vec(&inv, &rhs);
                    g0.push((s, inc[0]));
                    ga.push((s, inc[1]));
                }
                None => skipped.push(s),
            }
        }
        for &(_, i, j, delta) in &events[start..end] {
            let update = |ind: &Individuals, levels: &mut BTreeMap<i64, LevelSums>, arms: &mut [usize; 2], w: f64| {
                let v = &ind.values[i];
                levels.entry(v[k_slot] as i64).or_default().add(v[a_slot], w);
                if w > 0.0 {
                    arms[arm(v[a_slot])] += 1;
                } else {
                    arms[arm(v[a_slot])] -= 1;
                }
            };
            if ind.at_risk(i) {
                update(&ind, &mut levels, &mut arms, -log_b[i].exp());
            }
            ind.values[i][alphabet.module_slot(j)] += delta as f64;
            if j == k_j {
                log_b[i] -= delta as f64 * psi_k.value(s);
            }
            if ind.at_risk(i) {
                update(&ind, &mut levels, &mut arms, log_b[i].exp());
            }
        }
    }

    let step = |incs: Vec<(f64, f64)>| StepFunction::from_increments(0.0, incs).expect("finite event times");
    Ok(GcdeFit {
        gamma0: step(g0),
        gamma_a: step(ga),
        psi_k,
        stage1,
        skipped,
        at_risk,
    })
}

/// Enforced treatment value and mediator trajectory of a regime that fixes
/// both deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticRegime {
    pub treatment: f64,
    /// Mediator state as a right-continuous step function.
    pub mediator: StepFunction,
}

/// Extracts the enforced treatment and mediator trajectory from `theta`.
pub fn static_regime(
    scenario: &ScenarioSpec,
    theta: &InterventionSpec,
    config: &GcdeConfig,
) -> Result<StaticRegime, EstimatorError> {
    let alphabet = scenario.alphabet();
    let form = |msg: String| EstimatorError::InterventionForm(msg);
    let nan = vec![f64::NAN; alphabet.n_slots()];
    let a_idx = alphabet
        .baseline_index(&config.treatment)
        .ok_or_else(|| form(format!("`{}` is not a baseline variable", config.treatment)))?;
    let rule = theta
        .baseline_rule(a_idx)
        .ok_or_else(|| form(format!("`{}` is not fixed", config.treatment)))?;
    let treatment = rule.value.eval(&SlotState {
        values: &nan,
        time: 0.0,
    });
    if !treatment.is_finite() {
        return Err(form(format!("`{}` is not set to a constant", config.treatment)));
    }
    let k = alphabet
        .module_index(&config.mediator)
        .ok_or_else(|| EstimatorError::MissingVariable(config.mediator.clone()))?;
    let ModuleKind::Scheduled(sched) = scenario.module_kind(k) else {
        return Err(form(format!("`{}` is not schedule-restricted", config.mediator)));
    };
    let rule = theta
        .module_rule(k)
        .ok_or_else(|| form(format!("`{}` is not fixed", config.mediator)))?;
    let mut jumps = Vec::new();
    if !matches!(rule, DecisionRule::Suppress) {
        for &s in &sched.times {
            let v = SlotState { values: &nan, time: s };
            let d = rule
                .decide(&sched.module, &v)
                .map_err(|_| form(format!("`{}` rule depends on history", config.mediator)))?;
            if d {
                jumps.push((s, sched.delta as f64));
            }
        }
    }
    Ok(StaticRegime {
        treatment,
        mediator: StepFunction::from_increments(sched.initial as f64, jumps).expect("finite schedule"),
    })
}

/// `Λ̂^θ_t = ∫_0^t (1, θA, θK_{s−}) · d(Γ̂⁰, Γ̂ᴬ, Ψ̂ᴷ)_s`.
pub fn counterfactual_hazard(fit: &GcdeFit, regime: &StaticRegime) -> StepFunction {
    let a = regime.treatment;
    let incs = fit
        .gamma0
        .jump_times()
        .iter()
        .zip(fit.gamma0.jump_sizes())
        .map(|(&t, &d)| (t, d))
        .chain(
            fit.gamma_a
                .jump_times()
                .iter()
                .zip(fit.gamma_a.jump_sizes())
                .map(|(&t, &d)| (t, a * d)),
        )
        .chain(
            fit.psi_k
                .jump_times()
                .iter()
                .zip(fit.psi_k.jump_sizes())
                .map(|(&t, &d)| (t, regime.mediator.left_limit(t) * d)),
        );
    StepFunction::from_increments(0.0, incs).expect("finite jump times")
}

/// Product integral `∏_{s ≤ t} (1 − ΔΛ_s)`. Negative increments are kept;
/// factors are clamped at zero with a warning.
pub fn hazard_to_survival(lambda: &StepFunction) -> StepFunction {
    let mut s = 1.0;
    let mut incs = Vec::with_capacity(lambda.len());
    let mut clamped = 0usize;
    for (&t, &d) in lambda.jump_times().iter().zip(lambda.jump_sizes()) {
        if d > 1.0 {
            clamped += 1;
        }
        let next = s * (1.0 - d).max(0.0);
        incs.push((t, next - s));
        s = next;
    }
    if clamped > 0 {
        log::warn!("{clamped} hazard increments exceed one; survival clamped at zero");
    }
    StepFunction::from_increments(1.0, incs).expect("finite jump times")
}

/// Nonparametric bootstrap standard errors of the statistics returned by
/// `stat`. Replicate `r` resamples individuals with the stream
/// `(seed, r)`; failing replicates are dropped.
pub fn bootstrap_se<F>(cohort: &Cohort, reps: usize, seed: u64, stat: F) -> Vec<f64>
where
    F: Fn(&Cohort) -> Result<Vec<f64>, EstimatorError> + Sync,
{
    let n = cohort.len();
    let draws: Vec<Vec<f64>> = (0..reps as u64)
        .into_par_iter()
        .filter_map(|r| {
            let mut rng = individual_rng(seed, r);
            let paths = (0..n).map(|_| cohort.paths[rng.random_range(0..n)].clone()).collect();
            let sample = Cohort {
                alphabet: cohort.alphabet.clone(),
                paths,
                scenario_digest: cohort.scenario_digest.clone(),
                seed: cohort.seed,
                regime: Regime::Factual,
            };
            stat(&sample).ok()
        })
        .collect();
    if draws.len() < 2 {
        return Vec::new();
    }
    let m = draws[0].len();
    (0..m)
        .map(|k| {
            let mean = draws.iter().map(|d| d[k]).sum::<f64>() / draws.len() as f64;
            let var = draws.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
            var.sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_inverse_matches_nalgebra() {
        let m = [4.0, 1.0, 1.0, 3.0];
        let inv = guarded_inverse(&m, 2).unwrap();
        let full = DMatrix::from_row_slice(2, 2, &m).try_inverse().unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!((inv[r * 2 + c] - full[(r, c)]).abs() < 1e-15);
            }
        }
        let m3 = [4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0];
        let inv3 = guarded_inverse(&m3, 3).unwrap();
        let prod = DMatrix::from_row_slice(3, 3, &m3) * DMatrix::from_row_slice(3, 3, &inv3);
        assert!((prod - DMatrix::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn singular_designs_are_rejected() {
        assert!(guarded_inverse(&[1.0, 1.0, 1.0, 1.0], 2).is_none());
        assert!(guarded_inverse(&[0.0], 1).is_none());
        assert!(guarded_inverse(&[1.0, 0.0, 0.0, 1e-13], 2).is_none());
    }

    #[test]
    fn survival_product_integral() {
        assert_eq!(hazard_to_survival(&StepFunction::constant(0.0)).final_value(), 1.0);
        let one = StepFunction::new(0.0, vec![0.5], vec![0.2]).unwrap();
        let s = hazard_to_survival(&one);
        assert!((s.value(0.5) - 0.8).abs() < 1e-15);
        assert_eq!(s.value(0.4), 1.0);
        let m = 100_000;
        let many = StepFunction::new(
            0.0,
            (1..=m).map(|k| k as f64 / m as f64).collect(),
            vec![0.5 / m as f64; m],
        )
        .unwrap();
        assert!((hazard_to_survival(&many).final_value() - (-0.5f64).exp()).abs() < 1e-5);
        let big = StepFunction::new(0.0, vec![0.1, 0.2], vec![1.5, 0.1]).unwrap();
        assert_eq!(hazard_to_survival(&big).final_value(), 0.0);
    }
}
