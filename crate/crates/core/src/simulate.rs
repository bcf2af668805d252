//! Exact simulation of factual and counterfactual cohorts.
//!
//! Intensities are constant between state changes, so follow-up is drawn by
//! exact competing risks: an exponential waiting time at the total rate,
//! then a mark chosen proportionally to its rate. Scheduled decision times
//! interrupt the race; by memorylessness the clock simply restarts after
//! them. Each individual draws from its own ChaCha substream keyed by
//! `(seed, index)`, so results do not depend on the worker count.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use thiserror::Error;

use crate::events::{Cohort, Event, EventsError, Path, Regime, Side};
use crate::expr::{SlotState, StateView, TracingView};
use crate::scenario::{validate_intervention, DecisionRule, InterventionSpec, ModuleKind, ScenarioError, ScenarioSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulateError {
    #[error("cohort size must be positive")]
    EmptyCohort,
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Events(#[from] EventsError),
    #[error("invalid intervention: {0}")]
    InvalidIntervention(String),
}

/// The random stream of individual `index` under `seed`.
pub fn individual_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Slots read by each module's intensity or jump probability, indexed by
/// module.
pub type ReadTrace = Vec<BTreeSet<usize>>;

/// Draws `n` i.i.d. paths from the factual law.
pub fn simulate_cohort(scenario: &ScenarioSpec, n: usize, seed: u64) -> Result<Cohort, SimulateError> {
    if n == 0 {
        return Err(SimulateError::EmptyCohort);
    }
    let paths = (0..n as u64)
        .into_par_iter()
        .map(|i| simulate_path(scenario, None, i, &mut individual_rng(seed, i), None))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Cohort {
        alphabet: scenario.alphabet().clone(),
        paths,
        scenario_digest: scenario.digest(),
        seed,
        regime: Regime::Factual,
    })
}

/// Draws `n` i.i.d. paths from the counterfactual law: intervened variables
/// follow `theta`, everything else keeps its factual mechanism evaluated on
/// the counterfactually evolving state.
pub fn simulate_counterfactual(
    scenario: &ScenarioSpec,
    theta: &InterventionSpec,
    n: usize,
    seed: u64,
) -> Result<Cohort, SimulateError> {
    if n == 0 {
        return Err(SimulateError::EmptyCohort);
    }
    check_intervention(scenario, theta)?;
    let paths = (0..n as u64)
        .into_par_iter()
        .map(|i| simulate_path(scenario, Some(theta), i, &mut individual_rng(seed, i), None))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Cohort {
        alphabet: scenario.alphabet().clone(),
        paths,
        scenario_digest: scenario.digest(),
        seed,
        regime: Regime::Counterfactual {
            intervention_digest: theta.digest(),
        },
    })
}

/// Simulates `n` factual paths sequentially and records which slots every
/// module mechanism actually read.
pub fn trace_reads(scenario: &ScenarioSpec, n: usize, seed: u64) -> Result<ReadTrace, SimulateError> {
    let mut trace = vec![BTreeSet::new(); scenario.n_modules()];
    for i in 0..n as u64 {
        simulate_path(scenario, None, i, &mut individual_rng(seed, i), Some(&mut trace))?;
    }
    Ok(trace)
}

pub(crate) fn check_intervention(scenario: &ScenarioSpec, theta: &InterventionSpec) -> Result<(), SimulateError> {
    let report = validate_intervention(scenario, theta);
    if let Some(v) = report.violations.first() {
        return Err(SimulateError::InvalidIntervention(v.to_string()));
    }
    Ok(())
}

fn eval_traced<T>(
    trace: &mut Option<&mut ReadTrace>,
    module: usize,
    view: &SlotState<'_>,
    f: impl FnOnce(&dyn StateView) -> T,
) -> T {
    match trace {
        Some(tr) => {
            let tv = TracingView::new(view);
            let out = f(&tv);
            tr[module].extend(tv.into_reads());
            out
        }
        None => f(view),
    }
}

/// Simulates one individual.
pub fn simulate_path(
    scenario: &ScenarioSpec,
    theta: Option<&InterventionSpec>,
    id: u64,
    rng: &mut ChaCha8Rng,
    mut trace: Option<&mut ReadTrace>,
) -> Result<Path, SimulateError> {
    let alphabet = scenario.alphabet();
    let nb = alphabet.baseline.len();
    let mut values = vec![f64::NAN; alphabet.n_slots()];
    for (j, m) in alphabet.modules.iter().enumerate() {
        values[nb + j] = m.initial as f64;
    }

    let mut baseline = Vec::with_capacity(nb);
    for (k, spec) in scenario.baseline().iter().enumerate() {
        let u: f64 = rng.random();
        let rule = theta.and_then(|th| th.baseline_rule(k).map(|r| (th, r)));
        let v = match rule {
            Some((th, r)) => th.enforced_baseline(
                r,
                scenario,
                &SlotState {
                    values: &values,
                    time: 0.0,
                },
            )?,
            None => {
                let probs = spec.distribution(&baseline);
                let mut acc = 0.0;
                let mut chosen = *spec.table.values.last().expect("nonempty alphabet");
                for (p, &val) in probs.iter().zip(&spec.table.values) {
                    acc += p;
                    if u < acc {
                        chosen = val;
                        break;
                    }
                }
                chosen
            }
        };
        baseline.push(v);
        values[k] = v as f64;
    }

    let horizon = scenario.horizon();
    let n_mod = scenario.n_modules();
    let active: Vec<usize> = (0..n_mod)
        .filter(|&j| matches!(scenario.module_kind(j), ModuleKind::Intensity(_)))
        .filter(|&j| !matches!(theta.and_then(|th| th.module_rule(j)), Some(DecisionRule::Suppress)))
        .collect();
    let mut rates: Vec<Vec<f64>> = vec![Vec::new(); n_mod];
    let mut totals = vec![0.0; n_mod];
    let mut events = Vec::new();
    let mut t = 0.0;
    let decisions = scenario.decision_times();
    let mut next_decision = 0;

    loop {
        let stop = decisions.get(next_decision).map_or(horizon, |d| d.0);
        // Competing risks until the next stop.
        loop {
            let view = SlotState {
                values: &values,
                time: t,
            };
            let mut total = 0.0;
            for &j in &active {
                let buf = &mut rates[j];
                totals[j] = eval_traced(&mut trace, j, &view, |v| scenario.rates(j, v, buf))?;
                total += totals[j];
            }
            if total <= 0.0 {
                t = stop;
                break;
            }
            let wait: f64 = rng.sample::<f64, _>(Exp1) / total;
            let next = t + wait;
            if next >= stop {
                t = stop;
                break;
            }
            if next <= t {
                continue;
            }
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            'outer: for &j in &active {
                for (m, &r) in rates[j].iter().enumerate() {
                    if u < r {
                        pick = Some((j, m));
                        break 'outer;
                    }
                    u -= r;
                }
            }
            // Rounding can leave `u` just above the last positive rate.
            let (j, m) = pick.unwrap_or_else(|| {
                let j = *active.iter().rev().find(|&&j| totals[j] > 0.0).expect("positive total");
                let m = rates[j].iter().rposition(|&r| r > 0.0).expect("positive rate");
                (j, m)
            });
            let ModuleKind::Intensity(spec) = scenario.module_kind(j) else {
                unreachable!("active modules are intensity-driven")
            };
            let mark = &spec.marks[m];
            events.push(Event {
                time: next,
                module: j,
                mark: mark.label,
                delta: mark.delta,
            });
            values[nb + j] += mark.delta as f64;
            t = next;
        }
        let Some(&(s, j)) = decisions.get(next_decision) else {
            break;
        };
        next_decision += 1;
        let view = SlotState {
            values: &values,
            time: s,
        };
        let u: f64 = rng.random();
        let jump = match theta.and_then(|th| th.module_rule(j)) {
            Some(rule) => rule.decide(&alphabet.modules[j].name, &view)?,
            None => {
                let p = eval_traced(&mut trace, j, &view, |v| scenario.jump_probability(j, v))?;
                u < p
            }
        };
        if jump {
            let ModuleKind::Scheduled(sched) = scenario.module_kind(j) else {
                unreachable!("decision times belong to scheduled modules")
            };
            events.push(Event {
                time: s,
                module: j,
                mark: sched.label,
                delta: sched.delta,
            });
            values[nb + j] += sched.delta as f64;
        }
        if s >= horizon {
            break;
        }
    }

    Ok(Path::new(id, alphabet.clone(), baseline, events)?)
}

/// The path-level action: intervened baseline values and intervened-module
/// event sequences are replaced by `theta`'s rules evaluated on the path's
/// non-intervened history; everything else is left bit-identical.
pub fn apply_action(path: &Path, scenario: &ScenarioSpec, theta: &InterventionSpec) -> Result<Path, SimulateError> {
    if theta.is_identity() {
        return Ok(path.clone());
    }
    let alphabet = scenario.alphabet();
    let nb = alphabet.baseline.len();
    let mut baseline = path.baseline.clone();
    for rule in theta.baseline_rules() {
        let mut values: Vec<f64> = baseline.iter().map(|&v| v as f64).collect();
        values.extend(alphabet.modules.iter().map(|m| m.initial as f64));
        let v = theta.enforced_baseline(
            rule,
            scenario,
            &SlotState {
                values: &values,
                time: 0.0,
            },
        )?;
        baseline[rule.index] = v;
    }

    let intervened: Vec<usize> = theta.module_rules().iter().map(|r| r.index).collect();
    let kept: Vec<Event> = path
        .events
        .iter()
        .filter(|e| !intervened.contains(&e.module))
        .copied()
        .collect();
    let mut out = Path::new_unchecked(path.id, alphabet.clone(), baseline, kept);

    let mut decisions: Vec<(f64, usize)> = scenario
        .decision_times()
        .iter()
        .filter(|d| intervened.contains(&d.1))
        .copied()
        .collect();
    decisions.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (s, j) in decisions {
        let rule = theta.module_rule(j).expect("intervened module has a rule");
        let values = out.slot_values(s, Side::Left);
        let view = SlotState {
            values: &values,
            time: s,
        };
        if rule.decide(&alphabet.modules[j].name, &view)? {
            let ModuleKind::Scheduled(sched) = scenario.module_kind(j) else {
                continue;
            };
            out.events.push(Event {
                time: s,
                module: j,
                mark: sched.label,
                delta: sched.delta,
            });
            out = Path::new_unchecked(out.id, out.alphabet.clone(), out.baseline, out.events);
        }
    }
    debug_assert!(out.baseline.len() == nb);
    Ok(out)
}

/// Cohort-level [`apply_action`].
pub fn apply_action_cohort(
    cohort: &Cohort,
    scenario: &ScenarioSpec,
    theta: &InterventionSpec,
) -> Result<Cohort, SimulateError> {
    let paths = cohort
        .paths
        .par_iter()
        .map(|p| apply_action(p, scenario, theta))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Cohort {
        alphabet: Arc::clone(&cohort.alphabet),
        paths,
        scenario_digest: cohort.scenario_digest.clone(),
        seed: cohort.seed,
        regime: Regime::Counterfactual {
            intervention_digest: theta.digest(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(text: &str) -> ScenarioSpec {
        ScenarioSpec::parse(text).unwrap()
    }

    const ZERO: &str = r#"
horizon = 1.0
[[modules]]
name = "N"
cap = 1.0
marks = [{ rate = "0" }]
"#;

    #[test]
    fn zero_intensity_gives_no_events() {
        let c = simulate_cohort(&scenario(ZERO), 100, 1).unwrap();
        assert!(c.paths.iter().all(|p| p.events.is_empty()));
    }

    #[test]
    fn empty_cohort_is_an_error() {
        assert_eq!(
            simulate_cohort(&scenario(ZERO), 0, 1).unwrap_err(),
            SimulateError::EmptyCohort
        );
    }

    #[test]
    fn poisson_mean_count() {
        let s = scenario(
            &ZERO
                .replace("rate = \"0\"", "rate = \"2\"")
                .replace("cap = 1.0", "cap = 5.0"),
        );
        let n = 100_000;
        let c = simulate_cohort(&s, n, 11).unwrap();
        let mean = c.paths.iter().map(|p| p.events.len() as f64).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn absorbing_survival() {
        let s = scenario(
            r#"
horizon = 1.0
[[modules]]
name = "B"
absorbing = true
cap = 1.0
marks = [{ rate = "0.5" }]
"#,
        );
        let n = 50_000;
        let c = simulate_cohort(&s, n, 3).unwrap();
        assert!(c.paths.iter().all(|p| p.events.len() <= 1));
        let freq = c.paths.iter().filter(|p| !p.events.is_empty()).count() as f64 / n as f64;
        let p = 1.0 - (-0.5f64).exp();
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() < 3.0 * se, "{freq} vs {p}");
    }

    #[test]
    fn reproducible_across_thread_counts() {
        let s = scenario(
            &ZERO
                .replace("rate = \"0\"", "rate = \"1.5\"")
                .replace("cap = 1.0", "cap = 5.0"),
        );
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| simulate_cohort(&s, 500, 9).unwrap());
        let b = four.install(|| simulate_cohort(&s, 500, 9).unwrap());
        assert_eq!(a, b);
    }
}
