//! Event histories: paths, cohorts, step functions and predictable state
//! queries.
//!
//! A [`Path`] holds one individual's baseline values and its time-ordered
//! marked events. Module states are integer counting-type processes
//! `V_t = V_0 + sum of deltas in (0, t]`; every intensity in the engine reads
//! the left limit `V_{t-}`.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EventsError {
    #[error("unknown module `{0}`")]
    UnknownModule(String),
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("path {id}: {msg}")]
    InvalidPath { id: u64, msg: String },
    #[error("invalid step function: {0}")]
    StepFunction(String),
}

/// One mark of a module's mark set, with the state change it causes.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkSig {
    pub label: u32,
    pub delta: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleSig {
    pub name: String,
    pub marks: Vec<MarkSig>,
    pub initial: i64,
    /// Decision times for schedule-restricted modules; `None` for
    /// intensity-driven modules.
    pub schedule: Option<Vec<f64>>,
}

impl ModuleSig {
    pub fn mark(&self, label: u32) -> Option<&MarkSig> {
        self.marks.iter().find(|m| m.label == label)
    }
}

/// Names and mark sets shared by every path of a cohort.
///
/// Variables live in a single slot namespace: baseline variables occupy
/// slots `0..baseline.len()`, modules follow.
#[derive(Debug, Clone, PartialEq)]
pub struct Alphabet {
    pub horizon: f64,
    pub baseline: Vec<String>,
    pub modules: Vec<ModuleSig>,
}

impl Alphabet {
    pub fn baseline_index(&self, name: &str) -> Option<usize> {
        self.baseline.iter().position(|b| b == name)
    }

    pub fn module_index(&self, name: &str) -> Option<usize> {
        self.modules.iter().position(|m| m.name == name)
    }

    pub fn n_slots(&self) -> usize {
        self.baseline.len() + self.modules.len()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.baseline_index(name)
            .or_else(|| self.module_index(name).map(|j| self.baseline.len() + j))
    }

    pub fn slot_name(&self, slot: usize) -> &str {
        let nb = self.baseline.len();
        if slot < nb {
            &self.baseline[slot]
        } else {
            &self.modules[slot - nb].name
        }
    }

    pub fn module_slot(&self, module: usize) -> usize {
        self.baseline.len() + module
    }
}

/// A follow-up event. `module` indexes [`Alphabet::modules`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub module: usize,
    pub mark: u32,
    pub delta: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `V_{t-}`, the predictable state.
    Left,
    /// `V_t`, the cadlag state.
    Right,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub id: u64,
    pub alphabet: Arc<Alphabet>,
    pub baseline: Vec<i64>,
    pub events: Vec<Event>,
}

impl Path {
    /// Builds a path and enforces the structural invariants: known modules
    /// and marks, finite positive times, strictly increasing times within a
    /// module and no cross-module ties.
    pub fn new(id: u64, alphabet: Arc<Alphabet>, baseline: Vec<i64>, events: Vec<Event>) -> Result<Path, EventsError> {
        let path = Path::new_unchecked(id, alphabet, baseline, events);
        let structural: Vec<_> = check_structure(&path);
        if let Some(v) = structural.first() {
            return Err(EventsError::InvalidPath { id, msg: v.to_string() });
        }
        Ok(path)
    }

    /// Sorts the events by time but performs no other check. Intended for
    /// diagnostics on malformed input.
    pub fn new_unchecked(id: u64, alphabet: Arc<Alphabet>, baseline: Vec<i64>, mut events: Vec<Event>) -> Path {
        events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.module.cmp(&b.module)));
        Path {
            id,
            alphabet,
            baseline,
            events,
        }
    }

    pub fn module_events(&self, module: usize) -> impl Iterator<Item = &Event> + '_ {
        self.events.iter().filter(move |e| e.module == module)
    }

    /// State of module `module` (by index) at `t`.
    pub fn module_state(&self, module: usize, t: f64, side: Side) -> i64 {
        let init = self.alphabet.modules[module].initial;
        init + self
            .module_events(module)
            .take_while(|e| match side {
                Side::Left => e.time < t,
                Side::Right => e.time <= t,
            })
            .map(|e| e.delta)
            .sum::<i64>()
    }

    /// Value of every slot (baseline variables, then modules) at `t`.
    pub fn slot_values(&self, t: f64, side: Side) -> Vec<f64> {
        let mut out: Vec<f64> = self.baseline.iter().map(|&v| v as f64).collect();
        out.extend(
            self.alphabet
                .modules
                .iter()
                .map(|m| m.initial as f64)
                .collect::<Vec<_>>(),
        );
        let nb = self.baseline.len();
        for e in &self.events {
            let included = match side {
                Side::Left => e.time < t,
                Side::Right => e.time <= t,
            };
            if !included {
                break;
            }
            out[nb + e.module] += e.delta as f64;
        }
        out
    }

    /// Value of a named slot: baseline variables are constant in time.
    pub fn value_of(&self, name: &str, t: f64, side: Side) -> Option<f64> {
        if let Some(i) = self.alphabet.baseline_index(name) {
            return Some(self.baseline[i] as f64);
        }
        self.alphabet
            .module_index(name)
            .map(|j| self.module_state(j, t, side) as f64)
    }
}

/// `V_t` (right) or `V_{t-}` (left) for a named module.
pub fn state_at(path: &Path, module: &str, t: f64, side: Side) -> Result<f64, EventsError> {
    let horizon = path.alphabet.horizon;
    let j = path
        .alphabet
        .module_index(module)
        .ok_or_else(|| EventsError::UnknownModule(module.to_string()))?;
    if !(0.0..=horizon).contains(&t) {
        return Err(EventsError::TimeOutOfRange { t, horizon });
    }
    Ok(path.module_state(j, t, side) as f64)
}

/// `N^V` with unit jumps at the module's event times.
pub fn counting_process(path: &Path, module: &str) -> Result<StepFunction, EventsError> {
    let j = path
        .alphabet
        .module_index(module)
        .ok_or_else(|| EventsError::UnknownModule(module.to_string()))?;
    let times: Vec<f64> = path.module_events(j).map(|e| e.time).collect();
    let sizes = vec![1.0; times.len()];
    StepFunction::new(0.0, times, sizes)
}

#[derive(Debug, Clone, PartialEq)]
pub enum PathViolation {
    BaselineArity {
        expected: usize,
        found: usize,
    },
    UnknownModule {
        index: usize,
    },
    UnknownMark {
        module: String,
        mark: u32,
    },
    DeltaMismatch {
        module: String,
        time: f64,
        declared: i64,
        found: i64,
    },
    OutOfRange {
        module: String,
        time: f64,
    },
    NotIncreasing {
        module: String,
        time: f64,
    },
    SimultaneousJump {
        time: f64,
        modules: (String, String),
    },
    OffSchedule {
        module: String,
        time: f64,
    },
}

impl fmt::Display for PathViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PathViolation::BaselineArity { expected, found } => {
                write!(f, "baseline has {found} values, expected {expected}")
            }
            PathViolation::UnknownModule { index } => write!(f, "unknown module index {index}"),
            PathViolation::UnknownMark { module, mark } => {
                write!(f, "unknown mark {mark} for module {module}")
            }
            PathViolation::DeltaMismatch {
                module,
                time,
                declared,
                found,
            } => write!(
                f,
                "event of {module} at {time} has delta {found}, mark declares {declared}"
            ),
            PathViolation::OutOfRange { module, time } => {
                write!(f, "event of {module} at {time} outside (0, T]")
            }
            PathViolation::NotIncreasing { module, time } => {
                write!(f, "events of {module} not strictly increasing at {time}")
            }
            PathViolation::SimultaneousJump { time, modules } => write!(
                f,
                "simultaneous cross-module jump of {} and {} at {time}",
                modules.0, modules.1
            ),
            PathViolation::OffSchedule { module, time } => write!(
                f,
                "restricted-jump rule: {module} jumps at {time}, which is not a scheduled time"
            ),
        }
    }
}

fn check_structure(path: &Path) -> Vec<PathViolation> {
    let alpha = &path.alphabet;
    let mut out = Vec::new();
    if path.baseline.len() != alpha.baseline.len() {
        out.push(PathViolation::BaselineArity {
            expected: alpha.baseline.len(),
            found: path.baseline.len(),
        });
    }
    let name = |j: usize| alpha.modules.get(j).map(|m| m.name.clone()).unwrap_or_default();
    let mut last_time: Vec<Option<f64>> = vec![None; alpha.modules.len()];
    for (k, e) in path.events.iter().enumerate() {
        let Some(sig) = alpha.modules.get(e.module) else {
            out.push(PathViolation::UnknownModule { index: e.module });
            continue;
        };
        match sig.mark(e.mark) {
            None => out.push(PathViolation::UnknownMark {
                module: sig.name.clone(),
                mark: e.mark,
            }),
            Some(m) if m.delta != e.delta => out.push(PathViolation::DeltaMismatch {
                module: sig.name.clone(),
                time: e.time,
                declared: m.delta,
                found: e.delta,
            }),
            _ => {}
        }
        if !e.time.is_finite() || e.time <= 0.0 {
            out.push(PathViolation::OutOfRange {
                module: sig.name.clone(),
                time: e.time,
            });
        }
        if let Some(prev) = last_time[e.module] {
            if e.time <= prev {
                out.push(PathViolation::NotIncreasing {
                    module: sig.name.clone(),
                    time: e.time,
                });
            }
        }
        last_time[e.module] = Some(e.time);
        if k > 0 {
            let p = &path.events[k - 1];
            if p.time == e.time && p.module != e.module {
                out.push(PathViolation::SimultaneousJump {
                    time: e.time,
                    modules: (name(p.module), name(e.module)),
                });
            }
        }
    }
    out
}

/// Lists every violation of `path` against `alphabet`: structural problems,
/// events outside `(0, T]` and scheduled-module events off the grid. Never
/// fails.
pub fn validate_path_against(path: &Path, alphabet: &Alphabet) -> Vec<PathViolation> {
    let mut out = check_structure(path);
    for e in &path.events {
        let Some(sig) = alphabet.modules.get(e.module) else {
            continue;
        };
        if e.time > alphabet.horizon {
            out.push(PathViolation::OutOfRange {
                module: sig.name.clone(),
                time: e.time,
            });
        }
        if let Some(grid) = &sig.schedule {
            if !grid.contains(&e.time) {
                out.push(PathViolation::OffSchedule {
                    module: sig.name.clone(),
                    time: e.time,
                });
            }
        }
    }
    out
}

/// Right-continuous piecewise-constant function with finitely many jumps:
/// `value(t) = initial_value + sum of jump_size(s) for s <= t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    initial_value: f64,
    jump_times: Vec<f64>,
    jump_sizes: Vec<f64>,
    cumulative: Vec<f64>,
}

impl StepFunction {
    pub fn new(initial_value: f64, jump_times: Vec<f64>, jump_sizes: Vec<f64>) -> Result<StepFunction, EventsError> {
        if jump_times.len() != jump_sizes.len() {
            return Err(EventsError::StepFunction(format!(
                "{} jump times but {} jump sizes",
                jump_times.len(),
                jump_sizes.len()
            )));
        }
        if jump_times.iter().any(|t| !t.is_finite()) {
            return Err(EventsError::StepFunction("non-finite jump time".into()));
        }
        if jump_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(EventsError::StepFunction(
                "jump times must be strictly increasing".into(),
            ));
        }
        let mut acc = initial_value;
        let cumulative = jump_sizes
            .iter()
            .map(|d| {
                acc += d;
                acc
            })
            .collect();
        Ok(StepFunction {
            initial_value,
            jump_times,
            jump_sizes,
            cumulative,
        })
    }

    pub fn constant(value: f64) -> StepFunction {
        StepFunction {
            initial_value: value,
            jump_times: Vec::new(),
            jump_sizes: Vec::new(),
            cumulative: Vec::new(),
        }
    }

    /// Builds from unsorted `(time, increment)` pairs, merging equal times.
    pub fn from_increments(
        initial_value: f64,
        increments: impl IntoIterator<Item = (f64, f64)>,
    ) -> Result<StepFunction, EventsError> {
        let mut incs: Vec<(f64, f64)> = increments.into_iter().collect();
        incs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut times: Vec<f64> = Vec::with_capacity(incs.len());
        let mut sizes: Vec<f64> = Vec::with_capacity(incs.len());
        for (t, d) in incs {
            match times.last() {
                Some(&last) if last == t => *sizes.last_mut().unwrap() += d,
                _ => {
                    times.push(t);
                    sizes.push(d);
                }
            }
        }
        StepFunction::new(initial_value, times, sizes)
    }

    pub fn initial_value(&self) -> f64 {
        self.initial_value
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn jump_sizes(&self) -> &[f64] {
        &self.jump_sizes
    }

    pub fn len(&self) -> usize {
        self.jump_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jump_times.is_empty()
    }

    pub fn value(&self, t: f64) -> f64 {
        let k = self.jump_times.partition_point(|&s| s <= t);
        if k == 0 {
            self.initial_value
        } else {
            self.cumulative[k - 1]
        }
    }

    pub fn left_limit(&self, t: f64) -> f64 {
        let k = self.jump_times.partition_point(|&s| s < t);
        if k == 0 {
            self.initial_value
        } else {
            self.cumulative[k - 1]
        }
    }

    pub fn final_value(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(self.initial_value)
    }

    /// Values right after each jump.
    pub fn values(&self) -> &[f64] {
        &self.cumulative
    }

    /// `sum_k coef_k * f_k`, with jumps at the union of jump times.
    pub fn linear_combination(parts: &[(f64, &StepFunction)]) -> StepFunction {
        let initial = parts.iter().map(|(c, f)| c * f.initial_value).sum();
        let incs = parts
            .iter()
            .flat_map(|(c, f)| f.jump_times.iter().zip(&f.jump_sizes).map(move |(&t, &d)| (t, c * d)));
        StepFunction::from_increments(initial, incs).expect("finite jump times")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Regime {
    Factual,
    Counterfactual { intervention_digest: String },
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Factual => write!(f, "factual"),
            Regime::Counterfactual { intervention_digest } => write!(f, "counterfactual:{intervention_digest}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub alphabet: Arc<Alphabet>,
    pub paths: Vec<Path>,
    pub scenario_digest: String,
    pub seed: u64,
    pub regime: Regime,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}
