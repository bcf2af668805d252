//! The bundled dynamic study: scenario assets, the `Γ` oracle and the
//! replication driver.
//!
//! The outcome intensity is linear in `(A, L, K, W)` and censoring depends
//! on `A` only. Under a regime that holds `K` at zero the survivors of arm
//! `a` are the baseline population tilted by `exp(−h(c)·t)`, where `h(c)` is
//! the outcome intensity of configuration `c`, so
//! `Γ^(a)(t) = −log Σ_c P(c | a) exp(−h(c)·t)`. The simulated oracle
//! estimates the same quantity as `∫ ψ·m^a(s) ds`, where `m^a` are the
//! at-risk means of the baseline variables in arm `a` weighted by
//! `H = exp(ψᴷ ∫ K ds)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path as FsPath;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::estimators::{
    bootstrap_se, counterfactual_hazard, hazard_to_survival, sequential_g_fit, static_regime, EstimatorError,
    GcdeConfig, GcdeFit, StaticRegime,
};
use crate::events::StepFunction;
use crate::expr::SlotState;
use crate::io::format_time;
use crate::scenario::{InterventionSpec, ModuleKind, ScenarioError, ScenarioSpec};
use crate::simulate::{individual_rng, simulate_cohort, simulate_counterfactual, simulate_path, SimulateError};
use crate::table::cartesian;
use crate::weights::{
    cohort_weights, diagnostics_from, ipw_from_weights, positivity_check, Functional, Normalization, WeightError,
};

pub const SCENARIO_TOML: &str = include_str!("../assets/scenario.toml");
pub const THETA1_TOML: &str = include_str!("../assets/theta1.toml");
pub const THETA2_TOML: &str = include_str!("../assets/theta2.toml");
pub const GRAPH_TXT: &str = include_str!("../assets/graph.txt");

/// Smallest enforced-decision probability of the bundled regimes.
pub const DOCUMENTED_POSITIVITY_MIN: f64 = 0.2;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("scenario does not fit the dynamic study: {0}")]
    Shape(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// The bundled scenario and the two bundled regimes.
pub fn bundled() -> Result<(ScenarioSpec, InterventionSpec, InterventionSpec), StudyError> {
    let s = ScenarioSpec::parse(SCENARIO_TOML)?;
    let t1 = InterventionSpec::parse(THETA1_TOML, &s)?;
    let t2 = InterventionSpec::parse(THETA2_TOML, &s)?;
    Ok((s, t1, t2))
}

/// Linear outcome intensity `h = ψ₀ + Σ ψ_x x` read off a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOutcome {
    pub intercept: f64,
    /// Coefficient of every baseline slot, in baseline order.
    pub baseline: Vec<f64>,
    pub mediator: f64,
    treatment_slot: usize,
    mediator_module: usize,
    outcome_module: usize,
    censor_module: usize,
}

impl LinearOutcome {
    /// Extracts the coefficients and checks the study's structural
    /// assumptions: one-mark linear outcome intensity, censoring driven by
    /// treatment only, scheduled mediator.
    pub fn from_scenario(scenario: &ScenarioSpec, config: &GcdeConfig) -> Result<LinearOutcome, StudyError> {
        let alphabet = scenario.alphabet();
        let shape = |m: &str| StudyError::Shape(m.to_string());
        let module = |name: &str| {
            alphabet
                .module_index(name)
                .ok_or_else(|| shape(&format!("missing module `{name}`")))
        };
        let outcome_module = module(&config.outcome)?;
        let censor_module = module(&config.censor)?;
        let mediator_module = module(&config.mediator)?;
        let treatment_slot = alphabet
            .baseline_index(&config.treatment)
            .ok_or_else(|| shape("treatment must be a baseline variable"))?;
        if !matches!(scenario.module_kind(mediator_module), ModuleKind::Scheduled(_)) {
            return Err(shape("mediator must be schedule-restricted"));
        }
        let ModuleKind::Intensity(out) = scenario.module_kind(outcome_module) else {
            return Err(shape("outcome must be intensity-driven"));
        };
        let ModuleKind::Intensity(cens) = scenario.module_kind(censor_module) else {
            return Err(shape("censoring must be intensity-driven"));
        };
        if cens.depends.iter().any(|d| *d != config.treatment) {
            return Err(shape("censoring may depend on the treatment only"));
        }
        if out.marks.len() != 1 {
            return Err(shape("outcome must have a single mark"));
        }
        let rate = &out.marks[0].rate;
        let n = alphabet.n_slots();
        let eval = |v: &[f64]| rate.eval(&SlotState { values: v, time: 0.0 });
        let zero = vec![0.0; n];
        let intercept = eval(&zero);
        let coef = |slot: usize| {
            let mut v = zero.clone();
            v[slot] = 1.0;
            eval(&v) - intercept
        };
        let nb = alphabet.baseline.len();
        let baseline: Vec<f64> = (0..nb).map(coef).collect();
        let mediator = coef(alphabet.module_slot(mediator_module));
        let lin = LinearOutcome {
            intercept,
            baseline,
            mediator,
            treatment_slot,
            mediator_module,
            outcome_module,
            censor_module,
        };
        // Linearity on a probe point.
        let mut probe = vec![0.0; n];
        for (k, x) in probe.iter_mut().enumerate() {
            *x = ((k * 7 + 3) % 5) as f64 * 0.5;
        }
        probe[alphabet.module_slot(outcome_module)] = 0.0;
        let predicted = lin.intercept
            + (0..nb).map(|k| lin.baseline[k] * probe[k]).sum::<f64>()
            + lin.mediator * probe[alphabet.module_slot(mediator_module)];
        let other = (0..scenario.n_modules())
            .filter(|&j| j != mediator_module && j != outcome_module)
            .any(|j| coef(alphabet.module_slot(j)) != 0.0);
        if other || (eval(&probe) - predicted).abs() > 1e-12 {
            return Err(shape(
                "outcome intensity must be linear in baseline variables and the mediator",
            ));
        }
        Ok(lin)
    }

    fn h(&self, config: &[i64]) -> f64 {
        self.intercept
            + config
                .iter()
                .zip(&self.baseline)
                .map(|(&x, c)| c * x as f64)
                .sum::<f64>()
    }
}

/// `Γ = (Γ^(0), Γ^(1) − Γ^(0))` on a time grid, linearly interpolated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaOracle {
    pub grid: Vec<f64>,
    pub gamma0: Vec<f64>,
    pub gamma_a: Vec<f64>,
}

fn interpolate(grid: &[f64], values: &[f64], t: f64) -> f64 {
    let k = grid.partition_point(|&g| g <= t);
    if k == 0 {
        return values[0];
    }
    if k == grid.len() {
        return values[k - 1];
    }
    let (t0, t1) = (grid[k - 1], grid[k]);
    values[k - 1] + (values[k] - values[k - 1]) * (t - t0) / (t1 - t0)
}

impl GammaOracle {
    pub fn gamma0_at(&self, t: f64) -> f64 {
        interpolate(&self.grid, &self.gamma0, t)
    }

    pub fn gamma_a_at(&self, t: f64) -> f64 {
        interpolate(&self.grid, &self.gamma_a, t)
    }
}

pub fn uniform_grid(horizon: f64, points: usize) -> Vec<f64> {
    (0..=points).map(|k| horizon * k as f64 / points as f64).collect()
}

/// Exact `Γ` by enumerating baseline configurations.
pub fn gamma_oracle_closed_form(
    scenario: &ScenarioSpec,
    config: &GcdeConfig,
    grid: &[f64],
) -> Result<GammaOracle, StudyError> {
    let lin = LinearOutcome::from_scenario(scenario, config)?;
    let alphabets: Vec<&[i64]> = scenario.baseline().iter().map(|b| b.table.values.as_slice()).collect();
    let mut cells: Vec<(Vec<i64>, f64)> = Vec::new();
    for c in cartesian(&alphabets) {
        let mut p = 1.0;
        for (k, spec) in scenario.baseline().iter().enumerate() {
            p *= spec.prob_of(c[k], &c[..k]);
        }
        if p > 0.0 {
            cells.push((c, p));
        }
    }
    let arm = |a: i64, t: f64| -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (c, p) in cells.iter().filter(|(c, _)| c[lin.treatment_slot] == a) {
            num += p * (-lin.h(c) * t).exp();
            den += p;
        }
        -(num / den).ln()
    };
    let g0: Vec<f64> = grid.iter().map(|&t| arm(0, t)).collect();
    let g1: Vec<f64> = grid.iter().map(|&t| arm(1, t)).collect();
    Ok(GammaOracle {
        grid: grid.to_vec(),
        gamma_a: g1.iter().zip(&g0).map(|(a, b)| a - b).collect(),
        gamma0: g0,
    })
}

#[derive(Clone)]
struct ArmSums {
    h: Vec<f64>,
    /// `[slot][grid]` sums of `H·x`.
    hx: Vec<Vec<f64>>,
}

impl ArmSums {
    fn new(nb: usize, g: usize) -> ArmSums {
        ArmSums {
            h: vec![0.0; g],
            hx: vec![vec![0.0; g]; nb],
        }
    }

    fn add(&mut self, other: &ArmSums) {
        for (a, b) in self.h.iter_mut().zip(&other.h) {
            *a += b;
        }
        for (ra, rb) in self.hx.iter_mut().zip(&other.hx) {
            for (a, b) in ra.iter_mut().zip(rb) {
                *a += b;
            }
        }
    }
}

const ORACLE_CHUNK: u64 = 10_000;

/// `Γ` from an auxiliary factual simulation of `n` paths: `H`-weighted
/// at-risk means of the baseline variables per arm, integrated by the
/// trapezoid rule. Chunks are reduced in index order, so the result does
/// not depend on the worker count.
pub fn gamma_oracle_simulated(
    scenario: &ScenarioSpec,
    config: &GcdeConfig,
    n: usize,
    seed: u64,
    grid: &[f64],
) -> Result<GammaOracle, StudyError> {
    let lin = LinearOutcome::from_scenario(scenario, config)?;
    let nb = scenario.alphabet().baseline.len();
    let g = grid.len();
    let n = n as u64;
    let chunks: Vec<[ArmSums; 2]> = (0..n.div_ceil(ORACLE_CHUNK))
        .into_par_iter()
        .map(|c| -> Result<[ArmSums; 2], StudyError> {
            let mut sums = [ArmSums::new(nb, g), ArmSums::new(nb, g)];
            for i in c * ORACLE_CHUNK..((c + 1) * ORACLE_CHUNK).min(n) {
                let path = simulate_path(scenario, None, i, &mut individual_rng(seed, i), None)?;
                let a = path.baseline[lin.treatment_slot];
                if !(a == 0 || a == 1) {
                    return Err(StudyError::Shape("treatment must be binary".into()));
                }
                let tau = path
                    .events
                    .iter()
                    .find(|e| e.module == lin.outcome_module || e.module == lin.censor_module)
                    .map_or(f64::INFINITY, |e| e.time);
                let k_events: Vec<(f64, f64)> = path
                    .module_events(lin.mediator_module)
                    .map(|e| (e.time, e.delta as f64))
                    .collect();
                let k0 = scenario.alphabet().modules[lin.mediator_module].initial as f64;
                let arm = &mut sums[a as usize];
                for (gi, &t) in grid.iter().enumerate() {
                    if t > tau {
                        break;
                    }
                    // ∫_0^t K ds
                    let mut level = k0;
                    let mut last = 0.0;
                    let mut integral = 0.0;
                    for &(s, d) in k_events.iter().take_while(|e| e.0 < t) {
                        integral += level * (s - last);
                        level += d;
                        last = s;
                    }
                    integral += level * (t - last);
                    let h = (lin.mediator * integral).exp();
                    arm.h[gi] += h;
                    for (k, row) in arm.hx.iter_mut().enumerate() {
                        row[gi] += h * path.baseline[k] as f64;
                    }
                }
            }
            Ok(sums)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = [ArmSums::new(nb, g), ArmSums::new(nb, g)];
    for c in &chunks {
        total[0].add(&c[0]);
        total[1].add(&c[1]);
    }
    let gamma = |s: &ArmSums| -> Vec<f64> {
        let rate: Vec<f64> = (0..g)
            .map(|gi| lin.intercept + (0..nb).map(|k| lin.baseline[k] * s.hx[k][gi] / s.h[gi]).sum::<f64>())
            .collect();
        let mut acc = 0.0;
        let mut out = vec![0.0; g];
        for gi in 1..g {
            acc += 0.5 * (rate[gi] + rate[gi - 1]) * (grid[gi] - grid[gi - 1]);
            out[gi] = acc;
        }
        out
    };
    let g0 = gamma(&total[0]);
    let g1 = gamma(&total[1]);
    Ok(GammaOracle {
        grid: grid.to_vec(),
        gamma_a: g1.iter().zip(&g0).map(|(a, b)| a - b).collect(),
        gamma0: g0,
    })
}

/// `sup_t |est(t) − truth(t)|` over the grid and both sides of every jump.
pub fn sup_error(est: &StepFunction, truth: impl Fn(f64) -> f64, grid: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for &t in grid {
        worst = worst.max((est.value(t) - truth(t)).abs());
    }
    for &t in est.jump_times() {
        let y = truth(t);
        worst = worst.max((est.value(t) - y).abs()).max((est.left_limit(t) - y).abs());
    }
    worst
}

#[derive(Debug, Clone)]
pub struct StudyOptions {
    pub n: usize,
    pub seed: u64,
    /// Size of each counterfactual oracle cohort.
    pub oracle_n: usize,
    /// Size of the auxiliary simulation behind the `Γ` oracle.
    pub gamma_oracle_n: usize,
    pub bootstrap: usize,
    /// Overrides for the bundled regimes (intervention documents).
    pub theta1: Option<String>,
    pub theta2: Option<String>,
}

impl StudyOptions {
    pub fn new(n: usize, seed: u64) -> StudyOptions {
        StudyOptions {
            n,
            seed,
            oracle_n: 100_000,
            gamma_oracle_n: 1_000_000,
            bootstrap: 200,
            theta1: None,
            theta2: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeSummary {
    pub name: String,
    pub intervention_digest: String,
    pub treatment: f64,
    pub survival: f64,
    pub survival_se: f64,
    pub oracle_survival: f64,
    pub oracle_se: f64,
    pub z: f64,
    pub pass: bool,
    pub ipw_survival: f64,
    pub ipw_se: f64,
    pub mean_weight: f64,
    pub mean_weight_se: f64,
    pub n_eff: f64,
    pub positivity_min: f64,
    pub positivity_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskSummary {
    pub estimate: f64,
    pub se: f64,
    pub oracle: f64,
    pub oracle_se: f64,
    pub z: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaSummary {
    pub sup_error_gamma0: f64,
    pub sup_error_gamma_a: f64,
    pub oracle_closed_form_gap: f64,
    pub skipped_increments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudySummary {
    pub n: usize,
    pub seed: u64,
    pub oracle_n: usize,
    pub gamma_oracle_n: usize,
    pub bootstrap: usize,
    pub scenario_digest: String,
    pub gamma: GammaSummary,
    /// Counterfactual risk under the second regime over that under the
    /// first, at the horizon.
    pub relative_risk: RiskSummary,
    pub regimes: Vec<RegimeSummary>,
}

/// Everything the study computes, for callers that want more than the
/// summary.
#[derive(Debug, Clone)]
pub struct StudyResult {
    pub summary: StudySummary,
    pub fit: GcdeFit,
    pub oracle: GammaOracle,
    pub hazards: Vec<StepFunction>,
    pub weight_grid: Vec<f64>,
    pub weight_means: Vec<(Vec<f64>, Vec<f64>)>,
}

fn survival_at(fit: &GcdeFit, regime: &StaticRegime, t: f64) -> f64 {
    hazard_to_survival(&counterfactual_hazard(fit, regime)).value(t)
}

fn combined_z(a: f64, sa: f64, b: f64, sb: f64) -> f64 {
    let s = (sa * sa + sb * sb).sqrt();
    if s == 0.0 {
        if a == b {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (a - b) / s
    }
}

/// Simulates the bundled study, fits the sequential G-estimator and
/// compares against counterfactual simulation and the `Γ` oracle.
pub fn replicate_study(opts: &StudyOptions) -> Result<StudyResult, StudyError> {
    let (scenario, mut theta1, mut theta2) = bundled()?;
    if let Some(t) = &opts.theta1 {
        theta1 = InterventionSpec::parse(t, &scenario)?;
    }
    if let Some(t) = &opts.theta2 {
        theta2 = InterventionSpec::parse(t, &scenario)?;
    }
    let config = GcdeConfig::default();
    let horizon = scenario.horizon();
    let cohort = simulate_cohort(&scenario, opts.n, opts.seed)?;
    let fit = sequential_g_fit(&cohort, &config)?;

    let grid = uniform_grid(horizon, 400);
    let oracle = gamma_oracle_simulated(
        &scenario,
        &config,
        opts.gamma_oracle_n,
        opts.seed.wrapping_add(3),
        &grid,
    )?;
    let closed = gamma_oracle_closed_form(&scenario, &config, &grid)?;
    let gap = oracle
        .gamma0
        .iter()
        .zip(&closed.gamma0)
        .chain(oracle.gamma_a.iter().zip(&closed.gamma_a))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let gamma = GammaSummary {
        sup_error_gamma0: sup_error(&fit.gamma0, |t| oracle.gamma0_at(t), &grid),
        sup_error_gamma_a: sup_error(&fit.gamma_a, |t| oracle.gamma_a_at(t), &grid),
        oracle_closed_form_gap: gap,
        skipped_increments: fit.skipped.len() + fit.stage1.skipped.len(),
    };

    let thetas = [("theta1", &theta1), ("theta2", &theta2)];
    let regimes: Vec<StaticRegime> = thetas
        .iter()
        .map(|(_, th)| static_regime(&scenario, th, &config))
        .collect::<Result<_, _>>()?;
    let hazards: Vec<StepFunction> = regimes.iter().map(|r| counterfactual_hazard(&fit, r)).collect();

    let boot = bootstrap_se(&cohort, opts.bootstrap, opts.seed.wrapping_add(4), |c| {
        let f = sequential_g_fit(c, &config)?;
        let s1 = survival_at(&f, &regimes[0], horizon);
        let s2 = survival_at(&f, &regimes[1], horizon);
        Ok(vec![s1, s2, (1.0 - s2) / (1.0 - s1)])
    });
    let boot_se = |k: usize| boot.get(k).copied().unwrap_or(f64::NAN);

    let weight_grid = uniform_grid(horizon, 20)[1..].to_vec();
    let survival_h = Functional::NoEventBy {
        module: config.outcome.clone(),
        t: horizon,
    };
    let mut summaries = Vec::new();
    let mut weight_means = Vec::new();
    let mut oracle_freqs = Vec::new();
    for (k, ((name, th), regime)) in thetas.iter().zip(&regimes).enumerate() {
        let cf = simulate_counterfactual(&scenario, th, opts.oracle_n, opts.seed.wrapping_add(1 + k as u64))?;
        let m = cf.len() as f64;
        let oracle_s = cf.paths.iter().map(|p| survival_h.eval(p)).sum::<Result<f64, _>>()? / m;
        let oracle_se = (oracle_s * (1.0 - oracle_s) / m).sqrt();
        oracle_freqs.push((oracle_s, m));

        let survival = survival_at(&fit, regime, horizon);
        let se = boot_se(k);
        let z = combined_z(survival, se, oracle_s, oracle_se);

        let w = cohort_weights(&cohort, &scenario, th)?;
        let finals: Vec<f64> = w.iter().map(|x| x.final_weight).collect();
        let ipw = ipw_from_weights(&cohort, &finals, &survival_h, Normalization::SelfNormalized)?;
        let diag = diagnostics_from(&w, &weight_grid);
        let pos = positivity_check(&cohort, &scenario, th);
        let mean_w = *diag.mean.last().unwrap_or(&f64::NAN);
        let mean_w_se = *diag.se.last().unwrap_or(&f64::NAN);
        weight_means.push((diag.mean.clone(), diag.se.clone()));
        summaries.push(RegimeSummary {
            name: name.to_string(),
            intervention_digest: th.digest(),
            treatment: regime.treatment,
            survival,
            survival_se: se,
            oracle_survival: oracle_s,
            oracle_se,
            z,
            pass: z.abs() <= 3.0,
            ipw_survival: ipw.value,
            ipw_se: ipw.se,
            mean_weight: mean_w,
            mean_weight_se: mean_w_se,
            n_eff: diag.n_eff,
            positivity_min: pos.analytic_min.unwrap_or(f64::NAN),
            positivity_pass: pos.pass,
        });
    }

    let f1 = 1.0 - summaries[0].survival;
    let f2 = 1.0 - summaries[1].survival;
    let rr = f2 / f1;
    let (o1, m1) = oracle_freqs[0];
    let (o2, m2) = oracle_freqs[1];
    let (of1, of2) = (1.0 - o1, 1.0 - o2);
    let orr = of2 / of1;
    let orr_se = orr * ((o2 * of2 / m2) / (of2 * of2) + (o1 * of1 / m1) / (of1 * of1)).sqrt();
    let rr_se = boot_se(2);
    let rz = combined_z(rr, rr_se, orr, orr_se);
    let relative_risk = RiskSummary {
        estimate: rr,
        se: rr_se,
        oracle: orr,
        oracle_se: orr_se,
        z: rz,
        pass: rz.abs() <= 3.0,
    };

    Ok(StudyResult {
        summary: StudySummary {
            n: opts.n,
            seed: opts.seed,
            oracle_n: opts.oracle_n,
            gamma_oracle_n: opts.gamma_oracle_n,
            bootstrap: opts.bootstrap,
            scenario_digest: scenario.digest(),
            gamma,
            relative_risk,
            regimes: summaries,
        },
        fit,
        oracle,
        hazards,
        weight_grid,
        weight_means,
    })
}

/// Long-format `t,coefficient,value,flag` rows for step functions;
/// `skipped` times are listed with flag `skipped`.
pub fn coefficient_csv(parts: &[(&str, &StepFunction)], skipped: &[f64]) -> String {
    let mut out = String::from("t,coefficient,value,flag\n");
    for (name, f) in parts {
        let mut rows: Vec<(f64, f64, &str)> = f
            .jump_times()
            .iter()
            .zip(f.values())
            .map(|(&t, &v)| (t, v, ""))
            .collect();
        rows.extend(skipped.iter().map(|&t| (t, f.value(t), "skipped")));
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (t, v, flag) in rows {
            let _ = writeln!(out, "{},{name},{v},{flag}", format_time(t));
        }
    }
    out
}

/// Writes the study outputs into `dir`.
pub fn write_study(result: &StudyResult, dir: &FsPath) -> Result<(), StudyError> {
    let io = |p: &FsPath| {
        let path = p.display().to_string();
        move |source| StudyError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let write = |name: &str, text: String| -> Result<(), StudyError> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(io(&p))
    };
    let fit = &result.fit;
    let mut skipped = fit.skipped.clone();
    skipped.extend(&fit.stage1.skipped);
    skipped.sort_by(f64::total_cmp);
    write(
        "gamma.csv",
        coefficient_csv(
            &[("gamma0", &fit.gamma0), ("gammaA", &fit.gamma_a), ("psiK", &fit.psi_k)],
            &skipped,
        ),
    )?;

    let mut oracle = String::from("t,gamma0,gammaA\n");
    for ((t, g0), ga) in result
        .oracle
        .grid
        .iter()
        .zip(&result.oracle.gamma0)
        .zip(&result.oracle.gamma_a)
    {
        let _ = writeln!(oracle, "{},{g0},{ga}", format_time(*t));
    }
    write("gamma_oracle.csv", oracle)?;

    let mut hazard = String::from("regime,t,cumulative_hazard,survival\n");
    for (k, h) in result.hazards.iter().enumerate() {
        let s = hazard_to_survival(h);
        for ((t, v), sv) in h.jump_times().iter().zip(h.values()).zip(s.values()) {
            let _ = writeln!(hazard, "theta{},{},{v},{sv}", k + 1, format_time(*t));
        }
    }
    write("hazard.csv", hazard)?;

    let mut ratio = String::from("t,cumulative_hazard_theta1,cumulative_hazard_theta2,ratio\n");
    for &t in &result.weight_grid {
        let (a, b) = (result.hazards[0].value(t), result.hazards[1].value(t));
        if a != 0.0 {
            let _ = writeln!(ratio, "{},{a},{b},{}", format_time(t), b / a);
        }
    }
    write("hazard_ratio.csv", ratio)?;

    let mut weights = String::from("regime,t,mean_weight,se\n");
    for (k, (mean, se)) in result.weight_means.iter().enumerate() {
        for ((t, m), s) in result.weight_grid.iter().zip(mean).zip(se) {
            let _ = writeln!(weights, "theta{},{},{m},{s}", k + 1, format_time(*t));
        }
    }
    write("weights.csv", weights)?;

    write(
        "summary.toml",
        toml::to_string(&result.summary).expect("summary serializes"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate_dependencies;

    #[test]
    fn bundled_assets_parse_and_validate() {
        let (s, t1, t2) = bundled().unwrap();
        assert!(crate::scenario::validate_intervention(&s, &t1).is_valid());
        assert!(crate::scenario::validate_intervention(&s, &t2).is_valid());
        let g = crate::graph::LocalIndependenceGraph::parse(GRAPH_TXT).unwrap();
        assert_eq!(s.graph(), Some(&g));
        assert!(validate_dependencies(&g, &s).is_clean());
    }

    #[test]
    fn linear_outcome_coefficients() {
        let (s, _, _) = bundled().unwrap();
        let lin = LinearOutcome::from_scenario(&s, &GcdeConfig::default()).unwrap();
        assert!((lin.intercept - 0.5).abs() < 1e-15);
        assert!((lin.mediator + 0.05).abs() < 1e-15);
        // Baseline order is W, A, L.
        let expected = [0.6, -0.2, 0.4];
        for (c, e) in lin.baseline.iter().zip(expected) {
            assert!((c - e).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_gamma_derivative_matches_tilted_means() {
        let (s, _, _) = bundled().unwrap();
        let grid = uniform_grid(1.0, 1000);
        let o = gamma_oracle_closed_form(&s, &GcdeConfig::default(), &grid).unwrap();
        // Arm 0: L = 0, so the hazard is 0.5 + 0.6·E[W | survived].
        let t = 0.5;
        let w = 0.4 * (-1.1f64 * t).exp() / (0.6 * (-0.5f64 * t).exp() + 0.4 * (-1.1f64 * t).exp());
        let rate = 0.5 + 0.6 * w;
        let k = 500;
        let numeric = (o.gamma0[k + 1] - o.gamma0[k - 1]) / (grid[k + 1] - grid[k - 1]);
        assert!((numeric - rate).abs() < 1e-6, "{numeric} vs {rate}");
    }

    #[test]
    fn simulated_oracle_tracks_closed_form() {
        let (s, _, _) = bundled().unwrap();
        let grid = uniform_grid(1.0, 100);
        let cfg = GcdeConfig::default();
        let sim = gamma_oracle_simulated(&s, &cfg, 100_000, 5, &grid).unwrap();
        let exact = gamma_oracle_closed_form(&s, &cfg, &grid).unwrap();
        for k in 0..grid.len() {
            assert!((sim.gamma0[k] - exact.gamma0[k]).abs() < 0.01);
            assert!((sim.gamma_a[k] - exact.gamma_a[k]).abs() < 0.01);
        }
    }
}
