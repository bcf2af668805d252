//! Command-line interface.
//!
//! Exit codes: 0 on success, 1 when an input fails validation or a check
//! does not pass, 2 on a usage error. `--scenario` defaults to the bundled
//! study scenario.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path as FsPath, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::estimators::{
    aalen_fit, counterfactual_hazard, hazard_to_survival, sequential_g_fit, static_regime, Covariate, GcdeConfig,
};
use crate::graph::{validate_dependencies, LocalIndependenceGraph};
use crate::identify::{gformula_direct_effect, GformulaTables, JointModel, ValueRule};
use crate::io::{format_time, read_cohort, write_cohort};
use crate::scenario::{validate_intervention, InterventionSpec, ScenarioSpec};
use crate::simulate::{simulate_cohort, simulate_counterfactual};
use crate::study::{coefficient_csv, replicate_study, write_study, StudyOptions, SCENARIO_TOML};
use crate::weights::{cohort_weights, positivity_check};

#[derive(Debug, Parser)]
#[command(
    name = "ctcausal",
    version,
    about = "Continuous-time causal inference on event histories"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ScenarioArg {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a factual or counterfactual cohort.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArg,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        intervene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-path log-weight trajectories.
    Weights {
        #[command(flatten)]
        scenario: ScenarioArg,
        #[arg(long)]
        intervene: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Positivity report for a regime on a cohort.
    CheckPositivity {
        #[command(flatten)]
        scenario: ScenarioArg,
        #[arg(long)]
        intervene: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Checks declared dependencies against a local independence graph.
    CheckGraph {
        #[command(flatten)]
        scenario: ScenarioArg,
        /// Graph file; defaults to the graph embedded in the scenario.
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aalen additive hazards fit.
    EstimateAalen {
        #[command(flatten)]
        scenario: ScenarioArg,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, default_value = "B")]
        outcome: String,
        #[arg(long, default_value = "1")]
        covariates: String,
        /// Comma-separated censoring modules.
        #[arg(long, default_value = "C")]
        censor: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sequential G-estimator and the counterfactual hazard of a regime.
    EstimateGcde {
        #[command(flatten)]
        scenario: ScenarioArg,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        intervene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Baseline g-formula for the controlled direct effect.
    Gformula {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        a: i64,
        #[arg(long)]
        krule: PathBuf,
        /// Outcome indicator `NAME=VALUE`.
        #[arg(long, default_value = "B=1")]
        h: String,
        #[arg(long, default_value = "A")]
        treatment: String,
        #[arg(long, default_value = "L")]
        covariate: String,
        #[arg(long, default_value = "K")]
        mediator: String,
    },
    /// Runs the bundled dynamic study against its oracles.
    ReplicateStudy {
        #[arg(long, default_value_t = 8000)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "study")]
        out: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        oracle_n: usize,
        #[arg(long, default_value_t = 1_000_000)]
        gamma_oracle_n: usize,
        #[arg(long, default_value_t = 200)]
        bootstrap: usize,
        #[arg(long)]
        theta1: Option<PathBuf>,
        #[arg(long)]
        theta2: Option<PathBuf>,
    },
}

struct Failure {
    code: i32,
    msg: String,
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Failure {
        Failure {
            code: 1,
            msg: e.to_string(),
        }
    }
}

type Outcome = Result<i32, Failure>;

fn read(path: &FsPath) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure {
        code: 1,
        msg: format!("{}: {e}", path.display()),
    })
}

fn write(path: &FsPath, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure {
        code: 1,
        msg: format!("{}: {e}", path.display()),
    })
}

fn load_scenario(arg: &ScenarioArg) -> Result<ScenarioSpec, Failure> {
    match &arg.scenario {
        Some(p) => ScenarioSpec::parse(&read(p)?).map_err(|e| Failure {
            code: 1,
            msg: format!("{}: {e}", p.display()),
        }),
        None => Ok(ScenarioSpec::parse(SCENARIO_TOML)?),
    }
}

fn load_intervention(path: &FsPath, scenario: &ScenarioSpec) -> Result<InterventionSpec, Failure> {
    let theta = InterventionSpec::parse(&read(path)?, scenario).map_err(|e| Failure {
        code: 1,
        msg: format!("{}: {e}", path.display()),
    })?;
    let report = validate_intervention(scenario, &theta);
    if let Some(v) = report.violations.first() {
        return Err(Failure {
            code: 1,
            msg: format!("{}: {v}", path.display()),
        });
    }
    Ok(theta)
}

fn emit(out: Option<&FsPath>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(command: Command) -> Outcome {
    match command {
        Command::Simulate {
            scenario,
            n,
            seed,
            intervene,
            out,
        } => {
            let s = load_scenario(&scenario)?;
            let cohort = match intervene {
                Some(p) => simulate_counterfactual(&s, &load_intervention(&p, &s)?, n, seed)?,
                None => simulate_cohort(&s, n, seed)?,
            };
            write_cohort(&cohort, &out)?;
            Ok(0)
        }
        Command::Weights {
            scenario,
            intervene,
            cohort,
            out,
        } => {
            let s = load_scenario(&scenario)?;
            let theta = load_intervention(&intervene, &s)?;
            let cohort = read_cohort(&cohort, &s)?;
            let w = cohort_weights(&cohort, &s, &theta)?;
            let mut text = String::from("id,t,log_w_total");
            if let Some(first) = w.first() {
                for (name, _) in &first.factors {
                    let _ = write!(text, ",log_w_{name}");
                }
            }
            text.push('\n');
            let horizon = s.horizon();
            for (path, traj) in cohort.paths.iter().zip(&w) {
                let mut times: Vec<f64> = traj.total.knots().to_vec();
                times.push(horizon);
                times.dedup();
                for t in times {
                    let _ = write!(text, "{},{},{}", path.id, format_time(t), traj.total.value(t));
                    for (_, f) in &traj.factors {
                        let _ = write!(text, ",{}", f.value(t));
                    }
                    text.push('\n');
                }
            }
            write(&out, &text)?;
            Ok(0)
        }
        Command::CheckPositivity {
            scenario,
            intervene,
            cohort,
            out,
        } => {
            let s = load_scenario(&scenario)?;
            let theta = InterventionSpec::parse(&read(&intervene)?, &s)?;
            let cohort = read_cohort(&cohort, &s)?;
            let report = positivity_check(&cohort, &s, &theta);
            emit(out.as_deref(), &toml::to_string(&report)?)?;
            if !report.pass {
                eprintln!("positivity check failed: {}", report.flags.join("; "));
            }
            Ok(if report.pass { 0 } else { 1 })
        }
        Command::CheckGraph { scenario, graph, out } => {
            let s = load_scenario(&scenario)?;
            let g = match graph {
                Some(p) => LocalIndependenceGraph::parse(&read(&p)?).map_err(|e| Failure {
                    code: 1,
                    msg: format!("{}: {e}", p.display()),
                })?,
                None => s.graph().cloned().ok_or_else(|| Failure {
                    code: 1,
                    msg: "scenario has no graph; pass --graph".into(),
                })?,
            };
            let report = validate_dependencies(&g, &s);
            emit(out.as_deref(), &toml::to_string(&report)?)?;
            for (node, dep) in &report.violations {
                eprintln!("`{node}` depends on `{dep}`, which is outside its closure");
            }
            for node in &report.missing_nodes {
                eprintln!("`{node}` is not a graph node");
            }
            Ok(if report.is_clean() { 0 } else { 1 })
        }
        Command::EstimateAalen {
            scenario,
            cohort,
            outcome,
            covariates,
            censor,
            out,
        } => {
            let s = load_scenario(&scenario)?;
            let cohort = read_cohort(&cohort, &s)?;
            let covs = Covariate::parse_list(&covariates, s.alphabet())?;
            let censor: Vec<&str> = censor.split(',').map(str::trim).filter(|c| !c.is_empty()).collect();
            let fit = aalen_fit(&cohort, &outcome, &covs, &censor)?;
            let var_labels: Vec<String> = fit.labels.iter().map(|l| format!("var_{l}")).collect();
            let mut parts: Vec<(&str, &_)> = fit.labels.iter().map(String::as_str).zip(&fit.coefficients).collect();
            parts.extend(var_labels.iter().map(String::as_str).zip(&fit.variances));
            write(&out, &coefficient_csv(&parts, &fit.skipped))?;
            Ok(0)
        }
        Command::EstimateGcde {
            scenario,
            cohort,
            intervene,
            out,
        } => {
            let s = load_scenario(&scenario)?;
            let theta = load_intervention(&intervene, &s)?;
            let cohort = read_cohort(&cohort, &s)?;
            let config = GcdeConfig::default();
            let fit = sequential_g_fit(&cohort, &config)?;
            let regime = static_regime(&s, &theta, &config)?;
            let hazard = counterfactual_hazard(&fit, &regime);
            let survival = hazard_to_survival(&hazard);
            let mut skipped = fit.skipped.clone();
            skipped.extend(&fit.stage1.skipped);
            skipped.sort_by(f64::total_cmp);
            let text = coefficient_csv(
                &[
                    ("gamma0", &fit.gamma0),
                    ("gammaA", &fit.gamma_a),
                    ("psiK", &fit.psi_k),
                    ("cumulative_hazard", &hazard),
                    ("survival", &survival),
                ],
                &skipped,
            );
            write(&out, &text)?;
            Ok(0)
        }
        Command::Gformula {
            model,
            a,
            krule,
            h,
            treatment,
            covariate,
            mediator,
        } => {
            let model = JointModel::parse(&read(&model)?)?;
            let rule = ValueRule::parse(&read(&krule)?)?;
            let (outcome, value) = h.split_once('=').ok_or_else(|| Failure {
                code: 2,
                msg: format!("--h expects NAME=VALUE, got `{h}`"),
            })?;
            let value: i64 = value.trim().parse().map_err(|_| Failure {
                code: 2,
                msg: format!("--h expects an integer value, got `{value}`"),
            })?;
            let tables = GformulaTables::from_model(&model, &treatment, &covariate, &mediator, outcome.trim())?;
            let p = gformula_direct_effect(&tables, a, &rule, &|b| f64::from(b == value))?;
            println!("{p}");
            Ok(0)
        }
        Command::ReplicateStudy {
            n,
            seed,
            out,
            oracle_n,
            gamma_oracle_n,
            bootstrap,
            theta1,
            theta2,
        } => {
            let mut opts = StudyOptions::new(n, seed);
            opts.oracle_n = oracle_n;
            opts.gamma_oracle_n = gamma_oracle_n;
            opts.bootstrap = bootstrap;
            opts.theta1 = theta1.as_deref().map(read).transpose()?;
            opts.theta2 = theta2.as_deref().map(read).transpose()?;
            let result = replicate_study(&opts)?;
            write_study(&result, &out)?;
            Ok(0)
        }
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match pool.install(|| execute(cli.command)) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            f.code
        }
    }
}
