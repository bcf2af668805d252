use std::collections::BTreeSet;

use ctcausal::io::{read_cohort, write_cohort};
use ctcausal::simulate::{apply_action, simulate_cohort, simulate_counterfactual, trace_reads};
use ctcausal::study::bundled;
use ctcausal::weights::cohort_weights;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn cohort_files_round_trip(n in 1usize..60, seed in any::<u64>(), counterfactual in any::<bool>()) {
        let (s, t1, _) = bundled().unwrap();
        let cohort = if counterfactual {
            simulate_counterfactual(&s, &t1, n, seed).unwrap()
        } else {
            simulate_cohort(&s, n, seed).unwrap()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_cohort(&cohort, &path).unwrap();
        let back = read_cohort(&path, &s).unwrap();
        prop_assert_eq!(&back.paths, &cohort.paths);
        prop_assert_eq!(back.seed, cohort.seed);
        prop_assert_eq!(&back.regime, &cohort.regime);
        prop_assert_eq!(&back.scenario_digest, &cohort.scenario_digest);
    }
}

#[test]
fn simulator_reads_only_declared_dependencies() {
    let (s, _, _) = bundled().unwrap();
    let trace = trace_reads(&s, 500, 4).unwrap();
    let alphabet = s.alphabet();
    let declared: Vec<(String, BTreeSet<String>)> = s.declared_dependencies();
    for (j, reads) in trace.iter().enumerate() {
        let name = &alphabet.modules[j].name;
        let deps = &declared.iter().find(|(n, _)| n == name).unwrap().1;
        for &slot in reads {
            let read = alphabet.slot_name(slot);
            // A module's own state is always in its closure.
            assert!(read == name || deps.contains(read), "`{name}` read `{read}`");
        }
    }
}

#[test]
fn action_is_identity_on_counterfactual_paths() {
    let (s, t1, t2) = bundled().unwrap();
    for theta in [&t1, &t2] {
        let cf = simulate_counterfactual(&s, theta, 300, 12).unwrap();
        for p in &cf.paths {
            assert_eq!(&apply_action(p, &s, theta).unwrap(), p);
        }
    }
}

#[test]
fn common_random_numbers_share_pre_intervention_history() {
    let (s, t1, _) = bundled().unwrap();
    let w = s.alphabet().baseline_index("W").unwrap();
    let factual = simulate_cohort(&s, 200, 21).unwrap();
    let cf = simulate_counterfactual(&s, &t1, 200, 21).unwrap();
    for (a, b) in factual.paths.iter().zip(&cf.paths) {
        assert_eq!(a.baseline[w], b.baseline[w]);
    }
}

#[test]
fn weights_vanish_off_regime() {
    let (s, t1, _) = bundled().unwrap();
    let a = s.alphabet().baseline_index("A").unwrap();
    let cohort = simulate_cohort(&s, 300, 8).unwrap();
    let w = cohort_weights(&cohort, &s, &t1).unwrap();
    for (p, traj) in cohort.paths.iter().zip(&w) {
        if p.baseline[a] == 1 {
            assert_eq!(traj.final_weight, 0.0);
        }
        // A = 0 has probability 1/2, so the baseline factor is 2.
        if p.baseline[a] == 0 {
            assert!((traj.weight_at(0.0) - 2.0).abs() < 1e-12);
        }
    }
}
