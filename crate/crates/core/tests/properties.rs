use greenlab::calibration::{objective, Weight};
use greenlab::io::{format_parameters, format_target, parse_parameters, parse_target, ParameterFile};
use greenlab::oracle::{compare_outputs, simulate_naive};
use greenlab::targets::{synthetic_script, synthetic_target, DataClass, ScriptProfile};
use greenlab::{simulate, GrowthParameters, ScriptEntry, ZoneRuleSet};
use proptest::prelude::*;
use std::collections::BTreeMap;
use std::time::Instant;

fn script_strategy(max_cycles: u32) -> impl Strategy<Value = Vec<ScriptEntry>> {
    prop::collection::vec((2u32..8, 0u32..3, 0u32..3, 0u32..3), 1..=max_cycles as usize).prop_map(
        |rows| {
            let n = rows.len();
            rows.into_iter()
                .enumerate()
                .map(|(i, (m, b2, b3, b4))| {
                    let mut branches = Vec::new();
                    if i + 1 < n {
                        let mut room = m;
                        for (pa, want) in [(2u8, b2), (3, b3), (4, b4)] {
                            let c = want.min(room);
                            if c > 0 {
                                branches.push((pa, c));
                                room -= c;
                            }
                        }
                    }
                    ScriptEntry {
                        gu_index: i as u32 + 1,
                        metamer_count: m,
                        branches,
                    }
                })
                .collect()
        },
    )
}

fn params_strategy() -> impl Strategy<Value = GrowthParameters> {
    (0.02f64..0.3, 0.0f64..=1.0, 0.5f64..4.0, 0.5f64..5.0, any::<bool>()).prop_map(
        |(v, lambda, gamma, p_r, inclusive)| {
            let mut p = GrowthParameters::reference();
            p.v_env = vec![v];
            p.lambda_mix = lambda;
            p.gamma = gamma;
            p.p_r = p_r;
            p.leaves_above_inclusive = inclusive;
            p
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn factorized_engine_matches_enumeration(script in script_strategy(6), p in params_strategy()) {
        let z = ZoneRuleSet::reference();
        let n = script.len() as u32;
        let fact = simulate(&p, &z, &script, 0, n).unwrap();
        let naive = simulate_naive(&p, &z, &script, 0, n).unwrap();
        let diffs = compare_outputs(&fact, &naive, 1e-9);
        prop_assert!(diffs.is_empty(), "{:?}", diffs);
    }

    #[test]
    fn runs_conserve_mass(script in script_strategy(10), p in params_strategy()) {
        let z = ZoneRuleSet::reference();
        let out = simulate(&p, &z, &script, 0, script.len() as u32).unwrap();
        for c in &out.cycles {
            let a = &c.allocation;
            prop_assert!((a.q - a.q_s - a.q_r).abs() <= 1e-9 * a.q.max(1e-300));
            prop_assert!((c.ring_total - a.q_r).abs() <= 1e-9 * a.q_r.max(1e-300));
        }
        prop_assert!(out.totals.relative_imbalance() <= 1e-6);
    }

    #[test]
    fn runs_are_deterministic(script in script_strategy(8), p in params_strategy()) {
        let z = ZoneRuleSet::reference();
        let n = script.len() as u32;
        prop_assert_eq!(simulate(&p, &z, &script, 0, n).unwrap(), simulate(&p, &z, &script, 0, n).unwrap());
    }

    #[test]
    fn parameter_files_round_trip(p in params_strategy(), sp0 in 1e-4f64..1.0, alpha in 0.05f64..=1.0) {
        let mut pf = ParameterFile { params: p, ..ParameterFile::default() };
        pf.params.sp0 = sp0;
        pf.params.alpha = alpha;
        let back = parse_parameters(&format_parameters(&pf), "mem").unwrap();
        prop_assert_eq!(back, pf);
    }

    #[test]
    fn target_files_round_trip(script in script_strategy(8), p in params_strategy()) {
        let z = ZoneRuleSet::reference();
        let rings: Vec<u32> = (1..=script.len() as u32).step_by(2).collect();
        let d = synthetic_target(&p, &z, &script, 0, &rings).unwrap();
        prop_assert_eq!(parse_target(&format_target(&d), "mem").unwrap(), d);
    }

    #[test]
    fn objective_ignores_row_order(seed in any::<u64>(), scale in 0.8f64..1.2) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let p = GrowthParameters::reference();
        let z = ZoneRuleSet::reference();
        let d = synthetic_target(&p, &z, &synthetic_script(7, &ScriptProfile::tree1_like()), 0, &[1, 3]).unwrap();
        let mut shuffled = d.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        shuffled.trunk_profile.shuffle(&mut rng);
        shuffled.ring_matrix.shuffle(&mut rng);
        shuffled.branch_compartments.shuffle(&mut rng);
        let mut q = p.clone();
        q.v_env.truncate(1);
        q.wood_density *= scale;
        let w: BTreeMap<DataClass, Weight> = DataClass::ALL.iter().map(|&c| (c, Weight::Auto)).collect();
        let a = objective(&q, &z, &[d], &w);
        let b = objective(&q, &z, &[shuffled], &w);
        prop_assert!(a.is_finite() && a > 0.0);
        prop_assert!((a - b).abs() <= 1e-12 * a, "{} vs {}", a, b);
    }
}

#[test]
fn tree_scale_run_is_fast() {
    let p = GrowthParameters::reference();
    let z = ZoneRuleSet::reference();
    let script = synthetic_script(46, &ScriptProfile::tree2_like());
    let t = Instant::now();
    let out = simulate(&p, &z, &script, 1, 46).unwrap();
    assert!(t.elapsed().as_secs_f64() < 1.0, "{:?}", t.elapsed());
    assert_eq!(out.cycles.len(), 46);
}
