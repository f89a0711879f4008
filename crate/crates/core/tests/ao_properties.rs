use meris_core::ao::{initialize, run, run_from, AoError, Termination};
use meris_core::config::{load_config, SchemeFlags, SystemConfig};
use meris_core::metrics::{audit, energy_efficiency, rates};
use proptest::prelude::*;

fn tiny(scheme: SchemeFlags, seed: u64) -> SystemConfig {
    let mut c = load_config("[system]\nbs_antennas = 3\nris_elements = 4\nusers = 2\npaths = 2\n").unwrap();
    c.scheme = scheme;
    c.seed = seed;
    c
}

#[test]
fn default_scenario_initializes_in_at_least_90_of_100_seeds() {
    let c = load_config("").unwrap();
    let mut feasible = 0;
    for seed in 0..100 {
        let mut c = c.clone();
        c.seed = seed;
        c.max_redraws = 0;
        match initialize(&c, 0) {
            Ok(_) => feasible += 1,
            Err(AoError::Infeasible { .. }) => {}
            Err(e) => panic!("{e}"),
        }
    }
    assert!(feasible >= 90, "{feasible}/100 feasible");
}

#[test]
fn run_from_initialization_matches_run() {
    let c = tiny(SchemeFlags::MA_ME, 5);
    let (init, redraws) = initialize(&c, 0).unwrap();
    let (a, ra) = run(&c, 0).unwrap();
    let (b, rb) = run_from(init, &c, 0, redraws);
    assert_eq!(ra.ee_per_iteration, rb.ee_per_iteration);
    assert_eq!(a.powers, b.powers);
}

#[test]
fn iteration_cap_is_respected() {
    let mut c = tiny(SchemeFlags::MA_ME, 6);
    c.tolerances.n_max_ao = 2;
    c.tolerances.ao_eps = 0.0;
    let (_, r) = run(&c, 0).unwrap();
    assert!(r.iterations_used <= 2);
    assert_eq!(r.ee_per_iteration.len(), r.iterations_used + 1);
    if r.iterations_used == 2 {
        assert_eq!(r.termination, Termination::MaxIterations);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn ao_keeps_every_invariant(seed in 0u64..10_000, scheme in 0usize..4, rate in 0.0f64..2.0) {
        let mut c = tiny(SchemeFlags::ALL[scheme], seed);
        c.rate_threshold_bpshz = rate;
        let Ok((init, redraws)) = initialize(&c, 0) else { return Ok(()) };
        let ee0 = energy_efficiency(&init, &c);
        let (out, r) = run_from(init.clone(), &c, 0, redraws);
        prop_assert!(r.iterations_used <= c.tolerances.n_max_ao);
        prop_assert_eq!(r.ee_per_iteration[0], ee0);
        for w in r.ee_per_iteration.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9);
        }
        prop_assert!(audit(&out, &c).passes(c.tolerances.kkt_eps));
        prop_assert!(rates(&out, &c).iter().all(|&x| x >= rate - 1e-9));
        if !c.scheme.bs_movable {
            prop_assert_eq!(out.bs_positions(), init.bs_positions());
        }
        if !c.scheme.ris_movable {
            prop_assert_eq!(out.ris_positions(), init.ris_positions());
        }
    }
}
