use mfn::engine::{run, Engine, EngineConfig, Init, Schedule, Status};
use mfn::synth::random_network;
use proptest::prelude::*;

fn cfg(seed: u64) -> EngineConfig {
    EngineConfig {
        seed,
        trace: true,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn serial_runs_are_monotone_and_finish_with_no_abstainers(seed in 0u64..10_000) {
        let net = random_network(seed, 20, 10);
        let mut engine = Engine::new(&net, cfg(seed), Init::Evidence).unwrap();
        let mut prev = engine.tuple();
        while !engine.finished() {
            let r = engine.step().unwrap();
            prop_assert!(!r.tuple.exceeds(&prev, 1e-9 * prev.active_cost.abs().max(1.0)));
            prev = r.tuple;
        }
        prop_assert_eq!(engine.tuple().abstain_count, 0);
    }

    #[test]
    fn reacting_set_matches_full_recompute(seed in 0u64..10_000) {
        let net = random_network(seed, 12, 8);
        let a = run(&net, &cfg(seed), Init::Evidence).unwrap();
        let b = run(&net, &EngineConfig { recompute_all: true, ..cfg(seed) }, Init::Evidence).unwrap();
        prop_assert_eq!(a.votes, b.votes);
        prop_assert_eq!(a.assignment, b.assignment);
        prop_assert_eq!(a.stats.iterations, b.stats.iterations);
    }

    #[test]
    fn simultaneous_runs_are_monotone(seed in 0u64..10_000, fraction in 0.05f64..1.0) {
        let net = random_network(seed, 20, 10);
        let c = EngineConfig { schedule: Schedule::Simultaneous { fraction }, ..cfg(seed) };
        let r = run(&net, &c, Init::Evidence).unwrap();
        prop_assert_eq!(r.status, Status::Converged);
        for w in r.trace.windows(2) {
            let tol = 1e-9 * w[0].active_cost.abs().max(1.0);
            prop_assert!(
                w[1].abstain_count < w[0].abstain_count
                    || (w[1].abstain_count == w[0].abstain_count && w[1].active_cost <= w[0].active_cost + tol)
            );
        }
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let solve = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            (0..40u64)
                .map(|seed| {
                    let net = random_network(seed, 20, 10);
                    let c = EngineConfig {
                        schedule: Schedule::Simultaneous { fraction: 0.3 },
                        ..cfg(seed)
                    };
                    let r = run(&net, &c, Init::Evidence).unwrap();
                    (r.votes, r.assignment, r.stats, r.trace)
                })
                .collect::<Vec<_>>()
        })
    };
    assert_eq!(solve(1), solve(8));
}

#[test]
fn same_seed_same_result() {
    for seed in 0..20u64 {
        let net = random_network(seed, 20, 10);
        let a = run(&net, &cfg(seed), Init::Evidence).unwrap();
        let b = run(&net, &cfg(seed), Init::Evidence).unwrap();
        assert_eq!(a.votes, b.votes);
        assert_eq!(a.trace, b.trace);
    }
}
