//! Evaluator properties against an independent recount.

use std::sync::Arc;

use kgce_core::env::StepFlags;
use kgce_core::eval::{
    classify_backtrack, evaluate_episode, CpaDefinition, EpisodeRecord, MetricsReport, StepRecord, TerminalCause,
};
use kgce_core::task_graph::TaskGraph;
use kgce_testkit::{oracle_metrics, random_dag, random_episode, OracleMetrics};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn episode(seed: u64) -> EpisodeRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_steps = rand::Rng::gen_range(&mut rng, 1..=12);
    let graph = Arc::new(TaskGraph::new(random_dag(&mut rng, 6, max_steps)).unwrap());
    random_episode(&mut rng, graph, 12)
}

fn assert_matches(m: &MetricsReport, o: &OracleMetrics) {
    let c = &m.counts;
    assert_eq!(
        (c.nodes, c.completed_nodes, c.key_steps, c.covered_key_steps, c.onu, c.can, c.io, c.oor_count),
        (o.nodes, o.completed, o.key, o.covered, o.onu, o.can, o.io, o.oor)
    );
    let bits = |v: [f64; 7]| v.map(f64::to_bits);
    assert_eq!(
        bits([m.cr, m.cpa, m.precision, m.recall, m.f1, m.br, m.oor_rate]),
        bits([o.cr, o.cpa, o.precision, o.recall, o.f1, o.br, o.oor_rate])
    );
    assert_eq!(m.rms, o.rms);
}

fn oor_step() -> StepRecord {
    StepRecord {
        action: Some("tap_xy(-1, -1)".into()),
        flags: StepFlags {
            out_of_range: true,
            ..StepFlags::default()
        },
        is_back_action: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn matches_brute_force_recount(seed in any::<u64>()) {
        let ep = episode(seed);
        for def in [CpaDefinition::SubgoalsPerAction, CpaDefinition::EffectiveActions] {
            let m = evaluate_episode(&ep, def).unwrap();
            assert_matches(&m, &oracle_metrics(&ep, def));
        }
    }

    #[test]
    fn ratios_stay_in_unit_interval(seed in any::<u64>()) {
        let m = evaluate_episode(&episode(seed), CpaDefinition::default()).unwrap();
        for v in [m.cr, m.cpa, m.precision, m.recall, m.f1, m.br, m.oor_rate] {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
        if m.precision == m.recall {
            prop_assert_eq!(m.f1.to_bits(), m.precision.to_bits());
        }
        prop_assert!(m.f1 <= m.precision.max(m.recall));
    }

    #[test]
    fn evaluation_is_pure(seed in any::<u64>()) {
        let ep = episode(seed);
        let a = evaluate_episode(&ep, CpaDefinition::default()).unwrap();
        let b = evaluate_episode(&ep, CpaDefinition::default()).unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn ineffective_out_of_range_step_only_costs_efficiency(seed in any::<u64>()) {
        let ep = episode(seed);
        prop_assume!(ep.steps.len() < ep.task.spec().max_steps);
        prop_assume!(ep.terminal != TerminalCause::MaxStepsReached);
        let before = evaluate_episode(&ep, CpaDefinition::default()).unwrap();
        let mut longer = ep.clone();
        longer.steps.push(oor_step());
        let after = evaluate_episode(&longer, CpaDefinition::default()).unwrap();
        prop_assert_eq!(after.cr, before.cr);
        prop_assert_eq!(after.counts.can, before.counts.can);
        prop_assert_eq!(after.counts.covered_key_steps, before.counts.covered_key_steps);
        if before.precision > 0.0 {
            prop_assert!(after.precision < before.precision);
        }
        if before.cpa > 0.0 {
            prop_assert!(after.cpa < before.cpa);
        }
        prop_assert!(after.oor_rate > before.oor_rate || before.oor_rate == 1.0);
    }
}

#[test]
fn backtrack_classification_follows_flags() {
    let mut s = oor_step();
    assert!(!classify_backtrack(&s));
    s.flags.revisit = true;
    assert!(classify_backtrack(&s));
    s.flags.revisit = false;
    s.is_back_action = true;
    assert!(classify_backtrack(&s));
}
