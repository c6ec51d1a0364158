//! Random generators and independent oracles for the kgce test suites.
//!
//! The oracles here deliberately recount from the raw episode with plain
//! loops instead of calling into the evaluator.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use kgce_core::checker::CheckerSpec;
use kgce_core::env::{Action, StepFlags};
use kgce_core::eval::{CpaDefinition, EpisodeRecord, StepRecord, TerminalCause};
use kgce_core::schema;
use kgce_core::task_graph::{SubGoalNode, TaskGraph, TaskSpec};
use kgce_core::Platform;
use rand::seq::SliceRandom;
use rand::Rng;

/// The repository's `fixtures/` directory.
pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn node(id: &str, key_step: bool) -> SubGoalNode {
    SubGoalNode {
        id: id.to_string(),
        description: format!("reach {id}"),
        key_step,
        checker: CheckerSpec::new("on_page", [("app", "app"), ("page", id)]),
    }
}

/// A random DAG over `n{i}` ids. Edges only run from lower to higher index,
/// so the result is acyclic by construction.
pub fn random_dag(rng: &mut impl Rng, max_nodes: usize, max_steps: usize) -> TaskSpec {
    let n = rng.gen_range(1..=max_nodes);
    let ids: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
    let mut edges = Vec::new();
    for j in 0..n {
        for i in 0..j {
            if rng.gen_bool(0.35) {
                edges.push((ids[i].clone(), ids[j].clone()));
            }
        }
    }
    // Shuffle declaration order so nothing relies on it.
    let mut nodes: Vec<SubGoalNode> = ids.iter().map(|id| node(id, rng.gen_bool(0.6))).collect();
    nodes.shuffle(rng);
    edges.shuffle(rng);
    TaskSpec {
        schema: schema::TASK.to_string(),
        task_id: "random".to_string(),
        instruction: "random task".to_string(),
        nodes,
        edges,
        platforms: vec![Platform::Mobile],
        max_steps,
    }
}

/// Predecessor sets computed straight from the edge list.
pub fn preds_by_scan(spec: &TaskSpec) -> BTreeMap<String, BTreeSet<String>> {
    let mut preds: BTreeMap<String, BTreeSet<String>> =
        spec.nodes.iter().map(|n| (n.id.clone(), BTreeSet::new())).collect();
    for (a, b) in &spec.edges {
        preds.get_mut(b).expect("edge target exists").insert(a.clone());
    }
    preds
}

pub fn random_flags(rng: &mut impl Rng) -> StepFlags {
    let out_of_range = rng.gen_bool(0.15);
    StepFlags {
        out_of_range,
        invalid_target: !out_of_range && rng.gen_bool(0.2),
        effect_applied: !out_of_range && rng.gen_bool(0.6),
        revisit: rng.gen_bool(0.25),
    }
}

/// A well-formed random episode on `graph`: completions respect the DAG and
/// the step budget is honoured.
pub fn random_episode(rng: &mut impl Rng, graph: Arc<TaskGraph>, max_len: usize) -> EpisodeRecord {
    let budget = graph.spec().max_steps;
    let len = rng.gen_range(0..=max_len.min(budget));
    let steps: Vec<StepRecord> = (0..len)
        .map(|_| {
            let back = rng.gen_bool(0.2);
            StepRecord {
                action: Some(if back { "back()" } else { "tap(x)" }.to_string()),
                flags: random_flags(rng),
                is_back_action: back,
            }
        })
        .collect();
    let preds = preds_by_scan(graph.spec());
    let mut done: BTreeSet<String> = BTreeSet::new();
    let mut order = Vec::new();
    for s in 1..=len {
        for id in graph.topo_order() {
            if !done.contains(id) && preds[id].is_subset(&done) && rng.gen_bool(0.3) {
                done.insert(id.clone());
                order.push((id.clone(), s));
            }
        }
    }
    let terminal = if len == budget && rng.gen_bool(0.5) {
        TerminalCause::MaxStepsReached
    } else {
        *[
            TerminalCause::DoneSignaled,
            TerminalCause::ScriptExhausted,
            TerminalCause::AgentFailure,
        ]
        .choose(rng)
        .expect("non-empty")
    };
    EpisodeRecord {
        task: graph,
        steps,
        completion_order: order,
        terminal,
    }
}

/// Counts and ratios recomputed by hand.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleMetrics {
    pub nodes: usize,
    pub completed: usize,
    pub key: usize,
    pub covered: usize,
    pub onu: usize,
    pub can: usize,
    pub io: usize,
    pub oor: usize,
    pub cr: f64,
    pub cpa: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub br: f64,
    pub oor_rate: f64,
    pub rms: bool,
}

pub fn oracle_metrics(ep: &EpisodeRecord, cpa: CpaDefinition) -> OracleMetrics {
    let spec = ep.task.spec();
    let mut completed = Vec::new();
    for (id, _) in &ep.completion_order {
        if !completed.contains(id) {
            completed.push(id.clone());
        }
    }
    let mut key = 0;
    let mut covered = 0;
    for n in &spec.nodes {
        if n.key_step {
            key += 1;
            if completed.contains(&n.id) {
                covered += 1;
            }
        }
    }
    let (mut can, mut io, mut oor) = (0, 0, 0);
    for s in &ep.steps {
        if s.flags.effect_applied {
            can += 1;
        }
        if s.is_back_action || s.flags.revisit {
            io += 1;
        }
        if s.flags.out_of_range {
            oor += 1;
        }
    }
    let onu = ep.steps.len();
    let per_step = |x: usize| if onu == 0 { 0.0 } else { x as f64 / onu as f64 };
    let precision = per_step(can);
    let recall = if key == 0 { 1.0 } else { covered as f64 / key as f64 };
    let f1 = if precision == 0.0 && recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let cpa_value = match cpa {
        CpaDefinition::SubgoalsPerAction => {
            let mut steps: Vec<usize> = Vec::new();
            for (_, s) in &ep.completion_order {
                if !steps.contains(s) {
                    steps.push(*s);
                }
            }
            per_step(steps.len())
        }
        CpaDefinition::EffectiveActions => precision,
    };
    OracleMetrics {
        nodes: spec.nodes.len(),
        completed: completed.len(),
        key,
        covered,
        onu,
        can,
        io,
        oor,
        cr: completed.len() as f64 / spec.nodes.len() as f64,
        cpa: cpa_value,
        precision,
        recall,
        f1,
        br: per_step(io),
        oor_rate: per_step(oor),
        rms: ep.terminal == TerminalCause::MaxStepsReached,
    }
}

/// Text biased towards characters that need escaping or confuse a parser.
pub fn nasty_text(rng: &mut impl Rng) -> String {
    const TRICKY: &[char] = &['"', '\\', '(', ')', ',', '\n', ' ', 'é', '中', '\t', '\'', '#'];
    let len = rng.gen_range(1..24);
    (0..len)
        .map(|_| match rng.gen_range(0..3) {
            0 => *TRICKY.choose(rng).expect("non-empty"),
            1 => rng.gen_range(' '..='~'),
            _ => rng.gen::<char>(),
        })
        .collect()
}

pub fn random_action(rng: &mut impl Rng) -> Action {
    const ID: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_.-";
    match rng.gen_range(0..7) {
        0 => Action::Tap(
            (0..rng.gen_range(1..12))
                .map(|_| *ID.choose(rng).expect("non-empty") as char)
                .collect(),
        ),
        1 => Action::TapXy(rng.gen(), rng.gen()),
        2 => Action::TypeText(nasty_text(rng)),
        3 => Action::OpenApp(nasty_text(rng)),
        4 => Action::SwitchDevice(nasty_text(rng)),
        5 => Action::Back,
        _ => Action::Done,
    }
}
