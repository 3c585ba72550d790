//! Sensor placement across hydraulic steps and demand scenarios.
//!
//! For every hydraulic step and scenario a greedy chain of up to `r`
//! sensors is built on that step's `A(k)`. The scenario whose chain reaches
//! the lowest metric wins the step. A node's occupation is the fraction of
//! steps whose winning set contains it, and the final placement is the `r`
//! nodes with the highest occupation.

mod baseline;
mod greedy;

pub use baseline::{brute_force_factors, brute_force_optimal, random_baseline, BruteForce, MAX_SUBSETS};
pub use greedy::{greedy_factors, greedy_step, system_factors, GreedyOptions, GreedyTrace, Selection};

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{assemble, DynamicsError, WqSystem};
use crate::hydraulics::{Discretization, HydraulicProfile};
use crate::network::{NetworkModel, NodeId};
use crate::observability::{metric, FactorCache, MetricVariant, ObservabilityError, SensorFactor};
use crate::par::Execution;

#[derive(Debug, Error)]
pub enum PlacementError {
    #[error("no candidate nodes")]
    EmptyCandidates,
    #[error("{combinations} subsets exceed the brute-force limit")]
    TooLarge { combinations: f64 },
    #[error("indicator matrices differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("at least one scenario is required")]
    NoScenarios,
    #[error("scenario {scenario} has {found} hydraulic steps, expected {expected}")]
    StepMismatch { scenario: usize, expected: usize, found: usize },
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Observability(#[from] ObservabilityError),
}

/// One demand scenario: its hydraulics and discretization.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub profile: HydraulicProfile,
    pub discretization: Discretization,
}

impl Scenario {
    pub fn n_steps(&self) -> usize {
        self.profile.n_steps()
    }

    pub fn system(&self, model: &NetworkModel, step: usize) -> Result<WqSystem, DynamicsError> {
        assemble(model, &self.profile.steps[step], &self.discretization.steps[step])
    }

    pub fn systems(&self, model: &NetworkModel, execution: Execution) -> Result<Vec<WqSystem>, DynamicsError> {
        execution.map_range(self.n_steps(), |k| self.system(model, k)).into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// The `r` nodes with the largest occupation.
    #[default]
    PerNode,
    /// The per-step winning set that wins most often.
    PerSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlacementConfig {
    pub r: usize,
    pub variant: MetricVariant,
    pub selection: SelectionRule,
    pub greedy: GreedyOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occupation {
    pub node: NodeId,
    pub occupation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTrace {
    pub nodes: Vec<NodeId>,
    pub gains: Vec<f64>,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub winner: usize,
    /// Winning set in selection order.
    pub nodes: Vec<NodeId>,
    pub metric: f64,
    pub dt: f64,
    pub window_steps: usize,
    pub n_x: usize,
    pub scenarios: Vec<ScenarioTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementResult {
    /// Final sensor set in canonical node order.
    pub nodes: Vec<NodeId>,
    pub occupation: Vec<Occupation>,
    pub steps: Vec<StepRecord>,
    pub config: PlacementConfig,
    pub n_scenarios: usize,
}

impl PlacementResult {
    pub fn occupation_of(&self, node: &str) -> f64 {
        self.occupation
            .iter()
            .find(|o| o.node.as_str() == node)
            .map_or(0.0, |o| o.occupation)
    }

    /// Node × step indicator of the per-step winning sets.
    pub fn indicator(&self) -> Vec<Vec<bool>> {
        self.occupation
            .iter()
            .map(|o| self.steps.iter().map(|s| s.nodes.contains(&o.node)).collect())
            .collect()
    }

    pub fn write_occupation_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "node,occupation")?;
        for o in &self.occupation {
            writeln!(out, "{},{}", o.node, o.occupation)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("placement serializes")
    }
}

fn node_states(model: &NetworkModel) -> Vec<usize> {
    (0..model.n_nodes()).collect()
}

/// Runs the greedy chain for every (step, scenario) pair and aggregates.
pub fn solve_wqsp(model: &NetworkModel, scenarios: &[Scenario], config: &PlacementConfig) -> Result<PlacementResult, PlacementError> {
    let first = scenarios.first().ok_or(PlacementError::NoScenarios)?;
    let t_h = first.n_steps();
    for (i, s) in scenarios.iter().enumerate() {
        if s.n_steps() != t_h {
            return Err(PlacementError::StepMismatch {
                scenario: i,
                expected: t_h,
                found: s.n_steps(),
            });
        }
    }
    let candidates = node_states(model);
    if candidates.is_empty() {
        return Err(PlacementError::EmptyCandidates);
    }
    let ids: Vec<NodeId> = model.nodes().map(|n| n.id.clone()).collect();
    let n_d = scenarios.len();
    let execution = config.greedy.execution;

    let runs = execution.map_range(t_h * n_d, |pair| -> Result<((f64, usize, usize), GreedyTrace), PlacementError> {
        let (k, i) = (pair / n_d, pair % n_d);
        let system = scenarios[i].system(model, k)?;
        let trace = greedy_step(&system, &candidates, config.r, &config.variant, &config.greedy)?;
        Ok(((system.dt, system.window_steps, system.n_x()), trace))
    });

    let mut steps = Vec::with_capacity(t_h);
    let mut runs = runs.into_iter();
    for k in 0..t_h {
        let mut traces = Vec::with_capacity(n_d);
        let mut meta = None;
        for _ in 0..n_d {
            let (m, trace) = runs.next().expect("one run per pair")?;
            meta.get_or_insert(m);
            traces.push(trace);
        }
        let winner = (0..n_d)
            .min_by(|a, b| traces[*a].final_metric().total_cmp(&traces[*b].final_metric()).then(a.cmp(b)))
            .expect("at least one scenario");
        let (dt, window_steps, n_x) = meta.expect("at least one scenario");
        steps.push(StepRecord {
            step: k,
            winner,
            nodes: traces[winner].states().iter().map(|s| ids[*s].clone()).collect(),
            metric: traces[winner].final_metric(),
            dt,
            window_steps,
            n_x,
            scenarios: traces
                .iter()
                .map(|t| ScenarioTrace {
                    nodes: t.states().iter().map(|s| ids[*s].clone()).collect(),
                    gains: t.selections.iter().map(|s| s.gain).collect(),
                    metric: t.final_metric(),
                })
                .collect(),
        });
    }

    let occupation: Vec<Occupation> = ids
        .iter()
        .map(|id| Occupation {
            node: id.clone(),
            occupation: steps.iter().filter(|s| s.nodes.contains(id)).count() as f64 / t_h as f64,
        })
        .collect();
    let nodes = match config.selection {
        SelectionRule::PerNode => top_by_occupation(&occupation, config.r),
        SelectionRule::PerSet => most_frequent_set(&ids, &steps),
    };
    Ok(PlacementResult {
        nodes,
        occupation,
        steps,
        config: *config,
        n_scenarios: n_d,
    })
}

/// The `r` highest-occupation nodes, ties by canonical order, returned in
/// canonical order.
fn top_by_occupation(occupation: &[Occupation], r: usize) -> Vec<NodeId> {
    let mut order: Vec<usize> = (0..occupation.len()).collect();
    order.sort_by(|a, b| occupation[*b].occupation.total_cmp(&occupation[*a].occupation).then(a.cmp(b)));
    let mut keep: Vec<usize> = order.into_iter().take(r).collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| occupation[i].node.clone()).collect()
}

fn most_frequent_set(ids: &[NodeId], steps: &[StepRecord]) -> Vec<NodeId> {
    let sets: Vec<Vec<usize>> = steps
        .iter()
        .map(|s| {
            let mut v: Vec<usize> = s.nodes.iter().map(|n| ids.iter().position(|i| i == n).expect("known node")).collect();
            v.sort_unstable();
            v
        })
        .collect();
    let best = sets
        .iter()
        .max_by(|a, b| {
            let ca = sets.iter().filter(|s| s == a).count();
            let cb = sets.iter().filter(|s| s == b).count();
            ca.cmp(&cb).then_with(|| b.cmp(a))
        })
        .cloned()
        .unwrap_or_default();
    best.into_iter().map(|i| ids[i].clone()).collect()
}

/// `−Σ xor` between two node × step indicator matrices.
pub fn similarity(p1: &[Vec<bool>], p2: &[Vec<bool>]) -> Result<i64, PlacementError> {
    let shape = |p: &[Vec<bool>]| (p.len(), p.first().map_or(0, Vec::len));
    if shape(p1) != shape(p2) || p1.iter().chain(p2).any(|row| row.len() != shape(p1).1) {
        return Err(PlacementError::ShapeMismatch(shape(p1), shape(p2)));
    }
    let differing = p1
        .iter()
        .zip(p2)
        .flat_map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x != y))
        .count();
    Ok(-(differing as i64))
}

/// Resolves node ids to state indices.
pub fn node_indices(model: &NetworkModel, nodes: &[NodeId]) -> Result<Vec<usize>, PlacementError> {
    let ids: Vec<&NodeId> = model.nodes().map(|n| n.id).collect();
    nodes
        .iter()
        .map(|n| ids.iter().position(|i| *i == n).ok_or_else(|| PlacementError::UnknownNode(n.to_string())))
        .collect()
}

/// Metric of a fixed sensor set on one system.
pub fn evaluate_set(system: &WqSystem, states: &[usize], variant: &MetricVariant, cache: Option<&FactorCache>) -> Result<f64, PlacementError> {
    let factors = system_factors(system, states, cache, Execution::Sequential);
    let refs: Vec<&SensorFactor> = factors.iter().map(|f| f.as_ref()).collect();
    Ok(metric(&refs, variant, system.n_x(), system.window_steps)?.value)
}

/// `f(S)` at every hydraulic step of a scenario.
pub fn metric_trace(
    model: &NetworkModel,
    scenario: &Scenario,
    nodes: &[NodeId],
    variant: &MetricVariant,
    execution: Execution,
) -> Result<Vec<f64>, PlacementError> {
    let states = node_indices(model, nodes)?;
    execution
        .map_range(scenario.n_steps(), |k| {
            let system = scenario.system(model, k)?;
            evaluate_set(&system, &states, variant, None)
        })
        .into_iter()
        .collect()
}
