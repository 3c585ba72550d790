//! Greedy minimization of the log-det metric.
//!
//! With `M_S = I + R_S R_Sᵀ = L Lᵀ` for the current set, adding sensor `e`
//! with rows `B` changes the log-determinant by the log-determinant of the
//! Schur complement
//!
//! ```text
//! M_e = I + B Bᵀ − Yᵀ Y,   Y = L⁻¹ R_S Bᵀ
//! ```
//!
//! Each candidate keeps its `Y` and `M_e` and extends them by one block row
//! whenever a sensor is selected, so an iteration costs one cross block and
//! one small triangular solve per candidate.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::PlacementError;
use crate::dynamics::WqSystem;
use crate::observability::{log_det_spd, metric_block, power_gram, FactorCache, MetricVariant, SensorFactor};
use crate::par::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GreedyOptions {
    /// Re-evaluate only the candidate with the best stale gain until it
    /// stays on top.
    pub lazy: bool,
    pub execution: Execution,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// State index (equal to the canonical node position).
    pub state: usize,
    /// `f(S) − f(S ∪ {e})`.
    pub gain: f64,
    /// `f` after adding this sensor.
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyTrace {
    pub empty_metric: f64,
    pub selections: Vec<Selection>,
}

impl GreedyTrace {
    pub fn states(&self) -> Vec<usize> {
        self.selections.iter().map(|s| s.state).collect()
    }

    pub fn final_metric(&self) -> f64 {
        self.selections.last().map_or(self.empty_metric, |s| s.metric)
    }

    /// Metric after the first `n` selections.
    pub fn metric_at(&self, n: usize) -> f64 {
        if n == 0 {
            self.empty_metric
        } else {
            self.selections[n - 1].metric
        }
    }
}

struct Candidate {
    factor: Arc<SensorFactor>,
    y: DMatrix<f64>,
    schur: DMatrix<f64>,
    synced: usize,
    gain: f64,
    taken: bool,
}

struct Chosen {
    factor: Arc<SensorFactor>,
    /// Lower Cholesky factor of the candidate's Schur complement when chosen.
    l22: DMatrix<f64>,
    /// The candidate's `Y` when chosen.
    y: DMatrix<f64>,
}

fn cholesky_lower(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = m.clone().cholesky() {
        return c.l();
    }
    let mut j = m.clone();
    for i in 0..j.nrows() {
        j[(i, i)] += crate::observability::LU_JITTER;
    }
    j.cholesky().map(|c| c.l()).unwrap_or_else(|| DMatrix::identity(m.nrows(), m.ncols()))
}

impl Candidate {
    fn new(factor: Arc<SensorFactor>, variant: &MetricVariant) -> Self {
        let b = factor.rows.len();
        let schur = DMatrix::identity(b, b) + metric_block(&power_gram(&factor, &factor), variant);
        Self {
            factor,
            y: DMatrix::zeros(0, b),
            schur,
            synced: 0,
            gain: f64::INFINITY,
            taken: false,
        }
    }

    fn sync(&mut self, chosen: &[Chosen], variant: &MetricVariant) {
        for sel in &chosen[self.synced..] {
            let cross = metric_block(&power_gram(&sel.factor, &self.factor), variant);
            let rhs = cross - sel.y.transpose() * &self.y;
            let new = sel
                .l22
                .solve_lower_triangular(&rhs)
                .expect("Cholesky factor has a positive diagonal");
            self.schur -= new.transpose() * &new;
            let rows = self.y.nrows();
            let mut y = self.y.clone().resize_vertically(rows + new.nrows(), 0.0);
            y.rows_mut(rows, new.nrows()).copy_from(&new);
            self.y = y;
        }
        self.synced = chosen.len();
    }

    fn refresh(&mut self, chosen: &[Chosen], variant: &MetricVariant) -> Result<(), PlacementError> {
        self.sync(chosen, variant);
        self.gain = log_det_spd(&self.schur)?.value;
        Ok(())
    }
}

#[derive(PartialEq)]
struct Stale {
    gain: f64,
    position: usize,
}

impl Eq for Stale {}

impl PartialOrd for Stale {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Stale {
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain
            .total_cmp(&other.gain)
            .then_with(|| other.position.cmp(&self.position))
    }
}

/// Greedy selection over precomputed sensor factors. Candidates are
/// considered in the given order, which also breaks ties.
pub fn greedy_factors(
    factors: &[Arc<SensorFactor>],
    r: usize,
    variant: &MetricVariant,
    empty_metric: f64,
    options: &GreedyOptions,
) -> Result<GreedyTrace, PlacementError> {
    if factors.is_empty() {
        return Err(PlacementError::EmptyCandidates);
    }
    variant.validate()?;
    let mut cands: Vec<Candidate> = options
        .execution
        .map(factors, |f| Candidate::new(f.clone(), variant));
    let mut chosen: Vec<Chosen> = Vec::new();
    let mut trace = GreedyTrace {
        empty_metric,
        selections: Vec::new(),
    };
    let r = r.min(factors.len());
    let mut heap = BinaryHeap::new();

    while trace.selections.len() < r {
        let pick = if options.lazy {
            if chosen.is_empty() {
                refresh_all(&mut cands, &chosen, variant, options.execution)?;
                heap = cands
                    .iter()
                    .enumerate()
                    .map(|(position, c)| Stale { gain: c.gain, position })
                    .collect();
            }
            lazy_pick(&mut cands, &mut heap, &chosen, variant)?
        } else {
            refresh_all(&mut cands, &chosen, variant, options.execution)?;
            best(&cands)
        };
        let c = &mut cands[pick];
        c.taken = true;
        let metric = trace.final_metric() - c.gain;
        trace.selections.push(Selection {
            state: c.factor.state,
            gain: c.gain,
            metric,
        });
        chosen.push(Chosen {
            factor: c.factor.clone(),
            l22: cholesky_lower(&c.schur),
            y: c.y.clone(),
        });
    }
    Ok(trace)
}

fn refresh_all(cands: &mut [Candidate], chosen: &[Chosen], variant: &MetricVariant, execution: Execution) -> Result<(), PlacementError> {
    let failures = std::sync::Mutex::new(None);
    execution.for_each_mut(cands, |_, c| {
        if !c.taken {
            if let Err(e) = c.refresh(chosen, variant) {
                failures.lock().expect("lock").get_or_insert(e);
            }
        }
    });
    match failures.into_inner().expect("lock") {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn best(cands: &[Candidate]) -> usize {
    let mut pick: Option<usize> = None;
    for (i, c) in cands.iter().enumerate().filter(|(_, c)| !c.taken) {
        if pick.is_none_or(|p| c.gain > cands[p].gain) {
            pick = Some(i);
        }
    }
    pick.expect("at least one candidate left")
}

fn lazy_pick(cands: &mut [Candidate], heap: &mut BinaryHeap<Stale>, chosen: &[Chosen], variant: &MetricVariant) -> Result<usize, PlacementError> {
    loop {
        let top = heap.pop().expect("candidates remain");
        let c = &mut cands[top.position];
        if c.synced == chosen.len() {
            return Ok(top.position);
        }
        c.refresh(chosen, variant)?;
        heap.push(Stale {
            gain: c.gain,
            position: top.position,
        });
    }
}

/// Sensor factors for `candidates` on `system`, computed in parallel.
pub fn system_factors(system: &WqSystem, candidates: &[usize], cache: Option<&FactorCache>, execution: Execution) -> Vec<Arc<SensorFactor>> {
    let k_f = system.window_steps;
    let hash = cache.map(|_| system.a.content_hash());
    execution.map(candidates, |&s| match (cache, hash) {
        (Some(c), Some(h)) => c.get_or_compute(&system.a, h, s, k_f),
        _ => Arc::new(crate::observability::gramian_factor(&system.a, s, k_f)),
    })
}

/// Greedy placement of up to `r` sensors among `candidates` (state indices
/// of nodes, in canonical order) for one hydraulic step.
pub fn greedy_step(
    system: &WqSystem,
    candidates: &[usize],
    r: usize,
    variant: &MetricVariant,
    options: &GreedyOptions,
) -> Result<GreedyTrace, PlacementError> {
    if candidates.is_empty() {
        return Err(PlacementError::EmptyCandidates);
    }
    let factors = system_factors(system, candidates, None, options.execution);
    greedy_factors(
        &factors,
        r,
        variant,
        variant.empty_value(system.n_x(), system.window_steps),
        options,
    )
}
