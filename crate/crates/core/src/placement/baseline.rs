use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate_set, node_indices, system_factors, PlacementError, Scenario};
use crate::dynamics::WqSystem;
use crate::network::{NetworkModel, NodeId};
use crate::observability::{log_det_spd, gram_matrix, FactorCache, MetricVariant, SensorFactor};
use crate::par::Execution;

/// Largest number of subsets the exhaustive search will visit.
pub const MAX_SUBSETS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BruteForce {
    /// Optimal set as positions in the candidate list, ascending.
    pub positions: Vec<usize>,
    pub value: f64,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k.min(n)).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exhaustive minimum of the metric over all `r`-subsets of `factors`.
/// Ties go to the lexicographically first subset.
pub fn brute_force_factors(
    factors: &[Arc<SensorFactor>],
    r: usize,
    variant: &MetricVariant,
    empty_metric: f64,
) -> Result<BruteForce, PlacementError> {
    let n = factors.len();
    if n == 0 {
        return Err(PlacementError::EmptyCandidates);
    }
    let r = r.min(n);
    let combinations = binomial(n, r);
    if combinations > MAX_SUBSETS {
        return Err(PlacementError::TooLarge { combinations });
    }
    let mut subset: Vec<usize> = (0..r).collect();
    let mut best: Option<BruteForce> = None;
    loop {
        let refs: Vec<&SensorFactor> = subset.iter().map(|i| factors[*i].as_ref()).collect();
        let value = empty_metric - log_det_spd(&gram_matrix(&refs, variant))?.value;
        if best.as_ref().is_none_or(|b| value < b.value) {
            best = Some(BruteForce {
                positions: subset.clone(),
                value,
            });
        }
        // next combination in lexicographic order
        let Some(i) = (0..r).rev().find(|&i| subset[i] < n - r + i) else {
            break;
        };
        subset[i] += 1;
        for j in i + 1..r {
            subset[j] = subset[j - 1] + 1;
        }
    }
    Ok(best.expect("at least one subset"))
}

/// Exhaustive optimum over `candidates` (state indices) for one system.
pub fn brute_force_optimal(system: &WqSystem, candidates: &[usize], r: usize, variant: &MetricVariant) -> Result<BruteForce, PlacementError> {
    let combinations = binomial(candidates.len(), r.min(candidates.len()));
    if combinations > MAX_SUBSETS {
        return Err(PlacementError::TooLarge { combinations });
    }
    let factors = system_factors(system, candidates, None, Execution::Parallel);
    brute_force_factors(&factors, r, variant, variant.empty_value(system.n_x(), system.window_steps))
}

/// `Δf = f(Ŝ) − f(S*)` for `count` uniformly random `r`-node sets at every
/// hydraulic step, indexed `[step][sample]`. Step `k` draws from its own
/// ChaCha stream, so results do not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn random_baseline(
    model: &NetworkModel,
    scenario: &Scenario,
    reference: &[NodeId],
    r: usize,
    count: usize,
    seed: u64,
    variant: &MetricVariant,
    execution: Execution,
) -> Result<Vec<Vec<f64>>, PlacementError> {
    let reference = node_indices(model, reference)?;
    let n = model.n_nodes();
    let r = r.min(n);
    execution
        .map_range(scenario.n_steps(), |k| {
            let system = scenario.system(model, k)?;
            let cache = FactorCache::new();
            let base = evaluate_set(&system, &reference, variant, Some(&cache))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            (0..count)
                .map(|_| {
                    let mut states = sample(&mut rng, n, r).into_vec();
                    states.sort_unstable();
                    Ok(evaluate_set(&system, &states, variant, Some(&cache))? - base)
                })
                .collect()
        })
        .into_iter()
        .collect()
}
