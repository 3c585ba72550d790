//! Hydraulic inputs: demand profiles, per-step hydraulic states and the
//! pipe discretization they imply.
//!
//! Flows arrive in gallons per minute and are converted to m³/s on load;
//! velocities are m/s, tank volumes m³. Everything downstream of this
//! module works in SI units.

mod discretize;
mod generate;

pub use discretize::{plan_discretization, Discretization, DiscretizationError, SegmentPolicy, StepDiscretization};
pub use generate::{grid_network, synthesize_hydraulics, GeneratorError, GeneratorSettings, GridSpec};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{NetworkModel, NodeId};

/// One US gallon per minute in m³/s.
pub const GPM_TO_M3S: f64 = 3.785_411_784e-3 / 60.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DemandError {
    #[error("demand pattern is empty")]
    EmptyPattern,
    #[error("pattern multiplier {0} is negative or not finite")]
    BadMultiplier(f64),
    #[error("base demand for {0} is negative or not finite")]
    BadBaseDemand(String),
}

/// Junction demands over `T_h` hydraulic steps of `k_f` water-quality steps
/// each. Demand is constant within a hydraulic step, so only one column per
/// step is stored; [`DemandProfile::column`] expands to the fine grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandProfile {
    pub junctions: Vec<NodeId>,
    /// `per_step[h][j]`, GPM.
    pub per_step: Vec<Vec<f64>>,
    pub steps_per_interval: usize,
}

impl DemandProfile {
    pub fn n_steps(&self) -> usize {
        self.per_step.len()
    }

    /// Number of fine-grid columns, `T_h * k_f`.
    pub fn n_columns(&self) -> usize {
        self.per_step.len() * self.steps_per_interval
    }

    /// Demand vector at fine-grid column `k`.
    pub fn column(&self, k: usize) -> &[f64] {
        &self.per_step[k / self.steps_per_interval]
    }

    pub fn total(&self, step: usize) -> f64 {
        self.per_step[step].iter().sum()
    }
}

/// `D[j][k] = base[j] * pattern[hour(k)]`, with the pattern tiled over
/// `n_steps` hydraulic steps.
pub fn expand_demands(
    base: &BTreeMap<NodeId, f64>,
    pattern: &[f64],
    n_steps: usize,
    steps_per_interval: usize,
) -> Result<DemandProfile, DemandError> {
    if pattern.is_empty() {
        return Err(DemandError::EmptyPattern);
    }
    if let Some(m) = pattern.iter().find(|m| !m.is_finite() || **m < 0.0) {
        return Err(DemandError::BadMultiplier(*m));
    }
    if let Some((id, _)) = base.iter().find(|(_, d)| !d.is_finite() || **d < 0.0) {
        return Err(DemandError::BadBaseDemand(id.to_string()));
    }
    let per_step = (0..n_steps)
        .map(|h| base.values().map(|d| d * pattern[h % pattern.len()]).collect())
        .collect();
    Ok(DemandProfile {
        junctions: base.keys().cloned().collect(),
        per_step,
        steps_per_interval: steps_per_interval.max(1),
    })
}

/// Demand profile from the model's own base demands and per-junction
/// patterns.
pub fn model_demands(model: &NetworkModel, n_steps: usize, steps_per_interval: usize) -> Result<DemandProfile, DemandError> {
    let mut per_step = vec![Vec::with_capacity(model.junctions.len()); n_steps];
    for j in &model.junctions {
        let pattern = model.junction_pattern(j);
        if pattern.is_empty() {
            return Err(DemandError::EmptyPattern);
        }
        if !j.base_demand.is_finite() || j.base_demand < 0.0 {
            return Err(DemandError::BadBaseDemand(j.id.to_string()));
        }
        for (h, col) in per_step.iter_mut().enumerate() {
            let m = pattern[h % pattern.len()];
            if !m.is_finite() || m < 0.0 {
                return Err(DemandError::BadMultiplier(m));
            }
            col.push(j.base_demand * m);
        }
    }
    Ok(DemandProfile {
        junctions: model.junctions.iter().map(|j| j.id.clone()).collect(),
        per_step,
        steps_per_interval: steps_per_interval.max(1),
    })
}

/// Hydraulics JSON document as exchanged on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HydraulicsDocument {
    pub dt_hydraulic_s: f64,
    pub steps: Vec<StepDocument>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepDocument {
    /// Signed link flow, GPM.
    #[serde(default)]
    pub flows: BTreeMap<String, f64>,
    /// Signed link velocity, m/s.
    #[serde(default)]
    pub velocities: BTreeMap<String, f64>,
    #[serde(default)]
    pub tank_volumes: BTreeMap<String, f64>,
    /// Junction demand, GPM.
    #[serde(default)]
    pub demands: BTreeMap<String, f64>,
}

#[derive(Debug, Error)]
pub enum HydraulicsError {
    #[error("invalid hydraulics JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("step {step}: unknown link id {id}")]
    UnknownLinkId { id: String, step: usize },
    #[error("step {step}: unknown node id {id}")]
    UnknownNodeId { id: String, step: usize },
    #[error("step {step}: non-finite {what} for {id}")]
    NonfiniteValue { what: &'static str, id: String, step: usize },
    #[error("expected {expected} hydraulic steps, document has {found}")]
    StepCountMismatch { expected: usize, found: usize },
    #[error("hydraulic step duration must be positive, got {0}")]
    BadStepDuration(f64),
}

/// Resolved hydraulic state for one step, arrays in the model's canonical
/// order. Flows are m³/s; sign is relative to the declared from→to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HydraulicState {
    pub pipe_flow: Vec<f64>,
    pub pipe_velocity: Vec<f64>,
    pub pump_flow: Vec<f64>,
    pub valve_flow: Vec<f64>,
    pub tank_volume: Vec<f64>,
    pub demand: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HydraulicProfile {
    pub dt_hydraulic_s: f64,
    pub steps: Vec<HydraulicState>,
}

impl HydraulicProfile {
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HydraulicsWarning {
    pub step: usize,
    pub message: String,
}

/// Parses and validates a hydraulics document against `model`.
pub fn load_hydraulics(
    text: &str,
    model: &NetworkModel,
    expected_steps: Option<usize>,
) -> Result<(HydraulicProfile, Vec<HydraulicsWarning>), HydraulicsError> {
    let doc: HydraulicsDocument = serde_json::from_str(text)?;
    resolve_hydraulics(&doc, model, expected_steps)
}

pub fn resolve_hydraulics(
    doc: &HydraulicsDocument,
    model: &NetworkModel,
    expected_steps: Option<usize>,
) -> Result<(HydraulicProfile, Vec<HydraulicsWarning>), HydraulicsError> {
    if !(doc.dt_hydraulic_s.is_finite() && doc.dt_hydraulic_s > 0.0) {
        return Err(HydraulicsError::BadStepDuration(doc.dt_hydraulic_s));
    }
    if doc.steps.is_empty() || expected_steps.is_some_and(|e| e != doc.steps.len()) {
        return Err(HydraulicsError::StepCountMismatch {
            expected: expected_steps.unwrap_or(1),
            found: doc.steps.len(),
        });
    }
    let mut warnings = Vec::new();
    let mut steps = Vec::with_capacity(doc.steps.len());
    let mut inferred_demands = 0usize;

    for (k, s) in doc.steps.iter().enumerate() {
        for (id, v) in &s.flows {
            if model.link_kind(id).is_none() {
                return Err(HydraulicsError::UnknownLinkId { id: id.clone(), step: k });
            }
            if !v.is_finite() {
                return Err(HydraulicsError::NonfiniteValue {
                    what: "flow",
                    id: id.clone(),
                    step: k,
                });
            }
        }
        for (id, v) in &s.velocities {
            if model.link_kind(id).is_none() {
                return Err(HydraulicsError::UnknownLinkId { id: id.clone(), step: k });
            }
            if !v.is_finite() {
                return Err(HydraulicsError::NonfiniteValue {
                    what: "velocity",
                    id: id.clone(),
                    step: k,
                });
            }
        }
        for (id, v) in s.tank_volumes.iter().chain(&s.demands) {
            if model.node_kind(id).is_none() {
                return Err(HydraulicsError::UnknownNodeId { id: id.clone(), step: k });
            }
            if !v.is_finite() {
                return Err(HydraulicsError::NonfiniteValue {
                    what: "node value",
                    id: id.clone(),
                    step: k,
                });
            }
        }

        let mut pipe_flow = Vec::with_capacity(model.pipes.len());
        let mut pipe_velocity = Vec::with_capacity(model.pipes.len());
        for p in &model.pipes {
            let q = s.flows.get(p.id.as_str()).map(|q| q * GPM_TO_M3S);
            let v = s.velocities.get(p.id.as_str()).copied();
            let (q, v) = match (q, v) {
                (Some(q), Some(v)) => {
                    if q * v < 0.0 {
                        warnings.push(HydraulicsWarning {
                            step: k,
                            message: format!("pipe {} flow and velocity signs disagree", p.id),
                        });
                    }
                    (q, if q == 0.0 { 0.0 } else { v.abs() * q.signum() })
                }
                (Some(q), None) => (q, q / p.area()),
                (None, Some(v)) => (v * p.area(), v),
                (None, None) => {
                    warnings.push(HydraulicsWarning {
                        step: k,
                        message: format!("pipe {} has no flow data, assuming stagnant", p.id),
                    });
                    (0.0, 0.0)
                }
            };
            pipe_flow.push(q);
            pipe_velocity.push(v);
        }
        let mut link_flow = |id: &str| -> f64 {
            match s.flows.get(id) {
                Some(q) => q * GPM_TO_M3S,
                None => {
                    warnings.push(HydraulicsWarning {
                        step: k,
                        message: format!("link {id} has no flow data, assuming zero"),
                    });
                    0.0
                }
            }
        };
        let pump_flow: Vec<f64> = model.pumps.iter().map(|p| link_flow(p.id.as_str())).collect();
        let valve_flow: Vec<f64> = model.valves.iter().map(|v| link_flow(v.id.as_str())).collect();
        let tank_volume = model
            .tanks
            .iter()
            .map(|t| match s.tank_volumes.get(t.id.as_str()) {
                Some(v) => *v,
                None => {
                    warnings.push(HydraulicsWarning {
                        step: k,
                        message: format!("tank {} volume missing, using initial volume", t.id),
                    });
                    t.initial_volume
                }
            })
            .collect();

        let mut state = HydraulicState {
            pipe_flow,
            pipe_velocity,
            pump_flow,
            valve_flow,
            tank_volume,
            demand: Vec::new(),
        };
        let balance = junction_balance(model, &state);
        state.demand = model
            .junctions
            .iter()
            .zip(&balance)
            .map(|(j, (net_in, max_in))| match s.demands.get(j.id.as_str()) {
                Some(d) => {
                    let d = d * GPM_TO_M3S;
                    if (net_in - d).abs() > 1e-6 * max_in.max(f64::MIN_POSITIVE) && (net_in - d).abs() > 1e-12 {
                        warnings.push(HydraulicsWarning {
                            step: k,
                            message: format!(
                                "junction {} does not balance: net inflow {:.6e} m3/s vs demand {:.6e} m3/s",
                                j.id, net_in, d
                            ),
                        });
                    }
                    d
                }
                None => {
                    inferred_demands += 1;
                    net_in.max(0.0)
                }
            })
            .collect();
        steps.push(state);
    }
    if inferred_demands > 0 {
        warnings.push(HydraulicsWarning {
            step: 0,
            message: format!("{inferred_demands} junction demands inferred from flow balance"),
        });
    }
    Ok((
        HydraulicProfile {
            dt_hydraulic_s: doc.dt_hydraulic_s,
            steps,
        },
        warnings,
    ))
}

/// Per-junction `(inflow − outflow, total inflow)` over transport links.
fn junction_balance(model: &NetworkModel, state: &HydraulicState) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); model.junctions.len()];
    let index = |id: &NodeId| model.junctions.binary_search_by(|j| j.id.cmp(id)).ok();
    let mut apply = |from: &NodeId, to: &NodeId, q: f64| {
        let (up, down) = if q >= 0.0 { (from, to) } else { (to, from) };
        let q = q.abs();
        if let Some(i) = index(down) {
            out[i].0 += q;
            out[i].1 += q;
        }
        if let Some(i) = index(up) {
            out[i].0 -= q;
        }
    };
    for (p, q) in model.pipes.iter().zip(&state.pipe_flow) {
        apply(&p.from, &p.to, *q);
    }
    for (p, q) in model.pumps.iter().zip(&state.pump_flow) {
        apply(&p.from, &p.to, *q);
    }
    for (v, q) in model.valves.iter().zip(&state.valve_flow) {
        if v.host_pipe.is_none() {
            apply(&v.from, &v.to, *q);
        }
    }
    out
}

impl HydraulicsDocument {
    /// Inverse of [`resolve_hydraulics`]: arrays back to keyed GPM maps.
    pub fn from_profile(model: &NetworkModel, profile: &HydraulicProfile) -> Self {
        let steps = profile
            .steps
            .iter()
            .map(|s| {
                let mut d = StepDocument::default();
                for (p, (q, v)) in model.pipes.iter().zip(s.pipe_flow.iter().zip(&s.pipe_velocity)) {
                    d.flows.insert(p.id.to_string(), q / GPM_TO_M3S);
                    d.velocities.insert(p.id.to_string(), *v);
                }
                for (p, q) in model.pumps.iter().zip(&s.pump_flow) {
                    d.flows.insert(p.id.to_string(), q / GPM_TO_M3S);
                }
                for (p, q) in model.valves.iter().zip(&s.valve_flow) {
                    d.flows.insert(p.id.to_string(), q / GPM_TO_M3S);
                }
                for (t, v) in model.tanks.iter().zip(&s.tank_volume) {
                    d.tank_volumes.insert(t.id.to_string(), *v);
                }
                for (j, q) in model.junctions.iter().zip(&s.demand) {
                    d.demands.insert(j.id.to_string(), q / GPM_TO_M3S);
                }
                d
            })
            .collect();
        Self {
            dt_hydraulic_s: profile.dt_hydraulic_s,
            steps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::parse_network;

    fn three_node() -> NetworkModel {
        parse_network(crate::bundled::THREE_NODE_INP).unwrap()
    }

    #[test]
    fn flat_pattern_keeps_base_demand() {
        let base = BTreeMap::from([(NodeId::new("J2"), 2000.0)]);
        let d = expand_demands(&base, &[1.0; 24], 24, 300).unwrap();
        assert_eq!(d.n_columns(), 24 * 300);
        assert!((0..d.n_columns()).all(|k| d.column(k) == [2000.0]));
    }

    #[test]
    fn zero_base_gives_zero_profile() {
        let base = BTreeMap::from([(NodeId::new("J2"), 0.0)]);
        let d = expand_demands(&base, &[0.7, 1.3], 4, 1).unwrap();
        assert!(d.per_step.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn two_hour_pattern_tiles() {
        let base = BTreeMap::from([(NodeId::new("J"), 100.0)]);
        let d = expand_demands(&base, &[0.5, 2.0], 2, 3).unwrap();
        let cols: Vec<f64> = (0..d.n_columns()).map(|k| d.column(k)[0]).collect();
        assert_eq!(cols, [50.0, 50.0, 50.0, 200.0, 200.0, 200.0]);
    }

    #[test]
    fn empty_pattern_is_an_error() {
        let base = BTreeMap::from([(NodeId::new("J"), 100.0)]);
        assert_eq!(expand_demands(&base, &[], 2, 1), Err(DemandError::EmptyPattern));
    }

    fn doc(steps: usize) -> String {
        let step = r#"{"flows": {"M1": 2200, "P23": 200}, "velocities": {"P23": 0.2}, "tank_volumes": {"T3": 500}, "demands": {"J2": 2000}}"#;
        format!(
            r#"{{"dt_hydraulic_s": 3600, "steps": [{}]}}"#,
            vec![step; steps].join(",")
        )
    }

    #[test]
    fn loads_twenty_four_steps() {
        let m = three_node();
        let (p, w) = load_hydraulics(&doc(24), &m, Some(24)).unwrap();
        assert_eq!(p.n_steps(), 24);
        assert!(w.is_empty(), "{w:?}");
        assert!((p.steps[0].pump_flow[0] - 2200.0 * GPM_TO_M3S).abs() < 1e-15);
    }

    #[test]
    fn rejects_unknown_link() {
        let m = three_node();
        let text = doc(1).replace("\"P23\": 200", "\"P99\": 200");
        assert!(matches!(
            load_hydraulics(&text, &m, None),
            Err(HydraulicsError::UnknownLinkId { id, .. }) if id == "P99"
        ));
    }

    #[test]
    fn rejects_nan_velocity() {
        let m = three_node();
        let mut d: HydraulicsDocument = serde_json::from_str(&doc(1)).unwrap();
        d.steps[0].velocities.insert("P23".into(), f64::NAN);
        assert!(matches!(
            resolve_hydraulics(&d, &m, None),
            Err(HydraulicsError::NonfiniteValue { what: "velocity", .. })
        ));
    }

    #[test]
    fn step_count_mismatch() {
        let m = three_node();
        assert!(matches!(
            load_hydraulics(&doc(3), &m, Some(24)),
            Err(HydraulicsError::StepCountMismatch { expected: 24, found: 3 })
        ));
    }

    #[test]
    fn missing_tank_volume_defaults_with_warning() {
        let m = three_node();
        let text = doc(1).replace(r#""tank_volumes": {"T3": 500}, "#, "");
        let (p, w) = load_hydraulics(&text, &m, None).unwrap();
        assert_eq!(p.steps[0].tank_volume[0], m.tanks[0].initial_volume);
        assert!(w.iter().any(|w| w.message.contains("T3")));
    }

    #[test]
    fn unbalanced_junction_warns() {
        let m = three_node();
        let text = doc(1).replace("\"J2\": 2000", "\"J2\": 1500");
        let (_, w) = load_hydraulics(&text, &m, None).unwrap();
        assert!(w.iter().any(|w| w.message.contains("does not balance")));
    }
}
