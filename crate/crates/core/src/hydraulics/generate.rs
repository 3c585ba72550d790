//! Synthetic hydraulics for the bundled networks.
//!
//! Flows come from a linear conductance model: every pipe and standalone
//! valve carries `q = g (h_from − h_to)` with `g = D^2.5 / L`, tanks and
//! pipe-connected reservoirs are fixed-head nodes at head zero, pumps inject
//! a prescribed flow at their downstream node. The result balances at every
//! junction by construction and reverses direction when demand shifts, which
//! is all the water-quality model needs. It is not a hydraulic solver.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DemandProfile, HydraulicProfile, HydraulicState, GPM_TO_M3S};
use crate::network::{Junction, NetworkModel, NodeId, NodeKind, Pipe, Pump, Reservoir, Tank};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSettings {
    pub dt_hydraulic_s: f64,
    /// Steady tank filling as a fraction of mean total demand.
    pub fill_fraction: f64,
    /// Tank response to demand swings: 1 means pumps run at mean demand and
    /// tanks absorb every deviation.
    pub swing: f64,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        Self {
            dt_hydraulic_s: 3600.0,
            fill_fraction: 0.1,
            swing: 0.0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeneratorError {
    #[error("node {0} is not connected to any tank or reservoir through pipes")]
    Ungrounded(String),
    #[error("demand profile covers {found} junctions, network has {expected}")]
    JunctionMismatch { expected: usize, found: usize },
    #[error("network has demand but no pump or pipe-connected source")]
    NoSupply,
    #[error("demand profile: {0}")]
    Demand(String),
}

const VALVE_CONDUCTANCE_SCALE: f64 = 10.0;

/// Builds a hydraulic profile for `model` under `demands`.
pub fn synthesize_hydraulics(
    model: &NetworkModel,
    demands: &DemandProfile,
    settings: &GeneratorSettings,
) -> Result<HydraulicProfile, GeneratorError> {
    if demands.junctions.len() != model.junctions.len() {
        return Err(GeneratorError::JunctionMismatch {
            expected: model.junctions.len(),
            found: demands.junctions.len(),
        });
    }
    let n_j = model.junctions.len();
    let junction_index = |id: &NodeId| model.junctions.binary_search_by(|j| j.id.cmp(id)).ok();

    // fixed-head nodes: tanks, and reservoirs that touch a pipe or valve
    let mut grounded = vec![false; n_j];
    let conductive: Vec<(&NodeId, &NodeId, f64)> = {
        let max_g = model
            .pipes
            .iter()
            .map(pipe_conductance)
            .fold(0.0f64, f64::max)
            .max(1e-12);
        model
            .pipes
            .iter()
            .map(|p| (&p.from, &p.to, pipe_conductance(p)))
            .chain(
                model
                    .standalone_valves()
                    .map(|v| (&v.from, &v.to, VALVE_CONDUCTANCE_SCALE * max_g)),
            )
            .collect()
    };
    let has_head_source = !model.tanks.is_empty()
        || conductive.iter().any(|(a, b, _)| {
            model.node_kind(a.as_str()) == Some(NodeKind::Reservoir) || model.node_kind(b.as_str()) == Some(NodeKind::Reservoir)
        });

    // Laplacian over junctions; fixed-head nodes are eliminated at head 0
    let mut lap = DMatrix::<f64>::zeros(n_j, n_j);
    for (a, b, g) in &conductive {
        let (ia, ib) = (junction_index(a), junction_index(b));
        if let Some(i) = ia {
            lap[(i, i)] += g;
        }
        if let Some(i) = ib {
            lap[(i, i)] += g;
        }
        if let (Some(i), Some(j)) = (ia, ib) {
            lap[(i, j)] -= g;
            lap[(j, i)] -= g;
        } else {
            for i in ia.into_iter().chain(ib) {
                grounded[i] = true;
            }
        }
    }
    propagate_grounding(&mut grounded, &lap);
    if let Some(i) = grounded.iter().position(|g| !g) {
        return Err(GeneratorError::Ungrounded(model.junctions[i].id.to_string()));
    }
    let lu = lap.lu();

    let totals: Vec<f64> = (0..demands.n_steps()).map(|h| demands.total(h) * GPM_TO_M3S).collect();
    let mean_total = totals.iter().sum::<f64>() / totals.len().max(1) as f64;
    if mean_total > 0.0 && model.pumps.is_empty() && !has_head_source {
        return Err(GeneratorError::NoSupply);
    }

    let mut volumes: Vec<f64> = model.tanks.iter().map(|t| t.initial_volume).collect();
    let mut steps = Vec::with_capacity(demands.n_steps());
    for (h, total) in totals.iter().enumerate() {
        let demand: Vec<f64> = demands.per_step[h].iter().map(|d| d * GPM_TO_M3S).collect();
        let fill = settings.fill_fraction * mean_total + settings.swing * (mean_total - total);
        let pump_total = if model.pumps.is_empty() { 0.0 } else { (total + fill).max(0.0) };
        let pump_flow = vec![pump_total / model.pumps.len().max(1) as f64; model.pumps.len()];

        let mut rhs = DVector::from_iterator(n_j, demand.iter().map(|d| -d));
        for (p, q) in model.pumps.iter().zip(&pump_flow) {
            if let Some(i) = junction_index(&p.to) {
                rhs[i] += q;
            }
            if let Some(i) = junction_index(&p.from) {
                rhs[i] -= q;
            }
        }
        let heads = if n_j == 0 {
            DVector::zeros(0)
        } else {
            lu.solve(&rhs).ok_or_else(|| GeneratorError::Ungrounded(model.junctions[0].id.to_string()))?
        };
        let head = |id: &NodeId| junction_index(id).map_or(0.0, |i| heads[i]);

        let pipe_flow: Vec<f64> = model
            .pipes
            .iter()
            .map(|p| pipe_conductance(p) * (head(&p.from) - head(&p.to)))
            .map(|q| if q.abs() < 1e-14 { 0.0 } else { q })
            .collect();
        let pipe_velocity = model.pipes.iter().zip(&pipe_flow).map(|(p, q)| q / p.area()).collect();
        let max_g = model.pipes.iter().map(pipe_conductance).fold(0.0f64, f64::max).max(1e-12);
        let valve_flow = model
            .valves
            .iter()
            .map(|v| match &v.host_pipe {
                Some(host) => model
                    .pipes
                    .iter()
                    .position(|p| &p.id == host)
                    .map_or(0.0, |i| pipe_flow[i]),
                None => VALVE_CONDUCTANCE_SCALE * max_g * (head(&v.from) - head(&v.to)),
            })
            .collect();

        let state = HydraulicState {
            pipe_flow,
            pipe_velocity,
            pump_flow,
            valve_flow,
            tank_volume: volumes.clone(),
            demand,
        };
        for (t, tank) in model.tanks.iter().enumerate() {
            let net = tank_net_inflow(model, &state, &tank.id);
            volumes[t] = (volumes[t] + net * settings.dt_hydraulic_s).max(0.05 * tank.initial_volume);
        }
        steps.push(state);
    }
    Ok(HydraulicProfile {
        dt_hydraulic_s: settings.dt_hydraulic_s,
        steps,
    })
}

fn pipe_conductance(p: &Pipe) -> f64 {
    p.diameter.powf(2.5) / p.length
}

fn propagate_grounding(grounded: &mut [bool], lap: &DMatrix<f64>) {
    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..grounded.len() {
            if grounded[i] {
                continue;
            }
            if (0..grounded.len()).any(|j| j != i && grounded[j] && lap[(i, j)] != 0.0) {
                grounded[i] = true;
                changed = true;
            }
        }
    }
}

fn tank_net_inflow(model: &NetworkModel, s: &HydraulicState, tank: &NodeId) -> f64 {
    let mut net = 0.0;
    for (p, q) in model.pipes.iter().zip(&s.pipe_flow) {
        if &p.to == tank {
            net += q;
        }
        if &p.from == tank {
            net -= q;
        }
    }
    for (p, q) in model.pumps.iter().zip(&s.pump_flow) {
        if &p.to == tank {
            net += q;
        }
        if &p.from == tank {
            net -= q;
        }
    }
    for (v, q) in model.valves.iter().zip(&s.valve_flow).filter(|(v, _)| v.host_pipe.is_none()) {
        if &v.to == tank {
            net += q;
        }
        if &v.from == tank {
            net -= q;
        }
    }
    net
}

/// Shape of a synthetic grid network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    /// Pipe length between neighbouring junctions, m.
    pub spacing: f64,
    pub reservoirs: usize,
    pub tanks: usize,
    pub source_quality: f64,
    pub reaction_rate: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            rows: 9,
            cols: 10,
            spacing: 300.0,
            reservoirs: 2,
            tanks: 3,
            source_quality: 1.0,
            reaction_rate: -5.0e-5,
        }
    }
}

/// A rectangular grid of junctions fed by pumped reservoirs at the corners
/// and balanced by tanks along the edges. Demands and diameters vary
/// deterministically with position.
pub fn grid_network(spec: &GridSpec) -> NetworkModel {
    let jid = |r: usize, c: usize| NodeId::new(format!("J{r:02}{c:02}"));
    let mut m = NetworkModel::default();
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            m.junctions.push(Junction {
                id: jid(r, c),
                elevation: 0.0,
                base_demand: 20.0 + 10.0 * ((r * 7 + c * 3) % 5) as f64,
                pattern: Some("DAY".into()),
                initial_quality: 0.0,
            });
        }
    }
    let diameter = |a: usize, b: usize| [0.3, 0.25, 0.2][(a + 2 * b) % 3];
    let mut pipe = |id: String, from: NodeId, to: NodeId, length: f64, d: f64| {
        m.pipes.push(Pipe {
            id: id.as_str().into(),
            from,
            to,
            length,
            diameter: d,
            reaction_rate: spec.reaction_rate,
        })
    };
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            if c + 1 < spec.cols {
                pipe(format!("H{r:02}{c:02}"), jid(r, c), jid(r, c + 1), spec.spacing, diameter(r, c));
            }
            if r + 1 < spec.rows {
                pipe(format!("V{r:02}{c:02}"), jid(r, c), jid(r + 1, c), spec.spacing, diameter(c, r));
            }
        }
    }
    let corners = [
        (0, 0),
        (spec.rows - 1, spec.cols - 1),
        (0, spec.cols - 1),
        (spec.rows - 1, 0),
    ];
    let tank_sites: Vec<(usize, usize)> = (0..spec.tanks)
        .map(|t| {
            let c = (t + 1) * spec.cols / (spec.tanks + 1);
            if t % 2 == 0 {
                (spec.rows - 1, c)
            } else {
                (0, c)
            }
        })
        .collect();
    for (t, &(r, c)) in tank_sites.iter().enumerate() {
        let id = NodeId::new(format!("T{}", t + 1));
        pipe(format!("PT{}", t + 1), jid(r, c), id.clone(), spec.spacing / 2.0, 0.3);
        m.tanks.push(Tank {
            id,
            elevation: 0.0,
            initial_volume: 2000.0,
            initial_quality: 0.0,
            reaction_rate: spec.reaction_rate,
        });
    }
    for k in 0..spec.reservoirs {
        let (r, c) = corners[k % corners.len()];
        let id = NodeId::new(format!("R{}", k + 1));
        m.reservoirs.push(Reservoir {
            id: id.clone(),
            head: 0.0,
            source_quality: spec.source_quality,
        });
        m.pumps.push(Pump {
            id: format!("M{}", k + 1).as_str().into(),
            from: id,
            to: jid(r, c),
        });
    }
    m.patterns.insert(
        "DAY".into(),
        (0..24).map(|h| 1.0 + 0.15 * ((h as f64) * std::f64::consts::PI / 12.0).sin()).map(|v| (v * 1000.0).round() / 1000.0).collect(),
    );
    m.canonicalize();
    m
}
