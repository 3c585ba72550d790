//! Chlorine transport as a sparse linear system `x(k+1) = A(k) x(k)`.
//!
//! The state stacks concentrations in the order junctions, reservoirs,
//! tanks, pipe segments, pumps, valves. Each group is sorted by id, and pipe
//! segments run from the declared `from` node to the `to` node.
//!
//! Pipes use the Lax–Wendroff scheme with Courant number `β = |v| Δt / Δx`:
//!
//! ```text
//! c_s(k+1) = α̲ c_{s-1}(k) + (α + r Δt) c_s(k) + ᾱ c_{s+1}(k)
//! α̲ = β(1+β)/2,   α = 1 − β²,   ᾱ = −β(1−β)/2
//! ```
//!
//! The reaction rate `r` is per second, so it enters scaled by `Δt`. The
//! first segment reads the upstream node; the last segment's downstream
//! neighbour is a ghost cell equal to itself. Junctions mix their inflows
//! instantaneously, tanks are stirred reactors, reservoirs are constant and
//! pumps and standalone valves copy their upstream node. A valve hosted on a
//! pipe copies that pipe's outlet segment.

mod simulate;

pub use simulate::{initial_state, resample, simulate, NoiseSpec, SimulateOptions, Trajectory};

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hydraulics::{HydraulicState, StepDiscretization};
use crate::network::{LinkId, NetworkModel, NodeId};
use crate::sparse::CsrMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("Courant number {0} outside (0, 1]")]
    BetaOutOfRange(f64),
    #[error("tank {0} has non-positive volume")]
    ZeroTankVolume(String),
    #[error("node {0}: mixing denominator is negative or not finite")]
    NegativeMixingDenominator(String),
    #[error("state has length {found}, system expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("discretization has {found} pipes, network has {expected}")]
    PipeCountMismatch { expected: usize, found: usize },
    #[error("simulation needs at least one system")]
    NoSystems,
}

/// Lax–Wendroff weights `(α̲, α, ᾱ)` for the previous, current and next
/// segment.
pub fn lax_coefficients(beta: f64) -> Result<(f64, f64, f64), DynamicsError> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(DynamicsError::BetaOutOfRange(beta));
    }
    Ok((0.5 * beta * (1.0 + beta), 1.0 - beta * beta, -0.5 * beta * (1.0 - beta)))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StateSymbol {
    Junction(NodeId),
    Reservoir(NodeId),
    Tank(NodeId),
    Segment { pipe: LinkId, segment: usize },
    Pump(LinkId),
    Valve(LinkId),
}

impl fmt::Display for StateSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateSymbol::Junction(id) | StateSymbol::Reservoir(id) | StateSymbol::Tank(id) => write!(f, "{id}"),
            StateSymbol::Segment { pipe, segment } => write!(f, "{pipe}:{segment}"),
            StateSymbol::Pump(id) | StateSymbol::Valve(id) => write!(f, "{id}"),
        }
    }
}

/// Bijection between state symbols and positions in `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateIndex {
    n_nodes: usize,
    node_lookup: HashMap<NodeId, usize>,
    pipe_offsets: Vec<usize>,
    segments: Vec<usize>,
    pump_offset: usize,
    valve_offset: usize,
    n_x: usize,
    node_ids: Vec<NodeId>,
    link_ids: Vec<LinkId>,
    counts: [usize; 3],
}

impl StateIndex {
    pub fn new(model: &NetworkModel, segments: &[usize]) -> Result<Self, DynamicsError> {
        if segments.len() != model.pipes.len() {
            return Err(DynamicsError::PipeCountMismatch {
                expected: model.pipes.len(),
                found: segments.len(),
            });
        }
        let node_ids: Vec<NodeId> = model.nodes().map(|n| n.id.clone()).collect();
        let node_lookup = node_ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        let n_nodes = node_ids.len();
        let mut offset = n_nodes;
        let pipe_offsets = segments
            .iter()
            .map(|s| {
                let o = offset;
                offset += s;
                o
            })
            .collect();
        let pump_offset = offset;
        let valve_offset = pump_offset + model.pumps.len();
        let n_x = valve_offset + model.valves.len();
        let link_ids = model
            .pipes
            .iter()
            .map(|p| p.id.clone())
            .chain(model.pumps.iter().map(|p| p.id.clone()))
            .chain(model.valves.iter().map(|v| v.id.clone()))
            .collect();
        Ok(Self {
            n_nodes,
            node_lookup,
            pipe_offsets,
            segments: segments.to_vec(),
            pump_offset,
            valve_offset,
            n_x,
            node_ids,
            link_ids,
            counts: [model.junctions.len(), model.reservoirs.len(), model.tanks.len()],
        })
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// State index of a node, which is also its position in canonical node
    /// order.
    pub fn node(&self, id: &str) -> Option<usize> {
        self.node_lookup.get(id).copied()
    }

    pub fn node_id(&self, i: usize) -> &NodeId {
        &self.node_ids[i]
    }

    pub fn node_ids(&self) -> &[NodeId] {
        &self.node_ids
    }

    pub fn segments(&self) -> &[usize] {
        &self.segments
    }

    pub fn segment(&self, pipe: usize, s: usize) -> usize {
        debug_assert!(s < self.segments[pipe]);
        self.pipe_offsets[pipe] + s
    }

    pub fn pipe_range(&self, pipe: usize) -> std::ops::Range<usize> {
        self.pipe_offsets[pipe]..self.pipe_offsets[pipe] + self.segments[pipe]
    }

    pub fn pump(&self, i: usize) -> usize {
        self.pump_offset + i
    }

    pub fn valve(&self, i: usize) -> usize {
        self.valve_offset + i
    }

    pub fn symbol(&self, i: usize) -> StateSymbol {
        let [nj, nr, _] = self.counts;
        if i < self.n_nodes {
            let id = self.node_ids[i].clone();
            return if i < nj {
                StateSymbol::Junction(id)
            } else if i < nj + nr {
                StateSymbol::Reservoir(id)
            } else {
                StateSymbol::Tank(id)
            };
        }
        if i < self.pump_offset {
            let p = self.pipe_offsets.partition_point(|o| *o <= i) - 1;
            return StateSymbol::Segment {
                pipe: self.link_ids[p].clone(),
                segment: i - self.pipe_offsets[p],
            };
        }
        let link = self.link_ids[self.segments.len() + i - self.pump_offset].clone();
        if i < self.valve_offset {
            StateSymbol::Pump(link)
        } else {
            StateSymbol::Valve(link)
        }
    }

    pub fn symbols(&self) -> impl Iterator<Item = StateSymbol> + '_ {
        (0..self.n_x).map(|i| self.symbol(i))
    }

    /// Positions of the non-pipe states (nodes, pumps, valves).
    pub fn lumped_states(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_nodes).chain(self.pump_offset..self.n_x)
    }
}

/// Transition matrix and metadata for one hydraulic step.
#[derive(Debug, Clone)]
pub struct WqSystem {
    pub a: CsrMatrix,
    pub index: Arc<StateIndex>,
    /// Water-quality time step, s.
    pub dt: f64,
    /// Steps in the metric window.
    pub window_steps: usize,
    /// Steps covering the hydraulic interval when simulating.
    pub interval_steps: usize,
    /// Courant number per pipe.
    pub courant: Vec<f64>,
}

impl WqSystem {
    pub fn n_x(&self) -> usize {
        self.a.n_rows()
    }

    /// Fraction of zero entries in `A`.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.a.density()
    }
}

/// A link end that delivers water into a node.
struct Inflow {
    flow: f64,
    state: usize,
}

/// Upstream node and segment positions in flow direction.
fn pipe_orientation<'a>(from: &'a NodeId, to: &'a NodeId, q: f64) -> (&'a NodeId, &'a NodeId, bool) {
    if q < 0.0 {
        (to, from, false)
    } else {
        (from, to, true)
    }
}

fn pipe_outlet(index: &StateIndex, pipe: usize, forward: bool) -> usize {
    let s = index.segments[pipe];
    if forward {
        index.segment(pipe, s - 1)
    } else {
        index.segment(pipe, 0)
    }
}

/// Assembles `A(k)` for one hydraulic state.
pub fn assemble(model: &NetworkModel, state: &HydraulicState, disc: &StepDiscretization) -> Result<WqSystem, DynamicsError> {
    let index = StateIndex::new(model, &disc.segments)?;
    let dt = disc.dt;
    let n_x = index.n_x();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(3 * n_x);
    let mut inflows: Vec<Vec<Inflow>> = (0..index.n_nodes()).map(|_| Vec::new()).collect();
    let node = |id: &NodeId| index.node(id.as_str()).expect("validated endpoint");

    for (i, pipe) in model.pipes.iter().enumerate() {
        let q = state.pipe_flow[i];
        let v = state.pipe_velocity[i];
        let (up, down, forward) = pipe_orientation(&pipe.from, &pipe.to, q);
        let s = disc.segments[i];
        let at = |p: usize| if forward { index.segment(i, p) } else { index.segment(i, s - 1 - p) };
        let beta = if v == 0.0 { 0.0 } else { v.abs() * dt / disc.dx[i] };
        let (lo, mid, hi) = if beta == 0.0 {
            (0.0, 1.0, 0.0)
        } else {
            lax_coefficients(beta)?
        };
        let mid = mid + pipe.reaction_rate * dt;
        for p in 0..s {
            let row = at(p);
            let prev = if p == 0 { node(up) } else { at(p - 1) };
            triplets.push((row, prev, lo));
            if p + 1 < s {
                triplets.push((row, row, mid));
                triplets.push((row, at(p + 1), hi));
            } else {
                triplets.push((row, row, mid + hi));
            }
        }
        if q != 0.0 {
            inflows[node(down)].push(Inflow {
                flow: q.abs(),
                state: pipe_outlet(&index, i, forward),
            });
        }
    }

    let copy_upstream = |triplets: &mut Vec<(usize, usize, f64)>, inflows: &mut Vec<Vec<Inflow>>, row: usize, from: &NodeId, to: &NodeId, q: f64| {
        if q == 0.0 {
            triplets.push((row, row, 1.0));
            return;
        }
        let (up, down, _) = pipe_orientation(from, to, q);
        triplets.push((row, node(up), 1.0));
        inflows[node(down)].push(Inflow { flow: q.abs(), state: row });
    };
    for (i, pump) in model.pumps.iter().enumerate() {
        copy_upstream(&mut triplets, &mut inflows, index.pump(i), &pump.from, &pump.to, state.pump_flow[i]);
    }
    for (i, valve) in model.valves.iter().enumerate() {
        let row = index.valve(i);
        match &valve.host_pipe {
            None => copy_upstream(&mut triplets, &mut inflows, row, &valve.from, &valve.to, state.valve_flow[i]),
            Some(host) => {
                let p = model.pipes.iter().position(|p| &p.id == host).expect("validated host pipe");
                let q = state.pipe_flow[p];
                if q == 0.0 {
                    triplets.push((row, row, 1.0));
                } else {
                    triplets.push((row, pipe_outlet(&index, p, q > 0.0), 1.0));
                }
            }
        }
    }

    let n_j = model.junctions.len();
    let n_r = model.reservoirs.len();
    for (i, ins) in inflows.iter().enumerate() {
        let total: f64 = ins.iter().map(|f| f.flow).sum();
        if total < 0.0 || !total.is_finite() {
            return Err(DynamicsError::NegativeMixingDenominator(index.node_id(i).to_string()));
        }
        if i < n_j {
            if total == 0.0 {
                triplets.push((i, i, 1.0));
            } else {
                triplets.extend(ins.iter().map(|f| (i, f.state, f.flow / total)));
            }
        } else if i < n_j + n_r {
            triplets.push((i, i, 1.0));
        } else {
            let t = i - n_j - n_r;
            let tank = &model.tanks[t];
            let volume = state.tank_volume[t];
            if volume.is_nan() || volume <= 0.0 {
                return Err(DynamicsError::ZeroTankVolume(tank.id.to_string()));
            }
            triplets.push((i, i, 1.0 - dt * total / volume + dt * tank.reaction_rate));
            triplets.extend(ins.iter().map(|f| (i, f.state, dt * f.flow / volume)));
        }
    }

    let a = CsrMatrix::from_triplets(n_x, n_x, triplets);
    debug_assert!(a.all_finite());
    Ok(WqSystem {
        a,
        index: Arc::new(index),
        dt,
        window_steps: disc.window_steps,
        interval_steps: disc.interval_steps,
        courant: disc.courant.clone(),
    })
}

/// Chlorine held in pipe segments and tanks, in mg/L·m³.
pub fn stored_mass(model: &NetworkModel, index: &StateIndex, state: &HydraulicState, x: &[f64]) -> f64 {
    let pipes: f64 = model
        .pipes
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let cell = p.area() * p.length / index.segments[i] as f64;
            index.pipe_range(i).map(|j| x[j]).sum::<f64>() * cell
        })
        .sum();
    let base = model.junctions.len() + model.reservoirs.len();
    let tanks: f64 = state.tank_volume.iter().enumerate().map(|(t, v)| v * x[base + t]).sum();
    pipes + tanks
}
