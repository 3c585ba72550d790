//! Example networks shipped with the crate, plus the synthetic hydraulic
//! settings used for each.

use crate::hydraulics::{model_demands, synthesize_hydraulics, GeneratorError, GeneratorSettings, HydraulicProfile, SegmentPolicy};
use crate::network::{parse_network, NetworkModel};

pub const THREE_NODE_INP: &str = include_str!("../data/three_node.inp");
pub const NET1_INP: &str = include_str!("../data/net1.inp");
pub const GRID_INP: &str = include_str!("../data/grid.inp");

pub fn three_node() -> NetworkModel {
    parse_network(THREE_NODE_INP).expect("bundled three-node network parses")
}

pub fn net1() -> NetworkModel {
    parse_network(NET1_INP).expect("bundled Net1-like network parses")
}

pub fn grid() -> NetworkModel {
    parse_network(GRID_INP).expect("bundled grid network parses")
}

/// Single flow path: the pump covers demand plus a steady 10% tank fill.
pub fn three_node_settings() -> GeneratorSettings {
    GeneratorSettings {
        dt_hydraulic_s: 3600.0,
        fill_fraction: 0.1,
        swing: 0.0,
    }
}

/// Pumping follows mean demand, the tank absorbs the swings, so the tank
/// pipe reverses direction during the day.
pub fn net1_settings() -> GeneratorSettings {
    GeneratorSettings {
        dt_hydraulic_s: 3600.0,
        fill_fraction: 0.0,
        swing: 1.0,
    }
}

pub fn grid_settings() -> GeneratorSettings {
    GeneratorSettings {
        dt_hydraulic_s: 3600.0,
        fill_fraction: 0.05,
        swing: 0.5,
    }
}

/// Looks up a bundled network and its generator settings by name.
pub fn by_name(name: &str) -> Option<(NetworkModel, GeneratorSettings)> {
    match name {
        "three-node" | "three_node" => Some((three_node(), three_node_settings())),
        "net1" => Some((net1(), net1_settings())),
        "grid" => Some((grid(), grid_settings())),
        _ => None,
    }
}

/// Segmentation used for each bundled network: 150 segments on the
/// three-node pipe, a 5 s dynamic target on Net1 and 20 segments per grid
/// pipe.
pub fn default_policy(name: &str) -> Option<SegmentPolicy> {
    match name {
        "three-node" | "three_node" => Some(SegmentPolicy::Fixed { segments: 150, dt: None }),
        "net1" => Some(SegmentPolicy::Dynamic { dt_target: 5.0 }),
        "grid" => Some(SegmentPolicy::Fixed { segments: 20, dt: None }),
        _ => None,
    }
}

/// Metric window used with the bundled networks, s.
pub const DEFAULT_WINDOW_S: f64 = 300.0;

/// Hydraulics for `model` driven by its own demands and patterns.
pub fn synthetic_profile(model: &NetworkModel, settings: &GeneratorSettings, n_steps: usize) -> Result<HydraulicProfile, GeneratorError> {
    let demands = model_demands(model, n_steps, 1).map_err(|e| GeneratorError::Demand(e.to_string()))?;
    synthesize_hydraulics(model, &demands, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hydraulics::{grid_network, GridSpec};
    use crate::network::validate;

    #[test]
    fn bundled_networks_validate() {
        for (name, m) in [("three", three_node()), ("net1", net1()), ("grid", grid())] {
            assert!(validate(&m).is_empty(), "{name}: {:?}", validate(&m));
        }
    }

    #[test]
    fn three_node_counts() {
        let m = three_node();
        assert_eq!(
            (m.junctions.len(), m.reservoirs.len(), m.tanks.len(), m.pipes.len(), m.pumps.len()),
            (1, 1, 1, 1, 1)
        );
    }

    #[test]
    fn grid_file_matches_generator() {
        assert_eq!(grid(), grid_network(&GridSpec::default()));
    }

    #[test]
    fn net1_tank_pipe_reverses() {
        let m = net1();
        let p = synthetic_profile(&m, &net1_settings(), 24).unwrap();
        let i = m.pipes.iter().position(|p| p.id.as_str() == "P110").unwrap();
        let signs: Vec<f64> = p.steps.iter().map(|s| s.pipe_flow[i].signum()).collect();
        assert!(signs.contains(&1.0) && signs.contains(&-1.0), "{signs:?}");
    }
}
