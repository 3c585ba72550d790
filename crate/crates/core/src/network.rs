//! Water network graph and the INP-subset text format.
//!
//! Accepted sections (`;` starts a comment, columns are whitespace
//! separated, optional columns in brackets):
//!
//! | section        | columns                                              |
//! |----------------|------------------------------------------------------|
//! | `[JUNCTIONS]`  | `id elevation base_demand_gpm [pattern]`             |
//! | `[RESERVOIRS]` | `id head [pattern]`                                  |
//! | `[TANKS]`      | `id elevation initial_volume_m3 [reaction_per_s]`    |
//! | `[PIPES]`      | `id from to length_m diameter_m [reaction_per_s]`    |
//! | `[PUMPS]`      | `id from to` (extra columns ignored)                 |
//! | `[VALVES]`     | `id from to [host_pipe]`                             |
//! | `[DEMANDS]`    | `junction base_demand_gpm [pattern]` (overrides)     |
//! | `[PATTERNS]`   | `id multiplier...` (repeated ids append)             |
//! | `[QUALITY]`    | `node initial_quality_mg_per_l`                      |
//!
//! `[JUNCTIONS]`, `[RESERVOIRS]`, `[TANKS]` and `[PIPES]` must be present
//! (they may be empty). `[TITLE]`, `[OPTIONS]` and `[END]` are recognised;
//! any other section is skipped with a warning.

use std::borrow::Borrow;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

macro_rules! id_newtype {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                let id = id.into();
                assert!(!id.is_empty() && !id.contains(char::is_whitespace), "invalid id {id:?}");
                Self(id)
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self::new(s)
            }
        }
    };
}

id_newtype!(NodeId);
id_newtype!(LinkId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Junction,
    Reservoir,
    Tank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Junction {
    pub id: NodeId,
    pub elevation: f64,
    /// Base demand in gallons per minute.
    pub base_demand: f64,
    pub pattern: Option<String>,
    /// Initial concentration, mg/L.
    pub initial_quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reservoir {
    pub id: NodeId,
    pub head: f64,
    /// Constant source concentration, mg/L.
    pub source_quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tank {
    pub id: NodeId,
    pub elevation: f64,
    /// Initial stored volume, m³.
    pub initial_volume: f64,
    pub initial_quality: f64,
    /// First-order bulk reaction rate, 1/s (negative for decay).
    pub reaction_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipe {
    pub id: LinkId,
    pub from: NodeId,
    pub to: NodeId,
    /// Length, m.
    pub length: f64,
    /// Diameter, m.
    pub diameter: f64,
    /// First-order reaction rate, 1/s (negative for decay).
    pub reaction_rate: f64,
}

impl Pipe {
    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.diameter * self.diameter / 4.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pump {
    pub id: LinkId,
    pub from: NodeId,
    pub to: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Valve {
    pub id: LinkId,
    pub from: NodeId,
    pub to: NodeId,
    /// Pipe this valve sits on; hosted valves are a pass-through segment of
    /// that pipe, standalone valves copy their upstream node like pumps.
    pub host_pipe: Option<LinkId>,
}

/// Network topology and physical attributes. Every collection is kept in
/// lexicographic id order, which is the canonical order used for state
/// indices downstream.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NetworkModel {
    pub junctions: Vec<Junction>,
    pub reservoirs: Vec<Reservoir>,
    pub tanks: Vec<Tank>,
    pub pipes: Vec<Pipe>,
    pub pumps: Vec<Pump>,
    pub valves: Vec<Valve>,
    pub patterns: BTreeMap<String, Vec<f64>>,
}

/// Reference to a node in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef<'a> {
    pub id: &'a NodeId,
    pub kind: NodeKind,
}

/// Any transport link, for code that treats pipes, pumps and valves alike.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinkKind {
    Pipe,
    Pump,
    Valve,
}

impl NetworkModel {
    /// Sorts every collection into canonical order.
    pub fn canonicalize(&mut self) {
        self.junctions.sort_by(|a, b| a.id.cmp(&b.id));
        self.reservoirs.sort_by(|a, b| a.id.cmp(&b.id));
        self.tanks.sort_by(|a, b| a.id.cmp(&b.id));
        self.pipes.sort_by(|a, b| a.id.cmp(&b.id));
        self.pumps.sort_by(|a, b| a.id.cmp(&b.id));
        self.valves.sort_by(|a, b| a.id.cmp(&b.id));
    }

    pub fn n_nodes(&self) -> usize {
        self.junctions.len() + self.reservoirs.len() + self.tanks.len()
    }

    /// Junctions, then reservoirs, then tanks.
    pub fn nodes(&self) -> impl Iterator<Item = NodeRef<'_>> + '_ {
        let j = self.junctions.iter().map(|n| NodeRef {
            id: &n.id,
            kind: NodeKind::Junction,
        });
        let r = self.reservoirs.iter().map(|n| NodeRef {
            id: &n.id,
            kind: NodeKind::Reservoir,
        });
        let t = self.tanks.iter().map(|n| NodeRef {
            id: &n.id,
            kind: NodeKind::Tank,
        });
        j.chain(r).chain(t)
    }

    pub fn node_kind(&self, id: &str) -> Option<NodeKind> {
        self.nodes().find(|n| n.id.as_str() == id).map(|n| n.kind)
    }

    pub fn link_kind(&self, id: &str) -> Option<LinkKind> {
        if self.pipes.iter().any(|p| p.id.as_str() == id) {
            Some(LinkKind::Pipe)
        } else if self.pumps.iter().any(|p| p.id.as_str() == id) {
            Some(LinkKind::Pump)
        } else if self.valves.iter().any(|p| p.id.as_str() == id) {
            Some(LinkKind::Valve)
        } else {
            None
        }
    }

    pub fn pipe(&self, id: &str) -> Option<&Pipe> {
        self.pipes.iter().find(|p| p.id.as_str() == id)
    }

    pub fn tank(&self, id: &str) -> Option<&Tank> {
        self.tanks.iter().find(|t| t.id.as_str() == id)
    }

    pub fn junction(&self, id: &str) -> Option<&Junction> {
        self.junctions.iter().find(|j| j.id.as_str() == id)
    }

    /// Valves that are not hosted on a pipe and therefore carry transport.
    pub fn standalone_valves(&self) -> impl Iterator<Item = &Valve> {
        self.valves.iter().filter(|v| v.host_pipe.is_none())
    }

    /// Pattern multipliers for a junction (`[1.0]` when it has none).
    pub fn junction_pattern(&self, junction: &Junction) -> Vec<f64> {
        junction
            .pattern
            .as_ref()
            .and_then(|p| self.patterns.get(p))
            .cloned()
            .unwrap_or_else(|| vec![1.0])
    }

    /// Serializes back to the INP subset accepted by [`parse_network`].
    pub fn to_inp(&self) -> String {
        let mut s = String::new();
        s.push_str("[JUNCTIONS]\n");
        for j in &self.junctions {
            let _ = write!(s, "{} {} {}", j.id, j.elevation, j.base_demand);
            if let Some(p) = &j.pattern {
                let _ = write!(s, " {p}");
            }
            s.push('\n');
        }
        s.push_str("\n[RESERVOIRS]\n");
        for r in &self.reservoirs {
            let _ = writeln!(s, "{} {}", r.id, r.head);
        }
        s.push_str("\n[TANKS]\n");
        for t in &self.tanks {
            let _ = writeln!(s, "{} {} {} {}", t.id, t.elevation, t.initial_volume, t.reaction_rate);
        }
        s.push_str("\n[PIPES]\n");
        for p in &self.pipes {
            let _ = writeln!(
                s,
                "{} {} {} {} {} {}",
                p.id, p.from, p.to, p.length, p.diameter, p.reaction_rate
            );
        }
        s.push_str("\n[PUMPS]\n");
        for p in &self.pumps {
            let _ = writeln!(s, "{} {} {}", p.id, p.from, p.to);
        }
        s.push_str("\n[VALVES]\n");
        for v in &self.valves {
            let _ = write!(s, "{} {} {}", v.id, v.from, v.to);
            if let Some(h) = &v.host_pipe {
                let _ = write!(s, " {h}");
            }
            s.push('\n');
        }
        s.push_str("\n[PATTERNS]\n");
        for (id, mults) in &self.patterns {
            let _ = write!(s, "{id}");
            for m in mults {
                let _ = write!(s, " {m}");
            }
            s.push('\n');
        }
        s.push_str("\n[QUALITY]\n");
        for j in &self.junctions {
            let _ = writeln!(s, "{} {}", j.id, j.initial_quality);
        }
        for r in &self.reservoirs {
            let _ = writeln!(s, "{} {}", r.id, r.source_quality);
        }
        for t in &self.tanks {
            let _ = writeln!(s, "{} {}", t.id, t.initial_quality);
        }
        s.push_str("\n[END]\n");
        s
    }
}

/// Sensor locations: an ordered set of nodes with a capacity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorSet {
    nodes: Vec<NodeId>,
    capacity: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum SensorSetError {
    #[error("sensor capacity must be positive")]
    ZeroCapacity,
    #[error("sensor set exceeds capacity {capacity}")]
    OverCapacity { capacity: usize },
    #[error("sensor location {0} is not a network node")]
    NotANode(String),
    #[error("sensor location {0} listed twice")]
    Duplicate(String),
}

impl SensorSet {
    pub fn new(model: &NetworkModel, nodes: Vec<NodeId>, capacity: usize) -> Result<Self, SensorSetError> {
        if capacity == 0 {
            return Err(SensorSetError::ZeroCapacity);
        }
        if nodes.len() > capacity {
            return Err(SensorSetError::OverCapacity { capacity });
        }
        let mut seen = HashSet::new();
        for n in &nodes {
            if model.node_kind(n.as_str()).is_none() {
                return Err(SensorSetError::NotANode(n.to_string()));
            }
            if !seen.insert(n.clone()) {
                return Err(SensorSetError::Duplicate(n.to_string()));
            }
        }
        Ok(Self { nodes, capacity })
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("line {line}: duplicate id {id}")]
    DuplicateId { id: String, line: usize },
    #[error("line {line}: link endpoint {id} is not a node")]
    DanglingEndpoint { id: String, line: usize },
    #[error("line {line}: required section [{section}] is missing")]
    MissingSection { section: String, line: usize },
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseWarning {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DiagnosticKind {
    DuplicateId,
    DanglingEndpoint,
    NonpositiveLength,
    NonpositiveDiameter,
    NonfiniteValue,
    NegativeDemand,
    NegativeQuality,
    NonpositiveTankVolume,
    UnknownPattern,
    UnknownHostPipe,
    SelfLoop,
    IsolatedNode,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub kind: DiagnosticKind,
    pub subject: String,
    pub message: String,
}

impl Diagnostic {
    fn error(kind: DiagnosticKind, subject: &str, message: String) -> Self {
        Self {
            severity: Severity::Error,
            kind,
            subject: subject.to_string(),
            message,
        }
    }

    fn warning(kind: DiagnosticKind, subject: &str, message: String) -> Self {
        Self {
            severity: Severity::Warning,
            kind,
            subject: subject.to_string(),
            message,
        }
    }
}

/// Checks every model invariant. The list is empty iff the model is valid
/// and warning-free.
pub fn validate(model: &NetworkModel) -> Vec<Diagnostic> {
    use DiagnosticKind::*;
    let mut out = Vec::new();

    let mut node_ids = HashSet::new();
    for n in model.nodes() {
        if !node_ids.insert(n.id.as_str()) {
            out.push(Diagnostic::error(DuplicateId, n.id.as_str(), format!("node id {} is used twice", n.id)));
        }
    }
    let mut link_ids = HashSet::new();
    let links = model
        .pipes
        .iter()
        .map(|p| (&p.id, &p.from, &p.to))
        .chain(model.pumps.iter().map(|p| (&p.id, &p.from, &p.to)))
        .chain(model.valves.iter().map(|v| (&v.id, &v.from, &v.to)));
    let mut connected = HashSet::new();
    for (id, from, to) in links {
        if !link_ids.insert(id.as_str()) {
            out.push(Diagnostic::error(DuplicateId, id.as_str(), format!("link id {id} is used twice")));
        }
        for end in [from, to] {
            if !node_ids.contains(end.as_str()) {
                out.push(Diagnostic::error(
                    DanglingEndpoint,
                    end.as_str(),
                    format!("link {id} references missing node {end}"),
                ));
            }
            connected.insert(end.as_str());
        }
        if from == to {
            out.push(Diagnostic::error(SelfLoop, id.as_str(), format!("link {id} connects {from} to itself")));
        }
    }

    for p in &model.pipes {
        if !p.length.is_finite() || !p.diameter.is_finite() || !p.reaction_rate.is_finite() {
            out.push(Diagnostic::error(NonfiniteValue, p.id.as_str(), format!("pipe {} has a non-finite attribute", p.id)));
            continue;
        }
        if p.length <= 0.0 {
            out.push(Diagnostic::error(
                NonpositiveLength,
                p.id.as_str(),
                format!("pipe {} has length {}", p.id, p.length),
            ));
        }
        if p.diameter <= 0.0 {
            out.push(Diagnostic::error(
                NonpositiveDiameter,
                p.id.as_str(),
                format!("pipe {} has diameter {}", p.id, p.diameter),
            ));
        }
    }
    for j in &model.junctions {
        if !j.base_demand.is_finite() || !j.initial_quality.is_finite() {
            out.push(Diagnostic::error(NonfiniteValue, j.id.as_str(), format!("junction {} has a non-finite attribute", j.id)));
        } else if j.base_demand < 0.0 {
            out.push(Diagnostic::error(
                NegativeDemand,
                j.id.as_str(),
                format!("junction {} has negative base demand", j.id),
            ));
        }
        if j.initial_quality < 0.0 {
            out.push(Diagnostic::error(NegativeQuality, j.id.as_str(), format!("junction {} starts below zero", j.id)));
        }
        if let Some(p) = &j.pattern {
            match model.patterns.get(p) {
                None => out.push(Diagnostic::error(
                    UnknownPattern,
                    j.id.as_str(),
                    format!("junction {} uses undefined pattern {p}", j.id),
                )),
                Some(m) if m.is_empty() || m.iter().any(|v| !v.is_finite() || *v < 0.0) => {
                    out.push(Diagnostic::error(
                        UnknownPattern,
                        p,
                        format!("pattern {p} is empty or has negative multipliers"),
                    ))
                }
                _ => {}
            }
        }
    }
    for r in &model.reservoirs {
        if !r.source_quality.is_finite() || r.source_quality < 0.0 {
            out.push(Diagnostic::error(
                NegativeQuality,
                r.id.as_str(),
                format!("reservoir {} has invalid source quality", r.id),
            ));
        }
    }
    for t in &model.tanks {
        if !t.initial_volume.is_finite() || !t.reaction_rate.is_finite() || !t.initial_quality.is_finite() {
            out.push(Diagnostic::error(NonfiniteValue, t.id.as_str(), format!("tank {} has a non-finite attribute", t.id)));
        } else if t.initial_volume <= 0.0 {
            out.push(Diagnostic::error(
                NonpositiveTankVolume,
                t.id.as_str(),
                format!("tank {} has volume {}", t.id, t.initial_volume),
            ));
        }
        if t.initial_quality < 0.0 {
            out.push(Diagnostic::error(NegativeQuality, t.id.as_str(), format!("tank {} starts below zero", t.id)));
        }
    }
    for v in &model.valves {
        if let Some(h) = &v.host_pipe {
            if model.pipe(h.as_str()).is_none() {
                out.push(Diagnostic::error(
                    UnknownHostPipe,
                    v.id.as_str(),
                    format!("valve {} is hosted on missing pipe {h}", v.id),
                ));
            }
        }
    }
    for n in model.nodes() {
        if !connected.contains(n.id.as_str()) {
            out.push(Diagnostic::warning(IsolatedNode, n.id.as_str(), format!("node {} has no links", n.id)));
        }
    }
    out
}

const REQUIRED: [&str; 4] = ["JUNCTIONS", "RESERVOIRS", "TANKS", "PIPES"];

/// Parses an INP-subset document into a validated model.
pub fn parse_network(text: &str) -> Result<NetworkModel, NetworkError> {
    parse_network_with_warnings(text).map(|(m, _)| m)
}

/// Like [`parse_network`], also returning skipped-section warnings.
pub fn parse_network_with_warnings(text: &str) -> Result<(NetworkModel, Vec<ParseWarning>), NetworkError> {
    let mut model = NetworkModel::default();
    let mut warnings = Vec::new();
    let mut seen_sections = HashSet::new();
    let mut node_lines: HashMap<String, usize> = HashMap::new();
    let mut link_lines: HashMap<String, usize> = HashMap::new();
    let mut endpoint_refs: Vec<(String, usize)> = Vec::new();
    let mut quality: Vec<(String, f64, usize)> = Vec::new();
    let mut demands: Vec<(String, f64, Option<String>, usize)> = Vec::new();
    let mut section: Option<String> = None;
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let content = raw.split(';').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            let name = content
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| NetworkError::MalformedRow {
                    line,
                    reason: format!("bad section header {content:?}"),
                })?
                .trim()
                .to_ascii_uppercase();
            if name == "END" {
                break;
            }
            seen_sections.insert(name.clone());
            section = Some(name);
            continue;
        }
        let cols: Vec<&str> = content.split_whitespace().collect();
        let Some(sec) = section.as_deref() else {
            return Err(NetworkError::MalformedRow {
                line,
                reason: "data outside any section".into(),
            });
        };
        let num = |i: usize, what: &str| -> Result<f64, NetworkError> {
            let tok = cols.get(i).ok_or_else(|| NetworkError::MalformedRow {
                line,
                reason: format!("missing {what}"),
            })?;
            tok.parse::<f64>().map_err(|_| NetworkError::MalformedRow {
                line,
                reason: format!("{what} {tok:?} is not a number"),
            })
        };
        let opt_num = |i: usize, what: &str| -> Result<Option<f64>, NetworkError> {
            if cols.len() > i {
                num(i, what).map(Some)
            } else {
                Ok(None)
            }
        };
        let mut add_node = |id: &str| -> Result<NodeId, NetworkError> {
            if node_lines.insert(id.to_string(), line).is_some() {
                return Err(NetworkError::DuplicateId { id: id.into(), line });
            }
            Ok(NodeId::new(id))
        };
        let mut add_link = |id: &str| -> Result<LinkId, NetworkError> {
            if link_lines.insert(id.to_string(), line).is_some() {
                return Err(NetworkError::DuplicateId { id: id.into(), line });
            }
            Ok(LinkId::new(id))
        };
        let need = |n: usize| -> Result<(), NetworkError> {
            if cols.len() < n {
                Err(NetworkError::MalformedRow {
                    line,
                    reason: format!("expected at least {n} columns, found {}", cols.len()),
                })
            } else {
                Ok(())
            }
        };
        match sec {
            "JUNCTIONS" => {
                need(3)?;
                let id = add_node(cols[0])?;
                model.junctions.push(Junction {
                    id,
                    elevation: num(1, "elevation")?,
                    base_demand: num(2, "demand")?,
                    pattern: cols.get(3).map(|s| s.to_string()),
                    initial_quality: 0.0,
                });
            }
            "RESERVOIRS" => {
                need(2)?;
                let id = add_node(cols[0])?;
                model.reservoirs.push(Reservoir {
                    id,
                    head: num(1, "head")?,
                    source_quality: 0.0,
                });
            }
            "TANKS" => {
                need(3)?;
                let id = add_node(cols[0])?;
                model.tanks.push(Tank {
                    id,
                    elevation: num(1, "elevation")?,
                    initial_volume: num(2, "initial volume")?,
                    initial_quality: 0.0,
                    reaction_rate: opt_num(3, "reaction rate")?.unwrap_or(0.0),
                });
            }
            "PIPES" => {
                need(5)?;
                let id = add_link(cols[0])?;
                endpoint_refs.push((cols[1].to_string(), line));
                endpoint_refs.push((cols[2].to_string(), line));
                model.pipes.push(Pipe {
                    id,
                    from: NodeId::new(cols[1]),
                    to: NodeId::new(cols[2]),
                    length: num(3, "length")?,
                    diameter: num(4, "diameter")?,
                    reaction_rate: opt_num(5, "reaction rate")?.unwrap_or(0.0),
                });
            }
            "PUMPS" => {
                need(3)?;
                let id = add_link(cols[0])?;
                endpoint_refs.push((cols[1].to_string(), line));
                endpoint_refs.push((cols[2].to_string(), line));
                model.pumps.push(Pump {
                    id,
                    from: NodeId::new(cols[1]),
                    to: NodeId::new(cols[2]),
                });
            }
            "VALVES" => {
                need(3)?;
                let id = add_link(cols[0])?;
                endpoint_refs.push((cols[1].to_string(), line));
                endpoint_refs.push((cols[2].to_string(), line));
                model.valves.push(Valve {
                    id,
                    from: NodeId::new(cols[1]),
                    to: NodeId::new(cols[2]),
                    host_pipe: cols.get(3).map(|s| LinkId::new(*s)),
                });
            }
            "DEMANDS" => {
                need(2)?;
                demands.push((cols[0].to_string(), num(1, "demand")?, cols.get(2).map(|s| s.to_string()), line));
            }
            "PATTERNS" => {
                need(2)?;
                let mults = (1..cols.len())
                    .map(|i| num(i, "multiplier"))
                    .collect::<Result<Vec<_>, _>>()?;
                model.patterns.entry(cols[0].to_string()).or_default().extend(mults);
            }
            "QUALITY" => {
                need(2)?;
                quality.push((cols[0].to_string(), num(1, "quality")?, line));
            }
            "TITLE" | "OPTIONS" => {}
            other => {
                // first row of an unknown section carries the warning
                if warnings.iter().all(|w: &ParseWarning| !w.message.contains(&format!("[{other}]"))) {
                    warnings.push(ParseWarning {
                        line,
                        message: format!("skipping unsupported section [{other}]"),
                    });
                }
            }
        }
    }

    for s in REQUIRED {
        if !seen_sections.contains(s) {
            return Err(NetworkError::MissingSection {
                section: s.to_string(),
                line: last_line,
            });
        }
    }
    for (id, line) in endpoint_refs {
        if !node_lines.contains_key(&id) {
            return Err(NetworkError::DanglingEndpoint { id, line });
        }
    }
    for (id, demand, pattern, line) in demands {
        let j = model
            .junctions
            .iter_mut()
            .find(|j| j.id.as_str() == id)
            .ok_or_else(|| NetworkError::Invalid {
                line,
                message: format!("demand for unknown junction {id}"),
            })?;
        j.base_demand = demand;
        if pattern.is_some() {
            j.pattern = pattern;
        }
    }
    for (id, q, line) in quality {
        if let Some(j) = model.junctions.iter_mut().find(|j| j.id.as_str() == id) {
            j.initial_quality = q;
        } else if let Some(r) = model.reservoirs.iter_mut().find(|r| r.id.as_str() == id) {
            r.source_quality = q;
        } else if let Some(t) = model.tanks.iter_mut().find(|t| t.id.as_str() == id) {
            t.initial_quality = q;
        } else {
            return Err(NetworkError::Invalid {
                line,
                message: format!("quality for unknown node {id}"),
            });
        }
    }

    model.canonicalize();
    for d in validate(&model) {
        if d.severity == Severity::Error {
            let line = node_lines
                .get(&d.subject)
                .or_else(|| link_lines.get(&d.subject))
                .copied()
                .unwrap_or(0);
            return Err(NetworkError::Invalid {
                line,
                message: d.message,
            });
        }
        warnings.push(ParseWarning {
            line: node_lines.get(&d.subject).copied().unwrap_or(0),
            message: d.message,
        });
    }
    Ok((model, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const THREE_NODE: &str = "\
[TITLE]
three node
[JUNCTIONS]
J2 0 2000 P1
[RESERVOIRS]
R1 0
[TANKS]
T3 10 500
[PIPES]
P23 J2 T3 300 0.3 0
[PUMPS]
M1 R1 J2
[PATTERNS]
P1 1 1 1
[QUALITY]
R1 0.8
[END]
";

    #[test]
    fn parses_three_node() {
        let m = parse_network(THREE_NODE).unwrap();
        assert_eq!(m.junctions.len(), 1);
        assert_eq!(m.reservoirs.len(), 1);
        assert_eq!(m.tanks.len(), 1);
        assert_eq!(m.pipes.len(), 1);
        assert_eq!(m.pumps.len(), 1);
        assert_eq!(m.reservoirs[0].source_quality, 0.8);
        assert!(validate(&m).is_empty());
    }

    #[test]
    fn empty_document_is_missing_sections() {
        assert!(matches!(parse_network(""), Err(NetworkError::MissingSection { .. })));
    }

    #[test]
    fn dangling_endpoint_names_node_and_line() {
        let text = THREE_NODE.replace("P23 J2 T3", "P23 J99 T3");
        match parse_network(&text) {
            Err(NetworkError::DanglingEndpoint { id, line }) => {
                assert_eq!(id, "J99");
                assert_eq!(line, 10);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_node_is_rejected_at_second_line() {
        let text = THREE_NODE.replace("J2 0 2000 P1", "J2 0 2000 P1\nJ2 0 10");
        assert_eq!(
            parse_network(&text),
            Err(NetworkError::DuplicateId {
                id: "J2".into(),
                line: 5
            })
        );
    }

    #[test]
    fn malformed_number_reports_line() {
        let text = THREE_NODE.replace("300 0.3", "abc 0.3");
        assert!(matches!(parse_network(&text), Err(NetworkError::MalformedRow { line: 10, .. })));
    }

    #[test]
    fn unknown_sections_warn() {
        let text = THREE_NODE.replace("[END]", "[CURVES]\nC1 1 2\nC1 3 4\n[END]");
        let (_, warnings) = parse_network_with_warnings(&text).unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].message.contains("CURVES"));
    }

    #[test]
    fn validate_flags_duplicates_and_zero_length() {
        let mut m = parse_network(THREE_NODE).unwrap();
        let mut dup = m.junctions[0].clone();
        dup.base_demand = 1.0;
        m.junctions.push(dup);
        let d = validate(&m);
        assert!(d.iter().any(|d| d.kind == DiagnosticKind::DuplicateId && d.severity == Severity::Error));

        let mut m = parse_network(THREE_NODE).unwrap();
        m.pipes[0].length = 0.0;
        let d = validate(&m);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DiagnosticKind::NonpositiveLength);
    }

    #[test]
    fn parse_rejects_zero_length_pipe() {
        let text = THREE_NODE.replace("300 0.3", "0 0.3");
        assert!(matches!(parse_network(&text), Err(NetworkError::Invalid { line: 10, .. })));
    }

    #[test]
    fn canonical_order_is_lexicographic() {
        let text = "[JUNCTIONS]\nJ2 0 1\nJ10 0 1\n[RESERVOIRS]\nR1 0\n[TANKS]\n[PIPES]\nA J2 J10 10 0.1\nB R1 J2 10 0.1\n";
        let m = parse_network(text).unwrap();
        let ids: Vec<_> = m.nodes().map(|n| n.id.as_str().to_string()).collect();
        assert_eq!(ids, ["J10", "J2", "R1"]);
    }

    #[test]
    fn sensor_set_checks_membership_and_capacity() {
        let m = parse_network(THREE_NODE).unwrap();
        assert!(SensorSet::new(&m, vec!["J2".into()], 1).is_ok());
        assert_eq!(
            SensorSet::new(&m, vec!["J2".into(), "T3".into()], 1),
            Err(SensorSetError::OverCapacity { capacity: 1 })
        );
        assert_eq!(
            SensorSet::new(&m, vec!["P23".into()], 1),
            Err(SensorSetError::NotANode("P23".into()))
        );
    }
}
