//! Water distribution network graph model.
//!
//! Nodes are junctions (unknown head, known demand) or fixed-head sources
//! (reservoirs and tanks snapshotted at their initial level). Edges are
//! pipes with Hazen-Williams attributes. All quantities are SI: demand in
//! L/s, lengths and heads in meters, diameters in meters internally (mm in
//! INP text).

mod hanoi;
mod inp;

pub use hanoi::hanoi_builtin;
pub use inp::{parse_inp, serialize_inp, ParseError, ParseOutput, ParseWarning};

use serde::{Deserialize, Serialize};

/// Dense handle of a node; indices are contiguous `0..N-1` in order of
/// first appearance in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NodeKind {
    /// Demand node with unknown hydraulic head.
    Junction {
        /// Base demand in L/s.
        base_demand: f64,
    },
    /// Reservoir or tank supplying the network at a known head (meters).
    FixedHeadSource { fixed_head: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    /// Original text identifier from the INP file.
    pub label: String,
    pub kind: NodeKind,
    /// Elevation above datum, meters.
    pub elevation: f64,
}

impl Node {
    pub fn is_junction(&self) -> bool {
        matches!(self.kind, NodeKind::Junction { .. })
    }

    pub fn base_demand(&self) -> f64 {
        match self.kind {
            NodeKind::Junction { base_demand } => base_demand,
            NodeKind::FixedHeadSource { .. } => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipe {
    pub id: usize,
    pub label: String,
    pub from: NodeId,
    pub to: NodeId,
    /// Length, meters.
    pub length: f64,
    /// Inner diameter, meters.
    pub diameter: f64,
    /// Hazen-Williams C coefficient, dimensionless.
    pub roughness: f64,
}

/// Demand pattern recorded from `[PATTERNS]`; not used by the solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub label: String,
    pub multipliers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub nodes: Vec<Node>,
    pub pipes: Vec<Pipe>,
    /// Per-node incident pipe indices.
    pub adjacency: Vec<Vec<usize>>,
    /// Recorded patterns, keyed by label order of appearance.
    pub patterns: Vec<Pattern>,
    /// Optional node coordinates from `[COORDINATES]`, parallel to `nodes`.
    pub coordinates: Vec<Option<(f64, f64)>>,
}

impl NetworkModel {
    /// Assembles the model from node and pipe lists, building adjacency.
    pub fn new(nodes: Vec<Node>, pipes: Vec<Pipe>) -> Self {
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for pipe in &pipes {
            adjacency[pipe.from.0].push(pipe.id);
            adjacency[pipe.to.0].push(pipe.id);
        }
        let coordinates = vec![None; nodes.len()];
        NetworkModel {
            nodes,
            pipes,
            adjacency,
            patterns: Vec::new(),
            coordinates,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn pipe_count(&self) -> usize {
        self.pipes.len()
    }

    /// Node ids of junctions in index order. Demand vectors throughout the
    /// crate are ordered by this list.
    pub fn junctions(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.is_junction())
            .map(|n| n.id)
            .collect()
    }

    pub fn junction_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_junction()).count()
    }

    /// Position of `node` within the junction ordering, if it is one.
    pub fn junction_position(&self, node: NodeId) -> Option<usize> {
        if !self.nodes[node.0].is_junction() {
            return None;
        }
        Some(
            self.nodes[..node.0]
                .iter()
                .filter(|n| n.is_junction())
                .count(),
        )
    }

    /// Base demands of all junctions, L/s, in junction order.
    pub fn base_demands(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .filter(|n| n.is_junction())
            .map(|n| n.base_demand())
            .collect()
    }

    pub fn node_by_label(&self, label: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.label == label)
    }

    pub fn source_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_junction()).count()
    }
}

/// A single invariant violation found by [`validate_network`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Finding {
    /// Node unreachable from every fixed-head source.
    Disconnected { node: String },
    NoSource,
    /// Pipe attribute that must be strictly positive is not.
    NonPositiveAttribute { pipe: String, attribute: String },
    NonFiniteValue { element: String, attribute: String },
    SelfLoop { pipe: String },
    NegativeBaseDemand { node: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Checks the structural invariants of a network: source presence,
/// connectivity of every node to some source, positive/finite attributes.
/// Findings are reported rather than raised so callers can show all
/// problems at once.
pub fn validate_network(net: &NetworkModel) -> ValidationReport {
    let mut findings = Vec::new();

    if net.source_count() == 0 {
        findings.push(Finding::NoSource);
    }

    for node in &net.nodes {
        if !node.elevation.is_finite() {
            findings.push(Finding::NonFiniteValue {
                element: node.label.clone(),
                attribute: "elevation".into(),
            });
        }
        match node.kind {
            NodeKind::Junction { base_demand } => {
                if !base_demand.is_finite() {
                    findings.push(Finding::NonFiniteValue {
                        element: node.label.clone(),
                        attribute: "base_demand".into(),
                    });
                } else if base_demand < 0.0 {
                    findings.push(Finding::NegativeBaseDemand {
                        node: node.label.clone(),
                    });
                }
            }
            NodeKind::FixedHeadSource { fixed_head } => {
                if !fixed_head.is_finite() {
                    findings.push(Finding::NonFiniteValue {
                        element: node.label.clone(),
                        attribute: "fixed_head".into(),
                    });
                }
            }
        }
    }

    for pipe in &net.pipes {
        for (value, attribute) in [
            (pipe.length, "length"),
            (pipe.diameter, "diameter"),
            (pipe.roughness, "roughness"),
        ] {
            if !value.is_finite() {
                findings.push(Finding::NonFiniteValue {
                    element: pipe.label.clone(),
                    attribute: attribute.into(),
                });
            } else if value <= 0.0 {
                findings.push(Finding::NonPositiveAttribute {
                    pipe: pipe.label.clone(),
                    attribute: attribute.into(),
                });
            }
        }
        if pipe.from == pipe.to {
            findings.push(Finding::SelfLoop {
                pipe: pipe.label.clone(),
            });
        }
    }

    // Breadth-first search from all sources over the undirected graph.
    let mut reached = vec![false; net.node_count()];
    let mut queue: Vec<usize> = net
        .nodes
        .iter()
        .filter(|n| !n.is_junction())
        .map(|n| n.id.0)
        .collect();
    for &s in &queue {
        reached[s] = true;
    }
    while let Some(u) = queue.pop() {
        for &pipe_idx in &net.adjacency[u] {
            let pipe = &net.pipes[pipe_idx];
            let v = if pipe.from.0 == u { pipe.to.0 } else { pipe.from.0 };
            if !reached[v] {
                reached[v] = true;
                queue.push(v);
            }
        }
    }
    for node in &net.nodes {
        if !reached[node.id.0] {
            findings.push(Finding::Disconnected {
                node: node.label.clone(),
            });
        }
    }

    ValidationReport { findings }
}

/// Builds a rectangular grid network used for scale/timing experiments:
/// `rows * cols` junctions fed by a single reservoir attached to the
/// corner junction. Pipe attributes are uniform.
pub fn grid_network(rows: usize, cols: usize, base_demand_lps: f64) -> NetworkModel {
    assert!(rows >= 1 && cols >= 1, "grid must be non-empty");
    let mut nodes = Vec::with_capacity(rows * cols + 1);
    nodes.push(Node {
        id: NodeId(0),
        label: "SRC".into(),
        kind: NodeKind::FixedHeadSource { fixed_head: 120.0 },
        elevation: 120.0,
    });
    for r in 0..rows {
        for c in 0..cols {
            let idx = 1 + r * cols + c;
            nodes.push(Node {
                id: NodeId(idx),
                label: format!("J{r}-{c}"),
                kind: NodeKind::Junction {
                    base_demand: base_demand_lps,
                },
                elevation: 0.0,
            });
        }
    }
    let junction = |r: usize, c: usize| NodeId(1 + r * cols + c);
    let mut pipes = Vec::new();
    let mut push_pipe = |from: NodeId, to: NodeId, length: f64, diameter: f64| {
        let id = pipes.len();
        pipes.push(Pipe {
            id,
            label: format!("P{id}"),
            from,
            to,
            length,
            diameter,
            roughness: 120.0,
        });
    };
    push_pipe(NodeId(0), junction(0, 0), 200.0, 0.6);
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                push_pipe(junction(r, c), junction(r, c + 1), 400.0, 0.3);
            }
            if r + 1 < rows {
                push_pipe(junction(r, c), junction(r + 1, c), 400.0, 0.3);
            }
        }
    }
    NetworkModel::new(nodes, pipes)
}
