//! Built-in Hanoi benchmark network, 31 nodes (1 reservoir + 30
//! junctions) and 34 pipes.
//!
//! Data follows the public Hanoi benchmark (reservoir at 100 m head, flat
//! elevations, C = 130, pipe diameters from a published feasible design).
//! The classic layout has a 31st junction on the south loop between
//! junctions "31" and "25"; this variant contracts it so that the two
//! incident pipes become parallel pipes between "31" and "25", and its
//! demand moves to "25". That keeps the published pipe attributes and
//! total demand while matching the 31-node / 34-pipe counts used by the
//! rest of the crate.

use super::{NetworkModel, Node, NodeId, NodeKind, Pipe};

/// Junction demands in m³/h, nodes "2".."31".
const DEMAND_M3H: [f64; 30] = [
    890.0, 850.0, 130.0, 725.0, 1005.0, 1350.0, 550.0, 525.0, 525.0, 500.0, 560.0, 940.0, 615.0,
    280.0, 310.0, 865.0, 1345.0, 60.0, 1275.0, 930.0, 485.0, 1045.0, 820.0, 975.0, 900.0, 370.0,
    290.0, 360.0, 360.0, 105.0,
];

/// Pipe list: (from label index, to label index, length m, diameter mm).
/// Node label "1" is the reservoir; labels "2".."31" are junctions.
const PIPES: [(usize, usize, f64, f64); 34] = [
    (1, 2, 100.0, 1016.0),
    (2, 3, 1350.0, 1016.0),
    (3, 4, 900.0, 1016.0),
    (4, 5, 1150.0, 1016.0),
    (5, 6, 1450.0, 1016.0),
    (6, 7, 450.0, 1016.0),
    (7, 8, 850.0, 1016.0),
    (8, 9, 850.0, 1016.0),
    (9, 10, 800.0, 1016.0),
    (10, 11, 950.0, 762.0),
    (11, 12, 1200.0, 609.6),
    (12, 13, 3500.0, 609.6),
    (10, 14, 800.0, 508.0),
    (14, 15, 500.0, 406.4),
    (15, 16, 550.0, 304.8),
    (16, 17, 2730.0, 304.8),
    (17, 18, 1750.0, 406.4),
    (18, 19, 800.0, 508.0),
    (19, 3, 400.0, 508.0),
    (3, 20, 2200.0, 1016.0),
    (20, 21, 1500.0, 508.0),
    (21, 22, 500.0, 304.8),
    (20, 23, 2650.0, 1016.0),
    (23, 24, 1230.0, 762.0),
    (24, 25, 1300.0, 762.0),
    (25, 26, 850.0, 508.0),
    (26, 27, 300.0, 304.8),
    (27, 16, 750.0, 304.8),
    (23, 28, 1500.0, 406.4),
    (28, 29, 2000.0, 304.8),
    (29, 30, 1600.0, 304.8),
    (30, 31, 150.0, 406.4),
    (31, 25, 860.0, 406.4),
    (31, 25, 950.0, 609.6),
];

const RESERVOIR_HEAD_M: f64 = 100.0;

/// Deterministic built-in Hanoi model: 31 nodes, 34 pipes.
pub fn hanoi_builtin() -> NetworkModel {
    let mut nodes = Vec::with_capacity(31);
    nodes.push(Node {
        id: NodeId(0),
        label: "1".into(),
        kind: NodeKind::FixedHeadSource {
            fixed_head: RESERVOIR_HEAD_M,
        },
        elevation: RESERVOIR_HEAD_M,
    });
    for (i, demand) in DEMAND_M3H.iter().enumerate() {
        nodes.push(Node {
            id: NodeId(i + 1),
            label: (i + 2).to_string(),
            kind: NodeKind::Junction {
                base_demand: demand / 3.6,
            },
            elevation: 0.0,
        });
    }
    let pipes = PIPES
        .iter()
        .enumerate()
        .map(|(id, &(from, to, length, diameter_mm))| Pipe {
            id,
            label: (id + 1).to_string(),
            from: NodeId(from - 1),
            to: NodeId(to - 1),
            length,
            diameter: diameter_mm / 1000.0,
            roughness: 130.0,
        })
        .collect();
    NetworkModel::new(nodes, pipes)
}
