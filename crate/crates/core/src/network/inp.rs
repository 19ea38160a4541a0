//! EPANET 2.x INP text parsing and serialization for the node/pipe subset
//! the solver supports.
//!
//! Supported sections: `[TITLE] [JUNCTIONS] [RESERVOIRS] [TANKS] [PIPES]
//! [PATTERNS] [DEMANDS] [COORDINATES] [END]`. Section names are
//! case-insensitive, `;` starts a comment, columns are whitespace
//! delimited. Units are fixed to LPS/SI: demands in L/s, lengths and
//! heads in meters, pipe diameters in millimeters (converted to meters in
//! the model). Pumps and valves are rejected; tanks become fixed-head
//! sources at elevation + initial level.

use std::collections::HashMap;

use thiserror::Error;

use super::{NetworkModel, Node, NodeId, NodeKind, Pattern, Pipe};

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("malformed {section} entry at line {line}: {message}")]
    MalformedSection {
        section: String,
        line: usize,
        message: String,
    },
    #[error("duplicate label {label:?} at line {line}")]
    DuplicateLabel { label: String, line: usize },
    #[error("pipe {pipe:?} at line {line} references undefined node {label:?}")]
    DanglingPipeEndpoint {
        pipe: String,
        label: String,
        line: usize,
    },
    #[error("network has no reservoir or tank")]
    NoSource,
    #[error("unsupported component section {section} at line {line}; only pipes are modeled")]
    UnsupportedComponent { section: String, line: usize },
}

/// Non-fatal observation made while parsing (e.g. a skipped section).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseWarning {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ParseOutput {
    pub network: NetworkModel,
    pub warnings: Vec<ParseWarning>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Title,
    Junctions,
    Reservoirs,
    Tanks,
    Pipes,
    Patterns,
    Demands,
    Coordinates,
    End,
    Unknown,
}

fn section_of(name: &str) -> Option<Section> {
    match name.to_ascii_uppercase().as_str() {
        "TITLE" => Some(Section::Title),
        "JUNCTIONS" => Some(Section::Junctions),
        "RESERVOIRS" => Some(Section::Reservoirs),
        "TANKS" => Some(Section::Tanks),
        "PIPES" => Some(Section::Pipes),
        "PATTERNS" => Some(Section::Patterns),
        "DEMANDS" => Some(Section::Demands),
        "COORDINATES" => Some(Section::Coordinates),
        "END" => Some(Section::End),
        _ => None,
    }
}

/// Strip the trailing comment and split into whitespace-separated fields.
fn fields(line: &str) -> Vec<&str> {
    line.split(';')
        .next()
        .unwrap_or("")
        .split_whitespace()
        .collect()
}

fn parse_f64(s: &str, what: &str, section: &str, line: usize) -> Result<f64, ParseError> {
    s.parse::<f64>().map_err(|_| ParseError::MalformedSection {
        section: section.into(),
        line,
        message: format!("cannot parse {what} from {s:?}"),
    })
}

struct PendingPipe {
    label: String,
    from_label: String,
    to_label: String,
    length: f64,
    diameter_m: f64,
    roughness: f64,
    line: usize,
}

/// Parses INP text into a validated [`NetworkModel`] plus warnings for
/// skipped content. Node indices follow first appearance in the file.
pub fn parse_inp(text: &str) -> Result<ParseOutput, ParseError> {
    let mut section = Section::Unknown;
    let mut warnings = Vec::new();

    let mut nodes: Vec<Node> = Vec::new();
    let mut node_index: HashMap<String, usize> = HashMap::new();
    let mut pending_pipes: Vec<PendingPipe> = Vec::new();
    let mut pipe_labels: HashMap<String, usize> = HashMap::new();
    let mut patterns: Vec<Pattern> = Vec::new();
    let mut pattern_index: HashMap<String, usize> = HashMap::new();
    let mut coordinates: HashMap<String, (f64, f64)> = HashMap::new();
    let mut demand_overrides: Vec<(String, f64, usize)> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with(';') {
            continue;
        }
        if trimmed.starts_with('[') {
            let name = trimmed.trim_start_matches('[').trim_end_matches(']').trim();
            let upper = name.to_ascii_uppercase();
            if upper == "PUMPS" || upper == "VALVES" {
                return Err(ParseError::UnsupportedComponent {
                    section: format!("[{upper}]"),
                    line,
                });
            }
            section = match section_of(name) {
                Some(s) => s,
                None => {
                    warnings.push(ParseWarning {
                        line,
                        message: format!("skipping unknown section [{upper}]"),
                    });
                    Section::Unknown
                }
            };
            continue;
        }

        let cols = fields(trimmed);
        if cols.is_empty() {
            continue;
        }
        match section {
            Section::Title | Section::End | Section::Unknown => {}
            Section::Junctions => {
                let label = cols[0].to_string();
                if node_index.contains_key(&label) {
                    return Err(ParseError::DuplicateLabel { label, line });
                }
                if cols.len() < 2 {
                    return Err(ParseError::MalformedSection {
                        section: "JUNCTIONS".into(),
                        line,
                        message: "expected: id elevation [demand] [pattern]".into(),
                    });
                }
                let elevation = parse_f64(cols[1], "elevation", "JUNCTIONS", line)?;
                let base_demand = if cols.len() > 2 {
                    parse_f64(cols[2], "demand", "JUNCTIONS", line)?
                } else {
                    0.0
                };
                node_index.insert(label.clone(), nodes.len());
                nodes.push(Node {
                    id: NodeId(nodes.len()),
                    label,
                    kind: NodeKind::Junction { base_demand },
                    elevation,
                });
            }
            Section::Reservoirs => {
                let label = cols[0].to_string();
                if node_index.contains_key(&label) {
                    return Err(ParseError::DuplicateLabel { label, line });
                }
                if cols.len() < 2 {
                    return Err(ParseError::MalformedSection {
                        section: "RESERVOIRS".into(),
                        line,
                        message: "expected: id head [pattern]".into(),
                    });
                }
                let head = parse_f64(cols[1], "head", "RESERVOIRS", line)?;
                node_index.insert(label.clone(), nodes.len());
                nodes.push(Node {
                    id: NodeId(nodes.len()),
                    label,
                    kind: NodeKind::FixedHeadSource { fixed_head: head },
                    elevation: head,
                });
            }
            Section::Tanks => {
                let label = cols[0].to_string();
                if node_index.contains_key(&label) {
                    return Err(ParseError::DuplicateLabel { label, line });
                }
                if cols.len() < 3 {
                    return Err(ParseError::MalformedSection {
                        section: "TANKS".into(),
                        line,
                        message: "expected: id elevation init_level ...".into(),
                    });
                }
                let elevation = parse_f64(cols[1], "elevation", "TANKS", line)?;
                let init_level = parse_f64(cols[2], "initial level", "TANKS", line)?;
                // Steady-state snapshot: the tank holds its initial level.
                node_index.insert(label.clone(), nodes.len());
                nodes.push(Node {
                    id: NodeId(nodes.len()),
                    label,
                    kind: NodeKind::FixedHeadSource {
                        fixed_head: elevation + init_level,
                    },
                    elevation,
                });
            }
            Section::Pipes => {
                let label = cols[0].to_string();
                if pipe_labels.contains_key(&label) {
                    return Err(ParseError::DuplicateLabel { label, line });
                }
                if cols.len() < 6 {
                    return Err(ParseError::MalformedSection {
                        section: "PIPES".into(),
                        line,
                        message: "expected: id node1 node2 length diameter_mm roughness".into(),
                    });
                }
                let length = parse_f64(cols[3], "length", "PIPES", line)?;
                let diameter_mm = parse_f64(cols[4], "diameter", "PIPES", line)?;
                let roughness = parse_f64(cols[5], "roughness", "PIPES", line)?;
                pipe_labels.insert(label.clone(), pending_pipes.len());
                pending_pipes.push(PendingPipe {
                    label,
                    from_label: cols[1].to_string(),
                    to_label: cols[2].to_string(),
                    length,
                    diameter_m: diameter_mm / 1000.0,
                    roughness,
                    line,
                });
            }
            Section::Patterns => {
                if cols.len() < 2 {
                    return Err(ParseError::MalformedSection {
                        section: "PATTERNS".into(),
                        line,
                        message: "expected: id multipliers...".into(),
                    });
                }
                let label = cols[0].to_string();
                let mut multipliers = Vec::with_capacity(cols.len() - 1);
                for c in &cols[1..] {
                    multipliers.push(parse_f64(c, "multiplier", "PATTERNS", line)?);
                }
                match pattern_index.get(&label) {
                    Some(&i) => patterns[i].multipliers.extend(multipliers),
                    None => {
                        pattern_index.insert(label.clone(), patterns.len());
                        patterns.push(Pattern { label, multipliers });
                    }
                }
            }
            Section::Demands => {
                if cols.len() < 2 {
                    return Err(ParseError::MalformedSection {
                        section: "DEMANDS".into(),
                        line,
                        message: "expected: junction demand [pattern]".into(),
                    });
                }
                let demand = parse_f64(cols[1], "demand", "DEMANDS", line)?;
                demand_overrides.push((cols[0].to_string(), demand, line));
            }
            Section::Coordinates => {
                if cols.len() < 3 {
                    return Err(ParseError::MalformedSection {
                        section: "COORDINATES".into(),
                        line,
                        message: "expected: node x y".into(),
                    });
                }
                let x = parse_f64(cols[1], "x", "COORDINATES", line)?;
                let y = parse_f64(cols[2], "y", "COORDINATES", line)?;
                coordinates.insert(cols[0].to_string(), (x, y));
            }
        }
    }

    // Resolve demand overrides ([DEMANDS] replaces the junction column).
    for (label, demand, line) in demand_overrides {
        match node_index.get(&label) {
            Some(&i) if nodes[i].is_junction() => {
                nodes[i].kind = NodeKind::Junction {
                    base_demand: demand,
                };
            }
            _ => {
                return Err(ParseError::MalformedSection {
                    section: "DEMANDS".into(),
                    line,
                    message: format!("no junction named {label:?}"),
                });
            }
        }
    }

    // Resolve pipe endpoints.
    let mut pipes = Vec::with_capacity(pending_pipes.len());
    for (id, p) in pending_pipes.into_iter().enumerate() {
        let resolve = |label: &str| -> Result<NodeId, ParseError> {
            node_index
                .get(label)
                .map(|&i| NodeId(i))
                .ok_or_else(|| ParseError::DanglingPipeEndpoint {
                    pipe: p.label.clone(),
                    label: label.to_string(),
                    line: p.line,
                })
        };
        let from = resolve(&p.from_label)?;
        let to = resolve(&p.to_label)?;
        pipes.push(Pipe {
            id,
            label: p.label,
            from,
            to,
            length: p.length,
            diameter: p.diameter_m,
            roughness: p.roughness,
        });
    }

    if !nodes.iter().any(|n| !n.is_junction()) {
        return Err(ParseError::NoSource);
    }

    let mut network = NetworkModel::new(nodes, pipes);
    network.patterns = patterns;
    for (label, xy) in coordinates {
        if let Some(node) = network.node_by_label(&label) {
            let idx = node.id.0;
            network.coordinates[idx] = Some(xy);
        }
    }
    Ok(ParseOutput { network, warnings })
}

/// Writes the model back to INP text covering the supported section
/// subset. Sources are emitted before junctions; for models whose source
/// indices precede junction indices (all shipped fixtures),
/// `parse_inp(serialize_inp(net))` reproduces the model exactly (floats
/// are printed in shortest round-trip form). Tanks were snapshotted at
/// parse time, so they serialize as reservoirs.
pub fn serialize_inp(net: &NetworkModel) -> String {
    let mut out = String::new();
    out.push_str("[TITLE]\n");
    out.push_str("aquatwin network\n\n");

    out.push_str("[RESERVOIRS]\n;id head_m\n");
    for node in net.nodes.iter() {
        if let NodeKind::FixedHeadSource { fixed_head } = node.kind {
            out.push_str(&format!("{} {}\n", node.label, fixed_head));
        }
    }

    out.push_str("\n[JUNCTIONS]\n;id elevation demand_lps\n");
    for node in net.nodes.iter().filter(|n| n.is_junction()) {
        out.push_str(&format!(
            "{} {} {}\n",
            node.label,
            node.elevation,
            node.base_demand()
        ));
    }

    out.push_str("\n[PIPES]\n;id from to length_m diameter_mm roughness\n");
    for pipe in &net.pipes {
        out.push_str(&format!(
            "{} {} {} {} {} {}\n",
            pipe.label,
            net.nodes[pipe.from.0].label,
            net.nodes[pipe.to.0].label,
            pipe.length,
            pipe.diameter * 1000.0,
            pipe.roughness
        ));
    }

    if !net.patterns.is_empty() {
        out.push_str("\n[PATTERNS]\n");
        for pat in &net.patterns {
            out.push_str(&pat.label);
            for m in &pat.multipliers {
                out.push_str(&format!(" {m}"));
            }
            out.push('\n');
        }
    }

    let has_coords = net.coordinates.iter().any(|c| c.is_some());
    if has_coords {
        out.push_str("\n[COORDINATES]\n");
        for (node, coord) in net.nodes.iter().zip(&net.coordinates) {
            if let Some((x, y)) = coord {
                out.push_str(&format!("{} {} {}\n", node.label, x, y));
            }
        }
    }

    out.push_str("\n[END]\n");
    out
}
