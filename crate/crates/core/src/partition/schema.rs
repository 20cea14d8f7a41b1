//! Partition file format, version 1.
//!
//! ```json
//! {"version": 1, "n_features": d,
//!  "routing": "x[feature] <= threshold -> left",
//!  "partitions": [
//!    {"kind": "tree", "nodes": [{"id": 0, "feature": j, "threshold": t, "left": 1, "right": 2},
//!                               {"id": 1, "leaf": 0}, {"id": 2, "leaf": 1}]},
//!    {"kind": "voronoi", "centers": [[...], ...]}]}
//! ```
//!
//! Node ids are arbitrary unique integers; the root is the one node no other
//! node points at. Leaf cells must be numbered `0..C` without gaps.
//! Importers of external libraries must translate their split convention to
//! the routing rule above.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::tree::{Node, Tree};
use super::{Partition, PartitionEnsemble};
use crate::error::{Error, Result};
use crate::json;

pub const ROUTING_RULE: &str = "x[feature] <= threshold -> left";
const VERSION: u64 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionFile {
    pub version: u64,
    pub n_features: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<String>,
    pub partitions: Vec<PartitionDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionDoc {
    Tree { nodes: Vec<NodeDoc> },
    Voronoi { centers: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum NodeDoc {
    Split {
        id: u64,
        feature: usize,
        threshold: f64,
        left: u64,
        right: u64,
    },
    Leaf {
        id: u64,
        leaf: usize,
    },
}

impl NodeDoc {
    fn id(&self) -> u64 {
        match self {
            NodeDoc::Split { id, .. } | NodeDoc::Leaf { id, .. } => *id,
        }
    }
}

pub fn to_json(pe: &PartitionEnsemble) -> PartitionFile {
    let partitions = pe
        .partitions()
        .iter()
        .map(|p| match p {
            Partition::Voronoi { centers } => PartitionDoc::Voronoi {
                centers: centers.outer_iter().map(|r| r.to_vec()).collect(),
            },
            Partition::Tree(t) => PartitionDoc::Tree {
                nodes: t
                    .nodes()
                    .iter()
                    .enumerate()
                    .map(|(id, n)| match *n {
                        Node::Split {
                            feature,
                            threshold,
                            left,
                            right,
                        } => NodeDoc::Split {
                            id: id as u64,
                            feature,
                            threshold,
                            left: left as u64,
                            right: right as u64,
                        },
                        Node::Leaf { cell } => NodeDoc::Leaf {
                            id: id as u64,
                            leaf: cell,
                        },
                    })
                    .collect(),
            },
        })
        .collect();
    PartitionFile {
        version: VERSION,
        n_features: pe.n_features(),
        routing: Some(ROUTING_RULE.to_string()),
        partitions,
    }
}

pub fn export_json(pe: &PartitionEnsemble, path: &Path) -> Result<()> {
    json::write_17(path, &to_json(pe))
}

fn tree_from_doc(nodes: &[NodeDoc], d: usize, at: &str) -> Result<Tree> {
    if nodes.is_empty() {
        return Err(Error::schema(format!("{at}.nodes"), "tree has no nodes"));
    }
    let mut by_id: HashMap<u64, usize> = HashMap::with_capacity(nodes.len());
    for (i, n) in nodes.iter().enumerate() {
        if by_id.insert(n.id(), i).is_some() {
            return Err(Error::schema(
                format!("{at}.nodes[{i}].id"),
                format!("duplicate node id {}", n.id()),
            ));
        }
    }
    let mut parents = vec![0usize; nodes.len()];
    for (i, n) in nodes.iter().enumerate() {
        if let NodeDoc::Split {
            id,
            feature,
            threshold,
            left,
            right,
        } = n
        {
            let path = format!("{at}.nodes[{i}]");
            if *feature >= d {
                return Err(Error::schema(
                    format!("{path}.feature"),
                    format!("feature index {feature} out of range for d={d}"),
                ));
            }
            if !threshold.is_finite() {
                return Err(Error::schema(format!("{path}.threshold"), "threshold must be finite"));
            }
            for (side, child) in [("left", left), ("right", right)] {
                match by_id.get(child) {
                    Some(&c) => parents[c] += 1,
                    None => {
                        return Err(Error::schema(
                            format!("{path}.{side}"),
                            format!("node {id} points to missing node {child}"),
                        ))
                    }
                }
            }
        }
    }
    let roots: Vec<usize> = (0..nodes.len()).filter(|&i| parents[i] == 0).collect();
    if roots.len() != 1 {
        return Err(Error::schema(
            format!("{at}.nodes"),
            format!("expected exactly one root, found {}", roots.len()),
        ));
    }
    if let Some(i) = parents.iter().position(|&p| p > 1) {
        return Err(Error::schema(
            format!("{at}.nodes[{i}]"),
            format!("node {} has more than one parent", nodes[i].id()),
        ));
    }

    // Depth-first renumbering from the root; with one root and at most one
    // parent per node, anything unreached sits on a cycle.
    let mut order: Vec<usize> = Vec::with_capacity(nodes.len());
    let mut new_index = vec![usize::MAX; nodes.len()];
    let mut stack = vec![roots[0]];
    while let Some(i) = stack.pop() {
        new_index[i] = order.len();
        order.push(i);
        if let NodeDoc::Split { left, right, .. } = &nodes[i] {
            stack.push(by_id[right]);
            stack.push(by_id[left]);
        }
    }
    if order.len() != nodes.len() {
        let i = new_index.iter().position(|&k| k == usize::MAX).unwrap();
        return Err(Error::schema(
            format!("{at}.nodes[{i}]"),
            format!("node {} is on a cycle or unreachable from the root", nodes[i].id()),
        ));
    }

    let mut cells: Vec<usize> = Vec::new();
    let converted: Vec<Node> = order
        .iter()
        .map(|&i| match &nodes[i] {
            NodeDoc::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => Node::Split {
                feature: *feature,
                threshold: *threshold,
                left: new_index[by_id[left]],
                right: new_index[by_id[right]],
            },
            NodeDoc::Leaf { leaf, .. } => {
                cells.push(*leaf);
                Node::Leaf { cell: *leaf }
            }
        })
        .collect();
    cells.sort_unstable();
    if cells.iter().enumerate().any(|(k, &c)| k != c) {
        return Err(Error::schema(
            format!("{at}.nodes"),
            format!("leaf cells must be 0..{} without gaps or repeats", cells.len()),
        ));
    }
    Ok(Tree::from_validated(converted, cells.len()))
}

/// Validate a parsed file against `d` features and build the ensemble.
pub fn from_file(file: &PartitionFile, d: usize) -> Result<PartitionEnsemble> {
    if file.version != VERSION {
        return Err(Error::Version {
            found: file.version,
            expected: VERSION,
        });
    }
    if file.n_features != d {
        return Err(Error::schema(
            "$.n_features",
            format!("file declares {} features, data has {d}", file.n_features),
        ));
    }
    if let Some(rule) = &file.routing {
        if rule != ROUTING_RULE {
            return Err(Error::schema(
                "$.routing",
                format!("unsupported routing rule `{rule}`"),
            ));
        }
    }
    let mut parts = Vec::with_capacity(file.partitions.len());
    for (p, doc) in file.partitions.iter().enumerate() {
        let at = format!("$.partitions[{p}]");
        parts.push(match doc {
            PartitionDoc::Tree { nodes } => Partition::Tree(tree_from_doc(nodes, d, &at)?),
            PartitionDoc::Voronoi { centers } => {
                if centers.is_empty() {
                    return Err(Error::schema(format!("{at}.centers"), "no centers"));
                }
                if let Some(k) = centers.iter().position(|c| c.len() != d) {
                    return Err(Error::schema(
                        format!("{at}.centers[{k}]"),
                        format!("center has {} coordinates, expected {d}", centers[k].len()),
                    ));
                }
                let flat: Vec<f64> = centers.iter().flatten().copied().collect();
                let m = Array2::from_shape_vec((centers.len(), d), flat)
                    .map_err(|e| Error::schema(format!("{at}.centers"), e.to_string()))?;
                Partition::voronoi(m).map_err(|e| Error::schema(format!("{at}.centers"), e.to_string()))?
            }
        });
    }
    if parts.is_empty() {
        return Err(Error::schema("$.partitions", "no partitions"));
    }
    PartitionEnsemble::new(parts, d)
}

/// Parse a JSON value in the partition schema, reporting the JSON path of
/// any structural error.
pub fn parse_json(value: &serde_json::Value, d: usize) -> Result<PartitionEnsemble> {
    json::check_version(value, VERSION)?;
    let file: PartitionFile = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::schema(format!("$.{path}"), e.into_inner().to_string())
    })?;
    from_file(&file, d)
}

pub fn import_trees(path: &Path, d: usize) -> Result<PartitionEnsemble> {
    let value = json::read_value(path)?;
    parse_json(&value, d)
}
