//! Control flow graphs, datasets and their on-disk formats.

mod io;
mod split;
mod synth;

pub use io::{graph_from_json, graph_to_json, load_dataset, load_graph, save_dataset, save_graph, ManifestEntry};
pub use split::{stratified_indices, stratified_split, SplitSpec};
pub use synth::synth_dataset;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Benign = 0,
    Malicious = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Benign, Label::Malicious];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Benign),
            1 => Some(Label::Malicious),
            _ => None,
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Label::from_index(v as usize).ok_or_else(|| format!("label must be 0 or 1, got {v}"))
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

/// A directed control flow graph with one feature row per basic block.
///
/// Edges are stored as given, without self-loops or duplicates. The closed
/// neighbourhood used by message passing is formed at aggregation time.
#[derive(Clone, Debug, PartialEq)]
pub struct Cfg {
    id: String,
    label: Label,
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    features: Tensor,
}

impl Cfg {
    pub fn new(
        id: impl Into<String>,
        label: Label,
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        features: Tensor,
    ) -> Result<Self> {
        let id = id.into();
        let invalid = |msg: String| Error::InvalidGraph { id: id.clone(), msg };
        if features.rows() != num_nodes {
            return Err(invalid(format!(
                "{} feature rows for {num_nodes} nodes",
                features.rows()
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        for (k, &(s, d)) in edges.iter().enumerate() {
            if s >= num_nodes || d >= num_nodes {
                return Err(invalid(format!(
                    "edge {k} ({s} -> {d}) has an endpoint outside [0, {num_nodes})"
                )));
            }
            if s == d {
                return Err(invalid(format!("edge {k} ({s} -> {d}) is a self-loop")));
            }
            if !seen.insert((s, d)) {
                return Err(invalid(format!("edge {k} ({s} -> {d}) is a duplicate")));
            }
        }
        Ok(Cfg {
            id,
            label,
            num_nodes,
            edges,
            features,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Distinct neighbours of every node in the undirected view, sorted.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(s, d) in &self.edges {
            adj[s].push(d);
            adj[d].push(s);
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        adj
    }

    /// Undirected degree: number of distinct neighbours, ignoring direction.
    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors().iter().map(Vec::len).collect()
    }

    /// Same nodes and features, keeping only the listed edges (by index).
    pub fn edge_subgraph(&self, keep: &[usize]) -> Cfg {
        let mut keep = keep.to_vec();
        keep.sort_unstable();
        keep.dedup();
        Cfg {
            id: self.id.clone(),
            label: self.label,
            num_nodes: self.num_nodes,
            edges: keep.iter().map(|&k| self.edges[k]).collect(),
            features: self.features.clone(),
        }
    }

    /// Relabels node `i` as `perm[i]`, moving features and edges with it.
    pub fn permuted(&self, perm: &[usize]) -> Result<Cfg> {
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..self.num_nodes).collect::<Vec<_>>() {
            return Err(Error::invalid("not a permutation of the node indices"));
        }
        let mut rows = vec![Vec::new(); self.num_nodes];
        for (i, &p) in perm.iter().enumerate() {
            rows[p] = self.features.row(i).to_vec();
        }
        let features = if self.feature_dim() == 0 {
            Tensor::zeros(self.num_nodes, 0)
        } else {
            Tensor::from_rows(&rows)?
        };
        Cfg::new(
            self.id.clone(),
            self.label,
            self.num_nodes,
            self.edges.iter().map(|&(s, d)| (perm[s], perm[d])).collect(),
            features,
        )
    }

    pub fn with_features(&self, features: Tensor) -> Result<Cfg> {
        Cfg::new(
            self.id.clone(),
            self.label,
            self.num_nodes,
            self.edges.clone(),
            features,
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub graphs: Vec<Cfg>,
}

impl Dataset {
    pub fn new(graphs: Vec<Cfg>) -> Self {
        Dataset { graphs }
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// `[benign, malicious]` counts.
    pub fn class_counts(&self) -> [usize; 2] {
        let mut c = [0; 2];
        for g in &self.graphs {
            c[g.label().index()] += 1;
        }
        c
    }

    pub fn labels(&self) -> Vec<Label> {
        self.graphs.iter().map(Cfg::label).collect()
    }
}

/// Population variance of a graph's degree sequence.
pub fn degree_variance(g: &Cfg) -> f64 {
    let d = g.degrees();
    if d.is_empty() {
        return 0.0;
    }
    let n = d.len() as f64;
    let mean = d.iter().sum::<usize>() as f64 / n;
    d.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n
}
