use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::Cfg;
use crate::tape::Index;
use crate::tensor::Tensor;

/// Disjoint union of graphs, with the index lists the forward pass needs.
///
/// Stored edges are folded into undirected node pairs; `u -> v` and
/// `v -> u` share one pair. Messages are laid out as `N` self messages
/// (message `i` targets node `i`) followed by two messages per pair.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub num_graphs: usize,
    pub num_nodes: usize,
    pub num_edges: usize,
    pub num_pairs: usize,
    pub features: Tensor,
    /// Node -> graph.
    pub graph_of: Index,
    pub graph_sizes: Vec<usize>,
    /// First global edge index of each graph.
    pub edge_offsets: Vec<usize>,
    /// Edge -> pair.
    pub pair_of_edge: Index,
    /// Source and target node of every message.
    pub msg_src: Index,
    pub msg_tgt: Index,
    /// Pair of each non-self message (message `num_nodes + k`).
    pub pair_msg_pair: Index,
    /// Target node of each non-self message.
    pub pair_msg_tgt: Index,
}

impl GraphBatch {
    pub fn new(graphs: &[&Cfg]) -> Result<Self> {
        Self::with_features(graphs, None)
    }

    /// Builds the batch structure, taking node states from `features` (rows
    /// in batch order) instead of the graphs' own feature matrices.
    pub fn with_features(graphs: &[&Cfg], features: Option<Tensor>) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::invalid("empty graph batch"));
        }
        let width = graphs[0].feature_dim();
        let mut graph_of = Vec::new();
        let mut graph_sizes = Vec::with_capacity(graphs.len());
        let mut edge_offsets = Vec::with_capacity(graphs.len());
        let mut pair_of_edge = Vec::new();
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        let mut data = Vec::new();
        let mut node_base = 0;
        let mut edge_base = 0;

        for (gi, g) in graphs.iter().enumerate() {
            if g.num_nodes() == 0 {
                return Err(Error::InvalidGraph {
                    id: g.id().to_string(),
                    msg: "graph has no nodes".into(),
                });
            }
            if features.is_none() {
                if g.feature_dim() != width {
                    return Err(Error::shape(
                        "graph_batch",
                        format!("feature width {} vs {width} in graph `{}`", g.feature_dim(), g.id()),
                    ));
                }
                data.extend_from_slice(g.features().data());
            }
            graph_of.extend(std::iter::repeat_n(gi, g.num_nodes()));
            graph_sizes.push(g.num_nodes());
            edge_offsets.push(edge_base);
            let mut local: HashMap<(usize, usize), usize> = HashMap::new();
            for &(s, d) in g.edges() {
                let key = (s.min(d), s.max(d));
                let p = *local.entry(key).or_insert_with(|| {
                    pairs.push((node_base + key.0, node_base + key.1));
                    pairs.len() - 1
                });
                pair_of_edge.push(p);
            }
            node_base += g.num_nodes();
            edge_base += g.num_edges();
        }

        let n = node_base;
        let features = match features {
            Some(f) => {
                if f.rows() != n {
                    return Err(Error::shape(
                        "graph_batch",
                        format!("{} feature rows for {n} nodes", f.rows()),
                    ));
                }
                f
            }
            None => Tensor::new(n, width, data)?,
        };

        let mut msg_src: Vec<usize> = (0..n).collect();
        let mut msg_tgt: Vec<usize> = (0..n).collect();
        let mut pair_msg_pair = Vec::with_capacity(2 * pairs.len());
        let mut pair_msg_tgt = Vec::with_capacity(2 * pairs.len());
        for (p, &(u, v)) in pairs.iter().enumerate() {
            for (src, tgt) in [(v, u), (u, v)] {
                msg_src.push(src);
                msg_tgt.push(tgt);
                pair_msg_pair.push(p);
                pair_msg_tgt.push(tgt);
            }
        }

        Ok(GraphBatch {
            num_graphs: graphs.len(),
            num_nodes: n,
            num_edges: edge_base,
            num_pairs: pairs.len(),
            features,
            graph_of: Arc::from(graph_of),
            graph_sizes,
            edge_offsets,
            pair_of_edge: Arc::from(pair_of_edge),
            msg_src: Arc::from(msg_src),
            msg_tgt: Arc::from(msg_tgt),
            pair_msg_pair: Arc::from(pair_msg_pair),
            pair_msg_tgt: Arc::from(pair_msg_tgt),
        })
    }

    pub fn num_messages(&self) -> usize {
        self.msg_src.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Label;

    #[test]
    fn reciprocal_edges_share_a_pair() {
        let g = Cfg::new("g", Label::Benign, 3, vec![(0, 1), (1, 0), (2, 1)], Tensor::zeros(3, 2)).unwrap();
        let h = Cfg::new("h", Label::Benign, 2, vec![(0, 1)], Tensor::zeros(2, 2)).unwrap();
        let b = GraphBatch::new(&[&g, &h]).unwrap();
        assert_eq!(b.num_pairs, 3);
        assert_eq!(&*b.pair_of_edge, &[0, 0, 1, 2]);
        assert_eq!(b.num_messages(), 5 + 6);
        assert_eq!(&*b.graph_of, &[0, 0, 0, 1, 1]);
        assert_eq!(b.edge_offsets, vec![0, 3]);
        // pair 2 is h's edge, shifted by g's node count
        assert_eq!(&b.msg_src[9..], &[4, 3]);
    }
}
