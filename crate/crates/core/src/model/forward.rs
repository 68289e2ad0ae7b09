use serde::{Deserialize, Serialize};

use super::{
    ChannelSpec, GraphBatch, ModelConfig, MoeModel, Rho, Stat, StdMode, Variant, EXPERTS, NUM_EXPERTS, STD_EPS,
};
use crate::error::{Error, Result};
use crate::graph::Cfg;
use crate::nn::{Linear, LinearVars};
use crate::tape::{Index, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Eval,
    /// Dropout after every fusion layer, with masks derived from `seed`.
    Train {
        dropout: f64,
        seed: u64,
    },
}

/// splitmix64 finaliser over a combined seed.
pub(crate) fn derive_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Model parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub layers: Vec<LinearVars>,
    pub heads: Vec<LinearVars>,
    pub gate_hidden: Var,
    pub gate_out: Var,
}

impl ModelVars {
    pub fn bind(model: &MoeModel, tape: &mut Tape, trainable: bool) -> Self {
        let p = &model.params;
        let leaf = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ModelVars {
            layers: p.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
            heads: p.heads.iter().map(|l| l.bind(tape, trainable)).collect(),
            gate_hidden: leaf(tape, &p.gate_hidden),
            gate_out: leaf(tape, &p.gate_out),
        }
    }

    /// Same order as [`MoeModel::named_params_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self
            .layers
            .iter()
            .chain(&self.heads)
            .flat_map(|l| [l.weight, l.bias])
            .collect();
        out.push(self.gate_hidden);
        out.push(self.gate_out);
        out
    }
}

#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[G, 2]` combined logits.
    pub logits: Var,
    /// `[G, 6]` gate vectors.
    pub gates: Var,
    /// `[G, 6]` gating scores before softmax; absent for the uniform gate.
    pub gate_scores: Option<Var>,
    /// Six `[G, 2]` expert logit blocks.
    pub expert_logits: Vec<Var>,
    /// Six `[G, H]` pooled graph vectors.
    pub readouts: Vec<Var>,
    /// `[N, H]` final node states.
    pub node_states: Var,
}

/// Per-message coefficients and per-node degrees under an optional edge mask.
struct Structure {
    /// `[K, 1]`; 1 for self messages, the pair's mask product otherwise.
    coef: Var,
    /// `[N, 1]` mask-weighted undirected degree.
    degree: Var,
    /// Messages whose mask coefficient is exactly zero. They stand for
    /// deleted edges, so the max view skips them.
    absent: Option<Vec<usize>>,
}

fn structure(tape: &mut Tape, b: &GraphBatch, mask: Option<Var>) -> Result<Structure> {
    let pair_coef = match mask {
        None => tape.constant(Tensor::full(b.num_pairs, 1, 1.0)),
        Some(m) => {
            let shape = tape.value(m).shape();
            if shape != [b.num_edges, 1] {
                return Err(Error::shape(
                    "edge_mask",
                    format!("mask {shape:?} for {} edges", b.num_edges),
                ));
            }
            // pair weight = 1 - prod(1 - m_e) over the edges folded into it
            let neg = tape.scale(m, -1.0);
            let keep = tape.add_scalar(neg, 1.0);
            let prod = tape.segment_prod(keep, &b.pair_of_edge, b.num_pairs)?;
            let neg = tape.scale(prod, -1.0);
            tape.add_scalar(neg, 1.0)
        }
    };
    let msg_coef = tape.gather_rows(pair_coef, &b.pair_msg_pair)?;
    let degree = tape.segment_sum(msg_coef, &b.pair_msg_tgt, b.num_nodes)?;
    let ones = tape.constant(Tensor::full(b.num_nodes, 1, 1.0));
    let coef = tape.concat_rows(&[ones, msg_coef])?;
    let zeros: Vec<usize> = (0..tape.value(coef).rows())
        .filter(|&k| tape.value(coef).data()[k] == 0.0)
        .collect();
    let absent = (!zeros.is_empty()).then_some(zeros);
    Ok(Structure { coef, degree, absent })
}

/// Normalises `w` within each segment. Segments whose total is zero get
/// `fallback` added first (a `[rows, 1]` constant chosen per segment).
fn normalize(tape: &mut Tape, w: Var, seg: &Index, n: usize, fallback: impl Fn(usize) -> Vec<usize>) -> Result<Var> {
    let mut w = w;
    let mut den = tape.segment_sum(w, seg, n)?;
    let empty: Vec<usize> = (0..n).filter(|&s| tape.value(den).data()[s] == 0.0).collect();
    if !empty.is_empty() {
        let mut fb = Tensor::zeros(tape.value(w).rows(), 1);
        for s in empty {
            for row in fallback(s) {
                fb.data_mut()[row] = 1.0;
            }
        }
        let fb = tape.constant(fb);
        w = tape.add(w, fb)?;
        den = tape.segment_sum(w, seg, n)?;
    }
    let inv = tape.recip(den);
    let per_row = tape.gather_rows(inv, seg)?;
    tape.mul(w, per_row)
}

/// `[K, 1]` normalised neighbour weights for every message.
fn message_weights(tape: &mut Tape, b: &GraphBatch, st: &Structure, rho: Rho) -> Result<Var> {
    let w = match rho {
        Rho::Uniform => st.coef,
        Rho::Degree => {
            let d = tape.gather_rows(st.degree, &b.msg_src)?;
            tape.mul(st.coef, d)?
        }
    };
    // isolated (or fully masked) node: all weight on the self message
    normalize(tape, w, &b.msg_tgt, b.num_nodes, |i| vec![i])
}

/// `[N, 1]` graph-level pooling weights.
fn readout_weights(tape: &mut Tape, b: &GraphBatch, st: &Structure, rho: Rho) -> Result<Var> {
    match rho {
        Rho::Uniform => {
            let data = b.graph_of.iter().map(|&g| 1.0 / b.graph_sizes[g] as f64).collect();
            Ok(tape.constant(Tensor::column(data)))
        }
        Rho::Degree => {
            let mut first = Vec::with_capacity(b.num_graphs);
            let mut start = 0;
            for &s in &b.graph_sizes {
                first.push(start);
                start += s;
            }
            // edgeless graph: uniform over its nodes
            normalize(tape, st.degree, &b.graph_of, b.num_graphs, |g| {
                (first[g]..first[g] + b.graph_sizes[g]).collect()
            })
        }
    }
}

/// Weighted statistic over segments. `x` holds one row per item, `w` its
/// `[rows, 1]` weight.
#[allow(clippy::too_many_arguments)]
fn pool(
    tape: &mut Tape,
    x: Var,
    w: Var,
    seg: &Index,
    n: usize,
    stat: Stat,
    std_mode: StdMode,
    absent: Option<&[usize]>,
) -> Result<Var> {
    let m = tape.mul_col(x, w)?;
    match stat {
        Stat::Mean => tape.segment_sum(m, seg, n),
        Stat::Max => match absent {
            None => tape.segment_max(m, seg, n),
            Some(rows) => {
                let [r, c] = tape.value(m).shape();
                let mut off = Tensor::zeros(r, c);
                for &k in rows {
                    off.row_mut(k).fill(f64::NEG_INFINITY);
                }
                let off = tape.constant(off);
                let shifted = tape.add(m, off)?;
                tape.segment_max(shifted, seg, n)
            }
        },
        Stat::Std => {
            let mu = tape.segment_sum(m, seg, n)?;
            let second = match std_mode {
                StdMode::Clamped => tape.mul(m, m)?,
                StdMode::WeightedVariance => {
                    let xx = tape.mul(x, x)?;
                    tape.mul_col(xx, w)?
                }
            };
            let sq = tape.segment_sum(second, seg, n)?;
            let mu2 = tape.mul(mu, mu)?;
            let diff = tape.sub(sq, mu2)?;
            let clamped = tape.relu(diff);
            let shifted = tape.add_scalar(clamped, STD_EPS);
            Ok(tape.sqrt(shifted))
        }
    }
}

/// The six aggregation views of `h`, in expert order, before relu.
fn views(tape: &mut Tape, h: Var, b: &GraphBatch, st: &Structure, std_mode: StdMode) -> Result<Vec<Var>> {
    let hs = tape.gather_rows(h, &b.msg_src)?;
    let mut weights = [None, None];
    let mut out = Vec::with_capacity(NUM_EXPERTS);
    for spec in EXPERTS {
        let slot = spec.rho as usize;
        let w = match weights[slot] {
            Some(w) => w,
            None => {
                let w = message_weights(tape, b, st, spec.rho)?;
                weights[slot] = Some(w);
                w
            }
        };
        out.push(pool(
            tape,
            hs,
            w,
            &b.msg_tgt,
            b.num_nodes,
            spec.stat,
            std_mode,
            st.absent.as_deref(),
        )?);
    }
    Ok(out)
}

fn fusion_layer(
    tape: &mut Tape,
    h: Var,
    b: &GraphBatch,
    st: &Structure,
    lin: &LinearVars,
    std_mode: StdMode,
    dropout: Option<(f64, u64)>,
) -> Result<Var> {
    let width_in = tape.value(h).cols();
    let expected = tape.value(lin.weight).rows();
    if NUM_EXPERTS * width_in != expected {
        return Err(Error::shape(
            "layer_forward",
            format!(
                "node width {width_in} feeds a layer expecting {expected} = 6 x {}",
                expected / NUM_EXPERTS
            ),
        ));
    }
    let raw = views(tape, h, b, st, std_mode)?;
    let activated: Vec<Var> = raw.into_iter().map(|v| tape.relu(v)).collect();
    let cat = tape.concat_cols(&activated)?;
    let y = lin.apply(tape, cat)?;
    let y = tape.relu(y);
    match dropout {
        Some((p, seed)) => tape.dropout(y, p, seed),
        None => Ok(y),
    }
}

/// Row-wise 0/1 mask of the `k` largest entries; ties go to the lower index.
pub fn top_k_mask(p: &Tensor, k: usize) -> Tensor {
    let mut mask = Tensor::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let row = p.row(r);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in order.iter().take(k) {
            mask.set(r, j, 1.0);
        }
    }
    mask
}

fn gate_vars(tape: &mut Tape, hg: Var, vars: &ModelVars, variant: Variant) -> Result<(Var, Option<Var>)> {
    let g = tape.value(hg).rows();
    if let Variant::Uniform = variant {
        let c = tape.constant(Tensor::full(g, NUM_EXPERTS, 1.0 / NUM_EXPERTS as f64));
        return Ok((c, None));
    }
    let z = tape.matmul(hg, vars.gate_hidden)?;
    let a = tape.relu(z);
    let s = tape.matmul(a, vars.gate_out)?;
    let alpha = match variant {
        Variant::Temperature { t } => {
            let scaled = tape.scale(s, 1.0 / t);
            tape.softmax_rows(scaled)
        }
        Variant::TopK { k } => {
            let p = tape.softmax_rows(s);
            let keep = top_k_mask(tape.value(p), k);
            let keep = tape.constant(keep);
            let kept = tape.mul(p, keep)?;
            let total = tape.sum_cols(kept);
            tape.div_col(kept, total)?
        }
        Variant::Uniform => unreachable!(),
    };
    Ok((alpha, Some(s)))
}

/// Full forward pass over a batch. `mask`, when given, is an `[E, 1]` edge
/// mask over the batch's stored edges.
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &ModelVars,
    batch: &GraphBatch,
    mask: Option<Var>,
    config: &ModelConfig,
    mode: Mode,
) -> Result<ForwardVars> {
    if batch.features.cols() != config.input_dim {
        return Err(Error::shape(
            "model_forward",
            format!(
                "features are {} wide, model expects {}",
                batch.features.cols(),
                config.input_dim
            ),
        ));
    }
    let st = structure(tape, batch, mask)?;
    let mut h = tape.constant(batch.features.clone());
    for (l, lin) in vars.layers.iter().enumerate() {
        let dropout = match mode {
            Mode::Eval => None,
            Mode::Train { dropout, seed } => Some((dropout, derive_seed(seed, l as u64))),
        };
        h = fusion_layer(tape, h, batch, &st, lin, config.std_mode, dropout)?;
    }

    let mut pool_weights = [None, None];
    let mut readouts = Vec::with_capacity(NUM_EXPERTS);
    let mut expert_logits = Vec::with_capacity(NUM_EXPERTS);
    for (e, spec) in EXPERTS.iter().enumerate() {
        let slot = spec.rho as usize;
        let w = match pool_weights[slot] {
            Some(w) => w,
            None => {
                let w = readout_weights(tape, batch, &st, spec.rho)?;
                pool_weights[slot] = Some(w);
                w
            }
        };
        let r = pool(
            tape,
            h,
            w,
            &batch.graph_of,
            batch.num_graphs,
            spec.stat,
            config.std_mode,
            None,
        )?;
        readouts.push(r);
        expert_logits.push(vars.heads[e].apply(tape, r)?);
    }

    let hg = tape.concat_cols(&readouts)?;
    let (gates, gate_scores) = gate_vars(tape, hg, vars, config.variant)?;
    let mut logits = None;
    for (e, &o) in expert_logits.iter().enumerate() {
        let a = tape.slice_cols(gates, e, 1)?;
        let term = tape.mul_col(o, a)?;
        logits = Some(match logits {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(ForwardVars {
        logits: logits.expect("six experts"),
        gates,
        gate_scores,
        expert_logits,
        readouts,
        node_states: h,
    })
}

/// Evaluation-mode outputs for one graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub logits: Vec<f64>,
    pub gates: Vec<f64>,
    pub expert_logits: Vec<Vec<f64>>,
    pub readouts: Vec<Vec<f64>>,
    pub predicted: usize,
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn collect_outputs(tape: &Tape, fv: &ForwardVars, num_graphs: usize) -> Vec<ModelOutput> {
    (0..num_graphs)
        .map(|g| {
            let logits = tape.value(fv.logits).row(g).to_vec();
            ModelOutput {
                predicted: argmax(&logits),
                logits,
                gates: tape.value(fv.gates).row(g).to_vec(),
                expert_logits: fv
                    .expert_logits
                    .iter()
                    .map(|&o| tape.value(o).row(g).to_vec())
                    .collect(),
                readouts: fv.readouts.iter().map(|&r| tape.value(r).row(g).to_vec()).collect(),
            }
        })
        .collect()
}

const EVAL_CHUNK: usize = 64;

/// Evaluation-mode forward over many graphs.
pub fn predict(model: &MoeModel, graphs: &[&Cfg]) -> Result<Vec<ModelOutput>> {
    let mut out = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(EVAL_CHUNK) {
        let batch = GraphBatch::new(chunk)?;
        let mut tape = Tape::new();
        let vars = ModelVars::bind(model, &mut tape, false);
        let fv = forward_on_tape(&mut tape, &vars, &batch, None, &model.config, Mode::Eval)?;
        out.extend(collect_outputs(&tape, &fv, chunk.len()));
    }
    Ok(out)
}

pub fn model_forward(g: &Cfg, model: &MoeModel) -> Result<ModelOutput> {
    Ok(predict(model, &[g])?.remove(0))
}

fn check_node(g: &Cfg, i: usize) -> Result<()> {
    if i >= g.num_nodes() {
        return Err(Error::invalid(format!(
            "node {i} outside graph of {} nodes",
            g.num_nodes()
        )));
    }
    Ok(())
}

/// Normalised weights over the closed neighbourhood of node `i`, as
/// `(node, weight)` sorted by node.
pub fn neighbor_weights(g: &Cfg, i: usize, rho: Rho) -> Result<Vec<(usize, f64)>> {
    check_node(g, i)?;
    let b = GraphBatch::new(&[g])?;
    let mut tape = Tape::new();
    let st = structure(&mut tape, &b, None)?;
    let w = message_weights(&mut tape, &b, &st, rho)?;
    let w = tape.value(w);
    let mut out: Vec<(usize, f64)> = (0..b.num_messages())
        .filter(|&k| b.msg_tgt[k] == i)
        .map(|k| (b.msg_src[k], w.data()[k]))
        .collect();
    out.sort_by_key(|&(j, _)| j);
    Ok(out)
}

fn single_graph_batch(h: &Tensor, g: &Cfg) -> Result<GraphBatch> {
    if h.rows() != g.num_nodes() {
        return Err(Error::shape(
            "node_states",
            format!("{} rows for {} nodes", h.rows(), g.num_nodes()),
        ));
    }
    GraphBatch::with_features(&[g], Some(h.clone()))
}

/// One aggregation view of node states `h` (before the relu).
pub fn aggregate_channel(h: &Tensor, g: &Cfg, spec: ChannelSpec, std_mode: StdMode) -> Result<Tensor> {
    let b = single_graph_batch(h, g)?;
    let mut tape = Tape::new();
    let st = structure(&mut tape, &b, None)?;
    let hv = tape.constant(h.clone());
    let hs = tape.gather_rows(hv, &b.msg_src)?;
    let w = message_weights(&mut tape, &b, &st, spec.rho)?;
    let out = pool(&mut tape, hs, w, &b.msg_tgt, b.num_nodes, spec.stat, std_mode, None)?;
    Ok(tape.value(out).clone())
}

/// One fusion layer in evaluation mode.
pub fn layer_forward(h: &Tensor, g: &Cfg, layer: &Linear, std_mode: StdMode) -> Result<Tensor> {
    let b = single_graph_batch(h, g)?;
    let mut tape = Tape::new();
    let st = structure(&mut tape, &b, None)?;
    let hv = tape.constant(h.clone());
    let lin = layer.bind(&mut tape, false);
    let out = fusion_layer(&mut tape, hv, &b, &st, &lin, std_mode, None)?;
    Ok(tape.value(out).clone())
}

/// Graph-level pooled vector of node states `h` for one expert view.
pub fn expert_readout(h: &Tensor, g: &Cfg, spec: ChannelSpec, std_mode: StdMode) -> Result<Vec<f64>> {
    let b = single_graph_batch(h, g)?;
    let mut tape = Tape::new();
    let st = structure(&mut tape, &b, None)?;
    let hv = tape.constant(h.clone());
    let w = readout_weights(&mut tape, &b, &st, spec.rho)?;
    let out = pool(&mut tape, hv, w, &b.graph_of, 1, spec.stat, std_mode, None)?;
    Ok(tape.value(out).row(0).to_vec())
}

/// Gate vector for a concatenated `6H` readout vector.
pub fn gate(hg: &[f64], model: &MoeModel) -> Result<Vec<f64>> {
    let width = NUM_EXPERTS * model.config.hidden;
    if hg.len() != width {
        return Err(Error::shape("gate", format!("input width {} vs {width}", hg.len())));
    }
    let mut tape = Tape::new();
    let vars = ModelVars::bind(model, &mut tape, false);
    let x = tape.constant(Tensor::row_vector(hg.to_vec()));
    let (alpha, _) = gate_vars(&mut tape, x, &vars, model.config.variant)?;
    Ok(tape.value(alpha).row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Label;
    use crate::model::{ModelConfig, MoeModel, NUM_CLASSES};

    fn path3() -> Cfg {
        Cfg::new("p", Label::Benign, 3, vec![(0, 1), (1, 2)], Tensor::full(3, 1, 1.0)).unwrap()
    }

    #[test]
    fn path_weights() {
        let g = path3();
        let w0: Vec<f64> = neighbor_weights(&g, 1, Rho::Uniform)
            .unwrap()
            .iter()
            .map(|p| p.1)
            .collect();
        assert_eq!(w0, vec![1.0 / 3.0; 3]);
        let w1: Vec<f64> = neighbor_weights(&g, 1, Rho::Degree)
            .unwrap()
            .iter()
            .map(|p| p.1)
            .collect();
        assert_eq!(w1, vec![0.25, 0.5, 0.25]);
    }

    #[test]
    fn isolated_node_keeps_itself() {
        let g = Cfg::new("i", Label::Benign, 2, vec![], Tensor::zeros(2, 1)).unwrap();
        assert_eq!(neighbor_weights(&g, 0, Rho::Degree).unwrap(), vec![(0, 1.0)]);
    }

    #[test]
    fn path_channels_on_ones() {
        let g = path3();
        let h = g.features().clone();
        let spec = |stat| ChannelSpec {
            rho: Rho::Uniform,
            stat,
        };
        let mean = aggregate_channel(&h, &g, spec(Stat::Mean), StdMode::Clamped).unwrap();
        let max = aggregate_channel(&h, &g, spec(Stat::Max), StdMode::Clamped).unwrap();
        let std = aggregate_channel(&h, &g, spec(Stat::Std), StdMode::Clamped).unwrap();
        assert!((mean.get(1, 0) - 1.0).abs() < 1e-15);
        assert!((max.get(1, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((std.get(1, 0) - STD_EPS.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn readout_examples() {
        let two = Cfg::new("t", Label::Benign, 2, vec![], Tensor::column(vec![2.0, 4.0])).unwrap();
        let mean0 = ChannelSpec {
            rho: Rho::Uniform,
            stat: Stat::Mean,
        };
        let r = expert_readout(two.features(), &two, mean0, StdMode::Clamped).unwrap();
        assert!((r[0] - 3.0).abs() < 1e-15);

        let star = Cfg::new(
            "s",
            Label::Benign,
            4,
            vec![(0, 1), (0, 2), (0, 3)],
            Tensor::column(vec![1.0, 0.0, 0.0, 0.0]),
        )
        .unwrap();
        let mean1 = ChannelSpec {
            rho: Rho::Degree,
            stat: Stat::Mean,
        };
        let r = expert_readout(star.features(), &star, mean1, StdMode::Clamped).unwrap();
        assert!((r[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn top_k_mask_ties() {
        let p = Tensor::row_vector(vec![0.2, 0.2, 0.2, 0.2, 0.1, 0.1]);
        assert_eq!(top_k_mask(&p, 2).data(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn uniform_gate_averages_experts() {
        let cfg = ModelConfig {
            input_dim: 2,
            hidden: 3,
            layers: 1,
            variant: Variant::Uniform,
            std_mode: StdMode::Clamped,
        };
        let m = MoeModel::init(cfg, 4).unwrap();
        let g = Cfg::new(
            "g",
            Label::Benign,
            3,
            vec![(0, 1), (2, 1)],
            Tensor::new(3, 2, vec![0.1, 0.5, -0.3, 0.8, 1.2, 0.0]).unwrap(),
        )
        .unwrap();
        let out = model_forward(&g, &m).unwrap();
        for c in 0..NUM_CLASSES {
            let avg: f64 = out.expert_logits.iter().map(|o| o[c]).sum::<f64>() / 6.0;
            assert!((out.logits[c] - avg).abs() < 1e-12);
        }
    }
}
