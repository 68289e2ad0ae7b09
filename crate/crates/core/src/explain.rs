//! Edge attributions by integrated gradients over an edge mask, and their
//! gate-weighted combination across the selected experts.
//!
//! The mask scales each undirected neighbour pair before weight
//! normalisation. IG integrates along the straight line from the all-zero
//! mask to the all-one mask; see [`IgRule`] for the quadrature. Interior
//! points only, so the sum approximates `f(1) - f(0+)`, which differs from
//! `f(0)` for the degree-weighted readouts. The target is expert `e`'s logit
//! for the class the full model predicts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Cfg;
use crate::model::{
    collect_outputs, expert_name, forward_on_tape, model_forward, GraphBatch, Mode, ModelOutput, ModelVars, MoeModel,
    NUM_EXPERTS,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Copies of the graph evaluated per tape during IG.
const IG_CHUNK: usize = 16;

/// Evaluation-mode forward with every stored edge scaled by `mask`.
pub fn masked_forward(g: &Cfg, mask: &[f64], model: &MoeModel) -> Result<ModelOutput> {
    if mask.len() != g.num_edges() {
        return Err(Error::shape(
            "masked_forward",
            format!("mask of length {} for {} edges", mask.len(), g.num_edges()),
        ));
    }
    let batch = GraphBatch::new(&[g])?;
    let mut tape = Tape::new();
    let vars = ModelVars::bind(model, &mut tape, false);
    let m = tape.constant(Tensor::column(mask.to_vec()));
    let fv = forward_on_tape(&mut tape, &vars, &batch, Some(m), &model.config, Mode::Eval)?;
    Ok(collect_outputs(&tape, &fv, 1).remove(0))
}

/// Who produced an attribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Expert(usize),
    Aggregated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeAttribution {
    pub scores: Vec<f64>,
    pub source: Source,
    pub target_class: usize,
    pub normalized: bool,
}

/// Quadrature for the straight-line path integral from the zero mask to
/// the all-ones mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgRule {
    /// Gradients at `t = (i - 0.5) / m`, each weighted `1 / m`.
    Midpoint,
    /// The same integral after substituting `t = u^2`: gradients at
    /// `t = u_i^2` with `u_i = (i - 0.5) / m`, weighted `2 u_i / m`. Stays
    /// accurate when the target behaves like `sqrt(t)` near the zero mask.
    #[default]
    SquaredMidpoint,
}

impl IgRule {
    /// `(mask value, weight)` pairs; weights sum to 1.
    pub fn nodes(self, steps: usize) -> Vec<(f64, f64)> {
        let m = steps as f64;
        (1..=steps)
            .map(|i| {
                let u = (i as f64 - 0.5) / m;
                match self {
                    IgRule::Midpoint => (u, 1.0 / m),
                    IgRule::SquaredMidpoint => (u * u, 2.0 * u / m),
                }
            })
            .collect()
    }
}

/// IG of an arbitrary scalar function of an `[n, 1]` mask, from zeros to ones.
pub fn integrated_gradients_fn<F>(f: F, n: usize, steps: usize, rule: IgRule) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if steps == 0 {
        return Err(Error::invalid("integrated gradients needs at least one step"));
    }
    let mut total = vec![0.0; n];
    for (t, w) in rule.nodes(steps) {
        let mut tape = Tape::new();
        let m = tape.param(Tensor::full(n, 1, t));
        let out = f(&mut tape, m)?;
        let g = tape.backward(out)?.wrt(m);
        for (acc, v) in total.iter_mut().zip(g.data()) {
            *acc += w * v;
        }
    }
    Ok(total)
}

/// IG scores of several experts' logit for class `target`, sharing the
/// forward passes. Returns one score vector per entry of `experts`.
pub fn integrated_gradients_multi(
    g: &Cfg,
    model: &MoeModel,
    experts: &[usize],
    target: usize,
    steps: usize,
    rule: IgRule,
) -> Result<Vec<Vec<f64>>> {
    if steps == 0 {
        return Err(Error::invalid("integrated gradients needs at least one step"));
    }
    if let Some(&e) = experts.iter().find(|&&e| e >= NUM_EXPERTS) {
        return Err(Error::invalid(format!("no expert {e}")));
    }
    if target >= 2 {
        return Err(Error::invalid(format!("no class {target}")));
    }
    let e = g.num_edges();
    let mut sums = vec![vec![0.0; e]; experts.len()];
    if e == 0 {
        return Ok(sums);
    }
    for chunk in rule.nodes(steps).chunks(IG_CHUNK) {
        let copies = vec![g; chunk.len()];
        let batch = GraphBatch::new(&copies)?;
        let mut tape = Tape::new();
        let vars = ModelVars::bind(model, &mut tape, false);
        let data: Vec<f64> = chunk.iter().flat_map(|&(t, _)| std::iter::repeat_n(t, e)).collect();
        let mask = tape.param(Tensor::column(data));
        let fv = forward_on_tape(&mut tape, &vars, &batch, Some(mask), &model.config, Mode::Eval)?;
        for (slot, &ex) in experts.iter().enumerate() {
            let col = tape.slice_cols(fv.expert_logits[ex], target, 1)?;
            let root = tape.sum_all(col);
            let grad = tape.backward(root)?.wrt(mask);
            for (k, v) in grad.data().iter().enumerate() {
                sums[slot][k % e] += chunk[k / e].1 * v;
            }
        }
    }
    for s in &mut sums {
        for (j, v) in s.iter().enumerate() {
            if !v.is_finite() {
                let (a, b) = g.edges()[j];
                return Err(Error::NonFiniteGradient(format!("edge {j} ({a} -> {b})")));
            }
        }
    }
    Ok(sums)
}

pub fn integrated_gradients(
    g: &Cfg,
    model: &MoeModel,
    expert: usize,
    target: usize,
    steps: usize,
    rule: IgRule,
) -> Result<EdgeAttribution> {
    let scores = integrated_gradients_multi(g, model, &[expert], target, steps, rule)?.remove(0);
    Ok(EdgeAttribution {
        scores,
        source: Source::Expert(expert),
        target_class: target,
        normalized: false,
    })
}

/// Divides by the largest absolute score; all-zero input is unchanged.
pub fn normalize_scores(attr: &EdgeAttribution) -> EdgeAttribution {
    let max = attr.scores.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scores = if max > 0.0 {
        attr.scores.iter().map(|v| v / max).collect()
    } else {
        attr.scores.clone()
    };
    EdgeAttribution {
        scores,
        normalized: true,
        ..attr.clone()
    }
}

/// `sum_e gates[e] * scores_e` over the given per-expert attributions.
pub fn routing_aware_aggregate(attrs: &[EdgeAttribution], gates: &[f64]) -> Result<EdgeAttribution> {
    let first = attrs
        .first()
        .ok_or_else(|| Error::invalid("no expert attributions to aggregate"))?;
    let n = first.scores.len();
    let mut out = vec![0.0; n];
    for a in attrs {
        let Source::Expert(e) = a.source else {
            return Err(Error::invalid("only per-expert attributions can be aggregated"));
        };
        if a.scores.len() != n {
            return Err(Error::shape(
                "routing_aware_aggregate",
                format!("edge counts {} and {n} differ", a.scores.len()),
            ));
        }
        let w = *gates
            .get(e)
            .ok_or_else(|| Error::invalid(format!("no gate for expert {e}")))?;
        for (o, s) in out.iter_mut().zip(&a.scores) {
            *o += w * s;
        }
    }
    Ok(EdgeAttribution {
        scores: out,
        source: Source::Aggregated,
        target_class: first.target_class,
        normalized: attrs.iter().all(|a| a.normalized),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub steps: usize,
    pub normalize: bool,
    pub rule: IgRule,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            steps: 64,
            normalize: true,
            rule: IgRule::default(),
        }
    }
}

/// Per-graph explanation as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub graph_id: String,
    pub predicted_class: usize,
    pub gates: Vec<f64>,
    /// Scores of the experts with a nonzero gate, keyed `E1`..`E6`.
    pub experts: BTreeMap<String, Vec<f64>>,
    pub aggregated: Vec<f64>,
    pub normalized: bool,
}

/// Explains the model's prediction on `g` through the experts it routes to.
pub fn explain_graph(g: &Cfg, model: &MoeModel, cfg: &ExplainConfig) -> Result<Explanation> {
    let out = model_forward(g, model)?;
    let selected: Vec<usize> = (0..NUM_EXPERTS).filter(|&e| out.gates[e] > 0.0).collect();
    let raw = integrated_gradients_multi(g, model, &selected, out.predicted, cfg.steps, cfg.rule)?;
    let attrs: Vec<EdgeAttribution> = selected
        .iter()
        .zip(raw)
        .map(|(&e, scores)| {
            let a = EdgeAttribution {
                scores,
                source: Source::Expert(e),
                target_class: out.predicted,
                normalized: false,
            };
            if cfg.normalize {
                normalize_scores(&a)
            } else {
                a
            }
        })
        .collect();
    let aggregated = routing_aware_aggregate(&attrs, &out.gates)?;
    Ok(Explanation {
        graph_id: g.id().to_string(),
        predicted_class: out.predicted,
        experts: attrs
            .iter()
            .map(|a| match a.source {
                Source::Expert(e) => (expert_name(e), a.scores.clone()),
                Source::Aggregated => unreachable!(),
            })
            .collect(),
        gates: out.gates,
        aggregated: aggregated.scores,
        normalized: cfg.normalize,
    })
}
