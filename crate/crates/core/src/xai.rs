//! Explanation fidelity, characterization and routing analytics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Cfg;
use crate::model::{expert_name, predict, MoeModel, NUM_EXPERTS};
use crate::tape::xlogx;

/// Slack used when turning `(1 - s) * |E|` into a count, so that grid values
/// like `0.2` do not round up an extra edge.
const COUNT_SLACK: f64 = 1e-9;

fn check_sparsity(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("sparsity {s} outside [0, 1]")));
    }
    Ok(())
}

/// `ceil((1 - s) * num_edges)`.
pub fn keep_count(num_edges: usize, s: f64) -> Result<usize> {
    check_sparsity(s)?;
    let raw = ((1.0 - s) * num_edges as f64 - COUNT_SLACK).ceil().max(0.0) as usize;
    Ok(raw.min(num_edges))
}

/// Indices (ascending) of the highest-scoring edges kept at sparsity `s`.
/// Equal scores favour the lower edge index.
pub fn select_subgraph(scores: &[f64], s: f64) -> Result<Vec<usize>> {
    let keep = keep_count(scores.len(), s)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen = order[..keep].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// The complement of `keep` among `0..n`.
fn complement(n: usize, keep: &[usize]) -> Vec<usize> {
    let mut in_keep = vec![false; n];
    for &k in keep {
        in_keep[k] = true;
    }
    (0..n).filter(|&k| !in_keep[k]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub sparsity: f64,
    pub fid_plus: f64,
    pub fid_minus: f64,
    pub characterization: f64,
}

/// Fidelity+ and Fidelity- at every sparsity in `grid`, against the model's
/// own predictions on the intact graphs.
pub fn fidelity_sweep(
    model: &MoeModel,
    graphs: &[&Cfg],
    scores: &[Vec<f64>],
    grid: &[f64],
) -> Result<Vec<FidelityRow>> {
    if graphs.is_empty() {
        return Err(Error::invalid("fidelity needs at least one graph"));
    }
    if scores.len() != graphs.len() {
        return Err(Error::invalid(format!(
            "{} attributions for {} graphs",
            scores.len(),
            graphs.len()
        )));
    }
    for (g, s) in graphs.iter().zip(scores) {
        if s.len() != g.num_edges() {
            return Err(Error::shape(
                "fidelity",
                format!(
                    "graph `{}` has {} edges, attribution {}",
                    g.id(),
                    g.num_edges(),
                    s.len()
                ),
            ));
        }
    }
    let full: Vec<usize> = predict(model, graphs)?.iter().map(|o| o.predicted).collect();
    let n = graphs.len() as f64;
    let mut rows = Vec::with_capacity(grid.len());
    for &s in grid {
        let mut kept = Vec::with_capacity(graphs.len());
        let mut removed = Vec::with_capacity(graphs.len());
        for (g, sc) in graphs.iter().zip(scores) {
            let keep = select_subgraph(sc, s)?;
            removed.push(g.edge_subgraph(&complement(g.num_edges(), &keep)));
            kept.push(g.edge_subgraph(&keep));
        }
        let same = |variants: &[Cfg]| -> Result<f64> {
            let refs: Vec<&Cfg> = variants.iter().collect();
            let preds = predict(model, &refs)?;
            Ok(preds.iter().zip(&full).filter(|(o, &y)| o.predicted == y).count() as f64)
        };
        let fid_plus = 1.0 - same(&removed)? / n;
        let fid_minus = 1.0 - same(&kept)? / n;
        rows.push(FidelityRow {
            sparsity: s,
            fid_plus,
            fid_minus,
            characterization: characterization(fid_plus, fid_minus, 0.5, 0.5)?,
        });
    }
    Ok(rows)
}

pub fn fidelity(model: &MoeModel, graphs: &[&Cfg], scores: &[Vec<f64>], s: f64) -> Result<(f64, f64)> {
    let r = fidelity_sweep(model, graphs, scores, &[s])?[0];
    Ok((r.fid_plus, r.fid_minus))
}

/// Weighted harmonic mean of `F+` and `1 - F-`; 0 when undefined.
pub fn characterization(fid_plus: f64, fid_minus: f64, w_plus: f64, w_minus: f64) -> Result<f64> {
    if (w_plus + w_minus - 1.0).abs() > 1e-12 || w_plus < 0.0 || w_minus < 0.0 {
        return Err(Error::invalid(format!(
            "characterization weights {w_plus} and {w_minus} must be nonnegative and sum to 1"
        )));
    }
    for v in [fid_plus, fid_minus] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("fidelity value {v} outside [0, 1]")));
        }
    }
    let den = w_plus * (1.0 - fid_minus) + w_minus * fid_plus;
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((w_plus + w_minus) * fid_plus * (1.0 - fid_minus) / den)
}

/// Gate entropy divided by `log 6`.
pub fn router_entropy(gates: &[f64]) -> f64 {
    (0.0 - gates.iter().map(|&a| xlogx(a)).sum::<f64>()) / (NUM_EXPERTS as f64).ln()
}

/// `log k / log 6`: the normalised entropy of `k` equal gates.
pub fn reference_entropy(k: usize) -> f64 {
    (k as f64).ln() / (NUM_EXPERTS as f64).ln()
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

fn sorted_finite(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::invalid("no values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

pub fn quartiles(values: &[f64]) -> Result<Quartiles> {
    let v = sorted_finite(values)?;
    Ok(Quartiles {
        q25: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q75: quantile(&v, 0.75),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyEcdf {
    /// `(t, fraction of samples <= t)` at each distinct sample value.
    pub points: Vec<(f64, f64)>,
    pub quartiles: Quartiles,
    /// `(k, log k / log 6)` for k = 2, 3, 4.
    pub reference: Vec<(usize, f64)>,
}

pub fn entropy_ecdf(values: &[f64]) -> Result<EntropyEcdf> {
    let v = sorted_finite(values)?;
    let n = v.len() as f64;
    let mut points: Vec<(f64, f64)> = Vec::new();
    for (i, &x) in v.iter().enumerate() {
        let f = (i + 1) as f64 / n;
        match points.last_mut() {
            Some(last) if last.0 == x => last.1 = f,
            _ => points.push((x, f)),
        }
    }
    Ok(EntropyEcdf {
        points,
        quartiles: quartiles(&v)?,
        reference: (2..=4).map(|k| (k, reference_entropy(k))).collect(),
    })
}

/// ECDF value at `t` from a table produced by [`entropy_ecdf`].
pub fn ecdf_at(points: &[(f64, f64)], t: f64) -> f64 {
    points.iter().take_while(|p| p.0 <= t).last().map_or(0.0, |p| p.1)
}

pub type CoselectionMatrix = [[usize; NUM_EXPERTS]; NUM_EXPERTS];

/// Rows: Top-1 expert, columns: Top-2 expert. Equal gates put the lower
/// index on the row.
pub fn coselection_matrix(gates: &[Vec<f64>]) -> Result<CoselectionMatrix> {
    let mut m = [[0; NUM_EXPERTS]; NUM_EXPERTS];
    for (i, a) in gates.iter().enumerate() {
        let nz: Vec<usize> = (0..a.len()).filter(|&e| a[e] != 0.0).collect();
        if a.len() != NUM_EXPERTS || nz.len() != 2 {
            return Err(Error::invalid(format!(
                "gate {i} has {} nonzero entries; co-selection needs exactly 2",
                nz.len()
            )));
        }
        let (x, y) = (nz[0], nz[1]);
        let (top1, top2) = if a[y] > a[x] { (y, x) } else { (x, y) };
        m[top1][top2] += 1;
    }
    Ok(m)
}

/// Shannon entropy (nats) of the normalised co-selection histogram.
pub fn coselection_entropy(m: &CoselectionMatrix) -> f64 {
    let total: usize = m.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    0.0 - m.iter().flatten().map(|&c| xlogx(c as f64 / total as f64)).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateBox {
    pub expert: String,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub mean: f64,
}

/// Per-expert distribution summary of gate weights across samples.
pub fn gate_boxes(gates: &[Vec<f64>]) -> Result<Vec<GateBox>> {
    if gates.is_empty() {
        return Err(Error::invalid("no gate vectors"));
    }
    (0..NUM_EXPERTS)
        .map(|e| {
            let col: Vec<f64> = gates.iter().map(|a| a[e]).collect();
            let v = sorted_finite(&col)?;
            Ok(GateBox {
                expert: expert_name(e),
                min: v[0],
                q25: quantile(&v, 0.25),
                median: quantile(&v, 0.5),
                q75: quantile(&v, 0.75),
                max: v[v.len() - 1],
                mean: v.iter().sum::<f64>() / v.len() as f64,
            })
        })
        .collect()
}

/// The sparsity grid `0.05, 0.10, ..., 0.95`.
pub fn default_sparsity_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}
