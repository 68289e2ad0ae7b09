mod common;

use cfgmoe::explain::*;
use cfgmoe::graph::{Cfg, Label};
use cfgmoe::model::{model_forward, Variant};
use cfgmoe::xai::*;
use cfgmoe::Tensor;
use common::{random_graph, random_model, rng};
use proptest::prelude::*;
use rand::Rng;

fn attr(e: usize, scores: Vec<f64>) -> EdgeAttribution {
    EdgeAttribution {
        scores,
        source: Source::Expert(e),
        target_class: 1,
        normalized: false,
    }
}

proptest! {
    #[test]
    fn normalisation_keeps_score_order(scores in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let n = normalize_scores(&attr(0, scores.clone())).scores;
        prop_assert!(n.iter().all(|v| v.abs() <= 1.0));
        prop_assert!(n.iter().any(|v| v.abs() == 1.0) || scores.iter().all(|&v| v == 0.0));
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if scores[i] < scores[j] {
                    prop_assert!(n[i] <= n[j]);
                }
            }
        }
    }

    #[test]
    fn aggregate_is_a_convex_combination(seed in any::<u64>(), edges in 1usize..10, k in 1usize..=6) {
        let mut r = rng(seed);
        let mut experts: Vec<usize> = (0..6).collect();
        for i in 0..6 {
            let j = r.random_range(i..6);
            experts.swap(i, j);
        }
        experts.truncate(k);
        let mut gates = vec![0.0; 6];
        for &e in &experts {
            gates[e] = r.random_range(0.01..1.0);
        }
        let total: f64 = gates.iter().sum();
        gates.iter_mut().for_each(|g| *g /= total);
        let attrs: Vec<EdgeAttribution> = experts
            .iter()
            .map(|&e| attr(e, (0..edges).map(|_| r.random_range(-2.0..2.0)).collect()))
            .collect();
        let agg = routing_aware_aggregate(&attrs, &gates).unwrap();
        for j in 0..edges {
            let want: f64 = attrs.iter().zip(&experts).map(|(a, &e)| gates[e] * a.scores[j]).sum();
            prop_assert!((agg.scores[j] - want).abs() < 1e-12);
            let lo = attrs.iter().map(|a| a.scores[j]).fold(f64::INFINITY, f64::min);
            let hi = attrs.iter().map(|a| a.scores[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo - 1e-12 <= agg.scores[j] && agg.scores[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn characterization_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, m in 0.0f64..=1.0) {
        let (lo, hi) = (a.min(b), a.max(b));
        let c = |p, q| characterization(p, q, 0.5, 0.5).unwrap();
        prop_assert!(c(lo, m) <= c(hi, m) + 1e-15);
        prop_assert!(c(m, lo) + 1e-15 >= c(m, hi));
    }
}

#[test]
fn aggregate_rejects_mismatched_lengths() {
    let gates = [0.5, 0.5, 0.0, 0.0, 0.0, 0.0];
    assert!(routing_aware_aggregate(&[attr(0, vec![1.0]), attr(1, vec![1.0, 0.0])], &gates).is_err());
}

#[test]
fn explanation_covers_exactly_the_routed_experts() {
    let mut r = rng(3);
    for (i, k) in [1, 2, 3, 6].into_iter().enumerate() {
        let model = random_model(3, 4, 2, Variant::TopK { k }, i as u64);
        let g = random_graph(&mut r, 6, 0.3, 3);
        let ex = explain_graph(&g, &model, &ExplainConfig::default()).unwrap();
        let routed: Vec<String> = (0..6)
            .filter(|&e| ex.gates[e] > 0.0)
            .map(|e| format!("E{}", e + 1))
            .collect();
        assert_eq!(ex.experts.keys().cloned().collect::<Vec<_>>(), routed);
        assert_eq!(ex.predicted_class, model_forward(&g, &model).unwrap().predicted);
        assert_eq!(ex.aggregated.len(), g.num_edges());
        assert!(ex.experts.values().all(|s| s.iter().all(|v| v.abs() <= 1.0)));
    }
}

#[test]
fn edgeless_graph_has_empty_attribution() {
    let g = Cfg::new("g", Label::Benign, 3, vec![], Tensor::full(3, 2, 0.5)).unwrap();
    let model = random_model(2, 3, 1, Variant::TopK { k: 2 }, 1);
    let ex = explain_graph(&g, &model, &ExplainConfig::default()).unwrap();
    assert!(ex.aggregated.is_empty());
    assert!(ex.experts.values().all(|s| s.is_empty()));
}

#[test]
fn ig_is_exact_on_a_linear_mask_function() {
    let w = [0.7, -1.3, 2.0, 0.0];
    for rule in [IgRule::Midpoint, IgRule::SquaredMidpoint] {
        for steps in [1, 3, 128] {
            let scores = integrated_gradients_fn(
                |tape, m| {
                    let wv = tape.constant(Tensor::column(w.to_vec()));
                    let p = tape.mul(m, wv)?;
                    let s = tape.sum_all(p);
                    Ok(tape.add_scalar(s, 4.0))
                },
                4,
                steps,
                rule,
            )
            .unwrap();
            for (s, want) in scores.iter().zip(w) {
                assert!((s - want).abs() < 1e-12, "{rule:?} {steps}: {scores:?}");
            }
        }
    }
    assert!(integrated_gradients_fn(|t, m| Ok(t.sum_all(m)), 2, 0, IgRule::Midpoint).is_err());
}

/// `f(1) - f(0+)` of expert `e`'s logit for class `c`.
fn logit_gap(g: &Cfg, model: &cfgmoe::model::MoeModel, e: usize, c: usize) -> f64 {
    let at = |v: f64| masked_forward(g, &vec![v; g.num_edges()], model).unwrap().expert_logits[e][c];
    at(1.0) - at(1e-9)
}

// Relu and max kinks along the path leave an O(1/m) quadrature error, so
// small logit gaps need more than the default step count.
#[test]
fn ig_sum_converges_to_logit_gap() {
    let mut r = rng(8);
    for i in 0..6 {
        let model = random_model(3, 4, 2, Variant::TopK { k: 2 }, 100 + i);
        let g = random_graph(&mut r, 7, 0.25, 3);
        let c = model_forward(&g, &model).unwrap().predicted;
        for e in [0, 3] {
            let total: f64 = integrated_gradients(&g, &model, e, c, 2048, IgRule::default())
                .unwrap()
                .scores
                .iter()
                .sum();
            let gap = logit_gap(&g, &model, e, c);
            assert!(
                (total - gap).abs() <= 0.02 * gap.abs(),
                "graph {i} E{}: {total} vs {gap}",
                e + 1
            );
        }
    }
}

#[test]
fn select_subgraph_examples() {
    assert_eq!(select_subgraph(&[3.0, 1.0, 2.0], 0.34).unwrap(), vec![0, 2]);
    assert_eq!(select_subgraph(&[3.0, 1.0, 2.0], 0.0).unwrap(), vec![0, 1, 2]);
    assert!(select_subgraph(&[3.0, 1.0, 2.0], 1.0).unwrap().is_empty());
    assert_eq!(select_subgraph(&[1.0, 1.0, 1.0, 1.0], 0.5).unwrap(), vec![0, 1]);
    for n in 0..40 {
        for s in default_sparsity_grid() {
            let want = ((1.0 - s) * n as f64 - 1e-9).ceil() as usize;
            assert_eq!(keep_count(n, s).unwrap(), want);
        }
    }
}

/// Indicator-count oracle for Fidelity+ and Fidelity-.
fn fidelity_oracle(model: &cfgmoe::model::MoeModel, graphs: &[Cfg], scores: &[Vec<f64>], s: f64) -> (f64, f64) {
    let (mut same_removed, mut same_kept) = (0, 0);
    for (g, sc) in graphs.iter().zip(scores) {
        let y = model_forward(g, model).unwrap().predicted;
        let keep_n = ((1.0 - s) * g.num_edges() as f64 - 1e-9).ceil().max(0.0) as usize;
        let mut order: Vec<usize> = (0..g.num_edges()).collect();
        order.sort_by(|&a, &b| sc[b].partial_cmp(&sc[a]).unwrap().then(a.cmp(&b)));
        let mut keep = order[..keep_n].to_vec();
        keep.sort();
        let rest: Vec<usize> = (0..g.num_edges()).filter(|k| !keep.contains(k)).collect();
        if model_forward(&g.edge_subgraph(&rest), model).unwrap().predicted == y {
            same_removed += 1;
        }
        if model_forward(&g.edge_subgraph(&keep), model).unwrap().predicted == y {
            same_kept += 1;
        }
    }
    let n = graphs.len() as f64;
    (1.0 - same_removed as f64 / n, 1.0 - same_kept as f64 / n)
}

fn random_case(seed: u64, count: usize) -> (cfgmoe::model::MoeModel, Vec<Cfg>, Vec<Vec<f64>>) {
    let mut r = rng(seed);
    let model = random_model(3, 4, 2, Variant::TopK { k: 2 }, seed);
    let graphs: Vec<Cfg> = (0..count)
        .map(|_| {
            let n = r.random_range(2..9);
            random_graph(&mut r, n, 0.35, 3)
        })
        .collect();
    let scores = graphs
        .iter()
        .map(|g| (0..g.num_edges()).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    (model, graphs, scores)
}

#[test]
fn fidelity_matches_indicator_counts() {
    for seed in 0..8 {
        let (model, graphs, scores) = random_case(seed, 12);
        let refs: Vec<&Cfg> = graphs.iter().collect();
        let mut grid = default_sparsity_grid();
        grid.extend([0.0, 1.0]);
        let rows = fidelity_sweep(&model, &refs, &scores, &grid).unwrap();
        for row in rows {
            let want = fidelity_oracle(&model, &graphs, &scores, row.sparsity);
            assert_eq!((row.fid_plus, row.fid_minus), want, "seed {seed} s {}", row.sparsity);
            for v in [row.fid_plus, row.fid_minus, row.characterization] {
                assert!((0.0..=1.0).contains(&v));
            }
            if row.sparsity == 0.0 {
                assert_eq!(row.fid_minus, 0.0);
            }
            if row.sparsity == 1.0 {
                assert_eq!(row.fid_plus, 0.0);
            }
        }
    }
}

#[test]
fn one_flip_in_two_graphs_gives_half() {
    // find two graphs where dropping every edge changes exactly one prediction
    let mut found = false;
    for seed in 0..200 {
        let (model, graphs, scores) = random_case(1000 + seed, 2);
        let flips = graphs
            .iter()
            .filter(|g| {
                model_forward(g, &model).unwrap().predicted
                    != model_forward(&g.edge_subgraph(&[]), &model).unwrap().predicted
            })
            .count();
        if flips == 1 {
            let refs: Vec<&Cfg> = graphs.iter().collect();
            let (plus, minus) = fidelity(&model, &refs, &scores, 0.0).unwrap();
            assert_eq!((plus, minus), (0.5, 0.0));
            let (plus, minus) = fidelity(&model, &refs, &scores, 1.0).unwrap();
            assert_eq!((plus, minus), (0.0, 0.5));
            found = true;
            break;
        }
    }
    assert!(found);
}

#[test]
fn fidelity_rejects_bad_input() {
    let (model, graphs, scores) = random_case(5, 3);
    let refs: Vec<&Cfg> = graphs.iter().collect();
    assert!(fidelity(&model, &[], &[], 0.5).is_err());
    assert!(fidelity(&model, &refs, &scores[..2], 0.5).is_err());
    assert!(fidelity(&model, &refs, &scores, 1.5).is_err());
}

#[test]
fn characterization_on_a_grid() {
    for i in 0..=20 {
        for j in 0..=20 {
            let (p, m) = (i as f64 / 20.0, j as f64 / 20.0);
            let got = characterization(p, m, 0.5, 0.5).unwrap();
            // harmonic mean of p and 1 - m
            let want = if p == 0.0 || m == 1.0 {
                0.0
            } else {
                2.0 / (1.0 / p + 1.0 / (1.0 - m))
            };
            assert!((got - want).abs() < 1e-12, "{p} {m}: {got} vs {want}");
        }
    }
    assert!((characterization(0.8, 0.3, 0.5, 0.5).unwrap() - 0.56 / 0.75).abs() < 1e-15);
    assert!(characterization(0.5, 0.5, 0.6, 0.6).is_err());
}

#[test]
fn entropy_reference_values() {
    let one_hot = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
    assert_eq!(router_entropy(&one_hot), 0.0);
    assert!((router_entropy(&[1.0 / 6.0; 6]) - 1.0).abs() < 1e-12);
    let two = router_entropy(&[0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
    assert!((two - 2f64.ln() / 6f64.ln()).abs() < 1e-12);
    assert!((two - 0.3869).abs() < 1e-4);
    for k in 1..=6 {
        let mut a = vec![0.0; 6];
        a[..k].fill(1.0 / k as f64);
        assert!((router_entropy(&a) - reference_entropy(k)).abs() < 1e-12);
    }
}

#[test]
fn ecdf_properties() {
    let single = entropy_ecdf(&[0.4]).unwrap();
    assert_eq!(single.points, vec![(0.4, 1.0)]);
    assert_eq!(ecdf_at(&single.points, 0.39), 0.0);
    assert_eq!(
        (single.quartiles.q25, single.quartiles.median, single.quartiles.q75),
        (0.4, 0.4, 0.4)
    );
    assert_eq!(entropy_ecdf(&[0.0, 1.0]).unwrap().quartiles.median, 0.5);
    assert!(entropy_ecdf(&[]).is_err());

    let mut r = rng(9);
    for _ in 0..50 {
        let n = r.random_range(1..60);
        let v: Vec<f64> = (0..n).map(|_| (r.random_range(0..10) as f64) / 10.0).collect();
        let e = entropy_ecdf(&v).unwrap();
        assert!(e.points.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
        assert_eq!(e.points.last().unwrap().1, 1.0);
        for &(t, f) in &e.points {
            let frac = v.iter().filter(|&&x| x <= t).count() as f64 / n as f64;
            assert!((f - frac).abs() < 1e-12);
        }
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(ecdf_at(&e.points, max), 1.0);
        assert_eq!(e.reference.len(), 3);
    }
}

#[test]
fn coselection_counts() {
    let gates = vec![
        vec![0.0, 0.0, 0.0, 0.7, 0.0, 0.3],
        vec![0.0, 0.0, 0.0, 0.2, 0.0, 0.8],
        vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.6, 0.0, 0.4],
    ];
    let m = coselection_matrix(&gates).unwrap();
    assert_eq!(m[3][5], 2);
    assert_eq!(m[5][3], 1);
    assert_eq!(m[0][1], 1);
    assert_eq!(m.iter().flatten().sum::<usize>(), 4);
    assert!((0..6).all(|e| m[e][e] == 0));
    let p = [0.5, 0.25, 0.25];
    let want: f64 = -p.iter().map(|x| x * f64::ln(*x)).sum::<f64>();
    assert!((coselection_entropy(&m) - want).abs() < 1e-12);
    assert!(coselection_matrix(&[vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]]).is_err());
}

#[test]
fn gate_boxes_summarise_each_expert() {
    let gates: Vec<Vec<f64>> = (0..5)
        .map(|i| {
            let mut a = vec![0.0; 6];
            a[0] = i as f64 / 4.0;
            a[1] = 1.0 - a[0];
            a
        })
        .collect();
    let boxes = gate_boxes(&gates).unwrap();
    assert_eq!(boxes.len(), 6);
    assert_eq!(boxes[0].expert, "E1");
    assert_eq!(
        (boxes[0].min, boxes[0].q25, boxes[0].median, boxes[0].q75, boxes[0].max),
        (0.0, 0.25, 0.5, 0.75, 1.0)
    );
    assert_eq!(boxes[0].mean, 0.5);
    assert_eq!(boxes[4].max, 0.0);
}
