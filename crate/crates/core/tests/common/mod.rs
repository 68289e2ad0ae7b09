#![allow(dead_code)]

use cfgmoe::graph::{Cfg, Label};
use cfgmoe::model::{ModelConfig, MoeModel, StdMode, Variant};
use cfgmoe::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_features(rng: &mut impl Rng, n: usize, d: usize) -> Tensor {
    let data = (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(n, d, data).unwrap()
}

/// Random directed graph without self-loops, each ordered pair kept with
/// probability `p`.
pub fn random_graph(rng: &mut impl Rng, n: usize, p: f64, d: usize) -> Cfg {
    let mut edges = Vec::new();
    for s in 0..n {
        for t in 0..n {
            if s != t && rng.random_bool(p) {
                edges.push((s, t));
            }
        }
    }
    let label = if rng.random_bool(0.5) {
        Label::Malicious
    } else {
        Label::Benign
    };
    Cfg::new("g", label, n, edges, random_features(rng, n, d)).unwrap()
}

/// Initialised model with nonzero biases, so the oracle sees every term.
pub fn random_model(input_dim: usize, hidden: usize, layers: usize, variant: Variant, seed: u64) -> MoeModel {
    random_model_with(
        ModelConfig {
            input_dim,
            hidden,
            layers,
            variant,
            std_mode: StdMode::Clamped,
        },
        seed,
    )
}

pub fn random_model_with(config: ModelConfig, seed: u64) -> MoeModel {
    let mut m = MoeModel::init(config, seed).unwrap();
    let mut r = rng(seed ^ 0xB1A5);
    for l in m.params.layers.iter_mut().chain(m.params.heads.iter_mut()) {
        for b in l.bias.data_mut() {
            *b = r.random_range(-0.3..0.3);
        }
    }
    m
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Byte strings covering every supported `(opcode, ModRM)` form, with
/// random SIB, operand bytes and prefixes.
pub fn supported_byte_strings(seed: u64, with_lock: bool) -> Vec<Vec<u8>> {
    let mut r = rng(seed);
    let segments = [
        None,
        Some(0x26u8),
        Some(0x2E),
        Some(0x36),
        Some(0x3E),
        Some(0x64),
        Some(0x65),
    ];
    let mut out = Vec::new();
    for (op, modrm) in cfgmoe::encoding::supported_forms() {
        let seg = segments[r.random_range(0..segments.len())];
        let opsize = r.random_bool(0.3) && !matches!(op, 0xE8 | 0xE9);
        let addrsize = r.random_bool(0.3);
        let lock = with_lock && r.random_bool(0.2);
        let mut head: Vec<u8> = seg.into_iter().collect();
        if opsize {
            head.push(0x66);
        }
        if addrsize {
            head.push(0x67);
        }
        if lock {
            head.push(0xF0);
        }
        head.push(op);
        let mut tail = Vec::new();
        if let Some(m) = modrm {
            tail.push(m);
            if m >> 6 != 3 && m & 7 == 4 {
                tail.push(r.random());
            }
        }
        // find how many operand bytes the splitter wants by growing the tail
        let mut bytes = [head.clone(), tail.clone()].concat();
        let mut extra = 0;
        while cfgmoe::encoding::split_bytes(&bytes).is_err() && extra < 8 {
            bytes.push(r.random());
            extra += 1;
        }
        assert!(
            cfgmoe::encoding::split_bytes(&bytes).is_ok(),
            "no length accepted for {bytes:02X?}"
        );
        out.push(bytes);
    }
    out
}

/// Straight-loop dense evaluation of the model, written from the
/// definitions without the tape or the batch structure.
pub mod dense {
    use super::*;
    use cfgmoe::nn::Linear;

    pub struct Out {
        pub logits: Vec<f64>,
        pub gates: Vec<f64>,
        pub expert_logits: Vec<Vec<f64>>,
        pub readouts: Vec<Vec<f64>>,
    }

    type Mat = Vec<Vec<f64>>;

    fn adjacency(g: &Cfg) -> Mat {
        let n = g.num_nodes();
        let mut a = vec![vec![0.0; n]; n];
        for &(s, t) in g.edges() {
            a[s][t] = 1.0;
            a[t][s] = 1.0;
        }
        a
    }

    /// Row-normalised closed-neighbourhood weights.
    fn weights(a: &Mat, rho: usize) -> Mat {
        let n = a.len();
        let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
        let mut w = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j || a[i][j] > 0.0 {
                    w[i][j] = if rho == 0 { 1.0 } else { deg[j] };
                }
            }
            let s: f64 = w[i].iter().sum();
            if s == 0.0 {
                w[i][i] = 1.0;
            } else {
                for v in &mut w[i] {
                    *v /= s;
                }
            }
        }
        w
    }

    /// Statistic over the weighted rows `h[j] * w[j]` for the `j` in `members`.
    fn stat(h: &Mat, w: &[f64], members: &[usize], which: usize, std_mode: StdMode) -> Vec<f64> {
        let d = h[0].len();
        (0..d)
            .map(|c| {
                let msgs: Vec<f64> = members.iter().map(|&j| w[j] * h[j][c]).collect();
                let mu: f64 = msgs.iter().sum();
                match which {
                    0 => mu,
                    1 => {
                        let second: f64 = match std_mode {
                            StdMode::Clamped => msgs.iter().map(|m| m * m).sum(),
                            StdMode::WeightedVariance => members.iter().map(|&j| w[j] * h[j][c] * h[j][c]).sum(),
                        };
                        ((second - mu * mu).max(0.0) + 1e-12).sqrt()
                    }
                    _ => msgs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                }
            })
            .collect()
    }

    fn linear(x: &[f64], l: &Linear) -> Vec<f64> {
        let (rows, cols) = (l.weight.rows(), l.weight.cols());
        assert_eq!(rows, x.len());
        (0..cols)
            .map(|c| l.bias.get(0, c) + (0..rows).map(|r| x[r] * l.weight.get(r, c)).sum::<f64>())
            .collect()
    }

    fn relu(v: Vec<f64>) -> Vec<f64> {
        v.into_iter().map(|x| x.max(0.0)).collect()
    }

    fn softmax(s: &[f64]) -> Vec<f64> {
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    pub fn gate_from_scores(s: &[f64], variant: Variant) -> Vec<f64> {
        match variant {
            Variant::Uniform => vec![1.0 / 6.0; 6],
            Variant::Temperature { t } => softmax(&s.iter().map(|v| v / t).collect::<Vec<_>>()),
            Variant::TopK { k } => {
                let p = softmax(s);
                let mut order: Vec<usize> = (0..6).collect();
                order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
                let mut out = vec![0.0; 6];
                let total: f64 = order[..k].iter().map(|&e| p[e]).sum();
                for &e in &order[..k] {
                    out[e] = p[e] / total;
                }
                out
            }
        }
    }

    pub fn forward(g: &Cfg, model: &MoeModel) -> Out {
        let n = g.num_nodes();
        let a = adjacency(g);
        let ws = [weights(&a, 0), weights(&a, 1)];
        let std_mode = model.config.std_mode;
        let mut h: Mat = g.features().to_rows();
        for layer in &model.params.layers {
            let mut next = Vec::with_capacity(n);
            for i in 0..n {
                let members: Vec<usize> = (0..n).filter(|&j| j == i || a[i][j] > 0.0).collect();
                let mut cat = Vec::new();
                for e in 0..6 {
                    let (rho, which) = (e / 3, e % 3);
                    cat.extend(relu(stat(&h, &ws[rho][i], &members, which, std_mode)));
                }
                next.push(relu(linear(&cat, layer)));
            }
            h = next;
        }

        let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
        let total: f64 = deg.iter().sum();
        let pool_w = [
            vec![1.0 / n as f64; n],
            if total > 0.0 {
                deg.iter().map(|d| d / total).collect()
            } else {
                vec![1.0 / n as f64; n]
            },
        ];
        let all: Vec<usize> = (0..n).collect();
        let readouts: Vec<Vec<f64>> = (0..6)
            .map(|e| stat(&h, &pool_w[e / 3], &all, e % 3, std_mode))
            .collect();
        let expert_logits: Vec<Vec<f64>> = (0..6).map(|e| linear(&readouts[e], &model.params.heads[e])).collect();

        let hg: Vec<f64> = readouts.concat();
        let p = &model.params;
        let hidden: Vec<f64> = (0..p.gate_hidden.cols())
            .map(|c| {
                (0..hg.len())
                    .map(|r| hg[r] * p.gate_hidden.get(r, c))
                    .sum::<f64>()
                    .max(0.0)
            })
            .collect();
        let scores: Vec<f64> = (0..6)
            .map(|c| (0..hidden.len()).map(|r| hidden[r] * p.gate_out.get(r, c)).sum())
            .collect();
        let gates = gate_from_scores(&scores, model.config.variant);
        let logits = (0..2)
            .map(|c| (0..6).map(|e| gates[e] * expert_logits[e][c]).sum())
            .collect();
        Out {
            logits,
            gates,
            expert_logits,
            readouts,
        }
    }
}

/// Finite-difference helpers shared by the gradient checks.
pub mod grad {
    use super::*;
    use cfgmoe::autoencoder::{AeVars, AutoencoderParams};
    use cfgmoe::model::ModelVars;
    use cfgmoe::nn::LinearVars;
    use cfgmoe::{Tape, Var};

    pub const STEP: f64 = 1e-5;

    pub fn ae_vars(vars: &[Var], layers: usize) -> AeVars {
        let lin: Vec<LinearVars> = vars
            .chunks(2)
            .map(|p| LinearVars {
                weight: p[0],
                bias: p[1],
            })
            .collect();
        AeVars {
            encoder: lin[..layers].to_vec(),
            decoder: lin[layers..].to_vec(),
        }
    }

    pub fn ae_tensors(p: &AutoencoderParams) -> Vec<Tensor> {
        p.encoder
            .iter()
            .chain(&p.decoder)
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    pub fn positive_biases(p: &mut AutoencoderParams, seed: u64) {
        // keeps most units active so the check exercises every layer
        let mut r = rng(seed);
        for l in p.encoder.iter_mut().chain(p.decoder.iter_mut()) {
            for b in l.bias.data_mut() {
                *b = r.random_range(0.05..0.3);
            }
        }
    }

    /// Smallest |pre-activation| over every layer; central differences are
    /// only meaningful when no relu input sits within a step of zero.
    pub fn kink_distance(p: &AutoencoderParams, x: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let mut h = tape.constant(x.clone());
        let mut nearest = f64::INFINITY;
        for l in vars.encoder.iter().chain(&vars.decoder) {
            let pre = l.apply(&mut tape, h).unwrap();
            nearest = tape.value(pre).data().iter().fold(nearest, |m, v| m.min(v.abs()));
            h = tape.relu(pre);
        }
        nearest
    }

    pub fn smooth_input(p: &AutoencoderParams, rows: usize, r: &mut impl Rng) -> Tensor {
        let cols = p.input_dim();
        loop {
            let x = Tensor::new(rows, cols, (0..rows * cols).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
            if kink_distance(p, &x) > 100.0 * STEP {
                return x;
            }
        }
    }

    pub fn model_vars(vars: &[Var], layers: usize) -> ModelVars {
        let lin: Vec<LinearVars> = vars[..2 * (layers + 6)]
            .chunks(2)
            .map(|p| LinearVars {
                weight: p[0],
                bias: p[1],
            })
            .collect();
        ModelVars {
            layers: lin[..layers].to_vec(),
            heads: lin[layers..].to_vec(),
            gate_hidden: vars[2 * (layers + 6)],
            gate_out: vars[2 * (layers + 6) + 1],
        }
    }
}
