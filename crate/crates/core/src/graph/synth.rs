//! Synthetic CFG generator.
//!
//! Benign graphs are chains of 20-60 blocks with a few short forward jumps
//! and loop back-edges. Malicious graphs use the same backbone and attach
//! one to three star motifs (5-10 leaves each) to distinct chain blocks,
//! which raises their degree variance. Node features are unit-variance
//! Gaussians whose first four dimensions are centred at -0.5 (benign) or
//! +0.5 (malicious).

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Cfg, Dataset, Label};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CHAIN_LEN: std::ops::RangeInclusive<usize> = 20..=60;
const HUBS: std::ops::RangeInclusive<usize> = 1..=3;
const LEAVES: std::ops::RangeInclusive<usize> = 5..=10;
const SIGNAL_DIMS: usize = 4;
const SIGNAL_MEAN: f64 = 0.5;

fn synth_graph(rng: &mut ChaCha8Rng, id: String, label: Label, d: usize) -> Result<Cfg> {
    let len = rng.random_range(CHAIN_LEN);
    let mut edges: Vec<(usize, usize)> = (0..len - 1).map(|i| (i, i + 1)).collect();
    let mut seen: HashSet<(usize, usize)> = edges.iter().copied().collect();

    for _ in 0..len / 10 {
        let src = rng.random_range(0..len);
        let dst = if rng.random_bool(0.5) {
            src + rng.random_range(2..=4)
        } else {
            src.saturating_sub(rng.random_range(1..=5))
        };
        if dst < len && dst != src && seen.insert((src, dst)) {
            edges.push((src, dst));
        }
    }

    let mut num_nodes = len;
    if label == Label::Malicious {
        let hubs = rng.random_range(HUBS);
        for hub in sample(rng, len, hubs).into_vec() {
            for _ in 0..rng.random_range(LEAVES) {
                edges.push((hub, num_nodes));
                num_nodes += 1;
            }
        }
    }

    let mean = match label {
        Label::Benign => -SIGNAL_MEAN,
        Label::Malicious => SIGNAL_MEAN,
    };
    let signal = Normal::new(mean, 1.0).expect("valid normal");
    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    let mut data = Vec::with_capacity(num_nodes * d);
    for _ in 0..num_nodes {
        for j in 0..d {
            data.push(if j < SIGNAL_DIMS {
                signal.sample(rng)
            } else {
                noise.sample(rng)
            });
        }
    }
    Cfg::new(id, label, num_nodes, edges, Tensor::new(num_nodes, d, data)?)
}

/// Generates `n_per_class` graphs of each class with `d`-wide features,
/// interleaving the classes. Fully determined by `seed`.
pub fn synth_dataset(n_per_class: usize, d: usize, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 || d == 0 {
        return Err(Error::invalid("synth_dataset needs n_per_class >= 1 and d >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::with_capacity(2 * n_per_class);
    for i in 0..n_per_class {
        for label in Label::ALL {
            let id = format!("synth-{}-{i:04}", label.index());
            graphs.push(synth_graph(&mut rng, id, label, d)?);
        }
    }
    Ok(Dataset::new(graphs))
}
