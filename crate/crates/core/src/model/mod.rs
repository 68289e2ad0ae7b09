//! Six-channel message-passing encoder, six expert heads and the gating
//! network.
//!
//! Every layer aggregates the shared node state through six parameter-free
//! views `(rho, stat)` over the closed undirected neighbourhood, applies
//! relu to each, concatenates them and fuses with `Linear + relu (+ dropout)`.
//! Each expert pools the final node states over the whole graph with its own
//! view and maps the result to two class logits. The gate reads all six
//! pooled vectors.

mod batch;
mod forward;

pub use batch::GraphBatch;
pub use forward::{
    aggregate_channel, expert_readout, forward_on_tape, gate, layer_forward, model_forward, neighbor_weights, predict,
    top_k_mask, ForwardVars, Mode, ModelOutput, ModelVars,
};
pub(crate) use forward::{argmax, collect_outputs, derive_seed};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{glorot_uniform, Linear};
use crate::optim::ParamMut;
use crate::tensor::Tensor;

pub const NUM_EXPERTS: usize = 6;
pub const NUM_CLASSES: usize = 2;
pub const STD_EPS: f64 = 1e-12;

/// Neighbour weighting: uniform (`rho = 0`) or proportional to degree (`rho = 1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rho {
    Uniform = 0,
    Degree = 1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stat {
    Mean,
    Std,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub rho: Rho,
    pub stat: Stat,
}

/// E1..E6 in order.
pub const EXPERTS: [ChannelSpec; NUM_EXPERTS] = [
    ChannelSpec {
        rho: Rho::Uniform,
        stat: Stat::Mean,
    },
    ChannelSpec {
        rho: Rho::Uniform,
        stat: Stat::Std,
    },
    ChannelSpec {
        rho: Rho::Uniform,
        stat: Stat::Max,
    },
    ChannelSpec {
        rho: Rho::Degree,
        stat: Stat::Mean,
    },
    ChannelSpec {
        rho: Rho::Degree,
        stat: Stat::Std,
    },
    ChannelSpec {
        rho: Rho::Degree,
        stat: Stat::Max,
    },
];

pub fn expert_name(e: usize) -> String {
    format!("E{}", e + 1)
}

/// How the std view turns weighted messages into a spread.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdMode {
    /// `sqrt(max(sum m^2 - mu^2, 0) + eps)` over weighted messages `m`.
    #[default]
    Clamped,
    /// `sqrt(max(sum w h^2 - mu^2, 0) + eps)`: the weighted variance.
    WeightedVariance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    Uniform,
    Temperature { t: f64 },
    TopK { k: usize },
}

impl Variant {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Variant::Uniform => Ok(()),
            Variant::Temperature { t } if t > 0.0 && t.is_finite() => Ok(()),
            Variant::TopK { k } if (1..=NUM_EXPERTS).contains(&k) => Ok(()),
            v => Err(Error::invalid(format!("invalid routing variant {v:?}"))),
        }
    }

    /// Number of nonzero gates every sample receives.
    pub fn active_experts(&self) -> usize {
        match *self {
            Variant::TopK { k } => k,
            _ => NUM_EXPERTS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub variant: Variant,
    #[serde(default)]
    pub std_mode: StdMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 64,
            hidden: 64,
            layers: 3,
            variant: Variant::TopK { k: 2 },
            std_mode: StdMode::Clamped,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeParams {
    /// Fusion layers, `6 * width_in -> hidden`.
    pub layers: Vec<Linear>,
    /// One `hidden -> 2` head per expert.
    pub heads: Vec<Linear>,
    /// Gate input map, `6 * hidden -> hidden`.
    pub gate_hidden: Tensor,
    /// Gate output map, `hidden -> 6`.
    pub gate_out: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeModel {
    pub config: ModelConfig,
    pub params: MoeParams,
}

impl MoeModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.input_dim == 0 || config.hidden == 0 || config.layers == 0 {
            return Err(Error::invalid("model dims and depth must be positive"));
        }
        config.variant.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let width_in = if l == 0 { config.input_dim } else { h };
            layers.push(Linear::glorot(NUM_EXPERTS * width_in, h, &mut rng));
        }
        let heads = (0..NUM_EXPERTS)
            .map(|_| Linear::glorot(h, NUM_CLASSES, &mut rng))
            .collect();
        let gate_hidden = glorot_uniform(NUM_EXPERTS * h, h, &mut rng);
        let gate_out = glorot_uniform(h, NUM_EXPERTS, &mut rng);
        Ok(MoeModel {
            config,
            params: MoeParams {
                layers,
                heads,
                gate_hidden,
                gate_out,
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.variant.validate()?;
        let p = &self.params;
        let h = c.hidden;
        if p.layers.len() != c.layers || p.heads.len() != NUM_EXPERTS {
            return Err(Error::invalid(format!(
                "expected {} layers and {NUM_EXPERTS} heads, found {} and {}",
                c.layers,
                p.layers.len(),
                p.heads.len()
            )));
        }
        for (l, layer) in p.layers.iter().enumerate() {
            let width_in = if l == 0 { c.input_dim } else { h };
            layer.validate(&format!("layer {l}"))?;
            if layer.weight.shape() != [NUM_EXPERTS * width_in, h] {
                return Err(Error::invalid(format!(
                    "layer {l} weight is {:?}, expected {:?}",
                    layer.weight.shape(),
                    [NUM_EXPERTS * width_in, h]
                )));
            }
        }
        for (e, head) in p.heads.iter().enumerate() {
            head.validate(&format!("head {e}"))?;
            if head.weight.shape() != [h, NUM_CLASSES] {
                return Err(Error::invalid(format!("head {e} weight is {:?}", head.weight.shape())));
            }
        }
        if p.gate_hidden.shape() != [NUM_EXPERTS * h, h] || p.gate_out.shape() != [h, NUM_EXPERTS] {
            return Err(Error::invalid("gating weights have the wrong shape"));
        }
        Ok(())
    }

    /// Parameters in a fixed order: layers, heads, then the two gate maps.
    pub fn named_params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let p = &mut self.params;
        let mut out = Vec::new();
        for (i, l) in p.layers.iter_mut().enumerate() {
            out.push((format!("layer.{i}.weight"), &mut l.weight));
            out.push((format!("layer.{i}.bias"), &mut l.bias));
        }
        for (e, l) in p.heads.iter_mut().enumerate() {
            out.push((format!("head.{}.weight", expert_name(e)), &mut l.weight));
            out.push((format!("head.{}.bias", expert_name(e)), &mut l.bias));
        }
        out.push(("gate.hidden".into(), &mut p.gate_hidden));
        out.push(("gate.out".into(), &mut p.gate_out));
        out
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let p = &self.params;
        let mut out = Vec::new();
        for l in p.layers.iter().chain(&p.heads) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&p.gate_hidden);
        out.push(&p.gate_out);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: MoeModel = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }
}
