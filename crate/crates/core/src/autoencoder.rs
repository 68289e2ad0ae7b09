//! Symmetric autoencoder compressing 439-wide instruction vectors to 64
//! latent features. Every layer, the latent one included, ends in relu.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::ENCODED_WIDTH;
use crate::error::{Error, Result};
use crate::nn::{Linear, LinearVars};
use crate::optim::{Adam, AdamConfig, ParamMut};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const AE_DIMS: [usize; 4] = [ENCODED_WIDTH, 256, 128, 64];
pub const LATENT_WIDTH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderParams {
    pub encoder: Vec<Linear>,
    pub decoder: Vec<Linear>,
}

impl AutoencoderParams {
    /// The 439-256-128-64 architecture with seeded Glorot weights.
    pub fn init(seed: u64) -> Self {
        Self::with_dims(&AE_DIMS, seed).expect("valid default dims")
    }

    /// Encoder `dims[0] -> ... -> dims[last]`, decoder mirrored.
    pub fn with_dims(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("bad autoencoder dims {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = dims.windows(2).map(|w| Linear::glorot(w[0], w[1], &mut rng)).collect();
        let decoder = dims
            .windows(2)
            .rev()
            .map(|w| Linear::glorot(w[1], w[0], &mut rng))
            .collect();
        Ok(AutoencoderParams { encoder, decoder })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.last().map_or(0, Linear::out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.encoder.iter().chain(&self.decoder).map(Linear::param_count).sum()
    }

    /// Checks that layers chain and that the decoder mirrors the encoder.
    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() || self.encoder.len() != self.decoder.len() {
            return Err(Error::invalid("encoder and decoder depths differ"));
        }
        for (i, l) in self.encoder.iter().chain(&self.decoder).enumerate() {
            l.validate(&format!("layer {i}"))?;
        }
        let chain = |ls: &[Linear]| ls.windows(2).all(|w| w[0].out_dim() == w[1].in_dim());
        if !chain(&self.encoder) || !chain(&self.decoder) {
            return Err(Error::invalid("layer widths do not chain"));
        }
        for (e, d) in self.encoder.iter().zip(self.decoder.iter().rev()) {
            if e.weight.shape() != [d.out_dim(), d.in_dim()] {
                return Err(Error::invalid(format!(
                    "decoder layer {:?} does not mirror encoder layer {:?}",
                    d.weight.shape(),
                    e.weight.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn named_params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for (side, layers) in [("encoder", &mut self.encoder), ("decoder", &mut self.decoder)] {
            for (i, l) in layers.iter_mut().enumerate() {
                out.push((format!("{side}.{i}.weight"), &mut l.weight));
                out.push((format!("{side}.{i}.bias"), &mut l.bias));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: AutoencoderParams = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AeVars {
        AeVars {
            encoder: self.encoder.iter().map(|l| l.bind(tape, trainable)).collect(),
            decoder: self.decoder.iter().map(|l| l.bind(tape, trainable)).collect(),
        }
    }
}

/// Autoencoder parameters registered on a tape, in `named_params_mut` order.
pub struct AeVars {
    pub encoder: Vec<LinearVars>,
    pub decoder: Vec<LinearVars>,
}

impl AeVars {
    pub fn all(&self) -> Vec<Var> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    fn stack(tape: &mut Tape, layers: &[LinearVars], mut x: Var) -> Result<Var> {
        for l in layers {
            let y = l.apply(tape, x)?;
            x = tape.relu(y);
        }
        Ok(x)
    }

    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Self::stack(tape, &self.encoder, x)
    }

    pub fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        Self::stack(tape, &self.decoder, z)
    }

    /// `(1/M) sum_i ||x_i - g(f(x_i))||^2` over the `M` rows of `x`.
    pub fn loss(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let m = tape.value(x).rows();
        let z = self.encode(tape, x)?;
        let r = self.decode(tape, z)?;
        let diff = tape.sub(r, x)?;
        let sq = tape.mul(diff, diff)?;
        let total = tape.sum_all(sq);
        Ok(tape.scale(total, 1.0 / m as f64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Rows per Adam step; `None` trains on the full corpus each step.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Stop once the loss improved by less than `min_improvement` over the
    /// last `patience` epochs. `patience = 0` disables early stopping.
    pub patience: usize,
    pub min_improvement: f64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            epochs: 500,
            lr: 1e-4,
            batch_size: Some(64),
            seed: 0,
            patience: 100,
            min_improvement: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AeTraining {
    pub params: AutoencoderParams,
    /// Corpus MSE at the start of each completed epoch.
    pub history: Vec<f64>,
    /// Corpus MSE after the last update.
    pub final_loss: f64,
    pub stopped_early: bool,
}

fn check_width(params: &AutoencoderParams, x: &Tensor) -> Result<()> {
    if x.cols() != params.input_dim() {
        return Err(Error::shape(
            "autoencoder_input",
            format!("expected width {}, got {}", params.input_dim(), x.cols()),
        ));
    }
    Ok(())
}

pub fn reconstruction_mse(params: &AutoencoderParams, x: &Tensor) -> Result<f64> {
    check_width(params, x)?;
    if x.rows() == 0 {
        return Err(Error::invalid("empty corpus"));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let loss = vars.loss(&mut tape, xv)?;
    Ok(tape.value(loss).item())
}

fn rows_of(x: &Tensor, idx: &[usize]) -> Tensor {
    let c = x.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::new(idx.len(), c, data).expect("sized buffer")
}

fn step(params: &mut AutoencoderParams, adam: &mut Adam, x: Tensor, epoch: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let xv = tape.constant(x);
    let loss = vars.loss(&mut tape, xv)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Diverged { epoch });
    }
    let grads = tape.backward(loss)?;
    let g: Vec<Tensor> = vars.all().into_iter().map(|v| grads.wrt(v)).collect();
    adam.step(&mut params.named_params_mut(), &g)?;
    Ok(value)
}

/// Trains from a seeded initialisation on the rows of `corpus`.
pub fn train_autoencoder(corpus: &Tensor, init: AutoencoderParams, cfg: &AeConfig) -> Result<AeTraining> {
    init.validate()?;
    check_width(&init, corpus)?;
    if corpus.rows() == 0 {
        return Err(Error::invalid("autoencoder corpus is empty"));
    }
    let mut params = init;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.rows()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        match cfg.batch_size {
            None => {
                let loss = step(&mut params, &mut adam, corpus.clone(), epoch)?;
                history.push(loss);
            }
            Some(b) => {
                let loss = reconstruction_mse(&params, corpus)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                history.push(loss);
                order.shuffle(&mut rng);
                for chunk in order.chunks(b.max(1)) {
                    step(&mut params, &mut adam, rows_of(corpus, chunk), epoch)?;
                }
            }
        }
        if cfg.patience > 0 && epoch >= cfg.patience {
            let gain = history[epoch - cfg.patience] - history[epoch];
            if gain < cfg.min_improvement {
                stopped_early = true;
                break;
            }
        }
    }
    let final_loss = reconstruction_mse(&params, corpus)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged { epoch: history.len() });
    }
    Ok(AeTraining {
        params,
        history,
        final_loss,
        stopped_early,
    })
}

/// Latent features `f(x)` for each row of `x`.
pub fn encode_nodes(params: &AutoencoderParams, x: &Tensor) -> Result<Tensor> {
    check_width(params, x)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let z = vars.encode(&mut tape, xv)?;
    Ok(tape.value(z).clone())
}

/// Full reconstruction `g(f(x))`.
pub fn reconstruct(params: &AutoencoderParams, x: &Tensor) -> Result<Tensor> {
    check_width(params, x)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let z = vars.encode(&mut tape, xv)?;
    let r = vars.decode(&mut tape, z)?;
    Ok(tape.value(r).clone())
}
