//! Losses, the mini-batch training loop and classification metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Cfg, Dataset, Label};
use crate::model::{
    argmax, derive_seed, forward_on_tape, predict, ForwardVars, GraphBatch, Mode, ModelOutput, ModelVars, MoeModel,
    Variant, NUM_CLASSES, NUM_EXPERTS,
};
use crate::optim::{Adam, AdamConfig};
use crate::tape::{xlogx, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub lb_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            lr: 3e-4,
            dropout: 0.2,
            lb_weight: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.batch_size == 0
            || !positive(self.lr)
            || !(0.0..1.0).contains(&self.dropout)
            || !(self.lb_weight == 0.0 || positive(self.lb_weight))
        {
            return Err(Error::invalid(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

/// The five routing setups compared in the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Uniform,
    Temperature,
    Top1,
    #[serde(rename = "top2-nolb")]
    Top2NoLb,
    Top2Lb,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Uniform,
        Scenario::Temperature,
        Scenario::Top1,
        Scenario::Top2NoLb,
        Scenario::Top2Lb,
    ];

    pub fn variant(self) -> Variant {
        match self {
            Scenario::Uniform => Variant::Uniform,
            Scenario::Temperature => Variant::Temperature { t: 0.5 },
            Scenario::Top1 => Variant::TopK { k: 1 },
            Scenario::Top2NoLb | Scenario::Top2Lb => Variant::TopK { k: 2 },
        }
    }

    pub fn uses_lb(self) -> bool {
        !matches!(self, Scenario::Uniform | Scenario::Top2NoLb)
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Uniform => "uniform",
            Scenario::Temperature => "temperature",
            Scenario::Top1 => "top1",
            Scenario::Top2NoLb => "top2-nolb",
            Scenario::Top2Lb => "top2-lb",
        }
    }

    pub fn from_name(name: &str) -> Option<Scenario> {
        Scenario::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// `sum_e q_e log(6 q_e)` with `q` the batch mean of the `[G, 6]` gates.
pub fn lb_loss(tape: &mut Tape, gates: Var) -> Var {
    let g = tape.value(gates).rows();
    let total = tape.sum_rows(gates);
    let q = tape.scale(total, 1.0 / g as f64);
    let qlogq = tape.xlogx(q);
    let entropy_part = tape.sum_all(qlogq);
    let mass = tape.sum_all(q);
    let shift = tape.scale(mass, (NUM_EXPERTS as f64).ln());
    tape.add(entropy_part, shift).expect("scalar shapes")
}

/// Plain evaluation of [`lb_loss`].
pub fn lb_loss_value(gates: &[Vec<f64>]) -> Result<f64> {
    if gates.is_empty() {
        return Err(Error::invalid("empty gate batch"));
    }
    let mut q = [0.0; NUM_EXPERTS];
    for a in gates {
        if a.len() != NUM_EXPERTS {
            return Err(Error::invalid(format!("gate of length {}", a.len())));
        }
        for (qe, ae) in q.iter_mut().zip(a) {
            *qe += ae / gates.len() as f64;
        }
    }
    Ok(q.iter().map(|&x| xlogx(x) + x * (NUM_EXPERTS as f64).ln()).sum())
}

/// Mean softmax cross-entropy of `[G, 2]` logits.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[Label]) -> Result<Var> {
    let g = tape.value(logits).rows();
    if labels.len() != g {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for {g} rows", labels.len()),
        ));
    }
    let mut onehot = Tensor::zeros(g, NUM_CLASSES);
    for (r, l) in labels.iter().enumerate() {
        onehot.set(r, l.index(), 1.0);
    }
    let ls = tape.log_softmax_rows(logits);
    let oh = tape.constant(onehot);
    let picked = tape.mul(ls, oh)?;
    let s = tape.sum_all(picked);
    Ok(tape.scale(s, -1.0 / g as f64))
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub lb: Var,
}

/// `CE + lb_weight * LB` for a forward pass over a labelled batch.
pub fn total_loss(tape: &mut Tape, fv: &ForwardVars, labels: &[Label], lb_weight: f64) -> Result<LossVars> {
    let ce = cross_entropy(tape, fv.logits, labels)?;
    let lb = lb_loss(tape, fv.gates);
    let weighted = tape.scale(lb, lb_weight);
    let total = tape.add(ce, weighted)?;
    Ok(LossVars { total, ce, lb })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch means of the total loss, its CE part and the LB term.
    pub loss: f64,
    pub ce: f64,
    pub lb: f64,
    /// Accuracy of the training-mode forward passes seen during the epoch.
    pub train_acc: f64,
    pub mean_gate: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MoeModel,
    pub history: Vec<EpochRecord>,
}

pub fn train(ds: &Dataset, init: MoeModel, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    init.validate()?;
    let counts = ds.class_counts();
    if counts.contains(&0) {
        return Err(Error::invalid(format!(
            "training split needs both classes, got counts {counts:?}"
        )));
    }
    let mut model = init;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut ce_sum, mut lb_sum) = (0.0, 0.0, 0.0);
        let mut correct = 0;
        let mut gate_sum = [0.0; NUM_EXPERTS];
        let batches = order.chunks(cfg.batch_size);
        let num_batches = batches.len();
        for chunk in batches {
            let graphs: Vec<&Cfg> = chunk.iter().map(|&i| &ds.graphs[i]).collect();
            let labels: Vec<Label> = graphs.iter().map(|g| g.label()).collect();
            let batch = GraphBatch::new(&graphs)?;
            let mut tape = Tape::new();
            let vars = ModelVars::bind(&model, &mut tape, true);
            let mode = Mode::Train {
                dropout: cfg.dropout,
                seed: derive_seed(cfg.seed, step),
            };
            let fv = forward_on_tape(&mut tape, &vars, &batch, None, &model.config, mode)?;
            let lv = total_loss(&mut tape, &fv, &labels, cfg.lb_weight)?;
            let loss = tape.value(lv.total).item();
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss;
            ce_sum += tape.value(lv.ce).item();
            lb_sum += tape.value(lv.lb).item();
            let logits = tape.value(fv.logits);
            for (r, l) in labels.iter().enumerate() {
                if argmax(logits.row(r)) == l.index() {
                    correct += 1;
                }
            }
            let gates = tape.value(fv.gates);
            for r in 0..gates.rows() {
                for (s, a) in gate_sum.iter_mut().zip(gates.row(r)) {
                    *s += a;
                }
            }
            let grads = tape.backward(lv.total)?;
            let g: Vec<Tensor> = vars.all().into_iter().map(|v| grads.wrt(v)).collect();
            adam.step(&mut model.named_params_mut(), &g)?;
            step += 1;
        }
        let nb = num_batches as f64;
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / nb,
            ce: ce_sum / nb,
            lb: lb_sum / nb,
            train_acc: correct as f64 / ds.len() as f64,
            mean_gate: gate_sum.iter().map(|s| s / ds.len() as f64).collect(),
        });
    }
    Ok(TrainOutcome { model, history })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Binary metrics with malicious as the positive class for the confusion
/// counts. Undefined ratios are reported as 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub benign: ClassMetrics,
    pub malicious: ClassMetrics,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn class_metrics(tp: usize, fp: usize, fn_: usize) -> ClassMetrics {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics { precision, recall, f1 }
}

pub fn classify_metrics(preds: &[Label], labels: &[Label]) -> Result<MetricsReport> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::invalid(format!(
            "need equal, nonempty prediction and label lists, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p, l) {
            (Label::Malicious, Label::Malicious) => tp += 1,
            (Label::Benign, Label::Benign) => tn += 1,
            (Label::Malicious, Label::Benign) => fp += 1,
            (Label::Benign, Label::Malicious) => fn_ += 1,
        }
    }
    Ok(MetricsReport {
        accuracy: ratio(tp + tn, preds.len()),
        tp,
        tn,
        fp,
        fn_,
        malicious: class_metrics(tp, fp, fn_),
        benign: class_metrics(tn, fn_, fp),
    })
}

/// Evaluation-mode predictions and metrics on a dataset.
pub fn evaluate(model: &MoeModel, ds: &Dataset) -> Result<(MetricsReport, Vec<ModelOutput>)> {
    let graphs: Vec<&Cfg> = ds.graphs.iter().collect();
    let outputs = predict(model, &graphs)?;
    let preds: Vec<Label> = outputs
        .iter()
        .map(|o| Label::from_index(o.predicted).expect("binary head"))
        .collect();
    Ok((classify_metrics(&preds, &ds.labels())?, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN6: f64 = 1.791_759_469_228_055;

    #[test]
    fn lb_examples() {
        assert!(lb_loss_value(&[vec![1.0 / 6.0; 6]]).unwrap().abs() < 1e-15);
        let one_hot = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert!((lb_loss_value(&[one_hot.clone(), one_hot]).unwrap() - LN6).abs() < 1e-12);
        let a = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let b = vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        assert!((lb_loss_value(&[a, b]).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lb_tape_matches_plain() {
        let rows = vec![vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0], vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.1]];
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::from_rows(&rows).unwrap());
        let l = lb_loss(&mut tape, g);
        assert!((tape.value(l).item() - lb_loss_value(&rows).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn metrics_example() {
        use Label::{Benign as B, Malicious as M};
        let labels = [M, M, M, B, B, B, B, B, B, B];
        let preds = [M, M, B, M, B, B, B, B, B, B];
        let r = classify_metrics(&preds, &labels).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_, r.tn), (2, 1, 1, 6));
        for v in [r.malicious.precision, r.malicious.recall, r.malicious.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(r.accuracy, 0.8);
    }

    #[test]
    fn no_positive_predictions() {
        use Label::{Benign as B, Malicious as M};
        let r = classify_metrics(&[B, B], &[M, B]).unwrap();
        assert_eq!(r.malicious.precision, 0.0);
        assert_eq!(r.malicious.f1, 0.0);
        assert!(classify_metrics(&[], &[]).is_err());
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(Scenario::from_name(s.name()), Some(s));
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        assert!(!Scenario::Top2NoLb.uses_lb() && Scenario::Top2Lb.uses_lb());
    }
}
