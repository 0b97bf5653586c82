//! Training loop, evaluation and reports.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{config_hash, instance_seed, Instance};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{system2, Arch, Inputs, LossConfig, ModelConfig, Ndcr};
use crate::optim::{adam_step, Gradients, OptimizerConfig};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    System1Meanpool,
    System2Only,
    NoNegation,
    NoModifier,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::System1Meanpool,
        Ablation::System2Only,
        Ablation::NoNegation,
        Ablation::NoModifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::System1Meanpool => "system1-meanpool",
            Ablation::System2Only => "system2-only",
            Ablation::NoNegation => "no-negation",
            Ablation::NoModifier => "no-modifier",
        }
    }

    /// Parameters that exist when training this variant.
    pub fn arch(self) -> Arch {
        match self {
            Ablation::Full | Ablation::System2Only => Arch::FULL,
            Ablation::NoNegation => Arch {
                negation: false,
                ..Arch::FULL
            },
            Ablation::System1Meanpool => Arch {
                modifier: true,
                negation: false,
                system2: false,
            },
            Ablation::NoModifier => Arch {
                modifier: false,
                negation: false,
                system2: false,
            },
        }
    }

    pub fn readout(self) -> Readout {
        match self {
            Ablation::Full | Ablation::NoNegation => Readout::Final,
            Ablation::System2Only => Readout::System2,
            Ablation::System1Meanpool | Ablation::NoModifier => Readout::MeanPool,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

/// How a prediction is read off the score bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readout {
    /// Argmax of the fused scores.
    Final,
    /// Argmax of the System-2 scores.
    System2,
    /// Argmax of the mean over propositions of `softmax(p_i)`.
    MeanPool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub ablation: Ablation,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.effective_model().validate()
    }

    /// Model config with the optimizer's dropout rate.
    pub fn effective_model(&self) -> ModelConfig {
        ModelConfig {
            dropout: self.optimizer.dropout,
            ..self.model.clone()
        }
    }

    pub fn ndcr(&self) -> Result<Ndcr> {
        Ndcr::new(self.effective_model(), self.ablation.arch())
    }

    pub fn hash(&self) -> u64 {
        config_hash(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_match: f64,
    pub loss_negation: f64,
    pub loss_uniformity: f64,
    pub loss_count: f64,
    pub val_accuracy: f64,
    pub val_count_accuracy: f64,
    pub val_negation_hinge: Option<f64>,
    pub config_hash: u64,
}

/// Accuracy of one true-count bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub count: usize,
    pub instances: usize,
    /// Instances whose gold image was retrieved.
    pub correct: usize,
    pub accuracy: f64,
    /// Instances whose count was predicted exactly.
    pub count_correct: usize,
    pub count_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ablation: Ablation,
    pub instances: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Buckets for true counts 1..=5 plus any larger count present.
    pub by_count: Vec<Bucket>,
    pub count_accuracy: f64,
    /// `confusion[true - 1][predicted - 1]` over counts `1..=K`.
    pub count_confusion: Vec<Vec<usize>>,
    /// Mean over propositions of `max(theta - KL, 0)`, when the negation
    /// branch exists.
    pub negation_hinge: Option<f64>,
    pub config_hash: u64,
}

impl EvalReport {
    /// Table with one row per count bucket and a total row.
    pub fn table(&self) -> String {
        let mut s =
            String::from("count  instances  retrieved  accuracy  count-correct  count-accuracy\n");
        for b in &self.by_count {
            s += &format!(
                "{:>5}  {:>9}  {:>9}  {:>8.4}  {:>13}  {:>14.4}\n",
                b.count, b.instances, b.correct, b.accuracy, b.count_correct, b.count_accuracy
            );
        }
        let cc: usize = self.by_count.iter().map(|b| b.count_correct).sum();
        s += &format!(
            "{:>5}  {:>9}  {:>9}  {:>8.4}  {:>13}  {:>14.4}\n",
            "total", self.instances, self.correct, self.accuracy, cc, self.count_accuracy
        );
        s
    }
}

/// Prediction for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub image: usize,
    pub count: usize,
    pub negation_hinge_sum: Option<f64>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Forward one instance at inference (no dropout, predicted count).
pub fn predict<T: Scalar>(
    ndcr: &Ndcr,
    store: &ParamStore<T>,
    inst: &Instance,
    readout: Readout,
    theta: f64,
) -> Result<Prediction> {
    let mut g = Graph::with_store(store, None);
    let inputs = Inputs::from_instance(inst);
    let fwd = ndcr.forward(&mut g, &inputs, None, None)?;
    let scores = match readout {
        Readout::Final => fwd
            .final_scores()
            .ok_or_else(|| Error::Config("final scores need the reasoner".into()))?,
        Readout::System2 => fwd
            .system2_scores()
            .ok_or_else(|| Error::Config("System-2 scores need the reasoner".into()))?,
        Readout::MeanPool => {
            let p = g.softmax(fwd.p_s1, 1)?;
            g.mean(p, Some(0))?
        }
    };
    let image = g.value(scores).argmax_rows()[0];
    let negation_hinge_sum = match fwd.p_neg {
        Some(p_n) => {
            let kl = system2::kl_rows(&mut g, p_n, fwd.p_s1)?;
            Some(
                g.value(kl)
                    .data()
                    .iter()
                    .map(|&k| (theta - k.as_f64()).max(0.0))
                    .sum(),
            )
        }
        None => None,
    };
    Ok(Prediction {
        image,
        count: fwd.m,
        negation_hinge_sum,
    })
}

/// Evaluate `store` on `data` under an ablation's architecture and readout.
pub fn evaluate<T: Scalar>(
    data: &[Instance],
    store: &ParamStore<T>,
    model: &ModelConfig,
    loss: &LossConfig,
    ablation: Ablation,
) -> Result<EvalReport> {
    let ndcr = Ndcr::new(model.clone(), ablation.arch())?;
    ndcr.check_params(store)?;
    if let Some(inst) = data.first() {
        if inst.d() != model.d {
            return Err(Error::Dimension(format!(
                "model width d={} but dataset has d={}",
                model.d,
                inst.d()
            )));
        }
    }
    let readout = ablation.readout();
    let preds: Vec<Prediction> = data
        .par_iter()
        .map(|inst| predict(&ndcr, store, inst, readout, loss.theta))
        .collect::<Result<_>>()?;

    let k = model.max_props;
    let top = data.iter().map(|i| i.count).max().unwrap_or(0).max(5);
    let mut buckets: Vec<Bucket> = (1..=top)
        .map(|count| Bucket {
            count,
            instances: 0,
            correct: 0,
            accuracy: 0.0,
            count_correct: 0,
            count_accuracy: 0.0,
        })
        .collect();
    let mut confusion = vec![vec![0usize; k]; k];
    let (mut correct, mut count_correct) = (0, 0);
    let (mut hinge, mut props) = (0.0, 0usize);
    for (inst, p) in data.iter().zip(&preds) {
        let b = &mut buckets[inst.count - 1];
        b.instances += 1;
        if p.image == inst.gold {
            b.correct += 1;
            correct += 1;
        }
        if p.count == inst.count {
            b.count_correct += 1;
            count_correct += 1;
        }
        if inst.count <= k {
            confusion[inst.count - 1][p.count - 1] += 1;
        }
        if let Some(h) = p.negation_hinge_sum {
            hinge += h;
            props += p.count;
        }
    }
    for b in &mut buckets {
        b.accuracy = ratio(b.correct, b.instances);
        b.count_accuracy = ratio(b.count_correct, b.instances);
    }
    buckets.retain(|b| b.count <= 5 || b.instances > 0);
    Ok(EvalReport {
        ablation,
        instances: data.len(),
        correct,
        accuracy: ratio(correct, data.len()),
        by_count: buckets,
        count_accuracy: ratio(count_correct, data.len()),
        count_confusion: confusion,
        negation_hinge: (props > 0).then(|| hinge / props as f64),
        config_hash: 0,
    })
}

/// Loss terms of one instance, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub matching: f64,
    pub negation: f64,
    pub uniformity: f64,
    pub count: f64,
}

impl std::ops::AddAssign for LossValues {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.matching += o.matching;
        self.negation += o.negation;
        self.uniformity += o.uniformity;
        self.count += o.count;
    }
}

/// Loss values and parameter gradients of one instance under teacher
/// forcing. `dropout_seed` enables dropout.
pub fn instance_gradients<T: Scalar>(
    ndcr: &Ndcr,
    store: &ParamStore<T>,
    inst: &Instance,
    loss: &LossConfig,
    dropout_seed: Option<u64>,
) -> Result<(LossValues, Vec<Tensor<T>>)> {
    let mut g = Graph::with_store(store, dropout_seed.map(ChaCha8Rng::seed_from_u64));
    let inputs = Inputs::from_instance(inst);
    let fwd = ndcr.forward(&mut g, &inputs, Some(inst.count), None)?;
    let l = ndcr.losses(&mut g, &fwd, inst.gold, inst.count, loss)?;
    let v = |x| g.value(x).item().as_f64();
    let values = LossValues {
        total: v(l.total),
        matching: v(l.matching),
        negation: l.negation.map_or(0.0, v),
        uniformity: v(l.uniformity),
        count: v(l.count),
    };
    if !values.total.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let grads = g.backward(l.total)?;
    Ok((values, grads.for_params(&g)))
}

/// Result of a training run.
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub best: ParamStore<f32>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub metrics: Vec<EpochMetrics>,
    /// Validation report of the freshly initialized model.
    pub initial: EvalReport,
}

/// Train on `train`, selecting the epoch with the best accuracy on `val`.
/// `on_epoch` sees every epoch's metrics as they are produced.
pub fn train(
    train: &[Instance],
    val: &[Instance],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let ndcr = cfg.ndcr()?;
    let model = ndcr.config.clone();
    for (name, set) in [("train", train), ("validation", val)] {
        if let Some(bad) = set.iter().find(|i| i.d() != model.d) {
            return Err(Error::Dimension(format!(
                "{name} instance has d={}, model has d={}",
                bad.d(),
                model.d
            )));
        }
        if let Some(bad) = set
            .iter()
            .find(|i| i.count > model.max_props || i.candidates() > model.max_candidates)
        {
            return Err(Error::Dimension(format!(
                "{name} instance with count {} and {} candidates exceeds the model limits",
                bad.count,
                bad.candidates()
            )));
        }
    }
    let opt = &cfg.optimizer;
    let hash = cfg.hash();
    let mut store = ndcr.init_params::<f32>(opt.seed)?;
    let initial = evaluate(val, &store, &model, &cfg.loss, cfg.ablation)?;
    let mut best = (store.clone(), 0usize, f64::NEG_INFINITY);
    let mut metrics = Vec::with_capacity(opt.max_epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    for epoch in 0..opt.max_epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(instance_seed(opt.seed, epoch as u64));
        order.shuffle(&mut shuffle);
        let epoch_seed = instance_seed(opt.seed ^ 0xd0_d0, epoch as u64);
        let mut sums = LossValues::default();
        for batch in order.chunks(opt.batch_size) {
            let results: Vec<(LossValues, Vec<Tensor<f32>>)> = batch
                .par_iter()
                .map(|&i| {
                    let seed = (opt.dropout > 0.0).then(|| instance_seed(epoch_seed, i as u64));
                    instance_gradients(&ndcr, &store, &train[i], &cfg.loss, seed)
                })
                .collect::<Result<_>>()?;
            let mut iter = results.into_iter();
            let (first_loss, mut acc) = iter.next().expect("non-empty batch");
            sums += first_loss;
            for (values, grads) in iter {
                sums += values;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.add_assign(g);
                }
            }
            let scale = 1.0 / batch.len() as f32;
            for a in &mut acc {
                for v in a.data_mut() {
                    *v *= scale;
                }
            }
            step += 1;
            let grads = Gradients::aligned(&store, acc);
            adam_step(&mut store, &grads, step, epoch, opt)?;
        }
        let report = evaluate(val, &store, &model, &cfg.loss, cfg.ablation)?;
        let n = train.len() as f64;
        let m = EpochMetrics {
            epoch: epoch + 1,
            lr: opt.lr_at(epoch),
            loss_total: sums.total / n,
            loss_match: sums.matching / n,
            loss_negation: sums.negation / n,
            loss_uniformity: sums.uniformity / n,
            loss_count: sums.count / n,
            val_accuracy: report.accuracy,
            val_count_accuracy: report.count_accuracy,
            val_negation_hinge: report.negation_hinge,
            config_hash: hash,
        };
        on_epoch(&m);
        if report.accuracy > best.2 {
            best = (store.clone(), epoch + 1, report.accuracy);
        }
        metrics.push(m);
    }
    let (mut best_store, best_epoch, best_val_accuracy) = best;
    best_store.reset_moments();
    Ok(TrainOutcome {
        best: best_store,
        best_epoch,
        best_val_accuracy,
        metrics,
        initial,
    })
}
