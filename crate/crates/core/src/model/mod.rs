//! The reasoning head: proposition parsing, System 1, System 2 and the
//! combiner, assembled into one forward pass per instance.

pub mod combiner;
pub(crate) mod layers;
pub mod proposition;
pub mod system1;
pub mod system2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub use combiner::Combined;
pub use system2::Conjunction;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    /// Proposition slots and count classes.
    pub max_props: usize,
    /// Size of the candidate position table.
    pub max_candidates: usize,
    /// Heads of every width-`d` attention block.
    pub heads: usize,
    /// Heads of the width-`2d` conjunction attention.
    pub reasoner_heads: usize,
    /// Feed-forward hidden width as a multiple of `d`.
    pub ffn_mult: usize,
    pub parse_layers: usize,
    pub interactor_layers: usize,
    /// Fusion scale.
    pub lambda: f64,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    /// Feed the cross-attention output itself, not its difference from the
    /// self-attention output, to the parser's feed-forward block.
    pub parse_residual: bool,
    /// Run the System-1 transformer on each proposition's `L` tokens
    /// separately instead of on all `M * L` tokens jointly.
    pub per_proposition_interaction: bool,
    /// Softmax the pooling and proposition weights of the combiner.
    pub normalized_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            max_props: 10,
            max_candidates: 10,
            heads: 4,
            reasoner_heads: 4,
            ffn_mult: 2,
            parse_layers: 2,
            interactor_layers: 2,
            lambda: 1000.0,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
            parse_residual: false,
            per_proposition_interaction: false,
            normalized_weights: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.max_props == 0 || self.max_candidates == 0 {
            return bad(format!(
                "d={}, max_props={}, max_candidates={} must be positive",
                self.d, self.max_props, self.max_candidates
            ));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("{} heads do not divide d={}", self.heads, self.d));
        }
        if self.reasoner_heads == 0 || (2 * self.d) % self.reasoner_heads != 0 {
            return bad(format!(
                "{} reasoner heads do not divide 2d={}",
                self.reasoner_heads,
                2 * self.d
            ));
        }
        if self.ffn_mult == 0 || self.parse_layers == 0 || self.interactor_layers == 0 {
            return bad("ffn_mult and layer counts must be positive".into());
        }
        if !(self.lambda > 0.0) || !(self.layer_norm_eps > 0.0) {
            return bad(format!(
                "lambda={} and eps={} must be > 0",
                self.lambda, self.layer_norm_eps
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.d
    }

    pub(crate) fn layer_spec(&self) -> layers::LayerSpec {
        layers::LayerSpec {
            heads: self.heads,
            dropout: self.dropout,
            eps: self.layer_norm_eps,
        }
    }
}

/// Which parts of the model exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    /// Compound-text context branch and modifier in System 1.
    pub modifier: bool,
    /// Negation executor and its loss.
    pub negation: bool,
    /// Reasoner and combiner. Without it System 1 is read out by mean pooling.
    pub system2: bool,
}

impl Arch {
    pub const FULL: Arch = Arch {
        modifier: true,
        negation: true,
        system2: true,
    };

    fn context(self) -> bool {
        self.modifier || self.system2
    }
}

impl Default for Arch {
    fn default() -> Self {
        Arch::FULL
    }
}

/// Loss hyperparameters and term weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Margin of the negational feedback loss.
    pub theta: f64,
    /// Cosine margin of the proposition uniformity loss.
    pub tau: f64,
    pub match_weight: f64,
    pub negation_weight: f64,
    pub uniformity_weight: f64,
    pub count_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            theta: 0.2,
            tau: 0.3,
            match_weight: 1.0,
            negation_weight: 1.0,
            uniformity_weight: 1.0,
            count_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0) {
            return Err(Error::Config(format!(
                "theta must be > 0, got {}",
                self.theta
            )));
        }
        let w = [
            self.tau,
            self.match_weight,
            self.negation_weight,
            self.uniformity_weight,
            self.count_weight,
        ];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(
                "loss weights and tau must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Embedding inputs of one instance at the working precision.
pub struct Inputs<T: Scalar> {
    pub text: Tensor<T>,
    pub images: Tensor<T>,
    pub cross: Tensor<T>,
}

impl<T: Scalar> Inputs<T> {
    pub fn from_instance(inst: &Instance) -> Self {
        Inputs {
            text: inst.text.cast(),
            images: inst.images.cast(),
            cross: inst.cross.cast(),
        }
    }
}

/// Graph nodes of one forward pass.
pub struct Forward {
    /// Active proposition count.
    pub m: usize,
    pub candidates: usize,
    /// `[1, K]`.
    pub count_logits: Var,
    /// Active slots, `[M, d]`.
    pub slots: Var,
    /// `[M*L, d]`.
    pub fused: Var,
    /// System-1 states after the modifier, `[M*L, d]`.
    pub states: Var,
    /// `[L, d]`.
    pub context: Option<Var>,
    /// `[M, L]`.
    pub p_s1: Var,
    /// `[M, L]`.
    pub p_neg: Option<Var>,
    pub conjunction: Option<Conjunction>,
    pub combined: Option<Combined>,
}

impl Forward {
    /// Final `[1, L]` logits when the reasoner exists.
    pub fn final_scores(&self) -> Option<Var> {
        self.combined.as_ref().map(|c| c.scores)
    }

    pub fn system2_scores(&self) -> Option<Var> {
        self.conjunction.as_ref().map(|c| c.scores)
    }
}

/// Loss nodes of one instance.
pub struct Losses {
    pub matching: Var,
    pub negation: Option<Var>,
    pub uniformity: Var,
    pub count: Var,
    pub total: Var,
}

/// Model definition: configuration plus architecture switches.
#[derive(Clone, Debug, PartialEq)]
pub struct Ndcr {
    pub config: ModelConfig,
    pub arch: Arch,
}

impl Ndcr {
    pub fn new(config: ModelConfig, arch: Arch) -> Result<Self> {
        config.validate()?;
        Ok(Ndcr { config, arch })
    }

    /// Fresh parameters. Weights are Xavier-uniform, biases zero, layer-norm
    /// gains one; the seeds and position table are Gaussian.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        proposition::add_params(&mut store, &mut rng, &self.config)?;
        system1::add_params(
            &mut store,
            &mut rng,
            &self.config,
            self.arch.context(),
            self.arch.modifier,
        )?;
        if self.arch.system2 {
            system2::add_params(&mut store, &mut rng, &self.config, self.arch.negation)?;
            combiner::add_params(&mut store, &mut rng, &self.config)?;
        }
        Ok(store)
    }

    /// Check that `store` holds every parameter this model reads with the
    /// expected shape.
    pub fn check_params<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        let reference = self.init_params::<T>(0)?;
        for (name, t) in reference.iter() {
            let got = store.require(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// One forward pass. `active` fixes the proposition count (teacher
    /// forcing); otherwise the count head's argmax is used. `sig_override`
    /// pins the combiner gate.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        inputs: &Inputs<T>,
        active: Option<usize>,
        sig_override: Option<f64>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let d = cfg.d;
        if inputs.text.cols() != d || inputs.images.cols() != d || inputs.cross.cols() != d {
            return Err(Error::Dimension(format!(
                "model width d={d}, inputs have text {:?}, images {:?}, cross {:?}",
                inputs.text.shape(),
                inputs.images.shape(),
                inputs.cross.shape()
            )));
        }
        let l = inputs.images.rows();
        if inputs.cross.rows() != l {
            return Err(Error::shape(
                "forward",
                inputs.images.shape(),
                inputs.cross.shape(),
            ));
        }
        let text = g.constant(inputs.text.clone())?;
        let images = g.constant(inputs.images.clone())?;
        let cross = g.constant(inputs.cross.clone())?;

        let count_logits = proposition::predict_count(g, text)?;
        let m = match active {
            Some(m) => m,
            None => g.value(count_logits).argmax_rows()[0] + 1,
        };
        if m == 0 || m > cfg.max_props {
            return Err(Error::Invalid(format!(
                "active proposition count {m} outside 1..={}",
                cfg.max_props
            )));
        }
        let all_slots = proposition::parse_propositions(g, cfg, text)?;
        let slots = g.slice_rows(all_slots, 0, m)?;

        let fused = system1::fuse(g, slots, images, cfg.lambda)?;
        let ctx_in = if self.arch.context() {
            Some(cross)
        } else {
            None
        };
        let (h_p, context) = system1::contextual_interact(g, cfg, fused, ctx_in, m, l)?;
        let states = match (self.arch.modifier, context) {
            (true, Some(ctx)) => system1::modify(g, h_p, ctx, m, l)?,
            _ => h_p,
        };
        let p_s1 = system1::score(g, states, m, l)?;

        let (mut p_neg, mut conjunction, mut combined) = (None, None, None);
        if self.arch.system2 {
            let ctx = context.expect("reasoner runs with the context branch");
            let positives = system2::joint_representation(g, p_s1, states, images)?;
            let negatives = if self.arch.negation {
                let h_n = system2::negate(g, states)?;
                let p_n = system1::score(g, h_n, m, l)?;
                p_neg = Some(p_n);
                Some(system2::joint_representation(g, p_n, h_n, images)?)
            } else {
                None
            };
            let conj = system2::conjunction(g, cfg, ctx, positives, negatives, m, l)?;
            let hf_w = combiner::pool(g, conj.h_f, 1, cfg.normalized_weights)?;
            let h_w = combiner::pool(g, states, m, cfg.normalized_weights)?;
            combined = Some(combiner::combine(
                g,
                cfg,
                hf_w,
                h_w,
                p_s1,
                conj.scores,
                sig_override,
            )?);
            conjunction = Some(conj);
        }
        Ok(Forward {
            m,
            candidates: l,
            count_logits,
            slots,
            fused,
            states,
            context,
            p_s1,
            p_neg,
            conjunction,
            combined,
        })
    }

    /// Training objective of one instance with gold image `gold` and true
    /// proposition count `count`.
    pub fn losses<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        fwd: &Forward,
        gold: usize,
        count: usize,
        cfg: &LossConfig,
    ) -> Result<Losses> {
        if count == 0 || count > self.config.max_props {
            return Err(Error::Invalid(format!(
                "count {count} outside 1..={}",
                self.config.max_props
            )));
        }
        let matching = match_loss(g, fwd, gold)?;
        let negation = match fwd.p_neg {
            Some(p_n) => Some(system2::negation_feedback_loss(
                g, p_n, fwd.p_s1, cfg.theta,
            )?),
            None => None,
        };
        let uniformity = proposition::uniformity_loss(g, fwd.slots, cfg.tau)?;
        let count_loss = cross_entropy(g, fwd.count_logits, count - 1)?;

        let mut total = g.scale(matching, cfg.match_weight)?;
        if let Some(n) = negation {
            let n = g.scale(n, cfg.negation_weight)?;
            total = g.add(total, n)?;
        }
        let u = g.scale(uniformity, cfg.uniformity_weight)?;
        total = g.add(total, u)?;
        let c = g.scale(count_loss, cfg.count_weight)?;
        total = g.add(total, c)?;
        Ok(Losses {
            matching,
            negation,
            uniformity,
            count: count_loss,
            total,
        })
    }
}

/// Sum over rows of `-log softmax(logits)[gold]`.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, gold: usize) -> Result<Var> {
    let (rows, cols) = (g.shape(logits)[0], g.shape(logits)[1]);
    if gold >= cols {
        return Err(Error::Invalid(format!(
            "gold index {gold} outside 0..{cols}"
        )));
    }
    let logp = g.log_softmax(logits, 1)?;
    let mut onehot = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        onehot.data_mut()[r * cols + gold] = -T::one();
    }
    let onehot = g.constant(onehot)?;
    let picked = g.mul(logp, onehot)?;
    g.sum(picked, None)
}

/// Cross-entropy over every proposition row of System 1 and, when present,
/// the System-2 and final scores.
pub fn match_loss<T: Scalar>(g: &mut Graph<'_, T>, fwd: &Forward, gold: usize) -> Result<Var> {
    let mut loss = cross_entropy(g, fwd.p_s1, gold)?;
    for scores in [fwd.system2_scores(), fwd.final_scores()]
        .into_iter()
        .flatten()
    {
        let ce = cross_entropy(g, scores, gold)?;
        loss = g.add(loss, ce)?;
    }
    Ok(loss)
}
