//! System 2: negation executor, joint representations, gated conjunction
//! over propositions, and the negational feedback loss.

use rand::Rng;

use super::layers;
use super::system1::{image_index, prop_index};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Scalar;

pub(crate) fn add_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    cfg: &ModelConfig,
    negation: bool,
) -> Result<()> {
    let d = cfg.d;
    if negation {
        layers::add_linear(store, rng, "s2.neg.l1", d, d, true)?;
        layers::add_linear(store, rng, "s2.neg.l2", d, d, true)?;
    }
    layers::add_linear(store, rng, "s2.attn.query", 2 * d, 2 * d, false)?;
    layers::add_attention(store, rng, "s2.attn", 2 * d, 1.0)?;
    layers::add_linear(store, rng, "s2.gate", 4 * d, 1, true)?;
    layers::add_linear(store, rng, "s2.out", 2 * d, d, false)?;
    layers::add_linear(store, rng, "s2.head", d, 1, true)
}

/// `W2 · ReLU(W1 · h + b1) + b2` on every grid row.
pub fn negate<T: Scalar>(g: &mut Graph<'_, T>, states: Var) -> Result<Var> {
    let h = layers::linear(g, "s2.neg.l1", states)?;
    let h = g.relu(h)?;
    layers::linear(g, "s2.neg.l2", h)
}

/// For every proposition `i`: `summary_i = softmax(p_i) · images`, then row
/// `(i, l)` is `[summary_i, h[i, l]]`. Input `[M, L]` logits and `[M*L, d]`
/// states; output `[M*L, 2d]`.
pub fn joint_representation<T: Scalar>(
    g: &mut Graph<'_, T>,
    logits: Var,
    states: Var,
    images: Var,
) -> Result<Var> {
    let (m, l) = (g.shape(logits)[0], g.shape(logits)[1]);
    if g.shape(states)[0] != m * l || g.shape(images)[0] != l {
        return Err(Error::shape(
            "joint_representation",
            g.shape(logits),
            g.shape(states),
        ));
    }
    let weights = g.softmax(logits, 1)?;
    let summary = g.matmul(weights, images)?;
    let summary = g.gather_rows(summary, &prop_index(m, l))?;
    g.concat(&[summary, states], 1)
}

/// Per-image queries `W_s · [ctx[l], mean ctx]`, `[L, 2d]`.
pub fn conjunction_query<T: Scalar>(g: &mut Graph<'_, T>, ctx: Var) -> Result<Var> {
    let l = g.shape(ctx)[0];
    let mean = g.mean(ctx, Some(0))?;
    let mean = g.gather_rows(mean, &vec![0; l])?;
    let lifted = g.concat(&[ctx, mean], 1)?;
    layers::linear(g, "s2.attn.query", lifted)
}

/// Attention over the `M` joint rows of each image followed by the gate.
/// Returns `(H, gate)` with shapes `[L, 2d]` and `[L, 1]`.
pub fn attend_and_gate<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    query: Var,
    joint: Var,
    m: usize,
    l: usize,
) -> Result<(Var, Var)> {
    if m == 0 {
        return Err(Error::Invalid(
            "conjunction needs at least one proposition".into(),
        ));
    }
    // Keys grouped image-major so each query sees only its own image.
    let order: Vec<usize> = (0..m * l).map(|r| (r % m) * l + r / m).collect();
    let keys = g.gather_rows(joint, &order)?;
    let h = layers::attention(g, "s2.attn", query, keys, cfg.reasoner_heads, l)?;
    let gate_in = g.concat(&[h, query], 1)?;
    let gate = layers::linear(g, "s2.gate", gate_in)?;
    let gate = g.sigmoid(gate)?;
    Ok((h, gate))
}

/// Outputs of the conjunction step.
pub struct Conjunction {
    pub h_pos: Var,
    pub h_neg: Option<Var>,
    pub gate_pos: Var,
    pub gate_neg: Option<Var>,
    /// `[L, d]`.
    pub h_f: Var,
    /// `[1, L]`.
    pub scores: Var,
}

/// `H_f[l] = W_s2 · (g+ H+ + g- H-)` and the System-2 score head.
pub fn conjunction<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    ctx: Var,
    positives: Var,
    negatives: Option<Var>,
    m: usize,
    l: usize,
) -> Result<Conjunction> {
    let query = conjunction_query(g, ctx)?;
    let (h_pos, gate_pos) = attend_and_gate(g, cfg, query, positives, m, l)?;
    let mut mixed = g.mul(h_pos, gate_pos)?;
    let (mut h_neg, mut gate_neg) = (None, None);
    if let Some(neg) = negatives {
        let (h, gate) = attend_and_gate(g, cfg, query, neg, m, l)?;
        let weighted = g.mul(h, gate)?;
        mixed = g.add(mixed, weighted)?;
        h_neg = Some(h);
        gate_neg = Some(gate);
    }
    let h_f = layers::linear(g, "s2.out", mixed)?;
    let scores = layers::linear(g, "s2.head", h_f)?;
    let scores = g.transpose(scores)?;
    Ok(Conjunction {
        h_pos,
        h_neg,
        gate_pos,
        gate_neg,
        h_f,
        scores,
    })
}

/// `sum_z max(theta - KL(softmax(neg_z) || softmax(pos_z)), 0)` over the
/// proposition rows. The positive side is treated as a constant target.
pub fn negation_feedback_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    neg: Var,
    pos: Var,
    theta: f64,
) -> Result<Var> {
    if !(theta > 0.0) {
        return Err(Error::Config(format!(
            "negation margin must be > 0, got {theta}"
        )));
    }
    if g.shape(neg) != g.shape(pos) {
        return Err(Error::shape(
            "negation_feedback_loss",
            g.shape(neg),
            g.shape(pos),
        ));
    }
    let kl = kl_rows(g, neg, pos)?;
    let gap = g.affine(kl, -1.0, theta)?;
    let hinge = g.relu(gap)?;
    g.sum(hinge, None)
}

/// Row-wise `KL(softmax(neg) || softmax(pos))` with `pos` detached, `[M, 1]`.
pub fn kl_rows<T: Scalar>(g: &mut Graph<'_, T>, neg: Var, pos: Var) -> Result<Var> {
    let pos = g.detach(pos)?;
    let log_n = g.log_softmax(neg, 1)?;
    let log_p = g.log_softmax(pos, 1)?;
    let n = g.softmax(neg, 1)?;
    let diff = g.sub(log_n, log_p)?;
    let terms = g.mul(n, diff)?;
    g.sum(terms, Some(1))
}

/// Rows `(i, l)` of the grid for a fixed image, used by tests and probes.
pub fn image_rows(m: usize, l: usize, image: usize) -> Vec<usize> {
    image_index(m, l)
        .iter()
        .enumerate()
        .filter(|&(_, &c)| c == image)
        .map(|(r, _)| r)
        .collect()
}
