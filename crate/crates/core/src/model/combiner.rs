//! Fusion of System-1 and System-2 scores into the final ranking.

use rand::Rng;

use super::layers;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub(crate) fn add_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    cfg: &ModelConfig,
) -> Result<()> {
    let d = cfg.d;
    for (w, b, fan_in, fan_out) in [
        ("wl", "bl", d, 1),
        ("v", "bv", d, 1),
        ("wf", "bf", 2 * d, 1),
    ] {
        store.insert(
            format!("comb.{w}"),
            crate::params::init::xavier(rng, fan_in, fan_out),
        )?;
        store.insert(format!("comb.{b}"), crate::params::init::zeros(1, fan_out))?;
    }
    layers::add_linear(store, rng, "comb.wa", d, d, false)?;
    layers::add_linear(store, rng, "comb.wb", d, d, false)?;
    store.insert("comb.bc", crate::params::init::zeros(1, d))
}

fn affine_param<T: Scalar>(g: &mut Graph<'_, T>, w: &str, b: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("comb.{w}"))?;
    let b = g.param(&format!("comb.{b}"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Attention pooling of `blocks` consecutive row groups of `h`: each group
/// of `n` rows collapses to `sum_l w_l h_l` with `w = softmax(h W_l + b_l)`.
/// Returns `[blocks, d]`.
pub fn pool<T: Scalar>(
    g: &mut Graph<'_, T>,
    h: Var,
    blocks: usize,
    normalized: bool,
) -> Result<Var> {
    let rows = g.shape(h)[0];
    if blocks == 0 || rows % blocks != 0 {
        return Err(Error::Invalid(format!(
            "pool: {rows} rows in {blocks} blocks"
        )));
    }
    let n = rows / blocks;
    let s = affine_param(g, "wl", "bl", h)?;
    let s = g.reshape(s, blocks, n)?;
    let w = if normalized { g.softmax(s, 1)? } else { s };
    let w = g.reshape(w, rows, 1)?;
    let weighted = g.mul(h, w)?;
    let mut sel = Tensor::zeros(&[blocks, rows]);
    for r in 0..rows {
        sel.data_mut()[(r / n) * rows + r] = T::one();
    }
    let sel = g.constant(sel)?;
    g.matmul(sel, weighted)
}

/// Outputs of the final fusion.
pub struct Combined {
    /// `[1, L]`.
    pub scores: Var,
    /// Proposition weights, `[M, 1]`.
    pub weights: Var,
    /// `[1, 1]`.
    pub sig: Var,
    /// Weighted System-1 aggregate, `[1, L]`.
    pub system1: Var,
}

/// `P_f = sig * sum_j S_j p_j + (1 - sig) * P_s2`.
///
/// `hf_w` is `[1, d]`, `h_w` is `[M, d]`, `p_s1` is `[M, L]` and `p_s2` is
/// `[1, L]`. `sig_override` replaces the learned gate with a constant.
pub fn combine<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    hf_w: Var,
    h_w: Var,
    p_s1: Var,
    p_s2: Var,
    sig_override: Option<f64>,
) -> Result<Combined> {
    let m = g.shape(h_w)[0];
    if m == 0 || g.shape(p_s1)[0] != m {
        return Err(Error::shape("combine", g.shape(h_w), g.shape(p_s1)));
    }
    let a = layers::linear(g, "comb.wa", hf_w)?;
    let b = layers::linear(g, "comb.wb", h_w)?;
    let z = g.add(b, a)?;
    let bc = g.param("comb.bc")?;
    let z = g.add(z, bc)?;
    let s = affine_param(g, "v", "bv", z)?;
    let weights = if cfg.normalized_weights {
        g.softmax(s, 0)?
    } else {
        s
    };
    let h_c = g.sum(z, Some(0))?;

    let sig = match sig_override {
        Some(v) => {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("gate override {v} outside [0, 1]")));
            }
            g.constant(Tensor::scalar(T::of(v)))?
        }
        None => {
            let joint = g.concat(&[hf_w, h_c], 1)?;
            let logit = affine_param(g, "wf", "bf", joint)?;
            g.sigmoid(logit)?
        }
    };
    let weights_t = g.transpose(weights)?;
    let system1 = g.matmul(weights_t, p_s1)?;
    let left = g.mul(system1, sig)?;
    let rest = g.affine(sig, -1.0, 1.0)?;
    let right = g.mul(p_s2, rest)?;
    let scores = g.add(left, right)?;
    Ok(Combined {
        scores,
        weights,
        sig,
        system1,
    })
}
