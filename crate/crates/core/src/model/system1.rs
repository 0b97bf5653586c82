//! System 1: proposition-image fusion, contextual interaction, the
//! compound-text modifier and the per-proposition score head.
//!
//! Grids of proposition-image pairs are stored proposition-major: row
//! `i * L + l` pairs proposition `i` with candidate `l`.

use rand::Rng;

use super::layers;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{init, ParamStore};
use crate::tensor::Scalar;

/// Initial scale of the query and key projections in the proposition-image
/// interactor. Its inputs carry the fusion scale, so unscaled projections
/// start with saturated attention that passes almost no gradient.
const FUSED_QK_SCALE: f64 = 0.01;

pub(crate) fn add_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    cfg: &ModelConfig,
    context: bool,
    modifier: bool,
) -> Result<()> {
    let d = cfg.d;
    store.insert("s1.pe", init::normal(rng, cfg.max_candidates, d, 0.02))?;
    for layer in 0..cfg.interactor_layers {
        layers::add_encoder_layer(
            store,
            rng,
            &format!("s1.prop_tf.layer{layer}"),
            d,
            cfg.ffn_hidden(),
            FUSED_QK_SCALE,
        )?;
    }
    if context {
        for layer in 0..cfg.interactor_layers {
            layers::add_encoder_layer(
                store,
                rng,
                &format!("s1.ctx_tf.layer{layer}"),
                d,
                cfg.ffn_hidden(),
                1.0,
            )?;
        }
    }
    if modifier {
        layers::add_linear(store, rng, "s1.mod.m2", 2 * d, 2 * d, true)?;
        layers::add_linear(store, rng, "s1.mod.m1", 2 * d, d, true)?;
    }
    layers::add_linear(store, rng, "s1.head", d, 1, true)
}

/// `i` for every grid row.
pub(crate) fn prop_index(m: usize, l: usize) -> Vec<usize> {
    (0..m * l).map(|r| r / l).collect()
}

/// `l` for every grid row.
pub(crate) fn image_index(m: usize, l: usize) -> Vec<usize> {
    (0..m * l).map(|r| r % l).collect()
}

/// `lambda * unit(slot_i) ⊙ unit(image_l)` for every pair, `[M*L, d]`.
pub fn fuse<T: Scalar>(g: &mut Graph<'_, T>, slots: Var, images: Var, lambda: f64) -> Result<Var> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!(
            "fusion scale must be > 0, got {lambda}"
        )));
    }
    let (m, l) = (g.shape(slots)[0], g.shape(images)[0]);
    if g.shape(slots)[1] != g.shape(images)[1] {
        return Err(Error::shape("fuse", g.shape(slots), g.shape(images)));
    }
    let s = g.l2_normalize(slots)?;
    let v = g.l2_normalize(images)?;
    let s = g.gather_rows(s, &prop_index(m, l))?;
    let v = g.gather_rows(v, &image_index(m, l))?;
    let h = g.mul(s, v)?;
    g.scale(h, lambda)
}

/// Two transformer stacks: one over the fused grid, one over the
/// compound-text cross embeddings. Both add the same learned position
/// embedding indexed by candidate. Returns `(H_P, H_ctx)`.
pub fn contextual_interact<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    fused: Var,
    cross: Option<Var>,
    m: usize,
    l: usize,
) -> Result<(Var, Option<Var>)> {
    if l > cfg.max_candidates {
        return Err(Error::Dimension(format!(
            "{l} candidates exceed the position table of {}",
            cfg.max_candidates
        )));
    }
    let spec = cfg.layer_spec();
    let pe = g.param("s1.pe")?;
    let pe_grid = g.gather_rows(pe, &image_index(m, l))?;
    let mut x = g.add(fused, pe_grid)?;
    let groups = if cfg.per_proposition_interaction {
        m
    } else {
        1
    };
    for layer in 0..cfg.interactor_layers {
        x = layers::encoder_layer(g, &format!("s1.prop_tf.layer{layer}"), x, spec, groups)?;
    }
    let ctx = match cross {
        Some(cross) => {
            let pe_l = g.slice_rows(pe, 0, l)?;
            let mut c = g.add(cross, pe_l)?;
            for layer in 0..cfg.interactor_layers {
                c = layers::encoder_layer(g, &format!("s1.ctx_tf.layer{layer}"), c, spec, 1)?;
            }
            Some(c)
        }
        None => None,
    };
    Ok((x, ctx))
}

/// `W_m1 · ReLU(W_m2 · [H_P[i,l], H_ctx[l]])` for every grid row.
pub fn modify<T: Scalar>(
    g: &mut Graph<'_, T>,
    h_p: Var,
    ctx: Var,
    m: usize,
    l: usize,
) -> Result<Var> {
    let c = g.gather_rows(ctx, &image_index(m, l))?;
    let joint = g.concat(&[h_p, c], 1)?;
    let h = layers::linear(g, "s1.mod.m2", joint)?;
    let h = g.relu(h)?;
    layers::linear(g, "s1.mod.m1", h)
}

/// Shared linear head: `[M*L, d]` states to `[M, L]` logits.
pub fn score<T: Scalar>(g: &mut Graph<'_, T>, states: Var, m: usize, l: usize) -> Result<Var> {
    let s = layers::linear(g, "s1.head", states)?;
    g.reshape(s, m, l)
}
