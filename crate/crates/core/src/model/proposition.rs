//! Semantic parsing: learned proposition seeds read the compound text
//! through two layers of self-attention, cross-attention and a feed-forward
//! block fed with the cross/self difference. A small MLP on the global token
//! predicts how many propositions are active.

use rand::Rng;

use super::layers;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{init, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub(crate) fn add_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    cfg: &ModelConfig,
) -> Result<()> {
    let d = cfg.d;
    store.insert("prop.seed", init::normal(rng, cfg.max_props, d, 1.0))?;
    for layer in 0..cfg.parse_layers {
        let p = format!("prop.layer{layer}");
        layers::add_attention(store, rng, &format!("{p}.self"), d, 1.0)?;
        layers::add_layer_norm(store, &format!("{p}.ln_self"), d)?;
        layers::add_attention(store, rng, &format!("{p}.cross"), d, 1.0)?;
        layers::add_layer_norm(store, &format!("{p}.ln_cross"), d)?;
        layers::add_feed_forward(store, rng, &format!("{p}.ffn"), d, cfg.ffn_hidden())?;
        layers::add_layer_norm(store, &format!("{p}.ln_ffn"), d)?;
    }
    layers::add_linear(store, rng, "prop.count.l1", d, d, true)?;
    layers::add_linear(store, rng, "prop.count.l2", d, cfg.max_props, true)
}

/// Intermediate values of one parsing layer, exposed for tests.
pub struct ParseLayer {
    pub self_out: Var,
    pub cross_out: Var,
    pub ffn_input: Var,
    pub output: Var,
}

fn parse_layer<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
    text: Var,
) -> Result<ParseLayer> {
    let p = format!("prop.layer{layer}");
    let spec = cfg.layer_spec();
    let sa = layers::attention(g, &format!("{p}.self"), x, x, spec.heads, 1)?;
    let sa = g.dropout(sa, spec.dropout)?;
    let h = g.add(x, sa)?;
    let self_out = layers::layer_norm(g, &format!("{p}.ln_self"), h, spec.eps)?;

    let ca = layers::attention(g, &format!("{p}.cross"), self_out, text, spec.heads, 1)?;
    let ca = g.dropout(ca, spec.dropout)?;
    let h = g.add(self_out, ca)?;
    let cross_out = layers::layer_norm(g, &format!("{p}.ln_cross"), h, spec.eps)?;

    let ffn_input = if cfg.parse_residual {
        cross_out
    } else {
        g.sub(cross_out, self_out)?
    };
    let f = layers::feed_forward(g, &format!("{p}.ffn"), ffn_input, spec.dropout)?;
    let f = g.dropout(f, spec.dropout)?;
    let h = g.add(ffn_input, f)?;
    let output = layers::layer_norm(g, &format!("{p}.ln_ffn"), h, spec.eps)?;
    Ok(ParseLayer {
        self_out,
        cross_out,
        ffn_input,
        output,
    })
}

/// All parsing layers; returns every layer's intermediates. The last
/// `output` holds the `K x d` proposition slots.
pub fn parse_layers<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    text: Var,
) -> Result<Vec<ParseLayer>> {
    if g.shape(text)[0] < 2 {
        return Err(Error::Invalid(
            "text must hold a global token and at least one token".into(),
        ));
    }
    let mut x = g.param("prop.seed")?;
    let mut out = Vec::with_capacity(cfg.parse_layers);
    for layer in 0..cfg.parse_layers {
        let l = parse_layer(g, cfg, layer, x, text)?;
        x = l.output;
        out.push(l);
    }
    Ok(out)
}

/// `K x d` proposition slots derived from `(N + 1) x d` text states.
pub fn parse_propositions<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    text: Var,
) -> Result<Var> {
    let layers = parse_layers(g, cfg, text)?;
    Ok(layers.last().expect("at least one parsing layer").output)
}

/// Logits over proposition counts `1..=K` from the global token (row 0).
pub fn predict_count<T: Scalar>(g: &mut Graph<'_, T>, text: Var) -> Result<Var> {
    let cls = g.slice_rows(text, 0, 1)?;
    let h = layers::linear(g, "prop.count.l1", cls)?;
    let h = g.relu(h)?;
    layers::linear(g, "prop.count.l2", h)
}

/// Mean over slot pairs `i < j` of `max(0, cos(slot_i, slot_j) - margin)`.
/// Zero when only one slot is active.
pub fn uniformity_loss<T: Scalar>(g: &mut Graph<'_, T>, slots: Var, margin: f64) -> Result<Var> {
    let m = g.shape(slots)[0];
    if m == 0 {
        return Err(Error::Invalid(
            "uniformity loss needs at least one slot".into(),
        ));
    }
    let unit = g.l2_normalize(slots)?;
    if m == 1 {
        return g.constant(Tensor::scalar(T::zero()));
    }
    let unit_t = g.transpose(unit)?;
    let cos = g.matmul(unit, unit_t)?;
    let shifted = g.affine(cos, 1.0, -margin)?;
    let hinge = g.relu(shifted)?;
    let mut mask = Tensor::zeros(&[m, m]);
    for i in 0..m {
        for j in i + 1..m {
            mask.data_mut()[i * m + j] = T::one();
        }
    }
    let mask = g.constant(mask)?;
    let upper = g.mul(hinge, mask)?;
    let total = g.sum(upper, None)?;
    let pairs = (m * (m - 1) / 2) as f64;
    g.scale(total, 1.0 / pairs)
}
