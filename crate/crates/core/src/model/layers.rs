//! Parameterized building blocks: affine maps, layer norm, multi-head
//! attention and post-norm transformer layers.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{init, ParamStore};
use crate::tensor::Scalar;

pub(crate) fn add_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) -> Result<()> {
    store.insert(format!("{name}.w"), init::xavier(rng, fan_in, fan_out))?;
    if bias {
        store.insert(format!("{name}.b"), init::zeros(1, fan_out))?;
    }
    Ok(())
}

/// `x @ W (+ b)`; the bias is used when the store has one.
pub(crate) fn linear<T: Scalar>(g: &mut Graph<'_, T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    let y = g.matmul(x, w)?;
    let bias = format!("{name}.b");
    if g.has_param(&bias) {
        let b = g.param(&bias)?;
        g.add(y, b)
    } else {
        Ok(y)
    }
}

pub(crate) fn add_layer_norm<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    d: usize,
) -> Result<()> {
    store.insert(format!("{name}.gain"), init::ones(1, d))?;
    store.insert(format!("{name}.bias"), init::zeros(1, d))
}

pub(crate) fn layer_norm<T: Scalar>(
    g: &mut Graph<'_, T>,
    name: &str,
    x: Var,
    eps: f64,
) -> Result<Var> {
    let n = g.layer_norm(x, eps)?;
    let gain = g.param(&format!("{name}.gain"))?;
    let bias = g.param(&format!("{name}.bias"))?;
    let y = g.mul(n, gain)?;
    g.add(y, bias)
}

pub(crate) fn add_attention<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    name: &str,
    width: usize,
    qk_scale: f64,
) -> Result<()> {
    for proj in ["wq", "wk", "wv", "wo"] {
        add_linear(store, rng, &format!("{name}.{proj}"), width, width, true)?;
    }
    if qk_scale != 1.0 {
        for proj in ["wq", "wk"] {
            let w = store
                .get_mut(&format!("{name}.{proj}.w"))
                .expect("just inserted");
            for x in w.data_mut() {
                *x *= T::of(qk_scale);
            }
        }
    }
    Ok(())
}

/// Multi-head attention with input and output projections. `groups`
/// partitions the query and key rows into independent blocks.
pub(crate) fn attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    name: &str,
    query: Var,
    keys: Var,
    heads: usize,
    groups: usize,
) -> Result<Var> {
    let q = linear(g, &format!("{name}.wq"), query)?;
    let k = linear(g, &format!("{name}.wk"), keys)?;
    let v = linear(g, &format!("{name}.wv"), keys)?;
    let o = g.attention(q, k, v, heads, groups)?;
    linear(g, &format!("{name}.wo"), o)
}

pub(crate) fn add_feed_forward<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    name: &str,
    d: usize,
    hidden: usize,
) -> Result<()> {
    add_linear(store, rng, &format!("{name}.l1"), d, hidden, true)?;
    add_linear(store, rng, &format!("{name}.l2"), hidden, d, true)
}

pub(crate) fn feed_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    name: &str,
    x: Var,
    dropout: f64,
) -> Result<Var> {
    let h = linear(g, &format!("{name}.l1"), x)?;
    let h = g.relu(h)?;
    let h = g.dropout(h, dropout)?;
    linear(g, &format!("{name}.l2"), h)
}

/// Shape settings shared by every transformer layer in the model.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerSpec {
    pub heads: usize,
    pub dropout: f64,
    pub eps: f64,
}

pub(crate) fn add_encoder_layer<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    name: &str,
    d: usize,
    hidden: usize,
    qk_scale: f64,
) -> Result<()> {
    add_attention(store, rng, &format!("{name}.attn"), d, qk_scale)?;
    add_layer_norm(store, &format!("{name}.ln1"), d)?;
    add_feed_forward(store, rng, &format!("{name}.ffn"), d, hidden)?;
    add_layer_norm(store, &format!("{name}.ln2"), d)
}

/// Post-norm encoder layer: `LN(x + MHA(x))`, then `LN(h + FFN(h))`.
pub(crate) fn encoder_layer<T: Scalar>(
    g: &mut Graph<'_, T>,
    name: &str,
    x: Var,
    spec: LayerSpec,
    groups: usize,
) -> Result<Var> {
    let a = attention(g, &format!("{name}.attn"), x, x, spec.heads, groups)?;
    let a = g.dropout(a, spec.dropout)?;
    let h = g.add(x, a)?;
    let h = layer_norm(g, &format!("{name}.ln1"), h, spec.eps)?;
    let f = feed_forward(g, &format!("{name}.ffn"), h, spec.dropout)?;
    let f = g.dropout(f, spec.dropout)?;
    let y = g.add(h, f)?;
    layer_norm(g, &format!("{name}.ln2"), y, spec.eps)
}
