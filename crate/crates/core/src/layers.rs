//! Graph-level building blocks shared by every network in the bundle.
//!
//! Parameters are looked up by name through a [`Binder`], so whether a layer
//! trains is decided by the caller's tracking set, not by the layer.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Binder, Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

pub(crate) fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let d = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).expect("sized")
}

pub(crate) fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut Rng,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{prefix}.w"), uniform(&[fan_in, fan_out], bound, rng))?;
    store.insert(format!("{prefix}.b"), uniform(&[fan_out], bound, rng))?;
    Ok(())
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.g"), Tensor::full(&[d], 1.0))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]))?;
    Ok(())
}

pub(crate) fn init_attention(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{p}"), d, d, rng)?;
    }
    Ok(())
}

pub(crate) fn init_block(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) -> Result<()> {
    init_layer_norm(store, &format!("{prefix}.ln1"), d)?;
    init_attention(store, &format!("{prefix}.attn"), d, rng)?;
    init_layer_norm(store, &format!("{prefix}.ln2"), d)?;
    init_linear(store, &format!("{prefix}.ff1"), d, 4 * d, rng)?;
    init_linear(store, &format!("{prefix}.ff2"), 4 * d, d, rng)?;
    Ok(())
}

/// `n_layers` blocks plus a final layer norm under `prefix`.
pub(crate) fn init_encoder(
    store: &mut ParamStore,
    prefix: &str,
    n_layers: usize,
    d: usize,
    rng: &mut Rng,
) -> Result<()> {
    for l in 0..n_layers {
        init_block(store, &format!("{prefix}{l}"), d, rng)?;
    }
    init_layer_norm(store, &format!("{prefix}ln_f"), d)
}

pub(crate) fn linear(g: &mut Graph, b: &mut Binder, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = b.get(g, &format!("{prefix}.w"))?;
    let bias = b.get(g, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row_bias(y, bias)
}

pub(crate) fn layer_norm(g: &mut Graph, b: &mut Binder, prefix: &str, x: NodeId) -> Result<NodeId> {
    let gamma = b.get(g, &format!("{prefix}.g"))?;
    let beta = b.get(g, &format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta)
}

/// Multi-head attention; queries from `q_in`, keys and values from `kv_in`.
/// Returns the projected output and the post-softmax map of every head.
pub(crate) fn attention(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    q_in: NodeId,
    kv_in: NodeId,
    heads: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    let (v, maps) = attention_maps(g, b, prefix, q_in, kv_in, heads)?;
    let d = g.value(v).cols();
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for (h, &a) in maps.iter().enumerate() {
        let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
        outs.push(g.matmul(a, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let out = linear(g, b, &format!("{prefix}.o"), cat)?;
    Ok((out, maps))
}

pub(crate) fn attention_maps(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    q_in: NodeId,
    kv_in: NodeId,
    heads: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    let q = linear(g, b, &format!("{prefix}.q"), q_in)?;
    let k = linear(g, b, &format!("{prefix}.k"), kv_in)?;
    let v = linear(g, b, &format!("{prefix}.v"), kv_in)?;
    let d = g.value(q).cols();
    if d % heads != 0 {
        return Err(Error::dim(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, scale);
        maps.push(g.softmax_lastdim(s)?);
    }
    Ok((v, maps))
}

fn check_finite(g: &Graph, id: NodeId, layer: &str) -> Result<()> {
    if !g.value(id).is_finite() {
        return Err(Error::Numeric {
            layer: layer.to_string(),
            msg: "non-finite activations".into(),
        });
    }
    Ok(())
}

/// Pre-norm transformer block.
pub(crate) fn block(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    x: NodeId,
    heads: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    let h = layer_norm(g, b, &format!("{prefix}.ln1"), x)?;
    let (a, maps) = attention(g, b, &format!("{prefix}.attn"), h, h, heads)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, b, &format!("{prefix}.ln2"), x)?;
    let h = linear(g, b, &format!("{prefix}.ff1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, b, &format!("{prefix}.ff2"), h)?;
    let out = g.add(x, h)?;
    check_finite(g, out, prefix)?;
    Ok((out, maps))
}

/// Runs every block under `prefix` and the final norm; returns the first
/// block's attention maps alongside the output tokens.
pub(crate) fn encoder(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    n_layers: usize,
    x: NodeId,
    heads: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    check_finite(g, x, &format!("{prefix}input"))?;
    let mut h = x;
    let mut first = Vec::new();
    for l in 0..n_layers {
        let (out, maps) = block(g, b, &format!("{prefix}{l}"), h, heads)?;
        if l == 0 {
            first = maps;
        }
        h = out;
    }
    let out = layer_norm(g, b, &format!("{prefix}ln_f"), h)?;
    Ok((out, first))
}

/// First-block attention maps only, computed exactly as inside [`encoder`].
pub(crate) fn encoder_first_attention(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    x: NodeId,
    heads: usize,
) -> Result<Vec<NodeId>> {
    let p = format!("{prefix}0");
    let h = layer_norm(g, b, &format!("{p}.ln1"), x)?;
    let (_, maps) = attention_maps(g, b, &format!("{p}.attn"), h, h, heads)?;
    Ok(maps)
}

/// Attention maps of the last block, after the earlier blocks have run.
pub(crate) fn encoder_last_attention(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    n_layers: usize,
    x: NodeId,
    heads: usize,
) -> Result<Vec<NodeId>> {
    check_finite(g, x, &format!("{prefix}input"))?;
    let mut h = x;
    for l in 0..n_layers - 1 {
        h = block(g, b, &format!("{prefix}{l}"), h, heads)?.0;
    }
    let p = format!("{prefix}{}", n_layers - 1);
    let n = layer_norm(g, b, &format!("{p}.ln1"), h)?;
    let (_, maps) = attention_maps(g, b, &format!("{p}.attn"), n, n, heads)?;
    Ok(maps)
}

/// Stacks per-head `[S×S]` maps into one `[h×S×S]` tensor.
pub fn stack_maps(g: &Graph, maps: &[NodeId]) -> Tensor {
    let s = g.value(maps[0]).rows();
    let mut data = Vec::with_capacity(maps.len() * s * s);
    for &m in maps {
        data.extend_from_slice(g.value(m).data());
    }
    Tensor::new(vec![maps.len(), s, s], data).expect("square maps")
}
