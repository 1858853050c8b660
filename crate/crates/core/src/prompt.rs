//! Prompt pool: learnable key/prompt pairs, top-N retrieval by cosine
//! similarity, attachment at the embedding level, and the divergence loss.

use crate::autodiff::{Binder, Graph, NodeId, ParamStore, Tensor, Track};
use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::layers::{stack_maps, uniform};
use crate::model::{Bundle, Head};
use crate::rng::Rng;

pub const KEYS: &str = "pool.keys";
pub const PROMPTS: &str = "pool.prompts";

pub(crate) fn init(store: &mut ParamStore, arch: &ArchConfig, rng: &mut Rng) -> Result<()> {
    let (m, d) = (arch.pool_size, arch.d_model);
    let bound = 1.0 / (d as f64).sqrt();
    store.insert(KEYS, uniform(&[m, d], bound, rng))?;
    store.insert(PROMPTS, uniform(&[m, arch.prompt_len, d], bound, rng))?;
    Ok(())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < crate::autodiff::COSINE_EPS || nb < crate::autodiff::COSINE_EPS {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Indices of the `n` keys most similar to `query`, best first, ties to the
/// lower index.
pub fn select_top_n(query: &[f64], keys: &Tensor, n: usize) -> Result<Vec<usize>> {
    let m = keys.rows();
    if n > m {
        return Err(Error::config(format!("cannot select {n} prompts from a pool of {m}")));
    }
    if keys.cols() != query.len() {
        return Err(Error::dim(format!(
            "query width {} against keys of width {}",
            query.len(),
            keys.cols()
        )));
    }
    let scores: Vec<f64> = (0..m).map(|i| cosine(query, keys.row(i))).collect();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n);
    Ok(idx)
}

/// `[p_{s1}; …; p_{sN}; tokens]`.
pub fn attach_node(
    g: &mut Graph,
    prompts: NodeId,
    prompt_len: usize,
    selected: &[usize],
    tokens: NodeId,
) -> Result<NodeId> {
    if selected.is_empty() {
        return Ok(tokens);
    }
    let m = g.value(prompts).rows() / prompt_len.max(1);
    let mut parts = Vec::with_capacity(selected.len() + 1);
    for &s in selected {
        if s >= m {
            return Err(Error::usage(format!("prompt index {s} out of range for pool of {m}")));
        }
        parts.push(g.slice_rows(prompts, s * prompt_len, (s + 1) * prompt_len)?);
    }
    parts.push(tokens);
    g.concat_rows(&parts)
}

pub fn attach_prompts(tokens: &Tensor, prompts: &Tensor, prompt_len: usize, selected: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = g.constant(prompts.clone());
    let t = g.constant(tokens.clone());
    let out = attach_node(&mut g, p, prompt_len, selected, t)?;
    Ok(g.value(out).clone())
}

pub fn strip_node(g: &mut Graph, tokens: NodeId, n: usize, prompt_len: usize) -> Result<NodeId> {
    let s = g.value(tokens).rows();
    let k = n * prompt_len;
    if s < k {
        return Err(Error::dim(format!("{s} rows cannot hold {k} prompt rows")));
    }
    if k == 0 {
        return Ok(tokens);
    }
    g.slice_rows(tokens, k, s)
}

pub fn strip_prompts(tokens: &Tensor, n: usize, prompt_len: usize) -> Result<Tensor> {
    let k = n * prompt_len;
    if tokens.rows() < k {
        return Err(Error::dim(format!(
            "{} rows cannot hold {k} prompt rows",
            tokens.rows()
        )));
    }
    tokens.slice_rows(k, tokens.rows())
}

/// Per-head sub-block of prompted attention covering the original tokens,
/// rows renormalised.
fn token_block(g: &mut Graph, map: NodeId, offset: usize) -> Result<NodeId> {
    if offset == 0 {
        return Ok(map);
    }
    let s = g.value(map).rows();
    let r = g.slice_rows(map, offset, s)?;
    let c = g.slice_cols(r, offset, s)?;
    g.row_normalize(c)
}

/// Parts of the divergence objective, all recorded in one graph.
#[derive(Clone, Copy, Debug)]
pub struct Divergence {
    pub loss: NodeId,
    /// Head-averaged KL before the cap.
    pub kl: NodeId,
    pub alignment: Option<NodeId>,
}

/// Builds the divergence loss for one past window. The reconstruction and
/// query are computed outside the graph, so only pool parameters can receive
/// gradient when `b` tracks them.
pub fn divergence_node(
    bundle: &Bundle,
    g: &mut Graph,
    b: &mut Binder,
    x_in: &Tensor,
    lambda_k: f64,
    kl_cap: f64,
) -> Result<Divergence> {
    if !bundle.frozen.fftr {
        return Err(Error::usage("divergence loss needs a frozen feature extractor"));
    }
    let arch = &bundle.arch;
    let x_r = bundle.reconstruct(x_in)?;
    let query = bundle.extract_query(&x_r)?;
    let keys_val = bundle.store.get(KEYS)?;
    let selected = select_top_n(query.data(), keys_val, arch.top_n)?;

    let xr = g.constant(x_r);
    let tok = bundle.embed(g, b, Head::Detect, xr)?;
    let prompts = b.get(g, PROMPTS)?;
    let prompted = attach_node(g, prompts, arch.prompt_len, &selected, tok)?;
    let a_p = bundle.last_attention(g, b, Head::Detect, prompted)?;
    let a_r = bundle.last_attention(g, b, Head::Detect, tok)?;

    let offset = selected.len() * arch.prompt_len;
    let mut kls = Vec::with_capacity(a_p.len());
    for (&p, &r) in a_p.iter().zip(&a_r) {
        let p = token_block(g, p, offset)?;
        kls.push(g.kl_div(p, r)?);
    }
    let kl = sum_nodes(g, &kls)?;
    let kl = g.scale(kl, 1.0 / kls.len() as f64);
    let capped = g.min_const(kl, kl_cap);
    let mut loss = g.scale(capped, -1.0);

    let mut alignment = None;
    if !selected.is_empty() {
        let q = g.constant(query.reshape(vec![1, arch.d_model])?);
        let keys = b.get(g, KEYS)?;
        let mut cos = Vec::with_capacity(selected.len());
        for &s in &selected {
            let k = g.slice_rows(keys, s, s + 1)?;
            cos.push(g.cosine_similarity(q, k)?);
        }
        let c = sum_nodes(g, &cos)?;
        let c = g.scale(c, 1.0 / cos.len() as f64);
        alignment = Some(c);
        let term = g.scale(c, lambda_k);
        loss = g.sub(loss, term)?;
    }
    Ok(Divergence { loss, kl, alignment })
}

pub(crate) fn sum_nodes(g: &mut Graph, xs: &[NodeId]) -> Result<NodeId> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(acc)
}

/// Divergence loss value with every parameter frozen.
pub fn divergence_loss(bundle: &Bundle, x_in: &Tensor, lambda_k: f64, kl_cap: f64) -> Result<f64> {
    let mut g = Graph::new();
    let mut b = bundle.binder(Track::None);
    let d = divergence_node(bundle, &mut g, &mut b, x_in, lambda_k, kl_cap)?;
    Ok(g.value(d.loss).item())
}

/// Uncapped head-averaged `KL(A_p ‖ A_r)` for a past window.
pub fn attention_divergence(bundle: &Bundle, x_in: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let mut b = bundle.binder(Track::None);
    let d = divergence_node(bundle, &mut g, &mut b, x_in, 0.0, f64::INFINITY)?;
    Ok(g.value(d.kl).item())
}

/// Prompted reconstruction `o_AD(strip(θ([prompts; e_AD(x)])))` with prompts
/// chosen by the query of the plain reconstruction of `x`.
pub fn prompted_reconstruct_node(
    bundle: &Bundle,
    g: &mut Graph,
    b: &mut Binder,
    x: &Tensor,
    x_node: NodeId,
) -> Result<NodeId> {
    let arch = &bundle.arch;
    let x_r = bundle.reconstruct(x)?;
    let query = bundle.extract_query(&x_r)?;
    let selected = select_top_n(query.data(), bundle.store.get(KEYS)?, arch.top_n)?;
    let tok = bundle.embed(g, b, Head::Detect, x_node)?;
    let prompts = b.get(g, PROMPTS)?;
    let prompted = attach_node(g, prompts, arch.prompt_len, &selected, tok)?;
    let (h, _) = bundle.backbone_forward(g, b, Head::Detect, prompted)?;
    let h = strip_node(g, h, selected.len(), arch.prompt_len)?;
    bundle.detect_head(g, b, h)
}

/// Last-block attention of a prompted window, stacked `[h×S×S]`.
pub fn prompted_attention(bundle: &Bundle, x: &Tensor) -> Result<Tensor> {
    let arch = &bundle.arch;
    let x_r = bundle.reconstruct(x)?;
    let query = bundle.extract_query(&x_r)?;
    let selected = select_top_n(query.data(), bundle.store.get(KEYS)?, arch.top_n)?;
    let mut g = Graph::new();
    let mut b = bundle.binder(Track::None);
    let xn = g.constant(x_r);
    let tok = bundle.embed(&mut g, &mut b, Head::Detect, xn)?;
    let prompts = b.get(&mut g, PROMPTS)?;
    let prompted = attach_node(&mut g, prompts, arch.prompt_len, &selected, tok)?;
    let maps = bundle.last_attention(&mut g, &mut b, Head::Detect, prompted)?;
    Ok(stack_maps(&g, &maps))
}
