//! Anomaly-probability network: scores how likely each future step is
//! anomalous given the past window.
//!
//! Both inputs pass through a width-3 temporal convolution (replicate padded)
//! plus positional rows, then one cross-attention layer with queries from the
//! future side. A residual, layer norm and a small GELU layer feed the scalar
//! head and sigmoid.

use crate::autodiff::{Binder, Graph, NodeId, ParamStore, Tensor, Track};
use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::layers::{self, init_attention, init_layer_norm, init_linear, normal};
use crate::model::Bundle;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    #[default]
    Mse,
    Bce,
}

/// Probabilities logged or compared outside the graph stay this far from 0 and 1.
pub const PROB_EPS: f64 = 1e-7;

pub(crate) fn init(store: &mut ParamStore, arch: &ArchConfig, rng: &mut Rng) -> Result<()> {
    let (c, d) = (arch.channels, arch.d_model);
    init_linear(store, "aafn.e_out", 3 * c, d, rng)?;
    store.insert("aafn.e_out.pos", normal(&[arch.l_out, d], 0.02, rng))?;
    init_linear(store, "aafn.e_in", 3 * c, d, rng)?;
    store.insert("aafn.e_in.pos", normal(&[arch.l_in, d], 0.02, rng))?;
    init_attention(store, "aafn.attn", d, rng)?;
    init_layer_norm(store, "aafn.ln", d)?;
    init_linear(store, "aafn.hidden", d, d, rng)?;
    init_linear(store, "aafn.head", d, 1, rng)?;
    Ok(())
}

/// `[x_{t-1}, x_t, x_{t+1}]` per step, edges repeated.
fn neighbours(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let s = g.value(x).rows();
    if s == 1 {
        return g.concat_cols(&[x, x, x]);
    }
    let first = g.slice_rows(x, 0, 1)?;
    let last = g.slice_rows(x, s - 1, s)?;
    let head = g.slice_rows(x, 0, s - 1)?;
    let tail = g.slice_rows(x, 1, s)?;
    let prev = g.concat_rows(&[first, head])?;
    let next = g.concat_rows(&[tail, last])?;
    g.concat_cols(&[prev, x, next])
}

fn conv_embed(g: &mut Graph, b: &mut Binder, name: &str, x: NodeId) -> Result<NodeId> {
    let n = neighbours(g, x)?;
    let h = layers::linear(g, b, name, n)?;
    let pos = b.get(g, &format!("{name}.pos"))?;
    g.add(h, pos)
}

/// Returns `(logits, probs)`, both `[L_out×1]`.
pub fn forward_node(
    arch: &ArchConfig,
    g: &mut Graph,
    b: &mut Binder,
    x_out: NodeId,
    x_in: NodeId,
) -> Result<(NodeId, NodeId)> {
    for (v, l, what) in [(x_out, arch.l_out, "future"), (x_in, arch.l_in, "past")] {
        let t = g.value(v);
        if t.shape() != [l, arch.channels] {
            return Err(Error::dim(format!(
                "anomaly network {what} input {:?}, expected [{l}, {}]",
                t.shape(),
                arch.channels
            )));
        }
    }
    let q = conv_embed(g, b, "aafn.e_out", x_out)?;
    let kv = conv_embed(g, b, "aafn.e_in", x_in)?;
    let (a, _) = layers::attention(g, b, "aafn.attn", q, kv, arch.aafn_heads)?;
    let h = g.add(q, a)?;
    let h = layers::layer_norm(g, b, "aafn.ln", h)?;
    let h = layers::linear(g, b, "aafn.hidden", h)?;
    let h = g.gelu(h);
    let logits = layers::linear(g, b, "aafn.head", h)?;
    let probs = g.sigmoid(logits);
    Ok((logits, probs))
}

pub fn check_labels(y: &[f64]) -> Result<()> {
    if let Some(v) = y.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::Domain(format!("anomaly label {v} is not 0 or 1")));
    }
    Ok(())
}

/// MSE against the labels, or binary cross-entropy computed from the logits
/// as `softplus(z) - y·z`.
pub fn loss_node(
    g: &mut Graph,
    logits: NodeId,
    probs: NodeId,
    y: &[f64],
    kind: LossKind,
) -> Result<NodeId> {
    check_labels(y)?;
    let n = g.value(probs).len();
    if y.len() != n {
        return Err(Error::dim(format!("{} labels for {n} probabilities", y.len())));
    }
    let shape = g.value(probs).shape().to_vec();
    let yt = g.constant(Tensor::new(shape, y.to_vec())?);
    match kind {
        LossKind::Mse => g.mse(probs, yt),
        LossKind::Bce => {
            let sp = g.softplus(logits);
            let yz = g.mul(yt, logits)?;
            let d = g.sub(sp, yz)?;
            Ok(g.mean(d))
        }
    }
}

/// Loss on already-computed probabilities.
pub fn aafn_loss(probs: &[f64], y: &[f64], kind: LossKind) -> Result<f64> {
    check_labels(y)?;
    if probs.len() != y.len() {
        return Err(Error::dim(format!(
            "{} labels for {} probabilities",
            y.len(),
            probs.len()
        )));
    }
    let n = probs.len().max(1) as f64;
    let s: f64 = match kind {
        LossKind::Mse => probs.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum(),
        LossKind::Bce => probs
            .iter()
            .zip(y)
            .map(|(p, t)| {
                let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum(),
    };
    Ok(s / n)
}

pub fn aafn_forward(bundle: &Bundle, x_out: &Tensor, x_in: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let mut b = bundle.binder(Track::None);
    let xo = g.constant(x_out.clone());
    let xi = g.constant(x_in.clone());
    let (_, p) = forward_node(&bundle.arch, &mut g, &mut b, xo, xi)?;
    Ok(g.value(p).data().to_vec())
}

/// Per-step loss weights for the forecasting objective. Only valid once the
/// network is frozen; the result is a constant for any caller's graph.
pub fn anomaly_weights(bundle: &Bundle, x_in: &Tensor, x_hat_out: &Tensor) -> Result<Vec<f64>> {
    if !bundle.frozen.aafn {
        return Err(Error::usage(
            "anomaly weights requested before the anomaly network was pre-trained",
        ));
    }
    aafn_forward(bundle, x_hat_out, x_in)
}
