//! Analytic-versus-finite-difference gradient checks for every graph op and
//! for each composite training loss.

use std::collections::BTreeMap;

use prognos_core::aafn::{self, LossKind};
use prognos_core::autodiff::{Graph, NodeId, Tensor, Track};
use prognos_core::config::ArchConfig;
use prognos_core::data::WindowPair;
use prognos_core::inject::{AnomalyType, InjectionSpec, Perturbation};
use prognos_core::model::Bundle;
use prognos_core::{prompt, rng, train};
use rand::Rng as _;

use super::{central, numeric_grad, rel_err};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
pub const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub max_rel: f64,
    pub checked: usize,
}

type Build = fn(&mut Graph, &[NodeId]) -> NodeId;

fn rand_t(r: &mut rng::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Projects a node onto a fixed random direction so every op reduces to a
/// scalar with a generic gradient.
fn project(g: &mut Graph, out: NodeId, dir: &Tensor) -> NodeId {
    let d = g.constant(dir.clone());
    let p = g.mul(out, d).unwrap();
    g.sum(p)
}

fn check_op(name: &str, build: Build, inputs: Vec<Tensor>, r: &mut rng::Rng) -> CaseResult {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &ids);
    let dir = rand_t(r, g.value(out).shape(), -1.0, 1.0);
    let loss = project(&mut g, out, &dir);
    let grads = g.backward(loss).unwrap();
    let f = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &ids);
        let l = project(&mut g, out, &dir);
        g.value(l).item()
    };
    let num = numeric_grad(&f, &inputs, H);
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for (i, id) in ids.iter().enumerate() {
        let zeros = vec![0.0; inputs[i].len()];
        let a = grads.of(*id).unwrap_or(&zeros);
        for (x, y) in a.iter().zip(&num[i]) {
            max_rel = max_rel.max(rel_err(*x, *y, FLOOR));
            checked += 1;
        }
    }
    CaseResult { name: name.to_string(), max_rel, checked }
}

/// One randomized case for every op.
pub fn op_cases(r: &mut rng::Rng) -> Vec<CaseResult> {
    let m = r.random_range(1..=6);
    let k = r.random_range(1..=6);
    let n = r.random_range(2..=6);
    let mut out = Vec::new();
    let mut c = |name: &str, b: Build, inputs: Vec<Tensor>, r: &mut rng::Rng| {
        out.push(check_op(name, b, inputs, r));
    };
    let a = rand_t(r, &[m, k], -1.0, 1.0);
    let b = rand_t(r, &[k, n], -1.0, 1.0);
    c("matmul", |g, x| g.matmul(x[0], x[1]).unwrap(), vec![a.clone(), b], r);
    let bt = rand_t(r, &[n, k], -1.0, 1.0);
    c("matmul_nt", |g, x| g.matmul_nt(x[0], x[1]).unwrap(), vec![a.clone(), bt], r);
    let p = rand_t(r, &[m, n], -1.0, 1.0);
    let q = rand_t(r, &[m, n], -1.0, 1.0);
    c("add", |g, x| g.add(x[0], x[1]).unwrap(), vec![p.clone(), q.clone()], r);
    c("sub", |g, x| g.sub(x[0], x[1]).unwrap(), vec![p.clone(), q.clone()], r);
    c("mul", |g, x| g.mul(x[0], x[1]).unwrap(), vec![p.clone(), q.clone()], r);
    c("scale", |g, x| g.scale(x[0], -1.7), vec![p.clone()], r);
    let rb = rand_t(r, &[n], -1.0, 1.0);
    c("add_row_bias", |g, x| g.add_row_bias(x[0], x[1]).unwrap(), vec![p.clone(), rb], r);
    let cb = rand_t(r, &[m], -1.0, 1.0);
    c("add_col_bias", |g, x| g.add_col_bias(x[0], x[1]).unwrap(), vec![p.clone(), cb], r);
    c("transpose", |g, x| g.transpose(x[0]).unwrap(), vec![p.clone()], r);
    let wide = rand_t(r, &[m, n], -3.0, 3.0);
    c("softmax", |g, x| g.softmax_lastdim(x[0]).unwrap(), vec![wide.clone()], r);
    let gamma = rand_t(r, &[n], 0.5, 1.5);
    let beta = rand_t(r, &[n], -0.5, 0.5);
    c("layer_norm", |g, x| g.layer_norm(x[0], x[1], x[2]).unwrap(), vec![wide.clone(), gamma, beta], r);
    c("gelu", |g, x| g.gelu(x[0]), vec![wide.clone()], r);
    c("sigmoid", |g, x| g.sigmoid(x[0]), vec![wide.clone()], r);
    c("softplus", |g, x| g.softplus(x[0]), vec![wide.clone()], r);
    c("sum", |g, x| g.sum(x[0]), vec![p.clone()], r);
    c("mean", |g, x| g.mean(x[0]), vec![p.clone()], r);
    c("mse", |g, x| g.mse(x[0], x[1]).unwrap(), vec![p.clone(), q.clone()], r);
    // distributions are parameterised by logits so perturbed inputs stay valid
    let lp = rand_t(r, &[m, n], -2.0, 2.0);
    let lq = rand_t(r, &[m, n], -2.0, 2.0);
    c(
        "kl_div",
        |g, x| {
            let p = g.softmax_lastdim(x[0]).unwrap();
            let q = g.softmax_lastdim(x[1]).unwrap();
            g.kl_div(p, q).unwrap()
        },
        vec![lp, lq],
        r,
    );
    c("cosine", |g, x| g.cosine_similarity(x[0], x[1]).unwrap(), vec![p.clone(), q.clone()], r);
    let tall = rand_t(r, &[m + 2, n], -1.0, 1.0);
    c("slice_rows", |g, x| g.slice_rows(x[0], 1, 3).unwrap(), vec![tall.clone()], r);
    c("slice_cols", |g, x| g.slice_cols(x[0], 1, 2).unwrap(), vec![tall.clone()], r);
    c("concat_rows", |g, x| g.concat_rows(&[x[0], x[1], x[0]]).unwrap(), vec![p.clone(), tall.clone()], r);
    let side = rand_t(r, &[m, 2], -1.0, 1.0);
    c("concat_cols", |g, x| g.concat_cols(&[x[0], x[1]]).unwrap(), vec![p.clone(), side], r);
    let pos = rand_t(r, &[m, n], 0.2, 1.0);
    c("row_normalize", |g, x| g.row_normalize(x[0]).unwrap(), vec![pos], r);
    let w = rand_t(r, &[m], -1.0, 1.0);
    c("scale_rows", |g, x| g.scale_rows(x[0], x[1]).unwrap(), vec![p.clone(), w], r);
    // cap chosen away from every entry so the op is locally smooth
    let spread = Tensor::matrix(1, 4, vec![-0.9, -0.2, 0.4, 0.8]).unwrap();
    c("min_const", |g, x| g.min_const(x[0], 0.1), vec![spread], r);
    let s = rand_t(r, &[1], 0.3, 1.2);
    c(
        "linearized",
        |g, x| {
            // value x^2 * base with derivative 2x * base, recorded as linearized
            let base = [0.5, -1.0, 2.0];
            let v = g.value(x[0]).item();
            let val = Tensor::vector(base.iter().map(|b| v * v * b).collect());
            let jac = base.iter().map(|b| 2.0 * v * b).collect();
            g.linearized(val, x[0], jac).unwrap()
        },
        vec![s],
        r,
    );
    out
}

fn small_arch(r: &mut rng::Rng) -> ArchConfig {
    let heads = [1, 2, 4][r.random_range(0..3)];
    let d = heads * r.random_range(1..=(16 / heads).min(4));
    let top_n = r.random_range(0..=2);
    let prompt_len = r.random_range(1..=2);
    let l_in = r.random_range(3..=12 - top_n * prompt_len);
    ArchConfig {
        l_in,
        l_out: r.random_range(2..=12),
        channels: r.random_range(1..=3),
        d_model: d,
        n_layers: r.random_range(1..=2),
        heads,
        fftr_layers: 1,
        aafn_heads: heads,
        pool_size: r.random_range(top_n.max(1)..=4),
        prompt_len,
        top_n,
    }
}

fn rand_pair(arch: &ArchConfig, r: &mut rng::Rng) -> WindowPair {
    WindowPair {
        x_in: rand_t(r, &[arch.l_in, arch.channels], -1.5, 1.5),
        x_out: rand_t(r, &[arch.l_out, arch.channels], -1.5, 1.5),
        y_in: vec![0; arch.l_in],
        y_out: vec![0; arch.l_out],
        origin: 0,
    }
}

/// Compares analytic parameter gradients of `loss` with central differences
/// on a random sample of coordinates per tracked tensor.
fn check_params(
    name: &str,
    bundle: &Bundle,
    track: &[&str],
    per_tensor: usize,
    loss: &dyn Fn(&Bundle, &mut Graph, &mut prognos_core::autodiff::Binder) -> NodeId,
    r: &mut rng::Rng,
) -> CaseResult {
    let mut g = Graph::new();
    let mut b = bundle.binder(Track::prefixes(track));
    let l = loss(bundle, &mut g, &mut b);
    let grads: BTreeMap<String, Tensor> = g.backward(l).unwrap().into_named();
    let value = |m: &Bundle| {
        let mut g = Graph::new();
        let mut b = m.binder(Track::None);
        let l = loss(m, &mut g, &mut b);
        g.value(l).item()
    };
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let names: Vec<String> = bundle
        .store
        .names()
        .filter(|n| track.iter().any(|p| n.starts_with(p)))
        .cloned()
        .collect();
    for n in names {
        let len = bundle.store.get(&n).unwrap().len();
        for _ in 0..per_tensor.min(len) {
            let j = r.random_range(0..len);
            let f = |xs: &[Tensor]| {
                let mut m = bundle.clone();
                *m.store.get_mut(&n).unwrap() = xs[0].clone();
                value(&m)
            };
            let base = [bundle.store.get(&n).unwrap().clone()];
            let num = central(&f, &base, 0, j, H);
            let a = grads.get(&n).map(|t| t.data()[j]).unwrap_or(0.0);
            max_rel = max_rel.max(rel_err(a, num, FLOOR));
            checked += 1;
        }
    }
    CaseResult { name: name.to_string(), max_rel, checked }
}

/// One randomized case for each composite loss.
pub fn loss_cases(seed: u64, r: &mut rng::Rng) -> Vec<CaseResult> {
    let arch = small_arch(r);
    let mut bundle = Bundle::init(&arch, r.random_bool(0.5), seed).unwrap();
    bundle.frozen.fftr = true;
    bundle.frozen.aafn = true;
    bundle.frozen.pool = true;
    let pair = rand_pair(&arch, r);
    let per = 3;
    let mut out = Vec::new();

    // anomaly network objective with learnable injection magnitudes
    let kind = [AnomalyType::Global, AnomalyType::Trend, AnomalyType::Contextual, AnomalyType::Shapelet]
        [r.random_range(0..4)];
    let spec_in = InjectionSpec::new(kind, 0, arch.l_in.min(3), vec![0]);
    let spec_out = InjectionSpec::new(kind, 1, arch.l_out.min(4), vec![arch.channels - 1]);
    let p_in = Perturbation::plan(&pair.x_in, &spec_in, r).unwrap();
    let p_out = Perturbation::plan(&pair.x_out, &spec_out, r).unwrap();
    let y: Vec<f64> = p_out.labels(arch.l_out).iter().map(|&v| v as f64).collect();
    for lk in [LossKind::Mse, LossKind::Bce] {
        let (pi, po, yy, x) = (&p_in, &p_out, &y, &pair);
        out.push(check_params(
            &format!("anomaly_network_{lk:?}").to_lowercase(),
            &bundle,
            &["aafn.", "inject."],
            per,
            &|m, g, b| {
                let inj = |g: &mut Graph, b: &mut prognos_core::autodiff::Binder, t: &Tensor, p: &Perturbation| {
                    let raw = b.get(g, &p.spec.kind.param_name()).unwrap();
                    let mm = g.softplus(raw);
                    let (v, jac) = p.apply(t, g.value(mm).item());
                    g.linearized(v, mm, jac).unwrap()
                };
                let xi = inj(g, b, &x.x_in, pi);
                let xo = inj(g, b, &x.x_out, po);
                let (z, p) = aafn::forward_node(&m.arch, g, b, xo, xi).unwrap();
                aafn::loss_node(g, z, p, yy, lk).unwrap()
            },
            r,
        ));
    }

    // divergence objective; the cap is set high so the KL term is smooth
    let x_in = pair.x_in.clone();
    out.push(check_params(
        "divergence",
        &bundle,
        &["pool."],
        per,
        &|m, g, b| prompt::divergence_node(m, g, b, &x_in, 0.7, 1e6).unwrap().loss,
        r,
    ));

    // forecasting objective on clean and injected views
    let xi_z = rand_t(r, &[arch.l_in, arch.channels], -1.5, 1.5);
    let xo_z = rand_t(r, &[arch.l_out, arch.channels], -1.5, 1.5);
    let fp = &pair;
    out.push(check_params(
        "forecasting",
        &bundle,
        &["theta.", "emb_f.", "out_f."],
        per,
        &|m, g, b| {
            let a = g.constant(xi_z.clone());
            let c = g.constant(xo_z.clone());
            train::forecasting_loss_node(m, g, b, fp, a, c).unwrap()
        },
        r,
    ));

    // anomaly-weighted forecasting; weights are fixed at the base point,
    // matching their treatment as constants
    let w = aafn::anomaly_weights(&bundle, &pair.x_in, &bundle.forecast(&pair.x_in).unwrap()).unwrap();
    out.push(check_params(
        "anomaly_weighted_forecast",
        &bundle,
        &["theta.", "emb_f.", "out_f."],
        per,
        &|m, g, b| {
            let xi = g.constant(fp.x_in.clone());
            let xo = g.constant(fp.x_out.clone());
            let f = m.forecast_node(g, b, xi).unwrap();
            train::weighted_mse_node(g, f, xo, &w).unwrap()
        },
        r,
    ));

    // reconstruction objective with and without prompts
    let ad = if bundle.shared_backbone { "theta." } else { "theta_ad." };
    for use_prompts in [true, false] {
        out.push(check_params(
            if use_prompts { "reconstruction_prompted" } else { "reconstruction_plain" },
            &bundle,
            &[ad, "emb_ad.", "out_ad."],
            per,
            &|m, g, b| train::reconstruction_loss_node(m, g, b, &fp.x_in, use_prompts).unwrap(),
            r,
        ));
    }
    out
}

/// `rounds` randomized rounds of every op and every composite loss.
pub fn run_suite(seed: u64, rounds: usize) -> Vec<CaseResult> {
    let mut r = rng::stream(seed, "gradcheck");
    let mut all = Vec::new();
    for i in 0..rounds {
        all.extend(op_cases(&mut r));
        all.extend(loss_cases(seed.wrapping_add(i as u64), &mut r));
    }
    all
}
