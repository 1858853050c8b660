//! The model bundle: shared transformer backbone, task heads, the `[CLS]`
//! feature extractor, the anomaly-probability network and the prompt pool.
//!
//! All parameters live in one [`ParamStore`] under component prefixes. The
//! forecasting path is `out_f ∘ theta ∘ emb_f` and the reconstruction path is
//! `out_ad ∘ theta ∘ emb_ad`; both read the same `theta.*` parameters unless
//! the bundle was built without a shared backbone, in which case the
//! reconstruction path reads `theta_ad.*`.

use crate::aafn;
use crate::autodiff::{Binder, Graph, NodeId, ParamStore, Tensor, Track};
use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::inject::{initial_raw_magnitude, AnomalyType};
use crate::layers::{self, init_encoder, init_linear, normal, uniform};
use crate::prompt;
use crate::rng;

pub const THETA: &str = "theta.";
pub const THETA_AD: &str = "theta_ad.";
pub const EMB_F: &str = "emb_f.";
pub const EMB_AD: &str = "emb_ad.";
pub const OUT_F: &str = "out_f.";
pub const OUT_AD: &str = "out_ad.";
pub const FFTR: &str = "fftr.";
pub const AAFN: &str = "aafn.";
pub const POOL: &str = "pool.";
pub const INJECT: &str = "inject.";

const POS_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Forecast,
    Detect,
}

/// Which auxiliary components are frozen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FreezeFlags {
    pub fftr: bool,
    pub aafn: bool,
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub arch: ArchConfig,
    pub shared_backbone: bool,
    pub store: ParamStore,
    pub frozen: FreezeFlags,
}

impl Bundle {
    /// Fresh bundle. Each component draws from its own named stream, so
    /// toggling one component leaves the others' initial weights unchanged.
    pub fn init(arch: &ArchConfig, shared_backbone: bool, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (d, c) = (arch.d_model, arch.channels);
        let mut store = ParamStore::new();

        let mut r = rng::stream(seed, "init.theta");
        init_encoder(&mut store, THETA, arch.n_layers, d, &mut r)?;
        if !shared_backbone {
            let mut r = rng::stream(seed, "init.theta_ad");
            init_encoder(&mut store, THETA_AD, arch.n_layers, d, &mut r)?;
        }

        let mut r = rng::stream(seed, "init.heads");
        init_embedding(&mut store, "emb_f", c, d, arch.l_in, &mut r)?;
        init_embedding(&mut store, "emb_ad", c, d, ad_capacity(arch), &mut r)?;
        let tb = 1.0 / (arch.l_in as f64).sqrt();
        store.insert("out_f.wt", uniform(&[arch.l_out, arch.l_in], tb, &mut r))?;
        store.insert("out_f.bt", uniform(&[arch.l_out], tb, &mut r))?;
        init_linear(&mut store, "out_f.proj", d, c, &mut r)?;
        init_linear(&mut store, "out_ad.proj", d, c, &mut r)?;

        let mut r = rng::stream(seed, "init.fftr");
        init_embedding(&mut store, "fftr.emb", c, d, fftr_capacity(arch), &mut r)?;
        store.insert("fftr.cls", normal(&[1, d], POS_STD, &mut r))?;
        init_encoder(&mut store, "fftr.enc.", arch.fftr_layers, d, &mut r)?;
        init_linear(&mut store, "fftr.out", d, c, &mut r)?;

        let mut r = rng::stream(seed, "init.aafn");
        aafn::init(&mut store, arch, &mut r)?;

        let mut r = rng::stream(seed, "init.pool");
        prompt::init(&mut store, arch, &mut r)?;

        for t in AnomalyType::ALL {
            store.insert(t.param_name(), Tensor::scalar(initial_raw_magnitude()))?;
        }

        Ok(Self {
            arch: arch.clone(),
            shared_backbone,
            store,
            frozen: FreezeFlags::default(),
        })
    }

    pub fn backbone_prefix(&self, head: Head) -> &'static str {
        match head {
            Head::Detect if !self.shared_backbone => THETA_AD,
            _ => THETA,
        }
    }

    pub fn binder(&self, track: Track) -> Binder<'_> {
        Binder::new(&self.store, track)
    }

    /// Affine per-step channel embedding plus positional rows `0..S`.
    pub fn embed(&self, g: &mut Graph, b: &mut Binder, head: Head, x: NodeId) -> Result<NodeId> {
        let name = match head {
            Head::Forecast => "emb_f",
            Head::Detect => "emb_ad",
        };
        embed_with(g, b, name, x)
    }

    /// All backbone blocks for `head`'s path; also returns the first block's
    /// per-head attention maps.
    pub fn backbone_forward(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        head: Head,
        tokens: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        layers::encoder(
            g,
            b,
            self.backbone_prefix(head),
            self.arch.n_layers,
            tokens,
            self.arch.heads,
        )
    }

    /// First-block attention maps of the backbone for `head`'s path.
    pub fn first_attention(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        head: Head,
        tokens: NodeId,
    ) -> Result<Vec<NodeId>> {
        layers::encoder_first_attention(g, b, self.backbone_prefix(head), tokens, self.arch.heads)
    }

    /// Last-block attention maps; unlike the first block, these see the
    /// effect of attached prompts on the original token rows.
    pub fn last_attention(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        head: Head,
        tokens: NodeId,
    ) -> Result<Vec<NodeId>> {
        layers::encoder_last_attention(
            g,
            b,
            self.backbone_prefix(head),
            self.arch.n_layers,
            tokens,
            self.arch.heads,
        )
    }

    /// `x_in [L_in×C] → x̂_out [L_out×C]`.
    pub fn forecast_node(&self, g: &mut Graph, b: &mut Binder, x_in: NodeId) -> Result<NodeId> {
        let v = g.value(x_in);
        if v.shape() != [self.arch.l_in, self.arch.channels] {
            return Err(Error::dim(format!(
                "forecast input {:?}, expected [{}, {}]",
                v.shape(),
                self.arch.l_in,
                self.arch.channels
            )));
        }
        let e = self.embed(g, b, Head::Forecast, x_in)?;
        let (h, _) = self.backbone_forward(g, b, Head::Forecast, e)?;
        self.forecast_head(g, b, h)
    }

    /// Temporal affine map `L_in → L_out` per feature, then `D → C` per step.
    pub fn forecast_head(&self, g: &mut Graph, b: &mut Binder, tokens: NodeId) -> Result<NodeId> {
        let wt = b.get(g, "out_f.wt")?;
        let bt = b.get(g, "out_f.bt")?;
        let t = g.matmul(wt, tokens)?;
        let t = g.add_col_bias(t, bt)?;
        layers::linear(g, b, "out_f.proj", t)
    }

    /// `o_AD` applied to backbone output tokens.
    pub fn detect_head(&self, g: &mut Graph, b: &mut Binder, tokens: NodeId) -> Result<NodeId> {
        layers::linear(g, b, "out_ad.proj", tokens)
    }

    /// `x [S×C] → x^r [S×C]` through the reconstruction path, `S ≤ L_in + N·L_z`.
    pub fn reconstruct_node(&self, g: &mut Graph, b: &mut Binder, x: NodeId) -> Result<NodeId> {
        self.check_channels(g.value(x))?;
        let e = self.embed(g, b, Head::Detect, x)?;
        let (h, _) = self.backbone_forward(g, b, Head::Detect, e)?;
        self.detect_head(g, b, h)
    }

    fn check_channels(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.arch.channels {
            return Err(Error::dim(format!(
                "expected [S, {}] input, got {:?}",
                self.arch.channels,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Runs the feature extractor on `[CLS; embed(x)]`; returns all output
    /// tokens including the `[CLS]` row.
    fn fftr_tokens(&self, g: &mut Graph, b: &mut Binder, x: NodeId) -> Result<NodeId> {
        self.check_channels(g.value(x))?;
        let e = embed_with(g, b, "fftr.emb", x)?;
        let cls = b.get(g, "fftr.cls")?;
        let seq = g.concat_rows(&[cls, e])?;
        let (h, _) = layers::encoder(
            g,
            b,
            "fftr.enc.",
            self.arch.fftr_layers,
            seq,
            self.arch.heads,
        )?;
        Ok(h)
    }

    /// Query vector `[1×D]`: the `[CLS]` position of the feature extractor.
    pub fn query_node(&self, g: &mut Graph, b: &mut Binder, x: NodeId) -> Result<NodeId> {
        let h = self.fftr_tokens(g, b, x)?;
        g.slice_rows(h, 0, 1)
    }

    /// Feature-extractor reconstruction with the `[CLS]` row dropped.
    pub fn fftr_reconstruct_node(&self, g: &mut Graph, b: &mut Binder, x: NodeId) -> Result<NodeId> {
        let h = self.fftr_tokens(g, b, x)?;
        let s = g.value(h).rows();
        let body = g.slice_rows(h, 1, s)?;
        layers::linear(g, b, "fftr.out", body)
    }

    pub fn forecast(&self, x_in: &Tensor) -> Result<Tensor> {
        self.eval_fn(x_in, |m, g, b, x| m.forecast_node(g, b, x))
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.eval_fn(x, |m, g, b, x| m.reconstruct_node(g, b, x))
    }

    pub fn extract_query(&self, x: &Tensor) -> Result<Tensor> {
        let q = self.eval_fn(x, |m, g, b, x| m.query_node(g, b, x))?;
        q.reshape(vec![self.arch.d_model])
    }

    pub fn fftr_reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.eval_fn(x, |m, g, b, x| m.fftr_reconstruct_node(g, b, x))
    }

    /// Per-step squared reconstruction error of the feature extractor,
    /// averaged over channels.
    pub fn fftr_error_profile(&self, x: &Tensor) -> Result<Vec<f64>> {
        let r = self.fftr_reconstruct(x)?;
        Ok(step_errors(x, &r))
    }

    /// Injection placement: the `len`-step region with the largest
    /// feature-extractor reconstruction error.
    pub fn locate_injection_region(&self, x: &Tensor, len: usize) -> Result<(usize, usize)> {
        if !self.frozen.fftr {
            return Err(Error::usage(
                "feature extractor must be trained and frozen before placing injections",
            ));
        }
        crate::inject::locate_region(&self.fftr_error_profile(x)?, len)
    }

    /// Output tokens and first-block attention `[h×S×S]` for given tokens.
    pub fn backbone_eval(&self, head: Head, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let mut b = self.binder(Track::None);
        let t = g.constant(tokens.clone());
        let (out, maps) = self.backbone_forward(&mut g, &mut b, head, t)?;
        Ok((g.value(out).clone(), layers::stack_maps(&g, &maps)))
    }

    pub fn embed_eval(&self, head: Head, x: &Tensor) -> Result<Tensor> {
        self.eval_fn(x, |m, g, b, x| m.embed(g, b, head, x))
    }

    fn eval_fn(
        &self,
        x: &Tensor,
        f: impl FnOnce(&Self, &mut Graph, &mut Binder, NodeId) -> Result<NodeId>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = self.binder(Track::None);
        let xn = g.constant(x.clone());
        let out = f(self, &mut g, &mut b, xn)?;
        Ok(g.value(out).clone())
    }

    /// Scalar count per component; the backbone is counted once when shared.
    pub fn param_counts(&self) -> Vec<(&'static str, usize)> {
        let s = &self.store;
        vec![
            ("theta", s.count_with_prefix(THETA)),
            ("theta_ad", s.count_with_prefix(THETA_AD)),
            (
                "heads",
                s.count_with_prefix(EMB_F)
                    + s.count_with_prefix(EMB_AD)
                    + s.count_with_prefix(OUT_F)
                    + s.count_with_prefix(OUT_AD),
            ),
            ("fftr", s.count_with_prefix(FFTR)),
            ("aafn", s.count_with_prefix(AAFN)),
            ("pool", s.count_with_prefix(POOL)),
            ("inject", s.count_with_prefix(INJECT)),
        ]
    }

    /// Store prefixes updated by the main training phase.
    pub fn main_training_prefixes(&self) -> Vec<&'static str> {
        let mut v = vec![THETA, EMB_F, EMB_AD, OUT_F, OUT_AD];
        if !self.shared_backbone {
            v.push(THETA_AD);
        }
        v
    }
}

/// Positional capacity of the reconstruction path: room for the prompts.
pub fn ad_capacity(arch: &ArchConfig) -> usize {
    arch.l_in + arch.top_n * arch.prompt_len
}

pub fn fftr_capacity(arch: &ArchConfig) -> usize {
    arch.l_in.max(arch.l_out)
}

fn init_embedding(
    store: &mut ParamStore,
    name: &str,
    c: usize,
    d: usize,
    capacity: usize,
    r: &mut rng::Rng,
) -> Result<()> {
    init_linear(store, name, c, d, r)?;
    store.insert(format!("{name}.pos"), normal(&[capacity, d], POS_STD, r))?;
    Ok(())
}

pub(crate) fn embed_with(g: &mut Graph, b: &mut Binder, name: &str, x: NodeId) -> Result<NodeId> {
    let s = g.value(x).rows();
    let pos = b.get(g, &format!("{name}.pos"))?;
    let cap = g.value(pos).rows();
    if s > cap {
        return Err(Error::dim(format!(
            "{name}: sequence of {s} steps exceeds positional capacity {cap}"
        )));
    }
    let h = layers::linear(g, b, name, x)?;
    let p = g.slice_rows(pos, 0, s)?;
    g.add(h, p)
}

/// Channel-mean squared error per step.
pub fn step_errors(x: &Tensor, r: &Tensor) -> Vec<f64> {
    let c = x.cols();
    x.data()
        .chunks(c)
        .zip(r.data().chunks(c))
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / c as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_arch() -> ArchConfig {
        ArchConfig {
            l_in: 12,
            l_out: 8,
            channels: 2,
            d_model: 8,
            n_layers: 2,
            heads: 2,
            fftr_layers: 2,
            aafn_heads: 2,
            pool_size: 4,
            prompt_len: 2,
            top_n: 2,
        }
    }

    fn wave(t: usize, c: usize, phase: f64) -> Tensor {
        Tensor::matrix(
            t,
            c,
            (0..t * c)
                .map(|i| ((i / c) as f64 * 0.4 + phase + i as f64 % 3.0).sin())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn embed_zero_input_gives_bias_plus_position() {
        let arch = small_arch();
        let m = Bundle::init(&arch, true, 0).unwrap();
        let e = m.embed_eval(Head::Forecast, &Tensor::zeros(&[5, 2])).unwrap();
        let bias = m.store.get("emb_f.b").unwrap();
        let pos = m.store.get("emb_f.pos").unwrap();
        for r in 0..5 {
            for c in 0..arch.d_model {
                assert!((e.at(r, c) - (bias.data()[c] + pos.at(r, c))).abs() < 1e-15);
            }
        }
        assert_eq!(e.shape(), &[5, arch.d_model]);
    }

    #[test]
    fn heads_have_independent_embeddings() {
        let m = Bundle::init(&small_arch(), true, 0).unwrap();
        let x = wave(6, 2, 0.0);
        let a = m.embed_eval(Head::Forecast, &x).unwrap();
        let b = m.embed_eval(Head::Detect, &x).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-3);
    }

    #[test]
    fn embed_rejects_over_capacity() {
        let m = Bundle::init(&small_arch(), true, 0).unwrap();
        let too_long = wave(13, 2, 0.0);
        assert!(matches!(
            m.embed_eval(Head::Forecast, &too_long),
            Err(Error::Dimension(_))
        ));
        // the reconstruction path admits L_in + N·L_z = 16 steps
        assert!(m.reconstruct(&wave(16, 2, 0.0)).is_ok());
        assert!(m.reconstruct(&wave(17, 2, 0.0)).is_err());
    }

    #[test]
    fn backbone_attention_rows_are_stochastic() {
        let m = Bundle::init(&small_arch(), true, 1).unwrap();
        let tokens = m.embed_eval(Head::Detect, &wave(9, 2, 0.3)).unwrap();
        let (out, attn) = m.backbone_eval(Head::Detect, &tokens).unwrap();
        assert_eq!(out.shape(), tokens.shape());
        assert_eq!(attn.shape(), &[2, 9, 9]);
        for row in attn.data().chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
        let one = m.embed_eval(Head::Detect, &wave(1, 2, 0.3)).unwrap();
        let (_, attn) = m.backbone_eval(Head::Detect, &one).unwrap();
        assert_eq!(attn.data(), &[1.0, 1.0]);
    }

    #[test]
    fn first_attention_matches_backbone_forward() {
        let m = Bundle::init(&small_arch(), true, 2).unwrap();
        let tokens = m.embed_eval(Head::Detect, &wave(10, 2, 0.1)).unwrap();
        let (_, full) = m.backbone_eval(Head::Detect, &tokens).unwrap();
        let mut g = Graph::new();
        let mut b = m.binder(Track::None);
        let t = g.constant(tokens);
        let maps = m.first_attention(&mut g, &mut b, Head::Detect, t).unwrap();
        assert_eq!(layers::stack_maps(&g, &maps), full);
    }

    #[test]
    fn non_finite_tokens_are_named() {
        let m = Bundle::init(&small_arch(), true, 0).unwrap();
        let mut bad = Tensor::zeros(&[3, 8]);
        bad.data_mut()[4] = f64::NAN;
        match m.backbone_eval(Head::Forecast, &bad) {
            Err(Error::Numeric { layer, .. }) => assert!(layer.starts_with("theta.")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn forecast_and_reconstruct_shapes() {
        let arch = small_arch();
        let m = Bundle::init(&arch, true, 0).unwrap();
        let x = wave(arch.l_in, 2, 0.0);
        let f = m.forecast(&x).unwrap();
        assert_eq!(f.shape(), &[arch.l_out, 2]);
        assert_eq!(m.forecast(&x).unwrap(), f);
        assert!(m.forecast(&wave(11, 2, 0.0)).is_err());
        let r = m.reconstruct(&x).unwrap();
        assert_eq!(r.shape(), x.shape());
        assert!(r.is_finite());
    }

    #[test]
    fn query_and_fftr_reconstruction() {
        let arch = small_arch();
        let m = Bundle::init(&arch, true, 0).unwrap();
        let x = wave(arch.l_in, 2, 0.0);
        let q = m.extract_query(&x).unwrap();
        assert_eq!(q.shape(), &[arch.d_model]);
        let r = m.fftr_reconstruct(&x).unwrap();
        assert_eq!(r.shape(), x.shape());
        assert_eq!(m.fftr_error_profile(&x).unwrap().len(), arch.l_in);

        // reversing token order changes the query
        let mut rev = Vec::new();
        for t in (0..arch.l_in).rev() {
            rev.extend_from_slice(x.row(t));
        }
        let xr = Tensor::matrix(arch.l_in, 2, rev).unwrap();
        assert!(m.extract_query(&xr).unwrap().max_abs_diff(&q) > 1e-9);
    }

    #[test]
    fn placement_requires_frozen_extractor() {
        let mut m = Bundle::init(&small_arch(), true, 0).unwrap();
        let x = wave(12, 2, 0.0);
        assert!(matches!(m.locate_injection_region(&x, 3), Err(Error::Usage(_))));
        m.frozen.fftr = true;
        let (a, b) = m.locate_injection_region(&x, 3).unwrap();
        assert_eq!(b - a, 3);
    }

    #[test]
    fn parameter_count_counts_shared_backbone_once() {
        let arch = small_arch();
        let shared = Bundle::init(&arch, true, 0).unwrap();
        let total: usize = shared.param_counts().iter().map(|(_, n)| n).sum();
        assert_eq!(total, shared.store.num_scalars());
        assert_eq!(shared.store.count_with_prefix(THETA_AD), 0);
        let split = Bundle::init(&arch, false, 0).unwrap();
        assert_eq!(
            split.store.num_scalars() - shared.store.num_scalars(),
            shared.store.count_with_prefix(THETA)
        );
        // ablations share initialisations of common components
        assert_eq!(split.store.snapshot(THETA), shared.store.snapshot(THETA));
        assert_eq!(split.store.snapshot(POOL), shared.store.snapshot(POOL));
    }

    #[test]
    fn shared_backbone_couples_both_paths() {
        let arch = small_arch();
        let mut m = Bundle::init(&arch, true, 0).unwrap();
        let x = wave(arch.l_in, 2, 0.0);
        let before = m.reconstruct(&x).unwrap();
        // one gradient step through the forecasting path only
        let mut g = Graph::new();
        let mut b = m.binder(Track::prefixes(&[THETA, EMB_F, OUT_F]));
        let xn = g.constant(x.clone());
        let f = m.forecast_node(&mut g, &mut b, xn).unwrap();
        let target = g.constant(Tensor::zeros(&[arch.l_out, 2]));
        let l = g.mse(f, target).unwrap();
        let grads = g.backward(l).unwrap().into_named();
        assert!(grads.keys().any(|k| k.starts_with(THETA)));
        let cfg = crate::autodiff::AdamConfig { lr: 1e-2, ..Default::default() };
        m.store.adam_step(&grads, &cfg).unwrap();
        assert!(m.reconstruct(&x).unwrap().max_abs_diff(&before) > 1e-6);

        let mut split = Bundle::init(&arch, false, 0).unwrap();
        let before = split.reconstruct(&x).unwrap();
        let mut g = Graph::new();
        let mut b = split.binder(Track::prefixes(&[THETA, EMB_F, OUT_F]));
        let xn = g.constant(x.clone());
        let f = split.forecast_node(&mut g, &mut b, xn).unwrap();
        let target = g.constant(Tensor::zeros(&[arch.l_out, 2]));
        let l = g.mse(f, target).unwrap();
        let grads = g.backward(l).unwrap().into_named();
        split.store.adam_step(&grads, &cfg).unwrap();
        assert_eq!(split.reconstruct(&x).unwrap(), before);
    }
}
