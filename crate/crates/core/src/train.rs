//! Two-phase training: feature-extractor pre-training, then the pre-training
//! objective (anomaly network, prompt pool, forecaster), then main training of
//! the backbone and its four heads.
//!
//! Every loss term is recorded in its own graph with its own tracking set, so
//! a term can only produce gradients for the parameters it is meant to train.
//! Per-sample gradients are averaged over a batch and applied in one Adam step.

use std::collections::BTreeMap;
use std::fmt;

use log::{debug, info};
use rand::seq::SliceRandom;

use crate::aafn::{self, LossKind};
use crate::autodiff::{clip_global_norm, AdamConfig, Binder, Graph, NodeId, Tensor, Track};
use crate::config::TrainConfig;
use crate::data::{make_windows, SeriesSet, WindowPair};
use crate::error::{Error, Result};
use crate::inject::{sample_random_injection, Perturbation};
use crate::model::{Bundle, AAFN, EMB_F, FFTR, INJECT, OUT_F, POOL, THETA};
use crate::prompt;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Fftr,
    Pretrain,
    Main,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Fftr => "fftr",
            Phase::Pretrain => "pretrain",
            Phase::Main => "main",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub phase: Phase,
    pub epoch: usize,
    pub term: &'static str,
    pub value: f64,
}

/// Per-step losses in long format: one row per (step, term).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<LogRow>,
}

impl LossLog {
    pub const HEADER: &'static str = "step,phase,epoch,term,value";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{:?}\n",
                r.step, r.phase, r.epoch, r.term, r.value
            ));
        }
        s
    }

    /// Mean of `term` per epoch of `phase`, in epoch order.
    pub fn epoch_means(&self, phase: Phase, term: &str) -> Vec<f64> {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.phase == phase && r.term == term) {
            let e = acc.entry(r.epoch).or_default();
            e.0 += r.value;
            e.1 += 1;
        }
        acc.values().map(|(s, n)| s / *n as f64).collect()
    }
}

type GradMap = BTreeMap<String, Tensor>;

fn add_scaled(acc: &mut GradMap, grads: GradMap, k: f64) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += k * y;
                }
            }
            None => {
                let mut g = g;
                if k != 1.0 {
                    g.data_mut().iter_mut().for_each(|x| *x *= k);
                }
                acc.insert(name, g);
            }
        }
    }
}

/// Value and weighted gradients of one loss term for one sample.
struct TermOut {
    value: f64,
    grads: GradMap,
}

fn run_term(
    bundle: &Bundle,
    track: Track,
    name: &'static str,
    weight: f64,
    build: impl FnOnce(&mut Graph, &mut Binder) -> Result<NodeId>,
) -> Result<TermOut> {
    let mut g = Graph::new();
    let mut b = bundle.binder(track);
    let loss = build(&mut g, &mut b)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Training(format!("loss term {name} is not finite ({value})")));
    }
    let grads = g.backward(loss)?.into_named();
    let mut out = GradMap::new();
    add_scaled(&mut out, grads, weight);
    Ok(TermOut { value, grads: out })
}

/// `½(mse(F(x_in), x_out) + mse(F(x_in_z), x_out_z))`.
pub fn forecasting_loss_node(
    bundle: &Bundle,
    g: &mut Graph,
    b: &mut Binder,
    pair: &WindowPair,
    x_in_z: NodeId,
    x_out_z: NodeId,
) -> Result<NodeId> {
    let xi = g.constant(pair.x_in.clone());
    let xo = g.constant(pair.x_out.clone());
    let f = bundle.forecast_node(g, b, xi)?;
    let clean = g.mse(f, xo)?;
    let fz = bundle.forecast_node(g, b, x_in_z)?;
    let inj = g.mse(fz, x_out_z)?;
    let s = g.add(clean, inj)?;
    Ok(g.scale(s, 0.5))
}

/// `½(mse(x, prompted reconstruction) + mse(x, reconstruction))`, or just the
/// plain reconstruction term when prompting is disabled.
pub fn reconstruction_loss_node(
    bundle: &Bundle,
    g: &mut Graph,
    b: &mut Binder,
    x_in: &Tensor,
    use_prompts: bool,
) -> Result<NodeId> {
    if use_prompts && !bundle.frozen.pool {
        return Err(Error::usage("reconstruction loss needs a frozen prompt pool"));
    }
    let x = g.constant(x_in.clone());
    let r = bundle.reconstruct_node(g, b, x)?;
    let plain = g.mse(x, r)?;
    if !use_prompts {
        return Ok(plain);
    }
    let p = prompt::prompted_reconstruct_node(bundle, g, b, x_in, x)?;
    let prompted = g.mse(x, p)?;
    let s = g.add(prompted, plain)?;
    Ok(g.scale(s, 0.5))
}

/// Forecast error weighted per future step by the frozen anomaly network; the
/// weights are constants broadcast over channels. `weighted = false` gives
/// plain MSE.
pub fn anomaly_aware_loss_node(
    bundle: &Bundle,
    g: &mut Graph,
    b: &mut Binder,
    pair: &WindowPair,
    weighted: bool,
) -> Result<NodeId> {
    let xi = g.constant(pair.x_in.clone());
    let xo = g.constant(pair.x_out.clone());
    let f = bundle.forecast_node(g, b, xi)?;
    if !weighted {
        return g.mse(f, xo);
    }
    let w = aafn::anomaly_weights(bundle, &pair.x_in, g.value(f))?;
    weighted_mse_node(g, f, xo, &w)
}

/// Mean over steps and channels of `w[j] · (a − b)²`.
pub fn weighted_mse_node(g: &mut Graph, a: NodeId, b: NodeId, w: &[f64]) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let wn = g.constant(Tensor::vector(w.to_vec()));
    let s = g.scale_rows(sq, wn)?;
    Ok(g.mean(s))
}

/// Injected view of `x` as a function of the learnable magnitude of the
/// perturbation's anomaly type.
fn injected_node(g: &mut Graph, b: &mut Binder, x: &Tensor, p: &Perturbation) -> Result<NodeId> {
    let raw = b.get(g, &p.spec.kind.param_name())?;
    let m = g.softplus(raw);
    let mv = g.value(m).item();
    let (xz, jac) = p.apply(x, mv);
    g.linearized(xz, m, jac)
}

/// Labels as `f64` for graph use.
fn as_f64(y: &[u8]) -> Vec<f64> {
    y.iter().map(|&v| v as f64).collect()
}

pub struct Trainer<'c> {
    pub cfg: &'c TrainConfig,
    pub log: LossLog,
    step: u64,
    adam: AdamConfig,
    hook: Option<Box<dyn FnMut(Phase, usize, &Bundle) + 'c>>,
}

impl<'c> Trainer<'c> {
    pub fn new(cfg: &'c TrainConfig) -> Self {
        Self {
            cfg,
            log: LossLog::default(),
            step: 0,
            adam: AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            hook: None,
        }
    }

    /// Called with the bundle after every epoch of every phase, and once with
    /// epoch 0 before the pre-training phase starts.
    pub fn on_epoch(mut self, f: impl FnMut(Phase, usize, &Bundle) + 'c) -> Self {
        self.hook = Some(Box::new(f));
        self
    }

    fn call_hook(&mut self, phase: Phase, epoch: usize, bundle: &Bundle) {
        if let Some(h) = self.hook.as_mut() {
            h(phase, epoch, bundle);
        }
    }

    fn loss_kind(&self) -> LossKind {
        if self.cfg.ablation.bce_aafn {
            LossKind::Bce
        } else {
            LossKind::Mse
        }
    }

    fn batches(&self, n: usize, phase: Phase, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut r = rng::stream(self.cfg.seed, &format!("shuffle.{phase}.{epoch}"));
        order.shuffle(&mut r);
        order
            .chunks(self.cfg.batch_size.max(1))
            .map(|c| c.to_vec())
            .collect()
    }

    fn apply(&mut self, bundle: &mut Bundle, mut grads: GradMap, n: usize) -> Result<()> {
        let k = 1.0 / n as f64;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
        clip_global_norm(&mut grads, self.cfg.clip_norm);
        bundle.store.adam_step(&grads, &self.adam).map_err(|e| match e {
            Error::Training(m) => Error::Training(format!("step {}: {m}", self.step)),
            e => e,
        })?;
        self.step += 1;
        Ok(())
    }

    fn record(&mut self, phase: Phase, epoch: usize, terms: &[(&'static str, f64)]) {
        for &(term, value) in terms {
            self.log.rows.push(LogRow {
                step: self.step,
                phase,
                epoch,
                term,
                value,
            });
        }
    }

    /// Reconstruction pre-training of the feature extractor over both halves
    /// of every window; freezes it afterwards.
    pub fn pretrain_fftr(&mut self, bundle: &mut Bundle, windows: &[WindowPair]) -> Result<()> {
        if windows.is_empty() {
            return Err(Error::usage("no training windows"));
        }
        for epoch in 1..=self.cfg.fftr_epochs {
            for batch in self.batches(windows.len(), Phase::Fftr, epoch) {
                let mut acc = GradMap::new();
                let mut total = 0.0;
                for &i in &batch {
                    let w = &windows[i];
                    let t = run_term(bundle, Track::prefixes(&[FFTR]), "fftr", 1.0, |g, b| {
                        let xi = g.constant(w.x_in.clone());
                        let xo = g.constant(w.x_out.clone());
                        let ri = bundle.fftr_reconstruct_node(g, b, xi)?;
                        let ro = bundle.fftr_reconstruct_node(g, b, xo)?;
                        let li = g.mse(ri, xi)?;
                        let lo = g.mse(ro, xo)?;
                        let s = g.add(li, lo)?;
                        Ok(g.scale(s, 0.5))
                    })
                    .map_err(|e| self.context(Phase::Fftr, e))?;
                    total += t.value;
                    add_scaled(&mut acc, t.grads, 1.0);
                }
                let n = batch.len();
                self.record(Phase::Fftr, epoch, &[("fftr", total / n as f64)]);
                self.apply(bundle, acc, n)
                    .map_err(|e| self.context(Phase::Fftr, e))?;
            }
            debug!("fftr epoch {epoch}: {:?}", self.log.epoch_means(Phase::Fftr, "fftr").last());
            self.call_hook(Phase::Fftr, epoch, bundle);
        }
        bundle.frozen.fftr = true;
        Ok(())
    }

    fn context(&self, phase: Phase, e: Error) -> Error {
        match e {
            Error::Training(m) => Error::Training(format!("{phase} phase, step {}: {m}", self.step)),
            e => e,
        }
    }

    /// Pre-training objective: anomaly network (with injection magnitudes),
    /// prompt pool and forecaster, each term routed to its own parameters.
    /// Freezes the anomaly network and pool afterwards.
    pub fn pretrain_phase(&mut self, bundle: &mut Bundle, windows: &[WindowPair]) -> Result<()> {
        if !bundle.frozen.fftr {
            return Err(Error::usage("pre-training needs a trained, frozen feature extractor"));
        }
        if windows.is_empty() {
            return Err(Error::usage("no training windows"));
        }
        let cfg = self.cfg;
        let ab = cfg.ablation;
        let kind = self.loss_kind();
        let mut inj_rng = rng::stream(cfg.seed, "inject.pretrain");
        self.call_hook(Phase::Pretrain, 0, bundle);
        for epoch in 1..=cfg.epochs {
            for batch in self.batches(windows.len(), Phase::Pretrain, epoch) {
                let mut acc = GradMap::new();
                let mut sums = [0.0f64; 4];
                for &i in &batch {
                    let w = &windows[i];
                    let inj = sample_random_injection(
                        w,
                        &mut |x| bundle.fftr_error_profile(x),
                        cfg.region_min,
                        cfg.region_max,
                        &mut inj_rng,
                    )?;
                    let (mut l_aaf, mut l_d) = (0.0, 0.0);
                    if !ab.no_aaf && cfg.lambda_aaf > 0.0 {
                        let y = as_f64(&inj.y_out(w.x_out.rows()));
                        let t = run_term(bundle, Track::prefixes(&[AAFN, INJECT]), "aaf", cfg.lambda_aaf, |g, b| {
                            let xi = injected_node(g, b, &w.x_in, &inj.input)?;
                            let xo = injected_node(g, b, &w.x_out, &inj.output)?;
                            let (z, p) = aafn::forward_node(&bundle.arch, g, b, xo, xi)?;
                            aafn::loss_node(g, z, p, &y, kind)
                        })
                        .map_err(|e| self.context(Phase::Pretrain, e))?;
                        l_aaf = t.value;
                        add_scaled(&mut acc, t.grads, 1.0);
                    }
                    if !ab.no_sap && cfg.lambda_d > 0.0 {
                        let t = run_term(bundle, Track::prefixes(&[POOL]), "divergence", cfg.lambda_d, |g, b| {
                            Ok(prompt::divergence_node(bundle, g, b, &w.x_in, cfg.lambda_k, cfg.kl_cap)?.loss)
                        })
                        .map_err(|e| self.context(Phase::Pretrain, e))?;
                        l_d = t.value;
                        add_scaled(&mut acc, t.grads, 1.0);
                    }
                    let mut l_f = 0.0;
                    if cfg.lambda_f > 0.0 {
                        let m_in = current_magnitude(bundle, &inj.input)?;
                        let m_out = current_magnitude(bundle, &inj.output)?;
                        let xi_z = inj.input.apply(&w.x_in, m_in).0;
                        let xo_z = inj.output.apply(&w.x_out, m_out).0;
                        let t = run_term(bundle, Track::prefixes(&[THETA, EMB_F, OUT_F]), "forecast", cfg.lambda_f, |g, b| {
                            let xi = g.constant(xi_z);
                            let xo = g.constant(xo_z);
                            forecasting_loss_node(bundle, g, b, w, xi, xo)
                        })
                        .map_err(|e| self.context(Phase::Pretrain, e))?;
                        l_f = t.value;
                        add_scaled(&mut acc, t.grads, 1.0);
                    }
                    let total = cfg.lambda_aaf * l_aaf + cfg.lambda_d * l_d + cfg.lambda_f * l_f;
                    for (s, v) in sums.iter_mut().zip([l_aaf, l_d, l_f, total]) {
                        *s += v;
                    }
                }
                let n = batch.len() as f64;
                let mut terms = Vec::with_capacity(4);
                if !ab.no_aaf && cfg.lambda_aaf > 0.0 {
                    terms.push(("aaf", sums[0] / n));
                }
                if !ab.no_sap && cfg.lambda_d > 0.0 {
                    terms.push(("divergence", sums[1] / n));
                }
                if cfg.lambda_f > 0.0 {
                    terms.push(("forecast", sums[2] / n));
                }
                terms.push(("total", sums[3] / n));
                self.record(Phase::Pretrain, epoch, &terms);
                self.apply(bundle, acc, batch.len())
                    .map_err(|e| self.context(Phase::Pretrain, e))?;
            }
            info!(
                "pretrain epoch {epoch}: total {:?}",
                self.log.epoch_means(Phase::Pretrain, "total").last()
            );
            self.call_hook(Phase::Pretrain, epoch, bundle);
        }
        bundle.frozen.aafn = true;
        bundle.frozen.pool = true;
        Ok(())
    }

    /// Main training of the backbone and the four heads with the anomaly
    /// network, pool and feature extractor frozen.
    pub fn main_phase(&mut self, bundle: &mut Bundle, windows: &[WindowPair]) -> Result<()> {
        let fr = bundle.frozen;
        if !(fr.fftr && fr.aafn && fr.pool) {
            return Err(Error::usage("main training needs a completed pre-training phase"));
        }
        if windows.is_empty() {
            return Err(Error::usage("no training windows"));
        }
        let cfg = self.cfg;
        let ab = cfg.ablation;
        let weighted = !(ab.no_aaf || ab.plain_mse_forecast);
        let prefixes = bundle.main_training_prefixes();
        for epoch in 1..=cfg.epochs {
            for batch in self.batches(windows.len(), Phase::Main, epoch) {
                let mut acc = GradMap::new();
                let mut sums = [0.0f64; 3];
                for &i in &batch {
                    let w = &windows[i];
                    let (mut l_r, mut l_af) = (0.0, 0.0);
                    if cfg.lambda_r > 0.0 {
                        let t = run_term(bundle, Track::prefixes(&prefixes), "reconstruction", cfg.lambda_r, |g, b| {
                            reconstruction_loss_node(bundle, g, b, &w.x_in, !ab.no_sap)
                        })
                        .map_err(|e| self.context(Phase::Main, e))?;
                        l_r = t.value;
                        add_scaled(&mut acc, t.grads, 1.0);
                    }
                    if cfg.lambda_af > 0.0 {
                        let t = run_term(bundle, Track::prefixes(&prefixes), "aware_forecast", cfg.lambda_af, |g, b| {
                            anomaly_aware_loss_node(bundle, g, b, w, weighted)
                        })
                        .map_err(|e| self.context(Phase::Main, e))?;
                        l_af = t.value;
                        add_scaled(&mut acc, t.grads, 1.0);
                    }
                    let total = cfg.lambda_r * l_r + cfg.lambda_af * l_af;
                    for (s, v) in sums.iter_mut().zip([l_r, l_af, total]) {
                        *s += v;
                    }
                }
                let n = batch.len() as f64;
                let mut terms = Vec::with_capacity(3);
                if cfg.lambda_r > 0.0 {
                    terms.push(("reconstruction", sums[0] / n));
                }
                if cfg.lambda_af > 0.0 {
                    terms.push(("aware_forecast", sums[1] / n));
                }
                terms.push(("total", sums[2] / n));
                self.record(Phase::Main, epoch, &terms);
                self.apply(bundle, acc, batch.len())
                    .map_err(|e| self.context(Phase::Main, e))?;
            }
            info!(
                "main epoch {epoch}: total {:?}",
                self.log.epoch_means(Phase::Main, "total").last()
            );
            self.call_hook(Phase::Main, epoch, bundle);
        }
        Ok(())
    }

    /// Full pipeline on a scaled series set.
    pub fn fit(&mut self, bundle: &mut Bundle, set: &SeriesSet) -> Result<()> {
        let windows = train_windows(bundle, set, self.cfg)?;
        self.pretrain_fftr(bundle, &windows)?;
        self.pretrain_phase(bundle, &windows)?;
        self.main_phase(bundle, &windows)
    }
}

fn current_magnitude(bundle: &Bundle, p: &Perturbation) -> Result<f64> {
    let raw = bundle.store.get(&p.spec.kind.param_name())?.item();
    Ok(crate::inject::effective_magnitude(raw))
}

pub fn train_windows(bundle: &Bundle, set: &SeriesSet, cfg: &TrainConfig) -> Result<Vec<WindowPair>> {
    let a = &bundle.arch;
    let (w, warn) = make_windows(&set.train, &set.train_labels, a.l_in, a.l_out, cfg.train_stride)?;
    if let Some(m) = warn {
        log::warn!("{m}");
    }
    if w.is_empty() {
        return Err(Error::usage(format!(
            "training series of {} steps is too short for windows of {} + {}",
            set.train.rows(),
            a.l_in,
            a.l_out
        )));
    }
    Ok(w)
}

/// Fresh bundle for `cfg`'s ablation flags, trained end to end.
pub fn train_bundle(
    arch: &crate::config::ArchConfig,
    cfg: &TrainConfig,
    set: &SeriesSet,
) -> Result<(Bundle, LossLog)> {
    cfg.validate()?;
    let mut bundle = Bundle::init(arch, !cfg.ablation.no_shared, cfg.seed)?;
    let mut t = Trainer::new(cfg);
    t.fit(&mut bundle, set)?;
    Ok((bundle, t.log))
}
