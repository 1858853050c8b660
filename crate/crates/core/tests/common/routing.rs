//! Which parameters does each loss term move? Runs a phase with exactly one
//! weight switched on and diffs the store.

use std::collections::BTreeSet;

use prognos_core::autodiff::Tensor;
use prognos_core::config::{ArchConfig, TrainConfig};
use prognos_core::data::WindowPair;
use prognos_core::model::{Bundle, AAFN, EMB_AD, EMB_F, FFTR, INJECT, OUT_AD, OUT_F, POOL, THETA, THETA_AD};
use prognos_core::train::Trainer;

pub struct Probe {
    pub term: &'static str,
    pub changed: BTreeSet<String>,
    /// Every parameter under these prefixes must move, nothing else may.
    pub expected: Vec<&'static str>,
    /// Prefixes allowed to move partially (e.g. magnitudes of undrawn types).
    pub partial: Vec<&'static str>,
}

impl Probe {
    pub fn ok(&self, store_names: &[String]) -> bool {
        let under = |n: &str, ps: &[&str]| ps.iter().any(|p| n.starts_with(p));
        let full: BTreeSet<String> = store_names
            .iter()
            .filter(|n| under(n, &self.expected))
            .cloned()
            .collect();
        let stray = self
            .changed
            .iter()
            .any(|n| !under(n, &self.expected) && !under(n, &self.partial));
        let partial_moved = self.partial.is_empty()
            || self.changed.iter().any(|n| under(n, &self.partial));
        !stray && full.is_subset(&self.changed) && partial_moved
    }

    pub fn describe(&self, store_names: &[String]) -> String {
        let under = |n: &str, ps: &[&str]| ps.iter().any(|p| n.starts_with(p));
        let stray: Vec<&String> = self
            .changed
            .iter()
            .filter(|n| !under(n, &self.expected) && !under(n, &self.partial))
            .collect();
        let missing: Vec<&String> = store_names
            .iter()
            .filter(|n| under(n, &self.expected) && !self.changed.contains(*n))
            .collect();
        format!("{}: {} moved, stray {:?}, missing {:?}", self.term, self.changed.len(), stray, missing)
    }
}

pub fn arch() -> ArchConfig {
    ArchConfig {
        l_in: 12,
        l_out: 8,
        channels: 2,
        d_model: 8,
        n_layers: 2,
        heads: 2,
        fftr_layers: 1,
        aafn_heads: 2,
        pool_size: 4,
        prompt_len: 2,
        top_n: 2,
    }
}

pub fn windows(n: usize, l_in: usize, l_out: usize) -> Vec<WindowPair> {
    let mk = |r: usize, off: usize| {
        Tensor::matrix(
            r,
            2,
            (0..r * 2)
                .map(|i| ((off + i / 2) as f64 * 0.45).sin() * (1.0 + (i % 2) as f64) + 0.1 * ((off + i) % 7) as f64)
                .collect(),
        )
        .unwrap()
    };
    (0..n)
        .map(|k| WindowPair {
            x_in: mk(l_in, 3 * k),
            x_out: mk(l_out, 3 * k + l_in),
            y_in: vec![0; l_in],
            y_out: vec![0; l_out],
            origin: 3 * k,
        })
        .collect()
}

fn only(term: &str) -> TrainConfig {
    let mut c = TrainConfig {
        epochs: 1,
        fftr_epochs: 1,
        batch_size: 4,
        lr: 1e-3,
        region_min: 1,
        region_max: 3,
        lambda_aaf: 0.0,
        lambda_d: 0.0,
        lambda_f: 0.0,
        lambda_r: 0.0,
        lambda_af: 0.0,
        ..TrainConfig::default()
    };
    match term {
        "aaf" => c.lambda_aaf = 1.0,
        "divergence" => c.lambda_d = 1.0,
        "forecast" => c.lambda_f = 1.0,
        "reconstruction" => c.lambda_r = 1.0,
        "aware_forecast" => c.lambda_af = 1.0,
        _ => {}
    }
    c
}

fn moved(before: &Bundle, after: &Bundle) -> BTreeSet<String> {
    before
        .store
        .iter()
        .filter(|(k, v)| after.store.get(k).unwrap() != *v)
        .map(|(k, _)| k.clone())
        .collect()
}

/// Probes every term for one backbone setting. Returns the probes and the
/// store's parameter names.
pub fn probe_all(shared: bool) -> (Vec<Probe>, Vec<String>) {
    let arch = arch();
    let w = windows(16, arch.l_in, arch.l_out);
    let base = Bundle::init(&arch, shared, 3).unwrap();
    let names: Vec<String> = base.store.names().cloned().collect();
    let ad = if shared { THETA } else { THETA_AD };
    let mut out = Vec::new();

    // feature extractor pretraining
    let c = only("none");
    let mut b = base.clone();
    Trainer::new(&c).pretrain_fftr(&mut b, &w).unwrap();
    out.push(Probe {
        term: "fftr",
        changed: moved(&base, &b),
        expected: vec![FFTR],
        partial: vec![],
    });
    let ready = b;

    for (term, expected, partial) in [
        ("aaf", vec![AAFN], vec![INJECT]),
        ("divergence", vec![POOL], vec![]),
        ("forecast", vec![THETA, EMB_F, OUT_F], vec![]),
    ] {
        let c = only(term);
        let mut b = ready.clone();
        Trainer::new(&c).pretrain_phase(&mut b, &w).unwrap();
        out.push(Probe {
            term,
            changed: moved(&ready, &b),
            expected,
            partial,
        });
    }

    let mut pre = ready.clone();
    pre.frozen.aafn = true;
    pre.frozen.pool = true;
    for (term, expected) in [
        ("reconstruction", vec![ad, EMB_AD, OUT_AD]),
        ("aware_forecast", vec![THETA, EMB_F, OUT_F]),
    ] {
        let c = only(term);
        let mut b = pre.clone();
        Trainer::new(&c).main_phase(&mut b, &w).unwrap();
        out.push(Probe {
            term,
            changed: moved(&pre, &b),
            expected,
            partial: vec![],
        });
    }
    (out, names)
}
