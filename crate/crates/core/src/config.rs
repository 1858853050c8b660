//! Run configuration: architecture, training, synthetic data, evaluation.
//!
//! The on-disk form is a flat `key = value` file; `#` starts a comment.
//! Every key has a default and unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::inject::AnomalyType;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub l_in: usize,
    pub l_out: usize,
    /// Channel count; taken from the data when the run starts.
    pub channels: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub heads: usize,
    pub fftr_layers: usize,
    pub aafn_heads: usize,
    pub pool_size: usize,
    pub prompt_len: usize,
    pub top_n: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            l_in: 100,
            l_out: 100,
            channels: 1,
            d_model: 256,
            n_layers: 3,
            heads: 4,
            fftr_layers: 3,
            aafn_heads: 4,
            pool_size: 10,
            prompt_len: 5,
            top_n: 3,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_in == 0 || self.l_out == 0 || self.channels == 0 {
            return Err(Error::config("l_in, l_out and channels must be positive"));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.aafn_heads == 0 || self.d_model % self.aafn_heads != 0 {
            return Err(Error::config("d_model must be a multiple of aafn_heads"));
        }
        if self.n_layers == 0 || self.fftr_layers == 0 {
            return Err(Error::config("layer counts must be positive"));
        }
        if self.top_n > self.pool_size {
            return Err(Error::config(format!(
                "top_n {} exceeds pool_size {}",
                self.top_n, self.pool_size
            )));
        }
        if self.pool_size == 0 || self.prompt_len == 0 {
            return Err(Error::config("pool_size and prompt_len must be positive"));
        }
        Ok(())
    }

    /// Length of the prompted token block.
    pub fn prompted_len(&self) -> usize {
        self.top_n * self.prompt_len + self.l_in
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_aaf: bool,
    pub no_sap: bool,
    pub no_shared: bool,
    pub plain_mse_forecast: bool,
    pub bce_aafn: bool,
}

impl Ablation {
    pub fn parse_list(list: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "no_aaf" => a.no_aaf = true,
                "no_sap" => a.no_sap = true,
                "no_shared" => a.no_shared = true,
                "plain_mse_forecast" => a.plain_mse_forecast = true,
                "bce_aafn" => a.bce_aafn = true,
                "none" => {}
                other => return Err(Error::config(format!("unknown ablation flag {other}"))),
            }
        }
        Ok(a)
    }

    pub fn to_list(&self) -> String {
        let mut v = Vec::new();
        if self.no_aaf {
            v.push("no_aaf");
        }
        if self.no_sap {
            v.push("no_sap");
        }
        if self.no_shared {
            v.push("no_shared");
        }
        if self.plain_mse_forecast {
            v.push("plain_mse_forecast");
        }
        if self.bce_aafn {
            v.push("bce_aafn");
        }
        if v.is_empty() {
            "none".into()
        } else {
            v.join(",")
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub fftr_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_aaf: f64,
    pub lambda_d: f64,
    pub lambda_f: f64,
    pub lambda_r: f64,
    pub lambda_af: f64,
    pub lambda_k: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub train_stride: usize,
    pub clip_norm: f64,
    /// Upper clamp on the attention KL term of the divergence loss.
    pub kl_cap: f64,
    pub region_min: usize,
    pub region_max: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            fftr_epochs: 5,
            batch_size: 16,
            lr: 1e-4,
            lambda_aaf: 1.0,
            lambda_d: 1.0,
            lambda_f: 1.0,
            lambda_r: 1.0,
            lambda_af: 1.0,
            lambda_k: 1.0,
            seed: 0,
            ablation: Ablation::default(),
            train_stride: 1,
            clip_norm: 5.0,
            kl_cap: 10.0,
            region_min: 5,
            region_max: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.train_stride == 0 {
            return Err(Error::config("epochs, batch_size and train_stride must be ≥ 1"));
        }
        let lambdas = [
            self.lambda_aaf,
            self.lambda_d,
            self.lambda_f,
            self.lambda_r,
            self.lambda_af,
            self.lambda_k,
        ];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::config("loss weights must be finite and ≥ 0"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        if self.region_min == 0 || self.region_min > self.region_max {
            return Err(Error::config("need 1 ≤ region_min ≤ region_max"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub channels: usize,
    pub t_train: usize,
    pub t_test: usize,
    /// Base periods (in steps) of the sinusoids; channel `c` uses a
    /// channel-specific phase and amplitude on each.
    pub periods: Vec<f64>,
    pub noise: f64,
    pub anomaly_ratio: f64,
    /// Relative weights over the five anomaly types, in
    /// [`AnomalyType::ALL`] order.
    pub type_mix: [f64; 5],
    pub segment_min: usize,
    pub segment_max: usize,
    pub magnitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            channels: 2,
            t_train: 8000,
            t_test: 2000,
            periods: vec![50.0, 23.0],
            noise: 0.05,
            anomaly_ratio: 0.05,
            type_mix: [1.0; 5],
            segment_min: 10,
            segment_max: 30,
            magnitude: 3.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.anomaly_ratio > 0.0 && self.anomaly_ratio <= 0.5) {
            return Err(Error::config(format!(
                "anomaly ratio {} outside (0, 0.5]",
                self.anomaly_ratio
            )));
        }
        if self.channels == 0 || self.periods.is_empty() {
            return Err(Error::config("synthetic data needs channels and periods"));
        }
        if self.segment_min == 0 || self.segment_min > self.segment_max {
            return Err(Error::config("need 1 ≤ segment_min ≤ segment_max"));
        }
        if self.type_mix.iter().any(|w| *w < 0.0) || self.type_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("type mix weights must be ≥ 0 with a positive sum"));
        }
        if !(self.magnitude > 0.0) || !(self.noise >= 0.0) {
            return Err(Error::config("magnitude must be > 0 and noise ≥ 0"));
        }
        Ok(())
    }

    /// Parses `global:1.0,trend:0.5` style mixes; omitted types get weight 0.
    pub fn parse_mix(s: &str) -> Result<[f64; 5]> {
        let mut mix = [0.0; 5];
        for item in s.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (name, w) = item
                .split_once(':')
                .ok_or_else(|| Error::config(format!("bad type mix entry {item}")))?;
            let ty: AnomalyType = name.trim().parse()?;
            let w: f64 = w
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("bad weight in {item}")))?;
            mix[ty.index()] = w;
        }
        Ok(mix)
    }

    pub fn mix_string(&self) -> String {
        AnomalyType::ALL
            .iter()
            .zip(self.type_mix)
            .map(|(t, w)| format!("{}:{}", t.name(), w))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Infinite tolerance, i.e. classic point adjustment.
pub const TOLERANCE_INF: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub tolerances: Vec<usize>,
    /// Override for the thresholding ratio; `None` uses the test split's
    /// true anomaly ratio.
    pub ratio: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tolerances: vec![50],
            ratio: None,
        }
    }
}

pub fn parse_tolerances(s: &str) -> Result<Vec<usize>> {
    let v: Result<Vec<usize>> = s
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|t| match t {
            "inf" | "∞" => Ok(TOLERANCE_INF),
            _ => t
                .parse()
                .map_err(|_| Error::config(format!("bad tolerance {t}"))),
        })
        .collect();
    let v = v?;
    if v.is_empty() {
        return Err(Error::config("empty tolerance list"));
    }
    Ok(v)
}

pub fn tolerance_name(t: usize) -> String {
    if t == TOLERANCE_INF {
        "inf".into()
    } else {
        t.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("bad value {v:?} for {key}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("bad boolean {v:?} for {key}"))),
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (a, t, s) = (&mut self.arch, &mut self.train, &mut self.synth);
        match key.trim() {
            "l_in" => a.l_in = num(key, v)?,
            "l_out" => a.l_out = num(key, v)?,
            "d_model" => a.d_model = num(key, v)?,
            "n_layers" => a.n_layers = num(key, v)?,
            "heads" => a.heads = num(key, v)?,
            "fftr_layers" => a.fftr_layers = num(key, v)?,
            "aafn_heads" => a.aafn_heads = num(key, v)?,
            "pool_size" => a.pool_size = num(key, v)?,
            "prompt_len" => a.prompt_len = num(key, v)?,
            "top_n" => a.top_n = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "fftr_epochs" => t.fftr_epochs = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "lr" => t.lr = num(key, v)?,
            "lambda_aaf" => t.lambda_aaf = num(key, v)?,
            "lambda_d" => t.lambda_d = num(key, v)?,
            "lambda_f" => t.lambda_f = num(key, v)?,
            "lambda_r" => t.lambda_r = num(key, v)?,
            "lambda_af" => t.lambda_af = num(key, v)?,
            "lambda_k" => t.lambda_k = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "ablate" => t.ablation = Ablation::parse_list(v)?,
            "bce_aafn" => t.ablation.bce_aafn = boolean(key, v)?,
            "train_stride" => t.train_stride = num(key, v)?,
            "clip_norm" => t.clip_norm = num(key, v)?,
            "kl_cap" => t.kl_cap = num(key, v)?,
            "region_min" => t.region_min = num(key, v)?,
            "region_max" => t.region_max = num(key, v)?,
            "synth_channels" => s.channels = num(key, v)?,
            "synth_t_train" => s.t_train = num(key, v)?,
            "synth_t_test" => s.t_test = num(key, v)?,
            "synth_periods" => s.periods = list(key, v)?,
            "synth_noise" => s.noise = num(key, v)?,
            "synth_anomaly_ratio" => s.anomaly_ratio = num(key, v)?,
            "synth_type_mix" => s.type_mix = SynthConfig::parse_mix(v)?,
            "synth_segment_min" => s.segment_min = num(key, v)?,
            "synth_segment_max" => s.segment_max = num(key, v)?,
            "synth_magnitude" => s.magnitude = num(key, v)?,
            "tolerance" => self.eval.tolerances = parse_tolerances(v)?,
            "ratio" => {
                self.eval.ratio = if v == "auto" { None } else { Some(num(key, v)?) }
            }
            "train_path" => self.train_path = opt_path(v),
            "test_path" => self.test_path = opt_path(v),
            "labels_path" => self.labels_path = opt_path(v),
            "out_dir" => self.out_dir = opt_path(v),
            "seeds" => self.seeds = list(key, v)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k, v).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if let Some(r) = self.eval.ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::config(format!("ratio {r} outside (0, 1)")));
            }
        }
        Ok(())
    }

    /// Seeds to run; falls back to the single training seed.
    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// Every key with its current value, in the file format.
    pub fn to_text(&self) -> String {
        let (a, t, s) = (&self.arch, &self.train, &self.synth);
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let mut out = String::new();
        let pairs: Vec<(&str, String)> = vec![
            ("l_in", a.l_in.to_string()),
            ("l_out", a.l_out.to_string()),
            ("d_model", a.d_model.to_string()),
            ("n_layers", a.n_layers.to_string()),
            ("heads", a.heads.to_string()),
            ("fftr_layers", a.fftr_layers.to_string()),
            ("aafn_heads", a.aafn_heads.to_string()),
            ("pool_size", a.pool_size.to_string()),
            ("prompt_len", a.prompt_len.to_string()),
            ("top_n", a.top_n.to_string()),
            ("epochs", t.epochs.to_string()),
            ("fftr_epochs", t.fftr_epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("lambda_aaf", t.lambda_aaf.to_string()),
            ("lambda_d", t.lambda_d.to_string()),
            ("lambda_f", t.lambda_f.to_string()),
            ("lambda_r", t.lambda_r.to_string()),
            ("lambda_af", t.lambda_af.to_string()),
            ("lambda_k", t.lambda_k.to_string()),
            ("seed", t.seed.to_string()),
            ("ablate", t.ablation.to_list()),
            ("train_stride", t.train_stride.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("kl_cap", t.kl_cap.to_string()),
            ("region_min", t.region_min.to_string()),
            ("region_max", t.region_max.to_string()),
            ("synth_channels", s.channels.to_string()),
            ("synth_t_train", s.t_train.to_string()),
            ("synth_t_test", s.t_test.to_string()),
            ("synth_periods", join(&s.periods)),
            ("synth_noise", s.noise.to_string()),
            ("synth_anomaly_ratio", s.anomaly_ratio.to_string()),
            ("synth_type_mix", s.mix_string()),
            ("synth_segment_min", s.segment_min.to_string()),
            ("synth_segment_max", s.segment_max.to_string()),
            ("synth_magnitude", s.magnitude.to_string()),
            (
                "tolerance",
                self.eval
                    .tolerances
                    .iter()
                    .map(|t| tolerance_name(*t))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            (
                "ratio",
                self.eval
                    .ratio
                    .map(|r| r.to_string())
                    .unwrap_or_else(|| "auto".into()),
            ),
            ("train_path", path(&self.train_path)),
            ("test_path", path(&self.test_path)),
            ("labels_path", path(&self.labels_path)),
            ("out_dir", path(&self.out_dir)),
            ("seeds", join(&self.seeds)),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    if v.is_empty() {
        None
    } else {
        Some(PathBuf::from(v))
    }
}
