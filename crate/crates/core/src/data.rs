//! CSV loading, standard scaling, windowing and synthetic series generation.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::config::SynthConfig;
use crate::error::{Error, Result};
use crate::inject::{AnomalyType, InjectionSpec, Perturbation};
use crate::rng;

/// Train/test split of a multivariate series with per-step test labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesSet {
    pub train: Tensor,
    pub test: Tensor,
    pub test_labels: Vec<u8>,
    /// All zero: training is unsupervised.
    pub train_labels: Vec<u8>,
    /// False when the test labels were defaulted rather than read.
    pub test_labeled: bool,
    pub warnings: Vec<String>,
}

impl SeriesSet {
    pub fn new(train: Tensor, test: Tensor, test_labels: Vec<u8>) -> Result<Self> {
        if train.cols() != test.cols() {
            return Err(Error::dim(format!(
                "train has {} channels, test has {}",
                train.cols(),
                test.cols()
            )));
        }
        if train.cols() == 0 {
            return Err(Error::dim("series needs at least one channel"));
        }
        if test_labels.len() != test.rows() {
            return Err(Error::dim(format!(
                "{} labels for {} test rows",
                test_labels.len(),
                test.rows()
            )));
        }
        if test_labels.iter().any(|&l| l > 1) {
            return Err(Error::Domain("labels must be 0 or 1".into()));
        }
        let train_labels = vec![0; train.rows()];
        Ok(Self {
            train,
            test,
            test_labels,
            train_labels,
            test_labeled: true,
            warnings: Vec::new(),
        })
    }

    pub fn channels(&self) -> usize {
        self.train.cols()
    }

    pub fn test_anomaly_ratio(&self) -> f64 {
        let n = self.test_labels.len().max(1) as f64;
        self.test_labels.iter().map(|&l| l as f64).sum::<f64>() / n
    }

    pub fn has_test_anomalies(&self) -> bool {
        self.test_labels.iter().any(|&l| l == 1)
    }

    /// Loads train values, test values and (optional) test labels.
    pub fn from_files(train: &Path, test: &Path, labels: Option<&Path>) -> Result<Self> {
        let tr = load_csv(train, None)?;
        let te = load_csv(test, labels)?;
        let mut set = SeriesSet::new(tr.values, te.values, te.labels)?;
        if te.labels_missing {
            set.test_labeled = false;
            set.warnings
                .push("no test labels given; labels default to all zero".into());
        }
        Ok(set)
    }
}

/// One parsed values file with its (possibly defaulted) labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSeries {
    pub values: Tensor,
    pub labels: Vec<u8>,
    pub labels_missing: bool,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses a values CSV: rows are time steps, columns channels. A first row
/// that does not parse as numbers is treated as a header.
pub fn parse_values(text: &str) -> Result<Tensor> {
    let mut cols = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> = cells.iter().map(|c| c.parse()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if rows == 0 && cols.is_none() => {
                cols = Some(cells.len());
                continue;
            }
            Err(_) => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("non-numeric cell in {line:?}"),
                })
            }
        };
        match cols {
            Some(c) if c != values.len() => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected {c} columns, found {}", values.len()),
                })
            }
            _ => cols = Some(values.len()),
        }
        data.extend(values);
        rows += 1;
    }
    let c = cols.unwrap_or(0);
    if rows == 0 || c == 0 {
        return Err(Error::Parse {
            line: 1,
            msg: "no numeric rows".into(),
        });
    }
    Tensor::matrix(rows, c, data)
}

/// Parses a labels CSV: one 0/1 per row; a leading non-numeric header is skipped.
pub fn parse_labels(text: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.parse::<f64>() {
            Ok(v) if v == 0.0 => out.push(0),
            Ok(v) if v == 1.0 => out.push(1),
            Ok(v) => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("label {v} is not 0 or 1"),
                })
            }
            Err(_) if out.is_empty() && i == 0 => continue,
            Err(_) => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("non-numeric label {line:?}"),
                })
            }
        }
    }
    Ok(out)
}

pub fn load_csv(values_path: &Path, labels_path: Option<&Path>) -> Result<LabeledSeries> {
    let values = parse_values(&read(values_path)?)?;
    let (labels, labels_missing) = match labels_path {
        Some(p) => {
            let labels = parse_labels(&read(p)?)?;
            if labels.len() != values.rows() {
                let line = labels.len().min(values.rows()) + 1;
                return Err(Error::Parse {
                    line,
                    msg: format!(
                        "{} has {} labels but {} has {} rows",
                        p.display(),
                        labels.len(),
                        values_path.display(),
                        values.rows()
                    ),
                });
            }
            (labels, false)
        }
        None => (vec![0; values.rows()], true),
    };
    Ok(LabeledSeries {
        values,
        labels,
        labels_missing,
    })
}

/// Writes a matrix as CSV with a `c0,c1,...` header.
pub fn write_values(path: &Path, t: &Tensor) -> Result<()> {
    let mut s = String::new();
    let header: Vec<String> = (0..t.cols()).map(|c| format!("c{c}")).collect();
    s.push_str(&header.join(","));
    s.push('\n');
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut s = String::with_capacity(labels.len() * 2);
    for l in labels {
        s.push_str(if *l == 1 { "1\n" } else { "0\n" });
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel mean and population standard deviation of the train split.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalerStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ScalerStats {
    pub fn fit(x: &Tensor) -> Result<Self> {
        let (t, c) = (x.rows(), x.cols());
        if t == 0 {
            return Err(Error::usage("cannot fit a scaler on an empty split"));
        }
        let mut mean = vec![0.0; c];
        for r in 0..t {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        let mut var = vec![0.0; c];
        for r in 0..t {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / t as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn transform(&self, x: &Tensor) -> Tensor {
        let c = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn inverse(&self, x: &Tensor) -> Tensor {
        let c = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        out
    }
}

/// Scales both splits with statistics fitted on the train split only.
pub fn standard_scale(set: &SeriesSet) -> Result<(SeriesSet, ScalerStats)> {
    let stats = ScalerStats::fit(&set.train)?;
    let mut out = set.clone();
    out.train = stats.transform(&set.train);
    out.test = stats.transform(&set.test);
    Ok((out, stats))
}

/// A past window and the future window that immediately follows it.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    pub x_in: Tensor,
    pub x_out: Tensor,
    pub y_in: Vec<u8>,
    pub y_out: Vec<u8>,
    pub origin: usize,
}

/// Number of windows [`make_windows`] emits.
pub fn window_count(t: usize, l_in: usize, l_out: usize, stride: usize) -> usize {
    if t < l_in + l_out || stride == 0 {
        0
    } else {
        (t - l_in - l_out) / stride + 1
    }
}

/// Slices `(x_in, x_out)` pairs starting at 0, stride, 2·stride, ...
///
/// Returns a warning instead of windows when the series is too short.
pub fn make_windows(
    series: &Tensor,
    labels: &[u8],
    l_in: usize,
    l_out: usize,
    stride: usize,
) -> Result<(Vec<WindowPair>, Option<String>)> {
    if stride == 0 {
        return Err(Error::config("window stride must be ≥ 1"));
    }
    if labels.len() != series.rows() {
        return Err(Error::dim("labels and series lengths differ"));
    }
    let t = series.rows();
    let n = window_count(t, l_in, l_out, stride);
    if n == 0 {
        return Ok((
            Vec::new(),
            Some(format!(
                "series of length {t} is shorter than l_in + l_out = {}",
                l_in + l_out
            )),
        ));
    }
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let o = k * stride;
        out.push(WindowPair {
            x_in: series.slice_rows(o, o + l_in)?,
            x_out: series.slice_rows(o + l_in, o + l_in + l_out)?,
            y_in: labels[o..o + l_in].to_vec(),
            y_out: labels[o + l_in..o + l_in + l_out].to_vec(),
            origin: o,
        });
    }
    Ok((out, None))
}

/// One anomalous segment placed by [`synth_generate_detailed`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSegment {
    pub start: usize,
    pub end: usize,
    pub kind: AnomalyType,
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub set: SeriesSet,
    /// Test split before any anomaly was injected.
    pub clean_test: Tensor,
    pub segments: Vec<SynthSegment>,
}

const SYNTH_CONTEXT: usize = 50;
const SYNTH_GAP: usize = 10;

fn base_signal(cfg: &SynthConfig, len: usize, offset: usize, shape: &[(f64, f64)], r: &mut rng::Rng) -> Tensor {
    let c = cfg.channels;
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite sigma");
    let mut data = vec![0.0; len * c];
    for t in 0..len {
        let tt = (t + offset) as f64;
        for ch in 0..c {
            let mut v = 0.0;
            for (k, p) in cfg.periods.iter().enumerate() {
                let (amp, phase) = shape[ch * cfg.periods.len() + k];
                v += amp * (2.0 * std::f64::consts::PI * tt / p + phase).sin();
            }
            data[t * c + ch] = v + if cfg.noise > 0.0 { noise.sample(r) } else { 0.0 };
        }
    }
    Tensor::matrix(len, c, data).expect("sized")
}

/// Sum-of-sinusoid series with Gaussian noise; anomalies are injected into
/// the test split only.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SeriesSet> {
    Ok(synth_generate_detailed(cfg, seed)?.set)
}

pub fn synth_generate_detailed(cfg: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut r = rng::stream(seed, "synth");
    let shape: Vec<(f64, f64)> = (0..cfg.channels * cfg.periods.len())
        .map(|_| {
            (
                r.random_range(0.5..1.5),
                r.random_range(0.0..2.0 * std::f64::consts::PI),
            )
        })
        .collect();
    let train = base_signal(cfg, cfg.t_train, 0, &shape, &mut r);
    let clean_test = base_signal(cfg, cfg.t_test, cfg.t_train, &shape, &mut r);

    let target = (cfg.anomaly_ratio * cfg.t_test as f64).round() as usize;
    let mut lens = Vec::new();
    let mut total = 0;
    while total < target {
        let l = r
            .random_range(cfg.segment_min..=cfg.segment_max)
            .min(target - total);
        lens.push(l);
        total += l;
    }
    let needed = SYNTH_CONTEXT + total + lens.len() * SYNTH_GAP;
    if needed > cfg.t_test {
        return Err(Error::config(format!(
            "test split of {} steps cannot hold {} anomalous steps",
            cfg.t_test, total
        )));
    }
    let free = cfg.t_test - needed;
    let mut cuts: Vec<usize> = (0..lens.len()).map(|_| r.random_range(0..=free)).collect();
    cuts.sort_unstable();

    let mix_total: f64 = cfg.type_mix.iter().sum();
    let mut test = clean_test.clone();
    let mut labels = vec![0u8; cfg.t_test];
    let mut segments = Vec::with_capacity(lens.len());
    let mut used = 0;
    for (i, (&len, &cut)) in lens.iter().zip(&cuts).enumerate() {
        let start = SYNTH_CONTEXT + cut + used + i * SYNTH_GAP;
        used += len;
        let end = start + len;
        let mut pick = r.random_range(0.0..mix_total);
        let mut kind = AnomalyType::ALL[4];
        for (t, w) in AnomalyType::ALL.iter().zip(cfg.type_mix) {
            if w > 0.0 && pick < w {
                kind = *t;
                break;
            }
            pick -= w;
        }
        let channels = random_channel_subset(cfg.channels, &mut r);
        let win_start = start - SYNTH_CONTEXT;
        let window = test.slice_rows(win_start, end)?;
        let spec = InjectionSpec::new(kind, SYNTH_CONTEXT, SYNTH_CONTEXT + len, channels.clone());
        let pert = Perturbation::plan(&window, &spec, &mut r)?;
        let (xz, _) = pert.apply(&window, cfg.magnitude);
        let c = cfg.channels;
        test.data_mut()[win_start * c..end * c].copy_from_slice(xz.data());
        labels[start..end].iter_mut().for_each(|l| *l = 1);
        segments.push(SynthSegment {
            start,
            end,
            kind,
            channels,
        });
    }
    let set = SeriesSet::new(train, test, labels)?;
    Ok(SynthOutput {
        set,
        clean_test,
        segments,
    })
}

/// Non-empty random subset of `0..channels`, each channel kept with p = 1/2.
pub fn random_channel_subset(channels: usize, r: &mut rng::Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..channels).filter(|_| r.random_bool(0.5)).collect();
    if v.is_empty() {
        v.push(r.random_range(0..channels));
    }
    v
}
