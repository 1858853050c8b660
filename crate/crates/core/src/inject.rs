//! Synthetic anomaly injection.
//!
//! Five transformation families, each a smooth function of an effective
//! magnitude `m > 0` so that `∂x_z/∂m` exists and can drive a learnable
//! magnitude. With `σ_c` the per-channel std of the window and region `[a, b)`:
//!
//! | type       | transformation on the selected channels                      |
//! |------------|--------------------------------------------------------------|
//! | global     | `x + m σ_c s`, random sign `s` per step in the region        |
//! | contextual | `μ_j − m (x_j − μ_j)`, `μ_j` the mean over `j ± 5`            |
//! | seasonal   | region resampled at frequency `1 + m`, periodic linear interp |
//! | trend      | `x + m σ_c (j − a + 1)/(b − a)`, held at `m σ_c` after `b`     |
//! | shapelet   | region mean `+ 0.1 m σ_c n`, `n` standard normal              |
//!
//! Labels cover `[a, b)` only; the held trend offset after `b` is unlabeled.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::data::{random_channel_subset, WindowPair, STD_FLOOR};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AnomalyType {
    Seasonal,
    Global,
    Trend,
    Contextual,
    Shapelet,
}

impl AnomalyType {
    pub const ALL: [AnomalyType; 5] = [
        AnomalyType::Seasonal,
        AnomalyType::Global,
        AnomalyType::Trend,
        AnomalyType::Contextual,
        AnomalyType::Shapelet,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            AnomalyType::Seasonal => "seasonal",
            AnomalyType::Global => "global",
            AnomalyType::Trend => "trend",
            AnomalyType::Contextual => "contextual",
            AnomalyType::Shapelet => "shapelet",
        }
    }

    /// Store name of this type's raw (pre-softplus) magnitude parameter.
    pub fn param_name(self) -> String {
        format!("inject.mag.{}", self.name())
    }
}

impl fmt::Display for AnomalyType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnomalyType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AnomalyType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config(format!("unknown anomaly type {s:?}")))
    }
}

/// Raw magnitude whose softplus is 1.
pub fn initial_raw_magnitude() -> f64 {
    (1f64.exp() - 1.0).ln()
}

pub fn effective_magnitude(raw: f64) -> f64 {
    raw.max(0.0) + (-raw.abs()).exp().ln_1p()
}

#[derive(Clone, Debug, PartialEq)]
pub struct InjectionSpec {
    pub kind: AnomalyType,
    pub start: usize,
    pub end: usize,
    pub channels: Vec<usize>,
}

impl InjectionSpec {
    pub fn new(kind: AnomalyType, start: usize, end: usize, channels: Vec<usize>) -> Self {
        Self {
            kind,
            start,
            end,
            channels,
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::config("injection needs at least one channel"));
        }
        if self.start >= self.end || self.end > x.rows() {
            return Err(Error::usage(format!(
                "region {}..{} invalid for a window of {} steps",
                self.start,
                self.end,
                x.rows()
            )));
        }
        if let Some(&c) = self.channels.iter().find(|&&c| c >= x.cols()) {
            return Err(Error::usage(format!("channel {c} out of range")));
        }
        Ok(())
    }
}

/// Population std of each channel over the window, floored at `STD_FLOOR`.
pub fn window_std(x: &Tensor) -> Vec<f64> {
    let (t, c) = (x.rows(), x.cols());
    (0..c)
        .map(|ch| {
            let mean = (0..t).map(|r| x.at(r, ch)).sum::<f64>() / t as f64;
            let var = (0..t).map(|r| (x.at(r, ch) - mean).powi(2)).sum::<f64>() / t as f64;
            var.sqrt().max(STD_FLOOR)
        })
        .collect()
}

const CONTEXT_HALF_WIDTH: usize = 5;
const SHAPELET_NOISE: f64 = 0.1;

/// An injection with all random draws fixed; [`Perturbation::apply`] is then
/// a deterministic function of the magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub spec: InjectionSpec,
    sigma: Vec<f64>,
    /// Per (region step, selected channel): sign for global, N(0,1) for shapelet.
    draws: Vec<f64>,
}

impl Perturbation {
    pub fn plan(x: &Tensor, spec: &InjectionSpec, rng: &mut Rng) -> Result<Self> {
        spec.check(x)?;
        let n = (spec.end - spec.start) * spec.channels.len();
        let draws = match spec.kind {
            AnomalyType::Global => (0..n)
                .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                .collect(),
            AnomalyType::Shapelet => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
            _ => Vec::new(),
        };
        Ok(Self {
            spec: spec.clone(),
            sigma: window_std(x),
            draws,
        })
    }

    /// Binary labels over the window: 1 inside the region.
    pub fn labels(&self, len: usize) -> Vec<u8> {
        (0..len)
            .map(|j| (j >= self.spec.start && j < self.spec.end) as u8)
            .collect()
    }

    /// Returns the injected window and its elementwise derivative with
    /// respect to the magnitude `m`.
    pub fn apply(&self, x: &Tensor, m: f64) -> (Tensor, Vec<f64>) {
        let (t, c) = (x.rows(), x.cols());
        let (a, b) = (self.spec.start, self.spec.end);
        let len = b - a;
        let mut out = x.clone();
        let mut jac = vec![0.0; x.len()];
        let od = out.data_mut();
        for (ci, &ch) in self.spec.channels.iter().enumerate() {
            let sigma = self.sigma[ch];
            let nch = self.spec.channels.len();
            match self.spec.kind {
                AnomalyType::Global => {
                    for j in a..b {
                        let s = self.draws[(j - a) * nch + ci];
                        od[j * c + ch] = x.at(j, ch) + m * sigma * s;
                        jac[j * c + ch] = sigma * s;
                    }
                }
                AnomalyType::Contextual => {
                    for j in a..b {
                        let lo = j.saturating_sub(CONTEXT_HALF_WIDTH);
                        let hi = (j + CONTEXT_HALF_WIDTH).min(t - 1);
                        let mu = (lo..=hi).map(|r| x.at(r, ch)).sum::<f64>() / (hi - lo + 1) as f64;
                        let dev = x.at(j, ch) - mu;
                        od[j * c + ch] = mu - m * dev;
                        jac[j * c + ch] = -dev;
                    }
                }
                AnomalyType::Seasonal => {
                    let lf = len as f64;
                    for j in a..b {
                        let k = (j - a) as f64;
                        let u = (k * (1.0 + m)).rem_euclid(lf);
                        let i0 = (u.floor() as usize).min(len - 1);
                        let f = u - i0 as f64;
                        let i1 = (i0 + 1) % len;
                        let (v0, v1) = (x.at(a + i0, ch), x.at(a + i1, ch));
                        od[j * c + ch] = (1.0 - f) * v0 + f * v1;
                        jac[j * c + ch] = k * (v1 - v0);
                    }
                }
                AnomalyType::Trend => {
                    for j in a..t {
                        let ramp = if j < b {
                            (j - a + 1) as f64 / len as f64
                        } else {
                            1.0
                        };
                        od[j * c + ch] = x.at(j, ch) + m * sigma * ramp;
                        jac[j * c + ch] = sigma * ramp;
                    }
                }
                AnomalyType::Shapelet => {
                    let mean = (a..b).map(|r| x.at(r, ch)).sum::<f64>() / len as f64;
                    for j in a..b {
                        let n = self.draws[(j - a) * nch + ci];
                        od[j * c + ch] = mean + m * sigma * SHAPELET_NOISE * n;
                        jac[j * c + ch] = sigma * SHAPELET_NOISE * n;
                    }
                }
            }
        }
        (out, jac)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InjectionResult {
    pub x_z: Tensor,
    pub y_z: Vec<u8>,
}

/// Draws the random parts of `spec` from `rng` and applies it at magnitude `m`.
pub fn inject(x: &Tensor, spec: &InjectionSpec, m: f64, rng: &mut Rng) -> Result<InjectionResult> {
    let p = Perturbation::plan(x, spec, rng)?;
    let (x_z, _) = p.apply(x, m);
    Ok(InjectionResult {
        x_z,
        y_z: p.labels(x.rows()),
    })
}

/// Start of the length-`len` range with the largest summed error; ties go to
/// the smallest start.
pub fn locate_region(errors: &[f64], len: usize) -> Result<(usize, usize)> {
    if len == 0 || len > errors.len() {
        return Err(Error::usage(format!(
            "region length {len} invalid for {} steps",
            errors.len()
        )));
    }
    // Sums are recomputed per start (no running sum) so equal windows compare
    // exactly equal and the tie-break is reliable.
    let mut best_s = 0;
    let mut best_v = f64::NEG_INFINITY;
    for s in 0..=errors.len() - len {
        let v: f64 = errors[s..s + len].iter().sum();
        if v > best_v {
            best_v = v;
            best_s = s;
        }
    }
    Ok((best_s, best_s + len))
}

/// Region-length bounds `[lo, hi]` for a window of `window` steps:
/// `[region_min, min(region_max, window / 4)]`, clamped to the window.
pub fn region_len_bounds(window: usize, region_min: usize, region_max: usize) -> (usize, usize) {
    let hi = region_max.min(window / 4).max(region_min).min(window);
    let lo = region_min.min(hi);
    (lo, hi)
}

/// Random draws for one injected view of a window.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionDraw {
    pub kind: AnomalyType,
    pub len: usize,
    pub channels: Vec<usize>,
}

impl InjectionDraw {
    pub fn sample(window: usize, channels: usize, bounds: (usize, usize), rng: &mut Rng) -> Self {
        let kind = AnomalyType::ALL[rng.random_range(0..5)];
        let len = rng.random_range(bounds.0..=bounds.1);
        Self {
            kind,
            len: len.min(window),
            channels: random_channel_subset(channels, rng),
        }
    }
}

/// Corrupted views of both halves of a window pair.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomInjection {
    pub input: Perturbation,
    pub output: Perturbation,
}

impl RandomInjection {
    pub fn y_in(&self, l_in: usize) -> Vec<u8> {
        self.input.labels(l_in)
    }

    pub fn y_out(&self, l_out: usize) -> Vec<u8> {
        self.output.labels(l_out)
    }
}

/// Independently draws a type, region length and channel subset for each of
/// `x_in` and `x_out`, places each region where `error_profile` is largest,
/// and fixes the remaining random draws.
pub fn sample_random_injection(
    pair: &WindowPair,
    error_profile: &mut dyn FnMut(&Tensor) -> Result<Vec<f64>>,
    region_min: usize,
    region_max: usize,
    rng: &mut Rng,
) -> Result<RandomInjection> {
    let c = pair.x_in.cols();
    let b_in = region_len_bounds(pair.x_in.rows(), region_min, region_max);
    let b_out = region_len_bounds(pair.x_out.rows(), region_min, region_max);
    let d_in = InjectionDraw::sample(pair.x_in.rows(), c, b_in, rng);
    let d_out = InjectionDraw::sample(pair.x_out.rows(), c, b_out, rng);
    let mut place = |x: &Tensor, d: InjectionDraw, rng: &mut Rng| -> Result<Perturbation> {
        let prof = error_profile(x)?;
        let (a, b) = locate_region(&prof, d.len)?;
        Perturbation::plan(x, &InjectionSpec::new(d.kind, a, b, d.channels), rng)
    };
    let input = place(&pair.x_in, d_in, rng)?;
    let output = place(&pair.x_out, d_out, rng)?;
    Ok(RandomInjection { input, output })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn wave(t: usize, c: usize) -> Tensor {
        Tensor::matrix(
            t,
            c,
            (0..t * c)
                .map(|i| ((i / c) as f64 * 0.3 + (i % c) as f64).sin())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn five_types_round_trip_names() {
        assert_eq!(AnomalyType::ALL.len(), 5);
        for t in AnomalyType::ALL {
            assert_eq!(t.name().parse::<AnomalyType>().unwrap(), t);
        }
        assert!("spike".parse::<AnomalyType>().is_err());
        assert!((effective_magnitude(initial_raw_magnitude()) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn global_vanishes_as_magnitude_goes_to_zero() {
        let x = wave(40, 2);
        let spec = InjectionSpec::new(AnomalyType::Global, 10, 20, vec![0, 1]);
        let r = inject(&x, &spec, 1e-12, &mut stream(0, "t")).unwrap();
        assert!(r.x_z.max_abs_diff(&x) < 1e-11);
    }

    #[test]
    fn global_single_step_formula() {
        // unit-variance channel: alternating ±1
        let x = Tensor::matrix(4, 1, vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let spec = InjectionSpec::new(AnomalyType::Global, 2, 3, vec![0]);
        let r = inject(&x, &spec, 3.0, &mut stream(1, "t")).unwrap();
        let d = r.x_z.at(2, 0) - x.at(2, 0);
        assert!((d.abs() - 3.0).abs() < 1e-12);
        assert_eq!(r.y_z, vec![0, 0, 1, 0]);
    }

    #[test]
    fn trend_ramp_formula() {
        let x = Tensor::matrix(8, 1, vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0]).unwrap();
        let a = 3;
        let len = x.rows();
        let spec = InjectionSpec::new(AnomalyType::Trend, a, len, vec![0]);
        let r = inject(&x, &spec, 0.5, &mut stream(0, "t")).unwrap();
        for j in 0..len {
            let expect = if j >= a {
                x.at(j, 0) + 0.5 * 1.0 * (j - a + 1) as f64 / (len - a) as f64
            } else {
                x.at(j, 0)
            };
            assert!((r.x_z.at(j, 0) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn trend_holds_after_region_without_labels() {
        let x = wave(30, 1);
        let spec = InjectionSpec::new(AnomalyType::Trend, 5, 10, vec![0]);
        let p = Perturbation::plan(&x, &spec, &mut stream(0, "t")).unwrap();
        let (xz, _) = p.apply(&x, 2.0);
        let sigma = window_std(&x)[0];
        for j in 10..30 {
            assert!((xz.at(j, 0) - x.at(j, 0) - 2.0 * sigma).abs() < 1e-12);
        }
        assert_eq!(p.labels(30).iter().map(|&v| v as usize).sum::<usize>(), 5);
    }

    #[test]
    fn outside_region_is_bitwise_unchanged() {
        let x = wave(50, 3);
        for kind in AnomalyType::ALL {
            let spec = InjectionSpec::new(kind, 12, 30, vec![0, 2]);
            let r = inject(&x, &spec, 1.7, &mut stream(5, "t")).unwrap();
            let last = if kind == AnomalyType::Trend { 12 } else { 50 };
            for j in 0..50 {
                for c in 0..3 {
                    let inside = (12..30).contains(&j) || (j >= 30 && j < last);
                    let touched = c != 1 && (inside || (kind == AnomalyType::Trend && j >= 12));
                    if !touched {
                        assert_eq!(r.x_z.at(j, c).to_bits(), x.at(j, c).to_bits(), "{kind} {j} {c}");
                    }
                }
            }
        }
    }

    #[test]
    fn empty_channel_subset_is_config_error() {
        let x = wave(10, 1);
        let spec = InjectionSpec::new(AnomalyType::Global, 1, 3, vec![]);
        assert!(matches!(
            inject(&x, &spec, 1.0, &mut stream(0, "t")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn locate_region_examples() {
        assert_eq!(locate_region(&[1.0; 10], 3).unwrap(), (0, 3));
        let mut e = vec![0.1; 12];
        e[7] = 5.0;
        let (a, b) = locate_region(&e, 3).unwrap();
        assert!((a..b).contains(&7));
        assert_eq!((a, b), (5, 8));
        assert_eq!(locate_region(&e, 12).unwrap(), (0, 12));
        assert!(locate_region(&e, 13).is_err());
    }

    #[test]
    fn region_bounds_follow_window() {
        assert_eq!(region_len_bounds(100, 5, 50), (5, 25));
        assert_eq!(region_len_bounds(400, 5, 50), (5, 50));
        assert_eq!(region_len_bounds(12, 5, 50), (5, 5));
    }
}
