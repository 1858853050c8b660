//! Test-time scoring, ratio thresholding and tolerance-aware metrics.

use crate::autodiff::Tensor;
use crate::config::{tolerance_name, EvalConfig, TOLERANCE_INF};
use crate::data::{SeriesSet, WindowPair};
use crate::error::{Error, Result};
use crate::model::{step_errors, Bundle};

/// Forecast a window, reconstruct the forecast through the detection path
/// and score each future step by the channel-mean squared residual.
/// Forecasts longer than `L_in` are reconstructed in slices of `L_in`.
pub fn test_time_score(bundle: &Bundle, x_in: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let x_hat = bundle.forecast(x_in)?;
    let chunk = bundle.arch.l_in;
    let mut scores = Vec::with_capacity(x_hat.rows());
    let mut start = 0;
    while start < x_hat.rows() {
        let end = (start + chunk).min(x_hat.rows());
        let part = x_hat.slice_rows(start, end)?;
        let rec = bundle.reconstruct(&part)?;
        scores.extend(step_errors(&part, &rec));
        start = end;
    }
    Ok((x_hat, scores))
}

/// Threshold flagging about a fraction `r` of scores: the `k`-th smallest
/// score with `k = ceil((1 - r) T)`.
pub fn threshold_by_ratio(scores: &[f64], r: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::usage("cannot threshold an empty score series"));
    }
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::usage(format!("anomaly ratio {r} outside (0, 1)")));
    }
    let t = scores.len();
    // the small slack keeps products like 0.8 * 10 from rounding up a rank
    let k = (((1.0 - r) * t as f64) - 1e-9).ceil().clamp(1.0, t as f64) as usize;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k - 1])
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    pub flags: Vec<u8>,
    pub threshold: f64,
    pub ratio: f64,
}

pub fn detect(scores: &[f64], threshold: f64, ratio: f64) -> DetectionResult {
    DetectionResult {
        flags: scores.iter().map(|&s| (s > threshold) as u8).collect(),
        threshold,
        ratio,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

/// A ground-truth anomaly counts as detected when any prediction lies within
/// `t` steps of it. `TOLERANCE_INF` detects every anomaly once anything is
/// predicted.
pub fn tolerant_f1(pred: &[u8], gt: &[u8], t: usize) -> Result<Prf> {
    if pred.len() != gt.len() {
        return Err(Error::usage(format!(
            "{} predictions for {} labels",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len();
    // prefix[i] = predictions among the first i steps
    let mut prefix = vec![0usize; n + 1];
    for (i, &p) in pred.iter().enumerate() {
        prefix[i + 1] = prefix[i] + (p == 1) as usize;
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for j in 0..n {
        let hit = if gt[j] == 1 {
            let lo = j.saturating_sub(t);
            let hi = if t == TOLERANCE_INF { n } else { j.saturating_add(t).saturating_add(1).min(n) };
            prefix[hi] > prefix[lo]
        } else {
            pred[j] == 1
        };
        match (hit, gt[j] == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

/// Non-overlapping prediction windows over the test split: inputs start at
/// `0, L_out, 2·L_out, …` and each scores the `L_out` steps after its input.
pub fn test_windows(bundle: &Bundle, set: &SeriesSet) -> Result<Vec<WindowPair>> {
    let a = &bundle.arch;
    let (w, _) = crate::data::make_windows(&set.test, &set.test_labels, a.l_in, a.l_out, a.l_out)?;
    if w.is_empty() {
        return Err(Error::usage(format!(
            "test series of {} steps is too short for windows of {} + {}",
            set.test.rows(),
            a.l_in,
            a.l_out
        )));
    }
    Ok(w)
}

/// Concatenated scores of all test windows, aligned to test steps
/// `offset .. offset + scores.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSeries {
    pub offset: usize,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub sq_error_sum: f64,
    pub sq_error_count: usize,
}

impl ScoreSeries {
    pub fn forecast_mse(&self) -> f64 {
        self.sq_error_sum / self.sq_error_count.max(1) as f64
    }

    pub fn to_csv(&self, threshold: Option<f64>) -> String {
        let mut s = String::from("step,score,label,threshold\n");
        for (i, (v, l)) in self.scores.iter().zip(&self.labels).enumerate() {
            let th = threshold.map(|t| format!("{t:?}")).unwrap_or_default();
            s.push_str(&format!("{},{:?},{},{}\n", self.offset + i, v, l, th));
        }
        s
    }
}

pub fn score_test(bundle: &Bundle, set: &SeriesSet) -> Result<ScoreSeries> {
    let windows = test_windows(bundle, set)?;
    let mut out = ScoreSeries {
        offset: bundle.arch.l_in,
        scores: Vec::new(),
        labels: Vec::new(),
        sq_error_sum: 0.0,
        sq_error_count: 0,
    };
    for w in &windows {
        let (x_hat, s) = test_time_score(bundle, &w.x_in)?;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: "score".into(),
                msg: format!("non-finite score in window at {}", w.origin),
            });
        }
        out.scores.extend(s);
        out.labels.extend_from_slice(&w.y_out);
        out.sq_error_sum += x_hat
            .data()
            .iter()
            .zip(w.x_out.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
        out.sq_error_count += x_hat.len();
    }
    Ok(out)
}

/// Mean squared forecast error over windows and channels.
pub fn forecast_mse(bundle: &Bundle, windows: &[WindowPair]) -> Result<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for w in windows {
        let f = bundle.forecast(&w.x_in)?;
        s += f.data().iter().zip(w.x_out.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        n += f.len();
    }
    Ok(s / n.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToleranceRow {
    pub t: usize,
    pub prf: Prf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub seed: u64,
    pub threshold: f64,
    pub ratio: f64,
    pub forecast_mse: f64,
    pub rows: Vec<ToleranceRow>,
    /// Configuration the report was produced under, `key = value` lines.
    pub config: String,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "seed,t,precision,recall,f1,forecast_mse,threshold,ratio";

    pub fn f1_at(&self, t: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.t == t).map(|r| r.prf.f1)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        s.push_str(&self.csv_rows());
        s
    }

    pub fn csv_rows(&self) -> String {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
                    self.seed,
                    tolerance_name(r.t),
                    r.prf.precision,
                    r.prf.recall,
                    r.prf.f1,
                    self.forecast_mse,
                    self.threshold,
                    self.ratio
                )
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "seed {}\nthreshold {:.6} (ratio {:.4})\nforecast mse {:.6}\n",
            self.seed, self.threshold, self.ratio, self.forecast_mse
        );
        for r in &self.rows {
            s.push_str(&format!(
                "t={:<4} precision {:.4}  recall {:.4}  f1 {:.4}\n",
                tolerance_name(r.t),
                r.prf.precision,
                r.prf.recall,
                r.prf.f1
            ));
        }
        s.push_str("\n[config]\n");
        s.push_str(&self.config);
        s
    }
}

pub fn metrics_from_scores(
    scores: &ScoreSeries,
    set: &SeriesSet,
    cfg: &EvalConfig,
    seed: u64,
    config_echo: &str,
) -> Result<MetricsReport> {
    if !set.test_labeled {
        return Err(Error::Metric("test split has no labels; scores only".into()));
    }
    let ratio = match cfg.ratio {
        Some(r) => r,
        None => set.test_anomaly_ratio(),
    };
    if ratio <= 0.0 {
        return Err(Error::Metric("test split contains no labelled anomalies".into()));
    }
    let threshold = threshold_by_ratio(&scores.scores, ratio)?;
    let det = detect(&scores.scores, threshold, ratio);
    let rows = cfg
        .tolerances
        .iter()
        .map(|&t| Ok(ToleranceRow { t, prf: tolerant_f1(&det.flags, &scores.labels, t)? }))
        .collect::<Result<_>>()?;
    Ok(MetricsReport {
        seed,
        threshold,
        ratio,
        forecast_mse: scores.forecast_mse(),
        rows,
        config: config_echo.to_string(),
    })
}

pub fn evaluate(
    bundle: &Bundle,
    set: &SeriesSet,
    cfg: &EvalConfig,
    seed: u64,
    config_echo: &str,
) -> Result<MetricsReport> {
    let scores = score_test(bundle, set)?;
    metrics_from_scores(&scores, set, cfg, seed, config_echo)
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Mean ± std per tolerance across seeds.
pub fn aggregate_text(reports: &[MetricsReport]) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let mut s = format!("{} seeds\n", reports.len());
    for (i, row) in first.rows.iter().enumerate() {
        let col = |f: fn(&Prf) -> f64| {
            mean_std(&reports.iter().map(|r| f(&r.rows[i].prf)).collect::<Vec<_>>())
        };
        let (p, r, f) = (col(|x| x.precision), col(|x| x.recall), col(|x| x.f1));
        s.push_str(&format!(
            "t={:<4} precision {:.4} ± {:.4}  recall {:.4} ± {:.4}  f1 {:.4} ± {:.4}\n",
            tolerance_name(row.t),
            p.0,
            p.1,
            r.0,
            r.1,
            f.0,
            f.1
        ));
    }
    let mse = mean_std(&reports.iter().map(|r| r.forecast_mse).collect::<Vec<_>>());
    s.push_str(&format!("forecast mse {:.6} ± {:.6}\n", mse.0, mse.1));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_worked_example() {
        let s: Vec<f64> = (1..=10).map(f64::from).collect();
        let th = threshold_by_ratio(&s, 0.2).unwrap();
        assert_eq!(th, 8.0);
        assert_eq!(detect(&s, th, 0.2).flags.iter().filter(|&&f| f == 1).count(), 2);
    }

    #[test]
    fn threshold_edge_cases() {
        let s = [3.0, 1.0, 2.0];
        assert_eq!(threshold_by_ratio(&s, 1e-9).unwrap(), 3.0);
        let eq = [0.5; 7];
        let th = threshold_by_ratio(&eq, 0.3).unwrap();
        assert!(detect(&eq, th, 0.3).flags.iter().all(|&f| f == 0));
        assert!(matches!(threshold_by_ratio(&[], 0.1), Err(Error::Usage(_))));
        assert!(threshold_by_ratio(&s, 0.0).is_err());
    }

    #[test]
    fn detect_extremes() {
        let s = [0.1, 0.5, 0.9];
        assert_eq!(detect(&s, -1.0, 0.1).flags, vec![1, 1, 1]);
        assert_eq!(detect(&s, 2.0, 0.1).flags, vec![0, 0, 0]);
        assert_eq!(detect(&s, 0.5, 0.1), detect(&s, 0.5, 0.1));
    }

    #[test]
    fn tolerant_f1_examples() {
        let p = tolerant_f1(&[0, 1, 0, 0], &[0, 0, 1, 0], 1).unwrap();
        assert_eq!((p.precision, p.recall), (0.5, 1.0));
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-15);
        let x = [0, 1, 1, 0, 1];
        assert_eq!(tolerant_f1(&x, &x, 0).unwrap().f1, 1.0);
        let none = tolerant_f1(&[0, 0], &[0, 0], 3).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        assert!(matches!(tolerant_f1(&[0], &[0, 1], 1), Err(Error::Usage(_))));
        let far = tolerant_f1(&[1, 0, 0, 0, 0, 0], &[0, 0, 0, 0, 0, 1], TOLERANCE_INF).unwrap();
        assert_eq!(far.recall, 1.0);
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
