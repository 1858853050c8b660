//! Minimal SVG charts for score and loss CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use prognos_core::{Error, Result};

const W: f64 = 960.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn num(cell: &str, line: usize) -> Result<f64> {
    cell.trim()
        .parse::<f64>()
        .map_err(|_| perr(line, format!("not a number: {cell:?}")))
}

/// Score series: step, score, label, and the (constant) threshold if any.
pub struct ScorePlot {
    pub steps: Vec<f64>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub threshold: Option<f64>,
}

pub fn parse_scores(text: &str) -> Result<ScorePlot> {
    let mut p = ScorePlot {
        steps: Vec::new(),
        scores: Vec::new(),
        labels: Vec::new(),
        threshold: None,
    };
    for (i, line) in text.lines().enumerate().skip(1) {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 4 {
            return Err(perr(n, format!("expected 4 fields, found {}", cells.len())));
        }
        p.steps.push(num(cells[0], n)?);
        p.scores.push(num(cells[1], n)?);
        p.labels.push(match cells[2].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(perr(n, format!("label must be 0 or 1, found {other:?}"))),
        });
        if !cells[3].trim().is_empty() {
            p.threshold = Some(num(cells[3], n)?);
        }
    }
    if p.scores.is_empty() {
        return Err(Error::Usage("score series is empty".into()));
    }
    Ok(p)
}

/// Loss curves keyed by `phase/term`.
pub fn parse_losses(text: &str) -> Result<BTreeMap<String, Vec<(f64, f64)>>> {
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            return Err(perr(n, format!("expected 5 fields, found {}", cells.len())));
        }
        let key = format!("{}/{}", cells[1].trim(), cells[3].trim());
        series.entry(key).or_default().push((num(cells[0], n)?, num(cells[4], n)?));
    }
    if series.is_empty() {
        return Err(Error::Usage("loss log is empty".into()));
    }
    Ok(series)
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let lo = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::INFINITY, f64::min);
        let hi = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::NEG_INFINITY, f64::max);
        let (mut x0, mut x1) = (lo(&mut xs.clone()), hi(&mut xs.clone()));
        let (mut y0, mut y1) = (lo(&mut ys.clone()), hi(&mut ys.clone()));
        if x1 <= x0 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 <= y0 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let m = 0.05 * (y1 - y0);
        Frame { x0, x1, y0: y0 - m, y1: y1 + m }
    }

    fn x(&self, v: f64) -> f64 {
        PAD + (v - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn y(&self, v: f64) -> f64 {
        H - PAD - (v - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn open(s: &mut String, title: &str, f: &Frame) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{PAD}" y="20" font-size="13">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    for (v, y) in [(f.y1, PAD), (f.y0, H - PAD)] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, PAD - 4.0, y + 4.0);
    }
    for (v, x) in [(f.x0, PAD), (f.x1, W - PAD)] {
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{v:.0}</text>"#, H - PAD + 16.0);
    }
}

fn polyline(s: &mut String, f: &Frame, pts: &[(f64, f64)], color: &str) {
    let mut d = String::new();
    for (x, y) in pts {
        let _ = write!(d, "{:.2},{:.2} ", f.x(*x), f.y(*y));
    }
    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1"/>"#, d.trim_end());
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn score_svg(p: &ScorePlot) -> String {
    let ys = p.scores.iter().copied().chain(p.threshold);
    let f = Frame::new(p.steps.iter().copied(), ys);
    let mut s = String::new();
    open(&mut s, "anomaly score", &f);
    // shaded ground-truth segments
    let mut i = 0;
    while i < p.labels.len() {
        if p.labels[i] == 1 {
            let start = i;
            while i < p.labels.len() && p.labels[i] == 1 {
                i += 1;
            }
            let x0 = f.x(p.steps[start] - 0.5);
            let x1 = f.x(p.steps[i - 1] + 0.5);
            let _ = writeln!(
                s,
                r##"<rect class="truth" x="{x0:.2}" y="{PAD}" width="{:.2}" height="{}" fill="#f4a6a6" fill-opacity="0.5"/>"##,
                (x1 - x0).max(0.5),
                H - 2.0 * PAD
            );
        } else {
            i += 1;
        }
    }
    let pts: Vec<(f64, f64)> = p.steps.iter().copied().zip(p.scores.iter().copied()).collect();
    polyline(&mut s, &f, &pts, PALETTE[0]);
    if let Some(t) = p.threshold {
        let y = f.y(t);
        let _ = writeln!(
            s,
            r##"<line class="threshold" data-value="{t:?}" x1="{PAD}" x2="{}" y1="{y:.2}" y2="{y:.2}" stroke="#d62728" stroke-dasharray="6 3"/>"##,
            W - PAD
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn loss_svg(series: &BTreeMap<String, Vec<(f64, f64)>>) -> String {
    let all = || series.values().flatten();
    let f = Frame::new(all().map(|p| p.0), all().map(|p| p.1));
    let mut s = String::new();
    open(&mut s, "training losses", &f);
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        polyline(&mut s, &f, pts, color);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - PAD - 150.0,
            PAD + 14.0 * (k as f64 + 1.0),
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Picks the chart from the CSV header.
pub fn render(text: &str) -> Result<String> {
    let header = text.lines().next().unwrap_or("").trim();
    match header {
        "step,score,label,threshold" => Ok(score_svg(&parse_scores(text)?)),
        "step,phase,epoch,term,value" => Ok(loss_svg(&parse_losses(text)?)),
        "" => Err(Error::Usage("input is empty".into())),
        other => Err(perr(1, format!("unrecognised header {other:?}"))),
    }
}
