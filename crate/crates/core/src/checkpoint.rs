//! Portable text checkpoints. Parameters are stored as the hex bit patterns
//! of their `f64` values, so a save/load round trip is bitwise exact.
//!
//! ```text
//! prognos-checkpoint 1
//! arch l_in=100 l_out=100 channels=2 ...
//! shared_backbone true
//! frozen fftr,aafn,pool
//! param theta.0.attn.q.w 256,256 3f8a...
//! ```

use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::model::{Bundle, FreezeFlags};

const MAGIC: &str = "prognos-checkpoint 1";

fn arch_pairs(a: &ArchConfig) -> Vec<(&'static str, usize)> {
    vec![
        ("l_in", a.l_in),
        ("l_out", a.l_out),
        ("channels", a.channels),
        ("d_model", a.d_model),
        ("n_layers", a.n_layers),
        ("heads", a.heads),
        ("fftr_layers", a.fftr_layers),
        ("aafn_heads", a.aafn_heads),
        ("pool_size", a.pool_size),
        ("prompt_len", a.prompt_len),
        ("top_n", a.top_n),
    ]
}

pub fn to_text(bundle: &Bundle) -> String {
    let mut s = String::from(MAGIC);
    s.push('\n');
    let arch: Vec<String> = arch_pairs(&bundle.arch)
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    s.push_str(&format!("arch {}\n", arch.join(" ")));
    s.push_str(&format!("shared_backbone {}\n", bundle.shared_backbone));
    let f = bundle.frozen;
    let frozen: Vec<&str> = [(f.fftr, "fftr"), (f.aafn, "aafn"), (f.pool, "pool")]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
    s.push_str(&format!("frozen {}\n", frozen.join(",")));
    for (name, t) in bundle.store.iter() {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        s.push_str(&format!("param {name} {}", shape.join(",")));
        for v in t.data() {
            s.push_str(&format!(" {:016x}", v.to_bits()));
        }
        s.push('\n');
    }
    s
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

pub fn from_text(text: &str) -> Result<Bundle> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == MAGIC => {}
        _ => return Err(perr(1, "not a checkpoint file")),
    }
    let mut arch = ArchConfig::default();
    let mut shared = None;
    let mut frozen = FreezeFlags::default();
    let mut store = ParamStore::new();
    for (n, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
        match tag {
            "arch" => {
                for kv in rest.split_whitespace() {
                    let (k, v) = kv.split_once('=').ok_or_else(|| perr(n, format!("bad arch entry {kv}")))?;
                    let v: usize = v.parse().map_err(|_| perr(n, format!("bad value in {kv}")))?;
                    let slot = match k {
                        "l_in" => &mut arch.l_in,
                        "l_out" => &mut arch.l_out,
                        "channels" => &mut arch.channels,
                        "d_model" => &mut arch.d_model,
                        "n_layers" => &mut arch.n_layers,
                        "heads" => &mut arch.heads,
                        "fftr_layers" => &mut arch.fftr_layers,
                        "aafn_heads" => &mut arch.aafn_heads,
                        "pool_size" => &mut arch.pool_size,
                        "prompt_len" => &mut arch.prompt_len,
                        "top_n" => &mut arch.top_n,
                        _ => return Err(perr(n, format!("unknown arch key {k}"))),
                    };
                    *slot = v;
                }
            }
            "shared_backbone" => {
                shared = Some(rest.trim().parse::<bool>().map_err(|_| perr(n, "expected true or false"))?)
            }
            "frozen" => {
                for f in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    match f {
                        "fftr" => frozen.fftr = true,
                        "aafn" => frozen.aafn = true,
                        "pool" => frozen.pool = true,
                        _ => return Err(perr(n, format!("unknown component {f}"))),
                    }
                }
            }
            "param" => {
                let mut it = rest.split_whitespace();
                let name = it.next().ok_or_else(|| perr(n, "missing parameter name"))?;
                let shape: Vec<usize> = it
                    .next()
                    .ok_or_else(|| perr(n, "missing shape"))?
                    .split(',')
                    .map(|d| d.parse().map_err(|_| perr(n, format!("bad shape entry {d}"))))
                    .collect::<Result<_>>()?;
                let data: Vec<f64> = it
                    .map(|h| {
                        u64::from_str_radix(h, 16)
                            .map(f64::from_bits)
                            .map_err(|_| perr(n, format!("bad value {h}")))
                    })
                    .collect::<Result<_>>()?;
                let t = Tensor::new(shape, data).map_err(|e| perr(n, e.to_string()))?;
                store.insert(name, t).map_err(|e| perr(n, e.to_string()))?;
            }
            _ => return Err(perr(n, format!("unknown record {tag}"))),
        }
    }
    let shared = shared.ok_or_else(|| perr(0, "missing shared_backbone record"))?;
    arch.validate()?;
    // every expected parameter must be present with the expected shape
    let reference = Bundle::init(&arch, shared, 0)?;
    for (name, t) in reference.store.iter() {
        let got = store
            .get(name)
            .map_err(|_| Error::Config(format!("checkpoint lacks parameter {name}")))?;
        if got.shape() != t.shape() {
            return Err(Error::dim(format!(
                "parameter {name}: checkpoint shape {:?}, expected {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if store.len() != reference.store.len() {
        return Err(Error::Config("checkpoint has unexpected extra parameters".into()));
    }
    Ok(Bundle {
        arch,
        shared_backbone: shared,
        store,
        frozen,
    })
}

pub fn save(bundle: &Bundle, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(bundle)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Bundle> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}
