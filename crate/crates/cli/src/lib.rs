//! Subcommand implementations behind the `prognos` binary.

pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use prognos_core::checkpoint;
use prognos_core::data::{standard_scale, synth_generate, write_labels, write_values};
use prognos_core::eval::{aggregate_text, metrics_from_scores, score_test, MetricsReport};
use prognos_core::train::train_bundle;
use prognos_core::{Error, Result, RunConfig, SeriesSet};

pub const CONFIG_ECHO: &str = "config.txt";

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Raw (unscaled) data for one seed: files when paths are configured,
/// otherwise the synthetic generator.
pub fn load_raw(cfg: &RunConfig, seed: u64) -> Result<SeriesSet> {
    match (&cfg.train_path, &cfg.test_path) {
        (Some(tr), Some(te)) => {
            let set = SeriesSet::from_files(tr, te, cfg.labels_path.as_deref())?;
            for w in &set.warnings {
                warn!("{w}");
            }
            Ok(set)
        }
        (None, None) => synth_generate(&cfg.synth, seed),
        _ => Err(Error::Config("train_path and test_path must be given together".into())),
    }
}

/// Scaled data with the model's channel count filled in.
pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<(RunConfig, SeriesSet)> {
    let (set, _) = standard_scale(&load_raw(cfg, seed)?)?;
    let mut cfg = cfg.clone();
    cfg.arch.channels = set.channels();
    cfg.validate()?;
    Ok((cfg, set))
}

/// Writes `train.csv`, `test.csv`, `test_labels.csv` and the config echo.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.synth.validate()?;
    ensure_dir(out)?;
    let set = synth_generate(&cfg.synth, cfg.train.seed)?;
    let files = [
        out.join("train.csv"),
        out.join("test.csv"),
        out.join("test_labels.csv"),
        out.join(CONFIG_ECHO),
    ];
    write_values(&files[0], &set.train)?;
    write_values(&files[1], &set.test)?;
    write_labels(&files[2], &set.test_labels)?;
    write(&files[3], &cfg.to_text())?;
    info!("wrote {} train and {} test steps to {}", set.train.rows(), set.test.rows(), out.display());
    Ok(files.to_vec())
}

pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub report: Option<MetricsReport>,
}

fn train_one(cfg: &RunConfig, seed: u64, out: &Path) -> Result<SeedRun> {
    let mut cfg = cfg.clone();
    cfg.train.seed = seed;
    cfg.seeds = vec![seed];
    let (cfg, set) = prepare(&cfg, seed)?;
    let dir = out.join(format!("seed-{seed}"));
    ensure_dir(&dir)?;
    let echo = cfg.to_text();
    write(&dir.join(CONFIG_ECHO), &echo)?;
    info!("seed {seed}: training with ablation {}", cfg.train.ablation.to_list());
    let (bundle, log) = train_bundle(&cfg.arch, &cfg.train, &set)?;
    checkpoint::save(&bundle, &dir.join("checkpoint.txt"))?;
    write(&dir.join("losses.csv"), &log.to_csv())?;
    let scores = score_test(&bundle, &set)?;
    let report = match metrics_from_scores(&scores, &set, &cfg.eval, seed, &echo) {
        Ok(r) => {
            write(&dir.join("metrics.csv"), &r.to_csv())?;
            write(&dir.join("report.txt"), &r.to_text())?;
            write(&dir.join("scores.csv"), &scores.to_csv(Some(r.threshold)))?;
            Some(r)
        }
        Err(e) => {
            warn!("seed {seed}: {e}");
            write(&dir.join("scores.csv"), &scores.to_csv(None))?;
            None
        }
    };
    Ok(SeedRun { seed, dir, report })
}

/// Trains one bundle per seed, evaluates each, and aggregates across seeds.
pub fn cmd_train(cfg: &RunConfig, out: &Path, parallel: bool) -> Result<Vec<SeedRun>> {
    cfg.train.validate()?;
    ensure_dir(out)?;
    write(&out.join(CONFIG_ECHO), &cfg.to_text())?;
    let seeds = cfg.seed_list();
    let runs: Vec<SeedRun> = if parallel && seeds.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || train_one(cfg, seed, out))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect::<Result<_>>()
        })?
    } else {
        seeds.iter().map(|&s| train_one(cfg, s, out)).collect::<Result<_>>()?
    };
    let reports: Vec<MetricsReport> = runs.iter().filter_map(|r| r.report.clone()).collect();
    if !reports.is_empty() {
        let mut csv = String::from(MetricsReport::CSV_HEADER);
        csv.push('\n');
        for r in &reports {
            csv.push_str(&r.csv_rows());
        }
        write(&out.join("metrics.csv"), &csv)?;
        let mut text = aggregate_text(&reports);
        text.push_str("\n[config]\n");
        text.push_str(&cfg.to_text());
        write(&out.join("aggregate.txt"), &text)?;
    }
    Ok(runs)
}

/// Scores the test split with a saved bundle and writes the report.
///
/// Missing labels still produce `scores.csv` before the metric error is
/// returned.
pub fn cmd_eval(cfg: &RunConfig, checkpoint_path: &Path, out: &Path, dump_scores: bool) -> Result<MetricsReport> {
    let bundle = checkpoint::load(checkpoint_path)?;
    if cfg.arch.l_out != bundle.arch.l_out || cfg.arch.l_in != bundle.arch.l_in {
        return Err(Error::Config(format!(
            "configured windows {}→{} do not match the checkpoint's {}→{}",
            cfg.arch.l_in, cfg.arch.l_out, bundle.arch.l_in, bundle.arch.l_out
        )));
    }
    let mut cfg = cfg.clone();
    cfg.arch = bundle.arch.clone();
    let seed = cfg.train.seed;
    let (set, _) = standard_scale(&load_raw(&cfg, seed)?)?;
    if set.channels() != bundle.arch.channels {
        return Err(Error::Dimension(format!(
            "data has {} channels, checkpoint expects {}",
            set.channels(),
            bundle.arch.channels
        )));
    }
    ensure_dir(out)?;
    let echo = cfg.to_text();
    write(&out.join(CONFIG_ECHO), &echo)?;
    let scores = score_test(&bundle, &set)?;
    match metrics_from_scores(&scores, &set, &cfg.eval, seed, &echo) {
        Ok(r) => {
            write(&out.join("metrics.csv"), &r.to_csv())?;
            write(&out.join("report.txt"), &r.to_text())?;
            if dump_scores {
                write(&out.join("scores.csv"), &scores.to_csv(Some(r.threshold)))?;
            }
            Ok(r)
        }
        Err(e) => {
            write(&out.join("scores.csv"), &scores.to_csv(None))?;
            Err(e)
        }
    }
}

/// Renders a score or loss CSV to SVG. Nothing is written on error.
pub fn cmd_plot(input: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let svg = plot::render(&text)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write(out, &svg)
}
