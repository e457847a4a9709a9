//! Multi-seed experiment runs writing a results directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiment::{run_seed, SeedResult};
use crate::report::{read_seed, write_aggregate, write_seed, Manifest, Records};

#[derive(Debug)]
pub struct RunOutcome {
    pub results: Vec<SeedResult>,
    pub records: Records,
    pub manifest: Manifest,
}

/// Seeds are independent, so they run on up to `workers` threads; output is
/// identical for any worker count.
pub fn run_seeds(cfg: &ExperimentConfig, workers: usize) -> Vec<(u64, Result<SeedResult>)> {
    let settings = cfg.run_settings();
    let seeds = &cfg.experiment.seeds;
    let workers = workers.clamp(1, seeds.len().max(1));
    let mut out: Vec<(u64, Result<SeedResult>)> = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(workers) {
        let done: Vec<_> = thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| {
                    let settings = &settings;
                    s.spawn(move || (seed, run_seed(seed, settings)))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("seed worker panicked"))
                .collect()
        });
        out.extend(done);
    }
    out
}

pub fn default_workers() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

/// Runs every configured seed and writes per-seed files, the seed-averaged
/// tables and a manifest under `out`. Seeds that fail are listed in the
/// manifest, which is then marked incomplete, and the first error is returned
/// after everything else has been written.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, workers: usize) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let config_path = out.join("config.toml");
    fs::write(&config_path, cfg.to_text()?)?;
    let mut files: Vec<PathBuf> = vec![config_path];
    let mut results = Vec::new();
    let mut records = Records::default();
    let mut failures = Vec::new();
    let mut first_error = None;
    for (seed, r) in run_seeds(cfg, workers) {
        match r {
            Ok(r) => {
                let dir = out.join(format!("seed{seed}"));
                files.extend(write_seed(&dir, &r)?);
                // Aggregate from the written text so `report` reproduces the tables exactly.
                records.extend(read_seed(&dir)?);
                if let Some(m) = &r.eif {
                    let p = dir.join("eif.evf");
                    Checkpoint::Eif(m.clone()).save(&p)?;
                    files.push(p);
                }
                results.push(r);
            }
            Err(e) => {
                failures.push(format!("seed {seed}: {e}"));
                first_error.get_or_insert(e);
            }
        }
    }
    if !results.is_empty() {
        files.extend(write_aggregate(out, &records)?);
    }
    let seeds = results.iter().map(|r| r.seed).collect();
    let manifest = Manifest::new(seeds, failures, out, &files)?;
    manifest.write(out)?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(RunOutcome {
            results,
            records,
            manifest,
        }),
    }
}

/// Re-aggregates finished result directories into `out`.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<Records> {
    if inputs.is_empty() {
        return Err(Error::Usage("report needs at least one results directory".into()));
    }
    let records = crate::report::load_results(inputs)?;
    if records.metrics.is_empty() {
        return Err(Error::Format("no seed results found".into()));
    }
    write_aggregate(out, &records)?;
    Ok(records)
}
