//! Subcommand implementations. Each writes its report to the supplied sink and
//! maps failures onto [`CliError`] exit classes.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use ntps_core::analysis::{correlate, k_grid, layer_cells, predict_lora_gain, DatasetLayers, GainPrediction, SweepCell, SweepResult};
use ntps_core::synth::{generate, theorem_suite, CheckResult, SuiteOptions, SynthConfig};
use ntps_core::{autoregressive_subspace, k_from_proportion, ntps, perception_subspace, Pooling, SentenceSample, SufficientStats};
use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::format::{
    read_metrics_table, read_stats_file, select_metric, write_stats_file, ActivationHeader, ActivationReader, ActivationWriter,
    TsvWriter,
};

/// Sentences per accumulation block. Blocks are cut from the global sentence
/// index across all inputs and merged left to right, so the result does not
/// depend on how the inputs are sharded or on the thread count.
pub const BLOCK_SENTENCES: usize = 64;
const BATCH_BLOCKS: usize = 64;

/// Extension of stats files discovered by [`load_stats_dir`].
pub const STATS_EXTENSION: &str = "ntss";

/// Thread pool sized by `NTPS_THREADS` (unset or 0 picks the core count).
pub fn thread_pool() -> CliResult<ThreadPool> {
    let threads = match std::env::var("NTPS_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("NTPS_THREADS={v} is not a nonnegative integer")))?,
        Err(std::env::VarError::NotPresent) => 0,
        Err(e) => return Err(CliError::Usage(format!("NTPS_THREADS: {e}"))),
    };
    ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| CliError::Data(e.to_string()))
}

fn widen(sample: SentenceSample<f32>) -> CliResult<SentenceSample<f64>> {
    let (tokens, label) = sample.into_parts();
    Ok(SentenceSample::new(tokens.map(f64::from), label)?)
}

fn fold_batch(total: &mut SufficientStats<f64>, batch: &[SentenceSample<f64>], pool: &ThreadPool) -> CliResult<()> {
    let meta = total.meta();
    let blocks: Vec<ntps_core::Result<SufficientStats<f64>>> = pool.install(|| {
        batch
            .par_chunks(BLOCK_SENTENCES)
            .map(|chunk| {
                let mut s = SufficientStats::new(meta.d, meta.c, meta.layer);
                for x in chunk {
                    s.accumulate(x)?;
                }
                Ok(s)
            })
            .collect()
    });
    for b in blocks {
        total.merge(&b?)?;
    }
    Ok(())
}

/// Streams every input as one logical sequence of sentences into f64 sums.
pub fn accumulate_files(paths: &[PathBuf], pool: &ThreadPool) -> CliResult<SufficientStats<f64>> {
    if paths.is_empty() {
        return Err(CliError::Usage("no input files".into()));
    }
    let with_path = |p: &Path, e: crate::format::FormatError| CliError::Data(format!("{}: {e}", p.display()));
    let readers = paths
        .iter()
        .map(|p| ActivationReader::open(p).map_err(|e| with_path(p, e)))
        .collect::<CliResult<Vec<_>>>()?;
    let first = readers[0].header();
    for (p, r) in paths.iter().zip(&readers) {
        let h = r.header();
        if (h.d, h.c, h.layer) != (first.d, first.c, first.layer) {
            return Err(CliError::Data(format!(
                "{}: (d, c, layer) = ({}, {}, {}) differs from ({}, {}, {}) in {}",
                p.display(),
                h.d,
                h.c,
                h.layer,
                first.d,
                first.c,
                first.layer,
                paths[0].display()
            )));
        }
    }

    let mut total = SufficientStats::new(first.d as usize, first.c as usize, first.layer);
    let capacity = BLOCK_SENTENCES * BATCH_BLOCKS;
    let mut batch = Vec::with_capacity(capacity);
    for (p, reader) in paths.iter().zip(readers) {
        for sample in reader {
            batch.push(widen(sample.map_err(|e| with_path(p, e))?)?);
            if batch.len() == capacity {
                fold_batch(&mut total, &batch, pool)?;
                batch.clear();
            }
        }
    }
    fold_batch(&mut total, &batch, pool)?;
    if total.is_empty() {
        return Err(CliError::Data("empty input: no records".into()));
    }
    Ok(total)
}

pub fn cmd_accumulate(inputs: &[PathBuf], out: &Path, pool: &ThreadPool) -> CliResult<SufficientStats<f64>> {
    let stats = accumulate_files(inputs, pool)?;
    write_stats_file(out, &stats)?;
    Ok(stats)
}

fn check_proportion(k_prop: f64) -> CliResult<()> {
    if k_prop > 0.0 && k_prop <= 1.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--k-prop {k_prop} must lie in (0, 1]")))
    }
}

/// `(layer, k, ntps)` for one stats accumulator. `pooling` selects the source of the perception pencil.
pub fn score_stats(stats: &SufficientStats<f64>, k_prop: f64, pooling: Pooling) -> CliResult<(u32, usize, f64)> {
    check_proportion(k_prop)?;
    let m = stats.finalize()?;
    let k = k_from_proportion(k_prop, m.d())?;
    let u = perception_subspace(&m, k, pooling)?;
    let v = autoregressive_subspace(&m, k)?;
    Ok((stats.meta().layer, k, ntps(&u.basis, &v.basis)?))
}

pub fn cmd_score(stats: &Path, k_prop: f64, pooling: Pooling, out: &mut dyn Write) -> CliResult<(u32, usize, f64)> {
    check_proportion(k_prop)?;
    let stats = read_stats_file(stats)?;
    let (layer, k, score) = score_stats(&stats, k_prop, pooling)?;
    let mut tsv = TsvWriter::new(out, &["layer", "k", "ntps"])?;
    tsv.row(&[layer.to_string(), k.to_string(), score.to_string()])?;
    tsv.finish()?;
    Ok((layer, k, score))
}

/// Parses `start:stop:step`.
pub fn parse_grid(spec: &str) -> CliResult<(f64, f64, f64)> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || CliError::Usage(format!("grid '{spec}' must be start:stop:step"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut vals = [0.0; 3];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p.trim().parse::<f64>().map_err(|_| bad())?;
        if !v.is_finite() {
            return Err(bad());
        }
    }
    Ok((vals[0], vals[1], vals[2]))
}

/// Rank proportions for the sweep.
pub fn proportion_grid(spec: &str) -> CliResult<Vec<f64>> {
    let (start, stop, step) = parse_grid(spec)?;
    k_grid(start, stop, step).map_err(|e| CliError::Usage(e.to_string()))
}

/// Arithmetic grid `start, start + step, …` through `stop` with no range restriction.
pub fn value_grid(spec: &str) -> CliResult<Vec<f64>> {
    let (start, stop, step) = parse_grid(spec)?;
    if !(step > 0.0) || stop < start {
        return Err(CliError::Usage(format!("grid '{spec}' needs step > 0 and stop >= start")));
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect())
}

fn stats_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && path.extension() == Some(&OsString::from(STATS_EXTENSION)) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn dataset_from_files(name: String, files: &[PathBuf]) -> CliResult<DatasetLayers<f64>> {
    let mut layers = BTreeMap::new();
    for f in files {
        let stats = read_stats_file(f).map_err(|e| CliError::Data(format!("{}: {e}", f.display())))?;
        let layer = stats.meta().layer;
        if layers.insert(layer, stats.finalize()?).is_some() {
            return Err(CliError::Data(format!("dataset '{name}' has layer {layer} twice")));
        }
    }
    Ok(DatasetLayers { name, layers })
}

/// Loads `DIR/*.ntss` as one dataset named after `DIR`, or `DIR/<dataset>/*.ntss`
/// as one dataset per subdirectory. Mixing both layouts is an error.
pub fn load_stats_dir(dir: &Path) -> CliResult<Vec<DatasetLayers<f64>>> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("{} is not a directory", dir.display())));
    }
    let top = stats_files(dir)?;
    let mut subdirs = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() && !stats_files(&path)?.is_empty() {
            subdirs.push(path);
        }
    }
    subdirs.sort();
    match (top.is_empty(), subdirs.is_empty()) {
        (true, true) => Err(CliError::Data(format!("no .{STATS_EXTENSION} files under {}", dir.display()))),
        (false, false) => Err(CliError::Data(format!(
            "{} mixes top-level stats files with per-dataset subdirectories",
            dir.display()
        ))),
        (false, true) => {
            let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
            Ok(vec![dataset_from_files(name, &top)?])
        }
        (true, false) => subdirs
            .iter()
            .map(|sub| {
                let name = sub.file_name().expect("subdirectory name").to_string_lossy().into_owned();
                dataset_from_files(name, &stats_files(sub)?)
            })
            .collect(),
    }
}

fn optional(r: Option<f64>) -> String {
    r.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

pub fn cmd_sweep(
    dir: &Path,
    grid: &[f64],
    metrics: Option<&BTreeMap<String, f64>>,
    pool: &ThreadPool,
    out: &mut dyn Write,
) -> CliResult<SweepResult> {
    let datasets = load_stats_dir(dir)?;
    let jobs: Vec<(&str, u32, &ntps_core::Moments<f64>)> =
        datasets.iter().flat_map(|ds| ds.layers.iter().map(move |(l, m)| (ds.name.as_str(), *l, m))).collect();
    let scored: Vec<ntps_core::Result<Vec<(f64, usize, f64)>>> =
        pool.install(|| jobs.par_iter().map(|(_, _, m)| layer_cells(m, grid)).collect());
    let mut cells = Vec::new();
    for ((dataset, layer, _), result) in jobs.iter().zip(scored) {
        for (k_prop, k, ntps) in result? {
            cells.push(SweepCell { dataset: dataset.to_string(), layer: *layer, k_prop, k, ntps });
        }
    }
    let result = correlate(cells, metrics)?;

    let lookup: BTreeMap<(u32, u64), Option<f64>> =
        result.correlations.iter().map(|c| ((c.layer, c.k_prop.to_bits()), c.spearman_r)).collect();
    let mut header = vec!["dataset", "layer", "k_prop", "k", "ntps"];
    if metrics.is_some() {
        header.push("spearman_r");
    }
    let mut tsv = TsvWriter::new(out, &header)?;
    for c in &result.cells {
        let mut row = vec![c.dataset.clone(), c.layer.to_string(), c.k_prop.to_string(), c.k.to_string(), c.ntps.to_string()];
        if metrics.is_some() {
            row.push(optional(lookup.get(&(c.layer, c.k_prop.to_bits())).copied().flatten()));
        }
        tsv.row(&row)?;
    }
    tsv.finish()?;
    Ok(result)
}

/// Loads one metric per dataset: `name` if given, else `preferred` when present,
/// else the table's only metric.
pub fn load_metric(path: &Path, name: Option<&str>, preferred: Option<&str>) -> CliResult<BTreeMap<String, f64>> {
    let rows = read_metrics_table(path)?;
    let name = name.or_else(|| preferred.filter(|p| rows.iter().any(|r| r.metric_name == *p)));
    Ok(select_metric(&rows, name)?)
}

/// Settings of a `validate` run: one grid of `dims × overlaps` plus a noiseless
/// aligned configuration per dimension, repeated for seeds `0..seeds`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidateArgs {
    pub seeds: u64,
    pub overlaps: Vec<f64>,
    pub dims: Vec<usize>,
    pub classes: usize,
    pub k_true: usize,
    pub n: usize,
    pub options: SuiteOptions,
}

impl Default for ValidateArgs {
    fn default() -> Self {
        Self {
            seeds: 1,
            overlaps: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            dims: vec![8, 16, 32],
            classes: 3,
            k_true: 2,
            n: 600,
            options: SuiteOptions::default(),
        }
    }
}

impl ValidateArgs {
    pub fn grid_for_seed(&self, seed: u64) -> Vec<SynthConfig> {
        let base = SynthConfig { c: self.classes, k_true: self.k_true, n: self.n, seed, ..SynthConfig::default() };
        let mut grid = Vec::new();
        for &d in &self.dims {
            for &overlap in &self.overlaps {
                grid.push(SynthConfig { d, overlap, ..base.clone() });
            }
            grid.push(SynthConfig { d, overlap: 1.0, noise_sigma: 0.0, ..base.clone() });
        }
        grid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub settings: ValidateArgs,
    pub configs: Vec<SynthConfig>,
    pub checks: Vec<CheckResult>,
    pub passed: usize,
    pub failed: usize,
}

/// Runs the theorem suite for every seed. Configurations are validated before anything runs.
pub fn run_validation(args: &ValidateArgs, pool: &ThreadPool) -> CliResult<ValidationReport> {
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    if args.dims.is_empty() || args.overlaps.is_empty() {
        return Err(CliError::Usage("dimension and overlap grids must be nonempty".into()));
    }
    let grids: Vec<Vec<SynthConfig>> = (0..args.seeds).map(|s| args.grid_for_seed(s)).collect();
    for config in grids.iter().flatten() {
        config.validate().map_err(|e| CliError::Usage(format!("config {config:?}: {e}")))?;
    }
    let reports: Vec<ntps_core::Result<_>> =
        pool.install(|| grids.par_iter().map(|g| theorem_suite(g, &args.options)).collect());
    let mut report = ValidationReport { settings: args.clone(), configs: Vec::new(), checks: Vec::new(), passed: 0, failed: 0 };
    for r in reports {
        let r = r?;
        let offset = report.configs.len();
        report.checks.extend(r.checks.into_iter().map(|c| CheckResult { config: c.config + offset, ..c }));
        report.configs.extend(r.configs);
        report.passed += r.passed;
        report.failed += r.failed;
    }
    Ok(report)
}

/// Writes the JSON report, then fails with the validation exit class if any check failed.
pub fn cmd_validate(args: &ValidateArgs, pool: &ThreadPool, out: &mut dyn Write) -> CliResult<ValidationReport> {
    let report = run_validation(args, pool)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    writeln!(out, "{json}")?;
    out.flush()?;
    if report.failed > 0 {
        return Err(CliError::Validation(format!("{} of {} checks failed", report.failed, report.failed + report.passed)));
    }
    Ok(report)
}

pub fn cmd_predict_gain(
    ntps_table: &Path,
    observed: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult<GainPrediction> {
    let scores: Vec<(String, f64)> = load_metric(ntps_table, None, Some("ntps"))?.into_iter().collect();
    let gains = observed.map(|p| load_metric(p, None, Some("gain"))).transpose()?;
    let prediction = predict_lora_gain(&scores, gains.as_ref())?;
    let mut header = vec!["rank", "dataset", "ntps"];
    if gains.is_some() {
        header.extend(["observed_gain", "spearman_r"]);
    }
    let mut tsv = TsvWriter::new(out, &header)?;
    for e in &prediction.ranking {
        let mut row = vec![e.rank.to_string(), e.dataset.clone(), e.ntps.to_string()];
        if gains.is_some() {
            row.push(optional(e.observed_gain));
            row.push(optional(prediction.spearman_r));
        }
        tsv.row(&row)?;
    }
    tsv.finish()?;
    Ok(prediction)
}

/// Paths written by [`cmd_synth`]: `out` itself for one shard, else `out.0`, `out.1`, ….
pub fn shard_paths(out: &Path, shards: usize) -> Vec<PathBuf> {
    if shards == 1 {
        return vec![out.to_path_buf()];
    }
    (0..shards)
        .map(|i| {
            let mut name = out.as_os_str().to_owned();
            name.push(format!(".{i}"));
            PathBuf::from(name)
        })
        .collect()
}

/// Writes one synthetic corpus as f32 activation files, split into contiguous shards.
pub fn cmd_synth(config: &SynthConfig, layer: u32, out: &Path, shards: usize) -> CliResult<Vec<PathBuf>> {
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if shards == 0 || shards > config.n {
        return Err(CliError::Usage(format!("--shards {shards} must lie in 1..={}", config.n)));
    }
    let mut corpus = generate::<f32>(config)?;
    let paths = shard_paths(out, shards);
    let (base, extra) = (config.n / shards, config.n % shards);
    for (i, path) in paths.iter().enumerate() {
        let size = base + usize::from(i < extra);
        let header = ActivationHeader::new(config.d, config.c, size as u64, layer)?;
        let mut writer = ActivationWriter::create(path, header)?;
        for _ in 0..size {
            let sample = corpus.next().ok_or_else(|| CliError::Data("synthetic stream ended early".into()))?;
            writer.write(&sample)?;
        }
        writer.finish()?;
    }
    Ok(paths)
}
