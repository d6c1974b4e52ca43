//! Efficiency accounting and ablation grids.
//!
//! FLOPs are reported as twice the multiply-accumulate count.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{Precision, RunConfig};
use crate::data::VideoSample;
use crate::error::{Error, Result};
use crate::memory::FeatureMap;
use crate::model::train::{train, TrainConfig};
use crate::model::{param_specs, DMNetConfig, Model, Variant};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Operation counts of one steady-state frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub macs: u64,
    /// `2 × macs`.
    pub flops: u64,
    /// Multiply-accumulates per block.
    pub blocks: BTreeMap<String, u64>,
    pub elementwise: u64,
}

/// Sum of parameter tensor sizes.
pub fn count_params(cfg: &DMNetConfig) -> usize {
    param_specs(cfg).iter().map(|s| s.shape.iter().product::<usize>()).sum()
}

/// Counts one frame at steady state: a full local memory and `occupancy`
/// entries in the global memory.
pub fn count_model_flops(cfg: &DMNetConfig, occupancy: usize) -> Result<FlopReport> {
    let cfg = DMNetConfig { global_capacity: cfg.global_capacity.map(|c| c.max(occupancy)), ..cfg.clone() };
    let model = Model::<f32>::new(cfg.clone())?;
    let img = Tensor::zeros(&[3, cfg.height, cfg.width]);
    let mut state = model.new_stream()?;
    for _ in 0..cfg.tau {
        model.process_frame(&mut state, &img)?;
    }
    state.global.clear();
    let (h, w) = cfg.feature_size();
    for i in 0..occupancy {
        // far apart maps so every one passes the similarity gate
        let values = Tensor::full(&[cfg.channels, h, w], 1e3 * i as f32);
        state.global.consider_with_r(FeatureMap::new(values, i)?, cfg.alpha + 1.0)?;
    }
    let (_, counter) = model.process_frame_counted(&mut state, &img)?;
    let total = counter.total();
    Ok(FlopReport {
        macs: total.macs,
        flops: 2 * total.macs,
        blocks: counter.blocks().iter().filter(|(_, c)| c.macs > 0).map(|(k, c)| (k.clone(), c.macs)).collect(),
        elementwise: total.elementwise,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Latency {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub fps: f64,
    pub repeats: usize,
}

impl Latency {
    fn from_samples(ms: &[f64]) -> Self {
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let var = ms.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
        Latency { mean_ms: mean, std_ms: var.sqrt(), fps: 1000.0 / mean, repeats: ms.len() }
    }
}

/// Streams `warmup` frames, then times `repeats` runs of the next frame,
/// each from a copy of the same steady state.
pub fn measure_latency<T: Scalar>(
    model: &Model<T>,
    video: &VideoSample,
    repeats: usize,
    warmup: usize,
) -> Result<Latency> {
    if repeats == 0 {
        return Err(Error::Config("latency repeats must be positive".into()));
    }
    if video.len() <= warmup {
        return Err(Error::Config(format!("video has {} frames, warm-up needs more than {warmup}", video.len())));
    }
    let mut state = model.new_stream()?;
    for f in &video.frames[..warmup] {
        model.process_frame(&mut state, &f.cast())?;
    }
    let frame: Tensor<T> = video.frames[warmup].cast();
    let mut ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let mut s = state.clone();
        let start = Instant::now();
        model.process_frame(&mut s, &frame)?;
        ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(Latency::from_samples(&ms))
}

/// Frames per second with `threads` streams processed concurrently, each
/// running `repeats` frames after the warm-up.
pub fn measure_throughput<T: Scalar>(
    model: &Model<T>,
    video: &VideoSample,
    repeats: usize,
    warmup: usize,
    threads: usize,
) -> Result<f64> {
    if threads == 0 || video.len() <= warmup {
        return Err(Error::Config("throughput needs at least one thread and a frame past the warm-up".into()));
    }
    let start = Instant::now();
    let results: Vec<Result<()>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|_| {
                scope.spawn(|| {
                    let mut state = model.new_stream()?;
                    for f in &video.frames[..warmup] {
                        model.process_frame(&mut state, &f.cast())?;
                    }
                    let frame: Tensor<T> = video.frames[warmup].cast();
                    for _ in 0..repeats {
                        model.process_frame(&mut state.clone(), &frame)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("latency worker panicked")).collect()
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;
    Ok((threads * repeats) as f64 / start.elapsed().as_secs_f64())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    Components,
    Fashions,
}

impl Grid {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(Grid::Components),
            "fashions" => Ok(Grid::Fashions),
            _ => Err(Error::Config(format!("unknown grid {s:?} (expected components or fashions)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Grid::Components => "components",
            Grid::Fashions => "fashions",
        }
    }

    pub fn variants(self) -> [Variant; 4] {
        match self {
            Grid::Components => Variant::COMPONENTS,
            Grid::Fashions => Variant::FASHIONS,
        }
    }
}

pub const CSV_COLUMNS: [&str; 8] = ["variant", "seed", "miou", "mdice", "params", "flops", "latency_ms", "fps"];

/// One trained and measured grid point. `miou`/`mdice` are percentages;
/// a failed run has none of the measured fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    /// A seed, or `mean` on summary rows.
    pub seed: String,
    pub miou: Option<f64>,
    pub mdice: Option<f64>,
    pub params: usize,
    pub flops: u64,
    pub latency_ms: Option<f64>,
    pub fps: Option<f64>,
}

impl BenchRow {
    pub fn failed(&self) -> bool {
        self.miou.is_none()
    }

    pub fn is_summary(&self) -> bool {
        self.seed == "mean"
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Environment {
    pub grid: String,
    pub precision: String,
    pub height: usize,
    pub width: usize,
    pub seeds: Vec<u64>,
    pub flop_convention: String,
    pub latency_repeats: usize,
    pub latency_warmup: usize,
    pub latency_threads: usize,
    pub epochs: usize,
    pub lr: f64,
    pub train_videos: usize,
    pub val_videos: usize,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub summary: Vec<BenchRow>,
    pub environment: Environment,
}

impl BenchReport {
    pub fn mean_miou(&self, v: Variant) -> Option<f64> {
        self.summary.iter().find(|r| r.variant == v.name()).and_then(|r| r.miou)
    }
}

/// Path of the JSON environment sidecar of `csv`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn read_rows(csv: &Path) -> Result<Vec<BenchRow>> {
    let mut reader = csv::Reader::from_path(csv).map_err(|e| Error::format(csv, e.to_string()))?;
    let header: Vec<String> =
        reader.headers().map_err(|e| Error::format(csv, e.to_string()))?.iter().map(String::from).collect();
    if header != CSV_COLUMNS {
        return Err(Error::format(csv, format!("unexpected columns {header:?}")));
    }
    reader.deserialize().map(|r| r.map_err(|e| Error::format(csv, e.to_string()))).collect()
}

pub fn write_rows(csv: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(csv).map_err(|e| Error::format(csv, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(csv, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(csv, e))
}

fn summarize(rows: &[BenchRow], grid: Grid) -> Vec<BenchRow> {
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    grid.variants()
        .iter()
        .filter_map(|v| {
            let ok: Vec<&BenchRow> = rows.iter().filter(|r| r.variant == v.name() && !r.failed()).collect();
            let first = ok.first()?;
            Some(BenchRow {
                variant: v.name().to_string(),
                seed: "mean".into(),
                miou: mean(ok.iter().filter_map(|r| r.miou).collect()),
                mdice: mean(ok.iter().filter_map(|r| r.mdice).collect()),
                params: first.params,
                flops: first.flops,
                latency_ms: mean(ok.iter().filter_map(|r| r.latency_ms).collect()),
                fps: mean(ok.iter().filter_map(|r| r.fps).collect()),
            })
        })
        .collect()
}

/// Trains, evaluates and measures every variant of `grid` for every seed of
/// `cfg`, writing `csv` after each row. Rows already present in `csv` are
/// kept, so an interrupted grid resumes where it stopped; failed rows are
/// retried.
pub fn run_ablation(
    train_set: &[VideoSample],
    val_set: &[VideoSample],
    grid: Grid,
    cfg: &RunConfig,
    csv: &Path,
    mut progress: impl FnMut(&BenchRow),
) -> Result<BenchReport> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("ablation needs training and validation videos".into()));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows: Vec<BenchRow> = if csv.exists() {
        read_rows(csv)?.into_iter().filter(|r| !r.is_summary() && !r.failed()).collect()
    } else {
        Vec::new()
    };
    let environment = Environment {
        grid: grid.name().into(),
        precision: cfg.precision.name().into(),
        height: cfg.model.height,
        width: cfg.model.width,
        seeds: cfg.seeds.clone(),
        flop_convention: "2 x MAC".into(),
        latency_repeats: cfg.latency_repeats,
        latency_warmup: cfg.latency_warmup,
        latency_threads: 1,
        epochs: cfg.train.epochs,
        lr: cfg.train.lr,
        train_videos: train_set.len(),
        val_videos: val_set.len(),
    };
    let json = serde_json::to_string_pretty(&environment).expect("environment serializes");
    let side = sidecar_path(csv);
    fs::write(&side, json).map_err(|e| Error::io(&side, e))?;

    for &seed in &cfg.seeds {
        for v in grid.variants() {
            if rows.iter().any(|r| r.variant == v.name() && r.seed == seed.to_string()) {
                continue;
            }
            let model_cfg = DMNetConfig { seed, ..cfg.model.clone().with_variant(v) };
            let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
            let row = match cfg.precision {
                Precision::F32 => run_row::<f32>(model_cfg, &train_cfg, train_set, val_set, cfg)?,
                Precision::F64 => run_row::<f64>(model_cfg, &train_cfg, train_set, val_set, cfg)?,
            };
            progress(&row);
            rows.push(row);
            write_rows(csv, &ordered(&rows, grid, &cfg.seeds, &[]))?;
        }
    }
    let rows = ordered(&rows, grid, &cfg.seeds, &[]);
    let summary = summarize(&rows, grid);
    write_rows(csv, &ordered(&rows, grid, &cfg.seeds, &summary))?;
    Ok(BenchReport { rows, summary, environment })
}

/// Grid order (seed-major, then variant) followed by summary rows.
fn ordered(rows: &[BenchRow], grid: Grid, seeds: &[u64], summary: &[BenchRow]) -> Vec<BenchRow> {
    let mut out = Vec::new();
    for seed in seeds {
        for v in grid.variants() {
            out.extend(rows.iter().filter(|r| r.variant == v.name() && r.seed == seed.to_string()).cloned());
        }
    }
    out.extend(summary.iter().cloned());
    out
}

fn run_row<T: Scalar>(
    model_cfg: DMNetConfig,
    train_cfg: &TrainConfig,
    train_set: &[VideoSample],
    val_set: &[VideoSample],
    cfg: &RunConfig,
) -> Result<BenchRow> {
    let name = model_cfg.variant().map_or("custom", Variant::name).to_string();
    let seed = model_cfg.seed.to_string();
    let params = count_params(&model_cfg);
    let flops = count_model_flops(&model_cfg, model_cfg.n_sample)?.flops;
    let failed = BenchRow {
        variant: name.clone(),
        seed: seed.clone(),
        miou: None,
        mdice: None,
        params,
        flops,
        latency_ms: None,
        fps: None,
    };
    let mut model = Model::<T>::new(model_cfg)?;
    match train(&mut model, train_set, val_set, train_cfg, |_| {}) {
        Ok(_) => {}
        Err(Error::NonFinite(_)) => return Ok(failed),
        Err(e) => return Err(e),
    }
    let metrics = match model.evaluate(val_set, cfg.include_background) {
        Ok(m) => m,
        Err(Error::NonFinite(_)) => return Ok(failed),
        Err(e) => return Err(e),
    };
    let lat = measure_latency(&model, &val_set[0], cfg.latency_repeats, cfg.latency_warmup)?;
    Ok(BenchRow {
        miou: Some(100.0 * metrics.miou),
        mdice: Some(100.0 * metrics.mdice),
        latency_ms: Some(lat.mean_ms),
        fps: Some(lat.fps),
        ..failed
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aga_cost_is_additive() {
        let base = DMNetConfig::default().with_channels(8);
        let off = count_model_flops(&DMNetConfig { use_aga: false, ..base.clone() }, 4).unwrap();
        let on = count_model_flops(&base, 4).unwrap();
        assert_eq!(on.macs - off.macs, on.blocks["global_read"]);
        assert!(!off.blocks.contains_key("global_read"));
    }

    #[test]
    fn grids_have_four_rows() {
        assert_eq!(Grid::parse("components").unwrap().variants().len(), 4);
        assert_eq!(Grid::parse("fashions").unwrap().variants().len(), 4);
        assert!(Grid::parse("all").is_err());
    }
}
