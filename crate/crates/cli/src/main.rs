use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmnet::bench::{self, Grid};
use dmnet::config::KEYS;
use dmnet::data::io::{list_frames, read_ppm, video_dir_name, write_pgm};
use dmnet::data::{generate_dataset, load_dataset, write_video_dir, Metrics, VideoSample};
use dmnet::model::param_specs;
use dmnet::{Checkpoint, DMNetConfig, EpochLog, Error, Model, Precision, RunConfig, Scalar, Variant};

const EXIT_CONFIG: u8 = 2;
const EXIT_TRAINING: u8 = 3;
const EXIT_CHECKPOINT: u8 = 4;
const EXIT_STREAM: u8 = 5;

#[derive(Parser)]
#[command(name = "dmnet", version, about = "Online video segmentation with local and global feature memories")]
#[command(after_help = config_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic video dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        videos: usize,
    },
    /// Train a model; the trailing `val_videos` videos are held out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path. The epoch log goes next to it as `<out>.log.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing checkpoint.
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on every video of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluate with only the components of this variant enabled.
        #[arg(long)]
        variant: Option<String>,
        /// Metrics CSV, `<ckpt>.metrics.csv` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment a frame directory online, writing masks and a memory trace.
    Stream {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Set alpha and beta to the mean representativeness and similarity on a dataset.
    Calibrate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the thresholds into this config file.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run an ablation grid and write a CSV report with a JSON sidecar.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// components | fashions
        #[arg(long)]
        grid: String,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
        /// Also report throughput with this many concurrent streams.
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn config_help() -> String {
    let defaults = RunConfig::default().entries();
    let mut s = String::from("Config keys (`key = value` lines, '#' comments; DMNET_SEED overrides seed):\n");
    for ((key, desc), (_, value)) in KEYS.iter().zip(&defaults) {
        let _ = writeln!(s, "  {key:<20} {value:<12} {desc}");
    }
    s
}

struct Failure {
    code: u8,
    message: String,
}

type CliResult<T = ()> = Result<T, Failure>;

trait Code<T> {
    fn code(self, code: u8) -> CliResult<T>;
}

impl<T> Code<T> for dmnet::Result<T> {
    fn code(self, code: u8) -> CliResult<T> {
        self.map_err(|e| {
            let code = if matches!(e, Error::Config(_)) { EXIT_CONFIG } else { code };
            Failure { code, message: e.to_string() }
        })
    }
}

fn fail<T>(code: u8, message: impl Into<String>) -> CliResult<T> {
    Err(Failure { code, message: message.into() })
}

fn io<T>(r: std::io::Result<T>, path: &Path) -> CliResult<T> {
    r.map_err(|e| Failure { code: 1, message: format!("{}: {e}", path.display()) })
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).code(EXIT_CONFIG)?,
        None => RunConfig::default(),
    };
    if let Ok(v) = std::env::var("DMNET_SEED") {
        let seed = v.trim().parse().map_err(|_| Failure { code: EXIT_CONFIG, message: format!("DMNET_SEED={v:?} is not a seed") })?;
        cfg.set_seed(seed);
    }
    cfg.validate().code(EXIT_CONFIG)?;
    Ok(cfg)
}

fn split(videos: &[VideoSample], val: usize) -> CliResult<(&[VideoSample], &[VideoSample])> {
    if videos.len() <= val {
        return fail(EXIT_CONFIG, format!("dataset has {} videos, need more than val_videos = {val}", videos.len()));
    }
    Ok(videos.split_at(videos.len() - val))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen_data(config: Option<&Path>, out: &Path, videos: usize) -> CliResult {
    let cfg = load_config(config)?;
    io(fs::create_dir_all(out), out)?;
    let samples = generate_dataset(&cfg.scene, videos).code(EXIT_CONFIG)?;
    for (i, sample) in samples.iter().enumerate() {
        let dir = out.join(video_dir_name(i));
        write_video_dir(sample, &dir).code(1)?;
        let count = |f: fn(&dmnet::data::FrameEvents) -> bool| sample.events.iter().filter(|e| f(e)).count();
        println!(
            "{}: {} frames, blur {}, occlusion {}, brightness {}",
            dir.display(),
            sample.len(),
            count(|e| e.blur),
            count(|e| e.occlusion),
            count(|e| e.brightness)
        );
    }
    Ok(())
}

fn write_epoch_log(path: &Path, log: &[EpochLog]) -> CliResult {
    let mut s = String::from("epoch,lr,loss,steps,val_miou,alpha,beta\n");
    for e in log {
        let val = e.val_miou.map_or(String::new(), |v| format!("{:.6}", 100.0 * v));
        let _ = writeln!(s, "{},{},{:.6},{},{},{:.6},{:.6}", e.epoch, e.lr, e.mean_loss, e.steps, val, e.alpha, e.beta);
    }
    io(fs::write(path, s), path)
}

fn train_as<T: Scalar>(cfg: &RunConfig, train_set: &[VideoSample], val_set: &[VideoSample]) -> CliResult<(Checkpoint, Vec<EpochLog>)> {
    let mut model = Model::<T>::new(cfg.model.clone()).code(EXIT_CONFIG)?;
    let log = dmnet::train(&mut model, train_set, val_set, &cfg.train, |e| {
        let val = e.val_miou.map_or(String::from("-"), |v| format!("{:.2}", 100.0 * v));
        eprintln!("epoch {:>3}  lr {:.1e}  loss {:.4}  val mIoU {val}", e.epoch, e.lr, e.mean_loss);
    })
    .code(EXIT_TRAINING)?;
    Ok((Checkpoint::from_model(&model, cfg), log))
}

fn train_cmd(config: Option<&Path>, data: &Path, out: &Path, force: bool) -> CliResult {
    let cfg = load_config(config)?;
    if out.exists() && !force {
        return fail(EXIT_CONFIG, format!("{} exists; pass --force to overwrite", out.display()));
    }
    let videos = load_dataset(data, cfg.model.classes).code(1)?;
    let (train_set, val_set) = split(&videos, cfg.val_videos)?;
    let (ckpt, log) = match cfg.precision {
        Precision::F32 => train_as::<f32>(&cfg, train_set, val_set)?,
        Precision::F64 => train_as::<f64>(&cfg, train_set, val_set)?,
    };
    ckpt.save(out).code(EXIT_CHECKPOINT)?;
    write_epoch_log(&with_suffix(out, ".log.csv"), &log)?;
    match log.last().and_then(|e| e.val_miou) {
        Some(v) => println!("validation mIoU {:.2}", 100.0 * v),
        None => println!("no validation videos"),
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| Failure { code: EXIT_CHECKPOINT, message: e.to_string() })
}

/// The checkpoint's model, optionally reduced to the components of `variant`.
fn model_from<T: Scalar>(ckpt: &Checkpoint, variant: Option<Variant>) -> CliResult<Model<T>> {
    let full: Model<T> = ckpt.to_model().map_err(|e| Failure { code: EXIT_CHECKPOINT, message: e.to_string() })?;
    let Some(v) = variant else { return Ok(full) };
    let cfg: DMNetConfig = full.config.clone().with_variant(v);
    let mut params = dmnet::blocks::ParamStore::new();
    for spec in param_specs(&cfg) {
        match full.params.get(&spec.name) {
            Some(t) => params.insert(&spec.name, t.clone()),
            None => return fail(EXIT_CHECKPOINT, format!("checkpoint has no {} needed by variant {}", spec.name, v.name())),
        }
    }
    Model::from_parts(cfg, params).map_err(|e| Failure { code: EXIT_CHECKPOINT, message: e.to_string() })
}

fn metrics_csv(m: &Metrics) -> String {
    let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{:.6}", 100.0 * v));
    let mut s = String::from("class,iou,dice\n");
    for (c, (iou, dice)) in m.class_iou.iter().zip(&m.class_dice).enumerate() {
        let _ = writeln!(s, "{c},{},{}", fmt(*iou), fmt(*dice));
    }
    let _ = writeln!(s, "mean,{},{}", fmt(Some(m.miou)), fmt(Some(m.mdice)));
    s
}

fn eval_as<T: Scalar>(ckpt: &Checkpoint, variant: Option<Variant>, videos: &[VideoSample]) -> CliResult<Metrics> {
    let model = model_from::<T>(ckpt, variant)?;
    model.evaluate(videos, ckpt.config.include_background).code(1)
}

fn eval_cmd(ckpt_path: &Path, data: &Path, variant: Option<&str>, out: Option<&Path>) -> CliResult {
    let ckpt = load_checkpoint(ckpt_path)?;
    let variant = variant.map(Variant::parse).transpose().code(EXIT_CONFIG)?;
    let videos = load_dataset(data, ckpt.config.model.classes).code(1)?;
    if videos.is_empty() {
        return fail(EXIT_CONFIG, format!("{} holds no video_* directories", data.display()));
    }
    let m = match ckpt.config.precision {
        Precision::F32 => eval_as::<f32>(&ckpt, variant, &videos)?,
        Precision::F64 => eval_as::<f64>(&ckpt, variant, &videos)?,
    };
    for (c, (iou, dice)) in m.class_iou.iter().zip(&m.class_dice).enumerate() {
        let pct = |v: &Option<f64>| v.map_or(String::from("-"), |v| format!("{:.2}", 100.0 * v));
        println!("class {c}: IoU {}  Dice {}", pct(iou), pct(dice));
    }
    println!("mIoU {:.2}  mDice {:.2}  ({} frames)", 100.0 * m.miou, 100.0 * m.mdice, m.frames);
    let path = out.map_or_else(|| with_suffix(ckpt_path, ".metrics.csv"), Path::to_path_buf);
    io(fs::write(&path, metrics_csv(&m)), &path)
}

fn stream_as<T: Scalar>(ckpt: &Checkpoint, input: &Path, out: &Path) -> CliResult {
    let model = model_from::<T>(ckpt, None)?;
    let frames = list_frames(input).code(EXIT_STREAM)?;
    io(fs::create_dir_all(out), out)?;
    let mut state = model.new_stream().code(1)?;
    let mut trace = String::from("frame,r,s,admitted,global_size\n");
    for (t, path) in frames.iter().enumerate() {
        let img = read_ppm(path).code(EXIT_STREAM)?;
        let res = model.process_frame(&mut state, &img.cast());
        let frame = res.map_err(|e| Failure {
            code: if matches!(e, Error::Shape { .. }) { EXIT_STREAM } else { 1 },
            message: format!("{}: {e}", path.display()),
        })?;
        write_pgm(&out.join(format!("mask_{t:05}.pgm")), &frame.mask).code(1)?;
        let a = frame.admission;
        let _ = writeln!(trace, "{t},{:.6},{:.6},{},{}", a.r, a.s, u8::from(a.admitted), state.global.len());
    }
    let path = out.join("memory_trace.csv");
    io(fs::write(&path, trace), &path)?;
    println!("{} frames, global memory holds {}", frames.len(), state.global.len());
    Ok(())
}

fn stream_cmd(ckpt_path: &Path, input: &Path, out: &Path) -> CliResult {
    let ckpt = load_checkpoint(ckpt_path)?;
    match ckpt.config.precision {
        Precision::F32 => stream_as::<f32>(&ckpt, input, out),
        Precision::F64 => stream_as::<f64>(&ckpt, input, out),
    }
}

fn calibrate_as<T: Scalar>(ckpt: &Checkpoint, videos: &[VideoSample]) -> CliResult<(f64, f64)> {
    model_from::<T>(ckpt, None)?.calibrate(videos).code(EXIT_CONFIG)
}

fn calibrate_cmd(ckpt_path: &Path, data: &Path, config: Option<&Path>) -> CliResult {
    let mut ckpt = load_checkpoint(ckpt_path)?;
    let videos = load_dataset(data, ckpt.config.model.classes).code(EXIT_CONFIG)?;
    if videos.iter().all(VideoSample::is_empty) {
        return fail(EXIT_CONFIG, format!("{} holds no frames to calibrate on", data.display()));
    }
    let (alpha, beta) = match ckpt.config.precision {
        Precision::F32 => calibrate_as::<f32>(&ckpt, &videos)?,
        Precision::F64 => calibrate_as::<f64>(&ckpt, &videos)?,
    };
    println!("alpha {alpha}\nbeta {beta}");
    ckpt.config.model.alpha = alpha;
    ckpt.config.model.beta = beta;
    ckpt.save(ckpt_path).code(EXIT_CHECKPOINT)?;
    if let Some(path) = config {
        let mut cfg = if path.exists() { RunConfig::load(path).code(EXIT_CONFIG)? } else { ckpt.config.clone() };
        cfg.model.alpha = alpha;
        cfg.model.beta = beta;
        cfg.save(path).code(1)?;
    }
    Ok(())
}

fn throughput_as<T: Scalar>(cfg: &RunConfig, video: &VideoSample, variant: Variant, threads: usize) -> CliResult<f64> {
    let model = Model::<T>::new(cfg.model.clone().with_variant(variant)).code(EXIT_CONFIG)?;
    bench::measure_throughput(&model, video, cfg.latency_repeats, cfg.latency_warmup, threads).code(1)
}

fn bench_cmd(config: Option<&Path>, data: &Path, grid: &str, out: &Path, threads: Option<usize>) -> CliResult {
    let grid = Grid::parse(grid).code(EXIT_CONFIG)?;
    let cfg = load_config(config)?;
    let videos = load_dataset(data, cfg.model.classes).code(1)?;
    let (train_set, val_set) = split(&videos, cfg.val_videos)?;
    let fmt = |v: Option<f64>, d: usize| v.map_or(String::from("failed"), |v| format!("{v:.d$}"));
    println!("{:<10} {:>6} {:>8} {:>8} {:>9} {:>12} {:>10} {:>8}", "variant", "seed", "mIoU", "mDice", "params", "FLOPs", "ms", "FPS");
    let show = |r: &bench::BenchRow| {
        println!(
            "{:<10} {:>6} {:>8} {:>8} {:>9} {:>12} {:>10} {:>8}",
            r.variant,
            r.seed,
            fmt(r.miou, 2),
            fmt(r.mdice, 2),
            r.params,
            r.flops,
            fmt(r.latency_ms, 3),
            fmt(r.fps, 1)
        )
    };
    let report = bench::run_ablation(train_set, val_set, grid, &cfg, out, show).code(1)?;
    for r in &report.summary {
        show(r);
    }
    if let Some(n) = threads {
        for v in grid.variants() {
            let fps = match cfg.precision {
                Precision::F32 => throughput_as::<f32>(&cfg, &val_set[0], v, n)?,
                Precision::F64 => throughput_as::<f64>(&cfg, &val_set[0], v, n)?,
            };
            println!("{:<10} throughput with {n} streams: {fps:.1} FPS", v.name());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData { config, out, videos } => gen_data(config.as_deref(), &out, videos),
        Command::Train { config, data, out, force } => train_cmd(config.as_deref(), &data, &out, force),
        Command::Eval { ckpt, data, variant, out } => eval_cmd(&ckpt, &data, variant.as_deref(), out.as_deref()),
        Command::Stream { ckpt, input, out } => stream_cmd(&ckpt, &input, &out),
        Command::Calibrate { ckpt, data, config } => calibrate_cmd(&ckpt, &data, config.as_deref()),
        Command::Bench { config, data, grid, out, threads } => bench_cmd(config.as_deref(), &data, &grid, &out, threads),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
