//! The `mamp` command line.
//!
//! Exit status is 0 on success, 1 for usage errors (bad or missing flags)
//! and 2 when input data or files cannot be used.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use mamp_core::alignment::AlignMode;
use mamp_core::encoder::EncoderParams;
use mamp_core::flow::{block_match_flow, BlockMatching, FlowProvider};
use mamp_core::matching::{RoiConfig, TopK};
use mamp_core::memory::MemoryMode;
use mamp_core::metrics::evaluate_sequence;
use mamp_core::pipeline::{segment_video_with, SegmentConfig};
use mamp_core::resample::bilinear_resize;
use mamp_core::train::{total_iterations, train_with};
use mamp_core::{FlowField, Image, IndexedMask};

use crate::checkpoint::{self, Architecture};
use crate::config::{self, TrainSettings};
use crate::{flo, io, Error};

#[derive(Debug, Parser)]
#[command(
    name = "mamp",
    version,
    about = "Motion-aware mask propagation for video object segmentation"
)]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "MAMP_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an encoder by frame reconstruction on unlabeled videos.
    Train(TrainArgs),
    /// Propagate a first-frame mask through a video.
    Segment(SegmentArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Estimate block-matching flow between two frames.
    Flow(FlowArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// A directory of PNG frames, or of subdirectories with one video each.
    #[arg(long)]
    pub data: PathBuf,
    /// key = value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Loss history CSV (default: next to the checkpoint).
    #[arg(long)]
    pub loss: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MemoryArg {
    Both,
    Long,
    Short,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlignArg {
    Sizeaware,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    Auto,
    Full,
    Toy,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Directory of PNG frames, processed in file-name order.
    #[arg(long)]
    pub frames: PathBuf,
    /// Indexed PNG annotation of the first frame.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory; masks keep the frame file names.
    #[arg(long)]
    pub out: PathBuf,
    /// Window radius in feature cells.
    #[arg(long, default_value_t = 12)]
    pub radius: usize,
    /// Kept candidates per query cell, or "all".
    #[arg(long, default_value = "36", value_parser = parse_topk)]
    pub topk: TopK,
    #[arg(long, value_enum, default_value_t = MemoryArg::Both)]
    pub memory: MemoryArg,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub motion: Toggle,
    #[arg(long, value_enum, default_value_t = AlignArg::Sizeaware)]
    pub align: AlignArg,
    /// Directory of flow_<query>_<ref>.flo files used instead of the
    /// built-in estimator where present.
    #[arg(long)]
    pub flow_dir: Option<PathBuf>,
    /// Resize factor applied to frames before segmentation.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Encoder architecture of the checkpoint.
    #[arg(long, value_enum, default_value_t = ArchArg::Auto)]
    pub arch: ArchArg,
    /// Block size of the built-in flow estimator, in pixels.
    #[arg(long, default_value_t = 8)]
    pub block: usize,
    /// Search radius of the built-in flow estimator, in pixels.
    #[arg(long, default_value_t = 16)]
    pub search: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted masks: one subdirectory per sequence (or PNGs directly).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground truth, laid out like --pred.
    #[arg(long)]
    pub gt: PathBuf,
    /// CSV report path.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct FlowArgs {
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub block: usize,
    #[arg(long, default_value_t = 16)]
    pub search: usize,
}

fn parse_topk(s: &str) -> Result<TopK, String> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(TopK::All);
    }
    match s.parse::<usize>() {
        Ok(0) => Err("top-k must be at least 1".into()),
        Ok(k) => Ok(TopK::K(k)),
        Err(_) => Err(format!("expected a count or \"all\", found {s:?}")),
    }
}

/// Why a command failed, which decides the exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

impl From<mamp_core::Error> for Failure {
    fn from(e: mamp_core::Error) -> Self {
        Failure::Data(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        // A pool may already exist when run() is called twice in one process.
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            warn!("thread pool already initialized; --threads ignored");
        }
    }
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Segment(a) => segment(a),
        Command::Eval(a) => eval(a),
        Command::Flow(a) => flow(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Videos under `dir`: its subdirectories that hold PNGs, or `dir` itself.
fn read_videos(dir: &Path) -> Result<Vec<Vec<Image>>, Error> {
    let mut videos = Vec::new();
    for sub in io::list_dirs(dir)? {
        let frames = io::read_frames(&sub)?;
        if !frames.is_empty() {
            videos.push(frames);
        }
    }
    if videos.is_empty() {
        videos.push(io::read_frames(dir)?);
    }
    Ok(videos)
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn train(a: TrainArgs) -> CmdResult {
    let mut settings = match &a.config {
        Some(path) => config::load(path)?,
        None => TrainSettings::default(),
    };
    if let Some(seed) = a.seed {
        settings.train.seed = seed;
    }
    let videos = read_videos(&a.data)?;
    let frames: usize = videos.iter().map(Vec::len).sum();
    if videos.iter().all(|v| v.len() < 2) {
        return Err(Failure::Data(crate::error::format_err!(
            "{}: training needs a video with at least two frames",
            a.data.display()
        )));
    }
    let total = total_iterations(&videos, &settings.train);
    info!(
        "training {:?} encoder on {} videos ({} frames) for {} iterations",
        settings.scale,
        videos.len(),
        frames,
        total
    );
    let params = EncoderParams::init(&settings.encoder, settings.train.seed)?;
    let every = (total / 20).max(1);
    let out = train_with(&videos, &settings.encoder, params, &settings.train, |i, loss| {
        if i % every == 0 || i + 1 == total {
            info!("iteration {i}: loss {loss:.4}");
        }
    })?;
    checkpoint::save(&a.out, &out.params)?;
    let loss_path = a.loss.unwrap_or_else(|| a.out.with_extension("loss.csv"));
    let mut w = csv::Writer::from_path(&loss_path).map_err(|e| csv_err(&loss_path, e))?;
    w.write_record(["iteration", "loss"])
        .map_err(|e| csv_err(&loss_path, e))?;
    for (i, l) in out.losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])
            .map_err(|e| csv_err(&loss_path, e))?;
    }
    w.flush().map_err(Error::io(&loss_path))?;
    info!("wrote {} and {}", a.out.display(), loss_path.display());
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.into(),
            source,
        },
        other => crate::error::format_err!("{}: {:?}", path.display(), other),
    }
}

fn resize_image(img: &Image, h: usize, w: usize) -> mamp_core::Result<Image> {
    if (img.height(), img.width()) == (h, w) {
        return Ok(img.clone());
    }
    Image::new(bilinear_resize(img.raster(), h, w)?, img.space())
}

/// Nearest-neighbour resize at pixel centers.
fn resize_mask(m: &IndexedMask, h: usize, w: usize) -> IndexedMask {
    if (m.height(), m.width()) == (h, w) {
        return m.clone();
    }
    let src =
        |i: usize, n_out: usize, n_in: usize| (((i as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    IndexedMask::from_fn(h, w, |y, x| m.get(src(y, h, m.height()), src(x, w, m.width())))
}

/// Flow from `flow_<q>_<r>.flo` files where present, else block matching.
/// Files hold flow at the original frame size and are resized to the
/// working size.
struct DirFlow {
    dir: Option<PathBuf>,
    fallback: BlockMatching,
}

impl FlowProvider for DirFlow {
    fn flow(&self, q: usize, r: usize, query: &Image, reference: &Image) -> mamp_core::Result<FlowField> {
        if let Some(dir) = &self.dir {
            let path = dir.join(flo::pair_file_name(q, r));
            if path.is_file() {
                let f = flo::read(&path).map_err(|e| mamp_core::Error::InvalidArgument(e.to_string()))?;
                let (h, w) = (query.height(), query.width());
                if (f.height(), f.width()) == (h, w) {
                    return Ok(f);
                }
                let (sy, sx) = (h as f64 / f.height() as f64, w as f64 / f.width() as f64);
                let mut r = bilinear_resize(f.raster(), h, w)?;
                for px in r.data_mut().chunks_exact_mut(2) {
                    px[0] *= sx;
                    px[1] *= sy;
                }
                return FlowField::from_raster(r);
            }
        }
        self.fallback.flow(q, r, query, reference)
    }
}

fn segment(a: SegmentArgs) -> CmdResult {
    if !(a.scale.is_finite() && a.scale > 0.0) {
        return Err(usage("--scale must be positive"));
    }
    if a.block == 0 || a.search == 0 {
        return Err(usage("--block and --search must be positive"));
    }
    let arch = match a.arch {
        ArchArg::Auto => Architecture::Auto,
        ArchArg::Full => Architecture::Full,
        ArchArg::Toy => Architecture::Toy,
    };
    let (enc, params) = checkpoint::load(&a.checkpoint, arch)?;
    let paths = io::list_pngs(&a.frames)?;
    if paths.is_empty() {
        return Err(Failure::Data(crate::error::format_err!(
            "{}: no PNG frames",
            a.frames.display()
        )));
    }
    let frames = paths.iter().map(io::read_frame).collect::<Result<Vec<_>, _>>()?;
    let mask = io::read_mask(&a.mask)?;
    let (h0, w0) = (frames[0].height(), frames[0].width());
    if (mask.height(), mask.width()) != (h0, w0) {
        return Err(Failure::Data(crate::error::format_err!(
            "mask is {}x{} but frames are {}x{}",
            mask.width(),
            mask.height(),
            w0,
            h0
        )));
    }
    let (h, w) = (
        ((h0 as f64 * a.scale).round() as usize).max(1),
        ((w0 as f64 * a.scale).round() as usize).max(1),
    );
    let frames = frames
        .iter()
        .map(|f| resize_image(f, h, w))
        .collect::<mamp_core::Result<Vec<_>>>()?;
    let first = resize_mask(&mask, h, w);
    let cfg = SegmentConfig {
        roi: RoiConfig {
            radius: a.radius,
            top_k: a.topk,
            temperature: None,
        },
        memory: match a.memory {
            MemoryArg::Both => MemoryMode::Both,
            MemoryArg::Long => MemoryMode::LongOnly,
            MemoryArg::Short => MemoryMode::ShortOnly,
        },
        motion: a.motion == Toggle::On,
        align: match a.align {
            AlignArg::Sizeaware => AlignMode::SizeAware,
            AlignArg::Plain => AlignMode::Plain,
        },
    };
    let provider = DirFlow {
        dir: a.flow_dir.clone(),
        fallback: BlockMatching {
            block: a.block,
            search: a.search,
        },
    };
    create_dir(&a.out)?;
    info!("segmenting {} frames at {}x{} with {:?}", frames.len(), w, h, cfg);
    let mut written: Result<(), Error> = Ok(());
    segment_video_with(&frames, &first, &params, &enc, &cfg, &provider, |t, m| {
        if written.is_err() {
            return;
        }
        let m = resize_mask(m, h0, w0);
        let name = paths[t].file_name().expect("listed files have names");
        written = io::write_mask(a.out.join(name), &m);
        info!("frame {t} done");
    })?;
    written?;
    Ok(())
}

/// Sequences under `dir` as (name, directory) pairs.
fn sequences(dir: &Path) -> Result<Vec<(String, PathBuf)>, Error> {
    let subs = io::list_dirs(dir)?;
    let name = |p: &Path| {
        p.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    if subs.is_empty() {
        return Ok(vec![(name(dir), dir.to_path_buf())]);
    }
    Ok(subs.iter().map(|p| (name(p), p.clone())).collect())
}

fn eval(a: EvalArgs) -> CmdResult {
    let seqs = sequences(&a.gt)?;
    let flat = io::list_dirs(&a.gt)?.is_empty();
    let mut rows = Vec::new();
    for (name, gt_dir) in seqs {
        let pred_dir = if flat { a.pred.clone() } else { a.pred.join(&name) };
        let gt_paths = io::list_pngs(&gt_dir)?;
        let mut gts = Vec::with_capacity(gt_paths.len());
        let mut preds = Vec::with_capacity(gt_paths.len());
        for p in &gt_paths {
            let file = p.file_name().expect("listed files have names");
            gts.push(io::read_mask(p)?);
            preds.push(io::read_mask(pred_dir.join(file))?);
        }
        for s in evaluate_sequence(&preds, &gts)? {
            info!("{name} object {}: J {:.4} F {:.4}", s.object, s.mean_j, s.mean_f);
            rows.push((name.clone(), s));
        }
    }
    let mut w = csv::Writer::from_path(&a.report).map_err(|e| csv_err(&a.report, e))?;
    w.write_record(["sequence", "object", "mean_J", "mean_F", "J_and_F"])
        .map_err(|e| csv_err(&a.report, e))?;
    for (name, s) in &rows {
        w.write_record([
            name.clone(),
            s.object.to_string(),
            format!("{:.6}", s.mean_j),
            format!("{:.6}", s.mean_f),
            format!("{:.6}", s.j_and_f()),
        ])
        .map_err(|e| csv_err(&a.report, e))?;
    }
    w.flush().map_err(Error::io(&a.report))?;
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let (j, f) = rows
            .iter()
            .fold((0.0, 0.0), |acc, (_, s)| (acc.0 + s.mean_j, acc.1 + s.mean_f));
        info!(
            "mean over {} objects: J {:.4} F {:.4} J&F {:.4}",
            rows.len(),
            j / n,
            f / n,
            (j + f) / (2.0 * n)
        );
    }
    Ok(())
}

fn flow(a: FlowArgs) -> CmdResult {
    if a.block == 0 || a.search == 0 {
        return Err(usage("--block and --search must be positive"));
    }
    let q = io::read_frame(&a.query)?;
    let r = io::read_frame(&a.reference)?;
    let f = block_match_flow(&q, &r, a.block, a.search)?;
    flo::write(&a.out, &f)?;
    Ok(())
}

/// Logging to stderr without timestamps, `info` unless `RUST_LOG` says
/// otherwise.
pub fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
}
