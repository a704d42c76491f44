use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sdforest::bounds::{self, Breakdown, DiversityInputs};
use sdforest::features::{concat_features, handcrafted_features, load_external_features, FeatureMap};
use sdforest::maps::ConfidenceMap;
use sdforest::metrics::{evaluate, TIMING_FILE};
use sdforest::pipeline::{run_sequence_with, SequenceResult};
use sdforest::synthetic::{generate, SyntheticSpec};
use sdforest::tensor_io::{
    read_image, read_mask, read_tensor, write_gray, write_image, write_mask, write_tensor, ImageFrame, Tensor,
    TENSOR_EXTENSION,
};
use sdforest::Config;

/// Exit code for feature tensors that do not fit the run.
const EXIT_FEATURES: u8 = 2;

#[derive(Parser)]
#[command(name = "sdforest", version, about = "Video object segmentation from a first-frame mask")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment a frame sequence given the first frame's mask.
    Segment(SegmentArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Write per-frame feature tensors.
    Features(FeaturesArgs),
    /// Evaluate generalization bounds term by term.
    #[command(subcommand)]
    Bounds(BoundsCommand),
    /// Render confidence tensors as grayscale PNGs.
    Viz(VizArgs),
    /// Write a synthetic moving-disk sequence with ground truth.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SegmentArgs {
    /// Directory of frame PNGs, processed in file-name order.
    #[arg(long)]
    frames: PathBuf,
    /// Label mask of the first frame.
    #[arg(long)]
    prompt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory of feature tensors named after the frames; handcrafted
    /// features are used when absent.
    #[arg(long)]
    features: Option<PathBuf>,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set slic.k=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write each frame's per-object confidence tensor here.
    #[arg(long)]
    confidence: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Text report path; a JSON twin is written with a `.json` extension.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Boundary tolerance in pixels; defaults to 0.8% of the frame diagonal.
    #[arg(long)]
    tol: Option<usize>,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Exported tensors to upsample to frame size and append.
    #[arg(long)]
    external: Option<PathBuf>,
    /// Leave out the handcrafted channels (requires `--external`).
    #[arg(long)]
    no_handcrafted: bool,
}

#[derive(Subcommand)]
enum BoundsCommand {
    /// Decision-tree generalization gap.
    Tree {
        /// Node count.
        #[arg(long, default_value_t = 1000.0)]
        q: f64,
        /// Feature dimension.
        #[arg(long, default_value_t = 219.0)]
        j: f64,
        /// Training samples.
        #[arg(long, default_value_t = 82335.0)]
        m: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
    },
    /// VC-dimension lower bound of a ReLU network.
    Vc {
        /// Weight count.
        #[arg(long, default_value_t = 2.3e7)]
        w: f64,
        /// Layer count.
        #[arg(long, default_value_t = 50.0)]
        u: f64,
        /// Asymptotic constant.
        #[arg(long, default_value_t = 1.0)]
        c: f64,
    },
    /// Max-margin bound.
    Margin {
        #[arg(long, default_value_t = 0.0)]
        log_z: f64,
        #[arg(long)]
        m: f64,
        #[arg(long)]
        b: f64,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        /// Empirical Rademacher complexity.
        #[arg(long, default_value_t = 0.0)]
        rm: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
    },
    /// Diversity-based multi-task bound.
    Diversity {
        #[arg(long, default_value_t = 0.0)]
        train_err: f64,
        /// Lipschitz constant.
        #[arg(long, default_value_t = 1.0)]
        l: f64,
        #[arg(long, default_value_t = 1.0)]
        nu: f64,
        /// Task count.
        #[arg(long)]
        k: f64,
        #[arg(long)]
        m: f64,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long, default_value_t = 1.0)]
        d: f64,
        /// Gaussian complexity.
        #[arg(long, default_value_t = 0.0)]
        g: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
    },
}

#[derive(Args)]
struct VizArgs {
    /// A tensor file of dims [H, W] or [N, H, W], or a directory of them.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    frames: usize,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Two disks instead of one.
    #[arg(long)]
    two: bool,
    /// No motion.
    #[arg(long = "static")]
    still: bool,
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self { code: 1, error: e.into() }
    }
}

fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Config> {
    let mut config = match path {
        Some(p) => Config::from_file(p)?,
        None => Config::default(),
    };
    for o in overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {o:?}"))?;
        config.set(k, v)?;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn write_timing(result: &SequenceResult, path: &Path) -> Result<()> {
    let mut text = format!("frames: {}\n", result.masks.len());
    for (name, d) in result.timings.stages() {
        text.push_str(&format!("{name}_ms: {:.3}\n", d.as_secs_f64() * 1e3));
    }
    text.push_str(&format!("total_ms: {:.3}\n", result.timings.total().as_secs_f64() * 1e3));
    text.push_str(&format!("fps: {:.3}\n", result.frames_per_second()));
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn confidence_tensor(maps: &[ConfidenceMap]) -> Result<Tensor> {
    let (w, h) = (maps[0].width(), maps[0].height());
    let data = maps.iter().flat_map(|m| m.data().iter().map(|&v| v as f32)).collect();
    Ok(Tensor::new(vec![maps.len(), h, w], data)?)
}

fn cmd_segment(args: &SegmentArgs) -> Result<(), Failure> {
    let config = load_config(args.config.as_deref(), &args.overrides, args.seed)?;
    let frame_paths = files_with_ext(&args.frames, "png")?;
    if frame_paths.is_empty() {
        return Err(anyhow::anyhow!("no PNG frames in {}", args.frames.display()).into());
    }
    if !args.prompt.is_file() {
        return Err(anyhow::anyhow!("prompt mask {} not found", args.prompt.display()).into());
    }
    let prompt = read_mask(&args.prompt)?;
    let frames: Vec<ImageFrame> = frame_paths
        .iter()
        .map(|p| read_image(p).with_context(|| format!("frame {}", p.display())))
        .collect::<Result<_>>()?;

    let feature_problem: RefCell<Option<String>> = RefCell::new(None);
    let channels: RefCell<Option<usize>> = RefCell::new(None);
    let provider = |i: usize, frame: &ImageFrame| -> sdforest::Result<FeatureMap> {
        let Some(dir) = &args.features else {
            return Ok(handcrafted_features(frame));
        };
        let path = dir.join(format!("{}.{TENSOR_EXTENSION}", stem(&frame_paths[i])));
        let name = frame_paths[i].file_name().unwrap_or_default().to_string_lossy().into_owned();
        let fm = load_external_features(&path, frame.height(), frame.width()).inspect_err(|e| {
            *feature_problem.borrow_mut() = Some(format!("frame {name}: features {}: {e}", path.display()));
        })?;
        let mut expected = channels.borrow_mut();
        match *expected {
            Some(c) if c != fm.channels() => {
                let msg = format!("frame {name}: features have {} channels, earlier frames had {c}", fm.channels());
                *feature_problem.borrow_mut() = Some(msg.clone());
                Err(sdforest::Error::ShapeMismatch(msg))
            }
            _ => {
                *expected = Some(fm.channels());
                Ok(fm)
            }
        }
    };
    let result = match run_sequence_with(&frames, &prompt, &config, config.seed, args.confidence.is_some(), provider) {
        Ok(r) => r,
        Err(e) => {
            if let Some(msg) = feature_problem.into_inner() {
                return Err(Failure { code: EXIT_FEATURES, error: anyhow::anyhow!(msg) });
            }
            return Err(e.into());
        }
    };

    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    for (mask, path) in result.masks.iter().zip(&frame_paths) {
        write_mask(mask, args.out.join(path.file_name().expect("frame has a name")))?;
    }
    write_timing(&result, &args.out.join(TIMING_FILE))?;
    if let (Some(dir), Some(conf)) = (&args.confidence, &result.confidences) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        for (maps, path) in conf.iter().zip(&frame_paths[1..]) {
            write_tensor(&confidence_tensor(maps)?, dir.join(format!("{}.{TENSOR_EXTENSION}", stem(path))))?;
        }
    }
    println!(
        "segmented {} frames in {:.1} ms ({:.2} fps)",
        result.masks.len(),
        result.timings.total().as_secs_f64() * 1e3,
        result.frames_per_second()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let report = evaluate(&args.pred, &args.gt, args.tol)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(path) = &args.report {
        fs::write(path, &text).with_context(|| format!("cannot write {}", path.display()))?;
        let json = path.with_extension("json");
        fs::write(&json, report.to_json()).with_context(|| format!("cannot write {}", json.display()))?;
    }
    Ok(())
}

fn cmd_features(args: &FeaturesArgs) -> Result<()> {
    if args.no_handcrafted && args.external.is_none() {
        bail!("--no-handcrafted needs --external");
    }
    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    let frames = files_with_ext(&args.frames, "png")?;
    for path in &frames {
        let frame = read_image(path)?;
        let mut parts = Vec::new();
        if !args.no_handcrafted {
            parts.push(handcrafted_features(&frame));
        }
        if let Some(dir) = &args.external {
            let src = dir.join(format!("{}.{TENSOR_EXTENSION}", stem(path)));
            parts.push(load_external_features(&src, frame.height(), frame.width())?);
        }
        let fm = concat_features(&parts)?;
        write_tensor(&fm.to_tensor(), args.out.join(format!("{}.{TENSOR_EXTENSION}", stem(path))))?;
    }
    println!("wrote {} feature tensors to {}", frames.len(), args.out.display());
    Ok(())
}

fn print_breakdown(title: &str, b: &Breakdown) {
    println!("{title}");
    for t in &b.terms {
        println!("  {:<22} {:.6e}", t.name, t.value);
    }
    println!("  {:<22} {:.6e}", "total", b.total);
}

const CONSTANTS_NOTE: &str = "asymptotic constants are set to 1; values are comparative, not certified";

fn cmd_bounds(cmd: &BoundsCommand) -> Result<()> {
    match *cmd {
        BoundsCommand::Tree { q, j, m, delta } => {
            let gap = bounds::tree_generalization_gap(q, j, m, delta)?;
            println!("tree generalization gap (Q={q}, J={j}, m={m}, delta={delta})");
            println!("  {:<22} {:.6e}", "capacity", bounds::tree_capacity(q, j)?);
            println!("  {:<22} {:.6e}", "confidence", (2.0 / delta).ln());
            println!("  {:<22} {gap:.6}", "gap");
        }
        BoundsCommand::Vc { w, u, c } => {
            println!("ReLU VC lower bound (W={w}, U={u}, c={c})");
            println!("  {:<22} {:.6e}", "vc", bounds::relu_vc_lower_bound(w, u, c)?);
            println!("{CONSTANTS_NOTE}");
        }
        BoundsCommand::Margin { log_z, m, b, c, rm, delta } => {
            let r = bounds::maxmargin_bound(log_z, m, b, c, rm, delta)?;
            print_breakdown(&format!("max-margin bound (m={m}, B={b}, C={c}, R_m={rm}, delta={delta})"), &r);
        }
        BoundsCommand::Diversity { train_err, l, nu, k, m, c, d, g, delta } => {
            let p = DiversityInputs { train_err, lipschitz: l, nu, k, m, c, d, gaussian: g, delta };
            print_breakdown(&format!("diversity bound (K={k}, m={m}, nu={nu}, delta={delta})"), &bounds::diversity_bound(&p)?);
            println!("{CONSTANTS_NOTE}");
        }
    }
    Ok(())
}

fn render(tensor: &Tensor, name: &str, out: &Path) -> Result<usize> {
    let (planes, h, w) = match *tensor.dims() {
        [h, w] => (1, h, w),
        [n, h, w] => (n, h, w),
        ref d => bail!("{name}: expected 2 or 3 dims, got {d:?}"),
    };
    for p in 0..planes {
        let data = tensor.data()[p * h * w..(p + 1) * h * w].iter().map(|&v| v as f64).collect();
        let map = ConfidenceMap::new(w, h, data)?;
        let file = if planes == 1 { format!("{name}.png") } else { format!("{name}_{}.png", p + 1) };
        write_gray(w, h, &map.to_gray_u8(), out.join(file))?;
    }
    Ok(planes)
}

fn cmd_viz(args: &VizArgs) -> Result<()> {
    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    let inputs = if args.input.is_dir() { files_with_ext(&args.input, TENSOR_EXTENSION)? } else { vec![args.input.clone()] };
    let mut written = 0;
    for path in &inputs {
        written += render(&read_tensor(path)?, &stem(path), &args.out)?;
    }
    println!("wrote {written} heatmaps to {}", args.out.display());
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = match (args.two, args.still) {
        (true, _) => SyntheticSpec::two_disks(args.size, args.size, args.frames, args.seed),
        (false, true) => SyntheticSpec::static_disk(args.size, args.size, args.frames, args.seed),
        (false, false) => SyntheticSpec::moving_disk(args.size, args.size, args.frames, args.seed),
    };
    let seq = generate(&spec);
    let (frames_dir, gt_dir) = (args.out.join("frames"), args.out.join("gt"));
    fs::create_dir_all(&frames_dir)?;
    fs::create_dir_all(&gt_dir)?;
    for (i, (f, m)) in seq.frames.iter().zip(&seq.masks).enumerate() {
        write_image(f, frames_dir.join(format!("{i:05}.png")))?;
        write_mask(m, gt_dir.join(format!("{i:05}.png")))?;
    }
    println!("wrote {} frames to {}", seq.frames.len(), args.out.display());
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("SDFOREST_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().with_context(|| format!("SDFOREST_THREADS must be a count, got {v:?}"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    configure_threads()?;
    match &cli.command {
        Command::Segment(a) => cmd_segment(a),
        Command::Eval(a) => Ok(cmd_eval(a)?),
        Command::Features(a) => Ok(cmd_features(a)?),
        Command::Bounds(c) => Ok(cmd_bounds(c)?),
        Command::Viz(a) => Ok(cmd_viz(a)?),
        Command::Synth(a) => Ok(cmd_synth(a)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
