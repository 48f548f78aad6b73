//! Command-line front end: one subcommand per stage plus the whole chain.
//!
//! Configuration is resolved from the defaults, an optional `--config`
//! file and `--set key=value` overrides, in that order. Every subcommand
//! writes into the run directory `io.output`, next to the resolved
//! `config.txt` and a `manifest.txt` listing the command, the crate
//! version, the config hash, the inputs and the files written.
//!
//! A failure prints one line to stderr,
//! `error=<kind> key=<key> message="<text>"` (the key only when one config
//! key is at fault), and exits with 2 for configuration errors and 1 for
//! everything else.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::centers::{analyze_stack, center_records, drop_small_regions, write_centers_csv, EikonalReport};
use crate::config::{ConfigError, EdgeSource, PipelineConfig};
use crate::error::Error;
use crate::grid::{Frame, ImageStack, IntensityRange, Mask};
use crate::metrics::{evaluate_tracks, EvalReport};
use crate::pipeline::{crop_stage, filter_stage, segment_stage, track_stage};
use crate::stack_io::{
    load_masks, load_stack, load_stack_dir, rescale, save_masks, save_stack, write_ppm, BitDepth, RescaleTarget,
};
use crate::sweep::{grid_search, CaseKind, ParamGrid, SweepCase};
use crate::synth::{five_movers, format_movers, generate, read_movers, write_links_csv};
use crate::tracker::{read_trajectories_csv, write_trajectories_csv, Trajectory};

/// Space-time filtering, level-set segmentation and trajectory linking for
/// 2D+time microscopy stacks.
#[derive(Debug, Parser)]
#[command(name = "mactrack", version)]
pub struct Cli {
    /// Config file of `section.key=value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Print the fully resolved configuration and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    /// Worker threads (all cores by default). Outputs do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Input stack (directory or `frame_%04d.pgm` pattern); sets io.input.
    #[arg(short, long, global = true, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Run directory; sets io.output.
    #[arg(short, long, global = true, value_name = "DIR")]
    pub output: Option<PathBuf>,
    /// Reference data directory; sets io.gold.
    #[arg(long, global = true, value_name = "DIR")]
    pub gold: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Render a synthetic stack with reference masks and trajectories.
    Synth,
    /// Clip the bright noise peak of every slice (crop.p_noise).
    Crop,
    /// Space-time filtering; writes an 8-bit stack.
    Filter,
    /// Local Otsu thresholding and SUBSURF smoothing of a filtered stack.
    Segment {
        /// Stack used for the SUBSURF edge weights when
        /// subsurf.edge_source=original (normally the cropped input).
        #[arg(long, value_name = "PATH")]
        edges: Option<PathBuf>,
    },
    /// Region centres of a mask stack.
    Centers,
    /// Trajectories of a mask stack.
    Track,
    /// Compare a run directory against reference data (io.gold).
    Eval,
    /// Grid search over segmentation parameters.
    Sweep {
        /// Grid file of `key=v1,v2,...` lines.
        #[arg(long, value_name = "FILE")]
        grid: Option<PathBuf>,
        /// `KIND:DIR` or `KIND:STACK:MASKS` with KIND `object` or
        /// `background`. DIR is laid out like a synth run directory.
        #[arg(long = "case", value_name = "CASE", required = true)]
        cases: Vec<String>,
    },
    /// Crop, filter, segment, centres and tracking; evaluation too when
    /// io.gold is set.
    Pipeline,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Crop => "crop",
            Command::Filter => "filter",
            Command::Segment { .. } => "segment",
            Command::Centers => "centers",
            Command::Track => "track",
            Command::Eval => "eval",
            Command::Sweep { .. } => "sweep",
            Command::Pipeline => "pipeline",
        }
    }
}

/// A failure as reported on the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub kind: &'static str,
    pub key: Option<String>,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    fn config(key: Option<&str>, message: impl Into<String>) -> Self {
        CliError {
            kind: "config",
            key: key.map(str::to_string),
            message: message.into(),
            exit_code: 2,
        }
    }

    fn runtime(kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            kind,
            key: None,
            message: message.into(),
            exit_code: 1,
        }
    }

    /// The single stderr line.
    pub fn line(&self) -> String {
        let mut s = format!("error={}", self.kind);
        if let Some(k) = &self.key {
            write!(s, " key={k}").unwrap();
        }
        let message = self.message.replace(['\n', '\r'], " ").replace('"', "'");
        write!(s, " message=\"{message}\"").unwrap();
        s
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let key = match &e {
            ConfigError::UnknownKey { key, .. } | ConfigError::InvalidValue { key, .. } => Some(key.as_str()),
            ConfigError::Malformed { .. } => None,
        };
        CliError::config(key, e.to_string())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::Config(c) => c.into(),
            Error::InvalidParameter { name, .. } => CliError::config(Some(name), message),
            Error::Io { .. } => CliError::runtime("io", message),
            Error::Format { .. } => CliError::runtime("format", message),
            Error::MissingFrame { .. } | Error::NoFrames(_) => CliError::runtime("input", message),
            Error::DimensionMismatch { .. } => CliError::runtime("dimension", message),
            Error::Empty(_) => CliError::runtime("empty", message),
            Error::NotConverged { .. } => CliError::runtime("not_converged", message),
            Error::NoCommonSlices => CliError::runtime("eval", message),
            Error::OutOfDomain { .. } => CliError::runtime("synth", message),
            Error::Csv(_) => CliError::runtime("csv", message),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Output goes to stdout, errors to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    let text = e.to_string();
                    let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
                    eprintln!("{}", CliError::config(None, first).with_kind("usage").line());
                    2
                }
            };
        }
    };
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code
        }
    }
}

impl CliError {
    fn with_kind(mut self, kind: &'static str) -> Self {
        self.kind = kind;
        self
    }
}

/// Defaults, then the config file, then `--set` and the path shorthands.
pub fn resolve_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(None, format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::config(None, format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(p) = &cli.input {
        cfg.io.input = Some(p.clone());
    }
    if let Some(p) = &cli.output {
        cfg.io.output = Some(p.clone());
    }
    if let Some(p) = &cli.gold {
        cfg.io.gold = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a parsed command line and returns what it prints on success.
pub fn run(cli: &Cli) -> CliResult<String> {
    let cfg = resolve_config(cli)?;
    if cli.print_config {
        return Ok(cfg.to_text());
    }
    let command = cli
        .command
        .clone()
        .ok_or_else(|| CliError::config(None, "no subcommand given").with_kind("usage"))?;
    match cli.threads {
        Some(0) => Err(CliError::config(Some("threads"), "--threads must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::runtime("threads", e.to_string()))?;
            pool.install(|| execute(&command, &cfg))
        }
        None => execute(&command, &cfg),
    }
}

/// Output directory bookkeeping for one command.
struct RunDir {
    root: PathBuf,
    written: Vec<String>,
    inputs: Vec<(String, String)>,
}

impl RunDir {
    fn create(cfg: &PipelineConfig) -> CliResult<Self> {
        let root = cfg
            .io
            .output
            .clone()
            .ok_or_else(|| CliError::config(Some("io.output"), "an output directory is required"))?;
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(RunDir {
            root,
            written: Vec::new(),
            inputs: Vec::new(),
        })
    }

    /// Path of an output, recorded for the manifest; parent directories are
    /// created.
    fn path(&mut self, rel: &str) -> CliResult<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.written.push(rel.to_string());
        Ok(p)
    }

    fn input(&mut self, key: &str, value: impl Into<String>) {
        self.inputs.push((key.to_string(), value.into()));
    }

    fn write_text(&mut self, rel: &str, text: &str) -> CliResult<()> {
        let p = self.path(rel)?;
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(())
    }

    fn finish(mut self, command: &str, cfg: &PipelineConfig) -> CliResult<String> {
        self.write_text("config.txt", &cfg.to_text())?;
        let mut m = String::new();
        writeln!(m, "command={command}").unwrap();
        writeln!(m, "version={}", env!("CARGO_PKG_VERSION")).unwrap();
        writeln!(m, "config_hash={}", cfg.hash()).unwrap();
        for (k, v) in &self.inputs {
            writeln!(m, "{k}={v}").unwrap();
        }
        writeln!(m, "outputs={}", self.written.join(",")).unwrap();
        let p = self.root.join("manifest.txt");
        fs::write(&p, &m).map_err(|e| Error::io(&p, e))?;
        Ok(format!("run_dir={}\n", self.root.display()))
    }
}

/// SHA-256 over the dimensions and sample values of a stack.
pub fn stack_digest(stack: &ImageStack) -> String {
    let mut h = Sha256::new();
    for n in [stack.width(), stack.height(), stack.len()] {
        h.update((n as u64).to_le_bytes());
    }
    for f in stack.frames() {
        for v in f.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn require<'a>(value: &'a Option<PathBuf>, key: &str, command: &str) -> CliResult<&'a PathBuf> {
    value
        .as_ref()
        .ok_or_else(|| CliError::config(Some(key), format!("{command} needs {key}")))
}

/// Loads a stack from a directory (default frame pattern) or a pattern.
pub fn load_input(path: &Path, depth: BitDepth) -> crate::Result<ImageStack> {
    if path.is_dir() {
        load_stack_dir(path, depth)
    } else if !path.to_string_lossy().contains('%') {
        Err(Error::NoFrames(path.display().to_string()))
    } else {
        load_stack(&path.to_string_lossy(), depth)
    }
}

fn input_stack(cfg: &PipelineConfig, run: &mut RunDir, command: &str) -> CliResult<ImageStack> {
    let path = require(&cfg.io.input, "io.input", command)?;
    let stack = load_input(path, BitDepth::from_bits(cfg.io.bit_depth)?)?;
    run.input("input", path.display().to_string());
    run.input("input_digest", stack_digest(&stack));
    Ok(stack)
}

fn input_masks(cfg: &PipelineConfig, run: &mut RunDir, command: &str) -> CliResult<(Vec<Mask>, f64)> {
    let path = require(&cfg.io.input, "io.input", command)?;
    let stack = load_input(path, BitDepth::Eight)?;
    run.input("input", path.display().to_string());
    run.input("input_digest", stack_digest(&stack));
    let masks = stack.frames().iter().map(|f| f.threshold(0.0)).collect();
    Ok((masks, stack.pixel_size))
}

fn masks_as_stack(masks: &[Mask], pixel_size: f64) -> crate::Result<ImageStack> {
    let frames = masks.iter().map(|m| m.to_frame().map(|v| v * 255.0)).collect();
    ImageStack::new(frames, pixel_size, IntensityRange::Raw)
}

fn centers_of(masks: &[Mask], cfg: &PipelineConfig) -> (Vec<crate::centers::CenterRecord>, EikonalReport) {
    let min_area = cfg.track.min_area;
    let cleaned: Vec<Mask> = if min_area > 1 {
        masks.iter().map(|m| drop_small_regions(m, min_area)).collect()
    } else {
        masks.to_vec()
    };
    let (slices, report) = analyze_stack(&cleaned, &cfg.track.eikonal);
    (center_records(&slices), report)
}

fn eikonal_text(report: &EikonalReport, n_centers: usize) -> String {
    let mut s = String::new();
    writeln!(s, "stage=centers").unwrap();
    writeln!(s, "n_centers={n_centers}").unwrap();
    writeln!(s, "eikonal_stop={}", report.stop.as_str()).unwrap();
    writeln!(s, "eikonal_converged={}", report.converged).unwrap();
    let joined: Vec<String> = report.iterations.iter().map(|n| n.to_string()).collect();
    writeln!(s, "eikonal_iterations={}", joined.join(",")).unwrap();
    s
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

fn put(rgb: &mut [u8], w: usize, h: usize, x: i64, y: i64, colour: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
        let p = 3 * (y as usize * w + x as usize);
        rgb[p..p + 3].copy_from_slice(&colour);
    }
}

fn draw_line(rgb: &mut [u8], w: usize, h: usize, from: [f64; 2], to: [f64; 2], colour: [u8; 3]) {
    let (mut x0, mut y0) = (from[0].round() as i64, from[1].round() as i64);
    let (x1, y1) = (to[0].round() as i64, to[1].round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(rgb, w, h, x0, y0, colour);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// One RGB image: the gray frame with every trajectory's path up to
/// `theta` drawn in its palette colour and a cross on its current point.
pub fn render_overlay(frame: &Frame, trajectories: &[Trajectory], theta: usize) -> Vec<u8> {
    let (w, h) = frame.dims();
    let mut rgb: Vec<u8> = frame
        .data()
        .iter()
        .flat_map(|&v| {
            let g = v.round().clamp(0.0, 255.0) as u8;
            [g, g, g]
        })
        .collect();
    for t in trajectories {
        let colour = PALETTE[t.id % PALETTE.len()];
        let upto: Vec<[f64; 2]> = t.points.iter().filter(|p| p.theta <= theta).map(|p| p.pos()).collect();
        for pair in upto.windows(2) {
            draw_line(&mut rgb, w, h, pair[0], pair[1], colour);
        }
        if let Some(p) = t.at(theta) {
            let (x, y) = (p.x.round() as i64, p.y.round() as i64);
            for d in -3..=3 {
                put(&mut rgb, w, h, x + d, y, colour);
                put(&mut rgb, w, h, x, y + d, colour);
            }
        }
    }
    rgb
}

fn write_overlay(run: &mut RunDir, background: &ImageStack, trajectories: &[Trajectory]) -> CliResult<()> {
    let gray = rescale(background, RescaleTarget::Byte);
    for (theta, frame) in gray.frames().iter().enumerate() {
        let rgb = render_overlay(frame, trajectories, theta);
        let p = run.path(&format!("overlay/frame_{theta:04}.ppm"))?;
        write_ppm(&p, frame.width(), frame.height(), &rgb)?;
    }
    Ok(())
}

fn evaluate_against(cfg: &PipelineConfig, gold: &Path, masks: Option<&[Mask]>, trajectories: Option<&[Trajectory]>) -> CliResult<EvalReport> {
    let gold_masks = gold.join("masks");
    let gold_tracks = gold.join("trajectories.csv");
    let mut report = EvalReport {
        frames: Vec::new(),
        tracks: None,
    };
    let mut compared = false;
    if let (Some(m), true) = (masks, gold_masks.is_dir()) {
        let reference = load_masks(&gold_masks)?;
        report.frames = EvalReport::evaluate_masks(&reference, m, 1.0)?;
        compared = true;
    }
    if let (Some(t), true) = (trajectories, gold_tracks.is_file()) {
        let reference = read_trajectories_csv(&gold_tracks)?;
        report.tracks = Some(evaluate_tracks(t, &reference, cfg.match_radius));
        compared = true;
    }
    if !compared {
        return Err(CliError::runtime(
            "input",
            format!("nothing to compare: {} has neither masks/ nor trajectories.csv matching the run", gold.display()),
        ));
    }
    Ok(report)
}

fn write_eval(run: &mut RunDir, report: &EvalReport) -> CliResult<()> {
    run.write_text("eval_report.txt", &report.to_text())?;
    if !report.frames.is_empty() {
        let p = run.path("eval_frames.csv")?;
        report.write_frames_csv(&p)?;
    }
    Ok(())
}

fn load_case(spec: &str, depth: BitDepth) -> CliResult<SweepCase> {
    let bad = |msg: String| CliError::config(Some("case"), msg);
    let mut parts = spec.splitn(3, ':');
    let kind_text = parts.next().unwrap_or("");
    let kind = CaseKind::parse(kind_text)
        .ok_or_else(|| bad(format!("case kind must be object or background, got {kind_text:?}")))?;
    let first = PathBuf::from(parts.next().ok_or_else(|| bad(format!("case {spec:?} has no path")))?);
    let (stack_dir, mask_dir) = match parts.next() {
        Some(m) => (first.clone(), Some(PathBuf::from(m))),
        None => {
            let masks = first.join("gold").join("masks");
            (first.join("stack"), masks.is_dir().then_some(masks))
        }
    };
    let name = first
        .file_name()
        .map_or_else(|| spec.to_string(), |n| n.to_string_lossy().into_owned());
    let input = load_input(&stack_dir, depth)?;
    match (kind, mask_dir) {
        (_, Some(dir)) => Ok(SweepCase::new(name, input, load_masks(&dir)?, kind)?),
        (CaseKind::Background, None) => Ok(SweepCase::background(name, input)?),
        (CaseKind::Object, None) => Err(bad(format!("object case {spec:?} has no reference masks"))),
    }
}

fn execute(command: &Command, cfg: &PipelineConfig) -> CliResult<String> {
    let name = command.name();
    let mut run = RunDir::create(cfg)?;
    let depth = BitDepth::from_bits(cfg.io.bit_depth)?;
    match command {
        Command::Synth => {
            let specs = match &cfg.synth.movers {
                Some(p) => {
                    run.input("movers", p.display().to_string());
                    read_movers(p)?
                }
                None => five_movers().0,
            };
            let out = generate(&specs, &cfg.synth.domain, cfg.synth.noise, cfg.synth.seed)?;
            let p = run.path("stack")?;
            save_stack(&p, &out.stack, depth)?;
            let p = run.path("gold/masks")?;
            save_masks(&p, &out.masks, out.stack.pixel_size)?;
            let p = run.path("gold/trajectories.csv")?;
            write_trajectories_csv(&p, &out.trajectories)?;
            let p = run.path("gold/links.csv")?;
            write_links_csv(&p, &out.links)?;
            run.write_text("gold/movers.txt", &format_movers(&specs))?;
        }
        Command::Crop => {
            let raw = input_stack(cfg, &mut run, name)?;
            let cropped = crop_stage(&raw, cfg)?;
            let p = run.path("cropped")?;
            save_stack(&p, &cropped, depth)?;
            let (lo, hi) = raw.min_max();
            let (clo, chi) = cropped.min_max();
            let report = format!(
                "stage=crop\np_noise={}\ninput_range={lo},{hi}\ncropped_range={clo},{chi}\n",
                cfg.crop.p_noise
            );
            run.write_text("crop_report.txt", &report)?;
        }
        Command::Filter => {
            let cropped = input_stack(cfg, &mut run, name)?;
            let (filtered, report) = filter_stage(&cropped, cfg)?;
            let p = run.path("filtered")?;
            save_stack(&p, &filtered, BitDepth::Eight)?;
            run.write_text("filter_report.txt", &report)?;
        }
        Command::Segment { edges } => {
            let path = require(&cfg.io.input, "io.input", name)?;
            let filtered = load_input(path, BitDepth::Eight)?;
            run.input("input", path.display().to_string());
            run.input("input_digest", stack_digest(&filtered));
            let edge_stack = match (cfg.edge_source, edges) {
                (EdgeSource::Filtered, _) => filtered.clone(),
                (EdgeSource::Original, Some(p)) => {
                    let s = load_input(p, depth)?;
                    run.input("edges", p.display().to_string());
                    run.input("edges_digest", stack_digest(&s));
                    s
                }
                (EdgeSource::Original, None) => {
                    return Err(CliError::config(
                        Some("subsurf.edge_source"),
                        "segment needs --edges (the cropped input) when subsurf.edge_source=original",
                    ))
                }
            };
            let (masks, report) = segment_stage(&filtered, &edge_stack, cfg)?;
            let p = run.path("masks")?;
            save_masks(&p, &masks, filtered.pixel_size)?;
            run.write_text("segment_report.txt", &report)?;
        }
        Command::Centers => {
            let (masks, _) = input_masks(cfg, &mut run, name)?;
            let (records, report) = centers_of(&masks, cfg);
            let p = run.path("centers.csv")?;
            write_centers_csv(&p, &records)?;
            run.write_text("centers_report.txt", &eikonal_text(&report, records.len()))?;
        }
        Command::Track => {
            let (masks, pixel_size) = input_masks(cfg, &mut run, name)?;
            let (trajectories, report) = track_stage(&masks, cfg)?;
            let p = run.path("trajectories.csv")?;
            write_trajectories_csv(&p, &trajectories)?;
            run.write_text("track_report.txt", &report.to_text())?;
            if cfg.io.overlay {
                write_overlay(&mut run, &masks_as_stack(&masks, pixel_size)?, &trajectories)?;
            }
        }
        Command::Eval => {
            let dir = require(&cfg.io.input, "io.input", name)?.clone();
            let gold = require(&cfg.io.gold, "io.gold", name)?.clone();
            run.input("input", dir.display().to_string());
            run.input("gold", gold.display().to_string());
            let masks = if dir.join("masks").is_dir() {
                Some(load_masks(&dir.join("masks"))?)
            } else {
                None
            };
            let tracks_path = dir.join("trajectories.csv");
            let trajectories = if tracks_path.is_file() {
                Some(read_trajectories_csv(&tracks_path)?)
            } else {
                None
            };
            let report = evaluate_against(cfg, &gold, masks.as_deref(), trajectories.as_deref())?;
            write_eval(&mut run, &report)?;
        }
        Command::Sweep { grid, cases } => {
            let grid = match grid {
                Some(p) => {
                    run.input("grid", p.display().to_string());
                    ParamGrid::load(p, cfg)?
                }
                None => ParamGrid::around(cfg),
            };
            let cases = cases
                .iter()
                .map(|c| {
                    run.input("case", c.clone());
                    load_case(c, depth)
                })
                .collect::<CliResult<Vec<_>>>()?;
            let checkpoint = run.path("sweep_checkpoint.csv")?;
            let result = grid_search(&grid, &cases, cfg, Some(&checkpoint))?;
            run.write_text("grid.txt", &grid.to_text())?;
            let p = run.path("ranking.csv")?;
            result.write_ranking_csv(&p)?;
            let p = run.path("frequency.csv")?;
            result.write_frequency_csv(&p)?;
            run.write_text("sweep_report.txt", &result.to_text())?;
        }
        Command::Pipeline => {
            let raw = input_stack(cfg, &mut run, name)?;
            let cropped = crop_stage(&raw, cfg)?;
            if cfg.crop.p_noise > 0.0 {
                let p = run.path("cropped")?;
                save_stack(&p, &cropped, depth)?;
            }
            let (filtered, filter_report) = filter_stage(&cropped, cfg)?;
            let p = run.path("filtered")?;
            save_stack(&p, &filtered, BitDepth::Eight)?;
            let (masks, segment_report) = segment_stage(&filtered, &cropped, cfg)?;
            let p = run.path("masks")?;
            save_masks(&p, &masks, raw.pixel_size)?;
            let (records, eikonal) = centers_of(&masks, cfg);
            let p = run.path("centers.csv")?;
            write_centers_csv(&p, &records)?;
            let (trajectories, track_report) = track_stage(&masks, cfg)?;
            let p = run.path("trajectories.csv")?;
            write_trajectories_csv(&p, &trajectories)?;
            let report = format!(
                "{filter_report}\n{segment_report}\n{}\n{}",
                eikonal_text(&eikonal, records.len()),
                track_report.to_text()
            );
            run.write_text("report.txt", &report)?;
            if cfg.io.overlay {
                write_overlay(&mut run, &cropped, &trajectories)?;
            }
            if let Some(gold) = &cfg.io.gold {
                run.input("gold", gold.display().to_string());
                let eval = evaluate_against(cfg, gold, Some(&masks), Some(&trajectories))?;
                write_eval(&mut run, &eval)?;
            }
        }
    }
    run.finish(name, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracker::TrackPoint;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("mactrack").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn overrides_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.txt");
        fs::write(&file, "otsu.delta=0.3\nfilter.k=50\n").unwrap();
        let cli = parse(&["--config", file.to_str().unwrap(), "--set", "otsu.delta=0.7", "-o", "out", "track"]);
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.otsu.delta, 0.7);
        assert_eq!(cfg.filter.k, 50.0);
        assert_eq!(cfg.io.output, Some(PathBuf::from("out")));
    }

    #[test]
    fn config_errors_name_the_key() {
        let cli = parse(&["--set", "filter.nope=1", "track"]);
        let err = run(&cli).unwrap_err();
        assert_eq!(err.exit_code, 2);
        assert_eq!(err.key.as_deref(), Some("filter.nope"));
        assert!(err.line().starts_with("error=config key=filter.nope message=\""));
        let cli = parse(&["--set", "filter.tau_f=-1", "track"]);
        let err = run(&cli).unwrap_err();
        assert_eq!((err.exit_code, err.key.as_deref()), (2, Some("filter.tau")));
        let cli = parse(&["track"]);
        let err = run(&cli).unwrap_err();
        assert_eq!((err.exit_code, err.key.as_deref()), (2, Some("io.output")));
    }

    #[test]
    fn print_config_needs_no_subcommand() {
        let out = run(&parse(&["--print-config"])).unwrap();
        assert_eq!(PipelineConfig::parse(&out).unwrap(), PipelineConfig::default());
        assert!(out.lines().any(|l| l == "subsurf.k=10"));
    }

    #[test]
    fn runtime_errors_exit_with_one() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nothing");
        let cli = parse(&["-i", missing.to_str().unwrap(), "-o", dir.path().to_str().unwrap(), "crop"]);
        let err = run(&cli).unwrap_err();
        assert_eq!(err.exit_code, 1);
        assert_eq!(err.line().lines().count(), 1);
    }

    #[test]
    fn overlay_draws_path_and_marker() {
        let frame = Frame::filled(20, 10, 40.0);
        let mut t = Trajectory::from_positions(1, 0, &[[2.0, 5.0], [10.0, 5.0], [15.0, 5.0]]);
        t.points[2] = TrackPoint { estimated: true, ..t.points[2] };
        let rgb = render_overlay(&frame, &[t], 1);
        let at = |x: usize, y: usize| &rgb[3 * (y * 20 + x)..3 * (y * 20 + x) + 3];
        assert_eq!(at(6, 5), PALETTE[1]);
        assert_eq!(at(10, 8), PALETTE[1]);
        assert_eq!(at(14, 5), [40, 40, 40]);
        assert_eq!(at(0, 0), [40, 40, 40]);
    }

    #[test]
    fn cases_parse_kind_and_layout() {
        assert_eq!(load_case("blob:x", BitDepth::Eight).unwrap_err().key.as_deref(), Some("case"));
        assert_eq!(load_case("object", BitDepth::Eight).unwrap_err().exit_code, 2);
    }
}
