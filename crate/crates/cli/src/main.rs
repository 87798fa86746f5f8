mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use bami_core::geometry::ImageDims;
use bami_core::image_ops::GridSpec;
use bami_core::pipeline::BamiConfig;
use bami_core::protocol::{Expect, PromptStyle};
use clap::{Args, Parser, Subcommand};

/// Process exit statuses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    Backend = 2,
    Parse = 3,
    Usage = 64,
    Data = 65,
    Internal = 70,
    Io = 74,
}

/// An error paired with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub status: Status,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(status: Status, error: impl Into<anyhow::Error>) -> Self {
        Self {
            status,
            error: error.into(),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

#[derive(Parser, Debug)]
#[command(name = "bami", version, about = "Coarse-to-fine GUI grounding, attribution, and benchmarking")]
struct Cli {
    /// Log progress at info level (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Locate one query on one screenshot.
    Ground(GroundArgs),
    /// Evaluate a dataset, or compare two saved reports.
    Bench(BenchArgs),
    /// Masked prediction distribution for one query.
    Mpd(MpdArgs),
    /// Generate synthetic scenes, screenshots, and a dataset.
    Simgen(SimgenArgs),
}

#[derive(Args, Debug, Clone)]
pub struct BamiArgs {
    /// Crop iterations.
    #[arg(long, default_value_t = BamiConfig::default().iterations)]
    pub iterations: u32,
    /// Candidates per iteration.
    #[arg(long, default_value_t = BamiConfig::default().candidates)]
    pub candidates: u32,
    /// Crop ratio per iteration, in (0, 1].
    #[arg(long, default_value_t = BamiConfig::default().lambda)]
    pub lambda: f64,
    /// Correction prompt: vanilla, cot, or cot_kp.
    #[arg(long, default_value = "cot_kp")]
    pub prompt_style: PromptStyle,
    /// Half-size in pixels of the box around a click prediction.
    #[arg(long, default_value_t = BamiConfig::default().click_expand)]
    pub click_expand: u32,
    /// Keep the first candidate instead of asking the correction backend.
    #[arg(long)]
    pub no_candidate_selection: bool,
}

impl BamiArgs {
    pub fn config(&self) -> BamiConfig {
        BamiConfig {
            iterations: self.iterations,
            candidates: self.candidates,
            lambda: self.lambda,
            prompt_style: self.prompt_style,
            click_expand: self.click_expand,
            candidate_selection: !self.no_candidate_selection,
        }
    }
}

#[derive(Args, Debug)]
pub struct GroundArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long)]
    pub backend_config: PathBuf,
    /// baseline or bami.
    #[arg(long, default_value = "bami")]
    pub mode: String,
    #[command(flatten)]
    pub bami: BamiArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sample identifier passed to backends.
    #[arg(long, default_value = "cli")]
    pub sample_id: String,
    /// Run directory (default ./runs/<timestamp>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, required_unless_present = "compare")]
    pub dataset: Option<PathBuf>,
    /// native or screenspot.
    #[arg(long, default_value = "native")]
    pub adapter: String,
    /// baseline or bami.
    #[arg(long, required_unless_present = "compare")]
    pub mode: Option<String>,
    #[arg(long, required_unless_present = "compare")]
    pub backend_config: Option<PathBuf>,
    #[command(flatten)]
    pub bami: BamiArgs,
    /// Worker threads (default: one per logical core).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Row label in report tables (default: the mode).
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print a delta table for two report.json files instead of running.
    #[arg(long, num_args = 2, value_names = ["A", "B"], conflicts_with_all = ["dataset", "mode", "backend_config"])]
    pub compare: Option<Vec<PathBuf>>,
}

#[derive(Args, Debug)]
pub struct MpdArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long)]
    pub backend_config: PathBuf,
    /// Mask grid as RxC.
    #[arg(long, default_value = "16x16")]
    pub grid: GridSpec,
    #[arg(long, default_value_t = 300)]
    pub samples: u32,
    /// Masking-ratio range as lo:hi.
    #[arg(long, default_value = "0.1:0.9", value_parser = parse_alpha)]
    pub alpha: (f64, f64),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "cli")]
    pub sample_id: String,
    /// Also write overlay.png.
    #[arg(long)]
    pub overlay: bool,
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimgenArgs {
    /// Screenshot size as WxH.
    #[arg(long, value_parser = parse_dims)]
    pub dims: ImageDims,
    /// Target elements per scene.
    #[arg(long)]
    pub elements: usize,
    #[arg(long, default_value_t = 0)]
    pub distractors: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub scenes: usize,
    #[arg(long)]
    pub min_side: Option<u32>,
    #[arg(long)]
    pub max_side: Option<u32>,
    /// Simulator noise as a fraction of the frame's larger side.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Simulator probability of answering with a distractor.
    #[arg(long, default_value_t = 0.0)]
    pub ambig: f64,
    /// Simulator reply shape: box or click.
    #[arg(long, default_value = "box")]
    pub output: Expect,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_alpha(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected lo:hi, got {s:?}"))?;
    let lo: f64 = lo.trim().parse().map_err(|_| format!("bad lower bound in {s:?}"))?;
    let hi: f64 = hi.trim().parse().map_err(|_| format!("bad upper bound in {s:?}"))?;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(format!("need 0 <= lo <= hi <= 1, got {s:?}"));
    }
    Ok((lo, hi))
}

fn parse_dims(s: &str) -> Result<ImageDims, String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w: u32 = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: u32 = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    ImageDims::new(w, h).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(Status::Usage as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Ground(a) => commands::ground(a),
        Command::Bench(a) => commands::bench(a),
        Command::Mpd(a) => commands::mpd(a),
        Command::Simgen(a) => commands::simgen(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.status as u8)
        }
    }
}
