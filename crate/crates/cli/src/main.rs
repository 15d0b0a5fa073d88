use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use eventconv::graph::{EdgeMode, WindowSpec};
use eventconv::run::{Precision, RunConfig};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "eventconv", version, about = "Sliding-window graph convolution over event streams")]
struct Cli {
    /// Run configuration (JSON); flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    precision: Option<Precision>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic event stream (CSV, or EVT1 for .evt1/.evt/.bin).
    Generate(GenerateArgs),
    /// Build the graph of the final window and dump it as JSON.
    BuildGraph(RunArgs),
    /// Recompute the whole window after every step.
    RunBatch(RunArgs),
    /// Incremental per-step updates.
    RunSlide(RunArgs),
    /// Slide against batch side by side; exit code 2 on a tolerance breach.
    Verify(VerifyArgs),
    /// Mini-batch FLOP/wall curves and pixel-index timing.
    Bench(BenchArgs),
    /// Early recognition over one or more streams.
    Early(EarlyArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Uniform random pixels and polarities (default).
    #[arg(long, group = "kind")]
    pub uniform: bool,
    /// Vertical edge sweeping along +x.
    #[arg(long, group = "kind")]
    pub edge: bool,
    /// Drifting sinusoidal grating.
    #[arg(long, group = "kind")]
    pub grating: bool,
    /// Events per second (uniform).
    #[arg(long, default_value_t = 1e5)]
    pub rate: f64,
    /// Duration: plain microseconds or with a unit (us, ms, s).
    #[arg(long, default_value = "1s", value_parser = parse_duration)]
    pub dur: i64,
    /// Pixels per second (edge, grating).
    #[arg(long, default_value_t = 100.0)]
    pub speed: f64,
    /// Log-intensity contrast threshold (edge, grating).
    #[arg(long, default_value_t = 0.2)]
    pub threshold: f64,
    /// Scene sampling step in microseconds (edge, grating).
    #[arg(long, default_value_t = 1000)]
    pub step: i64,
    #[arg(long, default_value_t = 64)]
    pub width: u32,
    #[arg(long, default_value_t = 64)]
    pub height: u32,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// Event stream (CSV or EVT1).
    #[arg(long, short)]
    pub input: PathBuf,
    /// Output directory; results go to stdout when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug, Default)]
pub struct Overrides {
    /// Count window (events).
    #[arg(long, conflicts_with = "window_us")]
    pub window: Option<usize>,
    /// Time window (microseconds).
    #[arg(long)]
    pub window_us: Option<i64>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub max_degree: Option<usize>,
    /// Only edges from older sources.
    #[arg(long)]
    pub causal: bool,
    /// Weights document; random weights from --widths and --seed otherwise.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Comma-separated, input width first (e.g. 1,16,16).
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub mini_batch: Option<usize>,
    /// Full recompute every N steps (0 = never).
    #[arg(long)]
    pub refresh: Option<u64>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Compare every N steps (the last step is always compared).
    #[arg(long)]
    pub every: Option<usize>,
    /// Defaults to 1e-5 (f32) or 1e-10 (f64).
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, default_value_t = 200)]
    pub index_queries: usize,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Mini-batch sizes (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Events built into the window before sliding; defaults to the window count.
    #[arg(long)]
    pub prefill: Option<usize>,
    /// Live window sizes for the pixel-index timing curve.
    #[arg(long, value_delimiter = ',', default_value = "12500,25000,50000,100000")]
    pub index_windows: Vec<usize>,
    /// Live events per pixel in the index timing runs.
    #[arg(long, default_value_t = 4.0)]
    pub density: f64,
    /// Count windows for a slide-vs-batch per-event cost table.
    #[arg(long, value_delimiter = ',')]
    pub windows: Vec<usize>,
    /// Events slid one by one per window in the cost table.
    #[arg(long, default_value_t = 200)]
    pub measure: usize,
}

#[derive(Args, Debug)]
pub struct EarlyArgs {
    /// Event streams; may be repeated.
    #[arg(long, short, required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub min_events: Option<usize>,
    #[command(flatten)]
    pub overrides: Overrides,
}

fn parse_duration(s: &str) -> Result<i64, String> {
    let s = s.trim();
    let (num, scale) = if let Some(v) = s.strip_suffix("us") {
        (v, 1.0)
    } else if let Some(v) = s.strip_suffix("ms") {
        (v, 1e3)
    } else if let Some(v) = s.strip_suffix('s') {
        (v, 1e6)
    } else {
        (s, 1.0)
    };
    let v: f64 = num.trim().parse().map_err(|_| format!("bad duration {s:?}"))?;
    if !(v >= 0.0 && v.is_finite()) {
        return Err(format!("bad duration {s:?}"));
    }
    Ok((v * scale).round() as i64)
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = cli.precision {
        cfg.precision = p;
    }
    Ok(cfg)
}

fn apply(cfg: &mut RunConfig, o: &Overrides, out: Option<&Path>) {
    if let Some(w) = o.window {
        cfg.window = WindowSpec::ByCount(w);
    }
    if let Some(w) = o.window_us {
        cfg.window = WindowSpec::ByTime(w);
    }
    if let Some(r) = o.radius {
        cfg.radius = r;
    }
    if o.alpha.is_some() {
        cfg.alpha = o.alpha;
    }
    if let Some(d) = o.max_degree {
        cfg.max_degree = d;
    }
    if o.causal {
        cfg.edge_mode = EdgeMode::Causal;
    }
    if o.weights.is_some() {
        cfg.weights = o.weights.clone();
    }
    if let Some(w) = &o.widths {
        cfg.widths = w.clone();
    }
    if let Some(c) = o.classes {
        cfg.classes = c;
    }
    if let Some(m) = o.mini_batch {
        cfg.mini_batch = m;
    }
    if let Some(r) = o.refresh {
        cfg.refresh_interval = r;
    }
    if let Some(d) = out {
        cfg.output_dir = Some(d.to_path_buf());
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Generate(a) => commands::generate(&cfg, &a).map(|_| ExitCode::SUCCESS),
        Command::BuildGraph(a) => {
            apply(&mut cfg, &a.overrides, a.out.as_deref());
            commands::build_graph(&cfg, &a.input).map(|_| ExitCode::SUCCESS)
        }
        Command::RunBatch(a) => {
            apply(&mut cfg, &a.overrides, a.out.as_deref());
            commands::run_mode(&cfg, &a.input, commands::Mode::Batch).map(|_| ExitCode::SUCCESS)
        }
        Command::RunSlide(a) => {
            apply(&mut cfg, &a.overrides, a.out.as_deref());
            commands::run_mode(&cfg, &a.input, commands::Mode::Slide).map(|_| ExitCode::SUCCESS)
        }
        Command::Verify(a) => {
            apply(&mut cfg, &a.run.overrides, a.run.out.as_deref());
            if let Some(e) = a.every {
                cfg.verify_every = e;
            }
            let passed = commands::verify(&cfg, &a.run.input, a.tolerance, a.index_queries)?;
            Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Bench(a) => {
            apply(&mut cfg, &a.run.overrides, a.run.out.as_deref());
            if let Some(s) = &a.sizes {
                cfg.mini_batch_sizes = s.clone();
            }
            commands::bench(&cfg, &a).map(|_| ExitCode::SUCCESS)
        }
        Command::Early(a) => {
            apply(&mut cfg, &a.overrides, a.out.as_deref());
            if let Some(t) = a.tau {
                cfg.policy.threshold = t;
            }
            if let Some(k) = a.stride {
                cfg.policy.stride = k;
            }
            if let Some(m) = a.min_events {
                cfg.policy.min_events = m;
            }
            if let Err(e) = cfg.policy.validate() {
                bail!("{e}");
            }
            commands::early(&cfg, &a.input).map(|_| ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
