//! `sourceswap` command-line entry point.
//!
//! Exit codes: 0 success, 1 partial failure (some entries skipped or checks
//! failed), 2 fatal error or bad usage.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sourceswap::config::{DenoiserKind, RunConfig};
use sourceswap::pipeline::CodecKind;
use sourceswap::PerturbMode;

#[derive(Debug, Parser)]
#[command(name = "sourceswap", version, about = "Pseudo-pair synthesis, refinement and region evaluation")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Print a machine-readable run summary on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build pseudo pairs for every entry of a JSON-lines manifest.
    MakePairs {
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        perturb: PerturbFlags,
        #[command(flatten)]
        backend: BackendFlags,
    },
    /// Perturb an initial-noise tensor inside a mask.
    Perturb {
        /// Noise tensor file (C x H x W).
        #[arg(long, value_name = "PATH")]
        noise: PathBuf,
        /// Mask PNG; resampled to the noise resolution when sizes differ.
        #[arg(long, value_name = "PATH")]
        mask: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[command(flatten)]
        perturb: PerturbFlags,
    },
    /// Encode an image and invert it to its initial noise.
    Invert {
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        /// Output tensor for z_T.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[command(flatten)]
        backend: BackendFlags,
    },
    /// Sample from an initial-noise tensor and decode to an image.
    Sample {
        #[arg(long, value_name = "PATH")]
        noise: PathBuf,
        /// Output PNG.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Also write the decoded image as a full-precision tensor.
        #[arg(long, value_name = "PATH")]
        tensor_out: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendFlags,
    },
    /// Iteratively apply a swap operator, feeding each output back as source.
    Refine {
        #[arg(long, value_name = "PATH")]
        reference: PathBuf,
        #[arg(long, value_name = "PATH")]
        source: PathBuf,
        #[arg(long, value_name = "PATH")]
        mask: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Number of rounds.
        #[arg(long, value_name = "K")]
        k: Option<usize>,
        /// Write every round's output next to --out.
        #[arg(long)]
        keep_intermediates: bool,
        /// Built-in operator.
        #[arg(long, value_enum, default_value = "composite")]
        operator: OperatorKind,
        /// Blend weight of the composite operator.
        #[arg(long, value_name = "A")]
        alpha: Option<f64>,
    },
    /// Scene-fidelity distance on the boundary region of the object mask.
    EvalRegion {
        #[arg(long, value_name = "PATH", requires_all = ["result", "mask"], conflicts_with = "list")]
        source: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        result: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        mask: Option<PathBuf>,
        /// JSON lines of {"id", "source_path", "result_path", "mask_path"}.
        #[arg(long, value_name = "PATH", required_unless_present = "source")]
        list: Option<PathBuf>,
        /// mse, 1-ssim, lpips, dreamsim or remote:<name>.
        #[arg(long, value_name = "NAME")]
        metric: Option<String>,
        /// Mask dilation radius in pixels (default: 2% of the short side).
        #[arg(long, value_name = "PX")]
        dilate: Option<usize>,
        /// Rectangle margin in pixels.
        #[arg(long, value_name = "PX")]
        margin: Option<usize>,
        /// Directory for report.csv and report.json.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Bridge address for remote metrics.
        #[arg(long, value_name = "HOST:PORT")]
        backend: Option<String>,
    },
    /// Assemble training samples from a pairs.jsonl file.
    AssembleTrain {
        #[arg(long, value_name = "PATH")]
        pairs: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        backend: BackendFlags,
    },
    /// Check the wire protocol against an in-process echo server or a
    /// running backend.
    ProtocolSelftest {
        /// Test this backend instead of the in-process echo server.
        #[arg(long, value_name = "HOST:PORT")]
        backend: Option<String>,
        /// Number of random frame round trips.
        #[arg(long, default_value_t = 1000)]
        fuzz_cases: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OperatorKind {
    Composite,
    Identity,
}

#[derive(Debug, Args)]
pub struct PerturbFlags {
    #[arg(long, value_name = "MODE", value_parser = parse_mode)]
    pub mode: Option<PerturbMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Low-pass half-power radius as a fraction of Nyquist.
    #[arg(long, value_name = "F")]
    pub stop_freq: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BackendFlags {
    /// identity, avgpool-4 or bridge.
    #[arg(long, value_name = "KIND", value_parser = parse_codec)]
    pub codec: Option<CodecKind>,
    /// zero, gaussian or bridge.
    #[arg(long, value_name = "KIND", value_parser = parse_denoiser)]
    pub denoiser: Option<DenoiserKind>,
    /// Bridge address.
    #[arg(long, value_name = "HOST:PORT")]
    pub backend: Option<String>,
    /// DDIM steps.
    #[arg(long, value_name = "T")]
    pub steps: Option<usize>,
}

fn parse_mode(s: &str) -> Result<PerturbMode, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_codec(s: &str) -> Result<CodecKind, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_denoiser(s: &str) -> Result<DenoiserKind, String> {
    s.parse().map_err(|e| format!("{e}"))
}

impl PerturbFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(m) = self.mode {
            cfg.perturb.mode = m;
        }
        if let Some(s) = self.seed {
            cfg.perturb.seed = s;
        }
        if let Some(f) = self.stop_freq {
            cfg.perturb.stop_frequency = f;
        }
    }
}

impl BackendFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(c) = self.codec {
            cfg.backend.codec = c;
        }
        if let Some(d) = self.denoiser {
            cfg.backend.denoiser = d;
        }
        if let Some(a) = &self.backend {
            cfg.backend.address = Some(a.clone());
        }
        if let Some(t) = self.steps {
            cfg.schedule.steps = t;
        }
    }
}

/// Loads the config file, then applies flags on top.
pub fn effective_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    match &cli.command {
        Command::MakePairs { perturb, backend, .. } => {
            perturb.apply(&mut cfg);
            backend.apply(&mut cfg);
        }
        Command::Perturb { perturb, .. } => perturb.apply(&mut cfg),
        Command::Invert { backend, .. } | Command::Sample { backend, .. } | Command::AssembleTrain { backend, .. } => {
            backend.apply(&mut cfg)
        }
        Command::Refine { k, keep_intermediates, alpha, .. } => {
            if let Some(k) = k {
                cfg.refine.rounds = *k;
            }
            cfg.refine.keep_intermediates |= keep_intermediates;
            if let Some(a) = alpha {
                cfg.refine.alpha = *a;
            }
        }
        Command::EvalRegion { metric, dilate, margin, backend, .. } => {
            if let Some(m) = metric {
                cfg.eval.metric = m.clone();
            }
            if dilate.is_some() {
                cfg.masks.eval_dilate_radius = *dilate;
            }
            if let Some(m) = margin {
                cfg.masks.rect_margin = *m;
            }
            if let Some(a) = backend {
                cfg.backend.address = Some(a.clone());
            }
        }
        Command::ProtocolSelftest { backend, .. } => {
            if let Some(a) = backend {
                cfg.backend.address = Some(a.clone());
            }
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = effective_config(&cli).and_then(|cfg| commands::run(&cli, &cfg));
    match result {
        Ok(outcome) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&outcome.summary).expect("summary serializes"));
            } else {
                eprintln!("{}", outcome.message);
            }
            ExitCode::from(outcome.status.code())
        }
        Err(e) => {
            if cli.json {
                let summary = serde_json::json!({ "status": "fatal", "error": format!("{e:#}") });
                println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            }
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
