mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use config::ExperimentConfig;
use lumoe::error::Error;

#[derive(Parser)]
#[command(name = "lumoe", version, about = "Virtual lightstage SVBRDF capture with a gated mixture-of-experts")]
struct Cli {
    /// JSON experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic lumitexel dataset file.
    GenData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out/train.lumi")]
        out: PathBuf,
    },
    /// Pretrain the latent autoencoder and save its post-bottleneck head.
    Pretrain {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out/latent_head.dnck")]
        out: PathBuf,
    },
    /// Train patterns, gating and decoders against a frozen latent head.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Pretrained head checkpoint; pretrains one inline when omitted.
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long, default_value = "out/run")]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Physically realized pattern count (must be even).
        #[arg(long)]
        realized_patterns: Option<usize>,
        #[arg(long)]
        n_decoders: Option<usize>,
        /// Use fixed PCA patterns instead of jointly trained ones.
        #[arg(long)]
        pca: bool,
        /// Resume from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Simulate acquisition of a synthetic scene and fit texture maps.
    Fit {
        #[arg(long)]
        bundle: PathBuf,
        /// Scene JSON path or builtin:constant | builtin:two-material |
        /// builtin:aniso-gradient.
        #[arg(long, default_value = "builtin:constant")]
        scene: String,
        #[arg(long, default_value = "out/maps")]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Pixel size of builtin scenes.
        #[arg(long, default_value_t = 24)]
        scene_size: usize,
    },
    /// Evaluate trained runs: validation-loss table and SSIM validation
    /// renders under a held-out light.
    Eval {
        /// Directory of run subdirectories (bundle.mbdl + meta.json each).
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, default_value = "builtin:aniso-gradient")]
        scene: String,
        #[arg(long, default_value = "out/eval")]
        out: PathBuf,
        /// Only compute the loss table (skip scene fitting and SSIM).
        #[arg(long)]
        skip_ssim: bool,
        #[arg(long, default_value_t = 24)]
        scene_size: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Route random lumitexels through the gating and report per-decoder
    /// statistics.
    GatingStats {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        count: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value = "out/gating")]
        out: PathBuf,
    },
    /// Render texture maps or a ground-truth scene under a point light.
    Render {
        #[arg(long)]
        maps: Option<PathBuf>,
        #[arg(long)]
        scene: Option<String>,
        /// Light position as x,y,z (meters).
        #[arg(long, default_value = "0.15,0.1,0.3")]
        light: String,
        #[arg(long, default_value_t = 0.05)]
        intensity: f64,
        /// View position as x,y,z; defaults to the device camera.
        #[arg(long)]
        view: Option<String>,
        #[arg(long, default_value = "out/render")]
        out: PathBuf,
        #[arg(long, default_value_t = 24)]
        scene_size: usize,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) | Error::Format(_) | Error::InvalidState(_) => 2,
        Error::NumericFailure(_) | Error::DegenerateInput(_) => 3,
        Error::Io(_) => 4,
    }
}

fn run(cli: Cli) -> lumoe::Result<()> {
    let cfg = ExperimentConfig::load_or_default(cli.config.as_deref())?;
    match cli.command {
        Command::GenData { count, seed, out } => commands::cmd_gen_data(&cfg, count, seed, &out),
        Command::Pretrain { dataset, iterations, seed, out } => {
            commands::cmd_pretrain(&cfg, &dataset, iterations, seed, &out)
        }
        Command::Train {
            dataset,
            head,
            out,
            iterations,
            seed,
            realized_patterns,
            n_decoders,
            pca,
            resume,
            checkpoint_every,
        } => commands::cmd_train(
            &cfg,
            &dataset,
            head.as_deref(),
            &out,
            iterations,
            seed,
            realized_patterns,
            n_decoders,
            pca,
            resume.as_deref(),
            checkpoint_every,
        ),
        Command::Fit { bundle, scene, out, noise, seed, scene_size } => {
            commands::cmd_fit(&cfg, &bundle, &scene, &out, noise, seed, scene_size)
        }
        Command::Eval { runs, scene, out, skip_ssim, scene_size, noise } => {
            commands::cmd_eval(&cfg, &runs, &scene, &out, skip_ssim, scene_size, noise)
        }
        Command::GatingStats { bundle, count, seed, out } => {
            commands::cmd_gating_stats(&cfg, &bundle, count, seed, &out)
        }
        Command::Render { maps, scene, light, intensity, view, out, scene_size } => {
            commands::cmd_render(
                &cfg,
                maps.as_deref(),
                scene.as_deref(),
                &light,
                intensity,
                view.as_deref(),
                &out,
                scene_size,
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
