use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gise_core::ablation::run_ablation_dir;
use gise_core::bench::{bench_scaling, write_bench_csv, LayerKind};
use gise_core::checkpoint::load_checkpoint;
use gise_core::config::{AblationId, ExperimentConfig};
use gise_core::metrics::DEFAULT_BOUNDARY_TOL;
use gise_core::synthvid::{generate_dataset, read_dataset, write_dataset, SceneSpec};
use gise_core::train::{evaluate_model, train_run};
use gise_core::Error;

#[derive(Parser)]
#[command(name = "gise", version, about = "Test-time-training fusion for video object segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic video dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        videos: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        objects: usize,
        #[arg(long, default_value_t = 0)]
        distractors: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write its checkpoint and log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Run free propagation with a checkpoint and report J&F.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate fusion configurations A..G on a held-out split.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "A,B,C,D,E,F,G")]
        configs: String,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
        /// Base experiment config; fusion fields are overridden per row.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run configurations on this many threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Time a single layer over increasing sequence lengths.
    Bench {
        #[arg(long)]
        layer: LayerKind,
        #[arg(long, value_delimiter = ',', required = true)]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Bench(_) => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn run(command: Command) -> gise_core::Result<()> {
    match command {
        Command::GenData { out, videos, frames, size, objects, distractors, seed } => {
            let spec = SceneSpec { num_frames: frames, distractors, ..SceneSpec::with_size(objects, size, seed) };
            let samples = generate_dataset(&spec, videos)?;
            write_dataset(&samples, &out)?;
            println!("wrote {videos} videos to {}", out.display());
        }
        Command::Train { data, config, steps, seed, out, log } => {
            let exp = ExperimentConfig::load(&config)?;
            let outcome = train_run(&exp, steps, seed, &data, &out, &log)?;
            let last = outcome.log.last().map_or(f64::NAN, |r| r.loss);
            let jf = outcome.final_jf.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
            println!("steps {} final loss {last:.6} J&F {jf}", outcome.steps_run);
        }
        Command::Eval { data, ckpt, report } => {
            let model = load_checkpoint(&ckpt)?;
            let videos = read_dataset(&data)?;
            let r = evaluate_model(&model, &videos, DEFAULT_BOUNDARY_TOL, 0)?;
            std::fs::write(&report, serde_json::to_vec_pretty(&r)?)?;
            println!("J {:.4} F {:.4} J&F {:.4}", r.j_mean, r.f_mean, r.jf_mean);
        }
        Command::Ablate { data, configs, steps, seed, report, config, jobs } => {
            let ids = AblationId::parse_list(&configs)?;
            let base = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            let r = run_ablation_dir(&data, &ids, &base, steps, seed, jobs, &report)?;
            for row in &r.rows {
                println!("{} J&F {:.4} (reference {:.3})", row.config.letter(), row.jf, row.reference_jf);
            }
        }
        Command::Bench { layer, lengths, dim, reps, out, seed } => {
            let r = bench_scaling(layer, &lengths, dim, reps, seed)?;
            write_bench_csv(&r, &out)?;
            println!("{layer} slope {:.3}", r.slope);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
