//! `seld-mamba`: train, evaluate, benchmark and describe the model.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seld_core::data::{events_to_frames, synth_scene, write_labels, write_manifest, write_wav, ManifestEntry, SceneSpec};
use seld_core::train::{
    bench_scan, describe_checkpoint, describe_config, evaluate_checkpoint, train, RunConfig, StagePlan, BENCH_LENGTHS,
};
use seld_core::Result;

#[derive(Parser)]
#[command(name = "seld-mamba", version, about = "Three-branch Mamba sound event localization and detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key=value config file (SELD_* variables override keys).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.stage_plan.
        #[arg(long, value_parser = ["unified", "two-stage"])]
        stage_plan: Option<String>,
        /// Overrides train.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a dataset manifest.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Time the selective scan at growing sequence lengths.
    Bench {
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        state: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Print parameter and MAC counts and the parameter manifest.
    Describe(DescribeArgs),
    /// Write synthetic clips, labels and a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        clips: usize,
        #[arg(long, default_value_t = 5.0)]
        seconds: f64,
        #[arg(long, default_value_t = 3)]
        events: usize,
        #[arg(long, default_value_t = 13)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct DescribeArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            stage_plan,
            out,
            resume,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(p) = stage_plan {
                cfg.stage_plan = p.parse::<StagePlan>()?;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cfg.resume |= resume;
            let report = train(&cfg)?;
            for (stage, m) in &report.stages {
                println!("[{stage}] {}", m.to_text().replace('\n', "  "));
            }
            match report.final_report {
                Some(r) => println!("{}", r.to_text()),
                None => println!("stopped early; resume with --resume"),
            }
        }
        Command::Evaluate { ckpt, data, json } => {
            let r = evaluate_checkpoint(&ckpt, &data)?;
            println!("{}", if json { r.to_json() } else { r.to_text() });
        }
        Command::Bench {
            channels,
            state,
            repeats,
        } => println!("{}", bench_scan(&BENCH_LENGTHS, channels, state, repeats)),
        Command::Describe(d) => {
            let text = match (d.ckpt, d.config) {
                (Some(p), _) => describe_checkpoint(p)?,
                (None, Some(p)) => describe_config(&RunConfig::load(p)?)?,
                (None, None) => unreachable!("clap requires one source"),
            };
            print!("{text}");
        }
        Command::Synth {
            out,
            clips,
            seconds,
            events,
            classes,
            seed,
        } => {
            std::fs::create_dir_all(&out).map_err(seld_core::error::io_err(format!("creating {}", out.display())))?;
            let frames = (seconds * 10.0).round() as usize;
            let mut entries = Vec::with_capacity(clips);
            for i in 0..clips {
                let spec = SceneSpec {
                    seed: seed + i as u64,
                    duration: seconds,
                    n_events: events,
                    n_classes: classes,
                    event_duration: (0.5, 2.5f64.min(seconds)),
                    ..SceneSpec::default()
                };
                let (clip, labels) = synth_scene(&spec)?;
                let (wav, csv) = (out.join(format!("clip{i:04}.wav")), out.join(format!("clip{i:04}.csv")));
                write_wav(&wav, &clip)?;
                write_labels(&csv, &events_to_frames(&labels, frames)?)?;
                entries.push(ManifestEntry { clip: wav, labels: csv });
            }
            let manifest = out.join("manifest.txt");
            write_manifest(&manifest, &entries)?;
            println!("wrote {clips} clips, manifest {}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
