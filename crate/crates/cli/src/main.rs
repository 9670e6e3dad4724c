use anyhow::Result;
use clap::{Parser, Subcommand};
use mvpose::pipeline::{self, Overrides, RunConfig, Stage};
use std::path::PathBuf;

/// Multi-view multi-person 3D pose reconstruction.
///
/// Settings come from defaults, then the `--config` TOML file, then flags.
/// The data directory defaults to $MVPOSE_DATA_DIR, or `data`.
#[derive(Debug, Parser)]
#[command(name = "mvpose", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,

    /// Where results are written (default: <data-dir>/output).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Reconstruct from K farthest-point sampled cameras.
    #[arg(long = "cameras-subset", value_name = "K", global = true)]
    cameras_subset: Option<usize>,

    /// Pipeline stages to run: 1, 2 or all.
    #[arg(long, global = true)]
    stage: Option<Stage>,

    /// PCK thresholds in centimetres, comma separated.
    #[arg(long, value_delimiter = ',', global = true)]
    thresholds: Option<Vec<f64>>,

    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Reconstruct skeletons from score maps.
    Reconstruct,
    /// Refine stage-1 skeletons with the patch stream.
    Refine,
    /// Score an estimate against the reference skeletons.
    Eval {
        /// Re-run reconstruction on nested subsets of this many cameras.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<usize>>,
    },
    /// Optimise the dome camera layout.
    RigOptimize,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    let overrides = Overrides {
        data_dir: cli.data_dir.clone(),
        output_dir: cli.output_dir.clone(),
        stage: cli.stage,
        workers: cli.workers,
        seed: cli.seed,
        cameras_subset: cli.cameras_subset,
        thresholds_cm: cli.thresholds.clone(),
    };
    let mut config = RunConfig::load(cli.config.as_deref(), &overrides)?;

    match cli.command {
        Command::Synth => {
            let s = pipeline::cmd_synth(&config)?;
            println!(
                "wrote {} frames, {} people, {} cameras, {} depth maps, {} patches to {}",
                s.frames,
                s.people,
                s.cameras,
                s.depth_maps,
                s.patches,
                config.data_dir.display()
            );
        }
        Command::Reconstruct => {
            let s = pipeline::cmd_reconstruct(&config)?;
            println!(
                "{} frames, {} skeletons, {} people -> {}",
                s.frames,
                s.skeletons,
                s.people,
                s.output.display()
            );
            if let Some(r) = &s.refine {
                print_refine(r);
            }
        }
        Command::Refine => print_refine(&pipeline::cmd_refine(&config)?),
        Command::Eval { sweep } => {
            if let Some(sweep) = sweep {
                config.eval.sweep = sweep;
            }
            let s = pipeline::cmd_eval(&config)?;
            if let Some(report) = &s.report {
                print!("{}", report.to_table());
            }
            for (k, report) in &s.sweep {
                let line: Vec<String> = report
                    .thresholds_cm
                    .iter()
                    .zip(&report.pck)
                    .map(|(t, p)| format!("{t}cm={p:.4}"))
                    .collect();
                println!("{k:>5} cameras  {}", line.join("  "));
            }
        }
        Command::RigOptimize => {
            let s = pipeline::cmd_rig_optimize(&config)?;
            println!(
                "objective {:.6e} -> {:.6e} in {} iterations; {} cameras ({} exported)",
                s.initial_objective, s.final_objective, s.iterations, s.cameras, s.exported_cameras
            );
            if let Some(b) = s.baselines {
                println!(
                    "nearest-3 baselines: min {:.2} cm, mean {:.2} cm, max {:.2} cm",
                    b.min * 100.0,
                    b.mean * 100.0,
                    b.max * 100.0
                );
            }
        }
    }
    Ok(())
}

fn print_refine(r: &pipeline::RefineSummary) {
    println!(
        "refined: {} outlier parts removed, {} part frames filled in {} iterations{}",
        r.outliers_removed,
        r.frames_filled,
        r.iterations,
        if r.depth_used { "" } else { " (no depth maps)" }
    );
}
