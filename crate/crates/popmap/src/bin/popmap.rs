//! Thin command-line front end over the library pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use popmap::pipeline::{
    export_csv, export_pgm16, read_cube, render_report, run_gen, run_pipeline, ExperimentConfig,
    Preset, Stage,
};

#[derive(Parser)]
#[command(name = "popmap", version, about = "dynamic population mapping pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    PaperScale,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic city and ground-truth cube into a run directory.
    Gen {
        /// Experiment config JSON; defaults to the chosen preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "desk")]
        preset: PresetArg,
        /// Redo even if the manifest says this config already ran.
        #[arg(long)]
        force: bool,
    },
    /// Run pipeline stages (preprocess, train-spatial, train-temporal,
    /// baselines, eval) inside an existing run directory.
    Pipeline {
        /// Experiment config JSON; defaults to <out>/config.json.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated stage subset; defaults to all stages.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Export a PCB1 cube as per-frame CSV or 16-bit PGM images.
    Export {
        /// Path to a .pcb cube file.
        cube: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the stored results table of a run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_or_preset(
    config: &Option<PathBuf>,
    preset: PresetArg,
    seed: Option<u64>,
) -> popmap::Result<ExperimentConfig> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => match preset {
            PresetArg::Desk => ExperimentConfig::desk(0),
            PresetArg::PaperScale => ExperimentConfig::paper_scale(0),
        },
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> popmap::Result<()> {
    match cli.command {
        Command::Gen {
            config,
            out,
            seed,
            preset,
            force,
        } => run_gen(&load_or_preset(&config, preset, seed)?, &out, force),
        Command::Pipeline {
            config,
            out,
            stages,
            seed,
            force,
        } => {
            let path = config.unwrap_or_else(|| out.join("config.json"));
            let mut cfg = ExperimentConfig::load(&path)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let stages = if stages.is_empty() {
                Stage::ALL.to_vec()
            } else {
                stages
                    .iter()
                    .map(|s| Stage::parse(s))
                    .collect::<popmap::Result<Vec<_>>>()?
            };
            if cfg.preset == Preset::PaperScale {
                eprintln!(
                    "note: paper-scale preset records settings in the manifest without executing training stages"
                );
            }
            run_pipeline(&cfg, &out, &stages, force)
        }
        Command::Export { cube, format, out } => {
            let c = read_cube(&cube)?;
            let stem = cube
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "cube".to_string());
            let files = match format.as_str() {
                "csv" => export_csv(&c, &out, &stem)?,
                "pgm16" => export_pgm16(&c, &out, &stem)?,
                other => {
                    return Err(popmap::Error::config(format!(
                        "unknown export format '{other}' (expected csv or pgm16)"
                    )))
                }
            };
            println!("wrote {} files to {}", files.len(), out.display());
            Ok(())
        }
        Command::Report { out } => {
            let table = render_report(&out.join("results.csv"))?;
            print!("{table}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
