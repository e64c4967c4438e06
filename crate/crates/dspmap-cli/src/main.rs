//! Command-line frontend: dataset simulation, mapping runs, evaluation, and
//! parameter sweeps, all reproducible from a seed and a manifest.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Exit codes: 0 success, 1 usage error, 2 data error.
pub enum CliError {
    Usage(String),
    Data(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> CliError {
        CliError::Data(e.into())
    }
}

pub type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(
    name = "dspmap",
    about = "Continuous particle-based occupancy mapping: simulate, map, evaluate, bench",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and ground truth from a world file.
    Simulate {
        /// World description file.
        world: PathBuf,
        /// Output directory.
        out_dir: PathBuf,
        /// Override the world's random seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluate ground truth every this many frames.
        #[arg(long, default_value_t = 5)]
        stride: u32,
        /// Ground-truth grid resolutions in meters.
        #[arg(long, value_delimiter = ',')]
        resolutions: Option<Vec<f64>>,
        /// Subdivision of the sensor resolution for observed-mask rays.
        #[arg(long, default_value_t = 4)]
        mask_density: u32,
        /// Egocentric box size the truth grids cover, as x,y,z meters.
        #[arg(long, value_delimiter = ',', default_values_t = [10.0, 10.0, 6.0])]
        map_size: Vec<f64>,
    },
    /// Run the map over a dataset, writing grids, timing, and dumps.
    Map {
        /// DSPD dataset stream.
        dataset: PathBuf,
        /// Config file (key=value; see dump-config).
        config: PathBuf,
        /// Output directory.
        out_dir: PathBuf,
        /// Write occupancy snapshots every N frames.
        #[arg(long, default_value_t = 10)]
        snapshot_every: u32,
        /// Map variant: dynamic, random, or static.
        #[arg(long)]
        mode: Option<String>,
        /// Built-in profile applied before the config file: desk or paper.
        #[arg(long)]
        profile: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker threads (default: DSPMAP_THREADS env var or all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Also export a horizontal slice image at this height.
        #[arg(long)]
        slice_z: Option<f64>,
        /// Dump live particles at every snapshot.
        #[arg(long)]
        dump_particles: bool,
        /// Dump per-frame clusters and matches to clusters.tsv.
        #[arg(long)]
        dump_clusters: bool,
        /// Ground-truth file; enables per-agent velocity readout.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Snapshot resolutions; defaults to the config's `resolutions`.
        #[arg(long, value_delimiter = ',')]
        resolutions: Option<Vec<f64>>,
    },
    /// Score a mapping run against ground truth.
    Evaluate {
        /// A directory produced by `map`.
        run_dir: PathBuf,
        /// The directory produced by `simulate` (holds truth files).
        truth: PathBuf,
        /// Resolutions to score.
        #[arg(long, value_delimiter = ',')]
        resolutions: Option<Vec<f64>>,
    },
    /// Sweep config keys over a dataset and tabulate timing.
    Bench {
        dataset: PathBuf,
        config: PathBuf,
        /// key=v1,v2,v3 — may be repeated; runs the full factorial.
        #[arg(long)]
        sweep: Vec<String>,
        /// Limit the number of frames per run.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        profile: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        threads: Option<usize>,
        /// Write the merged table here as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a documented config file with all defaults.
    DumpConfig {
        #[arg(long)]
        profile: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version through the same path
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.cmd {
        Cmd::Simulate { world, out_dir, seed, stride, resolutions, mask_density, map_size } => {
            commands::simulate(&world, &out_dir, seed, stride, resolutions, mask_density, &map_size)
        }
        Cmd::Map {
            dataset,
            config,
            out_dir,
            snapshot_every,
            mode,
            profile,
            seed,
            threads,
            slice_z,
            dump_particles,
            dump_clusters,
            truth,
            resolutions,
        } => commands::map(commands::MapArgs {
            dataset,
            config,
            out_dir,
            snapshot_every,
            mode,
            profile,
            seed,
            threads,
            slice_z,
            dump_particles,
            dump_clusters,
            truth,
            resolutions,
        }),
        Cmd::Evaluate { run_dir, truth, resolutions } => {
            commands::evaluate(&run_dir, &truth, resolutions)
        }
        Cmd::Bench { dataset, config, sweep, frames, profile, seed, threads, out } => {
            commands::bench(&dataset, &config, &sweep, frames, profile, seed, threads, out)
        }
        Cmd::DumpConfig { profile } => commands::dump_config(profile),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
