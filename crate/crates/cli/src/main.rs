//! `sim`: run a scene file or a built-in preset and write diagnostics,
//! snapshots, and (optionally) the assembled matrices.
//!
//! Exit codes: 0 success, 2 bad scene/mesh/material input, 3 solver
//! non-convergence, 4 I/O failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;

use tetsim::error::Error;
use tetsim::scene::{build_world, generate_scene, parse_scene, run_simulation, RunOptions};

#[derive(Parser, Debug)]
#[command(
    name = "sim",
    about = "Tetrahedral deformable / rigid contact simulator",
    version
)]
struct Cli {
    /// Scene file path, or a preset name with optional knobs
    /// (drop, compression, arch, weld-swing; e.g. "arch:mu=0.2").
    #[arg(long)]
    scene: String,

    /// Number of steps to run (defaults to the scene's own step count).
    #[arg(long)]
    steps: Option<u64>,

    /// Override the scene's time step.
    #[arg(long)]
    dt: Option<f64>,

    /// Output directory for diagnostics.csv, snapshots, and matrix dumps.
    /// Without it the run prints its summary only.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Override the contact solver's relative gradient tolerance.
    #[arg(long)]
    tolerance: Option<f64>,

    /// Write body snapshots every K steps (0 disables; overrides the scene).
    #[arg(long, value_name = "K")]
    snapshot_every: Option<u64>,

    /// Dump each body's tangent matrix, its factor, and the condensed
    /// contact-space matrix for the initial configuration.
    #[arg(long)]
    dump_matrices: bool,

    /// Override the scene's random seed (used by presets that randomize).
    #[arg(long)]
    seed: Option<u64>,
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Scene { .. }
        | Error::Parse { .. }
        | Error::InvalidMaterial(_)
        | Error::DegenerateElement { .. }
        | Error::InvertedElement { .. }
        | Error::VertexIndexOutOfRange { .. }
        | Error::NonPositiveDensity(_)
        | Error::NonManifold { .. } => 2,
        Error::SolverNonConvergence { .. }
        | Error::NonPositivePivot { .. }
        | Error::Inverted { .. }
        | Error::PolarNonConvergence { .. } => 3,
        Error::Io(_) => 4,
    }
}

/// A scene argument naming a file (it exists, or it looks like a path)
/// is read from disk; anything else is treated as a preset spec.
fn load_scene(spec: &str) -> Result<(tetsim::scene::SceneConfig, PathBuf), Error> {
    let path = Path::new(spec);
    let looks_like_path =
        path.exists() || spec.contains('/') || spec.contains('\\') || spec.ends_with(".json");
    if looks_like_path {
        let text = std::fs::read_to_string(path)?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        Ok((parse_scene(&text)?, base))
    } else {
        Ok((generate_scene(spec)?, PathBuf::from(".")))
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let (mut config, base_dir) = load_scene(&cli.scene)?;
    if let Some(dt) = cli.dt {
        config.scheme.dt = dt;
    }
    if let Some(tol) = cli.tolerance {
        config.solver.tolerance = tol;
    }
    if let Some(k) = cli.snapshot_every {
        config.output.snapshot_every = if k > 0 { Some(k) } else { None };
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let steps = cli.steps.unwrap_or(config.steps);

    let mut world = build_world(&config, &base_dir)?;
    let opts = RunOptions {
        out_dir: cli.out.clone(),
        snapshot_every: config.output.snapshot_every,
        solver_trace: config.output.solver_trace,
        dump_matrices: cli.dump_matrices,
    };
    if cli.dump_matrices && opts.out_dir.is_none() {
        return Err(Error::Scene {
            pointer: "/".into(),
            message: "--dump-matrices requires --out".into(),
        });
    }
    let summary = run_simulation(&mut world, steps, &opts)?;
    println!("{}", summary.table_line());
    if let Some(dir) = &opts.out_dir {
        println!("output written to {}", dir.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
