use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gridpoint_cli::{run, CliError, Overrides, PipelineConfig, Stage};

#[derive(Parser)]
#[command(name = "gridpoint", version, about = "Grid-point detection pipeline on synthetic structured-light captures")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline configuration (TOML).
    #[arg(long, global = true, default_value = "gridpoint.toml")]
    config: PathBuf,

    /// Run directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Training profile; overrides `train.profile`.
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,

    /// Run seed; overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Single-threaded, reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Paper,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Render the projector patterns.
    Pattern,
    /// Render the scene captures and their analytic truth.
    Simulate,
    /// Build skeleton labels from the two-shot captures.
    Label,
    /// Tile training scenes into a patch manifest.
    Patches,
    /// Train the segmentation network.
    Train,
    /// Predict probability maps for the test scenes.
    Predict,
    /// Detect grid points (network, classical and label-based).
    Detect,
    /// Score detections against the truth.
    Eval,
    /// Every stage in order.
    Pipeline,
}

fn stages(c: Command) -> Vec<Stage> {
    let one = |s| vec![s];
    match c {
        Command::Pattern => one(Stage::Pattern),
        Command::Simulate => one(Stage::Simulate),
        Command::Label => one(Stage::Label),
        Command::Patches => one(Stage::Patches),
        Command::Train => one(Stage::Train),
        Command::Predict => one(Stage::Predict),
        Command::Detect => one(Stage::Detect),
        Command::Eval => one(Stage::Eval),
        Command::Pipeline => Stage::ALL.to_vec(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp_secs().init();
    let overrides = Overrides {
        output_dir: cli.out.clone(),
        profile: cli.profile.map(|p| match p {
            Profile::Desk => "desk".to_string(),
            Profile::Paper => "paper".to_string(),
        }),
        seed: cli.seed,
        deterministic: cli.deterministic,
    };
    let result = PipelineConfig::load(&cli.config)
        .and_then(|c| c.apply(&overrides))
        .and_then(|c| run(&c, &stages(cli.command)));
    match result {
        Ok(m) => {
            for s in &m.stages {
                println!("{:<9} {:?}", s.stage, s.status);
            }
            ExitCode::SUCCESS
        }
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    eprintln!("error: {e}");
    let mut src = std::error::Error::source(&e);
    while let Some(s) = src {
        eprintln!("  caused by: {s}");
        src = s.source();
    }
    ExitCode::from(e.exit_code() as u8)
}
