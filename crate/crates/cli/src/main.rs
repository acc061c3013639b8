//! `dtcmr`: generate phantom cohorts, run the repetition and de-noising
//! studies, and render map figures.
//!
//! Exit codes: 0 on success, 2 on validation/input errors, 3 on numerical
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dtcmr_core::container;
use dtcmr_core::denoise::TrainConfig;
use dtcmr_core::error::Error;
use dtcmr_core::fitting::SchemeVariant;
use dtcmr_core::report::write_map_svg;
use dtcmr_core::study::{
    generate_cohort, prepare_subject, run_denoise_study, run_repetitions_study, CohortSpec,
    DenoiseStudyConfig, LadderRow, RepetitionsStudyConfig,
};

#[derive(Parser)]
#[command(
    name = "dtcmr",
    about = "Simulate, fit, de-noise, and evaluate diffusion-tensor cardiac MRI phantoms",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Phantom cohort generation.
    Phantom {
        #[command(subcommand)]
        command: PhantomCommand,
    },
    /// The two study drivers.
    Study {
        #[command(subcommand)]
        command: StudyCommand,
    },
    /// Figure rendering.
    Report {
        #[command(subcommand)]
        command: ReportCommand,
    },
}

#[derive(Subcommand)]
enum PhantomCommand {
    /// Simulate a cohort of synthetic subjects into a directory.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Cohort spec JSON (phantom geometry, protocol, noise); defaults apply
    /// for missing fields or when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output cohort directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of subjects (overrides the config).
    #[arg(long)]
    n: Option<usize>,
    /// Cohort seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum StudyCommand {
    /// Compare breath-hold budgets and repetition-sampling schemes against
    /// the all-repetition reference.
    Repetitions(RepetitionsArgs),
    /// Train the de-noising ladder and evaluate it on the held-out split.
    Denoise(DenoiseArgs),
}

#[derive(Args)]
struct RepetitionsArgs {
    #[arg(long)]
    cohort: PathBuf,
    /// Comma-separated budgets, e.g. 1BH,3BH,5BH.
    #[arg(long, default_value = "1BH,3BH,5BH")]
    budgets: String,
    /// Comma-separated schemes: F,C,L,R,F1.
    #[arg(long, default_value = "F,C,L,R,F1")]
    schemes: String,
    /// Output CSV; a .significance.csv and a .json land next to it.
    #[arg(long)]
    out: PathBuf,
    /// Seed for the Random scheme draws.
    #[arg(long, default_value_t = 11)]
    scheme_seed: u64,
    /// Registration upsampling factor.
    #[arg(long, default_value_t = 100)]
    upsample: usize,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long)]
    cohort: PathBuf,
    /// Comma-separated ladder rows out of
    /// BL,BL+CN,BL+T2T,BL+CN+T2T,BL+CN+multiT2T,WGUF,WGUFx5
    /// (the least-squares baseline row is always included).
    #[arg(long, default_value = "BL,BL+CN,BL+CN+T2T,BL+CN+multiT2T,WGUF,WGUFx5")]
    ladder: String,
    /// Breath-hold budget the de-noisers train on.
    #[arg(long, default_value = "1BH")]
    budget: String,
    /// Output CSV; a .json manifest lands next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 5)]
    critic_steps: usize,
    #[arg(long, default_value_t = 5)]
    ensemble_size: usize,
    #[arg(long, default_value_t = 11)]
    scheme_seed: u64,
    #[arg(long, default_value_t = 100)]
    upsample: usize,
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Render the four maps of a subject directory to SVG.
    Render(RenderArgs),
}

#[derive(Args)]
struct RenderArgs {
    /// Subject directory holding dwi.dtcf (or a maps.dtcf to render as-is).
    #[arg(long)]
    maps: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Registration upsampling factor when maps are computed from the stack.
    #[arg(long, default_value_t = 100)]
    upsample: usize,
}

fn parse_list<T>(
    s: &str,
    parse: impl Fn(&str) -> dtcmr_core::Result<T>,
) -> dtcmr_core::Result<Vec<T>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(parse)
        .collect()
}

fn run(cli: Cli) -> dtcmr_core::Result<()> {
    match cli.command {
        Command::Phantom {
            command: PhantomCommand::Generate(args),
        } => {
            let mut spec: CohortSpec = match &args.config {
                Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
                None => CohortSpec::default(),
            };
            if let Some(n) = args.n {
                spec.n_subjects = n;
            }
            if let Some(seed) = args.seed {
                spec.seed = seed;
            }
            let manifest = generate_cohort(&spec, &args.out)?;
            println!(
                "generated {} subjects under {}",
                manifest.subjects.len(),
                args.out.display()
            );
            Ok(())
        }
        Command::Study {
            command: StudyCommand::Repetitions(args),
        } => {
            let config = RepetitionsStudyConfig {
                budgets: parse_list(&args.budgets, |b| {
                    dtcmr_core::fitting::BreathHoldBudget::parse(b).map(|x| x.name)
                })?,
                schemes: parse_list(&args.schemes, SchemeVariant::parse)?,
                scheme_seed: args.scheme_seed,
                upsample: args.upsample,
            };
            let summary = run_repetitions_study(&args.cohort, &config, &args.out)?;
            println!(
                "wrote {} ({} rows, {} significance cells)",
                args.out.display(),
                summary.rows.len(),
                summary.significance.len()
            );
            Ok(())
        }
        Command::Study {
            command: StudyCommand::Denoise(args),
        } => {
            let config = DenoiseStudyConfig {
                ladder: parse_list(&args.ladder, LadderRow::parse)?,
                budget: args.budget.clone(),
                train: TrainConfig {
                    seed: args.seed,
                    epochs: args.epochs,
                    learning_rate: args.lr,
                    levels: args.levels,
                    base_width: args.width,
                    batch_size: args.batch_size,
                    critic_steps: args.critic_steps,
                    ..TrainConfig::default()
                },
                scheme_seed: args.scheme_seed,
                upsample: args.upsample,
                ensemble_size: args.ensemble_size,
            };
            let summary = run_denoise_study(&args.cohort, &config, &args.out)?;
            println!(
                "wrote {} ({} ladder rows incl. baseline)",
                args.out.display(),
                summary.rows.len()
            );
            Ok(())
        }
        Command::Report {
            command: ReportCommand::Render(args),
        } => {
            let maps_file = args.maps.join("maps.dtcf");
            let (maps, footer) = if maps_file.exists() {
                let maps = container::read_map_set(&maps_file)?;
                (maps, format!("maps {}", maps_file.display()))
            } else {
                let stack_path = args.maps.join("dwi.dtcf");
                if !stack_path.exists() {
                    return Err(Error::validation(format!(
                        "{} holds neither maps.dtcf nor dwi.dtcf",
                        args.maps.display()
                    )));
                }
                let stack = container::read_dwi_stack(&stack_path)?;
                let prepared = prepare_subject("subject", &stack, args.upsample)?;
                (
                    prepared.reference_maps.0,
                    format!("all-repetition reference | {}", args.maps.display()),
                )
            };
            write_map_svg(&args.out, &maps, &footer)?;
            println!("wrote {}", args.out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Numerical(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
