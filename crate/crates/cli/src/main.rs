use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tcav_core::cohort::{self, ColumnStats, MatchProblem, MatchReport};
use tcav_core::harness::{self, ExperimentConfig, Profile, RunOptions, Stage, OUTPUT_ROOT_ENV};
use tcav_core::{io, Error};

/// Concept activation vectors and temporal concept scores for recurrent
/// time-series models.
#[derive(Parser)]
#[command(name = "tcav", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; defaults to the selected profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "paper")]
    profile: String,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override one config leaf, e.g. `--set training.steps=500`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Output directory. TCAV_OUTPUT_ROOT takes precedence.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Generate(Common),
    /// Train the LSTM (runs earlier stages as needed).
    Train(Common),
    /// Evaluate the trained model on the test split.
    Eval(Common),
    /// Fit CAVs with significance and generalization reports.
    Cav(Common),
    /// tCA and CS trajectories with null bands.
    Scores(Common),
    /// Gradient and occlusion feature rankings.
    Attribute(Common),
    /// Full pipeline including reports.
    Run(Common),
    /// Re-emit reports from existing artifacts.
    Report(Common),
    /// Pick L1-closest controls for a concept cohort.
    Match(MatchArgs),
    /// Print the resolved config as JSON.
    Config(Common),
}

#[derive(Args)]
struct MatchArgs {
    /// CSV of concept rows (one row per unit, numeric columns).
    #[arg(long)]
    concept: PathBuf,
    /// CSV of candidate control rows.
    #[arg(long)]
    candidates: PathBuf,
    /// CSV whose column mean and std standardize both sides; defaults to
    /// concept and candidates pooled.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Output JSON report.
    #[arg(long)]
    out: PathBuf,
}

fn resolve(common: &Common) -> tcav_core::Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::profile(common.profile.parse::<Profile>()?),
    };
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    config = config.with_overrides(&overrides)?;
    if let Some(out) = &common.output {
        config.output_dir = out.clone();
    }
    if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()) {
        config.output_dir = PathBuf::from(root);
    }
    Ok(config)
}

fn run_stage(common: &Common, last: Stage) -> tcav_core::Result<()> {
    let config = resolve(common)?;
    let manifest = harness::run_until(&config, last, RunOptions { verbose: common.verbose })?;
    for s in &manifest.stages {
        println!("{:<10} {:?} {:.1}s", s.stage.name(), s.status, s.seconds);
    }
    println!("artifacts in {}", manifest.output_dir.display());
    Ok(())
}

fn read_matrix(path: &Path) -> tcav_core::Result<(Vec<f64>, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        let cells = match cells {
            Ok(c) => c,
            // header row
            Err(_) if i == 0 => continue,
            Err(_) => {
                return Err(Error::Invalid(format!("{}:{}: non-numeric cell", path.display(), i + 1)));
            }
        };
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(Error::Invalid(format!(
                    "{}:{}: expected {w} columns, found {}",
                    path.display(),
                    i + 1,
                    cells.len()
                )));
            }
            _ => {}
        }
        values.extend(cells);
    }
    let width = width.ok_or_else(|| Error::Invalid(format!("{} has no data rows", path.display())))?;
    Ok((values, width))
}

fn run_match(args: &MatchArgs) -> tcav_core::Result<()> {
    let (concept, m) = read_matrix(&args.concept)?;
    let (candidates, m2) = read_matrix(&args.candidates)?;
    if m != m2 {
        return Err(Error::Invalid(format!("concept has {m} columns, candidates {m2}")));
    }
    let stats = match &args.reference {
        Some(p) => {
            let (r, w) = read_matrix(p)?;
            if w != m {
                return Err(Error::Invalid(format!("reference has {w} columns, expected {m}")));
            }
            ColumnStats::from_rows(&r, m)?
        }
        None => {
            let pooled: Vec<f64> = concept.iter().chain(&candidates).copied().collect();
            ColumnStats::from_rows(&pooled, m)?
        }
    };
    let result = cohort::match_controls(&MatchProblem {
        concept,
        candidates,
        stats: stats.clone(),
    })?;
    let report = MatchReport::new(&result, &stats)?;
    io::write_json(&args.out, &report)?;
    println!("matched {} units, total L1 cost {}", report.pairs.len(), report.total_cost);
    Ok(())
}

fn dispatch(cli: &Cli) -> tcav_core::Result<()> {
    match &cli.command {
        Command::Generate(c) => run_stage(c, Stage::Generate),
        Command::Train(c) => run_stage(c, Stage::Train),
        Command::Eval(c) => run_stage(c, Stage::Evaluate),
        Command::Cav(c) => run_stage(c, Stage::Cav),
        Command::Scores(c) => run_stage(c, Stage::Scores),
        Command::Attribute(c) => run_stage(c, Stage::Attribute),
        Command::Run(c) => run_stage(c, Stage::Report),
        Command::Report(c) => {
            let config = resolve(c)?;
            harness::emit_reports(&config.output_dir)?;
            println!("reports in {}", config.output_dir.join(Stage::Report.dir()).display());
            Ok(())
        }
        Command::Match(m) => run_match(m),
        Command::Config(c) => {
            let config = resolve(c)?;
            println!("{}", serde_json::to_string_pretty(&config.to_value()).expect("json"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
