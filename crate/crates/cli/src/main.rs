use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hispec_cli::config::{parse_values, AblationParameter, ExperimentConfig};
use hispec_cli::{check, report, wall, CliError, Experiment, Format, RunResult, Strategy};

#[derive(Parser)]
#[command(name = "hispec", version, about = "Hierarchical speculative decoding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads (0 = all cores).
    #[arg(long, env = "HISPEC_JOBS", default_value_t = 0)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Grid over exit layers and lengths; writes sweep.<fmt>.
    Sweep(Common),
    /// Vary N_d or N_i at fixed layers; writes ablation.<fmt>.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        parameter: Option<Param>,
        /// `1,2,4` or `1..8`.
        #[arg(long)]
        values: Option<String>,
    },
    /// Vanilla vs single-level vs hierarchical; writes compare.<fmt>.
    Compare(Common),
    /// Structural verification-wall table; writes wall.csv.
    Wall(Common),
    /// Per-prompt state consistency and losslessness; writes check.csv.
    Check(Common),
    /// Sweep rendered as an L_d x L_i matrix; writes heatmap.dat.
    Heatmap(Common),
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Param {
    DraftLen,
    Window,
}

impl From<Param> for AblationParameter {
    fn from(p: Param) -> Self {
        match p {
            Param::DraftLen => AblationParameter::DraftLen,
            Param::Window => AblationParameter::Window,
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn experiment(common: &Common) -> Result<Experiment, CliError> {
    let cfg = load(common)?;
    let base = common.config.as_deref().and_then(Path::parent);
    Experiment::new(cfg, base)
}

fn emit(common: &Common, stem: &str, result: &RunResult) -> Result<(), CliError> {
    for s in &result.skipped {
        eprintln!("warning: skipped {}: {}", s.point, s.reason);
    }
    let path = report::write_table(&common.out, stem, common.format, &result.rows, &result.skipped)?;
    log::info!("wrote {} rows to {}", result.rows.len(), path.display());
    Ok(())
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Sweep(c) => emit(&c, "sweep", &experiment(&c)?.run_sweep()?),
        Command::Compare(c) => emit(&c, "compare", &experiment(&c)?.run_compare()?),
        Command::Ablate { common, parameter, values } => {
            let e = experiment(&common)?;
            let from_cfg = e.config.ablation.clone();
            let parameter = parameter
                .map(AblationParameter::from)
                .or(from_cfg.as_ref().map(|a| a.parameter))
                .ok_or_else(|| CliError::config("ablation needs --parameter or an `ablation` config block"))?;
            let values = match values {
                Some(v) => parse_values(&v)?,
                None => from_cfg.map(|a| a.values).unwrap_or_default(),
            };
            emit(&common, "ablation", &e.run_ablation(parameter, &values)?)
        }
        Command::Wall(c) => {
            let spec = load(&c)?.wall.unwrap_or_else(wall::default_spec);
            let rows = wall::wall_table(&spec)?;
            if let Some((lo, hi)) = wall::ratio_range(&rows) {
                println!("verification wall ratio: {lo:.3}x .. {hi:.3}x");
            }
            report::write_records(&c.out.join("wall.csv"), &rows)
        }
        Command::Check(c) => {
            let e = experiment(&c)?;
            let point = e
                .sweep_points()
                .into_iter()
                .find(|p| p.strategy == Strategy::Hispec)
                .ok_or_else(|| CliError::config("check needs a hispec strategy"))?;
            let cfg = e.hispec_config(&point);
            cfg.validate(e.n_layers())?;
            let rows = check::check_all(e.backend.as_ref(), &e.prompts, &cfg)?;
            report::write_records(&c.out.join("check.csv"), &rows)?;
            let failed = rows.iter().filter(|r| !r.passed()).count();
            println!("{point}: {} prompts, {failed} failed", rows.len());
            if failed > 0 {
                return Err(CliError::runtime(format!("{failed} prompts failed the state check")));
            }
            Ok(())
        }
        Command::Heatmap(c) => {
            let result = experiment(&c)?.run_sweep()?;
            let text = report::heatmap(&result.rows)
                .ok_or_else(|| CliError::config("heatmap needs at least one valid hispec point"))?;
            std::fs::create_dir_all(&c.out)?;
            report::write_file(&c.out.join("heatmap.dat"), &text)
        }
    }
}

fn jobs(command: &Command) -> usize {
    match command {
        Command::Sweep(c) | Command::Compare(c) | Command::Wall(c) | Command::Check(c) | Command::Heatmap(c) => c.jobs,
        Command::Ablate { common, .. } => common.jobs,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(jobs(&cli.command)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    };
    match pool.install(|| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
