use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use multimatch::config::parse_grid;
use multimatch::error::Error;
use multimatch::pipeline::{
    analyze, load_csv, AnalysisOptions, ReferenceChoice, SeMethod, SigmaChoice,
};
use multimatch::report::{all_tables, table1, table2, table3, table4, Table};
use multimatch::sim::{run_factorial, SimReport};
use multimatch::Variant;

#[derive(Parser)]
#[command(
    name = "multimatch",
    about = "Pairwise treatment-effect estimation for multiple nominal treatments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze a CSV: matching estimates, global test, intervals, overlap.
    Analyze(AnalyzeArgs),
    /// Run a simulation grid, writing per-cell results to a store.
    Simulate(SimulateArgs),
    /// Render summary tables from a results store.
    Report(ReportArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Treatment column name.
    #[arg(long)]
    treatment: String,
    /// Outcome column name.
    #[arg(long)]
    outcome: String,
    /// Comma-separated covariate columns; default: all other columns.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Reference treatment label, or "all" for every group plus the overall
    /// sample-share-weighted effects.
    #[arg(long, default_value = "all")]
    reference: String,
    /// Point estimator: basic | bc
    #[arg(long, default_value = "bc")]
    estimator: String,
    /// Standard errors: new | randomization
    #[arg(long, default_value = "new")]
    se: String,
    /// Conditional-variance estimator: residual | raw
    #[arg(long, default_value = "residual")]
    sigma: String,
    /// Matches per unit.
    #[arg(long, default_value_t = 1)]
    m: usize,
    /// Within-group matches for the variance estimator.
    #[arg(long = "J", alias = "j", default_value_t = 1)]
    j: usize,
    /// k-means clusters for vector matching.
    #[arg(long = "K", alias = "k", default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Overlap flag threshold on fitted scores.
    #[arg(long, default_value_t = 0.01)]
    eta: f64,
    /// Seed for the k-means restarts in vector matching.
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Include pairwise covariate interactions in the outcome regressions.
    #[arg(long, default_value_t = false)]
    interactions: bool,
    /// Output directory for the JSON reports.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Grid config file (key = value lines under [section] headers).
    #[arg(long)]
    grid: PathBuf,
    /// Results store; completed cells found here are not recomputed.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (0 = all cores). No effect on results.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Override the seed of every cell in the grid.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Results store produced by `simulate`.
    #[arg(long)]
    store: PathBuf,
    /// Emit a single table (1-4); default: all.
    #[arg(long)]
    table: Option<u8>,
    /// Directory for the CSV copies; default: the store directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// 2 = input/validation problem, 3 = numerical failure.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NotConverged { .. }
        | Error::Separation(_)
        | Error::SingularCovariance(_)
        | Error::SingularEffectCovariance(_)
        | Error::RankDeficient { .. }
        | Error::NotPositiveDefinite => 3,
        _ => 2,
    }
}

fn write_json<T: serde::Serialize>(dir: &PathBuf, name: &str, value: &T) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

fn run_analyze(args: &AnalyzeArgs) -> Result<(), Error> {
    let variant = match args.estimator.as_str() {
        "basic" => Variant::Basic,
        "bc" | "bias-corrected" => Variant::BiasCorrected,
        other => return Err(Error::Config(format!("unknown estimator {other:?}"))),
    };
    let se = match args.se.as_str() {
        "new" | "theorem-1" => SeMethod::Theorem1,
        "randomization" => SeMethod::Randomization,
        other => return Err(Error::Config(format!("unknown SE method {other:?}"))),
    };
    let sigma = match args.sigma.as_str() {
        "raw" => SigmaChoice::Raw,
        "residual" => SigmaChoice::Residual,
        other => return Err(Error::Config(format!("unknown sigma method {other:?}"))),
    };
    let reference = if args.reference == "all" {
        ReferenceChoice::All
    } else {
        ReferenceChoice::Label(args.reference.clone())
    };
    let opts = AnalysisOptions {
        reference,
        variant,
        se,
        sigma,
        m: args.m,
        j_within: args.j,
        k_clusters: args.k,
        alpha: args.alpha,
        eta: args.eta,
        seed: args.seed,
        interactions: args.interactions,
    };
    let ds = load_csv(
        &args.data,
        &args.treatment,
        &args.outcome,
        args.covariates.as_deref(),
    )?;
    let out = analyze(&ds, &opts)?;
    write_json(&args.out, "estimate.json", &out.estimate)?;
    write_json(&args.out, "inference.json", &out.inference)?;
    write_json(&args.out, "overlap.json", &out.overlap)?;
    std::fs::write(args.out.join("summary.txt"), &out.summary)?;
    print!("{}", out.summary);
    Ok(())
}

fn run_simulate(args: &SimulateArgs) -> Result<(), Error> {
    #[cfg(feature = "parallel")]
    if args.workers > 0 {
        // Ignored if a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(args.workers)
            .build_global();
    }
    let text = std::fs::read_to_string(&args.grid)?;
    let mut grid = parse_grid(&text)?;
    if let Some(seed) = args.seed {
        for cell in &mut grid {
            cell.seed = seed;
        }
    }
    let result = run_factorial(&grid, Some(&args.out))?;
    for (i, table) in all_tables(&result.reports)?.iter().enumerate() {
        std::fs::write(args.out.join(format!("table{}.csv", i + 1)), &table.csv)?;
        std::fs::write(args.out.join(format!("table{}.txt", i + 1)), &table.text)?;
    }
    eprintln!(
        "{} cell(s) complete; store: {}",
        result.reports.len(),
        args.out.display()
    );
    Ok(())
}

fn load_store(dir: &PathBuf) -> Result<Vec<SimReport>, Error> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("cell-") && n.ends_with(".json"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!(
            "no cell-*.json results in {}",
            dir.display()
        )));
    }
    let mut reports = Vec::with_capacity(files.len());
    for path in files {
        let text = std::fs::read_to_string(&path)?;
        let report: SimReport = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!(
                "malformed store entry {}: {e}; delete it and rerun simulate",
                path.display()
            ))
        })?;
        reports.push(report);
    }
    Ok(reports)
}

fn run_report(args: &ReportArgs) -> Result<(), Error> {
    let reports = load_store(&args.store)?;
    let tables: Vec<(u8, Table)> = match args.table {
        Some(n @ 1..=4) => {
            let t = match n {
                1 => table1(&reports)?,
                2 => table2(&reports)?,
                3 => table3(&reports)?,
                _ => table4(&reports)?,
            };
            vec![(n, t)]
        }
        Some(n) => return Err(Error::Config(format!("table must be 1-4, got {n}"))),
        None => all_tables(&reports)?
            .into_iter()
            .enumerate()
            .map(|(i, t)| (i as u8 + 1, t))
            .collect(),
    };
    let out_dir = args.out.clone().unwrap_or_else(|| args.store.clone());
    std::fs::create_dir_all(&out_dir)?;
    for (n, table) in &tables {
        std::fs::write(out_dir.join(format!("table{n}.csv")), &table.csv)?;
        println!("{}", table.text);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Analyze(args) => run_analyze(args),
        Command::Simulate(args) => run_simulate(args),
        Command::Report(args) => run_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
