use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use rankcal::are::{dominance_check, DistributionSpec};
use rankcal::cli_io::{
    self, analysis_table, cmd_analyze, ingest_csv, study_table_text, AnalysisConfig,
};
use rankcal::randomization::{
    assign_minimization, assign_simple, assign_stratified_block, RandomizationScheme,
};
use rankcal::simlab;

#[derive(Parser)]
#[command(name = "rankcal", version, about = "Covariate-calibrated Wilcoxon two-sample inference")]
struct Cli {
    /// Master seed; drawn and printed when absent so runs stay reproducible.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for the Monte Carlo engine (fallback: RANKCAL_THREADS,
    /// then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze a trial dataset from CSV.
    Analyze(AnalyzeArgs),
    /// Run a Monte Carlo simulation study from a scenario config.
    Simulate(SimulateArgs),
    /// Generate treatment assignments for a covariate CSV.
    Randomize(RandomizeArgs),
    /// Pitman asymptotic relative efficiency report.
    Are(AreArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Analysis config (JSON or TOML).
    #[arg(long)]
    config: PathBuf,
    /// Input CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Where to write the JSON document (stdout gets the text table).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario config (JSON or TOML, keys mirroring the scenario fields).
    #[arg(long)]
    config: PathBuf,
    /// Where to write the metrics JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Known estimand truth; skips the Monte Carlo truth oracle.
    #[arg(long)]
    truth: Option<f64>,
}

#[derive(Args)]
struct RandomizeArgs {
    /// Covariate CSV with a header row.
    #[arg(long)]
    input: PathBuf,
    /// simple | stratified-block | minimization
    #[arg(long)]
    scheme: String,
    /// Comma-separated allocation proportions.
    #[arg(long)]
    pi: String,
    /// Block size (stratified-block only).
    #[arg(long)]
    block_size: Option<usize>,
    /// Biased-coin probability (minimization only).
    #[arg(long, default_value_t = 0.75)]
    p_mz: f64,
    /// Stratum column (stratified-block) or comma-separated factor columns
    /// (minimization).
    #[arg(long)]
    columns: Option<String>,
    /// Output CSV of (unit_id, arm).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AreArgs {
    /// normal | uniform | double-exponential | custom
    #[arg(long, default_value = "normal")]
    family: String,
    #[arg(long, default_value_t = 1.0)]
    variance: f64,
    /// Squared-density integral (custom family only).
    #[arg(long)]
    density_square_integral: Option<f64>,
    /// Comma-separated calibration coefficient vector.
    #[arg(long)]
    beta: Option<String>,
    /// Covariance matrix rows separated by ';', entries by ',' (identity when
    /// omitted).
    #[arg(long)]
    sigma: Option<String>,
    /// JSON payload carrying the same fields; overrides the flags.
    #[arg(long)]
    payload: Option<PathBuf>,
}

fn parse_f64_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("cannot parse `{s}` as a number"))
        })
        .collect()
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    match seed {
        Some(s) => s,
        None => {
            let s = rand::random::<u64>();
            eprintln!("no --seed given; using seed {s}");
            s
        }
    }
}

fn init_threads(threads: Option<usize>) {
    let threads = threads.or_else(|| {
        std::env::var("RANKCAL_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    #[cfg(feature = "parallel")]
    if let Some(t) = threads {
        // ignore the error if a global pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

fn write_or_print(out: &Option<PathBuf>, json: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, json)
            .with_context(|| format!("cannot write {}", path.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn run_analyze(args: &AnalyzeArgs, seed: Option<u64>) -> Result<()> {
    let config = AnalysisConfig::from_path(&args.config)?;
    let data = ingest_csv(&args.data, &config)?;
    let doc = cmd_analyze(&data, &config, seed)?;
    print!("{}", analysis_table(&doc));
    let json = serde_json::to_string_pretty(&doc)?;
    write_or_print(&args.out, &json)
}

fn run_simulate(args: &SimulateArgs, seed: Option<u64>) -> Result<()> {
    let mut scenario = cli_io::load_scenario(&args.config)?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let table = simlab::run_study(&scenario, args.truth)?;
    print!("{}", study_table_text(&table));
    let json = serde_json::to_string_pretty(&table)?;
    write_or_print(&args.out, &json)
}

fn run_randomize(args: &RandomizeArgs, seed: u64) -> Result<()> {
    let pi = parse_f64_list(&args.pi)?;
    let mut reader = csv::Reader::from_path(&args.input)
        .with_context(|| format!("cannot open {}", args.input.display()))?;
    let headers = reader.headers()?.clone();
    let records: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
    let n = records.len();

    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("missing column `{name}`"))
    };
    let discrete_column = |idx: usize| -> Vec<usize> {
        let mut seen = std::collections::HashMap::new();
        records
            .iter()
            .map(|r| {
                let label = r.get(idx).unwrap_or("").trim().to_string();
                let next = seen.len();
                *seen.entry(label).or_insert(next)
            })
            .collect()
    };

    let assignments = match args.scheme.as_str() {
        "simple" => assign_simple(n, &RandomizationScheme::simple(pi, seed))?,
        "stratified-block" => {
            let block_size = args.block_size.context("--block-size required")?;
            let col = args.columns.as_deref().context("--columns required")?;
            let strata = discrete_column(column(col.trim())?);
            assign_stratified_block(
                &strata,
                &RandomizationScheme::stratified_block(pi, block_size, seed),
            )?
        }
        "minimization" => {
            let cols = args.columns.as_deref().context("--columns required")?;
            let factor_columns: Vec<Vec<usize>> = cols
                .split(',')
                .map(|c| column(c.trim()).map(discrete_column))
                .collect::<Result<_>>()?;
            let levels: Vec<Vec<usize>> = (0..n)
                .map(|i| factor_columns.iter().map(|col| col[i]).collect())
                .collect();
            assign_minimization(&levels, &RandomizationScheme::minimization(pi, args.p_mz, seed))?
        }
        other => bail!("unknown scheme `{other}`"),
    };

    let mut out = String::from("unit_id,arm\n");
    for (i, arm) in assignments.iter().enumerate() {
        out.push_str(&format!("{},{arm}\n", i + 1));
    }
    match &args.out {
        Some(path) => std::fs::write(path, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct ArePayload {
    family: String,
    variance: f64,
    density_square_integral: Option<f64>,
    beta: Option<Vec<f64>>,
    sigma: Option<Vec<Vec<f64>>>,
}

fn run_are(args: &AreArgs) -> Result<()> {
    let (family, variance, integral, beta, sigma_rows) = match &args.payload {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let payload: ArePayload = serde_json::from_str(&text)?;
            (
                payload.family,
                payload.variance,
                payload.density_square_integral,
                payload.beta,
                payload.sigma,
            )
        }
        None => {
            let beta = args.beta.as_deref().map(parse_f64_list).transpose()?;
            let sigma = args
                .sigma
                .as_deref()
                .map(|text| {
                    text.split(';')
                        .map(parse_f64_list)
                        .collect::<Result<Vec<Vec<f64>>>>()
                })
                .transpose()?;
            (
                args.family.clone(),
                args.variance,
                args.density_square_integral,
                beta,
                sigma,
            )
        }
    };

    let dist = match family.as_str() {
        "normal" => DistributionSpec::Normal { variance },
        "uniform" => DistributionSpec::Uniform { variance },
        "double-exponential" | "double_exponential" => {
            DistributionSpec::DoubleExponential { variance }
        }
        "custom" => DistributionSpec::Custom {
            variance,
            density_square_integral: integral
                .context("custom family needs --density-square-integral")?,
        },
        other => bail!("unknown family `{other}`"),
    };

    let beta = beta.unwrap_or_else(|| vec![0.0]);
    let p = beta.len();
    let sigma = match sigma_rows {
        Some(rows) => {
            if rows.len() != p || rows.iter().any(|r| r.len() != p) {
                bail!("sigma must be {p} x {p} to match beta");
            }
            DMatrix::from_fn(p, p, |i, j| rows[i][j])
        }
        None => DMatrix::identity(p, p),
    };
    let report = dominance_check(&dist, &DVector::from_vec(beta), &sigma)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_threads(cli.threads);
    match &cli.command {
        Command::Analyze(args) => run_analyze(args, cli.seed),
        Command::Simulate(args) => run_simulate(args, cli.seed),
        Command::Randomize(args) => run_randomize(args, resolve_seed(cli.seed)),
        Command::Are(args) => run_are(args),
    }
}
