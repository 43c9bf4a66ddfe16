use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ktreg::bench::{
    default_ablation_modes, emit_ablation, emit_grid, emit_results, grid_search, run_ablation, run_trial, sim_data,
    Estimator, GridSpec, GridTarget, Method, OutputFormat, SimProtocol, TrialConfig, DEFAULT_SIM_SIZE,
};
use ktreg::data::{load_csv, split, standardize, truncate_pow4_indices, LabeledDataset, TargetColumn, TargetScaling};
use ktreg::kernels::{KernelFamily, KernelSpec, MetaKernelSpec, MetaMode};
use ktreg::rng::StreamKey;
use ktreg::thinning::{kt_compress_pp, ThinningConfig, DEFAULT_DELTA};
use ktreg::{Error, Result};

const TUNE_STREAM: u64 = 0x7475;

#[derive(Parser)]
#[command(name = "ktreg", version, about = "Kernel-thinned Nadaraya-Watson and kernel ridge regression")]
struct Cli {
    /// Time trials with no co-scheduled work; trials always run one at a time
    #[arg(long, global = true)]
    strict_timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run seeded trials of one method on the synthetic problem
    Simulate(SimulateArgs),
    /// Thin a CSV dataset with KT-Compress++ and write the coreset indices
    Thin(ThinArgs),
    /// Compare thinning meta-kernels on the synthetic problem
    Ablation(AblationArgs),
    /// Run one method on a CSV dataset
    Bench(BenchArgs),
    /// Grid-search bandwidth (and ridge) on simulated or CSV data
    Gridsearch(GridArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    method: Method,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long)]
    kernel: KernelFamily,
    #[arg(long)]
    h: f64,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "csv")]
    format: OutputFormat,
    #[arg(long, default_value_t = DEFAULT_SIM_SIZE)]
    test_size: usize,
}

#[derive(Args)]
struct ThinArgs {
    #[arg(long)]
    input: PathBuf,
    /// Label column (name or 0-based index); defaults to the last column
    #[arg(long)]
    target: Option<TargetColumn>,
    /// The file has no header line
    #[arg(long)]
    no_header: bool,
    #[arg(long)]
    kernel: KernelFamily,
    #[arg(long)]
    h: f64,
    #[arg(long)]
    meta: MetaMode,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    /// Compression level override
    #[arg(long)]
    g: Option<u32>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblationArgs {
    #[arg(long)]
    estimator: Estimator,
    #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
    n_list: Vec<usize>,
    /// Number of evaluation seeds
    #[arg(long)]
    trials: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Base kernel; Wendland for nw and Gaussian for krr by default
    #[arg(long)]
    kernel: Option<KernelFamily>,
    #[arg(long, value_delimiter = ',')]
    h_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 100)]
    trials_per_cell: usize,
    #[arg(long, default_value_t = DEFAULT_SIM_SIZE)]
    validation_size: usize,
    #[arg(long, default_value_t = DEFAULT_SIM_SIZE)]
    test_size: usize,
}

#[derive(Args)]
struct CsvInput {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    target: TargetColumn,
    #[arg(long)]
    no_header: bool,
    /// Standardize covariates with training-set statistics
    #[arg(long)]
    standardize: bool,
    /// Also standardize labels with training-set statistics
    #[arg(long)]
    standardize_target: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    input: CsvInput,
    #[arg(long, conflicts_with = "split")]
    test: Option<PathBuf>,
    /// Training fraction when no test file is given
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    #[arg(long)]
    method: Method,
    #[arg(long)]
    kernel: KernelFamily,
    #[arg(long)]
    h: f64,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "csv")]
    format: OutputFormat,
    /// Report the 0.5-threshold classification error instead of MSE
    #[arg(long)]
    binary_labels: bool,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    method: Method,
    #[arg(long)]
    kernel: KernelFamily,
    #[arg(long, value_delimiter = ',', required = true)]
    h_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 100)]
    trials_per_cell: usize,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Training size on simulated data
    #[arg(long, required_unless_present = "train")]
    n: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SIM_SIZE)]
    validation_size: usize,
    /// Tune on a CSV file instead, holding out 20% for validation
    #[arg(long, requires = "target")]
    train: Option<PathBuf>,
    #[arg(long)]
    target: Option<TargetColumn>,
    #[arg(long)]
    no_header: bool,
    #[arg(long)]
    standardize: bool,
}

fn seeds_from(seed: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|t| seed.wrapping_add(t)).collect()
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let base = KernelSpec::new(a.kernel, a.h)?;
    let mut results = Vec::with_capacity(a.trials);
    for s in seeds_from(a.seed, a.trials) {
        let data = sim_data(a.n, s, 1, a.test_size)?;
        let cfg = TrialConfig::new(a.method, a.n, base, a.lambda, s)?.with_delta(a.delta)?;
        let r = run_trial(&cfg, &data.train, &data.test)?;
        log::info!("{} seed {s}: mse {:.6}, train {:.4}s", a.method, r.mse, r.train_seconds);
        results.push(r);
    }
    emit_results(&results, a.format, &a.out)
}

fn thin(a: ThinArgs) -> Result<()> {
    let target = a.target.unwrap_or(TargetColumn::Last);
    let data = load_csv(&a.input, &target, !a.no_header)?;
    let (work, rows) = truncate_pow4_indices(&data, a.seed)?;
    let mut cfg = ThinningConfig::new(MetaKernelSpec::new(a.meta, KernelSpec::new(a.kernel, a.h)?), a.delta, a.seed)?;
    cfg.g_override = a.g;
    let coreset = kt_compress_pp(&work, &cfg)?.remap(&rows, data.len())?;
    log::info!("kept {} of {} rows", coreset.len(), data.len());
    coreset.write_csv(std::io::BufWriter::new(std::fs::File::create(&a.out)?))
}

fn ablation(a: AblationArgs) -> Result<()> {
    let family = a.kernel.unwrap_or(match a.estimator {
        Estimator::Nw => KernelFamily::Wendland0,
        Estimator::Krr => KernelFamily::Gaussian,
    });
    let mut grid = GridSpec::default_for(a.estimator);
    if let Some(h) = a.h_grid {
        grid.h_values = h;
    }
    if a.lambda_grid.is_some() {
        grid.lambda_values = a.lambda_grid;
    }
    grid.trials_per_cell = a.trials_per_cell;
    grid.validation_size = a.validation_size;
    let protocol = SimProtocol {
        grid,
        test_size: a.test_size,
        tune_seed: StreamKey::new(a.seed).child(TUNE_STREAM).seed(),
    };
    let seeds = seeds_from(a.seed, a.trials);
    let rows = run_ablation(a.estimator, family, &a.n_list, &default_ablation_modes(a.estimator), &protocol, &seeds)?;
    emit_ablation(&rows, &a.out)
}

/// Loads the training file and optionally a test file, applying
/// training-set standardization to both.
fn load_pair(input: &CsvInput, test: Option<&PathBuf>, train_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let full = load_csv(&input.train, &input.target, !input.no_header)?;
    let (mut train, mut test) = match test {
        Some(p) => (full, load_csv(p, &input.target, !input.no_header)?),
        None => split(&full, (train_fraction, 1.0 - train_fraction), seed)?,
    };
    if input.standardize {
        let (z, stats) = standardize(&train)?;
        test = stats.apply(&test)?;
        train = z;
    }
    if input.standardize_target {
        let t = TargetScaling::fit(&train)?;
        train = t.apply(&train)?;
        test = t.apply(&test)?;
    }
    Ok((train, test))
}

fn bench(a: BenchArgs) -> Result<()> {
    if !(a.split > 0.0 && a.split < 1.0) {
        return Err(Error::Input(format!("split must lie in (0, 1), got {}", a.split)));
    }
    let (train, test) = load_pair(&a.input, a.test.as_ref(), a.split, a.seed)?;
    let base = KernelSpec::new(a.kernel, a.h)?;
    let mut results = Vec::with_capacity(a.trials);
    for s in seeds_from(a.seed, a.trials) {
        let cfg = TrialConfig::new(a.method, train.len(), base, a.lambda, s)?
            .with_delta(a.delta)?
            .with_binary_labels(a.binary_labels);
        let r = run_trial(&cfg, &train, &test)?;
        log::info!("{} seed {s}: mse {:.6}, train {:.4}s", a.method, r.mse, r.train_seconds);
        results.push(r);
    }
    emit_results(&results, a.format, &a.out)
}

fn gridsearch(a: GridArgs) -> Result<()> {
    let (train, validation) = match (&a.train, a.n) {
        (Some(path), _) => {
            let input = CsvInput {
                train: path.clone(),
                target: a.target.clone().expect("required by clap"),
                no_header: a.no_header,
                standardize: a.standardize,
                standardize_target: false,
            };
            load_pair(&input, None, 0.8, a.seed)?
        }
        (None, Some(n)) => {
            let d = sim_data(n, a.seed, a.validation_size, 1)?;
            (d.train, d.validation)
        }
        (None, None) => return Err(Error::Input("either --n or --train is required".into())),
    };
    let grid = GridSpec {
        h_values: a.h_grid,
        lambda_values: a.lambda_grid,
        trials_per_cell: a.trials_per_cell,
        validation_size: validation.len(),
    };
    let mut target = GridTarget::new(a.method, a.kernel);
    target.delta = a.delta;
    let outcome = grid_search(&target, &grid, &train, &validation, a.seed)?;
    match outcome.best_lambda {
        Some(l) => println!("best h = {}, lambda = {l}", outcome.best_h),
        None => println!("best h = {}", outcome.best_h),
    }
    emit_grid(&outcome, &a.out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Thin(a) => thin(a),
        Command::Ablation(a) => ablation(a),
        Command::Bench(a) => bench(a),
        Command::Gridsearch(a) => gridsearch(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.strict_timing {
        log::debug!("strict timing: trials run sequentially on the main thread");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
