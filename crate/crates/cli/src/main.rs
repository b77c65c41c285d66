use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use molds_core::experiments::{bench_fig1, bench_fig2, Fig1Config, Fig2Config};
use molds_core::io::{
    create_file, parse_grid, read_dataset_file, read_json_file, read_model_file, write_assignments_csv,
    write_bench_csv, write_dataset_file, write_grid_csv, write_json_file, write_labels_csv, write_model_file,
    ModelFile, Provenance, ReportFile,
};
use molds_core::pipeline::{assign_trials, fit_random_em, fit_tensor_em, model_select, FitReport};
use molds_core::synth::{gen_dataset, gen_random_molds};
use molds_core::{EmConfig, GenSpec, MoldsError, StatePrior, Trajectory};

#[derive(Parser)]
#[command(name = "molds", version, about = "Fit mixtures of linear dynamical systems")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random ground-truth mixture and simulate a dataset from it.
    Generate {
        /// JSON generator spec.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth model file.
        #[arg(long)]
        truth: PathBuf,
        /// Labels CSV (default: next to --out with a `.labels.csv` suffix).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, env = "MOLDS_SEED")]
        seed: Option<u64>,
    },
    /// Fit a mixture to a dataset.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "K")]
        k: usize,
        #[arg(long)]
        n: usize,
        /// Markov length for the tensor initialization.
        #[arg(long = "L")]
        lag: Option<usize>,
        #[arg(long, value_enum, default_value_t = Init::Tensor)]
        init: Init,
        #[command(flatten)]
        em: EmArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Grid search over (K, n, L), scored by BIC on a validation split.
    Select {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// For example `K=2,3,4;n=2,3;L=12,16`.
        #[arg(long)]
        grid: String,
        #[command(flatten)]
        em: EmArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        table: PathBuf,
    },
    /// Per-trial responsibilities under a fitted model.
    Assign {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a synthetic benchmark.
    Bench {
        #[arg(long, value_enum)]
        experiment: Experiment,
        /// JSON config; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "MOLDS_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EmArgs {
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    /// Relative log-likelihood tolerance.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    ridge: f64,
    #[arg(long, env = "MOLDS_SEED", default_value_t = 0)]
    seed: u64,
}

impl EmArgs {
    fn config(&self) -> Result<EmConfig, Failure> {
        let cfg = EmConfig {
            max_iters: self.max_iters,
            rel_tol: self.tol,
            ridge: self.ridge,
            seed: self.seed,
            ..EmConfig::default()
        };
        cfg.validate().map_err(Failure::Config)?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Tensor,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Fig1,
    Fig2,
}

#[derive(Debug)]
enum Failure {
    /// Bad input or configuration.
    Config(MoldsError),
    /// The computation itself failed.
    Fit(MoldsError),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Fit(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "invalid input: {e}"),
            Failure::Fit(e) => write!(f, "fit failed: {e}"),
        }
    }
}

/// Output files are I/O, not fitting.
fn output<T>(r: molds_core::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Config)
}

fn load_dataset(path: &Path) -> Result<Vec<Trajectory>, Failure> {
    let trajs = read_dataset_file(path).map_err(Failure::Config)?;
    if trajs.is_empty() {
        return Err(Failure::Config(MoldsError::Parse(format!("{}: no trials", path.display()))));
    }
    Ok(trajs)
}

fn labels_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.labels.csv"))
}

fn generate(spec_path: &Path, out: &Path, truth_path: &Path, labels: Option<PathBuf>, seed: Option<u64>) -> Result<(), Failure> {
    let mut spec: GenSpec = read_json_file(spec_path).map_err(Failure::Config)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().map_err(Failure::Config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let truth = gen_random_molds(&spec, &mut rng).map_err(Failure::Config)?;
    let (trajs, z) = gen_dataset(&truth, spec.n_trials, spec.t_len, &mut rng).map_err(Failure::Fit)?;
    output(write_dataset_file(out, &trajs))?;
    let file = output(ModelFile::new(&truth, &StatePrior::standard(spec.n), Provenance::new("truth", spec.seed, None)))?;
    output(write_model_file(truth_path, &file))?;
    let labels = labels.unwrap_or_else(|| labels_path(out));
    output(create_file(&labels).and_then(|w| write_labels_csv(w, &trajs, &z)))?;
    log::info!("wrote {} trials to {}", trajs.len(), out.display());
    Ok(())
}

fn save_fit(fit: &FitReport, out: &Path) -> Result<(), Failure> {
    let lag = (fit.lag > 0).then_some(fit.lag);
    let prov = Provenance::new(fit.init_method.as_str(), fit.seed, lag);
    let file = output(ModelFile::new(&fit.model, &StatePrior::standard(fit.n), prov))?;
    output(write_model_file(out, &file))
}

#[allow(clippy::too_many_arguments)]
fn fit(
    data: &Path,
    k: usize,
    n: usize,
    lag: Option<usize>,
    init: Init,
    em: &EmArgs,
    out: &Path,
    report: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = em.config()?;
    let trajs = load_dataset(data)?;
    let fit = match init {
        Init::Tensor => {
            let lag = lag.ok_or_else(|| {
                Failure::Config(MoldsError::InvalidArgument {
                    field: "L",
                    reason: "required with --init tensor".into(),
                })
            })?;
            fit_tensor_em(&trajs, lag, n, k, &cfg)
        }
        Init::Random => fit_random_em(&trajs, n, k, &cfg),
    }
    .map_err(Failure::Fit)?;
    save_fit(&fit, out)?;
    if let Some(path) = report {
        output(write_json_file(path, &ReportFile::from(&fit)))?;
    }
    log::info!(
        "K={} n={} nll={:.6} bic={:.6} iterations={}",
        fit.k,
        fit.n,
        fit.nll,
        fit.bic,
        fit.em_trace.iterations_used
    );
    Ok(())
}

fn select(train: &Path, val: &Path, grid: &str, em: &EmArgs, out: &Path, table: &Path) -> Result<(), Failure> {
    let cfg = em.config()?;
    let grid = parse_grid(grid).map_err(Failure::Config)?;
    let train = load_dataset(train)?;
    let val = load_dataset(val)?;
    let sel = model_select(&train, &val, &grid, &cfg).map_err(Failure::Fit)?;
    output(create_file(table).and_then(|w| write_grid_csv(w, &sel.table)))?;
    save_fit(&sel.best, out)?;
    log::info!("selected K={} n={} L={} bic={:.6}", sel.best.k, sel.best.n, sel.best.lag, sel.best.bic);
    Ok(())
}

fn assign(model: &Path, data: &Path, out: &Path) -> Result<(), Failure> {
    let (model, _) = read_model_file(model).and_then(|f| f.to_model()).map_err(Failure::Config)?;
    let trajs = load_dataset(data)?;
    let rep = assign_trials(&model, &trajs).map_err(|e| match e.root() {
        MoldsError::Dimension { .. } => Failure::Config(e),
        _ => Failure::Fit(e),
    })?;
    output(create_file(out).and_then(|w| write_assignments_csv(w, &rep)))
}

fn bench(experiment: Experiment, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let records = match experiment {
        Experiment::Fig1 => {
            let mut cfg: Fig1Config = config.map(read_json_file).transpose().map_err(Failure::Config)?.unwrap_or_default();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.spec.validate().map_err(Failure::Config)?;
            bench_fig1(&cfg)
        }
        Experiment::Fig2 => {
            let mut cfg: Fig2Config = config.map(read_json_file).transpose().map_err(Failure::Config)?.unwrap_or_default();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.spec.validate().map_err(Failure::Config)?;
            cfg.em.validate().map_err(Failure::Config)?;
            bench_fig2(&cfg)
        }
    };
    output(create_file(out).and_then(|w| write_bench_csv(w, &records)))?;
    let failed = records.iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        log::warn!("{failed} of {} runs failed; see the status column", records.len());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| {
                Failure::Config(MoldsError::InvalidArgument {
                    field: "threads",
                    reason: e.to_string(),
                })
            })?;
    }
    match cli.command {
        Command::Generate {
            spec,
            out,
            truth,
            labels,
            seed,
        } => generate(&spec, &out, &truth, labels, seed),
        Command::Fit {
            data,
            k,
            n,
            lag,
            init,
            em,
            out,
            report,
        } => fit(&data, k, n, lag, init, &em, &out, report.as_deref()),
        Command::Select {
            train,
            val,
            grid,
            em,
            out,
            table,
        } => select(&train, &val, &grid, &em, &out, &table),
        Command::Assign { model, data, out } => assign(&model, &data, &out),
        Command::Bench {
            experiment,
            config,
            seed,
            out,
        } => bench(experiment, config.as_deref(), seed, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
