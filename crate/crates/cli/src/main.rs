//! `fgse`: dataset generation, training, evaluation, graph statistics and
//! inference benchmarks for GNN-based PMU state estimation.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fgse_core::dataset::{generate, Dataset, GenerationConfig, Split, DEFAULT_SPREAD};
use fgse_core::factor_graph::{graph_stats, nominal_graph};
use fgse_core::grid_model::{resolve_case, PmuPlacement};
use fgse_core::neural::{Checkpoint, ClipMode};
use fgse_core::trainer::{
    bench_csv, bench_inference, check_disjoint, evaluate, sample_efficiency_sweep, sweep_csv, train, BenchCase,
    DatasetRef, EarlyStop, GraphSet, RunManifest, BENCH_RUNS, BENCH_WARMUP,
};
use fgse_core::{Error, GnnConfig, GnnModel, PowerSystem, TrainConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "fgse", version, about = "GNN state estimation over augmented factor graphs")]
struct Cli {
    /// Cap on parallel worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled dataset directory.
    Generate(GenerateArgs),
    /// Train a model and write checkpoints, the loss log and a run manifest.
    Train(TrainArgs),
    /// Test MSE of a checkpoint next to the approximative WLS baseline.
    Eval(EvalArgs),
    /// Augmented factor graph statistics as CSV.
    Stats(StatsArgs),
    /// WLS versus GNN inference time per system as CSV.
    Bench(BenchArgs),
    /// One training per training-set size; test and baseline MSE as CSV.
    Sweep(SweepArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ClipArg {
    Norm,
    Value,
}

#[derive(Args, Debug)]
struct NoiseArgs {
    /// Angle variance of every phasor.
    #[arg(long, default_value_t = 0.5)]
    variance: f64,
    /// Magnitude variance of every phasor.
    #[arg(long, default_value_t = 1e-2)]
    var_mag: f64,
    /// Relative load spread around the base case, in [0, 1).
    #[arg(long, default_value_t = DEFAULT_SPREAD)]
    spread: f64,
}

impl NoiseArgs {
    fn config(&self, count: usize, seed_base: u64) -> GenerationConfig {
        GenerationConfig {
            count,
            seed_base,
            var_mag: self.var_mag,
            var_ang: self.variance,
            spread: self.spread,
        }
    }
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Bundled case name or path to a case JSON file.
    #[arg(long)]
    case: String,
    #[arg(long)]
    count: usize,
    #[arg(long, env = "FGSE_SEED", default_value_t = 0)]
    seed: u64,
    /// Split whose seed range to draw from; splits never share seeds.
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    #[command(flatten)]
    noise: NoiseArgs,
    /// Output directory; must not exist.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    embedding_size: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
}

impl ModelArgs {
    fn config(&self) -> GnnConfig {
        GnnConfig {
            embedding_size: self.embedding_size,
            num_layers: self.layers,
            ..GnnConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct OptimArgs {
    #[arg(long, default_value_t = 150)]
    epochs: usize,
    #[arg(long, default_value_t = 4e-4)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    clip: f64,
    #[arg(long, value_enum, default_value_t = ClipArg::Norm)]
    clip_mode: ClipArg,
    /// Epochs without a new validation minimum before stopping.
    #[arg(long, default_value_t = 100)]
    patience: usize,
    #[arg(long, default_value_t = 1e-5)]
    min_delta: f64,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, env = "FGSE_SEED", default_value_t = 0)]
    seed: u64,
}

impl OptimArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            clip_norm: self.clip,
            clip_mode: match self.clip_mode {
                ClipArg::Norm => ClipMode::Norm,
                ClipArg::Value => ClipMode::Value,
            },
            max_epochs: self.epochs,
            early_stop: EarlyStop {
                patience: self.patience,
                min_delta: self.min_delta,
                window: self.window,
            },
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset directory.
    #[arg(long)]
    val: PathBuf,
    /// Case to check the datasets against (default: the name in the manifest).
    #[arg(long)]
    case: Option<String>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Run directory for best.ckpt, last.ckpt, train_log.csv and run.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    case: Option<String>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// One or more cases; one CSV row each.
    #[arg(long, required = true, num_args = 1..)]
    case: Vec<String>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, required = true, num_args = 1..)]
    case: Vec<String>,
    /// Checkpoints in the order of the cases (default: untrained models).
    #[arg(long, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, env = "FGSE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = BENCH_WARMUP)]
    warmup: usize,
    #[arg(long, default_value_t = BENCH_RUNS)]
    runs: usize,
    #[command(flatten)]
    noise: NoiseArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    case: String,
    #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    val_count: usize,
    #[arg(long, default_value_t = 100)]
    test_count: usize,
    #[command(flatten)]
    noise: NoiseArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_numerical));
            ExitCode::from(if numerical { EXIT_NUMERICAL } else { EXIT_VALIDATION })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn case(name_or_path: &str) -> anyhow::Result<PowerSystem> {
    resolve_case(name_or_path).with_context(|| format!("loading case {name_or_path}"))
}

/// The case given on the command line, or the one named in the manifest.
fn case_for(data: &Dataset, name_or_path: Option<&str>) -> anyhow::Result<PowerSystem> {
    let sys = case(name_or_path.unwrap_or(&data.manifest.system))?;
    data.check_system(&sys)?;
    Ok(sys)
}

fn load_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

/// Write `text` to `path` (stdout when `None`), refusing to replace a file.
fn emit(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
        Some(p) => {
            let mut f = fs::OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(p)
                .with_context(|| format!("creating {}", p.display()))?;
            f.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<()> {
    let sys = case(&a.case)?;
    let split: Split = a.split.into();
    let data = generate(&sys, &a.noise.config(a.count, split.seed_base(a.seed)), Some(split))?;
    data.save(&a.out)?;
    println!(
        "{}: {} samples of {} ({} discarded), seed base {}",
        a.out.display(),
        data.len(),
        sys.name,
        data.manifest.discards,
        data.manifest.seed_base
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    if a.out.exists() {
        bail!("run directory {} already exists", a.out.display());
    }
    let train_data = load_dataset(&a.data)?;
    let val_data = load_dataset(&a.val)?;
    let sys = case_for(&train_data, a.case.as_deref())?;
    val_data.check_system(&sys)?;
    check_disjoint(&[&train_data, &val_data])?;
    let model_cfg = a.model.config();
    let cfg = a.optim.config();
    let outcome = train(
        GnnModel::new(model_cfg, cfg.seed)?,
        &GraphSet::from_dataset(&train_data, &sys)?,
        &GraphSet::from_dataset(&val_data, &sys)?,
        &cfg,
    )?;

    let manifest = RunManifest {
        toolkit: fgse_core::TOOLKIT_VERSION.to_string(),
        command: std::env::args().collect::<Vec<_>>().join(" "),
        system: sys.name.clone(),
        system_digest: sys.digest(),
        model: model_cfg,
        train: cfg,
        datasets: vec![
            DatasetRef::new("train", &a.data.display().to_string(), &train_data),
            DatasetRef::new("val", &a.val.display().to_string(), &val_data),
        ],
    };
    let staging = staging_dir(&a.out)?;
    let write = || -> anyhow::Result<()> {
        let digest = Some(sys.digest());
        outcome.best.to_checkpoint(digest.clone())?.save(&staging.join("best.ckpt"))?;
        outcome.last.to_checkpoint(digest)?.save(&staging.join("last.ckpt"))?;
        fs::write(staging.join("train_log.csv"), outcome.log.to_csv())?;
        fs::write(staging.join("run.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    };
    if let Err(e) = write() {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    fs::rename(&staging, &a.out).with_context(|| format!("moving the run into {}", a.out.display()))?;
    println!(
        "{}: {} epochs ({:?}), best epoch {} with validation MSE {:e}",
        a.out.display(),
        outcome.log.final_epoch(),
        outcome.log.stop_reason,
        outcome.log.best_epoch,
        outcome.log.best_val_loss
    );
    Ok(())
}

fn staging_dir(out: &Path) -> anyhow::Result<PathBuf> {
    let name = out
        .file_name()
        .with_context(|| format!("{} has no final component", out.display()))?
        .to_string_lossy();
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
    fs::create_dir_all(&staging).with_context(|| format!("creating {}", staging.display()))?;
    Ok(staging)
}

fn load_model(path: &Path, data: &Dataset) -> anyhow::Result<GnnModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if let Some(digest) = &ck.system_digest {
        if *digest != data.manifest.system_digest {
            return Err(Error::DigestMismatch {
                expected: digest.clone(),
                found: data.manifest.system_digest.clone(),
            })
            .context("checkpoint and dataset come from different systems");
        }
    }
    Ok(GnnModel::from_checkpoint(&ck)?)
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let data = load_dataset(&a.data)?;
    let sys = case_for(&data, a.case.as_deref())?;
    let model = load_model(&a.checkpoint, &data)?;
    let mse = evaluate(&model, &GraphSet::from_dataset(&data, &sys)?)?;
    let baseline = data.baseline_mse(&sys)?;
    println!("mse={mse:e} baseline_mse={baseline:e}");
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> anyhow::Result<()> {
    let mut out = String::from("system,nodes,edges,avg_degree,avg_path_length,avg_clustering,redundancy\n");
    for name_or_path in &a.case {
        let sys = case(name_or_path)?;
        let g = nominal_graph(&sys, &PmuPlacement::maximal(&sys))?;
        let s = graph_stats(&g)?;
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4}\n",
            sys.name, s.nodes, s.edges, s.avg_degree, s.avg_path_length, s.avg_clustering, s.redundancy
        ));
    }
    emit(None, &out)
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<()> {
    if !a.checkpoint.is_empty() && a.checkpoint.len() != a.case.len() {
        bail!("give one checkpoint per case ({} cases, {} checkpoints)", a.case.len(), a.checkpoint.len());
    }
    let mut prepared = Vec::new();
    for (k, name_or_path) in a.case.iter().enumerate() {
        let sys = case(name_or_path)?;
        let data = generate(&sys, &a.noise.config(a.count, Split::Test.seed_base(a.seed)), Some(Split::Test))?;
        let gnn = match a.checkpoint.get(k) {
            Some(path) => load_model(path, &data)?,
            None => GnnModel::new(a.model.config(), a.seed)?,
        };
        prepared.push((sys.n_buses(), data.models(&sys)?, data.graphs(&sys)?, gnn));
    }
    let cases: Vec<BenchCase<'_>> = prepared
        .iter()
        .map(|(n, models, graphs, gnn)| BenchCase {
            n: *n,
            models,
            graphs,
            gnn,
        })
        .collect();
    let rows = bench_inference(&cases, a.warmup, a.runs)?;
    emit(a.out.as_deref(), &bench_csv(&rows))
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<()> {
    let sys = case(&a.case)?;
    let cfg = a.optim.config();
    let largest = a.sizes.iter().copied().max().context("--sizes is empty")?;
    let gen = |split: Split, count| generate(&sys, &a.noise.config(count, split.seed_base(cfg.seed)), Some(split));
    let (train_data, val_data, test_data) =
        (gen(Split::Train, largest)?, gen(Split::Val, a.val_count)?, gen(Split::Test, a.test_count)?);
    let rows = sample_efficiency_sweep(&sys, &train_data, &val_data, &test_data, &a.sizes, &a.model.config(), &cfg)?;
    emit(a.out.as_deref(), &sweep_csv(&rows))
}
