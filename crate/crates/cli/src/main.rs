//! `gradapprox` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.

use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gradapprox::approx::MethodKind;
use gradapprox::bench::{self, BenchCase};
use gradapprox::experiment::{self, DatasetSpec, RunManifest, RunOutputs, TrainConfig};
use gradapprox::gradcheck::{self, GradcheckOptions, Precision};
use gradapprox::nn::{build_model, AdamConfig, ModelName};
use gradapprox::schedule::Schedule;
use gradapprox::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "gradapprox", version, about = "CNN training with approximated filter gradients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its manifest and per-epoch metrics.
    Train(TrainArgs),
    /// Time the dense filter gradient against the sparse kernel.
    Bench(BenchArgs),
    /// Finite-difference checks of every exact backward path.
    Gradcheck(GradcheckArgs),
    /// Print a schedule as a layer x phase grid.
    Schedule(ScheduleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    Cifar10,
    Mnist,
    /// Seeded class-prototype images, 32x32x3; no files needed.
    Synthetic,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "cnn2")]
    model: ModelName,
    #[arg(long, default_value = "full")]
    method: MethodKind,
    /// Built-in name (schedule1, schedule2, schedule3), `full`, or a schedule file.
    #[arg(long, default_value = "schedule1")]
    schedule: String,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "cifar10")]
    dataset: DatasetKind,
    #[arg(long, env = "GRADAPPROX_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    /// Train on a seeded subset of this many images.
    #[arg(long)]
    subset: Option<usize>,
    /// Evaluate on the first this-many test images.
    #[arg(long)]
    eval_limit: Option<usize>,
    #[arg(long)]
    no_augment: bool,
    #[arg(long, default_value = "metrics.csv")]
    metrics_out: PathBuf,
    /// Defaults to the metrics path with a `.json` extension.
    #[arg(long)]
    manifest_out: Option<PathBuf>,
    /// Optional SVG of the loss and accuracy curves.
    #[arg(long)]
    plot_out: Option<PathBuf>,
    /// Checkpoint stem; writes `<stem>.bin` and `<stem>.txt`.
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    /// Manifest of a previous run to report accuracy delta and speedup against.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long, default_value_t = AdamConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = AdamConfig::default().decay)]
    lr_decay: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// Shape `NxCIxHxWxCOxK`; repeatable. Defaults to shapes from the reference networks.
    #[arg(long = "case")]
    cases: Vec<String>,
    #[arg(long, default_value_t = 7)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path; the CSV goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run only the 64-bit checks.
    #[arg(long)]
    f64: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Built-in name (schedule1, schedule2, schedule3) or a schedule file.
    schedule: String,
    /// Number of conv layers; ignored when --model is given.
    #[arg(long, default_value_t = 5)]
    layers: usize,
    /// Take the layer count from this model.
    #[arg(long)]
    model: Option<ModelName>,
    /// Method placed in a built-in schedule's approximated cells.
    #[arg(long, default_value = "topk")]
    method: MethodKind,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Data { .. } | Error::Io(_) | Error::Json(_) => EXIT_DATA,
        Error::Check(_) | Error::NonFinite { .. } => EXIT_CHECK,
        Error::Shape(_) | Error::InvalidArgument(_) | Error::Parse { .. } => EXIT_USAGE,
    }
}

fn train(a: TrainArgs) -> Result<u8, Error> {
    let dataset = match a.dataset {
        DatasetKind::Cifar10 => DatasetSpec::Cifar10 { dir: a.data_dir },
        DatasetKind::Mnist => DatasetSpec::Mnist { dir: a.data_dir },
        DatasetKind::Synthetic => DatasetSpec::Synthetic {
            train: 6000,
            test: 1000,
            channels: 3,
            size: 32,
            noise: 1.0,
            seed: 0,
        },
    };
    let cfg = TrainConfig {
        method: a.method,
        schedule: a.schedule,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        augment: !a.no_augment,
        subset: a.subset,
        eval_limit: a.eval_limit,
        adam: AdamConfig { lr: a.lr, decay: a.lr_decay, ..AdamConfig::default() },
        ..TrainConfig::new(a.model, dataset)
    };
    let baseline = a.baseline.as_deref().map(RunManifest::read).transpose()?;
    let outputs = RunOutputs {
        manifest: Some(a.manifest_out.unwrap_or_else(|| a.metrics_out.with_extension("json"))),
        metrics: Some(a.metrics_out),
        plot: a.plot_out,
        checkpoint: a.checkpoint_out,
    };
    let outcome = experiment::run(&cfg, &outputs)?;
    let m = &outcome.manifest;
    println!(
        "approximated layers {:?} (topk fallbacks {:?}), approx_fraction {:.4}",
        m.approximated_layers, m.topk_fallback_layers, m.approx_fraction
    );
    println!("{}", outcome.summary(baseline.as_ref()));
    Ok(0)
}

fn run_bench(a: BenchArgs) -> Result<u8, Error> {
    let mut cases = if a.cases.is_empty() {
        bench::default_cases()
    } else {
        a.cases.iter().map(|c| c.parse()).collect::<Result<Vec<BenchCase>, _>>()?
    };
    for c in &mut cases {
        c.iters = a.iters;
        c.warmup = a.warmup;
    }
    let results = match &a.out {
        Some(p) => bench::sweep(&cases, a.seed, &mut File::create(p)?)?,
        None => bench::sweep(&cases, a.seed, &mut io::stdout().lock())?,
    };
    eprintln!(
        "{:>22} {:>12} {:>12} {:>12} {:>12} {:>8}",
        "case", "dense_us", "kernel_us", "transp_us", "approx_us", "speedup"
    );
    let mut code = 0;
    for (case, r) in &results {
        match r {
            Ok(r) => eprintln!(
                "{:>22} {:>12.1} {:>12.1} {:>12.1} {:>12.1} {:>8.2}",
                case.to_string(),
                r.dense_us,
                r.approx_kernel_us,
                r.transpose_us,
                r.approx_total_us,
                r.speedup
            ),
            Err(e) => {
                eprintln!("{:>22} error: {e}", case.to_string());
                code = code.max(exit_code(e));
            }
        }
    }
    Ok(code)
}

fn run_gradcheck(a: GradcheckArgs) -> Result<u8, Error> {
    let opts = GradcheckOptions { seed: a.seed, inject_fault: a.inject_fault };
    let results = gradcheck::run_all(opts, a.f64)?;
    let mut failed = 0;
    for r in &results {
        let bits = match r.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        let verdict = if r.passed { "ok" } else { "FAIL" };
        println!("{verdict:4} {bits} {:36} max_rel_err {:.3e} (tol {:.0e})", r.name, r.max_rel_err, r.tolerance);
        failed += usize::from(!r.passed);
    }
    println!("{} checks, {failed} failed", results.len());
    Ok(if failed == 0 { 0 } else { EXIT_CHECK })
}

fn run_schedule(a: ScheduleArgs) -> Result<u8, Error> {
    let layers = match a.model {
        Some(m) => build_model::<f32>(m, (3, 32, 32), 10, 0)?.conv_count(),
        None => a.layers,
    };
    let schedule = if a.schedule.starts_with("schedule") && !std::path::Path::new(&a.schedule).exists() {
        Schedule::named(&a.schedule, layers, a.method)?
    } else {
        let text = std::fs::read_to_string(&a.schedule).map_err(|e| Error::Data {
            path: a.schedule.clone().into(),
            message: format!("cannot read schedule: {e}"),
        })?;
        Schedule::parse(&text, layers)?
    };
    print!("{}", schedule.render_grid());
    println!("approximated layers {:?}", schedule.approximated_layers());
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Bench(a) => run_bench(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Schedule(a) => run_schedule(a),
    };
    match result {
        Ok(code) => {
            let _ = io::stdout().flush();
            ExitCode::from(code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
