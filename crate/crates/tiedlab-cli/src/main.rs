//! `tiedlab` — command-line surface over the tied-operator kernels.
//!
//! Subcommands: `summary` (per-layer parameter/MAC accounting), `verify`
//! (seeded equivalence/gradient/counting suites), `bench` (two-path timing
//! CSV) and `train` (deterministic toy training run).
//!
//! Exit codes are a stable contract: 0 success, 1 verification failure,
//! 2 usage or parse error. Every randomized command takes an explicit
//! `--seed` (default from `TIEDLAB_SEED`, then 0) that is printed in the
//! output header, and reruns with identical flags produce byte-identical
//! primary outputs; wall-clock timings go to stderr or to the benchmark
//! CSV only.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use tiedlab_core::count::model_report;
use tiedlab_core::model::{build, make_toy_pair, ModelConfig};
use tiedlab_core::ops::ConvSpec;
use tiedlab_core::tensor::Tensor4;
use tiedlab_core::tied::{tbc_forward_direct, tbc_forward_fast, TiedConvWeights};
use tiedlab_core::train::{generate_dataset, train, TrainParams};
use tiedlab_core::verify::{counts_suite, equiv_suite, gradcheck_suite, SuiteCheck};
use tiedlab_core::{Error, Rng};

#[derive(Parser)]
#[command(
    name = "tiedlab",
    about = "Tied block convolution laboratory: summaries, verification, benchmarks, toy training",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer parameter and MAC table for a model config.
    Summary(SummaryArgs),
    /// Run the seeded property suites; exit 1 if any check fails.
    Verify(VerifyArgs),
    /// Time the direct vs folded tied-convolution paths and emit a CSV.
    Bench(BenchArgs),
    /// Train a config on the synthetic blob dataset.
    Train(TrainArgs),
    /// Write the bundled example configs to a directory.
    InitConfigs(InitConfigsArgs),
}

#[derive(Args)]
struct SummaryArgs {
    /// Model config JSON.
    config: PathBuf,
    /// Override the config's input shape, as `c,h,w`.
    #[arg(long, value_name = "C,H,W")]
    input_shape: Option<String>,
    /// Second config to compare against; adds ratio columns.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Also write the table as CSV to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Report FLOPs (2 x MACs) in the macs column.
    #[arg(long)]
    flops: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Which suite to run.
    #[arg(long, default_value = "all", value_parser = ["equiv", "gradcheck", "counts", "all"])]
    suite: String,
    /// Seeded instances per check.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// Base seed (default: TIEDLAB_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Operator to time (only `tbc` has two paths).
    #[arg(long, default_value = "tbc", value_parser = ["tbc"])]
    op: String,
    /// Comma-separated paths to time.
    #[arg(long, default_value = "direct,fast", value_delimiter = ',')]
    paths: Vec<String>,
    /// Channel count (c_in == c_out).
    #[arg(long, default_value_t = 256)]
    c: usize,
    /// Block counts to sweep.
    #[arg(long = "b-list", default_value = "2,4,8", value_delimiter = ',')]
    b_list: Vec<usize>,
    /// Square spatial extent.
    #[arg(long, default_value_t = 32)]
    hw: usize,
    /// Repetitions per timing (median reported).
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Write the timing CSV to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Seed for the benchmark inputs (default: TIEDLAB_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Model config JSON.
    config: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Dataset size before the 80/20 split.
    #[arg(long, default_value_t = 500)]
    samples: usize,
    /// Seed for dataset, shuffling and batching (default: TIEDLAB_SEED,
    /// then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Write per-epoch curves as CSV to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct InitConfigsArgs {
    /// Directory to write toy_tied.json, toy_untied.json and
    /// tied_se_demo.json into.
    #[arg(default_value = "configs")]
    dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Summary(args) => cmd_summary(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Train(args) => cmd_train(args),
        Command::InitConfigs(args) => cmd_init_configs(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

/// Fallback seed: TIEDLAB_SEED when set and parseable, 0 otherwise.
fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("TIEDLAB_SEED")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(0)
}

fn load_config(path: &PathBuf) -> Result<ModelConfig, Error> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    ModelConfig::from_json(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn write_file(path: &PathBuf, contents: &str) -> Result<(), Error> {
    fs::write(path, contents)
        .map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))
}

fn cmd_summary(args: SummaryArgs) -> Result<ExitCode, Error> {
    let mut config = load_config(&args.config)?;
    if let Some(shape) = &args.input_shape {
        let parts: Vec<usize> = shape
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| Error::Input(format!("--input-shape must be `c,h,w`, got `{shape}`")))?;
        if parts.len() != 3 {
            return Err(Error::Input(format!(
                "--input-shape must have three components, got `{shape}`"
            )));
        }
        config.input = [parts[0], parts[1], parts[2]];
        config.validate()?;
    }
    let baseline = match &args.baseline {
        Some(path) => Some(load_config(path)?),
        None => None,
    };
    let mut report = model_report(&config, 1, baseline.as_ref())?;
    if args.flops {
        for row in report.rows.iter_mut() {
            row.macs *= 2;
        }
        report.total_macs *= 2;
    }
    let unit = if args.flops { "flops" } else { "macs" };
    println!(
        "# tiedlab summary config={} input={}x{}x{} unit={unit}",
        config.name, config.input[0], config.input[1], config.input[2]
    );
    print!("{}", report.to_text());
    if let Some(csv) = &args.csv {
        write_file(csv, &report.to_csv())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn print_checks(checks: &[SuiteCheck]) -> bool {
    let mut all_ok = true;
    for check in checks {
        let status = if check.ok() { "pass" } else { "FAIL" };
        println!(
            "{:<32} {:>4}/{} {}  max_err {:.3e}",
            check.name, check.passed, check.total, status, check.max_err
        );
        if let Some(failure) = &check.first_failure {
            println!("    first failure: {failure}");
        }
        all_ok &= check.ok();
    }
    all_ok
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode, Error> {
    let seed = resolve_seed(args.seed);
    println!(
        "# tiedlab verify suite={} seeds={} seed={seed}",
        args.suite, args.seeds
    );
    let mut checks = Vec::new();
    if matches!(args.suite.as_str(), "equiv" | "all") {
        checks.extend(equiv_suite(args.seeds, seed));
    }
    if matches!(args.suite.as_str(), "gradcheck" | "all") {
        checks.extend(gradcheck_suite(args.seeds, seed));
    }
    if matches!(args.suite.as_str(), "counts" | "all") {
        checks.extend(counts_suite(args.seeds, seed));
    }
    let ok = print_checks(&checks);
    println!("RESULT {}", if ok { "pass" } else { "FAIL" });
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn median_ms(mut times: Vec<f64>) -> f64 {
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = times.len() / 2;
    if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    }
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode, Error> {
    if args.reps == 0 {
        return Err(Error::Input("--reps must be >= 1".into()));
    }
    for path in &args.paths {
        if !matches!(path.as_str(), "direct" | "fast") {
            return Err(Error::Input(format!(
                "unknown path `{path}` (expected direct or fast)"
            )));
        }
    }
    let seed = resolve_seed(args.seed);
    println!(
        "# tiedlab bench op={} c={} hw={} reps={} seed={seed}",
        args.op, args.c, args.hw, args.reps
    );
    let mut csv = String::from("op,path,B,c,hw,reps,median_ms\n");
    for &b in &args.b_list {
        let spec = ConvSpec::tied(args.c, args.c, 3, 1, 1, b, false);
        spec.validate()?;
        let mut rng = Rng::seeded(seed.wrapping_add(b as u64));
        let x = Tensor4::random(1, args.c, args.hw, args.hw, 1.0, &mut rng);
        let wts = TiedConvWeights::init(&spec, &mut rng)?;
        for path in &args.paths {
            let mut times = Vec::with_capacity(args.reps);
            for _ in 0..args.reps {
                let start = Instant::now();
                let out = match path.as_str() {
                    "direct" => tbc_forward_direct(&x, &spec, &wts)?,
                    _ => tbc_forward_fast(&x, &spec, &wts)?,
                };
                times.push(start.elapsed().as_secs_f64() * 1e3);
                std::hint::black_box(out.data()[0]);
            }
            csv.push_str(&format!(
                "{},{},{},{},{},{},{:.3}\n",
                args.op,
                path,
                b,
                args.c,
                args.hw,
                args.reps,
                median_ms(times)
            ));
        }
    }
    print!("{csv}");
    if let Some(path) = &args.csv {
        write_file(path, &csv)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode, Error> {
    let config = load_config(&args.config)?;
    let seed = resolve_seed(args.seed);
    println!(
        "# tiedlab train config={} epochs={} lr={} momentum={} batch={} samples={} seed={seed}",
        config.name, args.epochs, args.lr, args.momentum, args.batch, args.samples
    );
    let data = generate_dataset(seed, args.samples)?;
    let mut model = build(&config)?;
    let params = TrainParams {
        epochs: args.epochs,
        lr: args.lr,
        momentum: args.momentum,
        batch: args.batch,
        seed,
    };
    let result = train(&mut model, &data, &params)?;
    for (i, (loss, acc)) in result.epoch_loss.iter().zip(&result.train_acc).enumerate() {
        println!("epoch {:>3} loss={loss:.6} train_acc={acc:.4}", i + 1);
    }
    println!("{}", result.summary_line());
    eprintln!("wall time: {:.2}s", result.wall_secs);
    if let Some(path) = &args.csv {
        write_file(path, &result.curves_csv())?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Contents of the bundled example configs; `init-configs` writes them and
/// the repository ships the same files under `configs/`.
fn bundled_configs() -> Vec<(&'static str, String)> {
    let (tied, untied) = make_toy_pair(2).expect("toy pair");
    let demo = tied_se_demo_config();
    vec![
        ("toy_tied.json", tied.to_json_pretty()),
        ("toy_untied.json", untied.to_json_pretty()),
        ("tied_se_demo.json", demo.to_json_pretty()),
    ]
}

fn tied_se_demo_config() -> ModelConfig {
    use tiedlab_core::model::LayerNode;
    ModelConfig {
        name: "tied_se_demo".to_string(),
        input: [1, 16, 16],
        classes: 2,
        seed: 0,
        layers: vec![
            LayerNode::Conv {
                c_in: 1,
                c_out: 16,
                k: 3,
                stride: 1,
                pad: 1,
                bias: true,
            },
            LayerNode::Relu,
            LayerNode::TiedBottleneck {
                c_in: 16,
                planes: 8,
                blocks: 2,
                stride: 1,
                se: true,
                bias: true,
            },
            LayerNode::TiedSe {
                c: 32,
                r: 4,
                blocks: 2,
                bias: true,
            },
            LayerNode::Gap,
            LayerNode::Tfc {
                c_in: 32,
                c_out: 2,
                blocks: 2,
                bias: true,
            },
        ],
    }
}

fn cmd_init_configs(args: InitConfigsArgs) -> Result<ExitCode, Error> {
    fs::create_dir_all(&args.dir)
        .map_err(|e| Error::Input(format!("cannot create {}: {e}", args.dir.display())))?;
    for (name, contents) in bundled_configs() {
        let path = args.dir.join(name);
        write_file(&path, &contents)?;
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
