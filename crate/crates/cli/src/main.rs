//! Command-line front end: verification suite, synthetic experiments,
//! the robustness comparison, MNIST training, and dataset checks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tdlrt::data::{parse_manifest, sha256_hex, verify_manifest, ManifestEntry, VerifyStatus};
use tdlrt::harness::{
    load_network, locate_mnist, run_lambda_sweep, run_mnist, run_robustness, run_synthetic,
    run_tau_sweep, save_network, slope_loglog, write_csv, MnistRunConfig, OptimizerKind,
    RobustnessOutcome, SyntheticRun,
};
use tdlrt::verify::{run_all, CheckStatus};

#[derive(Parser)]
#[command(
    name = "tdlrt",
    about = "Rank-adaptive dynamical low-rank training of Tucker tensor layers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full property suite and print a pass/fail table.
    Verify(VerifyArgs),
    /// Quadratic low-rank recovery with a selectable optimizer.
    Synthetic(SyntheticArgs),
    /// Multi-seed robustness comparison against naive factor descent.
    Robustness(RobustnessArgs),
    /// Train the Tucker LeNet on MNIST.
    Mnist(MnistArgs),
    /// Locate the MNIST files and verify their SHA-256 digests.
    FetchData(FetchArgs),
}

fn default_data_dir() -> PathBuf {
    std::env::var_os("TDLRT_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

#[derive(Args)]
struct VerifyArgs {
    /// Dataset root for the optional MNIST file checks.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SyntheticArgs {
    /// Comma-separated tensor shape, e.g. 20,20,20.
    #[arg(long, value_delimiter = ',', default_value = "20,20,20")]
    shape: Vec<usize>,
    /// Comma-separated target Tucker ranks.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    true_ranks: Vec<usize>,
    /// Comma-separated initial ranks (rank overestimation).
    #[arg(long, value_delimiter = ',', default_value = "10,10,10")]
    init_ranks: Vec<usize>,
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// tdlrt | tdlrt-fixed | tdlrt-ref | naive | rgd | full
    #[arg(long, default_value = "tdlrt")]
    optimizer: String,
    /// Geometric decay ratio of the initialization spectra (0.1 = decades).
    #[arg(long, default_value_t = 0.7)]
    init_decay: f64,
    /// Per-step gradient noise (simulated mini-batch sampling).
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
    /// When set, lr_t = lr / (1 + t / HALFLIFE).
    #[arg(long)]
    lr_decay_halflife: Option<f64>,
    /// Also run the step-size and tolerance sweeps and report slopes.
    #[arg(long)]
    sweep: bool,
    /// Output CSV path.
    #[arg(long, default_value = "synthetic.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct RobustnessArgs {
    #[arg(long, default_value_t = 10)]
    seed_count: usize,
    /// Spectrum profile of the initialization: `decade` or a decay ratio.
    #[arg(long, default_value = "decade")]
    spectrum: String,
    /// Target loss as a fraction of the initial loss.
    #[arg(long, default_value_t = 0.02)]
    target_loss: f64,
    #[arg(long, value_delimiter = ',', default_value = "10,10,10")]
    shape: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "3,3,3")]
    true_ranks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "8,8,8")]
    init_ranks: Vec<usize>,
    #[arg(long, default_value_t = 2000)]
    max_steps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
    #[arg(long, default_value_t = 0.1)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path (method,seed,step,loss rows).
    #[arg(long, default_value = "robustness.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct MnistArgs {
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    subset: usize,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.1)]
    momentum: f64,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Worker threads for batch gradients; any value gives identical results.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value = "mnist.csv")]
    out: PathBuf,
    /// Save the trained network to this checkpoint file.
    #[arg(long)]
    save_checkpoint: Option<PathBuf>,
    /// Skip training: load a checkpoint and report its test accuracy.
    #[arg(long)]
    eval_checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct FetchArgs {
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Manifest of expected SHA-256 digests; defaults to the built-in list
    /// for the four standard gzipped files.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn parse_usizes_ok(name: &str, v: &[usize]) -> Result<(), String> {
    if v.is_empty() || v.contains(&0) {
        return Err(format!("--{name} must list positive integers"));
    }
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode, String> {
    let dir = args.data_dir.or_else(|| {
        let d = default_data_dir();
        d.exists().then_some(d)
    });
    let results = run_all(dir.as_deref());
    let mut failed = 0usize;
    println!("{:<42} {:>8} {:>10}", "check", "status", "time");
    println!("{}", "-".repeat(62));
    for r in &results {
        let (status, extra) = match &r.status {
            CheckStatus::Pass => ("PASS", String::new()),
            CheckStatus::Skip(msg) => ("SKIP", format!("  ({msg})")),
            CheckStatus::Fail(msg) => {
                failed += 1;
                ("FAIL", format!("  ({msg})"))
            }
        };
        println!("{:<42} {:>8} {:>8}ms{extra}", r.name, status, r.millis);
    }
    println!("{}", "-".repeat(62));
    if failed == 0 {
        println!("all checks passed");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{failed} check(s) failed");
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_synthetic(args: SyntheticArgs) -> Result<ExitCode, String> {
    parse_usizes_ok("shape", &args.shape)?;
    parse_usizes_ok("true-ranks", &args.true_ranks)?;
    parse_usizes_ok("init-ranks", &args.init_ranks)?;
    if args.shape.len() != args.true_ranks.len() || args.shape.len() != args.init_ranks.len() {
        return Err("--shape, --true-ranks and --init-ranks must agree in length".into());
    }
    let mut run = SyntheticRun::new(
        args.shape.clone(),
        args.true_ranks.clone(),
        args.init_ranks.clone(),
    );
    run.tau = args.tau;
    run.lr = args.lr;
    run.momentum = args.momentum;
    run.steps = args.steps;
    run.seed = args.seed;
    run.optimizer = OptimizerKind::parse(&args.optimizer).map_err(|e| e.to_string())?;
    run.init_decay = args.init_decay;
    run.noise_std = args.noise_std;
    run.lr_decay_halflife = args.lr_decay_halflife;

    let out = run_synthetic(&run).map_err(|e| e.to_string())?;
    write_csv(&args.out, &out.records).map_err(|e| e.to_string())?;
    println!("optimizer           : {}", run.optimizer.name());
    println!("steps               : {}", args.steps);
    println!("final loss          : {:.6e}", out.losses.last().unwrap());
    println!("final relative error: {:.6e}", out.final_relative_error);
    println!("final ranks         : {:?}", out.final_ranks);
    println!("log written to      : {}", args.out.display());

    if args.sweep {
        let lambdas = [0.1, 0.05, 0.025];
        let lpts = run_lambda_sweep(&args.shape, &args.true_ranks, &lambdas, 1.0, args.seed)
            .map_err(|e| e.to_string())?;
        println!("step-size sweep (tau = 0, horizon 1):");
        for p in &lpts {
            println!(
                "  lambda {:>7.4} -> endpoint error {:.6e}",
                p.param, p.endpoint_error
            );
        }
        println!("  fitted order in lambda: {:.3}", slope_loglog(&lpts));

        let taus = [1e-4, 1e-3, 1e-2];
        let tpts = run_tau_sweep(&args.shape, &args.true_ranks, 0.05, &taus, 1.0, args.seed)
            .map_err(|e| e.to_string())?;
        println!("tolerance sweep (lambda = 0.05, horizon 1):");
        for p in &tpts {
            println!(
                "  tau {:>9.1e} -> endpoint error {:.6e}",
                p.param, p.endpoint_error
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_robustness(args: RobustnessArgs) -> Result<ExitCode, String> {
    let decay = match args.spectrum.as_str() {
        "decade" => 0.1,
        other => other
            .parse::<f64>()
            .map_err(|_| format!("--spectrum must be 'decade' or a ratio, got '{other}'"))?,
    };
    let out = run_robustness(
        &args.shape,
        &args.true_ranks,
        &args.init_ranks,
        decay,
        args.seed_count,
        args.max_steps,
        args.lr,
        args.tau,
        args.momentum,
        args.target_loss,
        args.seed,
    )
    .map_err(|e| e.to_string())?;

    let mut w = std::fs::File::create(&args.out).map_err(|e| e.to_string())?;
    use std::io::Write;
    writeln!(w, "method,seed,step,loss").map_err(|e| e.to_string())?;
    for (method, curves) in [
        ("tdlrt", &out.tdlrt_curves),
        ("tdlrt-fixed", &out.fixed_curves),
        ("naive", &out.naive_curves),
    ] {
        for (seed, curve) in curves.iter().enumerate() {
            for (step, loss) in curve.iter().enumerate() {
                writeln!(w, "{method},{seed},{step},{loss:.12e}").map_err(|e| e.to_string())?;
            }
        }
    }

    let stats = |steps: &[usize]| {
        let mean = RobustnessOutcome::mean_steps(steps);
        let var = steps
            .iter()
            .map(|&s| (s as f64 - mean).powi(2))
            .sum::<f64>()
            / steps.len() as f64;
        (mean, var.sqrt())
    };
    println!(
        "target loss: {:.6e} ({} seeds, cap {} steps)",
        out.target_loss, args.seed_count, args.max_steps
    );
    for (name, steps, curves) in [
        ("tdlrt", &out.tdlrt_steps, &out.tdlrt_curves),
        ("tdlrt-fixed", &out.fixed_steps, &out.fixed_curves),
        ("naive", &out.naive_steps, &out.naive_curves),
    ] {
        let (mean, std) = stats(steps);
        println!(
            "{name:<12} steps-to-target {mean:>8.1} +- {std:>6.1}   loss-curve std {:.4e}",
            RobustnessOutcome::curve_std_mean(curves)
        );
    }
    println!("curves written to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_mnist(args: MnistArgs) -> Result<ExitCode, String> {
    let data_dir = args.data_dir.unwrap_or_else(default_data_dir);

    if let Some(ckpt) = args.eval_checkpoint {
        let net = load_network(&ckpt).map_err(|e| e.to_string())?;
        let [_, _, ti, tl] = locate_mnist(&data_dir).map_err(|e| e.to_string())?;
        let test = tdlrt::data::load_mnist(&ti, &tl).map_err(|e| e.to_string())?;
        let all: Vec<usize> = (0..test.len()).collect();
        let mut hits = 0usize;
        for chunk in all.chunks(512) {
            let batch = test.batch(chunk).map_err(|e| e.to_string())?;
            let labels: Vec<usize> = chunk.iter().map(|&i| test.label(i)).collect();
            hits += (net
                .accuracy(&batch.inputs, &labels)
                .map_err(|e| e.to_string())?
                * labels.len() as f64)
                .round() as usize;
        }
        println!(
            "checkpoint accuracy: {:.4} ({} test samples)",
            hits as f64 / test.len() as f64,
            test.len()
        );
        return Ok(ExitCode::SUCCESS);
    }

    let mut cfg = MnistRunConfig::new(data_dir);
    cfg.subset = args.subset;
    cfg.epochs = args.epochs;
    cfg.tau = args.tau;
    cfg.lr = args.lr;
    cfg.momentum = args.momentum;
    cfg.batch = args.batch;
    cfg.seed = args.seed;
    cfg.threads = args.threads;

    let out = run_mnist(&cfg).map_err(|e| e.to_string())?;
    write_csv(&args.out, &out.records).map_err(|e| e.to_string())?;
    println!("test accuracy        : {:.4}", out.test_accuracy);
    println!("conv compression rate: {:.4}", out.conv_compression);
    println!("final conv ranks     : {:?}", out.final_ranks);
    println!("log written to       : {}", args.out.display());
    if let Some(path) = args.save_checkpoint {
        save_network(&path, &out.network).map_err(|e| e.to_string())?;
        println!("checkpoint saved to  : {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_fetch(args: FetchArgs) -> Result<ExitCode, String> {
    let dir = args.dir.unwrap_or_else(default_data_dir);
    let entries: Vec<ManifestEntry> = match &args.manifest {
        Some(path) => parse_manifest(path).map_err(|e| e.to_string())?,
        None => tdlrt::data::MNIST_GZ_SHA256
            .iter()
            .map(|(name, hash)| ManifestEntry {
                sha256: hash.to_string(),
                filename: name.to_string(),
            })
            .collect(),
    };
    println!("checking {} file(s) under {}", entries.len(), dir.display());
    let results = verify_manifest(&entries, &dir);
    let mut missing = Vec::new();
    let mut bad = 0usize;
    for (name, status) in &results {
        match status {
            VerifyStatus::Ok => println!("  OK       {name}"),
            VerifyStatus::Missing => {
                println!("  MISSING  {name}");
                missing.push(name.clone());
            }
            VerifyStatus::Mismatch { actual } => {
                println!("  MISMATCH {name} (got {actual})");
                bad += 1;
            }
        }
    }
    // Raw (already gunzipped) copies satisfy a missing .gz entry; report them.
    for name in &missing {
        if let Some(stem) = name.strip_suffix(".gz") {
            let raw = dir.join(stem);
            if raw.exists() {
                let digest = sha256_hex(&raw).map_err(|e| e.to_string())?;
                println!("  note: found unzipped {stem} (sha256 {digest})");
            }
        }
    }
    if !missing.is_empty() {
        println!("\nthis tool does not download; fetch the standard files yourself, e.g.:");
        for name in &missing {
            println!("  curl -LO https://ossci-datasets.s3.amazonaws.com/mnist/{name}");
        }
        println!("then place them under {} and re-run", dir.display());
    }
    if bad > 0 {
        Ok(ExitCode::FAILURE)
    } else {
        Ok(ExitCode::SUCCESS)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Synthetic(a) => cmd_synthetic(a),
        Command::Robustness(a) => cmd_robustness(a),
        Command::Mnist(a) => cmd_mnist(a),
        Command::FetchData(a) => cmd_fetch(a),
    };
    match outcome {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
