//! `subspace-lab`: generate data, train subspace-clustering pipelines,
//! run sweeps and verification suites, and score label files.
//!
//! Exit codes: 0 on success, 1 on runtime/numeric failure, 2 on
//! usage/config errors.

mod plot;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use subspace_lab::data::{load_labels_csv, SynthSpec};
use subspace_lab::error::Error;
use subspace_lab::trainer::{self, RunConfig, SweepGrid};

#[derive(Parser)]
#[command(
    name = "subspace-lab",
    about = "Deep subspace clustering with memory-bank mini-batch training",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic union-of-subspaces dataset (tensor file + labels CSV).
    Gen(GenArgs),
    /// Run the full pipeline: pretrain, fine-tune, cluster, score.
    Train(TrainArgs),
    /// Grid sweep over batch size x learning rate or alpha x beta.
    Sweep(SweepArgs),
    /// Run a verification suite; exits 0 iff everything passes.
    Check(CheckArgs),
    /// Score a predicted labels CSV against a ground-truth labels CSV.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 5)]
    subspaces: usize,
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long, default_value_t = 30)]
    ambient: usize,
    /// Points per subspace.
    #[arg(long, default_value_t = 50)]
    per: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory (will contain data.sctd and labels.csv).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat JSON config file, or a manifest.json to replay.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by `gen` (data.sctd + labels.csv).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Override any flat config key (repeatable): --set alpha=50
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Reference (full-batch) learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Separate learning rate for the coefficient matrix C.
    #[arg(long)]
    c_lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs_pretrain: Option<usize>,
    #[arg(long)]
    epochs_finetune: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Artifact directory (manifest, checkpoint, traces, dumps).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated batch sizes (with --lrs).
    #[arg(long)]
    batch_sizes: Option<String>,
    /// Comma-separated learning rates (with --batch-sizes).
    #[arg(long)]
    lrs: Option<String>,
    /// Comma-separated alpha values (with --betas).
    #[arg(long)]
    alphas: Option<String>,
    /// Comma-separated beta values (with --alphas).
    #[arg(long)]
    betas: Option<String>,
    /// Output directory for sweep.csv and sweep.svg.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, ValueEnum)]
enum CheckKind {
    Grads,
    Equiv,
    Metrics,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(value_enum)]
    kind: CheckKind,
    /// Steps for the equivalence check.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted labels CSV (sample_id,label).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth labels CSV (sample_id,label).
    #[arg(long)]
    truth: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32, Error> {
    match cli.cmd {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Check(args) => cmd_check(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

fn cmd_gen(args: GenArgs) -> Result<i32, Error> {
    let spec = SynthSpec {
        n_subspaces: args.subspaces,
        subspace_dim: args.dim,
        ambient_dim: args.ambient,
        points_per_subspace: args.per,
        noise_sigma: args.noise,
        seed: args.seed,
    };
    let ds = subspace_lab::data::gen_union_of_subspaces(&spec)?;
    ds.save_dir(&args.out)?;
    println!(
        "wrote {} samples ({} subspaces x dim {} in R^{}, noise {}) to {}",
        ds.len(),
        spec.n_subspaces,
        spec.subspace_dim,
        spec.ambient_dim,
        spec.noise_sigma,
        args.out.display()
    );
    Ok(0)
}

/// defaults -> config file -> --set pairs -> explicit flags.
fn resolve_config(args: &ConfigArgs) -> Result<RunConfig, Error> {
    if args.config.is_none() && args.data.is_none() {
        return Err(Error::Config(
            "missing config: pass --config FILE or --data DIR".into(),
        ));
    }
    let mut flat = match &args.config {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "config file {} does not exist",
                    path.display()
                )));
            }
            RunConfig::from_file(path)?.to_flat()
        }
        None => RunConfig::default().to_flat(),
    };
    if let Some(data) = &args.data {
        flat.insert("dataset".into(), "tensor".into());
        flat.insert(
            "dataset_path".into(),
            data.display().to_string().into(),
        );
        // synth keys are irrelevant once a concrete dataset is given
        for key in [
            "synth_subspaces",
            "synth_dim",
            "synth_ambient",
            "synth_per",
            "synth_noise",
            "synth_seed",
        ] {
            flat.remove(key);
        }
    }
    for pair in &args.set {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects KEY=VALUE, got {pair:?}"))
        })?;
        // parse as JSON scalar when possible, else keep the string
        let v: serde_json::Value = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        flat.insert(key.to_string(), v);
    }
    let mut set_num = |key: &str, v: Option<serde_json::Value>| {
        if let Some(v) = v {
            flat.insert(key.to_string(), v);
        }
    };
    set_num("method", args.method.clone().map(Into::into));
    set_num("batch_size", args.batch_size.map(Into::into));
    set_num("alpha", args.alpha.map(Into::into));
    set_num("beta", args.beta.map(Into::into));
    set_num("tau", args.tau.map(Into::into));
    set_num("base_lr", args.lr.map(Into::into));
    set_num("c_lr", args.c_lr.map(Into::into));
    set_num("seed", args.seed.map(Into::into));
    set_num("pretrain_epochs", args.epochs_pretrain.map(Into::into));
    set_num("finetune_epochs", args.epochs_finetune.map(Into::into));
    RunConfig::from_flat(&flat)
}

fn cmd_train(args: TrainArgs) -> Result<i32, Error> {
    let config = resolve_config(&args.config)?;
    let run = trainer::full_pipeline(&config, args.out.as_deref())?;
    println!(
        "method={} n={} clusters={} wall={}ms",
        config.method.as_str(),
        run.manifest.n_samples,
        run.manifest.n_clusters,
        run.manifest.wall_ms
    );
    match (run.result.acc, run.result.nmi) {
        (Some(a), Some(n)) => println!("acc={a:.4} nmi={n:.4}"),
        _ => println!("acc=n/a nmi=n/a (no ground-truth labels)"),
    }
    if let Some(out) = &args.out {
        println!("manifest: {}", out.join("manifest.json").display());
    }
    Ok(0)
}

fn parse_list<T: std::str::FromStr>(name: &str, s: &str) -> Result<Vec<T>, Error> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad {name} entry {v:?}")))
        })
        .collect()
}

fn cmd_sweep(args: SweepArgs) -> Result<i32, Error> {
    let config = resolve_config(&args.config)?;
    let grid = match (&args.batch_sizes, &args.lrs, &args.alphas, &args.betas) {
        (Some(bs), Some(lrs), None, None) => SweepGrid::BatchLr {
            batch_sizes: parse_list("batch_sizes", bs)?,
            lrs: parse_list("lrs", lrs)?,
        },
        (None, None, Some(al), Some(be)) => SweepGrid::AlphaBeta {
            alphas: parse_list("alphas", al)?,
            betas: parse_list("betas", be)?,
        },
        _ => {
            return Err(Error::Config(
                "pass either --batch-sizes with --lrs, or --alphas with --betas".into(),
            ))
        }
    };
    let cells = trainer::ablation_sweep(&config, &grid)?;
    std::fs::create_dir_all(&args.out)?;
    let csv = trainer::sweep_csv(&grid, &cells);
    std::fs::write(args.out.join("sweep.csv"), &csv)?;
    std::fs::write(args.out.join("sweep.svg"), plot::sweep_svg(&grid, &cells))?;
    print!("{csv}");
    println!(
        "wrote {} and {}",
        args.out.join("sweep.csv").display(),
        args.out.join("sweep.svg").display()
    );
    Ok(0)
}

fn cmd_check(args: CheckArgs) -> Result<i32, Error> {
    match args.kind {
        CheckKind::Grads => {
            let checks = subspace_lab::verify::grad_suite(args.seed)?;
            let adjoint = subspace_lab::verify::adjointness_check(args.seed)?;
            let mut ok = true;
            println!("{:<24} {:>12} {:>10} status", "operation", "max rel err", "tol");
            for c in &checks {
                ok &= c.passed();
                println!(
                    "{:<24} {:>12.3e} {:>10.0e} {}",
                    c.name,
                    c.max_rel_err,
                    c.tolerance,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            let adjoint_ok = adjoint < 1e-10;
            ok &= adjoint_ok;
            println!(
                "{:<24} {:>12.3e} {:>10.0e} {}",
                "conv-deconv adjointness",
                adjoint,
                1e-10,
                if adjoint_ok { "ok" } else { "FAIL" }
            );
            Ok(if ok { 0 } else { 1 })
        }
        CheckKind::Equiv => {
            let mut cfg = RunConfig::default();
            cfg.arch = subspace_lab::model::Arch::Linear { latent: 20 };
            cfg.batch_size = match &cfg.dataset {
                trainer::DatasetSpec::Synth(s) => s.total_points(),
                _ => unreachable!("default dataset is synthetic"),
            };
            cfg.shuffle = false;
            cfg.pretrain_epochs = 2;
            cfg.seed = args.seed;
            let rep = trainer::equivalence_check(&cfg, args.steps)?;
            println!(
                "equivalence over {} steps: max param deviation {:e}, max loss deviation {:e}",
                rep.steps, rep.max_param_dev, rep.max_loss_dev
            );
            Ok(if rep.max_param_dev < 1e-10 { 0 } else { 1 })
        }
        CheckKind::Metrics => {
            let checks = subspace_lab::verify::metric_oracle_suite(args.seed, 100)?;
            let mut ok = true;
            for c in &checks {
                ok &= c.passed;
                println!("{} — {} [{}]", c.name, c.detail, if c.passed { "ok" } else { "FAIL" });
            }
            Ok(if ok { 0 } else { 1 })
        }
    }
}

fn cmd_eval(args: EvalArgs) -> Result<i32, Error> {
    let pred = load_labels_csv(&args.pred)?;
    let truth = load_labels_csv(&args.truth)?;
    let acc = subspace_lab::clustering::acc(&pred, &truth)?;
    let nmi = subspace_lab::clustering::nmi(&pred, &truth)?;
    println!("acc={acc:.6} nmi={nmi:.6}");
    Ok(0)
}
