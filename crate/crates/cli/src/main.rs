use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use diffeoreg::autodiff::Tensor;
use diffeoreg::pipeline::integrators::{compare_integrators, FlowKind, VelocitySpec};
use diffeoreg::pipeline::tensorfile::{self, Dtype};
use diffeoreg::pipeline::{
    checkpoint, evaluate, evaluation_pair, register, render, selftest, train, RegistrationResult,
    RunConfig,
};
use diffeoreg::{GridShape, LabelField, ScalarField};

#[derive(Parser)]
#[command(
    name = "diffeoreg",
    version,
    about = "Symmetric diffeomorphic registration with learned control increments"
)]
struct Cli {
    /// Flat `key = value` run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic pairs and write a checkpoint.
    Train {
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Register one pair with a trained checkpoint.
    Register(RegisterArgs),
    /// Score a checkpoint on the held-out synthetic set.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Scaling-and-squaring versus Euler on an analytic flow.
    CompareIntegrators {
        #[arg(long, default_value = "linear")]
        flow: String,
        #[arg(long, default_value_t = 0.05)]
        strength: f64,
        #[arg(long, default_value_t = 7)]
        t: u32,
        #[arg(long, default_value_t = 4)]
        n: usize,
        /// Comma-separated grid extents.
        #[arg(long, default_value = "64,64")]
        dims: String,
    },
    /// Register one pair and write PGM/PPM renders.
    Render(RegisterArgs),
    /// Gradient checks and invariant suite.
    Selftest,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Moving image (TensorFile); defaults to the held-out synthetic pair.
    #[arg(long, requires = "fixed")]
    moving: Option<PathBuf>,
    /// Fixed image (TensorFile).
    #[arg(long, requires = "moving")]
    fixed: Option<PathBuf>,
    #[arg(long, requires = "fixed_labels")]
    moving_labels: Option<PathBuf>,
    #[arg(long, requires = "moving_labels")]
    fixed_labels: Option<PathBuf>,
    /// Held-out synthetic pair index used when no images are given.
    #[arg(long, default_value_t = 0)]
    pair: usize,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(cli: &Cli, fallback: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => fallback.unwrap_or_default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train { iterations } => {
            let mut cfg = load_config(&cli, None)?;
            if let Some(n) = iterations {
                cfg.iterations = *n;
            }
            fs::create_dir_all(&cfg.out)?;
            let mut log = fs::File::create(cfg.out.join("history.jsonl"))?;
            let every = (cfg.iterations / 20).max(1);
            let mut io_err = None;
            let outcome = train(&cfg, |e| {
                if io_err.is_none() {
                    let line = serde_json::to_string(e).expect("history serializes");
                    io_err = writeln!(log, "{line}").err();
                }
                if e.iteration % every == 0 || e.iteration + 1 == cfg.iterations {
                    println!("iter {} {}", e.iteration, e.loss);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e).context("writing history");
            }
            let dir = cfg.out.join("checkpoint");
            checkpoint::save(&dir, &cfg, &outcome.net)?;
            println!("checkpoint written to {}", dir.display());
        }
        Command::Register(args) => {
            let (cfg, result) = register_args(&cli, args)?;
            let dir = cfg.out.join("register");
            write_result(&dir, &result)?;
            println!("loss {}", result.loss);
            print_metrics(&result);
            println!("fields written to {}", dir.display());
        }
        Command::Evaluate { checkpoint: ck } => {
            let (stored, net) = checkpoint::load(ck)?;
            let cfg = load_config(&cli, Some(stored))?;
            let table = evaluate(&cfg, &net)?;
            fs::create_dir_all(&cfg.out)?;
            fs::write(
                cfg.out.join("eval.json"),
                serde_json::to_string_pretty(&table)?,
            )?;
            let text = table.to_text();
            fs::write(cfg.out.join("eval.txt"), &text)?;
            print!("{text}");
        }
        Command::CompareIntegrators {
            flow,
            strength,
            t,
            n,
            dims,
        } => {
            let dims: Vec<usize> = dims
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .with_context(|| format!("bad extent `{s}`"))
                })
                .collect::<Result<_>>()?;
            let kind: FlowKind = flow.parse()?;
            let report = compare_integrators(
                VelocitySpec::new(kind, *strength),
                &GridShape::new(&dims)?,
                *t,
                *n,
            )?;
            print!("{report}");
            if let Some(o) = &cli.out {
                fs::create_dir_all(o)?;
                fs::write(
                    o.join("integrators.json"),
                    serde_json::to_string_pretty(&report)?,
                )?;
            }
        }
        Command::Render(args) => {
            let (cfg, result) = register_args(&cli, args)?;
            let dir = cfg.out.join("render");
            for p in render::render(&result, &dir)? {
                println!("{}", p.display());
            }
        }
        Command::Selftest => {
            let checks = selftest::run()?;
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!("{c}");
            }
            if failed > 0 {
                bail!("{failed} of {} checks failed", checks.len());
            }
            println!("all {} checks passed", checks.len());
        }
    }
    Ok(())
}

fn register_args(cli: &Cli, args: &RegisterArgs) -> Result<(RunConfig, RegistrationResult)> {
    let (stored, net) = checkpoint::load(&args.checkpoint)?;
    let cfg = load_config(cli, Some(stored))?;
    let result = match (&args.moving, &args.fixed) {
        (Some(m), Some(f)) => {
            let x = read_image(m)?;
            let y = read_image(f)?;
            let labels = match (&args.moving_labels, &args.fixed_labels) {
                (Some(a), Some(b)) => Some((read_labels(a)?, read_labels(b)?)),
                _ => None,
            };
            register(&net, &cfg, &x, &y, labels.as_ref().map(|(a, b)| (a, b)))?
        }
        _ => {
            let (_, pair) = evaluation_pair(&cfg.dataset, &GridShape::new(&cfg.dims)?, args.pair)?;
            register(
                &net,
                &cfg,
                &pair.x,
                &pair.y,
                Some((&pair.mask_x, &pair.mask_y)),
            )?
        }
    };
    Ok((cfg, result))
}

/// Accepts `[1, spatial..]` or bare `spatial..` tensors.
fn read_image(path: &Path) -> Result<ScalarField> {
    let t = tensorfile::read(path).with_context(|| format!("reading {}", path.display()))?;
    let dims = match t.shape() {
        [1, rest @ ..] if rest.len() >= 2 => rest.to_vec(),
        s => s.to_vec(),
    };
    Ok(ScalarField::new(GridShape::new(&dims)?, t.into_data())?)
}

fn read_labels(path: &Path) -> Result<LabelField> {
    let f = read_image(path)?;
    let data = f
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as u32)
            } else {
                bail!(
                    "{}: label value {v} is not a non-negative integer",
                    path.display()
                )
            }
        })
        .collect::<Result<Vec<u32>>>()?;
    Ok(LabelField::new(f.shape().clone(), data)?)
}

fn write_result(dir: &Path, r: &RegistrationResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let vf = |p: &diffeoreg::DeformationField| Tensor::from_vector_field(p.displacement());
    tensorfile::write(&dir.join("phi.dft"), &vf(&r.phi), Dtype::F32)?;
    tensorfile::write(&dir.join("phi_inv.dft"), &vf(&r.phi_inv), Dtype::F32)?;
    tensorfile::write(
        &dir.join("warped_x.dft"),
        &Tensor::from_scalar_field(&r.warped_x),
        Dtype::F32,
    )?;
    tensorfile::write(
        &dir.join("warped_y.dft"),
        &Tensor::from_scalar_field(&r.warped_y),
        Dtype::F32,
    )?;
    for (i, (f, b)) in r.scales.iter().enumerate() {
        tensorfile::write(&dir.join(format!("scale{i}_phi.dft")), &vf(f), Dtype::F32)?;
        tensorfile::write(
            &dir.join(format!("scale{i}_phi_inv.dft")),
            &vf(b),
            Dtype::F32,
        )?;
    }
    let summary = serde_json::json!({
        "loss": r.loss,
        "forward": r.forward,
        "backward": r.backward,
    });
    fs::write(
        dir.join("result.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}

fn print_metrics(r: &RegistrationResult) {
    for (name, m) in [("forward", &r.forward), ("backward", &r.backward)] {
        if let Some(m) = m {
            println!(
                "{name}: dsc {:.4} hd {:.3} ssim {:.4} fold {:.6}",
                m.dsc, m.hd, m.ssim, m.fold_fraction
            );
        }
    }
}
