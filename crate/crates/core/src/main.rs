use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use maskcluster::bench::{bench_attention, BenchConfig};
use maskcluster::checkpoint;
use maskcluster::config::RunConfig;
use maskcluster::data::{load_dataset, synthetic, write_image_folder, DataConfig, SYNTHETIC_SHAPES};
use maskcluster::gradcheck::{end_to_end, op_suite, GradCheckReport};
use maskcluster::knn::probe;
use maskcluster::parallel::run_single_worker;
use maskcluster::train::{run, RunOutput, TrainState};
use maskcluster::Error;

#[derive(Parser)]
#[command(name = "maskcluster", version, about = "Masked-image clustering pretraining for vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher/student pair and write metrics and checkpoints.
    Pretrain {
        /// TOML run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint directory instead of a fresh start.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Time the split attention kernel at several masking ratios.
    BenchAttn {
        #[arg(long, default_value_t = 197)]
        tokens: usize,
        #[arg(long, default_value_t = 384)]
        dim: usize,
        #[arg(long, default_value_t = 6)]
        heads: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75")]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        /// Also time an encoder of this depth; 0 skips it.
        #[arg(long, default_value_t = 0)]
        encoder_depth: usize,
        /// Write the CSV here as well as printing it.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every tape op and of the total loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Fraction of student parameters sampled in the end-to-end check.
        #[arg(long, default_value_t = 0.01)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// k-NN accuracy of a checkpoint's teacher embeddings.
    KnnEval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image folder, `synthetic:shapes` or `synthetic:shapes-colour`.
        #[arg(long, default_value = SYNTHETIC_SHAPES)]
        data: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Images generated for synthetic data.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Share of the data used as the reference set.
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a procedural shapes dataset as PNG folders.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        /// `synthetic:shapes` or `synthetic:shapes-colour`.
        #[arg(long, default_value = SYNTHETIC_SHAPES)]
        source: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn pretrain(config: Option<&Path>, out: &Path, resume: Option<&Path>, seed: Option<u64>) -> maskcluster::Result<()> {
    let (mut state, cfg) = match resume {
        Some(dir) => checkpoint::load(dir)?,
        None => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            (TrainState::new(&cfg)?, cfg)
        }
    };
    let ds = load_dataset(&cfg.data)?;
    log::info!("{} training images, {} skipped", ds.len(), ds.skipped);
    let reports = run(&mut state, &cfg, &ds.images, Some(RunOutput { dir: out }), |r| {
        log::info!(
            "step {} total {:.4} entropy {:.3} lr {:.2e}",
            r.step,
            r.losses.total(),
            r.entropy_mean,
            r.lr
        );
    })?;
    println!("trained {} steps, outputs in {}", reports.len(), out.display());
    Ok(())
}

fn print_reports(reports: &[GradCheckReport]) -> bool {
    let mut ok = true;
    for r in reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<22} max rel err {:.3e} (tol {:.0e}) {verdict}", r.name, r.max_rel_error, r.tolerance);
        ok &= r.passed();
    }
    ok
}

fn knn_eval(dir: &Path, data: &str, k: usize, n: usize, train_fraction: f64, seed: u64) -> maskcluster::Result<()> {
    let (state, cfg) = checkpoint::load(dir)?;
    let ds = load_dataset(&DataConfig {
        source: data.to_string(),
        image_size: cfg.model.encoder.image_size,
        count: n,
        seed,
    })?;
    let train = (ds.len() as f64 * train_fraction).round() as usize;
    let acc = probe(&state.teacher, &cfg.model, &ds, train, k)?;
    println!("knn k={k} train={train} test={} accuracy {acc:.4}", ds.len() - train);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain {
            config,
            out,
            resume,
            seed,
        } => pretrain(config.as_deref(), &out, resume.as_deref(), seed),
        Command::BenchAttn {
            tokens,
            dim,
            heads,
            batch,
            ratios,
            repeats,
            warmup,
            encoder_depth,
            csv,
            seed,
        } => {
            let cfg = BenchConfig {
                tokens,
                dim,
                heads,
                batch,
                ratios,
                repeats,
                warmup,
                encoder_depth,
                seed,
            };
            run_single_worker(|| bench_attention(&cfg)).and_then(|report| {
                print!("{}\n{}", report.to_table(), report.to_csv());
                match csv {
                    Some(p) => std::fs::write(&p, report.to_csv()).map_err(|e| Error::Io { path: p, source: e }),
                    None => Ok(()),
                }
            })
        }
        Command::Gradcheck { trials, fraction, seed } => {
            let checked = op_suite(seed, trials).and_then(|mut reports| {
                reports.push(end_to_end(seed, fraction)?);
                Ok(reports)
            });
            match checked {
                Ok(reports) if print_reports(&reports) => Ok(()),
                Ok(_) => {
                    eprintln!("gradient check failed");
                    return ExitCode::from(1);
                }
                Err(e) => Err(e),
            }
        }
        Command::KnnEval {
            checkpoint,
            data,
            k,
            n,
            train_fraction,
            seed,
        } => knn_eval(&checkpoint, &data, k, n, train_fraction, seed),
        Command::MakeSynthetic { out, source, n, size, seed } => synthetic(&source, n, size, seed)
            .and_then(|ds| write_image_folder(&ds, &out))
            .map(|()| println!("wrote {n} images to {}", out.display())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
