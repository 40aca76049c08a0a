use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use vlbeit::config::Config;
use vlbeit::finetune::FtTask;
use vlbeit::input::synthetic::{generate_item, gen_synthetic, SyntheticTask};
use vlbeit::input::{write_dataset, Sample};
use vlbeit::pipeline::{self, CHECKPOINT_FILE};
use vlbeit::pretrain::checkpoint;
use vlbeit::pretrain::codebook_tensors;

#[derive(Parser, Debug)]
#[command(name = "vlbeit", version, about = "Masked vision-language pretraining at desk scale")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `key=value` applied after the config file; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic dataset as one record per line.
    GenData {
        /// pairs, images, texts, vqa, nlvr, retrieval, or imgcls.
        task: SyntheticTask,
        #[arg(long, default_value_t = 64)]
        n: usize,
    },
    /// Trains the k-means visual tokenizer and saves its codebook.
    TrainTokenizer,
    /// Joint pretraining; writes config, seed, metrics, and checkpoint.
    Pretrain {
        /// Continues from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Finetunes a downstream task and evaluates it on held-out data.
    Finetune {
        task: FtTask,
        /// Pretrained checkpoint; a fresh backbone when absent.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluates a pretrained or finetuned checkpoint on held-out data.
    Eval { checkpoint: PathBuf },
    /// Compares analytic and finite-difference gradients of the MVLM loss.
    GradCheck {
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Lists the tensors of a checkpoint.
    InspectCheckpoint { checkpoint: PathBuf },
    /// Runs the task and backbone ablation grid.
    Ablate {
        /// Also finetunes this task from every pretrained model.
        #[arg(long)]
        downstream: Option<FtTask>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainTokenizer => "train-tokenizer",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::GradCheck { .. } => "grad-check",
            Command::InspectCheckpoint { .. } => "inspect-checkpoint",
            Command::Ablate { .. } => "ablate",
        }
    }
}

fn load_config(c: &Common) -> Result<Config> {
    let mut overrides = c.overrides.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = match &c.config {
        Some(path) => Config::load(path, &overrides)?,
        None => Config::parse_with("", &overrides)?,
    };
    Ok(cfg)
}

fn threads() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("VLBT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => n.min(available),
        _ => available,
    }
}

/// Items `0..n` of a task, generated on up to `VLBT_THREADS` workers.
fn generate(seed: u64, task: SyntheticTask, n: usize, size: usize) -> Result<Vec<Sample>> {
    if task == SyntheticTask::Retrieval {
        return Ok(gen_synthetic(seed, n, task, size)?);
    }
    gen_synthetic(seed, 0, task, size)?;
    let workers = threads().clamp(1, n.max(1));
    let chunk = n.div_ceil(workers).max(1);
    let mut out = Vec::with_capacity(n);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                s.spawn(move || {
                    (start..(start + chunk).min(n))
                        .map(|i| generate_item(seed, task, i as u64, size))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            out.extend(h.join().expect("generator thread panicked"));
        }
    });
    Ok(out)
}

fn out_dir(c: &Common, default: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| Path::new("runs").join(default))
}

fn run(cli: Cli, cfg: Config) -> Result<bool> {
    let c = &cli.common;
    let out = out_dir(c, cli.command.name());
    match cli.command {
        Command::GenData { task, n } => {
            let samples = generate(cfg.seed, task, n, cfg.image_size)?;
            fs::create_dir_all(&out)?;
            let path = out.join(format!("{task}.txt"));
            let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            write_dataset(BufWriter::new(f), &samples)?;
            pipeline::write_run_header(&cfg, &out)?;
            println!("wrote {} {task} records to {}", samples.len(), path.display());
        }
        Command::TrainTokenizer => {
            let fit = pipeline::train_tokenizer(&cfg)?;
            pipeline::write_run_header(&cfg, &out)?;
            let mut errs = String::from("iter\tmse\n");
            for (i, e) in fit.errors.iter().enumerate() {
                errs.push_str(&format!("{i}\t{e:.6}\n"));
            }
            fs::write(out.join(pipeline::METRICS_FILE), &errs)?;
            let path = out.join("codebook.vlbt");
            checkpoint::write(&path, &codebook_tensors(&fit.codebook))?;
            print!("{errs}");
            println!("codebook K={} D={} saved to {}", fit.codebook.k, fit.codebook.dim, path.display());
        }
        Command::Pretrain { resume } => {
            let p = pipeline::run_pretrain(&cfg, &out, resume.as_deref(), |r| {
                if r.step % 100 == 0 || r.step == 1 {
                    let parts: Vec<String> = r.tasks.iter().map(|t| format!("{}={:.4}", t.task, t.loss)).collect();
                    info!("step {} lr {:.2e} total {:.4} {}", r.step, r.lr, r.total, parts.join(" "));
                }
            })?;
            println!("pretrained to step {}; checkpoint {}", p.step(), out.join(CHECKPOINT_FILE).display());
        }
        Command::Finetune { task, init } => {
            let (f, report) = pipeline::run_finetune(&cfg, task, init.as_deref(), &out, |r| {
                if r.step % 100 == 0 || r.step == 1 {
                    info!("step {} lr {:.2e} loss {:.4} acc {:.3}", r.step, r.lr, r.loss, r.accuracy());
                }
            })?;
            print!("{}", report.lines());
            println!("finetuned {task} for {} steps; checkpoint {}", f.step(), out.join(CHECKPOINT_FILE).display());
        }
        Command::Eval { checkpoint } => {
            let report = pipeline::run_eval(&cfg, &checkpoint, &out)?;
            print!("{}", report.lines());
        }
        Command::GradCheck { tol } => {
            let report = pipeline::gradient_check(cfg.seed, tol)?;
            print!("{}", report.to_table());
            println!("max relative error {:.3e} (tol {tol:e})", report.max_rel_err());
            return Ok(report.passed);
        }
        Command::InspectCheckpoint { checkpoint } => {
            let tensors = checkpoint::read(&checkpoint)?;
            let mut total = 0;
            println!("name\tshape\tnumel");
            for t in &tensors {
                let n: usize = t.shape.iter().product();
                total += n;
                println!("{}\t{:?}\t{n}", t.name, t.shape);
            }
            println!("{} tensors, {total} values", tensors.len());
        }
        Command::Ablate { downstream } => {
            let reports = pipeline::run_ablation(&cfg, &out, downstream, |name, _| info!("finished {name}"))?;
            for (name, r) in reports {
                for (m, v) in r.metrics {
                    println!("{name}\t{m}\t{v:.6}");
                }
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cfg = match load_config(&cli.common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    match run(cli, cfg) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
