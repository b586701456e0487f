use clap::{Args, Parser, Subcommand};
use pdiff::novelty::Tag;
use pdiff::pipeline::{self, Axis, Experiment, RunReport};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pdiff", version, about = "Parameter diffusion experiments on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment config (TOML). Defaults apply to everything left out.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Replace the config's global seed.
    #[arg(short, long)]
    seed: Option<u64>,
    /// Run directory; falls back to `out_dir` in the config, then `pdiff-run`.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model to convergence.
    TrainOriginals(RunArgs),
    /// Fine-tune the base model and save the checkpoint corpus.
    Harvest(RunArgs),
    /// Train the parameter autoencoder on the corpus.
    TrainAe(RunArgs),
    /// Train the latent denoiser.
    TrainDiffusion(RunArgs),
    /// Sample and decode new parameter vectors.
    Generate(RunArgs),
    /// Score originals, baselines and generated models.
    Evaluate(RunArgs),
    /// Run every stage in order.
    Pipeline(RunArgs),
    /// Rerun the pipeline once per value of one config axis.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// sigma-v, sigma-z, noise-aug, optimizer, k, selector, finetune-lr, epochs or t.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. `10,50,200`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Sibling runs executed at once (default: available cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Merge report files into one accuracy / max-similarity CSV.
    Scatter {
        /// report.json files; each run is labelled by its directory name.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Output CSV (stdout when omitted).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn load(args: &RunArgs) -> pdiff::Result<(Experiment, PathBuf)> {
    let exp = match &args.config {
        Some(p) => Experiment::from_file(p),
        None => Experiment::from_toml(""),
    };
    let mut exp = exp.map_err(|e| e.in_stage("config"))?;
    if let Some(s) = args.seed {
        exp = exp.with_seed(s);
    }
    let dir = args
        .out
        .clone()
        .or_else(|| exp.config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("pdiff-run"));
    Ok((exp, dir))
}

fn print_report(dir: &Path, r: &RunReport) {
    println!("run: {}", dir.display());
    println!("{:<12} {:>6} {:>9} {:>9} {:>12}", "tag", "count", "best", "mean", "max-sim");
    for tag in [Tag::Original, Tag::Ensemble, Tag::NoiseAdded, Tag::Generated] {
        if let Some(s) = r.summary(tag) {
            println!(
                "{:<12} {:>6} {:>9.4} {:>9.4} {:>12.4}",
                tag.to_string(),
                s.count,
                s.best_accuracy,
                s.mean_accuracy,
                s.max_similarity.mean
            );
        }
    }
    if !r.similarity.failures.is_empty() {
        println!("{} generated vectors could not be evaluated", r.similarity.failures.len());
    }
}

fn run(cli: Cli) -> pdiff::Result<()> {
    match cli.command {
        Command::TrainOriginals(a) => {
            let (exp, dir) = load(&a)?;
            let log = pipeline::train_originals(&exp, &dir)?;
            println!("base model val accuracy {:.4}", log.base_accuracy);
        }
        Command::Harvest(a) => {
            let (exp, dir) = load(&a)?;
            let log = pipeline::harvest(&exp, &dir)?;
            println!("harvested {} checkpoints", log.step_accuracy.len());
        }
        Command::TrainAe(a) => {
            let (exp, dir) = load(&a)?;
            let log = pipeline::train_ae(&exp, &dir)?;
            println!("autoencoder reconstruction mse {:.3e}", log.reconstruction_mse);
        }
        Command::TrainDiffusion(a) => {
            let (exp, dir) = load(&a)?;
            let log = pipeline::train_diffusion(&exp, &dir)?;
            println!("denoiser final loss {:.4}", log.loss.last().copied().unwrap_or(f64::NAN));
        }
        Command::Generate(a) => {
            let (exp, dir) = load(&a)?;
            let n = pipeline::generate(&exp, &dir)?;
            println!("generated {n} parameter vectors");
        }
        Command::Evaluate(a) => {
            let (exp, dir) = load(&a)?;
            print_report(&dir, &pipeline::evaluate_run(&exp, &dir)?);
        }
        Command::Pipeline(a) => {
            let (exp, dir) = load(&a)?;
            let r = pipeline::run_pipeline(&exp, &dir)?;
            print_report(&dir, &r);
            for t in &r.timings {
                println!("  {:<16} {:>8.1}s", t.stage, t.seconds);
            }
        }
        Command::Ablate { run, axis, values, jobs } => {
            let (exp, dir) = load(&run)?;
            let axis: Axis = axis.parse().map_err(|e: pdiff::Error| e.in_stage("ablate"))?;
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let out = pipeline::run_ablation(&exp, axis, &values, &dir, jobs)?;
            println!("{:<14} {:>9} {:>9} {:>9} {:>9} {:>17}", axis.name(), "orig", "gen-best", "gen-mean", "sim-mean", "sim-range");
            for r in &out.rows {
                let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
                let ms = r.max_similarity.as_ref();
                println!(
                    "{:<14} {:>9.4} {:>9} {:>9} {:>9} {:>17}",
                    r.value,
                    r.original_mean,
                    f(r.generated_best),
                    f(r.generated_mean),
                    f(ms.map(|s| s.mean)),
                    ms.map_or("-".into(), |s| format!("{:.3}..{:.3}", s.min, s.max)),
                );
            }
        }
        Command::Scatter { reports, out } => {
            let mut loaded = Vec::with_capacity(reports.len());
            for p in &reports {
                let r = RunReport::load(p).map_err(|e| e.in_stage("scatter"))?;
                let name = p
                    .parent()
                    .and_then(|d| d.file_name())
                    .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
                loaded.push((name, r));
            }
            let rows = loaded.iter().map(|(n, r)| (n.as_str(), r));
            let n = match out {
                Some(path) => {
                    let f = std::fs::File::create(&path).map_err(|e| pdiff::Error::from(e).in_stage("scatter"))?;
                    pipeline::emit_scatter(std::io::BufWriter::new(f), rows)
                }
                None => pipeline::emit_scatter(std::io::stdout().lock(), rows),
            }
            .map_err(|e| e.in_stage("scatter"))?;
            eprintln!("{n} rows");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                if !e.to_string().contains(&s.to_string()) {
                    eprintln!("  caused by: {s}");
                }
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
