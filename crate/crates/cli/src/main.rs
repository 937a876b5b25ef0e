//! Command-line front end: preprocessing, training, evaluation, prediction,
//! the thinning baseline and synthetic data.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use canet_core::image::{load_image, save_gray, save_image, zhang_suen_thinning};
use canet_core::loss::{EvalReport, F1Aggregation};
use canet_core::train::{
    generate_synthetic, overlay_image, predict, predict_probs, preprocess, preprocess_to_gray, probability_image,
    train_from_config, Checkpoint, Dataset, Event, InputMode, TrainConfig,
};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "canet", version, about = "Skeleton extraction from binary shape images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert every .pgm shape in a directory to the chosen network input.
    Preprocess {
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value = "repaired_distance")]
        mode: InputMode,
    },
    /// Train from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Suppress per-step progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint on a labelled set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        shapes_dir: PathBuf,
        #[arg(long)]
        skeletons_dir: PathBuf,
        /// Fixed threshold; without it the best grid threshold for this set is used.
        #[arg(long)]
        threshold: Option<f64>,
        /// mean or global; defaults to the checkpoint's setting.
        #[arg(long)]
        aggregation: Option<String>,
        /// Also write the per-image CSV here.
        #[arg(long)]
        csv_out: Option<PathBuf>,
    },
    /// Predict the skeleton of one shape image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Defaults to the threshold stored in the checkpoint.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        prob_out: Option<PathBuf>,
        #[arg(long)]
        overlay_out: Option<PathBuf>,
    },
    /// Classical baselines.
    Baseline {
        #[command(subcommand)]
        method: Baseline,
    },
    /// Write seeded synthetic shape/skeleton pairs.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Baseline {
    /// Zhang-Suen thinning of a shape image.
    Thin {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("{} contains no .pgm files", dir.display());
    }
    Ok(files)
}

fn run_preprocess(input_dir: &Path, output_dir: &Path, mode: InputMode) -> Result<()> {
    let files = pgm_files(input_dir)?;
    std::fs::create_dir_all(output_dir).with_context(|| format!("cannot create {}", output_dir.display()))?;
    for f in &files {
        let img = load_image(f)?;
        save_gray(&preprocess_to_gray(mode, &img), output_dir.join(f.file_name().expect("listed file")))?;
    }
    println!("preprocessed {} images ({})", files.len(), mode.as_str());
    Ok(())
}

fn run_train(config: &Path, quiet: bool) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let mut observer = |e: Event<'_>| match e {
        Event::Step(r) if !quiet => eprintln!("step {} lr {:.6} loss {:.6}", r.step, r.lr, r.loss),
        Event::Eval(r) => eprintln!("eval after {} updates: threshold {:.2} f1 {:.4}", r.step, r.threshold, r.f1),
        _ => {}
    };
    let out = train_from_config(&cfg, &mut observer)?;
    let last = out.steps.last().expect("at least one logged step");
    print!("trained {} updates, final loss {:.6}", out.checkpoint.step, last.loss);
    if let Some(b) = out.best {
        print!(", best f1 {:.4} at threshold {:.2} after {} updates", b.f1, b.threshold, b.step);
    }
    if out.stopped_early {
        print!(" (stopped early)");
    }
    println!();
    Ok(())
}

fn run_eval(
    checkpoint: &Path,
    shapes_dir: &Path,
    skeletons_dir: &Path,
    threshold: Option<f64>,
    aggregation: Option<&str>,
    csv_out: Option<&Path>,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let agg = match aggregation {
        Some(a) => F1Aggregation::parse(a)?,
        None => ck.config.f1_aggregation,
    };
    let data = Dataset::load(shapes_dir, skeletons_dir)?;
    let probs = data
        .samples
        .iter()
        .map(|s| predict_probs(&ck.model, &preprocess(ck.config.input_mode, &s.shape)))
        .collect::<canet_core::Result<Vec<_>>>()?;
    let gts: Vec<_> = data.samples.iter().map(|s| s.skeleton.clone()).collect();
    let report = EvalReport::compute(&data.ids(), &probs, &gts, threshold, agg)?;
    print!("{}", report.to_table());
    if let Some(p) = csv_out {
        std::fs::write(p, report.to_csv()).with_context(|| format!("cannot write {}", p.display()))?;
    }
    Ok(())
}

fn run_predict(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    threshold: Option<f64>,
    prob_out: Option<&Path>,
    overlay_out: Option<&Path>,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let shape = load_image(input)?;
    let pred = predict(&ck, &shape, threshold)?;
    save_image(&pred.skeleton, output)?;
    if let Some(p) = prob_out {
        save_gray(&probability_image(&pred.probs), p)?;
    }
    if let Some(p) = overlay_out {
        save_gray(&overlay_image(&shape, &pred.skeleton), p)?;
    }
    println!(
        "{} skeleton pixels at threshold {:.2}",
        pred.skeleton.count(),
        pred.threshold
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess {
            input_dir,
            output_dir,
            mode,
        } => run_preprocess(&input_dir, &output_dir, mode),
        Command::Train { config, quiet } => run_train(&config, quiet),
        Command::Eval {
            checkpoint,
            shapes_dir,
            skeletons_dir,
            threshold,
            aggregation,
            csv_out,
        } => run_eval(
            &checkpoint,
            &shapes_dir,
            &skeletons_dir,
            threshold,
            aggregation.as_deref(),
            csv_out.as_deref(),
        ),
        Command::Predict {
            checkpoint,
            input,
            output,
            threshold,
            prob_out,
            overlay_out,
        } => run_predict(&checkpoint, &input, &output, threshold, prob_out.as_deref(), overlay_out.as_deref()),
        Command::Baseline {
            method: Baseline::Thin { input, output },
        } => {
            let skel = zhang_suen_thinning(&load_image(&input)?);
            save_image(&skel, &output)?;
            println!("{} skeleton pixels", skel.count());
            Ok(())
        }
        Command::Synth { count, size, seed, out } => {
            let ids = generate_synthetic(count, size, seed, &out)?;
            println!("wrote {} pairs to {}", ids.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("canet: {}", line.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("canet: {msg}");
            ExitCode::FAILURE
        }
    }
}
