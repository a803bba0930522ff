use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use shapeseg::pipeline::{self, RunConfig};
use shapeseg::{gradsuite, Error};

/// Shape-prior instance segmentation toolkit.
#[derive(Parser, Debug)]
#[command(name = "shapeseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate deformed ellipse patches for prior training.
    GenShapes {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        r_max: Option<f32>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut, rotate and deform instance patches from a label image.
    ExtractShapes {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the shape prior on a directory of patches.
    TrainPrior {
        #[arg(long)]
        shapes: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the localization net and encoder against image gradients.
    TrainDetector {
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one image or a directory of images.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// AP table of predictions against ground-truth label maps.
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference gradient checks; `--op all` runs every check.
    Gradcheck {
        #[arg(long, default_value = "all")]
        op: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate toy benchmark scenes with ground truth.
    GenBenchmark {
        /// Instance count range, e.g. `5-15`.
        #[arg(long, default_value = "5-15")]
        k_range: String,
        #[arg(long)]
        n_scenes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn config(path: Option<&PathBuf>, seed: Option<u64>) -> shapeseg::Result<RunConfig> {
    let mut cfg = RunConfig::load(path.map(PathBuf::as_path))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn parse_range(s: &str) -> shapeseg::Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("--k-range '{s}' is not of the form LO-HI"));
    let (a, b) = s.split_once('-').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn required(p: Option<PathBuf>, fallback: Option<&PathBuf>, flag: &str) -> shapeseg::Result<PathBuf> {
    p.or_else(|| fallback.cloned())
        .ok_or_else(|| Error::InvalidArgument(format!("{flag} is required (or set it in the config)")))
}

fn run(cmd: Command) -> shapeseg::Result<()> {
    match cmd {
        Command::GenShapes { n, r_max, seed, config: c, out } => {
            let mut cfg = config(c.as_ref(), seed)?;
            if let Some(r) = r_max {
                cfg.shapes.r_max_shape = r;
                cfg.validate()?;
            }
            let m = pipeline::gen_shapes(n, &cfg, &out)?;
            println!("wrote {} patches to {}", m.count, out.display());
        }
        Command::ExtractShapes { labels, seed, config: c, out } => {
            let mut cfg = config(c.as_ref(), seed)?;
            cfg.scenario = pipeline::Scenario::Annotation;
            let m = pipeline::extract_shapes(&labels, &cfg, &out)?;
            println!("wrote {} patches to {}", m.count, out.display());
        }
        Command::TrainPrior { shapes, config: c, seed, out } => {
            let cfg = config(c.as_ref(), seed)?;
            let (_, report) = pipeline::train_prior_stage(&shapes, &cfg, &out)?;
            if let Some(l) = report.epoch_losses.last() {
                println!("final epoch loss {l:.4}");
            }
            println!("held-out reconstruction IoU {:.4}", report.heldout_iou);
        }
        Command::TrainDetector { images, prior, config: c, seed, out } => {
            let cfg = config(c.as_ref(), seed)?;
            let images = required(images, cfg.dataset_dir.as_ref(), "--images")?;
            let out = required(out, cfg.output_dir.as_ref(), "--out")?;
            let report = pipeline::train_detector_stage(&images, &prior, &cfg, &out, |e| {
                println!(
                    "epoch {:3}  edge {:.4}  kl {:.4}  total {:.4}  {:.0}s",
                    e.epoch, e.edge_loss, e.kl, e.total, e.wall_time_s
                )
            })?;
            println!("decoder checksum {}", report.decoder_checksum);
        }
        Command::Infer { model, image, config: c, out, jobs } => {
            let cfg = config(c.as_ref(), None)?;
            for (stem, n) in pipeline::infer_stage(&model, &image, &cfg, &out, jobs)? {
                println!("{stem}: {n} instances");
            }
        }
        Command::Evaluate { pred_dir, gt_dir, config: c, out, jobs } => {
            let cfg = config(c.as_ref(), None)?;
            let table = pipeline::evaluate_stage(&pred_dir, &gt_dir, &cfg, &out, jobs)?;
            print!("{}", table.to_csv());
        }
        Command::Gradcheck { op, seed } => {
            let mut worst: f64 = 0.0;
            for (name, r) in gradsuite::run(&op, seed)? {
                let status = if r.max_rel_error < gradsuite::TOLERANCE { "ok" } else { "FAIL" };
                println!("{name:<24} {:.3e}  {status}", r.max_rel_error);
                worst = worst.max(r.max_rel_error);
            }
            if !(worst < gradsuite::TOLERANCE) {
                return Err(Error::Numeric(format!(
                    "max relative error {worst:.3e} above {:.0e}",
                    gradsuite::TOLERANCE
                )));
            }
        }
        Command::GenBenchmark { k_range, n_scenes, seed, config: c, out } => {
            let cfg = config(c.as_ref(), seed)?;
            let m = pipeline::gen_benchmark(parse_range(&k_range)?, n_scenes, &cfg, &out)?;
            println!("wrote {} scenes to {}", m.stems.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
