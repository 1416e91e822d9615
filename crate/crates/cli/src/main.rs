use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cropseg::checkpoint::{load_checkpoint_expecting, save_checkpoint};
use cropseg::config::CropChoice;
use cropseg::eval::{binarize, evaluate_model, render_overlay, write_curves, EvalOptions};
use cropseg::experiment::{
    cell_train_seed, crop_split, fmt4, history_csv, initial_model, prepare_splits, run_ablation, CellStatus,
};
use cropseg::pnm::{read_pgm, write_pgm};
use cropseg::synth::{export_dataset, import_dataset, CropSpec, SegSample};
use cropseg::{train, Error, ExperimentConfig, LossKind, Tensor};

#[derive(Parser)]
#[command(name = "cropseg", version, about = "Segmentation under spatial input cropping on synthetic en face images")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Six-block network with the full-size filter counts.
    #[arg(long, global = true)]
    paper_arch: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus and write train/, val/ and test/ datasets.
    Generate,
    /// Train one (crop, loss) cell on an exported dataset.
    Train {
        /// Directory holding train/ and val/ datasets.
        #[arg(long)]
        data: PathBuf,
        /// Kept rows (or columns) as `kept` or `kept@offset`.
        #[arg(long)]
        crop: CropChoice,
        #[arg(long)]
        loss: LossKind,
    },
    /// Evaluate a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A dataset directory (with manifest.tsv).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        crop: CropChoice,
    },
    /// Run the full crop-by-loss grid.
    Ablate,
    /// Draw overlays from saved score maps.
    Render {
        #[arg(long)]
        data: PathBuf,
        /// Directory of NNNNNN.pgm score maps named by sample id.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        cutoff: f64,
        /// Draw the kept band of this crop on the full-size images.
        #[arg(long)]
        band: Option<CropChoice>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| Failure::Config(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if common.paper_arch {
        cfg.use_paper_arch();
    }
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

/// The configuration restricted to one crop, so an unusable crop is a
/// configuration error rather than a failure mid-run.
fn with_crop(cfg: &ExperimentConfig, crop: CropChoice) -> CliResult<ExperimentConfig> {
    let mut one = cfg.clone();
    one.crops = vec![crop];
    one.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(one)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Generate => generate(&cfg),
        Command::Train { data, crop, loss } => train_cell(&cfg, &data, crop, loss),
        Command::Evaluate { checkpoint, data, crop } => evaluate(&cfg, &checkpoint, &data, crop),
        Command::Ablate => ablate(&cfg),
        Command::Render {
            data,
            scores,
            cutoff,
            band,
        } => render(&cfg, &data, &scores, cutoff, band),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn generate(cfg: &ExperimentConfig) -> CliResult<()> {
    let seed = cfg.seeds[0];
    let splits = prepare_splits(cfg, seed)?;
    for (name, set) in ["train", "val", "test"].into_iter().zip(splits.all()) {
        export_dataset(&cfg.out_dir.join(name), set)?;
    }
    println!(
        "wrote {} train, {} val, {} test samples to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

fn check_extent(cfg: &ExperimentConfig, samples: &[SegSample], dir: &Path) -> CliResult<()> {
    match samples.iter().find(|s| (s.rows(), s.cols()) != (cfg.gen.rows, cfg.gen.cols)) {
        Some(s) => Err(Failure::Config(format!(
            "{}: sample {} is {}x{} but the configuration expects {}x{}",
            dir.display(),
            s.id,
            s.rows(),
            s.cols(),
            cfg.gen.rows,
            cfg.gen.cols
        ))),
        None => Ok(()),
    }
}

fn load_cropped(cfg: &ExperimentConfig, dir: &Path, crop: &CropSpec, what: &str) -> CliResult<Vec<SegSample>> {
    let samples = import_dataset(dir)?;
    check_extent(cfg, &samples, dir)?;
    let (out, truncated, lost) = crop_split(&samples, crop)?;
    if truncated > 0 {
        eprintln!("warning: crop cuts into the disc of {truncated} {what} samples ({lost} foreground pixels lost)");
    }
    Ok(out)
}

fn train_cell(cfg: &ExperimentConfig, data: &Path, crop: CropChoice, loss: LossKind) -> CliResult<()> {
    let cfg = &with_crop(cfg, crop)?;
    let spec = crop.resolve(&cfg.gen);
    let train_set = load_cropped(cfg, &data.join("train"), &spec, "train")?;
    let val_set = load_cropped(cfg, &data.join("val"), &spec, "validation")?;
    let (rows, cols) = spec.output_extent(cfg.gen.rows, cfg.gen.cols);
    let seed = cfg.seeds[0];
    let initial = initial_model(cfg.model.with_input(rows, cols), seed, loss)?;
    let tc = cfg.train_config(loss, cell_train_seed(seed, &crop, loss));
    let outcome = train(&initial, &train_set, &val_set, &tc)?;
    create_dir(&cfg.out_dir)?;
    save_checkpoint(&outcome.model, &cfg.out_dir.join("model.cseg"))?;
    write_file(&cfg.out_dir.join("history.csv"), &history_csv(&outcome.history))?;
    let best = outcome.best();
    println!(
        "best epoch {} (validation {:.4}); checkpoint in {}",
        best.epoch,
        best.val_metric,
        cfg.out_dir.display()
    );
    Ok(())
}

fn evaluate(cfg: &ExperimentConfig, checkpoint: &Path, data: &Path, crop: CropChoice) -> CliResult<()> {
    let cfg = &with_crop(cfg, crop)?;
    let spec = crop.resolve(&cfg.gen);
    let test = load_cropped(cfg, data, &spec, "test")?;
    let (rows, cols) = spec.output_extent(cfg.gen.rows, cfg.gen.cols);
    let model = load_checkpoint_expecting(checkpoint, &cfg.model)?.with_input(rows, cols)?;
    let opts = EvalOptions {
        largest_component: cfg.largest_component,
        ..EvalOptions::default()
    };
    let (eval, scores) = evaluate_model(&model, &test, &opts)?;
    let out = &cfg.out_dir;
    create_dir(out)?;
    let s = &eval.summary;
    let fmt = fmt4;
    let text = format!(
        "sensitivity,specificity,precision,AUC,aPr,Dice,eDist,cutoff\n{},{},{},{},{},{},{},{}\n",
        fmt(s.sensitivity),
        fmt(s.specificity),
        fmt(s.precision),
        fmt(s.auc),
        fmt(s.apr),
        fmt(s.dice),
        fmt(s.edist),
        fmt(s.cutoff)
    );
    write_file(&out.join("summary.csv"), &text)?;
    print!("{text}");
    write_curves(out, &eval, &format!("{} {}", data.display(), crop.label()))?;
    let (score_dir, overlay_dir) = (out.join("scores"), out.join("overlays"));
    create_dir(&score_dir)?;
    create_dir(&overlay_dir)?;
    for ((sample, score), bin) in test.iter().zip(&scores).zip(&eval.binarized) {
        let name = format!("{:06}", sample.id);
        write_pgm(
            &score_dir.join(format!("{name}.pgm")),
            sample.rows(),
            sample.cols(),
            score.data(),
            u16::MAX,
        )?;
        render_overlay(&sample.image, bin, &sample.mask, None)?.write_ppm(&overlay_dir.join(format!("{name}.ppm")))?;
    }
    Ok(())
}

fn ablate(cfg: &ExperimentConfig) -> CliResult<()> {
    let report = run_ablation(cfg)?;
    for c in &report.cells {
        if c.truncation.any() {
            eprintln!(
                "warning: {} seed {}: crop cuts into {} train, {} val, {} test discs ({} foreground pixels lost)",
                c.label(),
                c.seed,
                c.truncation.train,
                c.truncation.val,
                c.truncation.test,
                c.truncation.lost_pixels
            );
        }
        if let CellStatus::Failed(msg) = &c.status {
            eprintln!("warning: {} seed {} failed: {msg}", c.label(), c.seed);
        }
    }
    let summary = fs::read_to_string(cfg.out_dir.join("summary.csv")).unwrap_or_default();
    print!("{summary}");
    println!("finished in {:.1}s; results in {}", report.elapsed_secs, cfg.out_dir.display());
    Ok(())
}

fn render(cfg: &ExperimentConfig, data: &Path, scores: &Path, cutoff: f64, band: Option<CropChoice>) -> CliResult<()> {
    if !(0.0..=1.0).contains(&cutoff) {
        return Err(Failure::Config(format!("cutoff {cutoff} is outside [0, 1]")));
    }
    let samples = import_dataset(data)?;
    let band = match band {
        Some(b) => Some(with_crop(cfg, b)?.crops[0].resolve(&cfg.gen)),
        None => None,
    };
    create_dir(&cfg.out_dir)?;
    for s in &samples {
        let path = scores.join(format!("{:06}.pgm", s.id));
        let (rows, cols, values) = read_pgm(&path)?;
        if (rows, cols) != (s.rows(), s.cols()) {
            return Err(Failure::Runtime(format!(
                "{}: score map is {rows}x{cols} but sample {} is {}x{}",
                path.display(),
                s.id,
                s.rows(),
                s.cols()
            )));
        }
        let score = Tensor::new(vec![rows, cols], values)?;
        let bin = binarize(&score, cutoff);
        render_overlay(&s.image, &bin, &s.mask, band.as_ref())?
            .write_ppm(&cfg.out_dir.join(format!("{:06}.ppm", s.id)))?;
    }
    println!("wrote {} overlays to {}", samples.len(), cfg.out_dir.display());
    Ok(())
}
