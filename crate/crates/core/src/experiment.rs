//! The crop-by-loss ablation grid: corpus generation per seed, training and
//! evaluation per cell, and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::checkpoint::save_checkpoint;
use crate::config::{CropChoice, ExperimentConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, render_overlay, write_curves, EvalOptions, EvalSummary};
use crate::losses::LossKind;
use crate::optim::{train, EpochRecord};
use crate::rng;
use crate::synth::{crop_band, generate_corpus, split_by_patient, CropSpec, SegSample, Splits};
use crate::unet::{build_unet, Model, UNetConfig};

const SPLIT_KEY: u64 = 0x53_504c_4954;
const INIT_KEY: u64 = 0x494e_4954;
const CELL_KEY: u64 = 0x4345_4c4c;

pub const REPORT_COLUMNS: [&str; 9] = [
    "ir",
    "loss",
    "sensitivity",
    "specificity",
    "precision",
    "AUC",
    "aPr",
    "Dice",
    "eDist",
];

pub fn loss_id(kind: LossKind) -> u64 {
    match kind {
        LossKind::Bce => 1,
        LossKind::Tversky => 2,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellStatus {
    Ok,
    Failed(String),
}

/// Number of samples per split whose crop cut off ground truth foreground.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Truncation {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub lost_pixels: usize,
}

impl Truncation {
    pub fn any(&self) -> bool {
        self.train + self.val + self.test > 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub seed: u64,
    pub crop: CropChoice,
    pub loss: LossKind,
    pub status: CellStatus,
    pub summary: EvalSummary,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub truncation: Truncation,
    pub test_samples: usize,
}

impl CellResult {
    pub fn label(&self) -> String {
        format!("{}_{}_seed{}", self.loss, self.crop.label(), self.seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MedianRow {
    pub crop: CropChoice,
    pub loss: LossKind,
    pub summary: EvalSummary,
    pub seeds: usize,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    /// Ordered by loss, then crop, then seed, each in config order.
    pub cells: Vec<CellResult>,
    pub medians: Vec<MedianRow>,
    pub config: ExperimentConfig,
    pub elapsed_secs: f64,
}

impl ExperimentReport {
    pub fn cell(&self, loss: LossKind, kept: usize, seed: u64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.loss == loss && c.crop.kept == kept && c.seed == seed)
    }

    pub fn median(&self, loss: LossKind, kept: usize) -> Option<&MedianRow> {
        self.medians.iter().find(|m| m.loss == loss && m.crop.kept == kept)
    }
}

/// Fails early if `dir` cannot be created or written.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"ok").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

struct SeedData {
    seed: u64,
    splits: Splits,
}

/// Crops every sample; returns the crops, how many lost foreground and the
/// total foreground pixels lost.
pub fn crop_split(samples: &[SegSample], crop: &CropSpec) -> Result<(Vec<SegSample>, usize, usize)> {
    let mut out = Vec::with_capacity(samples.len());
    let (mut truncated, mut lost) = (0, 0);
    for s in samples {
        let c = crop_band(s, crop)?;
        truncated += usize::from(c.truncated());
        lost += c.lost_foreground;
        out.push(c.sample);
    }
    Ok((out, truncated, lost))
}

struct CellJob<'a> {
    data: &'a SeedData,
    crop: CropChoice,
    loss: LossKind,
}

fn run_cell(cfg: &ExperimentConfig, job: &CellJob, out_dir: Option<&Path>) -> CellResult {
    let mut result = CellResult {
        seed: job.data.seed,
        crop: job.crop,
        loss: job.loss,
        status: CellStatus::Ok,
        summary: EvalSummary::failed(),
        best_epoch: 0,
        history: Vec::new(),
        truncation: Truncation::default(),
        test_samples: job.data.splits.test.len(),
    };
    if let Err(e) = run_cell_inner(cfg, job, out_dir, &mut result) {
        result.status = CellStatus::Failed(e.to_string());
        result.summary = EvalSummary::failed();
    }
    result
}

fn run_cell_inner(cfg: &ExperimentConfig, job: &CellJob, out_dir: Option<&Path>, result: &mut CellResult) -> Result<()> {
    let spec = job.crop.resolve(&cfg.gen);
    let splits = &job.data.splits;
    let (train_set, t_tr, l_tr) = crop_split(&splits.train, &spec)?;
    let (val_set, t_va, l_va) = crop_split(&splits.val, &spec)?;
    let (test_set, t_te, l_te) = crop_split(&splits.test, &spec)?;
    result.truncation = Truncation {
        train: t_tr,
        val: t_va,
        test: t_te,
        lost_pixels: l_tr + l_va + l_te,
    };
    let cropped = Splits {
        train: train_set,
        val: val_set,
        test: test_set,
    };
    if !cropped.patient_disjoint() {
        return Err(Error::invalid("ablation", "a patient appears in more than one split"));
    }

    let (rows, cols) = spec.output_extent(cfg.gen.rows, cfg.gen.cols);
    let initial = initial_model(cfg.model.with_input(rows, cols), job.data.seed, job.loss)?;
    let tc = cfg.train_config(job.loss, cell_train_seed(job.data.seed, &job.crop, job.loss));
    let outcome = train(&initial, &cropped.train, &cropped.val, &tc)?;
    result.best_epoch = outcome.best_epoch;
    result.history = outcome.history.clone();
    let opts = EvalOptions {
        largest_component: cfg.largest_component,
        ..EvalOptions::default()
    };
    let (eval, _scores) = evaluate_model(&outcome.model, &cropped.test, &opts)?;
    result.summary = eval.summary;

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&outcome.model, &dir.join("model.cseg"))?;
        write_curves(dir, &eval, &format!("{} {}", job.loss, job.crop.label()))?;
        let p = dir.join("history.csv");
        fs::write(&p, history_csv(&outcome.history)).map_err(|e| Error::io(&p, e))?;
        if cfg.overlays {
            let od = dir.join("overlays");
            fs::create_dir_all(&od).map_err(|e| Error::io(&od, e))?;
            for (s, b) in cropped.test.iter().zip(&eval.binarized) {
                render_overlay(&s.image, b, &s.mask, None)?.write_ppm(&od.join(format!("{:06}.ppm", s.id)))?;
            }
        }
    }
    Ok(())
}

/// Initial weights for a cell. One initialization per (seed, loss), shared
/// across crops: the network is fully convolutional, so crops differ only in
/// their data.
pub fn initial_model(model_cfg: UNetConfig, seed: u64, loss: LossKind) -> Result<Model> {
    build_unet(model_cfg, &mut rng::stream(seed, &[INIT_KEY, loss_id(loss)]))
}

/// Seed for a cell's shuffling and dropout streams.
pub fn cell_train_seed(seed: u64, crop: &CropChoice, loss: LossKind) -> u64 {
    rng::stream(seed, &[CELL_KEY, crop.id(), loss_id(loss)]).random()
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_metric\n");
    for h in history {
        let _ = writeln!(out, "{},{},{}", h.epoch, h.train_loss, h.val_metric);
    }
    out
}

/// Generates the corpus for `seed` and splits it by patient.
pub fn prepare_splits(cfg: &ExperimentConfig, seed: u64) -> Result<Splits> {
    let corpus = generate_corpus(&cfg.gen, &cfg.corpus, seed)?;
    split_by_patient(&corpus, cfg.split, &mut rng::stream(seed, &[SPLIT_KEY]))
}

fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    Ok(SeedData {
        seed,
        splits: prepare_splits(cfg, seed)?,
    })
}

/// Runs every (seed, crop, loss) cell and assembles the report. When
/// `write` is set, per-cell artifacts and the report files go to
/// `cfg.out_dir`.
pub fn run_ablation_with(cfg: &ExperimentConfig, write: bool) -> Result<ExperimentReport> {
    cfg.validate()?;
    if write {
        ensure_writable(&cfg.out_dir)?;
    }
    let start = Instant::now();
    let seeds: Vec<SeedData> = cfg
        .seeds
        .iter()
        .map(|&s| prepare_seed(cfg, s))
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for &loss in &cfg.losses {
        for &crop in &cfg.crops {
            for data in &seeds {
                jobs.push(CellJob { data, crop, loss });
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.workers)))?;
    let cells: Vec<CellResult> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let dir = write.then(|| {
                    cfg.out_dir
                        .join("cells")
                        .join(format!("{}_{}_seed{}", job.loss, job.crop.label(), job.data.seed))
                });
                run_cell(cfg, job, dir.as_deref())
            })
            .collect()
    });
    let medians = median_rows(cfg, &cells);
    let report = ExperimentReport {
        cells,
        medians,
        config: cfg.clone(),
        elapsed_secs: start.elapsed().as_secs_f64(),
    };
    if write {
        emit_report(&report, &cfg.out_dir)?;
    }
    Ok(report)
}

pub fn run_ablation(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_ablation_with(cfg, true)
}

/// Median with undefined values ranked worst: below everything when higher is
/// better, above everything otherwise.
pub fn median_worst_nan(values: &[f64], higher_is_better: bool) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let key = |v: f64| match (v.is_nan(), higher_is_better) {
        (true, true) => f64::NEG_INFINITY,
        (true, false) => f64::INFINITY,
        _ => v,
    };
    let mut v = values.to_vec();
    v.sort_by(|a, b| key(*a).total_cmp(&key(*b)));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        // Any nan among the middle pair leaves the median undefined.
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn median_rows(cfg: &ExperimentConfig, cells: &[CellResult]) -> Vec<MedianRow> {
    let mut rows = Vec::new();
    for &loss in &cfg.losses {
        for &crop in &cfg.crops {
            let group: Vec<&EvalSummary> = cells
                .iter()
                .filter(|c| c.loss == loss && c.crop == crop)
                .map(|c| &c.summary)
                .collect();
            let med = |f: fn(&EvalSummary) -> f64, hib: bool| {
                median_worst_nan(&group.iter().map(|s| f(s)).collect::<Vec<_>>(), hib)
            };
            rows.push(MedianRow {
                crop,
                loss,
                seeds: group.len(),
                summary: EvalSummary {
                    sensitivity: med(|s| s.sensitivity, true),
                    specificity: med(|s| s.specificity, true),
                    precision: med(|s| s.precision, true),
                    auc: med(|s| s.auc, true),
                    apr: med(|s| s.apr, true),
                    dice: med(|s| s.dice, true),
                    edist: med(|s| s.edist, false),
                    cutoff: med(|s| s.cutoff, true),
                },
            });
        }
    }
    rows
}

/// Four decimals; undefined values print as `nan`.
pub fn fmt4(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.4}")
    }
}

fn metric_fields(s: &EvalSummary) -> String {
    [
        s.sensitivity,
        s.specificity,
        s.precision,
        s.auc,
        s.apr,
        s.dice,
        s.edist,
    ]
    .map(fmt4)
    .join(",")
}

/// `report.csv`: one row per cell.
pub fn report_csv(report: &ExperimentReport) -> String {
    let mut s = REPORT_COLUMNS.join(",");
    s.push('\n');
    for c in &report.cells {
        let _ = writeln!(s, "{},{},{}", c.crop.kept, c.loss, metric_fields(&c.summary));
    }
    s
}

/// `summary.csv`: medians over seeds per (crop, loss).
pub fn summary_csv(report: &ExperimentReport) -> String {
    let mut s = REPORT_COLUMNS.join(",");
    s.push_str(",seeds\n");
    for m in &report.medians {
        let _ = writeln!(s, "{},{},{},{}", m.crop.kept, m.loss, metric_fields(&m.summary), m.seeds);
    }
    s
}

/// `cells.csv`: per-cell bookkeeping that does not belong in the report.
pub fn cells_csv(report: &ExperimentReport) -> String {
    let mut s = String::from(
        "ir,offset,loss,seed,status,best_epoch,cutoff,test_samples,truncated_train,truncated_val,truncated_test,lost_foreground_pixels,message\n",
    );
    for c in &report.cells {
        let spec = c.crop.resolve(&report.config.gen);
        let (status, msg) = match &c.status {
            CellStatus::Ok => ("ok", String::new()),
            CellStatus::Failed(m) => ("failed", m.replace([',', '\n'], ";")),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{status},{},{},{},{},{},{},{},{msg}",
            c.crop.kept,
            spec.offset,
            c.loss,
            c.seed,
            c.best_epoch,
            fmt4(c.summary.cutoff),
            c.test_samples,
            c.truncation.train,
            c.truncation.val,
            c.truncation.test,
            c.truncation.lost_pixels
        );
    }
    s
}

/// Human-readable run description listing every choice the method leaves
/// open, followed by the complete configuration.
pub fn metadata_text(report: &ExperimentReport) -> String {
    let c = &report.config;
    let mut s = String::from("# cropseg run metadata\n\n[defaults not fixed by the method]\n");
    let lines = [
        format!("tversky_beta = {} (weight on false positives; 1 - beta on false negatives)", c.tversky_beta),
        format!("tversky_epsilon = {} (smoothing in numerator and denominator)", c.tversky_epsilon),
        format!("learning_rate = {}", c.learning_rate),
        format!("batch_size = {}", c.batch_size),
        "adam = beta1 0.9, beta2 0.999, eps 1e-8".to_string(),
        format!("epochs = {} (reference setting 300)", c.epochs),
        format!("selection = {} at threshold 0.5, earliest epoch wins ties", c.selection),
        "cutoff_rule = max F1 on the pooled test precision-recall curve, ties to the highest threshold; constant scores binarize empty".to_string(),
        "pooling = pixels pooled over the whole test set for PR/ROC and confusion counts".to_string(),
        "edist = mean over test images with non-empty ground truth of the centroid distance at the cut-off; any empty prediction gives nan".to_string(),
        format!("largest_component_before_edist = {}", c.largest_component),
        "zero_division = precision, sensitivity, specificity and Dice report 0 for empty denominators".to_string(),
        "no_positives = aPr and AUC nan, cut-off 0.5".to_string(),
        format!("architecture = {}", c.model),
        "init = He-uniform weights, zero biases; one draw per (seed, loss) shared across crops".to_string(),
        "band_placement = crops centred on the generator band unless an offset is given".to_string(),
        "data = synthetic corpus (elliptical discs, vessel curves, off-band distractor blobs, gaussian noise)".to_string(),
        "report_median = median over seeds with nan ranked worst".to_string(),
    ];
    for l in lines {
        let _ = writeln!(s, "{l}");
    }
    let failed = report.cells.iter().filter(|x| x.status != CellStatus::Ok).count();
    let truncated = report.cells.iter().filter(|x| x.truncation.any()).count();
    let _ = writeln!(s, "\n[run]\ncells = {}\nfailed_cells = {failed}\ncells_with_truncated_ground_truth = {truncated}", report.cells.len());
    let _ = writeln!(s, "\n[config]\n{}", c.to_text());
    s
}

pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let put = |name: &str, body: String| -> Result<PathBuf> {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    };
    put("report.csv", report_csv(report))?;
    put("summary.csv", summary_csv(report))?;
    put("cells.csv", cells_csv(report))?;
    put("metadata.txt", metadata_text(report))?;
    Ok(())
}

/// Parses a `report.csv` body back into `(ir, loss, metrics[7])` rows.
pub fn parse_report_csv(text: &str) -> Result<Vec<(usize, LossKind, [f64; 7])>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != REPORT_COLUMNS.join(",") {
        return Err(Error::Config(format!("unexpected report header {header:?}")));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 9 {
                return Err(Error::Config(format!("report row {l:?} has {} fields", f.len())));
            }
            let ir = f[0].parse().map_err(|_| Error::Config(format!("bad ir {:?}", f[0])))?;
            let mut m = [0.0; 7];
            for (slot, v) in m.iter_mut().zip(&f[2..]) {
                *slot = v.parse().map_err(|_| Error::Config(format!("bad metric {v:?}")))?;
            }
            Ok((ir, f[1].parse()?, m))
        })
        .collect()
}
