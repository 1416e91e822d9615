//! Experiment configuration and its flat `key = value` text form.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec};
use crate::optim::{SelectionMetric, TrainConfig};
use crate::synth::{CorpusSpec, CropSpec, GenParams};
use crate::unet::UNetConfig;

/// Kept extent along the band axis, optionally at an explicit offset
/// (otherwise centred on the generator band). Written `kept` or
/// `kept@offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CropChoice {
    pub kept: usize,
    pub offset: Option<usize>,
}

impl CropChoice {
    pub fn resolve(&self, gen: &GenParams) -> CropSpec {
        let centred = CropSpec::centered(gen, self.kept);
        CropSpec {
            offset: self.offset.unwrap_or(centred.offset),
            ..centred
        }
    }

    /// Stable identifier used to key per-cell random streams.
    pub fn id(&self) -> u64 {
        ((self.kept as u64) << 32) | self.offset.map_or(0xFFFF_FFFF, |o| o as u64)
    }

    pub fn label(&self) -> String {
        match self.offset {
            Some(o) => format!("ir{}o{}", self.kept, o),
            None => format!("ir{}", self.kept),
        }
    }
}

impl FromStr for CropChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad crop {s:?} (expected kept or kept@offset)"));
        let (kept, offset) = match s.trim().split_once('@') {
            Some((k, o)) => (k, Some(o.trim().parse().map_err(|_| bad())?)),
            None => (s.trim(), None),
        };
        Ok(Self {
            kept: kept.trim().parse().map_err(|_| bad())?,
            offset,
        })
    }
}

impl std::fmt::Display for CropChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.offset {
            Some(o) => write!(f, "{}@{}", self.kept, o),
            None => write!(f, "{}", self.kept),
        }
    }
}

/// Everything an ablation run needs. Defaults are the desk-scale setup.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub gen: GenParams,
    pub corpus: CorpusSpec,
    pub split: (f64, f64, f64),
    pub crops: Vec<CropChoice>,
    pub losses: Vec<LossKind>,
    pub tversky_beta: f64,
    pub tversky_epsilon: f64,
    /// Input extents are filled in per crop.
    pub model: UNetConfig,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub selection: SelectionMetric,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub largest_component: bool,
    pub overlays: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let gen = GenParams::default();
        Self {
            model: UNetConfig::desk(gen.rows, gen.cols),
            gen,
            corpus: CorpusSpec {
                patients: 66,
                ..CorpusSpec::default()
            },
            split: (100.0 / 120.0, 10.0 / 120.0, 10.0 / 120.0),
            crops: [64, 40, 24].map(|kept| CropChoice { kept, offset: None }).to_vec(),
            losses: vec![LossKind::Bce, LossKind::Tversky],
            tversky_beta: crate::losses::DEFAULT_BETA,
            tversky_epsilon: crate::losses::DEFAULT_EPSILON,
            epochs: 60,
            // At 1e-3 the tversky runs often saturate every output to zero
            // within two epochs and never recover; see the README.
            learning_rate: 1e-4,
            batch_size: 4,
            selection: SelectionMetric::ValidationDice,
            seeds: vec![0],
            out_dir: PathBuf::from("runs/ablation"),
            workers: 1,
            largest_component: false,
            overlays: true,
        }
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {:?}", s.trim())))
        })
        .collect()
}

fn one<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {:?}", v.trim())))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn loss_spec(&self, kind: LossKind) -> LossSpec {
        LossSpec {
            kind,
            beta: self.tversky_beta,
            epsilon: self.tversky_epsilon,
        }
    }

    pub fn train_config(&self, kind: LossKind, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            loss: self.loss_spec(kind),
            seed,
            selection: self.selection,
        }
    }

    /// Switches to the six-block architecture with paper filter counts.
    pub fn use_paper_arch(&mut self) {
        self.model = UNetConfig::paper(self.gen.rows, self.gen.cols);
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        if self.crops.is_empty() || self.losses.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("need at least one crop, one loss and one seed".into()));
        }
        let unique = |n: usize, m: usize, what: &str| {
            if n != m {
                Err(Error::Config(format!("duplicate entries in {what}")))
            } else {
                Ok(())
            }
        };
        unique(self.crops.iter().map(|c| c.id()).collect::<BTreeSet<_>>().len(), self.crops.len(), "crops")?;
        unique(self.losses.iter().map(|l| l.to_string()).collect::<BTreeSet<_>>().len(), self.losses.len(), "losses")?;
        unique(self.seeds.iter().collect::<BTreeSet<_>>().len(), self.seeds.len(), "seeds")?;
        if self.corpus.patients < 3 {
            return Err(Error::Config("need at least 3 patients".into()));
        }
        let extent = match self.gen.band_axis {
            crate::synth::Axis::Rows => self.gen.rows,
            crate::synth::Axis::Cols => self.gen.cols,
        };
        for c in &self.crops {
            let spec = c.resolve(&self.gen);
            if spec.kept == 0 || spec.offset + spec.kept > extent {
                return Err(Error::Config(format!("crop {c} does not fit extent {extent}")));
            }
            let (r, cols) = spec.output_extent(self.gen.rows, self.gen.cols);
            self.model.with_input(r, cols).validate()?;
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        for k in &self.losses {
            self.train_config(*k, 0).validate()?;
        }
        let (a, b, c) = self.split;
        if [a, b, c].iter().any(|&f| !(f > 0.0)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {:?} must be positive and sum to 1", self.split)));
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let g = &mut self.gen;
        let v = value.trim();
        match key {
            "rows" => g.rows = one(key, v)?,
            "cols" => g.cols = one(key, v)?,
            "downscale" => g.downscale = one(key, v)?,
            "band_axis" => g.band_axis = v.parse()?,
            "band_lo" => g.band.0 = one(key, v)?,
            "band_hi" => g.band.1 = one(key, v)?,
            "across_lo" => g.across.0 = one(key, v)?,
            "across_hi" => g.across.1 = one(key, v)?,
            "radius_min" => g.radius.0 = one(key, v)?,
            "radius_max" => g.radius.1 = one(key, v)?,
            "contrast_min" => g.contrast.0 = one(key, v)?,
            "contrast_max" => g.contrast.1 = one(key, v)?,
            "bright_probability" => g.bright_probability = one(key, v)?,
            "vessels_min" => g.vessels.0 = one(key, v)?,
            "vessels_max" => g.vessels.1 = one(key, v)?,
            "vessel_depth" => g.vessel_depth = one(key, v)?,
            "distractors_min" => g.distractors.0 = one(key, v)?,
            "distractors_max" => g.distractors.1 = one(key, v)?,
            "distractor_margin" => g.distractor_margin = one(key, v)?,
            "noise_std" => g.noise_std = one(key, v)?,
            "flip_probability" => g.flip_probability = one(key, v)?,
            "patients" => self.corpus.patients = one(key, v)?,
            "second_eye_probability" => self.corpus.second_eye_probability = one(key, v)?,
            "repeat_scan_probability" => self.corpus.repeat_scan_probability = one(key, v)?,
            "split_train" => self.split.0 = one(key, v)?,
            "split_val" => self.split.1 = one(key, v)?,
            "split_test" => self.split.2 = one(key, v)?,
            "crops" => self.crops = list(key, v)?,
            "losses" => self.losses = list(key, v)?,
            "tversky_beta" => self.tversky_beta = one(key, v)?,
            "tversky_epsilon" => self.tversky_epsilon = one(key, v)?,
            "encoder_filters" => self.model.encoder_filters = list(key, v)?,
            "decoder_filters" => self.model.decoder_filters = list(key, v)?,
            "kernel_extent" => self.model.kernel_extent = one(key, v)?,
            "dropout_rate" => self.model.dropout_rate = one(key, v)?,
            "paper_arch" => {
                if one::<bool>(key, v)? {
                    self.use_paper_arch();
                }
            }
            "epochs" => self.epochs = one(key, v)?,
            "learning_rate" => self.learning_rate = one(key, v)?,
            "batch_size" => self.batch_size = one(key, v)?,
            "selection" => self.selection = v.parse()?,
            "seeds" => self.seeds = list(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "workers" => self.workers = one(key, v)?,
            "largest_component" => self.largest_component = one(key, v)?,
            "overlays" => self.overlays = one(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored; a key may appear once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                e => e,
            })?;
        }
        cfg.model = cfg.model.with_input(cfg.gen.rows, cfg.gen.cols);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its current value, in a form [`ExperimentConfig::parse`]
    /// reads back.
    pub fn to_text(&self) -> String {
        let g = &self.gen;
        let pairs: Vec<(&str, String)> = vec![
            ("rows", g.rows.to_string()),
            ("cols", g.cols.to_string()),
            ("downscale", g.downscale.to_string()),
            ("band_axis", g.band_axis.to_string()),
            ("band_lo", g.band.0.to_string()),
            ("band_hi", g.band.1.to_string()),
            ("across_lo", g.across.0.to_string()),
            ("across_hi", g.across.1.to_string()),
            ("radius_min", g.radius.0.to_string()),
            ("radius_max", g.radius.1.to_string()),
            ("contrast_min", g.contrast.0.to_string()),
            ("contrast_max", g.contrast.1.to_string()),
            ("bright_probability", g.bright_probability.to_string()),
            ("vessels_min", g.vessels.0.to_string()),
            ("vessels_max", g.vessels.1.to_string()),
            ("vessel_depth", g.vessel_depth.to_string()),
            ("distractors_min", g.distractors.0.to_string()),
            ("distractors_max", g.distractors.1.to_string()),
            ("distractor_margin", g.distractor_margin.to_string()),
            ("noise_std", g.noise_std.to_string()),
            ("flip_probability", g.flip_probability.to_string()),
            ("patients", self.corpus.patients.to_string()),
            ("second_eye_probability", self.corpus.second_eye_probability.to_string()),
            ("repeat_scan_probability", self.corpus.repeat_scan_probability.to_string()),
            ("split_train", self.split.0.to_string()),
            ("split_val", self.split.1.to_string()),
            ("split_test", self.split.2.to_string()),
            ("crops", join(&self.crops)),
            ("losses", join(&self.losses)),
            ("tversky_beta", self.tversky_beta.to_string()),
            ("tversky_epsilon", self.tversky_epsilon.to_string()),
            ("encoder_filters", join(&self.model.encoder_filters)),
            ("decoder_filters", join(&self.model.decoder_filters)),
            ("kernel_extent", self.model.kernel_extent.to_string()),
            ("dropout_rate", self.model.dropout_rate.to_string()),
            ("epochs", self.epochs.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("selection", self.selection.to_string()),
            ("seeds", join(&self.seeds)),
            ("out_dir", self.out_dir.display().to_string()),
            ("workers", self.workers.to_string()),
            ("largest_component", self.largest_component.to_string()),
            ("overlays", self.overlays.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.crops.push(CropChoice { kept: 16, offset: Some(8) });
        c.seeds = vec![3, 1, 4];
        c.learning_rate = 0.00123;
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn parse_errors() {
        assert!(ExperimentConfig::parse("bogus = 1").is_err());
        assert!(ExperimentConfig::parse("epochs = many").is_err());
        assert!(ExperimentConfig::parse("epochs = 1\nepochs = 2").is_err());
        assert!(ExperimentConfig::parse("no equals sign").is_err());
        let c = ExperimentConfig::parse("# comment\n\nepochs = 7\nlosses = tversky\ncrops = 64, 32@16\n").unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.losses, vec![LossKind::Tversky]);
        assert_eq!(c.crops[1], CropChoice { kept: 32, offset: Some(16) });
        let c = ExperimentConfig::parse("crops = 30").unwrap();
        assert!(c.validate().is_err(), "30 rows is not divisible by 8");
        assert!(ExperimentConfig::parse("seeds = ").unwrap().validate().is_err());
    }

    #[test]
    fn paper_arch_switch() {
        let c = ExperimentConfig::parse("paper_arch = true\nrows = 256\ncols = 256\nradius_min = 10\nradius_max = 14\ncrops = 256,160,96").unwrap();
        assert_eq!(c.model.encoder_filters, vec![16, 32, 64, 128, 256, 512]);
        c.validate().unwrap();
    }
}
