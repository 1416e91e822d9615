//! Synthetic en face corpus: disc-shaped targets inside a known band, vessel
//! curves, disc-like distractors outside the band, and additive noise; plus
//! preprocessing, patient-level splitting, band cropping and dataset I/O.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pnm;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    Rows,
    Cols,
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "rows" => Ok(Axis::Rows),
            "cols" => Ok(Axis::Cols),
            other => Err(Error::Config(format!("unknown axis {other:?} (rows|cols)"))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Rows => "rows",
            Axis::Cols => "cols",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Laterality {
    Left,
    Right,
}

impl fmt::Display for Laterality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Laterality::Left => "left",
            Laterality::Right => "right",
        })
    }
}

impl FromStr for Laterality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "left" => Ok(Laterality::Left),
            "right" => Ok(Laterality::Right),
            other => Err(Error::Config(format!("unknown laterality {other:?}"))),
        }
    }
}

/// An intensity image with its binary target mask, both `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: usize,
    pub patient_id: u32,
    pub eye_id: u32,
    pub laterality: Laterality,
    pub image: Tensor,
    pub mask: Tensor,
}

impl SegSample {
    pub fn new(
        id: usize,
        patient_id: u32,
        eye_id: u32,
        laterality: Laterality,
        image: Tensor,
        mask: Tensor,
    ) -> Result<Self> {
        let [1, _, _] = image.shape() else {
            return Err(Error::invalid("sample", format!("image shape {:?} is not [1,H,W]", image.shape())));
        };
        if image.shape() != mask.shape() {
            return Err(Error::invalid(
                "sample",
                format!("image {:?} and mask {:?} differ", image.shape(), mask.shape()),
            ));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("sample", "mask values must be 0 or 1"));
        }
        Ok(Self {
            id,
            patient_id,
            eye_id,
            laterality,
            image,
            mask,
        })
    }

    pub fn rows(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v > 0.5).count()
    }

    /// Mirror across the vertical axis (columns reversed), image and mask
    /// together.
    pub fn mirrored(&self) -> Self {
        let flip = |t: &Tensor| {
            let (r, c) = (t.shape()[1], t.shape()[2]);
            let mut d = t.data().to_vec();
            for row in d.chunks_exact_mut(c).take(r) {
                row.reverse();
            }
            Tensor::new(t.shape().to_vec(), d).expect("same shape")
        };
        Self {
            image: flip(&self.image),
            mask: flip(&self.mask),
            ..self.clone()
        }
    }
}

/// Parameters of the synthetic image model. Geometry is in output pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct GenParams {
    pub rows: usize,
    pub cols: usize,
    /// Render at `downscale` times the output size, then block-average.
    pub downscale: usize,
    pub band_axis: Axis,
    /// Permitted disc-centre band along `band_axis`, as fractions of the extent.
    pub band: (f64, f64),
    /// Disc-centre range across the band axis for right eyes (mirrored for left).
    pub across: (f64, f64),
    /// Semi-axis range of the elliptical disc.
    pub radius: (f64, f64),
    /// Disc contrast magnitude range; the sign is drawn per sample.
    pub contrast: (f64, f64),
    pub bright_probability: f64,
    pub vessels: (usize, usize),
    pub vessel_depth: f64,
    /// Soft disc-like blobs placed outside the band (fovea, artifacts).
    pub distractors: (usize, usize),
    /// Band widening (fraction of the extent) that distractor centres avoid.
    pub distractor_margin: f64,
    pub noise_std: f64,
    /// Probability that a standalone sample is a left eye (mirrored).
    pub flip_probability: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 64,
            downscale: 1,
            band_axis: Axis::Rows,
            band: (0.42, 0.58),
            across: (0.15, 0.4),
            radius: (3.0, 5.0),
            contrast: (0.2, 0.35),
            bright_probability: 0.5,
            vessels: (3, 6),
            vessel_depth: 0.18,
            distractors: (1, 3),
            distractor_margin: 0.12,
            noise_std: 0.05,
            flip_probability: 0.5,
        }
    }
}

impl GenParams {
    fn band_extent(&self) -> usize {
        match self.band_axis {
            Axis::Rows => self.rows,
            Axis::Cols => self.cols,
        }
    }

    fn across_extent(&self) -> usize {
        match self.band_axis {
            Axis::Rows => self.cols,
            Axis::Cols => self.rows,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rows == 0 || self.cols == 0 || self.downscale == 0 {
            return bad("image extents and downscale must be positive".into());
        }
        let (lo, hi) = self.band;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return bad(format!("band ({lo}, {hi}) must satisfy 0 <= lo < hi <= 1"));
        }
        let (alo, ahi) = self.across;
        if !(0.0 <= alo && alo <= ahi && ahi <= 1.0) {
            return bad(format!("across range ({alo}, {ahi}) invalid"));
        }
        let (rlo, rhi) = self.radius;
        if !(rlo > 0.0 && rlo <= rhi) {
            return bad(format!("radius range ({rlo}, {rhi}) invalid"));
        }
        let n = (self.band_extent() - 1) as f64;
        if lo * n < rhi || hi * n + rhi > n {
            return bad(format!(
                "disc radius up to {rhi} px does not fit around band ({lo}, {hi}) of {} px",
                n + 1.0
            ));
        }
        let m = (self.across_extent() - 1) as f64;
        if alo * m < rhi || ahi * m + rhi > m {
            return bad(format!("disc radius up to {rhi} px does not fit across range ({alo}, {ahi})"));
        }
        let (clo, chi) = self.contrast;
        if !(0.0 <= clo && clo <= chi) {
            return bad(format!("contrast range ({clo}, {chi}) invalid"));
        }
        if self.vessels.0 > self.vessels.1 || self.distractors.0 > self.distractors.1 {
            return bad("count ranges must satisfy min <= max".into());
        }
        for (name, p) in [
            ("bright_probability", self.bright_probability),
            ("flip_probability", self.flip_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(self.noise_std >= 0.0) || !(self.distractor_margin >= 0.0) {
            return bad("noise_std and distractor_margin must be non-negative".into());
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn count<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

/// Scene description in canonical (right-eye, row-band) coordinates:
/// `u` runs along the band axis, `v` across it.
struct Scene {
    disc: (f64, f64),
    semi: (f64, f64),
    disc_contrast: f64,
    waves: Vec<(f64, f64, f64, f64)>,
    blobs: Vec<(f64, f64, f64, f64)>,
    vessel_points: Vec<(f64, f64, f64)>,
}

impl Scene {
    fn draw<R: Rng + ?Sized>(p: &GenParams, rng: &mut R) -> Self {
        let nu = p.band_extent() as f64 - 1.0;
        let nv = p.across_extent() as f64 - 1.0;
        let disc = (uniform(rng, (p.band.0 * nu, p.band.1 * nu)), uniform(rng, (p.across.0 * nv, p.across.1 * nv)));
        let semi = (uniform(rng, p.radius), uniform(rng, p.radius));
        let sign = if rng.random::<f64>() < p.bright_probability { 1.0 } else { -1.0 };
        let disc_contrast = sign * uniform(rng, p.contrast);

        let waves = (0..3)
            .map(|_| {
                let amp = rng.random_range(0.02..0.05);
                let fu = rng.random_range(-1.5..1.5) / (nu + 1.0);
                let fv = rng.random_range(-1.5..1.5) / (nv + 1.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (amp, fu, fv, phase)
            })
            .collect();

        let lo = (p.band.0 - p.distractor_margin).max(0.0);
        let hi = (p.band.1 + p.distractor_margin).min(1.0);
        let outside = lo + (1.0 - hi);
        let blobs = if outside <= 0.0 {
            Vec::new()
        } else {
            (0..count(rng, p.distractors))
                .map(|_| {
                    let t = rng.random_range(0.0..outside);
                    let fu = if t < lo { t } else { hi + (t - lo) };
                    let u = fu * nu;
                    let v = rng.random_range(0.0..=nv);
                    let sigma = uniform(rng, (0.6 * p.radius.0, 0.9 * p.radius.1));
                    let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    (u, v, sigma, s * uniform(rng, p.contrast) * 1.2)
                })
                .collect()
        };

        // Vessels leave the disc as smoothly turning random walks.
        let mut vessel_points = Vec::new();
        for _ in 0..count(rng, p.vessels) {
            let mut pos = disc;
            let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
            let width = rng.random_range(0.5..1.0);
            let steps = rng.random_range(40..120);
            for _ in 0..steps {
                vessel_points.push((pos.0, pos.1, width));
                angle += rng.random_range(-0.25..0.25);
                pos.0 += 0.5 * angle.cos();
                pos.1 += 0.5 * angle.sin();
                if pos.0 < -2.0 || pos.1 < -2.0 || pos.0 > nu + 2.0 || pos.1 > nv + 2.0 {
                    break;
                }
            }
        }
        Self {
            disc,
            semi,
            disc_contrast,
            waves,
            blobs,
            vessel_points,
        }
    }

    fn in_disc(&self, u: f64, v: f64) -> bool {
        let du = (u - self.disc.0) / self.semi.0;
        let dv = (v - self.disc.1) / self.semi.1;
        du * du + dv * dv <= 1.0
    }

    fn intensity(&self, u: f64, v: f64) -> f64 {
        let mut val = 0.5;
        for &(amp, fu, fv, ph) in &self.waves {
            val += amp * (std::f64::consts::TAU * (fu * u + fv * v) + ph).cos();
        }
        for &(bu, bv, sigma, amp) in &self.blobs {
            let d2 = (u - bu).powi(2) + (v - bv).powi(2);
            val += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
        if self.in_disc(u, v) {
            val += self.disc_contrast;
            // Central cup.
            let du = (u - self.disc.0) / (0.45 * self.semi.0);
            let dv = (v - self.disc.1) / (0.45 * self.semi.1);
            if du * du + dv * dv <= 1.0 {
                val += 0.4 * self.disc_contrast;
            }
        }
        val
    }
}

/// Generates one sample; laterality is drawn with `flip_probability`.
pub fn generate_sample<R: Rng + ?Sized>(params: &GenParams, rng: &mut R) -> Result<SegSample> {
    params.validate()?;
    let lat = if rng.random::<f64>() < params.flip_probability {
        Laterality::Left
    } else {
        Laterality::Right
    };
    render(params, lat, 0, 0, 0, rng)
}

fn render<R: Rng + ?Sized>(
    p: &GenParams,
    laterality: Laterality,
    id: usize,
    patient_id: u32,
    eye_id: u32,
    rng: &mut R,
) -> Result<SegSample> {
    let scene = Scene::draw(p, rng);
    let f = p.downscale;
    let (hr, hc) = (p.rows * f, p.cols * f);
    // (row, col) in output-pixel units -> (u, v) scene coordinates.
    let to_scene = |r: f64, c: f64| match p.band_axis {
        Axis::Rows => (r, c),
        Axis::Cols => (c, r),
    };
    let mut hi = vec![0.0; hr * hc];
    for (idx, val) in hi.iter_mut().enumerate() {
        let r = ((idx / hc) as f64 + 0.5) / f as f64 - 0.5;
        let c = ((idx % hc) as f64 + 0.5) / f as f64 - 0.5;
        let (u, v) = to_scene(r, c);
        *val = scene.intensity(u, v);
    }
    // Vessel darkening: max over stamped points so crossings do not stack.
    let mut vessel = vec![0.0f64; hr * hc];
    for &(pu, pv, w) in &scene.vessel_points {
        let (pr, pc) = match p.band_axis {
            Axis::Rows => (pu, pv),
            Axis::Cols => (pv, pu),
        };
        let reach = 2.5 * w;
        let r0 = (((pr - reach + 0.5) * f as f64).floor().max(0.0)) as usize;
        let r1 = (((pr + reach + 0.5) * f as f64).ceil().max(0.0) as usize).min(hr);
        let c0 = (((pc - reach + 0.5) * f as f64).floor().max(0.0)) as usize;
        let c1 = (((pc + reach + 0.5) * f as f64).ceil().max(0.0) as usize).min(hc);
        for rr in r0..r1 {
            let r = (rr as f64 + 0.5) / f as f64 - 0.5;
            for cc in c0..c1 {
                let c = (cc as f64 + 0.5) / f as f64 - 0.5;
                let d2 = (r - pr).powi(2) + (c - pc).powi(2);
                let k = (-d2 / (2.0 * w * w)).exp();
                let slot = &mut vessel[rr * hc + cc];
                *slot = slot.max(k);
            }
        }
    }
    for (v, k) in hi.iter_mut().zip(&vessel) {
        *v -= p.vessel_depth * k;
    }
    let hi = Tensor::new(vec![1, hr, hc], hi)?;
    let mut lo = if f > 1 { block_mean(&hi, f)? } else { hi };
    let noise = Normal::new(0.0, p.noise_std.max(0.0)).expect("valid std");
    for v in lo.data_mut() {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    let image = preprocess(&lo, 1)?;

    let mut mask = vec![0.0; p.rows * p.cols];
    for (idx, m) in mask.iter_mut().enumerate() {
        let (u, v) = to_scene((idx / p.cols) as f64, (idx % p.cols) as f64);
        if scene.in_disc(u, v) {
            *m = 1.0;
        }
    }
    let mask = Tensor::new(vec![1, p.rows, p.cols], mask)?;
    let sample = SegSample::new(id, patient_id, eye_id, Laterality::Right, image, mask)?;
    Ok(match laterality {
        Laterality::Right => sample,
        Laterality::Left => SegSample {
            laterality: Laterality::Left,
            ..sample.mirrored()
        },
    })
}

fn block_mean(image: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = match *image.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::Rank {
                op: "preprocess",
                expected: "2 ([H,W]) or 3 ([C,H,W])",
                got: image.shape().to_vec(),
            })
        }
    };
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(
            "preprocess",
            format!("extents {h}x{w} not divisible by factor {factor}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; c * oh * ow];
    let src = image.data();
    let norm = (factor * factor) as f64;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[ch * oh * ow + (y / factor) * ow + x / factor] += src[ch * h * w + y * w + x];
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= norm);
    let mut shape = image.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Tensor::new(shape, out)
}

/// Block-mean downscale by `factor`, then min-max normalization to `[0, 1]`.
/// A constant image maps to all zeros.
pub fn preprocess(image: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::invalid("preprocess", "factor must be positive"));
    }
    let mut out = block_mean(image, factor)?;
    let (min, max) = out
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = max - min;
    for v in out.data_mut() {
        *v = if span > 0.0 { (*v - min) / span } else { 0.0 };
    }
    Ok(out)
}

/// Corpus shape: patients with one or two eyes and one or more scans per eye.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub patients: usize,
    pub second_eye_probability: f64,
    pub repeat_scan_probability: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            patients: 40,
            second_eye_probability: 0.4,
            repeat_scan_probability: 0.3,
        }
    }
}

/// Deterministic corpus for `seed`. Each patient draws from its own stream,
/// so growing the patient count leaves earlier patients unchanged.
pub fn generate_corpus(params: &GenParams, spec: &CorpusSpec, seed: u64) -> Result<Vec<SegSample>> {
    params.validate()?;
    let mut samples = Vec::new();
    let mut eye_id = 0u32;
    for patient in 0..spec.patients {
        let mut rng = rng::stream(seed, &[0xC0_4905, patient as u64]);
        let first = if rng.random::<bool>() {
            Laterality::Left
        } else {
            Laterality::Right
        };
        let mut eyes = vec![first];
        if rng.random::<f64>() < spec.second_eye_probability {
            eyes.push(match first {
                Laterality::Left => Laterality::Right,
                Laterality::Right => Laterality::Left,
            });
        }
        for lat in eyes {
            let scans = 1 + usize::from(rng.random::<f64>() < spec.repeat_scan_probability);
            for _ in 0..scans {
                let id = samples.len();
                samples.push(render(params, lat, id, patient as u32, eye_id, &mut rng)?);
            }
            eye_id += 1;
        }
    }
    Ok(samples)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
    pub test: Vec<SegSample>,
}

impl Splits {
    pub fn all(&self) -> [&[SegSample]; 3] {
        [&self.train, &self.val, &self.test]
    }

    /// True when no patient occurs in more than one split.
    pub fn patient_disjoint(&self) -> bool {
        let sets: Vec<BTreeSet<u32>> = self
            .all()
            .iter()
            .map(|s| s.iter().map(|x| x.patient_id).collect())
            .collect();
        sets[0].is_disjoint(&sets[1]) && sets[0].is_disjoint(&sets[2]) && sets[1].is_disjoint(&sets[2])
    }
}

/// Assigns whole patients to train/validation/test so sample counts track
/// `fractions`. Patients are visited in seeded random order; each goes to
/// the split furthest below its target.
pub fn split_by_patient<R: Rng + ?Sized>(
    samples: &[SegSample],
    fractions: (f64, f64, f64),
    rng: &mut R,
) -> Result<Splits> {
    let f = [fractions.0, fractions.1, fractions.2];
    if f.iter().any(|&x| !(x > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let mut by_patient: BTreeMap<u32, Vec<&SegSample>> = BTreeMap::new();
    for s in samples {
        by_patient.entry(s.patient_id).or_default().push(s);
    }
    if by_patient.len() < 3 {
        return Err(Error::invalid(
            "split_by_patient",
            format!("need at least 3 patients, got {}", by_patient.len()),
        ));
    }
    let mut patients: Vec<u32> = by_patient.keys().copied().collect();
    patients.shuffle(rng);
    let total = samples.len() as f64;
    let targets: Vec<f64> = f.iter().map(|x| x * total).collect();
    let mut counts = [0usize; 3];
    let mut owner: Vec<Vec<u32>> = vec![Vec::new(); 3];
    for p in patients {
        let k = (0..3)
            .max_by(|&a, &b| {
                let da = targets[a] - counts[a] as f64;
                let db = targets[b] - counts[b] as f64;
                // Ties favour the lower index.
                da.partial_cmp(&db).unwrap().then(b.cmp(&a))
            })
            .unwrap();
        counts[k] += by_patient[&p].len();
        owner[k].push(p);
    }
    // Every split needs at least one patient.
    for k in 0..3 {
        if owner[k].is_empty() {
            let donor = (0..3).max_by_key(|&j| owner[j].len()).unwrap();
            let p = owner[donor].pop().unwrap();
            owner[k].push(p);
        }
    }
    let collect = |ps: &[u32]| -> Vec<SegSample> {
        let set: BTreeSet<u32> = ps.iter().copied().collect();
        samples
            .iter()
            .filter(|s| set.contains(&s.patient_id))
            .cloned()
            .collect()
    };
    Ok(Splits {
        train: collect(&owner[0]),
        val: collect(&owner[1]),
        test: collect(&owner[2]),
    })
}

/// The band of `kept` pixels along `axis` starting at `offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSpec {
    pub axis: Axis,
    pub kept: usize,
    pub offset: usize,
}

impl CropSpec {
    /// A band of `kept` pixels centred on the generator's disc band.
    pub fn centered(params: &GenParams, kept: usize) -> Self {
        let extent = params.band_extent();
        let centre = 0.5 * (params.band.0 + params.band.1) * extent as f64;
        let offset = (centre - kept as f64 / 2.0).round().max(0.0) as usize;
        Self {
            axis: params.band_axis,
            kept,
            offset: offset.min(extent.saturating_sub(kept)),
        }
    }

    pub fn full(params: &GenParams) -> Self {
        Self {
            axis: params.band_axis,
            kept: params.band_extent(),
            offset: 0,
        }
    }

    /// Output `(rows, cols)` for an input of `rows x cols`.
    pub fn output_extent(&self, rows: usize, cols: usize) -> (usize, usize) {
        match self.axis {
            Axis::Rows => (self.kept, cols),
            Axis::Cols => (rows, self.kept),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropOutcome {
    pub sample: SegSample,
    /// Foreground pixels of the original mask that fell outside the band.
    pub lost_foreground: usize,
}

impl CropOutcome {
    /// The cropped ground truth no longer covers the whole target.
    pub fn truncated(&self) -> bool {
        self.lost_foreground > 0
    }
}

fn crop_tensor(t: &Tensor, spec: &CropSpec) -> Result<Tensor> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let (r0, c0) = match spec.axis {
        Axis::Rows => (spec.offset, 0),
        Axis::Cols => (0, spec.offset),
    };
    let (oh, ow) = spec.output_extent(h, w);
    let mut out = Vec::with_capacity(oh * ow);
    for r in r0..r0 + oh {
        out.extend_from_slice(&t.data()[r * w + c0..r * w + c0 + ow]);
    }
    Tensor::new(vec![1, oh, ow], out)
}

/// Crops image and mask identically, reporting any foreground the band cut
/// off.
pub fn crop_band(sample: &SegSample, spec: &CropSpec) -> Result<CropOutcome> {
    let extent = match spec.axis {
        Axis::Rows => sample.rows(),
        Axis::Cols => sample.cols(),
    };
    if spec.kept == 0 || spec.offset + spec.kept > extent {
        return Err(Error::invalid(
            "crop_band",
            format!(
                "band offset {} + kept {} exceeds {} extent {extent}",
                spec.offset, spec.kept, spec.axis
            ),
        ));
    }
    let image = crop_tensor(&sample.image, spec)?;
    let mask = crop_tensor(&sample.mask, spec)?;
    let cropped = SegSample {
        image,
        mask,
        ..sample.clone()
    };
    let lost_foreground = sample.foreground_count() - cropped.foreground_count();
    Ok(CropOutcome {
        sample: cropped,
        lost_foreground,
    })
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "# cropseg-manifest 1";
const MANIFEST_COLUMNS: &str = "sample_id\tpatient_id\teye_id\tlaterality\timage\tmask";

/// Writes `images/<id>.pgm` (16-bit), `masks/<id>.pgm` (8-bit, 0/255) and a
/// tab-separated manifest.
pub fn export_dataset(dir: &Path, samples: &[SegSample]) -> Result<()> {
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut manifest = format!("{MANIFEST_HEADER}\n{MANIFEST_COLUMNS}\n");
    for s in samples {
        let image = format!("images/{:06}.pgm", s.id);
        let mask = format!("masks/{:06}.pgm", s.id);
        pnm::write_pgm(&dir.join(&image), s.rows(), s.cols(), s.image.data(), 65535)?;
        pnm::write_pgm(&dir.join(&mask), s.rows(), s.cols(), s.mask.data(), 255)?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{image}\t{mask}\n",
            s.id, s.patient_id, s.eye_id, s.laterality
        ));
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

pub fn import_dataset(dir: &Path) -> Result<Vec<SegSample>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let fmt_err = |msg: String| Error::Format {
        path: path.clone(),
        msg,
    };
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(fmt_err("missing manifest header".into()));
    }
    if lines.next() != Some(MANIFEST_COLUMNS) {
        return Err(fmt_err("unexpected manifest columns".into()));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(fmt_err(format!("record {} has {} fields", n + 1, f.len())));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| fmt_err(format!("bad number {s:?}")));
        let (r, c, img) = pnm::read_pgm(&dir.join(f[4]))?;
        let (mr, mc, mask) = pnm::read_pgm(&dir.join(f[5]))?;
        if (r, c) != (mr, mc) {
            return Err(fmt_err(format!("record {}: image and mask extents differ", n + 1)));
        }
        let mask = mask.into_iter().map(|v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
        out.push(SegSample::new(
            num(f[0])? as usize,
            num(f[1])? as u32,
            num(f[2])? as u32,
            f[3].parse()?,
            Tensor::new(vec![1, r, c], img)?,
            Tensor::new(vec![1, r, c], mask)?,
        )?);
    }
    Ok(out)
}
