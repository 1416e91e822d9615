//! U-Net assembly: an encoder of double-convolution blocks joined by 2x2 max
//! pooling, a decoder of (upsample, skip-concat, double convolution) blocks,
//! and a 1x1 convolution with sigmoid head.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub encoder_filters: Vec<usize>,
    pub decoder_filters: Vec<usize>,
    pub kernel_extent: usize,
    pub dropout_rate: f64,
    pub input_rows: usize,
    pub input_cols: usize,
}

impl UNetConfig {
    /// Six encoder and five decoder blocks of 3x3 convolutions.
    pub fn paper(input_rows: usize, input_cols: usize) -> Self {
        Self {
            encoder_filters: vec![16, 32, 64, 128, 256, 512],
            decoder_filters: vec![256, 128, 64, 32, 32],
            kernel_extent: 3,
            dropout_rate: 0.2,
            input_rows,
            input_cols,
        }
    }

    /// Same topology shape at roughly 1% of the paper's parameter count.
    pub fn desk(input_rows: usize, input_cols: usize) -> Self {
        Self {
            encoder_filters: vec![8, 16, 32, 64],
            decoder_filters: vec![32, 16, 8],
            kernel_extent: 3,
            dropout_rate: 0.2,
            input_rows,
            input_cols,
        }
    }

    /// Spatial extents must be divisible by this (one halving per pooling).
    pub fn divisor(&self) -> usize {
        1 << self.encoder_filters.len().saturating_sub(1)
    }

    pub fn with_input(&self, rows: usize, cols: usize) -> Self {
        Self {
            input_rows: rows,
            input_cols: cols,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_filters.is_empty() {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if self.encoder_filters.len() != self.decoder_filters.len() + 1 {
            return Err(Error::Config(format!(
                "{} encoder blocks need {} decoder blocks, got {}",
                self.encoder_filters.len(),
                self.encoder_filters.len() - 1,
                self.decoder_filters.len()
            )));
        }
        if self
            .encoder_filters
            .iter()
            .chain(&self.decoder_filters)
            .any(|&f| f == 0)
        {
            return Err(Error::Config("filter counts must be positive".into()));
        }
        if self.kernel_extent.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel extent {} must be odd",
                self.kernel_extent
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        let div = self.divisor();
        for (name, extent) in [("rows", self.input_rows), ("cols", self.input_cols)] {
            if extent == 0 || extent % div != 0 {
                return Err(Error::Config(format!(
                    "input {name} {extent} not divisible by {div} (required by {} poolings)",
                    self.encoder_filters.len() - 1
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for UNetConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join("-")
        };
        write!(
            f,
            "unet(enc {}, dec {}, k{}, dropout {}, input {}x{})",
            join(&self.encoder_filters),
            join(&self.decoder_filters),
            self.kernel_extent,
            self.dropout_rate,
            self.input_rows,
            self.input_cols
        )
    }
}

/// A built network: its configuration and an ordered parameter registry.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: UNetConfig,
    params: Vec<(String, Tensor)>,
}

fn conv_layer<R: Rng + ?Sized>(
    params: &mut Vec<(String, Tensor)>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut R,
) {
    // He-style uniform bound for ReLU layers.
    let bound = (6.0 / (cin * k * k) as f64).sqrt();
    params.push((
        format!("{name}.weight"),
        Tensor::uniform(&[cout, cin, k, k], -bound, bound, rng),
    ));
    params.push((format!("{name}.bias"), Tensor::zeros(&[cout])));
}

pub fn build_unet<R: Rng + ?Sized>(config: UNetConfig, rng: &mut R) -> Result<Model> {
    config.validate()?;
    let k = config.kernel_extent;
    let mut params = Vec::new();
    let mut cin = 1;
    for (i, &f) in config.encoder_filters.iter().enumerate() {
        conv_layer(&mut params, &format!("enc{i}.conv0"), cin, f, k, rng);
        conv_layer(&mut params, &format!("enc{i}.conv1"), f, f, k, rng);
        cin = f;
    }
    let depth = config.encoder_filters.len();
    for (i, &f) in config.decoder_filters.iter().enumerate() {
        let skip = config.encoder_filters[depth - 2 - i];
        conv_layer(&mut params, &format!("dec{i}.conv0"), cin + skip, f, k, rng);
        conv_layer(&mut params, &format!("dec{i}.conv1"), f, f, k, rng);
        cin = f;
    }
    conv_layer(&mut params, "head", cin, 1, 1, rng);
    Ok(Model { config, params })
}

impl Model {
    /// Reassembles a model from stored parameters, checking names and shapes
    /// against a freshly built registry for `config`.
    pub fn from_parameters(config: UNetConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        let template = build_unet(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        if template.params.len() != params.len() {
            return Err(Error::Config(format!(
                "{} expects {} parameter tensors, got {}",
                template.config,
                template.params.len(),
                params.len()
            )));
        }
        for ((tn, tt), (n, t)) in template.params.iter().zip(&params) {
            if tn != n || tt.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {n} {:?} does not match expected {tn} {:?}",
                    t.shape(),
                    tt.shape()
                )));
            }
        }
        Ok(Self {
            config: template.config,
            params,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// The same weights applied to inputs of another size.
    pub fn with_input(&self, rows: usize, cols: usize) -> Result<Self> {
        let config = self.config.with_input(rows, cols);
        config.validate()?;
        Ok(Self {
            config,
            params: self.params.clone(),
        })
    }

    /// Same model with every parameter rounded to the nearest `f32`.
    pub fn rounded_to_f32(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        out
    }

    /// Records every parameter on `tape` as a differentiable leaf, in registry
    /// order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|(_, t)| tape.param(t.clone())).collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (c, h, w) = match *shape {
            [c, h, w] => (c, h, w),
            [_, c, h, w] => (c, h, w),
            _ => {
                return Err(Error::Rank {
                    op: "unet",
                    expected: "3 ([1,H,W]) or 4 ([B,1,H,W])",
                    got: shape.to_vec(),
                })
            }
        };
        for (axis, expected, got) in [
            ("channel", 1, c),
            ("row", self.config.input_rows, h),
            ("column", self.config.input_cols, w),
        ] {
            if expected != got {
                return Err(Error::ShapeMismatch {
                    op: "unet",
                    axis,
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }

    /// Runs the network on `tape` using parameter handles from [`Model::bind`].
    pub fn forward_on<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &[Var],
        input: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        self.check_input(tape.value(input).shape())?;
        if params.len() != self.params.len() {
            return Err(Error::invalid(
                "unet",
                format!("{} parameter handles for {} parameters", params.len(), self.params.len()),
            ));
        }
        let mut p = params.chunks_exact(2);
        let mut conv = |tape: &mut Tape, x: Var, relu: bool| -> Result<Var> {
            let wb = p.next().expect("parameter registry matches topology");
            let y = tape.conv2d(x, wb[0], wb[1])?;
            Ok(if relu { tape.relu(y) } else { y })
        };
        let depth = self.config.encoder_filters.len();
        let mut skips = Vec::with_capacity(depth);
        let mut x = input;
        for i in 0..depth {
            x = conv(tape, x, true)?;
            x = conv(tape, x, true)?;
            if i + 1 < depth {
                skips.push(x);
                x = tape.maxpool2(x)?;
            }
        }
        x = tape.dropout(x, self.config.dropout_rate, rng, training)?;
        for skip in skips.into_iter().rev() {
            let up = tape.upsample2(x)?;
            x = tape.concat_channels(up, skip)?;
            x = conv(tape, x, true)?;
            x = conv(tape, x, true)?;
        }
        let logits = conv(tape, x, false)?;
        Ok(tape.sigmoid(logits))
    }

    /// Per-pixel foreground probabilities for `[B,1,H,W]` (or `[1,H,W]`) input.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        batch: &Tensor,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| tape.constant(t.clone()))
            .collect();
        let input = tape.constant(batch.clone());
        let out = self.forward_on(&mut tape, &params, input, training, rng)?;
        Ok(tape.value(out).clone())
    }

    /// Inference-mode forward (dropout off); deterministic.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward(batch, false, &mut ChaCha8Rng::seed_from_u64(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(rows: usize, cols: usize) -> UNetConfig {
        UNetConfig {
            encoder_filters: vec![4, 8, 16],
            decoder_filters: vec![8, 4],
            kernel_extent: 3,
            dropout_rate: 0.2,
            input_rows: rows,
            input_cols: cols,
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn toy_parameter_count_matches_hand_computation() {
        // enc: (9*1*4+4) + (9*4*4+4) + (9*4*8+8) + (9*8*8+8) + (9*8*16+16) + (9*16*16+16)
        // dec: (9*24*8+8) + (9*8*8+8) + (9*12*4+4) + (9*4*4+4); head: 4+1
        let hand = 40 + 148 + 296 + 584 + 1168 + 2320 + 1736 + 584 + 436 + 148 + 5;
        assert_eq!(hand, 7465);
        let m = build_unet(toy(16, 16), &mut rng(1)).unwrap();
        assert_eq!(m.parameter_count(), hand);
        let out = m.predict(&Tensor::zeros(&[1, 1, 16, 16])).unwrap();
        assert_eq!(out.shape(), &[1, 1, 16, 16]);
    }

    #[test]
    fn rejects_indivisible_extents() {
        let err = build_unet(UNetConfig::paper(255, 256), &mut rng(0))
            .unwrap_err()
            .to_string();
        assert!(err.contains("255") && err.contains("32"), "{err}");
        let mut bad = toy(16, 16);
        bad.decoder_filters.pop();
        assert!(build_unet(bad, &mut rng(0)).is_err());
    }

    #[test]
    fn paper_topology_is_fully_convolutional() {
        let a = build_unet(UNetConfig::paper(96, 256), &mut rng(2)).unwrap();
        let b = build_unet(UNetConfig::paper(256, 256), &mut rng(2)).unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
        assert_eq!(a.parameters().len(), 2 * (12 + 10) + 2);
    }

    #[test]
    fn paper_topology_preserves_resolution() {
        let m = build_unet(UNetConfig::paper(96, 256), &mut rng(3)).unwrap();
        let mut r = rng(4);
        let x = Tensor::uniform(&[1, 96, 256], 0.0, 1.0, &mut r);
        let y = m.predict(&x).unwrap();
        assert_eq!(y.shape(), &[1, 96, 256]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn inference_is_deterministic_and_shape_checked() {
        let m = build_unet(toy(16, 8), &mut rng(5)).unwrap();
        let x = Tensor::uniform(&[2, 1, 16, 8], 0.0, 1.0, &mut rng(6));
        let a = m.predict(&x).unwrap();
        let b = m.predict(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 1, 16, 8]);
        assert!(m.predict(&Tensor::zeros(&[1, 1, 8, 16])).is_err());
        assert!(m.predict(&Tensor::zeros(&[1, 2, 16, 8])).is_err());
    }

    #[test]
    fn zero_input_gives_uniform_interior() {
        let mut m = build_unet(toy(64, 64), &mut rng(7)).unwrap();
        // Non-zero biases so the constant map is not trivially 0.5.
        let mut r = rng(8);
        for (name, t) in m.params.iter_mut() {
            if name.ends_with("bias") {
                *t = Tensor::uniform(t.shape(), -0.1, 0.1, &mut r);
            }
        }
        let y = m.predict(&Tensor::zeros(&[1, 64, 64])).unwrap();
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        // Zero padding perturbs at most 22 pixels in from each border for this
        // topology (2 px per 3x3 conv pair, scaled by pooling depth).
        let reference = y.data()[32 * 64 + 32];
        for r in 24..40 {
            for c in 24..40 {
                assert!((y.data()[r * 64 + c] - reference).abs() < 1e-12);
            }
        }
        let border_differs = y.data()[0] != reference;
        assert!(border_differs, "padding should be visible at the corner");
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let m = build_unet(toy(16, 16), &mut rng(9)).unwrap();
        let mut r = rng(10);
        let x = Tensor::uniform(&[2, 1, 16, 16], 0.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let params = m.bind(&mut tape);
        let xv = tape.constant(x);
        let y = m.forward_on(&mut tape, &params, xv, true, &mut r).unwrap();
        let w = tape.constant(Tensor::uniform(&[2, 1, 16, 16], -1.0, 1.0, &mut r));
        let p = tape.mul(y, w).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        for ((name, _), v) in m.parameters().iter().zip(&params) {
            assert!(
                g.wrt(*v).data().iter().any(|&x| x != 0.0),
                "{name} received no gradient"
            );
        }
    }

    #[test]
    fn weights_transfer_across_input_sizes() {
        let m = build_unet(toy(16, 16), &mut rng(4)).unwrap();
        let wide = m.with_input(8, 32).unwrap();
        assert_eq!(wide.parameters(), m.parameters());
        let out = wide.predict(&Tensor::zeros(&[1, 1, 8, 32])).unwrap();
        assert_eq!(out.shape(), &[1, 1, 8, 32]);
        assert!(m.with_input(6, 16).is_err());
    }
}
