//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to apply the chain rule later. [`Tape::backward`] walks the nodes in
//! reverse execution order, visiting each one once.

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{Dims4, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>> + Send>;

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        geom: ConvGeom,
        batch: usize,
    },
    Relu(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: Var,
        dims: Dims4,
    },
    Concat {
        a: Var,
        b: Var,
        a_block: usize,
        b_block: usize,
    },
    Sigmoid(Var),
    Dropout {
        input: Var,
        scale: Vec<f64>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of the loss with respect to `v`, exactly zero when `v` does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Node indices in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor. It receives a gradient iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    /// Same-padded convolution: `input` is `[Cin,H,W]` or `[B,Cin,H,W]`,
    /// `kernels` is `[Cout,Cin,kH,kW]` with odd `kH`, `kW`, `bias` is `[Cout]`.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        const OP: &str = "conv2d";
        let d = Dims4::of(OP, self.value(input))?;
        let ks = self.value(kernels).shape().to_vec();
        let [cout, cin, kh, kw] = ks[..] else {
            return Err(Error::Rank {
                op: OP,
                expected: "4 ([Cout,Cin,kH,kW]) for kernels",
                got: ks,
            });
        };
        if cin != d.channels {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis: "input-channel",
                expected: cin,
                got: d.channels,
            });
        }
        if kh % 2 == 0 {
            return Err(Error::invalid(OP, format!("kernel rows {kh} must be odd")));
        }
        if kw % 2 == 0 {
            return Err(Error::invalid(OP, format!("kernel cols {kw} must be odd")));
        }
        let bs = self.value(bias).shape();
        if bs.len() != 1 || bs[0] != cout {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis: "bias/output-channel",
                expected: cout,
                got: bs.iter().product(),
            });
        }
        let geom = ConvGeom {
            in_channels: cin,
            out_channels: cout,
            rows: d.rows,
            cols: d.cols,
            k_rows: kh,
            k_cols: kw,
        };
        let out = kernels::conv2d_forward(
            &geom,
            d.batch,
            self.value(input).data(),
            self.value(kernels).data(),
            self.value(bias).data(),
        );
        let shape = Dims4 {
            channels: cout,
            ..d
        }
        .shape();
        let needs = self.needs(input) || self.needs(kernels) || self.needs(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                batch: d.batch,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    /// 2x2 max pooling with stride 2. Ties route the gradient to the first
    /// maximum in row-major window order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "maxpool2";
        let d = Dims4::of(OP, self.value(x))?;
        if d.rows % 2 != 0 {
            return Err(Error::invalid(OP, format!("row extent {} is odd", d.rows)));
        }
        if d.cols % 2 != 0 {
            return Err(Error::invalid(OP, format!("column extent {} is odd", d.cols)));
        }
        let (out, argmax) = kernels::maxpool2_forward(&d, self.value(x).data());
        let shape = Dims4 {
            rows: d.rows / 2,
            cols: d.cols / 2,
            ..d
        }
        .shape();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool2 { input: x, argmax }, needs))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let d = Dims4::of("upsample2", self.value(x))?;
        let out = kernels::upsample2_forward(&d, self.value(x).data());
        let shape = Dims4 {
            rows: d.rows * 2,
            cols: d.cols * 2,
            ..d
        }
        .shape();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Upsample2 { input: x, dims: d }, needs))
    }

    /// Concatenates along the channel axis; channels of `a` come first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let da = Dims4::of(OP, self.value(a))?;
        let db = Dims4::of(OP, self.value(b))?;
        for (axis, x, y) in [
            ("batch", da.batch, db.batch),
            ("row", da.rows, db.rows),
            ("column", da.cols, db.cols),
        ] {
            if x != y {
                return Err(Error::ShapeMismatch {
                    op: OP,
                    axis,
                    expected: x,
                    got: y,
                });
            }
        }
        if da.batched != db.batched {
            return Err(Error::invalid(OP, "cannot mix batched and unbatched operands"));
        }
        let a_block = da.channels * da.plane();
        let b_block = db.channels * db.plane();
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.batch * (a_block + b_block));
        for i in 0..da.batch {
            out.extend_from_slice(&va[i * a_block..(i + 1) * a_block]);
            out.extend_from_slice(&vb[i * b_block..(i + 1) * b_block]);
        }
        let shape = Dims4 {
            channels: da.channels + db.channels,
            ..da
        }
        .shape();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                a,
                b,
                a_block,
                b_block,
            },
            needs,
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    /// Inverted dropout. In training mode each value is zeroed with probability
    /// `rate` and survivors are scaled by `1 / (1 - rate)`; otherwise identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(
                "dropout",
                format!("rate {rate} outside [0, 1)"),
            ));
        }
        let n = self.value(x).len();
        let scale: Vec<f64> = if training && rate > 0.0 {
            let keep = 1.0 / (1.0 - rate);
            (0..n)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect()
        } else {
            vec![1.0; n]
        };
        let value = self.value(x);
        let data = value.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
        let out = Tensor::new(value.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Dropout { input: x, scale }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_values("add", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_values("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(out, Op::Sum(x), needs)
    }

    fn zip_values(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::invalid(
                op,
                format!("shape {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Records an operation whose local gradient rule is supplied by the
    /// caller. `backward` maps the output gradient to one gradient per input.
    pub(crate) fn custom(
        &mut self,
        value: Tensor,
        inputs: Vec<Var>,
        backward: impl Fn(&[f64]) -> Vec<Vec<f64>> + Send + 'static,
    ) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(
            value,
            Op::Custom {
                inputs,
                backward: Box::new(backward),
            },
            needs,
        )
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut visited = Vec::new();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            self.apply_rule(node, &g, &mut grads);
        }
        // Drop intermediate gradients; keep only those of leaves.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                *slot = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            visited,
        })
    }

    fn apply_rule(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, grad: Vec<f64>| {
            if self.needs(v) {
                accumulate(&mut grads[v.0], grad);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                batch,
            } => {
                let (gi, gk, gb) = kernels::conv2d_backward(
                    geom,
                    *batch,
                    self.value(*input).data(),
                    self.value(*kernels).data(),
                    g,
                );
                send(*input, gi);
                send(*kernels, gk);
                send(*bias, gb);
            }
            Op::Relu(x) => {
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                send(*x, gx);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut gx = vec![0.0; self.value(*input).len()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    gx[idx] += gv;
                }
                send(*input, gx);
            }
            Op::Upsample2 { input, dims } => send(*input, kernels::upsample2_backward(dims, g)),
            Op::Concat {
                a,
                b,
                a_block,
                b_block,
            } => {
                let per = a_block + b_block;
                let items = g.len() / per;
                let mut ga = Vec::with_capacity(items * a_block);
                let mut gb = Vec::with_capacity(items * b_block);
                for chunk in g.chunks_exact(per) {
                    ga.extend_from_slice(&chunk[..*a_block]);
                    gb.extend_from_slice(&chunk[*a_block..]);
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::Sigmoid(x) => {
                let gx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                send(*x, gx);
            }
            Op::Dropout { input, scale } => {
                send(*input, g.iter().zip(scale).map(|(a, b)| a * b).collect());
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                send(*a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                send(*b, g.iter().zip(va).map(|(x, y)| x * y).collect());
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::Custom { inputs, backward } => {
                for (v, gv) in inputs.iter().zip(backward(g)) {
                    send(*v, gv);
                }
            }
        }
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
