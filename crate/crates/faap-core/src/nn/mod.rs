//! Small feed-forward network machinery with explicit backpropagation.
//!
//! Parameters live in one flat `Vec<f64>` per network, and every block knows
//! its slice of it. That makes optimizers, checkpointing, checksumming and
//! finite-difference gradient checks one-liners: a loss is a plain function
//! of the flat vector.
//!
//! Shapes are validated once at construction; `forward` returns the output
//! plus a [`Trace`] of block inputs that `backward` consumes.

pub mod adam;
pub mod kernels;
pub mod loss;

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::rng::Stream;
use crate::tensor::Tensor;
use kernels::ConvArgs;

#[cfg(not(feature = "std"))]
use num_traits::Float;

/// One computation step. Images flow as `[n,c,h,w]`, vectors as `[n,d]`.
#[derive(Debug, Clone)]
pub enum Block {
    /// 2-D convolution, square kernel, zero padding.
    Conv { in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize },
    /// Fully connected layer.
    Linear { in_dim: usize, out_dim: usize },
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    /// Spatial mean per channel: `[n,c,h,w]` → `[n,c]`.
    GlobalAvgPool,
    /// Nearest-neighbor 2× upsampling.
    Upsample2x,
    /// `y = x + body(x)`; body must preserve the shape.
    Residual(Box<Net>),
}

impl Block {
    fn param_len(&self) -> usize {
        match self {
            Block::Conv { in_c, out_c, kernel, .. } => out_c * in_c * kernel * kernel + out_c,
            Block::Linear { in_dim, out_dim } => out_dim * in_dim + out_dim,
            Block::Residual(net) => net.n_params(),
            _ => 0,
        }
    }

    fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>, CoreError> {
        match self {
            Block::Conv { in_c, out_c, kernel, stride, pad } => {
                let [c, h, w] = spatial(input)?;
                if c != *in_c {
                    return Err(CoreError::ShapeMismatch(format!(
                        "conv expects {in_c} channels, input has {c}"
                    )));
                }
                let oh = kernels::conv_out_dim(h, *kernel, *stride, *pad);
                let ow = kernels::conv_out_dim(w, *kernel, *stride, *pad);
                if oh == 0 || ow == 0 {
                    return Err(CoreError::ShapeMismatch(format!(
                        "conv output collapses on {h}x{w} input"
                    )));
                }
                Ok(vec![*out_c, oh, ow])
            }
            Block::Linear { in_dim, out_dim } => {
                if input != [*in_dim] {
                    return Err(CoreError::ShapeMismatch(format!(
                        "linear expects [{in_dim}], got {input:?}"
                    )));
                }
                Ok(vec![*out_dim])
            }
            Block::Relu | Block::LeakyRelu { .. } | Block::Tanh => Ok(input.to_vec()),
            Block::GlobalAvgPool => {
                let [c, _, _] = spatial(input)?;
                Ok(vec![c])
            }
            Block::Upsample2x => {
                let [c, h, w] = spatial(input)?;
                Ok(vec![c, 2 * h, 2 * w])
            }
            Block::Residual(net) => {
                if net.output_shape() != net.input_shape() {
                    return Err(CoreError::ShapeMismatch(
                        "residual body must preserve shape".into(),
                    ));
                }
                if input != net.input_shape() {
                    return Err(CoreError::ShapeMismatch(format!(
                        "residual expects {:?}, got {input:?}",
                        net.input_shape()
                    )));
                }
                Ok(input.to_vec())
            }
        }
    }
}

fn spatial(shape: &[usize]) -> Result<[usize; 3], CoreError> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        other => Err(CoreError::ShapeMismatch(format!("expected [c,h,w], got {other:?}"))),
    }
}

/// A validated sequence of blocks with one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Net {
    blocks: Vec<Block>,
    input_shape: Vec<usize>,
    /// `shapes[i]` is the input shape of block i; last entry is the output.
    shapes: Vec<Vec<usize>>,
    /// `offsets[i]` is where block i's parameters start; last entry is the total.
    offsets: Vec<usize>,
}

/// Cached block inputs from one forward pass, consumed by `backward`.
pub struct Trace {
    inputs: Vec<Tensor>,
    nested: Vec<Option<Box<Trace>>>,
    batch: usize,
}

impl Net {
    /// Validate shapes block by block. `input_shape` excludes the batch axis.
    pub fn new(input_shape: &[usize], blocks: Vec<Block>) -> Result<Net, CoreError> {
        let mut shapes = vec![input_shape.to_vec()];
        let mut offsets = vec![0];
        for block in &blocks {
            let next = block.out_shape(shapes.last().unwrap())?;
            shapes.push(next);
            offsets.push(offsets.last().unwrap() + block.param_len());
        }
        Ok(Net { blocks, input_shape: input_shape.to_vec(), shapes, offsets })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Parameter slice of block `idx` within a flat vector.
    pub fn param_range(&self, idx: usize) -> core::ops::Range<usize> {
        self.offsets[idx]..self.offsets[idx + 1]
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// He-style init: weights ~ N(0, 2/fan_in), biases zero.
    pub fn init_params(&self, rng: &mut Stream) -> Vec<f64> {
        let mut params = vec![0.0; self.n_params()];
        self.init_into(&mut params, rng);
        params
    }

    fn init_into(&self, params: &mut [f64], rng: &mut Stream) {
        for (i, block) in self.blocks.iter().enumerate() {
            let slot = &mut params[self.offsets[i]..self.offsets[i + 1]];
            match block {
                Block::Conv { in_c, kernel, .. } => {
                    let fan_in = (in_c * kernel * kernel) as f64;
                    let std = (2.0 / fan_in).sqrt();
                    let w_len = slot.len() - bias_len(block);
                    for v in &mut slot[..w_len] {
                        *v = std * rng.normal();
                    }
                }
                Block::Linear { in_dim, .. } => {
                    let std = (2.0 / *in_dim as f64).sqrt();
                    let w_len = slot.len() - bias_len(block);
                    for v in &mut slot[..w_len] {
                        *v = std * rng.normal();
                    }
                }
                Block::Residual(net) => net.init_into(slot, rng),
                _ => {}
            }
        }
    }

    /// Forward over a batch. `x` is `[n, ...input_shape]`.
    pub fn forward(&self, params: &[f64], x: &Tensor) -> (Tensor, Trace) {
        self.forward_impl(params, x, true)
    }

    /// Forward without caching, for inference.
    pub fn infer(&self, params: &[f64], x: &Tensor) -> Tensor {
        self.forward_impl(params, x, false).0
    }

    fn forward_impl(&self, params: &[f64], x: &Tensor, keep: bool) -> (Tensor, Trace) {
        assert_eq!(params.len(), self.n_params(), "parameter vector length");
        let n = self.check_batch(x);
        let mut nested = Vec::with_capacity(self.blocks.len());
        nested.resize_with(self.blocks.len(), || None);
        let mut trace = Trace { inputs: Vec::new(), nested, batch: n };
        let mut cur = x.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let slot = &params[self.offsets[i]..self.offsets[i + 1]];
            let out_shape = batched(&self.shapes[i + 1], n);
            let next = match block {
                Block::Conv { in_c, out_c, kernel, stride, pad } => {
                    let [_, h, w] = spatial(&self.shapes[i]).unwrap();
                    let args = ConvArgs {
                        in_c: *in_c,
                        out_c: *out_c,
                        kernel: *kernel,
                        stride: *stride,
                        pad: *pad,
                        h,
                        w,
                    };
                    let mut y = Tensor::zeros(&out_shape);
                    kernels::conv_forward(&args, slot, cur.data(), n, y.data_mut());
                    y
                }
                Block::Linear { in_dim, out_dim } => {
                    let mut y = Tensor::zeros(&out_shape);
                    kernels::linear_forward(*in_dim, *out_dim, slot, cur.data(), n, y.data_mut());
                    y
                }
                Block::Relu => cur.map(|v| if v > 0.0 { v } else { 0.0 }),
                Block::LeakyRelu { slope } => {
                    let s = *slope;
                    cur.map(|v| if v > 0.0 { v } else { s * v })
                }
                Block::Tanh => cur.map(f64::tanh),
                Block::GlobalAvgPool => {
                    let [c, h, w] = spatial(&self.shapes[i]).unwrap();
                    let mut y = Tensor::zeros(&out_shape);
                    kernels::global_avg_pool_forward(c, h * w, cur.data(), n, y.data_mut());
                    y
                }
                Block::Upsample2x => {
                    let [c, h, w] = spatial(&self.shapes[i]).unwrap();
                    let mut y = Tensor::zeros(&out_shape);
                    kernels::upsample2x_forward(c, h, w, cur.data(), n, y.data_mut());
                    y
                }
                Block::Residual(net) => {
                    let (body, inner) = net.forward_impl(slot, &cur, keep);
                    if keep {
                        trace.nested[i] = Some(Box::new(inner));
                    }
                    let mut y = body;
                    y.add_assign(&cur);
                    y
                }
            };
            if keep {
                trace.inputs.push(cur);
            }
            cur = next;
        }
        (cur, trace)
    }

    /// Backward pass. Accumulates parameter gradients into `grad` (same
    /// layout as `params`) and returns the gradient w.r.t. the input batch.
    pub fn backward(&self, params: &[f64], trace: &Trace, dy: &Tensor, grad: &mut [f64]) -> Tensor {
        assert_eq!(grad.len(), self.n_params(), "gradient vector length");
        let n = trace.batch;
        assert_eq!(dy.shape(), batched(self.output_shape(), n).as_slice());
        let mut cur = dy.clone();
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let slot = &params[self.offsets[i]..self.offsets[i + 1]];
            let gslot = &mut grad[self.offsets[i]..self.offsets[i + 1]];
            let x = &trace.inputs[i];
            let in_shape = batched(&self.shapes[i], n);
            let next = match block {
                Block::Conv { in_c, out_c, kernel, stride, pad } => {
                    let [_, h, w] = spatial(&self.shapes[i]).unwrap();
                    let args = ConvArgs {
                        in_c: *in_c,
                        out_c: *out_c,
                        kernel: *kernel,
                        stride: *stride,
                        pad: *pad,
                        h,
                        w,
                    };
                    let mut dx = Tensor::zeros(&in_shape);
                    kernels::conv_backward(&args, slot, x.data(), cur.data(), n, gslot, dx.data_mut());
                    dx
                }
                Block::Linear { in_dim, out_dim } => {
                    let mut dx = Tensor::zeros(&in_shape);
                    kernels::linear_backward(
                        *in_dim,
                        *out_dim,
                        slot,
                        x.data(),
                        cur.data(),
                        n,
                        gslot,
                        dx.data_mut(),
                    );
                    dx
                }
                Block::Relu => zip_map(&cur, x, |g, v| if v > 0.0 { g } else { 0.0 }),
                Block::LeakyRelu { slope } => {
                    let s = *slope;
                    zip_map(&cur, x, |g, v| if v > 0.0 { g } else { s * g })
                }
                Block::Tanh => zip_map(&cur, x, |g, v| {
                    let t = v.tanh();
                    g * (1.0 - t * t)
                }),
                Block::GlobalAvgPool => {
                    let [c, h, w] = spatial(&self.shapes[i]).unwrap();
                    let mut dx = Tensor::zeros(&in_shape);
                    kernels::global_avg_pool_backward(c, h * w, cur.data(), n, dx.data_mut());
                    dx
                }
                Block::Upsample2x => {
                    let [c, h, w] = spatial(&self.shapes[i]).unwrap();
                    let mut dx = Tensor::zeros(&in_shape);
                    kernels::upsample2x_backward(c, h, w, cur.data(), n, dx.data_mut());
                    dx
                }
                Block::Residual(net) => {
                    let inner = trace.nested[i].as_deref().expect("residual trace");
                    let mut dx = net.backward(slot, inner, &cur, gslot);
                    dx.add_assign(&cur);
                    dx
                }
            };
            cur = next;
        }
        cur
    }

    fn check_batch(&self, x: &Tensor) -> usize {
        let shape = x.shape();
        assert!(
            shape.len() == self.input_shape.len() + 1 && shape[1..] == *self.input_shape,
            "batch shape {:?} does not match input shape {:?}",
            shape,
            self.input_shape
        );
        shape[0]
    }
}

fn batched(inner: &[usize], n: usize) -> Vec<usize> {
    let mut s = Vec::with_capacity(inner.len() + 1);
    s.push(n);
    s.extend_from_slice(inner);
    s
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

fn bias_len(block: &Block) -> usize {
    match block {
        Block::Conv { out_c, .. } => *out_c,
        Block::Linear { out_dim, .. } => *out_dim,
        _ => 0,
    }
}
