//! 1-D gated convolutional network blocks.
//!
//! Activations are `[channels, length]` tensors. Parameter paths are the
//! layer index followed by the sub-module name, joined with `/`, with
//! residual blocks nesting their own indices under `res`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamTree;
use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_DROPOUT: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    Conv1d { width: usize, channels: usize },
    GatedConv1d { width: usize, channels: usize },
    /// Strided gated convolution with instance norm on both branches.
    Downsample { factor: usize, channels: usize },
    /// Gated convolution to `channels * factor`, pixel shuffle and instance norm.
    Upsample { factor: usize, channels: usize },
    InstanceNorm { channels: usize },
    Residual { block: Vec<Layer> },
    Dropout { rate: f64 },
    Dense { out_dim: usize },
    Sigmoid,
    Identity,
}

impl Layer {
    /// The standard residual block at `channels`.
    pub fn residual(channels: usize) -> Layer {
        Layer::Residual {
            block: vec![
                Layer::GatedConv1d {
                    width: 3,
                    channels: 2 * channels,
                },
                Layer::InstanceNorm {
                    channels: 2 * channels,
                },
                Layer::Conv1d { width: 3, channels },
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
    /// Dropout disabled; used for gradient checking.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub input_channels: usize,
    pub input_length: usize,
    pub layers: Vec<Layer>,
}

fn scaled(base: usize, divisor: usize) -> usize {
    (base / divisor).max(1)
}

impl NetSpec {
    /// Momenta sampler: `[in_channels, length]` → `[1, length]`.
    /// Channel counts are the full-size ones divided by `divisor`.
    pub fn sampler(input_channels: usize, input_length: usize, divisor: usize, dropout: f64) -> NetSpec {
        let c1 = scaled(64, divisor);
        let c2 = scaled(128, divisor);
        NetSpec {
            input_channels,
            input_length,
            layers: vec![
                Layer::GatedConv1d { width: 15, channels: c1 },
                Layer::Downsample { factor: 2, channels: c2 },
                Layer::Downsample { factor: 2, channels: c2 },
                Layer::residual(c2),
                Layer::residual(c2),
                Layer::Upsample { factor: 2, channels: c2 },
                Layer::Upsample { factor: 2, channels: c1 },
                Layer::Dropout { rate: dropout },
                Layer::Conv1d { width: 15, channels: 1 },
            ],
        }
    }

    /// Pair-density critic: `[in_channels, length]` → one probability.
    pub fn critic(input_channels: usize, input_length: usize, divisor: usize) -> NetSpec {
        NetSpec {
            input_channels,
            input_length,
            layers: vec![
                Layer::GatedConv1d {
                    width: 3,
                    channels: scaled(64, divisor),
                },
                Layer::Downsample {
                    factor: 2,
                    channels: scaled(128, divisor),
                },
                Layer::Downsample {
                    factor: 2,
                    channels: scaled(256, divisor),
                },
                Layer::Downsample {
                    factor: 2,
                    channels: scaled(256, divisor),
                },
                Layer::Dense { out_dim: 1 },
                Layer::Sigmoid,
            ],
        }
    }

    /// Output `(channels, length)`, checking every layer's arithmetic.
    pub fn output_shape(&self) -> Result<(usize, usize)> {
        if self.input_channels == 0 || self.input_length == 0 {
            return Err(Error::InconsistentSpec("empty network input".into()));
        }
        infer(&self.layers, (self.input_channels, self.input_length))
    }
}

fn inconsistent(msg: String) -> Error {
    Error::InconsistentSpec(msg)
}

fn check_width(width: usize) -> Result<()> {
    if width == 0 || width.is_multiple_of(2) {
        return Err(inconsistent(format!("convolution width {width} must be odd")));
    }
    Ok(())
}

fn infer(layers: &[Layer], mut shape: (usize, usize)) -> Result<(usize, usize)> {
    for (i, layer) in layers.iter().enumerate() {
        let (c, l) = shape;
        shape = match layer {
            Layer::Conv1d { width, channels } | Layer::GatedConv1d { width, channels } => {
                check_width(*width)?;
                if *channels == 0 {
                    return Err(inconsistent(format!("layer {i}: zero channels")));
                }
                (*channels, l)
            }
            Layer::Downsample { factor, channels } => {
                if *factor == 0 || *channels == 0 || l % factor != 0 {
                    return Err(inconsistent(format!("layer {i}: cannot downsample length {l} by {factor}")));
                }
                (*channels, l / factor)
            }
            Layer::Upsample { factor, channels } => {
                if *factor == 0 || *channels == 0 {
                    return Err(inconsistent(format!("layer {i}: bad upsample")));
                }
                (*channels, l * factor)
            }
            Layer::InstanceNorm { channels } => {
                if *channels != c {
                    return Err(inconsistent(format!("layer {i}: instance norm over {channels} of {c} channels")));
                }
                if l < 2 {
                    return Err(inconsistent(format!("layer {i}: instance norm over length {l}")));
                }
                (c, l)
            }
            Layer::Residual { block } => {
                let out = infer(block, (c, l))?;
                if out != (c, l) {
                    return Err(inconsistent(format!("layer {i}: residual block maps {:?} to {out:?}", (c, l))));
                }
                out
            }
            Layer::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(inconsistent(format!("layer {i}: dropout rate {rate}")));
                }
                (c, l)
            }
            Layer::Dense { out_dim } => {
                if *out_dim == 0 {
                    return Err(inconsistent(format!("layer {i}: zero dense outputs")));
                }
                (*out_dim, 1)
            }
            Layer::Sigmoid | Layer::Identity => (c, l),
        };
    }
    Ok(shape)
}

fn xavier(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-a..a)).collect()).expect("shape")
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    tree: ParamTree,
}

impl Builder<'_> {
    fn conv(&mut self, path: &str, cin: usize, cout: usize, width: usize) -> Result<()> {
        self.conv_weight(path, cin, cout, width)?;
        self.tree.insert(format!("{path}/b"), Tensor::zeros(&[cout]))
    }

    /// Weight only; used where an instance norm follows and its shift is the bias.
    fn conv_weight(&mut self, path: &str, cin: usize, cout: usize, width: usize) -> Result<()> {
        let w = xavier(self.rng, vec![cout, cin, width], cin * width, cout * width);
        self.tree.insert(format!("{path}/w"), w)
    }

    fn norm(&mut self, path: &str, c: usize) -> Result<()> {
        self.tree.insert(format!("{path}/scale"), Tensor::full(&[c], 1.0))?;
        self.tree.insert(format!("{path}/shift"), Tensor::zeros(&[c]))
    }

    fn layers(&mut self, prefix: &str, layers: &[Layer], mut shape: (usize, usize)) -> Result<()> {
        for (i, layer) in layers.iter().enumerate() {
            let p = format!("{prefix}{i}");
            let (c, l) = shape;
            match layer {
                Layer::Conv1d { width, channels } => self.conv(&p, c, *channels, *width)?,
                Layer::GatedConv1d { width, channels } => {
                    self.conv(&format!("{p}/conv"), c, *channels, *width)?;
                    self.conv(&format!("{p}/gate"), c, *channels, *width)?;
                }
                Layer::Downsample { factor, channels } => {
                    let w = 2 * factor + 1;
                    for br in ["conv", "gate"] {
                        self.conv_weight(&format!("{p}/{br}"), c, *channels, w)?;
                        self.norm(&format!("{p}/{br}_norm"), *channels)?;
                    }
                }
                Layer::Upsample { factor, channels } => {
                    let w = 2 * factor + 1;
                    for br in ["conv", "gate"] {
                        self.conv_weight(&format!("{p}/{br}"), c, channels * factor, w)?;
                        self.norm(&format!("{p}/{br}_norm"), *channels)?;
                    }
                }
                Layer::InstanceNorm { channels } => self.norm(&p, *channels)?,
                Layer::Residual { block } => self.layers(&format!("{p}/res/"), block, shape)?,
                Layer::Dense { out_dim } => {
                    let n = c * l;
                    let w = xavier(self.rng, vec![*out_dim, n], n, *out_dim);
                    self.tree.insert(format!("{p}/w"), w)?;
                    self.tree.insert(format!("{p}/b"), Tensor::zeros(&[*out_dim]))?;
                }
                Layer::Dropout { .. } | Layer::Sigmoid | Layer::Identity => {}
            }
            shape = infer(std::slice::from_ref(layer), shape)?;
        }
        Ok(())
    }
}

/// Xavier-uniform weights, zero biases, unit norm scales; deterministic per seed.
pub fn build_network(spec: &NetSpec, seed: u64) -> Result<ParamTree> {
    spec.output_shape()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        rng: &mut rng,
        tree: ParamTree::new(),
    };
    b.layers("", &spec.layers, (spec.input_channels, spec.input_length))?;
    Ok(b.tree)
}

/// Records a network on an existing tape. Parameters are registered as
/// `{prefix}{path}` in `group`; returns the output node.
pub struct NetRecorder<'a, R: Rng + ?Sized> {
    pub tape: &'a mut Tape,
    pub params: &'a ParamTree,
    pub prefix: &'a str,
    pub group: u32,
    pub mode: Mode,
    pub rng: &'a mut R,
}

impl<R: Rng + ?Sized> NetRecorder<'_, R> {
    fn param(&mut self, path: &str) -> Result<NodeId> {
        let t = self
            .params
            .get(path)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing parameter `{path}`")))?;
        Ok(self.tape.param(&format!("{}{path}", self.prefix), t, self.group))
    }

    fn conv(&mut self, path: &str, x: NodeId, stride: usize) -> Result<NodeId> {
        let w = self.param(&format!("{path}/w"))?;
        let b = match self.params.get(&format!("{path}/b")) {
            Some(_) => self.param(&format!("{path}/b"))?,
            None => {
                let cout = self.tape.value(w).shape()[0];
                self.tape.constant(Tensor::zeros(&[cout]))
            }
        };
        self.tape.conv1d(x, w, b, stride)
    }

    fn norm(&mut self, path: &str, x: NodeId) -> Result<NodeId> {
        let s = self.param(&format!("{path}/scale"))?;
        let h = self.param(&format!("{path}/shift"))?;
        self.tape.instance_norm(x, s, h)
    }

    fn gate(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.tape.sigmoid(b);
        self.tape.mul(a, s)
    }

    pub fn run(&mut self, spec: &NetSpec, x: NodeId) -> Result<NodeId> {
        let shape = self.tape.value(x).shape();
        if shape != [spec.input_channels, spec.input_length] {
            return Err(Error::ShapeMismatch(format!(
                "network expects [{}, {}], got {shape:?}",
                spec.input_channels, spec.input_length
            )));
        }
        self.layers("", &spec.layers, x)
    }

    fn layers(&mut self, prefix: &str, layers: &[Layer], mut x: NodeId) -> Result<NodeId> {
        for (i, layer) in layers.iter().enumerate() {
            let p = format!("{prefix}{i}");
            x = match layer {
                Layer::Conv1d { .. } => self.conv(&p, x, 1)?,
                Layer::GatedConv1d { .. } => {
                    let a = self.conv(&format!("{p}/conv"), x, 1)?;
                    let b = self.conv(&format!("{p}/gate"), x, 1)?;
                    self.gate(a, b)?
                }
                Layer::Downsample { factor, .. } => {
                    let a = self.conv(&format!("{p}/conv"), x, *factor)?;
                    let a = self.norm(&format!("{p}/conv_norm"), a)?;
                    let b = self.conv(&format!("{p}/gate"), x, *factor)?;
                    let b = self.norm(&format!("{p}/gate_norm"), b)?;
                    self.gate(a, b)?
                }
                Layer::Upsample { factor, .. } => {
                    let branch = |this: &mut Self, br: &str| -> Result<NodeId> {
                        let c = this.conv(&format!("{p}/{br}"), x, 1)?;
                        let s = this.tape.pixel_shuffle(c, *factor)?;
                        this.norm(&format!("{p}/{br}_norm"), s)
                    };
                    let a = branch(self, "conv")?;
                    let b = branch(self, "gate")?;
                    self.gate(a, b)?
                }
                Layer::InstanceNorm { .. } => self.norm(&p, x)?,
                Layer::Residual { block } => {
                    let y = self.layers(&format!("{p}/res/"), block, x)?;
                    self.tape.add(x, y)?
                }
                Layer::Dropout { rate } => {
                    if *rate == 0.0 || self.mode == Mode::Deterministic {
                        x
                    } else {
                        let keep = 1.0 / (1.0 - rate);
                        let n = self.tape.value(x).len();
                        let mask = (0..n)
                            .map(|_| if self.rng.random::<f64>() < *rate { 0.0 } else { keep })
                            .collect();
                        self.tape.mul_const(x, mask)?
                    }
                }
                Layer::Dense { .. } => {
                    let w = self.param(&format!("{p}/w"))?;
                    let b = self.param(&format!("{p}/b"))?;
                    let y = self.tape.dense(x, w, b)?;
                    let n = self.tape.value(y).len();
                    self.tape.reshape(y, vec![n, 1])?
                }
                Layer::Sigmoid => self.tape.sigmoid(x),
                Layer::Identity => x,
            };
        }
        Ok(x)
    }
}

/// Runs a network on its own tape; the tape remembers input and output for [`backward`].
pub fn forward<R: Rng + ?Sized>(
    params: &ParamTree,
    spec: &NetSpec,
    input: &Tensor,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor, Tape)> {
    spec.output_shape()?;
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = NetRecorder {
        tape: &mut tape,
        params,
        prefix: "",
        group: 1,
        mode,
        rng,
    }
    .run(spec, x)?;
    tape.input = Some(x);
    tape.output = Some(y);
    Ok((tape.value(y).clone(), tape))
}

/// Parameter and input gradients of `<upstream, output>` for a tape from [`forward`].
pub fn backward(tape: &mut Tape, upstream: &Tensor) -> Result<(BTreeMap<String, Tensor>, Tensor)> {
    let (Some(x), Some(y)) = (tape.input(), tape.output()) else {
        return Err(Error::ShapeMismatch("tape was not produced by a network forward pass".into()));
    };
    let g = tape.backward(y, upstream)?;
    Ok((g.all_params(), g.node(x)))
}
