//! Small fully convolutional segmentation network.
//!
//! A stack of same-padded convolutions with ReLU in between and no
//! downsampling, so every output pixel is a class-logit vector for the input
//! pixel at the same position.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvSpec, PadMode, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Desk-scale cap on the total parameter count.
pub const MAX_PARAMS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub in_channels: usize,
    /// Output channels per conv layer; the last entry is the class count.
    pub widths: Vec<usize>,
    pub kernel: usize,
}

impl Architecture {
    /// Four 3x3 layers of widths (32, 32, 32, classes) over RGB input.
    pub fn default_for(classes: usize) -> Self {
        Self {
            in_channels: 3,
            widths: vec![32, 32, 32, classes],
            kernel: 3,
        }
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// `(kernel_shape, bias_shape)` per layer.
    pub fn layer_shapes(&self) -> Vec<([usize; 4], usize)> {
        let mut cin = self.in_channels;
        self.widths
            .iter()
            .map(|&cout| {
                let s = ([self.kernel, self.kernel, cin, cout], cout);
                cin = cout;
                s
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(k, b)| k.iter().product::<usize>() + b)
            .sum()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.widths.len())
            .flat_map(|i| [format!("conv{i}.weight"), format!("conv{i}.bias")])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.in_channels == 0 {
            return Err(invalid(format!(
                "architecture needs positive widths, got {:?}",
                self.widths
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(invalid(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if self.classes() < 2 {
            return Err(invalid("at least two classes are required"));
        }
        let n = self.param_count();
        if n >= MAX_PARAMS {
            return Err(invalid(format!("{n} parameters exceeds the cap of {MAX_PARAMS}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    arch: Architecture,
    /// Interleaved `[weight0, bias0, weight1, bias1, ...]`.
    params: Vec<Tensor>,
}

impl SegNet {
    /// Kaiming (fan-in) normal kernels, zero biases.
    pub fn init<R: Rng>(rng: &mut R, arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let mut params = Vec::new();
        for (kshape, cout) in arch.layer_shapes() {
            let fan_in = (kshape[0] * kshape[1] * kshape[2]) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let n = kshape.iter().product();
            let data = (0..n).map(|_| normal.sample(rng)).collect();
            params.push(Tensor::new(&kshape, data)?.with_grad());
            params.push(Tensor::zeros(&[cout]).with_grad());
        }
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        check_param_shapes(&arch, &params)?;
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }

    /// Records the forward pass; returns the `[H, W, C]` logits and the
    /// leaf handles of the parameters, in parameter order.
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<(Var, Vec<Var>)> {
        forward_params(&self.arch, &self.params, tape, image, PadMode::Zero)
    }

    /// Class probabilities without recording anything for backward.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        predict_params(&self.arch, &self.params, image)
    }

    /// Writes the gradients gathered by a backward pass into the parameter
    /// grad buffers.
    pub fn accumulate_grads(&mut self, grads: &crate::autodiff::Gradients, vars: &[Var]) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            grads.accumulate_into(v, p)?;
        }
        Ok(())
    }
}

pub(crate) fn check_param_shapes(arch: &Architecture, params: &[Tensor]) -> Result<()> {
    let shapes = arch.layer_shapes();
    if params.len() != 2 * shapes.len() {
        return Err(invalid(format!(
            "expected {} parameter tensors, got {}",
            2 * shapes.len(),
            params.len()
        )));
    }
    for (i, (k, b)) in shapes.iter().enumerate() {
        if params[2 * i].shape() != k || params[2 * i + 1].shape() != [*b] {
            return Err(Error::Shape {
                op: "segnet params",
                lhs: k.to_vec(),
                rhs: params[2 * i].shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Forward pass of `arch` with an explicit parameter list, so EMA teacher
/// weights can run through the same network definition.
pub fn forward_params(
    arch: &Architecture,
    params: &[Tensor],
    tape: &mut Tape,
    image: Var,
    mode: PadMode,
) -> Result<(Var, Vec<Var>)> {
    let shape = tape.value(image).shape().to_vec();
    if shape.len() != 3 || shape[2] != arch.in_channels {
        return Err(Error::Shape {
            op: "segnet forward (channels)",
            lhs: shape,
            rhs: vec![arch.in_channels],
        });
    }
    check_param_shapes(arch, params)?;
    let spec = ConvSpec {
        stride: 1,
        pad: arch.kernel / 2,
        mode,
    };
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let layers = arch.widths.len();
    let mut h = image;
    for (i, pair) in vars.chunks(2).enumerate() {
        h = tape.conv2d(h, pair[0], Some(pair[1]), spec)?;
        if i + 1 < layers {
            h = tape.relu(h);
        }
    }
    Ok((h, vars))
}

pub fn predict_params(arch: &Architecture, params: &[Tensor], image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(image.detached());
    let frozen: Vec<Tensor> = params.iter().map(Tensor::detached).collect();
    let (logits, _) = forward_params(arch, &frozen, &mut tape, x, PadMode::Zero)?;
    let probs = tape.softmax(logits)?;
    Ok(tape.value(probs).clone())
}
