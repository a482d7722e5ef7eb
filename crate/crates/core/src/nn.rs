//! Parameterized layers and the convolutional blocks shared by every network.
//!
//! Layers register their tensors in a [`ParamStore`] under a dotted prefix at
//! construction and look them up through a [`Bound`] at forward time.

use hvtr_tensor::{Bound, NormKind, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// He-normal initialization scale for a layer with `fan_in` inputs.
fn he(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::randn(&[inputs, outputs], he(inputs), rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Linear { w, b, inputs, outputs }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.linear(x, p.var(self.w), p.var(self.b))?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub transpose: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::randn(&[cout, cin, k, k], he(cin * k * k), rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv { w, b, stride, pad, transpose: false }
    }

    /// Transposed convolution; weights are `[cin, cout, k, k]`.
    #[allow(clippy::too_many_arguments)]
    pub fn transposed<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        // Each output pixel of a stride-s transposed conv sums cin * (k/s)^2 taps.
        let fan_in = cin * (k / stride).max(1).pow(2);
        let w = store.add(format!("{name}.weight"), Tensor::randn(&[cin, cout, k, k], he(fan_in), rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv { w, b, stride, pad, transpose: true }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let (w, b) = (p.var(self.w), p.var(self.b));
        Ok(if self.transpose {
            tape.conv_transpose2d(x, w, b, self.stride, self.pad)?
        } else {
            tape.conv2d(x, w, b, self.stride, self.pad)?
        })
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub kind: NormKind,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, kind: NormKind) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[channels]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Norm { gamma, beta, kind }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.norm_layer(x, p.var(self.gamma), p.var(self.beta), self.kind)?)
    }
}

/// Stride-2 downsampling: conv 3x3, norm, ReLU.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    conv: Conv,
    norm: Norm,
}

impl EncoderBlock {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, kind: NormKind, rng: &mut R) -> Self {
        EncoderBlock { conv: Conv::new(store, &format!("{name}.conv"), cin, cout, 3, 2, 1, rng), norm: Norm::new(store, &format!("{name}.norm"), cout, kind) }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, p, x)?;
        let y = self.norm.forward(tape, p, y)?;
        Ok(tape.relu(y))
    }
}

/// Stride-2 upsampling: ReLU, transposed conv 4x4, norm.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    conv: Conv,
    norm: Norm,
}

impl DecoderBlock {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, kind: NormKind, rng: &mut R) -> Self {
        DecoderBlock {
            conv: Conv::transposed(store, &format!("{name}.conv"), cin, cout, 4, 2, 1, rng),
            norm: Norm::new(store, &format!("{name}.norm"), cout, kind),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.relu(x);
        let y = self.conv.forward(tape, p, y)?;
        self.norm.forward(tape, p, y)
    }
}

/// `x + norm(conv(relu(norm(conv(x)))))` with 3x3 convolutions.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
}

impl ResBlock {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, kind: NormKind, rng: &mut R) -> Self {
        ResBlock {
            conv1: Conv::new(store, &format!("{name}.conv1"), channels, channels, 3, 1, 1, rng),
            norm1: Norm::new(store, &format!("{name}.norm1"), channels, kind),
            conv2: Conv::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, 1, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), channels, kind),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv1.forward(tape, p, x)?;
        let y = self.norm1.forward(tape, p, y)?;
        let y = tape.relu(y);
        let y = self.conv2.forward(tape, p, y)?;
        let y = self.norm2.forward(tape, p, y)?;
        Ok(tape.add(x, y)?)
    }
}

/// Apply blocks in sequence.
pub fn chain<T: Scalar, B>(tape: &mut Tape<T>, p: &Bound, blocks: &[B], x: Var, f: impl Fn(&B, &mut Tape<T>, &Bound, Var) -> Result<Var>) -> Result<Var> {
    blocks.iter().try_fold(x, |x, b| f(b, tape, p, x))
}

/// Ids of every parameter whose name starts with one of `prefixes`.
pub fn ids_with_prefix<T: Scalar>(store: &ParamStore<T>, prefixes: &[&str]) -> Vec<ParamId> {
    store.ids().filter(|&id| prefixes.iter().any(|p| store.name(id).starts_with(p))).collect()
}
