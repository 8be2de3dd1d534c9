//! Layers, the two reference architectures and the loss head.

mod arch;
mod checkpoint;
mod pnil;

pub use arch::{build_resnet11, build_small_cnn, ResNetConfig, SmallCnnConfig};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use pnil::{pnil_forward, standard_normal_batch, PnilInit, PnilParams, PNIL_STREAM};

use serde::{Deserialize, Serialize};

use crate::tensor::{one_hot, Reduction, Result, Scalar, Tape, Tensor, TensorError, Var};
use crate::{Error, Result as CrateResult};

/// Source of the standard-normal draws consumed by noise-injection layers.
#[derive(Debug)]
pub enum Noise<'a, T> {
    /// Sample `i` of the batch draws from the stream
    /// `derive_seed(seed, PNIL_STREAM, ids[i])`, so a sample's noise does not
    /// depend on which batch or shard it is evaluated in.
    PerSample { seed: u64, ids: &'a [u64] },
    /// Explicit draws shaped like the input batch (frozen noise).
    Fixed(&'a Tensor<T>),
}

impl<T> Clone for Noise<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Noise<'_, T> {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub weight: usize,
    pub bias: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSpec {
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    /// 1x1 strided shortcut used when the channel count changes.
    pub projection: Option<ConvSpec>,
}

/// A layer; parameter fields are indices into the model's [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Pnil {
        weight: usize,
        bias: usize,
        max_half_log_var: f64,
    },
    Conv(ConvSpec),
    Dense { weight: usize, bias: usize },
    Relu,
    MaxPool(usize),
    Flatten,
    GlobalAvgPool,
    Residual(ResidualSpec),
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, value));
        self.entries.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }
}

/// Parameters recorded on a tape, parallel to the model's [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub arch: String,
    pub layers: Vec<Layer>,
    pub params: ParamStore<T>,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub mode: Mode,
    pub seed: u64,
}

impl<T: Scalar> Model<T> {
    pub fn has_pnil(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Pnil { .. }))
    }

    /// The PNIL weights and biases, when the model has a noise layer.
    pub fn pnil_params(&self) -> Option<PnilParams<T>> {
        self.layers.iter().find_map(|l| match l {
            Layer::Pnil { weight, bias, .. } => Some(PnilParams {
                weight: self.params.tensor(*weight).clone(),
                bias: self.params.tensor(*bias).clone(),
            }),
            _ => None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.num_values()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            layers: self.layers.clone(),
            params: self.params.cast(),
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            mode: self.mode,
            seed: self.seed,
        }
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }

    fn conv(&self, tape: &mut Tape<T>, p: &Bound, x: Var, c: &ConvSpec) -> Result<Var> {
        tape.conv2d(x, p.var(c.weight), Some(p.var(c.bias)), c.stride, c.pad)
    }

    /// Logits of shape `(batch, num_classes)`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var, noise: Noise<'_, T>) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(TensorError::ShapeMismatch {
                op: "model input",
                lhs: shape.to_vec(),
                rhs: self.input_shape.clone(),
            });
        }
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Pnil {
                    weight,
                    bias,
                    max_half_log_var,
                } => {
                    let n = standard_normal_batch(noise, tape.value(h).shape())?;
                    pnil_forward(tape, h, p.var(*weight), p.var(*bias), &n, T::from_f64(*max_half_log_var))?.0
                }
                Layer::Conv(c) => self.conv(tape, p, h, c)?,
                Layer::Dense { weight, bias } => {
                    let z = tape.matmul(h, p.var(*weight))?;
                    tape.add(z, p.var(*bias))?
                }
                Layer::Relu => tape.relu(h)?,
                Layer::MaxPool(k) => tape.max_pool2d(h, *k)?,
                Layer::Flatten => tape.flatten(h)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(h)?,
                Layer::Residual(r) => {
                    let a = self.conv(tape, p, h, &r.conv1)?;
                    let a = tape.relu(a)?;
                    let a = self.conv(tape, p, a, &r.conv2)?;
                    let skip = match &r.projection {
                        Some(pc) => self.conv(tape, p, h, pc)?,
                        None => h,
                    };
                    let s = tape.add(a, skip)?;
                    tape.relu(s)?
                }
            };
        }
        Ok(h)
    }

    /// Forward pass without gradient bookkeeping.
    pub fn logits(&self, x: &Tensor<T>, noise: Noise<'_, T>) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let p = self.bind(&mut tape, false);
        let xv = tape.leaf(x.clone(), false);
        let out = self.forward(&mut tape, &p, xv, noise)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict(&self, x: &Tensor<T>, noise: Noise<'_, T>) -> Result<Vec<usize>> {
        Ok(self.logits(x, noise)?.argmax_rows())
    }

    /// Replaces parameters with checkpoint tensors, matching by name and shape.
    pub fn load_params(&mut self, ckpt: &Checkpoint) -> CrateResult<()> {
        if ckpt.tensors.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                ckpt.tensors.len(),
                self.params.len()
            )));
        }
        for (name, t) in &ckpt.tensors {
            let i = self
                .params
                .index_of(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if self.params.tensor(i).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} incompatible with model shape {:?}",
                    t.shape(),
                    self.params.tensor(i).shape()
                )));
            }
            *self.params.tensor_mut(i) = t.cast();
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy against one-hot targets.
pub fn cross_entropy_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, y: &Tensor<T>) -> Result<Var> {
    tape.softmax_cross_entropy(logits, y, Reduction::Mean)
}

/// Per-sample cross-entropy for integer labels, without a tape.
pub fn per_sample_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Vec<T> {
    let y = one_hot(labels, logits.sample_len());
    crate::tensor::tape_softmax_xent_rows(logits, &y).0
}

/// Row-wise softmax.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let y = one_hot(&vec![0; logits.batch()], logits.sample_len());
    crate::tensor::tape_softmax_xent_rows(logits, &y).1
}
