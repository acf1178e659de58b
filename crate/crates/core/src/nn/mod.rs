//! Parameter storage, basic layers and the reusable network blocks.

pub mod blocks;

use std::ops::Index;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub use blocks::{
    attach_pictogram, dense_fuse, residual_attention, residual_unit_forward, DraModule, ResidualUnit,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered, named parameter tensors of one model. Creation order is the
/// census order used by optimizers and checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

/// One census line: parameter name and shape.
pub type CensusEntry = (String, Vec<usize>);

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|e| &mut e.value)
    }

    pub fn census(&self) -> Vec<CensusEntry> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.shape().to_vec()))
            .collect()
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Registers every tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &Tape<T>) -> Bound<T> {
        Bound {
            vars: self.entries.iter().map(|e| tape.parameter(e.value.clone())).collect(),
        }
    }

    /// Registers every tensor as a constant: the model is evaluated but
    /// never updated through this binding.
    pub fn bind_frozen(&self, tape: &Tape<T>) -> Bound<T> {
        Bound {
            vars: self.entries.iter().map(|e| tape.constant(e.value.clone())).collect(),
        }
    }

    /// Replaces all values, checking the census matches exactly.
    pub fn load_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::invalid(
                "load_values",
                format!("expected {} tensors, got {}", self.entries.len(), values.len()),
            ));
        }
        for (e, v) in self.entries.iter().zip(&values) {
            if e.value.shape() != v.shape() {
                return Err(Error::shape("load_values", e.value.shape(), v.shape()));
            }
        }
        for (e, v) in self.entries.iter_mut().zip(values) {
            e.value = v;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                })
                .collect(),
        }
    }
}

/// Tape handles for every parameter of a [`ParamSet`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound<T: Scalar> {
    vars: Vec<Var<T>>,
}

impl<T: Scalar> Index<ParamId> for Bound<T> {
    type Output = Var<T>;

    fn index(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }
}

impl<T: Scalar> Bound<T> {
    /// Handles supplied by the caller, in census order.
    pub fn from_vars(vars: Vec<Var<T>>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }

    /// Gradients in census order.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|v| grads.get(v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: &Var<T>) -> Var<T> {
        match self {
            Activation::Relu => x.relu(),
            Activation::LeakyRelu(slope) => x.leaky_relu(slope),
        }
    }
}

/// Convolution with bias. He-normal weights scaled by `gain`, zero bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        let weight = params.add(
            format!("{name}.weight"),
            rng.normal_tensor(&[out_channels, in_channels, kernel, kernel], std),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, bound: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        x.conv2d(&bound[self.weight], self.stride, self.padding)?
            .add_channel_bias(&bound[self.bias])
    }
}

/// Fully connected layer `[N,D] -> [N,M]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let std = (1.0 / in_features as f64).sqrt();
        let weight = params.add(
            format!("{name}.weight"),
            rng.normal_tensor(&[out_features, in_features], std),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[out_features]));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, bound: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        x.fully_connected(&bound[self.weight], &bound[self.bias])
    }
}
