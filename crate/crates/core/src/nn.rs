//! Named parameters and sequential layer stacks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{glorot_uniform, Mode, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces a parameter's values; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name:?}")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::shape(
                "set parameter",
                self.values[id.0].shape(),
                value.shape(),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Records every parameter on `tape` as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.param(v.clone())).collect()
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| tape.constant(v.clone()))
            .collect()
    }

    /// Rounds every value to the nearest `f32`, the precision weights are stored at.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.values {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense {
        weight: ParamId,
        bias: ParamId,
    },
    Conv2d {
        filters: ParamId,
        bias: ParamId,
        stride: usize,
    },
    MaxPool2d {
        pool: (usize, usize),
    },
    Dropout {
        rate: f64,
    },
    Activation(Activation),
    /// Reshape each row, keeping the leading batch axis.
    Reshape {
        row_shape: Vec<usize>,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sequential {
    layers: Vec<Layer>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn push(&mut self, layer: Layer) -> &mut Self {
        self.layers.push(layer);
        self
    }

    /// Adds a Glorot-initialised `inputs -> outputs` dense layer with zero bias.
    pub fn dense(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut Rng,
    ) -> &mut Self {
        let weight = store.add(
            format!("{name}.weight"),
            glorot_uniform([inputs, outputs], inputs, outputs, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([outputs]));
        self.push(Layer::Dense { weight, bias })
    }

    /// Adds `filters` kernels of `kernel` over `channels` input channels.
    pub fn conv2d(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        filters: usize,
        kernel: (usize, usize),
        stride: usize,
        rng: &mut Rng,
    ) -> &mut Self {
        let receptive = kernel.0 * kernel.1;
        let weights = glorot_uniform(
            [filters, kernel.0, kernel.1, channels],
            receptive * channels,
            receptive * filters,
            rng,
        );
        let filters_id = store.add(format!("{name}.filters"), weights);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([filters]));
        self.push(Layer::Conv2d {
            filters: filters_id,
            bias,
            stride,
        })
    }

    pub fn activation(&mut self, activation: Activation) -> &mut Self {
        self.push(Layer::Activation(activation))
    }

    pub fn dropout(&mut self, rate: f64) -> &mut Self {
        self.push(Layer::Dropout { rate })
    }

    pub fn maxpool2d(&mut self, pool: (usize, usize)) -> &mut Self {
        self.push(Layer::MaxPool2d { pool })
    }

    pub fn reshape(&mut self, row_shape: Vec<usize>) -> &mut Self {
        self.push(Layer::Reshape { row_shape })
    }

    /// Dense stack over `widths`, `hidden` after every layer but the last and
    /// `output` (if any) after the last.
    pub fn dense_stack(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        hidden: Activation,
        output: Option<Activation>,
        rng: &mut Rng,
    ) -> Self {
        let mut seq = Sequential::new();
        let n = widths.len().saturating_sub(1);
        for (i, pair) in widths.windows(2).enumerate() {
            seq.dense(store, &format!("{prefix}.{i}"), pair[0], pair[1], rng);
            if i + 1 < n {
                seq.activation(hidden);
            } else if let Some(act) = output {
                seq.activation(act);
            }
        }
        seq
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Dense { weight, bias } => vec![*weight, *bias],
                Layer::Conv2d { filters, bias, .. } => vec![*filters, *bias],
                _ => Vec::new(),
            })
            .collect()
    }

    /// Forward pass. A convolution followed by relu and max-pooling runs as
    /// one fused node (same values, cheaper gradients).
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        self.run(tape, params, x, mode, rng, true, |_| ())
    }

    /// Forward pass recording every layer as its own node.
    pub fn forward_unfused(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        self.run(tape, params, x, mode, rng, false, |_| ())
    }

    /// Per-row output shape after every layer, from an unfused pass of `x`.
    pub fn trace_shapes(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        rng: &mut Rng,
    ) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        self.run(tape, params, x, Mode::Eval, rng, false, |t: &Tensor| {
            shapes.push(t.shape()[1..].to_vec())
        })?;
        Ok(shapes)
    }

    #[allow(clippy::too_many_arguments)]
    fn run<F>(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut Rng,
        fuse: bool,
        mut observe: F,
    ) -> Result<Var>
    where
        F: FnMut(&Tensor),
    {
        let mut h = x;
        let mut i = 0;
        while i < self.layers.len() {
            if fuse {
                if let [Layer::Conv2d {
                    filters,
                    bias,
                    stride,
                }, Layer::Activation(Activation::Relu), Layer::MaxPool2d { pool }, ..] =
                    &self.layers[i..]
                {
                    h = tape.conv2d_relu_maxpool(
                        h,
                        params[filters.0],
                        params[bias.0],
                        *stride,
                        *pool,
                    )?;
                    i += 3;
                    continue;
                }
            }
            h = match &self.layers[i] {
                Layer::Dense { weight, bias } => tape.dense(h, params[weight.0], params[bias.0])?,
                Layer::Conv2d {
                    filters,
                    bias,
                    stride,
                } => tape.conv2d(h, params[filters.0], params[bias.0], *stride)?,
                Layer::MaxPool2d { pool } => tape.maxpool2d(h, *pool)?,
                Layer::Dropout { rate } => tape.dropout(h, *rate, mode, rng)?,
                Layer::Activation(Activation::Relu) => tape.relu(h)?,
                Layer::Activation(Activation::Sigmoid) => tape.sigmoid(h)?,
                Layer::Reshape { row_shape } => {
                    let rows = tape.value(h)?.rows();
                    let mut shape = vec![rows];
                    shape.extend_from_slice(row_shape);
                    tape.reshape(h, shape)?
                }
            };
            observe(tape.value(h)?);
            i += 1;
        }
        Ok(h)
    }
}
