//! Layer chain models: layer descriptions, shape inference, parameters, and
//! the forward/backward drivers.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers;
use crate::tensor::{Scalar, Tensor};

fn default_stride() -> usize {
    1
}
fn default_epsilon() -> f64 {
    1e-5
}
fn default_bn_momentum() -> f64 {
    0.9
}

/// One layer of the chain. Conv1d always uses "same" zero padding
/// (output length = ceil(input / stride)).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
    },
    BatchNorm1d {
        channels: usize,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default = "default_bn_momentum")]
        momentum: f64,
    },
    Relu,
    MaxPool1d {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool1d,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Opens a residual block: the current activation is saved and added
    /// back at the matching `ResidualEnd`.
    ResidualStart,
    ResidualEnd,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::BatchNorm1d { .. } => "batch_norm1d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool1d { .. } => "max_pool1d",
            LayerSpec::GlobalAvgPool1d => "global_avg_pool1d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::ResidualStart => "residual_start",
            LayerSpec::ResidualEnd => "residual_end",
        }
    }
}

/// Per-sample shape flowing between layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShapeState {
    Spatial { channels: usize, length: usize },
    Flat(usize),
}

impl ShapeState {
    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        match dims {
            [c, l] => Ok(ShapeState::Spatial {
                channels: *c,
                length: *l,
            }),
            [f] => Ok(ShapeState::Flat(*f)),
            other => Err(Error::InvalidModel(format!(
                "per-sample shape must have rank 1 or 2, got {other:?}"
            ))),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match self {
            ShapeState::Spatial { channels, length } => vec![*channels, *length],
            ShapeState::Flat(f) => vec![*f],
        }
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }
}

/// An ordered layer chain with a fixed per-sample input shape.
/// Construction validates static shape compatibility and residual nesting.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    /// Trainable scalars (conv/dense weights and biases, batch-norm scale/shift).
    pub trainable: u64,
    /// Batch-norm running statistics, reported separately for sync-size accounting.
    pub running_stats: u64,
}

impl ModelGraph {
    pub fn new(layers: Vec<LayerSpec>, input_shape: Vec<usize>) -> Result<Self> {
        let graph = ModelGraph {
            layers,
            input_shape,
        };
        graph.infer_shapes()?;
        Ok(graph)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-sample shape after every layer. Errors on any static
    /// incompatibility, including residual-merge shape mismatch.
    pub fn infer_shapes(&self) -> Result<Vec<ShapeState>> {
        let mut state = ShapeState::from_dims(&self.input_shape)?;
        let mut out = Vec::with_capacity(self.layers.len());
        let mut residual_stack: Vec<ShapeState> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| Error::InvalidModel(format!("layer {i} ({}): {msg}", layer.name()));
            state = match layer {
                LayerSpec::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                } => {
                    if *kernel == 0 || *stride == 0 || *in_channels == 0 || *out_channels == 0 {
                        return Err(err("hyperparameters must be positive".into()));
                    }
                    match state {
                        ShapeState::Spatial { channels, length } if channels == *in_channels => {
                            ShapeState::Spatial {
                                channels: *out_channels,
                                length: layers::conv1d_out_len(length, *stride),
                            }
                        }
                        other => {
                            return Err(err(format!(
                                "expects {in_channels} input channels, got {other:?}"
                            )))
                        }
                    }
                }
                LayerSpec::BatchNorm1d { channels, .. } => match state {
                    ShapeState::Spatial {
                        channels: c,
                        length,
                    } if c == *channels => ShapeState::Spatial {
                        channels: c,
                        length,
                    },
                    other => {
                        return Err(err(format!("expects {channels} channels, got {other:?}")))
                    }
                },
                LayerSpec::Relu => state,
                LayerSpec::MaxPool1d { window, stride } => match state {
                    ShapeState::Spatial { channels, length } => ShapeState::Spatial {
                        channels,
                        length: layers::maxpool1d_out_len(length, *window, *stride)
                            .map_err(|e| err(e.to_string()))?,
                    },
                    other => return Err(err(format!("expects spatial input, got {other:?}"))),
                },
                LayerSpec::GlobalAvgPool1d => match state {
                    ShapeState::Spatial { channels, .. } => ShapeState::Flat(channels),
                    other => return Err(err(format!("expects spatial input, got {other:?}"))),
                },
                LayerSpec::Dense { inputs, outputs } => match state {
                    ShapeState::Flat(f) if f == *inputs => ShapeState::Flat(*outputs),
                    other => {
                        return Err(err(format!("expects flat input of {inputs}, got {other:?}")))
                    }
                },
                LayerSpec::ResidualStart => {
                    residual_stack.push(state.clone());
                    state
                }
                LayerSpec::ResidualEnd => {
                    let skip = residual_stack
                        .pop()
                        .ok_or_else(|| err("residual_end without matching residual_start".into()))?;
                    if skip != state {
                        return Err(err(format!(
                            "residual merge shape mismatch: skip {skip:?} vs trunk {state:?}"
                        )));
                    }
                    state
                }
            };
            out.push(state.clone());
        }
        if !residual_stack.is_empty() {
            return Err(Error::InvalidModel(
                "unclosed residual_start".to_string(),
            ));
        }
        Ok(out)
    }

    /// Per-sample output shape.
    pub fn output_shape(&self) -> Result<ShapeState> {
        Ok(self
            .infer_shapes()?
            .pop()
            .unwrap_or(ShapeState::from_dims(&self.input_shape)?))
    }

    pub fn param_count(&self) -> ParamCount {
        let mut trainable = 0u64;
        let mut running = 0u64;
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    trainable += (in_channels * out_channels * kernel + out_channels) as u64;
                }
                LayerSpec::BatchNorm1d { channels, .. } => {
                    trainable += 2 * *channels as u64;
                    running += 2 * *channels as u64;
                }
                LayerSpec::Dense { inputs, outputs } => {
                    trainable += (inputs * outputs + outputs) as u64;
                }
                _ => {}
            }
        }
        ParamCount {
            trainable,
            running_stats: running,
        }
    }

    /// He-uniform initialization for conv/dense weights, zeros for biases,
    /// scale 1 / shift 0 for batch norm. Deterministic per seed.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParameterSet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he_uniform = |shape: Vec<usize>, fan_in: usize| {
            let limit = (6.0 / fan_in as f64).sqrt();
            let numel: usize = shape.iter().product();
            let data = (0..numel)
                .map(|_| T::from_f64(rng.gen_range(-limit..limit)).unwrap())
                .collect();
            Tensor::new(shape, data).expect("init shape")
        };
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                LayerSpec::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => LayerParams::Conv {
                    weight: he_uniform(
                        vec![*out_channels, *in_channels, *kernel],
                        in_channels * kernel,
                    ),
                    bias: Tensor::zeros(vec![*out_channels]),
                },
                LayerSpec::BatchNorm1d { channels, .. } => LayerParams::BatchNorm {
                    scale: Tensor::full(vec![*channels], T::one()),
                    shift: Tensor::zeros(vec![*channels]),
                    running_mean: Tensor::zeros(vec![*channels]),
                    running_var: Tensor::full(vec![*channels], T::one()),
                },
                LayerSpec::Dense { inputs, outputs } => LayerParams::Dense {
                    weight: he_uniform(vec![*outputs, *inputs], *inputs),
                    bias: Tensor::zeros(vec![*outputs]),
                },
                _ => LayerParams::None,
            })
            .collect();
        ParameterSet { layers }
    }

    /// Splits the chain into `[0, cut)` and `[cut, N)` sub-graphs; the tail's
    /// input shape is the shape flowing across the cut.
    pub fn sub_graphs(&self, cut: usize) -> Result<(ModelGraph, ModelGraph)> {
        if cut == 0 || cut >= self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "cut index {cut} out of range [1, {}]",
                self.layers.len().saturating_sub(1)
            )));
        }
        let shapes = self.infer_shapes()?;
        let front = ModelGraph::new(self.layers[..cut].to_vec(), self.input_shape.clone())?;
        let tail = ModelGraph::new(self.layers[cut..].to_vec(), shapes[cut - 1].dims())
            .map_err(|e| Error::InvalidArgument(format!("cut index {cut}: {e}")))?;
        Ok((front, tail))
    }
}

/// Per-layer named parameter tensors. `None` for parameter-free layers,
/// keeping indices aligned with the graph's layer list.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T: Scalar> {
    None,
    Conv {
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    BatchNorm {
        scale: Tensor<T>,
        shift: Tensor<T>,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
    },
    Dense {
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T: Scalar> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    /// Trainable tensors in layer order, with stable names.
    pub fn trainable(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, lp) in self.layers.iter().enumerate() {
            match lp {
                LayerParams::Conv { weight, bias } | LayerParams::Dense { weight, bias } => {
                    out.push((format!("layer{i}.weight"), weight));
                    out.push((format!("layer{i}.bias"), bias));
                }
                LayerParams::BatchNorm { scale, shift, .. } => {
                    out.push((format!("layer{i}.scale"), scale));
                    out.push((format!("layer{i}.shift"), shift));
                }
                LayerParams::None => {}
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for lp in self.layers.iter_mut() {
            match lp {
                LayerParams::Conv { weight, bias } | LayerParams::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerParams::BatchNorm { scale, shift, .. } => {
                    out.push(scale);
                    out.push(shift);
                }
                LayerParams::None => {}
            }
        }
        out
    }

    /// Every tensor including batch-norm running statistics, in layer order.
    /// This is the FedAvg model-sync payload inventory.
    pub fn all_tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for lp in &self.layers {
            match lp {
                LayerParams::Conv { weight, bias } | LayerParams::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerParams::BatchNorm {
                    scale,
                    shift,
                    running_mean,
                    running_var,
                } => {
                    out.push(scale);
                    out.push(shift);
                    out.push(running_mean);
                    out.push(running_var);
                }
                LayerParams::None => {}
            }
        }
        out
    }

    pub fn all_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for lp in self.layers.iter_mut() {
            match lp {
                LayerParams::Conv { weight, bias } | LayerParams::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerParams::BatchNorm {
                    scale,
                    shift,
                    running_mean,
                    running_var,
                } => {
                    out.push(scale);
                    out.push(shift);
                    out.push(running_mean);
                    out.push(running_var);
                }
                LayerParams::None => {}
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            layers: self
                .layers
                .iter()
                .map(|lp| match lp {
                    LayerParams::None => LayerParams::None,
                    LayerParams::Conv { weight, bias } => LayerParams::Conv {
                        weight: weight.cast(),
                        bias: bias.cast(),
                    },
                    LayerParams::Dense { weight, bias } => LayerParams::Dense {
                        weight: weight.cast(),
                        bias: bias.cast(),
                    },
                    LayerParams::BatchNorm {
                        scale,
                        shift,
                        running_mean,
                        running_var,
                    } => LayerParams::BatchNorm {
                        scale: scale.cast(),
                        shift: shift.cast(),
                        running_mean: running_mean.cast(),
                        running_var: running_var.cast(),
                    },
                })
                .collect(),
        }
    }

    /// Splits parameters at a layer index, mirroring `ModelGraph::sub_graphs`.
    pub fn split_at(mut self, cut: usize) -> (ParameterSet<T>, ParameterSet<T>) {
        let tail = self.layers.split_off(cut);
        (self, ParameterSet { layers: tail })
    }
}

/// Gradients mirroring the trainable tensors of a `ParameterSet`.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrads<T: Scalar> {
    None,
    Conv { weight: Tensor<T>, bias: Tensor<T> },
    BatchNorm { scale: Tensor<T>, shift: Tensor<T> },
    Dense { weight: Tensor<T>, bias: Tensor<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientStore<T: Scalar> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T: Scalar> GradientStore<T> {
    pub fn zeros_like(params: &ParameterSet<T>) -> Self {
        GradientStore {
            layers: params
                .layers
                .iter()
                .map(|lp| match lp {
                    LayerParams::None => LayerGrads::None,
                    LayerParams::Conv { weight, bias } => LayerGrads::Conv {
                        weight: Tensor::zeros(weight.shape().to_vec()),
                        bias: Tensor::zeros(bias.shape().to_vec()),
                    },
                    LayerParams::Dense { weight, bias } => LayerGrads::Dense {
                        weight: Tensor::zeros(weight.shape().to_vec()),
                        bias: Tensor::zeros(bias.shape().to_vec()),
                    },
                    LayerParams::BatchNorm { scale, shift, .. } => LayerGrads::BatchNorm {
                        scale: Tensor::zeros(scale.shape().to_vec()),
                        shift: Tensor::zeros(shift.shape().to_vec()),
                    },
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for lg in &self.layers {
            match lg {
                LayerGrads::Conv { weight, bias } | LayerGrads::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerGrads::BatchNorm { scale, shift } => {
                    out.push(scale);
                    out.push(shift);
                }
                LayerGrads::None => {}
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for lg in self.layers.iter_mut() {
            match lg {
                LayerGrads::Conv { weight, bias } | LayerGrads::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerGrads::BatchNorm { scale, shift } => {
                    out.push(scale);
                    out.push(shift);
                }
                LayerGrads::None => {}
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &GradientStore<T>) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::ShapeMismatch(
                "gradient store layer count mismatch".to_string(),
            ));
        }
        let mut a = self.tensors_mut();
        let b = other.tensors();
        if a.len() != b.len() {
            return Err(Error::ShapeMismatch(
                "gradient store tensor count mismatch".to_string(),
            ));
        }
        for (x, y) in a.iter_mut().zip(b) {
            x.add_assign(y)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            t.scale_in_place(factor);
        }
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        for t in self.tensors() {
            t.ensure_finite(context)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-layer cached values from the forward pass, consumed by backward.
enum LayerCache<T: Scalar> {
    None,
    Conv { input: Tensor<T> },
    BatchNorm(layers::BatchNormCache<T>),
    Relu { input: Tensor<T> },
    MaxPool { input_shape: Vec<usize>, argmax: Vec<u32> },
    Gap { input_len: usize },
    Dense { input: Tensor<T> },
}

/// Everything backward needs from a train-mode forward pass.
pub struct ActivationTape<T: Scalar> {
    caches: Vec<LayerCache<T>>,
    mode: Mode,
    output_shape: Vec<usize>,
    input_shape: Vec<usize>,
}

impl<T: Scalar> ActivationTape<T> {
    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }
}

/// Runs the chain over a batch. Train mode records an activation tape and
/// updates batch-norm running statistics; eval mode normalizes with the
/// running statistics. The batch's first dimension is the batch size.
pub fn forward<T: Scalar>(
    graph: &ModelGraph,
    params: &mut ParameterSet<T>,
    batch: &Tensor<T>,
    mode: Mode,
) -> Result<(ActivationTape<T>, Tensor<T>)> {
    if batch.shape().len() < 2 || batch.shape()[1..] != *graph.input_shape() {
        return Err(Error::ShapeMismatch(format!(
            "batch shape {:?} does not match model input {:?} (plus batch dim)",
            batch.shape(),
            graph.input_shape()
        )));
    }
    if params.layers.len() != graph.num_layers() {
        return Err(Error::InvalidModel(
            "parameter set does not match model layer count".to_string(),
        ));
    }

    let mut current = batch.clone();
    let mut caches = Vec::with_capacity(graph.num_layers());
    let mut skip_stack: Vec<Tensor<T>> = Vec::new();
    for (i, (layer, lp)) in graph.layers().iter().zip(params.layers.iter_mut()).enumerate() {
        let (next, cache) = match (layer, lp) {
            (LayerSpec::Conv1d { stride, .. }, LayerParams::Conv { weight, bias }) => {
                let y = layers::conv1d_forward(&current, weight, bias, *stride);
                (y, LayerCache::Conv { input: current })
            }
            (
                LayerSpec::BatchNorm1d {
                    epsilon, momentum, ..
                },
                LayerParams::BatchNorm {
                    scale,
                    shift,
                    running_mean,
                    running_var,
                },
            ) => match mode {
                Mode::Train => {
                    let (y, cache) = layers::batchnorm1d_forward_train(
                        &current,
                        scale,
                        shift,
                        running_mean,
                        running_var,
                        *epsilon,
                        *momentum,
                    );
                    (y, LayerCache::BatchNorm(cache))
                }
                Mode::Eval => {
                    let y = layers::batchnorm1d_forward_eval(
                        &current,
                        scale,
                        shift,
                        running_mean,
                        running_var,
                        *epsilon,
                    );
                    (y, LayerCache::None)
                }
            },
            (LayerSpec::Relu, LayerParams::None) => {
                let y = layers::relu_forward(&current);
                (y, LayerCache::Relu { input: current })
            }
            (LayerSpec::MaxPool1d { window, stride }, LayerParams::None) => {
                let (y, argmax) = layers::maxpool1d_forward(&current, *window, *stride);
                (
                    y,
                    LayerCache::MaxPool {
                        input_shape: current.shape().to_vec(),
                        argmax,
                    },
                )
            }
            (LayerSpec::GlobalAvgPool1d, LayerParams::None) => {
                let input_len = current.shape()[2];
                let y = layers::global_avg_pool1d_forward(&current);
                (y, LayerCache::Gap { input_len })
            }
            (LayerSpec::Dense { .. }, LayerParams::Dense { weight, bias }) => {
                let y = layers::dense_forward(&current, weight, bias);
                (y, LayerCache::Dense { input: current })
            }
            (LayerSpec::ResidualStart, LayerParams::None) => {
                skip_stack.push(current.clone());
                (current, LayerCache::None)
            }
            (LayerSpec::ResidualEnd, LayerParams::None) => {
                let skip = skip_stack
                    .pop()
                    .expect("residual nesting validated at construction");
                let mut y = current;
                y.add_assign(&skip)?;
                (y, LayerCache::None)
            }
            (spec, _) => {
                return Err(Error::InvalidModel(format!(
                    "layer {i} ({}) has mismatched parameters",
                    spec.name()
                )))
            }
        };
        current = next;
        caches.push(cache);
    }
    current.ensure_finite("forward output")?;
    Ok((
        ActivationTape {
            caches,
            mode,
            output_shape: current.shape().to_vec(),
            input_shape: batch.shape().to_vec(),
        },
        current,
    ))
}

/// Reverse pass over a train-mode tape. Returns parameter gradients and the
/// gradient with respect to the model input.
pub fn backward<T: Scalar>(
    graph: &ModelGraph,
    params: &ParameterSet<T>,
    tape: &ActivationTape<T>,
    loss_grad: &Tensor<T>,
) -> Result<(GradientStore<T>, Tensor<T>)> {
    if tape.mode != Mode::Train {
        return Err(Error::InvalidArgument(
            "backward requires a train-mode tape".to_string(),
        ));
    }
    if tape.caches.len() != graph.num_layers() {
        return Err(Error::InvalidModel(
            "tape does not match model layer count".to_string(),
        ));
    }
    if loss_grad.shape() != tape.output_shape {
        return Err(Error::ShapeMismatch(format!(
            "loss gradient shape {:?} vs forward output {:?}",
            loss_grad.shape(),
            tape.output_shape
        )));
    }

    let mut grads = GradientStore::zeros_like(params);
    let mut current = loss_grad.clone();
    let mut skip_grads: Vec<Tensor<T>> = Vec::new();
    for i in (0..graph.num_layers()).rev() {
        let layer = &graph.layers()[i];
        let cache = &tape.caches[i];
        current = match (layer, cache, &params.layers[i]) {
            (
                LayerSpec::Conv1d { stride, .. },
                LayerCache::Conv { input },
                LayerParams::Conv { weight, .. },
            ) => {
                let (dx, dw, db) = layers::conv1d_backward(input, weight, *stride, &current);
                grads.layers[i] = LayerGrads::Conv {
                    weight: dw,
                    bias: db,
                };
                dx
            }
            (
                LayerSpec::BatchNorm1d { .. },
                LayerCache::BatchNorm(bn_cache),
                LayerParams::BatchNorm { scale, .. },
            ) => {
                let (dx, dscale, dshift) = layers::batchnorm1d_backward(bn_cache, scale, &current);
                grads.layers[i] = LayerGrads::BatchNorm {
                    scale: dscale,
                    shift: dshift,
                };
                dx
            }
            (LayerSpec::Relu, LayerCache::Relu { input }, _) => {
                layers::relu_backward(input, &current)
            }
            (
                LayerSpec::MaxPool1d { .. },
                LayerCache::MaxPool { input_shape, argmax },
                _,
            ) => layers::maxpool1d_backward(input_shape, argmax, &current),
            (LayerSpec::GlobalAvgPool1d, LayerCache::Gap { input_len }, _) => {
                layers::global_avg_pool1d_backward(*input_len, &current)
            }
            (
                LayerSpec::Dense { .. },
                LayerCache::Dense { input },
                LayerParams::Dense { weight, .. },
            ) => {
                let (dx, dw, db) = layers::dense_backward(input, weight, &current);
                grads.layers[i] = LayerGrads::Dense {
                    weight: dw,
                    bias: db,
                };
                dx
            }
            // Reverse of the skip add: the end contributes the incoming
            // gradient to both branches; the start collects the skip term.
            (LayerSpec::ResidualEnd, LayerCache::None, _) => {
                skip_grads.push(current.clone());
                current
            }
            (LayerSpec::ResidualStart, LayerCache::None, _) => {
                let skip = skip_grads
                    .pop()
                    .expect("residual nesting validated at construction");
                let mut g = current;
                g.add_assign(&skip)?;
                g
            }
            (spec, _, _) => {
                return Err(Error::InvalidModel(format!(
                    "tape/model mismatch at layer {i} ({})",
                    spec.name()
                )))
            }
        };
    }
    if current.shape() != tape.input_shape {
        return Err(Error::ShapeMismatch(
            "input gradient shape does not match batch shape".to_string(),
        ));
    }
    current.ensure_finite("backward input gradient")?;
    grads.ensure_finite("backward parameter gradients")?;
    Ok((grads, current))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_graph() -> ModelGraph {
        ModelGraph::new(
            vec![LayerSpec::Dense {
                inputs: 2,
                outputs: 2,
            }],
            vec![2],
        )
        .unwrap()
    }

    #[test]
    fn empty_chain_is_identity() {
        let graph = ModelGraph::new(vec![], vec![3]).unwrap();
        let mut params = graph.init_params::<f32>(0);
        let batch = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (_, out) = forward(&graph, &mut params, &batch, Mode::Eval).unwrap();
        assert_eq!(out, batch);
    }

    #[test]
    fn dense_identity_weights_pass_input_through() {
        let graph = dense_graph();
        let mut params = graph.init_params::<f32>(0);
        params.layers[0] = LayerParams::Dense {
            weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::zeros(vec![2]),
        };
        let batch = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let (_, out) = forward(&graph, &mut params, &batch, Mode::Eval).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn forward_rejects_wrong_batch_shape() {
        let graph = dense_graph();
        let mut params = graph.init_params::<f32>(0);
        let batch = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(forward(&graph, &mut params, &batch, Mode::Eval).is_err());
    }

    #[test]
    fn backward_dense_hand_derivation() {
        let graph = dense_graph();
        let mut params = graph.init_params::<f32>(0);
        params.layers[0] = LayerParams::Dense {
            weight: Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            bias: Tensor::zeros(vec![2]),
        };
        let batch = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let (tape, _) = forward(&graph, &mut params, &batch, Mode::Train).unwrap();
        let loss_grad = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let (grads, dx) = backward(&graph, &params, &tape, &loss_grad).unwrap();
        match &grads.layers[0] {
            LayerGrads::Dense { weight, bias } => {
                assert_eq!(weight.data(), &[1.0, 1.0, 1.0, 1.0]);
                assert_eq!(bias.data(), &[1.0, 1.0]);
            }
            other => panic!("unexpected grads {other:?}"),
        }
        assert_eq!(dx.data(), &[4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_eval_tape() {
        let graph = dense_graph();
        let mut params = graph.init_params::<f32>(0);
        let batch = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let (tape, _) = forward(&graph, &mut params, &batch, Mode::Eval).unwrap();
        let loss_grad = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        assert!(backward(&graph, &params, &tape, &loss_grad).is_err());
    }

    #[test]
    fn residual_requires_matching_shapes() {
        let bad = ModelGraph::new(
            vec![
                LayerSpec::ResidualStart,
                LayerSpec::Conv1d {
                    in_channels: 2,
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                },
                LayerSpec::ResidualEnd,
            ],
            vec![2, 8],
        );
        assert!(bad.is_err());

        let good = ModelGraph::new(
            vec![
                LayerSpec::ResidualStart,
                LayerSpec::Conv1d {
                    in_channels: 2,
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                },
                LayerSpec::ResidualEnd,
            ],
            vec![2, 8],
        );
        assert!(good.is_ok());
    }

    #[test]
    fn residual_unbalanced_markers_rejected() {
        assert!(ModelGraph::new(vec![LayerSpec::ResidualEnd], vec![2, 8]).is_err());
        assert!(ModelGraph::new(vec![LayerSpec::ResidualStart], vec![2, 8]).is_err());
    }

    #[test]
    fn residual_forward_adds_skip() {
        let graph = ModelGraph::new(
            vec![
                LayerSpec::ResidualStart,
                LayerSpec::Relu,
                LayerSpec::ResidualEnd,
            ],
            vec![1, 3],
        )
        .unwrap();
        let mut params = graph.init_params::<f32>(0);
        let batch = Tensor::new(vec![1, 1, 3], vec![-1.0, 0.5, 2.0]).unwrap();
        let (_, out) = forward(&graph, &mut params, &batch, Mode::Eval).unwrap();
        // relu(x) + x
        assert_eq!(out.data(), &[-1.0, 1.0, 4.0]);
    }

    #[test]
    fn param_count_examples() {
        let dense = ModelGraph::new(
            vec![LayerSpec::Dense {
                inputs: 3,
                outputs: 2,
            }],
            vec![3],
        )
        .unwrap();
        assert_eq!(dense.param_count().trainable, 8);

        let conv = ModelGraph::new(
            vec![LayerSpec::Conv1d {
                in_channels: 1,
                out_channels: 32,
                kernel: 16,
                stride: 1,
            }],
            vec![1, 256],
        )
        .unwrap();
        assert_eq!(conv.param_count().trainable, 544);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let graph = dense_graph();
        let a = graph.init_params::<f32>(7);
        let b = graph.init_params::<f32>(7);
        let c = graph.init_params::<f32>(8);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
