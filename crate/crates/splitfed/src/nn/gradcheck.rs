//! Central finite-difference gradient checks, run in double precision.
//!
//! The numerical side perturbs one scalar at a time and re-runs the forward
//! pass, so it stays independent of the reverse-mode implementation it
//! verifies. A smooth probe loss `sum(r .* output)` with fixed random
//! weights `r` exercises every output coordinate of any layer shape.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::loss::softmax_cross_entropy;
use crate::nn::model::{backward, forward, GradientStore, LayerSpec, Mode, ModelGraph, ParameterSet};
use crate::tensor::{max_rel_diff, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv1d,
    BatchNorm1d,
    Relu,
    MaxPool1d,
    GlobalAvgPool1d,
    Dense,
    Residual,
    SoftmaxCrossEntropy,
    EndToEnd,
}

pub const ALL_KINDS: &[LayerKind] = &[
    LayerKind::Conv1d,
    LayerKind::BatchNorm1d,
    LayerKind::Relu,
    LayerKind::MaxPool1d,
    LayerKind::GlobalAvgPool1d,
    LayerKind::Dense,
    LayerKind::Residual,
    LayerKind::SoftmaxCrossEntropy,
    LayerKind::EndToEnd,
];

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv1d => "conv1d",
            LayerKind::BatchNorm1d => "batch_norm1d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool1d => "max_pool1d",
            LayerKind::GlobalAvgPool1d => "global_avg_pool1d",
            LayerKind::Dense => "dense",
            LayerKind::Residual => "residual_block",
            LayerKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            LayerKind::EndToEnd => "end_to_end",
        }
    }
}

/// Scalar probe loss: dot product of the forward output with fixed weights.
pub fn probe_loss(
    graph: &ModelGraph,
    params: &ParameterSet<f64>,
    batch: &Tensor<f64>,
    weights: &Tensor<f64>,
) -> Result<f64> {
    // Forward mutates running stats in train mode; evaluate on a clone so
    // repeated probes see identical parameters.
    let mut p = params.clone();
    let (_, out) = forward(graph, &mut p, batch, Mode::Train)?;
    Ok(out
        .data()
        .iter()
        .zip(weights.data())
        .map(|(&y, &r)| y * r)
        .sum())
}

/// Reverse-mode gradients of the probe loss.
pub fn analytic_grads(
    graph: &ModelGraph,
    params: &ParameterSet<f64>,
    batch: &Tensor<f64>,
    weights: &Tensor<f64>,
) -> Result<(GradientStore<f64>, Tensor<f64>)> {
    let mut p = params.clone();
    let (tape, _) = forward(graph, &mut p, batch, Mode::Train)?;
    backward(graph, params, &tape, weights)
}

/// Central finite differences of the probe loss w.r.t. every trainable
/// parameter and every input scalar.
pub fn finite_difference_grads(
    graph: &ModelGraph,
    params: &ParameterSet<f64>,
    batch: &Tensor<f64>,
    weights: &Tensor<f64>,
    step: f64,
) -> Result<(GradientStore<f64>, Tensor<f64>)> {
    let mut grads = GradientStore::zeros_like(params);
    let n_tensors = grads.tensors().len();
    for ti in 0..n_tensors {
        let numel = grads.tensors()[ti].numel();
        for ei in 0..numel {
            let mut plus = params.clone();
            plus.trainable_mut()[ti].data_mut()[ei] += step;
            let mut minus = params.clone();
            minus.trainable_mut()[ti].data_mut()[ei] -= step;
            let lp = probe_loss(graph, &plus, batch, weights)?;
            let lm = probe_loss(graph, &minus, batch, weights)?;
            grads.tensors_mut()[ti].data_mut()[ei] = (lp - lm) / (2.0 * step);
        }
    }

    let mut input_grad = Tensor::zeros(batch.shape().to_vec());
    for ei in 0..batch.numel() {
        let mut plus = batch.clone();
        plus.data_mut()[ei] += step;
        let mut minus = batch.clone();
        minus.data_mut()[ei] -= step;
        let lp = probe_loss(graph, params, &plus, weights)?;
        let lm = probe_loss(graph, params, &minus, weights)?;
        input_grad.data_mut()[ei] = (lp - lm) / (2.0 * step);
    }
    Ok((grads, input_grad))
}

/// Per-tensor relative errors between two gradient stores, plus the input
/// gradient error. Names identify the offending layer on failure.
pub fn compare_grads(
    graph: &ModelGraph,
    analytic: &(GradientStore<f64>, Tensor<f64>),
    numeric: &(GradientStore<f64>, Tensor<f64>),
) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let a = analytic.0.tensors();
    let n = numeric.0.tensors();
    let mut names: Vec<String> = Vec::new();
    for (i, layer) in graph.layers().iter().enumerate() {
        match layer {
            LayerSpec::Conv1d { .. } | LayerSpec::Dense { .. } => {
                names.push(format!("layer{i}.weight ({})", layer.name()));
                names.push(format!("layer{i}.bias ({})", layer.name()));
            }
            LayerSpec::BatchNorm1d { .. } => {
                names.push(format!("layer{i}.scale ({})", layer.name()));
                names.push(format!("layer{i}.shift ({})", layer.name()));
            }
            _ => {}
        }
    }
    for ((name, at), nt) in names.into_iter().zip(a).zip(n) {
        out.push((name, max_rel_diff(at, nt)));
    }
    out.push(("input".to_string(), max_rel_diff(&analytic.1, &numeric.1)));
    out
}

/// One randomized case: a small model of the given kind with random shapes,
/// parameters, and batch. Returns the worst (name, relative error) pair.
pub fn check_case(kind: LayerKind, rng: &mut ChaCha8Rng) -> Result<(String, f64)> {
    if kind == LayerKind::SoftmaxCrossEntropy {
        return check_cross_entropy_case(rng);
    }
    let (graph, batch_shape) = random_graph(kind, rng);
    let mut params = graph.init_params::<f64>(rng.gen());
    // He-init leaves biases and shifts at zero; jitter everything so the
    // check does not pass by accident at a special point.
    for t in params.trainable_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let batch = random_tensor(&batch_shape, rng);
    let out_shape = {
        let mut p = params.clone();
        let (_, out) = forward(&graph, &mut p, &batch, Mode::Train)?;
        out.shape().to_vec()
    };
    let weights = random_tensor(&out_shape, rng);

    let analytic = analytic_grads(&graph, &params, &batch, &weights)?;
    let numeric = finite_difference_grads(&graph, &params, &batch, &weights, FD_STEP)?;
    let errs = compare_grads(&graph, &analytic, &numeric);
    Ok(errs
        .into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least the input gradient"))
}

fn check_cross_entropy_case(rng: &mut ChaCha8Rng) -> Result<(String, f64)> {
    let b_n = rng.gen_range(1..5usize);
    let c_n = rng.gen_range(2..6usize);
    let logits = random_tensor(&[b_n, c_n], rng);
    let labels: Vec<usize> = (0..b_n).map(|_| rng.gen_range(0..c_n)).collect();
    let (_, analytic) = softmax_cross_entropy(&logits, &labels)?;

    let mut numeric = Tensor::zeros(vec![b_n, c_n]);
    for ei in 0..logits.numel() {
        let mut plus = logits.clone();
        plus.data_mut()[ei] += FD_STEP;
        let mut minus = logits.clone();
        minus.data_mut()[ei] -= FD_STEP;
        let (lp, _) = softmax_cross_entropy(&plus, &labels)?;
        let (lm, _) = softmax_cross_entropy(&minus, &labels)?;
        numeric.data_mut()[ei] = (lp - lm) / (2.0 * FD_STEP);
    }
    Ok((
        "softmax_cross_entropy logits".to_string(),
        max_rel_diff(&analytic, &numeric),
    ))
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn random_graph(kind: LayerKind, rng: &mut ChaCha8Rng) -> (ModelGraph, Vec<usize>) {
    let b = rng.gen_range(1..4usize);
    match kind {
        LayerKind::Conv1d => {
            let c = rng.gen_range(1..4usize);
            let o = rng.gen_range(1..5usize);
            let k = rng.gen_range(1..6usize);
            let s = rng.gen_range(1..3usize);
            let l = rng.gen_range(k.max(4)..16usize);
            (
                ModelGraph::new(
                    vec![LayerSpec::Conv1d {
                        in_channels: c,
                        out_channels: o,
                        kernel: k,
                        stride: s,
                    }],
                    vec![c, l],
                )
                .unwrap(),
                vec![b, c, l],
            )
        }
        LayerKind::BatchNorm1d => {
            let c = rng.gen_range(1..4usize);
            let l = rng.gen_range(2..12usize);
            (
                ModelGraph::new(
                    vec![LayerSpec::BatchNorm1d {
                        channels: c,
                        epsilon: 1e-5,
                        momentum: 0.9,
                    }],
                    vec![c, l],
                )
                .unwrap(),
                vec![b.max(2), c, l],
            )
        }
        LayerKind::Relu => {
            let c = rng.gen_range(1..4usize);
            let l = rng.gen_range(2..12usize);
            (
                ModelGraph::new(vec![LayerSpec::Relu], vec![c, l]).unwrap(),
                vec![b, c, l],
            )
        }
        LayerKind::MaxPool1d => {
            let c = rng.gen_range(1..4usize);
            let w = rng.gen_range(2..4usize);
            let s = rng.gen_range(1..3usize);
            let l = rng.gen_range(w + 1..16usize);
            (
                ModelGraph::new(
                    vec![LayerSpec::MaxPool1d { window: w, stride: s }],
                    vec![c, l],
                )
                .unwrap(),
                vec![b, c, l],
            )
        }
        LayerKind::GlobalAvgPool1d => {
            let c = rng.gen_range(1..4usize);
            let l = rng.gen_range(2..12usize);
            (
                ModelGraph::new(vec![LayerSpec::GlobalAvgPool1d], vec![c, l]).unwrap(),
                vec![b, c, l],
            )
        }
        LayerKind::Dense => {
            let i = rng.gen_range(1..6usize);
            let o = rng.gen_range(1..6usize);
            (
                ModelGraph::new(vec![LayerSpec::Dense { inputs: i, outputs: o }], vec![i]).unwrap(),
                vec![b, i],
            )
        }
        LayerKind::Residual => {
            let c = rng.gen_range(1..3usize);
            let k = rng.gen_range(1..5usize);
            let l = rng.gen_range(k.max(4)..12usize);
            (
                ModelGraph::new(
                    vec![
                        LayerSpec::ResidualStart,
                        LayerSpec::Conv1d {
                            in_channels: c,
                            out_channels: c,
                            kernel: k,
                            stride: 1,
                        },
                        LayerSpec::Relu,
                        LayerSpec::Conv1d {
                            in_channels: c,
                            out_channels: c,
                            kernel: k,
                            stride: 1,
                        },
                        LayerSpec::ResidualEnd,
                    ],
                    vec![c, l],
                )
                .unwrap(),
                vec![b, c, l],
            )
        }
        LayerKind::EndToEnd | LayerKind::SoftmaxCrossEntropy => {
            let l = 16;
            (
                ModelGraph::new(
                    vec![
                        LayerSpec::Conv1d {
                            in_channels: 1,
                            out_channels: 3,
                            kernel: 4,
                            stride: 1,
                        },
                        LayerSpec::BatchNorm1d {
                            channels: 3,
                            epsilon: 1e-5,
                            momentum: 0.9,
                        },
                        LayerSpec::Relu,
                        LayerSpec::ResidualStart,
                        LayerSpec::Conv1d {
                            in_channels: 3,
                            out_channels: 3,
                            kernel: 3,
                            stride: 1,
                        },
                        LayerSpec::ResidualEnd,
                        LayerSpec::MaxPool1d { window: 2, stride: 2 },
                        LayerSpec::GlobalAvgPool1d,
                        LayerSpec::Dense { inputs: 3, outputs: 2 },
                    ],
                    vec![1, l],
                )
                .unwrap(),
                vec![b.max(2), 1, l],
            )
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub kind: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub passed: bool,
}

/// Runs `cases` randomized checks per layer kind.
pub fn run_suite(cases: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    let mut results = Vec::new();
    for &kind in ALL_KINDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind.name().len() as u64) << 32 ^ kind as u64);
        let mut worst = (String::new(), 0.0f64);
        for _ in 0..cases {
            let (name, err) = check_case(kind, &mut rng)?;
            if err > worst.1 {
                worst = (name, err);
            }
        }
        results.push(SuiteResult {
            kind: kind.name(),
            cases,
            max_rel_err: worst.1,
            worst_tensor: worst.0,
            passed: worst.1 < GRAD_TOL,
        });
    }
    Ok(results)
}
