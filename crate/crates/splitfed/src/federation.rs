//! Deterministic multi-client training simulator.
//!
//! One `Simulation` owns M client states and a server state and advances
//! round by round under one of four schemes. Every tensor that crosses the
//! client/server boundary is actually encoded, counted in the traffic
//! ledger, and decoded again, so measured bytes are the wire truth.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::SegmentDataset;
use crate::error::{Error, Result};
use crate::nn::loss::{accuracy, softmax_cross_entropy};
use crate::nn::model::{backward, forward, Mode, ModelGraph, ParameterSet};
use crate::nn::optim::{sgd_step, OptimizerState};
use crate::protocol::{decode, encode, Message, SyncDirection, TrafficLedger};
use crate::sparse::{densify, kept_count, residual_sparsify, topk_sparsify, ResidualBuffer, SparseCutTensor};
use crate::split::{split_at, CutActivation, CutGradient, SplitModel};
use crate::tensor::Tensor;

/// Training scheme under comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    Centralized,
    FedAvg,
    SplitNn,
    SplitSparse { fraction: f64, error_feedback: bool },
}

impl Scheme {
    pub fn is_split(&self) -> bool {
        matches!(self, Scheme::SplitNn | Scheme::SplitSparse { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Centralized => "centralized",
            Scheme::FedAvg => "fedavg",
            Scheme::SplitNn => "splitnn",
            Scheme::SplitSparse { .. } => "split-sparse",
        }
    }
}

/// Whether top-K selection ranks the whole cut tensor at once or each
/// sample's slice separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopkScope {
    Batch,
    Sample,
}

/// Seeded shuffled batch cursor; reshuffles at each epoch boundary and
/// always yields full batches.
#[derive(Debug, Clone)]
struct BatchCursor {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchCursor {
    fn new(n: usize, seed: u64) -> Self {
        let mut c = BatchCursor {
            order: (0..n).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        c.shuffle();
        c
    }

    fn shuffle(&mut self) {
        for i in (1..self.order.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            self.order.swap(i, j);
        }
        self.pos = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut rows = Vec::with_capacity(size);
        while rows.len() < size {
            if self.pos == self.order.len() {
                self.shuffle();
            }
            rows.push(self.order[self.pos]);
            self.pos += 1;
        }
        rows
    }
}

pub struct ClientState {
    pub client_id: u32,
    pub shard: SegmentDataset,
    /// Front parameters under split schemes, a full model copy under FedAvg
    /// and Centralized.
    pub params: ParameterSet<f32>,
    pub optimizer: OptimizerState<f32>,
    act_residual: Option<ResidualBuffer>,
    grad_residual: Option<ResidualBuffer>,
    cursor: BatchCursor,
}

pub struct ServerState {
    /// Shared tail parameters under split schemes, the global model under
    /// FedAvg.
    pub params: ParameterSet<f32>,
    pub optimizer: OptimizerState<f32>,
    pub round: u32,
}

#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub round: u32,
    pub mean_loss: f64,
    /// Mean test accuracy over clients; `None` on rounds without evaluation.
    pub pooled_accuracy: Option<f64>,
    pub client_accuracies: Vec<Option<f64>>,
    /// Byte deltas for this round only.
    pub bytes: TrafficLedger,
}

pub struct SimulationConfig {
    pub scheme: Scheme,
    pub devices: usize,
    pub batch_size: usize,
    pub cut_index: usize,
    pub seed: u64,
    pub learning_rate: f32,
    pub momentum: f32,
    pub topk_scope: TopkScope,
}

pub struct Simulation {
    scheme: Scheme,
    graph: ModelGraph,
    split: Option<SplitModel>,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    pub ledger: TrafficLedger,
    batch_size: usize,
    topk_scope: TopkScope,
    trainable_params: u64,
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag)
        .rotate_left(17)
}

impl Simulation {
    /// Builds client and server states. `shards` must have one entry per
    /// device (Centralized uses exactly one shard holding the pooled data).
    pub fn new(graph: ModelGraph, shards: Vec<SegmentDataset>, cfg: &SimulationConfig) -> Result<Self> {
        let devices = if cfg.scheme == Scheme::Centralized { 1 } else { cfg.devices };
        if shards.len() != devices {
            return Err(Error::InvalidArgument(format!(
                "{} shards for {devices} devices",
                shards.len()
            )));
        }
        if shards.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidArgument("empty client shard".to_string()));
        }
        if let Scheme::SplitSparse { fraction, .. } = cfg.scheme {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "sparsification fraction {fraction} outside (0, 1]"
                )));
            }
        }

        let full_params = graph.init_params::<f32>(cfg.seed);
        let split = if cfg.scheme.is_split() {
            Some(split_at(&graph, cfg.cut_index)?)
        } else {
            None
        };

        let (client_template, server_params) = if cfg.scheme.is_split() {
            let (front, tail) = full_params.split_at(cfg.cut_index);
            (front, tail)
        } else {
            (full_params.clone(), full_params)
        };

        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(i, shard)| {
                let params = client_template.clone();
                let optimizer = OptimizerState::new(&params, cfg.learning_rate, cfg.momentum)?;
                Ok(ClientState {
                    client_id: i as u32,
                    cursor: BatchCursor::new(shard.len(), derive_seed(cfg.seed, 100 + i as u64)),
                    shard,
                    params,
                    optimizer,
                    act_residual: None,
                    grad_residual: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let server_optimizer = OptimizerState::new(&server_params, cfg.learning_rate, cfg.momentum)?;
        Ok(Simulation {
            scheme: cfg.scheme,
            trainable_params: graph.param_count().trainable,
            graph,
            split,
            clients,
            server: ServerState {
                params: server_params,
                optimizer: server_optimizer,
                round: 0,
            },
            ledger: TrafficLedger::default(),
            batch_size: cfg.batch_size,
            topk_scope: cfg.topk_scope,
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    /// Runs one synchronous round over all clients in id order.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let before = self.ledger;
        let round = self.server.round;
        let mean_loss = match self.scheme {
            Scheme::Centralized => self.centralized_round()?,
            Scheme::FedAvg => self.fedavg_round(round)?,
            Scheme::SplitNn | Scheme::SplitSparse { .. } => self.split_round(round)?,
        };
        self.server.round += 1;
        Ok(RoundMetrics {
            round,
            mean_loss,
            pooled_accuracy: None,
            client_accuracies: vec![None; self.clients.len()],
            bytes: self.ledger.since(&before),
        })
    }

    fn centralized_round(&mut self) -> Result<f64> {
        let client = &mut self.clients[0];
        let rows = client.cursor.next_batch(self.batch_size);
        let (batch, labels) = client.shard.batch(&rows);
        let (tape, logits) = forward(&self.graph, &mut client.params, &batch, Mode::Train)?;
        let (loss, loss_grad) = softmax_cross_entropy(&logits, &labels)?;
        let (grads, _) = backward(&self.graph, &client.params, &tape, &loss_grad)?;
        sgd_step(&mut client.params, &grads, &mut client.optimizer)?;
        Ok(loss as f64)
    }

    fn fedavg_round(&mut self, round: u32) -> Result<f64> {
        let mut loss_sum = 0.0f64;
        let mut uploads: Vec<ParameterSet<f32>> = Vec::with_capacity(self.clients.len());
        let p = self.trainable_params;
        for client in &mut self.clients {
            // one local step (E = 1), then full-model sync up
            let rows = client.cursor.next_batch(self.batch_size);
            let (batch, labels) = client.shard.batch(&rows);
            let (tape, logits) = forward(&self.graph, &mut client.params, &batch, Mode::Train)?;
            let (loss, loss_grad) = softmax_cross_entropy(&logits, &labels)?;
            let (grads, _) = backward(&self.graph, &client.params, &tape, &loss_grad)?;
            sgd_step(&mut client.params, &grads, &mut client.optimizer)?;
            loss_sum += loss as f64;

            let msg = Message::ModelSync {
                direction: SyncDirection::Up,
                round,
                client_id: client.client_id,
                tensors: client.params.all_tensors().into_iter().cloned().collect(),
            };
            let bytes = encode(&msg)?;
            self.ledger.record_up(4 * p, bytes.len() as u64);
            match decode(&bytes)? {
                Message::ModelSync { tensors, .. } => {
                    let mut received = client.params.clone();
                    assign_tensors(&mut received, tensors)?;
                    uploads.push(received);
                }
                other => return Err(Error::InvalidArgument(format!("unexpected reply {other:?}"))),
            }
        }

        let weights: Vec<f64> = self.clients.iter().map(|c| c.shard.len() as f64).collect();
        let upload_refs: Vec<&ParameterSet<f32>> = uploads.iter().collect();
        self.server.params = fedavg_aggregate(&upload_refs, &weights)?;

        for client in &mut self.clients {
            let msg = Message::ModelSync {
                direction: SyncDirection::Down,
                round,
                client_id: client.client_id,
                tensors: self.server.params.all_tensors().into_iter().cloned().collect(),
            };
            let bytes = encode(&msg)?;
            self.ledger.record_down(4 * p, bytes.len() as u64);
            match decode(&bytes)? {
                Message::ModelSync { tensors, .. } => assign_tensors(&mut client.params, tensors)?,
                other => return Err(Error::InvalidArgument(format!("unexpected reply {other:?}"))),
            }
        }
        Ok(loss_sum / self.clients.len() as f64)
    }

    fn split_round(&mut self, round: u32) -> Result<f64> {
        let split = self.split.as_ref().expect("split scheme has a split model");
        let sparse = match self.scheme {
            Scheme::SplitSparse { fraction, error_feedback } => Some((fraction, error_feedback)),
            _ => None,
        };
        let mut loss_sum = 0.0f64;
        let mut tail_grads = None;
        for client in &mut self.clients {
            let rows = client.cursor.next_batch(self.batch_size);
            let (batch, labels) = client.shard.batch(&rows);
            let (tape, act) =
                split.client_forward(&mut client.params, &batch, round, client.client_id)?;

            // activation upload
            let act_for_server = match sparse {
                Some((fraction, ef)) => {
                    let residual = ef.then(|| {
                        client
                            .act_residual
                            .get_or_insert_with(|| ResidualBuffer::zeros(act.tensor.shape().to_vec()))
                    });
                    let s = sparsify_scoped(&act.tensor, fraction, self.topk_scope, residual)?;
                    let values = 4 * s.values.len() as u64;
                    let msg = Message::ForwardActivation {
                        round,
                        client_id: client.client_id,
                        tensor: s,
                    };
                    let bytes = encode(&msg)?;
                    self.ledger.record_up(values, bytes.len() as u64);
                    match decode(&bytes)? {
                        Message::ForwardActivation { tensor, round, client_id } => CutActivation {
                            tensor: densify(&tensor)?,
                            round,
                            client_id,
                        },
                        other => {
                            return Err(Error::InvalidArgument(format!("unexpected reply {other:?}")))
                        }
                    }
                }
                None => {
                    let values = 4 * act.tensor.numel() as u64;
                    let msg = Message::DenseActivation {
                        round,
                        client_id: client.client_id,
                        tensor: act.tensor.clone(),
                    };
                    let bytes = encode(&msg)?;
                    self.ledger.record_up(values, bytes.len() as u64);
                    match decode(&bytes)? {
                        Message::DenseActivation { tensor, round, client_id } => CutActivation {
                            tensor,
                            round,
                            client_id,
                        },
                        other => {
                            return Err(Error::InvalidArgument(format!("unexpected reply {other:?}")))
                        }
                    }
                }
            };

            let (loss, server_grads, cut_grad) =
                split.server_step(&mut self.server.params, &act_for_server, &labels)?;
            loss_sum += loss as f64;
            match &mut tail_grads {
                None => tail_grads = Some(server_grads),
                Some(acc) => acc.add_assign(&server_grads)?,
            }

            // gradient download
            let grad_for_client = match sparse {
                Some((fraction, ef)) => {
                    let residual = ef.then(|| {
                        client
                            .grad_residual
                            .get_or_insert_with(|| {
                                ResidualBuffer::zeros(cut_grad.tensor.shape().to_vec())
                            })
                    });
                    let s = sparsify_scoped(&cut_grad.tensor, fraction, self.topk_scope, residual)?;
                    let values = 4 * s.values.len() as u64;
                    let msg = Message::ActivationGradient {
                        round,
                        client_id: client.client_id,
                        tensor: s,
                    };
                    let bytes = encode(&msg)?;
                    self.ledger.record_down(values, bytes.len() as u64);
                    match decode(&bytes)? {
                        Message::ActivationGradient { tensor, round, client_id } => CutGradient {
                            tensor: densify(&tensor)?,
                            round,
                            client_id,
                        },
                        other => {
                            return Err(Error::InvalidArgument(format!("unexpected reply {other:?}")))
                        }
                    }
                }
                None => {
                    let values = 4 * cut_grad.tensor.numel() as u64;
                    let msg = Message::DenseGradient {
                        round,
                        client_id: client.client_id,
                        tensor: cut_grad.tensor.clone(),
                    };
                    let bytes = encode(&msg)?;
                    self.ledger.record_down(values, bytes.len() as u64);
                    match decode(&bytes)? {
                        Message::DenseGradient { tensor, round, client_id } => CutGradient {
                            tensor,
                            round,
                            client_id,
                        },
                        other => {
                            return Err(Error::InvalidArgument(format!("unexpected reply {other:?}")))
                        }
                    }
                }
            };

            let client_grads = split.client_backward(&client.params, &tape, &grad_for_client)?;
            sgd_step(&mut client.params, &client_grads, &mut client.optimizer)?;
        }

        // one shared tail update with the mean gradient over clients
        let mut mean = tail_grads.expect("at least one client");
        mean.scale(1.0 / self.clients.len() as f32);
        sgd_step(&mut self.server.params, &mean, &mut self.server.optimizer)?;
        Ok(loss_sum / self.clients.len() as f64)
    }

    /// Test accuracy per client plus the pooled mean. Split schemes compose
    /// each client front with the shared tail; FedAvg and Centralized
    /// evaluate the single global model.
    pub fn evaluate(&mut self, test: &SegmentDataset) -> Result<(f64, Vec<f64>)> {
        if test.is_empty() {
            return Err(Error::InvalidArgument("empty test set".to_string()));
        }
        match self.scheme {
            Scheme::Centralized | Scheme::FedAvg => {
                let params = match self.scheme {
                    Scheme::Centralized => &mut self.clients[0].params,
                    _ => &mut self.server.params,
                };
                let acc = eval_full(&self.graph, params, test)?;
                Ok((acc, vec![acc; self.clients.len()]))
            }
            _ => {
                let split = self.split.as_ref().expect("split scheme");
                // evaluation crosses the same compressed channel the deployed
                // split would: split-sparse keeps top-K at the cut here too
                let eval_fraction = match self.scheme {
                    Scheme::SplitSparse { fraction, .. } => Some(fraction),
                    _ => None,
                };
                let scope = self.topk_scope;
                let mut accs = Vec::with_capacity(self.clients.len());
                for client in &mut self.clients {
                    accs.push(eval_split(
                        split,
                        &mut client.params,
                        &mut self.server.params,
                        test,
                        eval_fraction,
                        scope,
                    )?);
                }
                let pooled = accs.iter().sum::<f64>() / accs.len() as f64;
                Ok((pooled, accs))
            }
        }
    }
}

const EVAL_CHUNK: usize = 256;

fn eval_full(graph: &ModelGraph, params: &mut ParameterSet<f32>, test: &SegmentDataset) -> Result<f64> {
    let mut correct_weighted = 0.0f64;
    let rows: Vec<usize> = (0..test.len()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let (batch, labels) = test.batch(chunk);
        let (_, logits) = forward(graph, params, &batch, Mode::Eval)?;
        correct_weighted += accuracy(&logits, &labels) * chunk.len() as f64;
    }
    Ok(correct_weighted / test.len() as f64)
}

fn eval_split(
    split: &SplitModel,
    front: &mut ParameterSet<f32>,
    tail: &mut ParameterSet<f32>,
    test: &SegmentDataset,
    fraction: Option<f64>,
    scope: TopkScope,
) -> Result<f64> {
    let mut correct_weighted = 0.0f64;
    let rows: Vec<usize> = (0..test.len()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let (batch, labels) = test.batch(chunk);
        let logits = match fraction {
            None => split.forward_eval(front, tail, &batch)?,
            Some(fraction) => {
                let (_, cut) = forward(&split.client_graph, front, &batch, Mode::Eval)?;
                let sparse = sparsify_scoped(&cut, fraction, scope, None)?;
                let (_, out) = forward(&split.server_graph, tail, &densify(&sparse)?, Mode::Eval)?;
                out
            }
        };
        correct_weighted += accuracy(&logits, &labels) * chunk.len() as f64;
    }
    Ok(correct_weighted / test.len() as f64)
}

/// Top-K selection over the whole tensor or per sample slice (first axis).
fn sparsify_scoped(
    t: &Tensor,
    fraction: f64,
    scope: TopkScope,
    residual: Option<&mut ResidualBuffer>,
) -> Result<SparseCutTensor> {
    match scope {
        TopkScope::Batch => match residual {
            Some(buf) => residual_sparsify(t, buf, fraction),
            None => topk_sparsify(t, fraction),
        },
        TopkScope::Sample => {
            let carried = match residual {
                Some(ref buf) => {
                    let mut c = t.clone();
                    c.add_assign(buf.tensor())?;
                    c
                }
                None => t.clone(),
            };
            let samples = carried.shape()[0];
            let per_sample: usize = carried.shape()[1..].iter().product();
            let k = kept_count(per_sample, fraction);
            let mut indices = Vec::with_capacity(samples * k);
            let mut values = Vec::with_capacity(samples * k);
            for s in 0..samples {
                let slice = &carried.data()[s * per_sample..(s + 1) * per_sample];
                let sub = topk_sparsify(
                    &Tensor::new(vec![per_sample], slice.to_vec())?,
                    fraction,
                )?;
                for (&i, &v) in sub.indices.iter().zip(&sub.values) {
                    indices.push((s * per_sample) as u32 + i);
                    values.push(v);
                }
            }
            let out = SparseCutTensor {
                shape: carried.shape().to_vec(),
                indices,
                values,
            };
            if let Some(buf) = residual {
                let mut rest = carried;
                for (&i, &v) in out.indices.iter().zip(&out.values) {
                    rest.data_mut()[i as usize] -= v;
                }
                *buf = ResidualBuffer::from_tensor(rest);
            }
            Ok(out)
        }
    }
}

/// Shard-size-weighted elementwise mean of parameter sets (batch-norm
/// running statistics included).
pub fn fedavg_aggregate(sets: &[&ParameterSet<f32>], weights: &[f64]) -> Result<ParameterSet<f32>> {
    if sets.is_empty() || sets.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameter sets with {} weights",
            sets.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| w <= 0.0) {
        return Err(Error::InvalidArgument("weights must be positive".to_string()));
    }
    let total: f64 = weights.iter().sum();
    let mut out = sets[0].clone();
    {
        let mut acc = out.all_tensors_mut();
        for t in acc.iter_mut() {
            t.scale_in_place((weights[0] / total) as f32);
        }
        for (set, &w) in sets.iter().zip(weights).skip(1) {
            let src = set.all_tensors();
            if src.len() != acc.len() {
                return Err(Error::ShapeMismatch("parameter set layouts differ".to_string()));
            }
            let scale = (w / total) as f32;
            for (dst, s) in acc.iter_mut().zip(src) {
                if dst.shape() != s.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "aggregate shapes {:?} vs {:?}",
                        dst.shape(),
                        s.shape()
                    )));
                }
                for (d, &v) in dst.data_mut().iter_mut().zip(s.data()) {
                    *d += scale * v;
                }
            }
        }
    }
    Ok(out)
}

fn assign_tensors(params: &mut ParameterSet<f32>, tensors: Vec<Tensor>) -> Result<()> {
    let mut dst = params.all_tensors_mut();
    if dst.len() != tensors.len() {
        return Err(Error::ShapeMismatch(format!(
            "model sync carries {} tensors, model has {}",
            tensors.len(),
            dst.len()
        )));
    }
    for (d, s) in dst.iter_mut().zip(tensors) {
        if d.shape() != s.shape() {
            return Err(Error::ShapeMismatch(format!(
                "model sync tensor {:?} vs expected {:?}",
                s.shape(),
                d.shape()
            )));
        }
        **d = s;
    }
    Ok(())
}

/// Result of a full experiment run: per-round metrics plus the final
/// evaluation.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub rounds: Vec<RoundMetrics>,
    pub final_accuracy: f64,
    pub final_client_accuracies: Vec<f64>,
    pub ledger: TrafficLedger,
}

/// Runs a configured experiment end to end and writes `metrics.csv` and a
/// provenance copy of the effective configuration into the output directory.
pub fn run_experiment(cfg: &crate::config::ExperimentConfig) -> Result<ExperimentOutcome> {
    use crate::config::DataSource;

    cfg.validate()?;
    let graph = cfg.arch_spec()?.to_graph()?;
    let scheme = cfg.scheme();
    let seed = cfg.experiment.seed;

    let (train, test) = match cfg.data.source {
        DataSource::Synthetic => (
            crate::data::synth_generate(cfg.data.train_size, derive_seed(seed, 1), cfg.data.positive_rate)?,
            crate::data::synth_generate(cfg.data.test_size, derive_seed(seed, 2), cfg.data.positive_rate)?,
        ),
        DataSource::Csv => (
            crate::data::load_segments(cfg.data.train_path.as_ref().expect("validated"))?,
            crate::data::load_segments(cfg.data.test_path.as_ref().expect("validated"))?,
        ),
    };

    let shards = if scheme == Scheme::Centralized {
        vec![train]
    } else {
        crate::data::partition_shards(
            &train,
            &crate::data::ShardSpec {
                strategy: cfg.experiment.shard_strategy.into(),
                shards: cfg.experiment.devices,
                seed: derive_seed(seed, 3),
            },
        )?
    };

    let mut sim = Simulation::new(
        graph,
        shards,
        &SimulationConfig {
            scheme,
            devices: cfg.experiment.devices,
            batch_size: cfg.experiment.batch_size,
            cut_index: cfg.experiment.cut_index,
            seed,
            learning_rate: cfg.optimizer.learning_rate,
            momentum: cfg.optimizer.momentum,
            topk_scope: cfg.experiment.topk_scope.into(),
        },
    )?;

    let out_dir = std::path::Path::new(&cfg.experiment.out_dir);
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml_string())?;

    let rounds = cfg.experiment.rounds;
    let eval_every = cfg.experiment.eval_every;
    let mut history = Vec::with_capacity(rounds as usize);
    for r in 0..rounds {
        let mut metrics = sim.run_round()?;
        if (r + 1) % eval_every == 0 || r + 1 == rounds {
            let (pooled, per_client) = sim.evaluate(&test)?;
            metrics.pooled_accuracy = Some(pooled);
            metrics.client_accuracies = per_client.into_iter().map(Some).collect();
            log::info!(
                "round {:>4}  loss {:.4}  accuracy {:.4}",
                metrics.round,
                metrics.mean_loss,
                pooled
            );
        }
        history.push(metrics);
    }

    write_metrics_csv(&out_dir.join("metrics.csv"), &history, sim.clients.len())?;

    let (final_accuracy, final_client_accuracies) = sim.evaluate(&test)?;
    Ok(ExperimentOutcome {
        rounds: history,
        final_accuracy,
        final_client_accuracies,
        ledger: sim.ledger,
    })
}

fn write_metrics_csv(path: &std::path::Path, history: &[RoundMetrics], clients: usize) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "round,mean_loss,pooled_accuracy")?;
    for c in 0..clients {
        write!(out, ",client_{c}_accuracy")?;
    }
    writeln!(out, ",bytes_values_only,bytes_on_wire")?;
    let fmt = |a: Option<f64>| a.map(|a| a.to_string()).unwrap_or_default();
    for m in history {
        write!(out, "{},{},{}", m.round, m.mean_loss, fmt(m.pooled_accuracy))?;
        for c in 0..clients {
            write!(out, ",{}", fmt(m.client_accuracies.get(c).copied().flatten()))?;
        }
        writeln!(out, ",{},{}", m.bytes.total_values(), m.bytes.total_wire())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchSpec;
    use crate::data::{partition_shards, synth_generate, ShardSpec, ShardStrategy};
    use crate::nn::model::LayerParams;

    fn desk_sim(scheme: Scheme, devices: usize, seed: u64) -> Simulation {
        let graph = ArchSpec::desk_small().to_graph().unwrap();
        let data = synth_generate(devices.max(1) * 64, derive_seed(seed, 7), 0.5).unwrap();
        let shards = if scheme == Scheme::Centralized {
            vec![data]
        } else {
            partition_shards(
                &data,
                &ShardSpec {
                    strategy: ShardStrategy::Iid,
                    shards: devices,
                    seed: derive_seed(seed, 8),
                },
            )
            .unwrap()
        };
        Simulation::new(
            graph,
            shards,
            &SimulationConfig {
                scheme,
                devices,
                batch_size: 8,
                cut_index: 1,
                seed,
                learning_rate: 0.01,
                momentum: 0.9,
                topk_scope: TopkScope::Batch,
            },
        )
        .unwrap()
    }

    fn params_close(a: &ParameterSet<f32>, b: &ParameterSet<f32>, tol: f64) -> bool {
        a.all_tensors()
            .iter()
            .zip(b.all_tensors())
            .all(|(x, y)| crate::tensor::max_rel_diff(x, y) < tol)
    }

    #[test]
    fn fedavg_aggregate_examples() {
        let graph = ModelGraph::new(
            vec![crate::nn::model::LayerSpec::Dense { inputs: 2, outputs: 1 }],
            vec![2],
        )
        .unwrap();
        let mut a = graph.init_params::<f32>(0);
        let mut b = graph.init_params::<f32>(0);
        a.trainable_mut()[0].data_mut().copy_from_slice(&[1.0, 3.0]);
        b.trainable_mut()[0].data_mut().copy_from_slice(&[3.0, 5.0]);

        let avg = fedavg_aggregate(&[&a, &b], &[1.0, 1.0]).unwrap();
        assert_eq!(avg.trainable()[0].1.data(), &[2.0, 4.0]);

        a.trainable_mut()[0].data_mut().copy_from_slice(&[0.0, 0.0]);
        b.trainable_mut()[0].data_mut().copy_from_slice(&[4.0, 4.0]);
        let weighted = fedavg_aggregate(&[&a, &b], &[1.0, 3.0]).unwrap();
        assert_eq!(weighted.trainable()[0].1.data(), &[3.0, 3.0]);

        let single = fedavg_aggregate(&[&a], &[5.0]).unwrap();
        assert_eq!(single, a);
    }

    #[test]
    fn fedavg_aggregate_is_permutation_invariant() {
        let graph = ArchSpec::desk_small().to_graph().unwrap();
        let sets: Vec<ParameterSet<f32>> = (0..3).map(|i| graph.init_params(i)).collect();
        let refs: Vec<&ParameterSet<f32>> = sets.iter().collect();
        let a = fedavg_aggregate(&refs, &[1.0, 2.0, 3.0]).unwrap();
        let perm = [&sets[2], &sets[0], &sets[1]];
        let b = fedavg_aggregate(&perm, &[3.0, 1.0, 2.0]).unwrap();
        assert!(params_close(&a, &b, 1e-6));
    }

    #[test]
    fn split_sparse_full_fraction_single_client_matches_centralized() {
        let mut central = desk_sim(Scheme::Centralized, 1, 42);
        let mut split = desk_sim(
            Scheme::SplitSparse { fraction: 1.0, error_feedback: false },
            1,
            42,
        );
        for step in 0..20 {
            central.run_round().unwrap();
            split.run_round().unwrap();
            let central_params = central.clients[0].params.clone();
            let (front, tail) = central_params.split_at(1);
            assert!(
                params_close(&split.clients[0].params, &front, 1e-6),
                "front diverged at step {step}"
            );
            assert!(
                params_close(&split.server.params, &tail, 1e-6),
                "tail diverged at step {step}"
            );
        }
    }

    #[test]
    fn fedavg_identical_shards_equal_single_client_model() {
        let graph = ArchSpec::desk_small().to_graph().unwrap();
        let data = synth_generate(64, 3, 0.5).unwrap();
        let mk = |devices: usize| {
            Simulation::new(
                graph.clone(),
                vec![data.clone(); devices],
                &SimulationConfig {
                    scheme: Scheme::FedAvg,
                    devices,
                    batch_size: 8,
                    cut_index: 1,
                    seed: 5,
                    learning_rate: 0.01,
                    momentum: 0.9,
                    topk_scope: TopkScope::Batch,
                },
            )
            .unwrap()
        };
        let mut multi = mk(3);
        let mut single = mk(1);
        // same cursor seed per client id: force identical batch orders by
        // reusing client 0's cursor on every client
        for c in &mut multi.clients {
            c.cursor = single.clients[0].cursor.clone();
        }
        for _ in 0..3 {
            multi.run_round().unwrap();
            single.run_round().unwrap();
        }
        assert!(params_close(&multi.server.params, &single.server.params, 1e-6));
    }

    #[test]
    fn round_metrics_bytes_match_analytic_prediction() {
        use crate::protocol::{traffic_bytes, AccountingMode};
        for scheme in [
            Scheme::Centralized,
            Scheme::FedAvg,
            Scheme::SplitNn,
            Scheme::SplitSparse { fraction: 0.1, error_feedback: false },
            Scheme::SplitSparse { fraction: 0.1, error_feedback: true },
        ] {
            let devices = if scheme == Scheme::Centralized { 1 } else { 4 };
            let mut sim = desk_sim(scheme, devices, 9);
            for _ in 0..3 {
                let m = sim.run_round().unwrap();
                for mode in [AccountingMode::ValuesOnly, AccountingMode::OnWire] {
                    let expect = traffic_bytes(&scheme, sim.graph(), 1, devices as u64, 8, mode).unwrap();
                    let got = match mode {
                        AccountingMode::ValuesOnly => m.bytes.total_values(),
                        AccountingMode::OnWire => m.bytes.total_wire(),
                    };
                    assert_eq!(got, expect, "{scheme:?} {mode:?}");
                }
            }
        }
    }

    #[test]
    fn zero_round_experiment_yields_empty_series() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = crate::config::ExperimentConfig::from_str_with_overrides(
            "[experiment]\nscheme = \"centralized\"\nrounds = 0\n",
            &[
                "data.train_size=64".to_string(),
                "data.test_size=32".to_string(),
                format!("experiment.out_dir=\"{}\"", dir.path().display()),
            ],
        )
        .unwrap();
        let out = run_experiment(&cfg).unwrap();
        assert!(out.rounds.is_empty());
        assert!((0.0..=1.0).contains(&out.final_accuracy));
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1, "header only: {csv}");
    }

    #[test]
    fn split_training_reduces_loss() {
        let mut sim = desk_sim(Scheme::SplitSparse { fraction: 0.1, error_feedback: false }, 2, 1);
        let first = sim.run_round().unwrap().mean_loss;
        let mut last = first;
        for _ in 0..60 {
            last = sim.run_round().unwrap().mean_loss;
        }
        assert!(last < first, "loss {first} -> {last}");
    }

    #[test]
    fn evaluate_majority_predictor_scores_half() {
        let mut sim = desk_sim(Scheme::Centralized, 1, 2);
        // bias the classifier head so it always predicts class 0
        if let LayerParams::Dense { weight, bias } = &mut sim.clients[0].params.layers[17] {
            for v in weight.data_mut() {
                *v = 0.0;
            }
            bias.data_mut().copy_from_slice(&[1.0, 0.0]);
        } else {
            panic!("layer 17 should be the dense head");
        }
        let test = synth_generate(200, 11, 0.5).unwrap();
        let (pooled, _) = sim.evaluate(&test).unwrap();
        assert!((pooled - 0.5).abs() <= 0.01, "pooled {pooled}");
    }

    #[test]
    fn no_raw_segment_bytes_cross_the_wire_in_split_schemes() {
        // capture every frame of a split-sparse round and check that no raw
        // training segment's byte pattern appears in any payload
        let mut sim = desk_sim(Scheme::SplitSparse { fraction: 0.5, error_feedback: false }, 2, 4);
        let raw: Vec<Vec<u8>> = (0..sim.clients[0].shard.len())
            .map(|i| {
                sim.clients[0].shard.segment(i)
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect()
            })
            .collect();
        // run one round; frames are produced and consumed inside, so encode
        // the equivalent upload explicitly for the check
        let rows: Vec<usize> = (0..8).collect();
        let (batch, _) = sim.clients[0].shard.batch(&rows);
        let split = split_at(sim.graph(), 1).unwrap();
        let (_, act) = split
            .client_forward(&mut sim.clients[0].params.clone(), &batch, 0, 0)
            .unwrap();
        let sparse = topk_sparsify(&act.tensor, 0.5).unwrap();
        let frame = encode(&Message::ForwardActivation { round: 0, client_id: 0, tensor: sparse }).unwrap();
        for seg in &raw {
            assert!(
                !contains_subslice(&frame, &seg[..64.min(seg.len())]),
                "raw segment bytes leaked into an activation frame"
            );
        }
        sim.run_round().unwrap();
    }

    fn contains_subslice(haystack: &[u8], needle: &[u8]) -> bool {
        haystack.windows(needle.len()).any(|w| w == needle)
    }
}
