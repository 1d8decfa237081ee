//! Bit-exact binary framing for all client<->server traffic, plus the
//! per-iteration traffic calculator.
//!
//! Frame layout (all integers little-endian, unsigned):
//!
//! ```text
//! magic 0x53 0x46 | version u8 (=1) | msg_type u8 | payload_len u32 | payload
//! ```
//!
//! Sparse tensor payload: `rank u8 | dims u32* | count u32 | indices u32* | values f32*`.
//! Dense tensor payload:  `rank u8 | dims u32* | values f32*`.
//! Tensor-carrying messages prefix `round u32 | client_id u32`.

use crate::error::{DecodeError, Error, Result};
use crate::federation::Scheme;
use crate::nn::model::{LayerSpec, ModelGraph};
use crate::sparse::{kept_count, SparseCutTensor};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 2] = [0x53, 0x46];
pub const VERSION: u8 = 1;
pub const FRAME_HEADER_LEN: u64 = 8;
pub const MAX_RANK: usize = 8;

const TYPE_FORWARD_ACTIVATION: u8 = 1;
const TYPE_ACTIVATION_GRADIENT: u8 = 2;
const TYPE_DENSE_ACTIVATION: u8 = 3;
const TYPE_DENSE_GRADIENT: u8 = 4;
const TYPE_MODEL_SYNC: u8 = 5;
const TYPE_CONTROL: u8 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncDirection {
    Up,
    Down,
}

/// Typed wire messages.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Sparsified cut activation, client -> server.
    ForwardActivation {
        round: u32,
        client_id: u32,
        tensor: SparseCutTensor,
    },
    /// Sparsified cut gradient, server -> client.
    ActivationGradient {
        round: u32,
        client_id: u32,
        tensor: SparseCutTensor,
    },
    /// Dense cut activation (SplitNN baseline).
    DenseActivation {
        round: u32,
        client_id: u32,
        tensor: Tensor,
    },
    /// Dense cut gradient (SplitNN baseline).
    DenseGradient {
        round: u32,
        client_id: u32,
        tensor: Tensor,
    },
    /// Full-model parameter sync (FedAvg baseline). The blob is the ordered
    /// tensor inventory of a parameter set, running statistics included.
    ModelSync {
        direction: SyncDirection,
        round: u32,
        client_id: u32,
        tensors: Vec<Tensor>,
    },
    Control {
        code: u8,
    },
}

impl Message {
    fn msg_type(&self) -> u8 {
        match self {
            Message::ForwardActivation { .. } => TYPE_FORWARD_ACTIVATION,
            Message::ActivationGradient { .. } => TYPE_ACTIVATION_GRADIENT,
            Message::DenseActivation { .. } => TYPE_DENSE_ACTIVATION,
            Message::DenseGradient { .. } => TYPE_DENSE_GRADIENT,
            Message::ModelSync { .. } => TYPE_MODEL_SYNC,
            Message::Control { .. } => TYPE_CONTROL,
        }
    }
}

fn check_rank(rank: usize) -> Result<()> {
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::InvalidArgument(format!(
            "tensor rank {rank} outside [1, {MAX_RANK}]"
        )));
    }
    Ok(())
}

fn put_sparse(out: &mut Vec<u8>, t: &SparseCutTensor) -> Result<()> {
    t.validate()?;
    check_rank(t.shape.len())?;
    out.push(t.shape.len() as u8);
    for &d in &t.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(t.indices.len() as u32).to_le_bytes());
    for &i in &t.indices {
        out.extend_from_slice(&i.to_le_bytes());
    }
    for &v in &t.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn put_dense(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    check_rank(t.shape().len())?;
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Encodes a message into one complete frame.
pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    match msg {
        Message::ForwardActivation {
            round,
            client_id,
            tensor,
        }
        | Message::ActivationGradient {
            round,
            client_id,
            tensor,
        } => {
            payload.extend_from_slice(&round.to_le_bytes());
            payload.extend_from_slice(&client_id.to_le_bytes());
            put_sparse(&mut payload, tensor)?;
        }
        Message::DenseActivation {
            round,
            client_id,
            tensor,
        }
        | Message::DenseGradient {
            round,
            client_id,
            tensor,
        } => {
            payload.extend_from_slice(&round.to_le_bytes());
            payload.extend_from_slice(&client_id.to_le_bytes());
            put_dense(&mut payload, tensor)?;
        }
        Message::ModelSync {
            direction,
            round,
            client_id,
            tensors,
        } => {
            payload.extend_from_slice(&round.to_le_bytes());
            payload.extend_from_slice(&client_id.to_le_bytes());
            payload.push(match direction {
                SyncDirection::Up => 0,
                SyncDirection::Down => 1,
            });
            payload.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
            for t in tensors {
                put_dense(&mut payload, t)?;
            }
        }
        Message::Control { code } => payload.push(*code),
    }

    let mut frame = Vec::with_capacity(FRAME_HEADER_LEN as usize + payload.len());
    frame.extend_from_slice(&MAGIC);
    frame.push(VERSION);
    frame.push(msg.msg_type());
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], DecodeError> {
        if self.bytes.len() - self.pos < n {
            return Err(DecodeError::Truncated(format!(
                "need {n} bytes for {what}, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, DecodeError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, DecodeError> {
        let s = self.take(4, what)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn f32(&mut self, what: &str) -> std::result::Result<f32, DecodeError> {
        let s = self.take(4, what)?;
        Ok(f32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn get_shape(r: &mut Reader) -> std::result::Result<Vec<usize>, DecodeError> {
    let rank = r.u8("rank")? as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(DecodeError::Malformed(format!(
            "rank {rank} outside [1, {MAX_RANK}]"
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let d = r.u32("dimension")? as u64;
        if d == 0 {
            return Err(DecodeError::Malformed("zero-sized dimension".to_string()));
        }
        numel = numel.saturating_mul(d);
        shape.push(d as usize);
    }
    if numel > u32::MAX as u64 {
        return Err(DecodeError::Malformed(format!("tensor too large: {numel}")));
    }
    Ok(shape)
}

fn get_sparse(r: &mut Reader) -> std::result::Result<SparseCutTensor, DecodeError> {
    let shape = get_shape(r)?;
    let numel: u64 = shape.iter().map(|&d| d as u64).product();
    let count = r.u32("entry count")? as usize;
    if count as u64 > numel {
        return Err(DecodeError::Malformed(format!(
            "{count} entries for {numel} elements"
        )));
    }
    if r.remaining() < 8 * count {
        return Err(DecodeError::Truncated(format!(
            "need {} bytes for {count} sparse entries, {} left",
            8 * count,
            r.remaining()
        )));
    }
    let mut indices = Vec::with_capacity(count);
    let mut prev: Option<u32> = None;
    for _ in 0..count {
        let i = r.u32("index")?;
        if i as u64 >= numel {
            return Err(DecodeError::IndexOutOfBounds(format!(
                "index {i} for {numel} elements"
            )));
        }
        if let Some(p) = prev {
            if i <= p {
                return Err(DecodeError::Malformed(
                    "indices not strictly increasing".to_string(),
                ));
            }
        }
        prev = Some(i);
        indices.push(i);
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(r.f32("value")?);
    }
    Ok(SparseCutTensor {
        shape,
        indices,
        values,
    })
}

fn get_dense(r: &mut Reader) -> std::result::Result<Tensor, DecodeError> {
    let shape = get_shape(r)?;
    let numel: usize = shape.iter().product();
    if r.remaining() < 4 * numel {
        return Err(DecodeError::Truncated(format!(
            "need {} bytes for {numel} values, {} left",
            4 * numel,
            r.remaining()
        )));
    }
    let mut values = Vec::with_capacity(numel);
    for _ in 0..numel {
        values.push(r.f32("value")?);
    }
    Ok(Tensor::new(shape, values).expect("shape/value count consistent"))
}

/// Decodes exactly one frame. Never panics on arbitrary input.
pub fn decode(bytes: &[u8]) -> std::result::Result<Message, DecodeError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(2, "magic")?;
    if magic != MAGIC {
        return Err(DecodeError::BadMagic);
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    let msg_type = r.u8("message type")?;
    let payload_len = r.u32("payload length")? as usize;
    if r.remaining() != payload_len {
        return Err(DecodeError::Truncated(format!(
            "payload length {payload_len} but {} bytes follow the header",
            r.remaining()
        )));
    }

    let msg = match msg_type {
        TYPE_FORWARD_ACTIVATION | TYPE_ACTIVATION_GRADIENT => {
            let round = r.u32("round")?;
            let client_id = r.u32("client id")?;
            let tensor = get_sparse(&mut r)?;
            if msg_type == TYPE_FORWARD_ACTIVATION {
                Message::ForwardActivation {
                    round,
                    client_id,
                    tensor,
                }
            } else {
                Message::ActivationGradient {
                    round,
                    client_id,
                    tensor,
                }
            }
        }
        TYPE_DENSE_ACTIVATION | TYPE_DENSE_GRADIENT => {
            let round = r.u32("round")?;
            let client_id = r.u32("client id")?;
            let tensor = get_dense(&mut r)?;
            if msg_type == TYPE_DENSE_ACTIVATION {
                Message::DenseActivation {
                    round,
                    client_id,
                    tensor,
                }
            } else {
                Message::DenseGradient {
                    round,
                    client_id,
                    tensor,
                }
            }
        }
        TYPE_MODEL_SYNC => {
            let round = r.u32("round")?;
            let client_id = r.u32("client id")?;
            let direction = match r.u8("direction")? {
                0 => SyncDirection::Up,
                1 => SyncDirection::Down,
                other => {
                    return Err(DecodeError::Malformed(format!(
                        "unknown sync direction {other}"
                    )))
                }
            };
            let n = r.u32("tensor count")? as usize;
            let mut tensors = Vec::new();
            for _ in 0..n {
                tensors.push(get_dense(&mut r)?);
            }
            Message::ModelSync {
                direction,
                round,
                client_id,
                tensors,
            }
        }
        TYPE_CONTROL => Message::Control {
            code: r.u8("control code")?,
        },
        other => return Err(DecodeError::UnknownMsgType(other)),
    };
    if r.remaining() != 0 {
        return Err(DecodeError::Malformed(format!(
            "{} unread payload bytes",
            r.remaining()
        )));
    }
    Ok(msg)
}

// ---------------------------------------------------------------------------
// Analytic frame sizes
// ---------------------------------------------------------------------------

pub fn sparse_tensor_encoded_len(rank: usize, count: u64) -> u64 {
    1 + 4 * rank as u64 + 4 + 8 * count
}

pub fn dense_tensor_encoded_len(rank: usize, numel: u64) -> u64 {
    1 + 4 * rank as u64 + 4 * numel
}

/// Full frame length of a sparse activation/gradient message.
pub fn sparse_frame_len(rank: usize, count: u64) -> u64 {
    FRAME_HEADER_LEN + 8 + sparse_tensor_encoded_len(rank, count)
}

/// Full frame length of a dense activation/gradient message.
pub fn dense_frame_len(rank: usize, numel: u64) -> u64 {
    FRAME_HEADER_LEN + 8 + dense_tensor_encoded_len(rank, numel)
}

/// Full frame length of a model-sync message carrying the given tensors
/// (described by rank and element count).
pub fn model_sync_frame_len(tensors: impl IntoIterator<Item = (usize, u64)>) -> u64 {
    FRAME_HEADER_LEN
        + 8
        + 1
        + 4
        + tensors
            .into_iter()
            .map(|(rank, numel)| dense_tensor_encoded_len(rank, numel))
            .sum::<u64>()
}

/// The (rank, numel) inventory of a parameter set for the given graph,
/// running statistics included; matches `ParameterSet::all_tensors` order.
pub fn param_tensor_inventory(model: &ModelGraph) -> Vec<(usize, u64)> {
    let mut out = Vec::new();
    for layer in model.layers() {
        match layer {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                out.push((3, (out_channels * in_channels * kernel) as u64));
                out.push((1, *out_channels as u64));
            }
            LayerSpec::BatchNorm1d { channels, .. } => {
                for _ in 0..4 {
                    out.push((1, *channels as u64));
                }
            }
            LayerSpec::Dense { inputs, outputs } => {
                out.push((2, (inputs * outputs) as u64));
                out.push((1, *outputs as u64));
            }
            _ => {}
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Traffic accounting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccountingMode {
    /// Count 4-byte payload values only (the published convention).
    ValuesOnly,
    /// Count indices, message headers, and framing too.
    OnWire,
}

/// Bytes per training iteration for a scheme, all `devices` participating,
/// both directions.
pub fn traffic_bytes(
    scheme: &Scheme,
    model: &ModelGraph,
    cut_index: usize,
    devices: u64,
    batch_size: usize,
    mode: AccountingMode,
) -> Result<u64> {
    if devices == 0 {
        return Ok(0);
    }
    let per_device: u64 = match scheme {
        Scheme::Centralized => 0,
        Scheme::FedAvg => {
            let p = model.param_count().trainable;
            match mode {
                AccountingMode::ValuesOnly => 2 * 4 * p,
                AccountingMode::OnWire => {
                    2 * model_sync_frame_len(param_tensor_inventory(model))
                }
            }
        }
        Scheme::SplitNn | Scheme::SplitSparse { .. } => {
            let shapes = model.infer_shapes()?;
            if cut_index == 0 || cut_index > shapes.len() {
                return Err(Error::InvalidArgument(format!(
                    "cut index {cut_index} out of range"
                )));
            }
            let per_sample = shapes[cut_index - 1].numel() as u64;
            let numel = batch_size as u64 * per_sample;
            let rank = shapes[cut_index - 1].dims().len() + 1;
            match scheme {
                Scheme::SplitNn => match mode {
                    AccountingMode::ValuesOnly => 2 * 4 * numel,
                    AccountingMode::OnWire => 2 * dense_frame_len(rank, numel),
                },
                Scheme::SplitSparse { fraction, .. } => {
                    let k = kept_count(numel as usize, *fraction) as u64;
                    match mode {
                        AccountingMode::ValuesOnly => 2 * 4 * k,
                        AccountingMode::OnWire => 2 * sparse_frame_len(rank, k),
                    }
                }
                _ => unreachable!(),
            }
        }
    };
    Ok(devices * per_device)
}

/// Cumulative byte counters for one simulation, split by direction and
/// accounting mode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrafficLedger {
    pub up_values: u64,
    pub up_wire: u64,
    pub down_values: u64,
    pub down_wire: u64,
}

impl TrafficLedger {
    pub fn record_up(&mut self, values_bytes: u64, wire_bytes: u64) {
        debug_assert!(wire_bytes >= values_bytes);
        self.up_values += values_bytes;
        self.up_wire += wire_bytes;
    }

    pub fn record_down(&mut self, values_bytes: u64, wire_bytes: u64) {
        debug_assert!(wire_bytes >= values_bytes);
        self.down_values += values_bytes;
        self.down_wire += wire_bytes;
    }

    pub fn total_values(&self) -> u64 {
        self.up_values + self.down_values
    }

    pub fn total_wire(&self) -> u64 {
        self.up_wire + self.down_wire
    }

    /// Bytes accumulated since an earlier snapshot.
    pub fn since(&self, earlier: &TrafficLedger) -> TrafficLedger {
        TrafficLedger {
            up_values: self.up_values - earlier.up_values,
            up_wire: self.up_wire - earlier.up_wire,
            down_values: self.down_values - earlier.down_values,
            down_wire: self.down_wire - earlier.down_wire,
        }
    }
}
