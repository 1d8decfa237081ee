//! Magnitude top-K sparsification of cut tensors, with optional
//! error-feedback residual accumulation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A sparsified tensor: original dense shape, strictly increasing flat
/// indices, and the retained values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCutTensor {
    pub shape: Vec<usize>,
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
}

impl SparseCutTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.indices.len() != self.values.len() {
            return Err(Error::InvalidArgument(format!(
                "{} indices but {} values",
                self.indices.len(),
                self.values.len()
            )));
        }
        let numel = self.numel();
        let mut prev: Option<u32> = None;
        for &i in &self.indices {
            if (i as usize) >= numel {
                return Err(Error::InvalidArgument(format!(
                    "index {i} out of bounds for {numel} elements"
                )));
            }
            if let Some(p) = prev {
                if i <= p {
                    return Err(Error::InvalidArgument(
                        "indices not strictly increasing".to_string(),
                    ));
                }
            }
            prev = Some(i);
        }
        Ok(())
    }
}

/// Number of entries kept for a given fraction: `max(1, floor(K * numel))`.
pub fn kept_count(numel: usize, fraction: f64) -> usize {
    ((fraction * numel as f64).floor() as usize).clamp(1, numel)
}

/// Keeps the `max(1, floor(K * numel))` largest-magnitude entries.
/// Ties break toward the lowest flat index; indices come out ascending.
pub fn topk_sparsify(t: &Tensor, fraction: f64) -> Result<SparseCutTensor> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "top-K fraction must be in (0, 1], got {fraction}"
        )));
    }
    if t.numel() == 0 {
        return Err(Error::InvalidArgument("cannot sparsify empty tensor".to_string()));
    }
    let k = kept_count(t.numel(), fraction);
    let mut order: Vec<u32> = (0..t.numel() as u32).collect();
    let data = t.data();
    // larger magnitude first, lower index first on equal magnitude
    let rank = |i: u32| (std::cmp::Reverse(ordered_abs(data[i as usize])), i);
    if k < t.numel() {
        order.select_nth_unstable_by_key(k - 1, |&i| rank(i));
        order.truncate(k);
    }
    order.sort_unstable();
    let values = order.iter().map(|&i| data[i as usize]).collect();
    Ok(SparseCutTensor {
        shape: t.shape().to_vec(),
        indices: order,
        values,
    })
}

fn ordered_abs(v: f32) -> OrderedF32 {
    OrderedF32(v.abs())
}

/// Total-order wrapper so selection is deterministic (inputs are validated
/// finite upstream, but NaN must still not panic here).
#[derive(PartialEq)]
struct OrderedF32(f32);
impl Eq for OrderedF32 {}
impl PartialOrd for OrderedF32 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrderedF32 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Dense tensor with the sparse values in place and zeros elsewhere.
pub fn densify(s: &SparseCutTensor) -> Result<Tensor> {
    s.validate()?;
    let mut out = Tensor::zeros(s.shape.clone());
    for (&i, &v) in s.indices.iter().zip(&s.values) {
        out.data_mut()[i as usize] = v;
    }
    Ok(out)
}

/// Error-feedback residual: accumulated mass not yet transmitted.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBuffer {
    residual: Tensor,
}

impl ResidualBuffer {
    pub fn zeros(shape: Vec<usize>) -> Self {
        Self {
            residual: Tensor::zeros(shape),
        }
    }

    pub fn from_tensor(residual: Tensor) -> Self {
        Self { residual }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.residual
    }
}

/// Error-feedback sparsification: selects top-K of `t + residual`, keeps the
/// unsent remainder in the buffer.
pub fn residual_sparsify(
    t: &Tensor,
    buf: &mut ResidualBuffer,
    fraction: f64,
) -> Result<SparseCutTensor> {
    if t.shape() != buf.residual.shape() {
        return Err(Error::ShapeMismatch(format!(
            "residual buffer {:?} vs tensor {:?}",
            buf.residual.shape(),
            t.shape()
        )));
    }
    let mut carried = t.clone();
    carried.add_assign(&buf.residual)?;
    let sparse = topk_sparsify(&carried, fraction)?;
    // residual' = (t + residual) - densify(sent)
    for (&i, &v) in sparse.indices.iter().zip(&sparse.values) {
        carried.data_mut()[i as usize] -= v;
    }
    buf.residual = carried;
    Ok(sparse)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityStats {
    pub kept_count: usize,
    pub kept_fraction: f64,
    pub values_bytes: u64,
    pub index_bytes: u64,
}

pub fn sparsity_stats(s: &SparseCutTensor) -> SparsityStats {
    let count = s.indices.len();
    SparsityStats {
        kept_count: count,
        kept_fraction: count as f64 / s.numel() as f64,
        values_bytes: 4 * count as u64,
        index_bytes: 4 * count as u64,
    }
}
