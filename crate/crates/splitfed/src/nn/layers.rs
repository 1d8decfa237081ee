//! Forward and backward kernels for the supported layer set.
//!
//! All spatial kernels operate on `(batch, channels, length)` tensors.
//! Conv1d uses "same" zero padding: output length is `ceil(len / stride)`,
//! with the extra pad sample (even kernels) going on the right.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn same_pad_left(in_len: usize, out_len: usize, kernel: usize, stride: usize) -> isize {
    let total = ((out_len - 1) * stride + kernel).saturating_sub(in_len);
    (total / 2) as isize
}

pub fn conv1d_out_len(in_len: usize, stride: usize) -> usize {
    (in_len + stride - 1) / stride
}

/// x: (B, C, L), weight: (O, C, K), bias: (O) -> (B, O, Lo)
pub fn conv1d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Tensor<T> {
    let (b_n, c_n, l_n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o_n, k_n) = (weight.shape()[0], weight.shape()[2]);
    debug_assert_eq!(weight.shape()[1], c_n);
    let lo = conv1d_out_len(l_n, stride);
    let pad_left = same_pad_left(l_n, lo, k_n, stride);

    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    let mut out = Tensor::zeros(vec![b_n, o_n, lo]);
    let od = out.data_mut();
    for b in 0..b_n {
        for o in 0..o_n {
            let out_base = (b * o_n + o) * lo;
            for j in 0..lo {
                let mut acc = bd[o];
                let start = (j * stride) as isize - pad_left;
                for c in 0..c_n {
                    let x_base = (b * c_n + c) * l_n;
                    let w_base = (o * c_n + c) * k_n;
                    for t in 0..k_n {
                        let pos = start + t as isize;
                        if pos >= 0 && (pos as usize) < l_n {
                            acc = acc + wd[w_base + t] * xd[x_base + pos as usize];
                        }
                    }
                }
                od[out_base + j] = acc;
            }
        }
    }
    out
}

/// Returns (dx, dweight, dbias).
pub fn conv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b_n, c_n, l_n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o_n, k_n) = (weight.shape()[0], weight.shape()[2]);
    let lo = dy.shape()[2];
    let pad_left = same_pad_left(l_n, lo, k_n, stride);

    let xd = x.data();
    let wd = weight.data();
    let gd = dy.data();
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dw = Tensor::zeros(weight.shape().to_vec());
    let mut db = Tensor::zeros(vec![o_n]);
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    let dbd = db.data_mut();
    for b in 0..b_n {
        for o in 0..o_n {
            let out_base = (b * o_n + o) * lo;
            for j in 0..lo {
                let g = gd[out_base + j];
                dbd[o] = dbd[o] + g;
                let start = (j * stride) as isize - pad_left;
                for c in 0..c_n {
                    let x_base = (b * c_n + c) * l_n;
                    let w_base = (o * c_n + c) * k_n;
                    for t in 0..k_n {
                        let pos = start + t as isize;
                        if pos >= 0 && (pos as usize) < l_n {
                            let p = pos as usize;
                            dwd[w_base + t] = dwd[w_base + t] + g * xd[x_base + p];
                            dxd[x_base + p] = dxd[x_base + p] + g * wd[w_base + t];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

pub fn maxpool1d_out_len(in_len: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 || window > in_len {
        return Err(Error::InvalidModel(format!(
            "max_pool1d window {window} / stride {stride} invalid for length {in_len}"
        )));
    }
    Ok((in_len - window) / stride + 1)
}

/// Returns the pooled tensor and, per output element, the flat index into
/// `x` of the selected maximum (first maximum on ties).
pub fn maxpool1d_forward<T: Scalar>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
) -> (Tensor<T>, Vec<u32>) {
    let (b_n, c_n, l_n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let lo = (l_n - window) / stride + 1;
    let xd = x.data();
    let mut out = Tensor::zeros(vec![b_n, c_n, lo]);
    let mut argmax = vec![0u32; b_n * c_n * lo];
    let od = out.data_mut();
    for bc in 0..b_n * c_n {
        let x_base = bc * l_n;
        let o_base = bc * lo;
        for j in 0..lo {
            let start = x_base + j * stride;
            let mut best = xd[start];
            let mut best_idx = start;
            for t in 1..window {
                let v = xd[start + t];
                if v > best {
                    best = v;
                    best_idx = start + t;
                }
            }
            od[o_base + j] = best;
            argmax[o_base + j] = best_idx as u32;
        }
    }
    (out, argmax)
}

pub fn maxpool1d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let dxd = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        dxd[idx as usize] = dxd[idx as usize] + g;
    }
    dx
}

pub struct BatchNormCache<T: Scalar> {
    pub xhat: Tensor<T>,
    pub invstd: Vec<T>,
}

/// Train-mode batch norm over (B, C, L): normalizes each channel with the
/// batch statistics (biased variance) and updates the running averages as
/// `running = momentum * running + (1 - momentum) * batch`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm1d_forward_train<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    epsilon: f64,
    momentum: f64,
) -> (Tensor<T>, BatchNormCache<T>) {
    let (b_n, c_n, l_n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = T::from_usize(b_n * l_n).unwrap();
    let eps = T::from_f64(epsilon).unwrap();
    let mom = T::from_f64(momentum).unwrap();
    let xd = x.data();

    let mut y = Tensor::zeros(x.shape().to_vec());
    let mut xhat = Tensor::zeros(x.shape().to_vec());
    let mut invstd = vec![T::zero(); c_n];
    for c in 0..c_n {
        let mut sum = T::zero();
        for b in 0..b_n {
            let base = (b * c_n + c) * l_n;
            for l in 0..l_n {
                sum = sum + xd[base + l];
            }
        }
        let mean = sum / n;
        let mut var_sum = T::zero();
        for b in 0..b_n {
            let base = (b * c_n + c) * l_n;
            for l in 0..l_n {
                let d = xd[base + l] - mean;
                var_sum = var_sum + d * d;
            }
        }
        let var = var_sum / n;
        let istd = T::one() / (var + eps).sqrt();
        invstd[c] = istd;

        let g = scale.data()[c];
        let s = shift.data()[c];
        for b in 0..b_n {
            let base = (b * c_n + c) * l_n;
            for l in 0..l_n {
                let xh = (xd[base + l] - mean) * istd;
                xhat.data_mut()[base + l] = xh;
                y.data_mut()[base + l] = g * xh + s;
            }
        }

        let one = T::one();
        running_mean.data_mut()[c] = mom * running_mean.data()[c] + (one - mom) * mean;
        running_var.data_mut()[c] = mom * running_var.data()[c] + (one - mom) * var;
    }
    (y, BatchNormCache { xhat, invstd })
}

pub fn batchnorm1d_forward_eval<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    epsilon: f64,
) -> Tensor<T> {
    let (b_n, c_n, l_n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let eps = T::from_f64(epsilon).unwrap();
    let xd = x.data();
    let mut y = Tensor::zeros(x.shape().to_vec());
    for c in 0..c_n {
        let istd = T::one() / (running_var.data()[c] + eps).sqrt();
        let mean = running_mean.data()[c];
        let g = scale.data()[c];
        let s = shift.data()[c];
        for b in 0..b_n {
            let base = (b * c_n + c) * l_n;
            for l in 0..l_n {
                y.data_mut()[base + l] = g * (xd[base + l] - mean) * istd + s;
            }
        }
    }
    y
}

/// Returns (dx, dscale, dshift) for train-mode batch norm.
pub fn batchnorm1d_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    scale: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b_n, c_n, l_n) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
    let n = T::from_usize(b_n * l_n).unwrap();
    let xh = cache.xhat.data();
    let gd = dy.data();

    let mut dx = Tensor::zeros(dy.shape().to_vec());
    let mut dscale = Tensor::zeros(vec![c_n]);
    let mut dshift = Tensor::zeros(vec![c_n]);
    for c in 0..c_n {
        let g = scale.data()[c];
        let istd = cache.invstd[c];
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in 0..b_n {
            let base = (b * c_n + c) * l_n;
            for l in 0..l_n {
                sum_dy = sum_dy + gd[base + l];
                sum_dy_xhat = sum_dy_xhat + gd[base + l] * xh[base + l];
            }
        }
        dshift.data_mut()[c] = sum_dy;
        dscale.data_mut()[c] = sum_dy_xhat;
        // dx = g * istd / N * (N * dy - sum(dy) - xhat * sum(dy * xhat))
        let coef = g * istd / n;
        for b in 0..b_n {
            let base = (b * c_n + c) * l_n;
            for l in 0..l_n {
                let i = base + l;
                dx.data_mut()[i] = coef * (n * gd[i] - sum_dy - xh[i] * sum_dy_xhat);
            }
        }
    }
    (dx, dscale, dshift)
}

/// (B, C, L) -> (B, C), mean over length.
pub fn global_avg_pool1d_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b_n, c_n, l_n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let inv_l = T::one() / T::from_usize(l_n).unwrap();
    let xd = x.data();
    let mut y = Tensor::zeros(vec![b_n, c_n]);
    for bc in 0..b_n * c_n {
        let mut sum = T::zero();
        for l in 0..l_n {
            sum = sum + xd[bc * l_n + l];
        }
        y.data_mut()[bc] = sum * inv_l;
    }
    y
}

pub fn global_avg_pool1d_backward<T: Scalar>(input_len: usize, dy: &Tensor<T>) -> Tensor<T> {
    let (b_n, c_n) = (dy.shape()[0], dy.shape()[1]);
    let inv_l = T::one() / T::from_usize(input_len).unwrap();
    let mut dx = Tensor::zeros(vec![b_n, c_n, input_len]);
    for bc in 0..b_n * c_n {
        let g = dy.data()[bc] * inv_l;
        for l in 0..input_len {
            dx.data_mut()[bc * input_len + l] = g;
        }
    }
    dx
}

/// x: (B, I), weight: (O, I), bias: (O) -> (B, O)
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let (b_n, i_n) = (x.shape()[0], x.shape()[1]);
    let o_n = weight.shape()[0];
    let xd = x.data();
    let wd = weight.data();
    let mut y = Tensor::zeros(vec![b_n, o_n]);
    for b in 0..b_n {
        for o in 0..o_n {
            let mut acc = bias.data()[o];
            for i in 0..i_n {
                acc = acc + wd[o * i_n + i] * xd[b * i_n + i];
            }
            y.data_mut()[b * o_n + o] = acc;
        }
    }
    y
}

/// Returns (dx, dweight, dbias).
pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b_n, i_n) = (x.shape()[0], x.shape()[1]);
    let o_n = weight.shape()[0];
    let xd = x.data();
    let wd = weight.data();
    let gd = dy.data();
    let mut dx = Tensor::zeros(vec![b_n, i_n]);
    let mut dw = Tensor::zeros(vec![o_n, i_n]);
    let mut db = Tensor::zeros(vec![o_n]);
    for b in 0..b_n {
        for o in 0..o_n {
            let g = gd[b * o_n + o];
            db.data_mut()[o] = db.data_mut()[o] + g;
            for i in 0..i_n {
                dx.data_mut()[b * i_n + i] = dx.data_mut()[b * i_n + i] + g * wd[o * i_n + i];
                dw.data_mut()[o * i_n + i] = dw.data_mut()[o * i_n + i] + g * xd[b * i_n + i];
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv1d_same_padding_keeps_length_at_stride_one() {
        let x = Tensor::new(vec![1, 1, 5], vec![1.0f32, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let b = Tensor::zeros(vec![1]);
        let y = conv1d_forward(&x, &w, &b, 1);
        assert_eq!(y.shape(), &[1, 1, 5]);
        // center tap of a width-3 kernel with pad 1 reproduces the input
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv1d_stride_two_output_is_ceil() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 5]);
        let w = Tensor::zeros(vec![2, 1, 3]);
        let b = Tensor::zeros(vec![2]);
        let y = conv1d_forward(&x, &w, &b, 2);
        assert_eq!(y.shape(), &[1, 2, 3]);
    }

    #[test]
    fn maxpool_picks_first_max_on_tie() {
        let x = Tensor::new(vec![1, 1, 4], vec![2.0f32, 2.0, 1.0, 3.0]).unwrap();
        let (y, argmax) = maxpool1d_forward(&x, 2, 2);
        assert_eq!(y.data(), &[2.0, 3.0]);
        assert_eq!(argmax, vec![0, 3]);
    }

    #[test]
    fn relu_backward_zeroes_negative_preactivations() {
        let x = Tensor::from_vec(vec![-1.0f32, -0.5, 2.0]);
        let dy = Tensor::from_vec(vec![1.0f32, 1.0, 1.0]);
        let dx = relu_backward(&x, &dy);
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn batchnorm_train_normalizes_per_channel() {
        let x = Tensor::new(vec![2, 1, 4], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let scale = Tensor::from_vec(vec![1.0f32]);
        let shift = Tensor::from_vec(vec![0.0f32]);
        let mut rm = Tensor::zeros(vec![1]);
        let mut rv = Tensor::from_vec(vec![1.0f32]);
        let (y, _) = batchnorm1d_forward_train(&x, &scale, &shift, &mut rm, &mut rv, 1e-5, 0.9);
        let mean: f32 = y.data().iter().sum::<f32>() / 8.0;
        let var: f32 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 8.0;
        assert!(mean.abs() < 1e-3, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
        // running stats moved toward batch stats with momentum 0.9
        assert!((rm.data()[0] - 0.1 * 4.5).abs() < 1e-6);
    }

    #[test]
    fn dense_hand_derived_gradients() {
        // y = W x, W = [[1,2],[3,4]], x = [1,1], loss = sum(y)
        let x = Tensor::new(vec![1, 2], vec![1.0f32, 1.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let dy = Tensor::new(vec![1, 2], vec![1.0f32, 1.0]).unwrap();
        let (dx, dw, db) = dense_backward(&x, &w, &dy);
        assert_eq!(dw.data(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(dx.data(), &[4.0, 6.0]);
        assert_eq!(db.data(), &[1.0, 1.0]);
    }
}
