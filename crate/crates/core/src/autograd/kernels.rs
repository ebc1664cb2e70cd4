//! Raw slice kernels behind the tape operations.

use super::Scalar;

/// Output length of a valid (unpadded) convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || kernel > len {
        return None;
    }
    Some((len - kernel) / stride + 1)
}

fn im2col<S: Scalar>(
    x: &[S],
    cin: usize,
    len: usize,
    k: usize,
    stride: usize,
    lout: usize,
    cols: &mut [S],
) {
    for c in 0..cin {
        let xc = &x[c * len..(c + 1) * len];
        for kk in 0..k {
            let row = &mut cols[(c * k + kk) * lout..(c * k + kk + 1) * lout];
            for (t, v) in row.iter_mut().enumerate() {
                *v = xc[t * stride + kk];
            }
        }
    }
}

pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub len: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub lout: usize,
}

/// `y[b,o,t] = Σ_{c,k} x[b,c,t·stride+k]·w[o,c,k]`.
pub fn conv1d_forward<S: Scalar>(x: &[S], w: &[S], d: &ConvDims) -> Vec<S> {
    let ck = d.cin * d.k;
    let mut out = vec![S::zero(); d.batch * d.cout * d.lout];
    let mut cols = if d.cin == 1 {
        Vec::new()
    } else {
        vec![S::zero(); ck * d.lout]
    };
    for b in 0..d.batch {
        let xb = &x[b * d.cin * d.len..(b + 1) * d.cin * d.len];
        let yb = &mut out[b * d.cout * d.lout..(b + 1) * d.cout * d.lout];
        if d.cin == 1 {
            // Single input channel: the im2col matrix is a strided view of x.
            S::gemm_raw(
                d.cout,
                d.k,
                d.lout,
                S::one(),
                w,
                ck as isize,
                1,
                xb,
                1,
                d.stride as isize,
                S::zero(),
                yb,
                d.lout as isize,
                1,
            );
        } else {
            im2col(xb, d.cin, d.len, d.k, d.stride, d.lout, &mut cols);
            S::gemm_raw(
                d.cout,
                ck,
                d.lout,
                S::one(),
                w,
                ck as isize,
                1,
                &cols,
                d.lout as isize,
                1,
                S::zero(),
                yb,
                d.lout as isize,
                1,
            );
        }
    }
    out
}

/// Returns `(dx, dw)`; `dx` is only computed when requested.
pub fn conv1d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    g: &[S],
    d: &ConvDims,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let ck = d.cin * d.k;
    let mut dw = need_w.then(|| vec![S::zero(); d.cout * ck]);
    let mut dx = need_x.then(|| vec![S::zero(); d.batch * d.cin * d.len]);
    let mut cols = if need_w && d.cin > 1 {
        vec![S::zero(); ck * d.lout]
    } else {
        Vec::new()
    };
    let mut dcols = if need_x {
        vec![S::zero(); ck * d.lout]
    } else {
        Vec::new()
    };
    for b in 0..d.batch {
        let xb = &x[b * d.cin * d.len..(b + 1) * d.cin * d.len];
        let gb = &g[b * d.cout * d.lout..(b + 1) * d.cout * d.lout];
        if let Some(dw) = dw.as_mut() {
            if d.cin == 1 {
                S::gemm_raw(
                    d.cout,
                    d.lout,
                    d.k,
                    S::one(),
                    gb,
                    d.lout as isize,
                    1,
                    xb,
                    d.stride as isize,
                    1,
                    S::one(),
                    dw,
                    ck as isize,
                    1,
                );
            } else {
                im2col(xb, d.cin, d.len, d.k, d.stride, d.lout, &mut cols);
                S::gemm_raw(
                    d.cout,
                    d.lout,
                    ck,
                    S::one(),
                    gb,
                    d.lout as isize,
                    1,
                    &cols,
                    1,
                    d.lout as isize,
                    S::one(),
                    dw,
                    ck as isize,
                    1,
                );
            }
        }
        if let Some(dx) = dx.as_mut() {
            S::gemm_raw(
                ck,
                d.cout,
                d.lout,
                S::one(),
                w,
                1,
                ck as isize,
                gb,
                d.lout as isize,
                1,
                S::zero(),
                &mut dcols,
                d.lout as isize,
                1,
            );
            let dxb = &mut dx[b * d.cin * d.len..(b + 1) * d.cin * d.len];
            for c in 0..d.cin {
                for kk in 0..d.k {
                    let row = &dcols[(c * d.k + kk) * d.lout..(c * d.k + kk + 1) * d.lout];
                    for (t, &v) in row.iter().enumerate() {
                        dxb[c * d.len + t * d.stride + kk] += v;
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Non-overlapping max pooling over the last axis; returns values and the
/// flat input index of each maximum (first index on ties).
pub fn max_pool_forward<S: Scalar>(x: &[S], len: usize, window: usize) -> (Vec<S>, Vec<usize>) {
    let rows = x.len() / len;
    let lout = len / window;
    let mut out = Vec::with_capacity(rows * lout);
    let mut arg = Vec::with_capacity(rows * lout);
    for r in 0..rows {
        for t in 0..lout {
            let start = r * len + t * window;
            let mut best = start;
            for i in start + 1..start + window {
                if x[i] > x[best] {
                    best = i;
                }
            }
            out.push(x[best]);
            arg.push(best);
        }
    }
    (out, arg)
}

pub struct NormSaved<S> {
    pub xhat: Vec<S>,
    pub inv_std: Vec<S>,
}

/// Per-(sample, channel) normalization over the last axis followed by a
/// per-channel affine map.
pub fn channel_norm_forward<S: Scalar>(
    x: &[S],
    batch: usize,
    channels: usize,
    len: usize,
    gamma: &[S],
    beta: &[S],
    eps: S,
) -> (Vec<S>, NormSaved<S>) {
    let mut y = vec![S::zero(); x.len()];
    let mut xhat = vec![S::zero(); x.len()];
    let mut inv_std = vec![S::zero(); batch * channels];
    let n = S::lit(len as f64);
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * len;
            let row = &x[off..off + len];
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            inv_std[b * channels + c] = is;
            for i in 0..len {
                let h = (row[i] - mean) * is;
                xhat[off + i] = h;
                y[off + i] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, NormSaved { xhat, inv_std })
}

#[allow(clippy::type_complexity)]
pub fn channel_norm_backward<S: Scalar>(
    g: &[S],
    saved: &NormSaved<S>,
    batch: usize,
    channels: usize,
    len: usize,
    gamma: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let mut dx = vec![S::zero(); g.len()];
    let mut dgamma = vec![S::zero(); channels];
    let mut dbeta = vec![S::zero(); channels];
    let n = S::lit(len as f64);
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * len;
            let gr = &g[off..off + len];
            let xh = &saved.xhat[off..off + len];
            let mut sum_g = S::zero();
            let mut sum_gx = S::zero();
            for i in 0..len {
                sum_g += gr[i];
                sum_gx += gr[i] * xh[i];
            }
            dgamma[c] += sum_gx;
            dbeta[c] += sum_g;
            let is = saved.inv_std[b * channels + c];
            let scale = gamma[c] * is / n;
            for i in 0..len {
                dx[off + i] = scale * (n * gr[i] - sum_g - xh[i] * sum_gx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute<S: Scalar>(x: &[S], shape: &[usize], axes: &[usize]) -> Vec<S> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    loop {
        out.push(x[src]);
        let mut d = rank;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}
