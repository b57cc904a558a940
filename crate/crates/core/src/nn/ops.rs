//! Direct-loop kernels. Inputs are single records: vectors for dense layers,
//! `[C, H, W]` maps for convolution and pooling.

use crate::scalar::Scalar;

use super::arch::Activation;

pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// `z = W x + b` with `W` of shape `[out, in]`.
pub(crate) fn dense_forward<T: Scalar>(w: &[T], b: &[T], x: &[T], out: usize) -> Vec<T> {
    let n_in = x.len();
    (0..out)
        .map(|o| {
            let row = &w[o * n_in..(o + 1) * n_in];
            row.iter().zip(x).fold(b[o], |acc, (&wi, &xi)| acc + wi * xi)
        })
        .collect()
}

/// Accumulates `dW += g x^T`, `db += g` and returns `W^T g` when requested.
pub(crate) fn dense_backward<T: Scalar>(
    w: &[T],
    x: &[T],
    g: &[T],
    dw: &mut [T],
    db: &mut [T],
    need_input: bool,
) -> Option<Vec<T>> {
    let n_in = x.len();
    for (o, &go) in g.iter().enumerate() {
        db[o] = db[o] + go;
        if go == T::zero() {
            continue;
        }
        let drow = &mut dw[o * n_in..(o + 1) * n_in];
        for (d, &xi) in drow.iter_mut().zip(x) {
            *d = *d + go * xi;
        }
    }
    need_input.then(|| {
        let mut gi = vec![T::zero(); n_in];
        for (o, &go) in g.iter().enumerate() {
            if go == T::zero() {
                continue;
            }
            let row = &w[o * n_in..(o + 1) * n_in];
            for (acc, &wi) in gi.iter_mut().zip(row) {
                *acc = *acc + go * wi;
            }
        }
        gi
    })
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k1: usize,
    pub k2: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    #[inline]
    fn src(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

pub(crate) fn conv_forward<T: Scalar>(wt: &[T], b: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.h * g.w;
    let ksz = g.k1 * g.k2;
    let mut out = vec![T::zero(); g.c_out * g.h_out * g.w_out];
    for co in 0..g.c_out {
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let mut acc = b[co];
                for ci in 0..g.c_in {
                    let kbase = (co * g.c_in + ci) * ksz;
                    let xbase = ci * plane;
                    for ky in 0..g.k1 {
                        for kx in 0..g.k2 {
                            if let Some((y, xx)) = g.src(oy, ky, ox, kx) {
                                acc = acc + wt[kbase + ky * g.k2 + kx] * x[xbase + y * g.w + xx];
                            }
                        }
                    }
                }
                out[(co * g.h_out + oy) * g.w_out + ox] = acc;
            }
        }
    }
    out
}

pub(crate) fn conv_backward<T: Scalar>(
    wt: &[T],
    x: &[T],
    gout: &[T],
    geom: &ConvGeom,
    dw: &mut [T],
    db: &mut [T],
    need_input: bool,
) -> Option<Vec<T>> {
    let g = geom;
    let plane = g.h * g.w;
    let ksz = g.k1 * g.k2;
    let mut gin = need_input.then(|| vec![T::zero(); g.c_in * plane]);
    for co in 0..g.c_out {
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let go = gout[(co * g.h_out + oy) * g.w_out + ox];
                db[co] = db[co] + go;
                if go == T::zero() {
                    continue;
                }
                for ci in 0..g.c_in {
                    let kbase = (co * g.c_in + ci) * ksz;
                    let xbase = ci * plane;
                    for ky in 0..g.k1 {
                        for kx in 0..g.k2 {
                            if let Some((y, xx)) = g.src(oy, ky, ox, kx) {
                                let ki = kbase + ky * g.k2 + kx;
                                let xi = xbase + y * g.w + xx;
                                dw[ki] = dw[ki] + go * x[xi];
                                if let Some(gin) = gin.as_mut() {
                                    gin[xi] = gin[xi] + go * wt[ki];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Max pooling without padding; ties resolve to the first maximum in
/// row-major window order. Returns the pooled map and the flat source index
/// of every output element.
pub(crate) fn maxpool_forward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let ho = (h - kernel) / stride + 1;
    let wo = (w - kernel) / stride + 1;
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_i = ch * h * w + (oy * stride) * w + ox * stride;
                let mut best = x[best_i];
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = ch * h * w + (oy * stride + ky) * w + ox * stride + kx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub(crate) fn apply_activation<T: Scalar>(act: Activation, z: &mut [T]) {
    match act {
        Activation::None => {}
        Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(T::zero())),
        Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
        Activation::Sigmoid => z.iter_mut().for_each(|v| *v = T::one() / (T::one() + (-*v).exp())),
        Activation::Softmax => softmax_in_place(z),
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(z: &mut [T]) {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s = s + *v;
    }
    for v in z.iter_mut() {
        *v = *v / s;
    }
}

/// Gradient w.r.t. the pre-activation given the gradient w.r.t. the
/// activation output `y`.
pub(crate) fn activation_backward<T: Scalar>(act: Activation, y: &[T], g: &[T]) -> Vec<T> {
    match act {
        Activation::None => g.to_vec(),
        Activation::Relu => y
            .iter()
            .zip(g)
            .map(|(&yi, &gi)| if yi > T::zero() { gi } else { T::zero() })
            .collect(),
        Activation::Tanh => y.iter().zip(g).map(|(&yi, &gi)| gi * (T::one() - yi * yi)).collect(),
        Activation::Sigmoid => y.iter().zip(g).map(|(&yi, &gi)| gi * yi * (T::one() - yi)).collect(),
        Activation::Softmax => {
            let dot = y.iter().zip(g).fold(T::zero(), |a, (&yi, &gi)| a + yi * gi);
            y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - dot)).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dims() {
        assert_eq!(conv_out_dim(16, 5, 1, 0), Some(12));
        assert_eq!(conv_out_dim(3, 3, 1, 1), Some(3));
        assert_eq!(conv_out_dim(2, 5, 1, 0), None);
        assert_eq!(conv_out_dim(300, 100, 100, 0), Some(3));
    }

    #[test]
    fn pool_picks_first_max() {
        let x = [1.0f64, 3.0, 3.0, 2.0];
        let (out, arg) = maxpool_forward(&x, 1, 2, 2, 2, 2);
        assert_eq!(out, vec![3.0]);
        assert_eq!(arg, vec![1]);
    }
}
