//! Weight-space view of the top of a residual network: two residual blocks
//! (the lower one with a projection shortcut), global average pooling and a
//! fully connected classifier. Batch norm runs in evaluation mode.
//!
//! ```text
//! h7   = relu(bn1_7(conv1_7(x)))
//! out7 = relu(bn2_7(conv2_7(h7)) + bn_p7(conv_p7(x)))
//! h8   = relu(bn1_8(conv1_8(out7)))
//! out8 = relu(bn2_8(conv2_8(h8)) + out7)
//! y    = fc(avgpool(out8))
//! ```

use crate::error::{Error, Result};
use crate::nn::ops::{conv_forward, ConvGeom};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::Permutation;

/// Per-channel evaluation-mode batch normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    fn random(c: usize, rng: &mut Stream) -> Self {
        Self {
            mean: (0..c).map(|_| T::of(0.2 * rng.normal())).collect(),
            var: (0..c).map(|_| T::of(rng.uniform(0.5, 1.5))).collect(),
            weight: (0..c).map(|_| T::of(rng.uniform(0.5, 1.5))).collect(),
            bias: (0..c).map(|_| T::of(0.1 * rng.normal())).collect(),
            eps: 1e-5,
        }
    }

    fn apply(&self, x: &mut [T], plane: usize) {
        let eps = T::of(self.eps);
        for (c, chunk) in x.chunks_mut(plane).enumerate() {
            let scale = self.weight[c] / (self.var[c] + eps).sqrt();
            for v in chunk {
                *v = (*v - self.mean[c]) * scale + self.bias[c];
            }
        }
    }

    fn permute(&mut self, pi: &Permutation) {
        self.mean = pi.apply(&self.mean);
        self.var = pi.apply(&self.var);
        self.weight = pi.apply(&self.weight);
        self.bias = pi.apply(&self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResNetHead<T> {
    pub conv1_7: Tensor<T>,
    pub bn1_7: BatchNorm<T>,
    pub conv2_7: Tensor<T>,
    pub bn2_7: BatchNorm<T>,
    pub conv_p7: Tensor<T>,
    pub bn_p7: BatchNorm<T>,
    pub conv1_8: Tensor<T>,
    pub bn1_8: BatchNorm<T>,
    pub conv2_8: Tensor<T>,
    pub bn2_8: BatchNorm<T>,
    /// `[classes, channels]`.
    pub fc_weight: Tensor<T>,
    pub fc_bias: Vec<T>,
}

fn random_conv<T: Scalar>(co: usize, ci: usize, k: usize, rng: &mut Stream) -> Tensor<T> {
    let bound = 1.0 / ((ci * k * k) as f64).sqrt();
    let v: Vec<f64> = (0..co * ci * k * k).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::from_f64(&[co, ci, k, k], &v).expect("positive dims")
}

fn conv<T: Scalar>(w: &Tensor<T>, x: &[T], h: usize, wd: usize) -> Vec<T> {
    let s = w.shape();
    let pad = s[2] / 2;
    let geom = ConvGeom {
        c_in: s[1],
        h,
        w: wd,
        c_out: s[0],
        k1: s[2],
        k2: s[3],
        stride: 1,
        pad,
        h_out: h,
        w_out: wd,
    };
    conv_forward(w.data(), &vec![T::zero(); s[0]], x, &geom)
}

fn relu<T: Scalar>(x: &mut [T]) {
    x.iter_mut().for_each(|v| *v = v.max(T::zero()));
}

impl<T: Scalar> ResNetHead<T> {
    /// Random weights and batch-norm statistics: `c_in` input channels,
    /// `c` block channels, 3x3 block convolutions, 1x1 projection.
    pub fn random(c_in: usize, c: usize, classes: usize, rng: &mut Stream) -> Self {
        Self {
            conv1_7: random_conv(c, c_in, 3, rng),
            bn1_7: BatchNorm::random(c, rng),
            conv2_7: random_conv(c, c, 3, rng),
            bn2_7: BatchNorm::random(c, rng),
            conv_p7: random_conv(c, c_in, 1, rng),
            bn_p7: BatchNorm::random(c, rng),
            conv1_8: random_conv(c, c, 3, rng),
            bn1_8: BatchNorm::random(c, rng),
            conv2_8: random_conv(c, c, 3, rng),
            bn2_8: BatchNorm::random(c, rng),
            fc_weight: random_conv::<T>(classes, c, 1, rng).reshaped(&[classes, c]).expect("same length"),
            fc_bias: (0..classes).map(|_| T::of(0.1 * rng.normal())).collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv2_8.shape()[0]
    }

    /// Class logits for one `[c_in, H, W]` feature map.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let s = x.shape();
        if s.len() != 3 || s[0] != self.conv1_7.shape()[1] {
            return Err(Error::shape("resnet head input", &[self.conv1_7.shape()[1], 0, 0], s));
        }
        let (h, w) = (s[1], s[2]);
        let plane = h * w;
        let mut h7 = conv(&self.conv1_7, x.data(), h, w);
        self.bn1_7.apply(&mut h7, plane);
        relu(&mut h7);
        let mut out7 = conv(&self.conv2_7, &h7, h, w);
        self.bn2_7.apply(&mut out7, plane);
        let mut skip = conv(&self.conv_p7, x.data(), h, w);
        self.bn_p7.apply(&mut skip, plane);
        out7.iter_mut().zip(&skip).for_each(|(a, &b)| *a = *a + b);
        relu(&mut out7);

        let mut h8 = conv(&self.conv1_8, &out7, h, w);
        self.bn1_8.apply(&mut h8, plane);
        relu(&mut h8);
        let mut out8 = conv(&self.conv2_8, &h8, h, w);
        self.bn2_8.apply(&mut out8, plane);
        out8.iter_mut().zip(&out7).for_each(|(a, &b)| *a = *a + b);
        relu(&mut out8);

        let n = T::of(plane as f64);
        let pooled: Vec<T> = out8.chunks(plane).map(|c| c.iter().copied().fold(T::zero(), |a, b| a + b) / n).collect();
        let ch = self.channels();
        Ok(self
            .fc_bias
            .iter()
            .enumerate()
            .map(|(k, &b)| {
                let row = &self.fc_weight.data()[k * ch..(k + 1) * ch];
                row.iter().zip(&pooled).fold(b, |a, (&w, &p)| a + w * p)
            })
            .collect())
    }
}

/// One step of propagating a channel permutation down from the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadStep {
    FcColumns,
    Bn2Block8,
    Conv2Block8Out,
    Conv1Block8In,
    Bn2Block7,
    Conv2Block7Out,
    BnProjection7,
    ConvProjection7Out,
}

impl HeadStep {
    pub const ALL: [HeadStep; 8] = [
        HeadStep::FcColumns,
        HeadStep::Bn2Block8,
        HeadStep::Conv2Block8Out,
        HeadStep::Conv1Block8In,
        HeadStep::Bn2Block7,
        HeadStep::Conv2Block7Out,
        HeadStep::BnProjection7,
        HeadStep::ConvProjection7Out,
    ];
}

/// Moves channel `d` of the last two blocks to `pi[d]`, keeping the head's
/// function.
pub fn permute_resnet_head<T: Scalar>(head: &ResNetHead<T>, pi: &Permutation) -> Result<ResNetHead<T>> {
    permute_resnet_head_steps(head, pi, &HeadStep::ALL)
}

/// Applies only the listed steps; omitting any of them breaks the function.
pub fn permute_resnet_head_steps<T: Scalar>(
    head: &ResNetHead<T>,
    pi: &Permutation,
    steps: &[HeadStep],
) -> Result<ResNetHead<T>> {
    let c = head.channels();
    if pi.len() != c {
        return Err(Error::Symmetry(format!("head has {c} channels, permutation has {}", pi.len())));
    }
    let mut out = head.clone();
    for step in steps {
        match step {
            HeadStep::FcColumns => permute_axis(&mut out.fc_weight, 1, pi),
            HeadStep::Bn2Block8 => out.bn2_8.permute(pi),
            HeadStep::Conv2Block8Out => permute_axis(&mut out.conv2_8, 0, pi),
            HeadStep::Conv1Block8In => permute_axis(&mut out.conv1_8, 1, pi),
            HeadStep::Bn2Block7 => out.bn2_7.permute(pi),
            HeadStep::Conv2Block7Out => permute_axis(&mut out.conv2_7, 0, pi),
            HeadStep::BnProjection7 => out.bn_p7.permute(pi),
            HeadStep::ConvProjection7Out => permute_axis(&mut out.conv_p7, 0, pi),
        }
    }
    Ok(out)
}

/// Permutes index `axis` of a tensor: slice `d` moves to `pi[d]`.
fn permute_axis<T: Scalar>(t: &mut Tensor<T>, axis: usize, pi: &Permutation) {
    let shape = t.shape().to_vec();
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let src = t.data().to_vec();
    let dst = t.data_mut();
    for o in 0..outer {
        for d in 0..n {
            let a = (o * n + d) * inner;
            let b = (o * n + pi.dest(d)) * inner;
            dst[b..b + inner].copy_from_slice(&src[a..a + inner]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symmetry::random_permutation;

    fn inputs(n: usize, rng: &mut Stream) -> Vec<Tensor<f64>> {
        (0..n)
            .map(|_| Tensor::from_f64(&[3, 4, 4], &(0..48).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap())
            .collect()
    }

    fn dev(a: &ResNetHead<f64>, b: &ResNetHead<f64>, xs: &[Tensor<f64>]) -> f64 {
        xs.iter()
            .map(|x| {
                let (p, q) = (a.forward(x).unwrap(), b.forward(x).unwrap());
                p.iter().zip(&q).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn identity_is_bit_exact() {
        let h = ResNetHead::<f32>::random(3, 6, 4, &mut Stream::new(1));
        assert_eq!(permute_resnet_head(&h, &Permutation::identity(6)).unwrap(), h);
    }

    #[test]
    fn full_propagation_preserves_and_partial_breaks() {
        let mut rng = Stream::new(2);
        let h = ResNetHead::<f64>::random(3, 6, 4, &mut rng);
        let xs = inputs(50, &mut rng);
        let pi = Permutation::new(vec![1, 2, 3, 4, 5, 0]).unwrap();
        assert!(dev(&h, &permute_resnet_head(&h, &pi).unwrap(), &xs) < 1e-10);
        let partial: Vec<HeadStep> = HeadStep::ALL.into_iter().filter(|s| *s != HeadStep::Conv1Block8In).collect();
        let broken = permute_resnet_head_steps(&h, &pi, &partial).unwrap();
        assert!(dev(&h, &broken, &xs) > 1e-2);
        let r = random_permutation(6, &mut rng);
        assert!(dev(&h, &permute_resnet_head(&h, &r).unwrap(), &xs) < 1e-10);
    }
}
