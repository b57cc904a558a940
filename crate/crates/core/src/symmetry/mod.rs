//! Function-preserving weight-space transforms.
//!
//! Every transform acts on hidden layer `l` and compensates in layer `l + 1`.
//! When a flatten separates conv layer `l` from a dense layer, each filter
//! owns a contiguous block of `H * W` input columns of the dense layer
//! (flatten order is channel, row, column) and blocks move as a unit.

mod log;
mod resnet;

pub use log::{SymmetryOp, SymmetryOpLog};
pub use resnet::{permute_resnet_head, permute_resnet_head_steps, BatchNorm, HeadStep, ResNetHead};

use crate::error::{Error, Result};
use crate::nn::{Activation, Layer, Model};
use crate::rng::Stream;
use crate::scalar::Scalar;

/// Bijection over unit indices: `mapping[d]` is the new position of unit `d`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &m in &mapping {
            if m >= mapping.len() || seen[m] {
                return Err(Error::Permutation(format!("{mapping:?} is not a bijection")));
            }
            seen[m] = true;
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn dest(&self, d: usize) -> usize {
        self.mapping[d]
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.len()];
        for (d, &m) in self.mapping.iter().enumerate() {
            inv[m] = d;
        }
        Self { mapping: inv }
    }

    /// `next ∘ self`: apply `self` first, then `next`.
    pub fn then(&self, next: &Self) -> Result<Self> {
        if next.len() != self.len() {
            return Err(Error::Permutation(format!("cannot compose sizes {} and {}", self.len(), next.len())));
        }
        Ok(Self {
            mapping: self.mapping.iter().map(|&m| next.mapping[m]).collect(),
        })
    }

    /// Moves `items[d]` to position `mapping[d]`.
    pub fn apply<X: Clone>(&self, items: &[X]) -> Vec<X> {
        let mut out = items.to_vec();
        for (d, x) in items.iter().enumerate() {
            out[self.mapping[d]] = x.clone();
        }
        out
    }
}

impl std::fmt::Display for Permutation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.mapping.iter().map(|m| m.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Uniform over the symmetric group.
pub fn random_permutation(n: usize, rng: &mut Stream) -> Permutation {
    let mut mapping: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut mapping);
    Permutation { mapping }
}

/// Next layer's weights viewed as `[outer, units, inner]` with respect to
/// the units of layer `l`.
fn next_view<T: Scalar>(model: &Model<T>, l: usize) -> Result<(usize, usize, usize)> {
    let units = model.param(l).units();
    let next = model.param(l + 1);
    let ws = next.weight.shape();
    if next.is_conv() {
        return Ok((ws[0], ws[1], ws[2] * ws[3]));
    }
    let group = model.junction_group(l).unwrap_or(1);
    if ws[1] != units * group {
        return Err(Error::Symmetry(format!(
            "layer {} has {} inputs, expected {units} x {group}",
            l + 1,
            ws[1]
        )));
    }
    Ok((ws[0], units, group))
}

fn check_hidden<T: Scalar>(model: &Model<T>, l: usize, size: usize) -> Result<()> {
    model.check_layer(l)?;
    if l == model.output_layer() {
        return Err(Error::OutputLayer);
    }
    let units = model.param(l).units();
    if size != units {
        return Err(Error::Symmetry(format!("layer {l} has {units} units, transform has {size}")));
    }
    Ok(())
}

/// Moves unit `d` of layer `l` to position `pi[d]`: rows (filters) and
/// biases of layer `l`, matching input columns (channels, column groups) of
/// layer `l + 1`.
pub fn permute_layer<T: Scalar>(model: &Model<T>, l: usize, pi: &Permutation) -> Result<Model<T>> {
    check_hidden(model, l, pi.len())?;
    let (outer, units, inner) = next_view(model, l)?;
    let mut out = model.clone();
    {
        let p = out.param_mut(l);
        let fan = p.fan_in();
        let w = p.weight.data().to_vec();
        let b = p.bias.data().to_vec();
        let wd = p.weight.data_mut();
        for d in 0..units {
            let j = pi.dest(d);
            wd[j * fan..(j + 1) * fan].copy_from_slice(&w[d * fan..(d + 1) * fan]);
        }
        let bd = p.bias.data_mut();
        for d in 0..units {
            bd[pi.dest(d)] = b[d];
        }
    }
    let next = out.param_mut(l + 1);
    let w = next.weight.data().to_vec();
    let wd = next.weight.data_mut();
    for o in 0..outer {
        for d in 0..units {
            let src = (o * units + d) * inner;
            let dst = (o * units + pi.dest(d)) * inner;
            wd[dst..dst + inner].copy_from_slice(&w[src..src + inner]);
        }
    }
    Ok(out)
}

/// Multiplies unit `d` of layer `l` by `factors[d]` and its outgoing weights
/// by the reciprocal. Exact for ReLU (and linear) units.
pub fn rescale_neurons<T: Scalar>(model: &Model<T>, l: usize, factors: &[f64]) -> Result<Model<T>> {
    check_hidden(model, l, factors.len())?;
    let act = model.param(l).activation;
    if !matches!(act, Activation::Relu | Activation::None) {
        return Err(Error::Symmetry(format!("rescaling needs a ReLU or linear layer, layer {l} is {}", act.name())));
    }
    if let Some(c) = factors.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
        return Err(Error::Symmetry(format!("scale factor {c} is not a positive real")));
    }
    let up: Vec<T> = factors.iter().map(|&c| T::of(c)).collect();
    let down: Vec<T> = factors.iter().map(|&c| T::of(1.0 / c)).collect();
    scale_units(model, l, &up, &down)
}

/// Negates the units of a tanh layer where `signs[d] == -1`, together with
/// their outgoing weights.
pub fn flip_signs<T: Scalar>(model: &Model<T>, l: usize, signs: &[i8]) -> Result<Model<T>> {
    check_hidden(model, l, signs.len())?;
    let act = model.param(l).activation;
    if act != Activation::Tanh {
        return Err(Error::Symmetry(format!("sign flips need a tanh layer, layer {l} is {}", act.name())));
    }
    if model.between(l).iter().any(|x| matches!(x, Layer::MaxPool2d { .. })) {
        return Err(Error::Symmetry(format!("max-pooling after layer {l} does not commute with negation")));
    }
    if let Some(s) = signs.iter().find(|s| !matches!(s, 1 | -1)) {
        return Err(Error::Symmetry(format!("sign {s} is not +1 or -1")));
    }
    let s: Vec<T> = signs.iter().map(|&v| T::of(v as f64)).collect();
    scale_units(model, l, &s, &s)
}

fn scale_units<T: Scalar>(model: &Model<T>, l: usize, up: &[T], down: &[T]) -> Result<Model<T>> {
    let (outer, units, inner) = next_view(model, l)?;
    let mut out = model.clone();
    {
        let p = out.param_mut(l);
        let fan = p.fan_in();
        for (d, row) in p.weight.data_mut().chunks_mut(fan).enumerate() {
            row.iter_mut().for_each(|w| *w = *w * up[d]);
        }
        for (b, &c) in p.bias.data_mut().iter_mut().zip(up) {
            *b = *b * c;
        }
    }
    let wd = out.param_mut(l + 1).weight.data_mut();
    for o in 0..outer {
        for (d, &c) in down.iter().enumerate().take(units) {
            let at = (o * units + d) * inner;
            wd[at..at + inner].iter_mut().for_each(|w| *w = *w * c);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchSpec;
    use crate::tensor::Tensor;
    use crate::train::init_weights;

    fn probe(model: &Model<f64>, rng: &mut Stream, n: usize) -> Vec<Tensor<f64>> {
        let len: usize = model.input_shape().iter().product();
        (0..n)
            .map(|_| Tensor::from_f64(model.input_shape(), &(0..len).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap())
            .collect()
    }

    fn max_dev(a: &Model<f64>, b: &Model<f64>, xs: &[Tensor<f64>]) -> f64 {
        xs.iter()
            .map(|x| a.predict(x).unwrap().max_abs_diff(&b.predict(x).unwrap()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn compose_and_invert() {
        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        let q = Permutation::new(vec![1, 0, 2]).unwrap();
        assert!(p.then(&p.inverse()).unwrap().is_identity());
        assert_eq!(p.then(&q).unwrap().mapping(), &[2, 1, 0]);
        assert_eq!(p.apply(&['a', 'b', 'c']), vec!['b', 'c', 'a']);
        assert!(Permutation::new(vec![0, 0]).is_err());
    }

    #[test]
    fn size_one_is_identity() {
        assert!(random_permutation(1, &mut Stream::new(3)).is_identity());
    }

    #[test]
    fn hidden_permutation_preserves_function() {
        let m: Model<f64> = init_weights(&ArchSpec::mlp("m", 4, &[3], 2, 0.0), 1).unwrap();
        let pi = Permutation::new(vec![2, 0, 1]).unwrap();
        let p = permute_layer(&m, 0, &pi).unwrap();
        assert!(!p.bit_eq(&m));
        let xs = probe(&m, &mut Stream::new(2), 100);
        assert!(max_dev(&m, &p, &xs) < 1e-12);
        assert!(permute_layer(&p, 0, &pi.inverse()).unwrap().bit_eq(&m));
    }

    #[test]
    fn output_layer_is_refused() {
        let m: Model<f32> = init_weights(&ArchSpec::mlp("m", 4, &[3], 2, 0.0), 1).unwrap();
        assert_eq!(permute_layer(&m, 1, &Permutation::identity(2)).unwrap_err(), Error::OutputLayer);
        assert!(permute_layer(&m, 0, &Permutation::identity(4)).is_err());
    }

    #[test]
    fn junction_swap_preserves_function() {
        let spec = ArchSpec::parse(
            "input 1x8x8\nconv2d 3 k=3x3 stride=1 pad=1 relu\nmaxpool 2 stride=2\nconv2d 4 k=3x3 stride=1 pad=0 relu\nflatten\ndense 5 relu\ndense 3 softmax",
        )
        .unwrap();
        let m: Model<f64> = init_weights(&spec, 4).unwrap();
        assert_eq!(m.junction_group(1), Some(4));
        let xs = probe(&m, &mut Stream::new(5), 100);
        let swap = Permutation::new(vec![1, 0, 2, 3]).unwrap();
        let p = permute_layer(&m, 1, &swap).unwrap();
        assert!(max_dev(&m, &p, &xs) < 1e-12);
        let p0 = permute_layer(&m, 0, &Permutation::new(vec![2, 0, 1]).unwrap()).unwrap();
        assert!(max_dev(&m, &p0, &xs) < 1e-12);
    }

    #[test]
    fn rescale_and_flip() {
        let m: Model<f64> = init_weights(&ArchSpec::mlp("m", 4, &[3], 2, 0.0), 7).unwrap();
        let xs = probe(&m, &mut Stream::new(8), 100);
        assert!(rescale_neurons(&m, 0, &[1.0; 3]).unwrap().bit_eq(&m));
        let r = rescale_neurons(&m, 0, &[0.5, 3.0, 7.0]).unwrap();
        assert!(max_dev(&m, &r, &xs) < 1e-12);
        assert!(rescale_neurons(&m, 0, &[1.0, 0.0, 1.0]).is_err());
        assert!(flip_signs(&m, 0, &[1, -1, 1]).is_err());

        let mut spec = ArchSpec::mlp("t", 4, &[3], 2, 0.0);
        spec.layers[0] = crate::nn::LayerSpec::Dense {
            units: 3,
            activation: Activation::Tanh,
        };
        let t: Model<f64> = init_weights(&spec, 9).unwrap();
        assert!(flip_signs(&t, 0, &[1, 1, 1]).unwrap().bit_eq(&t));
        let f = flip_signs(&t, 0, &[1, -1, 1]).unwrap();
        assert!(max_dev(&t, &f, &xs) < 1e-12);
        assert!(rescale_neurons(&t, 0, &[2.0; 3]).is_err());
    }
}
