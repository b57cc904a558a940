use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::arch::{Activation, ArchSpec, LayerSpec};
use super::ops::conv_out_dim;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Dense,
    Conv2d { stride: usize, padding: usize },
}

/// A layer with weights: fully connected (`W: [D_out, D_in]`) or
/// convolutional (`W: [C_out, C_in, K1, K2]`), plus one bias per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayer<T> {
    pub kind: ParamKind,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
}

impl<T: Scalar> ParamLayer<T> {
    /// Number of neurons (dense) or filters (conv).
    pub fn units(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Weights feeding one unit, excluding the bias.
    pub fn fan_in(&self) -> usize {
        self.weight.len() / self.units()
    }

    /// Input weights of unit `d`, bias excluded.
    pub fn unit_weights(&self, d: usize) -> &[T] {
        let f = self.fan_in();
        &self.weight.data()[d * f..(d + 1) * f]
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, ParamKind::Conv2d { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Param(ParamLayer<T>),
    MaxPool2d { kernel: usize, stride: usize },
    Flatten,
    Dropout { p: f64 },
}

/// An ordered stack of layers. Parameterised layers are addressed by their
/// 0-based index among parameterised layers only; the last one is the
/// output (classification) layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    arch_id: String,
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
    positions: Vec<usize>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(arch_id: impl Into<String>, input_shape: Vec<usize>, layers: Vec<Layer<T>>) -> Result<Self> {
        let shapes = infer_shapes(&input_shape, &layers)?;
        let positions: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Param(_)).then_some(i))
            .collect();
        if positions.is_empty() {
            return Err(Error::Architecture("model has no parameterised layer".into()));
        }
        for (k, &pos) in positions.iter().enumerate() {
            let Layer::Param(p) = &layers[pos] else { unreachable!() };
            if p.activation == Activation::Softmax && k + 1 != positions.len() {
                return Err(Error::Architecture(format!(
                    "softmax is only allowed on the output layer (layer {k})"
                )));
            }
        }
        if shapes.last().map(|s| s.len()) != Some(1) {
            return Err(Error::Architecture("model output must be a vector".into()));
        }
        Ok(Self {
            arch_id: arch_id.into(),
            input_shape,
            layers,
            positions,
            shapes,
        })
    }

    /// Model with every weight and bias set to zero.
    pub fn zeros(spec: &ArchSpec) -> Result<Self> {
        let mut shape = spec.input_shape.clone();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for ls in &spec.layers {
            let layer = match *ls {
                LayerSpec::Dense { units, activation } => {
                    if shape.len() != 1 {
                        return Err(Error::Architecture(format!("dense layer needs a vector input, got {shape:?}")));
                    }
                    Layer::Param(ParamLayer {
                        kind: ParamKind::Dense,
                        weight: zeros_checked(&[units, shape[0]])?,
                        bias: zeros_checked(&[units])?,
                        activation,
                    })
                }
                LayerSpec::Conv2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                    activation,
                } => {
                    if shape.len() != 3 {
                        return Err(Error::Architecture(format!("conv layer needs a CxHxW input, got {shape:?}")));
                    }
                    Layer::Param(ParamLayer {
                        kind: ParamKind::Conv2d { stride, padding },
                        weight: zeros_checked(&[filters, shape[0], kernel.0, kernel.1])?,
                        bias: zeros_checked(&[filters])?,
                        activation,
                    })
                }
                LayerSpec::MaxPool2d { kernel, stride } => Layer::MaxPool2d { kernel, stride },
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Dropout { p } => Layer::Dropout { p },
            };
            shape = layer_output_shape(&shape, &layer)?;
            layers.push(layer);
        }
        Self::new(spec.arch_id.clone(), spec.input_shape.clone(), layers)
    }

    pub fn arch_spec(&self) -> ArchSpec {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Param(p) => match p.kind {
                    ParamKind::Dense => LayerSpec::Dense {
                        units: p.units(),
                        activation: p.activation,
                    },
                    ParamKind::Conv2d { stride, padding } => LayerSpec::Conv2d {
                        filters: p.units(),
                        kernel: (p.weight.shape()[2], p.weight.shape()[3]),
                        stride,
                        padding,
                        activation: p.activation,
                    },
                },
                Layer::MaxPool2d { kernel, stride } => LayerSpec::MaxPool2d {
                    kernel: *kernel,
                    stride: *stride,
                },
                Layer::Flatten => LayerSpec::Flatten,
                Layer::Dropout { p } => LayerSpec::Dropout { p: *p },
            })
            .collect();
        ArchSpec {
            arch_id: self.arch_id.clone(),
            input_shape: self.input_shape.clone(),
            layers,
        }
    }

    pub fn arch_id(&self) -> &str {
        &self.arch_id
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Number of parameterised layers `L`.
    pub fn depth(&self) -> usize {
        self.positions.len()
    }

    pub fn output_layer(&self) -> usize {
        self.depth() - 1
    }

    /// Position of parameterised layer `l` in the full layer stack.
    pub fn position(&self, l: usize) -> usize {
        self.positions[l]
    }

    pub(crate) fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn check_layer(&self, l: usize) -> Result<()> {
        if l >= self.depth() {
            return Err(Error::LayerIndex {
                index: l,
                count: self.depth(),
            });
        }
        Ok(())
    }

    pub fn param(&self, l: usize) -> &ParamLayer<T> {
        match &self.layers[self.positions[l]] {
            Layer::Param(p) => p,
            _ => unreachable!(),
        }
    }

    /// Mutable access to a parameterised layer. Callers must keep the
    /// weight and bias shapes unchanged.
    pub fn param_mut(&mut self, l: usize) -> &mut ParamLayer<T> {
        match &mut self.layers[self.positions[l]] {
            Layer::Param(p) => p,
            _ => unreachable!(),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &ParamLayer<T>> {
        self.positions.iter().map(move |&p| match &self.layers[p] {
            Layer::Param(p) => p,
            _ => unreachable!(),
        })
    }

    /// Shape of the tensor produced by stack position `pos`.
    pub fn shape_after(&self, pos: usize) -> &[usize] {
        &self.shapes[pos]
    }

    /// Output shape (post-activation) of parameterised layer `l`.
    pub fn unit_output_shape(&self, l: usize) -> &[usize] {
        &self.shapes[self.positions[l]]
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().expect("non-empty")[0]
    }

    /// Non-parameterised layers sitting between layer `l` and `l + 1`.
    pub fn between(&self, l: usize) -> &[Layer<T>] {
        let end = self.positions.get(l + 1).copied().unwrap_or(self.layers.len());
        &self.layers[self.positions[l] + 1..end]
    }

    /// When a flatten separates conv layer `l` from dense layer `l + 1`,
    /// the number of consecutive input columns of `l + 1` owned by each
    /// filter of `l` (flatten order is channel, row, column).
    pub fn junction_group(&self, l: usize) -> Option<usize> {
        let start = self.positions[l];
        let end = *self.positions.get(l + 1)?;
        for pos in start + 1..end {
            if matches!(self.layers[pos], Layer::Flatten) {
                let s = if pos == 0 { &self.input_shape } else { &self.shapes[pos - 1] };
                return (s.len() == 3).then(|| s[1] * s[2]);
            }
        }
        None
    }

    pub fn num_parameters(&self) -> usize {
        self.params().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    /// Bit-exact equality of architecture and parameters.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.arch_spec() == other.arch_spec()
            && self
                .params()
                .zip(other.params())
                .all(|(a, b)| a.weight.bit_eq(&b.weight) && a.bias.bit_eq(&b.bias))
    }

    /// Architecture match ignoring the id.
    pub fn same_shape(&self, other: &Self) -> bool {
        let (mut a, mut b) = (self.arch_spec(), other.arch_spec());
        a.arch_id.clear();
        b.arch_id.clear();
        a == b
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Param(p) => Layer::Param(ParamLayer {
                    kind: p.kind,
                    weight: p.weight.cast(),
                    bias: p.bias.cast(),
                    activation: p.activation,
                }),
                Layer::MaxPool2d { kernel, stride } => Layer::MaxPool2d {
                    kernel: *kernel,
                    stride: *stride,
                },
                Layer::Flatten => Layer::Flatten,
                Layer::Dropout { p } => Layer::Dropout { p: *p },
            })
            .collect();
        Model {
            arch_id: self.arch_id.clone(),
            input_shape: self.input_shape.clone(),
            layers,
            positions: self.positions.clone(),
            shapes: self.shapes.clone(),
        }
    }
}

fn zeros_checked<T: Scalar>(shape: &[usize]) -> Result<Tensor<T>> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Architecture(format!("zero-sized parameter {shape:?}")));
    }
    Ok(Tensor::zeros(shape))
}

fn layer_output_shape<T: Scalar>(shape: &[usize], layer: &Layer<T>) -> Result<Vec<usize>> {
    match layer {
        Layer::Param(p) => match p.kind {
            ParamKind::Dense => {
                let ws = p.weight.shape();
                if ws.len() != 2 || shape.len() != 1 || ws[1] != shape[0] || p.bias.shape() != [ws[0]] {
                    return Err(Error::shape("dense layer input", &[ws.get(1).copied().unwrap_or(0)], shape));
                }
                Ok(vec![ws[0]])
            }
            ParamKind::Conv2d { stride, padding } => {
                let ws = p.weight.shape();
                if ws.len() != 4 || shape.len() != 3 || ws[1] != shape[0] || p.bias.shape() != [ws[0]] {
                    return Err(Error::shape("conv layer input", &[ws.get(1).copied().unwrap_or(0)], shape));
                }
                let h = conv_out_dim(shape[1], ws[2], stride, padding);
                let w = conv_out_dim(shape[2], ws[3], stride, padding);
                match (h, w) {
                    (Some(h), Some(w)) => Ok(vec![ws[0], h, w]),
                    _ => Err(Error::Architecture(format!("kernel {:?} does not fit input {shape:?}", &ws[2..]))),
                }
            }
        },
        Layer::MaxPool2d { kernel, stride } => {
            if shape.len() != 3 || *kernel == 0 || *stride == 0 || shape[1] < *kernel || shape[2] < *kernel {
                return Err(Error::Architecture(format!("max-pool {kernel} does not fit input {shape:?}")));
            }
            Ok(vec![shape[0], (shape[1] - kernel) / stride + 1, (shape[2] - kernel) / stride + 1])
        }
        Layer::Flatten => Ok(vec![shape.iter().product()]),
        Layer::Dropout { p } => {
            if !(0.0..1.0).contains(p) {
                return Err(Error::Architecture(format!("dropout probability {p} outside [0, 1)")));
            }
            Ok(shape.to_vec())
        }
    }
}

fn infer_shapes<T: Scalar>(input: &[usize], layers: &[Layer<T>]) -> Result<Vec<Vec<usize>>> {
    if input.is_empty() || input.iter().any(|&d| d == 0) {
        return Err(Error::Architecture(format!("invalid input shape {input:?}")));
    }
    let mut shape = input.to_vec();
    let mut out = Vec::with_capacity(layers.len());
    for layer in layers {
        shape = layer_output_shape(&shape, layer)?;
        out.push(shape.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cnn_shapes_and_junction() {
        let spec = ArchSpec::cnn("cnn", [1, 16, 16], [8, 16], 64, 4, 0.2);
        let m = Model::<f32>::zeros(&spec).unwrap();
        assert_eq!(m.depth(), 4);
        assert_eq!(m.unit_output_shape(0), &[8, 12, 12]);
        assert_eq!(m.unit_output_shape(1), &[16, 2, 2]);
        assert_eq!(m.junction_group(1), Some(1));
        assert_eq!(m.junction_group(0), None);
        assert_eq!(m.param(2).weight.shape(), &[64, 16]);
        assert_eq!(m.num_classes(), 4);
        assert_eq!(m.arch_spec(), spec);
    }

    #[test]
    fn rejects_hidden_softmax_and_bad_dropout() {
        let mut spec = ArchSpec::mlp("m", 4, &[3], 2, 0.0);
        spec.layers[0] = LayerSpec::Dense {
            units: 3,
            activation: Activation::Softmax,
        };
        assert!(Model::<f32>::zeros(&spec).is_err());
        let spec = ArchSpec::mlp("m", 4, &[3], 2, 1.0);
        assert!(Model::<f32>::zeros(&spec).is_err());
    }

    #[test]
    fn rejects_dense_on_image() {
        let spec = ArchSpec::parse("input 1x4x4\ndense 3 relu").unwrap();
        assert!(Model::<f32>::zeros(&spec).is_err());
    }
}
