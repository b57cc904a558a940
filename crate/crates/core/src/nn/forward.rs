use crate::error::{Error, Result};
use crate::rng::MaskSource;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::model::{Layer, Model, ParamKind};
use super::ops::{self, ConvGeom};

/// How dropout layers behave during a forward pass.
pub enum DropoutMode<'a> {
    /// Evaluation: dropout is the identity. Fully deterministic.
    Off,
    /// Training: keep-masks are drawn from the source, kept values are
    /// scaled by `1 / (1 - p)`.
    Masked(&'a mut dyn MaskSource),
}

/// Everything a backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub(crate) input: Tensor<T>,
    pub(crate) outputs: Vec<Tensor<T>>,
    pub(crate) logits: Tensor<T>,
    pub(crate) argmax: Vec<Option<Vec<usize>>>,
    pub(crate) masks: Vec<Option<Vec<bool>>>,
    pub(crate) positions: Vec<usize>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }

    /// Output of every layer of the stack, in order.
    pub fn layer_outputs(&self) -> &[Tensor<T>] {
        &self.outputs
    }

    /// Post-activation output `x^l` of parameterised layer `l`.
    pub fn activation(&self, l: usize) -> &Tensor<T> {
        &self.outputs[self.positions[l]]
    }

    /// Input of parameterised layer `l` (`x^{l-1}` after any pooling,
    /// flattening or dropout in between).
    pub fn layer_input(&self, l: usize) -> &Tensor<T> {
        let pos = self.positions[l];
        if pos == 0 {
            &self.input
        } else {
            &self.outputs[pos - 1]
        }
    }

    /// Final model output.
    pub fn output(&self) -> &Tensor<T> {
        self.outputs.last().expect("non-empty")
    }

    /// Pre-activation of the output layer (pre-softmax logits).
    pub fn logits(&self) -> &Tensor<T> {
        &self.logits
    }

    /// Max-pool selections and dropout masks, used to detect kink crossings
    /// in finite-difference checks.
    pub fn routing_signature(&self) -> (Vec<Option<Vec<usize>>>, Vec<Option<Vec<bool>>>, Vec<Vec<bool>>) {
        let relu_pattern = self
            .outputs
            .iter()
            .map(|t| t.data().iter().map(|v| *v > T::zero()).collect())
            .collect();
        (self.argmax.clone(), self.masks.clone(), relu_pattern)
    }
}

impl<T: Scalar> Model<T> {
    pub fn forward(&self, x: &Tensor<T>, mode: DropoutMode<'_>) -> Result<ForwardTrace<T>> {
        forward(self, x, mode)
    }

    /// Evaluation-mode output.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x, DropoutMode::Off)?.outputs.pop().expect("non-empty"))
    }

    /// Index of the largest output (first on ties).
    pub fn classify(&self, x: &Tensor<T>) -> Result<usize> {
        let trace = self.forward(x, DropoutMode::Off)?;
        Ok(argmax(trace.logits().data()))
    }
}

pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn forward<T: Scalar>(model: &Model<T>, x: &Tensor<T>, mut mode: DropoutMode<'_>) -> Result<ForwardTrace<T>> {
    if x.shape() != model.input_shape() {
        if x.len() == model.input_shape().iter().product::<usize>() && x.shape().len() == 1 {
            // flat record for an image model is accepted as-is
        } else {
            return Err(Error::shape("input of layer 0", model.input_shape(), x.shape()));
        }
    }
    let n = model.layers().len();
    let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(n);
    let mut argmaxes = vec![None; n];
    let mut masks = vec![None; n];
    let mut logits = None;
    let mut shape = model.input_shape().to_vec();
    let last_param = *model.positions().last().expect("non-empty");

    for (pos, layer) in model.layers().iter().enumerate() {
        let input = if pos == 0 { x.data() } else { outputs[pos - 1].data() };
        let out_shape = model.shape_after(pos).to_vec();
        let data: Vec<T> = match layer {
            Layer::Param(p) => {
                let mut z = match p.kind {
                    ParamKind::Dense => ops::dense_forward(p.weight.data(), p.bias.data(), input, p.units()),
                    ParamKind::Conv2d { stride, padding } => {
                        let geom = conv_geom(&shape, p.weight.shape(), stride, padding, &out_shape);
                        ops::conv_forward(p.weight.data(), p.bias.data(), input, &geom)
                    }
                };
                if pos == last_param {
                    logits = Some(Tensor::new(out_shape.clone(), z.clone())?);
                }
                ops::apply_activation(p.activation, &mut z);
                z
            }
            Layer::MaxPool2d { kernel, stride } => {
                let (out, arg) = ops::maxpool_forward(input, shape[0], shape[1], shape[2], *kernel, *stride);
                argmaxes[pos] = Some(arg);
                out
            }
            Layer::Flatten => input.to_vec(),
            Layer::Dropout { p } => match &mut mode {
                DropoutMode::Off => input.to_vec(),
                DropoutMode::Masked(_) if *p == 0.0 => input.to_vec(),
                DropoutMode::Masked(src) => {
                    let keep = src.keep_mask(input.len(), *p);
                    let scale = T::of(1.0 / (1.0 - p));
                    let out = input
                        .iter()
                        .zip(&keep)
                        .map(|(&v, &k)| if k { v * scale } else { T::zero() })
                        .collect();
                    masks[pos] = Some(keep);
                    out
                }
            },
        };
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("forward pass, stack position {pos}"),
            });
        }
        outputs.push(Tensor::new(out_shape.clone(), data)?);
        shape = out_shape;
    }

    Ok(ForwardTrace {
        input: x.clone(),
        outputs,
        logits: logits.expect("output layer visited"),
        argmax: argmaxes,
        masks,
        positions: model.positions().to_vec(),
    })
}

pub(crate) fn conv_geom(in_shape: &[usize], wshape: &[usize], stride: usize, pad: usize, out_shape: &[usize]) -> ConvGeom {
    ConvGeom {
        c_in: in_shape[0],
        h: in_shape[1],
        w: in_shape[2],
        c_out: wshape[0],
        k1: wshape[2],
        k2: wshape[3],
        stride,
        pad,
        h_out: out_shape[1],
        w_out: out_shape[2],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::{Activation, ArchSpec};
    use crate::nn::model::ParamLayer;

    #[test]
    fn zero_model_gives_uniform_softmax() {
        let m = Model::<f32>::zeros(&ArchSpec::mlp("m", 5, &[4], 3, 0.0)).unwrap();
        let x = Tensor::from_vec(vec![0.3, -1.0, 2.0, 0.0, 7.0]);
        let out = m.predict(&x).unwrap();
        for v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn hand_dense_logits() {
        let layer = ParamLayer {
            kind: ParamKind::Dense,
            weight: Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap(),
            bias: Tensor::from_vec(vec![0.5, -0.5]),
            activation: Activation::None,
        };
        let m = Model::new("one", vec![2], vec![Layer::Param(layer)]).unwrap();
        let t = m.forward(&Tensor::from_vec(vec![1.0, 1.0]), DropoutMode::Off).unwrap();
        assert_eq!(t.logits().data(), &[3.5, 6.5]);
        assert_eq!(t.output().data(), &[3.5, 6.5]);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut w = vec![0.0f64; 9];
        w[4] = 1.0;
        let conv = ParamLayer {
            kind: ParamKind::Conv2d { stride: 1, padding: 1 },
            weight: Tensor::new(vec![1, 1, 3, 3], w).unwrap(),
            bias: Tensor::zeros(&[1]),
            activation: Activation::None,
        };
        let m = Model::new("id", vec![1, 3, 3], vec![Layer::Param(conv), Layer::Flatten]).unwrap();
        let x = Tensor::from_f64(&[1, 3, 3], &[1.0, -2.0, 3.0, 4.0, 5.0, -6.0, 7.0, 8.0, 9.0]).unwrap();
        let t = m.forward(&x, DropoutMode::Off).unwrap();
        assert_eq!(t.activation(0).data(), x.data());
    }

    #[test]
    fn shape_mismatch_names_input() {
        let m = Model::<f32>::zeros(&ArchSpec::mlp("m", 5, &[4], 3, 0.0)).unwrap();
        let err = m.predict(&Tensor::from_vec(vec![1.0; 4])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
        assert!(err.to_string().contains("layer 0"));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut m = Model::<f32>::zeros(&ArchSpec::mlp("m", 2, &[2], 2, 0.0)).unwrap();
        m.param_mut(0).weight.data_mut()[0] = f32::MAX;
        m.param_mut(0).weight.data_mut()[1] = f32::MAX;
        let err = m.predict(&Tensor::from_vec(vec![f32::MAX, f32::MAX])).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}
