use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::arch::Activation;
use super::forward::{conv_geom, DropoutMode, ForwardTrace};
use super::model::{Layer, Model, ParamKind};
use super::ops;

/// Probability floor applied before taking the log in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Gradient of one parameterised layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Per-layer loss gradients, shape-matched to the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T> {
    pub layers: Vec<ParamGrad<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        Self {
            layers: model
                .params()
                .map(|p| ParamGrad {
                    weight: Tensor::zeros(p.weight.shape()),
                    bias: Tensor::zeros(p.bias.shape()),
                })
                .collect(),
        }
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.data_mut().iter_mut().zip(b.weight.data()) {
                *x = *x + *y;
            }
            for (x, y) in a.bias.data_mut().iter_mut().zip(b.bias.data()) {
                *x = *x + *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.layers {
            g.weight.data_mut().iter_mut().for_each(|v| *v = *v * s);
            g.bias.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|g| g.weight.sq_norm() + g.bias.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// Weight gradient then bias gradient for every layer, in layer order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|g| [&g.weight, &g.bias])
    }
}

/// Where back-propagation starts.
pub enum Upstream<T> {
    /// Gradient w.r.t. the output layer's pre-activation.
    Logits(Vec<T>),
    /// Gradient w.r.t. the model output (post-activation).
    Output(Vec<T>),
}

/// Back-propagates `upstream` through a recorded forward pass. Returns the
/// parameter gradients and, when `need_input` is set, the gradient w.r.t.
/// the model input.
pub fn backprop<T: Scalar>(
    model: &Model<T>,
    trace: &ForwardTrace<T>,
    upstream: Upstream<T>,
    need_input: bool,
) -> Result<(GradientSet<T>, Option<Tensor<T>>)> {
    let mut grads = GradientSet::zeros_like(model);
    let positions = model.positions();
    let last_param = *positions.last().expect("non-empty");
    let (mut g, mut pre_activation) = match upstream {
        Upstream::Logits(g) => (g, true),
        Upstream::Output(g) => (g, false),
    };
    if g.len() != model.num_classes() {
        return Err(Error::shape("upstream gradient", &[model.num_classes()], &[g.len()]));
    }
    let first_param = positions[0];

    for pos in (0..model.layers().len()).rev() {
        let input = if pos == 0 { trace.input.data() } else { trace.outputs[pos - 1].data() };
        let in_shape: &[usize] = if pos == 0 { model.input_shape() } else { model.shape_after(pos - 1) };
        let want_input = pos > first_param || need_input;
        match &model.layers()[pos] {
            Layer::Param(p) => {
                let l = positions.iter().position(|&q| q == pos).expect("param position");
                let gz = if pos == last_param && pre_activation {
                    pre_activation = false;
                    std::mem::take(&mut g)
                } else {
                    ops::activation_backward(p.activation, trace.outputs[pos].data(), &g)
                };
                let pg = &mut grads.layers[l];
                let (dw, db) = (pg.weight.data_mut(), pg.bias.data_mut());
                let gin = match p.kind {
                    ParamKind::Dense => ops::dense_backward(p.weight.data(), input, &gz, dw, db, want_input),
                    ParamKind::Conv2d { stride, padding } => {
                        let geom = conv_geom(in_shape, p.weight.shape(), stride, padding, model.shape_after(pos));
                        ops::conv_backward(p.weight.data(), input, &gz, &geom, dw, db, want_input)
                    }
                };
                if !(pg.weight.is_finite() && pg.bias.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("gradient of layer {l}"),
                    });
                }
                match gin {
                    Some(gi) => g = gi,
                    None => break,
                }
            }
            Layer::MaxPool2d { .. } => {
                let arg = trace.argmax[pos].as_ref().expect("pool trace");
                let mut gi = vec![T::zero(); input.len()];
                for (&src, &go) in arg.iter().zip(&g) {
                    gi[src] = gi[src] + go;
                }
                g = gi;
            }
            Layer::Flatten => {}
            Layer::Dropout { p } => {
                if let Some(mask) = &trace.masks[pos] {
                    let scale = T::of(1.0 / (1.0 - p));
                    for (v, &k) in g.iter_mut().zip(mask) {
                        *v = if k { *v * scale } else { T::zero() };
                    }
                }
            }
        }
        if pos == 0 && !need_input {
            break;
        }
    }
    let input_grad = if need_input {
        Some(Tensor::new(model.input_shape().to_vec(), g)?)
    } else {
        None
    };
    Ok((grads, input_grad))
}

fn check_class<T: Scalar>(model: &Model<T>, y: usize) -> Result<()> {
    if y >= model.num_classes() {
        return Err(Error::InvalidClass {
            index: y,
            num_classes: model.num_classes(),
        });
    }
    Ok(())
}

/// Cross-entropy gradient w.r.t. the output layer's pre-activation.
fn ce_logit_grad<T: Scalar>(model: &Model<T>, trace: &ForwardTrace<T>, y: usize) -> Upstream<T> {
    let out_act = model.param(model.output_layer()).activation;
    if out_act == Activation::Softmax {
        let mut g = trace.output().data().to_vec();
        g[y] = g[y] - T::one();
        Upstream::Logits(g)
    } else {
        // loss on softmax(logits) even when the head has no softmax
        let mut p = trace.logits().data().to_vec();
        ops::softmax_in_place(&mut p);
        p[y] = p[y] - T::one();
        Upstream::Logits(p)
    }
}

/// Per-record cross-entropy gradients on an existing trace (masked traces
/// give training gradients).
pub fn backward_trace<T: Scalar>(model: &Model<T>, trace: &ForwardTrace<T>, y: usize) -> Result<GradientSet<T>> {
    check_class(model, y)?;
    let (g, _) = backprop(model, trace, ce_logit_grad(model, trace, y), false)?;
    Ok(g)
}

/// Per-record cross-entropy gradients in evaluation mode.
pub fn backward<T: Scalar>(model: &Model<T>, x: &Tensor<T>, y: usize) -> Result<GradientSet<T>> {
    check_class(model, y)?;
    let trace = model.forward(x, DropoutMode::Off)?;
    backward_trace(model, &trace, y)
}

/// Class probabilities from a trace (softmax of the logits).
pub fn probabilities<T: Scalar>(trace: &ForwardTrace<T>) -> Vec<T> {
    let mut p = trace.logits().data().to_vec();
    ops::softmax_in_place(&mut p);
    p
}

/// `-ln(max(p_y, 1e-12))` from a recorded trace.
pub fn loss_from_trace<T: Scalar>(trace: &ForwardTrace<T>, y: usize) -> T {
    let p = probabilities(trace);
    -(p[y].max(T::of(PROB_FLOOR))).ln()
}

/// Cross-entropy of one record in evaluation mode.
pub fn loss<T: Scalar>(model: &Model<T>, x: &Tensor<T>, y: usize) -> Result<T> {
    check_class(model, y)?;
    let trace = model.forward(x, DropoutMode::Off)?;
    Ok(loss_from_trace(&trace, y))
}
