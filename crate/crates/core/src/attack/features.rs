use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{backward_trace, DropoutMode, Layer, Model, ParamKind};
use crate::scalar::{sorted_sum, Scalar};
use crate::tensor::Tensor;

/// Which per-record features to extract. Layer indices are 0-based over
/// parameterised layers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct FeatureSpec {
    /// Output activations of these layers.
    pub oa_layers: Vec<usize>,
    /// Loss gradients (weights, then biases) of these layers.
    pub grad_layers: Vec<usize>,
    /// Input activations entering the true-class output unit.
    pub include_ia: bool,
    /// Per-unit vectors of the penultimate layer for the set-based classifier.
    pub set_based: bool,
    pub include_label: bool,
}

impl FeatureSpec {
    pub fn validate<T: Scalar>(&self, model: &Model<T>) -> Result<()> {
        for &l in self.oa_layers.iter().chain(&self.grad_layers) {
            model.check_layer(l)?;
        }
        if self.oa_layers.is_empty() && self.grad_layers.is_empty() && !self.include_ia && !self.set_based {
            return Err(Error::Config("feature spec selects no features".into()));
        }
        if self.include_ia || self.set_based {
            let out = model.param(model.output_layer());
            if out.kind != ParamKind::Dense {
                return Err(Error::Config("input-activation features need a dense output layer".into()));
            }
        }
        if self.set_based {
            let l = model.output_layer();
            if l == 0 || model.param(l - 1).kind != ParamKind::Dense {
                return Err(Error::Config("set-based features need a dense penultimate layer".into()));
            }
        }
        Ok(())
    }
}

impl fmt::Display for FeatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = self.oa_layers.iter().map(|l| format!("oa:{l}")).collect();
        parts.extend(self.grad_layers.iter().map(|l| format!("g:{l}")));
        if self.include_ia {
            parts.push("ia".into());
        }
        if self.set_based {
            parts.push("set".into());
        }
        if self.include_label {
            parts.push("label".into());
        }
        f.write_str(&parts.join(","))
    }
}

/// Comma list of `oa:<layer>`, `g:<layer>`, `ia`, `set`, `label`.
impl FromStr for FeatureSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut spec = FeatureSpec::default();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let layer = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad layer index in feature {tok:?}")))
            };
            match tok.split_once(':') {
                Some(("oa", v)) => spec.oa_layers.push(layer(v)?),
                Some(("g", v)) => spec.grad_layers.push(layer(v)?),
                None if tok == "ia" => spec.include_ia = true,
                None if tok == "set" => spec.set_based = true,
                None if tok == "label" => spec.include_label = true,
                _ => return Err(Error::Config(format!("unknown feature {tok:?}"))),
            }
        }
        Ok(spec)
    }
}

/// Features of one record under one model.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordFeatures<T> {
    pub record_id: u64,
    pub label: usize,
    /// Known membership (shadow and audit sets).
    pub member: Option<bool>,
    pub oa: Vec<Vec<T>>,
    pub grads: Vec<Vec<T>>,
    pub ia: Option<Vec<T>>,
    pub set: Option<Vec<Vec<T>>>,
}

/// Features of `(x, y)` in evaluation mode.
pub fn extract_features<T: Scalar>(model: &Model<T>, x: &Tensor<T>, y: usize, spec: &FeatureSpec) -> Result<RecordFeatures<T>> {
    if y >= model.num_classes() {
        return Err(Error::InvalidClass {
            index: y,
            num_classes: model.num_classes(),
        });
    }
    let trace = model.forward(x, DropoutMode::Off)?;
    let oa = spec.oa_layers.iter().map(|&l| trace.activation(l).data().to_vec()).collect();
    let grads = if spec.grad_layers.is_empty() {
        Vec::new()
    } else {
        let g = backward_trace(model, &trace, y)?;
        spec.grad_layers
            .iter()
            .map(|&l| {
                let p = &g.layers[l];
                p.weight.data().iter().chain(p.bias.data()).copied().collect()
            })
            .collect()
    };
    let ia = if spec.include_ia {
        let last = model.output_layer();
        let w = model.param(last).unit_weights(y);
        let input = trace.layer_input(last).data();
        Some(w.iter().zip(input).map(|(&a, &b)| a * b).collect())
    } else {
        None
    };
    let set = if spec.set_based {
        Some(set_based_score_features(model, x, y)?)
    } else {
        None
    };
    Ok(RecordFeatures {
        record_id: 0,
        label: y,
        member: None,
        oa,
        grads,
        ia,
        set,
    })
}

/// One vector per penultimate unit `d`, of length `N_c + 3`: its output
/// activation, its input to the true-class unit, the loss gradients of its
/// outgoing weights, and the loss gradient of its bias.
///
/// Output-layer sums are order-independent, so permuting the penultimate
/// layer permutes the vectors without changing any bit.
pub fn set_based_score_features<T: Scalar>(model: &Model<T>, x: &Tensor<T>, y: usize) -> Result<Vec<Vec<T>>> {
    let last = model.output_layer();
    if last == 0 || model.param(last).kind != ParamKind::Dense || model.param(last - 1).kind != ParamKind::Dense {
        return Err(Error::Config("set-based features need dense penultimate and output layers".into()));
    }
    if y >= model.num_classes() {
        return Err(Error::InvalidClass {
            index: y,
            num_classes: model.num_classes(),
        });
    }
    if model.between(last - 1).iter().any(|l| !matches!(l, Layer::Dropout { .. })) {
        return Err(Error::Config("set-based features need adjacent dense layers".into()));
    }
    let trace = model.forward(x, DropoutMode::Off)?;
    let act = trace.activation(last - 1).data();
    let out = model.param(last);
    let nc = out.units();
    let mut logits = Vec::with_capacity(nc);
    for i in 0..nc {
        let mut terms: Vec<T> = out.unit_weights(i).iter().zip(act).map(|(&w, &a)| w * a).collect();
        terms.push(out.bias.data()[i]);
        logits.push(sorted_sum(&mut terms));
    }
    let mut g = logits;
    crate::nn::softmax_in_place(&mut g);
    g[y] = g[y] - T::one();
    let hidden_act = model.param(last - 1).activation;
    let w = out.weight.data();
    let d_units = act.len();
    Ok((0..d_units)
        .map(|d| {
            let xd = act[d];
            let mut v = Vec::with_capacity(nc + 3);
            v.push(xd);
            v.push(w[y * d_units + d] * xd);
            v.extend(g.iter().map(|&gi| gi * xd));
            let dx = g.iter().enumerate().fold(T::zero(), |s, (i, &gi)| s + gi * w[i * d_units + d]);
            let db = crate::nn::ops::activation_backward(hidden_act, &[xd], &[dx])[0];
            v.push(db);
            v
        })
        .collect())
}

/// Features of every pool record under one model, labelled by membership
/// in `members` when given.
pub fn featurise<T: Scalar>(
    model: &Model<T>,
    pool: &LabeledDataset<T>,
    members: Option<&HashSet<u64>>,
    spec: &FeatureSpec,
) -> Result<Vec<RecordFeatures<T>>> {
    spec.validate(model)?;
    (0..pool.len())
        .map(|i| {
            let mut f = extract_features(model, pool.record(i), pool.label(i), spec)?;
            f.record_id = pool.id(i);
            f.member = members.map(|m| m.contains(&pool.id(i)));
            Ok(f)
        })
        .collect()
}

/// Every pool record featurised against every model, grouped by model and
/// labelled by the model's training-set indicator.
pub fn build_attack_dataset<T: Scalar>(
    models: &[(&Model<T>, &HashSet<u64>)],
    pool: &LabeledDataset<T>,
    spec: &FeatureSpec,
) -> Result<Vec<Vec<RecordFeatures<T>>>> {
    let ids: HashSet<u64> = pool.ids().iter().copied().collect();
    models
        .iter()
        .map(|(m, members)| {
            if let Some(id) = members.iter().find(|id| !ids.contains(id)) {
                return Err(Error::Invalid(format!("member id {id} is not in the pool")));
            }
            featurise(m, pool, Some(members), spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchSpec;
    use crate::rng::Stream;
    use crate::symmetry::{permute_layer, random_permutation};
    use crate::train::init_weights;

    fn setup() -> (Model<f64>, Tensor<f64>) {
        let m = init_weights(&ArchSpec::mlp("t", 5, &[7, 6], 3, 0.0), 11).unwrap();
        let mut rng = Stream::new(4);
        let x = Tensor::from_vec((0..5).map(|_| rng.normal()).collect());
        (m, x)
    }

    #[test]
    fn spec_round_trips_through_text() {
        let s: FeatureSpec = "oa:2, g:1,ia,set,label".parse().unwrap();
        assert_eq!(s.oa_layers, vec![2]);
        assert_eq!(s.grad_layers, vec![1]);
        assert_eq!(s.to_string().parse::<FeatureSpec>().unwrap(), s);
        assert!("oa:x".parse::<FeatureSpec>().is_err());
        assert!("bogus".parse::<FeatureSpec>().is_err());
    }

    #[test]
    fn input_activations_sum_to_true_logit() {
        let (m, x) = setup();
        let spec = FeatureSpec {
            include_ia: true,
            ..FeatureSpec::default()
        };
        for y in 0..3 {
            let f = extract_features(&m, &x, y, &spec).unwrap();
            let ia = f.ia.unwrap();
            assert_eq!(ia.len(), 6);
            let logits = m.forward(&x, DropoutMode::Off).unwrap().logits().data().to_vec();
            let s: f64 = ia.iter().sum::<f64>() + m.param(2).bias.data()[y];
            assert!((s - logits[y]).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_block_holds_weights_then_biases() {
        let (m, x) = setup();
        let spec = FeatureSpec {
            grad_layers: vec![1],
            ..FeatureSpec::default()
        };
        let f = extract_features(&m, &x, 1, &spec).unwrap();
        let g = backward_trace(&m, &m.forward(&x, DropoutMode::Off).unwrap(), 1).unwrap();
        assert_eq!(f.grads[0].len(), 6 * 7 + 6);
        assert_eq!(&f.grads[0][..42], g.layers[1].weight.data());
        assert_eq!(&f.grads[0][42..], g.layers[1].bias.data());
    }

    #[test]
    fn set_features_permute_with_the_penultimate_layer() {
        let (m, x) = setup();
        let pi = random_permutation(6, &mut Stream::new(9));
        let p = permute_layer(&m, 1, &pi).unwrap();
        let a = set_based_score_features(&m, &x, 2).unwrap();
        let b = set_based_score_features(&p, &x, 2).unwrap();
        assert_eq!(a.len(), 6);
        assert!(a.iter().all(|v| v.len() == 3 + 3));
        assert_eq!(pi.apply(&a), b);
    }

    #[test]
    fn output_activations_permute_with_their_layer() {
        let (m, x) = setup();
        let pi = random_permutation(7, &mut Stream::new(2));
        let p = permute_layer(&m, 0, &pi).unwrap();
        let spec = FeatureSpec {
            oa_layers: vec![0, 2],
            ..FeatureSpec::default()
        };
        let a = extract_features(&m, &x, 0, &spec).unwrap();
        let b = extract_features(&p, &x, 0, &spec).unwrap();
        assert_eq!(pi.apply(&a.oa[0]), b.oa[0]);
        for (u, v) in a.oa[1].iter().zip(&b.oa[1]) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn attack_dataset_labels_membership() {
        let (m, _) = setup();
        let mut rng = Stream::new(5);
        let recs: Vec<Tensor<f64>> = (0..8).map(|_| Tensor::from_vec((0..5).map(|_| rng.normal()).collect())).collect();
        let pool = LabeledDataset::new(recs, vec![0, 1, 2, 0, 1, 2, 0, 1], (10..18).collect(), 3).unwrap();
        let members: HashSet<u64> = [10, 13, 17].into_iter().collect();
        let spec = FeatureSpec {
            oa_layers: vec![1],
            ..FeatureSpec::default()
        };
        let groups = build_attack_dataset(&[(&m, &members)], &pool, &spec).unwrap();
        let flags: Vec<bool> = groups[0].iter().map(|f| f.member.unwrap()).collect();
        assert_eq!(flags, vec![true, false, false, true, false, false, false, true]);
        let bad: HashSet<u64> = [99].into_iter().collect();
        assert!(build_attack_dataset(&[(&m, &bad)], &pool, &spec).is_err());
    }
}
