//! Seeded training: uniform fan-in initialisation, Adam, learning-rate
//! halving on stalled validation accuracy.

use std::fmt::Write as _;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{backward_trace, ArchSpec, DropoutMode, GradientSet, Model};
use crate::rng::{SeedBundle, Stream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_divisor: f64,
    /// Epochs without strict validation improvement before the rate drops.
    pub patience: usize,
    pub min_lr: f64,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 0.001,
            lr_divisor: 2.0,
            patience: 5,
            min_lr: 1e-5,
            max_epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.min_lr > 0.0 && self.lr > self.min_lr) {
            return bad("need lr > min_lr > 0");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.lr_divisor <= 1.0 {
            return bad("lr_divisor must exceed 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("Adam parameters out of range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Running accuracy over the epoch's (dropout-masked) training passes.
    pub train_acc: f64,
    pub val_acc: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_acc,val_acc,lr\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.6},{:.6},{:e}", e.epoch, e.train_acc, e.val_acc, e.lr);
        }
        s
    }

    pub fn final_val_acc(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_acc)
    }
}

/// Adam over a model's parameter tensors (weight then bias, layer order).
#[derive(Debug, Clone)]
pub struct Adam<T> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &Model<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let sizes: Vec<usize> = model.params().flat_map(|p| [p.weight.len(), p.bias.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &GradientSet<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t));
        let c2 = T::of(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        let one = T::one();
        let mut k = 0;
        for l in 0..model.depth() {
            let p = model.param_mut(l);
            for (param, g) in [(&mut p.weight, &grads.layers[l].weight), (&mut p.bias, &grads.layers[l].bias)] {
                let (m, v) = (&mut self.m[k], &mut self.v[k]);
                for (i, (w, &gi)) in param.data_mut().iter_mut().zip(g.data()).enumerate() {
                    m[i] = b1 * m[i] + (one - b1) * gi;
                    v[i] = b2 * v[i] + (one - b2) * gi * gi;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    *w = *w - lr * mh / (vh.sqrt() + eps);
                }
                k += 1;
            }
        }
    }
}

/// Weights uniform in `±1/sqrt(fan_in)` drawn layer by layer from the
/// weight-initialisation stream; biases zero.
pub fn init_weights<T: Scalar>(arch: &ArchSpec, seed_wi: u64) -> Result<Model<T>> {
    let mut model = Model::zeros(arch)?;
    let mut rng = Stream::new(seed_wi);
    for l in 0..model.depth() {
        let p = model.param_mut(l);
        let bound = 1.0 / (p.fan_in() as f64).sqrt();
        for w in p.weight.data_mut() {
            *w = T::of(rng.uniform(-bound, bound));
        }
    }
    Ok(model)
}

pub fn accuracy<T: Scalar>(model: &Model<T>, data: &LabeledDataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("accuracy of an empty dataset".into()));
    }
    let mut correct = 0usize;
    for i in 0..data.len() {
        if model.classify(data.record(i))? == data.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub initial: Model<T>,
    pub model: Model<T>,
    pub log: TrainLog,
}

pub fn train<T: Scalar>(
    arch: &ArchSpec,
    data: &LabeledDataset<T>,
    val: &LabeledDataset<T>,
    seeds: &SeedBundle,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let init = init_weights(arch, seeds.weight_init)?;
    train_from(init, data, val, seeds, cfg)
}

/// Trains an already-initialised model. Batch order comes only from the
/// batch-order stream, dropout masks only from the dropout stream.
pub fn train_from<T: Scalar>(
    initial: Model<T>,
    data: &LabeledDataset<T>,
    val: &LabeledDataset<T>,
    seeds: &SeedBundle,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() || val.is_empty() {
        return Err(Error::Invalid("training and validation sets must be non-empty".into()));
    }
    if data.num_classes() != initial.num_classes() {
        return Err(Error::Invalid(format!(
            "dataset has {} classes, model outputs {}",
            data.num_classes(),
            initial.num_classes()
        )));
    }
    let mut model = initial.clone();
    let mut adam = Adam::new(&model, cfg.beta1, cfg.beta2, cfg.eps);
    let mut dropout = seeds.dropout_stream();
    let mut log = TrainLog::default();
    let mut lr = cfg.lr;
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        seeds.batch_order_stream(epoch - 1).shuffle(&mut order);
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = GradientSet::zeros_like(&model);
            for &i in batch {
                let y = data.label(i);
                let trace = model
                    .forward(data.record(i), DropoutMode::Masked(&mut dropout))
                    .map_err(|e| diverged(e, epoch))?;
                if crate::nn::argmax(trace.logits().data()) == y {
                    correct += 1;
                }
                let g = backward_trace(&model, &trace, y).map_err(|e| diverged(e, epoch))?;
                grads.accumulate(&g);
            }
            grads.scale(T::of(1.0 / batch.len() as f64));
            adam.step(&mut model, &grads, lr);
        }
        let val_acc = accuracy(&model, val).map_err(|e| diverged(e, epoch))?;
        log.epochs.push(EpochRecord {
            epoch,
            train_acc: correct as f64 / data.len() as f64,
            val_acc,
            lr,
        });
        if val_acc > best {
            best = val_acc;
            stale = 0;
        } else {
            stale += 1;
            if stale == cfg.patience {
                lr /= cfg.lr_divisor;
                stale = 0;
            }
        }
        if lr < cfg.min_lr {
            break;
        }
    }
    Ok(TrainOutcome { initial, model, log })
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch },
        other => other,
    }
}

/// Model parameters flattened in layer order, weight then bias.
pub fn flat_params<T: Scalar>(model: &Model<T>) -> Vec<T> {
    model
        .params()
        .flat_map(|p| p.weight.data().iter().chain(p.bias.data()).copied())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticKind, SyntheticSpec};

    fn blobs(seed: u64, per_class: usize) -> LabeledDataset<f32> {
        let spec = SyntheticSpec {
            kind: SyntheticKind::Blobs { dim: 8 },
            classes: 2,
            per_class,
            separation: 6.0,
            label_noise: 0.0,
        };
        gen_synthetic(&spec, &mut Stream::new(seed)).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            lr: 0.01,
            max_epochs: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn init_is_bounded_and_deterministic() {
        let arch = ArchSpec::mlp("m", 100, &[7], 3, 0.0);
        let a: Model<f32> = init_weights(&arch, 11).unwrap();
        let b: Model<f32> = init_weights(&arch, 11).unwrap();
        let c: Model<f32> = init_weights(&arch, 12).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
        assert!(a.param(0).weight.data().iter().all(|w| w.abs() <= 0.1));
        assert!(a.param(0).bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = blobs(3, 100);
        let val = blobs(4, 20);
        let arch = ArchSpec::mlp("m", 8, &[16], 2, 0.0);
        let out = train(&arch, &data, &val, &SeedBundle::new(1, 2, 3), &quick()).unwrap();
        assert!(accuracy(&out.model, &data).unwrap() >= 0.95);
    }

    #[test]
    fn training_is_deterministic_and_streams_are_isolated() {
        let data = blobs(3, 40);
        let val = blobs(4, 10);
        let arch = ArchSpec::mlp("m", 8, &[6], 2, 0.3);
        let cfg = TrainConfig {
            max_epochs: 3,
            ..quick()
        };
        let a = train(&arch, &data, &val, &SeedBundle::new(1, 2, 3), &cfg).unwrap();
        let b = train(&arch, &data, &val, &SeedBundle::new(1, 2, 3), &cfg).unwrap();
        assert!(a.model.bit_eq(&b.model));
        assert_eq!(a.log, b.log);
        let c = train(&arch, &data, &val, &SeedBundle::new(1, 9, 3), &cfg).unwrap();
        assert!(a.initial.bit_eq(&c.initial));
        assert!(!a.model.bit_eq(&c.model));
        let d = train(&arch, &data, &val, &SeedBundle::new(1, 2, 9), &cfg).unwrap();
        assert!(!a.model.bit_eq(&d.model));
    }

    #[test]
    fn lr_halves_after_patience_without_improvement() {
        // identical classes: validation accuracy can never keep improving
        let spec = SyntheticSpec {
            kind: SyntheticKind::Blobs { dim: 4 },
            classes: 2,
            per_class: 10,
            separation: 0.0,
            label_noise: 0.0,
        };
        let data: LabeledDataset<f32> = gen_synthetic(&spec, &mut Stream::new(1)).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            lr: 0.01,
            patience: 2,
            min_lr: 1e-3,
            max_epochs: 60,
            ..TrainConfig::default()
        };
        let out = train(&ArchSpec::mlp("m", 4, &[3], 2, 0.0), &data, &data, &SeedBundle::new(5, 6, 7), &cfg).unwrap();
        let log = &out.log.epochs;
        let mut best = f64::NEG_INFINITY;
        let mut stale = 0;
        let mut lr = cfg.lr;
        for e in log {
            assert_eq!(e.lr, lr, "epoch {}", e.epoch);
            if e.val_acc > best {
                best = e.val_acc;
                stale = 0;
            } else {
                stale += 1;
                if stale == cfg.patience {
                    lr /= 2.0;
                    stale = 0;
                }
            }
        }
        assert!(lr < cfg.min_lr || log.len() == cfg.max_epochs);
        assert!(log.windows(2).all(|w| w[1].lr <= w[0].lr));
    }

    #[test]
    fn csv_header() {
        let log = TrainLog {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_acc: 0.5,
                val_acc: 0.25,
                lr: 0.001,
            }],
        };
        assert_eq!(log.to_csv(), "epoch,train_acc,val_acc,lr\n1,0.500000,0.250000,1e-3\n");
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = TrainConfig {
            min_lr: 0.1,
            lr: 0.01,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
