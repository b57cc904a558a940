//! Membership meta-classifier: one embedder per feature block, a label
//! embedding, and an MLP head with two outputs (non-member, member).

use crate::data::Overlap;
use crate::error::{Error, Result};
use crate::nn::{backprop, probabilities, ArchSpec, DropoutMode, ForwardTrace, GradientSet, LayerSpec, Model, Upstream};
use crate::rng::Stream;
use crate::scalar::{sorted_sum, Scalar};
use crate::tensor::Tensor;
use crate::train::{init_weights, Adam};
use crate::nn::Activation;

use super::features::{FeatureSpec, RecordFeatures};

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_divisor: f64,
    pub min_lr: f64,
    pub max_epochs: usize,
    pub grad_kernel: usize,
    pub grad_channels: usize,
    pub dropout: f64,
    pub hidden: usize,
    pub embed: usize,
    pub label_embed: usize,
    pub head: (usize, usize),
    pub regime: Overlap,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 0.001,
            lr_divisor: 2.0,
            min_lr: 1e-4,
            max_epochs: 100,
            grad_kernel: 100,
            grad_channels: 4,
            dropout: 0.2,
            hidden: 128,
            embed: 64,
            label_embed: 16,
            head: (128, 64),
            regime: Overlap::Disjoint,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PartKind {
    Oa(usize),
    /// Gradient block `i`, zero-padded to a multiple of the kernel.
    Grad(usize, usize),
    Ia,
    Set,
    Label,
}

#[derive(Debug, Clone, PartialEq)]
struct Part<T> {
    kind: PartKind,
    model: Model<T>,
}

/// Feature-block sizes the classifier was built for.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Dims {
    oa: Vec<usize>,
    grads: Vec<usize>,
    ia: Option<usize>,
    set: Option<usize>,
}

impl Dims {
    fn of<T>(f: &RecordFeatures<T>) -> Self {
        Self {
            oa: f.oa.iter().map(Vec::len).collect(),
            grads: f.grads.iter().map(Vec::len).collect(),
            ia: f.ia.as_ref().map(Vec::len),
            set: f.set.as_ref().and_then(|s| s.first().map(Vec::len)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaClassifier<T> {
    spec: FeatureSpec,
    dims: Dims,
    num_classes: usize,
    parts: Vec<Part<T>>,
    head: Model<T>,
}

struct Pass<T> {
    parts: Vec<Vec<ForwardTrace<T>>>,
    head: ForwardTrace<T>,
}

fn mlp_spec(id: &str, input: usize, hidden: usize, out: usize) -> ArchSpec {
    ArchSpec {
        arch_id: id.into(),
        input_shape: vec![input],
        layers: vec![
            LayerSpec::Dense {
                units: hidden,
                activation: Activation::Relu,
            },
            LayerSpec::Dense {
                units: out,
                activation: Activation::None,
            },
        ],
    }
}

impl<T: Scalar> MetaClassifier<T> {
    /// Builds an untrained classifier sized after `sample`.
    pub fn new(spec: &FeatureSpec, sample: &RecordFeatures<T>, num_classes: usize, cfg: &McConfig) -> Result<Self> {
        let dims = Dims::of(sample);
        if dims.oa.len() != spec.oa_layers.len()
            || dims.grads.len() != spec.grad_layers.len()
            || dims.ia.is_some() != spec.include_ia
            || dims.set.is_some() != spec.set_based
        {
            return Err(Error::Config(format!("features do not match spec {spec}")));
        }
        let mut archs: Vec<(PartKind, ArchSpec)> = Vec::new();
        for (i, &n) in dims.oa.iter().enumerate() {
            archs.push((PartKind::Oa(i), mlp_spec("oa", n, cfg.hidden, cfg.embed)));
        }
        for (i, &n) in dims.grads.iter().enumerate() {
            let k = cfg.grad_kernel;
            let padded = n.div_ceil(k) * k;
            let arch = ArchSpec {
                arch_id: "grad".into(),
                input_shape: vec![1, 1, padded],
                layers: vec![
                    LayerSpec::Conv2d {
                        filters: cfg.grad_channels,
                        kernel: (1, k),
                        stride: k,
                        padding: 0,
                        activation: Activation::Relu,
                    },
                    LayerSpec::Flatten,
                    LayerSpec::Dropout { p: cfg.dropout },
                    LayerSpec::Dense {
                        units: cfg.hidden,
                        activation: Activation::Relu,
                    },
                    LayerSpec::Dense {
                        units: cfg.embed,
                        activation: Activation::None,
                    },
                ],
            };
            archs.push((PartKind::Grad(i, padded), arch));
        }
        if let Some(n) = dims.ia {
            archs.push((PartKind::Ia, mlp_spec("ia", n, cfg.hidden, cfg.embed)));
        }
        if let Some(n) = dims.set {
            archs.push((PartKind::Set, mlp_spec("set", n, cfg.hidden, cfg.embed)));
        }
        if spec.include_label {
            let arch = ArchSpec {
                arch_id: "label".into(),
                input_shape: vec![num_classes],
                layers: vec![LayerSpec::Dense {
                    units: cfg.label_embed,
                    activation: Activation::None,
                }],
            };
            archs.push((PartKind::Label, arch));
        }
        let width: usize = archs
            .iter()
            .map(|(k, _)| if *k == PartKind::Label { cfg.label_embed } else { cfg.embed })
            .sum();
        let head_arch = ArchSpec {
            arch_id: "head".into(),
            input_shape: vec![width],
            layers: vec![
                LayerSpec::Dense {
                    units: cfg.head.0,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    units: cfg.head.1,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    units: 2,
                    activation: Activation::Softmax,
                },
            ],
        };
        let mut seeds = Stream::derive(cfg.seed, 0);
        let parts = archs
            .into_iter()
            .map(|(kind, arch)| {
                Ok(Part {
                    kind,
                    model: init_weights(&arch, seeds.next_u64())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            dims,
            num_classes,
            parts,
            head: init_weights(&head_arch, seeds.next_u64())?,
        })
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn head(&self) -> &Model<T> {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Model<T> {
        &mut self.head
    }

    pub fn num_parameters(&self) -> usize {
        self.head.num_parameters() + self.parts.iter().map(|p| p.model.num_parameters()).sum::<usize>()
    }

    fn check(&self, f: &RecordFeatures<T>) -> Result<()> {
        if Dims::of(f) != self.dims || (self.spec.include_label && f.label >= self.num_classes) {
            return Err(Error::Config(format!("features do not match the classifier's spec {}", self.spec)));
        }
        Ok(())
    }

    fn inputs(&self, kind: PartKind, f: &RecordFeatures<T>) -> Vec<Tensor<T>> {
        match kind {
            PartKind::Oa(i) => vec![Tensor::from_vec(f.oa[i].clone())],
            PartKind::Grad(i, padded) => {
                let mut v = f.grads[i].clone();
                v.resize(padded, T::zero());
                vec![Tensor::new(vec![1, 1, padded], v).expect("padded length")]
            }
            PartKind::Ia => vec![Tensor::from_vec(f.ia.clone().expect("checked"))],
            PartKind::Set => f.set.as_ref().expect("checked").iter().map(|v| Tensor::from_vec(v.clone())).collect(),
            PartKind::Label => {
                let mut v = vec![T::zero(); self.num_classes];
                v[f.label] = T::one();
                vec![Tensor::from_vec(v)]
            }
        }
    }

    /// The set branch's aggregated representation: coordinatewise sum of the
    /// per-unit embeddings, independent of unit order.
    pub fn set_embedding(&self, f: &RecordFeatures<T>) -> Result<Vec<T>> {
        self.check(f)?;
        let part = self
            .parts
            .iter()
            .find(|p| p.kind == PartKind::Set)
            .ok_or_else(|| Error::Config("classifier has no set branch".into()))?;
        let outs = self
            .inputs(PartKind::Set, f)
            .iter()
            .map(|x| part.model.predict(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(sum_outputs(outs.iter().map(|t| t.data())))
    }

    fn pass(&self, f: &RecordFeatures<T>, dropout: Option<&mut Stream>) -> Result<Pass<T>> {
        let mut dropout = dropout;
        let mut traces = Vec::with_capacity(self.parts.len());
        let mut concat = Vec::new();
        for part in &self.parts {
            let mut ts = Vec::new();
            for x in self.inputs(part.kind, f) {
                let mode = match dropout.as_deref_mut() {
                    Some(s) => DropoutMode::Masked(s),
                    None => DropoutMode::Off,
                };
                ts.push(part.model.forward(&x, mode)?);
            }
            if part.kind == PartKind::Set {
                concat.extend(sum_outputs(ts.iter().map(|t| t.output().data())));
            } else {
                concat.extend_from_slice(ts[0].output().data());
            }
            traces.push(ts);
        }
        let head = self.head.forward(&Tensor::from_vec(concat), DropoutMode::Off)?;
        Ok(Pass { parts: traces, head })
    }

    /// Membership probability (member-class softmax output).
    pub fn score(&self, f: &RecordFeatures<T>) -> Result<f64> {
        self.check(f)?;
        Ok(self.pass(f, None)?.head.output().data()[1].as_f64())
    }

    pub fn probabilities(&self, f: &RecordFeatures<T>) -> Result<[f64; 2]> {
        self.check(f)?;
        let p = probabilities(&self.pass(f, None)?.head);
        Ok([p[0].as_f64(), p[1].as_f64()])
    }

    pub fn accuracy(&self, feats: &[RecordFeatures<T>]) -> Result<f64> {
        let mut correct = 0usize;
        for f in feats {
            let member = f.member.ok_or_else(|| Error::Invalid("validation features need membership labels".into()))?;
            let [p0, p1] = self.probabilities(f)?;
            if (p1 > p0) == member {
                correct += 1;
            }
        }
        Ok(correct as f64 / feats.len().max(1) as f64)
    }

    fn gradients(&self, f: &RecordFeatures<T>, dropout: &mut Stream) -> Result<(Vec<GradientSet<T>>, GradientSet<T>)> {
        let member = f.member.ok_or_else(|| Error::Invalid("training features need membership labels".into()))?;
        let pass = self.pass(f, Some(dropout))?;
        let mut g = probabilities(&pass.head);
        let y = usize::from(member);
        g[y] = g[y] - T::one();
        let (head_grads, input_grad) = backprop(&self.head, &pass.head, Upstream::Logits(g), true)?;
        let input_grad = input_grad.expect("requested");
        let mut offset = 0;
        let mut part_grads = Vec::with_capacity(self.parts.len());
        for (part, traces) in self.parts.iter().zip(&pass.parts) {
            let width = part.model.num_classes();
            let seg = &input_grad.data()[offset..offset + width];
            offset += width;
            let mut acc = GradientSet::zeros_like(&part.model);
            for t in traces {
                let (gs, _) = backprop(&part.model, t, Upstream::Output(seg.to_vec()), false)?;
                acc.accumulate(&gs);
            }
            part_grads.push(acc);
        }
        Ok((part_grads, head_grads))
    }
}

fn sum_outputs<'a, T: Scalar>(outs: impl Iterator<Item = &'a [T]>) -> Vec<T> {
    let outs: Vec<&[T]> = outs.collect();
    let width = outs.first().map_or(0, |o| o.len());
    (0..width)
        .map(|k| {
            let mut col: Vec<T> = outs.iter().map(|o| o[k]).collect();
            sorted_sum(&mut col)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEpoch {
    pub epoch: usize,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct McOutcome<T> {
    pub classifier: MetaClassifier<T>,
    pub best_val_acc: f64,
    pub log: Vec<McEpoch>,
}

/// Trains on features grouped by source model; every mini-batch comes from
/// a single group. Returns the snapshot with the best validation accuracy.
pub fn train_meta_classifier<T: Scalar>(
    groups: &[Vec<RecordFeatures<T>>],
    val: &[RecordFeatures<T>],
    spec: &FeatureSpec,
    num_classes: usize,
    cfg: &McConfig,
) -> Result<McOutcome<T>> {
    if groups.is_empty() || groups.iter().any(Vec::is_empty) || val.is_empty() {
        return Err(Error::Invalid("meta-classifier needs non-empty training groups and validation set".into()));
    }
    if cfg.batch_size == 0 || !(cfg.min_lr > 0.0 && cfg.lr > cfg.min_lr) || cfg.lr_divisor <= 1.0 {
        return Err(Error::Config("meta-classifier batch size and learning rates are inconsistent".into()));
    }
    let n = groups[0].len();
    if cfg.regime == Overlap::Disjoint && groups.iter().any(|g| g.len() != n) {
        return Err(Error::Invalid("disjoint-pool batches need equally sized groups".into()));
    }
    let mut mc = MetaClassifier::new(spec, &groups[0][0], num_classes, cfg)?;
    for f in groups.iter().flatten().chain(val) {
        mc.check(f)?;
        if f.member.is_none() {
            return Err(Error::Invalid("meta-classifier features need membership labels".into()));
        }
    }
    let mut adams: Vec<Adam<T>> = mc.parts.iter().map(|p| Adam::new(&p.model, 0.9, 0.999, 1e-8)).collect();
    let mut head_adam = Adam::new(&mc.head, 0.9, 0.999, 1e-8);
    let mut dropout = Stream::derive(cfg.seed, 1);
    let mut lr = cfg.lr;
    let mut best = f64::NEG_INFINITY;
    let mut best_mc = mc.clone();
    let mut log = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let mut rng = Stream::derive(cfg.seed, 1 + epoch as u64);
        for batch in epoch_batches(groups, cfg, &mut rng) {
            let mut part_acc: Vec<GradientSet<T>> = mc.parts.iter().map(|p| GradientSet::zeros_like(&p.model)).collect();
            let mut head_acc = GradientSet::zeros_like(&mc.head);
            for &(k, i) in &batch {
                let (pg, hg) = mc.gradients(&groups[k][i], &mut dropout).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged { epoch },
                    other => other,
                })?;
                for (a, g) in part_acc.iter_mut().zip(&pg) {
                    a.accumulate(g);
                }
                head_acc.accumulate(&hg);
            }
            let s = T::of(1.0 / batch.len() as f64);
            for ((part, adam), g) in mc.parts.iter_mut().zip(&mut adams).zip(&mut part_acc) {
                g.scale(s);
                adam.step(&mut part.model, g, lr);
            }
            head_acc.scale(s);
            head_adam.step(&mut mc.head, &head_acc, lr);
        }
        let acc = mc.accuracy(val)?;
        log.push(McEpoch { epoch, val_acc: acc, lr });
        if acc > best {
            best = acc;
            best_mc = mc.clone();
        } else {
            lr /= cfg.lr_divisor;
        }
        if lr < cfg.min_lr {
            break;
        }
    }
    Ok(McOutcome {
        classifier: best_mc,
        best_val_acc: best,
        log,
    })
}

/// `(group, index)` pairs per mini-batch for one epoch.
fn epoch_batches<T>(groups: &[Vec<RecordFeatures<T>>], cfg: &McConfig, rng: &mut Stream) -> Vec<Vec<(usize, usize)>> {
    let k = groups.len();
    let b = cfg.batch_size;
    match cfg.regime {
        Overlap::Disjoint => {
            // shuffled records, one source per batch, sources rotated in a
            // freshly shuffled order every k batches
            let mut order: Vec<usize> = (0..groups[0].len()).collect();
            rng.shuffle(&mut order);
            let mut sources: Vec<usize> = (0..k).collect();
            order
                .chunks(b)
                .enumerate()
                .map(|(j, chunk)| {
                    if j % k == 0 {
                        rng.shuffle(&mut sources);
                    }
                    let src = sources[j % k];
                    chunk.iter().map(|&i| (src, i)).collect()
                })
                .collect()
        }
        Overlap::Identical => {
            // balanced members and non-members of one random source per batch
            let n = groups[0].len();
            (0..n.div_ceil(b))
                .map(|_| {
                    let src = rng.below(k as u64) as usize;
                    let (inn, out): (Vec<usize>, Vec<usize>) =
                        (0..groups[src].len()).partition(|&i| groups[src][i].member == Some(true));
                    let half = b / 2;
                    let mut batch: Vec<(usize, usize)> = Vec::with_capacity(b);
                    for pool in [&inn, &out] {
                        let take = half.min(pool.len());
                        batch.extend(rng.sample_without_replacement(pool.len(), take).into_iter().map(|j| (src, pool[j])));
                    }
                    batch
                })
                .filter(|b| !b.is_empty())
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planted(n: usize, seed: u64, position: usize) -> Vec<RecordFeatures<f32>> {
        let mut rng = Stream::new(seed);
        (0..n)
            .map(|i| {
                let member = i % 2 == 0;
                let mut v: Vec<f32> = (0..6).map(|_| rng.normal() as f32).collect();
                v[position] = if member { 1.0 } else { -1.0 };
                RecordFeatures {
                    record_id: i as u64,
                    label: i % 3,
                    member: Some(member),
                    oa: vec![v],
                    grads: vec![],
                    ia: None,
                    set: None,
                }
            })
            .collect()
    }

    fn spec() -> FeatureSpec {
        FeatureSpec {
            oa_layers: vec![0],
            include_label: true,
            ..FeatureSpec::default()
        }
    }

    fn cfg() -> McConfig {
        McConfig {
            batch_size: 16,
            max_epochs: 20,
            hidden: 16,
            embed: 8,
            label_embed: 4,
            head: (16, 8),
            seed: 7,
            ..McConfig::default()
        }
    }

    #[test]
    fn planted_signal_is_learned() {
        let groups = vec![planted(128, 1, 2), planted(128, 2, 2)];
        let val = planted(100, 3, 2);
        let out = train_meta_classifier(&groups, &val, &spec(), 3, &cfg()).unwrap();
        assert!(out.best_val_acc >= 0.95, "{}", out.best_val_acc);
        let again = train_meta_classifier(&groups, &val, &spec(), 3, &cfg()).unwrap();
        assert_eq!(out.classifier, again.classifier);
    }

    #[test]
    fn misplaced_signal_is_not_transferred() {
        let groups = vec![planted(128, 1, 2)];
        let val = planted(200, 3, 4);
        let out = train_meta_classifier(&groups, &val, &spec(), 3, &cfg()).unwrap();
        let acc = out.classifier.accuracy(&val).unwrap();
        assert!((acc - 0.5).abs() < 0.15, "{acc}");
    }

    #[test]
    fn zero_head_scores_one_half() {
        let f = planted(1, 1, 0);
        let mut mc = MetaClassifier::new(&spec(), &f[0], 3, &cfg()).unwrap();
        for l in 0..mc.head().depth() {
            let p = mc.head_mut().param_mut(l);
            p.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
            p.bias.data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        assert_eq!(mc.score(&f[0]).unwrap(), 0.5);
        let p = mc.probabilities(&f[0]).unwrap();
        assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn spec_mismatch_is_rejected() {
        let f = planted(1, 1, 0);
        let mc = MetaClassifier::new(&spec(), &f[0], 3, &cfg()).unwrap();
        let mut g = f[0].clone();
        g.oa[0].push(0.0);
        assert!(mc.score(&g).is_err());
    }

    #[test]
    fn identical_regime_batches_are_balanced() {
        let groups = vec![planted(40, 1, 0), planted(40, 2, 0)];
        let c = McConfig {
            regime: Overlap::Identical,
            batch_size: 8,
            ..cfg()
        };
        for b in epoch_batches(&groups, &c, &mut Stream::new(3)) {
            let src = b[0].0;
            assert!(b.iter().all(|&(k, _)| k == src));
            let members = b.iter().filter(|&&(k, i)| groups[k][i].member == Some(true)).count();
            assert_eq!(members * 2, b.len());
        }
    }
}

#[cfg(test)]
mod set_tests {
    use super::*;

    #[test]
    fn set_embedding_ignores_unit_order() {
        let mut rng = Stream::new(8);
        let set: Vec<Vec<f64>> = (0..9).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
        let f = RecordFeatures {
            record_id: 0,
            label: 1,
            member: Some(true),
            oa: vec![],
            grads: vec![],
            ia: None,
            set: Some(set.clone()),
        };
        let spec = FeatureSpec {
            set_based: true,
            ..FeatureSpec::default()
        };
        let mc = MetaClassifier::new(&spec, &f, 2, &McConfig::default()).unwrap();
        let mut g = f.clone();
        let pi = crate::symmetry::random_permutation(9, &mut rng);
        g.set = Some(pi.apply(&set));
        assert_eq!(mc.set_embedding(&f).unwrap(), mc.set_embedding(&g).unwrap());
        assert_eq!(mc.score(&f).unwrap(), mc.score(&g).unwrap());
    }

    #[test]
    fn gradient_branch_pads_to_kernel_multiple() {
        let f = RecordFeatures {
            record_id: 0,
            label: 0,
            member: Some(false),
            oa: vec![],
            grads: vec![vec![0.5f32; 230]],
            ia: None,
            set: None,
        };
        let spec = FeatureSpec {
            grad_layers: vec![0],
            ..FeatureSpec::default()
        };
        let mc = MetaClassifier::new(&spec, &f, 2, &McConfig::default()).unwrap();
        assert_eq!(mc.parts[0].kind, PartKind::Grad(0, 300));
        assert_eq!(mc.parts[0].model.input_shape(), &[1, 1, 300]);
        let s = mc.score(&f).unwrap();
        assert!(s > 0.0 && s < 1.0);
    }
}
