//! Labelled datasets, experiment partitions and synthetic data.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Records with 0-based class labels and stable identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T> {
    records: Vec<Tensor<T>>,
    labels: Vec<usize>,
    ids: Vec<u64>,
    num_classes: usize,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(records: Vec<Tensor<T>>, labels: Vec<usize>, ids: Vec<u64>, num_classes: usize) -> Result<Self> {
        if records.len() != labels.len() || records.len() != ids.len() {
            return Err(Error::Invalid(format!(
                "dataset columns differ in length: {} records, {} labels, {} ids",
                records.len(),
                labels.len(),
                ids.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidClass {
                index: bad,
                num_classes,
            });
        }
        if let Some(first) = records.first() {
            if let Some(r) = records.iter().find(|r| r.shape() != first.shape()) {
                return Err(Error::shape("dataset record", first.shape(), r.shape()));
            }
        }
        let unique: HashSet<_> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(Error::Invalid("duplicate record ids".into()));
        }
        Ok(Self {
            records,
            labels,
            ids,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn record(&self, i: usize) -> &Tensor<T> {
        &self.records[i]
    }

    pub fn records(&self) -> &[Tensor<T>] {
        &self.records
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn id(&self, i: usize) -> u64 {
        self.ids[i]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn record_shape(&self) -> Option<&[usize]> {
        self.records.first().map(|r| r.shape())
    }

    pub fn index(&self) -> HashMap<u64, usize> {
        self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }

    /// Records selected by id, in the order given.
    pub fn subset(&self, ids: &[u64]) -> Result<Self> {
        let index = self.index();
        let mut records = Vec::with_capacity(ids.len());
        let mut labels = Vec::with_capacity(ids.len());
        for id in ids {
            let &i = index
                .get(id)
                .ok_or_else(|| Error::Invalid(format!("record id {id} not in dataset")))?;
            records.push(self.records[i].clone());
            labels.push(self.labels[i]);
        }
        Self::new(records, labels, ids.to_vec(), self.num_classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Overlap {
    /// The adversary's pool and the target pool share no record.
    Disjoint,
    /// The adversary's pool is the target pool.
    Identical,
}

/// Sizes of the experiment partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    /// Size of each of the two validation sets.
    pub n_val: usize,
    pub n_aux: usize,
    pub n_target: usize,
    pub overlap: Overlap,
    /// Size of the target training set and of every shadow training set.
    pub n_members: usize,
    pub shadows: usize,
}

/// Record-id partition of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    /// Validation set of target-side training.
    pub v1: Vec<u64>,
    /// Validation set of shadow-side training; also the probe pool.
    pub v2: Vec<u64>,
    pub aux: Vec<u64>,
    pub target_pool: Vec<u64>,
    pub target_members: Vec<u64>,
    pub shadow_members: Vec<Vec<u64>>,
}

impl Splits {
    pub fn is_target_member(&self, id: u64) -> bool {
        self.target_members.contains(&id)
    }

    pub fn is_shadow_member(&self, k: usize, id: u64) -> bool {
        self.shadow_members[k].contains(&id)
    }
}

pub fn make_splits(ids: &[u64], spec: &PartitionSpec, rng: &mut Stream) -> Result<Splits> {
    let pools_needed = match spec.overlap {
        Overlap::Disjoint => spec.n_aux + spec.n_target,
        Overlap::Identical => {
            if spec.n_aux != spec.n_target {
                return Err(Error::Partition(format!(
                    "identical pools need equal sizes, got {} and {}",
                    spec.n_aux, spec.n_target
                )));
            }
            spec.n_target
        }
    };
    let needed = 2 * spec.n_val + pools_needed;
    if needed > ids.len() {
        return Err(Error::Partition(format!("{needed} records needed, {} available", ids.len())));
    }
    if spec.n_members > spec.n_target || spec.n_members > spec.n_aux {
        return Err(Error::Partition(format!(
            "{} members do not fit pools of {} and {}",
            spec.n_members, spec.n_target, spec.n_aux
        )));
    }
    let mut order = ids.to_vec();
    rng.shuffle(&mut order);
    let mut rest = order.into_iter();
    let mut take = |n: usize| -> Vec<u64> { rest.by_ref().take(n).collect() };
    let v1 = take(spec.n_val);
    let v2 = take(spec.n_val);
    let (aux, target_pool) = match spec.overlap {
        Overlap::Disjoint => {
            let a = take(spec.n_aux);
            (a, take(spec.n_target))
        }
        Overlap::Identical => {
            let t = take(spec.n_target);
            (t.clone(), t)
        }
    };
    let pick = |pool: &[u64], rng: &mut Stream| -> Vec<u64> {
        rng.sample_without_replacement(pool.len(), spec.n_members)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    };
    let target_members = pick(&target_pool, rng);
    let shadow_members = (0..spec.shadows).map(|_| pick(&aux, rng)).collect();
    Ok(Splits {
        v1,
        v2,
        aux,
        target_pool,
        target_members,
        shadow_members,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticKind {
    /// Gaussian blobs in `dim` dimensions.
    Blobs { dim: usize },
    /// One-channel `side x side` images: class template plus pixel noise.
    Images { side: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub classes: usize,
    pub per_class: usize,
    /// Norm of each class centre (blobs) or template amplitude (images),
    /// in units of the unit-variance noise.
    pub separation: f64,
    /// Probability that a record's label is replaced by a uniform class.
    pub label_noise: f64,
}

/// Reproducible synthetic classification data; ids are `0..n` in the
/// (shuffled) record order.
pub fn gen_synthetic<T: Scalar>(spec: &SyntheticSpec, rng: &mut Stream) -> Result<LabeledDataset<T>> {
    if spec.classes < 2 || spec.per_class == 0 {
        return Err(Error::Config("synthetic data needs >= 2 classes and >= 1 record per class".into()));
    }
    let (shape, dim) = match spec.kind {
        SyntheticKind::Blobs { dim } => (vec![dim], dim),
        SyntheticKind::Images { side } => (vec![1, side, side], side * side),
    };
    if dim == 0 {
        return Err(Error::Config("synthetic records need a positive size".into()));
    }
    let templates: Vec<Vec<f64>> = (0..spec.classes)
        .map(|c| match spec.kind {
            SyntheticKind::Blobs { dim } => {
                let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter().map(|x| x * spec.separation / n).collect()
            }
            SyntheticKind::Images { side } => image_template(c, side, spec.separation, rng),
        })
        .collect();
    let n = spec.classes * spec.per_class;
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut records = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for &slot in &order {
        let class = slot / spec.per_class;
        let values: Vec<f64> = templates[class].iter().map(|m| m + rng.normal()).collect();
        records.push(Tensor::from_f64(&shape, &values)?);
        let label = if spec.label_noise > 0.0 && rng.bernoulli(spec.label_noise) {
            rng.below(spec.classes as u64) as usize
        } else {
            class
        };
        labels.push(label);
    }
    LabeledDataset::new(records, labels, (0..n as u64).collect(), spec.classes)
}

/// Oriented grating under a Gaussian envelope at a random location.
fn image_template(_class: usize, side: usize, amplitude: f64, rng: &mut Stream) -> Vec<f64> {
    let cy = rng.uniform(0.25, 0.75) * side as f64;
    let cx = rng.uniform(0.25, 0.75) * side as f64;
    let theta = rng.uniform(0.0, std::f64::consts::PI);
    let freq = rng.uniform(0.15, 0.45);
    let width = side as f64 / 4.0;
    let mut t = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let env = (-(dx * dx + dy * dy) / (2.0 * width * width)).exp();
            let phase = (dx * theta.cos() + dy * theta.sin()) * freq * std::f64::consts::TAU;
            t.push(amplitude * env * phase.cos());
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_set_algebra() {
        let ids: Vec<u64> = (0..100).collect();
        let spec = PartitionSpec {
            n_val: 10,
            n_aux: 40,
            n_target: 40,
            overlap: Overlap::Disjoint,
            n_members: 20,
            shadows: 2,
        };
        let s = make_splits(&ids, &spec, &mut Stream::new(5)).unwrap();
        let set = |v: &[u64]| v.iter().copied().collect::<HashSet<_>>();
        assert!(set(&s.v1).is_disjoint(&set(&s.v2)));
        assert!(set(&s.aux).is_disjoint(&set(&s.target_pool)));
        assert!(set(&s.target_members).is_subset(&set(&s.target_pool)));
        assert_eq!(s.target_members.len(), 20);
        for d in &s.shadow_members {
            assert_eq!(d.len(), 20);
            assert_eq!(set(d).len(), 20);
            assert!(set(d).is_subset(&set(&s.aux)));
        }
        for v in [&s.v1, &s.v2] {
            assert!(set(v).is_disjoint(&set(&s.aux)));
            assert!(set(v).is_disjoint(&set(&s.target_pool)));
        }
    }

    #[test]
    fn identical_pools() {
        let ids: Vec<u64> = (0..100).collect();
        let spec = PartitionSpec {
            n_val: 10,
            n_aux: 60,
            n_target: 60,
            overlap: Overlap::Identical,
            n_members: 30,
            shadows: 3,
        };
        let s = make_splits(&ids, &spec, &mut Stream::new(1)).unwrap();
        assert_eq!(s.aux, s.target_pool);
    }

    #[test]
    fn infeasible_sizes() {
        let ids: Vec<u64> = (0..50).collect();
        let spec = PartitionSpec {
            n_val: 10,
            n_aux: 20,
            n_target: 20,
            overlap: Overlap::Disjoint,
            n_members: 10,
            shadows: 1,
        };
        assert!(matches!(make_splits(&ids, &spec, &mut Stream::new(1)), Err(Error::Partition(_))));
        let spec = PartitionSpec {
            n_val: 5,
            n_aux: 10,
            n_target: 10,
            n_members: 11,
            ..spec
        };
        assert!(make_splits(&ids, &spec, &mut Stream::new(1)).is_err());
    }

    #[test]
    fn synthetic_is_reproducible() {
        let spec = SyntheticSpec {
            kind: SyntheticKind::Images { side: 8 },
            classes: 3,
            per_class: 5,
            separation: 2.0,
            label_noise: 0.1,
        };
        let a: LabeledDataset<f32> = gen_synthetic(&spec, &mut Stream::new(9)).unwrap();
        let b: LabeledDataset<f32> = gen_synthetic(&spec, &mut Stream::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
        assert_eq!(a.record_shape(), Some(&[1usize, 8, 8][..]));
    }

    #[test]
    fn dataset_validation() {
        let r = vec![Tensor::<f32>::zeros(&[2]); 2];
        assert!(LabeledDataset::new(r.clone(), vec![0, 2], vec![0, 1], 2).is_err());
        assert!(LabeledDataset::new(r.clone(), vec![0, 1], vec![0, 0], 2).is_err());
        assert!(LabeledDataset::new(r, vec![0, 1], vec![7, 3], 2).is_ok());
    }
}
