//! Re-alignment of a shadow model onto a target model: per-layer cost
//! matrices, optimal assignment, and bottom-up or top-down sweeps that apply
//! the resulting permutations.

mod assignment;

use std::fmt;
use std::str::FromStr;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{DropoutMode, Model};
use crate::rng::SeedBundle;
use crate::scalar::{sorted_sum, Scalar};
use crate::symmetry::{permute_layer, Permutation, SymmetryOp, SymmetryOpLog};
use crate::tensor::Tensor;
use crate::train::{init_weights, train_from, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SimKind {
    WeightIn,
    WeightOut,
    Activation,
    Correlation,
}

impl SimKind {
    pub fn name(self) -> &'static str {
        match self {
            SimKind::WeightIn => "weight_in",
            SimKind::WeightOut => "weight_out",
            SimKind::Activation => "activation",
            SimKind::Correlation => "correlation",
        }
    }
}

/// `D x D` costs, lower is more similar. Row `i` is unit `i` of the model
/// being aligned, column `j` is unit `j` of the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub kind: SimKind,
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(kind: SimKind, n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::shape("cost matrix", &[n, n], &[data.len()]));
        }
        if data.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                context: "cost matrix".into(),
            });
        }
        Ok(Self { kind, n, data })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn assignment_cost(&self, p: &Permutation) -> f64 {
        (0..self.n).map(|i| self.get(i, p.dest(i))).sum()
    }

    pub fn identity_cost(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }
}

/// Optimal assignment; ties go to the lexicographically smallest mapping.
pub fn hungarian(cost: &CostMatrix) -> Result<Permutation> {
    Permutation::new(assignment::solve(cost.n, &cost.data)?)
}

/// Assignment on any numeric row-major square matrix.
pub fn hungarian_raw<C: num_traits::ToPrimitive + Copy>(n: usize, cost: &[C]) -> Result<Permutation> {
    let data: Option<Vec<f64>> = cost.iter().map(|c| c.to_f64()).collect();
    let data = data.ok_or_else(|| Error::Invalid("cost not representable as f64".into()))?;
    Permutation::new(assignment::solve(n, &data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightDirection {
    /// Incoming weights and bias of each unit.
    Input,
    /// Outgoing weights (the unit's column block in the next layer).
    Output,
}

fn check_pair<T: Scalar>(m: &Model<T>, target: &Model<T>) -> Result<()> {
    if !m.same_shape(target) {
        return Err(Error::Architecture(format!(
            "cannot align {} onto {}: architectures differ",
            m.arch_id(),
            target.arch_id()
        )));
    }
    Ok(())
}

/// Per-unit weight vectors of layer `l`.
pub fn unit_weight_vectors<T: Scalar>(model: &Model<T>, l: usize, dir: WeightDirection) -> Result<Vec<Vec<f64>>> {
    model.check_layer(l)?;
    let p = model.param(l);
    let units = p.units();
    match dir {
        WeightDirection::Input => Ok((0..units)
            .map(|d| {
                let mut v: Vec<f64> = p.unit_weights(d).iter().map(|w| w.as_f64()).collect();
                v.push(p.bias.data()[d].as_f64());
                v
            })
            .collect()),
        WeightDirection::Output => {
            if l == model.output_layer() {
                return Err(Error::OutputLayer);
            }
            let next = model.param(l + 1);
            let ws = next.weight.shape();
            let (outer, inner) = if next.is_conv() {
                (ws[0], ws[2] * ws[3])
            } else {
                (ws[0], model.junction_group(l).unwrap_or(1))
            };
            let w = next.weight.data();
            Ok((0..units)
                .map(|d| {
                    (0..outer)
                        .flat_map(|o| w[(o * units + d) * inner..(o * units + d + 1) * inner].iter().map(|x| x.as_f64()))
                        .collect()
                })
                .collect())
        }
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn distance_matrix(kind: SimKind, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<CostMatrix> {
    let n = a.len();
    let mut data = Vec::with_capacity(n * n);
    for x in a {
        for y in b {
            data.push(euclid(x, y));
        }
    }
    CostMatrix::new(kind, n, data)
}

/// Euclidean distances between unit weight vectors of `m` (rows) and
/// `target` (columns) in layer `l`.
pub fn sim_weight<T: Scalar>(m: &Model<T>, target: &Model<T>, l: usize, dir: WeightDirection) -> Result<CostMatrix> {
    check_pair(m, target)?;
    let kind = match dir {
        WeightDirection::Input => SimKind::WeightIn,
        WeightDirection::Output => SimKind::WeightOut,
    };
    distance_matrix(kind, &unit_weight_vectors(m, l, dir)?, &unit_weight_vectors(target, l, dir)?)
}

/// Output of every unit of layer `l` over the probe records: one series per
/// unit, records concatenated (conv units contribute their whole map per
/// record, row-major).
pub fn unit_series<T: Scalar>(model: &Model<T>, l: usize, probe: &[Tensor<T>]) -> Result<Vec<Vec<f64>>> {
    model.check_layer(l)?;
    let units = model.param(l).units();
    let mut series = vec![Vec::new(); units];
    for x in probe {
        let trace = model.forward(x, DropoutMode::Off)?;
        let a = trace.activation(l).data();
        let plane = a.len() / units;
        for (d, s) in series.iter_mut().enumerate() {
            s.extend(a[d * plane..(d + 1) * plane].iter().map(|v| v.as_f64()));
        }
    }
    Ok(series)
}

/// Activation series of every parameterised layer from one pass over the
/// probe.
pub fn all_unit_series<T: Scalar>(model: &Model<T>, probe: &[Tensor<T>]) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out: Vec<Vec<Vec<f64>>> = (0..model.depth()).map(|l| vec![Vec::new(); model.param(l).units()]).collect();
    for x in probe {
        let trace = model.forward(x, DropoutMode::Off)?;
        for (l, layer) in out.iter_mut().enumerate() {
            let a = trace.activation(l).data();
            let plane = a.len() / layer.len();
            for (d, s) in layer.iter_mut().enumerate() {
                s.extend(a[d * plane..(d + 1) * plane].iter().map(|v| v.as_f64()));
            }
        }
    }
    Ok(out)
}

/// Pearson correlation; 0 when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a[..n].iter().zip(&b[..n]) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

pub fn sim_activation<T: Scalar>(m: &Model<T>, target: &Model<T>, l: usize, probe: &[Tensor<T>]) -> Result<CostMatrix> {
    check_pair(m, target)?;
    if probe.is_empty() {
        return Err(Error::Invalid("activation similarity needs probe records".into()));
    }
    distance_matrix(SimKind::Activation, &unit_series(m, l, probe)?, &unit_series(target, l, probe)?)
}

pub fn sim_correlation<T: Scalar>(m: &Model<T>, target: &Model<T>, l: usize, probe: &[Tensor<T>]) -> Result<CostMatrix> {
    check_pair(m, target)?;
    if probe.len() < 2 {
        return Err(Error::Invalid("correlation similarity needs at least 2 probe records".into()));
    }
    correlation_matrix(&unit_series(m, l, probe)?, &unit_series(target, l, probe)?)
}

fn correlation_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<CostMatrix> {
    let n = a.len();
    let mut data = Vec::with_capacity(n * n);
    for x in a {
        for y in b {
            data.push(-pearson(x, y));
        }
    }
    CostMatrix::new(SimKind::Correlation, n, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Weight,
    Activation,
    Correlation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    BottomUp,
    TopDown,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Weight => "weight",
            Method::Activation => "activation",
            Method::Correlation => "correlation",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight" => Ok(Method::Weight),
            "activation" => Ok(Method::Activation),
            "correlation" => Ok(Method::Correlation),
            _ => Err(Error::Config(format!("unknown re-alignment method {s:?}"))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::BottomUp => "bottom-up",
            Direction::TopDown => "top-down",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bottom-up" | "bottom_up" => Ok(Direction::BottomUp),
            "top-down" | "top_down" => Ok(Direction::TopDown),
            _ => Err(Error::Config(format!("unknown re-alignment direction {s:?}"))),
        }
    }
}

/// Units whose cost rows (or columns) agree within the assignment tie
/// tolerance, such as dead ReLU units under activation matching, are
/// interchangeable in an optimal assignment. Within each such group the
/// assignment is re-solved on the `secondary` costs.
fn break_ties(cost: &CostMatrix, pi: Permutation, secondary: impl FnOnce() -> Result<CostMatrix>) -> Result<Permutation> {
    let n = cost.size();
    let tol = assignment::tie_tolerance(n, cost.data());
    let close = |a: f64, b: f64| (a - b).abs() <= tol;
    let row_groups = identical_groups(n, |a, b| (0..n).all(|j| close(cost.get(a, j), cost.get(b, j))));
    let col_groups = identical_groups(n, |a, b| (0..n).all(|i| close(cost.get(i, a), cost.get(i, b))));
    if row_groups.is_empty() && col_groups.is_empty() {
        return Ok(pi);
    }
    let sec = secondary()?;
    let mut mapping = pi.mapping().to_vec();
    for rows in &row_groups {
        let cols: Vec<usize> = rows.iter().map(|&i| mapping[i]).collect();
        let sub: Vec<f64> = rows.iter().flat_map(|&i| cols.iter().map(move |&j| (i, j))).map(|(i, j)| sec.get(i, j)).collect();
        for (k, c) in assignment::solve(rows.len(), &sub)?.into_iter().enumerate() {
            mapping[rows[k]] = cols[c];
        }
    }
    for cols in &col_groups {
        let mut row_of: Vec<usize> = vec![0; n];
        for (i, &j) in mapping.iter().enumerate() {
            row_of[j] = i;
        }
        let rows: Vec<usize> = cols.iter().map(|&j| row_of[j]).collect();
        let sub: Vec<f64> = rows.iter().flat_map(|&i| cols.iter().map(move |&j| (i, j))).map(|(i, j)| sec.get(i, j)).collect();
        for (k, c) in assignment::solve(rows.len(), &sub)?.into_iter().enumerate() {
            mapping[rows[k]] = cols[c];
        }
    }
    Permutation::new(mapping)
}

/// Groups of size > 1 of indices `same` as the group's first index, each in
/// ascending order.
fn identical_groups(n: usize, same: impl Fn(usize, usize) -> bool) -> Vec<Vec<usize>> {
    let mut seen = vec![false; n];
    let mut groups = Vec::new();
    for a in 0..n {
        if seen[a] {
            continue;
        }
        let g: Vec<usize> = (a..n).filter(|&b| !seen[b] && same(a, b)).collect();
        for &b in &g {
            seen[b] = true;
        }
        if g.len() > 1 {
            groups.push(g);
        }
    }
    groups
}

/// Per-hidden-layer permutations (`perms[l]` for `l = 0..L-1`) chosen by a
/// re-alignment sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RealignPlan {
    pub method: Method,
    pub direction: Direction,
    pub perms: Vec<Permutation>,
    /// Assignment cost and identity cost per layer.
    pub costs: Vec<(f64, f64)>,
}

impl RealignPlan {
    pub fn is_identity(&self) -> bool {
        self.perms.iter().all(Permutation::is_identity)
    }

    /// The plan as transforms in the order the sweep applied them.
    pub fn op_log(&self) -> SymmetryOpLog {
        let mut layers: Vec<usize> = (0..self.perms.len()).collect();
        if self.direction == Direction::TopDown {
            layers.reverse();
        }
        SymmetryOpLog {
            ops: layers
                .into_iter()
                .map(|l| SymmetryOp::Permute {
                    layer: l,
                    perm: self.perms[l].clone(),
                })
                .collect(),
        }
    }
}

/// Re-aligns `m` onto `target` layer by layer. Each hidden layer is
/// permuted once, after its neighbour on the side the sweep comes from.
pub fn realign<T: Scalar>(
    m: &Model<T>,
    target: &Model<T>,
    method: Method,
    direction: Direction,
    probe: &[Tensor<T>],
) -> Result<(Model<T>, RealignPlan)> {
    check_pair(m, target)?;
    let hidden = m.depth() - 1;
    let (series_m, series_t) = match method {
        Method::Weight => (None, None),
        _ => {
            if probe.len() < 2 {
                return Err(Error::Invalid("activation-based re-alignment needs at least 2 probe records".into()));
            }
            (Some(all_unit_series(m, probe)?), Some(all_unit_series(target, probe)?))
        }
    };
    let order: Vec<usize> = match direction {
        Direction::BottomUp => (0..hidden).collect(),
        Direction::TopDown => (0..hidden).rev().collect(),
    };
    let mut current = m.clone();
    let mut perms = vec![None; hidden];
    let mut costs = vec![(0.0, 0.0); hidden];
    for l in order {
        // unit activations of layer l are untouched by permutations of other
        // layers, so the series from the unmodified model stay valid
        let cost = match method {
            Method::Weight => {
                let dir = match direction {
                    Direction::BottomUp => WeightDirection::Input,
                    Direction::TopDown => WeightDirection::Output,
                };
                sim_weight(&current, target, l, dir)?
            }
            Method::Activation => distance_matrix(
                SimKind::Activation,
                &series_m.as_ref().expect("series")[l],
                &series_t.as_ref().expect("series")[l],
            )?,
            Method::Correlation => correlation_matrix(&series_m.as_ref().expect("series")[l], &series_t.as_ref().expect("series")[l])?,
        };
        let mut pi = hungarian(&cost)?;
        if method != Method::Weight {
            let dir = match direction {
                Direction::BottomUp => WeightDirection::Input,
                Direction::TopDown => WeightDirection::Output,
            };
            pi = break_ties(&cost, pi, || sim_weight(&current, target, l, dir))?;
        }
        costs[l] = (cost.assignment_cost(&pi), cost.identity_cost());
        current = permute_layer(&current, l, &pi)?;
        perms[l] = Some(pi);
    }
    let plan = RealignPlan {
        method,
        direction,
        perms: perms.into_iter().map(|p| p.expect("every hidden layer visited")).collect(),
        costs,
    };
    Ok((current, plan))
}

pub fn realign_bottom_up<T: Scalar>(
    m: &Model<T>,
    target: &Model<T>,
    method: Method,
    probe: &[Tensor<T>],
) -> Result<(Model<T>, RealignPlan)> {
    realign(m, target, method, Direction::BottomUp, probe)
}

pub fn realign_top_down<T: Scalar>(
    m: &Model<T>,
    target: &Model<T>,
    method: Method,
    probe: &[Tensor<T>],
) -> Result<(Model<T>, RealignPlan)> {
    realign(m, target, method, Direction::TopDown, probe)
}

/// Reorders every hidden layer, bottom-up, by ascending sum of incoming
/// weights (bias included when `include_bias`). Ties keep the original
/// order. Sums are order-independent so the result is a canonical form.
pub fn weight_sort_canonical_with<T: Scalar>(m: &Model<T>, include_bias: bool) -> Result<(Model<T>, Vec<Permutation>)> {
    let mut current = m.clone();
    let mut perms = Vec::new();
    for l in 0..m.depth() - 1 {
        let p = current.param(l);
        let keys: Vec<f64> = (0..p.units())
            .map(|d| {
                let mut terms: Vec<f64> = p.unit_weights(d).iter().map(|w| w.as_f64()).collect();
                if include_bias {
                    terms.push(p.bias.data()[d].as_f64());
                }
                sorted_sum(&mut terms)
            })
            .collect();
        let mut order: Vec<usize> = (0..keys.len()).collect();
        order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
        let mut mapping = vec![0; order.len()];
        for (rank, &d) in order.iter().enumerate() {
            mapping[d] = rank;
        }
        let pi = Permutation::new(mapping)?;
        current = permute_layer(&current, l, &pi)?;
        perms.push(pi);
    }
    Ok((current, perms))
}

pub fn weight_sort_canonical<T: Scalar>(m: &Model<T>) -> Result<Model<T>> {
    Ok(weight_sort_canonical_with(m, true)?.0)
}

/// Initialises a shadow model, aligns it top-down by outgoing weights onto
/// the target, then trains it.
pub fn realign_after_init<T: Scalar>(
    target: &Model<T>,
    data: &LabeledDataset<T>,
    val: &LabeledDataset<T>,
    seeds: &SeedBundle,
    cfg: &TrainConfig,
) -> Result<(TrainOutcome<T>, RealignPlan)> {
    let init: Model<T> = init_weights(&target.arch_spec(), seeds.weight_init)?;
    let (aligned, plan) = realign(&init, target, Method::Weight, Direction::TopDown, &[])?;
    Ok((train_from(aligned, data, val, seeds, cfg)?, plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchSpec;
    use crate::rng::Stream;
    use crate::symmetry::random_permutation;

    fn mlp(seed: u64) -> Model<f64> {
        init_weights(&ArchSpec::mlp("m", 6, &[8, 5], 3, 0.0), seed).unwrap()
    }

    fn probe(n: usize, dim: usize, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = Stream::new(seed);
        (0..n).map(|_| Tensor::from_vec((0..dim).map(|_| rng.normal()).collect())).collect()
    }

    #[test]
    fn identical_models_give_identity() {
        let m = mlp(1);
        let c = sim_weight(&m, &m, 0, WeightDirection::Input).unwrap();
        assert!((0..8).all(|i| c.get(i, i) == 0.0));
        assert!(hungarian(&c).unwrap().is_identity());
        let (out, plan) = realign_top_down(&m, &m, Method::Weight, &[]).unwrap();
        assert!(plan.is_identity());
        assert!(out.bit_eq(&m));
    }

    #[test]
    fn hand_two_neuron_swap() {
        let spec = ArchSpec::parse("input 2\ndense 2 relu\ndense 2 softmax").unwrap();
        let mut a: Model<f64> = Model::zeros(&spec).unwrap();
        let mut b = a.clone();
        a.param_mut(0).weight.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        b.param_mut(0).weight.data_mut().copy_from_slice(&[0.0, 1.0, 1.0, 0.0]);
        let c = sim_weight(&a, &b, 0, WeightDirection::Input).unwrap();
        assert_eq!(c.get(0, 1), 0.0);
        assert_eq!(c.get(1, 0), 0.0);
        assert_eq!(hungarian(&c).unwrap().mapping(), &[1, 0]);
    }

    #[test]
    fn planted_permutations_are_inverted() {
        let target = mlp(3);
        let mut rng = Stream::new(4);
        let planted: Vec<Permutation> = (0..2).map(|l| random_permutation(target.param(l).units(), &mut rng)).collect();
        let mut m = target.clone();
        for (l, p) in planted.iter().enumerate() {
            m = permute_layer(&m, l, p).unwrap();
        }
        let xs = probe(50, 6, 5);
        for method in [Method::Weight, Method::Activation, Method::Correlation] {
            for dir in [Direction::BottomUp, Direction::TopDown] {
                let (out, plan) = realign(&m, &target, method, dir, &xs).unwrap();
                assert!(out.bit_eq(&target), "{method} {dir}");
                for (l, p) in planted.iter().enumerate() {
                    assert_eq!(plan.perms[l], p.inverse());
                }
                assert!(plan.op_log().replay(&m).unwrap().bit_eq(&out));
            }
        }
    }

    #[test]
    fn pearson_properties() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
        let a = [0.3, -1.0, 2.0, 0.7];
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!((pearson(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weight_sort_is_canonical() {
        let m = mlp(8);
        let canon = weight_sort_canonical(&m).unwrap();
        assert!(weight_sort_canonical(&canon).unwrap().bit_eq(&canon));
        let p = permute_layer(&m, 0, &random_permutation(8, &mut Stream::new(2))).unwrap();
        let p = permute_layer(&p, 1, &random_permutation(5, &mut Stream::new(3))).unwrap();
        assert!(weight_sort_canonical(&p).unwrap().bit_eq(&canon));
        let xs = probe(20, 6, 9);
        for x in &xs {
            assert!(canon.predict(x).unwrap().max_abs_diff(&m.predict(x).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn weight_sort_ties_keep_order() {
        let spec = ArchSpec::parse("input 2\ndense 3 relu\ndense 2 softmax").unwrap();
        let mut m: Model<f64> = Model::zeros(&spec).unwrap();
        m.param_mut(0).weight.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0, -1.0, 0.0]);
        let (_, perms) = weight_sort_canonical_with(&m, true).unwrap();
        assert_eq!(perms[0].mapping(), &[1, 2, 0]);
    }

    #[test]
    fn architecture_mismatch() {
        let a = mlp(1);
        let b: Model<f64> = init_weights(&ArchSpec::mlp("m", 6, &[7, 5], 3, 0.0), 1).unwrap();
        assert!(realign_bottom_up(&a, &b, Method::Weight, &[]).is_err());
    }
}
