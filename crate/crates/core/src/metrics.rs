//! Misalignment scores between a target model and another model of the same
//! architecture, per parameterised layer.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::{DropoutMode, Model};
use crate::realign::{pearson, unit_series};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::symmetry::random_permutation;
use crate::tensor::Tensor;

fn same_layer<T: Scalar>(a: &Model<T>, b: &Model<T>, l: usize) -> Result<()> {
    a.check_layer(l)?;
    b.check_layer(l)?;
    let (p, q) = (a.param(l), b.param(l));
    if p.weight.shape() != q.weight.shape() {
        return Err(Error::shape(&format!("weights of layer {l}"), p.weight.shape(), q.weight.shape()));
    }
    Ok(())
}

/// Euclidean distance between the stacked weights and biases of layer `l`.
pub fn wms<T: Scalar>(target: &Model<T>, m: &Model<T>, l: usize) -> Result<f64> {
    same_layer(target, m, l)?;
    let (p, q) = (target.param(l), m.param(l));
    Ok((p.weight.sq_dist(&q.weight)? + p.bias.sq_dist(&q.bias)?).sqrt())
}

/// Mean over probe records of the distance between the layer-`l` outputs.
pub fn ams<T: Scalar>(target: &Model<T>, m: &Model<T>, l: usize, probe: &[Tensor<T>]) -> Result<f64> {
    same_layer(target, m, l)?;
    if probe.is_empty() {
        return Err(Error::Invalid("activation score needs probe records".into()));
    }
    let mut total = 0.0;
    for x in probe {
        let a = target.forward(x, DropoutMode::Off)?;
        let b = m.forward(x, DropoutMode::Off)?;
        total += a.activation(l).sq_dist(b.activation(l))?.sqrt();
    }
    Ok(total / probe.len() as f64)
}

/// Mean Pearson correlation between same-position units across probe
/// records. Conv layers use `pixels` sampled map positions per filter
/// (all positions if the map is smaller). Returns the score and the flat
/// pixel indices used.
pub fn cba<T: Scalar>(
    target: &Model<T>,
    m: &Model<T>,
    l: usize,
    probe: &[Tensor<T>],
    pixels: usize,
    rng: &mut Stream,
) -> Result<(f64, Vec<usize>)> {
    same_layer(target, m, l)?;
    if probe.len() < 2 {
        return Err(Error::Invalid("correlation score needs at least 2 probe records".into()));
    }
    let a = unit_series(target, l, probe)?;
    let b = unit_series(m, l, probe)?;
    let r = probe.len();
    let plane = a[0].len() / r;
    let chosen: Vec<usize> = if plane == 1 {
        vec![0]
    } else {
        let mut s = rng.sample_without_replacement(plane, pixels.min(plane));
        s.sort_unstable();
        s
    };
    let mut sum = 0.0;
    let mut count = 0usize;
    for (sa, sb) in a.iter().zip(&b) {
        for &px in &chosen {
            let xa: Vec<f64> = (0..r).map(|k| sa[k * plane + px]).collect();
            let xb: Vec<f64> = (0..r).map(|k| sb[k * plane + px]).collect();
            sum += unit_correlation(&xa, &xb);
            count += 1;
        }
    }
    Ok((sum / count as f64, if plane == 1 { Vec::new() } else { chosen }))
}

/// Pearson correlation, except that two constant series (e.g. two dead
/// ReLU units) count as perfectly correlated.
fn unit_correlation(a: &[f64], b: &[f64]) -> f64 {
    let constant = |s: &[f64]| s.iter().all(|v| *v == s[0]);
    if constant(a) && constant(b) {
        1.0
    } else {
        pearson(a, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baseline {
    pub mean: f64,
    pub sd: f64,
    pub trials: usize,
}

/// WMS between layer `l` of the target and the same layer with its rows
/// (units) randomly permuted, over independent permutations. Only the layer
/// itself is touched, so the output layer is allowed.
pub fn random_perm_baseline<T: Scalar>(target: &Model<T>, l: usize, trials: usize, rng: &mut Stream) -> Result<Baseline> {
    target.check_layer(l)?;
    if trials == 0 {
        return Err(Error::Invalid("baseline needs at least one trial".into()));
    }
    let p = target.param(l);
    let units = p.units();
    let mut values = Vec::with_capacity(trials);
    for _ in 0..trials {
        let pi = random_permutation(units, rng);
        let mut sq = 0.0;
        for d in 0..units {
            let j = pi.dest(d);
            let (src, dst) = (p.unit_weights(d), p.unit_weights(j));
            sq += src.iter().zip(dst).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>();
            sq += (p.bias.data()[d].as_f64() - p.bias.data()[j].as_f64()).powi(2);
        }
        values.push(sq.sqrt());
    }
    let mean = values.iter().sum::<f64>() / trials as f64;
    let sd = if trials > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Baseline { mean, sd, trials })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMisalignment {
    pub layer: usize,
    pub wms: f64,
    pub ams: Option<f64>,
    pub cba: Option<f64>,
    pub baseline: Option<Baseline>,
    /// Map positions sampled for the correlation score (conv layers).
    pub pixels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MisalignmentReport {
    pub model_id: String,
    pub probe_ids: Vec<u64>,
    pub pixels_requested: usize,
    pub layers: Vec<LayerMisalignment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub pixels: usize,
    pub baseline_trials: usize,
    pub with_activations: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            pixels: 50,
            baseline_trials: 10,
            with_activations: true,
        }
    }
}

impl MisalignmentReport {
    /// All scores for every parameterised layer.
    pub fn compute<T: Scalar>(
        model_id: &str,
        target: &Model<T>,
        m: &Model<T>,
        probe: &[Tensor<T>],
        probe_ids: &[u64],
        opts: &ReportOptions,
        rng: &mut Stream,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(target.depth());
        for l in 0..target.depth() {
            let (ams_v, cba_v, pixels) = if opts.with_activations {
                let (c, px) = cba(target, m, l, probe, opts.pixels, rng)?;
                (Some(ams(target, m, l, probe)?), Some(c), px)
            } else {
                (None, None, Vec::new())
            };
            let baseline = if opts.baseline_trials > 0 {
                Some(random_perm_baseline(target, l, opts.baseline_trials, rng)?)
            } else {
                None
            };
            layers.push(LayerMisalignment {
                layer: l,
                wms: wms(target, m, l)?,
                ams: ams_v,
                cba: cba_v,
                baseline,
                pixels,
            });
        }
        Ok(Self {
            model_id: model_id.to_string(),
            probe_ids: probe_ids.to_vec(),
            pixels_requested: opts.pixels,
            layers,
        })
    }

    pub const CSV_HEADER: &'static str = "model_id,layer,metric,value,baseline";

    /// Rows `model_id,layer,metric,value,baseline`; the baseline column holds
    /// the random-permutation mean on WMS rows only.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            let base = l.baseline.map(|b| format!("{:.6}", b.mean)).unwrap_or_default();
            let _ = writeln!(s, "{},{},wms,{:.6},{}", self.model_id, l.layer, l.wms, base);
            if let Some(a) = l.ams {
                let _ = writeln!(s, "{},{},ams,{:.6},", self.model_id, l.layer, a);
            }
            if let Some(c) = l.cba {
                let _ = writeln!(s, "{},{},cba,{:.6},", self.model_id, l.layer, c);
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", Self::CSV_HEADER, self.csv_rows())
    }

    /// Probe record ids and sampled pixels, for reproducing the scores.
    pub fn probe_descriptor(&self) -> String {
        let ids: Vec<String> = self.probe_ids.iter().map(|i| i.to_string()).collect();
        let mut s = format!("records = {}\npixels = {}\nrecord_ids = {}\n", self.probe_ids.len(), self.pixels_requested, ids.join(","));
        for l in &self.layers {
            if !l.pixels.is_empty() {
                let px: Vec<String> = l.pixels.iter().map(|p| p.to_string()).collect();
                let _ = writeln!(s, "layer{}_pixels = {}", l.layer, px.join(","));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchSpec;
    use crate::symmetry::{permute_layer, Permutation};
    use crate::train::init_weights;

    fn probe(n: usize, dim: usize) -> Vec<Tensor<f64>> {
        let mut rng = Stream::new(99);
        (0..n).map(|_| Tensor::from_vec((0..dim).map(|_| rng.normal()).collect())).collect()
    }

    #[test]
    fn hand_wms() {
        let spec = ArchSpec::parse("input 2\ndense 2 softmax").unwrap();
        let mut t: Model<f64> = Model::zeros(&spec).unwrap();
        let m = t.clone();
        t.param_mut(0).weight.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        assert!((wms(&t, &m, 0).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(wms(&t, &m, 0).unwrap(), wms(&m, &t, 0).unwrap());
    }

    #[test]
    fn hand_ams() {
        // identity first layer: activations equal the input
        let spec = ArchSpec::parse("input 2\ndense 2 linear\ndense 2 softmax").unwrap();
        let mut a: Model<f64> = Model::zeros(&spec).unwrap();
        a.param_mut(0).weight.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let mut b = a.clone();
        b.param_mut(0).weight.data_mut().copy_from_slice(&[0.0, 1.0, 1.0, 0.0]);
        let x = [Tensor::from_vec(vec![1.0, 0.0])];
        assert!((ams(&a, &b, 0, &x).unwrap() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn permuted_pair_signature() {
        let t: Model<f64> = init_weights(&ArchSpec::mlp("m", 4, &[6], 3, 0.0), 1).unwrap();
        let m = permute_layer(&t, 0, &Permutation::new(vec![1, 2, 3, 4, 5, 0]).unwrap()).unwrap();
        let xs = probe(30, 4);
        assert!(wms(&t, &m, 0).unwrap() > 0.0);
        assert!(ams(&t, &m, 1, &xs).unwrap() < 1e-12);
        assert_eq!(wms(&t, &t, 0).unwrap(), 0.0);
        let (c, _) = cba(&t, &t, 0, &xs, 50, &mut Stream::new(1)).unwrap();
        assert!((c - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dead_units_agree_with_themselves() {
        let mut t: Model<f64> = init_weights(&ArchSpec::mlp("m", 4, &[5], 3, 0.0), 2).unwrap();
        let p = t.param_mut(0);
        for w in &mut p.weight.data_mut()[..4] {
            *w = 0.0;
        }
        p.bias.data_mut()[0] = -1.0;
        let xs = probe(20, 4);
        let (c, _) = cba(&t, &t, 0, &xs, 50, &mut Stream::new(1)).unwrap();
        assert!((c - 1.0).abs() < 1e-9, "{c}");
        assert_eq!(unit_correlation(&[0.0; 3], &[1.0, 2.0, 3.0]), 0.0);
    }

    #[test]
    fn baseline_degenerate_layers() {
        let t: Model<f32> = init_weights(&ArchSpec::mlp("m", 4, &[1], 3, 0.0), 1).unwrap();
        assert_eq!(random_perm_baseline(&t, 0, 5, &mut Stream::new(1)).unwrap().mean, 0.0);
        let mut d: Model<f32> = Model::zeros(&ArchSpec::mlp("m", 2, &[3], 2, 0.0)).unwrap();
        for w in d.param_mut(0).weight.data_mut() {
            *w = 0.5;
        }
        assert_eq!(random_perm_baseline(&d, 0, 5, &mut Stream::new(1)).unwrap().mean, 0.0);
        let b = random_perm_baseline(&t, 1, 1, &mut Stream::new(1)).unwrap();
        assert_eq!(b.sd, 0.0);
    }

    #[test]
    fn csv_layout() {
        let t: Model<f64> = init_weights(&ArchSpec::mlp("m", 4, &[3], 2, 0.0), 1).unwrap();
        let xs = probe(5, 4);
        let r = MisalignmentReport::compute("s1", &t, &t, &xs, &[1, 2, 3, 4, 5], &ReportOptions::default(), &mut Stream::new(2)).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("model_id,layer,metric,value,baseline\ns1,0,wms,0.000000,"));
        assert_eq!(csv.lines().count(), 1 + 2 * 3);
    }
}
