use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::scalar::Scalar;

use super::{flip_signs, permute_layer, rescale_neurons, Permutation};

#[derive(Debug, Clone, PartialEq)]
pub enum SymmetryOp {
    Permute { layer: usize, perm: Permutation },
    Rescale { layer: usize, factors: Vec<f64> },
    FlipSigns { layer: usize, signs: Vec<i8> },
}

impl SymmetryOp {
    pub fn apply<T: Scalar>(&self, model: &Model<T>) -> Result<Model<T>> {
        match self {
            SymmetryOp::Permute { layer, perm } => permute_layer(model, *layer, perm),
            SymmetryOp::Rescale { layer, factors } => rescale_neurons(model, *layer, factors),
            SymmetryOp::FlipSigns { layer, signs } => flip_signs(model, *layer, signs),
        }
    }
}

/// Ordered record of applied transforms; replaying it on the original model
/// reproduces the transformed model bit-exactly.
///
/// Text form, one op per line:
///
/// ```text
/// permute layer=0 map=2,0,1
/// rescale layer=1 factors=0.5,3,7
/// flip layer=0 signs=1,-1,1
/// ```
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SymmetryOpLog {
    pub ops: Vec<SymmetryOp>,
}

impl SymmetryOpLog {
    pub fn push(&mut self, op: SymmetryOp) {
        self.ops.push(op);
    }

    pub fn replay<T: Scalar>(&self, model: &Model<T>) -> Result<Model<T>> {
        let mut m = model.clone();
        for op in &self.ops {
            m = op.apply(&m)?;
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for op in &self.ops {
            let _ = match op {
                SymmetryOp::Permute { layer, perm } => writeln!(s, "permute layer={layer} map={perm}"),
                SymmetryOp::Rescale { layer, factors } => writeln!(s, "rescale layer={layer} factors={}", join(factors)),
                SymmetryOp::FlipSigns { layer, signs } => writeln!(s, "flip layer={layer} signs={}", join(signs)),
            };
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut log = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Config(format!("op log line {}: {m}", n + 1));
            let mut parts = line.split_whitespace();
            let kind = parts.next().unwrap_or_default();
            let mut layer = None;
            let mut values = None;
            for kv in parts {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad("expected key=value"))?;
                match k {
                    "layer" => layer = Some(v.parse::<usize>().map_err(|_| bad("bad layer index"))?),
                    "map" | "factors" | "signs" => values = Some((k, v)),
                    _ => return Err(bad(&format!("unknown key {k}"))),
                }
            }
            let layer = layer.ok_or_else(|| bad("missing layer"))?;
            let (key, v) = values.ok_or_else(|| bad("missing values"))?;
            let op = match (kind, key) {
                ("permute", "map") => SymmetryOp::Permute {
                    layer,
                    perm: Permutation::new(split(v).map_err(|_| bad("bad map"))?)?,
                },
                ("rescale", "factors") => SymmetryOp::Rescale {
                    layer,
                    factors: split(v).map_err(|_| bad("bad factor"))?,
                },
                ("flip", "signs") => SymmetryOp::FlipSigns {
                    layer,
                    signs: split(v).map_err(|_| bad("bad sign"))?,
                },
                _ => return Err(bad(&format!("unknown op {kind} with {key}"))),
            };
            log.push(op);
        }
        Ok(log)
    }
}

fn join<X: std::fmt::Display>(v: &[X]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn split<X: std::str::FromStr>(v: &str) -> std::result::Result<Vec<X>, X::Err> {
    v.split(',').map(|s| s.trim().parse()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchSpec;
    use crate::train::init_weights;

    #[test]
    fn text_round_trip_and_replay() {
        let m: Model<f32> = init_weights(&ArchSpec::mlp("m", 5, &[4, 3], 2, 0.0), 3).unwrap();
        let mut log = SymmetryOpLog::default();
        log.push(SymmetryOp::Permute {
            layer: 0,
            perm: Permutation::new(vec![3, 1, 0, 2]).unwrap(),
        });
        log.push(SymmetryOp::Rescale {
            layer: 1,
            factors: vec![0.1, 3.0, 1.0 / 3.0],
        });
        let parsed = SymmetryOpLog::parse(&log.to_text()).unwrap();
        assert_eq!(parsed, log);
        assert!(parsed.replay(&m).unwrap().bit_eq(&log.replay(&m).unwrap()));
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = SymmetryOpLog::parse("permute layer=0 map=0,1\nrotate layer=1 map=0").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
