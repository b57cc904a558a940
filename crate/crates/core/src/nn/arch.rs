//! Textual architecture descriptors.
//!
//! One directive per line, `#` starts a comment:
//!
//! ```text
//! arch cnn-mini
//! input 1x16x16
//! conv2d 8 k=5 stride=1 pad=0 relu
//! maxpool 2 stride=2
//! flatten
//! dense 64 relu
//! dropout 0.2
//! dense 4 softmax
//! ```
//!
//! The same text is embedded in checkpoints, so `Display` and `parse` are
//! exact inverses for every descriptor that `parse` accepts.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    None,
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::None => "none",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Softmax => "softmax",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" | "linear" => Activation::None,
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            "softmax" => Activation::Softmax,
            other => return Err(Error::Architecture(format!("unknown activation `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense {
        units: usize,
        activation: Activation,
    },
    Conv2d {
        filters: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        activation: Activation,
    },
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Dropout {
        p: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub arch_id: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    /// Fully connected network `input -> hidden... -> classes`, ReLU hidden
    /// units, optional dropout after every hidden layer, softmax head.
    pub fn mlp(arch_id: &str, input: usize, hidden: &[usize], classes: usize, dropout: f64) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(LayerSpec::Dense {
                units: h,
                activation: Activation::Relu,
            });
            if dropout > 0.0 {
                layers.push(LayerSpec::Dropout { p: dropout });
            }
        }
        layers.push(LayerSpec::Dense {
            units: classes,
            activation: Activation::Softmax,
        });
        Self {
            arch_id: arch_id.to_string(),
            input_shape: vec![input],
            layers,
        }
    }

    /// Two conv blocks (5x5, ReLU, 2x2 max-pool) and two FC layers with
    /// dropout after the first FC layer.
    pub fn cnn(
        arch_id: &str,
        input: [usize; 3],
        filters: [usize; 2],
        hidden: usize,
        classes: usize,
        dropout: f64,
    ) -> Self {
        let conv = |f| LayerSpec::Conv2d {
            filters: f,
            kernel: (5, 5),
            stride: 1,
            padding: 0,
            activation: Activation::Relu,
        };
        let pool = LayerSpec::MaxPool2d { kernel: 2, stride: 2 };
        let mut layers = vec![conv(filters[0]), pool.clone(), conv(filters[1]), pool, LayerSpec::Flatten];
        layers.push(LayerSpec::Dense {
            units: hidden,
            activation: Activation::Relu,
        });
        if dropout > 0.0 {
            layers.push(LayerSpec::Dropout { p: dropout });
        }
        layers.push(LayerSpec::Dense {
            units: classes,
            activation: Activation::Softmax,
        });
        Self {
            arch_id: arch_id.to_string(),
            input_shape: input.to_vec(),
            layers,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut arch_id = None;
        let mut input_shape = None;
        let mut layers = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| Error::Architecture(format!("line {}: {msg}: `{line}`", lineno + 1));
            let mut words = line.split_whitespace();
            let head = words.next().unwrap_or_default();
            let rest: Vec<&str> = words.collect();
            match head {
                "arch" => arch_id = Some(rest.first().ok_or_else(|| err("missing id"))?.to_string()),
                "input" => {
                    let dims = rest
                        .first()
                        .ok_or_else(|| err("missing shape"))?
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| err("bad shape"))?;
                    input_shape = Some(dims);
                }
                "dense" => {
                    let units = parse_count(rest.first(), &err)?;
                    let activation = parse_activation(rest.get(1), &err)?;
                    layers.push(LayerSpec::Dense { units, activation });
                }
                "conv2d" => {
                    let filters = parse_count(rest.first(), &err)?;
                    let mut kernel = (3, 3);
                    let mut stride = 1;
                    let mut padding = 0;
                    let mut activation = Activation::None;
                    for w in &rest[1..] {
                        if let Some(v) = w.strip_prefix("k=") {
                            kernel = match v.split_once('x') {
                                Some((a, b)) => (
                                    a.parse().map_err(|_| err("bad kernel"))?,
                                    b.parse().map_err(|_| err("bad kernel"))?,
                                ),
                                None => {
                                    let k = v.parse().map_err(|_| err("bad kernel"))?;
                                    (k, k)
                                }
                            };
                        } else if let Some(v) = w.strip_prefix("stride=") {
                            stride = v.parse().map_err(|_| err("bad stride"))?;
                        } else if let Some(v) = w.strip_prefix("pad=") {
                            padding = v.parse().map_err(|_| err("bad padding"))?;
                        } else {
                            activation = w.parse()?;
                        }
                    }
                    layers.push(LayerSpec::Conv2d {
                        filters,
                        kernel,
                        stride,
                        padding,
                        activation,
                    });
                }
                "maxpool" => {
                    let kernel = parse_count(rest.first(), &err)?;
                    let mut stride = kernel;
                    for w in &rest[1..] {
                        if let Some(v) = w.strip_prefix("stride=") {
                            stride = v.parse().map_err(|_| err("bad stride"))?;
                        } else {
                            return Err(err("unknown maxpool option"));
                        }
                    }
                    layers.push(LayerSpec::MaxPool2d { kernel, stride });
                }
                "flatten" => layers.push(LayerSpec::Flatten),
                "dropout" => {
                    let p: f64 = rest
                        .first()
                        .ok_or_else(|| err("missing probability"))?
                        .parse()
                        .map_err(|_| err("bad probability"))?;
                    layers.push(LayerSpec::Dropout { p });
                }
                _ => return Err(err("unknown directive")),
            }
        }
        Ok(Self {
            arch_id: arch_id.unwrap_or_else(|| "custom".to_string()),
            input_shape: input_shape.ok_or_else(|| Error::Architecture("missing `input` line".into()))?,
            layers,
        })
    }
}

fn parse_count(w: Option<&&str>, err: &dyn Fn(&str) -> Error) -> Result<usize> {
    w.ok_or_else(|| err("missing size"))?
        .parse()
        .map_err(|_| err("bad size"))
}

fn parse_activation(w: Option<&&str>, _err: &dyn Fn(&str) -> Error) -> Result<Activation> {
    match w {
        Some(w) => w.parse(),
        None => Ok(Activation::None),
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "arch {}", self.arch_id)?;
        let dims: Vec<String> = self.input_shape.iter().map(|d| d.to_string()).collect();
        writeln!(f, "input {}", dims.join("x"))?;
        for layer in &self.layers {
            match layer {
                LayerSpec::Dense { units, activation } => writeln!(f, "dense {units} {}", activation.name())?,
                LayerSpec::Conv2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                    activation,
                } => writeln!(
                    f,
                    "conv2d {filters} k={}x{} stride={stride} pad={padding} {}",
                    kernel.0,
                    kernel.1,
                    activation.name()
                )?,
                LayerSpec::MaxPool2d { kernel, stride } => writeln!(f, "maxpool {kernel} stride={stride}")?,
                LayerSpec::Flatten => writeln!(f, "flatten")?,
                LayerSpec::Dropout { p } => writeln!(f, "dropout {p}")?,
            }
        }
        Ok(())
    }
}

impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_parse_round_trip() {
        let specs = [
            ArchSpec::mlp("mlp", 32, &[64, 32], 4, 0.2),
            ArchSpec::cnn("cnn", [1, 16, 16], [8, 16], 64, 4, 0.2),
        ];
        for spec in specs {
            let text = spec.to_string();
            assert_eq!(ArchSpec::parse(&text).unwrap(), spec, "{text}");
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(ArchSpec::parse("input 4\nfoo 3").is_err());
        assert!(ArchSpec::parse("dense 3 relu").is_err());
        assert!(ArchSpec::parse("input 4\ndense 3 swish").is_err());
    }
}
