//! Flat `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment, lists are comma
//! separated. Unknown and repeated keys are errors. See [`KEYS`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use shadowalign_core::attack::{FeatureSpec, McConfig};
use shadowalign_core::data::{Overlap, PartitionSpec, SyntheticKind, SyntheticSpec};
use shadowalign_core::nn::ArchSpec;
use shadowalign_core::realign::{Direction, Method};
use shadowalign_core::train::TrainConfig;

use crate::error::{HarnessError, Result};
use crate::scenario::Scenario;

/// Every accepted key with its default and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed; every other seed is derived from it"),
    ("repetitions", "5", "independent target models per scenario or cause condition"),
    ("data", "blobs", "blobs | images | csv:<path> | tensor:<path>"),
    ("classes", "4", "synthetic classes"),
    ("dim", "32", "blob dimension"),
    ("side", "16", "image side length"),
    ("per_class", "300", "synthetic records per class"),
    ("separation", "3.0", "class-centre norm or template amplitude"),
    ("label_noise", "0.0", "probability of a uniformly resampled label"),
    ("arch", "mlp", "mlp | cnn | file:<path>"),
    ("hidden", "64,32", "mlp hidden widths"),
    ("filters", "8,16", "cnn filters of the two conv layers"),
    ("fc", "64", "cnn hidden fully connected width"),
    ("dropout", "0.0", "dropout after hidden layers (mlp) or the first FC layer (cnn)"),
    ("n_val", "100", "size of each of V1 and V2"),
    ("n_aux", "400", "adversary pool size"),
    ("n_target", "400", "target pool size"),
    ("overlap", "disjoint", "disjoint | identical adversary and target pools"),
    ("n_members", "200", "training-set size of the target and every shadow"),
    ("shadows", "4", "shadow models K; one of them validates the meta-classifier"),
    ("mc_train", "200", "meta-classifier training records"),
    ("mc_val", "50", "meta-classifier validation records"),
    ("mc_test", "150", "meta-classifier test records"),
    ("batch_size", "64", "training mini-batch"),
    ("lr", "0.001", "initial learning rate"),
    ("lr_divisor", "2", "learning-rate divisor on a stalled validation accuracy"),
    ("patience", "5", "stalled epochs before the learning rate drops"),
    ("min_lr", "1e-5", "stop once the learning rate falls below this"),
    ("max_epochs", "100", "epoch cap"),
    ("features", "oa:1", "comma list of oa:<layer>, g:<layer>, ia, set, label (layers 0-based)"),
    ("scenarios", "S1,S3", "comma list of S1..S9"),
    ("method", "weight", "realign subcommand: weight | activation | correlation"),
    ("direction", "top-down", "realign subcommand: bottom-up | top-down"),
    ("probe_records", "500", "V2 records used for activation matching and metrics"),
    ("pixels", "50", "sampled pixels per conv layer for CBA"),
    ("baseline_trials", "10", "random permutations per layer for the WMS baseline"),
    ("weight_sort_bias", "true", "include the bias in weight-sorting keys"),
    ("validation_shadow", "first", "first | median (by epochs to the best model)"),
    ("mc_batch_size", "64", "meta-classifier mini-batch"),
    ("mc_lr", "0.001", "meta-classifier initial learning rate"),
    ("mc_min_lr", "1e-4", "meta-classifier stopping learning rate"),
    ("mc_max_epochs", "100", "meta-classifier epoch cap"),
    ("mc_grad_kernel", "100", "gradient embedder kernel and stride"),
    ("mc_grad_channels", "4", "gradient embedder output channels"),
    ("mc_dropout", "0.2", "gradient embedder dropout"),
    ("mc_hidden", "128", "embedder hidden width"),
    ("mc_embed", "64", "embedder output width"),
    ("fprs", "0.01", "false-positive rates at which TPR is reported"),
    ("maps", "", "report subcommand: layer whose activation maps are written as PGM"),
];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv(PathBuf),
    Tensor(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArchSource {
    Mlp { hidden: Vec<usize>, dropout: f64 },
    Cnn { filters: [usize; 2], fc: usize, dropout: f64 },
    File(PathBuf),
}

impl ArchSource {
    /// The architecture for records of `shape` and `classes` classes.
    pub fn build(&self, shape: &[usize], classes: usize) -> Result<ArchSpec> {
        match self {
            ArchSource::Mlp { hidden, dropout } => {
                let [dim] = shape else {
                    return Err(HarnessError::Config(format!("mlp needs vector records, got shape {shape:?}")));
                };
                Ok(ArchSpec::mlp("mlp", *dim, hidden, classes, *dropout))
            }
            ArchSource::Cnn { filters, fc, dropout } => {
                let &[c, h, w] = shape else {
                    return Err(HarnessError::Config(format!("cnn needs CxHxW records, got shape {shape:?}")));
                };
                Ok(ArchSpec::cnn("cnn", [c, h, w], *filters, *fc, classes, *dropout))
            }
            ArchSource::File(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| HarnessError::io(p, e))?;
                ArchSpec::parse(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationShadow {
    First,
    Median,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub repetitions: usize,
    pub data: DataSource,
    pub arch: ArchSource,
    pub partition: PartitionSpec,
    pub mc_train: usize,
    pub mc_val: usize,
    pub mc_test: usize,
    pub train: TrainConfig,
    pub features: FeatureSpec,
    pub scenarios: Vec<Scenario>,
    pub method: Method,
    pub direction: Direction,
    pub probe_records: usize,
    pub pixels: usize,
    pub baseline_trials: usize,
    pub weight_sort_bias: bool,
    pub validation_shadow: ValidationShadow,
    pub mc: McConfig,
    pub fprs: Vec<f64>,
    pub maps: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_map(BTreeMap::new(), Path::new(".")).expect("defaults are valid")
    }
}

/// Parses `key = value` lines into a map, rejecting malformed, unknown and
/// repeated keys.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.iter().any(|(key, _, _)| *key == k) {
            return Err(HarnessError::Config(format!("line {}: unknown key `{k}`", n + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(HarnessError::Config(format!("line {}: `{k}` set twice", n + 1)));
        }
    }
    Ok(map)
}

struct Fields {
    map: BTreeMap<String, String>,
}

impl Fields {
    fn raw(&self, key: &str) -> String {
        self.map.get(key).cloned().unwrap_or_else(|| {
            KEYS.iter()
                .find(|(k, _, _)| *k == key)
                .map(|(_, d, _)| d.to_string())
                .expect("known key")
        })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| HarnessError::Config(format!("`{key}`: cannot parse {raw:?}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.raw(key);
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| HarnessError::Config(format!("`{key}`: cannot parse {s:?}"))))
            .collect()
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        Self::from_map(parse_pairs(text)?, base)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Builds a config from explicit pairs; relative paths resolve
    /// against `base`.
    pub fn from_map(map: BTreeMap<String, String>, base: &Path) -> Result<Self> {
        let f = Fields { map };
        let path_of = |s: &str| {
            let p = PathBuf::from(s);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let data_kind = f.raw("data");
        let data = match data_kind.split_once(':') {
            Some(("csv", p)) => DataSource::Csv(path_of(p)),
            Some(("tensor", p)) => DataSource::Tensor(path_of(p)),
            None if data_kind == "blobs" || data_kind == "images" => DataSource::Synthetic(SyntheticSpec {
                kind: if data_kind == "blobs" {
                    SyntheticKind::Blobs { dim: f.get("dim")? }
                } else {
                    SyntheticKind::Images { side: f.get("side")? }
                },
                classes: f.get("classes")?,
                per_class: f.get("per_class")?,
                separation: f.get("separation")?,
                label_noise: f.get("label_noise")?,
            }),
            _ => return Err(HarnessError::Config(format!("`data`: unknown source {data_kind:?}"))),
        };
        let dropout: f64 = f.get("dropout")?;
        let arch_kind = f.raw("arch");
        let arch = match arch_kind.split_once(':') {
            Some(("file", p)) => ArchSource::File(path_of(p)),
            None if arch_kind == "mlp" => ArchSource::Mlp {
                hidden: f.list("hidden")?,
                dropout,
            },
            None if arch_kind == "cnn" => {
                let filters: Vec<usize> = f.list("filters")?;
                let [a, b] = filters[..] else {
                    return Err(HarnessError::Config("`filters` needs exactly two values".into()));
                };
                ArchSource::Cnn {
                    filters: [a, b],
                    fc: f.get("fc")?,
                    dropout,
                }
            }
            _ => return Err(HarnessError::Config(format!("`arch`: unknown architecture {arch_kind:?}"))),
        };
        let overlap = match f.raw("overlap").as_str() {
            "disjoint" => Overlap::Disjoint,
            "identical" => Overlap::Identical,
            other => return Err(HarnessError::Config(format!("`overlap`: expected disjoint or identical, got {other:?}"))),
        };
        let validation_shadow = match f.raw("validation_shadow").as_str() {
            "first" => ValidationShadow::First,
            "median" => ValidationShadow::Median,
            other => return Err(HarnessError::Config(format!("`validation_shadow`: expected first or median, got {other:?}"))),
        };
        let features: FeatureSpec = f
            .raw("features")
            .parse()
            .map_err(|e| HarnessError::Config(format!("`features`: {e}")))?;
        let scenarios: Vec<Scenario> = f.list("scenarios")?;
        let maps = match f.raw("maps").as_str() {
            "" => None,
            s => Some(s.parse().map_err(|_| HarnessError::Config(format!("`maps`: cannot parse {s:?}")))?),
        };
        let mc = McConfig {
            batch_size: f.get("mc_batch_size")?,
            lr: f.get("mc_lr")?,
            min_lr: f.get("mc_min_lr")?,
            max_epochs: f.get("mc_max_epochs")?,
            grad_kernel: f.get("mc_grad_kernel")?,
            grad_channels: f.get("mc_grad_channels")?,
            dropout: f.get("mc_dropout")?,
            hidden: f.get("mc_hidden")?,
            embed: f.get("mc_embed")?,
            regime: overlap,
            ..McConfig::default()
        };
        let cfg = Self {
            seed: f.get("seed")?,
            repetitions: f.get("repetitions")?,
            data,
            arch,
            partition: PartitionSpec {
                n_val: f.get("n_val")?,
                n_aux: f.get("n_aux")?,
                n_target: f.get("n_target")?,
                overlap,
                n_members: f.get("n_members")?,
                shadows: f.get("shadows")?,
            },
            mc_train: f.get("mc_train")?,
            mc_val: f.get("mc_val")?,
            mc_test: f.get("mc_test")?,
            train: TrainConfig {
                batch_size: f.get("batch_size")?,
                lr: f.get("lr")?,
                lr_divisor: f.get("lr_divisor")?,
                patience: f.get("patience")?,
                min_lr: f.get("min_lr")?,
                max_epochs: f.get("max_epochs")?,
                ..TrainConfig::default()
            },
            features,
            scenarios,
            method: f.get::<String>("method")?.parse().map_err(|e| HarnessError::Config(format!("`method`: {e}")))?,
            direction: f.get::<String>("direction")?.parse().map_err(|e| HarnessError::Config(format!("`direction`: {e}")))?,
            probe_records: f.get("probe_records")?,
            pixels: f.get("pixels")?,
            baseline_trials: f.get("baseline_trials")?,
            weight_sort_bias: f.get("weight_sort_bias")?,
            validation_shadow,
            mc,
            fprs: f.list("fprs")?,
            maps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field checks that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.train.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.repetitions == 0 {
            return bad("`repetitions` must be >= 1".into());
        }
        if self.scenarios.is_empty() {
            return bad("`scenarios` is empty".into());
        }
        let p = &self.partition;
        let needs_shadows = self.scenarios.iter().any(|s| *s != Scenario::S1);
        if needs_shadows && p.shadows < 2 {
            return bad("shadow scenarios need `shadows` >= 2 (one validates the meta-classifier)".into());
        }
        if p.n_members > p.n_target || p.n_members > p.n_aux {
            return bad(format!("`n_members` = {} exceeds a pool", p.n_members));
        }
        for (k, v) in [("mc_train", self.mc_train), ("mc_val", self.mc_val), ("mc_test", self.mc_test)] {
            if v < 2 || v % 2 != 0 {
                return bad(format!("`{k}` must be an even number >= 2 (balanced sets)"));
            }
        }
        let half = |n: usize| n / 2;
        let non_members = p.n_target - p.n_members;
        let mut needed = half(self.mc_test);
        if self.scenarios.contains(&Scenario::S1) {
            needed += half(self.mc_train) + half(self.mc_val);
        }
        if needed > p.n_members || needed > non_members {
            return bad(format!(
                "balanced meta-classifier sets need {needed} members and non-members of the target pool ({} and {non_members} available)",
                p.n_members
            ));
        }
        if needs_shadows && (self.mc_train > p.n_aux || half(self.mc_val) > p.n_members.min(p.n_aux - p.n_members)) {
            return bad("`mc_train` or `mc_val` does not fit the adversary pool".into());
        }
        if self.fprs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("`fprs` must lie in [0, 1]".into());
        }
        if self.mc.grad_kernel == 0 || self.mc.grad_channels == 0 {
            return bad("`mc_grad_kernel` and `mc_grad_channels` must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.mc.dropout) {
            return bad("`mc_dropout` must lie in [0, 1)".into());
        }
        if !(self.mc.min_lr > 0.0 && self.mc.lr > self.mc.min_lr) {
            return bad("need mc_lr > mc_min_lr > 0".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse() {
        let c = ExperimentConfig::default();
        assert_eq!(c.repetitions, 5);
        assert_eq!(c.scenarios, vec![Scenario::S1, Scenario::S3]);
        assert_eq!(c.features.oa_layers, vec![1]);
        assert_eq!(c.mc.regime, Overlap::Disjoint);
    }

    #[test]
    fn values_and_comments() {
        let c = ExperimentConfig::parse("seed = 9 # master\n\nhidden = 16, 8\nscenarios = S1,S6,S7\n", Path::new("/x")).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.arch, ArchSource::Mlp { hidden: vec![16, 8], dropout: 0.0 });
        assert_eq!(c.scenarios.len(), 3);
        let c = ExperimentConfig::parse("data = csv:d/x.csv\n", Path::new("/base")).unwrap();
        assert_eq!(c.data, DataSource::Csv(PathBuf::from("/base/d/x.csv")));
    }

    #[test]
    fn errors_name_the_problem() {
        let err = |t: &str| ExperimentConfig::parse(t, Path::new(".")).unwrap_err().to_string();
        assert!(err("bogus = 1").contains("unknown key `bogus`"));
        assert!(err("seed = 1\nseed = 2").contains("set twice"));
        assert!(err("seed").contains("line 1"));
        assert!(err("seed = x").contains("`seed`"));
        assert!(err("mc_test = 3").contains("even"));
        assert!(err("scenarios = S3\nshadows = 1").contains("shadows"));
        assert!(err("overlap = partial").contains("overlap"));
        assert!(ExperimentConfig::parse("lr = 0", Path::new(".")).unwrap_err().exit_code() == 1);
    }
}
