//! Shared experiment plumbing: the partitioned dataset, seed derivation and
//! cached model training.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use shadowalign_core::data::{make_splits, LabeledDataset, Splits};
use shadowalign_core::nn::{ArchSpec, Model};
use shadowalign_core::realign::{realign_after_init, RealignPlan};
use shadowalign_core::train::{train, TrainConfig, TrainOutcome};
use shadowalign_core::{SeedBundle, Stream, Tensor};

use crate::checkpoint::{model_container, model_from_container, sha256_hex, Container};
use crate::config::ExperimentConfig;
use crate::dataset;
use crate::error::{Result, StageExt};

/// Stream indices under the master seed.
pub(crate) mod streams {
    pub const SPLITS: u64 = 0x5911_7000;
    pub const TARGET: u64 = 0x7A26_0000;
    pub const TARGET_MEMBERS: u64 = 0x7A26_1000;
    pub const SHADOW: u64 = 0x5AD0_0000;
    pub const SAME_WI_SHADOW: u64 = 0x5AD1_0000;
    pub const MC_RECORDS: u64 = 0x3C00_0000;
    pub const MC: u64 = 0x3C10_0000;
    pub const METRICS: u64 = 0x3E70_0000;
    pub const CAUSE: u64 = 0xCA05_0000;
}

pub fn bundle(seed: u64, index: u64) -> SeedBundle {
    let mut s = Stream::derive(seed, index);
    SeedBundle::new(s.next_u64(), s.next_u64(), s.next_u64())
}

/// A trained model with the facts later stages need from its log.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model<f32>,
    pub seeds: SeedBundle,
    pub members: Vec<u64>,
    /// Epoch (1-based) with the best validation accuracy.
    pub best_epoch: usize,
    pub log_digest: String,
}

impl Trained {
    fn from_outcome(o: TrainOutcome<f32>, seeds: SeedBundle, members: &[u64]) -> Self {
        let best_epoch = o
            .log
            .epochs
            .iter()
            .fold((0usize, f64::NEG_INFINITY), |(be, bv), e| if e.val_acc > bv { (e.epoch, e.val_acc) } else { (be, bv) })
            .0;
        Self {
            model: o.model,
            seeds,
            members: members.to_vec(),
            best_epoch,
            log_digest: sha256_hex(&o.log.to_csv()),
        }
    }

    pub fn member_set(&self) -> HashSet<u64> {
        self.members.iter().copied().collect()
    }
}

/// Dataset, partition and architecture shared by every run of a config.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub data: LabeledDataset<f32>,
    pub splits: Splits,
    pub arch: ArchSpec,
    pub v1: LabeledDataset<f32>,
    pub v2: LabeledDataset<f32>,
    /// Probe for activation matching and metrics: the first records of V2.
    pub probe: Vec<Tensor<f32>>,
    pub probe_ids: Vec<u64>,
    cache: ModelCache,
}

impl Context {
    pub fn new(cfg: &ExperimentConfig, cache_dir: Option<PathBuf>) -> Result<Self> {
        let data = dataset::load(&cfg.data, cfg.seed)?;
        let shape = data
            .record_shape()
            .ok_or_else(|| crate::error::HarnessError::Config("dataset is empty".into()))?
            .to_vec();
        let arch = cfg.arch.build(&shape, data.num_classes())?;
        let splits = make_splits(data.ids(), &cfg.partition, &mut Stream::derive(cfg.seed, streams::SPLITS)).stage("partition")?;
        let v1 = data.subset(&splits.v1).stage("partition")?;
        let v2 = data.subset(&splits.v2).stage("partition")?;
        let probe_ids: Vec<u64> = splits.v2.iter().take(cfg.probe_records).copied().collect();
        let probe = v2.records()[..probe_ids.len()].to_vec();
        Ok(Self {
            cfg: cfg.clone(),
            data,
            splits,
            arch,
            v1,
            v2,
            probe,
            probe_ids,
            cache: ModelCache::new(cache_dir),
        })
    }

    pub fn subset(&self, ids: &[u64]) -> Result<LabeledDataset<f32>> {
        self.data.subset(ids).stage("partition")
    }

    /// Trains (or fetches from the cache) a model on `members`, validated on
    /// `val` (V1 or V2).
    pub fn train_cached(&self, members: &[u64], val_is_v1: bool, seeds: SeedBundle, cfg: &TrainConfig) -> Result<Arc<Trained>> {
        let key = self.cache_key("plain", members, val_is_v1, &seeds, cfg, "");
        self.cache.get_or_train(&key, || {
            let val = if val_is_v1 { &self.v1 } else { &self.v2 };
            let out = train(&self.arch, &self.subset(members)?, val, &seeds, cfg).stage("train")?;
            Ok(Trained::from_outcome(out, seeds, members))
        })
    }

    /// Shadow aligned to `target` right after initialisation, then trained.
    pub fn train_after_init(&self, target: &Trained, members: &[u64], seeds: SeedBundle) -> Result<(Arc<Trained>, Option<RealignPlan>)> {
        let key = self.cache_key("after-init", members, false, &seeds, &self.cfg.train, &target.log_digest);
        let mut plan = None;
        let t = self.cache.get_or_train(&key, || {
            let (out, p) = realign_after_init(&target.model, &self.subset(members)?, &self.v2, &seeds, &self.cfg.train).stage("re-align after init")?;
            plan = Some(p);
            Ok(Trained::from_outcome(out, seeds, members))
        })?;
        Ok((t, plan))
    }

    fn cache_key(&self, kind: &str, members: &[u64], v1: bool, seeds: &SeedBundle, cfg: &TrainConfig, extra: &str) -> String {
        let ids: Vec<String> = members.iter().map(u64::to_string).collect();
        let val: Vec<String> = if v1 { &self.splits.v1 } else { &self.splits.v2 }.iter().map(u64::to_string).collect();
        sha256_hex(&format!(
            "{kind}\n{}\n{:?}\n{}\n{}\n{seeds:?}\n{cfg:?}\n{extra}",
            self.arch,
            self.cfg.data,
            ids.join(","),
            val.join(",")
        ))
    }

    pub fn cache_hits(&self) -> usize {
        *self.cache.hits.lock().expect("cache lock")
    }
}

struct ModelCache {
    dir: Option<PathBuf>,
    mem: Mutex<HashMap<String, Arc<Trained>>>,
    hits: Mutex<usize>,
}

impl ModelCache {
    fn new(dir: Option<PathBuf>) -> Self {
        Self {
            dir,
            mem: Mutex::new(HashMap::new()),
            hits: Mutex::new(0),
        }
    }

    fn get_or_train(&self, key: &str, train: impl FnOnce() -> Result<Trained>) -> Result<Arc<Trained>> {
        if let Some(t) = self.mem.lock().expect("cache lock").get(key) {
            *self.hits.lock().expect("cache lock") += 1;
            return Ok(t.clone());
        }
        let path = self.dir.as_ref().map(|d| d.join(format!("{}.ckpt", &key[..32])));
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            if let Ok(t) = Self::load(p) {
                *self.hits.lock().expect("cache lock") += 1;
                let t = Arc::new(t);
                self.mem.lock().expect("cache lock").insert(key.to_string(), t.clone());
                return Ok(t);
            }
        }
        let t = Arc::new(train()?);
        if let Some(p) = &path {
            let mut c = model_container(&t.model, Some(&t.seeds), Some(&t.log_digest));
            c.metadata.insert("best_epoch".into(), t.best_epoch.to_string());
            c.metadata.insert("members".into(), t.members.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
            c.write(p)?;
        }
        self.mem.lock().expect("cache lock").insert(key.to_string(), t.clone());
        Ok(t)
    }

    fn load(p: &std::path::Path) -> Result<Trained> {
        let c = Container::read(p)?;
        let model = model_from_container(&c, p)?;
        let num = |k: &str| c.metadata.get(k).and_then(|v| v.parse::<u64>().ok());
        let bad = || crate::error::HarnessError::Checkpoint {
            path: p.into(),
            reason: "incomplete cache metadata".into(),
        };
        let members = c
            .metadata
            .get("members")
            .ok_or_else(bad)?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| bad()))
            .collect::<Result<Vec<u64>>>()?;
        Ok(Trained {
            model,
            seeds: SeedBundle::new(num("seed_wi").ok_or_else(bad)?, num("seed_bo").ok_or_else(bad)?, num("seed_ds").ok_or_else(bad)?),
            members,
            best_epoch: num("best_epoch").ok_or_else(bad)? as usize,
            log_digest: c.metadata.get("train_log_sha256").cloned().ok_or_else(bad)?,
        })
    }
}
