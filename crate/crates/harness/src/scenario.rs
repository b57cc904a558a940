//! Attack scenarios S1-S9: target and shadow training, optional
//! re-alignment, meta-classifier training and evaluation.

use std::collections::HashSet;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use shadowalign_core::attack::{evaluate, featurise, train_meta_classifier, McConfig, RecordFeatures, RocCurve};
use shadowalign_core::data::LabeledDataset;
use shadowalign_core::metrics::wms;
use shadowalign_core::nn::Model;
use shadowalign_core::realign::{realign, weight_sort_canonical_with, Direction, Method};
use shadowalign_core::train::accuracy;
use shadowalign_core::Stream;

use crate::config::ValidationShadow;
use crate::error::{HarnessError, Result, StageExt};
use crate::experiment::{bundle, streams, Context, Trained};
use crate::report::{summarise, Summary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scenario {
    /// Auditor: features of the target model itself.
    S1,
    /// Shadows sharing the target's weight initialisation.
    S2,
    /// Shadows with all seeds different.
    S3,
    /// S3 with weight sorting of shadows and target.
    S4,
    /// S3 with bottom-up weight re-alignment.
    S5,
    /// S3 with top-down weight re-alignment.
    S6,
    /// S3 with activation re-alignment.
    S7,
    /// S3 with correlation re-alignment.
    S8,
    /// Shadows re-aligned to the target right after initialisation.
    S9,
}

impl Scenario {
    pub const ALL: [Scenario; 9] = [
        Scenario::S1,
        Scenario::S2,
        Scenario::S3,
        Scenario::S4,
        Scenario::S5,
        Scenario::S6,
        Scenario::S7,
        Scenario::S8,
        Scenario::S9,
    ];

    fn index(self) -> u64 {
        Self::ALL.iter().position(|s| *s == self).expect("listed") as u64
    }

    /// Uses the shared all-different-seed shadows.
    fn uses_shared_shadows(self) -> bool {
        matches!(self, Scenario::S3 | Scenario::S4 | Scenario::S5 | Scenario::S6 | Scenario::S7 | Scenario::S8)
    }

    fn realignment(self) -> Option<(Method, Direction)> {
        match self {
            Scenario::S5 => Some((Method::Weight, Direction::BottomUp)),
            Scenario::S6 => Some((Method::Weight, Direction::TopDown)),
            Scenario::S7 => Some((Method::Activation, Direction::BottomUp)),
            Scenario::S8 => Some((Method::Correlation, Direction::BottomUp)),
            _ => None,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.index() + 1)
    }
}

impl FromStr for Scenario {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|x| x.to_string().eq_ignore_ascii_case(s.trim()))
            .copied()
            .ok_or_else(|| HarnessError::Config(format!("unknown scenario {s:?}")))
    }
}

/// Outcome of one scenario on one target model.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub scenario: Scenario,
    pub rep: usize,
    pub roc: RocCurve,
    pub tprs: Vec<(f64, f64)>,
    /// Mean WMS per layer between the (aligned) shadows and the target.
    pub wms: Vec<f64>,
    pub mc_val_acc: f64,
    pub target_train_acc: f64,
    pub target_test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub runs: Vec<RunResult>,
    pub fprs: Vec<f64>,
}

impl ScenarioReport {
    pub fn scenarios(&self) -> Vec<Scenario> {
        let mut s: Vec<Scenario> = self.runs.iter().map(|r| r.scenario).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn aucs(&self, s: Scenario) -> Vec<f64> {
        self.runs.iter().filter(|r| r.scenario == s).map(|r| r.roc.auc).collect()
    }

    pub fn auc(&self, s: Scenario) -> Summary {
        summarise(&self.aucs(s))
    }

    /// `scenario,metric,mean,ci95,n` over repetitions.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("scenario,metric,mean,ci95,n\n");
        for s in self.scenarios() {
            let runs: Vec<&RunResult> = self.runs.iter().filter(|r| r.scenario == s).collect();
            let mut rows: Vec<(String, Vec<f64>)> = vec![("auc".into(), runs.iter().map(|r| r.roc.auc).collect())];
            for (i, f) in self.fprs.iter().enumerate() {
                rows.push((format!("tpr@{f}"), runs.iter().map(|r| r.tprs[i].1).collect()));
            }
            let layers = runs.first().map_or(0, |r| r.wms.len());
            for l in 0..layers {
                rows.push((format!("wms_layer{l}"), runs.iter().map(|r| r.wms[l]).collect()));
            }
            rows.push(("mc_val_acc".into(), runs.iter().map(|r| r.mc_val_acc).collect()));
            for (m, v) in rows {
                let _ = writeln!(out, "{s},{m},{}", summarise(&v).csv_fields());
            }
        }
        out
    }

    /// One row per run.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("scenario,rep,auc");
        for f in &self.fprs {
            let _ = write!(out, ",tpr@{f}");
        }
        out.push_str(",mc_val_acc,target_train_acc,target_test_acc,wms\n");
        for r in &self.runs {
            let _ = write!(out, "{},{},{:.6}", r.scenario, r.rep, r.roc.auc);
            for (_, t) in &r.tprs {
                let _ = write!(out, ",{t:.6}");
            }
            let w: Vec<String> = r.wms.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(
                out,
                ",{:.6},{:.6},{:.6},{}",
                r.mc_val_acc,
                r.target_train_acc,
                r.target_test_acc,
                w.join(";")
            );
        }
        out
    }
}

/// Record ids of the meta-classifier sets of one repetition.
struct McRecords {
    test: Vec<u64>,
    s1_train: Vec<u64>,
    s1_val: Vec<u64>,
    shadow_train: Vec<u64>,
}

fn take_balanced(members: &[u64], non_members: &[u64], n: usize, used: &mut HashSet<u64>, rng: &mut Stream) -> Result<Vec<u64>> {
    let mut out = Vec::with_capacity(n);
    for pool in [members, non_members] {
        let free: Vec<u64> = pool.iter().copied().filter(|id| !used.contains(id)).collect();
        if free.len() < n / 2 {
            return Err(HarnessError::Config(format!("cannot draw {} balanced records from {}", n / 2, free.len())));
        }
        for i in rng.sample_without_replacement(free.len(), n / 2) {
            used.insert(free[i]);
            out.push(free[i]);
        }
    }
    out.sort_unstable();
    Ok(out)
}

fn split_membership(pool: &[u64], members: &HashSet<u64>) -> (Vec<u64>, Vec<u64>) {
    pool.iter().partition(|id| members.contains(id))
}

pub struct AttackRunner<'a> {
    ctx: &'a Context,
}

impl<'a> AttackRunner<'a> {
    pub fn new(ctx: &'a Context) -> Self {
        Self { ctx }
    }

    fn seed(&self) -> u64 {
        self.ctx.cfg.seed
    }

    pub fn target_seeds(&self, rep: usize) -> shadowalign_core::SeedBundle {
        bundle(self.seed(), streams::TARGET + rep as u64)
    }

    pub fn target_members(&self, rep: usize) -> Vec<u64> {
        let pool = &self.ctx.splits.target_pool;
        let mut rng = Stream::derive(self.seed(), streams::TARGET_MEMBERS + rep as u64);
        let mut m: Vec<u64> = rng
            .sample_without_replacement(pool.len(), self.ctx.cfg.partition.n_members)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        m.sort_unstable();
        m
    }

    pub fn train_target(&self, rep: usize) -> Result<Arc<Trained>> {
        self.ctx.train_cached(&self.target_members(rep), true, self.target_seeds(rep), &self.ctx.cfg.train)
    }

    /// Shadows with seeds independent of every target; shared by all
    /// repetitions.
    pub fn shared_shadows(&self) -> Result<Vec<Arc<Trained>>> {
        let reps = self.ctx.cfg.repetitions;
        let target_wi: HashSet<u64> = (0..reps).map(|r| self.target_seeds(r).weight_init).collect();
        self.ctx
            .splits
            .shadow_members
            .par_iter()
            .enumerate()
            .map(|(k, members)| {
                let seeds = bundle(self.seed(), streams::SHADOW + k as u64);
                if target_wi.contains(&seeds.weight_init) {
                    return Err(HarnessError::Config("shadow and target seeds collide; change `seed`".into()));
                }
                self.ctx.train_cached(members, false, seeds, &self.ctx.cfg.train)
            })
            .collect()
    }

    fn same_wi_shadows(&self, rep: usize, target: &Trained) -> Result<Vec<Arc<Trained>>> {
        self.ctx
            .splits
            .shadow_members
            .par_iter()
            .enumerate()
            .map(|(k, members)| {
                let own = bundle(self.seed(), streams::SAME_WI_SHADOW + (rep as u64) * 4096 + k as u64);
                let seeds = shadowalign_core::SeedBundle::new(target.seeds.weight_init, own.batch_order, own.dropout);
                self.ctx.train_cached(members, false, seeds, &self.ctx.cfg.train)
            })
            .collect()
    }

    fn after_init_shadows(&self, target: &Trained) -> Result<Vec<Arc<Trained>>> {
        self.ctx
            .splits
            .shadow_members
            .par_iter()
            .enumerate()
            .map(|(k, members)| Ok(self.ctx.train_after_init(target, members, bundle(self.seed(), streams::SHADOW + k as u64))?.0))
            .collect()
    }

    fn mc_records(&self, rep: usize, target_members: &HashSet<u64>, with_s1: bool) -> Result<McRecords> {
        let cfg = &self.ctx.cfg;
        let mut rng = Stream::derive(self.seed(), streams::MC_RECORDS + rep as u64);
        let (m, n) = split_membership(&self.ctx.splits.target_pool, target_members);
        let mut used = HashSet::new();
        let test = take_balanced(&m, &n, cfg.mc_test, &mut used, &mut rng)?;
        let (s1_train, s1_val) = if with_s1 {
            (
                take_balanced(&m, &n, cfg.mc_train, &mut used, &mut rng)?,
                take_balanced(&m, &n, cfg.mc_val, &mut used, &mut rng)?,
            )
        } else {
            (Vec::new(), Vec::new())
        };
        let aux = &self.ctx.splits.aux;
        let mut shadow_train: Vec<u64> = rng
            .sample_without_replacement(aux.len(), cfg.mc_train.min(aux.len()))
            .into_iter()
            .map(|i| aux[i])
            .collect();
        shadow_train.sort_unstable();
        Ok(McRecords {
            test,
            s1_train,
            s1_val,
            shadow_train,
        })
    }

    fn features(&self, model: &Model<f32>, ids: &[u64], members: &HashSet<u64>) -> Result<Vec<RecordFeatures<f32>>> {
        featurise(model, &self.ctx.subset(ids)?, Some(members), &self.ctx.cfg.features).stage("features")
    }

    fn mc_config(&self, rep: usize, s: Scenario) -> McConfig {
        McConfig {
            seed: Stream::derive(self.seed(), streams::MC + (rep as u64) * 16 + s.index()).next_u64(),
            ..self.ctx.cfg.mc.clone()
        }
    }

    fn validation_shadow(&self, shadows: &[Arc<Trained>]) -> usize {
        match self.ctx.cfg.validation_shadow {
            ValidationShadow::First => 0,
            ValidationShadow::Median => {
                let mut order: Vec<usize> = (0..shadows.len()).collect();
                order.sort_by_key(|&k| (shadows[k].best_epoch, k));
                order[(order.len() - 1) / 2]
            }
        }
    }

    /// Runs every configured scenario for one repetition. `shared` holds
    /// the all-different-seed shadows when any scenario needs them.
    pub fn run_rep(&self, rep: usize, scenarios: &[Scenario], shared: &[Arc<Trained>]) -> Result<Vec<RunResult>> {
        let cfg = &self.ctx.cfg;
        let target = self.train_target(rep)?;
        let t_members = target.member_set();
        let recs = self.mc_records(rep, &t_members, scenarios.contains(&Scenario::S1))?;
        let pool = self.ctx.subset(&self.ctx.splits.target_pool)?;
        let (train_part, test_part) = split_membership(pool.ids(), &t_members);
        let target_train_acc = accuracy(&target.model, &self.ctx.subset(&train_part)?).stage("evaluate target")?;
        let target_test_acc = accuracy(&target.model, &self.ctx.subset(&test_part)?).stage("evaluate target")?;
        let nc = self.ctx.data.num_classes();

        let mut same_wi = None;
        let mut after_init = None;
        let mut results = Vec::with_capacity(scenarios.len());
        for &s in scenarios {
            let mc_cfg = self.mc_config(rep, s);
            let (groups, val, test_model, wms_scores): (Vec<Vec<RecordFeatures<f32>>>, Vec<RecordFeatures<f32>>, Model<f32>, Vec<f64>) = if s == Scenario::S1 {
                (
                    vec![self.features(&target.model, &recs.s1_train, &t_members)?],
                    self.features(&target.model, &recs.s1_val, &t_members)?,
                    target.model.clone(),
                    Vec::new(),
                )
            } else {
                let shadows: Vec<Arc<Trained>> = if s.uses_shared_shadows() {
                    if shared.is_empty() {
                        return Err(HarnessError::Config(format!("{s} needs the shared shadow models")));
                    }
                    shared.to_vec()
                } else if s == Scenario::S2 {
                    if same_wi.is_none() {
                        same_wi = Some(self.same_wi_shadows(rep, &target)?);
                    }
                    same_wi.clone().expect("set above")
                } else {
                    if after_init.is_none() {
                        after_init = Some(self.after_init_shadows(&target)?);
                    }
                    after_init.clone().expect("set above")
                };
                let test_model = if s == Scenario::S4 {
                    weight_sort_canonical_with(&target.model, cfg.weight_sort_bias).stage("weight sorting")?.0
                } else {
                    target.model.clone()
                };
                let aligned: Vec<Model<f32>> = shadows
                    .par_iter()
                    .map(|sh| -> Result<Model<f32>> {
                        if s == Scenario::S4 {
                            return Ok(weight_sort_canonical_with(&sh.model, cfg.weight_sort_bias).stage("weight sorting")?.0);
                        }
                        match s.realignment() {
                            Some((method, dir)) => Ok(realign(&sh.model, &target.model, method, dir, &self.ctx.probe).stage("re-align")?.0),
                            None => Ok(sh.model.clone()),
                        }
                    })
                    .collect::<Result<_>>()?;
                let v = self.validation_shadow(&shadows);
                let groups = (0..shadows.len())
                    .into_par_iter()
                    .filter(|&k| k != v)
                    .map(|k| self.features(&aligned[k], &recs.shadow_train, &shadows[k].member_set()))
                    .collect::<Result<Vec<_>>>()?;
                let v_members = shadows[v].member_set();
                let (vm, vn) = split_membership(&self.ctx.splits.aux, &v_members);
                let mut rng = Stream::derive(self.seed(), streams::MC_RECORDS + 0x8000 + rep as u64);
                let val_ids = take_balanced(&vm, &vn, cfg.mc_val, &mut HashSet::new(), &mut rng)?;
                let val = self.features(&aligned[v], &val_ids, &v_members)?;
                let depth = test_model.depth();
                let wms_scores = (0..depth)
                    .map(|l| {
                        let total: f64 = aligned.iter().map(|m| wms(&test_model, m, l)).sum::<shadowalign_core::Result<f64>>()?;
                        Ok(total / aligned.len() as f64)
                    })
                    .collect::<shadowalign_core::Result<Vec<f64>>>()
                    .stage("metrics")?;
                (groups, val, test_model, wms_scores)
            };
            let test = self.features(&test_model, &recs.test, &t_members)?;
            let out = train_meta_classifier(&groups, &val, &cfg.features, nc, &mc_cfg).stage("meta-classifier")?;
            let roc = evaluate(&out.classifier, &test).stage("evaluate")?;
            let tprs = cfg.fprs.iter().map(|&f| (f, roc.tpr_at(f))).collect();
            results.push(RunResult {
                scenario: s,
                rep,
                roc,
                tprs,
                wms: wms_scores,
                mc_val_acc: out.best_val_acc,
                target_train_acc,
                target_test_acc,
            });
        }
        Ok(results)
    }
}

/// Every configured scenario over every repetition.
pub fn run_scenario(ctx: &Context) -> Result<ScenarioReport> {
    let cfg = &ctx.cfg;
    let runner = AttackRunner::new(ctx);
    let mut scenarios = cfg.scenarios.clone();
    scenarios.sort();
    scenarios.dedup();
    let shared = if scenarios.iter().any(|s| s.uses_shared_shadows()) {
        runner.shared_shadows()?
    } else {
        Vec::new()
    };
    let per_rep = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| runner.run_rep(rep, &scenarios, &shared))
        .collect::<Result<Vec<_>>>()?;
    let mut runs: Vec<RunResult> = per_rep.into_iter().flatten().collect();
    runs.sort_by_key(|r| (r.scenario, r.rep));
    Ok(ScenarioReport {
        runs,
        fprs: cfg.fprs.clone(),
    })
}

/// Training-set accuracy of a dataset, exposed for reports.
pub fn dataset_accuracy(model: &Model<f32>, data: &LabeledDataset<f32>) -> Result<f64> {
    accuracy(model, data).stage("evaluate")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.to_string().parse::<Scenario>().unwrap(), s);
        }
        assert_eq!("s6".parse::<Scenario>().unwrap(), Scenario::S6);
        assert!("S10".parse::<Scenario>().is_err());
    }

    #[test]
    fn balanced_draws_do_not_reuse_records() {
        let m: Vec<u64> = (0..10).collect();
        let n: Vec<u64> = (10..20).collect();
        let mut used = HashSet::new();
        let mut rng = Stream::new(1);
        let a = take_balanced(&m, &n, 8, &mut used, &mut rng).unwrap();
        let b = take_balanced(&m, &n, 8, &mut used, &mut rng).unwrap();
        assert_eq!(a.iter().filter(|&&x| x < 10).count(), 4);
        assert!(a.iter().all(|x| !b.contains(x)));
        assert!(take_balanced(&m, &n, 8, &mut used, &mut rng).is_err());
    }
}
