//! Cause study: models that differ from a target in one source of
//! randomness (or in their training data) at a time, scored per layer.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use shadowalign_core::metrics::{random_perm_baseline, MisalignmentReport, ReportOptions};
use shadowalign_core::{SeedBundle, Stream};

use crate::error::{Result, StageExt};
use crate::experiment::{bundle, streams, Context, Trained};
use crate::report::{summarise, Summary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Same,
    Wi,
    Bo,
    Ds,
    OverlapData,
    DisjointData,
    BoDsDisjoint,
    WiBoDs,
    AllDifferent,
}

impl Condition {
    pub const ALL: [Condition; 9] = [
        Condition::Same,
        Condition::Wi,
        Condition::Bo,
        Condition::Ds,
        Condition::OverlapData,
        Condition::DisjointData,
        Condition::BoDsDisjoint,
        Condition::WiBoDs,
        Condition::AllDifferent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Same => "same",
            Condition::Wi => "diff_wi",
            Condition::Bo => "diff_bo",
            Condition::Ds => "diff_ds",
            Condition::OverlapData => "overlapping_data",
            Condition::DisjointData => "disjoint_data",
            Condition::BoDsDisjoint => "diff_bo_ds_disjoint_data",
            Condition::WiBoDs => "diff_wi_bo_ds",
            Condition::AllDifferent => "all_different",
        }
    }

    fn index(self) -> u64 {
        Self::ALL.iter().position(|c| *c == self).expect("listed") as u64
    }

    /// (weight init, batch order, dropout) taken from the other bundle.
    fn differs(self) -> (bool, bool, bool) {
        match self {
            Condition::Same | Condition::OverlapData | Condition::DisjointData => (false, false, false),
            Condition::Wi => (true, false, false),
            Condition::Bo => (false, true, false),
            Condition::Ds => (false, false, true),
            Condition::BoDsDisjoint => (false, true, true),
            Condition::WiBoDs | Condition::AllDifferent => (true, true, true),
        }
    }

    fn data(self) -> DataChoice {
        match self {
            Condition::OverlapData => DataChoice::Overlapping,
            Condition::DisjointData | Condition::BoDsDisjoint | Condition::AllDifferent => DataChoice::Disjoint,
            _ => DataChoice::Same,
        }
    }
}

enum DataChoice {
    Same,
    Overlapping,
    Disjoint,
}

/// One score of one model against its target.
#[derive(Debug, Clone, PartialEq)]
pub struct CauseRow {
    pub condition: String,
    pub rep: usize,
    pub layer: usize,
    pub metric: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CauseReport {
    pub rows: Vec<CauseRow>,
}

pub const BASELINE: &str = "random_permutation";

impl CauseReport {
    pub fn values(&self, condition: &str, layer: usize, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.condition == condition && r.layer == layer && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn summary(&self, condition: &str, layer: usize, metric: &str) -> Summary {
        summarise(&self.values(condition, layer, metric))
    }

    /// `condition,layer,metric,mean,ci95,n` in first-seen order.
    pub fn table_csv(&self) -> String {
        let mut keys: Vec<(&str, usize, &str)> = Vec::new();
        for r in &self.rows {
            let k = (r.condition.as_str(), r.layer, r.metric);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let mut out = String::from("condition,layer,metric,mean,ci95,n\n");
        for (c, l, m) in keys {
            let _ = writeln!(out, "{c},{l},{m},{}", self.summary(c, l, m).csv_fields());
        }
        out
    }

    pub fn runs_csv(&self) -> String {
        let mut out = String::from("condition,rep,layer,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{:.6}", r.condition, r.rep, r.layer, r.metric, r.value);
        }
        out
    }
}

fn pick(a: &SeedBundle, b: &SeedBundle, (wi, bo, ds): (bool, bool, bool)) -> SeedBundle {
    SeedBundle::new(
        if wi { b.weight_init } else { a.weight_init },
        if bo { b.batch_order } else { a.batch_order },
        if ds { b.dropout } else { a.dropout },
    )
}

/// Training set for a data condition: the target's own, `n` records drawn
/// from the target set together with `n` fresh records, or `n` records the
/// target never saw.
fn members_for(ctx: &Context, target: &[u64], choice: DataChoice, rng: &mut Stream) -> Vec<u64> {
    let n = target.len();
    let own: HashSet<u64> = target.iter().copied().collect();
    let fresh: Vec<u64> = ctx.splits.aux.iter().chain(&ctx.splits.target_pool).copied().filter(|id| !own.contains(id)).collect::<std::collections::BTreeSet<u64>>().into_iter().collect();
    let pool: Vec<u64> = match choice {
        DataChoice::Same => return target.to_vec(),
        DataChoice::Overlapping => {
            let extra: Vec<u64> = rng.sample_without_replacement(fresh.len(), n.min(fresh.len())).into_iter().map(|i| fresh[i]).collect();
            target.iter().copied().chain(extra).collect()
        }
        DataChoice::Disjoint => fresh,
    };
    let mut m: Vec<u64> = rng.sample_without_replacement(pool.len(), n.min(pool.len())).into_iter().map(|i| pool[i]).collect();
    m.sort_unstable();
    m
}

fn target_for(ctx: &Context, rep: usize) -> Result<Arc<Trained>> {
    ctx.train_cached(&ctx.splits.target_members, true, bundle(ctx.cfg.seed, streams::CAUSE + (rep as u64) * 64), &ctx.cfg.train)
}

fn score(ctx: &Context, target: &Trained, other: &Trained, name: &str, rep: usize, rng_index: u64) -> Result<Vec<CauseRow>> {
    let opts = ReportOptions {
        pixels: ctx.cfg.pixels,
        baseline_trials: 0,
        with_activations: true,
    };
    let mut rng = Stream::derive(ctx.cfg.seed, streams::METRICS + rng_index);
    let rep_report = MisalignmentReport::compute(name, &target.model, &other.model, &ctx.probe, &ctx.probe_ids, &opts, &mut rng).stage("metrics")?;
    let mut rows = Vec::new();
    for l in rep_report.layers {
        rows.push(CauseRow {
            condition: name.to_string(),
            rep,
            layer: l.layer,
            metric: "wms",
            value: l.wms,
        });
        for (metric, v) in [("ams", l.ams), ("cba", l.cba)] {
            if let Some(value) = v {
                rows.push(CauseRow {
                    condition: name.to_string(),
                    rep,
                    layer: l.layer,
                    metric,
                    value,
                });
            }
        }
    }
    Ok(rows)
}

/// Every condition over every repetition, followed by the WMS of randomly
/// permuted target layers.
pub fn run_cause_study(ctx: &Context) -> Result<CauseReport> {
    run_conditions(ctx, &Condition::ALL)
}

pub fn run_conditions(ctx: &Context, conditions: &[Condition]) -> Result<CauseReport> {
    let seed = ctx.cfg.seed;
    let reps = ctx.cfg.repetitions;
    let per_rep = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<Vec<CauseRow>> {
            let target = target_for(ctx, rep)?;
            let base = rep as u64 * 64;
            let mut rows = conditions
                .par_iter()
                .map(|&c| -> Result<Vec<CauseRow>> {
                    let other = bundle(seed, streams::CAUSE + base + 16 + c.index());
                    let seeds = pick(&target.seeds, &other, c.differs());
                    let mut rng = Stream::derive(seed, streams::CAUSE + base + 32 + c.index());
                    let members = members_for(ctx, &target.members, c.data(), &mut rng);
                    let m = ctx.train_cached(&members, true, seeds, &ctx.cfg.train)?;
                    score(ctx, &target, &m, c.name(), rep, base + c.index())
                })
                .collect::<Result<Vec<_>>>()?
                .concat();
            let mut rng = Stream::derive(seed, streams::METRICS + base + 63);
            for l in 0..target.model.depth() {
                let b = random_perm_baseline(&target.model, l, ctx.cfg.baseline_trials.max(1), &mut rng).stage("metrics")?;
                rows.push(CauseRow {
                    condition: BASELINE.to_string(),
                    rep,
                    layer: l,
                    metric: "wms",
                    value: b.mean,
                });
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CauseReport { rows: per_rep.concat() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conditions_change_the_named_seeds_only() {
        let a = SeedBundle::new(1, 2, 3);
        let b = SeedBundle::new(4, 5, 6);
        assert_eq!(pick(&a, &b, Condition::Same.differs()), a);
        assert_eq!(pick(&a, &b, Condition::Wi.differs()), SeedBundle::new(4, 2, 3));
        assert_eq!(pick(&a, &b, Condition::Bo.differs()), SeedBundle::new(1, 5, 3));
        assert_eq!(pick(&a, &b, Condition::Ds.differs()), SeedBundle::new(1, 2, 6));
        assert_eq!(pick(&a, &b, Condition::AllDifferent.differs()), b);
    }

    #[test]
    fn names_are_unique() {
        let names: HashSet<&str> = Condition::ALL.iter().map(|c| c.name()).collect();
        assert_eq!(names.len(), Condition::ALL.len());
    }
}
