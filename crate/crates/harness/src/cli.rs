//! Command-line front end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use shadowalign_core::metrics::{MisalignmentReport, ReportOptions};
use shadowalign_core::nn::Model;
use shadowalign_core::realign::{realign, Direction, Method};
use shadowalign_core::symmetry::{permute_layer, random_permutation, SymmetryOp, SymmetryOpLog};
use shadowalign_core::train::train;
use shadowalign_core::Stream;

use crate::cause::run_cause_study;
use crate::checkpoint::{load_checkpoint, save_checkpoint, sha256_hex};
use crate::config::{parse_pairs, ExperimentConfig, KEYS};
use crate::dataset;
use crate::error::{HarnessError, Result, StageExt};
use crate::experiment::{bundle, streams, Context};
use crate::report::{write_activation_maps, write_text};
use crate::scenario::{run_scenario, AttackRunner};

#[derive(Debug, Parser)]
#[command(name = "shadowalign", version, about = "Shadow-model misalignment, re-alignment and membership-inference experiments")]
pub struct Cli {
    /// Experiment configuration (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DataFormat {
    Csv,
    Tensor,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Role {
    Target,
    Shadow,
}

#[derive(Debug, Args)]
pub struct PairArgs {
    /// Checkpoint to score or align.
    #[arg(long)]
    pub model: PathBuf,
    /// Reference checkpoint.
    #[arg(long)]
    pub target: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate (or load and convert) the configured dataset.
    GenData {
        #[arg(long, value_enum, default_value = "csv")]
        format: DataFormat,
    },
    /// Train the target of a repetition or one shadow model.
    Train {
        #[arg(long, value_enum, default_value = "target")]
        role: Role,
        /// Repetition (target) or shadow index.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Apply random permutations to every hidden layer of a checkpoint.
    Permute {
        #[arg(long)]
        model: PathBuf,
    },
    /// Re-align a checkpoint onto a target checkpoint.
    Realign {
        #[command(flatten)]
        pair: PairArgs,
        /// Overrides `method`.
        #[arg(long)]
        method: Option<String>,
        /// Overrides `direction`.
        #[arg(long)]
        direction: Option<String>,
    },
    /// Per-layer WMS, AMS and CBA of a checkpoint against a target.
    Metrics {
        #[command(flatten)]
        pair: PairArgs,
    },
    /// Misalignment caused by each source of randomness.
    CauseStudy,
    /// Membership-inference scenarios.
    Attack,
    /// Activation maps of one record as PGM images, plus the key reference.
    Report {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Position of the record within V2.
        #[arg(long, default_value_t = 0)]
        record: usize,
    },
}

impl Cli {
    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        let (mut map, base) = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", p.display())))?;
                (parse_pairs(&text)?, p.parent().unwrap_or(Path::new(".")).to_path_buf())
            }
            None => (BTreeMap::new(), PathBuf::from(".")),
        };
        for kv in &self.set {
            let extra = parse_pairs(kv)?;
            if extra.is_empty() {
                return Err(HarnessError::Config(format!("--set {kv:?}: expected key=value")));
            }
            map.extend(extra);
        }
        if let Some(s) = self.seed {
            map.insert("seed".into(), s.to_string());
        }
        ExperimentConfig::from_map(map, &base)
    }
}

fn out_path(out: &Path, name: &str) -> PathBuf {
    out.join(name)
}

fn load_pair(pair: &PairArgs) -> Result<(Model<f32>, Model<f32>)> {
    Ok((load_checkpoint(&pair.model)?, load_checkpoint(&pair.target)?))
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = cli.experiment_config()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| HarnessError::Config(format!("--jobs: {e}")))?;
    pool.install(|| execute(&cli, &cfg))
}

fn execute(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    let out = &cli.out;
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let cache = Some(out.join("cache"));
    match &cli.command {
        Command::GenData { format } => {
            let data = dataset::load(&cfg.data, cfg.seed)?;
            let path = match format {
                DataFormat::Csv => {
                    let p = out_path(out, "data.csv");
                    dataset::write_csv(&data, &p)?;
                    p
                }
                DataFormat::Tensor => {
                    let p = out_path(out, "data.bin");
                    dataset::write_tensor_file(&data, &p)?;
                    p
                }
            };
            println!("wrote {} records ({} classes) to {}", data.len(), data.num_classes(), path.display());
        }
        Command::Train { role, index } => {
            let ctx = Context::new(cfg, None)?;
            let runner = AttackRunner::new(&ctx);
            let (name, members, seeds, val) = match role {
                Role::Target => (format!("target{index}"), runner.target_members(*index), runner.target_seeds(*index), &ctx.v1),
                Role::Shadow => {
                    let members = ctx
                        .splits
                        .shadow_members
                        .get(*index)
                        .ok_or_else(|| HarnessError::Config(format!("shadow {index} does not exist (shadows = {})", ctx.splits.shadow_members.len())))?
                        .clone();
                    (format!("shadow{index}"), members, bundle(cfg.seed, streams::SHADOW + *index as u64), &ctx.v2)
                }
            };
            let outcome = train(&ctx.arch, &ctx.subset(&members)?, val, &seeds, &cfg.train).stage("train")?;
            let log = outcome.log.to_csv();
            let ckpt = out_path(out, &format!("{name}.ckpt"));
            save_checkpoint(&outcome.model, Some(&seeds), Some(&sha256_hex(&log)), &ckpt)?;
            write_text(&out_path(out, &format!("{name}_log.csv")), &log)?;
            println!(
                "{name}: {} epochs, final validation accuracy {:.4}, checkpoint {}",
                outcome.log.epochs.len(),
                outcome.log.final_val_acc().unwrap_or(f64::NAN),
                ckpt.display()
            );
        }
        Command::Permute { model } => {
            let m: Model<f32> = load_checkpoint(model)?;
            let mut rng = Stream::derive(cfg.seed, 0x9E7A);
            let mut log = SymmetryOpLog::default();
            let mut current = m;
            for l in 0..current.depth() - 1 {
                let perm = random_permutation(current.param(l).units(), &mut rng);
                current = permute_layer(&current, l, &perm).stage("permute")?;
                log.push(SymmetryOp::Permute { layer: l, perm });
            }
            let stem = file_stem(model);
            save_checkpoint(&current, None, None, &out_path(out, &format!("{stem}_permuted.ckpt")))?;
            write_text(&out_path(out, &format!("{stem}_permuted.ops")), &log.to_text())?;
            println!("permuted {} hidden layers", log.ops.len());
        }
        Command::Realign { pair, method, direction } => {
            let (m, target) = load_pair(pair)?;
            let method: Method = match method {
                Some(s) => s.parse().map_err(|e| HarnessError::Config(format!("--method: {e}")))?,
                None => cfg.method,
            };
            let direction: Direction = match direction {
                Some(s) => s.parse().map_err(|e| HarnessError::Config(format!("--direction: {e}")))?,
                None => cfg.direction,
            };
            let probe = if method == Method::Weight { Vec::new() } else { Context::new(cfg, None)?.probe };
            let (aligned, plan) = realign(&m, &target, method, direction, &probe).stage("re-align")?;
            let stem = file_stem(&pair.model);
            save_checkpoint(&aligned, None, None, &out_path(out, &format!("{stem}_aligned.ckpt")))?;
            write_text(&out_path(out, &format!("{stem}_aligned.ops")), &plan.op_log().to_text())?;
            let mut costs = String::from("layer,assignment_cost,identity_cost\n");
            for (l, (a, i)) in plan.costs.iter().enumerate() {
                costs.push_str(&format!("{l},{a:.6},{i:.6}\n"));
            }
            write_text(&out_path(out, &format!("{stem}_aligned_costs.csv")), &costs)?;
            println!("re-aligned with {method} {direction}; identity plan: {}", plan.is_identity());
        }
        Command::Metrics { pair } => {
            let (m, target) = load_pair(pair)?;
            let ctx = Context::new(cfg, None)?;
            let opts = ReportOptions {
                pixels: cfg.pixels,
                baseline_trials: cfg.baseline_trials,
                with_activations: true,
            };
            let mut rng = Stream::derive(cfg.seed, streams::METRICS);
            let stem = file_stem(&pair.model);
            let report = MisalignmentReport::compute(&stem, &target, &m, &ctx.probe, &ctx.probe_ids, &opts, &mut rng).stage("metrics")?;
            write_text(&out_path(out, "metrics.csv"), &report.to_csv())?;
            write_text(&out_path(out, "probe.txt"), &report.probe_descriptor())?;
            print!("{}", report.to_csv());
        }
        Command::CauseStudy => {
            let ctx = Context::new(cfg, cache)?;
            let report = run_cause_study(&ctx)?;
            write_text(&out_path(out, "cause_table.csv"), &report.table_csv())?;
            write_text(&out_path(out, "cause_runs.csv"), &report.runs_csv())?;
            print!("{}", report.table_csv());
        }
        Command::Attack => {
            let started = std::time::Instant::now();
            let ctx = Context::new(cfg, cache)?;
            let report = run_scenario(&ctx)?;
            write_text(&out_path(out, "scenarios.csv"), &report.summary_csv())?;
            write_text(&out_path(out, "runs.csv"), &report.runs_csv())?;
            let mut roc_summary = String::from("scenario,rep,auc");
            for f in &report.fprs {
                roc_summary.push_str(&format!(",tpr@{f}"));
            }
            roc_summary.push('\n');
            for r in &report.runs {
                write_text(&out.join("roc").join(format!("{}_rep{}.csv", r.scenario, r.rep)), &r.roc.to_csv())?;
                roc_summary.push_str(&format!("{},{},{:.6}", r.scenario, r.rep, r.roc.auc));
                for (_, t) in &r.tprs {
                    roc_summary.push_str(&format!(",{t:.6}"));
                }
                roc_summary.push('\n');
            }
            write_text(&out_path(out, "roc_summary.csv"), &roc_summary)?;
            print!("{}", report.summary_csv());
            println!("elapsed {:.1}s, cached models reused {}", started.elapsed().as_secs_f64(), ctx.cache_hits());
        }
        Command::Report { model, record } => {
            let mut keys = String::from("key,default,meaning\n");
            for (k, d, m) in KEYS {
                keys.push_str(&format!("{k},\"{d}\",\"{m}\"\n"));
            }
            write_text(&out_path(out, "config_keys.csv"), &keys)?;
            if let Some(path) = model {
                let m: Model<f32> = load_checkpoint(path)?;
                let ctx = Context::new(cfg, None)?;
                let x = ctx
                    .v2
                    .records()
                    .get(*record)
                    .ok_or_else(|| HarnessError::Config(format!("--record {record} is outside V2 ({} records)", ctx.v2.len())))?;
                let trace = m.forward(x, shadowalign_core::nn::DropoutMode::Off).stage("forward")?;
                let layers: Vec<usize> = match cfg.maps {
                    Some(l) => vec![l],
                    None => (0..m.depth()).filter(|&l| m.unit_output_shape(l).len() == 3).collect(),
                };
                let dir = out.join("maps");
                let mut total = 0;
                for l in layers {
                    m.check_layer(l).stage("report")?;
                    let a = trace.activation(l);
                    let values: Vec<f64> = a.data().iter().map(|v| *v as f64).collect();
                    total += write_activation_maps(&dir, &format!("{}_layer{l}_rec{record}", file_stem(path)), a.shape(), &values)?.len();
                }
                println!("wrote {total} activation maps to {}", dir.display());
            }
        }
    }
    Ok(())
}
