use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "
repetitions = 1
per_class = 60
n_val = 30
n_aux = 60
n_target = 60
n_members = 30
shadows = 2
mc_train = 20
mc_val = 10
mc_test = 20
max_epochs = 5
mc_max_epochs = 3
scenarios = S1,S3
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shadowalign")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_cfg(dir: &Path, text: &str) -> String {
    let p = dir.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn unknown_config_key_exits_with_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "seed = 1\nlearning_rate = 3\n");
    let o = run(&["--config", &cfg, "--out", s(&tmp.path().join("o")), "gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn infeasible_partition_exits_with_1() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["--out", s(tmp.path()), "--set", "n_members=500", "attack"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_flag_exits_with_1() {
    assert_eq!(run(&["attack", "--no-such-flag"]).status.code(), Some(1));
}

#[test]
fn missing_checkpoint_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none.ckpt");
    let o = run(&["--out", s(tmp.path()), "permute", "--model", s(&missing)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_permute_realign_metrics_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), TINY);
    let out = tmp.path().join("o");
    let base = ["--config", &cfg, "--out", s(&out)];
    let go = |extra: &[&str]| {
        let args: Vec<&str> = base.iter().copied().chain(extra.iter().copied()).collect();
        let o = run(&args);
        assert!(o.status.success(), "{extra:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    go(&["gen-data", "--format", "tensor"]);
    assert!(out.join("data.bin").exists());
    go(&["train", "--role", "target"]);
    go(&["train", "--role", "shadow", "--index", "1"]);
    assert!(std::fs::read_to_string(out.join("target0_log.csv")).unwrap().starts_with("epoch,train_acc,val_acc,lr\n"));

    let target = out.join("target0.ckpt");
    go(&["permute", "--model", s(&target)]);
    let permuted = out.join("target0_permuted.ckpt");
    go(&["realign", "--model", s(&permuted), "--target", s(&target), "--method", "activation"]);
    // undoing a planted permutation leaves nothing to measure
    let metrics = go(&["metrics", "--model", s(&out.join("target0_permuted_aligned.ckpt")), "--target", s(&target)]);
    for line in metrics.lines().filter(|l| l.contains(",wms,")) {
        assert_eq!(line.split(',').nth(3), Some("0.000000"), "{line}");
    }
    let shadow = go(&["metrics", "--model", s(&out.join("shadow1.ckpt")), "--target", s(&target)]);
    assert!(shadow.lines().any(|l| l.contains(",wms,") && l.split(',').nth(3) != Some("0.000000")));
    assert!(out.join("probe.txt").exists());

    go(&["report"]);
    assert!(std::fs::read_to_string(out.join("config_keys.csv")).unwrap().contains("validation_shadow"));
}

#[test]
fn report_writes_one_map_per_filter() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), &format!("{TINY}data = images\nside = 16\narch = cnn\nfilters = 20,4\n"));
    let out = tmp.path().join("o");
    let base = ["--config", cfg.as_str(), "--out", s(&out)];
    let mut args = base.to_vec();
    args.extend(["train"]);
    assert!(run(&args).status.success());
    let mut args = base.to_vec();
    let model = out.join("target0.ckpt");
    args.extend(["--set", "maps=0", "report", "--model", s(&model)]);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let maps: Vec<_> = std::fs::read_dir(out.join("maps")).unwrap().collect();
    assert_eq!(maps.len(), 20);
    let first = std::fs::read(out.join("maps").join("target0_layer0_rec0_c000.pgm")).unwrap();
    // 16x16 input, 5x5 valid convolution
    assert!(first.starts_with(b"P5\n12 12\n255\n"));
    assert_eq!(first.len(), b"P5\n12 12\n255\n".len() + 144);
}

#[test]
fn attack_writes_tables_and_roc_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), TINY);
    let out = tmp.path().join("o");
    let o = run(&["--config", &cfg, "--out", s(&out), "--seed", "3", "attack"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("scenarios.csv")).unwrap();
    assert!(table.starts_with("scenario,metric,mean,ci95,n\n"));
    // one repetition: empty CI column
    assert!(table.contains("S1,auc,") && table.lines().any(|l| l.starts_with("S3,auc,") && l.ends_with(",,1")));
    for f in ["roc/S1_rep0.csv", "roc/S3_rep0.csv", "roc_summary.csv", "runs.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}
