use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fair-rationale"))
        .args(args)
        .env("FR_OUTPUT_DIR", root)
        .output()
        .expect("binary runs")
}

fn out_dir(o: &Output) -> PathBuf {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(String::from_utf8(o.stdout.clone()).unwrap().trim())
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

const SMALL: &[&str] = &["--n-examples", "120", "--epochs", "1", "--bias-epochs", "1", "--probe-epochs", "1"];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(SMALL).copied().collect()
}

#[test]
fn gen_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["gen", "--seed", "7", "--regime", "redundant"];
    let da = out_dir(&run(a.path(), &args));
    let db = out_dir(&run(b.path(), &args));
    assert_eq!(da.file_name(), db.file_name());
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "roles.csv", "vocab.txt", "outputs.sha256"] {
        assert_eq!(fs::read(da.join(f)).unwrap(), fs::read(db.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn default_split_sizes() {
    let root = tempfile::tempdir().unwrap();
    let dir = out_dir(&run(root.path(), &["gen"]));
    assert_eq!(lines(&dir.join("train.jsonl")), 1000);
    assert_eq!(lines(&dir.join("dev.jsonl")), 143);
    assert_eq!(lines(&dir.join("test.jsonl")), 286);
    assert!(dir.join("resolved-config.txt").exists());
}

#[test]
fn infeasible_spec_exits_2() {
    let root = tempfile::tempdir().unwrap();
    let o = run(root.path(), &["gen", "--seq-len", "2", "--require-carriers", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(fs::read_dir(root.path()).map_or(true, |mut d| d.next().is_none()));
}

#[test]
fn config_errors_exit_2() {
    let root = tempfile::tempdir().unwrap();
    for args in [
        &["gen", "--no-such-key", "1"][..],
        &["gen", "--seed"],
        &["frobnicate"],
        &["train-task"],
        &["gen", "--config", "/nonexistent/config.txt"],
        &["gen", "--noise-rate", "2"],
    ] {
        assert_eq!(run(root.path(), args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn unreadable_checkpoint_exits_1() {
    let root = tempfile::tempdir().unwrap();
    let bogus = root.path().join("bogus.ckpt");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    let o = run(root.path(), &with_small(&["train-task", "--oracle", bogus.to_str().unwrap()]));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_file_and_flags_combine() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("run.txt");
    fs::write(&cfg, "seed=3\nn_examples=100\n").unwrap();
    let dir = out_dir(&run(root.path(), &["gen", "--config", cfg.to_str().unwrap(), "--seed", "4"]));
    let resolved = fs::read_to_string(dir.join("resolved-config.txt")).unwrap();
    assert!(resolved.lines().any(|l| l == "seed=4"));
    assert!(resolved.lines().any(|l| l == "n_examples=100"));
    assert_eq!(lines(&dir.join("train.jsonl")), 70);
}

/// gen -> pretrain-bias -> train-task -> eval; then every stage again from
/// its resolved config.
#[test]
fn pipeline_reruns_from_resolved_config() {
    let root = tempfile::tempdir().unwrap();
    let data = out_dir(&run(root.path(), &with_small(&["gen"])));
    let d = data.to_str().unwrap();
    let bias = out_dir(&run(root.path(), &with_small(&["pretrain-bias", "--data-dir", d])));
    let oracle = bias.join("oracle.ckpt");
    let o = oracle.to_str().unwrap();
    let task = out_dir(&run(root.path(), &with_small(&["train-task", "--data-dir", d, "--oracle", o])));
    let t = task.join("task.ckpt");
    let eval = out_dir(&run(
        root.path(),
        &with_small(&["eval", "--data-dir", d, "--oracle", o, "--task", t.to_str().unwrap()]),
    ));
    let tradeoff = fs::read_to_string(eval.join("tradeoff.csv")).unwrap();
    assert_eq!(tradeoff.lines().count(), 2, "one header and exactly one row");
    assert_eq!(lines(&eval.join("predictions.jsonl")), 24);
    let manifest = fs::read_to_string(task.join("manifest.txt")).unwrap();
    assert!(manifest.contains("variant=energy"));

    for dir in [&data, &bias, &task, &eval] {
        let before = fs::read(dir.join("outputs.sha256")).unwrap();
        let cfg = dir.join("resolved-config.txt");
        let cmd = match dir {
            x if x == &data => "gen",
            x if x == &bias => "pretrain-bias",
            x if x == &task => "train-task",
            _ => "eval",
        };
        let again = out_dir(&run(root.path(), &[cmd, "--config", cfg.to_str().unwrap()]));
        assert_eq!(&again, dir);
        assert_eq!(fs::read(again.join("outputs.sha256")).unwrap(), before, "{cmd}");
    }
}

#[test]
fn sweep_marks_failed_rows_and_continues() {
    let root = tempfile::tempdir().unwrap();
    let data = out_dir(&run(root.path(), &with_small(&["gen"])));
    let d = data.to_str().unwrap();
    let bias = out_dir(&run(root.path(), &with_small(&["pretrain-bias", "--data-dir", d])));
    let o = bias.join("oracle.ckpt");
    let args = with_small(&[
        "sweep",
        "--data-dir",
        d,
        "--oracle",
        o.to_str().unwrap(),
        "--sweep-p-a",
        "0.5,1.0",
        "--sweep-targets",
        "0.5",
        "--sweep-gammas",
        "1,0",
    ]);
    let dir = out_dir(&run(root.path(), &args));
    let tradeoff = fs::read_to_string(dir.join("tradeoff.csv")).unwrap();
    assert_eq!(tradeoff.lines().count(), 5);
    let frontier = fs::read_to_string(dir.join("frontier.csv")).unwrap();
    let rows: Vec<&str> = frontier.lines().skip(1).collect();
    assert_eq!(frontier.lines().next().unwrap(), "p_A,target,gamma,task_metric,bias_f1,status,pareto");
    assert_eq!(rows.iter().filter(|r| r.contains(",ok,")).count(), 2);
    assert_eq!(rows.iter().filter(|r| r.ends_with(",failed,false")).count(), 2);
    assert!(rows.iter().any(|r| r.ends_with(",true")));
    assert_eq!(lines(&dir.join("failures.txt")), 2);
}
