use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rpolab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpolab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Data {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    space: PathBuf,
}

fn gen_data(extra: &[&str]) -> Data {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let out = root.join("d");
    let mut args = vec!["gen-data", "--seed", "1", "--out", s(&out)];
    args.extend_from_slice(extra);
    let res = rpolab(&args);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    Data {
        data: out.join("data.jsonl"),
        space: out.join("space.json"),
        root,
        _dir: dir,
    }
}

fn train(d: &Data, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        s(&d.data),
        "--space",
        s(&d.space),
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    rpolab(&args)
}

fn last_row(csv: &Path) -> Vec<String> {
    let text = fs::read_to_string(csv).unwrap();
    text.lines()
        .last()
        .unwrap()
        .split(',')
        .map(str::to_owned)
        .collect()
}

#[test]
fn gen_data_is_deterministic() {
    let a = gen_data(&[]);
    let b = gen_data(&[]);
    let text = fs::read_to_string(&a.data).unwrap();
    assert_eq!(text.lines().count(), 48);
    assert_eq!(text, fs::read_to_string(&b.data).unwrap());
    assert_eq!(
        fs::read(&a.space).unwrap(),
        fs::read(&b.space).unwrap()
    );
}

#[test]
fn gen_data_rejects_zero_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let res = rpolab(&["gen-data", "--coverage", "0", "--out", s(dir.path())]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("--coverage"), "{}", stderr(&res));
}

#[test]
fn train_reaches_the_oracle_and_eval_reproduces_it() {
    let d = gen_data(&[]);
    let run = d.root.join("run");
    let res = train(
        &d,
        &run,
        &["--method", "rpo", "--full-batch", "--lr", "0.1", "--steps", "2000"],
    );
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let row = last_row(&run.join("metrics.csv"));
    let kl_opt_max: f64 = row[7].parse().unwrap();
    assert!(kl_opt_max < 1e-3, "kl_opt_max {kl_opt_max}");

    let ckpt = run.join("checkpoint.json");
    let appended = d.root.join("eval.csv");
    let res = rpolab(&[
        "eval",
        s(&ckpt),
        "--data",
        s(&d.data),
        "--space",
        s(&d.space),
        "--append",
        s(&appended),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let evaluated = last_row(&appended);
    // lr and wall time are reporting fields; everything else must match bit for bit.
    assert_eq!(evaluated[..10], row[..10]);

    let res = rpolab(&[
        "eval",
        s(&run.join("reference.json")),
        "--data",
        s(&d.data),
        "--space",
        s(&d.space),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(stdout(&res).contains(" kl_ref=0 "), "{}", stdout(&res));
}

#[test]
fn eval_against_a_foreign_space_is_an_integrity_error() {
    let d = gen_data(&[]);
    let other = gen_data(&["--prompts", "9"]);
    let run = d.root.join("run");
    let res = train(&d, &run, &["--method", "dro", "--steps", "5"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let res = rpolab(&[
        "eval",
        s(&run.join("checkpoint.json")),
        "--data",
        s(&other.data),
        "--space",
        s(&other.space),
    ]);
    assert_eq!(code(&res), 4, "{}", stderr(&res));
}

#[test]
fn usage_errors_exit_2() {
    let d = gen_data(&[]);
    let out = d.root.join("bad");
    let res = train(&d, &out, &["--method", "dpo"]);
    assert_eq!(code(&res), 2);
    let msg = stderr(&res);
    for token in ["rpo", "rpo-nonorm", "dro", "kto", "sft"] {
        assert!(msg.contains(token), "{msg}");
    }
    let res = train(&d, &out, &["--method", "rpo", "--tau", "0"]);
    assert_eq!(code(&res), 2, "{}", stderr(&res));
    let res = train(&d, &out, &["--method", "rpo", "--batch", "0"]);
    assert_eq!(code(&res), 2, "{}", stderr(&res));
}

#[test]
fn divergence_exits_3() {
    let d = gen_data(&[]);
    let res = train(
        &d,
        &d.root.join("dv"),
        &["--method", "rpo-nonorm", "--tau", "1e-300", "--steps", "5"],
    );
    assert_eq!(code(&res), 3, "{}", stderr(&res));
    assert!(stderr(&res).contains("step 1"), "{}", stderr(&res));
}

#[test]
fn missing_data_is_an_io_error() {
    let d = gen_data(&[]);
    let res = rpolab(&[
        "train",
        "--method",
        "rpo",
        "--data",
        s(&d.root.join("absent.jsonl")),
        "--space",
        s(&d.space),
        "--out",
        s(&d.root.join("x")),
    ]);
    assert_eq!(code(&res), 1, "{}", stderr(&res));
}

fn sweep(d: &Data, out: &Path) -> Output {
    rpolab(&[
        "sweep",
        "--data",
        s(&d.data),
        "--space",
        s(&d.space),
        "--full-batch",
        "--lr",
        "0.1",
        "--steps",
        "1500",
        "--jobs",
        "4",
        "--out",
        s(out),
    ])
}

#[test]
fn sweep_is_deterministic_and_orders_reference_kl() {
    let d = gen_data(&[]);
    let a = d.root.join("a");
    let b = d.root.join("b");
    for out in [&a, &b] {
        let res = sweep(&d, out);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
    }
    let runs = fs::read_dir(a.join("runs")).unwrap().count();
    assert_eq!(runs, 18);
    let table = fs::read_to_string(a.join("comparison.csv")).unwrap();
    assert_eq!(table, fs::read_to_string(b.join("comparison.csv")).unwrap());

    let header: Vec<&str> = table.lines().next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    for method in ["rpo", "dro"] {
        let kl: Vec<f64> = table
            .lines()
            .skip(1)
            .map(|l| l.split(',').collect::<Vec<_>>())
            .filter(|f| f[col("method")] == method)
            .map(|f| f[col("kl_opt_ref")].parse().unwrap())
            .collect();
        assert_eq!(kl.len(), 3);
        assert!(kl[0] > kl[1] && kl[1] > kl[2], "{method}: {kl:?}");
    }

    let res = rpolab(&["compare", s(&a.join("runs")), "--space", s(&d.space)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert_eq!(stdout(&res), table);
}

#[test]
fn sweep_records_failed_runs() {
    let d = gen_data(&[]);
    let out = d.root.join("sf");
    let res = rpolab(&[
        "sweep",
        "--data",
        s(&d.data),
        "--space",
        s(&d.space),
        "--methods",
        "rpo-nonorm",
        "--tau-grid",
        "1,1e-300",
        "--seeds",
        "0",
        "--steps",
        "10",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&res), 3, "{}", stderr(&res));
    let failures = fs::read_to_string(out.join("failures.csv")).unwrap();
    assert_eq!(failures.lines().count(), 2);
    assert!(out.join("comparison.csv").exists());
}
