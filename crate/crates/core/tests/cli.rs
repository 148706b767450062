use std::path::Path;
use std::process::{Command, Output};

fn mgres(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_mgres")).args(args).env("RUST_LOG", "warn").output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_then_engine_with_mock_and_subprocess_backends() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("ann.jsonl");
    let scenes = dir.path().join("scenes");
    assert!(mgres(&["gen-data", "--seed", "3", "--n", "6", "--mix", "0.5,0.0,0.5,0.0", "--out", s(&ann), "--scenes", s(&scenes)]).status.success());
    assert_eq!(std::fs::read_to_string(&ann).unwrap().lines().count(), 6);

    let a = dir.path().join("a.jsonl");
    let out = mgres(&["engine-run", "--images", s(&scenes), "--backends", "mock:4", "--out", s(&a)]);
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["processed"], 6);

    // Same mocks behind the line-delimited JSON wire contract.
    let b = dir.path().join("b.jsonl");
    let cmd = format!("cmd:{} mock-backend --images {} --seed 4", env!("CARGO_BIN_EXE_mgres"), s(&scenes));
    assert!(mgres(&["engine-run", "--images", s(&scenes), "--backends", &cmd, "--out", s(&b)]).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let out = mgres(&["engine-run", "--images", s(&scenes), "--out", s(&dir.path().join("c.jsonl")), "--resume"]);
    assert!(!out.status.success());
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.cfg");
    std::fs::write(
        &cfg,
        "# tiny run\nn_samples = 4\nbatch_size = 2\nsteps_per_epoch = 3\nwarmup_steps = 1\nchannels = 16\nd_model = 32\nlayers = 1\nheads = 2\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    assert!(mgres(&["train", "--config", s(&cfg), "--out", s(&run), "--set", "seed=5"]).status.success());
    assert_eq!(std::fs::read_to_string(run.join("loss.jsonl")).unwrap().lines().count(), 3);
    let ckpt = run.join("final.ckpt");
    assert!(ckpt.is_file());

    let report = dir.path().join("report.json");
    let records = dir.path().join("records.jsonl");
    let overlays = dir.path().join("overlays");
    let out = mgres(&[
        "eval", "--ckpt", s(&ckpt), "--data", "synthetic:9:4", "--report", s(&report), "--records", s(&records), "--overlays", s(&overlays),
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("mIoU (part)"));
    assert_eq!(std::fs::read_dir(&overlays).unwrap().count(), 4);

    let json = mgres(&["report", "--from", s(&report), "--from", s(&records), "--format", "json"]);
    assert!(json.status.success());
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v["report"]["overall"], v["records"]["overall"]);

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "batch_size = 2\nlearning_rate = 1\n").unwrap();
    let out = mgres(&["train", "--config", s(&bad), "--out", s(&run)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn grad_check_subcommand() {
    let out = mgres(&["grad-check", "--module", "route", "--seeds", "2"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.ends_with("ok")).count(), 4);
    assert!(!mgres(&["grad-check", "--module", "nonsense"]).status.success());
}
