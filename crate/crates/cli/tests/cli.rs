use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qseg_core::checkpoint::Checkpoint;
use qseg_core::data::Dataset;
use qseg_core::gradcheck_suite::registry;
use qseg_core::model::Model;

const TINY: [&str; 6] = [
    "--set",
    "model.dim=8",
    "--set",
    "model.num_queries=3",
    "--set",
    "model.stages=2",
];

fn qseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qseg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("qseg runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = qseg(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path) -> PathBuf {
    ok(
        dir,
        &[
            "synth", "--out", "data", "--images", "2", "--height", "32", "--width", "32", "--seed",
            "3",
        ],
    );
    dir.join("data/annotations.json")
}

fn train(dir: &Path, steps: &str, out: &str) {
    let mut args = vec![
        "train",
        "--data",
        "data/annotations.json",
        "--steps",
        steps,
        "--out",
        out,
        "--seed",
        "5",
    ];
    args.extend(TINY);
    ok(dir, &args);
}

#[test]
fn zero_steps_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    train(dir.path(), "0", "init.qsl");
    let ck = Checkpoint::load(&dir.path().join("init.qsl")).unwrap();
    assert_eq!(ck.step, 0);
    assert_eq!(ck.config.seed, 5);
    assert_eq!(ck.config.model.dim, 8);
    let fresh = Model::new(ck.config.model.clone(), 5).unwrap();
    assert_eq!(ck.params, fresh.params);
    assert!(ck.vocabulary.is_some());
}

#[test]
fn training_is_deterministic_and_logs_every_step() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    train(dir.path(), "3", "a.qsl");
    train(dir.path(), "3", "b.qsl");
    let a = std::fs::read_to_string(dir.path().join("a.qsl.log.jsonl")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("b.qsl.log.jsonl")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(a.lines().next().unwrap()).unwrap();
    for key in ["step", "lr", "total", "l_cls", "l_mask", "l_atr"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert_eq!(first["l_mask"].as_array().unwrap().len(), 2);
    assert_eq!(
        std::fs::read(dir.path().join("a.qsl")).unwrap(),
        std::fs::read(dir.path().join("b.qsl")).unwrap()
    );
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    train(dir.path(), "4", "full.qsl");
    train(dir.path(), "2", "half.qsl");
    let mut args = vec![
        "train",
        "--data",
        "data/annotations.json",
        "--resume",
        "half.qsl",
        "--steps",
        "4",
        "--out",
        "resumed.qsl",
    ];
    args.extend(TINY);
    ok(dir.path(), &args);
    let full = Checkpoint::load(&dir.path().join("full.qsl")).unwrap();
    let resumed = Checkpoint::load(&dir.path().join("resumed.qsl")).unwrap();
    assert_eq!(resumed.step, 4);
    assert_eq!(full.params, resumed.params);
}

#[test]
fn config_file_and_overrides_compose() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    std::fs::write(
        dir.path().join("run.json"),
        r#"{"model": {"dim": 8, "num_queries": 2, "stages": 1}, "seed": 9}"#,
    )
    .unwrap();
    ok(
        dir.path(),
        &[
            "--config",
            "run.json",
            "--set",
            "model.stages=2",
            "train",
            "--data",
            "data/annotations.json",
            "--steps",
            "0",
        ],
    );
    let ck = Checkpoint::load(&dir.path().join("model.qsl")).unwrap();
    assert_eq!(
        (
            ck.config.model.num_queries,
            ck.config.model.stages,
            ck.config.seed
        ),
        (2, 2, 9)
    );

    let bad = qseg(
        dir.path(),
        &[
            "--set",
            "model.nope=1",
            "train",
            "--data",
            "data/annotations.json",
        ],
    );
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("nope"));
}

#[test]
fn eval_reports_both_metrics_and_the_gap() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    train(dir.path(), "1", "m.qsl");
    let table = ok(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "m.qsl",
            "--data",
            "data/annotations.json",
            "--report",
            "r.kv",
        ],
    );
    let header = table.lines().next().unwrap();
    for col in ["AP_IoU", "AP_IoU+F1", "G"] {
        assert!(header.split_whitespace().any(|c| c == col), "{header}");
    }
    let kv = std::fs::read_to_string(dir.path().join("r.kv")).unwrap();
    for key in [
        "ap_iou=",
        "ap_iou_f1=",
        "gap_g=",
        "ap50=",
        "ap75=",
        "ap_small=",
        "mean_matched_f1=",
    ] {
        assert!(kv.lines().any(|l| l.starts_with(key)), "missing {key}");
    }
}

#[test]
fn eval_and_resume_reject_a_different_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let ann = synth(dir.path());
    train(dir.path(), "0", "m.qsl");
    let mut ds = Dataset::load(&ann).unwrap();
    ds.header.categories[0] = "disc".into();
    ds.save(&ann).unwrap();
    let out = qseg(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "m.qsl",
            "--data",
            "data/annotations.json",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary"));
    let resumed = qseg(
        dir.path(),
        &[
            "train",
            "--data",
            "data/annotations.json",
            "--resume",
            "m.qsl",
            "--steps",
            "1",
        ],
    );
    assert!(!resumed.status.success());
    assert!(String::from_utf8_lossy(&resumed.stderr).contains("vocabulary"));
}

#[test]
fn infer_writes_overlay_sidecar_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let ann = synth(dir.path());
    train(dir.path(), "1", "m.qsl");
    let ds = Dataset::load(&ann).unwrap();
    let image = format!("data/{}", ds.images[0].file);
    ok(
        dir.path(),
        &[
            "infer",
            "--checkpoint",
            "m.qsl",
            "--image",
            &image,
            "--out",
            "a",
        ],
    );
    ok(
        dir.path(),
        &[
            "infer",
            "--checkpoint",
            "m.qsl",
            "--image",
            &image,
            "--out",
            "b",
        ],
    );
    let stem = Path::new(&ds.images[0].file)
        .file_stem()
        .unwrap()
        .to_str()
        .unwrap()
        .to_string();
    for suffix in ["_overlay.png", ".txt", ".json"] {
        let a = std::fs::read(dir.path().join("a").join(format!("{stem}{suffix}"))).unwrap();
        let b = std::fs::read(dir.path().join("b").join(format!("{stem}{suffix}"))).unwrap();
        assert_eq!(a, b, "{suffix} differs between runs");
    }
    let dump: Vec<serde_json::Value> =
        serde_json::from_slice(&std::fs::read(dir.path().join(format!("a/{stem}.json"))).unwrap())
            .unwrap();
    assert!(dump.len() <= 3);
    assert!(dump.iter().all(|d| d["score"].as_f64().unwrap() > 0.5));

    let missing = qseg(
        dir.path(),
        &["infer", "--checkpoint", "m.qsl", "--image", "missing.png"],
    );
    assert!(!missing.status.success());
}

#[test]
fn gradcheck_lists_every_op_once_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["gradcheck", "--seed", "0"]);
    for case in registry() {
        let hits = text
            .lines()
            .filter(|l| l.split_whitespace().nth(1) == Some(case.name))
            .count();
        assert_eq!(hits, 1, "{}", case.name);
    }
    assert!(text.lines().all(|l| !l.starts_with("FAIL")));
}
