use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const TINY: [&str; 11] = [
    "train_scenes=8",
    "support_pool_scenes=16",
    "test_scenes=4",
    "points_per_scene=256",
    "blob_points=32",
    "min_points=8",
    "phase1_iters=20",
    "adaptation_ratio=0.25",
    "grad_batches=4",
    "backbone_hidden=8",
    "head_hidden=8",
];

fn hop(args: &[&str], out: &Path, extra: &[&str]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hop"));
    c.args(args).arg("--out").arg(out);
    for kv in TINY.iter().chain(extra) {
        c.arg("--set").arg(kv);
    }
    c.output().expect("spawning hop")
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "hop failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.path().strip_prefix(dir).unwrap().to_path_buf())
        .collect();
    v.sort();
    v
}

#[test]
fn smoke_run_emits_every_expected_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let start = Instant::now();
    for cmd in ["gen", "phase1", "phase2", "eval"] {
        ok(&hop(&[cmd, "--seed", "3"], out, &[]));
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "smoke run took {elapsed:?}");

    let files = files_under(out);
    let expected = [
        "data/manifest.json",
        "phase1.ckpt",
        "phase2.ckpt",
        "metrics/phase1.jsonl",
        "metrics/phase1_confusion.csv",
        "metrics/phase1_loss.csv",
        "metrics/phase2.jsonl",
        "metrics/phase2_confusion.csv",
        "metrics/phase2_confidence_histogram.csv",
        "metrics/phase2_class_frequency.csv",
        "metrics/phase2_prototype_cosine.csv",
        "metrics/phase2_loss.csv",
        "metrics/phase2_support.json",
        "metrics/eval.jsonl",
        "metrics/eval_confusion.csv",
    ];
    for f in expected {
        assert!(files.contains(&PathBuf::from(f)), "missing {f}; have {files:?}");
    }
    let scenes = files.iter().filter(|p| p.extension().is_some_and(|e| e == "bin")).count();
    assert_eq!(scenes, 8 + 16 + 4);

    // eval of the final checkpoint reproduces the phase-2 metrics
    let read = |name: &str| -> serde_json::Value {
        let text = std::fs::read_to_string(out.join("metrics").join(name)).unwrap();
        serde_json::from_str(text.lines().next().unwrap()).unwrap()
    };
    let (p2, ev) = (read("phase2.jsonl"), read("eval.jsonl"));
    for key in ["miou_b", "miou_n", "hm", "confusion"] {
        assert_eq!(p2[key], ev[key], "{key}");
    }
}

#[test]
fn manifest_counts_match_files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    ok(&hop(&["gen", "--seed", "1"], dir.path(), &["test_scenes=0"]));
    let data = dir.path().join("data");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    for split in ["train", "support", "test"] {
        let on_disk = files_under(&data.join(split)).len();
        let recorded = manifest[format!("{split}_scenes")].as_u64().unwrap() as usize;
        assert_eq!(recorded, on_disk, "{split}");
    }
    assert_eq!(manifest["test_scenes"], 0);
}

#[test]
fn gen_is_byte_identical_across_reruns() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&hop(&["gen", "--seed", "5"], a.path(), &[]));
    ok(&hop(&["gen", "--seed", "5"], b.path(), &[]));
    let files = files_under(a.path());
    assert_eq!(files, files_under(b.path()));
    for f in &files {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f:?}");
    }
}

#[test]
fn missing_prerequisites_fail_with_guidance() {
    let dir = tempfile::tempdir().unwrap();
    let o = hop(&["phase1"], dir.path(), &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("hop gen"));

    ok(&hop(&["gen"], dir.path(), &[]));
    let o = hop(&["phase2"], dir.path(), &[]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("phase1.ckpt") && err.contains("hop phase1"), "{err}");

    let o = hop(&["eval"], dir.path(), &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("hop phase1"));
}

#[test]
fn oracle_predictor_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    ok(&hop(&["gen"], dir.path(), &[]));
    let stdout = ok(&hop(&["eval"], dir.path(), &["eval_predictor=\"oracle\""]));
    let rec: serde_json::Value = serde_json::from_str(stdout.lines().next().unwrap()).unwrap();
    assert_eq!(rec["stage"], "eval_oracle");
    assert_eq!(rec["hm"].as_f64(), Some(100.0));
    assert_eq!(rec["miou_a"].as_f64(), Some(100.0));
}

#[test]
fn bad_configuration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = hop(&["gen"], dir.path(), &["not_a_key=1"]);
    assert!(!o.status.success());
    let o = hop(&["gen"], dir.path(), &["adaptation_ratio=2"]);
    assert!(!o.status.success());
}

#[test]
fn report_on_empty_directory_writes_header_only_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hop")).arg("report").arg(dir.path()).output().unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    let flags = std::fs::read_to_string(dir.path().join("report/flags.csv")).unwrap();
    assert_eq!(flags.lines().count(), 1);
}

#[test]
fn ablate_then_report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let extra = ["ablate_seeds=1", "phase1_iters=8", "test_scenes=2"];
    ok(&hop(&["ablate", "--seed", "2"], dir.path(), &extra));
    let ablate = dir.path().join("ablate");
    let runs = std::fs::read_to_string(ablate.join("runs.jsonl")).unwrap();
    assert_eq!(runs.lines().count(), 13);

    let report = dir.path().join("again");
    let o = Command::new(env!("CARGO_BIN_EXE_hop"))
        .args(["report"])
        .arg(&ablate)
        .arg("--out")
        .arg(&report)
        .output()
        .unwrap();
    assert!(o.status.success());
    for f in ["flags.csv", "lambda_orth.csv", "adaptation_ratio.csv"] {
        assert_eq!(
            std::fs::read_to_string(report.join(f)).unwrap(),
            std::fs::read_to_string(ablate.join("report").join(f)).unwrap(),
            "{f}"
        );
    }
    // one seed: every interval collapses to its point
    let flags = std::fs::read_to_string(report.join("flags.csv")).unwrap();
    let header: Vec<&str> = flags.lines().next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    for line in flags.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[col("hm_median")], cells[col("hm_ci_low")]);
        assert_eq!(cells[col("hm_median")], cells[col("hm_ci_high")]);
    }
}
