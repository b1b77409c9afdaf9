use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fdm::commands::read_log_losses;
use fdm::corpus::{blobs, corpus_hash};
use fdm::formats::{read_tensor, write_tensor};
use tempfile::TempDir;

/// A run small enough for debug-free test builds: 8×8 grey blobs, K = 2.
const SMALL: &[&str] = &[
    "transform.image_size=8",
    "transform.channels=1",
    "corpus.source=blobs,n=64,size=8",
    "model.base_channels=8",
    "train.batch_size=4",
    "train.steps=6",
    "train.checkpoint_every=3",
    "sample.dt=0.05",
    "sample.eta=0",
];

fn fdm(out: &Path, extra: &[&str], args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fdm"));
    for s in SMALL.iter().chain(extra) {
        cmd.arg("--set").arg(s);
    }
    cmd.arg("--set").arg(format!("output.dir={}", out.display()));
    cmd.args(args).output().expect("running fdm")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "fdm failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn train(out: &Path, extra: &[&str]) -> PathBuf {
    ok(&fdm(out, extra, &["train"]));
    out.join("checkpoint.fdmc")
}

#[test]
fn resume_is_bit_exact() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let straight = train(&a, &[]);
    let mid = a.join("checkpoint_0000003.fdmc");
    assert!(mid.exists());
    fs::create_dir_all(&b).unwrap();
    fs::copy(a.join("train_log.csv"), b.join("train_log.csv")).unwrap();
    ok(&fdm(&b, &[], &["train", "--resume", mid.to_str().unwrap()]));
    assert_eq!(fs::read(&straight).unwrap(), fs::read(b.join("checkpoint.fdmc")).unwrap());
    let la = read_log_losses(&a.join("train_log.csv")).unwrap();
    let lb = read_log_losses(&b.join("train_log.csv")).unwrap();
    assert_eq!(la, lb);
    assert_eq!(la.iter().map(|r| r.0).collect::<Vec<_>>(), (1..=6).collect::<Vec<u64>>());
}

#[test]
fn mismatched_config_is_refused_with_a_diff() {
    let tmp = TempDir::new().unwrap();
    let ck = train(&tmp.path().join("a"), &[]);
    let o = fdm(&tmp.path().join("b"), &["model.base_channels=16"], &["train", "--resume", ck.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("base_channels: 8 -> 16"), "{err}");
    let o = fdm(&tmp.path().join("c"), &["schedule.rescale=sp"], &["sample", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(fdm(tmp.path(), &["train.nonsense=1"], &["train"]).status.code(), Some(2));
    assert_eq!(fdm(tmp.path(), &["sample.eta=two"], &["train"]).status.code(), Some(2));
    assert_eq!(fdm(tmp.path(), &[], &["bogus"]).status.code(), Some(2));
}

#[test]
fn corpus_hash_is_stable() {
    let tmp = TempDir::new().unwrap();
    train(&tmp.path().join("a"), &[]);
    let run: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("a/run.json")).unwrap()).unwrap();
    let hash = run["corpus_hash"].as_str().unwrap();
    assert_eq!(hash, corpus_hash(&blobs(64, 8, 1, 0)));
    assert_eq!(hash, "ed6201fa7657a25719af9209b044104a8fda9e96c39c05a9d9dcf41930f408b2");
}

#[test]
fn raw_tensor_round_trip() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("t.fdmt");
    let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.25 - 3.0).chain([f32::MIN_POSITIVE, -0.0]).collect();
    write_tensor(&path, &[2, 13], &data).unwrap();
    let (dims, back) = read_tensor(&path).unwrap();
    assert_eq!(dims, vec![2, 13]);
    assert_eq!(back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] = b'X';
    fs::write(&path, bytes).unwrap();
    assert!(read_tensor(&path).is_err());
}

#[test]
fn deterministic_samples_and_contact_sheet() {
    let tmp = TempDir::new().unwrap();
    let ck = train(&tmp.path().join("a"), &[]);
    let ck = ck.to_str().unwrap();
    let (s1, s2) = (tmp.path().join("s1"), tmp.path().join("s2"));
    ok(&fdm(&s1, &[], &["sample", "--checkpoint", ck, "-n", "1"]));
    ok(&fdm(&s2, &[], &["sample", "--checkpoint", ck, "-n", "1"]));
    let png = |d: &Path| fs::read(d.join("samples/sample_000000.png")).unwrap();
    assert_eq!(png(&s1), png(&s2));
    assert!(!s1.join("samples/contact_sheet.png").exists());

    let s3 = tmp.path().join("s3");
    ok(&fdm(&s3, &[], &["sample", "--checkpoint", ck, "-n", "3"]));
    assert_eq!(png(&s1), png(&s3));
    for f in ["contact_sheet.png", "contact_sheet.json", "sample_000002.fdmt", "sample_000002.json"] {
        assert!(s3.join("samples").join(f).exists(), "{f}");
    }
    let (dims, _) = read_tensor(&s3.join("samples/sample_000001.fdmt")).unwrap();
    assert_eq!(dims, vec![1, 8, 8]);
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(s3.join("samples/sample_000001.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 1);
    assert_eq!(meta["checkpoint_step"], 6);
    assert_eq!(meta["eta"], 0.0);
}

#[test]
fn condgen_writes_outputs_and_accepts_tensor_conditions() {
    let tmp = TempDir::new().unwrap();
    let ck = train(&tmp.path().join("a"), &[]);
    let ck = ck.to_str().unwrap();
    let c1 = tmp.path().join("c1");
    ok(&fdm(&c1, &["cond.n_init=2"], &["condgen", "--checkpoint", ck, "-n", "2"]));
    let dir = c1.join("condgen");
    for f in ["cond_0000.png", "cond_0001_input.png", "cond_0001_condition.fdmt", "contact_sheet.png"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let cond = dir.join("cond_0001_condition.fdmt");
    assert_eq!(read_tensor(&cond).unwrap().0, vec![1, 4, 4]);
    let c2 = tmp.path().join("c2");
    ok(&fdm(&c2, &["cond.n_init=2"], &["condgen", "--checkpoint", ck, "--condition", cond.to_str().unwrap()]));
    assert!(c2.join("condgen/cond_0000.png").exists());
    let bad = tmp.path().join("bad.fdmt");
    write_tensor(&bad, &[1, 2, 2], &[0.0; 4]).unwrap();
    let o = fdm(&tmp.path().join("c3"), &[], &["condgen", "--checkpoint", ck, "--condition", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

fn verify(out: &Path, draws: &str, extra: &[&str], args: &[&str]) -> (Option<i32>, serde_json::Value) {
    let report = out.join("report.json");
    fs::create_dir_all(out).unwrap();
    let mut all = vec!["verify", "--draws", draws, "--report", report.to_str().unwrap()];
    all.extend_from_slice(args);
    let o = fdm(out, extra, &all);
    let code = o.status.code();
    assert!(report.exists(), "{}", String::from_utf8_lossy(&o.stderr));
    (code, serde_json::from_slice(&fs::read(report).unwrap()).unwrap())
}

fn check<'a>(report: &'a serde_json::Value, name: &str) -> &'a serde_json::Value {
    report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == name)
        .unwrap_or_else(|| panic!("no check {name}"))
}

#[test]
fn verify_passes_and_writes_curves() {
    let tmp = TempDir::new().unwrap();
    let curves = tmp.path().join("curves.csv");
    let (code, report) = verify(tmp.path(), "100000", &[], &["--curves", curves.to_str().unwrap()]);
    assert_eq!(code, Some(0), "{report:#}");
    assert_eq!(report["passed"], true);
    assert_eq!(check(&report, "snr.boundary2")["passed"], true);
    let text = fs::read_to_string(curves).unwrap();
    assert!(text.starts_with("t,alpha,sigma,stage\n"));
    assert_eq!(text.lines().count(), 1002);
}

#[test]
fn verify_detects_a_corrupted_rescale() {
    let tmp = TempDir::new().unwrap();
    let (code, report) = verify(tmp.path(), "2000", &["schedule.rescale=sp"], &["--corrupt-rescale", "1.5"]);
    assert_eq!(code, Some(1));
    assert_eq!(report["passed"], false);
    assert_eq!(check(&report, "schedule.sp_jump.boundary1")["passed"], false);
    assert_eq!(check(&report, "snr.boundary1")["passed"], false);
}

#[test]
fn verify_with_one_stage_checks_the_reduction() {
    let tmp = TempDir::new().unwrap();
    let (_, report) = verify(tmp.path(), "2000", &["transform.stages=0", "cond.stage=0"], &[]);
    let reductions: Vec<&serde_json::Value> = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["name"].as_str().unwrap().starts_with("sampler.k0_reduction"))
        .collect();
    assert_eq!(reductions.len(), 2, "{report:#}");
    assert!(reductions.iter().all(|c| c["passed"] == true), "{report:#}");
}
