use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "points = 64\nsa_points = 32, 8\nsa_k = 8, 4\nsa_mlp = 8; 16\nre_mlp = 16\n\
                    re_resolution_mlp = 16\nre_k = 4\nstsa_dim = 16\nfp_re_mlp = 16\nfp_mlp = 16; 8\n\
                    steps = 10\ntrain_sequences = 3\ntest_sequences = 1\n";

fn pst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pst")).args(args).env("PST_THREADS", "1").output().expect("run pst")
}

fn ok(args: &[&str]) -> String {
    let out = pst(args);
    assert!(out.status.success(), "pst {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write(tmp.path(), "scene.spec", "task = seg\ncount = 3\nseed = 5\npoints = 64\nframes = 2\n");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-data", "--spec", &spec, "--out", s(&a)]);
    ok(&["gen-data", "--spec", &spec, "--out", s(&b)]);
    let files = listing(&a);
    assert_eq!(files.len(), 3);
    assert!(files.iter().all(|(n, bytes)| n.ends_with(".psts") && &bytes[..4] == b"PSTS"));
    assert_eq!(files, listing(&b));
}

#[test]
fn train_then_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "run.cfg", TINY);
    let run = tmp.path().join("run");
    ok(&["train", "--task", "seg", "--config", &cfg, "--seed", "3", "--out", s(&run)]);
    for f in ["checkpoint.pstw", "metrics.json", "manifest.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    assert!(listing(&run).iter().all(|(n, _)| !n.starts_with('.')), "temporary files left behind");
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(run.join("metrics.json")).unwrap()).unwrap();
    for k in ["miou", "macc", "oacc"] {
        let x = metrics[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&x));
    }

    let spec = write(tmp.path(), "eval.spec", "task = seg\ncount = 2\nseed = 9\npoints = 64\n");
    let data = tmp.path().join("data");
    ok(&["gen-data", "--spec", &spec, "--out", s(&data)]);
    let before = (listing(&data), listing(&run));
    let ckpt = run.join("checkpoint.pstw");
    let first = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    let second = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert_eq!(first, second);
    assert_eq!(before, (listing(&data), listing(&run)));
    let m: serde_json::Value = serde_json::from_str(&first).unwrap();
    let scored: u64 = m["confusion"].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()).map(|x| x.as_u64().unwrap()).sum();
    assert_eq!(scored, 2 * 3 * 64);
}

#[test]
fn same_seed_single_thread_metrics_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "run.cfg", TINY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["train", "--config", &cfg, "--seed", "11", "--out", s(&a)]);
    ok(&["train", "--config", &cfg, "--seed", "11", "--out", s(&b)]);
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.pstw")).unwrap(), fs::read(b.join("checkpoint.pstw")).unwrap());
}

#[test]
fn preset_learning_rate_is_echoed_in_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "run.cfg", &TINY.replace("steps = 10", "steps = 1"));
    let out = tmp.path().join("run");
    ok(&["train", "--task", "seg", "--config", &cfg, "--preset", "kitti", "--out", s(&out)]);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["lr"].as_f64(), Some(0.012));
    assert_eq!(m["preset"].as_str(), Some("kitti"));
    assert_eq!(m["steps"].as_u64(), Some(1));
}

#[test]
fn conflicting_task_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "run.cfg", "task = seg\n");
    let out = pst(&["train", "--task", "cls", "--config", &cfg, "--out", s(&tmp.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("conflicts"));
}

#[test]
fn gradcheck_exit_status() {
    let out = ok(&["gradcheck", "--module", "ops", "--instances", "2"]);
    assert!(out.contains("PASS ops"));
    assert!(!pst(&["gradcheck", "--module", "nonexistent"]).status.success());
}

#[test]
fn ablate_writes_four_configurations_with_deltas() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "run.cfg", &TINY.replace("steps = 10", "steps = 2"));
    let out = tmp.path().join("abl");
    ok(&["ablate", "--flags", "re,stsa", "--config", &cfg, "--seeds", "0,1", "--out", s(&out)]);
    let r: serde_json::Value = serde_json::from_slice(&fs::read(out.join("ablation.json")).unwrap()).unwrap();
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0]["delta_vs_base"].as_f64(), Some(0.0));
    assert!(rows.iter().all(|row| row["scores"].as_array().unwrap().len() == 2));
    assert!(!pst(&["ablate", "--flags", "bogus", "--config", &cfg]).status.success());
}
