//! End-to-end acceptance run: one PASS/FAIL line per criterion.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use common::*;
use pst_core::config::{Preset, RunConfig, Task, MSR_ROWS, FULL_ENCODER};
use pst_core::data::gen_seg_scene;
use pst_core::formats::{decode_sequence, encode_sequence, write_atomic, Checkpoint};
use pst_core::gradcheck::{run_module, MODULES, TOLERANCE};
use pst_core::tensor::{Graph, ParamStore};
use pst_core::train::{ablate, run, AblationReport, Model, THREADS_ENV};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn out_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("acceptance output directory");
    dir
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for m in MODULES {
        let r = run_module(m, 10, 0).map_err(|e| e.to_string())?;
        let mut names: Vec<&str> = r.cases.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        let min_inst = names.iter().map(|n| r.instances_of(n)).min().unwrap_or(0);
        ok &= r.passed() && min_inst >= 10;
        lines.push(format!("{m} {:.1e} ({} cases, >= {min_inst} each)", r.max_rel_error(), names.len()));
    }
    let secs = start.elapsed().as_secs_f64();
    check(ok && secs < 120.0, format!("{}; tol {TOLERANCE:e}; {secs:.1}s", lines.join(", ")))
}

fn attention_invariants() -> Outcome {
    let s = attention_check(100, 1);
    check(
        s.row_sum <= 1e-6 && s.permutation <= 1e-5 && s.uniform <= 1e-6,
        format!("row sum {:.1e}, permutation {:.1e}, zero-projection uniformity {:.1e}", s.row_sum, s.permutation, s.uniform),
    )
}

fn re_invariants() -> Outcome {
    let s = re_check(100, 2);
    check(
        s.weight_sum <= 1e-6 && s.convexity <= 1e-6 && s.fixed_point <= 1e-6,
        format!("|a1+a2-1| {:.1e}, convexity {:.1e}, k == n {:.1e}", s.weight_sum, s.convexity, s.fixed_point),
    )
}

fn oracle_equivalence() -> Outcome {
    fps_check(100, 3)?;
    let idw = idw_check(100, 4)?;
    metrics_check(200, 5)?;
    check(idw <= 1e-6, format!("fps 100/100 exact, idw max dev {idw:.1e}, metrics 200/200 exact"))
}

fn seg_overfit() -> Outcome {
    let cfg = RunConfig::desk(Task::Seg);
    let r = run(&cfg, 0, Some("desk")).map_err(|e| e.to_string())?;
    let (first, last) = (r.manifest.initial_loss.unwrap_or(f64::NAN), r.manifest.final_loss.unwrap_or(f64::NAN));
    let covered: u64 = r.metrics.confusion.iter().flatten().sum();
    let expected = (cfg.train_sequences * cfg.frames * cfg.scene.points) as u64;
    let t = r.outcome.wall_time_s;
    check(
        r.metrics.miou >= 0.99 && last < 0.1 * first && t < 300.0 && covered == expected,
        format!(
            "mIoU {:.4}, loss {first:.3} -> {last:.4} over {} steps, {covered}/{expected} points scored, {t:.0}s",
            r.metrics.miou,
            r.outcome.losses.len()
        ),
    )
}

fn cls_desk() -> Outcome {
    let cfg = RunConfig::desk(Task::Cls);
    let r = run(&cfg, 0, Some("desk")).map_err(|e| e.to_string())?;
    let t = r.outcome.wall_time_s;
    check(
        r.metrics.oacc >= 0.90 && t < 600.0,
        format!("test accuracy {:.3} on {} sequences, {t:.0}s", r.metrics.oacc, cfg.test_sequences),
    )
}

fn save_report(name: &str, report: &AblationReport) -> Result<PathBuf, String> {
    let path = out_dir().join(name);
    let text = serde_json::to_string_pretty(report).map_err(|e| e.to_string())?;
    write_atomic(&path, text.as_bytes()).map_err(|e| e.to_string())?;
    Ok(path)
}

fn ablation() -> Outcome {
    let seeds: Vec<u64> = (0..5).collect();
    let cls = ablate(&RunConfig::desk(Task::Cls), false, true, &seeds).map_err(|e| e.to_string())?;
    let seg_cfg = RunConfig::load(include_str!("../../../configs/ablate_seg.cfg"), None).map_err(|e| e.to_string())?;
    let seg = ablate(&seg_cfg, true, true, &seeds).map_err(|e| e.to_string())?;
    let p1 = save_report("ablation_cls.json", &cls)?;
    save_report("ablation_seg.json", &seg)?;
    let (mean, stsa) = (cls.row(false, false).unwrap(), cls.row(false, true).unwrap());
    let (base, re) = (seg.row(false, false).unwrap(), seg.row(true, false).unwrap());
    let rows: Vec<String> = seg
        .rows
        .iter()
        .map(|r| format!("re={} stsa={} {:.4} ({:+.4})", r.use_re as u8, r.use_stsa as u8, r.median, r.delta_vs_base))
        .collect();
    check(
        stsa.median >= mean.median && re.median >= base.median && seg.rows.len() == 4,
        format!(
            "cls accuracy median stsa {:.3} vs mean-pool {:.3} ({:+.3}); seg mIoU medians {}; reports in {}",
            stsa.median,
            mean.median,
            stsa.delta_vs_base,
            rows.join(", "),
            p1.parent().unwrap().display()
        ),
    )
}

fn determinism() -> Outcome {
    let text = "task = seg\npoints = 64\nsa_points = 32, 8\nsa_k = 8, 4\nsa_mlp = 8; 16\nre_mlp = 16\n\
                re_resolution_mlp = 16\nre_k = 4\nstsa_dim = 16\nfp_re_mlp = 16\nfp_mlp = 16; 8\nsteps = 15\n\
                train_sequences = 4\ntest_sequences = 2\n";
    let cfg = RunConfig::load(text, None).map_err(|e| e.to_string())?;
    let json = |threads: &str| -> Result<String, String> {
        std::env::set_var(THREADS_ENV, threads);
        let r = run(&cfg, 42, None).map_err(|e| e.to_string());
        std::env::remove_var(THREADS_ENV);
        serde_json::to_string(&r?.report).map_err(|e| e.to_string())
    };
    let (a, b, c) = (json("1")?, json("1")?, json("3")?);
    check(
        a == b && a == c,
        format!("PST_THREADS=1 twice: {}; 3 threads: {}", if a == b { "identical" } else { "differ" }, if a == c { "identical" } else { "differ" }),
    )
}

fn format_round_trips() -> Outcome {
    let mut r = rng(6);
    for i in 0..50 {
        let seq = random_sequence(&mut r);
        let bytes = encode_sequence(&seq).map_err(|e| e.to_string())?;
        let back = decode_sequence(&bytes).map_err(|e| e.to_string())?;
        if !sequences_bit_equal(&seq, &back) || encode_sequence(&back).map_err(|e| e.to_string())? != bytes {
            return Err(format!("sequence {i} changed in round trip"));
        }
        let ckpt = random_checkpoint(&mut r);
        let bytes = ckpt.encode().map_err(|e| e.to_string())?;
        let back = Checkpoint::decode(&bytes).map_err(|e| e.to_string())?;
        if back != ckpt || back.encode().map_err(|e| e.to_string())? != bytes {
            return Err(format!("checkpoint {i} changed in round trip"));
        }
    }
    Ok("PSTS 50/50, PSTW 50/50 bit-exact".into())
}

fn presets() -> Outcome {
    let e = |e: pst_core::Error| e.to_string();
    let mut ok = true;
    for (name, lr) in [("synthia", 0.0016), ("kitti", 0.012)] {
        let p = Preset::resolve(name, None).map_err(e)?;
        ok &= (p.lr, p.batch, p.points, p.frames) == (lr, 2, 16384, 3);
        ok &= p.encoder.as_deref() == Some(&FULL_ENCODER[..]);
    }
    for (frames, batch, points) in MSR_ROWS {
        let cfg = RunConfig::load(&format!("task = cls\nframes = {frames}\n"), Some("msr")).map_err(e)?;
        ok &= (cfg.lr, cfg.batch, cfg.scene.points, cfg.frames) == (0.001, batch, points, frames);
    }
    // learning rate from the preset reaches the run manifest
    let small = "points = 64\nsa_points = 32, 8\nsa_k = 8, 4\nsa_mlp = 8; 16\nre_mlp = 16\nre_resolution_mlp = 16\n\
                 re_k = 4\nstsa_dim = 16\nfp_re_mlp = 16\nfp_mlp = 16; 8\nsteps = 1\ntrain_sequences = 2\n";
    let echoed = run(&RunConfig::load(small, Some("kitti")).map_err(e)?, 0, Some("kitti")).map_err(e)?.manifest;
    ok &= echoed.lr == 0.012 && echoed.preset.as_deref() == Some("kitti");
    // full-size encoder: construct and check the forward shape
    let start = Instant::now();
    let cfg = RunConfig::load("", Some("synthia")).map_err(e)?;
    let seq = gen_seg_scene(&cfg.scene_spec(0).map_err(e)?).map_err(e)?;
    let mut store = ParamStore::<f32>::new();
    let model = Model::build(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).map_err(e)?;
    let geom = model.prepare(&seq).map_err(e)?;
    let mut g = Graph::new(&store);
    let logits = model.logits(&mut g, &seq, &geom).map_err(e)?;
    let shape = g.shape(logits).to_vec();
    ok &= shape == [cfg.frames * cfg.scene.points, cfg.num_classes];
    check(
        ok,
        format!(
            "synthia/kitti/msr values match, kitti lr echoed as {}, encoder {FULL_ENCODER:?} logits {shape:?} in {:.1}s",
            echoed.lr,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient-integrity", gradient_integrity),
        ("attention-invariants", attention_invariants),
        ("re-invariants", re_invariants),
        ("oracle-equivalence", oracle_equivalence),
        ("format-round-trips", format_round_trips),
        ("determinism", determinism),
        ("presets", presets),
        ("seg-overfit", seg_overfit),
        ("cls-desk", cls_desk),
        ("ablation", ablation),
    ];
    // `cargo test -- --list` and name filters
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (name, _) in &criteria {
            println!("{name}: test");
        }
        return;
    }
    let filter = args.iter().find(|a| !a.starts_with('-'));
    let mut failed = 0;
    let mut ran = 0;
    for (name, f) in criteria {
        if filter.is_some_and(|p| !name.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {name} [{secs:.1}s]: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name} [{secs:.1}s]: {d}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
