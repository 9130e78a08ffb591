use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pst_core::config::{parse_kv, RunConfig, Task};
use pst_core::data::{gen_cls_scene, gen_seg_scene, member_seed};
use pst_core::formats::{read_sequence, write_atomic, write_sequence, Checkpoint};
use pst_core::gradcheck::{run_module, MODULES, TOLERANCE};
use pst_core::tensor::ParamStore;
use pst_core::train::{ablate, evaluate, run, with_pool, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "pst", version, about = "Point spatio-temporal networks on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a directory of .psts sequences from a key-value scene file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoint, metrics and manifest.
    Train {
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = ["synthia", "kitti", "msr", "desk"])]
        preset: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on every .psts file in a directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every on/off combination of the given flags over several seeds.
    Ablate {
        #[arg(long, value_delimiter = ',', required = true)]
        flags: Vec<String>,
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::GenData { spec, out } => gen_data(&spec, &out),
        Cmd::Train { task, config, preset, seed, out } => {
            let cfg = load_config(task, config.as_deref(), preset.as_deref())?;
            train(&cfg, seed, preset.as_deref(), &out)
        }
        Cmd::Eval { checkpoint, data } => eval(&checkpoint, &data),
        Cmd::Gradcheck { module, instances, seed } => gradcheck(module.as_deref(), instances, seed),
        Cmd::Ablate { flags, task, config, seeds, out } => {
            let cfg = load_config(task, config.as_deref(), None)?;
            ablation(&cfg, &flags, &seeds, out.as_deref())
        }
    }
}

/// Config file (if any) with `--task` merged in; a conflicting task is an error.
fn load_config(task: Option<Task>, path: Option<&Path>, preset: Option<&str>) -> Result<RunConfig> {
    let mut text = match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    if let Some(task) = task {
        match parse_kv(&text)?.get("task") {
            Some(t) if t.parse::<Task>()? != task => bail!("--task {task} conflicts with `task = {t}` in the config"),
            Some(_) => {}
            None => text = format!("task = {task}\n{text}"),
        }
    }
    Ok(RunConfig::load(&text, preset)?)
}

fn gen_data(spec: &Path, out: &Path) -> Result<ExitCode> {
    let text = fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let mut map = parse_kv(&text)?;
    let count: usize = take(&mut map, "count")?.unwrap_or(1);
    let seed: u64 = take(&mut map, "seed")?.unwrap_or(0);
    let task: Task = take(&mut map, "task")?.unwrap_or(Task::Seg);
    let mut cfg = RunConfig::desk(task);
    cfg.apply(&map)?;
    fs::create_dir_all(out)?;
    for i in 0..count {
        let scene = cfg.scene_spec(member_seed(seed, i))?;
        let seq = match task {
            Task::Seg => gen_seg_scene(&scene)?,
            Task::Cls => gen_cls_scene(&scene, i % cfg.num_classes)?.0,
        };
        write_sequence(&out.join(format!("seq_{i:05}.psts")), &seq)?;
    }
    println!("wrote {count} {task} sequences to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn take<T: std::str::FromStr>(map: &mut std::collections::BTreeMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    map.remove(key)
        .map(|v| v.parse::<T>().map_err(|e| anyhow::anyhow!("`{key}`: {e}")))
        .transpose()
}

fn train(cfg: &RunConfig, seed: u64, preset: Option<&str>, out: &Path) -> Result<ExitCode> {
    let result = run(cfg, seed, preset)?;
    fs::create_dir_all(out)?;
    let metadata = format!("# seed = {seed}\n{}", cfg.to_text());
    Checkpoint::from_store(&result.outcome.store, metadata).save(&out.join("checkpoint.pstw"))?;
    write_json(&out.join("metrics.json"), &result.report)?;
    write_json(&out.join("manifest.json"), &result.manifest)?;
    println!("{}", serde_json::to_string_pretty(&result.report)?);
    Ok(ExitCode::SUCCESS)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = RunConfig::load(&ckpt.metadata, None).context("checkpoint metadata is not a run config")?;
    let mut store = ParamStore::<f32>::new();
    let model = Model::build(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    ckpt.load_into(&mut store)?;
    let mut files: Vec<PathBuf> = fs::read_dir(data)
        .with_context(|| format!("reading {}", data.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "psts"));
    files.sort();
    if files.is_empty() {
        bail!("no .psts files in {}", data.display());
    }
    let seqs = with_pool(|| files.iter().map(|p| read_sequence(p)).collect::<pst_core::Result<Vec<_>>>())??;
    let m = evaluate(&model, &store, &seqs, cfg.num_classes, cfg.ignore_class)?;
    println!("{}", serde_json::to_string_pretty(&m)?);
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(module: Option<&str>, instances: usize, seed: u64) -> Result<ExitCode> {
    let modules: Vec<&str> = match module {
        Some(m) => vec![m],
        None => MODULES.to_vec(),
    };
    let mut ok = true;
    for m in modules {
        let report = run_module(m, instances, seed)?;
        let pass = report.passed();
        ok &= pass;
        for c in report.cases.iter().filter(|c| c.max_rel_error >= TOLERANCE) {
            println!("  {m}/{} #{}: {:.3e} at {}", c.name, c.instance, c.max_rel_error, c.worst_param);
        }
        println!(
            "{} {m}: {} cases, max relative error {:.3e}",
            if pass { "PASS" } else { "FAIL" },
            report.cases.len(),
            report.max_rel_error()
        );
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn ablation(cfg: &RunConfig, flags: &[String], seeds: &[u64], out: Option<&Path>) -> Result<ExitCode> {
    let (mut re, mut stsa) = (false, false);
    for f in flags {
        match f.trim() {
            "re" => re = true,
            "stsa" => stsa = true,
            other => bail!("unknown flag `{other}` (re, stsa)"),
        }
    }
    let report = ablate(cfg, re, stsa, seeds)?;
    for r in &report.rows {
        println!(
            "re={:<5} stsa={:<5} median {} {:.4} delta {:+.4}",
            r.use_re, r.use_stsa, report.metric, r.median, r.delta_vs_base
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("ablation.json"), &report)?;
    }
    Ok(ExitCode::SUCCESS)
}
