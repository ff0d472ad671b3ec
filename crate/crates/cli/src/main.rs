//! `ccs` command line: data generation, training, evaluation, assembly,
//! gradient checks, the scaling benchmark and hyperparameter grids.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ccs::bench::{bench_scaling, BenchConfig};
use ccs::dataset::{generate_dataset, load_dataset, save_dataset, split, GenConfig, ShapeRecord};
use ccs::geometry::ply::save_ply;
use ccs::gradsuite::gradient_suite;
use ccs::model::ModelConfig;
use ccs::nn::Checkpoint;
use ccs::trainer::{evaluate, load_model, RunConfig, TrainConfig, Trainer};

const RUN_DIR_ENV: &str = "CCS_RUN_DIR";

#[derive(Parser)]
#[command(name = "ccs", version, about = "Fracture assembly with a shared slot workspace")]
struct Cli {
    /// TOML file with optional [data], [model], [train] and [bench] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parent of the per-run output directory [env: CCS_RUN_DIR, default: runs].
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fracture dataset split into train/val/test.
    GenData(GenArgs),
    /// Train a model on `<data>/train`, validating on `<data>/val`.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Assemble one shape: PLY of the predicted assembly and its poses.
    Assemble(AssembleArgs),
    /// Finite-difference check of every operation and the full model.
    Gradcheck(GradArgs),
    /// Time the workspace stage against dense self-attention over N.
    BenchScaling(BenchArgs),
    /// Train and evaluate once per grid point (k, or w_c × C).
    Grid(GridArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_pc: Option<usize>,
    #[arg(long)]
    cuts_min: Option<usize>,
    #[arg(long)]
    cuts_max: Option<usize>,
    /// Output directory (default: `<run>/data`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TrainOverrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    mon_n: Option<usize>,
    /// Coarse-to-fine networks.
    #[arg(long)]
    ctf: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    w_c: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root holding `train/` and `val/`.
    #[arg(long)]
    data: PathBuf,
    /// Continue from this checkpoint; its embedded config wins.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A dataset directory (one split).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    mon_n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AssembleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    shape: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write every attention matrix to `trace.jsonl`.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = ccs::gradsuite::SUITE_TOL)]
    tol: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated part counts.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    slots: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    data: PathBuf,
    /// Values of k to sweep.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["w_c_values", "c_values"])]
    k_values: Option<Vec<usize>>,
    /// Values of w_c; crossed with `--c-values`.
    #[arg(long, value_delimiter = ',')]
    w_c_values: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    c_values: Option<Vec<f64>>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    data: GenConfig,
    model: ModelConfig,
    train: TrainConfig,
    bench: BenchConfig,
}

/// Invalid user input; maps to exit code 1.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Invalid>().is_some() {
        return 1;
    }
    match err.downcast_ref::<ccs::Error>() {
        Some(ccs::Error::Param(_) | ccs::Error::Parse { .. } | ccs::Error::Contract(_) | ccs::Error::Unsupported(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| anyhow!(Invalid(format!("config {}: {}", path.display(), e.message()))))
}

/// `<base>/<verb>-<timestamp>-seed<seed>`, made unique with a suffix.
fn make_run_dir(base: Option<PathBuf>, verb: &str, seed: u64) -> anyhow::Result<PathBuf> {
    let base = base
        .or_else(|| std::env::var_os(RUN_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
    let stem = format!("{verb}-{stamp}-seed{seed}");
    let mut dir = base.join(&stem);
    let mut i = 1;
    while dir.exists() {
        dir = base.join(format!("{stem}-{i}"));
        i += 1;
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Prints the resolved configuration and seed, and stores it in the run.
fn announce<T: Serialize>(dir: &Path, cfg: &T, seed: u64) -> anyhow::Result<()> {
    let text = toml::to_string(cfg)?;
    println!("run directory: {}", dir.display());
    println!("seed: {seed}");
    println!("--- resolved config ---\n{text}-----------------------");
    fs::write(dir.join("config.toml"), text).with_context(|| format!("writing {}/config.toml", dir.display()))?;
    Ok(())
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => gen_data(file, a, cli.run_dir),
        Command::Train(a) => train(file, a, cli.run_dir),
        Command::Eval(a) => eval(a, cli.run_dir),
        Command::Assemble(a) => assemble(a, cli.run_dir),
        Command::Gradcheck(a) => gradcheck(a, cli.run_dir),
        Command::BenchScaling(a) => bench(file, a, cli.run_dir),
        Command::Grid(a) => grid(file, a, cli.run_dir),
    }
}

fn gen_data(file: FileConfig, a: GenArgs, base: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = file.data;
    if let Some(v) = a.count {
        cfg.count = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.n_pc {
        cfg.n_pc = v;
    }
    if let Some(v) = a.cuts_min {
        cfg.cuts_min = v;
    }
    if let Some(v) = a.cuts_max {
        cfg.cuts_max = v;
    }
    cfg.validate()?;
    let dir = make_run_dir(base, "gen-data", cfg.seed)?;
    announce(&dir, &cfg, cfg.seed)?;
    let out = a.out.unwrap_or_else(|| dir.join("data"));
    let records = generate_dataset(&cfg)?;
    let (tr, va, te) = split(&records, cfg.split, cfg.seed)?;
    for (name, recs) in [("train", &tr), ("val", &va), ("test", &te)] {
        save_dataset(recs, &out.join(name))?;
    }
    println!(
        "wrote {} shapes to {} (train {}, val {}, test {})",
        records.len(),
        out.display(),
        tr.len(),
        va.len(),
        te.len()
    );
    Ok(())
}

fn apply(cfg: &mut RunConfig, o: &TrainOverrides) {
    let t = &mut cfg.train;
    let m = &mut cfg.model;
    if let Some(v) = o.seed {
        t.seed = v;
    }
    if let Some(v) = o.epochs {
        t.epochs = v;
    }
    if let Some(v) = o.max_steps {
        t.max_steps = Some(v);
    }
    if let Some(v) = o.lr {
        t.lr = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.mon_n {
        t.mon_n = v;
    }
    if let Some(v) = o.ctf {
        m.ctf_stages = v;
    }
    if let Some(v) = o.k {
        m.k = v;
    }
    if let Some(v) = o.w_c {
        m.loss.w_c = v;
    }
    if let Some(v) = o.c {
        m.loss.c = v;
    }
}

fn load_split(root: &Path, name: &str) -> anyhow::Result<Vec<ShapeRecord>> {
    let dir = root.join(name);
    if !dir.join("manifest.json").exists() {
        return Ok(Vec::new());
    }
    Ok(load_dataset(&dir)?)
}

/// The model's point count must match the data.
fn match_n_pc(cfg: &mut RunConfig, data: &[ShapeRecord]) {
    if let Some(r) = data.first() {
        if r.n_pc() != cfg.model.n_pc {
            log::warn!("model n_pc {} set to the dataset's {}", cfg.model.n_pc, r.n_pc());
            cfg.model.n_pc = r.n_pc();
        }
    }
}

fn train(file: FileConfig, a: TrainArgs, base: Option<PathBuf>) -> anyhow::Result<()> {
    let train_set = load_split(&a.data, "train")?;
    if train_set.is_empty() {
        bail!(Invalid(format!("no training shapes under {}/train", a.data.display())));
    }
    let val_set = load_split(&a.data, "val")?;
    let mut trainer = match &a.resume {
        Some(path) => Trainer::from_checkpoint(&Checkpoint::load(path)?, path)?,
        None => {
            let mut cfg = RunConfig {
                model: file.model,
                train: file.train,
            };
            apply(&mut cfg, &a.overrides);
            match_n_pc(&mut cfg, &train_set);
            Trainer::new(cfg)?
        }
    };
    let seed = trainer.config.train.seed;
    let dir = make_run_dir(base, "train", seed)?;
    announce(&dir, &trainer.config, seed)?;
    println!(
        "{} train / {} val shapes, {} steps (from step {})",
        train_set.len(),
        val_set.len(),
        trainer.total_steps(train_set.len()),
        trainer.step()
    );
    let logs = trainer.run(&train_set, &val_set, Some(&dir))?;
    if let Some(last) = logs.last() {
        println!("final step {} loss {:?}", last.step, last.loss);
    }
    if !val_set.is_empty() {
        let report = trainer.evaluate(&val_set)?;
        write(&dir.join("val_metrics.csv"), &report.to_csv())?;
        println!("{}", report.to_table());
    }
    println!("checkpoints and logs in {}", dir.display());
    Ok(())
}

fn eval(a: EvalArgs, base: Option<PathBuf>) -> anyhow::Result<()> {
    let (mut cfg, model) = load_model(&a.checkpoint)?;
    if let Some(v) = a.mon_n {
        cfg.train.mon_n = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    cfg.validate()?;
    let records = load_dataset(&a.data)?;
    if records.is_empty() {
        bail!(Invalid(format!("no shapes under {}", a.data.display())));
    }
    let dir = make_run_dir(base, "eval", cfg.train.seed)?;
    announce(&dir, &cfg, cfg.train.seed)?;
    let report = evaluate(&model, &records, cfg.train.mon_n, cfg.train.seed, &cfg.train.thresholds)?;
    write(&dir.join("metrics.csv"), &report.to_csv())?;
    println!("{}", report.to_table());
    Ok(())
}

#[derive(Serialize)]
struct TraceLine<'a> {
    stage: &'a str,
    kind: &'a str,
    head: usize,
    weights: Vec<Vec<f64>>,
}

fn assemble(a: AssembleArgs, base: Option<PathBuf>) -> anyhow::Result<()> {
    let (cfg, model) = load_model(&a.checkpoint)?;
    let records = load_dataset(&a.data)?;
    let rec = records
        .iter()
        .find(|r| r.shape_id == a.shape)
        .ok_or_else(|| anyhow!(Invalid(format!("shape {:?} not in {}", a.shape, a.data.display()))))?;
    let dir = make_run_dir(base, "assemble", a.seed)?;
    announce(&dir, &cfg, a.seed)?;
    let pred = model.coarse_to_fine(&rec.parts, a.seed)?;
    let moved: Vec<_> = rec.parts.iter().zip(&pred.poses).map(|(c, p)| p.apply(c)).collect();
    let truth: Vec<_> = rec.parts.iter().zip(&rec.gt_poses).map(|(c, p)| p.apply(c)).collect();
    save_ply(&dir.join("assembled.ply"), &moved)?;
    save_ply(&dir.join("ground_truth.ply"), &truth)?;
    let mut poses = String::from("# part w x y z tx ty tz\n");
    for (i, p) in pred.poses.iter().enumerate() {
        poses.push_str(&format!("{i} {}\n", p.to_text()));
    }
    write(&dir.join("poses.txt"), &poses)?;
    if a.trace {
        let mut out = String::new();
        for st in &pred.trace {
            for (kind, mats) in [("write", &st.write), ("read", &st.read)] {
                for (head, m) in mats.iter().enumerate() {
                    let (r, c) = m.dims2()?;
                    let weights = (0..r).map(|i| m.data()[i * c..(i + 1) * c].to_vec()).collect();
                    let line = TraceLine {
                        stage: &st.label,
                        kind,
                        head,
                        weights,
                    };
                    out.push_str(&serde_json::to_string(&line)?);
                    out.push('\n');
                }
            }
        }
        write(&dir.join("trace.jsonl"), &out)?;
    }
    let m = ccs::metrics::evaluate_shape(std::slice::from_ref(&pred.poses), rec, &cfg.train.thresholds)?;
    println!(
        "{}: {} parts, SCD {:.4e}, PA {:.3}, CA {:.3}",
        rec.shape_id, m.n_parts, m.scd, m.pa, m.ca
    );
    println!("wrote assembled.ply, ground_truth.ply, poses.txt to {}", dir.display());
    Ok(())
}

fn gradcheck(a: GradArgs, base: Option<PathBuf>) -> anyhow::Result<()> {
    let dir = make_run_dir(base, "gradcheck", a.seed)?;
    #[derive(Serialize)]
    struct Resolved {
        seed: u64,
        tol: f64,
    }
    announce(&dir, &Resolved { seed: a.seed, tol: a.tol }, a.seed)?;
    let start = std::time::Instant::now();
    let cases = gradient_suite(a.seed, a.tol)?;
    let mut text = String::new();
    let mut failed = 0;
    for c in &cases {
        let ok = c.report.passed();
        failed += usize::from(!ok);
        text.push_str(&format!("## {}\n{}\n", c.name, c.report));
        println!("{:<28} worst {:.3e} {}", c.name, c.report.worst(), if ok { "ok" } else { "FAIL" });
    }
    write(&dir.join("gradcheck.txt"), &text)?;
    println!("{} cases, {failed} failed, {:.1}s", cases.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        bail!("{failed} gradient checks exceed tolerance {:e}", a.tol);
    }
    Ok(())
}

fn bench(file: FileConfig, a: BenchArgs, base: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = file.bench;
    if let Some(v) = a.n {
        cfg.ns = v;
    }
    if let Some(v) = a.width {
        cfg.width = v;
    }
    if let Some(v) = a.heads {
        cfg.heads = v;
    }
    if let Some(v) = a.slots {
        cfg.slots = v;
    }
    if let Some(v) = a.repeats {
        cfg.repeats = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let dir = make_run_dir(base, "bench-scaling", cfg.seed)?;
    announce(&dir, &cfg, cfg.seed)?;
    let report = bench_scaling(&cfg)?;
    let csv = report.to_csv();
    write(&dir.join("bench.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn grid(file: FileConfig, a: GridArgs, base: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = RunConfig {
        model: file.model,
        train: file.train,
    };
    apply(&mut cfg, &a.overrides);
    let train_set = load_split(&a.data, "train")?;
    let val_set = load_split(&a.data, "val")?;
    if train_set.is_empty() || val_set.is_empty() {
        bail!(Invalid(format!("grid needs train/ and val/ under {}", a.data.display())));
    }
    match_n_pc(&mut cfg, &train_set);
    let points: Vec<RunConfig> = match (&a.k_values, &a.w_c_values, &a.c_values) {
        (Some(ks), None, None) => ks
            .iter()
            .map(|&k| {
                let mut c = cfg.clone();
                c.model.k = k;
                c
            })
            .collect(),
        (None, wcs, cs) if wcs.is_some() || cs.is_some() => {
            let wcs = wcs.clone().unwrap_or_else(|| vec![cfg.model.loss.w_c]);
            let cs = cs.clone().unwrap_or_else(|| vec![cfg.model.loss.c]);
            wcs.iter()
                .flat_map(|&w| cs.iter().map(move |&c| (w, c)))
                .map(|(w, c)| {
                    let mut r = cfg.clone();
                    r.model.loss.w_c = w;
                    r.model.loss.c = c;
                    r
                })
                .collect()
        }
        _ => bail!(Invalid("give --k-values, or --w-c-values and/or --c-values".into())),
    };
    for p in &points {
        p.validate()?;
    }
    let dir = make_run_dir(base, "grid", cfg.train.seed)?;
    announce(&dir, &cfg, cfg.train.seed)?;
    let mut csv = String::from("k,w_c,c,scd,pa,ca,rmse_r_deg,rmse_t\n");
    for (i, p) in points.into_iter().enumerate() {
        let (k, w_c, c) = (p.model.k, p.model.loss.w_c, p.model.loss.c);
        let sub = dir.join(format!("point{i:02}"));
        fs::create_dir_all(&sub).with_context(|| format!("creating {}", sub.display()))?;
        write(&sub.join("config.toml"), &p.to_toml())?;
        let mut t = Trainer::new(p)?;
        t.run(&train_set, &val_set, Some(&sub))?;
        let g = t.evaluate(&val_set)?.aggregate();
        println!("k={k} w_c={w_c} C={c}: SCD {:.4e} PA {:.3} CA {:.3}", g.scd, g.pa, g.ca);
        csv.push_str(&format!("{k},{w_c},{c},{},{},{},{},{}\n", g.scd, g.pa, g.ca, g.rmse_r, g.rmse_t));
        write(&dir.join("grid.csv"), &csv)?;
    }
    Ok(())
}
