//! `metamod`: train, evaluate, sweep and analyze few-task meta-learners.

mod data;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use metamod_core::episodes::Dataset;
use metamod_core::evaluator::{cross_domain_eval, task_similarity, EvalOptions, MetricsRecord, SimilarityOptions};
use metamod_core::trainer::{
    Checkpoint, Method, Model, TrainConfig, Trainer, ABORT_FILE, BEST_FILE, CHECKPOINT_FILE, METRICS_FILE,
};
use serde::Serialize;
use tracing::{info, warn};

use data::DataArgs;
use manifest::{
    fresh_dir, now, source_version, write_json, RunManifest, Status, CONFIG_FILE, EVAL_FILE, MANIFEST_FILE,
    MANIFEST_VERSION, SWEEP_CSV_SCHEMA,
};

#[derive(Parser)]
#[command(name = "metamod", version, about = "Few-task meta-learning by task modulation")]
struct Cli {
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Meta-train one model in a fresh run directory.
    Train(TrainCmd),
    /// Continue an interrupted run from its last checkpoint.
    Resume(ResumeCmd),
    /// Meta-test a checkpoint.
    Eval(EvalCmd),
    /// Train once per value of one config key and tabulate accuracy.
    Sweep(SweepCmd),
    /// Distances between meta-train tasks (as the model modulates them)
    /// and meta-test tasks.
    Analyze(AnalyzeCmd),
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: metamod_core::Error| e.to_string())
}

/// Config file first, then the dedicated flags, then `--set` pairs.
#[derive(Args, Clone, Debug)]
struct ConfigArgs {
    /// TOML file with any subset of the config keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// vanilla, mlti, mtm, vtm or hvtm.
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    /// Query instances per class.
    #[arg(long)]
    query: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Weight of the original-task loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Weight of the KL term.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Any config key, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        if let Some(m) = self.method {
            cfg.method = m;
        }
        macro_rules! apply {
            ($($flag:ident => $key:ident),*) => {$(
                if let Some(v) = self.$flag {
                    cfg.$key = v;
                }
            )*};
        }
        apply!(n_way => n_way, k_shot => k_shot, query => q_per_class, iterations => iterations, lr => lr,
            mc_samples => mc_samples, lambda => lambda_orig, beta => kl_weight, seed => seed);
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.set(k.trim(), v.trim()).with_context(|| format!("--set {kv}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The meta-test run at the end of training.
#[derive(Args, Clone, Debug)]
struct FinalEvalArgs {
    #[arg(long, default_value_t = 600)]
    eval_episodes: usize,
    #[arg(long, default_value_t = 15)]
    eval_query: usize,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
}

impl FinalEvalArgs {
    fn options(&self, cfg: &TrainConfig) -> EvalOptions {
        EvalOptions {
            n_episodes: self.eval_episodes,
            n_way: cfg.n_way,
            k_shot: cfg.k_shot,
            q_per_class: self.eval_query,
            seed: self.eval_seed,
        }
    }

    fn to_args(&self) -> Vec<String> {
        vec![
            "--eval-episodes".into(),
            self.eval_episodes.to_string(),
            "--eval-query".into(),
            self.eval_query.to_string(),
            "--eval-seed".into(),
            self.eval_seed.to_string(),
        ]
    }
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    eval: FinalEvalArgs,
    /// Parent of the timestamped run directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Exact run directory instead of a timestamped one under `--out`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Write the config and manifest, then stop.
    #[arg(long)]
    dry_run: bool,
    /// Checkpoint and stop once this many iterations are done; continue
    /// later with `resume`.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct ResumeCmd {
    run_dir: PathBuf,
}

/// Dataset selection for commands that read a checkpoint; unset fields
/// fall back to the run's manifest, then to the defaults.
#[derive(Args, Clone, Debug)]
struct DataOverride {
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    train_classes: Option<usize>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
}

impl DataOverride {
    fn resolve(&self, checkpoint: &Path) -> DataArgs {
        let base = checkpoint
            .parent()
            .filter(|d| d.join(MANIFEST_FILE).is_file())
            .and_then(|d| RunManifest::load(d).ok())
            .map(|m| m.data)
            .unwrap_or_else(|| DataArgs {
                dataset: "synthetic".into(),
                train_classes: None,
                split_seed: 0,
                data_seed: 0,
                image_size: 84,
            });
        DataArgs {
            dataset: self.dataset.clone().unwrap_or(base.dataset),
            train_classes: self.train_classes.or(base.train_classes),
            split_seed: self.split_seed.unwrap_or(base.split_seed),
            data_seed: self.data_seed.unwrap_or(base.data_seed),
            image_size: self.image_size.unwrap_or(base.image_size),
        }
    }
}

#[derive(Args)]
struct EvalCmd {
    /// Checkpoint file, or a run directory holding one.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataOverride,
    /// Accepted for symmetry with `train` and ignored: meta-test never
    /// modulates.
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long, default_value_t = 600)]
    episodes: usize,
    /// Defaults to the checkpoint's training value.
    #[arg(long)]
    n_way: Option<usize>,
    /// Defaults to the checkpoint's training value.
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long, default_value_t = 15)]
    query: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON; defaults to `eval-<dataset>.json` beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepCmd {
    /// Config key to vary; `beta` and `lambda` name the loss weights.
    #[arg(long)]
    param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    eval: FinalEvalArgs,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Value points trained at once, each in its own process.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct AnalyzeCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataOverride,
    #[arg(long, default_value_t = 300)]
    train_tasks: usize,
    #[arg(long, default_value_t = 300)]
    test_tasks: usize,
    #[arg(long, default_value_t = 15)]
    query: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pixels per matrix entry in the heatmap.
    #[arg(long, default_value_t = 2)]
    cell: u32,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

const RUN_OUTPUTS: [(&str, &str); 6] = [
    ("config", CONFIG_FILE),
    ("metrics", METRICS_FILE),
    ("checkpoint", CHECKPOINT_FILE),
    ("best", BEST_FILE),
    ("eval", EVAL_FILE),
    ("abort", ABORT_FILE),
];

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { tracing::Level::WARN } else { tracing::Level::INFO };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(level)
        .with_target(false)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .init();
    let result = match cli.command {
        Cmd::Train(c) => train(c),
        Cmd::Resume(c) => resume(c),
        Cmd::Eval(c) => eval(c),
        Cmd::Sweep(c) => sweep(c),
        Cmd::Analyze(c) => analyze(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn train(c: TrainCmd) -> Result<()> {
    let cfg = c.config.build()?;
    let ds = c.data.load()?;
    let dir = match &c.run_dir {
        Some(d) => {
            std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
            d.clone()
        }
        None => fresh_dir(&c.out, &format!("{}-seed{}", cfg.method, cfg.seed))?,
    };
    write_config(&dir, &cfg)?;
    let mut manifest = RunManifest::new(&cfg, &c.data, &ds.spec);
    if c.dry_run {
        manifest.status = Status::Planned;
        manifest.collect_outputs(&dir, &RUN_OUTPUTS);
        manifest.save(&dir)?;
        println!("{}", dir.display());
        return Ok(());
    }
    manifest.save(&dir)?;
    info!(dir = %dir.display(), method = %cfg.method, seed = cfg.seed, "training");
    let trainer = Trainer::new(cfg.clone(), &ds)?.with_output(&dir)?;
    let record = drive(trainer, &ds, &dir, &mut manifest, &c.eval.options(&cfg), c.stop_after)?;
    println!("{}", dir.display());
    report(record.as_ref());
    Ok(())
}

fn report(record: Option<&MetricsRecord>) {
    match record {
        Some(r) => println!("accuracy {:.2} +- {:.2}", r.accuracy_mean, r.ci95),
        None => println!("stopped early; continue with `metamod resume`"),
    }
}

fn write_config(dir: &Path, cfg: &TrainConfig) -> Result<()> {
    metamod_core::io::write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    Ok(())
}

/// Runs `trainer` to completion (or to `stop_after`), then meta-tests the
/// final model. The manifest is rewritten however the run ends.
fn drive(
    mut trainer: Trainer,
    ds: &Dataset,
    dir: &Path,
    manifest: &mut RunManifest,
    eval_opts: &EvalOptions,
    stop_after: Option<usize>,
) -> Result<Option<MetricsRecord>> {
    let total = trainer.config.iterations;
    let stop = stop_after.unwrap_or(total).min(total);
    manifest.eval = Some(eval_opts.clone());
    let outcome = (|| -> Result<Option<MetricsRecord>> {
        while trainer.iteration() < stop {
            let logged = trainer.metrics().len();
            trainer.step()?;
            if let Some(line) = trainer.metrics().get(logged) {
                info!("{line}");
            }
        }
        if stop < total {
            trainer.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
            return Ok(None);
        }
        let record = cross_domain_eval(&trainer.model.encoder, &trainer.model.store, ds, eval_opts)?;
        record.write_json(&dir.join(EVAL_FILE))?;
        Ok(Some(record))
    })();
    manifest.finished = Some(now());
    match &outcome {
        Ok(Some(_)) => manifest.status = Status::Completed,
        Ok(None) => manifest.status = Status::Stopped,
        Err(e) => {
            manifest.status = Status::Aborted;
            manifest.error = Some(format!("{e:#}"));
        }
    }
    manifest.collect_outputs(dir, &RUN_OUTPUTS);
    manifest.save(dir)?;
    outcome.with_context(|| format!("run in {}", dir.display()))
}

fn resume(c: ResumeCmd) -> Result<()> {
    let dir = &c.run_dir;
    let mut manifest = RunManifest::load(dir)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    if !ckpt_path.is_file() {
        bail!("no checkpoint at {}", ckpt_path.display());
    }
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let ds = manifest.data.load()?;
    let cfg = ckpt.config.clone();
    info!(dir = %dir.display(), from = ckpt.iteration, "resuming");
    let trainer = Trainer::resume(ckpt, &ds)?.with_output(dir)?;
    let opts = manifest.eval.clone().unwrap_or_else(|| {
        FinalEvalArgs {
            eval_episodes: 600,
            eval_query: 15,
            eval_seed: 0,
        }
        .options(&cfg)
    });
    manifest.error = None;
    let record = drive(trainer, &ds, dir, &mut manifest, &opts, None)?;
    report(record.as_ref());
    Ok(())
}

fn checkpoint_path(path: &Path) -> Result<PathBuf> {
    let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    if !file.is_file() {
        bail!("checkpoint {} not found", file.display());
    }
    Ok(file)
}

fn load_model(path: &Path) -> Result<(PathBuf, Checkpoint, Model)> {
    let file = checkpoint_path(path)?;
    let ckpt = Checkpoint::load(&file)?;
    let model = Model::with_store(&ckpt.config, ckpt.input_shape, ckpt.store.clone())?;
    Ok((file, ckpt, model))
}

fn eval(c: EvalCmd) -> Result<()> {
    let (file, ckpt, model) = load_model(&c.checkpoint)?;
    if let Some(m) = c.method {
        warn!("--method {m} ignored: meta-test never modulates (checkpoint was trained with {})", ckpt.config.method);
    }
    let data = c.data.resolve(&file);
    let ds = data.load()?;
    let opts = EvalOptions {
        n_episodes: c.episodes,
        n_way: c.n_way.unwrap_or(ckpt.config.n_way),
        k_shot: c.k_shot.unwrap_or(ckpt.config.k_shot),
        q_per_class: c.query,
        seed: c.seed,
    };
    let record = cross_domain_eval(&model.encoder, &model.store, &ds, &opts)?;
    let out = c.out.unwrap_or_else(|| {
        file.parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval-{}.json", ds.spec.name))
    });
    record.write_json(&out)?;
    println!("{}", out.display());
    println!(
        "accuracy {:.2} +- {:.2} over {} episodes on {}",
        record.accuracy_mean, record.ci95, record.n_episodes, ds.spec.name
    );
    Ok(())
}

/// Config key behind a sweep parameter name.
fn sweep_key(param: &str) -> Result<&str> {
    let key = match param {
        "beta" => "kl_weight",
        "lambda" => "lambda_orig",
        k => k,
    };
    if !TrainConfig::keys().iter().any(|k| k == key) {
        bail!("unknown sweep parameter {param:?}; valid keys: beta, lambda, {}", TrainConfig::keys().join(", "));
    }
    Ok(key)
}

#[derive(Serialize)]
struct SweepManifest<'a> {
    manifest_version: u32,
    csv_schema: u32,
    version: String,
    param: &'a str,
    key: &'a str,
    values: &'a [String],
    runs: Vec<String>,
    started: String,
    finished: String,
}

fn sweep(c: SweepCmd) -> Result<()> {
    let key = sweep_key(&c.param)?;
    let base = c.config.build()?;
    let mut points = Vec::with_capacity(c.values.len());
    for v in &c.values {
        let mut cfg = base.clone();
        cfg.set(key, v).with_context(|| format!("{key} = {v}"))?;
        cfg.validate().with_context(|| format!("{key} = {v}"))?;
        points.push((v.clone(), cfg));
    }
    let started = now();
    let root = fresh_dir(&c.out, &format!("sweep-{key}"))?;
    let dirs: Vec<PathBuf> = points.iter().map(|(v, _)| root.join(format!("{key}={v}"))).collect();
    let ds = c.data.load()?;
    for chunk in points.iter().zip(&dirs).collect::<Vec<_>>().chunks(c.jobs.max(1)) {
        if c.jobs <= 1 {
            let ((v, cfg), dir) = chunk[0];
            info!("{key} = {v}");
            std::fs::create_dir_all(dir)?;
            write_config(dir, cfg)?;
            let mut manifest = RunManifest::new(cfg, &c.data, &ds.spec);
            manifest.save(dir)?;
            let trainer = Trainer::new(cfg.clone(), &ds)?.with_output(dir)?;
            drive(trainer, &ds, dir, &mut manifest, &c.eval.options(cfg), None)?;
            continue;
        }
        let exe = std::env::current_exe().context("locating the metamod executable")?;
        let mut children = Vec::new();
        for ((v, cfg), dir) in chunk {
            std::fs::create_dir_all(dir)?;
            write_config(dir, cfg)?;
            info!("{key} = {v} (process)");
            let child = Command::new(&exe)
                .arg("--quiet")
                .arg("train")
                .arg("--config")
                .arg(dir.join(CONFIG_FILE))
                .arg("--run-dir")
                .arg(dir)
                .args(c.data.to_args())
                .args(c.eval.to_args())
                .stdout(std::process::Stdio::null())
                .spawn()
                .with_context(|| format!("starting the run for {key} = {v}"))?;
            children.push((v, child));
        }
        for (v, mut child) in children {
            let status = child.wait()?;
            if !status.success() {
                bail!("run for {key} = {v} failed ({status})");
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["value", "accuracy_mean", "ci95"])?;
    for ((v, _), dir) in points.iter().zip(&dirs) {
        let text = std::fs::read_to_string(dir.join(EVAL_FILE))?;
        let r: MetricsRecord = serde_json::from_str(&text)?;
        w.write_record([v.clone(), r.accuracy_mean.to_string(), r.ci95.to_string()])?;
    }
    let csv_path = root.join("sweep.csv");
    metamod_core::io::write_atomic(&csv_path, &w.into_inner()?)?;
    write_json(
        &root.join(MANIFEST_FILE),
        &SweepManifest {
            manifest_version: MANIFEST_VERSION,
            csv_schema: SWEEP_CSV_SCHEMA,
            version: source_version(),
            param: &c.param,
            key,
            values: &c.values,
            runs: dirs.iter().filter_map(|d| d.file_name()).map(|n| n.to_string_lossy().into_owned()).collect(),
            started,
            finished: now(),
        },
    )?;
    println!("{}", csv_path.display());
    Ok(())
}

#[derive(Serialize)]
struct AnalysisSummary {
    method: Method,
    dataset: String,
    /// Meta-train tasks as the model modulates them.
    mean_distance_modulated: f64,
    /// The same base tasks without modulation.
    mean_distance_original: f64,
    options: SimilarityOptions,
}

fn analyze(c: AnalyzeCmd) -> Result<()> {
    let (file, ckpt, model) = load_model(&c.checkpoint)?;
    let ds = c.data.resolve(&file).load()?;
    let opts = SimilarityOptions {
        n_train_tasks: c.train_tasks,
        n_test_tasks: c.test_tasks,
        n_way: ckpt.config.n_way,
        k_shot: ckpt.config.k_shot,
        q_per_class: c.query,
        meta_batch: ckpt.config.meta_batch.max(2),
        seed: c.seed,
        modulate: true,
    };
    let dir = c.out.unwrap_or_else(|| file.parent().unwrap_or(Path::new(".")).to_path_buf());
    std::fs::create_dir_all(&dir)?;
    let mut means = Vec::new();
    for (modulate, name) in [(true, "modulated"), (false, "original")] {
        let report = task_similarity(&model, &ds, &SimilarityOptions { modulate, ..opts.clone() })?;
        report.write_csv(&dir.join(format!("similarity-{name}.csv")))?;
        report.write_heatmap(&dir.join(format!("similarity-{name}.png")), c.cell)?;
        means.push(report.mean_distance);
    }
    write_json(
        &dir.join("similarity.json"),
        &AnalysisSummary {
            method: model.method,
            dataset: ds.spec.name.clone(),
            mean_distance_modulated: means[0],
            mean_distance_original: means[1],
            options: opts,
        },
    )?;
    println!("{}", dir.display());
    println!(
        "mean train-test task distance: {:.4} modulated, {:.4} original ({})",
        means[0], means[1], model.method
    );
    Ok(())
}
