//! `qmamba`: dataset synthesis, training, evaluation, transfer and scan
//! diagnostics.
//!
//! Exit codes: 0 success, 2 argument or configuration error, 3 data error
//! (missing or malformed files), 4 numeric failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use qmamba_core::checkpoint::{Checkpoint, CheckpointKind};
use qmamba_core::config::RunConfig;
use qmamba_core::data::{
    load_dataset, parse_kinds, split_dataset, synth_dataset, write_dataset, DistortionKind, IqaSample,
};
use qmamba_core::metrics::EvalReport;
use qmamba_core::model::QMamba;
use qmamba_core::params::ParamStore;
use qmamba_core::scan2d::{build_orders, locality_profile, ScanMode};
use qmamba_core::styleprompt::tunable_fraction;
use qmamba_core::train::{configure_transfer, evaluate, train, TransferMode};
use qmamba_core::Error as CoreError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "qmamba", version, about = "Selective state-space image quality assessment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic distorted-image dataset (PNGs + manifest.csv).
    SynthData(SynthArgs),
    /// Train a model on the train split of a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Adapt a trained checkpoint to a new dataset.
    Transfer(TransferArgs),
    /// Print scan-order locality statistics as CSV.
    ScanInfo(ScanInfoArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated distortion kinds (default: all).
    #[arg(long)]
    kinds: Option<String>,
}

/// Settings shared by commands that train.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Any config key, e.g. `--set patches_per_image=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        for kv in &self.set {
            match kv.split_once('=') {
                Some((k, v)) => out.push((k.trim().to_string(), v.trim().to_string())),
                None => out.push((kv.clone(), String::new())),
            }
        }
        out
    }

    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        for (k, v) in self.pairs() {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (containing manifest.csv) or manifest path.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    scan_mode: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Adapter checkpoint applied on top of `--checkpoint`.
    #[arg(long)]
    adapters: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// all | train | val | test
    #[arg(long, default_value = "all")]
    split: String,
    /// Seed for evaluation crops (default: the checkpoint's seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Print the report as one JSON object.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// none | linear-probe | styleprompt | full
    #[arg(long)]
    mode: String,
    /// Output directory for the tuned checkpoint and report.
    #[arg(long)]
    out: PathBuf,
    /// Keep the regression head frozen in styleprompt mode.
    #[arg(long)]
    freeze_head: bool,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ScanInfoArgs {
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    window: usize,
    /// Requested mode; cross is always printed as the baseline.
    #[arg(long, default_value = "local")]
    mode: String,
}

/// Errors in the CLI's own argument handling.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Numeric(_)) => 4,
        Some(CoreError::Config(_) | CoreError::Precondition(_) | CoreError::Shape { .. }) => 2,
        Some(_) => 3,
        None if err.downcast_ref::<std::io::Error>().is_some() => 3,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Transfer(a) => transfer_cmd(a),
        Command::ScanInfo(a) => scan_info(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn synth_data(a: SynthArgs) -> Result<()> {
    if a.count == 0 {
        return Err(UsageError("--count must be at least 1".into()).into());
    }
    let kinds = match &a.kinds {
        Some(k) => parse_kinds(k)?,
        None => DistortionKind::ALL.to_vec(),
    };
    let samples = synth_dataset(a.count, a.seed, &kinds)?;
    let manifest = write_dataset(&samples, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} samples to {}", samples.len(), manifest.display());
    Ok(())
}

fn load_data(path: &Path) -> Result<Vec<IqaSample>> {
    let manifest = if path.is_dir() { path.join("manifest.csv") } else { path.to_path_buf() };
    Ok(load_dataset(&manifest)?)
}

fn build(cfg: &RunConfig) -> Result<(QMamba, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = QMamba::new(cfg.model.clone(), &mut store, &mut rng)?;
    Ok((model, store))
}

fn load_model(path: &Path) -> Result<(Checkpoint, QMamba, ParamStore)> {
    let ckpt = Checkpoint::load(path, None)?;
    if ckpt.kind() != CheckpointKind::Full {
        return Err(UsageError(format!("{} is an adapter checkpoint; pass it with --adapters", path.display())).into());
    }
    let (model, mut store) = build(&ckpt.config)?;
    ckpt.restore(&mut store)?;
    Ok((ckpt, model, store))
}

/// Config as a JSON object of its canonical `key = value` lines.
fn config_json(cfg: &RunConfig) -> Value {
    let text = cfg.to_text();
    let map: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once(" = ")).collect();
    json!(map)
}

fn report_json(command: &str, cfg: &RunConfig, report: &EvalReport, extra: Value) -> Value {
    let corr = |c: &qmamba_core::metrics::Correlations| json!({ "n": c.n, "plcc": c.plcc, "srcc": c.srcc });
    let domains: BTreeMap<&str, Value> = report.per_domain.iter().map(|(d, c)| (d.as_str(), corr(c))).collect();
    let mut v = json!({
        "version": VERSION,
        "command": command,
        "config": config_json(cfg),
        "overall": corr(&report.overall),
        "per_domain": domains,
    });
    if let (Value::Object(dst), Value::Object(src)) = (&mut v, extra) {
        dst.extend(src);
    }
    v
}

/// Text report: version and config as `#` comment lines, then CSV rows.
fn report_text(cfg: &RunConfig, report: &EvalReport, extra: &[(&str, String)]) -> String {
    let mut s = format!("# qmamba {VERSION}\n");
    for line in cfg.to_text().lines() {
        s.push_str(&format!("# {line}\n"));
    }
    for (k, v) in extra {
        s.push_str(&format!("# {k} = {v}\n"));
    }
    s.push_str(&report.to_csv());
    s
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &a.preset {
        cfg.set("preset", p)?;
    }
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    if let Some(m) = &a.scan_mode {
        cfg.set("scan_mode", m)?;
    }
    a.overrides.apply(&mut cfg)?;

    let data = load_data(&a.data)?;
    let (tr, va, te) = split_dataset(&data);
    let (model, mut store) = build(&cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("run.conf"), cfg.to_text())?;
    eprintln!("training on {} samples ({} val, {} test), {} parameters", tr.len(), va.len(), te.len(), store.count());

    let mut log = String::from("epoch,train_loss,val_srcc\n");
    let logs = train(&model, &mut store, &tr, &va, &cfg.train, |l| {
        let val = l.val_srcc.map(|v| format!("{v:.6}")).unwrap_or_default();
        eprintln!("epoch {:>3}  loss {:.6}  val srcc {val}", l.epoch, l.train_loss);
    })?;
    for l in &logs {
        let val = l.val_srcc.map(|v| v.to_string()).unwrap_or_default();
        log.push_str(&format!("{},{},{val}\n", l.epoch, l.train_loss));
    }
    fs::write(a.out.join("train_log.csv"), log)?;
    Checkpoint::capture(&cfg, &store, CheckpointKind::Full).save(&a.out.join("model.qmb"))?;

    if te.len() >= 2 {
        let (report, _) = evaluate(&model, &store, &te, &cfg.train)?;
        print!("{}", report_text(&cfg, &report, &[("split", "test".into())]));
    }
    Ok(())
}

fn select_split(data: Vec<IqaSample>, split: &str) -> Result<Vec<IqaSample>> {
    let (tr, va, te) = split_dataset(&data);
    match split {
        "all" => Ok(data),
        "train" => Ok(tr),
        "val" => Ok(va),
        "test" => Ok(te),
        other => Err(UsageError(format!("unknown split {other:?} (all|train|val|test)")).into()),
    }
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (mut ckpt, model, mut store) = load_model(&a.checkpoint)?;
    if let Some(path) = &a.adapters {
        let ad = Checkpoint::load(path, Some(&ckpt.config.model))?;
        ad.restore(&mut store)?;
        ckpt.config = ad.config;
    }
    let mut cfg = ckpt.config;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let samples = select_split(load_data(&a.data)?, &a.split)?;
    let (report, _) = evaluate(&model, &store, &samples, &cfg.train)?;
    if a.json {
        println!("{}", report_json("eval", &cfg, &report, json!({ "split": a.split })));
    } else {
        print!("{}", report_text(&cfg, &report, &[("split", a.split.clone())]));
    }
    Ok(())
}

fn transfer_cmd(a: TransferArgs) -> Result<()> {
    let mode: TransferMode = a.mode.parse()?;
    let (ckpt, model, mut store) = load_model(&a.checkpoint)?;
    let mut cfg = ckpt.config;
    cfg.train.freeze_backbone = mode != TransferMode::Full;
    cfg.train.tune_head = !a.freeze_head;
    a.overrides.apply(&mut cfg)?;
    configure_transfer(&mut store, mode, cfg.train.tune_head)?;
    let fraction = tunable_fraction(&store);
    let before = store.checksum(|_| true);

    let data = load_data(&a.data)?;
    let (tr, va, te) = split_dataset(&data);
    if mode != TransferMode::None {
        train(&model, &mut store, &tr, &va, &cfg.train, |l| {
            eprintln!("epoch {:>3}  loss {:.6}", l.epoch, l.train_loss);
        })?;
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    match mode {
        TransferMode::None => {}
        TransferMode::StylePrompt => {
            Checkpoint::capture(&cfg, &store, CheckpointKind::Adapters).save(&a.out.join("adapters.qmb"))?
        }
        _ => Checkpoint::capture(&cfg, &store, CheckpointKind::Full).save(&a.out.join("model.qmb"))?,
    }

    let (report, _) = evaluate(&model, &store, &te, &cfg.train)?;
    let after = store.checksum(|_| true);
    let extra = json!({
        "split": "test",
        "mode": mode.name(),
        "tunable_fraction": fraction,
        "params_sha256_before": before,
        "params_sha256_after": after,
    });
    let json = report_json("transfer", &cfg, &report, extra);
    fs::write(a.out.join("report.json"), format!("{json}\n"))?;
    if a.json {
        println!("{json}");
    } else {
        let extra = [
            ("split", "test".to_string()),
            ("mode", mode.name().to_string()),
            ("tunable_fraction", format!("{fraction:.6}")),
            ("params_sha256_before", before),
            ("params_sha256_after", after),
        ];
        print!("{}", report_text(&cfg, &report, &extra));
    }
    Ok(())
}

fn scan_info(a: ScanInfoArgs) -> Result<()> {
    if a.height == 0 || a.width == 0 {
        return Err(UsageError("--height and --width must be positive".into()).into());
    }
    let mode: ScanMode = a.mode.parse()?;
    let mut modes = vec![(mode, a.window)];
    if mode != ScanMode::Cross {
        modes.push((ScanMode::Cross, 0));
    }
    println!("mode,window,direction,pairs,mean_gap,median_gap,max_gap");
    for (m, w) in modes {
        let orders = build_orders(a.height, a.width, m, w)?;
        let mut total = 0.0;
        for o in orders.iter() {
            let p = locality_profile(o);
            total += p.mean_adjacent_gap;
            println!(
                "{m},{w},{},{},{:.6},{:.1},{}",
                o.label(),
                p.pairs,
                p.mean_adjacent_gap,
                p.median_adjacent_gap,
                p.max_adjacent_gap
            );
        }
        let pairs = locality_profile(&orders[0]).pairs;
        println!("{m},{w},all,{pairs},{:.6},,", total / 4.0);
    }
    Ok(())
}
