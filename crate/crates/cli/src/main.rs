mod config;

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use chord_core::checkpoint;
use chord_core::data::{self, MetricsRow, SplitSpec};
use chord_core::sim::{self, CloudState, DeviceState};
use chord_core::strategy::{self, BitTable};
use chord_core::training::{fit, ChordModel, Method, Trainer};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "chord",
    version,
    about = "Per-device mixed-precision quantization for sequential recommenders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train embeddings, head, profiler and hypernetworks on a frozen trunk.
    Train(Common),
    /// Run device-cloud sessions for every user at each budget.
    Simulate(Common),
    /// Compare CHORD against uniform and full-precision baselines.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of chord, uniform-quant, full-precision.
        #[arg(long, default_value = "chord,uniform-quant,full-precision")]
        baselines: String,
    },
    /// Write every user's encoded strategy.
    Export(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long = "bit-config")]
    bit_config: Option<BitTable>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long = "act-bits")]
    act_bits: Option<u8>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Checkpoint to read instead of `<out>/seed-<n>/model.chck`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

/// A usage or configuration problem (exit code 2).
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg =
            ExperimentConfig::load(&self.config).map_err(|e| Usage(format!("{:#}", e)))?;
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(b) = self.budget {
            cfg.budgets = vec![b];
            cfg.eval.budget = b;
        }
        if let Some(t) = self.bit_config {
            cfg.tiering.bit_table = t;
        }
        if let Some(b) = self.beta {
            cfg.tiering.beta = b;
        }
        if let Some(a) = self.act_bits {
            cfg.train.act_bits = Some(a);
            cfg.eval.act_bits = Some(a);
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        cfg.validate().map_err(|e| Usage(format!("{:#}", e)))?;
        Ok(cfg)
    }

    fn checkpoint_path(&self, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| cfg.seed_dir(seed).join("model.chck"))
    }
}

fn load_split(cfg: &ExperimentConfig) -> Result<SplitSpec> {
    let path = &cfg.dataset.path;
    if !path.is_file() {
        return Err(Usage(format!("dataset not found: {}", path.display())).into());
    }
    let log = data::ingest_tsv(path, cfg.dataset.format)?;
    let log = data::k_core_filter(&log, cfg.dataset.k_core)?;
    let split = data::loo_split(&log);
    log::info!(
        "{}: {} users, {} items, {} interactions after {}-core",
        cfg.dataset.name,
        split.len(),
        split.num_items,
        log.len(),
        cfg.dataset.k_core
    );
    Ok(split)
}

fn load_model(
    common: &Common,
    cfg: &ExperimentConfig,
    seed: u64,
    split: &SplitSpec,
) -> Result<ChordModel<f32>> {
    let path = common.checkpoint_path(cfg, seed);
    let (header, model) = checkpoint::load::<f32>(&path)
        .with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    if header.backbone.item_count != split.num_items {
        return Err(chord_core::Error::IncompatibleStrategy(format!(
            "checkpoint has {} items, dataset has {}",
            header.backbone.item_count, split.num_items
        ))
        .into());
    }
    Ok(model)
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Serialize)]
struct LogHeader<'a> {
    command: &'a str,
    seed: u64,
    started_unix: u64,
}

fn write_json_line<W: Write, S: Serialize>(out: &mut W, value: &S) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn train(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let split = load_split(&cfg)?;
    for &seed in &cfg.seeds {
        let dir = cfg.seed_dir(seed);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
        let mut backbone = cfg.backbone.clone();
        backbone.item_count = split.num_items;
        let model = ChordModel::<f32>::build(&backbone, &cfg.saliency, &cfg.tiering, seed)?;
        let mut tcfg = cfg.train.clone();
        tcfg.seed = seed;
        let mut trainer = Trainer::new(model, cfg.method.clone(), tcfg)?;
        let mut log_file = BufWriter::new(File::create(dir.join("train_log.jsonl"))?);
        write_json_line(
            &mut log_file,
            &LogHeader {
                command: "train",
                seed,
                started_unix: unix_now(),
            },
        )?;
        let ecfg = sim::EvalConfig {
            seed,
            ..cfg.eval.clone()
        };
        let mut io_err = None;
        fit(&mut trainer, &split, Some(&ecfg), |rec| {
            log::info!(
                "seed {} epoch {} loss {:.4} avg_bits {:.3} ({} ms)",
                seed,
                rec.epoch,
                rec.loss,
                rec.avg_bits,
                rec.wall_ms
            );
            if let Err(e) = write_json_line(&mut log_file, rec) {
                io_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = io_err {
            return Err(e);
        }
        log_file.flush()?;
        checkpoint::save(
            &dir.join("model.chck"),
            &trainer.model,
            &trainer.method,
            seed,
            trainer.epoch(),
        )?;
        println!("{}", dir.join("model.chck").display());
    }
    Ok(())
}

fn budget_tag(b: f64) -> String {
    format!("b{:.2}", b)
}

fn simulate(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let split = load_split(&cfg)?;
    for &seed in &cfg.seeds {
        let model = load_model(common, &cfg, seed, &split)?;
        let dir = cfg.seed_dir(seed);
        fs::create_dir_all(&dir)?;
        let mut rows = Vec::new();
        for &budget in &cfg.budgets {
            let ecfg = sim::EvalConfig {
                seed,
                budget,
                ..cfg.eval.clone()
            };
            let (mut report, acc) = sim::simulate(&model, &split, &ecfg)?;
            report.row.method = format!("chord-{}", budget_tag(budget));
            report.row.dataset = cfg.dataset.name.clone();
            let file = File::create(dir.join(format!("transcript-{}.jsonl", budget_tag(budget))))?;
            sim::write_transcript(BufWriter::new(file), &report.transcript)?;
            let feas = acc.account_round(
                &(0..split.len())
                    .map(|u| ecfg.profile(u as u64))
                    .collect::<chord_core::Result<Vec<_>>>()?,
            );
            let infeasible = feas
                .devices
                .iter()
                .filter(|d| !(d.bandwidth_ok && d.compute_ok))
                .count();
            log::info!(
                "budget {}: avg_bits {:.3}, NDCG@10 {:.4}, {} infeasible devices",
                budget,
                report.row.avg_bits,
                report.row.ndcg10,
                infeasible
            );
            rows.push(report.row);
        }
        data::write_metrics_csv(File::create(dir.join("simulate.csv"))?, &rows)?;
        print_table(&rows);
    }
    Ok(())
}

fn parse_baselines(list: &str, budget: f64) -> Result<Vec<Method>> {
    list.split(',')
        .map(|s| match s.trim() {
            "chord" => Ok(Method::Chord),
            "uniform-quant" => Ok(Method::Uniform {
                bits: budget.round().clamp(2.0, 8.0) as u8,
            }),
            "full-precision" => Ok(Method::FullPrecision),
            other => Err(Usage(format!("unknown baseline `{}`", other)).into()),
        })
        .collect()
}

fn eval(common: &Common, baselines: &str) -> Result<()> {
    let cfg = common.resolve()?;
    let methods = parse_baselines(baselines, cfg.eval.budget)?;
    let split = load_split(&cfg)?;
    for &seed in &cfg.seeds {
        let model = load_model(common, &cfg, seed, &split)?;
        let dir = cfg.seed_dir(seed);
        fs::create_dir_all(&dir)?;
        let ecfg = sim::EvalConfig {
            seed,
            ..cfg.eval.clone()
        };
        let mut rows = Vec::new();
        for m in &methods {
            let mut row = sim::evaluate(&model, m, &split, &ecfg)?.row;
            row.dataset = cfg.dataset.name.clone();
            rows.push(row);
        }
        data::write_metrics_csv(File::create(dir.join("eval.csv"))?, &rows)?;
        print_table(&rows);
    }
    Ok(())
}

fn export(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let split = load_split(&cfg)?;
    for &seed in &cfg.seeds {
        let model = std::sync::Arc::new(load_model(common, &cfg, seed, &split)?);
        let dir = cfg.seed_dir(seed).join("strategies");
        fs::create_dir_all(&dir)?;
        let mut cloud = CloudState::new(model.clone());
        let trunk = std::sync::Arc::new(model.backbone.clone());
        let profiler = std::sync::Arc::new(model.saliency.clone());
        let mut index = BufWriter::new(File::create(dir.join("index.csv"))?);
        writeln!(index, "device,payload_bits,avg_bits")?;
        for u in 0..split.len() {
            let device = u as u64;
            cloud.register(device, split.train[u].clone());
            let dev = DeviceState::new(
                trunk.clone(),
                profiler.clone(),
                cfg.eval.profile(device)?,
                &split.train[u],
                None,
            )?;
            let msg = cloud.strategy_round(&dev.uplink()?)?;
            let code = strategy::decode(&msg)?;
            fs::write(dir.join(format!("device-{}.chst", u)), &msg)?;
            writeln!(
                index,
                "{},{},{:.6}",
                u,
                strategy::payload_bits(&code),
                code.native_average(model.backbone.registry())?
            )?;
        }
        index.flush()?;
        println!("{}", dir.display());
    }
    Ok(())
}

fn print_table(rows: &[MetricsRow]) {
    println!(
        "{:<18} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10}",
        "method", "bits", "NDCG@5", "HR@5", "NDCG@10", "HR@10", "Param(Mb)"
    );
    for r in rows {
        println!(
            "{:<18} {:>8.3} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>10.6}",
            r.method, r.avg_bits, r.ndcg5, r.hr5, r.ndcg10, r.hr10, r.param_mbit
        );
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<chord_core::Error>() {
        Some(chord_core::Error::Config(_)) => 2,
        Some(chord_core::Error::IncompatibleStrategy(_)) => 3,
        _ => 4,
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CHORD_THREADS") {
        let n: usize = v.parse().map_err(|_| {
            Usage(format!(
                "CHORD_THREADS must be a positive integer, got `{}`",
                v
            ))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("cannot configure the thread pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Train(c) => train(c),
        Command::Simulate(c) => simulate(c),
        Command::Eval { common, baselines } => eval(common, baselines),
        Command::Export(c) => export(c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
