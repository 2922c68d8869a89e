//! Subcommands. Each one resolves its config up front, writes its outputs
//! under `--out`, then writes `manifest-<command>.json` next to them.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use metricpad_core::eval::{pad_report_with, ApcerGranularity, ConfusionMatrix, EvalReport};
use metricpad_core::losses::SoftmaxSign;
use metricpad_core::protocol::{
    evaluate, partition, run_ablation, train_partition, AblationRow, HoldoutPai, ProtocolKind, ProtocolSpec,
};
use metricpad_core::train::{LossKind, MiningMode};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{self, Overrides, RunConfig};
use crate::manifest::Manifest;
use crate::{io, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "metricpad", version, about = "Metric-learning anomaly detection for presentation attack detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate or ingest a benchmark and export it as JSONL and CSV.
    Generate(RunArgs),
    /// Train an encoder on the protocol's training set.
    Train(RunArgs),
    /// Score dev and test with a checkpoint and write the PAD report.
    Evaluate(RunArgs),
    /// Train and compare the four loss/mining variants.
    Ablation(RunArgs),
    /// Recompute the PAD report from the score files in a run directory.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML config, or a manifest to replay.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossKind>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<MiningMode>,
    /// paper or corrected.
    #[arg(long, value_parser = parse_sign)]
    pub softmax_sign: Option<SoftmaxSign>,
    /// Reference pairs for few-shot scoring.
    #[arg(long = "M", value_name = "M")]
    pub references: Option<usize>,
    #[arg(long, value_parser = parse_protocol)]
    pub protocol: Option<ProtocolKind>,
    #[arg(long)]
    pub holdout_tag: Option<String>,
    /// `type` or `type/subtype`.
    #[arg(long, value_parser = parse_pai)]
    pub holdout_pai: Option<HoldoutPai>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Checkpoint written by train and read by evaluate.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directory holding scores_dev.csv and scores_test.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// type or subtype.
    #[arg(long, default_value = "type", value_parser = parse_apcer)]
    pub apcer: ApcerGranularity,
}

fn parse_loss(s: &str) -> std::result::Result<LossKind, String> {
    s.parse().map_err(|e: metricpad_core::Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<MiningMode, String> {
    s.parse().map_err(|e: metricpad_core::Error| e.to_string())
}

fn parse_sign(s: &str) -> std::result::Result<SoftmaxSign, String> {
    config::parse_softmax_sign(s).map_err(|e| e.to_string())
}

fn parse_protocol(s: &str) -> std::result::Result<ProtocolKind, String> {
    s.parse().map_err(|e: metricpad_core::Error| e.to_string())
}

fn parse_pai(s: &str) -> std::result::Result<HoldoutPai, String> {
    s.parse().map_err(|e: metricpad_core::Error| e.to_string())
}

fn parse_apcer(s: &str) -> std::result::Result<ApcerGranularity, String> {
    match s {
        "type" => Ok(ApcerGranularity::Type),
        "subtype" => Ok(ApcerGranularity::Subtype),
        other => Err(format!("unknown granularity {other:?}, expected type or subtype")),
    }
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            checkpoint: self.checkpoint.clone(),
            loss: self.loss,
            mode: self.mode,
            softmax_sign: self.softmax_sign,
            references: self.references,
            protocol: self.protocol,
            holdout_tag: self.holdout_tag.clone(),
            holdout_pai: self.holdout_pai.clone(),
            epochs: self.epochs,
        }
    }
}

/// A resolved run and the manifest being filled in.
struct Run {
    cfg: RunConfig,
    out: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn start(command: &str, args: &RunArgs) -> Result<Run> {
        Run::start_with(command, args, |_| {})
    }

    /// `adjust` runs on the resolved config before it is recorded.
    fn start_with(command: &str, args: &RunArgs, adjust: impl FnOnce(&mut RunConfig)) -> Result<Run> {
        let loaded = config::load(&args.config)?;
        if let Some(recorded) = &loaded.manifest_command {
            if recorded != command {
                return Err(Error::Config(format!(
                    "{} replays `{recorded}`, not `{command}`",
                    args.config.display()
                )));
            }
        }
        let mut cfg = loaded.config.resolve(&args.overrides())?;
        adjust(&mut cfg);
        let out = cfg.out_dir();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let manifest = Manifest::new(command).with_config(&args.config, &loaded.bytes, &cfg);
        Ok(Run { cfg, out, manifest })
    }

    fn path(&self, name: &str) -> PathBuf {
        io::out_path(&self.out, name)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(format!("{name}: {e}")))?;
        text.push('\n');
        io::write_bytes(&path, text.as_bytes())?;
        self.manifest.add_output(&path)?;
        Ok(path)
    }

    fn finish(self) -> Result<PathBuf> {
        self.manifest.write(&self.out)
    }
}

fn cmd_generate(args: &RunArgs) -> Result<()> {
    let mut run = Run::start("generate", args)?;
    if let Some(p) = &run.cfg.benchmark.path {
        run.manifest.add_input(p)?;
    }
    let bench = run.cfg.benchmark()?;
    for name in ["benchmark.jsonl", "benchmark.csv"] {
        let path = run.path(name);
        io::export(&bench, &path)?;
        run.manifest.add_output(&path)?;
    }
    println!("{} samples, {} features → {}", bench.samples.len(), bench.input_dim(), run.out.display());
    run.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    loss: LossKind,
    mode: MiningMode,
    epochs_run: usize,
    final_mean_loss: Option<f64>,
    dev_aer: f64,
    dev_far: f64,
    dev_frr: f64,
}

fn mode_name(m: MiningMode) -> &'static str {
    match m {
        MiningMode::Anomaly => "anomaly",
        MiningMode::Classwise => "classwise",
    }
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let mut run = Run::start("train", args)?;
    if let Some(p) = &run.cfg.benchmark.path {
        run.manifest.add_input(p)?;
    }
    let bench = run.cfg.benchmark()?;
    let part = partition(&bench, &run.cfg.protocol)?;
    let pipeline = run.cfg.pipeline();
    let outcome = train_partition(&part, &pipeline)?;

    let log_path = run.path("training_log.jsonl");
    let mut log = String::new();
    for rec in &outcome.history {
        log.push_str(&serde_json::to_string(rec).map_err(|e| Error::Data(e.to_string()))?);
        log.push('\n');
    }
    io::write_bytes(&log_path, log.as_bytes())?;
    run.manifest.add_output(&log_path)?;

    let dev = evaluate(&outcome.params, &part, &pipeline)?.report;
    let epochs_run = outcome.history.len();
    let summary = TrainSummary {
        loss: pipeline.train.loss,
        mode: pipeline.train.mode,
        epochs_run,
        final_mean_loss: outcome.history.last().map(|r| r.mean_loss),
        dev_aer: dev.aer,
        dev_far: dev.dev_far,
        dev_frr: dev.dev_frr,
    };
    let ck = Checkpoint::new(&pipeline.train, outcome.params, outcome.optimizer, epochs_run);
    let ck_path = run.cfg.checkpoint_path();
    io::write_bytes(&ck_path, ck.to_json()?.as_bytes())?;
    run.manifest.add_output(&ck_path)?;
    run.write_json("train_summary.json", &summary)?;
    println!(
        "trained {} ({} mining) for {epochs_run} epochs; dev AER {:.4}",
        summary.loss,
        mode_name(summary.mode),
        summary.dev_aer
    );
    run.finish()?;
    Ok(())
}

/// `report.json` of `evaluate`. Holds no paths, so replays in other
/// directories produce identical bytes.
#[derive(Serialize)]
struct EvaluateReport<'a> {
    seed: u64,
    protocol: &'a ProtocolSpec,
    references: usize,
    softmax_sign: &'static str,
    apcer_granularity: ApcerGranularity,
    loss: LossKind,
    mode: MiningMode,
    epochs_run: usize,
    metrics: &'a EvalReport,
    confusion: &'a ConfusionMatrix,
}

fn cmd_evaluate(args: &RunArgs) -> Result<()> {
    // Pin the checkpoint so a replay into another directory reads the same file.
    let mut run = Run::start_with("evaluate", args, |cfg| cfg.checkpoint = Some(cfg.checkpoint_path()))?;
    let ck_path = run.cfg.checkpoint_path();
    let ck = Checkpoint::load(&ck_path)?;
    run.manifest.add_input(&ck_path)?;
    if let Some(p) = &run.cfg.benchmark.path {
        run.manifest.add_input(p)?;
    }
    let bench = run.cfg.benchmark()?;
    if ck.input_dim != bench.input_dim() {
        return Err(Error::Data(format!(
            "checkpoint expects {} features, the benchmark has {}",
            ck.input_dim,
            bench.input_dim()
        )));
    }
    let part = partition(&bench, &run.cfg.protocol)?;
    let pipeline = run.cfg.pipeline();
    let ev = evaluate(&ck.params, &part, &pipeline)?;

    for (name, scores) in [("scores_dev.csv", &ev.dev_scores), ("scores_test.csv", &ev.test_scores)] {
        let path = run.path(name);
        io::write_scores(&path, scores)?;
        run.manifest.add_output(&path)?;
    }
    let path = run.path("confusion.csv");
    io::write_confusion(&path, &ev.confusion)?;
    run.manifest.add_output(&path)?;

    let protocol = run.cfg.protocol.clone();
    let report = EvaluateReport {
        seed: run.cfg.train.seed,
        protocol: &protocol,
        references: pipeline.references,
        softmax_sign: config::softmax_sign_name(pipeline.train.loss_config.softmax_sign),
        apcer_granularity: pipeline.apcer,
        loss: ck.train.loss,
        mode: ck.train.mode,
        epochs_run: ck.epochs_run,
        metrics: &ev.report,
        confusion: &ev.confusion,
    };
    run.write_json("report.json", &report)?;
    let r = &ev.report;
    println!(
        "M={} HTER {:.4} (FAR {:.4}, FRR {:.4}) ACER {:.4} AER {:.4}",
        pipeline.references, r.hter, r.far, r.frr, r.acer, r.aer
    );
    run.finish()?;
    Ok(())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,aer,far,frr,delta_aer\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.variant, r.aer, r.far, r.frr, r.delta_aer));
    }
    s
}

pub fn ablation_text(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<10} {:>8} {:>8} {:>8} {:>9}\n", "variant", "AER", "FAR", "FRR", "dAER");
    for r in rows {
        s.push_str(&format!(
            "{:<10} {:>8.4} {:>8.4} {:>8.4} {:>+9.4}\n",
            r.variant.name(),
            r.aer,
            r.far,
            r.frr,
            r.delta_aer
        ));
    }
    s
}

fn cmd_ablation(args: &RunArgs) -> Result<()> {
    let mut run = Run::start("ablation", args)?;
    if let Some(p) = &run.cfg.benchmark.path {
        run.manifest.add_input(p)?;
    }
    let bench = run.cfg.benchmark()?;
    let rows = run_ablation(&bench, &run.cfg.protocol, &run.cfg.pipeline())?;
    for (name, body) in [("ablation.csv", ablation_csv(&rows)), ("ablation.txt", ablation_text(&rows))] {
        let path = run.path(name);
        io::write_bytes(&path, body.as_bytes())?;
        run.manifest.add_output(&path)?;
    }
    run.write_json("ablation.json", &rows)?;
    print!("{}", ablation_text(&rows));
    run.finish()?;
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let dev_path = args.out.join("scores_dev.csv");
    let test_path = args.out.join("scores_test.csv");
    let dev = io::read_scores(&dev_path)?;
    let test = io::read_scores(&test_path)?;
    let report = pad_report_with(&dev, &test, args.apcer)?;
    let mut manifest = Manifest::new("report");
    manifest.add_input(&dev_path)?;
    manifest.add_input(&test_path)?;
    let path = args.out.join("recomputed_report.json");
    let mut text = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    io::write_bytes(&path, text.as_bytes())?;
    manifest.add_output(&path)?;
    manifest.write(&args.out)?;
    println!("HTER {:.4} ACER {:.4} AER {:.4}", report.hter, report.acer, report.aer);
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablation(a) => cmd_ablation(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
