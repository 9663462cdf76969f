//! Command-line front end. Exit codes: 0 success, 1 usage error,
//! 2 validation failure, 3 runtime error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataio::{self, Dataset, SignalFrame};
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_report};
use crate::mkg::{self, HeteroGraph, TripleSet};
use crate::sigsyn::{self, ModulationClass, SynthConfig};
use crate::trainer::{self, infer, InferMode, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "kgamc", version, about = "Knowledge-graph-driven modulation classification")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a labelled I/Q dataset
    Synth(SynthArgs),
    /// Convert a directory of <CLASS>_<SNR>_<ID>.csv frames to a dataset
    Convert(ConvertArgs),
    /// Validate or inspect a knowledge graph
    #[command(subcommand)]
    Kg(KgCommand),
    /// Train a model
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Predict labels for frames
    Infer(InferArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// `all` or a comma-separated list of class names
    #[arg(long, default_value = "all")]
    classes: String,
    /// Inclusive `start:stop:step`, or a comma-separated list
    #[arg(long, default_value = "-20:18:2", allow_hyphen_values = true)]
    snr: String,
    #[arg(long, default_value_t = 100)]
    frames_per_cell: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    frame_len: usize,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Class table order; defaults to sorted names found
    #[arg(long)]
    classes: Option<String>,
}

#[derive(Debug, Subcommand)]
enum KgCommand {
    /// Check every triple against the relation signatures
    Validate(KgArgs),
    /// Print node, edge and type counts and the anchor map
    Inspect(KgArgs),
}

#[derive(Debug, Args)]
struct KgArgs {
    /// Triple file; the shipped default graph when omitted
    #[arg(long)]
    triples: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Held-out set; when omitted `--data` is split by `--train-fraction`
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Triple file; the shipped default graph when omitted
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long, default_value_t = 80)]
    epochs: usize,
    #[arg(long, default_value_t = 1024)]
    batch: usize,
    #[arg(long, default_value_t = 0.2)]
    lambda: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr_msnet: f64,
    #[arg(long, default_value_t = 1e-6)]
    lr_rgcn: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 128)]
    d: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "classifier")]
    mode: InferMode,
    /// SNRs that get their own confusion matrix
    #[arg(long, default_value = "0", allow_hyphen_values = true)]
    confusion_snr: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// An AMCD dataset or a single two-column CSV frame
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "classifier")]
    mode: InferMode,
    /// Predictions CSV
    #[arg(long)]
    out: PathBuf,
}

/// Provenance written next to every output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub tool_version: &'static str,
    pub started_unix: u64,
    pub wall_seconds: f64,
}

struct Run {
    command: &'static str,
    args: Vec<String>,
    started: Instant,
    started_unix: u64,
}

impl Run {
    fn manifest(
        &self,
        config: serde_json::Value,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
        seed: Option<u64>,
    ) -> RunManifest {
        RunManifest {
            command: self.command.to_string(),
            args: self.args.clone(),
            config,
            inputs,
            outputs,
            seed,
            tool_version: env!("CARGO_PKG_VERSION"),
            started_unix: self.started_unix,
            wall_seconds: self.started.elapsed().as_secs_f64(),
        }
    }
}

fn write_manifest(path: &Path, m: &RunManifest) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(m)?).map_err(|e| Error::io(path, e))
}

/// Manifest path for a single-file output: `<file>.manifest.json`.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Parses `start:stop:step` (inclusive) or a comma-separated list.
pub fn parse_snr_range(s: &str) -> Result<Vec<i16>> {
    let bad = || Error::Config(format!("invalid SNR range `{s}` (expected start:stop:step)"));
    let num = |t: &str| t.trim().parse::<i16>().map_err(|_| bad());
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [a, b, st] => {
            let (a, b, st) = (num(a)?, num(b)?, num(st)?);
            if st <= 0 || a > b {
                return Err(bad());
            }
            Ok((a..=b).step_by(st as usize).collect())
        }
        [_] => s.split(',').map(num).collect(),
        _ => Err(bad()),
    }
}

fn parse_classes(s: &str) -> Result<Vec<ModulationClass>> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(ModulationClass::ALL.to_vec());
    }
    s.split(',').map(|c| c.trim().parse()).collect()
}

fn load_triples(path: Option<&Path>) -> Result<TripleSet> {
    match path {
        Some(p) => mkg::parse_triples(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => mkg::parse_triples(mkg::DEFAULT_MKG),
    }
}

fn load_graph(path: Option<&Path>) -> Result<HeteroGraph> {
    HeteroGraph::build(&load_triples(path)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_synth(run: &Run, a: SynthArgs) -> Result<i32> {
    let cfg = SynthConfig {
        frame_len: a.frame_len,
        seed: a.seed,
        snr_grid: parse_snr_range(&a.snr)?,
        classes: parse_classes(&a.classes)?,
        ..SynthConfig::default()
    };
    let ds = sigsyn::synth_dataset(&cfg, a.frames_per_cell)?;
    dataio::write_dataset(&ds, &a.out)?;
    let mut config = serde_json::to_value(&cfg)?;
    config["frames_per_cell"] = a.frames_per_cell.into();
    write_manifest(
        &sidecar(&a.out),
        &run.manifest(config, vec![], vec![a.out.clone()], Some(a.seed)),
    )?;
    println!("wrote {} frames to {}", ds.len(), a.out.display());
    Ok(EXIT_OK)
}

fn cmd_convert(run: &Run, a: ConvertArgs) -> Result<i32> {
    let classes = a
        .classes
        .as_deref()
        .map(|s| s.split(',').map(|c| c.trim().to_string()).collect());
    let ds = dataio::dataset_from_csv_dir(&a.input, classes)?;
    dataio::write_dataset(&ds, &a.out)?;
    let config = serde_json::json!({ "classes": ds.classes, "frame_len": ds.frame_len });
    write_manifest(
        &sidecar(&a.out),
        &run.manifest(config, vec![a.input.clone()], vec![a.out.clone()], None),
    )?;
    println!("wrote {} frames to {}", ds.len(), a.out.display());
    Ok(EXIT_OK)
}

fn cmd_kg(cmd: KgCommand) -> Result<i32> {
    match cmd {
        KgCommand::Validate(a) => {
            let set = load_triples(a.triples.as_deref())?;
            let violations = mkg::validate_ontology(&set);
            for v in &violations {
                eprintln!("{v}");
            }
            println!("{} triples, {} violations", set.triples.len(), violations.len());
            Ok(if violations.is_empty() {
                EXIT_OK
            } else {
                EXIT_VALIDATION
            })
        }
        KgCommand::Inspect(a) => {
            let g = load_graph(a.triples.as_deref())?;
            println!("nodes\t{}", g.node_count());
            println!("edges\t{}", g.edge_count());
            for (t, n) in g.type_counts() {
                println!("type\t{t}\t{n}");
            }
            for (r, n) in g.relation_counts() {
                println!("relation\t{r}\t{n}");
            }
            for (i, name) in g.names().iter().enumerate() {
                if g.node_types()[i] == mkg::NodeType::ModulationMethod {
                    println!("anchor\t{name}\t{i}");
                }
            }
            Ok(EXIT_OK)
        }
    }
}

fn cmd_train(run: &Run, a: TrainArgs) -> Result<i32> {
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr_msnet: a.lr_msnet,
        lr_rgcn: a.lr_rgcn,
        weight_decay: a.weight_decay,
        lambda: a.lambda,
        d: a.d,
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let graph = load_graph(a.kg.as_deref())?;
    let data = dataio::read_dataset(&a.data)?;
    create_dir(&a.out)?;
    let mut inputs = vec![a.data.clone()];
    let mut outputs = Vec::new();
    let (train_ds, test_ds) = match &a.test {
        Some(p) => {
            inputs.push(p.clone());
            (data, dataio::read_dataset(p)?)
        }
        None => {
            let (tr, te) = dataio::split(&data, a.train_fraction, a.seed)?;
            let p = a.out.join("test.amcd");
            dataio::write_dataset(&te, &p)?;
            outputs.push(p);
            (tr, te)
        }
    };
    if let Some(k) = &a.kg {
        inputs.push(k.clone());
    }
    let log_path = a.out.join("history.jsonl");
    let mut log = String::new();
    let mut io_err = None;
    let (state, _) = trainer::train::<f32>(&train_ds, Some(&test_ds), &graph, &cfg, &mut |r| {
        log.push_str(&serde_json::to_string(r).unwrap_or_default());
        log.push('\n');
        if let Err(e) = fs::write(&log_path, &log) {
            io_err.get_or_insert(Error::io(&log_path, e));
        }
        println!(
            "epoch {:>3}  loss {:.4}  train {:.4}  test {}",
            r.epoch,
            r.l_total,
            r.train_acc,
            r.test_acc.map_or("-".into(), |t| format!("{t:.4}"))
        );
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    let ckpt = a.out.join("model.kgmc");
    save_checkpoint(&state, &ckpt)?;
    outputs.extend([ckpt, log_path]);
    let mut config = serde_json::to_value(&cfg)?;
    config["train_fraction"] = a.train_fraction.into();
    write_manifest(
        &a.out.join("manifest.json"),
        &run.manifest(config, inputs, outputs, Some(cfg.seed)),
    )?;
    Ok(EXIT_OK)
}

fn cmd_eval(run: &Run, a: EvalArgs) -> Result<i32> {
    let state = load_checkpoint::<f32>(&a.ckpt)?;
    let ds = dataio::read_dataset(&a.data)?;
    let snrs = parse_snr_range(&a.confusion_snr)?;
    let ev = evaluate(&state, &ds, a.mode, &snrs)?;
    export_report(&ev, &a.out)?;
    let config = serde_json::json!({ "mode": a.mode, "confusion_snr": snrs });
    write_manifest(
        &a.out.join("manifest.json"),
        &run.manifest(config, vec![a.data.clone(), a.ckpt.clone()], vec![a.out.clone()], None),
    )?;
    println!("overall accuracy {}", ev.report.accuracy.overall);
    if let Some(c) = ev.report.cluster {
        println!(
            "intra_class_cos {:.4}  inter_class_cos {:.4}  silhouette {:.4}",
            c.intra_class_cos, c.inter_class_cos, c.silhouette
        );
    }
    Ok(EXIT_OK)
}

fn read_infer_input(path: &Path, frame_len: usize) -> Result<Vec<SignalFrame>> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let samples = dataio::read_csv_frame(path)?;
        if samples.len() != frame_len {
            return Err(Error::shape("infer", &[samples.len(), 2], &[frame_len, 2]));
        }
        let mut iq: Vec<f32> = samples.iter().map(|s| s.0).collect();
        iq.extend(samples.iter().map(|s| s.1));
        return Ok(vec![SignalFrame {
            iq,
            label: 0,
            snr_db: 0,
        }]);
    }
    let ds: Dataset = dataio::read_dataset(path)?;
    if ds.frame_len != frame_len {
        return Err(Error::shape("infer", &[2, ds.frame_len], &[2, frame_len]));
    }
    Ok(ds.frames)
}

fn cmd_infer(run: &Run, a: InferArgs) -> Result<i32> {
    let state = load_checkpoint::<f32>(&a.ckpt)?;
    let frames = read_infer_input(&a.input, state.frame_len())?;
    let inf = infer(&frames, &state, a.mode)?;
    let mut w = csv::Writer::from_path(&a.out).map_err(|e| Error::Config(e.to_string()))?;
    let mut header = vec!["index".to_string(), "label".to_string()];
    header.extend(state.class_names.iter().map(|c| format!("p_{c}")));
    w.write_record(&header)?;
    for (i, &y) in inf.labels.iter().enumerate() {
        let mut rec = vec![i.to_string(), state.class_names[y].clone()];
        rec.extend(inf.scores.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    let config = serde_json::json!({ "mode": a.mode });
    write_manifest(
        &sidecar(&a.out),
        &run.manifest(config, vec![a.ckpt.clone(), a.input.clone()], vec![a.out.clone()], None),
    )?;
    Ok(EXIT_OK)
}

/// Exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Declaration { .. }
        | Error::Format { .. }
        | Error::Length { .. }
        | Error::Shape { .. }
        | Error::OutOfRange(_)
        | Error::UnsupportedConstellation(_)
        | Error::Checkpoint(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("KGAMC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if n > 0 {
            // only fails if a pool already exists, in which case it is kept
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    configure_threads();
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let mut run = Run {
        command: "",
        args,
        started: Instant::now(),
        started_unix,
    };
    let result = match cli.command {
        Command::Synth(a) => {
            run.command = "synth";
            cmd_synth(&run, a)
        }
        Command::Convert(a) => {
            run.command = "convert";
            cmd_convert(&run, a)
        }
        Command::Kg(k) => cmd_kg(k),
        Command::Train(a) => {
            run.command = "train";
            cmd_train(&run, a)
        }
        Command::Eval(a) => {
            run.command = "eval";
            cmd_eval(&run, a)
        }
        Command::Infer(a) => {
            run.command = "infer";
            cmd_infer(&run, a)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
