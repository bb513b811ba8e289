use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use rayon::prelude::*;
use serde::Deserialize;

use ragdetect::align::{self, Batch, DualEncoder, LossOptions, Optimizer, SimilarityMode, TrainConfig};
use ragdetect::bridge::BridgeClient;
use ragdetect::context::{ShotMode, ShotOrder};
use ragdetect::degrade::{Degradation, RasterImage};
use ragdetect::eval::{self, BridgeEmbedder, Embedder, EvalConfig, EvalReport};
use ragdetect::responder::{BridgeResponder, KnnVoteResponder, Responder};
use ragdetect::{EmbeddingVector, Error, Result, VectorIndex};

#[derive(Parser)]
#[command(version, about = "Retrieval-augmented real/fake image detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    #[command(subcommand)]
    Index(IndexCommand),
    /// Train the image-side adapter with the symmetric contrastive loss.
    TrainAlign(TrainArgs),
    /// Apply a blur or JPEG degradation to images.
    Degrade(DegradeArgs),
    /// Run the detector over a labeled manifest.
    Evaluate(EvaluateArgs),
    /// mAcc difference between a retrieval run and a random-shot run.
    Ablation {
        #[arg(long)]
        rag: PathBuf,
        #[arg(long)]
        random: PathBuf,
    },
    /// Column-wise mean of several reports.
    Average {
        reports: Vec<PathBuf>,
    },
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Build an index file from a JSON-lines manifest.
    Build {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        bridge: BridgeOpts,
    },
    /// Print the top-k hits for a query vector as JSON.
    Query {
        #[arg(long)]
        index: PathBuf,
        /// JSON array of floats.
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Write `id,label,subset,image_ref,v0..` rows for offline plotting.
    ExportCsv {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct BridgeOpts {
    /// Command line that starts a bridge host on stdio.
    #[arg(long)]
    bridge_cmd: Option<String>,
    /// Number of bridge processes to run side by side.
    #[arg(long, default_value_t = 1)]
    bridge_workers: usize,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
}

impl BridgeOpts {
    fn connect(&self) -> Result<Option<Vec<BridgeClient>>> {
        let Some(cmd) = &self.bridge_cmd else {
            return Ok(None);
        };
        let timeout = Duration::from_secs(self.timeout_secs);
        let clients = (0..self.bridge_workers.max(1))
            .map(|_| BridgeClient::spawn_command_line(cmd, timeout).map_err(Error::from))
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(clients))
    }
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON lines of `{"image": [...], "text": [...]}` feature pairs.
    #[arg(long)]
    data: PathBuf,
    /// Trained encoder parameters (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss trace (CSV).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    embed_dim: usize,
    rank: usize,
    alpha: f64,
    dropout: f64,
    init_seed: u64,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    temperature: f64,
    similarity: SimilarityMode,
    optimizer: OptimizerName,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
enum OptimizerName {
    Sgd,
    Adam,
}

impl Default for TrainFile {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            embed_dim: 64,
            rank: align::DEFAULT_LORA_RANK,
            alpha: align::DEFAULT_LORA_ALPHA,
            dropout: align::DEFAULT_LORA_DROPOUT,
            init_seed: 0,
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            temperature: t.loss.temperature,
            similarity: t.loss.similarity,
            optimizer: OptimizerName::Sgd,
        }
    }
}

#[derive(Deserialize)]
struct PairLine {
    image: Vec<f64>,
    text: Vec<f64>,
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long, value_enum)]
    op: DegradeOp,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    q: Option<u8>,
    /// Input image files or directories.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DegradeOp {
    Blur,
    Jpeg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ResponderKind {
    KnnVote,
    Bridge,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long, default_value_t = 13)]
    n: usize,
    #[arg(long, default_value = "rag")]
    mode: ShotMode,
    #[arg(long, default_value = "descending")]
    order: ShotOrder,
    #[arg(long, value_enum, default_value = "knn-vote")]
    responder: ResponderKind,
    /// `blur:<sigma>` or `jpeg:<quality>`, applied to query images.
    #[arg(long)]
    degrade: Option<Degradation>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Do not send the system prompt to the bridge.
    #[arg(long)]
    no_system_prompt: bool,
    #[command(flatten)]
    bridge: BridgeOpts,
    /// Report JSON; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn read_pairs(path: &Path) -> Result<Batch> {
    let mut image = Vec::new();
    let mut text = Vec::new();
    let (mut di, mut dt) = (None, None);
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PairLine = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if *di.get_or_insert(p.image.len()) != p.image.len() || *dt.get_or_insert(p.text.len()) != p.text.len() {
            return Err(Error::Manifest {
                line: i + 1,
                reason: "feature lengths differ from the first line".into(),
            });
        }
        image.extend(p.image);
        text.extend(p.text);
    }
    let (Some(di), Some(dt)) = (di, dt) else {
        return Err(Error::Batch("no training pairs".into()));
    };
    let n = image.len() / di.max(1);
    let shape_err = |e: ndarray::ShapeError| Error::Batch(e.to_string());
    Batch::new(
        Array2::from_shape_vec((n, di), image).map_err(shape_err)?,
        Array2::from_shape_vec((n, dt), text).map_err(shape_err)?,
    )
}

fn train_align(args: TrainArgs) -> Result<()> {
    let file: TrainFile = match &args.config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?).map_err(|e| Error::Config(e.to_string()))?,
        None => TrainFile::default(),
    };
    let data = read_pairs(&args.data)?;
    let encoder = DualEncoder::init(
        data.image_inputs.ncols(),
        data.text_inputs.ncols(),
        file.embed_dim,
        file.rank,
        file.alpha,
        file.dropout,
        file.init_seed,
    )?;
    let loss = LossOptions {
        temperature: file.temperature,
        similarity: file.similarity,
    };
    let cfg = TrainConfig {
        lr: file.lr,
        epochs: file.epochs,
        batch_size: file.batch_size,
        seed: file.seed,
        loss,
        optimizer: match file.optimizer {
            OptimizerName::Sgd => Optimizer::Sgd,
            OptimizerName::Adam => Optimizer::adam(),
        },
    };
    let before = align::batch_loss(&data, &encoder, loss)?;
    let outcome = align::train(&data, encoder, &cfg)?;
    let after = align::batch_loss(&data, &outcome.encoder, loss)?;
    let margin = align::alignment_margin(&data, &outcome.encoder)?;
    log::info!("loss {before:.6} -> {after:.6}, alignment margin {margin:.4}");
    println!(
        "{}",
        serde_json::json!({ "loss_before": before, "loss_after": after, "margin": margin, "steps": outcome.loss_trace.len() })
    );
    let mut f = File::create(&args.out)?;
    serde_json::to_writer(&mut f, &outcome.encoder)?;
    if let Some(p) = &args.trace {
        let mut w = csv::Writer::from_path(p).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        w.write_record(["step", "loss"]).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for (i, l) in outcome.loss_trace.iter().enumerate() {
            w.write_record([i.to_string(), l.to_string()])
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
    }
    Ok(())
}

fn collect_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                        Some("png" | "jpg" | "jpeg")
                    )
                })
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn degrade(args: DegradeArgs) -> Result<()> {
    let op = match args.op {
        DegradeOp::Blur => Degradation::Blur {
            sigma: args.sigma.ok_or_else(|| Error::Config("--sigma is required for blur".into()))?,
        },
        DegradeOp::Jpeg => Degradation::Jpeg {
            quality: args.q.ok_or_else(|| Error::Config("--q is required for jpeg".into()))?,
        },
    };
    // Reuse the parser's range checks.
    let op: Degradation = op.to_string().parse()?;
    std::fs::create_dir_all(&args.out)?;
    let files = collect_images(&args.inputs)?;
    files.par_iter().try_for_each(|path| -> Result<()> {
        let img = RasterImage::open(path)?;
        let out = op.apply(&img)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        out.save(args.out.join(format!("{stem}.png")))
    })?;
    eprintln!("wrote {} images to {}", files.len(), args.out.display());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let manifest = eval::read_manifest(&args.manifest, true)?;
    let index = VectorIndex::load(&args.index)?;
    let needs_embedder = manifest.iter().any(|e| e.vector.is_none());
    let embedder = if needs_embedder {
        let clients = args
            .bridge
            .connect()?
            .ok_or_else(|| Error::Config("manifest needs --bridge-cmd for embedding".into()))?;
        Some(BridgeEmbedder::new(clients)?)
    } else {
        None
    };
    let responder: Box<dyn Responder> = match args.responder {
        ResponderKind::KnnVote => Box::new(KnnVoteResponder),
        ResponderKind::Bridge => {
            let clients = args
                .bridge
                .connect()?
                .ok_or_else(|| Error::Config("--responder bridge needs --bridge-cmd".into()))?;
            let name = clients[0].hello().model.clone();
            let r = BridgeResponder::new(name, clients)?;
            Box::new(if args.no_system_prompt { r.without_system_prompt() } else { r })
        }
    };
    let config = EvalConfig {
        n_shots: args.n,
        mode: args.mode,
        order: args.order,
        seed: args.seed,
        degradation: args.degrade,
    };
    let report = eval::evaluate(
        &manifest,
        &index,
        &config,
        responder.as_ref(),
        embedder.as_ref().map(|e| e as &dyn Embedder),
    )?;
    eprintln!(
        "mAcc {:.4}  failures {:.4}  ({} entries, {} subsets)",
        report.m_acc,
        report.failure_rate,
        report.total(),
        report.per_subset.len()
    );
    match &args.out {
        Some(p) => report.save(p)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    if let Some(p) = &args.csv {
        report.write_csv(File::create(p)?)?;
    }
    Ok(())
}

fn index_cmd(cmd: IndexCommand) -> Result<()> {
    match cmd {
        IndexCommand::Build { manifest, out, bridge } => {
            let entries = eval::read_manifest(&manifest, false)?;
            let embedder = match bridge.connect()? {
                Some(c) => Some(BridgeEmbedder::new(c)?),
                None => None,
            };
            let index = eval::build_index(&entries, embedder.as_ref().map(|e| e as &dyn Embedder))?;
            index.save(&out)?;
            eprintln!("indexed {} entries (dim {})", index.len(), index.dim().unwrap_or(0));
        }
        IndexCommand::Query { index, query, k } => {
            let index = VectorIndex::load(index)?;
            let values: Vec<f32> = serde_json::from_str(&query)?;
            let result = index.retrieve_topk(&EmbeddingVector::new(values)?, k)?;
            println!("{}", serde_json::to_string(&result.hits)?);
        }
        IndexCommand::ExportCsv { index, out } => {
            let index = VectorIndex::load(index)?;
            let mut w = csv::Writer::from_path(out).map_err(|e| Error::Io(std::io::Error::other(e)))?;
            let dim = index.dim().unwrap_or(0);
            let mut header = vec!["id".to_string(), "label".into(), "subset".into(), "image_ref".into()];
            header.extend((0..dim).map(|i| format!("v{i}")));
            w.write_record(&header).map_err(|e| Error::Io(std::io::Error::other(e)))?;
            for e in index.entries() {
                let mut row = vec![
                    e.id.to_string(),
                    e.label.word().to_string(),
                    e.subset.clone().unwrap_or_default(),
                    e.image_ref.clone(),
                ];
                row.extend(e.embedding.values().iter().map(|v| v.to_string()));
                w.write_record(&row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Index(cmd) => index_cmd(cmd),
        Command::TrainAlign(args) => train_align(args),
        Command::Degrade(args) => degrade(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Ablation { rag, random } => {
            let delta = eval::ablation_delta(&EvalReport::load(rag)?, &EvalReport::load(random)?)?;
            println!("{}", serde_json::json!({ "delta": delta, "delta_percent": 100.0 * delta }));
            Ok(())
        }
        Command::Average { reports } => {
            let reports = reports.iter().map(EvalReport::load).collect::<Result<Vec<_>>>()?;
            let avg = eval::average_reports(&reports)?;
            let mut out = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut out, &avg)?;
            writeln!(out)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
