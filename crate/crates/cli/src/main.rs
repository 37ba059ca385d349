//! `kdlab`: corpus synthesis, teacher pre-training, logit generation,
//! distillation, quantization, evaluation and reporting.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kdlab::distill::{check_compatible, validation_loss_with, weight_average, ChunkCycle, ManifestSource, TrainConfig, Trainer};
use kdlab::harness::{
    cost_csv, eval_tasks, family_total, frontier_csv, frontier_series, load_items, load_model_params, macro_average,
    pareto_front, reference_cost_table, report_points, run_experiment, synth_documents, write_synth_corpus, CostAxis,
    CostEntry, CostMode, EvalSuite, ExperimentSpec, ParamsModel, QualityAxis, Report, SynthConfig, TaskKind,
};
use kdlab::logitstore::{generate_logit_shards, load_corpus_dir, pack_corpus, ShardManifest, TokenChunk, BYTE_VOCAB, MANIFEST_FILE};
use kdlab::model::{save_checkpoint, ForwardOptions, ModelConfig, ModelParams};
use kdlab::quant::{fuse_norms, qad, quantize_model, PtqMethod, QadConfig, QuantFormat, QuantizedModel, QUANT_CHECKPOINT_MAGIC};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Exit status when `report` finishes with failed rows.
const EXIT_FAILED_ROWS: u8 = 3;

#[derive(Parser)]
#[command(name = "kdlab", version, about = "Desk-scale distillation and quantization pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic text corpus (task lines mixed with filler prose).
    SynthCorpus(SynthArgs),
    /// Train a teacher with plain next-token cross-entropy on a corpus.
    Pretrain(PretrainArgs),
    /// Run a teacher over a corpus and store top-K records as shards.
    TeacherGen(TeacherGenArgs),
    /// Train a student from stored teacher shards.
    Distill(DistillArgs),
    /// Quantize a checkpoint with RTN, GPTQ or QAD.
    Quantize(QuantizeArgs),
    /// Print the training-cost table.
    Cost(CostArgs),
    /// Validation loss and task accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Cost/quality frontier of a report.
    Pareto(ParetoArgs),
    /// Run an experiment grid and write report.csv / report.json.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    documents: usize,
    #[arg(long, default_value_t = 8)]
    lines_per_doc: usize,
    #[arg(long, default_value_t = 0.75)]
    task_fraction: f64,
    #[arg(long, default_value_t = 3)]
    task_len: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Architecture flags; unset fields take the defaults of the command.
#[derive(Args, Clone)]
struct ModelArgs {
    /// JSON model config; the shape flags are ignored when given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    mlp_dim: Option<usize>,
    #[arg(long)]
    q_heads: Option<usize>,
    #[arg(long)]
    kv_heads: Option<usize>,
    /// Separate output head instead of reusing the embedding.
    #[arg(long)]
    untied: bool,
}

impl ModelArgs {
    fn resolve(&self, defaults: [usize; 5], seq_len: usize) -> Result<ModelConfig> {
        let cfg = match &self.config {
            Some(path) => {
                let text = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
                let mut cfg: ModelConfig = serde_json::from_slice(&text).with_context(|| format!("parsing {}", path.display()))?;
                ensure!(cfg.seq_len >= seq_len, "config seq_len {} is shorter than chunk_len {seq_len}", cfg.seq_len);
                cfg.vocab = BYTE_VOCAB.max(cfg.vocab);
                cfg
            }
            None => ModelConfig::new(
                self.layers.unwrap_or(defaults[0]),
                self.dim.unwrap_or(defaults[1]),
                self.mlp_dim.unwrap_or(defaults[2]),
                self.q_heads.unwrap_or(defaults[3]),
                self.kv_heads.unwrap_or(defaults[4]),
                BYTE_VOCAB,
                seq_len,
                !self.untied,
            ),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

const TEACHER_SHAPE: [usize; 5] = [4, 128, 512, 4, 2];
const STUDENT_SHAPE: [usize; 5] = [2, 64, 256, 4, 2];

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 1000)]
    iters: u64,
    /// Sequences per optimizer step.
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.1)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// 0 disables checkpoints.
    #[arg(long, default_value_t = 100)]
    checkpoint_interval: u64,
    #[arg(long, default_value_t = 100)]
    log_interval: u64,
}

impl TrainArgs {
    fn config(&self, lambda_kd: f64) -> TrainConfig {
        let mut c = TrainConfig::wsd(self.lr, self.batch, self.iters, self.seed);
        c.lambda_kd = lambda_kd;
        c.weight_decay = self.weight_decay;
        c.checkpoint_interval = self.checkpoint_interval;
        c.log_interval = self.log_interval;
        c
    }
}

/// How a corpus directory is cut into training and validation sequences.
#[derive(Args, Clone)]
struct SplitArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 256)]
    chunk_len: usize,
    /// Trailing sequences held out for validation.
    #[arg(long, default_value_t = 64)]
    val_chunks: usize,
}

impl SplitArgs {
    fn load(&self) -> Result<(Vec<TokenChunk>, Vec<TokenChunk>)> {
        let docs = load_corpus_dir(&self.corpus)?;
        let mut chunks = pack_corpus(&docs, self.chunk_len)?;
        ensure!(
            chunks.len() > self.val_chunks,
            "corpus packs into {} sequences, not enough to hold out {}",
            chunks.len(),
            self.val_chunks
        );
        let val = chunks.split_off(chunks.len() - self.val_chunks);
        Ok((chunks, val))
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TeacherGenArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long, default_value_t = 32)]
    k: usize,
    #[arg(long, default_value_t = 65536)]
    tokens_per_shard: usize,
    /// Sequence permutation seed; omit to keep corpus order.
    #[arg(long)]
    perm_seed: Option<u64>,
    /// Writes `train/` and `val/` manifests below this directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    /// Directory (or manifest file) of the training shards.
    #[arg(long)]
    shards: PathBuf,
    /// Validation shards; only their sequences are used.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Weight of the KL term; the rest goes to cross-entropy.
    #[arg(long, default_value_t = 0.9)]
    lambda: f64,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Rtn,
    Gptq,
    Qad,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Checkpoint to quantize; several are averaged first.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Average the N newest `ckpt-*.kdfc` files of the directory given by `--in`.
    #[arg(long)]
    avg_last: Option<usize>,
    #[arg(long)]
    format: QuantFormat,
    #[arg(long, value_enum, default_value = "rtn")]
    method: Method,
    #[arg(long)]
    fuse_norms: bool,
    /// Shards used for GPTQ Hessians and QAD batches.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    calib_chunks: usize,
    /// Shuffles the calibration sequences.
    #[arg(long)]
    seed: Option<u64>,
    /// Live teacher for QAD when the shards carry no records.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    qad_steps: u64,
    #[arg(long, default_value_t = 1e-3)]
    qad_lr: f64,
    #[arg(long, default_value_t = 8)]
    qad_batch: usize,
    #[arg(long, default_value_t = 1.0)]
    qad_lambda: f64,
    #[arg(long, default_value_t = 32)]
    top_k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    /// `label:n_params:tokens:train|forward`; replaces the reference table.
    #[arg(long = "entry")]
    entries: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model (`.kdfc`), training or quantized (`.kdfq`) checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Shards whose sequences give the validation loss.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    examples: usize,
    #[arg(long, default_value_t = 3)]
    task_len: usize,
    #[arg(long, default_value_t = 1234)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum CostArg {
    Storage,
    Macs,
}

#[derive(Clone, Copy, ValueEnum)]
enum QualityArg {
    NegValLoss,
    TaskMacro,
}

#[derive(Args)]
struct ParetoArgs {
    /// `report.json` written by `report`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_enum, default_value = "storage")]
    cost: CostArg,
    #[arg(long, value_enum, default_value = "neg-val-loss")]
    quality: QualityArg,
    /// Writes `frontier.csv` and `series.json` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Experiment spec (JSON); relative paths resolve against its directory.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::SynthCorpus(a) => synth(a)?,
        Command::Pretrain(a) => pretrain(a)?,
        Command::TeacherGen(a) => teacher_gen(a)?,
        Command::Distill(a) => distill(a)?,
        Command::Quantize(a) => quantize(a)?,
        Command::Cost(a) => cost(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Pareto(a) => pareto(a)?,
        Command::Report(a) => return report(a),
    }
    Ok(ExitCode::SUCCESS)
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        documents: a.documents,
        lines_per_doc: a.lines_per_doc,
        task_fraction: a.task_fraction,
        task_len: a.task_len,
        seed: a.seed,
    };
    let n = write_synth_corpus(&cfg, &a.out)?;
    let bytes: usize = synth_documents(&cfg)?.iter().map(Vec::len).sum();
    println!("wrote {n} documents ({bytes} bytes) to {}", a.out.display());
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let (train, val) = a.split.load()?;
    let cfg = a.model.resolve(TEACHER_SHAPE, a.split.chunk_len)?;
    eprintln!("pre-training {} parameters on {} sequences", cfg.count_params().total, train.len());
    let outcome = Trainer::<f32>::new(&cfg, a.train.config(0.0))?
        .with_out_dir(&a.out)?
        .run(&mut ChunkCycle::new(train)?, &val)?;
    finish_training(&a.out, &outcome.params, outcome.metrics.last().and_then(|m| m.val_loss))
}

fn finish_training(out: &Path, params: &ModelParams<f32>, val_loss: Option<f64>) -> Result<()> {
    let path = out.join("model.kdfc");
    save_checkpoint(&path, params)?;
    match val_loss {
        Some(v) => println!("saved {} (validation loss {v:.4})", path.display()),
        None => println!("saved {}", path.display()),
    }
    Ok(())
}

fn teacher_gen(a: TeacherGenArgs) -> Result<()> {
    let teacher = load_model_params(&a.teacher)?;
    let (train, val) = a.split.load()?;
    let m = generate_logit_shards(&teacher, &train, a.k, a.perm_seed, a.tokens_per_shard, &a.out.join("train"))?;
    println!("train: {} shards, {} tokens", m.shards.len(), m.total_tokens());
    if !val.is_empty() {
        let v = generate_logit_shards(&teacher, &val, a.k, None, a.tokens_per_shard, &a.out.join("val"))?;
        println!("val: {} shards, {} tokens", v.shards.len(), v.total_tokens());
    }
    Ok(())
}

fn load_manifest(path: &Path) -> Result<ShardManifest> {
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    ShardManifest::load(&path).with_context(|| format!("loading manifest {}", path.display()))
}

fn load_sequences(path: &Path) -> Result<Vec<TokenChunk>> {
    Ok(load_items(&load_manifest(path)?)?.into_iter().map(|(c, _)| c).collect())
}

fn distill(a: DistillArgs) -> Result<()> {
    let manifest = load_manifest(&a.shards)?;
    let cfg = a.model.resolve(STUDENT_SHAPE, manifest.chunk_len)?;
    check_compatible(&cfg, &manifest)?;
    let val = a.val.as_deref().map(load_sequences).transpose()?.unwrap_or_default();
    eprintln!("distilling {} parameters, lambda {}", cfg.count_params().total, a.lambda);
    let outcome = Trainer::<f32>::new(&cfg, a.train.config(a.lambda))?
        .with_out_dir(&a.out)?
        .run(&mut ManifestSource::new(&manifest)?, &val)?;
    finish_training(&a.out, &outcome.params, outcome.metrics.last().and_then(|m| m.val_loss))
}

/// The `n` newest training checkpoints of a directory, oldest first.
fn last_checkpoints(dir: &Path, n: usize) -> Result<Vec<PathBuf>> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|f| f.to_str())
                .is_some_and(|f| f.starts_with("ckpt-") && f.ends_with(".kdfc"))
        })
        .collect();
    found.sort();
    ensure!(found.len() >= n, "{} holds {} checkpoints, {n} requested", dir.display(), found.len());
    Ok(found.split_off(found.len() - n))
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let paths = match a.avg_last {
        Some(n) => {
            ensure!(a.inputs.len() == 1, "--avg-last takes a single checkpoint directory");
            last_checkpoints(&a.inputs[0], n)?
        }
        None => a.inputs.clone(),
    };
    let all = paths.iter().map(|p| load_model_params(p)).collect::<kdlab::Result<Vec<_>>>()?;
    let mut params = if all.len() == 1 { all.into_iter().next().unwrap() } else { weight_average(&all.iter().collect::<Vec<_>>())? };
    if a.fuse_norms {
        params = fuse_norms(&params);
    }
    let mut items = match &a.calib {
        Some(p) => load_items(&load_manifest(p)?)?,
        None => Vec::new(),
    };
    if let Some(s) = a.seed {
        items.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }
    let q = match a.method {
        Method::Rtn => quantize_model(&params, &a.format, PtqMethod::Rtn, &[])?,
        Method::Gptq => {
            ensure!(!items.is_empty(), "GPTQ needs --calib shards");
            let calib: Vec<TokenChunk> = items.iter().take(a.calib_chunks.max(1)).map(|(c, _)| c.clone()).collect();
            quantize_model(&params, &a.format, PtqMethod::Gptq, &calib)?
        }
        Method::Qad => {
            ensure!(!items.is_empty(), "QAD needs --calib shards");
            let teacher = a.teacher.as_deref().map(load_model_params).transpose()?;
            let mut cfg = QadConfig::new(a.qad_steps, a.qad_lr, a.qad_batch);
            cfg.lambda_kd = a.qad_lambda;
            cfg.top_k = a.top_k;
            let mut source = ChunkCycle::with_records(items)?;
            let outcome = qad(&params, teacher.as_ref().unwrap_or(&params), &a.format, &mut source, &cfg)?;
            if let (Some(first), Some(last)) = (outcome.losses.first(), outcome.losses.last()) {
                eprintln!("QAD loss {first:.4} -> {last:.4} over {} steps", outcome.losses.len());
            }
            outcome.quantized
        }
    };
    let layout = q.save(&a.out)?;
    println!(
        "{}",
        serde_json::json!({
            "out": a.out,
            "format": a.format.name(),
            "averaged": paths.len(),
            "file_bytes": layout.total,
            "payload_bytes": layout.payload,
            "quantized_payload_bytes": q.quantized_payload_bytes(),
        })
    );
    Ok(())
}

fn parse_entry(s: &str) -> Result<CostEntry> {
    let parts: Vec<&str> = s.rsplitn(4, ':').collect();
    let [mode, tokens, n, label] = parts[..] else {
        bail!("entry `{s}` is not label:n_params:tokens:mode");
    };
    let n: f64 = n.parse().with_context(|| format!("n_params in `{s}`"))?;
    let tokens: f64 = tokens.parse().with_context(|| format!("tokens in `{s}`"))?;
    let mode: CostMode = mode.parse()?;
    Ok(CostEntry::new(label, n, tokens, mode)?)
}

fn cost(a: CostArgs) -> Result<()> {
    let reference = a.entries.is_empty();
    let table = if reference { reference_cost_table() } else { a.entries.iter().map(|e| parse_entry(e)).collect::<Result<Vec<_>>>()? };
    let csv = cost_csv(&table);
    print!("{csv}");
    if let Some(out) = &a.out {
        fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
    }
    if reference {
        let total = family_total(&table);
        let base = table[0].macs;
        eprintln!("family total {total:.2e} ({:.1}% of {})", 100.0 * total / base, table[0].label);
    }
    Ok(())
}

fn is_quantized(path: &Path) -> Result<bool> {
    let mut magic = [0u8; 4];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(&magic == QUANT_CHECKPOINT_MAGIC)
}

fn eval(a: EvalArgs) -> Result<()> {
    let (params, opts): (ModelParams<f32>, ForwardOptions<f32>) = if is_quantized(&a.model)? {
        let q = QuantizedModel::load(&a.model)?;
        (q.dequantize()?, q.serving_options())
    } else {
        (load_model_params(&a.model)?, ForwardOptions::default())
    };
    let val_loss = match &a.val {
        Some(p) => Some(validation_loss_with(&params, &load_sequences(p)?, &opts)?),
        None => None,
    };
    let suite = EvalSuite {
        tasks: TaskKind::ALL.to_vec(),
        examples: a.examples,
        len: a.task_len,
        seed: a.seed,
    };
    let model = ParamsModel { params: &params, opts };
    let scores = eval_tasks(&model, &suite)?;
    let tasks: serde_json::Map<String, serde_json::Value> =
        scores.iter().map(|s| (s.task.to_string(), serde_json::json!(s.accuracy))).collect();
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "model": a.model,
            "val_loss": val_loss,
            "tasks": tasks,
            "task_macro": macro_average(&scores),
        }))?
    );
    Ok(())
}

fn pareto(a: ParetoArgs) -> Result<()> {
    let report = Report::load(&a.report)?;
    let cost = match a.cost {
        CostArg::Storage => CostAxis::StorageBytes,
        CostArg::Macs => CostAxis::Macs,
    };
    let quality = match a.quality {
        QualityArg::NegValLoss => QualityAxis::NegValLoss,
        QualityArg::TaskMacro => QualityAxis::TaskMacro,
    };
    let points = report_points(&report, cost, quality);
    let front = pareto_front(&points)?;
    let csv = frontier_csv(&front);
    print!("{csv}");
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("frontier.csv"), &csv)?;
        let series = serde_json::to_string_pretty(&frontier_series(&points, &front))?;
        fs::write(dir.join("series.json"), series)?;
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<ExitCode> {
    let spec = ExperimentSpec::load(&a.spec)?;
    let base = a.spec.parent().map(Path::to_path_buf).unwrap_or_default();
    let report = run_experiment(&spec, &base, &a.out)?;
    report.write(&a.out)?;
    print!("{}", report.csv());
    let failed = report.failures();
    if failed > 0 {
        eprintln!("{failed} of {} rows failed", report.rows.len());
        return Ok(ExitCode::from(EXIT_FAILED_ROWS));
    }
    Ok(ExitCode::SUCCESS)
}
