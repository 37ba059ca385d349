use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{validation_loss_with, weight_average, ChunkCycle, TrainItem};
use crate::error::{Error, Result};
use crate::harness::{eval_tasks, macro_average, EvalSuite, ParamsModel, ParetoPoint};
use crate::logitstore::{stream_shards, ShardManifest, TokenChunk, MANIFEST_FILE};
use crate::model::{read_params, ModelConfig, ModelParams};
use crate::quant::{fuse_norms, qad, quantize_model, recovery, PtqMethod, QadConfig, QuantFormat, QuantizedModel};

/// Model section of an experiment spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub label: String,
    pub checkpoint: PathBuf,
    /// Checkpoints to average instead of using `checkpoint` alone.
    #[serde(default)]
    pub average: Vec<PathBuf>,
    #[serde(default)]
    pub fuse_norms: bool,
    /// Labels QAD batches live when the calibration data has no records.
    #[serde(default)]
    pub teacher: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibSpec {
    pub manifest: PathBuf,
    /// Sequences used for GPTQ Hessians.
    pub chunks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QadSpec {
    pub steps: u64,
    pub lr: f64,
    pub batch: usize,
    #[serde(default = "default_lambda")]
    pub lambda_kd: f64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn default_lambda() -> f64 {
    1.0
}

fn default_top_k() -> usize {
    32
}

impl Default for QadSpec {
    fn default() -> Self {
        Self {
            steps: 20,
            lr: 1e-3,
            batch: 4,
            lambda_kd: default_lambda(),
            top_k: default_top_k(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    #[serde(default)]
    pub suite: EvalSuite,
    pub val_manifest: PathBuf,
}

/// A declared grid: every model × format × method × seed becomes a row,
/// plus one bf16 baseline row per model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub models: Vec<ModelSpec>,
    pub formats: Vec<String>,
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    pub calib: CalibSpec,
    #[serde(default)]
    pub qad: QadSpec,
    pub eval: EvalSpec,
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub model: String,
    pub format: String,
    pub method: String,
    pub seed: Option<u64>,
    pub storage_bytes: Option<u64>,
    pub macs: Option<u64>,
    pub val_loss: Option<f64>,
    pub task_macro: Option<f64>,
    pub recovery: Option<f64>,
    /// `ok`, or the error that stopped the row.
    pub status: String,
}

impl ReportRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }

    fn failed(model: &str, format: &str, method: &str, seed: Option<u64>, err: &Error) -> Self {
        Self {
            label: row_label(model, format, method, seed),
            model: model.into(),
            format: format.into(),
            method: method.into(),
            seed,
            storage_bytes: None,
            macs: None,
            val_loss: None,
            task_macro: None,
            recovery: None,
            status: format!("error: {err}"),
        }
    }
}

fn row_label(model: &str, format: &str, method: &str, seed: Option<u64>) -> String {
    match seed {
        Some(s) => format!("{model}/{format}/{method}/s{s}"),
        None => format!("{model}/{format}/{method}"),
    }
}

pub const REPORT_HEADER: &str = "label,model,format,method,seed,storage_bytes,macs,val_loss,task_macro,recovery,status";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl Report {
    pub fn csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.label,
                r.model,
                r.format,
                r.method,
                opt(&r.seed),
                opt(&r.storage_bytes),
                opt(&r.macs),
                opt(&r.val_loss),
                opt(&r.task_macro),
                opt(&r.recovery),
                r.status.replace(',', ";")
            ));
        }
        out
    }

    pub fn json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `report.csv` and `report.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("report.csv", self.csv()), ("report.json", self.json()?)] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.ok()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostAxis {
    StorageBytes,
    Macs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QualityAxis {
    /// Negated validation loss (base models).
    NegValLoss,
    /// Task macro accuracy.
    TaskMacro,
}

/// (cost, quality) points of the successful rows that have both values.
pub fn report_points(report: &Report, cost: CostAxis, quality: QualityAxis) -> Vec<ParetoPoint> {
    report
        .rows
        .iter()
        .filter(|r| r.ok())
        .filter_map(|r| {
            let c = match cost {
                CostAxis::StorageBytes => r.storage_bytes? as f64,
                CostAxis::Macs => r.macs? as f64,
            };
            let q = match quality {
                QualityAxis::NegValLoss => -r.val_loss?,
                QualityAxis::TaskMacro => r.task_macro?,
            };
            Some(ParetoPoint::new(r.label.clone(), c, q))
        })
        .collect()
}

/// Multiply-accumulates per token of one forward pass through the weight
/// matrices (block projections and the output head).
pub fn forward_macs_per_token(config: &ModelConfig) -> u64 {
    let d = config.dim as u64;
    let block = config.qkv_rows() as u64 * d + d * d + 2 * config.mlp_dim as u64 * d;
    config.layers as u64 * block + config.vocab as u64 * d
}

/// Parameters from a model checkpoint or the model part of a training
/// checkpoint.
pub fn load_model_params(path: &Path) -> Result<ModelParams<f32>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    read_params(&mut r)
}

/// Every sequence of a manifest, with its records, in stored order.
pub fn load_items(manifest: &ShardManifest) -> Result<Vec<TrainItem>> {
    stream_shards(manifest)?.map(|r| r.map(|(c, recs)| (c, Some(recs)))).collect()
}

fn load_manifest(path: &Path) -> Result<ShardManifest> {
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    ShardManifest::load(&path)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

struct Measured {
    val_loss: f64,
    task_macro: f64,
    scores: Vec<f64>,
}

fn measure(q: &QuantizedModel, val: &[TokenChunk], suite: &EvalSuite) -> Result<Measured> {
    let params: ModelParams<f32> = q.dequantize()?;
    let opts = q.serving_options();
    let val_loss = validation_loss_with(&params, val, &opts)?;
    let model = ParamsModel { params: &params, opts };
    let scores = eval_tasks(&model, suite)?;
    Ok(Measured {
        val_loss,
        task_macro: macro_average(&scores),
        scores: scores.iter().map(|s| s.accuracy).collect(),
    })
}

/// Runs the grid. Paths in `spec` are relative to `base`; quantized
/// checkpoints are written under `out_dir/checkpoints`. Row failures are
/// recorded in the row; only setup failures abort.
pub fn run_experiment(spec: &ExperimentSpec, base: &Path, out_dir: &Path) -> Result<Report> {
    let mut report = Report::default();
    if spec.models.is_empty() || spec.formats.is_empty() || spec.methods.is_empty() {
        return Ok(report);
    }
    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let calib_manifest = load_manifest(&resolve(base, &spec.calib.manifest))?;
    let calib_items = load_items(&calib_manifest)?;
    let val_manifest = load_manifest(&resolve(base, &spec.eval.val_manifest))?;
    let val: Vec<TokenChunk> = load_items(&val_manifest)?.into_iter().map(|(c, _)| c).collect();
    let seeds: Vec<Option<u64>> = if spec.seeds.is_empty() { vec![None] } else { spec.seeds.iter().map(|&s| Some(s)).collect() };

    for m in &spec.models {
        let loaded = (|| -> Result<(ModelParams<f32>, Option<ModelParams<f32>>)> {
            let mut params = if m.average.is_empty() {
                load_model_params(&resolve(base, &m.checkpoint))?
            } else {
                let all = m.average.iter().map(|p| load_model_params(&resolve(base, p))).collect::<Result<Vec<_>>>()?;
                weight_average(&all.iter().collect::<Vec<_>>())?
            };
            if m.fuse_norms {
                params = fuse_norms(&params);
            }
            let teacher = m.teacher.as_ref().map(|p| load_model_params(&resolve(base, p))).transpose()?;
            Ok((params, teacher))
        })();
        let (params, teacher) = match loaded {
            Ok(v) => v,
            Err(e) => {
                report.rows.push(ReportRow::failed(&m.label, "bf16", "baseline", None, &e));
                continue;
            }
        };
        let macs = forward_macs_per_token(&params.config);
        let cell = |format: &QuantFormat, method: &str, seed: Option<u64>, baseline: Option<&[f64]>| -> Result<(ReportRow, Vec<f64>)> {
            let mut items = calib_items.clone();
            if let Some(s) = seed {
                items.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
            }
            let q = match method {
                "baseline" | "rtn" => quantize_model(&params, format, PtqMethod::Rtn, &[])?,
                "gptq" => {
                    let calib: Vec<TokenChunk> = items.iter().take(spec.calib.chunks.max(1)).map(|(c, _)| c.clone()).collect();
                    quantize_model(&params, format, PtqMethod::Gptq, &calib)?
                }
                "qad" => {
                    let mut cfg = QadConfig::new(spec.qad.steps, spec.qad.lr, spec.qad.batch);
                    cfg.lambda_kd = spec.qad.lambda_kd;
                    cfg.top_k = spec.qad.top_k;
                    let teacher = teacher.as_ref().unwrap_or(&params);
                    let mut source = ChunkCycle::with_records(items)?;
                    qad(&params, teacher, format, &mut source, &cfg)?.quantized
                }
                other => return Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
            };
            let name = row_label(&m.label, &format.name(), method, seed).replace('/', "-");
            let layout = q.save(&ckpt_dir.join(format!("{name}.kdfq")))?;
            let got = measure(&q, &val, &spec.eval.suite)?;
            // Recovery is undefined against a baseline that scores nothing.
            let rec = match baseline {
                Some(b) if b.iter().sum::<f64>() > 0.0 => Some(recovery(b, &got.scores)?),
                Some(_) => None,
                None => Some(100.0),
            };
            Ok((
                ReportRow {
                    label: row_label(&m.label, &format.name(), method, seed),
                    model: m.label.clone(),
                    format: format.name(),
                    method: method.into(),
                    seed,
                    storage_bytes: Some(layout.payload as u64),
                    macs: Some(macs),
                    val_loss: Some(got.val_loss),
                    task_macro: Some(got.task_macro),
                    recovery: rec,
                    status: "ok".into(),
                },
                got.scores,
            ))
        };
        let baseline = match cell(&QuantFormat::bf16(), "baseline", None, None) {
            Ok((row, scores)) => {
                report.rows.push(row);
                Some(scores)
            }
            Err(e) => {
                report.rows.push(ReportRow::failed(&m.label, "bf16", "baseline", None, &e));
                None
            }
        };
        for f in &spec.formats {
            for method in &spec.methods {
                for &seed in &seeds {
                    let res = f.parse::<QuantFormat>().and_then(|format| {
                        let b = baseline.as_deref().ok_or_else(|| Error::Mismatch("baseline row failed".into()))?;
                        cell(&format, method, seed, Some(b))
                    });
                    report.rows.push(match res {
                        Ok((row, _)) => row,
                        Err(e) => ReportRow::failed(&m.label, f, method, seed, &e),
                    });
                }
            }
        }
    }
    Ok(report)
}

/// Plot-ready `(cost, quality)` series of a point set and its frontier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierSeries {
    pub points: Vec<(f64, f64)>,
    pub frontier: Vec<(f64, f64)>,
}

pub fn frontier_series(points: &[ParetoPoint], front: &[ParetoPoint]) -> FrontierSeries {
    FrontierSeries {
        points: points.iter().map(|p| (p.cost, p.quality)).collect(),
        frontier: front.iter().map(|p| (p.cost, p.quality)).collect(),
    }
}
