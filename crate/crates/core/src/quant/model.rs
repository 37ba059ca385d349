use std::fmt;
use std::fs;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use half::{bf16, f16};

use crate::error::{Error, Result};
use crate::logitstore::TokenChunk;
use crate::model::{read_header, write_header, Batch, ForwardOptions, ModelConfig, ModelParams, ParamVars};
use crate::numerics::{Tape, Tensor};
use crate::quant::codec::{e4m3_decode, unpack_bits};
use crate::quant::gptq::{calib_hessian, gptq};
use crate::quant::{quantize, QuantFormat, QuantKind, QuantParams, QuantizedTensor, Scope, SteQuantizer};
use crate::scalar::Scalar;

pub const QUANT_CHECKPOINT_MAGIC: &[u8; 4] = b"KDFQ";

/// One-shot post-training quantization method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PtqMethod {
    Rtn,
    Gptq,
}

impl FromStr for PtqMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rtn" => Ok(Self::Rtn),
            "gptq" => Ok(Self::Gptq),
            _ => Err(Error::InvalidArgument(format!("unknown PTQ method `{s}`"))),
        }
    }
}

impl fmt::Display for PtqMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rtn => "rtn",
            Self::Gptq => "gptq",
        })
    }
}

/// A tensor as stored in a quantized checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    Quantized(QuantizedTensor),
    /// Raw bfloat16 bits.
    Bf16 { shape: Vec<usize>, bits: Vec<u16> },
}

impl StoredTensor {
    pub fn bf16<T: Scalar>(x: &Tensor<T>) -> Self {
        Self::Bf16 {
            shape: x.shape().to_vec(),
            bits: x.data().iter().map(|v| bf16::from_f64(v.as_f64()).to_bits()).collect(),
        }
    }

    pub fn dequantize<T: Scalar>(&self) -> Tensor<T> {
        match self {
            Self::Quantized(q) => q.dequantize(),
            Self::Bf16 { shape, bits } => {
                let data = bits.iter().map(|&b| T::of(f64::from(bf16::from_bits(b)))).collect();
                Tensor::from_vec(shape, data).expect("stored shape")
            }
        }
    }

    pub fn payload_bytes(&self) -> usize {
        match self {
            Self::Quantized(q) => q.payload_bytes(),
            Self::Bf16 { bits, .. } => 2 * bits.len(),
        }
    }
}

/// Byte accounting of a written quantized checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FileLayout {
    pub total: usize,
    /// Codes, scales, zero points, global scales and dense tensor values.
    pub payload: usize,
}

/// A model whose block projections are quantized; every other tensor is
/// kept in bfloat16.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub format: QuantFormat,
    pub tensors: Vec<(String, StoredTensor)>,
}

/// True for the four projection matrices of a block.
pub fn is_block_linear(name: &str) -> bool {
    name.starts_with("layers.") && ["qkv", "attn_out", "up", "down"].iter().any(|s| name.ends_with(&format!(".{s}")))
}

/// Per block, calibration Hessians of the four projection inputs, collected
/// from the unquantized model.
pub fn calibration_hessians<T: Scalar>(params: &ModelParams<T>, calib: &[TokenChunk]) -> Result<Vec<[Tensor<f64>; 4]>> {
    if calib.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let layers = params.layers.len();
    let mut inputs: Vec<[Vec<Tensor<T>>; 4]> = (0..layers).map(|_| Default::default()).collect();
    for group in calib.chunks(8) {
        let batch = Batch::new(group.iter().map(|c| (c.tokens.as_slice(), c.doc_boundaries.as_slice())))?;
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, params);
        let trace = crate::model::forward_tape(&mut tape, &params.config, &vars, &batch, &ForwardOptions::default())?;
        for (l, ins) in trace.linear_inputs.iter().enumerate() {
            for (i, &v) in ins.iter().enumerate() {
                inputs[l][i].push(tape.value(v).clone());
            }
        }
    }
    inputs
        .iter()
        .map(|per| {
            let h = |i: usize| calib_hessian(&per[i].iter().collect::<Vec<_>>());
            Ok([h(0)?, h(1)?, h(2)?, h(3)?])
        })
        .collect()
}

/// Quantizes every block projection (RTN or GPTQ) and rounds the rest to
/// bfloat16. GPTQ needs calibration chunks.
pub fn quantize_model<T: Scalar>(
    params: &ModelParams<T>,
    format: &QuantFormat,
    method: PtqMethod,
    calib: &[TokenChunk],
) -> Result<QuantizedModel> {
    format.validate()?;
    let hessians = match (method, format.kind) {
        (PtqMethod::Gptq, k) if k != QuantKind::Bf16 => Some(calibration_hessians(params, calib)?),
        _ => None,
    };
    let mut tensors = Vec::new();
    for (name, t) in params.tensors() {
        let stored = if format.kind == QuantKind::Bf16 || !is_block_linear(&name) {
            StoredTensor::bf16(t)
        } else {
            let q = match &hessians {
                Some(h) => {
                    let mut parts = name.split('.');
                    let layer: usize = parts.nth(1).and_then(|s| s.parse().ok()).expect("layer index");
                    let which = match parts.next() {
                        Some("qkv") => 0,
                        Some("attn_out") => 1,
                        Some("up") => 2,
                        _ => 3,
                    };
                    gptq(t, &h[layer][which], format)?
                }
                None => quantize(t, format)?,
            };
            StoredTensor::Quantized(q)
        };
        tensors.push((name, stored));
    }
    Ok(QuantizedModel {
        config: params.config.clone(),
        format: *format,
        tensors,
    })
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "quantized checkpoint",
        detail: detail.into(),
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| bad("length exceeds u32"))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) -> Result<()> {
    put_u32(buf, bytes.len())?;
    buf.extend_from_slice(bytes);
    Ok(())
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(bad("unexpected end of data"));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u32()?;
        Ok(self.take(n)?.to_vec())
    }
}

impl QuantizedModel {
    /// Unpacked parameters, ready for a forward pass.
    pub fn dequantize<T: Scalar>(&self) -> Result<ModelParams<T>> {
        let tensors = self.tensors.iter().map(|(_, t)| t.dequantize()).collect();
        ModelParams::from_tensors(self.config.clone(), tensors)
    }

    /// Forward options that quantize activations when the format covers them.
    pub fn serving_options<T: Scalar>(&self) -> ForwardOptions<T> {
        ForwardOptions {
            weight_quant: None,
            act_quant: match self.format.scope {
                Scope::WeightActivation if self.format.kind != QuantKind::Bf16 => {
                    Some(Arc::new(SteQuantizer::activations(self.format)))
                }
                _ => None,
            },
        }
    }

    pub fn payload_bytes(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.payload_bytes()).sum()
    }

    /// Payload of the quantized projections alone.
    pub fn quantized_payload_bytes(&self) -> usize {
        self.tensors
            .iter()
            .filter_map(|(_, t)| match t {
                StoredTensor::Quantized(q) => Some(q.payload_bytes()),
                _ => None,
            })
            .sum()
    }

    pub fn to_bytes(&self) -> Result<(Vec<u8>, FileLayout)> {
        let mut buf = Vec::new();
        write_header(&mut buf, QUANT_CHECKPOINT_MAGIC, &self.config)?;
        put_bytes(&mut buf, self.format.name().as_bytes())?;
        put_u32(&mut buf, self.tensors.len())?;
        let mut payload = 0;
        for (name, t) in &self.tensors {
            put_bytes(&mut buf, name.as_bytes())?;
            let shape = match t {
                StoredTensor::Quantized(q) => &q.shape,
                StoredTensor::Bf16 { shape, .. } => shape,
            };
            buf.push(u8::from(matches!(t, StoredTensor::Quantized(_))));
            put_u32(&mut buf, shape.len())?;
            for &d in shape {
                put_u32(&mut buf, d)?;
            }
            match t {
                StoredTensor::Bf16 { bits, .. } => {
                    for b in bits {
                        buf.extend_from_slice(&b.to_le_bytes());
                    }
                    payload += 2 * bits.len();
                }
                StoredTensor::Quantized(q) => {
                    buf.push(u8::from(q.params.per_tensor));
                    for part in [q.packed_codes(), q.scale_bytes(), q.packed_zeros()] {
                        payload += part.len();
                        put_bytes(&mut buf, &part)?;
                    }
                    if q.params.format.kind == QuantKind::Nvfp4 {
                        buf.extend_from_slice(&q.params.global.to_le_bytes());
                        payload += 4;
                    }
                }
            }
        }
        let total = buf.len();
        Ok((buf, FileLayout { total, payload }))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut slice = bytes;
        let config = read_header(&mut slice, QUANT_CHECKPOINT_MAGIC)?;
        let mut r = Reader(slice);
        let format: QuantFormat = String::from_utf8(r.bytes()?).map_err(|_| bad("format name"))?.parse()?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = String::from_utf8(r.bytes()?).map_err(|_| bad("tensor name"))?;
            let quantized = r.u8()? == 1;
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let stored = if !quantized {
                let raw = r.take(2 * n)?;
                let bits = raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
                StoredTensor::Bf16 { shape, bits }
            } else {
                let per_tensor = r.u8()? == 1;
                let (rows, cols) = match shape[..] {
                    [c] => (1, c),
                    [a, b] => (a, b),
                    _ => return Err(bad("quantized tensors are 1-D or 2-D")),
                };
                let mut params = QuantParams {
                    format,
                    rows,
                    cols,
                    per_tensor,
                    scales: Vec::new(),
                    zeros: Vec::new(),
                    global: 1.0,
                };
                let groups = match format.kind {
                    QuantKind::Fp8E4m3 if per_tensor => 1,
                    QuantKind::Fp8E4m3 => rows,
                    _ => rows * params.groups_per_row(),
                };
                let codes = r.bytes()?;
                let scales = r.bytes()?;
                let zeros = r.bytes()?;
                let bits = format.code_bits() as usize;
                let zero_groups = if format.affine && format.kind == QuantKind::Int { groups } else { 0 };
                if codes.len() != (n * bits).div_ceil(8) || zeros.len() != (zero_groups * bits).div_ceil(8) {
                    return Err(bad(format!("{name}: packed code or zero-point length")));
                }
                params.scales = match format.kind {
                    QuantKind::Nvfp4 => scales.iter().map(|&c| e4m3_decode(c)).collect(),
                    _ => scales.chunks_exact(2).map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32()).collect(),
                };
                if params.scales.len() != groups {
                    return Err(bad(format!("{name}: {} scales for {groups} groups", params.scales.len())));
                }
                if format.affine && format.kind == QuantKind::Int {
                    params.zeros = unpack_bits(&zeros, format.code_bits(), groups);
                }
                if format.kind == QuantKind::Nvfp4 {
                    params.global = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
                }
                let codes = unpack_bits(&codes, format.code_bits(), n);
                StoredTensor::Quantized(QuantizedTensor { params, shape, codes })
            };
            tensors.push((name, stored));
        }
        if !r.0.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let model = Self { config, format, tensors };
        model.dequantize::<f32>()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<FileLayout> {
        let (bytes, layout) = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        Ok(layout)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
