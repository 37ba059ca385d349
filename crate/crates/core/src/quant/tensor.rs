use half::f16;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::quant::codec::{
    e2m1_decode, e2m1_encode, e4m3_decode, e4m3_encode, e4m3_floor, floor_f16, pack_bits, pow2_above,
    rne, E2M1_MAX, E4M3_MAX,
};
use crate::quant::{QuantFormat, QuantKind};
use crate::scalar::Scalar;

/// Scales (and zero points) of a 2-D tensor, without the codes.
///
/// Scales are held as the exact values they decode to: f16 values for INT
/// and FP8, E4M3 values for NVFP4 blocks (times `global`).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub format: QuantFormat,
    pub rows: usize,
    pub cols: usize,
    /// One FP8 scale for the whole tensor (dynamic activation scaling).
    pub per_tensor: bool,
    pub scales: Vec<f32>,
    /// INT affine zero points, one per group.
    pub zeros: Vec<u8>,
    /// NVFP4 tensor scale; 1 otherwise.
    pub global: f32,
}

/// Result of encoding one element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Encoded {
    pub code: u8,
    pub value: f64,
    /// The element lay outside the rounding cells of the grid's extremes.
    pub clipped: bool,
}

fn as_matrix<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize)> {
    match *x.shape() {
        [n] => Ok((1, n)),
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape("quantize", format!("expected 1-D or 2-D, got {:?}", x.shape()))),
    }
}

impl QuantParams {
    pub fn groups_per_row(&self) -> usize {
        match self.format.kind {
            QuantKind::Int | QuantKind::Nvfp4 => self.cols.div_ceil(self.format.group_size),
            _ => 1,
        }
    }

    pub fn group_of(&self, r: usize, c: usize) -> usize {
        match self.format.kind {
            QuantKind::Int | QuantKind::Nvfp4 => r * self.groups_per_row() + c / self.format.group_size,
            _ if self.per_tensor => 0,
            _ => r,
        }
    }

    /// Chooses scales from the data: absmax (symmetric) or the zero-inclusive
    /// min/max (affine). Scales are rounded toward zero onto their storage
    /// grid so that the largest magnitude lands on the top grid point; this
    /// makes quantize-dequantize a fixed point.
    pub fn from_data(format: &QuantFormat, data: &[f64], rows: usize, cols: usize, per_tensor: bool) -> Result<Self> {
        format.validate()?;
        if data.len() != rows * cols {
            return Err(Error::shape("quantize", "data length vs rows x cols"));
        }
        if format.kind == QuantKind::Bf16 {
            return Err(Error::InvalidArgument("bf16 has no scales".into()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "quantize" });
        }
        let mut p = Self {
            format: *format,
            rows,
            cols,
            per_tensor: per_tensor && format.kind == QuantKind::Fp8E4m3,
            scales: Vec::new(),
            zeros: Vec::new(),
            global: 1.0,
        };
        let n_groups = match format.kind {
            QuantKind::Fp8E4m3 if p.per_tensor => 1,
            QuantKind::Fp8E4m3 => rows,
            _ => rows * p.groups_per_row(),
        };
        let mut lo = vec![0.0f64; n_groups];
        let mut hi = vec![0.0f64; n_groups];
        let mut absmax = vec![0.0f64; n_groups];
        for r in 0..rows {
            for c in 0..cols {
                let (g, x) = (p.group_of(r, c), data[r * cols + c]);
                lo[g] = lo[g].min(x);
                hi[g] = hi[g].max(x);
                absmax[g] = absmax[g].max(x.abs());
            }
        }
        match format.kind {
            QuantKind::Int => {
                let (qlo, qhi) = format.int_range();
                for g in 0..n_groups {
                    if format.affine {
                        let (s, z) = if hi[g] == lo[g] {
                            (1.0, 0)
                        } else {
                            let s = f64::from(floor_f16((hi[g] - lo[g]) / f64::from(qhi)));
                            (s, affine_zero(lo[g], s, qhi))
                        };
                        p.scales.push(s as f32);
                        p.zeros.push(z);
                    } else {
                        let s = if absmax[g] == 0.0 { 1.0 } else { f64::from(floor_f16(absmax[g] / f64::from(qhi))) };
                        debug_assert!(qlo == -qhi);
                        p.scales.push(s as f32);
                    }
                }
            }
            QuantKind::Fp8E4m3 => {
                for &a in &absmax {
                    let s = if a == 0.0 { 1.0 } else { f64::from(floor_f16(a / E4M3_MAX)) };
                    p.scales.push(s as f32);
                }
            }
            QuantKind::Nvfp4 => {
                let a = absmax.iter().copied().fold(0.0, f64::max);
                p.global = if a == 0.0 { 1.0 } else { pow2_above(a / (E4M3_MAX * E2M1_MAX)) };
                let g = f64::from(p.global);
                for &b in &absmax {
                    let code = if b == 0.0 {
                        0x38 // 1.0
                    } else {
                        e4m3_floor(b / (E2M1_MAX * g)).max(1)
                    };
                    p.scales.push(e4m3_decode(code));
                }
            }
            QuantKind::Bf16 => unreachable!(),
        }
        Ok(p)
    }

    pub fn from_tensor<T: Scalar>(format: &QuantFormat, x: &Tensor<T>, per_tensor: bool) -> Result<Self> {
        let (rows, cols) = as_matrix(x)?;
        let data: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
        Self::from_data(format, &data, rows, cols, per_tensor)
    }

    /// Nearest grid point (ties to even) under these scales.
    pub fn encode(&self, r: usize, c: usize, x: f64) -> Encoded {
        let g = self.group_of(r, c);
        let s = f64::from(self.scales[g]);
        match self.format.kind {
            QuantKind::Int => {
                let (lo, hi) = self.format.int_range();
                let z = if self.format.affine { f64::from(self.zeros[g]) } else { 0.0 };
                let u = x / s + z;
                let q = rne(u).clamp(f64::from(lo), f64::from(hi));
                let code = if self.format.affine { q as u8 } else { (q as i32 + (1 << (self.format.bits - 1))) as u8 };
                Encoded {
                    code,
                    value: s * (q - z),
                    clipped: u < f64::from(lo) - 0.5 || u > f64::from(hi) + 0.5,
                }
            }
            QuantKind::Fp8E4m3 => {
                let u = x / s;
                let code = e4m3_encode(u);
                Encoded {
                    code,
                    value: s * f64::from(e4m3_decode(code)),
                    clipped: u.abs() > E4M3_MAX + 16.0,
                }
            }
            QuantKind::Nvfp4 => {
                let scale = s * f64::from(self.global);
                let u = x / scale;
                let code = e2m1_encode(u);
                Encoded {
                    code,
                    value: scale * f64::from(e2m1_decode(code)),
                    clipped: u.abs() > E2M1_MAX + 1.0,
                }
            }
            QuantKind::Bf16 => unreachable!("bf16 params are never built"),
        }
    }

    pub fn decode(&self, r: usize, c: usize, code: u8) -> f64 {
        let g = self.group_of(r, c);
        let s = f64::from(self.scales[g]);
        match self.format.kind {
            QuantKind::Int => {
                if self.format.affine {
                    s * (f64::from(code) - f64::from(self.zeros[g]))
                } else {
                    s * f64::from(i32::from(code) - (1 << (self.format.bits - 1)))
                }
            }
            QuantKind::Fp8E4m3 => s * f64::from(e4m3_decode(code)),
            QuantKind::Nvfp4 => s * f64::from(self.global) * f64::from(e2m1_decode(code)),
            QuantKind::Bf16 => unreachable!("bf16 params are never built"),
        }
    }

    /// Encodes a whole tensor with these (possibly stale) scales.
    pub fn quantize<T: Scalar>(&self, x: &Tensor<T>) -> Result<(QuantizedTensor, Vec<bool>)> {
        let (rows, cols) = as_matrix(x)?;
        if (rows, cols) != (self.rows, self.cols) {
            return Err(Error::shape("quantize", "tensor does not match its parameters"));
        }
        let mut codes = Vec::with_capacity(x.len());
        let mut pass = Vec::with_capacity(x.len());
        for (i, v) in x.data().iter().enumerate() {
            let e = self.encode(i / cols, i % cols, v.as_f64());
            codes.push(e.code);
            pass.push(!e.clipped);
        }
        Ok((
            QuantizedTensor {
                params: self.clone(),
                shape: x.shape().to_vec(),
                codes,
            },
            pass,
        ))
    }
}

/// Zero point for a range starting at `lo` (lo ≤ 0): `floor(-lo/s + 0.5)`.
/// Together with the rounded-down scale this maps `lo` to code 0 and the
/// range top to the largest code.
fn affine_zero(lo: f64, s: f64, qhi: i32) -> u8 {
    (-lo / s + 0.5).floor().clamp(0.0, f64::from(qhi)) as u8
}

/// Codes plus the scales needed to decode them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub params: QuantParams,
    pub shape: Vec<usize>,
    /// One code per element (unpacked in memory).
    pub codes: Vec<u8>,
}

impl QuantizedTensor {
    pub fn dequantize<T: Scalar>(&self) -> Tensor<T> {
        let cols = self.params.cols;
        let data = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, &c)| T::of(self.params.decode(i / cols, i % cols, c)))
            .collect();
        Tensor::from_vec(&self.shape, data).expect("shape preserved")
    }

    pub fn packed_codes(&self) -> Vec<u8> {
        pack_bits(&self.codes, self.params.format.code_bits())
    }

    /// Stored scale bits: f16 for INT/FP8, an E4M3 byte for NVFP4 blocks.
    pub fn scale_bytes(&self) -> Vec<u8> {
        match self.params.format.kind {
            QuantKind::Nvfp4 => self.params.scales.iter().map(|&s| e4m3_encode(f64::from(s))).collect(),
            _ => self
                .params
                .scales
                .iter()
                .flat_map(|&s| f16::from_f32(s).to_le_bytes())
                .collect(),
        }
    }

    pub fn packed_zeros(&self) -> Vec<u8> {
        pack_bits(&self.params.zeros, self.params.format.code_bits())
    }

    /// Bytes of codes, scales, zero points and the global scale.
    pub fn payload_bytes(&self) -> usize {
        let global = if self.params.format.kind == QuantKind::Nvfp4 { 4 } else { 0 };
        self.packed_codes().len() + self.scale_bytes().len() + self.packed_zeros().len() + global
    }
}

/// Quantizes with scales chosen from `x` itself.
pub fn quantize<T: Scalar>(x: &Tensor<T>, format: &QuantFormat) -> Result<QuantizedTensor> {
    Ok(QuantParams::from_tensor(format, x, false)?.quantize(x)?.0)
}

/// Rounds every element to bfloat16.
pub fn round_bf16<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::of(f64::from(half::bf16::from_f64(v.as_f64()))))
}

/// `decode(encode(x))` with the tensor's own scales, plus the straight-through
/// pass mask. Scales fitted to the tensor cover its whole range, so the mask
/// is all true; an affine zero point may still push the group maximum past
/// the top code's rounding cell, which is rounding, not clipping.
pub fn fake_quant_masked<T: Scalar>(x: &Tensor<T>, format: &QuantFormat, per_tensor: bool) -> Result<(Tensor<T>, Vec<bool>)> {
    if format.kind == QuantKind::Bf16 {
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "quantize" });
        }
        return Ok((round_bf16(x), vec![true; x.len()]));
    }
    let (q, _) = QuantParams::from_tensor(format, x, per_tensor)?.quantize(x)?;
    Ok((q.dequantize(), vec![true; x.len()]))
}

pub fn fake_quant<T: Scalar>(x: &Tensor<T>, format: &QuantFormat) -> Result<Tensor<T>> {
    Ok(fake_quant_masked(x, format, false)?.0)
}
