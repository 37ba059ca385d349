use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::codec::{e2m1_decode, e4m3_decode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantKind {
    Int,
    Fp8E4m3,
    Nvfp4,
    /// 16-bit passthrough (bfloat16 rounding only).
    Bf16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    WeightOnly,
    WeightActivation,
}

/// Declarative description of a quantization grid and its granularity.
///
/// `group_size` runs along the input dimension: the INT group, the NVFP4
/// block (16), or 0 for one FP8 scale per output channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantFormat {
    pub kind: QuantKind,
    pub bits: u8,
    pub group_size: usize,
    pub affine: bool,
    pub scope: Scope,
}

impl QuantFormat {
    pub fn int(bits: u8, group_size: usize, affine: bool) -> Result<Self> {
        let f = Self {
            kind: QuantKind::Int,
            bits,
            group_size,
            affine,
            scope: Scope::WeightOnly,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn fp8() -> Self {
        Self {
            kind: QuantKind::Fp8E4m3,
            bits: 8,
            group_size: 0,
            affine: false,
            scope: Scope::WeightActivation,
        }
    }

    pub fn nvfp4() -> Self {
        Self {
            kind: QuantKind::Nvfp4,
            bits: 4,
            group_size: 16,
            affine: false,
            scope: Scope::WeightOnly,
        }
    }

    pub fn bf16() -> Self {
        Self {
            kind: QuantKind::Bf16,
            bits: 16,
            group_size: 0,
            affine: false,
            scope: Scope::WeightOnly,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("quant format: {m}")));
        match self.kind {
            QuantKind::Int => {
                if ![2, 3, 4, 6].contains(&self.bits) {
                    return bad(format!("INT bits must be 2, 3, 4 or 6, got {}", self.bits));
                }
                if self.group_size == 0 {
                    return bad("INT group size must be positive".into());
                }
                if self.scope != Scope::WeightOnly {
                    return bad("INT formats are weight-only".into());
                }
            }
            QuantKind::Fp8E4m3 if self.bits != 8 || self.affine => return bad("FP8 is 8-bit symmetric".into()),
            QuantKind::Nvfp4 if self.bits != 4 || self.group_size != 16 || self.affine => {
                return bad("NVFP4 uses 4-bit elements in blocks of 16".into())
            }
            QuantKind::Bf16 if self.bits != 16 => return bad("bf16 is 16-bit".into()),
            _ => {}
        }
        Ok(())
    }

    /// Bits per stored element code.
    pub fn code_bits(&self) -> u32 {
        u32::from(self.bits)
    }

    /// Integer code range `(lo, hi)` of INT formats.
    pub fn int_range(&self) -> (i32, i32) {
        let b = i32::from(self.bits);
        if self.affine {
            (0, (1 << b) - 1)
        } else {
            (-(1 << (b - 1)) + 1, (1 << (b - 1)) - 1)
        }
    }

    pub fn name(&self) -> String {
        match self.kind {
            QuantKind::Int => format!(
                "int{}g{}{}",
                self.bits,
                self.group_size,
                if self.affine { "" } else { "sym" }
            ),
            QuantKind::Fp8E4m3 => match self.scope {
                Scope::WeightActivation => "fp8".into(),
                Scope::WeightOnly => "fp8-w".into(),
            },
            QuantKind::Nvfp4 => match self.scope {
                Scope::WeightOnly => "nvfp4".into(),
                Scope::WeightActivation => "nvfp4-wa".into(),
            },
            QuantKind::Bf16 => "bf16".into(),
        }
    }
}

impl fmt::Display for QuantFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for QuantFormat {
    type Err = Error;

    /// Accepts `int<b>g<g>` (affine), `int<b>g<g>sym`, `fp8`, `fp8-w`,
    /// `nvfp4`, `nvfp4-wa` and `bf16`.
    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::InvalidArgument(format!("unknown quant format `{s}`"));
        match s {
            "fp8" => return Ok(Self::fp8()),
            "fp8-w" => return Ok(Self { scope: Scope::WeightOnly, ..Self::fp8() }),
            "nvfp4" => return Ok(Self::nvfp4()),
            "nvfp4-wa" => return Ok(Self { scope: Scope::WeightActivation, ..Self::nvfp4() }),
            "bf16" => return Ok(Self::bf16()),
            _ => {}
        }
        let rest = s.strip_prefix("int").ok_or_else(unknown)?;
        let (rest, affine) = match rest.strip_suffix("sym") {
            Some(r) => (r, false),
            None => (rest, true),
        };
        let (b, g) = rest.split_once('g').ok_or_else(unknown)?;
        let bits = b.parse().map_err(|_| unknown())?;
        let group = g.parse().map_err(|_| unknown())?;
        Self::int(bits, group, affine)
    }
}

/// Representable values per unit scale, ascending and distinct.
///
/// INT symmetric: `-(2^(b-1)-1) ..= 2^(b-1)-1`; INT affine: `0 ..= 2^b-1`
/// (shifted by the zero point); FP8: every finite E4M3 value; NVFP4: the
/// E2M1 element grid.
pub fn quant_grid(format: &QuantFormat) -> Result<Vec<f64>> {
    format.validate()?;
    let mut v: Vec<f64> = match format.kind {
        QuantKind::Int => {
            let (lo, hi) = format.int_range();
            (lo..=hi).map(f64::from).collect()
        }
        QuantKind::Fp8E4m3 => (0..=255u8).map(|c| e4m3_decode(c) as f64).filter(|x| x.is_finite()).collect(),
        QuantKind::Nvfp4 => (0..16u8).map(|c| e2m1_decode(c) as f64).collect(),
        QuantKind::Bf16 => {
            return Err(Error::InvalidArgument("bf16 has no finite per-unit grid".into()))
        }
    };
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup();
    Ok(v)
}
