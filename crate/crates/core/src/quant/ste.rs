use crate::error::Result;
use crate::numerics::{FakeQuantizer, Tensor};
use crate::quant::{fake_quant_masked, QuantFormat, QuantKind, QuantParams};
use crate::scalar::Scalar;

/// Straight-through quantizer for [`crate::numerics::Tape::fake_quant`].
///
/// Forward rounds onto the format grid. Backward passes the gradient where
/// the element fell inside the grid's range and zeroes it where it was
/// clipped, unless `pass_through` is set.
#[derive(Debug, Clone)]
pub struct SteQuantizer {
    pub format: QuantFormat,
    /// One scale for the whole tensor (FP8 activations).
    pub per_tensor: bool,
    pub pass_through: bool,
    /// Frozen scales; `None` recomputes them from every input.
    pub fixed: Option<QuantParams>,
}

impl SteQuantizer {
    /// Per-group (or per-channel) scales recomputed from the latent weights.
    pub fn weights(format: QuantFormat) -> Self {
        Self {
            format,
            per_tensor: false,
            pass_through: false,
            fixed: None,
        }
    }

    /// Dynamic per-tensor scaling for FP8 activations; NVFP4 and INT keep
    /// their block or group scales.
    pub fn activations(format: QuantFormat) -> Self {
        Self {
            per_tensor: format.kind == QuantKind::Fp8E4m3,
            ..Self::weights(format)
        }
    }

    pub fn fixed(params: QuantParams) -> Self {
        Self {
            format: params.format,
            per_tensor: params.per_tensor,
            pass_through: false,
            fixed: Some(params),
        }
    }

    pub fn with_pass_through(mut self, on: bool) -> Self {
        self.pass_through = on;
        self
    }
}

impl<T: Scalar> FakeQuantizer<T> for SteQuantizer {
    fn fake_quant(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<bool>)> {
        let (y, mut pass) = match &self.fixed {
            Some(p) => {
                let (q, pass) = p.quantize(x)?;
                (q.dequantize(), pass)
            }
            None => fake_quant_masked(x, &self.format, self.per_tensor)?,
        };
        if self.pass_through {
            pass.fill(true);
        }
        Ok((y, pass))
    }
}
