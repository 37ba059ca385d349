use crate::error::{Error, Result};

/// `100 * mean(quant) / mean(baseline)`; above 100 when the quantized model
/// scores higher.
pub fn recovery(baseline: &[f64], quant: &[f64]) -> Result<f64> {
    if baseline.is_empty() {
        return Err(Error::Empty("task scores"));
    }
    if baseline.len() != quant.len() {
        return Err(Error::Mismatch(format!("{} baseline vs {} quantized task scores", baseline.len(), quant.len())));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let b = mean(baseline);
    if b == 0.0 {
        return Err(Error::ZeroBaseline);
    }
    Ok(100.0 * mean(quant) / b)
}
