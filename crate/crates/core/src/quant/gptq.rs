use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::quant::{QuantFormat, QuantParams, QuantizedTensor};
use crate::scalar::Scalar;

/// Relative damping added to the Hessian diagonal.
pub const GPTQ_DAMP: f64 = 0.01;

/// `H = sum x x^T + 0.01 mean(diag) I` over every row of every input.
pub fn calib_hessian<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<f64>> {
    let n = match inputs.first() {
        Some(x) => x.cols(),
        None => return Err(Error::Empty("calibration set")),
    };
    let mut h = vec![0.0f64; n * n];
    let mut rows = 0;
    for x in inputs {
        if x.cols() != n {
            return Err(Error::shape("calib_hessian", "calibration widths differ"));
        }
        for r in 0..x.rows() {
            let v: Vec<f64> = x.row(r).iter().map(|a| a.as_f64()).collect();
            for i in 0..n {
                if v[i] == 0.0 {
                    continue;
                }
                for j in i..n {
                    h[i * n + j] += v[i] * v[j];
                }
            }
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(Error::Empty("calibration set"));
    }
    for i in 0..n {
        for j in 0..i {
            h[i * n + j] = h[j * n + i];
        }
    }
    let damp = GPTQ_DAMP * (0..n).map(|i| h[i * n + i]).sum::<f64>() / n as f64;
    for i in 0..n {
        h[i * n + i] += damp;
    }
    Tensor::from_vec(&[n, n], h)
}

/// Lower Cholesky factor `L` with `A = L L^T`.
pub fn cholesky(a: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = a.rows();
    if a.shape() != [n, n] {
        return Err(Error::shape("cholesky", "matrix must be square"));
    }
    let a = a.data();
    let mut l = vec![0.0f64; n * n];
    for j in 0..n {
        let d = a[j * n + j] - (0..j).map(|k| l[j * n + k] * l[j * n + k]).sum::<f64>();
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Cholesky { pivot: j });
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let s = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            l[i * n + j] = s / d;
        }
    }
    Tensor::from_vec(&[n, n], l)
}

/// Inverse of a symmetric positive definite matrix through its Cholesky factor.
pub fn spd_inverse(a: &Tensor<f64>) -> Result<Tensor<f64>> {
    let l = cholesky(a)?;
    let n = a.rows();
    let l = l.data();
    // Y = L^-1 by forward substitution; A^-1 = Y^T Y.
    let mut y = vec![0.0f64; n * n];
    for c in 0..n {
        for i in c..n {
            let rhs = if i == c { 1.0 } else { 0.0 };
            let s = rhs - (c..i).map(|k| l[i * n + k] * y[k * n + c]).sum::<f64>();
            y[i * n + c] = s / l[i * n + i];
        }
    }
    let mut inv = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let s: f64 = (j..n).map(|k| y[k * n + i] * y[k * n + j]).sum();
            inv[i * n + j] = s;
            inv[j * n + i] = s;
        }
    }
    Tensor::from_vec(&[n, n], inv)
}

/// GPTQ with natural column order and one block spanning the matrix.
///
/// Scales come from round-to-nearest on the original `w`. Column `j` is
/// rounded, then its error `(w_j - q_j) / U_jj` is pushed onto the later
/// columns along row `j` of `U`, the upper Cholesky factor of `H^-1`.
pub fn gptq<T: Scalar>(w: &Tensor<T>, h: &Tensor<f64>, format: &QuantFormat) -> Result<QuantizedTensor> {
    let params = QuantParams::from_tensor(format, w, false)?;
    let (rows, cols) = (params.rows, params.cols);
    if h.shape() != [cols, cols] {
        return Err(Error::shape("gptq", format!("Hessian {:?} for {} input columns", h.shape(), cols)));
    }
    let l = cholesky(&spd_inverse(h)?)?;
    let l = l.data();
    let u = |j: usize, k: usize| l[k * cols + j];
    let mut codes = vec![0u8; rows * cols];
    for r in 0..rows {
        let mut row: Vec<f64> = w.data()[r * cols..][..cols].iter().map(|v| v.as_f64()).collect();
        for j in 0..cols {
            let e = params.encode(r, j, row[j]);
            codes[r * cols + j] = e.code;
            let err = (row[j] - e.value) / u(j, j);
            for k in j + 1..cols {
                let ujk = u(j, k);
                if ujk != 0.0 {
                    row[k] -= err * ujk;
                }
            }
        }
    }
    Ok(QuantizedTensor {
        params,
        shape: w.shape().to_vec(),
        codes,
    })
}

/// Layer reconstruction objective `tr((W - Q) H (W - Q)^T)`.
pub fn gptq_objective<T: Scalar>(w: &Tensor<T>, q: &Tensor<T>, h: &Tensor<f64>) -> Result<f64> {
    if w.shape() != q.shape() || h.shape() != [w.cols(), w.cols()] {
        return Err(Error::shape("gptq_objective", "W, Q and H disagree"));
    }
    let n = w.cols();
    let mut total = 0.0;
    for r in 0..w.rows() {
        let e: Vec<f64> = w.row(r).iter().zip(q.row(r)).map(|(a, b)| a.as_f64() - b.as_f64()).collect();
        for i in 0..n {
            let hi = &h.data()[i * n..][..n];
            total += e[i] * hi.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(total)
}
