use crate::model::ModelParams;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Per-column scales `s_j = t / c_j` that bring every input column of `w`
/// to the mean column norm `t` (`s_j = 1` for zero columns).
pub fn equalizing_scales<T: Scalar>(w: &Tensor<T>) -> Vec<f64> {
    let (rows, cols) = (w.rows(), w.cols());
    let norms: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|r| w.row(r)[j].as_f64().powi(2)).sum::<f64>().sqrt())
        .collect();
    let t = norms.iter().sum::<f64>() / cols as f64;
    norms.iter().map(|&c| if c == 0.0 { 1.0 } else { t / c }).collect()
}

fn fuse_pair<T: Scalar>(w: &mut Tensor<T>, gain: &mut Tensor<T>) {
    let s = equalizing_scales(w);
    let cols = w.cols();
    for (i, v) in w.data_mut().iter_mut().enumerate() {
        *v = T::of(v.as_f64() * s[i % cols]);
    }
    for (g, s) in gain.data_mut().iter_mut().zip(&s) {
        *g = T::of(g.as_f64() / s);
    }
}

/// Equalizes the input-column norms of every block's stacked QKV and up
/// projections, folding the reciprocal scales into the preceding RMSNorm
/// gains. The network function is unchanged.
pub fn fuse_norms<T: Scalar>(params: &ModelParams<T>) -> ModelParams<T> {
    let mut out = params.clone();
    for l in &mut out.layers {
        fuse_pair(&mut l.qkv, &mut l.attn_norm);
        fuse_pair(&mut l.up, &mut l.mlp_norm);
    }
    out
}
