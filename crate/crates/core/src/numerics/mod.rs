//! Dense tensors and reverse-mode differentiation for the miniature
//! transformer.

pub mod activation;
mod gradcheck;
mod tape;
mod tensor;

pub use activation::{activation_apply, register_activation, Activation, ActivationKind, ActivationPlugin};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use tape::{
    sparse_kd_row, AttentionLayout, FakeQuantizer, Gradients, KdRow, KdTerms, SparseTarget, Tape,
    Var,
};
pub use tensor::Tensor;

pub(crate) use tape::softmax_in_place;

/// Row-wise softmax outside of any tape.
pub fn softmax_rows<T: crate::Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

#[cfg(test)]
mod tests;
