use std::sync::Arc;

use crate::error::{Error, Result};
use crate::logitstore::{SparseLogitRecord, TokenChunk};
use crate::model::{forward_tape, Batch, ForwardOptions, ModelParams, ParamVars};
use crate::numerics::{sparse_kd_row, KdRow, KdTerms, SparseTarget, Tape};
use crate::scalar::Scalar;

/// `lambda * KL(p~ || q|S) + (1 - lambda) * CE(label)` for one logit row,
/// where `p~` is the record renormalized over its indices `S`.
pub fn sparse_kd_loss<T: Scalar>(
    student_logits: &[T],
    record: &SparseLogitRecord,
    label: u32,
    lambda_kd: f64,
) -> Result<KdRow<T>> {
    if student_logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "sparse_kd_loss" });
    }
    if let Some(&i) = record.indices.iter().find(|&&i| i as usize >= student_logits.len()) {
        return Err(Error::TokenOutOfRange {
            token: i,
            vocab: student_logits.len(),
        });
    }
    let target = SparseTarget {
        label,
        teacher: Some((record.indices.clone(), record.probs.clone())),
    };
    sparse_kd_row(student_logits, &target, lambda_kd)
}

/// Next-token targets of a chunk: position `i` is supervised by token
/// `i + 1` (and by record `i` when given) unless that token is padding.
pub fn chunk_targets(
    chunk: &TokenChunk,
    records: Option<&[SparseLogitRecord]>,
) -> Vec<Option<SparseTarget>> {
    let mut out = vec![None; chunk.len()];
    for i in chunk.supervised_positions() {
        out[i] = Some(SparseTarget {
            label: chunk.tokens[i + 1],
            teacher: records.map(|r| (r[i].indices.clone(), r[i].probs.clone())),
        });
    }
    out
}

/// Gradient of the mean mixed loss over a batch of chunks.
pub struct StepResult<T> {
    pub loss: f64,
    pub terms: KdTerms,
    pub grads: ModelParams<T>,
}

pub fn loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    items: &[(TokenChunk, Option<Vec<SparseLogitRecord>>)],
    lambda_kd: f64,
    opts: &ForwardOptions<T>,
) -> Result<StepResult<T>> {
    let batch = Batch::new(items.iter().map(|(c, _)| (c.tokens.as_slice(), c.doc_boundaries.as_slice())))?;
    let targets: Vec<Option<SparseTarget>> = items
        .iter()
        .flat_map(|(c, r)| chunk_targets(c, r.as_deref()))
        .collect();
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let trace = forward_tape(&mut tape, &params.config, &vars, &batch, opts)?;
    let loss = tape.sparse_kd(trace.logits, Arc::new(targets), lambda_kd)?;
    let terms = tape.kd_terms(loss).unwrap_or_default();
    let value = tape.value(loss).item().as_f64();
    let mut g = tape.backward(loss)?;
    Ok(StepResult {
        loss: value,
        terms,
        grads: vars.gradients(&mut g, &params.config),
    })
}

/// Mean next-token cross-entropy (nats) over the non-pad targets.
pub fn validation_loss<T: Scalar>(params: &ModelParams<T>, val_chunks: &[TokenChunk]) -> Result<f64> {
    validation_loss_with(params, val_chunks, &ForwardOptions::default())
}

/// [`validation_loss`] with quantizers in the forward pass.
pub fn validation_loss_with<T: Scalar>(
    params: &ModelParams<T>,
    val_chunks: &[TokenChunk],
    opts: &ForwardOptions<T>,
) -> Result<f64> {
    let mut mean = 0.0f64;
    let mut n = 0u64;
    for group in val_chunks.chunks(8) {
        let batch = Batch::new(group.iter().map(|c| (c.tokens.as_slice(), c.doc_boundaries.as_slice())))?;
        let logits = crate::model::batch_logits(params, &batch, opts)?;
        for (ci, c) in group.iter().enumerate() {
            for i in c.supervised_positions() {
                let row = logits.row(ci * batch.seq_len + i);
                let label = c.tokens[i + 1];
                if label as usize >= row.len() {
                    return Err(Error::TokenOutOfRange { token: label, vocab: row.len() });
                }
                let m = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
                let lse = m + row.iter().map(|x| (x.as_f64() - m).exp()).sum::<f64>().ln();
                let ce = lse - row[label as usize].as_f64();
                // Running mean: exact when every term is equal.
                n += 1;
                mean += (ce - mean) / n as f64;
            }
        }
    }
    if n == 0 {
        return Err(Error::Empty("validation set"));
    }
    Ok(mean)
}
