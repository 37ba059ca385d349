use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{Linear, ModelConfig, ModelParams};
use crate::numerics::{AttentionLayout, FakeQuantizer, Gradients, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Tape handles of one block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub qkv: Var,
    pub attn_out: Var,
    pub mlp_norm: Var,
    pub up: Var,
    pub down: Var,
}

impl LayerVars {
    pub fn linear(&self, which: Linear) -> Var {
        match which {
            Linear::Qkv => self.qkv,
            Linear::AttnOut => self.attn_out,
            Linear::Up => self.up,
            Linear::Down => self.down,
        }
    }
}

/// Tape handles of every model parameter. `head == embedding` when tied.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub embedding: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub head: Var,
}

impl ParamVars {
    pub fn register<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>) -> Self {
        let embedding = tape.leaf(params.embedding.clone());
        let layers = params
            .layers
            .iter()
            .map(|l| LayerVars {
                attn_norm: tape.leaf(l.attn_norm.clone()),
                qkv: tape.leaf(l.qkv.clone()),
                attn_out: tape.leaf(l.attn_out.clone()),
                mlp_norm: tape.leaf(l.mlp_norm.clone()),
                up: tape.leaf(l.up.clone()),
                down: tape.leaf(l.down.clone()),
            })
            .collect();
        let final_norm = tape.leaf(params.final_norm.clone());
        let head = match &params.head {
            Some(h) => tape.leaf(h.clone()),
            None => embedding,
        };
        Self {
            embedding,
            layers,
            final_norm,
            head,
        }
    }

    /// Handles in declaration order; the head appears only when untied.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        for l in &self.layers {
            out.extend([l.attn_norm, l.qkv, l.attn_out, l.mlp_norm, l.up, l.down]);
        }
        out.push(self.final_norm);
        if self.head != self.embedding {
            out.push(self.head);
        }
        out
    }

    /// Gradient tree laid out like the parameters.
    pub fn gradients<T: Scalar>(
        &self,
        grads: &mut Gradients<T>,
        config: &ModelConfig,
    ) -> ModelParams<T> {
        let tensors = self.all().into_iter().map(|v| grads.take(v)).collect();
        ModelParams::from_tensors(config.clone(), tensors).expect("gradient layout matches")
    }
}

/// Optional quantizers inserted into the forward pass.
pub struct ForwardOptions<T> {
    /// Applied to every block projection weight (straight-through backward).
    pub weight_quant: Option<Arc<dyn FakeQuantizer<T>>>,
    /// Applied to every block projection input.
    pub act_quant: Option<Arc<dyn FakeQuantizer<T>>>,
}

impl<T> Default for ForwardOptions<T> {
    fn default() -> Self {
        Self {
            weight_quant: None,
            act_quant: None,
        }
    }
}

impl<T> Clone for ForwardOptions<T> {
    fn clone(&self) -> Self {
        Self {
            weight_quant: self.weight_quant.clone(),
            act_quant: self.act_quant.clone(),
        }
    }
}

/// A batch of equal-length sequences, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<u32>,
    /// Attention segment of every token; unique across sequences.
    pub segments: Vec<u32>,
    pub seq_len: usize,
}

impl Batch {
    /// `sequences` pairs tokens with the offsets at which a new document
    /// starts (an offset of 0 is allowed and has no effect).
    pub fn new<'a, I>(sequences: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [u32], &'a [u32])>,
    {
        let mut tokens = Vec::new();
        let mut segments = Vec::new();
        let mut seq_len = None;
        let mut next_segment = 0u32;
        for (toks, bounds) in sequences {
            if toks.is_empty() {
                return Err(Error::Empty("sequence"));
            }
            match seq_len {
                None => seq_len = Some(toks.len()),
                Some(l) if l != toks.len() => {
                    return Err(Error::shape("batch", "sequences must share one length"))
                }
                _ => {}
            }
            if bounds.windows(2).any(|w| w[0] >= w[1])
                || bounds.last().is_some_and(|&b| b as usize >= toks.len())
            {
                return Err(Error::UnsortedBoundaries);
            }
            let mut b = bounds.iter().peekable();
            for i in 0..toks.len() {
                if b.peek().is_some_and(|&&o| o as usize == i) {
                    b.next();
                    if i > 0 {
                        next_segment += 1;
                    }
                }
                segments.push(next_segment);
            }
            next_segment += 1;
            tokens.extend_from_slice(toks);
        }
        Ok(Self {
            tokens,
            segments,
            seq_len: seq_len.ok_or(Error::Empty("batch"))?,
        })
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn sequences(&self) -> usize {
        self.tokens.len() / self.seq_len
    }
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Per block, the input seen by each projection, in [`Linear::ALL`] order.
    pub linear_inputs: Vec<[Var; 4]>,
}

fn project<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    opts: &ForwardOptions<T>,
) -> Result<(Var, Var)> {
    let x = match &opts.act_quant {
        Some(q) => tape.fake_quant(x, q.clone())?,
        None => x,
    };
    let w = match &opts.weight_quant {
        Some(q) => tape.fake_quant(w, q.clone())?,
        None => w,
    };
    Ok((tape.linear(x, w)?, x))
}

/// Records the full model on `tape`.
pub fn forward_tape<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    vars: &ParamVars,
    batch: &Batch,
    opts: &ForwardOptions<T>,
) -> Result<ForwardTrace> {
    if batch.seq_len > config.seq_len {
        return Err(Error::shape(
            "forward",
            format!("sequence length {} exceeds {}", batch.seq_len, config.seq_len),
        ));
    }
    let eps = T::of(config.norm_eps);
    let (d, hd, kvd) = (config.dim, config.head_dim(), config.kv_dim());
    let positions: Arc<Vec<usize>> =
        Arc::new((0..batch.rows()).map(|r| r % batch.seq_len).collect());
    let layout = AttentionLayout {
        seq_len: batch.seq_len,
        q_heads: config.q_heads,
        kv_heads: config.kv_heads,
        head_dim: hd,
        segments: Arc::new(batch.segments.clone()),
    };
    let act = config.activation.resolve()?;

    let mut x = tape.embedding(vars.embedding, Arc::new(batch.tokens.clone()))?;
    let mut linear_inputs = Vec::with_capacity(vars.layers.len());
    for l in &vars.layers {
        let h = tape.rms_norm(x, l.attn_norm, eps)?;
        let (qkv, qkv_in) = project(tape, h, l.qkv, opts)?;
        let q = tape.columns(qkv, 0, d)?;
        let k = tape.columns(qkv, d, kvd)?;
        let v = tape.columns(qkv, d + kvd, kvd)?;
        let q = tape.rope(q, hd, positions.clone(), config.rope_base)?;
        let k = tape.rope(k, hd, positions.clone(), config.rope_base)?;
        let att = tape.attention(q, k, v, layout.clone())?;
        let (o, o_in) = project(tape, att, l.attn_out, opts)?;
        x = tape.add(x, o)?;

        let h = tape.rms_norm(x, l.mlp_norm, eps)?;
        let (u, up_in) = project(tape, h, l.up, opts)?;
        let a = tape.activation(u, act.clone())?;
        let (dn, down_in) = project(tape, a, l.down, opts)?;
        x = tape.add(x, dn)?;
        linear_inputs.push([qkv_in, o_in, up_in, down_in]);
    }
    let n = tape.rms_norm(x, vars.final_norm, eps)?;
    let logits = tape.linear(n, vars.head)?;
    Ok(ForwardTrace {
        logits,
        linear_inputs,
    })
}

/// Logits `[rows, vocab]` for a batch, no gradients kept.
pub fn batch_logits<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch,
    opts: &ForwardOptions<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let trace = forward_tape(&mut tape, &params.config, &vars, batch, opts)?;
    Ok(tape.value(trace.logits).clone())
}

/// Logits `[tokens.len(), vocab]` of one sequence under causal,
/// per-document attention.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    doc_boundaries: &[u32],
) -> Result<Tensor<T>> {
    let batch = Batch::new([(tokens, doc_boundaries)])?;
    batch_logits(params, &batch, &ForwardOptions::default())
}
