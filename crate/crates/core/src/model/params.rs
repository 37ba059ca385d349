use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Tensor<T>,
    /// Stacked `[Q; K; V]` projection, `(dim + 2 kv_dim) x dim`.
    pub qkv: Tensor<T>,
    pub attn_out: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub up: Tensor<T>,
    pub down: Tensor<T>,
}

/// Which projection of a block a tensor is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Linear {
    Qkv,
    AttnOut,
    Up,
    Down,
}

impl Linear {
    pub const ALL: [Linear; 4] = [Linear::Qkv, Linear::AttnOut, Linear::Up, Linear::Down];

    pub fn name(self) -> &'static str {
        match self {
            Linear::Qkv => "qkv",
            Linear::AttnOut => "attn_out",
            Linear::Up => "up",
            Linear::Down => "down",
        }
    }
}

impl<T> LayerParams<T> {
    pub fn linear(&self, which: Linear) -> &Tensor<T> {
        match which {
            Linear::Qkv => &self.qkv,
            Linear::AttnOut => &self.attn_out,
            Linear::Up => &self.up,
            Linear::Down => &self.down,
        }
    }

    pub fn linear_mut(&mut self, which: Linear) -> &mut Tensor<T> {
        match which {
            Linear::Qkv => &mut self.qkv,
            Linear::AttnOut => &mut self.attn_out,
            Linear::Up => &mut self.up,
            Linear::Down => &mut self.down,
        }
    }
}

/// All parameter tensors of a model. With tied embeddings `head` is `None`
/// and the output projection *is* the embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub embedding: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    pub head: Option<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn head(&self) -> &Tensor<T> {
        self.head.as_ref().unwrap_or(&self.embedding)
    }

    pub fn head_mut(&mut self) -> &mut Tensor<T> {
        self.head.as_mut().unwrap_or(&mut self.embedding)
    }

    /// Tensors in declaration order (the checkpoint order). The head is
    /// listed only when untied.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layers.{i}.qkv"), &l.qkv));
            out.push((format!("layers.{i}.attn_out"), &l.attn_out));
            out.push((format!("layers.{i}.mlp_norm"), &l.mlp_norm));
            out.push((format!("layers.{i}.up"), &l.up));
            out.push((format!("layers.{i}.down"), &l.down));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        if let Some(h) = &self.head {
            out.push(("head".to_string(), h));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding];
        for l in &mut self.layers {
            out.push(&mut l.attn_norm);
            out.push(&mut l.qkv);
            out.push(&mut l.attn_out);
            out.push(&mut l.mlp_norm);
            out.push(&mut l.up);
            out.push(&mut l.down);
        }
        out.push(&mut self.final_norm);
        if let Some(h) = &mut self.head {
            out.push(h);
        }
        out
    }

    /// Builds a params tree of the same layout from tensors in declaration
    /// order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let expected = expected_shapes(&config);
        if tensors.len() != expected.len() {
            return Err(Error::shape(
                "model params",
                format!("expected {} tensors, got {}", expected.len(), tensors.len()),
            ));
        }
        for (t, s) in tensors.iter().zip(&expected) {
            if t.shape() != s.as_slice() {
                return Err(Error::shape("model params", format!("{:?} vs {s:?}", t.shape())));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let embedding = next();
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                attn_norm: next(),
                qkv: next(),
                attn_out: next(),
                mlp_norm: next(),
                up: next(),
                down: next(),
            })
            .collect();
        let final_norm = next();
        let head = (!config.tied_embeddings).then(&mut next);
        Ok(Self {
            config,
            embedding,
            layers,
            final_norm,
            head,
        })
    }

    pub fn map(&self, mut f: impl FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        let tensors = self.tensors().into_iter().map(|(_, t)| f(t)).collect();
        Self::from_tensors(self.config.clone(), tensors).expect("shape-preserving map")
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let tensors = self.tensors().into_iter().map(|(_, t)| t.cast()).collect();
        ModelParams::from_tensors(self.config.clone(), tensors).expect("same layout")
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor::zeros(t.shape()))
    }

    /// Total number of stored elements (the head once when tied).
    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|((_, a), (_, b))| a.bit_eq(b))
    }
}

/// Shapes in declaration order.
pub fn expected_shapes(c: &ModelConfig) -> Vec<Vec<usize>> {
    let mut out = vec![vec![c.vocab, c.dim]];
    for _ in 0..c.layers {
        out.push(vec![c.dim]);
        out.push(vec![c.qkv_rows(), c.dim]);
        out.push(vec![c.dim, c.dim]);
        out.push(vec![c.dim]);
        out.push(vec![c.mlp_dim, c.dim]);
        out.push(vec![c.dim, c.mlp_dim]);
    }
    out.push(vec![c.dim]);
    if !c.tied_embeddings {
        out.push(vec![c.vocab, c.dim]);
    }
    out
}

/// Deterministic initialization: normal weights with `config.init_std()`,
/// residual-branch outputs scaled by `1/sqrt(2 layers)`, unit norm gains.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = config.init_std();
    let resid = std / (2.0 * config.layers.max(1) as f64).sqrt();
    let (d, v) = (config.dim, config.vocab);
    let embedding = Tensor::randn(&[v, d], std, &mut rng);
    let layers = (0..config.layers)
        .map(|_| LayerParams {
            attn_norm: Tensor::full(&[d], T::one()),
            qkv: Tensor::randn(&[config.qkv_rows(), d], std, &mut rng),
            attn_out: Tensor::randn(&[d, d], resid, &mut rng),
            mlp_norm: Tensor::full(&[d], T::one()),
            up: Tensor::randn(&[config.mlp_dim, d], std, &mut rng),
            down: Tensor::randn(&[d, config.mlp_dim], resid, &mut rng),
        })
        .collect();
    let head = (!config.tied_embeddings).then(|| Tensor::randn(&[v, d], std, &mut rng));
    Ok(ModelParams {
        config: config.clone(),
        embedding,
        layers,
        final_norm: Tensor::full(&[d], T::one()),
        head,
    })
}
