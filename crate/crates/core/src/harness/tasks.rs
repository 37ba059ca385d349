use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{batch_logits, Batch, ForwardOptions, ModelParams};
use crate::scalar::Scalar;

/// Synthetic byte-level tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// `c:abc=` → `abc`
    Copy,
    /// `r:abc=` → `cba`
    Reversal,
    /// `m:3+9=` → `2`, scored over the ten digits.
    ModAdd,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Copy, TaskKind::Reversal, TaskKind::ModAdd];

    pub fn name(self) -> &'static str {
        match self {
            Self::Copy => "copy",
            Self::Reversal => "reversal",
            Self::ModAdd => "modadd",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task `{s}`")))
    }
}

/// Letters used by the string tasks.
pub const TASK_ALPHABET: &[u8] = b"abcdefgh";

/// One example: the model reads `prompt ++ answer` and must predict every
/// answer token. `choices` restricts the argmax to a candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskExample {
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
    pub choices: Option<Vec<u32>>,
}

impl TaskExample {
    pub fn tokens(&self) -> Vec<u32> {
        self.prompt.iter().chain(&self.answer).copied().collect()
    }

    /// Prompt and answer as one text line, the form used in the corpus.
    pub fn line(&self) -> Vec<u8> {
        let mut v: Vec<u8> = self.tokens().iter().map(|&t| t as u8).collect();
        v.push(b'\n');
        v
    }
}

fn bytes(s: &[u8]) -> Vec<u32> {
    s.iter().map(|&b| u32::from(b)).collect()
}

/// Draws one example of `kind`; `len` is the string length of the copy and
/// reversal tasks.
pub fn task_example<R: Rng + ?Sized>(kind: TaskKind, len: usize, rng: &mut R) -> TaskExample {
    match kind {
        TaskKind::Copy | TaskKind::Reversal => {
            let s: Vec<u8> = (0..len).map(|_| TASK_ALPHABET[rng.random_range(0..TASK_ALPHABET.len())]).collect();
            let tag = if kind == TaskKind::Copy { b'c' } else { b'r' };
            let mut prompt = vec![tag, b':'];
            prompt.extend_from_slice(&s);
            prompt.push(b'=');
            let mut answer = s;
            if kind == TaskKind::Reversal {
                answer.reverse();
            }
            TaskExample {
                prompt: bytes(&prompt),
                answer: bytes(&answer),
                choices: None,
            }
        }
        TaskKind::ModAdd => {
            let (a, b) = (rng.random_range(0..10u8), rng.random_range(0..10u8));
            TaskExample {
                prompt: bytes(&[b'm', b':', b'0' + a, b'+', b'0' + b, b'=']),
                answer: vec![u32::from(b'0' + (a + b) % 10)],
                choices: Some(bytes(b"0123456789")),
            }
        }
    }
}

/// Fixed-seed evaluation suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSuite {
    pub tasks: Vec<TaskKind>,
    pub examples: usize,
    pub len: usize,
    pub seed: u64,
}

impl Default for EvalSuite {
    fn default() -> Self {
        Self {
            tasks: TaskKind::ALL.to_vec(),
            examples: 100,
            len: 3,
            seed: 1234,
        }
    }
}

impl EvalSuite {
    /// The examples of one task, identical on every call.
    pub fn examples(&self, kind: TaskKind) -> Vec<TaskExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (kind as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        (0..self.examples).map(|_| task_example(kind, self.len, &mut rng)).collect()
    }
}

/// Anything that produces next-token logits.
pub trait LanguageModel {
    fn vocab(&self) -> usize;
    fn max_len(&self) -> usize;
    /// Row `i` of each result scores the token at position `i + 1`.
    /// All sequences have the same length.
    fn logits(&self, seqs: &[Vec<u32>]) -> Result<Vec<Vec<Vec<f64>>>>;
}

/// A parameter set with optional quantizers in the forward pass.
pub struct ParamsModel<'a, T> {
    pub params: &'a ModelParams<T>,
    pub opts: ForwardOptions<T>,
}

impl<'a, T: Scalar> ParamsModel<'a, T> {
    pub fn new(params: &'a ModelParams<T>) -> Self {
        Self {
            params,
            opts: ForwardOptions::default(),
        }
    }
}

impl<T: Scalar> LanguageModel for ParamsModel<'_, T> {
    fn vocab(&self) -> usize {
        self.params.config.vocab
    }

    fn max_len(&self) -> usize {
        self.params.config.seq_len
    }

    fn logits(&self, seqs: &[Vec<u32>]) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for group in seqs.chunks(16) {
            let batch = Batch::new(group.iter().map(|s| (s.as_slice(), &[][..])))?;
            let logits = batch_logits(self.params, &batch, &self.opts)?;
            for s in 0..group.len() {
                out.push(
                    (0..batch.seq_len)
                        .map(|i| logits.row(s * batch.seq_len + i).iter().map(|v| v.as_f64()).collect())
                        .collect(),
                );
            }
        }
        Ok(out)
    }
}

fn argmax(row: &[f64], choices: Option<&[u32]>) -> u32 {
    let mut best = (u32::MAX, f64::NEG_INFINITY);
    let mut consider = |t: u32| {
        let v = row[t as usize];
        if v > best.1 || best.0 == u32::MAX {
            best = (t, v);
        }
    };
    match choices {
        Some(c) => c.iter().for_each(|&t| consider(t)),
        None => (0..row.len() as u32).for_each(consider),
    }
    best.0
}

/// Fraction of examples whose every answer token is the argmax given the
/// preceding tokens.
pub fn task_accuracy(model: &dyn LanguageModel, examples: &[TaskExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("task examples"));
    }
    let seqs: Vec<Vec<u32>> = examples.iter().map(TaskExample::tokens).collect();
    let needed = seqs.iter().map(Vec::len).max().unwrap_or(0);
    if needed > model.max_len() {
        return Err(Error::TaskTooLong {
            needed,
            seq_len: model.max_len(),
        });
    }
    if let Some(&t) = seqs.iter().flatten().find(|&&t| t as usize >= model.vocab()) {
        return Err(Error::TokenOutOfRange { token: t, vocab: model.vocab() });
    }
    let logits = model.logits(&seqs)?;
    let correct = examples
        .iter()
        .zip(&logits)
        .filter(|(ex, rows)| {
            ex.answer.iter().enumerate().all(|(i, &a)| {
                let row = &rows[ex.prompt.len() + i - 1];
                argmax(row, ex.choices.as_deref()) == a
            })
        })
        .count();
    Ok(correct as f64 / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: TaskKind,
    pub accuracy: f64,
}

/// Accuracy per task of the suite, in suite order.
pub fn eval_tasks(model: &dyn LanguageModel, suite: &EvalSuite) -> Result<Vec<TaskScore>> {
    if suite.tasks.is_empty() {
        return Err(Error::Empty("task suite"));
    }
    suite
        .tasks
        .iter()
        .map(|&task| {
            Ok(TaskScore {
                task,
                accuracy: task_accuracy(model, &suite.examples(task))?,
            })
        })
        .collect()
}

pub fn macro_average(scores: &[TaskScore]) -> f64 {
    scores.iter().map(|s| s.accuracy).sum::<f64>() / scores.len().max(1) as f64
}
