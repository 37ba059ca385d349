use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training costs three multiply-accumulates per parameter per token
/// (forward plus two for backward); logit generation costs one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostMode {
    Train,
    Forward,
}

impl CostMode {
    pub fn factor(self) -> f64 {
        match self {
            Self::Train => 3.0,
            Self::Forward => 1.0,
        }
    }
}

impl FromStr for CostMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "forward" => Ok(Self::Forward),
            _ => Err(Error::InvalidArgument(format!("unknown cost mode `{s}`"))),
        }
    }
}

impl fmt::Display for CostMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Forward => "forward",
        })
    }
}

/// MACs of processing `tokens` tokens with `n_params` compute parameters.
pub fn estimate_cost(n_params: f64, tokens: f64, mode: CostMode) -> Result<f64> {
    if !(n_params > 0.0 && tokens > 0.0) || !n_params.is_finite() || !tokens.is_finite() {
        return Err(Error::InvalidArgument(format!("cost needs positive inputs, got N={n_params} T={tokens}")));
    }
    Ok(mode.factor() * n_params * tokens)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub label: String,
    pub n_params: f64,
    pub tokens: f64,
    pub mode: CostMode,
    pub macs: f64,
}

impl CostEntry {
    pub fn new(label: impl Into<String>, n_params: f64, tokens: f64, mode: CostMode) -> Result<Self> {
        Ok(Self {
            label: label.into(),
            n_params,
            tokens,
            mode,
            macs: estimate_cost(n_params, tokens, mode)?,
        })
    }
}

/// Column header for cost tables: MACs, reported under the FLOPs label the
/// 3NT/1NT accounting uses.
pub const COST_HEADER: &str = "label,n_params,tokens,mode,FLOPs(paper-convention)";

pub fn cost_csv(entries: &[CostEntry]) -> String {
    let mut out = format!("{COST_HEADER}\n");
    for e in entries {
        out.push_str(&format!("{},{:e},{:e},{},{:.3e}\n", e.label, e.n_params, e.tokens, e.mode, e.macs));
    }
    out
}

/// Compute-parameter and token counts of the Apertus family and of the
/// small open models it is compared with.
pub fn reference_cost_table() -> Vec<CostEntry> {
    let rows: [(&str, f64, f64, CostMode); 9] = [
        ("Apertus-8B pre-training", 8.1e9, 15e12, CostMode::Train),
        ("Apertus-8B logits generation", 8.1e9, 1.7e12, CostMode::Forward),
        ("Apertus-v1.1-0.5B pre-training", 0.4e9, 1.7e12, CostMode::Train),
        ("Apertus-v1.1-1.5B pre-training", 1.5e9, 1.7e12, CostMode::Train),
        ("Apertus-v1.1-4B pre-training", 3.8e9, 1.7e12, CostMode::Train),
        ("Qwen3-0.6B pre-training", 0.6e9, 36e12, CostMode::Train),
        ("EuroLLM-1.7B pre-training", 1.4e9, 4e12, CostMode::Train),
        ("SmolLM2-1.7B pre-training", 1.7e9, 11e12, CostMode::Train),
        ("SmolLM3-3B pre-training", 3.0e9, 11e12, CostMode::Train),
    ];
    rows.iter()
        .map(|&(l, n, t, m)| CostEntry::new(l, n, t, m).expect("positive reference values"))
        .collect()
}

/// Logit generation plus the three student trainings.
pub fn family_total(table: &[CostEntry]) -> f64 {
    table.iter().filter(|e| e.label.starts_with("Apertus-v1.1") || e.label.contains("logits")).map(|e| e.macs).sum()
}
