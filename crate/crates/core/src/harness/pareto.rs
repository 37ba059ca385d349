use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub label: String,
    /// Lower is better (bytes or MACs).
    pub cost: f64,
    /// Higher is better (negated validation loss or accuracy).
    pub quality: f64,
    #[serde(default)]
    pub dominated: bool,
}

impl ParetoPoint {
    pub fn new(label: impl Into<String>, cost: f64, quality: f64) -> Self {
        Self {
            label: label.into(),
            cost,
            quality,
            dominated: false,
        }
    }

    /// `self` is at least as cheap and as good as `other`, and strictly
    /// better on one axis.
    pub fn dominates(&self, other: &Self) -> bool {
        self.cost <= other.cost && self.quality >= other.quality && (self.cost < other.cost || self.quality > other.quality)
    }
}

/// Sets `dominated` on every point. Sort-and-sweep, `O(n log n)`.
pub fn mark_dominated(points: &mut [ParetoPoint]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Empty("point set"));
    }
    if points.iter().any(|p| !p.cost.is_finite() || !p.quality.is_finite()) {
        return Err(Error::InvalidArgument("costs and qualities must be finite".into()));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (a, b) = (&points[a], &points[b]);
        a.cost.total_cmp(&b.cost).then(b.quality.total_cmp(&a.quality))
    });
    // Best quality among strictly cheaper points.
    let mut best_cheaper = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let cost = points[order[i]].cost;
        let group_best = points[order[i]].quality;
        let mut j = i;
        while j < order.len() && points[order[j]].cost == cost {
            let p = &mut points[order[j]];
            p.dominated = p.quality < group_best || p.quality <= best_cheaper;
            j += 1;
        }
        best_cheaper = best_cheaper.max(group_best);
        i = j;
    }
    Ok(())
}

/// Non-dominated points sorted by cost (then label). Points tied on both
/// axes are all kept.
pub fn pareto_front(points: &[ParetoPoint]) -> Result<Vec<ParetoPoint>> {
    let mut all = points.to_vec();
    mark_dominated(&mut all)?;
    let mut front: Vec<ParetoPoint> = all.into_iter().filter(|p| !p.dominated).collect();
    front.sort_by(|a, b| a.cost.total_cmp(&b.cost).then(b.quality.total_cmp(&a.quality)).then(a.label.cmp(&b.label)));
    Ok(front)
}

pub fn frontier_csv(front: &[ParetoPoint]) -> String {
    let mut out = String::from("label,cost,quality\n");
    for p in front {
        out.push_str(&format!("{},{},{}\n", p.label, p.cost, p.quality));
    }
    out
}
