//! Rank correlation, sorted score curves and log-ratio summaries.

use crate::error::{Error, Result};
use crate::scores::ScoreTable;

/// Fractional (average) ranks, 1-based: tied values share the mean of the
/// ranks they occupy.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Pearson correlation; `None` when either vector has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::Empty("correlation needs at least 2 points"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(None);
    }
    Ok(Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)))
}

/// Spearman's rank correlation with average ranks for ties. `None` marks the
/// undefined case of a constant input.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("spearman input contains NaN or Inf".into()));
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Renders an optional correlation, `n/a` when undefined.
pub fn fmt_corr(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |r| r.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    pub fn get(&self, row: &str, col: &str) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == row)?;
        let j = self.labels.iter().position(|l| l == col)?;
        self.values[i][j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (label, row) in self.labels.iter().zip(&self.values) {
            out.push_str(label);
            for v in row {
                out.push(',');
                out.push_str(&fmt_corr(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// Pairwise Spearman correlation of the tables' mean scores.
pub fn correlation_matrix(tables: &[ScoreTable]) -> Result<CorrelationMatrix> {
    if let Some(first) = tables.first() {
        for t in tables {
            if t.example_ids != first.example_ids {
                return Err(Error::LengthMismatch {
                    left: first.n_examples(),
                    right: t.n_examples(),
                });
            }
        }
    }
    let k = tables.len();
    let mut values = vec![vec![Some(1.0); k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let r = spearman(&tables[i].mean, &tables[j].mean)?;
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix {
        labels: tables.iter().map(|t| t.kind.to_string()).collect(),
        values,
    })
}

/// Ascending copy of `v` with the (stable) permutation that produced it:
/// `sorted[k] == v[perm[k]]`.
pub fn sorted_curve(v: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..v.len()).collect();
    perm.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    (perm.iter().map(|&i| v[i]).collect(), perm)
}

/// Reorders `v` by a permutation from [`sorted_curve`].
pub fn reorder(v: &[f64], perm: &[usize]) -> Vec<f64> {
    perm.iter().map(|&i| v[i]).collect()
}

pub const RATIO_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct RatioSummary {
    pub mean_log: f64,
    pub std_log: f64,
    pub skewness: f64,
    /// Pairs dropped because one side was exactly zero.
    pub excluded: usize,
    /// `RATIO_BINS + 1` edges.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl RatioSummary {
    /// `bin_left_edge,count` rows.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_left_edge,count\n");
        for (edge, count) in self.bin_edges.iter().zip(&self.counts) {
            out.push_str(&format!("{edge},{count}\n"));
        }
        out
    }

    /// Number of local maxima in the histogram after merging flat runs.
    pub fn modes(&self) -> usize {
        let mut c: Vec<usize> = self.counts.clone();
        c.dedup();
        (0..c.len())
            .filter(|&i| {
                let left = i == 0 || c[i - 1] < c[i];
                let right = i + 1 == c.len() || c[i + 1] < c[i];
                left && right && c[i] > 0
            })
            .count()
    }
}

/// Distribution of `ln(numer_i / denom_i)`. Pairs where either side is zero
/// are excluded and counted; negative or non-finite entries are errors.
///
/// The histogram spans `mean ± 4·std` (`mean ± 0.5` when std is zero) in
/// [`RATIO_BINS`] bins; values outside land in the end bins.
pub fn ratio_summary(numer: &[f64], denom: &[f64]) -> Result<RatioSummary> {
    if numer.len() != denom.len() {
        return Err(Error::LengthMismatch {
            left: numer.len(),
            right: denom.len(),
        });
    }
    let mut logs = Vec::with_capacity(numer.len());
    let mut excluded = 0;
    for (&a, &b) in numer.iter().zip(denom) {
        if !(a.is_finite() && b.is_finite()) || a < 0.0 || b < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "ratio inputs must be finite and non-negative, got {a} / {b}"
            )));
        }
        if a == 0.0 || b == 0.0 {
            excluded += 1;
        } else {
            logs.push((a / b).ln());
        }
    }
    if logs.is_empty() {
        return Err(Error::Empty("ratio inputs after excluding zeros"));
    }
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let skewness = if std > 0.0 {
        logs.iter().map(|v| ((v - mean) / std).powi(3)).sum::<f64>() / n
    } else {
        0.0
    };
    let half = if std > 0.0 { 4.0 * std } else { 0.5 };
    let (lo, hi) = (mean - half, mean + half);
    let width = (hi - lo) / RATIO_BINS as f64;
    let bin_edges = (0..=RATIO_BINS).map(|k| lo + k as f64 * width).collect();
    let mut counts = vec![0usize; RATIO_BINS];
    for v in &logs {
        let k = ((v - lo) / width).floor();
        let k = if k < 0.0 { 0 } else { (k as usize).min(RATIO_BINS - 1) };
        counts[k] += 1;
    }
    Ok(RatioSummary {
        mean_log: mean,
        std_log: std,
        skewness,
        excluded,
        bin_edges,
        counts,
    })
}
