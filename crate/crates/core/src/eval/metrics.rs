use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Correct/total counters; integer so that reduction order cannot matter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub correct: u64,
    pub total: u64,
}

impl Counts {
    pub fn add(self, other: Counts) -> Counts {
        Counts {
            correct: self.correct + other.correct,
            total: self.total + other.total,
        }
    }

    /// Accuracy in percent, or NaN when nothing was counted.
    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Uses average ranks; the result is exactly the
/// pairwise count divided by `P·N`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {s} is not comparable")));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUROC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, kept integral: a tie block spanning
    // ranks i+1..=j has average rank (i+1+j)/2.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let block_pos = order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += block_pos * (i as u64 + 1 + j as u64);
        i = j;
    }
    let twice_u = twice_rank_sum - pos * (pos + 1);
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Accuracies of one checkpoint and its drops from the reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub acc_r: f64,
    pub acc_rp: f64,
    pub delta_r: f64,
    pub delta_rp: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub rows: Vec<MetricRow>,
}

impl MetricSeries {
    /// Builds the series from `(step, acc_R, acc_R')`; the step-0 row is the reference.
    pub fn from_accuracies(points: &[(usize, f64, f64)]) -> Result<Self> {
        let &(_, ref_r, ref_rp) = points
            .iter()
            .find(|p| p.0 == 0)
            .ok_or_else(|| Error::Metric("series has no step-0 reference".into()))?;
        Ok(MetricSeries {
            rows: points
                .iter()
                .map(|&(step, acc_r, acc_rp)| MetricRow {
                    step,
                    acc_r,
                    acc_rp,
                    delta_r: ref_r - acc_r,
                    delta_rp: ref_rp - acc_rp,
                })
                .collect(),
        })
    }

    /// CSV with columns `step,acc_R,acc_Rp,delta_R,delta_Rp`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,acc_R,acc_Rp,delta_R,delta_Rp\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.step, r.acc_r, r.acc_rp, r.delta_r, r.delta_rp));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropRatio {
    pub drop_ratio: f64,
    pub selected_step: usize,
    pub beta: f64,
    pub delta_r: f64,
    pub delta_rp: f64,
}

/// `δ_R/δ_R'` at the checkpoint (beyond step 0) whose `δ_R'` is closest to
/// `beta`; ties go to the earliest step.
pub fn drop_ratio_at_beta(series: &MetricSeries, beta: f64) -> Result<DropRatio> {
    let mut best: Option<&MetricRow> = None;
    for row in series.rows.iter().filter(|r| r.step > 0) {
        if row.delta_rp.is_nan() {
            continue;
        }
        let d = (row.delta_rp - beta).abs();
        best = match best {
            Some(b) if (b.delta_rp - beta).abs() < d => Some(b),
            Some(b) if (b.delta_rp - beta).abs() == d && b.step <= row.step => Some(b),
            _ => Some(row),
        };
    }
    let row = best.ok_or_else(|| Error::Metric("no checkpoint beyond step 0".into()))?;
    if row.delta_rp == 0.0 {
        return Err(Error::UndefinedRatio { step: row.step });
    }
    Ok(DropRatio {
        drop_ratio: row.delta_r / row.delta_rp,
        selected_step: row.step,
        beta,
        delta_r: row.delta_r,
        delta_rp: row.delta_rp,
    })
}

/// Row `a` holds `M_aa' = δ^{a'}_a / δ^a_a`, or `None` when `δ^a_a` is zero
/// or not finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub rows: Vec<Option<Vec<f64>>>,
}

/// `drops[a][a']` is the drop of attribute `a` when attribute `a'` is obstructed.
pub fn attribute_confusion(drops: &[Vec<f64>]) -> Result<ConfusionMatrix> {
    let n = drops.len();
    if drops.iter().any(|r| r.len() != n) {
        return Err(Error::Metric("confusion input must be square".into()));
    }
    Ok(ConfusionMatrix {
        rows: drops
            .iter()
            .enumerate()
            .map(|(a, row)| {
                let own = row[a];
                (own != 0.0 && own.is_finite()).then(|| row.iter().map(|d| d / own).collect())
            })
            .collect(),
    })
}
