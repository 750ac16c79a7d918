use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::LearnerKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "grid", rename_all = "kebab-case")]
pub enum SweepAxis {
    /// Multiplies the data available to the evaluation learner.
    Data(Vec<usize>),
    /// Multiplies the evaluation learner's training/adaptation steps.
    Time(Vec<usize>),
    /// Every (learner used during obstruction, learner used at evaluation) pair.
    Cross(Vec<LearnerKind>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Data(_) => "m_data",
            SweepAxis::Time(_) => "m_time",
            SweepAxis::Cross(_) => "cross",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SweepAxis::Data(g) | SweepAxis::Time(g) => {
                if !g.contains(&1) {
                    return Err(Error::config(self.name(), "grid must include the 1x reference"));
                }
                if g.contains(&0) {
                    return Err(Error::config(self.name(), "multipliers must be at least 1"));
                }
            }
            SweepAxis::Cross(g) => {
                if g.is_empty() {
                    return Err(Error::config("cross", "needs at least one learner"));
                }
            }
        }
        Ok(())
    }

    /// Cell keys in table order.
    pub fn keys(&self) -> Vec<CellKey> {
        match self {
            SweepAxis::Data(g) | SweepAxis::Time(g) => g.iter().map(|&m| CellKey::Multiplier(m)).collect(),
            SweepAxis::Cross(g) => g
                .iter()
                .flat_map(|&lto| g.iter().map(move |&eval| CellKey::Pair { lto, eval }))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellKey {
    Multiplier(usize),
    Pair { lto: LearnerKind, eval: LearnerKind },
}

/// Drop ratios of one cell, one per seed; `None` where the ratio was undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub key: CellKey,
    pub values: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl SweepCell {
    pub fn new(key: CellKey, values: Vec<Option<f64>>) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let n = defined.len() as f64;
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / n);
        // Sample standard deviation; a single seed reports zero spread.
        let std = mean.map(|m| {
            if defined.len() < 2 {
                0.0
            } else {
                (defined.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            }
        });
        SweepCell { key, values, mean, std }
    }

    pub fn undefined(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub seeds: Vec<u64>,
    pub beta: f64,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn cell(&self, key: CellKey) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.key == key)
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = match self.axis {
            SweepAxis::Cross(_) => String::from("lto_learner,eval_learner"),
            _ => self.axis.name().to_string(),
        };
        s.push_str(",mean,std,defined,undefined,values\n");
        for c in &self.cells {
            match c.key {
                CellKey::Multiplier(m) => s.push_str(&m.to_string()),
                CellKey::Pair { lto, eval } => s.push_str(&format!("{lto},{eval}")),
            }
            let values: Vec<String> = c.values.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())).collect();
            s.push_str(&format!(
                ",{},{},{},{},{}\n",
                fmt(c.mean),
                fmt(c.std),
                c.values.len() - c.undefined(),
                c.undefined(),
                values.join(";")
            ));
        }
        s
    }
}
