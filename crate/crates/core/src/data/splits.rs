use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RestrictedSet};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SplitMode {
    /// `R'` classes are divided between FSC training and evaluation by class.
    Classical {
        /// Fraction of `R'` classes whose held-back samples feed `D_F`.
        f_class_frac: f64,
        /// Fraction of each `R'` class's samples reserved for `D_A`.
        a_frac: f64,
        /// Fraction of each `R` class's samples reserved for `D_A`; the rest go to `D_eval`.
        restricted_a_frac: f64,
    },
    /// Every slice spans all classes; `D_A` and `D_F` are few-shot draws.
    ClipStyle {
        a_shots: usize,
        f_shots: usize,
        /// Largest data multiplier `D_F` must support; `D_eval` excludes that many shots.
        max_multiplier: usize,
    },
}

impl SplitMode {
    pub fn classical() -> Self {
        SplitMode::Classical {
            f_class_frac: 0.7,
            a_frac: 0.7,
            restricted_a_frac: 0.5,
        }
    }

    pub fn is_classical(&self) -> bool {
        matches!(self, SplitMode::Classical { .. })
    }
}

/// Sample indices (into the source dataset) of the three slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitBundle {
    pub mode: SplitMode,
    pub a: Vec<usize>,
    pub f: Vec<usize>,
    pub eval: Vec<usize>,
    /// Classes present in `D_F` and in `D_eval`.
    pub f_classes: Vec<usize>,
    pub eval_classes: Vec<usize>,
    /// Per `D_F` class, its `D_F` samples in draw order.
    pub f_ranked: BTreeMap<usize, Vec<usize>>,
}

impl SplitBundle {
    /// The first `n` draws of every `D_F` class, sorted.
    pub fn f_first(&self, n: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(n * self.f_ranked.len());
        for (&c, ids) in &self.f_ranked {
            if ids.len() < n {
                return Err(Error::InsufficientSamples {
                    class: c,
                    need: n,
                    have: ids.len(),
                });
            }
            out.extend_from_slice(&ids[..n]);
        }
        out.sort_unstable();
        Ok(out)
    }

    /// `D_F` scaled by the data multiplier. Clip-style keeps the first
    /// `f_shots·m` draws per class; classical returns `D_F` unchanged.
    pub fn f_with_multiplier(&self, m: usize) -> Result<Vec<usize>> {
        match self.mode {
            SplitMode::Classical { .. } => Ok(self.f.clone()),
            SplitMode::ClipStyle {
                f_shots,
                max_multiplier,
                ..
            } => {
                if m == 0 || m > max_multiplier {
                    return Err(Error::config(
                        "m_data",
                        format!("multiplier {m} outside 1..={max_multiplier}"),
                    ));
                }
                let mut out: Vec<usize> = self
                    .f_ranked
                    .values()
                    .flat_map(|v| v[..f_shots * m].iter().copied())
                    .collect();
                out.sort_unstable();
                Ok(out)
            }
        }
    }
}

fn shuffled(ids: &[usize], seed: u64, class: usize) -> Vec<usize> {
    let mut v = ids.to_vec();
    v.shuffle(&mut rng::stream(seed, "split", class as u64));
    v
}

fn frac_count(n: usize, frac: f64) -> usize {
    ((n as f64) * frac).round() as usize
}

fn check_frac(field: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::config(field, format!("{v} must lie strictly between 0 and 1")));
    }
    Ok(())
}

pub fn make_splits(ds: &Dataset, r: &RestrictedSet, mode: &SplitMode, seed: u64) -> Result<SplitBundle> {
    let by_class = ds.by_class();
    let (mut a, mut f, mut eval) = (Vec::new(), Vec::new(), Vec::new());
    let mut f_ranked = BTreeMap::new();
    let (f_classes, eval_classes);
    match *mode {
        SplitMode::Classical {
            f_class_frac,
            a_frac,
            restricted_a_frac,
        } => {
            check_frac("f_class_frac", f_class_frac)?;
            check_frac("a_frac", a_frac)?;
            check_frac("restricted_a_frac", restricted_a_frac)?;
            let mut others: Vec<usize> = r.others.iter().copied().filter(|c| by_class.contains_key(c)).collect();
            others.shuffle(&mut rng::stream(seed, "split.classes", 0));
            let n_f = frac_count(others.len(), f_class_frac);
            if n_f == 0 || n_f == others.len() {
                return Err(Error::config(
                    "f_class_frac",
                    format!("{} other classes cannot be divided into two non-empty groups", others.len()),
                ));
            }
            let mut fc = others[..n_f].to_vec();
            let mut ec = others[n_f..].to_vec();
            for (&c, ids) in &by_class {
                let restricted = r.is_restricted(c);
                let frac = if restricted { restricted_a_frac } else { a_frac };
                let k = frac_count(ids.len(), frac);
                if k == 0 || k == ids.len() {
                    return Err(Error::InsufficientSamples {
                        class: c,
                        need: 2,
                        have: ids.len(),
                    });
                }
                let ids = shuffled(ids, seed, c);
                a.extend_from_slice(&ids[..k]);
                if restricted || ec.contains(&c) {
                    eval.extend_from_slice(&ids[k..]);
                } else {
                    f.extend_from_slice(&ids[k..]);
                    f_ranked.insert(c, ids[k..].to_vec());
                }
            }
            ec.extend(r.restricted.iter().copied().filter(|c| by_class.contains_key(c)));
            fc.sort_unstable();
            ec.sort_unstable();
            f_classes = fc;
            eval_classes = ec;
        }
        SplitMode::ClipStyle {
            a_shots,
            f_shots,
            max_multiplier,
        } => {
            if a_shots == 0 || f_shots == 0 || max_multiplier == 0 {
                return Err(Error::config("shots", "shot counts and multiplier must be at least 1"));
            }
            let need = a_shots + f_shots * max_multiplier + 1;
            for (&c, ids) in &by_class {
                if ids.len() < need {
                    return Err(Error::InsufficientSamples {
                        class: c,
                        need,
                        have: ids.len(),
                    });
                }
                let ids = shuffled(ids, seed, c);
                a.extend_from_slice(&ids[..a_shots]);
                let fs = ids[a_shots..a_shots + f_shots * max_multiplier].to_vec();
                f.extend_from_slice(&fs);
                f_ranked.insert(c, fs);
                eval.extend_from_slice(&ids[a_shots + f_shots * max_multiplier..]);
            }
            f_classes = by_class.keys().copied().collect();
            eval_classes = f_classes.clone();
        }
    }
    a.sort_unstable();
    f.sort_unstable();
    eval.sort_unstable();
    Ok(SplitBundle {
        mode: mode.clone(),
        a,
        f,
        eval,
        f_classes,
        eval_classes,
        f_ranked,
    })
}
