use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labeled support/query pair. Labels are positions into `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    pub support_ids: Vec<usize>,
    pub query_ids: Vec<usize>,
}

fn positions(classes: &[usize], labels: &[usize]) -> Result<Vec<usize>> {
    let lookup: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(p, &c)| (c, p)).collect();
    labels
        .iter()
        .map(|y| {
            lookup.get(y).copied().ok_or_else(|| Error::LabelNotInEpisode {
                label: *y,
                classes: classes.to_vec(),
            })
        })
        .collect()
}

impl Episode {
    /// Builds an episode from dataset sample ids. Every label must belong to `classes`.
    pub fn from_ids(ds: &Dataset, classes: Vec<usize>, support_ids: Vec<usize>, query_ids: Vec<usize>) -> Result<Self> {
        let s_labels: Vec<usize> = support_ids.iter().map(|&i| ds.labels()[i]).collect();
        let q_labels: Vec<usize> = query_ids.iter().map(|&i| ds.labels()[i]).collect();
        Self::new(classes, ds.rows(&support_ids)?, &s_labels, ds.rows(&query_ids)?, &q_labels)
            .map(|e| Episode {
                support_ids,
                query_ids,
                ..e
            })
    }

    /// Builds an episode from raw features and class labels.
    pub fn new(
        classes: Vec<usize>,
        support_x: Tensor,
        support_labels: &[usize],
        query_x: Tensor,
        query_labels: &[usize],
    ) -> Result<Self> {
        let distinct: BTreeSet<usize> = classes.iter().copied().collect();
        if distinct.len() != classes.len() || classes.is_empty() {
            return Err(Error::InvalidTensor(format!("episode classes {classes:?} must be distinct and non-empty")));
        }
        if support_x.dims2()?.0 != support_labels.len() || query_x.dims2()?.0 != query_labels.len() {
            return Err(Error::InvalidTensor("episode rows and labels disagree".into()));
        }
        let support_y = positions(&classes, support_labels)?;
        let query_y = positions(&classes, query_labels)?;
        Ok(Episode {
            support_ids: (0..support_y.len()).collect(),
            query_ids: (0..query_y.len()).collect(),
            classes,
            support_x,
            support_y,
            query_x,
            query_y,
        })
    }

    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn n_query(&self) -> usize {
        self.query_y.len()
    }

    /// Class id of each query sample.
    pub fn query_labels(&self) -> Vec<usize> {
        self.query_y.iter().map(|&p| self.classes[p]).collect()
    }

    /// `N×|S|` matrix whose product with support embeddings gives class means.
    pub fn prototype_matrix(&self) -> Result<Tensor> {
        let n = self.n_way();
        let s = self.support_y.len();
        let mut counts = vec![0usize; n];
        for &p in &self.support_y {
            counts[p] += 1;
        }
        if let Some(p) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyClass { class: self.classes[p] });
        }
        let mut data = vec![0.0; n * s];
        for (j, &p) in self.support_y.iter().enumerate() {
            data[p * s + j] = 1.0 / counts[p] as f64;
        }
        Tensor::matrix(n, s, data)
    }

    pub fn support_one_hot(&self) -> Result<Tensor> {
        Tensor::one_hot(&self.support_y, self.n_way())
    }

    pub fn query_one_hot(&self) -> Result<Tensor> {
        Tensor::one_hot(&self.query_y, self.n_way())
    }
}

/// A task: the inner learner's data `D_fsc` and the scoring data `D_obs`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTask {
    pub fsc: Episode,
    pub obs: Episode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            n_way: 5,
            k_shot: 1,
            q_query: 15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Constraint {
    Any,
    /// Exactly one class from the set, the remaining `N−1` from outside it.
    RestrictedMix(BTreeSet<usize>),
}

/// Sample ids of a dataset slice, grouped by class.
#[derive(Clone, Debug)]
pub struct Pool<'a> {
    pub ds: &'a Dataset,
    pub by_class: BTreeMap<usize, Vec<usize>>,
}

impl<'a> Pool<'a> {
    pub fn new(ds: &'a Dataset, ids: &[usize]) -> Self {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in ids {
            by_class.entry(ds.labels()[i]).or_default().push(i);
        }
        for v in by_class.values_mut() {
            v.sort_unstable();
        }
        Pool { ds, by_class }
    }

    fn choose_classes<R: Rng>(&self, spec: &EpisodeSpec, need: usize, constraint: &Constraint, r: &mut R) -> Result<Vec<usize>> {
        let eligible: Vec<usize> = self
            .by_class
            .iter()
            .filter(|(_, v)| v.len() >= need)
            .map(|(&c, _)| c)
            .collect();
        let mut classes = match constraint {
            Constraint::Any => {
                if eligible.len() < spec.n_way {
                    return Err(Error::Constraint(format!(
                        "{}-way episodes need {} classes with {need} samples, pool has {}",
                        spec.n_way,
                        spec.n_way,
                        eligible.len()
                    )));
                }
                eligible.choose_multiple(r, spec.n_way).copied().collect::<Vec<_>>()
            }
            Constraint::RestrictedMix(restricted) => {
                let (inside, outside): (Vec<usize>, Vec<usize>) = eligible.iter().partition(|c| restricted.contains(c));
                if inside.is_empty() || outside.len() + 1 < spec.n_way {
                    return Err(Error::Constraint(format!(
                        "restricted-mix needs 1 restricted and {} other classes with {need} samples; pool has {} and {}",
                        spec.n_way.saturating_sub(1),
                        inside.len(),
                        outside.len()
                    )));
                }
                let mut cs = vec![*inside.choose(r).expect("non-empty")];
                cs.extend(outside.choose_multiple(r, spec.n_way - 1).copied());
                cs
            }
        };
        classes.shuffle(r);
        Ok(classes)
    }

    /// One episode with `k_shot` support and `q_query` query samples per class.
    pub fn sample_episode<R: Rng>(&self, spec: &EpisodeSpec, constraint: &Constraint, r: &mut R) -> Result<Episode> {
        Ok(self.sample_parts(spec, constraint, 1, r)?.pop().expect("one part"))
    }

    /// `D_fsc` and `D_obs` over the same classes, sample-disjoint.
    pub fn sample_task<R: Rng>(&self, spec: &EpisodeSpec, constraint: &Constraint, r: &mut R) -> Result<EpisodeTask> {
        let mut parts = self.sample_parts(spec, constraint, 2, r)?;
        let obs = parts.pop().expect("two parts");
        let fsc = parts.pop().expect("two parts");
        Ok(EpisodeTask { fsc, obs })
    }

    fn sample_parts<R: Rng>(&self, spec: &EpisodeSpec, constraint: &Constraint, parts: usize, r: &mut R) -> Result<Vec<Episode>> {
        if spec.n_way == 0 || spec.k_shot == 0 || spec.q_query == 0 {
            return Err(Error::config("episode", "n_way, k_shot and q_query must be at least 1"));
        }
        let per_part = spec.k_shot + spec.q_query;
        let classes = self.choose_classes(spec, per_part * parts, constraint, r)?;
        let mut support = vec![Vec::new(); parts];
        let mut query = vec![Vec::new(); parts];
        for &c in &classes {
            let picked: Vec<usize> = self.by_class[&c].choose_multiple(r, per_part * parts).copied().collect();
            for p in 0..parts {
                let chunk = &picked[p * per_part..(p + 1) * per_part];
                support[p].extend_from_slice(&chunk[..spec.k_shot]);
                query[p].extend_from_slice(&chunk[spec.k_shot..]);
            }
        }
        support
            .into_iter()
            .zip(query)
            .map(|(s, q)| Episode::from_ids(self.ds, classes.clone(), s, q))
            .collect()
    }
}
