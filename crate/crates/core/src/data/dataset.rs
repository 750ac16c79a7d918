use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled feature vectors with a class → superclass taxonomy.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    taxonomy: BTreeMap<usize, usize>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, taxonomy: BTreeMap<usize, usize>) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if n != labels.len() {
            return Err(Error::InvalidTensor(format!("{n} feature rows but {} labels", labels.len())));
        }
        if let Some(&c) = labels.iter().find(|c| !taxonomy.contains_key(c)) {
            return Err(Error::Degenerate(format!("class {c} has no superclass")));
        }
        Ok(Dataset {
            features,
            labels,
            taxonomy,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn taxonomy(&self) -> &BTreeMap<usize, usize> {
        &self.taxonomy
    }

    pub fn superclass_of(&self, class: usize) -> Option<usize> {
        self.taxonomy.get(&class).copied()
    }

    /// Class ids present in the data, ascending.
    pub fn classes(&self) -> Vec<usize> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn superclasses(&self) -> Vec<usize> {
        self.taxonomy.values().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Sample indices per class, each list ascending.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in self.labels.iter().enumerate() {
            m.entry(y).or_default().push(i);
        }
        m
    }

    /// Feature rows for the given sample indices.
    pub fn rows(&self, idx: &[usize]) -> Result<Tensor> {
        self.features.gather_rows(idx)
    }
}

/// Restricted classes `R` (one whole superclass) and the complement `R'`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestrictedSet {
    pub superclass: usize,
    pub restricted: BTreeSet<usize>,
    pub others: BTreeSet<usize>,
}

impl RestrictedSet {
    /// All classes of `superclass` go to `R`, every other class to `R'`.
    pub fn from_superclass(ds: &Dataset, superclass: usize) -> Result<Self> {
        let mut restricted = BTreeSet::new();
        let mut others = BTreeSet::new();
        for (&c, &s) in ds.taxonomy() {
            if s == superclass {
                restricted.insert(c);
            } else {
                others.insert(c);
            }
        }
        if restricted.is_empty() {
            return Err(Error::config("restricted", format!("superclass {superclass} has no classes")));
        }
        if others.is_empty() {
            return Err(Error::config("restricted", "no classes left outside the restricted superclass"));
        }
        Ok(RestrictedSet {
            superclass,
            restricted,
            others,
        })
    }

    pub fn is_restricted(&self, class: usize) -> bool {
        self.restricted.contains(&class)
    }
}
