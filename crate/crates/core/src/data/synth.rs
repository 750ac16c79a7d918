use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Parameters of the superclass-structured Gaussian generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_super: usize,
    pub classes_per_super: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub super_sep: f64,
    pub class_sep: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("supers", self.n_super),
            ("classes", self.classes_per_super),
            ("dim", self.dim),
            ("per_class", self.samples_per_class),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        for (field, v) in [("super_sep", self.super_sep), ("class_sep", self.class_sep)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be non-negative"));
        }
        Ok(())
    }
}

pub(crate) fn random_direction<R: Rng>(r: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Class means and the generated dataset. Class `c` belongs to superclass
/// `c / classes_per_super`; rows are grouped by class.
pub fn gen_synthetic_with_means(spec: &SynthSpec) -> Result<(Dataset, Vec<Vec<f64>>)> {
    spec.validate()?;
    let mut geo = rng::stream(spec.seed, "data.geometry", 0);
    let n_classes = spec.n_super * spec.classes_per_super;
    let mut means = Vec::with_capacity(n_classes);
    let mut taxonomy = BTreeMap::new();
    for s in 0..spec.n_super {
        let centre: Vec<f64> = random_direction(&mut geo, spec.dim)
            .into_iter()
            .map(|x| x * spec.super_sep)
            .collect();
        for k in 0..spec.classes_per_super {
            let offset = random_direction(&mut geo, spec.dim);
            means.push(centre.iter().zip(&offset).map(|(c, o)| c + o * spec.class_sep).collect::<Vec<_>>());
            taxonomy.insert(s * spec.classes_per_super + k, s);
        }
    }
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config("noise_sigma", e.to_string()))?;
    let mut data = Vec::with_capacity(n_classes * spec.samples_per_class * spec.dim);
    let mut labels = Vec::with_capacity(n_classes * spec.samples_per_class);
    for (c, mean) in means.iter().enumerate() {
        let mut r = rng::stream(spec.seed, "data.samples", c as u64);
        for _ in 0..spec.samples_per_class {
            for &m in mean {
                data.push(if spec.noise_sigma == 0.0 { m } else { m + noise.sample(&mut r) });
            }
            labels.push(c);
        }
    }
    let features = Tensor::matrix(labels.len(), spec.dim, data)?;
    Ok((Dataset::new(features, labels, taxonomy)?, means))
}

pub fn gen_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    Ok(gen_synthetic_with_means(spec)?.0)
}
