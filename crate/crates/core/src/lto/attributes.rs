//! Multi-label variant: obstructing a subset of binary attributes.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_through_update, gradient_steps, GradMode, Tape, Var};
use crate::data::random_direction;
use crate::error::{Error, Result};
use crate::learners::LossParts;
use crate::lto::{outer_objective, reduce_step, run_loop, LoopConfig, Method, RunOutput, StepOutcome, TaskGrad};
use crate::models::{backbone_forward, init_backbone, BackboneSpec, ParamSet};
use crate::rng;
use crate::tensor::Tensor;

/// Features with a full binary attribute vector per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AttrDataset {
    pub features: Tensor,
    /// `n × |A|`, entries 0 or 1.
    pub attrs: Tensor,
}

impl AttrDataset {
    pub fn new(features: Tensor, attrs: Tensor) -> Result<Self> {
        let (n, _) = features.dims2()?;
        let (m, _) = attrs.dims2()?;
        if n != m {
            return Err(Error::InvalidTensor(format!("{n} feature rows but {m} attribute rows")));
        }
        if attrs.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidTensor("attribute entries must be 0 or 1".into()));
        }
        Ok(AttrDataset { features, attrs })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_attrs(&self) -> usize {
        self.attrs.shape()[1]
    }

    pub fn subset(&self, ids: &[usize]) -> Result<AttrDataset> {
        Ok(AttrDataset {
            features: self.features.gather_rows(ids)?,
            attrs: self.attrs.gather_rows(ids)?,
        })
    }

    /// Column `a` of the attribute matrix.
    pub fn column(&self, a: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.attrs.at(i, a)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttrSynthSpec {
    pub n_attrs: usize,
    pub dim: usize,
    pub n_samples: usize,
    /// Distance of each attribute's two states along its direction.
    pub signal: f64,
    pub noise_sigma: f64,
    pub p_on: f64,
    pub seed: u64,
}

/// Each attribute owns a random unit direction `u_a`; a sample is
/// `Σ_a (2y_a − 1)·signal/2·u_a` plus isotropic Gaussian noise.
pub fn gen_attributes(spec: &AttrSynthSpec) -> Result<AttrDataset> {
    if spec.n_attrs == 0 || spec.dim == 0 || spec.n_samples == 0 {
        return Err(Error::config("attributes", "counts must be at least 1"));
    }
    if !(spec.p_on > 0.0 && spec.p_on < 1.0) {
        return Err(Error::config("p_on", "must lie strictly between 0 and 1"));
    }
    let mut geo = rng::stream(spec.seed, "attr.geometry", 0);
    let dirs: Vec<Vec<f64>> = (0..spec.n_attrs).map(|_| random_direction(&mut geo, spec.dim)).collect();
    let noise = rand_distr::Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config("noise_sigma", e.to_string()))?;
    let mut r = rng::stream(spec.seed, "attr.samples", 0);
    let mut feats = Vec::with_capacity(spec.n_samples * spec.dim);
    let mut attrs = Vec::with_capacity(spec.n_samples * spec.n_attrs);
    for _ in 0..spec.n_samples {
        let y: Vec<f64> = (0..spec.n_attrs).map(|_| if r.random::<f64>() < spec.p_on { 1.0 } else { 0.0 }).collect();
        for k in 0..spec.dim {
            let mut v = 0.0;
            for (a, d) in dirs.iter().enumerate() {
                v += (2.0 * y[a] - 1.0) * 0.5 * spec.signal * d[k];
            }
            feats.push(v + rand_distr::Distribution::sample(&noise, &mut r));
        }
        attrs.extend(y);
    }
    AttrDataset::new(
        Tensor::matrix(spec.n_samples, spec.dim, feats)?,
        Tensor::matrix(spec.n_samples, spec.n_attrs, attrs)?,
    )
}

/// Shared backbone, one binary head per attribute, and the restricted set.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeModel {
    pub theta: ParamSet,
    pub phi: ParamSet,
    pub restricted: BTreeSet<usize>,
}

impl AttributeModel {
    pub fn new(theta: ParamSet, phi: ParamSet, restricted: BTreeSet<usize>) -> Result<Self> {
        let n_attrs = phi.len() / 2;
        if phi.len() % 2 != 0 || n_attrs == 0 {
            return Err(Error::InvalidTensor("attribute heads come in weight/bias pairs".into()));
        }
        if restricted.is_empty() || restricted.len() >= n_attrs || restricted.iter().any(|&a| a >= n_attrs) {
            return Err(Error::config("restricted", "must be a non-empty proper subset of the attributes"));
        }
        Ok(AttributeModel { theta, phi, restricted })
    }

    pub fn n_attrs(&self) -> usize {
        self.phi.len() / 2
    }
}

/// Zero heads `head.attr{a}.weight` (`d_emb × 1`) and `.bias` (`1 × 1`).
pub fn init_attribute_heads(d_emb: usize, n_attrs: usize) -> ParamSet {
    let mut phi = ParamSet::new();
    for a in 0..n_attrs {
        phi.push(format!("head.attr{a}.weight"), Tensor::zeros(&[d_emb, 1]));
        phi.push(format!("head.attr{a}.bias"), Tensor::zeros(&[1, 1]));
    }
    phi
}

/// Per-attribute logits `n × 1`, recorded on the tape.
pub fn attribute_logits(tape: &mut Tape, theta: &[Var], phi: &[Var], x: &Tensor) -> Result<Vec<Var>> {
    let xv = tape.constant(x.clone());
    let emb = backbone_forward(tape, theta, xv)?;
    phi.chunks(2)
        .map(|wb| {
            let z = tape.matmul(emb, wb[0])?;
            tape.add_bias(z, wb[1])
        })
        .collect()
}

/// Summed binary cross-entropy per attribute, split into `R` and `R'`.
///
/// BCE is written `softplus(z) − y·z`, which equals `−y log σ(z) − (1−y) log(1−σ(z))`.
pub fn attribute_losses(
    tape: &mut Tape,
    theta: &[Var],
    phi: &[Var],
    data: &AttrDataset,
    restricted: &BTreeSet<usize>,
) -> Result<LossParts> {
    let n_attrs = phi.len() / 2;
    if data.n_attrs() != n_attrs {
        return Err(Error::Shape {
            op: "attribute_losses",
            lhs: vec![data.n_attrs()],
            rhs: vec![n_attrs],
        });
    }
    let logits = attribute_logits(tape, theta, phi, &data.features)?;
    let (mut r_acc, mut o_acc): (Option<Var>, Option<Var>) = (None, None);
    for (a, z) in logits.into_iter().enumerate() {
        let y = tape.constant(Tensor::matrix(data.len(), 1, data.column(a))?);
        let sp = tape.softplus(z)?;
        let yz = tape.mul(y, z)?;
        let bce = tape.sub(sp, yz)?;
        let l = tape.sum(bce)?;
        let slot = if restricted.contains(&a) { &mut r_acc } else { &mut o_acc };
        *slot = Some(match *slot {
            Some(prev) => tape.add(prev, l)?,
            None => l,
        });
    }
    let restricted_v = match r_acc {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let other = match o_acc {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let total = tape.add(restricted_v, other)?;
    Ok(LossParts {
        restricted: restricted_v,
        other,
        total,
    })
}

/// `(L_R, L_R')` at the model's parameters.
pub fn attribute_restricted_losses(model: &AttributeModel, data: &AttrDataset) -> Result<(f64, f64)> {
    let mut tape = Tape::new(GradMode::FirstOrder);
    let tv: Vec<Var> = model.theta.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let pv: Vec<Var> = model.phi.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let parts = attribute_losses(&mut tape, &tv, &pv, data, &model.restricted)?;
    Ok((tape.value(parts.restricted).item(), tape.value(parts.other).item()))
}

/// Inner data and scoring data of one attribute task.
#[derive(Clone, Debug, PartialEq)]
pub struct AttrTask {
    pub fsc: AttrDataset,
    pub obs: AttrDataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeConfig {
    #[serde(flatten)]
    pub run: LoopConfig,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub restricted: BTreeSet<usize>,
}

/// Random disjoint `fsc_size` + `obs_size` subsets of a pool, seeded per step.
pub struct AttributeTaskSource<'a> {
    pub data: &'a AttrDataset,
    pub fsc_size: usize,
    pub obs_size: usize,
    pub seed: u64,
}

impl AttributeTaskSource<'_> {
    pub fn batch(&self, step: usize, size: usize) -> Result<Vec<AttrTask>> {
        let need = self.fsc_size + self.obs_size;
        if need > self.data.len() || self.fsc_size == 0 || self.obs_size == 0 {
            return Err(Error::InsufficientSamples {
                class: 0,
                need,
                have: self.data.len(),
            });
        }
        let mut r = rng::stream(self.seed, "attr.tasks", step as u64);
        let mut ids: Vec<usize> = (0..self.data.len()).collect();
        (0..size)
            .map(|_| {
                ids.shuffle(&mut r);
                Ok(AttrTask {
                    fsc: self.data.subset(&ids[..self.fsc_size])?,
                    obs: self.data.subset(&ids[self.fsc_size..need])?,
                })
            })
            .collect()
    }
}

/// Adapts `θ` and all heads by `steps` gradient steps on the summed BCE.
pub fn adapt_attributes(tape: &mut Tape, theta: &[Var], phi: &[Var], data: &AttrDataset, steps: usize, lr: f64) -> Result<(Vec<Var>, Vec<Var>)> {
    let split = theta.len();
    let none = BTreeSet::new();
    let params: Vec<Var> = theta.iter().chain(phi).copied().collect();
    let out = gradient_steps(tape, params, steps, lr, |t, p| {
        Ok(attribute_losses(t, &p[..split], &p[split..], data, &none)?.total)
    })?;
    Ok((out[..split].to_vec(), out[split..].to_vec()))
}

pub fn attribute_task_gradient(theta: &ParamSet, phi: &ParamSet, task: &AttrTask, cfg: &AttributeConfig) -> Result<TaskGrad> {
    let split = theta.len();
    let params: Vec<Tensor> = theta.tensors().iter().chain(phi.tensors()).cloned().collect();
    let method = cfg.run.method;
    let r = grad_through_update(
        &params,
        cfg.run.grad_mode,
        |tape, vars| match method {
            Method::Lto => {
                let (t, p) = adapt_attributes(tape, &vars[..split], &vars[split..], &task.fsc, cfg.inner_steps, cfg.inner_lr)?;
                Ok(t.into_iter().chain(p).collect())
            }
            Method::OnlyR | Method::NoF => Ok(vars),
        },
        |tape, adapted| {
            let parts = attribute_losses(tape, &adapted[..split], &adapted[split..], &task.obs, &cfg.restricted)?;
            outer_objective(tape, &parts, method)
        },
    )?;
    let mut grads = r.grads;
    let d_phi = grads.split_off(split);
    Ok(TaskGrad {
        d_theta: grads,
        d_phi,
        objective: r.outer_loss,
    })
}

/// Outer loop for attribute obstruction. Each step restores `phi0` unless
/// the head is persisted.
pub fn run_attribute_lto(theta_p: &ParamSet, phi0: &ParamSet, cfg: &AttributeConfig, source: &AttributeTaskSource) -> Result<RunOutput> {
    use rayon::prelude::*;
    run_loop(theta_p, &cfg.run, |step, theta, phi| -> Result<StepOutcome> {
        let head = phi.unwrap_or(phi0);
        let batch = source.batch(step, cfg.run.batch_size)?;
        let grads = batch
            .par_iter()
            .enumerate()
            .map(|(i, t)| attribute_task_gradient(theta, head, t, cfg).map_err(|e| e.in_task(i)))
            .collect::<Result<Vec<_>>>()?;
        reduce_step(theta, head, grads, &cfg.run)
    })
}

/// Joint full-batch pre-training of the backbone and all heads on mean BCE.
pub fn pretrain_attribute_backbone(data: &AttrDataset, spec: &BackboneSpec, epochs: usize, lr: f64) -> Result<(ParamSet, ParamSet)> {
    let theta = init_backbone(spec)?;
    let phi = init_attribute_heads(spec.d_emb(), data.n_attrs());
    let split = theta.len();
    let mut params: Vec<Tensor> = theta.tensors().iter().chain(phi.tensors()).cloned().collect();
    let none = BTreeSet::new();
    let n = data.len() as f64;
    for epoch in 0..epochs {
        let mut tape = Tape::new(GradMode::FirstOrder);
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let total = attribute_losses(&mut tape, &vars[..split], &vars[split..], data, &none)?.total;
        let loss = tape.scale(total, 1.0 / n)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence { step: epoch, loss: value });
        }
        let grads = tape.gradients(loss, &vars)?;
        for (p, g) in params.iter_mut().zip(grads) {
            *p = p.sub(&g.scale(lr))?;
        }
    }
    let heads = params.split_off(split);
    Ok((theta.with_tensors(params)?, phi.with_tensors(heads)?))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{max_relative_error, numerical_gradient};

    fn spec() -> AttrSynthSpec {
        AttrSynthSpec {
            n_attrs: 3,
            dim: 4,
            n_samples: 40,
            signal: 2.0,
            noise_sigma: 0.5,
            p_on: 0.5,
            seed: 3,
        }
    }

    fn theta() -> ParamSet {
        init_backbone(&BackboneSpec {
            widths: vec![4, 3],
            init_seed: 1,
            init_scale: 1.0,
        })
        .unwrap()
    }

    fn random_heads(d: usize, n: usize) -> ParamSet {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let mut phi = init_attribute_heads(d, n);
        for t in phi.tensors_mut() {
            for v in t.data_mut() {
                *v = r.random_range(-1.0..1.0);
            }
        }
        phi
    }

    fn bce_oracle(model: &AttributeModel, data: &AttrDataset, a: usize) -> f64 {
        let emb = crate::models::embed(model.theta.tensors(), &data.features).unwrap();
        let w = &model.phi.tensors()[2 * a];
        let b = model.phi.tensors()[2 * a + 1].item();
        (0..data.len())
            .map(|i| {
                let z: f64 = b + (0..emb.shape()[1]).map(|k| emb.at(i, k) * w.at(k, 0)).sum::<f64>();
                let p = 1.0 / (1.0 + (-z).exp());
                let y = data.attrs.at(i, a);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum()
    }

    #[test]
    fn losses_match_bce_oracle_and_partition() {
        let data = gen_attributes(&spec()).unwrap();
        let model = AttributeModel::new(theta(), random_heads(3, 3), BTreeSet::from([1])).unwrap();
        let (lr, lo) = attribute_restricted_losses(&model, &data).unwrap();
        let oracle: Vec<f64> = (0..3).map(|a| bce_oracle(&model, &data, a)).collect();
        assert!((lr - oracle[1]).abs() < 1e-10 * oracle[1]);
        assert!((lo - (oracle[0] + oracle[2])).abs() < 1e-10 * lo);

        let mut tape = Tape::new(GradMode::FirstOrder);
        let tv: Vec<Var> = model.theta.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let pv: Vec<Var> = model.phi.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let parts = attribute_losses(&mut tape, &tv, &pv, &data, &model.restricted).unwrap();
        assert_eq!(
            (tape.value(parts.restricted).item() + tape.value(parts.other).item()).to_bits(),
            tape.value(parts.total).item().to_bits()
        );
    }

    #[test]
    fn wrong_attribute_width_is_rejected() {
        let data = gen_attributes(&spec()).unwrap();
        let model = AttributeModel::new(theta(), random_heads(3, 4), BTreeSet::from([1])).unwrap();
        assert!(matches!(attribute_restricted_losses(&model, &data), Err(Error::Shape { .. })));
    }

    #[test]
    fn restricted_set_must_be_proper() {
        assert!(AttributeModel::new(theta(), random_heads(3, 2), BTreeSet::from([0, 1])).is_err());
        assert!(AttributeModel::new(theta(), random_heads(3, 2), BTreeSet::new()).is_err());
    }

    #[test]
    fn exact_attribute_gradient_matches_finite_differences() {
        let data = gen_attributes(&spec()).unwrap();
        let source = AttributeTaskSource {
            data: &data,
            fsc_size: 8,
            obs_size: 8,
            seed: 1,
        };
        let task = source.batch(0, 1).unwrap().remove(0);
        let cfg = AttributeConfig {
            run: LoopConfig {
                grad_mode: GradMode::ExactUnrolled,
                ..LoopConfig::default()
            },
            inner_steps: 3,
            inner_lr: 0.05,
            restricted: BTreeSet::from([0]),
        };
        let phi = random_heads(3, 3);
        let g = attribute_task_gradient(&theta(), &phi, &task, &cfg).unwrap();
        let f = |p: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new(GradMode::FirstOrder);
            let tv: Vec<Var> = p.iter().map(|t| tape.leaf(t.clone())).collect();
            let pv: Vec<Var> = phi.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
            let (t2, p2) = adapt_attributes(&mut tape, &tv, &pv, &task.fsc, 3, 0.05)?;
            let parts = attribute_losses(&mut tape, &t2, &p2, &task.obs, &cfg.restricted)?;
            Ok(tape.value(parts.other).item() - tape.value(parts.restricted).item())
        };
        let fd = numerical_gradient(f, theta().tensors(), 1e-5).unwrap();
        let err = max_relative_error(&g.d_theta, &fd);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn pretraining_learns_attributes() {
        let data = gen_attributes(&AttrSynthSpec { n_samples: 200, ..spec() }).unwrap();
        let s = BackboneSpec {
            widths: vec![4, 8, 4],
            init_seed: 2,
            init_scale: 1.0,
        };
        let (t0, p0) = pretrain_attribute_backbone(&data, &s, 0, 0.1).unwrap();
        let (t1, p1) = pretrain_attribute_backbone(&data, &s, 300, 0.1).unwrap();
        let none = BTreeSet::from([0]);
        let before = attribute_restricted_losses(&AttributeModel::new(t0, p0, none.clone()).unwrap(), &data).unwrap();
        let after = attribute_restricted_losses(&AttributeModel::new(t1, p1, none).unwrap(), &data).unwrap();
        assert!(after.0 + after.1 < 0.5 * (before.0 + before.1));
    }
}
