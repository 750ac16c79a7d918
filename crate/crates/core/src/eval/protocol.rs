use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMode, Tape, Var};
use crate::data::{Constraint, Dataset, Episode, EpisodeSpec, Pool, SplitBundle, SplitMode};
use crate::error::{Error, Result};
use crate::eval::metrics::{auroc, Counts};
use crate::learners::{fsc_loss, learner_f, predict, FscAlgorithm, LearnerKind};
use crate::lto::{adapt_attributes, attribute_logits, init_attribute_heads, AttrDataset};
use crate::models::{ModelParams, ParamSet};
use crate::rng;
use crate::tensor::Tensor;

/// Fewest test episodes a classical evaluation may average over.
pub const MIN_EVAL_EPISODES: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub spec: EpisodeSpec,
    /// Episodic training steps on `D_F` before testing (ProtoNet and ridge).
    pub train_steps: usize,
    /// Step size on the mean query loss.
    pub train_lr: f64,
    pub train_batch: usize,
    /// Distinct `D_F` training episodes at `m_data = 1`.
    pub train_tasks: usize,
    /// Classical mode: `D_F` samples per class at `m_data = 1`; `m_data`
    /// then takes the first `f_per_class·m_data` draws. Without it every
    /// `D_F` sample is used and `m_data` multiplies `train_tasks` instead.
    pub f_per_class: Option<usize>,
    pub m_data: usize,
    pub m_time: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: MIN_EVAL_EPISODES,
            spec: EpisodeSpec::default(),
            train_steps: 400,
            train_lr: 0.5,
            train_batch: 4,
            train_tasks: 100,
            f_per_class: None,
            m_data: 1,
            m_time: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_data == 0 || self.m_time == 0 {
            return Err(Error::config("m_data/m_time", "multipliers must be at least 1"));
        }
        if self.f_per_class == Some(0) {
            return Err(Error::config("f_per_class", "must be at least 1"));
        }
        if self.train_steps > 0 && (self.train_batch == 0 || self.train_tasks == 0) {
            return Err(Error::config("train_batch/train_tasks", "must be at least 1 when training"));
        }
        if !(self.train_lr >= 0.0 && self.train_lr.is_finite()) {
            return Err(Error::config("train_lr", format!("{} must be finite and non-negative", self.train_lr)));
        }
        Ok(())
    }
}

/// Query counts split by whether the true class is restricted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FscAccuracy {
    pub restricted: Counts,
    pub other: Counts,
}

impl FscAccuracy {
    pub fn add(self, o: FscAccuracy) -> FscAccuracy {
        FscAccuracy {
            restricted: self.restricted.add(o.restricted),
            other: self.other.add(o.other),
        }
    }

    pub fn acc_r(&self) -> f64 {
        self.restricted.percent()
    }

    pub fn acc_rp(&self) -> f64 {
        self.other.percent()
    }
}

/// Counts correct argmax predictions on one episode.
pub fn score_episode(theta: &[Tensor], phi: &[Tensor], ep: &Episode, alg: &FscAlgorithm, restricted: &BTreeSet<usize>) -> Result<FscAccuracy> {
    let pred = predict(theta, phi, ep, alg)?.argmax();
    let mut acc = FscAccuracy::default();
    for (&p, &y) in pred.iter().zip(&ep.query_y) {
        let hit = Counts {
            correct: (p == y) as u64,
            total: 1,
        };
        let slot = if restricted.contains(&ep.classes[y]) {
            &mut acc.restricted
        } else {
            &mut acc.other
        };
        *slot = slot.add(hit);
    }
    Ok(acc)
}

/// Episodic gradient descent on `θ` over `D_F`, for head-free learners.
pub fn meta_train(theta: &ParamSet, alg: &FscAlgorithm, ds: &Dataset, f_ids: &[usize], cfg: &EvalConfig, seed: u64) -> Result<ParamSet> {
    let steps = cfg.train_steps * cfg.m_time;
    if steps == 0 || alg.kind == LearnerKind::LinearCe {
        return Ok(theta.clone());
    }
    let pool = Pool::new(ds, f_ids);
    let n_tasks = if cfg.f_per_class.is_some() { cfg.train_tasks } else { cfg.train_tasks * cfg.m_data };
    let tasks: Vec<Episode> = (0..n_tasks)
        .map(|i| pool.sample_episode(&cfg.spec, &Constraint::Any, &mut rng::stream(seed, "eval.train", i as u64)))
        .collect::<Result<_>>()?;
    let mut current = theta.clone();
    for step in 0..steps {
        let batch: Vec<&Episode> = (0..cfg.train_batch).map(|j| &tasks[(step * cfg.train_batch + j) % n_tasks]).collect();
        let n_queries: usize = batch.iter().map(|e| e.n_query()).sum();
        let mut tape = Tape::new(GradMode::FirstOrder);
        let vars: Vec<Var> = current.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
        let total = fsc_loss(&mut tape, &vars, &[], &batch, alg)?;
        let loss = tape.scale(total, 1.0 / n_queries as f64)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        let grads = tape.gradients(loss, &vars)?;
        current = current.with_tensors(
            current
                .tensors()
                .iter()
                .zip(&grads)
                .map(|(p, g)| p.sub(&g.scale(cfg.train_lr)))
                .collect::<Result<_>>()?,
        )?;
    }
    Ok(current)
}

fn time_scaled(alg: &FscAlgorithm, m_time: usize) -> FscAlgorithm {
    FscAlgorithm {
        inner_steps: alg.inner_steps * m_time,
        ..alg.clone()
    }
}

/// Runs the learner's per-episode adaptation on `fit`, returning adapted `(θ, φ)`.
fn fit_episode(theta: &ParamSet, alg: &FscAlgorithm, fit: &Episode) -> Result<ModelParams> {
    let d_emb = theta.tensors().last().map(|b| b.numel()).unwrap_or(0);
    let start = ModelParams::new(theta.clone(), alg.init_head(d_emb, fit.n_way()))?;
    learner_f(&start, &[fit], alg, false)
}

/// Top-1 accuracy on `D_eval`, split into restricted and other query samples.
///
/// Classical mode trains on `D_F` episodes, then averages over restricted-mix
/// test episodes; linear-ce fits a fresh head on each test support set.
/// Clip-style mode adapts once on the `D_F` shots and tests on all of `D_eval`.
pub fn evaluate_fsc(
    theta: &ParamSet,
    alg: &FscAlgorithm,
    ds: &Dataset,
    bundle: &SplitBundle,
    restricted: &BTreeSet<usize>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<FscAccuracy> {
    cfg.validate()?;
    alg.validate()?;
    let f_ids = match (cfg.f_per_class, &bundle.mode) {
        (Some(n), SplitMode::Classical { .. }) => bundle.f_first(n * cfg.m_data)?,
        _ => bundle.f_with_multiplier(cfg.m_data)?,
    };
    let adapt_alg = time_scaled(alg, cfg.m_time);
    match bundle.mode {
        SplitMode::Classical { .. } => {
            if cfg.episodes < MIN_EVAL_EPISODES {
                return Err(Error::InsufficientEpisodes {
                    got: cfg.episodes,
                    min: MIN_EVAL_EPISODES,
                });
            }
            let trained = meta_train(theta, alg, ds, &f_ids, cfg, seed)?;
            let pool = Pool::new(ds, &bundle.eval);
            let constraint = Constraint::RestrictedMix(restricted.clone());
            let per_episode: Vec<FscAccuracy> = (0..cfg.episodes)
                .into_par_iter()
                .map(|i| {
                    let ep = pool.sample_episode(&cfg.spec, &constraint, &mut rng::stream(seed, "eval.episodes", i as u64))?;
                    if alg.kind == LearnerKind::LinearCe {
                        let fit = Episode::from_ids(ds, ep.classes.clone(), ep.support_ids.clone(), ep.support_ids.clone())?;
                        let adapted = fit_episode(&trained, &adapt_alg, &fit)?;
                        score_episode(adapted.theta.tensors(), adapted.phi.tensors(), &ep, alg, restricted)
                    } else {
                        score_episode(trained.tensors(), &[], &ep, alg, restricted)
                    }
                })
                .collect::<Result<_>>()?;
            Ok(per_episode.into_iter().fold(FscAccuracy::default(), FscAccuracy::add))
        }
        SplitMode::ClipStyle { .. } => {
            let classes = bundle.f_classes.clone();
            let fit = Episode::from_ids(ds, classes.clone(), f_ids.clone(), f_ids.clone())?;
            let adapted = fit_episode(theta, &adapt_alg, &fit)?;
            let test = Episode::from_ids(ds, classes, f_ids, bundle.eval.clone())?;
            score_episode(adapted.theta.tensors(), adapted.phi.tensors(), &test, alg, restricted)
        }
    }
}

/// Per-attribute AUROC on `test` after fitting fresh heads (jointly with `θ`) on `train`.
pub fn evaluate_attributes(theta: &ParamSet, train: &AttrDataset, test: &AttrDataset, steps: usize, lr: f64) -> Result<Vec<f64>> {
    let d_emb = theta.tensors().last().map(|b| b.numel()).unwrap_or(0);
    let heads = init_attribute_heads(d_emb, train.n_attrs());
    let mut tape = Tape::new(GradMode::FirstOrder);
    let tv: Vec<Var> = theta.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
    let pv: Vec<Var> = heads.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
    let (t2, p2) = adapt_attributes(&mut tape, &tv, &pv, train, steps, lr)?;
    let logits = attribute_logits(&mut tape, &t2, &p2, &test.features)?;
    (0..test.n_attrs())
        .map(|a| {
            let labels: Vec<bool> = test.column(a).iter().map(|&y| y == 1.0).collect();
            auroc(tape.value(logits[a]).data(), &labels)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, make_splits, RestrictedSet, SynthSpec};
    use crate::lto::{gen_attributes, AttrSynthSpec};
    use crate::models::{init_backbone, BackboneSpec};

    fn setup() -> (Dataset, RestrictedSet, SplitBundle) {
        let ds = gen_synthetic(&SynthSpec {
            n_super: 5,
            classes_per_super: 4,
            dim: 4,
            samples_per_class: 60,
            super_sep: 4.0,
            class_sep: 2.0,
            noise_sigma: 0.3,
            seed: 11,
        })
        .unwrap();
        let r = RestrictedSet::from_superclass(&ds, 0).unwrap();
        let b = make_splits(&ds, &r, &SplitMode::classical(), 5).unwrap();
        (ds, r, b)
    }

    fn theta(scale: f64) -> ParamSet {
        init_backbone(&BackboneSpec {
            widths: vec![4, 8, 4],
            init_seed: 2,
            init_scale: scale,
        })
        .unwrap()
    }

    #[test]
    fn zero_backbone_is_at_chance() {
        let (ds, r, b) = setup();
        let cfg = EvalConfig {
            train_steps: 0,
            ..EvalConfig::default()
        };
        let alg = FscAlgorithm::new(LearnerKind::Protonet, 0, 0.0);
        let acc = evaluate_fsc(&theta(0.0), &alg, &ds, &b, &r.restricted, &cfg, 1).unwrap();
        let all = acc.restricted.add(acc.other);
        let p = 0.2;
        let sigma = (p * (1.0 - p) / all.total as f64).sqrt();
        let rate = all.correct as f64 / all.total as f64;
        assert!((rate - p).abs() < 3.0 * sigma, "rate {rate}");
    }

    #[test]
    fn hand_counted_fixture() {
        let theta = vec![Tensor::eye(2).scale(0.25), Tensor::zeros(&[1, 2])];
        let ep = Episode::new(
            vec![7, 9],
            Tensor::from_rows(&[vec![0.0, 0.0], vec![4.0, 0.0]]).unwrap(),
            &[7, 9],
            Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0], vec![2.5, 0.0], vec![0.5, 0.0]]).unwrap(),
            &[7, 9, 7, 7],
        )
        .unwrap();
        let alg = FscAlgorithm::new(LearnerKind::Protonet, 0, 0.0);
        let acc = score_episode(&theta, &[], &ep, &alg, &BTreeSet::from([9])).unwrap();
        assert_eq!(acc.restricted, Counts { correct: 1, total: 1 });
        assert_eq!(acc.other, Counts { correct: 2, total: 3 });
    }

    #[test]
    fn same_seed_same_accuracy() {
        let (ds, r, b) = setup();
        let cfg = EvalConfig {
            train_steps: 3,
            ..EvalConfig::default()
        };
        let alg = FscAlgorithm::new(LearnerKind::Protonet, 0, 0.0);
        let a = evaluate_fsc(&theta(1.0), &alg, &ds, &b, &r.restricted, &cfg, 4).unwrap();
        let c = evaluate_fsc(&theta(1.0), &alg, &ds, &b, &r.restricted, &cfg, 4).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.restricted.total, 200 * 15);
    }

    #[test]
    fn too_few_episodes_rejected() {
        let (ds, r, b) = setup();
        let cfg = EvalConfig {
            episodes: 50,
            ..EvalConfig::default()
        };
        let alg = FscAlgorithm::new(LearnerKind::Protonet, 0, 0.0);
        let err = evaluate_fsc(&theta(1.0), &alg, &ds, &b, &r.restricted, &cfg, 4).unwrap_err();
        assert!(matches!(err, Error::InsufficientEpisodes { got: 50, min: 200 }));
    }

    #[test]
    fn linear_ce_fits_per_episode() {
        let (ds, r, b) = setup();
        let cfg = EvalConfig::default();
        let alg = FscAlgorithm::new(LearnerKind::LinearCe, 10, 0.05);
        let acc = evaluate_fsc(&theta(1.0), &alg, &ds, &b, &r.restricted, &cfg, 4).unwrap();
        assert!(acc.acc_rp() > 40.0, "{}", acc.acc_rp());
    }

    #[test]
    fn clip_style_uses_all_eval_samples() {
        let (ds, r, _) = setup();
        let mode = SplitMode::ClipStyle {
            a_shots: 5,
            f_shots: 2,
            max_multiplier: 4,
        };
        let b = make_splits(&ds, &r, &mode, 5).unwrap();
        let alg = FscAlgorithm::new(LearnerKind::LinearCe, 5, 0.1);
        let acc = evaluate_fsc(&theta(1.0), &alg, &ds, &b, &r.restricted, &EvalConfig::default(), 1).unwrap();
        assert_eq!((acc.restricted.total + acc.other.total) as usize, b.eval.len());
    }

    #[test]
    fn attribute_auroc_above_chance_after_fit() {
        let data = gen_attributes(&AttrSynthSpec {
            n_attrs: 3,
            dim: 6,
            n_samples: 200,
            signal: 3.0,
            noise_sigma: 0.5,
            p_on: 0.5,
            seed: 3,
        })
        .unwrap();
        let train = data.subset(&(0..100).collect::<Vec<_>>()).unwrap();
        let test = data.subset(&(100..200).collect::<Vec<_>>()).unwrap();
        let theta = init_backbone(&BackboneSpec {
            widths: vec![6, 8],
            init_seed: 1,
            init_scale: 1.0,
        })
        .unwrap();
        let aucs = evaluate_attributes(&theta, &train, &test, 30, 0.01).unwrap();
        assert_eq!(aucs.len(), 3);
        assert!(aucs.iter().all(|&a| a > 0.8), "{aucs:?}");
    }
}
