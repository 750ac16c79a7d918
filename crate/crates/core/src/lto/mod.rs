//! The obstruction loop, its objective and the two baselines.

mod attributes;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_through_update, GradMode, Tape, Var};
use crate::data::{Constraint, EpisodeSpec, EpisodeTask, Pool};
use crate::error::{Error, Result};
use crate::learners::{adapt, partitioned_loss, FscAlgorithm, LossParts};
use crate::models::ParamSet;
use crate::rng;
use crate::tensor::Tensor;

pub use attributes::{
    adapt_attributes, attribute_logits, attribute_losses, attribute_restricted_losses, attribute_task_gradient, gen_attributes, init_attribute_heads,
    pretrain_attribute_backbone, run_attribute_lto, AttrDataset, AttrSynthSpec, AttrTask, AttributeConfig,
    AttributeModel, AttributeTaskSource,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Adapt with the learner, then descend `L_R' − L_R` at the adapted parameters.
    Lto,
    /// Ascend `L_R` directly, without adaptation.
    OnlyR,
    /// Descend `L_R' − L_R` directly, without adaptation.
    NoF,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Lto, Method::OnlyR, Method::NoF];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Lto => "lto",
            Method::OnlyR => "only-r",
            Method::NoF => "no-f",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lto" => Ok(Method::Lto),
            "only-r" => Ok(Method::OnlyR),
            "no-f" => Ok(Method::NoF),
            other => Err(Error::config("method", format!("unknown method `{other}`"))),
        }
    }
}

/// Settings of the outer loop shared by class and attribute obstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub method: Method,
    pub steps: usize,
    pub outer_lr: f64,
    pub batch_size: usize,
    pub grad_mode: GradMode,
    pub checkpoint_every: usize,
    /// Carry the head across outer steps instead of restoring it.
    pub persist_phi: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            method: Method::Lto,
            steps: 60,
            outer_lr: 5e-4,
            batch_size: 20,
            grad_mode: GradMode::FirstOrder,
            checkpoint_every: 2,
            persist_phi: false,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.outer_lr >= 0.0 && self.outer_lr.is_finite()) {
            return Err(Error::config("outer_lr", "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be at least 1"));
        }
        Ok(())
    }

    /// Steps at which θ is saved: 0, every `checkpoint_every`, and the last.
    pub fn checkpoint_steps(&self) -> Vec<usize> {
        let mut s: Vec<usize> = (0..=self.steps).step_by(self.checkpoint_every).collect();
        if s.last() != Some(&self.steps) {
            s.push(self.steps);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstructionConfig {
    #[serde(flatten)]
    pub run: LoopConfig,
    pub algorithm: FscAlgorithm,
    pub restricted: BTreeSet<usize>,
}

impl ObstructionConfig {
    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.algorithm.validate()?;
        if self.restricted.is_empty() {
            return Err(Error::config("restricted", "must name at least one class"));
        }
        Ok(())
    }
}

/// One task's contribution `Δθ` (and `Δφ`) plus its objective value.
#[derive(Clone, Debug)]
pub struct TaskGrad {
    pub d_theta: Vec<Tensor>,
    pub d_phi: Vec<Tensor>,
    pub objective: f64,
}

/// Objective recorded on the tape for `method`. OnlyR's is `0 − L_R`, so
/// its descent direction is an ascent on `L_R`.
pub fn outer_objective(tape: &mut Tape, parts: &LossParts, method: Method) -> Result<Var> {
    match method {
        Method::Lto | Method::NoF => tape.sub(parts.other, parts.restricted),
        Method::OnlyR => {
            let zero = tape.constant(Tensor::scalar(0.0));
            tape.sub(zero, parts.restricted)
        }
    }
}

/// `Δθ^(t)` for one classification task.
pub fn task_gradient(theta: &ParamSet, phi: &ParamSet, task: &EpisodeTask, cfg: &ObstructionConfig) -> Result<TaskGrad> {
    let split = theta.len();
    let params: Vec<Tensor> = theta.tensors().iter().chain(phi.tensors()).cloned().collect();
    let alg = &cfg.algorithm;
    let method = cfg.run.method;
    let r = grad_through_update(
        &params,
        cfg.run.grad_mode,
        |tape, vars| match method {
            Method::Lto => {
                let (t, p) = adapt(tape, &vars[..split], &vars[split..], &[&task.fsc], alg)?;
                Ok(t.into_iter().chain(p).collect())
            }
            Method::OnlyR | Method::NoF => Ok(vars),
        },
        |tape, adapted| {
            let parts = partitioned_loss(tape, &adapted[..split], &adapted[split..], &[&task.obs], alg, &|c| {
                cfg.restricted.contains(&c)
            })?;
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

fn sum_in_order(parts: impl Iterator<Item = Vec<Tensor>>) -> Result<Option<Vec<Tensor>>> {
    let mut acc: Option<Vec<Tensor>> = None;
    for g in parts {
        acc = Some(match acc {
            None => g,
            Some(a) => a.iter().zip(&g).map(|(x, y)| x.add(y)).collect::<Result<_>>()?,
        });
    }
    Ok(acc)
}

fn apply(set: &ParamSet, delta: Option<Vec<Tensor>>, lr: f64) -> Result<ParamSet> {
    match delta {
        None => Ok(set.clone()),
        Some(d) => set.with_tensors(
            set.tensors()
                .iter()
                .zip(d)
                .map(|(p, g)| p.sub(&g.scale(lr)))
                .collect::<Result<_>>()?,
        ),
    }
}

/// Outcome of one outer step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub theta: ParamSet,
    pub phi: ParamSet,
    /// Sum of per-task objectives before the update.
    pub objective: f64,
}

/// Sums task contributions in task order and applies `θ ← θ − α Σ Δθ`.
/// `φ` is updated the same way only when `persist_phi` is set.
pub fn reduce_step(theta: &ParamSet, phi: &ParamSet, grads: Vec<TaskGrad>, run: &LoopConfig) -> Result<StepOutcome> {
    let objective = grads.iter().map(|g| g.objective).sum();
    let (dt, dp): (Vec<_>, Vec<_>) = grads.into_iter().map(|g| (g.d_theta, g.d_phi)).unzip();
    let theta = apply(theta, sum_in_order(dt.into_iter())?, run.outer_lr)?;
    let phi = if run.persist_phi {
        apply(phi, sum_in_order(dp.into_iter())?, run.outer_lr)?
    } else {
        phi.clone()
    };
    Ok(StepOutcome { theta, phi, objective })
}

/// Per-task contributions, computed in parallel from the same snapshot and
/// returned in task order. Errors carry the task index.
pub fn batch_gradients(theta: &ParamSet, phi: &ParamSet, batch: &[EpisodeTask], cfg: &ObstructionConfig) -> Result<Vec<TaskGrad>> {
    batch
        .par_iter()
        .enumerate()
        .map(|(i, task)| task_gradient(theta, phi, task, cfg).map_err(|e| e.in_task(i)))
        .collect()
}

/// Head used at the start of a step: the persisted one, or a fresh head.
fn head_for(theta: &ParamSet, phi: Option<&ParamSet>, batch: &[EpisodeTask], alg: &FscAlgorithm) -> ParamSet {
    match phi {
        Some(p) => p.clone(),
        None => {
            let d_emb = theta.tensors().last().map_or(0, |b| b.shape()[1]);
            let n_way = batch.first().map_or(0, |t| t.fsc.n_way());
            alg.init_head(d_emb, n_way)
        }
    }
}

/// One outer step on `batch`. `phi = None` restores a fresh head.
pub fn lto_step(theta: &ParamSet, phi: Option<&ParamSet>, batch: &[EpisodeTask], cfg: &ObstructionConfig) -> Result<StepOutcome> {
    let head = head_for(theta, phi, batch, &cfg.algorithm);
    let grads = batch_gradients(theta, &head, batch, cfg)?;
    reduce_step(theta, &head, grads, &cfg.run)
}

/// Produces the batch for each outer step.
pub trait TaskSource: Sync {
    fn batch(&self, step: usize, size: usize) -> Result<Vec<EpisodeTask>>;
}

/// Restricted-mix tasks drawn from a pool, one seeded stream per step.
pub struct EpisodeStream<'a> {
    pub pool: Pool<'a>,
    pub spec: EpisodeSpec,
    pub constraint: Constraint,
    pub seed: u64,
}

impl TaskSource for EpisodeStream<'_> {
    fn batch(&self, step: usize, size: usize) -> Result<Vec<EpisodeTask>> {
        let mut r = rng::stream(self.seed, "episodes", step as u64);
        (0..size).map(|_| self.pool.sample_task(&self.spec, &self.constraint, &mut r)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub theta: ParamSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub objective: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<StepRecord>,
}

/// Shared outer loop. `step_fn(step, θ, φ)` performs one update.
pub fn run_loop<F>(theta_p: &ParamSet, run: &LoopConfig, mut step_fn: F) -> Result<RunOutput>
where
    F: FnMut(usize, &ParamSet, Option<&ParamSet>) -> Result<StepOutcome>,
{
    run.validate()?;
    let keep: BTreeSet<usize> = run.checkpoint_steps().into_iter().collect();
    let mut theta = theta_p.clone();
    let mut phi: Option<ParamSet> = None;
    let mut checkpoints = vec![Checkpoint {
        step: 0,
        theta: theta.clone(),
    }];
    let mut log = Vec::with_capacity(run.steps);
    for step in 0..run.steps {
        let start = Instant::now();
        let out = step_fn(step, &theta, phi.as_ref())?;
        if !out.objective.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: out.objective,
            });
        }
        theta = out.theta;
        if run.persist_phi {
            phi = Some(out.phi);
        }
        log.push(StepRecord {
            step: step + 1,
            objective: out.objective,
            seconds: start.elapsed().as_secs_f64(),
        });
        if keep.contains(&(step + 1)) {
            checkpoints.push(Checkpoint {
                step: step + 1,
                theta: theta.clone(),
            });
        }
    }
    Ok(RunOutput { checkpoints, log })
}

/// Runs LTO or a baseline, as selected by `cfg.run.method`.
pub fn run_obstruction(theta_p: &ParamSet, cfg: &ObstructionConfig, source: &dyn TaskSource) -> Result<RunOutput> {
    cfg.validate()?;
    run_loop(theta_p, &cfg.run, |step, theta, phi| {
        let batch = source.batch(step, cfg.run.batch_size)?;
        lto_step(theta, phi, &batch, cfg)
    })
}

pub fn run_lto(theta_p: &ParamSet, cfg: &ObstructionConfig, source: &dyn TaskSource) -> Result<RunOutput> {
    run_obstruction(theta_p, &with_method(cfg, Method::Lto), source)
}

pub fn baseline_only_r(theta_p: &ParamSet, cfg: &ObstructionConfig, source: &dyn TaskSource) -> Result<RunOutput> {
    run_obstruction(theta_p, &with_method(cfg, Method::OnlyR), source)
}

pub fn baseline_no_f(theta_p: &ParamSet, cfg: &ObstructionConfig, source: &dyn TaskSource) -> Result<RunOutput> {
    run_obstruction(theta_p, &with_method(cfg, Method::NoF), source)
}

fn with_method(cfg: &ObstructionConfig, method: Method) -> ObstructionConfig {
    let mut c = cfg.clone();
    c.run.method = method;
    c
}

/// `(L_R, L_R')` of a task's `D_obs` at the given parameters.
pub fn restricted_losses(theta: &ParamSet, phi: &ParamSet, obs: &crate::data::Episode, alg: &FscAlgorithm, restricted: &BTreeSet<usize>) -> Result<(f64, f64)> {
    let mut tape = Tape::new(GradMode::FirstOrder);
    let tv: Vec<Var> = theta.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let pv: Vec<Var> = phi.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let parts = partitioned_loss(&mut tape, &tv, &pv, &[obs], alg, &|c| restricted.contains(&c))?;
    Ok((tape.value(parts.restricted).item(), tape.value(parts.other).item()))
}
