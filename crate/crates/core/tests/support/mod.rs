//! Measurements shared by the identity tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeSet;

use lto_core::autodiff::{finite_diff_check, max_relative_error, numerical_gradient, GradMode, Tape, Var};
use lto_core::data::{gen_synthetic, Constraint, Dataset, Episode, EpisodeSpec, EpisodeTask, Pool, RestrictedSet, SynthSpec};
use lto_core::learners::{learner_f, partitioned_loss, predict, ridge_fit, FscAlgorithm, LearnerKind};
use lto_core::lto::{
    lto_step, restricted_losses, run_obstruction, task_gradient, EpisodeStream, LoopConfig, Method, ObstructionConfig, TaskSource,
};
use lto_core::models::{embed, init_backbone, BackboneSpec, ModelParams, ParamSet};
use lto_core::{Result, Tensor};

pub const RESTRICTED: [usize; 3] = [0, 1, 2];

pub fn dataset(seed: u64) -> Dataset {
    gen_synthetic(&SynthSpec {
        n_super: 3,
        classes_per_super: 3,
        dim: 3,
        samples_per_class: 20,
        super_sep: 3.0,
        class_sep: 1.0,
        noise_sigma: 0.5,
        seed,
    })
    .unwrap()
}

pub fn theta(seed: u64) -> ParamSet {
    init_backbone(&BackboneSpec {
        widths: vec![3, 4, 3],
        init_seed: seed,
        init_scale: 1.0,
    })
    .unwrap()
}

pub fn config(kind: LearnerKind, k: usize, mode: GradMode, method: Method) -> ObstructionConfig {
    let mut alg = FscAlgorithm::new(kind, k, 0.05);
    alg.ridge_lambda = 0.5;
    ObstructionConfig {
        run: LoopConfig {
            method,
            steps: 2,
            outer_lr: 0.01,
            batch_size: 3,
            grad_mode: mode,
            checkpoint_every: 1,
            persist_phi: false,
        },
        algorithm: alg,
        restricted: BTreeSet::from(RESTRICTED),
    }
}

pub fn stream(ds: &Dataset, seed: u64) -> EpisodeStream<'_> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let r = RestrictedSet::from_superclass(ds, 0).unwrap();
    EpisodeStream {
        pool: Pool::new(ds, &all),
        spec: EpisodeSpec {
            n_way: 3,
            k_shot: 2,
            q_query: 3,
        },
        constraint: Constraint::RestrictedMix(r.restricted),
        seed,
    }
}

fn drop_structural_zeros(a: Vec<Tensor>, n: Vec<Tensor>) -> (Vec<Tensor>, Vec<Tensor>) {
    // Prototype distances cancel a shared output bias, so that gradient is
    // identically zero and its difference quotient is rounding noise.
    a.into_iter().zip(n).filter(|(a, n)| a.max_abs() > 1e-9 || n.max_abs() > 1e-9).unzip()
}

fn composed_objective(theta0: &ParamSet, params: &[Tensor], task: &EpisodeTask, cfg: &ObstructionConfig) -> Result<f64> {
    let p = ModelParams {
        theta: theta0.with_tensors(params.to_vec())?,
        phi: cfg.algorithm.init_head(3, task.fsc.n_way()),
    };
    let adapted = learner_f(&p, &[&task.fsc], &cfg.algorithm, false)?;
    let (lr, lo) = restricted_losses(&adapted.theta, &adapted.phi, &task.obs, &cfg.algorithm, &cfg.restricted)?;
    Ok(lo - lr)
}

/// Worst relative error of the exact-unrolled LTO gradient against central
/// differences of the composed objective, over every learner and `tasks` tasks.
pub fn exact_unrolled_error(tasks: usize, k: usize) -> f64 {
    let ds = dataset(4);
    let src = stream(&ds, 5);
    let th = theta(2);
    let mut worst = 0.0f64;
    for task in src.batch(0, tasks).unwrap() {
        for kind in LearnerKind::ALL {
            let cfg = config(kind, k, GradMode::ExactUnrolled, Method::Lto);
            let head = cfg.algorithm.init_head(3, task.fsc.n_way());
            let g = task_gradient(&th, &head, &task, &cfg).unwrap();
            let fd = numerical_gradient(|p| composed_objective(&th, p, &task, &cfg), th.tensors(), 1e-5).unwrap();
            let (g, fd) = drop_structural_zeros(g.d_theta, fd);
            worst = worst.max(max_relative_error(&g, &fd));
        }
    }
    worst
}

/// Worst relative error of plain backward on the query loss against central differences.
pub fn plain_backward_error(tasks: usize) -> f64 {
    let ds = dataset(4);
    let src = stream(&ds, 6);
    let th = theta(3);
    let mut worst = 0.0f64;
    for task in src.batch(0, tasks).unwrap() {
        for kind in LearnerKind::ALL {
            let alg = config(kind, 0, GradMode::FirstOrder, Method::Lto).algorithm;
            let mut head = alg.init_head(3, task.fsc.n_way());
            for (i, t) in head.tensors_mut().iter_mut().enumerate() {
                *t = t.map(|_| 0.1 * (i as f64 + 1.0));
            }
            let split = th.len();
            let params: Vec<Tensor> = th.tensors().iter().chain(head.tensors()).cloned().collect();
            let f = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
                Ok(partitioned_loss(tape, &v[..split], &v[split..], &[&task.obs], &alg, &|_| false)?.total)
            };
            // Bias gradients that cancel structurally are excluded the same way.
            let mut tape = Tape::new(GradMode::FirstOrder);
            let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
            let out = f(&mut tape, &vars).unwrap();
            let analytic = tape.gradients(out, &vars).unwrap();
            if analytic.iter().all(|g| g.max_abs() > 1e-9) {
                worst = worst.max(finite_diff_check(f, &params, 1e-5).unwrap());
            } else {
                let eval = |ps: &[Tensor]| -> Result<f64> {
                    let mut t = Tape::new(GradMode::FirstOrder);
                    let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
                    let o = f(&mut t, &vs)?;
                    Ok(t.value(o).item())
                };
                let fd = numerical_gradient(eval, &params, 1e-5).unwrap();
                let (a, n) = drop_structural_zeros(analytic, fd);
                worst = worst.max(max_relative_error(&a, &n));
            }
        }
    }
    worst
}

/// Outcome of the reduction identities on one configuration.
#[derive(Debug)]
pub struct IdentityCheck {
    pub label: String,
    pub no_f_matches: bool,
    pub only_r_matches: bool,
}

fn restricted_queries_only(ds: &Dataset, t: EpisodeTask) -> EpisodeTask {
    let ids: Vec<usize> = t.obs.query_ids.iter().copied().filter(|&i| RESTRICTED.contains(&ds.labels()[i])).collect();
    let obs = Episode::from_ids(ds, t.obs.classes.clone(), t.obs.support_ids.clone(), ids).unwrap();
    EpisodeTask { obs, ..t }
}

/// NoF against LTO with `K = 0`, and OnlyR against LTO with `K = 0` when
/// `D_obs` holds only restricted queries, on `n` configurations.
pub fn reduction_identities(n: usize) -> Vec<IdentityCheck> {
    (0..n)
        .map(|i| {
            let kind = LearnerKind::ALL[i % 3];
            let mode = if i % 2 == 0 { GradMode::FirstOrder } else { GradMode::ExactUnrolled };
            let seed = i as u64;
            let ds = dataset(100 + seed);
            let src = stream(&ds, seed);
            let th = theta(seed);
            let lto0 = run_obstruction(&th, &config(kind, 0, mode, Method::Lto), &src).unwrap();
            let nof = run_obstruction(&th, &config(kind, 1 + i % 4, mode, Method::NoF), &src).unwrap();
            let batch: Vec<EpisodeTask> = src
                .batch(7, 3)
                .unwrap()
                .into_iter()
                .map(|t| restricted_queries_only(&ds, t))
                .filter(|t| t.obs.n_query() > 0)
                .collect();
            let a = lto_step(&th, None, &batch, &config(kind, 0, mode, Method::Lto)).unwrap();
            let b = lto_step(&th, None, &batch, &config(kind, 0, mode, Method::OnlyR)).unwrap();
            IdentityCheck {
                label: format!("{kind}/{mode:?}/seed{seed}"),
                no_f_matches: lto0.checkpoints == nof.checkpoints,
                only_r_matches: a.theta.bits_eq(&b.theta),
            }
        })
        .collect()
}

/// Decomposition of the query loss on `n` episodes. Returns how many have
/// `total` bit-equal to `restricted + other`, and the worst relative gap to
/// an independent sum of `−ln p` computed from the predictions.
pub fn decomposition(n: usize) -> (usize, f64) {
    let ds = dataset(11);
    let src = stream(&ds, 12);
    let th = theta(13);
    let restricted = |c: usize| RESTRICTED.contains(&c);
    let (mut exact, mut worst) = (0usize, 0.0f64);
    for (i, task) in src.batch(0, n).unwrap().into_iter().enumerate() {
        let kind = LearnerKind::ALL[i % 3];
        let alg = config(kind, 0, GradMode::FirstOrder, Method::Lto).algorithm;
        let head = alg.init_head(3, task.obs.n_way());
        let mut tape = Tape::new(GradMode::FirstOrder);
        let tv: Vec<Var> = th.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
        let pv: Vec<Var> = head.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
        let parts = partitioned_loss(&mut tape, &tv, &pv, &[&task.obs], &alg, &restricted).unwrap();
        let (r, o, t) = (tape.value(parts.restricted).item(), tape.value(parts.other).item(), tape.value(parts.total).item());
        if t.to_bits() == (r + o).to_bits() {
            exact += 1;
        }
        let p = predict(th.tensors(), head.tensors(), &task.obs, &alg).unwrap();
        let (mut ir, mut io) = (0.0, 0.0);
        for q in 0..task.obs.n_query() {
            let nll = -p.probabilities.at(q, task.obs.query_y[q]).ln();
            if restricted(task.obs.classes[task.obs.query_y[q]]) {
                ir += nll;
            } else {
                io += nll;
            }
        }
        for (a, b) in [(r, ir), (o, io), (t, ir + io)] {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    (exact, worst)
}

/// Largest gap between ProtoNet probabilities and a direct computation from
/// embeddings, class means, squared distances and a softmax.
pub fn protonet_oracle_error(episodes: usize) -> f64 {
    let ds = dataset(21);
    let src = stream(&ds, 22);
    let th = theta(23);
    let alg = FscAlgorithm::new(LearnerKind::Protonet, 0, 0.0);
    let mut worst = 0.0f64;
    for task in src.batch(0, episodes).unwrap() {
        let ep = &task.obs;
        let s = embed(th.tensors(), &ep.support_x).unwrap();
        let q = embed(th.tensors(), &ep.query_x).unwrap();
        let d = s.shape()[1];
        let protos: Vec<Vec<f64>> = (0..ep.n_way())
            .map(|c| {
                let rows: Vec<usize> = (0..ep.support_y.len()).filter(|&i| ep.support_y[i] == c).collect();
                (0..d).map(|j| rows.iter().map(|&i| s.at(i, j)).sum::<f64>() / rows.len() as f64).collect()
            })
            .collect();
        let got = predict(th.tensors(), &[], ep, &alg).unwrap().probabilities;
        for i in 0..ep.n_query() {
            let logits: Vec<f64> = protos.iter().map(|p| -(0..d).map(|j| (q.at(i, j) - p[j]).powi(2)).sum::<f64>()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for (c, l) in logits.iter().enumerate() {
                worst = worst.max((got.at(i, c) - (l - m).exp() / z).abs());
            }
        }
    }
    worst
}

/// Largest residual of `(XᵀX + λI) W = XᵀY` for the ridge head, over `trials` random problems.
pub fn ridge_residual(trials: usize) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (n, d, c) = (rng.random_range(2..12), rng.random_range(1..6), rng.random_range(2..5));
        let lambda = rng.random_range(0.01..2.0);
        let x = Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let y = Tensor::one_hot(&labels, c).unwrap();
        let w = ridge_fit(&x, &y, lambda).unwrap();
        for a in 0..d {
            for k in 0..c {
                let mut lhs = lambda * w.at(a, k);
                for b in 0..d {
                    let g: f64 = (0..n).map(|i| x.at(i, a) * x.at(i, b)).sum();
                    lhs += g * w.at(b, k);
                }
                let rhs: f64 = (0..n).map(|i| x.at(i, a) * y.at(i, k)).sum();
                worst = worst.max((lhs - rhs).abs());
            }
        }
    }
    worst
}
