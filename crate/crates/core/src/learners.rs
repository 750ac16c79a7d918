//! Few-shot classification algorithms: predictors over episodes and the
//! inner learner that adapts parameters by unrolled gradient steps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient_steps, GradMode, Tape, Var};
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::models::{backbone_forward, ModelParams, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerKind {
    Protonet,
    LinearCe,
    Ridge,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 3] = [LearnerKind::Protonet, LearnerKind::LinearCe, LearnerKind::Ridge];
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LearnerKind::Protonet => "protonet",
            LearnerKind::LinearCe => "linear-ce",
            LearnerKind::Ridge => "ridge",
        })
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "protonet" => Ok(LearnerKind::Protonet),
            "linear-ce" => Ok(LearnerKind::LinearCe),
            "ridge" => Ok(LearnerKind::Ridge),
            other => Err(Error::config("learner", format!("unknown learner `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FscAlgorithm {
    pub kind: LearnerKind,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub ridge_lambda: f64,
}

impl FscAlgorithm {
    pub fn new(kind: LearnerKind, inner_steps: usize, inner_lr: f64) -> Self {
        FscAlgorithm {
            kind,
            inner_steps,
            inner_lr,
            ridge_lambda: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::config("inner_lr", "must be finite and non-negative"));
        }
        if self.kind == LearnerKind::Ridge && !(self.ridge_lambda > 0.0 && self.ridge_lambda.is_finite()) {
            return Err(Error::config("ridge_lambda", "must be positive"));
        }
        Ok(())
    }

    /// Fresh head for an `n_way` episode: a zero linear layer for linear-ce,
    /// nothing for the others.
    pub fn init_head(&self, d_emb: usize, n_way: usize) -> ParamSet {
        let mut phi = ParamSet::new();
        if self.kind == LearnerKind::LinearCe {
            phi.push("head.weight", Tensor::zeros(&[d_emb, n_way]));
            phi.push("head.bias", Tensor::zeros(&[1, n_way]));
        }
        phi
    }
}

/// Class probabilities, one row per query sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probabilities: Tensor,
}

impl Prediction {
    pub fn argmax(&self) -> Vec<usize> {
        crate::models::argmax_rows(&self.probabilities)
    }
}

/// Closed-form ridge head `(XᵀX + λI)⁻¹ XᵀY` recorded on the tape.
pub fn ridge_head(tape: &mut Tape, x: Var, y: Var, lambda: f64) -> Result<Var> {
    let d = tape.shape(x)[1];
    let xt = tape.transpose(x)?;
    let gram = tape.matmul(xt, x)?;
    let reg = tape.constant(Tensor::eye(d).scale(lambda));
    let a = tape.add(gram, reg)?;
    let b = tape.matmul(xt, y)?;
    tape.solve(a, b)
}

pub fn ridge_fit(x: &Tensor, y: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(lambda > 0.0) {
        return Err(Error::config("ridge_lambda", "must be positive"));
    }
    let mut tape = Tape::new(GradMode::FirstOrder);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let w = ridge_head(&mut tape, xv, yv, lambda)?;
    Ok(tape.value(w).clone())
}

/// Query log-probabilities `n_q × N` for one episode.
pub fn episode_log_probs(tape: &mut Tape, theta: &[Var], phi: &[Var], ep: &Episode, alg: &FscAlgorithm) -> Result<Var> {
    let qx = tape.constant(ep.query_x.clone());
    let q_emb = backbone_forward(tape, theta, qx)?;
    let logits = match alg.kind {
        LearnerKind::Protonet => {
            let avg = tape.constant(ep.prototype_matrix()?);
            let sx = tape.constant(ep.support_x.clone());
            let s_emb = backbone_forward(tape, theta, sx)?;
            let protos = tape.matmul(avg, s_emb)?;
            let d = tape.pairwise_sq_dist(q_emb, protos)?;
            tape.neg(d)?
        }
        LearnerKind::LinearCe => {
            let [w, b] = phi else {
                return Err(Error::InvalidTensor(format!("linear-ce head needs 2 tensors, got {}", phi.len())));
            };
            let expect = [tape.shape(q_emb)[1], ep.n_way()];
            if tape.shape(*w) != expect {
                return Err(Error::Shape {
                    op: "linear_predict",
                    lhs: tape.shape(*w).to_vec(),
                    rhs: expect.to_vec(),
                });
            }
            let z = tape.matmul(q_emb, *w)?;
            tape.add_bias(z, *b)?
        }
        LearnerKind::Ridge => {
            ep.prototype_matrix()?;
            let sx = tape.constant(ep.support_x.clone());
            let s_emb = backbone_forward(tape, theta, sx)?;
            let y = tape.constant(ep.support_one_hot()?);
            let w = ridge_head(tape, s_emb, y, alg.ridge_lambda)?;
            tape.matmul(q_emb, w)?
        }
    };
    tape.log_softmax(logits)
}

/// `−log p(true class)` per query sample, as an `n_q × 1` column.
pub fn query_nll(tape: &mut Tape, theta: &[Var], phi: &[Var], ep: &Episode, alg: &FscAlgorithm) -> Result<Var> {
    let lp = episode_log_probs(tape, theta, phi, ep, alg)?;
    let onehot = tape.constant(ep.query_one_hot()?);
    let picked = tape.mul(lp, onehot)?;
    let col = tape.sum_cols(picked)?;
    tape.neg(col)
}

/// Query losses split by whether each query's class is restricted.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub restricted: Var,
    pub other: Var,
    /// Always recorded as `restricted + other`.
    pub total: Var,
}

fn sum_rows_of(tape: &mut Tape, col: Var, rows: &[usize]) -> Result<Option<Var>> {
    if rows.is_empty() {
        return Ok(None);
    }
    let g = tape.gather_rows(col, rows)?;
    Ok(Some(tape.sum(g)?))
}

fn accumulate(tape: &mut Tape, acc: Option<Var>, term: Option<Var>) -> Result<Option<Var>> {
    Ok(match (acc, term) {
        (Some(a), Some(t)) => Some(tape.add(a, t)?),
        (a, t) => a.or(t),
    })
}

/// Summed query cross-entropy over `episodes`, split by `is_restricted`.
/// An empty side is an exact constant zero.
pub fn partitioned_loss(
    tape: &mut Tape,
    theta: &[Var],
    phi: &[Var],
    episodes: &[&Episode],
    alg: &FscAlgorithm,
    is_restricted: &dyn Fn(usize) -> bool,
) -> Result<LossParts> {
    if episodes.is_empty() {
        return Err(Error::InvalidTensor("loss over an empty task list".into()));
    }
    let (mut r_acc, mut o_acc) = (None, None);
    for ep in episodes {
        let nll = query_nll(tape, theta, phi, ep, alg)?;
        let (r_rows, o_rows): (Vec<usize>, Vec<usize>) =
            (0..ep.n_query()).partition(|&i| is_restricted(ep.classes[ep.query_y[i]]));
        let r_term = sum_rows_of(tape, nll, &r_rows)?;
        let o_term = sum_rows_of(tape, nll, &o_rows)?;
        r_acc = accumulate(tape, r_acc, r_term)?;
        o_acc = accumulate(tape, o_acc, o_term)?;
    }
    let mut zero = || tape.constant(Tensor::scalar(0.0));
    let restricted = r_acc.unwrap_or_else(&mut zero);
    let other = o_acc.unwrap_or_else(zero);
    let total = tape.add(restricted, other)?;
    Ok(LossParts {
        restricted,
        other,
        total,
    })
}

/// Summed query cross-entropy over all episodes.
pub fn fsc_loss(tape: &mut Tape, theta: &[Var], phi: &[Var], episodes: &[&Episode], alg: &FscAlgorithm) -> Result<Var> {
    Ok(partitioned_loss(tape, theta, phi, episodes, alg, &|_| false)?.total)
}

/// `K` full-batch gradient steps on [`fsc_loss`], updating `θ` and `φ` jointly.
pub fn adapt(
    tape: &mut Tape,
    theta: &[Var],
    phi: &[Var],
    episodes: &[&Episode],
    alg: &FscAlgorithm,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let split = theta.len();
    let params: Vec<Var> = theta.iter().chain(phi).copied().collect();
    let out = gradient_steps(tape, params, alg.inner_steps, alg.inner_lr, |t, p| {
        fsc_loss(t, &p[..split], &p[split..], episodes, alg)
    })?;
    Ok((out[..split].to_vec(), out[split..].to_vec()))
}

/// Adapted copy of `params`. With `record_tape` the steps are recorded in
/// exact-unrolled mode; the values are identical either way.
pub fn learner_f(params: &ModelParams, episodes: &[&Episode], alg: &FscAlgorithm, record_tape: bool) -> Result<ModelParams> {
    alg.validate()?;
    let mode = if record_tape {
        GradMode::ExactUnrolled
    } else {
        GradMode::FirstOrder
    };
    let mut tape = Tape::new(mode);
    let theta: Vec<Var> = params.theta.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
    let phi: Vec<Var> = params.phi.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
    let (t2, p2) = adapt(&mut tape, &theta, &phi, episodes, alg)?;
    Ok(ModelParams {
        theta: params.theta.with_tensors(t2.iter().map(|v| tape.value(*v).clone()).collect())?,
        phi: params.phi.with_tensors(p2.iter().map(|v| tape.value(*v).clone()).collect())?,
    })
}

/// Plain value of the summed query loss.
pub fn fsc_loss_value(params: &ModelParams, episodes: &[&Episode], alg: &FscAlgorithm) -> Result<f64> {
    let mut tape = Tape::new(GradMode::FirstOrder);
    let theta: Vec<Var> = params.theta.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let phi: Vec<Var> = params.phi.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let l = fsc_loss(&mut tape, &theta, &phi, episodes, alg)?;
    Ok(tape.value(l).item())
}

/// Query predictions for one episode.
pub fn predict(theta: &[Tensor], phi: &[Tensor], ep: &Episode, alg: &FscAlgorithm) -> Result<Prediction> {
    let mut tape = Tape::new(GradMode::FirstOrder);
    let tv: Vec<Var> = theta.iter().map(|t| tape.constant(t.clone())).collect();
    let pv: Vec<Var> = phi.iter().map(|t| tape.constant(t.clone())).collect();
    let lp = episode_log_probs(&mut tape, &tv, &pv, ep, alg)?;
    Ok(Prediction {
        probabilities: tape.value(lp).exp(),
    })
}
