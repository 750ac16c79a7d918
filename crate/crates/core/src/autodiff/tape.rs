//! Wengert tape with backward rules written in tape ops.
//!
//! Every vector-Jacobian product below is itself recorded as ordinary tape
//! operations. That makes differentiation composable: gradients produced by
//! [`Tape::grad`] in [`GradMode::ExactUnrolled`] are nodes that can be
//! differentiated again, which is what unrolled inner-loop differentiation
//! needs. In [`GradMode::FirstOrder`] the same gradients come back as detached
//! constants, so anything built from them contributes no second-order terms.
//!
//! Relu's mask is recorded as a constant, so its second derivative is zero
//! everywhere, including at the kink.

use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    /// Gradients are detached values; differentiating through an update step
    /// treats the step's gradient as constant.
    #[default]
    FirstOrder,
    /// Gradients are recorded as differentiable nodes.
    ExactUnrolled,
}

impl fmt::Display for GradMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradMode::FirstOrder => "first-order",
            GradMode::ExactUnrolled => "exact-unrolled",
        })
    }
}

impl std::str::FromStr for GradMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first-order" => Ok(GradMode::FirstOrder),
            "exact-unrolled" | "exact" => Ok(GradMode::ExactUnrolled),
            other => Err(Error::config("grad-mode", format!("unknown mode `{other}`"))),
        }
    }
}

type ForwardFn = dyn Fn(&[&Tensor]) -> Result<Tensor>;
type VjpFn = dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Result<Vec<Tensor>>;

/// An op supplied by the caller with a value-level backward rule only.
///
/// It can be differentiated once, but never in exact-unrolled mode.
pub struct CustomOp {
    name: String,
    forward: Box<ForwardFn>,
    vjp: Box<VjpFn>,
}

impl CustomOp {
    /// `vjp(inputs, output, upstream)` returns one gradient per input.
    pub fn new(
        name: impl Into<String>,
        forward: impl Fn(&[&Tensor]) -> Result<Tensor> + 'static,
        vjp: impl Fn(&[&Tensor], &Tensor, &Tensor) -> Result<Vec<Tensor>> + 'static,
    ) -> Self {
        CustomOp {
            name: name.into(),
            forward: Box::new(forward),
            vjp: Box::new(vjp),
        }
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    SumRows(Var),
    BroadcastRows(Var, usize),
    SumCols(Var),
    BroadcastCols(Var, usize),
    Sum(Var),
    Expand(Var, Rc<[usize]>),
    Relu(Var),
    Exp(Var),
    Sigmoid(Var),
    Softplus(Var),
    LogSoftmax(Var),
    PairwiseSqDist(Var, Var),
    GatherRows(Var, Rc<[usize]>),
    ScatterRows(Var, Rc<[usize]>, usize),
    ConcatRows(Rc<[Var]>),
    Solve(Var, Var),
    Custom(Rc<CustomOp>, Rc<[Var]>),
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::AddBias(..) => "add_bias",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::SumCols(..) => "sum_cols",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::Sum(..) => "sum",
            Op::Expand(..) => "expand",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::LogSoftmax(..) => "log_softmax",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::Solve(..) => "solve",
            Op::Custom(c, _) => &c.name,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::PairwiseSqDist(a, b)
            | Op::Solve(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::SumRows(a)
            | Op::BroadcastRows(a, _)
            | Op::SumCols(a)
            | Op::BroadcastCols(a, _)
            | Op::Sum(a)
            | Op::Expand(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::LogSoftmax(a)
            | Op::GatherRows(a, _)
            | Op::ScatterRows(a, _, _) => vec![*a],
            Op::ConcatRows(vs) | Op::Custom(_, vs) => vs.to_vec(),
        }
    }

    /// Forward value from input values. Shared by recording and replay.
    fn eval(&self, v: &[&Tensor]) -> Result<Tensor> {
        match self {
            Op::Leaf => Err(Error::InvalidTensor("a leaf has no forward rule".into())),
            Op::Add(..) => v[0].add(v[1]),
            Op::Sub(..) => v[0].sub(v[1]),
            Op::Mul(..) => v[0].mul(v[1]),
            Op::Scale(_, c) => Ok(v[0].scale(*c)),
            Op::MatMul(..) => v[0].matmul(v[1]),
            Op::Transpose(..) => v[0].transpose(),
            Op::AddBias(..) => v[0].add_bias(v[1]),
            Op::SumRows(..) => v[0].sum_rows(),
            Op::BroadcastRows(_, n) => v[0].broadcast_rows(*n),
            Op::SumCols(..) => v[0].sum_cols(),
            Op::BroadcastCols(_, m) => v[0].broadcast_cols(*m),
            Op::Sum(..) => Ok(v[0].sum()),
            Op::Expand(_, shape) => v[0].expand(shape),
            Op::Relu(..) => Ok(v[0].relu()),
            Op::Exp(..) => Ok(v[0].exp()),
            Op::Sigmoid(..) => Ok(v[0].sigmoid()),
            Op::Softplus(..) => Ok(v[0].softplus()),
            Op::LogSoftmax(..) => v[0].log_softmax(),
            Op::PairwiseSqDist(..) => v[0].pairwise_sq_dist(v[1]),
            Op::GatherRows(_, idx) => v[0].gather_rows(idx),
            Op::ScatterRows(_, idx, n) => v[0].scatter_rows(idx, *n),
            Op::ConcatRows(_) => Tensor::concat_rows(v),
            Op::Solve(..) => v[0].solve_spd(v[1]),
            Op::Custom(c, _) => (c.forward)(v),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Records operations in topological order; each node's inputs precede it.
///
/// A tape is confined to one thread. Values read off it are plain [`Tensor`]s.
pub struct Tape {
    nodes: Vec<Node>,
    mode: GradMode,
}

impl Tape {
    pub fn new(mode: GradMode) -> Self {
        Tape {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> GradMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[v.0].op.name()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value });
        Var(self.nodes.len() - 1)
    }

    /// Same as [`Tape::leaf`]; the distinction is only in intent.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = {
            let inputs = op.inputs();
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.eval(&vals)?
        };
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose(a))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.record(Op::AddBias(a, bias))
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SumRows(a))
    }

    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        self.record(Op::BroadcastRows(a, n))
    }

    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SumCols(a))
    }

    pub fn broadcast_cols(&mut self, a: Var, m: usize) -> Result<Var> {
        self.record(Op::BroadcastCols(a, m))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::Expand(a, shape.into()))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Softplus(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::LogSoftmax(a))
    }

    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::PairwiseSqDist(a, b))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.record(Op::GatherRows(a, idx.into()))
    }

    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Result<Var> {
        self.record(Op::ScatterRows(a, idx.into(), n))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::ConcatRows(parts.into()))
    }

    /// `A⁻¹ B` for symmetric positive-definite `A`.
    pub fn solve(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Solve(a, b))
    }

    pub fn custom(&mut self, op: Rc<CustomOp>, inputs: &[Var]) -> Result<Var> {
        self.record(Op::Custom(op, inputs.into()))
    }

    /// Re-evaluates every recorded op from the stored leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => {
                    let ins = op.inputs();
                    let vals: Vec<&Tensor> = ins.iter().map(|v| &values[v.0]).collect();
                    op.eval(&vals)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// True when [`Tape::replay`] reproduces every stored value bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        Ok(self
            .replay()?
            .iter()
            .zip(&self.nodes)
            .all(|(r, n)| r.bits_eq(&n.value)))
    }

    /// Gradients of a scalar `output` with respect to `wrt`.
    ///
    /// In exact-unrolled mode the results are differentiable nodes. In
    /// first-order mode they are detached constants.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        match self.mode {
            GradMode::ExactUnrolled => self.backprop(output, wrt, true),
            GradMode::FirstOrder => {
                let values = self.gradients(output, wrt)?;
                Ok(values.into_iter().map(|t| self.constant(t)).collect())
            }
        }
    }

    /// Gradient values of a scalar `output` with respect to `wrt`.
    ///
    /// Leaves in `wrt` that `output` does not depend on get zero tensors. The
    /// tape is left exactly as it was.
    pub fn gradients(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let mark = self.nodes.len();
        let result = self
            .backprop(output, wrt, false)
            .map(|vars| vars.iter().map(|v| self.value(*v).clone()).collect());
        self.nodes.truncate(mark);
        result
    }

    fn backprop(&mut self, output: Var, wrt: &[Var], graph: bool) -> Result<Vec<Var>> {
        let out_shape = self.shape(output).to_vec();
        if !self.value(output).is_scalar() {
            return Err(Error::NonScalarLoss(out_shape));
        }
        let Some(lo) = wrt.iter().map(|v| v.0).min() else {
            return Ok(Vec::new());
        };
        let hi = output.0;

        // Nodes in lo..=hi that depend on some requested variable.
        let mut relevant = vec![false; hi.saturating_sub(lo) + 1];
        for v in wrt {
            if v.0 <= hi {
                relevant[v.0 - lo] = true;
            }
        }
        if lo <= hi {
            for i in lo..=hi {
                if relevant[i - lo] {
                    continue;
                }
                relevant[i - lo] = self.nodes[i]
                    .op
                    .inputs()
                    .iter()
                    .any(|v| v.0 >= lo && relevant[v.0 - lo]);
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; relevant.len()];
        if lo <= hi && relevant[hi - lo] {
            let seed = self.constant(Tensor::full(&out_shape, 1.0));
            adj[hi - lo] = Some(seed);
            for i in (lo..=hi).rev() {
                let Some(g) = adj[i - lo] else { continue };
                let op = self.nodes[i].op.clone();
                if matches!(op, Op::Leaf) {
                    continue;
                }
                let inputs = op.inputs();
                let need: Vec<bool> = inputs
                    .iter()
                    .map(|v| v.0 >= lo && relevant[v.0 - lo])
                    .collect();
                if !need.iter().any(|&n| n) {
                    continue;
                }
                let grads = self.vjp(&op, Var(i), g, &need, graph)?;
                for ((input, grad), needed) in inputs.iter().zip(grads).zip(need) {
                    let (Some(grad), true) = (grad, needed) else { continue };
                    let slot = &mut adj[input.0 - lo];
                    *slot = Some(match *slot {
                        Some(prev) => self.add(prev, grad)?,
                        None => grad,
                    });
                }
            }
        }

        wrt.iter()
            .map(|v| match v.0.checked_sub(lo).and_then(|k| adj.get(k).copied().flatten()) {
                Some(g) => Ok(g),
                None => {
                    let z = Tensor::zeros(self.shape(*v));
                    Ok(self.constant(z))
                }
            })
            .collect()
    }

    /// Vector-Jacobian products of `op` (node `out`) for upstream gradient `g`.
    fn vjp(&mut self, op: &Op, out: Var, g: Var, need: &[bool], graph: bool) -> Result<Vec<Option<Var>>> {
        let want = |i: usize| need.get(i).copied().unwrap_or(false);
        Ok(match *op {
            Op::Leaf => Vec::new(),
            Op::Add(..) => vec![Some(g), Some(g)],
            Op::Sub(..) => {
                let gb = if want(1) { Some(self.neg(g)?) } else { None };
                vec![Some(g), gb]
            }
            Op::Mul(a, b) => {
                let ga = if want(0) { Some(self.mul(g, b)?) } else { None };
                let gb = if want(1) { Some(self.mul(g, a)?) } else { None };
                vec![ga, gb]
            }
            Op::Scale(_, c) => vec![Some(self.scale(g, c)?)],
            Op::MatMul(a, b) => {
                let ga = if want(0) {
                    let bt = self.transpose(b)?;
                    Some(self.matmul(g, bt)?)
                } else {
                    None
                };
                let gb = if want(1) {
                    let at = self.transpose(a)?;
                    Some(self.matmul(at, g)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Transpose(_) => vec![Some(self.transpose(g)?)],
            Op::AddBias(..) => {
                let gb = if want(1) { Some(self.sum_rows(g)?) } else { None };
                vec![Some(g), gb]
            }
            Op::SumRows(a) => {
                let n = self.shape(a)[0];
                vec![Some(self.broadcast_rows(g, n)?)]
            }
            Op::BroadcastRows(..) => vec![Some(self.sum_rows(g)?)],
            Op::SumCols(a) => {
                let m = self.shape(a)[1];
                vec![Some(self.broadcast_cols(g, m)?)]
            }
            Op::BroadcastCols(..) => vec![Some(self.sum_cols(g)?)],
            Op::Sum(a) => {
                let shape = self.shape(a).to_vec();
                let g = self.as_scalar(g)?;
                vec![Some(self.expand(g, &shape)?)]
            }
            Op::Expand(..) => vec![Some(self.sum(g)?)],
            Op::Relu(a) => {
                let mask = self.value(a).positive_mask();
                let mask = self.constant(mask);
                vec![Some(self.mul(g, mask)?)]
            }
            Op::Exp(_) => vec![Some(self.mul(g, out)?)],
            Op::Sigmoid(_) => {
                // s(1 - s) = s - s²
                let s2 = self.mul(out, out)?;
                let ds = self.sub(out, s2)?;
                vec![Some(self.mul(g, ds)?)]
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a)?;
                vec![Some(self.mul(g, s)?)]
            }
            Op::LogSoftmax(_) => {
                let c = self.shape(out)[1];
                let p = self.exp(out)?;
                let rs = self.sum_cols(g)?;
                let rs = self.broadcast_cols(rs, c)?;
                let corr = self.mul(p, rs)?;
                vec![Some(self.sub(g, corr)?)]
            }
            Op::PairwiseSqDist(a, b) => {
                let d = self.shape(a)[1];
                let ga = if want(0) {
                    let rs = self.sum_cols(g)?;
                    let rs = self.broadcast_cols(rs, d)?;
                    let t1 = self.mul(rs, a)?;
                    let t2 = self.matmul(g, b)?;
                    let diff = self.sub(t1, t2)?;
                    Some(self.scale(diff, 2.0)?)
                } else {
                    None
                };
                let gb = if want(1) {
                    let gt = self.transpose(g)?;
                    let cs = self.sum_cols(gt)?;
                    let cs = self.broadcast_cols(cs, d)?;
                    let t1 = self.mul(cs, b)?;
                    let t2 = self.matmul(gt, a)?;
                    let diff = self.sub(t1, t2)?;
                    Some(self.scale(diff, 2.0)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::GatherRows(a, ref idx) => {
                let n = self.shape(a)[0];
                vec![Some(self.scatter_rows(g, idx, n)?)]
            }
            Op::ScatterRows(_, ref idx, _) => vec![Some(self.gather_rows(g, idx)?)],
            Op::ConcatRows(ref parts) => {
                let mut start = 0;
                let mut grads = Vec::with_capacity(parts.len());
                for (i, p) in parts.iter().enumerate() {
                    let rows = self.shape(*p)[0];
                    let range: Vec<usize> = (start..start + rows).collect();
                    start += rows;
                    grads.push(if want(i) { Some(self.gather_rows(g, &range)?) } else { None });
                }
                grads
            }
            Op::Solve(a, _) => {
                // X = A⁻¹B: gB = A⁻ᵀ g, gA = −gB Xᵀ.
                let at = self.transpose(a)?;
                let gb = self.solve(at, g)?;
                let ga = if want(0) {
                    let xt = self.transpose(out)?;
                    let t = self.matmul(gb, xt)?;
                    Some(self.neg(t)?)
                } else {
                    None
                };
                vec![ga, Some(gb)]
            }
            Op::Custom(ref c, ref ins) => {
                if graph {
                    return Err(Error::UnsupportedOp(c.name.clone()));
                }
                let grads = {
                    let vals: Vec<&Tensor> = ins.iter().map(|v| self.value(*v)).collect();
                    (c.vjp)(&vals, self.value(out), self.value(g))?
                };
                if grads.len() != ins.len() {
                    return Err(Error::InvalidTensor(format!(
                        "custom op `{}` returned {} gradients for {} inputs",
                        c.name,
                        grads.len(),
                        ins.len()
                    )));
                }
                grads.into_iter().map(|t| Some(self.constant(t))).collect()
            }
        })
    }

    /// Views a one-element node as shape `[]` for [`Op::Expand`].
    fn as_scalar(&mut self, g: Var) -> Result<Var> {
        if self.shape(g).is_empty() {
            Ok(g)
        } else {
            // Only reachable if a Sum output was used as a non-scalar, which
            // Sum never produces.
            Err(Error::InvalidTensor(format!(
                "expected scalar upstream gradient, got {:?}",
                self.shape(g)
            )))
        }
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("mode", &self.mode)
            .field("nodes", &self.nodes.len())
            .finish()
    }
}
