//! Parameter containers, the MLP backbone and its pre-training.

use std::fs;
use std::io::{BufRead, Read};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMode, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{sigmoid, Tensor};

const CKPT_MAGIC: &str = "LTOCKPT v1";

/// An ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Same names, new values. Shapes must match.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::InvalidTensor(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (old, new) in self.tensors.iter().zip(&tensors) {
            if old.shape() != new.shape() {
                return Err(Error::Shape {
                    op: "with_tensors",
                    lhs: old.shape().to_vec(),
                    rhs: new.shape().to_vec(),
                });
            }
        }
        Ok(ParamSet {
            names: self.names.clone(),
            tensors,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn bits_eq(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bits_eq(b))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

/// Backbone parameters `θ` and head parameters `φ`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    pub theta: ParamSet,
    pub phi: ParamSet,
}

impl ModelParams {
    pub fn new(theta: ParamSet, phi: ParamSet) -> Result<Self> {
        if let Some(n) = theta.names().iter().find(|n| phi.names().contains(n)) {
            return Err(Error::Checkpoint(format!("name `{n}` appears in both theta and phi")));
        }
        Ok(ModelParams { theta, phi })
    }

    pub fn backbone_only(theta: ParamSet) -> Self {
        ModelParams {
            theta,
            phi: ParamSet::new(),
        }
    }

    pub fn bits_eq(&self, other: &ModelParams) -> bool {
        self.theta.bits_eq(&other.theta) && self.phi.bits_eq(&other.phi)
    }

    /// Checkpoint bytes: a magic line, then per tensor a `group/name dims…`
    /// line followed by its little-endian `f64` payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{CKPT_MAGIC}\n").into_bytes();
        for (group, set) in [("theta", &self.theta), ("phi", &self.phi)] {
            for (name, t) in set.iter() {
                let mut line = format!("{group}/{name}");
                for d in t.shape() {
                    line.push_str(&format!(" {d}"));
                }
                line.push('\n');
                out.extend_from_slice(line.as_bytes());
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = std::io::Cursor::new(bytes);
        let mut line = String::new();
        cur.read_line(&mut line)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if line.trim_end_matches('\n') != CKPT_MAGIC {
            return Err(Error::Checkpoint(format!("bad header {:?}", line.trim_end())));
        }
        let mut theta = ParamSet::new();
        let mut phi = ParamSet::new();
        loop {
            line.clear();
            let n = cur
                .read_line(&mut line)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            if n == 0 {
                break;
            }
            let mut fields = line.trim_end_matches('\n').split(' ');
            let full = fields.next().unwrap_or_default();
            let (group, name) = full
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("record name `{full}` lacks a group")))?;
            let shape: Vec<usize> = fields
                .map(|f| f.parse().map_err(|_| Error::Checkpoint(format!("bad dimension `{f}` for `{full}`"))))
                .collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let mut buf = vec![0u8; numel * 8];
            cur.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("truncated payload for `{full}`")))?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data)?;
            match group {
                "theta" => theta.push(name, t),
                "phi" => phi.push(name, t),
                other => return Err(Error::Checkpoint(format!("unknown group `{other}`"))),
            }
        }
        ModelParams::new(theta, phi)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    /// `d_in, hidden…, d_emb`.
    pub widths: Vec<usize>,
    pub init_seed: u64,
    pub init_scale: f64,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::config("widths", "need an input and an output width"));
        }
        if self.widths.contains(&0) {
            return Err(Error::config("widths", "every width must be at least 1"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("init_scale", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.widths[0]
    }

    pub fn d_emb(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Weights `N(0, (scale/√fan_in)²)`, zero biases.
pub fn init_backbone(spec: &BackboneSpec) -> Result<ParamSet> {
    spec.validate()?;
    let mut theta = ParamSet::new();
    for (l, w) in spec.widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let std = spec.init_scale / (fan_in as f64).sqrt();
        let data = if std == 0.0 {
            vec![0.0; fan_in * fan_out]
        } else {
            let normal = Normal::new(0.0, std).map_err(|e| Error::config("init_scale", e.to_string()))?;
            let mut r = rng::stream(spec.init_seed, "init", l as u64);
            (0..fan_in * fan_out).map(|_| normal.sample(&mut r)).collect()
        };
        theta.push(format!("backbone.{l}.weight"), Tensor::matrix(fan_in, fan_out, data)?);
        theta.push(format!("backbone.{l}.bias"), Tensor::zeros(&[1, fan_out]));
    }
    Ok(theta)
}

fn check_input(theta_first: &[usize], x: &[usize]) -> Result<()> {
    if x.len() != 2 || theta_first.len() != 2 || x[1] != theta_first[0] {
        return Err(Error::Shape {
            op: "backbone_forward",
            lhs: x.to_vec(),
            rhs: theta_first.to_vec(),
        });
    }
    Ok(())
}

/// Embeddings recorded on `tape`. `theta` alternates weight and bias per layer.
pub fn backbone_forward(tape: &mut Tape, theta: &[Var], x: Var) -> Result<Var> {
    if theta.is_empty() || theta.len() % 2 != 0 {
        return Err(Error::InvalidTensor(format!("backbone needs weight/bias pairs, got {} tensors", theta.len())));
    }
    check_input(tape.shape(theta[0]), tape.shape(x))?;
    let layers = theta.len() / 2;
    let mut h = x;
    for l in 0..layers {
        h = tape.matmul(h, theta[2 * l])?;
        h = tape.add_bias(h, theta[2 * l + 1])?;
        if l + 1 < layers {
            h = tape.relu(h)?;
        }
    }
    bounded(tape, h)
}

/// `tanh` written as `2σ(2h) − 1`, keeping embeddings inside `[-1, 1]`.
fn bounded(tape: &mut Tape, h: Var) -> Result<Var> {
    let twice = tape.scale(h, 2.0)?;
    let s = tape.sigmoid(twice)?;
    let s = tape.scale(s, 2.0)?;
    let shape = tape.shape(h).to_vec();
    let one = tape.constant(Tensor::full(&shape, 1.0));
    tape.sub(s, one)
}

/// Embeddings without recording anything.
pub fn embed(theta: &[Tensor], x: &Tensor) -> Result<Tensor> {
    if theta.is_empty() || theta.len() % 2 != 0 {
        return Err(Error::InvalidTensor(format!("backbone needs weight/bias pairs, got {} tensors", theta.len())));
    }
    check_input(theta[0].shape(), x.shape())?;
    let layers = theta.len() / 2;
    let mut h = x.clone();
    for l in 0..layers {
        h = h.matmul(&theta[2 * l])?.add_bias(&theta[2 * l + 1])?;
        if l + 1 < layers {
            h = h.relu();
        }
    }
    Ok(h.map(bound))
}

/// Scalar form of the output squashing, matching the recorded ops bit for bit.
pub fn bound(z: f64) -> f64 {
    sigmoid(z * 2.0) * 2.0 - 1.0
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub theta: ParamSet,
    pub train_accuracy: f64,
    /// Mean cross-entropy before each epoch's update, then after the last.
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent on mean cross-entropy with a temporary linear
/// head over `num_classes` classes. The head is discarded.
pub fn pretrain_backbone(
    x: &Tensor,
    labels: &[usize],
    num_classes: usize,
    spec: &BackboneSpec,
    epochs: usize,
    lr: f64,
) -> Result<PretrainReport> {
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Degenerate(format!("pre-training needs at least 2 classes, found {}", distinct.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::LabelNotInEpisode {
            label: bad,
            classes: (0..num_classes).collect(),
        });
    }
    let theta = init_backbone(spec)?;
    let targets = Tensor::one_hot(labels, num_classes)?;
    let n = labels.len() as f64;
    let mut params: Vec<Tensor> = theta.tensors().to_vec();
    params.push(Tensor::zeros(&[spec.d_emb(), num_classes]));
    params.push(Tensor::zeros(&[1, num_classes]));

    let loss_and_logits = |tape: &mut Tape, vars: &[Var]| -> Result<(Var, Var)> {
        let xv = tape.constant(x.clone());
        let yv = tape.constant(targets.clone());
        let k = vars.len();
        let emb = backbone_forward(tape, &vars[..k - 2], xv)?;
        let z = tape.matmul(emb, vars[k - 2])?;
        let z = tape.add_bias(z, vars[k - 1])?;
        let lp = tape.log_softmax(z)?;
        let picked = tape.mul(lp, yv)?;
        let s = tape.sum(picked)?;
        Ok((tape.scale(s, -1.0 / n)?, z))
    };

    let mut losses = Vec::with_capacity(epochs + 1);
    for epoch in 0..epochs {
        let mut tape = Tape::new(GradMode::FirstOrder);
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let (loss, _) = loss_and_logits(&mut tape, &vars)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence { step: epoch, loss: value });
        }
        losses.push(value);
        let grads = tape.gradients(loss, &vars)?;
        for (p, g) in params.iter_mut().zip(grads) {
            *p = p.sub(&g.scale(lr))?;
        }
    }

    let mut tape = Tape::new(GradMode::FirstOrder);
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let (loss, logits) = loss_and_logits(&mut tape, &vars)?;
    losses.push(tape.value(loss).item());
    let correct = argmax_rows(tape.value(logits))
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();

    params.truncate(params.len() - 2);
    Ok(PretrainReport {
        theta: theta.with_tensors(params)?,
        train_accuracy: correct as f64 / n,
        losses,
    })
}

/// Column index of each row's maximum; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let (rows, _) = t.dims2().expect("argmax_rows needs a matrix");
    (0..rows)
        .map(|i| {
            t.row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(widths: &[usize], scale: f64) -> BackboneSpec {
        BackboneSpec {
            widths: widths.to_vec(),
            init_seed: 11,
            init_scale: scale,
        }
    }

    fn rand_matrix(r: &mut ChaCha8Rng, n: usize, m: usize) -> Tensor {
        Tensor::matrix(n, m, (0..n * m).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_counts_parameters() {
        let s = spec(&[4, 8, 3], 1.0);
        assert_eq!(init_backbone(&s).unwrap(), init_backbone(&s).unwrap());
        assert_eq!(init_backbone(&s).unwrap().num_scalars(), 67);
        assert_eq!(s.num_params(), 67);
    }

    #[test]
    fn zero_scale_gives_zero_weights_and_embeddings() {
        let theta = init_backbone(&spec(&[4, 8, 3], 0.0)).unwrap();
        assert!(theta.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        let x = Tensor::full(&[2, 4], 1.5);
        assert_eq!(embed(theta.tensors(), &x).unwrap(), Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn bad_specs_are_rejected() {
        assert!(init_backbone(&spec(&[4], 1.0)).is_err());
        assert!(init_backbone(&spec(&[4, 0, 2], 1.0)).is_err());
    }

    #[test]
    fn single_layer_is_matmul_plus_bias() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let w = rand_matrix(&mut r, 3, 2);
        let b = rand_matrix(&mut r, 1, 2);
        let x = rand_matrix(&mut r, 5, 3);
        let out = embed(&[w.clone(), b.clone()], &x).unwrap();
        assert!(out.bits_eq(&x.matmul(&w).unwrap().add_bias(&b).unwrap().map(bound)));
    }

    #[test]
    fn two_layer_matches_straight_line_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let theta = [rand_matrix(&mut r, 3, 4), rand_matrix(&mut r, 1, 4), rand_matrix(&mut r, 4, 2), rand_matrix(&mut r, 1, 2)];
        let x = rand_matrix(&mut r, 6, 3);
        let got = embed(&theta, &x).unwrap();
        let mut tape = Tape::new(GradMode::FirstOrder);
        let vars: Vec<Var> = theta.iter().map(|t| tape.leaf(t.clone())).collect();
        let xv = tape.constant(x.clone());
        let recorded = backbone_forward(&mut tape, &vars, xv).unwrap();
        assert!(tape.value(recorded).bits_eq(&got));
        for i in 0..6 {
            let mut hidden = [0.0; 4];
            for (j, hj) in hidden.iter_mut().enumerate() {
                let mut s = theta[1].at(0, j);
                for k in 0..3 {
                    s += x.at(i, k) * theta[0].at(k, j);
                }
                *hj = if s > 0.0 { s } else { 0.0 };
            }
            for j in 0..2 {
                let mut s = theta[3].at(0, j);
                for (k, hk) in hidden.iter().enumerate() {
                    s += hk * theta[2].at(k, j);
                }
                assert!((got.at(i, j) - s.tanh()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bound_is_tanh() {
        for z in [-30.0, -2.5, -0.1, 0.0, 0.3, 1.0, 40.0] {
            assert!((bound(z) - f64::tanh(z)).abs() < 1e-15);
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let theta = init_backbone(&spec(&[4, 3], 1.0)).unwrap();
        let err = embed(theta.tensors(), &Tensor::zeros(&[2, 5])).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "backbone_forward", .. }));
    }

    #[test]
    fn backbone_gradients_pass_finite_difference_check() {
        let theta = init_backbone(&spec(&[3, 5, 2], 1.0)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let x = rand_matrix(&mut r, 4, 3);
        let err = finite_diff_check(
            |t, p| {
                let xv = t.constant(x.clone());
                let e = backbone_forward(t, p, xv)?;
                let sq = t.mul(e, e)?;
                t.sum(sq)
            },
            theta.tensors(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn blobs(seed: u64, per: usize) -> (Tensor, Vec<usize>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * per {
            let y = i % 2;
            let c = if y == 0 { -2.0 } else { 2.0 };
            rows.push(vec![c + r.random_range(-0.5..0.5), c + r.random_range(-0.5..0.5)]);
            labels.push(y);
        }
        (Tensor::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn pretraining_zero_epochs_returns_init() {
        let (x, y) = blobs(1, 10);
        let s = spec(&[2, 4], 1.0);
        let rep = pretrain_backbone(&x, &y, 2, &s, 0, 0.1).unwrap();
        assert_eq!(rep.theta, init_backbone(&s).unwrap());
    }

    #[test]
    fn pretraining_separates_blobs_deterministically() {
        let (x, y) = blobs(5, 40);
        let s = spec(&[2, 8, 4], 1.0);
        let a = pretrain_backbone(&x, &y, 2, &s, 200, 0.1).unwrap();
        let b = pretrain_backbone(&x, &y, 2, &s, 200, 0.1).unwrap();
        assert!(a.train_accuracy >= 0.99, "{}", a.train_accuracy);
        assert!(a.theta.bits_eq(&b.theta));
        assert!(a.losses.windows(2).all(|w| w[1] <= w[0]), "loss increased");
    }

    #[test]
    fn pretraining_rejects_single_class() {
        let (x, _) = blobs(1, 3);
        let err = pretrain_backbone(&x, &[0; 6], 1, &spec(&[2, 3], 1.0), 1, 0.1).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn checkpoint_round_trips_bits_and_rejects_garbage() {
        let theta = init_backbone(&spec(&[3, 4, 2], 1.0)).unwrap();
        let mut phi = ParamSet::new();
        phi.push("head.weight", Tensor::full(&[2, 5], -0.0));
        phi.push("head.bias", Tensor::scalar(f64::MIN_POSITIVE));
        let p = ModelParams::new(theta, phi).unwrap();
        let q = ModelParams::from_bytes(&p.to_bytes()).unwrap();
        assert!(p.bits_eq(&q));
        assert!(ModelParams::from_bytes(b"LTOCKPT v2\n").is_err());
        let mut truncated = p.to_bytes();
        truncated.truncate(truncated.len() - 3);
        assert!(ModelParams::from_bytes(&truncated).is_err());
    }

    #[test]
    fn theta_and_phi_names_must_be_disjoint() {
        let mut a = ParamSet::new();
        a.push("w", Tensor::scalar(1.0));
        assert!(ModelParams::new(a.clone(), a).is_err());
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let t = Tensor::matrix(2, 3, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
