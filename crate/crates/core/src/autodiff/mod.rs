//! Reverse-mode automatic differentiation.

mod gradcheck;
mod tape;
mod unroll;

pub use gradcheck::{finite_diff_check, max_relative_error, numerical_gradient};
pub use tape::{CustomOp, GradMode, Tape, Var};
pub use unroll::{grad_through_update, gradient_steps, UnrolledGrad};

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::error::Error;
    use crate::tensor::Tensor;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn mlp_loss(tape: &mut Tape, p: &[Var], x: &Tensor, y: &Tensor) -> crate::Result<Var> {
        let x = tape.constant(x.clone());
        let y = tape.constant(y.clone());
        let h = tape.matmul(x, p[0])?;
        let h = tape.add_bias(h, p[1])?;
        let h = tape.relu(h)?;
        let z = tape.matmul(h, p[2])?;
        let z = tape.add_bias(z, p[3])?;
        let lp = tape.log_softmax(z)?;
        let picked = tape.mul(lp, y)?;
        let s = tape.sum(picked)?;
        tape.neg(s)
    }

    fn mlp_params(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        vec![
            rand_tensor(rng, 3, 5),
            rand_tensor(rng, 1, 5),
            rand_tensor(rng, 5, 2),
            rand_tensor(rng, 1, 2),
        ]
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut tape = Tape::new(GradMode::FirstOrder);
        let x = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let c = tape.constant(Tensor::scalar(4.0));
        let g = tape.gradients(c, &[x]).unwrap();
        assert_eq!(g[0], Tensor::zeros(&[1, 2]));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let x0 = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut tape = Tape::new(GradMode::FirstOrder);
        let x = tape.leaf(x0.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let l = tape.scale(s, 0.5).unwrap();
        let g = tape.gradients(l, &[x]).unwrap();
        assert_eq!(g[0], x0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new(GradMode::FirstOrder);
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.gradients(x, &[x]), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn gradients_leave_tape_untouched() {
        let mut tape = Tape::new(GradMode::FirstOrder);
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        let before = tape.len();
        tape.gradients(y, &[x]).unwrap();
        assert_eq!(tape.len(), before);
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 4, 3);
        let y = Tensor::one_hot(&[0, 1, 1, 0], 2).unwrap();
        let params = mlp_params(&mut rng);
        let err = finite_diff_check(|t, p| mlp_loss(t, p, &x, &y), &params, 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_tensor(&mut rng, 3, 2);
        let b = rand_tensor(&mut rng, 4, 2);
        let bias = rand_tensor(&mut rng, 1, 4);
        let f = |t: &mut Tape, p: &[Var]| -> crate::Result<Var> {
            let d = t.pairwise_sq_dist(p[0], p[1])?;
            let d = t.add_bias(d, p[2])?;
            let sig = t.sigmoid(d)?;
            let sp = t.softplus(d)?;
            let sig = t.scale(sig, 0.3)?;
            let e = t.exp(sig)?;
            let m = t.mul(sp, e)?;
            let g = t.gather_rows(m, &[2, 0, 2])?;
            let c = t.concat_rows(&[g, m])?;
            let bt = t.transpose(p[1])?;
            let q = t.matmul(p[0], bt)?;
            let sr = t.sum_rows(q)?;
            let br = t.broadcast_rows(sr, 3)?;
            let sc = t.sum_cols(br)?;
            let bc = t.broadcast_cols(sc, 4)?;
            let lsm = t.log_softmax(bc)?;
            let cs = t.sum(c)?;
            let ls = t.mean(lsm)?;
            t.sub(cs, ls)
        };
        let err = finite_diff_check(f, &[a, b, bias], 1e-6).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn solve_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, 5, 3);
        let y = rand_tensor(&mut rng, 5, 2);
        let f = |t: &mut Tape, p: &[Var]| -> crate::Result<Var> {
            let xt = t.transpose(p[0])?;
            let xtx = t.matmul(xt, p[0])?;
            let lam = t.constant(Tensor::eye(3).scale(0.7));
            let a = t.add(xtx, lam)?;
            let b = t.matmul(xt, p[1])?;
            let w = t.solve(a, b)?;
            let w2 = t.mul(w, w)?;
            t.sum(w2)
        };
        let err = finite_diff_check(f, &[x, y], 1e-6).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn second_order_through_grad_matches_finite_differences() {
        // d/dx of ‖∇f(x)‖² for the MLP loss, where ∇f is a recorded gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rand_tensor(&mut rng, 4, 3);
        let y = Tensor::one_hot(&[1, 0, 1, 1], 2).unwrap();
        let params = mlp_params(&mut rng);
        let f = |t: &mut Tape, p: &[Var]| -> crate::Result<Var> {
            let l = mlp_loss(t, p, &x, &y)?;
            let g = t.grad(l, p)?;
            let mut acc = None;
            for gi in g {
                let sq = t.mul(gi, gi)?;
                let s = t.sum(sq)?;
                acc = Some(match acc {
                    Some(a) => t.add(a, s)?,
                    None => s,
                });
            }
            Ok(acc.unwrap())
        };
        let eval = |ps: &[Tensor]| -> crate::Result<f64> {
            let mut t = Tape::new(GradMode::ExactUnrolled);
            let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
            let o = f(&mut t, &vs)?;
            Ok(t.value(o).item())
        };
        let mut tape = Tape::new(GradMode::ExactUnrolled);
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        let analytic = tape.gradients(out, &vars).unwrap();
        let numeric = numerical_gradient(eval, &params, 1e-5).unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-5, "relative error {err}");
    }

    fn quadratic_case(mode: GradMode, theta: f64, curvature: f64, lr: f64, target: f64, steps: usize) -> f64 {
        let r = grad_through_update(
            &[Tensor::scalar(theta)],
            mode,
            |tape, p| {
                gradient_steps(tape, p, steps, lr, |t, q| {
                    let sq = t.mul(q[0], q[0])?;
                    t.scale(sq, 0.5 * curvature)
                })
            },
            |tape, q| {
                let tgt = tape.constant(Tensor::scalar(target));
                let d = tape.sub(q[0], tgt)?;
                let sq = tape.mul(d, d)?;
                tape.scale(sq, 0.5)
            },
        )
        .unwrap();
        r.grads[0].item()
    }

    #[test]
    fn one_step_quadratic_carries_curvature_factor() {
        let (theta, c, lr, t) = (1.5, 2.0, 0.1, 0.25);
        let adapted = (1.0 - lr * c) * theta;
        let exact = quadratic_case(GradMode::ExactUnrolled, theta, c, lr, t, 1);
        let first = quadratic_case(GradMode::FirstOrder, theta, c, lr, t, 1);
        assert!((exact - (adapted - t) * (1.0 - lr * c)).abs() < 1e-14);
        assert!((first - (adapted - t)).abs() < 1e-14);
        // Finite differences of the composed objective.
        let composed = |th: f64| 0.5 * ((1.0 - lr * c) * th - t).powi(2);
        let eps = 1e-5;
        let fd = (composed(theta + eps) - composed(theta - eps)) / (2.0 * eps);
        assert!((exact - fd).abs() / fd.abs() < 1e-8);
    }

    #[test]
    fn zero_steps_and_zero_lr_reduce_to_plain_gradient() {
        let plain = quadratic_case(GradMode::ExactUnrolled, 0.8, 3.0, 0.1, -1.0, 0);
        assert_eq!(plain, 0.8 - (-1.0));
        for mode in [GradMode::FirstOrder, GradMode::ExactUnrolled] {
            assert_eq!(quadratic_case(mode, 0.8, 3.0, 0.1, -1.0, 0).to_bits(), plain.to_bits());
            assert_eq!(quadratic_case(mode, 0.8, 3.0, 0.0, -1.0, 4), plain);
        }
    }

    #[test]
    fn exact_mode_rejects_custom_op_without_second_order_rule() {
        let square = Rc::new(CustomOp::new(
            "opaque_square",
            |v| Ok(v[0].mul(v[0])?),
            |v, _out, g| Ok(vec![g.mul(&v[0].scale(2.0))?]),
        ));
        let inner = |t: &mut Tape, q: &[Var]| -> crate::Result<Var> {
            let s = t.custom(square.clone(), &[q[0]])?;
            t.sum(s)
        };
        // Differentiable once, in either mode.
        let err = finite_diff_check(inner, &[Tensor::matrix(1, 2, vec![0.3, -0.4]).unwrap()], 1e-6).unwrap();
        assert!(err < 1e-8);
        let run = |mode| {
            grad_through_update(
                &[Tensor::matrix(1, 2, vec![0.3, -0.4]).unwrap()],
                mode,
                |tape, p| gradient_steps(tape, p, 1, 0.1, inner),
                |tape, q| tape.sum(q[0]),
            )
        };
        assert!(run(GradMode::FirstOrder).is_ok());
        match run(GradMode::ExactUnrolled) {
            Err(Error::UnsupportedOp(name)) => assert_eq!(name, "opaque_square"),
            other => panic!("expected unsupported-op error, got {other:?}"),
        }
    }

    #[test]
    fn divergence_reports_step() {
        let mut tape = Tape::new(GradMode::FirstOrder);
        let p = vec![tape.leaf(Tensor::scalar(1.0))];
        // loss = exp(x²) with a huge step blows up on the second evaluation.
        let err = gradient_steps(&mut tape, p, 5, 1e6, |t, q| {
            let sq = t.mul(q[0], q[0])?;
            let e = t.exp(sq)?;
            t.sum(e)
        })
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 1, .. }), "{err}");
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, 4, 3);
        let y = Tensor::one_hot(&[0, 1, 1, 0], 2).unwrap();
        let params = mlp_params(&mut rng);
        let mut tape = Tape::new(GradMode::ExactUnrolled);
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let l = mlp_loss(&mut tape, &vars, &x, &y).unwrap();
        tape.grad(l, &vars).unwrap();
        assert!(tape.replay_matches().unwrap());
    }
}
