//! First-order reverse-mode differentiation.
//!
//! The engine records batched matrix operations on a [`Tape`]. Energy
//! gradients that feed the dynamics are built as explicit forward expressions
//! ([`Mlp::value_and_input_gradient`]), so parameter-gradients of losses that
//! contain them need only one reverse sweep.

mod mlp;
mod params;
mod tape;

pub use mlp::{Activation, Dense, Mlp};
pub use params::{BlockId, ParamBlock, ParamSet};
pub use tape::{Adjoints, Mark, Tape, Var, SIGNED_POW_DERIV_FLOOR};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("backward root must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("node {node} reads node {input}, which does not precede it")]
    OutOfOrder { node: usize, input: usize },
    #[error("input-gradient requires a scalar-output network, this one has {0} outputs")]
    NonScalarNetwork(usize),
    #[error("parameter layout mismatch: expected {expected} values, got {got}")]
    LayoutMismatch { expected: usize, got: usize },
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Central difference of a scalar function of one input.
    fn fd(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let x = t.scalar(2.0);
        let y = t.scalar(3.0);
        let z = t.mul(x, y);
        let adj = t.backward(z).unwrap();
        assert_eq!(adj.get(x).unwrap()[[0, 0]], 3.0);
        assert_eq!(adj.get(y).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn tanh_slope_at_zero() {
        let mut t = Tape::new();
        let x = t.scalar(0.0);
        let y = t.tanh(x);
        let adj = t.backward(y).unwrap();
        assert_eq!(adj.get(x).unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Array2::zeros((2, 1)));
        let y = t.tanh(x);
        assert_eq!(t.backward(y).unwrap_err(), AutodiffError::NonScalarRoot { rows: 2, cols: 1 });
    }

    #[test]
    fn foreign_root_is_rejected() {
        let mut a = Tape::new();
        let b = Tape::new();
        let x = a.scalar(1.0);
        assert!(matches!(b.backward(x), Err(AutodiffError::UnknownNode(_))));
    }

    #[test]
    fn unreached_leaf_has_no_adjoint() {
        let mut t = Tape::new();
        let x = t.scalar(1.0);
        let unused = t.scalar(5.0);
        let y = t.square(x);
        let adj = t.backward(y).unwrap();
        assert!(adj.get(unused).is_none());
        assert_eq!(adj.get_or_zeros(&t, unused)[[0, 0]], 0.0);
    }

    #[test]
    fn broadcast_adjoints_are_summed() {
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let r = t.row(&[10.0, 20.0]);
        let s = t.scalar(0.5);
        let y = t.mul(x, r);
        let y = t.add(y, s);
        let l = t.sum(y);
        let adj = t.backward(l).unwrap();
        assert_eq!(adj.get(r).unwrap(), &array![[4.0, 6.0]]);
        assert_eq!(adj.get(s).unwrap(), &array![[4.0]]);
        assert_eq!(adj.get(x).unwrap(), &array![[10.0, 20.0], [10.0, 20.0]]);
    }

    type UnaryOp = fn(&mut Tape, Var) -> Var;

    fn primitives() -> Vec<(&'static str, UnaryOp)> {
        vec![
            ("tanh", |t, x| t.tanh(x)),
            ("abs", |t, x| t.abs(x)),
            ("signed_pow", |t, x| t.signed_pow(x, 1.0 / 3.0)),
            ("sin", |t, x| t.sin(x)),
            ("cos", |t, x| t.cos(x)),
            ("square", |t, x| t.square(x)),
            ("cube", |t, x| t.cube(x)),
            ("recip", |t, x| t.recip(x)),
            ("exp", |t, x| t.exp(x)),
            ("affine", |t, x| t.affine(x, -1.7, 0.3)),
            ("transpose", |t, x| t.transpose(x)),
        ]
    }

    #[test]
    fn unary_primitives_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (name, op) in primitives() {
            for _ in 0..50 {
                let mut x0: f64 = rng.random_range(-2.0..2.0);
                if x0.abs() < 1e-2 {
                    x0 += 0.05;
                }
                let mut t = Tape::new();
                let x = t.scalar(x0);
                let y = op(&mut t, x);
                let y = t.sum(y);
                let adj = t.backward(y).unwrap();
                let got = adj.get(x).unwrap()[[0, 0]];
                let f = |v: f64| {
                    let mut t = Tape::new();
                    let x = t.scalar(v);
                    let y = op(&mut t, x);
                    t.value(y).sum()
                };
                let want = fd(f, x0, 1e-5);
                assert!(rel_err(got, want) < 1e-5, "{name} at {x0}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn sqrt_and_binary_primitives_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a0: f64 = rng.random_range(0.2..2.0);
            let b0: f64 = rng.random_range(-2.0..2.0);
            let build = |t: &mut Tape, a: Var, b: Var| {
                let s = t.sqrt(a);
                let p = t.mul(s, b);
                let q = t.sub(p, a);
                let r = t.add(q, b);
                let m = t.hcat(&[r, a, b]);
                let c = t.slice_cols(m, 0..2);
                t.mean(c)
            };
            let mut t = Tape::new();
            let a = t.scalar(a0);
            let b = t.scalar(b0);
            let y = build(&mut t, a, b);
            let adj = t.backward(y).unwrap();
            let eval = |av: f64, bv: f64| {
                let mut t = Tape::new();
                let a = t.scalar(av);
                let b = t.scalar(bv);
                let y = build(&mut t, a, b);
                t.scalar_value(y)
            };
            let da = fd(|v| eval(v, b0), a0, 1e-5);
            let db = fd(|v| eval(a0, v), b0, 1e-5);
            assert!(rel_err(adj.get(a).unwrap()[[0, 0]], da) < 1e-5);
            assert!(rel_err(adj.get(b).unwrap()[[0, 0]], db) < 1e-5);
        }
    }

    #[test]
    fn signed_pow_derivative_is_floored_at_zero() {
        let mut t = Tape::new();
        let x = t.scalar(0.0);
        let y = t.signed_pow(x, 1.0 / 3.0);
        assert_eq!(t.scalar_value(y), 0.0);
        let adj = t.backward(y).unwrap();
        let g = adj.get(x).unwrap()[[0, 0]];
        assert!(g.is_finite());
        assert!((g - (1.0 / 3.0) * 1e-9f64.powf(-2.0 / 3.0)).abs() / g < 1e-12);
    }

    fn random_net(params: &mut ParamSet, widths: &[usize], seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mlp::new(params, "net", widths, Activation::Tanh, &mut rng)
    }

    fn net_value(net: &Mlp, params: &ParamSet, x: &[f64]) -> f64 {
        let mut t = Tape::new();
        let xv = t.row(x);
        let y = net.forward(&mut t, params, xv);
        t.scalar_value(y)
    }

    #[test]
    fn two_layer_network_input_adjoints_match_finite_differences() {
        let mut params = ParamSet::new();
        let net = random_net(&mut params, &[3, 16, 16, 1], 3);
        let x0 = [0.3, -0.7, 1.1];
        let mut t = Tape::new();
        let x = t.row(&x0);
        let y = net.forward(&mut t, &params, x);
        let adj = t.backward(y).unwrap();
        let g = adj.get(x).unwrap();
        for k in 0..3 {
            let want = fd(
                |v| {
                    let mut xs = x0;
                    xs[k] = v;
                    net_value(&net, &params, &xs)
                },
                x0[k],
                1e-5,
            );
            assert!(rel_err(g[[0, k]], want) < 1e-5, "dim {k}: {} vs {want}", g[[0, k]]);
        }
    }

    #[test]
    fn half_square_gives_exact_quadratic_gradient() {
        // network(x) = x²/2 at x = 3
        let mut params = ParamSet::new();
        let net = Mlp::from_weights(
            &mut params,
            "q",
            vec![(array![[1.0]], array![[0.0]]), (array![[1.0]], array![[0.0]])],
            Activation::HalfSquare,
        );
        let mut t = Tape::new();
        let x = t.row(&[3.0]);
        let (v, g) = net.value_and_input_gradient(&mut t, &params, x).unwrap();
        assert_eq!(t.scalar_value(v), 4.5);
        assert_eq!(t.value(g)[[0, 0]], 3.0);
    }

    #[test]
    fn quadratic_form_gradient_is_a_times_x() {
        // ½xᵀAx with A = diag(2, -1) written as Σ λᵢ (vᵢ·x)²/2
        let a = array![[2.0, 0.0], [0.0, -1.0]];
        let mut params = ParamSet::new();
        let net = Mlp::from_weights(
            &mut params,
            "qf",
            vec![
                (array![[1.0, 0.0], [0.0, 1.0]], array![[0.0, 0.0]]),
                (array![[2.0, -1.0]], array![[0.0]]),
            ],
            Activation::HalfSquare,
        );
        let x0 = array![[0.4, -1.5]];
        let mut t = Tape::new();
        let x = t.constant(x0.clone());
        let g = net.input_gradient(&mut t, &params, x).unwrap();
        let want = x0.dot(&a.t());
        for (got, want) in t.value(g).iter().zip(want.iter()) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn input_gradient_requires_scalar_output() {
        let mut params = ParamSet::new();
        let net = random_net(&mut params, &[2, 4, 3], 1);
        let mut t = Tape::new();
        let x = t.row(&[0.0, 0.0]);
        assert_eq!(
            net.input_gradient(&mut t, &params, x).unwrap_err(),
            AutodiffError::NonScalarNetwork(3)
        );
    }

    #[test]
    fn wide_network_input_gradient_matches_finite_differences() {
        let mut params = ParamSet::new();
        let net = random_net(&mut params, &[2, 200, 200, 1], 17);
        let x0 = [0.8, -0.25];
        let mut t = Tape::new();
        let x = t.row(&x0);
        let g = net.input_gradient(&mut t, &params, x).unwrap();
        for k in 0..2 {
            let want = fd(
                |v| {
                    let mut xs = x0;
                    xs[k] = v;
                    net_value(&net, &params, &xs)
                },
                x0[k],
                1e-5,
            );
            assert!(rel_err(t.value(g)[[0, k]], want) < 1e-5);
        }
    }

    #[test]
    fn parameter_gradient_through_input_gradient_expression() {
        // loss = Σ_batch ‖∇ₓnet(x)‖² + net(x); differentiate w.r.t. every weight
        let mut params = ParamSet::new();
        let net = random_net(&mut params, &[2, 8, 8, 1], 23);
        let xs = array![[0.5, -0.2], [-1.0, 0.9], [0.1, 0.3]];
        let loss = |p: &ParamSet| -> (f64, Vec<f64>) {
            let mut t = Tape::new();
            let x = t.constant(xs.clone());
            let (v, g) = net.value_and_input_gradient(&mut t, p, x).unwrap();
            let g2 = t.square(g);
            let a = t.sum(g2);
            let b = t.sum(v);
            let l = t.add(a, b);
            let adj = t.backward(l).unwrap();
            (t.scalar_value(l), t.param_gradient(&adj, p))
        };
        let (_, grad) = loss(&params);
        let base = params.flatten();
        let h = 1e-5;
        for i in 0..base.len() {
            let mut p = params.clone();
            let mut v = base.clone();
            v[i] += h;
            p.unflatten(&v).unwrap();
            let up = loss(&p).0;
            v[i] -= 2.0 * h;
            p.unflatten(&v).unwrap();
            let down = loss(&p).0;
            let want = (up - down) / (2.0 * h);
            let err = (grad[i] - want).abs() / want.abs().max(1e-4);
            assert!(err < 1e-4, "param {i}: {} vs {want}", grad[i]);
        }
    }
}
