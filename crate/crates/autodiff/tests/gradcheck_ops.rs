//! Every op against central finite differences at three shapes.

use autodiff::{gradcheck, AutodiffError, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SHAPES: [(usize, usize); 3] = [(1, 3), (4, 5), (6, 8)];
const EPS: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Reduces any node to a scalar with fixed random weights so every output
/// coordinate contributes a distinct cotangent.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tape.value(y).len();
    let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let w = tape.constant(w)?;
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

fn check<F>(name: &str, point: &Tensor, f: F)
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = gradcheck(f, point, EPS, TOL).unwrap();
    assert!(
        report.passed,
        "{name} at {:?}: max rel error {:e}",
        point.shape(),
        report.max_rel_error
    );
}

#[test]
fn unary_ops_pass_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (r, c) in SHAPES {
        let p = random(&mut rng, r, c);
        check("softmax", &p, |t, x| {
            let y = t.softmax(x)?;
            weighted_sum(t, y, 1)
        });
        check("log_softmax", &p, |t, x| {
            let y = t.log_softmax(x)?;
            weighted_sum(t, y, 2)
        });
        check("gelu", &p, |t, x| {
            let y = t.gelu(x)?;
            weighted_sum(t, y, 3)
        });
        check("transpose", &p, |t, x| {
            let y = t.transpose(x)?;
            weighted_sum(t, y, 4)
        });
        check("scale", &p, |t, x| {
            let y = t.scale(x, -2.5)?;
            weighted_sum(t, y, 5)
        });
        let coeffs: Vec<f64> = (0..r).map(|i| 0.5 + i as f64).collect();
        check("scale_rows", &p, |t, x| {
            let y = t.scale_rows(x, coeffs.clone())?;
            weighted_sum(t, y, 6)
        });
        check("sum", &p, |t, x| {
            let sq = t.mul(x, x)?;
            t.sum(sq)
        });
        check("mean", &p, |t, x| {
            let sq = t.mul(x, x)?;
            t.mean(sq)
        });
        check("reshape", &p, |t, x| {
            let y = t.reshape(x, vec![c, r])?;
            weighted_sum(t, y, 7)
        });
        let mask: Vec<f64> = (0..r * c).map(|i| (i % 3) as f64).collect();
        check("mul_const", &p, |t, x| {
            let y = t.mul_const(x, mask.clone())?;
            weighted_sum(t, y, 8)
        });
        let target = random(&mut rng, r, c);
        check("squared_error", &p, |t, x| {
            let c = t.constant(target.clone())?;
            t.squared_error(x, c)
        });
        let targets: Vec<usize> = (0..r).map(|i| i % c).collect();
        check("cross_entropy", &p, |t, x| t.cross_entropy(x, &targets));
        if c >= 2 {
            check("slice_cols", &p, |t, x| {
                let y = t.slice_cols(x, 1, c)?;
                weighted_sum(t, y, 9)
            });
        }
        check("slice_rows", &p, |t, x| {
            let y = t.slice_rows(x, 0, r.div_ceil(2))?;
            weighted_sum(t, y, 10)
        });
        check("concat", &p, |t, x| {
            let y = t.concat_cols(&[x, x])?;
            let z = t.concat_rows(&[y, y])?;
            weighted_sum(t, z, 11)
        });
        let idx: Vec<usize> = (0..5).map(|i| (i * 7) % r).collect();
        check("gather", &p, |t, x| {
            let y = t.gather(x, &idx)?;
            weighted_sum(t, y, 12)
        });
    }
}

#[test]
fn binary_ops_pass_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (r, c) in SHAPES {
        let p = random(&mut rng, r, c);
        let other = random(&mut rng, r, c);
        check("add", &p, |t, x| {
            let o = t.constant(other.clone())?;
            let y = t.add(x, o)?;
            let y = t.mul(y, x)?;
            weighted_sum(t, y, 1)
        });
        check("sub", &p, |t, x| {
            let o = t.constant(other.clone())?;
            let y = t.sub(o, x)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 2)
        });
        check("mul", &p, |t, x| {
            let o = t.constant(other.clone())?;
            let y = t.mul(x, o)?;
            weighted_sum(t, y, 3)
        });
        let right = random(&mut rng, c, 4);
        check("matmul(lhs)", &p, |t, x| {
            let b = t.constant(right.clone())?;
            let y = t.matmul(x, b)?;
            weighted_sum(t, y, 4)
        });
        let left = random(&mut rng, 3, r);
        check("matmul(rhs)", &p, |t, x| {
            let a = t.constant(left.clone())?;
            let y = t.matmul(a, x)?;
            weighted_sum(t, y, 5)
        });
        let rows_b = random(&mut rng, 5, c);
        check("matmul_t(lhs)", &p, |t, x| {
            let b = t.constant(rows_b.clone())?;
            let y = t.matmul_t(x, b)?;
            weighted_sum(t, y, 6)
        });
        let lhs = random(&mut rng, 2, c);
        check("matmul_t(rhs)", &p, |t, x| {
            let a = t.constant(lhs.clone())?;
            let y = t.matmul_t(a, x)?;
            weighted_sum(t, y, 7)
        });
        let bias = random(&mut rng, 1, c);
        check("add_bias(x)", &p, |t, x| {
            let b = t.constant(bias.clone())?;
            let y = t.add_bias(x, b)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 8)
        });
        let base = p.clone();
        check("add_bias(bias)", &bias, |t, b| {
            let x = t.constant(base.clone())?;
            let y = t.add_bias(x, b)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 9)
        });
    }
}

#[test]
fn layer_norm_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (r, c) in SHAPES {
        let x0 = random(&mut rng, r, c);
        let gamma = random(&mut rng, 1, c);
        let beta = random(&mut rng, 1, c);
        let (g2, b2) = (gamma.clone(), beta.clone());
        check("layer_norm(x)", &x0, |t, x| {
            let g = t.constant(g2.clone())?;
            let b = t.constant(b2.clone())?;
            let y = t.layer_norm(x, g, b)?;
            weighted_sum(t, y, 1)
        });
        let xc = x0.clone();
        check("layer_norm(gamma)", &gamma, |t, g| {
            let x = t.constant(xc.clone())?;
            let b = t.constant(beta.clone())?;
            let y = t.layer_norm(x, g, b)?;
            weighted_sum(t, y, 2)
        });
        check("layer_norm(beta)", &beta, |t, b| {
            let x = t.constant(xc.clone())?;
            let g = t.constant(gamma.clone())?;
            let y = t.layer_norm(x, g, b)?;
            weighted_sum(t, y, 3)
        });
    }
}

#[test]
fn attention_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    // (batch, seq_len, width, heads)
    for (batch, seq, width, heads) in [(1, 2, 2, 1), (2, 3, 4, 2), (2, 5, 6, 3)] {
        let rows = batch * seq;
        let q = random(&mut rng, rows, width);
        let k = random(&mut rng, rows, width);
        let v = random(&mut rng, rows, width);
        for causal in [false, true] {
            let (k2, v2) = (k.clone(), v.clone());
            check("attention(q)", &q, |t, x| {
                let kk = t.constant(k2.clone())?;
                let vv = t.constant(v2.clone())?;
                let y = t.attention(x, kk, vv, seq, heads, causal)?;
                weighted_sum(t, y, 1)
            });
            let (q2, v2) = (q.clone(), v.clone());
            check("attention(k)", &k, |t, x| {
                let qq = t.constant(q2.clone())?;
                let vv = t.constant(v2.clone())?;
                let y = t.attention(qq, x, vv, seq, heads, causal)?;
                weighted_sum(t, y, 2)
            });
            let (q2, k2) = (q.clone(), k.clone());
            check("attention(v)", &v, |t, x| {
                let qq = t.constant(q2.clone())?;
                let kk = t.constant(k2.clone())?;
                let y = t.attention(qq, kk, x, seq, heads, causal)?;
                weighted_sum(t, y, 3)
            });
            check("self-attention", &q, |t, x| {
                let y = t.attention(x, x, x, seq, heads, causal)?;
                weighted_sum(t, y, 4)
            });
        }
    }
}

#[test]
fn quadratic_form_passes_tight_tolerance() {
    let a = Tensor::from_rows(&[vec![2.0, 0.5, 0.0], vec![0.5, 1.0, -0.3], vec![0.0, -0.3, 3.0]]).unwrap();
    let x = Tensor::matrix(3, 1, vec![0.7, -1.2, 0.4]).unwrap();
    let report = gradcheck(
        |t, x| {
            let a = t.constant(a.clone())?;
            let ax = t.matmul(a, x)?;
            let xax = t.mul(x, ax)?;
            t.sum(xax)
        },
        &x,
        1e-5,
        1e-7,
    )
    .unwrap();
    assert!(report.passed, "max rel error {:e}", report.max_rel_error);
}

#[test]
fn log_softmax_cross_entropy_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let p = random(&mut rng, 4, 6);
    let report = gradcheck(
        |t, x| {
            let h = t.gelu(x)?;
            let ls = t.log_softmax(h)?;
            let ce = t.cross_entropy(ls, &[0, 5, 2, 3])?;
            let s = t.sum(ls)?;
            let s = t.scale(s, 0.1)?;
            t.add(ce, s)
        },
        &p,
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.passed, "max rel error {:e}", report.max_rel_error);
}

#[test]
fn sign_flipped_vjp_fails_gradcheck() {
    let p = Tensor::matrix(1, 3, vec![0.3, -0.8, 1.1]).unwrap();
    let report = gradcheck(
        |t, x| {
            let value = t.value(x).map(|v| v * v);
            let sq = t.custom(
                &[x],
                value,
                Box::new(|g: &Tensor, inputs: &[&Tensor]| {
                    let data = g.data().iter().zip(inputs[0].data()).map(|(g, x)| -2.0 * x * g).collect();
                    vec![Tensor::new(g.shape().to_vec(), data).unwrap()]
                }),
            )?;
            t.sum(sq)
        },
        &p,
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(!report.passed);
    assert_eq!(report.failures(), vec![0, 1, 2]);
}

#[test]
fn custom_op_with_wrong_arity_errors() {
    let mut t = Tape::new();
    let x = t.param(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
    let v = t.value(x).clone();
    let y = t.custom(&[x], v, Box::new(|_, _| Vec::new())).unwrap();
    let s = t.sum(y).unwrap();
    assert!(matches!(t.backward(s), Err(AutodiffError::ShapeMismatch { .. })));
}

fn two_term_loss(t: &mut Tape, x: Var, w: &Tensor) -> Result<(Var, Var)> {
    let wv = t.constant(w.clone())?;
    let h = t.matmul(x, wv)?;
    let h = t.gelu(h)?;
    let a = t.cross_entropy(h, &vec![1; t.value(h).rows()])?;
    let sq = t.mul(x, x)?;
    let b = t.sum(sq)?;
    Ok((a, b))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear_in_the_loss(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(&mut rng, 3, 4);
        let w = random(&mut rng, 4, 3);

        let grad_of = |pick: u8| {
            let mut t = Tape::new();
            let x = t.param(x0.clone()).unwrap();
            let (a, b) = two_term_loss(&mut t, x, &w).unwrap();
            let root = match pick {
                0 => a,
                1 => b,
                _ => t.add(a, b).unwrap(),
            };
            t.backward(root).unwrap().get(x)
        };
        let (ga, gb, gsum) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..gsum.len() {
            prop_assert!((ga.data()[i] + gb.data()[i] - gsum.data()[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_backward_is_bit_identical(seed in 0u64..10_000) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = random(&mut rng, 4, 6);
            let mut t = Tape::new();
            let x = t.param(x0).unwrap();
            let y = t.attention(x, x, x, 2, 2, false).unwrap();
            let y = t.softmax(y).unwrap();
            let s = weighted_sum(&mut t, y, seed).unwrap();
            let v = t.value(s).item();
            (v.to_bits(), t.backward(s).unwrap().get(x).data().iter().map(|g| g.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }
}
