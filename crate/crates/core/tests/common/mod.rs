//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use denoise_core::tensor::{grad_check, ConvSpec, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: u64 = 10;
pub const TOL: f64 = 1e-5;
pub const EPS: f64 = 1e-6;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so relu's kink stays outside the FD stencil.
fn rand_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Reduces any tensor to a scalar through a fixed random projection so every
/// output coordinate carries a distinct weight.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.value(v).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let w = tape.constant(rand_tensor(&mut rng, &shape));
    let m = tape.mul(v, w)?;
    Ok(tape.sum(m))
}


/// Worst relative finite-difference error of `f` over `SEEDS` random inputs.
fn check<F>(out: &mut Vec<(String, f64)>, name: &str, make_x: impl Fn(&mut ChaCha8Rng) -> Tensor, f: F)
where
    F: Fn(&mut Tape, Var, &mut ChaCha8Rng) -> Result<Var, TensorError>,
{
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = make_x(&mut rng);
        let fixed_seed = 1000 + seed;
        let err = grad_check(
            |tape, v| {
                let mut r = ChaCha8Rng::seed_from_u64(fixed_seed);
                let y = f(tape, v, &mut r)?;
                project(tape, y, fixed_seed)
            },
            &x,
            EPS,
        )
        .unwrap();
        worst = worst.max(err);
    }
    out.push((name.to_string(), worst));
}

/// Every tape primitive, each on both of its differentiable inputs.
pub fn primitive_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    // matmul_both_sides
    {
        check(&mut out, "matmul(x, w)", |r| rand_tensor(r, &[3, 4]), |t, x, r| {
            let w = t.constant(rand_tensor(r, &[4, 5]));
            t.matmul(x, w)
        });
        check(&mut out, "matmul(a, x)", |r| rand_tensor(r, &[4, 5]), |t, x, r| {
            let a = t.constant(rand_tensor(r, &[3, 4]));
            t.matmul(a, x)
        });
    }

    // bias_add
    {
        check(&mut out, "add_bias(x, b)", |r| rand_tensor(r, &[2, 3, 4]), |t, x, r| {
            let b = t.constant(rand_tensor(r, &[4]));
            t.add_bias(x, b)
        });
        check(&mut out, "add_bias(a, x)", |r| rand_tensor(r, &[4]), |t, x, r| {
            let a = t.constant(rand_tensor(r, &[2, 3, 4]));
            t.add_bias(a, x)
        });
    }

    // convolutions
    {
        for (k, stride) in [(3, 1), (3, 2), (5, 2), (1, 1)] {
            check(&mut out, "conv1d input", |r| rand_tensor(r, &[2, 8, 3]), |t, x, r| {
                let w = t.constant(rand_tensor(r, &[k, 3, 4]));
                t.conv1d(x, w, ConvSpec::same(k, stride))
            });
            check(&mut out, "conv1d weight", |r| rand_tensor(r, &[k, 3, 4]), |t, w, r| {
                let x = t.constant(rand_tensor(r, &[2, 8, 3]));
                t.conv1d(x, w, ConvSpec::same(k, stride))
            });
        }
        for k in [3, 5] {
            check(&mut out, "conv_t input", |r| rand_tensor(r, &[2, 4, 3]), |t, x, r| {
                let w = t.constant(rand_tensor(r, &[k, 3, 2]));
                t.conv_transpose1d(x, w, ConvSpec::same(k, 2))
            });
            check(&mut out, "conv_t weight", |r| rand_tensor(r, &[k, 3, 2]), |t, w, r| {
                let x = t.constant(rand_tensor(r, &[2, 4, 3]));
                t.conv_transpose1d(x, w, ConvSpec::same(k, 2))
            });
        }
    }

    // elementwise
    {
        check(&mut out, "add", |r| rand_tensor(r, &[3, 4]), |t, x, r| {
            let b = t.constant(rand_tensor(r, &[3, 4]));
            t.add(x, b)
        });
        check(&mut out, "sub lhs", |r| rand_tensor(r, &[3, 4]), |t, x, r| {
            let b = t.constant(rand_tensor(r, &[3, 4]));
            t.sub(x, b)
        });
        check(&mut out, "sub rhs", |r| rand_tensor(r, &[3, 4]), |t, x, r| {
            let b = t.constant(rand_tensor(r, &[3, 4]));
            t.sub(b, x)
        });
        check(&mut out, "mul", |r| rand_tensor(r, &[3, 4]), |t, x, r| {
            let b = t.constant(rand_tensor(r, &[3, 4]));
            t.mul(x, b)
        });
        check(&mut out, "mul self", |r| rand_tensor(r, &[3, 4]), |t, x, _| t.mul(x, x));
        check(&mut out, "scale", |r| rand_tensor(r, &[5]), |t, x, _| Ok(t.scale(x, -2.5)));
    }

    // nonlinearities
    {
        check(&mut out, "sigmoid", |r| rand_tensor(r, &[4, 3]), |t, x, _| Ok(t.sigmoid(x)));
        check(&mut out, "tanh", |r| rand_tensor(r, &[4, 3]), |t, x, _| Ok(t.tanh(x)));
        check(&mut out, "relu", |r| rand_off_kink(r, &[4, 3]), |t, x, _| Ok(t.relu(x)));
    }

    // structural_ops
    {
        check(&mut out, "concat_last", |r| rand_tensor(r, &[2, 3, 2]), |t, x, r| {
            let b = t.constant(rand_tensor(r, &[2, 3, 4]));
            t.concat_last(&[b, x, b])
        });
        check(&mut out, "concat_rows", |r| rand_tensor(r, &[2, 3]), |t, x, r| {
            let b = t.constant(rand_tensor(r, &[1, 3]));
            t.concat_rows(&[x, b, x])
        });
        check(&mut out, "slice_last", |r| rand_tensor(r, &[3, 6]), |t, x, _| t.slice_last(x, 2, 5));
        check(&mut out, "slice_rows", |r| rand_tensor(r, &[5, 2]), |t, x, _| t.slice_rows(x, 1, 4));
        check(&mut out, "reshape", |r| rand_tensor(r, &[2, 6]), |t, x, _| t.reshape(x, &[3, 4]));
        check(&mut out, "sum", |r| rand_tensor(r, &[2, 6]), |t, x, _| Ok(t.sum(x)));
        check(&mut out, "mse pred", |r| rand_tensor(r, &[2, 6]), |t, x, r| {
            let b = t.constant(rand_tensor(r, &[2, 6]));
            t.mse(x, b)
        });
        check(&mut out, "mse target", |r| rand_tensor(r, &[2, 6]), |t, x, r| {
            let b = t.constant(rand_tensor(r, &[2, 6]));
            t.mse(b, x)
        });
    }
    out
}
