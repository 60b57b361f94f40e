use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tonet_core::autodiff::{finite_diff_check, Primitive, Var};
use tonet_core::{Graph, Tensor, TensorError};

const TRIALS: u64 = 20;
const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn dims(rng: &mut ChaCha8Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=max)).collect()
}

/// `sum(y * r)` for a fixed random projection `r` of `y`'s shape.
fn project(g: &mut Graph<'_>, y: Var, r: &Tensor) -> Result<Var, TensorError> {
    let rv = g.constant(r.clone());
    let p = g.mul(y, rv)?;
    g.sum(p)
}

fn assert_close(name: &str, trial: u64, err: f64) {
    assert!(err <= TOL, "{name} trial {trial}: relative error {err:e}");
}

/// Runs a unary check where `build(g, x)` produces the primitive's output and
/// the projection is drawn to match the output shape.
fn unary(name: &str, seed: u64, rng: &mut ChaCha8Rng, x: Tensor, build: impl Fn(&mut Graph<'_>, Var) -> Result<Var, TensorError>) {
    let out_shape = {
        let mut g = Graph::no_grad();
        let v = g.constant(x.clone());
        let y = build(&mut g, v).unwrap();
        g.value(y).shape().to_vec()
    };
    let r = if out_shape.is_empty() {
        Tensor::scalar(rng.random_range(0.5..1.5))
    } else {
        rand_tensor(rng, &out_shape, -1.0, 1.0)
    };
    let err = finite_diff_check(
        |g, v| {
            let y = build(g, v)?;
            if g.value(y).is_scalar() && g.value(y).rank() == 0 {
                g.scale(y, r.item())
            } else {
                project(g, y, &r)
            }
        },
        &x,
        EPS,
    )
    .unwrap();
    assert_close(name, seed, err);
}

fn trials(name: &str, mut body: impl FnMut(u64, &mut ChaCha8Rng)) {
    for seed in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37) ^ name.len() as u64);
        body(seed, &mut rng);
    }
}

#[test]
fn linear_function_is_essentially_exact() {
    let x = Tensor::from_fn(vec![3, 4], |i| i as f64 * 0.3 - 1.0);
    let err = finite_diff_check(|g, v| { let s = g.scale(v, 2.5)?; g.sum(s) }, &x, 1e-4).unwrap();
    assert!(err <= 1e-10, "{err:e}");
}

#[test]
fn eps_outside_range_and_non_finite_objective_are_rejected() {
    let x = Tensor::full(vec![2], 1.0);
    assert!(finite_diff_check(|g, v| g.sum(v), &x, 1e-2).is_err());
    assert!(finite_diff_check(|g, v| g.sum(v), &x, 1e-9).is_err());
    let bad = Tensor::full(vec![2], f64::INFINITY);
    assert!(matches!(
        finite_diff_check(|g, v| g.sum(v), &bad, 1e-6),
        Err(TensorError::NonFinite(_))
    ));
}

#[test]
fn elementwise_binary() {
    trials("binary", |seed, rng| {
        let rank = rng.random_range(1..=3);
        let shape = dims(rng, rank, 8);
        let x = rand_tensor(rng, &shape, -2.0, 2.0);
        let other = rand_tensor(rng, &shape, -2.0, 2.0);
        let suffix = rand_tensor(rng, &shape[rank - 1..], -2.0, 2.0);
        for (name, prim) in [("add", Primitive::Add), ("sub", Primitive::Sub), ("mul", Primitive::Mul)] {
            let o = other.clone();
            let p = prim.clone();
            unary(name, seed, rng, x.clone(), move |g, v| {
                let b = g.constant(o.clone());
                g.apply(p.clone(), &[v, b])
            });
            let o = other.clone();
            let p = prim.clone();
            unary(name, seed, rng, x.clone(), move |g, v| {
                let a = g.constant(o.clone());
                g.apply(p.clone(), &[a, v])
            });
        }
        let base = x.clone();
        unary("add-broadcast", seed, rng, suffix, move |g, v| {
            let a = g.constant(base.clone());
            g.add(a, v)
        });
        let factor = rng.random_range(-3.0..3.0);
        unary("scale", seed, rng, x, move |g, v| g.scale(v, factor));
    });
}

#[test]
fn matmul_all_layouts() {
    trials("matmul", |seed, rng| {
        let (bt, m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
        let a2 = rand_tensor(rng, &[m, k], -1.0, 1.0);
        let b2 = rand_tensor(rng, &[k, n], -1.0, 1.0);
        let a3 = rand_tensor(rng, &[bt, m, k], -1.0, 1.0);
        let b3 = rand_tensor(rng, &[bt, k, n], -1.0, 1.0);
        let cases: [(Tensor, Tensor); 3] = [(a2.clone(), b2.clone()), (a3.clone(), b2), (a3, b3)];
        for (a, b) in cases {
            let bc = b.clone();
            unary("matmul-lhs", seed, rng, a.clone(), move |g, v| {
                let w = g.constant(bc.clone());
                g.matmul(v, w)
            });
            let ac = a.clone();
            unary("matmul-rhs", seed, rng, b, move |g, v| {
                let x = g.constant(ac.clone());
                g.matmul(x, v)
            });
        }
    });
}

#[test]
fn pointwise_and_softmax() {
    trials("pointwise", |seed, rng| {
        let rank = rng.random_range(1..=3);
        let shape = dims(rng, rank, 8);
        // keep relu inputs away from the kink
        let x = Tensor::from_fn(shape.clone(), |_| {
            let v: f64 = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) { v } else { -v }
        });
        unary("relu", seed, rng, x.clone(), |g, v| g.relu(v));
        unary("sigmoid", seed, rng, x.clone(), |g, v| g.sigmoid(v));
        unary("softmax", seed, rng, x, |g, v| g.softmax(v));
    });
}

#[test]
fn layer_norm_each_input() {
    trials("layer_norm", |seed, rng| {
        let rows = rng.random_range(1..=8);
        let d = rng.random_range(2..=8);
        let x = rand_tensor(rng, &[rows, d], -2.0, 2.0);
        let gamma = rand_tensor(rng, &[d], 0.5, 1.5);
        let beta = rand_tensor(rng, &[d], -0.5, 0.5);
        let (gc, bc) = (gamma.clone(), beta.clone());
        unary("layer_norm-x", seed, rng, x.clone(), move |g, v| {
            let (ga, be) = (g.constant(gc.clone()), g.constant(bc.clone()));
            g.layer_norm(v, ga, be)
        });
        let (xc, bc) = (x.clone(), beta.clone());
        unary("layer_norm-gamma", seed, rng, gamma.clone(), move |g, v| {
            let (xv, be) = (g.constant(xc.clone()), g.constant(bc.clone()));
            g.layer_norm(xv, v, be)
        });
        let (xc, gc) = (x, gamma);
        unary("layer_norm-beta", seed, rng, beta, move |g, v| {
            let (xv, ga) = (g.constant(xc.clone()), g.constant(gc.clone()));
            g.layer_norm(xv, ga, v)
        });
    });
}

#[test]
fn batch_norm_training_and_inference() {
    trials("batch_norm", |seed, rng| {
        let b = rng.random_range(1..=3);
        let c = rng.random_range(1..=4);
        let h = rng.random_range(1..=4);
        let w = rng.random_range(2..=4);
        let x = rand_tensor(rng, &[b, c, h, w], -2.0, 2.0);
        let gamma = rand_tensor(rng, &[c], 0.5, 1.5);
        let beta = rand_tensor(rng, &[c], -0.5, 0.5);
        let mean = rand_tensor(rng, &[c], -0.5, 0.5);
        let var = rand_tensor(rng, &[c], 0.5, 2.0);
        let train = Primitive::BatchNorm { eps: 1e-5, training: true };
        let eval = Primitive::BatchNorm { eps: 1e-5, training: false };
        let (gc, bc) = (gamma.clone(), beta.clone());
        let p = train.clone();
        unary("batch_norm-train-x", seed, rng, x.clone(), move |g, v| {
            let (ga, be) = (g.constant(gc.clone()), g.constant(bc.clone()));
            g.apply(p.clone(), &[v, ga, be])
        });
        let (xc, bc) = (x.clone(), beta.clone());
        let p = train.clone();
        unary("batch_norm-train-gamma", seed, rng, gamma.clone(), move |g, v| {
            let (xv, be) = (g.constant(xc.clone()), g.constant(bc.clone()));
            g.apply(p.clone(), &[xv, v, be])
        });
        let (xc, gc) = (x.clone(), gamma.clone());
        let p = train;
        unary("batch_norm-train-beta", seed, rng, beta.clone(), move |g, v| {
            let (xv, ga) = (g.constant(xc.clone()), g.constant(gc.clone()));
            g.apply(p.clone(), &[xv, ga, v])
        });
        let (gc, bc) = (gamma, beta);
        unary("batch_norm-eval-x", seed, rng, x, move |g, v| {
            let ga = g.constant(gc.clone());
            let be = g.constant(bc.clone());
            let mu = g.constant(mean.clone());
            let va = g.constant(var.clone());
            g.apply(eval.clone(), &[v, ga, be, mu, va])
        });
    });
}

#[test]
fn structural_primitives() {
    trials("structural", |seed, rng| {
        let rank = rng.random_range(1..=3);
        let shape = dims(rng, rank, 8);
        let x = rand_tensor(rng, &shape, -1.0, 1.0);
        let axis = rng.random_range(0..rank);
        let mut other_shape = shape.clone();
        other_shape[axis] = rng.random_range(1..=8);
        let other = rand_tensor(rng, &other_shape, -1.0, 1.0);
        let oc = other.clone();
        unary("concat-first", seed, rng, x.clone(), move |g, v| {
            let o = g.constant(oc.clone());
            g.concat(&[v, o], axis)
        });
        let xc = x.clone();
        unary("concat-second", seed, rng, other, move |g, v| {
            let a = g.constant(xc.clone());
            g.concat(&[a, v, a], axis)
        });
        let mut perm: Vec<usize> = (0..rank).collect();
        for i in (1..rank).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        unary("permute", seed, rng, x.clone(), move |g, v| g.permute(v, &perm));
        let flat = vec![x.len()];
        unary("reshape", seed, rng, x.clone(), move |g, v| g.reshape(v, &flat));
        unary("mean", seed, rng, x.clone(), |g, v| g.mean(v));
        unary("sum", seed, rng, x, |g, v| g.sum(v));
    });
}

#[test]
fn convolutions_each_input() {
    trials("conv", |seed, rng| {
        let (b, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(3..=8), rng.random_range(3..=8));
        let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let pad = [rng.random_range(0..kh), rng.random_range(0..kw)];
        let x = rand_tensor(rng, &[b, cin, h, w], -1.0, 1.0);
        let wt = rand_tensor(rng, &[cout, cin, kh, kw], -1.0, 1.0);
        let bias = rand_tensor(rng, &[cout], -1.0, 1.0);
        let (wc, bc) = (wt.clone(), bias.clone());
        unary("conv2d-x", seed, rng, x.clone(), move |g, v| {
            let (w, bb) = (g.constant(wc.clone()), g.constant(bc.clone()));
            g.conv2d(v, w, bb, pad)
        });
        let (xc, bc) = (x.clone(), bias.clone());
        unary("conv2d-w", seed, rng, wt.clone(), move |g, v| {
            let (xv, bb) = (g.constant(xc.clone()), g.constant(bc.clone()));
            g.conv2d(xv, v, bb, pad)
        });
        let (xc, wc) = (x, wt);
        unary("conv2d-b", seed, rng, bias.clone(), move |g, v| {
            let (xv, w) = (g.constant(xc.clone()), g.constant(wc.clone()));
            g.conv2d(xv, w, v, pad)
        });

        let t = rng.random_range(3..=8);
        let k = rng.random_range(1..=5).min(t);
        let p1 = rng.random_range(0..=k / 2);
        let x1 = rand_tensor(rng, &[b, cin, t], -1.0, 1.0);
        let w1 = rand_tensor(rng, &[cout, cin, k], -1.0, 1.0);
        let (wc, bc) = (w1.clone(), bias.clone());
        unary("conv1d-x", seed, rng, x1.clone(), move |g, v| {
            let (w, bb) = (g.constant(wc.clone()), g.constant(bc.clone()));
            g.conv1d(v, w, bb, p1)
        });
        let (xc, bc) = (x1.clone(), bias.clone());
        unary("conv1d-w", seed, rng, w1.clone(), move |g, v| {
            let (xv, bb) = (g.constant(xc.clone()), g.constant(bc.clone()));
            g.conv1d(xv, v, bb, p1)
        });
        unary("conv1d-b", seed, rng, bias, move |g, v| {
            let (xv, w) = (g.constant(x1.clone()), g.constant(w1.clone()));
            g.conv1d(xv, w, v, p1)
        });
    });
}

#[test]
fn pooling_and_unpooling() {
    trials("pool", |seed, rng| {
        let kernel = [rng.random_range(1..=4), rng.random_range(1..=2)];
        let (b, c) = (rng.random_range(1..=2), rng.random_range(1..=3));
        let (oh, ow) = (rng.random_range(1..=3), rng.random_range(1..=3));
        // distinct values spaced well beyond the finite-difference step
        let n = b * c * oh * kernel[0] * ow * kernel[1];
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        for i in (1..n).rev() {
            vals.swap(i, rng.random_range(0..=i));
        }
        let x = Tensor::new(vec![b, c, oh * kernel[0], ow * kernel[1]], vals).unwrap();
        unary("max_pool2d", seed, rng, x.clone(), move |g, v| g.max_pool2d(v, kernel));
        unary("max_unpool2d", seed, rng, x, move |g, v| {
            let p = g.max_pool2d(v, kernel)?;
            let s = g.scale(p, 1.7)?;
            g.max_unpool2d(s, p, kernel)
        });
    });
}

#[test]
fn bce_wrt_predictions() {
    trials("bce", |seed, rng| {
        let shape = dims(rng, 2, 8);
        let pred = rand_tensor(rng, &shape, 0.05, 0.95);
        let target = Tensor::from_fn(shape.clone(), |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        unary("bce", seed, rng, pred, move |g, v| {
            let t = g.constant(target.clone());
            g.bce(v, t)
        });
    });
}

#[test]
fn layer_norm_softmax_bce_chain() {
    trials("chain", |seed, rng| {
        let x = rand_tensor(rng, &[4, 16], -2.0, 2.0);
        let target = Tensor::from_fn(vec![4, 16], |i| if i % 16 == (i / 16) * 3 { 1.0 } else { 0.0 });
        let err = finite_diff_check(
            |g, v| {
                let ga = g.constant(Tensor::full(vec![16], 1.0));
                let be = g.constant(Tensor::zeros(vec![16]));
                let n = g.layer_norm(v, ga, be)?;
                let s = g.softmax(n)?;
                let t = g.constant(target.clone());
                g.bce(s, t)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert_close("chain", seed, err);
    });
}
