//! Gradient fidelity and numeric invariants of the tensor/tape core.

use fewshot::rng::{stream, Rng};
use fewshot::tensor::{grad_check, Tape, Tensor, Var};
use rand::Rng as _;

type OpGraph<'a> = &'a dyn Fn(&mut Tape, &[Var], &mut Rng) -> fewshot::tensor::Result<Var>;

const GRAD_TOL: f64 = 1e-6;
const FD_EPS: f64 = 1e-5;

/// Random tensor with entries pushed away from relu/pool kink points so the
/// central difference stays on one side of every non-smooth op.
fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let data: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| {
            let v: f64 = rng.gen_range(-1.5..1.5);
            if v.abs() < 1e-3 {
                v + 0.1 * v.signum().max(0.5)
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn random_positive(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let data: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(0.2..2.0))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Project an op output to a scalar through fixed random weights so the
/// gradient exercised is non-uniform.
fn weighted_sum(tape: &mut Tape, out: Var, rng: &mut Rng) -> fewshot::tensor::Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let w: Vec<f64> = (0..tape.value(out).numel())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let wv = tape.constant(Tensor::new(shape, w).unwrap());
    let prod = tape.mul(out, wv)?;
    tape.sum(prod)
}

fn assert_grad_ok(name: &str, err: f64) {
    assert!(err < GRAD_TOL, "{name}: grad error {err:.3e} >= {GRAD_TOL:.0e}");
}

#[test]
fn gradient_fidelity_for_every_differentiable_op() {
    for seed in 0..5u64 {
        let mut rng = stream(seed, "gradcheck", &[]);
        let nchw = random_tensor(&mut rng, &[2, 3, 8, 8]);
        let a = random_tensor(&mut rng, &[4, 5]);
        let b = random_tensor(&mut rng, &[4, 5]);
        let col = random_tensor(&mut rng, &[4, 1]);
        let m1 = random_tensor(&mut rng, &[3, 4]);
        let m2 = random_tensor(&mut rng, &[4, 2]);
        let kernel = random_tensor(&mut rng, &[4, 3, 3, 3]);
        let pos = random_positive(&mut rng, &[3, 4]);
        let mut w = stream(seed, "gradcheck-weights", &[]);

        let mut check = |name: &str, inputs: &[Tensor], f: OpGraph| {
            let mut w2 = w.clone();
            let err = grad_check(
                |tape, vars| {
                    let mut wr = w2.clone();
                    f(tape, vars, &mut wr)
                },
                inputs,
                FD_EPS,
            )
            .unwrap();
            // advance the weight stream so each op sees different weights
            let _: u64 = w.gen();
            let _ = &mut w2;
            assert_grad_ok(name, err);
        };

        check("add", &[a.clone(), b.clone()], &|t, v, r| {
            let o = t.add(v[0], v[1])?;
            weighted_sum(t, o, r)
        });
        check("add broadcast", &[a.clone(), col.clone()], &|t, v, r| {
            let o = t.add(v[0], v[1])?;
            weighted_sum(t, o, r)
        });
        check("sub", &[a.clone(), b.clone()], &|t, v, r| {
            let o = t.sub(v[0], v[1])?;
            weighted_sum(t, o, r)
        });
        check("mul", &[a.clone(), b.clone()], &|t, v, r| {
            let o = t.mul(v[0], v[1])?;
            weighted_sum(t, o, r)
        });
        check("mul broadcast", &[a.clone(), col.clone()], &|t, v, r| {
            let o = t.mul(v[0], v[1])?;
            weighted_sum(t, o, r)
        });
        let denom = random_positive(&mut stream(seed, "div", &[]), &[4, 5]);
        check("div", &[a.clone(), denom], &|t, v, r| {
            let o = t.div(v[0], v[1])?;
            weighted_sum(t, o, r)
        });
        check("scalar_mul", std::slice::from_ref(&a), &|t, v, r| {
            let o = t.scalar_mul(v[0], -1.7)?;
            weighted_sum(t, o, r)
        });
        check("add_scalar", std::slice::from_ref(&a), &|t, v, r| {
            let o = t.add_scalar(v[0], 0.4)?;
            weighted_sum(t, o, r)
        });
        check("matmul", &[m1.clone(), m2.clone()], &|t, v, r| {
            let o = t.matmul(v[0], v[1])?;
            weighted_sum(t, o, r)
        });
        check("conv2d", &[nchw.clone(), kernel.clone()], &|t, v, r| {
            let o = t.conv2d(v[0], v[1], 1, 1)?;
            weighted_sum(t, o, r)
        });
        check("conv2d stride2", &[nchw.clone(), kernel.clone()], &|t, v, r| {
            let o = t.conv2d(v[0], v[1], 2, 0)?;
            weighted_sum(t, o, r)
        });
        check("relu", std::slice::from_ref(&a), &|t, v, r| {
            let o = t.relu(v[0])?;
            weighted_sum(t, o, r)
        });
        check("max_pool2d", std::slice::from_ref(&nchw), &|t, v, r| {
            let o = t.max_pool2d(v[0], 2, 2)?;
            weighted_sum(t, o, r)
        });
        check("instance_norm", std::slice::from_ref(&nchw), &|t, v, r| {
            let o = t.instance_norm(v[0])?;
            weighted_sum(t, o, r)
        });
        check("mean_axes", std::slice::from_ref(&nchw), &|t, v, r| {
            let o = t.mean_axes(v[0], &[2, 3])?;
            weighted_sum(t, o, r)
        });
        check("std_axes", std::slice::from_ref(&nchw), &|t, v, r| {
            let o = t.std_axes(v[0], &[2, 3])?;
            weighted_sum(t, o, r)
        });
        check("softmax", std::slice::from_ref(&a), &|t, v, r| {
            let o = t.softmax(v[0], 1)?;
            weighted_sum(t, o, r)
        });
        check("log", std::slice::from_ref(&pos), &|t, v, r| {
            let o = t.log(v[0])?;
            weighted_sum(t, o, r)
        });
        check("exp", std::slice::from_ref(&a), &|t, v, r| {
            let o = t.exp(v[0])?;
            weighted_sum(t, o, r)
        });
        check("concat+slice", &[a.clone(), b.clone()], &|t, v, r| {
            let c = t.concat(&[v[0], v[1]], 0)?;
            let s = t.slice(c, 0, 2, 4)?;
            weighted_sum(t, s, r)
        });
        check("reshape+permute", std::slice::from_ref(&nchw), &|t, v, r| {
            let p = t.permute(v[0], &[0, 2, 3, 1])?;
            let o = t.reshape(p, vec![2 * 8 * 8, 3])?;
            weighted_sum(t, o, r)
        });
        check("l2_distance_pairwise", &[m1.clone(), random_tensor(&mut stream(seed, "l2b", &[]), &[5, 4])], &|t, v, r| {
            let o = t.l2_distance_pairwise(v[0], v[1])?;
            weighted_sum(t, o, r)
        });
        check("cosine_similarity_pairwise", &[m1.clone(), random_tensor(&mut stream(seed, "cosb", &[]), &[5, 4])], &|t, v, r| {
            let o = t.cosine_similarity_pairwise(v[0], v[1])?;
            weighted_sum(t, o, r)
        });
        check("cross_entropy", std::slice::from_ref(&m1), &|t, v, _| {
            t.cross_entropy(v[0], &[0, 2, 3])
        });
        check("l2_normalize_rows", std::slice::from_ref(&m1), &|t, v, r| {
            let o = t.l2_normalize_rows(v[0])?;
            weighted_sum(t, o, r)
        });
        check("upsample_nearest2d", &[random_tensor(&mut stream(seed, "up", &[]), &[1, 2, 3, 3])], &|t, v, r| {
            let o = t.upsample_nearest2d(v[0], 2)?;
            weighted_sum(t, o, r)
        });
        check("instance_norm composite", &[nchw.clone(), kernel.clone()], &|t, v, r| {
            let c = t.conv2d(v[0], v[1], 1, 1)?;
            let n = t.instance_norm(c)?;
            let rl = t.relu(n)?;
            let p = t.max_pool2d(rl, 2, 2)?;
            weighted_sum(t, p, r)
        });
    }
}

#[test]
fn cross_entropy_softmax_matmul_composite_under_1e6() {
    for seed in 0..5u64 {
        let mut rng = stream(seed, "composite", &[]);
        let x = random_tensor(&mut rng, &[3, 3]);
        let w = random_tensor(&mut rng, &[3, 3]);
        let err = grad_check(
            |tape, vars| {
                let z = tape.matmul(vars[0], vars[1])?;
                let s = tape.softmax(z, 1)?;
                tape.cross_entropy(s, &[2, 0, 1])
            },
            &[x, w],
            FD_EPS,
        )
        .unwrap();
        assert_grad_ok("cross_entropy∘softmax∘matmul", err);
    }
}

/// Independent 7-loop convolution with the same (ci, kh, kw) summation order
/// as the production kernel; equality must be exact, not approximate.
#[allow(clippy::too_many_arguments)]
fn conv2d_reference(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.get(&[b, ic, iy as usize, ix as usize])
                                    * w.get(&[oc, ic, ky, kx]);
                            }
                        }
                    }
                    out[((b * co + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, ho, wo], out).unwrap()
}

#[test]
fn conv2d_equals_naive_reference_exactly() {
    for seed in 0..5u64 {
        let mut rng = stream(seed, "convref", &[]);
        for &(shape, kshape, stride, pad) in &[
            ([2usize, 3, 9, 9], [4usize, 3, 3, 3], 1usize, 1usize),
            ([2, 3, 9, 9], [2, 3, 3, 3], 2, 0),
            ([1, 2, 5, 7], [3, 2, 2, 2], 1, 0),
            ([2, 1, 8, 8], [1, 1, 5, 5], 1, 2),
        ] {
            let x = random_tensor(&mut rng, &shape);
            let w = random_tensor(&mut rng, &kshape);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let out = tape.conv2d(xv, wv, stride, pad).unwrap();
            let reference = conv2d_reference(&x, &w, stride, pad);
            assert_eq!(tape.value(out).shape(), reference.shape());
            assert_eq!(tape.value(out).data(), reference.data(), "bit-exact mismatch");
        }
    }
}

#[test]
fn tape_replay_is_bit_deterministic() {
    let run = || {
        let mut rng = stream(11, "replay", &[]);
        let x = random_tensor(&mut rng, &[2, 3, 8, 8]);
        let w = random_tensor(&mut rng, &[4, 3, 3, 3]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.with_requires_grad(true));
        let wv = tape.leaf(w.with_requires_grad(true));
        let c = tape.conv2d(xv, wv, 1, 1).unwrap();
        let n = tape.instance_norm(c).unwrap();
        let r = tape.relu(n).unwrap();
        let p = tape.max_pool2d(r, 2, 2).unwrap();
        let flat = tape
            .reshape(p, vec![2, 4 * 4 * 4])
            .unwrap();
        let loss = tape.cross_entropy(flat, &[3, 7]).unwrap();
        let value = tape.value(loss).item();
        tape.backward(loss).unwrap();
        let gw = tape.grad(wv).unwrap().unwrap().data().to_vec();
        (value, gw)
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits(), "loss must be bit-identical");
    assert_eq!(g1, g2, "gradients must be bit-identical");
}

#[test]
fn softmax_rows_are_stochastic_within_1e12() {
    for seed in 0..10u64 {
        let mut rng = stream(seed, "softmax-prop", &[]);
        let x = random_tensor(&mut rng, &[7, 9]);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let s = tape.softmax(xv, 1).unwrap();
        let v = tape.value(s);
        for r in 0..7 {
            let row = &v.data()[r * 9..(r + 1) * 9];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}
