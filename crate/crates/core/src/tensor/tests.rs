use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::gradcheck;
use super::*;
use crate::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = numel(shape);
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks and log/sqrt domains are
/// never crossed by a finite-difference step.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], positive: bool) -> Tensor {
    let n = numel(shape);
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.5);
            if positive || rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

fn naive_conv2d(x: &Tensor, w: &Tensor) -> Tensor {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let mut out = vec![0.0; c_out * h * wd];
    for o in 0..c_out {
        for i in 0..h {
            for j in 0..wd {
                let mut acc = 0.0;
                for c in 0..c_in {
                    for u in 0..kh {
                        for v in 0..kw {
                            let si = i as isize + u as isize - (kh / 2) as isize;
                            let sj = j as isize + v as isize - (kw / 2) as isize;
                            if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < wd {
                                acc += w.at(&[o, c, u, v]) * x.at(&[c, si as usize, sj as usize]);
                            }
                        }
                    }
                }
                out[(o * h + i) * wd + j] = acc;
            }
        }
    }
    Tensor::new(&[c_out, h, wd], out).unwrap()
}

fn naive_conv1d(x: &Tensor, w: &Tensor, dilation: usize) -> Tensor {
    let (c_in, t) = (x.shape()[0], x.shape()[1]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let t_out = t - (k - 1) * dilation;
    let mut out = vec![0.0; c_out * t_out];
    for o in 0..c_out {
        for s in 0..t_out {
            for c in 0..c_in {
                for j in 0..k {
                    out[o * t_out + s] += w.at(&[o, c, j]) * x.at(&[c, s + j * dilation]);
                }
            }
        }
    }
    Tensor::new(&[c_out, t_out], out).unwrap()
}

fn values(v: Var<'_>) -> Vec<f64> {
    v.value().data().to_vec()
}

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

// ---- elementwise -------------------------------------------------------

#[test]
fn elementwise_examples() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
    assert_eq!(values(a.add(b).unwrap()), [4.0, 6.0]);
    let z = tape.constant(Tensor::from_vec(vec![0.0]));
    assert_eq!(values(z.sigmoid()), [0.5]);
    let r = tape.constant(Tensor::from_vec(vec![-2.0, 0.0, 3.0]));
    assert_eq!(values(r.relu()), [0.0, 0.0, 3.0]);
    let via_code = a.elementwise(Elementwise::Mul, Some(b)).unwrap();
    assert_eq!(values(via_code), [3.0, 8.0]);
    assert!(a.elementwise(Elementwise::Sub, None).is_err());
}

#[test]
fn elementwise_errors() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let b = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(a.add(b), Err(Error::Contract(_))));
    let bad = tape.constant(Tensor::from_vec(vec![1.0, 0.0]));
    assert!(matches!(bad.log(), Err(Error::Domain(_))));
    assert!(matches!(bad.sqrt(), Err(Error::Domain(_))));
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    type Unary = for<'t> fn(Var<'t>) -> Result<Var<'t>>;
    let unary: [(&str, Unary, bool); 10] = [
        ("neg", |v| Ok(v.neg()), false),
        ("log", |v| v.log(), true),
        ("exp", |v| Ok(v.exp()), false),
        ("sigmoid", |v| Ok(v.sigmoid()), false),
        ("tanh", |v| Ok(v.tanh()), false),
        ("relu", |v| Ok(v.relu()), false),
        ("square", |v| Ok(v.square()), false),
        ("sqrt", |v| v.sqrt(), true),
        ("scale", |v| Ok(v.scale(-2.5)), false),
        ("clamp", |v| Ok(v.clamp(-0.05, 0.05).shift(1.0)), false),
    ];
    for (name, op, positive) in unary {
        let x = rand_away_from_zero(&mut rng, &[3, 4], positive);
        let w = rand_tensor(&mut rng, &[3, 4]);
        let r = gradcheck(&[x], H, 1, |tape, v| {
            let weights = tape.constant(w.clone());
            Ok(op(v[0])?.mul(weights)?.sum())
        })
        .unwrap();
        assert!(r.max_rel_err <= GRAD_TOL, "{name}: {r:?}");
    }

    type Binary = for<'t> fn(Var<'t>, Var<'t>) -> Result<Var<'t>>;
    let binary: [(&str, Binary); 4] = [
        ("add", |a, b| a.add(b)),
        ("sub", |a, b| a.sub(b)),
        ("mul", |a, b| a.mul(b)),
        ("div", |a, b| a.div(b)),
    ];
    for (name, op) in binary {
        // plain, row-broadcast and column-broadcast operands
        for b_shape in [&[3, 4][..], &[4], &[3, 1]] {
            let a = rand_tensor(&mut rng, &[3, 4]);
            let b = rand_away_from_zero(&mut rng, b_shape, true);
            let w = rand_tensor(&mut rng, &[3, 4]);
            let r = gradcheck(&[a, b], H, 1, |tape, v| {
                Ok(op(v[0], v[1])?.mul(tape.constant(w.clone()))?.sum())
            })
            .unwrap();
            assert!(r.max_rel_err <= GRAD_TOL, "{name} {b_shape:?}: {r:?}");
        }
    }
}

// ---- matmul ------------------------------------------------------------

#[test]
fn matmul_examples() {
    let tape = Tape::new();
    let eye = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    assert_eq!(values(eye.matmul(m).unwrap()), [1.0, 2.0, 3.0, 4.0]);
    let row = tape.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
    let col = tape.constant(Tensor::new(&[2, 1], vec![2.0, 5.0]).unwrap());
    assert_eq!(values(row.matmul(col).unwrap()), [2.0]);
    assert!(matches!(m.matmul(row), Err(Error::Contract(_))));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let tape = Tape::new();
    let c = tape
        .constant(a.clone())
        .matmul(tape.constant(b.clone()))
        .unwrap();
    assert!(c.value().max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);

    let r = gradcheck(&[a, b], H, 1, |tape, v| {
        let w = tape.constant(Tensor::new(&[3, 2], vec![0.3, -1.0, 2.0, 0.5, -0.7, 1.1]).unwrap());
        Ok(v[0].matmul(v[1])?.mul(w)?.sum())
    })
    .unwrap();
    assert!(r.max_rel_err <= GRAD_TOL, "{r:?}");
}

// ---- convolutions ------------------------------------------------------

#[test]
fn conv2d_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let zeros = tape.constant(Tensor::zeros(&[2, 4, 5]));
    let w = tape.constant(rand_tensor(&mut rng, &[3, 2, 3, 3]));
    assert!(zeros
        .conv2d(w)
        .unwrap()
        .value()
        .data()
        .iter()
        .all(|&v| v == 0.0));

    let x = rand_tensor(&mut rng, &[1, 5, 6]);
    let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
    delta.data_mut()[4] = 1.0;
    let y = tape
        .constant(x.clone())
        .conv2d(tape.constant(delta))
        .unwrap();
    assert_eq!(*y.value(), x);

    let wrong = tape.constant(rand_tensor(&mut rng, &[3, 4, 3, 3]));
    assert!(matches!(
        tape.constant(x).conv2d(wrong),
        Err(Error::Contract(_))
    ));
}

#[test]
fn conv2d_matches_nested_loops_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[1, 5, 5]);
    let w = rand_tensor(&mut rng, &[1, 1, 3, 3]);
    let tape = Tape::new();
    let y = tape
        .constant(x.clone())
        .conv2d(tape.constant(w.clone()))
        .unwrap();
    assert!(y.value().max_abs_diff(&naive_conv2d(&x, &w)) <= 1e-12);

    let x = rand_tensor(&mut rng, &[2, 4, 5]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let proj = rand_tensor(&mut rng, &[3, 4, 5]);
    let r = gradcheck(&[x, w], H, 1, |tape, v| {
        Ok(v[0].conv2d(v[1])?.mul(tape.constant(proj.clone()))?.sum())
    })
    .unwrap();
    assert!(r.max_rel_err <= GRAD_TOL, "{r:?}");
}

#[test]
fn conv1d_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tape = Tape::new();
    let x = rand_tensor(&mut rng, &[1, 10]);
    let unit = tape.constant(Tensor::ones(&[1, 1, 1]));
    let y = tape.constant(x.clone()).conv1d(unit, 1).unwrap();
    assert_eq!(*y.value(), x);

    let k5 = tape.constant(rand_tensor(&mut rng, &[2, 1, 5]));
    assert_eq!(
        tape.constant(x.clone()).conv1d(k5, 1).unwrap().shape(),
        [2, 6]
    );

    let err = tape.constant(x).conv1d(k5, 3).unwrap_err();
    assert!(err.to_string().contains("at least 13"), "{err}");
}

#[test]
fn conv1d_matches_nested_loops_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for dilation in 1..=3 {
        let x = rand_tensor(&mut rng, &[3, 12]);
        let w = rand_tensor(&mut rng, &[2, 3, 3]);
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv1d(tape.constant(w.clone()), dilation)
            .unwrap();
        assert!(y.value().max_abs_diff(&naive_conv1d(&x, &w, dilation)) <= 1e-12);

        let t_out = 12 - 2 * dilation;
        let proj = rand_tensor(&mut rng, &[2, 2, t_out]);
        let xb = rand_tensor(&mut rng, &[2, 3, 12]);
        let r = gradcheck(&[xb, w], H, 1, |tape, v| {
            Ok(v[0]
                .conv1d(v[1], dilation)?
                .mul(tape.constant(proj.clone()))?
                .sum())
        })
        .unwrap();
        assert!(r.max_rel_err <= GRAD_TOL, "dilation {dilation}: {r:?}");
    }
}

#[test]
fn batched_conv1d_equals_per_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xb = rand_tensor(&mut rng, &[2, 3, 9]);
    let w = rand_tensor(&mut rng, &[4, 3, 3]);
    let tape = Tape::new();
    let yb = tape
        .constant(xb.clone())
        .conv1d(tape.constant(w.clone()), 2)
        .unwrap()
        .value();
    for b in 0..2 {
        let xs = Tensor::new(&[3, 9], xb.data()[b * 27..(b + 1) * 27].to_vec()).unwrap();
        let ys = naive_conv1d(&xs, &w, 2);
        for (a, e) in yb.data()[b * 20..(b + 1) * 20].iter().zip(ys.data()) {
            assert!((a - e).abs() <= 1e-12);
        }
    }
}

// ---- softmax and reductions ---------------------------------------------

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let s = |v: Vec<f64>| values(tape.constant(Tensor::from_vec(v)).softmax(0).unwrap());
    assert_eq!(s(vec![0.0; 4]), [0.25; 4]);
    let p = s(vec![0.0, 3f64.ln()]);
    assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    assert_eq!(s(vec![1000.0, 1000.0]), [0.5, 0.5]);
}

#[test]
fn softmax_along_axis_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let w = rand_tensor(&mut rng, &[2, 3, 4]);
    for axis in 0..3 {
        let r = gradcheck(&[x.clone()], H, 1, |tape, v| {
            Ok(v[0].softmax(axis)?.mul(tape.constant(w.clone()))?.sum())
        })
        .unwrap();
        assert!(r.max_rel_err <= GRAD_TOL, "axis {axis}: {r:?}");
    }
}

#[test]
fn reduce_examples() {
    let tape = Tape::new();
    let v = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    assert_eq!(v.sum().item(), 6.0);
    let (m, idx) = tape
        .constant(Tensor::from_vec(vec![2.0, 5.0, 1.0]))
        .max_with_index(None)
        .unwrap();
    assert_eq!((m.item(), idx[0]), (5.0, 1));
    assert_eq!(tape.constant(Tensor::ones(&[4, 4])).mean().item(), 1.0);
    let (_, tie) = tape
        .constant(Tensor::from_vec(vec![3.0, 7.0, 7.0]))
        .max_with_index(None)
        .unwrap();
    assert_eq!(tie, [1]);
    assert!(v.sum_axis(1).is_err());
}

#[test]
fn reductions_along_axes_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[3, 4, 2]);
    let tape = Tape::new();
    let s = tape.constant(x.clone()).sum_axis(1).unwrap().value();
    assert_eq!(s.shape(), [3, 2]);
    let expect: f64 = (0..4).map(|j| x.at(&[2, j, 1])).sum();
    assert!((s.at(&[2, 1]) - expect).abs() < 1e-15);

    for axis in 0..3 {
        let mut shape = vec![3, 4, 2];
        shape.remove(axis);
        let w = rand_tensor(&mut rng, &shape);
        for mean in [false, true] {
            let r = gradcheck(&[x.clone()], H, 1, |tape, v| {
                let red = if mean {
                    v[0].mean_axis(axis)?
                } else {
                    v[0].sum_axis(axis)?
                };
                Ok(red.mul(tape.constant(w.clone()))?.sum())
            })
            .unwrap();
            assert!(r.max_rel_err <= GRAD_TOL, "axis {axis} mean {mean}: {r:?}");
        }
        let r = gradcheck(&[x.clone()], H, 1, |tape, v| {
            Ok(v[0]
                .max_with_index(Some(axis))?
                .0
                .mul(tape.constant(w.clone()))?
                .sum())
        })
        .unwrap();
        assert!(r.max_rel_err <= GRAD_TOL, "max axis {axis}: {r:?}");
    }
}

// ---- structural ops ----------------------------------------------------

#[test]
fn concat_examples() {
    let tape = Tape::new();
    let a = tape.param(Tensor::from_vec(vec![1.0]));
    let b = tape.param(Tensor::from_vec(vec![2.0]));
    let c = tape.concat(&[a, b], 0).unwrap();
    assert_eq!(values(c), [1.0, 2.0]);
    let g = tape.backward(c.sum()).unwrap();
    assert_eq!(g.wrt(a).unwrap().data(), [1.0]);
    assert_eq!(g.wrt(b).unwrap().data(), [1.0]);

    let x = tape.constant(Tensor::ones(&[1, 4, 4]));
    let y = tape.constant(Tensor::zeros(&[1, 4, 4]));
    assert_eq!(tape.concat(&[x, y], 0).unwrap().shape(), [2, 4, 4]);
    let bad = tape.constant(Tensor::zeros(&[1, 4, 3]));
    assert!(matches!(tape.concat(&[x, bad], 0), Err(Error::Contract(_))));
}

#[test]
fn concat_gather_scatter_transpose_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_tensor(&mut rng, &[2, 3, 2]);
    let b = rand_tensor(&mut rng, &[2, 1, 2]);
    let w = rand_tensor(&mut rng, &[2, 4, 2]);
    let r = gradcheck(&[a, b], H, 1, |tape, v| {
        Ok(tape
            .concat(&[v[0], v[1]], 1)?
            .mul(tape.constant(w.clone()))?
            .sum())
    })
    .unwrap();
    assert!(r.max_rel_err <= GRAD_TOL, "concat: {r:?}");

    let x = rand_tensor(&mut rng, &[10]);
    let index: Rc<[usize]> = Rc::from(vec![0usize, 2, 4, 2, 3, 5, 9, 9]);
    let wg = rand_tensor(&mut rng, &[2, 4]);
    let r = gradcheck(&[x.clone()], H, 1, |tape, v| {
        let g = v[0].gather(index.clone(), &[2, 4])?;
        let s = g.scatter_add(index.clone(), &[10])?;
        Ok(g.mul(tape.constant(wg.clone()))?
            .sum()
            .add(s.square().sum())?)
    })
    .unwrap();
    assert!(r.max_rel_err <= GRAD_TOL, "gather/scatter: {r:?}");

    let m = rand_tensor(&mut rng, &[3, 5]);
    let wt = rand_tensor(&mut rng, &[5, 3]);
    let r = gradcheck(&[m], H, 1, |tape, v| {
        Ok(v[0]
            .transpose()?
            .mul(tape.constant(wt.clone()))?
            .reshape(&[15])?
            .sum())
    })
    .unwrap();
    assert!(r.max_rel_err <= GRAD_TOL, "transpose: {r:?}");
}

#[test]
fn narrow_slices_and_routes_gradient() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(&[2, 3, 2], (0..12).map(f64::from).collect()).unwrap());
    let n = x.narrow(1, 1, 2).unwrap();
    assert_eq!(n.shape(), [2, 2, 2]);
    assert_eq!(
        n.value().data(),
        &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]
    );
    assert!(x.narrow(1, 2, 2).is_err());
    assert!(x.narrow(3, 0, 1).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = rand_tensor(&mut rng, &[3, 4, 2]);
    let w = rand_tensor(&mut rng, &[3, 3, 2]);
    let r = gradcheck(&[a], H, 1, |tape, v| {
        let head = v[0].narrow(1, 0, 1)?;
        let tail = v[0].narrow(1, 1, 3)?;
        Ok(tail
            .mul(tape.constant(w.clone()))?
            .sum()
            .add(head.square().sum())?)
    })
    .unwrap();
    assert!(r.max_rel_err <= GRAD_TOL, "narrow: {r:?}");
}

// ---- batch norm and dropout ---------------------------------------------

#[test]
fn batch_norm_normalizes_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[3, 4, 5]).map(|v| 3.0 * v + 2.0);
    let tape = Tape::new();
    let (y, stats) = tape
        .constant(x)
        .batch_norm(
            tape.constant(Tensor::ones(&[3])),
            tape.constant(Tensor::zeros(&[3])),
            0,
            1e-12,
        )
        .unwrap();
    assert_eq!(stats.count, 20);
    let y = y.value();
    for c in 0..3 {
        let ch = &y.data()[c * 20..(c + 1) * 20];
        let mean = ch.iter().sum::<f64>() / 20.0;
        let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
        assert!(
            mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6,
            "{mean} {var}"
        );
    }

    let beta = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
    let (y, _) = tape
        .constant(rand_tensor(&mut rng, &[3, 4, 5]))
        .batch_norm(
            tape.constant(Tensor::zeros(&[3])),
            tape.constant(beta.clone()),
            0,
            1e-5,
        )
        .unwrap();
    let y = y.value();
    for c in 0..3 {
        assert!(y.data()[c * 20..(c + 1) * 20]
            .iter()
            .all(|&v| v == beta.data()[c]));
    }
}

#[test]
fn batch_norm_constant_channel_is_finite() {
    let tape = Tape::new();
    let (y, _) = tape
        .constant(Tensor::full(&[2, 6], 4.0))
        .batch_norm(
            tape.constant(Tensor::ones(&[2])),
            tape.constant(Tensor::zeros(&[2])),
            0,
            1e-5,
        )
        .unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));
    let (too_small, _) = (tape.constant(Tensor::ones(&[2, 1])), ());
    assert!(too_small
        .batch_norm(
            tape.constant(Tensor::ones(&[2])),
            tape.constant(Tensor::zeros(&[2])),
            0,
            1e-5
        )
        .is_err());
}

#[test]
fn batch_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (shape, axis) in [(vec![3, 4, 5], 0), (vec![4, 3, 6], 1), (vec![5, 3], 1)] {
        let x = rand_tensor(&mut rng, &shape);
        let c = shape[axis];
        let gamma = rand_away_from_zero(&mut rng, &[c], false);
        let beta = rand_tensor(&mut rng, &[c]);
        let w = rand_tensor(&mut rng, &shape);
        let r = gradcheck(&[x, gamma, beta], H, 1, |tape, v| {
            let (y, _) = v[0].batch_norm(v[1], v[2], axis, 1e-5)?;
            Ok(y.mul(tape.constant(w.clone()))?.sum())
        })
        .unwrap();
        assert!(r.max_rel_err <= GRAD_TOL, "{shape:?}/{axis}: {r:?}");
    }
}

#[test]
fn dropout_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let tape = Tape::new();
    let x = tape.constant(rand_tensor(&mut rng, &[50]));
    let same = x.dropout(0.0, true, &mut rng).unwrap();
    assert_eq!(*same.value(), *x.value());
    let eval = x.dropout(0.7, false, &mut rng).unwrap();
    assert_eq!(*eval.value(), *x.value());
    assert!(x.dropout(1.0, true, &mut rng).is_err());
}

#[test]
fn dropout_survivor_fraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let tape = Tape::no_grad();
    let n = 1_000_000;
    let y = tape
        .constant(Tensor::ones(&[n]))
        .dropout(0.5, true, &mut rng)
        .unwrap()
        .value();
    let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
    assert!((kept - 0.5).abs() <= 0.01, "{kept}");
    assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
}

// ---- backward ----------------------------------------------------------

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let a = tape.param(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap());
    let g = tape.backward(a.sum()).unwrap();
    assert_eq!(g.wrt(a).unwrap().data(), [1.0; 6]);

    let tape = Tape::new();
    let a = tape.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
    let loss = a.mul(a).unwrap().sum();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(a).unwrap().data(), [2.0, -4.0, 6.0]);

    assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    let frozen = Tape::no_grad();
    let c = frozen.param(Tensor::scalar(1.0));
    assert!(frozen.backward(c).is_err());
}

#[test]
fn backward_accumulates_over_fan_out() {
    let tape = Tape::new();
    let a = tape.param(Tensor::from_vec(vec![2.0]));
    let b = a.exp();
    let loss = b.mul(a).unwrap().add(b).unwrap().add(a).unwrap().sum();
    let g = tape.backward(loss).unwrap();
    // d/da (a e^a + e^a + a) = a e^a + 2 e^a + 1
    let e = 2f64.exp();
    assert!((g.wrt(a).unwrap().item() - (2.0 * e + 2.0 * e + 1.0)).abs() < 1e-12);
}

#[test]
fn custom_linear_op_uses_adjoint() {
    struct Reverse;
    impl LinearOp for Reverse {
        fn forward(&self, x: &Tensor) -> crate::Result<Tensor> {
            Ok(Tensor::from_vec(x.data().iter().rev().copied().collect()))
        }
        fn adjoint(&self, g: &Tensor) -> Tensor {
            Tensor::from_vec(g.data().iter().rev().copied().collect())
        }
    }
    let tape = Tape::new();
    let a = tape.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let w = tape.constant(Tensor::from_vec(vec![10.0, 20.0, 30.0]));
    let y = a.linear(Rc::new(Reverse)).unwrap();
    assert_eq!(values(y), [3.0, 2.0, 1.0]);
    let g = tape.backward(y.mul(w).unwrap().sum()).unwrap();
    assert_eq!(g.wrt(a).unwrap().data(), [30.0, 20.0, 10.0]);
}

// ---- properties ----------------------------------------------------------

fn small_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0..30.0f64, 1..64)
}

proptest! {
    #[test]
    fn softmax_is_probability_vector(z in small_vec()) {
        let tape = Tape::no_grad();
        let p = tape.constant(Tensor::from_vec(z.clone())).softmax(0).unwrap().value();
        let sum: f64 = p.data().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let (_, zi) = tape.constant(Tensor::from_vec(z)).max_with_index(None).unwrap();
        let (_, pi) = tape.constant((*p).clone()).max_with_index(None).unwrap();
        prop_assert_eq!(zi, pi);
    }

    #[test]
    fn backward_is_linear_in_loss_scale(x in small_vec(), c in -4.0..4.0f64) {
        let grad = |scale: f64| {
            let tape = Tape::new();
            let v = tape.param(Tensor::from_vec(x.iter().map(|v| v / 30.0).collect()));
            let loss = v.tanh().square().sum().scale(scale);
            tape.backward(loss).unwrap().wrt(v).unwrap().clone()
        };
        let (g1, gc) = (grad(1.0), grad(c));
        for (a, b) in g1.data().iter().zip(gc.data()) {
            prop_assert!((a * c - b).abs() <= 1e-12 * (a * c).abs().max(1e-300));
        }
    }

    #[test]
    fn random_composite_gradients(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[4, 6]);
        let w = rand_tensor(&mut rng, &[6, 3]);
        let r = gradcheck(&[x, w], H, 1, |_, v| {
            let h = v[0].matmul(v[1])?.tanh();
            let p = h.softmax(1)?;
            Ok(p.mul(h)?.sum())
        }).unwrap();
        prop_assert!(r.max_rel_err <= GRAD_TOL, "{:?}", r);
    }
}

#[test]
fn identical_seeds_give_identical_results() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let tape = Tape::new();
        let x = tape.param(rand_tensor(&mut rng, &[2, 5, 5]));
        let w = tape.param(rand_tensor(&mut rng, &[3, 2, 3, 3]));
        let y = x
            .conv2d(w)
            .unwrap()
            .dropout(0.3, true, &mut rng)
            .unwrap()
            .sigmoid();
        let loss = y.sum();
        let g = tape.backward(loss).unwrap();
        (
            loss.item().to_bits(),
            g.wrt(w).unwrap().clone(),
            g.wrt(x).unwrap().clone(),
        )
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}
