use coded_resnext::autodiff::*;
use coded_resnext::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const POINTS: u64 = 10;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Uniform values in `[-2, 2]` kept at least 0.05 away from zero.
fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..2.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.5..2.0))
}

fn check_points<F>(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> coded_resnext::Result<Var> + Copy,
{
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let point = make(&mut rng);
        let r = gradcheck(&point, DEFAULT_STEP, f).unwrap();
        assert!(r.passes(TOL), "{name} seed {seed}: {r:?}");
    }
}

/// Direct-loop grouped convolution used as an independent oracle.
fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize, groups: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let og = o / groups;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for bi in 0..n {
        for oc in 0..o {
            let g = oc / og;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for ci in 0..cg {
                        let ic = g * cg + ci;
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * cg + ci) * kh + i) * kw + j];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

#[test]
fn affine_with_identity_weights_is_identity() {
    let mut g = Graph::new(Precision::F64);
    let x = g.constant(t(&[2, 3], &[1., -2., 3., 0.5, 4., -1.]));
    let w = g.param(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let b = g.param(Tensor::zeros(&[3]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn relu_clamps_negative() {
    let mut g = Graph::new(Precision::F64);
    let x = g.constant(t(&[2], &[-1., 2.]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0., 2.]);
}

#[test]
fn eval_batch_norm_with_unit_stats_is_identity() {
    let mut g = Graph::new(Precision::F64);
    let data = t(&[2, 3, 2, 2], &(0..24).map(|i| i as f64 * 0.3 - 3.0).collect::<Vec<_>>());
    let x = g.constant(data.clone());
    let gamma = g.param(Tensor::ones(&[3]));
    let beta = g.param(Tensor::zeros(&[3]));
    let (mean, var) = (vec![0.0; 3], vec![1.0; 3]);
    let (y, moments) = g
        .batch_norm(x, gamma, beta, NormMode::Running { mean: &mean, var: &var, eps: 0.0 })
        .unwrap();
    assert!(moments.is_none());
    assert_eq!(g.value(y), &data);
}

#[test]
fn square_derivative_at_three_is_six() {
    let mut g = Graph::new(Precision::F64);
    let x = g.param(Tensor::scalar(3.0));
    let y = g.square(x);
    let grads = g.backward(y, None).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn mean_derivative_is_inverse_length() {
    let mut g = Graph::new(Precision::F64);
    let x = g.param(t(&[5], &[1., 2., 3., 4., 5.]));
    let y = g.mean_all(x).unwrap();
    let grads = g.backward(y, None).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&d| d == 0.2));
}

#[test]
fn non_scalar_output_needs_seed() {
    let mut g = Graph::new(Precision::F64);
    let x = g.param(t(&[3], &[1., 2., 3.]));
    let y = g.square(x);
    assert!(matches!(g.backward(y, None), Err(Error::NonScalarLoss(_))));
    let grads = g.backward(y, Some(Tensor::ones(&[3]))).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2., 4., 6.]);
}

#[test]
fn shape_errors_name_the_op_and_node() {
    let mut g = Graph::new(Precision::F64);
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 3]));
    let err = g.add(a, b).unwrap_err();
    match err {
        Error::Shape { op, node, .. } => {
            assert_eq!(op, "add");
            assert_eq!(node, 2);
        }
        other => panic!("unexpected {other:?}"),
    }
    let w = g.constant(Tensor::zeros(&[5, 4]));
    assert!(matches!(g.linear(a, w, None), Err(Error::Shape { op: "linear", .. })));
}

#[test]
fn gradients_have_leaf_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new(Precision::F64);
    let x = g.param(rand_tensor(&mut rng, &[4, 1]));
    let y = g.param(rand_tensor(&mut rng, &[1, 3]));
    let z = g.mul(x, y).unwrap();
    let s = g.sum_axes(z, &[0, 1]).unwrap();
    let grads = g.backward(s, None).unwrap();
    assert_eq!(grads.get(x).unwrap().shape(), &[4, 1]);
    assert_eq!(grads.get(y).unwrap().shape(), &[1, 3]);
}

#[test]
fn gradcheck_affine_below_1e6() {
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let point = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[5, 4]),
            rand_tensor(&mut rng, &[5]),
        ];
        let r = gradcheck(&point, DEFAULT_STEP, |g, v| g.linear(v[0], v[1], Some(v[2]))).unwrap();
        assert!(r.passes(1e-6), "seed {seed}: {r:?}");
    }
}

#[test]
fn gradcheck_elementwise_primitives() {
    let pair = |rng: &mut ChaCha8Rng| vec![rand_tensor(rng, &[3, 4]), rand_tensor(rng, &[3, 4])];
    check_points("add", pair, |g, v| g.add(v[0], v[1]));
    check_points("sub", pair, |g, v| g.sub(v[0], v[1]));
    check_points("mul", pair, |g, v| g.mul(v[0], v[1]));
    check_points(
        "div",
        |rng| vec![rand_tensor(rng, &[3, 4]), positive(rng, &[3, 4])],
        |g, v| g.div(v[0], v[1]),
    );
    let one = |rng: &mut ChaCha8Rng| vec![rand_tensor(rng, &[2, 5])];
    check_points("square", one, |g, v| Ok(g.square(v[0])));
    check_points("pow4", one, |g, v| Ok(g.powi(v[0], 4)));
    check_points("relu", one, |g, v| Ok(g.relu(v[0])));
    check_points("abs", one, |g, v| Ok(g.abs(v[0])));
    check_points("scale", one, |g, v| Ok(g.scale(v[0], -1.7)));
    check_points("add_scalar", one, |g, v| Ok(g.add_scalar(v[0], 0.3)));
    check_points("sqrt", |rng| vec![positive(rng, &[2, 5])], |g, v| Ok(g.sqrt(v[0])));
}

#[test]
fn gradcheck_broadcasting_binary_ops() {
    let make = |rng: &mut ChaCha8Rng| vec![rand_tensor(rng, &[3, 1, 4]), positive(rng, &[1, 2, 4])];
    check_points("add-bcast", make, |g, v| g.add(v[0], v[1]));
    check_points("mul-bcast", make, |g, v| g.mul(v[0], v[1]));
    check_points("div-bcast", make, |g, v| g.div(v[0], v[1]));
}

#[test]
fn gradcheck_reductions_and_views() {
    let one = |rng: &mut ChaCha8Rng| vec![rand_tensor(rng, &[2, 3, 4])];
    check_points("sum", one, |g, v| g.sum_axes(v[0], &[1]));
    check_points("mean", one, |g, v| g.mean_axes(v[0], &[1, 2]));
    check_points("mean_all", one, |g, v| g.mean_all(v[0]));
    check_points("reshape", one, |g, v| g.reshape(v[0], &[6, 4]));
    check_points(
        "concat",
        |rng| vec![rand_tensor(rng, &[2, 3, 2]), rand_tensor(rng, &[2, 1, 2])],
        |g, v| g.concat(&[v[0], v[1]], 1),
    );
}

#[test]
fn gradcheck_convolution() {
    for (groups, stride, pad, k, hw) in [(1, 1, 1, 3, 5), (2, 2, 1, 3, 5), (4, 1, 0, 3, 5), (2, 1, 0, 1, 3), (4, 1, 0, 1, 1)] {
        let make = move |rng: &mut ChaCha8Rng| {
            vec![
                rand_tensor(rng, &[2, 4, hw, hw]),
                rand_tensor(rng, &[4, 4 / groups, k, k]),
                rand_tensor(rng, &[4]),
            ]
        };
        let opts = ConvOptions { stride, padding: pad, groups };
        for seed in 0..POINTS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = gradcheck(&make(&mut rng), DEFAULT_STEP, |g, v| {
                g.conv2d(v[0], v[1], Some(v[2]), opts)
            })
            .unwrap();
            assert!(r.passes(TOL), "conv {opts:?} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn gradcheck_batch_norm_both_modes() {
    let make = |rng: &mut ChaCha8Rng| {
        vec![rand_tensor(rng, &[4, 3, 2, 2]), positive(rng, &[3]), rand_tensor(rng, &[3])]
    };
    check_points("bn-train", make, |g, v| {
        g.batch_norm(v[0], v[1], v[2], NormMode::Batch { eps: 1e-5 }).map(|r| r.0)
    });
    check_points("bn-train-dense", |rng| {
        vec![rand_tensor(rng, &[6, 3]), positive(rng, &[3]), rand_tensor(rng, &[3])]
    }, |g, v| g.batch_norm(v[0], v[1], v[2], NormMode::Batch { eps: 1e-5 }).map(|r| r.0));
    let (mean, var) = ([0.2, -0.1, 0.5], [1.3, 0.7, 2.0]);
    check_points("bn-eval", make, move |g, v| {
        g.batch_norm(v[0], v[1], v[2], NormMode::Running { mean: &mean, var: &var, eps: 1e-5 })
            .map(|r| r.0)
    });
}

#[test]
fn gradcheck_pool_and_cross_entropy() {
    check_points("maxpool", |rng| vec![rand_tensor(rng, &[2, 2, 6, 6])], |g, v| {
        g.max_pool2d(v[0], 3, 2, 1)
    });
    check_points("xent", |rng| vec![rand_tensor(rng, &[5, 4])], |g, v| {
        g.cross_entropy(v[0], &[0, 3, 1, 1, 2])
    });
}

#[test]
fn cross_entropy_matches_closed_form() {
    let mut g = Graph::new(Precision::F64);
    let logits = t(&[2, 3], &[1.0, 2.0, 0.5, -1.0, 0.0, 3.0]);
    let x = g.constant(logits.clone());
    let l = g.cross_entropy(x, &[1, 0]).unwrap();
    let row = |r: &[f64], y: usize| {
        let z: f64 = r.iter().map(|v| v.exp()).sum();
        z.ln() - r[y]
    };
    let expect = (row(&logits.data()[0..3], 1) + row(&logits.data()[3..6], 0)) / 2.0;
    assert!((g.value(l).data()[0] - expect).abs() < 1e-12);
}

#[test]
fn conv_matches_direct_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases = [(1, 1, 1, 3, 9), (1, 2, 0, 3, 9), (2, 1, 1, 3, 9), (4, 2, 3, 7, 9), (1, 1, 0, 1, 9), (4, 1, 0, 1, 9), (2, 1, 0, 1, 1), (2, 1, 1, 3, 1)];
    for (groups, stride, pad, k, hw) in cases {
        let x = rand_tensor(&mut rng, &[2, 4, hw, hw]);
        let w = rand_tensor(&mut rng, &[8, 4 / groups, k, k]);
        let b = rand_tensor(&mut rng, &[8]);
        let mut g = Graph::new(Precision::F64);
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g
            .conv2d(xv, wv, Some(bv), ConvOptions { stride, padding: pad, groups })
            .unwrap();
        let expect = naive_conv(&x, &w, Some(&b), stride, pad, groups);
        assert_eq!(g.shape(y), expect.shape());
        assert!(g.value(y).max_abs_diff(&expect) < 1e-12);
    }
}

#[test]
fn grouped_conv_with_one_group_equals_plain_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[3, 6, 7, 7]);
    let w = rand_tensor(&mut rng, &[5, 6, 3, 3]);
    let mut g = Graph::new(Precision::F64);
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g
        .conv2d(xv, wv, None, ConvOptions { stride: 1, padding: 1, groups: 1 })
        .unwrap();
    assert!(g.value(y).max_abs_diff(&naive_conv(&x, &w, None, 1, 1, 1)) < 1e-12);
}

#[test]
fn grouped_conv_equals_concatenated_independent_convs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[2, 4, 5, 5]);
    let w = rand_tensor(&mut rng, &[6, 2, 3, 3]);
    let mut g = Graph::new(Precision::F64);
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let grouped = g
        .conv2d(xv, wv, None, ConvOptions { stride: 1, padding: 1, groups: 2 })
        .unwrap();
    let mut halves = Vec::new();
    for half in 0..2 {
        let xs = Tensor::from_fn(&[2, 2, 5, 5], |i| {
            let (b, rest) = (i / 50, i % 50);
            x.data()[b * 100 + half * 50 + rest]
        });
        let ws = Tensor::new(vec![3, 2, 3, 3], w.data()[half * 54..(half + 1) * 54].to_vec()).unwrap();
        let (a, b) = (g.constant(xs), g.constant(ws));
        halves.push(g.conv2d(a, b, None, ConvOptions { stride: 1, padding: 1, groups: 1 }).unwrap());
    }
    let joined = g.concat(&halves, 1).unwrap();
    assert!(g.value(grouped).max_abs_diff(g.value(joined)) < 1e-12);
}

#[test]
fn forward_is_bit_identical_across_runs() {
    for precision in [Precision::F64, Precision::F32] {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let mut g = Graph::new(precision);
            let x = g.constant(rand_tensor(&mut rng, &[4, 3, 6, 6]));
            let w = g.param(rand_tensor(&mut rng, &[6, 3, 3, 3]));
            let gm = g.param(Tensor::ones(&[6]));
            let bt = g.param(Tensor::zeros(&[6]));
            let c = g.conv2d(x, w, None, ConvOptions { stride: 1, padding: 1, groups: 1 }).unwrap();
            let (n, _) = g.batch_norm(c, gm, bt, NormMode::Batch { eps: 1e-5 }).unwrap();
            let r = g.relu(n);
            let p = g.mean_axes(r, &[2, 3]).unwrap();
            let p = g.reshape(p, &[4, 6]).unwrap();
            let l = g.cross_entropy(p, &[0, 1, 2, 3]).unwrap();
            let grads = g.backward(l, None).unwrap();
            (g.value(l).clone(), grads.get(w).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn f32_mode_rounds_every_stored_value() {
    let mut g = Graph::new(Precision::F32);
    let x = g.constant(t(&[1], &[0.1]));
    let y = g.scale(x, 3.0);
    let v = g.value(y).data()[0];
    assert_eq!(v, v as f32 as f64);
}
