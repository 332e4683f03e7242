use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;
use crate::tensor::{Shape, Tensor};

fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn check<F>(f: F, inputs: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check(f, inputs, GradCheckOptions::default()).unwrap().max_rel_error
}

#[test]
fn conv_scaling_identity() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(Shape::new(1, 3, 3, 1), 1.0));
    let k = g.constant(Tensor::full(Shape::new(1, 1, 1, 1), 2.0));
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 2.0));
}

#[test]
fn conv_average_kernel_matches_window_mean() {
    let x = rand_tensor(Shape::new(1, 3, 3, 1), 3);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let k = g.constant(Tensor::full(Shape::new(3, 3, 1, 1), 1.0 / 9.0));
    let y = g.conv2d(xv, k, None, 1, 1).unwrap();
    assert_eq!(g.shape(y), Shape::new(1, 3, 3, 1));
    // direct dot product over the full window centred on (1, 1)
    let oracle: f64 = x.data().iter().map(|v| v / 9.0).sum();
    assert!((g.value(y).at(0, 1, 1, 0) - oracle).abs() < 1e-12);
    let mean = x.mean();
    assert!((g.value(y).at(0, 1, 1, 0) - mean).abs() < 1e-12);
}

#[test]
fn conv_stride_two_shape_and_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 4, 4, 1)));
    let k = g.constant(Tensor::zeros(Shape::new(3, 3, 1, 1)));
    let y = g.conv2d(x, k, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), Shape::new(1, 2, 2, 1));

    let bad = g.constant(Tensor::zeros(Shape::new(3, 3, 2, 1)));
    let err = g.conv2d(x, bad, None, 1, 1).unwrap_err();
    assert!(err.to_string().contains("channels"), "{err}");
    let even = g.constant(Tensor::zeros(Shape::new(2, 2, 1, 1)));
    assert!(g.conv2d(x, even, None, 1, 0).is_err());
}

#[test]
fn conv_output_extent_formula() {
    for (inp, k, s, p) in [(9usize, 3usize, 2usize, 1usize), (8, 5, 3, 2), (7, 1, 1, 0), (6, 3, 1, 0)] {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, inp, inp, 2)));
        let w = g.constant(Tensor::zeros(Shape::new(k, k, 2, 3)));
        let y = g.conv2d(x, w, None, s, p).unwrap();
        let expect = (inp + 2 * p - k) / s + 1;
        assert_eq!(g.shape(y), Shape::new(1, expect, expect, 3));
    }
}

fn identity_attention(g: &mut Graph<f64>, x: Var, window: usize) -> Result<Var> {
    g.window_attention(x, x, x, window)
}

#[test]
fn attention_uniform_input_is_fixed_point() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(Shape::new(1, 4, 4, 3), 0.7));
    let y = identity_attention(&mut g, x, 2).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
}

#[test]
fn attention_two_tokens_closed_form() {
    // tokens t0 = 1.0, t1 = -2.0; q = 2t, k = 0.5t, v = t + 1 (d = 1)
    let q = Tensor::from_vec(Shape::new(1, 1, 2, 1), vec![2.0, -4.0]).unwrap();
    let k = Tensor::from_vec(Shape::new(1, 1, 2, 1), vec![0.5, -1.0]).unwrap();
    let v = Tensor::from_vec(Shape::new(1, 1, 2, 1), vec![2.0, -1.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let y = g.window_attention(qv, kv, vv, 2).unwrap();
    for i in 0..2 {
        let s: Vec<f64> = (0..2).map(|j| q.data()[i] * k.data()[j]).collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        let expect: f64 = (0..2).map(|j| s[j].exp() / z * v.data()[j]).sum();
        assert!((g.value(y).data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn attention_rows_are_stochastic() {
    let s = Shape::new(2, 5, 7, 3);
    let q = rand_tensor(s, 1);
    let k = rand_tensor(s, 2);
    let v = rand_tensor(s.with_c(4), 3);
    let (_, probs) = attention::forward(s, 4, 3, q.data(), k.data(), v.data());
    let mut off = 0;
    for _ in 0..2 {
        for toks in attention::windows(5, 7, 3) {
            let t = toks.len();
            for i in 0..t {
                let row: f64 = probs[off + i * t..off + (i + 1) * t].iter().sum();
                assert!((row - 1.0).abs() < 1e-5);
            }
            off += t * t;
        }
    }
    assert_eq!(off, probs.len());
}

#[test]
fn attention_rejects_oversized_window() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 2, 2, 1)));
    assert!(g.window_attention(x, x, x, 3).is_err());
    assert!(g.window_attention(x, x, x, 0).is_err());
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 4)));
    let y = g.softmax_channels(z).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.25));

    let x = g.constant(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 3f64.ln()]).unwrap());
    let y = g.softmax_channels(x).unwrap();
    assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
    assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);

    let big = g.constant(Tensor::full(Shape::new(1, 1, 1, 2), 1000.0));
    let y = g.softmax_channels(big).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn sigmoid_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![0.0, -30.0, 2.5, -2.5]).unwrap());
    let y = g.sigmoid(x);
    let v = g.value(y).data();
    assert_eq!(v[0], 0.5);
    assert!(v[1] > 0.0 && v[1] < 1e-6);
    assert!((v[2] + v[3] - 1.0).abs() < 1e-15);
    let huge = g.constant(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![-1e4, 1e4]).unwrap());
    let y = g.sigmoid(huge);
    assert!(g.value(y).all_finite());
    assert_eq!(g.value(y).data(), &[0.0, 1.0]);
}

#[test]
fn instance_norm_examples() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full(Shape::new(1, 3, 3, 1), 0.1));
    let (y, _) = g.instance_norm(c, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let x = g.constant(Tensor::from_vec(Shape::new(1, 1, 2, 1), vec![1.0, 3.0]).unwrap());
    let (y, stats) = g.instance_norm(x, 1e-9).unwrap();
    assert!((g.value(y).data()[0] + 1.0).abs() < 1e-8);
    assert!((g.value(y).data()[1] - 1.0).abs() < 1e-8);
    assert_eq!(stats.mean, vec![2.0]);
    assert_eq!(stats.std, vec![1.0]);

    let r = rand_tensor(Shape::new(2, 4, 5, 3), 9);
    let rv = g.constant(r);
    let (y1, _) = g.instance_norm(rv, 1e-6).unwrap();
    let (y2, _) = g.instance_norm(y1, 1e-6).unwrap();
    let (a, b) = (g.value(y1), g.value(y2));
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-5);
    }
    // zero mean, unit variance per plane
    for n in 0..2 {
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|y| (0..5).map(move |x| (y, x))).map(|(y, x)| a.at(n, y, x, ch)).collect();
            let m = vals.iter().sum::<f64>() / 20.0;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 20.0;
            assert!(m.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}

#[test]
fn bilinear_examples() {
    let img = rand_tensor(Shape::new(1, 4, 5, 2), 4);
    let mut g = Graph::<f64>::new();
    let iv = g.constant(img.clone());
    let zero = g.constant(Tensor::zeros(Shape::new(1, 4, 5, 2)));
    let y = g.bilinear_sample(iv, zero).unwrap();
    assert_eq!(g.value(y), &img);

    // shifted = reference moved right by one pixel; sampling at x + 1 recovers it
    let reference = rand_tensor(Shape::new(1, 3, 6, 1), 5);
    let shifted = Tensor::from_fn(reference.shape(), |n, y, x, c| reference.at(n, y, x.saturating_sub(1), c));
    let sv = g.constant(shifted);
    let one = g.constant(Tensor::from_fn(Shape::new(1, 3, 6, 2), |_, _, _, c| if c == 0 { 1.0 } else { 0.0 }));
    let y = g.bilinear_sample(sv, one).unwrap();
    for yy in 0..3 {
        for x in 0..5 {
            assert_eq!(g.value(y).at(0, yy, x, 0), reference.at(0, yy, x, 0));
        }
    }

    let cols = g.constant(Tensor::from_vec(Shape::new(1, 1, 2, 1), vec![0.0, 1.0]).unwrap());
    let half = g.constant(Tensor::from_fn(Shape::new(1, 1, 2, 2), |_, _, _, c| if c == 0 { 0.5 } else { 0.0 }));
    let y = g.bilinear_sample(cols, half).unwrap();
    assert_eq!(g.value(y).data()[0], 0.5);
}

#[test]
fn upsample_doubles_uniform_flow_scale() {
    let mut g = Graph::<f64>::new();
    let f = g.constant(Tensor::from_fn(Shape::new(1, 3, 4, 2), |_, _, _, c| if c == 0 { 1.5 } else { -0.25 }));
    let up = g.upsample2x(f);
    let up = g.mul_scalar(up, 2.0);
    assert_eq!(g.shape(up), Shape::new(1, 6, 8, 2));
    for px in g.value(up).data().chunks(2) {
        assert_eq!(px, &[3.0, -0.5]);
    }
}

#[test]
fn grad_check_linear_and_sigmoid() {
    let x = rand_tensor(Shape::new(1, 2, 3, 2), 11);
    let w = rand_tensor(Shape::new(1, 1, 2, 3), 12);
    let err = check(|g, v| g.conv2d(v[0], v[1], None, 1, 0), &[x.clone(), w]);
    assert!(err < 1e-9, "{err}");
    let err = check(|g, v| Ok(g.sigmoid(v[0])), &[x]);
    assert!(err < 1e-7, "{err}");
}

#[test]
fn grad_check_reports_kinks() {
    // kink at 0 lies inside the eps stencil but outside the eps/2 one
    let x = Tensor::from_vec(Shape::scalar(), vec![0.75e-5]).unwrap();
    let r = grad_check(|g, v| Ok(g.leaky_relu(v[0], 0.1)), &[x], GradCheckOptions::default());
    assert!(matches!(r, Err(GradCheckError::NonDifferentiable { .. })), "{r:?}");
}

#[test]
fn grad_check_detects_corrupted_adjoint() {
    let x = rand_tensor(Shape::new(1, 2, 2, 1), 1);
    let opts = GradCheckOptions {
        adjoint_scale: 1.01,
        ..Default::default()
    };
    let r = grad_check(|g, v| Ok(g.sigmoid(v[0])), &[x], opts).unwrap();
    assert!(r.max_rel_error > 1e-5);
}

/// Blocked kernels on shapes spanning several pixel tiles and channel blocks.
#[test]
fn blocked_kernels_match_central_differences() {
    let s = Shape::new(2, 4, 13, 18);
    let (a, b) = (rand_tensor(s, 41), rand_tensor(s, 42));
    let k = rand_tensor(Shape::new(3, 3, 18, 19), 43);
    let k_narrow = rand_tensor(Shape::new(3, 3, 18, 3), 44);
    let errs = [
        ("correlation r3", check(|g, v| g.correlation(v[0], v[1], 3), &[a.clone(), b.clone()])),
        ("correlation r5", check(|g, v| g.symmetric_correlation(v[0], v[1], 5), &[a.clone(), b.clone()])),
        ("conv wide", check(|g, v| g.conv2d(v[0], v[1], None, 1, 1), &[a.clone(), k.clone()])),
        ("conv strided", check(|g, v| g.conv2d(v[0], v[1], None, 2, 1), &[a.clone(), k.clone()])),
        ("conv narrow", check(|g, v| g.conv2d(v[0], v[1], None, 1, 0), &[a.clone(), k_narrow.clone()])),
    ];
    for (op, e) in errs {
        assert!(e < 1e-5, "{op}: {e}");
    }
}

/// Every differentiable op on five random inputs.
#[test]
fn adjoints_match_central_differences() {
    let s = Shape::new(1, 4, 5, 3);
    for seed in 0..5u64 {
        let a = rand_tensor(s, seed * 10 + 1);
        let b = rand_tensor(s, seed * 10 + 2);
        let m = rand_tensor(s.with_c(1), seed * 10 + 3);
        let pos = a.map(|v| v.abs() + 0.5);
        let k3 = rand_tensor(Shape::new(3, 3, 3, 2), seed * 10 + 4);
        let bias = rand_tensor(Shape::new(1, 1, 1, 2), seed * 10 + 5);
        let k3_wide = rand_tensor(Shape::new(3, 3, 3, 12), seed * 10 + 9);
        let k1 = rand_tensor(Shape::new(1, 1, 3, 4), seed * 10 + 10);
        let flow = rand_tensor(s.with_c(2), seed * 10 + 6).map(|v| 1.7 * v + 0.31);
        let sc = rand_tensor(Shape::scalar(), seed * 10 + 7);
        let table = rand_tensor(Shape::new(1, 1, 4, 3), seed * 10 + 8);
        let mut errs: Vec<(&str, f64)> = vec![
            ("add", check(|g, v| g.add(v[0], v[1]), &[a.clone(), b.clone()])),
            ("sub", check(|g, v| g.sub(v[0], v[1]), &[a.clone(), b.clone()])),
            ("mul", check(|g, v| g.mul(v[0], v[1]), &[a.clone(), b.clone()])),
            ("mul_channel", check(|g, v| g.mul_channel(v[0], v[1]), &[a.clone(), m.clone()])),
            ("scale_by", check(|g, v| g.scale_by(v[0], v[1]), &[a.clone(), sc.clone()])),
            ("affine", check(|g, v| { let t = g.mul_scalar(v[0], 1.5); Ok(g.add_scalar(t, 0.3)) }, &[a.clone()])),
            ("one_minus", check(|g, v| Ok(g.one_minus(v[0])), &[a.clone()])),
            ("exp", check(|g, v| Ok(g.exp(v[0])), &[a.clone()])),
            ("sqrt", check(|g, v| Ok(g.sqrt(v[0])), &[pos.clone()])),
            ("sigmoid", check(|g, v| Ok(g.sigmoid(v[0])), &[a.clone()])),
            ("leaky_relu", check(|g, v| Ok(g.leaky_relu(v[0], 0.1)), &[a.clone()])),
            ("clamp", check(|g, v| Ok(g.clamp(v[0], -0.5, 0.5)), &[a.clone()])),
            ("softmax", check(|g, v| g.softmax_channels(v[0]), &[a.clone()])),
            ("l2_normalize", check(|g, v| Ok(g.l2_normalize(v[0], 1e-6)), &[a.clone()])),
            ("instance_norm", check(|g, v| Ok(g.instance_norm(v[0], 1e-5)?.0), &[a.clone()])),
            ("conv3x3", check(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1), &[a.clone(), k3.clone(), bias.clone()])),
            ("conv3x3_s2", check(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1), &[a.clone(), k3.clone(), bias.clone()])),
            ("conv3x3_wide", check(|g, v| g.conv2d(v[0], v[1], None, 1, 1), &[a.clone(), k3_wide.clone()])),
            ("conv1x1", check(|g, v| g.conv2d(v[0], v[1], None, 1, 0), &[a.clone(), k1.clone()])),
            ("concat", check(|g, v| g.concat(&[v[0], v[1]]), &[a.clone(), m.clone()])),
            ("slice", check(|g, v| g.slice_channels(v[0], 1, 2), &[a.clone()])),
            ("bilinear", check(|g, v| g.bilinear_sample(v[0], v[1]), &[a.clone(), flow.clone()])),
            ("upsample2x", check(|g, v| Ok(g.upsample2x(v[0])), &[a.clone()])),
            ("correlation", check(|g, v| g.correlation(v[0], v[1], 2), &[a.clone(), b.clone()])),
            ("symmetric_correlation", check(|g, v| g.symmetric_correlation(v[0], v[1], 2), &[a.clone(), b.clone()])),
            ("attention", check(|g, v| g.window_attention(v[0], v[1], v[2], 3), &[a.clone(), b.clone(), rand_tensor(s.with_c(2), seed + 99)])),
            ("gather", check(|g, v| g.gather(v[0], &[0, 1, 3, 3, 2, 0], Shape::new(1, 2, 3, 3)), &[table.clone()])),
            ("channel_norm", check(|g, v| Ok(g.channel_norm(v[0])), &[a.clone()])),
            ("mean", check(|g, v| Ok(g.mean(v[0])), &[a.clone()])),
            ("sum", check(|g, v| Ok(g.sum(v[0])), &[a.clone()])),
        ];
        errs.retain(|(_, e)| *e >= 1e-5);
        assert!(errs.is_empty(), "seed {seed}: {errs:?}");
    }
}

#[test]
fn unrelated_adjoint_is_exactly_zero() {
    let mut g = Graph::<f64>::new();
    let a = g.input(rand_tensor(Shape::new(1, 2, 2, 1), 1));
    let b = g.input(rand_tensor(Shape::new(1, 2, 2, 1), 2));
    let y = g.sigmoid(a);
    let loss = g.sum(y);
    let _later = g.exp(b);
    let grads = g.backward(loss);
    assert!(grads.get(b).is_none());
    assert!(grads.wrt(b).data().iter().all(|&v| v == 0.0));
    assert!(grads.get(a).is_some());
}

#[test]
fn mismatched_shapes_are_rejected() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(Shape::new(1, 2, 2, 3)));
    let b = g.constant(Tensor::zeros(Shape::new(1, 2, 2, 2)));
    assert!(g.add(a, b).is_err());
    assert!(g.mul(a, b).is_err());
    assert!(g.mul_channel(a, b).is_err());
    assert!(g.bilinear_sample(a, a).is_err());
    assert!(g.correlation(a, b, 1).is_err());
    let c = g.constant(Tensor::zeros(Shape::new(1, 3, 2, 1)));
    assert!(g.concat(&[a, c]).is_err());
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.input(rand_tensor(Shape::new(1, 6, 6, 4), 7).cast());
        let w = g.input(rand_tensor(Shape::new(3, 3, 4, 4), 8).cast());
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let z = g.window_attention(y, y, y, 4).unwrap();
        let l = g.mean(z);
        let grads = g.backward(l);
        (g.value(z).clone(), grads.wrt(w))
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(ga.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), gb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

fn naive_correlation(a: &Tensor<f64>, b: &Tensor<f64>, n: usize, y: usize, x: usize, dx: isize, dy: isize) -> f64 {
    let s = a.shape();
    let (yy, xx) = (y as isize + dy, x as isize + dx);
    if yy < 0 || xx < 0 || yy >= s.h as isize || xx >= s.w as isize {
        return 0.0;
    }
    (0..s.c).map(|c| a.at(n, y, x, c) * b.at(n, yy as usize, xx as usize, c)).sum()
}

#[test]
fn correlation_matches_direct_sums() {
    for (s, radius) in [
        (Shape::new(1, 5, 6, 11), 2),
        (Shape::new(2, 6, 19, 19), 3),
        (Shape::new(1, 4, 9, 3), 0),
        (Shape::new(1, 7, 11, 4), 5),
    ] {
        let (a, b) = (rand_tensor(s, 1), rand_tensor(s, 2));
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let plain = g.correlation(va, vb, radius).unwrap();
        let sym = g.symmetric_correlation(va, vb, radius).unwrap();
        let side = 2 * radius + 1;
        for n in 0..s.n {
            for y in 0..s.h {
                for x in 0..s.w {
                    for k in 0..side * side {
                        let (dx, dy) = sample::displacement(k, radius);
                        let want = naive_correlation(&a, &b, n, y, x, dx, dy);
                        assert!((g.value(plain).at(n, y, x, k) - want).abs() < 1e-12, "{s} r{radius}");
                        let (py, px) = (y as isize - dy, x as isize - dx);
                        let back = if py < 0 || px < 0 || py >= s.h as isize || px >= s.w as isize {
                            0.0
                        } else {
                            naive_correlation(&a, &b, n, py as usize, px as usize, dx, dy)
                        };
                        assert!((g.value(sym).at(n, y, x, k) - 0.5 * (want + back)).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn symmetric_correlation_is_even_for_identical_inputs() {
    let a = rand_tensor(Shape::new(1, 7, 9, 5), 3).cast::<f32>();
    let mut g = Graph::<f32>::new();
    let va = g.constant(a);
    let c = g.symmetric_correlation(va, va, 3).unwrap();
    let v = g.value(c);
    for y in 0..7 {
        for x in 0..9 {
            for k in 0..49 {
                assert_eq!(v.at(0, y, x, k), v.at(0, y, x, 48 - k));
            }
        }
    }
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let s = x.shape();
    let [kh, kw, cin, cout] = w.shape().dims();
    let oh = (s.h + 2 * pad - kh) / stride + 1;
    let ow = (s.w + 2 * pad - kw) / stride + 1;
    Tensor::from_fn(Shape::new(s.n, oh, ow, cout), |n, oy, ox, o| {
        let mut acc = 0.0;
        for ky in 0..kh {
            for kx in 0..kw {
                let iy = (oy * stride + ky) as isize - pad as isize;
                let ix = (ox * stride + kx) as isize - pad as isize;
                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                    continue;
                }
                for ci in 0..cin {
                    acc += x.at(n, iy as usize, ix as usize, ci) * w.at(ky, kx, ci, o);
                }
            }
        }
        acc
    })
}

#[test]
fn conv_paths_match_direct_sums() {
    let x = rand_tensor(Shape::new(2, 7, 6, 5), 11);
    for (k, cout, stride, pad) in [(3, 3, 1, 1), (3, 3, 2, 1), (3, 12, 1, 1), (3, 17, 1, 0), (3, 12, 2, 0), (1, 4, 1, 0), (1, 12, 1, 0), (1, 12, 2, 0), (5, 2, 1, 2), (5, 9, 1, 1)] {
        let w = rand_tensor(Shape::new(k, k, 5, cout), 12 + cout as u64);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
        let want = naive_conv(&x, &w, stride, pad);
        assert_eq!(g.shape(y), want.shape());
        for (a, b) in g.value(y).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "k{k} cout{cout} s{stride} p{pad}");
        }
    }
}
