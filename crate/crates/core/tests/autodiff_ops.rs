use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdanet::autodiff::{default_step, grad_check, Graph, Var, LEAKY_SLOPE, NORM_EPS};
use sdanet::{Error, Labels, Real, Tensor};

fn rand_tensor<T: Real>(dims: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims.to_vec(), |_| T::of(rng.random_range(-1.0..1.0)))
}

/// Straight nested-loop cross-correlation used as an oracle.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], pad: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = x.nchw().unwrap();
    let (cout, _, k, _) = w.nchw().unwrap();
    let mut out = Tensor::zeros([n, cout, h, wd]);
    for ni in 0..n {
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut s = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad as isize;
                                let sx = xx as isize + kx as isize - pad as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                s += x.data()[((ni * cin + ci) * h + sy as usize) * wd + sx as usize]
                                    * w.data()[((co * cin + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out.data_mut()[((ni * cout + co) * h + y) * wd + xx] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel() {
    let mut g = Graph::<f32>::new();
    let xt = rand_tensor::<f32>(&[2, 1, 4, 6], 1);
    let x = g.constant(xt.clone());
    let w = g.constant(Tensor::full([1, 1, 1, 1], 1.0));
    let b = g.constant(Tensor::zeros([1]));
    let y = g.conv2d(x, w, Some(b), 0).unwrap();
    assert!(g.value(y).bit_eq(&xt));
}

#[test]
fn conv_all_ones_sums_neighbourhood() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let w = g.constant(Tensor::full([1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, None, 1).unwrap();
    assert_eq!(g.value(y).data(), &[10.0, 10.0, 10.0, 10.0]);
}

#[test]
fn conv_matches_naive_oracle() {
    for (k, pad) in [(1, 0), (3, 1)] {
        let x = rand_tensor::<f64>(&[2, 3, 5, 6], 2);
        let w = rand_tensor::<f64>(&[4, 3, k, k], 3);
        let b = rand_tensor::<f64>(&[4], 4);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), pad).unwrap();
        let oracle = naive_conv(&x, &w, b.data(), pad);
        assert!(g.value(y).max_abs_diff(&oracle) < 1e-12);
    }
}

#[test]
fn conv_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros([3, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None, 1), Err(Error::Shape(_))));
    let w2 = g.constant(Tensor::zeros([3, 2, 3, 3]));
    assert!(matches!(g.conv2d(x, w2, None, 0), Err(Error::InvalidArgument(_))));
    let bad = g.constant(Tensor::new([1, 2, 1, 2], vec![1.0, f32::NAN, 0.0, 0.0]).unwrap());
    assert!(matches!(g.conv2d(bad, w2, None, 1), Err(Error::NonFinite(_))));
}

fn conv_grad_reports<T: Real>(h: f64) -> Vec<f64> {
    let x = rand_tensor::<T>(&[2, 3, 5, 5], 10);
    let w = rand_tensor::<T>(&[2, 3, 3, 3], 11);
    let b = rand_tensor::<T>(&[2], 12);
    let wx = w.clone();
    let bx = b.clone();
    let rx = grad_check(
        move |g: &mut Graph<T>, xv: Var| {
            let (wv, bv) = (g.constant(wx.clone()), g.constant(bx.clone()));
            let y = g.conv2d(xv, wv, Some(bv), 1)?;
            Ok(g.sum(y))
        },
        &x,
        h,
    )
    .unwrap();
    let (xw, bw) = (x.clone(), b.clone());
    let rw = grad_check(
        move |g: &mut Graph<T>, wv: Var| {
            let (xv, bv) = (g.constant(xw.clone()), g.constant(bw.clone()));
            let y = g.conv2d(xv, wv, Some(bv), 1)?;
            Ok(g.sum(y))
        },
        &w,
        h,
    )
    .unwrap();
    let rb = grad_check(
        move |g: &mut Graph<T>, bv: Var| {
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            let y = g.conv2d(xv, wv, Some(bv), 1)?;
            Ok(g.sum(y))
        },
        &b,
        h,
    )
    .unwrap();
    vec![rx.max_rel_err, rw.max_rel_err, rb.max_rel_err]
}

#[test]
fn conv_gradients_match_finite_differences() {
    for e in conv_grad_reports::<f32>(default_step::<f32>()) {
        assert!(e < 1e-3, "f32 rel err {}", e);
    }
    for e in conv_grad_reports::<f64>(default_step::<f64>()) {
        assert!(e < 1e-6, "f64 rel err {}", e);
    }
}

#[test]
fn maxpool_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.maxpool2x2(x).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);
    let c = g.constant(Tensor::full([1, 2, 4, 6], 0.7));
    let yc = g.maxpool2x2(c).unwrap();
    assert_eq!(g.value(yc).dims(), &[1, 2, 2, 3]);
    assert!(g.value(yc).data().iter().all(|&v| v == 0.7));
    let odd = g.constant(Tensor::zeros([1, 1, 3, 4]));
    assert!(g.maxpool2x2(odd).is_err());
}

#[test]
fn maxpool_gradient_routes_to_argmax() {
    let xt = Tensor::new([1, 1, 2, 4], vec![0.1f64, 0.9, 0.5, 0.2, 0.3, 0.4, 0.8, 0.6]).unwrap();
    let mut g = Graph::new();
    let x = g.param(xt.clone());
    let y = g.maxpool2x2(x).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let r = grad_check(
        |g: &mut Graph<f64>, x| {
            let y = g.maxpool2x2(x)?;
            Ok(g.sum(y))
        },
        &xt,
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6);
}

#[test]
fn maxpool_ties_go_to_first_index() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::full([1, 1, 2, 2], 1.0));
    let y = g.maxpool2x2(x).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn upsample_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new([1, 1, 1, 1], vec![5.0]).unwrap());
    let y = g.upsample_nearest2x(x).unwrap();
    assert_eq!(g.value(y).data(), &[5.0; 4]);
    let c = g.constant(Tensor::full([2, 3, 4, 4], 0.3));
    let up = g.upsample_nearest2x(c).unwrap();
    let down = g.maxpool2x2(up).unwrap();
    assert!(g.value(down).bit_eq(g.value(c)));
}

#[test]
fn leaky_relu_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new([2], vec![-1.0, 2.0]).unwrap());
    let y = g.leaky_relu(x, 0.01).unwrap();
    assert_eq!(g.value(y).data(), &[-0.01, 2.0]);
    let id = g.leaky_relu(x, 1.0).unwrap();
    assert!(g.value(id).bit_eq(g.value(x)));
    assert!(g.leaky_relu(x, -0.5).is_err());
}

#[test]
fn instance_norm_statistics() {
    let mut g = Graph::<f32>::new();
    let c = g.constant(Tensor::full([1, 2, 3, 3], 4.0));
    let y = g.instance_norm(c, NORM_EPS).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let x = g.constant(rand_tensor::<f32>(&[2, 3, 4, 5], 5));
    let y = g.instance_norm(x, NORM_EPS).unwrap();
    for plane in g.value(y).data().chunks(20) {
        let mean: f64 = plane.iter().map(|&v| v as f64).sum::<f64>() / 20.0;
        let var: f64 = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 20.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3, "var {}", var);
    }
}

#[test]
fn concat_and_slice() {
    let mut g = Graph::<f32>::new();
    let at = rand_tensor::<f32>(&[2, 1, 3, 3], 6);
    let bt = rand_tensor::<f32>(&[2, 1, 3, 3], 7);
    let (a, b) = (g.constant(at.clone()), g.constant(bt.clone()));
    let c = g.concat_channels(a, b).unwrap();
    assert_eq!(g.value(c).dims(), &[2, 2, 3, 3]);
    let a2 = g.slice_channels(c, 0, 1).unwrap();
    let b2 = g.slice_channels(c, 1, 1).unwrap();
    assert!(g.value(a2).bit_eq(&at));
    assert!(g.value(b2).bit_eq(&bt));
    let xx = g.concat_channels(a, a).unwrap();
    let second = g.slice_channels(xx, 1, 1).unwrap();
    assert!(g.value(second).bit_eq(&at));
    let other = g.constant(Tensor::zeros([2, 1, 4, 3]));
    assert!(g.concat_channels(a, other).is_err());
}

#[test]
fn softmax_cross_entropy_mse_values() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::zeros([1, 4, 2, 2]));
    let labels = Labels::new([1, 2, 2], vec![0, 1, 2, 3]).unwrap();
    let ce = g.cross_entropy(logits, &labels).unwrap();
    assert!((g.value(ce).data()[0] - 4f64.ln()).abs() < 1e-12);

    let x = g.constant(rand_tensor::<f64>(&[2, 3, 2, 2], 8));
    let p = g.softmax_channels(x).unwrap();
    let d = g.value(p).data();
    for n in 0..2 {
        for px in 0..4 {
            let s: f64 = (0..3).map(|c| d[n * 12 + c * 4 + px]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    let a = g.constant(Tensor::new([2], vec![0.0, 2.0]).unwrap());
    let z = g.constant(Tensor::zeros([2]));
    let m = g.mse(a, z).unwrap();
    assert_eq!(g.value(m).data(), &[2.0]);
    let same = g.mse(a, a).unwrap();
    assert_eq!(g.value(same).data(), &[0.0]);

    let bad = Labels::new([1, 2, 2], vec![0, 1, 2, 4]).unwrap();
    assert!(matches!(g.cross_entropy(logits, &bad), Err(Error::InvalidArgument(_))));
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.param(rand_tensor::<f32>(&[3, 2], 9));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::new([1], vec![2.0]).unwrap());
    let z = g.constant(Tensor::zeros([1]));
    let l = g.mse(x, z).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[4.0]);
}

#[test]
fn backward_errors() {
    let mut other = Graph::<f32>::new();
    let foreign = other.param(Tensor::zeros([1]));
    let empty = Graph::<f32>::new();
    assert!(matches!(empty.backward(foreign), Err(Error::Detached)));
    let mut g = Graph::<f32>::new();
    let c = g.constant(Tensor::zeros([2]));
    let s = g.sum(c);
    assert!(matches!(g.backward(s), Err(Error::Detached)));
    let p = g.param(Tensor::zeros([2]));
    assert!(matches!(g.backward(p), Err(Error::Shape(_))));
}

#[test]
fn gradients_accumulate_over_consumers() {
    let xt = rand_tensor::<f64>(&[1, 2, 2, 2], 13);
    let run = |use_f: bool, use_g: bool| {
        let mut g = Graph::new();
        let x = g.param(xt.clone());
        let f = g.leaky_relu(x, 0.3).unwrap();
        let h = g.scale(x, 2.5);
        let loss = match (use_f, use_g) {
            (true, true) => {
                let s = g.add(f, h).unwrap();
                g.sum(s)
            }
            (true, false) => g.sum(f),
            _ => g.sum(h),
        };
        g.backward(loss).unwrap().get(x).unwrap().clone()
    };
    let both = run(true, true);
    let f = run(true, false);
    let h = run(false, true);
    for ((b, x), y) in both.data().iter().zip(f.data()).zip(h.data()) {
        assert_eq!(*b, x + y);
    }
}

#[test]
fn grad_check_examples() {
    let x = rand_tensor::<f32>(&[3, 4], 14);
    let r = grad_check(|g: &mut Graph<f32>, x| Ok(g.sum(x)), &x, 1e-3).unwrap();
    assert!(r.max_rel_err < 1e-3, "{}", r.max_rel_err);
    let xd = x.cast::<f64>();
    let r = grad_check(|g: &mut Graph<f64>, x| Ok(g.sum(x)), &xd, 1e-6).unwrap();
    assert!(r.max_rel_err < 1e-9);

    let c = Tensor::full([3, 4], 0.25f64);
    let r = grad_check(
        move |g: &mut Graph<f64>, x| {
            let cv = g.constant(c.clone());
            g.mse(x, cv)
        },
        &xd,
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-4);

    let err = grad_check(|_g: &mut Graph<f64>, x| Ok(x), &xd, 1e-6);
    assert!(matches!(err, Err(Error::InvalidArgument(_))));
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.constant(rand_tensor::<f32>(&[2, 3, 8, 8], 15));
        let w = g.constant(rand_tensor::<f32>(&[4, 3, 3, 3], 16));
        let y = g.conv2d(x, w, None, 1).unwrap();
        let y = g.instance_norm(y, NORM_EPS).unwrap();
        let y = g.leaky_relu(y, LEAKY_SLOPE as f32).unwrap();
        g.value(y).clone()
    };
    assert!(run().bit_eq(&run()));
}
