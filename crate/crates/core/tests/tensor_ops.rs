//! Tensor ops against nested-loop references and finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xnet_core::tensor::kernels::{conv2d, matmul, softmax_last};
use xnet_core::tensor::roi::roi_align;
use xnet_core::tensor::{Conv2dSpec, Graph, Tensor, Var};

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    dil: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (k, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
    let mut out = Tensor::zeros([n, k, oh, ow]);
    for ni in 0..n {
        for ki in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.get(&[ki]);
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i * dil) as isize - pad as isize;
                                let ix = (ox * stride + j * dil) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.get(&[ni, ci, iy as usize, ix as usize])
                                        * w.get(&[ki, ci, i, j]);
                                }
                            }
                        }
                    }
                    out.set(&[ni, ki, oy, ox], s);
                }
            }
        }
    }
    out
}

#[test]
fn conv_of_ones_sums_window() {
    let x = Tensor::<f64>::ones([1, 1, 3, 3]);
    let w = Tensor::<f64>::ones([1, 1, 3, 3]);
    let b = Tensor::<f64>::zeros([1]);
    let y = conv2d(&x, &w, &b, Conv2dSpec::new(1, 1, 0)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.item(), 9.0);
}

#[test]
fn conv_identity_kernel_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[1, 1, 6, 5], &mut rng);
    let mut w = Tensor::<f64>::zeros([1, 1, 3, 3]);
    w.set(&[0, 0, 1, 1], 1.0);
    let y = conv2d(&x, &w, &Tensor::zeros([1]), Conv2dSpec::new(1, 1, 1)).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn dilated_conv_matches_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (stride, dil, pad) in [(1, 2, 0), (1, 2, 2), (2, 1, 1), (1, 3, 3), (2, 2, 1)] {
        let x = rand_tensor(&[1, 2, 5, 5], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let got = conv2d(&x, &w, &b, Conv2dSpec::new(stride, dil, pad)).unwrap();
        let want = naive_conv(&x, &w, &b, stride, dil, pad);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) < 1e-10);
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let x = Tensor::<f64>::ones([1, 2, 3, 3]);
    let w = Tensor::<f64>::ones([1, 3, 3, 3]);
    assert!(conv2d(&x, &w, &Tensor::zeros([1]), Conv2dSpec::new(1, 1, 0)).is_err());
    let w = Tensor::<f64>::ones([1, 2, 3, 3]);
    assert!(conv2d(&x, &w, &Tensor::zeros([1]), Conv2dSpec::new(1, 2, 0)).is_err());
}

#[test]
fn matmul_known_values() {
    let a = Tensor::<f64>::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::<f64>::from_f64([2, 2], &[5.0, 6.0, 7.0, 8.0]).unwrap();
    assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    let eye = Tensor::<f64>::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(matmul(&eye, &a).unwrap(), a);
    assert!(matmul(&a, &Tensor::ones([3, 2])).is_err());
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&[7, 3], &mut rng);
    let b = rand_tensor(&[3, 5], &mut rng);
    let c = matmul(&a, &b).unwrap();
    for i in 0..7 {
        for j in 0..5 {
            let s: f64 = (0..3).map(|k| a.get(&[i, k]) * b.get(&[k, j])).sum();
            assert!((c.get(&[i, j]) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_cases() {
    let x = Tensor::<f64>::zeros([3]);
    for v in softmax_last(&x).unwrap().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = Tensor::<f64>::from_f64([2], &[1000.0, 0.0]).unwrap();
    let y = softmax_last(&x).unwrap();
    assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1].abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&[4, 6], &mut rng);
    let y = softmax_last(&x).unwrap();
    for r in 0..4 {
        let row: Vec<f64> = (0..6).map(|j| x.get(&[r, j])).collect();
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        let mut total = 0.0;
        for j in 0..6 {
            let p = y.get(&[r, j]);
            assert!((p - row[j].exp() / z).abs() < 1e-14);
            assert!((0.0..=1.0).contains(&p));
            total += p;
        }
        assert!((total - 1.0).abs() < 1e-6);
    }
}

/// Bilinear sample with zeros more than one cell outside the map.
fn sample(f: &Tensor<f64>, c: usize, y: f64, x: f64) -> f64 {
    let (h, w) = (f.shape()[1] as f64, f.shape()[2] as f64);
    if y < -1.0 || y > h || x < -1.0 || x > w {
        return 0.0;
    }
    let y = y.clamp(0.0, h - 1.0);
    let x = x.clamp(0.0, w - 1.0);
    let (y0, x0) = (y.floor(), x.floor());
    let (y1, x1) = ((y0 + 1.0).min(h - 1.0), (x0 + 1.0).min(w - 1.0));
    let (ly, lx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| f.get(&[c, yy as usize, xx as usize]);
    (1.0 - ly) * (1.0 - lx) * at(y0, x0)
        + (1.0 - ly) * lx * at(y0, x1)
        + ly * (1.0 - lx) * at(y1, x0)
        + ly * lx * at(y1, x1)
}

#[test]
fn roi_align_matches_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let f = rand_tensor(&[3, 8, 9], &mut rng);
    let boxes = [
        [2.0, 3.0, 6.0, 5.0],
        [-3.0, -2.0, 8.0, 8.0],
        [10.5, 7.25, 5.5, 9.0],
        [0.0, 0.0, 18.0, 16.0],
    ];
    let scale = 0.5;
    let got = roi_align(&f, &boxes, scale).unwrap();
    for (n, b) in boxes.iter().enumerate() {
        let (x0, y0) = (b[0] * scale - 0.5, b[1] * scale - 0.5);
        let (bw, bh) = (b[2] * scale / 3.0, b[3] * scale / 3.0);
        for c in 0..3 {
            for py in 0..3 {
                for px in 0..3 {
                    let mut s = 0.0;
                    for sy in 0..2 {
                        for sx in 0..2 {
                            let y = y0 + (py as f64 + (sy as f64 + 0.5) / 2.0) * bh;
                            let x = x0 + (px as f64 + (sx as f64 + 0.5) / 2.0) * bw;
                            s += sample(&f, c, y, x);
                        }
                    }
                    let g = got.get(&[n, c, py, px]);
                    assert!((g - s / 4.0).abs() < 1e-10, "box {n} c {c} bin {py},{px}");
                }
            }
        }
    }
}

/// Checks every tracked input of `build` against central differences.
fn grad_check(inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let h = 1e-5;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let l = build(&mut g, &vars);
        g.value(l).item()
    };
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).unwrap();
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            assert!(rel < 1e-4, "input {k}[{i}]: autodiff {a} vs numeric {numeric}");
        }
    }
}

/// Fixed random weights so scalar losses depend on every output element.
fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(v).to_vec();
    let w = g.constant(rand_tensor(&shape, &mut rng));
    let p = g.mul(v, w).unwrap();
    g.sum(p).unwrap()
}

#[test]
fn gradcheck_conv_pool_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[2, 2, 6, 6], &mut rng);
    let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
    let b = rand_tensor(&[3], &mut rng);
    grad_check(&[x, w, b], |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], Conv2dSpec::new(1, 2, 2)).unwrap();
        let y = g.relu(y).unwrap();
        let y = g.max_pool2d(y, 2).unwrap();
        weighted_sum(g, y, 2)
    });
}

#[test]
fn gradcheck_matmul_bias_softmax_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&[4, 3], &mut rng);
    let b = rand_tensor(&[3, 5], &mut rng);
    let bias = rand_tensor(&[5], &mut rng);
    grad_check(&[a, b, bias], |g, v| {
        let y = g.linear(v[0], v[1], v[2]).unwrap();
        let y = g.softmax(y).unwrap();
        let y = g.transpose(y).unwrap();
        weighted_sum(g, y, 3)
    });
}

#[test]
fn gradcheck_elementwise_and_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&[2, 6], &mut rng);
    let b = rand_tensor(&[2, 6], &mut rng);
    grad_check(&[a, b], |g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        let d = g.sub(v[0], v[1]).unwrap();
        let m = g.mul(s, d).unwrap();
        let m = g.scale(m, 0.7).unwrap();
        let sg = g.sigmoid(m).unwrap();
        let c = g.concat(&[sg, v[0]], 0).unwrap();
        let c2 = g.concat(&[c, c], 1).unwrap();
        let r = g.reshape(c2, &[6, 8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = g.dropout(r, 0.3, &mut rng).unwrap();
        let w = weighted_sum(g, r, 5);
        let mean = g.mean(v[1]).unwrap();
        g.add(w, mean).unwrap()
    });
}

#[test]
fn gradcheck_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = rand_tensor(&[3, 4], &mut rng);
    let t = rand_tensor(&[3, 4], &mut rng);
    grad_check(&[p.clone(), t.clone()], |g, v| g.l1_loss(v[0], v[1]).unwrap());
    grad_check(&[p.clone(), t], |g, v| g.mse_loss(v[0], v[1]).unwrap());
    grad_check(&[p], |g, v| g.softmax_cross_entropy(v[0], &[0, 3, 1]).unwrap());
}

#[test]
fn gradcheck_roi_align_and_gather() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f = rand_tensor(&[2, 6, 7], &mut rng);
    grad_check(std::slice::from_ref(&f), |g, v| {
        let y = g
            .roi_align(v[0], &[[1.3, 2.1, 7.4, 6.2], [-2.0, 4.0, 9.0, 7.5]], 0.5)
            .unwrap();
        weighted_sum(g, y, 9)
    });
    let src: Vec<Option<usize>> = (0..84).map(|i| if i % 5 == 0 { None } else { Some((i * 7) % 84) }).collect();
    grad_check(&[f], move |g, v| {
        let y = g.gather(v[0], src.clone(), &[2, 6, 7]).unwrap();
        weighted_sum(g, y, 10)
    });
}

#[test]
fn composite_conv_fc_softmax_ce_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&[2, 1, 5, 5], &mut rng);
    let w = rand_tensor(&[2, 1, 3, 3], &mut rng);
    let b = rand_tensor(&[2], &mut rng);
    let fw = rand_tensor(&[18, 3], &mut rng);
    let fb = rand_tensor(&[3], &mut rng);
    grad_check(&[x, w, b, fw, fb], |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], Conv2dSpec::new(1, 1, 0)).unwrap();
        let y = g.relu(y).unwrap();
        let y = g.reshape(y, &[2, 18]).unwrap();
        let y = g.linear(y, v[3], v[4]).unwrap();
        g.softmax_cross_entropy(y, &[2, 0]).unwrap()
    });
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = rand_tensor(&[1, 3, 16, 16], &mut rng);
        let w = rand_tensor(&[8, 3, 3, 3], &mut rng);
        conv2d(&x, &w, &Tensor::zeros([8]), Conv2dSpec::new(1, 2, 2)).unwrap()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
