use polypforge_nn::gradcheck::{check_param_gradients, GradCheckConfig};
use polypforge_nn::im2col::ConvGeom;
use polypforge_nn::{Graph, Init, NormKind, ParamId, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Init::Normal { mean: 0.0, std: 1.0 }.sample(shape, &mut rng)
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (o, _, k, _) = w.dims4().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * c + ic) * k + i) * k + j];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

/// Transposed convolution by its scatter definition.
fn naive_conv_transpose(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize, op: usize) -> Tensor<f64> {
    let (n, ci, h, wd) = x.dims4().unwrap();
    let (_, co, k, _) = w.dims4().unwrap();
    let oh = (h - 1) * stride + k + op - 2 * pad;
    let ow = (wd - 1) * stride + k + op - 2 * pad;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for ic in 0..ci {
            for y in 0..h {
                for xx in 0..wd {
                    let v = x.data()[((b * ci + ic) * h + y) * wd + xx];
                    for oc in 0..co {
                        for i in 0..k {
                            for j in 0..k {
                                let oy = (y * stride + i) as isize - pad as isize;
                                let ox = (xx * stride + j) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                out[((b * co + oc) * oh + oy as usize) * ow + ox as usize] +=
                                    v * w.data()[((ic * co + oc) * k + i) * k + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out).unwrap()
}

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-10, "{x} vs {y}");
    }
}

#[test]
fn conv2d_matches_naive_definition() {
    let store = ParamStore::<f64>::new();
    for &(stride, pad, k) in &[(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 3, 7), (2, 1, 4)] {
        let x = rand_tensor(&[2, 3, 9, 8], 1);
        let w = rand_tensor(&[4, 3, k, k], 2);
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let wv = g.input(w.clone());
        let y = g.conv2d(xv, wv, None, ConvGeom::square(k, stride, pad)).unwrap();
        assert_close(g.value(y), &naive_conv(&x, &w, stride, pad));
    }
}

#[test]
fn conv_transpose2d_matches_scatter_definition() {
    let store = ParamStore::<f64>::new();
    for &(stride, pad, k, op) in &[(2, 1, 3, 1), (2, 1, 4, 0), (1, 0, 4, 0), (2, 0, 2, 0)] {
        let x = rand_tensor(&[2, 3, 4, 5], 3);
        let w = rand_tensor(&[3, 2, k, k], 4);
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let wv = g.input(w.clone());
        let y = g.conv_transpose2d(xv, wv, None, ConvGeom::square(k, stride, pad), op).unwrap();
        assert_close(g.value(y), &naive_conv_transpose(&x, &w, stride, pad, op));
    }
}

#[test]
fn kernel_larger_than_input_is_a_shape_error() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::zeros(&[1, 1, 2, 2]));
    let w = g.input(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(g.conv2d(x, w, None, ConvGeom::square(5, 1, 0)).is_err());
}

fn add(store: &mut ParamStore<f64>, name: &str, shape: &[usize], seed: u64) -> ParamId {
    store.add_param(name, rand_tensor(shape, seed)).unwrap()
}

#[test]
fn every_op_passes_finite_difference_check() {
    let mut store = ParamStore::<f64>::new();
    let x = add(&mut store, "x", &[2, 2, 6, 6], 10);
    let w1 = add(&mut store, "w1", &[3, 2, 3, 3], 11);
    let b1 = add(&mut store, "b1", &[3], 12);
    let wt = add(&mut store, "wt", &[3, 2, 3, 3], 13);
    let bt = add(&mut store, "bt", &[2], 14);
    let gamma = add(&mut store, "gamma", &[2], 15);
    let beta = add(&mut store, "beta", &[2], 16);
    let lw = add(&mut store, "lw", &[3, 2], 17);
    let lb = add(&mut store, "lb", &[3], 18);
    let ids: Vec<ParamId> = store.param_ids().collect();

    let cfg = GradCheckConfig { samples: 120, eps: 1e-6, floor: 1e-7, seed: 3 };
    let report = check_param_gradients(&mut store, &ids, cfg, |g| {
        let xv = g.param(x);
        let p = g.reflect_pad(xv, 1)?;
        let (w1v, b1v) = (g.param(w1), g.param(b1));
        let c = g.conv2d(p, w1v, Some(b1v), ConvGeom::square(3, 2, 0))?;
        let c = g.normalize(c, NormKind::Instance, 1e-5, None)?;
        let c = g.leaky_relu(c, 0.2);
        let (wtv, btv) = (g.param(wt), g.param(bt));
        let u = g.conv_transpose2d(c, wtv, Some(btv), ConvGeom::square(3, 2, 1), 1)?;
        let u = g.normalize(u, NormKind::Batch, 1e-5, None)?;
        let (gv, bv) = (g.param(gamma), g.param(beta));
        let u = g.channel_affine(u, gv, bv)?;
        let t = g.tanh(u);
        let s = g.sigmoid(u);
        let m = g.mul(t, s)?;
        let d = g.sub(m, xv)?;
        let a = g.abs(d);
        let l1 = g.mean(a);
        let sq = g.square(d);
        let l2 = g.sum(sq);
        let l2 = g.scale(l2, 0.01);
        let pooled = g.max_pool2d(u, 3, 2, 1)?;
        let avg = g.global_avg_pool(pooled)?;
        let (lwv, lbv) = (g.param(lw), g.param(lb));
        let logits = g.linear(avg, lwv, Some(lbv))?;
        let ce = g.softmax_cross_entropy(logits, &[2, 0], Some(&[1.0, 0.5, 2.0]))?;
        let flat = g.reshape(logits, &[6])?;
        let flat = g.reshape(flat, &[1, 1, 2, 3])?;
        let bce = g.bce_with_logits(flat, 1.0);
        let shifted = g.add_scalar(bce, 0.5);
        let total = g.add(l1, l2)?;
        let total = g.add(total, ce)?;
        g.add(total, shifted)
    })
    .unwrap();
    let worst = report.worst().unwrap();
    assert!(report.max_rel_error() < 1e-5, "worst sample {worst:?}");
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let a = add(&mut store, "a", &[4], 1);
    let b = add(&mut store, "b", &[4], 2);
    let mut g = Graph::new(&store);
    g.freeze(&[b]);
    let (av, bv) = (g.param(a), g.param(b));
    let m = g.mul(av, bv).unwrap();
    let l = g.sum(m);
    let grads = g.backward(l).unwrap();
    assert!(grads.param(a).is_some());
    assert!(grads.param(b).is_none());
}

#[test]
fn batch_norm_eval_uses_running_statistics() {
    use polypforge_nn::layers::{apply_buffer_updates, BatchNorm2d};
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm2d::new(&mut store, "bn", 2).unwrap();
    let x = rand_tensor(&[4, 2, 3, 3], 9).map(|v| v * 3.0 + 1.0);
    let updates = {
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        bn.forward(&mut g, xv).unwrap();
        g.take_buffer_updates()
    };
    assert_eq!(updates.len(), 2);
    apply_buffer_updates(&mut store, updates);
    let rm = store.buffer(bn.running_mean).data().to_vec();
    assert!(rm.iter().all(|v| v.abs() > 1e-3));
    // Evaluation output of the same sample is independent of batch companions.
    let single = |store: &ParamStore<f64>, batch: &Tensor<f64>| {
        let mut g = Graph::eval(store);
        let xv = g.input(batch.clone());
        let y = bn.forward(&mut g, xv).unwrap();
        g.value(y).select_batch(&[0])
    };
    let a = single(&store, &x);
    let b = single(&store, &x.select_batch(&[0]));
    assert_eq!(a, b);
}

#[test]
fn adam_and_sgd_reduce_a_quadratic() {
    use polypforge_nn::optim::{Adam, Sgd};
    for use_adam in [false, true] {
        let mut store = ParamStore::<f64>::new();
        let p = store.add_param("p", Tensor::new(vec![3], vec![3.0, -2.0, 1.0]).unwrap()).unwrap();
        let mut adam = Adam::new(vec![p], 0.1, 0.9, 0.999);
        let mut sgd = Sgd::new(vec![p], 0.1, 0.9, 0.0);
        let loss = |store: &ParamStore<f64>| {
            let mut g = Graph::new(store);
            let v = g.param(p);
            let s = g.square(v);
            let l = g.sum(s);
            (g.value(l).item(), g.backward(l).unwrap())
        };
        let (start, _) = loss(&store);
        for _ in 0..200 {
            let (_, grads) = loss(&store);
            if use_adam {
                adam.step(&mut store, &grads);
            } else {
                sgd.step(&mut store, &grads);
            }
        }
        let (end, _) = loss(&store);
        assert!(end < start * 1e-3, "adam={use_adam}: {start} -> {end}");
    }
}
