use super::*;
use crate::diffcore::{grad_check, GradCheckOptions, RngStream};
use proptest::prelude::*;

fn rand_array(rng: &mut RngStream, shape: &[usize]) -> Array {
    rng.normal_array(shape)
}

/// Nested-loop reference for an unpadded NHWC convolution.
fn conv_reference(input: &Array, kernel: &Array, stride: usize) -> Array {
    let s = input.shape();
    let k = kernel.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (kh, kw, o) = (k[0], k[1], k[3]);
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut out = Array::zeros(&[b, oh, ow, o]);
    for bi in 0..b {
        for y in 0..oh {
            for x in 0..ow {
                for oc in 0..o {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            for ic in 0..c {
                                let iy = y * stride + ky;
                                let ix = x * stride + kx;
                                acc += input.data()[((bi * h + iy) * w + ix) * c + ic]
                                    * kernel.data()[((ky * kw + kx) * c + ic) * o + oc];
                            }
                        }
                    }
                    out.data_mut()[((bi * oh + y) * ow + x) * o + oc] = acc;
                }
            }
        }
    }
    out
}

/// Scatter-definition reference for a transposed convolution.
fn conv_t_reference(input: &Array, kernel: &Array, stride: usize, pad: usize) -> Array {
    let s = input.shape();
    let k = kernel.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (kh, kw, o) = (k[1], k[2], k[3]);
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (w - 1) * stride + kw - 2 * pad;
    let mut out = Array::zeros(&[b, oh, ow, o]);
    for bi in 0..b {
        for iy in 0..h {
            for ix in 0..w {
                for ic in 0..c {
                    let v = input.data()[((bi * h + iy) * w + ix) * c + ic];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let y = (iy * stride + ky) as isize - pad as isize;
                            let x = (ix * stride + kx) as isize - pad as isize;
                            if y < 0 || x < 0 || y >= oh as isize || x >= ow as isize {
                                continue;
                            }
                            for oc in 0..o {
                                out.data_mut()[((bi * oh + y as usize) * ow + x as usize) * o + oc] +=
                                    v * kernel.data()[((ic * kh + ky) * kw + kx) * o + oc];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn assert_close(a: &Array, b: &Array, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn relu_forward() {
    let mut t = Tape::new();
    let x = t.constant(Array::from_vec(vec![-1.0, 0.0, 2.0]));
    let y = t.relu(x);
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn mean_pool_of_identical_rows_is_the_row() {
    let v = [0.1, -3.7, 1e-9, 42.0];
    let mut t = Tape::new();
    let rows: Vec<f64> = v.iter().copied().cycle().take(12).collect();
    let x = t.constant(Array::new(vec![3, 4], rows).unwrap());
    let p = t.mean_pool_set(x);
    for (a, b) in t.value(p).data().iter().zip(&v) {
        assert!((a - b).abs() <= 1e-15 * b.abs());
    }
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut rng = RngStream::new(1);
    let input = rand_array(&mut rng, &[8, 8, 1]);
    let kernel = rand_array(&mut rng, &[3, 3, 1, 1]);
    let mut t = Tape::new();
    let x = t.constant(input.clone());
    let k = t.constant(kernel.clone());
    let y = t.conv2d(x, k, 2).unwrap();
    assert_eq!(t.shape(y), &[3, 3, 1]);
    let reference = conv_reference(&input.reshape(&[1, 8, 8, 1]).unwrap(), &kernel, 2);
    assert_close(&t.value(y).clone().reshape(&[1, 3, 3, 1]).unwrap(), &reference, 1e-12);

    let input = rand_array(&mut rng, &[2, 9, 7, 3]);
    let kernel = rand_array(&mut rng, &[3, 2, 3, 4]);
    let mut t = Tape::new();
    let x = t.constant(input.clone());
    let k = t.constant(kernel.clone());
    let y = t.conv2d(x, k, 2).unwrap();
    assert_close(t.value(y), &conv_reference(&input, &kernel, 2), 1e-12);
}

#[test]
fn conv_transpose_matches_scatter_reference() {
    let mut rng = RngStream::new(2);
    for (stride, pad, size) in [(2, 1, 4), (2, 0, 2), (1, 0, 3), (3, 1, 3)] {
        let input = rand_array(&mut rng, &[2, 3, 4, 5]);
        let kernel = rand_array(&mut rng, &[5, size, size, 2]);
        let mut t = Tape::new();
        let x = t.constant(input.clone());
        let k = t.constant(kernel.clone());
        let y = t.conv_transpose2d(x, k, stride, pad).unwrap();
        assert_close(t.value(y), &conv_t_reference(&input, &kernel, stride, pad), 1e-12);
    }
}

#[test]
fn conv_transpose_doubles_resolution() {
    let mut t = Tape::new();
    let x = t.constant(Array::zeros(&[1, 8, 8, 16]));
    let k = t.constant(Array::zeros(&[16, 4, 4, 8]));
    let y = t.conv_transpose2d(x, k, 2, 1).unwrap();
    assert_eq!(t.shape(y), &[1, 16, 16, 8]);
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Array::zeros(&[2, 3]));
    let b = t.constant(Array::zeros(&[4, 2]));
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    assert!(t.add(a, b).is_err());
    let img = t.constant(Array::zeros(&[1, 5, 5, 2]));
    let k = t.constant(Array::zeros(&[3, 3, 1, 4]));
    assert!(matches!(t.conv2d(img, k, 1), Err(DiffError::Shape { op: "conv2d", .. })));
    let k = t.constant(Array::zeros(&[3, 3, 2, 4]));
    assert!(t.conv2d(img, k, 0).is_err());
}

#[test]
fn relu_sum_gradient() {
    let mut store = ParameterStore::new();
    let id = store.add("x", Array::from_vec(vec![-1.0, 2.0])).unwrap();
    let mut t = Tape::new();
    let x = t.param(&store, id);
    let r = t.relu(x);
    let loss = t.sum(r);
    t.backward(loss, &mut store).unwrap();
    assert_eq!(store.grad(id).data(), &[0.0, 1.0]);
}

#[test]
fn constant_loss_gives_zero_gradients() {
    let mut store = ParameterStore::new();
    let id = store.add("w", Array::from_vec(vec![1.0, 2.0])).unwrap();
    let mut t = Tape::new();
    let _unused = t.param(&store, id);
    let c = t.constant(Array::from_vec(vec![3.0, 4.0]));
    let loss = t.sum(c);
    t.backward(loss, &mut store).unwrap();
    assert_eq!(store.grad(id).data(), &[0.0, 0.0]);
    assert!(!store.touched(id));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut store = ParameterStore::new();
    let id = store.add("w", Array::from_vec(vec![1.0, 2.0])).unwrap();
    let mut t = Tape::new();
    let w = t.param(&store, id);
    assert!(matches!(t.backward(w, &mut store), Err(DiffError::NonScalarLoss(_))));
}

#[test]
fn linear_mse_matches_finite_differences() {
    let mut rng = RngStream::new(3);
    let mut store = ParameterStore::new();
    store.add("W", rand_array(&mut rng, &[4, 3])).unwrap();
    let x = rand_array(&mut rng, &[3, 1]);
    let y = rand_array(&mut rng, &[4, 1]);
    let report = grad_check(
        &mut store,
        |t, s| {
            let w = t.param(s, s.id("W").unwrap());
            let xv = t.constant(x.clone());
            let yv = t.constant(y.clone());
            let p = t.matmul(w, xv)?;
            t.mse(p, yv)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_err() < 1e-5, "{report:?}");
}

#[test]
fn linear_loss_is_exact() {
    let mut store = ParameterStore::new();
    store.add("w", Array::from_vec(vec![0.3, -1.2, 2.0])).unwrap();
    let report = grad_check(
        &mut store,
        |t, s| {
            let w = t.param(s, s.id("w").unwrap());
            let c = t.constant(Array::from_vec(vec![1.0, 0.5, -2.0]));
            let p = t.mul(w, c)?;
            Ok(t.sum(p))
        },
        // Central differences are exact on a linear loss for any step; a
        // larger step keeps roundoff below the bound.
        GradCheckOptions {
            h: 1e-3,
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_err() < 1e-10, "{report:?}");
}

/// Shift values away from zero so relu kinks are not crossed by the stencil.
fn offset_from_zero(mut a: Array) -> Array {
    a.data_mut().iter_mut().for_each(|x| *x += 0.2 * x.signum());
    a
}

#[test]
fn every_differentiable_op_passes_gradcheck() {
    for seed in 0..3u64 {
        let mut rng = RngStream::new(100 + seed);
        let mut store = ParameterStore::new();
        store.add("a", rand_array(&mut rng, &[3, 4])).unwrap();
        store.add("b", rand_array(&mut rng, &[4, 2])).unwrap();
        store.add("bias", rand_array(&mut rng, &[2])).unwrap();
        store.add("img", offset_from_zero(rand_array(&mut rng, &[2, 7, 7, 2]))).unwrap();
        store.add("k", rand_array(&mut rng, &[3, 3, 2, 3])).unwrap();
        store.add("kt", rand_array(&mut rng, &[3, 4, 4, 2])).unwrap();
        store.add("qm", rand_array(&mut rng, &[2, 3])).unwrap();
        store.add("ql", rand_array(&mut rng, &[2, 3])).unwrap();
        store.add("pm", rand_array(&mut rng, &[2, 3])).unwrap();
        store.add("pl", rand_array(&mut rng, &[2, 3])).unwrap();
        let targets = rand_array(&mut rng, &[2, 3]).map(|x| if x > 0.0 { 1.0 } else { 0.3 });
        let eps = rand_array(&mut rng, &[2, 3]);
        let report = grad_check(
            &mut store,
            |t, s| {
                let p = |t: &mut Tape, n: &str| t.param(s, s.id(n).unwrap());
                let a = p(t, "a");
                let b = p(t, "b");
                let bias = p(t, "bias");
                let ab = t.matmul(a, b)?;
                let ab = t.add_bias(ab, bias)?;
                let r = t.relu(ab);
                let e = t.exp(ab);
                let e = t.scale(e, 0.1);
                let m = t.mul(r, e)?;
                let pooled = t.mean_pool_set(m);
                let rep = t.repeat_rows(pooled, 3)?;
                let cat = t.concat(&[rep, ab])?;
                let sl = t.slice_cols(cat, 1, 3)?;
                let diff = t.sub(sl, ab)?;
                let l1 = t.sum(diff);
                let l2 = t.mse(sl, ab)?;

                let img = p(t, "img");
                let k = p(t, "k");
                let conv = t.conv2d(img, k, 2)?;
                let conv = t.relu(conv);
                let kt = p(t, "kt");
                let up = t.conv_transpose2d(conv, kt, 2, 1)?;
                let flat = t.reshape(up, &[2, 6 * 6 * 2])?;
                let logits = t.slice_cols(flat, 0, 3)?;
                let l3 = t.bernoulli_nll(logits, &targets)?;

                let qm = p(t, "qm");
                let ql = p(t, "ql");
                let ql = t.clamp(ql, -10.0, 10.0);
                let pm = p(t, "pm");
                let pl = p(t, "pl");
                let l4 = t.kl_diag(qm, ql, pm, pl)?;
                let z = t.reparameterize(qm, ql, eps.clone())?;
                let zz = t.mul(z, z)?;
                let l5 = t.sum(zz);

                let s1 = t.add(l1, l2)?;
                let s2 = t.add(l3, l4)?;
                let s3 = t.add(s1, s2)?;
                t.add(s3, l5)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {:?}", report.worst());
    }
}

#[test]
fn detach_blocks_gradient() {
    let mut store = ParameterStore::new();
    let id = store.add("w", Array::from_vec(vec![1.0, 2.0])).unwrap();
    let mut t = Tape::new();
    let w = t.param(&store, id);
    let d = t.detach(w);
    let m = t.mul(w, d).unwrap();
    let loss = t.sum(m);
    t.backward(loss, &mut store).unwrap();
    // d/dw (w * stopgrad(w)) = stopgrad(w)
    assert_eq!(store.grad(id).data(), &[1.0, 2.0]);
}

#[test]
fn bernoulli_nll_reference_values() {
    let mut t = Tape::new();
    let l = t.constant(Array::zeros(&[4]));
    let nll = t.bernoulli_nll(l, &Array::from_vec(vec![0.0, 1.0, 0.3, 1.0])).unwrap();
    assert!((t.value(nll).item() - 4.0 * 2f64.ln()).abs() < 1e-12);
    let l = t.constant(Array::from_vec(vec![10.0, -10.0]));
    let nll = t.bernoulli_nll(l, &Array::from_vec(vec![1.0, 0.0])).unwrap();
    assert!(t.value(nll).item() / 2.0 < 1e-4);
    let l = t.constant(Array::from_vec(vec![0.0]));
    assert!(t.bernoulli_nll(l, &Array::from_vec(vec![1.5])).is_err());
}

proptest! {
    #[test]
    fn mean_pool_is_permutation_invariant(
        rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 5), 1..12),
        seed in any::<u64>(),
    ) {
        let n = rows.len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let mut perm: Vec<usize> = (0..n).collect();
        RngStream::new(seed).shuffle(&mut perm);
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| rows[i].clone()).collect();
        let mut t = Tape::new();
        let a = t.constant(Array::new(vec![n, 5], flat).unwrap());
        let b = t.constant(Array::new(vec![n, 5], permuted).unwrap());
        let pa = t.mean_pool_set(a);
        let pb = t.mean_pool_set(b);
        for (x, y) in t.value(pa).data().iter().zip(t.value(pb).data()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_when_equal(
        qm in prop::collection::vec(-5.0f64..5.0, 4),
        ql in prop::collection::vec(-5.0f64..5.0, 4),
        pm in prop::collection::vec(-5.0f64..5.0, 4),
        pl in prop::collection::vec(-5.0f64..5.0, 4),
    ) {
        let q = DiagonalGaussian::new(qm.clone(), ql.clone()).unwrap();
        let p = DiagonalGaussian::new(pm, pl).unwrap();
        let kl = q.kl(&p).unwrap();
        prop_assert!(kl >= 0.0);
        if q != p {
            prop_assert!(kl > 0.0);
        }
        prop_assert_eq!(q.kl(&q).unwrap(), 0.0);
    }
}

use crate::diffcore::DiagonalGaussian;
