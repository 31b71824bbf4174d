#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::seeded_rng;

/// Central-difference gradient of `f` with respect to each input, compared
/// against the tape. Returns the worst norm-wise relative error.
pub(crate) fn gradcheck(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> crate::Result<Var>) -> f64 {
    let h = 1e-5;
    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.numel()];
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            numeric[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        worst = worst.max(if scale > 1e-10 { diff / scale } else { diff });
    }
    worst
}

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Reduces any output to a scalar through fixed random weights.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = seeded_rng(seed);
    let w = rand_tensor(tape.value(out).shape(), &mut rng);
    let wv = tape.constant(w);
    let p = tape.mul(out, wv)?;
    tape.sum(p)
}

const TOL: f64 = 1e-4;

#[test]
fn gradients_of_elementwise_ops() {
    let mut rng = seeded_rng(1);
    for trial in 0..5 {
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let b = rand_tensor(&[2, 3, 4], &mut rng);
        let s = rand_tensor(&[1], &mut rng);
        let seed = trial as u64;
        assert!(gradcheck(&[a.clone(), b.clone()], &|t, v| { let o = t.add(v[0], v[1])?; weighted_sum(t, o, seed) }) < TOL);
        assert!(gradcheck(&[a.clone(), b.clone()], &|t, v| { let o = t.sub(v[0], v[1])?; weighted_sum(t, o, seed) }) < TOL);
        assert!(gradcheck(&[a.clone(), b.clone()], &|t, v| { let o = t.mul(v[0], v[1])?; weighted_sum(t, o, seed) }) < TOL);
        assert!(gradcheck(&[a.clone(), s.clone()], &|t, v| { let o = t.mul(v[0], v[1])?; weighted_sum(t, o, seed) }) < TOL);
        assert!(gradcheck(&[s.clone(), a.clone()], &|t, v| { let o = t.mul(v[0], v[1])?; weighted_sum(t, o, seed) }) < TOL);
        assert!(gradcheck(std::slice::from_ref(&a), &|t, v| { let o = t.scale(v[0], -2.5)?; weighted_sum(t, o, seed) }) < TOL);
        assert!(gradcheck(std::slice::from_ref(&a), &|t, v| { let o = t.relu(v[0])?; weighted_sum(t, o, seed) }) < TOL);
        assert!(gradcheck(std::slice::from_ref(&a), &|t, v| t.sum(v[0])) < TOL);
        assert!(gradcheck(std::slice::from_ref(&a), &|t, v| t.mean(v[0])) < TOL);
        assert!(gradcheck(&[a, b], &|t, v| t.mse_mean(v[0], v[1])) < TOL);
    }
}

#[test]
fn gradients_of_spatial_ops() {
    let mut rng = seeded_rng(2);
    for trial in 0..4 {
        let seed = 100 + trial as u64;
        let x = rand_tensor(&[2, 3, 6, 6], &mut rng);
        let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        for (stride, padding) in [(1, 1), (1, 0), (2, 1)] {
            let err = gradcheck(&[x.clone(), w.clone(), b.clone()], &|t, v| {
                let o = t.conv2d(v[0], v[1], v[2], stride, padding)?;
                weighted_sum(t, o, seed)
            });
            assert!(err < TOL, "conv stride {stride} padding {padding}: {err}");
        }
        assert!(gradcheck(std::slice::from_ref(&x), &|t, v| { let o = t.maxpool2d(v[0], 2)?; weighted_sum(t, o, seed) }) < TOL);
        assert!(gradcheck(std::slice::from_ref(&x), &|t, v| { let o = t.upsample_nearest(v[0], 2)?; weighted_sum(t, o, seed) }) < TOL);
        let y = rand_tensor(&[2, 2, 6, 6], &mut rng);
        assert!(gradcheck(&[x.clone(), y], &|t, v| { let o = t.concat_channels(v[0], v[1])?; weighted_sum(t, o, seed) }) < TOL);
        assert!(gradcheck(&[x], &|t, v| { let o = t.global_avg_pool(v[0])?; weighted_sum(t, o, seed) }) < TOL);
    }
}

#[test]
fn gradients_of_linear_and_cross_entropy() {
    let mut rng = seeded_rng(3);
    for trial in 0..5 {
        let x = rand_tensor(&[3, 5], &mut rng);
        let w = rand_tensor(&[4, 5], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let seed = 200 + trial as u64;
        assert!(gradcheck(&[x.clone(), w.clone(), b.clone()], &|t, v| {
            let o = t.linear(v[0], v[1], v[2])?;
            weighted_sum(t, o, seed)
        }) < TOL);
        let labels = [0, 3, 1];
        assert!(gradcheck(&[x, w, b], &|t, v| {
            let o = t.linear(v[0], v[1], v[2])?;
            t.softmax_cross_entropy(o, &labels)
        }) < TOL);
    }
}

/// Direct six-loop cross-correlation.
fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (f, _, kh, kw) = w.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, f, oh, ow]);
    for ni in 0..n {
        for fi in 0..f {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data()[fi];
                    for ci in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let (r, q) = ((i * stride + u) as isize - pad as isize, (j * stride + v) as isize - pad as isize);
                                if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < wd {
                                    acc += x.data()[((ni * c + ci) * h + r as usize) * wd + q as usize]
                                        * w.data()[((fi * c + ci) * kh + u) * kw + v];
                                }
                            }
                        }
                    }
                    out.data_mut()[((ni * f + fi) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = seeded_rng(4);
    for (stride, pad, k) in [(1, 1, 3), (1, 0, 3), (2, 1, 3), (1, 0, 1), (2, 2, 5)] {
        let x = rand_tensor(&[2, 3, 9, 7], &mut rng);
        let w = rand_tensor(&[4, 3, k, k], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let out = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
        let want = naive_conv(&x, &w, &b, stride, pad);
        assert_eq!(tape.value(out).shape(), want.shape());
        let err = tape.value(out).zip_map(&want, |a, b| (a - b).abs()).unwrap().max_abs();
        assert!(err < 1e-12, "stride {stride} pad {pad} k {k}: {err}");
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[3, 1, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(tape.conv2d(x, w, b, 1, 1).is_err());
    let w = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
    let bad_bias = tape.constant(Tensor::zeros(&[2]));
    assert!(tape.conv2d(x, w, bad_bias, 1, 1).is_err());
    assert!(tape.conv2d(x, w, b, 0, 1).is_err());
    let big = tape.constant(Tensor::zeros(&[3, 2, 7, 7]));
    assert!(tape.conv2d(x, big, b, 1, 1).is_err());
}

#[test]
fn maxpool_picks_block_maxima() {
    let x = Tensor::new(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 2.0, 0.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.variable(x);
    let y = tape.maxpool2d(xv, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0, 2.0]);
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    // ties go to the first maximum
    assert_eq!(g.get(xv).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

    let mut tape = Tape::new();
    let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
    assert!(tape.maxpool2d(odd, 2).is_err());
}

#[test]
fn upsample_and_concat_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64));
    let up = tape.upsample_nearest(a, 2).unwrap();
    assert_eq!(tape.value(up).shape(), &[1, 2, 4, 4]);
    assert_eq!(&tape.value(up).data()[..4], &[0.0, 0.0, 1.0, 1.0]);
    let b = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
    let c = tape.concat_channels(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[1, 5, 2, 2]);
    let wrong = tape.constant(Tensor::zeros(&[1, 3, 3, 2]));
    assert!(tape.concat_channels(a, wrong).is_err());
}

#[test]
fn backward_requires_scalar_and_reaches_only_leaves() {
    let mut tape = Tape::new();
    let a = tape.variable(Tensor::ones(&[3]));
    let c = tape.constant(Tensor::ones(&[3]));
    let s = tape.add(a, c).unwrap();
    assert!(tape.backward(s).is_err());

    let mut tape = Tape::new();
    let a = tape.variable(Tensor::ones(&[3]));
    let c = tape.constant(Tensor::ones(&[3]));
    let p = tape.mul(a, c).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[1.0, 1.0, 1.0]);
    assert!(g.get(c).is_none());
    assert!(tape.is_empty());
}

#[test]
fn reused_variable_accumulates() {
    let mut tape = Tape::new();
    let a = tape.variable(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
    let sq = tape.mul(a, a).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[2.0, -4.0]);
}

#[test]
fn finite_check_flags_nan() {
    let mut tape = Tape::new().with_finite_check(true);
    let a = tape.variable(Tensor::new(&[1], vec![f64::NAN]).unwrap());
    assert!(matches!(tape.scale(a, 2.0), Err(crate::Error::Numerical(_))));
    let mut tape = Tape::new();
    let a = tape.variable(Tensor::new(&[1], vec![f64::NAN]).unwrap());
    assert!(tape.scale(a, 2.0).is_ok());
}

#[test]
fn tensor_shape_errors() {
    assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
    assert!(Tensor::zeros(&[2, 3]).reshape(&[5]).is_err());
    assert_eq!(Tensor::zeros(&[2, 3]).reshape(&[3, 2]).unwrap().shape(), &[3, 2]);
    assert!(Tensor::zeros(&[2]).item().is_err());
    let a = Tensor::ones(&[1, 1, 2, 2]);
    let b = Tensor::zeros(&[1, 1, 2, 2]);
    let s = Tensor::stack(&[&a, &b]).unwrap();
    assert_eq!(s.shape(), &[2, 1, 2, 2]);
    assert_eq!(s.select(1).unwrap(), b);
    assert!(s.select(2).is_err());
    assert!(Tensor::stack(&[&a, &Tensor::zeros(&[1, 1, 3, 2])]).is_err());
}

#[test]
fn adam_first_step_matches_hand_formula() {
    let mut params = ParamSet::new();
    params.insert("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
    let cfg = AdamConfig::default();
    let mut opt = Adam::new(cfg, &params);
    let g = [0.5, -2.0];
    params.iter_mut().next().unwrap().grad = Some(Tensor::new(&[2], g.to_vec()).unwrap());
    opt.step(&mut params).unwrap();
    // m̂ = g, v̂ = g², so each weight moves by lr·g/(|g| + eps)
    for (i, &gi) in g.iter().enumerate() {
        let start = if i == 0 { 1.0 } else { -1.0 };
        let want = start - cfg.lr * gi / (gi.abs() + cfg.eps);
        assert!((params.get(0).value.data()[i] - want).abs() < 1e-15);
    }
    assert_eq!(opt.steps(), 1);
    assert!(params.get(0).grad.is_none());
}

#[test]
fn adam_two_steps_follow_bias_corrected_moments() {
    let mut params = ParamSet::new();
    params.insert("w", Tensor::new(&[1], vec![0.3]).unwrap());
    let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
    let mut opt = Adam::new(cfg, &params);
    let (mut m, mut v, mut w) = (0.0, 0.0, 0.3);
    for (t, g) in [(1, 0.2), (2, -0.7)] {
        params.iter_mut().next().unwrap().grad = Some(Tensor::new(&[1], vec![g]).unwrap());
        opt.step(&mut params).unwrap();
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let mh = m / (1.0 - cfg.beta1.powi(t));
        let vh = v / (1.0 - cfg.beta2.powi(t));
        w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        assert!((params.get(0).value.data()[0] - w).abs() < 1e-15);
    }
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut params = ParamSet::new();
    params.insert("w", Tensor::zeros(&[1]));
    let mut opt = Adam::new(AdamConfig::default(), &params);
    params.iter_mut().next().unwrap().grad = Some(Tensor::new(&[1], vec![f64::INFINITY]).unwrap());
    assert!(matches!(opt.step(&mut params), Err(crate::Error::Numerical(_))));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let mut rng = seeded_rng(9);
    let mut params = ParamSet::new();
    params.insert("conv.weight", rand_tensor(&[2, 1, 3, 3], &mut rng));
    params.insert("conv.bias", rand_tensor(&[2], &mut rng));
    params.insert("scalar", Tensor::scalar(f64::MIN_POSITIVE));
    let bytes = encode_checkpoint(&params);
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.checksum(), params.checksum());
    assert_eq!(back.by_name("conv.bias").unwrap().value, params.by_name("conv.bias").unwrap().value);

    assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_checkpoint(&extra).is_err());
    let mut bad = bytes;
    bad[0] = b'X';
    assert!(decode_checkpoint(&bad).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.pcal");
    write_checkpoint(&path, &params).unwrap();
    assert_eq!(read_checkpoint(&path).unwrap().checksum(), params.checksum());
    std::fs::write(&path, b"nope").unwrap();
    assert!(matches!(read_checkpoint(&path), Err(crate::Error::Format { .. })));
}

#[test]
fn param_set_hashes_and_loading() {
    let mut a = ParamSet::new();
    a.insert("w", Tensor::zeros(&[2]));
    let mut b = ParamSet::new();
    b.insert("w", Tensor::ones(&[2]));
    assert_eq!(a.architecture_hash(), b.architecture_hash());
    assert_ne!(a.checksum(), b.checksum());
    a.load_from(&b).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    let mut c = ParamSet::new();
    c.insert("w", Tensor::zeros(&[3]));
    assert!(a.load_from(&c).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn linearity_of_gradients(scale in -3.0f64..3.0, seed in 0u64..1000) {
        let mut rng = seeded_rng(seed);
        let x = rand_tensor(&[1, 2, 4, 4], &mut rng);
        let w = rand_tensor(&[2, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[2], &mut rng);
        let grad = |factor: f64| {
            let mut tape = Tape::new();
            let xv = tape.variable(x.clone());
            let (wv, bv) = (tape.constant(w.clone()), tape.constant(b.clone()));
            let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
            let s = tape.sum(y).unwrap();
            let l = tape.scale(s, factor).unwrap();
            tape.backward(l).unwrap().take(xv).unwrap()
        };
        let g1 = grad(1.0);
        let gs = grad(scale);
        for (a, b) in g1.data().iter().zip(gs.data()) {
            prop_assert!((a * scale - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn mse_mean_is_symmetric_and_non_negative(seed in 0u64..1000, n in 1usize..20) {
        let mut rng = seeded_rng(seed);
        let a = rand_tensor(&[n], &mut rng);
        let b = rand_tensor(&[n], &mut rng);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a), tape.constant(b));
        let ab = tape.mse_mean(av, bv).unwrap();
        let ba = tape.mse_mean(bv, av).unwrap();
        prop_assert_eq!(tape.value(ab).item().unwrap(), tape.value(ba).item().unwrap());
        prop_assert!(tape.value(ab).item().unwrap() >= 0.0);
    }
}
