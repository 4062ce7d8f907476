use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct six-loop convolution used as the reference.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let [n, ci, h, wd] = x.dims4().unwrap();
    let [co, _, k, _] = w.dims4().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for bi in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at4(o, c, ky, kx) * x.at4(bi, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.data_mut()[((bi * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn run_conv(x: Tensor<f64>, w: Tensor<f64>, b: Tensor<f64>, stride: usize, pad: usize) -> crate::Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let (x, w, b) = (tape.input(x, false), tape.input(w, false), tape.input(b, false));
    let y = tape.conv2d(x, w, Some(b), stride, pad)?;
    Ok(tape.value(y).clone())
}

#[test]
fn pointwise_conv_aligns_aux_width_to_stage_width() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(Tensor::full(&[1, 1024, 32, 32], 0.01), false);
    let w = tape.input(Tensor::full(&[144, 1024, 1, 1], 0.5), false);
    let b = tape.input(Tensor::zeros(&[144]), false);
    let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 144, 32, 32]);
}

#[test]
fn identity_kernel_leaves_input_unchanged() {
    let x = seeded(&[2, 1, 5, 7], 3);
    let y = run_conv(x.clone(), Tensor::full(&[1, 1, 1, 1], 1.0), Tensor::zeros(&[1]), 1, 0).unwrap();
    assert!(y.bit_eq(&x));
}

#[test]
fn conv3x3_matches_direct_loop_oracle() {
    let x = seeded(&[1, 4, 8, 8], 11);
    let w = seeded(&[5, 4, 3, 3], 12);
    let b = seeded(&[5], 13);
    let got = run_conv(x.clone(), w.clone(), b.clone(), 1, 1).unwrap();
    let want = conv_oracle(&x, &w, b.data(), 1, 1);
    assert_eq!(got.shape(), &[1, 5, 8, 8]);
    for (g, e) in got.data().iter().zip(want.data()) {
        assert!((g - e).abs() < 1e-12);
    }
}

#[test]
fn strided_conv_matches_oracle() {
    for &(k, stride, pad, h) in &[(3, 2, 1, 9), (4, 4, 0, 16), (2, 2, 0, 6), (3, 3, 2, 7)] {
        let x = seeded(&[2, 3, h, h + 1], 20 + k as u64);
        let w = seeded(&[2, 3, k, k], 30 + k as u64);
        let b = seeded(&[2], 40);
        let got = run_conv(x.clone(), w.clone(), b.clone(), stride, pad).unwrap();
        let want = conv_oracle(&x, &w, b.data(), stride, pad);
        assert_eq!(got.shape(), want.shape());
        for (g, e) in got.data().iter().zip(want.data()) {
            assert!((g - e).abs() < 1e-12, "k={k} s={stride} p={pad}");
        }
    }
}

#[test]
fn conv_shape_mismatch_names_both_shapes() {
    let err = run_conv(
        Tensor::zeros(&[1, 3, 4, 4]),
        Tensor::zeros(&[2, 4, 1, 1]),
        Tensor::zeros(&[2]),
        1,
        0,
    )
    .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 4, 1, 1]"), "{msg}");
}

fn run_bn(x: Tensor<f64>, gamma: f64, beta: f64, mode: Mode) -> crate::Result<(Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
    let c = x.dims4()?[1];
    let mut tape = Tape::new();
    let xv = tape.input(x, false);
    let g = tape.input(Tensor::full(&[c], gamma), false);
    let b = tape.input(Tensor::full(&[c], beta), false);
    let mut rm = Tensor::zeros(&[c]);
    let mut rv = Tensor::full(&[c], 1.0);
    let y = tape.batch_norm(xv, g, b, &mut rm, &mut rv, mode)?;
    Ok((tape.value(y).clone(), rm, rv))
}

#[test]
fn batch_norm_of_constant_channels_is_zero() {
    let x = Tensor::from_fn(&[2, 3, 4, 4], |i| (i / 16 % 3) as f64 * 2.5);
    let (y, _, _) = run_bn(x, 1.0, 0.0, Mode::Train).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_with_zero_gamma_outputs_beta() {
    let (y, _, _) = run_bn(seeded(&[2, 3, 4, 4], 5), 0.0, 5.0, Mode::Train).unwrap();
    assert!(y.data().iter().all(|&v| v == 5.0));
}

#[test]
fn batch_norm_matches_two_pass_statistics() {
    let x = seeded(&[2, 3, 4, 4], 77);
    let (y, rm, rv) = run_bn(x.clone(), 1.0, 0.0, Mode::Train).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..2)
            .flat_map(|n| (0..16).map(move |i| (n, i)))
            .map(|(n, i)| x.at4(n, c, i / 4, i % 4))
            .collect();
        let mean = vals.iter().sum::<f64>() / 32.0;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
        for n in 0..2 {
            for i in 0..16 {
                let expect = (x.at4(n, c, i / 4, i % 4) - mean) / (var + 1e-5).sqrt();
                assert!((y.at4(n, c, i / 4, i % 4) - expect).abs() < 1e-6);
            }
        }
        assert!((rm.data()[c] - 0.1 * mean).abs() < 1e-12);
        assert!((rv.data()[c] - (0.9 + 0.1 * var * 32.0 / 31.0)).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_eval_uses_running_stats() {
    let x = seeded(&[1, 2, 3, 3], 8);
    let (y, _, _) = run_bn(x.clone(), 2.0, 1.0, Mode::Eval).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - (2.0 * b / (1.0f64 + 1e-5).sqrt() + 1.0)).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_single_value_per_channel_is_degenerate() {
    let err = run_bn(Tensor::zeros(&[1, 4, 1, 1]), 1.0, 0.0, Mode::Train).unwrap_err();
    assert!(matches!(err, Error::DegenerateVariance(1)));
    assert!(run_bn(Tensor::zeros(&[1, 4, 1, 1]), 1.0, 0.0, Mode::Eval).is_ok());
}

#[test]
fn activations_at_reference_points() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::new(vec![1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap(), false);
    let r = tape.relu(x);
    let g = tape.gelu(x);
    let s = tape.sigmoid(x);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    assert_eq!(tape.value(g).data()[1], 0.0);
    assert_eq!(tape.value(s).data()[1], 0.5);
    // exact erf form: gelu(1) = 0.5 * (1 + erf(1/sqrt 2))
    let mut t2 = Tape::<f64>::new();
    let one = t2.input(Tensor::scalar(1.0), false);
    let g1 = t2.gelu(one);
    assert!((t2.value(g1).data()[0] - 0.841_344_746_068_542_9).abs() < 1e-15);
}

#[test]
fn resize_shapes_and_identity() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(Tensor::full(&[1, 2, 32, 32], 1.0), false);
    let up = tape.resize_bilinear(x, 256, 256).unwrap();
    assert_eq!(tape.shape(up), &[1, 2, 256, 256]);

    let mut tape = Tape::<f64>::new();
    let x0 = seeded(&[1, 3, 6, 5], 9);
    let x = tape.input(x0.clone(), false);
    let same = tape.resize_bilinear(x, 6, 5).unwrap();
    assert!(tape.value(same).bit_eq(&x0));
}

#[test]
fn bilinear_upscale_matches_hand_weights() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap(), false);
    let y = tape.resize_bilinear(x, 4, 4).unwrap();
    let expect = [
        0.0, 0.25, 0.75, 1.0, //
        0.5, 0.75, 1.25, 1.5, //
        1.5, 1.75, 2.25, 2.5, //
        2.0, 2.25, 2.75, 3.0,
    ];
    assert_eq!(tape.value(y).data(), &expect);
}

#[test]
fn concat_widths_and_order() {
    let mut tape = Tape::<f32>::symbolic();
    let a = tape.input(Tensor::symbolic(&[1, 144, 256, 256]), false);
    let b = tape.input(Tensor::symbolic(&[1, 144, 256, 256]), false);
    let c = tape.concat_channels(a, b).unwrap();
    assert_eq!(tape.shape(c), &[1, 288, 256, 256]);

    let mut tape = Tape::<f64>::new();
    let a0 = seeded(&[1, 2, 3, 3], 1);
    let a = tape.input(a0.clone(), false);
    let empty = tape.input(Tensor::zeros(&[1, 0, 3, 3]), false);
    let c = tape.concat_channels(a, empty).unwrap();
    assert!(tape.value(c).bit_eq(&a0));

    let p = tape.input(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(), false);
    let q = tape.input(Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap(), false);
    let pq = tape.concat_channels(p, q).unwrap();
    let qp = tape.concat_channels(q, p).unwrap();
    assert_eq!(tape.value(pq).data(), &[1.0, 2.0]);
    assert_eq!(tape.value(qp).data(), &[2.0, 1.0]);
}

#[test]
fn concat_spatial_mismatch_is_an_error() {
    let mut tape = Tape::<f32>::new();
    let a = tape.input(Tensor::zeros(&[1, 1, 4, 4]), false);
    let b = tape.input(Tensor::zeros(&[1, 1, 4, 5]), false);
    let msg = tape.concat_channels(a, b).unwrap_err().to_string();
    assert!(msg.contains("[1, 1, 4, 4]") && msg.contains("[1, 1, 4, 5]"));
}

#[test]
fn linear_scalar_gradient() {
    let mut reg = ParamRegistry::<f64>::new();
    let w = reg.register("w", Tensor::scalar(0.7), true, false).unwrap();
    let x0 = seeded(&[1, 2, 3, 3], 4);
    let mut tape = Tape::new();
    let x = tape.input(x0.clone(), false);
    let wv = tape.param(&reg, w);
    let y = tape.scale(x, wv).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss, &mut reg).unwrap();
    let g = reg.param(w).grad.as_ref().unwrap().data()[0];
    assert!((g - x0.data().iter().sum::<f64>()).abs() < 1e-12);
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut reg = ParamRegistry::<f64>::new();
    let frozen = reg.register("frozen", Tensor::scalar(2.0), false, false).unwrap();
    let live = reg.register("live", Tensor::scalar(3.0), true, false).unwrap();
    let mut tape = Tape::new();
    let x = tape.input(seeded(&[1, 1, 2, 2], 2), false);
    let f = tape.param(&reg, frozen);
    let l = tape.param(&reg, live);
    let y = tape.scale(x, f).unwrap();
    let y = tape.scale(y, l).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss, &mut reg).unwrap();
    assert!(reg.param(frozen).grad.is_none());
    assert!(reg.param(live).grad.is_some());
}

#[test]
fn backward_before_forward_is_a_state_error() {
    let mut reg = ParamRegistry::<f64>::new();
    let mut other = Tape::<f64>::new();
    let v = other.input(Tensor::scalar(1.0), false);
    let empty = Tape::<f64>::new();
    assert!(matches!(empty.backward(v, &mut reg), Err(Error::State(_))));
}

/// Central finite differences over every trainable element.
fn fd_check(
    reg: &mut ParamRegistry<f64>,
    step: f64,
    tol: f64,
    build: &dyn Fn(&mut Tape<f64>, &mut ParamRegistry<f64>) -> Var,
) {
    reg.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, reg);
    tape.backward(loss, reg).unwrap();
    let ids: Vec<ParamId> = reg.ids().filter(|&id| reg.param(id).trainable).collect();
    for id in ids {
        let analytic = reg.param(id).grad.clone().expect("reachable parameter has a grad");
        for i in 0..analytic.numel() {
            let orig = reg.param(id).values.data()[i];
            let mut eval = |v: f64| {
                reg.param_mut(id).values.data_mut()[i] = v;
                let mut t = Tape::new();
                let l = build(&mut t, reg);
                t.value(l).data()[0]
            };
            let plus = eval(orig + step);
            let minus = eval(orig - step);
            eval(orig);
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(rel <= tol, "{}[{i}]: analytic {a} numeric {numeric} rel {rel}", reg.name(id));
        }
    }
}

#[test]
fn composed_network_gradients_match_finite_differences() {
    let mut reg = ParamRegistry::<f64>::new();
    let mut init = Initializer::new(&mut reg, 99, false);
    let c1 = Conv2d::new(&mut init, "c1", ConvSpec { c_in: 2, c_out: 3, k: 3, stride: 1, pad: 1, bias: true, trainable: true, init: Init::He }).unwrap();
    let bn = BatchNorm2d::new(&mut init, "bn", 3, true).unwrap();
    let c2 = Conv2d::new(&mut init, "c2", ConvSpec { c_in: 3, c_out: 2, k: 3, stride: 2, pad: 1, bias: true, trainable: true, init: Init::He }).unwrap();
    let c3 = Conv2d::new(&mut init, "c3", ConvSpec::pointwise(5, 1)).unwrap();
    let skip = init.param("skip", &[1], Init::Normal(1.0), true, false).unwrap();
    for id in [c1.b.unwrap(), c2.b.unwrap(), c3.b.unwrap(), bn.beta] {
        let n = reg.param(id).values.numel();
        reg.param_mut(id).values = seeded(&[n], 500 + id.0 as u64);
    }
    let x0 = seeded(&[2, 2, 6, 6], 123);
    let build = move |tape: &mut Tape<f64>, reg: &mut ParamRegistry<f64>| {
        let x = tape.input(x0.clone(), false);
        let h = c1.forward(tape, reg, x).unwrap();
        let h = bn.forward(tape, reg, h, Mode::Train).unwrap();
        let h = tape.gelu(h);
        let d = c2.forward(tape, reg, h).unwrap();
        let d = tape.sigmoid(d);
        let u = tape.resize_bilinear(d, 6, 6).unwrap();
        let h2 = tape.resize_bilinear(h, 6, 6).unwrap();
        let cat = tape.concat_channels(u, h2).unwrap();
        let out = c3.forward(tape, reg, cat).unwrap();
        let s = tape.param(reg, skip);
        let out2 = tape.scale(out, s).unwrap();
        let both = tape.add(out, out2).unwrap();
        let sq = tape.gelu(both);
        tape.mean(sq)
    };
    fd_check(&mut reg, 1e-3, 1e-4, &build);
}

#[test]
fn eval_batch_norm_and_downscale_gradients() {
    let mut reg = ParamRegistry::<f64>::new();
    let mut init = Initializer::new(&mut reg, 7, false);
    let c = Conv2d::new(&mut init, "c", ConvSpec { c_in: 1, c_out: 2, k: 3, stride: 1, pad: 1, bias: true, trainable: true, init: Init::He }).unwrap();
    let bn = BatchNorm2d::new(&mut init, "bn", 2, true).unwrap();
    reg.buffer_mut(bn.running_mean).data_mut().copy_from_slice(&[0.2, -0.1]);
    reg.buffer_mut(bn.running_var).data_mut().copy_from_slice(&[1.5, 0.7]);
    let x0 = seeded(&[1, 1, 7, 9], 1);
    let build = move |tape: &mut Tape<f64>, reg: &mut ParamRegistry<f64>| {
        let x = tape.input(x0.clone(), false);
        let h = c.forward(tape, reg, x).unwrap();
        let h = bn.forward(tape, reg, h, Mode::Eval).unwrap();
        let h = tape.resize_bilinear(h, 3, 4).unwrap();
        let h = tape.sigmoid(h);
        tape.sum(h)
    };
    fd_check(&mut reg, 1e-3, 1e-4, &build);
}

#[test]
fn relu_gradient_away_from_kink() {
    let mut reg = ParamRegistry::<f64>::new();
    let w = reg.register("w", Tensor::new(vec![1, 1, 1, 1], vec![1.3]).unwrap(), true, true).unwrap();
    let x0 = Tensor::new(vec![1, 1, 2, 2], vec![-1.0, 0.5, 2.0, -0.3]).unwrap();
    let build = move |tape: &mut Tape<f64>, reg: &mut ParamRegistry<f64>| {
        let x = tape.input(x0.clone(), false);
        let wv = tape.param(reg, w);
        let y = tape.conv2d(x, wv, None, 1, 0).unwrap();
        let y = tape.relu(y);
        tape.sum(y)
    };
    fd_check(&mut reg, 1e-3, 1e-4, &build);
}

#[test]
fn input_gradients_are_returned() {
    let mut reg = ParamRegistry::<f64>::new();
    let mut tape = Tape::new();
    let x = tape.input(seeded(&[1, 1, 2, 2], 3), true);
    let y = tape.sum(x);
    let grads = tape.backward(y, &mut reg).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(seeded(&[1, 3, 9, 9], 5).cast(), false);
        let w = tape.input(seeded(&[4, 3, 3, 3], 6).cast(), false);
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        let y = tape.gelu(y);
        let y = tape.resize_bilinear(y, 13, 7).unwrap();
        tape.value(y).clone()
    };
    assert!(run().bit_eq(&run()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_shape_formula(h in 1usize..20, w in 1usize..20, k in 1usize..5, stride in 1usize..4, pad in 0usize..3,
                          ci in 1usize..4, co in 1usize..4) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::zeros(&[1, ci, h, w]), false);
        let wt = tape.input(Tensor::zeros(&[co, ci, k, k]), false);
        let y = tape.conv2d(x, wt, None, stride, pad).unwrap();
        prop_assert_eq!(tape.shape(y), &[1, co, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1]);
    }

    #[test]
    fn resize_and_concat_shapes(h in 1usize..12, w in 1usize..12, oh in 1usize..24, ow in 1usize..24,
                                ca in 0usize..4, cb in 0usize..4, n in 1usize..3) {
        let mut tape = Tape::<f32>::new();
        let a = tape.input(Tensor::full(&[n, ca, h, w], 1.0), false);
        let b = tape.input(Tensor::full(&[n, cb, h, w], 2.0), false);
        let r = tape.resize_bilinear(a, oh, ow).unwrap();
        prop_assert_eq!(tape.shape(r), &[n, ca, oh, ow]);
        prop_assert!(tape.value(r).data().iter().all(|&v| v == 1.0));
        let c = tape.concat_channels(a, b).unwrap();
        prop_assert_eq!(tape.shape(c), &[n, ca + cb, h, w]);
    }

    #[test]
    fn ops_keep_values_finite(seed in 0u64..1000) {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(seeded(&[1, 2, 5, 5], seed).map(|v| v * 50.0).cast(), false);
        let w = tape.input(seeded(&[2, 2, 3, 3], seed + 1).cast(), false);
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        for v in [tape.gelu(y), tape.sigmoid(y), tape.relu(y)] {
            prop_assert!(tape.value(v).all_finite());
        }
    }
}
